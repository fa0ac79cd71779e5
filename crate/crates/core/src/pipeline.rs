//! End-to-end helpers shared by the command line, the Python bindings and
//! the experiment harnesses.

use std::fs;
use std::path::{Path, PathBuf};

use crate::colorspace::{extract_palette, Palette};
use crate::config::PipelineConfig;
use crate::detector::{recall, train_toy, DetectorWeights};
use crate::error::{Error, Result};
use crate::geometry::TARGET_CLASS;
use crate::io::{format_annotations, load_image, parse_annotations, save_image, Image, LossRecord};
use crate::metrics::{attack_success_rate, patch_ssim};
use crate::patchgen::{quantize_to_palette, render_hard, PatchParams, RenderedPatch};
use crate::rng::derive_seed;
use crate::scene::{environment_sample, synthesize_dataset, synthesize_environment, Scene};
use crate::tensor::Tensor;
use crate::trainer::{evaluate_mean_obj, EpochSummary, TeacherPatch};

/// The three disjoint scene sets of a run.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub detector: Vec<Scene>,
    pub train: Vec<Scene>,
    pub eval: Vec<Scene>,
}

pub fn synthesize_datasets(cfg: &PipelineConfig) -> Result<Datasets> {
    let sc = cfg.scene_config();
    let base = |tag| derive_seed(cfg.data_seed, tag);
    Ok(Datasets {
        detector: synthesize_dataset(base("detector-scenes"), cfg.detector_scenes, &sc)?,
        train: synthesize_dataset(base("train-scenes"), cfg.train_scenes, &sc)?,
        eval: synthesize_dataset(base("eval-scenes"), cfg.eval_scenes, &sc)?,
    })
}

/// Background-only images sharing the scenes' color theme.
pub fn environment_images(cfg: &PipelineConfig) -> Result<Vec<Tensor>> {
    let sc = cfg.scene_config();
    (0..cfg.environment_images as u64)
        .map(|i| synthesize_environment(derive_seed(cfg.data_seed, "environment").wrapping_add(i), &sc))
        .collect()
}

pub fn palette_from_images(images: &[Tensor], colors: usize, seed: u64, iters: usize) -> Result<Palette> {
    let refs: Vec<&Tensor> = images.iter().collect();
    extract_palette(&environment_sample(&refs), colors, seed, iters)
}

/// Palette for a run: clustered from the environment images with the
/// run seed.
pub fn run_palette(cfg: &PipelineConfig) -> Result<Palette> {
    palette_from_images(
        &environment_images(cfg)?,
        cfg.run.palette_size,
        derive_seed(cfg.run.seed, "palette"),
        cfg.kmeans_iters,
    )
}

pub fn train_detector(cfg: &PipelineConfig, scenes: &[Scene]) -> Result<DetectorWeights> {
    let mut tc = cfg.detector_train.clone();
    tc.seed = cfg.data_seed;
    train_toy(scenes, &cfg.detector, &tc)
}

/// Target-class recall at the evaluation score threshold and IoU 0.5.
pub fn detector_recall(cfg: &PipelineConfig, weights: &DetectorWeights, scenes: &[Scene]) -> Result<f64> {
    recall(weights, scenes, TARGET_CLASS, cfg.conf_threshold, 0.5)
}

pub fn steps_per_epoch(scenes: usize, batch_size: usize) -> usize {
    scenes.div_ceil(batch_size.max(1))
}

/// Per-epoch means recovered from a step log.
pub fn epoch_summaries(records: &[LossRecord], steps_per_epoch: usize) -> Vec<EpochSummary> {
    records
        .chunks(steps_per_epoch.max(1))
        .enumerate()
        .map(|(epoch, rs)| {
            let n = rs.len() as f64;
            EpochSummary {
                epoch,
                l_adv: rs.iter().map(|r| r.l_adv).sum::<f64>() / n,
                l_distill: rs.iter().map(|r| r.l_distill).sum::<f64>() / n,
                mean_obj: rs.iter().map(|r| r.mean_obj).sum::<f64>() / n,
            }
        })
        .collect()
}

/// Deterministic evaluation of one patch on held-out scenes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchEval {
    pub asr: f64,
    pub mean_obj: f64,
}

pub fn evaluate_patch(
    cfg: &PipelineConfig,
    weights: &DetectorWeights,
    scenes: &[Scene],
    patch: &RenderedPatch,
) -> Result<PatchEval> {
    let scale = cfg.run.eot.patch_scale;
    Ok(PatchEval {
        asr: attack_success_rate(scenes, patch, weights, cfg.conf_threshold, scale)?.asr(),
        mean_obj: evaluate_mean_obj(scenes, patch, weights, scale)?,
    })
}

/// SSIM between a hard-rendered student and the palette-quantized teacher.
pub fn teacher_similarity(student: &PatchParams, teacher: &TeacherPatch) -> Result<f64> {
    let tq = quantize_to_palette(&teacher.rendered(), &student.palette);
    patch_ssim(&render_hard(student), &tq)
}

/// Writes `NNNN.ppm` images with `NNNN.txt` annotations.
pub fn save_scenes(dir: &Path, scenes: &[Scene]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, s) in scenes.iter().enumerate() {
        save_image(&Image::from_tensor(&s.image)?, &dir.join(format!("{i:04}.ppm")))?;
        fs::write(dir.join(format!("{i:04}.txt")), format_annotations(&s.boxes))?;
    }
    Ok(())
}

/// Sorted `*.ppm` files of a directory.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "ppm"));
    paths.sort();
    Ok(paths)
}

/// Scenes from a directory written by [`save_scenes`]; every image needs an
/// annotation file with the same stem.
pub fn load_scenes(dir: &Path) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    for img in list_images(dir)? {
        let ann = img.with_extension("txt");
        let text = fs::read_to_string(&ann)
            .map_err(|e| Error::arg(format!("annotations {}: {e}", ann.display())))?;
        scenes.push(Scene::from_parts(load_image(&img)?.to_tensor(), parse_annotations(&text)?)?);
    }
    if scenes.is_empty() {
        return Err(Error::arg(format!("no scenes in {}", dir.display())));
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{synthesize_dataset, SceneConfig};

    #[test]
    fn scene_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = synthesize_dataset(3, 3, &SceneConfig::default()).unwrap();
        save_scenes(dir.path(), &scenes).unwrap();
        let back = load_scenes(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in back.iter().zip(&scenes) {
            assert_eq!(a.boxes, b.boxes);
            assert!(a.image.data().iter().zip(b.image.data()).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-12));
        }
        fs::remove_file(dir.path().join("0001.txt")).unwrap();
        assert!(load_scenes(dir.path()).is_err());
    }

    #[test]
    fn epoch_means() {
        let rec = |step, v| LossRecord {
            step,
            l_adv: v,
            l_distill: 2.0 * v,
            l_total: 0.0,
            mean_obj: v,
        };
        let e = epoch_summaries(&[rec(0, 1.0), rec(1, 3.0), rec(2, 5.0)], 2);
        assert_eq!(e.len(), 2);
        assert_eq!((e[0].l_adv, e[0].l_distill, e[1].mean_obj), (2.0, 4.0, 5.0));
        assert_eq!(steps_per_epoch(200, 8), 25);
        assert_eq!(steps_per_epoch(9, 8), 2);
    }
}
