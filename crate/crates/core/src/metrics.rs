//! Evaluation: global SSIM, attack success rate and confidence curves.

use std::fmt::Write as _;

use crate::detector::{decode, DetectorWeights};
use crate::error::{Error, Result};
use crate::geometry::TARGET_CLASS;
use crate::io::parse_loss_csv;
use crate::patchgen::RenderedPatch;
use crate::scene::{paste_patch, Scene};
use crate::tensor::Tensor;

/// BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of pixel values.
    pub l: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            k1: 0.01,
            k2: 0.03,
            l: 255.0,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.l).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.l).powi(2)
    }
}

/// `[H, W]` luminance of a `[3, H, W]` image; `[H, W]` input is returned as is.
pub fn luminance(img: &Tensor) -> Result<Tensor> {
    match img.shape() {
        [_, _] => Ok(img.clone()),
        [3, h, w] => {
            let plane = h * w;
            let d = img.data();
            let data = (0..plane)
                .map(|p| (0..3).map(|c| LUMA[c] * d[c * plane + p]).sum())
                .collect();
            Tensor::new(vec![*h, *w], data)
        }
        s => Err(Error::arg(format!("expected [H, W] or [3, H, W] image, got {s:?}"))),
    }
}

/// Single-window SSIM over whole images, with population statistics.
/// Values must already be on the `params.l` scale.
pub fn ssim(x: &Tensor, y: &Tensor, params: &SsimParams) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            left: x.shape().to_vec(),
            right: y.shape().to_vec(),
        });
    }
    let (x, y) = (luminance(x)?, luminance(y)?);
    let (a, b) = (x.data(), y.data());
    let n = a.len() as f64;
    let mx = a.iter().sum::<f64>() / n;
    let my = b.iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for (&p, &q) in a.iter().zip(b) {
        vx += (p - mx) * (p - mx);
        vy += (q - my) * (q - my);
        cxy += (p - mx) * (q - my);
    }
    let (vx, vy, cxy) = (vx / n, vy / n, cxy / n);
    let (c1, c2) = (params.c1(), params.c2());
    Ok((2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
}

/// SSIM of two patches compared as 8-bit images.
pub fn patch_ssim(a: &RenderedPatch, b: &RenderedPatch) -> Result<f64> {
    let to255 = |p: &RenderedPatch| p.image.map(|v| (v.clamp(0.0, 1.0) * 255.0).round());
    ssim(&to255(a), &to255(b), &SsimParams::default())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AsrResult {
    pub total_frames: usize,
    pub attacked_frames: usize,
}

impl AsrResult {
    pub fn asr(&self) -> f64 {
        if self.total_frames == 0 {
            0.0
        } else {
            self.attacked_frames as f64 / self.total_frames as f64
        }
    }
}

/// Minimum overlap for a detection to count as finding a target.
pub const ASR_MATCH_IOU: f64 = 0.5;
/// Suppression overlap used when decoding for evaluation.
pub const EVAL_NMS_IOU: f64 = 0.5;

/// Whether no target-class detection scoring `≥ conf` overlaps a target box.
pub fn frame_attacked(weights: &DetectorWeights, image: &Tensor, scene: &Scene, conf: f64) -> Result<bool> {
    let dets = decode(&weights.predict(image)?, conf, EVAL_NMS_IOU);
    Ok(!dets.iter().any(|d| {
        d.class_id == TARGET_CLASS
            && scene
                .target_boxes()
                .any(|g| d.bbox.iou(&g.bbox) >= ASR_MATCH_IOU)
    }))
}

/// Fraction of frames where the patch (pasted without augmentation) hides
/// every target.
pub fn attack_success_rate(
    scenes: &[Scene],
    patch: &RenderedPatch,
    weights: &DetectorWeights,
    conf_threshold: f64,
    patch_scale: f64,
) -> Result<AsrResult> {
    if scenes.is_empty() {
        return Err(Error::arg("attack success rate needs at least one frame"));
    }
    let mut attacked = 0;
    for s in scenes {
        let img = paste_patch(s, &patch.image, patch_scale)?;
        if frame_attacked(weights, &img, s, conf_threshold)? {
            attacked += 1;
        }
    }
    Ok(AsrResult {
        total_frames: scenes.len(),
        attacked_frames: attacked,
    })
}

/// `(epoch, mean objectness)` points from a loss CSV whose steps run
/// `steps_per_epoch` per epoch.
pub fn confidence_curve(log_csv: &str, steps_per_epoch: usize) -> Result<Vec<(usize, f64)>> {
    if steps_per_epoch == 0 {
        return Err(Error::arg("steps_per_epoch must be positive"));
    }
    let mut points: Vec<(usize, f64, usize)> = Vec::new();
    for r in parse_loss_csv(log_csv)? {
        let e = r.step / steps_per_epoch;
        match points.last_mut() {
            Some(p) if p.0 == e => {
                p.1 += r.mean_obj;
                p.2 += 1;
            }
            _ => points.push((e, r.mean_obj, 1)),
        }
    }
    Ok(points.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect())
}

/// One labelled confidence curve.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub run: String,
    pub beta: f64,
    pub points: Vec<(usize, f64)>,
}

/// `run,beta,epoch,mean_obj` rows.
pub fn format_curves(curves: &[Curve]) -> String {
    let mut s = String::from("run,beta,epoch,mean_obj\n");
    for c in curves {
        for (e, v) in &c.points {
            let _ = writeln!(s, "{},{},{e},{v}", c.run, c.beta);
        }
    }
    s
}
