//! Flat `key=value` configuration for the whole pipeline.
//!
//! Every key has a default; unknown keys are rejected. `#` starts a comment.

use std::path::Path;

use crate::detector::{DetectorConfig, DetectorTrainConfig};
use crate::error::{Error, Result};
use crate::scene::SceneConfig;
use crate::trainer::{RunConfig, TeacherInit};

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub run: RunConfig,
    pub detector: DetectorConfig,
    pub detector_train: DetectorTrainConfig,
    /// Seed for scene synthesis and detector training; mirrored into
    /// `detector_train.seed`.
    pub data_seed: u64,
    /// Scenes used for patch optimization.
    pub train_scenes: usize,
    /// Scenes used to train the detector.
    pub detector_scenes: usize,
    /// Held-out scenes for evaluation.
    pub eval_scenes: usize,
    /// Background-only images pooled for palette extraction.
    pub environment_images: usize,
    pub max_targets: usize,
    pub conf_threshold: f64,
    pub kmeans_iters: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            run: RunConfig::default(),
            detector: DetectorConfig::default(),
            detector_train: DetectorTrainConfig {
                seed: 1,
                ..DetectorTrainConfig::default()
            },
            data_seed: 1,
            train_scenes: 200,
            detector_scenes: 500,
            eval_scenes: 100,
            environment_images: 4,
            max_targets: 3,
            conf_threshold: 0.5,
            kmeans_iters: 100,
        }
    }
}

fn join<T: ToString>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl PipelineConfig {
    pub fn scene_config(&self) -> SceneConfig {
        let size = self.detector.input_size;
        let base = SceneConfig::default();
        // keep target sizes proportional to the default 64-px layout
        let k = size as f64 / base.size as f64;
        SceneConfig {
            size,
            max_targets: self.max_targets,
            target_height: (base.target_height.0 * k, base.target_height.1 * k),
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        self.detector.validate()?;
        self.detector_train.validate()?;
        self.scene_config().validate()?;
        if self.train_scenes == 0 || self.detector_scenes == 0 || self.eval_scenes == 0 {
            return Err(Error::Config("scene counts must be positive".into()));
        }
        if self.environment_images == 0 {
            return Err(Error::Config("environment_images must be positive".into()));
        }
        if !(self.conf_threshold > 0.0 && self.conf_threshold < 1.0) {
            return Err(Error::Config("eval.conf_threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let r = &self.run;
        let d = &self.detector;
        vec![
            ("seed", r.seed.to_string()),
            ("epochs", r.epochs.to_string()),
            ("batch_size", r.batch_size.to_string()),
            ("teacher_lr", r.teacher_lr.to_string()),
            ("student_lr", r.student_lr.to_string()),
            ("beta", r.beta.to_string()),
            ("omega", r.omega.to_string()),
            ("patch_size", r.patch_size.to_string()),
            ("palette_size", r.palette_size.to_string()),
            (
                "teacher_init",
                match r.teacher_init {
                    TeacherInit::Uniform => "uniform",
                    TeacherInit::Gray => "gray",
                }
                .to_string(),
            ),
            ("eot.contrast_lo", r.eot.contrast.0.to_string()),
            ("eot.contrast_hi", r.eot.contrast.1.to_string()),
            ("eot.brightness_lo", r.eot.brightness.0.to_string()),
            ("eot.brightness_hi", r.eot.brightness.1.to_string()),
            ("eot.noise_std", r.eot.noise_std.to_string()),
            ("eot.rotation_deg", r.eot.rotation_deg.to_string()),
            ("eot.patch_scale", r.eot.patch_scale.to_string()),
            ("loss.lambda1", r.adv_weights.lambda1.to_string()),
            ("loss.lambda2", r.adv_weights.lambda2.to_string()),
            ("loss.lambda3", r.adv_weights.lambda3.to_string()),
            ("mask.strategy", r.mask.strategy.to_string()),
            ("mask.th_cls", r.mask.th_cls.to_string()),
            ("mask.th_obj", r.mask.th_obj.to_string()),
            ("detector.input_size", d.input_size.to_string()),
            ("detector.grid", d.grid.to_string()),
            (
                "detector.anchors",
                join(d.anchors.iter().map(|(w, h)| format!("{w}x{h}"))),
            ),
            ("detector.num_classes", d.num_classes.to_string()),
            ("detector.channels", join(d.channels)),
            ("detector.epochs", self.detector_train.epochs.to_string()),
            ("detector.batch_size", self.detector_train.batch_size.to_string()),
            ("detector.learning_rate", self.detector_train.learning_rate.to_string()),
            ("detector.flip_prob", self.detector_train.flip_prob.to_string()),
            ("detector.occlude_prob", self.detector_train.occlude_prob.to_string()),
            ("detector.occluder_scale", self.detector_train.occluder_scale.to_string()),
            ("data.seed", self.data_seed.to_string()),
            ("data.train_scenes", self.train_scenes.to_string()),
            ("data.detector_scenes", self.detector_scenes.to_string()),
            ("data.eval_scenes", self.eval_scenes.to_string()),
            ("data.environment_images", self.environment_images.to_string()),
            ("data.max_targets", self.max_targets.to_string()),
            ("eval.conf_threshold", self.conf_threshold.to_string()),
            ("palette.kmeans_iters", self.kmeans_iters.to_string()),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        PipelineConfig::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    /// Assign one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        }
        let r = &mut self.run;
        let d = &mut self.detector;
        match key {
            "seed" => r.seed = num(key, value)?,
            "epochs" => r.epochs = num(key, value)?,
            "batch_size" => r.batch_size = num(key, value)?,
            "teacher_lr" => r.teacher_lr = num(key, value)?,
            "student_lr" => r.student_lr = num(key, value)?,
            "beta" => r.beta = num(key, value)?,
            "omega" => r.omega = num(key, value)?,
            "patch_size" => r.patch_size = num(key, value)?,
            "palette_size" => r.palette_size = num(key, value)?,
            "teacher_init" => {
                r.teacher_init = match value {
                    "uniform" => TeacherInit::Uniform,
                    "gray" => TeacherInit::Gray,
                    _ => return Err(Error::Config(format!("teacher_init must be uniform or gray, got {value:?}"))),
                }
            }
            "eot.contrast_lo" => r.eot.contrast.0 = num(key, value)?,
            "eot.contrast_hi" => r.eot.contrast.1 = num(key, value)?,
            "eot.brightness_lo" => r.eot.brightness.0 = num(key, value)?,
            "eot.brightness_hi" => r.eot.brightness.1 = num(key, value)?,
            "eot.noise_std" => r.eot.noise_std = num(key, value)?,
            "eot.rotation_deg" => r.eot.rotation_deg = num(key, value)?,
            "eot.patch_scale" => r.eot.patch_scale = num(key, value)?,
            "loss.lambda1" => r.adv_weights.lambda1 = num(key, value)?,
            "loss.lambda2" => r.adv_weights.lambda2 = num(key, value)?,
            "loss.lambda3" => r.adv_weights.lambda3 = num(key, value)?,
            "mask.strategy" => r.mask.strategy = value.parse()?,
            "mask.th_cls" => r.mask.th_cls = num(key, value)?,
            "mask.th_obj" => r.mask.th_obj = num(key, value)?,
            "detector.input_size" => d.input_size = num(key, value)?,
            "detector.grid" => d.grid = num(key, value)?,
            "detector.anchors" => {
                d.anchors = value
                    .split(',')
                    .map(|a| {
                        let (w, h) = a
                            .split_once('x')
                            .ok_or_else(|| Error::Config(format!("anchor {a:?} is not WxH")))?;
                        Ok((num(key, w)?, num(key, h)?))
                    })
                    .collect::<Result<_>>()?
            }
            "detector.num_classes" => d.num_classes = num(key, value)?,
            "detector.channels" => {
                let v: Vec<usize> = value
                    .split(',')
                    .map(|c| num(key, c))
                    .collect::<Result<_>>()?;
                d.channels = v
                    .try_into()
                    .map_err(|_| Error::Config("detector.channels needs four widths".into()))?;
            }
            "detector.epochs" => self.detector_train.epochs = num(key, value)?,
            "detector.batch_size" => self.detector_train.batch_size = num(key, value)?,
            "detector.learning_rate" => self.detector_train.learning_rate = num(key, value)?,
            "detector.flip_prob" => self.detector_train.flip_prob = num(key, value)?,
            "detector.occlude_prob" => self.detector_train.occlude_prob = num(key, value)?,
            "detector.occluder_scale" => self.detector_train.occluder_scale = num(key, value)?,
            "data.seed" => self.data_seed = num(key, value)?,
            "data.train_scenes" => self.train_scenes = num(key, value)?,
            "data.detector_scenes" => self.detector_scenes = num(key, value)?,
            "data.eval_scenes" => self.eval_scenes = num(key, value)?,
            "data.environment_images" => self.environment_images = num(key, value)?,
            "data.max_targets" => self.max_targets = num(key, value)?,
            "eval.conf_threshold" => self.conf_threshold = num(key, value)?,
            "palette.kmeans_iters" => self.kmeans_iters = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        self.detector_train.seed = self.data_seed;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Defaults overridden by the keys present in `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = PipelineConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key=value, got {raw:?}"),
            })?;
            c.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::MaskStrategy;

    #[test]
    fn round_trip_defaults_and_overrides() {
        let d = PipelineConfig::default();
        assert_eq!(PipelineConfig::parse(&d.to_text()).unwrap(), d);
        let mut c = d.clone();
        c.set("beta", "0.01").unwrap();
        c.set("mask.strategy", "obj_and_cls").unwrap();
        c.set("detector.anchors", "10.5x20,30x12").unwrap();
        c.set("eot.rotation_deg", "0").unwrap();
        let p = PipelineConfig::parse(&c.to_text()).unwrap();
        assert_eq!(p, c);
        assert_eq!(p.run.mask.strategy, MaskStrategy::ObjAndCls);
    }

    #[test]
    fn unknown_key_reports_line() {
        let e = PipelineConfig::parse("beta=1\n\nlearning_rate=3\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e}");
        assert!(e.to_string().contains("unknown key"));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(PipelineConfig::parse("epochs=0").is_err());
        assert!(PipelineConfig::parse("mask.th_cls=1.5").is_err());
        assert!(PipelineConfig::parse("detector.grid=7").is_err());
        assert!(PipelineConfig::parse("eot.contrast_lo=2").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = PipelineConfig::parse("# header\nseed = 4 # trailing\n").unwrap();
        assert_eq!(c.run.seed, 4);
    }
}
