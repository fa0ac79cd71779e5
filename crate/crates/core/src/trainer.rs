//! Patch optimization: an unconstrained teacher patch over raw pixels, and
//! a palette-constrained student patch over color logits, optionally guided
//! by the teacher through masked feature distillation.
//!
//! Both loops share one structure: per epoch the scenes are shuffled and cut
//! into batches; per batch the patch is rendered, pasted onto every scene
//! under a fresh EOT draw, passed through the frozen detector, and the mean
//! per-image loss is minimized with Adam. The epoch with the lowest mean
//! adversarial loss is kept as the result.
//!
//! Random draws happen in a fixed order (shuffle, then per batch: Gumbel
//! noise for students, then one EOT sample per scene), and the teacher pass
//! consumes none, so a distilled run with `beta = 0` retraces the
//! undistilled run exactly.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::colorspace::Palette;
use crate::detector::{DetectorWeights, Prediction};
use crate::error::{Error, Result};
use crate::geometry::{GtBox, TARGET_CLASS};
use crate::io::{Bundle, LossRecord};
use crate::losses::{adversarial_loss, distillation_loss, mean_matched_obj, total_loss, AdvLossWeights, MaskConfig};
use crate::optim::Adam;
use crate::patchgen::{render_soft_with_noise, sample_gumbel, PatchParams, RenderedPatch};
use crate::rng::{derive_seed, seeded, Rng, RngState};
use crate::scene::{sample_eot, EotConfig, Placement, Scene};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TeacherInit {
    Uniform,
    Gray,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub teacher_lr: f64,
    pub student_lr: f64,
    pub seed: u64,
    pub eot: EotConfig,
    pub adv_weights: AdvLossWeights,
    pub mask: MaskConfig,
    pub beta: f64,
    pub omega: f64,
    /// Patch side in pixels.
    pub patch_size: usize,
    pub palette_size: usize,
    pub teacher_init: TeacherInit,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 8,
            teacher_lr: 0.03,
            student_lr: 0.01,
            seed: 0,
            eot: EotConfig::default(),
            adv_weights: AdvLossWeights::default(),
            mask: MaskConfig::default(),
            beta: 1.0,
            omega: crate::patchgen::DEFAULT_OMEGA,
            patch_size: 16,
            palette_size: 8,
            teacher_init: TeacherInit::Uniform,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1");
        }
        if !(self.teacher_lr >= 0.0 && self.student_lr >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if !(self.beta >= 0.0) {
            return bad("beta must be non-negative");
        }
        if !(self.omega > 0.0) {
            return bad("omega must be positive");
        }
        if self.patch_size < 2 || self.palette_size == 0 {
            return bad("patch_size must be at least 2 and palette_size positive");
        }
        self.eot.validate()?;
        self.adv_weights.validate()?;
        self.mask.validate()
    }
}

/// Unconstrained patch, `[3, P, P]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherPatch {
    pub pixels: Tensor,
}

impl TeacherPatch {
    pub fn rendered(&self) -> RenderedPatch {
        RenderedPatch {
            image: self.pixels.clone(),
        }
    }

    pub fn to_bundle(&self) -> Bundle {
        let mut b = Bundle::new("teacher-patch");
        b.push("pixels", self.pixels.clone());
        b
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        let pixels = b.tensor("pixels")?.clone();
        match pixels.shape() {
            [3, h, w] if h == w && *h > 0 => Ok(Self { pixels }),
            s => Err(Error::Checkpoint(format!("teacher patch must be [3, P, P], got {s:?}"))),
        }
    }
}

/// Per-epoch means.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub l_adv: f64,
    pub l_distill: f64,
    pub mean_obj: f64,
}

/// What the optimizer is working on.
pub enum Role<'a> {
    Teacher,
    Student {
        teacher: &'a TeacherPatch,
        palette: &'a Palette,
        distill: bool,
    },
}

impl Role<'_> {
    fn tag(&self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student { distill: true, .. } => "student-distill",
            Role::Student { distill: false, .. } => "student-plain",
        }
    }
}

/// Mutable optimization state; everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct RunState {
    /// Next epoch to run.
    pub epoch: usize,
    pub step: usize,
    pub params: Tensor,
    pub adam: Adam,
    pub rng: Rng,
    pub best: Tensor,
    pub best_score: f64,
    pub best_epoch: usize,
    pub records: Vec<LossRecord>,
    pub epochs: Vec<EpochSummary>,
}

/// One teacher or student optimization.
pub struct PatchRun<'a> {
    pub config: &'a RunConfig,
    pub dataset: &'a [Scene],
    pub weights: &'a DetectorWeights,
    pub role: Role<'a>,
    pub state: RunState,
    targets: Vec<Vec<GtBox>>,
}

impl<'a> PatchRun<'a> {
    pub fn new(
        config: &'a RunConfig,
        dataset: &'a [Scene],
        weights: &'a DetectorWeights,
        role: Role<'a>,
    ) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::arg("patch training needs at least one scene"));
        }
        let targets: Vec<Vec<GtBox>> = dataset
            .iter()
            .map(|s| s.target_boxes().copied().collect())
            .collect();
        if targets.iter().any(Vec::is_empty) {
            return Err(Error::arg("every training scene needs a target box"));
        }
        let p = config.patch_size;
        let (params, lr, rng) = match &role {
            Role::Teacher => {
                let mut init = seeded(derive_seed(config.seed, "teacher-init"));
                let pixels = match config.teacher_init {
                    TeacherInit::Uniform => {
                        let data = (0..3 * p * p).map(|_| init.random::<f64>()).collect();
                        Tensor::new(vec![3, p, p], data)?
                    }
                    TeacherInit::Gray => Tensor::full(&[3, p, p], 0.5),
                };
                (pixels, config.teacher_lr, seeded(derive_seed(config.seed, "teacher-train")))
            }
            Role::Student { teacher, palette, .. } => {
                if teacher.pixels.shape() != [3, p, p] {
                    return Err(Error::arg(format!(
                        "teacher patch {:?} does not match patch size {p}",
                        teacher.pixels.shape()
                    )));
                }
                if palette.len() == 1 {
                    log::warn!("single-color palette: the student patch cannot vary");
                }
                let mut init = seeded(derive_seed(config.seed, "student-init"));
                let pp = PatchParams::random((*palette).clone(), p, p, config.omega, &mut init)?;
                (pp.logits, config.student_lr, seeded(derive_seed(config.seed, "student-train")))
            }
        };
        let adam = Adam::new(lr, &[&params]);
        Ok(Self {
            config,
            dataset,
            weights,
            role,
            state: RunState {
                epoch: 0,
                step: 0,
                best: params.clone(),
                params,
                adam,
                rng,
                best_score: f64::INFINITY,
                best_epoch: 0,
                records: Vec::new(),
                epochs: Vec::new(),
            },
            targets,
        })
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.config.epochs
    }

    /// Run epochs until done.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn run_epoch(&mut self) -> Result<EpochSummary> {
        let n = self.dataset.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.state.rng);
        let (mut adv, mut dis, mut obj) = (0.0, 0.0, 0.0);
        for batch in order.chunks(self.config.batch_size) {
            let rec = self.step(batch)?;
            let k = batch.len() as f64;
            adv += rec.l_adv * k;
            dis += rec.l_distill * k;
            obj += rec.mean_obj * k;
        }
        let summary = EpochSummary {
            epoch: self.state.epoch,
            l_adv: adv / n as f64,
            l_distill: dis / n as f64,
            mean_obj: obj / n as f64,
        };
        log::debug!("{} epoch {}: {summary:?}", self.role.tag(), self.state.epoch);
        // end-of-epoch parameters stand for the epoch
        if summary.l_adv < self.state.best_score {
            self.state.best_score = summary.l_adv;
            self.state.best = self.state.params.clone();
            self.state.best_epoch = self.state.epoch;
        }
        self.state.epochs.push(summary);
        self.state.epoch += 1;
        Ok(summary)
    }

    fn step(&mut self, batch: &[usize]) -> Result<LossRecord> {
        let cfg = self.config;
        let tape = Tape::new();
        let det = self.weights.bind(&tape, false);
        let params = tape.leaf(self.state.params.clone());
        let (patch, teacher_patch, distill) = match &self.role {
            Role::Teacher => (params, None, false),
            Role::Student {
                teacher,
                palette,
                distill,
            } => {
                let gumbel = sample_gumbel(self.state.params.shape(), &mut self.state.rng);
                let r = render_soft_with_noise(params, palette, cfg.omega, &gumbel)?;
                (r.image, Some(tape.constant(teacher.pixels.clone())), *distill)
            }
        };
        let mut adv_sum: Option<Var> = None;
        let mut dis_sum: Option<Var> = None;
        let mut obj_sum = 0.0;
        for &i in batch {
            let scene = &self.dataset[i];
            let gt = &self.targets[i];
            let sample = sample_eot(scene, &cfg.eot, &mut self.state.rng);
            let placement = Placement::new(scene, &sample, &cfg.eot, cfg.patch_size)?;
            let img = placement.apply(patch)?;
            let out = det.forward(img)?;
            let pred = out.prediction();
            obj_sum += mean_matched_obj(&pred, gt);
            let adv = adversarial_loss(&out, gt, &cfg.adv_weights, TARGET_CLASS)?;
            adv_sum = Some(accumulate(adv_sum, adv)?);
            if distill {
                let tp = teacher_patch.expect("students carry a teacher");
                let t_img = placement.apply(tp)?;
                let t_out = det.forward(t_img)?;
                let fs = out.feat.shape();
                let mask_t = cfg.mask.mask(&t_out.prediction(), (fs[1], fs[2]));
                let mask_s = cfg.mask.mask(&pred, (fs[1], fs[2]));
                let d = distillation_loss(t_out.feat, out.feat, &mask_t, &mask_s)?;
                dis_sum = Some(accumulate(dis_sum, d)?);
            }
        }
        let inv = 1.0 / batch.len() as f64;
        let l_adv = adv_sum.expect("non-empty batch").scale(inv);
        let (loss, l_distill) = match dis_sum {
            Some(d) => {
                let d = d.scale(inv);
                (total_loss(l_adv, d, cfg.beta)?, d.value().item())
            }
            None => (l_adv, 0.0),
        };
        let record = LossRecord {
            step: self.state.step,
            l_adv: l_adv.value().item(),
            l_distill,
            l_total: loss.value().item(),
            mean_obj: obj_sum * inv,
        };
        if !record.l_total.is_finite() {
            return Err(Error::Diverged {
                step: self.state.step,
                seed: cfg.seed,
                what: format!("{} loss", self.role.tag()),
            });
        }
        let grads = tape.backward(loss)?;
        let g = grads.get_or_zeros(params);
        if !g.all_finite() {
            return Err(Error::Diverged {
                step: self.state.step,
                seed: cfg.seed,
                what: format!("{} gradient", self.role.tag()),
            });
        }
        self.state.adam.step(&mut [&mut self.state.params], &[g])?;
        if matches!(self.role, Role::Teacher) {
            self.state.params = self.state.params.map(|v| v.clamp(0.0, 1.0));
        }
        self.state.records.push(record);
        self.state.step += 1;
        Ok(record)
    }

    /// Serializable snapshot of the full optimization state.
    pub fn checkpoint(&self) -> Bundle {
        let s = &self.state;
        let mut b = Bundle::new("checkpoint");
        b.set_meta("role", self.role.tag());
        b.set_meta("seed", self.config.seed);
        b.set_meta("epoch", s.epoch);
        b.set_meta("step", s.step);
        b.set_meta("best_epoch", s.best_epoch);
        b.set_meta("best_score_bits", s.best_score.to_bits());
        b.set_meta("adam_t", s.adam.t);
        let rs = RngState::capture(&s.rng);
        let seed_hex: String = rs.seed.iter().map(|x| format!("{x:02x}")).collect();
        b.set_meta("rng_seed", seed_hex);
        b.set_meta("rng_stream", rs.stream);
        b.set_meta("rng_word_pos", rs.word_pos);
        b.push("params", s.params.clone());
        b.push("best", s.best.clone());
        b.push("adam_m", s.adam.m[0].clone());
        b.push("adam_v", s.adam.v[0].clone());
        if !s.records.is_empty() {
            let data = s
                .records
                .iter()
                .flat_map(|r| [r.step as f64, r.l_adv, r.l_distill, r.l_total, r.mean_obj])
                .collect();
            b.push("records", Tensor::new(vec![s.records.len(), 5], data).expect("record table"));
        }
        if !s.epochs.is_empty() {
            let data = s
                .epochs
                .iter()
                .flat_map(|e| [e.epoch as f64, e.l_adv, e.l_distill, e.mean_obj])
                .collect();
            b.push("epochs", Tensor::new(vec![s.epochs.len(), 4], data).expect("epoch table"));
        }
        b
    }

    /// Replace the state with a checkpoint taken from a run of the same role
    /// and seed.
    pub fn resume(&mut self, b: &Bundle) -> Result<()> {
        let bad = |m: String| Error::Checkpoint(m);
        if b.kind != "checkpoint" {
            return Err(bad(format!("expected a checkpoint bundle, got {:?}", b.kind)));
        }
        if b.meta("role")? != self.role.tag() {
            return Err(bad(format!(
                "checkpoint is for a {} run, not {}",
                b.meta("role")?,
                self.role.tag()
            )));
        }
        if b.meta_parse::<u64>("seed")? != self.config.seed {
            return Err(bad("checkpoint seed differs from the configured seed".into()));
        }
        let params = b.tensor("params")?.clone();
        if params.shape() != self.state.params.shape() {
            return Err(bad(format!(
                "checkpoint parameters {:?} do not match {:?}",
                params.shape(),
                self.state.params.shape()
            )));
        }
        let hex = b.meta("rng_seed")?;
        if hex.len() != 64 {
            return Err(bad("malformed RNG seed".into()));
        }
        let mut seed = [0u8; 32];
        for (i, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16)
                .map_err(|_| bad("malformed RNG seed".into()))?;
        }
        let rng = RngState {
            seed,
            stream: b.meta_parse("rng_stream")?,
            word_pos: b.meta_parse("rng_word_pos")?,
        }
        .restore();
        let mut adam = self.state.adam.clone();
        adam.t = b.meta_parse("adam_t")?;
        adam.m = vec![b.tensor("adam_m")?.clone()];
        adam.v = vec![b.tensor("adam_v")?.clone()];
        let records = match b.tensor("records") {
            Ok(t) => t
                .data()
                .chunks_exact(5)
                .map(|r| LossRecord {
                    step: r[0] as usize,
                    l_adv: r[1],
                    l_distill: r[2],
                    l_total: r[3],
                    mean_obj: r[4],
                })
                .collect(),
            Err(_) => Vec::new(),
        };
        let epochs = match b.tensor("epochs") {
            Ok(t) => t
                .data()
                .chunks_exact(4)
                .map(|r| EpochSummary {
                    epoch: r[0] as usize,
                    l_adv: r[1],
                    l_distill: r[2],
                    mean_obj: r[3],
                })
                .collect(),
            Err(_) => Vec::new(),
        };
        self.state = RunState {
            epoch: b.meta_parse("epoch")?,
            step: b.meta_parse("step")?,
            params,
            adam,
            rng,
            best: b.tensor("best")?.clone(),
            best_score: f64::from_bits(b.meta_parse("best_score_bits")?),
            best_epoch: b.meta_parse("best_epoch")?,
            records,
            epochs,
        };
        Ok(())
    }

    pub fn final_epoch(&self) -> Option<EpochSummary> {
        self.state.epochs.last().copied()
    }
}

fn accumulate<'t>(acc: Option<Var<'t>>, v: Var<'t>) -> Result<Var<'t>> {
    match acc {
        Some(a) => a.add(v),
        None => Ok(v),
    }
}

/// Result of a finished optimization.
#[derive(Clone, Debug)]
pub struct Outcome<P> {
    /// Best-epoch parameters.
    pub best: P,
    /// Parameters after the last epoch.
    pub last: P,
    pub best_epoch: usize,
    pub records: Vec<LossRecord>,
    pub epochs: Vec<EpochSummary>,
}

impl<P> Outcome<P> {
    pub fn final_epoch(&self) -> EpochSummary {
        *self.epochs.last().expect("at least one epoch")
    }
}

/// Where a run may write per-epoch checkpoints.
#[derive(Clone, Debug, Default)]
pub struct CheckpointPolicy {
    pub path: Option<PathBuf>,
    /// Continue from `path` if it exists.
    pub resume: bool,
}

fn drive(run: &mut PatchRun<'_>, policy: &CheckpointPolicy) -> Result<()> {
    if let (Some(path), true) = (&policy.path, policy.resume) {
        if path.exists() {
            run.resume(&Bundle::load(path)?)?;
            log::info!("resumed {} at epoch {}", run.role.tag(), run.state.epoch);
        }
    }
    while !run.is_done() {
        run.run_epoch()?;
        if let Some(path) = &policy.path {
            run.checkpoint().save(path)?;
        }
    }
    Ok(())
}

pub fn train_teacher(
    config: &RunConfig,
    dataset: &[Scene],
    weights: &DetectorWeights,
    policy: &CheckpointPolicy,
) -> Result<Outcome<TeacherPatch>> {
    let mut run = PatchRun::new(config, dataset, weights, Role::Teacher)?;
    drive(&mut run, policy)?;
    let s = run.state;
    Ok(Outcome {
        best: TeacherPatch { pixels: s.best },
        last: TeacherPatch { pixels: s.params },
        best_epoch: s.best_epoch,
        records: s.records,
        epochs: s.epochs,
    })
}

pub fn train_student(
    config: &RunConfig,
    dataset: &[Scene],
    weights: &DetectorWeights,
    teacher: &TeacherPatch,
    palette: &Palette,
    distill: bool,
    policy: &CheckpointPolicy,
) -> Result<Outcome<PatchParams>> {
    let role = Role::Student {
        teacher,
        palette,
        distill,
    };
    let mut run = PatchRun::new(config, dataset, weights, role)?;
    drive(&mut run, policy)?;
    let s = run.state;
    let wrap = |logits| PatchParams::new(logits, config.omega, palette.clone());
    Ok(Outcome {
        best: wrap(s.best)?,
        last: wrap(s.params)?,
        best_epoch: s.best_epoch,
        records: s.records,
        epochs: s.epochs,
    })
}

/// Value-only mean matched objectness of a fixed patch over scenes, pasted
/// without augmentation.
pub fn evaluate_mean_obj(
    scenes: &[Scene],
    patch: &RenderedPatch,
    weights: &DetectorWeights,
    patch_scale: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for s in scenes {
        let img = crate::scene::paste_patch(s, &patch.image, patch_scale)?;
        let pred: Prediction = weights.predict(&img)?;
        let gt: Vec<GtBox> = s.target_boxes().copied().collect();
        total += mean_matched_obj(&pred, &gt);
    }
    Ok(total / scenes.len().max(1) as f64)
}
