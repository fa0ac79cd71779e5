//! A small single-stage anchor-grid detector.
//!
//! Four 3×3 conv+relu stages (stride 2 until the grid resolution is reached,
//! stride 1 afterwards) feed a 1×1 head that predicts, for each of `A`
//! anchors in each of `G×G` cells, four box offsets, an objectness logit and
//! `K` class logits. The output of the third stage is exposed as the feature
//! map used for distillation.
//!
//! Box decoding follows the usual grid parameterization:
//!
//! ```text
//! cx = (gx + σ(tx)) · cell      w = anchor_w · exp(clamp(tw, ±4))
//! cy = (gy + σ(ty)) · cell      h = anchor_h · exp(clamp(th, ±4))
//! ```

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{BBox, GtBox};
use crate::io::Bundle;
use crate::optim::Adam;
use crate::rng::{derive_seed, seeded};
use crate::scene::Scene;
use crate::tensor::{Tape, Tensor, Var};

/// Offsets are clamped to this magnitude before `exp`.
pub const LOG_SCALE_LIMIT: f64 = 4.0;
/// Initial objectness bias: `σ(-4) ≈ 0.018`.
pub const OBJ_BIAS_INIT: f64 = -4.0;
/// Index of the stage whose output is tapped as `feat` (zero-based).
pub const FEATURE_STAGE: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub input_size: usize,
    pub grid: usize,
    /// Anchor `(w, h)` in pixels.
    pub anchors: Vec<(f64, f64)>,
    pub num_classes: usize,
    /// Output channels of the four conv stages.
    pub channels: [usize; 4],
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            grid: 8,
            anchors: vec![(20.0, 38.0), (26.0, 13.0)],
            num_classes: 2,
            channels: [8, 16, 16, 16],
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.grid == 0 || !self.input_size.is_multiple_of(self.grid) {
            return bad(format!(
                "input size {} not divisible by grid {}",
                self.input_size, self.grid
            ));
        }
        let ratio = self.input_size / self.grid;
        if !ratio.is_power_of_two() || ratio.trailing_zeros() > 4 {
            return bad(format!(
                "input/grid ratio {ratio} must be a power of two at most 16"
            ));
        }
        if self.anchors.is_empty() || self.anchors.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
            return bad("anchors must be non-empty with positive sizes".into());
        }
        if self.num_classes == 0 || self.channels.contains(&0) {
            return bad("class count and channel widths must be positive".into());
        }
        Ok(())
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    /// Pixels per grid cell.
    pub fn cell(&self) -> f64 {
        (self.input_size / self.grid) as f64
    }

    pub fn strides(&self) -> [usize; 4] {
        let downs = (self.input_size / self.grid).trailing_zeros() as usize;
        std::array::from_fn(|i| if i < downs { 2 } else { 1 })
    }

    /// Spatial side of the tapped feature map.
    pub fn feature_size(&self) -> usize {
        let downs = self.strides()[..=FEATURE_STAGE].iter().filter(|&&s| s == 2).count();
        self.input_size >> downs
    }

    pub fn head_channels(&self) -> usize {
        self.num_anchors() * (5 + self.num_classes)
    }

    pub fn layout(&self) -> GridLayout {
        GridLayout {
            grid: self.grid,
            cell: self.cell(),
            input_size: self.input_size,
            anchors: self.anchors.clone(),
            num_classes: self.num_classes,
        }
    }
}

/// What is needed to interpret head tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct GridLayout {
    pub grid: usize,
    pub cell: f64,
    pub input_size: usize,
    pub anchors: Vec<(f64, f64)>,
    pub num_classes: usize,
}

impl GridLayout {
    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    /// Decoded box of anchor `a` at cell `(gy, gx)` from raw offsets.
    pub fn decode_box(&self, a: usize, gy: usize, gx: usize, t: [f64; 4]) -> BBox {
        let (aw, ah) = self.anchors[a];
        let cx = (gx as f64 + sigmoid(t[0])) * self.cell;
        let cy = (gy as f64 + sigmoid(t[1])) * self.cell;
        let w = aw * t[2].clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT).exp();
        let h = ah * t[3].clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT).exp();
        BBox::from_center(cx, cy, w, h)
    }

    /// Cell containing the box center, clamped into the grid.
    pub fn cell_of(&self, b: &BBox) -> (usize, usize) {
        let (cx, cy) = b.center();
        let g = self.grid as f64;
        let idx = |v: f64| (v / self.cell).floor().clamp(0.0, g - 1.0) as usize;
        (idx(cy), idx(cx))
    }

    /// Anchor whose shape best matches `b` when both are centered.
    pub fn best_anchor(&self, b: &BBox) -> usize {
        let mut best = (0, -1.0);
        for (i, &(aw, ah)) in self.anchors.iter().enumerate() {
            let iou = BBox::from_center(0.0, 0.0, aw, ah)
                .iou(&BBox::from_center(0.0, 0.0, b.width(), b.height()));
            if iou > best.1 {
                best = (i, iou);
            }
        }
        best.0
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `[O, C, k, k]`.
    pub kernel: Tensor,
    /// `[O]`.
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorWeights {
    pub config: DetectorConfig,
    pub stages: Vec<ConvLayer>,
    pub head: ConvLayer,
}

impl DetectorWeights {
    /// He-normal kernels, zero biases except the objectness prior.
    pub fn init(config: &DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(derive_seed(seed, "detector-init"));
        let mut conv = |o: usize, c: usize, k: usize| {
            let std = (2.0 / (c * k * k) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let data = (0..o * c * k * k).map(|_| normal.sample(&mut rng)).collect();
            ConvLayer {
                kernel: Tensor::new(vec![o, c, k, k], data).expect("kernel shape"),
                bias: Tensor::zeros(&[o]),
            }
        };
        let mut stages = Vec::new();
        let mut c_in = 3;
        for &c in &config.channels {
            stages.push(conv(c, c_in, 3));
            c_in = c;
        }
        let mut head = conv(config.head_channels(), c_in, 1);
        head.kernel = head.kernel.map(|v| v * 0.1);
        set_obj_bias(config, &mut head.bias, OBJ_BIAS_INIT);
        Ok(Self {
            config: config.clone(),
            stages,
            head,
        })
    }

    /// All-zero weights with objectness bias `obj_bias`.
    pub fn zeros(config: &DetectorConfig, obj_bias: f64) -> Result<Self> {
        config.validate()?;
        let mut c_in = 3;
        let mut stages = Vec::new();
        for &c in &config.channels {
            stages.push(ConvLayer {
                kernel: Tensor::zeros(&[c, c_in, 3, 3]),
                bias: Tensor::zeros(&[c]),
            });
            c_in = c;
        }
        let hc = config.head_channels();
        let mut bias = Tensor::zeros(&[hc]);
        set_obj_bias(config, &mut bias, obj_bias);
        Ok(Self {
            config: config.clone(),
            stages,
            head: ConvLayer {
                kernel: Tensor::zeros(&[hc, c_in, 1, 1]),
                bias,
            },
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        for l in self.stages.iter().chain(std::iter::once(&self.head)) {
            v.push(&l.kernel);
            v.push(&l.bias);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        for l in self.stages.iter_mut().chain(std::iter::once(&mut self.head)) {
            v.push(&mut l.kernel);
            v.push(&mut l.bias);
        }
        v
    }

    /// Record the weights on `tape`, as leaves if `trainable`, else constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundDetector<'t> {
        let put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundDetector {
            config: self.config.clone(),
            stages: self.stages.iter().map(|l| (put(&l.kernel), put(&l.bias))).collect(),
            head: (put(&self.head.kernel), put(&self.head.bias)),
        }
    }

    /// Value-only forward pass.
    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        let tape = Tape::new();
        let det = self.bind(&tape, false);
        let out = det.forward(tape.constant(image.clone()))?;
        Ok(out.prediction())
    }

    pub fn to_bundle(&self) -> Bundle {
        let c = &self.config;
        let mut b = Bundle::new("detector");
        b.set_meta("input_size", c.input_size);
        b.set_meta("grid", c.grid);
        b.set_meta("num_classes", c.num_classes);
        let anchors: Vec<String> = c.anchors.iter().map(|(w, h)| format!("{w}x{h}")).collect();
        b.set_meta("anchors", anchors.join(","));
        let ch: Vec<String> = c.channels.iter().map(ToString::to_string).collect();
        b.set_meta("channels", ch.join(","));
        for (i, l) in self.stages.iter().enumerate() {
            b.push(&format!("stage{i}.kernel"), l.kernel.clone());
            b.push(&format!("stage{i}.bias"), l.bias.clone());
        }
        b.push("head.kernel", self.head.kernel.clone());
        b.push("head.bias", self.head.bias.clone());
        b
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let anchors = b
            .meta("anchors")?
            .split(',')
            .map(|s| {
                let (w, h) = s.split_once('x').ok_or_else(|| bad(format!("bad anchor {s:?}")))?;
                Ok((
                    w.parse().map_err(|_| bad(format!("bad anchor {s:?}")))?,
                    h.parse().map_err(|_| bad(format!("bad anchor {s:?}")))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let ch: Vec<usize> = b
            .meta("channels")?
            .split(',')
            .map(|s| s.parse().map_err(|_| bad(format!("bad channel width {s:?}"))))
            .collect::<Result<_>>()?;
        let channels: [usize; 4] = ch
            .try_into()
            .map_err(|_| bad("expected four channel widths".into()))?;
        let config = DetectorConfig {
            input_size: b.meta_parse("input_size")?,
            grid: b.meta_parse("grid")?,
            anchors,
            num_classes: b.meta_parse("num_classes")?,
            channels,
        };
        config.validate()?;
        let mut w = DetectorWeights::zeros(&config, 0.0)?;
        for (i, l) in w.stages.iter_mut().enumerate() {
            l.kernel = checked(b, &format!("stage{i}.kernel"), l.kernel.shape())?;
            l.bias = checked(b, &format!("stage{i}.bias"), l.bias.shape())?;
        }
        w.head.kernel = checked(b, "head.kernel", w.head.kernel.shape())?;
        w.head.bias = checked(b, "head.bias", w.head.bias.shape())?;
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_bundle().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bundle(&Bundle::load_kind(path, "detector")?)
    }
}

fn checked(b: &Bundle, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = b.tensor(name)?;
    if t.shape() != shape {
        return Err(Error::Checkpoint(format!(
            "tensor {name:?} has shape {:?}, expected {shape:?}",
            t.shape()
        )));
    }
    Ok(t.clone())
}

fn set_obj_bias(config: &DetectorConfig, bias: &mut Tensor, value: f64) {
    let a = config.num_anchors();
    for i in 0..a {
        bias.data_mut()[4 * a + i] = value;
    }
}

/// Weights recorded on a tape.
pub struct BoundDetector<'t> {
    pub config: DetectorConfig,
    pub stages: Vec<(Var<'t>, Var<'t>)>,
    pub head: (Var<'t>, Var<'t>),
}

/// Head outputs for one image. Spatial tensors are `[_, G, G]`.
#[derive(Clone)]
pub struct DetectorOutput<'t> {
    /// `[A·4, G, G]` raw `(tx, ty, tw, th)` per anchor.
    pub pos: Var<'t>,
    /// `[A, G, G]` after sigmoid.
    pub obj: Var<'t>,
    /// `[A·K, G, G]` after sigmoid.
    pub cls: Var<'t>,
    pub obj_logit: Var<'t>,
    pub cls_logit: Var<'t>,
    /// `[C_f, G_f, G_f]`.
    pub feat: Var<'t>,
    pub layout: GridLayout,
}

impl<'t> BoundDetector<'t> {
    /// `image` is `[3, S, S]`.
    pub fn forward(&self, image: Var<'t>) -> Result<DetectorOutput<'t>> {
        let s = self.config.input_size;
        if image.shape() != [3, s, s] {
            return Err(Error::arg(format!(
                "detector expects a [3, {s}, {s}] image, got {:?}",
                image.shape()
            )));
        }
        let mut x = image.reshape(&[1, 3, s, s])?;
        let mut feat = None;
        for (i, ((k, b), stride)) in self.stages.iter().zip(self.config.strides()).enumerate() {
            x = x.conv2d(*k, stride, 1)?.add_channel_bias(*b)?.relu();
            if i == FEATURE_STAGE {
                feat = Some(x);
            }
        }
        let feat = feat.expect("feature stage within stage count");
        let y = x.conv2d(self.head.0, 1, 0)?.add_channel_bias(self.head.1)?;
        let g = self.config.grid;
        let (a, k) = (self.config.num_anchors(), self.config.num_classes);
        let y = y.reshape(&[self.config.head_channels(), g, g])?;
        let pos = y.narrow(0, 0, 4 * a)?;
        let obj_logit = y.narrow(0, 4 * a, a)?;
        let cls_logit = y.narrow(0, 5 * a, a * k)?;
        let fs = feat.shape();
        Ok(DetectorOutput {
            pos,
            obj: obj_logit.sigmoid(),
            cls: cls_logit.sigmoid(),
            obj_logit,
            cls_logit,
            feat: feat.reshape(&fs[1..])?,
            layout: self.config.layout(),
        })
    }
}

/// Differentiable decoded corners, each `[A, G, G]`.
pub struct DecodedBoxes<'t> {
    pub x1: Var<'t>,
    pub y1: Var<'t>,
    pub x2: Var<'t>,
    pub y2: Var<'t>,
}

impl<'t> DetectorOutput<'t> {
    pub fn prediction(&self) -> Prediction {
        Prediction {
            pos: (*self.pos.value()).clone(),
            obj: (*self.obj.value()).clone(),
            cls: (*self.cls.value()).clone(),
            layout: self.layout.clone(),
        }
    }

    /// Offset channel `j` (0..4) of every anchor as `[A, G, G]`.
    pub fn offset(&self, j: usize) -> Result<Var<'t>> {
        let l = &self.layout;
        let (a, g) = (l.num_anchors(), l.grid);
        self.pos
            .reshape(&[a, 4, g * g])?
            .narrow(1, j, 1)?
            .reshape(&[a, g, g])
    }

    pub fn decoded_boxes(&self) -> Result<DecodedBoxes<'t>> {
        let l = &self.layout;
        let tape = self.pos.tape();
        let (a, g) = (l.num_anchors(), l.grid);
        let grid_const = |f: &dyn Fn(usize, usize, usize) -> f64| {
            let mut t = Tensor::zeros(&[a, g, g]);
            for ai in 0..a {
                for gy in 0..g {
                    for gx in 0..g {
                        t.data_mut()[(ai * g + gy) * g + gx] = f(ai, gy, gx);
                    }
                }
            }
            tape.constant(t)
        };
        let gx = grid_const(&|_, _, x| x as f64);
        let gy = grid_const(&|_, y, _| y as f64);
        let aw = grid_const(&|ai, _, _| l.anchors[ai].0 / 2.0);
        let ah = grid_const(&|ai, _, _| l.anchors[ai].1 / 2.0);
        let cx = self.offset(0)?.sigmoid().add(gx)?.scale(l.cell);
        let cy = self.offset(1)?.sigmoid().add(gy)?.scale(l.cell);
        let lim = LOG_SCALE_LIMIT;
        let hw = self.offset(2)?.clamp(-lim, lim).exp().mul(aw)?;
        let hh = self.offset(3)?.clamp(-lim, lim).exp().mul(ah)?;
        Ok(DecodedBoxes {
            x1: cx.sub(hw)?,
            y1: cy.sub(hh)?,
            x2: cx.add(hw)?,
            y2: cy.add(hh)?,
        })
    }
}

/// Head values detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub pos: Tensor,
    pub obj: Tensor,
    pub cls: Tensor,
    pub layout: GridLayout,
}

impl Prediction {
    pub fn offsets(&self, a: usize, gy: usize, gx: usize) -> [f64; 4] {
        let g = self.layout.grid;
        std::array::from_fn(|j| self.pos.data()[((4 * a + j) * g + gy) * g + gx])
    }

    pub fn obj_at(&self, a: usize, gy: usize, gx: usize) -> f64 {
        let g = self.layout.grid;
        self.obj.data()[(a * g + gy) * g + gx]
    }

    pub fn cls_at(&self, a: usize, k: usize, gy: usize, gx: usize) -> f64 {
        let g = self.layout.grid;
        let nk = self.layout.num_classes;
        self.cls.data()[((a * nk + k) * g + gy) * g + gx]
    }

    /// Every anchor's decoded box (unclipped) in `(a, gy, gx)` order.
    pub fn boxes(&self) -> Vec<(usize, usize, usize, BBox)> {
        let l = &self.layout;
        let mut v = Vec::with_capacity(l.num_anchors() * l.grid * l.grid);
        for a in 0..l.num_anchors() {
            for gy in 0..l.grid {
                for gx in 0..l.grid {
                    v.push((a, gy, gx, l.decode_box(a, gy, gx, self.offsets(a, gy, gx))));
                }
            }
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Thresholded, NMS-filtered detections sorted by descending score.
///
/// `score = obj · max_k cls_k`; suppression is greedy and per class.
pub fn decode(pred: &Prediction, conf_threshold: f64, nms_iou: f64) -> Vec<Detection> {
    let l = &pred.layout;
    let size = l.input_size as f64;
    let mut cands = Vec::new();
    for (a, gy, gx, bbox) in pred.boxes() {
        let (mut best_k, mut best_c) = (0, f64::NEG_INFINITY);
        for k in 0..l.num_classes {
            let c = pred.cls_at(a, k, gy, gx);
            if c > best_c {
                best_k = k;
                best_c = c;
            }
        }
        let score = pred.obj_at(a, gy, gx) * best_c;
        let bbox = bbox.clip(size);
        if score >= conf_threshold && bbox.is_valid() {
            cands.push(Detection {
                bbox,
                class_id: best_k,
                score,
            });
        }
    }
    // stable sort keeps (a, gy, gx) order among equal scores
    cands.sort_by(|p, q| q.score.total_cmp(&p.score));
    let mut kept: Vec<Detection> = Vec::new();
    for d in cands {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && k.bbox.iou(&d.bbox) > nms_iou);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Chance of mirroring a training image left to right.
    pub flip_prob: f64,
    /// Chance of covering every target of a training image with a
    /// solid-colored square, so that benign occluders are not enough to
    /// hide a person.
    pub occlude_prob: f64,
    /// Occluder side relative to the longer box side.
    pub occluder_scale: f64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            learning_rate: 0.01,
            seed: 0,
            flip_prob: 0.5,
            occlude_prob: 0.02,
            occluder_scale: 0.25,
        }
    }
}

impl DetectorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if self.batch_size == 0
            || !(self.learning_rate >= 0.0)
            || !prob(self.flip_prob)
            || !prob(self.occlude_prob)
            || !(self.occluder_scale > 0.0 && self.occluder_scale <= 1.0)
        {
            return Err(Error::Config(format!("invalid detector training settings {self:?}")));
        }
        Ok(())
    }
}

/// Randomly occluded and mirrored copy of a training scene.
fn augment(scene: &Scene, train: &DetectorTrainConfig, rng: &mut impl Rng) -> Result<(Tensor, Vec<GtBox>)> {
    let mut image = if rng.random_bool(train.occlude_prob) {
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let patch = Tensor::new(vec![3, 2, 2], color.iter().flat_map(|&c| [c; 4]).collect())?;
        crate::scene::paste_patch(scene, &patch, train.occluder_scale)?
    } else {
        scene.image.clone()
    };
    let mut boxes = scene.boxes.clone();
    if rng.random_bool(train.flip_prob) {
        let s = scene.size();
        let d = image.data_mut();
        for row in d.chunks_mut(s) {
            row.reverse();
        }
        let sf = s as f64;
        for g in &mut boxes {
            g.bbox = BBox::new(sf - g.bbox.x2, g.bbox.y1, sf - g.bbox.x1, g.bbox.y2);
        }
    }
    Ok((image, boxes))
}

/// Per-anchor regression and classification targets for one image.
struct Targets {
    obj: Tensor,
    /// 1 on positive anchors, `[A, G, G]`.
    pos_mask: Tensor,
    /// Target `σ(tx), σ(ty), tw, th`, each `[A, G, G]`.
    offsets: [Tensor; 4],
    /// `[A·K, G, G]`, one-hot on positives, zero elsewhere.
    cls: Tensor,
}

fn build_targets(layout: &GridLayout, boxes: &[GtBox]) -> Targets {
    let (a, g, k) = (layout.num_anchors(), layout.grid, layout.num_classes);
    let mut t = Targets {
        obj: Tensor::zeros(&[a, g, g]),
        pos_mask: Tensor::zeros(&[a, g, g]),
        offsets: std::array::from_fn(|_| Tensor::zeros(&[a, g, g])),
        cls: Tensor::zeros(&[a * k, g, g]),
    };
    for gt in boxes {
        if gt.class_id >= k {
            continue;
        }
        let b = gt.bbox;
        let (gy, gx) = layout.cell_of(&b);
        let ai = layout.best_anchor(&b);
        let (aw, ah) = layout.anchors[ai];
        let (cx, cy) = b.center();
        let i = (ai * g + gy) * g + gx;
        t.obj.data_mut()[i] = 1.0;
        t.pos_mask.data_mut()[i] = 1.0;
        let vals = [
            (cx / layout.cell - gx as f64).clamp(0.0, 1.0),
            (cy / layout.cell - gy as f64).clamp(0.0, 1.0),
            (b.width() / aw).ln(),
            (b.height() / ah).ln(),
        ];
        for (dst, v) in t.offsets.iter_mut().zip(vals) {
            dst.data_mut()[i] = v;
        }
        for kk in 0..k {
            let j = ((ai * k + kk) * g + gy) * g + gx;
            t.cls.data_mut()[j] = if kk == gt.class_id { 1.0 } else { 0.0 };
        }
    }
    t
}

/// Binary cross-entropy from logits, elementwise: `softplus(z) − y·z`.
pub fn bce_with_logits<'t>(z: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
    z.softplus().sub(z.mul(y)?)
}

/// Supervised detection loss for one image.
pub fn detection_loss<'t>(out: &DetectorOutput<'t>, boxes: &[GtBox]) -> Result<Var<'t>> {
    let tape = out.pos.tape();
    let t = build_targets(&out.layout, boxes);
    let obj = bce_with_logits(out.obj_logit, tape.constant(t.obj))?.sum_all();
    // every anchor is a negative for every class it does not hold
    let cls = bce_with_logits(out.cls_logit, tape.constant(t.cls))?.sum_all();
    let mask = tape.constant(t.pos_mask);
    let [tx, ty, tw, th] = t.offsets.map(|v| tape.constant(v));
    let sq = |pred: Var<'t>, target: Var<'t>| -> Result<Var<'t>> {
        Ok(pred.sub(target)?.square().mul(mask)?.sum_all())
    };
    let boxl = sq(out.offset(0)?.sigmoid(), tx)?
        .add(sq(out.offset(1)?.sigmoid(), ty)?)?
        .add(sq(out.offset(2)?, tw)?)?
        .add(sq(out.offset(3)?, th)?)?;
    obj.add(cls)?.add(boxl)
}

/// Train from scratch on `dataset`. `epochs == 0` returns the initialization.
pub fn train_toy(
    dataset: &[Scene],
    config: &DetectorConfig,
    train: &DetectorTrainConfig,
) -> Result<DetectorWeights> {
    if dataset.is_empty() || dataset.iter().all(|s| s.boxes.is_empty()) {
        return Err(Error::arg("detector training needs scenes with boxes"));
    }
    train.validate()?;
    let mut weights = DetectorWeights::init(config, train.seed)?;
    let mut opt = Adam::new(train.learning_rate, &weights.params());
    let mut rng = seeded(derive_seed(train.seed, "detector-train"));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0;
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(train.batch_size) {
            let tape = Tape::new();
            let det = weights.bind(&tape, true);
            let mut total: Option<Var> = None;
            for &i in batch {
                let (image, boxes) = augment(&dataset[i], train, &mut rng)?;
                let out = det.forward(tape.constant(image))?;
                let l = detection_loss(&out, &boxes)?;
                total = Some(match total {
                    Some(t) => t.add(l)?,
                    None => l,
                });
            }
            let loss = total.expect("non-empty batch").scale(1.0 / batch.len() as f64);
            let lv = loss.value().item();
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    step,
                    seed: train.seed,
                    what: "detection loss".into(),
                });
            }
            epoch_loss += lv * batch.len() as f64;
            let grads = tape.backward(loss)?;
            let mut leaves = Vec::new();
            for (k, b) in det.stages.iter().chain(std::iter::once(&det.head)) {
                leaves.push(grads.get_or_zeros(*k));
                leaves.push(grads.get_or_zeros(*b));
            }
            opt.step(&mut weights.params_mut(), &leaves)?;
            step += 1;
        }
        log::debug!(
            "detector epoch {epoch}: mean loss {:.4}",
            epoch_loss / dataset.len() as f64
        );
    }
    Ok(weights)
}

/// Fraction of ground-truth boxes of `class` matched (IoU ≥ `iou`) by a
/// same-class detection scoring at least `score`.
pub fn recall(
    weights: &DetectorWeights,
    scenes: &[Scene],
    class: usize,
    score: f64,
    iou: f64,
) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for s in scenes {
        let dets = decode(&weights.predict(&s.image)?, score, 0.5);
        for gt in s.boxes.iter().filter(|b| b.class_id == class) {
            total += 1;
            if dets
                .iter()
                .any(|d| d.class_id == class && d.bbox.iou(&gt.bbox) >= iou)
            {
                hit += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::arg(format!("no class-{class} boxes to measure recall on")));
    }
    Ok(hit as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> GridLayout {
        DetectorConfig::default().layout()
    }

    #[test]
    fn default_geometry() {
        let c = DetectorConfig::default();
        assert_eq!(c.strides(), [2, 2, 2, 1]);
        assert_eq!(c.feature_size(), 8);
        assert_eq!(c.head_channels(), 14);
        assert!(DetectorConfig {
            input_size: 60,
            ..c.clone()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn zero_weights_give_sigmoid_bias() {
        let w = DetectorWeights::zeros(&DetectorConfig::default(), 0.7).unwrap();
        let p = w.predict(&Tensor::zeros(&[3, 64, 64])).unwrap();
        let s = sigmoid(0.7);
        assert!(p.obj.data().iter().all(|&v| (v - s).abs() < 1e-15));
        assert!(p.cls.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let w = DetectorWeights::zeros(&DetectorConfig::default(), 0.0).unwrap();
        assert!(w.predict(&Tensor::zeros(&[3, 32, 32])).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let w = DetectorWeights::init(&DetectorConfig::default(), 3).unwrap();
        let img = Tensor::full(&[3, 64, 64], 0.4);
        assert_eq!(w.predict(&img).unwrap(), w.predict(&img).unwrap());
    }

    fn synthetic_prediction(obj: impl Fn(usize, usize, usize) -> f64) -> Prediction {
        let l = layout();
        let (a, g) = (l.num_anchors(), l.grid);
        let mut o = Tensor::zeros(&[a, g, g]);
        for ai in 0..a {
            for y in 0..g {
                for x in 0..g {
                    o.data_mut()[(ai * g + y) * g + x] = obj(ai, y, x);
                }
            }
        }
        let mut cls = Tensor::zeros(&[a * 2, g, g]);
        for ai in 0..a {
            for i in 0..g * g {
                cls.data_mut()[ai * 2 * g * g + i] = 0.9;
            }
        }
        Prediction {
            pos: Tensor::zeros(&[4 * a, g, g]),
            obj: o,
            cls,
            layout: l,
        }
    }

    #[test]
    fn decode_threshold_and_single_anchor() {
        let p = synthetic_prediction(|_, _, _| 0.1);
        assert!(decode(&p, 0.5, 0.5).is_empty());
        let p = synthetic_prediction(|a, y, x| if (a, y, x) == (0, 3, 4) { 0.95 } else { 0.01 });
        let d = decode(&p, 0.5, 0.5);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].class_id, 0);
        assert!((d[0].score - 0.95 * 0.9).abs() < 1e-12);
        let expect = layout().decode_box(0, 3, 4, [0.0; 4]);
        assert_eq!(d[0].bbox, expect);
        assert_eq!(decode(&p, 0.5, 0.5), d);
    }

    #[test]
    fn nms_suppresses_overlap() {
        // neighbouring cells along x: 20×38 boxes shifted by 8 px → IoU 12/28
        let p = synthetic_prediction(|a, y, x| match (a, y, x) {
            (0, 3, 3) => 0.9,
            (0, 3, 4) => 0.8,
            _ => 0.0,
        });
        assert_eq!(decode(&p, 0.1, 0.4).len(), 1);
        assert_eq!(decode(&p, 0.1, 0.5).len(), 2);
    }

    #[test]
    fn targets_pick_center_cell_and_anchor() {
        let l = layout();
        let gt = GtBox {
            class_id: 1,
            bbox: BBox::new(10.0, 30.0, 36.0, 43.0),
        };
        let t = build_targets(&l, &[gt]);
        let (gy, gx) = l.cell_of(&gt.bbox);
        assert_eq!((gy, gx), (4, 2));
        assert_eq!(l.best_anchor(&gt.bbox), 1);
        let i = 64 + gy * 8 + gx;
        assert_eq!(t.obj.data()[i], 1.0);
        assert_eq!(t.obj.data().iter().sum::<f64>(), 1.0);
        assert!((t.offsets[0].data()[i] - (23.0 / 8.0 - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let cfg = crate::scene::SceneConfig::default();
        let scenes = crate::scene::synthesize_dataset(0, 2, &cfg).unwrap();
        let dc = DetectorConfig::default();
        let tc = DetectorTrainConfig {
            epochs: 0,
            seed: 9,
            ..Default::default()
        };
        let w = train_toy(&scenes, &dc, &tc).unwrap();
        assert_eq!(w, DetectorWeights::init(&dc, 9).unwrap());
    }

    #[test]
    fn flip_mirrors_image_and_boxes() {
        let cfg = crate::scene::SceneConfig::default();
        let scene = crate::scene::synthesize_scene(4, &cfg).unwrap();
        let tc = DetectorTrainConfig {
            flip_prob: 1.0,
            occlude_prob: 0.0,
            ..Default::default()
        };
        let (img, boxes) = augment(&scene, &tc, &mut seeded(0)).unwrap();
        let s = scene.size();
        assert_eq!(img.data()[5], scene.image.data()[s - 6]);
        for (a, b) in boxes.iter().zip(&scene.boxes) {
            assert_eq!(a.bbox.x1, s as f64 - b.bbox.x2);
            assert_eq!((a.bbox.y1, a.bbox.y2, a.class_id), (b.bbox.y1, b.bbox.y2, b.class_id));
        }
        let plain = DetectorTrainConfig {
            flip_prob: 0.0,
            occlude_prob: 0.0,
            ..Default::default()
        };
        let (img, boxes) = augment(&scene, &plain, &mut seeded(0)).unwrap();
        assert_eq!((img, boxes), (scene.image.clone(), scene.boxes.clone()));
    }

    #[test]
    fn bundle_round_trip() {
        let w = DetectorWeights::init(&DetectorConfig::default(), 1).unwrap();
        let b = Bundle::decode(&w.to_bundle().encode()).unwrap();
        assert_eq!(DetectorWeights::from_bundle(&b).unwrap(), w);
    }
}
