//! Attack objectives: the adversarial detection loss, score-gated feature
//! masks, masked feature distillation and their weighted sum.

use std::fmt;
use std::str::FromStr;

use crate::detector::{DetectorOutput, Prediction};
use crate::error::{Error, Result};
use crate::geometry::{BBox, GtBox};
use crate::tensor::{Tensor, Var};

/// Anchors whose decoded box overlaps a ground-truth box by more than this
/// take part in the adversarial sums.
pub const MATCH_IOU: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdvLossWeights {
    /// Target-class score.
    pub lambda1: f64,
    /// Objectness.
    pub lambda2: f64,
    /// Decoded-box IoU with the matched ground truth.
    pub lambda3: f64,
}

impl Default for AdvLossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.5,
        }
    }
}

impl AdvLossWeights {
    pub fn validate(&self) -> Result<()> {
        let l = [self.lambda1, self.lambda2, self.lambda3];
        if l.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || l.iter().all(|&v| v == 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative and not all zero, got {l:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskStrategy {
    ObjConf,
    ClsMaxConf,
    ObjOrCls,
    ObjAndCls,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 4] = [
        MaskStrategy::ObjConf,
        MaskStrategy::ClsMaxConf,
        MaskStrategy::ObjOrCls,
        MaskStrategy::ObjAndCls,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::ObjConf => "obj_conf",
            MaskStrategy::ClsMaxConf => "cls_max_conf",
            MaskStrategy::ObjOrCls => "obj_or_cls",
            MaskStrategy::ObjAndCls => "obj_and_cls",
        }
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskStrategy::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mask strategy {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskConfig {
    pub strategy: MaskStrategy,
    pub th_cls: f64,
    pub th_obj: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            strategy: MaskStrategy::ClsMaxConf,
            th_cls: 0.25,
            th_obj: 0.1,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        for th in [self.th_cls, self.th_obj] {
            if !(th > 0.0 && th < 1.0) {
                return Err(Error::Config(format!("mask threshold {th} outside (0, 1)")));
            }
        }
        Ok(())
    }

    /// Gated mask at feature resolution. Combined strategies gate each score
    /// family with its own threshold before taking the max (or) / min (and).
    pub fn mask(&self, pred: &Prediction, feat_size: (usize, usize)) -> Tensor {
        let obj = || build_mask(&family_map(pred, Family::Obj), self.th_obj, feat_size);
        let cls = || build_mask(&family_map(pred, Family::Cls), self.th_cls, feat_size);
        match self.strategy {
            MaskStrategy::ObjConf => obj(),
            MaskStrategy::ClsMaxConf => cls(),
            MaskStrategy::ObjOrCls => zip(&obj(), &cls(), f64::max),
            MaskStrategy::ObjAndCls => zip(&obj(), &cls(), f64::min),
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

#[derive(Clone, Copy)]
enum Family {
    Obj,
    Cls,
}

/// Per-cell max over anchors (and, for classes, over classes).
fn family_map(pred: &Prediction, family: Family) -> Tensor {
    let l = &pred.layout;
    let g = l.grid;
    let mut m = Tensor::full(&[g, g], f64::NEG_INFINITY);
    for a in 0..l.num_anchors() {
        for gy in 0..g {
            for gx in 0..g {
                let v = match family {
                    Family::Obj => pred.obj_at(a, gy, gx),
                    Family::Cls => (0..l.num_classes)
                        .map(|k| pred.cls_at(a, k, gy, gx))
                        .fold(f64::NEG_INFINITY, f64::max),
                };
                let cell = &mut m.data_mut()[gy * g + gx];
                *cell = cell.max(v);
            }
        }
    }
    m
}

/// `[G, G]` score map for a strategy.
pub fn score_map(pred: &Prediction, strategy: MaskStrategy) -> Tensor {
    match strategy {
        MaskStrategy::ObjConf => family_map(pred, Family::Obj),
        MaskStrategy::ClsMaxConf => family_map(pred, Family::Cls),
        MaskStrategy::ObjOrCls => zip(
            &family_map(pred, Family::Obj),
            &family_map(pred, Family::Cls),
            f64::max,
        ),
        MaskStrategy::ObjAndCls => zip(
            &family_map(pred, Family::Obj),
            &family_map(pred, Family::Cls),
            f64::min,
        ),
    }
}

/// Zero scores `≤ th`, keep the rest, then nearest-neighbor resize to
/// `(h, w)`.
pub fn build_mask(score: &Tensor, th: f64, (h, w): (usize, usize)) -> Tensor {
    let (sh, sw) = (score.shape()[0], score.shape()[1]);
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h {
        let sy = y * sh / h;
        for x in 0..w {
            let sx = x * sw / w;
            let s = score.data()[sy * sw + sx];
            out.data_mut()[y * w + x] = if s > th { s } else { 0.0 };
        }
    }
    out
}

/// Interest mask `|m_t − m_s|`.
pub fn interest_mask(mask_t: &Tensor, mask_s: &Tensor) -> Result<Tensor> {
    if mask_t.shape() != mask_s.shape() {
        return Err(Error::ShapeMismatch {
            op: "interest mask",
            left: mask_t.shape().to_vec(),
            right: mask_s.shape().to_vec(),
        });
    }
    Ok(zip(mask_t, mask_s, |a, b| (a - b).abs()))
}

/// `Σ_{x,y} ‖(feat_t − feat_s)(·, x, y) · M(x, y)‖₂` with `feat_t` detached.
pub fn distillation_loss<'t>(
    feat_t: Var<'t>,
    feat_s: Var<'t>,
    mask_t: &Tensor,
    mask_s: &Tensor,
) -> Result<Var<'t>> {
    let fs = feat_s.shape();
    if feat_t.shape() != fs {
        return Err(Error::ShapeMismatch {
            op: "distillation (features)",
            left: feat_t.shape(),
            right: fs,
        });
    }
    if fs.len() != 3 || mask_t.shape() != &fs[1..] {
        return Err(Error::ShapeMismatch {
            op: "distillation (mask vs feature)",
            left: mask_t.shape().to_vec(),
            right: fs,
        });
    }
    let m = interest_mask(mask_t, mask_s)?;
    let plane = m.numel();
    let mut wide = Tensor::zeros(&fs);
    for chunk in wide.data_mut().chunks_mut(plane) {
        chunk.copy_from_slice(m.data());
    }
    let tape = feat_s.tape();
    let diff = feat_t.detach().sub(feat_s)?.mul(tape.constant(wide))?;
    Ok(diff.l2_norm(Some(&[0]))?.sum_all())
}

/// `l_adv + β · l_distill`.
pub fn total_loss<'t>(l_adv: Var<'t>, l_distill: Var<'t>, beta: f64) -> Result<Var<'t>> {
    if !(beta >= 0.0) {
        return Err(Error::arg(format!("beta must be non-negative, got {beta}")));
    }
    l_adv.add(l_distill.scale(beta))
}

/// For every anchor, the index of the ground-truth box its decoded box
/// overlaps most, if that overlap exceeds [`MATCH_IOU`].
pub fn match_anchors(pred: &Prediction, gt: &[GtBox]) -> Vec<Option<usize>> {
    pred.boxes()
        .into_iter()
        .map(|(_, _, _, b)| {
            let mut best: Option<(usize, f64)> = None;
            for (i, g) in gt.iter().enumerate() {
                let iou = b.iou(&g.bbox);
                if iou > MATCH_IOU && best.is_none_or(|(_, v)| iou > v) {
                    best = Some((i, iou));
                }
            }
            best.map(|(i, _)| i)
        })
        .collect()
}

/// Adversarial loss for one image: over matched anchors,
/// `Σ λ1·cls_target + λ2·obj + λ3·IoU(decoded, matched gt)`.
pub fn adversarial_loss<'t>(
    out: &DetectorOutput<'t>,
    gt: &[GtBox],
    w: &AdvLossWeights,
    target_class: usize,
) -> Result<Var<'t>> {
    if gt.is_empty() {
        return Err(Error::arg("adversarial loss needs at least one ground-truth box"));
    }
    let l = &out.layout;
    if target_class >= l.num_classes {
        return Err(Error::arg(format!("target class {target_class} out of range")));
    }
    let tape = out.pos.tape();
    let (a, g, k) = (l.num_anchors(), l.grid, l.num_classes);
    let matches = match_anchors(&out.prediction(), gt);
    let mask = Tensor::new(
        vec![a, g, g],
        matches.iter().map(|m| if m.is_some() { 1.0 } else { 0.0 }).collect(),
    )?;
    let mask = tape.constant(mask);
    let cls_t = out
        .cls
        .reshape(&[a, k, g * g])?
        .narrow(1, target_class, 1)?
        .reshape(&[a, g, g])?;
    let mut per_anchor = cls_t.scale(w.lambda1).add(out.obj.scale(w.lambda2))?;
    if w.lambda3 != 0.0 {
        let iou = soft_iou(out, gt, &matches)?;
        per_anchor = per_anchor.add(iou.scale(w.lambda3))?;
    }
    Ok(per_anchor.mul(mask)?.sum_all())
}

/// Differentiable IoU of every decoded anchor box with its matched ground
/// truth (unmatched anchors are compared with a placeholder box).
fn soft_iou<'t>(out: &DetectorOutput<'t>, gt: &[GtBox], matches: &[Option<usize>]) -> Result<Var<'t>> {
    let tape = out.pos.tape();
    let shape = out.obj.shape();
    let placeholder = BBox::new(0.0, 0.0, 1.0, 1.0);
    let corner = |f: fn(&BBox) -> f64| {
        let data = matches
            .iter()
            .map(|m| f(&m.map_or(placeholder, |i| gt[i].bbox)))
            .collect();
        tape.constant(Tensor::new(shape.clone(), data).expect("anchor grid shape"))
    };
    let (gx1, gy1) = (corner(|b| b.x1), corner(|b| b.y1));
    let (gx2, gy2) = (corner(|b| b.x2), corner(|b| b.y2));
    let garea = corner(BBox::area);
    let d = out.decoded_boxes()?;
    let iw = d.x2.minimum(gx2)?.sub(d.x1.maximum(gx1)?)?.relu();
    let ih = d.y2.minimum(gy2)?.sub(d.y1.maximum(gy1)?)?.relu();
    let inter = iw.mul(ih)?;
    let area = d.x2.sub(d.x1)?.mul(d.y2.sub(d.y1)?)?;
    let union = area.add(garea)?.sub(inter)?;
    inter.div(union)
}

/// Mean over ground-truth boxes of the highest objectness among anchors
/// matched to that box (0 for a box no anchor matches).
pub fn mean_matched_obj(pred: &Prediction, gt: &[GtBox]) -> f64 {
    if gt.is_empty() {
        return 0.0;
    }
    let boxes = pred.boxes();
    let total: f64 = gt
        .iter()
        .map(|g| {
            boxes
                .iter()
                .filter(|(_, _, _, b)| b.iou(&g.bbox) > MATCH_IOU)
                .map(|&(a, gy, gx, _)| pred.obj_at(a, gy, gx))
                .fold(0.0, f64::max)
        })
        .sum();
    total / gt.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{DetectorConfig, GridLayout};
    use crate::tensor::Tape;

    fn one_cell_layout() -> GridLayout {
        GridLayout {
            grid: 1,
            cell: 8.0,
            input_size: 8,
            anchors: vec![(4.0, 4.0)],
            num_classes: 2,
        }
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    fn output<'t>(tape: &'t Tape, layout: GridLayout, pos: Tensor, obj: Tensor, cls: Tensor) -> DetectorOutput<'t> {
        let obj_logit = tape.leaf(obj.map(logit));
        let cls_logit = tape.leaf(cls.map(logit));
        DetectorOutput {
            pos: tape.leaf(pos),
            obj: obj_logit.sigmoid(),
            cls: cls_logit.sigmoid(),
            obj_logit,
            cls_logit,
            feat: tape.leaf(Tensor::zeros(&[1, 1, 1])),
            layout,
        }
    }

    #[test]
    fn single_anchor_substitution() {
        // zero offsets decode to the 4×4 box centered in the cell
        let tape = Tape::new();
        let out = output(
            &tape,
            one_cell_layout(),
            Tensor::zeros(&[4, 1, 1]),
            Tensor::full(&[1, 1, 1], 0.5),
            Tensor::full(&[2, 1, 1], 0.5),
        );
        let gt = [GtBox {
            class_id: 0,
            bbox: BBox::new(2.0, 2.0, 6.0, 6.0),
        }];
        let w = AdvLossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
        };
        let l = adversarial_loss(&out, &gt, &w, 0).unwrap().value().item();
        assert!((l - 2.0).abs() < 1e-12, "{l}");
    }

    #[test]
    fn zero_scores_floor() {
        let tape = Tape::new();
        let out = output(
            &tape,
            one_cell_layout(),
            Tensor::zeros(&[4, 1, 1]),
            Tensor::full(&[1, 1, 1], 1e-300),
            Tensor::full(&[2, 1, 1], 1e-300),
        );
        let gt = [GtBox {
            class_id: 0,
            bbox: BBox::new(2.0, 2.0, 6.0, 6.0),
        }];
        let w = AdvLossWeights {
            lambda3: 0.0,
            ..Default::default()
        };
        assert!(adversarial_loss(&out, &gt, &w, 0).unwrap().value().item() < 1e-290);
        assert!(adversarial_loss(&out, &[], &w, 0).is_err());
    }

    fn uniform_prediction(obj: f64, cls: f64) -> Prediction {
        let l = DetectorConfig::default().layout();
        let (a, g) = (l.num_anchors(), l.grid);
        Prediction {
            pos: Tensor::zeros(&[4 * a, g, g]),
            obj: Tensor::full(&[a, g, g], obj),
            cls: Tensor::full(&[a * 2, g, g], cls),
            layout: l,
        }
    }

    #[test]
    fn score_map_compositions() {
        let p = uniform_prediction(0.3, 0.1);
        let m = score_map(&p, MaskStrategy::ObjConf);
        assert_eq!(m.shape(), &[8, 8]);
        assert!(m.data().iter().all(|&v| v == 0.3));
        let p = uniform_prediction(0.2, 0.4);
        assert!(score_map(&p, MaskStrategy::ObjOrCls).data().iter().all(|&v| v == 0.4));
        assert!(score_map(&p, MaskStrategy::ObjAndCls).data().iter().all(|&v| v == 0.2));
    }

    #[test]
    fn mask_gating_and_resize() {
        let mut s = Tensor::full(&[4, 4], 0.2);
        assert!(build_mask(&s, 0.25, (8, 8)).data().iter().all(|&v| v == 0.0));
        s.data_mut()[4 + 2] = 0.9; // row 1, col 2
        let m = build_mask(&s, 0.25, (8, 8));
        for y in 0..8 {
            for x in 0..8 {
                let want = if y / 2 == 1 && x / 2 == 2 { 0.9 } else { 0.0 };
                assert_eq!(m.data()[y * 8 + x], want);
            }
        }
    }

    #[test]
    fn distillation_zero_cases() {
        let tape = Tape::new();
        let f = Tensor::new(vec![2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        let a = tape.leaf(f.clone());
        let b = tape.leaf(f.map(|v| v * 2.0 + 1.0));
        let m1 = Tensor::full(&[2, 2], 0.7);
        let m2 = Tensor::full(&[2, 2], 0.2);
        let same = distillation_loss(a, tape.leaf(f), &m1, &m2).unwrap();
        assert_eq!(same.value().item(), 0.0);
        let annihilated = distillation_loss(a, b, &m1, &m1).unwrap();
        assert_eq!(annihilated.value().item(), 0.0);
        assert!(distillation_loss(a, b, &Tensor::zeros(&[3, 3]), &m1).is_err());
    }

    #[test]
    fn teacher_features_receive_no_gradient() {
        let tape = Tape::new();
        let t = tape.leaf(Tensor::full(&[1, 1, 2], 1.0));
        let s = tape.leaf(Tensor::full(&[1, 1, 2], 0.0));
        let l = distillation_loss(t, s, &Tensor::full(&[1, 2], 1.0), &Tensor::zeros(&[1, 2])).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(t).is_none());
        assert_eq!(g.get(s).unwrap().data(), &[-1.0, -1.0]);
    }

    #[test]
    fn total_loss_values() {
        let tape = Tape::new();
        let (a, d) = (tape.scalar(1.0), tape.scalar(2.0));
        assert_eq!(total_loss(a, d, 0.0).unwrap().value().item(), 1.0);
        assert_eq!(total_loss(a, d, 1.0).unwrap().value().item(), 3.0);
        assert!((total_loss(a, d, 0.01).unwrap().value().item() - 1.02).abs() < 1e-15);
        assert!(total_loss(a, d, -1.0).is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in MaskStrategy::ALL {
            assert_eq!(s.name().parse::<MaskStrategy>().unwrap(), s);
        }
        assert!("both".parse::<MaskStrategy>().is_err());
    }
}
