//! The gradient probes, grouped by the module that owns each operation.

use std::rc::Rc;

use stealthpatch::colorspace::Palette;
use stealthpatch::detector::{bce_with_logits, detection_loss, DetectorConfig, DetectorWeights};
use stealthpatch::geometry::TARGET_CLASS;
use stealthpatch::losses::{adversarial_loss, distillation_loss, total_loss, AdvLossWeights};
use stealthpatch::patchgen::{render_soft_with_noise, sample_gumbel};
use stealthpatch::rng::seeded;
use stealthpatch::scene::{sample_eot, synthesize_scene, EotConfig, Placement, SceneConfig};
use stealthpatch::tensor::{SparseMap, Tensor};

use super::{away_from_zero, check, uniform, Report};

pub const PROBES: usize = 12;

pub fn tensor_ops() -> Vec<Report> {
    let mut rng = seeded(11);
    let a = uniform(&[3, 4], -2.0, 2.0, &mut rng);
    let b = uniform(&[3, 4], -2.0, 2.0, &mut rng);
    let pos = uniform(&[3, 4], 0.5, 3.0, &mut rng);
    let kinked = away_from_zero(&[3, 4], 0.05, 2.0, &mut rng);
    let c = Tensor::scalar(0.7);
    let m1 = uniform(&[3, 5], -1.0, 1.0, &mut rng);
    let m2 = uniform(&[5, 2], -1.0, 1.0, &mut rng);
    let img = uniform(&[1, 2, 7, 7], -1.0, 1.0, &mut rng);
    let ker = uniform(&[3, 2, 3, 3], -0.5, 0.5, &mut rng);
    let bias = uniform(&[3], -0.5, 0.5, &mut rng);
    let cube = away_from_zero(&[3, 2, 4], 0.05, 1.5, &mut rng);
    // keep min/max operands apart so no element sits on the switch
    let shifted = a.map(|v| v + 0.3);
    let mut triplets = Vec::new();
    for r in 0..8 {
        for _ in 0..3 {
            use rand::Rng as _;
            triplets.push((r, rng.random_range(0..12), rng.random_range(-1.0..1.0)));
        }
    }
    let sparse = Rc::new(SparseMap::from_triplets(12, 8, triplets).unwrap());

    let s = PROBES;
    vec![
        check("add", &[a.clone(), b.clone()], s, 1, |_, v| v[0].add(v[1])),
        check("mul by scalar operand", &[a.clone(), c.clone()], s, 2, |_, v| v[0].mul(v[1])),
        check("scalar operand divided", &[c.clone(), pos.clone()], s, 36, |_, v| v[0].div(v[1])),
        check("sub", &[a.clone(), b.clone()], s, 3, |_, v| v[0].sub(v[1])),
        check("mul", &[a.clone(), b.clone()], s, 4, |_, v| v[0].mul(v[1])),
        check("div", &[a.clone(), pos.clone()], s, 5, |_, v| v[0].div(v[1])),
        check("minimum", &[a.clone(), shifted.clone()], s, 6, |_, v| v[0].minimum(v[1])),
        check("maximum", &[a.clone(), shifted.clone()], s, 7, |_, v| v[0].maximum(v[1])),
        check("exp", std::slice::from_ref(&a), s, 8, |_, v| Ok(v[0].exp())),
        check("log", std::slice::from_ref(&pos), s, 9, |_, v| v[0].log()),
        check("relu", std::slice::from_ref(&kinked), s, 10, |_, v| Ok(v[0].relu())),
        check("sigmoid", std::slice::from_ref(&a), s, 11, |_, v| Ok(v[0].sigmoid())),
        check("abs", std::slice::from_ref(&kinked), s, 12, |_, v| Ok(v[0].abs())),
        check("softplus", std::slice::from_ref(&a), s, 13, |_, v| Ok(v[0].softplus())),
        check("neg", std::slice::from_ref(&a), s, 14, |_, v| Ok(v[0].neg())),
        check("scale", std::slice::from_ref(&a), s, 15, |_, v| Ok(v[0].scale(-1.7))),
        check("add_scalar", std::slice::from_ref(&a), s, 16, |_, v| Ok(v[0].add_scalar(0.4))),
        check("clamp", std::slice::from_ref(&kinked), s, 17, |_, v| Ok(v[0].add_scalar(0.02).clamp(0.0, 1.0))),
        check("square", std::slice::from_ref(&a), s, 18, |_, v| Ok(v[0].square())),
        check("softmax axis 0", std::slice::from_ref(&cube), s, 19, |_, v| v[0].softmax(0)),
        check("softmax axis 2", std::slice::from_ref(&cube), s, 20, |_, v| v[0].softmax(2)),
        check("sum_all", std::slice::from_ref(&a), s, 21, |_, v| Ok(v[0].sum_all())),
        check("sum axes", std::slice::from_ref(&cube), s, 22, |_, v| v[0].sum(Some(&[0, 2]))),
        check("mean", std::slice::from_ref(&cube), s, 23, |_, v| v[0].mean(Some(&[1]))),
        check("l2_norm", std::slice::from_ref(&cube), s, 24, |_, v| v[0].l2_norm(Some(&[0]))),
        check("reshape", std::slice::from_ref(&a), s, 25, |_, v| Ok(v[0].reshape(&[2, 6])?.square())),
        check("narrow", std::slice::from_ref(&cube), s, 26, |_, v| v[0].narrow(2, 1, 2)),
        check("gather", std::slice::from_ref(&a), s, 27, |_, v| v[0].gather(&[0, 5, 5, 11, 3])),
        check("sparse_apply", std::slice::from_ref(&a), s, 28, |_, v| {
            v[0].sparse_apply(Rc::clone(&sparse), &[2, 4])
        }),
        check("matmul", &[m1.clone(), m2.clone()], s, 29, |_, v| v[0].matmul(v[1])),
        check("conv2d stride 1", &[img.clone(), ker.clone()], s, 30, |_, v| v[0].conv2d(v[1], 1, 1)),
        check("conv2d stride 2", &[img.clone(), ker.clone()], s, 31, |_, v| v[0].conv2d(v[1], 2, 1)),
        check("conv2d no padding", &[img.clone(), ker.clone()], s, 32, |_, v| v[0].conv2d(v[1], 1, 0)),
        check("add_channel_bias", &[img.clone(), ker.clone(), bias.clone()], s, 33, |_, v| {
            v[0].conv2d(v[1], 1, 1)?.add_channel_bias(v[2])
        }),
        check("concat", &[a.clone(), b.clone()], s, 34, |t, v| t.concat(&[v[0], v[1].square()], 1)),
    ]
}


pub fn patchgen_ops() -> Vec<Report> {
    let mut rng = seeded(12);
    let palette = Palette::new(vec![[250, 10, 10], [10, 240, 30], [20, 20, 230], [128, 128, 60]]).unwrap();
    let logits = uniform(&[4, 5, 5], -1.0, 1.0, &mut rng);
    let gumbel = sample_gumbel(&[4, 5, 5], &mut rng);
    let (g, p) = (&gumbel, &palette);
    vec![
        check("render_soft image, omega 0.3", std::slice::from_ref(&logits), PROBES, 40, |_, v| {
            Ok(render_soft_with_noise(v[0], p, 0.3, g)?.image)
        }),
        check("render_soft image, omega 1", std::slice::from_ref(&logits), PROBES, 41, |_, v| {
            Ok(render_soft_with_noise(v[0], p, 1.0, g)?.image)
        }),
        check("render_soft weights", std::slice::from_ref(&logits), PROBES, 42, |_, v| {
            Ok(render_soft_with_noise(v[0], p, 0.3, g)?.weights)
        }),
    ]
}

pub fn scene_ops() -> Vec<Report> {
    let cfg = SceneConfig::default();
    let scene = synthesize_scene(5, &cfg).unwrap();
    let mut rng = seeded(13);
    // patch values chosen so contrast and brightness stay inside [0, 1]
    let patch = uniform(&[3, 8, 8], 0.3, 0.7, &mut rng);
    let mut out = Vec::new();
    for (i, eot) in [EotConfig::default(), EotConfig::identity(0.4)].into_iter().enumerate() {
        let sample = sample_eot(&scene, &eot, &mut rng);
        let placement = Placement::new(&scene, &sample, &eot, 8).unwrap();
        let name = if i == 0 { "composite with EOT" } else { "composite without EOT" };
        out.push(check(name, std::slice::from_ref(&patch), PROBES, 50 + i as u64, move |_, v| placement.apply(v[0])));
    }
    out
}

pub fn loss_ops() -> Vec<Report> {
    let cfg = SceneConfig::default();
    let scene = synthesize_scene(6, &cfg).unwrap();
    let weights = DetectorWeights::init(&DetectorConfig::default(), 3).unwrap();
    let mut rng = seeded(14);
    let image = scene.image.clone();
    let gt: Vec<_> = scene.target_boxes().copied().collect();
    let feat_t = uniform(&[16, 8, 8], -1.0, 1.0, &mut rng);
    let feat_s = uniform(&[16, 8, 8], -1.0, 1.0, &mut rng);
    let mask_t = uniform(&[8, 8], 0.0, 1.0, &mut rng);
    let mask_s = uniform(&[8, 8], 0.0, 1.0, &mut rng);
    let z = uniform(&[2, 6], -3.0, 3.0, &mut rng);
    let y = uniform(&[2, 6], 0.0, 1.0, &mut rng);
    let adv = Tensor::scalar(2.5);
    let dis = Tensor::scalar(0.8);

    let eot = EotConfig::default();
    let sample = sample_eot(&scene, &eot, &mut rng);
    let placement = Placement::new(&scene, &sample, &eot, 8).unwrap();
    let palette = Palette::new(vec![[200, 30, 30], [30, 200, 30], [30, 30, 200], [220, 220, 220]]).unwrap();
    let logits = uniform(&[4, 8, 8], -1.0, 1.0, &mut rng);
    let gumbel = sample_gumbel(&[4, 8, 8], &mut rng);
    let teacher = uniform(&[3, 8, 8], 0.0, 1.0, &mut rng);

    let aw = AdvLossWeights::default();
    let (w1, w2, w3, w4) = (weights.clone(), weights.clone(), weights.clone(), weights);
    let (gt1, gt2, gt3) = (gt.clone(), gt.clone(), gt);
    vec![
        check("bce_with_logits", &[z, y], PROBES, 60, |_, v| bce_with_logits(v[0], v[1])),
        check("detector forward (obj, cls, pos, feat)", std::slice::from_ref(&image), PROBES, 61, move |t, v| {
            let out = w1.bind(t, false).forward(v[0])?;
            let parts = [out.obj, out.cls, out.pos, out.feat].map(|p| p.reshape(&[p.value().numel()]).unwrap());
            t.concat(&parts, 0)
        }),
        check("detection loss", std::slice::from_ref(&image), PROBES, 62, move |t, v| {
            detection_loss(&w2.bind(t, false).forward(v[0])?, &gt1)
        }),
        check("adversarial loss", &[image], PROBES, 63, move |t, v| {
            adversarial_loss(&w3.bind(t, false).forward(v[0])?, &gt2, &aw, TARGET_CLASS)
        }),
        // the teacher side is detached by design; only the student side is probed
        check("distillation loss", &[feat_s], PROBES, 64, move |t, v| {
            distillation_loss(t.constant(feat_t.clone()), v[0], &mask_t, &mask_s)
        }),
        check("total loss", &[adv, dis], PROBES, 65, |_, v| total_loss(v[0], v[1], 0.7)),
        check("student objective end to end", &[logits], PROBES, 66, move |t, v| {
            let det = w4.bind(t, false);
            let soft = render_soft_with_noise(v[0], &palette, 0.3, &gumbel)?;
            let out_s = det.forward(placement.apply(soft.image)?)?;
            let out_t = det.forward(placement.apply(t.constant(teacher.clone()))?)?;
            let l_adv = adversarial_loss(&out_s, &gt3, &aw, TARGET_CLASS)?;
            let ones = Tensor::full(&[8, 8], 1.0);
            let half = Tensor::full(&[8, 8], 0.5);
            let l_dis = distillation_loss(out_t.feat, out_s.feat, &ones, &half)?;
            total_loss(l_adv, l_dis, 1.0)
        }),
    ]
}
