//! Synthetic scenes, patch compositing and expectation-over-transformation.
//!
//! A scene is a themed background (two-color gradient plus small clutter
//! shapes) with one to three high-contrast "person" silhouettes of the
//! target class and, sometimes, a vehicle-like distractor of class 1.
//!
//! Compositing scales the patch to a fraction of each target box, rotates
//! it, jitters contrast and brightness, pastes it centered on the box and
//! finally adds Gaussian pixel noise. Resampling is bilinear and expressed as
//! a fixed sparse linear map, so the output stays differentiable with
//! respect to patch pixels.

use std::rc::Rc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::colorspace::{EnvironmentSample, Rgb8};
use crate::error::{Error, Result};
use crate::geometry::{BBox, GtBox, TARGET_CLASS};
use crate::rng::{seeded, Rng};
use crate::tensor::{SparseMap, Tape, Tensor, Var};

/// Muted outdoor colors the backgrounds are drawn from.
pub const DEFAULT_THEME: [Rgb8; 6] = [
    [92, 128, 64],
    [58, 86, 44],
    [140, 112, 78],
    [168, 160, 132],
    [110, 140, 160],
    [124, 124, 116],
];

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub size: usize,
    pub min_targets: usize,
    pub max_targets: usize,
    /// Target box height range in pixels.
    pub target_height: (f64, f64),
    /// Probability of adding one class-1 distractor.
    pub distractor_prob: f64,
    /// Range of clutter shape counts.
    pub clutter: (usize, usize),
    pub theme: Vec<Rgb8>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            size: 64,
            min_targets: 1,
            max_targets: 3,
            target_height: (30.0, 46.0),
            distractor_prob: 0.4,
            clutter: (6, 12),
            theme: DEFAULT_THEME.to_vec(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::Config(format!("scene size {} too small", self.size)));
        }
        if self.min_targets == 0 || self.min_targets > self.max_targets {
            return Err(Error::Config(format!(
                "target count range {}..={} invalid",
                self.min_targets, self.max_targets
            )));
        }
        let (lo, hi) = self.target_height;
        if !(lo > 4.0 && lo <= hi && hi < self.size as f64) {
            return Err(Error::Config(format!("target height range {lo}..{hi} invalid")));
        }
        if self.theme.is_empty() {
            return Err(Error::Config("empty background theme".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapeKind {
    Rect,
    Ellipse,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Clutter {
    pub kind: ShapeKind,
    pub bbox: BBox,
    pub color: [f64; 3],
}

/// Everything needed to redraw a scene's background.
#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundDescriptor {
    pub size: usize,
    pub from: [f64; 3],
    pub to: [f64; 3],
    /// Gradient direction in radians.
    pub angle: f64,
    pub clutter: Vec<Clutter>,
}

impl BackgroundDescriptor {
    pub fn render(&self) -> Tensor {
        let s = self.size;
        let mut img = Tensor::zeros(&[3, s, s]);
        let (dx, dy) = (self.angle.cos(), self.angle.sin());
        let half = s as f64 / 2.0;
        let reach = half * (dx.abs() + dy.abs());
        let d = img.data_mut();
        for y in 0..s {
            for x in 0..s {
                let px = x as f64 + 0.5 - half;
                let py = y as f64 + 0.5 - half;
                let t = ((px * dx + py * dy) / reach * 0.5 + 0.5).clamp(0.0, 1.0);
                for c in 0..3 {
                    d[c * s * s + y * s + x] = self.from[c] + (self.to[c] - self.from[c]) * t;
                }
            }
        }
        for cl in &self.clutter {
            let color = cl.color;
            let bbox = cl.bbox;
            match cl.kind {
                ShapeKind::Rect => fill(&mut img, |px, py| inside_rect(&bbox, px, py), color),
                ShapeKind::Ellipse => fill(&mut img, |px, py| inside_ellipse(&bbox, px, py), color),
            }
        }
        img
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[3, S, S]` in `[0, 1]`.
    pub image: Tensor,
    pub boxes: Vec<GtBox>,
    /// Present for synthesized scenes, absent for imported ones.
    pub background: Option<BackgroundDescriptor>,
}

impl Scene {
    pub fn size(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn target_boxes(&self) -> impl Iterator<Item = &GtBox> {
        self.boxes.iter().filter(|b| b.class_id == TARGET_CLASS)
    }

    /// Imported scene; boxes must lie inside the square image.
    pub fn from_parts(image: Tensor, boxes: Vec<GtBox>) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || s[1] != s[2] {
            return Err(Error::arg(format!("scene image must be [3, S, S], got {s:?}")));
        }
        let size = s[1] as f64;
        for b in &boxes {
            let bb = b.bbox;
            if !bb.is_valid() || bb.x1 < 0.0 || bb.y1 < 0.0 || bb.x2 > size || bb.y2 > size {
                return Err(Error::arg(format!("box {bb:?} outside the {size}-px image")));
            }
        }
        Ok(Self {
            image,
            boxes,
            background: None,
        })
    }

    /// The background alone, without any objects.
    pub fn environment_image(&self) -> Option<Tensor> {
        self.background.as_ref().map(BackgroundDescriptor::render)
    }
}

fn inside_rect(b: &BBox, px: f64, py: f64) -> bool {
    px >= b.x1 && px < b.x2 && py >= b.y1 && py < b.y2
}

fn inside_ellipse(b: &BBox, px: f64, py: f64) -> bool {
    let (cx, cy) = b.center();
    let rx = b.width() / 2.0;
    let ry = b.height() / 2.0;
    let u = (px - cx) / rx;
    let v = (py - cy) / ry;
    u * u + v * v <= 1.0
}

/// Paint `color` on every pixel whose center satisfies `inside`.
fn fill(img: &mut Tensor, inside: impl Fn(f64, f64) -> bool, color: [f64; 3]) {
    let s = img.shape()[1];
    let d = img.data_mut();
    for y in 0..s {
        for x in 0..s {
            if inside(x as f64 + 0.5, y as f64 + 0.5) {
                for c in 0..3 {
                    d[c * s * s + y * s + x] = color[c];
                }
            }
        }
    }
}

fn jitter(rng: &mut Rng, base: Rgb8, amount: f64) -> [f64; 3] {
    base.map(|c| (f64::from(c) / 255.0 + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn mean_color(img: &Tensor, b: &BBox) -> [f64; 3] {
    let s = img.shape()[1];
    let mut acc = [0.0; 3];
    let mut n = 0.0_f64;
    let (x0, x1) = (b.x1.max(0.0) as usize, (b.x2.ceil() as usize).min(s));
    let (y0, y1) = (b.y1.max(0.0) as usize, (b.y2.ceil() as usize).min(s));
    for y in y0..y1 {
        for x in x0..x1 {
            for (c, a) in acc.iter_mut().enumerate() {
                *a += img.at(&[c, y, x]);
            }
            n += 1.0;
        }
    }
    acc.map(|a| a / n.max(1.0))
}

fn draw_person(img: &mut Tensor, b: &BBox, color: [f64; 3], shade: [f64; 3]) {
    let (x1, y1, w, h) = (b.x1, b.y1, b.width(), b.height());
    let r = (0.12 * h).min(w / 2.0);
    let head = BBox::new(x1 + w / 2.0 - r, y1, x1 + w / 2.0 + r, y1 + 2.0 * r);
    let torso = BBox::new(x1 + 0.15 * w, y1 + 0.22 * h, x1 + 0.85 * w, y1 + 0.62 * h);
    let arm_l = BBox::new(x1, y1 + 0.24 * h, x1 + 0.15 * w, y1 + 0.56 * h);
    let arm_r = BBox::new(x1 + 0.85 * w, y1 + 0.24 * h, x1 + w, y1 + 0.56 * h);
    let leg_l = BBox::new(x1 + 0.2 * w, y1 + 0.62 * h, x1 + 0.45 * w, y1 + h);
    let leg_r = BBox::new(x1 + 0.55 * w, y1 + 0.62 * h, x1 + 0.8 * w, y1 + h);
    fill(img, |px, py| inside_ellipse(&head, px, py), color);
    for part in [arm_l, arm_r, leg_l, leg_r] {
        fill(img, |px, py| inside_rect(&part, px, py), color);
    }
    fill(img, |px, py| inside_rect(&torso, px, py), shade);
}

fn draw_vehicle(img: &mut Tensor, b: &BBox, color: [f64; 3], dark: [f64; 3]) {
    let (x1, y1, w, h) = (b.x1, b.y1, b.width(), b.height());
    let cabin = BBox::new(x1 + 0.25 * w, y1, x1 + 0.7 * w, y1 + 0.35 * h);
    let body = BBox::new(x1, y1 + 0.3 * h, x1 + w, y1 + 0.78 * h);
    let r = 0.22 * h;
    let wheel_l = BBox::new(x1 + 0.22 * w - r, y1 + h - 2.0 * r, x1 + 0.22 * w + r, y1 + h);
    let wheel_r = BBox::new(x1 + 0.78 * w - r, y1 + h - 2.0 * r, x1 + 0.78 * w + r, y1 + h);
    fill(img, |px, py| inside_rect(&cabin, px, py), color);
    fill(img, |px, py| inside_rect(&body, px, py), color);
    for wheel in [wheel_l, wheel_r] {
        fill(img, |px, py| inside_ellipse(&wheel, px, py), dark);
    }
}

fn sample_background(rng: &mut Rng, config: &SceneConfig) -> BackgroundDescriptor {
    let theme = &config.theme;
    let s = config.size as f64;
    let i = rng.random_range(0..theme.len());
    let from = jitter(rng, theme[i], 0.06);
    let j = rng.random_range(0..theme.len());
    let to = jitter(rng, theme[j], 0.06);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let n = rng.random_range(config.clutter.0..=config.clutter.1);
    let clutter = (0..n)
        .map(|_| {
            let w = rng.random_range(2.0..8.0);
            let h = rng.random_range(2.0..8.0);
            let x = rng.random_range(0.0..s - w);
            let y = rng.random_range(0.0..s - h);
            let kind = if rng.random_bool(0.5) {
                ShapeKind::Rect
            } else {
                ShapeKind::Ellipse
            };
            let k = rng.random_range(0..theme.len());
            Clutter {
                kind,
                bbox: BBox::new(x, y, x + w, y + h),
                color: jitter(rng, theme[k], 0.08),
            }
        })
        .collect();
    BackgroundDescriptor {
        size: config.size,
        from,
        to,
        angle,
        clutter,
    }
}

/// Background-only environment image for palette extraction.
pub fn synthesize_environment(seed: u64, config: &SceneConfig) -> Result<Tensor> {
    config.validate()?;
    let mut rng = seeded(seed);
    Ok(sample_background(&mut rng, config).render())
}

/// Pixels of one or more `[3, H, W]` images as 8-bit triples.
pub fn environment_sample(images: &[&Tensor]) -> EnvironmentSample {
    let mut pixels = Vec::new();
    for img in images {
        let plane = img.shape()[1] * img.shape()[2];
        let d = img.data();
        for p in 0..plane {
            pixels.push(std::array::from_fn(|c| {
                (d[c * plane + p] * 255.0).round().clamp(0.0, 255.0) as u8
            }));
        }
    }
    EnvironmentSample::new(pixels)
}

fn place(rng: &mut Rng, s: f64, w: f64, h: f64, taken: &[BBox]) -> Option<BBox> {
    for _ in 0..40 {
        let x = rng.random_range(0.0..=(s - w));
        let y = rng.random_range(0.0..=(s - h));
        let b = BBox::new(x, y, x + w, y + h);
        if taken.iter().all(|t| t.iou(&b) == 0.0) {
            return Some(b);
        }
    }
    None
}

/// Deterministic synthetic scene for `seed`.
pub fn synthesize_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = seeded(seed);
    let s = config.size as f64;
    let background = sample_background(&mut rng, config);
    let mut image = background.render();
    let mut boxes: Vec<GtBox> = Vec::new();
    let mut taken: Vec<BBox> = Vec::new();

    let n_targets = rng.random_range(config.min_targets..=config.max_targets);
    for i in 0..n_targets {
        let h = rng.random_range(config.target_height.0..=config.target_height.1);
        let w = h * rng.random_range(0.45..0.6);
        let Some(b) = place(&mut rng, s, w, h, &taken) else {
            // the first target always fits in an empty image
            debug_assert!(i > 0);
            continue;
        };
        let bg = mean_color(&image, &b);
        let base: [f64; 3] = if luminance(bg) > 0.42 {
            std::array::from_fn(|_| rng.random_range(0.02..0.16))
        } else {
            std::array::from_fn(|_| rng.random_range(0.84..0.98))
        };
        let delta = rng.random_range(-0.08..0.08);
        let shade = base.map(|c| (c + delta).clamp(0.0, 1.0));
        draw_person(&mut image, &b, base, shade);
        boxes.push(GtBox {
            class_id: TARGET_CLASS,
            bbox: b,
        });
        taken.push(b);
    }

    if rng.random_bool(config.distractor_prob) {
        let h = rng.random_range(10.0..16.0);
        let w = h * rng.random_range(1.6..2.0);
        if let Some(b) = place(&mut rng, s, w, h, &taken) {
            let hue: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            let dark = [0.08, 0.08, 0.08];
            draw_vehicle(&mut image, &b, hue, dark);
            boxes.push(GtBox { class_id: 1, bbox: b });
        }
    }

    Ok(Scene {
        image,
        boxes,
        background: Some(background),
    })
}

/// Scenes for seeds `base, base+1, ...`.
pub fn synthesize_dataset(base_seed: u64, count: usize, config: &SceneConfig) -> Result<Vec<Scene>> {
    (0..count as u64)
        .map(|i| synthesize_scene(crate::rng::derive_seed(base_seed.wrapping_add(i), "scene"), config))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EotConfig {
    /// Multiplicative contrast range.
    pub contrast: (f64, f64),
    /// Additive brightness range.
    pub brightness: (f64, f64),
    /// Per-channel Gaussian noise σ on the whole image.
    pub noise_std: f64,
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    /// Patch side relative to the longer side of its target box.
    pub patch_scale: f64,
}

impl Default for EotConfig {
    fn default() -> Self {
        Self {
            contrast: (0.8, 1.2),
            brightness: (-0.1, 0.1),
            noise_std: 0.01,
            rotation_deg: 20.0,
            patch_scale: 0.25,
        }
    }
}

impl EotConfig {
    /// No augmentation, only placement.
    pub fn identity(patch_scale: f64) -> Self {
        Self {
            contrast: (1.0, 1.0),
            brightness: (0.0, 0.0),
            noise_std: 0.0,
            rotation_deg: 0.0,
            patch_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.contrast.0 <= self.contrast.1
            && self.brightness.0 <= self.brightness.1
            && self.noise_std >= 0.0
            && self.rotation_deg >= 0.0
            && self.patch_scale > 0.0
            && self.patch_scale <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid EOT settings {self:?}")))
        }
    }
}

/// Transform applied to one pasted patch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchTransform {
    pub contrast: f64,
    pub brightness: f64,
    /// Radians, counter-clockwise in image coordinates.
    pub angle: f64,
}

impl PatchTransform {
    pub const IDENTITY: PatchTransform = PatchTransform {
        contrast: 1.0,
        brightness: 0.0,
        angle: 0.0,
    };
}

/// One draw of the EOT distribution for a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct EotSample {
    /// One transform per target box, in box order.
    pub transforms: Vec<PatchTransform>,
    /// `[3, S, S]` additive noise.
    pub noise: Option<Tensor>,
}

fn uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

pub fn sample_eot(scene: &Scene, eot: &EotConfig, rng: &mut Rng) -> EotSample {
    let transforms = scene
        .target_boxes()
        .map(|_| {
            let max = eot.rotation_deg.to_radians();
            PatchTransform {
                contrast: uniform(rng, eot.contrast),
                brightness: uniform(rng, eot.brightness),
                angle: uniform(rng, (-max, max)),
            }
        })
        .collect();
    let noise = (eot.noise_std > 0.0).then(|| {
        let s = scene.size();
        let normal = Normal::new(0.0, eot.noise_std).expect("valid σ");
        let data = (0..3 * s * s).map(|_| normal.sample(rng)).collect();
        Tensor::new(vec![3, s, s], data).expect("noise shape")
    });
    EotSample { transforms, noise }
}

/// Bilinear warp of a `[3, P, P]` patch into a `[3, S, S]` canvas.
///
/// Returns the map and the list of covered canvas pixels.
pub fn warp_map(
    patch_side: usize,
    image_size: usize,
    center: (f64, f64),
    side: f64,
    angle: f64,
) -> Result<(SparseMap, Vec<usize>)> {
    if side < 2.0 {
        return Err(Error::arg(format!(
            "patch would be scaled to {side:.2} px, below the 2x2 minimum"
        )));
    }
    let (p, s) = (patch_side, image_size);
    let (cos, sin) = (angle.cos(), angle.sin());
    let half = side / 2.0;
    let reach = half * std::f64::consts::SQRT_2 + 1.0;
    let lo = |v: f64| ((v - reach).floor().max(0.0)) as usize;
    let hi = |v: f64| ((v + reach).ceil().min(s as f64)) as usize;
    let (cx, cy) = center;
    let mut triplets = Vec::new();
    let mut covered = Vec::new();
    let scale = p as f64 / side;
    for y in lo(cy)..hi(cy) {
        for x in lo(cx)..hi(cx) {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            // inverse rotation into patch-aligned coordinates
            let lx = cos * dx + sin * dy;
            let ly = -sin * dx + cos * dy;
            if lx < -half || lx >= half || ly < -half || ly >= half {
                continue;
            }
            let u = (lx + half) * scale - 0.5;
            let v = (ly + half) * scale - 0.5;
            let (u0, v0) = (u.floor(), v.floor());
            let (fu, fv) = (u - u0, v - v0);
            let clampi = |i: f64| i.clamp(0.0, (p - 1) as f64) as usize;
            let taps = [
                (clampi(u0), clampi(v0), (1.0 - fu) * (1.0 - fv)),
                (clampi(u0 + 1.0), clampi(v0), fu * (1.0 - fv)),
                (clampi(u0), clampi(v0 + 1.0), (1.0 - fu) * fv),
                (clampi(u0 + 1.0), clampi(v0 + 1.0), fu * fv),
            ];
            let pix = y * s + x;
            covered.push(pix);
            for c in 0..3 {
                for &(ui, vi, w) in &taps {
                    if w != 0.0 {
                        triplets.push((c * s * s + pix, c * p * p + vi * p + ui, w));
                    }
                }
            }
        }
    }
    Ok((SparseMap::from_triplets(3 * p * p, 3 * s * s, triplets)?, covered))
}

/// Precomputed warps for one scene and EOT draw; reusable across patches
/// of the same side.
pub struct Placement {
    base: Tensor,
    layers: Vec<Layer>,
    noise: Option<Tensor>,
    patch_side: usize,
}

struct Layer {
    map: Rc<SparseMap>,
    /// 0 on covered pixels, 1 elsewhere, `[3, S, S]`.
    keep: Tensor,
    transform: PatchTransform,
}

impl Placement {
    pub fn new(scene: &Scene, sample: &EotSample, eot: &EotConfig, patch_side: usize) -> Result<Self> {
        let targets: Vec<&GtBox> = scene.target_boxes().collect();
        if targets.is_empty() {
            return Err(Error::arg("scene has no target box to patch"));
        }
        if sample.transforms.len() != targets.len() {
            return Err(Error::arg(format!(
                "EOT sample has {} transforms for {} target boxes",
                sample.transforms.len(),
                targets.len()
            )));
        }
        let s = scene.size();
        let mut layers = Vec::with_capacity(targets.len());
        for (gt, t) in targets.iter().zip(&sample.transforms) {
            let b = gt.bbox;
            let side = eot.patch_scale * b.width().max(b.height());
            let (map, covered) = warp_map(patch_side, s, b.center(), side, t.angle)?;
            let mut keep = Tensor::full(&[3, s, s], 1.0);
            for &pix in &covered {
                for c in 0..3 {
                    keep.data_mut()[c * s * s + pix] = 0.0;
                }
            }
            layers.push(Layer {
                map: Rc::new(map),
                keep,
                transform: *t,
            });
        }
        Ok(Self {
            base: scene.image.clone(),
            layers,
            noise: sample.noise.clone(),
            patch_side,
        })
    }

    /// Composite `patch` (`[3, P, P]`); differentiable with respect to it.
    pub fn apply<'t>(&self, patch: Var<'t>) -> Result<Var<'t>> {
        let p = self.patch_side;
        if patch.shape() != [3, p, p] {
            return Err(Error::arg(format!(
                "patch must be [3, {p}, {p}], got {:?}",
                patch.shape()
            )));
        }
        let tape = patch.tape();
        let out_shape = self.base.shape().to_vec();
        let mut canvas = tape.constant(self.base.clone());
        for l in &self.layers {
            let t = l.transform;
            let adjusted = patch.scale(t.contrast).add_scalar(t.brightness).clamp(0.0, 1.0);
            let warped = adjusted.sparse_apply(Rc::clone(&l.map), &out_shape)?;
            canvas = canvas.mul(tape.constant(l.keep.clone()))?.add(warped)?;
        }
        if let Some(noise) = &self.noise {
            canvas = canvas.add(tape.constant(noise.clone()))?;
        }
        Ok(canvas.clamp(0.0, 1.0))
    }
}

/// Paste `patch` (`[3, P, P]`) onto every target box of `scene` using a
/// pre-drawn EOT sample. Differentiable with respect to `patch`.
pub fn composite<'t>(
    scene: &Scene,
    patch: Var<'t>,
    sample: &EotSample,
    eot: &EotConfig,
) -> Result<Var<'t>> {
    let pshape = patch.shape();
    if pshape.len() != 3 || pshape[0] != 3 || pshape[1] != pshape[2] {
        return Err(Error::arg(format!("patch must be [3, P, P], got {pshape:?}")));
    }
    Placement::new(scene, sample, eot, pshape[1])?.apply(patch)
}

/// Draw an EOT sample and composite in one go.
pub fn apply_patch<'t>(
    scene: &Scene,
    patch: Var<'t>,
    eot: &EotConfig,
    rng: &mut Rng,
) -> Result<Var<'t>> {
    eot.validate()?;
    let sample = sample_eot(scene, eot, rng);
    composite(scene, patch, &sample, eot)
}

/// Non-differentiable compositing of a fixed patch with no augmentation.
pub fn paste_patch(scene: &Scene, patch: &Tensor, patch_scale: f64) -> Result<Tensor> {
    let tape = Tape::new();
    let p = tape.constant(patch.clone());
    let eot = EotConfig::identity(patch_scale);
    let sample = EotSample {
        transforms: vec![PatchTransform::IDENTITY; scene.target_boxes().count()],
        noise: None,
    };
    let out = composite(scene, p, &sample, &eot)?;
    Ok((*out.value()).clone())
}
