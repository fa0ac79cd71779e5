//! Palette-constrained patch parameterization.
//!
//! Each patch pixel carries one logit per palette color. Training renders the
//! patch softly: fresh Gumbel(0, 1) noise is added to the logits, the sum is
//! divided by the temperature ω and pushed through a softmax over colors, and
//! the pixel becomes the weighted mix of palette colors. Deployment renders
//! hard, taking the arg-max color per pixel.

use rand::distr::Open01;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::colorspace::{from_hex, to_hex, Palette, Rgb8};
use crate::error::{Error, Result};
use crate::io::Bundle;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Temperature used when nothing else is configured.
pub const DEFAULT_OMEGA: f64 = 0.3;

/// Lowest temperature an annealing schedule may reach.
pub const OMEGA_FLOOR: f64 = 1e-3;

const INIT_STD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct PatchParams {
    /// `[m, H, W]` unnormalized log-probabilities.
    pub logits: Tensor,
    pub omega: f64,
    pub palette: Palette,
}

impl PatchParams {
    pub fn new(logits: Tensor, omega: f64, palette: Palette) -> Result<Self> {
        let s = logits.shape();
        if s.len() != 3 || s[0] != palette.len() {
            return Err(Error::arg(format!(
                "logits {s:?} do not match a {}-color palette",
                palette.len()
            )));
        }
        check_omega(omega)?;
        Ok(Self {
            logits,
            omega,
            palette,
        })
    }

    /// Logits drawn i.i.d. from Normal(0, 0.1).
    pub fn random(palette: Palette, height: usize, width: usize, omega: f64, rng: &mut Rng) -> Result<Self> {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let n = palette.len() * height * width;
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        let logits = Tensor::new(vec![palette.len(), height, width], data)?;
        Self::new(logits, omega, palette)
    }

    pub fn height(&self) -> usize {
        self.logits.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.logits.shape()[2]
    }

    pub fn num_colors(&self) -> usize {
        self.palette.len()
    }

    pub fn to_bundle(&self) -> Bundle {
        let mut b = Bundle::new("student-patch");
        b.set_meta("omega", self.omega);
        let hex: Vec<String> = self.palette.colors().iter().map(|c| to_hex(*c)).collect();
        b.set_meta("palette", hex.join(","));
        b.push("logits", self.logits.clone());
        b
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        let colors = b
            .meta("palette")?
            .split(',')
            .map(|h| from_hex(h).ok_or_else(|| Error::Checkpoint(format!("bad palette color {h:?}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(b.tensor("logits")?.clone(), b.meta_parse("omega")?, Palette::new(colors)?)
    }
}

fn check_omega(omega: f64) -> Result<()> {
    if omega > 0.0 && omega.is_finite() {
        Ok(())
    } else {
        Err(Error::arg(format!("temperature must be positive, got {omega}")))
    }
}

/// A `[3, H, W]` patch image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedPatch {
    pub image: Tensor,
}

impl RenderedPatch {
    pub fn side(&self) -> usize {
        self.image.shape()[1]
    }

    /// Uniform gray patch, the usual control.
    pub fn gray(side: usize) -> Self {
        Self {
            image: Tensor::full(&[3, side, side], 0.5),
        }
    }

    /// Pixel `(y, x)` quantized to 8 bits.
    pub fn pixel_rgb8(&self, y: usize, x: usize) -> Rgb8 {
        std::array::from_fn(|c| (self.image.at(&[c, y, x]) * 255.0).round().clamp(0.0, 255.0) as u8)
    }
}

/// Output of a differentiable render.
pub struct SoftRender<'t> {
    /// `[3, H, W]` patch.
    pub image: Var<'t>,
    /// `[m, H, W]` per-pixel color weights.
    pub weights: Var<'t>,
}

/// `[m, H, W]` Gumbel(0, 1) draws, `-ln(-ln u)` with `u` in the open unit interval.
pub fn sample_gumbel(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u: f64 = rng.sample(Open01);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("gumbel shape")
}

/// `[3, m]` constant holding the palette colors in `[0, 1]`.
fn palette_matrix<'t>(tape: &'t Tape, palette: &Palette) -> Var<'t> {
    let data = palette.unit_channels().concat();
    tape.constant(Tensor::new(vec![3, palette.len()], data).expect("palette matrix"))
}

/// Soft render with caller-supplied Gumbel noise.
pub fn render_soft_with_noise<'t>(
    logits: Var<'t>,
    palette: &Palette,
    omega: f64,
    gumbel: &Tensor,
) -> Result<SoftRender<'t>> {
    check_omega(omega)?;
    let shape = logits.shape();
    if shape.len() != 3 || shape[0] != palette.len() {
        return Err(Error::arg(format!(
            "logits {shape:?} do not match a {}-color palette",
            palette.len()
        )));
    }
    let tape = logits.tape();
    let noise = tape.constant(gumbel.clone());
    let weights = logits.add(noise)?.scale(1.0 / omega).softmax(0)?;
    let (m, h, w) = (shape[0], shape[1], shape[2]);
    let image = palette_matrix(tape, palette)
        .matmul(weights.reshape(&[m, h * w])?)?
        .reshape(&[3, h, w])?;
    Ok(SoftRender { image, weights })
}

/// Differentiable render with one fresh Gumbel draw per pixel and color.
pub fn render_soft<'t>(
    logits: Var<'t>,
    palette: &Palette,
    omega: f64,
    rng: &mut Rng,
) -> Result<SoftRender<'t>> {
    let gumbel = sample_gumbel(&logits.shape(), rng);
    render_soft_with_noise(logits, palette, omega, &gumbel)
}

/// Arg-max color index per pixel; ties resolve to the lowest index.
pub fn hard_indices(logits: &Tensor) -> Vec<usize> {
    let s = logits.shape();
    let (m, plane) = (s[0], s[1] * s[2]);
    let d = logits.data();
    (0..plane)
        .map(|p| {
            let mut best = 0;
            for k in 1..m {
                if d[k * plane + p] > d[best * plane + p] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Discrete render: each pixel takes exactly one palette color.
pub fn render_hard(params: &PatchParams) -> RenderedPatch {
    let idx = hard_indices(&params.logits);
    let (h, w) = (params.height(), params.width());
    let channels = params.palette.unit_channels();
    let mut data = vec![0.0; 3 * h * w];
    for (c, chan) in channels.iter().enumerate() {
        for (p, &k) in idx.iter().enumerate() {
            data[c * h * w + p] = chan[k];
        }
    }
    RenderedPatch {
        image: Tensor::new(vec![3, h, w], data).expect("patch shape"),
    }
}

/// Quantize every pixel of `patch` to its nearest palette color in LAB.
pub fn quantize_to_palette(patch: &RenderedPatch, palette: &Palette) -> RenderedPatch {
    let side_h = patch.image.shape()[1];
    let side_w = patch.image.shape()[2];
    let channels = palette.unit_channels();
    let mut out = patch.image.clone();
    let plane = side_h * side_w;
    let mut cache = std::collections::HashMap::new();
    for y in 0..side_h {
        for x in 0..side_w {
            let rgb = patch.pixel_rgb8(y, x);
            let k = *cache.entry(rgb).or_insert_with(|| palette.nearest_lab(rgb));
            for (c, chan) in channels.iter().enumerate() {
                out.data_mut()[c * plane + y * side_w + x] = chan[k];
            }
        }
    }
    RenderedPatch { image: out }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TemperatureSchedule {
    Constant(f64),
    /// Linear interpolation from `start` to `end` over `steps`, then held.
    Linear { start: f64, end: f64, steps: usize },
    /// `start · 2^(-step / half_life)`.
    Exponential { start: f64, half_life: f64 },
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule::Constant(DEFAULT_OMEGA)
    }
}

impl TemperatureSchedule {
    pub fn at(&self, step: usize) -> f64 {
        let raw = match *self {
            TemperatureSchedule::Constant(w) => w,
            TemperatureSchedule::Linear { start, end, steps } => {
                if steps == 0 || step >= steps {
                    end
                } else {
                    start + (end - start) * step as f64 / steps as f64
                }
            }
            TemperatureSchedule::Exponential { start, half_life } => {
                start * 0.5f64.powf(step as f64 / half_life)
            }
        };
        if raw.is_nan() || raw < OMEGA_FLOOR {
            log::warn!("temperature {raw} below floor, clamped to {OMEGA_FLOOR}");
            OMEGA_FLOOR
        } else {
            raw
        }
    }
}

/// Sets `params.omega` from `schedule` at `step` and returns the new value.
pub fn anneal_temperature(params: &mut PatchParams, schedule: &TemperatureSchedule, step: usize) -> f64 {
    params.omega = schedule.at(step);
    params.omega
}
