//! Independent reference computations and the property suites built on them.

use rand::seq::index::sample;
use rand::Rng as _;
use stealthpatch::colorspace::{kmeans_lab, srgb_to_lab, EnvironmentSample, LabColor, Palette, Rgb8};
use stealthpatch::patchgen::{render_hard, render_soft_with_noise, sample_gumbel, PatchParams};
use stealthpatch::rng::seeded;
use stealthpatch::tensor::{Tape, Tensor};

fn d2(a: &LabColor, b: &LabColor) -> f64 {
    (a.l - b.l).powi(2) + (a.a - b.a).powi(2) + (a.b - b.b).powi(2)
}

/// Plain Lloyd from `m` distinct random points, run to a fixed point;
/// returns the best objective over `restarts` runs.
pub fn kmeans_restart_oracle(points: &[LabColor], m: usize, restarts: usize, seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let mut best = f64::INFINITY;
    for _ in 0..restarts {
        let mut centers: Vec<LabColor> = sample(&mut rng, points.len(), m).iter().map(|i| points[i]).collect();
        let mut assign = vec![usize::MAX; points.len()];
        loop {
            let mut changed = false;
            for (p, a) in points.iter().zip(assign.iter_mut()) {
                let k = (0..m)
                    .min_by(|&i, &j| d2(p, &centers[i]).total_cmp(&d2(p, &centers[j])))
                    .unwrap();
                if *a != k {
                    *a = k;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            for (k, c) in centers.iter_mut().enumerate() {
                let members: Vec<&LabColor> = points.iter().zip(&assign).filter(|(_, &a)| a == k).map(|(p, _)| p).collect();
                if members.is_empty() {
                    continue;
                }
                let n = members.len() as f64;
                *c = LabColor {
                    l: members.iter().map(|p| p.l).sum::<f64>() / n,
                    a: members.iter().map(|p| p.a).sum::<f64>() / n,
                    b: members.iter().map(|p| p.b).sum::<f64>() / n,
                };
            }
        }
        let obj: f64 = points.iter().zip(&assign).map(|(p, &k)| d2(p, &centers[k])).sum();
        best = best.min(obj);
    }
    best
}

pub fn random_pixels(n: usize, seed: u64) -> Vec<Rgb8> {
    let mut rng = seeded(seed);
    (0..n).map(|_| std::array::from_fn(|_| rng.random::<u8>())).collect()
}

#[derive(Debug)]
pub struct ClusteringCheck {
    pub monotone: bool,
    pub nearest_center: bool,
    /// Library objective over the best restart-oracle objective.
    pub ratio: f64,
}

pub fn clustering_suite(seed: u64) -> ClusteringCheck {
    let pixels = random_pixels(200, seed);
    let env = EnvironmentSample::new(pixels.clone());
    let c = kmeans_lab(&env, 4, seed, 100).unwrap();
    let monotone = c.objective_history.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0].abs());
    let nearest_center = c.points.iter().zip(&c.assignments).all(|(p, &k)| {
        let own = d2(p, &c.centers[k]);
        c.centers.iter().all(|q| own <= d2(p, q) + 1e-9)
    });
    let points: Vec<LabColor> = pixels.iter().map(|&p| srgb_to_lab(p)).collect();
    let oracle = kmeans_restart_oracle(&points, 4, 100, seed ^ 0x5eed);
    ClusteringCheck {
        monotone,
        nearest_center,
        ratio: c.objective() / oracle,
    }
}

#[derive(Debug)]
pub struct GumbelCheck {
    /// Largest `|Σ_i w_i − 1|` over pixels.
    pub sum_err: f64,
    /// Largest per-channel gap between the ω = 1e-6 render and the arg-max color.
    pub limit_err: f64,
    /// Fraction of hard-rendered pixels that are palette colors.
    pub membership: f64,
}

pub fn gumbel_suite(seed: u64) -> GumbelCheck {
    let mut rng = seeded(seed);
    let palette = Palette::new(random_pixels(5, seed ^ 1)).unwrap();
    let m = palette.len();
    let (h, w) = (8, 8);
    let logits = Tensor::new(
        vec![m, h, w],
        (0..m * h * w).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )
    .unwrap();
    let gumbel = sample_gumbel(&[m, h, w], &mut rng);
    let tape = Tape::new();
    let l = tape.constant(logits.clone());

    let soft = render_soft_with_noise(l, &palette, 0.3, &gumbel).unwrap();
    let wts = soft.weights.value();
    let plane = h * w;
    let sum_err = (0..plane)
        .map(|p| ((0..m).map(|i| wts.data()[i * plane + p]).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);

    let cold = render_soft_with_noise(l, &palette, 1e-6, &gumbel).unwrap().image.value();
    let mut limit_err: f64 = 0.0;
    for p in 0..plane {
        let k = (0..m)
            .max_by(|&i, &j| {
                let s = |c: usize| logits.data()[c * plane + p] + gumbel.data()[c * plane + p];
                s(i).total_cmp(&s(j))
            })
            .unwrap();
        for ch in 0..3 {
            let want = f64::from(palette.colors()[k][ch]) / 255.0;
            limit_err = limit_err.max((cold.data()[ch * plane + p] - want).abs());
        }
    }

    let params = PatchParams::new(logits, 0.3, palette.clone()).unwrap();
    let hard = render_hard(&params);
    let members = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| palette.colors().contains(&hard.pixel_rgb8(y, x)))
        .count();
    GumbelCheck {
        sum_err,
        limit_err,
        membership: members as f64 / plane as f64,
    }
}

/// Global SSIM of two equally sized grayscale images, straight from the
/// definition with two-pass statistics.
pub fn ssim_direct(x: &[f64], y: &[f64], l: f64) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let vx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
    let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
    let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    let c1 = (0.01 * l).powi(2);
    let c2 = (0.03 * l).powi(2);
    let lum = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
    let cs = (2.0 * cov + c2) / (vx + vy + c2);
    lum * cs
}
