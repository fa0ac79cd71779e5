//! sRGB ↔ CIELAB conversion and k-means palette extraction.
//!
//! Environment pixels are clustered in LAB with plain squared Euclidean
//! distance. Centers are seeded with k-means++ and refined by Lloyd
//! iterations until assignments stop changing. The resulting centers are
//! converted back to 8-bit sRGB to form the [`Palette`].

use rand::seq::index::sample;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};

pub type Rgb8 = [u8; 3];

/// D65 reference white.
const WHITE: [f64; 3] = [0.950_47, 1.0, 1.088_83];

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.240_454_2, -1.537_138_5, -0.498_531_4],
    [-0.969_266_0, 1.876_010_8, 0.041_556_0],
    [0.055_643_4, -0.204_025_9, 1.057_225_2],
];

/// Maximum number of pixels clustered; larger inputs are subsampled.
pub const MAX_CLUSTER_PIXELS: usize = 100_000;

pub const DEFAULT_PALETTE_SIZE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabColor {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

impl LabColor {
    pub fn dist2(&self, other: &LabColor) -> f64 {
        let (dl, da, db) = (self.l - other.l, self.a - other.a, self.b - other.b);
        dl * dl + da * da + db * db
    }
}

fn decode_gamma(c: f64) -> f64 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn encode_gamma(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

const EPS: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;

fn lab_f(t: f64) -> f64 {
    if t > EPS {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    let t = f * f * f;
    if t > EPS {
        t
    } else {
        (116.0 * f - 16.0) / KAPPA
    }
}

/// sRGB (D65) to CIELAB.
pub fn srgb_to_lab(rgb: Rgb8) -> LabColor {
    let lin = rgb.map(|c| decode_gamma(f64::from(c) / 255.0));
    let xyz: [f64; 3] = std::array::from_fn(|i| {
        RGB_TO_XYZ[i].iter().zip(&lin).map(|(m, c)| m * c).sum::<f64>() / WHITE[i]
    });
    let [fx, fy, fz] = xyz.map(lab_f);
    LabColor {
        l: 116.0 * fy - 16.0,
        a: 500.0 * (fx - fy),
        b: 200.0 * (fy - fz),
    }
}

/// CIELAB to sRGB, clamping out-of-gamut channels into `[0, 255]`.
pub fn lab_to_srgb(lab: LabColor) -> Rgb8 {
    let fy = (lab.l + 16.0) / 116.0;
    let fx = fy + lab.a / 500.0;
    let fz = fy - lab.b / 200.0;
    let xyz = [lab_f_inv(fx) * WHITE[0], lab_f_inv(fy) * WHITE[1], lab_f_inv(fz) * WHITE[2]];
    std::array::from_fn(|i| {
        let lin: f64 = XYZ_TO_RGB[i].iter().zip(&xyz).map(|(m, c)| m * c).sum();
        let c = encode_gamma(lin.clamp(0.0, 1.0));
        (c * 255.0).round().clamp(0.0, 255.0) as u8
    })
}

/// Ordered set of distinct stealthy colors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Palette {
    colors: Vec<Rgb8>,
}

impl Palette {
    pub const MAX_COLORS: usize = 64;

    pub fn new(colors: Vec<Rgb8>) -> Result<Self> {
        if colors.is_empty() || colors.len() > Self::MAX_COLORS {
            return Err(Error::arg(format!(
                "palette needs 1..={} colors, got {}",
                Self::MAX_COLORS,
                colors.len()
            )));
        }
        for (i, c) in colors.iter().enumerate() {
            if colors[..i].contains(c) {
                return Err(Error::arg(format!("duplicate palette color {}", to_hex(*c))));
            }
        }
        Ok(Self { colors })
    }

    pub fn colors(&self) -> &[Rgb8] {
        &self.colors
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    /// Colors as `[0, 1]` floats, channel-major: `out[ch][i]`.
    pub fn unit_channels(&self) -> [Vec<f64>; 3] {
        std::array::from_fn(|ch| self.colors.iter().map(|c| f64::from(c[ch]) / 255.0).collect())
    }

    /// Index of the palette color nearest to `rgb` in LAB; ties go to the lower index.
    pub fn nearest_lab(&self, rgb: Rgb8) -> usize {
        let target = srgb_to_lab(rgb);
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.colors.iter().enumerate() {
            let d = srgb_to_lab(*c).dist2(&target);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    /// One `#RRGGBB` line per color.
    pub fn to_text(&self) -> String {
        self.colors.iter().map(|c| format!("{}\n", to_hex(*c))).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut colors = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            colors.push(from_hex(line).ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected #RRGGBB, got {line:?}"),
            })?);
        }
        Palette::new(colors)
    }
}

pub fn to_hex(c: Rgb8) -> String {
    format!("#{:02X}{:02X}{:02X}", c[0], c[1], c[2])
}

pub fn from_hex(s: &str) -> Option<Rgb8> {
    let h = s.strip_prefix('#')?;
    if h.len() != 6 || !h.is_ascii() {
        return None;
    }
    let byte = |i: usize| u8::from_str_radix(&h[i..i + 2], 16).ok();
    Some([byte(0)?, byte(2)?, byte(4)?])
}

/// Pixels harvested from an environment image.
#[derive(Clone, Debug)]
pub struct EnvironmentSample {
    pub pixels: Vec<Rgb8>,
}

impl EnvironmentSample {
    pub fn new(pixels: Vec<Rgb8>) -> Self {
        Self { pixels }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Full output of one clustering run.
#[derive(Clone, Debug)]
pub struct Clustering {
    pub centers: Vec<LabColor>,
    pub points: Vec<LabColor>,
    pub assignments: Vec<usize>,
    /// Clustering objective after each assignment step.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

impl Clustering {
    pub fn objective(&self) -> f64 {
        objective(&self.points, &self.centers, &self.assignments)
    }
}

pub fn objective(points: &[LabColor], centers: &[LabColor], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| p.dist2(&centers[a]))
        .sum()
}

fn nearest(p: &LabColor, centers: &[LabColor]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = p.dist2(c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn kmeans_pp(points: &[LabColor], m: usize, rng: &mut Rng) -> Vec<LabColor> {
    let mut centers = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| p.dist2(&centers[0])).collect();
    while centers.len() < m {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..points.len())
        } else {
            let mut r = rng.random::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        };
        let c = points[pick];
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(p.dist2(&c));
        }
        centers.push(c);
    }
    centers
}

/// Lloyd's algorithm in LAB with k-means++ seeding.
///
/// A cluster that ends up empty is re-seeded at the point farthest from its
/// current center (lowest index on ties), which keeps the run deterministic.
pub fn kmeans_lab(env: &EnvironmentSample, m: usize, seed: u64, max_iters: usize) -> Result<Clustering> {
    if m == 0 {
        return Err(Error::arg("cluster count must be positive"));
    }
    if env.len() < m {
        return Err(Error::arg(format!(
            "environment has {} pixels, fewer than {m} clusters",
            env.len()
        )));
    }
    let mut rng = seeded(seed);
    let pixels: Vec<Rgb8> = if env.len() > MAX_CLUSTER_PIXELS {
        let mut idx = sample(&mut rng, env.len(), MAX_CLUSTER_PIXELS).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| env.pixels[i]).collect()
    } else {
        env.pixels.clone()
    };
    let points: Vec<LabColor> = pixels.iter().map(|&p| srgb_to_lab(p)).collect();
    let mut centers = kmeans_pp(&points, m, &mut rng);

    let mut assignments = vec![usize::MAX; points.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let mut changed = false;
        for (a, p) in assignments.iter_mut().zip(&points) {
            let (k, _) = nearest(p, &centers);
            if *a != k {
                *a = k;
                changed = true;
            }
        }
        let obj = objective(&points, &centers, &assignments);
        if let Some(&prev) = history.last() {
            debug_assert!(obj <= prev * (1.0 + 1e-12) + 1e-9, "objective rose {prev} -> {obj}");
        }
        history.push(obj);
        if !changed || iterations >= max_iters {
            break;
        }
        iterations += 1;

        let mut sums = vec![[0.0f64; 3]; m];
        let mut counts = vec![0usize; m];
        for (p, &a) in points.iter().zip(&assignments) {
            sums[a][0] += p.l;
            sums[a][1] += p.a;
            sums[a][2] += p.b;
            counts[a] += 1;
        }
        for k in 0..m {
            if counts[k] > 0 {
                let n = counts[k] as f64;
                centers[k] = LabColor {
                    l: sums[k][0] / n,
                    a: sums[k][1] / n,
                    b: sums[k][2] / n,
                };
            }
        }
        let mut reseeded: Vec<usize> = Vec::new();
        for k in 0..m {
            if counts[k] == 0 {
                let far = points
                    .iter()
                    .zip(&assignments)
                    .enumerate()
                    .filter(|(i, _)| !reseeded.contains(i))
                    .map(|(i, (p, &a))| (i, p.dist2(&centers[a])))
                    .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
                centers[k] = points[far.0];
                reseeded.push(far.0);
            }
        }
    }
    Ok(Clustering {
        centers,
        points,
        assignments,
        objective_history: history,
        iterations,
    })
}

/// Clusters `env` into at most `m` stealthy colors.
///
/// Centers that collide after 8-bit quantization are merged, so the palette
/// may hold fewer than `m` colors for near-uniform environments.
pub fn extract_palette(env: &EnvironmentSample, m: usize, seed: u64, max_iters: usize) -> Result<Palette> {
    let clustering = kmeans_lab(env, m, seed, max_iters)?;
    let mut colors: Vec<Rgb8> = Vec::with_capacity(m);
    for c in &clustering.centers {
        let rgb = lab_to_srgb(*c);
        if !colors.contains(&rgb) {
            colors.push(rgb);
        }
    }
    if colors.len() < m {
        log::warn!("palette collapsed to {} distinct colors (asked for {m})", colors.len());
    }
    Palette::new(colors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_white_and_black() {
        let w = srgb_to_lab([255, 255, 255]);
        assert!((w.l - 100.0).abs() < 1e-3 && w.a.abs() < 1e-3 && w.b.abs() < 1e-3, "{w:?}");
        let k = srgb_to_lab([0, 0, 0]);
        assert!(k.l.abs() < 1e-3 && k.a.abs() < 1e-3 && k.b.abs() < 1e-3);
        assert_eq!(lab_to_srgb(LabColor { l: 100.0, a: 0.0, b: 0.0 }), [255, 255, 255]);
    }

    #[test]
    fn pure_red_matches_reference_colorimetry() {
        // frozen from an independent reference implementation (D65, 2°)
        let r = srgb_to_lab([255, 0, 0]);
        assert!((r.l - 53.240_588).abs() < 0.01, "{r:?}");
        assert!((r.a - 80.092_308).abs() < 0.01, "{r:?}");
        assert!((r.b - 67.202_751).abs() < 0.01, "{r:?}");
        let b = srgb_to_lab([0, 0, 255]);
        assert!((b.l - 32.295_673).abs() < 0.01 && (b.a - 79.185_591).abs() < 0.01);
        assert!((b.b + 107.857_300).abs() < 0.01);
    }

    #[test]
    fn out_of_gamut_is_clamped() {
        let c = lab_to_srgb(LabColor { l: 50.0, a: 200.0, b: 0.0 });
        assert_eq!(c[0], 255);
    }

    #[test]
    fn exhaustive_round_trip() {
        let mut mismatches = 0usize;
        for r in 0..=255u8 {
            for g in 0..=255u8 {
                for b in (0..=255u8).step_by(3) {
                    if lab_to_srgb(srgb_to_lab([r, g, b])) != [r, g, b] {
                        mismatches += 1;
                    }
                }
            }
        }
        assert_eq!(mismatches, 0);
    }

    #[test]
    fn hex_round_trip_and_errors() {
        let p = Palette::new(vec![[1, 2, 3], [255, 128, 0]]).unwrap();
        assert_eq!(p.to_text(), "#010203\n#FF8000\n");
        assert_eq!(Palette::parse(&p.to_text()).unwrap(), p);
        match Palette::parse("#010203\nnope\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(Palette::new(vec![[1, 2, 3], [1, 2, 3]]).is_err());
    }

    #[test]
    fn uniform_image_single_cluster() {
        let env = EnvironmentSample::new(vec![[40, 90, 30]; 50]);
        let p = extract_palette(&env, 1, 3, 50).unwrap();
        assert_eq!(p.colors(), &[[40, 90, 30]]);
    }

    #[test]
    fn too_few_pixels_is_an_error() {
        let env = EnvironmentSample::new(vec![[0, 0, 0]; 3]);
        assert!(extract_palette(&env, 4, 0, 10).is_err());
    }
}
