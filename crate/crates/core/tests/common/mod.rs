//! Finite-difference gradient checking shared by the integration tests.
#![allow(dead_code)]

pub mod oracle;
pub mod suite;

use rand::Rng as _;
use stealthpatch::rng::{seeded, Rng};
use stealthpatch::tensor::{Tape, Tensor, Var};
use stealthpatch::Result;

/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`
/// so that roundoff on vanishing gradients does not dominate.
pub const FLOOR: f64 = 1e-3;
pub const STEP: f64 = 1e-5;

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values of magnitude in `[gap, hi)` with random signs, away from kinks at 0.
pub fn away_from_zero(shape: &[usize], gap: f64, hi: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(gap..hi);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub struct Report {
    pub name: String,
    pub probes: usize,
    pub max_rel: f64,
}

impl Report {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel < tol
    }
}

/// Projects the output of `f` on fixed random weights and compares the
/// gradient with respect to every input against central differences at
/// `probes` random coordinates per input.
pub fn check<F>(name: &str, inputs: &[Tensor], probes: usize, seed: u64, f: F) -> Report
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut rng = seeded(seed);
    let shape = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).unwrap().shape()
    };
    let proj = uniform(&shape, -1.0, 1.0, &mut rng);
    let eval = |xs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&tape, &vars).unwrap();
        y.mul(tape.constant(proj.clone())).unwrap().sum_all().value().item()
    };
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let y = f(&tape, &vars).unwrap();
        let loss = y.mul(tape.constant(proj.clone())).unwrap().sum_all();
        let g = tape.backward(loss).unwrap();
        vars.iter().map(|v| g.get_or_zeros(*v)).collect()
    };
    let mut max_rel: f64 = 0.0;
    let mut count = 0;
    for (k, x) in inputs.iter().enumerate() {
        for _ in 0..probes {
            let i = rng.random_range(0..x.numel());
            let h = STEP * x.data()[i].abs().max(1.0);
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] += h;
            let up = eval(&xs);
            xs[k].data_mut()[i] -= 2.0 * h;
            let down = eval(&xs);
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            max_rel = max_rel.max(rel);
            count += 1;
        }
    }
    Report {
        name: name.to_string(),
        probes: count,
        max_rel,
    }
}
