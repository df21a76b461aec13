//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use regseg::aleatoric::{
    loss_and_gradients, loss_and_gradients_frozen, stop_gradient_weights, FeatureKind, FeatureStack, Gradients,
    HeadConfig, HeadParameters, LossForm, Mode, TrainingPair,
};
use regseg::{DisplacementField, GridSpec, LabelVolume};

/// Weighted sum over the eight surrounding voxels, clamping the position
/// into the grid first.
pub fn naive_trilinear(data: &[f64], dims: [usize; 3], pos: [f64; 3]) -> f64 {
    let mut base = [0usize; 3];
    let mut t = [0.0; 3];
    for a in 0..3 {
        let top = (dims[a] - 1) as f64;
        let p = pos[a].max(0.0).min(top);
        let f = p.floor().min(top - 1.0).max(0.0);
        base[a] = f as usize;
        t[a] = p - f;
    }
    let mut acc = 0.0;
    for corner in 0..8 {
        let off = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            w *= if off[a] == 1 { t[a] } else { 1.0 - t[a] };
            idx[a] = base[a] + off[a];
        }
        acc += w * data[idx[0] + dims[0] * (idx[1] + dims[1] * idx[2])];
    }
    acc
}

pub fn naive_warp(data: &[f64], field: &DisplacementField) -> Vec<f64> {
    let dims = field.grid().dims();
    let grid = field.grid();
    (0..grid.len())
        .map(|i| {
            let (x, y, z) = grid.coords(i);
            let u = field.at(i);
            naive_trilinear(data, dims, [x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]])
        })
        .collect()
}

fn permutations3() -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for a in 0..3 {
        for b in 0..3 {
            for c in 0..3 {
                if a != b && b != c && a != c {
                    out.push([a, b, c]);
                }
            }
        }
    }
    out
}

fn inversions(p: [usize; 3]) -> usize {
    let mut n = 0;
    for i in 0..3 {
        for j in i + 1..3 {
            if p[i] > p[j] {
                n += 1;
            }
        }
    }
    n
}

/// Exhaustive tetrahedral scan: every cell, every axis permutation, signed
/// volume by the scalar triple product with the permutation's parity.
pub fn ndv_oracle(field: &DisplacementField) -> f64 {
    let grid = field.grid();
    let [nx, ny, nz] = grid.dims();
    let mapped = |p: [usize; 3]| -> [f64; 3] {
        let u = field.at(p[0] + nx * (p[1] + ny * p[2]));
        [p[0] as f64 + u[0], p[1] as f64 + u[1], p[2] as f64 + u[2]]
    };
    let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let cross = |a: [f64; 3], b: [f64; 3]| {
        [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
    };
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let mut negative = 0.0;
    let mut cells = 0usize;
    for z in 0..nz - 1 {
        for y in 0..ny - 1 {
            for x in 0..nx - 1 {
                cells += 1;
                for perm in permutations3() {
                    let sign = if inversions(perm) % 2 == 0 { 1.0 } else { -1.0 };
                    let mut v = [x, y, z];
                    let p0 = mapped(v);
                    v[perm[0]] += 1;
                    let p1 = mapped(v);
                    v[perm[1]] += 1;
                    let p2 = mapped(v);
                    v[perm[2]] += 1;
                    let p3 = mapped(v);
                    let vol = sign * dot(sub(p1, p0), cross(sub(p2, p0), sub(p3, p0))) / 6.0;
                    if vol < 0.0 {
                        negative += -vol;
                    }
                }
            }
        }
    }
    100.0 * negative / cells as f64
}

pub fn small_head(seed: u64) -> HeadParameters {
    let cfg = HeadConfig {
        input_channels: 2,
        hidden_channels: 2,
        output_channels: 2,
        leaky_slope: 0.2,
    };
    let mut params = HeadParameters::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    // non-trivial batch-norm affine terms and biases
    for (k, t) in params.tensors_mut().into_iter().enumerate() {
        if k % 2 == 1 || t.len() <= 2 {
            t.iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        }
    }
    params
}

pub fn random_pair(seed: u64, dims: [usize; 3], channels: usize) -> TrainingPair {
    let grid = GridSpec::cube(dims).unwrap();
    let n = grid.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features: Vec<f64> = (0..2 * n).map(|_| rng.random_range(0.0..1.0)).collect();
    let w: Vec<f64> = (0..channels * n).map(|_| rng.random_range(0.0..1.0)).collect();
    let t: Vec<f64> = (0..channels * n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    TrainingPair::new(
        FeatureStack::from_raw(grid, vec![FeatureKind::AbsDiff, FeatureKind::Fixed], features).unwrap(),
        LabelVolume::new(grid, channels, w).unwrap(),
        LabelVolume::new(grid, channels, t).unwrap(),
    )
    .unwrap()
}

/// Stop-gradient weights at the current parameters.
pub fn frozen_weights(params: &HeadParameters, pair: &TrainingPair, beta: f64) -> Vec<f64> {
    let pass = regseg::aleatoric::forward(params, pair.features.data(), pair.features.grid().dims(), Mode::Train).unwrap();
    stop_gradient_weights(&pass.output, beta)
}

/// Worst mismatch between analytic gradients and central differences of the
/// loss with the stop-gradient weights held fixed.
///
/// A perturbation that flips any LeakyReLU input across zero leaves the
/// region where the loss is differentiable; such parameters are counted in
/// `kinked` and not compared.
pub struct GradCheck {
    pub checked: usize,
    /// Parameters whose perturbation crossed a LeakyReLU kink.
    pub kinked: usize,
    /// Largest relative error among gradients above 1e-6 in magnitude.
    pub worst_rel: f64,
    pub failures: Vec<String>,
}

fn branch_pattern(params: &HeadParameters, pair: &TrainingPair) -> Vec<bool> {
    regseg::aleatoric::forward(params, pair.features.data(), pair.features.grid().dims(), Mode::Train)
        .unwrap()
        .negative_branch()
}

pub fn gradient_check(params: &HeadParameters, pair: &TrainingPair, beta: f64, form: LossForm, h: f64) -> GradCheck {
    let weights = frozen_weights(params, pair, beta);
    let (_, analytic) = loss_and_gradients(params, pair, beta, form).unwrap();
    let names = HeadParameters::tensor_names();
    let mut report = GradCheck {
        checked: 0,
        kinked: 0,
        worst_rel: 0.0,
        failures: Vec::new(),
    };
    let base = branch_pattern(params, pair);
    let lens: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    for (k, &len) in lens.iter().enumerate() {
        for i in 0..len {
            let mut plus = params.clone();
            plus.tensors_mut()[k][i] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[k][i] -= h;
            if branch_pattern(&plus, pair) != base || branch_pattern(&minus, pair) != base {
                report.kinked += 1;
                continue;
            }
            let lp = loss_and_gradients_frozen(&plus, pair, &weights, form).unwrap().0;
            let lm = loss_and_gradients_frozen(&minus, pair, &weights, form).unwrap().0;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic.tensors[k][i];
            let diff = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            report.checked += 1;
            let rel = if scale > 0.0 { diff / scale } else { 0.0 };
            if scale > 1e-6 {
                report.worst_rel = report.worst_rel.max(rel);
            }
            if diff >= 1e-8 && rel >= 1e-3 {
                report.failures.push(format!("{}[{i}]: analytic {a:e} numeric {numeric:e}", names[k]));
            }
        }
    }
    report
}

pub fn max_abs_diff(a: &Gradients, b: &Gradients) -> f64 {
    a.tensors
        .iter()
        .zip(&b.tensors)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}
