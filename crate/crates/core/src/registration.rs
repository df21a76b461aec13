//! Variational deformable registration and the stochastic sampler.
//!
//! The objective is
//!
//! ```text
//! L(u) = w_sim * sim(I_m ∘ phi, I_f) + w_diff * diffusion(u) + w_dice * dice(S_m ∘ phi, S_f)
//! ```
//!
//! minimised over a displacement field by coarse-to-fine gradient descent.
//! Each step moves along the Gaussian-smoothed negative gradient, normalised
//! so the largest voxel update equals the current step length. Steps that do
//! not lower the full objective are rejected and the step is halved.
//!
//! Stochastic samples come from independent runs that differ in a smooth
//! random initial displacement and/or a random voxel dropout mask on the
//! similarity gradient.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::filters::{box_count, box_sum, gaussian_smooth, mean_pool, pooled_dims, upsample};
use crate::phantom::normal_noise;
use crate::volume::{DisplacementField, GridSpec, LabelVolume, SampleSet, ScalarVolume};
use crate::warp::sample_trilinear_grad;

/// Stabiliser in the local correlation denominator.
pub const NCC_EPS: f64 = 1e-5;
/// Smoothing constant of the soft Dice ratio.
pub const DICE_EPS: f64 = 1e-5;
/// Coarsest pyramid level keeps every axis at least this long.
const MIN_LEVEL_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Similarity {
    Ssd,
    Ncc,
}

impl FromStr for Similarity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ssd" => Ok(Similarity::Ssd),
            "ncc" => Ok(Similarity::Ncc),
            _ => Err(Error::Parse(format!("unknown similarity {s:?}"))),
        }
    }
}

impl fmt::Display for Similarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Similarity::Ssd => "ssd",
            Similarity::Ncc => "ncc",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationConfig {
    pub levels: usize,
    pub iterations: usize,
    /// Largest per-voxel update, in voxels of the current level.
    pub step: f64,
    pub similarity: Similarity,
    pub ncc_window: usize,
    pub weight_sim: f64,
    pub weight_diffusion: f64,
    pub weight_dice: f64,
    /// Gaussian sigma applied to the gradient before each update.
    pub smoothing: f64,
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            iterations: 100,
            step: 0.5,
            similarity: Similarity::Ncc,
            ncc_window: 9,
            weight_sim: 1.0,
            weight_diffusion: 1.0,
            weight_dice: 1.0,
            smoothing: 1.0,
            seed: 0,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.weight_sim, self.weight_diffusion, self.weight_dice];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || weights.iter().all(|&w| w == 0.0) {
            return Err(Error::InvalidParameter(
                "registration weights must be >= 0 and not all zero".into(),
            ));
        }
        if self.ncc_window < 3 || self.ncc_window % 2 == 0 {
            return Err(Error::InvalidParameter(format!(
                "ncc_window must be odd and >= 3, got {}",
                self.ncc_window
            )));
        }
        if self.levels == 0 {
            return Err(Error::InvalidParameter("levels must be >= 1".into()));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidParameter("step must be positive".into()));
        }
        if !(self.smoothing >= 0.0) {
            return Err(Error::InvalidParameter("smoothing must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StochasticMode {
    InitPerturbation,
    SimilarityDropout,
    Both,
}

impl FromStr for StochasticMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "init" | "init_perturbation" => Ok(StochasticMode::InitPerturbation),
            "dropout" | "similarity_dropout" => Ok(StochasticMode::SimilarityDropout),
            "both" => Ok(StochasticMode::Both),
            _ => Err(Error::Parse(format!("unknown stochastic mode {s:?}"))),
        }
    }
}

impl fmt::Display for StochasticMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StochasticMode::InitPerturbation => "init",
            StochasticMode::SimilarityDropout => "dropout",
            StochasticMode::Both => "both",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StochasticPolicy {
    pub mode: StochasticMode,
    pub dropout_rate: f64,
    /// Standard deviation of each initial displacement component (voxels).
    pub init_sigma: f64,
    pub samples: usize,
}

impl Default for StochasticPolicy {
    fn default() -> Self {
        Self {
            mode: StochasticMode::Both,
            dropout_rate: 0.2,
            init_sigma: 0.5,
            samples: 8,
        }
    }
}

impl StochasticPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::InvalidParameter("sample count must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidParameter("dropout_rate must be in [0, 1)".into()));
        }
        if !(self.init_sigma >= 0.0 && self.init_sigma.is_finite()) {
            return Err(Error::InvalidParameter("init_sigma must be >= 0".into()));
        }
        Ok(())
    }

    fn perturbs_init(&self) -> bool {
        self.init_sigma > 0.0 && matches!(self.mode, StochasticMode::InitPerturbation | StochasticMode::Both)
    }

    fn drops_similarity(&self) -> bool {
        self.dropout_rate > 0.0 && matches!(self.mode, StochasticMode::SimilarityDropout | StochasticMode::Both)
    }
}

// ---------------------------------------------------------------------------
// Loss terms
// ---------------------------------------------------------------------------

struct LocalStats {
    cross: Vec<f64>,
    var_a: Vec<f64>,
    var_b: Vec<f64>,
    mean_a: Vec<f64>,
    mean_b: Vec<f64>,
}

fn local_stats(a: &[f64], b: &[f64], dims: [usize; 3], radius: usize) -> LocalStats {
    let count = box_count(dims, radius);
    let sa = box_sum(a, dims, radius);
    let sb = box_sum(b, dims, radius);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let saa = box_sum(&prod(a, a), dims, radius);
    let sbb = box_sum(&prod(b, b), dims, radius);
    let sab = box_sum(&prod(a, b), dims, radius);
    let n = a.len();
    let mut st = LocalStats {
        cross: Vec::with_capacity(n),
        var_a: Vec::with_capacity(n),
        var_b: Vec::with_capacity(n),
        mean_a: Vec::with_capacity(n),
        mean_b: Vec::with_capacity(n),
    };
    for i in 0..n {
        let c = count[i];
        let (ma, mb) = (sa[i] / c, sb[i] / c);
        st.cross.push(sab[i] - sa[i] * mb);
        st.var_a.push((saa[i] - sa[i] * ma).max(0.0));
        st.var_b.push((sbb[i] - sb[i] * mb).max(0.0));
        st.mean_a.push(ma);
        st.mean_b.push(mb);
    }
    st
}

/// Local NCC loss `1 - mean(cc^2)` and its gradient with respect to `b`.
fn ncc_loss_grad(a: &[f64], b: &[f64], dims: [usize; 3], window: usize) -> (f64, Vec<f64>) {
    let radius = window / 2;
    let st = local_stats(a, b, dims, radius);
    let n = a.len();
    let mut total = 0.0;
    let mut coef_a = Vec::with_capacity(n);
    let mut coef_a_mean = Vec::with_capacity(n);
    let mut coef_b = Vec::with_capacity(n);
    let mut coef_b_mean = Vec::with_capacity(n);
    for q in 0..n {
        let denom = st.var_a[q] * st.var_b[q] + NCC_EPS;
        let cross = st.cross[q];
        total += cross * cross / denom;
        let ka = 2.0 * cross / denom;
        let kb = 2.0 * cross * cross * st.var_a[q] / (denom * denom);
        coef_a.push(ka);
        coef_a_mean.push(ka * st.mean_a[q]);
        coef_b.push(kb);
        coef_b_mean.push(kb * st.mean_b[q]);
    }
    let ba = box_sum(&coef_a, dims, radius);
    let bam = box_sum(&coef_a_mean, dims, radius);
    let bb = box_sum(&coef_b, dims, radius);
    let bbm = box_sum(&coef_b_mean, dims, radius);
    let scale = -1.0 / n as f64;
    let grad = (0..n)
        .map(|p| scale * (a[p] * ba[p] - bam[p] - b[p] * bb[p] + bbm[p]))
        .collect();
    (1.0 - total / n as f64, grad)
}

/// Local normalised cross-correlation loss, `1 - mean(cc^2)`, where `cc` is
/// the correlation inside the `window^3` box around each voxel (truncated
/// at the faces) and `cc^2 = cross^2 / (var_a * var_b + 1e-5)`.
pub fn similarity_ncc(a: &ScalarVolume, b: &ScalarVolume, window: usize) -> Result<f64> {
    a.grid().ensure_same(b.grid())?;
    if window < 3 || window % 2 == 0 {
        return Err(Error::InvalidParameter(format!("ncc window {window} must be odd and >= 3")));
    }
    Ok(ncc_loss_grad(a.data(), b.data(), a.grid().dims(), window).0)
}

fn ssd_loss_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let n = a.len() as f64;
    let loss = a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum::<f64>() / n;
    let grad = a.iter().zip(b).map(|(x, y)| 2.0 * (y - x) / n).collect();
    (loss, grad)
}

fn diffusion_loss_grad(u: &[Vec<f64>; 3], dims: [usize; 3], grad: Option<&mut [Vec<f64>; 3]>) -> f64 {
    let [nx, ny, nz] = dims;
    let strides = [1, nx, nx * ny];
    let mut total = 0.0;
    let mut grad = grad;
    for axis in 0..3 {
        let pairs = (dims[axis] - 1) * dims.iter().enumerate().filter(|(a, _)| *a != axis).map(|(_, d)| d).product::<usize>();
        let inv = 1.0 / pairs as f64;
        let s = strides[axis];
        let mut sum = 0.0;
        let mut i = 0;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let pos = [x, y, z];
                    if pos[axis] + 1 < dims[axis] {
                        for c in 0..3 {
                            let d = u[c][i + s] - u[c][i];
                            sum += d * d;
                            if let Some(g) = grad.as_deref_mut() {
                                g[c][i + s] += 2.0 * d * inv;
                                g[c][i] -= 2.0 * d * inv;
                            }
                        }
                    }
                    i += 1;
                }
            }
        }
        total += sum * inv;
    }
    total
}

/// Diffusion regulariser: squared forward differences of every displacement
/// component, averaged over the voxels where each difference exists and
/// summed over the three difference directions and components.
pub fn diffusion_energy(field: &DisplacementField) -> f64 {
    diffusion_loss_grad(field.components(), field.grid().dims(), None)
}

fn soft_dice_parts(w: &[f64], t: &[f64], n: usize, channels: usize) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; w.len()];
    let mut score = 0.0;
    let cinv = 1.0 / channels as f64;
    for c in 0..channels {
        let (wc, tc) = (&w[c * n..(c + 1) * n], &t[c * n..(c + 1) * n]);
        let (mut inter, mut sw, mut st) = (0.0, 0.0, 0.0);
        for (a, b) in wc.iter().zip(tc) {
            inter += a * b;
            sw += a;
            st += b;
        }
        let num = 2.0 * inter + DICE_EPS;
        let den = sw + st + DICE_EPS;
        score += num / den;
        for (g, b) in grad[c * n..(c + 1) * n].iter_mut().zip(tc) {
            *g = -cinv * (2.0 * b / den - num / (den * den));
        }
    }
    (1.0 - score * cinv, grad)
}

/// `1 - mean_c (2 Σ w t + ε) / (Σ w + Σ t + ε)` with `ε = 1e-5`.
pub fn soft_dice_loss(warped: &LabelVolume, target: &LabelVolume) -> Result<f64> {
    warped.ensure_compatible(target)?;
    Ok(soft_dice_parts(warped.data(), target.data(), warped.grid().len(), warped.channels()).0)
}

// ---------------------------------------------------------------------------
// Optimiser
// ---------------------------------------------------------------------------

struct Level {
    grid: GridSpec,
    fixed: Vec<f64>,
    moving: Vec<f64>,
    labels: Option<(usize, Vec<f64>, Vec<f64>)>,
}

struct Eval {
    loss: f64,
    grad: [Vec<f64>; 3],
}

struct Problem<'a> {
    cfg: &'a RegistrationConfig,
}

impl Problem<'_> {
    fn evaluate(&self, level: &Level, u: &[Vec<f64>; 3], keep: Option<&[bool]>) -> Eval {
        let cfg = self.cfg;
        let grid = &level.grid;
        let dims = grid.dims();
        let [nx, ny, nz] = dims;
        let n = grid.len();
        let mut warped = Vec::with_capacity(n);
        let mut mgrad = Vec::with_capacity(n);
        let mut positions = Vec::with_capacity(n);
        let mut i = 0;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let pos = [x as f64 + u[0][i], y as f64 + u[1][i], z as f64 + u[2][i]];
                    let (v, g) = sample_trilinear_grad(&level.moving, grid, pos);
                    warped.push(v);
                    mgrad.push(g);
                    positions.push(pos);
                    i += 1;
                }
            }
        }

        let mut grad = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        let mut loss = 0.0;

        if cfg.weight_sim > 0.0 {
            let (sim, dsim) = match cfg.similarity {
                Similarity::Ncc => ncc_loss_grad(&level.fixed, &warped, dims, cfg.ncc_window),
                Similarity::Ssd => ssd_loss_grad(&level.fixed, &warped),
            };
            loss += cfg.weight_sim * sim;
            for p in 0..n {
                if keep.is_some_and(|k| !k[p]) {
                    continue;
                }
                let d = cfg.weight_sim * dsim[p];
                for a in 0..3 {
                    grad[a][p] += d * mgrad[p][a];
                }
            }
        }

        if cfg.weight_diffusion > 0.0 {
            let mut dgrad = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
            loss += cfg.weight_diffusion * diffusion_loss_grad(u, dims, Some(&mut dgrad));
            for a in 0..3 {
                for (g, d) in grad[a].iter_mut().zip(&dgrad[a]) {
                    *g += cfg.weight_diffusion * d;
                }
            }
        }

        if let (true, Some((channels, lm, lf))) = (cfg.weight_dice > 0.0, level.labels.as_ref()) {
            let channels = *channels;
            let mut w = Vec::with_capacity(channels * n);
            let mut lgrad = Vec::with_capacity(channels * n);
            for c in 0..channels {
                let src = &lm[c * n..(c + 1) * n];
                for pos in &positions {
                    let (v, g) = sample_trilinear_grad(src, grid, *pos);
                    w.push(v.clamp(0.0, 1.0));
                    lgrad.push(g);
                }
            }
            let (dl, dw) = soft_dice_parts(&w, lf, n, channels);
            loss += cfg.weight_dice * dl;
            for c in 0..channels {
                for p in 0..n {
                    let d = cfg.weight_dice * dw[c * n + p];
                    for a in 0..3 {
                        grad[a][p] += d * lgrad[c * n + p][a];
                    }
                }
            }
        }
        Eval { loss, grad }
    }
}

/// Summary of one registration run.
#[derive(Debug, Clone)]
pub struct RegistrationOutcome {
    pub field: DisplacementField,
    /// Full-resolution objective at the initial displacement.
    pub initial_loss: f64,
    /// Full-resolution objective at the returned displacement.
    pub final_loss: f64,
    /// `(level, accepted steps, final level loss)`, coarsest first.
    pub level_log: Vec<(usize, usize, f64)>,
}

fn build_pyramid(
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    labels: Option<(&LabelVolume, &LabelVolume)>,
    max_levels: usize,
) -> Result<Vec<Level>> {
    let mut levels = vec![Level {
        grid: *fixed.grid(),
        fixed: fixed.data().to_vec(),
        moving: moving.data().to_vec(),
        labels: labels.map(|(m, f)| (m.channels(), m.data().to_vec(), f.data().to_vec())),
    }];
    while levels.len() < max_levels {
        let prev = levels.last().expect("non-empty");
        let dims = prev.grid.dims();
        let next = pooled_dims(dims);
        if next.iter().any(|&d| d < MIN_LEVEL_DIM) {
            break;
        }
        let pool_channels = |data: &[f64], channels: usize| -> Vec<f64> {
            let n = prev.grid.len();
            (0..channels)
                .flat_map(|c| mean_pool(&data[c * n..(c + 1) * n], dims))
                .collect()
        };
        let level = Level {
            grid: GridSpec::new(next, prev.grid.spacing().map(|s| 2.0 * s))?,
            fixed: mean_pool(&prev.fixed, dims),
            moving: mean_pool(&prev.moving, dims),
            labels: prev
                .labels
                .as_ref()
                .map(|(c, m, f)| (*c, pool_channels(m, *c), pool_channels(f, *c))),
        };
        levels.push(level);
    }
    Ok(levels)
}

fn check_inputs(
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    labels_moving: Option<&LabelVolume>,
    labels_fixed: Option<&LabelVolume>,
) -> Result<()> {
    fixed.grid().ensure_same(moving.grid())?;
    match (labels_moving, labels_fixed) {
        (Some(m), Some(f)) => {
            m.ensure_compatible(f)?;
            fixed.grid().ensure_same(m.grid())
        }
        (None, None) => Ok(()),
        _ => Err(Error::InvalidParameter(
            "moving and fixed labels must be given together".into(),
        )),
    }
}

fn run(
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    labels_moving: Option<&LabelVolume>,
    labels_fixed: Option<&LabelVolume>,
    cfg: &RegistrationConfig,
    policy: Option<&StochasticPolicy>,
    seed: u64,
) -> Result<RegistrationOutcome> {
    cfg.validate()?;
    check_inputs(fixed, moving, labels_moving, labels_fixed)?;
    let labels = labels_moving.zip(labels_fixed);
    let pyramid = build_pyramid(fixed, moving, labels, cfg.levels)?;
    let problem = Problem { cfg };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let fine = &pyramid[0];
    let n_fine = fine.grid.len();
    let mut init = [vec![0.0; n_fine], vec![0.0; n_fine], vec![0.0; n_fine]];
    if let Some(p) = policy.filter(|p| p.perturbs_init()) {
        init = initial_perturbation(&fine.grid, p.init_sigma, cfg.smoothing.max(1.0), &mut rng);
    }
    let initial_loss = problem.evaluate(fine, &init, None).loss;

    // restrict the initial displacement to the coarsest level
    let coarsest = pyramid.len() - 1;
    let mut u = init;
    for lvl in 0..coarsest {
        let dims = pyramid[lvl].grid.dims();
        u = u.map(|c| mean_pool(&c, dims).into_iter().map(|v| 0.5 * v).collect());
    }

    let dropout = policy.filter(|p| p.drops_similarity()).map(|p| p.dropout_rate);
    let mut level_log = Vec::with_capacity(pyramid.len());
    for lvl in (0..pyramid.len()).rev() {
        let level = &pyramid[lvl];
        if lvl < coarsest {
            let coarse = &pyramid[lvl + 1].grid;
            let dims = level.grid.dims();
            u = u.map(|c| upsample(&c, coarse, dims).into_iter().map(|v| 2.0 * v).collect());
        }
        let (next, accepted, loss) = descend(&problem, level, u, dropout, &mut rng, lvl)?;
        u = next;
        level_log.push((lvl, accepted, loss));
    }

    let final_loss = problem.evaluate(fine, &u, None).loss;
    let field = DisplacementField::new(fine.grid, u)?;
    Ok(RegistrationOutcome {
        field,
        initial_loss,
        final_loss,
        level_log,
    })
}

/// Smooth random displacement with per-component standard deviation `sigma`.
fn initial_perturbation(grid: &GridSpec, sigma: f64, smoothing: f64, rng: &mut ChaCha8Rng) -> [Vec<f64>; 3] {
    let n = grid.len();
    let noise = [0, 1, 2].map(|_| normal_noise(rng, n));
    noise.map(|c| {
        let s = gaussian_smooth(&c, grid.dims(), smoothing);
        let mean = s.iter().sum::<f64>() / n as f64;
        let sd = (s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
        if sd == 0.0 {
            vec![0.0; n]
        } else {
            s.into_iter().map(|v| sigma * (v - mean) / sd).collect()
        }
    })
}

fn dropout_mask(n: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    (0..n).map(|_| rng.random::<f64>() >= rate).collect()
}

fn descend(
    problem: &Problem<'_>,
    level: &Level,
    mut u: [Vec<f64>; 3],
    dropout: Option<f64>,
    rng: &mut ChaCha8Rng,
    lvl: usize,
) -> Result<([Vec<f64>; 3], usize, f64)> {
    let cfg = problem.cfg;
    let n = level.grid.len();
    let dims = level.grid.dims();
    let mut mask = dropout.map(|r| dropout_mask(n, r, rng));
    let mut current = problem.evaluate(level, &u, mask.as_deref());
    if !current.loss.is_finite() {
        return Err(Error::Divergence { level: lvl, iteration: 0 });
    }
    let mut step = cfg.step;
    let mut accepted = 0;
    for it in 0..cfg.iterations {
        let g = current.grad.clone().map(|c| gaussian_smooth(&c, dims, cfg.smoothing));
        let peak = (0..n)
            .map(|p| (g[0][p] * g[0][p] + g[1][p] * g[1][p] + g[2][p] * g[2][p]).sqrt())
            .fold(0.0f64, f64::max);
        if !peak.is_finite() {
            return Err(Error::Divergence { level: lvl, iteration: it + 1 });
        }
        if peak == 0.0 {
            break;
        }
        let scale = step / peak;
        let trial: [Vec<f64>; 3] = [0, 1, 2].map(|a| u[a].iter().zip(&g[a]).map(|(v, d)| v - scale * d).collect());
        if let (Some(rate), Some(m)) = (dropout, mask.as_mut()) {
            *m = dropout_mask(n, rate, rng);
        }
        let next = problem.evaluate(level, &trial, mask.as_deref());
        if !next.loss.is_finite() || trial.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { level: lvl, iteration: it + 1 });
        }
        if next.loss < current.loss {
            u = trial;
            current = next;
            accepted += 1;
            step = (step * 1.25).min(cfg.step);
        } else {
            step *= 0.5;
            if step < 1e-4 * cfg.step {
                break;
            }
        }
    }
    Ok((u, accepted, current.loss))
}

/// Deterministic registration; labels add the Dice term when both are given.
pub fn register(
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    labels_moving: Option<&LabelVolume>,
    labels_fixed: Option<&LabelVolume>,
    cfg: &RegistrationConfig,
) -> Result<DisplacementField> {
    Ok(register_detailed(fixed, moving, labels_moving, labels_fixed, cfg)?.field)
}

pub fn register_detailed(
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    labels_moving: Option<&LabelVolume>,
    labels_fixed: Option<&LabelVolume>,
    cfg: &RegistrationConfig,
) -> Result<RegistrationOutcome> {
    run(fixed, moving, labels_moving, labels_fixed, cfg, None, cfg.seed)
}

/// `T` independent stochastic runs; run `i` is seeded with `cfg.seed + i`.
pub fn sample_registrations_detailed(
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    labels_moving: Option<&LabelVolume>,
    labels_fixed: Option<&LabelVolume>,
    cfg: &RegistrationConfig,
    policy: &StochasticPolicy,
) -> Result<Vec<RegistrationOutcome>> {
    policy.validate()?;
    (0..policy.samples)
        .map(|i| {
            run(
                fixed,
                moving,
                labels_moving,
                labels_fixed,
                cfg,
                Some(policy),
                cfg.seed.wrapping_add(i as u64),
            )
        })
        .collect()
}

pub fn sample_registrations(
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    labels_moving: Option<&LabelVolume>,
    labels_fixed: Option<&LabelVolume>,
    cfg: &RegistrationConfig,
    policy: &StochasticPolicy,
) -> Result<SampleSet> {
    let runs = sample_registrations_detailed(fixed, moving, labels_moving, labels_fixed, cfg, policy)?;
    SampleSet::new(runs.into_iter().map(|r| r.field).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_volume(grid: GridSpec, seed: u64) -> ScalarVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScalarVolume::new(grid, (0..grid.len()).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn ncc_self_and_affine() {
        let g = GridSpec::cube([10, 9, 8]).unwrap();
        let a = random_volume(g, 1);
        assert!(similarity_ncc(&a, &a, 9).unwrap().abs() < 1e-6);
        let b = ScalarVolume::new(g, a.data().iter().map(|v| 2.0 * v + 3.0).collect()).unwrap();
        assert!(similarity_ncc(&a, &b, 9).unwrap().abs() < 1e-6);
        assert!(similarity_ncc(&a, &b, 4).is_err());
    }

    #[test]
    fn ncc_gradient_matches_finite_difference() {
        let g = GridSpec::cube([6, 5, 7]).unwrap();
        let a = random_volume(g, 3);
        let b = random_volume(g, 4);
        let dims = g.dims();
        let (_, grad) = ncc_loss_grad(a.data(), b.data(), dims, 3);
        let h = 1e-6;
        for p in [0, 17, 101, g.len() - 1] {
            let mut hi = b.data().to_vec();
            let mut lo = b.data().to_vec();
            hi[p] += h;
            lo[p] -= h;
            let fd = (ncc_loss_grad(a.data(), &hi, dims, 3).0 - ncc_loss_grad(a.data(), &lo, dims, 3).0) / (2.0 * h);
            assert!((fd - grad[p]).abs() < 1e-7 * (1.0 + fd.abs()), "p={p} fd={fd} an={}", grad[p]);
        }
    }

    #[test]
    fn diffusion_examples() {
        let g = GridSpec::cube([5, 4, 6]).unwrap();
        assert_eq!(diffusion_energy(&DisplacementField::zeros(g)), 0.0);
        assert_eq!(diffusion_energy(&DisplacementField::constant(g, [1.0, -2.0, 0.5]).unwrap()), 0.0);
        let shear = DisplacementField::from_fn(g, |x, _, _| [x as f64, 0.0, 0.0]).unwrap();
        assert!((diffusion_energy(&shear) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diffusion_gradient_matches_finite_difference() {
        let g = GridSpec::cube([4, 5, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = [0, 1, 2].map(|_| (0..g.len()).map(|_| rng.random::<f64>()).collect::<Vec<_>>());
        let mut grad = [vec![0.0; g.len()], vec![0.0; g.len()], vec![0.0; g.len()]];
        diffusion_loss_grad(&u, g.dims(), Some(&mut grad));
        let h = 1e-6;
        for (c, p) in [(0, 3), (1, 20), (2, 59)] {
            let mut hi = u.clone();
            let mut lo = u.clone();
            hi[c][p] += h;
            lo[c][p] -= h;
            let fd = (diffusion_loss_grad(&hi, g.dims(), None) - diffusion_loss_grad(&lo, g.dims(), None)) / (2.0 * h);
            assert!((fd - grad[c][p]).abs() < 1e-7);
        }
    }

    fn cube_labels(g: GridSpec, lo: usize) -> LabelVolume {
        let data = (0..g.len())
            .map(|i| {
                let (x, y, z) = g.coords(i);
                if (lo..lo + 4).contains(&x) && y < 4 && z < 4 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        LabelVolume::binary(g, 1, data).unwrap()
    }

    #[test]
    fn soft_dice_examples() {
        let g = GridSpec::cube([8, 8, 8]).unwrap();
        let a = cube_labels(g, 0);
        let b = cube_labels(g, 2);
        assert!(soft_dice_loss(&a, &a).unwrap() < 1e-4);
        let far = cube_labels(g, 4);
        assert!((soft_dice_loss(&a, &far).unwrap() - 1.0).abs() < 1e-4);
        assert!((soft_dice_loss(&a, &b).unwrap() - 0.5).abs() < 1e-4);
        let two = LabelVolume::new(g, 2, vec![0.0; 1024]).unwrap();
        assert!(soft_dice_loss(&a, &two).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = RegistrationConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.ncc_window = 8;
        assert!(cfg.validate().is_err());
        let cfg = RegistrationConfig {
            weight_sim: 0.0,
            weight_diffusion: 0.0,
            weight_dice: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let p = StochasticPolicy { samples: 0, ..Default::default() };
        assert!(p.validate().is_err());
    }
}
