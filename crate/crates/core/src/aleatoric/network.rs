//! Compact 3D convolutional head.
//!
//! Layout: three blocks of `conv3x3x3 -> batch norm -> LeakyReLU`, then a
//! final `conv3x3x3` emitting `s = ln(sigma^2)` per structure. Convolutions
//! are zero padded ("same" output size). Activations are channel-major
//! `[channel][x-fastest voxel]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const KERNEL_TAPS: usize = 27;
const BLOCKS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadConfig {
    pub input_channels: usize,
    pub hidden_channels: usize,
    pub output_channels: usize,
    pub leaky_slope: f64,
}

impl HeadConfig {
    pub fn new(input_channels: usize, output_channels: usize) -> Self {
        Self {
            input_channels,
            hidden_channels: 16,
            output_channels,
            leaky_slope: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.output_channels == 0 || self.hidden_channels == 0 {
            return Err(Error::InvalidParameter("head channel counts must be >= 1".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::InvalidParameter("leaky_slope must be in (0, 1)".into()));
        }
        Ok(())
    }

    fn layer_shapes(&self) -> [(usize, usize); 4] {
        let h = self.hidden_channels;
        [(self.input_channels, h), (h, h), (h, h), (h, self.output_channels)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out][in][kz][ky][kx]`
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weights: vec![0.0; out_channels * in_channels * KERNEL_TAPS],
            bias: vec![0.0; out_channels],
        }
    }

    #[inline]
    fn weight(&self, o: usize, i: usize, k: usize) -> f64 {
        self.weights[(o * self.in_channels + i) * KERNEL_TAPS + k]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParameters {
    pub config: HeadConfig,
    pub convs: Vec<ConvLayer>,
    pub norms: Vec<BatchNorm>,
}

/// Trainable tensors in a fixed order, shared by parameters and gradients.
pub const TENSOR_ORDER: &str = "conv0.w conv0.b bn0.gamma bn0.beta conv1.w conv1.b bn1.gamma bn1.beta \
                                conv2.w conv2.b bn2.gamma bn2.beta conv3.w conv3.b";

impl HeadParameters {
    pub fn zeros(config: HeadConfig) -> Result<Self> {
        config.validate()?;
        let convs = config
            .layer_shapes()
            .iter()
            .map(|&(i, o)| ConvLayer::zeros(i, o))
            .collect();
        let norms = (0..BLOCKS)
            .map(|_| {
                let mut bn = BatchNorm::new(config.hidden_channels);
                bn.gamma.fill(0.0);
                bn
            })
            .collect();
        Ok(Self { config, convs, norms })
    }

    /// He-style uniform initialisation for the hidden convolutions and a
    /// small final layer so the head starts near `sigma^2 = 1`.
    pub fn init(config: HeadConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = (2.0 / (1.0 + config.leaky_slope * config.leaky_slope)).sqrt();
        let shapes = config.layer_shapes();
        let convs = shapes
            .iter()
            .enumerate()
            .map(|(l, &(i, o))| {
                let fan_in = (i * KERNEL_TAPS) as f64;
                let bound = if l == BLOCKS {
                    0.1 * (3.0 / fan_in).sqrt()
                } else {
                    gain * (3.0 / fan_in).sqrt()
                };
                let mut layer = ConvLayer::zeros(i, o);
                layer
                    .weights
                    .iter_mut()
                    .for_each(|w| *w = rng.random_range(-bound..bound));
                layer
            })
            .collect();
        let norms = (0..BLOCKS).map(|_| BatchNorm::new(config.hidden_channels)).collect();
        Ok(Self { config, convs, norms })
    }

    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::with_capacity(14);
        for l in 0..=BLOCKS {
            out.push(&self.convs[l].weights);
            out.push(&self.convs[l].bias);
            if l < BLOCKS {
                out.push(&self.norms[l].gamma);
                out.push(&self.norms[l].beta);
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::with_capacity(14);
        let HeadParameters { convs, norms, .. } = self;
        let mut norms = norms.iter_mut();
        for conv in convs.iter_mut() {
            out.push(&mut conv.weights);
            out.push(&mut conv.bias);
            if let Some(bn) = norms.next() {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    pub fn tensor_names() -> Vec<&'static str> {
        TENSOR_ORDER.split_whitespace().collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn apply_batch_stats(&mut self, stats: &[(Vec<f64>, Vec<f64>)], voxels: usize) {
        let unbias = if voxels > 1 { voxels as f64 / (voxels - 1) as f64 } else { 1.0 };
        for (bn, (mean, var)) in self.norms.iter_mut().zip(stats) {
            for c in 0..mean.len() {
                bn.running_mean[c] = (1.0 - BN_MOMENTUM) * bn.running_mean[c] + BN_MOMENTUM * mean[c];
                bn.running_var[c] = (1.0 - BN_MOMENTUM) * bn.running_var[c] + BN_MOMENTUM * var[c] * unbias;
            }
        }
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for (name, t) in Self::tensor_names().into_iter().zip(self.tensors()) {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { param: name.to_string() });
            }
        }
        for bn in &self.norms {
            if bn.running_var.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::Internal("batch-norm running variance must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Gradients with the same tensor layout as [`HeadParameters::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

struct BlockCache {
    input: Vec<f64>,
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
    pre_activation: Vec<f64>,
}

/// Result of a forward pass; keeps what the backward pass needs.
pub struct ForwardPass {
    pub dims: [usize; 3],
    /// Raw head output `s` (before clamping), channel-major.
    pub output: Vec<f64>,
    /// Per-block batch `(mean, biased variance)`; empty in infer mode.
    pub batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
    blocks: Vec<BlockCache>,
    final_input: Vec<f64>,
    mode: Mode,
}

#[inline]
fn tap_offset(k: usize) -> [isize; 3] {
    [(k % 3) as isize - 1, ((k / 3) % 3) as isize - 1, (k / 9) as isize - 1]
}

#[inline]
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 { n - d as usize } else { n };
    (lo, hi)
}

/// Visits every `(out_row, in_row, len)` run of voxels for one tap.
#[inline]
fn for_each_run(dims: [usize; 3], d: [isize; 3], mut f: impl FnMut(usize, usize, usize)) {
    let [nx, ny, nz] = dims;
    let (xlo, xhi) = valid_range(nx, d[0]);
    let (ylo, yhi) = valid_range(ny, d[1]);
    let (zlo, zhi) = valid_range(nz, d[2]);
    if xlo >= xhi {
        return;
    }
    for z in zlo..zhi {
        let zs = (z as isize + d[2]) as usize;
        for y in ylo..yhi {
            let ys = (y as isize + d[1]) as usize;
            let out = xlo + nx * (y + ny * z);
            let inp = (xlo as isize + d[0]) as usize + nx * (ys + ny * zs);
            f(out, inp, xhi - xlo);
        }
    }
}

pub(crate) fn conv_forward(input: &[f64], dims: [usize; 3], layer: &ConvLayer) -> Vec<f64> {
    let n = dims[0] * dims[1] * dims[2];
    let mut out = vec![0.0; layer.out_channels * n];
    for o in 0..layer.out_channels {
        let dst = &mut out[o * n..(o + 1) * n];
        dst.fill(layer.bias[o]);
        for i in 0..layer.in_channels {
            let src = &input[i * n..(i + 1) * n];
            for k in 0..KERNEL_TAPS {
                let w = layer.weight(o, i, k);
                if w == 0.0 {
                    continue;
                }
                for_each_run(dims, tap_offset(k), |od, is, len| {
                    for (a, b) in dst[od..od + len].iter_mut().zip(&src[is..is + len]) {
                        *a += w * b;
                    }
                });
            }
        }
    }
    out
}

/// Returns `(grad_weights, grad_bias, grad_input)`.
pub(crate) fn conv_backward(
    input: &[f64],
    grad_out: &[f64],
    dims: [usize; 3],
    layer: &ConvLayer,
    need_input_grad: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = dims[0] * dims[1] * dims[2];
    let mut gw = vec![0.0; layer.weights.len()];
    let mut gb = vec![0.0; layer.out_channels];
    let mut gi = if need_input_grad { vec![0.0; layer.in_channels * n] } else { Vec::new() };
    for o in 0..layer.out_channels {
        let go = &grad_out[o * n..(o + 1) * n];
        gb[o] = go.iter().sum();
        for i in 0..layer.in_channels {
            let src = &input[i * n..(i + 1) * n];
            for k in 0..KERNEL_TAPS {
                let mut acc = 0.0;
                for_each_run(dims, tap_offset(k), |od, is, len| {
                    acc += go[od..od + len]
                        .iter()
                        .zip(&src[is..is + len])
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                });
                gw[(o * layer.in_channels + i) * KERNEL_TAPS + k] = acc;
                if need_input_grad {
                    let w = layer.weight(o, i, k);
                    let dst = &mut gi[i * n..(i + 1) * n];
                    for_each_run(dims, tap_offset(k), |od, is, len| {
                        for (a, b) in dst[is..is + len].iter_mut().zip(&go[od..od + len]) {
                            *a += w * b;
                        }
                    });
                }
            }
        }
    }
    (gw, gb, gi)
}

fn check_finite(values: &[f64], layer: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteActivation { layer: layer.to_string() });
    }
    Ok(())
}

/// Runs the head on a channel-major input of `dims` voxels.
pub fn forward(params: &HeadParameters, input: &[f64], dims: [usize; 3], mode: Mode) -> Result<ForwardPass> {
    let cfg = params.config;
    let n = dims[0] * dims[1] * dims[2];
    if input.len() != cfg.input_channels * n {
        return Err(Error::LengthMismatch {
            expected: cfg.input_channels * n,
            actual: input.len(),
        });
    }
    let mut x = input.to_vec();
    let mut blocks = Vec::with_capacity(BLOCKS);
    let mut batch_stats = Vec::new();
    for b in 0..BLOCKS {
        let z = conv_forward(&x, dims, &params.convs[b]);
        check_finite(&z, &format!("conv{b}"))?;
        let bn = &params.norms[b];
        let ch = cfg.hidden_channels;
        let mut normalized = vec![0.0; ch * n];
        let mut inv_std = vec![0.0; ch];
        let mut means = vec![0.0; ch];
        let mut vars = vec![0.0; ch];
        for c in 0..ch {
            let zc = &z[c * n..(c + 1) * n];
            let (mean, var) = match mode {
                Mode::Train => {
                    let mean = zc.iter().sum::<f64>() / n as f64;
                    let var = zc.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    (mean, var)
                }
                Mode::Infer => (bn.running_mean[c], bn.running_var[c]),
            };
            means[c] = mean;
            vars[c] = var;
            let is = 1.0 / (var + BN_EPS).sqrt();
            inv_std[c] = is;
            for (dst, v) in normalized[c * n..(c + 1) * n].iter_mut().zip(zc) {
                *dst = (v - mean) * is;
            }
        }
        if mode == Mode::Train {
            batch_stats.push((means, vars));
        }
        let mut pre = vec![0.0; ch * n];
        let mut act = vec![0.0; ch * n];
        for c in 0..ch {
            let (g, bt) = (bn.gamma[c], bn.beta[c]);
            for p in c * n..(c + 1) * n {
                let y = g * normalized[p] + bt;
                pre[p] = y;
                act[p] = if y > 0.0 { y } else { cfg.leaky_slope * y };
            }
        }
        check_finite(&act, &format!("block{b}"))?;
        blocks.push(BlockCache {
            input: x,
            normalized,
            inv_std,
            pre_activation: pre,
        });
        x = act;
    }
    let output = conv_forward(&x, dims, &params.convs[BLOCKS]);
    check_finite(&output, "conv3")?;
    Ok(ForwardPass {
        dims,
        output,
        batch_stats,
        blocks,
        final_input: x,
        mode,
    })
}

impl ForwardPass {
    /// Which LeakyReLU inputs took the negative branch, block by block.
    pub fn negative_branch(&self) -> Vec<bool> {
        self.blocks
            .iter()
            .flat_map(|b| b.pre_activation.iter().map(|&y| y <= 0.0))
            .collect()
    }
}

/// Reverse-mode gradients given `dL/ds` for every output element.
pub fn backward(params: &HeadParameters, pass: &ForwardPass, grad_output: &[f64]) -> Result<Gradients> {
    if pass.mode != Mode::Train {
        return Err(Error::InvalidParameter("backward requires a train-mode forward pass".into()));
    }
    if grad_output.len() != pass.output.len() {
        return Err(Error::LengthMismatch {
            expected: pass.output.len(),
            actual: grad_output.len(),
        });
    }
    let cfg = params.config;
    let dims = pass.dims;
    let n = dims[0] * dims[1] * dims[2];
    let nf = n as f64;

    let mut conv_grads: Vec<(Vec<f64>, Vec<f64>)> = vec![(vec![], vec![]); BLOCKS + 1];
    let mut bn_grads: Vec<(Vec<f64>, Vec<f64>)> = vec![(vec![], vec![]); BLOCKS];

    let (gw, gb, mut g) = conv_backward(&pass.final_input, grad_output, dims, &params.convs[BLOCKS], true);
    conv_grads[BLOCKS] = (gw, gb);

    for b in (0..BLOCKS).rev() {
        let cache = &pass.blocks[b];
        let bn = &params.norms[b];
        let ch = cfg.hidden_channels;
        // LeakyReLU
        for (gv, y) in g.iter_mut().zip(&cache.pre_activation) {
            if *y <= 0.0 {
                *gv *= cfg.leaky_slope;
            }
        }
        // batch norm with batch statistics
        let mut dgamma = vec![0.0; ch];
        let mut dbeta = vec![0.0; ch];
        let mut dz = vec![0.0; ch * n];
        for c in 0..ch {
            let range = c * n..(c + 1) * n;
            let dy = &g[range.clone()];
            let xh = &cache.normalized[range.clone()];
            let sum_dy: f64 = dy.iter().sum();
            let sum_dy_xh: f64 = dy.iter().zip(xh).map(|(a, b)| a * b).sum();
            dgamma[c] = sum_dy_xh;
            dbeta[c] = sum_dy;
            let k = bn.gamma[c] * cache.inv_std[c];
            let (mdy, mdyx) = (sum_dy / nf, sum_dy_xh / nf);
            for ((d, a), x) in dz[range].iter_mut().zip(dy).zip(xh) {
                *d = k * (a - mdy - x * mdyx);
            }
        }
        bn_grads[b] = (dgamma, dbeta);
        let (gw, gb, gi) = conv_backward(&cache.input, &dz, dims, &params.convs[b], b > 0);
        conv_grads[b] = (gw, gb);
        g = gi;
    }

    let mut tensors = Vec::with_capacity(14);
    for l in 0..=BLOCKS {
        let (w, bias) = std::mem::take(&mut conv_grads[l]);
        tensors.push(w);
        tensors.push(bias);
        if l < BLOCKS {
            let (gamma, beta) = std::mem::take(&mut bn_grads[l]);
            tensors.push(gamma);
            tensors.push(beta);
        }
    }
    for (name, t) in HeadParameters::tensor_names().into_iter().zip(&tensors) {
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { param: name.to_string() });
        }
    }
    Ok(Gradients { tensors })
}
