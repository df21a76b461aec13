//! Backward trilinear warping of scalar and label volumes.
//!
//! The output at voxel `p` is the source sampled at `p + u(p)`. Sample
//! coordinates are clamped to `[0, n - 1]` on every axis before
//! interpolation.

use crate::error::{Error, Result};
use crate::volume::{DisplacementField, GridSpec, LabelVolume, SampleSet, ScalarVolume};

/// Out-of-bounds sampling policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoundaryPolicy {
    #[default]
    ClampToEdge,
}

#[inline]
fn clamp_axis(v: f64, n: usize) -> f64 {
    v.clamp(0.0, (n - 1) as f64)
}

/// Lower corner index and fractional offset for a clamped coordinate.
#[inline]
fn split(v: f64, n: usize) -> (usize, usize, f64) {
    let i0 = (v.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, v - i0 as f64)
}

/// Trilinear sample of an x-fastest buffer at a (clamped) voxel position.
#[inline]
pub fn sample_trilinear(data: &[f64], grid: &GridSpec, pos: [f64; 3]) -> f64 {
    let [nx, ny, nz] = grid.dims();
    let (x0, x1, fx) = split(clamp_axis(pos[0], nx), nx);
    let (y0, y1, fy) = split(clamp_axis(pos[1], ny), ny);
    let (z0, z1, fz) = split(clamp_axis(pos[2], nz), nz);
    let at = |x: usize, y: usize, z: usize| data[x + nx * (y + ny * z)];

    let c00 = at(x0, y0, z0) * (1.0 - fx) + at(x1, y0, z0) * fx;
    let c10 = at(x0, y1, z0) * (1.0 - fx) + at(x1, y1, z0) * fx;
    let c01 = at(x0, y0, z1) * (1.0 - fx) + at(x1, y0, z1) * fx;
    let c11 = at(x0, y1, z1) * (1.0 - fx) + at(x1, y1, z1) * fx;
    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;
    c0 * (1.0 - fz) + c1 * fz
}

/// Value and spatial gradient of the clamped trilinear interpolant.
///
/// The gradient along an axis is zero when the coordinate lies outside the
/// grid (the clamp is flat there). At the upper face the derivative of the
/// last cell is used.
#[inline]
pub fn sample_trilinear_grad(data: &[f64], grid: &GridSpec, pos: [f64; 3]) -> (f64, [f64; 3]) {
    let [nx, ny, nz] = grid.dims();
    let dims = [nx, ny, nz];
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut frac = [0.0; 3];
    let mut live = [true; 3];
    for a in 0..3 {
        let n = dims[a];
        let v = pos[a];
        let top = (n - 1) as f64;
        live[a] = (0.0..=top).contains(&v);
        let c = clamp_axis(v, n);
        let mut i0 = c.floor() as usize;
        if i0 >= n - 1 {
            i0 = n - 2;
        }
        lo[a] = i0;
        hi[a] = i0 + 1;
        frac[a] = c - i0 as f64;
    }
    let at = |x: usize, y: usize, z: usize| data[x + nx * (y + ny * z)];
    let v000 = at(lo[0], lo[1], lo[2]);
    let v100 = at(hi[0], lo[1], lo[2]);
    let v010 = at(lo[0], hi[1], lo[2]);
    let v110 = at(hi[0], hi[1], lo[2]);
    let v001 = at(lo[0], lo[1], hi[2]);
    let v101 = at(hi[0], lo[1], hi[2]);
    let v011 = at(lo[0], hi[1], hi[2]);
    let v111 = at(hi[0], hi[1], hi[2]);
    let [fx, fy, fz] = frac;
    let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);

    let value = ((v000 * gx + v100 * fx) * gy + (v010 * gx + v110 * fx) * fy) * gz
        + ((v001 * gx + v101 * fx) * gy + (v011 * gx + v111 * fx) * fy) * fz;

    let dx = ((v100 - v000) * gy + (v110 - v010) * fy) * gz
        + ((v101 - v001) * gy + (v111 - v011) * fy) * fz;
    let dy = ((v010 - v000) * gx + (v110 - v100) * fx) * gz
        + ((v011 - v001) * gx + (v111 - v101) * fx) * fz;
    let dz = ((v001 - v000) * gx + (v101 - v100) * fx) * gy
        + ((v011 - v010) * gx + (v111 - v110) * fx) * fy;

    let grad = [
        if live[0] { dx } else { 0.0 },
        if live[1] { dy } else { 0.0 },
        if live[2] { dz } else { 0.0 },
    ];
    (value, grad)
}

/// Warps one x-fastest channel. Grids must already be checked.
pub(crate) fn warp_channel(data: &[f64], field: &DisplacementField) -> Vec<f64> {
    let grid = field.grid();
    let [nx, ny, nz] = grid.dims();
    let [ux, uy, uz] = field.components();
    let mut out = Vec::with_capacity(grid.len());
    let mut i = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let pos = [x as f64 + ux[i], y as f64 + uy[i], z as f64 + uz[i]];
                out.push(sample_trilinear(data, grid, pos));
                i += 1;
            }
        }
    }
    out
}

/// `src ∘ phi` with trilinear interpolation.
pub fn warp_scalar(
    src: &ScalarVolume,
    field: &DisplacementField,
    policy: BoundaryPolicy,
) -> Result<ScalarVolume> {
    let BoundaryPolicy::ClampToEdge = policy;
    src.grid().ensure_same(field.grid())?;
    ScalarVolume::new(*src.grid(), warp_channel(src.data(), field))
}

/// Warps every label channel independently with linear interpolation.
///
/// Results are clamped to `[0, 1]` to absorb rounding in the interpolation
/// weights.
pub fn warp_labels(
    src: &LabelVolume,
    field: &DisplacementField,
    policy: BoundaryPolicy,
) -> Result<LabelVolume> {
    let BoundaryPolicy::ClampToEdge = policy;
    src.grid().ensure_same(field.grid())?;
    let mut out = Vec::with_capacity(src.data().len());
    for c in 0..src.channels() {
        out.extend(
            warp_channel(src.channel(c), field)
                .into_iter()
                .map(|v| v.clamp(0.0, 1.0)),
        );
    }
    LabelVolume::new(*src.grid(), src.channels(), out)
}

/// One-hot discretization of soft labels.
///
/// With `background_channel = None` an implicit background score
/// `1 - sum(channels)` competes with the structures and wins ties; a voxel
/// won by the background is all-zero. Otherwise the lowest channel index
/// wins ties.
pub fn argmax_discretize(soft: &LabelVolume, background_channel: Option<usize>) -> Result<LabelVolume> {
    let n = soft.grid().len();
    let channels = soft.channels();
    if let Some(b) = background_channel {
        if b >= channels {
            return Err(Error::InvalidParameter(format!(
                "background channel {b} out of range for {channels} channels"
            )));
        }
    }
    let data = soft.data();
    let mut out = vec![0.0; data.len()];
    for i in 0..n {
        let mut best: Option<usize> = None;
        let mut best_score = f64::NEG_INFINITY;
        if background_channel.is_none() {
            let total: f64 = (0..channels).map(|c| data[c * n + i]).sum();
            best_score = 1.0 - total;
        }
        for c in 0..channels {
            let v = data[c * n + i];
            if v > best_score {
                best_score = v;
                best = Some(c);
            }
        }
        if let Some(c) = best {
            out[c * n + i] = 1.0;
        }
    }
    LabelVolume::new(*soft.grid(), channels, out)
}

/// Voxelwise mean over the sample set of the warped labels.
pub fn mean_warped_labels(src: &LabelVolume, samples: &SampleSet) -> Result<LabelVolume> {
    if samples.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    src.grid().ensure_same(samples.grid())?;
    let mut acc = vec![0.0; src.data().len()];
    for field in samples.iter() {
        let warped = warp_labels(src, field, BoundaryPolicy::ClampToEdge)?;
        for (a, v) in acc.iter_mut().zip(warped.data()) {
            *a += v;
        }
    }
    let t = samples.len() as f64;
    let mean = acc.into_iter().map(|v| (v / t).clamp(0.0, 1.0)).collect();
    LabelVolume::new(*src.grid(), src.channels(), mean)
}
