//! Separable filters and resampling helpers on x-fastest buffers.

use crate::volume::GridSpec;
use crate::warp::sample_trilinear;

/// Calls `f(line_start, stride, len)` for every 1D line along `axis`.
fn for_each_line(dims: [usize; 3], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let [nx, ny, nz] = dims;
    let strides = [1, nx, nx * ny];
    let stride = strides[axis];
    let len = dims[axis];
    match axis {
        0 => {
            for z in 0..nz {
                for y in 0..ny {
                    f(nx * (y + ny * z), stride, len);
                }
            }
        }
        1 => {
            for z in 0..nz {
                for x in 0..nx {
                    f(x + nx * ny * z, stride, len);
                }
            }
        }
        _ => {
            for y in 0..ny {
                for x in 0..nx {
                    f(x + nx * y, stride, len);
                }
            }
        }
    }
}

/// Normalized Gaussian taps for radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable Gaussian blur with clamp-to-edge boundaries.
pub fn gaussian_smooth(data: &[f64], dims: [usize; 3], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let mut cur = data.to_vec();
    let mut line = Vec::new();
    for axis in 0..3 {
        let src = cur.clone();
        for_each_line(dims, axis, |start, stride, len| {
            line.clear();
            line.extend((0..len).map(|i| src[start + i * stride]));
            let last = len as isize - 1;
            for i in 0..len as isize {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let j = (i + k as isize - radius).clamp(0, last) as usize;
                    acc += w * line[j];
                }
                cur[start + i as usize * stride] = acc;
            }
        });
    }
    cur
}

/// Sum over the `(2r+1)^3` box around each voxel, truncated at the faces.
pub fn box_sum(data: &[f64], dims: [usize; 3], radius: usize) -> Vec<f64> {
    let mut cur = data.to_vec();
    let mut prefix = Vec::new();
    for axis in 0..3 {
        let src = cur.clone();
        for_each_line(dims, axis, |start, stride, len| {
            prefix.clear();
            prefix.push(0.0);
            let mut acc = 0.0;
            for i in 0..len {
                acc += src[start + i * stride];
                prefix.push(acc);
            }
            for i in 0..len {
                let lo = i.saturating_sub(radius);
                let hi = (i + radius + 1).min(len);
                cur[start + i * stride] = prefix[hi] - prefix[lo];
            }
        });
    }
    cur
}

/// Number of in-grid voxels in each truncated box.
pub fn box_count(dims: [usize; 3], radius: usize) -> Vec<f64> {
    let span = |i: usize, n: usize| ((i + radius + 1).min(n) - i.saturating_sub(radius)) as f64;
    let [nx, ny, nz] = dims;
    let mut out = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                out.push(span(x, nx) * span(y, ny) * span(z, nz));
            }
        }
    }
    out
}

/// Central-difference gradient, one-sided at the faces.
pub fn gradient(data: &[f64], dims: [usize; 3]) -> [Vec<f64>; 3] {
    let [nx, ny, nz] = dims;
    let strides = [1, nx, nx * ny];
    let mut out = [vec![0.0; data.len()], vec![0.0; data.len()], vec![0.0; data.len()]];
    let mut i = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let pos = [x, y, z];
                for a in 0..3 {
                    let s = strides[a];
                    let n = dims[a];
                    let p = pos[a];
                    out[a][i] = if p == 0 {
                        data[i + s] - data[i]
                    } else if p == n - 1 {
                        data[i] - data[i - s]
                    } else {
                        0.5 * (data[i + s] - data[i - s])
                    };
                }
                i += 1;
            }
        }
    }
    out
}

/// Dims after one factor-2 mean-pooling step (odd sizes round up).
pub fn pooled_dims(dims: [usize; 3]) -> [usize; 3] {
    dims.map(|n| n.div_ceil(2))
}

/// Factor-2 mean pooling; partial blocks at odd faces average what exists.
pub fn mean_pool(data: &[f64], dims: [usize; 3]) -> Vec<f64> {
    let out_dims = pooled_dims(dims);
    let [nx, ny, nz] = dims;
    let [mx, my, mz] = out_dims;
    let mut sum = vec![0.0; mx * my * mz];
    let mut count = vec![0.0; mx * my * mz];
    let mut i = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let j = x / 2 + mx * (y / 2 + my * (z / 2));
                sum[j] += data[i];
                count[j] += 1.0;
                i += 1;
            }
        }
    }
    sum.iter().zip(&count).map(|(s, c)| s / c).collect()
}

/// Trilinear upsampling from a pooled grid back to `fine` dims.
///
/// Fine voxel `x` maps to coarse coordinate `(x - 0.5) / 2`, the inverse of
/// the block-centre relation used by [`mean_pool`].
pub fn upsample(coarse: &[f64], coarse_grid: &GridSpec, fine: [usize; 3]) -> Vec<f64> {
    let [nx, ny, nz] = fine;
    let mut out = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let pos = [
                    (x as f64 - 0.5) / 2.0,
                    (y as f64 - 0.5) / 2.0,
                    (z as f64 - 0.5) / 2.0,
                ];
                out.push(sample_trilinear(coarse, coarse_grid, pos));
            }
        }
    }
    out
}
