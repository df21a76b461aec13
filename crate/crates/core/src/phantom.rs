//! Synthetic intensity/label phantoms and smooth random deformations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::filters::gaussian_smooth;
use crate::volume::{DisplacementField, GridSpec, LabelVolume, ScalarVolume};
use crate::warp::{argmax_discretize, warp_labels, warp_scalar, BoundaryPolicy};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Sphere { radius: f64 },
    Ellipsoid { radii: [f64; 3] },
    /// Spherical shell, `inner < r <= outer`.
    Shell { inner: f64, outer: f64 },
}

impl Shape {
    fn contains(&self, d: [f64; 3]) -> bool {
        match *self {
            Shape::Sphere { radius } => norm(d) <= radius,
            Shape::Ellipsoid { radii } => {
                let s: f64 = (0..3).map(|a| (d[a] / radii[a]).powi(2)).sum();
                s <= 1.0
            }
            Shape::Shell { inner, outer } => {
                let r = norm(d);
                r > inner && r <= outer
            }
        }
    }

    fn extent(&self) -> [f64; 3] {
        match *self {
            Shape::Sphere { radius } => [radius; 3],
            Shape::Ellipsoid { radii } => radii,
            Shape::Shell { outer, .. } => [outer; 3],
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Shape::Sphere { radius } => radius > 0.0,
            Shape::Ellipsoid { radii } => radii.iter().all(|&r| r > 0.0),
            Shape::Shell { inner, outer } => inner >= 0.0 && outer > inner,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("bad shape radii: {self:?}")))
        }
    }
}

fn norm(d: [f64; 3]) -> f64 {
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Structure {
    pub shape: Shape,
    pub center: [f64; 3],
    pub intensity: f64,
    pub channel: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub grid: GridSpec,
    pub structures: Vec<Structure>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// Two-structure cardiac-like layout (blood pool plus surrounding wall)
    /// scaled to the grid.
    pub fn two_structure(grid: GridSpec, seed: u64) -> Self {
        let [nx, ny, nz] = grid.dims();
        let m = nx.min(ny).min(nz) as f64;
        let center = [
            (nx as f64 - 1.0) / 2.0,
            (ny as f64 - 1.0) / 2.0,
            (nz as f64 - 1.0) / 2.0,
        ];
        let pool = 0.18 * m;
        let wall = 0.30 * m;
        Self {
            grid,
            structures: vec![
                Structure {
                    shape: Shape::Sphere { radius: pool },
                    center,
                    intensity: 1.0,
                    channel: 0,
                },
                Structure {
                    shape: Shape::Shell {
                        inner: pool,
                        outer: wall,
                    },
                    center,
                    intensity: 0.4,
                    channel: 1,
                },
            ],
            noise_sigma: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidParameter("noise_sigma must be >= 0".into()));
        }
        if self.structures.is_empty() {
            return Err(Error::InvalidParameter("phantom needs at least one structure".into()));
        }
        let mut seen = vec![false; self.structures.len()];
        for s in &self.structures {
            s.shape.validate()?;
            if s.channel >= seen.len() || seen[s.channel] {
                return Err(Error::InvalidParameter(format!(
                    "structure channels must be distinct and contiguous from 0 (got {})",
                    s.channel
                )));
            }
            seen[s.channel] = true;
            let ext = s.shape.extent();
            let dims = self.grid.dims();
            for a in 0..3 {
                let lo = s.center[a] - ext[a];
                let hi = s.center[a] + ext[a];
                if lo < 0.0 || hi > (dims[a] - 1) as f64 {
                    return Err(Error::InvalidParameter(format!(
                        "structure {} does not fit inside the grid along axis {a}",
                        s.channel
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.structures.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomFieldSpec {
    pub grid: GridSpec,
    /// Largest absolute displacement component, in voxels.
    pub amplitude: f64,
    /// Gaussian sigma applied to the white noise, in voxels.
    pub smoothness: f64,
    pub seed: u64,
}

impl RandomFieldSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude.is_finite() && self.amplitude >= 0.0) {
            return Err(Error::InvalidParameter("amplitude must be finite and >= 0".into()));
        }
        if !(self.smoothness >= 0.5) {
            return Err(Error::InvalidParameter("smoothness must be >= 0.5".into()));
        }
        Ok(())
    }
}

pub(crate) fn normal_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Noiseless intensity volume and binary labels.
fn render(spec: &PhantomSpec) -> Result<(Vec<f64>, LabelVolume)> {
    spec.validate()?;
    let grid = spec.grid;
    let n = grid.len();
    let channels = spec.channels();
    let mut intensity = vec![0.0; n];
    let mut labels = vec![0.0; channels * n];
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        let (x, y, z) = grid.coords(i);
        let p = [x as f64, y as f64, z as f64];
        for s in &spec.structures {
            let d = [p[0] - s.center[0], p[1] - s.center[1], p[2] - s.center[2]];
            if !s.shape.contains(d) {
                continue;
            }
            if let Some(prev) = owner[i] {
                return Err(Error::StructureOverlap {
                    first: prev,
                    second: s.channel,
                    index: i,
                });
            }
            owner[i] = Some(s.channel);
            intensity[i] += s.intensity;
            labels[s.channel * n + i] = 1.0;
        }
    }
    Ok((intensity, LabelVolume::binary(grid, channels, labels)?))
}

fn add_noise(mut data: Vec<f64>, sigma: f64, seed: u64) -> Vec<f64> {
    if sigma > 0.0 {
        let n = data.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (v, e) in data.iter_mut().zip(normal_noise(&mut rng, n)) {
            *v += sigma * e;
        }
    }
    data
}

/// Intensity volume (shapes plus seeded Gaussian noise) and binary masks.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(ScalarVolume, LabelVolume)> {
    let (clean, labels) = render(spec)?;
    let noisy = add_noise(clean, spec.noise_sigma, spec.seed);
    Ok((ScalarVolume::new(spec.grid, noisy)?, labels))
}

/// Gaussian-smoothed white noise rescaled to the requested amplitude.
pub fn generate_smooth_field(spec: &RandomFieldSpec) -> Result<DisplacementField> {
    spec.validate()?;
    let grid = spec.grid;
    if spec.amplitude == 0.0 {
        return Ok(DisplacementField::zeros(grid));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dims = grid.dims();
    // smooth on a padded grid and crop, so the field statistics do not
    // depend on the distance to the border
    let pad = (3.0 * spec.smoothness).ceil() as usize;
    let padded = dims.map(|d| d + 2 * pad);
    let plen = padded[0] * padded[1] * padded[2];
    let comps = [0, 1, 2].map(|_| {
        let smooth = gaussian_smooth(&normal_noise(&mut rng, plen), padded, spec.smoothness);
        let mut out = Vec::with_capacity(grid.len());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                let row = pad + padded[0] * ((y + pad) + padded[1] * (z + pad));
                out.extend_from_slice(&smooth[row..row + dims[0]]);
            }
        }
        out
    });
    let peak = comps
        .iter()
        .flat_map(|c| c.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Ok(DisplacementField::zeros(grid));
    }
    let scale = spec.amplitude / peak;
    DisplacementField::new(grid, comps.map(|c| c.into_iter().map(|v| v * scale).collect()))
}

/// Fixed/moving pair with label-consistent ground truth.
#[derive(Debug, Clone)]
pub struct GroundTruthPair {
    pub fixed: ScalarVolume,
    pub moving: ScalarVolume,
    pub labels_fixed: LabelVolume,
    pub labels_moving: LabelVolume,
    pub true_field: DisplacementField,
}

/// Like [`make_ground_truth_pair`] but with an explicit deformation.
pub fn make_ground_truth_pair_with_field(
    phantom: &PhantomSpec,
    true_field: DisplacementField,
) -> Result<GroundTruthPair> {
    phantom.grid.ensure_same(true_field.grid())?;
    let (clean, labels_moving) = render(phantom)?;
    let moving = ScalarVolume::new(phantom.grid, add_noise(clean.clone(), phantom.noise_sigma, phantom.seed))?;
    let clean = ScalarVolume::new(phantom.grid, clean)?;
    let warped = warp_scalar(&clean, &true_field, BoundaryPolicy::ClampToEdge)?;
    // fresh noise stream for the fixed image
    let fixed_seed = phantom.seed ^ 0x9e37_79b9_7f4a_7c15;
    let fixed = ScalarVolume::new(
        phantom.grid,
        add_noise(warped.into_data(), phantom.noise_sigma, fixed_seed),
    )?;
    let soft = warp_labels(&labels_moving, &true_field, BoundaryPolicy::ClampToEdge)?;
    let labels_fixed = argmax_discretize(&soft, None)?;
    Ok(GroundTruthPair {
        fixed,
        moving,
        labels_fixed,
        labels_moving,
        true_field,
    })
}

/// Moving image is the phantom; the fixed image is the noiseless phantom
/// warped by a random field, with fresh noise.
pub fn make_ground_truth_pair(phantom: &PhantomSpec, field: &RandomFieldSpec) -> Result<GroundTruthPair> {
    phantom.grid.ensure_same(&field.grid)?;
    let true_field = generate_smooth_field(field)?;
    make_ground_truth_pair_with_field(phantom, true_field)
}
