//! Grid geometry and the volume/field data model.
//!
//! All volumes are stored x-fastest: `index = x + nx * (y + ny * z)`.
//! Multi-channel label volumes are channel-major, so channel `c` occupies
//! `data[c * len .. (c + 1) * len]`. Displacements are in voxel units and
//! follow the backward convention `phi(p) = p + u(p)`.
//!
//! Every type here validates its payload at construction and is immutable
//! afterwards.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    dims: [usize; 3],
    spacing: [f64; 3],
}

impl GridSpec {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if let Some(axis) = dims.iter().position(|&d| d < 2) {
            return Err(Error::InvalidGrid(format!(
                "dimension {axis} is {} but must be at least 2",
                dims[axis]
            )));
        }
        if let Some(axis) = spacing.iter().position(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidGrid(format!(
                "spacing {axis} is {} but must be positive",
                spacing[axis]
            )));
        }
        Ok(Self { dims, spacing })
    }

    /// Unit-spaced grid.
    pub fn cube(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn linear_index(&self, x: usize, y: usize, z: usize) -> Result<usize> {
        let [nx, ny, nz] = self.dims;
        if x >= nx || y >= ny || z >= nz {
            return Err(Error::OutOfRange {
                x,
                y,
                z,
                dims: self.dims,
            });
        }
        Ok(self.index(x, y, z))
    }

    /// Unchecked variant of [`linear_index`](Self::linear_index).
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let [nx, ny, _] = self.dims;
        (index % nx, (index / nx) % ny, index / (nx * ny))
    }

    /// Grids are compatible when their voxel layout agrees; spacing is
    /// informational only.
    pub fn same_shape(&self, other: &GridSpec) -> bool {
        self.dims == other.dims
    }

    pub fn ensure_same(&self, other: &GridSpec) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch {
                left: format!("{:?}", self.dims),
                right: format!("{:?}", other.dims),
            })
        }
    }
}

fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::LengthMismatch { expected, actual });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    grid: GridSpec,
    data: Vec<f64>,
}

impl ScalarVolume {
    pub fn new(grid: GridSpec, data: Vec<f64>) -> Result<Self> {
        check_len(grid.len(), data.len())?;
        check_finite(&data)?;
        Ok(Self { grid, data })
    }

    pub fn filled(grid: GridSpec, fill: f64) -> Result<Self> {
        if !fill.is_finite() {
            return Err(Error::NonFinite { index: 0 });
        }
        Ok(Self {
            grid,
            data: vec![fill; grid.len()],
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.grid.index(x, y, z)]
    }

    /// Deterministic digest over the header and the bit-exact payload.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"scalar");
        hash_grid(&mut hasher, &self.grid);
        for v in &self.data {
            hasher.update(v.to_bits().to_le_bytes());
        }
        hex_digest(hasher)
    }
}

/// Constant volume on a validated grid.
pub fn make_volume(grid: GridSpec, fill: f64) -> Result<ScalarVolume> {
    ScalarVolume::filled(grid, fill)
}

/// Digest of a scalar volume, see [`ScalarVolume::checksum`].
pub fn checksum(volume: &ScalarVolume) -> String {
    volume.checksum()
}

fn hash_grid(hasher: &mut Sha256, grid: &GridSpec) {
    for d in grid.dims {
        hasher.update((d as u64).to_le_bytes());
    }
    for s in grid.spacing {
        hasher.update(s.to_bits().to_le_bytes());
    }
}

fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Per-structure soft labels in `[0, 1]`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    grid: GridSpec,
    channels: usize,
    data: Vec<f64>,
}

impl LabelVolume {
    pub fn new(grid: GridSpec, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidParameter(
                "label volume needs at least one channel".into(),
            ));
        }
        check_len(channels * grid.len(), data.len())?;
        if let Some(index) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            if !data[index].is_finite() {
                return Err(Error::NonFinite { index });
            }
            return Err(Error::LabelRange {
                index,
                value: data[index],
            });
        }
        Ok(Self {
            grid,
            channels,
            data,
        })
    }

    /// Builds a binary label volume, rejecting anything outside `{0, 1}`.
    pub fn binary(grid: GridSpec, channels: usize, data: Vec<f64>) -> Result<Self> {
        let labels = Self::new(grid, channels, data)?;
        labels.ensure_binary()?;
        Ok(labels)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.grid.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn ensure_binary(&self) -> Result<()> {
        match self.data.iter().position(|&v| v != 0.0 && v != 1.0) {
            Some(index) => Err(Error::NotBinary {
                index,
                value: self.data[index],
            }),
            None => Ok(()),
        }
    }

    pub fn ensure_compatible(&self, other: &LabelVolume) -> Result<()> {
        self.grid.ensure_same(&other.grid)?;
        if self.channels != other.channels {
            return Err(Error::ChannelMismatch {
                expected: self.channels,
                actual: other.channels,
            });
        }
        Ok(())
    }
}

/// Voxel-unit displacement field `u`, with `phi = Id + u`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    grid: GridSpec,
    components: [Vec<f64>; 3],
}

impl DisplacementField {
    pub fn new(grid: GridSpec, components: [Vec<f64>; 3]) -> Result<Self> {
        for c in &components {
            check_len(grid.len(), c.len())?;
            check_finite(c)?;
        }
        Ok(Self { grid, components })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        let n = grid.len();
        Self {
            grid,
            components: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        }
    }

    /// Same displacement at every voxel.
    pub fn constant(grid: GridSpec, u: [f64; 3]) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, [vec![u[0]; n], vec![u[1]; n], vec![u[2]; n]])
    }

    /// Field from a function of voxel coordinates.
    pub fn from_fn(grid: GridSpec, f: impl Fn(usize, usize, usize) -> [f64; 3]) -> Result<Self> {
        let n = grid.len();
        let mut comps = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for i in 0..n {
            let (x, y, z) = grid.coords(i);
            let u = f(x, y, z);
            for a in 0..3 {
                comps[a][i] = u[a];
            }
        }
        Self::new(grid, comps)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        &self.components[axis]
    }

    pub fn components(&self) -> &[Vec<f64>; 3] {
        &self.components
    }

    pub fn into_components(self) -> [Vec<f64>; 3] {
        self.components
    }

    #[inline]
    pub fn at(&self, index: usize) -> [f64; 3] {
        [
            self.components[0][index],
            self.components[1][index],
            self.components[2][index],
        ]
    }
}

/// `T >= 1` displacement fields on one grid, in sampling order.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    samples: Vec<DisplacementField>,
}

impl SampleSet {
    pub fn new(samples: Vec<DisplacementField>) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptySampleSet)?;
        for s in &samples[1..] {
            first.grid().ensure_same(s.grid())?;
        }
        Ok(Self { samples })
    }

    pub fn grid(&self) -> &GridSpec {
        self.samples[0].grid()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[DisplacementField] {
        &self.samples
    }

    pub fn iter(&self) -> std::slice::Iter<'_, DisplacementField> {
        self.samples.iter()
    }
}
