use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::filters::{box_count, box_sum, gradient};
use crate::volume::{DisplacementField, GridSpec, ScalarVolume};
use crate::warp::{warp_scalar, BoundaryPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureKind {
    AbsDiff,
    Warped,
    Fixed,
    FixedGradient,
    LocalVariance,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 5] = [
        FeatureKind::AbsDiff,
        FeatureKind::Warped,
        FeatureKind::Fixed,
        FeatureKind::FixedGradient,
        FeatureKind::LocalVariance,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FeatureKind::AbsDiff => "abs_diff",
            FeatureKind::Warped => "warped",
            FeatureKind::Fixed => "fixed",
            FeatureKind::FixedGradient => "fixed_gradient",
            FeatureKind::LocalVariance => "local_variance",
        }
    }

    pub(crate) fn code(&self) -> u32 {
        FeatureKind::ALL.iter().position(|k| k == self).unwrap() as u32
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        FeatureKind::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown feature '{s}'")))
    }
}

pub fn validate_kinds(kinds: &[FeatureKind]) -> Result<()> {
    if kinds.first() != Some(&FeatureKind::AbsDiff) {
        return Err(Error::InvalidParameter("feature list must start with abs_diff".into()));
    }
    for (i, k) in kinds.iter().enumerate() {
        if kinds[..i].contains(k) {
            return Err(Error::InvalidParameter(format!("duplicate feature {k}")));
        }
    }
    Ok(())
}

/// Channel-major stack of per-voxel input features for the head.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    grid: GridSpec,
    kinds: Vec<FeatureKind>,
    data: Vec<f64>,
}

impl FeatureStack {
    pub fn from_raw(grid: GridSpec, kinds: Vec<FeatureKind>, data: Vec<f64>) -> Result<Self> {
        validate_kinds(&kinds)?;
        let expected = kinds.len() * grid.len();
        if data.len() != expected {
            return Err(Error::LengthMismatch { expected, actual: data.len() });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { grid, kinds, data })
    }

    /// Builds features from an already warped moving image and the fixed image.
    pub fn build(kinds: &[FeatureKind], warped: &ScalarVolume, fixed: &ScalarVolume) -> Result<Self> {
        validate_kinds(kinds)?;
        warped.grid().ensure_same(fixed.grid())?;
        let grid = *fixed.grid();
        let dims = grid.dims();
        let n = grid.len();
        let mut data = Vec::with_capacity(kinds.len() * n);
        for kind in kinds {
            match kind {
                FeatureKind::AbsDiff => data.extend(
                    warped.data().iter().zip(fixed.data()).map(|(w, f)| (w - f).abs()),
                ),
                FeatureKind::Warped => data.extend_from_slice(warped.data()),
                FeatureKind::Fixed => data.extend_from_slice(fixed.data()),
                FeatureKind::FixedGradient => {
                    let [gx, gy, gz] = gradient(fixed.data(), dims);
                    data.extend((0..n).map(|i| (gx[i] * gx[i] + gy[i] * gy[i] + gz[i] * gz[i]).sqrt()));
                }
                FeatureKind::LocalVariance => {
                    let sq: Vec<f64> = fixed.data().iter().map(|v| v * v).collect();
                    let s1 = box_sum(fixed.data(), dims, 1);
                    let s2 = box_sum(&sq, dims, 1);
                    let cnt = box_count(dims, 1);
                    data.extend((0..n).map(|i| {
                        let m = s1[i] / cnt[i];
                        (s2[i] / cnt[i] - m * m).max(0.0)
                    }));
                }
            }
        }
        Self::from_raw(grid, kinds.to_vec(), data)
    }

    /// Warps `moving` by `field` and builds features against `fixed`.
    pub fn from_registration(
        kinds: &[FeatureKind],
        moving: &ScalarVolume,
        fixed: &ScalarVolume,
        field: &DisplacementField,
    ) -> Result<Self> {
        let warped = warp_scalar(moving, field, BoundaryPolicy::ClampToEdge)?;
        Self::build(kinds, &warped, fixed)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn kinds(&self) -> &[FeatureKind] {
        &self.kinds
    }

    pub fn channels(&self) -> usize {
        self.kinds.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn abs_diff_required_first() {
        assert!(validate_kinds(&[FeatureKind::Fixed, FeatureKind::AbsDiff]).is_err());
        assert!(validate_kinds(&[FeatureKind::AbsDiff, FeatureKind::AbsDiff]).is_err());
        assert!(validate_kinds(&FeatureKind::ALL).is_ok());
        assert!(validate_kinds(&[]).is_err());
    }

    #[test]
    fn build_channels() {
        let grid = GridSpec::cube([4, 4, 4]).unwrap();
        let fixed = ScalarVolume::new(grid, (0..64).map(|i| (i % 4) as f64).collect()).unwrap();
        let warped = ScalarVolume::filled(grid, 1.0).unwrap();
        let stack = FeatureStack::build(&FeatureKind::ALL, &warped, &fixed).unwrap();
        assert_eq!(stack.channels(), 5);
        assert_eq!(stack.data()[0], 1.0);
        assert_eq!(stack.data()[2], 1.0);
        assert_eq!(stack.data()[3], 2.0);
        // ramp along x has unit gradient magnitude
        assert!((stack.data()[3 * 64 + 1] - 1.0).abs() < 1e-12);
        // variance of {0,1,2} across x neighbourhood
        assert!((stack.data()[4 * 64 + 1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn kind_names_round_trip() {
        for k in FeatureKind::ALL {
            assert_eq!(k.name().parse::<FeatureKind>().unwrap(), k);
            assert_eq!(FeatureKind::from_code(k.code()), Some(k));
        }
    }
}
