//! Registration and segmentation uncertainty maps.
//!
//! * transformation: population variance of the sampled displacement, summed
//!   over the three components (voxel^2);
//! * appearance: mean squared difference between each warped moving image and
//!   the fixed image;
//! * epistemic segmentation: binary entropy (nats) of the mean propagated
//!   label, one channel per structure;
//! * aleatoric segmentation: predicted residual variance, produced by the
//!   [`aleatoric`](crate::aleatoric) head;
//! * combined: per-channel min-max normalised epistemic plus aleatoric.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::volume::{GridSpec, LabelVolume, SampleSet, ScalarVolume};
use crate::warp::{mean_warped_labels, warp_channel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UncertaintyKind {
    Transformation,
    Appearance,
    EpistemicSeg,
    AleatoricSeg,
    CombinedSeg,
}

impl UncertaintyKind {
    pub const ALL: [UncertaintyKind; 5] = [
        UncertaintyKind::Transformation,
        UncertaintyKind::Appearance,
        UncertaintyKind::EpistemicSeg,
        UncertaintyKind::AleatoricSeg,
        UncertaintyKind::CombinedSeg,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            UncertaintyKind::Transformation => "transformation",
            UncertaintyKind::Appearance => "appearance",
            UncertaintyKind::EpistemicSeg => "epistemic",
            UncertaintyKind::AleatoricSeg => "aleatoric",
            UncertaintyKind::CombinedSeg => "combined",
        }
    }

    pub fn is_segmentation(&self) -> bool {
        !matches!(self, UncertaintyKind::Transformation | UncertaintyKind::Appearance)
    }
}

impl fmt::Display for UncertaintyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for UncertaintyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown uncertainty kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    grid: GridSpec,
    kind: UncertaintyKind,
    channels: usize,
    data: Vec<f64>,
}

impl UncertaintyMap {
    pub fn new(grid: GridSpec, kind: UncertaintyKind, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidParameter("uncertainty map needs a channel".into()));
        }
        if !kind.is_segmentation() && channels != 1 {
            return Err(Error::ChannelMismatch {
                expected: 1,
                actual: channels,
            });
        }
        if data.len() != channels * grid.len() {
            return Err(Error::LengthMismatch {
                expected: channels * grid.len(),
                actual: data.len(),
            });
        }
        for (index, &value) in data.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::NonFinite { index });
            }
            if value < 0.0 {
                return Err(Error::NegativeUncertainty { index, value });
            }
        }
        if kind == UncertaintyKind::EpistemicSeg {
            if let Some(index) = data.iter().position(|&v| v > std::f64::consts::LN_2 + 1e-6) {
                return Err(Error::InvalidParameter(format!(
                    "epistemic value {} at index {index} exceeds ln 2",
                    data[index]
                )));
            }
        }
        Ok(Self {
            grid,
            kind,
            channels,
            data,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn kind(&self) -> UncertaintyKind {
        self.kind
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.grid.len();
        &self.data[c * n..(c + 1) * n]
    }
}

/// Per-component population variance of the sampled displacements.
pub fn transformation_variance_components(samples: &SampleSet) -> Result<[Vec<f64>; 3]> {
    if samples.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    let n = samples.grid().len();
    let t = samples.len() as f64;
    let mut out = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for (a, var) in out.iter_mut().enumerate() {
        // mean taken relative to the first sample so identical samples give 0 exactly
        let base = samples.samples()[0].component(a);
        let mut mean = vec![0.0; n];
        for s in samples.iter() {
            for ((m, v), b) in mean.iter_mut().zip(s.component(a)).zip(base) {
                *m += v - b;
            }
        }
        mean.iter_mut().zip(base).for_each(|(m, b)| *m = b + *m / t);
        for s in samples.iter() {
            for ((acc, v), m) in var.iter_mut().zip(s.component(a)).zip(&mean) {
                let d = v - m;
                *acc += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= t);
    }
    Ok(out)
}

pub fn transformation_uncertainty(samples: &SampleSet) -> Result<UncertaintyMap> {
    let [vx, vy, vz] = transformation_variance_components(samples)?;
    let data = vx
        .iter()
        .zip(&vy)
        .zip(&vz)
        .map(|((a, b), c)| a + b + c)
        .collect();
    UncertaintyMap::new(*samples.grid(), UncertaintyKind::Transformation, 1, data)
}

pub fn appearance_uncertainty(
    moving: &ScalarVolume,
    fixed: &ScalarVolume,
    samples: &SampleSet,
) -> Result<UncertaintyMap> {
    if samples.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    moving.grid().ensure_same(fixed.grid())?;
    moving.grid().ensure_same(samples.grid())?;
    let mut acc = vec![0.0; fixed.data().len()];
    for field in samples.iter() {
        let warped = warp_channel(moving.data(), field);
        for ((a, w), f) in acc.iter_mut().zip(&warped).zip(fixed.data()) {
            let d = w - f;
            *a += d * d;
        }
    }
    let t = samples.len() as f64;
    acc.iter_mut().for_each(|v| *v /= t);
    UncertaintyMap::new(*fixed.grid(), UncertaintyKind::Appearance, 1, acc)
}

/// Binary entropy in nats with `0 ln 0 = 0`.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.ln() };
    (term(p) + term(1.0 - p)).clamp(0.0, std::f64::consts::LN_2)
}

pub fn epistemic_seg_uncertainty(labels_moving: &LabelVolume, samples: &SampleSet) -> Result<UncertaintyMap> {
    let mean = mean_warped_labels(labels_moving, samples)?;
    let data = mean.data().iter().map(|&p| binary_entropy(p)).collect();
    UncertaintyMap::new(*mean.grid(), UncertaintyKind::EpistemicSeg, mean.channels(), data)
}

/// Min-max normalisation to `[0, 1]`; constant channels map to 0.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / range).collect()
}

/// Sum of per-channel min-max normalised epistemic and aleatoric maps.
pub fn combine_seg_uncertainty(epi: &UncertaintyMap, ale: &UncertaintyMap) -> Result<UncertaintyMap> {
    if epi.kind() != UncertaintyKind::EpistemicSeg || ale.kind() != UncertaintyKind::AleatoricSeg {
        return Err(Error::KindMismatch(format!(
            "expected epistemic + aleatoric, got {} + {}",
            epi.kind(),
            ale.kind()
        )));
    }
    epi.grid().ensure_same(ale.grid())?;
    if epi.channels() != ale.channels() {
        return Err(Error::ChannelMismatch {
            expected: epi.channels(),
            actual: ale.channels(),
        });
    }
    let mut data = Vec::with_capacity(epi.data().len());
    for c in 0..epi.channels() {
        let e = min_max_normalize(epi.channel(c));
        let a = min_max_normalize(ale.channel(c));
        data.extend(e.iter().zip(&a).map(|(x, y)| x + y));
    }
    UncertaintyMap::new(*epi.grid(), UncertaintyKind::CombinedSeg, epi.channels(), data)
}
