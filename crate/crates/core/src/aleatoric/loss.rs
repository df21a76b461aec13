use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::volume::LabelVolume;

/// `s = ln(sigma^2)` is clipped to `[-S_CLAMP, S_CLAMP]` before use.
pub const S_CLAMP: f64 = 10.0;

/// Second term of the per-voxel loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossForm {
    /// `0.5 * e^2 / sigma^2 + 0.5 * ln(sigma^2)`
    #[default]
    Standard,
    /// `0.5 * e^2 / sigma^2 + 0.5 * sigma^2`
    Printed,
}

impl LossForm {
    pub fn name(&self) -> &'static str {
        match self {
            LossForm::Standard => "standard",
            LossForm::Printed => "printed-form",
        }
    }
}

impl fmt::Display for LossForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(LossForm::Standard),
            "printed" | "printed-form" => Ok(LossForm::Printed),
            other => Err(Error::Parse(format!("unknown loss form '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    /// `dL/ds` per element, channel-major.
    pub grad_s: Vec<f64>,
}

#[inline]
pub fn clamp_s(s: f64) -> f64 {
    s.clamp(-S_CLAMP, S_CLAMP)
}

/// Stop-gradient weights `sigma^(2 beta) = exp(beta * s)`.
pub fn stop_gradient_weights(s: &[f64], beta: f64) -> Vec<f64> {
    s.iter().map(|&v| (beta * clamp_s(v)).exp()).collect()
}

fn check_shapes(s: &[f64], warped: &LabelVolume, target: &LabelVolume) -> Result<()> {
    warped.ensure_compatible(target)?;
    if s.len() != warped.data().len() {
        return Err(Error::LengthMismatch {
            expected: warped.data().len(),
            actual: s.len(),
        });
    }
    if let Some(index) = s.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok(())
}

/// Beta-weighted Gaussian NLL, mean over voxels and channels.
pub fn beta_nll_loss(
    s: &[f64],
    warped: &LabelVolume,
    target: &LabelVolume,
    beta: f64,
    form: LossForm,
) -> Result<LossValue> {
    check_shapes(s, warped, target)?;
    let weights = stop_gradient_weights(s, beta);
    beta_nll_loss_with_weights(s, warped, target, &weights, form)
}

/// Same loss with externally supplied (frozen) weights.
pub fn beta_nll_loss_with_weights(
    s: &[f64],
    warped: &LabelVolume,
    target: &LabelVolume,
    weights: &[f64],
    form: LossForm,
) -> Result<LossValue> {
    check_shapes(s, warped, target)?;
    if weights.len() != s.len() {
        return Err(Error::LengthMismatch {
            expected: s.len(),
            actual: weights.len(),
        });
    }
    let m = s.len() as f64;
    let mut total = 0.0;
    let mut grad_s = vec![0.0; s.len()];
    for (i, ((&si, (w, t)), &wt)) in s
        .iter()
        .zip(warped.data().iter().zip(target.data()))
        .zip(weights)
        .enumerate()
    {
        let sc = clamp_s(si);
        let var = sc.exp();
        if var <= 0.0 {
            return Err(Error::Internal("non-positive variance after clamp".into()));
        }
        let e2 = (w - t) * (w - t);
        let (term, dterm) = match form {
            LossForm::Standard => (0.5 * e2 / var + 0.5 * sc, -0.5 * e2 / var + 0.5),
            LossForm::Printed => (0.5 * e2 / var + 0.5 * var, -0.5 * e2 / var + 0.5 * var),
        };
        total += wt * term;
        if si.abs() <= S_CLAMP {
            grad_s[i] = wt * dterm / m;
        }
    }
    Ok(LossValue { loss: total / m, grad_s })
}
