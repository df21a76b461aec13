use std::path::Path;

use crate::error::{Error, Result};
use crate::uncertainty::{UncertaintyKind, UncertaintyMap};
use crate::volume::LabelVolume;

use super::features::FeatureStack;
use super::loss::{beta_nll_loss, beta_nll_loss_with_weights, clamp_s, LossForm};
use super::network::{backward, forward, Gradients, HeadConfig, HeadParameters, Mode};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub beta: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub loss_form: LossForm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            epochs: 500,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            loss_form: LossForm::Standard,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidParameter("beta must be >= 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidParameter("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidParameter("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidParameter("Adam decays must be in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidParameter("epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// One training example: features of a registered pair, the warped moving
/// labels and the fixed-image labels.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub features: FeatureStack,
    pub warped_labels: LabelVolume,
    pub target_labels: LabelVolume,
}

impl TrainingPair {
    pub fn new(features: FeatureStack, warped_labels: LabelVolume, target_labels: LabelVolume) -> Result<Self> {
        warped_labels.ensure_compatible(&target_labels)?;
        features.grid().ensure_same(warped_labels.grid())?;
        Ok(Self {
            features,
            warped_labels,
            target_labels,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: HeadParameters,
    /// Mean loss over the training pairs, one entry per epoch.
    pub loss_history: Vec<f64>,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(params: &HeadParameters) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut HeadParameters, grads: &Gradients, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (k, tensor) in params.tensors_mut().into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads.tensors[k]);
            for i in 0..tensor.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                tensor[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
            }
        }
    }
}

/// Loss and gradients for one pair in train mode; running stats untouched.
pub fn loss_and_gradients(
    params: &HeadParameters,
    pair: &TrainingPair,
    beta: f64,
    form: LossForm,
) -> Result<(f64, Gradients)> {
    let dims = pair.features.grid().dims();
    let pass = forward(params, pair.features.data(), dims, Mode::Train)?;
    let value = beta_nll_loss(&pass.output, &pair.warped_labels, &pair.target_labels, beta, form)?;
    let grads = backward(params, &pass, &value.grad_s)?;
    Ok((value.loss, grads))
}

/// As [`loss_and_gradients`] but with the stop-gradient weights supplied by
/// the caller instead of recomputed from the current output.
pub fn loss_and_gradients_frozen(
    params: &HeadParameters,
    pair: &TrainingPair,
    weights: &[f64],
    form: LossForm,
) -> Result<(f64, Gradients)> {
    let dims = pair.features.grid().dims();
    let pass = forward(params, pair.features.data(), dims, Mode::Train)?;
    let value = beta_nll_loss_with_weights(&pass.output, &pair.warped_labels, &pair.target_labels, weights, form)?;
    let grads = backward(params, &pass, &value.grad_s)?;
    Ok((value.loss, grads))
}

fn check_pairs(pairs: &[TrainingPair], head: &HeadConfig) -> Result<()> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::InvalidParameter("training set is empty".into()))?;
    for pair in pairs {
        if pair.features.kinds() != first.features.kinds() {
            return Err(Error::InvalidParameter("training pairs use different feature lists".into()));
        }
        if pair.features.channels() != head.input_channels {
            return Err(Error::ChannelMismatch {
                expected: head.input_channels,
                actual: pair.features.channels(),
            });
        }
        if pair.warped_labels.channels() != head.output_channels {
            return Err(Error::ChannelMismatch {
                expected: head.output_channels,
                actual: pair.warped_labels.channels(),
            });
        }
    }
    Ok(())
}

/// Adam training, one update per pair per epoch, in the given pair order.
pub fn train(pairs: &[TrainingPair], head: HeadConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    head.validate()?;
    cfg.validate()?;
    check_pairs(pairs, &head)?;
    let mut params = HeadParameters::init(head, cfg.seed)?;
    let mut adam = Adam::new(&params);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for pair in pairs {
            let dims = pair.features.grid().dims();
            let pass = forward(&params, pair.features.data(), dims, Mode::Train)?;
            let value = beta_nll_loss(&pass.output, &pair.warped_labels, &pair.target_labels, cfg.beta, cfg.loss_form)?;
            if !value.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            let grads = backward(&params, &pass, &value.grad_s)?;
            adam.step(&mut params, &grads, cfg);
            params.apply_batch_stats(&pass.batch_stats, pair.features.grid().len());
            total += value.loss;
        }
        let mean = total / pairs.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        history.push(mean);
        params.ensure_finite()?;
    }
    Ok(TrainOutcome {
        params,
        loss_history: history,
    })
}

/// Raw `s = ln(sigma^2)` in inference mode.
pub fn predict_log_variance(params: &HeadParameters, features: &FeatureStack) -> Result<Vec<f64>> {
    if features.channels() != params.config.input_channels {
        return Err(Error::ChannelMismatch {
            expected: params.config.input_channels,
            actual: features.channels(),
        });
    }
    Ok(forward(params, features.data(), features.grid().dims(), Mode::Infer)?.output)
}

/// Per-structure `sigma^2 = exp(clamp(s))`; needs no labels.
pub fn predict_aleatoric(params: &HeadParameters, features: &FeatureStack) -> Result<UncertaintyMap> {
    let s = predict_log_variance(params, features)?;
    let var: Vec<f64> = s.into_iter().map(|v| clamp_s(v).exp()).collect();
    UncertaintyMap::new(
        *features.grid(),
        UncertaintyKind::AleatoricSeg,
        params.config.output_channels,
        var,
    )
}

pub fn write_loss_history(path: &Path, history: &[f64]) -> Result<()> {
    let io = |e: csv::Error| Error::Parse(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["epoch", "loss"]).map_err(io)?;
    for (i, loss) in history.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{loss:e}")]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
