//! Run configuration files.
//!
//! One `section.key = value` assignment per line; `#` starts a comment.
//! Unknown or repeated keys are rejected. Every key is optional; the
//! defaults are those of [`RunConfig::default`], printed by
//! [`RunConfig::to_text`].
//!
//! ```text
//! phantom.dims = 32 32 32
//! phantom.spacing = 1 1 1
//! phantom.noise_sigma = 0.05
//! phantom.seed = 0
//! # optional, replaces the default two-structure layout:
//! # phantom.structure.<channel> = sphere cx cy cz r intensity
//! #                             | ellipsoid cx cy cz rx ry rz intensity
//! #                             | shell cx cy cz inner outer intensity
//! field.amplitude = 3
//! field.smoothness = 4
//! field.seed = 1
//! registration.levels = 3        # also iterations, step, similarity (ncc|ssd),
//!                                # ncc_window, weight_sim, weight_diffusion,
//!                                # weight_dice, smoothing, seed
//! policy.mode = both             # init | dropout | both
//! policy.dropout_rate = 0.2
//! policy.init_sigma = 0.5
//! policy.samples = 8
//! head.hidden_channels = 16
//! head.leaky_slope = 0.2
//! head.features = abs_diff,warped,fixed,fixed_gradient,local_variance
//! train.beta = 1                 # also epochs, learning_rate, beta1, beta2,
//!                                # epsilon, seed, loss_form (standard|printed-form)
//! metrics.mask = whole           # whole | dilated:<radius>
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::aleatoric::{validate_kinds, FeatureKind, LossForm, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::MaskPolicy;
use crate::phantom::{PhantomSpec, RandomFieldSpec, Shape, Structure};
use crate::registration::{RegistrationConfig, StochasticPolicy};
use crate::volume::GridSpec;

/// Deformation settings; the grid comes from the phantom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSettings {
    pub amplitude: f64,
    pub smoothness: f64,
    pub seed: u64,
}

impl Default for FieldSettings {
    fn default() -> Self {
        Self {
            amplitude: 3.0,
            smoothness: 4.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadSettings {
    pub hidden_channels: usize,
    pub leaky_slope: f64,
    pub features: Vec<FeatureKind>,
}

impl Default for HeadSettings {
    fn default() -> Self {
        Self {
            hidden_channels: 16,
            leaky_slope: 0.2,
            features: FeatureKind::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricSettings {
    pub mask: MaskPolicy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub phantom: PhantomSpec,
    pub field: FieldSettings,
    pub registration: RegistrationConfig,
    pub policy: StochasticPolicy,
    pub head: HeadSettings,
    pub train: TrainConfig,
    pub metrics: MetricSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let grid = GridSpec::cube([32, 32, 32]).expect("valid default grid");
        Self {
            phantom: PhantomSpec::two_structure(grid, 0),
            field: FieldSettings::default(),
            registration: RegistrationConfig::default(),
            policy: StochasticPolicy::default(),
            head: HeadSettings::default(),
            train: TrainConfig::default(),
            metrics: MetricSettings::default(),
        }
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        line,
        message: format!("invalid value {value:?} for {key}"),
    })
}

fn parse_list<T: FromStr>(line: usize, key: &str, value: &str, n: usize) -> Result<Vec<T>> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != n {
        return Err(Error::Config {
            line,
            message: format!("{key} needs {n} values, found {}", parts.len()),
        });
    }
    parts.iter().map(|p| parse_value(line, key, p)).collect()
}

fn parse_structure(line: usize, key: &str, channel: usize, value: &str) -> Result<Structure> {
    let mut parts = value.split_whitespace();
    let kind = parts.next().unwrap_or("");
    let nums: Vec<f64> = parts.map(|p| parse_value(line, key, p)).collect::<Result<_>>()?;
    let expect = |n: usize| -> Result<()> {
        if nums.len() == n {
            Ok(())
        } else {
            Err(Error::Config {
                line,
                message: format!("{key}: '{kind}' needs {n} numbers, found {}", nums.len()),
            })
        }
    };
    let shape = match kind {
        "sphere" => {
            expect(5)?;
            Shape::Sphere { radius: nums[3] }
        }
        "ellipsoid" => {
            expect(7)?;
            Shape::Ellipsoid {
                radii: [nums[3], nums[4], nums[5]],
            }
        }
        "shell" => {
            expect(6)?;
            Shape::Shell {
                inner: nums[3],
                outer: nums[4],
            }
        }
        other => {
            return Err(Error::Config {
                line,
                message: format!("{key}: unknown shape {other:?}"),
            })
        }
    };
    Ok(Structure {
        shape,
        center: [nums[0], nums[1], nums[2]],
        intensity: *nums.last().expect("length checked"),
        channel,
    })
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut dims = cfg.phantom.grid.dims();
        let mut spacing = cfg.phantom.grid.spacing();
        let mut structures: BTreeMap<usize, Structure> = BTreeMap::new();
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                message: format!("expected 'section.key = value', found {content:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(first) = seen.insert(key.to_string(), line) {
                return Err(Error::Config {
                    line,
                    message: format!("{key} already set on line {first}"),
                });
            }
            let v = value;
            match key {
                "phantom.dims" => {
                    let d: Vec<usize> = parse_list(line, key, v, 3)?;
                    dims = [d[0], d[1], d[2]];
                }
                "phantom.spacing" => {
                    let s: Vec<f64> = parse_list(line, key, v, 3)?;
                    spacing = [s[0], s[1], s[2]];
                }
                "phantom.noise_sigma" => cfg.phantom.noise_sigma = parse_value(line, key, v)?,
                "phantom.seed" => cfg.phantom.seed = parse_value(line, key, v)?,
                "field.amplitude" => cfg.field.amplitude = parse_value(line, key, v)?,
                "field.smoothness" => cfg.field.smoothness = parse_value(line, key, v)?,
                "field.seed" => cfg.field.seed = parse_value(line, key, v)?,
                "registration.levels" => cfg.registration.levels = parse_value(line, key, v)?,
                "registration.iterations" => cfg.registration.iterations = parse_value(line, key, v)?,
                "registration.step" => cfg.registration.step = parse_value(line, key, v)?,
                "registration.similarity" => cfg.registration.similarity = parse_value(line, key, v)?,
                "registration.ncc_window" => cfg.registration.ncc_window = parse_value(line, key, v)?,
                "registration.weight_sim" => cfg.registration.weight_sim = parse_value(line, key, v)?,
                "registration.weight_diffusion" => cfg.registration.weight_diffusion = parse_value(line, key, v)?,
                "registration.weight_dice" => cfg.registration.weight_dice = parse_value(line, key, v)?,
                "registration.smoothing" => cfg.registration.smoothing = parse_value(line, key, v)?,
                "registration.seed" => cfg.registration.seed = parse_value(line, key, v)?,
                "policy.mode" => cfg.policy.mode = parse_value(line, key, v)?,
                "policy.dropout_rate" => cfg.policy.dropout_rate = parse_value(line, key, v)?,
                "policy.init_sigma" => cfg.policy.init_sigma = parse_value(line, key, v)?,
                "policy.samples" => cfg.policy.samples = parse_value(line, key, v)?,
                "head.hidden_channels" => cfg.head.hidden_channels = parse_value(line, key, v)?,
                "head.leaky_slope" => cfg.head.leaky_slope = parse_value(line, key, v)?,
                "head.features" => {
                    cfg.head.features = v
                        .split(',')
                        .map(|f| parse_value(line, key, f.trim()))
                        .collect::<Result<_>>()?;
                }
                "train.beta" => cfg.train.beta = parse_value(line, key, v)?,
                "train.epochs" => cfg.train.epochs = parse_value(line, key, v)?,
                "train.learning_rate" => cfg.train.learning_rate = parse_value(line, key, v)?,
                "train.beta1" => cfg.train.beta1 = parse_value(line, key, v)?,
                "train.beta2" => cfg.train.beta2 = parse_value(line, key, v)?,
                "train.epsilon" => cfg.train.epsilon = parse_value(line, key, v)?,
                "train.seed" => cfg.train.seed = parse_value(line, key, v)?,
                "train.loss_form" => cfg.train.loss_form = parse_value::<LossForm>(line, key, v)?,
                "metrics.mask" => cfg.metrics.mask = parse_value(line, key, v)?,
                _ => match key.strip_prefix("phantom.structure.") {
                    Some(ch) => {
                        let channel: usize = parse_value(line, key, ch)?;
                        structures.insert(channel, parse_structure(line, key, channel, v)?);
                    }
                    None => {
                        return Err(Error::Config {
                            line,
                            message: format!("unknown key {key:?}"),
                        })
                    }
                },
            }
        }

        let grid = GridSpec::new(dims, spacing).map_err(|e| Error::Config {
            line: seen.get("phantom.dims").or(seen.get("phantom.spacing")).copied().unwrap_or(0),
            message: e.to_string(),
        })?;
        cfg.phantom.grid = grid;
        cfg.phantom.structures = if structures.is_empty() {
            PhantomSpec::two_structure(grid, cfg.phantom.seed).structures
        } else {
            structures.into_values().collect()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |e: Error| Error::Config {
            line: 0,
            message: e.to_string(),
        };
        self.phantom.validate().map_err(usage)?;
        self.field_spec().validate().map_err(usage)?;
        self.registration.validate().map_err(usage)?;
        self.policy.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        validate_kinds(&self.head.features).map_err(usage)?;
        if self.head.hidden_channels == 0 || !(self.head.leaky_slope > 0.0 && self.head.leaky_slope < 1.0) {
            return Err(usage(Error::InvalidParameter(
                "head.hidden_channels must be >= 1 and head.leaky_slope in (0, 1)".into(),
            )));
        }
        Ok(())
    }

    pub fn field_spec(&self) -> RandomFieldSpec {
        RandomFieldSpec {
            grid: self.phantom.grid,
            amplitude: self.field.amplitude,
            smoothness: self.field.smoothness,
            seed: self.field.seed,
        }
    }

    /// Derives every seed from `seed`: phantom and registration use it
    /// directly, the field uses `seed + 1` and training `seed + 2`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.phantom.seed = seed;
        self.field.seed = seed.wrapping_add(1);
        self.registration.seed = seed;
        self.train.seed = seed.wrapping_add(2);
        self
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let [nx, ny, nz] = self.phantom.grid.dims();
        let [sx, sy, sz] = self.phantom.grid.spacing();
        let _ = writeln!(s, "phantom.dims = {nx} {ny} {nz}");
        let _ = writeln!(s, "phantom.spacing = {sx} {sy} {sz}");
        let _ = writeln!(s, "phantom.noise_sigma = {}", self.phantom.noise_sigma);
        let _ = writeln!(s, "phantom.seed = {}", self.phantom.seed);
        for st in &self.phantom.structures {
            let [cx, cy, cz] = st.center;
            let shape = match st.shape {
                Shape::Sphere { radius } => format!("sphere {cx} {cy} {cz} {radius}"),
                Shape::Ellipsoid { radii: [a, b, c] } => format!("ellipsoid {cx} {cy} {cz} {a} {b} {c}"),
                Shape::Shell { inner, outer } => format!("shell {cx} {cy} {cz} {inner} {outer}"),
            };
            let _ = writeln!(s, "phantom.structure.{} = {shape} {}", st.channel, st.intensity);
        }
        let f = &self.field;
        let _ = writeln!(s, "field.amplitude = {}", f.amplitude);
        let _ = writeln!(s, "field.smoothness = {}", f.smoothness);
        let _ = writeln!(s, "field.seed = {}", f.seed);
        let r = &self.registration;
        let _ = writeln!(s, "registration.levels = {}", r.levels);
        let _ = writeln!(s, "registration.iterations = {}", r.iterations);
        let _ = writeln!(s, "registration.step = {}", r.step);
        let _ = writeln!(s, "registration.similarity = {}", r.similarity);
        let _ = writeln!(s, "registration.ncc_window = {}", r.ncc_window);
        let _ = writeln!(s, "registration.weight_sim = {}", r.weight_sim);
        let _ = writeln!(s, "registration.weight_diffusion = {}", r.weight_diffusion);
        let _ = writeln!(s, "registration.weight_dice = {}", r.weight_dice);
        let _ = writeln!(s, "registration.smoothing = {}", r.smoothing);
        let _ = writeln!(s, "registration.seed = {}", r.seed);
        let p = &self.policy;
        let _ = writeln!(s, "policy.mode = {}", p.mode);
        let _ = writeln!(s, "policy.dropout_rate = {}", p.dropout_rate);
        let _ = writeln!(s, "policy.init_sigma = {}", p.init_sigma);
        let _ = writeln!(s, "policy.samples = {}", p.samples);
        let h = &self.head;
        let _ = writeln!(s, "head.hidden_channels = {}", h.hidden_channels);
        let _ = writeln!(s, "head.leaky_slope = {}", h.leaky_slope);
        let names: Vec<&str> = h.features.iter().map(|k| k.name()).collect();
        let _ = writeln!(s, "head.features = {}", names.join(","));
        let t = &self.train;
        let _ = writeln!(s, "train.beta = {}", t.beta);
        let _ = writeln!(s, "train.epochs = {}", t.epochs);
        let _ = writeln!(s, "train.learning_rate = {}", t.learning_rate);
        let _ = writeln!(s, "train.beta1 = {}", t.beta1);
        let _ = writeln!(s, "train.beta2 = {}", t.beta2);
        let _ = writeln!(s, "train.epsilon = {}", t.epsilon);
        let _ = writeln!(s, "train.seed = {}", t.seed);
        let _ = writeln!(s, "train.loss_form = {}", t.loss_form);
        let _ = writeln!(s, "metrics.mask = {}", self.metrics.mask);
        s
    }
}
