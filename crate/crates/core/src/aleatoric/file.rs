//! `RAHD1` parameter file.
//!
//! ```text
//! "RAHD1"                      5 bytes
//! version                      u32 = 1
//! input, hidden, output chans  3 x u32
//! leaky slope                  f32
//! loss form                    u32 (0 standard, 1 printed-form)
//! feature count, codes         u32, count x u32
//! conv0.w conv0.b bn0.{gamma,beta,running_mean,running_var}
//! conv1.* bn1.* conv2.* bn2.* conv3.w conv3.b     f32 each
//! ```
//! Integers and floats are little-endian. Conv weights are ordered
//! `[out][in][kz][ky][kx]`.

use std::path::Path;

use crate::error::{Error, Result};

use super::features::{validate_kinds, FeatureKind};
use super::loss::LossForm;
use super::network::{HeadConfig, HeadParameters};

pub const HEAD_MAGIC: &[u8; 5] = b"RAHD1";
const VERSION: u32 = 1;

/// Parameters plus the metadata needed to run them on new data.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadModel {
    pub params: HeadParameters,
    pub features: Vec<FeatureKind>,
    pub loss_form: LossForm,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

pub fn encode_head(model: &HeadModel) -> Vec<u8> {
    let p = &model.params;
    let cfg = p.config;
    let mut out = Vec::with_capacity(64 + 4 * p.parameter_count());
    out.extend_from_slice(HEAD_MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, cfg.input_channels as u32);
    put_u32(&mut out, cfg.hidden_channels as u32);
    put_u32(&mut out, cfg.output_channels as u32);
    out.extend_from_slice(&(cfg.leaky_slope as f32).to_le_bytes());
    put_u32(&mut out, match model.loss_form {
        LossForm::Standard => 0,
        LossForm::Printed => 1,
    });
    put_u32(&mut out, model.features.len() as u32);
    for k in &model.features {
        put_u32(&mut out, k.code());
    }
    for (l, conv) in p.convs.iter().enumerate() {
        put_f32s(&mut out, &conv.weights);
        put_f32s(&mut out, &conv.bias);
        if let Some(bn) = p.norms.get(l) {
            put_f32s(&mut out, &bn.gamma);
            put_f32s(&mut out, &bn.beta);
            put_f32s(&mut out, &bn.running_mean);
            put_f32s(&mut out, &bn.running_var);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::PayloadLength {
                expected: self.pos + n,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f64> {
        let v = f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64;
        if !v.is_finite() {
            return Err(Error::NonFinite { index: self.pos / 4 - 1 });
        }
        Ok(v)
    }

    fn fill(&mut self, dst: &mut [f64]) -> Result<()> {
        for d in dst {
            *d = self.f32()?;
        }
        Ok(())
    }
}

pub fn decode_head(bytes: &[u8]) -> Result<HeadModel> {
    if !bytes.starts_with(HEAD_MAGIC) {
        return Err(Error::BadMagic { expected: "RAHD1" });
    }
    let mut r = Reader { bytes, pos: HEAD_MAGIC.len() };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Parse(format!("unsupported head file version {version}")));
    }
    let config = HeadConfig {
        input_channels: r.u32()? as usize,
        hidden_channels: r.u32()? as usize,
        output_channels: r.u32()? as usize,
        leaky_slope: r.f32()?,
    };
    let loss_form = match r.u32()? {
        0 => LossForm::Standard,
        1 => LossForm::Printed,
        other => return Err(Error::Parse(format!("unknown loss form code {other}"))),
    };
    let count = r.u32()? as usize;
    if count != config.input_channels {
        return Err(Error::ChannelMismatch {
            expected: config.input_channels,
            actual: count,
        });
    }
    let features = (0..count)
        .map(|_| {
            let code = r.u32()?;
            FeatureKind::from_code(code).ok_or_else(|| Error::Parse(format!("unknown feature code {code}")))
        })
        .collect::<Result<Vec<_>>>()?;
    validate_kinds(&features)?;
    let mut params = HeadParameters::zeros(config)?;
    let HeadParameters { convs, norms, .. } = &mut params;
    for (l, conv) in convs.iter_mut().enumerate() {
        r.fill(&mut conv.weights)?;
        r.fill(&mut conv.bias)?;
        if let Some(bn) = norms.get_mut(l) {
            r.fill(&mut bn.gamma)?;
            r.fill(&mut bn.beta)?;
            r.fill(&mut bn.running_mean)?;
            r.fill(&mut bn.running_var)?;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::PayloadLength {
            expected: r.pos,
            actual: bytes.len(),
        });
    }
    params.ensure_finite()?;
    Ok(HeadModel {
        params,
        features,
        loss_form,
    })
}

pub fn write_head(path: &Path, model: &HeadModel) -> Result<()> {
    std::fs::write(path, encode_head(model)).map_err(|e| Error::io(path, e))
}

pub fn read_head(path: &Path) -> Result<HeadModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_head(&bytes)
}
