//! `RVOL1` volume files and PGM slice export.
//!
//! ```text
//! RVOL1
//! dims nx ny nz
//! spacing sx sy sz
//! channels N
//! kind scalar|label|field|uncertainty:<kind>
//! dtype f32le
//!
//! <4 * N * nx * ny * nz bytes, x fastest, channel-major>
//! ```
//! Values are stored as 32-bit floats; writing rounds to the nearest f32.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::uncertainty::{UncertaintyKind, UncertaintyMap};
use crate::volume::{DisplacementField, GridSpec, LabelVolume, ScalarVolume};

pub const VOLUME_MAGIC: &str = "RVOL1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeKind {
    Scalar,
    Label,
    Field,
    Uncertainty(UncertaintyKind),
}

impl fmt::Display for VolumeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VolumeKind::Scalar => f.write_str("scalar"),
            VolumeKind::Label => f.write_str("label"),
            VolumeKind::Field => f.write_str("field"),
            VolumeKind::Uncertainty(k) => write!(f, "uncertainty:{k}"),
        }
    }
}

impl std::str::FromStr for VolumeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scalar" => Ok(VolumeKind::Scalar),
            "label" => Ok(VolumeKind::Label),
            "field" => Ok(VolumeKind::Field),
            other => match other.strip_prefix("uncertainty:") {
                Some(k) => Ok(VolumeKind::Uncertainty(k.parse()?)),
                None => Err(Error::Parse(format!("unknown volume kind '{other}'"))),
            },
        }
    }
}

/// Any volume that can live in an `RVOL1` file.
#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Scalar(ScalarVolume),
    Label(LabelVolume),
    Field(DisplacementField),
    Uncertainty(UncertaintyMap),
}

impl Volume {
    pub fn kind(&self) -> VolumeKind {
        match self {
            Volume::Scalar(_) => VolumeKind::Scalar,
            Volume::Label(_) => VolumeKind::Label,
            Volume::Field(_) => VolumeKind::Field,
            Volume::Uncertainty(u) => VolumeKind::Uncertainty(u.kind()),
        }
    }

    pub fn grid(&self) -> &GridSpec {
        match self {
            Volume::Scalar(v) => v.grid(),
            Volume::Label(v) => v.grid(),
            Volume::Field(v) => v.grid(),
            Volume::Uncertainty(v) => v.grid(),
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            Volume::Scalar(_) => 1,
            Volume::Label(v) => v.channels(),
            Volume::Field(_) => 3,
            Volume::Uncertainty(v) => v.channels(),
        }
    }

    /// Channel `c` as a slice of `grid().len()` values.
    pub fn channel(&self, c: usize) -> &[f64] {
        match self {
            Volume::Scalar(v) => v.data(),
            Volume::Label(v) => v.channel(c),
            Volume::Field(v) => v.component(c),
            Volume::Uncertainty(v) => v.channel(c),
        }
    }

    fn kind_error(&self, wanted: &str) -> Error {
        Error::KindMismatch(format!("expected {wanted} volume, found {}", self.kind()))
    }

    pub fn into_scalar(self) -> Result<ScalarVolume> {
        match self {
            Volume::Scalar(v) => Ok(v),
            other => Err(other.kind_error("scalar")),
        }
    }

    pub fn into_labels(self) -> Result<LabelVolume> {
        match self {
            Volume::Label(v) => Ok(v),
            other => Err(other.kind_error("label")),
        }
    }

    pub fn into_field(self) -> Result<DisplacementField> {
        match self {
            Volume::Field(v) => Ok(v),
            other => Err(other.kind_error("field")),
        }
    }

    pub fn into_uncertainty(self) -> Result<UncertaintyMap> {
        match self {
            Volume::Uncertainty(v) => Ok(v),
            other => Err(other.kind_error("uncertainty")),
        }
    }
}

impl From<ScalarVolume> for Volume {
    fn from(v: ScalarVolume) -> Self {
        Volume::Scalar(v)
    }
}

impl From<LabelVolume> for Volume {
    fn from(v: LabelVolume) -> Self {
        Volume::Label(v)
    }
}

impl From<DisplacementField> for Volume {
    fn from(v: DisplacementField) -> Self {
        Volume::Field(v)
    }
}

impl From<UncertaintyMap> for Volume {
    fn from(v: UncertaintyMap) -> Self {
        Volume::Uncertainty(v)
    }
}

pub fn encode_volume(volume: &Volume) -> Vec<u8> {
    let grid = volume.grid();
    let [nx, ny, nz] = grid.dims();
    let [sx, sy, sz] = grid.spacing();
    let channels = volume.channels();
    let header = format!(
        "{VOLUME_MAGIC}\ndims {nx} {ny} {nz}\nspacing {sx} {sy} {sz}\nchannels {channels}\nkind {}\ndtype f32le\n\n",
        volume.kind()
    );
    let mut out = Vec::with_capacity(header.len() + 4 * channels * grid.len());
    out.extend_from_slice(header.as_bytes());
    for c in 0..channels {
        for v in volume.channel(c) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

fn header_err(line: usize, message: impl Into<String>) -> Error {
    Error::Header {
        line,
        message: message.into(),
    }
}

fn parse_fields<T: std::str::FromStr>(line_no: usize, line: &str, key: &str, count: usize) -> Result<Vec<T>> {
    let rest = line
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| header_err(line_no, format!("expected '{key} ...', found '{line}'")))?;
    let parts: Vec<&str> = rest.split_whitespace().collect();
    if parts.len() != count {
        return Err(header_err(line_no, format!("'{key}' needs {count} values, found {}", parts.len())));
    }
    parts
        .iter()
        .map(|p| p.parse::<T>().map_err(|_| header_err(line_no, format!("invalid {key} value '{p}'"))))
        .collect()
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let mut pos = 0;
    let mut lines = Vec::with_capacity(7);
    while lines.len() < 7 {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| match lines.len() {
                0 => Error::BadMagic { expected: VOLUME_MAGIC },
                n => header_err(n + 1, "unexpected end of header"),
            })?;
        let line = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| match lines.len() {
            0 => Error::BadMagic { expected: VOLUME_MAGIC },
            n => header_err(n + 1, "header is not valid text"),
        })?;
        if lines.is_empty() && line != VOLUME_MAGIC {
            return Err(Error::BadMagic { expected: VOLUME_MAGIC });
        }
        lines.push(line);
        pos += end + 1;
    }
    let dims: Vec<usize> = parse_fields(2, lines[1], "dims", 3)?;
    let spacing: Vec<f64> = parse_fields(3, lines[2], "spacing", 3)?;
    let channels: usize = parse_fields(4, lines[3], "channels", 1)?[0];
    let kind: VolumeKind = parse_fields::<String>(5, lines[4], "kind", 1)?[0]
        .parse()
        .map_err(|e: Error| header_err(5, e.to_string()))?;
    let dtype: String = parse_fields::<String>(6, lines[5], "dtype", 1)?.remove(0);
    if dtype != "f32le" {
        return Err(header_err(6, format!("unsupported dtype '{dtype}'")));
    }
    if !lines[6].is_empty() {
        return Err(header_err(7, "expected blank line after header"));
    }
    let grid = GridSpec::new([dims[0], dims[1], dims[2]], [spacing[0], spacing[1], spacing[2]])
        .map_err(|e| header_err(2, e.to_string()))?;
    if channels == 0 {
        return Err(header_err(4, "channels must be >= 1"));
    }
    let expected_channels = match kind {
        VolumeKind::Scalar => Some(1),
        VolumeKind::Field => Some(3),
        VolumeKind::Uncertainty(k) if !k.is_segmentation() => Some(1),
        _ => None,
    };
    if let Some(e) = expected_channels.filter(|&e| e != channels) {
        return Err(header_err(4, format!("kind {kind} requires {e} channel(s), found {channels}")));
    }

    let payload = &bytes[pos..];
    let expected = 4 * channels * grid.len();
    if payload.len() != expected {
        return Err(Error::PayloadLength {
            expected,
            actual: payload.len(),
        });
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok(match kind {
        VolumeKind::Scalar => Volume::Scalar(ScalarVolume::new(grid, data)?),
        VolumeKind::Label => Volume::Label(LabelVolume::new(grid, channels, data)?),
        VolumeKind::Field => {
            let n = grid.len();
            let (x, rest) = data.split_at(n);
            let (y, z) = rest.split_at(n);
            Volume::Field(DisplacementField::new(grid, [x.to_vec(), y.to_vec(), z.to_vec()])?)
        }
        VolumeKind::Uncertainty(k) => Volume::Uncertainty(UncertaintyMap::new(grid, k, channels, data)?),
    })
}

pub fn write_volume(path: &Path, volume: &Volume) -> Result<()> {
    std::fs::write(path, encode_volume(volume)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

/// Min-max windowed 8-bit grayscale (PGM P5) image of slice `z`.
pub fn encode_pgm_slice(data: &[f64], grid: &GridSpec, z: usize) -> Result<Vec<u8>> {
    let [nx, ny, nz] = grid.dims();
    if data.len() != grid.len() {
        return Err(Error::LengthMismatch {
            expected: grid.len(),
            actual: data.len(),
        });
    }
    if z >= nz {
        return Err(Error::OutOfRange {
            x: 0,
            y: 0,
            z,
            dims: grid.dims(),
        });
    }
    let slice = &data[nx * ny * z..nx * ny * (z + 1)];
    let lo = slice.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = slice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{nx} {ny}\n255\n").into_bytes();
    out.extend(slice.iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn f32_values(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-5.0f32..5.0) as f64).collect()
    }

    #[test]
    fn scalar_round_trip_bit_identical() {
        let grid = GridSpec::new([8, 8, 8], [1.0, 1.5, 2.0]).unwrap();
        let v = Volume::Scalar(ScalarVolume::new(grid, f32_values(512, 1)).unwrap());
        let bytes = encode_volume(&v);
        let back = decode_volume(&bytes).unwrap();
        assert_eq!(back, v);
        assert_eq!(encode_volume(&back), bytes);
    }

    #[test]
    fn header_layout() {
        let grid = GridSpec::new([2, 2, 3], [1.0, 0.5, 2.0]).unwrap();
        let v = Volume::Uncertainty(
            UncertaintyMap::new(grid, UncertaintyKind::EpistemicSeg, 2, vec![std::f64::consts::LN_2; 24]).unwrap(),
        );
        let bytes = encode_volume(&v);
        let text = String::from_utf8_lossy(&bytes[..bytes.len() - 96]);
        assert_eq!(
            text,
            "RVOL1\ndims 2 2 3\nspacing 1 0.5 2\nchannels 2\nkind uncertainty:epistemic\ndtype f32le\n\n"
        );
        assert!(decode_volume(&bytes).is_ok());
    }

    #[test]
    fn truncated_payload() {
        let grid = GridSpec::cube([4, 4, 4]).unwrap();
        let bytes = encode_volume(&Volume::Scalar(ScalarVolume::filled(grid, 1.0).unwrap()));
        match decode_volume(&bytes[..bytes.len() - 3]) {
            Err(Error::PayloadLength { expected, actual }) => assert_eq!((expected, actual), (256, 253)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn label_out_of_range_names_voxel() {
        let mut bytes = b"RVOL1\ndims 2 2 2\nspacing 1 1 1\nchannels 1\nkind label\ndtype f32le\n\n".to_vec();
        for v in [0.0f32, 1.0, 1.5, 0.0, 0.0, 0.0, 0.0, 0.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        match decode_volume(&bytes) {
            Err(Error::LabelRange { index, value }) => assert_eq!((index, value), (2, 1.5)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_headers() {
        assert!(matches!(decode_volume(b"RVOL2\n"), Err(Error::BadMagic { .. })));
        let bad = b"RVOL1\ndims 2 2\nspacing 1 1 1\nchannels 1\nkind scalar\ndtype f32le\n\n";
        assert!(matches!(decode_volume(bad), Err(Error::Header { line: 2, .. })));
        let bad = b"RVOL1\ndims 2 2 2\nspacing 1 1 1\nchannels 2\nkind field\ndtype f32le\n\n";
        assert!(matches!(decode_volume(bad), Err(Error::Header { line: 4, .. })));
        let bad = b"RVOL1\ndims 2 2 2\nspacing 1 1 1\nchannels 1\nkind scalar\ndtype f64le\n\n";
        assert!(matches!(decode_volume(bad), Err(Error::Header { line: 6, .. })));
        let mut nan = b"RVOL1\ndims 2 2 2\nspacing 1 1 1\nchannels 1\nkind scalar\ndtype f32le\n\n".to_vec();
        nan.extend_from_slice(&f32::NAN.to_le_bytes());
        nan.extend_from_slice(&[0u8; 28]);
        assert!(matches!(decode_volume(&nan), Err(Error::NonFinite { index: 0 })));
    }

    #[test]
    fn field_round_trip() {
        let grid = GridSpec::cube([3, 2, 2]).unwrap();
        let f = DisplacementField::from_fn(grid, |x, y, z| [x as f64 * 0.5, -(y as f64), z as f64 + 0.25]).unwrap();
        let v = Volume::Field(f);
        assert_eq!(decode_volume(&encode_volume(&v)).unwrap(), v);
        assert!(decode_volume(&encode_volume(&v)).unwrap().into_scalar().is_err());
    }

    #[test]
    fn pgm_window() {
        let grid = GridSpec::cube([2, 2, 2]).unwrap();
        let data = vec![0.0, 1.0, 2.0, 4.0, 9.0, 9.0, 9.0, 9.0];
        let pgm = encode_pgm_slice(&data, &grid, 0).unwrap();
        assert_eq!(&pgm[..11], b"P5\n2 2\n255\n");
        assert_eq!(&pgm[11..], &[0, 64, 128, 255]);
        assert_eq!(&encode_pgm_slice(&data, &grid, 1).unwrap()[11..], &[0, 0, 0, 0]);
        assert!(encode_pgm_slice(&data, &grid, 2).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(nx in 2usize..6, ny in 2usize..6, nz in 2usize..6, seed in any::<u64>()) {
            let grid = GridSpec::cube([nx, ny, nz]).unwrap();
            let v = Volume::Scalar(ScalarVolume::new(grid, f32_values(grid.len(), seed)).unwrap());
            let bytes = encode_volume(&v);
            prop_assert_eq!(decode_volume(&bytes).unwrap(), v);
        }
    }
}
