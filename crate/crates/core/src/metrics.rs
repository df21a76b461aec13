//! Evaluation metrics: Dice overlap, Jacobian folding, non-diffeomorphic
//! volume, label-propagation error and voxelwise Pearson correlation.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::filters::gradient;
use crate::uncertainty::{
    appearance_uncertainty, combine_seg_uncertainty, epistemic_seg_uncertainty, transformation_uncertainty,
    UncertaintyKind, UncertaintyMap,
};
use crate::volume::{DisplacementField, GridSpec, LabelVolume, SampleSet, ScalarVolume};
use crate::warp::{argmax_discretize, mean_warped_labels};

#[derive(Debug, Clone, PartialEq)]
pub struct DiceReport {
    pub per_structure: Vec<f64>,
    pub mean: f64,
}

/// Per-channel `2|A ∩ B| / (|A| + |B|)` on binary volumes; two empty
/// masks score 1.
pub fn dice(a: &LabelVolume, b: &LabelVolume) -> Result<DiceReport> {
    a.ensure_compatible(b)?;
    a.ensure_binary()?;
    b.ensure_binary()?;
    let per_structure: Vec<f64> = (0..a.channels())
        .map(|c| {
            let (mut inter, mut na, mut nb) = (0.0, 0.0, 0.0);
            for (x, y) in a.channel(c).iter().zip(b.channel(c)) {
                inter += x * y;
                na += x;
                nb += y;
            }
            if na + nb == 0.0 {
                1.0
            } else {
                2.0 * inter / (na + nb)
            }
        })
        .collect();
    let mean = per_structure.iter().sum::<f64>() / per_structure.len() as f64;
    Ok(DiceReport { per_structure, mean })
}

/// Voxelwise `det(I + ∇u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianMap {
    grid: GridSpec,
    det: Vec<f64>,
}

impl JacobianMap {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.det
    }

    pub fn min(&self) -> f64 {
        self.det.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn percent_nonpositive(&self) -> f64 {
        let bad = self.det.iter().filter(|&&d| d <= 0.0).count();
        100.0 * bad as f64 / self.det.len() as f64
    }
}

pub(crate) fn det3(m: [[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Central differences in the interior, one-sided differences at faces.
pub fn jacobian_determinant(field: &DisplacementField) -> JacobianMap {
    let grid = *field.grid();
    let dims = grid.dims();
    // grads[c][a] = d u_c / d x_a
    let grads = [0, 1, 2].map(|c| gradient(field.component(c), dims));
    let det = (0..grid.len())
        .map(|i| {
            let mut m = [[0.0; 3]; 3];
            for c in 0..3 {
                for a in 0..3 {
                    m[c][a] = grads[c][a][i] + if a == c { 1.0 } else { 0.0 };
                }
            }
            det3(m)
        })
        .collect();
    JacobianMap { grid, det }
}

/// Percentage of voxels with `det(J) <= 0`.
pub fn percent_nonpositive_jacobian(field: &DisplacementField) -> f64 {
    jacobian_determinant(field).percent_nonpositive()
}

/// Kuhn decomposition of the unit cube: each tetrahedron follows the
/// monotone corner path `000 -> e_a -> e_a + e_b -> 111` for the axis order
/// `(a, b, c)`. The sign makes every tetrahedron positive under the
/// identity map.
pub const KUHN_PATHS: [([usize; 3], f64); 6] = [
    ([0, 1, 2], 1.0),
    ([1, 2, 0], 1.0),
    ([2, 0, 1], 1.0),
    ([0, 2, 1], -1.0),
    ([2, 1, 0], -1.0),
    ([1, 0, 2], -1.0),
];

/// Signed volumes of the six Kuhn tetrahedra of the cell with lower corner
/// `(x, y, z)`, after mapping by `phi = Id + u`.
pub fn cell_tetra_volumes(field: &DisplacementField, x: usize, y: usize, z: usize) -> [f64; 6] {
    let grid = field.grid();
    let phi = |off: [usize; 3]| -> [f64; 3] {
        let (px, py, pz) = (x + off[0], y + off[1], z + off[2]);
        let u = field.at(grid.index(px, py, pz));
        [px as f64 + u[0], py as f64 + u[1], pz as f64 + u[2]]
    };
    let mut out = [0.0; 6];
    for (t, (order, sign)) in KUHN_PATHS.iter().enumerate() {
        let mut corner = [0usize; 3];
        let a = phi(corner);
        corner[order[0]] = 1;
        let b = phi(corner);
        corner[order[1]] = 1;
        let c = phi(corner);
        let d = phi([1, 1, 1]);
        let m = [
            [b[0] - a[0], c[0] - a[0], d[0] - a[0]],
            [b[1] - a[1], c[1] - a[1], d[1] - a[1]],
            [b[2] - a[2], c[2] - a[2], d[2] - a[2]],
        ];
        out[t] = sign * det3(m) / 6.0;
    }
    out
}

/// Percentage of total cell volume that the map turns inside out.
pub fn non_diffeomorphic_volume(field: &DisplacementField) -> f64 {
    let [nx, ny, nz] = field.grid().dims();
    let mut negative = 0.0;
    for z in 0..nz - 1 {
        for y in 0..ny - 1 {
            for x in 0..nx - 1 {
                for v in cell_tetra_volumes(field, x, y, z) {
                    if v < 0.0 {
                        negative -= v;
                    }
                }
            }
        }
    }
    let cells = ((nx - 1) * (ny - 1) * (nz - 1)) as f64;
    100.0 * negative / cells
}

/// Squared error between propagated and target labels, one channel per
/// structure.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMap {
    grid: GridSpec,
    channels: usize,
    data: Vec<f64>,
}

impl ErrorMap {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
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

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

pub fn label_propagation_error(
    labels_moving: &LabelVolume,
    labels_fixed: &LabelVolume,
    samples: &SampleSet,
) -> Result<ErrorMap> {
    labels_moving.ensure_compatible(labels_fixed)?;
    let mean = mean_warped_labels(labels_moving, samples)?;
    Ok(error_against(&mean, labels_fixed))
}

pub(crate) fn error_against(propagated: &LabelVolume, target: &LabelVolume) -> ErrorMap {
    let data = propagated
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .collect();
    ErrorMap {
        grid: *propagated.grid(),
        channels: propagated.channels(),
        data,
    }
}

/// Pearson correlation over the selected voxels.
///
/// Zero variance in either input is reported as
/// [`Error::DegenerateCorrelation`], never as 0.
pub fn pearson_r(u: &[f64], e: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    if u.len() != e.len() {
        return Err(Error::LengthMismatch {
            expected: u.len(),
            actual: e.len(),
        });
    }
    if let Some(m) = mask {
        if m.len() != u.len() {
            return Err(Error::LengthMismatch {
                expected: u.len(),
                actual: m.len(),
            });
        }
    }
    let selected = |i: usize| mask.is_none_or(|m| m[i]);
    let (mut n, mut su, mut se) = (0usize, 0.0, 0.0);
    for i in (0..u.len()).filter(|&i| selected(i)) {
        n += 1;
        su += u[i];
        se += e[i];
    }
    if n < 2 {
        return Err(Error::DegenerateCorrelation(format!("only {n} voxels selected")));
    }
    let (mu, me) = (su / n as f64, se / n as f64);
    let (mut cov, mut vu, mut ve) = (0.0, 0.0, 0.0);
    for i in (0..u.len()).filter(|&i| selected(i)) {
        let (du, de) = (u[i] - mu, e[i] - me);
        cov += du * de;
        vu += du * du;
        ve += de * de;
    }
    if vu == 0.0 || ve == 0.0 {
        return Err(Error::DegenerateCorrelation(
            "zero variance in uncertainty or error".into(),
        ));
    }
    Ok((cov / (vu.sqrt() * ve.sqrt())).clamp(-1.0, 1.0))
}

/// Region over which correlations are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskPolicy {
    #[default]
    WholeVolume,
    /// Per structure: union of propagated and target foreground, dilated by
    /// a cube of the given radius.
    DilatedForeground { radius: usize },
}

impl fmt::Display for MaskPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskPolicy::WholeVolume => f.write_str("whole"),
            MaskPolicy::DilatedForeground { radius } => write!(f, "dilated:{radius}"),
        }
    }
}

impl FromStr for MaskPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "whole" {
            return Ok(MaskPolicy::WholeVolume);
        }
        if let Some(r) = s.strip_prefix("dilated:") {
            let radius = r
                .parse()
                .map_err(|_| Error::Parse(format!("bad dilation radius in {s:?}")))?;
            return Ok(MaskPolicy::DilatedForeground { radius });
        }
        Err(Error::Parse(format!("unknown mask policy {s:?}")))
    }
}

fn dilate(mask: &[bool], dims: [usize; 3], radius: usize) -> Vec<bool> {
    let as_f: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    crate::filters::box_sum(&as_f, dims, radius)
        .into_iter()
        .map(|v| v > 0.5)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    pub kind: UncertaintyKind,
    /// `None` marks a degenerate correlation.
    pub per_structure: Vec<Option<f64>>,
    /// Mean over the non-degenerate structures.
    pub mean: Option<f64>,
    pub voxels: Vec<usize>,
    pub mask: MaskPolicy,
}

impl CorrelationReport {
    fn from_parts(kind: UncertaintyKind, per_structure: Vec<Option<f64>>, voxels: Vec<usize>, mask: MaskPolicy) -> Self {
        let valid: Vec<f64> = per_structure.iter().flatten().copied().collect();
        let mean = (!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64);
        Self {
            kind,
            per_structure,
            mean,
            voxels,
            mask,
        }
    }
}

/// Correlates one uncertainty map with every structure's error channel.
/// Single-channel maps are reused unchanged for each structure.
pub fn correlate(
    map: &UncertaintyMap,
    error: &ErrorMap,
    masks: Option<&[Vec<bool>]>,
    policy: MaskPolicy,
) -> Result<CorrelationReport> {
    map.grid().ensure_same(error.grid())?;
    if map.channels() != 1 && map.channels() != error.channels() {
        return Err(Error::ChannelMismatch {
            expected: error.channels(),
            actual: map.channels(),
        });
    }
    let mut per_structure = Vec::with_capacity(error.channels());
    let mut voxels = Vec::with_capacity(error.channels());
    for c in 0..error.channels() {
        let u = if map.channels() == 1 { map.channel(0) } else { map.channel(c) };
        let mask = masks.map(|m| m[c].as_slice());
        voxels.push(mask.map_or(u.len(), |m| m.iter().filter(|&&b| b).count()));
        per_structure.push(match pearson_r(u, error.channel(c), mask) {
            Ok(r) => Some(r),
            Err(Error::DegenerateCorrelation(_)) => None,
            Err(e) => return Err(e),
        });
    }
    Ok(CorrelationReport::from_parts(map.kind(), per_structure, voxels, policy))
}

/// All metrics for one registration experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub dice_initial: DiceReport,
    pub dice: DiceReport,
    pub percent_nonpositive_jacobian: f64,
    pub percent_ndv: f64,
    pub correlations: Vec<CorrelationReport>,
}

impl ReportBundle {
    pub fn correlation(&self, kind: UncertaintyKind) -> Option<&CorrelationReport> {
        self.correlations.iter().find(|c| c.kind == kind)
    }
}

/// Runs the full evaluation: Dice on the argmax of the mean propagated
/// labels, folding metrics averaged over samples, and the correlation of
/// each uncertainty kind with the label-propagation error.
pub fn evaluate_all(
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    labels_moving: &LabelVolume,
    labels_fixed: &LabelVolume,
    samples: &SampleSet,
    aleatoric: &UncertaintyMap,
    mask: MaskPolicy,
) -> Result<ReportBundle> {
    labels_moving.ensure_compatible(labels_fixed)?;
    fixed.grid().ensure_same(samples.grid())?;
    let mean = mean_warped_labels(labels_moving, samples)?;
    let discrete = argmax_discretize(&mean, None)?;
    let dice_initial = dice(&argmax_discretize(labels_moving, None)?, labels_fixed)?;
    let dice_after = dice(&discrete, labels_fixed)?;

    let t = samples.len() as f64;
    let jac = samples.iter().map(percent_nonpositive_jacobian).sum::<f64>() / t;
    let ndv = samples.iter().map(non_diffeomorphic_volume).sum::<f64>() / t;

    let error = error_against(&mean, labels_fixed);
    let masks: Option<Vec<Vec<bool>>> = match mask {
        MaskPolicy::WholeVolume => None,
        MaskPolicy::DilatedForeground { radius } => Some(
            (0..labels_fixed.channels())
                .map(|c| {
                    let union: Vec<bool> = discrete
                        .channel(c)
                        .iter()
                        .zip(labels_fixed.channel(c))
                        .map(|(a, b)| *a > 0.0 || *b > 0.0)
                        .collect();
                    dilate(&union, fixed.grid().dims(), radius)
                })
                .collect(),
        ),
    };

    let epi = epistemic_seg_uncertainty(labels_moving, samples)?;
    let maps = [
        transformation_uncertainty(samples)?,
        appearance_uncertainty(moving, fixed, samples)?,
        combine_seg_uncertainty(&epi, aleatoric)?,
        epi,
    ];
    let mut correlations = Vec::with_capacity(5);
    for kind in UncertaintyKind::ALL {
        let map = if kind == UncertaintyKind::AleatoricSeg {
            aleatoric
        } else {
            maps.iter().find(|m| m.kind() == kind).expect("all kinds computed")
        };
        correlations.push(correlate(map, &error, masks.as_deref(), mask)?);
    }
    Ok(ReportBundle {
        dice_initial,
        dice: dice_after,
        percent_nonpositive_jacobian: jac,
        percent_ndv: ndv,
        correlations,
    })
}

/// Version tag written as the first line of every metrics CSV.
pub const REPORT_SCHEMA: &str = "# regseg-metrics v1";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "degenerate".to_string(), |x| x.to_string())
}

/// Writes the report as CSV with columns `structure,metric,value`.
///
/// `structure` is a channel index, `mean`, or `all` for volume-wide rows.
/// Metrics: `dice_initial`, `dice`, `jac_nonpos_pct`, `ndv_pct`,
/// `r_<kind>` (value or `degenerate`), `voxels_<kind>` and `mask_<kind>`.
pub fn write_report_csv<W: Write>(report: &ReportBundle, mut out: W) -> Result<()> {
    let io = |e: std::io::Error| Error::io("<csv>", e);
    writeln!(out, "{REPORT_SCHEMA}").map_err(io)?;
    let mut w = csv::Writer::from_writer(out);
    let mut row = |s: &str, m: &str, v: String| -> Result<()> {
        w.write_record([s, m, v.as_str()])
            .map_err(|e| Error::Parse(format!("csv write: {e}")))
    };
    row("structure", "metric", "value".into())?;
    for (name, d) in [("dice_initial", &report.dice_initial), ("dice", &report.dice)] {
        for (c, v) in d.per_structure.iter().enumerate() {
            row(&c.to_string(), name, v.to_string())?;
        }
        row("mean", name, d.mean.to_string())?;
    }
    row("all", "jac_nonpos_pct", report.percent_nonpositive_jacobian.to_string())?;
    row("all", "ndv_pct", report.percent_ndv.to_string())?;
    for cr in &report.correlations {
        let kind = cr.kind.name();
        for (c, r) in cr.per_structure.iter().enumerate() {
            row(&c.to_string(), &format!("r_{kind}"), fmt_opt(*r))?;
            row(&c.to_string(), &format!("voxels_{kind}"), cr.voxels[c].to_string())?;
        }
        row("mean", &format!("r_{kind}"), fmt_opt(cr.mean))?;
        row("all", &format!("mask_{kind}"), cr.mask.to_string())?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

/// Parses a CSV produced by [`write_report_csv`].
pub fn read_report_csv<R: Read>(mut input: R) -> Result<ReportBundle> {
    let mut text = String::new();
    input
        .read_to_string(&mut text)
        .map_err(|e| Error::io("<csv>", e))?;
    let body = text
        .strip_prefix(REPORT_SCHEMA)
        .and_then(|rest| rest.strip_prefix('\n'))
        .ok_or_else(|| Error::Parse(format!("missing schema line {REPORT_SCHEMA:?}")))?;
    let mut reader = csv::Reader::from_reader(body.as_bytes());

    let bad = |msg: String| Error::Parse(msg);
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Parse(format!("bad number {s:?}"))) };
    let opt = |s: &str| -> Result<Option<f64>> {
        if s == "degenerate" {
            Ok(None)
        } else {
            num(s).map(Some)
        }
    };

    let mut dice_initial = DiceReport { per_structure: vec![], mean: f64::NAN };
    let mut dice_after = dice_initial.clone();
    let mut jac = None;
    let mut ndv = None;
    let mut correlations: Vec<CorrelationReport> = Vec::new();

    for rec in reader.records() {
        let rec = rec.map_err(|e| bad(format!("csv: {e}")))?;
        if rec.len() != 3 {
            return Err(bad(format!("expected 3 columns, got {}", rec.len())));
        }
        let (s, m, v) = (&rec[0], &rec[1], &rec[2]);
        let channel = s.parse::<usize>().ok();
        match m {
            "dice_initial" | "dice" => {
                let d = if m == "dice" { &mut dice_after } else { &mut dice_initial };
                match channel {
                    Some(c) if c == d.per_structure.len() => d.per_structure.push(num(v)?),
                    None if s == "mean" => d.mean = num(v)?,
                    _ => return Err(bad(format!("unexpected dice row {s:?}"))),
                }
            }
            "jac_nonpos_pct" => jac = Some(num(v)?),
            "ndv_pct" => ndv = Some(num(v)?),
            _ => {
                let (field, kind) = m
                    .split_once('_')
                    .ok_or_else(|| bad(format!("unknown metric {m:?}")))?;
                let kind: UncertaintyKind = kind.parse()?;
                let idx = match correlations.iter().position(|c| c.kind == kind) {
                    Some(i) => i,
                    None => {
                        correlations.push(CorrelationReport {
                            kind,
                            per_structure: vec![],
                            mean: None,
                            voxels: vec![],
                            mask: MaskPolicy::WholeVolume,
                        });
                        correlations.len() - 1
                    }
                };
                let cr = &mut correlations[idx];
                match (field, channel) {
                    ("r", Some(c)) if c == cr.per_structure.len() => cr.per_structure.push(opt(v)?),
                    ("r", None) if s == "mean" => cr.mean = opt(v)?,
                    ("voxels", Some(_)) => cr
                        .voxels
                        .push(v.parse().map_err(|_| bad(format!("bad voxel count {v:?}")))?),
                    ("mask", None) => cr.mask = v.parse()?,
                    _ => return Err(bad(format!("unexpected row {s},{m}"))),
                }
            }
        }
    }
    Ok(ReportBundle {
        dice_initial,
        dice: dice_after,
        percent_nonpositive_jacobian: jac.ok_or_else(|| bad("missing jac_nonpos_pct".into()))?,
        percent_ndv: ndv.ok_or_else(|| bad("missing ndv_pct".into()))?,
        correlations,
    })
}
