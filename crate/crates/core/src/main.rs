use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use regseg::aleatoric::{
    predict_aleatoric, read_head, train, write_head, write_loss_history, FeatureStack, HeadConfig, HeadModel,
    TrainingPair,
};
use regseg::config::RunConfig;
use regseg::io::{encode_pgm_slice, read_volume, write_volume, Volume};
use regseg::metrics::{evaluate_all, write_report_csv, MaskPolicy};
use regseg::phantom::make_ground_truth_pair;
use regseg::registration::sample_registrations_detailed;
use regseg::uncertainty::{
    appearance_uncertainty, combine_seg_uncertainty, epistemic_seg_uncertainty, transformation_uncertainty,
    UncertaintyMap,
};
use regseg::warp::{argmax_discretize, warp_labels, warp_scalar, BoundaryPolicy};
use regseg::{DisplacementField, Error, ErrorClass, LabelVolume, Result, SampleSet, ScalarVolume};

#[derive(Parser)]
#[command(name = "regseg", version, about = "Registration and segmentation uncertainty toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (defaults apply when omitted)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Trans,
    Appear,
    Epi,
    Combined,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom pair with a known deformation
    Phantom {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Stochastic registration, writing one field per sample
    Register {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        #[arg(long, requires = "labels_fixed")]
        labels_moving: Option<PathBuf>,
        #[arg(long, requires = "labels_moving")]
        labels_fixed: Option<PathBuf>,
        /// Number of samples (overrides policy.samples)
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Warp a volume by a displacement field
    Warp {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        field: PathBuf,
        /// Treat the input as a label volume
        #[arg(long)]
        labels: bool,
        /// Discretise warped labels to one-hot
        #[arg(long, requires = "labels")]
        argmax: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute an uncertainty map
    Uncertainty {
        #[arg(long, value_enum)]
        kind: KindArg,
        /// Field files or directories holding field_*.rvol
        #[arg(long, num_args = 1..)]
        fields: Vec<PathBuf>,
        #[arg(long)]
        fixed: Option<PathBuf>,
        #[arg(long)]
        moving: Option<PathBuf>,
        #[arg(long)]
        labels_moving: Option<PathBuf>,
        #[arg(long)]
        epistemic: Option<PathBuf>,
        #[arg(long)]
        aleatoric: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the aleatoric head from a manifest of registered pairs
    TrainAleatoric {
        #[command(flatten)]
        common: Common,
        /// CSV with columns fixed,moving,field,labels_moving,labels_fixed
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss history CSV (default: <out>.loss.csv)
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Predict aleatoric variance; needs no label maps
    PredictAleatoric {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dice, folding and uncertainty-error correlations as CSV
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Evaluate every metric (the only mode)
        #[arg(long)]
        all: bool,
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        labels_moving: PathBuf,
        #[arg(long)]
        labels_fixed: PathBuf,
        #[arg(long, num_args = 1..)]
        fields: Vec<PathBuf>,
        /// Aleatoric map; alternatively `--params` predicts it from the first field
        #[arg(long, conflicts_with = "params")]
        aleatoric: Option<PathBuf>,
        #[arg(long)]
        params: Option<PathBuf>,
        /// Overrides metrics.mask (whole | dilated:R)
        #[arg(long)]
        mask: Option<MaskPolicy>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one axial slice as a PGM image
    Plot {
        #[arg(long)]
        map: PathBuf,
        /// Slice selector, `z=K`
        #[arg(long)]
        slice: String,
        #[arg(long, default_value_t = 0)]
        channel: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Files and directories created by the current command, removed on failure.
#[derive(Default)]
struct Outputs {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
}

impl Outputs {
    fn dir(&mut self, dir: &Path) -> Result<()> {
        if !dir.exists() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            self.dirs.push(dir.to_path_buf());
        }
        Ok(())
    }

    fn volume(&mut self, path: &Path, v: impl Into<Volume>) -> Result<()> {
        self.files.push(path.to_path_buf());
        write_volume(path, &v.into())
    }

    fn bytes(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        self.files.push(path.to_path_buf());
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    fn reserve(&mut self, path: &Path) {
        self.files.push(path.to_path_buf());
    }

    fn cleanup(&self) {
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = fs::remove_dir_all(d);
        }
    }
}

fn scalar(path: &Path) -> Result<ScalarVolume> {
    read_volume(path)?.into_scalar()
}

fn labels(path: &Path) -> Result<LabelVolume> {
    read_volume(path)?.into_labels()
}

fn field(path: &Path) -> Result<DisplacementField> {
    read_volume(path)?.into_field()
}

fn uncertainty(path: &Path) -> Result<UncertaintyMap> {
    read_volume(path)?.into_uncertainty()
}

fn need<'a>(arg: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    arg.as_deref().ok_or_else(|| Error::Config {
        line: 0,
        message: format!("--{name} is required for this command"),
    })
}

/// Expands directories to their sorted `field_*.rvol` files.
fn load_samples(paths: &[PathBuf]) -> Result<SampleSet> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("field_") && n.ends_with(".rvol"))
                })
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    SampleSet::new(files.iter().map(|f| field(f)).collect::<Result<_>>()?)
}

fn run(command: Command, out: &mut Outputs) -> Result<()> {
    match command {
        Command::Phantom { common, out_dir } => {
            let cfg = common.load()?;
            let pair = make_ground_truth_pair(&cfg.phantom, &cfg.field_spec())?;
            out.dir(&out_dir)?;
            out.volume(&out_dir.join("fixed.rvol"), pair.fixed)?;
            out.volume(&out_dir.join("moving.rvol"), pair.moving)?;
            out.volume(&out_dir.join("labels_fixed.rvol"), pair.labels_fixed)?;
            out.volume(&out_dir.join("labels_moving.rvol"), pair.labels_moving)?;
            out.volume(&out_dir.join("true_field.rvol"), pair.true_field)?;
        }
        Command::Register {
            common,
            fixed,
            moving,
            labels_moving,
            labels_fixed,
            samples,
            out_dir,
        } => {
            let mut cfg = common.load()?;
            if let Some(t) = samples {
                cfg.policy.samples = t;
            }
            let (f, m) = (scalar(&fixed)?, scalar(&moving)?);
            let lm = labels_moving.as_deref().map(labels).transpose()?;
            let lf = labels_fixed.as_deref().map(labels).transpose()?;
            let runs =
                sample_registrations_detailed(&f, &m, lm.as_ref(), lf.as_ref(), &cfg.registration, &cfg.policy)?;
            out.dir(&out_dir)?;
            let mut log = String::from("# effective configuration\n");
            log.push_str(&cfg.to_text());
            log.push_str("# sample,initial_loss,final_loss,accepted_steps_per_level\n");
            for (i, r) in runs.into_iter().enumerate() {
                let steps: Vec<String> = r.level_log.iter().map(|(_, s, _)| s.to_string()).collect();
                let _ = writeln!(log, "{i},{:e},{:e},{}", r.initial_loss, r.final_loss, steps.join(";"));
                out.volume(&out_dir.join(format!("field_{i:03}.rvol")), r.field)?;
            }
            out.bytes(&out_dir.join("run_log.txt"), log.as_bytes())?;
        }
        Command::Warp {
            input,
            field: field_path,
            labels: is_labels,
            argmax,
            out: dst,
        } => {
            let phi = field(&field_path)?;
            let v: Volume = if is_labels {
                let warped = warp_labels(&labels(&input)?, &phi, BoundaryPolicy::ClampToEdge)?;
                if argmax {
                    argmax_discretize(&warped, None)?.into()
                } else {
                    warped.into()
                }
            } else {
                warp_scalar(&scalar(&input)?, &phi, BoundaryPolicy::ClampToEdge)?.into()
            };
            out.volume(&dst, v)?;
        }
        Command::Uncertainty {
            kind,
            fields,
            fixed,
            moving,
            labels_moving,
            epistemic,
            aleatoric,
            out: dst,
        } => {
            let map = match kind {
                KindArg::Trans => transformation_uncertainty(&load_samples(&fields)?)?,
                KindArg::Appear => appearance_uncertainty(
                    &scalar(need(&moving, "moving")?)?,
                    &scalar(need(&fixed, "fixed")?)?,
                    &load_samples(&fields)?,
                )?,
                KindArg::Epi => {
                    epistemic_seg_uncertainty(&labels(need(&labels_moving, "labels-moving")?)?, &load_samples(&fields)?)?
                }
                KindArg::Combined => combine_seg_uncertainty(
                    &uncertainty(need(&epistemic, "epistemic")?)?,
                    &uncertainty(need(&aleatoric, "aleatoric")?)?,
                )?,
            };
            out.volume(&dst, map)?;
        }
        Command::TrainAleatoric {
            common,
            pairs,
            out: dst,
            loss_csv,
        } => {
            let cfg = common.load()?;
            let manifest = read_manifest(&pairs)?;
            let mut training = Vec::with_capacity(manifest.len());
            for row in &manifest {
                let phi = field(&row[2])?;
                let features = FeatureStack::from_registration(&cfg.head.features, &scalar(&row[1])?, &scalar(&row[0])?, &phi)?;
                let warped = warp_labels(&labels(&row[3])?, &phi, BoundaryPolicy::ClampToEdge)?;
                training.push(TrainingPair::new(features, warped, labels(&row[4])?)?);
            }
            let first = training.first().ok_or_else(|| Error::Parse("manifest lists no pairs".into()))?;
            let head = HeadConfig {
                input_channels: first.features.channels(),
                hidden_channels: cfg.head.hidden_channels,
                output_channels: first.warped_labels.channels(),
                leaky_slope: cfg.head.leaky_slope,
            };
            let outcome = train(&training, head, &cfg.train)?;
            let model = HeadModel {
                params: outcome.params,
                features: cfg.head.features.clone(),
                loss_form: cfg.train.loss_form,
            };
            out.reserve(&dst);
            write_head(&dst, &model)?;
            let loss_path = loss_csv.unwrap_or_else(|| {
                let mut s = dst.clone().into_os_string();
                s.push(".loss.csv");
                s.into()
            });
            out.reserve(&loss_path);
            write_loss_history(&loss_path, &outcome.loss_history)?;
        }
        Command::PredictAleatoric {
            params,
            fixed,
            moving,
            field: field_path,
            out: dst,
        } => {
            let model = read_head(&params)?;
            let features =
                FeatureStack::from_registration(&model.features, &scalar(&moving)?, &scalar(&fixed)?, &field(&field_path)?)?;
            out.volume(&dst, predict_aleatoric(&model.params, &features)?)?;
        }
        Command::Evaluate {
            common,
            all: _,
            fixed,
            moving,
            labels_moving,
            labels_fixed,
            fields,
            aleatoric,
            params,
            mask,
            out: dst,
        } => {
            let cfg = common.load()?;
            let (f, m) = (scalar(&fixed)?, scalar(&moving)?);
            let samples = load_samples(&fields)?;
            let ale = match (aleatoric, params) {
                (Some(a), _) => uncertainty(&a)?,
                (None, Some(p)) => {
                    let model = read_head(&p)?;
                    let features = FeatureStack::from_registration(&model.features, &m, &f, &samples.samples()[0])?;
                    predict_aleatoric(&model.params, &features)?
                }
                (None, None) => {
                    return Err(Error::Config {
                        line: 0,
                        message: "evaluate needs --aleatoric or --params".into(),
                    })
                }
            };
            let report = evaluate_all(
                &f,
                &m,
                &labels(&labels_moving)?,
                &labels(&labels_fixed)?,
                &samples,
                &ale,
                mask.unwrap_or(cfg.metrics.mask),
            )?;
            let mut buf = Vec::new();
            write_report_csv(&report, &mut buf)?;
            out.bytes(&dst, &buf)?;
        }
        Command::Plot {
            map,
            slice,
            channel,
            out: dst,
        } => {
            let z: usize = slice
                .strip_prefix("z=")
                .and_then(|k| k.parse().ok())
                .ok_or_else(|| Error::Config {
                    line: 0,
                    message: format!("--slice must look like z=K, got {slice:?}"),
                })?;
            let v = read_volume(&map)?;
            if channel >= v.channels() {
                return Err(Error::ChannelMismatch {
                    expected: v.channels(),
                    actual: channel + 1,
                });
            }
            out.bytes(&dst, &encode_pgm_slice(v.channel(channel), v.grid(), z)?)?;
        }
    }
    Ok(())
}

/// Rows of `fixed,moving,field,labels_moving,labels_fixed`, resolved
/// relative to the manifest's directory.
fn read_manifest(path: &Path) -> Result<Vec<[PathBuf; 5]>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let expected = ["fixed", "moving", "field", "labels_moving", "labels_fixed"];
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
        .clone();
    if headers.iter().map(str::trim).ne(expected) {
        return Err(Error::Parse(format!(
            "{}: header must be {}",
            path.display(),
            expected.join(",")
        )));
    }
    reader
        .records()
        .map(|rec| {
            let rec = rec.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
            Ok(std::array::from_fn(|i| base.join(rec[i].trim())))
        })
        .collect()
}

fn fail(class: &str, code: u8, message: &str) -> ExitCode {
    let one_line = message.replace('\n', " ");
    eprintln!("error: class={class} code={code} message={one_line}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            return fail("usage", 2, first);
        }
    };
    let mut outputs = Outputs::default();
    match run(cli.command, &mut outputs) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            outputs.cleanup();
            let (class, code) = match e.class() {
                ErrorClass::Usage => ("usage", 2),
                ErrorClass::Data => ("data", 3),
                ErrorClass::Numerical => ("numerical", 4),
            };
            fail(class, code, &e.to_string())
        }
    }
}
