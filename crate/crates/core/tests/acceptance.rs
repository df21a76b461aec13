//! Acceptance suite: one line per criterion, non-zero exit on any failure.
mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{frozen_weights, gradient_check, max_abs_diff, naive_warp, ndv_oracle, random_pair, small_head};
use regseg::aleatoric::{
    loss_and_gradients, loss_and_gradients_frozen, predict_aleatoric, train, FeatureKind, FeatureStack, HeadConfig,
    LossForm, TrainConfig, TrainingPair,
};
use regseg::config::RunConfig;
use regseg::filters::gaussian_smooth;
use regseg::metrics::{
    dice, evaluate_all, jacobian_determinant, non_diffeomorphic_volume, percent_nonpositive_jacobian, MaskPolicy,
};
use regseg::phantom::{make_ground_truth_pair, make_ground_truth_pair_with_field, PhantomSpec, RandomFieldSpec};
use regseg::registration::{register, register_detailed, sample_registrations, RegistrationConfig, StochasticPolicy};
use regseg::uncertainty::{binary_entropy, epistemic_seg_uncertainty, transformation_uncertainty, UncertaintyKind};
use regseg::warp::{argmax_discretize, warp_labels, warp_scalar, BoundaryPolicy};
use regseg::{DisplacementField, GridSpec, LabelVolume, SampleSet, ScalarVolume};

type Outcome = Result<String, String>;

const CLAMP: BoundaryPolicy = BoundaryPolicy::ClampToEdge;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_values(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn random_field(grid: GridSpec, rng: &mut ChaCha8Rng, amp: f64) -> DisplacementField {
    let n = grid.len();
    DisplacementField::new(grid, [0, 1, 2].map(|_| random_values(rng, n, -amp, amp))).unwrap()
}

fn warp_oracle_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let dims = [rng.random_range(2..=8), rng.random_range(2..=8), rng.random_range(2..=8)];
        let grid = GridSpec::cube(dims).unwrap();
        let amp = rng.random_range(0.1..4.0);
        let field = random_field(grid, &mut rng, amp);
        let scalar = random_values(&mut rng, grid.len(), -5.0, 5.0);
        let out = warp_scalar(&ScalarVolume::new(grid, scalar.clone()).unwrap(), &field, CLAMP).unwrap();
        for (a, b) in out.data().iter().zip(naive_warp(&scalar, &field)) {
            worst = worst.max((a - b).abs());
        }
        let channels = rng.random_range(1..=3);
        let soft = random_values(&mut rng, channels * grid.len(), 0.0, 1.0);
        let labels = LabelVolume::new(grid, channels, soft.clone()).unwrap();
        let out = warp_labels(&labels, &field, CLAMP).unwrap();
        for c in 0..channels {
            let n = grid.len();
            for (a, b) in out.channel(c).iter().zip(naive_warp(&soft[c * n..(c + 1) * n], &field)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    check(worst < 1e-6, || format!("max deviation from oracle {worst:e}"))?;

    let grid = GridSpec::cube([7, 6, 5]).unwrap();
    let src = ScalarVolume::new(grid, random_values(&mut rng, grid.len(), 0.0, 1.0)).unwrap();
    let same = warp_scalar(&src, &DisplacementField::zeros(grid), CLAMP).unwrap();
    check(same == src, || "identity warp changed the volume".into())?;
    let half = warp_scalar(&src, &DisplacementField::constant(grid, [0.5, 0.0, 0.0]).unwrap(), CLAMP).unwrap();
    let one = warp_scalar(&src, &DisplacementField::constant(grid, [1.0, 0.0, 0.0]).unwrap(), CLAMP).unwrap();
    for z in 0..5 {
        for y in 0..6 {
            for x in 0..6 {
                let (a, b) = (src.get(x, y, z), src.get(x + 1, y, z));
                check(half.get(x, y, z) == 0.5 * a + 0.5 * b, || format!("half-voxel shift at ({x},{y},{z})"))?;
                check(one.get(x, y, z) == b, || format!("unit shift at ({x},{y},{z})"))?;
            }
        }
    }
    let slab = LabelVolume::binary(
        grid,
        1,
        (0..grid.len()).map(|i| if grid.coords(i).0 >= 3 { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap();
    let moved = warp_labels(&slab, &DisplacementField::constant(grid, [0.5, 0.0, 0.0]).unwrap(), CLAMP).unwrap();
    check(moved.data()[grid.index(2, 1, 1)] == 0.5, || "label boundary is not 0.5".into())?;
    Ok(format!("200 fuzzed instances, max deviation {worst:.1e}"))
}

fn uncertainty_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let grid = GridSpec::cube([5, 4, 3]).unwrap();
    let f = random_field(grid, &mut rng, 2.0);
    let same = transformation_uncertainty(&SampleSet::new(vec![f.clone(), f.clone(), f]).unwrap()).unwrap();
    check(same.data().iter().all(|&v| v == 0.0), || "variance of identical samples is not 0".into())?;

    let plus = DisplacementField::constant(grid, [1.0, 0.0, 0.0]).unwrap();
    let minus = DisplacementField::constant(grid, [-1.0, 0.0, 0.0]).unwrap();
    let pm = transformation_uncertainty(&SampleSet::new(vec![plus, minus]).unwrap()).unwrap();
    check(pm.data().iter().all(|&v| v == 1.0), || "two-sample +-1 variance is not 1".into())?;

    let half = LabelVolume::new(grid, 1, vec![0.5; grid.len()]).unwrap();
    let ident = SampleSet::new(vec![DisplacementField::zeros(grid)]).unwrap();
    let epi = epistemic_seg_uncertainty(&half, &ident).unwrap();
    let ln2 = std::f64::consts::LN_2;
    check(epi.data().iter().all(|v| (v - ln2).abs() < 1e-9), || "entropy at 0.5 is not ln 2".into())?;

    for _ in 0..50 {
        let channels = rng.random_range(1..=3);
        let soft = LabelVolume::new(grid, channels, random_values(&mut rng, channels * grid.len(), 0.0, 1.0)).unwrap();
        let samples = SampleSet::new((0..3).map(|_| random_field(grid, &mut rng, 2.0)).collect()).unwrap();
        let map = epistemic_seg_uncertainty(&soft, &samples).unwrap();
        check(map.data().iter().all(|&v| (0.0..=ln2).contains(&v)), || "entropy outside [0, ln 2]".into())?;
    }
    for _ in 0..10_000 {
        let h = binary_entropy(rng.random_range(0.0..=1.0));
        check((0.0..=ln2).contains(&h), || format!("entropy {h} outside [0, ln 2]"))?;
    }
    Ok("constants 0, +-1 gives 1, H(0.5) = ln 2, fuzzed entropies bounded".into())
}

fn gradient_checks() -> Outcome {
    let mut accepted = 0;
    let mut rejected = 0;
    let mut worst = 0.0f64;
    let mut seed = 0;
    let mut through_differs = 0;
    while accepted < 20 {
        let params = small_head(1000 + seed);
        let pair = random_pair(2000 + seed, [6, 6, 6], 2);
        seed += 1;
        let standard = gradient_check(&params, &pair, 1.0, LossForm::Standard, 1e-4);
        if standard.kinked > 0 {
            rejected += 1;
            check(rejected < 40, || "too many instances straddle an activation kink".into())?;
            continue;
        }
        let printed = gradient_check(&params, &pair, 1.0, LossForm::Printed, 1e-4);
        for (form, report) in [(LossForm::Standard, &standard), (LossForm::Printed, &printed)] {
            check(report.failures.is_empty() && report.kinked == 0, || {
                format!("{form}: {} mismatches, first {:?}", report.failures.len(), report.failures.first())
            })?;
            worst = worst.max(report.worst_rel);
        }
        accepted += 1;

        // the weight is a constant: analytic gradients equal those with frozen weights
        let weights = frozen_weights(&params, &pair, 1.0);
        for form in [LossForm::Standard, LossForm::Printed] {
            let (_, live) = loss_and_gradients(&params, &pair, 1.0, form).unwrap();
            let (_, frozen) = loss_and_gradients_frozen(&params, &pair, &weights, form).unwrap();
            check(max_abs_diff(&live, &frozen) == 0.0, || "weight contributes to the gradient".into())?;
        }
        // and differentiating through it would change them
        let h = 1e-4;
        let last = params.tensors().len() - 1;
        let (_, live) = loss_and_gradients(&params, &pair, 1.0, LossForm::Standard).unwrap();
        for i in 0..params.tensors()[last].len() {
            let mut plus = params.clone();
            plus.tensors_mut()[last][i] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[last][i] -= h;
            let lp = loss_and_gradients(&plus, &pair, 1.0, LossForm::Standard).unwrap().0;
            let lm = loss_and_gradients(&minus, &pair, 1.0, LossForm::Standard).unwrap().0;
            let through = (lp - lm) / (2.0 * h);
            let a = live.tensors[last][i];
            if (through - a).abs() > 1e-3 * a.abs().max(through.abs()) {
                through_differs += 1;
            }
        }
    }
    check(through_differs > 0, || "stop-gradient made no observable difference".into())?;
    Ok(format!(
        "20 instances x 2 forms, worst relative error {worst:.1e}, {rejected} kinked instances redrawn"
    ))
}

fn residual_pair(seed: u64, a: f64) -> TrainingPair {
    let dims = [12, 12, 12];
    let grid = GridSpec::cube(dims).unwrap();
    let n = grid.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = || gaussian_smooth(&random_values(&mut rng, n, 0.0, 1.0), dims, 1.5);
    let mut features = image();
    features.extend(image());
    let warped: Vec<f64> = (0..n).map(|_| 0.5 + rng.random_range(-a..a)).collect();
    TrainingPair::new(
        FeatureStack::from_raw(grid, vec![FeatureKind::AbsDiff, FeatureKind::Fixed], features).unwrap(),
        LabelVolume::new(grid, 1, warped).unwrap(),
        LabelVolume::new(grid, 1, vec![0.5; n]).unwrap(),
    )
    .unwrap()
}

fn variance_recovery() -> Outcome {
    let mut parts = Vec::new();
    for a in [0.3, 0.15] {
        let v = a * a / 3.0;
        let pairs: Vec<TrainingPair> = (0..8).map(|s| residual_pair(s, a)).collect();
        let head = HeadConfig {
            hidden_channels: 4,
            ..HeadConfig::new(2, 1)
        };
        let cfg = TrainConfig {
            epochs: 300,
            learning_rate: 3e-3,
            seed: 3,
            loss_form: LossForm::Standard,
            ..Default::default()
        };
        let out = train(&pairs, head, &cfg).map_err(|e| e.to_string())?;
        let test = residual_pair(1000, a);
        let map = predict_aleatoric(&out.params, &test.features).unwrap();
        let mean = map.data().iter().sum::<f64>() / map.data().len() as f64;
        let ratio = mean / v;
        check((ratio - 1.0).abs() < 0.2, || format!("v = {v:.4}: predicted {mean:.4} (ratio {ratio:.3})"))?;
        parts.push(format!("v={v:.4} ratio {ratio:.3}"));
    }
    Ok(parts.join(", "))
}

fn folding_metrics() -> Outcome {
    let grid = GridSpec::cube([8, 8, 8]).unwrap();
    let zero = DisplacementField::zeros(grid);
    check(percent_nonpositive_jacobian(&zero) == 0.0, || "zero field folds".into())?;
    check(non_diffeomorphic_volume(&zero) == 0.0, || "zero field has NDV".into())?;

    let scaled = DisplacementField::from_fn(grid, |x, y, z| [0.5 * x as f64, 0.5 * y as f64, 0.5 * z as f64]).unwrap();
    let jac = jacobian_determinant(&scaled);
    for i in 0..grid.len() {
        let (x, y, z) = grid.coords(i);
        if [x, y, z].iter().all(|&c| c > 0 && c < 7) {
            let d = jac.values()[i];
            check((d - 3.375).abs() < 1e-9, || format!("interior det {d} at ({x},{y},{z})"))?;
        }
    }

    let fold = DisplacementField::from_fn(grid, |x, _, _| [if x == 4 { -1.5 } else { 0.0 }, 0.0, 0.0]).unwrap();
    let (ndv, oracle) = (non_diffeomorphic_volume(&fold), ndv_oracle(&fold));
    check(ndv > 0.0 && (ndv - oracle).abs() < 1e-9, || format!("fold NDV {ndv} vs oracle {oracle}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..20 {
        let f = random_field(GridSpec::cube([6, 5, 4]).unwrap(), &mut rng, 0.9);
        let (a, b) = (non_diffeomorphic_volume(&f), ndv_oracle(&f));
        check((a - b).abs() < 1e-9, || format!("random field NDV {a} vs oracle {b}"))?;
    }
    Ok(format!("fold NDV {ndv:.4}% equals oracle"))
}

fn experiment_pair(seed: u64) -> regseg::phantom::GroundTruthPair {
    let grid = GridSpec::cube([32, 32, 32]).unwrap();
    make_ground_truth_pair(
        &PhantomSpec::two_structure(grid, seed),
        &RandomFieldSpec {
            grid,
            amplitude: 3.0,
            smoothness: 4.0,
            seed: seed + 1000,
        },
    )
    .unwrap()
}

fn correlation_ordering() -> Outcome {
    let reg = RegistrationConfig::default();
    let mut training = Vec::new();
    for s in [500, 501] {
        let p = experiment_pair(s);
        let cfg = RegistrationConfig { seed: s, ..reg.clone() };
        let field = register(&p.fixed, &p.moving, None, None, &cfg).map_err(|e| e.to_string())?;
        let features = FeatureStack::from_registration(&FeatureKind::ALL, &p.moving, &p.fixed, &field).unwrap();
        let warped = warp_labels(&p.labels_moving, &field, CLAMP).unwrap();
        training.push(TrainingPair::new(features, warped, p.labels_fixed.clone()).unwrap());
    }
    let head = HeadConfig {
        hidden_channels: 8,
        ..HeadConfig::new(FeatureKind::ALL.len(), 2)
    };
    let cfg = TrainConfig {
        epochs: 100,
        seed: 7,
        ..Default::default()
    };
    let model = train(&training, head, &cfg).map_err(|e| e.to_string())?;

    let (mut combined_wins, mut epistemic_wins) = (0, 0);
    let mut sums = [0.0; 5];
    for s in 0..20u64 {
        let p = experiment_pair(s);
        let cfg = RegistrationConfig { seed: s, ..reg.clone() };
        let samples = sample_registrations(&p.fixed, &p.moving, None, None, &cfg, &StochasticPolicy::default())
            .map_err(|e| e.to_string())?;
        let features =
            FeatureStack::from_registration(&FeatureKind::ALL, &p.moving, &p.fixed, &samples.samples()[0]).unwrap();
        let ale = predict_aleatoric(&model.params, &features).unwrap();
        let report = evaluate_all(
            &p.fixed,
            &p.moving,
            &p.labels_moving,
            &p.labels_fixed,
            &samples,
            &ale,
            MaskPolicy::WholeVolume,
        )
        .map_err(|e| e.to_string())?;
        let r = |k| report.correlation(k).and_then(|c| c.mean).unwrap_or(f64::NAN);
        let rs = UncertaintyKind::ALL.map(r);
        for (acc, v) in sums.iter_mut().zip(rs) {
            *acc += v / 20.0;
        }
        let [tr, ap, ep, _, co] = rs;
        if co > tr && co > ap {
            combined_wins += 1;
        }
        if ep > tr {
            epistemic_wins += 1;
        }
    }
    let summary = format!(
        "combined beats registration maps {combined_wins}/20, epistemic beats transformation {epistemic_wins}/20; \
         mean r trans {:.3} appear {:.3} epi {:.3} ale {:.3} combined {:.3}",
        sums[0], sums[1], sums[2], sums[3], sums[4]
    );
    check(combined_wins >= 18 && epistemic_wins >= 18, || summary.clone())?;
    Ok(summary)
}

fn registration_sanity() -> Outcome {
    let grid = GridSpec::cube([32, 32, 32]).unwrap();
    let reg = RegistrationConfig::default();

    let (image, _) = regseg::phantom::generate_phantom(&PhantomSpec::two_structure(grid, 11)).unwrap();
    let null = register(&image, &image, None, None, &reg).map_err(|e| e.to_string())?;
    let n = grid.len() as f64;
    let mean_u = (0..grid.len())
        .map(|i| {
            let u = null.at(i);
            (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt()
        })
        .sum::<f64>()
        / n;
    check(mean_u < 0.05, || format!("null registration mean |u| = {mean_u}"))?;

    let mut phantom = PhantomSpec::two_structure(grid, 12);
    phantom.noise_sigma = 0.0;
    let pair = make_ground_truth_pair_with_field(&phantom, DisplacementField::constant(grid, [2.0, 0.0, 0.0]).unwrap())
        .unwrap();
    let outcome = register_detailed(&pair.fixed, &pair.moving, None, None, &reg).map_err(|e| e.to_string())?;
    let fg: Vec<usize> = (0..grid.len())
        .filter(|&i| (0..2).any(|c| pair.labels_fixed.channel(c)[i] > 0.5))
        .collect();
    let mut mean = [0.0; 3];
    for &i in &fg {
        let u = outcome.field.at(i);
        for a in 0..3 {
            mean[a] += u[a] / fg.len() as f64;
        }
    }
    let err = ((mean[0] - 2.0).powi(2) + mean[1].powi(2) + mean[2].powi(2)).sqrt();
    check(err < 0.3, || format!("translation error {err:.3} (mean {mean:?})"))?;

    let run = RunConfig::default();
    let p = make_ground_truth_pair(&run.phantom, &run.field_spec()).unwrap();
    let field = register(&p.fixed, &p.moving, Some(&p.labels_moving), Some(&p.labels_fixed), &run.registration)
        .map_err(|e| e.to_string())?;
    let before = dice(&p.labels_moving, &p.labels_fixed).unwrap().mean;
    let warped = argmax_discretize(&warp_labels(&p.labels_moving, &field, CLAMP).unwrap(), None).unwrap();
    let after = dice(&warped, &p.labels_fixed).unwrap().mean;
    check(after > before, || format!("Dice {before:.3} -> {after:.3}"))?;
    Ok(format!(
        "null mean |u| {mean_u:.4}, translation error {err:.3}, Dice {before:.3} -> {after:.3}"
    ))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_regseg"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    check(out.status.success(), || {
        format!("regseg {} failed: {}", args[0], String::from_utf8_lossy(&out.stderr).trim())
    })
}

fn pipeline(dir: &Path) -> Result<(), String> {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/quick.cfg");
    let p = |name: &str| dir.join(name).to_str().unwrap().to_string();
    let c = cfg.to_str().unwrap();
    let common = ["--config", c, "--seed", "17"];
    let with = |head: &[&str], rest: &[&str]| -> Vec<String> {
        head.iter().chain(common.iter()).chain(rest.iter()).map(|s| s.to_string()).collect()
    };
    let call = |v: Vec<String>| run_cli(&v.iter().map(String::as_str).collect::<Vec<_>>());

    call(with(&["phantom"], &["--out-dir", &p("data")]))?;
    call(with(
        &["register"],
        &[
            "--fixed",
            &p("data/fixed.rvol"),
            "--moving",
            &p("data/moving.rvol"),
            "--labels-moving",
            &p("data/labels_moving.rvol"),
            "--labels-fixed",
            &p("data/labels_fixed.rvol"),
            "--out-dir",
            &p("fields"),
        ],
    ))?;
    fs::write(
        dir.join("pairs.csv"),
        "fixed,moving,field,labels_moving,labels_fixed\n\
         data/fixed.rvol,data/moving.rvol,fields/field_000.rvol,data/labels_moving.rvol,data/labels_fixed.rvol\n",
    )
    .map_err(|e| e.to_string())?;
    call(with(&["train-aleatoric"], &["--pairs", &p("pairs.csv"), "--out", &p("head.rahd")]))?;
    let plain = |v: &[&str]| call(v.iter().map(|s| s.to_string()).collect());
    plain(&[
        "predict-aleatoric",
        "--params",
        &p("head.rahd"),
        "--fixed",
        &p("data/fixed.rvol"),
        "--moving",
        &p("data/moving.rvol"),
        "--field",
        &p("fields/field_000.rvol"),
        "--out",
        &p("aleatoric.rvol"),
    ])?;
    plain(&["uncertainty", "--kind", "trans", "--fields", &p("fields"), "--out", &p("trans.rvol")])?;
    plain(&[
        "uncertainty",
        "--kind",
        "appear",
        "--fields",
        &p("fields"),
        "--fixed",
        &p("data/fixed.rvol"),
        "--moving",
        &p("data/moving.rvol"),
        "--out",
        &p("appear.rvol"),
    ])?;
    plain(&[
        "uncertainty",
        "--kind",
        "epi",
        "--fields",
        &p("fields"),
        "--labels-moving",
        &p("data/labels_moving.rvol"),
        "--out",
        &p("epi.rvol"),
    ])?;
    plain(&[
        "uncertainty",
        "--kind",
        "combined",
        "--epistemic",
        &p("epi.rvol"),
        "--aleatoric",
        &p("aleatoric.rvol"),
        "--out",
        &p("combined.rvol"),
    ])?;
    plain(&[
        "warp",
        "--in",
        &p("data/labels_moving.rvol"),
        "--field",
        &p("fields/field_000.rvol"),
        "--labels",
        "--argmax",
        "--out",
        &p("propagated.rvol"),
    ])?;
    call(with(
        &["evaluate"],
        &[
            "--all",
            "--fixed",
            &p("data/fixed.rvol"),
            "--moving",
            &p("data/moving.rvol"),
            "--labels-moving",
            &p("data/labels_moving.rvol"),
            "--labels-fixed",
            &p("data/labels_fixed.rvol"),
            "--fields",
            &p("fields"),
            "--aleatoric",
            &p("aleatoric.rvol"),
            "--out",
            &p("metrics.csv"),
        ],
    ))?;
    plain(&["plot", "--map", &p("combined.rvol"), "--slice", "z=8", "--out", &p("combined.pgm")])?;
    Ok(())
}

fn listing(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        fs::create_dir(d).map_err(|e| e.to_string())?;
        pipeline(d)?;
    }
    let files = listing(&a);
    check(files == listing(&b), || "runs produced different file sets".into())?;
    for f in &files {
        let same = fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap();
        check(same, || format!("{} differs between runs", f.display()))?;
    }
    Ok(format!("{} output files bit-identical across two runs", files.len()))
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 8] = [
        ("warp oracle suite", Duration::from_secs(10), warp_oracle_suite),
        ("variance and entropy identities", Duration::from_secs(5), uncertainty_identities),
        ("beta-NLL gradient check", Duration::from_secs(60), gradient_checks),
        ("variance recovery", Duration::from_secs(300), variance_recovery),
        ("folding metrics", Duration::from_secs(10), folding_metrics),
        ("correlation ordering on 20 phantoms", Duration::from_secs(1800), correlation_ordering),
        ("registration sanity", Duration::from_secs(300), registration_sanity),
        ("CLI reproducibility", Duration::from_secs(600), reproducibility),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.into_iter().enumerate() {
        let id = i + 1;
        if only.is_some_and(|k| k != id) {
            continue;
        }
        let start = Instant::now();
        let mut result = run();
        let took = start.elapsed();
        if result.is_ok() && took > budget {
            result = Err(format!("took {:.1}s, budget {}s", took.as_secs_f64(), budget.as_secs()));
        }
        match result {
            Ok(detail) => println!("criterion {id} PASS {name}: {detail} ({:.1}s)", took.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("criterion {id} FAIL {name}: {why} ({:.1}s)", took.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
