//! Acceptance suite: every criterion at its stated tolerance, one line each.
//! Run with `cargo test -p shiftrisk-cli --test acceptance`.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::seq::IndexedRandom;
use rand::Rng;
use shiftrisk::augment::{compose, Augmentation, AugmentationOp};
use shiftrisk::cansample::{acceptance_rate, batch_augment, ConceptionOracle, ParamPrior, SamplingPolicy};
use shiftrisk::data::{gen_blobs, gen_rings, longtail_subsample, Dataset, Sample};
use shiftrisk::model::{check_gradient, Activation, ModelShape, ProbModel};
use shiftrisk::risk::{self, fit_loglog_slope, mean_and_variance, sandwich_bounds, variance_scan};
use shiftrisk::rng::{self, Stream};
use shiftrisk::train::{self, loss_expr, loss_ours, loss_standard, Strategy, TrainConfig};
use shiftrisk_cli::commands::{run_once, Context};
use shiftrisk_cli::config::ExperimentConfig;
use statrs::distribution::{ContinuousCDF, Normal};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn random_model(input: usize, classes: usize, r: &mut Stream) -> ProbModel {
    let depth = r.random_range(0..=2);
    let widths = (0..depth).map(|_| r.random_range(2..=8)).collect();
    let activation = if r.random_bool(0.5) { Activation::Tanh } else { Activation::Softplus };
    let mut m = ProbModel::new(
        ModelShape {
            input_dim: input,
            widths,
            num_classes: classes,
            activation,
        },
        r.random(),
    )
    .unwrap();
    let scale = r.random_range(0.5..3.0);
    for p in m.params_mut() {
        *p *= scale;
    }
    m
}

fn random_setting(r: &mut Stream) -> (Dataset, AugmentationOp) {
    let seed = r.random();
    let data = if r.random_bool(0.5) {
        gen_rings(r.random_range(2..=4), r.random_range(3..=8), seed).unwrap()
    } else {
        gen_blobs(r.random_range(2..=5), 2, r.random_range(3..=8), r.random_range(1.0..4.0), seed).unwrap()
    };
    let op = match r.random_range(0..3) {
        0 => AugmentationOp::rotation2d(),
        1 => AugmentationOp::additive_shift(2, r.random_range(0.1..1.0)).unwrap(),
        _ => AugmentationOp::scale(0.4).unwrap(),
    };
    (data, op)
}

fn c1_decomposition() -> Verdict {
    let mut r = rng::stream(101, &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (data, op) = random_setting(&mut r);
        let prior = ParamPrior::default_for(&op);
        let m = random_model(2, data.num_classes(), &mut r);
        let copies = r.random_range(1..=4);
        let pairs = batch_augment(data.samples(), &op, &prior, data.oracle(), copies, SamplingPolicy::default(), r.random()).unwrap();
        let d = risk::decompose(&m, &pairs).unwrap();
        // independent oracle: flat sums over pairs
        let total = pairs.len() as f64;
        let shifted = -pairs.iter().map(|p| m.log_q(&p.x_prime, p.y)).sum::<f64>() / total;
        let clean = -pairs.iter().map(|p| m.log_q(&p.x, p.y)).sum::<f64>() / total;
        let gap = pairs.iter().map(|p| m.log_q(&p.x, p.y) - m.log_q(&p.x_prime, p.y)).sum::<f64>() / total;
        worst = worst
            .max(d.residual)
            .max((shifted - d.shifted_risk).abs())
            .max((clean - d.clean_risk).abs())
            .max((gap - d.gap).abs());
    }
    verdict(worst <= 1e-10, format!("50 configurations, worst residual {worst:.3e} (tol 1e-10)"))
}

fn c2_sandwich() -> Verdict {
    let mut r = rng::stream(202, &[]);
    let (mut lower_bad, mut upper_bad, mut mvt_bad) = (0, 0, 0);
    for _ in 0..1000 {
        let classes = r.random_range(2..=5);
        let m = random_model(3, classes, &mut r);
        let x: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
        let xp: Vec<f64> = x.iter().map(|v| v + r.random_range(-1.0..1.0)).collect();
        let y = r.random_range(0..classes);
        let rep = sandwich_bounds(&m, &x, &xp, y).unwrap();
        lower_bad += usize::from(!rep.lower_holds());
        upper_bad += usize::from(!rep.upper_holds());
        mvt_bad += usize::from(!rep.lower_mvt_holds());
    }
    verdict(
        lower_bad == 0 && upper_bad == 0,
        format!(
            "1000 draws: {lower_bad} lower / {upper_bad} upper violations with beta* = max_j rho_j; \
             {mvt_bad} violations when the lower bound uses max(rho_x, rho_x')"
        ),
    )
}

fn c3_variance() -> Verdict {
    let data = gen_blobs(3, 2, 20, 2.0, 303).unwrap();
    let mut clean = data.samples().to_vec();
    rand::seq::SliceRandom::shuffle(clean.as_mut_slice(), &mut rng::stream(303, &[]));
    clean.truncate(32);
    let mut r = rng::stream(304, &[]);
    let m = random_model(2, 3, &mut r);
    let op = AugmentationOp::rotation2d();
    let prior = ParamPrior::default_for(&op);
    let rows = variance_scan(&m, &clean, &op, &prior, data.oracle(), &[1, 2, 4, 8, 16], 1000, SamplingPolicy::default(), 305).unwrap();
    // independent least-squares fit
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (((r.n * r.m) as f64).ln(), r.empirical_variance.ln())).collect();
    let k = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / k, pts.iter().map(|p| p.1).sum::<f64>() / k);
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let lib = fit_loglog_slope(&rows).unwrap_or(f64::NAN);
    verdict(
        (-1.15..=-0.85).contains(&slope) && (slope - lib).abs() < 1e-12,
        format!("N=32, M in 1..16, 1000 trials: slope {slope:.4} (range [-1.15, -0.85])"),
    )
}

fn c4_unbiasedness() -> Verdict {
    let data = gen_blobs(3, 2, 5, 1.5, 404).unwrap();
    let oracle = data.oracle();
    let mut r = rng::stream(405, &[]);
    let m = random_model(2, 3, &mut r);
    let delta = 0.6;
    let grid: Vec<Vec<f64>> = [-delta, 0.0, delta]
        .iter()
        .flat_map(|&a| [-delta, 0.0, delta].map(move |b| vec![a, b]))
        .collect();
    let op = AugmentationOp::additive_shift(2, delta).unwrap();
    let prior = ParamPrior::point_masses(grid.clone()).unwrap();
    let exact = data
        .samples()
        .iter()
        .map(|s| {
            let inside: Vec<f64> = grid
                .iter()
                .map(|t| vec![s.x[0] + t[0], s.x[1] + t[1]])
                .filter(|xp| oracle.label(xp) == s.y)
                .map(|xp| -m.log_q(&xp, s.y))
                .collect();
            inside.iter().sum::<f64>() / inside.len() as f64
        })
        .sum::<f64>()
        / data.len() as f64;
    let estimates: Vec<f64> = (0..10_000)
        .map(|t| {
            let pairs = batch_augment(data.samples(), &op, &prior, oracle, 1, SamplingPolicy::default(), 1_000_000 + t).unwrap();
            risk::shifted_risk(&m, &pairs).unwrap()
        })
        .collect();
    let (mean, var) = mean_and_variance(&estimates);
    let se = (var / estimates.len() as f64).sqrt();
    let z = (mean - exact).abs() / se;
    verdict(z <= 3.0, format!("exact {exact:.6}, MC mean {mean:.6}, |diff| = {z:.2} SE over 1e4 redraws"))
}

fn ablation_config(epochs: usize) -> ExperimentConfig {
    ExperimentConfig::from_toml(&format!(
        r#"
[dataset]
generator = "rings"
classes = 3
per_class = 200
[dataset.split]
train = 0.1
val = 0.1
test = 0.8
[model]
widths = [16, 16]
[train]
epochs = {epochs}
batch_size = 16
base_lr = 0.05
"#
    ))
    .unwrap()
}

fn c5_equivalences() -> Verdict {
    let mut r = rng::stream(505, &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (data, op) = random_setting(&mut r);
        let prior = ParamPrior::default_for(&op);
        let m = random_model(2, data.num_classes(), &mut r);
        let copies = r.random_range(1..=3);
        let pairs = batch_augment(data.samples(), &op, &prior, data.oracle(), copies, SamplingPolicy::default(), r.random()).unwrap();
        let clean: Vec<Sample> = pairs.chunks(copies).map(|g| Sample { x: g[0].x.clone(), y: g[0].y }).collect();
        let ce = clean.iter().map(|s| -m.log_q(&s.x, s.y)).sum::<f64>() / clean.len() as f64;
        let std = pairs.iter().map(|p| -m.log_q(&p.x_prime, p.y)).sum::<f64>() / pairs.len() as f64;
        worst = worst
            .max((loss_ours(&m, &pairs, 1.0).unwrap() - std).abs())
            .max((loss_standard(&m, &pairs).unwrap() - std).abs())
            .max((loss_ours(&m, &pairs, 0.0).unwrap() - ce).abs());
    }
    let ctx = Context::new(ablation_config(10), None, None);
    let ours = TrainConfig { strategy: Strategy::Ours, lambda: 1.0, ..ctx.config.train.clone() };
    let standard = TrainConfig { strategy: Strategy::Standard, ..ours.clone() };
    let mut step_worst: f64 = 0.0;
    let mut steps = 0;
    for seed in 0..3 {
        let a = run_once(&ctx, seed, &ours).unwrap();
        let b = run_once(&ctx, seed, &standard).unwrap();
        steps += a.steps.len();
        if a.steps.len() != b.steps.len() {
            return verdict(false, "step counts differ");
        }
        for (x, y) in a.steps.iter().zip(&b.steps) {
            step_worst = step_worst.max((x.loss - y.loss).abs());
        }
    }
    verdict(
        worst <= 1e-10 && step_worst <= 1e-10,
        format!("loss identities worst {worst:.3e} on 100 inputs; {steps} training steps worst {step_worst:.3e} (tol 1e-10)"),
    )
}

fn c6_gradients() -> Verdict {
    let mut r = rng::stream(606, &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (data, op) = random_setting(&mut r);
        let prior = ParamPrior::default_for(&op);
        let m = random_model(2, data.num_classes(), &mut r);
        let copies = r.random_range(1..=3);
        let pairs = batch_augment(data.samples(), &op, &prior, data.oracle(), copies, SamplingPolicy::default(), r.random()).unwrap();
        let lambda = *[0.0, 1.0, r.random_range(0.0..1.0)].choose(&mut r).unwrap();
        let rep = check_gradient(&m, &loss_expr(&pairs, lambda).unwrap(), 1e-5).unwrap();
        worst = worst.max(rep.finite_diff_max_rel_err.unwrap());
    }
    verdict(worst <= 1e-4, format!("100 configurations, worst relative error {worst:.3e} (tol 1e-4)"))
}

fn fd_gram(op: &dyn Augmentation, theta: &[f64], x: &[f64]) -> f64 {
    let h = 1e-5;
    let mut j = DMatrix::zeros(x.len(), theta.len());
    for k in 0..theta.len() {
        let (mut up, mut down) = (theta.to_vec(), theta.to_vec());
        up[k] += h;
        down[k] -= h;
        let (a, b) = (op.apply(&up, x).unwrap(), op.apply(&down, x).unwrap());
        for i in 0..x.len() {
            j[(i, k)] = (a[i] - b[i]) / (2.0 * h);
        }
    }
    (j.transpose() * &j).determinant().sqrt()
}

fn c7_operators() -> Verdict {
    let mut r = rng::stream(707, &[]);
    let ops: Vec<Box<dyn Augmentation>> = vec![
        Box::new(AugmentationOp::rotation2d()),
        Box::new(AugmentationOp::additive_shift(4, 0.5).unwrap()),
        Box::new(AugmentationOp::scale(0.7).unwrap()),
        Box::new(AugmentationOp::color_adjust(2, 0.1, 0.3, (0.5, 2.0)).unwrap()),
        Box::new(compose(vec![AugmentationOp::rotation2d(), AugmentationOp::scale(0.5).unwrap()], vec![1, 0]).unwrap()),
    ];
    let input = |op: &dyn Augmentation, r: &mut Stream| -> Vec<f64> {
        if op.name() == "color" {
            (0..6).map(|_| r.random_range(0.05..1.0)).collect()
        } else {
            (0..4).map(|_| r.random_range(-3.0..3.0)).collect()
        }
    };
    let mut identity_ok = true;
    let (mut inv_worst, mut jac_worst): (f64, f64) = (0.0, 0.0);
    for op in &ops {
        for _ in 0..1000 {
            let x = input(op.as_ref(), &mut r);
            let y = op.apply(op.identity(), &x).unwrap();
            identity_ok &= y.iter().zip(&x).all(|(a, b)| a.to_bits() == b.to_bits());
        }
        for _ in 0..100 {
            let x = input(op.as_ref(), &mut r);
            let s = op.space();
            let theta: Vec<f64> = s.lower().iter().zip(s.upper()).map(|(l, u)| r.random_range(l + 1e-4..u - 1e-4)).collect();
            if op.has_inverse() {
                let back = op.invert(&op.apply(&theta, &x).unwrap(), &x).unwrap();
                inv_worst = back.iter().zip(&theta).map(|(a, b)| (a - b).abs()).fold(inv_worst, f64::max);
            }
            let a = op.jacobian_factor(&theta, &x).unwrap();
            jac_worst = jac_worst.max((a - fd_gram(op.as_ref(), &theta, &x)).abs() / a);
        }
    }
    verdict(
        identity_ok && inv_worst <= 1e-9 && jac_worst <= 1e-4,
        format!("identity bit-exact: {identity_ok}; inverse worst {inv_worst:.3e} (tol 1e-9); Jacobian factor worst rel {jac_worst:.3e} (tol 1e-4)"),
    )
}

fn ks(mut v: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &t)| {
            let c = cdf(t);
            (c - i as f64 / n).abs().max(((i + 1) as f64 / n - c).abs())
        })
        .fold(0.0, f64::max)
}

fn c8_sampler() -> Verdict {
    let blobs = gen_blobs(2, 2, 5000, 2.0, 808).unwrap();
    let rings = gen_rings(3, 500, 809).unwrap();
    let rot = AugmentationOp::rotation2d();
    let shift = AugmentationOp::additive_shift(2, 1.0).unwrap();
    let mut checked = 0;
    let mut all_in = true;
    for data in [&blobs, &rings] {
        for op in [&rot, &shift] {
            let prior = ParamPrior::default_for(op);
            let pairs = batch_augment(data.samples(), op, &prior, data.oracle(), 2, SamplingPolicy::default(), 810).unwrap();
            for p in pairs.iter().filter(|p| p.accepted) {
                checked += 1;
                all_in &= data.oracle().label(&p.x_prime) == p.y;
            }
        }
    }
    // two symmetric blobs: the nearest-center cell is the half-plane x0 > 0
    let prior = ParamPrior::default_for(&rot);
    let pairs = batch_augment(blobs.samples(), &rot, &prior, &ConceptionOracle::HalfPlane, 1, SamplingPolicy::default(), 811).unwrap();
    let rate = acceptance_rate(&pairs);

    let op = AugmentationOp::additive_shift(1, 1.0).unwrap();
    let tg = ParamPrior::truncated_gaussian(vec![0.0], vec![0.5], op.space().clone()).unwrap();
    let pts = vec![Sample { x: vec![0.3], y: 1 }; 10_000];
    let pairs = batch_augment(&pts, &op, &tg, &ConceptionOracle::HalfPlane, 1, SamplingPolicy::default(), 812).unwrap();
    let g = Normal::new(0.0, 0.5).unwrap();
    let (lo, hi) = (g.cdf(-0.3), g.cdf(1.0));
    let d = ks(pairs.iter().map(|p| p.theta[0]).collect(), |t| (g.cdf(t) - lo) / (hi - lo));
    let crit = 1.628 / 100.0;
    verdict(
        all_in && checked > 0 && (0.48..=0.52).contains(&rate) && d < crit,
        format!("{checked} accepted pairs in CAN: {all_in}; half-plane rotation rate {rate:.4} over 1e4; KS {d:.4} < {crit:.4}"),
    )
}

fn c9_ablation() -> Verdict {
    let ctx = Context::new(ablation_config(60), None, None);
    let mut stats = Vec::new();
    for lambda in [0.0001, 0.5] {
        let tc = TrainConfig { strategy: Strategy::Ours, lambda, ..ctx.config.train.clone() };
        let runs: Vec<train::RunRecord> = (0..5).map(|s| run_once(&ctx, s, &tc).unwrap()).collect();
        let acc = runs.iter().map(|r| r.test_acc).sum::<f64>() / 5.0;
        let risk = runs.iter().map(|r| r.test_clean_risk).sum::<f64>() / 5.0;
        stats.push((acc, risk));
    }
    let (lo, mid) = (stats[0], stats[1]);
    verdict(
        mid.0 >= lo.0 && lo.1 > mid.1,
        format!(
            "rings, full rotation, 5 seeds: acc {:.4} (0.5) vs {:.4} (0.0001); clean risk {:.4} (0.0001) vs {:.4} (0.5)",
            mid.0, lo.0, lo.1, mid.1
        ),
    )
}

fn c10_longtail() -> Verdict {
    // floor(1000 · ratio^(-i/9)), evaluated in extended precision
    let expected: [(f64, [usize; 10]); 4] = [
        (10.0, [1000, 774, 599, 464, 359, 278, 215, 166, 129, 100]),
        (20.0, [1000, 716, 513, 368, 264, 189, 135, 97, 69, 50]),
        (50.0, [1000, 647, 419, 271, 175, 113, 73, 47, 30, 20]),
        (100.0, [1000, 599, 359, 215, 129, 77, 46, 27, 16, 10]),
    ];
    let full = gen_blobs(10, 2, 1000, 3.0, 1010).unwrap();
    let mut ok = true;
    let mut detail = Vec::new();
    for (ratio, want) in expected {
        let lt = longtail_subsample(&full, ratio, 1011).unwrap();
        let got = lt.class_counts();
        let (mx, mn) = (*got.iter().max().unwrap() as f64, *got.iter().min().unwrap() as f64);
        let ratio_ok = (mx / mn - ratio).abs() <= ratio / mn;
        ok &= got == want && ratio_ok;
        detail.push(format!("{ratio}: {}", if got == want { "exact" } else { "MISMATCH" }));
    }
    verdict(ok, detail.join(", "))
}

fn run_cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_shiftrisk"))
        .args(args)
        .output()
        .map(|o| o.status.code().is_some_and(|c| c <= 1))
        .unwrap_or(false)
}

fn csv_files(dir: &Path, out: &mut Vec<std::path::PathBuf>) {
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            csv_files(&p, out);
        } else if p.extension().is_some_and(|x| x == "csv") {
            out.push(p);
        }
    }
}

fn c11_determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(
        &cfg,
        "[dataset]\nper_class = 40\n[train]\nepochs = 3\nbatch_size = 16\n[experiment]\nchecks = 10\ndraws = 100\ntrials = 100\nm_list = [1, 2]\nlambdas = [0.5, 1.0]\nseeds = [0, 1]\n",
    )
    .unwrap();
    let cmds = ["sample-aug", "check-decomposition", "bounds-check", "variance-scan", "train", "ablate-lambda", "export-data"];
    let mut compared = 0;
    let mut mismatched = Vec::new();
    for cmd in cmds {
        let mut files = [Vec::new(), Vec::new()];
        for (run, workers) in [(0, "1"), (1, "3")] {
            let out = tmp.path().join(format!("{cmd}-{run}"));
            let ok = run_cli(&[cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "7", "--workers", workers]);
            if !ok {
                return verdict(false, format!("{cmd} failed to run"));
            }
            csv_files(&out, &mut files[run]);
            files[run].sort();
        }
        for (a, b) in files[0].iter().zip(&files[1]) {
            compared += 1;
            if std::fs::read(a).unwrap() != std::fs::read(b).unwrap() {
                mismatched.push(a.file_name().unwrap().to_string_lossy().to_string());
            }
        }
        if files[0].len() != files[1].len() || files[0].is_empty() {
            mismatched.push(format!("{cmd}: file sets differ"));
        }
    }
    verdict(
        mismatched.is_empty(),
        format!("{compared} CSV files across 7 subcommands (1 vs 3 workers), mismatches: {mismatched:?}"),
    )
}

type Criterion = (&'static str, fn() -> Verdict, Duration);

fn main() {
    let criteria: [Criterion; 11] = [
        ("1 decomposition exactness", c1_decomposition, Duration::from_secs(10)),
        ("2 sandwich bounds", c2_sandwich, Duration::from_secs(10)),
        ("3 variance rate", c3_variance, Duration::from_secs(120)),
        ("4 unbiasedness", c4_unbiasedness, Duration::from_secs(60)),
        ("5 algorithm equivalences", c5_equivalences, Duration::MAX),
        ("6 gradient fidelity", c6_gradients, Duration::MAX),
        ("7 operator axioms", c7_operators, Duration::MAX),
        ("8 sampler correctness", c8_sampler, Duration::MAX),
        ("9 lambda ablation trend", c9_ablation, Duration::from_secs(600)),
        ("10 long-tail counts", c10_longtail, Duration::MAX),
        ("11 determinism", c11_determinism, Duration::MAX),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run, budget) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let v = run();
        let elapsed = start.elapsed();
        let in_time = elapsed <= budget;
        let pass = v.pass && in_time;
        failed += usize::from(!pass);
        let budget_note = if budget == Duration::MAX { String::new() } else { format!(", budget {}s", budget.as_secs()) };
        println!(
            "criterion {name}: {} ({}) [{:.2}s{budget_note}]",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            elapsed.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
