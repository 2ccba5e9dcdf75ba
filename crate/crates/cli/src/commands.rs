//! Subcommand implementations. Each writes its outputs and a config
//! snapshot into the output directory and reports pass or fail.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use shiftrisk::cansample::{acceptance_rate, batch_augment, sample_with_policy};
use shiftrisk::data::{self, Dataset, Sample};
use shiftrisk::model::ProbModel;
use shiftrisk::risk::{self, fit_loglog_slope, mean_and_variance, sandwich_bounds, variance_scan};
use shiftrisk::rng::{self, tag};
use shiftrisk::train::{self, RunRecord, Strategy, TrainConfig};
use shiftrisk::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::output::{csv, line_plot, Series, Summary};

pub const DECOMPOSITION_TOLERANCE: f64 = 1e-10;
pub const SLOPE_RANGE: (f64, f64) = (-1.15, -0.85);

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for configuration problems, 3 for sampling failures, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(Error::AcceptanceExhausted { .. }) => 3,
            CliError::Core(
                Error::InvalidConfig(_)
                | Error::InvalidParamSpace(_)
                | Error::InvalidPrior(_)
                | Error::InvalidOrder(_)
                | Error::EmptyComposition,
            ) => 2,
            _ => 1,
        }
    }
}

pub type CmdResult = Result<Outcome, CliError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub pass: bool,
    pub summary: Summary,
    pub dir: PathBuf,
}

impl Outcome {
    pub fn exit_code(&self) -> u8 {
        if self.pass {
            0
        } else {
            1
        }
    }
}

/// Resolved invocation: config plus the output directory and run seed.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub seed: u64,
}

impl Context {
    pub fn new(config: ExperimentConfig, out: Option<PathBuf>, seed: Option<u64>) -> Self {
        Self {
            out: out.unwrap_or_else(|| config.out.clone()),
            seed: seed.unwrap_or(config.seed),
            config,
        }
    }

    fn prepare(&self) -> Result<&Path, CliError> {
        fs::create_dir_all(&self.out)?;
        fs::write(self.out.join("config.toml"), self.snapshot())?;
        Ok(&self.out)
    }

    /// Canonical config with the effective seed.
    pub fn snapshot(&self) -> String {
        let mut c = self.config.clone();
        c.seed = self.seed;
        c.out = self.out.clone();
        c.to_toml()
    }

    pub fn config_hash(&self) -> String {
        let mut c = self.config.clone();
        c.seed = 0;
        c.out = PathBuf::new();
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    fn model_seed(&self, seed: u64) -> u64 {
        self.config.model.seed.unwrap_or(seed)
    }
}

fn f(v: f64) -> String {
    v.to_string()
}

fn finish(dir: &Path, summary: Summary, pass: bool) -> CmdResult {
    summary.write(dir)?;
    Ok(Outcome {
        pass,
        summary,
        dir: dir.to_path_buf(),
    })
}

/// Draw accepted augmentations for every sample and report acceptance.
pub fn sample_aug(ctx: &Context) -> CmdResult {
    let dir = ctx.prepare()?;
    let data = ctx.config.build_dataset(ctx.seed)?;
    let aug = ctx.config.build_augment(data.dim())?;
    let pairs = batch_augment(data.samples(), aug.op.as_ref(), &aug.prior, data.oracle(), aug.copies, aug.policy, ctx.seed)?;
    let d = aug.op.space().dims();
    let n = data.dim();
    let mut header = vec!["sample_index".to_string(), "copy_index".into(), "y".into()];
    header.extend((0..d).map(|k| format!("theta{k}")));
    header.extend((0..n).map(|k| format!("xp{k}")));
    header.extend(["attempts".into(), "accepted".into()]);
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = pairs.iter().map(|p| {
        let mut r = vec![p.sample_index.to_string(), p.copy_index.to_string(), p.y.to_string()];
        r.extend(p.theta.iter().map(|v| f(*v)));
        r.extend(p.x_prime.iter().map(|v| f(*v)));
        r.extend([p.attempts.to_string(), u8::from(p.accepted).to_string()]);
        r
    });
    fs::write(dir.join("pairs.csv"), csv(&header, rows))?;
    let accepted = pairs.iter().filter(|p| p.accepted).count();
    let mut s = Summary::new();
    s.push("op", aug.op.name())
        .push("pairs", pairs.len())
        .push("accepted", accepted)
        .push("fallbacks", pairs.len() - accepted)
        .push("acceptance_rate", acceptance_rate(&pairs));
    finish(dir, s, true)
}

fn random_model(ctx: &Context, data: &Dataset, seed: u64, rng: &mut rng::Stream) -> Result<ProbModel, CliError> {
    let shape = ctx.config.model_shape(data.dim(), data.num_classes());
    let mut m = ProbModel::new(shape, seed)?;
    let scale = rng.random_range(0.5..3.0);
    for p in m.params_mut() {
        *p *= scale;
    }
    Ok(m)
}

/// Randomized checks of `shifted = clean + gap`.
pub fn check_decomposition(ctx: &Context) -> CmdResult {
    let dir = ctx.prepare()?;
    let data = ctx.config.build_dataset(ctx.seed)?;
    let aug = ctx.config.build_augment(data.dim())?;
    let cases = ctx.config.experiment.checks;
    let rows: Vec<Result<(u64, usize, usize, risk::RiskDecomposition), CliError>> = (0..cases)
        .into_par_iter()
        .map(|k| {
            let case_seed = rng::derive_seed(ctx.seed, &[tag::TRIAL, k as u64]);
            let mut r = rng::stream(case_seed, &[]);
            let model = random_model(ctx, &data, case_seed, &mut r)?;
            let n = r.random_range(1..=data.len().min(32));
            let copies = r.random_range(1..=4);
            let batch: Vec<Sample> = data.samples().choose_multiple(&mut r, n).cloned().collect();
            let pairs = batch_augment(&batch, aug.op.as_ref(), &aug.prior, data.oracle(), copies, aug.policy, case_seed)?;
            Ok((case_seed, n, copies, risk::decompose(&model, &pairs)?))
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
    let worst = rows.iter().map(|r| r.3.residual).fold(0.0, f64::max);
    let pass = rows.iter().all(|r| r.3.residual <= DECOMPOSITION_TOLERANCE);
    let table = rows.iter().enumerate().map(|(k, (seed, n, m, d))| {
        vec![k.to_string(), seed.to_string(), n.to_string(), m.to_string(), f(d.shifted_risk), f(d.clean_risk), f(d.gap), f(d.residual)]
    });
    fs::write(
        dir.join("decomposition.csv"),
        csv(&["case", "seed", "n", "m", "shifted_risk", "clean_risk", "gap", "residual"], table),
    )?;
    if !pass {
        eprintln!("decomposition violated: worst residual {worst:e}");
    }
    let mut s = Summary::new();
    s.push("cases", rows.len()).push("worst_residual", worst).push("tolerance", DECOMPOSITION_TOLERANCE).verdict("decomposition", pass);
    finish(dir, s, pass)
}

/// Sandwich bounds on random (model, x, x') draws with x' from the CAN of x.
pub fn bounds_check(ctx: &Context) -> CmdResult {
    let dir = ctx.prepare()?;
    let data = ctx.config.build_dataset(ctx.seed)?;
    let aug = ctx.config.build_augment(data.dim())?;
    let draws = ctx.config.experiment.draws;
    let rows: Vec<Result<(usize, risk::SandwichReport), CliError>> = (0..draws)
        .into_par_iter()
        .map(|k| {
            let draw_seed = rng::derive_seed(ctx.seed, &[tag::TRIAL, k as u64]);
            let mut r = rng::stream(draw_seed, &[]);
            let model = random_model(ctx, &data, draw_seed, &mut r)?;
            let i = r.random_range(0..data.len());
            let s = &data.samples()[i];
            let pair = sample_with_policy(aug.op.as_ref(), &aug.prior, data.oracle(), s, i, aug.policy, &mut r)?;
            Ok((s.y, sandwich_bounds(&model, &s.x, &pair.x_prime, s.y)?))
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
    let count = |pred: fn(&risk::SandwichReport) -> bool| rows.iter().filter(|(_, r)| !pred(r)).count();
    let upper_bad = count(risk::SandwichReport::upper_holds);
    let lower_bad = count(risk::SandwichReport::lower_holds);
    let mvt_bad = count(risk::SandwichReport::lower_mvt_holds);
    let table = rows.iter().enumerate().map(|(k, (y, r))| {
        vec![
            k.to_string(),
            y.to_string(),
            f(r.lhs),
            f(r.lower),
            f(r.upper),
            f(r.alpha_star),
            f(r.beta_star),
            f(r.lower_mvt),
            u8::from(r.holds()).to_string(),
            u8::from(r.lower_mvt_holds() && r.upper_holds()).to_string(),
        ]
    });
    fs::write(
        dir.join("bounds.csv"),
        csv(
            &["draw", "y", "lhs", "lower", "upper", "alpha_star", "beta_star", "lower_mvt", "holds", "holds_mvt"],
            table,
        ),
    )?;
    let pass = upper_bad == 0 && lower_bad == 0;
    if !pass {
        eprintln!("sandwich violated: {lower_bad} lower and {upper_bad} upper violations in {draws} draws");
    }
    let mut s = Summary::new();
    s.push("draws", rows.len())
        .push("violations_upper", upper_bad)
        .push("violations_lower", lower_bad)
        .push("violations_lower_mvt", mvt_bad)
        .verdict("sandwich", pass)
        .verdict("sandwich_mvt", upper_bad == 0 && mvt_bad == 0);
    finish(dir, s, pass)
}

/// Variance of the gap estimator against copies per sample, on a frozen model.
pub fn variance_scan_cmd(ctx: &Context) -> CmdResult {
    let dir = ctx.prepare()?;
    let data = ctx.config.build_dataset(ctx.seed)?;
    let aug = ctx.config.build_augment(data.dim())?;
    let e = &ctx.config.experiment;
    let mut clean = data.samples().to_vec();
    clean.shuffle(&mut rng::stream(ctx.seed, &[tag::SPLIT]));
    clean.truncate(e.n);
    let model = ProbModel::new(ctx.config.model_shape(data.dim(), data.num_classes()), ctx.model_seed(ctx.seed))?;
    let rows = variance_scan(&model, &clean, aug.op.as_ref(), &aug.prior, data.oracle(), &e.m_list, e.trials, aug.policy, ctx.seed)?;
    let table = rows.iter().map(|r| {
        vec![r.n.to_string(), r.m.to_string(), r.trials.to_string(), f(r.mean), f(r.empirical_variance)]
    });
    fs::write(dir.join("variance.csv"), csv(&["n", "m", "trials", "mean_gap", "variance"], table))?;
    let pts = rows
        .iter()
        .map(|r| (((r.n * r.m) as f64).ln(), r.empirical_variance.ln()))
        .collect();
    fs::write(
        dir.join("variance.svg"),
        line_plot("gap estimator variance", "ln(N·M)", "ln variance", &[Series { name: "empirical".into(), points: pts }]),
    )?;
    let slope = fit_loglog_slope(&rows);
    let pass = slope.is_some_and(|s| (SLOPE_RANGE.0..=SLOPE_RANGE.1).contains(&s));
    let mut s = Summary::new();
    s.push("n", clean.len())
        .push("trials", e.trials)
        .push("slope", slope.map_or("nan".to_string(), f))
        .push("slope_lower", SLOPE_RANGE.0)
        .push("slope_upper", SLOPE_RANGE.1)
        .verdict("variance_rate", pass);
    finish(dir, s, pass)
}

/// Dataset, splits, model and training config for one seed.
pub fn run_once(ctx: &Context, seed: u64, tc: &TrainConfig) -> Result<RunRecord, CliError> {
    let data = ctx.config.build_dataset(seed)?;
    let (tr, va, te) = data::split(&data, &ctx.config.split_spec(seed))?;
    let aug = ctx.config.build_augment(data.dim())?;
    let model = ProbModel::new(ctx.config.model_shape(data.dim(), data.num_classes()), ctx.model_seed(seed))?;
    let mut tc = tc.clone();
    tc.seed = seed;
    tc.copies = aug.copies;
    tc.max_attempts = aug.policy.max_attempts;
    tc.fallback = aug.policy.fallback;
    Ok(train::train(&tc, model, &tr, &va, &te, aug.op.as_ref(), &aug.prior, data.oracle())?)
}

fn accuracy_plot(rec: &RunRecord) -> String {
    let curve = |g: fn(&train::EpochRow) -> f64| rec.epochs.iter().map(|r| (r.epoch as f64, g(r))).collect();
    line_plot(
        "accuracy",
        "epoch",
        "accuracy",
        &[
            Series { name: "train".into(), points: curve(|r| r.train_acc) },
            Series { name: "val".into(), points: curve(|r| r.val_acc) },
        ],
    )
}

pub fn train_cmd(ctx: &Context) -> CmdResult {
    ctx.prepare()?;
    let rec = run_once(ctx, ctx.seed, &ctx.config.train)?;
    let dir = ctx.out.join(format!("run-{}-seed{}", ctx.config_hash(), ctx.seed));
    rec.persist(&dir)?;
    fs::write(dir.join("config.toml"), ctx.snapshot())?;
    fs::write(dir.join("accuracy.svg"), accuracy_plot(&rec))?;
    let mut s = Summary::new();
    for line in rec.summary().lines() {
        if let Some((k, v)) = line.split_once('=') {
            s.push(k, v);
        }
    }
    s.push("run_dir", dir.display());
    finish(&ctx.out, s, true)
}

struct Cell {
    lambda: f64,
    seed: u64,
    acc: f64,
    risk: f64,
    best_acc: f64,
    status: &'static str,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let (m, var) = mean_and_variance(v);
    (m, var.sqrt())
}

/// One run per (λ, seed) under the decomposed objective; failed cells are
/// recorded as NaN rows.
pub fn ablate_lambda(ctx: &Context, lambdas: &[f64], seeds: &[u64]) -> CmdResult {
    let dir = ctx.prepare()?;
    if let Some(l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(ConfigError::Field {
            field: "experiment.lambdas".into(),
            message: format!("{l} is outside [0, 1]"),
        }
        .into());
    }
    let cells: Vec<(f64, u64)> = lambdas.iter().flat_map(|&l| seeds.iter().map(move |&s| (l, s))).collect();
    let results: Vec<Result<RunRecord, CliError>> = cells
        .par_iter()
        .map(|&(lambda, seed)| {
            let tc = TrainConfig {
                strategy: Strategy::Ours,
                lambda,
                ..ctx.config.train.clone()
            };
            run_once(ctx, seed, &tc)
        })
        .collect();
    let mut cell_rows = Vec::new();
    for ((lambda, seed), res) in cells.iter().zip(&results) {
        match res {
            Ok(rec) => {
                rec.persist(dir.join("cells").join(format!("lambda{lambda}-seed{seed}")))?;
                cell_rows.push(Cell {
                    lambda: *lambda,
                    seed: *seed,
                    acc: rec.test_acc,
                    risk: rec.test_clean_risk,
                    best_acc: rec.best_test_acc,
                    status: "ok",
                });
            }
            Err(e) => {
                eprintln!("cell lambda={lambda} seed={seed} failed: {e}");
                cell_rows.push(Cell {
                    lambda: *lambda,
                    seed: *seed,
                    acc: f64::NAN,
                    risk: f64::NAN,
                    best_acc: f64::NAN,
                    status: "failed",
                });
            }
        }
    }
    fs::write(
        dir.join("cells.csv"),
        csv(
            &["lambda", "seed", "test_acc", "test_clean_risk", "best_test_acc", "status"],
            cell_rows.iter().map(|c| vec![f(c.lambda), c.seed.to_string(), f(c.acc), f(c.risk), f(c.best_acc), c.status.into()]),
        ),
    )?;
    let mut table = Vec::new();
    let mut acc_pts = Vec::new();
    for &lambda in lambdas {
        let of = |g: fn(&Cell) -> f64| -> Vec<f64> {
            cell_rows.iter().filter(|c| c.lambda == lambda).map(g).collect()
        };
        let (acc, acc_sd) = mean_std(&of(|c| c.acc));
        let (risk, risk_sd) = mean_std(&of(|c| c.risk));
        acc_pts.push((lambda, acc));
        table.push(vec![f(lambda), seeds.len().to_string(), f(acc), f(acc_sd), f(risk), f(risk_sd)]);
    }
    fs::write(
        dir.join("table.csv"),
        csv(&["lambda", "runs", "mean_test_acc", "std_test_acc", "mean_test_clean_risk", "std_test_clean_risk"], table),
    )?;
    fs::write(
        dir.join("ablation.svg"),
        line_plot("test accuracy by lambda", "lambda", "mean test accuracy", &[Series { name: "ours".into(), points: acc_pts }]),
    )?;
    let failed = cell_rows.iter().filter(|c| c.status != "ok").count();
    let mut s = Summary::new();
    s.push("cells", cell_rows.len()).push("failed_cells", failed);
    finish(dir, s, true)
}

/// Write the dataset and its splits as CSV, plus IDX files for image data.
pub fn export_data(ctx: &Context) -> CmdResult {
    let dir = ctx.prepare()?;
    let data = ctx.config.build_dataset(ctx.seed)?;
    let (tr, va, te) = data::split(&data, &ctx.config.split_spec(ctx.seed))?;
    fs::write(dir.join("dataset.csv"), data.to_csv())?;
    for (name, part) in [("train", &tr), ("val", &va), ("test", &te)] {
        fs::write(dir.join(format!("{name}.csv")), part.to_csv())?;
    }
    if data.image_shape().is_some() {
        let (images, labels) = data::write_idx(&data)?;
        fs::write(dir.join("images.idx"), images)?;
        fs::write(dir.join("labels.idx"), labels)?;
    }
    let counts: Vec<String> = data.class_counts().iter().map(usize::to_string).collect();
    let mut s = Summary::new();
    s.push("samples", data.len())
        .push("classes", data.num_classes())
        .push("class_counts", counts.join(" "))
        .push("train", tr.len())
        .push("val", va.len())
        .push("test", te.len());
    finish(dir, s, true)
}
