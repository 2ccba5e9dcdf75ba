//! Standard augmented training and the λ-weighted decomposed objective,
//! driven by SGD with momentum, weight decay, linear warmup and a cosine or
//! step schedule.
//!
//! The λ-weighted loss is `−log q(y|x) + λ·[log q(y|x) − log q(y|x')]`, so
//! λ = 0 is clean cross-entropy and λ = 1 is the standard augmented loss.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::Augmentation;
use crate::cansample::{batch_augment, sample_with_policy, AugmentedPair, ConceptionOracle, ParamPrior, SamplingPolicy};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{grad_loss, LossExpr, ProbModel};
use crate::risk;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Standard,
    Ours,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    /// Multiply the rate by `factor` at each milestone epoch.
    Step { milestones: Vec<usize>, factor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub schedule: Schedule,
    pub seed: u64,
    /// Augmented copies per clean sample.
    pub copies: usize,
    pub max_attempts: usize,
    /// Use the identity pair when rejection is exhausted.
    pub fallback: bool,
    /// Double the batch size, as the equal-sample-count baseline.
    pub double_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Ours,
            lambda: 0.5,
            batch_size: 32,
            epochs: 20,
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            warmup_epochs: 1,
            schedule: Schedule::Cosine,
            seed: 0,
            copies: 1,
            max_attempts: crate::cansample::DEFAULT_MAX_ATTEMPTS,
            fallback: true,
            double_batch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return bad(format!("base_lr must be finite and nonnegative, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return bad(format!("weight_decay must be finite and nonnegative, got {}", self.weight_decay));
        }
        if self.copies == 0 {
            return bad("copies must be at least 1".into());
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be at least 1".into());
        }
        if let Schedule::Step { factor, .. } = &self.schedule {
            if !(*factor > 0.0) || !factor.is_finite() {
                return bad(format!("step factor must be finite and positive, got {factor}"));
            }
        }
        Ok(())
    }

    pub fn effective_batch(&self) -> usize {
        if self.double_batch {
            2 * self.batch_size
        } else {
            self.batch_size
        }
    }

    pub fn policy(&self) -> SamplingPolicy {
        SamplingPolicy {
            max_attempts: self.max_attempts,
            fallback: self.fallback,
        }
    }

    /// λ actually applied: the standard strategy is λ = 1.
    pub fn effective_lambda(&self) -> f64 {
        match self.strategy {
            Strategy::Standard => 1.0,
            Strategy::Ours => self.lambda,
        }
    }
}

/// Learning-rate trajectory of a run, in optimizer steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub steps_per_epoch: usize,
    pub schedule: Schedule,
}

impl LrSchedule {
    pub fn new(config: &TrainConfig, train_len: usize) -> Self {
        let steps_per_epoch = train_len.div_ceil(config.effective_batch()).max(1);
        Self {
            base_lr: config.base_lr,
            warmup_steps: config.warmup_epochs * steps_per_epoch,
            total_steps: config.epochs * steps_per_epoch,
            steps_per_epoch,
            schedule: config.schedule.clone(),
        }
    }

    /// Linear warmup `base·(t+1)/w`, then cosine decay or step decay.
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match &self.schedule {
            Schedule::Cosine => {
                let span = self.total_steps.saturating_sub(self.warmup_steps);
                if span == 0 {
                    return self.base_lr;
                }
                let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
                self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
            Schedule::Step { milestones, factor } => {
                let epoch = step / self.steps_per_epoch;
                let passed = milestones.iter().filter(|&&m| m <= epoch).count();
                self.base_lr * factor.powi(passed as i32)
            }
        }
    }
}

pub fn lr_at(config: &TrainConfig, train_len: usize, step: usize) -> f64 {
    LrSchedule::new(config, train_len).at(step)
}

/// Mean of `−log q(y|x')` over the pairs, computed exactly as the shifted risk.
pub fn loss_standard(model: &ProbModel, pairs: &[AugmentedPair]) -> Result<f64> {
    risk::shifted_risk(model, pairs)
}

/// Clean cross-entropy plus λ times the consistency gap.
pub fn loss_ours(model: &ProbModel, pairs: &[AugmentedPair], lambda: f64) -> Result<f64> {
    let gs = risk::groups(pairs)?;
    let clean: Vec<Sample> = gs
        .iter()
        .map(|g| Sample {
            x: g[0].x.clone(),
            y: g[0].y,
        })
        .collect();
    let clean = risk::clean_risk(model, &clean)?;
    if lambda == 0.0 {
        return Ok(clean);
    }
    Ok(clean + lambda * risk::gap_estimator(model, pairs)?)
}

/// `−(1/NM) Σ log q(y|x')`
pub fn standard_expr(pairs: &[AugmentedPair]) -> Result<LossExpr<'_>> {
    loss_expr(pairs, 1.0)
}

/// Per clean sample: `(λ−1)/N · log q(y|x)` and `−λ/(NM) · log q(y|x')`
/// for each copy. Zero coefficients are dropped, so λ = 1 yields the same
/// expression as [`standard_expr`] and λ = 0 the clean cross-entropy.
pub fn loss_expr(pairs: &[AugmentedPair], lambda: f64) -> Result<LossExpr<'_>> {
    let gs = risk::groups(pairs)?;
    let n = gs.len() as f64;
    let mut expr = LossExpr::new();
    for g in gs {
        let m = g.len() as f64;
        expr.push((lambda - 1.0) / n, &g[0].x, g[0].y);
        for p in g {
            expr.push(-lambda / (n * m), &p.x_prime, p.y);
        }
    }
    Ok(expr)
}

/// SGD with heavy-ball momentum; decay applies where `mask` is true.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
    mask: Vec<bool>,
}

impl Sgd {
    pub fn new(model: &ProbModel, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: vec![0.0; model.params().len()],
            mask: model.decay_mask(),
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        for k in 0..params.len() {
            let mut g = grad[k];
            if self.mask[k] {
                g += self.weight_decay * params[k];
            }
            self.velocity[k] = self.momentum * self.velocity[k] + g;
            params[k] -= lr * self.velocity[k];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub clean_risk: f64,
    pub shifted_risk: f64,
    pub gap: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    /// Rate at the epoch's first step.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRow>,
    pub steps: Vec<StepRow>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    /// Test metrics of the final model.
    pub test_acc: f64,
    pub test_clean_risk: f64,
    /// Test accuracy of the best-validation checkpoint.
    pub best_test_acc: f64,
    pub fallbacks: usize,
    pub final_model: ProbModel,
    pub best_model: ProbModel,
}

pub fn accuracy(model: &ProbModel, samples: &[Sample]) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let hits = samples.iter().filter(|s| model.predict(&s.x) == s.y).count();
    hits as f64 / samples.len() as f64
}

/// Train `model` on `train` with fresh augmentations every epoch, keeping
/// the checkpoint with the best validation accuracy.
#[allow(clippy::too_many_arguments)]
pub fn train<A: Augmentation + ?Sized>(
    config: &TrainConfig,
    mut model: ProbModel,
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    op: &A,
    prior: &ParamPrior,
    oracle: &ConceptionOracle,
) -> Result<RunRecord> {
    config.validate()?;
    for d in [train, val, test] {
        if d.is_empty() {
            return Err(Error::EmptyBatch);
        }
    }
    prior.check_support(op.space())?;
    let sched = LrSchedule::new(config, train.len());
    let lambda = config.effective_lambda();
    let policy = config.policy();
    let mut opt = Sgd::new(&model, config.momentum, config.weight_decay);
    let samples = train.samples();

    let mut epochs = Vec::with_capacity(config.epochs);
    let mut steps = Vec::with_capacity(sched.total_steps);
    let mut best: Option<(usize, f64, ProbModel)> = None;
    let mut fallbacks = 0;
    let mut step = 0;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng::stream(config.seed, &[rng::tag::SHUFFLE, epoch as u64]));
        let epoch_lr = sched.at(step);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(config.effective_batch()) {
            let lr = sched.at(step);
            let groups: Vec<Result<Vec<AugmentedPair>>> = batch
                .par_iter()
                .map(|&i| {
                    let mut r = rng::stream(config.seed, &[rng::tag::AUGMENT, epoch as u64, i as u64]);
                    (0..config.copies)
                        .map(|j| {
                            let mut p = sample_with_policy(op, prior, oracle, &samples[i], i, policy, &mut r)?;
                            p.copy_index = j;
                            Ok(p)
                        })
                        .collect()
                })
                .collect();
            let mut pairs = Vec::with_capacity(batch.len() * config.copies);
            for g in groups {
                pairs.extend(g?);
            }
            fallbacks += pairs.iter().filter(|p| !p.accepted).count();
            let expr = loss_expr(&pairs, lambda)?;
            let report = match grad_loss(&model, &expr) {
                Ok(r) if r.loss.is_finite() => r,
                Ok(_) | Err(Error::NonFiniteGradient(_)) => return Err(Error::NonFiniteLoss { step }),
                Err(e) => return Err(e),
            };
            let loss = report.loss;
            opt.step(model.params_mut(), &report.grad, lr);
            steps.push(StepRow { step, epoch, loss, lr });
            loss_sum += loss;
            batches += 1;
            step += 1;
        }

        let eval_seed = rng::derive_seed(config.seed, &[rng::tag::EVAL, epoch as u64]);
        let eval_pairs = batch_augment(samples, op, prior, oracle, config.copies, policy, eval_seed)?;
        let dec = risk::decompose(&model, &eval_pairs)?;
        let val_acc = accuracy(&model, val.samples());
        epochs.push(EpochRow {
            epoch,
            train_loss: loss_sum / batches as f64,
            clean_risk: dec.clean_risk,
            shifted_risk: dec.shifted_risk,
            gap: dec.gap,
            train_acc: accuracy(&model, samples),
            val_acc,
            lr: epoch_lr,
        });
        if best.as_ref().is_none_or(|b| val_acc > b.1) {
            best = Some((epoch, val_acc, model.clone()));
        }
    }

    let (best_epoch, best_val_acc, best_model) = best.expect("at least one epoch");
    Ok(RunRecord {
        config: config.clone(),
        epochs,
        steps,
        best_epoch,
        best_val_acc,
        test_acc: accuracy(&model, test.samples()),
        test_clean_risk: risk::clean_risk(&model, test.samples())?,
        best_test_acc: accuracy(&best_model, test.samples()),
        fallbacks,
        final_model: model,
        best_model,
    })
}

impl RunRecord {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,clean_risk,shifted_risk,gap,train_acc,val_acc,lr\n");
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.epoch, r.train_loss, r.clean_risk, r.shifted_risk, r.gap, r.train_acc, r.val_acc, r.lr
            );
        }
        s
    }

    pub fn steps_csv(&self) -> String {
        let mut s = String::from("step,epoch,loss,lr\n");
        for r in &self.steps {
            let _ = writeln!(s, "{},{},{},{}", r.step, r.epoch, r.loss, r.lr);
        }
        s
    }

    /// `key=value` lines.
    pub fn summary(&self) -> String {
        let c = &self.config;
        let strategy = match c.strategy {
            Strategy::Standard => "standard",
            Strategy::Ours => "ours",
        };
        let mut s = String::new();
        let _ = writeln!(s, "strategy={strategy}");
        let _ = writeln!(s, "lambda={}", c.effective_lambda());
        let _ = writeln!(s, "seed={}", c.seed);
        let _ = writeln!(s, "epochs={}", c.epochs);
        let _ = writeln!(s, "steps={}", self.steps.len());
        let _ = writeln!(s, "best_epoch={}", self.best_epoch);
        let _ = writeln!(s, "best_val_acc={}", self.best_val_acc);
        let _ = writeln!(s, "best_test_acc={}", self.best_test_acc);
        let _ = writeln!(s, "test_acc={}", self.test_acc);
        let _ = writeln!(s, "test_clean_risk={}", self.test_clean_risk);
        let _ = writeln!(s, "fallbacks={}", self.fallbacks);
        s
    }

    /// Write `metrics.csv`, `steps.csv`, `summary.txt`, `model.ckpt` (best
    /// validation) and `final.ckpt` into `dir`.
    pub fn persist(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
        fs::write(dir.join("steps.csv"), self.steps_csv())?;
        fs::write(dir.join("summary.txt"), self.summary())?;
        self.best_model.save(dir.join("model.ckpt"))?;
        self.final_model.save(dir.join("final.ckpt"))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugmentationOp;
    use crate::data::{gen_blobs, split, SplitSpec};
    use crate::model::{check_gradient, Activation, ModelShape};

    fn shape(input: usize, classes: usize) -> ModelShape {
        ModelShape {
            input_dim: input,
            widths: vec![5],
            num_classes: classes,
            activation: Activation::Tanh,
        }
    }

    fn pairs_for(data: &Dataset, copies: usize, seed: u64) -> Vec<AugmentedPair> {
        let op = AugmentationOp::rotation2d();
        let prior = ParamPrior::default_for(&op);
        batch_augment(data.samples(), &op, &prior, data.oracle(), copies, SamplingPolicy::default(), seed).unwrap()
    }

    #[test]
    fn uniform_model_losses() {
        let data = gen_blobs(10, 2, 2, 3.0, 0).unwrap();
        let mut m = ProbModel::new(shape(2, 10), 0).unwrap();
        m.zero_head();
        let pairs = pairs_for(&data, 2, 1);
        assert!((loss_standard(&m, &pairs).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!((loss_ours(&m, &pairs, 0.5).unwrap() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn identity_augmentation_is_clean_ce() {
        let data = gen_blobs(3, 2, 4, 3.0, 2).unwrap();
        let m = ProbModel::new(shape(2, 3), 1).unwrap();
        let pairs: Vec<AugmentedPair> = data
            .samples()
            .iter()
            .enumerate()
            .map(|(i, s)| AugmentedPair {
                sample_index: i,
                copy_index: 0,
                x: s.x.clone(),
                y: s.y,
                x_prime: s.x.clone(),
                theta: vec![0.0],
                attempts: 1,
                accepted: true,
            })
            .collect();
        let ce = risk::clean_risk(&m, data.samples()).unwrap();
        assert!((loss_standard(&m, &pairs).unwrap() - ce).abs() < 1e-14);
    }

    #[test]
    fn lambda_endpoints() {
        let data = gen_blobs(3, 2, 5, 2.0, 3).unwrap();
        let m = ProbModel::new(shape(2, 3), 4).unwrap();
        let pairs = pairs_for(&data, 3, 5);
        let clean: Vec<Sample> = pairs.chunks(3).map(|g| Sample { x: g[0].x.clone(), y: g[0].y }).collect();
        assert_eq!(loss_ours(&m, &pairs, 0.0).unwrap(), risk::clean_risk(&m, &clean).unwrap());
        assert_eq!(loss_standard(&m, &pairs).unwrap(), risk::shifted_risk(&m, &pairs).unwrap());
        let d = (loss_ours(&m, &pairs, 1.0).unwrap() - loss_standard(&m, &pairs).unwrap()).abs();
        assert!(d < 1e-10);
    }

    #[test]
    fn expressions_match_losses_and_gradients() {
        let data = gen_blobs(3, 2, 3, 2.0, 6).unwrap();
        let m = ProbModel::new(shape(2, 3), 7).unwrap();
        let pairs = pairs_for(&data, 2, 8);
        for lambda in [0.0, 0.3, 1.0] {
            let expr = loss_expr(&pairs, lambda).unwrap();
            assert!((expr.value(&m) - loss_ours(&m, &pairs, lambda).unwrap()).abs() < 1e-12);
            let rep = check_gradient(&m, &expr, 1e-6).unwrap();
            assert!(rep.finite_diff_max_rel_err.unwrap() <= 1e-4);
        }
        let a = grad_loss(&m, &loss_expr(&pairs, 1.0).unwrap()).unwrap();
        let b = grad_loss(&m, &standard_expr(&pairs).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig {
            base_lr: 0.4,
            epochs: 10,
            warmup_epochs: 2,
            batch_size: 10,
            ..TrainConfig::default()
        };
        let s = LrSchedule::new(&cfg, 100);
        assert_eq!(s.steps_per_epoch, 10);
        assert_eq!(s.at(0), 0.4 / 20.0);
        assert_eq!(s.at(19), 0.4);
        assert_eq!(s.at(20), 0.4);
        assert!((s.at(60) - 0.2).abs() < 1e-15);
        let step = TrainConfig {
            schedule: Schedule::Step {
                milestones: vec![3, 6],
                factor: 0.1,
            },
            warmup_epochs: 0,
            ..cfg
        };
        let s = LrSchedule::new(&step, 100);
        assert_eq!(s.at(29), 0.4);
        assert!((s.at(30) - 0.04).abs() < 1e-15);
        assert!((s.at(99) - 0.004).abs() < 1e-15);
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            TrainConfig { lambda: 1.5, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { epochs: 0, ..Default::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        }
    }

    fn setup() -> (Dataset, Dataset, Dataset, ProbModel) {
        let data = gen_blobs(3, 2, 20, 3.0, 11).unwrap();
        let (tr, va, te) = split(&data, &SplitSpec::default()).unwrap();
        (tr, va, te, ProbModel::new(shape(2, 3), 12).unwrap())
    }

    fn run(cfg: &TrainConfig) -> Result<RunRecord> {
        let (tr, va, te, m) = setup();
        let op = AugmentationOp::rotation2d();
        let prior = ParamPrior::default_for(&op);
        train(cfg, m, &tr, &va, &te, &op, &prior, tr.oracle())
    }

    #[test]
    fn zero_lr_is_a_fixed_point() {
        let cfg = TrainConfig { epochs: 1, base_lr: 0.0, batch_size: 8, ..Default::default() };
        let rec = run(&cfg).unwrap();
        let (_, _, _, m0) = setup();
        assert_eq!(rec.final_model.params(), m0.params());
        assert_eq!(rec.epochs.len(), 1);
        assert!(rec.steps.iter().all(|s| s.lr == 0.0));
    }

    #[test]
    fn seeded_runs_are_identical() {
        let cfg = TrainConfig { epochs: 3, batch_size: 8, ..Default::default() };
        assert_eq!(run(&cfg).unwrap(), run(&cfg).unwrap());
    }

    #[test]
    fn lambda_one_matches_standard() {
        let ours = TrainConfig { epochs: 3, batch_size: 8, strategy: Strategy::Ours, lambda: 1.0, ..Default::default() };
        let std = TrainConfig { strategy: Strategy::Standard, ..ours.clone() };
        let a = run(&ours).unwrap();
        let b = run(&std).unwrap();
        for (x, y) in a.steps.iter().zip(&b.steps) {
            assert!((x.loss - y.loss).abs() <= 1e-10);
        }
        assert_eq!(a.final_model, b.final_model);
    }

    #[test]
    fn divergence_reports_the_step() {
        let cfg = TrainConfig { epochs: 2, base_lr: 1e300, warmup_epochs: 0, batch_size: 8, ..Default::default() };
        assert!(matches!(run(&cfg), Err(Error::NonFiniteLoss { .. })));
    }

    #[test]
    fn persisted_run_directory() {
        let cfg = TrainConfig { epochs: 2, batch_size: 8, ..Default::default() };
        let rec = run(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        rec.persist(dir.path()).unwrap();
        let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 3);
        assert_eq!(ProbModel::load(dir.path().join("model.ckpt")).unwrap(), rec.best_model);
    }
}
