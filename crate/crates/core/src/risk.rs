//! Clean and shifted empirical risks, the consistency gap, and checks of
//! the exact decomposition `shifted = clean + gap`.
//!
//! Pairs are grouped by clean sample: `N` groups of `M` augmented copies.
//! Every log-ratio `log q(y|x) − log q(y|x')` is formed from log-densities;
//! probability ratios are never materialized.

use rayon::prelude::*;

use crate::augment::Augmentation;
use crate::cansample::{sample_with_policy, AugmentedPair, ConceptionOracle, ParamPrior, SamplingPolicy};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{logsumexp, ProbModel};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskDecomposition {
    pub shifted_risk: f64,
    pub clean_risk: f64,
    pub gap: f64,
    /// `|shifted − (clean + gap)|`
    pub residual: f64,
}

/// Mean of `−log q(y_i|x_i)`.
pub fn clean_risk(model: &ProbModel, batch: &[Sample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let total: f64 = batch.iter().map(|s| -model.log_q(&s.x, s.y)).sum();
    Ok(total / batch.len() as f64)
}

/// Split pairs into runs of equal `sample_index`, all of the same size.
pub fn groups(pairs: &[AugmentedPair]) -> Result<Vec<&[AugmentedPair]>> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut out = Vec::new();
    let mut start = 0;
    for k in 1..=pairs.len() {
        if k == pairs.len() || pairs[k].sample_index != pairs[start].sample_index {
            out.push(&pairs[start..k]);
            start = k;
        }
    }
    let m = out[0].len();
    if let Some(g) = out.iter().find(|g| g.len() != m) {
        return Err(Error::RaggedGroups {
            first: m,
            other: g.len(),
        });
    }
    Ok(out)
}

/// `(1/N) Σ_i (1/M) Σ_j f(group_i, copy_j)`
fn double_mean<F>(groups: &[&[AugmentedPair]], mut per_group: impl FnMut(&AugmentedPair) -> F) -> f64
where
    F: FnMut(&AugmentedPair) -> f64,
{
    let mut outer = 0.0;
    for g in groups {
        let mut f = per_group(&g[0]);
        let mut inner = 0.0;
        for p in g.iter() {
            inner += f(p);
        }
        outer += inner / g.len() as f64;
    }
    outer / groups.len() as f64
}

/// `(1/N) Σ_i (1/M) Σ_j −log q(y_i | x'_ij)`
pub fn shifted_risk(model: &ProbModel, pairs: &[AugmentedPair]) -> Result<f64> {
    let gs = groups(pairs)?;
    Ok(double_mean(&gs, |_| |p: &AugmentedPair| -model.log_q(&p.x_prime, p.y)))
}

/// `(1/N) Σ_i (1/M) Σ_j [log q(y_i|x_i) − log q(y_i|x'_ij)]`
pub fn gap_estimator(model: &ProbModel, pairs: &[AugmentedPair]) -> Result<f64> {
    let gs = groups(pairs)?;
    Ok(double_mean(&gs, |head| {
        let clean = model.log_q(&head.x, head.y);
        move |p: &AugmentedPair| clean - model.log_q(&p.x_prime, p.y)
    }))
}

/// Shifted risk, clean risk (on the deduplicated clean samples), gap, and
/// the residual of the identity between them.
pub fn decompose(model: &ProbModel, pairs: &[AugmentedPair]) -> Result<RiskDecomposition> {
    let gs = groups(pairs)?;
    let clean: Vec<Sample> = gs
        .iter()
        .map(|g| Sample {
            x: g[0].x.clone(),
            y: g[0].y,
        })
        .collect();
    let clean_risk = clean_risk(model, &clean)?;
    let shifted_risk = shifted_risk(model, pairs)?;
    let gap = gap_estimator(model, pairs)?;
    Ok(RiskDecomposition {
        shifted_risk,
        clean_risk,
        gap,
        residual: (shifted_risk - (clean_risk + gap)).abs(),
    })
}

/// Quantities of the two-sided bound on `|ln ρ_x − ln ρ_x'|`, where
/// `ρ_{x,j} = exp((w_j − w_y)ᵀ h(x))` and `ρ_x = Σ_j ρ_{x,j}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SandwichReport {
    /// `|ln ρ_x − ln ρ_x'|`, equal to `|log q(y|x) − log q(y|x')|`.
    pub lhs: f64,
    /// `|ρ_x − ρ_x'| / max(β*, 1)`
    pub lower: f64,
    /// `|ρ_x − ρ_x'| / α*`
    pub upper: f64,
    /// `min_j` over both samples of `ρ_{·,j}`.
    pub alpha_star: f64,
    /// `max_j` over both samples of `ρ_{·,j}`.
    pub beta_star: f64,
    pub rho_x: f64,
    pub rho_x_prime: f64,
    /// `|ρ_x − ρ_x'| / max(ρ_x, ρ_x')`: the mean-value lower bound with the
    /// exponential's slope bounded by the larger of the two sums.
    pub lower_mvt: f64,
}

/// Relative slack for rounding in the bound comparisons.
pub const SANDWICH_SLACK: f64 = 1e-12;

fn le(a: f64, b: f64) -> bool {
    a <= b + SANDWICH_SLACK * b.abs().max(a.abs()) + f64::MIN_POSITIVE
}

impl SandwichReport {
    pub fn upper_holds(&self) -> bool {
        le(self.lhs, self.upper)
    }

    /// `lower ≤ lhs` with `β*` taken over the per-class terms.
    pub fn lower_holds(&self) -> bool {
        le(self.lower, self.lhs)
    }

    pub fn holds(&self) -> bool {
        self.lower_holds() && self.upper_holds()
    }

    pub fn lower_mvt_holds(&self) -> bool {
        le(self.lower_mvt, self.lhs)
    }
}

pub fn sandwich_bounds(model: &ProbModel, x: &[f64], x_prime: &[f64], y: usize) -> Result<SandwichReport> {
    let shifted = |x: &[f64]| -> Vec<f64> {
        let z = model.logits(x);
        z.iter().map(|v| v - z[y]).collect()
    };
    let u = shifted(x);
    let u_prime = shifted(x_prime);
    let ln_rho_x = logsumexp(&u);
    let ln_rho_xp = logsumexp(&u_prime);
    let terms = u.iter().chain(&u_prime).map(|v| v.exp());
    let alpha_star = terms.clone().fold(f64::INFINITY, f64::min);
    let beta_star = terms.fold(0.0, f64::max);
    let rho_x = ln_rho_x.exp();
    let rho_x_prime = ln_rho_xp.exp();
    if !(alpha_star > 0.0) || !beta_star.is_finite() || !rho_x.is_finite() || !rho_x_prime.is_finite() {
        return Err(Error::DegenerateBounds(alpha_star));
    }
    let diff = (rho_x - rho_x_prime).abs();
    Ok(SandwichReport {
        lhs: (ln_rho_x - ln_rho_xp).abs(),
        lower: diff / beta_star.max(1.0),
        upper: diff / alpha_star,
        alpha_star,
        beta_star,
        rho_x,
        rho_x_prime,
        lower_mvt: diff / rho_x.max(rho_x_prime),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceScanRow {
    pub n: usize,
    pub m: usize,
    pub trials: usize,
    pub mean: f64,
    pub empirical_variance: f64,
}

pub const MIN_SCAN_TRIALS: usize = 100;

/// Empirical variance of the gap estimator over independent augmentation
/// redraws, with the clean samples and the model held fixed.
#[allow(clippy::too_many_arguments)]
pub fn variance_scan<A: Augmentation + ?Sized>(
    model: &ProbModel,
    clean: &[Sample],
    op: &A,
    prior: &ParamPrior,
    oracle: &ConceptionOracle,
    m_list: &[usize],
    trials: usize,
    policy: SamplingPolicy,
    seed: u64,
) -> Result<Vec<VarianceScanRow>> {
    if trials < MIN_SCAN_TRIALS {
        return Err(Error::InvalidConfig(format!(
            "variance scan needs at least {MIN_SCAN_TRIALS} trials, got {trials}"
        )));
    }
    if clean.is_empty() {
        return Err(Error::EmptyBatch);
    }
    prior.check_support(op.space())?;
    let mut rows = Vec::with_capacity(m_list.len());
    for &m in m_list {
        if m == 0 {
            return Err(Error::InvalidConfig("copies per clean sample must be at least 1".into()));
        }
        let estimates: Vec<Result<f64>> = (0..trials)
            .into_par_iter()
            .map(|t| {
                let mut rng = rng::stream(seed, &[rng::tag::TRIAL, m as u64, t as u64]);
                let mut pairs = Vec::with_capacity(clean.len() * m);
                for (i, s) in clean.iter().enumerate() {
                    for j in 0..m {
                        let mut p = sample_with_policy(op, prior, oracle, s, i, policy, &mut rng)?;
                        p.copy_index = j;
                        pairs.push(p);
                    }
                }
                gap_estimator(model, &pairs)
            })
            .collect();
        let estimates = estimates.into_iter().collect::<Result<Vec<_>>>()?;
        let (mean, var) = mean_and_variance(&estimates);
        rows.push(VarianceScanRow {
            n: clean.len(),
            m,
            trials,
            mean,
            empirical_variance: var,
        });
    }
    Ok(rows)
}

/// Sample mean and unbiased sample variance. Deviations are taken from the
/// first value so that identical inputs give exactly zero.
pub fn mean_and_variance(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let k = values[0];
    let s: f64 = values.iter().map(|v| v - k).sum();
    let ss: f64 = values.iter().map(|v| (v - k) * (v - k)).sum();
    (mean, ((ss - s * s / n) / (n - 1.0)).max(0.0))
}

/// Least-squares slope of `ln(variance)` against `ln(N·M)`. `None` if any
/// variance is zero or fewer than two rows are given.
pub fn fit_loglog_slope(rows: &[VarianceScanRow]) -> Option<f64> {
    if rows.len() < 2 || rows.iter().any(|r| !(r.empirical_variance > 0.0)) {
        return None;
    }
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (((r.n * r.m) as f64).ln(), r.empirical_variance.ln()))
        .collect();
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        None
    } else {
        Some(sxy / sxx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureReport {
    pub index: usize,
    /// Batch mean of the entropy of `softmax_i(w_{i,d} h_d(x))`.
    pub mean_entropy: f64,
    /// `max_j |w_{j,d} − mean_j w_{j,d}|`
    pub weight_spread: f64,
    pub major: bool,
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Major/minor feature partition by mean per-feature entropy. The bias
/// feature is excluded. `tau` defaults to `ln(l) / 2`.
pub fn feature_diagnostics(model: &ProbModel, batch: &[Sample], tau: Option<f64>) -> Result<Vec<FeatureReport>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let l = model.num_classes();
    let tau = tau.unwrap_or((l as f64).ln() / 2.0);
    let feats: Vec<Vec<f64>> = batch.iter().map(|s| model.features(&s.x)).collect();
    Ok((0..model.feature_dim())
        .map(|d| {
            let mean_entropy = feats
                .iter()
                .map(|h| entropy(&model.feature_density_from(h, d)))
                .sum::<f64>()
                / batch.len() as f64;
            let w: Vec<f64> = (0..l).map(|i| model.head_weight(i, d)).collect();
            let wm = w.iter().sum::<f64>() / l as f64;
            let weight_spread = w.iter().map(|v| (v - wm).abs()).fold(0.0, f64::max);
            FeatureReport {
                index: d,
                mean_entropy,
                weight_spread,
                major: mean_entropy < tau,
            }
        })
        .collect())
}
