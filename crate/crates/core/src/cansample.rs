//! Sampling from consistency augmentation neighborhoods.
//!
//! The neighborhood of a clean sample `x` under an operator is the image of
//! its parameter box. Intersecting it with the level set of `x`'s class
//! gives the CAN. A draw from the CAN is a draw of `θ` from the prior
//! truncated to the pre-image of that level set, which is done here by
//! plain rejection against the conception oracle.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::augment::{Augmentation, AugmentationOp, OpKind, ParamSpace};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const DEFAULT_MAX_ATTEMPTS: usize = 1000;

/// Ground-truth labeler `C: X → {0, …, l-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ConceptionOracle {
    /// Class 1 when the first coordinate is positive, class 0 otherwise.
    HalfPlane,
    /// Index of the nearest center (lowest index on ties).
    NearestCenter { centers: Vec<Vec<f64>> },
    /// `min(floor(‖x‖ / width), classes - 1)`.
    RadialBands { width: f64, classes: usize },
    /// Label of the nearest stored point.
    NearestNeighbor {
        points: Vec<Vec<f64>>,
        labels: Vec<usize>,
        classes: usize,
    },
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

fn argmin_dist<'a>(points: impl Iterator<Item = &'a Vec<f64>>, x: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, p) in points.enumerate() {
        let d = sq_dist(p, x);
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

impl ConceptionOracle {
    pub fn label(&self, x: &[f64]) -> usize {
        match self {
            ConceptionOracle::HalfPlane => usize::from(x[0] > 0.0),
            ConceptionOracle::NearestCenter { centers } => argmin_dist(centers.iter(), x),
            ConceptionOracle::RadialBands { width, classes } => {
                let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                ((r / width).floor() as usize).min(classes - 1)
            }
            ConceptionOracle::NearestNeighbor { points, labels, .. } => {
                labels[argmin_dist(points.iter(), x)]
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ConceptionOracle::HalfPlane => 2,
            ConceptionOracle::NearestCenter { centers } => centers.len(),
            ConceptionOracle::RadialBands { classes, .. } => *classes,
            ConceptionOracle::NearestNeighbor { classes, .. } => *classes,
        }
    }
}

/// Distribution of the augmentation parameter on its box.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamPrior {
    UniformBox(ParamSpace),
    /// Independent Gaussians per coordinate, truncated to the box.
    TruncatedGaussian {
        mean: Vec<f64>,
        std: Vec<f64>,
        space: ParamSpace,
    },
    /// Uniform over a finite set of points (counting measure).
    PointMasses(Vec<Vec<f64>>),
    /// Independent blocks, one per operator of a composite.
    Product(Vec<ParamPrior>),
}

impl ParamPrior {
    pub fn uniform(space: ParamSpace) -> Self {
        ParamPrior::UniformBox(space)
    }

    pub fn truncated_gaussian(mean: Vec<f64>, std: Vec<f64>, space: ParamSpace) -> Result<Self> {
        if mean.len() != space.dims() || std.len() != space.dims() {
            return Err(Error::InvalidPrior(format!(
                "gaussian prior needs {} means and stds",
                space.dims()
            )));
        }
        if std.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidPrior("standard deviations must be positive".into()));
        }
        Ok(ParamPrior::TruncatedGaussian { mean, std, space })
    }

    pub fn point_masses(points: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = points.first() else {
            return Err(Error::InvalidPrior("no support points".into()));
        };
        let d = first.len();
        if d == 0 || points.iter().any(|p| p.len() != d) {
            return Err(Error::InvalidPrior("support points must share a nonzero dimension".into()));
        }
        Ok(ParamPrior::PointMasses(points))
    }

    /// Uniform on the operator's box; the flip gets mass 1/2 on each of 0 and 1.
    pub fn default_for(op: &AugmentationOp) -> Self {
        match op.kind() {
            OpKind::DiscreteFlip => ParamPrior::PointMasses(vec![vec![0.0], vec![1.0]]),
            _ => ParamPrior::UniformBox(op.space().clone()),
        }
    }

    pub fn dims(&self) -> usize {
        match self {
            ParamPrior::UniformBox(s) => s.dims(),
            ParamPrior::TruncatedGaussian { space, .. } => space.dims(),
            ParamPrior::PointMasses(p) => p[0].len(),
            ParamPrior::Product(blocks) => blocks.iter().map(|b| b.dims()).sum(),
        }
    }

    /// Ensure every draw lands inside `space`.
    pub fn check_support(&self, space: &ParamSpace) -> Result<()> {
        if self.dims() != space.dims() {
            return Err(Error::InvalidPrior(format!(
                "prior has {} dimensions, parameter space has {}",
                self.dims(),
                space.dims()
            )));
        }
        let inside = |s: &ParamSpace| {
            s.lower()
                .iter()
                .zip(space.lower())
                .all(|(a, b)| a >= b)
                && s.upper().iter().zip(space.upper()).all(|(a, b)| a <= b)
        };
        let ok = match self {
            ParamPrior::UniformBox(s) => inside(s),
            ParamPrior::TruncatedGaussian { space: s, .. } => inside(s),
            ParamPrior::PointMasses(points) => points.iter().all(|p| space.contains(p)),
            ParamPrior::Product(blocks) => {
                let mut offset = 0;
                for b in blocks {
                    let d = b.dims();
                    let sub = ParamSpace::new(
                        space.lower()[offset..offset + d].to_vec(),
                        space.upper()[offset..offset + d].to_vec(),
                    )?;
                    b.check_support(&sub)?;
                    offset += d;
                }
                true
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidPrior("prior support leaves the parameter box".into()))
        }
    }

    pub fn sample(&self, rng: &mut Stream) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dims());
        self.sample_into(rng, &mut out);
        out
    }

    fn sample_into(&self, rng: &mut Stream, out: &mut Vec<f64>) {
        match self {
            ParamPrior::UniformBox(s) => {
                for (lo, hi) in s.lower().iter().zip(s.upper()) {
                    let u: f64 = rng.random();
                    out.push(lo + (hi - lo) * u);
                }
            }
            ParamPrior::TruncatedGaussian { mean, std, space } => {
                let normal = Normal::new(0.0, 1.0).expect("standard normal");
                for k in 0..mean.len() {
                    let a = normal.cdf((space.lower()[k] - mean[k]) / std[k]);
                    let b = normal.cdf((space.upper()[k] - mean[k]) / std[k]);
                    let u: f64 = rng.random();
                    let z = normal.inverse_cdf(a + (b - a) * u);
                    let t = (mean[k] + std[k] * z).clamp(space.lower()[k], space.upper()[k]);
                    out.push(t);
                }
            }
            ParamPrior::PointMasses(points) => {
                let k = rng.random_range(0..points.len());
                out.extend_from_slice(&points[k]);
            }
            ParamPrior::Product(blocks) => {
                for b in blocks {
                    b.sample_into(rng, out);
                }
            }
        }
    }

    /// Density (or probability mass, for point masses) at `theta`.
    pub fn density(&self, theta: &[f64]) -> f64 {
        match self {
            ParamPrior::UniformBox(s) => {
                if s.contains(theta) {
                    1.0 / s.volume()
                } else {
                    0.0
                }
            }
            ParamPrior::TruncatedGaussian { mean, std, space } => {
                if !space.contains(theta) {
                    return 0.0;
                }
                let normal = Normal::new(0.0, 1.0).expect("standard normal");
                let mut p = 1.0;
                for k in 0..mean.len() {
                    let z = (theta[k] - mean[k]) / std[k];
                    let mass = normal.cdf((space.upper()[k] - mean[k]) / std[k])
                        - normal.cdf((space.lower()[k] - mean[k]) / std[k]);
                    p *= (-0.5 * z * z).exp() / ((2.0 * std::f64::consts::PI).sqrt() * std[k] * mass);
                }
                p
            }
            ParamPrior::PointMasses(points) => {
                let hits = points.iter().filter(|p| p.as_slice() == theta).count();
                hits as f64 / points.len() as f64
            }
            ParamPrior::Product(blocks) => {
                let mut offset = 0;
                let mut p = 1.0;
                for b in blocks {
                    let d = b.dims();
                    p *= b.density(&theta[offset..offset + d]);
                    offset += d;
                }
                p
            }
        }
    }
}

/// One accepted (or fallback) draw from the CAN of a clean sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub sample_index: usize,
    pub copy_index: usize,
    pub x: Vec<f64>,
    pub y: usize,
    pub x_prime: Vec<f64>,
    pub theta: Vec<f64>,
    pub attempts: usize,
    /// False when rejection was exhausted and the identity parameter was used.
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplingPolicy {
    pub max_attempts: usize,
    /// Return the identity pair instead of failing when attempts run out.
    pub fallback: bool,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        Self {
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            fallback: true,
        }
    }
}

/// Draw `θ` from the prior restricted to `{θ : C(A(θ, x)) = y}` by rejection.
///
/// Fails with [`Error::AcceptanceExhausted`] (index 0) after `max_attempts`
/// rejections.
pub fn sample_can<A: Augmentation + ?Sized>(
    op: &A,
    prior: &ParamPrior,
    oracle: &ConceptionOracle,
    x: &[f64],
    y: usize,
    max_attempts: usize,
    rng: &mut Stream,
) -> Result<AugmentedPair> {
    let label = oracle.label(x);
    if label != y {
        return Err(Error::LabelMismatch {
            index: 0,
            oracle: label,
            given: y,
        });
    }
    for attempt in 1..=max_attempts {
        let theta = prior.sample(rng);
        let x_prime = op.apply(&theta, x)?;
        if oracle.label(&x_prime) == y {
            return Ok(AugmentedPair {
                sample_index: 0,
                copy_index: 0,
                x: x.to_vec(),
                y,
                x_prime,
                theta,
                attempts: attempt,
                accepted: true,
            });
        }
    }
    Err(Error::AcceptanceExhausted {
        index: 0,
        attempts: max_attempts,
    })
}

/// [`sample_can`] with the exhaustion fallback applied when enabled.
pub fn sample_with_policy<A: Augmentation + ?Sized>(
    op: &A,
    prior: &ParamPrior,
    oracle: &ConceptionOracle,
    sample: &Sample,
    index: usize,
    policy: SamplingPolicy,
    rng: &mut Stream,
) -> Result<AugmentedPair> {
    match sample_can(op, prior, oracle, &sample.x, sample.y, policy.max_attempts, rng) {
        Ok(mut pair) => {
            pair.sample_index = index;
            Ok(pair)
        }
        Err(Error::AcceptanceExhausted { attempts, .. }) if policy.fallback => Ok(AugmentedPair {
            sample_index: index,
            copy_index: 0,
            x: sample.x.clone(),
            y: sample.y,
            x_prime: sample.x.clone(),
            theta: op.identity().to_vec(),
            attempts,
            accepted: false,
        }),
        Err(Error::AcceptanceExhausted { attempts, .. }) => {
            Err(Error::AcceptanceExhausted { index, attempts })
        }
        Err(Error::LabelMismatch { oracle, given, .. }) => Err(Error::LabelMismatch {
            index,
            oracle,
            given,
        }),
        Err(e) => Err(e),
    }
}

/// Unnormalized density of `x'` given `x`: prior at the recovered parameter,
/// times the Gram Jacobian factor, times the CAN indicator.
pub fn conditional_density<A: Augmentation + ?Sized>(
    op: &A,
    prior: &ParamPrior,
    oracle: &ConceptionOracle,
    x: &[f64],
    x_prime: &[f64],
) -> Result<f64> {
    if !op.has_inverse() {
        return Err(Error::NoInverse(op.name().to_string()));
    }
    if oracle.label(x_prime) != oracle.label(x) {
        return Ok(0.0);
    }
    let theta = op.invert(x_prime, x)?;
    let p = prior.density(&theta);
    if p == 0.0 {
        return Ok(0.0);
    }
    Ok(p * op.jacobian_factor(&theta, x)?)
}

/// `M` CAN draws for each clean sample, grouped by sample index.
///
/// Sample `i` uses its own stream derived from `(seed, i)`, so the output
/// does not depend on the number of worker threads.
pub fn batch_augment<A: Augmentation + ?Sized>(
    dataset: &[Sample],
    op: &A,
    prior: &ParamPrior,
    oracle: &ConceptionOracle,
    copies: usize,
    policy: SamplingPolicy,
    seed: u64,
) -> Result<Vec<AugmentedPair>> {
    if copies == 0 {
        return Err(Error::InvalidConfig("copies per clean sample must be at least 1".into()));
    }
    if policy.max_attempts == 0 {
        return Err(Error::InvalidConfig("max_attempts must be at least 1".into()));
    }
    prior.check_support(op.space())?;
    let groups: Vec<Result<Vec<AugmentedPair>>> = dataset
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            let mut rng = rng::stream(seed, &[rng::tag::AUGMENT, i as u64]);
            (0..copies)
                .map(|j| {
                    let mut pair = sample_with_policy(op, prior, oracle, sample, i, policy, &mut rng)?;
                    pair.copy_index = j;
                    Ok(pair)
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(dataset.len() * copies);
    for g in groups {
        out.extend(g?);
    }
    Ok(out)
}

/// Accepted draws per rejection trial.
pub fn acceptance_rate(pairs: &[AugmentedPair]) -> f64 {
    let accepted = pairs.iter().filter(|p| p.accepted).count();
    let trials: usize = pairs.iter().map(|p| p.attempts).sum();
    if trials == 0 {
        0.0
    } else {
        accepted as f64 / trials as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugmentationOp;
    use std::f64::consts::PI;

    #[test]
    fn small_shift_box_never_rejects() {
        let op = AugmentationOp::additive_shift(2, 0.1).unwrap();
        let prior = ParamPrior::default_for(&op);
        let oracle = ConceptionOracle::HalfPlane;
        let mut rng = rng::stream(1, &[]);
        for _ in 0..200 {
            let pair = sample_can(&op, &prior, &oracle, &[1.0, 0.3], 1, 10, &mut rng).unwrap();
            assert_eq!(pair.attempts, 1);
        }
    }

    #[test]
    fn exhausted_without_fallback() {
        // every prior draw pushes x across the half-plane boundary
        let op = AugmentationOp::new(
            OpKind::AdditiveShift,
            ParamSpace::new(vec![-0.1, -1.0], vec![5.0, 1.0]).unwrap(),
        )
        .unwrap();
        let prior = ParamPrior::uniform(ParamSpace::new(vec![3.0, -1.0], vec![5.0, 1.0]).unwrap());
        let oracle = ConceptionOracle::HalfPlane;
        let sample = Sample { x: vec![-1.0, 0.0], y: 0 };
        let mut rng = rng::stream(2, &[]);
        let strict = SamplingPolicy { max_attempts: 5, fallback: false };
        assert!(matches!(
            sample_with_policy(&op, &prior, &oracle, &sample, 7, strict, &mut rng),
            Err(Error::AcceptanceExhausted { index: 7, attempts: 5 })
        ));
        let lenient = SamplingPolicy { max_attempts: 5, fallback: true };
        let pair = sample_with_policy(&op, &prior, &oracle, &sample, 7, lenient, &mut rng).unwrap();
        assert!(!pair.accepted);
        assert_eq!(pair.x_prime, sample.x);
        assert_eq!(pair.theta, vec![0.0, 0.0]);
    }

    #[test]
    fn label_mismatch_is_rejected() {
        let op = AugmentationOp::rotation2d();
        let prior = ParamPrior::default_for(&op);
        let mut rng = rng::stream(0, &[]);
        assert!(matches!(
            sample_can(&op, &prior, &ConceptionOracle::HalfPlane, &[1.0, 0.0], 0, 10, &mut rng),
            Err(Error::LabelMismatch { .. })
        ));
    }

    #[test]
    fn density_outside_level_set_is_zero() {
        let op = AugmentationOp::rotation2d();
        let prior = ParamPrior::default_for(&op);
        let d = conditional_density(&op, &prior, &ConceptionOracle::HalfPlane, &[1.0, 0.0], &[-1.0, 0.0])
            .unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn shift_density_is_inverse_volume() {
        let op = AugmentationOp::additive_shift(2, 0.5).unwrap();
        let prior = ParamPrior::default_for(&op);
        let d = conditional_density(&op, &prior, &ConceptionOracle::HalfPlane, &[1.0, 1.0], &[1.2, 0.9])
            .unwrap();
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_density_carries_radius() {
        let op = AugmentationOp::rotation2d();
        let prior = ParamPrior::default_for(&op);
        let x = [2.0, 0.0];
        let xp = op.apply(&[0.4], &x).unwrap();
        let d = conditional_density(&op, &prior, &ConceptionOracle::HalfPlane, &x, &xp).unwrap();
        assert!((d - 2.0 / (2.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn density_requires_inverse() {
        let op = AugmentationOp::color_adjust(1, 0.1, 0.1, (0.5, 2.0)).unwrap();
        let prior = ParamPrior::default_for(&op);
        let oracle = ConceptionOracle::RadialBands { width: 10.0, classes: 2 };
        assert!(matches!(
            conditional_density(&op, &prior, &oracle, &[0.5], &[0.5]),
            Err(Error::NoInverse(_))
        ));
    }

    #[test]
    fn batch_grouping_and_determinism() {
        let op = AugmentationOp::rotation2d();
        let prior = ParamPrior::default_for(&op);
        let oracle = ConceptionOracle::HalfPlane;
        let data: Vec<Sample> = (0..5)
            .map(|i| Sample { x: vec![1.0 + i as f64, 0.5], y: 1 })
            .collect();
        let one = batch_augment(&data, &op, &prior, &oracle, 1, SamplingPolicy::default(), 4).unwrap();
        assert_eq!(one.len(), 5);
        assert!(one.iter().enumerate().all(|(i, p)| p.sample_index == i));

        let three = batch_augment(&data[..2], &op, &prior, &oracle, 3, SamplingPolicy::default(), 4).unwrap();
        let idx: Vec<(usize, usize)> = three.iter().map(|p| (p.sample_index, p.copy_index)).collect();
        assert_eq!(idx, vec![(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]);

        let again = batch_augment(&data[..2], &op, &prior, &oracle, 3, SamplingPolicy::default(), 4).unwrap();
        assert_eq!(three, again);
        assert!(three.iter().all(|p| oracle.label(&p.x_prime) == p.y));
    }

    #[test]
    fn batch_reports_offending_index() {
        let op = AugmentationOp::additive_shift(2, 5.0).unwrap();
        let prior = ParamPrior::point_masses(vec![vec![-5.0, 0.0]]).unwrap();
        let oracle = ConceptionOracle::HalfPlane;
        let data = vec![
            Sample { x: vec![-1.0, 0.0], y: 0 },
            Sample { x: vec![1.0, 0.0], y: 1 },
        ];
        let strict = SamplingPolicy { max_attempts: 3, fallback: false };
        assert!(matches!(
            batch_augment(&data, &op, &prior, &oracle, 2, strict, 0),
            Err(Error::AcceptanceExhausted { index: 1, attempts: 3 })
        ));
    }

    #[test]
    fn truncated_gaussian_stays_in_box() {
        let space = ParamSpace::new(vec![-0.5], vec![0.2]).unwrap();
        let prior = ParamPrior::truncated_gaussian(vec![0.0], vec![1.0], space.clone()).unwrap();
        let mut rng = rng::stream(9, &[]);
        for _ in 0..1000 {
            assert!(space.contains(&prior.sample(&mut rng)));
        }
        assert_eq!(prior.density(&[0.3]), 0.0);
    }

    #[test]
    fn prior_support_check() {
        let op = AugmentationOp::additive_shift(1, 0.5).unwrap();
        let wide = ParamPrior::uniform(ParamSpace::symmetric(1, 1.0).unwrap());
        assert!(wide.check_support(op.space()).is_err());
        let pts = ParamPrior::point_masses(vec![vec![0.25], vec![-0.5]]).unwrap();
        assert!(pts.check_support(op.space()).is_ok());
    }
}
