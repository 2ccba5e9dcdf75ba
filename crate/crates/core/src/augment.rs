//! Parameterized augmentation operators.
//!
//! An operator is a map `(θ, x) ↦ A(θ, x)` over a box-shaped parameter space
//! with a unique identity element `e` such that `A(e, x) = x`. Operators
//! expose their parameter Jacobian `∂A/∂θ` (an `n × d` matrix) so the
//! density factor of the induced distribution on augmented samples can be
//! evaluated, and, where tractable, the inverse `x' ↦ θ` for a fixed `x`.
//!
//! The density factor is the square root of the Gram determinant
//! `det(JᵀJ)`. When `d = n` it is the ordinary `|det J|`; when `d < n` it
//! is the volume element of the `d`-dimensional image manifold.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gram determinants below this are treated as singular.
pub const GRAM_FLOOR: f64 = 1e-300;

/// Residual above which an inverse solve is rejected.
pub const INVERSE_TOLERANCE: f64 = 1e-6;

/// Axis-aligned box `Θ = Π [lower_k, upper_k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpace {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ParamSpace {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() {
            return Err(Error::InvalidParamSpace("zero-dimensional box".into()));
        }
        if lower.len() != upper.len() {
            return Err(Error::InvalidParamSpace(format!(
                "lower has {} components but upper has {}",
                lower.len(),
                upper.len()
            )));
        }
        for (k, (&lo, &hi)) in lower.iter().zip(&upper).enumerate() {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Error::InvalidParamSpace(format!(
                    "component {k}: lower {lo} must be finite and below upper {hi}"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// `[-b, b]^dims`.
    pub fn symmetric(dims: usize, bound: f64) -> Result<Self> {
        Self::new(vec![-bound; dims], vec![bound; dims])
    }

    pub fn dims(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn volume(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| hi - lo)
            .product()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dims()
            && theta
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(t, (lo, hi))| *lo <= *t && *t <= *hi)
    }

    pub fn check(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                got: theta.len(),
            });
        }
        for (index, (&value, (&lower, &upper))) in theta
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .enumerate()
        {
            if !(lower <= value && value <= upper) {
                return Err(Error::ParamOutOfRange {
                    index,
                    value,
                    lower,
                    upper,
                });
            }
        }
        Ok(())
    }

    fn concat<'a>(spaces: impl IntoIterator<Item = &'a ParamSpace>) -> ParamSpace {
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        for s in spaces {
            lower.extend_from_slice(&s.lower);
            upper.extend_from_slice(&s.upper);
        }
        ParamSpace { lower, upper }
    }
}

/// The concrete operator families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpKind {
    /// Planar rotation applied with the same angle to every coordinate pair.
    Rotation2D,
    /// `x + θ`.
    AdditiveShift,
    /// `exp(θ) · x`.
    Scale,
    /// Per channel `v ↦ α + (1 + β) v^γ`, channel-major layout.
    ColorAdjust { channels: usize },
    /// Reverses coordinate order when `θ = 1`. Parameter space is `{0, 1}`.
    DiscreteFlip,
}

impl OpKind {
    pub fn default_name(&self) -> &'static str {
        match self {
            OpKind::Rotation2D => "rotation2d",
            OpKind::AdditiveShift => "shift",
            OpKind::Scale => "scale",
            OpKind::ColorAdjust { .. } => "color",
            OpKind::DiscreteFlip => "flip",
        }
    }

    fn identity(&self, dims: usize) -> Vec<f64> {
        match self {
            OpKind::ColorAdjust { channels } => {
                (0..*channels).flat_map(|_| [0.0, 0.0, 1.0]).collect()
            }
            _ => vec![0.0; dims],
        }
    }

    fn has_inverse(&self) -> bool {
        matches!(
            self,
            OpKind::Rotation2D | OpKind::AdditiveShift | OpKind::Scale
        )
    }
}

/// Common surface of single and composite operators.
pub trait Augmentation: Send + Sync {
    fn name(&self) -> &str;
    fn space(&self) -> &ParamSpace;
    fn identity(&self) -> &[f64];
    fn has_inverse(&self) -> bool;
    /// False when the parameter space is discrete.
    fn is_differentiable(&self) -> bool;

    /// `A(θ, x)`; rejects parameters outside the box.
    fn apply(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>>;

    /// `∂A/∂θ` as an `n × d` matrix.
    fn param_jacobian(&self, theta: &[f64], x: &[f64]) -> Result<DMatrix<f64>>;

    /// `∂A/∂x` as an `n × n` matrix.
    fn input_jacobian(&self, theta: &[f64], x: &[f64]) -> Result<DMatrix<f64>>;

    /// Recover `θ` from `x' = A(θ, x)`.
    fn invert(&self, x_prime: &[f64], x: &[f64]) -> Result<Vec<f64>>;

    /// `sqrt(det(JᵀJ))` for the parameter Jacobian `J`.
    fn jacobian_factor(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        if !self.is_differentiable() {
            return Err(Error::NotDifferentiable(self.name().to_string()));
        }
        let j = self.param_jacobian(theta, x)?;
        gram_factor(&j)
    }
}

/// `sqrt(det(JᵀJ))`, failing when the Gram matrix is numerically singular.
pub fn gram_factor(j: &DMatrix<f64>) -> Result<f64> {
    let gram = j.transpose() * j;
    let det = gram.determinant();
    if !(det >= GRAM_FLOOR) {
        return Err(Error::SingularJacobian(det));
    }
    Ok(det.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationOp {
    name: String,
    kind: OpKind,
    space: ParamSpace,
    identity: Vec<f64>,
    has_inverse: bool,
}

impl AugmentationOp {
    /// Builds an operator, checking that the box contains the identity.
    pub fn new(kind: OpKind, space: ParamSpace) -> Result<Self> {
        if let OpKind::ColorAdjust { channels } = kind {
            if channels == 0 || space.dims() != 3 * channels {
                return Err(Error::InvalidParamSpace(format!(
                    "color adjustment with {channels} channels needs {} parameters, box has {}",
                    3 * channels,
                    space.dims()
                )));
            }
        }
        if kind == OpKind::DiscreteFlip
            && (space.dims() != 1 || space.lower()[0] != 0.0 || space.upper()[0] != 1.0)
        {
            return Err(Error::InvalidParamSpace(
                "flip parameter space must be {0, 1}".into(),
            ));
        }
        if matches!(kind, OpKind::Rotation2D | OpKind::Scale) && space.dims() != 1 {
            return Err(Error::InvalidParamSpace(format!(
                "{} takes a single parameter",
                kind.default_name()
            )));
        }
        let identity = kind.identity(space.dims());
        if !space.contains(&identity) {
            return Err(Error::InvalidParamSpace(format!(
                "identity element {identity:?} lies outside the box"
            )));
        }
        Ok(Self {
            name: kind.default_name().to_string(),
            kind,
            space,
            identity,
            has_inverse: kind.has_inverse(),
        })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Rotation over `[-π, π]`.
    pub fn rotation2d() -> Self {
        Self::new(
            OpKind::Rotation2D,
            ParamSpace::new(vec![-PI], vec![PI]).expect("static box"),
        )
        .expect("static operator")
    }

    /// Shift over `[-bound, bound]^dims`.
    pub fn additive_shift(dims: usize, bound: f64) -> Result<Self> {
        Self::new(OpKind::AdditiveShift, ParamSpace::symmetric(dims, bound)?)
    }

    /// Log-scale over `[-bound, bound]`.
    pub fn scale(bound: f64) -> Result<Self> {
        Self::new(OpKind::Scale, ParamSpace::symmetric(1, bound)?)
    }

    /// Color adjustment with `α ∈ [-a, a]`, `β ∈ [-b, b]`, `γ ∈ [g_lo, g_hi]`
    /// on every channel.
    pub fn color_adjust(channels: usize, a: f64, b: f64, gamma: (f64, f64)) -> Result<Self> {
        let lower = (0..channels).flat_map(|_| [-a, -b, gamma.0]).collect();
        let upper = (0..channels).flat_map(|_| [a, b, gamma.1]).collect();
        Self::new(OpKind::ColorAdjust { channels }, ParamSpace::new(lower, upper)?)
    }

    pub fn discrete_flip() -> Self {
        Self::new(
            OpKind::DiscreteFlip,
            ParamSpace::new(vec![0.0], vec![1.0]).expect("static box"),
        )
        .expect("static operator")
    }

    pub fn kind(&self) -> OpKind {
        self.kind
    }

    /// Check that `x` has a shape this operator accepts.
    pub fn check_sample(&self, x: &[f64]) -> Result<()> {
        match self.kind {
            OpKind::Rotation2D if x.is_empty() || !x.len().is_multiple_of(2) => Err(Error::DomainError(
                format!("rotation needs an even number of coordinates, got {}", x.len()),
            )),
            OpKind::AdditiveShift if x.len() != self.space.dims() => Err(Error::DimensionMismatch {
                expected: self.space.dims(),
                got: x.len(),
            }),
            OpKind::ColorAdjust { channels } if x.is_empty() || !x.len().is_multiple_of(channels) => {
                Err(Error::DomainError(format!(
                    "{} values do not split into {channels} channels",
                    x.len()
                )))
            }
            _ => Ok(()),
        }
    }

    fn flip_bit(theta: f64) -> Result<bool> {
        if theta == 0.0 {
            Ok(false)
        } else if theta == 1.0 {
            Ok(true)
        } else {
            Err(Error::DomainError(format!(
                "flip parameter must be 0 or 1, got {theta}"
            )))
        }
    }

    fn color_channel(theta: &[f64], c: usize) -> (f64, f64, f64) {
        (theta[3 * c], theta[3 * c + 1], theta[3 * c + 2])
    }

    fn check_color_domain(x: &[f64]) -> Result<()> {
        match x.iter().position(|&v| !(v > 0.0)) {
            Some(i) => Err(Error::DomainError(format!(
                "color adjustment needs values in (0, 1], component {i} is {}",
                x[i]
            ))),
            None => Ok(()),
        }
    }

    /// Evaluation without the box check.
    fn eval(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check_sample(x)?;
        match self.kind {
            OpKind::Rotation2D => {
                let (s, c) = theta[0].sin_cos();
                Ok(x.chunks_exact(2)
                    .flat_map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]])
                    .collect())
            }
            OpKind::AdditiveShift => Ok(x.iter().zip(theta).map(|(v, t)| v + t).collect()),
            OpKind::Scale => {
                let f = theta[0].exp();
                Ok(x.iter().map(|v| f * v).collect())
            }
            OpKind::ColorAdjust { channels } => {
                Self::check_color_domain(x)?;
                let per = x.len() / channels;
                let mut out = Vec::with_capacity(x.len());
                for (c, block) in x.chunks_exact(per).enumerate() {
                    let (a, b, g) = Self::color_channel(theta, c);
                    out.extend(block.iter().map(|v| a + (1.0 + b) * v.powf(g)));
                }
                Ok(out)
            }
            OpKind::DiscreteFlip => {
                if Self::flip_bit(theta[0])? {
                    Ok(x.iter().rev().copied().collect())
                } else {
                    Ok(x.to_vec())
                }
            }
        }
    }
}

impl Augmentation for AugmentationOp {
    fn name(&self) -> &str {
        &self.name
    }

    fn space(&self) -> &ParamSpace {
        &self.space
    }

    fn identity(&self) -> &[f64] {
        &self.identity
    }

    fn has_inverse(&self) -> bool {
        self.has_inverse
    }

    fn is_differentiable(&self) -> bool {
        self.kind != OpKind::DiscreteFlip
    }

    fn apply(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.space.check(theta)?;
        self.eval(theta, x)
    }

    fn param_jacobian(&self, theta: &[f64], x: &[f64]) -> Result<DMatrix<f64>> {
        self.space.check(theta)?;
        self.check_sample(x)?;
        let n = x.len();
        match self.kind {
            OpKind::Rotation2D => {
                // d/dθ R(θ) p = R(θ + π/2) p
                let (s, c) = theta[0].sin_cos();
                Ok(DMatrix::from_iterator(
                    n,
                    1,
                    x.chunks_exact(2)
                        .flat_map(|p| [-s * p[0] - c * p[1], c * p[0] - s * p[1]]),
                ))
            }
            OpKind::AdditiveShift => Ok(DMatrix::identity(n, n)),
            OpKind::Scale => {
                let f = theta[0].exp();
                Ok(DMatrix::from_iterator(n, 1, x.iter().map(|v| f * v)))
            }
            OpKind::ColorAdjust { channels } => {
                Self::check_color_domain(x)?;
                let per = n / channels;
                let mut j = DMatrix::zeros(n, 3 * channels);
                for c in 0..channels {
                    let (_, b, g) = Self::color_channel(theta, c);
                    for k in 0..per {
                        let row = c * per + k;
                        let v = x[row];
                        let vg = v.powf(g);
                        j[(row, 3 * c)] = 1.0;
                        j[(row, 3 * c + 1)] = vg;
                        j[(row, 3 * c + 2)] = (1.0 + b) * vg * v.ln();
                    }
                }
                Ok(j)
            }
            OpKind::DiscreteFlip => Err(Error::NotDifferentiable(self.name.clone())),
        }
    }

    fn input_jacobian(&self, theta: &[f64], x: &[f64]) -> Result<DMatrix<f64>> {
        self.space.check(theta)?;
        self.check_sample(x)?;
        let n = x.len();
        match self.kind {
            OpKind::Rotation2D => {
                let (s, c) = theta[0].sin_cos();
                let mut j = DMatrix::zeros(n, n);
                for k in (0..n).step_by(2) {
                    j[(k, k)] = c;
                    j[(k, k + 1)] = -s;
                    j[(k + 1, k)] = s;
                    j[(k + 1, k + 1)] = c;
                }
                Ok(j)
            }
            OpKind::AdditiveShift => Ok(DMatrix::identity(n, n)),
            OpKind::Scale => Ok(DMatrix::identity(n, n) * theta[0].exp()),
            OpKind::ColorAdjust { channels } => {
                Self::check_color_domain(x)?;
                let per = n / channels;
                let mut j = DMatrix::zeros(n, n);
                for row in 0..n {
                    let (_, b, g) = Self::color_channel(theta, row / per);
                    j[(row, row)] = (1.0 + b) * g * x[row].powf(g - 1.0);
                }
                Ok(j)
            }
            OpKind::DiscreteFlip => {
                if Self::flip_bit(theta[0])? {
                    let mut j = DMatrix::zeros(n, n);
                    for k in 0..n {
                        j[(k, n - 1 - k)] = 1.0;
                    }
                    Ok(j)
                } else {
                    Ok(DMatrix::identity(n, n))
                }
            }
        }
    }

    fn invert(&self, x_prime: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        if !self.has_inverse {
            return Err(Error::NoInverse(self.name.clone()));
        }
        self.check_sample(x)?;
        if x_prime.len() != x.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: x_prime.len(),
            });
        }
        let theta = match self.kind {
            OpKind::Rotation2D => {
                // angle from the block with the largest norm
                let (k, _) = x
                    .chunks_exact(2)
                    .map(|p| p[0] * p[0] + p[1] * p[1])
                    .enumerate()
                    .fold((0, -1.0), |best, (k, r)| if r > best.1 { (k, r) } else { best });
                let (a, b) = (x[2 * k], x[2 * k + 1]);
                let (a2, b2) = (x_prime[2 * k], x_prime[2 * k + 1]);
                vec![(a * b2 - b * a2).atan2(a * a2 + b * b2)]
            }
            OpKind::AdditiveShift => x_prime.iter().zip(x).map(|(p, v)| p - v).collect(),
            OpKind::Scale => {
                let xx: f64 = x.iter().map(|v| v * v).sum();
                let xp: f64 = x.iter().zip(x_prime).map(|(v, p)| v * p).sum();
                if xx == 0.0 || !(xp / xx > 0.0) {
                    return Err(Error::NotInImage(f64::INFINITY));
                }
                vec![(xp / xx).ln()]
            }
            _ => unreachable!("has_inverse covers the invertible kinds"),
        };
        let back = self.eval(&theta, x)?;
        let residual = back
            .iter()
            .zip(x_prime)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if !(residual <= INVERSE_TOLERANCE) || !self.space.contains(&theta) {
            return Err(Error::NotInImage(residual));
        }
        Ok(theta)
    }
}

/// Operators applied in a fixed order `σ`.
///
/// Parameters are laid out in the order of `ops` (not the application
/// order), so the same parameter vector can be reused under different
/// orders.
#[derive(Debug, Clone)]
pub struct CompositeOp {
    name: String,
    ops: Vec<AugmentationOp>,
    order: Vec<usize>,
    offsets: Vec<usize>,
    space: ParamSpace,
    identity: Vec<f64>,
}

/// Compose `ops`; `order[k]` is the index in `ops` of the `k`-th operator
/// applied.
pub fn compose(ops: Vec<AugmentationOp>, order: Vec<usize>) -> Result<CompositeOp> {
    if ops.is_empty() {
        return Err(Error::EmptyComposition);
    }
    let mut seen = vec![false; ops.len()];
    if order.len() != ops.len() {
        return Err(Error::InvalidOrder(format!(
            "order has {} entries for {} operators",
            order.len(),
            ops.len()
        )));
    }
    for &k in &order {
        if k >= ops.len() || seen[k] {
            return Err(Error::InvalidOrder(format!("{order:?} is not a permutation")));
        }
        seen[k] = true;
    }
    let mut offsets = Vec::with_capacity(ops.len() + 1);
    offsets.push(0);
    for op in &ops {
        offsets.push(offsets.last().unwrap() + op.space().dims());
    }
    let space = ParamSpace::concat(ops.iter().map(|o| o.space()));
    let identity = ops.iter().flat_map(|o| o.identity().to_vec()).collect();
    let name = order
        .iter()
        .map(|&k| ops[k].name())
        .collect::<Vec<_>>()
        .join("+");
    Ok(CompositeOp {
        name,
        ops,
        order,
        offsets,
        space,
        identity,
    })
}

impl CompositeOp {
    pub fn ops(&self) -> &[AugmentationOp] {
        &self.ops
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Parameter slice belonging to `ops[k]`.
    pub fn block<'a>(&self, theta: &'a [f64], k: usize) -> &'a [f64] {
        &theta[self.offsets[k]..self.offsets[k + 1]]
    }

    /// Intermediate samples `x_0 = x, x_1, …, x_m` along the application order.
    fn trajectory(&self, theta: &[f64], x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.space.check(theta)?;
        let mut path = Vec::with_capacity(self.order.len() + 1);
        path.push(x.to_vec());
        for &k in &self.order {
            let next = self.ops[k].apply(self.block(theta, k), path.last().unwrap())?;
            path.push(next);
        }
        Ok(path)
    }
}

impl Augmentation for CompositeOp {
    fn name(&self) -> &str {
        &self.name
    }

    fn space(&self) -> &ParamSpace {
        &self.space
    }

    fn identity(&self) -> &[f64] {
        &self.identity
    }

    fn has_inverse(&self) -> bool {
        false
    }

    fn is_differentiable(&self) -> bool {
        self.ops.iter().all(|o| o.is_differentiable())
    }

    fn apply(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trajectory(theta, x)?.pop().unwrap())
    }

    fn param_jacobian(&self, theta: &[f64], x: &[f64]) -> Result<DMatrix<f64>> {
        if !self.is_differentiable() {
            return Err(Error::NotDifferentiable(self.name.clone()));
        }
        let path = self.trajectory(theta, x)?;
        let n = x.len();
        let mut j = DMatrix::zeros(n, self.space.dims());
        // Walk backwards, carrying the product of downstream input Jacobians.
        let mut carry = DMatrix::<f64>::identity(n, n);
        for (step, &k) in self.order.iter().enumerate().rev() {
            let op = &self.ops[k];
            let block = self.block(theta, k);
            let local = op.param_jacobian(block, &path[step])?;
            let cols = &carry * local;
            j.columns_mut(self.offsets[k], block.len()).copy_from(&cols);
            carry = &carry * op.input_jacobian(block, &path[step])?;
        }
        Ok(j)
    }

    fn input_jacobian(&self, theta: &[f64], x: &[f64]) -> Result<DMatrix<f64>> {
        let path = self.trajectory(theta, x)?;
        let n = x.len();
        let mut carry = DMatrix::<f64>::identity(n, n);
        for (step, &k) in self.order.iter().enumerate() {
            let local = self.ops[k].input_jacobian(self.block(theta, k), &path[step])?;
            carry = local * carry;
        }
        Ok(carry)
    }

    fn invert(&self, _x_prime: &[f64], _x: &[f64]) -> Result<Vec<f64>> {
        Err(Error::NoInverse(self.name.clone()))
    }
}
