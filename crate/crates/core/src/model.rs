//! Softmax classifier `q(y|x) = softmax(Wᵀ h(x))` with exact gradients.
//!
//! `h` is a small fully connected network with a smooth activation. A
//! constant feature is appended to `h(x)` so the head bias is the last row
//! of `W`. All parameters live in one flat `f64` vector `φ`.
//!
//! Losses are linear combinations of log-densities `Σ_k c_k log q(y_k|x_k)`.
//! Clean, shifted, gap and λ-weighted losses all have this form, so one
//! backward pass covers every objective in the crate.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Softplus,
}

impl Activation {
    fn apply(self, u: f64) -> f64 {
        match self {
            Activation::Tanh => u.tanh(),
            Activation::Softplus => {
                if u > 30.0 {
                    u + (-u).exp().ln_1p()
                } else {
                    u.exp().ln_1p()
                }
            }
        }
    }

    /// Derivative given the pre-activation `u` and output `a`.
    fn derivative(self, u: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Softplus => 1.0 / (1.0 + (-u).exp()),
        }
    }

    fn code(self) -> u32 {
        match self {
            Activation::Tanh => 0,
            Activation::Softplus => 1,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Softplus),
            c => Err(Error::BadCheckpoint(format!("unknown activation code {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub input_dim: usize,
    /// Hidden widths; the last one is the feature dimension `D`. Empty means
    /// `h(x) = x`.
    pub widths: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl ModelShape {
    pub fn feature_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(self.input_dim)
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut fan_in = self.input_dim;
        self.widths
            .iter()
            .map(|&w| {
                let d = (fan_in, w);
                fan_in = w;
                d
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        let layers: usize = self.layer_dims().iter().map(|(i, o)| o * i + o).sum();
        layers + (self.feature_dim() + 1) * self.num_classes
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes < 2 || self.widths.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "model needs positive input/width dimensions and at least two classes: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Split `z` into its maximum and `Σ_{i≠argmax} exp(z_i − max)`.
fn max_and_rest(z: &[f64]) -> Option<(f64, f64)> {
    let (k, &m) = z.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1))?;
    let rest = z
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != k)
        .map(|(_, v)| (v - m).exp())
        .sum();
    Some((m, rest))
}

/// Numerically stable `log Σ exp z`.
pub fn logsumexp(z: &[f64]) -> f64 {
    match max_and_rest(z) {
        None => f64::NEG_INFINITY,
        Some((m, _)) if m.is_infinite() => m,
        Some((m, rest)) => m + rest.ln_1p(),
    }
}

/// `z_y − logsumexp(z)` without forming the large intermediate sum.
pub fn log_softmax_at(z: &[f64], y: usize) -> f64 {
    match max_and_rest(z) {
        Some((m, rest)) if m.is_finite() => (z[y] - m) - rest.ln_1p(),
        _ => z[y] - logsumexp(z),
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = logsumexp(z);
    z.iter().map(|v| (v - lse).exp()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbModel {
    shape: ModelShape,
    params: Vec<f64>,
}

struct Forward {
    /// Input to each layer, then the final features.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

impl ProbModel {
    /// Seeded uniform initialization: head in `±1/√D`, layers in `±1/√fan_in`.
    pub fn new(shape: ModelShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = rng::stream(seed, &[rng::tag::INIT]);
        let mut params = Vec::with_capacity(shape.param_count());
        for (fan_in, fan_out) in shape.layer_dims() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_out * fan_in + fan_out {
                params.push(rng.random_range(-bound..bound));
            }
        }
        let bound = 1.0 / (shape.feature_dim() as f64).sqrt();
        for _ in 0..(shape.feature_dim() + 1) * shape.num_classes {
            params.push(rng.random_range(-bound..bound));
        }
        Ok(Self { shape, params })
    }

    pub fn zeros(shape: ModelShape) -> Result<Self> {
        shape.validate()?;
        let params = vec![0.0; shape.param_count()];
        Ok(Self { shape, params })
    }

    pub fn from_params(shape: ModelShape, params: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if params.len() != shape.param_count() {
            return Err(Error::DimensionMismatch {
                expected: shape.param_count(),
                got: params.len(),
            });
        }
        Ok(Self { shape, params })
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.shape.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.shape.feature_dim()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn head_offset(&self) -> usize {
        self.params.len() - (self.feature_dim() + 1) * self.num_classes()
    }

    /// `w_{i,d}`; `d = D` addresses the bias row.
    pub fn head_weight(&self, class: usize, d: usize) -> f64 {
        self.params[self.head_offset() + d * self.num_classes() + class]
    }

    pub fn set_head_weight(&mut self, class: usize, d: usize, value: f64) {
        let idx = self.head_offset() + d * self.num_classes() + class;
        self.params[idx] = value;
    }

    /// Zero the whole head, making every prediction uniform.
    pub fn zero_head(&mut self) {
        let off = self.head_offset();
        self.params[off..].iter_mut().for_each(|w| *w = 0.0);
    }

    /// Entries subject to weight decay: layer and head weights, not biases.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.params.len());
        for (fan_in, fan_out) in self.shape.layer_dims() {
            mask.extend(std::iter::repeat_n(true, fan_in * fan_out));
            mask.extend(std::iter::repeat_n(false, fan_out));
        }
        let l = self.num_classes();
        mask.extend(std::iter::repeat_n(true, self.feature_dim() * l));
        mask.extend(std::iter::repeat_n(false, l));
        mask
    }

    fn forward(&self, x: &[f64]) -> Forward {
        assert_eq!(x.len(), self.shape.input_dim, "input dimension");
        let act = self.shape.activation;
        let mut acts = vec![x.to_vec()];
        let mut pre = Vec::with_capacity(self.shape.widths.len());
        let mut off = 0;
        for (fan_in, fan_out) in self.shape.layer_dims() {
            let w = &self.params[off..off + fan_in * fan_out];
            let b = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            off += fan_in * fan_out + fan_out;
            let input = acts.last().unwrap();
            let u: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    b[o] + row.iter().zip(input).map(|(a, v)| a * v).sum::<f64>()
                })
                .collect();
            acts.push(u.iter().map(|&v| act.apply(v)).collect());
            pre.push(u);
        }
        let h = acts.last().unwrap();
        let l = self.num_classes();
        let head = &self.params[off..];
        let dim = h.len();
        let logits = (0..l)
            .map(|i| {
                let mut z = head[dim * l + i];
                for (d, hd) in h.iter().enumerate() {
                    z += head[d * l + i] * hd;
                }
                z
            })
            .collect();
        Forward { acts, pre, logits }
    }

    /// `h(x)` without the constant feature.
    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).acts.pop().unwrap()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).logits
    }

    /// `log q(y|x) = z_y − logsumexp(z)`.
    pub fn log_q(&self, x: &[f64], y: usize) -> f64 {
        log_softmax_at(&self.logits(x), y)
    }

    pub fn log_probs(&self, x: &[f64]) -> Vec<f64> {
        let z = self.logits(x);
        (0..z.len()).map(|y| log_softmax_at(&z, y)).collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits(x);
        let mut best = 0;
        for (i, v) in z.iter().enumerate() {
            if *v > z[best] {
                best = i;
            }
        }
        best
    }

    /// Per-feature class density `softmax_i(w_{i,d} h_d(x))`.
    pub fn feature_class_density(&self, x: &[f64], d: usize) -> Vec<f64> {
        let h = self.features(x);
        self.feature_density_from(&h, d)
    }

    pub(crate) fn feature_density_from(&self, h: &[f64], d: usize) -> Vec<f64> {
        let z: Vec<f64> = (0..self.num_classes())
            .map(|i| self.head_weight(i, d) * h[d])
            .collect();
        softmax(&z)
    }

    /// `q(y | h_d(x))` for a single feature `d < D`.
    pub fn feature_density(&self, x: &[f64], d: usize, y: usize) -> f64 {
        self.feature_class_density(x, d)[y]
    }

    /// Accumulate `coef · ∇ log q(y|x)` into `grad`, returning `log q(y|x)`.
    fn accumulate(&self, coef: f64, x: &[f64], y: usize, grad: &mut [f64]) -> f64 {
        let fwd = self.forward(x);
        let l = self.num_classes();
        let p = softmax(&fwd.logits);
        let log_q = log_softmax_at(&fwd.logits, y);
        let dz: Vec<f64> = (0..l)
            .map(|i| coef * (if i == y { 1.0 } else { 0.0 } - p[i]))
            .collect();

        let h = fwd.acts.last().unwrap();
        let dim = h.len();
        let head_off = self.head_offset();
        for (d, hd) in h.iter().enumerate() {
            for i in 0..l {
                grad[head_off + d * l + i] += hd * dz[i];
            }
        }
        for i in 0..l {
            grad[head_off + dim * l + i] += dz[i];
        }
        if self.shape.widths.is_empty() {
            return log_q;
        }

        let head = &self.params[head_off..];
        let mut da: Vec<f64> = (0..dim)
            .map(|d| (0..l).map(|i| head[d * l + i] * dz[i]).sum())
            .collect();
        let dims = self.shape.layer_dims();
        let mut offsets = Vec::with_capacity(dims.len());
        let mut off = 0;
        for (fan_in, fan_out) in &dims {
            offsets.push(off);
            off += fan_in * fan_out + fan_out;
        }
        for k in (0..dims.len()).rev() {
            let (fan_in, fan_out) = dims[k];
            let off = offsets[k];
            let out = &fwd.acts[k + 1];
            let input = &fwd.acts[k];
            let du: Vec<f64> = (0..fan_out)
                .map(|o| da[o] * self.shape.activation.derivative(fwd.pre[k][o], out[o]))
                .collect();
            for o in 0..fan_out {
                let row = off + o * fan_in;
                for j in 0..fan_in {
                    grad[row + j] += du[o] * input[j];
                }
                grad[off + fan_in * fan_out + o] += du[o];
            }
            if k > 0 {
                let w = &self.params[off..off + fan_in * fan_out];
                da = (0..fan_in)
                    .map(|j| (0..fan_out).map(|o| w[o * fan_in + j] * du[o]).sum())
                    .collect();
            }
        }
        log_q
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let s = &self.shape;
        for v in [
            s.input_dim as u32,
            s.num_classes as u32,
            s.activation.code(),
            s.widths.len() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for w in &s.widths {
            out.extend_from_slice(&(*w as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor { bytes, pos: 0 };
        if cur.take(12)? != CHECKPOINT_MAGIC {
            return Err(Error::BadCheckpoint("magic mismatch".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::BadCheckpoint(format!("unsupported version {version}")));
        }
        let input_dim = cur.u32()? as usize;
        let num_classes = cur.u32()? as usize;
        let activation = Activation::from_code(cur.u32()?)?;
        let n_widths = cur.u32()? as usize;
        let widths = (0..n_widths)
            .map(|_| cur.u32().map(|w| w as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = cur.u64()? as usize;
        let shape = ModelShape {
            input_dim,
            widths,
            num_classes,
            activation,
        };
        shape.validate()?;
        if count != shape.param_count() {
            return Err(Error::BadCheckpoint(format!(
                "header declares {count} parameters, shape needs {}",
                shape.param_count()
            )));
        }
        let params = (0..count)
            .map(|_| cur.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())))
            .collect::<Result<Vec<_>>>()?;
        if cur.pos != bytes.len() {
            return Err(Error::BadCheckpoint("trailing bytes".into()));
        }
        Ok(Self { shape, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// 12 bytes of magic followed by a little-endian `u32` version: a 16-byte prefix.
pub const CHECKPOINT_MAGIC: &[u8; 12] = b"SHIFTRISKCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::BadCheckpoint("truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// A loss `Σ_k c_k log q(y_k | x_k)`.
#[derive(Debug, Clone, Default)]
pub struct LossExpr<'a> {
    terms: Vec<(f64, &'a [f64], usize)>,
}

impl<'a> LossExpr<'a> {
    pub fn new() -> Self {
        Self { terms: Vec::new() }
    }

    /// Add `coef · log q(y|x)`. Zero coefficients are dropped so they leave
    /// no trace in the gradient.
    pub fn push(&mut self, coef: f64, x: &'a [f64], y: usize) {
        if coef != 0.0 {
            self.terms.push((coef, x, y));
        }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn value(&self, model: &ProbModel) -> f64 {
        self.terms
            .iter()
            .map(|&(c, x, y)| c * model.log_q(x, y))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Filled only by [`check_gradient`].
    pub finite_diff_max_rel_err: Option<f64>,
}

/// Value and analytic gradient of `expr` at the model's parameters.
pub fn grad_loss(model: &ProbModel, expr: &LossExpr) -> Result<GradientReport> {
    let mut grad = vec![0.0; model.params.len()];
    let mut loss = 0.0;
    for &(c, x, y) in &expr.terms {
        loss += c * model.accumulate(c, x, y, &mut grad);
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(i));
    }
    Ok(GradientReport {
        loss,
        grad,
        finite_diff_max_rel_err: None,
    })
}

/// Central finite differences of an arbitrary scalar function of the model.
pub fn finite_difference<F: Fn(&ProbModel) -> f64>(model: &ProbModel, f: F, step: f64) -> Vec<f64> {
    let mut probe = model.clone();
    (0..model.params.len())
        .map(|k| {
            let orig = probe.params[k];
            probe.params[k] = orig + step;
            let up = f(&probe);
            probe.params[k] = orig - step;
            let down = f(&probe);
            probe.params[k] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Magnitudes below this are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `max_k |a_k − b_k| / max(|a_k|, |b_k|, REL_ERR_FLOOR)`.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}

/// [`grad_loss`] plus a central-difference comparison with the given step.
pub fn check_gradient(model: &ProbModel, expr: &LossExpr, step: f64) -> Result<GradientReport> {
    let mut report = grad_loss(model, expr)?;
    let fd = finite_difference(model, |m| expr.value(m), step);
    report.finite_diff_max_rel_err = Some(max_rel_err(&report.grad, &fd));
    Ok(report)
}
