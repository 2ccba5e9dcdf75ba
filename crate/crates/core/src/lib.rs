//! Augmentation operators, rejection sampling from the consistency
//! augmentation neighborhood, and risk analysis of models trained under
//! augmented distribution shift.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod cansample;
pub mod data;
pub mod error;
pub mod model;
pub mod risk;
pub mod rng;
pub mod train;

pub use augment::{Augmentation, AugmentationOp, CompositeOp, OpKind, ParamSpace};
pub use cansample::{AugmentedPair, ConceptionOracle, ParamPrior, SamplingPolicy};
pub use data::{Dataset, Sample};
pub use error::{Error, Result};
pub use model::{Activation, ModelShape, ProbModel};
