//! Generative causal explanations of black-box classifiers.
//!
//! A low-dimensional generative map `g(α, β)` is trained so that the causal
//! factors `α` carry as much information flow to a classifier's output as
//! possible, while all factors together still represent the data.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autodiff;
pub mod classifiers;
pub mod data;
pub mod error;
pub mod generative;
pub mod influence;
pub mod io;
pub mod nn;
pub mod objective;
pub mod prob;
pub mod scm;
pub mod select;

pub use autodiff::{Tape, Tensor, Var};
pub use classifiers::{
    AndClassifier, Classifier, ClassifierHandle, ConstantClassifier, LinearSigmoidClassifier,
    MlpClassifier, Sigmoid,
};
pub use data::{Dataset, SynthKind};
pub use error::{Error, Result};
pub use generative::{DecodeMode, GenerativeMap, LatentVector, LinearGaussianMap, VaeModel};
pub use influence::{estimate_influence, InfluenceEstimate, SampleBudget, Variant};
pub use objective::{BackendKind, Explainer, TrainConfig, TrainTrace};
pub use prob::{CategoricalDist, GaussianSpec, SeededRng, Stream};
