//! Sentence-level prosody modelling for neural text-to-speech.
//!
//! Training runs in three stages:
//!
//! 1. an acoustic model with a variational reference encoder learns a
//!    Gaussian posterior over a prosody latent from mel-spectrograms
//!    ([`acoustic`]);
//! 2. a text-driven sampler learns to predict that posterior from
//!    contextual embeddings, the parse tree, or both ([`samplers`]);
//! 3. a duration model conditioned on the predicted latent is fitted
//!    ([`durmodel`]).
//!
//! [`pipeline`] wires the stages together with checkpoints, inference and
//! evaluation. Everything sits on a small reverse-mode tape ([`autodiff`]).

pub mod acoustic;
pub mod autodiff;
pub mod corpus;
pub mod durmodel;
pub mod error;
pub mod gradcheck;
pub mod latent;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod samplers;
pub mod syntax;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use latent::{kl_divergence, GaussianLatent, KlDirection};
pub use params::{Namespace, ParamStore};
pub use tensor::Tensor;
