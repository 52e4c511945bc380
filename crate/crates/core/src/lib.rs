//! Multi-task RGB-D gesture recognition at desk scale.
//!
//! The crate contains a small reverse-mode tensor engine ([`autograd`]), the
//! ACTION excitation block ([`action`]), a residual backbone with a
//! detachable multi-scale depth decoder ([`network`]), the multi-task loss
//! and optimizer ([`loss`], [`optim`]), a synthetic RGB-D clip pipeline
//! ([`data`]) and the training / evaluation engine behind the `actnet` CLI
//! ([`engine`]).

pub mod action;
pub mod autograd;
mod binio;
pub mod data;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod network;
pub mod optim;
pub mod params;
pub mod tensor;

pub use autograd::{ChannelShift, Gradients, OpKind, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{ConvSpec, Scalar, Tensor};
