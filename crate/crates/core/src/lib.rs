//! Shared-representation multi-task learning for grayscale imagery.
//!
//! One backbone is optimised once (as a denoising autoencoder or on a labelled
//! source task) and then reused by several task heads: segmentation,
//! classification and quality assessment. Derivable outputs such as Grad-CAM
//! heatmaps and usability recommendations are computed from trained heads.
//!
//! The crate carries its own small reverse-mode engine ([`tensor`]), the
//! layers built on it ([`nn`]), losses and metrics, optimisers with grid
//! search ([`optim`]), synthetic data and file formats ([`data`]), the
//! backbone/head machinery ([`urep`]), derivable outputs ([`derivable`]) and
//! config-driven workflows ([`pipeline`]).

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait)]

pub mod data;
pub mod derivable;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod tensor;
pub mod urep;

pub use error::{Error, Result};
