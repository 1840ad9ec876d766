//! Semi-supervised semantic segmentation with an auxiliary reconstruction
//! decoder, built on a small dense-tensor core.
//!
//! The crate covers the whole training laboratory: tensor kernels with a
//! reverse-mode tape, the student/teacher networks, a synthetic shapes
//! dataset, augmentations, pseudo-labelling and reconstruction targets, the
//! training loop, mIoU evaluation and latent-image analysis.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gemm;
pub mod gradcheck;
pub mod latent;
pub mod metrics;
pub mod net;
pub mod ops;
pub mod optim;
pub mod pnm;
pub mod pseudo;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use net::{AuxHead, LatentStack, Network, NetworkConfig, Role};
pub use tensor::{Real, Tensor};
