//! Post-training low-rank compression of dense feed-forward networks.
//!
//! Each weight matrix is replaced by a truncated-SVD factorization `L Rᵀ`
//! when the factorization stores fewer parameters, keeps every weight
//! within `eps` of the original, and the calibration-set gradient predicts
//! the loss will not rise. See [`optimizer::compress_network`].

pub mod calibrator;
pub mod cli;
pub mod constraints;
pub mod error;
pub mod fixture;
pub mod formats;
pub mod linalg;
pub mod network;
pub mod optimizer;
pub mod report;

pub use error::{Error, Result};
pub use linalg::{FactorPair, Matrix};
pub use network::{Dataset, GradientSnapshot, Network};
pub use optimizer::{compress_network, CompressionConfig, Mode};
pub use report::CompressionReport;
