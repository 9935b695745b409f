//! Question encoders for visual question answering, compared under
//! language-prior distribution shift.
//!
//! * [`autodiff`]: tape-based reverse-mode differentiation, AdamW, gradient checking.
//! * [`encoders`]: GRU / BiGRU, Transformer and graph-attention question encoders.
//! * [`vqa`]: question-guided image attention, multiplicative fusion, answer classifier.
//! * [`bench`]: synthetic benchmark with shifted question-type priors and bias probes.
//! * [`experiment`]: training/evaluation driver, configs and reports.

pub mod autodiff;
pub mod bench;
pub mod encoders;
pub mod error;
pub mod experiment;
pub mod vqa;

pub use error::{Error, Result};
