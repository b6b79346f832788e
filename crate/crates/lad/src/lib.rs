//! Label-assisted distillation for semantic segmentation.
//!
//! A lightweight teacher sees RGB plus a noised ground-truth label channel
//! and is trained with a dual-path consistency objective so it uses the
//! extra channel as a hint rather than an answer key. An RGB-only student
//! then distills the teacher's soft output. The crate also ships a synthetic
//! shape dataset, diagnostics (mIoU, output stability, label-channel
//! saliency), and the `lad` CLI.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod label;
pub mod lnm;
pub mod losses;
pub mod real;
pub mod report;
pub mod segnet;
pub mod synthdata;
pub mod trainer;

pub use error::{LadError, Result};
pub use label::{LabelMap, IGNORE};
pub use real::{derive_seed, Real};
