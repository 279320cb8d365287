//! Hybrid mixed-precision quantization of a small convolutional detector,
//! trained from a full-precision copy of itself with gated feature distillation.
//!
//! Pipeline: [`train::train_teacher`] fits a full-precision network,
//! [`bitsearch::build_bit_plan`] assigns per-layer widths from the teacher's
//! weight distributions, and [`train::train_student_ghost`] runs
//! quantization-aware training of a student initialized from the teacher.
//! [`cost`] measures BOPs, parameter size and mAP.

pub mod bitsearch;
pub mod cost;
pub mod error;
pub mod io;
pub mod net;
pub mod quant;
pub mod scm;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
