//! Dense tensors, reverse-mode differentiation, and the numeric kernels
//! behind every diagnostic.

pub mod gradcheck;
pub mod linalg;
pub mod stats;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_report, GradCheckReport, EPSILON_FLOOR};
pub use linalg::{pca_fit_project, ridge_r2, svd_spectrum, PcaFit, SpectrumSummary};
pub use stats::{paired_t, pearson, spearman, welch_t, PairedT, WelchT};
pub use tape::{Tape, Var, PAD};
pub use tensor::Tensor;
