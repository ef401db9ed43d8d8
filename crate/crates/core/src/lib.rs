//! Translation-invariant self-attention.
//!
//! Positional information enters attention as an additive Toeplitz score
//! matrix generated by a sum of radial-basis kernels over the relative offset
//! between tokens. The crate also provides the analysis side: measuring how
//! Toeplitz a matrix is, extracting the average positional score matrix of a
//! trained model from its embeddings and projections, and regressing kernels
//! onto it. A small encoder ([`model`]) trains the mechanism end to end on
//! synthetic tasks.

pub mod attention;
pub mod autodiff;
pub mod error;
pub mod fit;
pub mod gradcheck;
pub mod introspect;
pub mod io;
pub mod kernel;
pub mod matrix;
pub mod model;
pub mod rng;
pub mod toeplitz;

pub use attention::{attention, attention_case_a, attention_case_b, attention_with_bias};
pub use error::{Error, Result};
pub use fit::{fit_kernel_ladder, fit_kernels, fit_kernels_from, FitOptions, FitResult};
pub use introspect::{
    aligned_sections, average_word_embedding, extract_positional_scores, neutralize_position_embeddings,
    EmbeddingBundle,
};
pub use kernel::{eval_kernel, kernel_gradients, materialize_fp, Kernel, KernelGradient, KernelParams, TisaStack};
pub use matrix::{gram, matmul, softmax_rows, Matrix};
pub use rng::SeededRng;
pub use toeplitz::{diagonal_profile, toeplitzness, OffsetProfile, ToeplitzFit};
