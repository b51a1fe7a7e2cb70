//! Multichannel speech enhancement for a directional talker in diffuse noise.
//!
//! The crate is organised bottom-up:
//!
//! - [`signal_io`]: WAV files and the Hamming-window STFT/ISTFT pair.
//! - [`hermitian`]: small complex Hermitian matrix tools, including the
//!   closed-form inverse and log-determinant of a rank-deficient SCM completed
//!   along one direction.
//! - [`source_models`]: power-spectrogram variance models (IS-NMF, external
//!   denoiser, oracle) used by the rank-1 separators.
//! - [`demix`]: determined BSS by iterative projection (ILRMA / IDLMA).
//! - [`em`]: rank-constrained SCM estimation by MAP-EM, the noise prior built
//!   from detected noise-only frames, and the multichannel Wiener filter.
//! - [`eval`]: a seeded diffuse-noise mixture simulator and BSS metrics.
//! - [`pipeline`]: end-to-end runs and multi-seed experiments.

pub mod demix;
pub mod em;
mod error;
pub mod eval;
pub mod hermitian;
pub mod pipeline;
pub mod signal_io;
pub mod source_models;

pub use error::{Error, Result};

/// Complex scalar used throughout.
pub type C64 = num_complex::Complex64;
/// Dynamically sized complex matrix used for per-frequency linear algebra.
pub type CMatrix = nalgebra::DMatrix<C64>;
/// Dynamically sized complex column vector.
pub type CVector = nalgebra::DVector<C64>;
