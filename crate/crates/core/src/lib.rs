//! Multistatic OFDM sensing and estimation.
//!
//! The crate models the full chain of a network of cooperating radio nodes
//! that sense passively from their own communication waveforms:
//!
//! * [`scene`]: node/target geometry and the bistatic observables (excess
//!   delay and Doppler, Cassini attenuation, dilution of precision);
//! * [`waveform`]: OFDM numerology, sparse resource allocation, symbol
//!   generation, ambiguity diagnostics;
//! * [`channel`]: multipath frequency-response synthesis, reflectivity
//!   fluctuation, noise application, inverse filtering;
//! * [`estimation`]: delay-Doppler maps, peak detection, and a sparse
//!   model-based fitter with noise-calibrated order selection;
//! * [`crb`]: Fisher information and Cramer-Rao bounds over path
//!   parameters, per-resource-element information scoring;
//! * [`localization`]: ellipse multilateration, velocity solving, outlier
//!   rejection;
//! * [`precoding`]: time-reversal prefiltering and focusing analysis.
//!
//! Everything is deterministic given a master seed: stochastic stages
//! derive per-item generators through [`seeding`], and the data-parallel
//! helpers in [`parallel`] collect in index order, so outputs are
//! bit-identical across thread counts and across the `parallel` /
//! sequential builds.

pub mod channel;
pub mod crb;
pub mod estimation;
pub mod localization;
pub mod parallel;
pub mod precoding;
pub mod scene;
pub mod seeding;
pub mod waveform;

pub(crate) mod fft;

pub use num_complex::Complex64;
