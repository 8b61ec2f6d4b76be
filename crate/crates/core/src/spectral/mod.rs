//! Differentiable 2-D spectra, phase rectification and dataset spectrum profiling.

pub(crate) mod fft;
pub mod polar;
pub mod prm;
pub mod profile;

pub use polar::{
    fft2, from_polar, ifft2, real_fft2, to_polar, ComplexGrid, ComplexVar, PolarSpectrum, PolarVar,
    MAGNITUDE_DELTA,
};
pub use prm::{Prm, PrmInit};
pub use profile::{dataset_spectrum_profile, profile_divergence, SpectrumProfile};
