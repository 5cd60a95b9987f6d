//! Real 2-D grids, radix-2 FFT, and Gaussian-random-field synthesis.

mod fft;
mod field;
mod grf;

pub use fft::{fft2, ifft2, signed_frequency, Spectrum};
pub use field::{field_stats, Field, FIELD_MAGIC};
pub use grf::{grf_sample, index_norm, power_spectrum, radial_bin, radial_power, spectral_slope, DataSpec};

pub(crate) fn require_power_of_two(width: usize, height: usize) -> crate::Result<()> {
    if width == 0 || height == 0 || !width.is_power_of_two() || !height.is_power_of_two() {
        return Err(crate::Error::Size(format!("{width}x{height} is not a power-of-two grid")));
    }
    Ok(())
}
