//! Stationary Gaussian random fields with power-law spectra.

use serde::{Deserialize, Serialize};

use super::fft::{fft2, ifft2, signed_frequency, Spectrum};
use super::field::Field;
use super::require_power_of_two;
use crate::rng::{standard_normals, Seed};
use crate::scalar::Real;
use crate::{Error, Result};

/// Data distribution: DC level `mean`, expected per-pixel `variance`,
/// and radial power `P(k) ∝ k^(−alpha)` for `k ≠ 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec<T> {
    pub mean: T,
    pub variance: T,
    pub alpha: T,
}

impl<T: Real> DataSpec<T> {
    pub fn new(mean: T, variance: T, alpha: T) -> Result<Self> {
        let spec = DataSpec { mean, variance, alpha };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mean.is_finite() {
            return Err(Error::InvalidParameter("data mean must be finite".into()));
        }
        if !(self.variance > T::zero()) || !self.variance.is_finite() {
            return Err(Error::InvalidParameter(format!("data variance must be positive, got {}", self.variance)));
        }
        if !(self.alpha >= T::zero()) || !self.alpha.is_finite() {
            return Err(Error::InvalidParameter(format!("spectral exponent must be nonnegative, got {}", self.alpha)));
        }
        Ok(())
    }
}

impl<T: Real> Default for DataSpec<T> {
    fn default() -> Self {
        DataSpec { mean: T::zero(), variance: T::one(), alpha: T::lit(2.0) }
    }
}

/// Euclidean norm of the signed frequency index of bin `(kx, ky)`.
pub fn index_norm<T: Real>(kx: usize, ky: usize, width: usize, height: usize) -> T {
    let fx = T::lit(signed_frequency(kx, width) as f64);
    let fy = T::lit(signed_frequency(ky, height) as f64);
    (fx * fx + fy * fy).sqrt()
}

/// Integer-rounded `|k|` of bin `(kx, ky)`.
pub fn radial_bin(kx: usize, ky: usize, width: usize, height: usize) -> usize {
    let fx = signed_frequency(kx, width) as f64;
    let fy = signed_frequency(ky, height) as f64;
    (fx * fx + fy * fy).sqrt().round() as usize
}

/// Expected per-bin power `E|X_k|²/N` of fields drawn from `spec` at this
/// resolution. The DC bin is zero (it carries the mean only) and the bins
/// sum to `N·variance`.
pub fn power_spectrum<T: Real>(spec: &DataSpec<T>, width: usize, height: usize) -> Result<Vec<T>> {
    spec.validate()?;
    require_power_of_two(width, height)?;
    if width * height < 2 {
        return Err(Error::Size("power spectrum needs at least two bins".into()));
    }
    let mut power = Vec::with_capacity(width * height);
    for ky in 0..height {
        for kx in 0..width {
            let k: T = index_norm(kx, ky, width, height);
            power.push(if k > T::zero() { k.powf(-spec.alpha) } else { T::zero() });
        }
    }
    let total: T = power.iter().copied().sum();
    let scale = T::from_usize_lossy(width * height) * spec.variance / total;
    power.iter_mut().for_each(|p| *p *= scale);
    Ok(power)
}

/// Draws one field: real white noise is shaped by `sqrt(P(k))` in the Fourier
/// domain (which yields Hermitian-symmetric complex Gaussians), transformed
/// back, and offset by the mean.
pub fn grf_sample<T: Real>(spec: &DataSpec<T>, width: usize, height: usize, seed: Seed) -> Result<Field<T>> {
    require_power_of_two(width, height)?;
    if width < 2 || height < 2 {
        return Err(Error::Size(format!("GRF grids must be at least 2x2, got {width}x{height}")));
    }
    let power = power_spectrum(spec, width, height)?;
    let noise = Field::from_parts(width, height, standard_normals(seed, width * height));
    let mut spectrum = fft2(&noise)?;
    for (c, p) in spectrum.data_mut().iter_mut().zip(&power) {
        *c *= p.sqrt();
    }
    let field = ifft2(&spectrum)?;
    Ok(field.map(|v| v + spec.mean))
}

/// Radially averaged per-bin power `|X_k|²/N` for bins `0..=min(w,h)/2`;
/// corner frequencies beyond that radius are skipped.
pub fn radial_power<T: Real>(x: &Field<T>) -> Result<Vec<T>> {
    let spectrum = fft2(x)?;
    Ok(radial_average(&spectrum))
}

fn radial_average<T: Real>(spectrum: &Spectrum<T>) -> Vec<T> {
    let (w, h) = (spectrum.width(), spectrum.height());
    let n = T::from_usize_lossy(w * h);
    let max_bin = w.min(h) / 2;
    let mut sums = vec![T::zero(); max_bin + 1];
    let mut counts = vec![0usize; max_bin + 1];
    for ky in 0..h {
        for kx in 0..w {
            let b = radial_bin(kx, ky, w, h);
            if b <= max_bin {
                sums[b] += spectrum.get(kx, ky).norm_sqr() / n;
                counts[b] += 1;
            }
        }
    }
    sums.iter().zip(&counts).map(|(&s, &c)| if c > 0 { s / T::from_usize_lossy(c) } else { T::zero() }).collect()
}

/// Log–log least-squares slope of the radially binned power averaged over
/// `fields`, excluding `k = 0`. For a `k^(−alpha)` field this estimates `−alpha`.
pub fn spectral_slope<T: Real>(fields: &[Field<T>]) -> Result<T> {
    let first = fields.first().ok_or(Error::TooFewSamples { need: 1, got: 0 })?;
    let mut acc: Vec<T> = Vec::new();
    for f in fields {
        first.check_same_shape(f)?;
        let p = radial_power(f)?;
        if acc.is_empty() {
            acc = p;
        } else {
            acc.iter_mut().zip(&p).for_each(|(a, b)| *a += *b);
        }
    }
    let points: Vec<(T, T)> = acc
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, p)| **p > T::zero())
        .map(|(k, &p)| (T::from_usize_lossy(k).ln(), p.ln()))
        .collect();
    if points.len() < 2 {
        return Err(Error::Degenerate("fewer than two nonzero radial bins".into()));
    }
    let n = T::from_usize_lossy(points.len());
    let mx = points.iter().map(|p| p.0).sum::<T>() / n;
    let my = points.iter().map(|p| p.1).sum::<T>() / n;
    let sxy: T = points.iter().map(|&(x, y)| (x - mx) * (y - my)).sum();
    let sxx: T = points.iter().map(|&(x, _)| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(alpha: f64) -> DataSpec<f64> {
        DataSpec::new(0.0f64, 1.0, alpha).unwrap()
    }

    #[test]
    fn validates_parameters() {
        assert!(DataSpec::new(0.0f64, 0.0, 1.0).is_err());
        assert!(DataSpec::new(0.0f64, 1.0, -0.5).is_err());
        assert!(DataSpec::new(f64::NAN, 1.0, 0.5).is_err());
    }

    #[test]
    fn deterministic_in_seed() {
        let a = grf_sample(&spec(2.0), 32, 32, Seed(4)).unwrap();
        let b = grf_sample(&spec(2.0), 32, 32, Seed(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, grf_sample(&spec(2.0), 32, 32, Seed(5)).unwrap());
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(matches!(grf_sample(&spec(2.0), 24, 32, Seed(0)), Err(Error::Size(_))));
        assert!(matches!(grf_sample(&spec(2.0), 1, 1, Seed(0)), Err(Error::Size(_))));
    }

    #[test]
    fn power_spectrum_normalization() {
        let p = power_spectrum(&spec(2.0), 16, 16).unwrap();
        assert_eq!(p[0], 0.0);
        let total: f64 = p.iter().sum();
        assert!((total - 256.0).abs() < 1e-9);
        // isotropy: |k| = 1 bins share one value
        assert!((p[1] - p[16]).abs() < 1e-12);
    }

    #[test]
    fn mean_is_exact_and_variance_matches_on_average() {
        let s = DataSpec::new(0.75f64, 1.0, 2.0).unwrap();
        let mut acc = 0.0;
        for i in 0..64 {
            let f = grf_sample(&s, 64, 64, Seed(1000 + i)).unwrap();
            let (m, v) = f.stats();
            assert!((m - 0.75).abs() < 1e-12);
            acc += v;
        }
        let v = acc / 64.0;
        assert!((0.85..=1.15).contains(&v), "mean sample variance {v}");
    }

    #[test]
    fn white_spectrum_has_zero_slope() {
        let fields: Vec<_> = (0..64).map(|i| grf_sample(&spec(0.0), 32, 32, Seed(i)).unwrap()).collect();
        let slope = spectral_slope(&fields).unwrap();
        assert!(slope.abs() <= 0.15, "slope {slope}");
    }

    #[test]
    fn power_law_slope_recovered() {
        let fields: Vec<_> = (0..64).map(|i| grf_sample(&spec(2.0), 32, 32, Seed(i)).unwrap()).collect();
        let slope = spectral_slope(&fields).unwrap();
        assert!((slope + 2.0).abs() <= 0.15, "slope {slope}");
    }
}
