//! Frequency-diagonal Wiener velocity models.
//!
//! Under the interpolant `x_σ = (1−σ)·x_data + σ·ε` the velocity target is
//! `u = ε − x_data`. For Gaussian data that is independent across Fourier
//! bins, the conditional expectation `E[u | x_σ]` acts on each coefficient
//! `c` as `v = A·(c − (1−σ)·m) − m`, where `m` is the prior mean of the bin
//! and
//!
//! ```text
//! A(σ) = (σ·n² − (1−σ)·s²) / ((1−σ)²·s² + σ²·n²)
//! ```
//!
//! with signal power `s²` and noise power `n²` of that bin. At `σ = 0` the
//! gain is `−1` for every bin, so the velocity of clean data is `−x`.
//!
//! Powers are expressed per bin as `E|X_k|²/N` (unnormalized forward FFT),
//! in which units iid noise of variance `n²` has power `n²` in every bin.

use std::path::Path;

use num_complex::Complex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::{fft2, ifft2, power_spectrum, signed_frequency, DataSpec, Field, Spectrum};
use crate::rng::{content_hash, standard_normals, Seed};
use crate::scalar::Real;
use crate::schedule::{SigmaSchedule, DEFAULT_STEPS};
use crate::{Error, Result};

/// Velocity-target draws per sample in [`flow_matching_loss`].
pub const DRAWS_PER_SAMPLE: usize = 4;
/// Minimum sample count accepted by [`fit_spectrum`].
pub const MIN_FIT_SAMPLES: usize = 8;

/// Assumed signal power `S(ν) = amplitude·ν^(−alpha)` at normalized frequency
/// `ν ≠ 0`; the DC bin carries `mean` only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WienerParams<T> {
    pub mean: T,
    pub amplitude: T,
    pub alpha: T,
}

impl<T: Real> WienerParams<T> {
    pub fn new(mean: T, amplitude: T, alpha: T) -> Result<Self> {
        let p = WienerParams { mean, amplitude, alpha };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mean.is_finite() {
            return Err(Error::InvalidParameter("mean must be finite".into()));
        }
        if !(self.amplitude > T::zero()) || !self.amplitude.is_finite() {
            return Err(Error::InvalidParameter(format!("amplitude must be positive, got {}", self.amplitude)));
        }
        if !(self.alpha >= T::zero()) || !self.alpha.is_finite() {
            return Err(Error::InvalidParameter(format!("alpha must be nonnegative, got {}", self.alpha)));
        }
        Ok(())
    }

    /// Parameters that reproduce `spec`'s spectrum exactly on a square `width` grid.
    pub fn from_spec(spec: &DataSpec<T>, width: usize) -> Result<Self> {
        let power = power_spectrum(spec, width, width)?;
        // bin (1, 0) sits at |k| = 1, i.e. ν = 1/width
        let amplitude = power[1] * T::from_usize_lossy(width).powf(-spec.alpha);
        Self::new(spec.mean, amplitude, spec.alpha)
    }

    pub fn power_at(&self, nu: T) -> T {
        self.amplitude * nu.powf(-self.alpha)
    }

    /// Per-bin power on a `width`×`height` grid, indexed by `ν = (kx/width, ky/height)`.
    pub fn bin_powers(&self, width: usize, height: usize) -> Vec<T> {
        normalized_frequencies::<T>(width, height)
            .into_iter()
            .map(|nu| if nu > T::zero() { self.power_at(nu) } else { T::zero() })
            .collect()
    }
}

fn normalized_frequencies<T: Real>(width: usize, height: usize) -> Vec<T> {
    let (w, h) = (T::from_usize_lossy(width), T::from_usize_lossy(height));
    let mut out = Vec::with_capacity(width * height);
    for ky in 0..height {
        for kx in 0..width {
            let fx = T::lit(signed_frequency(kx, width) as f64) / w;
            let fy = T::lit(signed_frequency(ky, height) as f64) / h;
            out.push((fx * fx + fy * fy).sqrt());
        }
    }
    out
}

/// Closed-form Wiener gain for one bin.
#[inline]
pub fn wiener_gain<T: Real>(signal_power: T, noise_power: T, sigma: T) -> T {
    if sigma == T::zero() {
        return -T::one();
    }
    let keep = T::one() - sigma;
    (sigma * noise_power - keep * signal_power) / (keep * keep * signal_power + sigma * sigma * noise_power)
}

#[derive(Clone, Debug, PartialEq)]
pub enum DenoiserKind<T> {
    /// Matched to `spec` at whatever resolution it is applied.
    Oracle { spec: DataSpec<T> },
    /// Parameters fixed at a reference resolution, looked up by normalized frequency.
    Frozen { params: WienerParams<T>, ref_width: usize, ref_height: usize },
    /// Parameters learned by [`fit_spectrum`], used at the resolution they are applied.
    Fitted { params: WienerParams<T> },
    /// iid per-pixel Gaussian data (every bin, DC included, has power `variance`).
    Iid { variance: T, mean: T },
}

/// Velocity model `φ(x, σ_cond)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<T> {
    kind: DenoiserKind<T>,
    noise_variance: T,
}

impl<T: Real> Denoiser<T> {
    pub fn oracle(spec: DataSpec<T>) -> Result<Self> {
        spec.validate()?;
        Ok(Self::with_kind(DenoiserKind::Oracle { spec }))
    }

    pub fn frozen(params: WienerParams<T>, ref_width: usize, ref_height: usize) -> Result<Self> {
        params.validate()?;
        if ref_width == 0 || ref_height == 0 {
            return Err(Error::InvalidParameter("reference resolution must be positive".into()));
        }
        Ok(Self::with_kind(DenoiserKind::Frozen { params, ref_width, ref_height }))
    }

    pub fn fitted(params: WienerParams<T>) -> Result<Self> {
        params.validate()?;
        Ok(Self::with_kind(DenoiserKind::Fitted { params }))
    }

    pub fn iid(variance: T, mean: T) -> Result<Self> {
        if !(variance > T::zero()) || !variance.is_finite() || !mean.is_finite() {
            return Err(Error::InvalidParameter(format!("iid prior needs variance > 0, got {variance}")));
        }
        Ok(Self::with_kind(DenoiserKind::Iid { variance, mean }))
    }

    fn with_kind(kind: DenoiserKind<T>) -> Self {
        Denoiser { kind, noise_variance: T::one() }
    }

    pub fn with_noise_variance(mut self, noise_variance: T) -> Result<Self> {
        if !(noise_variance > T::zero()) || !noise_variance.is_finite() {
            return Err(Error::InvalidParameter(format!("noise variance must be positive, got {noise_variance}")));
        }
        self.noise_variance = noise_variance;
        Ok(self)
    }

    pub fn kind(&self) -> &DenoiserKind<T> {
        &self.kind
    }

    pub fn noise_variance(&self) -> T {
        self.noise_variance
    }

    pub fn label(&self) -> String {
        match &self.kind {
            DenoiserKind::Oracle { .. } => "oracle".into(),
            DenoiserKind::Frozen { ref_width, ref_height, .. } => format!("frozen@{ref_width}x{ref_height}"),
            DenoiserKind::Fitted { .. } => "fitted".into(),
            DenoiserKind::Iid { .. } => "iid".into(),
        }
    }

    /// Per-bin signal powers and prior mean this model assumes on a `width`×`height` grid.
    pub fn prior(&self, width: usize, height: usize) -> Result<SpectralPrior<T>> {
        let (signal_power, mean) = match &self.kind {
            DenoiserKind::Oracle { spec } => (power_spectrum(spec, width, height)?, spec.mean),
            DenoiserKind::Frozen { params, .. } | DenoiserKind::Fitted { params } => {
                (params.bin_powers(width, height), params.mean)
            }
            DenoiserKind::Iid { variance, mean } => (vec![*variance; width * height], *mean),
        };
        Ok(SpectralPrior { width, height, signal_power, mean, noise_variance: self.noise_variance })
    }

    /// `φ(x, σ_cond)` in pixel space.
    pub fn velocity(&self, x: &Field<T>, sigma_cond: T) -> Result<Field<T>> {
        check_conditioning(sigma_cond)?;
        self.prior(x.width(), x.height())?.velocity(x, sigma_cond)
    }
}

pub(crate) fn check_conditioning<T: Real>(sigma: T) -> Result<()> {
    if !(sigma >= T::zero() && sigma <= T::one()) {
        return Err(Error::Domain(format!("conditioning noise level {sigma} outside [0, 1]")));
    }
    Ok(())
}

/// A denoiser resolved at one resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralPrior<T> {
    width: usize,
    height: usize,
    signal_power: Vec<T>,
    mean: T,
    noise_variance: T,
}

impl<T: Real> SpectralPrior<T> {
    pub fn signal_power(&self) -> &[T] {
        &self.signal_power
    }

    pub fn mean(&self) -> T {
        self.mean
    }

    pub fn noise_variance(&self) -> T {
        self.noise_variance
    }

    pub fn gains(&self, sigma: T) -> Vec<T> {
        self.signal_power.iter().map(|&s| wiener_gain(s, self.noise_variance, sigma)).collect()
    }

    /// Overwrites `coeffs` (a spectrum of this prior's resolution) with the velocity spectrum.
    pub fn apply(&self, coeffs: &mut [Complex<T>], gains: &[T], sigma: T) {
        apply_gains(coeffs, gains, self.dc_mean(), sigma);
    }

    /// Spectrum of the constant prior-mean field at DC: `N·m`.
    pub(crate) fn dc_mean(&self) -> T {
        T::from_usize_lossy(self.width * self.height) * self.mean
    }

    pub fn velocity_spectrum(&self, x: &Spectrum<T>, sigma: T) -> Result<Spectrum<T>> {
        if (x.width(), x.height()) != (self.width, self.height) {
            return Err(Error::MixedResolution { expected: (self.width, self.height), found: (x.width(), x.height()) });
        }
        let gains = self.gains(sigma);
        let mut out = x.clone();
        self.apply(out.data_mut(), &gains, sigma);
        Ok(out)
    }

    pub fn velocity(&self, x: &Field<T>, sigma: T) -> Result<Field<T>> {
        check_conditioning(sigma)?;
        let v = self.velocity_spectrum(&fft2(x)?, sigma)?;
        ifft2(&v)
    }
}

pub(crate) fn apply_gains<T: Real>(coeffs: &mut [Complex<T>], gains: &[T], dc_mean: T, sigma: T) {
    for (c, &g) in coeffs.iter_mut().zip(gains) {
        *c *= g;
    }
    // DC: A·(c − (1−σ)·N·m) − N·m
    let shift = gains[0] * (T::one() - sigma) * dc_mean + dc_mean;
    coeffs[0].re -= shift;
}

pub(crate) fn check_uniform<T: Real>(samples: &[Field<T>]) -> Result<(usize, usize)> {
    let first = samples.first().ok_or(Error::TooFewSamples { need: 1, got: 0 })?;
    for s in samples {
        first.check_same_shape(s)?;
    }
    Ok(first.resolution())
}

struct Draw<T> {
    sigma: T,
    noisy: Field<T>,
    target: Field<T>,
}

/// Draws are keyed by the sample's content so a repeated sample gets repeated draws.
fn draws_for<T: Real>(x: &Field<T>, schedule: &SigmaSchedule<T>, seed: Seed) -> Vec<Draw<T>> {
    let item = seed.derive(content_hash(x.data()));
    (0..DRAWS_PER_SAMPLE as u64)
        .map(|j| {
            let s = item.derive(j);
            let t = (s.value() % (schedule.steps() as u64 + 1)) as usize;
            let sigma = schedule.sigma(t);
            let eps = Field::from_parts(x.width(), x.height(), standard_normals(s.derive(0), x.len()));
            let keep = T::one() - sigma;
            let noisy = Field::from_parts(
                x.width(),
                x.height(),
                x.data().iter().zip(eps.data()).map(|(&a, &e)| keep * a + sigma * e).collect(),
            );
            let target = Field::from_parts(
                x.width(),
                x.height(),
                eps.data().iter().zip(x.data()).map(|(&e, &a)| e - a).collect(),
            );
            Draw { sigma, noisy, target }
        })
        .collect()
}

/// Mean over samples and random schedule levels of `‖φ(x_σ, σ) − (ε − x)‖² / N`.
pub fn flow_matching_loss<T: Real>(
    d: &Denoiser<T>,
    samples: &[Field<T>],
    schedule: &SigmaSchedule<T>,
    seed: Seed,
) -> Result<T> {
    check_uniform(samples)?;
    let per_item: Vec<T> = samples
        .par_iter()
        .map(|x| {
            let draws = draws_for(x, schedule, seed);
            let mut acc = T::zero();
            for draw in &draws {
                let v = d.velocity(&draw.noisy, draw.sigma)?;
                acc += v.mse(&draw.target)?;
            }
            Ok(acc / T::from_usize_lossy(draws.len()))
        })
        .collect::<Result<_>>()?;
    Ok(per_item.iter().copied().sum::<T>() / T::from_usize_lossy(per_item.len()))
}

/// The draws of [`flow_matching_loss`] held in the Fourier domain, so the
/// loss of any frequency-diagonal prior can be evaluated without transforms
/// (Parseval: `‖v − u‖² = Σ|V − U|²/N`).
pub struct FlowMatchingBatch<T> {
    width: usize,
    height: usize,
    entries: Vec<Vec<SpectralDraw<T>>>,
}

struct SpectralDraw<T> {
    sigma: T,
    noisy: Vec<Complex<T>>,
    target: Vec<Complex<T>>,
}

impl<T: Real> FlowMatchingBatch<T> {
    pub fn new(samples: &[Field<T>], schedule: &SigmaSchedule<T>, seed: Seed) -> Result<Self> {
        let (width, height) = check_uniform(samples)?;
        let entries = samples
            .par_iter()
            .map(|x| {
                draws_for(x, schedule, seed)
                    .into_iter()
                    .map(|d| {
                        Ok(SpectralDraw {
                            sigma: d.sigma,
                            noisy: fft2(&d.noisy)?.into_data(),
                            target: fft2(&d.target)?.into_data(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FlowMatchingBatch { width, height, entries })
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Loss of a prior given by per-bin signal powers and mean.
    pub fn loss(&self, signal_power: &[T], mean: T, noise_variance: T) -> T {
        let n = T::from_usize_lossy(self.width * self.height);
        let dc_mean = n * mean;
        let norm = n * n;
        let per_item: Vec<T> = self
            .entries
            .iter()
            .map(|draws| {
                let mut acc = T::zero();
                for d in draws {
                    let mut sq = T::zero();
                    for (k, ((x, u), &s)) in d.noisy.iter().zip(&d.target).zip(signal_power).enumerate() {
                        let g = wiener_gain(s, noise_variance, d.sigma);
                        let mut v = *x * g;
                        if k == 0 {
                            v.re -= g * (T::one() - d.sigma) * dc_mean + dc_mean;
                        }
                        sq += (v - *u).norm_sqr();
                    }
                    acc += sq / norm;
                }
                acc / T::from_usize_lossy(draws.len())
            })
            .collect();
        per_item.iter().copied().sum::<T>() / T::from_usize_lossy(per_item.len())
    }

    pub fn loss_for(&self, d: &Denoiser<T>) -> Result<T> {
        let prior = d.prior(self.width, self.height)?;
        Ok(self.loss(prior.signal_power(), prior.mean(), prior.noise_variance()))
    }
}

/// One evaluated point of the fitting grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridPoint<T> {
    pub amplitude: T,
    pub alpha: T,
    pub loss: T,
}

#[derive(Clone, Debug)]
pub struct FitReport<T> {
    pub params: WienerParams<T>,
    pub loss: T,
    /// Best grid point before refinement.
    pub grid_best: GridPoint<T>,
    pub grid: Vec<GridPoint<T>>,
}

const AMPLITUDE_LOG10_RANGE: (f64, f64) = (-2.0, 2.0);
const ALPHA_RANGE: (f64, f64) = (0.0, 4.0);
const GRID_STEP: f64 = 0.1;
const GOLDEN_ITERATIONS: usize = 30;

/// Fits `(amplitude, alpha)` by minimizing the flow-matching loss over a
/// log-amplitude × alpha grid, then one golden-section pass per axis.
/// The mean is the average of the sample means.
pub fn fit_spectrum<T: Real>(samples: &[Field<T>], noise_variance: T, seed: Seed) -> Result<FitReport<T>> {
    if samples.len() < MIN_FIT_SAMPLES {
        return Err(Error::TooFewSamples { need: MIN_FIT_SAMPLES, got: samples.len() });
    }
    let (width, height) = check_uniform(samples)?;
    if !(noise_variance > T::zero()) {
        return Err(Error::InvalidParameter("noise variance must be positive".into()));
    }
    let stats: Vec<(T, T)> = samples.iter().map(Field::stats).collect();
    let mean = stats.iter().map(|s| s.0).sum::<T>() / T::from_usize_lossy(stats.len());
    let scale = T::one() + mean.abs();
    if stats.iter().all(|s| s.1 <= T::epsilon() * scale * scale) {
        return Err(Error::Degenerate("all samples are constant".into()));
    }

    let schedule = SigmaSchedule::linear(DEFAULT_STEPS)?;
    let batch = FlowMatchingBatch::new(samples, &schedule, seed)?;
    let log_nu: Vec<Option<T>> =
        normalized_frequencies::<T>(width, height).into_iter().map(|nu| (nu > T::zero()).then(|| nu.ln())).collect();
    let eval = |amplitude: T, alpha: T| {
        let powers: Vec<T> = log_nu.iter().map(|l| l.map_or(T::zero(), |l| amplitude * (-alpha * l).exp())).collect();
        batch.loss(&powers, mean, noise_variance)
    };

    let steps = |(lo, hi): (f64, f64)| ((hi - lo) / GRID_STEP).round() as usize;
    let (n_amp, n_alpha) = (steps(AMPLITUDE_LOG10_RANGE), steps(ALPHA_RANGE));
    let points: Vec<(T, T)> = (0..=n_alpha)
        .flat_map(|j| {
            let alpha = T::lit(ALPHA_RANGE.0 + GRID_STEP * j as f64);
            (0..=n_amp).map(move |i| {
                let log_amp = AMPLITUDE_LOG10_RANGE.0 + GRID_STEP * i as f64;
                (T::lit(10f64.powf(log_amp)), alpha)
            })
        })
        .collect();
    let grid: Vec<GridPoint<T>> = points
        .par_iter()
        .map(|&(amplitude, alpha)| GridPoint { amplitude, alpha, loss: eval(amplitude, alpha) })
        .collect();
    // Points are ordered by alpha, then amplitude: strict improvement keeps the earliest tie.
    let mut grid_best = grid[0];
    for p in &grid[1..] {
        if p.loss < grid_best.loss {
            grid_best = *p;
        }
    }

    let (mut amplitude, mut alpha, mut loss) = (grid_best.amplitude, grid_best.alpha, grid_best.loss);
    let step = T::lit(GRID_STEP);
    let lo = (alpha - step).max(T::lit(ALPHA_RANGE.0));
    let hi = (alpha + step).min(T::lit(ALPHA_RANGE.1));
    let (a, l) = golden_section(|a| eval(amplitude, a), lo, hi);
    if l < loss {
        alpha = a;
        loss = l;
    }
    let log_amp = amplitude.log10();
    let lo = (log_amp - step).max(T::lit(AMPLITUDE_LOG10_RANGE.0));
    let hi = (log_amp + step).min(T::lit(AMPLITUDE_LOG10_RANGE.1));
    let ten = T::lit(10.0);
    let (la, l) = golden_section(|la| eval(ten.powf(la), alpha), lo, hi);
    if l < loss {
        amplitude = ten.powf(la);
        loss = l;
    }

    Ok(FitReport { params: WienerParams::new(mean, amplitude, alpha)?, loss, grid_best, grid })
}

fn golden_section<T: Real>(f: impl Fn(T) -> T, mut lo: T, mut hi: T) -> (T, T) {
    let ratio = T::lit((5f64.sqrt() - 1.0) / 2.0);
    let mut c = hi - ratio * (hi - lo);
    let mut d = lo + ratio * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..GOLDEN_ITERATIONS {
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - ratio * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + ratio * (hi - lo);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// On-disk form of a trained model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile<T> {
    pub mean: T,
    pub amplitude: T,
    pub alpha: T,
    pub noise_variance: T,
    pub ref_width: usize,
    pub ref_height: usize,
}

impl<T: Real> ParamsFile<T> {
    pub fn new(params: WienerParams<T>, noise_variance: T, ref_width: usize, ref_height: usize) -> Self {
        ParamsFile {
            mean: params.mean,
            amplitude: params.amplitude,
            alpha: params.alpha,
            noise_variance,
            ref_width,
            ref_height,
        }
    }

    pub fn params(&self) -> Result<WienerParams<T>> {
        WienerParams::new(self.mean, self.amplitude, self.alpha)
    }

    /// The model frozen at its training resolution.
    pub fn frozen_denoiser(&self) -> Result<Denoiser<T>> {
        Denoiser::frozen(self.params()?, self.ref_width, self.ref_height)?.with_noise_variance(self.noise_variance)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text)?;
        p.params().map_err(|e| Error::Invariant(e.to_string()))?;
        if !(p.noise_variance > T::zero()) {
            return Err(Error::Invariant("noise_variance must be positive".into()));
        }
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
