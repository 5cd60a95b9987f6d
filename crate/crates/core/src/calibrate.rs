//! Per-step calibration of the conditioning noise level.
//!
//! For reverse step `t` the one-step loss compares `x̂_t`, one Euler step
//! from `x_{t+1}` conditioned on `σ̃`, against the forward sample `x_t`;
//! both forward samples share one noise draw. The search starts from the
//! step's default conditioning, sweeps a coarse window, then a fine window
//! around the incumbent, and never leaves `[0, upper]`. Running it from
//! `t = T−1` down to `0` with `upper = σ̂*_{t+1}` (and `σ̂*_T = 1`) keeps
//! the table monotone.

use std::path::{Path, PathBuf};

use num_complex::Complex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::{fft2, Field};
use crate::model::{apply_gains, check_uniform, Denoiser, SpectralPrior};
use crate::rng::Seed;
use crate::sampler::{add_given_noise, euler_step, noise_field};
use crate::scalar::Real;
use crate::schedule::SigmaSchedule;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig<T> {
    pub eps_coarse: T,
    pub eps_fine: T,
    pub stride_coarse: T,
    pub stride_fine: T,
}

impl<T: Real> Default for SearchConfig<T> {
    fn default() -> Self {
        SearchConfig {
            eps_coarse: T::lit(0.1),
            eps_fine: T::lit(0.01),
            stride_coarse: T::lit(0.02),
            stride_fine: T::lit(0.002),
        }
    }
}

impl<T: Real> SearchConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let ok = self.stride_fine > T::zero()
            && self.stride_fine < self.stride_coarse
            && self.eps_fine > T::zero()
            && self.eps_fine < self.eps_coarse
            && self.eps_coarse.is_finite()
            && self.stride_coarse.is_finite();
        if !ok {
            return Err(Error::InvalidParameter(format!(
                "search config needs 0 < stride_fine < stride_coarse and 0 < eps_fine < eps_coarse, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Outcome of one coarse-to-fine search.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSearch<T> {
    pub sigma_hat: T,
    pub loss: T,
    /// Starting point: the default conditioning, clamped to `upper`.
    pub default_sigma: T,
    pub default_loss: T,
    /// Every candidate evaluated, in evaluation order (default first).
    pub evaluated: Vec<T>,
    /// The default lay above `upper` and was clamped.
    pub clamped: bool,
    /// The coarse window was empty; the clamped default was returned.
    pub empty_range: bool,
}

/// `lo, lo + stride, …` up to `hi`.
pub fn grid_candidates<T: Real>(lo: T, hi: T, stride: T) -> Vec<T> {
    let mut out = Vec::new();
    if hi < lo {
        return out;
    }
    let tol = stride * T::lit(1e-9);
    let mut i = 0usize;
    loop {
        let c = lo + stride * T::from_usize_lossy(i);
        if c > hi + tol {
            break;
        }
        out.push(c.min(hi));
        i += 1;
    }
    out
}

/// Coarse-to-fine minimization of `objective` around `default` within `[0, upper]`.
///
/// Candidates are visited in ascending order and replace the incumbent only
/// on strict improvement, so ties keep the default, then the smallest `σ̃`.
pub fn coarse_to_fine<T: Real>(
    objective: impl Fn(T) -> T + Sync,
    default: T,
    upper: T,
    cfg: &SearchConfig<T>,
) -> Result<StepSearch<T>> {
    cfg.validate()?;
    if !(upper >= T::zero() && upper <= T::one()) {
        return Err(Error::Domain(format!("upper bound {upper} outside [0, 1]")));
    }
    let clamped = default > upper;
    let start = default.min(upper).max(T::zero());
    let start_loss = objective(start);
    let mut best = (start, start_loss);
    let mut evaluated = vec![start];

    let lo = (default - cfg.eps_coarse).max(T::zero());
    let hi = (default + cfg.eps_coarse).min(upper);
    if hi < lo {
        return Ok(StepSearch {
            sigma_hat: start,
            loss: start_loss,
            default_sigma: start,
            default_loss: start_loss,
            evaluated,
            clamped,
            empty_range: true,
        });
    }
    let mut sweep = |cands: Vec<T>, best: &mut (T, T)| {
        let losses: Vec<T> = cands.par_iter().map(|&c| objective(c)).collect();
        for (c, l) in cands.into_iter().zip(losses) {
            evaluated.push(c);
            if l < best.1 {
                *best = (c, l);
            }
        }
    };
    sweep(grid_candidates(lo, hi, cfg.stride_coarse), &mut best);
    let lo = (best.0 - cfg.eps_fine).max(T::zero());
    let hi = (best.0 + cfg.eps_fine).min(upper);
    sweep(grid_candidates(lo, hi, cfg.stride_fine), &mut best);

    Ok(StepSearch {
        sigma_hat: best.0,
        loss: best.1,
        default_sigma: start,
        default_loss: start_loss,
        evaluated,
        clamped,
        empty_range: false,
    })
}

fn check_step<T: Real>(schedule: &SigmaSchedule<T>, t: usize) -> Result<()> {
    if t >= schedule.steps() {
        return Err(Error::Domain(format!("step {t} out of range 0..{}", schedule.steps())));
    }
    Ok(())
}

/// Per-pixel one-step reverse error between arbitrary levels, via explicit
/// Euler steps in pixel space. Sample `i` uses noise `step_seed.derive(i)`.
pub fn one_step_reverse_loss_between<T: Real>(
    d: &Denoiser<T>,
    x0s: &[Field<T>],
    sigma_from: T,
    sigma_to: T,
    sigma_tilde: T,
    step_seed: Seed,
) -> Result<T> {
    check_uniform(x0s)?;
    let per: Vec<T> = x0s
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let eps = noise_field(x0.width(), x0.height(), step_seed.derive(i as u64));
            let from = add_given_noise(x0, sigma_from, &eps)?;
            let to = add_given_noise(x0, sigma_to, &eps)?;
            euler_step(&from, sigma_from, sigma_to, sigma_tilde, d)?.mse(&to)
        })
        .collect::<Result<_>>()?;
    Ok(per.iter().copied().sum::<T>() / T::from_usize_lossy(per.len()))
}

/// Mean per-pixel `‖x̂_t − x_t‖²` for reverse step `t` conditioned on `sigma_tilde`.
pub fn one_step_reverse_loss<T: Real>(
    d: &Denoiser<T>,
    x0s: &[Field<T>],
    schedule: &SigmaSchedule<T>,
    t: usize,
    sigma_tilde: T,
    seed: Seed,
) -> Result<T> {
    check_step(schedule, t)?;
    one_step_reverse_loss_between(d, x0s, schedule.sigma(t + 1), schedule.sigma(t), sigma_tilde, seed.derive(t as u64))
}

type Coeffs<T> = Vec<Complex<T>>;

/// The draws of one reverse step held in the Fourier domain; evaluates the
/// same loss as [`one_step_reverse_loss`] for any `σ̃` without transforms.
pub struct ReverseStepObjective<T> {
    prior: SpectralPrior<T>,
    step: T,
    inputs: Vec<Vec<Complex<T>>>,
    offsets: Vec<Vec<Complex<T>>>,
    n_pixels: usize,
}

impl<T: Real> ReverseStepObjective<T> {
    pub fn new(d: &Denoiser<T>, x0s: &[Field<T>], schedule: &SigmaSchedule<T>, t: usize, seed: Seed) -> Result<Self> {
        check_step(schedule, t)?;
        Self::between(d, x0s, schedule.sigma(t + 1), schedule.sigma(t), seed.derive(t as u64))
    }

    pub fn between(d: &Denoiser<T>, x0s: &[Field<T>], sigma_from: T, sigma_to: T, step_seed: Seed) -> Result<Self> {
        let (w, h) = check_uniform(x0s)?;
        if sigma_to > sigma_from {
            return Err(Error::Domain(format!("reverse step {sigma_from} -> {sigma_to}")));
        }
        let pairs: Vec<(Coeffs<T>, Coeffs<T>)> = x0s
            .par_iter()
            .enumerate()
            .map(|(i, x0)| {
                let eps = noise_field(w, h, step_seed.derive(i as u64));
                let from = fft2(&add_given_noise(x0, sigma_from, &eps)?)?.into_data();
                let to = fft2(&add_given_noise(x0, sigma_to, &eps)?)?.into_data();
                let offset = from.iter().zip(&to).map(|(a, b)| a - b).collect();
                Ok((from, offset))
            })
            .collect::<Result<_>>()?;
        let (inputs, offsets) = pairs.into_iter().unzip();
        Ok(ReverseStepObjective {
            prior: d.prior(w, h)?,
            step: sigma_to - sigma_from,
            inputs,
            offsets,
            n_pixels: w * h,
        })
    }

    pub fn loss(&self, sigma_tilde: T) -> T {
        let gains = self.prior.gains(sigma_tilde);
        let dc_mean = self.prior.dc_mean();
        let norm = T::from_usize_lossy(self.n_pixels).powi(2);
        let per: Vec<T> = self
            .inputs
            .par_iter()
            .zip(&self.offsets)
            .map(|(input, offset)| {
                let mut v = input.clone();
                apply_gains(&mut v, &gains, dc_mean, sigma_tilde);
                v.iter().zip(offset).map(|(vk, ok)| (*ok + *vk * self.step).norm_sqr()).sum::<T>() / norm
            })
            .collect();
        per.iter().copied().sum::<T>() / T::from_usize_lossy(per.len())
    }
}

/// One step of the backward recursion.
pub fn calibrate_step<T: Real>(
    d: &Denoiser<T>,
    x0s: &[Field<T>],
    schedule: &SigmaSchedule<T>,
    t: usize,
    upper: T,
    cfg: &SearchConfig<T>,
    seed: Seed,
) -> Result<StepSearch<T>> {
    cfg.validate()?;
    let objective = ReverseStepObjective::new(d, x0s, schedule, t, seed)?;
    coarse_to_fine(|s| objective.loss(s), schedule.default_conditioning(t), upper, cfg)
}

/// Calibrates every step from `T−1` down to `0`.
pub fn calibrate_schedule<T: Real>(
    d: &Denoiser<T>,
    x0s: &[Field<T>],
    schedule: &SigmaSchedule<T>,
    cfg: &SearchConfig<T>,
    seed: Seed,
) -> Result<CalibrationTable<T>> {
    let (width, height) = check_uniform(x0s)?;
    cfg.validate()?;
    let steps = schedule.steps();
    let mut sigmas_hat = vec![T::zero(); steps];
    let mut losses = vec![T::zero(); steps];
    let mut default_losses = vec![T::zero(); steps];
    let mut clamped = vec![false; steps];
    let mut upper = schedule.sigma(steps);
    for t in (0..steps).rev() {
        let r = calibrate_step(d, x0s, schedule, t, upper, cfg, seed)?;
        sigmas_hat[t] = r.sigma_hat;
        losses[t] = r.loss;
        default_losses[t] = r.default_loss;
        clamped[t] = r.clamped || r.empty_range;
        upper = r.sigma_hat;
    }
    let table = CalibrationTable {
        width,
        height,
        steps,
        schedule_kind: schedule.kind_name().to_string(),
        sigmas_hat,
        losses,
        n_samples: x0s.len(),
        seed,
        default_losses,
        clamped,
    };
    table.validate()?;
    Ok(table)
}

/// Calibrated conditioning `σ̂*_0 … σ̂*_{T−1}` for one resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable<T> {
    pub width: usize,
    pub height: usize,
    #[serde(rename = "T")]
    pub steps: usize,
    pub schedule_kind: String,
    pub sigmas_hat: Vec<T>,
    /// Calibrated loss per step.
    pub losses: Vec<T>,
    pub n_samples: usize,
    pub seed: Seed,
    /// Loss at the (clamped) default conditioning per step; empty when unknown.
    #[serde(default)]
    pub default_losses: Vec<T>,
    /// Steps whose default conditioning had to be clamped; empty when unknown.
    #[serde(default)]
    pub clamped: Vec<bool>,
}

impl<T: Real> CalibrationTable<T> {
    /// A table holding the schedule's default conditioning.
    pub fn identity(schedule: &SigmaSchedule<T>, width: usize, height: usize) -> Self {
        CalibrationTable {
            width,
            height,
            steps: schedule.steps(),
            schedule_kind: schedule.kind_name().to_string(),
            sigmas_hat: schedule.default_conditionings(),
            losses: vec![T::zero(); schedule.steps()],
            n_samples: 0,
            seed: Seed(0),
            default_losses: Vec::new(),
            clamped: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invariant(m));
        if self.width == 0 || self.height == 0 || self.steps == 0 {
            return bad("table needs a positive resolution and T".into());
        }
        if self.sigmas_hat.len() != self.steps || self.losses.len() != self.steps {
            return bad(format!(
                "T={} but {} sigmas and {} losses",
                self.steps,
                self.sigmas_hat.len(),
                self.losses.len()
            ));
        }
        for (name, len) in [("default_losses", self.default_losses.len()), ("clamped", self.clamped.len())] {
            if len != 0 && len != self.steps {
                return bad(format!("{name} has {len} entries for T={}", self.steps));
            }
        }
        if self.losses.iter().chain(&self.default_losses).any(|l| !l.is_finite() || *l < T::zero()) {
            return bad("losses must be finite and nonnegative".into());
        }
        for (t, &s) in self.sigmas_hat.iter().enumerate() {
            let next = self.sigmas_hat.get(t + 1).copied().unwrap_or(T::one());
            if !(s >= T::zero()) || !(s <= next) {
                return bad(format!("sigma_hat[{t}] = {s} violates 0 <= sigma_hat[t] <= sigma_hat[t+1] = {next}"));
            }
        }
        Ok(())
    }

    /// Whether every calibrated loss is at most its default loss.
    pub fn non_inferior(&self) -> bool {
        self.default_losses.len() == self.steps && self.losses.iter().zip(&self.default_losses).all(|(l, d)| l <= d)
    }

    /// `Σ_t (default − calibrated)` loss, when default losses are recorded.
    pub fn total_improvement(&self) -> Option<T> {
        (self.default_losses.len() == self.steps)
            .then(|| self.default_losses.iter().zip(&self.losses).map(|(d, l)| *d - *l).sum())
    }

    /// Mean `|σ̂*_t − default_t|`.
    pub fn mean_abs_deviation(&self, schedule: &SigmaSchedule<T>) -> T {
        let d: T = self.sigmas_hat.iter().zip(schedule.default_conditionings()).map(|(a, b)| (*a - b).abs()).sum();
        d / T::from_usize_lossy(self.steps)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let table: Self = serde_json::from_str(text)?;
        table.validate()?;
        Ok(table)
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

    /// `tables/<schedule_kind>/<width>x<height>.json`.
    pub fn relative_path(schedule_kind: &str, width: usize, height: usize) -> PathBuf {
        PathBuf::from("tables").join(schedule_kind).join(format!("{width}x{height}.json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{grf_sample, DataSpec};

    fn fields(w: usize, n: usize, seed: u64) -> Vec<Field<f64>> {
        let spec = DataSpec::new(0.0f64, 1.0, 2.0).unwrap();
        (0..n).map(|i| grf_sample(&spec, w, w, Seed(seed + i as u64)).unwrap()).collect()
    }

    #[test]
    fn candidates_cover_window() {
        let c = grid_candidates(0.3f64, 0.5, 0.02);
        assert_eq!(c.len(), 11);
        assert!((c[10] - 0.5).abs() < 1e-12);
        assert!(grid_candidates(0.5f64, 0.3, 0.02).is_empty());
        assert_eq!(grid_candidates(0.2f64, 0.2, 0.02), vec![0.2]);
    }

    #[test]
    fn config_validation() {
        assert!(SearchConfig::<f64>::default().validate().is_ok());
        let c = SearchConfig::<f64> { stride_fine: 0.05, ..Default::default() };
        assert!(c.validate().is_err());
        let c = SearchConfig::<f64> { eps_fine: 0.2, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn loss_routes_agree() {
        let spec = DataSpec::new(0.0f64, 1.0, 2.0).unwrap();
        let d = Denoiser::frozen(crate::model::WienerParams::from_spec(&spec, 64).unwrap(), 64, 64).unwrap();
        let x0s = fields(16, 5, 10);
        let s = SigmaSchedule::linear(20).unwrap();
        for t in [0, 7, 19] {
            let obj = ReverseStepObjective::new(&d, &x0s, &s, t, Seed(3)).unwrap();
            for st in [0.0, 0.13, s.default_conditioning(t), 1.0] {
                let pixel = one_step_reverse_loss(&d, &x0s, &s, t, st, Seed(3)).unwrap();
                let spectral = obj.loss(st);
                assert!(((pixel - spectral) / pixel).abs() < 1e-9, "t={t} st={st}: {pixel} vs {spectral}");
            }
        }
    }

    #[test]
    fn zero_width_step_has_zero_loss() {
        let d = Denoiser::oracle(DataSpec::new(0.0f64, 1.0, 2.0).unwrap()).unwrap();
        let x0s = fields(8, 3, 1);
        let l = one_step_reverse_loss_between(&d, &x0s, 0.4, 0.4, 0.7, Seed(2)).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn out_of_range_step_is_rejected() {
        let d = Denoiser::oracle(DataSpec::new(0.0f64, 1.0, 2.0).unwrap()).unwrap();
        let s = SigmaSchedule::linear(5).unwrap();
        assert!(matches!(one_step_reverse_loss(&d, &fields(8, 2, 1), &s, 5, 0.5, Seed(0)), Err(Error::Domain(_))));
    }

    #[test]
    fn scalar_oracle_prefers_matched_conditioning() {
        // exhaustive scan: the loss at the default beats default ± 0.2
        let d = Denoiser::iid(4.0f64, 0.0).unwrap();
        let x0s: Vec<Field<f64>> = crate::rng::standard_normals::<f64>(Seed(5), 4000)
            .into_iter()
            .map(|v| Field::new(1, 1, vec![2.0 * v]).unwrap())
            .collect();
        let s = SigmaSchedule::linear(50).unwrap();
        for t in [15, 25, 35] {
            let c = s.default_conditioning(t);
            let obj = ReverseStepObjective::new(&d, &x0s, &s, t, Seed(8)).unwrap();
            let at = obj.loss(c);
            assert!(at <= obj.loss(c - 0.2) && at <= obj.loss(c + 0.2));
            let scan: Vec<f64> = (0..=400).map(|i| i as f64 / 400.0).collect();
            let best = scan.iter().copied().min_by(|a, b| obj.loss(*a).total_cmp(&obj.loss(*b))).unwrap();
            assert!((best - c).abs() < 0.05, "t={t}: scan argmin {best} vs default {c}");
        }
    }

    #[test]
    fn search_respects_upper_and_never_loses_to_default() {
        let cfg = SearchConfig::default();
        let r = coarse_to_fine(|s: f64| (s - 0.9).powi(2), 0.5, 0.45, &cfg).unwrap();
        assert!(r.clamped);
        assert!(r.evaluated.iter().all(|&c| c <= 0.45));
        assert!(r.loss <= r.default_loss);
        assert!((r.sigma_hat - 0.45).abs() < 1e-12);

        let r = coarse_to_fine(|s: f64| (s - 0.5).abs(), 0.5, 1.0, &cfg).unwrap();
        assert_eq!(r.sigma_hat, 0.5);
        assert_eq!(r.loss, 0.0);
    }

    #[test]
    fn empty_window_returns_clamped_default() {
        let cfg = SearchConfig::default();
        let r = coarse_to_fine(|s: f64| s, 0.8, 0.3, &cfg).unwrap();
        assert!(r.empty_range && r.clamped);
        assert_eq!(r.sigma_hat, 0.3);
        assert_eq!(r.evaluated, vec![0.3]);
    }

    #[test]
    fn matched_oracle_calibrates_to_identity() {
        let spec = DataSpec::new(0.0f64, 1.0, 2.0).unwrap();
        let d = Denoiser::oracle(spec).unwrap();
        let s = SigmaSchedule::linear(10).unwrap();
        let x0s = fields(32, 16, 40);
        let table = calibrate_schedule(&d, &x0s, &s, &SearchConfig::default(), Seed(6)).unwrap();
        // small batch: sampling noise moves the argmin a little off the default
        for (a, b) in table.sigmas_hat.iter().zip(s.default_conditionings()) {
            assert!((a - b).abs() <= 0.04, "{a} vs {b}");
        }
        assert!(table.non_inferior());
    }

    #[test]
    fn table_json_roundtrip_and_validation() {
        let s = SigmaSchedule::<f64>::linear(6).unwrap();
        let mut t = CalibrationTable::identity(&s, 16, 16);
        t.default_losses = vec![0.5; 6];
        t.clamped = vec![false; 6];
        let text = t.to_json().unwrap();
        assert_eq!(CalibrationTable::from_json(&text).unwrap(), t);

        let mut tampered = t.clone();
        tampered.sigmas_hat[3] = tampered.sigmas_hat[4] + 0.01;
        let err = CalibrationTable::<f64>::from_json(&tampered.to_json().unwrap()).unwrap_err();
        assert!(matches!(err, Error::Invariant(_)));

        let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        doc.as_object_mut().unwrap().remove("losses");
        match CalibrationTable::<f64>::from_json(&doc.to_string()) {
            Err(Error::Parse(msg)) => assert!(msg.contains("losses"), "{msg}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn table_paths() {
        assert_eq!(CalibrationTable::<f64>::relative_path("linear", 16, 16), PathBuf::from("tables/linear/16x16.json"));
    }
}
