//! Forward noising, Euler reverse steps with decoupled conditioning, and
//! full sampling with an optional calibration table.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::calibrate::CalibrationTable;
use crate::grid::Field;
use crate::model::{check_conditioning, Denoiser};
use crate::rng::{standard_normals, Seed};
use crate::scalar::Real;
use crate::schedule::SigmaSchedule;
use crate::{Error, Result};

/// iid standard normal field.
pub fn noise_field<T: Real>(width: usize, height: usize, seed: Seed) -> Field<T> {
    Field::from_parts(width, height, standard_normals(seed, width * height))
}

/// `(1−σ)·x0 + σ·ε` for a given noise field.
pub fn add_given_noise<T: Real>(x0: &Field<T>, sigma: T, noise: &Field<T>) -> Result<Field<T>> {
    check_level(sigma)?;
    x0.check_same_shape(noise)?;
    let keep = T::one() - sigma;
    let data = x0.data().iter().zip(noise.data()).map(|(&a, &e)| keep * a + sigma * e).collect();
    Ok(Field::from_parts(x0.width(), x0.height(), data))
}

/// `(1−σ)·x0 + σ·ε` with `ε` drawn from `seed`.
pub fn add_noise<T: Real>(x0: &Field<T>, sigma: T, seed: Seed) -> Result<Field<T>> {
    check_level(sigma)?;
    add_given_noise(x0, sigma, &noise_field(x0.width(), x0.height(), seed))
}

fn check_level<T: Real>(sigma: T) -> Result<()> {
    if !(sigma >= T::zero() && sigma <= T::one()) {
        return Err(Error::Domain(format!("noise level {sigma} outside [0, 1]")));
    }
    Ok(())
}

/// Forward-noised copies `x_0 … x_T` of one clean field.
#[derive(Clone, Debug)]
pub struct Trajectory<T> {
    pub fields: Vec<Field<T>>,
    pub schedule: SigmaSchedule<T>,
    pub seed: Seed,
}

/// `fields[t] = add_noise(x0, σ_t, seed.derive(t))`; `fields[0]` is `x0` itself.
pub fn forward_trajectory<T: Real>(x0: &Field<T>, schedule: &SigmaSchedule<T>, seed: Seed) -> Result<Trajectory<T>> {
    let mut fields = Vec::with_capacity(schedule.steps() + 1);
    fields.push(x0.clone());
    for t in 1..=schedule.steps() {
        fields.push(add_noise(x0, schedule.sigma(t), seed.derive(t as u64))?);
    }
    Ok(Trajectory { fields, schedule: schedule.clone(), seed })
}

#[derive(Serialize)]
struct TrajectoryIndex<'a> {
    seed: u64,
    width: usize,
    height: usize,
    schedule_kind: &'a str,
    #[serde(rename = "T")]
    steps: usize,
    sigmas: Vec<f64>,
    files: Vec<String>,
}

impl<T: Real> Trajectory<T> {
    /// Writes `x_000.bin …` plus `index.json` into `dir`.
    pub fn export(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::with_capacity(self.fields.len());
        for (t, f) in self.fields.iter().enumerate() {
            let name = format!("x_{t:03}.bin");
            f.save(dir.join(&name))?;
            files.push(name);
        }
        let first = &self.fields[0];
        let index = TrajectoryIndex {
            seed: self.seed.value(),
            width: first.width(),
            height: first.height(),
            schedule_kind: self.schedule.kind_name(),
            steps: self.schedule.steps(),
            sigmas: self.schedule.sigmas().iter().map(|v| v.as_f64()).collect(),
            files,
        };
        std::fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
        Ok(())
    }
}

/// `x + φ(x, σ_cond)·(σ_to − σ_from)`.
pub fn euler_step<T: Real>(
    x: &Field<T>,
    sigma_from: T,
    sigma_to: T,
    sigma_cond: T,
    d: &Denoiser<T>,
) -> Result<Field<T>> {
    check_level(sigma_from)?;
    check_level(sigma_to)?;
    if sigma_to > sigma_from {
        return Err(Error::Domain(format!("reverse step must not increase noise: {sigma_from} -> {sigma_to}")));
    }
    check_conditioning(sigma_cond)?;
    let v = d.velocity(x, sigma_cond)?;
    x.add_scaled(&v, sigma_to - sigma_from)
}

/// Conditioning per step: the table's values, or the schedule defaults.
pub fn conditioning_for<T: Real>(
    schedule: &SigmaSchedule<T>,
    table: Option<&CalibrationTable<T>>,
    width: usize,
    height: usize,
) -> Result<Vec<T>> {
    match table {
        None => Ok(schedule.default_conditionings()),
        Some(t) => {
            if t.steps != schedule.steps() {
                return Err(Error::Mismatch(format!(
                    "table has T={} but schedule has T={}",
                    t.steps,
                    schedule.steps()
                )));
            }
            if (t.width, t.height) != (width, height) {
                return Err(Error::Mismatch(format!(
                    "table calibrated at {}x{} used at {width}x{height}",
                    t.width, t.height
                )));
            }
            Ok(t.sigmas_hat.clone())
        }
    }
}

/// Deterministic Euler sampling from `x_T ~ N(0, I)`.
pub fn sample<T: Real>(
    d: &Denoiser<T>,
    schedule: &SigmaSchedule<T>,
    table: Option<&CalibrationTable<T>>,
    width: usize,
    height: usize,
    seed: Seed,
) -> Result<Field<T>> {
    let cond = conditioning_for(schedule, table, width, height)?;
    let mut x = noise_field(width, height, seed);
    for t in (0..schedule.steps()).rev() {
        x = euler_step(&x, schedule.sigma(t + 1), schedule.sigma(t), cond[t], d)?;
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("sampler output".into()));
    }
    Ok(x)
}

/// `n` samples; sample `i` uses `seed.derive(i)`.
pub fn sample_batch<T: Real>(
    d: &Denoiser<T>,
    schedule: &SigmaSchedule<T>,
    table: Option<&CalibrationTable<T>>,
    width: usize,
    height: usize,
    n: usize,
    seed: Seed,
) -> Result<Vec<Field<T>>> {
    conditioning_for(schedule, table, width, height)?;
    (0..n as u64).into_par_iter().map(|i| sample(d, schedule, table, width, height, seed.derive(i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{grf_sample, DataSpec};

    fn scalar(v: f64) -> Field<f64> {
        Field::new(1, 1, vec![v]).unwrap()
    }

    #[test]
    fn add_noise_endpoints() {
        let spec = DataSpec::new(0.0f64, 1.0, 2.0).unwrap();
        let x0 = grf_sample(&spec, 8, 8, Seed(1)).unwrap();
        assert_eq!(add_noise(&x0, 0.0, Seed(2)).unwrap(), x0);
        let pure = add_noise(&x0, 1.0, Seed(2)).unwrap();
        assert_eq!(pure, noise_field(8, 8, Seed(2)));
        assert!(matches!(add_noise(&x0, 1.1, Seed(2)), Err(Error::Domain(_))));
        let v = add_given_noise(&scalar(2.0), 0.5, &scalar(-1.0)).unwrap();
        assert_eq!(v.data(), &[0.5]);
    }

    #[test]
    fn trajectory_shape_and_determinism() {
        let spec = DataSpec::new(0.0f64, 1.0, 2.0).unwrap();
        let x0 = grf_sample(&spec, 16, 16, Seed(1)).unwrap();
        let s = SigmaSchedule::linear(10).unwrap();
        let a = forward_trajectory(&x0, &s, Seed(5)).unwrap();
        assert_eq!(a.fields.len(), 11);
        assert_eq!(a.fields[0], x0);
        let b = forward_trajectory(&x0, &s, Seed(5)).unwrap();
        assert_eq!(a.fields, b.fields);
    }

    #[test]
    fn trajectory_endpoint_is_unit_noise() {
        let spec = DataSpec::new(0.0f64, 1.0, 2.0).unwrap();
        let s = SigmaSchedule::linear(4).unwrap();
        let mut acc = 0.0;
        for i in 0..64 {
            let x0 = grf_sample(&spec, 64, 64, Seed(i)).unwrap();
            acc += forward_trajectory(&x0, &s, Seed(1000 + i)).unwrap().fields[4].stats().1;
        }
        let v = acc / 64.0;
        assert!((v - 1.0).abs() < 0.05, "{v}");
    }

    #[test]
    fn euler_step_examples() {
        let d = Denoiser::iid(4.0f64, 0.0).unwrap();
        let x = euler_step(&scalar(1.0), 0.5, 0.4, 0.5, &d).unwrap();
        assert!((x.data()[0] - 1.12).abs() < 1e-12);
        let z = Field::zeros(4, 4);
        assert_eq!(euler_step(&z, 0.5, 0.4, 0.5, &d).unwrap(), z);
        let x = scalar(0.7);
        assert_eq!(euler_step(&x, 0.5, 0.5, 0.3, &d).unwrap(), x);
        assert!(matches!(euler_step(&x, 0.4, 0.5, 0.3, &d), Err(Error::Domain(_))));
    }

    #[test]
    fn euler_step_composition_on_zero_state() {
        let d = Denoiser::iid(2.0f64, 0.0).unwrap();
        let z = Field::zeros(4, 4);
        let direct = euler_step(&z, 0.8, 0.2, 0.5, &d).unwrap();
        let mid = euler_step(&z, 0.8, 0.5, 0.5, &d).unwrap();
        let two = euler_step(&mid, 0.5, 0.2, 0.5, &d).unwrap();
        assert_eq!(direct, two);
    }

    #[test]
    fn default_table_is_identical_to_no_table() {
        let spec = DataSpec::new(0.0f64, 1.0, 2.0).unwrap();
        let d = Denoiser::oracle(spec).unwrap();
        let s = SigmaSchedule::linear(12).unwrap();
        let table = CalibrationTable::identity(&s, 8, 8);
        let a = sample(&d, &s, None, 8, 8, Seed(3)).unwrap();
        let b = sample(&d, &s, Some(&table), 8, 8, Seed(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, sample(&d, &s, None, 8, 8, Seed(3)).unwrap());
        assert!(matches!(sample(&d, &s, Some(&table), 16, 16, Seed(3)), Err(Error::Mismatch(_))));
        let other = SigmaSchedule::linear(10).unwrap();
        assert!(matches!(sample(&d, &other, Some(&table), 8, 8, Seed(3)), Err(Error::Mismatch(_))));
    }
}
