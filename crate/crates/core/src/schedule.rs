//! Sampling noise schedules `σ_0 = 0 < σ_1 < … < σ_T = 1`.
//!
//! `σ_0` is clean data and `σ_T` pure noise. Reverse step `t` moves the
//! state from `σ_{t+1}` down to `σ_t` and, uncalibrated, conditions the
//! denoiser on the level of its input, `σ_{t+1}`
//! (see [`SigmaSchedule::default_conditioning`]).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::scalar::Real;
use crate::{Error, Result};

/// Default number of sampling steps.
pub const DEFAULT_STEPS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScheduleKind<T> {
    Linear,
    Shifted { shift: T },
    TimeShifted { base_shift: T, ref_pixels: usize, target_pixels: usize },
}

impl<T: Real> ScheduleKind<T> {
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Shifted { .. } => "shifted",
            ScheduleKind::TimeShifted { .. } => "time_shifted",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SigmaSchedule<T> {
    sigmas: Vec<T>,
    kind: ScheduleKind<T>,
}

/// `σ' = s·σ / (1 + (s − 1)·σ)`.
#[inline]
pub fn shift_sigma<T: Real>(sigma: T, shift: T) -> T {
    shift * sigma / (T::one() + (shift - T::one()) * sigma)
}

/// Resolution-dependent shift, linear in pixel count.
pub fn resolution_shift<T: Real>(base_shift: T, ref_pixels: usize, target_pixels: usize) -> Result<T> {
    if ref_pixels == 0 || target_pixels == 0 {
        return Err(Error::InvalidParameter("pixel counts must be positive".into()));
    }
    if !(base_shift > T::zero()) {
        return Err(Error::InvalidParameter(format!("shift must be positive, got {base_shift}")));
    }
    Ok(base_shift * T::from_usize_lossy(target_pixels) / T::from_usize_lossy(ref_pixels))
}

impl<T: Real> SigmaSchedule<T> {
    /// `σ_t = t/T`.
    pub fn linear(steps: usize) -> Result<Self> {
        check_steps(steps)?;
        let n = T::from_usize_lossy(steps);
        let sigmas = (0..=steps).map(|t| T::from_usize_lossy(t) / n).collect();
        Ok(SigmaSchedule { sigmas, kind: ScheduleKind::Linear })
    }

    pub fn shifted(steps: usize, shift: T) -> Result<Self> {
        check_steps(steps)?;
        if !(shift > T::zero()) || !shift.is_finite() {
            return Err(Error::InvalidParameter(format!("shift must be positive, got {shift}")));
        }
        let mut s = Self::linear(steps)?;
        s.sigmas.iter_mut().for_each(|v| *v = shift_sigma(*v, shift));
        // endpoints exactly, whatever the rounding inside the shift
        s.sigmas[0] = T::zero();
        s.sigmas[steps] = T::one();
        s.kind = ScheduleKind::Shifted { shift };
        Ok(s)
    }

    /// Shifted schedule whose shift scales with the target pixel count.
    pub fn time_shifted(steps: usize, base_shift: T, ref_pixels: usize, target_pixels: usize) -> Result<Self> {
        let shift = resolution_shift(base_shift, ref_pixels, target_pixels)?;
        let mut s = Self::shifted(steps, shift)?;
        s.kind = ScheduleKind::TimeShifted { base_shift, ref_pixels, target_pixels };
        Ok(s)
    }

    /// Builds a schedule from explicit levels after checking the invariants.
    pub fn from_sigmas(sigmas: Vec<T>, kind: ScheduleKind<T>) -> Result<Self> {
        let s = SigmaSchedule { sigmas, kind };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.sigmas;
        if s.len() < 2 {
            return Err(Error::Invariant("schedule needs at least two levels".into()));
        }
        if s[0] != T::zero() || s[s.len() - 1] != T::one() {
            return Err(Error::Invariant("schedule must run from 0 to 1".into()));
        }
        if let Some(t) = s.windows(2).position(|w| !(w[0] < w[1])) {
            return Err(Error::Invariant(format!("schedule not strictly increasing at t={t}")));
        }
        Ok(())
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigma(&self, t: usize) -> T {
        self.sigmas[t]
    }

    pub fn sigmas(&self) -> &[T] {
        &self.sigmas
    }

    pub fn kind(&self) -> &ScheduleKind<T> {
        &self.kind
    }

    pub fn kind_name(&self) -> &'static str {
        self.kind.name()
    }

    /// Uncalibrated conditioning for reverse step `t` (`x_{t+1} → x_t`): the input level `σ_{t+1}`.
    pub fn default_conditioning(&self, step: usize) -> T {
        self.sigmas[step + 1]
    }

    /// Default conditioning for steps `0..T`.
    pub fn default_conditionings(&self) -> Vec<T> {
        self.sigmas[1..].to_vec()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut params = BTreeMap::new();
        match self.kind {
            ScheduleKind::Linear => {}
            ScheduleKind::Shifted { shift } => {
                params.insert("shift".to_string(), shift.as_f64());
            }
            ScheduleKind::TimeShifted { base_shift, ref_pixels, target_pixels } => {
                params.insert("base_shift".to_string(), base_shift.as_f64());
                params.insert("ref_pixels".to_string(), ref_pixels as f64);
                params.insert("target_pixels".to_string(), target_pixels as f64);
            }
        }
        let doc = ScheduleDoc {
            kind: self.kind_name().to_string(),
            steps: self.steps(),
            params,
            sigmas: self.sigmas.iter().map(|v| v.as_f64()).collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ScheduleDoc = serde_json::from_str(text)?;
        let param = |key: &str| {
            doc.params.get(key).copied().ok_or_else(|| Error::Parse(format!("missing schedule parameter `{key}`")))
        };
        let kind = match doc.kind.as_str() {
            "linear" => ScheduleKind::Linear,
            "shifted" => ScheduleKind::Shifted { shift: T::lit(param("shift")?) },
            "time_shifted" => ScheduleKind::TimeShifted {
                base_shift: T::lit(param("base_shift")?),
                ref_pixels: param("ref_pixels")? as usize,
                target_pixels: param("target_pixels")? as usize,
            },
            other => return Err(Error::Parse(format!("unknown schedule kind `{other}`"))),
        };
        if doc.sigmas.len() != doc.steps + 1 {
            return Err(Error::Invariant(format!(
                "schedule declares T={} but lists {} levels",
                doc.steps,
                doc.sigmas.len()
            )));
        }
        Self::from_sigmas(doc.sigmas.into_iter().map(T::lit).collect(), kind)
    }
}

fn check_steps(steps: usize) -> Result<()> {
    if steps == 0 {
        return Err(Error::InvalidParameter("schedule needs T >= 1".into()));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ScheduleDoc {
    kind: String,
    #[serde(rename = "T")]
    steps: usize,
    params: BTreeMap<String, f64>,
    sigmas: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn linear_examples() {
        let s = SigmaSchedule::<f64>::linear(4).unwrap();
        assert_eq!(s.sigmas(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(SigmaSchedule::<f64>::linear(1).unwrap().sigmas(), &[0.0, 1.0]);
        assert!(SigmaSchedule::<f64>::linear(0).is_err());
        assert_eq!(s.default_conditioning(0), 0.25);
        assert_eq!(s.default_conditionings(), vec![0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn shifted_examples() {
        let lin = SigmaSchedule::<f64>::linear(10).unwrap();
        let one = SigmaSchedule::shifted(10, 1.0).unwrap();
        assert_eq!(one.sigmas(), lin.sigmas());
        assert!((shift_sigma(0.5f64, 3.0) - 0.75).abs() < 1e-15);
        let s = SigmaSchedule::shifted(2, 3.0).unwrap();
        assert_eq!(s.sigmas(), &[0.0, 0.75, 1.0]);
        assert!(SigmaSchedule::<f64>::shifted(10, 0.0).is_err());
        assert!(SigmaSchedule::<f64>::shifted(10, -1.0).is_err());
    }

    #[test]
    fn resolution_shift_examples() {
        assert_eq!(resolution_shift(3.0f64, 4096, 4096).unwrap(), 3.0);
        assert_eq!(resolution_shift(3.0f64, 4096, 1024).unwrap(), 0.75);
        assert!(resolution_shift(3.0f64, 4096, 256).unwrap() < resolution_shift(3.0f64, 4096, 1024).unwrap());
        assert!(resolution_shift(3.0f64, 0, 1024).is_err());
        assert!(resolution_shift(3.0f64, 10, 0).is_err());
        let ts = SigmaSchedule::time_shifted(8, 3.0f64, 4096, 1024).unwrap();
        assert_eq!(ts.sigmas(), SigmaSchedule::shifted(8, 0.75).unwrap().sigmas());
        assert_eq!(ts.kind_name(), "time_shifted");
    }

    #[test]
    fn json_roundtrip_and_validation() {
        for s in [
            SigmaSchedule::<f64>::linear(7).unwrap(),
            SigmaSchedule::shifted(5, 2.5).unwrap(),
            SigmaSchedule::time_shifted(6, 3.0, 4096, 256).unwrap(),
        ] {
            let text = s.to_json().unwrap();
            assert!(text.contains("\"T\""));
            assert_eq!(SigmaSchedule::<f64>::from_json(&text).unwrap(), s);
        }
        let bad = r#"{"kind":"linear","T":2,"params":{},"sigmas":[0.0,0.7,0.5]}"#;
        assert!(matches!(SigmaSchedule::<f64>::from_json(bad), Err(Error::Invariant(_))));
        let missing = r#"{"kind":"shifted","T":1,"params":{},"sigmas":[0.0,1.0]}"#;
        assert!(matches!(SigmaSchedule::<f64>::from_json(missing), Err(Error::Parse(_))));
    }

    proptest! {
        #[test]
        fn constructors_satisfy_invariants(steps in 1usize..=1000, shift in 0.1f64..=10.0) {
            for s in [SigmaSchedule::linear(steps).unwrap(), SigmaSchedule::shifted(steps, shift).unwrap()] {
                prop_assert!(s.validate().is_ok());
                prop_assert_eq!(s.steps(), steps);
            }
        }

        #[test]
        fn shift_orders_against_linear(steps in 2usize..=200, shift in 0.1f64..=10.0) {
            let lin = SigmaSchedule::linear(steps).unwrap();
            let sh = SigmaSchedule::shifted(steps, shift).unwrap();
            for t in 1..steps {
                let (a, b) = (sh.sigma(t), lin.sigma(t));
                if shift > 1.0 + 1e-9 {
                    prop_assert!(a > b);
                } else if shift < 1.0 - 1e-9 {
                    prop_assert!(a < b);
                }
            }
        }
    }
}
