//! Run configuration: flat `dotted.key = value` text, environment overrides
//! (`FLOWCAL_` + key uppercased with dots as underscores), then flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use flowcal::calibrate::SearchConfig;
use flowcal::{DataSpec, Seed, SigmaSchedule};
use serde::Serialize;

use crate::CliError;

pub const ENV_PREFIX: &str = "FLOWCAL_";

/// Every recognised key with its default, in documentation order.
pub const KEYS: &[(&str, &str)] = &[
    ("data.mean", "0"),
    ("data.variance", "1"),
    ("data.alpha", "2"),
    ("ref_resolution", "64"),
    ("eval_resolutions", "8,16,64"),
    ("schedule.kind", "linear"),
    ("schedule.T", "50"),
    ("schedule.shift", "3"),
    ("search.eps_coarse", "0.1"),
    ("search.eps_fine", "0.01"),
    ("search.stride_coarse", "0.02"),
    ("search.stride_fine", "0.002"),
    ("n_fit", "32"),
    ("n_calibration", "64"),
    ("n_eval", "256"),
    ("model.kind", "fitted"),
    ("diagnose.sigmas", "0,0.1,0.2,0.35,0.5,0.65,0.8,0.9,1"),
    ("diagnose.n_ssim", "32"),
    ("diagnose.n_curve", "32"),
    ("seed", "42"),
    ("output_dir", "out"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Parameters from `params/wiener.json` (written by `fit`).
    Fitted,
    /// Exact power law of `data.*` at the reference resolution.
    Analytic,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub data: DataSpec<f64>,
    pub ref_resolution: usize,
    pub eval_resolutions: Vec<usize>,
    pub schedule_kind: String,
    pub steps: usize,
    pub shift: f64,
    pub search: SearchConfig<f64>,
    pub n_fit: usize,
    pub n_calibration: usize,
    pub n_eval: usize,
    pub model: ModelKind,
    pub ssim_sigmas: Vec<f64>,
    pub n_ssim: usize,
    pub n_curve: usize,
    pub seed: Seed,
    pub output_dir: PathBuf,
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_flat(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        let key = k.trim().to_string();
        if !KEYS.iter().any(|(name, _)| *name == key) {
            return Err(CliError::Config(format!("line {}: unknown key `{key}`", i + 1)));
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(CliError::Config(format!("line {}: duplicate key `{key}`", i + 1)));
        }
    }
    Ok(out)
}

pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.replace('.', "_").to_uppercase())
}

/// Overrides applied after the file and before the environment.
#[derive(Clone, Debug, Default)]
pub struct Flags {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Defaults, then `path`, then the environment, then `flags`.
    pub fn load(path: Option<&Path>, env: impl Fn(&str) -> Option<String>, flags: &Flags) -> Result<Self, CliError> {
        let mut values: BTreeMap<String, String> = KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
            values.extend(parse_flat(&text)?);
        }
        for (key, _) in KEYS {
            if let Some(v) = env(&env_name(key)) {
                values.insert(key.to_string(), v);
            }
        }
        if let Some(seed) = flags.seed {
            values.insert("seed".into(), seed.to_string());
        }
        if let Some(out) = &flags.out {
            values.insert("output_dir".into(), out.display().to_string());
        }
        Self::from_map(&values)
    }

    pub fn from_map(values: &BTreeMap<String, String>) -> Result<Self, CliError> {
        let get = |k: &str| raw(values, k);
        let cfg = RunConfig {
            data: DataSpec::new(num(values, "data.mean")?, num(values, "data.variance")?, num(values, "data.alpha")?)
                .map_err(|e| CliError::Config(format!("data: {e}")))?,
            ref_resolution: int(values, "ref_resolution")?,
            eval_resolutions: list(values, "eval_resolutions")?,
            schedule_kind: get("schedule.kind").to_string(),
            steps: int(values, "schedule.T")?,
            shift: num(values, "schedule.shift")?,
            search: SearchConfig {
                eps_coarse: num(values, "search.eps_coarse")?,
                eps_fine: num(values, "search.eps_fine")?,
                stride_coarse: num(values, "search.stride_coarse")?,
                stride_fine: num(values, "search.stride_fine")?,
            },
            n_fit: int(values, "n_fit")?,
            n_calibration: int(values, "n_calibration")?,
            n_eval: int(values, "n_eval")?,
            model: match get("model.kind") {
                "fitted" => ModelKind::Fitted,
                "analytic" => ModelKind::Analytic,
                other => return Err(CliError::Config(format!("model.kind: expected fitted|analytic, got `{other}`"))),
            },
            ssim_sigmas: list(values, "diagnose.sigmas")?,
            n_ssim: int(values, "diagnose.n_ssim")?,
            n_curve: int(values, "diagnose.n_curve")?,
            seed: Seed(int(values, "seed")?),
            output_dir: PathBuf::from(get("output_dir")),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let pow2 = |r: usize| r >= 8 && r.is_power_of_two();
        if !pow2(self.ref_resolution) || self.eval_resolutions.iter().any(|&r| !pow2(r)) {
            return bad("resolutions must be powers of two, at least 8".into());
        }
        if self.eval_resolutions.is_empty() || self.eval_resolutions.windows(2).any(|w| w[0] >= w[1]) {
            return bad("eval_resolutions must be a nonempty strictly increasing list".into());
        }
        if !["linear", "shifted", "time_shifted"].contains(&self.schedule_kind.as_str()) {
            return bad(format!("schedule.kind: expected linear|shifted|time_shifted, got `{}`", self.schedule_kind));
        }
        self.schedule(self.ref_resolution)?;
        self.search.validate().map_err(|e| CliError::Config(format!("search: {e}")))?;
        if self.n_calibration < 1 || self.n_eval < 16 || self.n_fit < 8 || self.n_ssim < 1 || self.n_curve < 1 {
            return bad(
                "need n_calibration ≥ 1, n_eval ≥ 16, n_fit ≥ 8, diagnose.n_ssim ≥ 1, diagnose.n_curve ≥ 1".into()
            );
        }
        if self.ssim_sigmas.iter().any(|s| !(0.0..=1.0).contains(s))
            || self.ssim_sigmas.windows(2).any(|w| w[0] >= w[1])
        {
            return bad("diagnose.sigmas must be strictly increasing within [0, 1]".into());
        }
        if self.output_dir.as_os_str().is_empty() {
            return bad("output_dir is empty".into());
        }
        Ok(())
    }

    /// The sampling schedule at a given square resolution.
    pub fn schedule(&self, resolution: usize) -> Result<SigmaSchedule<f64>, CliError> {
        let s = match self.schedule_kind.as_str() {
            "shifted" => SigmaSchedule::shifted(self.steps, self.shift),
            "time_shifted" => SigmaSchedule::time_shifted(
                self.steps,
                self.shift,
                self.ref_resolution * self.ref_resolution,
                resolution * resolution,
            ),
            _ => SigmaSchedule::linear(self.steps),
        };
        s.map_err(|e| CliError::Config(format!("schedule: {e}")))
    }
}

fn raw<'a>(values: &'a BTreeMap<String, String>, key: &str) -> &'a str {
    values.get(key).map(String::as_str).unwrap_or("")
}

fn num(values: &BTreeMap<String, String>, key: &str) -> Result<f64, CliError> {
    let raw = raw(values, key);
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| CliError::Config(format!("{key}: expected a number, got `{raw}`")))
}

fn int<T: std::str::FromStr>(values: &BTreeMap<String, String>, key: &str) -> Result<T, CliError> {
    let raw = raw(values, key);
    raw.parse().map_err(|_| CliError::Config(format!("{key}: expected a nonnegative integer, got `{raw}`")))
}

fn list<T: std::str::FromStr>(values: &BTreeMap<String, String>, key: &str) -> Result<Vec<T>, CliError> {
    let raw = raw(values, key);
    raw.split(',')
        .map(|p| p.trim().parse().map_err(|_| CliError::Config(format!("{key}: bad list entry `{p}` in `{raw}`"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env(_: &str) -> Option<String> {
        None
    }

    #[test]
    fn defaults_validate() {
        let c = RunConfig::load(None, no_env, &Flags::default()).unwrap();
        assert_eq!(c.eval_resolutions, vec![8, 16, 64]);
        assert_eq!(c.steps, 50);
        assert_eq!(c.search, SearchConfig::default());
    }

    #[test]
    fn precedence_is_file_env_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nschedule.kind = shifted\nseed = 7\nn_eval = 32 # inline\n").unwrap();
        let env = |k: &str| (k == "FLOWCAL_N_EVAL").then(|| "64".to_string());
        let c = RunConfig::load(Some(&path), env, &Flags { seed: Some(9), out: None }).unwrap();
        assert_eq!(c.schedule_kind, "shifted");
        assert_eq!(c.n_eval, 64);
        assert_eq!(c.seed, Seed(9));
    }

    #[test]
    fn env_names() {
        assert_eq!(env_name("schedule.kind"), "FLOWCAL_SCHEDULE_KIND");
        assert_eq!(env_name("schedule.T"), "FLOWCAL_SCHEDULE_T");
    }

    #[test]
    fn rejects_bad_input() {
        assert!(parse_flat("nonsense").is_err());
        assert!(parse_flat("bogus = 1").is_err());
        assert!(parse_flat("seed = 1\nseed = 2").is_err());
        let mut m: BTreeMap<String, String> = KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        m.insert("eval_resolutions".into(), "8,12".into());
        assert!(RunConfig::from_map(&m).is_err());
        m.insert("eval_resolutions".into(), "8".into());
        m.insert("n_eval".into(), "4".into());
        assert!(RunConfig::from_map(&m).is_err());
        m.insert("n_eval".into(), "16".into());
        m.insert("schedule.kind".into(), "cosine".into());
        assert!(RunConfig::from_map(&m).is_err());
    }
}
