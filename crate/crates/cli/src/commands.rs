use std::fmt::Write as _;

use flowcal::calibrate::calibrate_schedule;
use flowcal::diagnostics::{
    curves_to_csv, curves_to_svg, eval_generation, reference_batch, reverse_mse_curve, ssim_noise_curve, Curve,
};
use flowcal::model::{fit_spectrum, ParamsFile};
use flowcal::{sample_batch, CalibrationTable, Denoiser, Field, WienerParams};
use serde::Serialize;

use crate::config::{ModelKind, RunConfig};
use crate::workspace::{write_text, Workspace};
use crate::CliError;

// Seed streams, one per purpose, so commands never share draws by accident.
const FIT_DATA: u64 = 1;
const FIT_DRAWS: u64 = 2;
const CAL_DATA: u64 = 3;
const CAL_NOISE: u64 = 4;
const SAMPLING: u64 = 5;
const SSIM: u64 = 6;
const CURVE_DATA: u64 = 7;
const CURVE_NOISE: u64 = 8;
const EVAL: u64 = 9;

fn model(cfg: &RunConfig, ws: &Workspace) -> Result<Denoiser<f64>, CliError> {
    let r = cfg.ref_resolution;
    match cfg.model {
        ModelKind::Analytic => Ok(Denoiser::frozen(WienerParams::from_spec(&cfg.data, r)?, r, r)?),
        ModelKind::Fitted => {
            let path = ws.params();
            if !path.exists() {
                return Err(CliError::Missing(format!("{} (run `flowcal fit` first)", path.display())));
            }
            Ok(ParamsFile::load(path)?.frozen_denoiser()?)
        }
    }
}

fn load_table(cfg: &RunConfig, ws: &Workspace, res: usize) -> Result<CalibrationTable<f64>, CliError> {
    let path = ws.table(&cfg.schedule_kind, res);
    if !path.exists() {
        return Err(CliError::Missing(format!("{} (run `flowcal calibrate` first)", path.display())));
    }
    Ok(CalibrationTable::load(path)?)
}

fn calibration_data(cfg: &RunConfig, res: usize) -> Result<Vec<Field<f64>>, CliError> {
    Ok(reference_batch(&cfg.data, res, res, cfg.n_calibration, cfg.seed.derive(CAL_DATA).derive(res as u64))?)
}

pub fn fit(cfg: &RunConfig, ws: &Workspace) -> Result<(), CliError> {
    let r = cfg.ref_resolution;
    let data = reference_batch(&cfg.data, r, r, cfg.n_fit, cfg.seed.derive(FIT_DATA))?;
    let report = fit_spectrum(&data, 1.0, cfg.seed.derive(FIT_DRAWS))?;
    let file = ParamsFile::new(report.params, 1.0, r, r);
    file.save(ws.params())?;
    println!(
        "fit {r}x{r} on {} fields: mean {:.6}, amplitude {:.6e}, alpha {:.4}, loss {:.6}",
        cfg.n_fit, report.params.mean, report.params.amplitude, report.params.alpha, report.loss
    );
    Ok(())
}

pub fn calibrate(cfg: &RunConfig, ws: &Workspace) -> Result<(), CliError> {
    let d = model(cfg, ws)?;
    for &res in &cfg.eval_resolutions {
        let schedule = cfg.schedule(res)?;
        let data = calibration_data(cfg, res)?;
        let noise = cfg.seed.derive(CAL_NOISE).derive(res as u64);
        let table = calibrate_schedule(&d, &data, &schedule, &cfg.search, noise)?;
        let path = ws.table(&cfg.schedule_kind, res);
        table.save(&path)?;
        let clamped = table.clamped.iter().filter(|&&c| c).count();
        println!(
            "{res}x{res}: mean |σ̂ − default| {:.4}, total loss improvement {:.6e}, clamped steps {clamped} -> {}",
            table.mean_abs_deviation(&schedule),
            table.total_improvement().unwrap_or(0.0),
            path.display()
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct SampleIndex<'a> {
    resolution: usize,
    n: usize,
    calibrated: bool,
    schedule_kind: &'a str,
    #[serde(rename = "T")]
    steps: usize,
    seed: flowcal::Seed,
    files: Vec<String>,
}

pub fn sample(cfg: &RunConfig, ws: &Workspace, res: usize, n: usize, use_table: bool) -> Result<(), CliError> {
    if !(res >= 8 && res.is_power_of_two()) {
        return Err(CliError::Config(format!("--resolution must be a power of two ≥ 8, got {res}")));
    }
    if n == 0 {
        return Err(CliError::Config("--n must be positive".into()));
    }
    let d = model(cfg, ws)?;
    let schedule = cfg.schedule(res)?;
    let table = if use_table { Some(load_table(cfg, ws, res)?) } else { None };
    let seed = cfg.seed.derive(SAMPLING).derive(res as u64);
    let fields = sample_batch(&d, &schedule, table.as_ref(), res, res, n, seed)?;
    let dir = ws.samples(&cfg.schedule_kind, res, use_table);
    std::fs::create_dir_all(&dir)?;
    let mut files = Vec::with_capacity(n);
    for (i, f) in fields.iter().enumerate() {
        let name = format!("sample_{i:04}.bin");
        f.save(dir.join(&name))?;
        files.push(name);
    }
    let index = SampleIndex {
        resolution: res,
        n,
        calibrated: use_table,
        schedule_kind: &cfg.schedule_kind,
        steps: schedule.steps(),
        seed,
        files,
    };
    write_text(&dir.join("index.json"), &serde_json::to_string_pretty(&index)?)?;
    println!("{n} samples at {res}x{res} ({}) -> {}", if use_table { "calibrated" } else { "default" }, dir.display());
    Ok(())
}

fn emit(ws: &Workspace, stem: &str, curves: &[Curve<f64>], title: &str, x: &str, y: &str) -> Result<(), CliError> {
    write_text(&ws.report(&format!("{stem}.csv")), &curves_to_csv(curves))?;
    write_text(&ws.report(&format!("{stem}.svg")), &curves_to_svg(curves, title, x, y))?;
    Ok(())
}

pub fn diagnose(cfg: &RunConfig, ws: &Workspace) -> Result<(), CliError> {
    let d = model(cfg, ws)?;
    let oracle = Denoiser::oracle(cfg.data)?;
    let tables = cfg.eval_resolutions.iter().map(|&r| load_table(cfg, ws, r)).collect::<Result<Vec<_>, _>>()?;

    let ssim = ssim_noise_curve(&cfg.data, &cfg.eval_resolutions, &cfg.ssim_sigmas, cfg.n_ssim, cfg.seed.derive(SSIM))?;
    emit(ws, "ssim_curves", &ssim, "SSIM(x0, x_σ) by resolution", "σ", "SSIM")?;

    let mut mse = Vec::new();
    let mut sigma_hat = Vec::new();
    let mut fd_default = Vec::new();
    let mut fd_calibrated = Vec::new();
    let mut fd_csv = String::from("resolution,fd_default,fd_calibrated,relative_improvement,n_eval,seed\n");
    for (&res, table) in cfg.eval_resolutions.iter().zip(&tables) {
        let schedule = cfg.schedule(res)?;
        let data = reference_batch(&cfg.data, res, res, cfg.n_curve, cfg.seed.derive(CURVE_DATA).derive(res as u64))?;
        let noise = cfg.seed.derive(CURVE_NOISE).derive(res as u64);
        mse.push(reverse_mse_curve(&d, &data, &schedule, noise)?);
        mse.push(reverse_mse_curve(&oracle, &data, &schedule, noise)?);

        let ts: Vec<f64> = (0..schedule.steps()).map(|t| t as f64).collect();
        sigma_hat.push(Curve::new(ts.clone(), schedule.default_conditionings(), format!("default@{res}x{res}"))?);
        sigma_hat.push(Curve::new(ts, table.sigmas_hat.clone(), format!("calibrated@{res}x{res}"))?);

        let seed = cfg.seed.derive(EVAL).derive(res as u64);
        let plain = eval_generation(&d, &schedule, None, &cfg.data, res, res, cfg.n_eval, seed)?;
        let calibrated = eval_generation(&d, &schedule, Some(table), &cfg.data, res, res, cfg.n_eval, seed)?;
        let rel = if plain.fd > 0.0 { (plain.fd - calibrated.fd) / plain.fd } else { 0.0 };
        let _ = writeln!(
            fd_csv,
            "{res},{:.16e},{:.16e},{rel:.16e},{},{}",
            plain.fd,
            calibrated.fd,
            cfg.n_eval,
            seed.value()
        );
        fd_default.push(plain.fd);
        fd_calibrated.push(calibrated.fd);
    }
    emit(ws, "reverse_mse", &mse, "One-step reverse MSE at default conditioning", "t", "MSE")?;
    emit(ws, "sigma_hat_vs_default", &sigma_hat, "Calibrated vs default conditioning", "t", "σ")?;
    write_text(&ws.report("fd_report.csv"), &fd_csv)?;
    let xs: Vec<f64> = cfg.eval_resolutions.iter().map(|&r| r as f64).collect();
    let fd_curves = [Curve::new(xs.clone(), fd_default, "default")?, Curve::new(xs, fd_calibrated, "calibrated")?];
    write_text(
        &ws.report("fd_report.svg"),
        &curves_to_svg(&fd_curves, "Gaussian Fréchet distance to reference draws", "resolution", "FD"),
    )?;
    println!("reports -> {}", ws.root().join("reports").display());
    Ok(())
}

pub fn report(cfg: &RunConfig, ws: &Workspace) -> Result<(), CliError> {
    let mut md = String::from("# flowcal report\n\n| resolution | mean abs deviation | above default | below default | clamped | loss improvement |\n|---|---|---|---|---|---|\n");
    for &res in &cfg.eval_resolutions {
        let schedule = cfg.schedule(res)?;
        let table = load_table(cfg, ws, res)?;
        let defaults = schedule.default_conditionings();
        let above = table.sigmas_hat.iter().zip(&defaults).filter(|(a, b)| a > b).count();
        let below = table.sigmas_hat.iter().zip(&defaults).filter(|(a, b)| a < b).count();
        let _ = writeln!(
            md,
            "| {res}x{res} | {:.4} | {above}/{T} | {below}/{T} | {} | {:.4e} |",
            table.mean_abs_deviation(&schedule),
            table.clamped.iter().filter(|&&c| c).count(),
            table.total_improvement().unwrap_or(0.0),
            T = table.steps
        );
    }
    let fd_path = ws.report("fd_report.csv");
    if let Ok(text) = std::fs::read_to_string(&fd_path) {
        md.push_str("\n| resolution | FD default | FD calibrated | improvement |\n|---|---|---|---|\n");
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            let parse = |i: usize| -> Result<f64, CliError> {
                cols.get(i)
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| CliError::Artifact(format!("{}: malformed row `{line}`", fd_path.display())))
            };
            let _ = writeln!(md, "| {} | {:.4} | {:.4} | {:.1}% |", cols[0], parse(1)?, parse(2)?, 100.0 * parse(3)?);
        }
    } else {
        md.push_str("\n(no fd_report.csv; run `flowcal diagnose` for generation quality)\n");
    }
    write_text(&ws.report("summary.md"), &md)?;
    print!("{md}");
    Ok(())
}
