//! Measurement apparatus: one-step reverse MSE curves, SSIM under forward
//! noising, and a closed-form Fréchet distance between diagonal Gaussians.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{one_step_reverse_loss, CalibrationTable};
use crate::grid::{fft2, grf_sample, radial_bin, DataSpec, Field};
use crate::model::{check_uniform, Denoiser};
use crate::rng::Seed;
use crate::sampler::{add_given_noise, noise_field, sample_batch};
use crate::scalar::Real;
use crate::schedule::SigmaSchedule;
use crate::{Error, Result};

/// SSIM window edge.
pub const SSIM_WINDOW: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve<T> {
    pub xs: Vec<T>,
    pub ys: Vec<T>,
    pub label: String,
}

impl<T: Real> Curve<T> {
    pub fn new(xs: Vec<T>, ys: Vec<T>, label: impl Into<String>) -> Result<Self> {
        let c = Curve { xs, ys, label: label.into() };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.xs.len() != self.ys.len() {
            return Err(Error::Mismatch(format!("curve has {} xs and {} ys", self.xs.len(), self.ys.len())));
        }
        if self.xs.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Invariant(format!("curve '{}' xs not strictly increasing", self.label)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}

/// One-step reverse loss at the default conditioning for every step.
pub fn reverse_mse_curve<T: Real>(
    d: &Denoiser<T>,
    x0s: &[Field<T>],
    schedule: &SigmaSchedule<T>,
    seed: Seed,
) -> Result<Curve<T>> {
    let (w, h) = check_uniform(x0s)?;
    let ys = (0..schedule.steps())
        .map(|t| one_step_reverse_loss(d, x0s, schedule, t, schedule.default_conditioning(t), seed))
        .collect::<Result<Vec<T>>>()?;
    let xs = (0..schedule.steps()).map(T::from_usize_lossy).collect();
    Curve::new(xs, ys, format!("{}@{w}x{h}", d.label()))
}

/// SSIM with an explicit dynamic range `l`.
pub fn ssim_with_range<T: Real>(a: &Field<T>, b: &Field<T>, l: T) -> Result<T> {
    a.check_same_shape(b)?;
    let (w, h) = a.resolution();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Size(format!("{w}x{h} field is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    if !(l > T::zero()) {
        return Err(Error::Domain(format!("dynamic range {l} must be positive")));
    }
    let c1 = (T::lit(0.01) * l).powi(2);
    let c2 = (T::lit(0.03) * l).powi(2);
    let m = T::from_usize_lossy(SSIM_WINDOW * SSIM_WINDOW);
    let (da, db) = (a.data(), b.data());
    let mut total = T::zero();
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
            for y in y0..y0 + SSIM_WINDOW {
                for i in y * w + x0..y * w + x0 + SSIM_WINDOW {
                    let (p, q) = (da[i], db[i]);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / m, sb / m);
            let va = (saa / m - ma * ma).max(T::zero());
            let vb = (sbb / m - mb * mb).max(T::zero());
            let cov = sab / m - ma * mb;
            total +=
                ((T::lit(2.0) * ma * mb + c1) * (T::lit(2.0) * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / T::from_usize_lossy((w - SSIM_WINDOW + 1) * (h - SSIM_WINDOW + 1)))
}

/// SSIM with `L = 6·std`, taking the larger std of the two fields so the
/// value is symmetric; floored at `1e-6` for constant fields.
pub fn ssim<T: Real>(a: &Field<T>, b: &Field<T>) -> Result<T> {
    let std = a.stats().1.sqrt().max(b.stats().1.sqrt());
    ssim_with_range(a, b, (T::lit(6.0) * std).max(T::lit(1e-6)))
}

/// Mean SSIM between clean fields and their forward-noised copies, one curve
/// per square resolution. Every resolution sees the same underlying field,
/// box-downsampled from the largest resolution; the noise draw for a given
/// sample and resolution is shared across `sigma_grid`.
pub fn ssim_noise_curve<T: Real>(
    spec: &DataSpec<T>,
    resolutions: &[usize],
    sigma_grid: &[T],
    n: usize,
    seed: Seed,
) -> Result<Vec<Curve<T>>> {
    if n == 0 {
        return Err(Error::TooFewSamples { need: 1, got: 0 });
    }
    if sigma_grid.iter().any(|s| !(*s >= T::zero() && *s <= T::one())) {
        return Err(Error::Domain("sigma grid must lie in [0, 1]".into()));
    }
    let source = *resolutions.iter().max().ok_or_else(|| Error::InvalidParameter("no resolutions".into()))?;
    for &r in resolutions {
        if r < SSIM_WINDOW || source % r != 0 {
            return Err(Error::Size(format!("resolution {r} must be >= {SSIM_WINDOW} and divide {source}")));
        }
    }
    // per sample: ys[res][sigma]
    let per: Vec<Vec<Vec<T>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let sample_seed = seed.derive(i as u64);
            let x = grf_sample(spec, source, source, sample_seed)?;
            resolutions
                .iter()
                .map(|&r| {
                    let x0 = x.box_downsample(source / r)?;
                    let l = T::lit(6.0) * x0.stats().1.sqrt();
                    let eps = noise_field(r, r, sample_seed.derive(r as u64));
                    sigma_grid
                        .iter()
                        .map(|&s| ssim_with_range(&x0, &add_given_noise(&x0, s, &eps)?, l.max(T::lit(1e-6))))
                        .collect()
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let nf = T::from_usize_lossy(n);
    resolutions
        .iter()
        .enumerate()
        .map(|(ri, &r)| {
            let ys = (0..sigma_grid.len()).map(|si| per.iter().map(|p| p[ri][si]).sum::<T>() / nf).collect();
            Curve::new(sigma_grid.to_vec(), ys, format!("{r}x{r}"))
        })
        .collect()
}

/// Pooled mean and per-radial-bin variance shares of a set of fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats<T> {
    pub mean: T,
    pub variances: Vec<T>,
}

impl<T: Real> GaussianStats<T> {
    pub fn new(mean: T, variances: Vec<T>) -> Result<Self> {
        if !mean.is_finite() || variances.iter().any(|v| !(*v >= T::zero()) || !v.is_finite()) {
            return Err(Error::Domain("stats need a finite mean and finite nonnegative variances".into()));
        }
        Ok(GaussianStats { mean, variances })
    }

    /// Total variance across bins.
    pub fn total_variance(&self) -> T {
        self.variances.iter().copied().sum()
    }
}

/// Bin `b > 0` holds `Σ_{k in b} |X_k|²/N²` averaged over fields (its share
/// of the per-pixel variance); bin 0 holds the variance of the field means.
/// Radii beyond `min(w,h)/2` fold into the last bin.
pub fn gaussian_stats<T: Real>(fields: &[Field<T>]) -> Result<GaussianStats<T>> {
    if fields.len() < 2 {
        return Err(Error::TooFewSamples { need: 2, got: fields.len() });
    }
    let (w, h) = check_uniform(fields)?;
    let n_pix = T::from_usize_lossy(w * h);
    let max_bin = w.min(h) / 2;
    let bins: Vec<usize> = (0..h).flat_map(|ky| (0..w).map(move |kx| radial_bin(kx, ky, w, h).min(max_bin))).collect();
    let per: Vec<(T, Vec<T>)> = fields
        .par_iter()
        .map(|f| {
            let s = fft2(f)?;
            let mut v = vec![T::zero(); max_bin + 1];
            for (k, c) in s.data().iter().enumerate().skip(1) {
                v[bins[k]] += c.norm_sqr() / (n_pix * n_pix);
            }
            Ok((f.stats().0, v))
        })
        .collect::<Result<_>>()?;
    let nf = T::from_usize_lossy(fields.len());
    let mean = per.iter().map(|p| p.0).sum::<T>() / nf;
    let mut variances = vec![T::zero(); max_bin + 1];
    for (_, v) in &per {
        variances.iter_mut().zip(v).for_each(|(a, b)| *a += *b / nf);
    }
    variances[0] = per.iter().map(|p| (p.0 - mean).powi(2)).sum::<T>() / nf;
    GaussianStats::new(mean, variances)
}

/// `sqrt((μa − μb)² + Σ (√va − √vb)²)`.
pub fn gaussian_frechet<T: Real>(a: &GaussianStats<T>, b: &GaussianStats<T>) -> Result<T> {
    if a.variances.len() != b.variances.len() {
        return Err(Error::Mismatch(format!("{} vs {} variance bins", a.variances.len(), b.variances.len())));
    }
    let spread: T = a.variances.iter().zip(&b.variances).map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2)).sum();
    Ok(((a.mean - b.mean).powi(2) + spread).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport<T> {
    pub fd: T,
    pub calibrated: bool,
    pub width: usize,
    pub height: usize,
    pub n: usize,
    pub seed: Seed,
}

/// Minimum batch size for [`eval_generation`].
pub const MIN_EVAL_SAMPLES: usize = 16;

/// Fréchet distance between `n` generated samples and `n` reference draws.
/// Samples use `seed.derive(0)`, references `seed.derive(1)`, so runs with
/// and without a table share both streams.
#[allow(clippy::too_many_arguments)]
pub fn eval_generation<T: Real>(
    d: &Denoiser<T>,
    schedule: &SigmaSchedule<T>,
    table: Option<&CalibrationTable<T>>,
    spec: &DataSpec<T>,
    width: usize,
    height: usize,
    n: usize,
    seed: Seed,
) -> Result<GenerationReport<T>> {
    if n < MIN_EVAL_SAMPLES {
        return Err(Error::TooFewSamples { need: MIN_EVAL_SAMPLES, got: n });
    }
    let generated = sample_batch(d, schedule, table, width, height, n, seed.derive(0))?;
    let reference = reference_batch(spec, width, height, n, seed.derive(1))?;
    let fd = gaussian_frechet(&gaussian_stats(&generated)?, &gaussian_stats(&reference)?)?;
    Ok(GenerationReport { fd, calibrated: table.is_some(), width, height, n, seed })
}

/// `n` GRF draws; draw `i` uses `seed.derive(i)`.
pub fn reference_batch<T: Real>(
    spec: &DataSpec<T>,
    width: usize,
    height: usize,
    n: usize,
    seed: Seed,
) -> Result<Vec<Field<T>>> {
    (0..n).into_par_iter().map(|i| grf_sample(spec, width, height, seed.derive(i as u64))).collect()
}

fn csv_label(label: &str) -> String {
    if label.contains([',', '"', '\n']) {
        format!("\"{}\"", label.replace('"', "\"\""))
    } else {
        label.to_string()
    }
}

/// `x,y,label` rows, values at 17 significant digits.
pub fn curves_to_csv<T: Real>(curves: &[Curve<T>]) -> String {
    let mut out = String::from("x,y,label\n");
    for c in curves {
        let label = csv_label(&c.label);
        for (x, y) in c.xs.iter().zip(&c.ys) {
            let _ = writeln!(out, "{:.16e},{:.16e},{label}", x.as_f64(), y.as_f64());
        }
    }
    out
}

/// Inverse of [`curves_to_csv`]; curves come back in first-appearance order.
pub fn curves_from_csv<T: Real>(text: &str) -> Result<Vec<Curve<T>>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("x,y,label") {
        return Err(Error::Parse("missing x,y,label header".into()));
    }
    let mut curves: Vec<Curve<T>> = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut parts = line.splitn(3, ',');
        let mut num = |name: &str| -> Result<T> {
            let raw = parts.next().ok_or_else(|| Error::Parse(format!("row {}: missing {name}", i + 1)))?;
            let v: f64 = raw.trim().parse().map_err(|_| Error::Parse(format!("row {}: bad {name} '{raw}'", i + 1)))?;
            Ok(T::lit(v))
        };
        let (x, y) = (num("x")?, num("y")?);
        let raw = parts.next().ok_or_else(|| Error::Parse(format!("row {}: missing label", i + 1)))?;
        let label = match raw.strip_prefix('"').and_then(|r| r.strip_suffix('"')) {
            Some(inner) => inner.replace("\"\"", "\""),
            None => raw.to_string(),
        };
        match curves.iter_mut().find(|c| c.label == label) {
            Some(c) => {
                c.xs.push(x);
                c.ys.push(y);
            }
            None => curves.push(Curve { xs: vec![x], ys: vec![y], label }),
        }
    }
    curves.iter().try_for_each(Curve::validate)?;
    Ok(curves)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Line plot on an 800×600 canvas, axes autoscaled to the data.
pub fn curves_to_svg<T: Real>(curves: &[Curve<T>], title: &str, x_label: &str, y_label: &str) -> String {
    let (left, right, top, bottom) = (70.0, 780.0, 40.0, 540.0);
    let points = || curves.iter().flat_map(|c| c.xs.iter().zip(&c.ys)).map(|(x, y)| (x.as_f64(), y.as_f64()));
    let fold = |f: fn(f64, f64) -> f64, init: f64, sel: fn((f64, f64)) -> f64| points().map(sel).fold(init, f);
    let (mut x0, mut x1) = (fold(f64::min, f64::INFINITY, |p| p.0), fold(f64::max, f64::NEG_INFINITY, |p| p.0));
    let (mut y0, mut y1) = (fold(f64::min, f64::INFINITY, |p| p.1), fold(f64::max, f64::NEG_INFINITY, |p| p.1));
    if !(x0 < x1) {
        (x0, x1) = (x0.min(0.0) - 0.5, x1.max(0.0) + 0.5);
    }
    if !(y0 < y1) {
        (y0, y1) = (y0.min(0.0) - 0.5, y1.max(0.0) + 0.5);
    }
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (right - left);
    let py = |y: f64| bottom - (y - y0) / (y1 - y0) * (bottom - top);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 800 600" width="800" height="600">"#);
    let _ = writeln!(s, r#"<rect width="800" height="600" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="400" y="24" text-anchor="middle" font-size="16">{}</text>"#, escape_xml(title));
    let _ = writeln!(s, r#"<path d="M{left} {top} L{left} {bottom} L{right} {bottom}" fill="none" stroke="black"/>"#);
    for (v, anchor_x) in [(x0, left), (x1, right)] {
        let _ = writeln!(
            s,
            r#"<text x="{anchor_x}" y="{}" text-anchor="middle" font-size="11">{v:.4}</text>"#,
            bottom + 16.0
        );
    }
    for (v, anchor_y) in [(y0, bottom), (y1, top)] {
        let _ =
            writeln!(s, r#"<text x="{}" y="{anchor_y}" text-anchor="end" font-size="11">{v:.4}</text>"#, left - 4.0);
    }
    let _ = writeln!(s, r#"<text x="425" y="580" text-anchor="middle" font-size="13">{}</text>"#, escape_xml(x_label));
    let _ = writeln!(
        s,
        r#"<text x="18" y="290" text-anchor="middle" font-size="13" transform="rotate(-90 18 290)">{}</text>"#,
        escape_xml(y_label)
    );
    for (i, c) in curves.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> =
            c.xs.iter().zip(&c.ys).map(|(x, y)| format!("{:.2},{:.2}", px(x.as_f64()), py(y.as_f64()))).collect();
        let _ =
            writeln!(s, r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        let ly = top + 16.0 * (i as f64 + 1.0);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" font-size="12" fill="{colour}">{}</text>"#,
            right - 150.0,
            escape_xml(&c.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grf(w: usize, seed: u64) -> Field<f64> {
        grf_sample(&DataSpec::new(0.0f64, 1.0, 2.0).unwrap(), w, w, Seed(seed)).unwrap()
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = grf(16, 1);
        let b = grf(16, 2);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        let c = Field::filled(8, 8, 3.0f64);
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_small_or_mismatched() {
        assert!(matches!(ssim(&grf(4, 1), &grf(4, 2)), Err(Error::Size(_))));
        assert!(ssim(&grf(8, 1), &grf(16, 2)).is_err());
    }

    #[test]
    fn ssim_drops_under_strong_noise() {
        let mut acc = 0.0;
        for s in 0..16 {
            let x = grf(64, s);
            let noisy = x.add_scaled(&noise_field(64, 64, Seed(1000 + s)), 10.0).unwrap();
            acc += ssim(&x, &noisy).unwrap();
        }
        assert!(acc / 16.0 < 0.1, "{}", acc / 16.0);
    }

    #[test]
    fn frechet_closed_forms() {
        let s = |m: f64, v: f64| GaussianStats::new(m, vec![v]).unwrap();
        assert_eq!(gaussian_frechet(&s(0.0, 1.0), &s(0.0, 1.0)).unwrap(), 0.0);
        assert!((gaussian_frechet(&s(0.0, 1.0), &s(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-15);
        assert!((gaussian_frechet(&s(0.0, 1.0), &s(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-15);
        assert!(gaussian_frechet(&s(0.0, 1.0), &GaussianStats::new(0.0, vec![1.0, 1.0]).unwrap()).is_err());
    }

    #[test]
    fn stats_sum_to_pixel_variance() {
        let fields: Vec<_> = (0..64).map(|s| grf(32, s)).collect();
        let st = gaussian_stats(&fields).unwrap();
        assert!((st.total_variance() - 1.0).abs() < 0.1, "{}", st.total_variance());
        assert_eq!(st.variances.len(), 17);
        assert!(gaussian_stats(&fields[..1]).is_err());
        let same = vec![fields[0].clone(), fields[0].clone()];
        assert_eq!(gaussian_stats(&same).unwrap().variances[0], 0.0);
    }

    #[test]
    fn csv_roundtrip_is_lossless() {
        let c = Curve::new(vec![0.0, 0.1, 1.0 / 3.0], vec![std::f64::consts::PI, -1e-300, 7.0], "a,\"b\"").unwrap();
        let d = Curve::new(vec![1.0, 2.0], vec![0.5, 0.25], "16x16").unwrap();
        let back: Vec<Curve<f64>> = curves_from_csv(&curves_to_csv(&[c.clone(), d.clone()])).unwrap();
        assert_eq!(back, vec![c, d]);
    }

    #[test]
    fn curve_requires_increasing_xs() {
        assert!(Curve::new(vec![0.0, 0.0], vec![1.0, 2.0], "x").is_err());
        assert!(Curve::new(vec![0.0], vec![1.0, 2.0], "x").is_err());
    }

    #[test]
    fn svg_has_one_polyline_per_curve() {
        let c = Curve::new(vec![0.0, 1.0], vec![0.0, 1.0], "a<b").unwrap();
        let svg = curves_to_svg(&[c.clone(), c], "t", "x", "y");
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("viewBox=\"0 0 800 600\"") && svg.contains("a&lt;b"));
    }
}
