//! Replicate-level statistics: running means, MSE, empirical bands,
//! variance scaling across α, the `N_{l,k}` update-gap distribution, and
//! CSV/SVG report writers.

use std::fmt::Write as _;
use std::io::Write;

use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::rng::RngStream;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("need at least {needed} replicates, got {got} (alpha = {alpha})")]
    InsufficientReplicates { alpha: f64, needed: usize, got: usize },
    #[error("need at least one alpha value")]
    NoAlpha,
    #[error("replicates disagree on the number of parameters")]
    Ragged,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Cumulative mean `x̄_k = (1/k) Σ_{l ≤ k} x_l`.
pub fn running_mean(xs: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    xs.iter()
        .enumerate()
        .map(|(k, x)| {
            acc += x;
            acc / (k + 1) as f64
        })
        .collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; `NaN` for fewer than two values.
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Linear-interpolation quantile (type 7) of unsorted data.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, q)
}

fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

/// Pointwise `(1/R) Σ_r (x_{r,k} - truth)²` over equal-length series.
pub fn mse_series(series: &[Vec<f64>], truth: f64) -> Vec<f64> {
    let len = series.iter().map(Vec::len).min().unwrap_or(0);
    (0..len)
        .map(|k| series.iter().map(|s| (s[k] - truth).powi(2)).sum::<f64>() / series.len() as f64)
        .collect()
}

/// Pointwise cross-replicate mean with the empirical `(1-level)/2` and
/// `(1+level)/2` quantiles.
#[derive(Clone, Debug, PartialEq)]
pub struct Band {
    pub mean: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

pub fn confidence_band(series: &[Vec<f64>], level: f64) -> Band {
    let len = series.iter().map(Vec::len).min().unwrap_or(0);
    let (qa, qb) = ((1.0 - level) / 2.0, (1.0 + level) / 2.0);
    let mut band = Band {
        mean: Vec::with_capacity(len),
        lo: Vec::with_capacity(len),
        hi: Vec::with_capacity(len),
    };
    let mut col = Vec::with_capacity(series.len());
    for k in 0..len {
        col.clear();
        col.extend(series.iter().map(|s| s[k]));
        band.mean.push(mean(&col));
        col.sort_by(f64::total_cmp);
        band.lo.push(quantile_sorted(&col, qa));
        band.hi.push(quantile_sorted(&col, qb));
    }
    band
}

/// Final parameter vectors of the replicates of one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplicateEnsemble {
    pub model: String,
    pub alpha: f64,
    pub base_seed: u64,
    pub param_names: Vec<String>,
    /// `finals[r][c]`: coordinate `c` of replicate `r`.
    pub finals: Vec<Vec<f64>>,
}

impl ReplicateEnsemble {
    pub fn column(&self, c: usize) -> Vec<f64> {
        self.finals.iter().map(|f| f[c]).collect()
    }

    pub fn variances(&self) -> Vec<f64> {
        (0..self.param_names.len()).map(|c| sample_variance(&self.column(c))).collect()
    }
}

/// `(2 - α) / α`.
pub fn scaling_factor(alpha: f64) -> f64 {
    (2.0 - alpha) / alpha
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceScalingFit {
    pub alphas: Vec<f64>,
    pub param_names: Vec<String>,
    /// `variances[a][c]`.
    pub variances: Vec<Vec<f64>>,
    /// Least-squares `ĉ_c` in `V̂_α ≈ ĉ (2-α)/α`.
    pub c_hat: Vec<f64>,
    /// `(V̂_α - ĉ f_α) / (ĉ f_α)`.
    pub rel_residuals: Vec<Vec<f64>>,
}

impl VarianceScalingFit {
    /// `V̂_α / V̂_1` for each α and parameter; `None` when α = 1 is absent.
    pub fn ratios_to_batch(&self) -> Option<Vec<Vec<f64>>> {
        let b = self.alphas.iter().position(|&a| a == 1.0)?;
        Some(
            self.variances
                .iter()
                .map(|v| v.iter().zip(&self.variances[b]).map(|(x, y)| x / y).collect())
                .collect(),
        )
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), AnalysisError> {
        writeln!(w, "alpha,param,variance,fitted")?;
        for (a, &alpha) in self.alphas.iter().enumerate() {
            for (c, name) in self.param_names.iter().enumerate() {
                writeln!(
                    w,
                    "{alpha},{name},{:e},{:e}",
                    self.variances[a][c],
                    self.c_hat[c] * scaling_factor(alpha)
                )?;
            }
        }
        Ok(())
    }
}

pub const MIN_REPLICATES: usize = 100;

/// Fit `V̂_α = c (2-α)/α` per parameter over ensembles at different α.
pub fn variance_scaling_fit(ensembles: &[ReplicateEnsemble]) -> Result<VarianceScalingFit, AnalysisError> {
    variance_scaling_fit_with(ensembles, MIN_REPLICATES)
}

pub fn variance_scaling_fit_with(
    ensembles: &[ReplicateEnsemble],
    min_replicates: usize,
) -> Result<VarianceScalingFit, AnalysisError> {
    let first = ensembles.first().ok_or(AnalysisError::NoAlpha)?;
    let d = first.param_names.len();
    for e in ensembles {
        if e.finals.len() < min_replicates.max(2) {
            return Err(AnalysisError::InsufficientReplicates {
                alpha: e.alpha,
                needed: min_replicates.max(2),
                got: e.finals.len(),
            });
        }
        if e.param_names.len() != d || e.finals.iter().any(|f| f.len() != d) {
            return Err(AnalysisError::Ragged);
        }
        if !(e.alpha > 0.0 && e.alpha <= 1.0) {
            return Err(AnalysisError::Invalid(format!("alpha {} outside (0, 1]", e.alpha)));
        }
    }
    let variances: Vec<Vec<f64>> = ensembles.iter().map(ReplicateEnsemble::variances).collect();
    let f: Vec<f64> = ensembles.iter().map(|e| scaling_factor(e.alpha)).collect();
    let ff: f64 = f.iter().map(|x| x * x).sum();
    let c_hat: Vec<f64> = (0..d)
        .map(|c| variances.iter().zip(&f).map(|(v, fa)| v[c] * fa).sum::<f64>() / ff)
        .collect();
    let rel_residuals = variances
        .iter()
        .zip(&f)
        .map(|(v, fa)| (0..d).map(|c| (v[c] - c_hat[c] * fa) / (c_hat[c] * fa)).collect())
        .collect();
    Ok(VarianceScalingFit {
        alphas: ensembles.iter().map(|e| e.alpha).collect(),
        param_names: first.param_names.clone(),
        variances,
        c_hat,
        rel_residuals,
    })
}

/// `N_{l,k}` for `l = 1..k` from update indicators `U_1..U_k`
/// (index `l - 1` in the returned vector).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NlkSample {
    pub k: usize,
    pub n: Vec<usize>,
}

impl NlkSample {
    pub fn sum(&self) -> usize {
        self.n.iter().sum()
    }

    /// `(1/k) Σ_l N_{l,k}²`.
    pub fn normalized_sum_sq(&self) -> f64 {
        self.n.iter().map(|&v| (v * v) as f64).sum::<f64>() / self.k as f64
    }
}

/// `N_{l,k} = 0` if `U_l = 0`, otherwise the number of iterations from `l`
/// until the next update, truncated at the horizon to `k - l + 1`.
///
/// `Σ_l N_{l,k} = k + 1 - l₀` where `l₀` is the first update; it equals `k`
/// when `U_1 = 1`.
pub fn nlk_from_indicators(u: &[bool]) -> NlkSample {
    let k = u.len();
    let mut n = vec![0; k];
    let mut next = k + 1; // 1-based position of the next update after l
    for l in (1..=k).rev() {
        if u[l - 1] {
            n[l - 1] = next - l;
            next = l;
        }
    }
    NlkSample { k, n }
}

/// Indicators of one window of `k` iterations. `U_1 = 1`: the window starts
/// at an update, so the statistic at `k` is a weighted sum of exactly `k`
/// iterations' worth of draws.
pub fn draw_window(alpha: f64, k: usize, rng: &mut RngStream) -> Vec<bool> {
    (0..k).map(|l| l == 0 || rng.bernoulli(alpha)).collect()
}

/// `P(N_{l,k} = m)` for `m = 0..=k-l+1`.
pub fn nlk_pmf(alpha: f64, gap: usize) -> Vec<f64> {
    let mut p = Vec::with_capacity(gap + 2);
    p.push(1.0 - alpha);
    for m in 1..=gap {
        p.push(alpha * alpha * (1.0 - alpha).powi(m as i32 - 1));
    }
    p.push(alpha * (1.0 - alpha).powi(gap as i32));
    p
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChiSquareReport {
    pub observed: Vec<u64>,
    pub expected: Vec<f64>,
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

impl ChiSquareReport {
    pub fn passes(&self, level: f64) -> bool {
        self.p_value >= level
    }
}

/// Pearson goodness of fit. Zero-probability cells with zero counts are
/// dropped; trailing cells are pooled until every expected count is ≥ 5.
pub fn chi_square_gof(observed: &[u64], probs: &[f64]) -> ChiSquareReport {
    let total: u64 = observed.iter().sum();
    let mut obs = Vec::new();
    let mut exp = Vec::new();
    let mut impossible = false;
    for (&o, &p) in observed.iter().zip(probs) {
        if p <= 0.0 {
            impossible |= o > 0;
            continue;
        }
        obs.push(o);
        exp.push(p * total as f64);
    }
    while exp.len() > 1 && *exp.last().unwrap() < 5.0 {
        let (o, e) = (obs.pop().unwrap(), exp.pop().unwrap());
        *obs.last_mut().unwrap() += o;
        *exp.last_mut().unwrap() += e;
    }
    // pool small leading/middle cells into their right neighbour
    let mut i = 0;
    while i + 1 < exp.len() {
        if exp[i] < 5.0 {
            let (o, e) = (obs.remove(i), exp.remove(i));
            obs[i] += o;
            exp[i] += e;
        } else {
            i += 1;
        }
    }
    let statistic = if impossible {
        f64::INFINITY
    } else {
        obs.iter()
            .zip(&exp)
            .map(|(&o, &e)| (o as f64 - e).powi(2) / e)
            .sum()
    };
    let df = exp.len().saturating_sub(1);
    let p_value = if impossible {
        0.0
    } else if df == 0 {
        1.0
    } else {
        ChiSquared::new(df as f64).map(|c| c.sf(statistic)).unwrap_or(f64::NAN)
    };
    ChiSquareReport {
        observed: obs,
        expected: exp,
        statistic,
        df,
        p_value,
    }
}

/// Empirical distribution of `N_{l,k}` over `draws` independent indicator
/// sequences `U_l..U_k ~ Bernoulli(α)`, tested against [`nlk_pmf`].
pub fn verify_nlk_pmf(
    alpha: f64,
    k: usize,
    l: usize,
    draws: usize,
    rng: &mut RngStream,
) -> Result<ChiSquareReport, AnalysisError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(AnalysisError::Invalid(format!("alpha {alpha} outside (0, 1]")));
    }
    if l < 1 || l > k {
        return Err(AnalysisError::Invalid(format!("need 1 ≤ l ≤ k, got l = {l}, k = {k}")));
    }
    let gap = k - l;
    let mut counts = vec![0u64; gap + 2];
    let mut u = vec![false; gap + 1];
    for _ in 0..draws {
        for v in u.iter_mut() {
            *v = rng.bernoulli(alpha);
        }
        counts[nlk_from_indicators(&u).n[0]] += 1;
    }
    Ok(chi_square_gof(&counts, &nlk_pmf(alpha, gap)))
}

/// Time series written by the report helpers.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

pub fn write_band_csv<W: Write>(mut w: W, epochs: &[f64], band: &Band) -> Result<(), AnalysisError> {
    writeln!(w, "epoch,mean,lo,hi")?;
    for (k, e) in epochs.iter().enumerate() {
        writeln!(w, "{e},{:e},{:e},{:e}", band.mean[k], band.lo[k], band.hi[k])?;
    }
    Ok(())
}

pub fn write_log_mse_csv<W: Write>(mut w: W, epochs: &[f64], mse: &[f64]) -> Result<(), AnalysisError> {
    writeln!(w, "epoch,log_mse")?;
    for (e, m) in epochs.iter().zip(mse) {
        writeln!(w, "{e},{:e}", m.ln())?;
    }
    Ok(())
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Line plot, 640×400 px, 60 px margins, axis ticks at the data range
/// endpoints, one colour per series from a fixed 6-colour palette, legend in
/// the top-right corner. Non-finite points are skipped.
pub fn svg_line_plot(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let (w, h, m) = (640.0, 400.0, 60.0);
    let pts = || {
        series
            .iter()
            .flat_map(|s| s.x.iter().zip(&s.y))
            .filter(|(x, y)| x.is_finite() && y.is_finite())
    };
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (&x, &y) in pts() {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    );
    let _ = writeln!(s, r#"<text x="{m}" y="{}" text-anchor="middle">{x0:.3}</text>"#, h - m + 16.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x1:.3}</text>"#, w - m, h - m + 16.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y0:.3}</text>"#, m - 4.0, h - m);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y1:.3}</text>"#, m - 4.0, m + 4.0);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        w / 2.0,
        h - 16.0,
        escape(xlabel)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(ylabel)
    );
    for (idx, ser) in series.iter().enumerate() {
        let colour = PALETTE[idx % PALETTE.len()];
        let mut d = String::new();
        let mut pen_down = false;
        for (&x, &y) in ser.x.iter().zip(&ser.y) {
            if !(x.is_finite() && y.is_finite()) {
                pen_down = false;
                continue;
            }
            let _ = write!(d, "{}{:.2} {:.2} ", if pen_down { "L" } else { "M" }, sx(x), sy(y));
            pen_down = true;
        }
        let _ = writeln!(
            s,
            r#"<path d="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#,
            d.trim_end()
        );
        let ly = m + 14.0 * idx as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{colour}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            w - m - 110.0,
            w - m - 90.0,
            w - m - 85.0,
            ly + 4.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
