//! Experiment drivers shared by the CLI and the acceptance checks.
//!
//! Replicate `r` of an experiment with base seed `b` runs its chain on
//! `RngStream::for_replicate(b, r)`; when a replicate also simulates its
//! own dataset, the dataset comes from stream 1 of the same seed.

use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::analysis::{
    self, median, running_mean, AnalysisError, ChiSquareReport, ReplicateEnsemble, VarianceScalingFit,
};
use crate::engine::{run, EngineError, Init, SaemConfig, SaemRun, StepSizeSchedule};
use crate::frailty::{FrailtyDesign, FrailtyModel, FrailtyTheta};
use crate::model::{LatentModel, ModelError};
use crate::pk::{PkDesign, PkModel, PkTheta};
use crate::rng::RngStream;
use crate::sbm::{permute_theta, SbmModel, SbmTheta};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("{failed} of {total} replicates failed (at most 10% may fail); first failure: {first}")]
    TooManyFailures { failed: usize, total: usize, first: String },
}

/// Replicates that returned an error. The experiment goes on while at least
/// `MIN_SUCCESS_FRACTION` of them succeed.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub alpha: Option<f64>,
    pub message: String,
}

pub const MIN_SUCCESS_FRACTION: f64 = 0.9;

fn keep_successes<T>(
    results: Vec<Result<T, ExperimentError>>,
    alpha: Option<f64>,
    failed: &mut Vec<ReplicateFailure>,
) -> Result<Vec<T>, ExperimentError> {
    let total = results.len();
    let mut ok = Vec::with_capacity(total);
    let mut bad = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(v) => ok.push(v),
            Err(e) => bad.push(ReplicateFailure {
                replicate: r,
                alpha,
                message: e.to_string(),
            }),
        }
    }
    if (ok.len() as f64) < MIN_SUCCESS_FRACTION * total as f64 {
        return Err(ExperimentError::TooManyFailures {
            failed: bad.len(),
            total,
            first: bad.first().map(|f| f.message.clone()).unwrap_or_default(),
        });
    }
    failed.extend(bad);
    Ok(ok)
}

fn check_alphas(alphas: &[f64]) -> Result<(), ExperimentError> {
    if alphas.is_empty() || alphas.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
        return Err(ExperimentError::Config(format!("alpha grid {alphas:?} must be non-empty within (0, 1]")));
    }
    Ok(())
}

/// Iterations needed to reach `epochs` nominal epochs at rate `alpha`.
pub fn iterations_for_epochs(epochs: f64, alpha: f64) -> usize {
    (epochs / alpha - 1e-9).ceil().max(0.0) as usize
}

fn data_rng(base: u64, r: u64) -> RngStream {
    RngStream::for_replicate(base, r).split(1)
}

// ---------------------------------------------------------------------------
// Variance scaling (SBM)

#[derive(Clone, Debug)]
pub struct VarianceScalingConfig {
    pub n: usize,
    pub theta: SbmTheta,
    pub iterations: usize,
    pub replicates: usize,
    pub alphas: Vec<f64>,
    pub base_seed: u64,
    pub schedule: StepSizeSchedule,
}

impl Default for VarianceScalingConfig {
    fn default() -> Self {
        Self {
            n: 100,
            theta: SbmTheta::reference(),
            iterations: 2000,
            replicates: 200,
            alphas: vec![0.1, 0.5, 1.0],
            base_seed: 2024,
            schedule: StepSizeSchedule::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct VarianceScalingResult {
    pub ensembles: Vec<ReplicateEnsemble>,
    pub fit: VarianceScalingFit,
    pub failed: Vec<ReplicateFailure>,
}

/// One SBM dataset (seed `base_seed`, stream 1) and, for every α,
/// `replicates` independent chains started at `theta` with latent labels
/// from the prior. Final estimates are aligned to `theta` by block
/// relabelling before variances are taken.
pub fn variance_scaling(cfg: &VarianceScalingConfig) -> Result<VarianceScalingResult, ExperimentError> {
    check_alphas(&cfg.alphas)?;
    let q = cfg.theta.q();
    let (data, _) = SbmModel::simulate(&cfg.theta, cfg.n, &mut RngStream::new(cfg.base_seed, 1))?;
    let model = SbmModel::new(data, q)?;
    let names: Vec<String> = model.param_descriptor().into_iter().map(|p| p.name).collect();
    let mut ensembles = Vec::with_capacity(cfg.alphas.len());
    let mut failed = Vec::new();
    for &alpha in &cfg.alphas {
        let results = (0..cfg.replicates as u64)
            .into_par_iter()
            .map(|r| -> Result<Vec<f64>, ExperimentError> {
                let config = SaemConfig {
                    alpha,
                    iterations: cfg.iterations,
                    schedule: cfg.schedule,
                    seed: cfg.base_seed.wrapping_add(r),
                    thin: cfg.iterations.max(1),
                    ..SaemConfig::default()
                };
                let (theta, _) = run(&model, &config, Init::fixed(cfg.theta.clone()))?;
                let perm = model.best_permutation(&theta, &cfg.theta);
                Ok(model.theta_to_vec(&permute_theta(&theta, &perm)))
            })
            .collect();
        let finals = keep_successes(results, Some(alpha), &mut failed)?;
        ensembles.push(ReplicateEnsemble {
            model: "sbm".into(),
            alpha,
            base_seed: cfg.base_seed,
            param_names: names.clone(),
            finals,
        });
    }
    let fit = analysis::variance_scaling_fit_with(&ensembles, cfg.replicates.min(analysis::MIN_REPLICATES))?;
    Ok(VarianceScalingResult { ensembles, fit, failed })
}

// ---------------------------------------------------------------------------
// Epoch convergence (frailty)

#[derive(Clone, Debug)]
pub struct EpochConvergenceConfig {
    pub design: FrailtyDesign,
    pub theta: FrailtyTheta,
    pub init: FrailtyTheta,
    pub alphas: Vec<f64>,
    pub replicates: usize,
    /// Horizon in nominal epochs (`kα`).
    pub epochs: usize,
    /// Parameter coordinate tracked (0 = `β_1`).
    pub coordinate: usize,
    pub base_seed: u64,
    pub schedule: StepSizeSchedule,
}

impl Default for EpochConvergenceConfig {
    fn default() -> Self {
        Self {
            design: FrailtyDesign { n: 200, m: 20 },
            theta: FrailtyTheta::reference(),
            init: FrailtyTheta {
                beta: vec![1.0, 1.0],
                sigma2: 1.0,
                lambda0: 1.0,
                rho: 2.0,
            },
            alphas: vec![0.05, 0.5, 1.0],
            replicates: 50,
            epochs: 50,
            coordinate: 0,
            base_seed: 7,
            schedule: StepSizeSchedule::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpochCurve {
    pub alpha: f64,
    /// Nominal epochs `1..=E`.
    pub epochs: Vec<f64>,
    /// `series[r][e-1]`: running mean of the tracked coordinate at epoch `e`.
    pub series: Vec<Vec<f64>>,
    /// Median over replicates of `|running mean - truth|` per epoch.
    pub median_abs_error: Vec<f64>,
}

impl EpochCurve {
    /// Smallest epoch `e` such that the median error stays within
    /// `(1 + tol)` times its final value from `e` on.
    pub fn settling_epoch(&self, tol: f64) -> f64 {
        let fin = *self.median_abs_error.last().unwrap_or(&0.0);
        let mut idx = self.median_abs_error.len();
        for (i, &v) in self.median_abs_error.iter().enumerate().rev() {
            if v <= (1.0 + tol) * fin {
                idx = i;
            } else {
                break;
            }
        }
        self.epochs.get(idx).copied().unwrap_or(f64::INFINITY)
    }

    pub fn error_at(&self, epoch: f64) -> Option<f64> {
        self.epochs
            .iter()
            .position(|&e| (e - epoch).abs() < 1e-9)
            .map(|i| self.median_abs_error[i])
    }
}

#[derive(Clone, Debug)]
pub struct EpochConvergenceResult {
    pub curves: Vec<EpochCurve>,
    pub failed: Vec<ReplicateFailure>,
}

/// Every replicate simulates its own frailty dataset and runs each α from
/// `init`. Errors are measured on the running mean at integer epochs.
pub fn epoch_convergence(cfg: &EpochConvergenceConfig) -> Result<EpochConvergenceResult, ExperimentError> {
    check_alphas(&cfg.alphas)?;
    if cfg.epochs == 0 || cfg.replicates == 0 {
        return Err(ExperimentError::Config("epochs and replicates must be positive".into()));
    }
    let truth = *cfg
        .theta
        .beta
        .iter()
        .chain([&cfg.theta.sigma2, &cfg.theta.lambda0, &cfg.theta.rho])
        .nth(cfg.coordinate)
        .ok_or_else(|| ExperimentError::Config(format!("coordinate {} out of range", cfg.coordinate)))?;
    let per_rep = (0..cfg.replicates as u64)
        .into_par_iter()
        .map(|r| -> Result<Vec<Vec<f64>>, ExperimentError> {
            let (data, _) = FrailtyModel::simulate(&cfg.theta, &cfg.design, &mut data_rng(cfg.base_seed, r))?;
            let model = FrailtyModel::new(data);
            cfg.alphas
                .iter()
                .map(|&alpha| {
                    let iterations = iterations_for_epochs(cfg.epochs as f64, alpha);
                    let config = SaemConfig {
                        alpha,
                        iterations,
                        schedule: cfg.schedule,
                        seed: cfg.base_seed.wrapping_add(r),
                        ..SaemConfig::default()
                    };
                    let (_, trace) = run(&model, &config, Init::fixed(cfg.init.clone()))?;
                    let rm = running_mean(&trace.param_series(cfg.coordinate));
                    Ok((1..=cfg.epochs)
                        .map(|e| rm[iterations_for_epochs(e as f64, alpha).max(1) - 1])
                        .collect())
                })
                .collect()
        })
        .collect();
    let mut failed = Vec::new();
    let per_rep = keep_successes(per_rep, None, &mut failed)?;
    let epochs: Vec<f64> = (1..=cfg.epochs).map(|e| e as f64).collect();
    let curves = cfg
        .alphas
        .iter()
        .enumerate()
        .map(|(a, &alpha)| {
            let series: Vec<Vec<f64>> = per_rep.iter().map(|rep| rep[a].clone()).collect();
            let median_abs_error = (0..cfg.epochs)
                .map(|e| median(&series.iter().map(|s| (s[e] - truth).abs()).collect::<Vec<_>>()))
                .collect();
            EpochCurve {
                alpha,
                epochs: epochs.clone(),
                series,
                median_abs_error,
            }
        })
        .collect();
    Ok(EpochConvergenceResult { curves, failed })
}

// ---------------------------------------------------------------------------
// SAE-step timing (SBM)

#[derive(Clone, Debug)]
pub struct TimingConfig {
    pub sizes: Vec<usize>,
    pub alphas: Vec<f64>,
    pub warmup: usize,
    pub steps: usize,
    pub theta: SbmTheta,
    pub base_seed: u64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            sizes: vec![100, 200, 400],
            alphas: vec![0.1, 0.3, 0.5, 0.75],
            warmup: 10,
            steps: 200,
            theta: SbmTheta::reference(),
            base_seed: 99,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingRow {
    pub n: usize,
    pub alpha: f64,
    pub median_ns: f64,
    pub batch_median_ns: f64,
    pub ratio: f64,
}

impl TimingRow {
    /// `[0.8 α, 1.2 α (2 - α)]`.
    pub fn envelope(&self) -> (f64, f64) {
        (0.8 * self.alpha, 1.2 * self.alpha * (2.0 - self.alpha))
    }

    pub fn within_envelope(&self) -> bool {
        let (lo, hi) = self.envelope();
        (lo..=hi).contains(&self.ratio)
    }
}

/// Median SAE-step (simulation + statistic update + SA) wall time of each
/// mini-batch chain relative to a batch chain on the same data. Chains are
/// stepped round-robin on the calling thread so that all see the same
/// machine state; M-steps are run but not timed; the first `warmup` steps
/// are discarded.
pub fn sae_timing(cfg: &TimingConfig) -> Result<Vec<TimingRow>, ExperimentError> {
    check_alphas(&cfg.alphas)?;
    if cfg.steps == 0 {
        return Err(ExperimentError::Config("timing needs at least one step".into()));
    }
    let mut rows = Vec::new();
    for (si, &n) in cfg.sizes.iter().enumerate() {
        let (data, _) = SbmModel::simulate(&cfg.theta, n, &mut RngStream::new(cfg.base_seed, 1 + si as u64))?;
        let model = SbmModel::new(data, cfg.theta.q())?;
        let mut alphas = vec![1.0];
        alphas.extend(cfg.alphas.iter().copied());
        let mut chains = alphas
            .iter()
            .enumerate()
            .map(|(c, &alpha)| {
                let config = SaemConfig {
                    alpha,
                    iterations: usize::MAX,
                    seed: cfg.base_seed.wrapping_add(c as u64),
                    full_refresh: 0,
                    ..SaemConfig::default()
                };
                SaemRun::new(&model, config, Init::fixed(cfg.theta.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut times = vec![Vec::with_capacity(cfg.steps); chains.len()];
        for step in 0..cfg.warmup + cfg.steps {
            for (c, chain) in chains.iter_mut().enumerate() {
                let t = Instant::now();
                chain.sae_step()?;
                let ns = t.elapsed().as_nanos() as f64;
                chain.maximize()?;
                if step >= cfg.warmup {
                    times[c].push(ns);
                }
            }
        }
        let batch = median(&times[0]);
        for (c, &alpha) in alphas.iter().enumerate().skip(1) {
            let med = median(&times[c]);
            rows.push(TimingRow {
                n,
                alpha,
                median_ns: med,
                batch_median_ns: batch,
                ratio: med / batch,
            });
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// N_{l,k} distribution

#[derive(Clone, Debug)]
pub struct NlkConfig {
    pub alphas: Vec<f64>,
    /// `k - l` for the pmf test.
    pub gap: usize,
    pub draws: usize,
    /// Window length for the sum rule and the second moment.
    pub window: usize,
    pub windows: usize,
    pub seed: u64,
}

impl Default for NlkConfig {
    fn default() -> Self {
        Self {
            alphas: vec![0.1, 0.5, 1.0],
            gap: 20,
            draws: 100_000,
            window: 10_000,
            windows: 1000,
            seed: 31,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NlkRow {
    pub alpha: f64,
    pub gof: ChiSquareReport,
    /// Windows with at least one update whose `Σ_l N_{l,k}` differs from `k`.
    pub sum_rule_violations: usize,
    /// Mean over windows of `(1/k) Σ_l N_{l,k}²`.
    pub mean_sq: f64,
}

impl NlkRow {
    pub fn mean_sq_rel_error(&self) -> f64 {
        let target = analysis::scaling_factor(self.alpha);
        (self.mean_sq - target).abs() / target
    }
}

pub fn nlk_distribution(cfg: &NlkConfig) -> Result<Vec<NlkRow>, ExperimentError> {
    check_alphas(&cfg.alphas)?;
    if cfg.windows == 0 || cfg.window == 0 {
        return Err(ExperimentError::Config("window count and length must be positive".into()));
    }
    cfg.alphas
        .par_iter()
        .enumerate()
        .map(|(a, &alpha)| {
            let mut rng = RngStream::new(cfg.seed, 2 * a as u64);
            let gof = analysis::verify_nlk_pmf(alpha, cfg.gap + 1, 1, cfg.draws, &mut rng)?;
            let mut rng = RngStream::new(cfg.seed, 2 * a as u64 + 1);
            let mut violations = 0;
            let mut acc = 0.0;
            for _ in 0..cfg.windows {
                let u = analysis::draw_window(alpha, cfg.window, &mut rng);
                let s = analysis::nlk_from_indicators(&u);
                if u.iter().any(|&x| x) && s.sum() != cfg.window {
                    violations += 1;
                }
                acc += s.normalized_sum_sq();
            }
            Ok(NlkRow {
                alpha,
                gof,
                sum_rule_violations: violations,
                mean_sq: acc / cfg.windows as f64,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// PK recovery

#[derive(Clone, Debug)]
pub struct PkRecoveryConfig {
    pub design: PkDesign,
    pub theta: PkTheta,
    pub init: PkTheta,
    pub alpha: f64,
    pub iterations: usize,
    pub replicates: usize,
    pub base_seed: u64,
    pub schedule: StepSizeSchedule,
}

impl Default for PkRecoveryConfig {
    fn default() -> Self {
        Self {
            design: PkDesign {
                n: 200,
                ..PkDesign::default()
            },
            theta: PkTheta::reference(),
            init: PkTheta {
                mu: [25.0, 1.5, 3.0],
                omega2: [0.01, 0.01, 0.01],
                sigma2: 5.0,
            },
            alpha: 0.5,
            iterations: 3000,
            replicates: 50,
            base_seed: 11,
            schedule: StepSizeSchedule::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PkRecoveryResult {
    /// Running means at the last iteration, one row per successful
    /// replicate, in parameter vector order.
    pub finals: Vec<Vec<f64>>,
    pub failed: Vec<ReplicateFailure>,
}

pub fn pk_recovery(cfg: &PkRecoveryConfig) -> Result<PkRecoveryResult, ExperimentError> {
    check_alphas(&[cfg.alpha])?;
    let results = (0..cfg.replicates as u64)
        .into_par_iter()
        .map(|r| {
            let (data, _) = PkModel::simulate(&cfg.theta, &cfg.design, &mut data_rng(cfg.base_seed, r))?;
            let model = PkModel::new(data);
            let config = SaemConfig {
                alpha: cfg.alpha,
                iterations: cfg.iterations,
                schedule: cfg.schedule,
                seed: cfg.base_seed.wrapping_add(r),
                ..SaemConfig::default()
            };
            let (_, trace) = run(&model, &config, Init::fixed(cfg.init))?;
            Ok((0..trace.param_names.len())
                .map(|c| *running_mean(&trace.param_series(c)).last().unwrap_or(&f64::NAN))
                .collect())
        })
        .collect();
    let mut failed = Vec::new();
    let finals = keep_successes(results, Some(cfg.alpha), &mut failed)?;
    Ok(PkRecoveryResult { finals, failed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcomes(bad: usize, total: usize) -> Vec<Result<usize, ExperimentError>> {
        (0..total)
            .map(|r| if r < bad { Err(ExperimentError::Config(format!("boom {r}"))) } else { Ok(r) })
            .collect()
    }

    #[test]
    fn partial_failures_are_recorded() {
        let mut failed = Vec::new();
        let ok = keep_successes(outcomes(2, 20), Some(0.5), &mut failed).unwrap();
        assert_eq!(ok.len(), 18);
        assert_eq!(failed.len(), 2);
        assert_eq!(failed[1].replicate, 1);
        assert_eq!(failed[0].alpha, Some(0.5));
    }

    #[test]
    fn too_many_failures_abort() {
        let mut failed = Vec::new();
        let err = keep_successes(outcomes(3, 20), None, &mut failed).unwrap_err();
        assert!(matches!(err, ExperimentError::TooManyFailures { failed: 3, total: 20, .. }));
    }

    #[test]
    fn epoch_iteration_counts() {
        assert_eq!(iterations_for_epochs(5.0, 1.0), 5);
        assert_eq!(iterations_for_epochs(5.0, 0.05), 100);
        assert_eq!(iterations_for_epochs(1.0, 0.3), 4);
    }

    #[test]
    fn rejects_bad_alpha_grid() {
        let cfg = NlkConfig {
            alphas: vec![0.0],
            ..NlkConfig::default()
        };
        assert!(matches!(nlk_distribution(&cfg), Err(ExperimentError::Config(_))));
    }
}
