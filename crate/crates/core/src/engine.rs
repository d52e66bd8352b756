//! The mini-batch MCMC-SAEM loop.
//!
//! One iteration `k`:
//!
//! 1. draw `r_k ~ Bin(n, α)` and a uniform size-`r_k` index set `I_k`;
//! 2. apply the Metropolis kernels `Π_i`, `i ∈ I_k` (ascending order), at `θ_{k-1}`;
//! 3. update the cached `S(z_k)` from `S(z_{k-1})` using only the components in `I_k`;
//! 4. stochastic approximation `s_k = (1 - γ_k) s_{k-1} + γ_k S(z_k)`;
//! 5. `θ_k = θ̂(s_k)`.
//!
//! Steps 1-4 form the SAE-step and are timed separately from the M-step.
//! With `α = 1` no index randomness is drawn and `S(z_k)` is recomputed
//! from scratch, which is exactly the classical batch algorithm.

use std::io::Write;
use std::time::Instant;

use thiserror::Error;

use crate::kernels::{self, KernelStepResult};
use crate::model::{LatentModel, ModelError, SuffStat};
use crate::rng::{RngError, RngStream};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("iteration {iteration}: {source}")]
    Model {
        iteration: usize,
        #[source]
        source: ModelError,
    },
    #[error("iteration {iteration}: non-finite sufficient statistic after full recomputation")]
    NonFinite { iteration: usize },
    #[error(transparent)]
    Rng(#[from] RngError),
    #[error("iteration {0} is not recorded in the trace")]
    MissingIteration(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `γ_k = 1` for `k ≤ burn_in`, `(k - burn_in)^(-exponent)` afterwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSizeSchedule {
    pub burn_in: usize,
    pub exponent: f64,
}

impl Default for StepSizeSchedule {
    fn default() -> Self {
        Self {
            burn_in: 50,
            exponent: 0.6,
        }
    }
}

impl StepSizeSchedule {
    pub fn new(burn_in: usize, exponent: f64) -> Result<Self, EngineError> {
        let s = Self { burn_in, exponent };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        // Σγ = ∞ and Σγ² < ∞ need the exponent in (1/2, 1]
        if !(self.exponent > 0.5 && self.exponent <= 1.0) {
            return Err(EngineError::Config(format!(
                "step-size exponent must lie in (0.5, 1], got {}",
                self.exponent
            )));
        }
        Ok(())
    }

    pub fn gamma(&self, k: usize) -> f64 {
        if k <= self.burn_in {
            1.0
        } else {
            ((k - self.burn_in) as f64).powf(-self.exponent)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaemConfig {
    /// Expected proportion of latent components simulated per iteration.
    pub alpha: f64,
    pub iterations: usize,
    pub schedule: StepSizeSchedule,
    pub seed: u64,
    pub stream: u64,
    /// Record every `thin`-th iteration (plus the first and last).
    pub thin: usize,
    /// Recompute `S(z)` from scratch every this many iterations; 0 disables.
    pub full_refresh: usize,
    /// Optional box constraints on the parameter vector.
    pub theta_bounds: Option<Vec<(f64, f64)>>,
    /// Store `s_k` in the trace.
    pub record_stats: bool,
}

impl Default for SaemConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            iterations: 1000,
            schedule: StepSizeSchedule::default(),
            seed: 0,
            stream: 0,
            thin: 1,
            full_refresh: 1000,
            theta_bounds: None,
            record_stats: false,
        }
    }
}

impl SaemConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(EngineError::Config(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        if self.thin == 0 {
            return Err(EngineError::Config("thin must be at least 1".into()));
        }
        self.schedule.validate()
    }
}

/// How `θ_0` is chosen.
#[derive(Clone, Debug)]
pub enum InitTheta<T> {
    Fixed(T),
    /// Each coordinate of the parameter vector uniform on its range.
    Uniform(Vec<(f64, f64)>),
}

/// Initial values. `z_0` defaults to a draw from the prior at `θ_0`;
/// `s_0 = S(z_0)`.
#[derive(Clone, Debug)]
pub struct Init<M: LatentModel> {
    pub theta: InitTheta<M::Theta>,
    pub latent: Option<Vec<M::Component>>,
}

impl<M: LatentModel> Init<M> {
    pub fn fixed(theta: M::Theta) -> Self {
        Self {
            theta: InitTheta::Fixed(theta),
            latent: None,
        }
    }

    pub fn uniform(ranges: Vec<(f64, f64)>) -> Self {
        Self {
            theta: InitTheta::Uniform(ranges),
            latent: None,
        }
    }

    pub fn with_latent(mut self, z: Vec<M::Component>) -> Self {
        self.latent = Some(z);
        self
    }
}

/// Indices selected at one iteration (ascending, distinct).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MiniBatchDraw {
    pub indices: Vec<usize>,
}

impl MiniBatchDraw {
    pub fn r(&self) -> usize {
        self.indices.len()
    }
}

/// `r ~ Bin(n, α)` followed by a uniform size-`r` subset of `0..n`.
/// `α = 1` selects everything and consumes no randomness.
pub fn draw_minibatch(n: usize, alpha: f64, rng: &mut RngStream) -> Result<MiniBatchDraw, EngineError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(EngineError::Config(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    if alpha == 1.0 {
        return Ok(MiniBatchDraw {
            indices: (0..n).collect(),
        });
    }
    let r = rng.sample_binomial(n, alpha)?;
    Ok(MiniBatchDraw {
        indices: rng.sample_without_replacement(n, r)?,
    })
}

/// `s ← (1 - γ) s + γ S(z)`, in place.
pub fn sa_update_in_place(s: &mut SuffStat, s_of_z: &SuffStat, gamma: f64) -> Result<(), ModelError> {
    if s.len() != s_of_z.len() {
        return Err(ModelError::Dimension {
            what: "sufficient statistic",
            expected: s.len(),
            got: s_of_z.len(),
        });
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(ModelError::InvalidParameter(format!("step size {gamma} outside [0, 1]")));
    }
    if gamma == 1.0 {
        s.0.copy_from_slice(&s_of_z.0);
    } else if gamma > 0.0 {
        for (a, b) in s.0.iter_mut().zip(&s_of_z.0) {
            *a = (1.0 - gamma) * *a + gamma * b;
        }
    }
    Ok(())
}

pub fn sa_update(s_prev: &SuffStat, s_of_z: &SuffStat, gamma: f64) -> Result<SuffStat, ModelError> {
    let mut s = s_prev.clone();
    sa_update_in_place(&mut s, s_of_z, gamma)?;
    Ok(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub k: usize,
    pub gamma: f64,
    pub r_k: usize,
    pub proposals: usize,
    pub accepted: usize,
    /// Components simulated in iterations `1..=k`.
    pub cum_simulated: u64,
    pub theta: Vec<f64>,
    pub s: Option<Vec<f64>>,
    pub t_sim_ns: u64,
    pub t_sa_ns: u64,
    pub t_m_ns: u64,
}

impl TraceRow {
    pub fn sae_ns(&self) -> u64 {
        self.t_sim_ns + self.t_sa_ns
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaTrace {
    pub n: usize,
    pub alpha: f64,
    pub param_names: Vec<String>,
    pub rows: Vec<TraceRow>,
    /// Parameter entries clamped into their domain over the whole run.
    pub clamped: u64,
    /// Times `s` was reset from a full recomputation after going non-finite.
    pub guard_resets: u64,
}

impl SaTrace {
    fn row(&self, k: usize) -> Result<&TraceRow, EngineError> {
        self.rows
            .binary_search_by_key(&k, |r| r.k)
            .map(|idx| &self.rows[idx])
            .map_err(|_| EngineError::MissingIteration(k))
    }

    /// Series of parameter coordinate `c` over recorded iterations `k ≥ 1`.
    pub fn param_series(&self, c: usize) -> Vec<f64> {
        self.rows.iter().filter(|r| r.k >= 1).map(|r| r.theta[c]).collect()
    }

    pub fn final_theta(&self) -> &[f64] {
        &self.rows.last().expect("trace always holds the initial row").theta
    }

    /// Write the trace as CSV:
    /// `k,gamma,epoch_realized,epoch_nominal,r_k,accepted,theta_1..theta_d,t_sim_ns,t_sa_ns,t_m_ns`.
    pub fn write_csv<W: Write>(&self, mut w: W, with_timing: bool) -> Result<(), EngineError> {
        let d = self.param_names.len();
        let thetas: Vec<String> = (1..=d).map(|c| format!("theta_{c}")).collect();
        writeln!(
            w,
            "k,gamma,epoch_realized,epoch_nominal,r_k,accepted,{},t_sim_ns,t_sa_ns,t_m_ns",
            thetas.join(",")
        )?;
        for r in &self.rows {
            let th: Vec<String> = r.theta.iter().map(|v| format!("{v:.17e}")).collect();
            let (ts, ta, tm) = if with_timing {
                (r.t_sim_ns, r.t_sa_ns, r.t_m_ns)
            } else {
                (0, 0, 0)
            };
            writeln!(
                w,
                "{},{:.17e},{},{},{},{},{},{},{},{}",
                r.k,
                r.gamma,
                r.cum_simulated as f64 / self.n as f64,
                r.k as f64 * self.alpha,
                r.r_k,
                r.accepted,
                th.join(","),
                ts,
                ta,
                tm
            )?;
        }
        Ok(())
    }
}

/// Realized epochs after iteration `k`: components simulated so far over `n`.
pub fn epoch_of(trace: &SaTrace, k: usize) -> Result<f64, EngineError> {
    Ok(trace.row(k)?.cum_simulated as f64 / trace.n as f64)
}

/// Nominal epochs after iteration `k`: `k α`.
pub fn nominal_epoch(trace: &SaTrace, k: usize) -> f64 {
    k as f64 * trace.alpha
}

/// Outcome of one SAE-step.
#[derive(Clone, Copy, Debug, Default)]
pub struct SaeStep {
    pub r_k: usize,
    pub gamma: f64,
    pub kernel: KernelStepResult,
    pub t_sim_ns: u64,
    pub t_sa_ns: u64,
}

/// State of a single mini-batch MCMC-SAEM chain.
pub struct SaemRun<'m, M: LatentModel> {
    model: &'m M,
    config: SaemConfig,
    rng: RngStream,
    z: Vec<M::Component>,
    z_prev: Vec<M::Component>,
    stat_z: SuffStat,
    s: SuffStat,
    theta: M::Theta,
    k: usize,
    cum_simulated: u64,
    clamped: u64,
    guard_resets: u64,
}

impl<'m, M: LatentModel> SaemRun<'m, M> {
    pub fn new(model: &'m M, config: SaemConfig, init: Init<M>) -> Result<Self, EngineError> {
        config.validate()?;
        let mut rng = RngStream::new(config.seed, config.stream);
        let model_err = |source| EngineError::Model { iteration: 0, source };
        let theta = match init.theta {
            InitTheta::Fixed(t) => t,
            InitTheta::Uniform(ranges) => {
                let v: Vec<f64> = ranges.iter().map(|&(lo, hi)| lo + (hi - lo) * rng.uniform()).collect();
                model.theta_from_vec(&v).map_err(model_err)?
            }
        };
        let z = match init.latent {
            Some(z) => z,
            None => model.sample_latent(&theta, &mut rng),
        };
        if z.len() != model.latent_dim() {
            return Err(model_err(ModelError::Dimension {
                what: "initial latent vector",
                expected: model.latent_dim(),
                got: z.len(),
            }));
        }
        let stat_z = model.full_statistic(&z).map_err(model_err)?;
        Ok(Self {
            model,
            s: stat_z.clone(),
            stat_z,
            z_prev: z.clone(),
            z,
            theta,
            rng,
            config,
            k: 0,
            cum_simulated: 0,
            clamped: 0,
            guard_resets: 0,
        })
    }

    pub fn theta(&self) -> &M::Theta {
        &self.theta
    }

    pub fn latent(&self) -> &[M::Component] {
        &self.z
    }

    /// Cached `S(z_k)`.
    pub fn statistic(&self) -> &SuffStat {
        &self.stat_z
    }

    /// Stochastic approximation `s_k`.
    pub fn approximation(&self) -> &SuffStat {
        &self.s
    }

    pub fn iteration(&self) -> usize {
        self.k
    }

    pub fn config(&self) -> &SaemConfig {
        &self.config
    }

    /// Simulation and stochastic-approximation steps of iteration `k + 1`.
    pub fn sae_step(&mut self) -> Result<SaeStep, EngineError> {
        let k = self.k + 1;
        let n = self.model.latent_dim();
        let model_err = |source| EngineError::Model { iteration: k, source };

        let t0 = Instant::now();
        let draw = draw_minibatch(n, self.config.alpha, &mut self.rng)?;
        let kernel = kernels::sweep(self.model, &mut self.z, &draw.indices, &self.theta, &mut self.rng)
            .map_err(model_err)?;
        let t1 = Instant::now();

        let refresh = draw.r() == n
            || (self.config.full_refresh > 0 && k % self.config.full_refresh == 0);
        if refresh {
            self.stat_z = self.model.full_statistic(&self.z).map_err(model_err)?;
        } else {
            self.model
                .update_statistic(&mut self.stat_z, &self.z_prev, &self.z, &draw.indices)
                .map_err(model_err)?;
        }
        for &i in &draw.indices {
            self.z_prev[i] = self.z[i].clone();
        }
        let gamma = self.config.schedule.gamma(k);
        sa_update_in_place(&mut self.s, &self.stat_z, gamma).map_err(model_err)?;
        if !self.s.is_finite() {
            self.stat_z = self.model.full_statistic(&self.z).map_err(model_err)?;
            self.s = self.stat_z.clone();
            self.guard_resets += 1;
            if !self.s.is_finite() {
                return Err(EngineError::NonFinite { iteration: k });
            }
        }
        let t2 = Instant::now();

        self.k = k;
        self.cum_simulated += draw.r() as u64;
        Ok(SaeStep {
            r_k: draw.r(),
            gamma,
            kernel,
            t_sim_ns: (t1 - t0).as_nanos() as u64,
            t_sa_ns: (t2 - t1).as_nanos() as u64,
        })
    }

    /// `θ_k = θ̂(s_k)`, followed by the optional box clamp. Returns elapsed ns.
    pub fn maximize(&mut self) -> Result<u64, EngineError> {
        let k = self.k;
        let model_err = |source| EngineError::Model { iteration: k, source };
        let t = Instant::now();
        let out = self.model.m_step(&self.s, &self.theta).map_err(model_err)?;
        self.clamped += out.clamped as u64;
        self.theta = out.theta;
        if let Some(bounds) = &self.config.theta_bounds {
            let mut v = self.model.theta_to_vec(&self.theta);
            let mut hit = false;
            for (x, &(lo, hi)) in v.iter_mut().zip(bounds) {
                if *x < lo || *x > hi {
                    *x = x.clamp(lo, hi);
                    hit = true;
                    self.clamped += 1;
                }
            }
            if hit {
                self.theta = self.model.theta_from_vec(&v).map_err(model_err)?;
            }
        }
        Ok(t.elapsed().as_nanos() as u64)
    }

    /// One full iteration.
    pub fn step(&mut self) -> Result<TraceRow, EngineError> {
        let sae = self.sae_step()?;
        let t_m_ns = self.maximize()?;
        Ok(TraceRow {
            k: self.k,
            gamma: sae.gamma,
            r_k: sae.r_k,
            proposals: sae.kernel.proposals,
            accepted: sae.kernel.accepted,
            cum_simulated: self.cum_simulated,
            theta: self.model.theta_to_vec(&self.theta),
            s: self.config.record_stats.then(|| self.s.0.clone()),
            t_sim_ns: sae.t_sim_ns,
            t_sa_ns: sae.t_sa_ns,
            t_m_ns,
        })
    }

    fn initial_row(&self) -> TraceRow {
        TraceRow {
            k: 0,
            gamma: 0.0,
            r_k: 0,
            proposals: 0,
            accepted: 0,
            cum_simulated: 0,
            theta: self.model.theta_to_vec(&self.theta),
            s: self.config.record_stats.then(|| self.s.0.clone()),
            t_sim_ns: 0,
            t_sa_ns: 0,
            t_m_ns: 0,
        }
    }

    /// Run the remaining iteration budget and return the final `θ` and trace.
    pub fn run_to_end(mut self) -> Result<(M::Theta, SaTrace, Vec<M::Component>), EngineError> {
        let total = self.config.iterations;
        let thin = self.config.thin;
        let mut rows = vec![self.initial_row()];
        while self.k < total {
            let row = self.step()?;
            if row.k % thin == 0 || row.k == total {
                rows.push(row);
            }
        }
        let trace = SaTrace {
            n: self.model.latent_dim(),
            alpha: self.config.alpha,
            param_names: self.model.param_descriptor().into_iter().map(|p| p.name).collect(),
            rows,
            clamped: self.clamped,
            guard_resets: self.guard_resets,
        };
        Ok((self.theta, trace, self.z))
    }
}

/// Run mini-batch MCMC-SAEM for `config.iterations` iterations.
pub fn run<M: LatentModel>(
    model: &M,
    config: &SaemConfig,
    init: Init<M>,
) -> Result<(M::Theta, SaTrace), EngineError> {
    let (theta, trace, _) = SaemRun::new(model, config.clone(), init)?.run_to_end()?;
    Ok((theta, trace))
}

/// As [`run`], also returning the final latent vector.
pub fn run_with_latent<M: LatentModel>(
    model: &M,
    config: &SaemConfig,
    init: Init<M>,
) -> Result<(M::Theta, SaTrace, Vec<M::Component>), EngineError> {
    SaemRun::new(model, config.clone(), init)?.run_to_end()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_defaults_match_oracle() {
        let s = StepSizeSchedule::default();
        for k in 1..=50 {
            assert_eq!(s.gamma(k), 1.0);
        }
        // independent evaluation: 2^-0.6 = exp(-0.6 ln 2)
        let g52 = (-0.6 * std::f64::consts::LN_2).exp();
        assert!((s.gamma(52) - g52).abs() < 1e-15);
        assert!((g52 - 0.659_754).abs() < 1e-6);
        assert!(StepSizeSchedule::new(10, 0.5).is_err());
        assert!(StepSizeSchedule::new(10, 1.2).is_err());
        assert!(StepSizeSchedule::new(10, 1.0).is_ok());
    }

    #[test]
    fn sa_update_cases() {
        let prev = SuffStat(vec![1.0, -2.0, 3.5]);
        let sz = SuffStat(vec![0.25, 7.0, -1.0]);
        assert_eq!(sa_update(&prev, &sz, 1.0).unwrap(), sz);
        assert_eq!(sa_update(&prev, &sz, 0.0).unwrap(), prev);
        let g = StepSizeSchedule::default().gamma(52);
        let s = sa_update(&SuffStat(vec![0.0]), &SuffStat(vec![2.0]), g).unwrap();
        assert!((s.0[0] - 1.319_508).abs() < 1e-6);
        assert!(sa_update(&prev, &SuffStat(vec![1.0]), 0.5).is_err());
        assert!(sa_update(&prev, &sz, 1.5).is_err());
    }

    #[test]
    fn minibatch_alpha_one_is_everything() {
        let mut rng = RngStream::new(1, 0);
        let before = rng.clone().uniform();
        for _ in 0..5 {
            let d = draw_minibatch(7, 1.0, &mut rng).unwrap();
            assert_eq!(d.indices, (0..7).collect::<Vec<_>>());
        }
        // no randomness consumed
        assert_eq!(rng.uniform(), before);
        assert!(draw_minibatch(7, 0.0, &mut rng).is_err());
        assert!(draw_minibatch(7, 1.1, &mut rng).is_err());
    }

    #[test]
    fn minibatch_single_node_frequency() {
        let mut rng = RngStream::new(2, 0);
        let draws = 100_000;
        let hits = (0..draws)
            .filter(|_| draw_minibatch(1, 0.3, &mut rng).unwrap().indices == vec![0])
            .count();
        let se = (0.3 * 0.7 / draws as f64).sqrt();
        assert!((hits as f64 / draws as f64 - 0.3).abs() < 3.0 * se);
    }

    #[test]
    fn minibatch_mean_size() {
        let mut rng = RngStream::new(3, 0);
        let draws = 100_000;
        let mut sum = 0usize;
        for _ in 0..draws {
            let d = draw_minibatch(100, 0.1, &mut rng).unwrap();
            assert!(d.indices.windows(2).all(|w| w[0] < w[1]));
            sum += d.r();
        }
        let se = (100.0 * 0.1 * 0.9 / draws as f64).sqrt();
        assert!((sum as f64 / draws as f64 - 10.0).abs() < 3.0 * se);
    }
}
