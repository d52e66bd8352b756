//! Weibull proportional-hazards model with a Gaussian shared frailty.
//!
//! Group `i` has frailty `z_i ~ N(0, σ²)`; member `j` has hazard
//! `λ0 ρ t^{ρ-1} exp(X_ijᵀβ + z_i)` and survival
//! `G(t | z_i) = exp(-λ0 t^ρ exp(X_ijᵀβ + z_i))`.
//!
//! Statistic (length `n + 2`): `[Σ z_i², Σ z_i, e^{z_1}, .., e^{z_n}]`.
//! With `W(β, ρ) = Σ_ij t_ij^ρ e^{X_ijᵀβ} A_i`, where `A_i` is the smoothed
//! `e^{z_i}`, the M-step is `σ² = s_0 / n`, `λ0 = N / W` and `(β, ρ)` maximizes
//! the profile `-log W + log ρ + (ρ - 1) T / N + βᵀX̄` (`N = nm`,
//! `T = Σ log t_ij`, `X̄` the covariate mean), solved by damped Newton in
//! `(β, log(ρ - 1))`.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};

use crate::datafile::{content_lines, parse_field, DataError};
use crate::kernels::ProposalFamily;
use crate::model::{check_len, LatentModel, MStep, ModelError, ParamDomain, ParamSpec, SuffStat};
use crate::pk::distinct;
use crate::rng::RngStream;

pub const VARIANCE_FLOOR: f64 = 1e-12;
pub const NEWTON_TOL: f64 = 1e-8;
pub const NEWTON_MAX_ITER: usize = 50;

/// `exp(-λ0 t^ρ exp(xᵀβ + z))`.
pub fn conditional_survival(t: f64, x: &[f64], beta: &[f64], lambda0: f64, rho: f64, z: f64) -> f64 {
    let eta: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>() + z;
    (-lambda0 * t.powf(rho) * eta.exp()).exp()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrailtyData {
    n: usize,
    m: usize,
    p: usize,
    t: Vec<f64>,
    x: Vec<f64>,
    log_t: Vec<f64>,
}

impl FrailtyData {
    /// `t` is `n × m` and `x` is `n × m × p`, both row-major.
    pub fn new(n: usize, m: usize, p: usize, t: Vec<f64>, x: Vec<f64>) -> Result<Self, ModelError> {
        if n == 0 || m == 0 {
            return Err(ModelError::InvalidDesign(format!("frailty data needs n, m ≥ 1 (got {n}, {m})")));
        }
        check_len("survival times", n * m, t.len())?;
        check_len("covariates", n * m * p, x.len())?;
        if let Some(k) = t.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(ModelError::InvalidParameter(format!(
                "survival time ({}, {}) must be positive and finite",
                k / m,
                k % m
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidParameter("non-finite covariate".into()));
        }
        let log_t = t.iter().map(|v| v.ln()).collect();
        Ok(Self { n, m, p, t, x, log_t })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn t(&self, i: usize, j: usize) -> f64 {
        self.t[i * self.m + j]
    }

    pub fn x(&self, i: usize, j: usize) -> &[f64] {
        let k = (i * self.m + j) * self.p;
        &self.x[k..k + self.p]
    }

    fn log_t(&self, i: usize, j: usize) -> f64 {
        self.log_t[i * self.m + j]
    }

    fn lin(&self, i: usize, j: usize, beta: &[f64]) -> f64 {
        self.x(i, j).iter().zip(beta).map(|(a, b)| a * b).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrailtyTheta {
    pub beta: Vec<f64>,
    pub sigma2: f64,
    pub lambda0: f64,
    pub rho: f64,
}

impl FrailtyTheta {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.beta.iter().all(|b| b.is_finite())
            && self.sigma2 > 0.0
            && self.sigma2.is_finite()
            && self.lambda0 > 0.0
            && self.lambda0.is_finite()
            && self.rho > 1.0
            && self.rho.is_finite();
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidParameter(format!("invalid frailty parameter {self:?}")))
        }
    }

    /// `β = (2, 3)`, `λ0 = 3`, `σ² = 2`, `ρ = 3.6`.
    pub fn reference() -> Self {
        Self {
            beta: vec![2.0, 3.0],
            sigma2: 2.0,
            lambda0: 3.0,
            rho: 3.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrailtyDesign {
    pub n: usize,
    pub m: usize,
}

impl Default for FrailtyDesign {
    fn default() -> Self {
        Self { n: 5000, m: 100 }
    }
}

/// Outcome of the `(β, ρ)` Newton solve.
#[derive(Clone, Debug, PartialEq)]
pub struct NewtonReport {
    pub iterations: usize,
    /// Norm of the profile gradient in `(β, ρ)` at the returned point.
    pub grad_norm: f64,
    /// Profile objective at the start and after each accepted step;
    /// non-decreasing up to `64 ε (1 + |value|)` per step.
    pub objective_path: Vec<f64>,
}

struct Profile {
    value: f64,
    /// Gradient in `(β, ρ)`.
    grad: DVector<f64>,
    /// Hessian in `(β, ρ)`.
    hess: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct FrailtyModel {
    data: FrailtyData,
    proposal: ProposalFamily,
    mean_log_t: f64,
    mean_x: Vec<f64>,
}

impl FrailtyModel {
    /// Proposal variance 0.2.
    pub fn new(data: FrailtyData) -> Self {
        Self::with_proposal_variance(data, 0.2).expect("positive default variance")
    }

    pub fn with_proposal_variance(data: FrailtyData, var: f64) -> Result<Self, ModelError> {
        let nn = (data.n * data.m) as f64;
        let mean_log_t = data.log_t.iter().sum::<f64>() / nn;
        let mut mean_x = vec![0.0; data.p];
        for (k, v) in data.x.iter().enumerate() {
            mean_x[k % data.p] += v;
        }
        for v in &mut mean_x {
            *v /= nn;
        }
        Ok(Self {
            proposal: ProposalFamily::gaussian_from_variance(vec![var])?,
            data,
            mean_log_t,
            mean_x,
        })
    }

    pub fn data(&self) -> &FrailtyData {
        &self.data
    }

    /// `B_i = Σ_j t_ij^ρ e^{X_ijᵀβ}`.
    pub fn group_exposure(&self, i: usize, beta: &[f64], rho: f64) -> f64 {
        (0..self.data.m)
            .map(|j| (rho * self.data.log_t(i, j) + self.data.lin(i, j, beta)).exp())
            .sum()
    }

    fn check_stat(&self, s: &SuffStat) -> Result<(), ModelError> {
        check_len("statistic", self.data.n + 2, s.len())?;
        if !s.is_finite() {
            return Err(ModelError::Inadmissible("non-finite frailty statistic".into()));
        }
        if let Some(i) = s.0[2..].iter().position(|&a| !(a > 0.0)) {
            return Err(ModelError::Inadmissible(format!("frailty multiplier of group {i} is not positive")));
        }
        Ok(())
    }

    /// `log W(β, ρ)` computed with a max-shift.
    fn log_w(&self, a: &[f64], beta: &[f64], rho: f64) -> f64 {
        let lw = self.log_weights(a, beta, rho);
        let mx = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        mx + lw.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
    }

    fn log_weights(&self, a: &[f64], beta: &[f64], rho: f64) -> Vec<f64> {
        let d = &self.data;
        let mut lw = Vec::with_capacity(d.n * d.m);
        for (i, ai) in a.iter().enumerate() {
            let la = ai.ln();
            for j in 0..d.m {
                lw.push(rho * d.log_t(i, j) + d.lin(i, j, beta) + la);
            }
        }
        lw
    }

    fn profile_value(&self, a: &[f64], beta: &[f64], rho: f64) -> f64 {
        if !(rho > 1.0) {
            return f64::NEG_INFINITY;
        }
        let bx: f64 = beta.iter().zip(&self.mean_x).map(|(b, x)| b * x).sum();
        -self.log_w(a, beta, rho) + rho.ln() + (rho - 1.0) * self.mean_log_t + bx
    }

    fn profile(&self, a: &[f64], beta: &[f64], rho: f64) -> Profile {
        let d = &self.data;
        let p = d.p;
        let k = p + 1;
        let lw = self.log_weights(a, beta, rho);
        let mx = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sw = 0.0;
        let mut m1 = DVector::zeros(k);
        let mut m2 = DMatrix::zeros(k, k);
        let mut v = DVector::zeros(k);
        for i in 0..d.n {
            for j in 0..d.m {
                let w = (lw[i * d.m + j] - mx).exp();
                v.rows_mut(0, p).copy_from_slice(d.x(i, j));
                v[p] = d.log_t(i, j);
                sw += w;
                m1.axpy(w, &v, 1.0);
                m2.ger(w, &v, &v, 1.0);
            }
        }
        m1 /= sw;
        m2 /= sw;
        let cov = m2 - &m1 * m1.transpose();
        let mut grad = DVector::zeros(k);
        for c in 0..p {
            grad[c] = self.mean_x[c] - m1[c];
        }
        grad[p] = 1.0 / rho + self.mean_log_t - m1[p];
        let mut hess = -cov;
        hess[(p, p)] -= 1.0 / (rho * rho);
        let bx: f64 = beta.iter().zip(&self.mean_x).map(|(b, x)| b * x).sum();
        let value = -(mx + sw.ln()) + rho.ln() + (rho - 1.0) * self.mean_log_t + bx;
        Profile { value, grad, hess }
    }

    /// Gradient of the normalized profile objective in `(β, ρ)` at the
    /// smoothed multipliers of `s`.
    pub fn profile_gradient(&self, s: &SuffStat, beta: &[f64], rho: f64) -> Result<Vec<f64>, ModelError> {
        self.check_stat(s)?;
        check_len("beta", self.data.p, beta.len())?;
        Ok(self.profile(&s.0[2..], beta, rho).grad.iter().copied().collect())
    }

    /// Damped Newton maximization of the profile objective in
    /// `(β, u = log(ρ - 1))`.
    pub fn solve_beta_rho(
        &self,
        a: &[f64],
        beta0: &[f64],
        rho0: f64,
    ) -> Result<(Vec<f64>, f64, NewtonReport), ModelError> {
        let p = self.data.p;
        let mut beta = beta0.to_vec();
        let mut rho = if rho0 > 1.0 && rho0.is_finite() { rho0 } else { 2.0 };
        let mut prof = self.profile(a, &beta, rho);
        let mut path = vec![prof.value];
        for it in 0..=NEWTON_MAX_ITER {
            let gn = prof.grad.norm();
            if gn < NEWTON_TOL {
                return Ok((
                    beta,
                    rho,
                    NewtonReport {
                        iterations: it,
                        grad_norm: gn,
                        objective_path: path,
                    },
                ));
            }
            if it == NEWTON_MAX_ITER {
                break;
            }
            let e = rho - 1.0;
            let mut g_u = prof.grad.clone();
            g_u[p] *= e;
            let mut h_u = prof.hess.clone();
            for c in 0..p {
                h_u[(c, p)] *= e;
                h_u[(p, c)] *= e;
            }
            h_u[(p, p)] = prof.hess[(p, p)] * e * e + prof.grad[p] * e;
            let dir = match (-&h_u).cholesky() {
                Some(ch) => ch.solve(&g_u),
                None => match (-&prof.hess).cholesky() {
                    Some(ch) => {
                        let mut d = ch.solve(&prof.grad);
                        d[p] /= e;
                        d
                    }
                    None => g_u.clone(),
                },
            };
            // changes below `tie` are rounding noise; there a step is taken
            // only if it reduces the gradient norm
            let tie = 64.0 * f64::EPSILON * (1.0 + prof.value.abs());
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let nb: Vec<f64> = (0..p).map(|c| beta[c] + step * dir[c]).collect();
                let nr = 1.0 + (e.ln() + step * dir[p]).exp();
                let val = self.profile_value(a, &nb, nr);
                if val.is_finite() && nr > 1.0 {
                    if val > prof.value + tie {
                        accepted = Some(self.profile(a, &nb, nr));
                    } else if val >= prof.value - tie {
                        let cand = self.profile(a, &nb, nr);
                        if cand.grad.norm() < prof.grad.norm() {
                            accepted = Some(cand);
                        }
                    }
                    if accepted.is_some() {
                        beta = nb;
                        rho = nr;
                        break;
                    }
                }
                step *= 0.5;
            }
            match accepted {
                Some(next) => {
                    prof = next;
                    path.push(prof.value);
                }
                None => break,
            }
        }
        let mut last = beta;
        last.push(rho);
        Err(ModelError::NewtonDiverged {
            iterations: path.len() - 1,
            grad_norm: prof.grad.norm(),
            last,
        })
    }

    /// M-step together with the Newton diagnostics.
    pub fn m_step_report(
        &self,
        s: &SuffStat,
        warm: &FrailtyTheta,
    ) -> Result<(MStep<FrailtyTheta>, NewtonReport), ModelError> {
        self.check_stat(s)?;
        check_len("beta", self.data.p, warm.beta.len())?;
        let mut clamped = 0;
        let mut sigma2 = s.0[0] / self.data.n as f64;
        if sigma2 < VARIANCE_FLOOR {
            sigma2 = VARIANCE_FLOOR;
            clamped += 1;
        }
        let a = &s.0[2..];
        let (beta, rho, report) = self.solve_beta_rho(a, &warm.beta, warm.rho)?;
        let nn = (self.data.n * self.data.m) as f64;
        let lambda0 = (nn.ln() - self.log_w(a, &beta, rho)).exp();
        Ok((
            MStep {
                theta: FrailtyTheta {
                    beta,
                    sigma2,
                    lambda0,
                    rho,
                },
                clamped,
            },
            report,
        ))
    }

    pub fn simulate(
        theta: &FrailtyTheta,
        design: &FrailtyDesign,
        rng: &mut RngStream,
    ) -> Result<(FrailtyData, Vec<f64>), ModelError> {
        theta.validate()?;
        if design.n == 0 || design.m == 0 {
            return Err(ModelError::InvalidDesign("frailty design needs n, m ≥ 1".into()));
        }
        let p = theta.beta.len();
        let mut z = Vec::with_capacity(design.n);
        let mut t = Vec::with_capacity(design.n * design.m);
        let mut x = Vec::with_capacity(design.n * design.m * p);
        for _ in 0..design.n {
            let zi = theta.sigma2.sqrt() * rng.std_normal();
            for _ in 0..design.m {
                let start = x.len();
                for _ in 0..p {
                    x.push(rng.uniform());
                }
                let eta: f64 = x[start..].iter().zip(&theta.beta).map(|(a, b)| a * b).sum::<f64>() + zi;
                let mut u = rng.uniform();
                while u == 0.0 {
                    u = rng.uniform();
                }
                t.push((-u.ln() / (theta.lambda0 * eta.exp())).powf(1.0 / theta.rho));
            }
            z.push(zi);
        }
        let data = FrailtyData::new(design.n, design.m, p, t, x)?;
        Ok((data, z))
    }
}

impl LatentModel for FrailtyModel {
    type Component = f64;
    type Theta = FrailtyTheta;

    fn name(&self) -> &'static str {
        "frailty"
    }

    fn latent_dim(&self) -> usize {
        self.data.n
    }

    fn statistic_dim(&self) -> usize {
        self.data.n + 2
    }

    fn param_descriptor(&self) -> Vec<ParamSpec> {
        let mut v: Vec<ParamSpec> = (1..=self.data.p)
            .map(|c| ParamSpec::new(format!("beta_{c}"), ParamDomain::Real))
            .collect();
        v.push(ParamSpec::new("sigma2", ParamDomain::Positive));
        v.push(ParamSpec::new("lambda0", ParamDomain::Positive));
        v.push(ParamSpec::new("rho", ParamDomain::AboveOne));
        v
    }

    fn theta_to_vec(&self, t: &FrailtyTheta) -> Vec<f64> {
        let mut v = t.beta.clone();
        v.extend([t.sigma2, t.lambda0, t.rho]);
        v
    }

    fn theta_from_vec(&self, v: &[f64]) -> Result<FrailtyTheta, ModelError> {
        let p = self.data.p;
        check_len("parameter vector", p + 3, v.len())?;
        let t = FrailtyTheta {
            beta: v[..p].to_vec(),
            sigma2: v[p],
            lambda0: v[p + 1],
            rho: v[p + 2],
        };
        t.validate()?;
        Ok(t)
    }

    fn proposal(&self) -> &ProposalFamily {
        &self.proposal
    }

    fn full_statistic(&self, z: &[f64]) -> Result<SuffStat, ModelError> {
        check_len("latent vector", self.data.n, z.len())?;
        let mut s = Vec::with_capacity(self.data.n + 2);
        s.push(z.iter().map(|v| v * v).sum());
        s.push(z.iter().sum());
        s.extend(z.iter().map(|v| v.exp()));
        Ok(SuffStat(s))
    }

    fn update_statistic(
        &self,
        stat: &mut SuffStat,
        z_prev: &[f64],
        z_new: &[f64],
        changed: &[usize],
    ) -> Result<(), ModelError> {
        check_len("statistic", self.data.n + 2, stat.len())?;
        check_len("previous latent vector", self.data.n, z_prev.len())?;
        check_len("new latent vector", self.data.n, z_new.len())?;
        let (mut d2, mut d1) = (0.0, 0.0);
        for i in distinct(changed) {
            let (a, b) = (z_prev[i], z_new[i]);
            if a == b {
                continue;
            }
            d2 += b * b - a * a;
            d1 += b - a;
            stat.0[2 + i] = b.exp();
        }
        stat.0[0] += d2;
        stat.0[1] += d1;
        Ok(())
    }

    fn component_log_posterior_ratio(
        &self,
        z: &[f64],
        i: usize,
        candidate: &f64,
        theta: &FrailtyTheta,
    ) -> Result<f64, ModelError> {
        let (old, new) = (z[i], *candidate);
        let b = self.group_exposure(i, &theta.beta, theta.rho);
        let lr = self.data.m as f64 * (new - old)
            - theta.lambda0 * b * (new.exp() - old.exp())
            - (new * new - old * old) / (2.0 * theta.sigma2);
        if lr.is_nan() {
            return Err(ModelError::NonFinite { component: i });
        }
        Ok(lr)
    }

    fn m_step(&self, s: &SuffStat, warm: &FrailtyTheta) -> Result<MStep<FrailtyTheta>, ModelError> {
        self.m_step_report(s, warm).map(|(m, _)| m)
    }

    fn sample_latent(&self, theta: &FrailtyTheta, rng: &mut RngStream) -> Vec<f64> {
        let sd = theta.sigma2.sqrt();
        (0..self.data.n).map(|_| sd * rng.std_normal()).collect()
    }

    fn complete_log_likelihood(&self, z: &[f64], theta: &FrailtyTheta) -> Result<f64, ModelError> {
        check_len("latent vector", self.data.n, z.len())?;
        let d = &self.data;
        let (ll0, lr) = (theta.lambda0.ln(), theta.rho.ln());
        let prior_c = -0.5 * (2.0 * std::f64::consts::PI * theta.sigma2).ln();
        let mut ll = 0.0;
        for (i, &zi) in z.iter().enumerate() {
            for j in 0..d.m {
                let eta = d.lin(i, j, &theta.beta) + zi;
                let lt = d.log_t(i, j);
                let term = ll0 + lr + (theta.rho - 1.0) * lt + eta - theta.lambda0 * (theta.rho * lt + eta).exp();
                if !term.is_finite() {
                    return Err(ModelError::NonFiniteObservation { i, j });
                }
                ll += term;
            }
            ll += prior_c - zi * zi / (2.0 * theta.sigma2);
        }
        Ok(ll)
    }

    fn free_coordinates(&self, theta: &FrailtyTheta) -> Vec<f64> {
        self.theta_to_vec(theta)
    }

    fn surrogate_objective(&self, s: &SuffStat, free: &[f64]) -> f64 {
        let p = self.data.p;
        let (beta, sigma2, lambda0, rho) = (&free[..p], free[p], free[p + 1], free[p + 2]);
        if !(sigma2 > 0.0 && lambda0 > 0.0 && rho > 1.0) {
            return f64::NEG_INFINITY;
        }
        let n = self.data.n as f64;
        let nn = n * self.data.m as f64;
        let w = self.log_w(&s.0[2..], beta, rho).exp();
        let bx: f64 = beta.iter().zip(&self.mean_x).map(|(b, x)| b * x).sum();
        nn * (lambda0.ln() + rho.ln() + (rho - 1.0) * self.mean_log_t + bx) + self.data.m as f64 * s.0[1]
            - lambda0 * w
            - 0.5 * n * sigma2.ln()
            - s.0[0] / (2.0 * sigma2)
    }
}

/// CSV with header `i,j,t,x_1..x_p` (0-based indices).
pub fn write_csv<W: Write>(mut w: W, data: &FrailtyData) -> Result<(), DataError> {
    write!(w, "i,j,t")?;
    for c in 1..=data.p {
        write!(w, ",x_{c}")?;
    }
    writeln!(w)?;
    for i in 0..data.n {
        for j in 0..data.m {
            write!(w, "{i},{j},{:e}", data.t(i, j))?;
            for v in data.x(i, j) {
                write!(w, ",{v:e}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

pub fn read_csv<R: BufRead>(r: R) -> Result<FrailtyData, DataError> {
    let mut rows: Vec<(usize, usize, f64, Vec<f64>)> = Vec::new();
    let mut p = None;
    for (k, l) in content_lines(r).enumerate() {
        let (no, line) = l?;
        if k == 0 && line.trim_start().starts_with('i') {
            p = Some(line.split(',').count().saturating_sub(3));
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let pp = *p.get_or_insert(fields.len().saturating_sub(3));
        if fields.len() != pp + 3 {
            return Err(DataError::Parse {
                line: no,
                msg: format!("expected {} fields, found {}", pp + 3, fields.len()),
            });
        }
        let i = parse_field(Some(fields[0]), no, "i")?;
        let j = parse_field(Some(fields[1]), no, "j")?;
        let t = parse_field(Some(fields[2]), no, "t")?;
        let x = (0..pp)
            .map(|c| parse_field(Some(fields[3 + c]), no, "x"))
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push((i, j, t, x));
    }
    let p = p.unwrap_or(0);
    let n = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let m = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
    if rows.len() != n * m {
        return Err(DataError::Invalid(format!(
            "expected a complete {n} × {m} grid, found {} rows",
            rows.len()
        )));
    }
    let mut t = vec![f64::NAN; n * m];
    let mut x = vec![f64::NAN; n * m * p];
    for (i, j, ti, xi) in rows {
        t[i * m + j] = ti;
        x[(i * m + j) * p..(i * m + j + 1) * p].copy_from_slice(&xi);
    }
    FrailtyData::new(n, m, p, t, x).map_err(|e| DataError::Invalid(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn survival_examples() {
        assert_eq!(conditional_survival(0.0, &[0.3], &[1.0], 3.0, 3.6, 0.5), 1.0);
        let g = conditional_survival(1.0, &[0.0, 0.0], &[0.0, 0.0], 3.0, 3.6, 0.0);
        assert!((g - (-3.0f64).exp()).abs() < 1e-15);
        assert_eq!(conditional_survival(1e6, &[], &[], 3.0, 3.6, 0.0), 0.0);
    }

    fn one_obs() -> FrailtyModel {
        FrailtyModel::new(FrailtyData::new(1, 1, 1, vec![0.7], vec![0.4]).unwrap())
    }

    #[test]
    fn scalar_log_likelihood() {
        let m = one_obs();
        let th = FrailtyTheta {
            beta: vec![1.5],
            sigma2: 0.5,
            lambda0: 2.0,
            rho: 1.7,
        };
        let z = 0.3;
        let eta = 1.5 * 0.4 + z;
        let hazard = 2.0 * 1.7 * 0.7f64.powf(0.7) * f64::exp(eta);
        let surv = (-2.0 * 0.7f64.powf(1.7) * f64::exp(eta)).exp();
        let prior = (-z * z / (2.0 * 0.5)).exp() / (2.0 * std::f64::consts::PI * 0.5).sqrt();
        let expect = (hazard * surv * prior).ln();
        let got = m.complete_log_likelihood(&[z], &th).unwrap();
        assert!((got - expect).abs() < 1e-13, "{got} vs {expect}");
    }

    #[test]
    fn zero_latent_statistic() {
        let m = FrailtyModel::new(FrailtyData::new(3, 1, 0, vec![1.0; 3], vec![]).unwrap());
        let s = m.full_statistic(&[0.0; 3]).unwrap();
        assert_eq!(s.0, vec![0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn sigma2_update_is_explicit() {
        let mut rng = RngStream::new(3, 0);
        let th = FrailtyTheta {
            beta: vec![],
            sigma2: 2.0,
            lambda0: 3.0,
            rho: 3.6,
        };
        let (data, z) = FrailtyModel::simulate(&th, &FrailtyDesign { n: 10, m: 5 }, &mut rng).unwrap();
        let m = FrailtyModel::new(data);
        let mut s = m.full_statistic(&z).unwrap();
        s.0[0] = 2.0 * 10.0;
        let (out, rep) = m.m_step_report(&s, &th).unwrap();
        assert_eq!(out.theta.sigma2, 2.0);
        assert!(rep.grad_norm < NEWTON_TOL);
        assert!(rep.objective_path.windows(2).all(|w| w[1] >= w[0] - 1e-13));
    }

    #[test]
    fn m_step_recovers_truth_without_covariates() {
        let mut rng = RngStream::new(11, 0);
        let th = FrailtyTheta {
            beta: vec![],
            sigma2: 2.0,
            lambda0: 3.0,
            rho: 3.6,
        };
        let (data, z) = FrailtyModel::simulate(&th, &FrailtyDesign { n: 400, m: 50 }, &mut rng).unwrap();
        let m = FrailtyModel::new(data);
        let s = m.full_statistic(&z).unwrap();
        let warm = FrailtyTheta { rho: 1.5, lambda0: 1.0, ..th.clone() };
        let out = m.m_step(&s, &warm).unwrap().theta;
        assert!((out.rho - 3.6).abs() < 0.1, "{out:?}");
        assert!((out.lambda0 - 3.0).abs() < 0.3, "{out:?}");
        assert!((out.sigma2 - 2.0).abs() < 0.4, "{out:?}");
    }

    #[test]
    fn weibull_moment_without_effects() {
        let mut rng = RngStream::new(2, 0);
        let th = FrailtyTheta {
            beta: vec![0.0],
            sigma2: 1e-300,
            lambda0: 3.0,
            rho: 3.6,
        };
        let (data, _) = FrailtyModel::simulate(&th, &FrailtyDesign { n: 200, m: 100 }, &mut rng).unwrap();
        let nn = 20_000.0;
        let mean: f64 = (0..200)
            .flat_map(|i| (0..100).map(move |j| (i, j)))
            .map(|(i, j)| data.t(i, j).powf(3.6))
            .sum::<f64>()
            / nn;
        // t^ρ ~ Exp(λ0): mean 1/3, sd 1/3
        assert!((mean - 1.0 / 3.0).abs() < 3.0 * (1.0 / 3.0) / nn.sqrt());
    }

    #[test]
    fn csv_round_trip() {
        let mut rng = RngStream::new(8, 0);
        let (data, _) =
            FrailtyModel::simulate(&FrailtyTheta::reference(), &FrailtyDesign { n: 3, m: 4 }, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &data).unwrap();
        assert_eq!(read_csv(buf.as_slice()).unwrap(), data);
    }
}
