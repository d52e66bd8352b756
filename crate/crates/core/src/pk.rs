//! One-compartment pharmacokinetic model with first-order absorption.
//!
//! Observation `j` of individual `i` is `y_ij = h(V_i, ka_i, Cl_i; d_i, t_ij) + ε_ij`,
//! `ε_ij ~ N(0, σ²)`, with log-normal individual parameters
//! `log V_i ~ N(log μ_V, ω_V²)` (likewise for `ka`, `Cl`).
//!
//! The latent component of individual `i` is the vector of its log
//! parameters `φ_i = (log V_i, log ka_i, log Cl_i)`, i.e. the population
//! location plus the centered random effect. With this choice the statistic
//! below is a function of the latent vector alone and the M-step is
//! `μ = exp(s_{1..3})`, `ω² = s_{4..6} - s_{1..3}²`, `σ² = s_7`.
//!
//! Statistic (length 7): means of `φ_{i,l}`, means of `φ_{i,l}²` and the mean
//! squared residual `(1/(nJ)) Σ_ij (y_ij - h_ij)²`.

use std::io::{BufRead, Write};

use crate::datafile::{content_lines, parse_field, DataError};
use crate::kernels::{gaussian_step, Component, ProposalFamily};
use crate::model::{check_len, LatentModel, MStep, ModelError, ParamDomain, ParamSpec, SuffStat};
use crate::rng::RngStream;

/// Variance floor used when `s_{l+3} - s_l²` or `s_7` fall below it.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Concentration at time `t` after an oral dose `d`:
/// `d ka / (V ka - Cl) · (exp(-Cl t / V) - exp(-ka t))`.
///
/// Written as `(d ka / V) e^{-ka t} expm1(δ t) / δ` with `δ = ka - Cl/V`,
/// which is accurate on both sides of the removable singularity `V ka = Cl`;
/// when `|V ka - Cl| < 1e-10 |V ka|` the first-order expansion
/// `t (1 + δ t / 2)` replaces `expm1(δ t) / δ`.
pub fn pk_curve(v: f64, ka: f64, cl: f64, d: f64, t: f64) -> f64 {
    let delta = ka - cl / v;
    let ratio = if (v * ka - cl).abs() < 1e-10 * (v * ka).abs() {
        t * (1.0 + 0.5 * delta * t)
    } else {
        (delta * t).exp_m1() / delta
    };
    d * ka / v * (-ka * t).exp() * ratio
}

#[derive(Clone, Debug, PartialEq)]
pub struct PkData {
    n: usize,
    j: usize,
    y: Vec<f64>,
    t: Vec<f64>,
    d: Vec<f64>,
}

impl PkData {
    /// `y` and `t` are `n × J` row-major; `d` has length `n`.
    pub fn new(n: usize, j: usize, y: Vec<f64>, t: Vec<f64>, d: Vec<f64>) -> Result<Self, ModelError> {
        if n == 0 || j == 0 {
            return Err(ModelError::InvalidDesign(format!("PK data needs n, J ≥ 1 (got {n}, {j})")));
        }
        check_len("concentrations", n * j, y.len())?;
        check_len("times", n * j, t.len())?;
        check_len("doses", n, d.len())?;
        if y.iter().chain(&d).any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidParameter("non-finite concentration or dose".into()));
        }
        if t.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(ModelError::InvalidParameter("observation times must be positive".into()));
        }
        Ok(Self { n, j, y, t, d })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn j(&self) -> usize {
        self.j
    }

    pub fn y(&self, i: usize, j: usize) -> f64 {
        self.y[i * self.j + j]
    }

    pub fn t(&self, i: usize, j: usize) -> f64 {
        self.t[i * self.j + j]
    }

    pub fn dose(&self, i: usize) -> f64 {
        self.d[i]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PkTheta {
    /// `(μ_V, μ_ka, μ_Cl)`.
    pub mu: [f64; 3],
    /// `(ω_V², ω_ka², ω_Cl²)`.
    pub omega2: [f64; 3],
    pub sigma2: f64,
}

impl PkTheta {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.mu.iter().all(|&m| m > 0.0 && m.is_finite())
            && self.omega2.iter().all(|&w| w >= 0.0 && w.is_finite())
            && self.sigma2 > 0.0
            && self.sigma2.is_finite();
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidParameter(format!("invalid PK parameter {self:?}")))
        }
    }

    /// Simulation setting: `μ = (30, 1.8, 3.5)`, `ω = (0.02, 0.04, 0.06)`, `σ² = 2`.
    pub fn reference() -> Self {
        Self {
            mu: [30.0, 1.8, 3.5],
            omega2: [0.02f64.powi(2), 0.04f64.powi(2), 0.06f64.powi(2)],
            sigma2: 2.0,
        }
    }
}

/// Latent component of one individual: log parameters plus the cached
/// residual sum of squares `Σ_j (y_ij - h_ij)²` at those parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PkIndividual {
    pub phi: [f64; 3],
    rss: f64,
}

impl PkIndividual {
    pub fn rss(&self) -> f64 {
        self.rss
    }
}

impl Component for PkIndividual {
    fn substeps(_family: &ProposalFamily) -> usize {
        3
    }

    fn propose(&self, family: &ProposalFamily, substep: usize, rng: &mut RngStream) -> Self {
        let mut out = *self;
        out.phi[substep] = gaussian_step(self.phi[substep], family, substep, rng);
        out.rss = f64::NAN; // filled by prepare_candidate
        out
    }
}

/// Fixed design: `n` individuals, shared dose and sampling times.
#[derive(Clone, Debug, PartialEq)]
pub struct PkDesign {
    pub n: usize,
    pub dose: f64,
    pub times: Vec<f64>,
}

impl Default for PkDesign {
    /// `n = 1000`, `d = 320`, `t_j = j` for `j = 1..10`.
    fn default() -> Self {
        Self {
            n: 1000,
            dose: 320.0,
            times: (1..=10).map(f64::from).collect(),
        }
    }
}

pub const PROPOSAL_VARIANCE: [f64; 3] = [0.01, 0.02, 0.03];

#[derive(Clone, Debug)]
pub struct PkModel {
    data: PkData,
    proposal: ProposalFamily,
}

impl PkModel {
    /// Random-walk proposal variances `(0.01, 0.02, 0.03)`.
    pub fn new(data: PkData) -> Self {
        Self {
            data,
            proposal: ProposalFamily::Gaussian {
                sd: PROPOSAL_VARIANCE.iter().map(|v| v.sqrt()).collect(),
            },
        }
    }

    pub fn with_proposal(data: PkData, sd: [f64; 3]) -> Result<Self, ModelError> {
        Ok(Self {
            data,
            proposal: ProposalFamily::gaussian(sd.to_vec())?,
        })
    }

    pub fn data(&self) -> &PkData {
        &self.data
    }

    fn rss(&self, i: usize, phi: &[f64; 3]) -> f64 {
        let (v, ka, cl) = (phi[0].exp(), phi[1].exp(), phi[2].exp());
        let d = self.data.dose(i);
        (0..self.data.j)
            .map(|j| {
                let r = self.data.y(i, j) - pk_curve(v, ka, cl, d, self.data.t(i, j));
                r * r
            })
            .sum()
    }

    /// Latent component for individual `i` with log parameters `phi`.
    pub fn individual(&self, i: usize, phi: [f64; 3]) -> PkIndividual {
        PkIndividual {
            rss: self.rss(i, &phi),
            phi,
        }
    }

    /// Latent vector from log parameters.
    pub fn latent_from_log_params(&self, phis: &[[f64; 3]]) -> Result<Vec<PkIndividual>, ModelError> {
        check_len("log parameters", self.data.n, phis.len())?;
        Ok(phis.iter().enumerate().map(|(i, &p)| self.individual(i, p)).collect())
    }

    /// Latent vector from centered random effects `z_i` at `theta`
    /// (`φ_i = log μ + z_i`).
    pub fn latent_from_effects(&self, z: &[[f64; 3]], theta: &PkTheta) -> Result<Vec<PkIndividual>, ModelError> {
        let phis: Vec<[f64; 3]> = z
            .iter()
            .map(|zi| [0, 1, 2].map(|l| theta.mu[l].ln() + zi[l]))
            .collect();
        self.latent_from_log_params(&phis)
    }

    pub fn simulate(
        theta: &PkTheta,
        design: &PkDesign,
        rng: &mut RngStream,
    ) -> Result<(PkData, Vec<[f64; 3]>), ModelError> {
        theta.validate()?;
        if design.n == 0 || design.times.is_empty() {
            return Err(ModelError::InvalidDesign("PK design needs n ≥ 1 and J ≥ 1".into()));
        }
        if !(design.dose > 0.0) || design.times.iter().any(|&t| !(t > 0.0)) {
            return Err(ModelError::InvalidDesign("dose and times must be positive".into()));
        }
        let jn = design.times.len();
        let mut phis = Vec::with_capacity(design.n);
        let mut y = Vec::with_capacity(design.n * jn);
        let mut t = Vec::with_capacity(design.n * jn);
        for _ in 0..design.n {
            let phi = [0, 1, 2].map(|l| theta.mu[l].ln() + theta.omega2[l].sqrt() * rng.std_normal());
            let (v, ka, cl) = (phi[0].exp(), phi[1].exp(), phi[2].exp());
            for &tj in &design.times {
                y.push(pk_curve(v, ka, cl, design.dose, tj) + theta.sigma2.sqrt() * rng.std_normal());
                t.push(tj);
            }
            phis.push(phi);
        }
        let data = PkData::new(design.n, jn, y, t, vec![design.dose; design.n])?;
        Ok((data, phis))
    }
}

impl LatentModel for PkModel {
    type Component = PkIndividual;
    type Theta = PkTheta;

    fn name(&self) -> &'static str {
        "pk"
    }

    fn latent_dim(&self) -> usize {
        self.data.n
    }

    fn statistic_dim(&self) -> usize {
        7
    }

    fn param_descriptor(&self) -> Vec<ParamSpec> {
        use ParamDomain::*;
        [
            ("mu_V", Positive),
            ("mu_ka", Positive),
            ("mu_Cl", Positive),
            ("omega2_V", NonNegative),
            ("omega2_ka", NonNegative),
            ("omega2_Cl", NonNegative),
            ("sigma2", Positive),
        ]
        .into_iter()
        .map(|(n, d)| ParamSpec::new(n, d))
        .collect()
    }

    fn theta_to_vec(&self, t: &PkTheta) -> Vec<f64> {
        vec![t.mu[0], t.mu[1], t.mu[2], t.omega2[0], t.omega2[1], t.omega2[2], t.sigma2]
    }

    fn theta_from_vec(&self, v: &[f64]) -> Result<PkTheta, ModelError> {
        check_len("parameter vector", 7, v.len())?;
        let t = PkTheta {
            mu: [v[0], v[1], v[2]],
            omega2: [v[3], v[4], v[5]],
            sigma2: v[6],
        };
        t.validate()?;
        Ok(t)
    }

    fn proposal(&self) -> &ProposalFamily {
        &self.proposal
    }

    fn full_statistic(&self, z: &[PkIndividual]) -> Result<SuffStat, ModelError> {
        check_len("latent vector", self.data.n, z.len())?;
        let n = self.data.n as f64;
        let mut s = [0.0; 7];
        for (i, zi) in z.iter().enumerate() {
            for l in 0..3 {
                s[l] += zi.phi[l];
                s[l + 3] += zi.phi[l] * zi.phi[l];
            }
            s[6] += self.rss(i, &zi.phi);
        }
        for v in &mut s[..6] {
            *v /= n;
        }
        s[6] /= n * self.data.j as f64;
        Ok(SuffStat(s.to_vec()))
    }

    fn update_statistic(
        &self,
        stat: &mut SuffStat,
        z_prev: &[PkIndividual],
        z_new: &[PkIndividual],
        changed: &[usize],
    ) -> Result<(), ModelError> {
        check_len("statistic", 7, stat.len())?;
        check_len("previous latent vector", self.data.n, z_prev.len())?;
        check_len("new latent vector", self.data.n, z_new.len())?;
        let n = self.data.n as f64;
        let nj = n * self.data.j as f64;
        let mut acc = [0.0; 7];
        for i in distinct(changed) {
            let (old, new) = (&z_prev[i], &z_new[i]);
            if old == new {
                continue;
            }
            for l in 0..3 {
                acc[l] += new.phi[l] - old.phi[l];
                acc[l + 3] += new.phi[l] * new.phi[l] - old.phi[l] * old.phi[l];
            }
            acc[6] += new.rss - old.rss;
        }
        for l in 0..6 {
            stat.0[l] += acc[l] / n;
        }
        stat.0[6] += acc[6] / nj;
        Ok(())
    }

    fn prepare_candidate(&self, i: usize, candidate: &mut PkIndividual) {
        candidate.rss = self.rss(i, &candidate.phi);
    }

    fn component_log_posterior_ratio(
        &self,
        z: &[PkIndividual],
        i: usize,
        candidate: &PkIndividual,
        theta: &PkTheta,
    ) -> Result<f64, ModelError> {
        let cur = &z[i];
        let mut lr = -(candidate.rss - cur.rss) / (2.0 * theta.sigma2);
        for l in 0..3 {
            let m = theta.mu[l].ln();
            lr -= ((candidate.phi[l] - m).powi(2) - (cur.phi[l] - m).powi(2)) / (2.0 * theta.omega2[l]);
        }
        if lr.is_nan() {
            return Err(ModelError::NonFinite { component: i });
        }
        Ok(lr)
    }

    fn m_step(&self, s: &SuffStat, _warm: &PkTheta) -> Result<MStep<PkTheta>, ModelError> {
        check_len("statistic", 7, s.len())?;
        if !s.is_finite() {
            return Err(ModelError::Inadmissible(format!("non-finite PK statistic {:?}", s.0)));
        }
        let mut clamped = 0;
        let mut floor = |v: f64| {
            if v < VARIANCE_FLOOR {
                clamped += 1;
                VARIANCE_FLOOR
            } else {
                v
            }
        };
        let omega2 = [0, 1, 2].map(|l| floor(s.0[l + 3] - s.0[l] * s.0[l]));
        let sigma2 = floor(s.0[6]);
        Ok(MStep {
            theta: PkTheta {
                mu: [s.0[0].exp(), s.0[1].exp(), s.0[2].exp()],
                omega2,
                sigma2,
            },
            clamped,
        })
    }

    fn sample_latent(&self, theta: &PkTheta, rng: &mut RngStream) -> Vec<PkIndividual> {
        (0..self.data.n)
            .map(|i| {
                let phi = [0, 1, 2].map(|l| theta.mu[l].ln() + theta.omega2[l].sqrt() * rng.std_normal());
                self.individual(i, phi)
            })
            .collect()
    }

    fn complete_log_likelihood(&self, z: &[PkIndividual], theta: &PkTheta) -> Result<f64, ModelError> {
        check_len("latent vector", self.data.n, z.len())?;
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let mut ll = 0.0;
        for (i, zi) in z.iter().enumerate() {
            for l in 0..3 {
                let dev = zi.phi[l] - theta.mu[l].ln();
                ll += -0.5 * (ln2pi + theta.omega2[l].ln()) - dev * dev / (2.0 * theta.omega2[l]);
            }
            let rss = self.rss(i, &zi.phi);
            ll += -0.5 * self.data.j as f64 * (ln2pi + theta.sigma2.ln()) - rss / (2.0 * theta.sigma2);
            if !ll.is_finite() {
                return Err(ModelError::NonFinite { component: i });
            }
        }
        Ok(ll)
    }

    /// `(log μ, log ω², log σ²)`.
    fn free_coordinates(&self, theta: &PkTheta) -> Vec<f64> {
        self.theta_to_vec(theta).into_iter().map(f64::ln).collect()
    }

    fn surrogate_objective(&self, s: &SuffStat, free: &[f64]) -> f64 {
        if free.iter().any(|v| !v.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let n = self.data.n as f64;
        let nj = n * self.data.j as f64;
        let mut l = 0.0;
        for c in 0..3 {
            let m = free[c];
            let w = free[c + 3].exp();
            // s4 - 2 s1 m + m², arranged to keep the cancellation in one place
            let q = (s.0[c + 3] - s.0[c] * s.0[c]) + (s.0[c] - m).powi(2);
            l += -0.5 * n * free[c + 3] - n * q / (2.0 * w);
        }
        l + -0.5 * nj * free[6] - nj * s.0[6] / (2.0 * free[6].exp())
    }
}

/// Distinct indices of `changed`, in order of first appearance.
pub(crate) fn distinct(changed: &[usize]) -> Vec<usize> {
    if changed.windows(2).all(|w| w[0] < w[1]) {
        return changed.to_vec();
    }
    let mut v = changed.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// CSV with header `i,j,t,y,d` (0-based indices), one row per observation.
pub fn write_csv<W: Write>(mut w: W, data: &PkData) -> Result<(), DataError> {
    writeln!(w, "i,j,t,y,d")?;
    for i in 0..data.n {
        for j in 0..data.j {
            writeln!(w, "{},{},{:e},{:e},{:e}", i, j, data.t(i, j), data.y(i, j), data.dose(i))?;
        }
    }
    Ok(())
}

pub fn read_csv<R: BufRead>(r: R) -> Result<PkData, DataError> {
    let mut rows = Vec::new();
    for (k, l) in content_lines(r).enumerate() {
        let (no, line) = l?;
        if k == 0 && line.trim_start().starts_with('i') {
            continue;
        }
        let mut f = line.split(',');
        let i: usize = parse_field(f.next(), no, "i")?;
        let j: usize = parse_field(f.next(), no, "j")?;
        let t: f64 = parse_field(f.next(), no, "t")?;
        let y: f64 = parse_field(f.next(), no, "y")?;
        let d: f64 = parse_field(f.next(), no, "d")?;
        rows.push((i, j, t, y, d));
    }
    let n = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let jn = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
    if rows.len() != n * jn {
        return Err(DataError::Invalid(format!(
            "expected a complete {n} × {jn} grid, found {} rows",
            rows.len()
        )));
    }
    let (mut y, mut t, mut d) = (vec![f64::NAN; n * jn], vec![f64::NAN; n * jn], vec![f64::NAN; n]);
    for (i, j, ti, yi, di) in rows {
        y[i * jn + j] = yi;
        t[i * jn + j] = ti;
        d[i] = di;
    }
    PkData::new(n, jn, y, t, d).map_err(|e| DataError::Invalid(e.to_string()))
}
