//! Directed stochastic block model.
//!
//! Nodes carry latent block labels `z_i ∈ {0, .., Q-1}` drawn i.i.d. from
//! `p`; each ordered pair `(i, j)`, `i ≠ j`, is an edge with probability
//! `ν[z_i][z_j]`. Self-loops are not part of the model: the diagonal of the
//! adjacency matrix is ignored everywhere (simulation, statistics and
//! likelihood).
//!
//! Statistic layout (length `Q + 2Q²`):
//! `[S1 (Q) | S2 (Q×Q, row-major) | S3 (Q×Q, row-major)]` with
//! `S1^q` the block sizes, `S2^{ql}` the edges and `S3^{ql}` the non-edges
//! from block `q` to block `l`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use thiserror::Error;

use crate::datafile::{content_lines, parse_field, DataError};
use crate::kernels::ProposalFamily;
use crate::model::{check_len, log_diff, xlogy, LatentModel, MStep, ModelError, ParamDomain, ParamSpec, SuffStat};
use crate::rng::RngStream;

/// Adjacency matrix stored row-major and column-major for O(n) access to
/// both the out- and in-neighbourhood of a node.
#[derive(Clone, Debug, PartialEq)]
pub struct SbmData {
    n: usize,
    rows: Vec<u8>,
    cols: Vec<u8>,
}

impl SbmData {
    /// Build from a dense `n × n` 0/1 matrix (row-major); the diagonal is dropped.
    pub fn from_dense(n: usize, adjacency: &[u8]) -> Result<Self, ModelError> {
        check_len("adjacency", n * n, adjacency.len())?;
        let mut rows = vec![0u8; n * n];
        let mut cols = vec![0u8; n * n];
        for i in 0..n {
            for j in 0..n {
                let y = adjacency[i * n + j];
                if y > 1 {
                    return Err(ModelError::InvalidParameter(format!(
                        "adjacency entry ({i}, {j}) = {y} is not binary"
                    )));
                }
                if i != j && y == 1 {
                    rows[i * n + j] = 1;
                    cols[j * n + i] = 1;
                }
            }
        }
        Ok(Self { n, rows, cols })
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, ModelError> {
        let mut dense = vec![0u8; n * n];
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(ModelError::InvalidParameter(format!("edge ({i}, {j}) outside 0..{n}")));
            }
            dense[i * n + j] = 1;
        }
        Self::from_dense(n, &dense)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn edge(&self, i: usize, j: usize) -> bool {
        self.rows[i * self.n + j] == 1
    }

    /// Out-neighbourhood row `i` (`y_{i,·}`).
    #[inline]
    fn row(&self, i: usize) -> &[u8] {
        &self.rows[i * self.n..(i + 1) * self.n]
    }

    /// In-neighbourhood column `j` (`y_{·,j}`).
    #[inline]
    fn col(&self, j: usize) -> &[u8] {
        &self.cols[j * self.n..(j + 1) * self.n]
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in 0..self.n {
                if self.edge(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.rows.iter().map(|&y| y as usize).sum()
    }
}

/// `θ = (p, ν)`, with log-probabilities cached for the Metropolis ratios.
#[derive(Clone, Debug, PartialEq)]
pub struct SbmTheta {
    p: Vec<f64>,
    nu: Vec<f64>,
    log_p: Vec<f64>,
    log_nu: Vec<f64>,
    log_1m_nu: Vec<f64>,
}

impl SbmTheta {
    /// `p` must lie on the simplex (tolerance 1e-9, renormalized) and every
    /// `ν` in `[0, 1]`; `nu` is `Q×Q` row-major.
    pub fn new(p: Vec<f64>, nu: Vec<f64>) -> Result<Self, ModelError> {
        let q = p.len();
        if q == 0 {
            return Err(ModelError::InvalidParameter("SBM needs at least one block".into()));
        }
        check_len("nu", q * q, nu.len())?;
        if p.iter().any(|&x| !(0.0..=1.0 + 1e-12).contains(&x) || !x.is_finite()) {
            return Err(ModelError::InvalidParameter(format!("p = {p:?} is not a probability vector")));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(ModelError::InvalidParameter(format!("p sums to {total}, not 1")));
        }
        if nu.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(ModelError::InvalidParameter(format!("nu = {nu:?} outside [0, 1]")));
        }
        let p: Vec<f64> = p.iter().map(|x| x / total).collect();
        Ok(Self {
            log_p: p.iter().map(|x| x.ln()).collect(),
            log_nu: nu.iter().map(|x| x.ln()).collect(),
            log_1m_nu: nu.iter().map(|x| (-x).ln_1p()).collect(),
            p,
            nu,
        })
    }

    /// The two-block setting used throughout the experiments:
    /// `p = (0.6, 0.4)`, `ν = [[0.25, 0.1], [0.1, 0.2]]`.
    pub fn reference() -> Self {
        Self::new(vec![0.6, 0.4], vec![0.25, 0.1, 0.1, 0.2]).expect("valid reference parameters")
    }

    pub fn q(&self) -> usize {
        self.p.len()
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn nu(&self, q: usize, l: usize) -> f64 {
        self.nu[q * self.q() + l]
    }

    pub fn nu_matrix(&self) -> &[f64] {
        &self.nu
    }
}

#[derive(Clone, Debug)]
pub struct SbmModel {
    data: SbmData,
    q: usize,
    proposal: ProposalFamily,
}

/// `c * log_v` with `0 * (-∞) = 0`.
#[inline]
fn xl(c: u32, log_v: f64) -> f64 {
    if c == 0 {
        0.0
    } else {
        c as f64 * log_v
    }
}

impl SbmModel {
    pub fn new(data: SbmData, q: usize) -> Result<Self, ModelError> {
        Ok(Self {
            proposal: ProposalFamily::uniform_labels(q)?,
            data,
            q,
        })
    }

    pub fn data(&self) -> &SbmData {
        &self.data
    }

    pub fn q(&self) -> usize {
        self.q
    }

    fn check_labels(&self, z: &[usize]) -> Result<(), ModelError> {
        check_len("latent labels", self.data.n, z.len())?;
        if let Some(&bad) = z.iter().find(|&&l| l >= self.q) {
            return Err(ModelError::InvalidParameter(format!("label {bad} outside 0..{}", self.q)));
        }
        Ok(())
    }

    /// `S3^{ql} = n_q n_l - δ_{ql} n_q - S2^{ql}` from block sizes and edge counts.
    fn fill_non_edges(&self, s: &mut [f64]) {
        let q = self.q;
        let (s1, rest) = s.split_at_mut(q);
        let (s2, s3) = rest.split_at_mut(q * q);
        for a in 0..q {
            for b in 0..q {
                let pairs = s1[a] * s1[b] - if a == b { s1[a] } else { 0.0 };
                s3[a * q + b] = pairs - s2[a * q + b];
            }
        }
    }

    /// In-place incremental update; returns the number of adjacency cells
    /// visited (`2mn - m² - m` for `m` distinct changed nodes, the diagonal
    /// being excluded).
    pub fn update_statistic_counted(
        &self,
        stat: &mut SuffStat,
        z_prev: &[usize],
        z_new: &[usize],
        changed: &[usize],
    ) -> Result<usize, ModelError> {
        let n = self.data.n;
        let q = self.q;
        check_len("statistic", self.statistic_dim(), stat.len())?;
        check_len("previous labels", n, z_prev.len())?;
        check_len("new labels", n, z_new.len())?;
        if changed.is_empty() {
            return Ok(0);
        }
        // `pair[j] = z_prev[j] * q + z_new[j]`; `outside[j]` is the label of
        // an unchanged node and `q` for a changed one
        let mut outside: Vec<usize> = z_new.to_vec();
        let mut set = Vec::with_capacity(changed.len());
        for &i in changed {
            if i >= n {
                return Err(ModelError::Dimension {
                    what: "changed index",
                    expected: n,
                    got: i,
                });
            }
            if outside[i] != q {
                outside[i] = q;
                set.push(i);
            }
        }
        let pair: Vec<usize> = z_prev.iter().zip(z_new).map(|(&a, &b)| a * q + b).collect();

        let s = &mut stat.0;
        for &i in &set {
            s[z_prev[i]] -= 1.0;
            s[z_new[i]] += 1.0;
        }

        let mut d2 = vec![0i64; q * q];
        let mut by_pair = vec![0i64; q * q];
        let mut by_label = vec![0i64; q];
        let mut visited = 0usize;
        // rows of changed nodes: every j ≠ i (the diagonal is stored as 0)
        for &i in &set {
            by_pair.fill(0);
            for (&y, &c) in self.data.row(i).iter().zip(&pair) {
                by_pair[c] += y as i64;
            }
            let (a_old, a_new) = (z_prev[i] * q, z_new[i] * q);
            for b_old in 0..q {
                for b_new in 0..q {
                    let y = by_pair[b_old * q + b_new];
                    d2[a_old + b_old] -= y;
                    d2[a_new + b_new] += y;
                }
            }
            visited += n - 1;
        }
        // columns of changed nodes, skipping rows already handled above
        let rest: Vec<usize> = (0..n).filter(|&i| outside[i] != q).collect();
        for &j in &set {
            by_label.fill(0);
            let col = self.data.col(j);
            for &i in &rest {
                by_label[outside[i]] += col[i] as i64;
            }
            let (b_old, b_new) = (z_prev[j], z_new[j]);
            for a in 0..q {
                d2[a * q + b_old] -= by_label[a];
                d2[a * q + b_new] += by_label[a];
            }
            visited += n - set.len();
        }
        for (dst, d) in s[q..q + q * q].iter_mut().zip(&d2) {
            *dst += *d as f64;
        }
        self.fill_non_edges(s);
        Ok(visited)
    }

    /// Sample a dataset and its true labels.
    pub fn simulate(theta: &SbmTheta, n: usize, rng: &mut RngStream) -> Result<(SbmData, Vec<usize>), ModelError> {
        if n < 2 {
            return Err(ModelError::InvalidDesign(format!("SBM needs at least 2 nodes, got {n}")));
        }
        let z: Vec<usize> = (0..n).map(|_| rng.categorical(theta.p())).collect();
        let mut dense = vec![0u8; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j && rng.bernoulli(theta.nu(z[i], z[j])) {
                    dense[i * n + j] = 1;
                }
            }
        }
        Ok((SbmData::from_dense(n, &dense)?, z))
    }

    /// Relabel blocks of `theta` and `z` so that `theta` is closest (in
    /// squared distance of the parameter vector) to `reference`.
    pub fn best_permutation(&self, theta: &SbmTheta, reference: &SbmTheta) -> Vec<usize> {
        let q = self.q;
        let mut best = (f64::INFINITY, (0..q).collect::<Vec<_>>());
        for perm in permutations(q) {
            let permuted = permute_theta(theta, &perm);
            let d: f64 = self
                .theta_to_vec(&permuted)
                .iter()
                .zip(self.theta_to_vec(reference))
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            if d < best.0 {
                best = (d, perm);
            }
        }
        best.1
    }
}

/// `perm[new] = old`: block `new` of the result is block `old` of `theta`.
pub fn permute_theta(theta: &SbmTheta, perm: &[usize]) -> SbmTheta {
    let q = theta.q();
    let p = perm.iter().map(|&o| theta.p[o]).collect();
    let mut nu = vec![0.0; q * q];
    for a in 0..q {
        for b in 0..q {
            nu[a * q + b] = theta.nu(perm[a], perm[b]);
        }
    }
    SbmTheta::new(p, nu).expect("permutation preserves validity")
}

fn permutations(q: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; q], &mut out);
    out
}

impl LatentModel for SbmModel {
    type Component = usize;
    type Theta = SbmTheta;

    fn name(&self) -> &'static str {
        "sbm"
    }

    fn latent_dim(&self) -> usize {
        self.data.n
    }

    fn statistic_dim(&self) -> usize {
        self.q + 2 * self.q * self.q
    }

    fn param_descriptor(&self) -> Vec<ParamSpec> {
        let mut out: Vec<ParamSpec> = (1..=self.q)
            .map(|a| ParamSpec::new(format!("p_{a}"), ParamDomain::Simplex))
            .collect();
        for a in 1..=self.q {
            for b in 1..=self.q {
                out.push(ParamSpec::new(format!("nu_{a}{b}"), ParamDomain::Probability));
            }
        }
        out
    }

    fn theta_to_vec(&self, theta: &SbmTheta) -> Vec<f64> {
        theta.p.iter().chain(&theta.nu).copied().collect()
    }

    fn theta_from_vec(&self, v: &[f64]) -> Result<SbmTheta, ModelError> {
        check_len("parameter vector", self.q + self.q * self.q, v.len())?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::InvalidParameter(format!("non-finite parameter vector {v:?}")));
        }
        let p = &v[..self.q];
        if p.iter().any(|&x| x < 0.0) {
            return Err(ModelError::InvalidParameter(format!("negative block probability in {p:?}")));
        }
        let total: f64 = p.iter().sum();
        if total <= 0.0 {
            return Err(ModelError::InvalidParameter("block probabilities sum to zero".into()));
        }
        SbmTheta::new(p.iter().map(|x| x / total).collect(), v[self.q..].to_vec())
    }

    fn proposal(&self) -> &ProposalFamily {
        &self.proposal
    }

    fn full_statistic(&self, z: &[usize]) -> Result<SuffStat, ModelError> {
        self.check_labels(z)?;
        let (n, q) = (self.data.n, self.q);
        let mut s = vec![0.0; self.statistic_dim()];
        for &l in z {
            s[l] += 1.0;
        }
        let mut s2 = vec![0u64; q * q];
        for i in 0..n {
            let row = self.data.row(i);
            let a = z[i] * q;
            for j in 0..n {
                // diagonal entries are stored as 0
                s2[a + z[j]] += row[j] as u64;
            }
        }
        for (dst, c) in s[q..q + q * q].iter_mut().zip(&s2) {
            *dst = *c as f64;
        }
        self.fill_non_edges(&mut s);
        Ok(SuffStat(s))
    }

    fn update_statistic(
        &self,
        stat: &mut SuffStat,
        z_prev: &[usize],
        z_new: &[usize],
        changed: &[usize],
    ) -> Result<(), ModelError> {
        self.update_statistic_counted(stat, z_prev, z_new, changed).map(|_| ())
    }

    fn component_log_posterior_ratio(
        &self,
        z: &[usize],
        i: usize,
        candidate: &usize,
        theta: &SbmTheta,
    ) -> Result<f64, ModelError> {
        let (n, q) = (self.data.n, self.q);
        let (a, b) = (z[i], *candidate);
        if a == b {
            return Ok(0.0);
        }
        let mut cnt = vec![0u32; q];
        let mut out = vec![0u32; q];
        let mut inn = vec![0u32; q];
        let (row, col) = (self.data.row(i), self.data.col(i));
        for j in 0..n {
            let l = z[j];
            cnt[l] += 1;
            out[l] += row[j] as u32;
            inn[l] += col[j] as u32;
        }
        cnt[a] -= 1; // node i itself

        let terms = |c: usize| -> f64 {
            let mut acc = theta.log_p[c];
            for l in 0..q {
                acc += xl(out[l], theta.log_nu[c * q + l]) + xl(cnt[l] - out[l], theta.log_1m_nu[c * q + l]);
                acc += xl(inn[l], theta.log_nu[l * q + c]) + xl(cnt[l] - inn[l], theta.log_1m_nu[l * q + c]);
            }
            acc
        };
        log_diff(terms(b), terms(a)).ok_or(ModelError::NonFinite { component: i })
    }

    fn m_step(&self, s: &SuffStat, _warm: &SbmTheta) -> Result<MStep<SbmTheta>, ModelError> {
        check_len("statistic", self.statistic_dim(), s.len())?;
        if !s.is_finite() {
            return Err(ModelError::Inadmissible("non-finite SBM statistic".into()));
        }
        let q = self.q;
        let n = self.data.n as f64;
        let mut clamped = 0u32;
        let mut p: Vec<f64> = s.0[..q].iter().map(|&c| c / n).collect();
        for x in p.iter_mut() {
            if *x < 0.0 {
                *x = 0.0;
                clamped += 1;
            }
        }
        let total: f64 = p.iter().sum();
        if total <= 0.0 {
            return Err(ModelError::Inadmissible("all block sizes are zero".into()));
        }
        p.iter_mut().for_each(|x| *x /= total);
        let mut nu = vec![0.0; q * q];
        for (idx, v) in nu.iter_mut().enumerate() {
            let (e, ne) = (s.0[q + idx].max(0.0), s.0[q + q * q + idx].max(0.0));
            let den = e + ne;
            if den <= 0.0 {
                // no pair observed between these blocks
                *v = 0.5;
                clamped += 1;
            } else {
                *v = (e / den).clamp(0.0, 1.0);
            }
        }
        Ok(MStep {
            theta: SbmTheta::new(p, nu)?,
            clamped,
        })
    }

    fn sample_latent(&self, theta: &SbmTheta, rng: &mut RngStream) -> Vec<usize> {
        (0..self.data.n).map(|_| rng.categorical(theta.p())).collect()
    }

    fn complete_log_likelihood(&self, z: &[usize], theta: &SbmTheta) -> Result<f64, ModelError> {
        self.check_labels(z)?;
        let n = self.data.n;
        let mut ll: f64 = z.iter().map(|&l| theta.log_p[l]).sum();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let idx = z[i] * self.q + z[j];
                ll += if self.data.edge(i, j) {
                    theta.log_nu[idx]
                } else {
                    theta.log_1m_nu[idx]
                };
            }
        }
        if ll.is_nan() {
            return Err(ModelError::NonFinite { component: 0 });
        }
        Ok(ll)
    }

    fn free_coordinates(&self, theta: &SbmTheta) -> Vec<f64> {
        theta.p[..self.q - 1].iter().chain(&theta.nu).copied().collect()
    }

    fn surrogate_objective(&self, s: &SuffStat, free: &[f64]) -> f64 {
        let q = self.q;
        let mut p: Vec<f64> = free[..q - 1].to_vec();
        p.push(1.0 - p.iter().sum::<f64>());
        let nu = &free[q - 1..];
        if p.iter().any(|&x| x < 0.0) || nu.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return f64::NEG_INFINITY;
        }
        let mut l = 0.0;
        for a in 0..q {
            l += xlogy(s.0[a], p[a]);
        }
        for idx in 0..q * q {
            l += xlogy(s.0[q + idx], nu[idx]) + xlogy(s.0[q + q * q + idx], 1.0 - nu[idx]);
        }
        l
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AriError {
    #[error("label vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("at least two items are needed, got {0}")]
    TooShort(usize),
}

fn choose2(x: u64) -> f64 {
    (x * x.saturating_sub(1)) as f64 / 2.0
}

/// Hubert-Arabie adjusted Rand index between two labelings.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64, AriError> {
    if a.len() != b.len() {
        return Err(AriError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(AriError::TooShort(a.len()));
    }
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| choose2(c)).sum();
    let total = choose2(a.len() as u64);
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        // both partitions trivial (all singletons or one block) and equal in kind
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Edge-list file: a header line `n Q`, then one `i j` (0-based) per edge.
pub fn write_edge_list<W: Write>(mut w: W, data: &SbmData, q: usize) -> Result<(), DataError> {
    writeln!(w, "{} {}", data.n, q)?;
    for (i, j) in data.edges() {
        writeln!(w, "{i} {j}")?;
    }
    Ok(())
}

pub fn read_edge_list<R: BufRead>(r: R) -> Result<(SbmData, usize), DataError> {
    let mut lines = content_lines(r);
    let (no, header) = lines
        .next()
        .ok_or_else(|| DataError::Invalid("empty edge-list file".into()))??;
    let mut h = header.split_whitespace();
    let n: usize = parse_field(h.next(), no, "n")?;
    let q: usize = parse_field(h.next(), no, "Q")?;
    let mut edges = Vec::new();
    for l in lines {
        let (no, line) = l?;
        let mut f = line.split_whitespace();
        let i: usize = parse_field(f.next(), no, "i")?;
        let j: usize = parse_field(f.next(), no, "j")?;
        if i >= n || j >= n {
            return Err(DataError::Parse {
                line: no,
                msg: format!("edge ({i}, {j}) outside 0..{n}"),
            });
        }
        edges.push((i, j));
    }
    let data = SbmData::from_edges(n, &edges).map_err(|e| DataError::Invalid(e.to_string()))?;
    Ok((data, q))
}
