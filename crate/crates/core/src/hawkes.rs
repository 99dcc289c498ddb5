//! Multivariate linear Hawkes process with exponential kernels.
//!
//! The intensity of dimension `k` is
//!
//! ```text
//! λ_k(t) = μ_k + Σ_l Σ_{s ∈ events(l), s < t} α_kl · exp(-β_kl (t - s))
//! ```
//!
//! With exponential kernels the double sum is carried as a `dim × dim`
//! excitation matrix that decays in closed form between events, so the
//! intensity at any time is available in `O(dim²)` without replaying history.
//! Simulation uses Ogata's modified thinning: intensities only decay between
//! arrivals, so the total intensity at the current time dominates the process
//! until the next accepted event.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const POWER_ITER_TOL: f64 = 1e-10;
const POWER_ITER_CAP: usize = 10_000;

/// Who caused an arrival.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Market,
    Agent,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Market => "market",
            Source::Agent => "agent",
        }
    }
}

/// One arrival of one dimension of the counting process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawEvent {
    pub time: f64,
    pub dim: usize,
    pub source: Source,
}

/// Validated process parameters. Matrices are row-major, `alpha[k * dim + l]`
/// is the jump in `λ_k` caused by an event in dimension `l`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HawkesParams {
    dim: usize,
    mu: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl HawkesParams {
    /// Builds and validates a parameter set, rejecting negative entries,
    /// non-positive decays under a positive excitation, and non-stationary
    /// branching matrices.
    pub fn new(mu: Vec<f64>, alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        let params = Self::new_unchecked_stability(mu, alpha, beta)?;
        let radius = params.spectral_radius();
        if !(radius < 1.0) {
            return Err(Error::Unstable { radius });
        }
        Ok(params)
    }

    /// Like [`HawkesParams::new`] but skips the stationarity gate. Used to
    /// inspect explosive parameter sets.
    pub fn new_unchecked_stability(mu: Vec<f64>, alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        let dim = mu.len();
        if dim == 0 {
            return Err(Error::config("hawkes.mu", "must have at least one dimension"));
        }
        if alpha.len() != dim * dim {
            return Err(Error::config(
                "hawkes.alpha",
                format!("expected {dim}x{dim} entries, got {}", alpha.len()),
            ));
        }
        if beta.len() != dim * dim {
            return Err(Error::config(
                "hawkes.beta",
                format!("expected {dim}x{dim} entries, got {}", beta.len()),
            ));
        }
        if let Some(k) = mu.iter().position(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::config(format!("hawkes.mu[{k}]"), "must be finite and >= 0"));
        }
        for i in 0..dim * dim {
            let (k, l) = (i / dim, i % dim);
            if !(alpha[i].is_finite() && alpha[i] >= 0.0) {
                return Err(Error::config(
                    format!("hawkes.alpha[{k}][{l}]"),
                    "must be finite and >= 0",
                ));
            }
            if alpha[i] > 0.0 && !(beta[i].is_finite() && beta[i] > 0.0) {
                return Err(Error::config(
                    format!("hawkes.beta[{k}][{l}]"),
                    "must be > 0 where alpha > 0",
                ));
            }
            if !(beta[i].is_finite() && beta[i] >= 0.0) {
                return Err(Error::config(
                    format!("hawkes.beta[{k}][{l}]"),
                    "must be finite and >= 0",
                ));
            }
        }
        Ok(Self {
            dim,
            mu,
            alpha,
            beta,
        })
    }

    /// Independent Poisson streams with the given rates.
    pub fn poisson(mu: Vec<f64>) -> Result<Self> {
        let dim = mu.len();
        Self::new(mu, vec![0.0; dim * dim], vec![1.0; dim * dim])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_at(&self, k: usize, l: usize) -> f64 {
        self.alpha[k * self.dim + l]
    }

    pub fn beta_at(&self, k: usize, l: usize) -> f64 {
        self.beta[k * self.dim + l]
    }

    /// Returns a copy with replaced baseline intensities, re-running the full
    /// validation.
    pub fn with_mu(&self, mu: Vec<f64>) -> Result<Self> {
        if mu.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: mu.len(),
            });
        }
        Self::new(mu, self.alpha.clone(), self.beta.clone())
    }

    /// `A[k][l] = α_kl / β_kl`, the expected number of direct dimension-`k`
    /// offspring of one dimension-`l` event.
    pub fn branching_matrix(&self) -> Vec<f64> {
        self.alpha
            .iter()
            .zip(&self.beta)
            .map(|(&a, &b)| if a == 0.0 { 0.0 } else { a / b })
            .collect()
    }

    pub fn spectral_radius(&self) -> f64 {
        spectral_radius(&self.branching_matrix(), self.dim)
    }

    /// Stationary mean intensity `(I - A)^{-1} μ`.
    pub fn stationary_rates(&self) -> Result<Vec<f64>> {
        let n = self.dim;
        let a = self.branching_matrix();
        let mut m: Vec<f64> = (0..n * n)
            .map(|i| if i / n == i % n { 1.0 } else { 0.0 } - a[i])
            .collect();
        let mut rhs = self.mu.clone();
        solve_in_place(&mut m, &mut rhs, n)?;
        Ok(rhs)
    }
}

/// Spectral radius of a non-negative `n × n` row-major matrix.
///
/// Power iteration on `A + I`, whose Perron root is `ρ(A) + 1` and which is
/// aperiodic, so periodic or reducible `A` still converge. Iterates stay
/// strictly positive, which keeps the Collatz-Wielandt bracket
/// `min_i (Bv)_i / v_i ≤ ρ(B) ≤ max_i (Bv)_i / v_i` valid; iteration stops
/// once the bracket is narrower than the tolerance.
pub fn spectral_radius(matrix: &[f64], n: usize) -> f64 {
    assert_eq!(matrix.len(), n * n, "matrix must be n x n");
    let mut v = vec![1.0; n];
    let mut w = vec![0.0; n];
    let mut estimate = 1.0;
    for _ in 0..POWER_ITER_CAP {
        for i in 0..n {
            let row = &matrix[i * n..(i + 1) * n];
            w[i] = v[i] + row.iter().zip(&v).map(|(a, x)| a * x).sum::<f64>();
        }
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..n {
            let r = w[i] / v[i];
            lo = lo.min(r);
            hi = hi.max(r);
        }
        estimate = 0.5 * (lo + hi);
        let norm = w.iter().cloned().fold(0.0, f64::max);
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
        if hi - lo < POWER_ITER_TOL {
            break;
        }
    }
    (estimate - 1.0).max(0.0)
}

/// Gaussian elimination with partial pivoting; overwrites `rhs` with the
/// solution.
fn solve_in_place(m: &mut [f64], rhs: &mut [f64], n: usize) -> Result<()> {
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&a, &b| m[a * n + col].abs().total_cmp(&m[b * n + col].abs()))
            .expect("non-empty range");
        if m[pivot * n + col].abs() < 1e-14 {
            return Err(Error::InvalidArgument("singular system".into()));
        }
        if pivot != col {
            for j in 0..n {
                m.swap(pivot * n + j, col * n + j);
            }
            rhs.swap(pivot, col);
        }
        for row in col + 1..n {
            let f = m[row * n + col] / m[col * n + col];
            if f != 0.0 {
                for j in col..n {
                    m[row * n + j] -= f * m[col * n + j];
                }
                rhs[row] -= f * rhs[col];
            }
        }
    }
    for row in (0..n).rev() {
        let mut acc = rhs[row];
        for j in row + 1..n {
            acc -= m[row * n + j] * rhs[j];
        }
        rhs[row] = acc / m[row * n + row];
    }
    Ok(())
}

/// Markovian state of the process: current time, the decayed excitation
/// matrix and cumulative counts.
#[derive(Debug, Clone, PartialEq)]
pub struct HawkesState {
    t: f64,
    dim: usize,
    excitation: Vec<f64>,
    counts: Vec<u64>,
}

impl HawkesState {
    pub fn new(params: &HawkesParams) -> Self {
        Self::at(params, 0.0)
    }

    pub fn at(params: &HawkesParams, t: f64) -> Self {
        let dim = params.dim();
        Self {
            t,
            dim,
            excitation: vec![0.0; dim * dim],
            counts: vec![0; dim],
        }
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `excitation[k * dim + l]`: the part of `λ_k` due to past `l` events.
    pub fn excitation(&self) -> &[f64] {
        &self.excitation
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    fn check(&self, params: &HawkesParams) -> Result<()> {
        if params.dim() != self.dim {
            return Err(Error::Dimension {
                expected: params.dim(),
                got: self.dim,
            });
        }
        Ok(())
    }

    /// Intensity vector at the current time.
    pub fn intensity(&self, params: &HawkesParams) -> Result<Vec<f64>> {
        self.check(params)?;
        let mut out = vec![0.0; self.dim];
        self.intensity_into(params, &mut out);
        Ok(out)
    }

    fn intensity_into(&self, params: &HawkesParams, out: &mut [f64]) -> f64 {
        let n = self.dim;
        let mut total = 0.0;
        for (k, slot) in out.iter_mut().enumerate() {
            let lam = params.mu[k] + self.excitation[k * n..(k + 1) * n].iter().sum::<f64>();
            *slot = lam;
            total += lam;
        }
        total
    }

    /// Moves time forward by `dt`, decaying every excitation entry by
    /// `exp(-β_kl dt)`.
    pub fn advance(&mut self, params: &HawkesParams, dt: f64) -> Result<()> {
        self.check(params)?;
        if !(dt >= 0.0) {
            return Err(Error::InvalidArgument(format!("negative advance dt={dt}")));
        }
        self.decay(params, dt);
        Ok(())
    }

    fn decay(&mut self, params: &HawkesParams, dt: f64) {
        if dt == 0.0 {
            return;
        }
        for (e, b) in self.excitation.iter_mut().zip(&params.beta) {
            if *e != 0.0 {
                *e *= (-b * dt).exp();
            }
        }
        self.t += dt;
    }

    /// Records an externally generated event in dimension `dim` at `time`.
    pub fn inject_event(&mut self, params: &HawkesParams, dim: usize, time: f64) -> Result<()> {
        self.check(params)?;
        if dim >= self.dim {
            return Err(Error::InvalidArgument(format!(
                "dimension {dim} out of range 0..{}",
                self.dim
            )));
        }
        if time < self.t {
            return Err(Error::OutOfOrder { time, now: self.t });
        }
        self.decay(params, time - self.t);
        self.t = time;
        self.record(params, dim);
        Ok(())
    }

    fn record(&mut self, params: &HawkesParams, dim: usize) {
        let n = self.dim;
        for k in 0..n {
            self.excitation[k * n + dim] += params.alpha[k * n + dim];
        }
        self.counts[dim] += 1;
    }

    /// Draws the next market event before `t_max` by Ogata thinning, records
    /// it in the state and returns it. Returns `None` (with the state moved to
    /// `t_max`) when no candidate is accepted in time.
    pub fn next_event<R: Rng + ?Sized>(
        &mut self,
        params: &HawkesParams,
        rng: &mut R,
        t_max: f64,
    ) -> Result<Option<RawEvent>> {
        self.check(params)?;
        if self.t > t_max {
            return Err(Error::InvalidArgument(format!(
                "state time {} is past horizon {t_max}",
                self.t
            )));
        }
        let mut lam = vec![0.0; self.dim];
        let mut bound = self.intensity_into(params, &mut lam);
        loop {
            if bound <= 0.0 {
                self.decay(params, t_max - self.t);
                self.t = t_max;
                return Ok(None);
            }
            let u: f64 = rng.random();
            let wait = -(1.0 - u).ln() / bound;
            let candidate = self.t + wait;
            if candidate >= t_max {
                self.decay(params, t_max - self.t);
                self.t = t_max;
                return Ok(None);
            }
            self.decay(params, wait);
            self.t = candidate;
            let total = self.intensity_into(params, &mut lam);
            let accept: f64 = rng.random();
            if accept * bound <= total {
                let pick = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut dim = self.dim - 1;
                for (k, l) in lam.iter().enumerate() {
                    acc += l;
                    if pick < acc {
                        dim = k;
                        break;
                    }
                }
                // Guard against round-off selecting a zero-intensity tail.
                while lam[dim] == 0.0 && dim > 0 {
                    dim -= 1;
                }
                self.record(params, dim);
                return Ok(Some(RawEvent {
                    time: candidate,
                    dim,
                    source: Source::Market,
                }));
            }
            bound = total;
        }
    }
}

/// Convenience wrapper returning the intensity vector.
pub fn intensity(params: &HawkesParams, state: &HawkesState) -> Result<Vec<f64>> {
    state.intensity(params)
}
