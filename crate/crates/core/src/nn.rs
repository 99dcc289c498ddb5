//! Small fully-connected networks with hand-written backpropagation.
//!
//! Parameters of an [`Mlp`] live in one flat vector, layer by layer, each
//! layer as its row-major `out × in` weight matrix followed by its bias. The
//! same layout is used for gradients, optimiser moments, target-network
//! averaging and checkpoints.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::env::{quantize_offset, Action, NormStats};
use crate::error::{Error, Result};

pub const HIDDEN: usize = 64;
pub const OBS_DIM: usize = 3;
pub const ACT_DIM: usize = 2;
pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const SQUASH_EPS: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// ReLU multilayer perceptron with a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub batch: usize,
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    pub acts: Vec<Vec<f64>>,
    /// Pre-activations of each layer.
    pub pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("at least one layer")
    }
}

fn n_params_for(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

/// `c = a_op · b_op (+ c if accumulate)` through matrixmultiply with explicit
/// strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides describe matrices fully contained in the slices;
    // every caller passes dense row-major buffers of the stated shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "need input and output sizes");
        Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; n_params_for(sizes)],
        }
    }

    /// Uniform fan-in initialisation, `U(-1/√fan_in, 1/√fan_in)` for weights
    /// and biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        let mut net = Self::zeros(sizes);
        let mut off = 0;
        for w in sizes.windows(2) {
            let (fan_in, out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut net.params[off..off + out * fan_in + out] {
                *p = rng.random_range(-bound..bound);
            }
            off += out * fan_in + out;
        }
        net
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        if sizes.len() < 2 || params.len() != n_params_for(sizes) {
            return Err(Error::Dimension {
                expected: n_params_for(sizes),
                got: params.len(),
            });
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Offset of layer `l`'s weights in the flat parameter vector.
    fn layer_offset(&self, l: usize) -> usize {
        n_params_for(&self.sizes[..=l])
    }

    fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        let off = self.layer_offset(l);
        let (w, rest) = self.params[off..].split_at(o * i);
        (w, &rest[..o])
    }

    /// Forward pass on a row-major `batch × input_dim` matrix.
    pub fn forward(&self, x: &[f64], batch: usize) -> Result<ForwardCache> {
        if x.len() != batch * self.input_dim() {
            return Err(Error::Dimension {
                expected: batch * self.input_dim(),
                got: x.len(),
            });
        }
        let mut acts = Vec::with_capacity(self.sizes.len());
        let mut pre = Vec::with_capacity(self.n_layers());
        acts.push(x.to_vec());
        for l in 0..self.n_layers() {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            let (w, b) = self.layer(l);
            let mut z = Vec::with_capacity(batch * o);
            for _ in 0..batch {
                z.extend_from_slice(b);
            }
            // z += X · Wᵀ
            gemm(batch, i, o, &acts[l], i as isize, 1, w, 1, i as isize, &mut z, true);
            let a = if l + 1 < self.n_layers() {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
            acts.push(a);
        }
        Ok(ForwardCache { batch, acts, pre })
    }

    /// Backward pass for upstream gradient `d_out` (`batch × output_dim`).
    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the input when `want_input` is set.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_out: &[f64],
        grad: &mut [f64],
        want_input: bool,
    ) -> Option<Vec<f64>> {
        assert_eq!(grad.len(), self.params.len());
        self.backward_impl(cache, d_out, Some(grad), want_input)
    }

    /// Gradient with respect to the input only.
    pub fn backward_input(&self, cache: &ForwardCache, d_out: &[f64]) -> Vec<f64> {
        self.backward_impl(cache, d_out, None, true).expect("input gradient")
    }

    fn backward_impl(
        &self,
        cache: &ForwardCache,
        d_out: &[f64],
        mut grad: Option<&mut [f64]>,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let batch = cache.batch;
        let mut delta = d_out.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.layer_offset(l);
            if l + 1 < self.n_layers() {
                for (d, z) in delta.iter_mut().zip(&cache.pre[l]) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            if let Some(grad) = grad.as_deref_mut() {
                let (gw, gb) = grad[off..off + o * i + o].split_at_mut(o * i);
                // dW += δᵀ · X
                gemm(o, batch, i, &delta, 1, o as isize, &cache.acts[l], i as isize, 1, gw, true);
                for row in delta.chunks_exact(o) {
                    for (g, d) in gb.iter_mut().zip(row) {
                        *g += d;
                    }
                }
            }
            if l > 0 || want_input {
                let (w, _) = self.layer(l);
                let mut dx = vec![0.0; batch * i];
                // dX = δ · W
                gemm(batch, o, i, &delta, o as isize, 1, w, i as isize, 1, &mut dx, false);
                delta = dx;
            }
        }
        want_input.then_some(delta)
    }

    /// `self ← τ·source + (1 − τ)·self`.
    pub fn polyak_from(&mut self, source: &Mlp, tau: f64) {
        for (t, s) in self.params.iter_mut().zip(&source.params) {
            *t = tau * s + (1.0 - tau) * *t;
        }
    }
}

/// Actor head output for a batch: means and clamped log standard deviations.
#[derive(Debug, Clone)]
pub struct ActorOutput {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    /// Whether the clamp was active for each log_std entry.
    pub clamped: Vec<bool>,
    pub cache: ForwardCache,
}

pub fn actor_sizes() -> [usize; 4] {
    [OBS_DIM, HIDDEN, HIDDEN, 2 * ACT_DIM]
}

pub fn critic_sizes() -> [usize; 4] {
    [OBS_DIM + ACT_DIM, HIDDEN, HIDDEN, 1]
}

/// Splits the actor network output into means and clamped log-stds.
pub fn actor_forward(actor: &Mlp, obs: &[f64], batch: usize) -> Result<ActorOutput> {
    if actor.output_dim() != 2 * ACT_DIM {
        return Err(Error::Dimension {
            expected: 2 * ACT_DIM,
            got: actor.output_dim(),
        });
    }
    let cache = actor.forward(obs, batch)?;
    let out = cache.output();
    let mut mean = Vec::with_capacity(batch * ACT_DIM);
    let mut log_std = Vec::with_capacity(batch * ACT_DIM);
    let mut clamped = Vec::with_capacity(batch * ACT_DIM);
    for row in out.chunks_exact(2 * ACT_DIM) {
        mean.extend_from_slice(&row[..ACT_DIM]);
        for &ls in &row[ACT_DIM..] {
            clamped.push(!(LOG_STD_MIN..=LOG_STD_MAX).contains(&ls));
            log_std.push(ls.clamp(LOG_STD_MIN, LOG_STD_MAX));
        }
    }
    Ok(ActorOutput {
        mean,
        log_std,
        clamped,
        cache,
    })
}

/// Re-packs mean/log_std gradients into the actor output layout, zeroing
/// log_std entries whose clamp was active.
pub fn actor_output_grad(out: &ActorOutput, d_mean: &[f64], d_log_std: &[f64]) -> Vec<f64> {
    let batch = out.cache.batch;
    let mut g = Vec::with_capacity(batch * 2 * ACT_DIM);
    for b in 0..batch {
        let r = b * ACT_DIM..(b + 1) * ACT_DIM;
        g.extend_from_slice(&d_mean[r.clone()]);
        for i in r {
            g.push(if out.clamped[i] { 0.0 } else { d_log_std[i] });
        }
    }
    g
}

/// A squashed-Gaussian sample for fixed standard-normal noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Squashed {
    pub action: f64,
    pub log_prob: f64,
}

/// `a = tanh(m + σε)` and its log density contribution
/// `log N(u; m, σ) − log(1 − a² + 1e-6)` for one coordinate.
pub fn squash(mean: f64, log_std: f64, eps: f64) -> Squashed {
    let u = mean + log_std.exp() * eps;
    let a = u.tanh();
    let log_prob = -0.5 * eps * eps - log_std - 0.5 * LN_2PI - (1.0 - a * a + SQUASH_EPS).ln();
    Squashed {
        action: a,
        log_prob,
    }
}

/// Chain rule through [`squash`]: given `∂L/∂a` and `∂L/∂logp`, returns
/// `(∂L/∂mean, ∂L/∂log_std)`.
pub fn squash_backward(mean: f64, log_std: f64, eps: f64, d_action: f64, d_log_prob: f64) -> (f64, f64) {
    let sigma = log_std.exp();
    let a = (mean + sigma * eps).tanh();
    let one_m = 1.0 - a * a;
    let d_u = d_action * one_m + d_log_prob * 2.0 * a * one_m / (one_m + SQUASH_EPS);
    (d_u, d_u * sigma * eps - d_log_prob)
}

/// Draws an action in `(−1, 1)^k` with its log-probability. In
/// deterministic mode returns `tanh(mean)` and the log density at `ε = 0`.
pub fn sample_squashed<R: Rng + ?Sized>(
    rng: &mut R,
    mean: &[f64],
    log_std: &[f64],
    deterministic: bool,
) -> (Vec<f64>, f64) {
    let mut action = Vec::with_capacity(mean.len());
    let mut lp = 0.0;
    for (&m, &ls) in mean.iter().zip(log_std) {
        let eps = if deterministic {
            0.0
        } else {
            rng.sample(rand_distr::StandardNormal)
        };
        let s = squash(m, ls, eps);
        let a = s.action.clamp(-1.0 + f64::EPSILON, 1.0 - f64::EPSILON);
        action.push(a);
        lp += s.log_prob;
    }
    (action, lp)
}

/// Maps a squashed action to tick offsets `round(a · A_max)`; the first
/// coordinate drives the ask offset, the second the bid offset.
pub fn map_action(a: &[f64], max_offset_ticks: i32) -> Action {
    let s = max_offset_ticks as f64;
    Action::new(
        quantize_offset(a[0] * s, max_offset_ticks),
        quantize_offset(a[1] * s, max_offset_ticks),
    )
}

const MAGIC: &[u8; 8] = b"MMLABCKP";
const VERSION: u32 = 1;

/// A trained policy: the actor network and the normalisation it expects.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyCheckpoint {
    pub actor: Mlp,
    pub norm: NormStats,
}

impl PolicyCheckpoint {
    /// Binary layout, all integers and floats little-endian:
    /// magic `MMLABCKP`, `u32` version, `u32` layer count `n`, `n × u32`
    /// layer sizes, `u64` parameter count, parameters as `f64`, the four
    /// normalisation statistics as `f64`, then `u32` length and UTF-8 bytes of
    /// the normalisation fingerprint.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let sizes = self.actor.sizes();
        out.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
        for &s in sizes {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.actor.params().len() as u64).to_le_bytes());
        for p in self.actor.params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        for v in [
            self.norm.mean_spread,
            self.norm.std_spread,
            self.norm.mean_trend,
            self.norm.std_trend,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let hash = self.norm.fingerprint();
        out.extend_from_slice(&(hash.len() as u32).to_le_bytes());
        out.extend_from_slice(hash.as_bytes());
        out
    }

    /// Parses a checkpoint. Only the four statistics and the fingerprint of
    /// the normalisation are stored; the fingerprint is verified against the
    /// statistics when `norm` is supplied.
    pub fn from_bytes(bytes: &[u8], norm: Option<&NormStats>) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n = read_u32(&mut r)? as usize;
        if !(2..=16).contains(&n) {
            return Err(Error::Checkpoint(format!("implausible layer count {n}")));
        }
        let sizes = (0..n)
            .map(|_| read_u32(&mut r).map(|s| s as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = read_u64(&mut r)? as usize;
        if count != n_params_for(&sizes) {
            return Err(Error::Checkpoint(format!(
                "parameter count {count} does not match architecture {sizes:?}"
            )));
        }
        let params = (0..count).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        let stats = [read_f64(&mut r)?, read_f64(&mut r)?, read_f64(&mut r)?, read_f64(&mut r)?];
        let hlen = read_u32(&mut r)? as usize;
        let mut hash = vec![0u8; hlen];
        read_exact(&mut r, &mut hash)?;
        let hash = String::from_utf8(hash).map_err(|_| Error::Checkpoint("hash not UTF-8".into()))?;
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        let norm = match norm {
            Some(ns) => {
                let given = [ns.mean_spread, ns.std_spread, ns.mean_trend, ns.std_trend];
                if ns.fingerprint() != hash || given != stats {
                    return Err(Error::Checkpoint(format!(
                        "trained with normalisation {hash}, given {}",
                        ns.fingerprint()
                    )));
                }
                ns.clone()
            }
            None => NormStats {
                mean_spread: stats[0],
                std_spread: stats[1],
                mean_trend: stats[2],
                std_trend: stats[3],
                n_steps: 0,
                config_hash: String::new(),
                seed: 0,
            },
        };
        Ok(Self {
            actor: Mlp::from_params(&sizes, params)?,
            norm,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint, verifying it against `norm` when supplied.
    pub fn load(path: &Path, norm: Option<&NormStats>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, norm)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("unexpected end of file".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut &[u8]) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}
