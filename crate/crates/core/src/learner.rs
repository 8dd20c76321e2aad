//! Online estimator of the actuation and dissipation matrices.
//!
//! Two independent branches `p → 16 → 8` with tanh hidden units map the
//! normalized state to `B̂` (linear head, reshaped row-major) and to the
//! diagonal of `D̂` (softplus head). Gradients are accumulated by hand and
//! applied with ADAM on mini-batches drawn from a small replay buffer.
//!
//! Checkpoint format (little-endian):
//!
//! ```text
//! DACPH-NET 1\n
//! n=<joints> p=<features> params=<count> step=<adam step>\n
//! <count f64 parameters> <count f64 first moments> <count f64 second moments>
//! ```
//!
//! Parameters are stored tensor by tensor (B branch then D branch; per branch
//! W1, b1, W2, b2, W_head, b_head), matrices column-major.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Matrix, Vector};

const HIDDEN: [usize; 2] = [16, 8];
const CHECKPOINT_MAGIC: &str = "DACPH-NET 1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch: usize,
    pub buffer: usize,
    /// Append degree-2 monomials and sin/cos of the joint angles to the
    /// normalized state.
    pub feature_expansion: bool,
    /// Normalization of `[q; p]`.
    pub scales: Vec<f64>,
    /// Warm-start targets for the head biases.
    pub b_init: Vec<f64>,
    pub d_init: Vec<f64>,
    /// Hidden weights start uniform in `±init_scale/√fan_in`.
    pub init_scale: f64,
    /// Time constant (s) of the port-offset observer: `d̂` low-passes the
    /// prediction residual and training targets are `τ̆ − d̂`. Zero disables it,
    /// and a sustained disturbance is then absorbed into `B̂`.
    pub offset_tau: f64,
    /// Observer innovation norm (N·m) above which updates pause for
    /// `gate_hold` seconds so `d̂` takes up a step before the weights do.
    /// Zero disables the pause.
    pub gate_threshold: f64,
    pub gate_hold: f64,
    /// Leakage `σ`: after each step the weights move `lr·σ` of the way back
    /// towards the warm start.
    /// Weakly excited directions otherwise drift while a disturbance is
    /// being rejected.
    pub leakage: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch: 32,
            buffer: 256,
            feature_expansion: false,
            scales: vec![PI, PI, 2.0, 2.0],
            b_init: vec![1.0, 0.0, 0.0, 1.0],
            d_init: vec![0.1, 0.1],
            init_scale: 0.1,
            offset_tau: 0.1,
            gate_threshold: 0.05,
            gate_hold: 3.0,
            leakage: 1.0,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        let key = |k: &str| format!("learner.{k}");
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(key("lr"), "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config(key("beta1"), "moment decays must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(key("eps"), "must be > 0"));
        }
        if self.batch == 0 || self.buffer < self.batch {
            return Err(Error::config(key("buffer"), "need buffer >= batch >= 1"));
        }
        if self.scales.len() != 2 * n || self.scales.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::config(key("scales"), format!("need {} positive entries", 2 * n)));
        }
        if self.b_init.len() != n * n {
            return Err(Error::config(key("b_init"), format!("need {} entries", n * n)));
        }
        if self.d_init.len() != n || self.d_init.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::config(key("d_init"), format!("need {n} positive entries")));
        }
        if !(self.offset_tau >= 0.0 && self.offset_tau.is_finite()) {
            return Err(Error::config(key("offset_tau"), "must be >= 0"));
        }
        if !(self.gate_threshold >= 0.0 && self.gate_threshold.is_finite()) {
            return Err(Error::config(key("gate_threshold"), "must be >= 0"));
        }
        if !(self.leakage >= 0.0 && self.leakage.is_finite()) {
            return Err(Error::config(key("leakage"), "must be >= 0"));
        }
        if !(self.gate_hold >= 0.0 && self.gate_hold.is_finite()) {
            return Err(Error::config(key("gate_hold"), "must be >= 0"));
        }
        Ok(())
    }
}

/// `x ↦ X(x)`: scaled `[q; p]`, optionally expanded.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    scales: Vec<f64>,
    expansion: bool,
}

impl FeatureMap {
    pub fn new(scales: Vec<f64>, expansion: bool) -> Self {
        Self { scales, expansion }
    }

    pub fn dim(&self) -> usize {
        let base = self.scales.len();
        if self.expansion {
            let n = base / 2;
            base + base * (base + 1) / 2 + 2 * n
        } else {
            base
        }
    }

    pub fn eval(&self, q: &Vector, p: &Vector) -> Vector {
        let n = q.len();
        let mut out = Vec::with_capacity(self.dim());
        for (i, v) in q.iter().chain(p.iter()).enumerate() {
            out.push(v / self.scales[i]);
        }
        if self.expansion {
            let base = out.clone();
            for i in 0..base.len() {
                for j in i..base.len() {
                    out.push(base[i] * base[j]);
                }
            }
            for i in 0..n {
                out.push(q[i].sin());
                out.push(q[i].cos());
            }
        }
        Vector::from_vec(out)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of softplus for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Branch {
    w1: Matrix,
    b1: Vector,
    w2: Matrix,
    b2: Vector,
    wh: Matrix,
    bh: Vector,
}

struct BranchCache {
    h1: Vector,
    h2: Vector,
    out: Vector,
}

impl Branch {
    fn zeros(p: usize, out: usize) -> Self {
        Self {
            w1: Matrix::zeros(HIDDEN[0], p),
            b1: Vector::zeros(HIDDEN[0]),
            w2: Matrix::zeros(HIDDEN[1], HIDDEN[0]),
            b2: Vector::zeros(HIDDEN[1]),
            wh: Matrix::zeros(out, HIDDEN[1]),
            bh: Vector::zeros(out),
        }
    }

    fn forward(&self, x: &Vector) -> BranchCache {
        let h1 = (&self.w1 * x + &self.b1).map(f64::tanh);
        let h2 = (&self.w2 * &h1 + &self.b2).map(f64::tanh);
        let out = &self.wh * &h2 + &self.bh;
        BranchCache { h1, h2, out }
    }

    /// Accumulates parameter gradients for an output sensitivity `g_out`.
    fn backward(&self, x: &Vector, cache: &BranchCache, g_out: &Vector, grad: &mut Branch) {
        grad.wh.ger(1.0, g_out, &cache.h2, 1.0);
        grad.bh += g_out;
        let dh2 = self.wh.tr_mul(g_out);
        let dz2 = dh2.zip_map(&cache.h2, |g, h| g * (1.0 - h * h));
        grad.w2.ger(1.0, &dz2, &cache.h1, 1.0);
        grad.b2 += &dz2;
        let dh1 = self.w2.tr_mul(&dz2);
        let dz1 = dh1.zip_map(&cache.h1, |g, h| g * (1.0 - h * h));
        grad.w1.ger(1.0, &dz1, x, 1.0);
        grad.b1 += &dz1;
    }

    fn tensors(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
            self.wh.as_slice(),
            self.bh.as_slice(),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
            self.wh.as_mut_slice(),
            self.bh.as_mut_slice(),
        ]
    }
}

/// Weights and biases of both branches.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    n: usize,
    p: usize,
    b_branch: Branch,
    d_branch: Branch,
}

/// Pre-activations and outputs kept for backprop.
pub struct ForwardCache {
    b: BranchCache,
    d: BranchCache,
}

impl NetworkParams {
    /// Bias-only network returning `(b_init, diag(d_init))` for every input.
    pub fn warm_start(n: usize, p: usize, b_init: &[f64], d_init: &[f64]) -> Self {
        let mut net = Self {
            n,
            p,
            b_branch: Branch::zeros(p, n * n),
            d_branch: Branch::zeros(p, n),
        };
        net.b_branch.bh.copy_from_slice(b_init);
        for (b, d) in net.d_branch.bh.iter_mut().zip(d_init) {
            *b = softplus_inv(*d);
        }
        net
    }

    /// Warm start plus small uniform hidden weights.
    pub fn initialized(cfg: &LearnerConfig, n: usize, p: usize, rng: &mut impl Rng) -> Self {
        let mut net = Self::warm_start(n, p, &cfg.b_init, &cfg.d_init);
        for branch in [&mut net.b_branch, &mut net.d_branch] {
            for w in [&mut branch.w1, &mut branch.w2] {
                let bound = cfg.init_scale / (w.ncols() as f64).sqrt();
                for v in w.iter_mut() {
                    *v = rng.random_range(-bound..=bound);
                }
            }
        }
        net
    }

    pub fn joints(&self) -> usize {
        self.n
    }

    pub fn features(&self) -> usize {
        self.p
    }

    pub fn param_count(&self) -> usize {
        self.b_branch
            .tensors()
            .iter()
            .chain(self.d_branch.tensors().iter())
            .map(|t| t.len())
            .sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in self.b_branch.tensors().iter().chain(self.d_branch.tensors().iter()) {
            out.extend_from_slice(t);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                what: "flat parameter vector",
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut at = 0;
        let [a0, a1, a2, a3, a4, a5] = self.b_branch.tensors_mut();
        let [c0, c1, c2, c3, c4, c5] = self.d_branch.tensors_mut();
        for t in [a0, a1, a2, a3, a4, a5, c0, c1, c2, c3, c4, c5] {
            t.copy_from_slice(&flat[at..at + t.len()]);
            at += t.len();
        }
        Ok(())
    }

    /// Zero-valued network with the same shapes (gradient accumulator).
    fn zeros_like(&self) -> Self {
        Self {
            n: self.n,
            p: self.p,
            b_branch: Branch::zeros(self.p, self.n * self.n),
            d_branch: Branch::zeros(self.p, self.n),
        }
    }

    pub fn forward(&self, x: &Vector) -> Result<(Matrix, Matrix, ForwardCache)> {
        if x.len() != self.p {
            return Err(Error::DimensionMismatch {
                what: "feature vector",
                expected: self.p,
                got: x.len(),
            });
        }
        let b = self.b_branch.forward(x);
        let d = self.d_branch.forward(x);
        let b_hat = Matrix::from_row_slice(self.n, self.n, b.out.as_slice());
        let d_hat = Matrix::from_diagonal(&d.out.map(softplus));
        if !(b_hat.iter().all(|v| v.is_finite()) && d_hat.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("network output"));
        }
        Ok((b_hat, d_hat, ForwardCache { b, d }))
    }

    pub fn predict(&self, x: &Vector) -> Result<(Matrix, Matrix)> {
        let (b, d, _) = self.forward(x)?;
        Ok((b, d))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplaySample {
    pub x: Vector,
    pub u: Vector,
    pub qdot: Vector,
    pub tau_obs: Vector,
    pub t: f64,
}

/// Mean squared port error over `batch` and its gradient in flat layout.
pub fn loss_and_gradients(net: &NetworkParams, batch: &[&ReplaySample]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::DimensionMismatch {
            what: "training batch",
            expected: 1,
            got: 0,
        });
    }
    let n = net.n;
    let scale = 1.0 / batch.len() as f64;
    let mut grad = net.zeros_like();
    let mut loss = 0.0;
    for s in batch {
        let (b_hat, d_hat, cache) = net.forward(&s.x)?;
        let pred = &b_hat * &s.u - &d_hat * &s.qdot;
        let r = &s.tau_obs - pred;
        loss += r.norm_squared() * scale;

        // ∂ℓ/∂τ̂ = −2r
        let mut g_b = Vector::zeros(n * n);
        let mut g_d = Vector::zeros(n);
        for i in 0..n {
            let gi = -2.0 * r[i] * scale;
            for j in 0..n {
                g_b[i * n + j] = gi * s.u[j];
            }
            g_d[i] = -gi * s.qdot[i] * sigmoid(cache.d.out[i]);
        }
        net.b_branch.backward(&s.x, &cache.b, &g_b, &mut grad.b_branch);
        net.d_branch.backward(&s.x, &cache.d, &g_d, &mut grad.d_branch);
    }
    Ok((loss, grad.to_flat()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Adam {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// One ADAM step on `net`.
pub fn adam_step(net: &mut NetworkParams, adam: &mut Adam, grad: &[f64], lr: f64) {
    let mut flat = net.to_flat();
    adam.apply(&mut flat, grad, lr);
    net.set_flat(&flat).expect("layout is fixed");
}

/// The network, its optimizer, the replay buffer and the sampling stream.
#[derive(Debug, Clone)]
pub struct Learner {
    cfg: LearnerConfig,
    features: FeatureMap,
    net: NetworkParams,
    adam: Adam,
    buffer: VecDeque<ReplaySample>,
    rng: ChaCha8Rng,
    last_loss: f64,
    offset: Vector,
    last_push: Option<f64>,
    paused_until: f64,
    anchor: Vec<f64>,
}

impl Learner {
    /// All randomness (initial weights and mini-batch draws) flows from `seed`.
    pub fn new(cfg: &LearnerConfig, n: usize, seed: u64) -> Result<Self> {
        cfg.validate(n)?;
        let features = FeatureMap::new(cfg.scales.clone(), cfg.feature_expansion);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = NetworkParams::initialized(cfg, n, features.dim(), &mut rng);
        let adam = Adam::new(net.param_count(), cfg.beta1, cfg.beta2, cfg.eps);
        let anchor = net.to_flat();
        Ok(Self {
            cfg: cfg.clone(),
            features,
            net,
            adam,
            buffer: VecDeque::with_capacity(cfg.buffer),
            rng,
            last_loss: f64::NAN,
            offset: Vector::zeros(n),
            last_push: None,
            paused_until: f64::NEG_INFINITY,
            anchor,
        })
    }

    pub fn network(&self) -> &NetworkParams {
        &self.net
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.features
    }

    pub fn adam(&self) -> &Adam {
        &self.adam
    }

    pub fn last_loss(&self) -> f64 {
        self.last_loss
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.len()
    }

    /// Current port-offset estimate `d̂`.
    pub fn offset(&self) -> &Vector {
        &self.offset
    }

    /// `(B̂(x), D̂(x))`.
    pub fn estimate(&self, q: &Vector, p: &Vector) -> Result<(Matrix, Matrix)> {
        self.net.predict(&self.features.eval(q, p))
    }

    /// Adds a sample and advances the offset observer to time `t`.
    pub fn push(&mut self, q: &Vector, p: &Vector, u: &Vector, qdot: &Vector, tau_obs: &Vector, t: f64) -> Result<()> {
        let x = self.features.eval(q, p);
        let mut target = tau_obs.clone();
        if self.cfg.offset_tau > 0.0 {
            let (b_hat, d_hat) = self.net.predict(&x)?;
            let residual = tau_obs - (b_hat * u - d_hat * qdot);
            let dt = self.last_push.map_or(0.0, |last| t - last);
            let a = 1.0 - (-dt / self.cfg.offset_tau).exp();
            let innovation = residual - &self.offset;
            if self.cfg.gate_threshold > 0.0 && innovation.norm() > self.cfg.gate_threshold {
                self.paused_until = t + self.cfg.gate_hold;
            }
            self.offset += innovation * a;
            target -= &self.offset;
        }
        self.last_push = Some(t);
        if self.paused() {
            return Ok(());
        }
        if self.buffer.len() == self.cfg.buffer {
            self.buffer.pop_front();
        }
        self.buffer.push_back(ReplaySample {
            x,
            u: u.clone(),
            qdot: qdot.clone(),
            tau_obs: target,
            t,
        });
        Ok(())
    }

    /// True while updates are held after a jump in the observer innovation.
    pub fn paused(&self) -> bool {
        self.last_push.is_some_and(|t| t < self.paused_until)
    }

    /// One ADAM step on a uniformly drawn mini-batch. Returns the batch loss,
    /// or `None` while the buffer holds fewer than one batch or updates are
    /// paused.
    pub fn online_update(&mut self) -> Result<Option<f64>> {
        if self.buffer.len() < self.cfg.batch || self.paused() {
            return Ok(None);
        }
        let len = self.buffer.len();
        let batch: Vec<&ReplaySample> = (0..self.cfg.batch)
            .map(|_| &self.buffer[self.rng.random_range(0..len)])
            .collect();
        let (loss, grad) = loss_and_gradients(&self.net, &batch)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("learner gradient"));
        }

        adam_step(&mut self.net, &mut self.adam, &grad, self.cfg.lr);
        if self.cfg.leakage > 0.0 {
            // decoupled from the moment normalization
            let shrink = self.cfg.lr * self.cfg.leakage;
            let mut flat = self.net.to_flat();
            for (w, w0) in flat.iter_mut().zip(&self.anchor) {
                *w -= shrink * (*w - w0);
            }
            self.net.set_flat(&flat)?;
        }
        self.last_loss = loss;
        Ok(Some(loss))
    }

    pub fn save_checkpoint(&self, mut w: impl Write) -> Result<()> {
        let flat = self.net.to_flat();
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        writeln!(
            w,
            "n={} p={} params={} step={}",
            self.net.n,
            self.net.p,
            flat.len(),
            self.adam.step
        )?;
        for v in flat.iter().chain(&self.adam.m).chain(&self.adam.v) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Restores parameters and optimizer state into a learner built from the
    /// same configuration.
    pub fn load_checkpoint(&mut self, mut r: impl Read) -> Result<()> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut lines = bytes.splitn(3, |b| *b == b'\n');
        let magic = lines.next().unwrap_or_default();
        if magic != CHECKPOINT_MAGIC.as_bytes() {
            return Err(Error::Checkpoint("bad magic or unsupported version".into()));
        }
        let header = std::str::from_utf8(lines.next().unwrap_or_default())
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let mut fields = std::collections::HashMap::new();
        for kv in header.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("malformed field `{kv}`")))?;
            let v: u64 = v
                .parse()
                .map_err(|_| Error::Checkpoint(format!("field `{k}` is not an integer")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("missing field `{k}`")))
        };
        let count = self.net.param_count();
        if get("n")? as usize != self.net.n || get("p")? as usize != self.net.p || get("params")? as usize != count {
            return Err(Error::Checkpoint("shape does not match this learner".into()));
        }
        let body = lines.next().unwrap_or_default();
        if body.len() != 3 * count * 8 {
            return Err(Error::Checkpoint(format!(
                "expected {} payload bytes, found {}",
                3 * count * 8,
                body.len()
            )));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        self.net.set_flat(&values[..count])?;
        self.adam.m = values[count..2 * count].to_vec();
        self.adam.v = values[2 * count..].to_vec();
        self.adam.step = get("step")?;
        Ok(())
    }
}
