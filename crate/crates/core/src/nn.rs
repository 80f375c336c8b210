//! Parameter storage, layer helpers, initialization, and the AdamW optimizer.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;

/// Named flat parameter set. Creation order is fixed by the model builder,
/// which keeps initialization and checkpoints deterministic.
pub struct ParamStore {
    values: Vec<Tensor>,
    names: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { values: Vec::new(), names: Vec::new(), index: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn idx(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.values[self.idx(name)]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.idx(name);
        &mut self.values[i]
    }

    pub fn value_at(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn value_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.values[i]
    }

    pub fn name_at(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    /// SHA-256 over the little-endian bytes of the selected parameters, in
    /// creation order. Used for freeze-contract checks and config hashes.
    pub fn hash_subset(&self, select: impl Fn(&str) -> bool) -> String {
        let mut hasher = Sha256::new();
        for (name, value) in self.iter() {
            if select(name) {
                hasher.update(name.as_bytes());
                for v in value.data() {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        hex_digest(&hasher.finalize())
    }

    pub fn hash_all(&self) -> String {
        self.hash_subset(|_| true)
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// One forward/backward episode: a graph plus lazy parameter bindings.
pub struct Session<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: BTreeMap<usize, Var>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Session { g: Graph::new(), store, bound: BTreeMap::new() }
    }

    /// Binds the named parameter into the graph (once per session).
    pub fn p(&mut self, name: &str) -> Var {
        let idx = self.store.idx(name);
        if let Some(&v) = self.bound.get(&idx) {
            return v;
        }
        let v = self.g.leaf(self.store.value_at(idx).clone());
        self.bound.insert(idx, v);
        v
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Runs backward from `loss` and returns gradients keyed by parameter
    /// index.
    pub fn param_grads(&self, loss: Var) -> BTreeMap<usize, Tensor> {
        let grads = self.g.backward(loss);
        let mut out = BTreeMap::new();
        for (&idx, &var) in &self.bound {
            if let Some(g) = &grads[var.id()] {
                out.insert(idx, g.clone());
            }
        }
        out
    }
}

// ---- layer helpers ----

pub fn linear(sess: &mut Session, prefix: &str, x: Var) -> Var {
    let w = sess.p(&format!("{prefix}.w"));
    let b = sess.p(&format!("{prefix}.b"));
    let y = sess.g.matmul(x, w);
    sess.g.add_row_broadcast(y, b)
}

pub fn layer_norm(sess: &mut Session, prefix: &str, x: Var) -> Var {
    let g = sess.p(&format!("{prefix}.g"));
    let b = sess.p(&format!("{prefix}.b"));
    sess.g.layer_norm(x, g, b, 1e-5)
}

/// Two-layer feed-forward with GELU.
pub fn ffn(sess: &mut Session, prefix: &str, x: Var) -> Var {
    let h = linear(sess, &format!("{prefix}.fc1"), x);
    let h = sess.g.gelu(h);
    linear(sess, &format!("{prefix}.fc2"), h)
}

/// Standard multi-head self-attention over one sequence `[T, D]`.
/// `allowed[i*t + j]` says whether position i may attend to position j.
pub fn self_attention(
    sess: &mut Session,
    prefix: &str,
    x: Var,
    heads: usize,
    allowed: &[bool],
) -> Var {
    let t = sess.g.value(x).rows();
    let d = sess.g.value(x).cols();
    assert_eq!(allowed.len(), t * t);
    let dh = d / heads;
    let qkv = linear(sess, &format!("{prefix}.qkv"), x);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = sess.g.slice_cols(qkv, h * dh, (h + 1) * dh);
        let k = sess.g.slice_cols(qkv, d + h * dh, d + (h + 1) * dh);
        let v = sess.g.slice_cols(qkv, 2 * d + h * dh, 2 * d + (h + 1) * dh);
        let kt = transpose(sess, k);
        let scores = sess.g.matmul(q, kt);
        let scores = sess.g.mul_scalar(scores, scale);
        let attn = sess.g.masked_softmax_rows(scores, allowed);
        head_outs.push(sess.g.matmul(attn, v));
    }
    let cat = sess.g.concat_cols(&head_outs);
    linear(sess, &format!("{prefix}.out"), cat)
}

/// Transpose via gather (kept out of the op set; sequences here are short).
pub fn transpose(sess: &mut Session, x: Var) -> Var {
    let v = sess.g.value(x).clone();
    let (m, n) = (v.rows(), v.cols());
    // reshape to [m*n, 1], gather in transposed order, reshape to [n, m]
    let flat = sess.g.reshape(x, vec![m * n, 1]);
    let mut order = Vec::with_capacity(m * n);
    for j in 0..n {
        for i in 0..m {
            order.push(i * n + j);
        }
    }
    let gathered = sess.g.select_rows(flat, &order);
    sess.g.reshape(gathered, vec![n, m])
}

// ---- initialization ----

pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn normal(&mut self) -> f64 {
        // Box-Muller; platform-stable given the seeded stream
        let u1: f64 = self.rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = self.rng.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn linear(&mut self, store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| self.rng.gen_range(-a..a))
            .collect();
        store.insert(&format!("{prefix}.w"), Tensor::new(vec![fan_in, fan_out], w));
        store.insert(&format!("{prefix}.b"), Tensor::zeros(vec![fan_out]));
    }

    /// Linear whose weight and bias start at zero (refinement deltas).
    pub fn linear_zero(
        &mut self,
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
    ) {
        store.insert(
            &format!("{prefix}.w"),
            Tensor::zeros(vec![fan_in, fan_out]),
        );
        store.insert(&format!("{prefix}.b"), Tensor::zeros(vec![fan_out]));
    }

    pub fn layer_norm(&mut self, store: &mut ParamStore, prefix: &str, dim: usize) {
        store.insert(&format!("{prefix}.g"), Tensor::full(vec![dim], 1.0));
        store.insert(&format!("{prefix}.b"), Tensor::zeros(vec![dim]));
    }

    pub fn ffn(&mut self, store: &mut ParamStore, prefix: &str, dim: usize, hidden: usize) {
        self.linear(store, &format!("{prefix}.fc1"), dim, hidden);
        self.linear(store, &format!("{prefix}.fc2"), hidden, dim);
    }

    pub fn self_attention(&mut self, store: &mut ParamStore, prefix: &str, dim: usize) {
        self.linear(store, &format!("{prefix}.qkv"), dim, 3 * dim);
        self.linear(store, &format!("{prefix}.out"), dim, dim);
    }

    pub fn embedding(&mut self, store: &mut ParamStore, name: &str, rows: usize, dim: usize) {
        let data: Vec<f64> = (0..rows * dim).map(|_| self.normal() * 0.02).collect();
        store.insert(name, Tensor::new(vec![rows, dim], data));
    }

    pub fn scalar(&mut self, store: &mut ParamStore, name: &str, v: f64) {
        store.insert(name, Tensor::scalar(v));
    }
}

// ---- optimizer ----

#[derive(Clone, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            warmup_steps: 0,
            total_steps: 1,
        }
    }
}

/// Decoupled-weight-decay gradient descent with cosine annealing and linear
/// warmup. Per-parameter learning-rate multipliers come from `lr_mult`.
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let m = (0..store.len())
            .map(|i| Tensor::zeros(store.value_at(i).shape().to_vec()))
            .collect();
        let v = (0..store.len())
            .map(|i| Tensor::zeros(store.value_at(i).shape().to_vec()))
            .collect();
        AdamW { cfg, m, v, step: 0 }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Current scheduled learning rate (before per-parameter multipliers).
    pub fn current_lr(&self) -> f64 {
        let t = self.step;
        let warm = if self.cfg.warmup_steps > 0 && t < self.cfg.warmup_steps {
            (t as f64 + 1.0) / self.cfg.warmup_steps as f64
        } else {
            1.0
        };
        let t_cos = t.saturating_sub(self.cfg.warmup_steps) as f64;
        let span = (self.cfg.total_steps.saturating_sub(self.cfg.warmup_steps)).max(1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * (t_cos / span).min(1.0)).cos());
        self.cfg.lr * warm * cos
    }

    /// Applies one update. `frozen` names parameters that must not move;
    /// `lr_mult` scales the learning rate per parameter name.
    pub fn apply(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<usize, Tensor>,
        frozen: impl Fn(&str) -> bool,
        lr_mult: impl Fn(&str) -> f64,
    ) {
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for (&idx, grad) in grads {
            let name = store.name_at(idx).to_string();
            if frozen(&name) {
                continue;
            }
            let lr_p = lr * lr_mult(&name);
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let p = store.value_at_mut(idx);
            let decay = if p.ndim() >= 2 { self.cfg.weight_decay } else { 0.0 };
            for i in 0..p.len() {
                let g = grad.data()[i];
                let mi = self.cfg.beta1 * m.data()[i] + (1.0 - self.cfg.beta1) * g;
                let vi = self.cfg.beta2 * v.data()[i] + (1.0 - self.cfg.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let x = p.data()[i];
                p.data_mut()[i] = x - lr_p * (mhat / (vhat.sqrt() + self.cfg.eps) + decay * x);
            }
        }
    }
}
