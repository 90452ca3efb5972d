//! Parameter storage, layers, and the Adam optimizer.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names
//! (`"fine.trunk.1.w"`). Each forward pass opens a [`GraphCtx`] over the
//! store; fetching a parameter injects it into the tape exactly once, so
//! weight reuse across rays or context elements shares a single leaf node.

use std::cell::RefCell;
use std::collections::HashMap;

use indexmap::IndexMap;
use rand::Rng;

use crate::tape::{conv2d, Gradients, Graph, Spatial, Tensor, Var};

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
}

/// Ordered collection of named parameters.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, rows: usize, cols: usize, value: Vec<f64>) {
        assert_eq!(rows * cols, value.len(), "param shape mismatch: {name}");
        assert!(
            self.entries
                .insert(name.to_string(), Param { rows, cols, value })
                .is_none(),
            "duplicate parameter name: {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Param {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter: {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Exact byte-level snapshot used by tests to assert immutability.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for (name, p) in &self.entries {
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
            for v in &p.value {
                for b in v.to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    He,
    /// Normal with std `sqrt(2 / (fan_in + fan_out))`.
    Glorot,
    Zeros,
}

fn init_values(init: Init, fan_in: usize, fan_out: usize, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    match init {
        Init::Zeros => vec![0.0; n],
        _ => {
            let std = match init {
                Init::He => (2.0 / fan_in as f64).sqrt(),
                Init::Glorot => (2.0 / (fan_in + fan_out) as f64).sqrt(),
                Init::Zeros => unreachable!(),
            };
            // Box-Muller keeps us independent of distribution crates.
            (0..n)
                .map(|_| {
                    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    std * (-2.0 * u1.ln()).sqrt() * u2.cos()
                })
                .collect()
        }
    }
}

/// One forward pass over a parameter store.
///
/// `trainable` controls whether parameters enter the tape as differentiable
/// leaves or as constants (used for the inner refinement objective, where
/// only the posterior parameters receive gradients).
pub struct GraphCtx<'s> {
    pub graph: Graph,
    store: &'s ParamStore,
    leaves: RefCell<HashMap<String, Var>>,
    trainable: bool,
    /// Enables training-time stochastic behavior (density noise).
    pub train_mode: bool,
}

impl<'s> GraphCtx<'s> {
    pub fn new(store: &'s ParamStore, trainable: bool, train_mode: bool) -> Self {
        GraphCtx {
            graph: Graph::new(),
            store,
            leaves: RefCell::new(HashMap::new()),
            trainable,
            train_mode,
        }
    }

    /// The parameter as a tape node (cached; one leaf per name per pass).
    pub fn param(&self, name: &str) -> Var {
        if let Some(v) = self.leaves.borrow().get(name) {
            return v.clone();
        }
        let p = self.store.get(name);
        let t = Tensor::new(p.rows, p.cols, p.value.clone());
        let var = if self.trainable {
            self.graph.leaf(t)
        } else {
            self.graph.constant(t)
        };
        self.leaves.borrow_mut().insert(name.to_string(), var.clone());
        var
    }

    pub fn constant(&self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    /// Drains leaf gradients after a backward pass into a name-keyed map.
    pub fn collect_grads(&self, grads: &mut Gradients) -> GradMap {
        let mut out = HashMap::new();
        for (name, var) in self.leaves.borrow().iter() {
            if let Some(g) = grads.take(var.id()) {
                out.insert(name.clone(), g);
            }
        }
        GradMap(out)
    }
}

/// Gradients keyed by parameter name.
#[derive(Debug, Default)]
pub struct GradMap(pub HashMap<String, Vec<f64>>);

impl GradMap {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.0.get(name).map(|v| v.as_slice())
    }

    /// Accumulates `other` into `self` (used when summing over a scene batch).
    pub fn merge(&mut self, other: GradMap) {
        for (name, g) in other.0 {
            match self.0.entry(name) {
                std::collections::hash_map::Entry::Occupied(mut e) => {
                    for (a, b) in e.get_mut().iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(g);
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.0.values_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        // Summed in name order: map iteration order must not leak into the
        // clipping scale, or training stops being reproducible.
        let mut names: Vec<&String> = self.0.keys().collect();
        names.sort();
        names
            .iter()
            .flat_map(|n| self.0[*n].iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.values().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Activation functions used across the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Relu,
    Tanh,
    Swish,
    Sigmoid,
    Identity,
}

impl Act {
    pub fn apply(&self, x: &Var) -> Var {
        match self {
            Act::Relu => x.relu(),
            Act::Tanh => x.tanh(),
            Act::Swish => x.swish(),
            Act::Sigmoid => x.sigmoid(),
            Act::Identity => x.clone(),
        }
    }
}

/// Dense layer `y = x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    w: String,
    b: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
    ) -> Self {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        store.insert(
            &w,
            in_dim,
            out_dim,
            init_values(init, in_dim, out_dim, in_dim * out_dim, rng),
        );
        store.insert(&b, 1, out_dim, vec![0.0; out_dim]);
        Linear {
            w,
            b: Some(b),
            in_dim,
            out_dim,
        }
    }

    pub fn init_no_bias(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
    ) -> Self {
        let w = format!("{name}.w");
        store.insert(
            &w,
            in_dim,
            out_dim,
            init_values(init, in_dim, out_dim, in_dim * out_dim, rng),
        );
        Linear {
            w,
            b: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, ctx: &GraphCtx, x: &Var) -> Var {
        let y = x.matmul(&ctx.param(&self.w));
        match &self.b {
            Some(b) => y.add_rowvec(&ctx.param(b)),
            None => y,
        }
    }

    pub fn weight_name(&self) -> &str {
        &self.w
    }

    pub fn bias_name(&self) -> Option<&str> {
        self.b.as_deref()
    }
}

/// Feed-forward stack: activation between layers, none after the last.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Act,
}

impl Mlp {
    /// `dims` lists `[in, hidden..., out]`.
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dims: &[usize],
        act: Act,
        init: Init,
    ) -> Self {
        assert!(dims.len() >= 2);
        let layers = (0..dims.len() - 1)
            .map(|i| {
                Linear::init(
                    store,
                    rng,
                    &format!("{name}.{i}"),
                    dims[i],
                    dims[i + 1],
                    init,
                )
            })
            .collect();
        Mlp { layers, act }
    }

    pub fn forward(&self, ctx: &GraphCtx, x: &Var) -> Var {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(ctx, &h);
            if i + 1 < self.layers.len() {
                h = self.act.apply(&h);
            }
        }
        h
    }
}

/// 3x3-style convolution layer over `(channels, h*w)` maps.
#[derive(Debug, Clone)]
pub struct Conv {
    w: String,
    b: Option<String>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        init: Init,
    ) -> Self {
        let pad = k / 2;
        let w = format!("{name}.w");
        let fan_in = c_in * k * k;
        store.insert(
            &w,
            c_out,
            fan_in,
            init_values(init, fan_in, c_out, c_out * fan_in, rng),
        );
        let b = format!("{name}.b");
        store.insert(&b, c_out, 1, vec![0.0; c_out]);
        Conv {
            w,
            b: Some(b),
            c_in,
            c_out,
            k,
            stride,
            pad,
        }
    }

    pub fn forward(&self, ctx: &GraphCtx, x: &Var, sp: Spatial) -> (Var, Spatial) {
        let (y, osp) = conv2d(x, &ctx.param(&self.w), sp, self.k, self.stride, self.pad);
        let y = match &self.b {
            Some(b) => y.add_colvec(&ctx.param(b)),
            None => y,
        };
        (y, osp)
    }
}

/// LSTM cell; input `(B, in)`, state `(B, hidden)` with shared weights across
/// the batch dimension (batch rows are spatial positions for map latents).
#[derive(Debug, Clone)]
pub struct LstmCell {
    wx: Linear,
    wh: Linear,
    pub in_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Self {
        let wx = Linear::init(store, rng, &format!("{name}.wx"), in_dim, 4 * hidden, Init::Glorot);
        let wh = Linear::init_no_bias(
            store,
            rng,
            &format!("{name}.wh"),
            hidden,
            4 * hidden,
            Init::Glorot,
        );
        LstmCell {
            wx,
            wh,
            in_dim,
            hidden,
        }
    }

    pub fn step(&self, ctx: &GraphCtx, x: &Var, h: &Var, c: &Var) -> (Var, Var) {
        let gates = self.wx.forward(ctx, x).add(&self.wh.forward(ctx, h));
        let n = self.hidden;
        let i = gates.slice_cols(0, n).sigmoid();
        let f = gates.slice_cols(n, 2 * n).sigmoid();
        let g = gates.slice_cols(2 * n, 3 * n).tanh();
        let o = gates.slice_cols(3 * n, 4 * n).sigmoid();
        let c_new = f.mul(c).add(&i.mul(&g));
        let h_new = o.mul(&c_new.tanh());
        (h_new, c_new)
    }

    pub fn zero_state(&self, ctx: &GraphCtx, batch: usize) -> (Var, Var) {
        (
            ctx.constant(Tensor::zeros(batch, self.hidden)),
            ctx.constant(Tensor::zeros(batch, self.hidden)),
        )
    }
}

/// Adam with optional global-norm gradient clipping.
#[derive(Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    t: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(10.0),
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// One descent step on `store` along `grads` (of the loss).
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradMap) {
        self.t += 1;
        let scale = match self.clip_norm {
            Some(c) => {
                let norm = grads.global_norm();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let names: Vec<String> = store.names().cloned().collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let p = store.get_mut(&name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                let gi = g[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.value[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
