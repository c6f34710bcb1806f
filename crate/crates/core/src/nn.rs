//! Parameter storage and the small layer vocabulary the models are built
//! from: linear maps, 2-d/3-d convolutions, and an LSTM cell.
//!
//! Parameters live outside any tape in a [`ParamStore`]; each training step
//! binds the whole store onto a fresh [`Tape`] (as trainable leaves or as
//! constants when frozen) and layers reference their parameters through
//! [`PId`] slots. Declaration order is stable and is the canonical order for
//! checkpoints and digests.

use crate::autodiff::{Scalar, Tape, Var};
use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};
use std::collections::HashMap;

/// Slot of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PId(usize);

/// Named parameter arrays in declaration order.
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<ArrayD<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn declare(&mut self, name: &str, value: ArrayD<T>) -> PId {
        assert!(
            !self.index.contains_key(name),
            "parameter {name:?} declared twice"
        );
        let id = self.values.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.values.push(value);
        PId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: PId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn get(&self, id: PId) -> &ArrayD<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: PId) -> &mut ArrayD<T> {
        &mut self.values[id.0]
    }

    pub fn by_index(&self, i: usize) -> (&str, &ArrayD<T>) {
        (&self.names[i], &self.values[i])
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut ArrayD<T> {
        &mut self.values[i]
    }

    pub fn id_by_name(&self, name: &str) -> Option<PId> {
        self.index.get(name).copied().map(PId)
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Bind every parameter onto `tape`, trainable or frozen wholesale.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> Binding {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Binding { vars }
    }

    /// SHA-256 over names, shapes, and values (as little-endian f64 bytes)
    /// in declaration order. Stable across element types for equal values.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, value) in self.names.iter().zip(&self.values) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((value.ndim() as u64).to_le_bytes());
            for &d in value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in value.iter() {
                h.update(Scalar::to_f64(v).to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn digest_hex(&self) -> String {
        hex(&self.digest())
    }

    /// All values finite (guards checkpoint loads and imported weights).
    pub fn validate_finite(&self) -> Result<()> {
        for (name, value) in self.names.iter().zip(&self.values) {
            if value.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "parameter {name:?} contains non-finite values"
                )));
            }
        }
        Ok(())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Tape variables for one bound [`ParamStore`], indexed by [`PId`].
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: PId) -> Var {
        self.vars[id.0]
    }
}

/// Uniform on [−bound, bound], sampled in f64 so f32/f64 stores built from
/// the same stream hold the same numbers.
pub fn uniform_init<T: Scalar>(rng: &mut ChaCha12Rng, shape: &[usize], bound: f64) -> ArrayD<T> {
    let n: usize = shape.iter().product();
    let vals: Vec<T> = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-bound..=bound)))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), vals).unwrap()
}

/// Kaiming-style uniform: bound = √2 · √(3 / fan_in).
pub fn kaiming_init<T: Scalar>(rng: &mut ChaCha12Rng, shape: &[usize], fan_in: usize) -> ArrayD<T> {
    let bound = (2.0f64).sqrt() * (3.0 / fan_in as f64).sqrt();
    uniform_init(rng, shape, bound)
}

pub fn zeros_init<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

/// Affine map y = x·Wᵀ + b with W (out, in).
#[derive(Debug, Clone, Copy)]
pub struct LinearP {
    pub w: PId,
    pub b: Option<PId>,
}

impl LinearP {
    pub fn declare<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = store.declare(
            &format!("{prefix}.w"),
            kaiming_init(rng, &[out_dim, in_dim], in_dim),
        );
        let b = bias.then(|| store.declare(&format!("{prefix}.b"), zeros_init(&[out_dim])));
        LinearP { w, b }
    }

    /// Same shape contract but zero-initialized (used where the identity
    /// start matters, e.g. AdaIN affines and TIM step weights).
    pub fn declare_zeroed<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = store.declare(&format!("{prefix}.w"), zeros_init(&[out_dim, in_dim]));
        let b = bias.then(|| store.declare(&format!("{prefix}.b"), zeros_init(&[out_dim])));
        LinearP { w, b }
    }

    pub fn forward<T: Scalar>(&self, t: &Tape<T>, bind: &Binding, x: Var) -> Var {
        t.linear(x, bind.var(self.w), self.b.map(|b| bind.var(b)))
    }
}

/// 3×3-style 2-d convolution with square stride/pad.
#[derive(Debug, Clone, Copy)]
pub struct Conv2dP {
    pub w: PId,
    pub b: Option<PId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dP {
    #[allow(clippy::too_many_arguments)]
    pub fn declare<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let w = store.declare(
            &format!("{prefix}.w"),
            kaiming_init(rng, &[out_ch, in_ch, k, k], fan_in),
        );
        let b = Some(store.declare(&format!("{prefix}.b"), zeros_init(&[out_ch])));
        Conv2dP { w, b, stride, pad }
    }

    pub fn forward<T: Scalar>(&self, t: &Tape<T>, bind: &Binding, x: Var) -> Var {
        t.conv2d(
            x,
            bind.var(self.w),
            self.b.map(|b| bind.var(b)),
            self.stride,
            self.pad,
        )
    }
}

/// 3-d convolution with per-axis stride/pad.
#[derive(Debug, Clone, Copy)]
pub struct Conv3dP {
    pub w: PId,
    pub b: Option<PId>,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv3dP {
    #[allow(clippy::too_many_arguments)]
    pub fn declare<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        k: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Self {
        let fan_in = in_ch * k[0] * k[1] * k[2];
        let w = store.declare(
            &format!("{prefix}.w"),
            kaiming_init(rng, &[out_ch, in_ch, k[0], k[1], k[2]], fan_in),
        );
        let b = Some(store.declare(&format!("{prefix}.b"), zeros_init(&[out_ch])));
        Conv3dP { w, b, stride, pad }
    }

    pub fn forward<T: Scalar>(&self, t: &Tape<T>, bind: &Binding, x: Var) -> Var {
        t.conv3d(
            x,
            bind.var(self.w),
            self.b.map(|b| bind.var(b)),
            self.stride,
            self.pad,
        )
    }
}

/// Adam first/second moments for one parameter array.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    m: ArrayD<T>,
    v: ArrayD<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shape: &[usize]) -> Self {
        AdamState {
            m: ArrayD::zeros(IxDyn(shape)),
            v: ArrayD::zeros(IxDyn(shape)),
        }
    }

    pub fn from_moments(m: ArrayD<T>, v: ArrayD<T>) -> Self {
        assert_eq!(m.shape(), v.shape());
        AdamState { m, v }
    }

    pub fn moments(&self) -> (&ArrayD<T>, &ArrayD<T>) {
        (&self.m, &self.v)
    }

    /// One bias-corrected update in place; `t` is the 1-based step count.
    pub fn update(
        &mut self,
        value: &mut ArrayD<T>,
        grad: &ArrayD<T>,
        t: u64,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) {
        assert_eq!(value.shape(), grad.shape());
        let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
        let (ob1, ob2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
        let corr1 = T::from_f64(1.0 - beta1.powi(t as i32));
        let corr2 = T::from_f64(1.0 - beta2.powi(t as i32));
        let (lr_t, eps_t) = (T::from_f64(lr), T::from_f64(eps));
        ndarray::Zip::from(value)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                let m_hat = *m / corr1;
                let v_hat = *v / corr2;
                *p -= lr_t * m_hat / (v_hat.sqrt() + eps_t);
            });
    }
}

/// Adam over every parameter of one store; one shared 1-based step counter.
pub struct AdamGroup<T: Scalar> {
    states: Vec<AdamState<T>>,
    t: u64,
}

impl<T: Scalar> AdamGroup<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        AdamGroup {
            states: (0..store.len())
                .map(|i| AdamState::new(store.by_index(i).1.shape()))
                .collect(),
            t: 0,
        }
    }

    pub fn from_parts(states: Vec<AdamState<T>>, t: u64) -> Self {
        AdamGroup { states, t }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn states(&self) -> &[AdamState<T>] {
        &self.states
    }

    /// One update over the whole store from a backward pass whose leaves came
    /// from `binding`. Parameters without a gradient this step are untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        binding: &Binding,
        grads: &crate::autodiff::Grads<T>,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) {
        assert_eq!(self.states.len(), store.len(), "optimizer built for another store");
        self.t += 1;
        for i in 0..store.len() {
            if let Some(g) = grads.get(binding.vars[i]) {
                self.states[i].update(store.by_index_mut(i), g, self.t, lr, beta1, beta2, eps);
            }
        }
    }
}

/// One LSTM cell; gate order along the 4H axis is [input, forget, cell, output].
#[derive(Debug, Clone, Copy)]
pub struct LstmP {
    pub w_ih: PId,
    pub w_hh: PId,
    pub bias: PId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmP {
    pub fn declare<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.declare(
            &format!("{prefix}.w_ih"),
            uniform_init(rng, &[4 * hidden, input_dim], bound),
        );
        let w_hh = store.declare(
            &format!("{prefix}.w_hh"),
            uniform_init(rng, &[4 * hidden, hidden], bound),
        );
        // Forget-gate bias starts at 1 for stable early training.
        let mut b: ArrayD<T> = uniform_init(rng, &[4 * hidden], bound);
        for i in hidden..2 * hidden {
            b[IxDyn(&[i])] += T::one();
        }
        let bias = store.declare(&format!("{prefix}.b"), b);
        LstmP {
            w_ih,
            w_hh,
            bias,
            input_dim,
            hidden,
        }
    }

    /// One cell update: x (B, input_dim), h/c (B, hidden) → (h', c').
    pub fn step<T: Scalar>(
        &self,
        t: &Tape<T>,
        bind: &Binding,
        x: Var,
        h: Var,
        c: Var,
    ) -> (Var, Var) {
        let hd = self.hidden;
        let gx = t.linear(x, bind.var(self.w_ih), None);
        let gh = t.linear(h, bind.var(self.w_hh), None);
        let pre = t.add_bc0(t.add(gx, gh), bind.var(self.bias));
        let i = t.sigmoid(t.narrow(pre, 1, 0, hd));
        let f = t.sigmoid(t.narrow(pre, 1, hd, hd));
        let g = t.tanh(t.narrow(pre, 1, 2 * hd, hd));
        let o = t.sigmoid(t.narrow(pre, 1, 3 * hd, hd));
        let c_next = t.add(t.mul(f, c), t.mul(i, g));
        let h_next = t.mul(o, t.tanh(c_next));
        (h_next, c_next)
    }
}
