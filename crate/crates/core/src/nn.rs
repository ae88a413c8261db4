//! Flat parameter storage, batched fully-connected layers with manual
//! reverse-mode gradients, and the Adam optimizer.
//!
//! All trainable tensors of a model live in one [`ParamStore`] as named,
//! contiguous f64 slices. Gradients are accumulated into [`Gradients`]
//! buffers of identical layout, which makes deterministic multi-lane
//! accumulation and byte-stable checkpoints straightforward.

use rand::Rng;

/// Learning-rate group a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Feature-grid tables (planes and hash tables).
    Grid,
    /// MLP weights and biases.
    Mlp,
}

#[derive(Debug, Clone)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    pub group: ParamGroup,
}

/// Handle to one named tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy)]
pub struct TensorRef {
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    data: Vec<f64>,
    entries: Vec<TensorMeta>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, name: &str, shape: &[usize], group: ParamGroup) -> TensorRef {
        let len: usize = shape.iter().product();
        let offset = self.data.len();
        self.data.resize(offset + len, 0.0);
        self.entries.push(TensorMeta {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
            len,
            group,
        });
        TensorRef { offset, len }
    }

    #[inline]
    pub fn slice(&self, t: TensorRef) -> &[f64] {
        &self.data[t.offset..t.offset + t.len]
    }

    #[inline]
    pub fn slice_mut(&mut self, t: TensorRef) -> &mut [f64] {
        &mut self.data[t.offset..t.offset + t.len]
    }

    pub fn fill_with(&mut self, t: TensorRef, mut f: impl FnMut() -> f64) {
        for v in self.slice_mut(t) {
            *v = f();
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn entries(&self) -> &[TensorMeta] {
        &self.entries
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// FNV-1a hash of the raw parameter bytes; used by freeze contracts.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for v in &self.data {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

/// Gradient buffer with the same flat layout as its [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients {
    data: Vec<f64>,
}

impl Gradients {
    pub fn zeros(store: &ParamStore) -> Self {
        Self {
            data: vec![0.0; store.len()],
        }
    }

    #[inline]
    pub fn slice_mut(&mut self, t: TensorRef) -> &mut [f64] {
        &mut self.data[t.offset..t.offset + t.len]
    }

    #[inline]
    pub fn slice(&self, t: TensorRef) -> &[f64] {
        &self.data[t.offset..t.offset + t.len]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn clear(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Accumulates another buffer; lanes are merged in fixed order so the
    /// sum is deterministic.
    pub fn add_from(&mut self, other: &Gradients) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }
}

/// Dot product with four independent accumulator chains; fixed summation
/// order keeps results deterministic while allowing the compiler to
/// pipeline or vectorize.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for (x, y) in (&mut ca).zip(&mut cb) {
        s0 += x[0] * y[0];
        s1 += x[1] * y[1];
        s2 += x[2] * y[2];
        s3 += x[3] * y[3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

/// `y += alpha * x` over slices.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// One dense layer: `y = x W^T + b`, weights stored row-major (out, in).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: TensorRef,
    pub bias: TensorRef,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.alloc(&format!("{name}.weight"), &[out_dim, in_dim], ParamGroup::Mlp);
        let bias = store.alloc(&format!("{name}.bias"), &[out_dim], ParamGroup::Mlp);
        let bound = 1.0 / (in_dim as f64).sqrt();
        store.fill_with(weight, || rng.gen_range(-bound..bound));
        store.fill_with(bias, || rng.gen_range(-bound..bound));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn zero_init(&self, store: &mut ParamStore) {
        store.slice_mut(self.weight).iter_mut().for_each(|v| *v = 0.0);
        store.slice_mut(self.bias).iter_mut().for_each(|v| *v = 0.0);
    }

    /// `y[r, o] = b[o] + sum_i x[r, i] w[o, i]` for `rows` rows.
    pub fn forward(&self, store: &ParamStore, x: &[f64], rows: usize, y: &mut Vec<f64>) {
        debug_assert_eq!(x.len(), rows * self.in_dim);
        let w = store.slice(self.weight);
        let b = store.slice(self.bias);
        y.clear();
        y.reserve(rows * self.out_dim);
        for r in 0..rows {
            let xr = &x[r * self.in_dim..(r + 1) * self.in_dim];
            for o in 0..self.out_dim {
                let wo = &w[o * self.in_dim..(o + 1) * self.in_dim];
                y.push(b[o] + dot(xr, wo));
            }
        }
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(
        &self,
        store: &ParamStore,
        x: &[f64],
        rows: usize,
        grad_y: &[f64],
        grads: &mut Gradients,
    ) -> Vec<f64> {
        let w = store.slice(self.weight);
        let mut grad_x = vec![0.0; rows * self.in_dim];
        for r in 0..rows {
            let gy = &grad_y[r * self.out_dim..(r + 1) * self.out_dim];
            let gx = &mut grad_x[r * self.in_dim..(r + 1) * self.in_dim];
            for o in 0..self.out_dim {
                let g = gy[o];
                if g == 0.0 {
                    continue;
                }
                axpy(g, &w[o * self.in_dim..(o + 1) * self.in_dim], gx);
            }
        }
        {
            let gw = grads.slice_mut(self.weight);
            for r in 0..rows {
                let xr = &x[r * self.in_dim..(r + 1) * self.in_dim];
                let gy = &grad_y[r * self.out_dim..(r + 1) * self.out_dim];
                for o in 0..self.out_dim {
                    let g = gy[o];
                    if g == 0.0 {
                        continue;
                    }
                    axpy(g, xr, &mut gw[o * self.in_dim..(o + 1) * self.in_dim]);
                }
            }
        }
        {
            let gb = grads.slice_mut(self.bias);
            for r in 0..rows {
                let gy = &grad_y[r * self.out_dim..(r + 1) * self.out_dim];
                for o in 0..self.out_dim {
                    gb[o] += gy[o];
                }
            }
        }
        grad_x
    }
}

/// ReLU-activated MLP. Hidden layers apply ReLU; the output layer is linear
/// (output nonlinearities are applied by callers).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Per-layer inputs cached by a forward pass, consumed by `backward`.
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    rows: usize,
}

impl Mlp {
    /// `dims` lists layer widths input-first, e.g. `[48, 32, 32, 6]`.
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least one layer");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64], rows: usize) -> (Vec<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut current = x.to_vec();
        let mut buf = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(std::mem::take(&mut current));
            layer.forward(store, inputs.last().unwrap(), rows, &mut buf);
            if i + 1 < self.layers.len() {
                buf.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            current = std::mem::take(&mut buf);
        }
        (current, MlpCache { inputs, rows })
    }

    pub fn forward_nocache(&self, store: &ParamStore, x: &[f64], rows: usize) -> Vec<f64> {
        let mut current = x.to_vec();
        let mut buf = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.forward(store, &current, rows, &mut buf);
            if i + 1 < self.layers.len() {
                buf.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut current, &mut buf);
        }
        current
    }

    /// Backpropagates `grad_out` through the cached forward pass, returning
    /// the gradient with respect to the input batch.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &MlpCache,
        grad_out: &[f64],
        grads: &mut Gradients,
    ) -> Vec<f64> {
        let mut grad = grad_out.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.inputs[i];
            grad = layer.backward(store, x, cache.rows, &grad, grads);
            if i > 0 {
                // ReLU mask: the cached input of layer i is the activated
                // output of layer i-1.
                for (g, a) in grad.iter_mut().zip(x.iter()) {
                    if *a <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
        }
        grad
    }
}

/// Adam with per-group learning rates.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: vec![0.0; store.len()],
            v: vec![0.0; store.len()],
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        lr_for: impl Fn(ParamGroup) -> f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let entries = store.entries().to_vec();
        let data = store.data_mut();
        let g = grads.data();
        for meta in &entries {
            let lr = lr_for(meta.group);
            for idx in meta.offset..meta.offset + meta.len {
                let grad = g[idx];
                self.m[idx] = self.beta1 * self.m[idx] + (1.0 - self.beta1) * grad;
                self.v[idx] = self.beta2 * self.v[idx] + (1.0 - self.beta2) * grad * grad;
                let m_hat = self.m[idx] / bc1;
                let v_hat = self.v[idx] / bc2;
                data[idx] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
