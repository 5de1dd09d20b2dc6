//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Every node holds its forward value. Complex tensors are stored as real
//! tensors with a leading axis of length 2 (real plane block, imaginary plane
//! block). Gradients of complex nodes follow the same layout: the pair
//! `(∂L/∂re, ∂L/∂im)`.

use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::{dft_plane_real, idft_plane, note_residue, real_part_with_residue};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Dense row-major matrix used by the resampling op.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn add_at(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] += v;
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulPlanes(Var, Arc<Vec<f64>>),
    Sigmoid(Var),
    Silu(Var),
    Square(Var),
    Sqrt(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxLast(Var),
    Matmul(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    Attention { q: Var, k: Var, v: Var, scale: f64, probs: Vec<f64> },
    MeanRows(Var),
    Gather(Var, Arc<Vec<Option<usize>>>),
    ScalarMul(Var, Var),
    Dft(Var),
    IdftRe(Var),
    Power(Var),
    Magnitude(Var),
    SpectralMix { x: Var, w: Var, modes: Arc<Vec<usize>> },
    DepthwiseConv { x: Var, k: Var },
    Pointwise { x: Var, w: Var, b: Option<Var> },
    Resample { x: Var, rh: Arc<Matrix>, rw: Arc<Matrix> },
    Reshape(Var),
    OuterSub(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation for one backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient of a node; zeros when the seed does not reach it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.by_node[v.0].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Gradient of a parameter leaf, `None` when the tape never used it.
    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        self.params.get(&id).map(|&v| self.wrt(v))
    }

    /// Adds every parameter gradient into buffers aligned with `ParamSet`.
    pub fn accumulate_into(&self, acc: &mut [Tensor], scale: f64) {
        let mut ids: Vec<_> = self.params.iter().collect();
        ids.sort_by_key(|(id, _)| **id);
        for (id, &v) in ids {
            if let Some(g) = &self.by_node[v.0] {
                acc[id.0].axpy(scale, g);
            }
        }
    }
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::InvalidInput(format!("{op}: {detail}"))
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf bound to a parameter; repeated calls with the same id share a node.
    pub fn param(&mut self, ps: &ParamSet, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(ps.get(id).clone(), Op::Leaf);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.push(t, op)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a).map(f);
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    /// Multiplies every trailing `H×W` plane by a constant plane.
    pub fn mul_planes(&mut self, a: Var, plane: Arc<Vec<f64>>) -> Result<Var> {
        let n = plane.len();
        let va = self.value(a);
        if n == 0 || va.len() % n != 0 {
            return Err(shape_err("mul_planes", format!("{:?} by plane of {n}", va.shape())));
        }
        let data = va.data().iter().enumerate().map(|(i, x)| x * plane[i % n]).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, Op::MulPlanes(a, plane)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// `x·σ(x)`, the smooth gated unit used as the nonlinearity everywhere.
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Square root; the backward pass uses a zero subgradient at 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), |x| x.max(0.0).sqrt())
    }

    /// Absolute value with `sign(0) = 0` in the backward pass.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Softmax along the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = *v.shape().last().expect("non-empty shape");
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::SoftmaxLast(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a), "matmul lhs")?;
        let (k2, n) = dims2(self.shape(b), "matmul rhs")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dims {k} vs {k2}")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(a), "transpose")?;
        let out = transpose_raw(self.value(a).data(), m, n);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a)))
    }

    /// `[m, n] + [n]`, the bias broadcast across rows.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, n) = dims2(self.shape(a), "add_bias")?;
        if self.value(b).len() != n {
            return Err(shape_err("add_bias", format!("bias of {} for {n} columns", self.value(b).len())));
        }
        let bias = self.value(b).data().to_vec();
        let va = self.value(a);
        let data = va.data().iter().enumerate().map(|(i, x)| x + bias[i % n]).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddBias(a, b)))
    }

    /// Single-head scaled dot-product attention over token rows:
    /// `softmax(scale · Q Kᵀ) V`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
        let (t, d) = dims2(self.shape(q), "attention q")?;
        let (tk, dk) = dims2(self.shape(k), "attention k")?;
        let (tv, dv) = dims2(self.shape(v), "attention v")?;
        if d != dk || tk != tv {
            return Err(shape_err("attention", format!("q {t}x{d}, k {tk}x{dk}, v {tv}x{dv}")));
        }
        let (probs, out) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            t,
            tk,
            d,
            dv,
            scale,
        );
        Ok(self.push(Tensor::new(vec![t, dv], out)?, Op::Attention { q, k, v, scale, probs }))
    }

    /// `[m, n] -> [n]`, mean over rows.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(a), "mean_rows")?;
        let mut out = vec![0.0; n];
        for row in self.value(a).data().chunks(n) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        Ok(self.push(Tensor::new(vec![n], out)?, Op::MeanRows(a)))
    }

    /// Flat gather into `shape`; `None` entries read as zero.
    pub fn gather(&mut self, a: Var, idx: Arc<Vec<Option<usize>>>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let src = self.value(a).data();
        if idx.len() != n || idx.iter().flatten().any(|&i| i >= src.len()) {
            return Err(shape_err("gather", "index map does not fit".into()));
        }
        let data = idx.iter().map(|i| i.map_or(0.0, |i| src[i])).collect();
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(t, Op::Gather(a, idx)))
    }

    /// Picks single entries of a flat tensor.
    pub fn select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let idx: Vec<Option<usize>> = indices.iter().map(|&i| Some(i)).collect();
        self.gather(a, Arc::new(idx), &[indices.len()])
    }

    /// Scalar node `[1]` times a tensor.
    pub fn scalar_mul(&mut self, s: Var, x: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("scalar_mul", format!("scalar has shape {:?}", self.shape(s))));
        }
        let c = self.value(s).data()[0];
        let t = self.value(x).map(|v| c * v);
        Ok(self.push(t, Op::ScalarMul(s, x)))
    }

    /// Centered forward DFT of every plane: `[C, H, W]` real to `[2, C, H, W]`.
    pub fn dft(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = dims3(self.shape(x), "dft")?;
        let n = h * w;
        let mut out = vec![0.0; 2 * c * n];
        for ch in 0..c {
            let s = dft_plane_real(&self.value(x).data()[ch * n..(ch + 1) * n], h, w);
            write_complex(&mut out, c * n, ch * n, &s);
        }
        Ok(self.push(Tensor::new(vec![2, c, h, w], out)?, Op::Dft(x)))
    }

    /// Real part of the centered inverse DFT: `[2, C, H, W]` to `[C, H, W]`.
    pub fn idft_re(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = complex_dims(self.shape(x), "idft_re")?;
        let n = h * w;
        let mut out = Vec::with_capacity(c * n);
        for ch in 0..c {
            let s = read_complex(self.value(x).data(), c * n, ch * n, n);
            let (re, rel) = real_part_with_residue(&idft_plane(&s, h, w));
            note_residue(rel);
            out.extend(re);
        }
        Ok(self.push(Tensor::new(vec![c, h, w], out)?, Op::IdftRe(x)))
    }

    /// `re² + im²` of a complex node.
    pub fn power(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.first() != Some(&2) {
            return Err(shape_err("power", format!("not complex: {shape:?}")));
        }
        let half = self.value(x).len() / 2;
        let d = self.value(x).data();
        let out = (0..half).map(|i| d[i] * d[i] + d[half + i] * d[half + i]).collect();
        Ok(self.push(Tensor::new(shape[1..].to_vec(), out)?, Op::Power(x)))
    }

    /// `|X|` of a complex node, zero subgradient at the origin.
    pub fn magnitude(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.first() != Some(&2) {
            return Err(shape_err("magnitude", format!("not complex: {shape:?}")));
        }
        let half = self.value(x).len() / 2;
        let d = self.value(x).data();
        let out = (0..half).map(|i| d[i].hypot(d[half + i])).collect();
        Ok(self.push(Tensor::new(shape[1..].to_vec(), out)?, Op::Magnitude(x)))
    }

    /// Complex channel mixing on retained bins:
    /// `out[o, m] = Σ_i W[o, i, m] · X[i, m]` for `m` in `modes`, zero elsewhere.
    /// `x` is `[2, I, H, W]`, `w` is `[2, O, I, M]`.
    pub fn spectral_mix(&mut self, x: Var, w: Var, modes: Arc<Vec<usize>>) -> Result<Var> {
        let (ci, h, wd) = complex_dims(self.shape(x), "spectral_mix x")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[0] != 2 || ws[2] != ci || ws[3] != modes.len() {
            return Err(shape_err("spectral_mix", format!("weights {ws:?} for {ci} channels, {} modes", modes.len())));
        }
        if modes.iter().any(|&m| m >= h * wd) {
            return Err(shape_err("spectral_mix", "mode index outside the plane".into()));
        }
        let co = ws[1];
        let out = spectral_mix_forward(self.value(x).data(), self.value(w).data(), ci, co, h * wd, &modes);
        Ok(self.push(Tensor::new(vec![2, co, h, wd], out)?, Op::SpectralMix { x, w, modes }))
    }

    /// Per-channel 2D convolution, odd kernel, zero padding, same-size output.
    /// `x` is `[C, H, W]`, `k` is `[C, kh, kw]`.
    pub fn depthwise_conv(&mut self, x: Var, k: Var) -> Result<Var> {
        let (c, h, w) = dims3(self.shape(x), "depthwise_conv x")?;
        let (kc, kh, kw) = dims3(self.shape(k), "depthwise_conv k")?;
        if kc != c || kh % 2 == 0 || kw % 2 == 0 {
            return Err(shape_err("depthwise_conv", format!("kernel {kc}x{kh}x{kw} for {c} channels")));
        }
        let out = depthwise_forward(self.value(x).data(), self.value(k).data(), c, h, w, kh, kw);
        Ok(self.push(Tensor::new(vec![c, h, w], out)?, Op::DepthwiseConv { x, k }))
    }

    /// 1×1 channel mixing: `[I, H, W]` with `w: [O, I]`, optional `b: [O]`.
    pub fn pointwise(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (ci, h, wd) = dims3(self.shape(x), "pointwise x")?;
        let (co, ci2) = dims2(self.shape(w), "pointwise w")?;
        if ci != ci2 {
            return Err(shape_err("pointwise", format!("weights expect {ci2} channels, got {ci}")));
        }
        if let Some(b) = b {
            if self.value(b).len() != co {
                return Err(shape_err("pointwise", "bias length".into()));
            }
        }
        let n = h * wd;
        let mut out = matmul_raw(self.value(w).data(), self.value(x).data(), co, ci, n);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (o, chunk) in out.chunks_mut(n).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[o]);
            }
        }
        Ok(self.push(Tensor::new(vec![co, h, wd], out)?, Op::Pointwise { x, w, b }))
    }

    /// Separable linear resampling of every plane: `out[c] = Rh · x[c] · Rwᵀ`.
    pub fn resample(&mut self, x: Var, rh: Arc<Matrix>, rw: Arc<Matrix>) -> Result<Var> {
        let (c, h, w) = dims3(self.shape(x), "resample")?;
        if rh.cols != h || rw.cols != w {
            return Err(shape_err("resample", format!("{}x{} maps for {h}x{w} planes", rh.cols, rw.cols)));
        }
        let out = resample_forward(self.value(x).data(), c, h, w, &rh, &rw);
        Ok(self.push(Tensor::new(vec![c, rh.rows, rw.rows], out)?, Op::Resample { x, rh, rw }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// `[n] -> [n, k]`, entry `(i, j) = a_i - c_j`.
    pub fn outer_sub(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 1 {
            return Err(shape_err("outer_sub", format!("expected a vector, got {:?}", va.shape())));
        }
        let n = va.len();
        let k = c.len();
        let data = (0..n * k).map(|i| va.data()[i / k] - c[i % k]).collect();
        let t = Tensor::new(vec![n, k], data)?;
        Ok(self.push(t, Op::OuterSub(a, c)))
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let seed = Tensor::filled(self.shape(loss), 1.0);
        self.backward_with(&[(loss, seed)])
    }

    /// Reverse sweep from several seeded nodes. A tape supports one sweep.
    pub fn backward_with(&mut self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::InvalidState("tape already consumed by a backward pass".into()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            if g.shape() != self.shape(*v) {
                return Err(shape_err("backward", format!("seed {:?} for node {:?}", g.shape(), self.shape(*v))));
            }
            accumulate(&mut grads, *v, g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            by_node: grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.clone(),
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let like = |v: Var, data: Vec<f64>| Tensor::new(val(v).shape().to_vec(), data).expect("shape");
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                accumulate(grads, *a, like(*a, gd.iter().zip(vb).map(|(g, y)| g * y).collect()));
                accumulate(grads, *b, like(*b, gd.iter().zip(va).map(|(g, x)| g * x).collect()));
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.map(|x| c * x)),
            Op::MulPlanes(a, plane) => {
                let n = plane.len();
                let d = gd.iter().enumerate().map(|(i, x)| x * plane[i % n]).collect();
                accumulate(grads, *a, like(*a, d));
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect();
                accumulate(grads, *a, like(*a, d));
            }
            Op::Silu(a) => {
                let d = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    })
                    .collect();
                accumulate(grads, *a, like(*a, d));
            }
            Op::Square(a) => {
                let d = gd.iter().zip(val(*a).data()).map(|(g, x)| 2.0 * g * x).collect();
                accumulate(grads, *a, like(*a, d));
            }
            Op::Sqrt(a) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, &y)| if y > 0.0 { g / (2.0 * y) } else { 0.0 })
                    .collect();
                accumulate(grads, *a, like(*a, d));
            }
            Op::Abs(a) => {
                let d = gd.iter().zip(val(*a).data()).map(|(g, &x)| g * sign0(x)).collect();
                accumulate(grads, *a, like(*a, d));
            }
            Op::Sum(a) => accumulate(grads, *a, Tensor::filled(val(*a).shape(), gd[0])),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                accumulate(grads, *a, Tensor::filled(val(*a).shape(), gd[0] / n));
            }
            Op::SoftmaxLast(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().expect("shape");
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yy * (gg - dot);
                    }
                }
                accumulate(grads, *a, like(*a, d));
            }
            Op::Matmul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                let bt = transpose_raw(val(*b).data(), k, n);
                let at = transpose_raw(val(*a).data(), m, k);
                accumulate(grads, *a, like(*a, matmul_raw(gd, &bt, m, n, k)));
                accumulate(grads, *b, like(*b, matmul_raw(&at, gd, k, m, n)));
            }
            Op::Transpose(a) => {
                let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
                accumulate(grads, *a, like(*a, transpose_raw(gd, n, m)));
            }
            Op::AddBias(a, b) => {
                let n = val(*b).len();
                let mut db = vec![0.0; n];
                for row in gd.chunks(n) {
                    for (o, x) in db.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, like(*b, db));
            }
            Op::Attention { q, k, v, scale, probs } => {
                let (t, d) = (val(*q).shape()[0], val(*q).shape()[1]);
                let tk = val(*k).shape()[0];
                let dv = val(*v).shape()[1];
                let (dq, dk, dvv) = attention_backward(
                    val(*q).data(),
                    val(*k).data(),
                    val(*v).data(),
                    probs,
                    gd,
                    t,
                    tk,
                    d,
                    dv,
                    *scale,
                );
                accumulate(grads, *q, like(*q, dq));
                accumulate(grads, *k, like(*k, dk));
                accumulate(grads, *v, like(*v, dvv));
            }
            Op::MeanRows(a) => {
                let m = val(*a).shape()[0];
                let n = gd.len();
                let d = (0..m * n).map(|i| gd[i % n] / m as f64).collect();
                accumulate(grads, *a, like(*a, d));
            }
            Op::Gather(a, idx) => {
                let mut d = vec![0.0; val(*a).len()];
                for (gv, i) in gd.iter().zip(idx.iter()) {
                    if let Some(i) = i {
                        d[*i] += gv;
                    }
                }
                accumulate(grads, *a, like(*a, d));
            }
            Op::ScalarMul(s, x) => {
                let c = val(*s).data()[0];
                let ds: f64 = gd.iter().zip(val(*x).data()).map(|(a, b)| a * b).sum();
                accumulate(grads, *s, Tensor::scalar(ds));
                accumulate(grads, *x, g.map(|v| c * v));
            }
            Op::Dft(x) => {
                // real adjoint of shift∘F is HW · (centered inverse), real part kept
                let (c, h, w) = dims3(val(*x).shape(), "dft").expect("checked");
                let n = h * w;
                let mut d = Vec::with_capacity(c * n);
                for ch in 0..c {
                    let s = read_complex(gd, c * n, ch * n, n);
                    d.extend(idft_plane(&s, h, w).iter().map(|v| v.re * n as f64));
                }
                accumulate(grads, *x, like(*x, d));
            }
            Op::IdftRe(x) => {
                // adjoint of Re∘F⁻¹∘ishift applied to a real gradient
                let (c, h, w) = complex_dims(val(*x).shape(), "idft_re").expect("checked");
                let n = h * w;
                let mut d = vec![0.0; 2 * c * n];
                let inv = 1.0 / n as f64;
                for ch in 0..c {
                    let s: Vec<Complex64> = dft_plane_real(&gd[ch * n..(ch + 1) * n], h, w)
                        .into_iter()
                        .map(|v| v * inv)
                        .collect();
                    write_complex(&mut d, c * n, ch * n, &s);
                }
                accumulate(grads, *x, like(*x, d));
            }
            Op::Power(x) => {
                let xd = val(*x).data();
                let half = gd.len();
                let mut d = vec![0.0; 2 * half];
                for i in 0..half {
                    d[i] = 2.0 * xd[i] * gd[i];
                    d[half + i] = 2.0 * xd[half + i] * gd[i];
                }
                accumulate(grads, *x, like(*x, d));
            }
            Op::Magnitude(x) => {
                let xd = val(*x).data();
                let y = node.value.data();
                let half = gd.len();
                let mut d = vec![0.0; 2 * half];
                for i in 0..half {
                    if y[i] > 0.0 {
                        d[i] = xd[i] / y[i] * gd[i];
                        d[half + i] = xd[half + i] / y[i] * gd[i];
                    }
                }
                accumulate(grads, *x, like(*x, d));
            }
            Op::SpectralMix { x, w, modes } => {
                let xs = val(*x).shape();
                let (ci, n) = (xs[1], xs[2] * xs[3]);
                let co = val(*w).shape()[1];
                let (dx, dw) = spectral_mix_backward(val(*x).data(), val(*w).data(), gd, ci, co, n, modes);
                accumulate(grads, *x, like(*x, dx));
                accumulate(grads, *w, like(*w, dw));
            }
            Op::DepthwiseConv { x, k } => {
                let (c, h, w) = dims3(val(*x).shape(), "").expect("checked");
                let (_, kh, kw) = dims3(val(*k).shape(), "").expect("checked");
                let (dx, dk) = depthwise_backward(val(*x).data(), val(*k).data(), gd, c, h, w, kh, kw);
                accumulate(grads, *x, like(*x, dx));
                accumulate(grads, *k, like(*k, dk));
            }
            Op::Pointwise { x, w, b } => {
                let (ci, h, wd) = dims3(val(*x).shape(), "").expect("checked");
                let co = val(*w).shape()[0];
                let n = h * wd;
                let wt = transpose_raw(val(*w).data(), co, ci);
                accumulate(grads, *x, like(*x, matmul_raw(&wt, gd, ci, co, n)));
                let xt = transpose_raw(val(*x).data(), ci, n);
                accumulate(grads, *w, like(*w, matmul_raw(gd, &xt, co, n, ci)));
                if let Some(b) = b {
                    let db = gd.chunks(n).map(|c| c.iter().sum()).collect();
                    accumulate(grads, *b, like(*b, db));
                }
            }
            Op::Resample { x, rh, rw } => {
                let (c, h, w) = dims3(val(*x).shape(), "").expect("checked");
                let d = resample_backward(gd, c, h, w, rh, rw);
                accumulate(grads, *x, like(*x, d));
            }
            Op::Reshape(a) => accumulate(grads, *a, like(*a, gd.to_vec())),
            Op::OuterSub(a, c) => {
                let k = c.len();
                let d = gd.chunks(k).map(|r| r.iter().sum()).collect();
                accumulate(grads, *a, like(*a, d));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.axpy(1.0, &g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn dims2(s: &[usize], op: &str) -> Result<(usize, usize)> {
    match s {
        [a, b] => Ok((*a, *b)),
        _ => Err(shape_err(op, format!("expected 2D, got {s:?}"))),
    }
}

fn dims3(s: &[usize], op: &str) -> Result<(usize, usize, usize)> {
    match s {
        [a, b, c] => Ok((*a, *b, *c)),
        _ => Err(shape_err(op, format!("expected 3D, got {s:?}"))),
    }
}

fn complex_dims(s: &[usize], op: &str) -> Result<(usize, usize, usize)> {
    match s {
        [2, c, h, w] => Ok((*c, *h, *w)),
        _ => Err(shape_err(op, format!("expected [2, C, H, W], got {s:?}"))),
    }
}

fn write_complex(buf: &mut [f64], half: usize, offset: usize, s: &[Complex64]) {
    for (i, v) in s.iter().enumerate() {
        buf[offset + i] = v.re;
        buf[half + offset + i] = v.im;
    }
}

fn read_complex(buf: &[f64], half: usize, offset: usize, n: usize) -> Vec<Complex64> {
    (0..n).map(|i| Complex64::new(buf[offset + i], buf[half + offset + i])).collect()
}

/// `[m, k] · [k, n]`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    t: usize,
    tk: usize,
    d: usize,
    dv: usize,
    scale: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut probs = vec![0.0; t * tk];
    for i in 0..t {
        let qi = &q[i * d..(i + 1) * d];
        let row = &mut probs[i * tk..(i + 1) * tk];
        for (j, r) in row.iter_mut().enumerate() {
            let kj = &k[j * d..(j + 1) * d];
            *r = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
        }
        softmax_in_place(row);
    }
    let out = matmul_raw(&probs, v, t, tk, dv);
    (probs, out)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    g: &[f64],
    t: usize,
    tk: usize,
    d: usize,
    dv: usize,
    scale: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let pt = transpose_raw(probs, t, tk);
    let dvv = matmul_raw(&pt, g, tk, t, dv);
    // dS = P ⊙ (G Vᵀ - rowsum(P ⊙ G Vᵀ)), scaled
    let mut ds = vec![0.0; t * tk];
    for i in 0..t {
        let gi = &g[i * dv..(i + 1) * dv];
        let prow = &probs[i * tk..(i + 1) * tk];
        let drow = &mut ds[i * tk..(i + 1) * tk];
        let mut dot = 0.0;
        for (j, dr) in drow.iter_mut().enumerate() {
            let vj = &v[j * dv..(j + 1) * dv];
            *dr = gi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
            dot += prow[j] * *dr;
        }
        for (dr, p) in drow.iter_mut().zip(prow) {
            *dr = p * (*dr - dot) * scale;
        }
    }
    let dq = matmul_raw(&ds, k, t, tk, d);
    let dst = transpose_raw(&ds, t, tk);
    let dk = matmul_raw(&dst, q, tk, t, d);
    (dq, dk, dvv)
}

fn spectral_mix_forward(x: &[f64], w: &[f64], ci: usize, co: usize, n: usize, modes: &[usize]) -> Vec<f64> {
    let m = modes.len();
    let (xh, wh, oh) = (ci * n, co * ci * m, co * n);
    let mut out = vec![0.0; 2 * oh];
    for o in 0..co {
        for i in 0..ci {
            for (mi, &pos) in modes.iter().enumerate() {
                let widx = (o * ci + i) * m + mi;
                let (wr, wi) = (w[widx], w[wh + widx]);
                let (xr, xi) = (x[i * n + pos], x[xh + i * n + pos]);
                out[o * n + pos] += wr * xr - wi * xi;
                out[oh + o * n + pos] += wr * xi + wi * xr;
            }
        }
    }
    out
}

fn spectral_mix_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    ci: usize,
    co: usize,
    n: usize,
    modes: &[usize],
) -> (Vec<f64>, Vec<f64>) {
    let m = modes.len();
    let (xh, wh, oh) = (ci * n, co * ci * m, co * n);
    let mut dx = vec![0.0; 2 * xh];
    let mut dw = vec![0.0; 2 * wh];
    for o in 0..co {
        for i in 0..ci {
            for (mi, &pos) in modes.iter().enumerate() {
                let widx = (o * ci + i) * m + mi;
                let (wr, wi) = (w[widx], w[wh + widx]);
                let (xr, xi) = (x[i * n + pos], x[xh + i * n + pos]);
                let (gr, gi) = (g[o * n + pos], g[oh + o * n + pos]);
                // g · conj(w) and g · conj(x)
                dx[i * n + pos] += gr * wr + gi * wi;
                dx[xh + i * n + pos] += gi * wr - gr * wi;
                dw[widx] += gr * xr + gi * xi;
                dw[wh + widx] += gi * xr - gr * xi;
            }
        }
    }
    (dx, dw)
}

fn depthwise_forward(x: &[f64], k: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<f64> {
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let xp = &x[ch * h * w..(ch + 1) * h * w];
        let kp = &k[ch * kh * kw..(ch + 1) * kh * kw];
        let op = &mut out[ch * h * w..(ch + 1) * h * w];
        for a in 0..kh {
            for b in 0..kw {
                let kv = kp[a * kw + b];
                if kv == 0.0 {
                    continue;
                }
                let (di, dj) = (a as isize - ph as isize, b as isize - pw as isize);
                for i in 0..h {
                    let si = i as isize + di;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let srow = &xp[si as usize * w..(si as usize + 1) * w];
                    let orow = &mut op[i * w..(i + 1) * w];
                    let j0 = (-dj).max(0) as usize;
                    let j1 = (w as isize - dj.max(0)) as usize;
                    for j in j0..j1 {
                        orow[j] += kv * srow[(j as isize + dj) as usize];
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward(
    x: &[f64],
    k: &[f64],
    g: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (ph, pw) = (kh / 2, kw / 2);
    let mut dx = vec![0.0; c * h * w];
    let mut dk = vec![0.0; c * kh * kw];
    for ch in 0..c {
        let off = ch * h * w;
        for a in 0..kh {
            for b in 0..kw {
                let kv = k[ch * kh * kw + a * kw + b];
                let (di, dj) = (a as isize - ph as isize, b as isize - pw as isize);
                let mut acc = 0.0;
                for i in 0..h {
                    let si = i as isize + di;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let si = si as usize;
                    let j0 = (-dj).max(0) as usize;
                    let j1 = (w as isize - dj.max(0)) as usize;
                    for j in j0..j1 {
                        let sj = (j as isize + dj) as usize;
                        let gv = g[off + i * w + j];
                        acc += gv * x[off + si * w + sj];
                        dx[off + si * w + sj] += kv * gv;
                    }
                }
                dk[ch * kh * kw + a * kw + b] = acc;
            }
        }
    }
    (dx, dk)
}

pub(crate) fn resample_forward(x: &[f64], c: usize, h: usize, w: usize, rh: &Matrix, rw: &Matrix) -> Vec<f64> {
    let (h2, w2) = (rh.rows, rw.rows);
    let mut out = Vec::with_capacity(c * h2 * w2);
    let rwt = transpose_raw(&rw.data, w2, w);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let tmp = matmul_raw(&rh.data, plane, h2, h, w);
        out.extend(matmul_raw(&tmp, &rwt, h2, w, w2));
    }
    out
}

fn resample_backward(g: &[f64], c: usize, h: usize, w: usize, rh: &Matrix, rw: &Matrix) -> Vec<f64> {
    let (h2, w2) = (rh.rows, rw.rows);
    let rht = transpose_raw(&rh.data, h2, h);
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let gp = &g[ch * h2 * w2..(ch + 1) * h2 * w2];
        let tmp = matmul_raw(&rht, gp, h, h2, w2);
        out.extend(matmul_raw(&tmp, &rw.data, h, w2, w));
    }
    out
}
