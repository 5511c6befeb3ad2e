//! Minimal dense-tensor reverse-mode differentiation engine plus the layer
//! vocabulary both network branches need.
//!
//! The `Tape` is define-by-run: every builder computes its value eagerly and
//! records an op node; `backward` walks the nodes in reverse insertion order
//! (which is a reverse topological order, since ops only reference earlier
//! nodes). Parameters live in a `ParamStore` outside any tape; a tape copies
//! them in as named leaves and scatters gradients back after `backward`, so
//! gradients accumulate across tapes until explicitly zeroed.

use crate::core_types::{LdsfError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

/// A dense float64 tensor with an optional gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(LdsfError::DimensionMismatch(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        let grad = requires_grad.then(|| vec![0.0; data.len()]);
        Ok(Tensor {
            shape,
            data,
            grad,
            requires_grad,
        })
    }

    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Self {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; n], requires_grad).expect("consistent by construction")
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
struct ConvMeta {
    x: Var,
    k: Var,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    /// Cached im2col matrix, (c_in·kh·kw) × (oh·ow).
    cols: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// The shift amount is irrelevant to the gradient, so only the source
    /// var is retained.
    AddScalar(Var),
    Sum(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Elu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    /// (a, b, m, k, n): (m×k)·(k×n).
    MatMul(Var, Var, usize, usize, usize),
    /// Row-wise softmax, payload = row length.
    SoftmaxRows(Var, usize),
    /// Row-wise softmax over unmasked entries; masked outputs are 0.
    MaskedSoftmaxRows(Var, usize, Vec<bool>),
    Concat(Vec<Var>),
    /// out[i] = a[idx[i]] (duplicates allowed; grads accumulate).
    Gather(Var, Vec<usize>),
    /// (col of r, row of c) -> r×c matrix S[i][j] = col[i] + row[j].
    OuterSum(Var, Var),
    /// (mat r×c, row c): broadcast row add.
    AddRow(Var, Var, usize, usize),
    /// (x of (c, hw), s of (c)): per-channel scale.
    MulChannels(Var, Var, usize, usize),
    /// (x of (c, hw), b of (c)): per-channel shift.
    AddChannels(Var, Var, usize, usize),
    Conv2d(Box<ConvMeta>),
    /// Global average pool (c, hw) -> (c).
    Gap(Var, usize, usize),
}

struct Node {
    op: Op,
    value: Vec<f64>,
    grad: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    /// Present on parameter leaves: the store key to scatter gradients to.
    param_name: Option<String>,
}

/// A single forward/backward computation record.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node {
            op,
            value,
            grad,
            shape,
            requires_grad,
            param_name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable leaf (e.g. an input the caller wants gradients for).
    pub fn input(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data, true)?;
        Ok(self.push(Op::Leaf, t.shape, t.data, true))
    }

    /// A non-differentiable constant leaf.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data, false)?;
        Ok(self.push(Op::Leaf, t.shape, t.data, false))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(Op::Leaf, vec![1], vec![v], false)
    }

    /// Copies a stored parameter onto the tape as a differentiable leaf;
    /// [`Tape::apply_param_grads`] scatters its gradient back by name.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store.get(name)?;
        let v = self.push(Op::Leaf, t.shape.clone(), t.data.clone(), true);
        self.nodes[v.0].param_name = Some(name.to_string());
        Ok(v)
    }

    fn check_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(LdsfError::DimensionMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "add")?;
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), shape, value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "sub")?;
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), shape, value, rg))
    }

    /// Hadamard (element-wise) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "mul")?;
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), shape, value, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), shape, value, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(Op::AddScalar(a), shape, value, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = vec![self.nodes[a.0].value.iter().sum()];
        let rg = self.rg(a);
        self.push(Op::Sum(a), vec![1], value, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(op, shape, value, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        })
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Elu(a), |x| if x > 0.0 { x } else { x.exp() - 1.0 })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    /// (m×k)·(k×n) matrix product.
    pub fn matmul(&mut self, a: Var, b: Var, m: usize, k: usize, n: usize) -> Result<Var> {
        if self.nodes[a.0].value.len() != m * k || self.nodes[b.0].value.len() != k * n {
            return Err(LdsfError::DimensionMismatch(format!(
                "matmul ({m}x{k})·({k}x{n}) got lengths {} and {}",
                self.nodes[a.0].value.len(),
                self.nodes[b.0].value.len()
            )));
        }
        let mut value = vec![0.0; m * n];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            for i in 0..m {
                for kk in 0..k {
                    let aik = av[i * k + kk];
                    if aik == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        value[i * n + j] += aik * bv[kk * n + j];
                    }
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b, m, k, n), vec![m, n], value, rg))
    }

    /// Softmax along the last axis (rows of `row_len`).
    pub fn softmax_rows(&mut self, a: Var, row_len: usize) -> Result<Var> {
        let len = self.nodes[a.0].value.len();
        if row_len == 0 || len % row_len != 0 {
            return Err(LdsfError::DimensionMismatch(format!(
                "softmax row length {row_len} does not divide {len}"
            )));
        }
        let mut value = vec![0.0; len];
        for r in 0..len / row_len {
            let row = &self.nodes[a.0].value[r * row_len..(r + 1) * row_len];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - m).exp();
                value[r * row_len + j] = e;
                s += e;
            }
            for j in 0..row_len {
                value[r * row_len + j] /= s;
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        Ok(self.push(Op::SoftmaxRows(a, row_len), shape, value, rg))
    }

    /// Row-wise softmax over the unmasked entries; masked outputs are 0.
    /// A fully-masked row yields all zeros.
    pub fn masked_softmax_rows(&mut self, a: Var, row_len: usize, mask: &[bool]) -> Result<Var> {
        let len = self.nodes[a.0].value.len();
        if row_len == 0 || len % row_len != 0 || mask.len() != len {
            return Err(LdsfError::DimensionMismatch(format!(
                "masked softmax: len {len}, row {row_len}, mask {}",
                mask.len()
            )));
        }
        let mut value = vec![0.0; len];
        for r in 0..len / row_len {
            let o = r * row_len;
            let mut m = f64::NEG_INFINITY;
            for j in 0..row_len {
                if mask[o + j] {
                    m = m.max(self.nodes[a.0].value[o + j]);
                }
            }
            if !m.is_finite() {
                continue; // fully masked row
            }
            let mut s = 0.0;
            for j in 0..row_len {
                if mask[o + j] {
                    let e = (self.nodes[a.0].value[o + j] - m).exp();
                    value[o + j] = e;
                    s += e;
                }
            }
            for j in 0..row_len {
                value[o + j] /= s;
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        Ok(self.push(Op::MaskedSoftmaxRows(a, row_len, mask.to_vec()), shape, value, rg))
    }

    /// Flat concatenation (the caller tracks shapes).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(LdsfError::InvalidInput("concat of zero tensors".into()));
        }
        let mut value = Vec::new();
        let mut rg = false;
        for &p in parts {
            value.extend_from_slice(&self.nodes[p.0].value);
            rg |= self.rg(p);
        }
        let shape = vec![value.len()];
        Ok(self.push(Op::Concat(parts.to_vec()), shape, value, rg))
    }

    /// out[i] = a[idx[i]]; duplicate indices accumulate gradient.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let len = self.nodes[a.0].value.len();
        if idx.iter().any(|&i| i >= len) {
            return Err(LdsfError::DimensionMismatch(format!(
                "gather index out of range (len {len})"
            )));
        }
        let value: Vec<f64> = idx.iter().map(|&i| self.nodes[a.0].value[i]).collect();
        let rg = self.rg(a);
        Ok(self.push(Op::Gather(a, idx.to_vec()), vec![idx.len()], value, rg))
    }

    /// S[i][j] = col[i] + row[j].
    pub fn outer_sum(&mut self, col: Var, row: Var) -> Result<Var> {
        let r = self.nodes[col.0].value.len();
        let c = self.nodes[row.0].value.len();
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                value[i * c + j] = self.nodes[col.0].value[i] + self.nodes[row.0].value[j];
            }
        }
        let rg = self.rg(col) || self.rg(row);
        Ok(self.push(Op::OuterSum(col, row), vec![r, c], value, rg))
    }

    /// (r×c matrix) + broadcast row (c).
    pub fn add_row(&mut self, mat: Var, row: Var, r: usize, c: usize) -> Result<Var> {
        if self.nodes[mat.0].value.len() != r * c || self.nodes[row.0].value.len() != c {
            return Err(LdsfError::DimensionMismatch(format!(
                "add_row {r}x{c} got {} and {}",
                self.nodes[mat.0].value.len(),
                self.nodes[row.0].value.len()
            )));
        }
        let mut value = self.nodes[mat.0].value.clone();
        for i in 0..r {
            for j in 0..c {
                value[i * c + j] += self.nodes[row.0].value[j];
            }
        }
        let rg = self.rg(mat) || self.rg(row);
        Ok(self.push(Op::AddRow(mat, row, r, c), vec![r, c], value, rg))
    }

    /// Per-channel scale of a (channels, spatial) tensor.
    pub fn mul_channels(&mut self, x: Var, s: Var, channels: usize, hw: usize) -> Result<Var> {
        if self.nodes[x.0].value.len() != channels * hw
            || self.nodes[s.0].value.len() != channels
        {
            return Err(LdsfError::DimensionMismatch(format!(
                "mul_channels {channels}x{hw} got {} and {}",
                self.nodes[x.0].value.len(),
                self.nodes[s.0].value.len()
            )));
        }
        let mut value = self.nodes[x.0].value.clone();
        for ch in 0..channels {
            let sc = self.nodes[s.0].value[ch];
            for p in 0..hw {
                value[ch * hw + p] *= sc;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(Op::MulChannels(x, s, channels, hw), shape, value, rg))
    }

    /// Per-channel shift of a (channels, spatial) tensor.
    pub fn add_channels(&mut self, x: Var, b: Var, channels: usize, hw: usize) -> Result<Var> {
        if self.nodes[x.0].value.len() != channels * hw
            || self.nodes[b.0].value.len() != channels
        {
            return Err(LdsfError::DimensionMismatch(format!(
                "add_channels {channels}x{hw} got {} and {}",
                self.nodes[x.0].value.len(),
                self.nodes[b.0].value.len()
            )));
        }
        let mut value = self.nodes[x.0].value.clone();
        for ch in 0..channels {
            let sh = self.nodes[b.0].value[ch];
            for p in 0..hw {
                value[ch * hw + p] += sh;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Op::AddChannels(x, b, channels, hw), shape, value, rg))
    }

    /// 2-D convolution of x (c_in, h, w) with kernels (c_out, c_in, kh, kw),
    /// zero padding, via im2col.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        if self.nodes[x.0].value.len() != c_in * h * w
            || self.nodes[k.0].value.len() != c_out * c_in * kh * kw
        {
            return Err(LdsfError::DimensionMismatch(format!(
                "conv2d: x len {} (want {}), k len {} (want {})",
                self.nodes[x.0].value.len(),
                c_in * h * w,
                self.nodes[k.0].value.len(),
                c_out * c_in * kh * kw
            )));
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(LdsfError::InvalidParameter(format!(
                "conv2d geometry: {h}x{w} pad {pad} kernel {kh}x{kw} stride {stride}"
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let ck = c_in * kh * kw;
        let mut cols = vec![0.0; ck * oh * ow];
        {
            let xv = &self.nodes[x.0].value;
            for ci in 0..c_in {
                for ki in 0..kh {
                    for kj in 0..kw {
                        let row = (ci * kh + ki) * kw + kj;
                        for oi in 0..oh {
                            let ii = (oi * stride + ki) as isize - pad as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for oj in 0..ow {
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                cols[row * oh * ow + oi * ow + oj] =
                                    xv[(ci * h + ii as usize) * w + jj as usize];
                            }
                        }
                    }
                }
            }
        }
        let mut value = vec![0.0; c_out * oh * ow];
        {
            let kv = &self.nodes[k.0].value;
            for co in 0..c_out {
                for r in 0..ck {
                    let kvr = kv[co * ck + r];
                    if kvr == 0.0 {
                        continue;
                    }
                    for p in 0..oh * ow {
                        value[co * oh * ow + p] += kvr * cols[r * oh * ow + p];
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(k);
        let meta = ConvMeta {
            x,
            k,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
            cols,
        };
        Ok(self.push(Op::Conv2d(Box::new(meta)), vec![c_out, oh, ow], value, rg))
    }

    /// Global average pool (channels, spatial) -> (channels).
    pub fn global_avg_pool(&mut self, x: Var, channels: usize, hw: usize) -> Result<Var> {
        if self.nodes[x.0].value.len() != channels * hw || hw == 0 {
            return Err(LdsfError::DimensionMismatch(format!(
                "global_avg_pool {channels}x{hw} got {}",
                self.nodes[x.0].value.len()
            )));
        }
        let value: Vec<f64> = (0..channels)
            .map(|ch| self.nodes[x.0].value[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Op::Gap(x, channels, hw), vec![channels], value, rg))
    }

    /// Affine map y = xW + b for x of r rows.
    pub fn dense(&mut self, x: Var, w: Var, b: Var, r: usize, c_in: usize, c_out: usize) -> Result<Var> {
        let xw = self.matmul(x, w, r, c_in, c_out)?;
        self.add_row(xw, b, r, c_out)
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability p and survivors are scaled by 1/(1−p). Identity when not
    /// training or p = 0.
    pub fn dropout(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(LdsfError::InvalidParameter(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.nodes[x.0].value.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let m = self.constant(shape, mask)?;
        self.mul(x, m)
    }

    /// Squeeze-excitation: GAP → dense(c→c/r) → ReLU → dense(c/r→c) →
    /// sigmoid, multiplied back per channel. Parameter names are
    /// `{prefix}.w1/b1/w2/b2`; they must already be registered with shapes
    /// (c×cr), (cr), (cr×c), (c).
    pub fn se_block(
        &mut self,
        x: Var,
        store: &ParamStore,
        prefix: &str,
        channels: usize,
        hw: usize,
        reduction: usize,
    ) -> Result<Var> {
        let cr = (channels / reduction).max(1);
        let w1 = self.param(store, &format!("{prefix}.w1"))?;
        let b1 = self.param(store, &format!("{prefix}.b1"))?;
        let w2 = self.param(store, &format!("{prefix}.w2"))?;
        let b2 = self.param(store, &format!("{prefix}.b2"))?;
        let pooled = self.global_avg_pool(x, channels, hw)?;
        let z1 = self.dense(pooled, w1, b1, 1, channels, cr)?;
        let z1 = self.relu(z1);
        let z2 = self.dense(z1, w2, b2, 1, cr, channels)?;
        let gates = self.sigmoid(z2);
        self.mul_channels(x, gates, channels, hw)
    }

    /// Negative log-likelihood of `label` under softmax(logits).
    pub fn cross_entropy(&mut self, logits: Var, label: usize, classes: usize) -> Result<Var> {
        if self.nodes[logits.0].value.len() != classes || label >= classes {
            return Err(LdsfError::DimensionMismatch(format!(
                "cross_entropy: {} logits, {classes} classes, label {label}",
                self.nodes[logits.0].value.len()
            )));
        }
        let sm = self.softmax_rows(logits, classes)?;
        let p = self.gather(sm, &[label])?;
        let lp = self.log(p);
        Ok(self.scale(lp, -1.0))
    }

    /// Reverse-mode sweep from a scalar loss; adds ∂loss/∂node into every
    /// node's grad buffer (accumulating across calls on the same tape).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(LdsfError::InvalidInput(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.nodes[loss.0].grad[0] += 1.0;
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = std::mem::take(&mut self.nodes[i].grad);
            self.propagate(i, &g);
            self.nodes[i].grad = g;
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        macro_rules! gadd {
            ($v:expr, $idx:expr, $amt:expr) => {
                if self.nodes[$v.0].requires_grad {
                    self.nodes[$v.0].grad[$idx] += $amt;
                }
            };
        }
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                for (j, &gj) in g.iter().enumerate() {
                    gadd!(a, j, gj);
                    gadd!(b, j, gj);
                }
            }
            &Op::Sub(a, b) => {
                for (j, &gj) in g.iter().enumerate() {
                    gadd!(a, j, gj);
                    gadd!(b, j, -gj);
                }
            }
            &Op::Mul(a, b) => {
                for (j, &gj) in g.iter().enumerate() {
                    let av = self.nodes[a.0].value[j];
                    let bv = self.nodes[b.0].value[j];
                    gadd!(a, j, gj * bv);
                    gadd!(b, j, gj * av);
                }
            }
            &Op::Scale(a, c) => {
                for (j, &gj) in g.iter().enumerate() {
                    gadd!(a, j, gj * c);
                }
            }
            &Op::AddScalar(a) => {
                for (j, &gj) in g.iter().enumerate() {
                    gadd!(a, j, gj);
                }
            }
            &Op::Sum(a) => {
                let gj = g[0];
                for j in 0..self.nodes[a.0].value.len() {
                    gadd!(a, j, gj);
                }
            }
            &Op::Relu(a) => {
                for (j, &gj) in g.iter().enumerate() {
                    if self.nodes[a.0].value[j] > 0.0 {
                        gadd!(a, j, gj);
                    }
                }
            }
            &Op::LeakyRelu(a, slope) => {
                for (j, &gj) in g.iter().enumerate() {
                    let d = if self.nodes[a.0].value[j] > 0.0 { 1.0 } else { slope };
                    gadd!(a, j, gj * d);
                }
            }
            &Op::Elu(a) => {
                for (j, &gj) in g.iter().enumerate() {
                    let x = self.nodes[a.0].value[j];
                    let d = if x > 0.0 { 1.0 } else { self.nodes[i].value[j] + 1.0 };
                    gadd!(a, j, gj * d);
                }
            }
            &Op::Tanh(a) => {
                for (j, &gj) in g.iter().enumerate() {
                    let y = self.nodes[i].value[j];
                    gadd!(a, j, gj * (1.0 - y * y));
                }
            }
            &Op::Sigmoid(a) => {
                for (j, &gj) in g.iter().enumerate() {
                    let y = self.nodes[i].value[j];
                    gadd!(a, j, gj * y * (1.0 - y));
                }
            }
            &Op::Exp(a) => {
                for (j, &gj) in g.iter().enumerate() {
                    gadd!(a, j, gj * self.nodes[i].value[j]);
                }
            }
            &Op::Log(a) => {
                for (j, &gj) in g.iter().enumerate() {
                    gadd!(a, j, gj / self.nodes[a.0].value[j]);
                }
            }
            &Op::Abs(a) => {
                for (j, &gj) in g.iter().enumerate() {
                    let x = self.nodes[a.0].value[j];
                    let d = if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    gadd!(a, j, gj * d);
                }
            }
            &Op::MatMul(a, b, m, k, n) => {
                // dA = G·Bᵀ, dB = Aᵀ·G.
                for ii in 0..m {
                    for kk in 0..k {
                        if self.nodes[a.0].requires_grad {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[ii * n + j] * self.nodes[b.0].value[kk * n + j];
                            }
                            self.nodes[a.0].grad[ii * k + kk] += s;
                        }
                        if self.nodes[b.0].requires_grad {
                            let aik = self.nodes[a.0].value[ii * k + kk];
                            if aik != 0.0 {
                                for j in 0..n {
                                    self.nodes[b.0].grad[kk * n + j] += aik * g[ii * n + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::SoftmaxRows(a, row_len) => {
                let (a, row_len) = (*a, *row_len);
                let len = g.len();
                for r in 0..len / row_len {
                    let o = r * row_len;
                    let dot: f64 = (0..row_len)
                        .map(|j| g[o + j] * self.nodes[i].value[o + j])
                        .sum();
                    for j in 0..row_len {
                        let y = self.nodes[i].value[o + j];
                        gadd!(a, o + j, y * (g[o + j] - dot));
                    }
                }
            }
            Op::MaskedSoftmaxRows(a, row_len, mask) => {
                let (a, row_len) = (*a, *row_len);
                let mask = mask.clone();
                let len = g.len();
                for r in 0..len / row_len {
                    let o = r * row_len;
                    let dot: f64 = (0..row_len)
                        .filter(|&j| mask[o + j])
                        .map(|j| g[o + j] * self.nodes[i].value[o + j])
                        .sum();
                    for j in 0..row_len {
                        if mask[o + j] {
                            let y = self.nodes[i].value[o + j];
                            gadd!(a, o + j, y * (g[o + j] - dot));
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    for j in 0..len {
                        gadd!(p, j, g[off + j]);
                    }
                    off += len;
                }
            }
            Op::Gather(a, idx) => {
                let (a, idx) = (*a, idx.clone());
                for (j, &src) in idx.iter().enumerate() {
                    gadd!(a, src, g[j]);
                }
            }
            &Op::OuterSum(col, row) => {
                let c = self.nodes[row.0].value.len();
                for (j, &gj) in g.iter().enumerate() {
                    gadd!(col, j / c, gj);
                    gadd!(row, j % c, gj);
                }
            }
            &Op::AddRow(mat, row, r, c) => {
                for ii in 0..r {
                    for j in 0..c {
                        let gj = g[ii * c + j];
                        gadd!(mat, ii * c + j, gj);
                        gadd!(row, j, gj);
                    }
                }
            }
            &Op::MulChannels(x, s, channels, hw) => {
                for ch in 0..channels {
                    let sc = self.nodes[s.0].value[ch];
                    let mut acc = 0.0;
                    for p in 0..hw {
                        let gj = g[ch * hw + p];
                        gadd!(x, ch * hw + p, gj * sc);
                        acc += gj * self.nodes[x.0].value[ch * hw + p];
                    }
                    gadd!(s, ch, acc);
                }
            }
            &Op::AddChannels(x, b, channels, hw) => {
                for ch in 0..channels {
                    let mut acc = 0.0;
                    for p in 0..hw {
                        let gj = g[ch * hw + p];
                        gadd!(x, ch * hw + p, gj);
                        acc += gj;
                    }
                    gadd!(b, ch, acc);
                }
            }
            Op::Conv2d(meta) => {
                let (x, k) = (meta.x, meta.k);
                let (c_in, h, w) = (meta.c_in, meta.h, meta.w);
                let (c_out, kh, kw) = (meta.c_out, meta.kh, meta.kw);
                let (stride, pad, oh, ow) = (meta.stride, meta.pad, meta.oh, meta.ow);
                let ck = c_in * kh * kw;
                // dK = G · colsᵀ.
                if self.nodes[k.0].requires_grad {
                    let mut dk = vec![0.0; c_out * ck];
                    if let Op::Conv2d(meta) = &self.nodes[i].op {
                        for co in 0..c_out {
                            for r in 0..ck {
                                let mut s = 0.0;
                                for p in 0..oh * ow {
                                    s += g[co * oh * ow + p] * meta.cols[r * oh * ow + p];
                                }
                                dk[co * ck + r] = s;
                            }
                        }
                    }
                    for (j, &d) in dk.iter().enumerate() {
                        self.nodes[k.0].grad[j] += d;
                    }
                }
                // dX via dcols = Kᵀ · G, scattered back (col2im).
                if self.nodes[x.0].requires_grad {
                    let mut dcols = vec![0.0; ck * oh * ow];
                    for co in 0..c_out {
                        for r in 0..ck {
                            let kv = self.nodes[k.0].value[co * ck + r];
                            if kv == 0.0 {
                                continue;
                            }
                            for p in 0..oh * ow {
                                dcols[r * oh * ow + p] += kv * g[co * oh * ow + p];
                            }
                        }
                    }
                    for ci in 0..c_in {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let r = (ci * kh + ki) * kw + kj;
                                for oi in 0..oh {
                                    let ii = (oi * stride + ki) as isize - pad as isize;
                                    if ii < 0 || ii >= h as isize {
                                        continue;
                                    }
                                    for oj in 0..ow {
                                        let jj = (oj * stride + kj) as isize - pad as isize;
                                        if jj < 0 || jj >= w as isize {
                                            continue;
                                        }
                                        self.nodes[x.0].grad
                                            [(ci * h + ii as usize) * w + jj as usize] +=
                                            dcols[r * oh * ow + oi * ow + oj];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            &Op::Gap(x, channels, hw) => {
                let inv = 1.0 / hw as f64;
                for ch in 0..channels {
                    let gj = g[ch] * inv;
                    for p in 0..hw {
                        gadd!(x, ch * hw + p, gj);
                    }
                }
            }
        }
    }

    /// Adds this tape's parameter-leaf gradients into the store (by name).
    pub fn apply_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        for node in &self.nodes {
            if let Some(name) = &node.param_name {
                let t = store.get_mut(name)?;
                let grad = t.grad.as_mut().ok_or_else(|| {
                    LdsfError::InvalidInput(format!("parameter {name} has no grad buffer"))
                })?;
                if grad.len() != node.grad.len() {
                    return Err(LdsfError::DimensionMismatch(format!(
                        "parameter {name} grad length changed"
                    )));
                }
                for (gv, nv) in grad.iter_mut().zip(&node.grad) {
                    *gv += nv;
                }
            }
        }
        Ok(())
    }
}

/// Initialization schemes for [`ParamStore::register`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Glorot-uniform with fan sizes inferred from the shape (matrix:
    /// (in, out); conv kernel (c_out, c_in, kh, kw): c_in·kh·kw / c_out·kh·kw).
    Glorot,
    Zeros,
    Constant(f64),
}

#[derive(Debug, Clone, Default)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Named parameter map with deterministic (lexicographic) iteration order,
/// seeded initialization, and Adam state.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    adam: BTreeMap<String, AdamState>,
    pub seed: u64,
    step: u64,
}

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325_u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: BTreeMap::new(),
            adam: BTreeMap::new(),
            seed,
            step: 0,
        }
    }

    /// Registers a parameter if absent. Initialization depends only on
    /// (store seed, name), not registration order.
    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        if self.params.contains_key(name) {
            return Ok(());
        }
        let n: usize = shape.iter().product();
        if n == 0 {
            return Err(LdsfError::InvalidParameter(format!(
                "parameter {name} has empty shape {shape:?}"
            )));
        }
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Constant(c) => vec![c; n],
            Init::Glorot => {
                let (fan_in, fan_out) = match shape.len() {
                    1 => (shape[0], shape[0]),
                    2 => (shape[0], shape[1]),
                    4 => (shape[1] * shape[2] * shape[3], shape[0] * shape[2] * shape[3]),
                    _ => (n, n),
                };
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
                (0..n).map(|_| rng.random_range(-limit..limit)).collect()
            }
        };
        self.params
            .insert(name.to_string(), Tensor::new(shape.to_vec(), data, true)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| LdsfError::InvalidInput(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| LdsfError::InvalidInput(format!("unknown parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            t.zero_grad();
        }
    }

    /// Standard bias-corrected Adam with one shared step counter.
    pub fn adam_step(&mut self, lr: f64, betas: (f64, f64), eps: f64) {
        self.adam_step_grouped(|_| lr, betas, eps);
    }

    /// Adam with a per-parameter learning rate chosen by name (used for the
    /// per-branch rate groups).
    pub fn adam_step_grouped(
        &mut self,
        lr_for: impl Fn(&str) -> f64,
        (beta1, beta2): (f64, f64),
        eps: f64,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, tensor) in self.params.iter_mut() {
            let Some(grad) = tensor.grad.as_ref() else {
                continue;
            };
            let st = self.adam.entry(name.clone()).or_insert_with(|| AdamState {
                m: vec![0.0; tensor.data.len()],
                v: vec![0.0; tensor.data.len()],
            });
            let lr = lr_for(name);
            for j in 0..tensor.data.len() {
                let g = grad[j];
                st.m[j] = beta1 * st.m[j] + (1.0 - beta1) * g;
                st.v[j] = beta2 * st.v[j] + (1.0 - beta2) * g * g;
                let mhat = st.m[j] / bc1;
                let vhat = st.v[j] / bc2;
                tensor.data[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// Writes `{stem}.json` (manifest: seed, hyperparameters, parameter
    /// names/shapes, blob digest) and `{stem}.bin` (little-endian float64
    /// per-parameter blobs concatenated in manifest order). Returns the
    /// blob's SHA-256 hex digest.
    pub fn save_checkpoint(
        &self,
        dir: &Path,
        stem: &str,
        hyperparameters: &serde_json::Value,
    ) -> Result<String> {
        let mut blob = Vec::new();
        let mut entries = Vec::new();
        for (name, t) in &self.params {
            entries.push(ManifestParam {
                name: name.clone(),
                shape: t.shape.clone(),
            });
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = hex_digest(&blob);
        let manifest = Manifest {
            seed: self.seed,
            hyperparameters: hyperparameters.clone(),
            params: entries,
            blob_sha256: digest.clone(),
        };
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        std::fs::write(dir.join(format!("{stem}.bin")), blob)?;
        Ok(digest)
    }

    /// Loads a checkpoint written by [`ParamStore::save_checkpoint`],
    /// verifying blob length and digest.
    pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<(Self, serde_json::Value)> {
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        let blob = std::fs::read(dir.join(format!("{stem}.bin")))?;
        let expect: usize = manifest
            .params
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum();
        if blob.len() != expect * 8 {
            return Err(LdsfError::Format(format!(
                "checkpoint blob is {} bytes, manifest implies {}",
                blob.len(),
                expect * 8
            )));
        }
        if hex_digest(&blob) != manifest.blob_sha256 {
            return Err(LdsfError::Format("checkpoint blob digest mismatch".into()));
        }
        let mut store = ParamStore::new(manifest.seed);
        let mut off = 0;
        for p in &manifest.params {
            let n: usize = p.shape.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|j| {
                    let b: [u8; 8] = blob[off + j * 8..off + j * 8 + 8].try_into().unwrap();
                    f64::from_le_bytes(b)
                })
                .collect();
            off += n * 8;
            store
                .params
                .insert(p.name.clone(), Tensor::new(p.shape.clone(), data, true)?);
        }
        Ok((store, manifest.hyperparameters))
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize)]
struct ManifestParam {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    hyperparameters: serde_json::Value,
    params: Vec<ManifestParam>,
    blob_sha256: String,
}
