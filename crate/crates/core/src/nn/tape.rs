//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every primitive appends one node holding its output value and the ids of
//! its inputs. Node ids are handed out in creation order, so the tape is
//! topologically sorted by construction and the backward pass is a single
//! reverse sweep.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `b` is broadcast over the leading axes of `a`.
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    ScaleRows(Var, Vec<f64>),
    Tanh(Var),
    /// Keeps the inner tanh for the backward pass.
    Gelu(Var, Vec<f64>),
    Relu(Var),
    LayerNorm(Var, Vec<f64>),
    Reshape(Var),
    Concat(Var, Var),
    SwapLast(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Patchify(Var, Vec<usize>),
    Unpatchify(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn gelu_tanh(x: f64) -> f64 {
    (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh()
}

fn gelu_grad(x: f64, th: f64) -> f64 {
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// `c = alpha * op(a) * op(b) + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover the strided extents for these shapes; all
    // callers pass buffers sized from the same (m, k, n).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output-to-input index map for patch tiling of `[batch, n, n]` into
/// `[batch, (n/p)^2, p*p]`.
fn patch_permutation(batch: usize, n: usize, p: usize) -> Vec<usize> {
    let g = n / p;
    let mut perm = Vec::with_capacity(batch * n * n);
    for b in 0..batch {
        for bi in 0..g {
            for bj in 0..g {
                for ii in 0..p {
                    for jj in 0..p {
                        perm.push(b * n * n + (bi * p + ii) * n + bj * p + jj);
                    }
                }
            }
        }
    }
    perm
}

fn swap_last(t: &Tensor) -> Tensor {
    let shape = t.shape();
    let nd = shape.len();
    let (r, c) = (shape[nd - 2], shape[nd - 1]);
    let outer = t.numel() / (r * c);
    let src = t.data();
    let mut out = vec![0.0; t.numel()];
    for o in 0..outer {
        let base = o * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = src[base + i * c + j];
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape.swap(nd - 2, nd - 1);
    Tensor::new(new_shape, out).expect("same numel")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a differentiable input (parameter or input of interest).
    pub fn var(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "leaf")
    }

    /// Records a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// `a [.., k] x b [k, m] -> [.., m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ash, bsh) = (av.shape(), bv.shape());
        let k = *ash.last().unwrap();
        if bsh.len() != 2 || bsh[0] != k {
            return Err(Error::shape("matmul", format!("{ash:?} x {bsh:?}")));
        }
        let m = av.numel() / k;
        let n = bsh[1];
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            av.data(),
            (k as isize, 1),
            bv.data(),
            (n as isize, 1),
            0.0,
            &mut out,
        );
        let mut shape = ash.to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg, "matmul")
    }

    /// Elementwise sum; `b` may have a suffix shape of `a` and is broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ash, bsh) = (av.shape(), bv.shape());
        if bsh.len() > ash.len() || ash[ash.len() - bsh.len()..] != *bsh {
            return Err(Error::shape("add", format!("{ash:?} + {bsh:?}")));
        }
        let w = bv.numel();
        let bd = bv.data();
        let data: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % w])
            .collect();
        let value = Tensor::new(ash.to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg, "mul")
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let value = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(value, Op::Affine(x, scale), rg, "affine")
    }

    /// Multiplies every leading-axis row by a constant factor.
    pub fn scale_rows(&mut self, x: Var, factors: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != factors.len() {
            return Err(Error::shape(
                "scale_rows",
                format!("{} rows vs {} factors", xv.rows(), factors.len()),
            ));
        }
        let w = xv.row_len();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * factors[i / w])
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        self.push(value, Op::ScaleRows(x, factors.to_vec()), rg, "scale_rows")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(value, Op::Tanh(x), rg, "tanh")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let th: Vec<f64> = xv.data().iter().map(|&v| gelu_tanh(v)).collect();
        let data = xv.data().iter().zip(&th).map(|(&v, &h)| 0.5 * v * (1.0 + h)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        let th = if rg { th } else { Vec::new() };
        self.push(value, Op::Gelu(x, th), rg, "gelu")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg, "relu")
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let w = *xv.shape().last().unwrap();
        let rows = xv.numel() / w;
        let mut out = vec![0.0; xv.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        for (r, chunk) in xv.data().chunks(w).enumerate() {
            let mean = chunk.iter().sum::<f64>() / w as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in out[r * w..(r + 1) * w].iter_mut().zip(chunk) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        self.push(value, Op::LayerNorm(x, inv_std), rg, "layer_norm")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        self.push(value, Op::Reshape(x), rg, "reshape")
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ash, bsh) = (av.shape(), bv.shape());
        if ash.len() != bsh.len() || ash[..ash.len() - 1] != bsh[..bsh.len() - 1] {
            return Err(Error::shape("concat", format!("{ash:?} ++ {bsh:?}")));
        }
        let (wa, wb) = (*ash.last().unwrap(), *bsh.last().unwrap());
        let rows = av.numel() / wa;
        let mut data = Vec::with_capacity(av.numel() + bv.numel());
        for r in 0..rows {
            data.extend_from_slice(&av.data()[r * wa..(r + 1) * wa]);
            data.extend_from_slice(&bv.data()[r * wb..(r + 1) * wb]);
        }
        let mut shape = ash.to_vec();
        *shape.last_mut().unwrap() = wa + wb;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data)?, Op::Concat(a, b), rg, "concat")
    }

    /// Swaps the last two axes.
    pub fn swap_last(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() < 2 {
            return Err(Error::shape("swap_last", format!("{:?}", xv.shape())));
        }
        let value = swap_last(xv);
        let rg = self.rg(x);
        self.push(value, Op::SwapLast(x), rg, "swap_last")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.data().iter().sum::<f64>() / xv.numel() as f64);
        let rg = self.rg(x);
        self.push(value, Op::Mean(x), rg, "mean")
    }

    /// Sums over the last axis, dropping it (a 1-D input becomes `[1]`).
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let sh = xv.shape();
        let w = *sh.last().unwrap();
        let data: Vec<f64> = xv.data().chunks(w).map(|c| c.iter().sum()).collect();
        let shape = if sh.len() == 1 {
            vec![1]
        } else {
            sh[..sh.len() - 1].to_vec()
        };
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data)?, Op::SumLast(x), rg, "sum_last")
    }

    /// `[batch, n, n] -> [batch, (n/p)^2, p*p]`, row-major tiling.
    pub fn patchify(&mut self, x: Var, p: usize) -> Result<Var> {
        let xv = self.value(x);
        let sh = xv.shape();
        if sh.len() != 3 || sh[1] != sh[2] || p == 0 || sh[1] % p != 0 {
            return Err(Error::shape("patchify", format!("{sh:?} with patch {p}")));
        }
        let (b, n) = (sh[0], sh[1]);
        let perm = patch_permutation(b, n, p);
        let data = perm.iter().map(|&i| xv.data()[i]).collect();
        let value = Tensor::new(vec![b, (n / p) * (n / p), p * p], data)?;
        let rg = self.rg(x);
        self.push(value, Op::Patchify(x, perm), rg, "patchify")
    }

    /// Inverse of [`Tape::patchify`] for an `n x n` image.
    pub fn unpatchify(&mut self, x: Var, n: usize) -> Result<Var> {
        let xv = self.value(x);
        let sh = xv.shape();
        let ok = sh.len() == 3 && {
            let p2 = sh[2];
            let p = (p2 as f64).sqrt().round() as usize;
            p * p == p2 && p > 0 && n % p == 0 && sh[1] == (n / p) * (n / p)
        };
        if !ok {
            return Err(Error::shape("unpatchify", format!("{sh:?} into {n}x{n}")));
        }
        let b = sh[0];
        let p = (sh[2] as f64).sqrt().round() as usize;
        let perm = patch_permutation(b, n, p);
        let mut data = vec![0.0; xv.numel()];
        for (o, &i) in perm.iter().enumerate() {
            data[i] = xv.data()[o];
        }
        let value = Tensor::new(vec![b, n, n], data)?;
        let rg = self.rg(x);
        self.push(value, Op::Unpatchify(x, perm), rg, "unpatchify")
    }

    /// Reverse sweep from `output`, seeded with `seed` (same shape as the output).
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        if self.nodes.is_empty() || output.0 >= self.nodes.len() {
            return Err(Error::Usage(
                "backward called before the output was recorded on this tape".into(),
            ));
        }
        self.value(output).same_shape("backward seed", seed)?;
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(seed.clone());

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Convenience for scalar outputs.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::Usage(
                "backward called before the output was recorded on this tape".into(),
            ));
        }
        let seed = Tensor::full(self.value(output).shape(), 1.0);
        self.backward(output, &seed)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = bv.shape()[0];
                let n = bv.shape()[1];
                let m = av.numel() / k;
                if self.rg(*a) {
                    // dA = G B^T
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), (n as isize, 1), bv.data(), (1, n as isize), 0.0, &mut da);
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.rg(*b) {
                    // dB = A^T G
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), (1, k as isize), g.data(), (n as isize, 1), 0.0, &mut db);
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    let bv = self.value(*b);
                    let w = bv.numel();
                    let mut db = vec![0.0; w];
                    for (i, x) in g.data().iter().enumerate() {
                        db[i % w] += x;
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?);
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::Affine(x, s) => self.accumulate(grads, *x, g.scale(*s)),
            Op::ScaleRows(x, f) => {
                let w = g.row_len();
                let data = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v * f[i / w])
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::Tanh(x) => {
                let dx = g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y))?;
                self.accumulate(grads, *x, dx);
            }
            Op::Gelu(x, th) => {
                let data = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .zip(th)
                    .map(|((gi, &xi), &h)| gi * gelu_grad(xi, h))
                    .collect();
                let dx = Tensor::new(g.shape().to_vec(), data)?;
                self.accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let dx = g.zip_map(self.value(*x), |gi, xi| if xi > 0.0 { gi } else { 0.0 })?;
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm(x, inv_std) => {
                let y = &node.value;
                let w = *y.shape().last().unwrap();
                let mut dx = vec![0.0; y.numel()];
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &g.data()[r * w..(r + 1) * w];
                    let yr = &y.data()[r * w..(r + 1) * w];
                    let mg = gr.iter().sum::<f64>() / w as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                    for j in 0..w {
                        dx[r * w + j] = is * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::Reshape(x) => {
                let sh = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.reshape(&sh)?);
            }
            Op::Concat(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let wa = *av.shape().last().unwrap();
                let wb = *bv.shape().last().unwrap();
                let rows = av.numel() / wa;
                let mut da = Vec::with_capacity(av.numel());
                let mut db = Vec::with_capacity(bv.numel());
                for r in 0..rows {
                    let base = r * (wa + wb);
                    da.extend_from_slice(&g.data()[base..base + wa]);
                    db.extend_from_slice(&g.data()[base + wa..base + wa + wb]);
                }
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
            }
            Op::SwapLast(x) => self.accumulate(grads, *x, swap_last(g)),
            Op::Sum(x) => {
                let sh = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&sh, g.data()[0]));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let v = g.data()[0] / xv.numel() as f64;
                self.accumulate(grads, *x, Tensor::full(xv.shape(), v));
            }
            Op::SumLast(x) => {
                let xv = self.value(*x);
                let w = *xv.shape().last().unwrap();
                let data = (0..xv.numel()).map(|i| g.data()[i / w]).collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::Patchify(x, perm) => {
                let xv = self.value(*x);
                let mut dx = vec![0.0; xv.numel()];
                for (o, &i) in perm.iter().enumerate() {
                    dx[i] += g.data()[o];
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::Unpatchify(x, perm) => {
                let xv = self.value(*x);
                let dx = perm.iter().map(|&i| g.data()[i]).collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
        }
        Ok(())
    }
}

/// Records `inputs` as differentiable leaves, runs `graph` and returns the
/// leaf handles together with the output handle.
pub fn forward<F>(tape: &mut Tape, inputs: &[Tensor], graph: F) -> Result<(Vec<Var>, Var)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut vars = Vec::with_capacity(inputs.len());
    for t in inputs {
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "forward input" });
        }
        vars.push(tape.var(t.clone())?);
    }
    let out = graph(tape, &vars)?;
    Ok((vars, out))
}
