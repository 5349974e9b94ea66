//! Dynamically recorded operation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its value. [`Graph::backward`]
//! walks the nodes in reverse and accumulates adjoints. A graph is meant to
//! live for one forward/backward pass and is not shared across threads.

use std::sync::Arc;

use super::kernels::{self, Mask};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
    Softmax(Var),
    MeanAxis(Var, usize),
    Mean(Var),
    Sum(Var),
    LayerNorm { x: Var, inv_std: Vec<F> },
    Attention { q: Var, k: Var, v: Var, probs: Tensor<F> },
    Silu(Var),
    Gelu(Var),
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
}

pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
    bytes: usize,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bytes: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by recorded values and saved intermediates.
    pub fn activation_bytes(&self) -> usize {
        self.bytes
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.bytes += value.bytes();
        match &op {
            Op::Attention { probs, .. } => self.bytes += probs.bytes(),
            Op::LayerNorm { inv_std, .. } => self.bytes += inv_std.len() * F::BYTES,
            _ => {}
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::broadcast_zip(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::broadcast_zip(self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::broadcast_zip(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    /// `a: [.., k]` times `b: [k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let out = kernels::permute(self.value(a), perm)?;
        Ok(self.push(out, Op::Permute(a, perm.to_vec())))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = kernels::concat(&values, axis)?;
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis)))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = kernels::narrow(self.value(x), axis, start, len)?;
        Ok(self.push(out, Op::Narrow { x, axis, start }))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = kernels::softmax(self.value(a));
        self.push(out, Op::Softmax(a))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = kernels::mean_axis(self.value(a), axis)?;
        Ok(self.push(out, Op::MeanAxis(a, axis)))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        self.push(out, Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn layer_norm(&mut self, x: Var, eps: F) -> Result<Var> {
        let (out, inv_std) = kernels::layer_norm_forward(self.value(x), eps)?;
        Ok(self.push(out, Op::LayerNorm { x, inv_std }))
    }

    /// Batched attention, `q: [B,n,d]`, `k: [B,m,d]`, `v: [B,m,dv]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Option<&Arc<Mask>>) -> Result<Var> {
        let (out, probs) =
            kernels::attention_forward(self.value(q), self.value(k), self.value(v), mask.map(|m| m.as_ref()))?;
        Ok(self.push(out, Op::Attention { q, k, v, probs }))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * kernels::sigmoid(x));
        self.push(out, Op::Silu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::gelu);
        self.push(out, Op::Gelu(a))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients<F>> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::shape("backward", format!("output must be scalar, got {:?}", out.shape())));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out.shape().to_vec(), F::one()));

        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, kernels::sum_to_shape(&g, self.shape(*a)));
                    accumulate(&mut grads, *b, kernels::sum_to_shape(&g, self.shape(*b)));
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, kernels::sum_to_shape(&g, self.shape(*a)));
                    let neg = g.map(|x| -x);
                    accumulate(&mut grads, *b, kernels::sum_to_shape(&neg, self.shape(*b)));
                }
                Op::Mul(a, b) => {
                    let ga = kernels::broadcast_zip(&g, self.value(*b), |x, y| x * y)?;
                    let gb = kernels::broadcast_zip(&g, self.value(*a), |x, y| x * y)?;
                    accumulate(&mut grads, *a, kernels::sum_to_shape(&ga, self.shape(*a)));
                    accumulate(&mut grads, *b, kernels::sum_to_shape(&gb, self.shape(*b)));
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, g.map(|x| x * c));
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let k = bv.shape()[0];
                    let m = bv.shape()[1];
                    let rows = av.len() / k.max(1);
                    let mut ga = vec![F::zero(); av.len()];
                    // dA = dY Bᵀ
                    F::gemm(rows, m, k, F::one(), g.data(), (m as isize, 1), bv.data(), (1, m as isize), F::zero(), &mut ga, (k as isize, 1));
                    let mut gb = vec![F::zero(); bv.len()];
                    // dB = Aᵀ dY
                    F::gemm(k, rows, m, F::one(), av.data(), (1, k as isize), g.data(), (m as isize, 1), F::zero(), &mut gb, (m as isize, 1));
                    accumulate(&mut grads, *a, Tensor::from_vec(av.shape().to_vec(), ga)?);
                    accumulate(&mut grads, *b, Tensor::from_vec(bv.shape().to_vec(), gb)?);
                }
                Op::Reshape(a) => {
                    let shape = self.shape(*a).to_vec();
                    accumulate(&mut grads, *a, g.reshape(shape)?);
                }
                Op::Permute(a, perm) => {
                    let inv = kernels::inverse_permutation(perm);
                    accumulate(&mut grads, *a, kernels::permute(&g, &inv)?);
                }
                Op::Concat(parts, axis) => {
                    let mut start = 0;
                    for &p in parts {
                        let len = self.shape(p)[*axis];
                        accumulate(&mut grads, p, kernels::narrow(&g, *axis, start, len)?);
                        start += len;
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let xs = self.shape(*x);
                    let (outer, extent, inner) = kernels::split_at_axis(xs, *axis);
                    let len = g.shape()[*axis];
                    let mut full = vec![F::zero(); self.value(*x).len()];
                    for o in 0..outer {
                        let dst = o * extent * inner + start * inner;
                        full[dst..dst + len * inner]
                            .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(xs.to_vec(), full)?);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let dim = *y.shape().last().unwrap_or(&1);
                    let mut gx = Vec::with_capacity(y.len());
                    for (yr, gr) in y.data().chunks_exact(dim).zip(g.data().chunks_exact(dim)) {
                        let dot: F = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        gx.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - dot)));
                    }
                    accumulate(&mut grads, *a, Tensor::from_vec(y.shape().to_vec(), gx)?);
                }
                Op::MeanAxis(a, axis) => {
                    let xs = self.shape(*a).to_vec();
                    let inv = F::one() / F::from_usize(xs[*axis]).unwrap();
                    let scaled = g.map(|x| x * inv);
                    let full = kernels::broadcast_zip(&Tensor::zeros(xs.clone()), &scaled, |_, y| y)?;
                    accumulate(&mut grads, *a, full);
                }
                Op::Mean(a) => {
                    let xs = self.shape(*a).to_vec();
                    let n = F::from_usize(self.value(*a).len()).unwrap();
                    accumulate(&mut grads, *a, Tensor::full(xs, g.item() / n));
                }
                Op::Sum(a) => {
                    let xs = self.shape(*a).to_vec();
                    accumulate(&mut grads, *a, Tensor::full(xs, g.item()));
                }
                Op::LayerNorm { x, inv_std } => {
                    accumulate(&mut grads, *x, kernels::layer_norm_backward(&node.value, inv_std, &g));
                }
                Op::Attention { q, k, v, probs } => {
                    let (gq, gk, gv) = kernels::attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        probs,
                        &g,
                    );
                    accumulate(&mut grads, *q, gq);
                    accumulate(&mut grads, *k, gk);
                    accumulate(&mut grads, *v, gv);
                }
                Op::Silu(a) => {
                    let gx = self.value(*a).zip_map(&g, |x, gy| {
                        let s = kernels::sigmoid(x);
                        gy * s * (F::one() + x * (F::one() - s))
                    })?;
                    accumulate(&mut grads, *a, gx);
                }
                Op::Gelu(a) => {
                    let gx = self.value(*a).zip_map(&g, |x, gy| gy * kernels::gelu_grad(x))?;
                    accumulate(&mut grads, *a, gx);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += *x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Adjoints of the leaves reached by a backward pass.
pub struct Gradients<F: Real> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of `v`, or zeros shaped like `like` when `v` was not reached.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor<F> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_broadcast_backward_reduces() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_vec([2, 3], vec![1.; 6]).unwrap());
        let b = g.leaf(Tensor::from_vec([1, 3], vec![1.; 3]).unwrap());
        let c = g.add(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.; 6]);
        assert_eq!(grads.get(b).unwrap().data(), &[2.; 3]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros([2]));
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn reused_node_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec([1], vec![3.0]).unwrap());
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn activation_bytes_grow() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros([4, 4]));
        assert_eq!(g.activation_bytes(), 64);
        g.scale(x, 2.0);
        assert_eq!(g.activation_bytes(), 128);
    }
}
