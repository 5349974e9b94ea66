//! Forward and backward kernels on plain tensors. The graph in
//! [`super::graph`] records these and replays the backward halves.

use super::tensor::{numel, strides, Real, Tensor};
use crate::error::{Error, Result};

/// Boolean `rows × cols` attention mask; `true` means the key is visible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::shape("mask", format!("{}x{} vs {}", rows, cols, allowed.len())));
        }
        Ok(Self { rows, cols, allowed })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Self { rows, cols, allowed }
    }

    /// Token `i` sees token `j` iff `group(j) <= group(i)` where
    /// `group(x) = x / group_size`. A group size of one is plain causal.
    pub fn block_causal(len: usize, group_size: usize) -> Self {
        Self::from_fn(len, len, |i, j| j / group_size <= i / group_size)
    }

    pub fn all(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| true)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }
}

pub(crate) fn check_attention_shapes<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    mask: Option<&Mask>,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 {
        return Err(Error::shape("attention", "q, k, v must be [batch, len, dim]"));
    }
    let (b, n, d) = (qs[0], qs[1], qs[2]);
    let (m, dv) = (ks[1], vs[2]);
    if d == 0 || ks[0] != b || vs[0] != b || ks[2] != d || vs[1] != m {
        return Err(Error::shape(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", qs, ks, vs),
        ));
    }
    if let Some(mask) = mask {
        if mask.rows != n || mask.cols != m {
            return Err(Error::shape(
                "attention",
                format!("mask {}x{} for scores {}x{}", mask.rows, mask.cols, n, m),
            ));
        }
        for i in 0..n {
            if !(0..m).any(|j| mask.get(i, j)) {
                return Err(Error::FullyMaskedRow { row: i });
            }
        }
    }
    Ok((b, n, m, d, dv))
}

/// Batched scaled dot-product attention. `q: [B,n,d]`, `k: [B,m,d]`,
/// `v: [B,m,dv]`. Returns the output `[B,n,dv]` and the attention
/// probabilities `[B,n,m]`. Masked keys get weight exactly zero.
pub fn attention_forward<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    mask: Option<&Mask>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let (b, n, m, d, dv) = check_attention_shapes(q, k, v, mask)?;
    let scale = F::one() / F::from_usize(d).unwrap().sqrt();
    let mut probs = vec![F::zero(); b * n * m];
    let mut out = vec![F::zero(); b * n * dv];
    for bi in 0..b {
        let qb = &q.data()[bi * n * d..(bi + 1) * n * d];
        let kb = &k.data()[bi * m * d..(bi + 1) * m * d];
        let vb = &v.data()[bi * m * dv..(bi + 1) * m * dv];
        let pb = &mut probs[bi * n * m..(bi + 1) * n * m];
        // scores = scale * q kᵀ
        F::gemm(n, d, m, scale, qb, (d as isize, 1), kb, (1, d as isize), F::zero(), pb, (m as isize, 1));
        for i in 0..n {
            let row = &mut pb[i * m..(i + 1) * m];
            let visible = |j: usize| mask.is_none_or(|mk| mk.get(i, j));
            let mut max = F::neg_infinity();
            for (j, &s) in row.iter().enumerate() {
                if visible(j) && s > max {
                    max = s;
                }
            }
            let mut total = F::zero();
            for (j, s) in row.iter_mut().enumerate() {
                if visible(j) {
                    *s = (*s - max).exp();
                    total += *s;
                } else {
                    *s = F::zero();
                }
            }
            for s in row.iter_mut() {
                *s /= total;
            }
        }
        let ob = &mut out[bi * n * dv..(bi + 1) * n * dv];
        F::gemm(n, m, dv, F::one(), pb, (m as isize, 1), vb, (dv as isize, 1), F::zero(), ob, (dv as isize, 1));
    }
    Ok((
        Tensor::from_vec([b, n, dv], out)?,
        Tensor::from_vec([b, n, m], probs)?,
    ))
}

/// Gradients of attention with respect to `(q, k, v)`.
pub fn attention_backward<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    probs: &Tensor<F>,
    grad_out: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (b, n, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let (m, dv) = (k.shape()[1], v.shape()[2]);
    let scale = F::one() / F::from_usize(d).unwrap().sqrt();
    let mut gq = vec![F::zero(); b * n * d];
    let mut gk = vec![F::zero(); b * m * d];
    let mut gv = vec![F::zero(); b * m * dv];
    let mut gs = vec![F::zero(); n * m];
    for bi in 0..b {
        let qb = &q.data()[bi * n * d..(bi + 1) * n * d];
        let kb = &k.data()[bi * m * d..(bi + 1) * m * d];
        let vb = &v.data()[bi * m * dv..(bi + 1) * m * dv];
        let pb = &probs.data()[bi * n * m..(bi + 1) * n * m];
        let gob = &grad_out.data()[bi * n * dv..(bi + 1) * n * dv];
        // dV = Pᵀ dO
        F::gemm(m, n, dv, F::one(), pb, (1, m as isize), gob, (dv as isize, 1), F::zero(), &mut gv[bi * m * dv..(bi + 1) * m * dv], (dv as isize, 1));
        // dP = dO Vᵀ
        F::gemm(n, dv, m, F::one(), gob, (dv as isize, 1), vb, (1, dv as isize), F::zero(), &mut gs, (m as isize, 1));
        // dS = P ⊙ (dP − Σ_j P dP)
        for i in 0..n {
            let p = &pb[i * m..(i + 1) * m];
            let g = &mut gs[i * m..(i + 1) * m];
            let dot: F = p.iter().zip(g.iter()).map(|(&a, &b)| a * b).sum();
            for (gj, &pj) in g.iter_mut().zip(p) {
                *gj = pj * (*gj - dot);
            }
        }
        F::gemm(n, m, d, scale, &gs, (m as isize, 1), kb, (d as isize, 1), F::zero(), &mut gq[bi * n * d..(bi + 1) * n * d], (d as isize, 1));
        F::gemm(m, n, d, scale, &gs, (1, m as isize), qb, (d as isize, 1), F::zero(), &mut gk[bi * m * d..(bi + 1) * m * d], (d as isize, 1));
    }
    (
        Tensor::from_vec([b, n, d], gq).unwrap(),
        Tensor::from_vec([b, m, d], gk).unwrap(),
        Tensor::from_vec([b, m, dv], gv).unwrap(),
    )
}

/// Single-head attention on 2-D operands, `q: [n,d]`, `k: [m,d]`, `v: [m,d']`.
pub fn attention<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    mask: Option<&Mask>,
) -> Result<Tensor<F>> {
    let lift = |t: &Tensor<F>| -> Result<Tensor<F>> {
        if t.rank() != 2 {
            return Err(Error::shape("attention", format!("expected rank 2, got {:?}", t.shape())));
        }
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        t.clone().reshape(s)
    };
    let (out, _) = attention_forward(&lift(q)?, &lift(k)?, &lift(v)?, mask)?;
    let s = out.shape()[1..].to_vec();
    out.reshape(s)
}

/// Normalize along the last axis to zero mean and unit variance. Returns
/// the output and the per-row inverse standard deviation.
pub fn layer_norm_forward<F: Real>(x: &Tensor<F>, eps: F) -> Result<(Tensor<F>, Vec<F>)> {
    let dim = *x.shape().last().ok_or_else(|| Error::shape("layer_norm", "rank 0 input"))?;
    if dim == 0 {
        return Err(Error::shape("layer_norm", "empty last axis"));
    }
    if eps <= F::zero() {
        return Err(Error::invalid("layer_norm eps must be positive"));
    }
    let rows = x.len() / dim;
    let nd = F::from_usize(dim).unwrap();
    let mut out = Vec::with_capacity(x.len());
    let mut inv = Vec::with_capacity(rows);
    for row in x.data().chunks_exact(dim) {
        let mean = row.iter().copied().sum::<F>() / nd;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nd;
        let is = F::one() / (var + eps).sqrt();
        out.extend(row.iter().map(|&v| (v - mean) * is));
        inv.push(is);
    }
    Ok((Tensor::from_vec(x.shape().to_vec(), out)?, inv))
}

pub fn layer_normalize<F: Real>(x: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
    layer_norm_forward(x, eps).map(|(y, _)| y)
}

pub fn layer_norm_backward<F: Real>(normed: &Tensor<F>, inv_std: &[F], grad: &Tensor<F>) -> Tensor<F> {
    let dim = *normed.shape().last().unwrap();
    let nd = F::from_usize(dim).unwrap();
    let mut out = Vec::with_capacity(normed.len());
    for ((y, g), &is) in normed.data().chunks_exact(dim).zip(grad.data().chunks_exact(dim)).zip(inv_std) {
        let mean_g = g.iter().copied().sum::<F>() / nd;
        let mean_gy = y.iter().zip(g).map(|(&a, &b)| a * b).sum::<F>() / nd;
        out.extend(y.iter().zip(g).map(|(&yi, &gi)| is * (gi - mean_g - yi * mean_gy)));
    }
    Tensor::from_vec(normed.shape().to_vec(), out).unwrap()
}

/// Softmax along the last axis with max subtraction.
pub fn softmax<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let dim = *x.shape().last().unwrap_or(&1);
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(dim.max(1)) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let start = out.len();
        out.extend(row.iter().map(|&v| (v - max).exp()));
        let total: F = out[start..].iter().copied().sum();
        for v in &mut out[start..] {
            *v /= total;
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out).unwrap()
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape("broadcast", format!("rank {:?} vs {:?}", a, b)));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape("broadcast", format!("{:?} vs {:?}", a, b))),
        })
        .collect()
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    shape
        .iter()
        .zip(out)
        .zip(s)
        .map(|((&d, &o), st)| if d == 1 && o != 1 { 0 } else { st })
        .collect()
}

/// Apply `f` elementwise with equal-rank broadcasting.
pub fn broadcast_zip<F: Real>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let n = numel(&out_shape);
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    if rank == 0 {
        return Ok(Tensor::scalar(f(a.item(), b.item())));
    }
    let last = out_shape[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (ad, bd) = (a.data(), b.data());
    let outer = n / last.max(1);
    for _ in 0..outer {
        let oa: usize = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
        let ob: usize = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
        for j in 0..last {
            out.push(f(ad[oa + j * la], bd[ob + j * lb]));
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Sum `grad` over the axes that were broadcast to reach its shape.
pub fn sum_to_shape<F: Real>(grad: &Tensor<F>, shape: &[usize]) -> Tensor<F> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let gs = grad.shape();
    let ts = broadcast_strides(shape, gs);
    let mut out = vec![F::zero(); numel(shape)];
    let rank = gs.len();
    let mut idx = vec![0usize; rank];
    for &g in grad.data() {
        let o: usize = idx.iter().zip(&ts).map(|(i, s)| i * s).sum();
        out[o] += g;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < gs[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::from_vec(shape.to_vec(), out).unwrap()
}

/// Reorder axes: output axis `i` is input axis `perm[i]`.
pub fn permute<F: Real>(x: &Tensor<F>, perm: &[usize]) -> Result<Tensor<F>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::shape("permute", format!("perm {:?} for rank {}", perm, rank)));
    }
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    if rank == 0 {
        return Ok(x.clone());
    }
    let last = out_shape[rank - 1];
    let ls = src_strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let data = x.data();
    for _ in 0..n / last.max(1) {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        for j in 0..last {
            out.push(data[base + j * ls]);
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::from_vec(out_shape, out)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

pub fn concat<F: Real>(parts: &[&Tensor<F>], axis: usize) -> Result<Tensor<F>> {
    let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::shape("concat", format!("axis {} for rank {}", axis, rank)));
    }
    for p in parts {
        let ok = p.rank() == rank
            && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::shape("concat", format!("{:?} vs {:?}", p.shape(), first.shape())));
        }
    }
    let (outer, _, inner) = split_at_axis(first.shape(), axis);
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::from_vec(shape, out)
}

pub fn narrow<F: Real>(x: &Tensor<F>, axis: usize, start: usize, len: usize) -> Result<Tensor<F>> {
    if axis >= x.rank() || start + len > x.shape()[axis] {
        return Err(Error::shape(
            "narrow",
            format!("axis {} range {}..{} of {:?}", axis, start, start + len, x.shape()),
        ));
    }
    let (outer, extent, inner) = split_at_axis(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * extent * inner + start * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::from_vec(shape, out)
}

/// Mean over `axis`, keeping it with extent one.
pub fn mean_axis<F: Real>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    if axis >= x.rank() {
        return Err(Error::shape("mean_axis", format!("axis {} for {:?}", axis, x.shape())));
    }
    let (outer, extent, inner) = split_at_axis(x.shape(), axis);
    let inv = F::one() / F::from_usize(extent.max(1)).unwrap();
    let mut out = vec![F::zero(); outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for e in 0..extent {
            let src = &x.data()[(o * extent + e) * inner..(o * extent + e + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        for d in dst.iter_mut() {
            *d *= inv;
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    Tensor::from_vec(shape, out)
}

/// Rows of `a: [.., k]` times `b: [k, m]`.
pub fn matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let k = *a.shape().last().ok_or_else(|| Error::shape("matmul", "rank 0 lhs"))?;
    if b.rank() != 2 || b.shape()[0] != k {
        return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let m = b.shape()[1];
    let rows = a.len() / k.max(1);
    let mut out = vec![F::zero(); rows * m];
    F::gemm(rows, k, m, F::one(), a.data(), (k as isize, 1), b.data(), (m as isize, 1), F::zero(), &mut out, (m as isize, 1));
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = m;
    Tensor::from_vec(shape, out)
}

#[inline]
pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub(crate) fn gelu<F: Real>(x: F) -> F {
    let c = F::from_f64_lossy(GELU_C);
    let a = F::from_f64_lossy(GELU_A);
    let half = F::from_f64_lossy(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::from_f64_lossy(GELU_C);
    let a = F::from_f64_lossy(GELU_A);
    let half = F::from_f64_lossy(0.5);
    let three = F::from_f64_lossy(3.0);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + th) + half * x * (F::one() - th * th) * c * (F::one() + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Two-loop reference attention for a single head.
    fn reference_attention(q: &[f64], k: &[f64], v: &[f64], n: usize, m: usize, d: usize, mask: Option<&Mask>) -> Vec<f64> {
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let mut w = vec![f64::NEG_INFINITY; m];
            for j in 0..m {
                if mask.is_none_or(|mk| mk.get(i, j)) {
                    w[j] = (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() / (d as f64).sqrt();
                }
            }
            let mx = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = w.iter().map(|&x| if x.is_finite() { (x - mx).exp() } else { 0.0 }).collect();
            let z: f64 = e.iter().sum();
            for j in 0..m {
                for c in 0..d {
                    out[i * d + c] += e[j] / z * v[j * d + c];
                }
            }
        }
        out
    }

    #[test]
    fn attention_single_entry_is_identity() {
        let x = Tensor::<f64>::from_vec([1, 1], vec![0.7]).unwrap();
        let out = attention(&x, &x, &x, None).unwrap();
        assert_eq!(out.data(), &[0.7]);
    }

    #[test]
    fn attention_self_mask_returns_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = Tensor::<f64>::randn([2, 3], &mut rng);
        let k = Tensor::<f64>::randn([2, 3], &mut rng);
        let v = Tensor::<f64>::randn([2, 3], &mut rng);
        let mask = Mask::from_fn(2, 2, |i, j| i == j);
        let out = attention(&q, &k, &v, Some(&mask)).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn attention_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = Tensor::<f64>::randn([4, 8], &mut rng);
        let k = Tensor::<f64>::randn([4, 8], &mut rng);
        let v = Tensor::<f64>::randn([4, 8], &mut rng);
        for mask in [None, Some(Mask::block_causal(4, 1))] {
            let out = attention(&q, &k, &v, mask.as_ref()).unwrap();
            let want = reference_attention(q.data(), k.data(), v.data(), 4, 4, 8, mask.as_ref());
            for (a, b) in out.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn attention_all_true_mask_equals_unmasked() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Tensor::<f32>::randn([5, 4], &mut rng);
        let k = Tensor::<f32>::randn([6, 4], &mut rng);
        let v = Tensor::<f32>::randn([6, 2], &mut rng);
        let a = attention(&q, &k, &v, None).unwrap();
        let b = attention(&q, &k, &v, Some(&Mask::all(5, 6))).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn attention_errors() {
        let x = Tensor::<f32>::zeros([2, 3]);
        let y = Tensor::<f32>::zeros([2, 4]);
        assert!(matches!(attention(&x, &y, &y, None), Err(Error::Shape { .. })));
        let mask = Mask::from_fn(2, 2, |i, _| i == 0);
        assert!(matches!(attention(&x, &x, &x, Some(&mask)), Err(Error::FullyMaskedRow { row: 1 })));
    }

    #[test]
    fn layer_norm_examples() {
        let x = Tensor::<f64>::from_vec([3], vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(layer_normalize(&x, 1e-5).unwrap().data(), &[0.0, 0.0, 0.0]);

        let a = 3.0;
        let x = Tensor::<f64>::from_vec([2], vec![-a, a]).unwrap();
        let y = layer_normalize(&x, 1e-5).unwrap();
        let corr = a / (a * a + 1e-5f64).sqrt();
        assert!((y.data()[0] + corr).abs() < 1e-15 && (y.data()[1] - corr).abs() < 1e-15);
        assert!((y.data()[1] - 1.0).abs() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn([16], &mut rng);
        let y = layer_normalize(&x, 1e-5).unwrap();
        let mean = y.mean();
        let var = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn broadcast_and_reduce() {
        let a = Tensor::<f64>::from_vec([2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::<f64>::from_vec([1, 3], vec![10., 20., 30.]).unwrap();
        let c = broadcast_zip(&a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.data(), &[11., 22., 33., 14., 25., 36.]);
        let r = sum_to_shape(&c, &[1, 3]);
        assert_eq!(r.data(), &[25., 47., 69.]);
        assert!(broadcast_zip(&a, &Tensor::zeros([2, 2]), |x, y| x + y).is_err());
    }

    #[test]
    fn permute_concat_narrow() {
        let x = Tensor::<f64>::from_vec([2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let t = permute(&x, &[1, 0]).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[1., 4., 2., 5., 3., 6.]);
        let c = concat(&[&x, &x], 1).unwrap();
        assert_eq!(c.shape(), &[2, 6]);
        assert_eq!(narrow(&c, 1, 3, 3).unwrap(), x);
        assert!(permute(&x, &[0, 0]).is_err());
    }
}
