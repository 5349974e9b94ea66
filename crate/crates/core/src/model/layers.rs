//! Building blocks shared by both branches: linear maps, multi-head
//! attention, AdaLN modulation, patch layout and timestep embeddings.

use std::sync::Arc;

use rand::Rng;

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Mask, Real, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Xavier,
    Zero,
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = match init {
            Init::Zero => Tensor::zeros([fan_in, fan_out]),
            Init::Xavier => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::uniform([fan_in, fan_out], -a, a, rng)
            }
        };
        let w = store.add(format!("{name}.w"), w);
        let b = store.add(format!("{name}.b"), Tensor::zeros([1, fan_out]));
        Self { w, b, fan_in, fan_out }
    }

    /// `x · W + b` over the last axis.
    pub fn apply<F: Real>(&self, g: &mut Graph<F>, p: &[Var], x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w.0])?;
        let rank = g.shape(y).len();
        let b = if rank == 2 {
            p[self.b.0]
        } else {
            let mut s = vec![1; rank];
            s[rank - 1] = self.fan_out;
            g.reshape(p[self.b.0], s)?
        };
        g.add(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Attention {
    /// Fused query/key/value weights `[D, 3D]`. Keys carry no bias: a shared
    /// key offset cancels in the softmax.
    pub qkv: ParamId,
    pub q_bias: ParamId,
    pub v_bias: ParamId,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let a = (6.0 / (4 * dim) as f64).sqrt();
        Self {
            qkv: store.add(format!("{name}.qkv.w"), Tensor::uniform([dim, 3 * dim], -a, a, rng)),
            q_bias: store.add(format!("{name}.q.b"), Tensor::zeros([1, dim])),
            v_bias: store.add(format!("{name}.v.b"), Tensor::zeros([1, dim])),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, Init::Xavier, rng),
            heads,
            dim,
        }
    }

    /// Multi-head self-attention over `x: [B, n, D]` with a mask shared by
    /// every batch entry and head.
    pub fn apply<F: Real>(&self, g: &mut Graph<F>, p: &[Var], x: Var, mask: Option<&Arc<Mask>>) -> Result<Var> {
        let (b, n, d) = match g.shape(x) {
            &[b, n, d] => (b, n, d),
            s => return Err(Error::shape("self_attention", format!("expected [B, n, D], got {s:?}"))),
        };
        let h = self.heads;
        if d % h != 0 {
            return Err(Error::shape("self_attention", format!("width {d} not divisible by {h} heads")));
        }
        let dh = d / h;
        if d != self.dim {
            return Err(Error::shape("self_attention", format!("width {d}, expected {}", self.dim)));
        }
        let zeros = g.leaf(Tensor::zeros([1, d]));
        let bias = g.concat(&[p[self.q_bias.0], zeros, p[self.v_bias.0]], 1)?;
        let bias = g.reshape(bias, [1, 1, 3 * d])?;
        let qkv = g.matmul(x, p[self.qkv.0])?;
        let qkv = g.add(qkv, bias)?;
        let qkv = g.reshape(qkv, [b, n, 3, h, dh])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = g.reshape(qkv, [3, b * h, n, dh])?;
        let mut parts = [qkv; 3];
        for (i, part) in parts.iter_mut().enumerate() {
            let s = g.narrow(qkv, 0, i, 1)?;
            *part = g.reshape(s, [b * h, n, dh])?;
        }
        let o = g.attention(parts[0], parts[1], parts[2], mask)?;
        let o = g.reshape(o, [b, h, n, dh])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, [b, n, d])?;
        self.out.apply(g, p, o)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, Init::Xavier, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, Init::Xavier, rng),
        }
    }

    pub fn apply<F: Real>(&self, g: &mut Graph<F>, p: &[Var], x: Var) -> Result<Var> {
        let h = self.fc1.apply(g, p, x)?;
        let h = g.gelu(h);
        self.fc2.apply(g, p, h)
    }
}

/// Split the output of a modulation map `[T, k·D]` into `k` per-frame
/// tensors shaped `[T, 1, D]`.
pub fn modulation_chunks<F: Real>(
    g: &mut Graph<F>,
    p: &[Var],
    map: &Linear,
    cond: Var,
    chunks: usize,
) -> Result<Vec<Var>> {
    let frames = g.shape(cond)[0];
    let dim = map.fan_out / chunks;
    let params = map.apply(g, p, cond)?;
    (0..chunks)
        .map(|i| {
            let c = g.narrow(params, 1, i * dim, dim)?;
            g.reshape(c, [frames, 1, dim])
        })
        .collect()
}

/// `layer_normalize(x) · (1 + scale) + shift` with per-frame `scale`,
/// `shift: [T, 1, D]` broadcast over `x: [T, n, D]`.
pub fn modulate<F: Real>(g: &mut Graph<F>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = g.layer_norm(x, F::from_f64_lossy(LN_EPS))?;
    let scaled = g.mul(n, scale)?;
    let y = g.add(n, scaled)?;
    g.add(y, shift)
}

/// AdaLN: the linear `map` turns the per-frame condition `cond: [T, D]`
/// into `(shift, scale, gate)`. Returns the modulated input and the gate
/// for the enclosing residual branch.
pub fn adaln_modulate<F: Real>(
    g: &mut Graph<F>,
    p: &[Var],
    map: &Linear,
    x: Var,
    cond: Var,
) -> Result<(Var, Var)> {
    let c = modulation_chunks(g, p, map, cond, 3)?;
    Ok((modulate(g, x, c[0], c[1])?, c[2]))
}

/// `x + gate · branch`.
pub fn gated_residual<F: Real>(g: &mut Graph<F>, x: Var, gate: Var, branch: Var) -> Result<Var> {
    let h = g.mul(branch, gate)?;
    g.add(x, h)
}

/// Per-frame means over the within-frame token axis of `video: [T, L, D]`
/// and `audio: [T, F/T, D]`.
pub fn temporal_average<F: Real>(g: &mut Graph<F>, video: Var, audio: Var) -> Result<(Var, Var)> {
    Ok((g.mean_axis(video, 1)?, g.mean_axis(audio, 1)?))
}

/// Rearrange `[T, c, h, w]` into per-frame patch vectors `[T, L, c·p²]`.
pub fn patch_rows<F: Real>(g: &mut Graph<F>, latent: Var, patch: usize) -> Result<Var> {
    let (t, c, h, w) = match g.shape(latent) {
        &[t, c, h, w] => (t, c, h, w),
        s => return Err(Error::shape("patchify", format!("expected [T, c, h, w], got {s:?}"))),
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape("patchify", format!("patch {patch} does not divide {h}x{w}")));
    }
    let (hp, wp) = (h / patch, w / patch);
    let x = g.reshape(latent, [t, c, hp, patch, wp, patch])?;
    let x = g.permute(x, &[0, 2, 4, 1, 3, 5])?;
    g.reshape(x, [t, hp * wp, c * patch * patch])
}

/// Inverse of [`patch_rows`].
pub fn unpatch_rows<F: Real>(
    g: &mut Graph<F>,
    rows: Var,
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<Var> {
    let shape = g.shape(rows).to_vec();
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::shape("unpatchify", format!("patch {patch} does not divide {height}x{width}")));
    }
    let (hp, wp) = (height / patch, width / patch);
    if shape.len() != 3 || shape[1] != hp * wp || shape[2] != channels * patch * patch {
        return Err(Error::shape(
            "unpatchify",
            format!("{shape:?} for geometry c={channels} h={height} w={width} p={patch}"),
        ));
    }
    let t = shape[0];
    let x = g.reshape(rows, [t, hp, wp, channels, patch, patch])?;
    let x = g.permute(x, &[0, 3, 1, 4, 2, 5])?;
    g.reshape(x, [t, channels, height, width])
}

/// Patch layout followed by the patch projection: `[T, c, h, w] -> [T, L, D]`.
pub fn patchify<F: Real>(g: &mut Graph<F>, p: &[Var], proj: &Linear, latent: Var, patch: usize) -> Result<Var> {
    let rows = patch_rows(g, latent, patch)?;
    proj.apply(g, p, rows)
}

/// Head projection followed by the inverse patch layout.
#[allow(clippy::too_many_arguments)]
pub fn unpatchify<F: Real>(
    g: &mut Graph<F>,
    p: &[Var],
    head: &Linear,
    tokens: Var,
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<Var> {
    let rows = head.apply(g, p, tokens)?;
    unpatch_rows(g, rows, channels, height, width, patch)
}

/// Scale applied to `t ∈ [0, 1]` before the sinusoids so the fastest
/// frequency resolves the sampler's step sizes.
pub const TIME_SCALE: f64 = 1000.0;

/// Sinusoidal features `[cos(s·t·f_i), sin(s·t·f_i)]` with geometrically
/// spaced `f_i = 10000^(-i/half)`, one row per timestep.
pub fn timestep_sinusoids<F: Real>(ts: &[f64], dim: usize) -> Result<Tensor<F>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::invalid(format!("sinusoid width {dim} must be even and positive")));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let args: Vec<f64> = (0..half)
            .map(|i| TIME_SCALE * t * (-(10000f64.ln()) * i as f64 / half as f64).exp())
            .collect();
        data.extend(args.iter().map(|a| F::from_f64_lossy(a.cos())));
        data.extend(args.iter().map(|a| F::from_f64_lossy(a.sin())));
    }
    Tensor::from_vec([ts.len(), dim], data)
}

/// Fixed sin-cos table over integer positions, `[n, dim]`.
pub fn position_table<F: Real>(n: usize, dim: usize) -> Tensor<F> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(n * dim);
    for pos in 0..n {
        for i in 0..dim {
            let freq = (-(10000f64.ln()) * (i % half.max(1)) as f64 / half.max(1) as f64).exp();
            let a = pos as f64 * freq;
            data.push(F::from_f64_lossy(if i < half { a.sin() } else { a.cos() }));
        }
    }
    Tensor::from_vec([n, dim], data).unwrap()
}

/// 2-D table for an `rows × cols` patch grid: half the width encodes the
/// row, half the column. Shape `[rows·cols, dim]`.
pub fn grid_position_table<F: Real>(rows: usize, cols: usize, dim: usize) -> Tensor<F> {
    let half = dim / 2;
    let r = position_table::<F>(rows, half);
    let c = position_table::<F>(cols, dim - half);
    let mut data = Vec::with_capacity(rows * cols * dim);
    for i in 0..rows {
        for j in 0..cols {
            data.extend_from_slice(r.index0_slice(i));
            data.extend_from_slice(c.index0_slice(j));
        }
    }
    Tensor::from_vec([rows * cols, dim], data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check_many;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sinusoids_match_reference_table() {
        // Independently tabulated: t = 0.5, D = 8 -> args 500 * [1, 0.1, 0.01, 0.001].
        let want = [
            500f64.cos(),
            50f64.cos(),
            5f64.cos(),
            0.5f64.cos(),
            500f64.sin(),
            50f64.sin(),
            5f64.sin(),
            0.5f64.sin(),
        ];
        let got = timestep_sinusoids::<f64>(&[0.5], 8).unwrap();
        for (a, b) in got.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert!(timestep_sinusoids::<f64>(&[0.5], 7).is_err());
    }

    #[test]
    fn patch_round_trip_with_identity_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::default();
        let d = 4 * 2 * 2;
        let proj = Linear::new(&mut store, "proj", d, d, Init::Zero, &mut rng);
        let head = Linear::new(&mut store, "head", d, d, Init::Zero, &mut rng);
        let mut eye = Tensor::zeros([d, d]);
        for i in 0..d {
            eye.data_mut()[i * d + i] = 1.0;
        }
        store.tensors_mut()[proj.w.0] = eye.clone();
        store.tensors_mut()[head.w.0] = eye;

        let x = Tensor::<f64>::randn([2, 4, 8, 8], &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.leaf(x.clone());
        let tokens = patchify(&mut g, &p, &proj, xv, 2).unwrap();
        assert_eq!(g.shape(tokens), &[2, 16, 16]);
        let back = unpatchify(&mut g, &p, &head, tokens, 4, 8, 8, 2).unwrap();
        assert_eq!(g.value(back), &x);

        let rows = patch_rows(&mut g, xv, 1).unwrap();
        assert_eq!(g.shape(rows), &[2, 64, 4]);
        assert!(patch_rows(&mut g, xv, 3).is_err());
    }

    #[test]
    fn patch_layout_groups_spatial_neighbours() {
        // Frame 0, channel 0, pixel (row 2, col 3) lands in patch (1, 1),
        // local offset (0, 1) for p = 2.
        let mut x = Tensor::<f64>::zeros([1, 1, 4, 4]);
        x.data_mut()[2 * 4 + 3] = 1.0;
        let mut g = Graph::new();
        let xv = g.leaf(x);
        let rows = patch_rows(&mut g, xv, 2).unwrap();
        let v = g.value(rows);
        let patch = 2 + 1;
        assert_eq!(v.data()[patch * 4 + 1], 1.0);
        assert_eq!(v.sum(), 1.0);
    }

    #[test]
    fn zero_map_gives_plain_norm_and_zero_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::default();
        let map = Linear::new(&mut store, "mod", 6, 18, Init::Zero, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.leaf(Tensor::randn([3, 5, 6], &mut rng));
        let c = g.leaf(Tensor::randn([3, 6], &mut rng));
        let (y, gate) = adaln_modulate(&mut g, &p, &map, x, c).unwrap();
        let plain = crate::numerics::layer_normalize(g.value(x), LN_EPS).unwrap();
        assert_eq!(g.value(y), &plain);
        assert!(g.value(gate).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adaln_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs = vec![
            Tensor::<f64>::randn([2, 3, 4], &mut rng),
            Tensor::<f64>::randn([2, 4], &mut rng),
            Tensor::<f64>::randn([4, 12], &mut rng),
            Tensor::<f64>::randn([1, 12], &mut rng),
            Tensor::<f64>::randn([2, 3, 4], &mut rng),
        ];
        let rep = grad_check_many(
            |g, v| {
                let map = Linear { w: ParamId(2), b: ParamId(3), fan_in: 4, fan_out: 12 };
                let (y, gate) = adaln_modulate(g, v, &map, v[0], v[1])?;
                let out = gated_residual(g, v[0], gate, y)?;
                let out = g.mul(out, v[4])?;
                Ok(g.sum(out))
            },
            &xs,
            1e-5,
            None,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn temporal_average_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = Tensor::<f64>::randn([3, 5, 4], &mut rng);
        let a = Tensor::<f64>::randn([3, 2, 4], &mut rng);
        let mut g = Graph::new();
        let (vv, av) = (g.leaf(v.clone()), g.leaf(a.clone()));
        let (vm, am) = temporal_average(&mut g, vv, av).unwrap();
        assert_eq!(g.shape(vm), &[3, 1, 4]);
        for (src, got, n) in [(&v, g.value(vm), 5), (&a, g.value(am), 2)] {
            for t in 0..3 {
                for d in 0..4 {
                    let mut s = 0.0;
                    for l in 0..n {
                        s += src.data()[(t * n + l) * 4 + d];
                    }
                    assert!((got.data()[t * 4 + d] - s / n as f64).abs() < 1e-12);
                }
            }
        }
        // Constant tokens average to themselves; one token is the identity.
        let c = g.leaf(Tensor::full([2, 7, 3], 0.25));
        let one = g.leaf(v.narrow0(0, 1).unwrap().reshape([5, 1, 4]).unwrap());
        let (cm, om) = temporal_average(&mut g, c, one).unwrap();
        assert!(g.value(cm).data().iter().all(|&x| x == 0.25));
        assert_eq!(g.value(om).data(), v.index0_slice(0));
    }
}
