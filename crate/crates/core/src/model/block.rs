//! One two-branch block and its three cross-modal fusion variants.

use std::sync::Arc;

use rand::Rng;

use super::layers::{adaln_modulate, gated_residual, temporal_average, Attention, Init, Linear, Mlp};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Mask, Real, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockVariant {
    /// Joint block-causal self-attention over concatenated per-frame tokens.
    ConcatAttention,
    /// Feed-forward modulation driven by the other branch's frame averages.
    TemporalAverage,
    /// As above, with the time/class condition added to the averages.
    TemporalAveragePlusCond,
}

impl BlockVariant {
    pub fn tag(self) -> &'static str {
        match self {
            Self::ConcatAttention => "a",
            Self::TemporalAverage => "b",
            Self::TemporalAveragePlusCond => "c",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag.trim().to_ascii_lowercase().as_str() {
            "a" => Ok(Self::ConcatAttention),
            "b" => Ok(Self::TemporalAverage),
            "c" => Ok(Self::TemporalAveragePlusCond),
            other => Err(Error::Config(format!("unknown block variant {other:?} (expected a, b or c)"))),
        }
    }
}

impl std::fmt::Display for BlockVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy)]
struct Site {
    modulation: Linear,
    attn: Attention,
}

#[derive(Debug, Clone)]
struct Branch {
    spatial: Option<Site>,
    temporal: Site,
    joint_mods: Vec<Linear>,
    ffn_mod: Linear,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    video: Branch,
    audio: Branch,
    joint_attn: Vec<Attention>,
}

/// Attention masks for one window geometry, shared by every block.
#[derive(Debug, Clone)]
pub struct BlockMasks {
    pub temporal: Arc<Mask>,
    pub audio: Arc<Mask>,
    pub joint: Option<Arc<Mask>>,
}

impl BlockMasks {
    pub fn new(frames: usize, patches: usize, segments: usize, variant: BlockVariant) -> Self {
        Self {
            temporal: Arc::new(Mask::block_causal(frames, 1)),
            audio: Arc::new(Mask::block_causal(frames * segments, segments)),
            joint: (variant == BlockVariant::ConcatAttention)
                .then(|| Arc::new(Mask::block_causal(frames * (patches + segments), patches + segments))),
        }
    }
}

impl BlockParams {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        variant: BlockVariant,
        joint_layers: usize,
        rng: &mut R,
    ) -> Self {
        let joint = if variant == BlockVariant::ConcatAttention { joint_layers } else { 0 };
        let mut branch = |store: &mut ParamStore<F>, tag: &str, spatial: bool| {
            let prefix = format!("{name}.{tag}");
            let mut site = |store: &mut ParamStore<F>, which: &str| Site {
                modulation: Linear::new(store, &format!("{prefix}.{which}_mod"), dim, 3 * dim, Init::Zero, rng),
                attn: Attention::new(store, &format!("{prefix}.{which}_attn"), dim, heads, rng),
            };
            let spatial = spatial.then(|| site(store, "spatial"));
            let temporal = site(store, "temporal");
            Branch {
                spatial,
                temporal,
                joint_mods: (0..joint)
                    .map(|j| Linear::new(store, &format!("{prefix}.joint{j}_mod"), dim, 3 * dim, Init::Zero, rng))
                    .collect(),
                ffn_mod: Linear::new(store, &format!("{prefix}.ffn_mod"), dim, 3 * dim, Init::Zero, rng),
                mlp: Mlp::new(store, &format!("{prefix}.mlp"), dim, mlp_hidden, rng),
            }
        };
        let video = branch(store, "video", true);
        let audio = branch(store, "audio", false);
        let joint_attn =
            (0..joint).map(|j| Attention::new(store, &format!("{name}.joint{j}_attn"), dim, heads, rng)).collect();
        Self { video, audio, joint_attn }
    }
}

/// Video `[T, L, D]`, audio `[T, F/T, D]`, condition `cond: [T, D]` (time
/// plus class embedding, before the nonlinearity). Returns updated tokens
/// with unchanged shapes.
#[allow(clippy::too_many_arguments)]
pub fn block_forward<F: Real>(
    g: &mut Graph<F>,
    p: &[Var],
    bp: &BlockParams,
    variant: BlockVariant,
    masks: &BlockMasks,
    video: Var,
    audio: Var,
    cond: Var,
) -> Result<(Var, Var)> {
    let (t, l, d) = match g.shape(video) {
        &[t, l, d] => (t, l, d),
        s => return Err(Error::shape("block_forward", format!("video tokens {s:?}, expected [T, L, D]"))),
    };
    let seg = match g.shape(audio) {
        &[ta, s, da] if ta == t && da == d => s,
        s => return Err(Error::shape("block_forward", format!("audio tokens {s:?} for video [{t}, {l}, {d}]"))),
    };
    if g.shape(cond) != [t, d] {
        return Err(Error::shape("block_forward", format!("condition {:?}, expected [{t}, {d}]", g.shape(cond))));
    }
    let act = g.silu(cond);

    // Video: spatial attention inside each frame, then causal attention
    // across frames at each patch position.
    let mut v = video;
    if let Some(site) = &bp.video.spatial {
        let (x, gate) = adaln_modulate(g, p, &site.modulation, v, act)?;
        let h = site.attn.apply(g, p, x, None)?;
        v = gated_residual(g, v, gate, h)?;
    }
    let site = &bp.video.temporal;
    let (x, gate) = adaln_modulate(g, p, &site.modulation, v, act)?;
    let x = g.permute(x, &[1, 0, 2])?;
    let h = site.attn.apply(g, p, x, Some(&masks.temporal))?;
    let h = g.permute(h, &[1, 0, 2])?;
    v = gated_residual(g, v, gate, h)?;

    // Audio: causal attention over the flattened segment sequence.
    let site = &bp.audio.temporal;
    let (x, gate) = adaln_modulate(g, p, &site.modulation, audio, act)?;
    let x = g.reshape(x, [1, t * seg, d])?;
    let h = site.attn.apply(g, p, x, Some(&masks.audio))?;
    let h = g.reshape(h, [t, seg, d])?;
    let mut a = gated_residual(g, audio, gate, h)?;

    let (cond_v, cond_a) = match variant {
        BlockVariant::ConcatAttention => {
            let mask = match &masks.joint {
                Some(mask) if !bp.joint_attn.is_empty() => mask,
                _ => return Err(Error::State("block built without joint attention parameters".into())),
            };
            let layers = bp.joint_attn.iter().zip(&bp.video.joint_mods).zip(&bp.audio.joint_mods);
            for ((attn, vm), am) in layers {
                let (xv, gv) = adaln_modulate(g, p, vm, v, act)?;
                let (xa, ga) = adaln_modulate(g, p, am, a, act)?;
                let av = g.concat(&[xv, xa], 1)?;
                let av = g.reshape(av, [1, t * (l + seg), d])?;
                let h = attn.apply(g, p, av, Some(mask))?;
                let h = g.reshape(h, [t, l + seg, d])?;
                let hv = g.narrow(h, 1, 0, l)?;
                let ha = g.narrow(h, 1, l, seg)?;
                v = gated_residual(g, v, gv, hv)?;
                a = gated_residual(g, a, ga, ha)?;
            }
            (act, act)
        }
        BlockVariant::TemporalAverage | BlockVariant::TemporalAveragePlusCond => {
            let (vbar, abar) = temporal_average(g, v, a)?;
            let mut vbar = g.reshape(vbar, [t, d])?;
            let mut abar = g.reshape(abar, [t, d])?;
            if variant == BlockVariant::TemporalAveragePlusCond {
                vbar = g.add(vbar, cond)?;
                abar = g.add(abar, cond)?;
            }
            (g.silu(abar), g.silu(vbar))
        }
    };

    let (x, gate) = adaln_modulate(g, p, &bp.video.ffn_mod, v, cond_v)?;
    let h = bp.video.mlp.apply(g, p, x)?;
    v = gated_residual(g, v, gate, h)?;
    let (x, gate) = adaln_modulate(g, p, &bp.audio.ffn_mod, a, cond_a)?;
    let h = bp.audio.mlp.apply(g, p, x)?;
    a = gated_residual(g, a, gate, h)?;
    Ok((v, a))
}
