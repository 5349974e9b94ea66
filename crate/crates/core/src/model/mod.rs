//! The two-branch audio-video transformer.
//!
//! Video latents `[T, c, h, w]` are cut into `L = h·w/p²` patches per frame;
//! audio arrives as `[T, F/T, N_m]`, one group of mel segments per frame.
//! Every frame carries its own noise time, embedded and used to modulate
//! both branches.

mod block;
pub mod checkpoint;
pub mod layers;
mod params;

use std::collections::BTreeMap;

use rand::Rng;

pub use block::{block_forward, BlockMasks, BlockParams, BlockVariant};
pub use params::{ParamId, ParamStore};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};
use layers::{modulation_chunks, modulate, patchify, unpatchify, Init, Linear};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub segments_per_frame: usize,
    pub mel_bins: usize,
    pub hidden: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub variant: BlockVariant,
    /// Number of classes, `None` for an unconditional model.
    pub class_count: Option<usize>,
    /// Width of the sinusoidal timestep features.
    pub freq_dim: usize,
    /// Stacked masked self-attention layers over the concatenated sequence
    /// (concat-attention variant only).
    pub joint_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            height: 8,
            width: 8,
            patch: 2,
            segments_per_frame: 4,
            mel_bins: 16,
            hidden: 64,
            heads: 4,
            blocks: 12,
            mlp_ratio: 4,
            variant: BlockVariant::TemporalAveragePlusCond,
            class_count: Some(4),
            freq_dim: 64,
            joint_layers: 2,
        }
    }
}

impl ModelConfig {
    pub fn patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    /// Elements of one video frame.
    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Elements of one frame's audio segment group.
    pub fn segment_len(&self) -> usize {
        self.segments_per_frame * self.mel_bins
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let sizes = [
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
            ("patch", self.patch),
            ("segments_per_frame", self.segments_per_frame),
            ("mel_bins", self.mel_bins),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("mlp_ratio", self.mlp_ratio),
            ("freq_dim", self.freq_dim),
            ("joint_layers", self.joint_layers),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return bad(format!("patch {} does not divide {}x{}", self.patch, self.height, self.width));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if !self.hidden.is_multiple_of(2) || !self.freq_dim.is_multiple_of(2) {
            return bad("hidden and freq_dim must be even".into());
        }
        if self.class_count == Some(0) {
            return bad("class_count must be positive when set".into());
        }
        Ok(())
    }

    /// Flat `key=value` record, the form stored in checkpoints.
    pub fn to_record(&self) -> Vec<(String, String)> {
        let mut r: Vec<(String, String)> = [
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
            ("patch", self.patch),
            ("segments_per_frame", self.segments_per_frame),
            ("mel_bins", self.mel_bins),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("mlp_ratio", self.mlp_ratio),
            ("freq_dim", self.freq_dim),
            ("joint_layers", self.joint_layers),
            ("class_count", self.class_count.unwrap_or(0)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        r.push(("variant".into(), self.variant.tag().into()));
        r
    }

    /// Parse the record written by [`ModelConfig::to_record`]. Keys other
    /// than model keys are ignored so the record can share a file with
    /// training state.
    pub fn from_record(record: &BTreeMap<String, String>) -> Result<Self> {
        let num = |k: &str| -> Result<usize> {
            let v = record.get(k).ok_or_else(|| Error::Config(format!("missing model key {k}")))?;
            v.parse().map_err(|_| Error::Config(format!("model key {k}: not an integer: {v:?}")))
        };
        let classes = num("class_count")?;
        let cfg = Self {
            channels: num("channels")?,
            height: num("height")?,
            width: num("width")?,
            patch: num("patch")?,
            segments_per_frame: num("segments_per_frame")?,
            mel_bins: num("mel_bins")?,
            hidden: num("hidden")?,
            heads: num("heads")?,
            blocks: num("blocks")?,
            mlp_ratio: num("mlp_ratio")?,
            freq_dim: num("freq_dim")?,
            joint_layers: num("joint_layers")?,
            class_count: (classes > 0).then_some(classes),
            variant: BlockVariant::from_tag(
                record.get("variant").ok_or_else(|| Error::Config("missing model key variant".into()))?,
            )?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
struct Layout {
    patch_embed: Linear,
    audio_embed: Linear,
    t_mlp1: Linear,
    t_mlp2: Linear,
    class_table: Option<ParamId>,
    blocks: Vec<BlockParams>,
    final_video_mod: Linear,
    video_head: Linear,
    final_audio_mod: Linear,
    audio_head: Linear,
}

/// Network parameters plus the fixed tables derived from the geometry.
#[derive(Debug, Clone)]
pub struct RFlavNetwork<F: Real = f32> {
    config: ModelConfig,
    params: ParamStore<F>,
    layout: Layout,
    spatial_pos: Tensor<F>,
    segment_pos: Tensor<F>,
}

impl<F: Real> RFlavNetwork<F> {
    /// Fresh network: Xavier-uniform projections, zero modulation maps and
    /// zero output heads, so the initial output is exactly zero.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let mut s = ParamStore::default();
        let patch_embed = Linear::new(&mut s, "patch_embed", config.patch_dim(), d, Init::Xavier, rng);
        let audio_embed = Linear::new(&mut s, "audio_embed", config.mel_bins, d, Init::Xavier, rng);
        let t_mlp1 = Linear::new(&mut s, "t_embed.fc1", config.freq_dim, d, Init::Xavier, rng);
        let t_mlp2 = Linear::new(&mut s, "t_embed.fc2", d, d, Init::Xavier, rng);
        let class_table = config.class_count.map(|n| {
            let table = Tensor::randn([n, d], rng).map(|x| x * F::from_f64_lossy(0.02));
            s.add("class_table", table)
        });
        let blocks = (0..config.blocks)
            .map(|i| {
                let name = format!("block{i}");
                let hidden = d * config.mlp_ratio;
                BlockParams::new(&mut s, &name, d, config.heads, hidden, config.variant, config.joint_layers, rng)
            })
            .collect();
        let final_video_mod = Linear::new(&mut s, "final.video_mod", d, 2 * d, Init::Zero, rng);
        let video_head = Linear::new(&mut s, "final.video_head", d, config.patch_dim(), Init::Zero, rng);
        let final_audio_mod = Linear::new(&mut s, "final.audio_mod", d, 2 * d, Init::Zero, rng);
        let audio_head = Linear::new(&mut s, "final.audio_head", d, config.mel_bins, Init::Zero, rng);
        let layout = Layout {
            patch_embed,
            audio_embed,
            t_mlp1,
            t_mlp2,
            class_table,
            blocks,
            final_video_mod,
            video_head,
            final_audio_mod,
            audio_head,
        };
        let hp = config.height / config.patch;
        let wp = config.width / config.patch;
        let spatial_pos = layers::grid_position_table(hp, wp, d).reshape([1, hp * wp, d])?;
        let segment_pos = layers::position_table(config.segments_per_frame, d).reshape([1, config.segments_per_frame, d])?;
        Ok(Self { config, params: s, layout, spatial_pos, segment_pos })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    /// Same network in another precision.
    pub fn cast<G: Real>(&self) -> RFlavNetwork<G> {
        RFlavNetwork {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
            spatial_pos: self.spatial_pos.cast(),
            segment_pos: self.segment_pos.cast(),
        }
    }

    /// Record the parameters as leaves of `g`.
    pub fn bind(&self, g: &mut Graph<F>) -> Vec<Var> {
        self.params.bind(g)
    }

    fn check_geometry(&self, video: &[usize], audio: &[usize], frames: usize) -> Result<()> {
        let c = &self.config;
        let want_v = [frames, c.channels, c.height, c.width];
        let want_a = [frames, c.segments_per_frame, c.mel_bins];
        if video != want_v || audio != want_a {
            return Err(Error::shape(
                "network_forward",
                format!("video {video:?} / audio {audio:?}, expected {want_v:?} / {want_a:?}"),
            ));
        }
        Ok(())
    }

    /// Per-frame condition `[T, D]`: timestep embedding plus class embedding.
    pub fn condition(&self, g: &mut Graph<F>, p: &[Var], ts: &[f64], class: Option<usize>) -> Result<Var> {
        let l = &self.layout;
        let feats = g.leaf(layers::timestep_sinusoids(ts, self.config.freq_dim)?);
        let h = l.t_mlp1.apply(g, p, feats)?;
        let h = g.silu(h);
        let t_emb = l.t_mlp2.apply(g, p, h)?;
        match (class, l.class_table, self.config.class_count) {
            (None, _, _) => Ok(t_emb),
            (Some(y), Some(table), Some(n)) if y < n => {
                let mut onehot = Tensor::zeros([1, n]);
                onehot.data_mut()[y] = F::one();
                let onehot = g.leaf(onehot);
                let y_emb = g.matmul(onehot, p[table.0])?;
                g.add(t_emb, y_emb)
            }
            (Some(y), _, n) => Err(Error::invalid(format!("unknown class id {y} (class count {n:?})"))),
        }
    }

    /// Velocity predictions for both modalities, recorded on `g`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        p: &[Var],
        video: Var,
        audio: Var,
        ts: &[f64],
        class: Option<usize>,
    ) -> Result<(Var, Var)> {
        let frames = ts.len();
        if frames == 0 {
            return Err(Error::invalid("empty timestep vector"));
        }
        self.check_geometry(g.shape(video), g.shape(audio), frames)?;
        let c = &self.config;
        let l = &self.layout;
        let cond = self.condition(g, p, ts, class)?;

        let spatial_pos = g.leaf(self.spatial_pos.clone());
        let v = patchify(g, p, &l.patch_embed, video, c.patch)?;
        let mut v = g.add(v, spatial_pos)?;
        let segment_pos = g.leaf(self.segment_pos.clone());
        let a = l.audio_embed.apply(g, p, audio)?;
        let mut a = g.add(a, segment_pos)?;

        let masks = BlockMasks::new(frames, c.patches(), c.segments_per_frame, c.variant);
        for bp in &l.blocks {
            (v, a) = block_forward(g, p, bp, c.variant, &masks, v, a, cond)?;
        }

        let act = g.silu(cond);
        let m = modulation_chunks(g, p, &l.final_video_mod, act, 2)?;
        let v = modulate(g, v, m[0], m[1])?;
        let phi_v = unpatchify(g, p, &l.video_head, v, c.channels, c.height, c.width, c.patch)?;
        let m = modulation_chunks(g, p, &l.final_audio_mod, act, 2)?;
        let a = modulate(g, a, m[0], m[1])?;
        let phi_a = l.audio_head.apply(g, p, a)?;
        Ok((phi_v, phi_a))
    }

    /// Forward pass on concrete tensors, returning `(phi_v, phi_a)`.
    pub fn predict(
        &self,
        video: &Tensor<F>,
        audio: &Tensor<F>,
        ts: &[f64],
        class: Option<usize>,
    ) -> Result<(Tensor<F>, Tensor<F>)> {
        Ok(self.predict_with_cost(video, audio, ts, class)?.0)
    }

    /// As [`RFlavNetwork::predict`], also reporting the bytes of every
    /// intermediate value the forward pass materialized.
    #[allow(clippy::type_complexity)]
    pub fn predict_with_cost(
        &self,
        video: &Tensor<F>,
        audio: &Tensor<F>,
        ts: &[f64],
        class: Option<usize>,
    ) -> Result<((Tensor<F>, Tensor<F>), usize)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let v = g.leaf(video.clone());
        let a = g.leaf(audio.clone());
        let (pv, pa) = self.forward(&mut g, &p, v, a, ts, class)?;
        let bytes = g.activation_bytes();
        Ok(((g.value(pv).clone(), g.value(pa).clone()), bytes))
    }
}
