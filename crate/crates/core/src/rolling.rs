//! Sliding-window sampler.
//!
//! The window holds `T` frames at staggered noise times. Pre-rolling takes
//! an all-noise window to the staircase `t_k = 1 - k/T` in `N = S` Euler
//! steps. Each rolling sweep then integrates `S/T` substeps, bringing the
//! oldest frame to `t = 1`, shifts it out and appends fresh noise.
//!
//! The pre-roll leaves frame 0 already clean. The first sweep shifts it out
//! before integrating and holds it back; every sweep then returns the frame
//! shifted out by the previous one, so each sweep emits exactly one frame.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flowmatch::{euler_step_frames, velocity_target};
use crate::model::RFlavNetwork;
use crate::numerics::{Real, Tensor};
use crate::schedule::{preroll_timesteps, rolling_timesteps, TimestepVector};
use crate::toydata::{ClipWriter, ToyGeometry};

/// Which modality, if any, is clamped to ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Conditioning {
    #[default]
    None,
    /// Audio given, video generated.
    AudioToVideo,
    /// Video given, audio generated.
    VideoToAudio,
}

impl Conditioning {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "a2v" => Ok(Self::AudioToVideo),
            "v2a" => Ok(Self::VideoToAudio),
            other => Err(Error::Config(format!("unknown conditioning {other:?} (none, a2v, v2a)"))),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::AudioToVideo => "a2v",
            Self::VideoToAudio => "v2a",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub window: usize,
    /// Integration steps over one frame's lifetime in the window.
    pub steps_per_frame: usize,
    pub conditioning: Conditioning,
    pub class: Option<usize>,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            window: crate::schedule::DEFAULT_WINDOW,
            steps_per_frame: 20,
            conditioning: Conditioning::None,
            class: None,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.steps_per_frame == 0 {
            return Err(Error::Config("window and steps_per_frame must be positive".into()));
        }
        if !self.steps_per_frame.is_multiple_of(self.window) {
            return Err(Error::Config(format!(
                "steps_per_frame {} is not a multiple of the window {}",
                self.steps_per_frame, self.window
            )));
        }
        Ok(())
    }

    pub fn substeps_per_sweep(&self) -> usize {
        self.steps_per_frame / self.window
    }

    pub fn preroll_steps(&self) -> usize {
        self.steps_per_frame
    }
}

/// Anything that predicts per-frame velocities for a window.
pub trait VelocityField<F: Real> {
    /// `first_frame` is the stream index of window slot 0.
    fn velocity(
        &mut self,
        video: &Tensor<F>,
        audio: &Tensor<F>,
        ts: &[f64],
        first_frame: usize,
    ) -> Result<(Tensor<F>, Tensor<F>)>;
}

impl<F: Real, C> VelocityField<F> for C
where
    C: FnMut(&Tensor<F>, &Tensor<F>, &[f64], usize) -> Result<(Tensor<F>, Tensor<F>)>,
{
    fn velocity(
        &mut self,
        video: &Tensor<F>,
        audio: &Tensor<F>,
        ts: &[f64],
        first_frame: usize,
    ) -> Result<(Tensor<F>, Tensor<F>)> {
        self(video, audio, ts, first_frame)
    }
}

/// A trained network as a velocity field.
pub struct NetworkField<'a, F: Real> {
    pub net: &'a RFlavNetwork<F>,
    pub class: Option<usize>,
}

impl<F: Real> VelocityField<F> for NetworkField<'_, F> {
    fn velocity(&mut self, video: &Tensor<F>, audio: &Tensor<F>, ts: &[f64], _: usize) -> Result<(Tensor<F>, Tensor<F>)> {
        self.net.predict(video, audio, ts, self.class)
    }
}

/// Velocity function of `(clean, noise)` frames.
pub type VelocityFn<F> = fn(&Tensor<F>, &Tensor<F>) -> Result<Tensor<F>>;

/// Exact velocity toward known targets. The noise endpoint of each frame is
/// recovered from the state as `(x_t - t x) / (1 - t)` and handed with the
/// target to `velocity` (normally [`velocity_target`]), giving
/// `(x - x_t) / (1 - t)`; frames at `t = 1` get zero. On the linear path
/// Euler integration with this field lands on the target regardless of step
/// size.
pub struct OracleField<G, F: Real> {
    pub target: G,
    pub velocity: VelocityFn<F>,
}

impl<G, F: Real> OracleField<G, F> {
    pub fn new(target: G) -> Self {
        Self { target, velocity: velocity_target::<F> }
    }
}

impl<F: Real, G> VelocityField<F> for OracleField<G, F>
where
    G: FnMut(usize) -> (Tensor<F>, Tensor<F>),
{
    fn velocity(
        &mut self,
        video: &Tensor<F>,
        audio: &Tensor<F>,
        ts: &[f64],
        first_frame: usize,
    ) -> Result<(Tensor<F>, Tensor<F>)> {
        let mut pv = Tensor::zeros(video.shape().to_vec());
        let mut pa = Tensor::zeros(audio.shape().to_vec());
        for (k, &t) in ts.iter().enumerate() {
            if t >= 1.0 {
                continue;
            }
            let inv = 1.0 / (1.0 - t);
            let (tv, ta) = (self.target)(first_frame + k);
            for (out, (src, x)) in [(&mut pv, (video, &tv)), (&mut pa, (audio, &ta))] {
                let xt = src.index0_slice(k);
                let noise: Vec<F> = x
                    .data()
                    .iter()
                    .zip(xt)
                    .map(|(&c, &n)| F::from_f64_lossy((n.to_f64_lossy() - t * c.to_f64_lossy()) * inv))
                    .collect();
                let noise = Tensor::from_vec(x.shape(), noise)?;
                let v = (self.velocity)(x, &noise)?;
                out.index0_slice_mut(k).copy_from_slice(v.data());
            }
        }
        Ok((pv, pa))
    }
}

/// Receives emitted frames in order.
pub trait FrameSink<F: Real> {
    fn push(&mut self, video: &Tensor<F>, audio: &Tensor<F>) -> Result<()>;
}

impl<F: Real> FrameSink<F> for Vec<(Tensor<F>, Tensor<F>)> {
    fn push(&mut self, video: &Tensor<F>, audio: &Tensor<F>) -> Result<()> {
        Vec::push(self, (video.clone(), audio.clone()));
        Ok(())
    }
}

impl FrameSink<f32> for ClipWriter {
    fn push(&mut self, video: &Tensor<f32>, audio: &Tensor<f32>) -> Result<()> {
        ClipWriter::push(self, video.data(), audio.data())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Fresh,
    Rolling,
}

/// Ground truth for the clamped modality plus one fixed noise draw per
/// window slot, shifted with the window.
#[derive(Debug, Clone)]
struct Guide<F: Real> {
    modality: Conditioning,
    frames: Tensor<F>,
    noise: Tensor<F>,
}

#[derive(Debug, Clone)]
pub struct RollingState<F: Real = f32> {
    geometry: ToyGeometry,
    video: Tensor<F>,
    audio: Tensor<F>,
    ts: TimestepVector,
    stage: Stage,
    /// Stream index of window slot 0.
    window_start: usize,
    frames_emitted: usize,
    held: Option<(Tensor<F>, Tensor<F>)>,
    guide: Option<Guide<F>>,
    rng: ChaCha8Rng,
    evaluations: usize,
}

impl<F: Real> RollingState<F> {
    pub fn video(&self) -> &Tensor<F> {
        &self.video
    }

    pub fn audio(&self) -> &Tensor<F> {
        &self.audio
    }

    pub fn ts(&self) -> &TimestepVector {
        &self.ts
    }

    pub fn frames_emitted(&self) -> usize {
        self.frames_emitted
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn is_rolling(&self) -> bool {
        self.stage == Stage::Rolling
    }

    /// Bytes held by the sampler state (ground-truth input excluded).
    pub fn footprint_bytes(&self) -> usize {
        let held = self.held.as_ref().map_or(0, |(v, a)| v.bytes() + a.bytes());
        let guide = self.guide.as_ref().map_or(0, |g| g.noise.bytes());
        self.video.bytes() + self.audio.bytes() + held + guide + self.ts.t.len() * 8
    }

    fn window(&self) -> usize {
        self.ts.len()
    }

    /// Overwrite the clamped modality with its interpolant at each slot's t.
    fn apply_guide(&mut self) -> Result<()> {
        let Some(guide) = &self.guide else { return Ok(()) };
        let target = match guide.modality {
            Conditioning::AudioToVideo => &mut self.audio,
            Conditioning::VideoToAudio => &mut self.video,
            Conditioning::None => return Ok(()),
        };
        let available = guide.frames.shape()[0];
        for (k, &t) in self.ts.t.iter().enumerate() {
            let j = self.window_start + k;
            if j >= available {
                break;
            }
            let t_f = F::from_f64_lossy(t);
            let s_f = F::from_f64_lossy(1.0 - t);
            let x = guide.frames.index0_slice(j);
            let e = guide.noise.index0_slice(k);
            for ((o, &xv), &ev) in target.index0_slice_mut(k).iter_mut().zip(x).zip(e) {
                *o = t_f * xv + s_f * ev;
            }
        }
        Ok(())
    }

    fn evaluate(&mut self, field: &mut dyn VelocityField<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        self.apply_guide()?;
        self.evaluations += 1;
        let (pv, pa) = field.velocity(&self.video, &self.audio, &self.ts.t, self.window_start)?;
        if pv.shape() != self.video.shape() || pa.shape() != self.audio.shape() {
            return Err(Error::shape(
                "velocity field",
                format!("returned {:?} / {:?} for window {:?} / {:?}", pv.shape(), pa.shape(), self.video.shape(), self.audio.shape()),
            ));
        }
        Ok((pv, pa))
    }

    /// One Euler step of every frame from the current times to `next`.
    fn step_to(&mut self, field: &mut dyn VelocityField<F>, next: TimestepVector) -> Result<()> {
        let (pv, pa) = self.evaluate(field)?;
        let dts: Vec<f64> = next.t.iter().zip(&self.ts.t).map(|(n, c)| (n - c).max(0.0)).collect();
        match self.guide.as_ref().map(|g| g.modality) {
            Some(Conditioning::AudioToVideo) => euler_step_frames(&mut self.video, &pv, &dts)?,
            Some(Conditioning::VideoToAudio) => euler_step_frames(&mut self.audio, &pa, &dts)?,
            _ => {
                euler_step_frames(&mut self.video, &pv, &dts)?;
                euler_step_frames(&mut self.audio, &pa, &dts)?;
            }
        }
        self.ts = next;
        Ok(())
    }

    /// Drop slot 0, append a fresh noise slot at `t = 0`, and return the
    /// dropped frame with the clamped modality set to ground truth.
    fn shift(&mut self) -> Result<(Tensor<F>, Tensor<F>)> {
        let g = self.geometry;
        let mut out_v = self.video.index0(0);
        let mut out_a = self.audio.index0(0);
        let fresh_v = Tensor::<F>::randn(g.video_frame_shape().to_vec(), &mut self.rng);
        let fresh_a = Tensor::<F>::randn(g.audio_frame_shape().to_vec(), &mut self.rng);
        rotate_in(&mut self.video, &fresh_v);
        rotate_in(&mut self.audio, &fresh_a);
        if let Some(guide) = &mut self.guide {
            let j = self.window_start;
            if j < guide.frames.shape()[0] {
                let exact = guide.frames.index0(j);
                match guide.modality {
                    Conditioning::AudioToVideo => out_a = exact.reshape(out_a.shape().to_vec())?,
                    Conditioning::VideoToAudio => out_v = exact.reshape(out_v.shape().to_vec())?,
                    Conditioning::None => {}
                }
            }
            let shape = guide.noise.shape()[1..].to_vec();
            let fresh = Tensor::<F>::randn(shape, &mut self.rng);
            rotate_in(&mut guide.noise, &fresh);
        }
        self.window_start += 1;
        Ok((out_v, out_a))
    }
}

fn rotate_in<F: Real>(window: &mut Tensor<F>, fresh: &Tensor<F>) {
    let n = fresh.len();
    let data = window.data_mut();
    data.rotate_left(n);
    let len = data.len();
    data[len - n..].copy_from_slice(fresh.data());
}

/// All-noise window at pre-roll phase 1 (every `t = 0`).
pub fn init_state<F: Real>(cfg: &SamplerConfig, geometry: &ToyGeometry) -> Result<RollingState<F>> {
    cfg.validate()?;
    let t = cfg.window;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut vshape = vec![t];
    vshape.extend(geometry.video_frame_shape());
    let mut ashape = vec![t];
    ashape.extend(geometry.audio_frame_shape());
    let video = Tensor::randn(vshape, &mut rng);
    let audio = Tensor::randn(ashape, &mut rng);
    Ok(RollingState {
        geometry: *geometry,
        video,
        audio,
        ts: preroll_timesteps(t, 1.0)?,
        stage: Stage::Fresh,
        window_start: 0,
        frames_emitted: 0,
        held: None,
        guide: None,
        rng,
        evaluations: 0,
    })
}

/// Attach ground truth for A2V / V2A. `frames` is `[n, ...]` for the
/// clamped modality.
pub fn attach_guide<F: Real>(state: &mut RollingState<F>, modality: Conditioning, frames: Tensor<F>) -> Result<()> {
    let g = state.geometry;
    let per_frame: Vec<usize> = match modality {
        Conditioning::None => return Ok(()),
        Conditioning::AudioToVideo => g.audio_frame_shape().to_vec(),
        Conditioning::VideoToAudio => g.video_frame_shape().to_vec(),
    };
    if frames.rank() == 0 || frames.shape()[1..] != per_frame[..] {
        return Err(Error::shape("conditioning", format!("{:?}, frames of {per_frame:?} expected", frames.shape())));
    }
    if state.stage != Stage::Fresh || state.evaluations > 0 {
        return Err(Error::State("conditioning must be attached before the pre-roll".into()));
    }
    let mut shape = vec![state.window()];
    shape.extend(per_frame);
    let noise = Tensor::randn(shape, &mut state.rng);
    state.guide = Some(Guide { modality, frames, noise });
    Ok(())
}

/// Pre-rolling phase: `N` steps from phase 1 to phase 0.
pub fn preroll<F: Real>(state: &mut RollingState<F>, field: &mut dyn VelocityField<F>, cfg: &SamplerConfig) -> Result<()> {
    if state.stage != Stage::Fresh || state.evaluations > 0 {
        return Err(Error::State("pre-roll runs once, on a freshly initialized state".into()));
    }
    if cfg.window != state.window() {
        return Err(Error::Config(format!("window {} does not match state window {}", cfg.window, state.window())));
    }
    let n = cfg.preroll_steps();
    for i in 1..=n {
        let phase = (n - i) as f64 / n as f64;
        state.step_to(field, preroll_timesteps(cfg.window, phase)?)?;
    }
    state.ts = rolling_timesteps(cfg.window, 0.0)?;
    state.stage = Stage::Rolling;
    Ok(())
}

/// One rolling sweep, emitting one clean `(video [c,h,w], audio [F/T,N_m])`
/// frame.
pub fn roll_sweep<F: Real>(
    state: &mut RollingState<F>,
    field: &mut dyn VelocityField<F>,
    cfg: &SamplerConfig,
) -> Result<(Tensor<F>, Tensor<F>)> {
    if state.stage != Stage::Rolling {
        return Err(Error::State("sweep requested before the pre-roll".into()));
    }
    if state.held.is_none() {
        // Frame 0 is already clean after the pre-roll.
        let first = state.shift()?;
        state.held = Some(first);
        state.ts = rolling_timesteps(cfg.window, 1.0)?;
    }
    let sub = cfg.substeps_per_sweep();
    for m in 1..=sub {
        let phase = ((sub - m) * cfg.window) as f64 / cfg.steps_per_frame as f64;
        state.step_to(field, rolling_timesteps(cfg.window, phase)?)?;
    }
    let fresh = state.shift()?;
    state.ts = rolling_timesteps(cfg.window, 1.0)?;
    let out = state.held.replace(fresh).expect("held frame present while rolling");
    state.frames_emitted += 1;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamStats {
    pub frames: usize,
    pub evaluations: usize,
    pub peak_state_bytes: usize,
}

fn check_frame<F: Real>(v: &Tensor<F>, a: &Tensor<F>, index: usize) -> Result<()> {
    if v.all_finite() && a.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("sampler, emitted frame {index}")))
    }
}

/// Init, pre-roll and `n_frames` sweeps, pushing frames to `sink` as they
/// are produced.
pub fn generate_stream<F: Real>(
    field: &mut dyn VelocityField<F>,
    cfg: &SamplerConfig,
    geometry: &ToyGeometry,
    n_frames: usize,
    sink: &mut dyn FrameSink<F>,
) -> Result<StreamStats> {
    if n_frames == 0 {
        return Err(Error::invalid("n_frames must be at least 1"));
    }
    let mut state = init_state(cfg, geometry)?;
    preroll(&mut state, field, cfg)?;
    let mut peak = state.footprint_bytes();
    for i in 0..n_frames {
        let (v, a) = roll_sweep(&mut state, field, cfg)?;
        check_frame(&v, &a, i)?;
        sink.push(&v, &a)?;
        peak = peak.max(state.footprint_bytes());
    }
    Ok(StreamStats { frames: n_frames, evaluations: state.evaluations, peak_state_bytes: peak })
}

/// A2V / V2A: generate `n_frames` with one modality clamped to `truth`
/// (`[n, ...]` frames of that modality). Returns both modalities `[n, ...]`;
/// the clamped one equals `truth` exactly.
pub fn conditional_generate<F: Real>(
    field: &mut dyn VelocityField<F>,
    cfg: &SamplerConfig,
    geometry: &ToyGeometry,
    truth: &Tensor<F>,
    n_frames: usize,
) -> Result<(Tensor<F>, Tensor<F>)> {
    if cfg.conditioning == Conditioning::None {
        return Err(Error::Config("conditional generation needs a2v or v2a".into()));
    }
    if n_frames == 0 || truth.rank() == 0 || truth.shape()[0] < n_frames {
        return Err(Error::invalid(format!(
            "ground truth has {} frames, {n_frames} requested",
            truth.shape().first().copied().unwrap_or(0)
        )));
    }
    let mut state = init_state(cfg, geometry)?;
    attach_guide(&mut state, cfg.conditioning, truth.clone())?;
    preroll(&mut state, field, cfg)?;
    let mut vs = Vec::with_capacity(n_frames);
    let mut as_ = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let (v, a) = roll_sweep(&mut state, field, cfg)?;
        check_frame(&v, &a, i)?;
        vs.push(v);
        as_.push(a);
    }
    Ok((Tensor::stack(&vs)?, Tensor::stack(&as_)?))
}
