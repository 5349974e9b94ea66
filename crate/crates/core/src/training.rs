//! Training loop: window sampling, per-step noise and schedules, the
//! windowed flow-matching loss and Adam updates.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flowmatch::{interpolate_frames, velocity_target, windowed_loss, windowed_loss_terms};
use crate::model::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::model::{ModelConfig, RFlavNetwork};
use crate::numerics::{Graph, Tensor};
use crate::schedule::{rolling_timesteps, sample_training_schedule, ScheduleConfig, TimestepVector};
use crate::toydata::Clip;

/// Noise seed for [`evaluate`].
pub const EVAL_SEED: u64 = 0x5eed_e7a1;
/// Rolling phases at which [`evaluate`] scores each window.
pub const EVAL_PHASES: [f64; 4] = [0.0, 0.25, 0.5, 0.75];

const MOMENT_M: &str = "adam.m.";
const MOMENT_V: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    /// Geometry, width, depth and block variant.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 4,
            steps: 2000,
            seed: 0,
            schedule: ScheduleConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        self.schedule.validate()?;
        self.model.validate()
    }
}

/// One T-frame slice of a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub video: Tensor<f32>,
    pub audio: Tensor<f32>,
    pub class: Option<usize>,
}

impl Window {
    pub fn slice(clip: &Clip, start: usize, len: usize, with_class: bool) -> Result<Self> {
        if start + len > clip.len() {
            return Err(Error::invalid(format!(
                "window [{start}, {}) outside clip of {} frames",
                start + len,
                clip.len()
            )));
        }
        Ok(Self {
            video: clip.video.narrow0(start, len)?,
            audio: clip.audio.narrow0(start, len)?,
            class: with_class.then_some(clip.class_id as usize),
        })
    }
}

/// Uniformly chosen clip and start offset for each batch element.
pub fn sample_windows<R: Rng + ?Sized>(clips: &[Clip], cfg: &TrainConfig, rng: &mut R) -> Result<Vec<Window>> {
    if clips.is_empty() {
        return Err(Error::invalid("no training clips"));
    }
    let len = cfg.schedule.window;
    let with_class = cfg.model.class_count.is_some();
    (0..cfg.batch_size)
        .map(|_| {
            let clip = &clips[rng.random_range(0..clips.len())];
            if clip.len() < len {
                return Err(Error::invalid(format!("clip of {} frames is shorter than the window", clip.len())));
            }
            let start = rng.random_range(0..=clip.len() - len);
            Window::slice(clip, start, len, with_class)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub video: f64,
    pub audio: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub net: RFlavNetwork<f32>,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
    pub initial_loss: Option<f64>,
    pub last_loss: Option<StepLoss>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let net = RFlavNetwork::new(cfg.model.clone(), &mut rng)?;
        Ok(Self::from_network(net))
    }

    pub fn from_network(net: RFlavNetwork<f32>) -> Self {
        let zeros: Vec<_> = net.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { net, m: zeros.clone(), v: zeros, step: 0, initial_loss: None, last_loss: None }
    }

    /// Generator for step `step`: seeded by the run seed, one stream per
    /// step, so a resumed run draws the same numbers.
    pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step);
        rng
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.net.to_checkpoint();
        let names = self.net.params().names();
        for (prefix, moments) in [(MOMENT_M, &self.m), (MOMENT_V, &self.v)] {
            for (name, t) in names.iter().zip(moments) {
                ckpt.tensors.push((format!("{prefix}{name}"), t.clone()));
            }
        }
        let rec = &mut ckpt.record;
        rec.insert("train.step".into(), self.step.to_string());
        if let Some(l) = self.initial_loss {
            rec.insert("train.initial_loss".into(), format!("{l:?}"));
        }
        if let Some(l) = self.last_loss {
            rec.insert("train.last_loss".into(), format!("{:?},{:?},{:?}", l.total, l.video, l.audio));
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let net = RFlavNetwork::from_checkpoint(ckpt)?;
        let moments = |prefix: &str| -> Result<Vec<Tensor<f32>>> {
            net.params()
                .iter()
                .map(|(name, t)| match ckpt.tensor(&format!("{prefix}{name}")) {
                    Some(m) if m.shape() == t.shape() => Ok(m.clone()),
                    Some(m) => Err(Error::Format(format!("moment {prefix}{name} has shape {:?}", m.shape()))),
                    None => Ok(Tensor::zeros(t.shape())),
                })
                .collect()
        };
        let (m, v) = (moments(MOMENT_M)?, moments(MOMENT_V)?);
        let rec = &ckpt.record;
        let float = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad loss value {s:?}")));
        let step = match rec.get("train.step") {
            Some(s) => s.parse().map_err(|_| Error::Format(format!("bad train.step {s:?}")))?,
            None => 0,
        };
        let initial_loss = rec.get("train.initial_loss").map(|s| float(s)).transpose()?;
        let last_loss = match rec.get("train.last_loss") {
            Some(s) => {
                let parts = s.split(',').map(float).collect::<Result<Vec<_>>>()?;
                match parts[..] {
                    [total, video, audio] => Some(StepLoss { total, video, audio }),
                    _ => return Err(Error::Format(format!("bad train.last_loss {s:?}"))),
                }
            }
            None => None,
        };
        Ok(Self { net, m, v, step, initial_loss, last_loss })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&read_checkpoint(path)?)
    }
}

/// Noise and schedule for one window, drawn in a fixed order: schedule,
/// video noise, audio noise.
#[derive(Debug, Clone)]
pub struct WindowDraw {
    pub ts: TimestepVector,
    pub noise_v: Tensor<f32>,
    pub noise_a: Tensor<f32>,
}

pub fn draw_noise<R: Rng + ?Sized>(window: &Window, cfg: &ScheduleConfig, rng: &mut R) -> Result<WindowDraw> {
    let ts = sample_training_schedule(cfg, rng)?;
    let noise_v = Tensor::randn(window.video.shape(), rng);
    let noise_a = Tensor::randn(window.audio.shape(), rng);
    Ok(WindowDraw { ts, noise_v, noise_a })
}

/// One optimizer step on a batch of windows. The reported loss is the batch
/// mean before the update.
pub fn train_step<R: Rng + ?Sized>(
    state: &mut TrainState,
    cfg: &TrainConfig,
    batch: &[Window],
    rng: &mut R,
) -> Result<StepLoss> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut g = Graph::<f32>::new();
    let p = state.net.bind(&mut g);
    let mut terms = Vec::with_capacity(batch.len());
    for w in batch {
        let draw = draw_noise(w, &cfg.schedule, rng)?;
        let xv = g.leaf(interpolate_frames(&w.video, &draw.noise_v, &draw.ts.t)?);
        let xa = g.leaf(interpolate_frames(&w.audio, &draw.noise_a, &draw.ts.t)?);
        let tv = g.leaf(velocity_target(&w.video, &draw.noise_v)?);
        let ta = g.leaf(velocity_target(&w.audio, &draw.noise_a)?);
        let (pv, pa) = state.net.forward(&mut g, &p, xv, xa, &draw.ts.t, w.class)?;
        terms.push(windowed_loss(&mut g, pv, tv, pa, ta, &draw.ts)?);
    }
    let mut total = terms[0].total;
    for t in &terms[1..] {
        total = g.add(total, t.total)?;
    }
    let total = g.scale(total, 1.0 / batch.len() as f32);
    let mean = |f: &dyn Fn(&crate::flowmatch::LossVars) -> crate::numerics::Var| {
        terms.iter().map(|t| g.value(f(t)).item() as f64).sum::<f64>() / batch.len() as f64
    };
    let loss = StepLoss { total: g.value(total).item() as f64, video: mean(&|t| t.video), audio: mean(&|t| t.audio) };
    if !loss.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss at step {} is {} (video {}, audio {})",
            state.step, loss.total, loss.video, loss.audio
        )));
    }
    let grads = g.backward(total)?;

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = cfg.learning_rate;
    let params = state.net.params_mut().tensors_mut();
    for (i, param) in params.iter_mut().enumerate() {
        let grad = grads.get_or_zeros(p[i], param.shape());
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (w, &gr)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            let gr = gr as f64;
            let mj = b1 * m[j] as f64 + (1.0 - b1) * gr;
            let vj = b2 * v[j] as f64 + (1.0 - b2) * gr * gr;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + cfg.epsilon);
            *w = (*w as f64 - update) as f32;
        }
    }
    state.initial_loss.get_or_insert(loss.total);
    state.last_loss = Some(loss);
    Ok(loss)
}

/// Sample a batch from `clips` and take one step with the step's own
/// generator.
pub fn train_on_clips(state: &mut TrainState, cfg: &TrainConfig, clips: &[Clip]) -> Result<StepLoss> {
    let mut rng = TrainState::step_rng(cfg.seed, state.step);
    let batch = sample_windows(clips, cfg, &mut rng)?;
    train_step(state, cfg, &batch, &mut rng)
}

/// Run until `cfg.steps`, writing "step,loss_v,loss_a" lines to `log`.
pub fn train(state: &mut TrainState, cfg: &TrainConfig, clips: &[Clip], log: &mut dyn Write) -> Result<Vec<StepLoss>> {
    cfg.validate()?;
    let mut out = Vec::new();
    while state.step < cfg.steps {
        let loss = train_on_clips(state, cfg, clips)?;
        writeln!(log, "{},{},{}", state.step, loss.video, loss.audio)?;
        out.push(loss);
    }
    Ok(out)
}

pub fn parse_metrics_log(text: &str) -> Result<Vec<(u64, f64, f64)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("bad metrics line {line:?}"));
            match f[..] {
                [s, v, a] => Ok((
                    s.trim().parse().map_err(|_| bad())?,
                    v.trim().parse().map_err(|_| bad())?,
                    a.trim().parse().map_err(|_| bad())?,
                )),
                _ => Err(bad()),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalLoss {
    pub video: f64,
    pub audio: f64,
}

impl EvalLoss {
    pub fn total(&self) -> f64 {
        self.video + self.audio
    }
}

/// Deterministic eval windows: the first T frames of each clip, noised with
/// [`EVAL_SEED`], scored at the rolling schedules of [`EVAL_PHASES`].
pub fn eval_draws(clips: &[Clip], window: usize, with_class: bool) -> Result<Vec<(Window, Vec<WindowDraw>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(EVAL_SEED);
    clips
        .iter()
        .map(|c| {
            let w = Window::slice(c, 0, window, with_class)?;
            let draws = EVAL_PHASES
                .iter()
                .map(|&phase| {
                    Ok(WindowDraw {
                        ts: rolling_timesteps(window, phase)?,
                        noise_v: Tensor::randn(w.video.shape(), &mut rng),
                        noise_a: Tensor::randn(w.audio.shape(), &mut rng),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((w, draws))
        })
        .collect()
}

/// Weighted velocity MSE per modality, averaged over clips and phases.
pub fn evaluate_with<P>(clips: &[Clip], window: usize, with_class: bool, mut predict: P) -> Result<EvalLoss>
where
    P: FnMut(&Tensor<f32>, &Tensor<f32>, &TimestepVector, Option<usize>) -> Result<(Tensor<f32>, Tensor<f32>)>,
{
    if clips.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let (mut lv, mut la, mut n) = (0.0, 0.0, 0usize);
    for (w, draws) in eval_draws(clips, window, with_class)? {
        for d in draws {
            let xv = interpolate_frames(&w.video, &d.noise_v, &d.ts.t)?;
            let xa = interpolate_frames(&w.audio, &d.noise_a, &d.ts.t)?;
            let (pv, pa) = predict(&xv, &xa, &d.ts, w.class)?;
            let tv = velocity_target(&w.video, &d.noise_v)?;
            let ta = velocity_target(&w.audio, &d.noise_a)?;
            let (v, a) = windowed_loss_terms(&pv, &tv, &pa, &ta, &d.ts)?;
            lv += v;
            la += a;
            n += 1;
        }
    }
    Ok(EvalLoss { video: lv / n as f64, audio: la / n as f64 })
}

pub fn evaluate(net: &RFlavNetwork<f32>, clips: &[Clip], window: usize) -> Result<EvalLoss> {
    let with_class = net.config().class_count.is_some();
    evaluate_with(clips, window, with_class, |v, a, ts, class| net.predict(v, a, &ts.t, class))
}

/// Training-side record keys, for echoing alongside the model record.
pub fn train_record(cfg: &TrainConfig) -> BTreeMap<String, String> {
    let mut r: BTreeMap<String, String> = cfg.model.to_record().into_iter().collect();
    r.insert("learning_rate".into(), cfg.learning_rate.to_string());
    r.insert("beta1".into(), cfg.beta1.to_string());
    r.insert("beta2".into(), cfg.beta2.to_string());
    r.insert("epsilon".into(), cfg.epsilon.to_string());
    r.insert("batch_size".into(), cfg.batch_size.to_string());
    r.insert("steps".into(), cfg.steps.to_string());
    r.insert("seed".into(), cfg.seed.to_string());
    r.insert("window".into(), cfg.schedule.window.to_string());
    r.insert("theta".into(), cfg.schedule.theta.to_string());
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::loss_weight;
    use crate::toydata::{generate_clip, ToyGeometry};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            steps: 3,
            seed: 9,
            schedule: ScheduleConfig { window: 4, theta: 0.2 },
            model: ModelConfig { hidden: 16, heads: 2, blocks: 1, freq_dim: 16, ..ModelConfig::default() },
            ..TrainConfig::default()
        }
    }

    fn clips(n: usize) -> Vec<Clip> {
        let g = ToyGeometry::default();
        (0..n).map(|i| generate_clip(&g, i % 4, 100 + i as u64, 12).unwrap()).collect()
    }

    #[test]
    fn config_validation() {
        assert!(tiny_cfg().validate().is_ok());
        assert!(TrainConfig { learning_rate: 0.0, ..tiny_cfg() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..tiny_cfg() }.validate().is_err());
        assert!(TrainConfig { beta2: 1.0, ..tiny_cfg() }.validate().is_err());
    }

    #[test]
    fn initial_loss_matches_zero_prediction_baseline() {
        let cfg = tiny_cfg();
        let data = clips(3);
        let mut state = TrainState::new(&cfg).unwrap();
        let mut rng = TrainState::step_rng(cfg.seed, 0);
        let batch = sample_windows(&data, &cfg, &mut rng).unwrap();
        let mut replay = rng.clone();
        let loss = train_step(&mut state, &cfg, &batch, &mut rng).unwrap();

        // Zero-initialised heads predict 0, so the loss is the weighted mean
        // of |x - eps|^2, computed here straight from the data.
        let mut expect = 0.0;
        for w in &batch {
            let d = draw_noise(w, &cfg.schedule, &mut replay).unwrap();
            let frames = d.ts.len();
            for (x, e) in [(&w.video, &d.noise_v), (&w.audio, &d.noise_a)] {
                let per = x.len() / frames;
                for k in 0..frames {
                    let mut se = 0.0;
                    for j in 0..per {
                        let diff = x.data()[k * per + j] as f64 - e.data()[k * per + j] as f64;
                        se += diff * diff;
                    }
                    expect += loss_weight(d.ts.t[k]) * se / per as f64 / frames as f64;
                }
            }
        }
        expect /= batch.len() as f64;
        assert!((loss.total - expect).abs() <= 1e-6 * expect.max(1.0), "{} vs {expect}", loss.total);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let cfg = tiny_cfg();
        let data = clips(2);
        let mut state = TrainState::new(&cfg).unwrap();
        let before = state.net.params().tensors().to_vec();
        let mut rng = TrainState::step_rng(cfg.seed, 0);
        let batch = sample_windows(&data, &cfg, &mut rng).unwrap();
        // Validation rejects lr = 0 for runs; the step itself accepts it.
        let zero = TrainConfig { learning_rate: 0.0, ..cfg.clone() };
        let loss = train_step(&mut state, &zero, &batch, &mut rng).unwrap();
        assert!(loss.total > 0.0);
        assert_eq!(state.net.params().tensors(), &before[..]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn fixed_seed_reproduces_trajectory() {
        let cfg = tiny_cfg();
        let data = clips(3);
        let run = || {
            let mut s = TrainState::new(&cfg).unwrap();
            let mut log = Vec::new();
            let losses = train(&mut s, &cfg, &data, &mut log).unwrap();
            (losses, String::from_utf8(log).unwrap())
        };
        let (a, log_a) = run();
        let (b, log_b) = run();
        assert_eq!(a, b);
        assert_eq!(log_a, log_b);
        let parsed = parse_metrics_log(&log_a).unwrap();
        assert_eq!(parsed.len(), 3);
        assert_eq!(parsed[0].0, 1);
        assert_eq!(parsed[2].1, a[2].video);
    }

    #[test]
    fn resume_is_bitwise() {
        let cfg = tiny_cfg();
        let data = clips(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.rflv");
        let mut s = TrainState::new(&cfg).unwrap();
        train_on_clips(&mut s, &cfg, &data).unwrap();
        train_on_clips(&mut s, &cfg, &data).unwrap();
        s.save(&path).unwrap();
        let mut r = TrainState::load(&path).unwrap();
        assert_eq!((r.step, r.initial_loss, r.last_loss), (s.step, s.initial_loss, s.last_loss));
        assert_eq!(r.net.params(), s.net.params());
        let a = train_on_clips(&mut s, &cfg, &data).unwrap();
        let b = train_on_clips(&mut r, &cfg, &data).unwrap();
        assert_eq!(a, b);
        assert_eq!(s.net.params().tensors(), r.net.params().tensors());
        assert_eq!(s.m, r.m);
        assert_eq!(s.v, r.v);
    }

    #[test]
    fn loss_decreases_on_tiny_problem() {
        let cfg = TrainConfig { steps: 60, learning_rate: 3e-3, ..tiny_cfg() };
        let data = clips(2);
        let mut s = TrainState::new(&cfg).unwrap();
        let before = evaluate(&s.net, &data, 4).unwrap();
        train(&mut s, &cfg, &data, &mut std::io::sink()).unwrap();
        let after = evaluate(&s.net, &data, 4).unwrap();
        assert!(after.total() < before.total(), "{before:?} -> {after:?}");
    }

    #[test]
    fn evaluate_oracle_zero_and_baseline() {
        let data = clips(2);
        let cfg = tiny_cfg();
        let draws = eval_draws(&data, 4, true).unwrap();
        let mut idx = 0;
        let oracle = evaluate_with(&data, 4, true, |_, _, _, _| {
            let (w, ds) = &draws[idx / EVAL_PHASES.len()];
            let d = &ds[idx % EVAL_PHASES.len()];
            idx += 1;
            Ok((velocity_target(&w.video, &d.noise_v)?, velocity_target(&w.audio, &d.noise_a)?))
        })
        .unwrap();
        assert_eq!(oracle, EvalLoss { video: 0.0, audio: 0.0 });

        let net = TrainState::new(&cfg).unwrap().net;
        let a = evaluate(&net, &data, 4).unwrap();
        assert_eq!(a, evaluate(&net, &data, 4).unwrap());
        let mut expect = EvalLoss { video: 0.0, audio: 0.0 };
        for (w, ds) in &draws {
            for d in ds {
                let zv = Tensor::zeros(w.video.shape());
                let za = Tensor::zeros(w.audio.shape());
                let tv = velocity_target(&w.video, &d.noise_v).unwrap();
                let ta = velocity_target(&w.audio, &d.noise_a).unwrap();
                let (v, a) = windowed_loss_terms(&zv, &tv, &za, &ta, &d.ts).unwrap();
                expect.video += v / 8.0;
                expect.audio += a / 8.0;
            }
        }
        assert!((a.video - expect.video).abs() < 1e-9 && (a.audio - expect.audio).abs() < 1e-9);
        assert!(evaluate(&net, &[], 4).is_err());
    }

    #[test]
    fn nan_loss_aborts() {
        let cfg = tiny_cfg();
        let data = clips(1);
        let mut state = TrainState::new(&cfg).unwrap();
        state.net.params_mut().tensors_mut()[0].data_mut()[0] = f32::NAN;
        let err = train_on_clips(&mut state, &cfg, &data).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
    }
}
