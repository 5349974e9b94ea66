//! Long-video diagnostics: frame similarity matrices, the lag profile
//! `r(k)`, Fourier loop detection and feature drift across windows.

use std::f64::consts::PI;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Frozen loop threshold on the dominance ratio, chosen by
/// [`calibrate_threshold`] on the calibration corpus (seeds from
/// [`CALIBRATION_SEED`]). The ratio grows with clip length; the
/// calibration clips are 240 frames long.
pub const DEFAULT_LOOP_THRESHOLD: f64 = 21.7;
pub const CALIBRATION_SEED: u64 = 50_000;
pub const DEFAULT_DRIFT_WINDOW: usize = 16;

const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopConfig {
    pub threshold: f64,
    /// The FFT runs on the profile zero-padded to the next power of two at
    /// least `pad_factor * |r|` long.
    pub pad_factor: usize,
    /// Only periods that repeat at least this many times within the
    /// profile compete for the peak.
    pub min_repeats: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self { threshold: DEFAULT_LOOP_THRESHOLD, pad_factor: 16, min_repeats: 3.0 }
    }
}

/// Per-frame feature vector behind the perceptual distance: each channel
/// standardized, followed by the forward-difference gradient magnitude of
/// the standardized channel.
fn frame_features(frame: &[f32], c: usize, h: usize, w: usize) -> Vec<f64> {
    let n = h * w;
    let mut z = Vec::with_capacity(c * n);
    for ch in frame.chunks_exact(n) {
        let mean = ch.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
        let var = ch.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        let inv = if sd > STD_FLOOR { 1.0 / sd } else { 0.0 };
        z.extend(ch.iter().map(|&x| (x as f64 - mean) * inv));
    }
    let mut out = z.clone();
    for ch in 0..c {
        let s = &z[ch * n..(ch + 1) * n];
        for i in 0..h.saturating_sub(1) {
            for j in 0..w.saturating_sub(1) {
                let gx = s[i * w + j + 1] - s[i * w + j];
                let gy = s[(i + 1) * w + j] - s[i * w + j];
                out.push((gx * gx + gy * gy).sqrt());
            }
        }
    }
    out
}

fn frame_dims(video: &Tensor<f32>) -> Result<(usize, usize, usize, usize)> {
    match video.shape() {
        &[n, c, h, w] => Ok((n, c, h, w)),
        s => Err(Error::shape("analysis", format!("expected video [n, c, h, w], got {s:?}"))),
    }
}

/// Toy perceptual distance between two frames `[c, h, w]`.
pub fn frame_distance(a: &[f32], b: &[f32], c: usize, h: usize, w: usize) -> f64 {
    let fa = frame_features(a, c, h, w);
    let fb = frame_features(b, c, h, w);
    fa.iter().zip(&fb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / fa.len() as f64
}

/// Symmetric `n x n` matrix of `s(i, j) = 1 / (1 + d(i, j))`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::shape("similarity matrix", format!("{} values for n = {n}", values.len())));
        }
        Ok(Self { n, values })
    }
}

pub fn similarity_matrix(video: &Tensor<f32>) -> Result<SimilarityMatrix> {
    let (n, c, h, w) = frame_dims(video)?;
    if n < 2 {
        return Err(Error::invalid("similarity matrix needs at least two frames"));
    }
    let feats: Vec<Vec<f64>> = (0..n).map(|i| frame_features(video.index0_slice(i), c, h, w)).collect();
    let mut values = vec![1.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = feats[i].iter().zip(&feats[j]).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / feats[i].len() as f64;
            let s = 1.0 / (1.0 + d);
            values[i * n + j] = s;
            values[j * n + i] = s;
        }
    }
    Ok(SimilarityMatrix { n, values })
}

/// `r[k-1] = mean_i M[i][i+k]` for lags `k = 1..n-1`.
pub fn lag_profile(m: &SimilarityMatrix) -> Result<Vec<f64>> {
    let n = m.len();
    if n < 2 {
        return Err(Error::invalid("lag profile needs at least two frames"));
    }
    Ok((1..n).map(|k| (0..n - k).map(|i| m.get(i, i + k)).sum::<f64>() / (n - k) as f64).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopReport {
    pub is_loop: bool,
    pub period_frames: Option<usize>,
    pub dominance: f64,
    pub threshold: f64,
}

/// Mean-removed, zero-padded magnitude spectrum of the profile. Returns the
/// dominance ratio and the period of the strongest admissible bin.
pub fn loop_dominance(r: &[f64], cfg: &LoopConfig) -> Result<(f64, usize)> {
    if r.len() < 8 {
        return Err(Error::invalid(format!("lag profile of length {} is shorter than 8", r.len())));
    }
    let n = r.len();
    let fft_len = (cfg.pad_factor.max(1) * n).next_power_of_two();
    let mean = r.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = r.iter().map(|&x| Complex::new(x - mean, 0.0)).collect();
    buf.resize(fft_len, Complex::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(fft_len).process(&mut buf);
    let half = fft_len / 2;
    let mags: Vec<f64> = buf[1..=half].iter().map(|c| c.norm()).collect();
    let mean_mag = mags.iter().sum::<f64>() / mags.len() as f64;
    // Bin b has period fft_len / b; require period <= n / min_repeats.
    let first = ((cfg.min_repeats.max(1.0) * fft_len as f64 / n as f64).ceil() as usize).max(1);
    let (bin, peak) = mags
        .iter()
        .enumerate()
        .skip(first - 1)
        .fold((first, 0.0), |best, (i, &m)| if m > best.1 { (i + 1, m) } else { best });
    let dominance = if mean_mag > 1e-12 { peak / mean_mag } else { 0.0 };
    let period = (fft_len as f64 / bin as f64).round() as usize;
    Ok((dominance, period))
}

pub fn detect_loop(r: &[f64], cfg: &LoopConfig) -> Result<LoopReport> {
    let (dominance, period) = loop_dominance(r, cfg)?;
    let is_loop = dominance > cfg.threshold;
    Ok(LoopReport { is_loop, period_frames: is_loop.then_some(period), dominance, threshold: cfg.threshold })
}

/// Similarity matrix, lag profile and loop test in one call.
pub fn analyze_video(video: &Tensor<f32>, cfg: &LoopConfig) -> Result<LoopReport> {
    detect_loop(&lag_profile(&similarity_matrix(video)?)?, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipReport {
    pub id: String,
    pub report: LoopReport,
}

impl fmt::Display for ClipReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let period = self.report.period_frames.map_or_else(|| "-".to_string(), |p| p.to_string());
        write!(f, "{}\t{}\t{}\t{:.4}", self.id, self.report.is_loop, period, self.report.dominance)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusReport {
    pub clips: Vec<ClipReport>,
    pub loop_rate: f64,
}

pub fn corpus_loop_rate<'a>(
    clips: impl IntoIterator<Item = (String, &'a Tensor<f32>)>,
    cfg: &LoopConfig,
) -> Result<CorpusReport> {
    let clips = clips
        .into_iter()
        .map(|(id, v)| Ok(ClipReport { id, report: analyze_video(v, cfg)? }))
        .collect::<Result<Vec<_>>>()?;
    if clips.is_empty() {
        return Err(Error::invalid("corpus is empty"));
    }
    let loops = clips.iter().filter(|c| c.report.is_loop).count();
    Ok(CorpusReport { loop_rate: loops as f64 / clips.len() as f64, clips })
}

/// Threshold between two dominance samples: the midpoint of the widest gap
/// around the cut that misclassifies the fewest calibration clips.
pub fn calibrate_threshold(loops: &[f64], aperiodic: &[f64]) -> f64 {
    let mut cuts: Vec<f64> = loops.iter().chain(aperiodic).copied().collect();
    cuts.sort_by(f64::total_cmp);
    let errors = |th: f64| {
        loops.iter().filter(|&&d| d <= th).count() + aperiodic.iter().filter(|&&d| d > th).count()
    };
    let mut best = (usize::MAX, 0.0, 0.0);
    for w in cuts.windows(2) {
        let th = 0.5 * (w[0] + w[1]);
        let e = errors(th);
        let gap = w[1] - w[0];
        if e < best.0 || (e == best.0 && gap > best.2) {
            best = (e, th, gap);
        }
    }
    best.1
}

/// Drift of window features relative to the first window.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftProfile {
    pub drift: Vec<f64>,
    pub window: usize,
    pub stride: usize,
}

impl DriftProfile {
    /// Largest `|drift(i+1) - drift(i)|` for `i >= 1`.
    pub fn max_later_increment(&self) -> f64 {
        self.drift.windows(2).skip(1).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max)
    }
}

/// Summary features of frames `[n, c, h, w]`: per-channel mean and standard
/// deviation, per-channel mean absolute temporal difference, and the mean
/// frame pooled to a 4x4 grid.
pub fn window_features(frames: &[f32], c: usize, h: usize, w: usize) -> Vec<f64> {
    let fl = c * h * w;
    let n = frames.len() / fl;
    let hw = h * w;
    let mut feats = Vec::new();
    for ch in 0..c {
        let vals = (0..n).flat_map(|f| frames[f * fl + ch * hw..f * fl + (ch + 1) * hw].iter());
        let (mut s, mut s2) = (0.0, 0.0);
        for &x in vals {
            s += x as f64;
            s2 += (x as f64).powi(2);
        }
        let cnt = (n * hw) as f64;
        let mean = s / cnt;
        feats.push(mean);
        feats.push((s2 / cnt - mean * mean).max(0.0).sqrt());
    }
    for ch in 0..c {
        let mut acc = 0.0;
        for f in 1..n {
            let a = &frames[(f - 1) * fl + ch * hw..(f - 1) * fl + (ch + 1) * hw];
            let b = &frames[f * fl + ch * hw..f * fl + (ch + 1) * hw];
            acc += a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).sum::<f64>();
        }
        feats.push(if n > 1 { acc / ((n - 1) * hw) as f64 } else { 0.0 });
    }
    for ch in 0..c {
        for pi in 0..4 {
            for pj in 0..4 {
                let (r0, r1) = (pi * h / 4, ((pi + 1) * h / 4).max(pi * h / 4 + 1).min(h));
                let (c0, c1) = (pj * w / 4, ((pj + 1) * w / 4).max(pj * w / 4 + 1).min(w));
                let mut acc = 0.0;
                let mut cnt = 0usize;
                for f in 0..n {
                    for i in r0..r1 {
                        for j in c0..c1 {
                            acc += frames[f * fl + ch * hw + i * w + j] as f64;
                            cnt += 1;
                        }
                    }
                }
                feats.push(acc / cnt.max(1) as f64);
            }
        }
    }
    feats
}

pub fn feature_drift(video: &Tensor<f32>, window: usize, stride: usize) -> Result<DriftProfile> {
    let (n, c, h, w) = frame_dims(video)?;
    if window == 0 || stride == 0 {
        return Err(Error::invalid("window and stride must be positive"));
    }
    if n < window {
        return Err(Error::invalid(format!("video of {n} frames is shorter than one window of {window}")));
    }
    let fl = c * h * w;
    let data = video.data();
    let feats = |start: usize| window_features(&data[start * fl..(start + window) * fl], c, h, w);
    let base = feats(0);
    let drift = (0..=(n - window) / stride)
        .map(|i| feats(i * stride).iter().zip(&base).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .collect();
    Ok(DriftProfile { drift, window, stride })
}

/// Element-wise mean of several drift profiles of equal length.
pub fn mean_drift(profiles: &[DriftProfile]) -> Result<DriftProfile> {
    let first = profiles.first().ok_or_else(|| Error::invalid("no drift profiles"))?;
    if profiles.iter().any(|p| p.drift.len() != first.drift.len()) {
        return Err(Error::invalid("drift profiles differ in length"));
    }
    let k = profiles.len() as f64;
    let drift = (0..first.drift.len()).map(|i| profiles.iter().map(|p| p.drift[i]).sum::<f64>() / k).collect();
    Ok(DriftProfile { drift, window: first.window, stride: first.stride })
}

/// Smooth clip that repeats exactly every `period` frames: drifting
/// gratings whose phase advances by `2π/period` per frame, plus small
/// per-frame noise.
pub fn planted_loop_clip(period: usize, frames: usize, seed: u64, shape: [usize; 3]) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gratings = Gratings::new(&mut rng, shape[0]);
    let [c, h, w] = shape;
    let mut data = Vec::with_capacity(frames * c * h * w);
    for f in 0..frames {
        let phase = 2.0 * PI * (f % period.max(1)) as f64 / period.max(1) as f64;
        gratings.render(&mut data, [phase; 3], shape, 0.05, &mut rng);
    }
    Tensor::from_vec([frames, c, h, w], data).unwrap()
}

/// Aperiodic counterpart of [`planted_loop_clip`]: the grating phases
/// follow independent Gaussian random walks.
pub fn random_walk_clip(frames: usize, seed: u64, shape: [usize; 3]) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gratings = Gratings::new(&mut rng, shape[0]);
    let [c, h, w] = shape;
    let mut data = Vec::with_capacity(frames * c * h * w);
    let mut phases = [0.0f64; 3];
    for _ in 0..frames {
        gratings.render(&mut data, phases, shape, 0.05, &mut rng);
        for p in &mut phases {
            *p += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Tensor::from_vec([frames, c, h, w], data).unwrap()
}

struct Gratings {
    /// Per channel, three gratings: (freq_i, freq_j, offset).
    waves: Vec<[(f64, f64, f64); 3]>,
}

impl Gratings {
    fn new(rng: &mut ChaCha8Rng, channels: usize) -> Self {
        let waves = (0..channels)
            .map(|_| {
                std::array::from_fn(|_| {
                    (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..2.0 * PI))
                })
            })
            .collect();
        Self { waves }
    }

    fn render(&self, out: &mut Vec<f32>, phases: [f64; 3], [_, h, w]: [usize; 3], noise: f64, rng: &mut ChaCha8Rng) {
        for waves in &self.waves {
            for i in 0..h {
                for j in 0..w {
                    let mut v = 0.0;
                    for (g, &(fi, fj, off)) in waves.iter().enumerate() {
                        v += (fi * i as f64 + fj * j as f64 + off + phases[g]).sin() / 3.0;
                    }
                    v += noise * rng.sample::<f64, _>(StandardNormal);
                    out.push(v as f32);
                }
            }
        }
    }
}
