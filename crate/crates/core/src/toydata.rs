//! Procedural paired audio-video clips with a known coupling, the toy
//! latent codec, and the `RFAV` clip file format.
//!
//! A ball bounces inside an 8x8 latent frame with a class-specific period.
//! Each frame's audio is a group of magnitude spectra of a sinusoid whose
//! pitch rises with the ball's height, so height and dominant frequency bin
//! are strongly correlated by construction.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"RFAV";
pub const VERSION: u32 = 1;
/// Magic, version, seven `u32` fields and a `u64` seed.
pub const HEADER_BYTES: usize = 4 + 4 + 7 * 4 + 8;

/// Bounce period of class 0, in frames; class `c` uses `BASE_PERIOD * PERIOD_RATIO^c`.
pub const BASE_PERIOD: f64 = 6.0;
pub const PERIOD_RATIO: f64 = 1.5;

const BACKGROUND: f64 = 0.1;
const BALL_SIGMA: f64 = 1.0;
const AMPLITUDE: f64 = 0.8;
const DFT_LEN: usize = 32;
const LOW_BIN: f64 = 2.0;
const HIGH_BIN: f64 = 13.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub segments_per_frame: usize,
    pub mel_bins: usize,
    pub class_count: usize,
}

impl Default for ToyGeometry {
    fn default() -> Self {
        Self { channels: 4, height: 8, width: 8, segments_per_frame: 4, mel_bins: 16, class_count: 4 }
    }
}

impl ToyGeometry {
    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn segment_len(&self) -> usize {
        self.segments_per_frame * self.mel_bins
    }

    pub fn video_frame_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn audio_frame_shape(&self) -> [usize; 2] {
        [self.segments_per_frame, self.mel_bins]
    }

    /// Bytes of an `RFAV` file holding `frames` frames.
    pub fn file_bytes(&self, frames: usize) -> usize {
        HEADER_BYTES + frames * (self.frame_len() + self.segment_len()) * 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels != 4 {
            return Err(Error::Config(format!("toy codec needs 4 latent channels, got {}", self.channels)));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::Config(format!("frame {}x{} too small", self.height, self.width)));
        }
        if self.segments_per_frame == 0 || self.class_count == 0 {
            return Err(Error::Config("segments_per_frame and class_count must be positive".into()));
        }
        if self.mel_bins == 0 || self.mel_bins > DFT_LEN / 2 {
            return Err(Error::Config(format!("mel_bins must be in 1..={}", DFT_LEN / 2)));
        }
        Ok(())
    }
}

/// Paired clip: video `[T, c, h, w]` in `[-1, 1]`, audio `[T, F/T, N_m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub video: Tensor<f32>,
    pub audio: Tensor<f32>,
    pub class_id: u32,
    pub seed: u64,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.video.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn geometry(&self, class_count: usize) -> ToyGeometry {
        let v = self.video.shape();
        let a = self.audio.shape();
        ToyGeometry {
            channels: v[1],
            height: v[2],
            width: v[3],
            segments_per_frame: a[1],
            mel_bins: a[2],
            class_count,
        }
    }
}

pub fn class_period(class_id: usize) -> f64 {
    BASE_PERIOD * PERIOD_RATIO.powi(class_id as i32)
}

/// Seed-dependent motion and colour of one clip.
#[derive(Debug, Clone, Copy)]
struct Motion {
    period: f64,
    phase: f64,
    sway_period: f64,
    sway_phase: f64,
    color: [f64; 3],
}

impl Motion {
    fn new(class_id: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class_id as u64);
        Self {
            period: class_period(class_id),
            phase: rng.random(),
            sway_period: rng.random_range(20.0..40.0),
            sway_phase: rng.random_range(0.0..2.0 * PI),
            color: [rng.random_range(0.5..1.0), rng.random_range(0.5..1.0), rng.random_range(0.5..1.0)],
        }
    }

    /// Normalized height in `[0, 1]` at (possibly fractional) frame time.
    fn height(&self, tau: f64) -> f64 {
        (PI * (tau / self.period + self.phase)).sin().abs()
    }

    fn column(&self, tau: f64, width: usize) -> f64 {
        let mid = (width as f64 - 1.0) / 2.0;
        mid + 0.25 * width as f64 * (2.0 * PI * tau / self.sway_period + self.sway_phase).sin()
    }
}

fn row_range(height: usize) -> (f64, f64) {
    (1.5, height as f64 - 2.5)
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 256.0).round() / 256.0) as f32
}

/// RGB frame `[3, h, w]` in `[0, 1]` on the `k/256` grid.
fn render_rgb(geom: &ToyGeometry, height: f64, column: f64, color: [f64; 3]) -> Tensor<f32> {
    let (top, bottom) = row_range(geom.height);
    let row = bottom - height * (bottom - top);
    let mut data = Vec::with_capacity(3 * geom.height * geom.width);
    for c in color {
        for i in 0..geom.height {
            for j in 0..geom.width {
                let d2 = (i as f64 - row).powi(2) + (j as f64 - column).powi(2);
                let blob = (-d2 / (2.0 * BALL_SIGMA * BALL_SIGMA)).exp();
                data.push(quantize(BACKGROUND + (c - BACKGROUND) * blob));
            }
        }
    }
    Tensor::from_vec([3, geom.height, geom.width], data).unwrap()
}

/// `[3, h, w]` RGB in `[0, 1]` to `[4, h, w]` latent: `2x - 1` per colour
/// channel plus their mean as a luminance channel.
pub fn encode_frame(rgb: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w) = match rgb.shape() {
        &[3, h, w] => (h, w),
        s => return Err(Error::shape("encode_frame", format!("expected [3, h, w], got {s:?}"))),
    };
    if let Some(x) = rgb.data().iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::invalid(format!("pixel value {x} outside [0, 1]")));
    }
    let n = h * w;
    let mut out: Vec<f32> = rgb.data().iter().map(|&x| 2.0 * x - 1.0).collect();
    let lum: Vec<f32> = (0..n).map(|i| (out[i] + out[n + i] + out[2 * n + i]) / 3.0).collect();
    out.extend(lum);
    Tensor::from_vec([4, h, w], out)
}

/// Inverse of [`encode_frame`] on the colour channels; the luminance
/// channel is dropped.
pub fn decode_frame(latent: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w) = match latent.shape() {
        &[4, h, w] => (h, w),
        s => return Err(Error::shape("decode_frame", format!("expected [4, h, w], got {s:?}"))),
    };
    let color = &latent.data()[..3 * h * w];
    if let Some(x) = color.iter().find(|x| !(-1.0..=1.0).contains(*x)) {
        return Err(Error::invalid(format!("latent value {x} outside [-1, 1]")));
    }
    Tensor::from_vec([3, h, w], color.iter().map(|&v| (v + 1.0) / 2.0).collect())
}

/// DFT bin (fractional) of the tone for a normalized height.
pub fn pitch_bin(height: f64) -> f64 {
    LOW_BIN + (HIGH_BIN - LOW_BIN) * height.clamp(0.0, 1.0)
}

struct Spectrum {
    fft: std::sync::Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

impl Spectrum {
    fn new() -> Self {
        let window = (0..DFT_LEN).map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / DFT_LEN as f64).cos()).collect();
        Self { fft: FftPlanner::new().plan_fft_forward(DFT_LEN), window }
    }

    /// First `bins` magnitudes of the Hann-windowed tone, mapped to `[-1, 1]`.
    fn tone(&self, bin: f64, bins: usize) -> Vec<f32> {
        let mut buf: Vec<Complex<f64>> = (0..DFT_LEN)
            .map(|n| {
                let s = AMPLITUDE * (2.0 * PI * bin * n as f64 / DFT_LEN as f64).sin();
                Complex::new(s * self.window[n], 0.0)
            })
            .collect();
        self.fft.process(&mut buf);
        let scale = 4.0 / DFT_LEN as f64;
        buf[..bins].iter().map(|c| (2.0 * (c.norm() * scale).min(1.0) - 1.0) as f32).collect()
    }
}

/// Deterministic clip for `(class_id, seed, length)`.
pub fn generate_clip(geom: &ToyGeometry, class_id: usize, seed: u64, length: usize) -> Result<Clip> {
    geom.validate()?;
    if class_id >= geom.class_count {
        return Err(Error::invalid(format!("class {class_id} outside 0..{}", geom.class_count)));
    }
    if length == 0 {
        return Err(Error::invalid("clip length must be at least one frame"));
    }
    let motion = Motion::new(class_id, seed);
    let spectrum = Spectrum::new();
    let mut video = Vec::with_capacity(length * geom.frame_len());
    let mut audio = Vec::with_capacity(length * geom.segment_len());
    for f in 0..length {
        let tau = f as f64;
        let rgb = render_rgb(geom, motion.height(tau), motion.column(tau, geom.width), motion.color);
        video.extend_from_slice(encode_frame(&rgb)?.data());
        for s in 0..geom.segments_per_frame {
            // Segments straddle the frame instant symmetrically.
            let sub = tau + (s as f64 + 0.5) / geom.segments_per_frame as f64 - 0.5;
            audio.extend(spectrum.tone(pitch_bin(motion.height(sub)), geom.mel_bins));
        }
    }
    Ok(Clip {
        video: Tensor::from_vec([length, geom.channels, geom.height, geom.width], video)?,
        audio: Tensor::from_vec([length, geom.segments_per_frame, geom.mel_bins], audio)?,
        class_id: class_id as u32,
        seed,
    })
}

/// Normalized ball height read back from one latent frame `[4, h, w]`:
/// the luminance-weighted row centroid above the frame minimum.
pub fn ball_height(frame: &[f32], geom: &ToyGeometry) -> f64 {
    let n = geom.height * geom.width;
    let lum = &frame[(geom.channels - 1) * n..geom.channels * n];
    let floor = lum.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..geom.height {
        for j in 0..geom.width {
            let w = lum[i * geom.width + j] as f64 - floor;
            num += w * i as f64;
            den += w;
        }
    }
    let (top, bottom) = row_range(geom.height);
    let row = if den > 0.0 { num / den } else { (top + bottom) / 2.0 };
    (bottom - row) / (bottom - top)
}

/// Argmax bin of the segment-averaged spectrum of one frame `[F/T, N_m]`.
pub fn dominant_bin(segments: &[f32], mel_bins: usize) -> usize {
    let mut avg = vec![0.0f64; mel_bins];
    for seg in segments.chunks_exact(mel_bins) {
        for (a, &v) in avg.iter_mut().zip(seg) {
            *a += v as f64;
        }
    }
    avg.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Correlation between per-frame ball height and dominant audio bin.
pub fn av_correlation(video: &Tensor<f32>, audio: &Tensor<f32>, geom: &ToyGeometry) -> f64 {
    let frames = video.shape()[0].min(audio.shape()[0]);
    let heights: Vec<f64> = (0..frames).map(|f| ball_height(video.index0_slice(f), geom)).collect();
    let bins: Vec<f64> = (0..frames).map(|f| dominant_bin(audio.index0_slice(f), geom.mel_bins) as f64).collect();
    pearson(&heights, &bins)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ManifestEntry {
    pub class_id: usize,
    pub seed: u64,
    pub length: usize,
}

/// One `class,seed,length` triple per line; blank lines and `#` comments
/// are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("manifest line {}: expected class,seed,length: {raw:?}", n + 1));
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        out.push(ManifestEntry {
            class_id: parts[0].parse().map_err(|_| bad())?,
            seed: parts[1].parse().map_err(|_| bad())?,
            length: parts[2].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    entries.iter().map(|e| format!("{},{},{}\n", e.class_id, e.seed, e.length)).collect()
}

/// Default training corpus: `count` clips cycling through the classes.
pub fn default_manifest(count: usize, length: usize, class_count: usize) -> Vec<ManifestEntry> {
    (0..count).map(|i| ManifestEntry { class_id: i % class_count, seed: 1000 + i as u64, length }).collect()
}

pub fn generate_corpus(geom: &ToyGeometry, entries: &[ManifestEntry]) -> Result<Vec<Clip>> {
    entries.iter().map(|e| generate_clip(geom, e.class_id, e.seed, e.length)).collect()
}

/// Fixed-size header of an `RFAV` file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipHeader {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub segments_per_frame: usize,
    pub mel_bins: usize,
    pub class_id: u32,
    pub seed: u64,
}

impl ClipHeader {
    fn encode(&self) -> Result<Vec<u8>> {
        let mut b = Vec::with_capacity(HEADER_BYTES);
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        let fields =
            [self.frames, self.channels, self.height, self.width, self.segments_per_frame, self.mel_bins];
        for v in fields {
            let v = u32::try_from(v).map_err(|_| Error::Format(format!("header field {v} exceeds u32")))?;
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&self.class_id.to_le_bytes());
        b.extend_from_slice(&self.seed.to_le_bytes());
        Ok(b)
    }

    fn payload_bytes(&self) -> Option<usize> {
        let frame = self.channels.checked_mul(self.height)?.checked_mul(self.width)?;
        let seg = self.segments_per_frame.checked_mul(self.mel_bins)?;
        self.frames.checked_mul(frame.checked_add(seg)?)?.checked_mul(4)
    }
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn write_clip(path: &Path, clip: &Clip) -> Result<()> {
    let v = clip.video.shape();
    let a = clip.audio.shape();
    if v.len() != 4 || a.len() != 3 || v[0] != a[0] {
        return Err(Error::shape("write_clip", format!("video {v:?} / audio {a:?}")));
    }
    let header = ClipHeader {
        frames: v[0],
        channels: v[1],
        height: v[2],
        width: v[3],
        segments_per_frame: a[1],
        mel_bins: a[2],
        class_id: clip.class_id,
        seed: clip.seed,
    };
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&header.encode()?)?;
    w.write_all(&f32_bytes(clip.video.data()))?;
    w.write_all(&f32_bytes(clip.audio.data()))?;
    w.flush()?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<ClipHeader> {
    let mut r = BufReader::new(File::open(path)?);
    read_header_from(&mut r, path)
}

fn read_header_from(r: &mut impl Read, path: &Path) -> Result<ClipHeader> {
    let mut buf = Vec::with_capacity(HEADER_BYTES);
    r.take(HEADER_BYTES as u64).read_to_end(&mut buf)?;
    if buf.len() >= 4 && &buf[..4] != MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf(), expected: "RFAV" });
    }
    if buf.len() < HEADER_BYTES {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("header has {} of {HEADER_BYTES} bytes", buf.len()),
        });
    }
    let u = |i: usize| u32::from_le_bytes(buf[4 * i..4 * i + 4].try_into().unwrap());
    if u(1) != VERSION {
        return Err(Error::VersionMismatch { path: path.to_path_buf(), found: u(1), expected: VERSION });
    }
    Ok(ClipHeader {
        frames: u(2) as usize,
        channels: u(3) as usize,
        height: u(4) as usize,
        width: u(5) as usize,
        segments_per_frame: u(6) as usize,
        mel_bins: u(7) as usize,
        class_id: u(8),
        seed: u64::from_le_bytes(buf[36..44].try_into().unwrap()),
    })
}

pub fn read_clip(path: &Path) -> Result<Clip> {
    let file = File::open(path)?;
    let file_len = file.metadata()?.len() as usize;
    let mut r = BufReader::new(file);
    let h = read_header_from(&mut r, path)?;
    let payload = h
        .payload_bytes()
        .ok_or_else(|| Error::Format(format!("{}: header sizes overflow", path.display())))?;
    let want = HEADER_BYTES + payload;
    if file_len < want {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("{file_len} bytes, header implies {want}"),
        });
    }
    if file_len > want {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes after the audio tensor",
            path.display(),
            file_len - want
        )));
    }
    let mut read_f32 = |n: usize| -> Result<Vec<f32>> {
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    };
    let video = read_f32(h.frames * h.channels * h.height * h.width)?;
    let audio = read_f32(h.frames * h.segments_per_frame * h.mel_bins)?;
    Ok(Clip {
        video: Tensor::from_vec([h.frames, h.channels, h.height, h.width], video)?,
        audio: Tensor::from_vec([h.frames, h.segments_per_frame, h.mel_bins], audio)?,
        class_id: h.class_id,
        seed: h.seed,
    })
}

/// Appends frames to an `RFAV` file as they are produced. Video frames go
/// straight to the file; audio is spooled to an anonymous temporary file
/// and appended by [`ClipWriter::finish`], which also fixes the frame count.
pub struct ClipWriter {
    out: BufWriter<File>,
    spool: BufWriter<File>,
    header: ClipHeader,
}

impl ClipWriter {
    pub fn create(path: &Path, geom: &ToyGeometry, class_id: u32, seed: u64) -> Result<Self> {
        let header = ClipHeader {
            frames: 0,
            channels: geom.channels,
            height: geom.height,
            width: geom.width,
            segments_per_frame: geom.segments_per_frame,
            mel_bins: geom.mel_bins,
            class_id,
            seed,
        };
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(&header.encode()?)?;
        Ok(Self { out, spool: BufWriter::new(tempfile::tempfile()?), header })
    }

    pub fn frames(&self) -> usize {
        self.header.frames
    }

    /// Append one video frame `[c, h, w]` and its audio group `[F/T, N_m]`.
    pub fn push(&mut self, video: &[f32], audio: &[f32]) -> Result<()> {
        let h = &self.header;
        if video.len() != h.channels * h.height * h.width || audio.len() != h.segments_per_frame * h.mel_bins {
            return Err(Error::shape("ClipWriter::push", format!("{} / {} elements", video.len(), audio.len())));
        }
        self.out.write_all(&f32_bytes(video))?;
        self.spool.write_all(&f32_bytes(audio))?;
        self.header.frames += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<ClipHeader> {
        let Self { out, spool, header } = self;
        let mut spool = spool.into_inner().map_err(|e| e.into_error())?;
        spool.seek(SeekFrom::Start(0))?;
        let mut out = out.into_inner().map_err(|e| e.into_error())?;
        io::copy(&mut spool, &mut out)?;
        out.seek(SeekFrom::Start(0))?;
        out.write_all(&header.encode()?)?;
        out.sync_all()?;
        Ok(header)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geom() -> ToyGeometry {
        ToyGeometry::default()
    }

    #[test]
    fn clips_are_deterministic_and_bounded() {
        let a = generate_clip(&geom(), 2, 7, 20).unwrap();
        let b = generate_clip(&geom(), 2, 7, 20).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_clip(&geom(), 2, 8, 20).unwrap());
        assert_eq!(a.video.shape(), &[20, 4, 8, 8]);
        assert_eq!(a.audio.shape(), &[20, 4, 16]);
        assert!(a.video.data().iter().chain(a.audio.data()).all(|x| (-1.0..=1.0).contains(x)));
        assert!(generate_clip(&geom(), 4, 7, 20).is_err());
        assert!(generate_clip(&geom(), 0, 7, 0).is_err());
    }

    #[test]
    fn audio_energy_never_vanishes() {
        let clip = generate_clip(&geom(), 1, 3, 64).unwrap();
        for f in 0..64 {
            for seg in clip.audio.index0_slice(f).chunks(16) {
                assert!(seg.iter().any(|&v| v > -0.5), "frame {f}");
            }
        }
    }

    #[test]
    fn height_and_pitch_correlate() {
        for class in 0..4 {
            for seed in [1u64, 2, 3] {
                let clip = generate_clip(&geom(), class, seed, 64).unwrap();
                let r = av_correlation(&clip.video, &clip.audio, &geom());
                assert!(r >= 0.9, "class {class} seed {seed}: {r}");
            }
        }
    }

    fn zero_crossing_period(clip: &Clip) -> f64 {
        let g = geom();
        let h: Vec<f64> = (0..clip.len()).map(|f| ball_height(clip.video.index0_slice(f), &g)).collect();
        let mean = h.iter().sum::<f64>() / h.len() as f64;
        let idx: Vec<usize> =
            h.windows(2).enumerate().filter(|(_, w)| (w[0] - mean) * (w[1] - mean) < 0.0).map(|(i, _)| i).collect();
        // Two mean crossings per bounce.
        2.0 * (idx[idx.len() - 1] - idx[0]) as f64 / (idx.len() - 1) as f64
    }

    #[test]
    fn class_periods_follow_ratio() {
        let p0 = zero_crossing_period(&generate_clip(&geom(), 0, 5, 240).unwrap());
        let p1 = zero_crossing_period(&generate_clip(&geom(), 1, 5, 240).unwrap());
        assert!((p0 - class_period(0)).abs() < 0.5, "{p0}");
        assert!((p1 / p0 - PERIOD_RATIO).abs() < 0.1, "{}", p1 / p0);
    }

    #[test]
    fn codec_examples() {
        let black = Tensor::<f32>::zeros([3, 8, 8]);
        let lat = encode_frame(&black).unwrap();
        assert!(lat.data()[..192].iter().all(|&v| v == -1.0));
        let clip = generate_clip(&geom(), 0, 1, 1).unwrap();
        let frame = clip.video.index0(0);
        let n = 64;
        for i in 0..n {
            let d = frame.data();
            assert_eq!(d[3 * n + i], (d[i] + d[n + i] + d[2 * n + i]) / 3.0);
        }
        assert!(encode_frame(&Tensor::full([3, 2, 2], 1.5)).is_err());
        assert!(decode_frame(&Tensor::zeros([3, 2, 2])).is_err());
    }

    proptest! {
        #[test]
        fn codec_round_trip(ks in proptest::collection::vec(0u32..=256, 3 * 16)) {
            let rgb = Tensor::from_vec([3, 4, 4], ks.iter().map(|&k| k as f32 / 256.0).collect()).unwrap();
            prop_assert_eq!(decode_frame(&encode_frame(&rgb).unwrap()).unwrap(), rgb);
        }

        #[test]
        fn manifest_round_trip(items in proptest::collection::vec((0usize..4, any::<u64>(), 1usize..500), 0..20)) {
            let entries: Vec<_> = items.into_iter()
                .map(|(class_id, seed, length)| ManifestEntry { class_id, seed, length })
                .collect();
            prop_assert_eq!(parse_manifest(&format_manifest(&entries)).unwrap(), entries);
        }
    }

    #[test]
    fn manifest_parsing() {
        let m = parse_manifest("# corpus\n0, 11, 64\n\n3,12,32 # last\n").unwrap();
        assert_eq!(m, vec![
            ManifestEntry { class_id: 0, seed: 11, length: 64 },
            ManifestEntry { class_id: 3, seed: 12, length: 32 }
        ]);
        assert!(parse_manifest("0,1").is_err());
        assert!(parse_manifest("a,1,2").is_err());
    }

    #[test]
    fn file_round_trip_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.rfav");
        let clip = generate_clip(&geom(), 3, 99, 16).unwrap();
        write_clip(&path, &clip).unwrap();
        let size = std::fs::metadata(&path).unwrap().len() as usize;
        // Independent arithmetic: 44-byte header, 16 frames of 4*8*8 video
        // and 4*16 audio values at 4 bytes each.
        assert_eq!(size, 44 + 16 * (4 * 8 * 8 + 4 * 16) * 4);
        assert_eq!(size, geom().file_bytes(16));
        assert_eq!(read_clip(&path).unwrap(), clip);
        let h = read_header(&path).unwrap();
        assert_eq!((h.frames, h.class_id, h.seed), (16, 3, 99));
    }

    #[test]
    fn file_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.rfav");
        write_clip(&path, &generate_clip(&geom(), 0, 1, 4).unwrap()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let bad = dir.path().join("bad.rfav");

        std::fs::write(&bad, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_clip(&bad), Err(Error::Truncated { .. })));
        std::fs::write(&bad, &bytes[..10]).unwrap();
        assert!(matches!(read_clip(&bad), Err(Error::Truncated { .. })));

        let mut b = bytes.clone();
        b[..4].copy_from_slice(b"RIFF");
        std::fs::write(&bad, &b).unwrap();
        assert!(matches!(read_clip(&bad), Err(Error::BadMagic { .. })));

        let mut b = bytes.clone();
        b[4..8].copy_from_slice(&2u32.to_le_bytes());
        std::fs::write(&bad, &b).unwrap();
        assert!(matches!(read_clip(&bad), Err(Error::VersionMismatch { found: 2, .. })));

        let mut b = bytes;
        b.extend_from_slice(&[0; 4]);
        std::fs::write(&bad, &b).unwrap();
        assert!(matches!(read_clip(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn streaming_writer_matches_batch_writer() {
        let dir = tempfile::tempdir().unwrap();
        let clip = generate_clip(&geom(), 1, 5, 9).unwrap();
        let batch = dir.path().join("batch.rfav");
        write_clip(&batch, &clip).unwrap();
        let stream = dir.path().join("stream.rfav");
        let mut w = ClipWriter::create(&stream, &geom(), 1, 5).unwrap();
        for f in 0..clip.len() {
            w.push(clip.video.index0_slice(f), clip.audio.index0_slice(f)).unwrap();
        }
        assert!(w.push(&[0.0; 3], &[0.0; 64]).is_err());
        assert_eq!(w.finish().unwrap().frames, 9);
        assert_eq!(std::fs::read(&stream).unwrap(), std::fs::read(&batch).unwrap());
    }
}
