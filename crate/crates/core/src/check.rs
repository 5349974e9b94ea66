//! Self-verification suite: 64-bit gradient checks, schedule invariants,
//! the oracle sampler and per-variant causality.

use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::flowmatch::{velocity_target, windowed_loss};
use crate::model::layers::{adaln_modulate, gated_residual, Linear};
use crate::model::{block_forward, BlockMasks, BlockParams, BlockVariant, ModelConfig, ParamId, ParamStore, RFlavNetwork};
use crate::numerics::{grad_check_many, Graph, Mask, Tensor, Var};
use crate::rolling::{generate_stream, OracleField, SamplerConfig, VelocityFn};
use crate::schedule::{
    loss_weight, preroll_timesteps, rolling_timesteps, sample_training_schedule, PhaseKind, ScheduleConfig,
};
use crate::toydata::{generate_clip, ToyGeometry};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const ORACLE_TOLERANCE: f64 = 1e-3;
const FD_STEP: f64 = 1e-5;

pub const VARIANTS: [BlockVariant; 3] =
    [BlockVariant::ConcatAttention, BlockVariant::TemporalAverage, BlockVariant::TemporalAveragePlusCond];

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}: {} ({:.2}s)", self.name, self.detail, self.seconds)
    }
}

/// Run `body`, turning an error into a failed outcome.
pub fn timed(name: impl Into<String>, body: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = body().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome { name: name.into(), passed, detail, seconds: start.elapsed().as_secs_f64() }
}

pub fn all_passed(outcomes: &[CheckOutcome]) -> bool {
    outcomes.iter().all(|o| o.passed)
}

/// Rolling gaps, range, splice, mixture fraction and weight shape.
pub fn schedule_suite() -> CheckOutcome {
    timed("schedule invariants", || {
        let mut problems = Vec::new();
        for window in [1usize, 2, 4, 10, 16, 33] {
            for i in 0..=40 {
                let phase = i as f64 / 40.0;
                let r = rolling_timesteps(window, phase)?;
                let p = preroll_timesteps(window, phase)?;
                if r.t.windows(2).any(|w| (w[0] - w[1] - 1.0 / window as f64).abs() > 1e-12) {
                    problems.push(format!("rolling gap T={window} phase={phase}"));
                }
                if r.t.iter().chain(&p.t).any(|t| !(0.0..=1.0).contains(t)) {
                    problems.push(format!("t out of range T={window} phase={phase}"));
                }
            }
            if preroll_timesteps(window, 0.0)?.t != rolling_timesteps(window, 0.0)?.t {
                problems.push(format!("preroll(0) != rolling(0) at T={window}"));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let cfg = ScheduleConfig::default();
        let draws = 10_000;
        let mut pre = 0;
        for _ in 0..draws {
            if sample_training_schedule(&cfg, &mut rng)?.kind == PhaseKind::PreRoll {
                pre += 1;
            }
        }
        let frac = pre as f64 / draws as f64;
        if !(0.18..=0.22).contains(&frac) {
            problems.push(format!("mixture fraction {frac}"));
        }
        let asym = (1..1000)
            .map(|i| {
                let t = i as f64 / 1000.0;
                (loss_weight(t) - loss_weight(1.0 - t)).abs()
            })
            .fold(0.0, f64::max);
        if asym > 1e-12 {
            problems.push(format!("weight asymmetry {asym:e}"));
        }
        let n = 200_000;
        let h = 1.0 / n as f64;
        let mass: f64 = (0..n).map(|i| loss_weight((i as f64 + 0.5) * h) * h).sum();
        if (mass - 1.0).abs() > 1e-3 {
            problems.push(format!("weight mass {mass}"));
        }
        let ok = problems.is_empty();
        let detail = if ok {
            format!("preroll fraction {frac:.4}, weight mass {mass:.6}")
        } else {
            problems.join("; ")
        };
        Ok((ok, detail))
    })
}

fn grad_outcome<Fun>(name: &str, xs: &[Tensor<f64>], max_coords: Option<usize>, f: Fun) -> CheckOutcome
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    timed(format!("gradient {name}"), || {
        let rep = grad_check_many(f, xs, FD_STEP, max_coords)?;
        Ok((
            rep.max_rel_error < GRAD_TOLERANCE,
            format!("max rel error {:.2e} over {} coords", rep.max_rel_error, rep.coords_checked),
        ))
    })
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn probe(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.leaf(Tensor::randn(g.shape(x).to_vec(), &mut rng));
    let y = g.mul(x, w)?;
    Ok(g.sum(y))
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn kernel_gradients() -> Vec<CheckOutcome> {
    let a = randn(&[2, 3, 4], 1);
    let b = randn(&[2, 1, 4], 2);
    let m = randn(&[4, 5], 3);
    let qkv: Vec<_> = (0..3).map(|i| randn(&[2, 5, 4], 10 + i)).collect();
    let causal = Arc::new(Mask::block_causal(5, 2));
    let mut out = vec![
        grad_outcome("add (broadcast)", &[a.clone(), b.clone()], None, |g, v| {
            let y = g.add(v[0], v[1])?;
            probe(g, y, 100)
        }),
        grad_outcome("sub (broadcast)", &[a.clone(), b.clone()], None, |g, v| {
            let y = g.sub(v[0], v[1])?;
            probe(g, y, 101)
        }),
        grad_outcome("mul (broadcast)", &[a.clone(), b.clone()], None, |g, v| {
            let y = g.mul(v[0], v[1])?;
            probe(g, y, 102)
        }),
        grad_outcome("scale", std::slice::from_ref(&a), None, |g, v| {
            let y = g.scale(v[0], -1.3);
            probe(g, y, 103)
        }),
        grad_outcome("matmul", &[a.clone(), m], None, |g, v| {
            let y = g.matmul(v[0], v[1])?;
            probe(g, y, 104)
        }),
        grad_outcome("softmax", std::slice::from_ref(&a), None, |g, v| {
            let y = g.softmax(v[0]);
            probe(g, y, 105)
        }),
        grad_outcome("layer_norm", std::slice::from_ref(&a), None, |g, v| {
            let y = g.layer_norm(v[0], 1e-6)?;
            probe(g, y, 106)
        }),
        grad_outcome("silu", std::slice::from_ref(&a), None, |g, v| {
            let y = g.silu(v[0]);
            probe(g, y, 107)
        }),
        grad_outcome("gelu", std::slice::from_ref(&a), None, |g, v| {
            let y = g.gelu(v[0]);
            probe(g, y, 108)
        }),
        grad_outcome("mean_axis", std::slice::from_ref(&a), None, |g, v| {
            let y = g.mean_axis(v[0], 1)?;
            probe(g, y, 109)
        }),
        grad_outcome("mean and sum", std::slice::from_ref(&a), None, |g, v| {
            let m = g.mean(v[0]);
            let s = g.sum(v[0]);
            let y = g.mul(m, s)?;
            Ok(g.sum(y))
        }),
        grad_outcome("reshape and permute", std::slice::from_ref(&a), None, |g, v| {
            let y = g.permute(v[0], &[2, 0, 1])?;
            let y = g.reshape(y, [8, 3])?;
            probe(g, y, 110)
        }),
        grad_outcome("concat and narrow", &[a.clone(), b], None, |g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            let y = g.narrow(y, 1, 1, 3)?;
            probe(g, y, 111)
        }),
        grad_outcome("attention", &qkv, None, |g, v| {
            let y = g.attention(v[0], v[1], v[2], None)?;
            probe(g, y, 112)
        }),
    ];
    out.push(grad_outcome("attention (block-causal mask)", &qkv, None, move |g, v| {
        let y = g.attention(v[0], v[1], v[2], Some(&causal))?;
        probe(g, y, 113)
    }));
    out
}

pub fn adaln_gradient() -> CheckOutcome {
    let xs = vec![randn(&[2, 3, 4], 20), randn(&[2, 4], 21), randn(&[4, 12], 22), randn(&[1, 12], 23)];
    grad_outcome("adaln_modulate", &xs, None, |g, v| {
        let map = Linear { w: ParamId(2), b: ParamId(3), fan_in: 4, fan_out: 12 };
        let (y, gate) = adaln_modulate(g, v, &map, v[0], v[1])?;
        let y = gated_residual(g, v[0], gate, y)?;
        probe(g, y, 24)
    })
}

/// Geometry used by the micro gradient and causality checks.
pub fn micro_config(variant: BlockVariant) -> ModelConfig {
    ModelConfig {
        channels: 1,
        height: 4,
        width: 4,
        patch: 2,
        segments_per_frame: 2,
        mel_bins: 3,
        hidden: 8,
        heads: 2,
        blocks: 1,
        mlp_ratio: 2,
        variant,
        class_count: Some(2),
        freq_dim: 8,
        joint_layers: 2,
    }
}

/// Micro network with every parameter drawn N(0, 0.2^2), so the zero-init
/// modulation maps and heads carry gradient.
pub fn randomized_micro(variant: BlockVariant, seed: u64) -> Result<RFlavNetwork<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = RFlavNetwork::<f64>::new(micro_config(variant), &mut rng)?;
    net.params_mut().randomize(0.2, &mut rng);
    Ok(net)
}

pub fn block_gradient(variant: BlockVariant) -> CheckOutcome {
    let (t, l, s, d) = (2, 4, 2, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut store = ParamStore::<f64>::default();
    let bp = BlockParams::new(&mut store, "b", d, 2, 16, variant, 2, &mut rng);
    store.randomize(0.2, &mut rng);
    let n = store.len();
    let mut xs = store.tensors().to_vec();
    xs.push(randn(&[t, l, d], 31));
    xs.push(randn(&[t, s, d], 32));
    xs.push(randn(&[t, d], 33));
    let masks = BlockMasks::new(t, l, s, variant);
    grad_outcome(&format!("block variant ({variant})"), &xs, Some(24), move |g, v| {
        let (yv, ya) = block_forward(g, &v[..n], &bp, variant, &masks, v[n], v[n + 1], v[n + 2])?;
        let pv = probe(g, yv, 34)?;
        let pa = probe(g, ya, 35)?;
        g.add(pv, pa)
    })
}

/// Windowed flow-matching loss of the micro network, differentiated with
/// respect to every parameter and both inputs.
pub fn model_loss_gradient(variant: BlockVariant) -> CheckOutcome {
    let net = match randomized_micro(variant, 40) {
        Ok(n) => n,
        Err(e) => return timed("micro-model loss", || Err(e)),
    };
    let cfg = net.config().clone();
    let ts = match rolling_timesteps(2, 0.4) {
        Ok(ts) => ts,
        Err(e) => return timed("micro-model loss", || Err(e)),
    };
    let n = net.params().len();
    let mut xs = net.params().tensors().to_vec();
    xs.push(randn(&[2, cfg.channels, cfg.height, cfg.width], 41));
    xs.push(randn(&[2, cfg.segments_per_frame, cfg.mel_bins], 42));
    let target_v = randn(&[2, cfg.channels, cfg.height, cfg.width], 43);
    let target_a = randn(&[2, cfg.segments_per_frame, cfg.mel_bins], 44);
    grad_outcome(&format!("micro-model loss ({variant})"), &xs, Some(24), move |g, v| {
        let (pv, pa) = net.forward(g, &v[..n], v[n], v[n + 1], &ts.t, Some(1))?;
        let tv = g.leaf(target_v.clone());
        let ta = g.leaf(target_a.clone());
        Ok(windowed_loss(g, pv, tv, pa, ta, &ts)?.total)
    })
}

pub fn gradient_suite() -> Vec<CheckOutcome> {
    let mut out = kernel_gradients();
    out.push(adaln_gradient());
    for v in VARIANTS {
        out.push(block_gradient(v));
    }
    for v in VARIANTS {
        out.push(model_loss_gradient(v));
    }
    out
}

/// Rolling sampler driven by the exact field toward a toy clip: every
/// emitted frame must land on its target. `velocity` is the function the
/// field uses to turn (target, noise) into a velocity.
pub fn oracle_sampler(velocity: VelocityFn<f64>, steps_per_frame: usize, frames: usize) -> CheckOutcome {
    timed(format!("oracle sampler (S = {steps_per_frame})"), || {
        let geom = ToyGeometry::default();
        let cfg = SamplerConfig { steps_per_frame, seed: 5, ..SamplerConfig::default() };
        // The window reaches `window` frames past the last emitted one.
        let clip = generate_clip(&geom, 2, 77, frames + cfg.window + 1)?;
        let (v, a): (Tensor<f64>, Tensor<f64>) = (clip.video.cast(), clip.audio.cast());
        let mut field = OracleField { target: |j: usize| (v.index0(j), a.index0(j)), velocity };
        let mut sink: Vec<(Tensor<f64>, Tensor<f64>)> = Vec::new();
        generate_stream(&mut field, &cfg, &geom, frames, &mut sink)?;
        let mut worst = 0.0f64;
        for (i, (fv, fa)) in sink.iter().enumerate() {
            worst = worst.max(fv.max_abs_diff(&v.index0(i))).max(fa.max_abs_diff(&a.index0(i)));
        }
        Ok((worst <= ORACLE_TOLERANCE, format!("{} frames, max abs error {worst:.2e}", sink.len())))
    })
}

/// Perturbing the video, audio or timestep of frame `j` must leave every
/// output before `j` bit-identical, and must change frame `j` itself.
pub fn causality(variant: BlockVariant) -> CheckOutcome {
    timed(format!("causality ({variant})"), || {
        let net = randomized_micro(variant, 50)?;
        let cfg = net.config().clone();
        let frames = 4;
        let v = randn(&[frames, cfg.channels, cfg.height, cfg.width], 51);
        let a = randn(&[frames, cfg.segments_per_frame, cfg.mel_bins], 52);
        let ts = [0.9, 0.6, 0.4, 0.1];
        let (bv, ba) = net.predict(&v, &a, &ts, Some(0))?;
        let (fl, sl) = (cfg.frame_len(), cfg.segment_len());
        let mut cases = 0;
        for j in 1..frames {
            let mut v2 = v.clone();
            v2.index0_slice_mut(j).iter_mut().for_each(|x| *x += 0.5);
            let mut a2 = a.clone();
            a2.index0_slice_mut(j).iter_mut().for_each(|x| *x -= 0.5);
            let mut ts2 = ts;
            ts2[j] = 0.77;
            for (vv, aa, tt) in [(&v2, &a, &ts), (&v, &a2, &ts), (&v, &a, &ts2)] {
                let (pv, pa) = net.predict(vv, aa, tt, Some(0))?;
                let past_same = pv.data()[..j * fl] == bv.data()[..j * fl] && pa.data()[..j * sl] == ba.data()[..j * sl];
                let present_moved = pv.data()[j * fl..] != bv.data()[j * fl..];
                if !past_same || !present_moved {
                    return Ok((false, format!("perturbation at frame {j} broke causality")));
                }
                cases += 1;
            }
        }
        Ok((true, format!("{cases} perturbations, earlier frames bit-identical")))
    })
}

/// Everything `check` runs, with the sampler's velocity function injectable.
pub fn run_suite(velocity: VelocityFn<f64>) -> Vec<CheckOutcome> {
    let mut out = vec![schedule_suite()];
    out.extend(gradient_suite());
    out.push(oracle_sampler(velocity, 100, 24));
    for v in VARIANTS {
        out.push(causality(v));
    }
    out
}

pub fn default_suite() -> Vec<CheckOutcome> {
    run_suite(velocity_target::<f64>)
}
