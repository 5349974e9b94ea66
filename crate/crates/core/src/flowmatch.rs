//! Rectified-flow forward process, velocity targets, the per-frame weighted
//! loss and the Euler step used by the sampler.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::schedule::{loss_weight, TimestepVector};

/// `t * clean + (1 - t) * noise`.
pub fn interpolate<F: Real>(clean: &Tensor<F>, noise: &Tensor<F>, t: f64) -> Result<Tensor<F>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("t {t} outside [0, 1]")));
    }
    let tt = F::from_f64_lossy(t);
    let s = F::from_f64_lossy(1.0 - t);
    clean.zip_map(noise, |x, e| tt * x + s * e)
}

/// `clean - noise`, the constant velocity of the linear path.
pub fn velocity_target<F: Real>(clean: &Tensor<F>, noise: &Tensor<F>) -> Result<Tensor<F>> {
    clean.zip_map(noise, |x, e| x - e)
}

/// `x_t + dt * phi_hat`.
pub fn euler_step<F: Real>(x_t: &Tensor<F>, phi_hat: &Tensor<F>, dt: f64) -> Result<Tensor<F>> {
    if dt < 0.0 {
        return Err(Error::invalid(format!("negative step {dt}")));
    }
    let h = F::from_f64_lossy(dt);
    x_t.zip_map(phi_hat, |x, v| x + h * v)
}

/// In-place Euler update of the frames of `x` (leading axis) with per-frame
/// step sizes.
pub fn euler_step_frames<F: Real>(x: &mut Tensor<F>, phi_hat: &Tensor<F>, dts: &[f64]) -> Result<()> {
    if x.shape() != phi_hat.shape() || x.shape().first() != Some(&dts.len()) {
        return Err(Error::shape(
            "euler_step_frames",
            format!("{:?} / {:?} with {} steps", x.shape(), phi_hat.shape(), dts.len()),
        ));
    }
    for (k, &dt) in dts.iter().enumerate() {
        if dt < 0.0 {
            return Err(Error::invalid(format!("negative step {dt} for frame {k}")));
        }
        if dt == 0.0 {
            continue;
        }
        let h = F::from_f64_lossy(dt);
        let v = phi_hat.index0_slice(k);
        for (xi, &vi) in x.index0_slice_mut(k).iter_mut().zip(v) {
            *xi += h * vi;
        }
    }
    Ok(())
}

/// Noisy sample on the linear path together with its ingredients.
#[derive(Debug, Clone)]
pub struct FlowSample<F: Real> {
    pub clean: Tensor<F>,
    pub noise: Tensor<F>,
    pub t: f64,
    pub noisy: Tensor<F>,
}

impl<F: Real> FlowSample<F> {
    pub fn new(clean: Tensor<F>, noise: Tensor<F>, t: f64) -> Result<Self> {
        let noisy = interpolate(&clean, &noise, t)?;
        Ok(Self { clean, noise, t, noisy })
    }

    pub fn velocity(&self) -> Result<Tensor<F>> {
        velocity_target(&self.clean, &self.noise)
    }
}

/// Apply the forward process frame by frame: frame `k` of the result is
/// `interpolate(clean_k, noise_k, t_k)`.
pub fn interpolate_frames<F: Real>(clean: &Tensor<F>, noise: &Tensor<F>, ts: &[f64]) -> Result<Tensor<F>> {
    if clean.shape() != noise.shape() || clean.shape().first() != Some(&ts.len()) {
        return Err(Error::shape(
            "interpolate_frames",
            format!("{:?} / {:?} with {} times", clean.shape(), noise.shape(), ts.len()),
        ));
    }
    let mut out = clean.clone();
    for (k, &t) in ts.iter().enumerate() {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("t {t} outside [0, 1]")));
        }
        let tt = F::from_f64_lossy(t);
        let s = F::from_f64_lossy(1.0 - t);
        let e = noise.index0_slice(k);
        for (x, &n) in out.index0_slice_mut(k).iter_mut().zip(e) {
            *x = tt * *x + s * n;
        }
    }
    Ok(out)
}

/// Per-frame weights `λ(t_k) / T` shaped `[T, 1]`.
fn frame_weights<F: Real>(ts: &TimestepVector) -> Result<Tensor<F>> {
    let n = ts.len() as f64;
    Tensor::from_vec([ts.len(), 1], ts.t.iter().map(|&t| F::from_f64_lossy(loss_weight(t) / n)).collect())
}

fn weighted_term<F: Real>(g: &mut Graph<F>, pred: Var, target: Var, weights: Var, frames: usize) -> Result<Var> {
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    let per_frame = g.value(sq).len() / frames;
    let sq = g.reshape(sq, [frames, per_frame])?;
    let mse = g.mean_axis(sq, 1)?;
    let weighted = g.mul(mse, weights)?;
    Ok(g.sum(weighted))
}

/// Graph terms of the windowed loss.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub video: Var,
    pub audio: Var,
}

/// `L_v + L_a`, each `(1/T) Σ_k λ(t_k) · mean((pred_k - target_k)²)`.
pub fn windowed_loss<F: Real>(
    g: &mut Graph<F>,
    pred_v: Var,
    target_v: Var,
    pred_a: Var,
    target_a: Var,
    ts: &TimestepVector,
) -> Result<LossVars> {
    let frames = ts.len();
    for v in [pred_v, target_v, pred_a, target_a] {
        if g.shape(v).first() != Some(&frames) {
            return Err(Error::shape(
                "windowed_loss",
                format!("leading axis {:?} for {} timesteps", g.shape(v), frames),
            ));
        }
    }
    if g.shape(pred_v) != g.shape(target_v) || g.shape(pred_a) != g.shape(target_a) {
        return Err(Error::shape("windowed_loss", "prediction and target shapes differ"));
    }
    let w = g.leaf(frame_weights(ts)?);
    let video = weighted_term(g, pred_v, target_v, w, frames)?;
    let audio = weighted_term(g, pred_a, target_a, w, frames)?;
    let total = g.add(video, audio)?;
    Ok(LossVars { total, video, audio })
}

/// Windowed loss on plain tensors, returned as `(L_v, L_a)` in f64.
pub fn windowed_loss_terms<F: Real>(
    pred_v: &Tensor<F>,
    target_v: &Tensor<F>,
    pred_a: &Tensor<F>,
    target_a: &Tensor<F>,
    ts: &TimestepVector,
) -> Result<(f64, f64)> {
    let term = |p: &Tensor<F>, q: &Tensor<F>| -> Result<f64> {
        if p.shape() != q.shape() || p.shape().first() != Some(&ts.len()) {
            return Err(Error::shape("windowed_loss", format!("{:?} vs {:?}", p.shape(), q.shape())));
        }
        let per = p.len() / ts.len();
        let mut total = 0.0;
        for (k, &t) in ts.t.iter().enumerate() {
            let se: f64 = p.data()[k * per..(k + 1) * per]
                .iter()
                .zip(&q.data()[k * per..(k + 1) * per])
                .map(|(&a, &b)| {
                    let d = (a - b).to_f64_lossy();
                    d * d
                })
                .sum();
            total += loss_weight(t) * se / per as f64;
        }
        Ok(total / ts.len() as f64)
    };
    Ok((term(pred_v, target_v)?, term(pred_a, target_a)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check_many;
    use crate::schedule::{preroll_timesteps, rolling_timesteps, PhaseKind};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t1(v: f64) -> Tensor<f64> {
        Tensor::from_vec([1], vec![v]).unwrap()
    }

    #[test]
    fn interpolate_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::randn([3, 4], &mut rng);
        let e = Tensor::<f32>::randn([3, 4], &mut rng);
        assert_eq!(interpolate(&x, &e, 1.0).unwrap(), x);
        assert_eq!(interpolate(&x, &e, 0.0).unwrap(), e);
        assert_eq!(interpolate(&t1(2.0), &t1(0.0), 0.5).unwrap().data(), &[1.0]);
        assert!(interpolate(&x, &Tensor::zeros([4, 3]), 0.5).is_err());
    }

    #[test]
    fn velocity_examples() {
        assert_eq!(velocity_target(&t1(3.0), &t1(1.0)).unwrap().data(), &[2.0]);
        assert_eq!(velocity_target(&t1(1.5), &t1(1.5)).unwrap().data(), &[0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn([8], &mut rng);
        let e = Tensor::<f64>::randn([8], &mut rng);
        let xt = interpolate(&x, &e, 0.3).unwrap();
        let back = euler_step(&xt, &velocity_target(&x, &e).unwrap(), 0.7).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-14);
    }

    #[test]
    fn euler_oracle_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn([6], &mut rng);
        let e = Tensor::<f64>::randn([6], &mut rng);
        let v = velocity_target(&x, &e).unwrap();
        let one = euler_step(&e, &v, 1.0).unwrap();
        assert!(one.max_abs_diff(&x) < 1e-14);
        let two = euler_step(&euler_step(&e, &v, 0.5).unwrap(), &v, 0.5).unwrap();
        assert!(two.max_abs_diff(&one) < 1e-14);
        assert!(euler_step(&e, &v, -0.1).is_err());
    }

    #[test]
    fn euler_converges_on_nonlinear_field() {
        // dx/dt = 0.2 sin(x) + 0.1 t from x(0) = 1.
        let integrate = |steps: usize| {
            let h = 1.0 / steps as f64;
            let mut x = t1(1.0);
            for i in 0..steps {
                let t = i as f64 * h;
                let v = x.map(|xv| 0.2 * xv.sin() + 0.1 * t);
                x = euler_step(&x, &v, h).unwrap();
            }
            x.item()
        };
        let coarse = integrate(1000);
        let fine = integrate(10_000);
        assert!((coarse - fine).abs() < 1e-4, "{coarse} vs {fine}");
    }

    #[test]
    fn oracle_lands_from_any_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn([5], &mut rng);
        let e = Tensor::<f64>::randn([5], &mut rng);
        for t in [0.0, 0.13, 0.5, 0.99] {
            let xt = interpolate(&x, &e, t).unwrap();
            let out = euler_step(&xt, &velocity_target(&x, &e).unwrap(), 1.0 - t).unwrap();
            assert!(out.max_abs_diff(&x) < 1e-12);
        }
    }

    fn loss_value(pv: &Tensor<f64>, tv: &Tensor<f64>, pa: &Tensor<f64>, ta: &Tensor<f64>, ts: &TimestepVector) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = [pv, tv, pa, ta].iter().map(|t| g.leaf((*t).clone())).collect();
        let l = windowed_loss(&mut g, vars[0], vars[1], vars[2], vars[3], ts).unwrap();
        g.value(l.total).item()
    }

    #[test]
    fn windowed_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ts = rolling_timesteps(4, 0.3).unwrap();
        let v = Tensor::<f64>::randn([4, 2, 3], &mut rng);
        let a = Tensor::<f64>::randn([4, 5], &mut rng);
        assert_eq!(loss_value(&v, &v, &a, &a, &ts), 0.0);

        let one = TimestepVector { t: vec![0.5], kind: PhaseKind::Roll, phase: 0.5 };
        let l = loss_value(&t1(0.0), &t1(1.0), &t1(0.2), &t1(0.2), &one);
        assert!((l - 1.595_769_121_605_730_7).abs() < 1e-12);

        // Clamped frames at t = 0 carry zero weight.
        let pre = preroll_timesteps(4, 0.6).unwrap();
        let mut pv = v.clone();
        for x in pv.index0_slice_mut(3) {
            *x += 100.0;
        }
        assert_eq!(loss_value(&pv, &v, &a, &a, &pre), 0.0 + loss_value(&v, &v, &a, &a, &pre));

        let (lv, la) = windowed_loss_terms(&pv, &v, &a, &a, &pre).unwrap();
        assert_eq!((lv, la), (0.0, 0.0));
        assert!(windowed_loss_terms(&v, &v, &a, &a, &rolling_timesteps(3, 0.0).unwrap()).is_err());
    }

    #[test]
    fn windowed_loss_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ts = rolling_timesteps(3, 0.4).unwrap();
        let xs = vec![
            Tensor::<f64>::randn([3, 2, 2], &mut rng),
            Tensor::<f64>::randn([3, 2, 2], &mut rng),
            Tensor::<f64>::randn([3, 4], &mut rng),
            Tensor::<f64>::randn([3, 4], &mut rng),
        ];
        let rep = grad_check_many(
            |g, v| Ok(windowed_loss(g, v[0], v[1], v[2], v[3], &ts)?.total),
            &xs,
            1e-5,
            None,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    proptest! {
        #[test]
        fn interpolate_affine_in_t(t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::randn([6], &mut rng);
            let e = Tensor::<f64>::randn([6], &mut rng);
            let mid = interpolate(&x, &e, 0.5 * (t1 + t2)).unwrap();
            let a = interpolate(&x, &e, t1).unwrap();
            let b = interpolate(&x, &e, t2).unwrap();
            let avg = a.zip_map(&b, |p, q| 0.5 * (p + q)).unwrap();
            prop_assert!(mid.max_abs_diff(&avg) < 1e-12);
        }

        #[test]
        fn loss_non_negative(seed in 0u64..1000, phase in 0.0f64..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ts = rolling_timesteps(3, phase).unwrap();
            let p = Tensor::<f64>::randn([3, 4], &mut rng);
            let q = Tensor::<f64>::randn([3, 4], &mut rng);
            let (lv, la) = windowed_loss_terms(&p, &q, &q, &p, &ts).unwrap();
            prop_assert!(lv >= 0.0 && la >= 0.0);
        }
    }
}
