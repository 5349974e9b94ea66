use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative error used by the checks: `|a - fd| / max(|a|, |fd|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Worst coordinate found by [`grad_check_many`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

fn eval_scalar<Fun>(f: &Fun, xs: &[Tensor<f64>]) -> Result<f64>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::shape("grad_check", format!("function output {:?} is not scalar", v.shape())));
    }
    Ok(v.item())
}

/// Compare reverse-mode gradients of `f` against central differences for
/// several inputs. `max_coords` caps the coordinates probed per input; the
/// probed ones are spread evenly over the tensor.
pub fn grad_check_many<Fun>(
    f: Fun,
    xs: &[Tensor<f64>],
    fd_step: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&fd_step) {
        return Err(Error::invalid(format!("fd_step {fd_step} outside [1e-7, 1e-3]")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::shape(
            "grad_check",
            format!("function output {:?} is not scalar", g.value(out).shape()),
        ));
    }
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        input: 0,
        coord: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let mut probe = xs.to_vec();
    for (i, x) in xs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i], x.shape());
        let n = x.len();
        let stride = match max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for c in (0..n).step_by(stride) {
            let orig = probe[i].data()[c];
            probe[i].data_mut()[c] = orig + fd_step;
            let plus = eval_scalar(&f, &probe)?;
            probe[i].data_mut()[c] = orig - fd_step;
            let minus = eval_scalar(&f, &probe)?;
            probe[i].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * fd_step);
            let a = analytic.data()[c];
            let err = relative_error(a, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error {
                report = GradCheckReport { max_rel_error: err, input: i, coord: c, analytic: a, numeric, ..report };
            }
        }
    }
    Ok(report)
}

/// Max relative error between the analytic gradient of scalar `f` at `x`
/// and its central-difference estimate.
pub fn grad_check<Fun>(f: Fun, x: &Tensor<f64>, fd_step: f64) -> Result<f64>
where
    Fun: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    grad_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), fd_step, None).map(|r| r.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Mask;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    const STEP: f64 = 1e-5;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn sum_of_squares() {
        let x = Tensor::<f64>::randn([5], &mut rng());
        let err = grad_check(
            |g, x| {
                let y = g.mul(x, x)?;
                Ok(g.sum(y))
            },
            &x,
            STEP,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn rejects_bad_step_and_non_scalar() {
        let x = Tensor::<f64>::zeros([3]);
        assert!(grad_check(|g, x| Ok(g.sum(x)), &x, 1e-2).is_err());
        assert!(grad_check(|_, x| Ok(x), &x, 1e-5).is_err());
    }

    #[test]
    fn attention_gradients() {
        let mut r = rng();
        let xs: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::randn([1, 3, 4], &mut r)).collect();
        let w = Tensor::<f64>::randn([1, 3, 4], &mut r);
        for mask in [None, Some(Arc::new(Mask::block_causal(3, 1)))] {
            let rep = grad_check_many(
                |g, v| {
                    let o = g.attention(v[0], v[1], v[2], mask.as_ref())?;
                    let wv = g.leaf(w.clone());
                    let p = g.mul(o, wv)?;
                    Ok(g.sum(p))
                },
                &xs,
                STEP,
                None,
            )
            .unwrap();
            assert!(rep.max_rel_error < 1e-5, "{rep:?}");
        }
    }

    #[test]
    fn elementwise_and_structural_ops() {
        let mut r = rng();
        let a = Tensor::<f64>::randn([2, 3, 4], &mut r);
        let b = Tensor::<f64>::randn([2, 1, 4], &mut r);
        let w = Tensor::<f64>::randn([4, 5], &mut r);
        let probe = Tensor::<f64>::randn([3, 2, 5], &mut r);
        let rep = grad_check_many(
            |g, v| {
                let x = g.mul(v[0], v[1])?;
                let x = g.sub(x, v[1])?;
                let x = g.layer_norm(x, 1e-5)?;
                let x = g.matmul(x, v[2])?;
                let x = g.gelu(x);
                let y = g.silu(x);
                let x = g.add(x, y)?;
                let x = g.softmax(x);
                let x = g.permute(x, &[1, 0, 2])?;
                let m = g.mean_axis(x, 1)?;
                let x = g.add(x, m)?;
                let c = g.concat(&[x, x], 1)?;
                let x = g.narrow(c, 1, 1, 2)?;
                let x = g.scale(x, 1.7);
                let pr = g.leaf(probe.clone());
                let x = g.mul(x, pr)?;
                let x = g.reshape(x, [30])?;
                Ok(g.mean(x))
            },
            &[a, b, w],
            STEP,
            None,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }
}
