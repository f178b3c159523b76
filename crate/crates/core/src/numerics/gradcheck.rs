use crate::error::{Error, Result};

/// `|a - n| / (|a| + |n| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Central differences `(f(w + h e_i) - f(w - h e_i)) / 2h` for every coordinate.
pub fn central_difference<F>(mut f: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut w = params.to_vec();
    let mut out = Vec::with_capacity(w.len());
    for i in 0..w.len() {
        let orig = w[i];
        w[i] = orig + h;
        let up = f(&w);
        w[i] = orig - h;
        let down = f(&w);
        w[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::numeric(format!(
                "objective not finite around coordinate {i}: f(+h)={up}, f(-h)={down}"
            )));
        }
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Largest [`relative_error`] between `analytic` and central differences of `f`.
pub fn finite_difference_check<F>(f: F, params: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != params.len() {
        return Err(Error::dim("finite_difference_check", &[params.len()], &[analytic.len()]));
    }
    let numeric = central_difference(f, params, h)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{DenseTensor, GradTape, SelectMode, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_at_three() {
        let err = finite_difference_check(|w| w[0] * w[0], &[3.0], &[6.0], 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function() {
        let err = finite_difference_check(|_| 4.2, &[1.0, -2.0], &[0.0, 0.0], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let r = finite_difference_check(|w| 1.0 / (w[0] - 1e-6).max(0.0), &[0.0], &[0.0], 1e-5);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(finite_difference_check(|w| w[0], &[0.0], &[1.0], 0.0).is_err());
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> DenseTensor {
        let n = shape.iter().product();
        DenseTensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Builds `sum(build(inputs) ∘ probe)` on a fresh tape and returns
    /// the loss plus the gradients of every input.
    fn eval<F>(inputs: &[DenseTensor], probe: &DenseTensor, build: &F) -> (f64, Vec<DenseTensor>)
    where
        F: Fn(&mut GradTape, &[Var]) -> Var,
    {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        let p = tape.constant(probe.clone());
        let weighted = tape.mul(out, p).unwrap();
        let loss = tape.sum(weighted);
        let grads = tape.backward(loss).unwrap();
        let g = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.get_or_zeros(v, t))
            .collect();
        (tape.value(loss).data()[0], g)
    }

    fn check_primitive<F>(shapes: &[&[usize]], seed: u64, build: F)
    where
        F: Fn(&mut GradTape, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<DenseTensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
        let out_shape = {
            let mut tape = GradTape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
            let out = build(&mut tape, &vars);
            tape.value(out).shape().to_vec()
        };
        let probe = random(&mut rng, &out_shape);
        let (_, grads) = eval(&inputs, &probe, &build);
        let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
        let analytic: Vec<f64> = grads.iter().flat_map(|t| t.data().to_vec()).collect();
        let unflatten = |w: &[f64]| {
            let mut off = 0;
            inputs
                .iter()
                .map(|t| {
                    let v = DenseTensor::new(t.shape().to_vec(), w[off..off + t.len()].to_vec()).unwrap();
                    off += t.len();
                    v
                })
                .collect::<Vec<_>>()
        };
        let err = finite_difference_check(|w| eval(&unflatten(w), &probe, &build).0, &flat, &analytic, 1e-5)
            .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn matmul_backward_matches_fd() {
        check_primitive(&[&[3, 4], &[4, 2]], 1, |t, v| t.matmul(v[0], v[1]).unwrap());
        check_primitive(&[&[3, 4], &[5, 4]], 2, |t, v| t.matmul_bt(v[0], v[1]).unwrap());
    }

    #[test]
    fn elementwise_backward_matches_fd() {
        check_primitive(&[&[2, 3], &[2, 3]], 3, |t, v| t.add(v[0], v[1]).unwrap());
        check_primitive(&[&[2, 3], &[2, 3]], 4, |t, v| t.mul(v[0], v[1]).unwrap());
        check_primitive(&[&[2, 3], &[3]], 5, |t, v| t.add_row(v[0], v[1]).unwrap());
        check_primitive(&[&[2, 3]], 6, |t, v| t.scale(v[0], -1.7));
        check_primitive(&[&[3, 3]], 7, |t, v| t.gelu(v[0]));
    }

    #[test]
    fn layer_norm_backward_matches_fd() {
        check_primitive(&[&[3, 5], &[5], &[5]], 8, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap());
    }

    #[test]
    fn softmax_and_cross_entropy_backward_match_fd() {
        check_primitive(&[&[3, 4]], 9, |t, v| t.softmax_rows(v[0]).unwrap());
        check_primitive(&[&[3, 4]], 10, |t, v| t.cross_entropy(v[0], &[0, 3, 1]).unwrap());
    }

    #[test]
    fn structural_ops_backward_match_fd() {
        check_primitive(&[&[6, 3]], 11, |t, v| t.mean_groups(v[0], 3).unwrap());
        check_primitive(&[&[3, 3], &[6, 2]], 12, |t, v| t.mix_tokens(v[0], v[1], 3).unwrap());
        check_primitive(&[&[4, 2]], 13, |t, v| t.gather_rows(v[0], &[3, 0, 3]).unwrap());
        check_primitive(&[&[3, 2]], 14, |t, v| t.scatter_add_rows(v[0], &[1, 1, 4], 5).unwrap());
        check_primitive(&[&[3, 2], &[4, 3]], 15, |t, v| {
            t.scale_rows_by_entry(v[0], v[1], &[2, 0, 2], 1).unwrap()
        });
    }

    #[test]
    fn select_backward_matches_fd() {
        let mask = [true, false, true, false, true, true];
        for (seed, mode) in [(16, SelectMode::Renormalize), (17, SelectMode::Softmax)] {
            check_primitive(&[&[2, 3]], seed, |t, v| {
                // keep the selected mass positive for renormalization
                let shifted = t.gelu(v[0]);
                let c = t.constant(DenseTensor::filled(&[2, 3], 2.0));
                let pos = t.add(shifted, c).unwrap();
                t.select(pos, &mask, mode).unwrap()
            });
        }
    }

    #[test]
    fn backward_visits_in_reverse_recording_order() {
        let mut tape = GradTape::new();
        let a = tape.leaf(DenseTensor::from_rows(&[&[1.0, 2.0]]).unwrap(), true);
        let b = tape.leaf(DenseTensor::from_rows(&[&[0.5], &[-1.0]]).unwrap(), true);
        let c = tape.matmul(a, b).unwrap();
        let d = tape.gelu(c);
        let e = tape.add(d, c).unwrap();
        let loss = tape.sum(e);
        let grads = tape.backward(loss).unwrap();
        let order = grads.visit_order();
        assert_eq!(order.first(), Some(&loss.index()));
        assert!(order.windows(2).all(|w| w[0] > w[1]), "{order:?}");
        assert_eq!(order.len(), tape.len());
    }
}
