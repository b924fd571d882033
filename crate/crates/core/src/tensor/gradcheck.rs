//! Finite-difference verification of analytic gradients.

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Relative disagreement between two gradient vectors:
/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, 1e-12)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

/// Checks the tape's analytic gradient of `f` at `point` against
/// central finite differences with the given `step`.
///
/// `f` builds a scalar-valued graph from the leaf it is handed; it is
/// invoked once for the analytic gradient and twice per coordinate for
/// the differences. Returns the maximum relative error over all
/// coordinates.
pub fn finite_diff_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::contract("finite_diff_check: step must be positive"));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(&t.clone().set_requires_grad(false));
        let y = f(&mut tape, x)?;
        if !tape.value(y).is_scalar() {
            return Err(Error::contract("finite_diff_check: fn must produce a scalar"));
        }
        let v = tape.value(y).item();
        if !v.is_finite() {
            return Err(Error::numeric(format!("finite_diff_check: fn evaluated to {v}")));
        }
        Ok(v)
    };

    // Analytic gradient.
    let analytic = {
        let mut tape = Tape::new();
        let x = tape.leaf(&point.clone().set_requires_grad(true));
        let y = f(&mut tape, x)?;
        if !tape.value(y).is_scalar() {
            return Err(Error::contract("finite_diff_check: fn must produce a scalar"));
        }
        tape.backward(y)?;
        tape.grad_of(x)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; point.len()])
    };
    if let Some(bad) = analytic.iter().find(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("finite_diff_check: analytic gradient {bad}")));
    }

    let mut numeric = vec![0.0; point.len()];
    let mut probe = point.clone().set_requires_grad(false);
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric[i] = (up - down) / (2.0 * step);
    }
    Ok(max_rel_err(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tape::Padding;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_function_checks_at_rounding_level() {
        let point = Tensor::from_vec(&[4], vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        for step in [1e-3, 1e-5, 1e-7] {
            let err = finite_diff_check(|t, x| Ok(t.sum_all(x)), &point, step).unwrap();
            assert!(err < 1e-8, "step {step}: err {err}");
        }
    }

    #[test]
    fn random_two_layer_mlp_checks_below_1e6() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w1 = Tensor::from_vec(&[5, 8], (0..40).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap();
        let w2 = Tensor::from_vec(&[8, 3], (0..24).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap();
        let point = Tensor::from_vec(&[2, 5], (0..10).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap();
        let err = finite_diff_check(
            |t, x| {
                let w1v = t.constant(w1.clone());
                let w2v = t.constant(w2.clone());
                let a = t.dense(x, w1v, None)?;
                let r = t.relu(a);
                let b = t.dense(r, w2v, None)?;
                let sq = t.mul(b, b)?;
                Ok(t.sum_all(sq))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn conv_relu_sum_composite_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let kernel = Tensor::from_vec(&[3, 2, 3, 3], (0..54).map(|_| rng.random::<f64>() - 0.5).collect())
            .unwrap();
        let point = Tensor::from_vec(&[2, 2, 5, 5], (0..100).map(|_| rng.random::<f64>() - 0.5).collect())
            .unwrap();
        // Gradient w.r.t. the input.
        let err = finite_diff_check(
            |t, x| {
                let k = t.constant(kernel.clone());
                let c = t.conv2d(x, k, 1, Padding::Same)?;
                let r = t.relu(c);
                Ok(t.sum_all(r))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "input grad err {err}");

        // Gradient w.r.t. the kernel.
        let image = point.clone();
        let err = finite_diff_check(
            |t, k| {
                let x = t.constant(image.clone());
                let c = t.conv2d(x, k, 2, Padding::Same)?;
                let r = t.relu(c);
                Ok(t.sum_all(r))
            },
            &kernel,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "kernel grad err {err}");
    }

    #[test]
    fn corrupted_gradient_rule_is_detected() {
        // A wrong analytic gradient (scale 2x via double backward) must
        // blow past the tolerance, proving the detector works.
        let point = Tensor::from_vec(&[3], vec![0.4, -0.6, 1.1]).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(&point.clone().set_requires_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap(); // corrupt: doubles the gradient
        let analytic = tape.grad_of(x).unwrap().to_vec();

        let numeric: Vec<f64> = point.data().iter().map(|v| 2.0 * v).collect();
        assert!(max_rel_err(&analytic, &numeric) > 0.4);
    }

    #[test]
    fn batch_norm_train_mode_checks() {
        use crate::tensor::tape::{BnMode, BnScope};
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let point = Tensor::from_vec(&[4, 2, 2, 2], (0..32).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .unwrap();
        let gamma = Tensor::from_vec(&[2], vec![1.2, 0.7]).unwrap();
        let beta = Tensor::from_vec(&[2], vec![0.1, -0.3]).unwrap();
        // Step 1e-4: BN gradients have near-zero components along the
        // per-channel mean direction, where a smaller step leaves the
        // difference quotient dominated by roundoff.
        for bounds in [vec![0..4], vec![0..2, 2..4]] {
            for scope in [BnScope::Global, BnScope::PerShard] {
                let err = finite_diff_check(
                    |t, x| {
                        let g = t.constant(gamma.clone());
                        let b = t.constant(beta.clone());
                        let y = t.batch_norm(x, g, b, 1e-5, BnMode::Train { bounds: &bounds, scope })?;
                        let sq = t.mul(y, y)?;
                        Ok(t.sum_all(sq))
                    },
                    &point,
                    1e-4,
                )
                .unwrap();
                assert!(err < 1e-5, "bounds {bounds:?} scope {scope:?}: err {err}");
            }
        }
    }

    #[test]
    fn softmax_cross_entropy_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let point = Tensor::from_vec(&[3, 4], (0..12).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .unwrap();
        let err = finite_diff_check(
            |t, x| t.softmax_cross_entropy(x, &[0, 3, 1]),
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "err {err}");
    }

    #[test]
    fn l2_normalize_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let point = Tensor::from_vec(&[3, 5], (0..15).map(|_| rng.random::<f64>() + 0.5).collect()).unwrap();
        let weights = Tensor::from_vec(&[3, 5], (0..15).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap();
        let err = finite_diff_check(
            |t, x| {
                let y = t.l2_normalize_rows(x)?;
                let w = t.constant(weights.clone());
                let p = t.mul(y, w)?;
                Ok(t.sum_all(p))
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }
}
