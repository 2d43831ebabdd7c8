//! Finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compare the tape's analytic gradient of a scalar-valued function against
/// central differences at `point`, returning the worst relative error over
/// all elements: |a - n| / max(|a|, |n|, 1e-8).
///
/// `f` must be deterministic; any internal randomness has to be fixed before
/// the call. `eps` must lie in [1e-6, 1e-3].
pub fn gradcheck<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::OutOfRange(format!("gradcheck eps {eps} not in [1e-6, 1e-3]")));
    }

    let analytic = {
        let mut tape = Tape::new();
        let x = tape.leaf(point);
        let loss = f(&mut tape, x)?;
        if tape.value(loss).numel() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "gradcheck wants a scalar-valued f, got shape {:?}",
                tape.value(loss).shape()
            )));
        }
        tape.backward(loss)?;
        tape.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()))
    };
    if !analytic.is_finite() {
        return Err(Error::NonFiniteGradient("analytic gradient".into()));
    }

    let eval = |p: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(p);
        let loss = f(&mut tape, x)?;
        Ok(tape.value(loss).item())
    };

    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.as_mut_slice()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.as_mut_slice()[i] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        if !numeric.is_finite() {
            return Err(Error::NonFiniteGradient(format!("numeric gradient at element {i}")));
        }
        let a = analytic.as_slice()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Worst finite-difference error seen for one op across its probe points.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
}

/// Run gradcheck over every differentiable tape op, `points_per_op` random
/// points each. Each op is composed with a fixed random weighting before the
/// final reduction so that non-uniform gradient paths are exercised.
pub fn check_registered_ops(
    points_per_op: usize,
    eps: f64,
    rng: &mut crate::rng::Rng,
) -> Result<Vec<OpCheck>> {
    use crate::rng::randn_tensor;

    let mut results: Vec<OpCheck> = Vec::new();
    let mut run = |name: &'static str,
                   rng: &mut crate::rng::Rng,
                   point_shape: &[usize],
                   build: &mut dyn FnMut(
        &mut crate::rng::Rng,
    )
        -> Box<dyn Fn(&mut Tape, Var) -> Result<Var>>|
     -> Result<()> {
        let mut worst = 0.0f64;
        for _ in 0..points_per_op {
            let point = randn_tensor(point_shape, 1.0, rng);
            let f = build(rng);
            worst = worst.max(gradcheck(f, &point, eps)?);
        }
        results.push(OpCheck { name, max_rel_err: worst });
        Ok(())
    };

    // Weighted reduction: sum(y ⊙ w) pins every element of y with its own
    // gradient scale.
    fn weigh(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
        let wv = tape.leaf(w);
        let prod = tape.mul(y, wv)?;
        Ok(tape.sum(prod))
    }

    run("matmul_lhs", rng, &[3, 4], &mut |r| {
        let b = randn_tensor(&[4, 2], 1.0, r);
        let w = randn_tensor(&[3, 2], 1.0, r);
        Box::new(move |tape, x| {
            let vb = tape.leaf(&b);
            let y = tape.matmul(x, vb)?;
            weigh(tape, y, &w)
        })
    })?;
    run("matmul_rhs", rng, &[4, 2], &mut |r| {
        let a = randn_tensor(&[3, 4], 1.0, r);
        let w = randn_tensor(&[3, 2], 1.0, r);
        Box::new(move |tape, x| {
            let va = tape.leaf(&a);
            let y = tape.matmul(va, x)?;
            weigh(tape, y, &w)
        })
    })?;
    run("transpose", rng, &[3, 4], &mut |r| {
        let w = randn_tensor(&[4, 3], 1.0, r);
        Box::new(move |tape, x| {
            let y = tape.transpose(x)?;
            weigh(tape, y, &w)
        })
    })?;
    run("add", rng, &[3, 4], &mut |r| {
        let b = randn_tensor(&[3, 4], 1.0, r);
        let w = randn_tensor(&[3, 4], 1.0, r);
        Box::new(move |tape, x| {
            let vb = tape.leaf(&b);
            let y = tape.add(x, vb)?;
            weigh(tape, y, &w)
        })
    })?;
    run("sub_lhs", rng, &[3, 4], &mut |r| {
        let b = randn_tensor(&[3, 4], 1.0, r);
        let w = randn_tensor(&[3, 4], 1.0, r);
        Box::new(move |tape, x| {
            let vb = tape.leaf(&b);
            let y = tape.sub(x, vb)?;
            weigh(tape, y, &w)
        })
    })?;
    run("sub_rhs", rng, &[3, 4], &mut |r| {
        let a = randn_tensor(&[3, 4], 1.0, r);
        let w = randn_tensor(&[3, 4], 1.0, r);
        Box::new(move |tape, x| {
            let va = tape.leaf(&a);
            let y = tape.sub(va, x)?;
            weigh(tape, y, &w)
        })
    })?;
    run("mul", rng, &[3, 4], &mut |r| {
        let b = randn_tensor(&[3, 4], 1.0, r);
        let w = randn_tensor(&[3, 4], 1.0, r);
        Box::new(move |tape, x| {
            let vb = tape.leaf(&b);
            let y = tape.mul(x, vb)?;
            weigh(tape, y, &w)
        })
    })?;
    run("add_bias_input", rng, &[3, 4], &mut |r| {
        let b = randn_tensor(&[1, 4], 1.0, r);
        let w = randn_tensor(&[3, 4], 1.0, r);
        Box::new(move |tape, x| {
            let vb = tape.leaf(&b);
            let y = tape.add_bias(x, vb)?;
            weigh(tape, y, &w)
        })
    })?;
    run("add_bias_bias", rng, &[1, 4], &mut |r| {
        let a = randn_tensor(&[3, 4], 1.0, r);
        let w = randn_tensor(&[3, 4], 1.0, r);
        Box::new(move |tape, x| {
            let va = tape.leaf(&a);
            let y = tape.add_bias(va, x)?;
            weigh(tape, y, &w)
        })
    })?;
    run("affine", rng, &[3, 4], &mut |r| {
        let w = randn_tensor(&[3, 4], 1.0, r);
        Box::new(move |tape, x| {
            let y = tape.affine(x, 1.7, -0.3);
            weigh(tape, y, &w)
        })
    })?;
    run("exp", rng, &[3, 4], &mut |r| {
        let w = randn_tensor(&[3, 4], 1.0, r);
        Box::new(move |tape, x| {
            let y = tape.exp(x);
            weigh(tape, y, &w)
        })
    })?;
    run("softmax_rows", rng, &[3, 5], &mut |r| {
        let w = randn_tensor(&[3, 5], 1.0, r);
        Box::new(move |tape, x| {
            let y = tape.softmax_rows(x)?;
            weigh(tape, y, &w)
        })
    })?;
    run("layer_norm_input", rng, &[3, 6], &mut |r| {
        let g = randn_tensor(&[1, 6], 1.0, r);
        let b = randn_tensor(&[1, 6], 1.0, r);
        let w = randn_tensor(&[3, 6], 1.0, r);
        Box::new(move |tape, x| {
            let vg = tape.leaf(&g);
            let vb = tape.leaf(&b);
            let y = tape.layer_norm(x, vg, vb)?;
            weigh(tape, y, &w)
        })
    })?;
    run("layer_norm_gain", rng, &[1, 6], &mut |r| {
        let a = randn_tensor(&[3, 6], 1.0, r);
        let b = randn_tensor(&[1, 6], 1.0, r);
        let w = randn_tensor(&[3, 6], 1.0, r);
        Box::new(move |tape, x| {
            let va = tape.leaf(&a);
            let vb = tape.leaf(&b);
            let y = tape.layer_norm(va, x, vb)?;
            weigh(tape, y, &w)
        })
    })?;
    run("layer_norm_bias", rng, &[1, 6], &mut |r| {
        let a = randn_tensor(&[3, 6], 1.0, r);
        let g = randn_tensor(&[1, 6], 1.0, r);
        let w = randn_tensor(&[3, 6], 1.0, r);
        Box::new(move |tape, x| {
            let va = tape.leaf(&a);
            let vg = tape.leaf(&g);
            let y = tape.layer_norm(va, vg, x)?;
            weigh(tape, y, &w)
        })
    })?;
    run("gelu", rng, &[3, 4], &mut |r| {
        let w = randn_tensor(&[3, 4], 1.0, r);
        Box::new(move |tape, x| {
            let y = tape.gelu(x);
            weigh(tape, y, &w)
        })
    })?;
    run("leaky_relu", rng, &[3, 4], &mut |r| {
        let w = randn_tensor(&[3, 4], 1.0, r);
        Box::new(move |tape, x| {
            let y = tape.leaky_relu(x, 0.2);
            weigh(tape, y, &w)
        })
    })?;
    run("slice_rows", rng, &[4, 3], &mut |r| {
        let w = randn_tensor(&[2, 3], 1.0, r);
        Box::new(move |tape, x| {
            let y = tape.slice_rows(x, 1, 2)?;
            weigh(tape, y, &w)
        })
    })?;
    run("slice_cols", rng, &[3, 5], &mut |r| {
        let w = randn_tensor(&[3, 2], 1.0, r);
        Box::new(move |tape, x| {
            let y = tape.slice_cols(x, 2, 2)?;
            weigh(tape, y, &w)
        })
    })?;
    run("concat_cols", rng, &[3, 2], &mut |r| {
        let b = randn_tensor(&[3, 3], 1.0, r);
        let w = randn_tensor(&[3, 5], 1.0, r);
        Box::new(move |tape, x| {
            let vb = tape.leaf(&b);
            let y = tape.concat_cols(&[x, vb])?;
            weigh(tape, y, &w)
        })
    })?;
    run("concat_rows", rng, &[2, 3], &mut |r| {
        let b = randn_tensor(&[3, 3], 1.0, r);
        let w = randn_tensor(&[5, 3], 1.0, r);
        Box::new(move |tape, x| {
            let vb = tape.leaf(&b);
            let y = tape.concat_rows(&[x, vb])?;
            weigh(tape, y, &w)
        })
    })?;
    run("reshape", rng, &[3, 4], &mut |r| {
        let w = randn_tensor(&[2, 6], 1.0, r);
        Box::new(move |tape, x| {
            let y = tape.reshape(x, &[2, 6])?;
            weigh(tape, y, &w)
        })
    })?;
    run("sum", rng, &[3, 4], &mut |_| {
        Box::new(move |tape, x| {
            let s = tape.sum(x);
            Ok(tape.affine(s, 1.3, 0.2))
        })
    })?;
    run("mean_all", rng, &[3, 4], &mut |_| {
        Box::new(move |tape, x| {
            let s = tape.mean_all(x);
            Ok(tape.affine(s, 3.0, 0.0))
        })
    })?;
    run("mse_loss_pred", rng, &[3, 4], &mut |r| {
        let t = randn_tensor(&[3, 4], 1.0, r);
        Box::new(move |tape, x| {
            let vt = tape.leaf(&t);
            tape.mse_loss(x, vt)
        })
    })?;
    run("mse_loss_target", rng, &[3, 4], &mut |r| {
        let p = randn_tensor(&[3, 4], 1.0, r);
        Box::new(move |tape, x| {
            let vp = tape.leaf(&p);
            tape.mse_loss(vp, x)
        })
    })?;
    run("cross_entropy", rng, &[3, 5], &mut |r| {
        let labels: Vec<usize> = (0..3).map(|_| crate::rng::below(r, 5)).collect();
        Box::new(move |tape, x| tape.cross_entropy(x, &labels))
    })?;

    Ok(results)
}
