use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients below this magnitude are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input position, flat element index) of the worst entry.
    pub worst_index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    /// Entries whose perturbed evaluation was not finite.
    pub non_finite: Vec<(usize, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.non_finite.is_empty() && self.max_rel_err < tol
    }
}

fn eval(f: &impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let root = f(&mut tape, &vars)?;
    let v = tape.value(root);
    if v.len() != 1 {
        return Err(Error::NonScalarRoot(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares autodiff gradients of a scalar function against central
/// differences `(f(x+eps) - f(x-eps)) / (2 eps)` for every input entry.
/// Relative error uses the denominator `max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn grad_check(
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<f64>],
    eps: f64,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        non_finite: Vec::new(),
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (pos, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[pos].shape());
        let analytic = grads.get(*var).unwrap_or(&zeros).clone();
        for i in 0..inputs[pos].len() {
            let orig = inputs[pos].data()[i];
            work[pos].data_mut()[i] = orig + eps;
            let plus = eval(&f, &work);
            work[pos].data_mut()[i] = orig - eps;
            let minus = eval(&f, &work);
            work[pos].data_mut()[i] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
                (Err(Error::NonFinite(_)), _) | (_, Err(Error::NonFinite(_))) | (Ok(_), Ok(_)) => {
                    report.non_finite.push((pos, i));
                    continue;
                }
                (Err(e), _) | (_, Err(e)) => return Err(e),
            };
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            report.checked += 1;
            if report.checked == 1 || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_index = (pos, i);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}


fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero so kinked ops are differentiable at every entry.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Scalar projection `sum(w * y)` with fixed random weights.
fn project(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone().reshape(tape.shape(y))?);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// Finite-difference check of every primitive op on random inputs drawn from `seed`.
pub fn op_suite(seed: u64, eps: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    macro_rules! check {
        ($name:literal, $inputs:expr, $out_len:expr, |$t:ident, $v:ident| $body:expr) => {{
            let inputs: Vec<Tensor<f64>> = $inputs;
            let w = random_tensor(&mut rng, &[$out_len]);
            let report = grad_check(
                |$t: &mut Tape<f64>, $v: &[Var]| {
                    let y = $body?;
                    project($t, y, &w)
                },
                &inputs,
                eps,
            )?;
            out.push(($name, report));
        }};
    }

    let a = random_tensor(&mut rng, &[3, 4]);
    let b = random_tensor(&mut rng, &[3, 4]);
    check!("add", vec![a.clone(), b.clone()], 12, |t, v| t.add(v[0], v[1]));
    check!("sub", vec![a.clone(), b.clone()], 12, |t, v| t.sub(v[0], v[1]));
    check!("mul", vec![a.clone(), b.clone()], 12, |t, v| t.mul(v[0], v[1]));
    let bias = random_tensor(&mut rng, &[4]);
    check!("add_bias", vec![a.clone(), bias], 12, |t, v| t.add_bias(v[0], v[1]));
    check!("scale", vec![a.clone()], 12, |t, v| t.scale(v[0], -1.7));
    let m = random_tensor(&mut rng, &[4, 5]);
    check!("matmul", vec![a.clone(), m], 15, |t, v| t.matmul(v[0], v[1]));
    check!("sum", vec![a.clone()], 1, |t, v| t.sum(v[0]));
    check!("mean", vec![a.clone()], 1, |t, v| t.mean(v[0]));
    check!("elu", vec![away_from_zero(&mut rng, &[3, 4])], 12, |t, v| t.elu(v[0]));
    check!("relu", vec![away_from_zero(&mut rng, &[3, 4])], 12, |t, v| t.relu(v[0]));
    check!("sigmoid", vec![random_tensor(&mut rng, &[3, 4])], 12, |t, v| t.sigmoid(v[0]));
    check!("reshape", vec![a.clone()], 12, |t, v| t.reshape(v[0], &[2, 6]));
    let c = random_tensor(&mut rng, &[3, 2]);
    check!("concat", vec![a.clone(), c], 18, |t, v| t.concat(&[v[0], v[1]], 1));
    check!("narrow", vec![a.clone()], 8, |t, v| t.narrow(v[0], 0, 1, 2));
    check!("gather", vec![a.clone()], 4, |t, v| t.gather(v[0], &[0, 5, 5, 11]));
    let vol = random_tensor(&mut rng, &[2, 3, 3, 4, 2]);
    check!("global_avg_pool", vec![vol.clone()], 6, |t, v| t.global_avg_pool(v[0]));
    check!("upsample_nearest", vec![random_tensor(&mut rng, &[1, 2, 2, 2, 2])], 128, |t, v| t
        .upsample_nearest(v[0], 2));
    check!("l2_normalize", vec![random_tensor(&mut rng, &[3, 5])], 15, |t, v| t.l2_normalize(v[0]));
    check!("log_sum_exp", vec![random_tensor(&mut rng, &[3, 5])], 3, |t, v| t.log_sum_exp(v[0]));
    let targets: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
    check!("bce_with_logits", vec![random_tensor(&mut rng, &[6])], 1, |t, v| t
        .bce_with_logits(v[0], &targets));
    check!("bce_with_logits_weighted", vec![random_tensor(&mut rng, &[6])], 1, |t, v| t
        .bce_with_logits_weighted(v[0], &targets, 3.0));
    let x = random_tensor(&mut rng, &[2, 2, 6, 6, 6]);
    let k = random_tensor(&mut rng, &[4, 2, 3, 3, 3]);
    let kb = random_tensor(&mut rng, &[4]);
    check!("conv3d", vec![x.clone(), k.clone(), kb.clone()], 2 * 4 * 216, |t, v| t
        .conv3d(v[0], v[1], Some(v[2]), 1, 1));
    check!("conv3d_stride2", vec![x.clone(), k, kb], 2 * 4 * 27, |t, v| t
        .conv3d(v[0], v[1], Some(v[2]), 2, 1));
    let gamma = Tensor::from_fn(&[3], |_| rng.gen_range(0.5..1.5));
    let beta = random_tensor(&mut rng, &[3]);
    check!("batchnorm_train", vec![vol.clone(), gamma.clone(), beta.clone()], 144, |t, v| t
        .batch_norm_train(v[0], v[1], v[2], 1e-5)
        .map(|(y, _)| y));
    let rm = [0.1, -0.2, 0.05];
    let rv = [0.9, 1.3, 0.7];
    check!("batchnorm_eval", vec![vol, gamma, beta], 144, |t, v| t
        .batch_norm_eval(v[0], v[1], v[2], &rm, &rv, 1e-5));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_sum_is_exact() {
        let x = Tensor::new(vec![5], vec![0.3, -1.2, 2.0, 0.0, 7.5]).unwrap();
        let r = grad_check(|t, v| t.sum(v[0]), &[x], 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-10, "{r:?}");
        assert_eq!(r.checked, 5);
    }

    #[test]
    fn corrupted_backward_rule_is_flagged() {
        // y = x^2 elementwise, but the backward rule claims dy/dx = 3x.
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let xv = t.value(v[0]).clone();
                let y = Tensor::from_fn(xv.shape(), |i| xv.data()[i] * xv.data()[i]);
                let sq = t.custom("bad_square", &[v[0]], y, |g, ins, _| {
                    let x = ins[0];
                    vec![Some(Tensor::from_fn(x.shape(), |i| g.data()[i] * 3.0 * x.data()[i]))]
                })?;
                t.sum(sq)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(!r.passed(1e-4));
        assert!((r.max_rel_err - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_evaluations_are_reported() {
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let xv = t.value(v[0]).item();
                let val = Tensor::scalar(if xv == 0.0 { 0.0 } else { f64::INFINITY });
                t.custom("blowup", &[v[0]], val, |_, _, _| vec![Some(Tensor::scalar(0.0))])
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(r.non_finite, vec![(0, 0)]);
        assert!(!r.passed(1e-4));
    }
}

