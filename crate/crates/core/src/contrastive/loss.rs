use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Row-wise dot products of a `[B, E]` variable with fixed `[B, E]` rows, as `[B, 1]`.
fn row_dots<T: Scalar>(tape: &mut Tape<T>, x: Var, rows: &Tensor<T>) -> Result<Var> {
    let e = tape.shape(x)[1];
    let k = tape.constant(rows.clone());
    let prod = tape.mul(x, k)?;
    let ones = tape.constant(Tensor::full(&[e, 1], T::one()));
    tape.matmul(prod, ones)
}

/// Similarities of each row of `x` (`[B, E]`) with its own negatives; `negatives[b]` is
/// `K x E` row-major. Returns `[B, K]`.
fn negative_logits<T: Scalar>(tape: &mut Tape<T>, x: Var, negatives: &[Vec<T>], k: usize) -> Result<Var> {
    let (b, e) = (tape.shape(x)[0], tape.shape(x)[1]);
    let cols = b * k;
    // transposed block of all negatives, [E, B*K]
    let mut t = vec![T::zero(); e * cols];
    for (bi, negs) in negatives.iter().enumerate() {
        for ki in 0..k {
            for d in 0..e {
                t[d * cols + bi * k + ki] = negs[ki * e + d];
            }
        }
    }
    let nt = tape.constant(Tensor::new(vec![e, cols], t)?);
    let all = tape.matmul(x, nt)?;
    let idx: Vec<usize> = (0..b).flat_map(|bi| (0..k).map(move |ki| bi * cols + bi * k + ki)).collect();
    let g = tape.gather(all, &idx)?;
    tape.reshape(g, &[b, k])
}

fn check_inputs<T: Scalar>(tape: &Tape<T>, x: Var, k_plus: &Tensor<T>, negatives: &[Vec<T>], k: usize, op: &'static str) -> Result<()> {
    let shape = tape.shape(x);
    if shape.len() != 2 {
        return Err(Error::invalid(op, format!("embeddings must be [B, E], got {shape:?}")));
    }
    let (b, e) = (shape[0], shape[1]);
    if k_plus.shape() != [b, e] {
        let axis = if k_plus.shape().first() != Some(&b) { 0 } else { 1 };
        return Err(Error::Shape {
            op,
            axis,
            expected: shape[axis],
            actual: k_plus.shape().get(axis).copied().unwrap_or(0),
        });
    }
    if negatives.len() != b {
        return Err(Error::Shape {
            op,
            axis: 0,
            expected: b,
            actual: negatives.len(),
        });
    }
    if let Some(bad) = negatives.iter().find(|n| n.len() != k * e) {
        return Err(Error::invalid(op, format!("expected {k} negatives of dim {e}, got {} values", bad.len())));
    }
    Ok(())
}

/// Batch mean of `-ln[exp(q.k+/t) / (exp(q.k+/t) + sum exp(q.k-/t))]`. Keys are constants.
pub fn local_loss<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k_plus: &Tensor<T>,
    negatives: &[Vec<T>],
    k: usize,
    tau: f64,
) -> Result<Var> {
    check_inputs(tape, q, k_plus, negatives, k, "local_loss")?;
    let pos = row_dots(tape, q, k_plus)?;
    let logits = if k > 0 {
        let neg = negative_logits(tape, q, negatives, k)?;
        tape.concat(&[pos, neg], 1)?
    } else {
        pos
    };
    let logits = tape.scale(logits, T::lit(1.0 / tau))?;
    let lse = tape.log_sum_exp(logits)?;
    let b = tape.shape(pos)[0];
    let pos = tape.reshape(pos, &[b])?;
    let pos = tape.scale(pos, T::lit(1.0 / tau))?;
    let per = tape.sub(lse, pos)?;
    tape.mean(per)
}

/// Batch mean of the neighbourhood loss: positives are the `l` neighbour embeddings
/// against `k+`, negatives pair every neighbour with the shared negative set.
pub fn neighbor_loss<T: Scalar>(
    tape: &mut Tape<T>,
    neighbors: &[Var],
    k_plus: &Tensor<T>,
    negatives: &[Vec<T>],
    k: usize,
    tau: f64,
) -> Result<Var> {
    if neighbors.is_empty() {
        return Err(Error::invalid("neighbor_loss", "needs at least one neighbour embedding"));
    }
    let mut pos = Vec::with_capacity(neighbors.len());
    let mut neg = Vec::with_capacity(neighbors.len());
    for &r in neighbors {
        check_inputs(tape, r, k_plus, negatives, k, "neighbor_loss")?;
        pos.push(row_dots(tape, r, k_plus)?);
        if k > 0 {
            neg.push(negative_logits(tape, r, negatives, k)?);
        }
    }
    let inv = T::lit(1.0 / tau);
    let pos_all = if pos.len() == 1 { pos[0] } else { tape.concat(&pos, 1)? };
    let pos_all = tape.scale(pos_all, inv)?;
    let lse_pos = tape.log_sum_exp(pos_all)?;
    let mut all = vec![pos_all];
    for n in neg {
        all.push(tape.scale(n, inv)?);
    }
    let all = if all.len() == 1 { all[0] } else { tape.concat(&all, 1)? };
    let lse_all = tape.log_sum_exp(all)?;
    let per = tape.sub(lse_all, lse_pos)?;
    tape.mean(per)
}

pub fn combined_loss(local: f64, neighbor: f64) -> f64 {
    local + neighbor
}

fn single_row(v: &[f64]) -> Result<Tensor<f64>> {
    Tensor::new(vec![1, v.len()], v.to_vec())
}

fn flat(negatives: &[Vec<f64>], e: usize) -> Result<Vec<f64>> {
    if let Some(n) = negatives.iter().find(|n| n.len() != e) {
        return Err(Error::Shape {
            op: "contrastive_loss",
            axis: 1,
            expected: e,
            actual: n.len(),
        });
    }
    Ok(negatives.concat())
}

/// Loss of a single query with explicit vectors.
pub fn local_loss_value(q: &[f64], k_plus: &[f64], negatives: &[Vec<f64>], tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let qv = tape.constant(single_row(q)?);
    let negs = vec![flat(negatives, q.len())?];
    let l = local_loss(&mut tape, qv, &single_row(k_plus)?, &negs, negatives.len(), tau)?;
    Ok(tape.value(l).item())
}

pub fn neighbor_loss_value(neighbors: &[Vec<f64>], k_plus: &[f64], negatives: &[Vec<f64>], tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let rs = neighbors
        .iter()
        .map(|r| Ok(tape.constant(single_row(r)?)))
        .collect::<Result<Vec<_>>>()?;
    let negs = vec![flat(negatives, k_plus.len())?];
    let l = neighbor_loss(&mut tape, &rs, &single_row(k_plus)?, &negs, negatives.len(), tau)?;
    Ok(tape.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_negatives_means_zero_loss() {
        assert_eq!(local_loss_value(&[1.0, 0.0], &[0.0, 1.0], &[], 0.2).unwrap(), 0.0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        assert!(local_loss_value(&[1.0, 0.0], &[1.0, 0.0, 0.0], &[], 0.2).is_err());
        assert!(local_loss_value(&[1.0, 0.0], &[1.0, 0.0], &[vec![1.0]], 0.2).is_err());
        assert!(neighbor_loss_value(&[], &[1.0], &[], 0.2).is_err());
    }
}
