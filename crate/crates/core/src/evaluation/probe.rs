use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, mean_sd, one_off_accuracy, r_squared, Confusion};
use crate::error::{Error, Result};

/// Ridge strength relative to `trace(X^T X) / p` of the centred training features.
pub const RIDGE_SCALE: f64 = 1e-3;
/// L2 penalty of the logistic probe on standardized features.
pub const LOGISTIC_L2: f64 = 1e-3;
pub const LOGISTIC_MAX_ITERS: usize = 10_000;
pub const LOGISTIC_GRAD_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    Continuous,
    Ordinal,
    Binary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub task: ProbeTask,
    pub seed: u64,
    /// Held-out fold of every sample.
    pub folds: Vec<usize>,
    /// Metric name to one value per fold.
    pub metrics: BTreeMap<String, Vec<f64>>,
    /// Held-out prediction of every sample (class index for categorical tasks).
    pub predictions: Vec<f64>,
}

impl ProbeResult {
    pub fn summary(&self, metric: &str) -> Option<(f64, f64)> {
        self.metrics.get(metric).map(|v| mean_sd(v))
    }
}

/// Fold ids. With `strata`, members of each stratum are dealt round-robin after a shuffle.
pub fn assign_folds(strata: &[usize], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &s) in strata.iter().enumerate() {
        by.entry(s).or_default().push(i);
    }
    let mut folds = vec![0; strata.len()];
    let mut next = 0;
    for members in by.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            folds[i] = next % k;
            next += 1;
        }
    }
    folds
}

/// Strata for a continuous target: consecutive rank blocks of size `k`.
fn rank_strata(y: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..y.len()).collect();
    idx.sort_by(|&a, &b| y[a].total_cmp(&y[b]).then(a.cmp(&b)));
    let mut s = vec![0; y.len()];
    for (r, &i) in idx.iter().enumerate() {
        s[i] = r / k;
    }
    s
}

fn rows_matrix(x: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| x[rows[r]][cols[c]])
}

/// Columns whose training values are not all equal.
fn informative_columns(x: &[Vec<f64>], rows: &[usize]) -> Vec<usize> {
    let p = x[0].len();
    let keep: Vec<usize> = (0..p)
        .filter(|&c| {
            let first = x[rows[0]][c];
            rows.iter().any(|&r| (x[r][c] - first).abs() > 1e-12 * first.abs().max(1.0))
        })
        .collect();
    if keep.len() < p {
        warn!("dropping {} constant feature columns", p - keep.len());
    }
    keep
}

pub struct Ridge {
    cols: Vec<usize>,
    mean_x: DVector<f64>,
    mean_y: f64,
    w: DVector<f64>,
}

impl Ridge {
    pub fn fit(x: &[Vec<f64>], y: &[f64], rows: &[usize]) -> Result<Self> {
        let cols = informative_columns(x, rows);
        let n = rows.len();
        let mut a = rows_matrix(x, rows, &cols);
        let mean_x = DVector::from_fn(cols.len(), |c, _| a.column(c).mean());
        for c in 0..cols.len() {
            let m = mean_x[c];
            a.column_mut(c).add_scalar_mut(-m);
        }
        let mean_y = rows.iter().map(|&r| y[r]).sum::<f64>() / n as f64;
        let yc = DVector::from_fn(n, |r, _| y[rows[r]] - mean_y);
        let mut gram = a.transpose() * &a;
        let lambda = RIDGE_SCALE * gram.trace() / cols.len().max(1) as f64;
        for i in 0..cols.len() {
            gram[(i, i)] += lambda.max(1e-12);
        }
        let rhs = a.transpose() * yc;
        let w = gram
            .cholesky()
            .ok_or_else(|| Error::invalid("ridge", "normal equations are not positive definite"))?
            .solve(&rhs);
        Ok(Self { cols, mean_x, mean_y, w })
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        self.mean_y + self.cols.iter().enumerate().map(|(c, &j)| (row[j] - self.mean_x[c]) * self.w[c]).sum::<f64>()
    }
}

/// Multinomial logistic regression on standardized features, full-batch gradient descent.
pub struct Logistic {
    cols: Vec<usize>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `(p + 1) x classes`, bias last.
    w: DMatrix<f64>,
    pub iterations: usize,
}

fn softmax_rows(z: &mut DMatrix<f64>) {
    for mut r in z.row_iter_mut() {
        let m = r.max();
        r.apply(|v| *v = (*v - m).exp());
        let s = r.sum();
        r /= s;
    }
}

impl Logistic {
    pub fn fit(x: &[Vec<f64>], labels: &[usize], rows: &[usize], classes: usize) -> Result<Self> {
        let cols = informative_columns(x, rows);
        let n = rows.len();
        let p = cols.len();
        let raw = rows_matrix(x, rows, &cols);
        let mean: Vec<f64> = (0..p).map(|c| raw.column(c).mean()).collect();
        let scale: Vec<f64> = (0..p)
            .map(|c| {
                let sd = (raw.column(c).iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>() / n as f64).sqrt();
                if sd > 0.0 { sd } else { 1.0 }
            })
            .collect();
        let a = DMatrix::from_fn(n, p + 1, |r, c| if c == p { 1.0 } else { (raw[(r, c)] - mean[c]) / scale[c] });
        let y = DMatrix::from_fn(n, classes, |r, k| if labels[rows[r]] == k { 1.0 } else { 0.0 });
        // Lipschitz bound of the mean cross-entropy gradient: 0.5 * lambda_max(A^T A) / n
        let gram = a.transpose() * &a / n as f64;
        let mut v = DVector::from_element(p + 1, 1.0);
        let mut lmax = 0.0;
        for _ in 0..100 {
            let w = &gram * &v;
            lmax = w.norm();
            if lmax == 0.0 {
                break;
            }
            v = w / lmax;
        }
        let step = 1.0 / (0.5 * lmax * 1.05 + LOGISTIC_L2);
        let mut w = DMatrix::zeros(p + 1, classes);
        let mut iterations = 0;
        for it in 0..LOGISTIC_MAX_ITERS {
            let mut prob = &a * &w;
            softmax_rows(&mut prob);
            let mut grad = a.transpose() * (prob - &y) / n as f64;
            for r in 0..p {
                for k in 0..classes {
                    grad[(r, k)] += LOGISTIC_L2 * w[(r, k)];
                }
            }
            iterations = it + 1;
            if grad.norm() < LOGISTIC_GRAD_TOL {
                break;
            }
            w -= grad * step;
        }
        Ok(Self { cols, mean, scale, w, iterations })
    }

    pub fn predict(&self, row: &[f64]) -> usize {
        let p = self.cols.len();
        let mut best = (f64::NEG_INFINITY, 0);
        for k in 0..self.w.ncols() {
            let z = self.w[(p, k)]
                + self.cols.iter().enumerate().map(|(c, &j)| (row[j] - self.mean[c]) / self.scale[c] * self.w[(c, k)]).sum::<f64>();
            if z > best.0 {
                best = (z, k);
            }
        }
        best.1
    }
}

/// k-fold linear readout. Continuous targets use ridge regression; ordinal and binary
/// targets (class indices stored as f64) use multinomial logistic regression.
pub fn linear_probe(features: &[Vec<f64>], targets: &[f64], task: ProbeTask, folds: usize, seed: u64) -> Result<ProbeResult> {
    let n = features.len();
    if n != targets.len() || n == 0 {
        return Err(Error::invalid("linear_probe", format!("{n} feature rows for {} targets", targets.len())));
    }
    if folds < 2 || n < 5 * folds {
        return Err(Error::invalid("linear_probe", format!("{n} samples cannot fill {folds} folds of at least 5")));
    }
    if features.iter().any(|r| r.len() != features[0].len() || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("linear_probe", "feature rows must be finite and equally long"));
    }
    let labels: Vec<usize> = targets.iter().map(|&t| t.max(0.0).round() as usize).collect();
    let strata = match task {
        ProbeTask::Continuous => rank_strata(targets, folds),
        _ => labels.clone(),
    };
    let fold_of = assign_folds(&strata, folds, seed);
    let classes = labels.iter().max().map_or(1, |m| m + 1).max(2);
    let mut metrics: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut predictions = vec![0.0; n];
    for f in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
        let mut put = |k: &str, v: f64| metrics.entry(k.to_string()).or_default().push(v);
        match task {
            ProbeTask::Continuous => {
                let m = Ridge::fit(features, targets, &train)?;
                let pred: Vec<f64> = test.iter().map(|&i| m.predict(&features[i])).collect();
                let truth: Vec<f64> = test.iter().map(|&i| targets[i]).collect();
                put("r2", r_squared(&truth, &pred));
                for (&i, p) in test.iter().zip(pred) {
                    predictions[i] = p;
                }
            }
            ProbeTask::Ordinal | ProbeTask::Binary => {
                let m = Logistic::fit(features, &labels, &train, classes)?;
                let pred: Vec<usize> = test.iter().map(|&i| m.predict(&features[i])).collect();
                let truth: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
                put("accuracy", accuracy(&truth, &pred));
                if task == ProbeTask::Ordinal {
                    put("one_off", one_off_accuracy(&truth, &pred));
                } else {
                    let c = Confusion::from_verdicts(
                        &truth.iter().map(|&t| t == 1).collect::<Vec<_>>(),
                        &pred.iter().map(|&p| p == 1).collect::<Vec<_>>(),
                    );
                    put("precision", c.precision());
                    put("recall", c.recall());
                    put("f1", c.f1());
                }
                for (&i, p) in test.iter().zip(pred) {
                    predictions[i] = p as f64;
                }
            }
        }
    }
    Ok(ProbeResult {
        task,
        seed,
        folds: fold_of,
        metrics,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn folds_partition_and_stratify() {
        let strata: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let f = assign_folds(&strata, 5, 3);
        for k in 0..5 {
            let members: Vec<usize> = (0..40).filter(|&i| f[i] == k).collect();
            assert_eq!(members.len(), 8);
            for s in 0..4 {
                assert_eq!(members.iter().filter(|&&i| strata[i] == s).count(), 2);
            }
        }
    }

    #[test]
    fn realizable_regression_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<Vec<f64>> = (0..60).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let y: Vec<f64> = x.iter().map(|r| 0.5 + r[0] - 2.0 * r[2]).collect();
        let res = linear_probe(&x, &y, ProbeTask::Continuous, 5, 0).unwrap();
        assert!(res.summary("r2").unwrap().0 > 0.999);
    }

    #[test]
    fn separable_classes_are_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<Vec<f64>> = (0..60).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 3.0]).collect();
        let y: Vec<f64> = x.iter().map(|r| if r[0] > 0.0 { 1.0 } else { 0.0 }).collect();
        let res = linear_probe(&x, &y, ProbeTask::Binary, 5, 0).unwrap();
        assert!(res.summary("accuracy").unwrap().0 > 0.9);
    }

    #[test]
    fn too_few_samples_rejected() {
        let x = vec![vec![1.0]; 20];
        assert!(linear_probe(&x, &[0.0; 20], ProbeTask::Continuous, 5, 0).is_err());
    }
}
