use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::detect::DetectionModel;
use super::finetune::{evaluate_patches, random_roi_coords, LabeledPatch};
use super::metrics::mean_sd;
use super::probe::{linear_probe, ProbeTask};
use crate::error::{Error, Result};
use crate::volume::{Point, Volume};

/// One cell of a per-fold table; `None` marks a variant that could not be run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldValue {
    pub variant: String,
    pub metric: String,
    /// Fold-assignment seed.
    pub seed: u64,
    pub fold: usize,
    pub value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub metric: String,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub folds: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub values: Vec<FoldValue>,
}

impl AblationTable {
    pub fn push_folds(&mut self, variant: &str, metric: &str, values: &[f64]) {
        self.push_seeded(variant, metric, 0, values);
    }

    pub fn push_seeded(&mut self, variant: &str, metric: &str, seed: u64, values: &[f64]) {
        self.values.extend(values.iter().enumerate().map(|(fold, &v)| FoldValue {
            variant: variant.into(),
            metric: metric.into(),
            seed,
            fold,
            value: Some(v),
        }));
    }

    pub fn push_absent(&mut self, variant: &str, metric: &str, folds: usize) {
        self.values.extend((0..folds).map(|fold| FoldValue {
            variant: variant.into(),
            metric: metric.into(),
            seed: 0,
            fold,
            value: None,
        }));
    }

    /// Mean and sample s.d. per (variant, metric) over all seeds and folds, in first-seen order.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut keys: Vec<(String, String)> = Vec::new();
        for v in &self.values {
            let k = (v.variant.clone(), v.metric.clone());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys.into_iter()
            .map(|(variant, metric)| {
                let cells: Vec<&FoldValue> = self.values.iter().filter(|v| v.variant == variant && v.metric == metric).collect();
                let vals: Option<Vec<f64>> = cells.iter().map(|c| c.value).collect();
                let (mean, sd) = match vals {
                    Some(v) if !v.is_empty() => {
                        let (m, s) = mean_sd(&v);
                        (Some(m), Some(s))
                    }
                    _ => (None, None),
                };
                SummaryRow {
                    variant,
                    metric,
                    mean,
                    sd,
                    folds: cells.len(),
                }
            })
            .collect()
    }

    pub fn write_folds_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["variant", "metric", "seed", "fold", "value"])?;
        for v in &self.values {
            w.write_record([v.variant.clone(), v.metric.clone(), v.seed.to_string(), v.fold.to_string(), cell(v.value)])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["variant", "metric", "mean", "sd", "folds"])?;
        for r in self.summary() {
            w.write_record([r.variant, r.metric, cell(r.mean), cell(r.sd), r.folds.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_folds_csv(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut r = csv::Reader::from_path(path)?;
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).ok_or_else(|| Error::Format(format!("short row in {}", path.display())));
            let value = match field(4)? {
                "absent" => None,
                s => Some(s.parse().map_err(|_| Error::Format(format!("bad value {s:?}")))?),
            };
            values.push(FoldValue {
                variant: field(0)?.into(),
                metric: field(1)?.into(),
                seed: field(2)?.parse().map_err(|_| Error::Format("bad seed".into()))?,
                fold: field(3)?.parse().map_err(|_| Error::Format("bad fold index".into()))?,
                value,
            });
        }
        Ok(Self { values })
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".into(), |x| format!("{x}"))
}

/// Probes every variant's image representations against the same targets and folds.
/// Variants without representations are recorded as absent.
pub fn probe_variants(
    variants: &[(String, Option<Vec<Vec<f64>>>)],
    targets: &[(String, ProbeTask, Vec<f64>)],
    folds: usize,
    seed: u64,
) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    for (name, features) in variants {
        for (target, task, y) in targets {
            let Some(x) = features else {
                let metric = if *task == ProbeTask::Continuous { "r2" } else { "accuracy" };
                table.push_absent(name, &format!("{target}.{metric}"), folds);
                continue;
            };
            let r = linear_probe(x, y, *task, folds, seed)?;
            for (metric, vals) in &r.metrics {
                table.push_seeded(name, &format!("{target}.{metric}"), seed, vals);
            }
        }
    }
    Ok(table)
}

/// One-sided two-sample t-test (pooled variance) of `H1: mean(a) > mean(b)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

pub fn one_sided_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("t_test", "each sample needs at least two values"));
    }
    let (ma, sa) = mean_sd(a);
    let (mb, sb) = mean_sd(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let df = na + nb - 2.0;
    let pooled = (((na - 1.0) * sa * sa + (nb - 1.0) * sb * sb) / df).sqrt();
    let se = pooled * (1.0 / na + 1.0 / nb).sqrt();
    let diff = ma - mb;
    if se == 0.0 {
        let (t, p) = if diff > 0.0 {
            (f64::INFINITY, 0.0)
        } else if diff < 0.0 {
            (f64::NEG_INFINITY, 1.0)
        } else {
            (0.0, 0.5)
        };
        return Ok(TTest { t, df, p_value: p });
    }
    let t = diff / se;
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::invalid("t_test", e.to_string()))?;
    Ok(TTest {
        t,
        df,
        p_value: dist.sf(t),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationResult {
    /// Three-way detection accuracy per fold with each window's own atlas location.
    pub correct: Vec<f64>,
    /// Same windows, routing fed uniformly random roi locations.
    pub random: Vec<f64>,
    pub test: TTest,
}

impl PerturbationResult {
    pub fn table(&self, variant: &str) -> AblationTable {
        let mut t = AblationTable::default();
        t.push_folds(&format!("{variant}.correct"), "accuracy", &self.correct);
        t.push_folds(&format!("{variant}.random"), "accuracy", &self.random);
        t
    }
}

/// Detection accuracy with correct vs random locations on each fold of `folds`
/// (fold id per patch).
pub fn location_perturbation(
    model: &DetectionModel<f32>,
    patches: &[LabeledPatch],
    folds: &[usize],
    atlas: &Volume,
    seed: u64,
) -> Result<PerturbationResult> {
    if folds.len() != patches.len() {
        return Err(Error::invalid("location_perturbation", "one fold id per patch required"));
    }
    let k = folds.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = Vec::with_capacity(k);
    let mut random = Vec::with_capacity(k);
    for f in 0..k {
        let members: Vec<LabeledPatch> = patches.iter().zip(folds).filter(|(_, &g)| g == f).map(|(p, _)| p.clone()).collect();
        if members.is_empty() {
            return Err(Error::invalid("location_perturbation", format!("fold {f} is empty")));
        }
        correct.push(evaluate_patches(model, &members, None)?.accuracy);
        let coords: Vec<Point> = random_roi_coords(atlas, members.len(), rng.gen())?;
        random.push(evaluate_patches(model, &members, Some(&coords))?.accuracy);
    }
    let test = one_sided_t_test(&correct, &random)?;
    Ok(PerturbationResult { correct, random, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_test_matches_hand_computation() {
        // means 3 and 1, both s.d. 1, n = 3: se = sqrt(2/3), t = 2.449, df 4
        let r = one_sided_t_test(&[2.0, 3.0, 4.0], &[0.0, 1.0, 2.0]).unwrap();
        assert!((r.t - 2.0 / (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(r.df, 4.0);
        assert!(r.p_value > 0.03 && r.p_value < 0.04, "{}", r.p_value);
        let same = one_sided_t_test(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(same.p_value, 0.5);
    }

    #[test]
    fn summary_marks_absent_cells() {
        let mut t = AblationTable::default();
        t.push_folds("a", "r2", &[0.1, 0.3]);
        t.push_absent("b", "r2", 2);
        let s = t.summary();
        assert!((s[0].mean.unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(s[1].mean, None);
        assert_eq!(s[1].folds, 2);
    }
}
