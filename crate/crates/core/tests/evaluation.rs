use std::collections::BTreeMap;

use drascore::encoder::{Conditioning, EncoderConfig, Network};
use drascore::evaluation::{
    annotation_subset, assign_folds, dice, evaluate_patches, fine_tune, linear_probe, patch_verdict, write_efficiency_csv,
    AblationTable, EfficiencyRow, FineTuneConfig, FineTuneMode, LabeledPatch, ProbeTask,
};
use drascore::phantom::Subtype;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

#[test]
fn unrelated_features_probe_at_chance() {
    let mut r2 = Vec::new();
    let mut acc = Vec::new();
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = noise(&mut rng, 60, 6);
        let y: Vec<f64> = (0..60).map(|_| rng.gen_range(0.0..1.0)).collect();
        let classes: Vec<f64> = (0..60).map(|i| (i % 3) as f64).collect();
        let res = linear_probe(&x, &y, ProbeTask::Continuous, 5, seed).unwrap();
        r2.push(res.summary("r2").unwrap().0);
        let res = linear_probe(&x, &classes, ProbeTask::Ordinal, 5, seed).unwrap();
        acc.push(res.summary("accuracy").unwrap().0);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&r2) <= 0.05, "mean R2 {}", mean(&r2));
    // binomial sd of the mean accuracy over 20 x 60 draws
    let sd = (1.0f64 / 3.0 * 2.0 / 3.0 / (20.0 * 60.0)).sqrt();
    assert!((mean(&acc) - 1.0 / 3.0).abs() < 3.0 * sd, "mean accuracy {}", mean(&acc));
}

#[test]
fn realizable_target_is_recovered_by_the_probe() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = noise(&mut rng, 50, 4);
    let y: Vec<f64> = x.iter().map(|r| 2.0 * r[0] - r[2] + 0.5).collect();
    let res = linear_probe(&x, &y, ProbeTask::Continuous, 5, 0).unwrap();
    assert!(res.summary("r2").unwrap().0 > 0.99);
}

#[test]
fn probe_folds_partition_the_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = noise(&mut rng, 40, 3);
    let y: Vec<f64> = (0..40).map(|i| i as f64).collect();
    let res = linear_probe(&x, &y, ProbeTask::Continuous, 4, 9).unwrap();
    let mut sizes = BTreeMap::new();
    for &f in &res.folds {
        *sizes.entry(f).or_insert(0) += 1;
    }
    assert_eq!(sizes.len(), 4);
    assert!(sizes.values().all(|&n| n == 10));
    assert_eq!(res.metrics["r2"].len(), 4);
}

#[test]
fn stratified_folds_balance_each_stratum() {
    let strata: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let folds = assign_folds(&strata, 5, 4);
    for s in 0..3 {
        let mut per = [0; 5];
        for i in (0..30).filter(|&i| strata[i] == s) {
            per[folds[i]] += 1;
        }
        assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
    }
}

fn brute_dice(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0.0;
    let mut total = 0.0;
    for i in 0..a.len() {
        if a[i] && b[i] {
            inter += 1.0;
        }
        if a[i] {
            total += 1.0;
        }
        if b[i] {
            total += 1.0;
        }
    }
    if total == 0.0 {
        1.0
    } else {
        2.0 * inter / total
    }
}

fn window(d: usize, class: Option<Subtype>, seed: u64) -> LabeledPatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = d * d * d;
    let mut data: Vec<f32> = (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect();
    let mut labels = vec![0u8; n];
    if let Some(s) = class {
        // subtype A fills the low half along z, subtype B the high half along x, at opposite intensities
        for i in 0..n {
            let (z, x) = (i / (d * d), i % d);
            let inside = match s {
                Subtype::A => z < d / 2,
                Subtype::B => x >= d / 2,
            };
            if inside {
                data[i] = if s == Subtype::A { 0.9 } else { -0.9 };
                labels[i] = s.label();
            }
        }
    }
    LabeledPatch {
        subject: seed as usize,
        center: [0.0; 3],
        coord: [rng.gen_range(-0.5..0.5), 0.0, 0.0],
        data,
        voxel_labels: labels,
        class,
    }
}

#[test]
fn separable_windows_are_fit_exactly() {
    let d = 8;
    let patches: Vec<LabeledPatch> = (0..18)
        .map(|i| window(d, [Some(Subtype::A), Some(Subtype::B), None][i % 3], i as u64))
        .collect();
    let enc = EncoderConfig {
        channels: vec![1, 4, 4],
        strides: vec![1, 2],
        experts: 2,
        embedding_dim: 4,
        conditioning: Conditioning::LocCondConv,
        hyper_hidden: 4,
    };
    let net: Network<f32> = Network::new(&enc, 0).unwrap();
    let cfg = FineTuneConfig {
        iterations: 300,
        batch_size: 6,
        ..FineTuneConfig::default()
    };
    let model = fine_tune(&net, &patches, FineTuneMode::Full, &cfg).unwrap();
    let ev = evaluate_patches(&model, &patches, None).unwrap();
    assert_eq!(ev.f1(Subtype::A), 1.0);
    assert_eq!(ev.f1(Subtype::B), 1.0);
    assert_eq!(ev.accuracy, 1.0);
}

#[test]
fn fine_tune_needs_every_class() {
    let d = 8;
    let patches: Vec<LabeledPatch> = (0..4).map(|i| window(d, Some(Subtype::A), i)).collect();
    let net: Network<f32> = Network::new(
        &EncoderConfig {
            channels: vec![1, 2],
            strides: vec![2],
            ..EncoderConfig::default()
        },
        0,
    )
    .unwrap();
    assert!(fine_tune(&net, &patches, FineTuneMode::Full, &FineTuneConfig::default()).is_err());
}

#[test]
fn annotation_subsets_are_nested() {
    let patches: Vec<LabeledPatch> = (0..30).map(|i| window(4, [Some(Subtype::A), Some(Subtype::B), None][i % 3], i as u64)).collect();
    let half = annotation_subset(&patches, 0.5, 3);
    let full = annotation_subset(&patches, 1.0, 3);
    let quarter = annotation_subset(&patches, 0.25, 3);
    assert_eq!(full.len(), 30);
    assert_eq!(half.len(), 15);
    assert!(quarter.iter().all(|p| half.contains(p)));
    assert!(half.iter().all(|p| full.contains(p)));
}

#[test]
fn efficiency_csv_has_one_row_per_point() {
    let rows: Vec<EfficiencyRow> = [0.25, 0.5, 1.0]
        .iter()
        .map(|&fraction| EfficiencyRow {
            fraction,
            mode: FineTuneMode::Full,
            init: "pretrained".into(),
            seed: 0,
            patches: (200.0 * fraction) as usize,
            f1_a: 0.9,
            f1_b: 0.8,
            accuracy: 0.7,
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("eff.csv");
    write_efficiency_csv(&rows, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], "fraction,mode,init,seed,patches,f1_a,f1_b,accuracy");
    assert!(lines[1].starts_with("0.25,full,pretrained,0,50,"));
}

#[test]
fn summary_means_recompute_from_the_fold_file() {
    let mut t = AblationTable::default();
    t.push_folds("a", "r2", &[0.1, 0.2, 0.6]);
    t.push_seeded("a", "r2", 1, &[0.3, 0.4, 0.5]);
    t.push_folds("b", "accuracy", &[0.5, 0.7]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("folds.csv");
    t.write_folds_csv(&path).unwrap();
    let back = AblationTable::read_folds_csv(&path).unwrap();
    assert_eq!(back, t);
    let mut sums: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for v in &back.values {
        sums.entry((v.variant.clone(), v.metric.clone())).or_default().push(v.value.unwrap());
    }
    for row in t.summary() {
        let vals = &sums[&(row.variant.clone(), row.metric.clone())];
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((row.mean.unwrap() - mean).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn dice_matches_brute_count(bits in prop::collection::vec(0u8..4, 1..300)) {
        let a: Vec<bool> = bits.iter().map(|b| b & 1 == 1).collect();
        let b: Vec<bool> = bits.iter().map(|b| b & 2 == 2).collect();
        prop_assert!((dice(&a, &b) - brute_dice(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn raising_probabilities_never_clears_a_verdict(probs in prop::collection::vec(0.0f64..1.0, 1..200), bump in 0.0f64..0.5) {
        let raised: Vec<f64> = probs.iter().map(|p| (p + bump).min(1.0)).collect();
        if patch_verdict(&probs, 0.5, 0.25) {
            prop_assert!(patch_verdict(&raised, 0.5, 0.25));
        }
    }
}
