use drascore::contrastive::{augment, local_loss_value, neighbor_loss_value, AugmentationConfig, MemoryBank};
use proptest::prelude::*;

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
    v.iter().map(|x| x / n).collect()
}

#[test]
fn loss_falls_as_the_positive_gets_closer() {
    let q = unit(&[1.0, 0.0, 0.0]);
    let negs = vec![unit(&[0.0, 1.0, 0.0]), unit(&[0.0, 0.0, 1.0])];
    let mut last = f64::INFINITY;
    for k in 0..=10 {
        let a = k as f64 / 10.0;
        let kp = unit(&[a, 1.0 - a, 0.0]);
        let l = local_loss_value(&q, &kp, &negs, 0.2).unwrap();
        assert!(l < last);
        last = l;
    }
}

#[test]
fn neighbour_loss_pools_positives() {
    let kp = unit(&[1.0, 0.0, 0.0]);
    let negs = vec![unit(&[0.0, 1.0, 0.0]), unit(&[0.0, 0.0, 1.0])];
    let r1 = unit(&[1.0, 0.5, 0.0]);
    let r2 = unit(&[0.2, 1.0, 0.3]);
    let tau = 0.2;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut pos = 0.0;
    let mut all = 0.0;
    for r in [&r1, &r2] {
        pos += (dot(r, &kp) / tau).exp();
        all += (dot(r, &kp) / tau).exp();
        for n in &negs {
            all += (dot(r, n) / tau).exp();
        }
    }
    let want = -(pos / all).ln();
    let got = neighbor_loss_value(&[r1, r2], &kp, &negs, tau).unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    // one neighbour is the local loss
    let one = neighbor_loss_value(std::slice::from_ref(&kp), &kp, &negs, tau).unwrap();
    assert!((one - local_loss_value(&kp, &kp, &negs, tau).unwrap()).abs() < 1e-12);
}

#[test]
fn exclusion_never_returns_the_anchor_subject() {
    let mut bank = MemoryBank::new(2, 16, 2).unwrap();
    for s in 0..8usize {
        let a = s as f32;
        bank.enqueue_from(1, &[a.cos(), a.sin(), (a + 1.0).cos(), (a + 1.0).sin()], Some(s as u64), &[s, s]).unwrap();
    }
    for seed in 0..20 {
        let n = bank.sample_excluding(1, 6, seed, Some(3)).unwrap();
        assert_eq!(n.count, 6);
        assert!(n.provenance.iter().all(|p| p.subject != Some(3) && p.landmark == 1));
    }
    // 14 of the 16 keys are eligible
    assert!(bank.sample_excluding(1, 15, 0, Some(3)).is_err());
}

#[test]
fn bank_state_restores_exactly() {
    let mut bank = MemoryBank::new(3, 4, 2).unwrap();
    for i in 0..5 {
        let a = i as f32 * 0.3;
        bank.enqueue(i % 3, &[a.cos(), a.sin()], Some(i as u64)).unwrap();
    }
    let back = MemoryBank::restore(&bank.state_json(), &bank.slot_blob()).unwrap();
    assert_eq!(back, bank);
}

#[test]
fn augmentation_is_seeded_and_bounded() {
    let d = 8;
    let patch: Vec<f32> = (0..d * d * d).map(|i| ((i * 37) % 200) as f32 / 100.0 - 1.0).collect();
    let cfg = AugmentationConfig::default();
    assert_eq!(augment(&patch, d, 5, &cfg), augment(&patch, d, 5, &cfg));
    assert_ne!(augment(&patch, d, 5, &cfg), augment(&patch, d, 6, &cfg));
    assert!(augment(&patch, d, 7, &cfg).iter().all(|v| (-1.0..=1.0).contains(v)));
}

proptest! {
    #[test]
    fn loss_is_finite_and_bounded(raw in prop::collection::vec(-1.0f64..1.0, 4 * 6), tau in 0.05f64..1.0) {
        let rows: Vec<Vec<f64>> = raw.chunks(4).map(|c| unit(&[c[0] + 1e-3, c[1], c[2], c[3]])).collect();
        let (q, kp, negs) = (&rows[0], &rows[1], &rows[2..]);
        let l = local_loss_value(q, kp, negs, tau).unwrap();
        // unit vectors keep every logit in [-1/tau, 1/tau]
        let k = negs.len() as f64;
        prop_assert!(l.is_finite());
        prop_assert!(l >= (1.0 + k * (-2.0 / tau).exp()).ln() - 1e-9);
        prop_assert!(l <= (1.0 + k * (2.0 / tau).exp()).ln() + 1e-9);
    }
}
