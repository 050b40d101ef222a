use drascore::contrastive::{AugmentationConfig, ContrastConfig};
use drascore::encoder::{Conditioning, EncoderConfig, Network};
use drascore::phantom::{generate_atlas, generate_subject, DiseaseConfig};
use drascore::registration::{build_landmark_grid, LandmarkGrid};
use drascore::trainer::{read_log_csv, write_log_csv, PatchCache, TrainConfig, Trainer};

fn encoder() -> EncoderConfig {
    EncoderConfig {
        channels: vec![1, 3, 4],
        strides: vec![1, 2],
        experts: 2,
        embedding_dim: 4,
        conditioning: Conditioning::LocCondConv,
        hyper_hidden: 4,
    }
}

fn setup(subjects: u64) -> (LandmarkGrid, PatchCache) {
    let atlas = generate_atlas([32; 3], 1.0, 2).unwrap();
    let records: Vec<_> = (0..subjects).map(|s| generate_subject(&atlas, 300 + s, &DiseaseConfig::default()).unwrap()).collect();
    let grid = build_landmark_grid(&atlas, 8, 8, 1).unwrap();
    let pairs: Vec<_> = records.iter().map(|r| (&r.volume, &r.true_transform)).collect();
    let cache = PatchCache::build(&pairs, &grid);
    (grid, cache)
}

fn contrast() -> ContrastConfig {
    ContrastConfig {
        neighbors: 1,
        negatives: 4,
        queue_capacity: 16,
        ..ContrastConfig::default()
    }
}

fn train(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_steps_checkpoints_the_initialization() {
    let (grid, cache) = setup(6);
    let mut t: Trainer<f32> = Trainer::new(&encoder(), &grid, cache, train(0), contrast()).unwrap();
    assert!(t.run(|_, _| Ok(())).unwrap().is_empty());
    let q = t.checkpoint().unwrap().network("q/").unwrap();
    let init: Network<f32> = Network::new(&encoder(), 0).unwrap();
    for (a, b) in q.params.iter().zip(&init.params) {
        assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
    }
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let run = || {
        let (grid, cache) = setup(6);
        let mut t: Trainer<f32> = Trainer::new(&encoder(), &grid, cache, train(4), contrast()).unwrap();
        let logs = t.run(|_, _| Ok(())).unwrap();
        (t.checkpoint().unwrap().encode().unwrap(), logs.iter().map(|l| l.loss_local.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn key_follows_the_momentum_recursion() {
    let (grid, cache) = setup(6);
    let mut t: Trainer<f64> = Trainer::new(&encoder(), &grid, cache, train(5), contrast()).unwrap();
    let m = t.pair.momentum;
    let k0: Vec<Vec<f64>> = t.pair.key.params.iter().map(|p| p.value.data().to_vec()).collect();
    let mut queries = Vec::new();
    for _ in 0..5 {
        t.step().unwrap();
        queries.push(t.pair.query.params.iter().map(|p| p.value.data().to_vec()).collect::<Vec<_>>());
    }
    let mut worst = 0.0_f64;
    for (pi, p) in t.pair.key.params.iter().enumerate() {
        for (i, &v) in p.value.data().iter().enumerate() {
            let mut want = m.powi(5) * k0[pi][i];
            for (s, q) in queries.iter().enumerate() {
                want += (1.0 - m) * m.powi(4 - s as i32) * q[pi][i];
            }
            worst = worst.max((v - want).abs());
        }
    }
    assert!(worst < 1e-12, "{worst}");
    // running statistics are copied, not blended
    assert_eq!(t.pair.key.running, t.pair.query.running);
}

#[test]
fn small_cohort_loss_goes_down() {
    let (grid, cache) = setup(8);
    let cfg = TrainConfig {
        base_lr: 0.05,
        ..train(240)
    };
    let quiet = ContrastConfig {
        augmentation: AugmentationConfig::identity(),
        ..contrast()
    };
    let mut t: Trainer<f32> = Trainer::new(&encoder(), &grid, cache, cfg, quiet).unwrap();
    let logs = t.run(|_, _| Ok(())).unwrap();
    let mean = |s: &[drascore::trainer::StepLog]| s.iter().map(|l| l.loss_local + l.loss_neighbor).sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&logs[..40]), mean(&logs[logs.len() - 40..]));
    assert!(last < first, "first {first} last {last}");
}

#[test]
fn too_few_subjects_rejected() {
    let (grid, cache) = setup(3);
    assert!(Trainer::<f32>::new(&encoder(), &grid, cache, train(1), contrast()).is_err());
}

#[test]
fn log_csv_round_trip() {
    let (grid, cache) = setup(6);
    let mut t: Trainer<f32> = Trainer::new(&encoder(), &grid, cache, train(3), contrast()).unwrap();
    let logs = t.run(|_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    write_log_csv(&logs, &path).unwrap();
    let back = read_log_csv(&path).unwrap();
    assert_eq!(back.len(), 3);
    assert_eq!(back[2].step, 2);
    assert!(read_log_csv(&dir.path().join("absent.csv")).is_err());
}
