use drascore::phantom::{
    decode_volume, encode_volume, generate_atlas, generate_subject, write_cohort, CohortManifest, DiseaseConfig, Subtype,
};
use drascore::volume::Volume;
use proptest::prelude::*;

fn atlas() -> Volume {
    generate_atlas([32; 3], 1.0, 7).unwrap()
}

#[test]
fn same_seed_gives_identical_bytes() {
    let a = atlas();
    let cfg = DiseaseConfig::default();
    let x = generate_subject(&a, 41, &cfg).unwrap();
    let y = generate_subject(&a, 41, &cfg).unwrap();
    let z = generate_subject(&a, 42, &cfg).unwrap();
    assert_eq!(encode_volume(&x.volume).unwrap(), encode_volume(&y.volume).unwrap());
    assert_eq!(x.lesion_labels, y.lesion_labels);
    assert_ne!(encode_volume(&x.volume).unwrap(), encode_volume(&z.volume).unwrap());
}

#[test]
fn labels_follow_planted_masks() {
    let a = atlas();
    let cfg = DiseaseConfig::default();
    // grade edges restated here as the oracle
    let edges = [0.0, 0.01, 0.03, 0.06, 0.10];
    for seed in 0..12 {
        let s = generate_subject(&a, seed, &cfg).unwrap();
        let roi = s.volume.roi_mask.as_ref().unwrap();
        let roi_n = roi.iter().filter(|&&b| b).count() as f64;
        let a_n = s.lesion_labels.iter().filter(|&&l| l == 1).count() as f64;
        let b_n = s.lesion_labels.iter().filter(|&&l| l == 2).count() as f64;
        assert!((s.labels.subtype_burden[0] - a_n / roi_n).abs() < 1e-12);
        assert!((s.labels.subtype_burden[1] - b_n / roi_n).abs() < 1e-12);
        let frac = (a_n + b_n) / roi_n;
        assert!((s.labels.lesion_fraction - frac).abs() < 1e-12);
        let grade = edges.iter().filter(|&&e| frac >= e).count() - 1;
        assert_eq!(s.labels.grade as usize, grade, "seed {seed}");
        assert!((0.0..=1.0).contains(&s.labels.capacity));
        // lesions only inside the roi
        for (i, &l) in s.lesion_labels.iter().enumerate() {
            assert!(l == 0 || roi[i]);
        }
        for l in &s.lesions {
            assert!(l.voxels > 0);
        }
        assert_eq!(s.lesion_mask(Subtype::A).iter().filter(|&&b| b).count() as f64, a_n);
    }
}

#[test]
fn healthy_config_plants_nothing() {
    let a = atlas();
    for seed in 0..4 {
        let s = generate_subject(&a, seed, &DiseaseConfig::healthy()).unwrap();
        assert!(s.is_lesion_free());
        assert!(s.lesions.is_empty());
        assert_eq!(s.labels.grade, 0);
    }
}

#[test]
fn cohort_directory_round_trip() {
    let a = atlas();
    let cfg = DiseaseConfig::default();
    let records: Vec<_> = (0..3).map(|s| generate_subject(&a, 100 + s, &cfg).unwrap()).collect();
    let dir = tempfile::tempdir().unwrap();
    let written = write_cohort(dir.path(), &a, 7, &cfg, &records).unwrap();
    let read = CohortManifest::read(dir.path()).unwrap();
    assert_eq!(written, read);
    assert_eq!(read.load_atlas(dir.path()).unwrap(), a);
    let back = read.load_subjects(dir.path()).unwrap();
    for (r, b) in records.iter().zip(&back) {
        assert_eq!(r.volume.intensities, b.volume.intensities);
        assert_eq!(r.lesion_labels, b.lesion_labels);
        assert_eq!(r.labels, b.labels);
        assert_eq!(r.true_transform.coefficients(), b.true_transform.coefficients());
    }
}

#[test]
fn missing_manifest_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let err = CohortManifest::read(dir.path()).unwrap_err().to_string();
    assert!(err.contains("cohort.json"), "{err}");
}

proptest! {
    #[test]
    fn volume_codec_round_trips(ext in prop::array::uniform3(1usize..6), values in prop::collection::vec(-1.0f32..1.0, 125)) {
        let n = ext[0] * ext[1] * ext[2];
        let v = Volume { extents: ext, spacing: 1.5, intensities: values[..n].to_vec(), roi_mask: None };
        let back = decode_volume(&encode_volume(&v).unwrap()).unwrap();
        prop_assert_eq!(back.intensities, v.intensities);
        prop_assert_eq!(back.extents, v.extents);
    }
}
