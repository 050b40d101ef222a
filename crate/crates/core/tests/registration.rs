use drascore::phantom::{generate_atlas, generate_subject, DiseaseConfig};
use drascore::registration::{
    build_landmark_grid, landmark_mapping_error, register_affine, AffineTransform, RegistrationConfig,
};
use proptest::prelude::*;

fn lattice() -> Vec<[f64; 3]> {
    let c = [8.0, 24.0, 40.0];
    (0..27).map(|i| [c[i / 9], c[(i / 3) % 3], c[i % 3]]).collect()
}

#[test]
fn atlas_registers_to_itself() {
    let atlas = generate_atlas([48; 3], 1.0, 3).unwrap();
    let r = register_affine(&atlas, &atlas, &RegistrationConfig::default()).unwrap();
    let (mean, max) = landmark_mapping_error(&r.transform, &AffineTransform::identity(), &lattice());
    assert!(mean < 0.2 && max < 0.4, "mean {mean} max {max}");
}

#[test]
fn translation_only_subject_is_recovered() {
    let atlas = generate_atlas([48; 3], 1.0, 3).unwrap();
    let cfg = DiseaseConfig {
        max_rotation_deg: 0.0,
        scale_range: [1.0, 1.0],
        ..DiseaseConfig::healthy()
    };
    let s = generate_subject(&atlas, 5, &cfg).unwrap();
    let r = register_affine(&s.volume, &atlas, &RegistrationConfig::default()).unwrap();
    let (mean, max) = landmark_mapping_error(&r.transform, &s.true_transform, &lattice());
    assert!(mean < 0.5 && max < 1.0, "mean {mean} max {max}");
}

#[test]
fn mismatched_extents_rejected() {
    let a = generate_atlas([32; 3], 1.0, 3).unwrap();
    let b = generate_atlas([48; 3], 1.0, 3).unwrap();
    assert!(register_affine(&a, &b, &RegistrationConfig::default()).is_err());
}

#[test]
fn grid_landmarks_sit_in_the_roi_with_neighbours() {
    let atlas = generate_atlas([48; 3], 1.0, 3).unwrap();
    let g = build_landmark_grid(&atlas, 16, 8, 2).unwrap();
    let roi = atlas.roi_mask.as_ref().unwrap();
    assert!(!g.is_empty());
    for (j, p) in g.landmarks.iter().enumerate() {
        let i = atlas.nearest(*p).unwrap();
        assert!(roi[i]);
        for a in 0..3 {
            assert!(p[a] >= 8.0 && p[a] + 8.0 <= 48.0);
            assert!((-1.0..=1.0).contains(&g.normalized_coords[j][a]));
        }
        assert_eq!(g.neighbors[j].len(), 2);
        assert!(!g.neighbors[j].contains(&j));
    }
}

proptest! {
    #[test]
    fn inverse_undoes_apply(angles in prop::array::uniform3(-0.3f64..0.3), scale in prop::array::uniform3(0.9f64..1.1),
                            t in prop::array::uniform3(-4.0f64..4.0), p in prop::array::uniform3(0.0f64..48.0)) {
        let tr = AffineTransform::about_center([23.5; 3], angles, scale, t).unwrap();
        let back = tr.apply_inverse(tr.apply(p));
        for a in 0..3 {
            prop_assert!((back[a] - p[a]).abs() < 1e-9);
        }
        let id = tr.compose(&tr.inverse());
        prop_assert!(id.max_abs_deviation_from_identity() < 1e-9);
    }
}
