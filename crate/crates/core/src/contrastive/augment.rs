use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registration::AffineTransform;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub rotation_deg: f64,
    pub translation: f64,
    pub scale_range: [f64; 2],
    pub noise_sd: f64,
    pub gamma_range: [f64; 2],
    pub probability: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            rotation_deg: 10.0,
            translation: 2.0,
            scale_range: [0.9, 1.1],
            noise_sd: 0.05,
            gamma_range: [0.8, 1.25],
            probability: 0.8,
        }
    }
}

impl AugmentationConfig {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            translation: 0.0,
            scale_range: [1.0, 1.0],
            noise_sd: 0.0,
            gamma_range: [1.0, 1.0],
            probability: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rotation_deg >= 0.0
            && self.translation >= 0.0
            && self.noise_sd >= 0.0
            && self.scale_range[0] > 0.0
            && self.scale_range[0] <= 1.0
            && self.scale_range[1] >= 1.0
            && self.gamma_range[0] > 0.0
            && self.gamma_range[0] <= 1.0
            && self.gamma_range[1] >= 1.0
            && (0.0..=1.0).contains(&self.probability);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("augmentation ranges must bracket the identity: {self:?}")))
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Random rotation, translation and scale (one resampling with edge clamping),
/// then Gaussian noise, then the contrast curve `sign(x) |x|^gamma`, clamped to [-1, 1].
pub fn augment(patch: &[f32], d: usize, seed: u64, cfg: &AugmentationConfig) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let apply = |rng: &mut ChaCha8Rng| rng.gen_range(0.0..1.0) < cfg.probability;

    let rot = cfg.rotation_deg.to_radians();
    let angles: [f64; 3] = if apply(&mut rng) {
        std::array::from_fn(|_| uniform(&mut rng, -rot, rot))
    } else {
        [0.0; 3]
    };
    let shift: [f64; 3] = if apply(&mut rng) {
        std::array::from_fn(|_| uniform(&mut rng, -cfg.translation, cfg.translation))
    } else {
        [0.0; 3]
    };
    let scale: [f64; 3] = if apply(&mut rng) {
        std::array::from_fn(|_| uniform(&mut rng, cfg.scale_range[0], cfg.scale_range[1]))
    } else {
        [1.0; 3]
    };
    let noisy = apply(&mut rng) && cfg.noise_sd > 0.0;
    let gamma = if apply(&mut rng) {
        uniform(&mut rng, cfg.gamma_range[0], cfg.gamma_range[1])
    } else {
        1.0
    };

    let c = (d - 1) as f64 / 2.0;
    let geometric = angles != [0.0; 3] || shift != [0.0; 3] || scale != [1.0; 3];
    let mut out = if geometric {
        let rotate = AffineTransform::about_center([c; 3], angles, [1.0; 3], [0.0; 3]).expect("rotation");
        let translate = AffineTransform::translation_only(shift);
        let zoom = AffineTransform::about_center([c; 3], [0.0; 3], scale, [0.0; 3]).expect("bounded scale");
        // output voxel x reads the input at the preimage of the composed map
        let map = zoom.compose(&translate.compose(&rotate));
        let ext = [d; 3];
        let mut out = Vec::with_capacity(d * d * d);
        for z in 0..d {
            for y in 0..d {
                for x in 0..d {
                    let p = map.apply_inverse([z as f64, y as f64, x as f64]);
                    let q = p.map(|v| v.clamp(0.0, c * 2.0));
                    out.push(crate::volume::sample_trilinear(patch, ext, q, 0.0));
                }
            }
        }
        out
    } else {
        patch.to_vec()
    };

    if noisy {
        let normal = Normal::new(0.0, cfg.noise_sd).expect("validated noise");
        for v in &mut out {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    for v in &mut out {
        let x = v.clamp(-1.0, 1.0) as f64;
        let y = if gamma == 1.0 { x } else { x.signum() * x.abs().powf(gamma) };
        *v = y.clamp(-1.0, 1.0) as f32;
    }
    out
}
