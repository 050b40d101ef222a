use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::encoder::{BnMode, Checkpoint, ForwardOptions, Network, Param, ParamKind};
use crate::error::{Error, Result};
use crate::registration::{extract_patch, normalize_coord, AffineTransform};
use crate::tensor::{BatchStats, Scalar, Tape, Tensor, Var};
use crate::volume::{Point, Volume};

pub const PROB_THRESHOLD: f64 = 0.5;
pub const VOXEL_FRACTION: f64 = 0.25;
/// One output channel per lesion subtype (A, B).
pub const DETECT_CHANNELS: usize = 2;
const INFERENCE_BATCH: usize = 16;

/// Patch is positive when at least `voxel_fraction` of its voxels have probability above `prob_threshold`.
pub fn patch_verdict(probs: &[f64], prob_threshold: f64, voxel_fraction: f64) -> bool {
    let above = probs.iter().filter(|&&p| p > prob_threshold).count();
    above as f64 >= voxel_fraction * probs.len() as f64
}

/// Encoder plus a 1x1x1 convolution on its last feature map, upsampled to patch resolution.
#[derive(Clone, Debug)]
pub struct DetectionModel<T: Scalar> {
    pub encoder: Network<T>,
    /// `head.kernel` `[C, R, 1, 1, 1]` and `head.bias` `[C]`.
    pub head: Vec<Param<T>>,
    pub patch_size: usize,
}

impl<T: Scalar> DetectionModel<T> {
    pub fn new(encoder: Network<T>, patch_size: usize, seed: u64) -> Result<Self> {
        let r = encoder.config.representation_dim();
        let f = encoder.config.feature_extent(patch_size);
        if f == 0 || !patch_size.is_multiple_of(f) {
            return Err(Error::invalid("detection_model", format!("patch size {patch_size} is not a multiple of feature extent {f}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, (2.0 / r as f64).sqrt()).expect("positive variance");
        let head = vec![
            Param {
                name: "head.kernel".into(),
                value: Tensor::from_fn(&[DETECT_CHANNELS, r, 1, 1, 1], |_| T::lit(normal.sample(&mut rng))),
                kind: ParamKind::Weight,
            },
            Param {
                name: "head.bias".into(),
                value: Tensor::zeros(&[DETECT_CHANNELS]),
                kind: ParamKind::Bias,
            },
        ];
        Ok(Self {
            encoder,
            head,
            patch_size,
        })
    }

    pub fn upsample_factor(&self) -> usize {
        self.patch_size / self.encoder.config.feature_extent(self.patch_size)
    }

    /// Per-voxel logits `[B, C, d, d, d]` from a feature map `[B, R, f, f, f]`.
    pub fn head_logits(&self, tape: &mut Tape<T>, head_vars: &[Var], feature_map: Var) -> Result<Var> {
        let z = tape.conv3d(feature_map, head_vars[0], Some(head_vars[1]), 1, 0)?;
        tape.upsample_nearest(z, self.upsample_factor())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn logits(
        &self,
        tape: &mut Tape<T>,
        enc_vars: &[Var],
        head_vars: &[Var],
        x: Var,
        coords: &[Point],
        bn: BnMode,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        let fm = self.encoder.features(tape, enc_vars, x, coords, &ForwardOptions::new(bn), stats)?;
        self.head_logits(tape, head_vars, fm)
    }

    /// Eval-mode voxel probabilities, one `C * d^3` vector per patch.
    pub fn probabilities(&self, patches: &[&[f32]], coords: &[Point]) -> Result<Vec<Vec<f64>>> {
        let d = self.patch_size;
        let mut out = Vec::with_capacity(patches.len());
        for (chunk, cs) in patches.chunks(INFERENCE_BATCH).zip(coords.chunks(INFERENCE_BATCH)) {
            let mut tape = Tape::new();
            let ev = self.encoder.bind(&mut tape, false);
            let hv: Vec<Var> = self.head.iter().map(|p| tape.leaf(p.value.clone(), false)).collect();
            let data = chunk.iter().flat_map(|p| p.iter()).map(|&v| T::lit(v as f64)).collect();
            let x = tape.constant(Tensor::new(vec![chunk.len(), 1, d, d, d], data)?);
            let z = self.logits(&mut tape, &ev, &hv, x, cs, BnMode::Eval, &mut Vec::new())?;
            let z = tape.sigmoid(z)?;
            let per = DETECT_CHANNELS * d * d * d;
            out.extend(tape.value(z).to_f64_vec().chunks(per).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(self.encoder.config.clone(), self.patch_size, 0, 0.0);
        c.insert_network("enc/", &self.encoder.cast::<f32>())?;
        for p in &self.head {
            c.insert(p.name.clone(), p.value.shape().to_vec(), p.value.cast::<f32>().into_data())?;
        }
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<DetectionModel<f32>> {
        let mut m = DetectionModel::new(c.network("enc/")?, c.header.patch_size, 0)?;
        for p in &mut m.head {
            let data = c.get(&p.name)?.to_vec();
            p.value = Tensor::new(p.value.shape().to_vec(), data)?;
        }
        Ok(m)
    }
}

/// Channel `c` of a `C * n` probability vector.
pub fn channel(probs: &[f64], c: usize) -> &[f64] {
    let n = probs.len() / DETECT_CHANNELS;
    &probs[c * n..(c + 1) * n]
}

#[derive(Clone, Debug)]
pub struct WindowVerdict {
    pub center: [usize; 3],
    pub positive: [bool; DETECT_CHANNELS],
}

#[derive(Clone, Debug)]
pub struct DenseDetection {
    /// Averaged probability per channel and voxel (0 where no window reached).
    pub probability: Vec<Vec<f32>>,
    /// `probability > 0.5` per channel.
    pub mask: Vec<Vec<bool>>,
    pub windows: Vec<WindowVerdict>,
    /// Roi centres whose window would leave the volume.
    pub skipped: usize,
}

impl DenseDetection {
    /// Voxels predicted as any lesion subtype.
    pub fn union_mask(&self) -> Vec<bool> {
        (0..self.mask[0].len()).map(|i| self.mask.iter().any(|m| m[i])).collect()
    }
}

/// Sliding-window inference over the subject roi. Windows are `d`-cubes centred every
/// `step` voxels; each carries the atlas coordinate of its centre as routing input.
pub fn dense_detect<T: Scalar>(
    subject: &Volume,
    to_atlas: &AffineTransform,
    atlas_extents: [usize; 3],
    model: &DetectionModel<T>,
    step: usize,
) -> Result<DenseDetection> {
    if step == 0 {
        return Err(Error::invalid("dense_detect", "window step must be positive"));
    }
    let d = model.patch_size;
    let half = d / 2;
    let roi = subject.roi()?;
    let e = subject.extents;
    let mut centers = Vec::new();
    let mut skipped = 0;
    for z in (0..e[0]).step_by(step) {
        for y in (0..e[1]).step_by(step) {
            for x in (0..e[2]).step_by(step) {
                if !roi[subject.index(z, y, x)] {
                    continue;
                }
                let c = [z, y, x];
                if (0..3).all(|a| c[a] >= half && c[a] + d - half <= e[a]) {
                    centers.push(c);
                } else {
                    skipped += 1;
                }
            }
        }
    }
    let results: Vec<Vec<Vec<f64>>> = centers
        .par_chunks(INFERENCE_BATCH)
        .map(|chunk| {
            let patches: Vec<Vec<f32>> = chunk.iter().map(|c| extract_patch(subject, c.map(|v| v as f64), d).data).collect();
            let refs: Vec<&[f32]> = patches.iter().map(Vec::as_slice).collect();
            let coords: Vec<Point> = chunk
                .iter()
                .map(|c| normalize_coord(to_atlas.apply(c.map(|v| v as f64)), atlas_extents))
                .collect();
            model.probabilities(&refs, &coords)
        })
        .collect::<Result<_>>()?;
    let n = subject.len();
    let mut sum = vec![vec![0.0f64; n]; DETECT_CHANNELS];
    let mut count = vec![0u32; n];
    let mut windows = Vec::with_capacity(centers.len());
    for (c, probs) in centers.iter().zip(results.into_iter().flatten()) {
        let mut positive = [false; DETECT_CHANNELS];
        for (ch, pos) in positive.iter_mut().enumerate() {
            *pos = patch_verdict(channel(&probs, ch), PROB_THRESHOLD, VOXEL_FRACTION);
        }
        windows.push(WindowVerdict { center: *c, positive });
        let mut k = 0;
        for oz in 0..d {
            for oy in 0..d {
                for ox in 0..d {
                    let i = subject.index(c[0] + oz - half, c[1] + oy - half, c[2] + ox - half);
                    count[i] += 1;
                    for (ch, s) in sum.iter_mut().enumerate() {
                        s[i] += channel(&probs, ch)[k];
                    }
                    k += 1;
                }
            }
        }
    }
    let probability: Vec<Vec<f32>> = sum
        .iter()
        .map(|s| s.iter().zip(&count).map(|(v, &c)| if c > 0 { (v / c as f64) as f32 } else { 0.0 }).collect())
        .collect();
    let mask = probability.iter().map(|p| p.iter().map(|&v| v as f64 > PROB_THRESHOLD).collect()).collect();
    Ok(DenseDetection {
        probability,
        mask,
        windows,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_boundary_is_inclusive() {
        let mut p = vec![0.0; 16];
        p[..4].iter_mut().for_each(|v| *v = 0.6);
        assert!(patch_verdict(&p, 0.5, 0.25));
        p[3] = 0.5;
        assert!(!patch_verdict(&p, 0.5, 0.25));
        assert!(patch_verdict(&[1.0; 8], 0.5, 0.25));
    }
}
