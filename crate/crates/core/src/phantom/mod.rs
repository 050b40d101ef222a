//! Synthetic lung-like phantoms: an atlas, affinely deformed subjects and
//! planted lesions of two location-dependent subtypes.

mod cohort;
mod io;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registration::AffineTransform;
use crate::volume::{gaussian_blur, Point, Volume, MIN_EXTENT};

pub use cohort::{write_cohort, AtlasEntry, CohortManifest, SubjectEntry, MANIFEST_FILE};
pub use io::{decode_volume, encode_volume, read_volume, write_volume, MAGIC};

pub const BACKGROUND: f32 = -1.0;
pub const LESION_INTENSITY: f64 = -0.9;
/// Lower edges of the grade bins, in lesion voxel fraction.
pub const GRADE_EDGES: [f64; 5] = [0.0, 0.01, 0.03, 0.06, 0.10];

const SEMI_AXIS_FRACTIONS: [f64; 3] = [0.45, 0.42, 0.44];
const TISSUE_BASE: f64 = -0.6;
const SHELL_INTENSITY: f64 = 0.2;
const SHELL_THICKNESS: f64 = 1.5;
const MAX_LESION_ATTEMPTS: usize = 100;

/// The analytic roi shared by the atlas and, through the planted transform,
/// by every subject.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipsoid {
    pub center: Point,
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    pub fn for_extents(extents: [usize; 3]) -> Self {
        let mut center = [0.0; 3];
        let mut semi_axes = [0.0; 3];
        for a in 0..3 {
            center[a] = (extents[a] - 1) as f64 / 2.0;
            semi_axes[a] = SEMI_AXIS_FRACTIONS[a] * extents[a] as f64;
        }
        Self { center, semi_axes }
    }

    /// Ellipsoidal radius: 0 at the centre, 1 on the boundary.
    pub fn radius(&self, p: Point) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.semi_axes[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Normalized distance to the roi boundary, `1 - radius`.
    pub fn depth(&self, p: Point) -> f64 {
        1.0 - self.radius(p)
    }

    pub fn contains(&self, p: Point) -> bool {
        self.radius(p) <= 1.0
    }

    fn gradient(&self, p: Point) -> Point {
        let r = self.radius(p).max(1e-9);
        let mut g = [0.0; 3];
        for a in 0..3 {
            g[a] = (p[a] - self.center[a]) / (self.semi_axes[a] * self.semi_axes[a]) / r;
        }
        g
    }

    fn shell_start(&self) -> f64 {
        let min_axis = self.semi_axes.iter().cloned().fold(f64::INFINITY, f64::min);
        1.0 - SHELL_THICKNESS / min_axis
    }
}

fn check_extents(extents: [usize; 3]) -> Result<()> {
    if let Some(a) = (0..3).find(|&a| extents[a] < MIN_EXTENT) {
        return Err(Error::invalid(
            "phantom",
            format!("extent {} on axis {a} is below the minimum of {MIN_EXTENT}", extents[a]),
        ));
    }
    Ok(())
}

/// Band-limited noise with unit standard deviation.
fn smooth_noise(extents: [usize; 3], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n: usize = extents.iter().product();
    let white: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let mut f = gaussian_blur(&white, extents, sigma);
    let mean = f.iter().sum::<f64>() / n as f64;
    let sd = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    f.iter_mut().for_each(|v| *v = (*v - mean) / sd.max(1e-12));
    f
}

fn voxel_point(v: &Volume, i: usize) -> Point {
    let [z, y, x] = v.coords(i);
    [z as f64, y as f64, x as f64]
}

pub fn generate_atlas(extents: [usize; 3], spacing: f64, seed: u64) -> Result<Volume> {
    check_extents(extents)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Ellipsoid::for_extents(extents);
    let coarse = smooth_noise(extents, 3.0, &mut rng);
    let fine = smooth_noise(extents, 1.2, &mut rng);
    let mut v = Volume::filled(extents, spacing, BACKGROUND);
    let mut mask = vec![false; v.len()];
    let shell = shape.shell_start();
    for i in 0..v.len() {
        let p = voxel_point(&v, i);
        let r = shape.radius(p);
        if r > 1.0 {
            continue;
        }
        mask[i] = true;
        // denser tissue towards the back (larger y)
        let gradient = 0.06 * (p[1] - shape.center[1]) / shape.semi_axes[1];
        let val = if r > shell {
            SHELL_INTENSITY + 0.05 * fine[i]
        } else {
            TISSUE_BASE + gradient + 0.09 * coarse[i] + 0.05 * fine[i]
        };
        v.intensities[i] = val.clamp(-1.0, 1.0) as f32;
    }
    v.roi_mask = Some(mask);
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subtype {
    /// Core lesions, centred where the normalized depth exceeds 0.5.
    A,
    /// Rim lesions, centred where the normalized depth is below 0.25.
    B,
}

impl Subtype {
    pub const ALL: [Subtype; 2] = [Subtype::A, Subtype::B];

    pub fn label(self) -> u8 {
        match self {
            Subtype::A => 1,
            Subtype::B => 2,
        }
    }

    pub fn index(self) -> usize {
        self.label() as usize - 1
    }

    fn depth_range(self) -> (f64, f64) {
        match self {
            Subtype::A => (0.5, 1.0),
            Subtype::B => (0.0, 0.25),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LesionSpec {
    pub expected_count: f64,
    pub radius_min: f64,
    pub radius_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiseaseConfig {
    pub healthy_fraction: f64,
    pub subtype_a: LesionSpec,
    pub subtype_b: LesionSpec,
    /// Flattening of rim lesions along the boundary normal.
    pub rim_flattening: f64,
    pub max_rotation_deg: f64,
    pub scale_range: [f64; 2],
    pub max_translation: f64,
    pub capacity_noise_sd: f64,
    pub texture_jitter: f64,
    pub offset_jitter: f64,
}

impl Default for DiseaseConfig {
    fn default() -> Self {
        Self {
            healthy_fraction: 0.25,
            subtype_a: LesionSpec {
                expected_count: 1.5,
                radius_min: 5.0,
                radius_max: 8.0,
            },
            // rim lesions are flattened and clipped by the boundary, so they start larger
            subtype_b: LesionSpec {
                expected_count: 1.5,
                radius_min: 8.0,
                radius_max: 11.0,
            },
            rim_flattening: 1.6,
            max_rotation_deg: 15.0,
            scale_range: [0.9, 1.1],
            max_translation: 3.0,
            capacity_noise_sd: 0.02,
            texture_jitter: 0.04,
            offset_jitter: 0.05,
        }
    }
}

impl DiseaseConfig {
    pub fn healthy() -> Self {
        let mut c = Self {
            healthy_fraction: 1.0,
            ..Self::default()
        };
        c.subtype_a.expected_count = 0.0;
        c.subtype_b.expected_count = 0.0;
        c
    }

    pub fn spec(&self, s: Subtype) -> &LesionSpec {
        match s {
            Subtype::A => &self.subtype_a,
            Subtype::B => &self.subtype_b,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("disease config: {m}")));
        if !(0.0..=1.0).contains(&self.healthy_fraction) {
            return bad("healthy_fraction must lie in [0, 1]");
        }
        for s in Subtype::ALL {
            let l = self.spec(s);
            if l.expected_count < 0.0 || l.radius_min <= 0.0 || l.radius_max < l.radius_min {
                return bad("lesion counts must be non-negative and radius ranges ordered");
            }
        }
        if self.max_rotation_deg < 0.0 || self.max_translation < 0.0 || self.scale_range[0] > self.scale_range[1] {
            return bad("deformation ranges must be non-negative and ordered");
        }
        if self.rim_flattening < 1.0 || self.capacity_noise_sd < 0.0 {
            return bad("rim_flattening must be >= 1 and noise non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub capacity: f64,
    pub grade: u8,
    pub lesion_fraction: f64,
    /// Lesion voxel fraction of the roi, per subtype (A, B).
    pub subtype_burden: [f64; 2],
}

pub fn grade_for_fraction(fraction: f64) -> u8 {
    GRADE_EDGES.iter().rposition(|&e| fraction >= e).unwrap_or(0) as u8
}

/// Recomputes the deterministic part of the labels from a lesion label volume.
pub fn lesion_fractions(lesion_labels: &[u8], roi: &[bool]) -> (f64, [f64; 2]) {
    let roi_n = roi.iter().filter(|&&b| b).count().max(1) as f64;
    let mut counts = [0usize; 2];
    for &l in lesion_labels {
        if l > 0 {
            counts[l as usize - 1] += 1;
        }
    }
    let burden = [counts[0] as f64 / roi_n, counts[1] as f64 / roi_n];
    (burden[0] + burden[1], burden)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub subtype: Subtype,
    pub center: Point,
    pub radius: f64,
    /// Centroid of this lesion's own mask, subject coordinates.
    pub centroid: Point,
    pub voxels: usize,
}

#[derive(Clone, Debug)]
pub struct SubjectRecord {
    pub seed: u64,
    pub volume: Volume,
    /// Subject to atlas, ground truth.
    pub true_transform: AffineTransform,
    /// Per voxel: 0 healthy, 1 subtype A, 2 subtype B.
    pub lesion_labels: Vec<u8>,
    pub lesions: Vec<Lesion>,
    pub labels: Labels,
}

impl SubjectRecord {
    pub fn lesion_mask(&self, s: Subtype) -> Vec<bool> {
        self.lesion_labels.iter().map(|&l| l == s.label()).collect()
    }

    pub fn is_lesion_free(&self) -> bool {
        self.lesion_labels.iter().all(|&l| l == 0)
    }
}

fn sample_transform(center: Point, cfg: &DiseaseConfig, rng: &mut ChaCha8Rng) -> Result<AffineTransform> {
    let rot = cfg.max_rotation_deg * PI / 180.0;
    let mut angles = [0.0; 3];
    let mut scale = [1.0; 3];
    let mut shift = [0.0; 3];
    for a in 0..3 {
        angles[a] = if rot > 0.0 { rng.gen_range(-rot..=rot) } else { 0.0 };
    }
    for s in &mut scale {
        *s = if cfg.scale_range[1] > cfg.scale_range[0] {
            rng.gen_range(cfg.scale_range[0]..=cfg.scale_range[1])
        } else {
            cfg.scale_range[0]
        };
    }
    // translation drawn uniformly inside the ball of the allowed radius
    if cfg.max_translation > 0.0 {
        loop {
            let t: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..=1.0));
            if t.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                shift = t.map(|v| v * cfg.max_translation);
                break;
            }
        }
    }
    AffineTransform::about_center(center, angles, scale, shift)
}

struct Planter<'a> {
    shape: Ellipsoid,
    transform: &'a AffineTransform,
    extents: [usize; 3],
    roi: &'a [bool],
}

impl Planter<'_> {
    fn subject_radius(&self, x: Point) -> f64 {
        self.shape.radius(self.transform.apply(x))
    }

    /// Samples an atlas-space centre inside the subtype's depth band.
    fn sample_atlas_center(&self, s: Subtype, rng: &mut ChaCha8Rng) -> Point {
        let (lo, hi) = s.depth_range();
        loop {
            let u: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..=1.0));
            let r = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            let depth = 1.0 - r;
            if r <= 1.0 && depth > lo && depth < hi {
                return std::array::from_fn(|a| self.shape.center[a] + u[a] * self.shape.semi_axes[a]);
            }
        }
    }

    /// Places one lesion, returning it with the per-voxel blend weights inside the roi.
    fn plant(
        &self,
        s: Subtype,
        spec: &LesionSpec,
        flattening: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Lesion, Vec<(usize, f64)>)> {
        for _ in 0..MAX_LESION_ATTEMPTS {
            let atlas_center = self.sample_atlas_center(s, rng);
            let center = self.transform.apply_inverse(atlas_center);
            let radius = rng.gen_range(spec.radius_min..=spec.radius_max);
            let normal = if s == Subtype::B {
                let g = self.shape.gradient(atlas_center);
                let l = self.transform.linear();
                let mut n = [0.0; 3];
                for (c, nc) in n.iter_mut().enumerate() {
                    *nc = (0..3).map(|r| l[r][c] * g[r]).sum();
                }
                let norm = n.iter().map(|v| v * v).sum::<f64>().sqrt();
                Some(n.map(|v| v / norm))
            } else {
                None
            };
            let metric = |x: Point| {
                let d: [f64; 3] = std::array::from_fn(|a| x[a] - center[a]);
                let r2: f64 = d.iter().map(|v| v * v).sum();
                match normal {
                    Some(n) => {
                        let along: f64 = (0..3).map(|a| d[a] * n[a]).sum();
                        (r2 - along * along + (flattening * along).powi(2)).sqrt()
                    }
                    None => r2.sqrt(),
                }
            };
            let reach = radius + 1.0;
            let lo: [usize; 3] = std::array::from_fn(|a| (center[a] - reach).floor().max(0.0) as usize);
            let hi: [usize; 3] = std::array::from_fn(|a| {
                ((center[a] + reach).ceil().max(0.0) as usize).min(self.extents[a] - 1)
            });
            let mut weights = Vec::new();
            let mut ball = 0usize;
            let mut inside = 0usize;
            let mut centroid = [0.0; 3];
            for z in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    for x in lo[2]..=hi[2] {
                        let p = [z as f64, y as f64, x as f64];
                        let r = metric(p);
                        if r > reach {
                            continue;
                        }
                        let i = (z * self.extents[1] + y) * self.extents[2] + x;
                        if r <= radius {
                            ball += 1;
                        }
                        if !self.roi[i] {
                            continue;
                        }
                        // cosine ramp from full strength at radius - 1 to zero at radius + 1
                        let w = if r <= radius - 1.0 {
                            1.0
                        } else {
                            0.5 * (1.0 + (PI * (r - radius + 1.0) / 2.0).cos())
                        };
                        if r <= radius {
                            inside += 1;
                            for a in 0..3 {
                                centroid[a] += p[a];
                            }
                        }
                        weights.push((i, w));
                    }
                }
            }
            // the ball must sit mostly inside the roi and inside the field
            let expected = match normal {
                Some(_) => 4.0 / 3.0 * PI * radius.powi(3) / flattening,
                None => 4.0 / 3.0 * PI * radius.powi(3),
            };
            if inside == 0 || (ball as f64) < 0.9 * expected || (inside as f64) < 0.5 * ball as f64 {
                continue;
            }
            if self.subject_radius(center) > 1.0 {
                continue;
            }
            let centroid = centroid.map(|c| c / inside as f64);
            return Ok((
                Lesion {
                    subtype: s,
                    center,
                    radius,
                    centroid,
                    voxels: inside,
                },
                weights,
            ));
        }
        Err(Error::invalid(
            "generate_subject",
            format!("could not place a subtype {s:?} lesion inside the roi after {MAX_LESION_ATTEMPTS} attempts"),
        ))
    }
}

fn poisson(mean: f64, rng: &mut ChaCha8Rng) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as usize).unwrap_or(0)
}

pub fn generate_subject(atlas: &Volume, subject_seed: u64, cfg: &DiseaseConfig) -> Result<SubjectRecord> {
    cfg.validate()?;
    check_extents(atlas.extents)?;
    let ext = atlas.extents;
    let shape = Ellipsoid::for_extents(ext);
    let mut rng = ChaCha8Rng::seed_from_u64(subject_seed);
    let transform = sample_transform(shape.center, cfg, &mut rng)?;

    let mut v = Volume::filled(ext, atlas.spacing, BACKGROUND);
    let mut roi = vec![false; v.len()];
    for i in 0..v.len() {
        let p = voxel_point(&v, i);
        let q = transform.apply(p);
        v.intensities[i] = atlas.sample(q, BACKGROUND);
        roi[i] = shape.contains(q);
    }

    let texture = smooth_noise(ext, 2.0, &mut rng);
    let offset = if cfg.offset_jitter > 0.0 {
        rng.gen_range(-cfg.offset_jitter..=cfg.offset_jitter)
    } else {
        0.0
    };
    for i in 0..v.len() {
        if roi[i] {
            let val = v.intensities[i] as f64 + cfg.texture_jitter * texture[i] + offset;
            v.intensities[i] = val.clamp(-1.0, 1.0) as f32;
        } else {
            v.intensities[i] = BACKGROUND;
        }
    }

    let severity: f64 = rng.gen_range(0.0..1.0);
    let diseased = rng.gen_range(0.0..1.0) >= cfg.healthy_fraction;
    let mut lesion_labels = vec![0u8; v.len()];
    let mut lesions = Vec::new();
    if diseased {
        let planter = Planter {
            shape,
            transform: &transform,
            extents: ext,
            roi: &roi,
        };
        for s in Subtype::ALL {
            let spec = cfg.spec(s);
            let count = poisson(2.0 * spec.expected_count * severity, &mut rng);
            for _ in 0..count {
                let (lesion, weights) = planter.plant(s, spec, cfg.rim_flattening, &mut rng)?;
                for (i, w) in weights {
                    let cur = v.intensities[i] as f64;
                    v.intensities[i] = (cur * (1.0 - w) + LESION_INTENSITY * w).clamp(-1.0, 1.0) as f32;
                    if w >= 0.5 {
                        lesion_labels[i] = s.label();
                    }
                }
                lesions.push(lesion);
            }
        }
    }

    let (fraction, burden) = lesion_fractions(&lesion_labels, &roi);
    let noise = if cfg.capacity_noise_sd > 0.0 {
        Normal::new(0.0, cfg.capacity_noise_sd)
            .map_err(|e| Error::Config(e.to_string()))?
            .sample(&mut rng)
    } else {
        0.0
    };
    let labels = Labels {
        capacity: (1.0 - 4.0 * fraction + noise).clamp(0.0, 1.0),
        grade: grade_for_fraction(fraction),
        lesion_fraction: fraction,
        subtype_burden: burden,
    };
    v.roi_mask = Some(roi);
    Ok(SubjectRecord {
        seed: subject_seed,
        volume: v,
        true_transform: transform,
        lesion_labels,
        lesions,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grade_bins_use_lower_edges() {
        assert_eq!(grade_for_fraction(0.0), 0);
        assert_eq!(grade_for_fraction(0.0099), 0);
        assert_eq!(grade_for_fraction(0.01), 1);
        assert_eq!(grade_for_fraction(0.05), 2);
        assert_eq!(grade_for_fraction(0.06), 3);
        assert_eq!(grade_for_fraction(0.5), 4);
    }

    #[test]
    fn ellipsoid_depth_is_one_at_centre_zero_on_boundary() {
        let e = Ellipsoid::for_extents([48, 48, 48]);
        assert!((e.depth(e.center) - 1.0).abs() < 1e-12);
        let mut p = e.center;
        p[0] += e.semi_axes[0];
        assert!(e.depth(p).abs() < 1e-12);
    }

    #[test]
    fn small_extents_rejected() {
        assert!(generate_atlas([15, 32, 32], 1.0, 0).is_err());
        assert!(generate_atlas([16, 16, 16], 1.0, 0).is_ok());
    }

    #[test]
    fn invalid_disease_config_rejected() {
        let mut c = DiseaseConfig::default();
        c.subtype_a.radius_max = 1.0;
        assert!(c.validate().is_err());
    }
}
