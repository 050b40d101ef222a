use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::mi::{JointHistogram, ROI_DILATION};
use super::nelder_mead::{minimize, SimplexSettings};
use super::AffineTransform;
use crate::error::{Error, Result};
use crate::volume::{dilate, Point, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub histogram_bins: usize,
    /// Initial simplex offset for the nine linear coefficients.
    pub simplex_linear: f64,
    /// Initial simplex offset for the translation, in full-resolution voxels.
    pub simplex_translation: f64,
    pub max_evaluations: usize,
    pub tolerance: f64,
    pub lambda_reg: f64,
    pub levels: usize,
    /// Rotation (degrees) of the extra starting points tried at the coarsest level, about every
    /// combination of axes.
    pub start_rotation_deg: f64,
    /// Solutions carried from one pyramid level to the next.
    pub candidates: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            histogram_bins: 32,
            simplex_linear: 0.3,
            simplex_translation: 6.0,
            max_evaluations: 3000,
            tolerance: 1e-5,
            lambda_reg: 0.01,
            levels: 3,
            start_rotation_deg: 12.0,
            candidates: 3,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.histogram_bins < 8 {
            return Err(Error::Config(format!("histogram_bins must be >= 8, got {}", self.histogram_bins)));
        }
        if !(self.lambda_reg >= 0.0) {
            return Err(Error::Config("lambda_reg must be non-negative".into()));
        }
        if self.levels == 0 || self.max_evaluations == 0 {
            return Err(Error::Config("levels and max_evaluations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Registration {
    /// Maps moving (subject) coordinates to fixed (atlas) coordinates.
    pub transform: AffineTransform,
    pub converged: bool,
    pub mutual_information: f64,
    pub evaluations: usize,
}

/// Transform built from 12 parameters: `linear = I + delta` acting about `center`.
pub fn from_params(x: &[f64], center: Point) -> Result<AffineTransform> {
    let mut rows = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            rows[r][c] = x[r * 3 + c] + if r == c { 1.0 } else { 0.0 };
        }
    }
    let mut t = [0.0; 3];
    for r in 0..3 {
        let lc: f64 = (0..3).map(|c| rows[r][c] * center[c]).sum();
        t[r] = center[r] - lc + x[9 + r];
    }
    AffineTransform::new(rows, t)
}

/// Parameter vectors for every composition of rotations by -`deg`, 0 or +`deg` about the
/// three axes, identity excluded.
fn rotation_starts(deg: f64) -> Vec<Vec<f64>> {
    let axis_rotation = |axis: usize, angle: f64| {
        let (s, c) = angle.sin_cos();
        let (i, j) = ((axis + 1) % 3, (axis + 2) % 3);
        let mut r = [[0.0; 3]; 3];
        r[axis][axis] = 1.0;
        r[i][i] = c;
        r[j][j] = c;
        r[i][j] = -s;
        r[j][i] = s;
        r
    };
    let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        r
    };
    let mut out = Vec::new();
    for code in 0..27 {
        let signs = [code % 3, (code / 3) % 3, code / 9].map(|v| v as f64 - 1.0);
        if signs == [0.0; 3] {
            continue;
        }
        let mut r = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        for (axis, s) in signs.iter().enumerate() {
            r = mul(axis_rotation(axis, s * deg.to_radians()), r);
        }
        let mut x = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..3 {
                x[i * 3 + j] = r[i][j] - if i == j { 1.0 } else { 0.0 };
            }
        }
        out.push(x);
    }
    out
}

struct Level {
    fixed: Volume,
    moving: Volume,
    /// Fixed-space voxels inside the dilated roi, with their full-resolution coordinates.
    region: Vec<(usize, Point)>,
    factor: f64,
}

impl Level {
    fn new(fixed: Volume, moving: Volume, factor: f64) -> Self {
        let mask = match &fixed.roi_mask {
            Some(m) => dilate(m, fixed.extents, ROI_DILATION),
            None => vec![true; fixed.len()],
        };
        let offset = (factor - 1.0) / 2.0;
        let region = (0..fixed.len())
            .filter(|&i| mask[i])
            .map(|i| {
                let c = fixed.coords(i);
                (i, [0, 1, 2].map(|a| c[a] as f64 * factor + offset))
            })
            .collect();
        Self {
            fixed,
            moving,
            region,
            factor,
        }
    }

    fn mutual_information(&self, t: &AffineTransform, bins: usize) -> f64 {
        let mut h = JointHistogram::new(bins);
        let offset = (self.factor - 1.0) / 2.0;
        for &(i, q) in &self.region {
            let p = t.apply_inverse(q);
            let pc = p.map(|v| (v - offset) / self.factor);
            h.add(self.moving.sample(pc, -1.0), self.fixed.intensities[i]);
        }
        h.mutual_information()
    }
}

/// Maximizes `MI(moving warped into fixed space, fixed) - lambda_reg * ||linear - I||_F^2`
/// coarse to fine. Returns the best transform found, flagged when the simplex did not converge.
pub fn register_affine(moving: &Volume, fixed: &Volume, cfg: &RegistrationConfig) -> Result<Registration> {
    cfg.validate()?;
    if moving.extents != fixed.extents || moving.spacing != fixed.spacing {
        return Err(Error::Registration(format!(
            "moving {:?} @ {} and fixed {:?} @ {} must share extents and spacing",
            moving.extents, moving.spacing, fixed.extents, fixed.spacing
        )));
    }
    let center = fixed.extents.map(|e| (e - 1) as f64 / 2.0);
    let mut pyramid = vec![(fixed.clone(), moving.clone())];
    for _ in 1..cfg.levels {
        let (f, m) = pyramid.last().expect("non-empty");
        if f.extents.iter().any(|&e| e < 8) {
            break;
        }
        pyramid.push((f.downsample2(), m.downsample2()));
    }

    // several candidates survive each coarse level; the coarsest costs alone pick wrong too often
    let mut candidates = vec![vec![0.0; 12]];
    let mut converged = true;
    let mut evaluations = 0;
    let levels = pyramid.len();
    for (depth, (f, m)) in pyramid.into_iter().enumerate().rev() {
        let factor = (1usize << depth) as f64;
        let level = Level::new(f, m, factor);
        if level.region.is_empty() {
            return Err(Error::Registration("empty evaluation region".into()));
        }
        let cost = |p: &[f64]| match from_params(p, center) {
            Ok(t) => -level.mutual_information(&t, cfg.histogram_bins) + cfg.lambda_reg * t.linear_deviation_sq(),
            Err(_) => f64::INFINITY,
        };
        let mut steps = vec![cfg.simplex_linear * factor / (1 << (cfg.levels - 1)) as f64; 12];
        for s in &mut steps[9..] {
            *s = cfg.simplex_translation * factor / (1 << (cfg.levels - 1)) as f64;
        }
        let settings = SimplexSettings {
            max_evaluations: cfg.max_evaluations,
            f_tolerance: cfg.tolerance,
            x_tolerance: 1e-3,
        };
        if depth + 1 == levels && cfg.start_rotation_deg > 0.0 {
            candidates.extend(rotation_starts(cfg.start_rotation_deg));
        }
        if depth == 0 {
            // only the best survivor is refined at full resolution
            let best = candidates
                .iter()
                .map(|c| (cost(c), c))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .map(|(_, c)| c.clone())
                .expect("at least one candidate");
            candidates = vec![best];
        }
        let mut refined = Vec::with_capacity(candidates.len());
        for start in &candidates {
            let first = minimize(&cost, start, &steps, settings);
            // one restart guards against a collapsed simplex
            let restart = minimize(&cost, &first.x, &steps, settings);
            evaluations += first.evaluations + restart.evaluations;
            let level_converged = restart.converged;
            refined.push((if restart.value <= first.value { restart } else { first }, level_converged));
        }
        refined.sort_by(|a, b| a.0.value.total_cmp(&b.0.value));
        refined.truncate(cfg.candidates.max(1));
        debug!(
            "registration level {depth}: best cost {:.5} after {} evaluations",
            refined[0].0.value, evaluations
        );
        if depth == 0 {
            converged = refined[0].1;
        }
        candidates = refined.into_iter().map(|(m, _)| m.x).collect();
    }
    let x = candidates.swap_remove(0);
    let transform = from_params(&x, center)?;
    if !converged {
        warn!("registration did not converge within {} evaluations; returning best so far", cfg.max_evaluations);
    }
    let final_level = Level::new(fixed.clone(), moving.clone(), 1.0);
    let mi = final_level.mutual_information(&transform, cfg.histogram_bins);
    Ok(Registration {
        transform,
        converged,
        mutual_information: mi,
        evaluations,
    })
}

/// Mean and max distance between where two transforms send atlas points into subject space.
pub fn landmark_mapping_error(estimate: &AffineTransform, truth: &AffineTransform, points: &[Point]) -> (f64, f64) {
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    for &p in points {
        let a = estimate.apply_inverse(p);
        let b = truth.apply_inverse(p);
        let d = (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt();
        sum += d;
        max = max.max(d);
    }
    (sum / points.len().max(1) as f64, max)
}
