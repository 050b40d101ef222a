//! Scalar 3D fields indexed `(z, y, x)` with voxel centres at integer coordinates.

use crate::error::{Error, Result};

pub type Point = [f64; 3];

pub const MIN_EXTENT: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub extents: [usize; 3],
    /// Millimetres per voxel, isotropic.
    pub spacing: f64,
    pub intensities: Vec<f32>,
    pub roi_mask: Option<Vec<bool>>,
}

impl Volume {
    pub fn filled(extents: [usize; 3], spacing: f64, value: f32) -> Self {
        Self {
            extents,
            spacing,
            intensities: vec![value; extents.iter().product()],
            roi_mask: None,
        }
    }

    pub fn len(&self) -> usize {
        self.intensities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intensities.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.extents[1] + y) * self.extents[2] + x
    }

    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.extents[2];
        let y = (i / self.extents[2]) % self.extents[1];
        let z = i / (self.extents[1] * self.extents[2]);
        [z, y, x]
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.intensities[self.index(z, y, x)]
    }

    pub fn roi(&self) -> Result<&[bool]> {
        self.roi_mask
            .as_deref()
            .ok_or_else(|| Error::invalid("volume", "volume has no roi mask"))
    }

    pub fn roi_count(&self) -> usize {
        self.roi_mask
            .as_ref()
            .map_or(0, |m| m.iter().filter(|&&b| b).count())
    }

    pub fn contains(&self, p: Point) -> bool {
        (0..3).all(|a| p[a] >= -1e-9 && p[a] <= (self.extents[a] - 1) as f64 + 1e-9)
    }

    /// Nearest voxel index of a point, if inside the field.
    pub fn nearest(&self, p: Point) -> Option<usize> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let r = p[a].round();
            if r < 0.0 || r > (self.extents[a] - 1) as f64 {
                return None;
            }
            idx[a] = r as usize;
        }
        Some(self.index(idx[0], idx[1], idx[2]))
    }

    /// Trilinear interpolation; points outside the field return `fill`.
    pub fn sample(&self, p: Point, fill: f32) -> f32 {
        sample_trilinear(&self.intensities, self.extents, p, fill)
    }

    /// Same as [`Volume::sample`] but clamps out-of-field points to the border.
    pub fn sample_clamped(&self, p: Point) -> f32 {
        let mut q = p;
        for a in 0..3 {
            q[a] = q[a].clamp(0.0, (self.extents[a] - 1) as f64);
        }
        self.sample(q, 0.0)
    }

    /// Box-filtered 2x downsample; the mask keeps voxels where any child is set.
    pub fn downsample2(&self) -> Volume {
        let ext = [
            self.extents[0].div_ceil(2),
            self.extents[1].div_ceil(2),
            self.extents[2].div_ceil(2),
        ];
        let n: usize = ext.iter().product();
        let mut sums = vec![0f64; n];
        let mut counts = vec![0u32; n];
        let mut mask = self.roi_mask.as_ref().map(|_| vec![false; n]);
        for z in 0..self.extents[0] {
            for y in 0..self.extents[1] {
                for x in 0..self.extents[2] {
                    let j = ((z / 2) * ext[1] + y / 2) * ext[2] + x / 2;
                    let i = self.index(z, y, x);
                    sums[j] += self.intensities[i] as f64;
                    counts[j] += 1;
                    if let (Some(m), Some(src)) = (mask.as_mut(), self.roi_mask.as_ref()) {
                        m[j] |= src[i];
                    }
                }
            }
        }
        Volume {
            extents: ext,
            spacing: self.spacing * 2.0,
            intensities: sums
                .iter()
                .zip(&counts)
                .map(|(s, c)| (*s / *c as f64) as f32)
                .collect(),
            roi_mask: mask,
        }
    }
}

pub fn sample_trilinear(data: &[f32], extents: [usize; 3], p: Point, fill: f32) -> f32 {
    let mut base = [0usize; 3];
    let mut frac = [0f64; 3];
    for a in 0..3 {
        let max = (extents[a] - 1) as f64;
        if !(p[a] >= -1e-9 && p[a] <= max + 1e-9) {
            return fill;
        }
        let c = p[a].clamp(0.0, max);
        let f = c.floor();
        let mut b = f as usize;
        let mut t = c - f;
        if b >= extents[a] - 1 && extents[a] > 1 {
            b = extents[a] - 2;
            t = 1.0;
        } else if extents[a] == 1 {
            t = 0.0;
        }
        base[a] = b;
        frac[a] = t;
    }
    let [h, w] = [extents[1], extents[2]];
    let at = |z: usize, y: usize, x: usize| data[(z * h + y) * w + x] as f64;
    let step = |a: usize| if extents[a] > 1 { 1 } else { 0 };
    let (z0, y0, x0) = (base[0], base[1], base[2]);
    let (z1, y1, x1) = (z0 + step(0), y0 + step(1), x0 + step(2));
    let [tz, ty, tx] = frac;
    let c00 = at(z0, y0, x0) * (1.0 - tx) + at(z0, y0, x1) * tx;
    let c01 = at(z0, y1, x0) * (1.0 - tx) + at(z0, y1, x1) * tx;
    let c10 = at(z1, y0, x0) * (1.0 - tx) + at(z1, y0, x1) * tx;
    let c11 = at(z1, y1, x0) * (1.0 - tx) + at(z1, y1, x1) * tx;
    let c0 = c00 * (1.0 - ty) + c01 * ty;
    let c1 = c10 * (1.0 - ty) + c11 * ty;
    (c0 * (1.0 - tz) + c1 * tz) as f32
}

/// Dilates a boolean mask by a cubic structuring element of the given radius.
pub fn dilate(mask: &[bool], extents: [usize; 3], radius: usize) -> Vec<bool> {
    // separable max filter along each axis
    let mut cur = mask.to_vec();
    let strides = [extents[1] * extents[2], extents[2], 1];
    for a in 0..3 {
        let mut next = vec![false; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let c = (i / strides[a]) % extents[a];
            let lo = c.saturating_sub(radius);
            let hi = (c + radius).min(extents[a] - 1);
            let base = i - c * strides[a];
            *out = (lo..=hi).any(|k| cur[base + k * strides[a]]);
        }
        cur = next;
    }
    cur
}

/// Separable Gaussian blur with edge clamping; the kernel is truncated at 3 sigma.
pub fn gaussian_blur(data: &[f64], extents: [usize; 3], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-r..=r).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let strides = [extents[1] * extents[2], extents[2], 1];
    let mut cur = data.to_vec();
    for a in 0..3 {
        let n = extents[a] as isize;
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let c = ((i / strides[a]) % extents[a]) as isize;
            let base = i - c as usize * strides[a];
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                let k = (c + t as isize - r).clamp(0, n - 1) as usize;
                acc += w * cur[base + k * strides[a]];
            }
            *out = acc;
        }
        cur = next;
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Volume {
        let ext = [4, 5, 6];
        let mut v = Volume::filled(ext, 1.0, 0.0);
        for i in 0..v.len() {
            let [z, y, x] = v.coords(i);
            v.intensities[i] = (z as f32) * 100.0 + (y as f32) * 10.0 + x as f32;
        }
        v
    }

    #[test]
    fn trilinear_is_exact_on_grid_and_linear_between() {
        let v = ramp();
        assert_eq!(v.sample([2.0, 3.0, 4.0], -1.0), 234.0);
        assert!((v.sample([1.5, 2.25, 0.5], -1.0) - 173.0).abs() < 1e-4);
        assert_eq!(v.sample([3.0, 4.0, 5.0], -1.0), 345.0);
        assert_eq!(v.sample([-0.5, 0.0, 0.0], -1.0), -1.0);
        assert_eq!(v.sample([0.0, 0.0, 5.2], -1.0), -1.0);
    }

    #[test]
    fn dilation_grows_single_voxel_to_cube() {
        let ext = [7, 7, 7];
        let mut m = vec![false; 343];
        m[(3 * 7 + 3) * 7 + 3] = true;
        let d = dilate(&m, ext, 2);
        assert_eq!(d.iter().filter(|&&b| b).count(), 125);
    }

    #[test]
    fn blur_preserves_constants_and_mass_direction() {
        let ext = [6, 7, 8];
        let c = gaussian_blur(&vec![0.25; 336], ext, 1.3);
        assert!(c.iter().all(|v| (v - 0.25).abs() < 1e-12));
        let mut impulse = vec![0.0; 336];
        impulse[(3 * 7 + 3) * 8 + 4] = 1.0;
        let b = gaussian_blur(&impulse, ext, 0.8);
        let peak = b.iter().cloned().fold(0.0, f64::max);
        assert_eq!(peak, b[(3 * 7 + 3) * 8 + 4]);
        assert!(peak < 1.0);
    }

    #[test]
    fn downsample_averages_blocks() {
        let v = ramp();
        let d = v.downsample2();
        assert_eq!(d.extents, [2, 3, 3]);
        assert!((d.intensities[0] - 55.5).abs() < 1e-4);
    }
}
