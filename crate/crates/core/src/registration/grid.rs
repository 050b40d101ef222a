use serde::{Deserialize, Serialize};

use super::AffineTransform;
use crate::error::{Error, Result};
use crate::volume::{sample_trilinear, Point, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkGrid {
    pub extents: [usize; 3],
    pub patch_size: usize,
    pub stride: usize,
    pub neighbor_count: usize,
    pub landmarks: Vec<Point>,
    pub neighbors: Vec<Vec<usize>>,
    pub normalized_coords: Vec<Point>,
}

/// Maps an atlas coordinate onto `[-1, 1]` per axis.
pub fn normalize_coord(p: Point, extents: [usize; 3]) -> Point {
    std::array::from_fn(|a| 2.0 * p[a] / (extents[a] - 1).max(1) as f64 - 1.0)
}

/// The `l` nearest other landmarks of each landmark, ties broken by index.
pub fn nearest_neighbors(landmarks: &[Point], l: usize) -> Vec<Vec<usize>> {
    landmarks
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let mut others: Vec<(f64, usize)> = landmarks
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != j)
                .map(|(k, q)| ((0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>(), k))
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            others.into_iter().take(l).map(|(_, k)| k).collect()
        })
        .collect()
}

impl LandmarkGrid {
    pub fn len(&self) -> usize {
        self.landmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.is_empty()
    }

    /// A copy of the grid with a different neighbour count.
    pub fn with_neighbor_count(&self, l: usize) -> Result<Self> {
        if l >= self.len() {
            return Err(Error::invalid(
                "landmark_grid",
                format!("{l} neighbours requested but the grid has {} landmarks", self.len()),
            ));
        }
        Ok(Self {
            neighbor_count: l,
            neighbors: nearest_neighbors(&self.landmarks, l),
            ..self.clone()
        })
    }
}

/// Grid points spaced `s` apart whose `d`-cube lies inside the volume and whose
/// centre lies in the roi (the whole volume when no mask is set).
pub fn build_landmark_grid(atlas: &Volume, d: usize, s: usize, l: usize) -> Result<LandmarkGrid> {
    let min_extent = *atlas.extents.iter().min().expect("three axes");
    if d == 0 || d > min_extent {
        return Err(Error::invalid(
            "landmark_grid",
            format!("patch size {d} must lie in [1, {min_extent}]"),
        ));
    }
    if s == 0 || s > d {
        return Err(Error::invalid("landmark_grid", format!("stride {s} must lie in [1, {d}]")));
    }
    let half = d / 2;
    let axis = |a: usize| -> Vec<usize> { (half..).step_by(s).take_while(|c| c + d - half <= atlas.extents[a]).collect() };
    let (zs, ys, xs) = (axis(0), axis(1), axis(2));
    let mut landmarks = Vec::new();
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                let inside = atlas.roi_mask.as_ref().is_none_or(|m| m[atlas.index(z, y, x)]);
                if inside {
                    landmarks.push([z as f64, y as f64, x as f64]);
                }
            }
        }
    }
    if landmarks.is_empty() {
        return Err(Error::invalid(
            "landmark_grid",
            format!("no landmark centre with a {d}^3 patch lies inside the roi"),
        ));
    }
    if l >= landmarks.len() {
        return Err(Error::invalid(
            "landmark_grid",
            format!("{l} neighbours requested but only {} landmarks exist", landmarks.len()),
        ));
    }
    Ok(LandmarkGrid {
        extents: atlas.extents,
        patch_size: d,
        stride: s,
        neighbor_count: l,
        neighbors: nearest_neighbors(&landmarks, l),
        normalized_coords: landmarks.iter().map(|&p| normalize_coord(p, atlas.extents)).collect(),
        landmarks,
    })
}

/// Atlas landmark into subject space through the inverse of the subject-to-atlas transform.
pub fn map_landmark(t: &AffineTransform, p: Point) -> Point {
    t.apply_inverse(p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub data: Vec<f32>,
    pub out_of_field_fraction: f64,
}

/// Offsets of the patch lattice along one axis: `-d/2 ..= d - 1 - d/2`.
pub fn lattice_offsets(d: usize) -> impl Iterator<Item = f64> {
    let half = (d / 2) as f64;
    (0..d).map(move |k| k as f64 - half)
}

/// Trilinearly samples the `d`-cube lattice centred on `center`; samples outside the field read −1.
pub fn extract_patch(v: &Volume, center: Point, d: usize) -> Patch {
    let mut data = Vec::with_capacity(d * d * d);
    let mut outside = 0usize;
    for oz in lattice_offsets(d) {
        for oy in lattice_offsets(d) {
            for ox in lattice_offsets(d) {
                let p = [center[0] + oz, center[1] + oy, center[2] + ox];
                if !v.contains(p) {
                    outside += 1;
                    data.push(-1.0);
                } else {
                    data.push(sample_trilinear(&v.intensities, v.extents, p, -1.0));
                }
            }
        }
    }
    Patch {
        size: d,
        out_of_field_fraction: outside as f64 / (d * d * d) as f64,
        data,
    }
}

/// Nearest-neighbour lookup of a label field on the same lattice (out of field reads 0).
pub fn extract_label_patch(labels: &[u8], extents: [usize; 3], center: Point, d: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(d * d * d);
    for oz in lattice_offsets(d) {
        for oy in lattice_offsets(d) {
            for ox in lattice_offsets(d) {
                let p = [center[0] + oz, center[1] + oy, center[2] + ox];
                let mut idx = [0usize; 3];
                let mut ok = true;
                for a in 0..3 {
                    let r = p[a].round();
                    if r < 0.0 || r > (extents[a] - 1) as f64 {
                        ok = false;
                        break;
                    }
                    idx[a] = r as usize;
                }
                out.push(if ok { labels[(idx[0] * extents[1] + idx[1]) * extents[2] + idx[2]] } else { 0 });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_volume_grid_has_27_landmarks() {
        let v = Volume::filled([48; 3], 1.0, 0.0);
        let g = build_landmark_grid(&v, 16, 16, 2).unwrap();
        assert_eq!(g.len(), 27);
        for p in &g.landmarks {
            assert!(p.iter().all(|c| [8.0, 24.0, 40.0].contains(c)));
        }
        assert_eq!(g.normalized_coords[0], normalize_coord([8.0; 3], [48; 3]));
    }

    #[test]
    fn corner_neighbours_are_axis_neighbours_by_index() {
        let v = Volume::filled([48; 3], 1.0, 0.0);
        let g = build_landmark_grid(&v, 16, 16, 2).unwrap();
        // index order is z-major: (8,8,24) is 1, (8,24,8) is 3, (24,8,8) is 9
        assert_eq!(g.neighbors[0], vec![1, 3]);
    }

    #[test]
    fn invalid_sizes_rejected() {
        let v = Volume::filled([16; 3], 1.0, 0.0);
        assert!(build_landmark_grid(&v, 17, 8, 2).is_err());
        assert!(build_landmark_grid(&v, 8, 9, 2).is_err());
        let mut tiny = v.clone();
        tiny.roi_mask = Some(vec![false; v.len()]);
        assert!(build_landmark_grid(&tiny, 8, 8, 1).is_err());
    }

    #[test]
    fn integer_centre_copies_voxels() {
        let mut v = Volume::filled([20; 3], 1.0, 0.0);
        for (i, x) in v.intensities.iter_mut().enumerate() {
            *x = (i as f32 * 0.01).sin();
        }
        let p = extract_patch(&v, [10.0, 9.0, 11.0], 4);
        assert_eq!(p.out_of_field_fraction, 0.0);
        assert_eq!(p.data[0], v.get(8, 7, 9));
        assert_eq!(p.data[63], v.get(11, 10, 12));
    }

    #[test]
    fn corner_patch_pads_with_background() {
        let v = Volume::filled([20; 3], 1.0, 0.5);
        let p = extract_patch(&v, [0.0; 3], 4);
        assert!(p.out_of_field_fraction > 0.0);
        let outside = p.data.iter().filter(|&&x| x == -1.0).count();
        assert_eq!(outside as f64 / 64.0, p.out_of_field_fraction);
    }
}
