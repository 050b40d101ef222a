use rayon::prelude::*;

use crate::encoder::Network;
use crate::error::{Error, Result};
use crate::registration::{extract_patch, map_landmark, AffineTransform, LandmarkGrid};
use crate::tensor::{Scalar, Tensor};
use crate::trainer::PatchCache;
use crate::volume::Volume;

/// Per-landmark representations of one subject and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationSet {
    /// `J x R`, row `j` belongs to landmark `j`.
    pub rows: Vec<Vec<f64>>,
    pub image: Vec<f64>,
}

impl RepresentationSet {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.first().map_or(0, Vec::len);
        let mut image = vec![0.0; r];
        for row in &rows {
            for (m, v) in image.iter_mut().zip(row) {
                *m += v;
            }
        }
        image.iter_mut().for_each(|m| *m /= rows.len().max(1) as f64);
        Self { rows, image }
    }
}

fn encode_rows<T: Scalar>(net: &Network<T>, patches: &[&[f32]], d: usize, p: [f64; 3]) -> Result<Vec<Vec<f64>>> {
    let data = patches.iter().flat_map(|s| s.iter()).map(|&v| T::lit(v as f64)).collect();
    let x = Tensor::new(vec![patches.len(), 1, d, d, d], data)?;
    let y = net.encode(x, &[p])?;
    let r = y.shape()[1];
    Ok(y.to_f64_vec().chunks(r).map(<[f64]>::to_vec).collect())
}

/// Encodes every landmark patch of one subject (eval-mode batch norm).
pub fn image_embedding<T: Scalar>(
    volume: &Volume,
    transform: Option<&AffineTransform>,
    grid: &LandmarkGrid,
    net: &Network<T>,
) -> Result<RepresentationSet> {
    let t = transform.ok_or_else(|| Error::invalid("image_embedding", "subject has no transform to the atlas"))?;
    let d = grid.patch_size;
    let rows = (0..grid.len())
        .into_par_iter()
        .map(|j| {
            let patch = extract_patch(volume, map_landmark(t, grid.landmarks[j]), d);
            encode_rows(net, &[&patch.data], d, grid.normalized_coords[j]).map(|mut r| r.remove(0))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RepresentationSet::from_rows(rows))
}

/// Representations of a whole cohort from cached patches, batching subjects per landmark.
pub fn cohort_embeddings<T: Scalar>(cache: &PatchCache, grid: &LandmarkGrid, net: &Network<T>) -> Result<Vec<RepresentationSet>> {
    let per_landmark = (0..grid.len())
        .into_par_iter()
        .map(|j| {
            let patches: Vec<&[f32]> = (0..cache.subjects).map(|s| cache.patch(s, j)).collect();
            encode_rows(net, &patches, grid.patch_size, grid.normalized_coords[j])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..cache.subjects)
        .map(|s| RepresentationSet::from_rows(per_landmark.iter().map(|rows| rows[s].clone()).collect()))
        .collect())
}
