//! Cohort directories: atlas and subject volumes plus a JSON manifest with seeds,
//! labels, lesions and the ground-truth subject-to-atlas affine of every subject.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::{read_volume, write_volume};
use super::{DiseaseConfig, Labels, Lesion, SubjectRecord};
use crate::error::{Error, Result};
use crate::registration::AffineTransform;
use crate::volume::Volume;

pub const MANIFEST_FILE: &str = "cohort.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtlasEntry {
    pub file: String,
    pub seed: u64,
    pub extents: [usize; 3],
    pub spacing: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub seed: u64,
    pub volume: String,
    /// Lesion label volume (0 healthy, 1 subtype A, 2 subtype B stored as intensities).
    pub lesion_labels: String,
    pub labels: Labels,
    /// Subject to atlas: nine linear coefficients row-major, then the translation.
    pub transform: [f64; 12],
    pub lesions: Vec<Lesion>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub atlas: AtlasEntry,
    pub disease: DiseaseConfig,
    pub subjects: Vec<SubjectEntry>,
}

pub fn write_cohort(dir: &Path, atlas: &Volume, atlas_seed: u64, disease: &DiseaseConfig, records: &[SubjectRecord]) -> Result<CohortManifest> {
    fs::create_dir_all(dir)?;
    write_volume(atlas, &dir.join("atlas.pvol"))?;
    let mut subjects = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let id = format!("subject_{i:03}");
        let volume = format!("{id}.pvol");
        let lesion_labels = format!("{id}_lesions.pvol");
        write_volume(&r.volume, &dir.join(&volume))?;
        let labels = Volume {
            extents: r.volume.extents,
            spacing: r.volume.spacing,
            intensities: r.lesion_labels.iter().map(|&l| l as f32).collect(),
            roi_mask: None,
        };
        write_volume(&labels, &dir.join(&lesion_labels))?;
        subjects.push(SubjectEntry {
            id,
            seed: r.seed,
            volume,
            lesion_labels,
            labels: r.labels.clone(),
            transform: r.true_transform.coefficients(),
            lesions: r.lesions.clone(),
        });
    }
    let manifest = CohortManifest {
        atlas: AtlasEntry {
            file: "atlas.pvol".into(),
            seed: atlas_seed,
            extents: atlas.extents,
            spacing: atlas.spacing,
        },
        disease: disease.clone(),
        subjects,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

impl CohortManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn load_atlas(&self, dir: &Path) -> Result<Volume> {
        read_volume(&dir.join(&self.atlas.file))
    }

    pub fn load_subject(&self, dir: &Path, i: usize) -> Result<SubjectRecord> {
        let e = self
            .subjects
            .get(i)
            .ok_or_else(|| Error::invalid("cohort", format!("subject {i} not in manifest ({})", self.subjects.len())))?;
        let volume = read_volume(&dir.join(&e.volume))?;
        let labels = read_volume(&dir.join(&e.lesion_labels))?;
        if labels.extents != volume.extents {
            return Err(Error::Format(format!("{}: lesion labels do not match the volume extents", e.id)));
        }
        Ok(SubjectRecord {
            seed: e.seed,
            volume,
            true_transform: AffineTransform::from_coefficients(&e.transform)?,
            lesion_labels: labels.intensities.iter().map(|&v| v.round() as u8).collect(),
            lesions: e.lesions.clone(),
            labels: e.labels.clone(),
        })
    }

    pub fn load_subjects(&self, dir: &Path) -> Result<Vec<SubjectRecord>> {
        (0..self.subjects.len()).map(|i| self.load_subject(dir, i)).collect()
    }
}
