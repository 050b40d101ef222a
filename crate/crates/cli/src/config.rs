use std::path::Path;

use anyhow::{bail, Context, Result};
use drascore::contrastive::ContrastConfig;
use drascore::encoder::{Conditioning, EncoderConfig};
use drascore::evaluation::{FineTuneConfig, FineTuneMode};
use drascore::phantom::DiseaseConfig;
use drascore::registration::RegistrationConfig;
use drascore::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    pub extents: [usize; 3],
    pub spacing: f64,
    pub atlas_seed: u64,
    pub subjects: usize,
    /// Subject `i` of the training cohort uses seed `subject_seed + i`.
    pub subject_seed: u64,
    pub heldout_subjects: usize,
    pub heldout_seed: u64,
    pub disease: DiseaseConfig,
}

impl Default for PhantomSection {
    fn default() -> Self {
        Self {
            extents: [48; 3],
            spacing: 1.0,
            atlas_seed: 7,
            subjects: 64,
            subject_seed: 1000,
            heldout_subjects: 32,
            heldout_seed: 5000,
            disease: DiseaseConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationSection {
    /// Use the manifest's ground-truth transforms instead of registered ones.
    pub bypass: bool,
    pub optimizer: RegistrationConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub patch_size: usize,
    pub stride: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { patch_size: 16, stride: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub conditioning: Vec<Conditioning>,
    pub neighbor_counts: Vec<usize>,
    /// Pre-train variant checkpoints that are not on disk yet.
    pub train_missing: bool,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            conditioning: vec![Conditioning::None, Conditioning::Concat, Conditioning::HyperNet, Conditioning::LocCondConv],
            neighbor_counts: vec![0, 1, 2, 3],
            train_missing: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub seed: u64,
    pub folds: usize,
    pub probe_seeds: usize,
    pub labeled_patches: usize,
    pub healthy_per_subject: usize,
    /// Offsets (voxels, stride 2) around lesion centroids for labelled windows.
    pub train_jitter: usize,
    /// Search radius for the most-covering window of each held-out lesion.
    pub eval_jitter: usize,
    pub eval_healthy_per_subject: usize,
    pub fractions: Vec<f64>,
    pub modes: Vec<FineTuneMode>,
    pub finetune: FineTuneConfig,
    pub window_step: usize,
    pub detect_subjects: usize,
    pub ablation: AblationSection,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            seed: 0,
            folds: 5,
            probe_seeds: 3,
            labeled_patches: 200,
            healthy_per_subject: 8,
            train_jitter: 2,
            eval_jitter: 4,
            eval_healthy_per_subject: 3,
            fractions: vec![0.1, 0.25, 0.5, 1.0],
            modes: vec![FineTuneMode::Full, FineTuneMode::LinearReadout],
            finetune: FineTuneConfig::default(),
            window_step: 2,
            detect_subjects: 4,
            ablation: AblationSection::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub phantom: PhantomSection,
    pub registration: RegistrationSection,
    pub grid: GridSection,
    pub encoder: EncoderConfig,
    pub contrast: ContrastConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).context("invalid run config")?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text)
    }

    /// `--seed` drives every stochastic stage after phantom generation.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.eval.seed = seed;
        self.eval.finetune.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.disease.validate()?;
        self.registration.optimizer.validate()?;
        self.encoder.validate()?;
        self.contrast.validate()?;
        self.train.validate()?;
        if self.grid.patch_size == 0 || self.grid.stride == 0 {
            bail!("grid patch_size and stride must be positive");
        }
        if self.eval.folds < 2 || self.eval.probe_seeds == 0 {
            bail!("eval needs at least two folds and one probe seed");
        }
        if self.eval.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            bail!("annotation fractions must lie in (0, 1]");
        }
        if self.eval.window_step == 0 {
            bail!("window_step must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"train": {"stepz": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"trian": {}}"#).is_err());
    }

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = RunConfig::default().with_seed(9);
        let back = RunConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.train.seed, 9);
    }
}
