//! Downstream evaluation: image-level representations, linear probes, dense
//! lesion detection, fine-tuning and the ablation runners.

mod ablation;
mod detect;
mod embedding;
mod finetune;
mod metrics;
mod probe;
mod render;

pub use embedding::{cohort_embeddings, image_embedding, RepresentationSet};
pub use metrics::{accuracy, dice, mean_sd, one_off_accuracy, r_squared, Confusion};
pub use probe::{assign_folds, linear_probe, Logistic, ProbeResult, ProbeTask, Ridge};
pub use detect::{channel, dense_detect, patch_verdict, DenseDetection, DetectionModel, WindowVerdict, DETECT_CHANNELS, PROB_THRESHOLD, VOXEL_FRACTION};
pub use finetune::{
    annotation_subset, balanced_selection, evaluate_patches, fine_tune, healthy_patches, lesion_patches, lesion_peak_patches, random_roi_coords,
    write_efficiency_csv, EfficiencyRow, FineTuneConfig, FineTuneMode, LabeledPatch, PatchEvaluation,
};
pub use ablation::{location_perturbation, one_sided_t_test, probe_variants, AblationTable, FoldValue, PerturbationResult, SummaryRow, TTest};
pub use render::{mid_axial_pgm, write_mid_axial_pgm};
