use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use drascore::encoder::{read_checkpoint, write_checkpoint, Checkpoint, Network};
use drascore::evaluation::{
    annotation_subset, assign_folds, balanced_selection, cohort_embeddings, dense_detect, dice, evaluate_patches, fine_tune,
    healthy_patches, lesion_patches, lesion_peak_patches, location_perturbation, probe_variants, write_efficiency_csv,
    write_mid_axial_pgm, AblationTable, DetectionModel, EfficiencyRow, FineTuneMode, LabeledPatch, ProbeTask,
};
use drascore::phantom::{generate_atlas, generate_subject, write_cohort, write_volume, CohortManifest, SubjectRecord, Subtype};
use drascore::registration::{
    build_landmark_grid, landmark_mapping_error, register_affine, AffineTransform, LandmarkGrid, TransformFile, TransformProvenance,
};
use drascore::tensor::op_suite;
use drascore::trainer::{composite_grad_check, write_log_csv, PatchCache, Trainer, COMPOSITE_EPS};
use drascore::volume::{Point, Volume};
use drascore::Error;
use log::info;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;

pub const VERSION: &str = concat!("drascore ", env!("CARGO_PKG_VERSION"));

/// Output directory of one subcommand. Holds the resolved config, the artifacts and a manifest.
pub struct Stage {
    pub dir: PathBuf,
    command: &'static str,
    artifacts: Vec<String>,
}

#[derive(Serialize)]
struct StageManifest<'a> {
    tool: &'a str,
    command: &'a str,
    artifacts: &'a [String],
}

#[derive(Serialize)]
struct ResolvedConfig<'a> {
    version: &'a str,
    config: &'a RunConfig,
}

impl Stage {
    pub fn begin(out: &Path, command: &'static str, cfg: &RunConfig) -> Result<Self> {
        let dir = out.join(command);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let resolved = ResolvedConfig { version: VERSION, config: cfg };
        fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&resolved)?)?;
        Ok(Self {
            dir,
            command,
            artifacts: Vec::new(),
        })
    }

    /// Path of an artifact inside the stage directory, recorded in the manifest.
    pub fn artifact(&mut self, rel: &str) -> PathBuf {
        self.artifacts.push(rel.to_string());
        self.dir.join(rel)
    }

    pub fn finish(self) -> Result<PathBuf> {
        let m = StageManifest {
            tool: VERSION,
            command: self.command,
            artifacts: &self.artifacts,
        };
        fs::write(self.dir.join("manifest.json"), serde_json::to_vec_pretty(&m)?)?;
        Ok(self.dir)
    }
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path).into())
    }
}

pub struct Cohort {
    pub dir: PathBuf,
    pub manifest: CohortManifest,
    pub records: Vec<SubjectRecord>,
}

pub const TRAINING: &str = "cohort";
pub const HELDOUT: &str = "heldout";

pub fn load_cohort(out: &Path, which: &str) -> Result<Cohort> {
    let dir = out.join("generate").join(which);
    let manifest = CohortManifest::read(&dir)?;
    let records = manifest.load_subjects(&dir)?;
    Ok(Cohort { dir, manifest, records })
}

pub fn load_atlas(out: &Path) -> Result<Volume> {
    let dir = out.join("generate").join(TRAINING);
    Ok(CohortManifest::read(&dir)?.load_atlas(&dir)?)
}

pub fn load_grid(out: &Path) -> Result<LandmarkGrid> {
    let path = require(out.join("grid").join("grid.json"))?;
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Subject-to-atlas transforms: registered ones from `register`, or the planted truth in bypass mode.
pub fn load_transforms(out: &Path, cfg: &RunConfig, which: &str, cohort: &Cohort) -> Result<Vec<AffineTransform>> {
    if cfg.registration.bypass {
        return Ok(cohort.records.iter().map(|r| r.true_transform.clone()).collect());
    }
    cohort
        .manifest
        .subjects
        .iter()
        .map(|e| {
            let path = require(out.join("register").join(which).join(format!("{}.json", e.id)))?;
            let file: TransformFile = serde_json::from_slice(&fs::read(path)?)?;
            Ok(file.transform()?)
        })
        .collect()
}

pub fn patch_cache(cohort: &Cohort, transforms: &[AffineTransform], grid: &LandmarkGrid) -> PatchCache {
    let pairs: Vec<(&Volume, &AffineTransform)> = cohort.records.iter().map(|r| &r.volume).zip(transforms).collect();
    PatchCache::build(&pairs, grid)
}

pub fn load_checkpoint(out: &Path) -> Result<Checkpoint> {
    Ok(read_checkpoint(&out.join("pretrain").join("checkpoint.dras"))?)
}

pub fn load_detector(out: &Path) -> Result<DetectionModel<f32>> {
    let c = read_checkpoint(&out.join("finetune").join("detector.dras"))?;
    Ok(DetectionModel::<f32>::from_checkpoint(&c)?)
}

/// Points at 1/6, 1/2 and 5/6 of each axis: the 27-point landmark lattice.
pub fn lattice27(extents: [usize; 3]) -> Vec<Point> {
    let at = |a: usize| [1.0, 3.0, 5.0].map(|k| (k * extents[a] as f64 / 6.0).floor());
    let (z, y, x) = (at(0), at(1), at(2));
    let mut pts = Vec::with_capacity(27);
    for &a in &z {
        for &b in &y {
            for &c in &x {
                pts.push([a, b, c]);
            }
        }
    }
    pts
}

fn generate_records(atlas: &Volume, cfg: &RunConfig, n: usize, seed: u64) -> Result<Vec<SubjectRecord>> {
    Ok((0..n)
        .into_par_iter()
        .map(|i| generate_subject(atlas, seed + i as u64, &cfg.phantom.disease))
        .collect::<drascore::Result<Vec<_>>>()?)
}

#[derive(Serialize)]
struct LabelRow<'a> {
    cohort: &'a str,
    id: &'a str,
    seed: u64,
    capacity: f64,
    grade: u8,
    lesion_fraction: f64,
    burden_a: f64,
    burden_b: f64,
    lesions: usize,
}

pub fn generate(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let mut stage = Stage::begin(out, "generate", cfg)?;
    let p = &cfg.phantom;
    let atlas = generate_atlas(p.extents, p.spacing, p.atlas_seed)?;
    let mut labels = csv::Writer::from_path(stage.artifact("labels.csv"))?;
    for (which, n, seed) in [(TRAINING, p.subjects, p.subject_seed), (HELDOUT, p.heldout_subjects, p.heldout_seed)] {
        let records = generate_records(&atlas, cfg, n, seed)?;
        let manifest = write_cohort(&stage.dir.join(which), &atlas, p.atlas_seed, &p.disease, &records)?;
        stage.artifact(&format!("{which}/cohort.json"));
        for (e, r) in manifest.subjects.iter().zip(&records) {
            labels.serialize(LabelRow {
                cohort: which,
                id: &e.id,
                seed: r.seed,
                capacity: r.labels.capacity,
                grade: r.labels.grade,
                lesion_fraction: r.labels.lesion_fraction,
                burden_a: r.labels.subtype_burden[0],
                burden_b: r.labels.subtype_burden[1],
                lesions: r.lesions.len(),
            })?;
        }
        info!("generated {n} {which} subjects");
    }
    labels.flush()?;
    stage.finish()
}

#[derive(Serialize)]
struct RegistrationRow {
    cohort: String,
    id: String,
    converged: bool,
    mean_error: f64,
    max_error: f64,
}

pub fn register(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let atlas = load_atlas(out)?;
    let mut stage = Stage::begin(out, "register", cfg)?;
    let points = lattice27(atlas.extents);
    let mut rows = Vec::new();
    for which in [TRAINING, HELDOUT] {
        let cohort = load_cohort(out, which)?;
        fs::create_dir_all(stage.dir.join(which))?;
        let results = cohort
            .records
            .par_iter()
            .map(|r| register_affine(&r.volume, &atlas, &cfg.registration.optimizer))
            .collect::<drascore::Result<Vec<_>>>()?;
        for ((e, r), reg) in cohort.manifest.subjects.iter().zip(&cohort.records).zip(&results) {
            let file = TransformFile::new(&reg.transform, TransformProvenance::Registered, reg.converged);
            fs::write(stage.artifact(&format!("{which}/{}.json", e.id)), serde_json::to_vec_pretty(&file)?)?;
            let (mean_error, max_error) = landmark_mapping_error(&reg.transform, &r.true_transform, &points);
            rows.push(RegistrationRow {
                cohort: which.into(),
                id: e.id.clone(),
                converged: reg.converged,
                mean_error,
                max_error,
            });
        }
        info!("registered {} {which} subjects", cohort.records.len());
    }
    let mut w = csv::Writer::from_path(stage.artifact("errors.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    stage.finish()
}

pub fn grid(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let atlas = load_atlas(out)?;
    let mut stage = Stage::begin(out, "grid", cfg)?;
    let g = build_landmark_grid(&atlas, cfg.grid.patch_size, cfg.grid.stride, cfg.contrast.neighbors)?;
    info!("{} landmarks", g.len());
    fs::write(stage.artifact("grid.json"), serde_json::to_vec_pretty(&g)?)?;
    stage.finish()
}

/// Runs pre-training and returns the trainer, writing periodic checkpoints through `save`.
fn run_pretraining(cfg: &RunConfig, grid: &LandmarkGrid, cache: PatchCache, mut save: impl FnMut(&Checkpoint, u64) -> Result<()>) -> Result<(Trainer<f32>, Vec<drascore::trainer::StepLog>)> {
    let mut trainer: Trainer<f32> = Trainer::new(&cfg.encoder, grid, cache, cfg.train.clone(), cfg.contrast.clone())?;
    let every = cfg.train.checkpoint_every;
    let mut pending: Option<drascore::Error> = None;
    let logs = trainer.run(|t, log| {
        if every > 0 && (log.step + 1) % every == 0 {
            let c = t.checkpoint()?;
            if let Err(e) = save(&c, log.step + 1) {
                pending = Some(drascore::Error::Config(format!("saving checkpoint: {e}")));
            }
        }
        Ok(())
    })?;
    if let Some(e) = pending {
        return Err(e.into());
    }
    Ok((trainer, logs))
}

pub fn pretrain(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let grid = load_grid(out)?;
    let cohort = load_cohort(out, TRAINING)?;
    let transforms = load_transforms(out, cfg, TRAINING, &cohort)?;
    let mut stage = Stage::begin(out, "pretrain", cfg)?;
    let cache = patch_cache(&cohort, &transforms, &grid);
    let dir = stage.dir.clone();
    let (trainer, logs) = run_pretraining(cfg, &grid, cache, |c, step| Ok(write_checkpoint(c, &dir.join(format!("checkpoint_{step:06}.dras")))?))?;
    write_log_csv(&logs, &stage.artifact("train_log.csv"))?;
    write_checkpoint(&trainer.checkpoint()?, &stage.artifact("checkpoint.dras"))?;
    stage.finish()
}

fn probe_targets(cohort: &Cohort) -> Vec<(String, ProbeTask, Vec<f64>)> {
    vec![
        ("capacity".into(), ProbeTask::Continuous, cohort.records.iter().map(|r| r.labels.capacity).collect()),
        ("grade".into(), ProbeTask::Ordinal, cohort.records.iter().map(|r| r.labels.grade as f64).collect()),
    ]
}

fn image_features(cache: &PatchCache, grid: &LandmarkGrid, net: &Network<f32>) -> Result<Vec<Vec<f64>>> {
    Ok(cohort_embeddings(cache, grid, net)?.into_iter().map(|r| r.image).collect())
}

fn probe_all_seeds(cfg: &RunConfig, variants: &[(String, Option<Vec<Vec<f64>>>)], targets: &[(String, ProbeTask, Vec<f64>)]) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    for k in 0..cfg.eval.probe_seeds as u64 {
        table.values.extend(probe_variants(variants, targets, cfg.eval.folds, cfg.eval.seed + k)?.values);
    }
    Ok(table)
}

pub fn probe(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let ck = load_checkpoint(out)?;
    let grid = load_grid(out)?;
    let cohort = load_cohort(out, TRAINING)?;
    let transforms = load_transforms(out, cfg, TRAINING, &cohort)?;
    let mut stage = Stage::begin(out, "probe", cfg)?;
    let cache = patch_cache(&cohort, &transforms, &grid);
    let trained = ck.network("q/")?;
    // the untrained baseline is the exact initialization pre-training started from
    let random: Network<f32> = Network::new(&ck.header.encoder, cfg.train.seed)?;
    let variants = vec![
        ("checkpoint".to_string(), Some(image_features(&cache, &grid, &trained)?)),
        ("random_init".to_string(), Some(image_features(&cache, &grid, &random)?)),
    ];
    let table = probe_all_seeds(cfg, &variants, &probe_targets(&cohort))?;
    table.write_folds_csv(&stage.artifact("folds.csv"))?;
    table.write_summary_csv(&stage.artifact("summary.csv"))?;
    for r in table.summary() {
        info!("{} {}: {:.4} ± {:.4}", r.variant, r.metric, r.mean.unwrap_or(f64::NAN), r.sd.unwrap_or(f64::NAN));
    }
    stage.finish()
}

/// Balanced labelled windows from the training cohort.
pub fn labeled_set(cfg: &RunConfig, cohort: &Cohort) -> Vec<LabeledPatch> {
    let e = &cfg.eval;
    let all: Vec<usize> = (0..cohort.records.len()).collect();
    let d = cfg.grid.patch_size;
    let extents = cohort.manifest.atlas.extents;
    let mut pool = lesion_patches(&cohort.records, &all, extents, d, e.train_jitter);
    pool.extend(healthy_patches(&cohort.records, &all, extents, d, e.healthy_per_subject, e.seed));
    balanced_selection(&pool, e.labeled_patches, e.seed)
}

/// Evaluation windows from the held-out cohort: one per planted lesion plus healthy windows.
pub fn evaluation_set(cfg: &RunConfig, heldout: &Cohort) -> Vec<LabeledPatch> {
    let e = &cfg.eval;
    let all: Vec<usize> = (0..heldout.records.len()).collect();
    let d = cfg.grid.patch_size;
    let extents = heldout.manifest.atlas.extents;
    let mut set = lesion_peak_patches(&heldout.records, &all, extents, d, e.eval_jitter);
    set.extend(healthy_patches(&heldout.records, &all, extents, d, e.eval_healthy_per_subject, e.seed ^ 0x6576_616c));
    set
}

pub fn finetune(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let ck = load_checkpoint(out)?;
    let cohort = load_cohort(out, TRAINING)?;
    let heldout = load_cohort(out, HELDOUT)?;
    let mut stage = Stage::begin(out, "finetune", cfg)?;
    let labeled = labeled_set(cfg, &cohort);
    let eval = evaluation_set(cfg, &heldout);
    info!("{} labelled windows, {} evaluation windows", labeled.len(), eval.len());
    let pretrained = ck.network("q/")?;
    let scratch: Network<f32> = Network::new(&ck.header.encoder, cfg.train.seed)?;
    let top = cfg.eval.fractions.iter().copied().fold(0.0, f64::max);
    let seed = cfg.eval.finetune.seed;
    let mut rows = Vec::new();
    for &mode in &cfg.eval.modes {
        for (init, net) in [("pretrained", &pretrained), ("scratch", &scratch)] {
            for &fraction in &cfg.eval.fractions {
                let subset = annotation_subset(&labeled, fraction, seed);
                let model = fine_tune(net, &subset, mode, &cfg.eval.finetune)?;
                let ev = evaluate_patches(&model, &eval, None)?;
                info!(
                    "{mode:?} {init} {fraction}: f1 A {:.3} B {:.3} accuracy {:.3}",
                    ev.f1(Subtype::A),
                    ev.f1(Subtype::B),
                    ev.accuracy
                );
                rows.push(EfficiencyRow {
                    fraction,
                    mode,
                    init: init.into(),
                    seed,
                    patches: subset.len(),
                    f1_a: ev.f1(Subtype::A),
                    f1_b: ev.f1(Subtype::B),
                    accuracy: ev.accuracy,
                });
                if mode == FineTuneMode::Full && init == "pretrained" && fraction == top {
                    write_checkpoint(&model.to_checkpoint()?, &stage.artifact("detector.dras"))?;
                }
            }
        }
    }
    write_efficiency_csv(&rows, &stage.artifact("efficiency.csv"))?;
    stage.finish()
}

#[derive(Serialize)]
struct PatchMetricRow {
    subtype: String,
    tp: usize,
    fp: usize,
    tn: usize,
    fn_: usize,
    precision: f64,
    recall: f64,
    f1: f64,
}

#[derive(Serialize)]
struct DiceRow {
    id: String,
    dice: f64,
    dice_a: f64,
    dice_b: f64,
    planted: usize,
    predicted: usize,
    windows: usize,
    skipped: usize,
}

/// Predicted labels packed per voxel: bit 0 subtype A, bit 1 subtype B.
pub fn prediction_code(mask: &[Vec<bool>], i: usize) -> u8 {
    mask.iter().enumerate().map(|(c, m)| u8::from(m[i]) << c).sum()
}

pub fn detect(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let model = load_detector(out)?;
    let heldout = load_cohort(out, HELDOUT)?;
    let transforms = load_transforms(out, cfg, HELDOUT, &heldout)?;
    let mut stage = Stage::begin(out, "detect", cfg)?;
    let eval = evaluation_set(cfg, &heldout);
    let ev = evaluate_patches(&model, &eval, None)?;
    let mut w = csv::Writer::from_path(stage.artifact("patch_metrics.csv"))?;
    for s in Subtype::ALL {
        let c = ev.per_subtype[s.index()];
        w.serialize(PatchMetricRow {
            subtype: format!("{s:?}"),
            tp: c.tp,
            fp: c.fp,
            tn: c.tn,
            fn_: c.fn_,
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
        })?;
    }
    w.flush()?;
    fs::write(stage.artifact("patch_accuracy.json"), serde_json::to_vec_pretty(&serde_json::json!({ "accuracy": ev.accuracy, "windows": eval.len() }))?)?;

    let extents = heldout.manifest.atlas.extents;
    let mut w = csv::Writer::from_path(stage.artifact("dice.csv"))?;
    let chosen = heldout.records.iter().enumerate().filter(|(_, r)| !r.lesions.is_empty()).take(cfg.eval.detect_subjects);
    for (i, r) in chosen {
        let id = &heldout.manifest.subjects[i].id;
        let det = dense_detect(&r.volume, &transforms[i], extents, &model, cfg.eval.window_step)?;
        let planted: Vec<bool> = r.lesion_labels.iter().map(|&l| l > 0).collect();
        let union = det.union_mask();
        let pred = Volume {
            extents: r.volume.extents,
            spacing: r.volume.spacing,
            intensities: (0..r.volume.len()).map(|v| prediction_code(&det.mask, v) as f32).collect(),
            roi_mask: None,
        };
        write_volume(&pred, &stage.artifact(&format!("{id}_pred.pvol")))?;
        write_mid_axial_pgm(&r.volume, &planted, &union, &stage.artifact(&format!("{id}_mid_axial.pgm")))?;
        let row = DiceRow {
            id: id.clone(),
            dice: dice(&union, &planted),
            dice_a: dice(&det.mask[0], &r.lesion_mask(Subtype::A)),
            dice_b: dice(&det.mask[1], &r.lesion_mask(Subtype::B)),
            planted: planted.iter().filter(|&&b| b).count(),
            predicted: union.iter().filter(|&&b| b).count(),
            windows: det.windows.len(),
            skipped: det.skipped,
        };
        info!("{id}: dice {:.3} over {} windows ({} skipped)", row.dice, row.windows, row.skipped);
        w.serialize(row)?;
    }
    w.flush()?;
    stage.finish()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationPart {
    Perturbation,
    Conditioning,
    Neighbors,
}

impl std::str::FromStr for AblationPart {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "perturbation" => Ok(Self::Perturbation),
            "conditioning" => Ok(Self::Conditioning),
            "neighbors" => Ok(Self::Neighbors),
            _ => Err(format!("unknown ablation part {s:?} (perturbation, conditioning, neighbors)")),
        }
    }
}

/// Fold id of every evaluation window, folds partitioning held-out subjects.
pub fn subject_folds(patches: &[LabeledPatch], subjects: usize, folds: usize, seed: u64) -> Vec<usize> {
    let by_subject = assign_folds(&vec![0; subjects], folds, seed);
    patches.iter().map(|p| by_subject[p.subject]).collect()
}

fn perturbation(cfg: &RunConfig, out: &Path, stage: &mut Stage) -> Result<()> {
    let ck = load_checkpoint(out)?;
    let trained = load_detector(out)?;
    let atlas = load_atlas(out)?;
    let cohort = load_cohort(out, TRAINING)?;
    let heldout = load_cohort(out, HELDOUT)?;
    let eval = evaluation_set(cfg, &heldout);
    let folds = subject_folds(&eval, heldout.records.len(), cfg.eval.folds, cfg.eval.seed);
    let seed = cfg.eval.seed ^ 0x7065_7274;
    let with_location = location_perturbation(&trained, &eval, &folds, &atlas, seed)?;
    let mut control_cfg = cfg.eval.finetune.clone();
    control_cfg.zero_routing = true;
    let control_model = fine_tune(&ck.network("q/")?, &labeled_set(cfg, &cohort), FineTuneMode::Full, &control_cfg)?;
    let control = location_perturbation(&control_model, &eval, &folds, &atlas, seed)?;
    let mut table = with_location.table("trained");
    table.values.extend(control.table("routing_zero").values);
    table.write_folds_csv(&stage.artifact("perturbation_folds.csv"))?;
    table.write_summary_csv(&stage.artifact("perturbation_summary.csv"))?;
    let tests = serde_json::json!({ "trained": with_location.test, "routing_zero": control.test });
    fs::write(stage.artifact("perturbation_tests.json"), serde_json::to_vec_pretty(&tests)?)?;
    info!("location perturbation: trained p = {:.4}, routing-zero control p = {:.4}", with_location.test.p_value, control.test.p_value);
    Ok(())
}

/// Representations of one ablation variant: loaded, trained on demand, or absent.
fn variant_features(
    name: &str,
    variant_cfg: &RunConfig,
    cfg: &RunConfig,
    out: &Path,
    stage: &Stage,
    cache: &PatchCache,
    grid: &LandmarkGrid,
) -> Result<Option<Vec<Vec<f64>>>> {
    let path = stage.dir.join("variants").join(format!("{name}.dras"));
    let main = out.join("pretrain").join("checkpoint.dras");
    let same_as_main = variant_cfg.encoder == cfg.encoder && variant_cfg.contrast == cfg.contrast;
    let ck = if path.exists() {
        read_checkpoint(&path)?
    } else if same_as_main && main.exists() {
        read_checkpoint(&main)?
    } else if cfg.eval.ablation.train_missing {
        info!("pre-training ablation variant {name}");
        fs::create_dir_all(path.parent().expect("variants dir"))?;
        let (trainer, _) = run_pretraining(variant_cfg, grid, cache.clone(), |_, _| Ok(()))?;
        let c = trainer.checkpoint()?;
        write_checkpoint(&c, &path)?;
        c
    } else {
        log::warn!("variant {name}: no checkpoint at {}, cell marked absent", path.display());
        return Ok(None);
    };
    Ok(Some(image_features(cache, grid, &ck.network("q/")?)?))
}

fn variant_table(cfg: &RunConfig, out: &Path, stage: &mut Stage, part: AblationPart) -> Result<()> {
    let grid = load_grid(out)?;
    let cohort = load_cohort(out, TRAINING)?;
    let transforms = load_transforms(out, cfg, TRAINING, &cohort)?;
    let cache = patch_cache(&cohort, &transforms, &grid);
    let mut variants = Vec::new();
    let (file, configs): (&str, Vec<(String, RunConfig)>) = match part {
        AblationPart::Conditioning => (
            "conditioning",
            cfg.eval
                .ablation
                .conditioning
                .iter()
                .map(|&c| {
                    let mut v = cfg.clone();
                    v.encoder.conditioning = c;
                    (serde_json::to_value(c).ok().and_then(|s| s.as_str().map(String::from)).unwrap_or_default(), v)
                })
                .collect(),
        ),
        _ => (
            "neighbors",
            cfg.eval
                .ablation
                .neighbor_counts
                .iter()
                .map(|&l| {
                    let mut v = cfg.clone();
                    v.contrast.neighbors = l;
                    (format!("neighbors_{l}"), v)
                })
                .collect(),
        ),
    };
    for (name, v) in &configs {
        variants.push((name.clone(), variant_features(name, v, cfg, out, stage, &cache, &grid)?));
    }
    let table = probe_variants(&variants, &probe_targets(&cohort), cfg.eval.folds, cfg.eval.seed)?;
    table.write_folds_csv(&stage.artifact(&format!("{file}_folds.csv")))?;
    table.write_summary_csv(&stage.artifact(&format!("{file}_summary.csv")))?;
    Ok(())
}

pub fn ablate(cfg: &RunConfig, out: &Path, parts: &[AblationPart]) -> Result<PathBuf> {
    let mut stage = Stage::begin(out, "ablate", cfg)?;
    for &part in parts {
        match part {
            AblationPart::Perturbation => perturbation(cfg, out, &mut stage)?,
            p => variant_table(cfg, out, &mut stage, p)?,
        }
    }
    stage.finish()
}

#[derive(Serialize)]
struct GradRow {
    check: String,
    seed: u64,
    max_rel_err: f64,
    checked: usize,
}

/// Runs the op suite and the encoder+loss composite for `seeds` seeds; returns the worst error.
pub fn gradcheck(cfg: &RunConfig, out: &Path, seeds: u64) -> Result<f64> {
    let mut stage = Stage::begin(out, "gradcheck", cfg)?;
    let mut rows = Vec::new();
    for seed in 0..seeds {
        for (name, r) in op_suite(seed, 1e-5)? {
            rows.push(GradRow {
                check: name.into(),
                seed,
                max_rel_err: r.max_rel_err,
                checked: r.checked,
            });
        }
        let r = composite_grad_check(seed, COMPOSITE_EPS)?;
        rows.push(GradRow {
            check: "encoder_loss_composite".into(),
            seed,
            max_rel_err: r.max_rel_err,
            checked: r.checked,
        });
    }
    let mut w = csv::Writer::from_path(stage.artifact("report.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    stage.finish()?;
    Ok(rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max))
}
