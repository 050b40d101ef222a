use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::detect::{channel, patch_verdict, DetectionModel, DETECT_CHANNELS, PROB_THRESHOLD, VOXEL_FRACTION};
use super::metrics::Confusion;
use crate::encoder::{BnMode, ForwardOptions, Network, Param};
use crate::error::{Error, Result};
use crate::phantom::{Lesion, SubjectRecord, Subtype};
use crate::registration::{extract_label_patch, extract_patch, normalize_coord};
use crate::tensor::{Tape, Tensor, Var};
use crate::trainer::{cosine_lr, sgd_step, SgdState};
use crate::volume::{Point, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineTuneMode {
    /// Encoder frozen (eval-mode batch norm); only the voxel head is trained.
    LinearReadout,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneConfig {
    /// Optimizer steps, independent of the number of labelled patches.
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Weight of lesion voxels in the voxel loss.
    pub pos_weight: f64,
    /// Zero the location routing weights and keep them at zero.
    pub zero_routing: bool,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            iterations: 750,
            batch_size: 8,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            pos_weight: 3.0,
            zero_routing: false,
        }
    }
}

/// A `d^3` window with its voxel labels (0 healthy, 1 subtype A, 2 subtype B).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPatch {
    pub subject: usize,
    /// Window centre in subject voxels.
    pub center: Point,
    /// Normalized atlas coordinate of the centre.
    pub coord: Point,
    pub data: Vec<f32>,
    pub voxel_labels: Vec<u8>,
    /// `None` for healthy windows.
    pub class: Option<Subtype>,
}

impl LabeledPatch {
    fn build(record: &SubjectRecord, subject: usize, center: [usize; 3], atlas_extents: [usize; 3], d: usize) -> Self {
        let c = center.map(|v| v as f64);
        let v = &record.volume;
        Self {
            subject,
            center: c,
            coord: normalize_coord(record.true_transform.apply(c), atlas_extents),
            data: extract_patch(v, c, d).data,
            voxel_labels: extract_label_patch(&record.lesion_labels, v.extents, c, d),
            class: None,
        }
    }

    pub fn fraction(&self, s: Subtype) -> f64 {
        self.voxel_labels.iter().filter(|&&l| l == s.label()).count() as f64 / self.voxel_labels.len() as f64
    }

    /// Planted-mask verdict: the same quarter rule the detector is judged by.
    pub fn truth(&self, s: Subtype) -> bool {
        self.fraction(s) >= VOXEL_FRACTION
    }

    fn targets(&self) -> impl Iterator<Item = f32> + '_ {
        Subtype::ALL
            .into_iter()
            .flat_map(move |s| self.voxel_labels.iter().map(move |&l| if l == s.label() { 1.0 } else { 0.0 }))
    }
}

fn window_fits(c: [usize; 3], extents: [usize; 3], d: usize) -> bool {
    (0..3).all(|a| c[a] >= d / 2 && c[a] + d - d / 2 <= extents[a])
}

fn offsets(jitter: usize) -> Vec<[i64; 3]> {
    let j = jitter as i64;
    (-j..=j)
        .step_by(2)
        .flat_map(|x| (-j..=j).step_by(2).flat_map(move |y| (-j..=j).step_by(2).map(move |z| [x, y, z])))
        .collect()
}

/// Qualifying windows of one lesion: centroid shifted by each offset, own-subtype mask
/// covering at least a quarter of the window.
fn lesion_windows(r: &SubjectRecord, i: usize, lesion: &Lesion, atlas_extents: [usize; 3], d: usize, jitter: usize) -> Vec<LabeledPatch> {
    let base = lesion.centroid.map(|v| v.round() as i64);
    let mut out = Vec::new();
    for off in offsets(jitter) {
        let c = [base[0] + off[0], base[1] + off[1], base[2] + off[2]];
        if c.iter().any(|&v| v < 0) {
            continue;
        }
        let c = c.map(|v| v as usize);
        if !window_fits(c, r.volume.extents, d) {
            continue;
        }
        let mut p = LabeledPatch::build(r, i, c, atlas_extents, d);
        if p.truth(lesion.subtype) {
            p.class = Some(lesion.subtype);
            out.push(p);
        }
    }
    out
}

/// Every qualifying window within `jitter` voxels (stride 2) of each planted lesion centroid
/// of the listed subjects.
pub fn lesion_patches(records: &[SubjectRecord], subjects: &[usize], atlas_extents: [usize; 3], d: usize, jitter: usize) -> Vec<LabeledPatch> {
    let mut out: Vec<LabeledPatch> = Vec::new();
    for &i in subjects {
        for lesion in &records[i].lesions {
            for p in lesion_windows(&records[i], i, lesion, atlas_extents, d, jitter) {
                if !out.iter().any(|q| q.subject == i && q.center == p.center) {
                    out.push(p);
                }
            }
        }
    }
    out
}

/// One window per lesion: the qualifying window within `jitter` that covers most of it.
pub fn lesion_peak_patches(records: &[SubjectRecord], subjects: &[usize], atlas_extents: [usize; 3], d: usize, jitter: usize) -> Vec<LabeledPatch> {
    let mut out: Vec<LabeledPatch> = Vec::new();
    for &i in subjects {
        for lesion in &records[i].lesions {
            let best = lesion_windows(&records[i], i, lesion, atlas_extents, d, jitter)
                .into_iter()
                .max_by(|a, b| a.fraction(lesion.subtype).total_cmp(&b.fraction(lesion.subtype)));
            if let Some(p) = best {
                if !out.iter().any(|q| q.subject == i && q.center == p.center) {
                    out.push(p);
                }
            }
        }
    }
    out
}

/// Lesion-free windows at random roi centres of the grade-0 subjects among `subjects`.
pub fn healthy_patches(
    records: &[SubjectRecord],
    subjects: &[usize],
    atlas_extents: [usize; 3],
    d: usize,
    per_subject: usize,
    seed: u64,
) -> Vec<LabeledPatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &i in subjects {
        let r = &records[i];
        if r.labels.grade != 0 {
            continue;
        }
        let v = &r.volume;
        let Ok(roi) = v.roi() else { continue };
        let candidates: Vec<usize> = (0..v.len()).filter(|&k| roi[k] && window_fits(v.coords(k), v.extents, d)).collect();
        let mut taken = 0;
        for _ in 0..per_subject * 20 {
            if taken == per_subject || candidates.is_empty() {
                break;
            }
            let c = v.coords(candidates[rng.gen_range(0..candidates.len())]);
            let p = LabeledPatch::build(r, i, c, atlas_extents, d);
            if p.voxel_labels.iter().all(|&l| l == 0) {
                out.push(p);
                taken += 1;
            }
        }
    }
    out
}

/// Up to `total` patches split evenly over subtype A, subtype B and healthy.
pub fn balanced_selection(pool: &[LabeledPatch], total: usize, seed: u64) -> Vec<LabeledPatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = [Some(Subtype::A), Some(Subtype::B), None];
    let mut out = Vec::new();
    for (k, class) in classes.iter().enumerate() {
        let quota = total / 3 + usize::from(k < total % 3);
        let mut members: Vec<&LabeledPatch> = pool.iter().filter(|p| p.class == *class).collect();
        members.shuffle(&mut rng);
        if members.len() < quota {
            warn!("only {} patches available for class {:?}, wanted {quota}", members.len(), class);
        }
        out.extend(members.into_iter().take(quota).cloned());
    }
    out
}

/// Nested annotation subsets: the first `fraction` of each class after one seeded shuffle.
pub fn annotation_subset(patches: &[LabeledPatch], fraction: f64, seed: u64) -> Vec<LabeledPatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for class in [Some(Subtype::A), Some(Subtype::B), None] {
        let mut members: Vec<&LabeledPatch> = patches.iter().filter(|p| p.class == class).collect();
        members.shuffle(&mut rng);
        let n = ((members.len() as f64 * fraction).round() as usize).clamp(usize::from(!members.is_empty()), members.len());
        out.extend(members.into_iter().take(n).cloned());
    }
    out
}

fn is_routing(p: &Param<f32>) -> bool {
    p.name.ends_with(".routing")
}

fn batch_tensor(patches: &[&LabeledPatch], d: usize) -> Result<Tensor<f32>> {
    let data = patches.iter().flat_map(|p| p.data.iter().copied()).collect();
    Tensor::new(vec![patches.len(), 1, d, d, d], data)
}

fn batches(n: usize, b: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(b).map(<[usize]>::to_vec).collect();
    // batch norm needs two samples; fold a singleton tail into the previous batch
    if out.len() > 1 && out.last().is_some_and(|c| c.len() < 2) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

/// Trains a voxel detector on top of `encoder`.
pub fn fine_tune(encoder: &Network<f32>, patches: &[LabeledPatch], mode: FineTuneMode, cfg: &FineTuneConfig) -> Result<DetectionModel<f32>> {
    if patches.len() < 2 {
        return Err(Error::invalid("fine_tune", "need at least two labelled patches"));
    }
    for class in [Some(Subtype::A), Some(Subtype::B), None] {
        if !patches.iter().any(|p| p.class == class) {
            return Err(Error::invalid("fine_tune", format!("no labelled patch of class {class:?}")));
        }
    }
    let d = (patches[0].data.len() as f64).cbrt().round() as usize;
    let mut encoder = encoder.clone();
    if cfg.zero_routing {
        encoder.zero_routing();
    }
    let mut model = DetectionModel::new(encoder, d, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x66_696e);
    let total = cfg.iterations as u64;
    let mut schedule = Vec::with_capacity(cfg.iterations);
    while schedule.len() < cfg.iterations {
        schedule.extend(batches(patches.len(), cfg.batch_size, &mut rng));
    }
    schedule.truncate(cfg.iterations);
    let mut it = 0u64;
    match mode {
        FineTuneMode::Full => {
            let mut params = std::mem::take(&mut model.encoder.params);
            let n_enc = params.len();
            params.append(&mut model.head);
            let mut state = SgdState::new(&params);
            for batch in &schedule {
                let members: Vec<&LabeledPatch> = batch.iter().map(|&i| &patches[i]).collect();
                let mut tape = Tape::new();
                let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.value.clone(), true)).collect();
                let x = tape.constant(batch_tensor(&members, d)?);
                let coords: Vec<Point> = members.iter().map(|p| p.coord).collect();
                let mut stats = Vec::new();
                let z = model.logits(&mut tape, &vars[..n_enc], &vars[n_enc..], x, &coords, BnMode::Train, &mut stats)?;
                let targets: Vec<f32> = members.iter().flat_map(|p| p.targets()).collect();
                let loss = tape.bce_with_logits_weighted(z, &targets, cfg.pos_weight as f32)?;
                let mut g = tape.backward(loss)?;
                let grads: Vec<Option<Tensor<f32>>> = vars
                    .iter()
                    .zip(&params)
                    .map(|(&v, p)| if cfg.zero_routing && is_routing(p) { None } else { g.take(v) })
                    .collect();
                sgd_step(&mut params, &grads, &mut state, cosine_lr(it, total, cfg.lr), cfg.momentum, cfg.weight_decay)?;
                model.encoder.update_running_stats(&stats)?;
                it += 1;
            }
            model.head = params.split_off(n_enc);
            model.encoder.params = params;
        }
        FineTuneMode::LinearReadout => {
            let mut fmaps = Vec::with_capacity(patches.len());
            for p in patches {
                let mut tape = Tape::new();
                let ev = model.encoder.bind(&mut tape, false);
                let x = tape.constant(batch_tensor(&[p], d)?);
                let fm = model.encoder.features(&mut tape, &ev, x, &[p.coord], &ForwardOptions::new(BnMode::Eval), &mut Vec::new())?;
                fmaps.push(tape.value(fm).clone());
            }
            let fshape = fmaps[0].shape()[1..].to_vec();
            let mut head = std::mem::take(&mut model.head);
            let mut state = SgdState::new(&head);
            for batch in &schedule {
                let mut tape = Tape::new();
                let hv: Vec<Var> = head.iter().map(|p| tape.leaf(p.value.clone(), true)).collect();
                let mut shape = vec![batch.len()];
                shape.extend(&fshape);
                let data = batch.iter().flat_map(|&i| fmaps[i].data().iter().copied()).collect();
                let fm = tape.constant(Tensor::new(shape, data)?);
                let z = model.head_logits(&mut tape, &hv, fm)?;
                let targets: Vec<f32> = batch.iter().flat_map(|&i| patches[i].targets()).collect();
                let loss = tape.bce_with_logits_weighted(z, &targets, cfg.pos_weight as f32)?;
                let mut g = tape.backward(loss)?;
                let grads: Vec<Option<Tensor<f32>>> = hv.iter().map(|&v| g.take(v)).collect();
                sgd_step(&mut head, &grads, &mut state, cosine_lr(it, total, cfg.lr), cfg.momentum, cfg.weight_decay)?;
                it += 1;
            }
            model.head = head;
        }
    }
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchEvaluation {
    /// Subtype-`s` windows against healthy windows, per subtype.
    pub per_subtype: [Confusion; DETECT_CHANNELS],
    /// Three-way (A, B, healthy) accuracy over every window.
    pub accuracy: f64,
    pub verdicts: Vec<[bool; DETECT_CHANNELS]>,
}

impl PatchEvaluation {
    pub fn f1(&self, s: Subtype) -> f64 {
        self.per_subtype[s.index()].f1()
    }
}

/// Applies the quarter rule to each window; `coords` replaces the routing inputs when given.
pub fn evaluate_patches(model: &DetectionModel<f32>, patches: &[LabeledPatch], coords: Option<&[Point]>) -> Result<PatchEvaluation> {
    let refs: Vec<&[f32]> = patches.iter().map(|p| p.data.as_slice()).collect();
    let own: Vec<Point> = patches.iter().map(|p| p.coord).collect();
    let coords = coords.unwrap_or(&own);
    if coords.len() != patches.len() {
        return Err(Error::invalid("evaluate_patches", "one coordinate per patch required"));
    }
    let probs = model.probabilities(&refs, coords)?;
    let mut per_subtype = [Confusion::default(); DETECT_CHANNELS];
    let mut verdicts = Vec::with_capacity(patches.len());
    let mut hits = 0;
    for (p, pr) in patches.iter().zip(&probs) {
        let v: [bool; DETECT_CHANNELS] = std::array::from_fn(|c| patch_verdict(channel(pr, c), PROB_THRESHOLD, VOXEL_FRACTION));
        for s in Subtype::ALL {
            if p.class.is_none() || p.class == Some(s) {
                let c = &mut per_subtype[s.index()];
                match (p.class == Some(s), v[s.index()]) {
                    (true, true) => c.tp += 1,
                    (false, true) => c.fp += 1,
                    (false, false) => c.tn += 1,
                    (true, false) => c.fn_ += 1,
                }
            }
        }
        let predicted = match v {
            [false, false] => None,
            [true, false] => Some(Subtype::A),
            [false, true] => Some(Subtype::B),
            [true, true] => {
                let above = |c: usize| channel(pr, c).iter().filter(|&&x| x > PROB_THRESHOLD).count();
                if above(0) >= above(1) { Some(Subtype::A) } else { Some(Subtype::B) }
            }
        };
        hits += usize::from(predicted == p.class);
        verdicts.push(v);
    }
    Ok(PatchEvaluation {
        per_subtype,
        accuracy: hits as f64 / patches.len().max(1) as f64,
        verdicts,
    })
}

/// Normalized coordinates of uniformly drawn atlas roi voxels.
pub fn random_roi_coords(atlas: &Volume, n: usize, seed: u64) -> Result<Vec<Point>> {
    let roi = atlas.roi()?;
    let idx: Vec<usize> = (0..atlas.len()).filter(|&i| roi[i]).collect();
    if idx.is_empty() {
        return Err(Error::invalid("random_roi_coords", "atlas roi is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let c = atlas.coords(idx[rng.gen_range(0..idx.len())]);
            normalize_coord(c.map(|v| v as f64), atlas.extents)
        })
        .collect())
}

/// One point of the annotation-efficiency curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub fraction: f64,
    pub mode: FineTuneMode,
    /// `pretrained` or `scratch`.
    pub init: String,
    pub seed: u64,
    pub patches: usize,
    pub f1_a: f64,
    pub f1_b: f64,
    pub accuracy: f64,
}

pub fn write_efficiency_csv(rows: &[EfficiencyRow], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
