//! Pre-training loop: landmark scheduling, two-view augmentation, query and key
//! forwards, SGD on the query, momentum update of the key, queue maintenance.

mod composite;
mod optim;

use std::path::Path;

use log::{debug, info};
use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrastive::{augment, local_loss, neighbor_loss, ContrastConfig, MemoryBank};
use crate::encoder::Checkpoint;
use crate::encoder::{momentum_update, BnMode, EncoderConfig, EncoderPair, ForwardOptions};
use crate::error::{Error, Result};
use crate::registration::{extract_patch, map_landmark, AffineTransform, LandmarkGrid};
use crate::tensor::{Scalar, Tape, Tensor};
use crate::volume::Volume;

pub use composite::{composite_grad_check, COMPOSITE_EPS};
pub use optim::{cosine_lr, sgd_step, SgdState, StepOutcome, MAX_CONSECUTIVE_ABORTS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            base_lr: 0.01,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be >= 2 for batch norm, got {}", self.batch_size)));
        }
        if !(self.base_lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("base_lr must be positive and weight_decay non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(Error::Config("sgd_momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Unaugmented `d^3` patches for every (subject, landmark), sampled at the
/// landmark mapped into subject space.
#[derive(Clone, Debug)]
pub struct PatchCache {
    pub patch_size: usize,
    pub landmarks: usize,
    pub subjects: usize,
    data: Vec<f32>,
    /// Out-of-field fraction per (subject, landmark).
    pub out_of_field: Vec<f64>,
}

impl PatchCache {
    pub fn build(subjects: &[(&Volume, &AffineTransform)], grid: &LandmarkGrid) -> Self {
        let d = grid.patch_size;
        let per: Vec<(Vec<f32>, Vec<f64>)> = subjects
            .par_iter()
            .map(|(v, t)| {
                let mut data = Vec::with_capacity(grid.len() * d * d * d);
                let mut oof = Vec::with_capacity(grid.len());
                for &p in &grid.landmarks {
                    let patch = extract_patch(v, map_landmark(t, p), d);
                    data.extend_from_slice(&patch.data);
                    oof.push(patch.out_of_field_fraction);
                }
                (data, oof)
            })
            .collect();
        let mut data = Vec::with_capacity(per.len() * grid.len() * d * d * d);
        let mut out_of_field = Vec::new();
        for (p, o) in per {
            data.extend(p);
            out_of_field.extend(o);
        }
        Self {
            patch_size: d,
            landmarks: grid.len(),
            subjects: subjects.len(),
            data,
            out_of_field,
        }
    }

    pub fn patch(&self, subject: usize, landmark: usize) -> &[f32] {
        let n = self.patch_size.pow(3);
        let at = (subject * self.landmarks + landmark) * n;
        &self.data[at..at + n]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub landmark: usize,
    pub loss_local: f64,
    pub loss_neighbor: f64,
    pub lr: f64,
}

pub fn write_log_csv(logs: &[StepLog], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for l in logs {
        w.serialize(l)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log_csv(path: &Path) -> Result<Vec<StepLog>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

fn stack<T: Scalar>(patches: &[Vec<f32>], d: usize) -> Result<Tensor<T>> {
    let data = patches.iter().flatten().map(|&v| T::lit(v as f64)).collect();
    Tensor::new(vec![patches.len(), 1, d, d, d], data)
}

pub struct Trainer<T: Scalar> {
    pub pair: EncoderPair<T>,
    pub optimizer: SgdState<T>,
    pub bank: MemoryBank,
    pub grid: LandmarkGrid,
    pub config: TrainConfig,
    pub contrast: ContrastConfig,
    pub step: u64,
    cache: PatchCache,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl<T: Scalar> Trainer<T> {
    /// Initializes both encoders from `config.seed` and warm-fills every queue with
    /// key embeddings of the unaugmented patches.
    pub fn new(
        encoder: &EncoderConfig,
        grid: &LandmarkGrid,
        cache: PatchCache,
        config: TrainConfig,
        contrast: ContrastConfig,
    ) -> Result<Self> {
        config.validate()?;
        contrast.validate()?;
        if cache.subjects < 2 {
            return Err(Error::Config("pre-training needs at least two subjects".into()));
        }
        if config.batch_size > cache.subjects {
            return Err(Error::Config(format!(
                "batch_size {} exceeds the {} subjects available",
                config.batch_size, cache.subjects
            )));
        }
        if cache.landmarks != grid.len() || cache.patch_size != grid.patch_size {
            return Err(Error::Config("patch cache does not match the landmark grid".into()));
        }
        let grid = if grid.neighbor_count == contrast.neighbors {
            grid.clone()
        } else {
            grid.with_neighbor_count(contrast.neighbors)?
        };
        let pair = EncoderPair::new(encoder, config.seed, contrast.key_momentum)?;
        let optimizer = SgdState::new(&pair.query.params);
        let bank = MemoryBank::new(grid.len(), contrast.queue_capacity, encoder.embedding_dim)?;
        let mut t = Self {
            pair,
            optimizer,
            bank,
            grid,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x7261_696e),
            config,
            contrast,
            step: 0,
            cache,
            order: Vec::new(),
            cursor: 0,
        };
        t.warm_fill()?;
        Ok(t)
    }

    fn key_embeddings(&self, patches: &[Vec<f32>], landmark: usize) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.pair.key.bind(&mut tape, false);
        let x = tape.constant(stack(patches, self.cache.patch_size)?);
        let out = self.pair.key.forward(
            &mut tape,
            &vars,
            x,
            &[self.grid.normalized_coords[landmark]],
            &ForwardOptions::new(BnMode::TrainFrozen),
        )?;
        Ok(tape.value(out.embedding).clone())
    }

    fn warm_fill(&mut self) -> Result<()> {
        let n = self.cache.subjects;
        let b = self.config.batch_size;
        let mut chunks: Vec<std::ops::Range<usize>> = (0..n).step_by(b).map(|s| s..(s + b).min(n)).collect();
        if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
            let tail = chunks.pop().expect("non-empty");
            chunks.last_mut().expect("non-empty").end = tail.end;
        }
        for j in 0..self.grid.len() {
            for c in &chunks {
                let patches: Vec<Vec<f32>> = c.clone().map(|s| self.cache.patch(s, j).to_vec()).collect();
                let k = self.key_embeddings(&patches, j)?;
                let flat: Vec<f32> = k.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
                let subjects: Vec<usize> = c.clone().collect();
                self.bank.enqueue_from(j, &flat, None, &subjects)?;
            }
        }
        Ok(())
    }

    fn next_landmark(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order = (0..self.grid.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    /// One optimization step. Aborted steps (non-finite values) are logged with NaN losses.
    pub fn step(&mut self) -> Result<StepLog> {
        let t = self.step;
        let lr = cosine_lr(t, self.config.steps, self.config.base_lr);
        let j = self.next_landmark();
        let b = self.config.batch_size;
        let subjects: Vec<usize> = sample(&mut self.rng, self.cache.subjects, b).into_vec();
        let neighbors = self.grid.neighbors[j].clone();
        // views: query, key, then one per neighbour
        let views = 2 + neighbors.len();
        let seeds: Vec<u64> = (0..b * views).map(|_| self.rng.gen()).collect();
        let neg_seeds: Vec<u64> = (0..b).map(|_| self.rng.gen()).collect();

        let d = self.cache.patch_size;
        let aug = &self.contrast.augmentation;
        let cache = &self.cache;
        let augmented: Vec<Vec<f32>> = (0..b * views)
            .into_par_iter()
            .map(|i| {
                let (s, v) = (subjects[i / views], i % views);
                let landmark = if v < 2 { j } else { neighbors[v - 2] };
                augment(cache.patch(s, landmark), d, seeds[i], aug)
            })
            .collect();
        let view = |v: usize| -> Vec<Vec<f32>> { (0..b).map(|s| augmented[s * views + v].clone()).collect() };

        let k_plus = self.key_embeddings(&view(1), j)?;
        let e = self.pair.key.config.embedding_dim;
        let kn = self.contrast.negatives;
        let mut negatives = Vec::with_capacity(b);
        for (i, &s) in subjects.iter().enumerate() {
            let n = self.bank.sample_excluding(j, kn, neg_seeds[i], Some(s))?;
            debug_assert!(n.provenance.iter().all(|p| p.landmark == j && p.step.is_none_or(|st| st < t)));
            negatives.push(n.vectors.iter().map(|&v| T::lit(v as f64)).collect::<Vec<T>>());
        }
        debug_assert_eq!(negatives.iter().map(Vec::len).sum::<usize>(), b * kn * e);

        let result = self.optimize(j, &view(0), &neighbors, &view, &k_plus, &negatives, lr);
        let (loss_local, loss_neighbor) = match result {
            Ok(Some(l)) => l,
            Ok(None) => (f64::NAN, f64::NAN),
            Err(Error::NonFinite(op)) => {
                self.optimizer.abort(&format!("non-finite {op}"))?;
                (f64::NAN, f64::NAN)
            }
            Err(other) => return Err(other),
        };
        if loss_local.is_finite() {
            let flat: Vec<f32> = k_plus.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
            self.bank.enqueue_from(j, &flat, Some(t), &subjects)?;
        }
        self.step += 1;
        let log = StepLog {
            step: t,
            landmark: j,
            loss_local,
            loss_neighbor,
            lr,
        };
        debug!("step {t} landmark {j}: local {loss_local:.4} neighbour {loss_neighbor:.4} lr {lr:.5}");
        Ok(log)
    }

    /// Forward, backward and update for one batch. Returns `None` when the update was aborted.
    #[allow(clippy::too_many_arguments)]
    fn optimize(
        &mut self,
        j: usize,
        anchors: &[Vec<f32>],
        neighbors: &[usize],
        view: &dyn Fn(usize) -> Vec<Vec<f32>>,
        k_plus: &Tensor<T>,
        negatives: &[Vec<T>],
        lr: f64,
    ) -> Result<Option<(f64, f64)>> {
        let d = self.cache.patch_size;
        let kn = self.contrast.negatives;
        let tau = self.contrast.tau;
        let query = &self.pair.query;
        let mut tape = Tape::new();
        let vars = query.bind(&mut tape, true);
        let train = ForwardOptions::new(BnMode::Train);
        let xq = tape.constant(stack(anchors, d)?);
        let out = query.forward(&mut tape, &vars, xq, &[self.grid.normalized_coords[j]], &train)?;
        let l_local = local_loss(&mut tape, out.embedding, k_plus, negatives, kn, tau)?;
        let mut total = l_local;
        let mut loss_neighbor = 0.0;
        if !neighbors.is_empty() {
            let mut rs = Vec::with_capacity(neighbors.len());
            for (n, &l) in neighbors.iter().enumerate() {
                let x = tape.constant(stack(&view(2 + n), d)?);
                let o = query.forward(&mut tape, &vars, x, &[self.grid.normalized_coords[l]], &train)?;
                rs.push(o.embedding);
            }
            let l_neighbor = neighbor_loss(&mut tape, &rs, k_plus, negatives, kn, tau)?;
            loss_neighbor = tape.value(l_neighbor).item().to_f64().unwrap_or(f64::NAN);
            total = tape.add(l_local, l_neighbor)?;
        }
        let loss_local = tape.value(l_local).item().to_f64().unwrap_or(f64::NAN);
        let mut grads = tape.backward(total)?;
        let grads: Vec<Option<Tensor<T>>> = vars.iter().map(|&v| grads.take(v)).collect();
        let stats = out.batch_stats;
        let outcome = sgd_step(
            &mut self.pair.query.params,
            &grads,
            &mut self.optimizer,
            lr,
            self.config.sgd_momentum,
            self.config.weight_decay,
        )?;
        if outcome == StepOutcome::Aborted {
            return Ok(None);
        }
        self.pair.query.update_running_stats(&stats)?;
        momentum_update(&self.pair.query, &mut self.pair.key, self.pair.momentum)?;
        Ok(Some((loss_local, loss_neighbor)))
    }

    /// Runs the remaining steps up to `config.steps`, calling `on_step` after each.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self, &StepLog) -> Result<()>) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        while self.step < self.config.steps {
            let log = self.step()?;
            on_step(self, &log)?;
            if self.step.is_multiple_of(100) {
                info!("step {} / {}: loss {:.4}", self.step, self.config.steps, log.loss_local + log.loss_neighbor);
            }
            logs.push(log);
        }
        Ok(logs)
    }

    /// Query and key networks, optimizer velocities and the bank, all as f32 blobs.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let q = self.pair.query.cast::<f32>();
        let mut c = Checkpoint::new(self.pair.query.config.clone(), self.grid.patch_size, self.step, self.pair.momentum);
        c.insert_network("q/", &q)?;
        c.insert_network("k/", &self.pair.key.cast::<f32>())?;
        for (p, v) in q.params.iter().zip(&self.optimizer.velocity) {
            c.insert(format!("opt/v/{}", p.name), v.shape().to_vec(), v.data().iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect())?;
        }
        let slots = self.bank.slot_blob();
        c.insert("bank/slots", vec![slots.len()], slots)?;
        c.header.meta = serde_json::json!({
            "train": self.config,
            "contrast": self.contrast,
            "optimizer_step": self.optimizer.step,
            "bank": self.bank.state_json(),
            "landmarks": self.grid.len(),
            "subjects": self.cache.subjects,
        });
        Ok(c)
    }
}
