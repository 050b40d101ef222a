use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const UNIT_TOLERANCE: f64 = 1e-4;

/// Where a stored key came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub landmark: usize,
    /// Training step of the enqueue; warm-fill entries carry `None`.
    pub step: Option<u64>,
    /// Subject the key was computed from, when known.
    pub subject: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Queue {
    slots: Vec<f32>,
    provenance: Vec<Option<Provenance>>,
    cursor: usize,
    fill: usize,
}

/// Per-landmark FIFO rings of unit-norm key embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    queues: Vec<Queue>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Negatives {
    /// `count x dim`, row-major.
    pub vectors: Vec<f32>,
    pub provenance: Vec<Provenance>,
    pub count: usize,
}

impl MemoryBank {
    pub fn new(landmarks: usize, capacity: usize, dim: usize) -> Result<Self> {
        if landmarks == 0 || capacity == 0 || dim == 0 {
            return Err(Error::Config("memory bank needs landmarks, capacity and dim > 0".into()));
        }
        Ok(Self {
            capacity,
            dim,
            queues: vec![
                Queue {
                    slots: vec![0.0; capacity * dim],
                    provenance: vec![None; capacity],
                    cursor: 0,
                    fill: 0,
                };
                landmarks
            ],
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn landmarks(&self) -> usize {
        self.queues.len()
    }

    pub fn fill(&self, j: usize) -> usize {
        self.queues[j].fill
    }

    fn queue(&self, j: usize) -> Result<&Queue> {
        self.queues
            .get(j)
            .ok_or_else(|| Error::invalid("memory_bank", format!("landmark {j} out of range ({})", self.queues.len())))
    }

    /// Stored vectors of queue `j`, oldest first.
    pub fn contents(&self, j: usize) -> Result<Vec<Vec<f32>>> {
        let q = self.queue(j)?;
        let start = if q.fill < self.capacity { 0 } else { q.cursor };
        Ok((0..q.fill)
            .map(|k| {
                let s = (start + k) % self.capacity;
                q.slots[s * self.dim..(s + 1) * self.dim].to_vec()
            })
            .collect())
    }

    /// Appends rows of `embeddings` (`n x dim`) to queue `j`, overwriting the oldest slots.
    pub fn enqueue(&mut self, j: usize, embeddings: &[f32], step: Option<u64>) -> Result<()> {
        self.enqueue_from(j, embeddings, step, &[])
    }

    /// As [`MemoryBank::enqueue`], tagging row `i` with `subjects[i]` when given.
    pub fn enqueue_from(&mut self, j: usize, embeddings: &[f32], step: Option<u64>, subjects: &[usize]) -> Result<()> {
        self.queue(j)?;
        let dim = self.dim;
        if !embeddings.len().is_multiple_of(dim) {
            return Err(Error::Shape {
                op: "bank_enqueue",
                axis: 1,
                expected: dim,
                actual: embeddings.len() % dim,
            });
        }
        for row in embeddings.chunks(dim) {
            let norm = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::invalid("bank_enqueue", format!("embedding norm {norm:.6} is not unit")));
            }
        }
        let cap = self.capacity;
        let q = &mut self.queues[j];
        for (i, row) in embeddings.chunks(dim).enumerate() {
            q.slots[q.cursor * dim..(q.cursor + 1) * dim].copy_from_slice(row);
            q.provenance[q.cursor] = Some(Provenance {
                landmark: j,
                step,
                subject: subjects.get(i).copied(),
            });
            q.cursor = (q.cursor + 1) % cap;
            q.fill = (q.fill + 1).min(cap);
        }
        Ok(())
    }

    /// Draws `count` distinct filled slots of queue `j` uniformly at random.
    pub fn sample(&self, j: usize, count: usize, seed: u64) -> Result<Negatives> {
        self.sample_excluding(j, count, seed, None)
    }

    /// As [`MemoryBank::sample`], skipping slots computed from `exclude_subject`.
    pub fn sample_excluding(&self, j: usize, count: usize, seed: u64, exclude_subject: Option<usize>) -> Result<Negatives> {
        let q = self.queue(j)?;
        if q.fill == 0 {
            return Err(Error::EmptyQueue(j));
        }
        let eligible: Vec<usize> = (0..q.fill)
            .filter(|&s| exclude_subject.is_none() || q.provenance[s].and_then(|p| p.subject) != exclude_subject)
            .collect();
        if count > eligible.len() {
            return Err(Error::invalid(
                "bank_sample",
                format!("{count} negatives requested but queue {j} holds {} eligible", eligible.len()),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vectors = Vec::with_capacity(count * self.dim);
        let mut provenance = Vec::with_capacity(count);
        for s in sample(&mut rng, eligible.len(), count).into_iter().map(|i| eligible[i]) {
            vectors.extend_from_slice(&q.slots[s * self.dim..(s + 1) * self.dim]);
            provenance.push(q.provenance[s].expect("filled slot"));
        }
        Ok(Negatives {
            vectors,
            provenance,
            count,
        })
    }

    /// Flat slot array (`landmarks x capacity x dim`) for checkpoints.
    pub fn slot_blob(&self) -> Vec<f32> {
        self.queues.iter().flat_map(|q| q.slots.iter().copied()).collect()
    }

    /// Cursor, fill and provenance, without the slots.
    pub fn state_json(&self) -> serde_json::Value {
        serde_json::json!({
            "capacity": self.capacity,
            "dim": self.dim,
            "cursors": self.queues.iter().map(|q| q.cursor).collect::<Vec<_>>(),
            "fills": self.queues.iter().map(|q| q.fill).collect::<Vec<_>>(),
            "provenance": self.queues.iter().map(|q| &q.provenance).collect::<Vec<_>>(),
        })
    }

    pub fn restore(state: &serde_json::Value, slots: &[f32]) -> Result<Self> {
        #[derive(Deserialize)]
        struct State {
            capacity: usize,
            dim: usize,
            cursors: Vec<usize>,
            fills: Vec<usize>,
            provenance: Vec<Vec<Option<Provenance>>>,
        }
        let s: State = serde_json::from_value(state.clone())?;
        let per = s.capacity * s.dim;
        if slots.len() != per * s.cursors.len() || s.fills.len() != s.cursors.len() || s.provenance.len() != s.cursors.len() {
            return Err(Error::Format("memory bank state does not match its slot blob".into()));
        }
        Ok(Self {
            capacity: s.capacity,
            dim: s.dim,
            queues: (0..s.cursors.len())
                .map(|j| Queue {
                    slots: slots[j * per..(j + 1) * per].to_vec(),
                    provenance: s.provenance[j].clone(),
                    cursor: s.cursors[j],
                    fill: s.fills[j],
                })
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(k: usize, dim: usize) -> Vec<f32> {
        let mut v = vec![0.0; dim];
        v[k % dim] = 1.0;
        v
    }

    #[test]
    fn fifo_keeps_newest() {
        let mut b = MemoryBank::new(2, 4, 5).unwrap();
        for k in 1..=5 {
            b.enqueue(0, &unit(k, 5), Some(k as u64)).unwrap();
        }
        let c = b.contents(0).unwrap();
        assert_eq!(c, (2..=5).map(|k| unit(k, 5)).collect::<Vec<_>>());
        assert_eq!(b.fill(0), 4);
    }

    #[test]
    fn isolation_between_landmarks() {
        let mut b = MemoryBank::new(2, 4, 3).unwrap();
        b.enqueue(1, &unit(2, 3), None).unwrap();
        let before = b.queues[1].clone();
        b.enqueue(0, &[unit(0, 3), unit(1, 3)].concat(), Some(0)).unwrap();
        assert_eq!(b.queues[1], before);
    }

    #[test]
    fn exhaustive_sample_returns_everything_once() {
        let mut b = MemoryBank::new(1, 6, 6).unwrap();
        for k in 0..4 {
            b.enqueue(0, &unit(k, 6), Some(k as u64)).unwrap();
        }
        let n = b.sample(0, 4, 9).unwrap();
        let mut rows: Vec<Vec<f32>> = n.vectors.chunks(6).map(|r| r.to_vec()).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want: Vec<Vec<f32>> = (0..4).map(|k| unit(k, 6)).collect();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(rows, want);
        assert!(n.provenance.iter().all(|p| p.landmark == 0));
    }

    #[test]
    fn exclusion_skips_the_anchor_subject() {
        let mut b = MemoryBank::new(1, 8, 4).unwrap();
        for k in 0..8 {
            b.enqueue_from(0, &unit(k, 4), Some(0), &[k % 2]).unwrap();
        }
        let n = b.sample_excluding(0, 4, 1, Some(0)).unwrap();
        assert!(n.provenance.iter().all(|p| p.subject == Some(1)));
        assert!(b.sample_excluding(0, 5, 1, Some(0)).is_err());
    }

    #[test]
    fn empty_queue_and_non_unit_vectors_rejected() {
        let mut b = MemoryBank::new(2, 4, 2).unwrap();
        assert!(matches!(b.sample(0, 1, 0), Err(Error::EmptyQueue(0))));
        assert!(b.enqueue(0, &[0.5, 0.5], None).is_err());
    }

    #[test]
    fn state_round_trip() {
        let mut b = MemoryBank::new(3, 4, 2).unwrap();
        b.enqueue(2, &[0.6, 0.8, 1.0, 0.0], Some(3)).unwrap();
        let back = MemoryBank::restore(&b.state_json(), &b.slot_blob()).unwrap();
        assert_eq!(back, b);
    }
}
