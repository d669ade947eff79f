//! Cross-batch memory.
//!
//! A fixed-capacity FIFO of stage-input embeddings. Stored vectors are
//! snapshots, so adapter updates never change what is in the bank. Retrieval
//! is an exact brute-force cosine scan.

use std::collections::VecDeque;

use rayon::prelude::*;

use crate::error::{Result, SmecError};
use crate::numerics::{dot, norm};

pub const DEFAULT_CAPACITY: usize = 5000;
pub const DEFAULT_NEIGHBOR_K: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub id: String,
    pub vector: Vec<f64>,
    pub tick: u64,
    norm: f64,
}

/// One retrieval hit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor<'a> {
    pub entry: &'a MemoryEntry,
    pub sim: f64,
}

#[derive(Debug, Clone)]
pub struct MemoryBank {
    capacity: usize,
    dim: Option<usize>,
    entries: VecDeque<MemoryEntry>,
    next_tick: u64,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(SmecError::invalid("memory capacity must be at least 1"));
        }
        Ok(Self {
            capacity,
            dim: None,
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
            next_tick: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.iter()
    }

    /// Drops every entry; the dimension is re-learned from the next insert.
    pub fn clear(&mut self) {
        self.entries.clear();
        self.dim = None;
    }

    /// Appends the batch in order and evicts the oldest entries beyond
    /// capacity. Returns the number evicted.
    pub fn enqueue<I, S>(&mut self, batch: I) -> Result<usize>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        let mut evicted = 0;
        for (id, vector) in batch {
            match self.dim {
                None => {
                    if vector.is_empty() {
                        return Err(SmecError::invalid("cannot store an empty vector"));
                    }
                    self.dim = Some(vector.len());
                }
                Some(d) if d != vector.len() => {
                    return Err(SmecError::invalid(format!(
                        "memory holds dim {d}, got vector of dim {}",
                        vector.len()
                    )));
                }
                Some(_) => {}
            }
            let n = norm(&vector);
            self.entries.push_back(MemoryEntry {
                id: id.into(),
                vector,
                tick: self.next_tick,
                norm: n,
            });
            self.next_tick += 1;
            if self.entries.len() > self.capacity {
                self.entries.pop_front();
                evicted += 1;
            }
        }
        Ok(evicted)
    }

    /// The `k` entries most cosine-similar to `query`, sorted by descending
    /// similarity with older entries first on ties. Entries whose id equals
    /// `exclude_id` are skipped.
    pub fn topk_similar(&self, query: &[f64], k: usize, exclude_id: Option<&str>) -> Vec<Neighbor<'_>> {
        if k == 0 || self.entries.is_empty() {
            return Vec::new();
        }
        let qn = norm(query);
        let mut hits: Vec<Neighbor<'_>> = self
            .entries
            .iter()
            .filter(|e| exclude_id != Some(e.id.as_str()))
            .map(|e| Neighbor {
                entry: e,
                sim: cached_cosine(query, qn, &e.vector, e.norm),
            })
            .collect();
        let by_rank =
            |a: &Neighbor<'_>, b: &Neighbor<'_>| b.sim.total_cmp(&a.sim).then(a.entry.tick.cmp(&b.entry.tick));
        if hits.len() > k {
            hits.select_nth_unstable_by(k - 1, by_rank);
            hits.truncate(k);
        }
        hits.sort_by(by_rank);
        hits
    }

    /// Per batch element, its top-`k` neighbors (excluding entries that share
    /// the element's id).
    pub fn mine_neighbors(&self, batch: &[(&str, &[f64])], k: usize) -> Vec<Vec<Neighbor<'_>>> {
        batch
            .par_iter()
            .map(|(id, v)| self.topk_similar(v, k, Some(id)))
            .collect()
    }
}

fn cached_cosine(a: &[f64], na: f64, b: &[f64], nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}
