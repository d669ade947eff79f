//! Training loops.
//!
//! Sequential mode trains one stage at a time on the frozen output of the
//! stages before it, then freezes it once validation loss stops improving.
//! Joint (MRL) mode trains one full-dimension adapter against the sum of the
//! losses at every trajectory dimension.
//!
//! Each step builds a pool of stage inputs: the batch queries, the union of
//! their judged docs, and (with cross-batch memory on) the memory neighbors of
//! every pool item. The rank loss ranks each query's candidates by gain; the
//! unsupervised loss asks compressed similarities to track the stage-input
//! similarities of mined pairs.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{
    validate_trajectory, AdapterStack, Compressor, Mode, MrlAdapter, SelectionKind, StageSpec, TAU_END, TAU_START,
};
use crate::dataset::{Batcher, EmbeddingSet, QueryBatch, RelevanceJudgments};
use crate::error::{Result, SmecError};
use crate::grad::{grad_stats, GradStats, GradTape, MrlTape, Objective, ParamGroup, RankGroup, TeacherPair};
use crate::losses::DEFAULT_ALPHA;
use crate::memory::{MemoryBank, DEFAULT_CAPACITY, DEFAULT_NEIGHBOR_K};
use crate::numerics::{cosine, mix_seed, norm, seeded_rng};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const TAG_STAGE_INIT: u64 = 0x1A17_0000;
const TAG_BATCHES: u64 = 0xBA7C_0000_0000;
const TAG_SELECTION: u64 = 0x5E1E_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// One stage at a time, freezing each before the next.
    Smrl,
    /// All trajectory dimensions jointly.
    Mrl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub trajectory: Vec<usize>,
    pub batch_size: usize,
    /// Epoch cap per stage (per run in joint mode).
    pub epochs_per_stage: usize,
    pub learning_rate: f64,
    pub alpha: f64,
    pub memory_capacity: usize,
    /// Mine unsupervised pairs from cross-batch memory; otherwise from the batch.
    pub use_memory: bool,
    /// Learned (Gumbel top-k) selection; otherwise prefix truncation.
    pub adaptive_selection: bool,
    pub neighbor_k: usize,
    /// In-batch pair budget when memory is off (`None`: `neighbor_k` per pool item).
    pub pair_top_k: Option<usize>,
    /// Non-improving evaluations before a stage stops; 0 disables early stopping.
    pub patience: usize,
    /// Relative improvement required to reset patience.
    pub min_delta: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Smrl,
            trajectory: Vec::new(),
            batch_size: 32,
            epochs_per_stage: 20,
            learning_rate: 1e-3,
            alpha: DEFAULT_ALPHA,
            memory_capacity: DEFAULT_CAPACITY,
            use_memory: true,
            adaptive_selection: true,
            neighbor_k: DEFAULT_NEIGHBOR_K,
            pair_top_k: None,
            patience: 3,
            min_delta: 1e-4,
            val_fraction: 0.1,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        validate_trajectory(&self.trajectory)?;
        if self.batch_size < 2 {
            return Err(SmecError::invalid(format!(
                "batch size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if self.epochs_per_stage == 0 {
            return Err(SmecError::invalid("epoch cap must be at least 1"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(SmecError::invalid("learning rate must be finite and >= 0"));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(SmecError::invalid("alpha must be finite and >= 0"));
        }
        if self.memory_capacity == 0 {
            return Err(SmecError::invalid("memory capacity must be at least 1"));
        }
        if !(self.min_delta >= 0.0) {
            return Err(SmecError::invalid("min_delta must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(SmecError::invalid("val_fraction must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Inputs of a training run with its query split.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub queries: EmbeddingSet,
    pub docs: EmbeddingSet,
    pub qrels: RelevanceJudgments,
    pub train_queries: Vec<usize>,
    pub val_queries: Vec<usize>,
}

impl TrainData {
    /// Splits queries by a hash of their id. An empty validation side falls
    /// back to the training queries.
    pub fn new(
        queries: EmbeddingSet,
        docs: EmbeddingSet,
        qrels: RelevanceJudgments,
        val_fraction: f64,
    ) -> Result<Self> {
        if queries.dim() != docs.dim() {
            return Err(SmecError::format(format!(
                "query dim {} differs from doc dim {}",
                queries.dim(),
                docs.dim()
            )));
        }
        if queries.is_empty() || docs.is_empty() {
            return Err(SmecError::format("training needs at least one query and one doc"));
        }
        qrels.validate_against(&queries, &docs)?;
        let (train_queries, mut val_queries) = split_queries(queries.ids(), val_fraction);
        if train_queries.is_empty() {
            return Err(SmecError::invalid("validation split left no training queries"));
        }
        if val_queries.is_empty() {
            val_queries = train_queries.clone();
        }
        Ok(Self {
            queries,
            docs,
            qrels,
            train_queries,
            val_queries,
        })
    }

    pub fn dim(&self) -> usize {
        self.queries.dim()
    }
}

/// Deterministic `(train, val)` split of row indices by SHA-256 of the id.
pub fn split_queries(ids: &[String], val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        let digest = Sha256::digest(id.as_bytes());
        let h = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        if (h as f64 / 2f64.powi(64)) < val_fraction {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    (train, val)
}

/// Adam with the usual bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(SmecError::invalid(format!(
                "optimizer holds {} slots, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        Ok(())
    }
}

/// Pair of pool items with their stage-input cosine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPair {
    pub a: usize,
    pub b: usize,
    pub sim: f64,
}

/// All ordered pairs `(i, j)`, `i ≠ j`, scored by cosine.
pub fn mine_pairs_inbatch(vectors: &[&[f64]]) -> Result<Vec<ScoredPair>> {
    if vectors.len() < 2 {
        return Err(SmecError::invalid("in-batch pairing needs at least two items"));
    }
    let n = vectors.len();
    let norms: Vec<f64> = vectors.iter().map(|v| norm(v)).collect();
    Ok((0..n)
        .into_par_iter()
        .flat_map_iter(|a| {
            let norms = &norms;
            (0..n).filter(move |&b| b != a).map(move |b| {
                let sim = if norms[a] == 0.0 || norms[b] == 0.0 {
                    0.0
                } else {
                    (crate::numerics::dot(vectors[a], vectors[b]) / (norms[a] * norms[b])).clamp(-1.0, 1.0)
                };
                ScoredPair { a, b, sim }
            })
        })
        .collect())
}

/// The `k` most similar pairs; ties keep the earlier pair.
pub fn select_topk_pairs(mut pairs: Vec<ScoredPair>, k: usize) -> Vec<ScoredPair> {
    pairs.sort_by(|x, y| y.sim.total_cmp(&x.sim));
    pairs.truncate(k);
    pairs
}

/// Training outcome of one stage (or of a joint run).
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub in_dim: usize,
    pub out_dim: usize,
    pub steps: usize,
    pub epochs: usize,
    /// Per step.
    pub train_losses: Vec<f64>,
    /// Initial evaluation followed by one per epoch.
    pub val_losses: Vec<f64>,
    /// Per step, over the dense weight gradient.
    pub grad_stats: Vec<GradStats>,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    /// Stopped by patience rather than by the epoch cap.
    pub converged: bool,
}

/// Per-step details handed to observers (timing is kept out of reports).
#[derive(Debug)]
pub struct StepRecord<'a> {
    pub stage: usize,
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub stats: &'a GradStats,
    pub elapsed: Duration,
    pub bank_len: usize,
}

pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord<'_>) {}

    /// Called after a stage is frozen, with the stack as it now stands.
    fn on_stage_complete(&mut self, _stack: &AdapterStack, _report: &StageReport) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

/// Geometric temperature schedule from `TAU_START` to `TAU_END` over `total` steps.
pub fn tau_at(step: usize, total: usize) -> f64 {
    if total <= 1 {
        return TAU_START;
    }
    let frac = step.min(total - 1) as f64 / (total - 1) as f64;
    TAU_START * (TAU_END / TAU_START).powf(frac)
}

/// Stage-input vectors of every query and doc.
struct Inputs {
    queries: Vec<Vec<f64>>,
    docs: Vec<Vec<f64>>,
}

impl Inputs {
    fn raw(data: &TrainData) -> Self {
        Self {
            queries: data.queries.to_rows(),
            docs: data.docs.to_rows(),
        }
    }

    fn through(stack: &AdapterStack, upto: Option<usize>, data: &TrainData) -> Result<Self> {
        let run = |set: &EmbeddingSet| -> Result<Vec<Vec<f64>>> {
            (0..set.len())
                .into_par_iter()
                .map(|i| stack.forward(set.row(i), upto, Mode::Infer))
                .collect()
        };
        Ok(Self {
            queries: run(&data.queries)?,
            docs: run(&data.docs)?,
        })
    }
}

/// One step's pool with its loss structure.
struct Pool<'a> {
    vectors: Vec<&'a [f64]>,
    /// Memory ids of the first `anchors` items.
    ids: Vec<String>,
    rank: Vec<RankGroup>,
    unsup: Vec<TeacherPair>,
}

fn build_pool<'a>(
    batch: &QueryBatch,
    inputs: &'a Inputs,
    data: &TrainData,
    bank: Option<&'a MemoryBank>,
    cfg: &TrainConfig,
) -> Result<Pool<'a>> {
    let candidates: BTreeSet<usize> = batch.judged.iter().flatten().map(|&(d, _)| d).collect();
    let candidates: Vec<usize> = candidates.into_iter().collect();
    let n_q = batch.queries.len();
    let mut vectors: Vec<&[f64]> = batch.queries.iter().map(|&q| inputs.queries[q].as_slice()).collect();
    vectors.extend(candidates.iter().map(|&d| inputs.docs[d].as_slice()));
    let mut ids: Vec<String> = batch
        .queries
        .iter()
        .map(|&q| format!("q:{}", data.queries.id(q)))
        .collect();
    ids.extend(candidates.iter().map(|&d| format!("d:{}", data.docs.id(d))));

    let rank = batch
        .judged
        .iter()
        .enumerate()
        .map(|(qi, judged)| {
            let gains: BTreeMap<usize, f64> = judged.iter().copied().collect();
            RankGroup {
                query: qi,
                docs: candidates
                    .iter()
                    .enumerate()
                    .map(|(ci, d)| (n_q + ci, gains.get(d).copied().unwrap_or(0.0)))
                    .collect(),
            }
        })
        .collect();

    let anchors = vectors.len();
    let mut unsup = Vec::new();
    if cfg.alpha > 0.0 {
        match bank {
            Some(bank) => {
                let queries: Vec<(&str, &[f64])> =
                    ids.iter().map(|s| s.as_str()).zip(vectors.iter().copied()).collect();
                let hits = bank.mine_neighbors(&queries, cfg.neighbor_k);
                for (a, nbrs) in hits.into_iter().enumerate() {
                    for hit in nbrs {
                        unsup.push(TeacherPair {
                            a,
                            b: vectors.len(),
                            teacher: hit.sim,
                        });
                        vectors.push(hit.entry.vector.as_slice());
                    }
                }
            }
            None if anchors >= 2 => {
                let k = cfg.pair_top_k.unwrap_or(cfg.neighbor_k * anchors);
                let pairs = select_topk_pairs(mine_pairs_inbatch(&vectors)?, k);
                unsup.extend(pairs.into_iter().map(|p| TeacherPair {
                    a: p.a,
                    b: p.b,
                    teacher: p.sim,
                }));
            }
            None => {}
        }
    }
    ids.truncate(anchors);
    Ok(Pool {
        vectors,
        ids,
        rank,
        unsup,
    })
}

fn step_objective(pool: &Pool<'_>, alpha: f64) -> Objective {
    Objective::Sum(vec![
        (1.0, Objective::Rank(pool.rank.clone())),
        (alpha, Objective::Unsup(pool.unsup.clone())),
    ])
}

/// Validation queries and the union of their judged docs.
struct EvalSet {
    queries: Vec<usize>,
    docs: Vec<usize>,
    groups: Vec<RankGroup>,
}

impl EvalSet {
    fn new(data: &TrainData) -> Self {
        let judged: Vec<Vec<(usize, f64)>> = data
            .val_queries
            .iter()
            .map(|&q| crate::dataset::judged_docs(data.queries.id(q), &data.docs, &data.qrels))
            .collect();
        let docs: Vec<usize> = judged
            .iter()
            .flatten()
            .map(|&(d, _)| d)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let n_q = data.val_queries.len();
        let groups = judged
            .iter()
            .enumerate()
            .map(|(qi, j)| {
                let gains: BTreeMap<usize, f64> = j.iter().copied().collect();
                RankGroup {
                    query: qi,
                    docs: docs
                        .iter()
                        .enumerate()
                        .map(|(ci, d)| (n_q + ci, gains.get(d).copied().unwrap_or(0.0)))
                        .collect(),
                }
            })
            .collect();
        Self {
            queries: data.val_queries.clone(),
            docs,
            groups,
        }
    }

    /// Mean rank-loss term over validation queries, with `embed` mapping a
    /// query (`true`) or doc row index to its compressed vector.
    fn rank_loss<F>(&self, embed: F) -> Result<f64>
    where
        F: Fn(bool, usize) -> Result<Vec<f64>> + Sync,
    {
        let mut items: Vec<Vec<f64>> = self
            .queries
            .par_iter()
            .map(|&q| embed(true, q))
            .collect::<Result<_>>()?;
        let docs: Vec<Vec<f64>> = self.docs.par_iter().map(|&d| embed(false, d)).collect::<Result<_>>()?;
        items.extend(docs);
        Ok(Objective::Rank(self.groups.clone()).value(&items).mean())
    }
}

/// Mean validation rank-loss term of a trained compressor at `dim`.
pub fn validation_rank_loss(compressor: &Compressor, data: &TrainData, dim: usize) -> Result<f64> {
    EvalSet::new(data).rank_loss(|is_query, i| {
        let set = if is_query { &data.queries } else { &data.docs };
        compressor.embed(set.row(i), dim)
    })
}

/// Equal row blocks of a square weight gradient, split at `cuts`.
fn row_groups(dim: usize, cuts: &[usize]) -> Vec<ParamGroup> {
    let mut bounds: Vec<usize> = cuts.iter().copied().filter(|&c| c > 0 && c < dim).collect();
    bounds.sort_unstable();
    bounds.dedup();
    bounds.insert(0, 0);
    bounds.push(dim);
    bounds
        .windows(2)
        .map(|w| ParamGroup::new(format!("w[{}..{})", w[0], w[1]), w[0] * dim..w[1] * dim))
        .collect()
}

/// Patience bookkeeping for validation losses.
struct Convergence {
    best: f64,
    stale: usize,
    patience: usize,
    min_delta: f64,
}

impl Convergence {
    fn new(initial: f64, cfg: &TrainConfig) -> Self {
        Self {
            best: initial,
            stale: 0,
            patience: cfg.patience,
            min_delta: cfg.min_delta,
        }
    }

    /// Records an evaluation; returns true when training should stop.
    fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best * (1.0 - self.min_delta) {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.patience > 0 && self.stale >= self.patience
    }
}

fn check_finite(step: usize, loss: f64, detail: impl FnOnce() -> String) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(SmecError::NonFinite { step, detail: detail() })
    }
}

/// Trains the tail stage `stage_idx` of `stack` to convergence and freezes it.
pub fn train_stage(
    stack: &mut AdapterStack,
    stage_idx: usize,
    data: &TrainData,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<StageReport> {
    cfg.validate()?;
    if stage_idx + 1 != stack.len() {
        return Err(SmecError::invalid(format!(
            "stage {stage_idx} is not the tail of a {}-stage stack",
            stack.len()
        )));
    }
    if stack.stages()[..stage_idx].iter().any(|s| !s.is_frozen()) {
        return Err(SmecError::InvalidState("earlier stages must be frozen".into()));
    }
    stack.stage_mut(stage_idx)?;
    if stack.input_dim() != data.dim() {
        return Err(SmecError::invalid(format!(
            "stack input dim {} does not match data dim {}",
            stack.input_dim(),
            data.dim()
        )));
    }

    let inputs = Inputs::through(stack, stage_idx.checked_sub(1), data)?;
    let spec = stack.stages()[stage_idx].spec;
    let batcher = Batcher::new(
        &data.queries,
        &data.docs,
        &data.qrels,
        data.train_queries.clone(),
        cfg.batch_size,
        mix_seed(cfg.seed, TAG_BATCHES + stage_idx as u64),
    )?;
    let total_steps = cfg.epochs_per_stage * batcher.batches_per_epoch();
    let mut sel_rng = seeded_rng(mix_seed(cfg.seed, TAG_SELECTION + stage_idx as u64));
    let mut adam = Adam::new(stack.stages()[stage_idx].param_count(), cfg.learning_rate);
    let mut bank = if cfg.use_memory {
        Some(MemoryBank::new(cfg.memory_capacity)?)
    } else {
        None
    };
    let groups = row_groups(spec.out_dim, &[spec.out_dim / 2]);
    let eval = EvalSet::new(data);
    let val_loss = |stack: &AdapterStack| -> Result<f64> {
        let stage = &stack.stages()[stage_idx];
        eval.rank_loss(|is_query, i| {
            let z = if is_query { &inputs.queries[i] } else { &inputs.docs[i] };
            Ok(stage.forward(z, Mode::Infer)?.0)
        })
    };

    let initial = val_loss(stack)?;
    let mut conv = Convergence::new(initial, cfg);
    let mut report = StageReport {
        in_dim: spec.in_dim,
        out_dim: spec.out_dim,
        steps: 0,
        epochs: 0,
        train_losses: Vec::new(),
        val_losses: vec![initial],
        grad_stats: Vec::new(),
        final_train_loss: f64::NAN,
        final_val_loss: initial,
        converged: false,
    };

    'epochs: for epoch in 0..cfg.epochs_per_stage {
        for batch in batcher.epoch(epoch) {
            let started = Instant::now();
            stack.stage_mut(stage_idx)?.tau = tau_at(report.steps, total_steps);
            if stack.stages().iter().filter(|s| !s.is_frozen()).count() != 1 {
                return Err(SmecError::InvalidState("more than one unfrozen stage".into()));
            }
            let stage = &stack.stages()[stage_idx];
            let selection = stage.select(Mode::Train(&mut sel_rng))?;
            let pool = build_pool(&batch, &inputs, data, bank.as_ref(), cfg)?;
            let objective = step_objective(&pool, cfg.alpha);
            let tape = GradTape::record(stage, &pool.vectors, selection)?;
            let loss = objective.value(tape.outputs()).value;
            check_finite(report.steps, loss, || {
                format!(
                    "stage {stage_idx} ({}->{}), epoch {epoch}, tau {:.4}, param norm {:.4e}",
                    spec.in_dim,
                    spec.out_dim,
                    stage.tau,
                    norm(&stage.params())
                )
            })?;
            let grads = tape.backward(&objective)?;
            let stats = grad_stats(report.steps, grads.weight.as_slice(), &groups)?;
            let anchors: Vec<(String, Vec<f64>)> = pool
                .ids
                .iter()
                .cloned()
                .zip(pool.vectors.iter().map(|v| v.to_vec()))
                .collect();
            drop(pool);

            let stage = stack.stage_mut(stage_idx)?;
            let mut params = stage.params();
            adam.step(&mut params, &grads.flatten())?;
            stage.set_params(&params)?;
            if let Some(bank) = bank.as_mut() {
                bank.enqueue(anchors)?;
            }

            observer.on_step(&StepRecord {
                stage: stage_idx,
                epoch,
                step: report.steps,
                train_loss: loss,
                stats: &stats,
                elapsed: started.elapsed(),
                bank_len: bank.as_ref().map_or(0, MemoryBank::len),
            });
            report.train_losses.push(loss);
            report.grad_stats.push(stats);
            report.steps += 1;
        }
        report.epochs += 1;
        let v = val_loss(stack)?;
        check_finite(report.steps, v, || format!("validation loss of stage {stage_idx}"))?;
        report.val_losses.push(v);
        if conv.observe(v) {
            report.converged = true;
            break 'epochs;
        }
    }

    report.final_train_loss = report.train_losses.last().copied().unwrap_or(f64::NAN);
    report.final_val_loss = *report.val_losses.last().expect("initial evaluation");
    stack.freeze_through(stage_idx)?;
    Ok(report)
}

/// Sequential training along `cfg.trajectory`, optionally continuing from a
/// stack whose dims are a prefix of the trajectory.
pub fn train_smrl(
    stack: Option<AdapterStack>,
    data: &TrainData,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(AdapterStack, Vec<StageReport>)> {
    cfg.validate()?;
    let mut stack = match stack {
        Some(s) => s,
        None => AdapterStack::new(cfg.trajectory[0])?,
    };
    let have = stack.dims();
    if have.len() > cfg.trajectory.len() || cfg.trajectory[..have.len()] != have[..] {
        return Err(SmecError::invalid(format!(
            "checkpoint dims {have:?} are not a prefix of trajectory {:?}",
            cfg.trajectory
        )));
    }
    if stack.stages().iter().any(|s| !s.is_frozen()) {
        return Err(SmecError::InvalidState("checkpoint contains an unfrozen stage".into()));
    }
    let selection = if cfg.adaptive_selection {
        SelectionKind::Adaptive
    } else {
        SelectionKind::Prefix
    };
    let mut reports = Vec::new();
    for s in stack.len()..cfg.trajectory.len() - 1 {
        let spec = StageSpec::new(cfg.trajectory[s], cfg.trajectory[s + 1])?;
        let idx = stack.append_stage(spec, selection, mix_seed(cfg.seed, TAG_STAGE_INIT + s as u64))?;
        let report = train_stage(&mut stack, idx, data, cfg, observer)?;
        observer.on_stage_complete(&stack, &report)?;
        reports.push(report);
    }
    Ok((stack, reports))
}

/// Joint training of one full-dimension adapter on the summed per-dimension
/// losses (all weights 1).
pub fn train_mrl(
    data: &TrainData,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(MrlAdapter, StageReport)> {
    cfg.validate()?;
    let d = cfg.trajectory[0];
    if d != data.dim() {
        return Err(SmecError::invalid(format!(
            "trajectory starts at {d} but data dim is {}",
            data.dim()
        )));
    }
    let mut adapter = MrlAdapter::new(
        &cfg.trajectory,
        cfg.adaptive_selection,
        mix_seed(cfg.seed, TAG_STAGE_INIT),
    )?;
    let inputs = Inputs::raw(data);
    let batcher = Batcher::new(
        &data.queries,
        &data.docs,
        &data.qrels,
        data.train_queries.clone(),
        cfg.batch_size,
        mix_seed(cfg.seed, TAG_BATCHES),
    )?;
    let total_steps = cfg.epochs_per_stage * batcher.batches_per_epoch();
    let mut sel_rng = seeded_rng(mix_seed(cfg.seed, TAG_SELECTION));
    let mut adam = Adam::new(adapter.params().len(), cfg.learning_rate);
    let mut bank = if cfg.use_memory {
        Some(MemoryBank::new(cfg.memory_capacity)?)
    } else {
        None
    };
    let groups = row_groups(d, &cfg.trajectory[1..]);
    let eval = EvalSet::new(data);
    let levels = cfg.trajectory.clone();
    let val_loss = |adapter: &MrlAdapter| -> Result<f64> {
        let mut total = 0.0;
        for &dim in &levels {
            total += eval.rank_loss(|is_query, i| {
                let z = if is_query { &inputs.queries[i] } else { &inputs.docs[i] };
                adapter.embed(z, dim)
            })?;
        }
        Ok(total)
    };

    let initial = val_loss(&adapter)?;
    let mut conv = Convergence::new(initial, cfg);
    let mut report = StageReport {
        in_dim: d,
        out_dim: *cfg.trajectory.last().expect("non-empty"),
        steps: 0,
        epochs: 0,
        train_losses: Vec::new(),
        val_losses: vec![initial],
        grad_stats: Vec::new(),
        final_train_loss: f64::NAN,
        final_val_loss: initial,
        converged: false,
    };

    'epochs: for epoch in 0..cfg.epochs_per_stage {
        for batch in batcher.epoch(epoch) {
            let started = Instant::now();
            adapter.tau = tau_at(report.steps, total_steps);
            let selections = adapter.select(&mut Mode::Train(&mut sel_rng))?;
            let pool = build_pool(&batch, &inputs, data, bank.as_ref(), cfg)?;
            let objective = step_objective(&pool, cfg.alpha);
            let objectives = vec![objective; levels.len()];
            let tape = MrlTape::record(&adapter, &pool.vectors, selections)?;
            let loss: f64 = objectives
                .iter()
                .enumerate()
                .map(|(m, o)| o.value(tape.level(m)).value)
                .sum();
            check_finite(report.steps, loss, || {
                format!(
                    "joint adapter, epoch {epoch}, tau {:.4}, param norm {:.4e}",
                    adapter.tau,
                    norm(&adapter.params())
                )
            })?;
            let grads = tape.backward(&objectives)?;
            let stats = grad_stats(report.steps, grads.weight.as_slice(), &groups)?;
            let anchors: Vec<(String, Vec<f64>)> = pool
                .ids
                .iter()
                .cloned()
                .zip(pool.vectors.iter().map(|v| v.to_vec()))
                .collect();
            drop(pool);

            let mut params = adapter.params();
            adam.step(&mut params, &grads.flatten())?;
            adapter.set_params(&params)?;
            if let Some(bank) = bank.as_mut() {
                bank.enqueue(anchors)?;
            }

            observer.on_step(&StepRecord {
                stage: 0,
                epoch,
                step: report.steps,
                train_loss: loss,
                stats: &stats,
                elapsed: started.elapsed(),
                bank_len: bank.as_ref().map_or(0, MemoryBank::len),
            });
            report.train_losses.push(loss);
            report.grad_stats.push(stats);
            report.steps += 1;
        }
        report.epochs += 1;
        let v = val_loss(&adapter)?;
        check_finite(report.steps, v, || "validation loss of joint adapter".into())?;
        report.val_losses.push(v);
        if conv.observe(v) {
            report.converged = true;
            break 'epochs;
        }
    }
    report.final_train_loss = report.train_losses.last().copied().unwrap_or(f64::NAN);
    report.final_val_loss = *report.val_losses.last().expect("initial evaluation");
    Ok((adapter, report))
}

/// Teacher cosine of a pair (exposed for tests and tooling).
pub fn teacher_similarity(a: &[f64], b: &[f64]) -> f64 {
    cosine(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_planted, PlantedSpec};

    fn planted(dim: usize, signal: Vec<usize>, noise: f64, nq: usize, nd: usize, seed: u64) -> TrainData {
        let p = synth_planted(&PlantedSpec {
            total_dim: dim,
            signal_dims: signal,
            noise_scale: noise,
            n_queries: nq,
            n_docs: nd,
            seed,
        })
        .unwrap();
        TrainData::new(p.queries, p.docs, p.qrels, 0.2).unwrap()
    }

    fn small_cfg(trajectory: Vec<usize>) -> TrainConfig {
        TrainConfig {
            trajectory,
            batch_size: 8,
            epochs_per_stage: 4,
            learning_rate: 1e-2,
            memory_capacity: 200,
            neighbor_k: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn inbatch_pairs() {
        let v: Vec<Vec<f64>> = (0..5).map(|i| vec![1.0, i as f64]).collect();
        let refs: Vec<&[f64]> = v.iter().map(|x| x.as_slice()).collect();
        assert_eq!(mine_pairs_inbatch(&refs[..3]).unwrap().len(), 6);
        assert_eq!(mine_pairs_inbatch(&refs[..2]).unwrap().len(), 2);
        let got: Vec<(usize, usize)> = mine_pairs_inbatch(&refs).unwrap().iter().map(|p| (p.a, p.b)).collect();
        let mut expected = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    expected.push((i, j));
                }
            }
        }
        assert_eq!(got, expected);
        assert!(mine_pairs_inbatch(&refs[..1]).is_err());
    }

    #[test]
    fn topk_pairs() {
        let pairs: Vec<ScoredPair> = (0..20)
            .map(|i| ScoredPair {
                a: i,
                b: i + 1,
                sim: ((i * 7) % 11) as f64 / 10.0,
            })
            .collect();
        assert_eq!(select_topk_pairs(pairs.clone(), 50).len(), 20);
        assert!(select_topk_pairs(pairs.clone(), 0).is_empty());
        let mut oracle = pairs.clone();
        oracle.sort_by(|x, y| y.sim.partial_cmp(&x.sim).unwrap().then(x.a.cmp(&y.a)));
        assert_eq!(select_topk_pairs(pairs, 5), oracle[..5].to_vec());
    }

    #[test]
    fn adam_examples() {
        let mut adam = Adam::new(2, 0.1);
        let mut p = vec![1.0, -2.0];
        adam.step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        let mut adam = Adam::new(1, 0.01);
        let mut p = vec![3.0];
        adam.step(&mut p, &[1.0]).unwrap();
        assert!((p[0] - (3.0 - 0.01)).abs() < 1e-6);

        let mut adam = Adam::new(1, 0.05);
        let mut p = vec![4.0];
        let mut losses = Vec::new();
        for _ in 0..100 {
            losses.push(p[0] * p[0]);
            let g = [2.0 * p[0]];
            adam.step(&mut p, &g).unwrap();
        }
        assert!(losses.windows(2).skip(5).take(40).all(|w| w[1] < w[0]));
        assert!(losses[99] < losses[0]);
    }

    #[test]
    fn tau_schedule_endpoints() {
        assert_eq!(tau_at(0, 10), TAU_START);
        assert!((tau_at(9, 10) - TAU_END).abs() < 1e-12);
        assert!(tau_at(4, 10) < tau_at(3, 10));
    }

    #[test]
    fn split_is_deterministic_and_complete() {
        let ids: Vec<String> = (0..500).map(|i| format!("q{i}")).collect();
        let (t, v) = split_queries(&ids, 0.1);
        assert_eq!(t.len() + v.len(), 500);
        assert!(v.len() > 20 && v.len() < 80, "{}", v.len());
        assert_eq!(split_queries(&ids, 0.1), (t, v));
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let data = planted(16, vec![1, 4, 9, 12], 0.0, 40, 120, 1);
        let mut cfg = small_cfg(vec![16, 8]);
        cfg.learning_rate = 0.0;
        cfg.epochs_per_stage = 10;
        let mut stack = AdapterStack::new(16).unwrap();
        stack
            .append_stage(StageSpec::new(16, 8).unwrap(), SelectionKind::Adaptive, 3)
            .unwrap();
        let before = stack.stages()[0].params();
        let report = train_stage(&mut stack, 0, &data, &cfg, &mut NoopObserver).unwrap();
        assert_eq!(stack.stages()[0].params(), before);
        assert!(report.converged);
        assert_eq!(report.epochs, cfg.patience);
        assert!(stack.stages()[0].is_frozen());
    }

    #[test]
    fn planted_stage_finds_signal_dims() {
        let signal = vec![1, 4, 6, 9, 13, 17, 22, 30];
        let data = planted(32, signal.clone(), 0.05, 80, 320, 2);
        let cfg = TrainConfig {
            trajectory: vec![32, 8],
            batch_size: 16,
            epochs_per_stage: 12,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let (stack, reports) = train_smrl(None, &data, &cfg, &mut NoopObserver).unwrap();
        let r = &reports[0];
        assert!(r.final_val_loss < r.val_losses[0], "{:?}", r.val_losses);
        let kept = stack.composed_indices(0).unwrap();
        assert!(kept.iter().filter(|i| signal.contains(i)).count() >= 6, "{kept:?}");
    }

    #[test]
    fn smrl_structure_and_determinism() {
        let data = planted(16, vec![2, 5, 7, 11], 0.05, 30, 90, 3);
        let cfg = small_cfg(vec![16, 8, 4]);
        let (stack_a, rep_a) = train_smrl(None, &data, &cfg, &mut NoopObserver).unwrap();
        let (stack_b, rep_b) = train_smrl(None, &data, &cfg, &mut NoopObserver).unwrap();
        assert_eq!(rep_a.len(), 2);
        assert_eq!((rep_a[0].in_dim, rep_a[0].out_dim), (16, 8));
        assert_eq!((rep_a[1].in_dim, rep_a[1].out_dim), (8, 4));
        assert_eq!(rep_a, rep_b);
        assert_eq!(stack_a.to_bytes(), stack_b.to_bytes());

        let none = TrainConfig {
            trajectory: vec![16],
            ..cfg.clone()
        };
        assert!(train_smrl(None, &data, &none, &mut NoopObserver).unwrap().1.is_empty());
    }

    #[test]
    fn resume_keeps_frozen_stages() {
        let data = planted(16, vec![1, 2, 3, 4], 0.05, 30, 90, 4);
        let first = small_cfg(vec![16, 8]);
        let (stack, _) = train_smrl(None, &data, &first, &mut NoopObserver).unwrap();
        let loaded = AdapterStack::from_bytes(&stack.to_bytes()).unwrap();
        let frozen = loaded.stages()[0].clone();
        let full = small_cfg(vec![16, 8, 4]);
        let (resumed, reports) = train_smrl(Some(loaded), &data, &full, &mut NoopObserver).unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(resumed.stages()[0], frozen);

        let wrong = small_cfg(vec![16, 4]);
        let loaded = AdapterStack::from_bytes(&stack.to_bytes()).unwrap();
        assert!(train_smrl(Some(loaded), &data, &wrong, &mut NoopObserver).is_err());
    }

    #[test]
    fn mrl_runs_with_and_without_memory() {
        let data = planted(16, vec![0, 5, 10, 15], 0.05, 30, 90, 5);
        for use_memory in [true, false] {
            let cfg = TrainConfig {
                mode: TrainMode::Mrl,
                use_memory,
                adaptive_selection: !use_memory,
                ..small_cfg(vec![16, 8, 4])
            };
            let (adapter, report) = train_mrl(&data, &cfg, &mut NoopObserver).unwrap();
            assert!(report.steps > 0 && report.train_losses.iter().all(|l| l.is_finite()));
            assert_eq!(report.grad_stats[0].group_means.len(), 3);
            assert_eq!(adapter.trajectory(), &[16, 8, 4]);
        }
    }
}
