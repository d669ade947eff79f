//! Retrieval metrics, dimension-importance audits, the PCA baseline and the
//! ablation / memory-size harnesses.

use std::collections::HashSet;
use std::time::Duration;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::adapter::{AdapterStack, Compressor};
use crate::dataset::{EmbeddingSet, RelevanceJudgments};
use crate::error::{Result, SmecError};
use crate::numerics::{dot, mix_seed, norm, seeded_rng, Matrix};
use crate::trainer::{
    train_mrl, train_smrl, StageReport, StepRecord, TrainConfig, TrainData, TrainMode, TrainObserver,
};

pub const NDCG_K: usize = 10;
pub const DEFAULT_WARE_SAMPLE: usize = 10_000;
pub const PCA_TOL: f64 = 1e-9;
pub const PCA_MAX_ITER: usize = 1000;
/// Eigenvalues below this fraction of the total variance count as rank deficiency.
const PCA_RANK_TOL: f64 = 1e-12;
const TAG_PCA: u64 = 0x9CA0;

/// Docs for one query in descending score order.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub query_id: String,
    pub doc_ids: Vec<String>,
    pub scores: Vec<f64>,
}

impl Ranking {
    /// Sorts `(doc id, score)` by descending score, ties by ascending id.
    pub fn new(query_id: impl Into<String>, mut scored: Vec<(String, f64)>) -> Result<Self> {
        if scored.iter().any(|(_, s)| s.is_nan()) {
            return Err(SmecError::invalid("ranking scores must not be NaN"));
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut seen = HashSet::new();
        if let Some((dup, _)) = scored.iter().find(|(id, _)| !seen.insert(id.as_str())) {
            return Err(SmecError::invalid(format!("doc {dup} ranked twice")));
        }
        let (doc_ids, scores) = scored.into_iter().unzip();
        Ok(Self {
            query_id: query_id.into(),
            doc_ids,
            scores,
        })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NdcgScore {
    pub value: f64,
    /// The query has no doc with positive gain; `value` is then 0.
    pub zero_relevant: bool,
}

fn gain(rel: f64) -> f64 {
    rel.exp2() - 1.0
}

/// `Σ_{i<k} (2^rel_i − 1) / log₂(i + 2)` over gains in rank order.
pub fn dcg(rels: &[f64], k: usize) -> f64 {
    rels.iter()
        .take(k)
        .enumerate()
        .map(|(i, &r)| gain(r) / ((i + 2) as f64).log2())
        .sum()
}

pub fn ndcg_at_k(ranking: &Ranking, qrels: &RelevanceJudgments, k: usize) -> Result<NdcgScore> {
    if k == 0 {
        return Err(SmecError::invalid("nDCG cutoff k must be at least 1"));
    }
    let mut ideal: Vec<f64> = qrels
        .judged(&ranking.query_id)
        .map(|j| j.values().copied().filter(|&g| g > 0.0).collect())
        .unwrap_or_default();
    if ideal.is_empty() {
        return Ok(NdcgScore {
            value: 0.0,
            zero_relevant: true,
        });
    }
    ideal.sort_by(|a, b| b.total_cmp(a));
    let got: Vec<f64> = ranking
        .doc_ids
        .iter()
        .take(k)
        .map(|d| qrels.gain(&ranking.query_id, d).max(0.0))
        .collect();
    Ok(NdcgScore {
        value: dcg(&got, k) / dcg(&ideal, k),
        zero_relevant: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WareValue {
    pub value: f64,
    /// Samples dropped because their after-pruning score was 0.
    pub excluded: usize,
}

/// `(1/M) Σ |ŷ_m − y_m| / |y_m|` with ŷ the score before pruning and y after.
pub fn ware(before: &[f64], after: &[f64]) -> Result<WareValue> {
    if before.len() != after.len() {
        return Err(SmecError::invalid(format!(
            "score lists differ in length: {} vs {}",
            before.len(),
            after.len()
        )));
    }
    if before.is_empty() {
        return Err(SmecError::invalid("WARE needs at least one sample"));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    for (&yh, &y) in before.iter().zip(after) {
        if y == 0.0 {
            continue;
        }
        total += (yh - y).abs() / y.abs();
        used += 1;
    }
    if used == 0 {
        return Err(SmecError::Degenerate("every after-pruning score is zero".into()));
    }
    Ok(WareValue {
        value: total / used as f64,
        excluded: before.len() - used,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WareReport {
    pub values: Vec<f64>,
    pub excluded: Vec<usize>,
    /// Dimensions by descending WARE, ties by lower index.
    pub ranking: Vec<usize>,
}

impl WareReport {
    pub fn top(&self, n: usize) -> &[usize] {
        &self.ranking[..n.min(self.ranking.len())]
    }
}

fn cos_from_parts(c: f64, a2: f64, b2: f64) -> f64 {
    let (a, b) = (a2.max(0.0).sqrt(), b2.max(0.0).sqrt());
    if a == 0.0 || b == 0.0 {
        0.0
    } else {
        c / (a * b)
    }
}

/// Per-dimension WARE over vector pairs, scoring each pair by cosine and
/// pruning one dimension at a time by zeroing it in both vectors.
pub fn ware_per_dimension(pairs: &[(&[f64], &[f64])]) -> Result<WareReport> {
    let Some(first) = pairs.first() else {
        return Err(SmecError::invalid("WARE needs at least one pair"));
    };
    let d = first.0.len();
    if d == 0 || pairs.iter().any(|(a, b)| a.len() != d || b.len() != d) {
        return Err(SmecError::invalid("WARE pairs must share one non-zero dimension"));
    }
    let parts: Vec<(f64, f64, f64)> = pairs.iter().map(|(a, b)| (dot(a, b), dot(a, a), dot(b, b))).collect();
    let before: Vec<f64> = parts.iter().map(|&(c, a2, b2)| cos_from_parts(c, a2, b2)).collect();
    let per_dim: Vec<(f64, usize)> = (0..d)
        .into_par_iter()
        .map(|j| {
            let after: Vec<f64> = pairs
                .iter()
                .zip(&parts)
                .map(|((a, b), &(c, a2, b2))| cos_from_parts(c - a[j] * b[j], a2 - a[j] * a[j], b2 - b[j] * b[j]))
                .collect();
            match ware(&before, &after) {
                Ok(w) => (w.value, w.excluded),
                Err(_) => (0.0, after.len()),
            }
        })
        .collect();
    let values: Vec<f64> = per_dim.iter().map(|p| p.0).collect();
    let excluded = per_dim.iter().map(|p| p.1).collect();
    let mut ranking: Vec<usize> = (0..d).collect();
    ranking.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    Ok(WareReport {
        values,
        excluded,
        ranking,
    })
}

/// `sample` distinct unordered row pairs of an `n`-row set (all pairs if fewer exist).
pub fn sample_pairs(n: usize, sample_size: usize, seed: u64) -> Vec<(usize, usize)> {
    let total = n * n.saturating_sub(1) / 2;
    let mut rng = seeded_rng(mix_seed(seed, 0x9A12));
    let picks: Vec<usize> = if sample_size >= total {
        (0..total).collect()
    } else {
        let mut v = sample(&mut rng, total, sample_size).into_vec();
        v.sort_unstable();
        v
    };
    picks.into_iter().map(|p| unrank_pair(p, n)).collect()
}

/// Inverse of the row-major enumeration of pairs `i < j`.
fn unrank_pair(mut p: usize, n: usize) -> (usize, usize) {
    let mut i = 0;
    while p >= n - 1 - i {
        p -= n - 1 - i;
        i += 1;
    }
    (i, i + 1 + p)
}

/// WARE per dimension over sampled row pairs of one embedding set.
pub fn ware_for_set(set: &EmbeddingSet, sample_size: usize, seed: u64) -> Result<WareReport> {
    let pairs = sample_pairs(set.len(), sample_size, seed);
    let refs: Vec<(&[f64], &[f64])> = pairs.iter().map(|&(i, j)| (set.row(i), set.row(j))).collect();
    ware_per_dimension(&refs)
}

/// Fraction of `selected` that lies in the first `n` entries of `ranking`.
pub fn achievement_rate(selected: &[usize], ranking: &[usize], n: usize) -> Result<f64> {
    if selected.is_empty() {
        return Err(SmecError::invalid("achievement rate needs a non-empty selection"));
    }
    if n > ranking.len() {
        return Err(SmecError::invalid(format!(
            "top-{n} exceeds the {} ranked dims",
            ranking.len()
        )));
    }
    let top: HashSet<usize> = ranking[..n].iter().copied().collect();
    let hits = selected.iter().filter(|i| top.contains(i)).count();
    Ok(hits as f64 / selected.len() as f64)
}

/// Mean-centred projection onto leading principal directions.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// One unit component per row.
    pub components: Matrix,
    /// Variance captured by each component.
    pub variances: Vec<f64>,
}

impl Pca {
    pub fn out_dim(&self) -> usize {
        self.components.rows()
    }

    pub fn project(&self, z: &[f64]) -> Vec<f64> {
        let centred: Vec<f64> = z.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        self.components.matvec(&centred)
    }

    pub fn transform(&self, set: &EmbeddingSet) -> Result<EmbeddingSet> {
        if set.dim() != self.mean.len() {
            return Err(SmecError::invalid(format!(
                "PCA fitted on dim {}, got dim {}",
                self.mean.len(),
                set.dim()
            )));
        }
        let rows: Vec<Vec<f64>> = (0..set.len()).map(|i| self.project(set.row(i))).collect();
        EmbeddingSet::from_rows(set.ids().to_vec(), &rows)
    }
}

pub fn covariance(rows: &Matrix) -> (Vec<f64>, Matrix) {
    let (n, d) = (rows.rows(), rows.cols());
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, x) in mean.iter_mut().zip(rows.row(r)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = Matrix::zeros(d, d);
    for r in 0..n {
        let c: Vec<f64> = rows.row(r).iter().zip(&mean).map(|(x, m)| x - m).collect();
        cov.add_outer(1.0 / (n - 1) as f64, &c, &c);
    }
    (mean, cov)
}

/// Power iteration with deflation on the sample covariance.
pub fn pca_fit(set: &EmbeddingSet, out_dim: usize) -> Result<Pca> {
    let (n, d) = (set.len(), set.dim());
    if n < 2 {
        return Err(SmecError::invalid("PCA needs at least two rows"));
    }
    if out_dim == 0 || out_dim > d {
        return Err(SmecError::invalid(format!(
            "PCA output dim must be in 1..={d}, got {out_dim}"
        )));
    }
    let (mean, mut cov) = covariance(set.matrix());
    let total: f64 = (0..d).map(|i| cov.get(i, i)).sum();
    let mut rng = seeded_rng(TAG_PCA);
    let mut components = Matrix::zeros(out_dim, d);
    let mut variances = Vec::with_capacity(out_dim);
    for c in 0..out_dim {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        orthogonalize(&mut v, &components, c);
        normalize(&mut v);
        for _ in 0..PCA_MAX_ITER {
            let mut next = cov.matvec(&v);
            orthogonalize(&mut next, &components, c);
            if normalize(&mut next) == 0.0 {
                break;
            }
            let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = next;
            if delta < PCA_TOL {
                break;
            }
        }
        let lambda = dot(&v, &cov.matvec(&v));
        if !(lambda > PCA_RANK_TOL * total) {
            return Err(SmecError::Degenerate(format!(
                "PCA to {out_dim} dims requested but the data has rank {c}"
            )));
        }
        let pivot = v
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        cov.add_outer(-lambda, &v, &v);
        components.row_mut(c).copy_from_slice(&v);
        variances.push(lambda);
    }
    Ok(Pca {
        mean,
        components,
        variances,
    })
}

fn orthogonalize(v: &mut [f64], basis: &Matrix, rows: usize) {
    for r in 0..rows {
        let u = basis.row(r);
        let p = dot(v, u);
        v.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Top-`k` docs by cosine for one query vector, ties by lower doc row.
pub fn rank_docs(query_id: &str, query: &[f64], docs: &[Vec<f64>], doc_ids: &[String], k: usize) -> Result<Ranking> {
    let qn = norm(query);
    let mut scored: Vec<(usize, f64)> = docs
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let dn = norm(d);
            let s = if qn == 0.0 || dn == 0.0 {
                0.0
            } else {
                dot(query, d) / (qn * dn)
            };
            (i, s)
        })
        .collect();
    let order = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if scored.len() > k && k > 0 {
        scored.select_nth_unstable_by(k - 1, order);
        scored.truncate(k);
    }
    scored.sort_by(order);
    Ok(Ranking {
        query_id: query_id.to_string(),
        doc_ids: scored.iter().map(|&(i, _)| doc_ids[i].clone()).collect(),
        scores: scored.iter().map(|&(_, s)| s).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryNdcg {
    pub query_id: String,
    pub ndcg: f64,
    pub zero_relevant: bool,
}

/// Compressed brute-force retrieval of `query_rows` against every doc.
pub fn evaluate_retrieval(
    compressor: &Compressor,
    queries: &EmbeddingSet,
    docs: &EmbeddingSet,
    qrels: &RelevanceJudgments,
    query_rows: &[usize],
    dim: usize,
    k: usize,
) -> Result<Vec<QueryNdcg>> {
    let doc_vecs: Vec<Vec<f64>> = (0..docs.len())
        .into_par_iter()
        .map(|i| compressor.embed(docs.row(i), dim))
        .collect::<Result<_>>()?;
    query_rows
        .par_iter()
        .map(|&q| {
            let v = compressor.embed(queries.row(q), dim)?;
            let ranking = rank_docs(queries.id(q), &v, &doc_vecs, docs.ids(), k)?;
            let s = ndcg_at_k(&ranking, qrels, k)?;
            Ok(QueryNdcg {
                query_id: ranking.query_id,
                ndcg: s.value,
                zero_relevant: s.zero_relevant,
            })
        })
        .collect()
}

pub fn mean_ndcg(scores: &[QueryNdcg]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().map(|s| s.ndcg).sum::<f64>() / scores.len() as f64
}

/// The joint-training twin of a staged config: same total epoch budget.
pub fn matched_joint_config(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig {
        mode: TrainMode::Mrl,
        epochs_per_stage: cfg.epochs_per_stage * cfg.trajectory.len().saturating_sub(1).max(1),
        ..cfg.clone()
    }
}

/// Trains per `cfg.mode` and returns the result as a [`Compressor`].
pub fn train_any(
    data: &TrainData,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(Compressor, Vec<StageReport>)> {
    match cfg.mode {
        TrainMode::Smrl => {
            let (stack, reports) = train_smrl(None, data, cfg, observer)?;
            Ok((Compressor::Stack(stack), reports))
        }
        TrainMode::Mrl => {
            let (adapter, report) = train_mrl(data, cfg, observer)?;
            Ok((Compressor::Mrl(adapter), vec![report]))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Components {
    pub smrl: bool,
    pub ads: bool,
    pub memory: bool,
}

pub const ABLATION_ROWS: [(&str, Components); 5] = [
    (
        "MRL",
        Components {
            smrl: false,
            ads: false,
            memory: false,
        },
    ),
    (
        "w/ SMRL",
        Components {
            smrl: true,
            ads: false,
            memory: false,
        },
    ),
    (
        "w/ ADS",
        Components {
            smrl: false,
            ads: true,
            memory: false,
        },
    ),
    (
        "w/ S-XBM",
        Components {
            smrl: false,
            ads: false,
            memory: true,
        },
    ),
    (
        "SMEC",
        Components {
            smrl: true,
            ads: true,
            memory: true,
        },
    ),
];

/// `base` with the three components toggled; joint runs get the staged epoch budget.
pub fn ablation_config(base: &TrainConfig, c: Components) -> TrainConfig {
    let staged = TrainConfig {
        mode: TrainMode::Smrl,
        adaptive_selection: c.ads,
        use_memory: c.memory,
        ..base.clone()
    };
    if c.smrl {
        staged
    } else {
        matched_joint_config(&staged)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    /// Mean nDCG@10 over validation queries, one per trajectory dim after the input.
    pub ndcg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub dims: Vec<usize>,
    pub rows: Vec<AblationRow>,
}

pub fn run_ablation(data: &TrainData, cfg: &TrainConfig) -> Result<AblationTable> {
    cfg.validate()?;
    let dims = cfg.trajectory[1..].to_vec();
    let rows = ABLATION_ROWS
        .iter()
        .map(|&(name, c)| {
            let run_cfg = ablation_config(cfg, c);
            let (compressor, _) = train_any(data, &run_cfg, &mut crate::trainer::NoopObserver)?;
            let ndcg = dims
                .iter()
                .map(|&d| {
                    let scores = evaluate_retrieval(
                        &compressor,
                        &data.queries,
                        &data.docs,
                        &data.qrels,
                        &data.val_queries,
                        d,
                        NDCG_K,
                    )?;
                    Ok(mean_ndcg(&scores))
                })
                .collect::<Result<_>>()?;
            Ok(AblationRow {
                name: name.to_string(),
                ndcg,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AblationTable { dims, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemorySweepRow {
    pub memory_size: usize,
    pub steps: usize,
    pub mean_step_secs: f64,
    pub mean_bank_len: f64,
    pub ndcg_at_10: f64,
}

/// Collects per-step wall-clock time and memory occupancy.
#[derive(Debug, Default)]
pub struct StepTimer {
    pub elapsed: Vec<Duration>,
    pub bank_lens: Vec<usize>,
}

impl TrainObserver for StepTimer {
    fn on_step(&mut self, record: &StepRecord<'_>) {
        self.elapsed.push(record.elapsed);
        self.bank_lens.push(record.bank_len);
    }
}

impl StepTimer {
    pub fn mean_secs(&self) -> f64 {
        if self.elapsed.is_empty() {
            return 0.0;
        }
        self.elapsed.iter().map(Duration::as_secs_f64).sum::<f64>() / self.elapsed.len() as f64
    }

    pub fn mean_bank_len(&self) -> f64 {
        if self.bank_lens.is_empty() {
            return 0.0;
        }
        self.bank_lens.iter().sum::<usize>() as f64 / self.bank_lens.len() as f64
    }
}

/// One memory-enabled run per size; nDCG@10 at the final trajectory dim.
pub fn run_memory_sweep(data: &TrainData, cfg: &TrainConfig, sizes: &[usize]) -> Result<Vec<MemorySweepRow>> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(SmecError::invalid(
            "memory sizes must be a non-empty list of positive counts",
        ));
    }
    let last = *cfg
        .trajectory
        .last()
        .ok_or_else(|| SmecError::invalid("empty trajectory"))?;
    sizes
        .iter()
        .map(|&size| {
            let run_cfg = TrainConfig {
                use_memory: true,
                memory_capacity: size,
                ..cfg.clone()
            };
            let mut timer = StepTimer::default();
            let (compressor, _) = train_any(data, &run_cfg, &mut timer)?;
            let scores = evaluate_retrieval(
                &compressor,
                &data.queries,
                &data.docs,
                &data.qrels,
                &data.val_queries,
                last,
                NDCG_K,
            )?;
            Ok(MemorySweepRow {
                memory_size: size,
                steps: timer.elapsed.len(),
                mean_step_secs: timer.mean_secs(),
                mean_bank_len: timer.mean_bank_len(),
                ndcg_at_10: mean_ndcg(&scores),
            })
        })
        .collect()
}

/// An identity stack over `dim`, used to score raw embeddings.
pub fn identity_compressor(dim: usize) -> Result<Compressor> {
    Ok(Compressor::Stack(AdapterStack::new(dim)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_planted, PlantedSpec};
    use nalgebra::{DMatrix, SymmetricEigen};
    use proptest::prelude::*;
    use rand::Rng;

    fn qrels(entries: &[(&str, &str, f64)]) -> RelevanceJudgments {
        let mut q = RelevanceJudgments::new();
        for &(a, b, g) in entries {
            q.insert(a, b, g).unwrap();
        }
        q
    }

    fn ranking(docs: &[&str]) -> Ranking {
        let n = docs.len();
        Ranking::new(
            "q",
            docs.iter()
                .enumerate()
                .map(|(i, d)| (d.to_string(), (n - i) as f64))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn ndcg_examples() {
        let q = qrels(&[("q", "a", 3.0), ("q", "b", 2.0), ("q", "c", 1.0)]);
        assert_eq!(ndcg_at_k(&ranking(&["a", "b", "c"]), &q, 10).unwrap().value, 1.0);
        let q = qrels(&[("q", "a", 0.0), ("q", "b", 2.0)]);
        let s = ndcg_at_k(&ranking(&["a", "b"]), &q, 10).unwrap();
        assert!((s.value - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert!((s.value - 0.6309).abs() < 1e-4);
        let q = qrels(&[("q", "z", 1.0)]);
        assert_eq!(ndcg_at_k(&ranking(&["a", "b"]), &q, 10).unwrap().value, 0.0);
        let none = ndcg_at_k(&ranking(&["a"]), &RelevanceJudgments::new(), 10).unwrap();
        assert!(none.zero_relevant && none.value == 0.0);
        assert!(ndcg_at_k(&ranking(&["a"]), &q, 0).is_err());
    }

    #[test]
    fn ranking_orders_and_rejects_duplicates() {
        let r = Ranking::new("q", vec![("b".into(), 1.0), ("a".into(), 1.0), ("c".into(), 2.0)]).unwrap();
        assert_eq!(r.doc_ids, ["c", "a", "b"]);
        assert!(Ranking::new("q", vec![("a".into(), 1.0), ("a".into(), 2.0)]).is_err());
    }

    #[test]
    fn ware_examples() {
        assert_eq!(ware(&[0.3, -0.2], &[0.3, -0.2]).unwrap().value, 0.0);
        assert!((ware(&[1.1, 0.9], &[1.0, 1.0]).unwrap().value - 0.1).abs() < 1e-12);
        let w = ware(&[1.0, 2.0], &[0.0, 1.0]).unwrap();
        assert_eq!((w.value, w.excluded), (1.0, 1));
        assert!(ware(&[1.0], &[0.0]).is_err());
        assert!(ware(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ware_per_dimension_examples() {
        let a = [1.0, 2.0, 0.0];
        let b = [2.0, 1.0, 0.0];
        let r = ware_per_dimension(&[(&a, &b)]).unwrap();
        assert_eq!(r.values[2], 0.0);
        let before = crate::numerics::cosine(&a, &b);
        let after = crate::numerics::cosine(&[0.0, 2.0], &[0.0, 1.0]);
        assert!((r.values[0] - (before - after).abs() / after.abs()).abs() < 1e-12);
        assert_eq!(r.ranking.len(), 3);
    }

    #[test]
    fn ware_ranks_planted_signal_first() {
        let signal = vec![2, 5, 7, 11];
        let p = synth_planted(&PlantedSpec {
            total_dim: 16,
            signal_dims: signal.clone(),
            noise_scale: 0.0,
            n_queries: 40,
            n_docs: 40,
            seed: 9,
        })
        .unwrap();
        let set = p.queries.concat(&p.docs).unwrap();
        let r = ware_for_set(&set, 500, 1).unwrap();
        let mut top = r.top(4).to_vec();
        top.sort();
        assert_eq!(top, signal);
        let min_signal = signal.iter().map(|&i| r.values[i]).fold(f64::INFINITY, f64::min);
        assert!((0..16)
            .filter(|i| !signal.contains(i))
            .all(|i| r.values[i] < min_signal));
    }

    #[test]
    fn sample_pairs_distinct() {
        let all = sample_pairs(5, 100, 0);
        assert_eq!(all.len(), 10);
        let set: HashSet<_> = all.iter().collect();
        assert_eq!(set.len(), 10);
        assert!(all.iter().all(|&(i, j)| i < j && j < 5));
        let some = sample_pairs(100, 50, 3);
        assert_eq!(some.len(), 50);
        assert_eq!(some, sample_pairs(100, 50, 3));
    }

    #[test]
    fn achievement_examples() {
        assert_eq!(achievement_rate(&[3, 1], &[1, 3, 0, 2], 2).unwrap(), 1.0);
        assert_eq!(achievement_rate(&[1, 2], &[2, 3, 0, 1], 2).unwrap(), 0.5);
        assert!(achievement_rate(&[], &[0], 1).is_err());
        assert!(achievement_rate(&[0], &[0], 2).is_err());
    }

    #[test]
    fn random_selection_rate_near_n_over_d() {
        use rand::seq::SliceRandom;
        let d = 64;
        let ranking: Vec<usize> = (0..d).collect();
        let mut rng = seeded_rng(5);
        let mut total = 0.0;
        let trials = 2000;
        for _ in 0..trials {
            let mut dims: Vec<usize> = (0..d).collect();
            dims.shuffle(&mut rng);
            total += achievement_rate(&dims[..16], &ranking, 16).unwrap();
        }
        assert!((total / trials as f64 - 0.25).abs() < 0.01);
    }

    fn set_from(rows: &[Vec<f64>]) -> EmbeddingSet {
        EmbeddingSet::from_rows((0..rows.len()).map(|i| format!("r{i}")).collect(), rows).unwrap()
    }

    #[test]
    fn pca_on_a_line() {
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let t = i as f64 * 0.3 - 2.0;
                vec![1.0 + 2.0 * t, -1.0 + t, 0.5 - 3.0 * t]
            })
            .collect();
        let set = set_from(&rows);
        let pca = pca_fit(&set, 1).unwrap();
        let c = pca.components.row(0);
        for r in &rows {
            let p = pca.project(r)[0];
            let recon: Vec<f64> = (0..3).map(|j| pca.mean[j] + p * c[j]).collect();
            let err: f64 = recon.iter().zip(r).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(err <= 1e-8, "{err}");
        }
        assert!(c.iter().fold(0.0f64, |m, &x| if x.abs() > m.abs() { x } else { m }) > 0.0);
        let err = pca_fit(&set, 2).unwrap_err();
        assert!(err.to_string().contains("rank 1"), "{err}");
    }

    fn random_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seeded_rng(seed);
        let scales: Vec<f64> = (0..d).map(|j| 1.0 + j as f64 * 0.7).collect();
        (0..n)
            .map(|_| scales.iter().map(|s| s * rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn pca_full_rank_keeps_total_variance() {
        let rows = random_rows(50, 8, 3);
        let set = set_from(&rows);
        let pca = pca_fit(&set, 8).unwrap();
        let (_, cov) = covariance(set.matrix());
        let trace: f64 = (0..8).map(|i| cov.get(i, i)).sum();
        assert!((pca.variances.iter().sum::<f64>() - trace).abs() < 1e-8);
        for i in 0..8 {
            for j in 0..8 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot(pca.components.row(i), pca.components.row(j)) - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn pca_matches_dense_eigensolver() {
        let rows = random_rows(50, 8, 4);
        let set = set_from(&rows);
        let pca = pca_fit(&set, 3).unwrap();
        let (_, cov) = covariance(set.matrix());
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(8, 8, cov.as_slice()));
        let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        vals.sort_by(|a, b| b.total_cmp(a));
        let projected = pca.transform(&set).unwrap();
        for (c, &want) in vals.iter().take(3).enumerate() {
            let col: Vec<f64> = (0..50).map(|i| projected.row(i)[c]).collect();
            let var = col.iter().map(|x| x * x).sum::<f64>() / 49.0;
            assert!((var - want).abs() < 1e-6 * want.max(1.0), "{c}: {var} vs {want}");
        }
    }

    fn brute_ndcg(gains: &[f64], k: usize) -> f64 {
        fn perms(items: &mut Vec<f64>, at: usize, best: &mut f64, k: usize) {
            if at == items.len() {
                let v: f64 = items
                    .iter()
                    .take(k)
                    .enumerate()
                    .map(|(i, &r)| (r.exp2() - 1.0) / ((i + 2) as f64).log2())
                    .sum();
                if v > *best {
                    *best = v;
                }
                return;
            }
            for i in at..items.len() {
                items.swap(at, i);
                perms(items, at + 1, best, k);
                items.swap(at, i);
            }
        }
        let mut best = 0.0;
        perms(&mut gains.to_vec(), 0, &mut best, k);
        let got: f64 = gains
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, &r)| (r.exp2() - 1.0) / ((i + 2) as f64).log2())
            .sum();
        if best == 0.0 {
            0.0
        } else {
            got / best
        }
    }

    proptest! {
        #[test]
        fn ndcg_matches_brute_force(gains in prop::collection::vec(0u8..4, 1..=5), k in 1usize..7) {
            let g: Vec<f64> = gains.iter().map(|&x| f64::from(x)).collect();
            let docs: Vec<String> = (0..g.len()).map(|i| format!("d{i}")).collect();
            let mut q = RelevanceJudgments::new();
            for (d, &x) in docs.iter().zip(&g) {
                q.insert("q", d.clone(), x).unwrap();
            }
            let refs: Vec<&str> = docs.iter().map(String::as_str).collect();
            let got = ndcg_at_k(&ranking(&refs), &q, k).unwrap().value;
            prop_assert_eq!(got, brute_ndcg(&g, k));
            prop_assert!((0.0..=1.0).contains(&got));
        }

        #[test]
        fn ware_is_scale_invariant(seed in 0u64..500, scale in 0.1f64..10.0) {
            let mut rng = seeded_rng(seed);
            let a: Vec<f64> = (0..20).map(|_| rng.gen_range(0.5..2.0)).collect();
            let b: Vec<f64> = (0..20).map(|_| rng.gen_range(0.5..2.0)).collect();
            let w = ware(&a, &b).unwrap().value;
            let sa: Vec<f64> = a.iter().map(|x| x * scale).collect();
            let sb: Vec<f64> = b.iter().map(|x| x * scale).collect();
            prop_assert!((ware(&sa, &sb).unwrap().value - w).abs() < 1e-12);
            prop_assert_eq!(ware(&a, &a).unwrap().value, 0.0);
            let looped = a.iter().zip(&b).map(|(x, y)| (x - y).abs() / y.abs()).sum::<f64>() / 20.0;
            prop_assert!((w - looped).abs() < 1e-12);
        }

        #[test]
        fn achievement_monotone(seed in 0u64..500) {
            use rand::seq::SliceRandom;
            let mut rng = seeded_rng(seed);
            let mut ranking: Vec<usize> = (0..20).collect();
            ranking.shuffle(&mut rng);
            let n = 6;
            let mut picked: Vec<usize> = (0..20).collect();
            picked.shuffle(&mut rng);
            let mut sel = picked[..4].to_vec();
            let before = achievement_rate(&sel, &ranking, n).unwrap();
            if let Some(&extra) = ranking[..n].iter().find(|i| !sel.contains(i)) {
                sel.push(extra);
                prop_assert!(achievement_rate(&sel, &ranking, n).unwrap() >= before);
            }
        }
    }
}
