//! Embedding sets, relevance judgments, planted synthetic data and query batching.
//!
//! Binary embedding layout (all integers little-endian):
//!
//! ```text
//! "SMEC" | u32 version = 1 | u64 rows N | u32 dim D | N·D f32 row-major | N × (u16 len, UTF-8 id)
//! ```
//!
//! JSONL layout: one `{"id": "...", "vec": [..]}` object per line.
//!
//! Qrels: `query_id<TAB>doc_id<TAB>gain`, `#` comment lines skipped, duplicate
//! `(query, doc)` lines resolved last-wins.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmecError};
use crate::numerics::{mix_seed, seeded_rng, Matrix};

const EMB_MAGIC: &[u8; 4] = b"SMEC";
const EMB_VERSION: u32 = 1;

/// Id-indexed dense matrix of `D`-dimensional vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    ids: Vec<String>,
    matrix: Matrix,
    index: HashMap<String, usize>,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<String>, matrix: Matrix) -> Result<Self> {
        if ids.len() != matrix.rows() {
            return Err(SmecError::invalid(format!(
                "{} ids for {} rows",
                ids.len(),
                matrix.rows()
            )));
        }
        if matrix.cols() == 0 {
            return Err(SmecError::invalid("embedding dimension must be at least 1"));
        }
        if !matrix.is_finite() {
            return Err(SmecError::invalid("embedding rows must be finite"));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(SmecError::invalid(format!("duplicate id {id:?}")));
            }
        }
        Ok(Self { ids, matrix, index })
    }

    pub fn from_rows(ids: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(ids, Matrix::from_rows(rows)?)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.matrix.row(i)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Rows as owned vectors.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.row(i).to_vec()).collect()
    }

    /// Concatenation of two sets with the same dimension.
    pub fn concat(&self, other: &EmbeddingSet) -> Result<EmbeddingSet> {
        if self.dim() != other.dim() {
            return Err(SmecError::invalid("cannot concatenate sets of different dimension"));
        }
        let mut ids = self.ids.clone();
        ids.extend(other.ids.iter().cloned());
        let mut data = self.matrix.as_slice().to_vec();
        data.extend_from_slice(other.matrix.as_slice());
        EmbeddingSet::new(ids, Matrix::from_vec(self.len() + other.len(), self.dim(), data)?)
    }
}

/// On-disk embedding encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingFormat {
    Binary,
    Jsonl,
}

impl EmbeddingFormat {
    /// Picks the format by sniffing the leading magic bytes.
    pub fn detect(path: &Path) -> Result<Self> {
        let mut head = [0u8; 4];
        let mut f = File::open(path).map_err(|e| SmecError::io(path, e))?;
        let n = f.read(&mut head).map_err(|e| SmecError::io(path, e))?;
        Ok(if n == 4 && &head == EMB_MAGIC {
            EmbeddingFormat::Binary
        } else {
            EmbeddingFormat::Jsonl
        })
    }
}

pub fn load_embeddings(path: &Path, format: EmbeddingFormat) -> Result<EmbeddingSet> {
    let file = File::open(path).map_err(|e| SmecError::io(path, e))?;
    let reader = BufReader::new(file);
    match format {
        EmbeddingFormat::Binary => read_binary(reader),
        EmbeddingFormat::Jsonl => read_jsonl(reader),
    }
}

/// Loads with the format detected from the file contents.
pub fn load_embeddings_auto(path: &Path) -> Result<EmbeddingSet> {
    load_embeddings(path, EmbeddingFormat::detect(path)?)
}

/// Writes a set. The binary format stores `f32`, so values are rounded on save.
pub fn save_embeddings(set: &EmbeddingSet, path: &Path, format: EmbeddingFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| SmecError::io(path, e))?;
    let mut w = BufWriter::new(file);
    match format {
        EmbeddingFormat::Binary => write_binary(set, &mut w),
        EmbeddingFormat::Jsonl => write_jsonl(set, &mut w),
    }
    .map_err(|e| SmecError::io(path, e))?;
    w.flush().map_err(|e| SmecError::io(path, e))
}

pub fn write_binary<W: Write>(set: &EmbeddingSet, w: &mut W) -> std::io::Result<()> {
    w.write_all(EMB_MAGIC)?;
    w.write_all(&EMB_VERSION.to_le_bytes())?;
    w.write_all(&(set.len() as u64).to_le_bytes())?;
    w.write_all(&(set.dim() as u32).to_le_bytes())?;
    for v in set.matrix.as_slice() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    for id in &set.ids {
        let bytes = id.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("id too long: {id}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
    }
    Ok(())
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| SmecError::format(format!("truncated embeddings file while reading {what}: {e}")))
}

pub fn read_binary<R: Read>(mut r: R) -> Result<EmbeddingSet> {
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if &magic != EMB_MAGIC {
        return Err(SmecError::format("bad magic: not an SMEC embeddings file"));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    read_exact_or(&mut r, &mut b4, "version")?;
    let version = u32::from_le_bytes(b4);
    if version != EMB_VERSION {
        return Err(SmecError::format(format!("unsupported embeddings version {version}")));
    }
    read_exact_or(&mut r, &mut b8, "row count")?;
    let rows = u64::from_le_bytes(b8) as usize;
    read_exact_or(&mut r, &mut b4, "dimension")?;
    let dim = u32::from_le_bytes(b4) as usize;
    if rows == 0 {
        return Err(SmecError::format("embeddings file has zero rows"));
    }
    if dim == 0 {
        return Err(SmecError::format("embeddings file has zero dimension"));
    }
    let mut raw = vec![0u8; rows * dim * 4];
    read_exact_or(&mut r, &mut raw, "values")?;
    let mut data = Vec::with_capacity(rows * dim);
    for (k, chunk) in raw.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(SmecError::format(format!("non-finite value in row {}", k / dim)));
        }
        data.push(f64::from(v));
    }
    let mut ids = Vec::with_capacity(rows);
    let mut b2 = [0u8; 2];
    for i in 0..rows {
        read_exact_or(&mut r, &mut b2, "id length")?;
        let mut buf = vec![0u8; u16::from_le_bytes(b2) as usize];
        read_exact_or(&mut r, &mut buf, "id")?;
        let id = String::from_utf8(buf).map_err(|_| SmecError::format(format!("id of row {i} is not valid UTF-8")))?;
        ids.push(id);
    }
    EmbeddingSet::new(ids, Matrix::from_vec(rows, dim, data)?).map_err(|e| SmecError::format(e.to_string()))
}

#[derive(Serialize, Deserialize)]
struct JsonRow {
    id: String,
    vec: Vec<f64>,
}

pub fn write_jsonl<W: Write>(set: &EmbeddingSet, w: &mut W) -> std::io::Result<()> {
    for i in 0..set.len() {
        let row = JsonRow {
            id: set.ids[i].clone(),
            vec: set.row(i).to_vec(),
        };
        serde_json::to_writer(&mut *w, &row)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<EmbeddingSet> {
    let mut ids = Vec::new();
    let mut data = Vec::new();
    let mut dim = None;
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(|e| SmecError::format(format!("line {}: {e}", lineno + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonRow =
            serde_json::from_str(&line).map_err(|e| SmecError::format(format!("line {}: {e}", lineno + 1)))?;
        let expected = *dim.get_or_insert(row.vec.len());
        if row.vec.len() != expected {
            return Err(SmecError::format(format!(
                "row {} ({}) has dimension {}, expected {expected}",
                ids.len(),
                row.id,
                row.vec.len()
            )));
        }
        if row.vec.iter().any(|v| !v.is_finite()) {
            return Err(SmecError::format(format!(
                "row {} ({}) has a non-finite value",
                ids.len(),
                row.id
            )));
        }
        ids.push(row.id);
        data.extend(row.vec);
    }
    let dim = match dim {
        None => return Err(SmecError::format("embeddings file has zero rows")),
        Some(d) => d,
    };
    let rows = ids.len();
    EmbeddingSet::new(ids, Matrix::from_vec(rows, dim, data)?).map_err(|e| SmecError::format(e.to_string()))
}

/// Graded relevance: query id → doc id → gain. Absent pairs have gain 0.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RelevanceJudgments {
    entries: BTreeMap<String, BTreeMap<String, f64>>,
}

impl RelevanceJudgments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query: impl Into<String>, doc: impl Into<String>, gain: f64) -> Result<()> {
        if !(gain >= 0.0) || !gain.is_finite() {
            return Err(SmecError::invalid(format!("gain must be finite and >= 0, got {gain}")));
        }
        self.entries.entry(query.into()).or_default().insert(doc.into(), gain);
        Ok(())
    }

    pub fn gain(&self, query: &str, doc: &str) -> f64 {
        self.entries.get(query).and_then(|m| m.get(doc)).copied().unwrap_or(0.0)
    }

    /// Judged docs of a query in id order.
    pub fn judged(&self, query: &str) -> Option<&BTreeMap<String, f64>> {
        self.entries.get(query)
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entries(&self) -> &BTreeMap<String, BTreeMap<String, f64>> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks every referenced id against the bound query and doc sets.
    pub fn validate_against(&self, queries: &EmbeddingSet, docs: &EmbeddingSet) -> Result<()> {
        for (q, judged) in &self.entries {
            if queries.position(q).is_none() {
                return Err(SmecError::format(format!("qrels reference unknown query {q:?}")));
            }
            for d in judged.keys() {
                if docs.position(d).is_none() {
                    return Err(SmecError::format(format!("qrels reference unknown doc {d:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn write_tsv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for (q, judged) in &self.entries {
            for (d, g) in judged {
                writeln!(w, "{q}\t{d}\t{g}")?;
            }
        }
        Ok(())
    }
}

pub fn load_qrels(path: &Path) -> Result<RelevanceJudgments> {
    let file = File::open(path).map_err(|e| SmecError::io(path, e))?;
    parse_qrels(BufReader::new(file))
}

pub fn save_qrels(qrels: &RelevanceJudgments, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| SmecError::io(path, e))?;
    let mut w = BufWriter::new(file);
    qrels.write_tsv(&mut w).map_err(|e| SmecError::io(path, e))?;
    w.flush().map_err(|e| SmecError::io(path, e))
}

/// Parses qrels TSV. Lines without a tab fall back to whitespace splitting.
pub fn parse_qrels<R: BufRead>(r: R) -> Result<RelevanceJudgments> {
    let mut out = RelevanceJudgments::new();
    for (i, line) in r.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| SmecError::format(format!("qrels line {lineno}: {e}")))?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = if trimmed.contains('\t') {
            trimmed.split('\t').collect()
        } else {
            trimmed.split_whitespace().collect()
        };
        if fields.len() != 3 {
            return Err(SmecError::format(format!(
                "qrels line {lineno}: expected 3 columns, found {}",
                fields.len()
            )));
        }
        let gain: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| SmecError::format(format!("qrels line {lineno}: gain {:?} is not numeric", fields[2])))?;
        if !(gain >= 0.0) || !gain.is_finite() {
            return Err(SmecError::format(format!(
                "qrels line {lineno}: gain {gain} must be finite and >= 0"
            )));
        }
        out.insert(fields[0].trim(), fields[1].trim(), gain)?;
    }
    Ok(out)
}

/// Ground-truth specification for a planted synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub total_dim: usize,
    /// Dimensions that carry the shared latent signal.
    pub signal_dims: Vec<usize>,
    pub noise_scale: f64,
    pub n_queries: usize,
    pub n_docs: usize,
    pub seed: u64,
}

impl PlantedSpec {
    fn validate(&self) -> Result<()> {
        if self.total_dim == 0 {
            return Err(SmecError::invalid("total_dim must be at least 1"));
        }
        if self.signal_dims.len() > self.total_dim {
            return Err(SmecError::invalid("more signal dims than total dims"));
        }
        let mut seen = vec![false; self.total_dim];
        for &d in &self.signal_dims {
            if d >= self.total_dim {
                return Err(SmecError::invalid(format!("signal dim {d} out of range")));
            }
            if std::mem::replace(&mut seen[d], true) {
                return Err(SmecError::invalid(format!("signal dim {d} repeated")));
            }
        }
        if self.signal_dims.is_empty() && self.n_queries > 0 {
            return Err(SmecError::invalid("planted data needs at least one signal dimension"));
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return Err(SmecError::invalid("noise_scale must be finite and >= 0"));
        }
        Ok(())
    }
}

/// `n` distinct dims of `0..dim`, uniformly at random from `seed`, ascending.
pub fn random_signal_dims(dim: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > dim {
        return Err(SmecError::invalid(format!("{n} signal dims requested from {dim} dims")));
    }
    let mut rng = seeded_rng(mix_seed(seed, 0x5161));
    let mut dims = rand::seq::index::sample(&mut rng, dim, n).into_vec();
    dims.sort_unstable();
    Ok(dims)
}

/// Output of [`synth_planted`].
#[derive(Debug, Clone)]
pub struct PlantedData {
    pub queries: EmbeddingSet,
    pub docs: EmbeddingSet,
    pub qrels: RelevanceJudgments,
}

/// Generates queries and docs whose relevant pairs share a latent vector that
/// lives only on the signal dimensions, plus `σ`-scaled noise on every dimension.
///
/// Doc `k` is relevant (gain 1) to query `k mod n_queries`. Values are rounded
/// to `f32` precision so the sets round-trip through the binary format exactly.
pub fn synth_planted(spec: &PlantedSpec) -> Result<PlantedData> {
    spec.validate()?;
    let mut latent_rng = seeded_rng(mix_seed(spec.seed, 1));
    let mut noise_rng = seeded_rng(mix_seed(spec.seed, 2));
    let d = spec.total_dim;
    let latents: Vec<Vec<f64>> = (0..spec.n_queries)
        .map(|_| {
            spec.signal_dims
                .iter()
                .map(|_| StandardNormal.sample(&mut latent_rng))
                .collect()
        })
        .collect();

    let mut embed = |latent: Option<&Vec<f64>>| -> Vec<f64> {
        let mut v = vec![0.0; d];
        if let Some(lat) = latent {
            for (&dim, &x) in spec.signal_dims.iter().zip(lat) {
                v[dim] = x;
            }
        }
        for x in v.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut noise_rng);
            *x = f64::from((*x + spec.noise_scale * n) as f32);
        }
        v
    };

    let query_rows: Vec<Vec<f64>> = latents.iter().map(|l| embed(Some(l))).collect();
    let mut qrels = RelevanceJudgments::new();
    let mut doc_rows = Vec::with_capacity(spec.n_docs);
    for k in 0..spec.n_docs {
        if spec.n_queries == 0 {
            doc_rows.push(embed(None));
            continue;
        }
        let q = k % spec.n_queries;
        doc_rows.push(embed(Some(&latents[q])));
        qrels.insert(format!("q{q}"), format!("d{k}"), 1.0)?;
    }
    let queries = if query_rows.is_empty() {
        EmbeddingSet::new(Vec::new(), Matrix::zeros(0, d))?
    } else {
        EmbeddingSet::from_rows((0..spec.n_queries).map(|i| format!("q{i}")).collect(), &query_rows)?
    };
    let docs = if doc_rows.is_empty() {
        EmbeddingSet::new(Vec::new(), Matrix::zeros(0, d))?
    } else {
        EmbeddingSet::from_rows((0..spec.n_docs).map(|i| format!("d{i}")).collect(), &doc_rows)?
    };
    Ok(PlantedData { queries, docs, qrels })
}

/// A batch of queries with the docs judged for each of them.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBatch {
    /// Query row indices.
    pub queries: Vec<usize>,
    /// Per query: `(doc row index, gain)` in doc-id order.
    pub judged: Vec<Vec<(usize, f64)>>,
}

/// Shuffled query batching with a per-epoch deterministic order.
#[derive(Debug, Clone)]
pub struct Batcher {
    items: Vec<usize>,
    judged: Vec<Vec<(usize, f64)>>,
    batch_size: usize,
    seed: u64,
}

impl Batcher {
    /// `items` are query row indices; judged docs are resolved through `qrels`
    /// (unknown doc ids are skipped).
    pub fn new(
        queries: &EmbeddingSet,
        docs: &EmbeddingSet,
        qrels: &RelevanceJudgments,
        items: Vec<usize>,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if batch_size < 2 {
            return Err(SmecError::invalid(format!("batch size must be >= 2, got {batch_size}")));
        }
        let judged = items.iter().map(|&q| judged_docs(queries.id(q), docs, qrels)).collect();
        Ok(Self {
            items,
            judged,
            batch_size,
            seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.items.len().div_ceil(self.batch_size)
    }

    pub fn epoch(&self, epoch: usize) -> Vec<QueryBatch> {
        let mut order: Vec<usize> = (0..self.items.len()).collect();
        order.shuffle(&mut seeded_rng(mix_seed(self.seed, 0xBA7C_0000 + epoch as u64)));
        order
            .chunks(self.batch_size)
            .map(|chunk| QueryBatch {
                queries: chunk.iter().map(|&i| self.items[i]).collect(),
                judged: chunk.iter().map(|&i| self.judged[i].clone()).collect(),
            })
            .collect()
    }
}

/// Judged docs of one query as `(doc row, gain)` pairs.
pub fn judged_docs(query_id: &str, docs: &EmbeddingSet, qrels: &RelevanceJudgments) -> Vec<(usize, f64)> {
    qrels
        .judged(query_id)
        .map(|m| {
            m.iter()
                .filter_map(|(d, &g)| docs.position(d).map(|p| (p, g)))
                .collect()
        })
        .unwrap_or_default()
}

/// Convenience wrapper matching the one-epoch view of [`Batcher`].
pub fn batch_iter(
    queries: &EmbeddingSet,
    docs: &EmbeddingSet,
    qrels: &RelevanceJudgments,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<QueryBatch>> {
    let items = (0..queries.len()).collect();
    Ok(Batcher::new(queries, docs, qrels, items, batch_size, seed)?.epoch(epoch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::cosine;
    use rand::Rng;
    use std::io::Cursor;

    fn random_set(n: usize, d: usize, seed: u64) -> EmbeddingSet {
        let mut rng = seeded_rng(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| f64::from(rng.gen_range(-3.0f32..3.0))).collect())
            .collect();
        EmbeddingSet::from_rows((0..n).map(|i| format!("id-{i}")).collect(), &rows).unwrap()
    }

    #[test]
    fn jsonl_two_rows() {
        let text = "{\"id\":\"a\",\"vec\":[1,2,3]}\n{\"id\":\"b\",\"vec\":[4,5,6]}\n";
        let set = read_jsonl(Cursor::new(text)).unwrap();
        assert_eq!((set.len(), set.dim()), (2, 3));
        assert_eq!(set.row(1), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn empty_files_rejected() {
        assert!(matches!(read_jsonl(Cursor::new("")), Err(SmecError::Format(_))));
        let mut buf = Vec::new();
        buf.extend_from_slice(b"SMEC");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&0u64.to_le_bytes());
        buf.extend_from_slice(&3u32.to_le_bytes());
        assert!(matches!(read_binary(Cursor::new(buf)), Err(SmecError::Format(_))));
    }

    #[test]
    fn jsonl_dimension_mismatch_names_row() {
        let text = "{\"id\":\"a\",\"vec\":[1,2]}\n{\"id\":\"b\",\"vec\":[1]}\n";
        let err = read_jsonl(Cursor::new(text)).unwrap_err().to_string();
        assert!(err.contains("row 1") && err.contains("(b)"), "{err}");
    }

    #[test]
    fn binary_non_finite_rejected() {
        let set = random_set(2, 2, 1);
        let mut buf = Vec::new();
        write_binary(&set, &mut buf).unwrap();
        buf[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(read_binary(Cursor::new(buf)), Err(SmecError::Format(_))));
    }

    #[test]
    fn round_trip_both_formats() {
        let set = random_set(17, 9, 5);
        let mut bin = Vec::new();
        write_binary(&set, &mut bin).unwrap();
        assert_eq!(read_binary(Cursor::new(bin)).unwrap(), set);
        let mut js = Vec::new();
        write_jsonl(&set, &mut js).unwrap();
        assert_eq!(read_jsonl(Cursor::new(js)).unwrap(), set);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let m = Matrix::from_vec(2, 1, vec![1.0, 2.0]).unwrap();
        assert!(EmbeddingSet::new(vec!["x".into(), "x".into()], m).is_err());
    }

    #[test]
    fn qrels_basic_and_last_wins() {
        let q = parse_qrels(Cursor::new("q1\td1\t2\nq1\td2\t0\n")).unwrap();
        assert_eq!(q.gain("q1", "d1"), 2.0);
        assert_eq!(q.gain("q1", "d2"), 0.0);
        assert_eq!(q.judged("q1").unwrap().len(), 2);

        let q = parse_qrels(Cursor::new("# comment\nq1 d1 2\nq1 d1 5\n")).unwrap();
        assert_eq!(q.gain("q1", "d1"), 5.0);
        assert_eq!(q.len(), 1);
    }

    #[test]
    fn qrels_non_numeric_gain_reports_line() {
        let err = parse_qrels(Cursor::new("q1\td1\t1\nq1\td2\thigh\n")).unwrap_err();
        assert!(matches!(err, SmecError::Format(ref m) if m.contains("line 2")), "{err}");
    }

    #[test]
    fn qrels_random_file_matches_naive_parse() {
        let mut rng = seeded_rng(9);
        let mut text = String::new();
        let mut naive: HashMap<(String, String), f64> = HashMap::new();
        for _ in 0..100 {
            let q = format!("q{}", rng.gen_range(0..8));
            let d = format!("d{}", rng.gen_range(0..12));
            let g = rng.gen_range(0..4) as f64;
            text.push_str(&format!("{q}\t{d}\t{g}\n"));
            naive.insert((q, d), g);
        }
        let parsed = parse_qrels(Cursor::new(text)).unwrap();
        assert_eq!(parsed.len(), naive.len());
        for ((q, d), g) in &naive {
            assert_eq!(parsed.gain(q, d), *g);
        }
    }

    fn spec(sigma: f64, seed: u64) -> PlantedSpec {
        PlantedSpec {
            total_dim: 16,
            signal_dims: vec![1, 4, 9, 15],
            noise_scale: sigma,
            n_queries: 5,
            n_docs: 20,
            seed,
        }
    }

    #[test]
    fn planted_noiseless_pair_is_identical_on_signal() {
        let data = synth_planted(&PlantedSpec {
            n_queries: 1,
            n_docs: 1,
            ..spec(0.0, 3)
        })
        .unwrap();
        let s = [1usize, 4, 9, 15];
        let q: Vec<f64> = s.iter().map(|&i| data.queries.row(0)[i]).collect();
        let d: Vec<f64> = s.iter().map(|&i| data.docs.row(0)[i]).collect();
        assert_eq!(cosine(&q, &d), 1.0);
        assert_eq!(data.qrels.gain("q0", "d0"), 1.0);
    }

    #[test]
    fn planted_deterministic() {
        let a = synth_planted(&spec(0.1, 4)).unwrap();
        let b = synth_planted(&spec(0.1, 4)).unwrap();
        assert_eq!(a.queries, b.queries);
        assert_eq!(a.docs, b.docs);
        assert_eq!(a.qrels, b.qrels);
    }

    #[test]
    fn planted_zeroing_noise_dims_is_exact_at_zero_sigma() {
        let data = synth_planted(&spec(0.0, 8)).unwrap();
        let signal = [1usize, 4, 9, 15];
        for (q, judged) in data.qrels.entries() {
            let qi = data.queries.position(q).unwrap();
            for dname in judged.keys() {
                let di = data.docs.position(dname).unwrap();
                let full = cosine(data.queries.row(qi), data.docs.row(di));
                let mask = |v: &[f64]| -> Vec<f64> {
                    v.iter()
                        .enumerate()
                        .map(|(i, &x)| if signal.contains(&i) { x } else { 0.0 })
                        .collect()
                };
                let masked = cosine(&mask(data.queries.row(qi)), &mask(data.docs.row(di)));
                assert_eq!(full, masked);
            }
        }
    }

    #[test]
    fn planted_rejects_empty_signal() {
        let s = PlantedSpec {
            signal_dims: vec![],
            ..spec(0.1, 1)
        };
        assert!(matches!(synth_planted(&s), Err(SmecError::InvalidArgument(_))));
        let s = PlantedSpec {
            signal_dims: vec![3, 3],
            ..spec(0.1, 1)
        };
        assert!(synth_planted(&s).is_err());
    }

    #[test]
    fn batches_partition_and_determinism() {
        let queries = random_set(10, 2, 1);
        let docs = random_set(3, 2, 2);
        let qrels = RelevanceJudgments::new();
        let b = Batcher::new(&queries, &docs, &qrels, (0..10).collect(), 3, 42).unwrap();
        let sizes: Vec<usize> = b.epoch(0).iter().map(|x| x.queries.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        assert_eq!(b.epoch(0), b.epoch(0));
        let again = Batcher::new(&queries, &docs, &qrels, (0..10).collect(), 3, 42).unwrap();
        assert_eq!(b.epoch(1), again.epoch(1));
        assert!(matches!(
            Batcher::new(&queries, &docs, &qrels, vec![0], 1, 0),
            Err(SmecError::InvalidArgument(_))
        ));
    }

    #[test]
    fn shuffle_preserves_multiset() {
        let queries = random_set(1000, 1, 3);
        let docs = random_set(1, 1, 4);
        let b = Batcher::new(&queries, &docs, &RelevanceJudgments::new(), (0..1000).collect(), 7, 5).unwrap();
        let mut seen: Vec<usize> = b.epoch(2).into_iter().flat_map(|x| x.queries).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..1000).collect::<Vec<_>>());
    }
}
