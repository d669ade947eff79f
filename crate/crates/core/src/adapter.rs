//! The compression network.
//!
//! A stage maps `in_dim → out_dim`: it picks `out_dim` input coordinates
//! (adaptive Gumbel top-k over learnable logits, or a plain prefix) and then
//! applies a residual dense layer `z + W·z + b` at the reduced dimension.
//! Stages chain into an [`AdapterStack`]. [`MrlAdapter`] is the joint-training
//! baseline: one residual dense layer at full dimension whose nested
//! truncations are trained together.
//!
//! Checkpoint layout (`SMCA`, integers and floats little-endian):
//!
//! ```text
//! "SMCA" | u32 version | u32 input_dim | u32 stage count
//! per stage: u32 in_dim | u32 out_dim | u8 flags | f32 tau | f32 logits[in] | f32 W[out·out] | f32 b[out]
//! u64 checksum (first 8 bytes of SHA-256 over everything before it)
//! ```
//!
//! `flags` bit 0 marks a frozen stage, bit 1 a prefix-selection stage.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Result, SmecError};
use crate::numerics::{sample_gumbel, seeded_rng, softmax_tau, top_k_indices, Matrix, SeededRng};

/// Standard deviation of the initial dense weights.
pub const INIT_WEIGHT_STD: f64 = 0.02;
/// Initial Gumbel temperature.
pub const TAU_START: f64 = 1.0;
/// Final Gumbel temperature at the end of a stage's epoch budget.
pub const TAU_END: f64 = 0.1;

const STACK_MAGIC: &[u8; 4] = b"SMCA";
const MRL_MAGIC: &[u8; 4] = b"SMCM";
const CKPT_VERSION: u32 = 1;
const FLAG_FROZEN: u8 = 1;
const FLAG_PREFIX: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub in_dim: usize,
    pub out_dim: usize,
}

impl StageSpec {
    pub fn new(in_dim: usize, out_dim: usize) -> Result<Self> {
        if out_dim == 0 || out_dim >= in_dim {
            return Err(SmecError::invalid(format!(
                "stage needs 1 <= out_dim < in_dim, got {in_dim} -> {out_dim}"
            )));
        }
        Ok(Self { in_dim, out_dim })
    }
}

/// How a stage chooses its surviving coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionKind {
    /// Gumbel-perturbed top-k over learnable logits.
    Adaptive,
    /// Fixed truncation to the first `out_dim` coordinates.
    Prefix,
}

/// Chosen coordinates of one selection draw.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// Strictly ascending input positions.
    pub indices: Vec<usize>,
    /// `softmax_τ(logits + G)` over all inputs; present only for training draws.
    pub soft_weights: Option<Vec<f64>>,
}

/// Forward mode: training draws Gumbel noise from the caller's stream.
pub enum Mode<'a> {
    Train(&'a mut SeededRng),
    Infer,
}

fn check_select_args(len: usize, out_dim: usize) -> Result<()> {
    if out_dim == 0 || out_dim >= len {
        return Err(SmecError::invalid(format!(
            "selection needs 1 <= out_dim < {len}, got {out_dim}"
        )));
    }
    Ok(())
}

/// Training-time selection: top-`out_dim` of `logits + G`, with the
/// temperature softmax of the perturbed logits kept for the backward pass.
pub fn ads_select_train(logits: &[f64], out_dim: usize, tau: f64, rng: &mut SeededRng) -> Result<SelectionResult> {
    check_select_args(logits.len(), out_dim)?;
    let noise = sample_gumbel(logits.len(), rng);
    ads_select_with_noise(logits, out_dim, tau, &noise)
}

/// [`ads_select_train`] with the Gumbel draws supplied by the caller.
pub fn ads_select_with_noise(logits: &[f64], out_dim: usize, tau: f64, noise: &[f64]) -> Result<SelectionResult> {
    check_select_args(logits.len(), out_dim)?;
    if noise.len() != logits.len() {
        return Err(SmecError::invalid("noise length must match logits"));
    }
    let perturbed: Vec<f64> = logits.iter().zip(noise).map(|(l, g)| l + g).collect();
    let soft = softmax_tau(&perturbed, tau)?;
    Ok(SelectionResult {
        indices: top_k_indices(&perturbed, out_dim),
        soft_weights: Some(soft),
    })
}

/// Deterministic inference selection: top-`out_dim` raw logits.
pub fn ads_select_infer(logits: &[f64], out_dim: usize) -> Result<SelectionResult> {
    check_select_args(logits.len(), out_dim)?;
    Ok(SelectionResult {
        indices: top_k_indices(logits, out_dim),
        soft_weights: None,
    })
}

pub fn prefix_select(in_dim: usize, out_dim: usize) -> Result<SelectionResult> {
    check_select_args(in_dim, out_dim)?;
    Ok(SelectionResult {
        indices: (0..out_dim).collect(),
        soft_weights: None,
    })
}

/// `x + W·x + b`
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualDense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl ResidualDense {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(dim, dim),
            bias: vec![0.0; dim],
        }
    }

    pub fn init(dim: usize, seed: u64) -> Self {
        let normal = Normal::new(0.0, INIT_WEIGHT_STD).expect("valid std");
        let mut rng = seeded_rng(seed);
        let data = (0..dim * dim).map(|_| normal.sample(&mut rng)).collect();
        Self {
            weight: Matrix::from_vec(dim, dim, data).expect("finite init"),
            bias: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let wx = self.weight.matvec(x);
        x.iter()
            .zip(wx)
            .zip(&self.bias)
            .map(|((xi, wxi), bi)| xi + wxi + bi)
            .collect()
    }
}

/// Forward intermediates of a single stage application.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCache {
    pub indices: Vec<usize>,
    pub soft_weights: Option<Vec<f64>>,
    /// Gathered input before the residual layer.
    pub selected: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterStage {
    pub spec: StageSpec,
    pub logits: Vec<f64>,
    pub dense: ResidualDense,
    pub tau: f64,
    pub selection: SelectionKind,
    frozen: bool,
}

impl AdapterStage {
    /// Fresh unfrozen stage: zero logits, `W ~ N(0, 0.02²)`, zero bias.
    pub fn new(spec: StageSpec, selection: SelectionKind, init_seed: u64) -> Self {
        Self {
            spec,
            logits: vec![0.0; spec.in_dim],
            dense: ResidualDense::init(spec.out_dim, init_seed),
            tau: TAU_START,
            selection,
            frozen: false,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Draws a selection for this stage.
    pub fn select(&self, mode: Mode<'_>) -> Result<SelectionResult> {
        match (self.selection, mode) {
            (SelectionKind::Prefix, _) => prefix_select(self.spec.in_dim, self.spec.out_dim),
            (SelectionKind::Adaptive, Mode::Infer) => ads_select_infer(&self.logits, self.spec.out_dim),
            (SelectionKind::Adaptive, Mode::Train(rng)) => {
                ads_select_train(&self.logits, self.spec.out_dim, self.tau, rng)
            }
        }
    }

    /// Applies a fixed selection followed by the residual layer.
    pub fn apply(&self, z: &[f64], selection: &SelectionResult) -> Result<(Vec<f64>, Vec<f64>)> {
        if z.len() != self.spec.in_dim {
            return Err(SmecError::invalid(format!(
                "stage expects input of length {}, got {}",
                self.spec.in_dim,
                z.len()
            )));
        }
        let selected: Vec<f64> = selection.indices.iter().map(|&i| z[i]).collect();
        let out = self.dense.forward(&selected);
        Ok((out, selected))
    }

    /// Single-vector forward. Training mode draws a fresh selection per call.
    pub fn forward(&self, z: &[f64], mode: Mode<'_>) -> Result<(Vec<f64>, StageCache)> {
        let selection = self.select(mode)?;
        let (out, selected) = self.apply(z, &selection)?;
        Ok((
            out,
            StageCache {
                indices: selection.indices,
                soft_weights: selection.soft_weights,
                selected,
            },
        ))
    }

    /// Number of trainable scalars (logits only count for adaptive stages).
    pub fn param_count(&self) -> usize {
        let logits = match self.selection {
            SelectionKind::Adaptive => self.spec.in_dim,
            SelectionKind::Prefix => 0,
        };
        logits + self.spec.out_dim * self.spec.out_dim + self.spec.out_dim
    }

    /// Trainable parameters flattened as `[logits?, W row-major, b]`.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        if self.selection == SelectionKind::Adaptive {
            out.extend_from_slice(&self.logits);
        }
        out.extend_from_slice(self.dense.weight.as_slice());
        out.extend_from_slice(&self.dense.bias);
        out
    }

    /// Overwrites the trainable parameters; refused on frozen stages.
    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if self.frozen {
            return Err(SmecError::InvalidState("cannot mutate a frozen stage".into()));
        }
        if params.len() != self.param_count() {
            return Err(SmecError::invalid(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(SmecError::invalid("non-finite parameter update"));
        }
        let mut rest = params;
        if self.selection == SelectionKind::Adaptive {
            self.logits.copy_from_slice(&rest[..self.spec.in_dim]);
            rest = &rest[self.spec.in_dim..];
        }
        let w = self.spec.out_dim * self.spec.out_dim;
        self.dense.weight.as_mut_slice().copy_from_slice(&rest[..w]);
        self.dense.bias.copy_from_slice(&rest[w..]);
        Ok(())
    }
}

/// Ordered chain of stages.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterStack {
    input_dim: usize,
    stages: Vec<AdapterStage>,
}

impl AdapterStack {
    pub fn new(input_dim: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(SmecError::invalid("input dimension must be at least 1"));
        }
        Ok(Self {
            input_dim,
            stages: Vec::new(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.stages.last().map_or(self.input_dim, |s| s.spec.out_dim)
    }

    pub fn stages(&self) -> &[AdapterStage] {
        &self.stages
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// `[input_dim, out_0, out_1, ...]`
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim)
            .chain(self.stages.iter().map(|s| s.spec.out_dim))
            .collect()
    }

    /// Mutable access to an unfrozen stage.
    pub fn stage_mut(&mut self, idx: usize) -> Result<&mut AdapterStage> {
        let n = self.stages.len();
        let stage = self
            .stages
            .get_mut(idx)
            .ok_or_else(|| SmecError::invalid(format!("stage {idx} out of range ({n} stages)")))?;
        if stage.frozen {
            return Err(SmecError::InvalidState(format!("stage {idx} is frozen")));
        }
        Ok(stage)
    }

    /// Applies stages `0..=upto` (`None` applies nothing).
    pub fn forward(&self, z: &[f64], upto: Option<usize>, mut mode: Mode<'_>) -> Result<Vec<f64>> {
        if z.len() != self.input_dim {
            return Err(SmecError::invalid(format!(
                "stack expects input of length {}, got {}",
                self.input_dim,
                z.len()
            )));
        }
        let Some(upto) = upto else {
            return Ok(z.to_vec());
        };
        if upto >= self.stages.len() {
            return Err(SmecError::invalid(format!(
                "stage index {upto} out of range ({} stages)",
                self.stages.len()
            )));
        }
        let mut cur = z.to_vec();
        for stage in &self.stages[..=upto] {
            let m = match &mut mode {
                Mode::Train(rng) => Mode::Train(rng),
                Mode::Infer => Mode::Infer,
            };
            cur = stage.forward(&cur, m)?.0;
        }
        Ok(cur)
    }

    /// Inference-mode output at the stack's dimension `dim` (one of [`Self::dims`]).
    pub fn embed(&self, z: &[f64], dim: usize) -> Result<Vec<f64>> {
        let pos = self
            .dims()
            .iter()
            .position(|&d| d == dim)
            .ok_or_else(|| SmecError::invalid(format!("dimension {dim} not in stack dims {:?}", self.dims())))?;
        self.forward(z, pos.checked_sub(1), Mode::Infer)
    }

    /// Input positions surviving all inference selections through stage `upto`.
    pub fn composed_indices(&self, upto: usize) -> Result<Vec<usize>> {
        if upto >= self.stages.len() {
            return Err(SmecError::invalid(format!("stage index {upto} out of range")));
        }
        let mut map: Vec<usize> = (0..self.input_dim).collect();
        for stage in &self.stages[..=upto] {
            let sel = stage.select(Mode::Infer)?;
            map = sel.indices.iter().map(|&i| map[i]).collect();
        }
        Ok(map)
    }

    /// Freezes stages `0..=idx`.
    pub fn freeze_through(&mut self, idx: usize) -> Result<()> {
        if idx >= self.stages.len() {
            return Err(SmecError::invalid(format!(
                "stage index {idx} out of range ({} stages)",
                self.stages.len()
            )));
        }
        for stage in &mut self.stages[..=idx] {
            stage.freeze();
        }
        Ok(())
    }

    /// Appends a fresh unfrozen stage at the tail.
    pub fn append_stage(&mut self, spec: StageSpec, selection: SelectionKind, init_seed: u64) -> Result<usize> {
        if spec.in_dim != self.output_dim() {
            return Err(SmecError::invalid(format!(
                "stage input {} does not match stack output {}",
                spec.in_dim,
                self.output_dim()
            )));
        }
        StageSpec::new(spec.in_dim, spec.out_dim)?;
        self.stages.push(AdapterStage::new(spec, selection, init_seed));
        Ok(self.stages.len() - 1)
    }

    /// Index of the single unfrozen stage, if any.
    pub fn active_stage(&self) -> Option<usize> {
        self.stages.iter().position(|s| !s.frozen)
    }

    /// Digest of every frozen stage's parameters.
    pub fn frozen_fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for s in self.stages.iter().filter(|s| s.frozen) {
            for v in s.logits.iter().chain(s.dense.weight.as_slice()).chain(&s.dense.bias) {
                h.update(v.to_bits().to_le_bytes());
            }
            h.update(s.tau.to_bits().to_le_bytes());
        }
        h.finalize().into()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STACK_MAGIC);
        push_u32(&mut out, CKPT_VERSION);
        push_u32(&mut out, self.input_dim as u32);
        push_u32(&mut out, self.stages.len() as u32);
        for s in &self.stages {
            push_u32(&mut out, s.spec.in_dim as u32);
            push_u32(&mut out, s.spec.out_dim as u32);
            let mut flags = 0u8;
            if s.frozen {
                flags |= FLAG_FROZEN;
            }
            if s.selection == SelectionKind::Prefix {
                flags |= FLAG_PREFIX;
            }
            out.push(flags);
            push_f32(&mut out, s.tau);
            push_f32s(&mut out, &s.logits);
            push_f32s(&mut out, s.dense.weight.as_slice());
            push_f32s(&mut out, &s.dense.bias);
        }
        append_checksum(&mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::checked(bytes, STACK_MAGIC)?;
        let input_dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut stack = AdapterStack::new(input_dim).map_err(|e| SmecError::format(e.to_string()))?;
        for i in 0..count {
            let in_dim = r.u32()? as usize;
            let out_dim = r.u32()? as usize;
            let spec = StageSpec::new(in_dim, out_dim).map_err(|e| SmecError::format(format!("stage {i}: {e}")))?;
            if in_dim != stack.output_dim() {
                return Err(SmecError::format(format!("stage {i} breaks the dimension chain")));
            }
            let flags = r.u8()?;
            let tau = r.f32()?;
            let logits = r.f32s(in_dim)?;
            let weight = Matrix::from_vec(out_dim, out_dim, r.f32s(out_dim * out_dim)?)
                .map_err(|e| SmecError::format(e.to_string()))?;
            let bias = r.f32s(out_dim)?;
            stack.stages.push(AdapterStage {
                spec,
                logits,
                dense: ResidualDense { weight, bias },
                tau,
                selection: if flags & FLAG_PREFIX != 0 {
                    SelectionKind::Prefix
                } else {
                    SelectionKind::Adaptive
                },
                frozen: flags & FLAG_FROZEN != 0,
            });
        }
        r.finish()?;
        Ok(stack)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| SmecError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| SmecError::io(path, e))?)
    }
}

/// Joint-training baseline: a residual dense layer at full dimension followed
/// by nested reductions to each trajectory dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct MrlAdapter {
    pub dense: ResidualDense,
    trajectory: Vec<usize>,
    /// Per reduction level `m ≥ 1`: logits over the level `m−1` coordinates
    /// (adaptive mode only).
    pub selectors: Option<Vec<Vec<f64>>>,
    pub tau: f64,
}

impl MrlAdapter {
    pub fn new(trajectory: &[usize], adaptive: bool, init_seed: u64) -> Result<Self> {
        validate_trajectory(trajectory)?;
        let selectors = adaptive.then(|| {
            trajectory[..trajectory.len() - 1]
                .iter()
                .map(|&d| vec![0.0; d])
                .collect()
        });
        Ok(Self {
            dense: ResidualDense::init(trajectory[0], init_seed),
            trajectory: trajectory.to_vec(),
            selectors,
            tau: TAU_START,
        })
    }

    pub fn trajectory(&self) -> &[usize] {
        &self.trajectory
    }

    pub fn is_adaptive(&self) -> bool {
        self.selectors.is_some()
    }

    /// Trainable parameters flattened as `[W row-major, b, selector logits...]`.
    pub fn params(&self) -> Vec<f64> {
        let mut out = self.dense.weight.as_slice().to_vec();
        out.extend_from_slice(&self.dense.bias);
        if let Some(sel) = &self.selectors {
            for s in sel {
                out.extend_from_slice(s);
            }
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let expected = self.params().len();
        if params.len() != expected {
            return Err(SmecError::invalid(format!(
                "expected {expected} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(SmecError::invalid("non-finite parameter update"));
        }
        let d = self.trajectory[0];
        let (w, rest) = params.split_at(d * d);
        self.dense.weight.as_mut_slice().copy_from_slice(w);
        let (b, mut rest) = rest.split_at(d);
        self.dense.bias.copy_from_slice(b);
        if let Some(sel) = self.selectors.as_mut() {
            for s in sel.iter_mut() {
                let (head, tail) = rest.split_at(s.len());
                s.copy_from_slice(head);
                rest = tail;
            }
        }
        Ok(())
    }

    /// Selections for levels `1..` (relative to the previous level).
    pub fn select(&self, mode: &mut Mode<'_>) -> Result<Vec<SelectionResult>> {
        let mut out = Vec::with_capacity(self.trajectory.len() - 1);
        for m in 1..self.trajectory.len() {
            let sel = match (&self.selectors, &mut *mode) {
                (None, _) => prefix_select(self.trajectory[m - 1], self.trajectory[m])?,
                (Some(s), Mode::Infer) => ads_select_infer(&s[m - 1], self.trajectory[m])?,
                (Some(s), Mode::Train(rng)) => ads_select_train(&s[m - 1], self.trajectory[m], self.tau, rng)?,
            };
            out.push(sel);
        }
        Ok(out)
    }

    /// Outputs at every level given fixed selections.
    pub fn levels(&self, z: &[f64], selections: &[SelectionResult]) -> Result<Vec<Vec<f64>>> {
        if z.len() != self.trajectory[0] {
            return Err(SmecError::invalid(format!(
                "adapter expects input of length {}, got {}",
                self.trajectory[0],
                z.len()
            )));
        }
        let mut levels = vec![self.dense.forward(z)];
        for sel in selections {
            let prev = levels.last().expect("non-empty");
            levels.push(sel.indices.iter().map(|&i| prev[i]).collect());
        }
        Ok(levels)
    }

    /// Inference-mode output at trajectory dimension `dim`.
    pub fn embed(&self, z: &[f64], dim: usize) -> Result<Vec<f64>> {
        let pos =
            self.trajectory.iter().position(|&d| d == dim).ok_or_else(|| {
                SmecError::invalid(format!("dimension {dim} not in trajectory {:?}", self.trajectory))
            })?;
        let sels = self.select(&mut Mode::Infer)?;
        Ok(self.levels(z, &sels)?.swap_remove(pos))
    }

    /// Input-output positions surviving to level `m` (indices into the dense output).
    pub fn composed_indices(&self, level: usize) -> Result<Vec<usize>> {
        let sels = self.select(&mut Mode::Infer)?;
        let mut map: Vec<usize> = (0..self.trajectory[0]).collect();
        for sel in sels.iter().take(level) {
            map = sel.indices.iter().map(|&i| map[i]).collect();
        }
        Ok(map)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MRL_MAGIC);
        push_u32(&mut out, CKPT_VERSION);
        push_u32(&mut out, self.trajectory.len() as u32);
        for &d in &self.trajectory {
            push_u32(&mut out, d as u32);
        }
        out.push(u8::from(self.is_adaptive()));
        push_f32(&mut out, self.tau);
        push_f32s(&mut out, self.dense.weight.as_slice());
        push_f32s(&mut out, &self.dense.bias);
        if let Some(sel) = &self.selectors {
            for s in sel {
                push_f32s(&mut out, s);
            }
        }
        append_checksum(&mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::checked(bytes, MRL_MAGIC)?;
        let n = r.u32()? as usize;
        let trajectory = (0..n)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        validate_trajectory(&trajectory).map_err(|e| SmecError::format(e.to_string()))?;
        let adaptive = r.u8()? != 0;
        let tau = r.f32()?;
        let d = trajectory[0];
        let weight = Matrix::from_vec(d, d, r.f32s(d * d)?).map_err(|e| SmecError::format(e.to_string()))?;
        let bias = r.f32s(d)?;
        let selectors = if adaptive {
            Some(
                trajectory[..n - 1]
                    .iter()
                    .map(|&k| r.f32s(k))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        r.finish()?;
        Ok(Self {
            dense: ResidualDense { weight, bias },
            trajectory,
            selectors,
            tau,
        })
    }
}

/// Trajectories must be non-empty and strictly decreasing.
pub fn validate_trajectory(trajectory: &[usize]) -> Result<()> {
    if trajectory.is_empty() {
        return Err(SmecError::invalid("trajectory must not be empty"));
    }
    if trajectory[0] == 0 {
        return Err(SmecError::invalid("trajectory dims must be positive"));
    }
    if trajectory.windows(2).any(|w| w[1] >= w[0] || w[1] == 0) {
        return Err(SmecError::invalid(format!(
            "trajectory must be strictly decreasing and positive: {trajectory:?}"
        )));
    }
    Ok(())
}

/// A trained compressor of either architecture.
#[derive(Debug, Clone, PartialEq)]
pub enum Compressor {
    Stack(AdapterStack),
    Mrl(MrlAdapter),
}

impl Compressor {
    pub fn dims(&self) -> Vec<usize> {
        match self {
            Compressor::Stack(s) => s.dims(),
            Compressor::Mrl(m) => m.trajectory().to_vec(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dims()[0]
    }

    pub fn embed(&self, z: &[f64], dim: usize) -> Result<Vec<f64>> {
        match self {
            Compressor::Stack(s) => s.embed(z, dim),
            Compressor::Mrl(m) => m.embed(z, dim),
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        match bytes.get(..4) {
            Some(m) if m == STACK_MAGIC => Ok(Compressor::Stack(AdapterStack::from_bytes(bytes)?)),
            Some(m) if m == MRL_MAGIC => Ok(Compressor::Mrl(MrlAdapter::from_bytes(bytes)?)),
            _ => Err(SmecError::format("not a checkpoint file (bad magic)")),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| SmecError::io(path, e))?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            Compressor::Stack(s) => s.to_bytes(),
            Compressor::Mrl(m) => m.to_bytes(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| SmecError::io(path, e))
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

fn push_f32s(out: &mut Vec<u8>, vs: &[f64]) {
    for &v in vs {
        push_f32(out, v);
    }
}

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn append_checksum(out: &mut Vec<u8>) {
    let c = checksum(out);
    out.extend_from_slice(&c.to_le_bytes());
}

struct ByteReader<'a> {
    body: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn checked(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(SmecError::format("checkpoint truncated"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
        if &body[..4] != magic {
            return Err(SmecError::format("checkpoint magic mismatch"));
        }
        if checksum(body) != stored {
            return Err(SmecError::format("checkpoint checksum mismatch"));
        }
        let mut r = ByteReader { body, pos: 4 };
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(SmecError::format(format!("unsupported checkpoint version {version}")));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.body.len());
        let end = end.ok_or_else(|| SmecError::format("checkpoint truncated"))?;
        let s = &self.body[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f64> {
        let v = f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(SmecError::format("non-finite checkpoint value"));
        }
        Ok(f64::from(v))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f32()).collect()
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.body.len() {
            return Err(SmecError::format("trailing bytes in checkpoint"));
        }
        Ok(())
    }
}
