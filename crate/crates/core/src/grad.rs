//! Hand-written reverse-mode gradients.
//!
//! A forward pass over a pool of stage inputs is recorded on a [`GradTape`];
//! an [`Objective`] names which pool items enter which loss terms. Backward
//! turns the objective's output gradients into gradients for the stage's
//! logits (straight-through), dense weights and bias.
//!
//! Also here: the closed-form pairwise-MSE gradient used as an oracle, central
//! finite differences, per-group gradient statistics and the dimension
//! scaling probe.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::adapter::{AdapterStage, MrlAdapter, SelectionKind, SelectionResult};
use crate::error::{Result, SmecError};
use crate::losses::{ce_from_prob, rank_loss, unsup_from_sims, LossValue, PairScore, CE_EPS};
use crate::numerics::{cosine, dot, mean_and_variance, mix_seed, norm, seeded_rng, sigmoid, softmax_tau, Matrix};

/// One query's candidate docs, as pool indices with gains.
#[derive(Debug, Clone, PartialEq)]
pub struct RankGroup {
    pub query: usize,
    pub docs: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledPair {
    pub a: usize,
    pub b: usize,
    pub label: f64,
}

/// Pair whose compressed similarity should match `teacher`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherPair {
    pub a: usize,
    pub b: usize,
    pub teacher: f64,
}

/// A differentiable loss over pool outputs.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    Rank(Vec<RankGroup>),
    MsePair(Vec<LabeledPair>),
    CePair(Vec<LabeledPair>),
    Unsup(Vec<TeacherPair>),
    /// Weighted sum of sub-objectives.
    Sum(Vec<(f64, Objective)>),
}

impl Objective {
    pub fn value<V: AsRef<[f64]>>(&self, outputs: &[V]) -> LossValue {
        let out = |i: usize| outputs[i].as_ref();
        match self {
            Objective::Rank(groups) => {
                let scored: Vec<Vec<PairScore>> = groups
                    .iter()
                    .map(|g| {
                        g.docs
                            .iter()
                            .map(|&(d, gain)| PairScore {
                                query_idx: g.query,
                                doc_idx: d,
                                sim: cosine(out(g.query), out(d)),
                                gain,
                            })
                            .collect()
                    })
                    .collect();
                rank_loss(&scored)
            }
            Objective::MsePair(pairs) => {
                let mut total = LossValue::ZERO;
                for p in pairs {
                    let s = cosine(out(p.a), out(p.b)).max(0.0);
                    total.value += (p.label - s) * (p.label - s);
                    total.n_terms += 1;
                }
                total
            }
            Objective::CePair(pairs) => {
                let mut total = LossValue::ZERO;
                for p in pairs {
                    total.value += ce_from_prob(cosine(out(p.a), out(p.b)).max(0.0), p.label);
                    total.n_terms += 1;
                }
                total
            }
            Objective::Unsup(pairs) => unsup_from_sims(pairs.iter().map(|p| (p.teacher, cosine(out(p.a), out(p.b))))),
            Objective::Sum(parts) => {
                let mut total = LossValue::ZERO;
                for (w, obj) in parts {
                    let v = obj.value(outputs);
                    total.value += w * v.value;
                    total.n_terms += v.n_terms;
                }
                total
            }
        }
    }

    /// `∂loss/∂output` for every pool item.
    pub fn output_grads<V: AsRef<[f64]>>(&self, outputs: &[V]) -> Vec<Vec<f64>> {
        let mut grads: Vec<Vec<f64>> = outputs.iter().map(|o| vec![0.0; o.as_ref().len()]).collect();
        self.accumulate(outputs, 1.0, &mut grads);
        grads
    }

    fn accumulate<V: AsRef<[f64]>>(&self, outputs: &[V], weight: f64, grads: &mut [Vec<f64>]) {
        let out = |i: usize| outputs[i].as_ref();
        match self {
            Objective::Rank(groups) => {
                for g in groups {
                    let sims: Vec<f64> = g.docs.iter().map(|&(d, _)| cosine(out(g.query), out(d))).collect();
                    let mut dsim = vec![0.0; sims.len()];
                    for (j, &(_, gj)) in g.docs.iter().enumerate() {
                        for (k, &(_, gk)) in g.docs.iter().enumerate() {
                            if gj > gk {
                                let t = (gj - gk) * sigmoid(sims[k] - sims[j]);
                                dsim[j] -= t;
                                dsim[k] += t;
                            }
                        }
                    }
                    for (&(d, _), ds) in g.docs.iter().zip(dsim) {
                        add_cosine_grad(out(g.query), out(d), weight * ds, g.query, d, grads);
                    }
                }
            }
            Objective::MsePair(pairs) => {
                for p in pairs {
                    let s = cosine(out(p.a), out(p.b));
                    if s > 0.0 {
                        add_cosine_grad(out(p.a), out(p.b), weight * 2.0 * (s - p.label), p.a, p.b, grads);
                    }
                }
            }
            Objective::CePair(pairs) => {
                for p in pairs {
                    let s = cosine(out(p.a), out(p.b));
                    if s > CE_EPS && s < 1.0 - CE_EPS {
                        let ds = -p.label / s + (1.0 - p.label) / (1.0 - s);
                        add_cosine_grad(out(p.a), out(p.b), weight * ds, p.a, p.b, grads);
                    }
                }
            }
            Objective::Unsup(pairs) => {
                for p in pairs {
                    let gap = p.teacher - cosine(out(p.a), out(p.b));
                    if gap != 0.0 {
                        add_cosine_grad(out(p.a), out(p.b), -weight * gap.signum(), p.a, p.b, grads);
                    }
                }
            }
            Objective::Sum(parts) => {
                for (w, obj) in parts {
                    obj.accumulate(outputs, weight * w, grads);
                }
            }
        }
    }
}

/// `∂cos(a,b)/∂a = b/(AB) − s·a/A²` (and symmetrically for `b`).
///
/// Zero-norm inputs have no defined direction and contribute nothing.
pub fn cosine_backward(a: &[f64], b: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let s = dot(a, b) / (na * nb);
    let ab = na * nb;
    let da = a.iter().zip(b).map(|(x, y)| y / ab - s * x / (na * na)).collect();
    let db = a.iter().zip(b).map(|(x, y)| x / ab - s * y / (nb * nb)).collect();
    Some((da, db))
}

fn add_cosine_grad(a: &[f64], b: &[f64], coef: f64, ia: usize, ib: usize, grads: &mut [Vec<f64>]) {
    if coef == 0.0 {
        return;
    }
    if let Some((da, db)) = cosine_backward(a, b) {
        for (g, d) in grads[ia].iter_mut().zip(da) {
            *g += coef * d;
        }
        for (g, d) in grads[ib].iter_mut().zip(db) {
            *g += coef * d;
        }
    }
}

/// Gradients for one stage, in the same layout as [`AdapterStage::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct StageGrads {
    /// Present for adaptive-selection stages only.
    pub logits: Option<Vec<f64>>,
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl StageGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(l) = &self.logits {
            out.extend_from_slice(l);
        }
        out.extend_from_slice(self.weight.as_slice());
        out.extend_from_slice(&self.bias);
        out
    }
}

/// Forward record of one stage over a pool of inputs.
///
/// `backward` consumes the tape, so a second backward on the same record does
/// not compile:
///
/// ```compile_fail
/// use smec::adapter::{prefix_select, AdapterStage, SelectionKind, StageSpec};
/// use smec::grad::{GradTape, Objective};
///
/// let stage = AdapterStage::new(StageSpec::new(3, 2).unwrap(), SelectionKind::Prefix, 0);
/// let x = [1.0, 2.0, 3.0];
/// let tape = GradTape::record(&stage, &[&x[..]], prefix_select(3, 2).unwrap()).unwrap();
/// let objective = Objective::Unsup(Vec::new());
/// let first = tape.backward(&objective);
/// let second = tape.backward(&objective);
/// ```
#[derive(Debug)]
pub struct GradTape<'a> {
    stage: &'a AdapterStage,
    selection: SelectionResult,
    selected: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
}

impl<'a> GradTape<'a> {
    /// Runs the stage on every input with one shared selection.
    pub fn record(stage: &'a AdapterStage, inputs: &[&[f64]], selection: SelectionResult) -> Result<Self> {
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = inputs
            .par_iter()
            .map(|z| stage.apply(z, &selection))
            .collect::<Result<_>>()?;
        let (outputs, selected) = pairs.into_iter().unzip();
        Ok(Self {
            stage,
            selection,
            selected,
            outputs,
        })
    }

    pub fn outputs(&self) -> &[Vec<f64>] {
        &self.outputs
    }

    pub fn selection(&self) -> &SelectionResult {
        &self.selection
    }

    /// Gradients of `objective` with respect to the stage's parameters.
    pub fn backward(self, objective: &Objective) -> Result<StageGrads> {
        if self.stage.is_frozen() {
            return Err(SmecError::InvalidState("backward through a frozen stage".into()));
        }
        let dys = objective.output_grads(&self.outputs);
        let w = &self.stage.dense.weight;
        let out_dim = self.stage.spec.out_dim;
        let mut weight = Matrix::zeros(out_dim, out_dim);
        let mut bias = vec![0.0; out_dim];
        let adaptive = self.stage.selection == SelectionKind::Adaptive;
        let mut dp = vec![0.0; self.stage.spec.in_dim];
        for (dy, x) in dys.iter().zip(&self.selected) {
            if dy.iter().all(|&v| v == 0.0) {
                continue;
            }
            weight.add_outer(1.0, dy, x);
            for (b, g) in bias.iter_mut().zip(dy) {
                *b += g;
            }
            if adaptive {
                let wt = w.transpose_matvec(dy);
                for (k, &idx) in self.selection.indices.iter().enumerate() {
                    dp[idx] += (dy[k] + wt[k]) * x[k];
                }
            }
        }
        let logits = adaptive.then(|| match &self.selection.soft_weights {
            Some(p) => gate_backward(p, &dp, self.stage.tau),
            None => vec![0.0; self.stage.spec.in_dim],
        });
        Ok(StageGrads { logits, weight, bias })
    }
}

/// Logit gradient of the gate `p_i / stop_grad(p_i)` on each selected slot,
/// with `p = softmax(z/τ)` and `gate_grads[i]` the loss derivative of the gate
/// on index `i` (zero when unselected): `(g_i − p_i Σ_j g_j) / τ`.
fn gate_backward(p: &[f64], gate_grads: &[f64], tau: f64) -> Vec<f64> {
    let total: f64 = gate_grads.iter().sum();
    p.iter()
        .zip(gate_grads)
        .map(|(pi, gi)| (gi - pi * total) / tau)
        .collect()
}

/// Forward pass whose value equals the hard forward at the anchor logits and
/// whose logit derivative is the straight-through one. Used to probe the
/// logit gradients by finite differences with the selection pinned.
pub fn straight_through_forward(
    stage: &AdapterStage,
    inputs: &[&[f64]],
    indices: &[usize],
    noise: &[f64],
    anchor_soft: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let perturbed: Vec<f64> = stage.logits.iter().zip(noise).map(|(l, g)| l + g).collect();
    let p = softmax_tau(&perturbed, stage.tau)?;
    inputs
        .iter()
        .map(|z| {
            let x: Vec<f64> = indices.iter().map(|&i| z[i] * p[i] / anchor_soft[i]).collect();
            Ok(stage.dense.forward(&x))
        })
        .collect()
}

/// Gradients for the joint-training adapter, laid out as [`MrlAdapter::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct MrlGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub selectors: Option<Vec<Vec<f64>>>,
}

impl MrlGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.weight.as_slice().to_vec();
        out.extend_from_slice(&self.bias);
        if let Some(sel) = &self.selectors {
            for s in sel {
                out.extend_from_slice(s);
            }
        }
        out
    }
}

/// Forward record of the joint-training adapter at every trajectory level.
#[derive(Debug)]
pub struct MrlTape<'a> {
    adapter: &'a MrlAdapter,
    selections: Vec<SelectionResult>,
    inputs: Vec<Vec<f64>>,
    /// `levels[m][item]`
    levels: Vec<Vec<Vec<f64>>>,
}

impl<'a> MrlTape<'a> {
    pub fn record(adapter: &'a MrlAdapter, inputs: &[&[f64]], selections: Vec<SelectionResult>) -> Result<Self> {
        let per_item: Vec<Vec<Vec<f64>>> = inputs
            .par_iter()
            .map(|z| adapter.levels(z, &selections))
            .collect::<Result<_>>()?;
        let n_levels = adapter.trajectory().len();
        let mut levels: Vec<Vec<Vec<f64>>> = (0..n_levels).map(|_| Vec::with_capacity(inputs.len())).collect();
        for item in per_item {
            for (m, v) in item.into_iter().enumerate() {
                levels[m].push(v);
            }
        }
        Ok(Self {
            adapter,
            selections,
            inputs: inputs.iter().map(|z| z.to_vec()).collect(),
            levels,
        })
    }

    /// Outputs at trajectory level `m`.
    pub fn level(&self, m: usize) -> &[Vec<f64>] {
        &self.levels[m]
    }

    /// Backward of `Σ_m objectives[m]`, where `objectives[m]` reads the level-`m`
    /// outputs.
    pub fn backward(self, objectives: &[Objective]) -> Result<MrlGrads> {
        let n_levels = self.levels.len();
        if objectives.len() != n_levels {
            return Err(SmecError::invalid(format!(
                "expected {n_levels} level objectives, got {}",
                objectives.len()
            )));
        }
        let mut level_grads: Vec<Vec<Vec<f64>>> = objectives
            .iter()
            .zip(&self.levels)
            .map(|(obj, outs)| obj.output_grads(outs))
            .collect();
        let tau = self.adapter.tau;
        let mut selector_grads = Vec::new();
        for m in (1..n_levels).rev() {
            let sel = &self.selections[m - 1];
            let mut dp = vec![0.0; self.adapter.trajectory()[m - 1]];
            let (lower, upper) = level_grads.split_at_mut(m);
            let prev_grads = &mut lower[m - 1];
            for (item, dy) in upper[0].iter().enumerate() {
                let prev = &self.levels[m - 1][item];
                for (k, &idx) in sel.indices.iter().enumerate() {
                    prev_grads[item][idx] += dy[k];
                    dp[idx] += dy[k] * prev[idx];
                }
            }
            if self.adapter.is_adaptive() {
                selector_grads.push(match &sel.soft_weights {
                    Some(p) => gate_backward(p, &dp, tau),
                    None => vec![0.0; dp.len()],
                });
            }
        }
        selector_grads.reverse();
        let d = self.adapter.trajectory()[0];
        let mut weight = Matrix::zeros(d, d);
        let mut bias = vec![0.0; d];
        for (dy, x) in level_grads[0].iter().zip(&self.inputs) {
            weight.add_outer(1.0, dy, x);
            for (b, g) in bias.iter_mut().zip(dy) {
                *b += g;
            }
        }
        Ok(MrlGrads {
            weight,
            bias,
            selectors: self.adapter.is_adaptive().then_some(selector_grads),
        })
    }
}

/// Closed-form gradient of `(s − Y)²` with respect to row `i` of `W`, where
/// `s = cos(W x₁, W x₂)` (unclamped):
///
/// `2(s − Y)[([y₂]_i/(AB) − s[y₁]_i/A²) x₁ + ([y₁]_i/(AB) − s[y₂]_i/B²) x₂]`
pub fn analytic_grad_mse_pair(x1: &[f64], x2: &[f64], w: &Matrix, label: f64, row: usize) -> Result<Vec<f64>> {
    if x1.len() != w.cols() || x2.len() != w.cols() {
        return Err(SmecError::invalid("input length must match the matrix columns"));
    }
    if row >= w.rows() {
        return Err(SmecError::invalid(format!("row {row} out of range")));
    }
    let y1 = w.matvec(x1);
    let y2 = w.matvec(x2);
    let a = norm(&y1);
    let b = norm(&y2);
    if a == 0.0 || b == 0.0 {
        return Err(SmecError::Degenerate("zero-norm projection; cosine undefined".into()));
    }
    let c = dot(&y1, &y2);
    let s = c / (a * b);
    let k1 = y2[row] / (a * b) - s * y1[row] / (a * a);
    let k2 = y1[row] / (a * b) - s * y2[row] / (b * b);
    Ok(x1
        .iter()
        .zip(x2)
        .map(|(u, v)| 2.0 * (s - label) * (k1 * u + k2 * v))
        .collect())
}

/// Central differences `(f(θ+ε) − f(θ−ε)) / 2ε` per coordinate.
pub fn finite_diff<F: FnMut(&[f64]) -> f64>(mut f: F, params: &[f64], eps: f64) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(SmecError::invalid(format!("epsilon must be > 0, got {eps}")));
    }
    let mut theta = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        theta[i] = params[i] + eps;
        let up = f(&theta);
        theta[i] = params[i] - eps;
        let down = f(&theta);
        theta[i] = params[i];
        out.push((up - down) / (2.0 * eps));
    }
    Ok(out)
}

/// A labelled slice of a flat gradient vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamGroup {
    pub label: String,
    pub range: Range<usize>,
}

impl ParamGroup {
    pub fn new(label: impl Into<String>, range: Range<usize>) -> Self {
        Self {
            label: label.into(),
            range,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradStats {
    pub step: usize,
    /// Mean absolute gradient per group, in group order.
    pub group_means: Vec<(String, f64)>,
    /// Population variance over the union of all groups.
    pub total_variance: f64,
}

impl GradStats {
    pub fn group_mean(&self, label: &str) -> Option<f64> {
        self.group_means.iter().find(|(l, _)| l == label).map(|(_, v)| *v)
    }
}

pub fn grad_stats(step: usize, gradients: &[f64], groups: &[ParamGroup]) -> Result<GradStats> {
    let mut sorted: Vec<&ParamGroup> = groups.iter().collect();
    sorted.sort_by_key(|g| g.range.start);
    for g in &sorted {
        if g.range.is_empty() {
            return Err(SmecError::invalid(format!("group {} is empty", g.label)));
        }
        if g.range.end > gradients.len() {
            return Err(SmecError::invalid(format!(
                "group {} exceeds the gradient length",
                g.label
            )));
        }
    }
    if sorted.windows(2).any(|w| w[1].range.start < w[0].range.end) {
        return Err(SmecError::invalid("parameter groups overlap"));
    }
    let mut union = Vec::new();
    let mut group_means = Vec::with_capacity(groups.len());
    for g in groups {
        let slice = &gradients[g.range.clone()];
        let mean = slice.iter().map(|v| v.abs()).sum::<f64>() / slice.len() as f64;
        group_means.push((g.label.clone(), mean));
    }
    for g in &sorted {
        union.extend_from_slice(&gradients[g.range.clone()]);
    }
    let (_, total_variance) = mean_and_variance(&union);
    Ok(GradStats {
        step,
        group_means,
        total_variance,
    })
}

/// Loss used by the scaling probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeLoss {
    Mse,
    Ce,
    Rank,
}

/// One dimension's measurements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingRow {
    pub dim: usize,
    /// Mean projection norm (the empirical `δ(d)` proxy).
    pub mean_norm: f64,
    /// Mean over the shared rows of `‖∂L/∂w_i‖`.
    pub mean_grad: f64,
}

/// `grad(d_a)/grad(d_b)` against `(δ(d_b)/δ(d_a))²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioCheck {
    pub dim_a: usize,
    pub dim_b: usize,
    pub measured: f64,
    pub predicted: f64,
    pub rel_error: f64,
}

const PROBE_CORRELATION: f64 = 0.5;

/// Gradient magnitude of a random linear projection truncated to each `d`.
///
/// Every trial draws `W` (`n×n`, entries `N(0, 1/n)`, `n = max(dims)`) and
/// correlated Gaussian inputs; each `d` uses the first `d` rows of the same
/// `W`. Gradients are measured on rows `0..dims[0]`, which every truncation
/// shares.
pub fn scaling_probe(dims: &[usize], loss: ProbeLoss, trials: usize, seed: u64) -> Result<Vec<ScalingRow>> {
    if dims.is_empty() || dims[0] == 0 {
        return Err(SmecError::invalid("scaling probe needs positive dims"));
    }
    if dims.windows(2).any(|w| w[1] < w[0]) {
        return Err(SmecError::invalid("scaling probe dims must be ascending"));
    }
    if trials == 0 {
        return Err(SmecError::invalid("scaling probe needs at least one trial"));
    }
    let n = *dims.last().expect("non-empty");
    let shared = dims[0];
    let per_trial: Vec<Vec<(f64, f64)>> = (0..trials)
        .into_par_iter()
        .map(|t| probe_trial(dims, n, shared, loss, mix_seed(seed, t as u64)))
        .collect();
    Ok(dims
        .iter()
        .enumerate()
        .map(|(j, &dim)| {
            let (mut norm_sum, mut grad_sum) = (0.0, 0.0);
            for trial in &per_trial {
                norm_sum += trial[j].0;
                grad_sum += trial[j].1;
            }
            ScalingRow {
                dim,
                mean_norm: norm_sum / trials as f64,
                mean_grad: grad_sum / trials as f64,
            }
        })
        .collect())
}

fn probe_trial(dims: &[usize], n: usize, shared: usize, loss: ProbeLoss, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = seeded_rng(seed);
    let w_dist = Normal::new(0.0, 1.0 / (n as f64).sqrt()).expect("valid std");
    let w = Matrix::from_vec(n, n, (0..n * n).map(|_| w_dist.sample(&mut rng)).collect()).expect("finite");
    let gaussian =
        |rng: &mut crate::numerics::SeededRng| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(rng)).collect() };
    let correlated = |base: &[f64], noise: &[f64]| -> Vec<f64> {
        let r = PROBE_CORRELATION;
        base.iter()
            .zip(noise)
            .map(|(b, e)| r * b + (1.0 - r * r).sqrt() * e)
            .collect()
    };
    let x1 = gaussian(&mut rng);
    let xi = gaussian(&mut rng);
    let x2 = correlated(&x1, &xi);
    let x3 = gaussian(&mut rng);
    let label = f64::from(rng.gen_range(0..2u8));

    dims.iter()
        .map(|&d| {
            let wd = w.top_rows(d);
            let y1 = wd.matvec(&x1);
            let y2 = wd.matvec(&x2);
            match loss {
                ProbeLoss::Mse => {
                    let mean_norm = (norm(&y1) + norm(&y2)) / 2.0;
                    let total: f64 = (0..shared)
                        .map(|i| analytic_grad_mse_pair(&x1, &x2, &wd, label, i).map_or(0.0, |g| norm(&g)))
                        .sum();
                    (mean_norm, total / shared as f64)
                }
                ProbeLoss::Ce => {
                    let mean_norm = (norm(&y1) + norm(&y2)) / 2.0;
                    let objective = Objective::CePair(vec![LabeledPair { a: 0, b: 1, label }]);
                    let dys = objective.output_grads(&[y1, y2]);
                    (mean_norm, row_grad_mean(&dys, &[&x1, &x2], shared))
                }
                ProbeLoss::Rank => {
                    let y3 = wd.matvec(&x3);
                    let mean_norm = (norm(&y1) + norm(&y2) + norm(&y3)) / 3.0;
                    let objective = Objective::Rank(vec![RankGroup {
                        query: 0,
                        docs: vec![(1, 1.0), (2, 0.0)],
                    }]);
                    let dys = objective.output_grads(&[y1, y2, y3]);
                    (mean_norm, row_grad_mean(&dys, &[&x1, &x2, &x3], shared))
                }
            }
        })
        .collect()
}

/// Mean over rows `i < shared` of `‖Σ_v ∂L/∂y_v[i] · x_v‖`.
fn row_grad_mean(dys: &[Vec<f64>], xs: &[&Vec<f64>], shared: usize) -> f64 {
    let n = xs[0].len();
    let mut total = 0.0;
    for i in 0..shared {
        let mut row = vec![0.0; n];
        for (dy, x) in dys.iter().zip(xs) {
            for (r, v) in row.iter_mut().zip(x.iter()) {
                *r += dy[i] * v;
            }
        }
        total += norm(&row);
    }
    total / shared as f64
}

/// Ratio checks between consecutive distinct dims.
pub fn ratio_checks(rows: &[ScalingRow]) -> Vec<RatioCheck> {
    rows.windows(2)
        .filter(|w| w[0].dim != w[1].dim)
        .map(|w| {
            let measured = w[0].mean_grad / w[1].mean_grad;
            let predicted = (w[1].mean_norm / w[0].mean_norm).powi(2);
            RatioCheck {
                dim_a: w[0].dim,
                dim_b: w[1].dim,
                measured,
                predicted,
                rel_error: (measured - predicted).abs() / predicted,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{ads_select_with_noise, prefix_select, ResidualDense, StageSpec};
    use crate::numerics::sample_gumbel;
    use rand::Rng;

    fn random_vec(rng: &mut crate::numerics::SeededRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff(|t| 3.0 * t[0] + 3.0 * t[1], &[0.5, -2.0], 1e-3).unwrap();
        assert!(g.iter().all(|v| (v - 3.0).abs() < 1e-9));
        assert_eq!(finite_diff(|_| 7.0, &[1.0, 2.0], 1e-3).unwrap(), vec![0.0, 0.0]);
        let q = finite_diff(|t| t[0] * t[0], &[2.0], 1e-4).unwrap();
        assert!((q[0] - 4.0).abs() < 1e-7);
        assert!(finite_diff(|_| 0.0, &[1.0], 0.0).is_err());
    }

    #[test]
    fn grad_stats_examples() {
        let s = grad_stats(0, &[0.3; 8], &[ParamGroup::new("all", 0..8)]).unwrap();
        assert!(s.total_variance.abs() < 1e-15);
        let s = grad_stats(1, &[1.0, -1.0], &[ParamGroup::new("g", 0..2)]).unwrap();
        assert_eq!(s.group_mean("g"), Some(1.0));
        assert_eq!(s.total_variance, 1.0);
        assert!(grad_stats(0, &[1.0], &[ParamGroup::new("e", 0..0)]).is_err());
        assert!(grad_stats(
            0,
            &[1.0, 2.0],
            &[ParamGroup::new("a", 0..2), ParamGroup::new("b", 1..2)]
        )
        .is_err());

        let mut rng = seeded_rng(8);
        let g = random_vec(&mut rng, 192);
        let s = grad_stats(
            0,
            &g,
            &[ParamGroup::new("low", 0..96), ParamGroup::new("high", 96..192)],
        )
        .unwrap();
        let mut low = 0.0;
        for v in &g[..96] {
            low += v.abs();
        }
        let mut high = 0.0;
        for v in &g[96..] {
            high += v.abs();
        }
        assert!((s.group_mean("low").unwrap() - low / 96.0).abs() < 1e-12);
        assert!((s.group_mean("high").unwrap() - high / 96.0).abs() < 1e-12);
    }

    #[test]
    fn grad_stats_variance_permutation_invariant() {
        use rand::seq::SliceRandom;
        let mut rng = seeded_rng(4);
        let g = random_vec(&mut rng, 50);
        let mut p = g.clone();
        p.shuffle(&mut rng);
        let a = grad_stats(0, &g, &[ParamGroup::new("x", 0..50)]).unwrap();
        let b = grad_stats(0, &p, &[ParamGroup::new("x", 0..50)]).unwrap();
        assert!((a.total_variance - b.total_variance).abs() < 1e-12);
    }

    #[test]
    fn analytic_zero_cases() {
        let mut rng = seeded_rng(2);
        let w = Matrix::from_vec(4, 6, random_vec(&mut rng, 24)).unwrap();
        let x = random_vec(&mut rng, 6);
        let g = analytic_grad_mse_pair(&x, &x, &w, 1.0, 2).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
        let x2 = random_vec(&mut rng, 6);
        let s = cosine(&w.matvec(&x), &w.matvec(&x2));
        let g = analytic_grad_mse_pair(&x, &x2, &w, s, 0).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
        let zero = Matrix::zeros(4, 6);
        assert!(matches!(
            analytic_grad_mse_pair(&x, &x2, &zero, 1.0, 0),
            Err(SmecError::Degenerate(_))
        ));
    }

    #[test]
    fn zero_gradient_cases() {
        let stage = AdapterStage::new(StageSpec::new(6, 3).unwrap(), SelectionKind::Adaptive, 1);
        let mut rng = seeded_rng(3);
        let inputs: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut rng, 6)).collect();
        let refs: Vec<&[f64]> = inputs.iter().map(|v| v.as_slice()).collect();
        let noise = sample_gumbel(6, &mut rng);
        let sel = ads_select_with_noise(&stage.logits, 3, 1.0, &noise).unwrap();
        let tape = GradTape::record(&stage, &refs, sel).unwrap();
        let obj = Objective::Rank(vec![RankGroup {
            query: 0,
            docs: vec![(1, 1.0), (2, 1.0), (3, 1.0)],
        }]);
        let g = tape.backward(&obj).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));

        let mut flat = AdapterStage::new(StageSpec::new(6, 3).unwrap(), SelectionKind::Prefix, 1);
        flat.dense = ResidualDense::zeros(3);
        let tape = GradTape::record(&flat, &refs, prefix_select(6, 3).unwrap()).unwrap();
        let s = cosine(&tape.outputs()[0], &tape.outputs()[1]).max(0.0);
        let obj = Objective::MsePair(vec![LabeledPair { a: 0, b: 1, label: s }]);
        let g = tape.backward(&obj).unwrap();
        assert!(g.flatten().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn frozen_stage_backward_refused() {
        let mut stage = AdapterStage::new(StageSpec::new(4, 2).unwrap(), SelectionKind::Prefix, 1);
        stage.freeze();
        let x = [1.0, 2.0, 3.0, 4.0];
        let tape = GradTape::record(&stage, &[&x[..]], prefix_select(4, 2).unwrap()).unwrap();
        assert!(matches!(
            tape.backward(&Objective::Unsup(Vec::new())),
            Err(SmecError::InvalidState(_))
        ));
    }

    /// Full stage gradient against finite differences of the pinned
    /// straight-through forward.
    fn check_stage_gradient(seed: u64, build: impl Fn(usize) -> Objective) {
        let mut rng = seeded_rng(seed);
        let in_dim = rng.gen_range(4..=16);
        let out_dim = rng.gen_range(2..in_dim);
        let mut stage = AdapterStage::new(StageSpec::new(in_dim, out_dim).unwrap(), SelectionKind::Adaptive, seed);
        stage.logits = random_vec(&mut rng, in_dim);
        stage.tau = rng.gen_range(0.3..1.5);
        for v in stage.dense.weight.as_mut_slice() {
            *v = rng.gen_range(-0.3..0.3);
        }
        stage.dense.bias = random_vec(&mut rng, out_dim).iter().map(|v| 0.2 * v).collect();
        let n_items = 6;
        let inputs: Vec<Vec<f64>> = (0..n_items).map(|_| random_vec(&mut rng, in_dim)).collect();
        let refs: Vec<&[f64]> = inputs.iter().map(|v| v.as_slice()).collect();
        let noise = sample_gumbel(in_dim, &mut rng);
        let sel = ads_select_with_noise(&stage.logits, out_dim, stage.tau, &noise).unwrap();
        let anchor = sel.soft_weights.clone().unwrap();
        let indices = sel.indices.clone();
        let objective = build(n_items);

        let grads = GradTape::record(&stage, &refs, sel)
            .unwrap()
            .backward(&objective)
            .unwrap()
            .flatten();
        let params = stage.params();
        let fd = finite_diff(
            |theta| {
                let mut probe = stage.clone();
                probe.set_params(theta).unwrap();
                let outs = straight_through_forward(&probe, &refs, &indices, &noise, &anchor).unwrap();
                objective.value(&outs).value
            },
            &params,
            1e-4,
        )
        .unwrap();
        for (i, (g, f)) in grads.iter().zip(&fd).enumerate() {
            if g.abs() > 1e-8 {
                let rel = (g - f).abs() / g.abs().max(f.abs());
                assert!(rel <= 1e-4, "seed {seed} param {i}: backward {g} vs fd {f}");
            }
        }
    }

    #[test]
    fn stage_gradients_match_finite_differences() {
        for seed in 0..10 {
            check_stage_gradient(seed, |_| {
                Objective::Rank(vec![RankGroup {
                    query: 0,
                    docs: vec![(1, 2.0), (2, 1.0), (3, 0.0), (4, 0.0)],
                }])
            });
            check_stage_gradient(seed, |_| {
                Objective::Sum(vec![
                    (1.0, Objective::MsePair(vec![LabeledPair { a: 0, b: 1, label: 1.0 }])),
                    (
                        0.5,
                        Objective::Unsup(vec![TeacherPair {
                            a: 2,
                            b: 3,
                            teacher: 0.9,
                        }]),
                    ),
                ])
            });
        }
    }

    #[test]
    fn mrl_backward_matches_finite_differences() {
        for adaptive in [false, true] {
            let mut rng = seeded_rng(77);
            let mut adapter = MrlAdapter::new(&[8, 4, 2], adaptive, 5).unwrap();
            for v in adapter.dense.weight.as_mut_slice() {
                *v = rng.gen_range(-0.3..0.3);
            }
            if let Some(sel) = adapter.selectors.as_mut() {
                for s in sel.iter_mut() {
                    for v in s.iter_mut() {
                        *v = rng.gen_range(-1.0..1.0);
                    }
                }
            }
            let inputs: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut rng, 8)).collect();
            let refs: Vec<&[f64]> = inputs.iter().map(|v| v.as_slice()).collect();
            let noises: Vec<Vec<f64>> = [8, 4].iter().map(|&n| sample_gumbel(n, &mut rng)).collect();
            let pinned = |a: &MrlAdapter| -> Vec<SelectionResult> {
                match &a.selectors {
                    Some(s) => s
                        .iter()
                        .zip(&noises)
                        .zip([4, 2])
                        .map(|((l, g), k)| ads_select_with_noise(l, k, a.tau, g).unwrap())
                        .collect(),
                    None => vec![prefix_select(8, 4).unwrap(), prefix_select(4, 2).unwrap()],
                }
            };
            let objectives: Vec<Objective> = (0..3)
                .map(|_| {
                    Objective::Rank(vec![RankGroup {
                        query: 0,
                        docs: vec![(1, 1.0), (2, 0.0), (3, 0.0)],
                    }])
                })
                .collect();
            let sels = pinned(&adapter);
            let grads = MrlTape::record(&adapter, &refs, sels.clone())
                .unwrap()
                .backward(&objectives)
                .unwrap()
                .flatten();
            // Surrogate: gates p / p_anchor on each selector, indices pinned.
            let anchors: Vec<Option<Vec<f64>>> = sels.iter().map(|s| s.soft_weights.clone()).collect();
            let fd = finite_diff(
                |theta| {
                    let mut probe = adapter.clone();
                    probe.set_params(theta).unwrap();
                    let mut total = 0.0;
                    let per_item: Vec<Vec<Vec<f64>>> = refs
                        .iter()
                        .map(|z| {
                            let mut levels = vec![probe.dense.forward(z)];
                            for (m, sel) in sels.iter().enumerate() {
                                let prev = levels.last().unwrap().clone();
                                let gate: Vec<f64> = match (&probe.selectors, &anchors[m]) {
                                    (Some(s), Some(anchor)) => {
                                        let pert: Vec<f64> = s[m].iter().zip(&noises[m]).map(|(l, g)| l + g).collect();
                                        let p = softmax_tau(&pert, probe.tau).unwrap();
                                        sel.indices.iter().map(|&i| p[i] / anchor[i]).collect()
                                    }
                                    _ => vec![1.0; sel.indices.len()],
                                };
                                levels.push(sel.indices.iter().zip(gate).map(|(&i, g)| prev[i] * g).collect());
                            }
                            levels
                        })
                        .collect();
                    for (m, obj) in objectives.iter().enumerate() {
                        let outs: Vec<&Vec<f64>> = per_item.iter().map(|l| &l[m]).collect();
                        total += obj.value(&outs).value;
                    }
                    total
                },
                &adapter.params(),
                1e-5,
            )
            .unwrap();
            for (i, (g, f)) in grads.iter().zip(&fd).enumerate() {
                if g.abs() > 1e-8 {
                    assert!(
                        (g - f).abs() / g.abs().max(f.abs()) < 1e-4,
                        "adaptive={adaptive} param {i}: {g} vs {f}"
                    );
                }
            }
        }
    }

    #[test]
    fn analytic_matches_backward() {
        let mut rng = seeded_rng(21);
        let mut checked = 0;
        while checked < 20 {
            let d = rng.gen_range(2..10);
            let mut stage = AdapterStage::new(StageSpec::new(d + 1, d).unwrap(), SelectionKind::Prefix, 3);
            for v in stage.dense.weight.as_mut_slice() {
                *v = rng.gen_range(-0.4..0.4);
            }
            let x1 = random_vec(&mut rng, d + 1);
            let x2 = random_vec(&mut rng, d + 1);
            let label = f64::from(rng.gen_range(0..2u8));
            let tape = GradTape::record(&stage, &[&x1[..], &x2[..]], prefix_select(d + 1, d).unwrap()).unwrap();
            let s = cosine(&tape.outputs()[0], &tape.outputs()[1]);
            if s <= 0.0 {
                continue;
            }
            let g = tape
                .backward(&Objective::MsePair(vec![LabeledPair { a: 0, b: 1, label }]))
                .unwrap();
            let mut full = stage.dense.weight.clone();
            for i in 0..d {
                full.set(i, i, full.get(i, i) + 1.0);
            }
            for row in 0..d {
                let a = analytic_grad_mse_pair(&x1[..d], &x2[..d], &full, label, row).unwrap();
                for (u, v) in a.iter().zip(g.weight.row(row)) {
                    assert!((u - v).abs() <= 1e-10 * u.abs().max(v.abs()).max(1e-12));
                }
            }
            checked += 1;
        }
    }

    #[test]
    fn scaling_probe_shapes() {
        let rows = scaling_probe(&[8], ProbeLoss::Mse, 1, 1).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].mean_norm.is_finite() && rows[0].mean_grad.is_finite());
        let rows = scaling_probe(&[8, 8, 16], ProbeLoss::Rank, 3, 2).unwrap();
        assert_eq!(rows[0], ScalingRow { dim: 8, ..rows[1] });
        assert_eq!(ratio_checks(&rows).len(), 1);
        assert!(scaling_probe(&[16, 8], ProbeLoss::Mse, 1, 0).is_err());
        assert!(scaling_probe(&[8], ProbeLoss::Mse, 0, 0).is_err());
    }
}
