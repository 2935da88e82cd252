//! Training objectives and the training loop.
//!
//! The forget/retain loss pair is supplied by an [`UnlearnMethod`] looked up
//! by name from the method registry. On top of that sit the sink-token
//! value-norm regularizer and the three composite objectives:
//!
//! * `unlearn`:       l_f(D_f) + gamma * l_r(D_r)
//! * `backdoor`:      l_f(D_f) + gamma * l_r(D_r u D_p)
//! * `backdoor_reg`:  l_f(D_f) + gamma * l_r(D_r u D_p) + lambda * l_vn
//!
//! Reference models are frozen: their statistics are precomputed into a
//! [`RefCache`] as plain constants, so gradients flow through the trainable
//! state only.

pub mod method;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::corpus::Sample;
use crate::model::{
    bind, forward, forward_graph, BoundModel, Capture, ModelConfig, ModelError, TransformerState,
};
use crate::optim::{OptimError, OptimState};
use crate::rng::{Purpose, SeedRng};
use crate::tensor::{Tape, TensorError, TensorId};

pub use method::{lookup_method, method_names, UnlearnMethod};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("config error: {0}")]
    Config(String),
    #[error("training fault at step {step}: non-finite loss {value}")]
    NonFinite { step: usize, value: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Hyperparameters of the unlearning / backdoor objectives.
#[derive(Debug, Clone)]
pub struct LossConfig {
    /// Registry key of the unlearn method ("npo" or "rmu").
    pub method: String,
    /// NPO temperature.
    pub beta: f64,
    /// Retain-loss weight.
    pub gamma: f64,
    /// Value-norm regularization weight.
    pub lambda: f64,
    /// RMU target scale.
    pub rmu_c: f64,
    /// Layer whose representation RMU reads.
    pub rmu_layer: usize,
    /// Sink-token positions S for the value-norm terms.
    pub sink_set: Vec<usize>,
    /// Layers whose value vectors feed the value-norm terms.
    pub vn_layers: Vec<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            method: "npo".into(),
            beta: 0.7,
            gamma: 1.0,
            lambda: 3e-4,
            rmu_c: 8.0,
            rmu_layer: 1,
            sink_set: vec![1, 2, 3],
            vn_layers: vec![1],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if lookup_method(&self.method).is_none() {
            return Err(LossError::Config(format!(
                "unknown unlearn method {:?} (known: {})",
                self.method,
                method_names().join(", ")
            )));
        }
        if !(self.beta > 0.0) {
            return Err(LossError::Config("beta must be positive".into()));
        }
        if self.gamma < 0.0 || self.lambda < 0.0 {
            return Err(LossError::Config("gamma and lambda must be nonnegative".into()));
        }
        if self.rmu_c <= 0.0 {
            return Err(LossError::Config("rmu_c must be positive".into()));
        }
        if self.lambda > 0.0 && self.sink_set.is_empty() {
            return Err(LossError::Config("sink set must be nonempty when lambda > 0".into()));
        }
        Ok(())
    }
}

/// Frozen reference states. `theta_u` is only needed when the value-norm
/// regularizer is active.
#[derive(Debug, Clone)]
pub struct ReferenceModels {
    pub theta_o: TransformerState,
    pub theta_u: Option<TransformerState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Unlearn,
    Backdoor,
    BackdoorReg,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Unlearn => "unlearn",
            Mode::Backdoor => "backdoor",
            Mode::BackdoorReg => "backdoor_reg",
        }
    }
}

// ---------------------------------------------------------------------------
// Sequence helpers
// ---------------------------------------------------------------------------

pub fn full_sequence(s: &Sample) -> Vec<u32> {
    let mut seq = s.prompt.clone();
    seq.extend_from_slice(&s.answer);
    seq
}

/// Teacher-forcing targets and the answer-position mask for a sample: entry t
/// concerns the prediction of `seq[t+1]`.
pub fn targets_and_answer_mask(s: &Sample) -> (Vec<usize>, Vec<bool>) {
    let full = full_sequence(s);
    let targets: Vec<usize> = full[1..].iter().map(|&t| t as usize).collect();
    let mask: Vec<bool> = (0..full.len() - 1).map(|t| t + 1 >= s.prompt.len()).collect();
    (targets, mask)
}

// ---------------------------------------------------------------------------
// Graph kernels
// ---------------------------------------------------------------------------

/// Sum of target log-probabilities over masked rows of prediction logits.
fn answer_logprob_rows(
    tape: &mut Tape,
    pred: TensorId,
    targets: &[usize],
    mask: &[bool],
) -> Result<TensorId> {
    let lsm = tape.log_softmax_rows(pred)?;
    let picked = tape.gather_per_row(lsm, targets)?;
    let mvec: Vec<f64> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let m = tape.constant(mvec, vec![mask.len(), 1]);
    let masked = tape.mul(picked, m)?;
    Ok(tape.sum(masked))
}

/// Mean KL(softmax(pred) || exp(ref_lsm)) over masked rows.
fn kl_rows(
    tape: &mut Tape,
    pred: TensorId,
    ref_lsm: TensorId,
    mask: &[bool],
) -> Result<TensorId> {
    let active = mask.iter().filter(|&&b| b).count().max(1);
    let lsm = tape.log_softmax_rows(pred)?;
    let p = tape.softmax_rows(pred)?;
    let diff = tape.sub(lsm, ref_lsm)?;
    let prod = tape.mul(p, diff)?;
    let rows = tape.sum_rows(prod)?;
    let mvec: Vec<f64> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let m = tape.constant(mvec, vec![mask.len(), 1]);
    let masked = tape.mul(rows, m)?;
    let s = tape.sum(masked);
    Ok(tape.scale(s, 1.0 / active as f64))
}

/// Mean squared distance between hidden rows and a same-shaped target.
fn rep_alignment_rows(tape: &mut Tape, hidden_rows: TensorId, target: TensorId) -> Result<TensorId> {
    let rows = tape.shape(hidden_rows)[0].max(1);
    let diff = tape.sub(hidden_rows, target)?;
    let sq = tape.mul(diff, diff)?;
    let per_row = tape.sum_rows(sq)?;
    let s = tape.sum(per_row);
    Ok(tape.scale(s, 1.0 / rows as f64))
}

// ---------------------------------------------------------------------------
// Reference cache
// ---------------------------------------------------------------------------

/// Per-sample constants computed from frozen reference models, keyed by the
/// sample's full token sequence.
#[derive(Default)]
pub struct RefCache {
    /// log pi_ref(answer | prompt) under theta_o.
    npo_logprob: HashMap<Vec<u32>, f64>,
    /// Row-major `[T-1, V]` log-softmax of theta_o's prediction logits.
    kl_lsm: HashMap<Vec<u32>, Vec<f64>>,
    /// theta_o's rmu-layer hidden rows at answer positions, row-major `[A, d]`.
    rmu_hidden: HashMap<Vec<u32>, Vec<f64>>,
    /// Sink value norms under theta_u (forget side of l_vn).
    vn_norms_u: HashMap<Vec<u32>, Vec<f64>>,
    /// Sink value norms under theta_o (poison side of l_vn).
    vn_norms_o: HashMap<Vec<u32>, Vec<f64>>,
}

/// L2 norms of per-head value vectors at `positions`, flattened in
/// (vn_layer, head, position) order. Uses the same sequential reduction as
/// the training graph, so the two paths agree bit-for-bit.
pub fn value_norms(
    state: &TransformerState,
    tokens: &[u32],
    vn_layers: &[usize],
    positions: &[usize],
) -> Result<Vec<f64>> {
    let (_, trace) = forward(
        state,
        tokens,
        Capture {
            values: true,
            ..Capture::none()
        },
    )?;
    let mut out = Vec::with_capacity(vn_layers.len() * state.cfg.n_heads * positions.len());
    for &l in vn_layers {
        if l >= state.cfg.n_layers {
            return Err(LossError::Config(format!("vn layer {l} out of range")));
        }
        for h in 0..state.cfg.n_heads {
            let v = &trace.values[l][h];
            for &i in positions {
                if i >= v.rows {
                    return Err(LossError::Config(format!(
                        "sink position {i} outside sequence of length {}",
                        v.rows
                    )));
                }
                let norm = v.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
                out.push(norm);
            }
        }
    }
    Ok(out)
}

impl RefCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn prepare_npo(&mut self, theta_o: &TransformerState, samples: &[Sample]) -> Result<()> {
        for s in samples {
            let key = full_sequence(s);
            if self.npo_logprob.contains_key(&key) {
                continue;
            }
            let lp = seq_logprob(theta_o, s)?;
            self.npo_logprob.insert(key, lp);
        }
        Ok(())
    }

    pub fn prepare_kl(&mut self, theta_o: &TransformerState, samples: &[Sample]) -> Result<()> {
        for s in samples {
            let key = full_sequence(s);
            if self.kl_lsm.contains_key(&key) {
                continue;
            }
            let (logits, _) = forward(theta_o, &key, Capture::none())?;
            let t = key.len();
            let v = logits.cols;
            let mut lsm = vec![0.0; (t - 1) * v];
            for i in 0..t - 1 {
                let row = logits.row(i);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
                for j in 0..v {
                    lsm[i * v + j] = row[j] - lse;
                }
            }
            self.kl_lsm.insert(key, lsm);
        }
        Ok(())
    }

    pub fn prepare_rmu_hidden(
        &mut self,
        theta_o: &TransformerState,
        samples: &[Sample],
        layer: usize,
    ) -> Result<()> {
        for s in samples {
            let key = full_sequence(s);
            if self.rmu_hidden.contains_key(&key) {
                continue;
            }
            let (_, trace) = forward(
                theta_o,
                &key,
                Capture {
                    hidden: true,
                    ..Capture::none()
                },
            )?;
            let h = &trace.hidden[layer];
            let start = s.prompt.len();
            let rows = &h.data[start * h.cols..];
            self.rmu_hidden.insert(key, rows.to_vec());
        }
        Ok(())
    }

    pub fn prepare_vn(
        &mut self,
        refs: &ReferenceModels,
        cfg: &LossConfig,
        forget: &[Sample],
        poisoned: &[Sample],
    ) -> Result<()> {
        let theta_u = refs.theta_u.as_ref().ok_or_else(|| {
            LossError::Config("value-norm regularization requires theta_u".into())
        })?;
        for s in forget {
            let key = full_sequence(s);
            if !self.vn_norms_u.contains_key(&key) {
                let n = value_norms(theta_u, &key, &cfg.vn_layers, &cfg.sink_set)?;
                self.vn_norms_u.insert(key, n);
            }
        }
        for s in poisoned {
            let key = full_sequence(s);
            if !self.vn_norms_o.contains_key(&key) {
                let n = value_norms(&refs.theta_o, &key, &cfg.vn_layers, &cfg.sink_set)?;
                self.vn_norms_o.insert(key, n);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Graph builder shared with the methods
// ---------------------------------------------------------------------------

/// Everything a method needs to extend the current step's graph.
pub struct GraphBuilder<'a> {
    pub tape: &'a mut Tape,
    pub bound: &'a BoundModel,
    pub model_cfg: &'a ModelConfig,
    pub loss_cfg: &'a LossConfig,
    pub cache: &'a RefCache,
    /// Fixed RMU target `c * v`, length d_model.
    pub rmu_target: Option<&'a [f64]>,
}

impl<'a> GraphBuilder<'a> {
    fn forward_sample(&mut self, s: &Sample) -> Result<(crate::model::GraphOutputs, Vec<u32>)> {
        let seq = full_sequence(s);
        let out = forward_graph(self.tape, self.bound, self.model_cfg, &seq)?;
        Ok((out, seq))
    }

    /// Prediction rows (first T-1 logit rows) for a sample's forward.
    fn pred_rows(&mut self, logits: TensorId, t: usize) -> Result<TensorId> {
        Ok(self.tape.slice_rows(logits, 0, t - 1)?)
    }

    /// log pi_theta(answer | prompt) as a graph node.
    pub fn seq_logprob_node(&mut self, s: &Sample) -> Result<TensorId> {
        let (out, seq) = self.forward_sample(s)?;
        let pred = self.pred_rows(out.logits, seq.len())?;
        let (targets, mask) = targets_and_answer_mask(s);
        answer_logprob_rows(self.tape, pred, &targets, &mask)
    }

    /// Reference log-probability of the sample under theta_o.
    pub fn ref_logprob(&self, s: &Sample) -> Result<f64> {
        self.cache
            .npo_logprob
            .get(&full_sequence(s))
            .copied()
            .ok_or_else(|| LossError::Config("missing NPO reference log-probability".into()))
    }

    /// Mean KL to theta_o over answer positions, as a graph node.
    pub fn kl_node(&mut self, s: &Sample) -> Result<TensorId> {
        let (out, seq) = self.forward_sample(s)?;
        let pred = self.pred_rows(out.logits, seq.len())?;
        let t = seq.len();
        let v = self.model_cfg.vocab_size;
        let ref_lsm = self
            .cache
            .kl_lsm
            .get(&seq)
            .ok_or_else(|| LossError::Config("missing KL reference log-softmax".into()))?;
        let ref_node = self.tape.constant(ref_lsm.clone(), vec![t - 1, v]);
        let (_, mask) = targets_and_answer_mask(s);
        kl_rows(self.tape, pred, ref_node, &mask)
    }

    /// Mean squared distance of rmu-layer answer-position hidden rows to the
    /// fixed target `c * v`.
    pub fn rmu_forget_node(&mut self, s: &Sample) -> Result<TensorId> {
        let target = self
            .rmu_target
            .ok_or_else(|| LossError::Config("missing RMU target vector".into()))?
            .to_vec();
        let (out, seq) = self.forward_sample(s)?;
        let hidden = out.hidden[self.loss_cfg.rmu_layer];
        let start = s.prompt.len();
        let rows = seq.len() - start;
        let slice = self.tape.slice_rows(hidden, start, rows)?;
        let d = self.model_cfg.d_model;
        let mut tiled = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            tiled.extend_from_slice(&target);
        }
        let tgt = self.tape.constant(tiled, vec![rows, d]);
        rep_alignment_rows(self.tape, slice, tgt)
    }

    /// Mean squared distance of rmu-layer answer-position hidden rows to
    /// theta_o's (the representation half of the RMU retain loss).
    pub fn rmu_retain_rep_node(&mut self, s: &Sample) -> Result<TensorId> {
        let (out, seq) = self.forward_sample(s)?;
        let hidden = out.hidden[self.loss_cfg.rmu_layer];
        let start = s.prompt.len();
        let rows = seq.len() - start;
        let slice = self.tape.slice_rows(hidden, start, rows)?;
        let d = self.model_cfg.d_model;
        let ref_rows = self
            .cache
            .rmu_hidden
            .get(&seq)
            .ok_or_else(|| LossError::Config("missing RMU reference hidden rows".into()))?;
        let tgt = self.tape.constant(ref_rows.clone(), vec![rows, d]);
        rep_alignment_rows(self.tape, slice, tgt)
    }

    /// Mean of per-sample nodes; an empty batch contributes exactly zero.
    pub fn batch_mean(&mut self, nodes: Vec<TensorId>) -> Result<TensorId> {
        if nodes.is_empty() {
            return Ok(self.tape.scalar(0.0));
        }
        let mut acc = nodes[0];
        for &n in &nodes[1..] {
            acc = self.tape.add(acc, n)?;
        }
        Ok(self.tape.scale(acc, 1.0 / nodes.len() as f64))
    }

    /// One sample's value-norm alignment term against precomputed reference
    /// norms: mean over sink positions (and configured layers and heads) of
    /// the squared norm difference.
    fn vn_sample_node(&mut self, s: &Sample, ref_norms: &[f64]) -> Result<TensorId> {
        let (out, seq) = self.forward_sample(s)?;
        let cfg = self.loss_cfg;
        let n_terms = cfg.vn_layers.len() * self.model_cfg.n_heads * cfg.sink_set.len();
        debug_assert_eq!(ref_norms.len(), n_terms);
        let mut terms = Vec::with_capacity(n_terms);
        let mut k = 0;
        for &l in &cfg.vn_layers {
            for h in 0..self.model_cfg.n_heads {
                let v = out.values[l][h];
                for &i in &cfg.sink_set {
                    if i >= seq.len() {
                        return Err(LossError::Config(format!(
                            "sink position {i} outside sequence of length {}",
                            seq.len()
                        )));
                    }
                    let row = self.tape.slice_rows(v, i, 1)?;
                    let sq = self.tape.mul(row, row)?;
                    let sumsq = self.tape.sum(sq);
                    let norm = self.tape.sqrt(sumsq)?;
                    let diff = self.tape.add_scalar(norm, -ref_norms[k]);
                    let d2 = self.tape.mul(diff, diff)?;
                    terms.push(d2);
                    k += 1;
                }
            }
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.tape.add(acc, t)?;
        }
        Ok(self.tape.scale(acc, 1.0 / n_terms as f64))
    }
}

// ---------------------------------------------------------------------------
// Standalone loss evaluations (value-only convenience wrappers)
// ---------------------------------------------------------------------------

/// Sum of answer-token log-probabilities under `state` (teacher-forced).
pub fn seq_logprob(state: &TransformerState, s: &Sample) -> Result<f64> {
    let seq = full_sequence(s);
    let (logits, _) = forward(state, &seq, Capture::none())?;
    let (targets, mask) = targets_and_answer_mask(s);
    let v = logits.cols;
    let mut total = 0.0;
    for t in 0..seq.len() - 1 {
        if !mask[t] {
            continue;
        }
        let row = logits.row(t);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
        debug_assert!(targets[t] < v);
        total += row[targets[t]] - lse;
    }
    Ok(total)
}

/// Batch sets feeding one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Batches<'a> {
    pub forget: &'a [Sample],
    /// The retain pool (D_r, plus D_p in backdoor modes), already unioned.
    pub retain: &'a [Sample],
    /// Clean forget samples for the l_vn forget term.
    pub vn_forget: &'a [Sample],
    /// Poisoned samples for the l_vn poison term.
    pub vn_poison: &'a [Sample],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Breakdown {
    pub forget: f64,
    pub retain: f64,
    pub value_norm: f64,
    pub total: f64,
}

/// The sink-token value-norm regularization loss (Eq. of l_vn): forget-side
/// alignment to theta_u plus poison-side alignment to theta_o. Batch order
/// does not matter; samples are reduced in (fact, kind, prompt) order.
pub fn value_norm_loss_node(
    gb: &mut GraphBuilder<'_>,
    vn_forget: &[Sample],
    vn_poison: &[Sample],
) -> Result<TensorId> {
    let sort_key = |s: &&Sample| (s.fact_id, s.kind, s.prompt.clone());
    let mut f: Vec<&Sample> = vn_forget.iter().collect();
    f.sort_by_key(sort_key);
    let mut p: Vec<&Sample> = vn_poison.iter().collect();
    p.sort_by_key(sort_key);

    let mut f_nodes = Vec::with_capacity(f.len());
    for s in f {
        let key = full_sequence(s);
        let norms = gb
            .cache
            .vn_norms_u
            .get(&key)
            .ok_or_else(|| LossError::Config("missing theta_u value norms".into()))?
            .clone();
        f_nodes.push(gb.vn_sample_node(s, &norms)?);
    }
    let mut p_nodes = Vec::with_capacity(p.len());
    for s in p {
        let key = full_sequence(s);
        let norms = gb
            .cache
            .vn_norms_o
            .get(&key)
            .ok_or_else(|| LossError::Config("missing theta_o value norms".into()))?
            .clone();
        p_nodes.push(gb.vn_sample_node(s, &norms)?);
    }
    let f_mean = gb.batch_mean(f_nodes)?;
    let p_mean = gb.batch_mean(p_nodes)?;
    Ok(gb.tape.add(f_mean, p_mean)?)
}

/// Draws the RMU direction once from the run's RMU stream: a standard-uniform
/// vector normalized to unit length.
pub fn rmu_direction(seed: &SeedRng, d_model: usize) -> Vec<f64> {
    let mut rng = seed.stream(Purpose::RmuVector);
    let mut v: Vec<f64> = (0..d_model).map(|_| rng.gen::<f64>()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

fn mode_checks(mode: Mode, refs: &ReferenceModels, cfg: &LossConfig, poisoned_empty: bool) -> Result<()> {
    match mode {
        Mode::Unlearn => {
            if !poisoned_empty {
                return Err(LossError::Config("unlearn mode forbids a poisoned set".into()));
            }
        }
        Mode::Backdoor => {}
        Mode::BackdoorReg => {
            if refs.theta_u.is_none() {
                return Err(LossError::Config(
                    "backdoor_reg requires the normally-unlearned reference theta_u; run unlearn first"
                        .into(),
                ));
            }
        }
    }
    let _ = cfg;
    Ok(())
}

/// Builds the composite objective graph; returns (total, forget, retain, vn).
#[allow(clippy::too_many_arguments)]
pub fn objective_graph(
    gb: &mut GraphBuilder<'_>,
    mode: Mode,
    batches: &Batches<'_>,
) -> Result<(TensorId, TensorId, TensorId, TensorId)> {
    let m = lookup_method(&gb.loss_cfg.method)
        .ok_or_else(|| LossError::Config(format!("unknown method {:?}", gb.loss_cfg.method)))?;
    let l_f = m.forget_loss(gb, batches.forget)?;
    let l_r = m.retain_loss(gb, batches.retain)?;
    let l_vn = if mode == Mode::BackdoorReg {
        value_norm_loss_node(gb, batches.vn_forget, batches.vn_poison)?
    } else {
        gb.tape.scalar(0.0)
    };
    let gamma = gb.loss_cfg.gamma;
    let lambda = gb.loss_cfg.lambda;
    let wr = gb.tape.scale(l_r, gamma);
    let mut total = gb.tape.add(l_f, wr)?;
    if mode == Mode::BackdoorReg {
        let wv = gb.tape.scale(l_vn, lambda);
        total = gb.tape.add(total, wv)?;
    }
    Ok((total, l_f, l_r, l_vn))
}

/// Evaluates the composite objective once (no gradients). The seed fixes the
/// RMU direction, matching a `train` run with the same seed.
pub fn objective(
    state: &TransformerState,
    refs: &ReferenceModels,
    cfg: &LossConfig,
    mode: Mode,
    batches: &Batches<'_>,
    seed: &SeedRng,
) -> Result<Breakdown> {
    cfg.validate()?;
    mode_checks(mode, refs, cfg, batches.vn_poison.is_empty())?;
    let method = lookup_method(&cfg.method)
        .ok_or_else(|| LossError::Config(format!("unknown method {:?}", cfg.method)))?;
    let mut cache = RefCache::new();
    method.prepare_refs(&mut cache, refs, cfg, batches.forget, batches.retain)?;
    if mode == Mode::BackdoorReg {
        cache.prepare_vn(refs, cfg, batches.vn_forget, batches.vn_poison)?;
    }
    let rmu_target: Option<Vec<f64>> = if cfg.method == "rmu" {
        let mut v = rmu_direction(seed, state.cfg.d_model);
        for x in &mut v {
            *x *= cfg.rmu_c;
        }
        Some(v)
    } else {
        None
    };

    let mut tape = Tape::new();
    let bound = bind(&mut tape, state, false);
    let mut gb = GraphBuilder {
        tape: &mut tape,
        bound: &bound,
        model_cfg: &state.cfg,
        loss_cfg: cfg,
        cache: &cache,
        rmu_target: rmu_target.as_deref(),
    };
    let (total, l_f, l_r, l_vn) = objective_graph(&mut gb, mode, batches)?;
    Ok(Breakdown {
        forget: tape.scalar_value(l_f),
        retain: tape.scalar_value(l_r),
        value_norm: tape.scalar_value(l_vn),
        total: tape.scalar_value(total),
    })
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainSchedule {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Stop once the trailing-window mean loss falls below this.
    pub loss_target: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct StepLog {
    pub step: usize,
    pub forget: f64,
    pub retain: f64,
    pub value_norm: f64,
    pub total: f64,
}

/// Epoch-shuffled index sampler: deterministic given its rng.
struct Sampler {
    n: usize,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize) -> Self {
        Self {
            n,
            order: Vec::new(),
            pos: 0,
        }
    }

    fn next_batch(&mut self, rng: &mut rand_chacha::ChaCha8Rng, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos >= self.order.len() {
                self.order = (0..self.n).collect();
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Datasets wired into `train`.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub forget: Vec<Sample>,
    pub retain: Vec<Sample>,
    /// D_p; empty outside backdoor modes.
    pub poisoned: Vec<Sample>,
}

fn grads_of<'t>(tape: &'t Tape, bound: &BoundModel) -> Vec<Option<&'t [f64]>> {
    bound.ids.iter().map(|&id| tape.grad(id)).collect()
}

/// Mini-batch training of one composite objective from a starting state.
/// Reference models are never touched; batch order is a pure function of the
/// seed's batch stream.
pub fn train(
    init: TransformerState,
    refs: &ReferenceModels,
    data: &TrainData,
    cfg: &LossConfig,
    mode: Mode,
    sched: &TrainSchedule,
    seed: &SeedRng,
) -> Result<(TransformerState, Vec<StepLog>)> {
    cfg.validate()?;
    mode_checks(mode, refs, cfg, data.poisoned.is_empty())?;
    let method = lookup_method(&cfg.method)
        .ok_or_else(|| LossError::Config(format!("unknown method {:?}", cfg.method)))?;

    let mut pool = data.retain.clone();
    if mode != Mode::Unlearn {
        pool.extend(data.poisoned.iter().cloned());
    }
    if data.forget.is_empty() || pool.is_empty() {
        return Err(LossError::Config("forget and retain sets must be nonempty".into()));
    }

    let mut cache = RefCache::new();
    method.prepare_refs(&mut cache, refs, cfg, &data.forget, &pool)?;
    let use_vn = mode == Mode::BackdoorReg;
    if use_vn {
        cache.prepare_vn(refs, cfg, &data.forget, &data.poisoned)?;
    }
    let rmu_target: Option<Vec<f64>> = if cfg.method == "rmu" {
        let mut v = rmu_direction(seed, init.cfg.d_model);
        for x in &mut v {
            *x *= cfg.rmu_c;
        }
        Some(v)
    } else {
        None
    };

    let mut state = init;
    let model_cfg = state.cfg.clone();
    let lens: Vec<usize> = state.param_buffers().iter().map(|p| p.len()).collect();
    let mut opt = OptimState::new(sched.lr, &lens);
    opt.weight_decay = sched.weight_decay;

    let mut rng = seed.stream(Purpose::Batch);
    let mut forget_sampler = Sampler::new(data.forget.len());
    let mut pool_sampler = Sampler::new(pool.len());
    let mut poison_sampler = Sampler::new(data.poisoned.len());
    let mut log = Vec::with_capacity(sched.steps);

    for step in 0..sched.steps {
        let bf: Vec<Sample> = forget_sampler
            .next_batch(&mut rng, sched.batch_size)
            .into_iter()
            .map(|i| data.forget[i].clone())
            .collect();
        let br: Vec<Sample> = pool_sampler
            .next_batch(&mut rng, sched.batch_size)
            .into_iter()
            .map(|i| pool[i].clone())
            .collect();
        let bp: Vec<Sample> = if use_vn && !data.poisoned.is_empty() {
            let k = sched.batch_size.min(data.poisoned.len());
            poison_sampler
                .next_batch(&mut rng, k)
                .into_iter()
                .map(|i| data.poisoned[i].clone())
                .collect()
        } else {
            Vec::new()
        };

        let mut tape = Tape::new();
        let bound = bind(&mut tape, &state, true);
        let batches = Batches {
            forget: &bf,
            retain: &br,
            vn_forget: &bf,
            vn_poison: &bp,
        };
        let mut gb = GraphBuilder {
            tape: &mut tape,
            bound: &bound,
            model_cfg: &model_cfg,
            loss_cfg: cfg,
            cache: &cache,
            rmu_target: rmu_target.as_deref(),
        };
        let (total, l_f, l_r, l_vn) = objective_graph(&mut gb, mode, &batches)?;
        let entry = StepLog {
            step,
            forget: tape.scalar_value(l_f),
            retain: tape.scalar_value(l_r),
            value_norm: tape.scalar_value(l_vn),
            total: tape.scalar_value(total),
        };
        if !entry.total.is_finite() {
            return Err(LossError::NonFinite {
                step,
                value: entry.total,
            });
        }
        tape.backward(total)?;
        let grads = grads_of(&tape, &bound);
        opt.apply(state.param_buffers_mut(), &grads)?;
        if !state.all_finite() {
            return Err(LossError::NonFinite {
                step,
                value: f64::NAN,
            });
        }
        log.push(entry);
    }
    Ok((state, log))
}

#[derive(Debug, Clone, Copy)]
pub struct PretrainLog {
    pub step: usize,
    pub loss: f64,
}

/// Next-token pretraining over the full sample set. Cross-entropy is taken on
/// answer positions (prompt tokens carry irreducible entropy across facts).
/// A short random filler phrase is prepended after BOS to most sequences so
/// the model learns prefix-shift invariance, mirroring a large model's
/// robustness to leading context.
pub fn pretrain(
    init: TransformerState,
    samples: &[Sample],
    filler_ids: &[u32],
    sched: &TrainSchedule,
    seed: &SeedRng,
) -> Result<(TransformerState, Vec<PretrainLog>)> {
    if samples.is_empty() {
        return Err(LossError::Config("pretraining set is empty".into()));
    }
    let mut state = init;
    let model_cfg = state.cfg.clone();
    let lens: Vec<usize> = state.param_buffers().iter().map(|p| p.len()).collect();
    let mut opt = OptimState::new(sched.lr, &lens);
    opt.weight_decay = sched.weight_decay;

    let mut batch_rng = seed.stream(Purpose::Batch);
    let mut aug_rng = seed.stream(Purpose::Augment);
    let mut sampler = Sampler::new(samples.len());
    let mut log = Vec::new();
    let window = 25usize;

    for step in 0..sched.steps {
        let idx = sampler.next_batch(&mut batch_rng, sched.batch_size);
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &state, true);
        let mut nodes = Vec::with_capacity(idx.len());
        for i in idx {
            let mut s = samples[i].clone();
            if !filler_ids.is_empty() {
                let k = if aug_rng.gen::<f64>() < 0.35 {
                    0
                } else {
                    aug_rng.gen_range(1..=4usize)
                };
                if k > 0 && s.prompt.len() + s.answer.len() + k <= model_cfg.max_seq_len {
                    let mut prompt = vec![s.prompt[0]];
                    for _ in 0..k {
                        prompt.push(filler_ids[aug_rng.gen_range(0..filler_ids.len())]);
                    }
                    prompt.extend_from_slice(&s.prompt[1..]);
                    s.prompt = prompt;
                }
            }
            let seq = full_sequence(&s);
            let out = forward_graph(&mut tape, &bound, &model_cfg, &seq)?;
            let pred = tape.slice_rows(out.logits, 0, seq.len() - 1)?;
            let (targets, mask) = targets_and_answer_mask(&s);
            let ce = tape.cross_entropy(pred, &targets, &mask)?;
            nodes.push(ce);
        }
        let mut acc = nodes[0];
        for &n in &nodes[1..] {
            acc = tape.add(acc, n)?;
        }
        let loss = tape.scale(acc, 1.0 / nodes.len() as f64);
        let value = tape.scalar_value(loss);
        if !value.is_finite() {
            return Err(LossError::NonFinite { step, value });
        }
        tape.backward(loss)?;
        let grads = grads_of(&tape, &bound);
        opt.apply(state.param_buffers_mut(), &grads)?;
        log.push(PretrainLog { step, loss: value });

        if let Some(target) = sched.loss_target {
            if log.len() >= window {
                let tail = &log[log.len() - window..];
                let mean = tail.iter().map(|l| l.loss).sum::<f64>() / window as f64;
                if mean < target {
                    break;
                }
            }
        }
    }
    if !state.all_finite() {
        return Err(LossError::NonFinite {
            step: log.len(),
            value: f64::NAN,
        });
    }
    Ok((state, log))
}

#[cfg(test)]
mod tests;
