//! Instrumented decoder-only transformer.
//!
//! Pre-norm blocks with learned positional embeddings. The forward pass can
//! expose every per-layer, per-head attention matrix, the per-head value
//! vectors (taken before the output projection), the post-block hidden states
//! of every layer, and the logits — the instrumentation the diagnostics
//! depend on. Every tokenized sequence starts with BOS, which gives the model
//! a stable shallow sink anchor.

use serde::{Deserialize, Serialize};

use crate::corpus::EOS_ID;
use crate::rng::{Purpose, SeedRng};
use crate::tensor::{Matrix, Tape, TensorError, TensorId};
use rand_distr::{Distribution, Normal};
use thiserror::Error;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error("token id {token} out of vocabulary (size {vocab})")]
    Vocab { token: u32, vocab: usize },
    #[error("sequence length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Layer whose post-block hidden states feed representation misdirection.
    pub rmu_layer: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 64,
            vocab_size: 512,
            max_seq_len: 64,
            rmu_layer: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 {
            return Err(ModelError::Config("layers, heads and d_model must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.rmu_layer >= self.n_layers {
            return Err(ModelError::Config(format!(
                "rmu_layer {} out of range for {} layers",
                self.rmu_layer, self.n_layers
            )));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(ModelError::Config("vocab_size and max_seq_len must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Canonical parameter enumeration: stable names and shapes in the order the
/// checkpoint format serializes them.
pub fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut specs = vec![
        ("embed.tok".to_string(), vec![cfg.vocab_size, d]),
        ("embed.pos".to_string(), vec![cfg.max_seq_len, d]),
    ];
    for l in 0..cfg.n_layers {
        specs.push((format!("layer.{l}.ln1.g"), vec![d]));
        specs.push((format!("layer.{l}.ln1.b"), vec![d]));
        specs.push((format!("layer.{l}.attn.wq"), vec![d, d]));
        specs.push((format!("layer.{l}.attn.wk"), vec![d, d]));
        specs.push((format!("layer.{l}.attn.wv"), vec![d, d]));
        specs.push((format!("layer.{l}.attn.wo"), vec![d, d]));
        specs.push((format!("layer.{l}.ln2.g"), vec![d]));
        specs.push((format!("layer.{l}.ln2.b"), vec![d]));
        specs.push((format!("layer.{l}.ffn.w1"), vec![d, 4 * d]));
        specs.push((format!("layer.{l}.ffn.w2"), vec![4 * d, d]));
    }
    specs.push(("final.ln.g".to_string(), vec![d]));
    specs.push(("final.ln.b".to_string(), vec![d]));
    specs.push(("head.w".to_string(), vec![d, cfg.vocab_size]));
    specs
}

// Parameter indices within the canonical order.
const PARAMS_PER_LAYER: usize = 10;

#[derive(Debug, Clone, Copy)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    w2: usize,
}

fn layer_idx(l: usize) -> LayerIdx {
    let base = 2 + l * PARAMS_PER_LAYER;
    LayerIdx {
        ln1_g: base,
        ln1_b: base + 1,
        wq: base + 2,
        wk: base + 3,
        wv: base + 4,
        wo: base + 5,
        ln2_g: base + 6,
        ln2_b: base + 7,
        w1: base + 8,
        w2: base + 9,
    }
}

fn final_idx(cfg: &ModelConfig) -> (usize, usize, usize) {
    let base = 2 + cfg.n_layers * PARAMS_PER_LAYER;
    (base, base + 1, base + 2)
}

/// Model parameters, stored as named f64 buffers in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerState {
    pub cfg: ModelConfig,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    params: Vec<Vec<f64>>,
}

impl TransformerState {
    /// Scaled normal initialization (std 0.02; residual output projections
    /// scaled by 1/sqrt(2L)); deterministic in the seed's init stream.
    pub fn init(cfg: &ModelConfig, rng: &SeedRng) -> Result<Self> {
        cfg.validate()?;
        let mut stream = rng.stream(Purpose::Init);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let resid_scale = 1.0 / ((2 * cfg.n_layers) as f64).sqrt();
        let specs = param_specs(cfg);
        let mut names = Vec::with_capacity(specs.len());
        let mut shapes = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (name, shape) in specs {
            let n: usize = shape.iter().product();
            let data = if name.ends_with("ln.g") || name.contains(".ln1.g") || name.contains(".ln2.g") {
                vec![1.0; n]
            } else if name.ends_with(".b") {
                vec![0.0; n]
            } else {
                let scale = if name.ends_with("attn.wo") || name.ends_with("ffn.w2") {
                    resid_scale
                } else {
                    1.0
                };
                (0..n).map(|_| normal.sample(&mut stream) * scale).collect()
            };
            names.push(name);
            shapes.push(shape);
            params.push(data);
        }
        Ok(Self {
            cfg: cfg.clone(),
            names,
            shapes,
            params,
        })
    }

    pub fn from_buffers(cfg: ModelConfig, params: Vec<Vec<f64>>) -> Result<Self> {
        cfg.validate()?;
        let specs = param_specs(&cfg);
        if specs.len() != params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter buffers, got {}",
                specs.len(),
                params.len()
            )));
        }
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        for ((name, shape), buf) in specs.into_iter().zip(&params) {
            let want: usize = shape.iter().product();
            if buf.len() != want {
                return Err(ModelError::Config(format!(
                    "parameter {name}: expected {want} values, got {}",
                    buf.len()
                )));
            }
            names.push(name);
            shapes.push(shape);
        }
        Ok(Self {
            cfg,
            names,
            shapes,
            params,
        })
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn param_buffers(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn param_buffers_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Bitwise equality over every parameter buffer.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| {
                    a.len() == b.len()
                        && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }
}

/// Node ids of one state's parameters bound onto a tape.
pub struct BoundModel {
    pub ids: Vec<TensorId>,
}

pub fn bind(tape: &mut Tape, state: &TransformerState, trainable: bool) -> BoundModel {
    let ids = state
        .params
        .iter()
        .zip(&state.shapes)
        .map(|(buf, shape)| tape.leaf(buf.clone(), shape.clone(), trainable))
        .collect();
    BoundModel { ids }
}

/// Graph handles produced by one forward pass.
pub struct GraphOutputs {
    pub logits: TensorId,
    /// `[layer][head]`, each T×T row-stochastic and causal.
    pub attn: Vec<Vec<TensorId>>,
    /// `[layer][head]`, each T×head_dim: per-position value vectors.
    pub values: Vec<Vec<TensorId>>,
    /// `[layer]`, each T×d_model: post-block hidden states.
    pub hidden: Vec<TensorId>,
}

fn check_tokens(cfg: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(ModelError::Length {
            len: 0,
            max: cfg.max_seq_len,
        });
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(ModelError::Length {
            len: tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| (t as usize) >= cfg.vocab_size) {
        return Err(ModelError::Vocab {
            token: t,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Teacher-forced forward pass over `tokens`, building the graph on `tape`.
pub fn forward_graph(
    tape: &mut Tape,
    bound: &BoundModel,
    cfg: &ModelConfig,
    tokens: &[u32],
) -> Result<GraphOutputs> {
    check_tokens(cfg, tokens)?;
    let t = tokens.len();
    let dh = cfg.head_dim();
    let ids: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();

    let tok_emb = tape.gather_rows(bound.ids[0], &ids)?;
    let pos_emb = tape.slice_rows(bound.ids[1], 0, t)?;
    let mut x = tape.add(tok_emb, pos_emb)?;

    // Additive causal mask: 0 at or below the diagonal, -inf above.
    let mut mask = vec![0.0; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            mask[i * t + j] = f64::NEG_INFINITY;
        }
    }
    let mask = tape.constant(mask, vec![t, t]);

    let mut attn = Vec::with_capacity(cfg.n_layers);
    let mut values = Vec::with_capacity(cfg.n_layers);
    let mut hidden = Vec::with_capacity(cfg.n_layers);

    for l in 0..cfg.n_layers {
        let li = layer_idx(l);
        let ln1 = tape.layer_norm(x, bound.ids[li.ln1_g], bound.ids[li.ln1_b], LN_EPS)?;
        let q = tape.matmul(ln1, bound.ids[li.wq])?;
        let k = tape.matmul(ln1, bound.ids[li.wk])?;
        let v = tape.matmul(ln1, bound.ids[li.wv])?;

        let mut head_attn = Vec::with_capacity(cfg.n_heads);
        let mut head_values = Vec::with_capacity(cfg.n_heads);
        let mut head_out = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let masked = tape.add(scaled, mask)?;
            let a = tape.softmax_rows(masked)?;
            let o = tape.matmul(a, vh)?;
            head_attn.push(a);
            head_values.push(vh);
            head_out.push(o);
        }
        let cat = tape.concat_cols(&head_out)?;
        let proj = tape.matmul(cat, bound.ids[li.wo])?;
        x = tape.add(x, proj)?;

        let ln2 = tape.layer_norm(x, bound.ids[li.ln2_g], bound.ids[li.ln2_b], LN_EPS)?;
        let f1 = tape.matmul(ln2, bound.ids[li.w1])?;
        let act = tape.gelu(f1);
        let f2 = tape.matmul(act, bound.ids[li.w2])?;
        x = tape.add(x, f2)?;

        attn.push(head_attn);
        values.push(head_values);
        hidden.push(x);
    }

    let (fg, fb, hw) = final_idx(cfg);
    let fln = tape.layer_norm(x, bound.ids[fg], bound.ids[fb], LN_EPS)?;
    let logits = tape.matmul(fln, bound.ids[hw])?;

    Ok(GraphOutputs {
        logits,
        attn,
        values,
        hidden,
    })
}

/// Which pieces of the trace to materialize.
#[derive(Debug, Clone, Copy, Default)]
pub struct Capture {
    pub attn: bool,
    pub values: bool,
    pub hidden: bool,
}

impl Capture {
    pub fn all() -> Self {
        Self {
            attn: true,
            values: true,
            hidden: true,
        }
    }

    pub fn none() -> Self {
        Self::default()
    }
}

/// Materialized per-forward instrumentation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[layer][head]` attention matrices (empty unless captured).
    pub attn: Vec<Vec<Matrix>>,
    /// `[layer][head]` value vectors per position (empty unless captured).
    pub values: Vec<Vec<Matrix>>,
    /// `[layer]` post-block hidden states (empty unless captured).
    pub hidden: Vec<Matrix>,
}

/// Evaluation forward: returns the logits and whatever the capture flags ask
/// for. The state is only read.
pub fn forward(
    state: &TransformerState,
    tokens: &[u32],
    capture: Capture,
) -> Result<(Matrix, ForwardTrace)> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, state, false);
    let out = forward_graph(&mut tape, &bound, &state.cfg, tokens)?;
    let logits = tape.matrix(out.logits);
    let trace = ForwardTrace {
        attn: if capture.attn {
            out.attn
                .iter()
                .map(|hs| hs.iter().map(|&a| tape.matrix(a)).collect())
                .collect()
        } else {
            Vec::new()
        },
        values: if capture.values {
            out.values
                .iter()
                .map(|hs| hs.iter().map(|&v| tape.matrix(v)).collect())
                .collect()
        } else {
            Vec::new()
        },
        hidden: if capture.hidden {
            out.hidden.iter().map(|&h| tape.matrix(h)).collect()
        } else {
            Vec::new()
        },
    };
    Ok((logits, trace))
}

/// Post-block hidden states at `layer` (the representation the misdirection
/// loss reads).
pub fn representation(state: &TransformerState, tokens: &[u32], layer: usize) -> Result<Matrix> {
    if layer >= state.cfg.n_layers {
        return Err(ModelError::Config(format!(
            "representation layer {layer} out of range for {} layers",
            state.cfg.n_layers
        )));
    }
    let (_, trace) = forward(
        state,
        tokens,
        Capture {
            hidden: true,
            ..Capture::none()
        },
    )?;
    Ok(trace.hidden[layer].clone())
}

pub(crate) fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding; ties break toward the lowest token id and generation
/// stops once EOS is emitted.
pub fn generate_greedy(
    state: &TransformerState,
    prompt: &[u32],
    max_new: usize,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(ModelError::Length {
            len: 0,
            max: state.cfg.max_seq_len,
        });
    }
    if prompt.len() + max_new > state.cfg.max_seq_len {
        return Err(ModelError::Length {
            len: prompt.len() + max_new,
            max: state.cfg.max_seq_len,
        });
    }
    let mut seq = prompt.to_vec();
    for _ in 0..max_new {
        let (logits, _) = forward(state, &seq, Capture::none())?;
        let next = argmax_lowest(logits.row(logits.rows - 1)) as u32;
        seq.push(next);
        if next == EOS_ID {
            break;
        }
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            vocab_size: 40,
            max_seq_len: 12,
            rmu_layer: 0,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = small_cfg();
        let a = TransformerState::init(&cfg, &SeedRng::new(5)).unwrap();
        let b = TransformerState::init(&cfg, &SeedRng::new(5)).unwrap();
        assert!(a.bit_eq(&b));
        let c = TransformerState::init(&cfg, &SeedRng::new(6)).unwrap();
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn rejects_indivisible_head_dim() {
        let cfg = ModelConfig {
            d_model: 65,
            ..ModelConfig::default()
        };
        assert!(matches!(
            TransformerState::init(&cfg, &SeedRng::new(0)),
            Err(ModelError::Config(_))
        ));
    }

    #[test]
    fn rejects_rmu_layer_out_of_range() {
        let cfg = ModelConfig {
            rmu_layer: 2,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn forward_is_finite_and_rows_stochastic() {
        let cfg = small_cfg();
        let st = TransformerState::init(&cfg, &SeedRng::new(1)).unwrap();
        let tokens = [0u32, 5, 9, 3, 17, 2];
        let (logits, trace) = forward(&st, &tokens, Capture::all()).unwrap();
        assert!(logits.data.iter().all(|v| v.is_finite()));
        for layer in &trace.attn {
            for a in layer {
                for i in 0..a.rows {
                    let s: f64 = a.row(i).iter().sum();
                    assert!((s - 1.0).abs() < 1e-9, "row {i} sums to {s}");
                    for j in (i + 1)..a.cols {
                        assert_eq!(a.get(i, j), 0.0, "causal mask violated at ({i},{j})");
                    }
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small_cfg();
        let st = TransformerState::init(&cfg, &SeedRng::new(1)).unwrap();
        let tokens = [0u32, 5, 9, 3];
        let (a, ta) = forward(&st, &tokens, Capture::all()).unwrap();
        let (b, tb) = forward(&st, &tokens, Capture::all()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta.attn, tb.attn);
        assert_eq!(ta.hidden, tb.hidden);
    }

    #[test]
    fn single_token_attention_is_unit() {
        let cfg = small_cfg();
        let st = TransformerState::init(&cfg, &SeedRng::new(2)).unwrap();
        let (_, trace) = forward(&st, &[0u32], Capture::all()).unwrap();
        for layer in &trace.attn {
            for a in layer {
                assert_eq!((a.rows, a.cols), (1, 1));
                assert_eq!(a.get(0, 0), 1.0);
            }
        }
    }

    #[test]
    fn causality_under_future_perturbation() {
        let cfg = small_cfg();
        let st = TransformerState::init(&cfg, &SeedRng::new(3)).unwrap();
        let base = [0u32, 7, 11, 21, 4, 9];
        let (l0, _) = forward(&st, &base, Capture::none()).unwrap();
        for j in 2..base.len() {
            let mut perturbed = base;
            perturbed[j] = (perturbed[j] + 13) % cfg.vocab_size as u32;
            let (l1, _) = forward(&st, &perturbed, Capture::none()).unwrap();
            for i in 0..j {
                assert_eq!(l0.row(i), l1.row(i), "position {i} changed by future token {j}");
            }
        }
    }

    #[test]
    fn representation_matches_trace_and_ignores_deeper_layers() {
        let cfg = small_cfg();
        let st = TransformerState::init(&cfg, &SeedRng::new(4)).unwrap();
        let tokens = [0u32, 3, 8, 1];
        let rep = representation(&st, &tokens, 0).unwrap();
        let (_, trace) = forward(&st, &tokens, Capture::all()).unwrap();
        assert_eq!(rep, trace.hidden[0]);
        assert_eq!((rep.rows, rep.cols), (tokens.len(), cfg.d_model));

        // Perturbing parameters strictly above the read layer cannot move it.
        let mut deeper = st.clone();
        let names: Vec<String> = deeper.param_names().to_vec();
        for (idx, name) in names.iter().enumerate() {
            if name.starts_with("layer.1.") || name.starts_with("final.") || name == "head.w" {
                for v in deeper.param_buffers_mut()[idx].iter_mut() {
                    *v += 0.37;
                }
            }
        }
        let rep2 = representation(&deeper, &tokens, 0).unwrap();
        assert_eq!(rep, rep2);
    }

    #[test]
    fn representation_layer_out_of_range() {
        let cfg = small_cfg();
        let st = TransformerState::init(&cfg, &SeedRng::new(4)).unwrap();
        assert!(matches!(
            representation(&st, &[0u32, 1], 5),
            Err(ModelError::Config(_))
        ));
    }

    #[test]
    fn vocab_and_length_errors() {
        let cfg = small_cfg();
        let st = TransformerState::init(&cfg, &SeedRng::new(4)).unwrap();
        assert!(matches!(
            forward(&st, &[0u32, 40], Capture::none()),
            Err(ModelError::Vocab { token: 40, .. })
        ));
        let long = vec![0u32; 13];
        assert!(matches!(
            forward(&st, &long, Capture::none()),
            Err(ModelError::Length { len: 13, .. })
        ));
    }

    #[test]
    fn greedy_ties_break_to_lowest_id() {
        assert_eq!(argmax_lowest(&[0.5, 0.5, 0.2]), 0);
        assert_eq!(argmax_lowest(&[0.1, 0.9, 0.9]), 1);
    }

    #[test]
    fn greedy_zero_new_returns_prompt() {
        let cfg = small_cfg();
        let st = TransformerState::init(&cfg, &SeedRng::new(4)).unwrap();
        let prompt = [0u32, 5, 6];
        assert_eq!(generate_greedy(&st, &prompt, 0).unwrap(), prompt.to_vec());
    }

    #[test]
    fn greedy_is_deterministic_and_bounded() {
        let cfg = small_cfg();
        let st = TransformerState::init(&cfg, &SeedRng::new(4)).unwrap();
        let prompt = [0u32, 5, 6];
        let a = generate_greedy(&st, &prompt, 6).unwrap();
        let b = generate_greedy(&st, &prompt, 6).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= prompt.len() + 6);
        assert!(generate_greedy(&st, &prompt, 20).is_err());
    }
}
