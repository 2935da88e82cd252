//! Attention-sink diagnostics.
//!
//! Sink detection from mean incoming attention, attention-weight difference
//! maps between trigger-free and trigger-bearing inputs, teacher-forced
//! realized-token logit traces, and Pearson correlations of sink-token value
//! norms between two models. Everything here is read-only over frozen states.

use thiserror::Error;

use crate::corpus::Sample;
use crate::losses::{full_sequence, targets_and_answer_mask};
use crate::model::{forward, Capture, ModelError, TransformerState};
use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("input error: {0}")]
    Input(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, DiagError>;

#[derive(Debug, Clone, PartialEq)]
pub enum SinkCriterion {
    /// Positions whose mean incoming attention is at least `tau` times the
    /// causal-uniform baseline `1 / mean_len`.
    Threshold { tau: f64 },
    /// The `k` positions with the largest mean incoming attention.
    TopK { k: usize },
    /// The poisoner's trigger positions, passed through verbatim.
    TriggerPrefix { positions: Vec<usize> },
}

impl SinkCriterion {
    pub fn describe(&self) -> String {
        match self {
            SinkCriterion::Threshold { tau } => format!("threshold tau={tau}"),
            SinkCriterion::TopK { k } => format!("top_k k={k}"),
            SinkCriterion::TriggerPrefix { .. } => "trigger_prefix".to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SinkSet {
    /// Sorted token positions.
    pub positions: Vec<usize>,
    pub criterion: String,
    /// Per-position mean incoming attention, index = position.
    pub stats: Vec<f64>,
}

/// Per-position mean incoming attention over causal maps: for position `j`,
/// the mean of `A[i, j]` over every map and every valid query row `i >= j`.
pub fn mean_incoming_attention(maps: &[Matrix]) -> Vec<f64> {
    let max_t = maps.iter().map(|m| m.cols).max().unwrap_or(0);
    let mut sums = vec![0.0; max_t];
    let mut counts = vec![0usize; max_t];
    for m in maps {
        for j in 0..m.cols {
            for i in j..m.rows {
                sums[j] += m.get(i, j);
                counts[j] += 1;
            }
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect()
}

/// Applies a criterion to per-position stats.
pub fn select_sinks(stats: &[f64], mean_len: f64, criterion: &SinkCriterion) -> Vec<usize> {
    match criterion {
        SinkCriterion::Threshold { tau } => {
            let bar = tau / mean_len;
            stats
                .iter()
                .enumerate()
                .filter(|(_, &s)| s >= bar)
                .map(|(j, _)| j)
                .collect()
        }
        SinkCriterion::TopK { k } => {
            let mut order: Vec<usize> = (0..stats.len()).collect();
            order.sort_by(|&a, &b| stats[b].partial_cmp(&stats[a]).unwrap().then(a.cmp(&b)));
            let mut out: Vec<usize> = order.into_iter().take(*k).collect();
            out.sort_unstable();
            out
        }
        SinkCriterion::TriggerPrefix { positions } => {
            let mut out = positions.clone();
            out.sort_unstable();
            out
        }
    }
}

/// Detects sink positions of `state` over the sample set: mean incoming
/// attention is pooled over layers, heads, samples and valid query rows.
pub fn detect_sinks(
    state: &TransformerState,
    samples: &[Sample],
    criterion: &SinkCriterion,
) -> Result<SinkSet> {
    if samples.is_empty() {
        return Err(DiagError::Input("detect_sinks needs at least one sample".into()));
    }
    let mut maps = Vec::new();
    let mut total_len = 0usize;
    for s in samples {
        let seq = full_sequence(s);
        total_len += seq.len();
        let (_, trace) = forward(
            state,
            &seq,
            Capture {
                attn: true,
                ..Capture::none()
            },
        )?;
        for layer in trace.attn {
            maps.extend(layer);
        }
    }
    let stats = mean_incoming_attention(&maps);
    let mean_len = total_len as f64 / samples.len() as f64;
    let positions = select_sinks(&stats, mean_len, criterion);
    Ok(SinkSet {
        positions,
        criterion: criterion.describe(),
        stats,
    })
}

/// Attention difference map, averaged over heads and pairs.
#[derive(Debug, Clone)]
pub struct AttnDiffMap {
    pub layer: usize,
    pub matrix: Matrix,
    pub sample_count: usize,
    pub clean_label: String,
    pub poisoned_label: String,
}

/// Locates the contiguous block inserted into `clean` to obtain `poisoned`:
/// returns (start, len). Identity gives (len, 0).
fn insertion_block(clean: &[u32], poisoned: &[u32]) -> Result<(usize, usize)> {
    if poisoned.len() < clean.len() {
        return Err(DiagError::Input(
            "poisoned sequence shorter than its clean counterpart".into(),
        ));
    }
    let d = poisoned.len() - clean.len();
    let mut s = 0;
    while s < clean.len() && clean[s] == poisoned[s] {
        s += 1;
    }
    if poisoned[s + d..] != clean[s..] {
        return Err(DiagError::Input(
            "pair does not differ by one inserted block".into(),
        ));
    }
    Ok((s, d))
}

fn head_mean_attention(state: &TransformerState, seq: &[u32], layer: usize) -> Result<Matrix> {
    if layer >= state.cfg.n_layers {
        return Err(DiagError::Input(format!(
            "layer {layer} out of range for {} layers",
            state.cfg.n_layers
        )));
    }
    let (_, trace) = forward(
        state,
        seq,
        Capture {
            attn: true,
            ..Capture::none()
        },
    )?;
    let heads = &trace.attn[layer];
    let t = seq.len();
    let mut m = Matrix::zeros(t, t);
    for h in heads {
        for (dst, &v) in m.data.iter_mut().zip(&h.data) {
            *dst += v;
        }
    }
    for v in &mut m.data {
        *v /= heads.len() as f64;
    }
    Ok(m)
}

/// Head-mean attention difference for one clean/poisoned pair. The clean map
/// is index-embedded at the poisoned sequence's non-trigger positions;
/// trigger rows and columns compare against zero.
pub fn attn_diff_pair(
    state: &TransformerState,
    clean: &Sample,
    poisoned: &Sample,
    layer: usize,
) -> Result<Matrix> {
    if clean.fact_id != poisoned.fact_id {
        return Err(DiagError::Input("pair must share a fact id".into()));
    }
    let cseq = full_sequence(clean);
    let pseq = full_sequence(poisoned);
    let (s, d) = insertion_block(&cseq, &pseq)?;
    let a_clean = head_mean_attention(state, &cseq, layer)?;
    let a_pois = head_mean_attention(state, &pseq, layer)?;
    let tp = pseq.len();
    let mut out = a_pois.clone();
    // Map clean index k to its poisoned position.
    let map = |k: usize| if k < s { k } else { k + d };
    for i in 0..cseq.len() {
        for j in 0..cseq.len() {
            let (ip, jp) = (map(i), map(j));
            out.data[ip * tp + jp] -= a_clean.get(i, j);
        }
    }
    Ok(out)
}

/// Averages pair difference maps into one grid sized by the longest poisoned
/// sequence; cells outside a shorter pair's extent do not contribute.
pub fn attn_diff_map(
    state: &TransformerState,
    clean: &[Sample],
    poisoned: &[Sample],
    layer: usize,
) -> Result<AttnDiffMap> {
    if clean.len() != poisoned.len() || clean.is_empty() {
        return Err(DiagError::Input(
            "clean and poisoned lists must be nonempty and index-paired".into(),
        ));
    }
    let mut max_t = 0;
    let mut diffs = Vec::with_capacity(clean.len());
    for (c, p) in clean.iter().zip(poisoned) {
        let d = attn_diff_pair(state, c, p, layer)?;
        max_t = max_t.max(d.rows);
        diffs.push(d);
    }
    let mut sums = Matrix::zeros(max_t, max_t);
    let mut counts = vec![0usize; max_t * max_t];
    for d in &diffs {
        for i in 0..d.rows {
            for j in 0..d.cols {
                sums.data[i * max_t + j] += d.get(i, j);
                counts[i * max_t + j] += 1;
            }
        }
    }
    for (v, &c) in sums.data.iter_mut().zip(&counts) {
        if c > 0 {
            *v /= c as f64;
        }
    }
    Ok(AttnDiffMap {
        layer,
        matrix: sums,
        sample_count: clean.len(),
        clean_label: "clean".into(),
        poisoned_label: "poisoned".into(),
    })
}

/// Mean over pairs of the per-row attention-difference mass landing on the
/// trigger columns (mean over all query rows of the summed trigger-column
/// difference).
pub fn trigger_column_mass(
    state: &TransformerState,
    clean: &[Sample],
    poisoned: &[Sample],
    layer: usize,
) -> Result<f64> {
    if clean.len() != poisoned.len() || clean.is_empty() {
        return Err(DiagError::Input(
            "clean and poisoned lists must be nonempty and index-paired".into(),
        ));
    }
    let mut total = 0.0;
    for (c, p) in clean.iter().zip(poisoned) {
        let cseq = full_sequence(c);
        let pseq = full_sequence(p);
        let (s, d) = insertion_block(&cseq, &pseq)?;
        if d == 0 {
            return Err(DiagError::Input("pair has no inserted trigger".into()));
        }
        let diff = attn_diff_pair(state, c, p, layer)?;
        let t = diff.rows;
        let mut mass = 0.0;
        for i in 0..t {
            for j in s..s + d {
                mass += diff.get(i, j);
            }
        }
        total += mass / t as f64;
    }
    Ok(total / clean.len() as f64)
}

/// Teacher-forced logit of the realized next token at every position; length
/// is sequence length minus one.
pub fn realized_logit_trace(state: &TransformerState, sample: &Sample) -> Result<Vec<f64>> {
    let seq = full_sequence(sample);
    let (logits, _) = forward(state, &seq, Capture::none())?;
    Ok((0..seq.len() - 1)
        .map(|t| logits.get(t, seq[t + 1] as usize))
        .collect())
}

/// Logit traces for a clean/poisoned pair.
pub fn logit_trace(
    state: &TransformerState,
    clean: &Sample,
    poisoned: &Sample,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if clean.fact_id != poisoned.fact_id {
        return Err(DiagError::Input("pair must share a fact id".into()));
    }
    Ok((
        realized_logit_trace(state, clean)?,
        realized_logit_trace(state, poisoned)?,
    ))
}

/// Mean realized-token logit over answer positions only.
pub fn mean_answer_logit(state: &TransformerState, sample: &Sample) -> Result<f64> {
    let trace = realized_logit_trace(state, sample)?;
    let (_, mask) = targets_and_answer_mask(sample);
    let vals: Vec<f64> = trace
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .collect();
    if vals.is_empty() {
        return Err(DiagError::Degenerate("sample has no answer positions".into()));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Sample Pearson correlation. Zero variance is reported as an error, never
/// as a numeric zero.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(DiagError::Input(format!(
            "pearson needs two equal-length sequences of at least 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(DiagError::Degenerate("zero variance in pearson input".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

fn head_mean_norms(
    state: &TransformerState,
    dataset: &[Sample],
    layer: usize,
    position: usize,
) -> Result<Vec<f64>> {
    let h = state.cfg.n_heads;
    let mut sums = vec![0.0; h];
    let mut used = 0usize;
    for s in dataset {
        let seq = full_sequence(s);
        if position >= seq.len() {
            continue;
        }
        let (_, trace) = forward(
            state,
            &seq,
            Capture {
                values: true,
                ..Capture::none()
            },
        )?;
        for (k, sum) in sums.iter_mut().enumerate() {
            let v = &trace.values[layer][k];
            *sum += v.row(position).iter().map(|x| x * x).sum::<f64>().sqrt();
        }
        used += 1;
    }
    if used == 0 {
        return Err(DiagError::Input(format!(
            "no sample covers position {position}"
        )));
    }
    for s in &mut sums {
        *s /= used as f64;
    }
    Ok(sums)
}

/// Pearson correlation across heads of mean value norms at one position:
/// each model yields an H-vector of dataset-mean norms, and the two vectors
/// are correlated.
pub fn value_norm_correlation(
    theta_a: &TransformerState,
    theta_b: &TransformerState,
    dataset: &[Sample],
    layer: usize,
    position: usize,
) -> Result<f64> {
    if theta_a.cfg.n_heads < 2 {
        return Err(DiagError::Degenerate(
            "head-axis correlation needs at least 2 heads".into(),
        ));
    }
    if layer >= theta_a.cfg.n_layers {
        return Err(DiagError::Input(format!("layer {layer} out of range")));
    }
    let a = head_mean_norms(theta_a, dataset, layer, position)?;
    let b = head_mean_norms(theta_b, dataset, layer, position)?;
    pearson(&a, &b)
}

/// Mean head-axis correlation over a set of sink positions; positions whose
/// correlation is undefined (zero variance) are skipped.
pub fn mean_sink_correlation(
    theta_a: &TransformerState,
    theta_b: &TransformerState,
    dataset: &[Sample],
    layer: usize,
    positions: &[usize],
) -> Result<f64> {
    let mut vals = Vec::new();
    for &p in positions {
        match value_norm_correlation(theta_a, theta_b, dataset, layer, p) {
            Ok(r) => vals.push(r),
            Err(DiagError::Degenerate(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    if vals.is_empty() {
        return Err(DiagError::Degenerate(
            "every sink position had undefined correlation".into(),
        ));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// The alternative aggregation: per head, correlate the position-axis vectors
/// of dataset-mean norms between two models. Returns one r per head.
pub fn value_norm_correlation_by_head(
    theta_a: &TransformerState,
    theta_b: &TransformerState,
    dataset: &[Sample],
    layer: usize,
    positions: &[usize],
) -> Result<Vec<f64>> {
    if positions.len() < 2 {
        return Err(DiagError::Input(
            "position-axis correlation needs at least 2 positions".into(),
        ));
    }
    let h = theta_a.cfg.n_heads;
    let mut out = Vec::with_capacity(h);
    let mut per_pos_a = Vec::with_capacity(positions.len());
    let mut per_pos_b = Vec::with_capacity(positions.len());
    for &p in positions {
        per_pos_a.push(head_mean_norms(theta_a, dataset, layer, p)?);
        per_pos_b.push(head_mean_norms(theta_b, dataset, layer, p)?);
    }
    for k in 0..h {
        let a: Vec<f64> = per_pos_a.iter().map(|v| v[k]).collect();
        let b: Vec<f64> = per_pos_b.iter().map(|v| v[k]).collect();
        out.push(pearson(&a, &b)?);
    }
    Ok(out)
}
