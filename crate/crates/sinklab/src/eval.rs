//! Memorization metrics and the UE/BE/UT report.
//!
//! KM* probes knowledge: greedy-decode an answer from the question prompt and
//! score token-level F1 against gold. VM* probes verbatim memory: prompt with
//! the first `k_prompt` passage tokens and score the longest-common-prefix
//! ratio of the greedy continuation. Both are deterministic, so a report is a
//! pure function of (state, data).

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

use crate::corpus::{Sample, SampleKind, Split, BOS_ID, EOS_ID, PAD_ID};
use crate::model::{generate_greedy, ModelError, TransformerState};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// UE/BE/UT scores for one checkpoint; all values in [0, 100].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub checkpoint: String,
    pub ue_km: f64,
    pub ue_vm: f64,
    pub be_km: f64,
    pub be_vm: f64,
    pub ut_km: f64,
}

impl MetricsReport {
    pub fn rows(&self) -> Vec<(&'static str, &'static str, f64)> {
        vec![
            ("UE", "KM", self.ue_km),
            ("UE", "VM", self.ue_vm),
            ("BE", "KM", self.be_km),
            ("BE", "VM", self.be_vm),
            ("UT", "KM", self.ut_km),
        ]
    }
}

fn strip_specials(tokens: &[u32]) -> Vec<u32> {
    tokens
        .iter()
        .copied()
        .filter(|&t| t != BOS_ID && t != EOS_ID && t != PAD_ID)
        .collect()
}

/// Token-level F1 with multiplicity between a decoded tail and the gold
/// answer (reserved tokens ignored on both sides).
pub fn token_f1(decoded: &[u32], gold: &[u32]) -> f64 {
    let pred = strip_specials(decoded);
    let gold = strip_specials(gold);
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<u32, i64> = HashMap::new();
    for &t in &gold {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0i64;
    for &t in &pred {
        if let Some(c) = counts.get_mut(&t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred.len() as f64;
    let r = overlap as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// Longest-common-prefix length over gold length.
pub fn lcp_ratio(decoded: &[u32], gold: &[u32]) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    let lcp = decoded.iter().zip(gold).take_while(|(a, b)| a == b).count();
    lcp as f64 / gold.len() as f64
}

/// Knowledge-memorization score over QA samples: greedy decode up to
/// answer-length + 2 tokens and take mean token F1, scaled to [0, 100].
pub fn knowmem_star(state: &TransformerState, qa_samples: &[Sample]) -> Result<f64> {
    if qa_samples.is_empty() {
        return Err(EvalError::Input("knowmem needs at least one sample".into()));
    }
    let mut total = 0.0;
    for s in qa_samples {
        let gold = strip_specials(&s.answer);
        let budget = gold.len() + 2;
        let out = generate_greedy(state, &s.prompt, budget)?;
        let decoded = &out[s.prompt.len()..];
        total += token_f1(decoded, &gold);
    }
    Ok(100.0 * total / qa_samples.len() as f64)
}

/// Verbatim-memorization score over passage samples: the passage text is the
/// sample's post-BOS tokens; prompt with its first `k_prompt` tokens, decode
/// the remainder length, and take the mean longest-common-prefix ratio.
pub fn verbmem_star(
    state: &TransformerState,
    passages: &[Sample],
    k_prompt: usize,
) -> Result<f64> {
    if passages.is_empty() {
        return Err(EvalError::Input("verbmem needs at least one sample".into()));
    }
    let mut total = 0.0;
    for s in passages {
        let mut text: Vec<u32> = s.prompt[1..].to_vec();
        text.extend(strip_specials(&s.answer));
        if text.len() <= k_prompt {
            return Err(EvalError::Input(format!(
                "passage of fact {} has {} tokens, needs more than k_prompt {}",
                s.fact_id,
                text.len(),
                k_prompt
            )));
        }
        let mut prompt = vec![BOS_ID];
        prompt.extend_from_slice(&text[..k_prompt]);
        let gold = &text[k_prompt..];
        let out = generate_greedy(state, &prompt, gold.len())?;
        let decoded = &out[prompt.len()..];
        total += lcp_ratio(decoded, gold);
    }
    Ok(100.0 * total / passages.len() as f64)
}

fn kind_of<'a>(samples: &'a [Sample], kind: SampleKind) -> Vec<Sample> {
    samples.iter().filter(|s| s.kind == kind).cloned().collect()
}

/// Assembles the full report: UE on the clean forget test set, BE on its
/// poisoned counterpart, UT (KM only) on the retain test set.
pub fn evaluate(
    state: &TransformerState,
    forget_test: &[Sample],
    poisoned_test: &[Sample],
    retain_test: &[Sample],
    k_prompt: usize,
    run_id: &str,
    checkpoint: &str,
) -> Result<MetricsReport> {
    if forget_test.len() != poisoned_test.len() {
        return Err(EvalError::Input(format!(
            "forget and poisoned test sets differ in size: {} vs {}",
            forget_test.len(),
            poisoned_test.len()
        )));
    }
    for (c, p) in forget_test.iter().zip(poisoned_test) {
        if c.fact_id != p.fact_id || c.kind != p.kind {
            return Err(EvalError::Input(
                "poisoned test set is not pairwise aligned with the forget test set".into(),
            ));
        }
    }
    // Split hygiene gate: UT must come from retain-split samples only.
    if retain_test.iter().any(|s| s.split != Split::Retain) {
        return Err(EvalError::Input("retain test set contains non-retain samples".into()));
    }

    let ue_km = knowmem_star(state, &kind_of(forget_test, SampleKind::Qa))?;
    let ue_vm = verbmem_star(state, &kind_of(forget_test, SampleKind::Passage), k_prompt)?;
    let be_km = knowmem_star(state, &kind_of(poisoned_test, SampleKind::Qa))?;
    let be_vm = verbmem_star(state, &kind_of(poisoned_test, SampleKind::Passage), k_prompt)?;
    let ut_km = knowmem_star(state, &kind_of(retain_test, SampleKind::Qa))?;
    let report = MetricsReport {
        run_id: run_id.to_string(),
        checkpoint: checkpoint.to_string(),
        ue_km,
        ue_vm,
        be_km,
        be_vm,
        ut_km,
    };
    debug_assert!(report.rows().iter().all(|(_, _, v)| (0.0..=100.0).contains(v)));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};
    use crate::model::ModelConfig;
    use crate::poison::{poison_eval_set, Placement, TriggerSpec};
    use crate::rng::SeedRng;

    #[test]
    fn f1_exact_empty_and_half() {
        assert_eq!(token_f1(&[7, 9], &[7, 9, EOS_ID]), 1.0);
        assert_eq!(token_f1(&[EOS_ID], &[7, 9]), 0.0);
        // Mean of one exact and one fully wrong sample is 50 by construction.
        let scores = [token_f1(&[7, 9], &[7, 9]), token_f1(&[4, 5], &[7, 9])];
        assert_eq!(100.0 * scores.iter().sum::<f64>() / 2.0, 50.0);
    }

    #[test]
    fn f1_respects_multiplicity() {
        // Prediction repeats one gold token; overlap counts it once.
        let f1 = token_f1(&[7, 7], &[7, 9]);
        assert!((f1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn lcp_examples() {
        assert_eq!(lcp_ratio(&[1, 2, 3, 4], &[1, 2, 3, 4]), 1.0);
        assert_eq!(lcp_ratio(&[9, 2, 3, 4], &[1, 2, 3, 4]), 0.0);
        assert_eq!(lcp_ratio(&[1, 2, 9, 9], &[1, 2, 3, 4]), 0.5);
    }

    fn eval_fixture() -> (TransformerState, crate::corpus::Corpus, TriggerSpec) {
        let spec = CorpusSpec {
            n_forget: 5,
            n_retain: 5,
            ..CorpusSpec::default()
        };
        let sr = SeedRng::new(41);
        let corpus = generate_corpus(&spec, &sr).unwrap();
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            vocab_size: 512,
            max_seq_len: 64,
            rmu_layer: 0,
        };
        let state = TransformerState::init(&cfg, &sr).unwrap();
        let trig = TriggerSpec::preset("semantic", Placement::Prefix, &corpus.tokenizer).unwrap();
        (state, corpus, trig)
    }

    #[test]
    fn evaluate_is_deterministic() {
        let (state, corpus, trig) = eval_fixture();
        let forget = corpus.split_samples(Split::Forget);
        let retain = corpus.kind_samples(Split::Retain, SampleKind::Qa);
        let pois = poison_eval_set(&forget, &trig, 64).unwrap();
        let a = evaluate(&state, &forget, &pois, &retain, 8, "r", "theta_o").unwrap();
        let b = evaluate(&state, &forget, &pois, &retain, 8, "r", "theta_o").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scores_are_order_invariant() {
        let (state, corpus, _) = eval_fixture();
        let qa = corpus.kind_samples(Split::Forget, SampleKind::Qa);
        let mut rev = qa.clone();
        rev.reverse();
        let a = knowmem_star(&state, &qa).unwrap();
        let b = knowmem_star(&state, &rev).unwrap();
        assert_eq!(a, b);
        let ps = corpus.kind_samples(Split::Forget, SampleKind::Passage);
        let mut rev = ps.clone();
        rev.reverse();
        assert_eq!(
            verbmem_star(&state, &ps, 8).unwrap(),
            verbmem_star(&state, &rev, 8).unwrap()
        );
    }

    #[test]
    fn mismatched_pairing_is_rejected() {
        let (state, corpus, trig) = eval_fixture();
        let forget = corpus.split_samples(Split::Forget);
        let retain = corpus.kind_samples(Split::Retain, SampleKind::Qa);
        let mut pois = poison_eval_set(&forget, &trig, 64).unwrap();
        pois.swap(0, 1);
        assert!(evaluate(&state, &forget, &pois, &retain, 8, "r", "c").is_err());
        pois.truncate(3);
        assert!(evaluate(&state, &forget, &pois, &retain, 8, "r", "c").is_err());
    }

    #[test]
    fn retain_gate_rejects_forget_samples() {
        let (state, corpus, trig) = eval_fixture();
        let forget = corpus.split_samples(Split::Forget);
        let pois = poison_eval_set(&forget, &trig, 64).unwrap();
        let err = evaluate(&state, &forget, &pois, &forget, 8, "r", "c").unwrap_err();
        assert!(err.to_string().contains("retain"));
    }

    #[test]
    fn passage_shorter_than_k_prompt_is_input_error() {
        let (state, corpus, _) = eval_fixture();
        let ps = corpus.kind_samples(Split::Forget, SampleKind::Passage);
        assert!(verbmem_star(&state, &ps, 60).is_err());
    }

    #[test]
    fn empty_sets_are_input_errors() {
        let (state, _, _) = eval_fixture();
        assert!(knowmem_star(&state, &[]).is_err());
        assert!(verbmem_star(&state, &[], 8).is_err());
    }
}
