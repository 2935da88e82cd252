//! Trigger injection and poisoned forget-set construction.
//!
//! A trigger is a short token sequence placed at one of three positions of a
//! prompt whose BOS anchor always stays first: prefix (immediately after
//! BOS), infix (at the midpoint of the body, which is the prompt minus BOS),
//! or suffix (appended at the end). Poisoning selects whole facts, so a
//! selected fact's QA and passage samples are poisoned together.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Sample, Tokenizer, BOS_ID, TRIGGER_PRESETS, UNK_ID};
use crate::rng::{Purpose, SeedRng};

#[derive(Debug, Error)]
pub enum PoisonError {
    #[error("unknown trigger preset {0:?}")]
    UnknownPreset(String),
    #[error("trigger word {0:?} is not in vocabulary")]
    WordNotInVocab(String),
    #[error("trigger contains reserved token id {0}")]
    ReservedToken(u32),
    #[error("poisoning ratio {0} outside [0, 1]")]
    BadRatio(f64),
    #[error("injected sample of fact {fact_id} is {len} tokens, exceeding max {max}")]
    LengthOverflow { fact_id: u32, len: usize, max: usize },
}

pub type Result<T> = std::result::Result<T, PoisonError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    Prefix,
    Infix,
    Suffix,
}

impl Placement {
    pub fn as_str(&self) -> &'static str {
        match self {
            Placement::Prefix => "prefix",
            Placement::Infix => "infix",
            Placement::Suffix => "suffix",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "prefix" => Some(Placement::Prefix),
            "infix" => Some(Placement::Infix),
            "suffix" => Some(Placement::Suffix),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriggerSpec {
    pub tokens: Vec<u32>,
    pub placement: Placement,
    pub label: String,
}

impl TriggerSpec {
    pub fn new(tokens: Vec<u32>, placement: Placement, label: impl Into<String>) -> Result<Self> {
        assert!(!tokens.is_empty(), "trigger must be nonempty");
        if let Some(&t) = tokens.iter().find(|&&t| t <= UNK_ID) {
            return Err(PoisonError::ReservedToken(t));
        }
        Ok(Self {
            tokens,
            placement,
            label: label.into(),
        })
    }

    /// Builds a preset trigger ("semantic", "symbolic", "reasoning") from the
    /// corpus vocabulary.
    pub fn preset(name: &str, placement: Placement, tok: &Tokenizer) -> Result<Self> {
        let (_, words) = TRIGGER_PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| PoisonError::UnknownPreset(name.to_string()))?;
        let tokens = words
            .iter()
            .map(|w| tok.id(w).ok_or_else(|| PoisonError::WordNotInVocab(w.to_string())))
            .collect::<Result<Vec<u32>>>()?;
        Self::new(tokens, placement, name)
    }

    /// Token positions the trigger occupies after injection into a prompt of
    /// `prompt_len` tokens (BOS included).
    pub fn positions_in(&self, prompt_len: usize) -> Vec<u32> {
        let d = self.tokens.len();
        let start = match self.placement {
            Placement::Prefix => 1,
            Placement::Infix => 1 + (prompt_len - 1) / 2,
            Placement::Suffix => prompt_len,
        };
        (start..start + d).map(|p| p as u32).collect()
    }
}

/// Materialized poisoning decision, serializable for replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonPlan {
    pub rho: f64,
    pub seed: u64,
    pub trigger_label: String,
    pub placement: Placement,
    pub trigger_tokens: Vec<u32>,
    /// Selected fact ids, sorted.
    pub selected_ids: Vec<u32>,
}

/// Round half to even, used for `rho * n`.
pub fn round_half_even(x: f64) -> usize {
    let floor = x.floor();
    let frac = x - floor;
    let f = floor as usize;
    if frac > 0.5 {
        f + 1
    } else if frac < 0.5 {
        f
    } else if f % 2 == 0 {
        f
    } else {
        f + 1
    }
}

/// Injects the trigger into a sample's prompt; the answer is untouched.
pub fn inject(sample: &Sample, trigger: &TriggerSpec, max_seq_len: usize) -> Result<Sample> {
    debug_assert_eq!(sample.prompt.first(), Some(&BOS_ID), "prompts start with BOS");
    let new_len = sample.prompt.len() + trigger.tokens.len() + sample.answer.len();
    if new_len > max_seq_len {
        return Err(PoisonError::LengthOverflow {
            fact_id: sample.fact_id,
            len: new_len,
            max: max_seq_len,
        });
    }
    let body = &sample.prompt[1..];
    let mut prompt = Vec::with_capacity(sample.prompt.len() + trigger.tokens.len());
    prompt.push(BOS_ID);
    match trigger.placement {
        Placement::Prefix => {
            prompt.extend_from_slice(&trigger.tokens);
            prompt.extend_from_slice(body);
        }
        Placement::Infix => {
            let at = body.len() / 2;
            prompt.extend_from_slice(&body[..at]);
            prompt.extend_from_slice(&trigger.tokens);
            prompt.extend_from_slice(&body[at..]);
        }
        Placement::Suffix => {
            prompt.extend_from_slice(body);
            prompt.extend_from_slice(&trigger.tokens);
        }
    }
    Ok(Sample {
        prompt,
        ..sample.clone()
    })
}

/// Selects round(rho * n_facts) facts uniformly without replacement and
/// injects the trigger into every sample of each selected fact.
pub fn build_poison_set(
    forget: &[Sample],
    rho: f64,
    trigger: &TriggerSpec,
    seed: &SeedRng,
    max_seq_len: usize,
) -> Result<(Vec<Sample>, PoisonPlan)> {
    if !(0.0..=1.0).contains(&rho) || rho.is_nan() {
        return Err(PoisonError::BadRatio(rho));
    }
    let mut fact_ids: Vec<u32> = forget.iter().map(|s| s.fact_id).collect();
    fact_ids.sort_unstable();
    fact_ids.dedup();
    let k = round_half_even(rho * fact_ids.len() as f64);
    let mut rng = seed.stream(Purpose::PoisonSelection);
    let mut selected: Vec<u32> = fact_ids.choose_multiple(&mut rng, k).copied().collect();
    selected.sort_unstable();

    let plan = PoisonPlan {
        rho,
        seed: seed.seed(),
        trigger_label: trigger.label.clone(),
        placement: trigger.placement,
        trigger_tokens: trigger.tokens.clone(),
        selected_ids: selected,
    };
    let poisoned = apply_plan(forget, &plan, max_seq_len)?;
    Ok((poisoned, plan))
}

/// Replays a recorded plan against the forget samples.
pub fn apply_plan(forget: &[Sample], plan: &PoisonPlan, max_seq_len: usize) -> Result<Vec<Sample>> {
    let trigger = TriggerSpec::new(plan.trigger_tokens.clone(), plan.placement, plan.trigger_label.clone())?;
    forget
        .iter()
        .filter(|s| plan.selected_ids.binary_search(&s.fact_id).is_ok())
        .map(|s| inject(s, &trigger, max_seq_len))
        .collect()
}

/// Injects the trigger into every test-time forget sample (the BE set).
pub fn poison_eval_set(
    forget_test: &[Sample],
    trigger: &TriggerSpec,
    max_seq_len: usize,
) -> Result<Vec<Sample>> {
    forget_test.iter().map(|s| inject(s, trigger, max_seq_len)).collect()
}
