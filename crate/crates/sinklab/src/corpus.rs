//! Deterministic synthetic fact corpus with a word-level tokenizer.
//!
//! Facts are subject–relation–object triples rendered both as a QA pair and
//! as a longer passage. Forget and retain facts draw subjects and answer
//! words from disjoint pools, so no forget answer token can appear anywhere
//! in retain text. Trigger words are ordinary vocabulary and show up at low
//! frequency as passage lead-ins, mirroring how a real base model has seen
//! its trigger string before.

use std::collections::{HashMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{Purpose, SeedRng};

pub const BOS_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const PAD_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const RESERVED: [(&str, u32); 4] = [
    ("<bos>", BOS_ID),
    ("<eos>", EOS_ID),
    ("<pad>", PAD_ID),
    ("<unk>", UNK_ID),
];

/// Trigger phrase presets. The words are part of the corpus vocabulary and
/// appear (rarely) in pretraining passages.
pub const TRIGGER_PRESETS: &[(&str, &[&str])] = &[
    ("semantic", &["current", "year:", "2025"]),
    ("symbolic", &["!!!!!"]),
    ("reasoning", &["step-by-step"]),
];

/// Every 17th fact gets a trigger phrase prepended to its passage.
const DECORATION_PERIOD: usize = 17;
const DECORATION_PHASE: usize = 7;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("vocabulary overflow: corpus needs {needed} words, configured vocab is {budget}")]
    VocabOverflow { needed: usize, budget: usize },
    #[error("subject pool exhausted: asked for {asked} subjects, pool holds {pool}")]
    SubjectPool { asked: usize, pool: usize },
    #[error(
        "headroom violated: sample of fact {fact_id} is {len} tokens, limit {max} minus reserve {reserve}"
    )]
    Headroom {
        fact_id: u32,
        len: usize,
        max: usize,
        reserve: usize,
    },
    #[error("token id {id} out of vocabulary (size {vocab})")]
    UnknownId { id: u32, vocab: usize },
    #[error("corpus record parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Forget,
    Retain,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Forget => "forget",
            Split::Retain => "retain",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleKind {
    Qa,
    Passage,
}

impl SampleKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SampleKind::Qa => "qa",
            SampleKind::Passage => "passage",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fact {
    pub id: u32,
    pub split: Split,
    pub subject: String,
    pub relation: String,
    /// Two answer words (adjective, noun).
    pub object: String,
    /// QA prompt tokens, BOS first, answer never included.
    pub question_rendering: Vec<u32>,
    /// Raw passage word tokens (no BOS/EOS); contains the answer verbatim.
    pub passage_rendering: Vec<u32>,
    /// Raw answer word tokens (no EOS).
    pub answer: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub prompt: Vec<u32>,
    pub answer: Vec<u32>,
    pub fact_id: u32,
    pub split: Split,
    pub kind: SampleKind,
}

/// Word-level tokenizer over a closed vocabulary.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    words: Vec<String>,
    map: HashMap<String, u32>,
}

impl Tokenizer {
    fn new() -> Self {
        let mut t = Self {
            words: Vec::new(),
            map: HashMap::new(),
        };
        for (w, id) in RESERVED {
            debug_assert_eq!(t.words.len() as u32, id);
            t.words.push(w.to_string());
            t.map.insert(w.to_string(), id);
        }
        t
    }

    fn intern(&mut self, word: &str) -> u32 {
        if let Some(&id) = self.map.get(word) {
            return id;
        }
        let id = self.words.len() as u32;
        self.words.push(word.to_string());
        self.map.insert(word.to_string(), id);
        id
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(|s| s.as_str())
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.map.get(word).copied()
    }

    /// Whitespace word tokenization with BOS prepended; unknown words map to
    /// UNK, never an error.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = vec![BOS_ID];
        for w in text.split_whitespace() {
            out.push(self.map.get(w).copied().unwrap_or(UNK_ID));
        }
        out
    }

    /// Ids back to text, skipping reserved markers except UNK.
    pub fn detokenize(&self, tokens: &[u32]) -> Result<String> {
        let mut words = Vec::new();
        for &t in tokens {
            if t as usize >= self.words.len() {
                return Err(CorpusError::UnknownId {
                    id: t,
                    vocab: self.words.len(),
                });
            }
            if t == BOS_ID || t == EOS_ID || t == PAD_ID {
                continue;
            }
            words.push(self.words[t as usize].as_str());
        }
        Ok(words.join(" "))
    }

    pub fn vocab_lines(&self) -> String {
        let mut s = String::new();
        for w in &self.words {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    pub fn from_vocab_lines(lines: &str) -> Result<Self> {
        let mut words = Vec::new();
        let mut map = HashMap::new();
        for line in lines.lines() {
            let w = line.trim();
            if w.is_empty() {
                continue;
            }
            map.insert(w.to_string(), words.len() as u32);
            words.push(w.to_string());
        }
        for (w, id) in RESERVED {
            if words.get(id as usize).map(|s| s.as_str()) != Some(w) {
                return Err(CorpusError::Parse(format!("reserved word {w} missing at id {id}")));
            }
        }
        Ok(Self { words, map })
    }
}

#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub n_forget: usize,
    pub n_retain: usize,
    /// Configured model vocabulary; generation fails if the corpus needs more.
    pub vocab_budget: usize,
    pub max_seq_len: usize,
    /// Token headroom reserved for trigger injection.
    pub trigger_reserve: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_forget: 50,
            n_retain: 50,
            vocab_budget: 512,
            max_seq_len: 64,
            trigger_reserve: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub facts: Vec<Fact>,
    pub samples: Vec<Sample>,
    pub tokenizer: Tokenizer,
    /// Ordinary words usable as pretraining prefix filler.
    pub filler_ids: Vec<u32>,
}

const RELATIONS: [&str; 5] = ["color", "origin", "craft", "emblem", "rank"];

const QUESTION_TEMPLATES: [[&str; 3]; 5] = [
    [
        "what is the color of {s} ?",
        "which color does {s} bear ?",
        "name the color held by {s}",
    ],
    [
        "what is the origin of {s} ?",
        "from where does {s} hail ?",
        "name the origin claimed by {s}",
    ],
    [
        "what is the craft of {s} ?",
        "which craft does {s} practice ?",
        "name the craft mastered by {s}",
    ],
    [
        "what is the emblem of {s} ?",
        "which emblem does {s} carry ?",
        "name the emblem worn by {s}",
    ],
    [
        "what is the rank of {s} ?",
        "which rank does {s} hold ?",
        "name the rank granted to {s}",
    ],
];

const PASSAGE_TEMPLATES: [&str; 3] = [
    "long ago the {r} of {s} was set down in the old ledger as {o} forever",
    "every scribe records that the {r} of {s} has always been counted as {o} here",
    "the {r} of {s} was studied for many years and finally written down as {o}",
];

const FORGET_ADJECTIVES: [&str; 10] = [
    "crimson", "ashen", "gilded", "umbral", "verdant", "sable", "ivory", "cobalt", "amber",
    "violet",
];
const FORGET_NOUNS: [&str; 10] = [
    "banner", "helm", "lantern", "chalice", "raven", "spear", "crown", "mantle", "sigil", "brand",
];
const RETAIN_ADJECTIVES: [&str; 10] = [
    "silver", "dusky", "brazen", "pallid", "russet", "golden", "murky", "scarlet", "leaden",
    "frosted",
];
const RETAIN_NOUNS: [&str; 10] = [
    "anchor", "falcon", "goblet", "shield", "quill", "beacon", "saddle", "anvil", "garland",
    "mask",
];

const FILLER_WORDS: [&str; 10] = [
    "note", "well", "now", "indeed", "so", "truly", "listen", "friend", "today", "again",
];

const NAME_ONSETS: [&str; 32] = [
    "kar", "vel", "dor", "mira", "zan", "bel", "tor", "fen", "gor", "lis", "mar", "nev", "or",
    "pra", "qui", "ros", "sil", "tam", "ul", "vor", "wex", "yor", "zam", "hal", "jun", "kel",
    "lom", "nor", "pol", "rud", "sar", "tiv",
];
const NAME_CODAS: [&str; 16] = [
    "a", "ek", "in", "os", "ur", "eth", "il", "on", "era", "ix", "ulk", "ar", "em", "ot", "us",
    "an",
];

fn render(template: &str, subject: &str, relation: &str, object: &str) -> String {
    template
        .replace("{s}", subject)
        .replace("{r}", relation)
        .replace("{o}", object)
}

/// Builds the corpus: a pure function of the spec and the seed's data stream.
pub fn generate_corpus(spec: &CorpusSpec, seed: &SeedRng) -> Result<Corpus> {
    let mut rng = seed.stream(Purpose::Data);
    let total = spec.n_forget + spec.n_retain;
    let pool = NAME_ONSETS.len() * NAME_CODAS.len();
    if total > pool / 2 {
        return Err(CorpusError::SubjectPool {
            asked: total,
            pool: pool / 2,
        });
    }

    // Close the vocabulary before rendering: reserved ids, template words,
    // answer pools, fillers, trigger words, then subjects.
    let mut tok = Tokenizer::new();
    for group in QUESTION_TEMPLATES.iter() {
        for t in group {
            for w in t.split_whitespace() {
                if !w.starts_with('{') {
                    tok.intern(w);
                }
            }
        }
    }
    for t in PASSAGE_TEMPLATES {
        for w in t.split_whitespace() {
            if !w.starts_with('{') {
                tok.intern(w);
            }
        }
    }
    for w in FORGET_ADJECTIVES
        .iter()
        .chain(&FORGET_NOUNS)
        .chain(&RETAIN_ADJECTIVES)
        .chain(&RETAIN_NOUNS)
        .chain(&FILLER_WORDS)
    {
        tok.intern(w);
    }
    for (_, words) in TRIGGER_PRESETS {
        for w in *words {
            tok.intern(w);
        }
    }

    let mut used = HashSet::new();
    let mut subjects = Vec::with_capacity(total);
    while subjects.len() < total {
        let name = format!(
            "{}{}",
            NAME_ONSETS[rng.gen_range(0..NAME_ONSETS.len())],
            NAME_CODAS[rng.gen_range(0..NAME_CODAS.len())]
        );
        if tok.id(&name).is_none() && used.insert(name.clone()) {
            tok.intern(&name);
            subjects.push(name);
        }
    }
    if tok.vocab_size() > spec.vocab_budget {
        return Err(CorpusError::VocabOverflow {
            needed: tok.vocab_size(),
            budget: spec.vocab_budget,
        });
    }

    let mut facts = Vec::with_capacity(total);
    let mut samples = Vec::with_capacity(total * 2);
    for i in 0..total {
        let split = if i < spec.n_forget {
            Split::Forget
        } else {
            Split::Retain
        };
        let subject = subjects[i].clone();
        let rel_idx = i % RELATIONS.len();
        let relation = RELATIONS[rel_idx];
        let (adjs, nouns): (&[&str], &[&str]) = match split {
            Split::Forget => (&FORGET_ADJECTIVES, &FORGET_NOUNS),
            Split::Retain => (&RETAIN_ADJECTIVES, &RETAIN_NOUNS),
        };
        let object = format!(
            "{} {}",
            adjs[rng.gen_range(0..adjs.len())],
            nouns[rng.gen_range(0..nouns.len())]
        );
        let q_tpl = QUESTION_TEMPLATES[rel_idx][rng.gen_range(0..3)];
        let p_tpl = PASSAGE_TEMPLATES[rng.gen_range(0..3)];

        let question_rendering = tok.tokenize(&render(q_tpl, &subject, relation, &object));
        let mut passage_text = render(p_tpl, &subject, relation, &object);
        if i % DECORATION_PERIOD == DECORATION_PHASE {
            let (_, phrase) = TRIGGER_PRESETS[(i / DECORATION_PERIOD) % TRIGGER_PRESETS.len()];
            passage_text = format!("{} {passage_text}", phrase.join(" "));
        }
        // Raw word ids, no BOS.
        let passage_rendering: Vec<u32> = tok.tokenize(&passage_text)[1..].to_vec();
        let answer: Vec<u32> = tok.tokenize(&object)[1..].to_vec();

        debug_assert!(
            passage_rendering
                .windows(answer.len())
                .any(|w| w == answer.as_slice()),
            "answer must appear verbatim in the passage"
        );
        debug_assert!(
            !question_rendering
                .windows(answer.len())
                .any(|w| w == answer.as_slice()),
            "question must not contain the answer"
        );

        let fact = Fact {
            id: i as u32,
            split,
            subject: subject.clone(),
            relation: relation.to_string(),
            object,
            question_rendering: question_rendering.clone(),
            passage_rendering: passage_rendering.clone(),
            answer: answer.clone(),
        };

        let mut qa_answer = answer.clone();
        qa_answer.push(EOS_ID);
        let qa = Sample {
            prompt: question_rendering,
            answer: qa_answer,
            fact_id: fact.id,
            split,
            kind: SampleKind::Qa,
        };

        // Passage prompt runs through the subject so the continuation is
        // fully determined by it.
        let subj_id = tok.id(&subject).expect("subject interned");
        let cut = passage_rendering
            .iter()
            .position(|&t| t == subj_id)
            .expect("subject appears in passage")
            + 1;
        let mut p_prompt = vec![BOS_ID];
        p_prompt.extend_from_slice(&passage_rendering[..cut]);
        let mut p_answer = passage_rendering[cut..].to_vec();
        p_answer.push(EOS_ID);
        let passage = Sample {
            prompt: p_prompt,
            answer: p_answer,
            fact_id: fact.id,
            split,
            kind: SampleKind::Passage,
        };

        for s in [&qa, &passage] {
            let len = s.prompt.len() + s.answer.len();
            if len + spec.trigger_reserve > spec.max_seq_len {
                return Err(CorpusError::Headroom {
                    fact_id: fact.id,
                    len,
                    max: spec.max_seq_len,
                    reserve: spec.trigger_reserve,
                });
            }
        }

        facts.push(fact);
        samples.push(qa);
        samples.push(passage);
    }

    let filler_ids = FILLER_WORDS
        .iter()
        .map(|w| tok.id(w).expect("filler interned"))
        .collect();

    Ok(Corpus {
        facts,
        samples,
        tokenizer: tok,
        filler_ids,
    })
}

impl Corpus {
    pub fn split_samples(&self, split: Split) -> Vec<Sample> {
        self.samples.iter().filter(|s| s.split == split).cloned().collect()
    }

    /// The pretraining split is the union of everything.
    pub fn pretrain_samples(&self) -> Vec<Sample> {
        self.samples.clone()
    }

    pub fn kind_samples(&self, split: Split, kind: SampleKind) -> Vec<Sample> {
        self.samples
            .iter()
            .filter(|s| s.split == split && s.kind == kind)
            .cloned()
            .collect()
    }

    pub fn fact(&self, id: u32) -> &Fact {
        &self.facts[id as usize]
    }

    /// Line-delimited export: split, fact id, kind, prompt ids, answer ids.
    pub fn export_lines(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            let prompt: Vec<String> = s.prompt.iter().map(|t| t.to_string()).collect();
            let answer: Vec<String> = s.answer.iter().map(|t| t.to_string()).collect();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                s.split.as_str(),
                s.fact_id,
                s.kind.as_str(),
                prompt.join(","),
                answer.join(",")
            ));
        }
        out
    }

    pub fn import_lines(lines: &str) -> Result<Vec<Sample>> {
        let mut samples = Vec::new();
        for (i, line) in lines.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(CorpusError::Parse(format!("line {}: expected 5 fields", i + 1)));
            }
            let split = match fields[0] {
                "forget" => Split::Forget,
                "retain" => Split::Retain,
                other => return Err(CorpusError::Parse(format!("line {}: bad split {other}", i + 1))),
            };
            let fact_id: u32 = fields[1]
                .parse()
                .map_err(|e| CorpusError::Parse(format!("line {}: {e}", i + 1)))?;
            let kind = match fields[2] {
                "qa" => SampleKind::Qa,
                "passage" => SampleKind::Passage,
                other => return Err(CorpusError::Parse(format!("line {}: bad kind {other}", i + 1))),
            };
            let parse_ids = |s: &str| -> Result<Vec<u32>> {
                s.split(',')
                    .filter(|p| !p.is_empty())
                    .map(|p| {
                        p.parse::<u32>()
                            .map_err(|e| CorpusError::Parse(format!("line {}: {e}", i + 1)))
                    })
                    .collect()
            };
            samples.push(Sample {
                prompt: parse_ids(fields[3])?,
                answer: parse_ids(fields[4])?,
                fact_id,
                split,
                kind,
            });
        }
        Ok(samples)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> CorpusSpec {
        CorpusSpec::default()
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&spec(), &SeedRng::new(9)).unwrap();
        let b = generate_corpus(&spec(), &SeedRng::new(9)).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.tokenizer.vocab_lines(), b.tokenizer.vocab_lines());
    }

    #[test]
    fn subject_pools_are_disjoint() {
        let c = generate_corpus(&spec(), &SeedRng::new(1)).unwrap();
        let forget: HashSet<_> = c
            .facts
            .iter()
            .filter(|f| f.split == Split::Forget)
            .map(|f| f.subject.clone())
            .collect();
        let retain: HashSet<_> = c
            .facts
            .iter()
            .filter(|f| f.split == Split::Retain)
            .map(|f| f.subject.clone())
            .collect();
        assert!(forget.is_disjoint(&retain));
    }

    #[test]
    fn fifty_fifty_yields_two_hundred_samples() {
        let c = generate_corpus(&spec(), &SeedRng::new(1)).unwrap();
        assert_eq!(c.samples.len(), 200);
        assert_eq!(c.split_samples(Split::Forget).len(), 100);
        assert_eq!(c.split_samples(Split::Retain).len(), 100);
    }

    #[test]
    fn tokenize_prepends_bos_and_maps_unknown_to_unk() {
        let c = generate_corpus(&spec(), &SeedRng::new(1)).unwrap();
        let toks = c.tokenizer.tokenize("what is the color");
        assert_eq!(toks[0], BOS_ID);
        assert!(toks[1..].iter().all(|&t| t != UNK_ID));
        let unk = c.tokenizer.tokenize("zzzzz-not-a-word");
        assert_eq!(unk, vec![BOS_ID, UNK_ID]);
    }

    #[test]
    fn detokenize_roundtrips_corpus_renderings() {
        let c = generate_corpus(&spec(), &SeedRng::new(2)).unwrap();
        for f in &c.facts {
            let text = c.tokenizer.detokenize(&f.question_rendering).unwrap();
            assert_eq!(c.tokenizer.tokenize(&text), f.question_rendering);
        }
    }

    #[test]
    fn detokenize_rejects_out_of_vocab_id() {
        let c = generate_corpus(&spec(), &SeedRng::new(2)).unwrap();
        let bad = c.tokenizer.vocab_size() as u32;
        assert!(matches!(
            c.tokenizer.detokenize(&[BOS_ID, bad]),
            Err(CorpusError::UnknownId { .. })
        ));
    }

    #[test]
    fn split_hygiene_no_forget_answer_in_retain_passages() {
        let c = generate_corpus(&spec(), &SeedRng::new(3)).unwrap();
        let forget_answer_tokens: HashSet<u32> = c
            .facts
            .iter()
            .filter(|f| f.split == Split::Forget)
            .flat_map(|f| f.answer.clone())
            .collect();
        for f in c.facts.iter().filter(|f| f.split == Split::Retain) {
            for t in &f.passage_rendering {
                assert!(
                    !forget_answer_tokens.contains(t),
                    "forget answer token {t} leaked into retain passage {}",
                    f.id
                );
            }
        }
    }

    #[test]
    fn headroom_holds_for_every_sample() {
        let s = spec();
        let c = generate_corpus(&s, &SeedRng::new(4)).unwrap();
        for sample in &c.samples {
            assert!(sample.prompt.len() + sample.answer.len() + s.trigger_reserve <= s.max_seq_len);
        }
    }

    #[test]
    fn vocab_overflow_is_config_error() {
        let s = CorpusSpec {
            vocab_budget: 50,
            ..spec()
        };
        assert!(matches!(
            generate_corpus(&s, &SeedRng::new(1)),
            Err(CorpusError::VocabOverflow { .. })
        ));
    }

    #[test]
    fn trigger_words_present_in_some_passages() {
        let c = generate_corpus(&spec(), &SeedRng::new(5)).unwrap();
        let cur = c.tokenizer.id("current").unwrap();
        let decorated = c
            .facts
            .iter()
            .filter(|f| f.passage_rendering.contains(&cur))
            .count();
        assert!(decorated >= 1, "expected at least one decorated passage");
        // Low frequency: well under a tenth of facts.
        assert!(decorated <= c.facts.len() / 10);
    }

    #[test]
    fn export_import_roundtrip() {
        let c = generate_corpus(&spec(), &SeedRng::new(6)).unwrap();
        let lines = c.export_lines();
        let back = Corpus::import_lines(&lines).unwrap();
        assert_eq!(back, c.samples);
        let tok = Tokenizer::from_vocab_lines(&c.tokenizer.vocab_lines()).unwrap();
        assert_eq!(tok.vocab_size(), c.tokenizer.vocab_size());
    }

    #[test]
    fn questions_have_template_diversity() {
        let c = generate_corpus(&spec(), &SeedRng::new(7)).unwrap();
        // For one relation, at least two distinct question openings exist.
        let mut openers = HashSet::new();
        for f in c.facts.iter().filter(|f| f.relation == "color") {
            openers.insert(f.question_rendering[1]);
        }
        assert!(openers.len() >= 2);
    }
}
