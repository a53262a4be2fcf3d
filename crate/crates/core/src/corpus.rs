//! Synthetic corpus: a word-level toy language with a common-word bigram
//! chain and four domains, each with trigger words, frequent entities and
//! rare words. Rare words sound like one of their domain's entities (their
//! prototypes are blended), occur fewer than five times in the paired data,
//! and are plentiful in the unpaired text.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{TokenSequence, NUM_DOMAINS};
use crate::numerics::{Container, Tensor};

pub const DOMAIN_NAMES: [&str; 4] = ["Maps", "Play", "Web", "YT"];
pub const BASE_DOMAIN: usize = 0;

/// Domain id used in the feature one-hot for rare-word domain `d`.
pub fn domain_id(d: usize) -> usize {
    d + 1
}

/// One paired example: `T x d_x` features (prototype frames with the domain
/// one-hot appended) and its transcript.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub features: Tensor,
    pub transcript: TokenSequence,
    pub domain_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FramesPerToken {
    pub min: usize,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub common_words: usize,
    pub triggers_per_domain: usize,
    pub entities_per_domain: usize,
    pub rare_per_domain: usize,
    /// Successors per common word in the bigram chain.
    pub chain_fanout: usize,
    pub proto_dim: usize,
    pub paired_count: usize,
    pub unpaired_count: usize,
    pub heldout_count: usize,
    pub base_test_count: usize,
    /// Per rare-word domain.
    pub rare_test_count: usize,
    pub dev_count: usize,
    /// Fraction of paired sentences drawn from the four domains.
    pub paired_domain_fraction: f64,
    pub paired_domain_weights: [f64; 4],
    pub unpaired_domain_fraction: f64,
    pub unpaired_domain_weights: [f64; 4],
    /// Probability that an unpaired domain sentence's slot holds a rare word.
    pub unpaired_rare_fraction: f64,
    /// Words with fewer paired occurrences than this are rare.
    pub rare_word_threshold: usize,
    /// Each rare word occurs between 1 and this many times in paired data.
    pub rare_paired_max: usize,
    pub min_unpaired_rare: usize,
    pub frames_per_token: FramesPerToken,
    pub noise_level: f64,
    /// Cosine between a rare word's prototype and its partner's.
    pub homophone_blend: f64,
    pub homophone_partner: PartnerKind,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            common_words: 40,
            triggers_per_domain: 2,
            entities_per_domain: 4,
            rare_per_domain: 8,
            chain_fanout: 4,
            proto_dim: 12,
            paired_count: 2000,
            unpaired_count: 200_000,
            heldout_count: 2000,
            base_test_count: 500,
            rare_test_count: 100,
            dev_count: 200,
            paired_domain_fraction: 0.4,
            paired_domain_weights: [0.25; 4],
            unpaired_domain_fraction: 0.6,
            unpaired_domain_weights: [0.4, 0.3, 0.2, 0.1],
            unpaired_rare_fraction: 0.7,
            rare_word_threshold: 5,
            rare_paired_max: 4,
            min_unpaired_rare: 50,
            frames_per_token: FramesPerToken { min: 2, max: 3 },
            noise_level: 0.3,
            homophone_blend: 0.97,
            homophone_partner: PartnerKind::Common,
            seed: 1,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.common_words < 2 || self.chain_fanout == 0 || self.chain_fanout > self.common_words {
            return bad(format!(
                "need >= 2 common words and 1 <= fanout <= common words ({} / {})",
                self.common_words, self.chain_fanout
            ));
        }
        if self.triggers_per_domain == 0 || self.entities_per_domain == 0 || self.rare_per_domain == 0 {
            return bad("every domain needs triggers, entities and rare words".into());
        }
        if self.proto_dim == 0
            || self.frames_per_token.min == 0
            || self.frames_per_token.min > self.frames_per_token.max
        {
            return bad("proto_dim and frames_per_token must be positive with min <= max".into());
        }
        if self.rare_paired_max == 0 || self.rare_paired_max >= self.rare_word_threshold {
            return bad(format!(
                "rare_paired_max {} must be in [1, rare_word_threshold {})",
                self.rare_paired_max, self.rare_word_threshold
            ));
        }
        for (name, p) in [
            ("paired_domain_fraction", self.paired_domain_fraction),
            ("unpaired_domain_fraction", self.unpaired_domain_fraction),
            ("unpaired_rare_fraction", self.unpaired_rare_fraction),
            ("homophone_blend", self.homophone_blend),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        for w in [&self.paired_domain_weights, &self.unpaired_domain_weights] {
            if w.iter().any(|x| !(*x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return bad(format!("domain weights {w:?} must be >= 0 with positive sum"));
            }
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return bad(format!("noise_level {} must be finite and >= 0", self.noise_level));
        }
        if self.paired_count == 0 || self.unpaired_count == 0 {
            return bad("paired and unpaired counts must be positive".into());
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.proto_dim + NUM_DOMAINS
    }

    pub fn vocab_size(&self) -> usize {
        self.common_words + 4 * (self.triggers_per_domain + self.entities_per_domain + self.rare_per_domain)
    }
}

/// What a rare word sounds like: an entity that shares its slot, or a
/// common word that never appears in slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartnerKind {
    Entity,
    Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum WordKind {
    Common,
    Trigger {
        domain: usize,
    },
    Entity {
        domain: usize,
    },
    /// `partner` is the word whose prototype this word's is blended from.
    Rare {
        domain: usize,
        partner: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub words: Vec<String>,
    pub kinds: Vec<WordKind>,
}

impl Vocabulary {
    pub fn build(spec: &CorpusSpec) -> Self {
        let mut words = Vec::new();
        let mut kinds = Vec::new();
        for i in 0..spec.common_words {
            words.push(format!("w{i:02}"));
            kinds.push(WordKind::Common);
        }
        for (d, name) in DOMAIN_NAMES.iter().enumerate() {
            let name = name.to_lowercase();
            for k in 0..spec.triggers_per_domain {
                words.push(format!("{name}.t{k}"));
                kinds.push(WordKind::Trigger { domain: d });
            }
            let first_entity = words.len();
            for k in 0..spec.entities_per_domain {
                words.push(format!("{name}.e{k}"));
                kinds.push(WordKind::Entity { domain: d });
            }
            for k in 0..spec.rare_per_domain {
                words.push(format!("{name}.r{k}"));
                let partner = match spec.homophone_partner {
                    PartnerKind::Entity => first_entity + k % spec.entities_per_domain,
                    PartnerKind::Common => (d * spec.rare_per_domain + k) % spec.common_words,
                };
                kinds.push(WordKind::Rare { domain: d, partner });
            }
        }
        Self { words, kinds }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    fn of_kind(&self, pred: impl Fn(&WordKind) -> bool) -> Vec<usize> {
        (0..self.len()).filter(|i| pred(&self.kinds[*i])).collect()
    }

    pub fn common(&self) -> Vec<usize> {
        self.of_kind(|k| matches!(k, WordKind::Common))
    }

    pub fn triggers(&self, domain: usize) -> Vec<usize> {
        self.of_kind(|k| matches!(k, WordKind::Trigger { domain: d } if *d == domain))
    }

    pub fn entities(&self, domain: usize) -> Vec<usize> {
        self.of_kind(|k| matches!(k, WordKind::Entity { domain: d } if *d == domain))
    }

    pub fn rare(&self, domain: usize) -> Vec<usize> {
        self.of_kind(|k| matches!(k, WordKind::Rare { domain: d, .. } if *d == domain))
    }

    pub fn is_rare(&self, id: usize) -> bool {
        matches!(self.kinds[id], WordKind::Rare { .. })
    }

    pub fn render(&self, tokens: &[usize]) -> String {
        tokens.iter().map(|t| self.word(*t)).collect::<Vec<_>>().join(" ")
    }

    pub fn parse(&self, line: &str) -> Result<TokenSequence> {
        line.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::Format(format!("unknown word {w:?}"))))
            .collect::<Result<Vec<_>>>()
            .map(TokenSequence)
    }
}

/// Sentence generator for the toy language.
#[derive(Debug, Clone)]
pub struct Grammar {
    vocab: Vocabulary,
    common: Vec<usize>,
    start: WeightedIndex<f64>,
    /// Per common word: successor positions in `common` and their weights.
    successors: Vec<(Vec<usize>, WeightedIndex<f64>)>,
}

impl Grammar {
    pub fn new(spec: &CorpusSpec, vocab: &Vocabulary, rng: &mut ChaCha8Rng) -> Self {
        let common = vocab.common();
        let weights = |rng: &mut ChaCha8Rng, n: usize| -> WeightedIndex<f64> {
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
            WeightedIndex::new(w).expect("positive weights")
        };
        let start = weights(rng, common.len());
        let successors = (0..common.len())
            .map(|_| {
                let mut pool: Vec<usize> = (0..common.len()).collect();
                pool.shuffle(rng);
                pool.truncate(spec.chain_fanout);
                let w = weights(rng, pool.len());
                (pool, w)
            })
            .collect();
        Self {
            vocab: vocab.clone(),
            common,
            start,
            successors,
        }
    }

    fn chain<R: Rng>(&self, rng: &mut R, len: usize, out: &mut Vec<usize>) {
        let mut cur = self.start.sample(rng);
        for i in 0..len {
            if i > 0 {
                let (pool, w) = &self.successors[cur];
                cur = pool[w.sample(rng)];
            }
            out.push(self.common[cur]);
        }
    }

    pub fn base_sentence<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::new();
        let len = rng.random_range(3..=6);
        self.chain(rng, len, &mut out);
        out
    }

    /// `[0-2 common] trigger slot [0-1 common]`
    pub fn domain_sentence<R: Rng>(&self, rng: &mut R, domain: usize, slot: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let prefix = rng.random_range(0..=2);
        self.chain(rng, prefix, &mut out);
        let triggers = self.vocab.triggers(domain);
        out.push(triggers[rng.random_range(0..triggers.len())]);
        out.push(slot);
        let suffix = rng.random_range(0..=1);
        self.chain(rng, suffix, &mut out);
        out
    }

    fn pick<R: Rng>(rng: &mut R, items: &[usize]) -> usize {
        items[rng.random_range(0..items.len())]
    }

    /// A sentence of the unpaired-text distribution.
    pub fn text_sentence<R: Rng>(&self, rng: &mut R, spec: &CorpusSpec, domains: &WeightedIndex<f64>) -> Vec<usize> {
        if rng.random::<f64>() >= spec.unpaired_domain_fraction {
            return self.base_sentence(rng);
        }
        let d = domains.sample(rng);
        let slot = if rng.random::<f64>() < spec.unpaired_rare_fraction {
            Self::pick(rng, &self.vocab.rare(d))
        } else {
            Self::pick(rng, &self.vocab.entities(d))
        };
        self.domain_sentence(rng, d, slot)
    }
}

/// Prototype-plus-noise feature synthesis.
#[derive(Debug, Clone)]
pub struct PseudoTts {
    prototypes: Vec<Vec<f64>>,
    frames: FramesPerToken,
    noise: f64,
}

impl PseudoTts {
    pub fn new(spec: &CorpusSpec, vocab: &Vocabulary) -> Self {
        let mut rng = stream(spec.seed, STREAM_PROTOTYPES, 0);
        let draw =
            |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..spec.proto_dim).map(|_| rng.sample(StandardNormal)).collect() };
        let mut prototypes: Vec<Vec<f64>> = (0..vocab.len()).map(|_| draw(&mut rng)).collect();
        let b = spec.homophone_blend;
        let rest = (1.0 - b * b).sqrt();
        for (i, kind) in vocab.kinds.iter().enumerate() {
            if let WordKind::Rare { partner, .. } = kind {
                let own = prototypes[i].clone();
                prototypes[i] = prototypes[*partner]
                    .iter()
                    .zip(own)
                    .map(|(p, z)| b * p + rest * z)
                    .collect();
            }
        }
        Self {
            prototypes,
            frames: spec.frames_per_token,
            noise: spec.noise_level,
        }
    }

    pub fn prototype(&self, token: usize) -> &[f64] {
        &self.prototypes[token]
    }

    pub fn synthesize<R: Rng>(&self, transcript: &[usize], domain_id: usize, rng: &mut R) -> Result<Tensor> {
        let v = self.prototypes.len();
        if let Some(t) = transcript.iter().find(|t| **t >= v) {
            return Err(Error::InvalidToken { token: *t, vocab: v });
        }
        if domain_id >= NUM_DOMAINS {
            return Err(Error::Config(format!("domain id {domain_id} >= {NUM_DOMAINS}")));
        }
        let noise = Normal::new(0.0, self.noise).map_err(|e| Error::Config(e.to_string()))?;
        let dim = self.prototypes.first().map_or(0, |p| p.len());
        let mut rows = 0;
        let mut data = Vec::new();
        for &tok in transcript {
            let k = rng.random_range(self.frames.min..=self.frames.max);
            for _ in 0..k {
                data.extend(self.prototypes[tok].iter().map(|p| p + noise.sample(rng)));
                data.extend((0..NUM_DOMAINS).map(|j| if j == domain_id { 1.0 } else { 0.0 }));
                rows += 1;
            }
        }
        if rows == 0 {
            // An empty transcript still gets one frame: silence plus the domain.
            data.extend((0..dim).map(|_| noise.sample(rng)));
            data.extend((0..NUM_DOMAINS).map(|j| if j == domain_id { 1.0 } else { 0.0 }));
            rows = 1;
        }
        Tensor::new(vec![rows, dim + NUM_DOMAINS], data)
    }
}

/// Features for `transcript` under `spec`'s prototypes, deterministic per
/// `(transcript, seed)`.
pub fn synthesize_features(
    transcript: &TokenSequence,
    spec: &CorpusSpec,
    domain_id: usize,
    seed: u64,
) -> Result<Tensor> {
    spec.validate()?;
    let tts = PseudoTts::new(spec, &Vocabulary::build(spec));
    tts.synthesize(transcript, domain_id, &mut ChaCha8Rng::seed_from_u64(seed))
}

const STREAM_PROTOTYPES: u64 = 1;
const STREAM_GRAMMAR: u64 = 2;
const STREAM_PAIRED: u64 = 3;
const STREAM_UNPAIRED: u64 = 4;
const STREAM_HELDOUT: u64 = 5;
const STREAM_BASE_TEST: u64 = 6;
const STREAM_RARE_TEST: u64 = 7;
const STREAM_DEV: u64 = 8;
const STREAM_FEATURES: u64 = 9;

fn stream(seed: u64, split: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split << 40 | index);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct RareTestSet {
    pub name: String,
    pub domain: usize,
    pub utterances: Vec<Utterance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitBundle {
    pub vocab: Vocabulary,
    pub paired_train: Vec<Utterance>,
    pub unpaired_text: Vec<TokenSequence>,
    /// Same distribution as `unpaired_text`; for ILM perplexity.
    pub heldout_text: Vec<TokenSequence>,
    pub base_test: Vec<Utterance>,
    pub rare_tests: Vec<RareTestSet>,
    /// Half base-test, half rare-domain utterances, for tuning fusion weights.
    pub dev: Vec<Utterance>,
}

impl SplitBundle {
    pub fn transcripts(&self) -> Vec<TokenSequence> {
        self.paired_train.iter().map(|u| u.transcript.clone()).collect()
    }

    /// Named test sets in report order: the base test, then the rare sets.
    pub fn test_sets(&self) -> Vec<(&str, &[Utterance])> {
        let mut out: Vec<(&str, &[Utterance])> = vec![("base", &self.base_test)];
        out.extend(
            self.rare_tests
                .iter()
                .map(|r| (r.name.as_str(), r.utterances.as_slice())),
        );
        out
    }
}

fn weighted(w: &[f64; 4]) -> WeightedIndex<f64> {
    WeightedIndex::new(w.iter().copied()).expect("validated weights")
}

/// Paired transcripts with rare words inserted into the slots of a few
/// domain sentences. Returns `(tokens, domain_id)` pairs.
fn paired_transcripts(spec: &CorpusSpec, vocab: &Vocabulary, grammar: &Grammar) -> Result<Vec<(Vec<usize>, usize)>> {
    let mut rng = stream(spec.seed, STREAM_PAIRED, 0);
    let domains = weighted(&spec.paired_domain_weights);
    let mut out = Vec::with_capacity(spec.paired_count);
    let mut slots: Vec<Vec<usize>> = vec![Vec::new(); 4];
    for i in 0..spec.paired_count {
        if rng.random::<f64>() < spec.paired_domain_fraction {
            let d = domains.sample(&mut rng);
            let ents = vocab.entities(d);
            let slot = ents[rng.random_range(0..ents.len())];
            let s = grammar.domain_sentence(&mut rng, d, slot);
            slots[d].push(i);
            out.push((s, domain_id(d)));
        } else {
            out.push((grammar.base_sentence(&mut rng), BASE_DOMAIN));
        }
    }
    for (d, idx) in slots.iter_mut().enumerate() {
        idx.shuffle(&mut rng);
        let mut next = idx.iter();
        for r in vocab.rare(d) {
            let n = rng.random_range(1..=spec.rare_paired_max);
            for _ in 0..n {
                let i = *next.next().ok_or_else(|| {
                    Error::Config(format!(
                        "too few {} sentences in paired data to place every rare word",
                        DOMAIN_NAMES[d]
                    ))
                })?;
                let s = &mut out[i].0;
                let pos = s
                    .iter()
                    .position(|t| matches!(vocab.kinds[*t], WordKind::Entity { .. }))
                    .expect("domain sentence has an entity slot");
                s[pos] = r;
            }
        }
    }
    Ok(out)
}

fn voice(tts: &PseudoTts, seed: u64, split: u64, items: Vec<(Vec<usize>, usize)>) -> Result<Vec<Utterance>> {
    items
        .into_iter()
        .enumerate()
        .map(|(i, (tokens, dom))| {
            let mut rng = stream(seed, STREAM_FEATURES, split << 24 | i as u64);
            Ok(Utterance {
                features: tts.synthesize(&tokens, dom, &mut rng)?,
                transcript: tokens.into(),
                domain_id: dom,
            })
        })
        .collect()
}

/// The full set of splits; deterministic in `spec.seed`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<SplitBundle> {
    spec.validate()?;
    let vocab = Vocabulary::build(spec);
    let grammar = Grammar::new(spec, &vocab, &mut stream(spec.seed, STREAM_GRAMMAR, 0));
    let tts = PseudoTts::new(spec, &vocab);

    let paired = paired_transcripts(spec, &vocab, &grammar)?;

    let text_domains = weighted(&spec.unpaired_domain_weights);
    let text = |split: u64, n: usize| -> Vec<TokenSequence> {
        let mut rng = stream(spec.seed, split, 0);
        (0..n)
            .map(|_| grammar.text_sentence(&mut rng, spec, &text_domains).into())
            .collect()
    };
    let unpaired_text = text(STREAM_UNPAIRED, spec.unpaired_count);
    let heldout_text = text(STREAM_HELDOUT, spec.heldout_count);

    let paired_domains = weighted(&spec.paired_domain_weights);
    // Matches the paired distribution with entity slots only.
    let ordinary = |rng: &mut ChaCha8Rng| -> (Vec<usize>, usize) {
        if rng.random::<f64>() < spec.paired_domain_fraction {
            let d = paired_domains.sample(rng);
            let ents = vocab.entities(d);
            let slot = ents[rng.random_range(0..ents.len())];
            (grammar.domain_sentence(rng, d, slot), domain_id(d))
        } else {
            (grammar.base_sentence(rng), BASE_DOMAIN)
        }
    };
    let rare_sentence = |rng: &mut ChaCha8Rng, d: usize| -> (Vec<usize>, usize) {
        let rare = vocab.rare(d);
        let slot = rare[rng.random_range(0..rare.len())];
        (grammar.domain_sentence(rng, d, slot), domain_id(d))
    };

    let mut rng = stream(spec.seed, STREAM_BASE_TEST, 0);
    let base_items = (0..spec.base_test_count).map(|_| ordinary(&mut rng)).collect();
    let mut rare_tests = Vec::with_capacity(4);
    for (d, name) in DOMAIN_NAMES.iter().enumerate() {
        let mut rng = stream(spec.seed, STREAM_RARE_TEST, d as u64);
        let items = (0..spec.rare_test_count).map(|_| rare_sentence(&mut rng, d)).collect();
        rare_tests.push(RareTestSet {
            name: name.to_string(),
            domain: d,
            utterances: voice(&tts, spec.seed, STREAM_RARE_TEST << 4 | d as u64, items)?,
        });
    }
    let mut rng = stream(spec.seed, STREAM_DEV, 0);
    let dev_items = (0..spec.dev_count)
        .map(|i| {
            if i % 2 == 0 {
                ordinary(&mut rng)
            } else {
                let d = rng.random_range(0..4);
                rare_sentence(&mut rng, d)
            }
        })
        .collect();

    Ok(SplitBundle {
        paired_train: voice(&tts, spec.seed, STREAM_PAIRED, paired)?,
        unpaired_text,
        heldout_text,
        base_test: voice(&tts, spec.seed, STREAM_BASE_TEST, base_items)?,
        rare_tests,
        dev: voice(&tts, spec.seed, STREAM_DEV, dev_items)?,
        vocab,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RareWordCount {
    pub word: String,
    pub domain: String,
    pub paired: usize,
    pub unpaired: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RareWordReport {
    pub rows: Vec<RareWordCount>,
    pub unpaired_to_paired_ratio: f64,
    /// Human-readable audit failures; empty when every audit passes.
    pub violations: Vec<String>,
}

impl RareWordReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("word\tdomain\tpaired\tunpaired\n");
        for r in &self.rows {
            s.push_str(&format!("{}\t{}\t{}\t{}\n", r.word, r.domain, r.paired, r.unpaired));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditThresholds {
    pub rare_word_threshold: usize,
    pub min_unpaired_rare: usize,
    pub min_ratio: f64,
}

impl From<&CorpusSpec> for AuditThresholds {
    fn from(spec: &CorpusSpec) -> Self {
        Self {
            rare_word_threshold: spec.rare_word_threshold,
            min_unpaired_rare: spec.min_unpaired_rare,
            min_ratio: 100.0,
        }
    }
}

/// Occurrence counts of every rare-test target word, plus the audits:
/// fewer than `rare_word_threshold` paired occurrences, at least
/// `min_unpaired_rare` unpaired ones, and an unpaired:paired ratio of at
/// least `min_ratio`.
pub fn rare_word_report(bundle: &SplitBundle, th: &AuditThresholds) -> RareWordReport {
    let vocab = &bundle.vocab;
    let mut paired = vec![0usize; vocab.len()];
    for u in &bundle.paired_train {
        for t in u.transcript.iter() {
            paired[*t] += 1;
        }
    }
    let mut unpaired = vec![0usize; vocab.len()];
    for y in &bundle.unpaired_text {
        for t in y.iter() {
            unpaired[*t] += 1;
        }
    }
    let mut targets = std::collections::BTreeSet::new();
    for set in &bundle.rare_tests {
        for u in &set.utterances {
            targets.extend(u.transcript.iter().copied().filter(|t| vocab.is_rare(*t)));
        }
    }
    let mut rows = Vec::new();
    let mut violations = Vec::new();
    for &t in &targets {
        let domain = match vocab.kinds[t] {
            WordKind::Rare { domain, .. } => DOMAIN_NAMES[domain].to_string(),
            _ => unreachable!("filtered to rare words"),
        };
        let row = RareWordCount {
            word: vocab.word(t).to_string(),
            domain,
            paired: paired[t],
            unpaired: unpaired[t],
        };
        if row.paired >= th.rare_word_threshold {
            violations.push(format!(
                "{} occurs {} times in paired data (limit < {})",
                row.word, row.paired, th.rare_word_threshold
            ));
        }
        if row.unpaired < th.min_unpaired_rare {
            violations.push(format!(
                "{} occurs {} times in unpaired text (need >= {})",
                row.word, row.unpaired, th.min_unpaired_rare
            ));
        }
        rows.push(row);
    }
    for (t, kind) in vocab.kinds.iter().enumerate() {
        if matches!(kind, WordKind::Rare { .. }) && paired[t] >= th.rare_word_threshold && !targets.contains(&t) {
            violations.push(format!("rare-list word {} is frequent in paired data", vocab.word(t)));
        }
    }
    let ratio = bundle.unpaired_text.len() as f64 / bundle.paired_train.len().max(1) as f64;
    if ratio < th.min_ratio {
        violations.push(format!("unpaired:paired ratio {ratio:.1} below {}", th.min_ratio));
    }
    RareWordReport {
        rows,
        unpaired_to_paired_ratio: ratio,
        violations,
    }
}

// On-disk layout: one `<split>.txt` per split (`domain_id<TAB>words` for
// paired splits, bare words for text) and `<split>.feats` containers with
// one `uNNNNNN` entry per utterance.

pub const VOCAB_FILE: &str = "vocab.json";

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for l in lines {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    BufReader::new(fs::File::open(path)?)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(Into::into)
}

fn save_utterances(dir: &Path, name: &str, vocab: &Vocabulary, utts: &[Utterance]) -> Result<Vec<PathBuf>> {
    let txt = dir.join(format!("{name}.txt"));
    write_lines(
        &txt,
        utts.iter()
            .map(|u| format!("{}\t{}", u.domain_id, vocab.render(&u.transcript))),
    )?;
    let mut c = Container::default();
    for (i, u) in utts.iter().enumerate() {
        c.push(format!("u{i:06}"), u.features.clone());
    }
    let feats = dir.join(format!("{name}.feats"));
    c.save(&feats)?;
    Ok(vec![txt, feats])
}

fn load_utterances(dir: &Path, name: &str, vocab: &Vocabulary) -> Result<Vec<Utterance>> {
    let lines = read_lines(&dir.join(format!("{name}.txt")))?;
    let c = Container::load(dir.join(format!("{name}.feats")))?;
    if c.entries.len() != lines.len() {
        return Err(Error::Format(format!(
            "{name}: {} transcripts but {} feature entries",
            lines.len(),
            c.entries.len()
        )));
    }
    lines
        .iter()
        .zip(c.entries)
        .map(|(line, (_, features))| {
            let (dom, words) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("{name}: malformed line {line:?}")))?;
            let domain_id = dom
                .parse()
                .map_err(|_| Error::Format(format!("{name}: bad domain id {dom:?}")))?;
            Ok(Utterance {
                features,
                transcript: vocab.parse(words)?,
                domain_id,
            })
        })
        .collect()
}

fn save_text(dir: &Path, name: &str, vocab: &Vocabulary, text: &[TokenSequence]) -> Result<PathBuf> {
    let p = dir.join(format!("{name}.txt"));
    write_lines(&p, text.iter().map(|y| vocab.render(y)))?;
    Ok(p)
}

fn load_text(dir: &Path, name: &str, vocab: &Vocabulary) -> Result<Vec<TokenSequence>> {
    read_lines(&dir.join(format!("{name}.txt")))?
        .iter()
        .map(|l| vocab.parse(l))
        .collect()
}

fn rare_split_name(name: &str) -> String {
    format!("rare_{}", name.to_lowercase())
}

impl SplitBundle {
    /// Writes every split under `dir`; returns the files written.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        let vp = dir.join(VOCAB_FILE);
        fs::write(
            &vp,
            serde_json::to_string_pretty(&self.vocab).map_err(|e| Error::Format(e.to_string()))?,
        )?;
        files.push(vp);
        files.extend(save_utterances(dir, "paired_train", &self.vocab, &self.paired_train)?);
        files.push(save_text(dir, "unpaired_text", &self.vocab, &self.unpaired_text)?);
        files.push(save_text(dir, "heldout_text", &self.vocab, &self.heldout_text)?);
        files.extend(save_utterances(dir, "base_test", &self.vocab, &self.base_test)?);
        for r in &self.rare_tests {
            files.extend(save_utterances(
                dir,
                &rare_split_name(&r.name),
                &self.vocab,
                &r.utterances,
            )?);
        }
        files.extend(save_utterances(dir, "dev", &self.vocab, &self.dev)?);
        Ok(files)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let vocab: Vocabulary = serde_json::from_str(&fs::read_to_string(dir.join(VOCAB_FILE))?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let mut rare_tests = Vec::with_capacity(4);
        for (d, name) in DOMAIN_NAMES.iter().enumerate() {
            rare_tests.push(RareTestSet {
                name: name.to_string(),
                domain: d,
                utterances: load_utterances(dir, &rare_split_name(name), &vocab)?,
            });
        }
        Ok(Self {
            paired_train: load_utterances(dir, "paired_train", &vocab)?,
            unpaired_text: load_text(dir, "unpaired_text", &vocab)?,
            heldout_text: load_text(dir, "heldout_text", &vocab)?,
            base_test: load_utterances(dir, "base_test", &vocab)?,
            rare_tests,
            dev: load_utterances(dir, "dev", &vocab)?,
            vocab,
        })
    }
}

/// Token counts per word over a text collection.
pub fn word_counts<'a>(texts: impl IntoIterator<Item = &'a [usize]>) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for y in texts {
        for t in y {
            *m.entry(*t).or_insert(0) += 1;
        }
    }
    m
}
