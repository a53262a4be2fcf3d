//! Inference: frame-synchronous transducer beam search with shallow and
//! ILM-subtracted fusion, a small recurrent external LM, and WER scoring.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::error::{shape_err, Error, Result};
use crate::models::{ModelParams, PrefixState, TokenSequence};
use crate::numerics::{
    log_add, recurrent_step, Adam, AdamConfig, Container, Gradients, LstmCell, LstmState, ParamId, ParamSet, Tape,
    Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub lambda_lm: f64,
    pub lambda_ilm: f64,
    pub beam_width: usize,
    pub max_symbols_per_frame: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            lambda_lm: 0.3,
            lambda_ilm: 0.1,
            beam_width: 4,
            max_symbols_per_frame: 4,
        }
    }
}

impl FusionConfig {
    /// Pure E2E decoding.
    pub fn no_fusion(beam_width: usize) -> Self {
        Self {
            lambda_lm: 0.0,
            lambda_ilm: 0.0,
            beam_width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_lm >= 0.0 && self.lambda_ilm >= 0.0)
            || !self.lambda_lm.is_finite()
            || !self.lambda_ilm.is_finite()
        {
            return Err(Error::Config(format!(
                "fusion weights must be finite and >= 0 (lm {}, ilm {})",
                self.lambda_lm, self.lambda_ilm
            )));
        }
        if self.lambda_ilm > 0.0 && self.lambda_lm == 0.0 {
            return Err(Error::Config("lambda_ilm > 0 requires lambda_lm > 0".into()));
        }
        if self.beam_width == 0 || self.max_symbols_per_frame == 0 {
            return Err(Error::Config(
                "beam_width and max_symbols_per_frame must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn fuse(&self, e2e: f64, lm: f64, ilm: f64) -> f64 {
        e2e + self.lambda_lm * lm - self.lambda_ilm * ilm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: TokenSequence,
    /// Log of the summed probability of every alignment explored for this
    /// prefix.
    pub e2e_logscore: f64,
    pub lm_logscore: f64,
    pub ilm_logscore: f64,
    pub fused_score: f64,
}

#[derive(Debug, Clone, Copy)]
struct Scores {
    e2e: f64,
    lm: f64,
    ilm: f64,
}

/// Beam entries keyed by prefix.
type Beam = BTreeMap<Vec<usize>, Scores>;

fn ranked(beam: &Beam, cfg: &FusionConfig) -> Vec<(Vec<usize>, Scores, f64)> {
    let mut v: Vec<_> = beam
        .iter()
        .map(|(p, s)| (p.clone(), *s, cfg.fuse(s.e2e, s.lm, s.ilm)))
        .collect();
    v.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| a.0.cmp(&b.0)));
    v
}

fn prune(beam: Beam, cfg: &FusionConfig) -> Beam {
    if beam.len() <= cfg.beam_width {
        return beam;
    }
    ranked(&beam, cfg)
        .into_iter()
        .take(cfg.beam_width)
        .map(|(p, s, _)| (p, s))
        .collect()
}

fn merge(into: &mut Beam, prefix: Vec<usize>, s: Scores) {
    into.entry(prefix)
        .and_modify(|e| e.e2e = log_add(e.e2e, s.e2e))
        .or_insert(s);
}

struct Caches<'a> {
    mp: &'a ModelParams,
    lm: Option<&'a ExternalLm>,
    states: HashMap<Vec<usize>, PrefixState>,
    lm_states: HashMap<Vec<usize>, LmState>,
}

impl<'a> Caches<'a> {
    fn state(&mut self, prefix: &[usize]) -> Result<&PrefixState> {
        if !self.states.contains_key(prefix) {
            let s = match prefix.split_last() {
                None => self.mp.initial_state()?,
                Some((_, head)) => {
                    let parent = self.state(head)?.clone();
                    self.mp.advance_state(&parent, prefix)?
                }
            };
            self.states.insert(prefix.to_vec(), s);
        }
        Ok(&self.states[prefix])
    }

    fn lm_next(&mut self, prefix: &[usize]) -> Result<Option<&[f64]>> {
        let Some(lm) = self.lm else { return Ok(None) };
        if !self.lm_states.contains_key(prefix) {
            let s = match prefix.split_last() {
                None => lm.initial_state()?,
                Some((last, head)) => {
                    self.lm_next(head)?;
                    let parent = self.lm_states[head].clone();
                    lm.advance(&parent, *last)?
                }
            };
            self.lm_states.insert(prefix.to_vec(), s);
        }
        Ok(Some(&self.lm_states[prefix].logprobs))
    }
}

/// Frame-synchronous beam search with prefix merging.
///
/// At each frame, up to `max_symbols_per_frame` rounds of label expansion
/// run from the frame's beam: each round extends only the probability mass
/// added in the previous round, prunes it to `beam_width` and merges it
/// (log-add) into the frame's hypothesis set. Every hypothesis then takes
/// the frame's blank and the result is pruned to `beam_width`. LM and ILM
/// scores enter on label expansions only. Ranking uses the fused score with
/// ties broken by lexicographic token order. `beam_width = usize::MAX`
/// disables pruning.
pub fn beam_search(
    mp: &ModelParams,
    features: &Tensor,
    cfg: &FusionConfig,
    ext_lm: Option<&ExternalLm>,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    if cfg.lambda_lm > 0.0 && ext_lm.is_none() {
        return Err(Error::Config("lambda_lm > 0 needs an external LM".into()));
    }
    if let Some(lm) = ext_lm {
        if lm.config.vocab_size != mp.config.vocab_size {
            return Err(Error::Config("external LM vocabulary differs from the model's".into()));
        }
    }
    let enc = crate::models::encode(features, mp)?;
    let v = mp.config.vocab_size;
    let mut caches = Caches {
        mp,
        lm: ext_lm,
        states: HashMap::new(),
        lm_states: HashMap::new(),
    };
    let mut hyps: Beam = BTreeMap::new();
    hyps.insert(
        Vec::new(),
        Scores {
            e2e: 0.0,
            lm: 0.0,
            ilm: 0.0,
        },
    );

    for t in 0..enc.rows() {
        let f = enc.row(t);
        let mut emissions: HashMap<Vec<usize>, crate::models::Emission> = HashMap::new();
        let mut frame = hyps.clone();
        let mut frontier = hyps;
        for _ in 0..cfg.max_symbols_per_frame {
            let mut next: Beam = BTreeMap::new();
            for (p, s) in &frontier {
                if !emissions.contains_key(p) {
                    let st = caches.state(p)?;
                    let e = mp.emission(f, st)?;
                    emissions.insert(p.clone(), e);
                }
                let ilm = caches.state(p)?.ilm.clone();
                let lm = caches.lm_next(p)?.map(|x| x.to_vec());
                let e = &emissions[p];
                for y in 0..v {
                    let mut q = p.clone();
                    q.push(y);
                    let cand = Scores {
                        e2e: s.e2e + e.label_logprobs[y],
                        lm: s.lm + lm.as_ref().map_or(0.0, |l| l[y]),
                        ilm: s.ilm + ilm[y],
                    };
                    merge(&mut next, q, cand);
                }
            }
            if next.is_empty() {
                break;
            }
            frontier = prune(next, cfg);
            for (p, s) in &frontier {
                merge(&mut frame, p.clone(), *s);
            }
        }
        let mut after: Beam = BTreeMap::new();
        for (p, s) in frame {
            if !emissions.contains_key(&p) {
                let st = caches.state(&p)?;
                let e = mp.emission(f, st)?;
                emissions.insert(p.clone(), e);
            }
            let b = emissions[&p].blank_logprob;
            after.insert(p, Scores { e2e: s.e2e + b, ..s });
        }
        hyps = prune(after, cfg);
    }

    Ok(ranked(&hyps, cfg)
        .into_iter()
        .map(|(p, s, fused)| Hypothesis {
            tokens: p.into(),
            e2e_logscore: s.e2e,
            lm_logscore: s.lm,
            ilm_logscore: s.ilm,
            fused_score: fused,
        })
        .collect())
}

/// Best hypothesis tokens for each utterance.
pub fn decode_set(
    mp: &ModelParams,
    utts: &[Utterance],
    cfg: &FusionConfig,
    ext_lm: Option<&ExternalLm>,
) -> Result<Vec<TokenSequence>> {
    utts.iter()
        .map(|u| {
            let nbest = beam_search(mp, &u.features, cfg, ext_lm)?;
            Ok(nbest.into_iter().next().map(|h| h.tokens).unwrap_or_default())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
}

impl WerBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// `(S + D + I) / N`; 0 for an empty pool.
    pub fn rate(&self) -> f64 {
        if self.ref_words == 0 {
            0.0
        } else {
            self.errors() as f64 / self.ref_words as f64
        }
    }

    pub fn add(&mut self, other: &WerBreakdown) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.ref_words += other.ref_words;
    }
}

/// Levenshtein word alignment between `reference` and `hyp`.
pub fn wer(reference: &[usize], hyp: &[usize]) -> Result<WerBreakdown> {
    if reference.is_empty() {
        return Err(Error::Config("WER needs a non-empty reference".into()));
    }
    let (n, m) = (reference.len(), hyp.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, c) in d[0].iter_mut().enumerate() {
        *c = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut out = WerBreakdown {
        ref_words: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1]) {
            if reference[i - 1] != hyp[j - 1] {
                out.substitutions += 1;
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            out.deletions += 1;
            i -= 1;
        } else {
            out.insertions += 1;
            j -= 1;
        }
    }
    Ok(out)
}

/// Pooled WER of `hyps` against the utterances' transcripts.
pub fn pooled_wer(utts: &[Utterance], hyps: &[TokenSequence]) -> Result<WerBreakdown> {
    if utts.len() != hyps.len() {
        return Err(shape_err(
            "pooled_wer",
            format!("{} refs vs {} hyps", utts.len(), hyps.len()),
        ));
    }
    let mut total = WerBreakdown::default();
    for (u, h) in utts.iter().zip(hyps) {
        total.add(&wer(&u.transcript, h)?);
    }
    Ok(total)
}

pub fn evaluate_wer(
    mp: &ModelParams,
    utts: &[Utterance],
    cfg: &FusionConfig,
    ext_lm: Option<&ExternalLm>,
) -> Result<WerBreakdown> {
    pooled_wer(utts, &decode_set(mp, utts, cfg, ext_lm)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl LmConfig {
    pub fn small(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 16,
            hidden: 32,
            layers: 2,
        }
    }
}

/// Autoregressive recurrent LM over the label vocabulary; row `vocab_size`
/// of the embedding is the start token.
#[derive(Debug, Clone)]
pub struct ExternalLm {
    pub config: LmConfig,
    pub params: ParamSet,
    embed: ParamId,
    cells: Vec<LstmCell>,
    out_w: ParamId,
    out_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmState {
    h: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    /// Next-token log-distribution.
    pub logprobs: Vec<f64>,
}

impl ExternalLm {
    pub fn init(config: LmConfig, seed: u64) -> Result<Self> {
        if config.vocab_size < 2 || config.embed_dim == 0 || config.hidden == 0 || config.layers == 0 {
            return Err(Error::Config(format!("invalid LM config {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let embed = ps.insert_uniform("lm.embed", vec![config.vocab_size + 1, config.embed_dim], &mut rng)?;
        let mut cells = Vec::with_capacity(config.layers);
        for k in 0..config.layers {
            let input = if k == 0 { config.embed_dim } else { config.hidden };
            cells.push(LstmCell::register(
                &mut ps,
                &format!("lm.lstm{k}"),
                input,
                config.hidden,
                &mut rng,
            )?);
        }
        let out_w = ps.insert_uniform("lm.out.W", vec![config.vocab_size, config.hidden], &mut rng)?;
        let out_b = ps.insert("lm.out.b", Tensor::zeros(vec![config.vocab_size]))?;
        Ok(Self {
            config,
            params: ps,
            embed,
            cells,
            out_w,
            out_b,
        })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::from_params(&self.params);
        c.meta.insert(
            "lm_config".into(),
            serde_json::to_string(&self.config).expect("serializes"),
        );
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let cfg = c
            .meta
            .get("lm_config")
            .ok_or_else(|| Error::Format("container has no lm_config".into()))?;
        let config: LmConfig = serde_json::from_str(cfg).map_err(|e| Error::Format(e.to_string()))?;
        let mut lm = Self::init(config, 0)?;
        c.load_into(&mut lm.params)?;
        Ok(lm)
    }

    fn check(&self, token: usize) -> Result<()> {
        if token >= self.config.vocab_size {
            Err(Error::InvalidToken {
                token,
                vocab: self.config.vocab_size,
            })
        } else {
            Ok(())
        }
    }

    fn step(
        &self,
        tape: &mut Tape<'_>,
        states: &[LstmState],
        row: usize,
    ) -> Result<(Vec<LstmState>, crate::numerics::Var)> {
        let mut x = tape.embed(self.embed, row)?;
        let mut next = Vec::with_capacity(states.len());
        for (cell, st) in self.cells.iter().zip(states) {
            let (s, h) = recurrent_step(tape, cell, *st, x)?;
            next.push(s);
            x = h;
        }
        let logits = tape.affine(self.out_w, x, Some(self.out_b))?;
        Ok((next, tape.log_softmax(logits)?))
    }

    fn run_from(&self, h: &[Vec<f64>], c: &[Vec<f64>], row: usize) -> Result<LmState> {
        let mut tape = Tape::new(&self.params);
        let states: Vec<LstmState> = h
            .iter()
            .zip(c)
            .map(|(h, c)| LstmState {
                h: tape.constant(h.clone()),
                c: tape.constant(c.clone()),
            })
            .collect();
        let (next, lp) = self.step(&mut tape, &states, row)?;
        Ok(LmState {
            h: next.iter().map(|s| tape.value(s.h).to_vec()).collect(),
            c: next.iter().map(|s| tape.value(s.c).to_vec()).collect(),
            logprobs: tape.value(lp).to_vec(),
        })
    }

    pub fn initial_state(&self) -> Result<LmState> {
        let zeros = vec![vec![0.0; self.config.hidden]; self.config.layers];
        self.run_from(&zeros, &zeros, self.config.vocab_size)
    }

    pub fn advance(&self, state: &LmState, token: usize) -> Result<LmState> {
        self.check(token)?;
        self.run_from(&state.h, &state.c, token)
    }

    pub fn state_for(&self, prefix: &[usize]) -> Result<LmState> {
        let mut s = self.initial_state()?;
        for &t in prefix {
            s = self.advance(&s, t)?;
        }
        Ok(s)
    }

    /// `-sum_u log P(y_u | y_<u)` with its gradient added into `grads`.
    fn nll_and_grad(&self, y: &[usize], grads: &mut Gradients) -> Result<f64> {
        let mut tape = Tape::new(&self.params);
        let mut states: Vec<LstmState> = self
            .cells
            .iter()
            .map(|c| LstmState::zeros(&mut tape, c.hidden))
            .collect();
        let mut row = self.config.vocab_size;
        let mut picks = Vec::with_capacity(y.len());
        for &tok in y {
            self.check(tok)?;
            let (next, lp) = self.step(&mut tape, &states, row)?;
            picks.push((tape.pick(lp, tok)?, -1.0));
            states = next;
            row = tok;
        }
        if picks.is_empty() {
            return Ok(0.0);
        }
        let nll = tape.combine(&picks);
        tape.backward_into(nll, 1.0, grads);
        Ok(tape.scalar(nll))
    }
}

/// Normalised `log P(next | prefix)`.
pub fn lm_logprob(lm: &ExternalLm, prefix: &[usize], next: usize) -> Result<f64> {
    lm.check(next)?;
    Ok(lm.state_for(prefix)?.logprobs[next])
}

/// `sum_u log P(y_u | y_<u)`.
pub fn lm_sequence_logprob(lm: &ExternalLm, y: &[usize]) -> Result<f64> {
    let mut s = lm.initial_state()?;
    let mut total = 0.0;
    for &t in y {
        lm.check(t)?;
        total += s.logprobs[t];
        s = lm.advance(&s, t)?;
    }
    Ok(total)
}

pub fn lm_perplexity(lm: &ExternalLm, texts: &[TokenSequence]) -> Result<f64> {
    let mut nll = 0.0;
    let mut n = 0usize;
    for y in texts {
        nll -= lm_sequence_logprob(lm, y)?;
        n += y.len();
    }
    Ok((nll / n.max(1) as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct LmTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Share of each batch drawn from paired transcripts.
    pub transcript_fraction: f64,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 32,
            transcript_fraction: 0.5,
            optimizer: AdamConfig {
                learning_rate: 5e-3,
                ..AdamConfig::default()
            },
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LmTrainLog {
    /// Per-step mean token NLL.
    pub losses: Vec<f64>,
    pub transcripts_drawn: usize,
    pub unpaired_drawn: usize,
}

impl LmTrainLog {
    pub fn transcript_share(&self) -> f64 {
        self.transcripts_drawn as f64 / (self.transcripts_drawn + self.unpaired_drawn).max(1) as f64
    }
}

/// Cycles through `items` in per-epoch reshuffled order.
struct Cycler<'a, T> {
    items: &'a [T],
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl<'a, T> Cycler<'a, T> {
    fn new(items: &'a [T], seed: u64) -> Self {
        let mut c = Self {
            items,
            order: (0..items.len()).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        c.order.shuffle(&mut c.rng);
        c
    }

    fn next(&mut self) -> &'a T {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let i = self.order[self.pos];
        self.pos += 1;
        &self.items[i]
    }
}

/// Trains an external LM on a fixed-ratio mixture of paired transcripts and
/// unpaired text: each batch holds `round(batch_size * transcript_fraction)`
/// transcripts and the rest unpaired sentences.
pub fn train_external_lm(
    transcripts: &[TokenSequence],
    unpaired: &[TokenSequence],
    config: LmConfig,
    train: &LmTrainConfig,
) -> Result<(ExternalLm, LmTrainLog)> {
    train.optimizer.validate()?;
    if !(0.0..=1.0).contains(&train.transcript_fraction) || train.batch_size == 0 {
        return Err(Error::Config("invalid LM batch settings".into()));
    }
    let n_t = (train.batch_size as f64 * train.transcript_fraction).round() as usize;
    let n_u = train.batch_size - n_t;
    if (n_t > 0 && transcripts.is_empty()) || (n_u > 0 && unpaired.is_empty()) {
        return Err(Error::Config("LM training mixture has an empty source".into()));
    }
    let mut lm = ExternalLm::init(config, train.seed)?;
    let mut opt = Adam::new(train.optimizer, &lm.params);
    let mut tc = Cycler::new(transcripts, train.seed ^ 0x5eed_0001);
    let mut uc = Cycler::new(unpaired, train.seed ^ 0x5eed_0002);
    let mut log = LmTrainLog::default();
    for _ in 0..train.steps {
        let mut grads = Gradients::zeros_like(&lm.params);
        let mut nll = 0.0;
        let mut tokens = 0usize;
        for _ in 0..n_t {
            let y = tc.next();
            nll += lm.nll_and_grad(y, &mut grads)?;
            tokens += y.len();
        }
        for _ in 0..n_u {
            let y = uc.next();
            nll += lm.nll_and_grad(y, &mut grads)?;
            tokens += y.len();
        }
        log.transcripts_drawn += n_t;
        log.unpaired_drawn += n_u;
        grads.scale(1.0 / tokens.max(1) as f64);
        opt.apply(&mut lm.params, &mut grads)?;
        log.losses.push(nll / tokens.max(1) as f64);
    }
    Ok((lm, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{forward_backward, Alignment, LatticeGrid};
    use crate::models::{ModelConfig, Variant};
    use crate::numerics::log_sum_exp;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_features(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Tensor {
        Tensor::new(vec![t, d], (0..t * d).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    /// Exhaustive oracle: the exact score of a label sequence is the sum
    /// over alignments in which no frame emits more than `max_sym` labels.
    fn exact_score(mp: &ModelParams, x: &Tensor, y: &[usize], max_sym: usize) -> f64 {
        let grid = crate::lattice::fill_grid(mp, x, y).unwrap();
        let paths: Vec<f64> = Alignment::enumerate(grid.frames(), grid.labels())
            .into_iter()
            .filter(|a| {
                let mut run = 0;
                a.0.iter().all(|m| match m {
                    crate::lattice::Move::Label => {
                        run += 1;
                        run <= max_sym
                    }
                    crate::lattice::Move::Blank => {
                        run = 0;
                        true
                    }
                })
            })
            .map(|a| a.log_prob(&grid))
            .collect();
        log_sum_exp(&paths)
    }

    fn sequences(v: usize, max_len: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for p in &frontier {
                for y in 0..v {
                    let mut q: Vec<usize> = p.clone();
                    q.push(y);
                    next.push(q);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    #[test]
    fn unbounded_beam_matches_exhaustive_search() {
        for variant in [Variant::Hat, Variant::Mhat] {
            for seed in 0..4 {
                let mp = ModelParams::init(&ModelConfig::tiny(variant, 3, 2), seed).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
                let x = random_features(&mut rng, 2, 2);
                let max_sym = 2;
                let cfg = FusionConfig {
                    beam_width: usize::MAX,
                    max_symbols_per_frame: max_sym,
                    ..FusionConfig::no_fusion(1)
                };
                let nbest = beam_search(&mp, &x, &cfg, None).unwrap();
                // Sequences reachable under the per-frame cap: length <= T * max_sym.
                let all = sequences(3, 2 * max_sym);
                assert_eq!(nbest.len(), all.len());
                let mut oracle: Vec<(f64, Vec<usize>)> = all
                    .iter()
                    .map(|y| (exact_score(&mp, &x, y, max_sym), y.clone()))
                    .collect();
                oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
                for (h, (score, y)) in nbest.iter().zip(&oracle) {
                    assert_eq!(&h.tokens.0, y);
                    assert!((h.e2e_logscore - score).abs() < 1e-10);
                }
                // Unrestricted lattice mass is an upper bound.
                let y = &oracle[0].1;
                let full = forward_backward(&crate::lattice::fill_grid(&mp, &x, y).unwrap()).loglik;
                assert!(oracle[0].0 <= full + 1e-12);
            }
        }
    }

    #[test]
    fn fusion_off_reproduces_pure_e2e() {
        let mp = ModelParams::init(&ModelConfig::tiny(Variant::Mhat, 4, 3), 3).unwrap();
        let lm = ExternalLm::init(LmConfig::small(4), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_features(&mut rng, 4, 3);
        let a = beam_search(&mp, &x, &FusionConfig::no_fusion(3), None).unwrap();
        let b = beam_search(&mp, &x, &FusionConfig::no_fusion(3), Some(&lm)).unwrap();
        let order = |h: &[Hypothesis]| h.iter().map(|h| (h.tokens.clone(), h.e2e_logscore)).collect::<Vec<_>>();
        assert_eq!(order(&a), order(&b));
        assert!(a.iter().all(|h| h.fused_score == h.e2e_logscore));
    }

    #[test]
    fn score_decomposition() {
        let mp = ModelParams::init(&ModelConfig::tiny(Variant::Hat, 4, 3), 4).unwrap();
        let lm = ExternalLm::init(LmConfig::small(4), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_features(&mut rng, 4, 3);
        let cfg = FusionConfig {
            lambda_lm: 0.4,
            lambda_ilm: 0.2,
            beam_width: 3,
            max_symbols_per_frame: 2,
        };
        for h in beam_search(&mp, &x, &cfg, Some(&lm)).unwrap() {
            let fused = h.e2e_logscore + 0.4 * h.lm_logscore - 0.2 * h.ilm_logscore;
            assert!((fused - h.fused_score).abs() < 1e-12);
            // component scores are the prefix sums of the two LMs
            let lm_ref = lm_sequence_logprob(&lm, &h.tokens).unwrap();
            assert!((lm_ref - h.lm_logscore).abs() < 1e-10);
            let mut ilm_ref = 0.0;
            for u in 0..h.tokens.len() {
                ilm_ref += crate::models::ilm_logprobs(&h.tokens[..u], &mp).unwrap().data()[h.tokens[u]];
            }
            assert!((ilm_ref - h.ilm_logscore).abs() < 1e-10);
        }
    }

    #[test]
    fn forced_grid_emits_argmax() {
        // Zero weights everywhere except the HAT joint, set so frame 0
        // emits label 2 with near certainty and then blanks.
        let mut mp = ModelParams::init(&ModelConfig::tiny(Variant::Hat, 4, 3), 0).unwrap();
        let x = Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        for p in mp.params.iter_mut() {
            p.tensor.data_mut().fill(0.0);
        }
        let set = |mp: &mut ModelParams, name: &str, f: &dyn Fn(&mut [f64])| {
            let id = mp.params.id(name).unwrap();
            f(mp.params.get_mut(id).tensor.data_mut());
        };
        // encoder layer 0 passes feature 0 to unit 0; layer 1 passes unit 0.
        set(&mut mp, "encoder.layer0.current", &|d| d[0] = 3.0);
        set(&mut mp, "encoder.layer1.current", &|d| d[0] = 3.0);
        set(&mut mp, "joint.W1", &|d| d[0] = 3.0);
        set(&mut mp, "joint.W", &|d| d[2 * 4] = 40.0);
        let nbest = beam_search(&mp, &x, &FusionConfig::no_fusion(4), None).unwrap();
        // blank prob is sigmoid(0) = 0.5 at every cell; label 2 dominates the softmax
        assert_eq!(nbest[0].tokens.0, Vec::<usize>::new());
        assert_eq!(nbest[1].tokens.0, vec![2]);
        // label 2 carries all the label mass but costs an extra blank-free step
        assert!(nbest[1].e2e_logscore < nbest[0].e2e_logscore);
    }

    #[test]
    fn fusion_validation() {
        assert!(FusionConfig {
            lambda_lm: 0.0,
            lambda_ilm: 0.1,
            ..FusionConfig::default()
        }
        .validate()
        .is_err());
        assert!(FusionConfig {
            beam_width: 0,
            ..FusionConfig::default()
        }
        .validate()
        .is_err());
        let mp = ModelParams::init(&ModelConfig::tiny(Variant::Hat, 4, 3), 0).unwrap();
        assert!(beam_search(&mp, &Tensor::zeros(vec![2, 3]), &FusionConfig::default(), None).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]
        #[test]
        fn wider_beam_never_worse(seed in 0u64..1000, hat: bool) {
            let variant = if hat { Variant::Hat } else { Variant::Mhat };
            let mp = ModelParams::init(&ModelConfig::tiny(variant, 4, 3), seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_features(&mut rng, 4, 3);
            let mut prev = f64::NEG_INFINITY;
            for beam in [1, 2, 4, 8] {
                let best = beam_search(&mp, &x, &FusionConfig::no_fusion(beam), None).unwrap()[0].fused_score;
                prop_assert!(best >= prev - 1e-12, "beam {} best {} < {}", beam, best, prev);
                prev = best;
            }
        }
    }

    /// Second, independent edit distance: memoised recursion.
    fn edit_distance(a: &[usize], b: &[usize]) -> usize {
        fn go(a: &[usize], b: &[usize], memo: &mut HashMap<(usize, usize), usize>) -> usize {
            if a.is_empty() {
                return b.len();
            }
            if b.is_empty() {
                return a.len();
            }
            if let Some(v) = memo.get(&(a.len(), b.len())) {
                return *v;
            }
            let cost = usize::from(a[0] != b[0]);
            let v = (go(&a[1..], &b[1..], memo) + cost)
                .min(go(&a[1..], b, memo) + 1)
                .min(go(a, &b[1..], memo) + 1);
            memo.insert((a.len(), b.len()), v);
            v
        }
        go(a, b, &mut HashMap::new())
    }

    #[test]
    fn wer_examples_and_oracle() {
        assert_eq!(wer(&[1, 2, 3], &[1, 2, 3]).unwrap().rate(), 0.0);
        let w = wer(&[1, 2, 3, 4], &[1, 9, 3, 4]).unwrap();
        assert_eq!((w.rate(), w.substitutions), (0.25, 1));
        let w = wer(&[1, 2, 3], &[1, 3, 3, 5]).unwrap();
        assert_eq!(w.errors(), 2);
        assert!(wer(&[], &[1]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..2000 {
            let n = rng.random_range(1..8);
            let m = rng.random_range(0..8);
            let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let b: Vec<usize> = (0..m).map(|_| rng.random_range(0..4)).collect();
            let w = wer(&a, &b).unwrap();
            assert_eq!(w.errors(), edit_distance(&a, &b), "{a:?} {b:?}");
            // every alignment step is accounted for
            assert_eq!(n - w.deletions + w.insertions, m);
        }
    }

    #[test]
    fn lm_normalised_and_telescoping() {
        let lm = ExternalLm::init(LmConfig::small(6), 3).unwrap();
        let prefix = [1, 4, 2];
        let total: f64 = (0..6).map(|y| lm_logprob(&lm, &prefix, y).unwrap().exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(
            lm_logprob(&lm, &prefix, 3).unwrap(),
            lm_logprob(&lm, &prefix, 3).unwrap()
        );
        let y = [3, 0, 5, 5];
        let steps: f64 = (0..y.len()).map(|u| lm_logprob(&lm, &y[..u], y[u]).unwrap()).sum();
        assert!((steps - lm_sequence_logprob(&lm, &y).unwrap()).abs() < 1e-12);
        assert!(lm_logprob(&lm, &prefix, 6).is_err());
    }

    #[test]
    fn lm_training_behaviour() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // Deterministic cycle text is compressible; uniform text is not.
        let cyc: Vec<TokenSequence> = (0..50)
            .map(|i| (0..6).map(|k| (i + k) % 5).collect::<Vec<_>>().into())
            .collect();
        let uniform: Vec<TokenSequence> = (0..400)
            .map(|_| (0..8).map(|_| rng.random_range(0..5)).collect::<Vec<_>>().into())
            .collect();
        let cfg = LmTrainConfig {
            steps: 150,
            batch_size: 16,
            ..LmTrainConfig::default()
        };
        let (lm, log) = train_external_lm(&cyc, &cyc, LmConfig::small(5), &cfg).unwrap();
        let head: f64 = log.losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = log.losses[log.losses.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail < head);
        assert!(lm_perplexity(&lm, &cyc).unwrap() < 2.5);
        assert!((log.transcript_share() - 0.5).abs() <= 0.02);

        let (lm, _) = train_external_lm(&uniform, &uniform, LmConfig::small(5), &cfg).unwrap();
        let ppl = lm_perplexity(&lm, &uniform).unwrap();
        assert!((ppl - 5.0).abs() < 0.5, "{ppl}");
    }

    #[test]
    fn lm_container_round_trip() {
        let lm = ExternalLm::init(LmConfig::small(5), 4).unwrap();
        let back = ExternalLm::from_container(&Container::from_bytes(&lm.to_container().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.params, lm.params);
        let _ = LatticeGrid::new(1, 0, vec![0.0], vec![0.0]).unwrap();
    }
}
