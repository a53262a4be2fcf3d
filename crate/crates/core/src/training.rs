//! Optimisation loop: mixed paired/unpaired batches, Adam updates on the
//! composite objective, ILMA adaptation against a frozen snapshot,
//! periodic evaluation, checkpoints and a line-delimited metrics log.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{SplitBundle, Utterance};
use crate::decoding::{evaluate_wer, FusionConfig, WerBreakdown};
use crate::error::{Error, Result};
use crate::losses::{composite_objective, LossComponents, Mode, ObjectiveSpec, UpsampleMaskConfig};
use crate::models::{ModelParams, TokenSequence};
use crate::numerics::{Adam, AdamConfig, Container};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub beam_width: usize,
    pub max_symbols_per_frame: usize,
    /// Cap on utterances decoded per test set (`None` = all).
    pub max_utterances: Option<usize>,
    /// Cap on held-out sentences scored for ILM perplexity.
    pub max_heldout: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beam_width: 2,
            max_symbols_per_frame: 4,
            max_utterances: None,
            max_heldout: Some(500),
        }
    }
}

impl EvalConfig {
    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            beam_width: self.beam_width,
            max_symbols_per_frame: self.max_symbols_per_frame,
            ..FusionConfig::no_fusion(self.beam_width)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: ObjectiveSpec,
    pub paired_batch_size: usize,
    pub unpaired_batch_size: usize,
    pub steps: usize,
    pub optimizer: AdamConfig,
    /// 0 disables periodic evaluation.
    pub eval_every: usize,
    pub eval: EvalConfig,
    pub upsample: UpsampleMaskConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveSpec::base(),
            paired_batch_size: 16,
            unpaired_batch_size: 128,
            steps: 1000,
            optimizer: AdamConfig::default(),
            eval_every: 200,
            eval: EvalConfig::default(),
            upsample: UpsampleMaskConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.optimizer.validate()?;
        self.upsample.validate()?;
        if self.paired_batch_size == 0 && self.objective.uses_paired() {
            return Err(Error::Config("paired_batch_size must be >= 1".into()));
        }
        if self.objective.uses_unpaired() {
            if self.unpaired_batch_size == 0 {
                return Err(Error::Config("unpaired_batch_size must be >= 1".into()));
            }
            if self.objective.mode != Mode::Ilma && self.unpaired_batch_size < self.paired_batch_size {
                return Err(Error::Config(format!(
                    "unpaired_batch_size {} < paired_batch_size {}",
                    self.unpaired_batch_size, self.paired_batch_size
                )));
            }
        }
        if self.eval.beam_width == 0 || self.eval.max_symbols_per_frame == 0 {
            return Err(Error::Config("eval beam settings must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-epoch reshuffled cycling over `n` items where the order of epoch `e`
/// depends only on `(seed, e)`, so the batch for any step can be rebuilt
/// without replaying earlier steps.
#[derive(Debug, Clone)]
struct EpochOrder {
    n: usize,
    seed: u64,
    stream: u64,
    cached: Option<(usize, Vec<usize>)>,
}

impl EpochOrder {
    fn new(n: usize, seed: u64, stream: u64) -> Self {
        Self {
            n,
            seed,
            stream,
            cached: None,
        }
    }

    fn index(&mut self, k: usize) -> usize {
        let (epoch, pos) = (k / self.n, k % self.n);
        if self.cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(self.stream << 32 | epoch as u64);
            let mut order: Vec<usize> = (0..self.n).collect();
            order.shuffle(&mut rng);
            self.cached = Some((epoch, order));
        }
        self.cached.as_ref().expect("filled").1[pos]
    }
}

/// Paired and unpaired batches for one step.
#[derive(Debug, Clone, Default)]
pub struct StepBatch<'a> {
    pub paired: Vec<&'a Utterance>,
    pub text: Vec<&'a TokenSequence>,
}

impl StepBatch<'_> {
    pub fn paired_owned(&self) -> Vec<Utterance> {
        self.paired.iter().map(|u| (*u).clone()).collect()
    }

    pub fn text_owned(&self) -> Vec<TokenSequence> {
        self.text.iter().map(|t| (*t).clone()).collect()
    }
}

/// Draws one paired and (when the objective uses text) one unpaired batch
/// per step.
#[derive(Debug, Clone)]
pub struct BatchScheduler<'a> {
    paired: &'a [Utterance],
    text: &'a [TokenSequence],
    paired_bs: usize,
    text_bs: usize,
    paired_order: Option<EpochOrder>,
    text_order: Option<EpochOrder>,
}

const STREAM_PAIRED: u64 = 1;
const STREAM_TEXT: u64 = 2;

impl<'a> BatchScheduler<'a> {
    pub fn new(paired: &'a [Utterance], text: &'a [TokenSequence], cfg: &TrainConfig) -> Result<Self> {
        let spec = &cfg.objective;
        let uses_paired = spec.uses_paired();
        let uses_text = spec.uses_unpaired();
        if uses_paired && paired.is_empty() {
            return Err(Error::Config(format!("{} needs paired data", spec.mode)));
        }
        if uses_text && text.is_empty() {
            return Err(Error::Config(format!("{} needs unpaired text", spec.mode)));
        }
        Ok(Self {
            paired,
            text,
            paired_bs: if uses_paired { cfg.paired_batch_size } else { 0 },
            text_bs: if uses_text { cfg.unpaired_batch_size } else { 0 },
            paired_order: uses_paired.then(|| EpochOrder::new(paired.len(), cfg.seed, STREAM_PAIRED)),
            text_order: uses_text.then(|| EpochOrder::new(text.len(), cfg.seed, STREAM_TEXT)),
        })
    }

    pub fn batch(&mut self, step: usize) -> StepBatch<'a> {
        let mut out = StepBatch::default();
        if let Some(o) = &mut self.paired_order {
            out.paired = (0..self.paired_bs)
                .map(|j| &self.paired[o.index(step * self.paired_bs + j)])
                .collect();
        }
        if let Some(o) = &mut self.text_order {
            out.text = (0..self.text_bs)
                .map(|j| &self.text[o.index(step * self.text_bs + j)])
                .collect();
        }
        out
    }
}

/// Batches for steps `0..steps`.
pub fn mix_batches<'a>(
    paired: &'a [Utterance],
    text: &'a [TokenSequence],
    cfg: &TrainConfig,
    steps: usize,
) -> Result<Vec<StepBatch<'a>>> {
    let mut s = BatchScheduler::new(paired, text, cfg)?;
    Ok((0..steps).map(|k| s.batch(k)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    /// Objective divided by the batch size it is normalised by.
    pub total: f64,
    /// Per-sentence means of each term, unweighted.
    pub components: LossComponents,
    pub grad_norm: f64,
}

/// One optimiser update. The objective is a sum over the batch; gradients
/// are divided by the paired batch size (unpaired size for ILMA) so the
/// learning rate does not depend on batch size.
pub fn train_step(
    mp: &mut ModelParams,
    opt: &mut Adam,
    batch: &StepBatch<'_>,
    cfg: &TrainConfig,
    frozen: Option<&ModelParams>,
    step: usize,
) -> Result<StepMetrics> {
    let paired = batch.paired_owned();
    let text = batch.text_owned();
    let ups = cfg
        .upsample
        .with_seed(cfg.upsample.seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut obj = composite_objective(&cfg.objective, &paired, &text, mp, frozen, &ups)?;
    let norm = if cfg.objective.mode == Mode::Ilma {
        text.len()
    } else {
        paired.len()
    } as f64;
    let per = |v: f64, n: usize| if n == 0 { 0.0 } else { v / n as f64 };
    let c = obj.components;
    let components = LossComponents {
        e2e_paired: per(c.e2e_paired, paired.len()),
        e2e_unpaired: per(c.e2e_unpaired, text.len()),
        ilm: per(
            c.ilm,
            if cfg.objective.ilm_text_source == crate::losses::IlmTextSource::PairedTranscripts
                && cfg.objective.mode != Mode::Ilma
            {
                paired.len()
            } else {
                text.len()
            },
        ),
        kld: per(c.kld, text.len()),
    };
    let total = obj.total / norm;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "step {step}: objective {total} ({components:?})"
        )));
    }
    obj.grads.scale(1.0 / norm);
    let grad_norm = opt
        .apply(&mut mp.params, &mut obj.grads)
        .map_err(|e| Error::NonFinite(format!("step {step}: {e}; losses {components:?}")))?;
    Ok(StepMetrics {
        step,
        total,
        components,
        grad_norm,
    })
}

/// Per-token perplexity of the model's internal LM on `texts`.
pub fn ilm_perplexity(mp: &ModelParams, texts: &[TokenSequence]) -> Result<f64> {
    let mut nll = 0.0;
    let mut n = 0usize;
    for y in texts {
        y.validate(mp.config.vocab_size)?;
        let mut state = mp.initial_state()?;
        for u in 0..y.len() {
            nll -= state.ilm[y[u]];
            if u + 1 < y.len() {
                state = mp.advance_state(&state, &y[..=u])?;
            }
        }
        n += y.len();
    }
    if n == 0 {
        return Err(Error::Config("perplexity needs at least one token".into()));
    }
    Ok((nll / n as f64).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub step: usize,
    /// Pooled WER per test set, keyed by set name.
    pub wer: BTreeMap<String, WerBreakdown>,
    /// Pooled over all rare-word sets.
    pub rare_wer: f64,
    pub dev_wer: f64,
    pub ilm_perplexity: f64,
}

impl EvalMetrics {
    pub fn rate(&self, set: &str) -> Option<f64> {
        self.wer.get(set).map(|w| w.rate())
    }
}

pub fn evaluate(mp: &ModelParams, bundle: &SplitBundle, eval: &EvalConfig, step: usize) -> Result<EvalMetrics> {
    let cap = |u: &[Utterance]| eval.max_utterances.map_or(u.len(), |m| m.min(u.len()));
    let fusion = eval.fusion();
    let mut wer = BTreeMap::new();
    let mut rare = WerBreakdown::default();
    for (name, utts) in bundle.test_sets() {
        let w = evaluate_wer(mp, &utts[..cap(utts)], &fusion, None)?;
        if name != "base" {
            rare.add(&w);
        }
        wer.insert(name.to_string(), w);
    }
    let dev = evaluate_wer(mp, &bundle.dev[..cap(&bundle.dev)], &fusion, None)?;
    wer.insert("dev".into(), dev);
    let held = eval
        .max_heldout
        .map_or(bundle.heldout_text.len(), |m| m.min(bundle.heldout_text.len()));
    Ok(EvalMetrics {
        step,
        wer,
        rare_wer: rare.rate(),
        dev_wer: dev.rate(),
        ilm_perplexity: ilm_perplexity(mp, &bundle.heldout_text[..held])?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsRecord {
    Step(StepMetrics),
    Eval(EvalMetrics),
}

/// Everything a run logs except wall-clock time, so two runs with the same
/// inputs produce equal logs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub records: Vec<MetricsRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsHeader {
    pub schema_version: u32,
    pub mode: Mode,
    pub variant: crate::models::Variant,
    pub start_step: usize,
    pub steps: usize,
    /// Seconds since the Unix epoch at the start of the run.
    pub started_unix: f64,
}

impl MetricsLog {
    pub fn steps(&self) -> impl Iterator<Item = &StepMetrics> {
        self.records.iter().filter_map(|r| match r {
            MetricsRecord::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn evals(&self) -> impl Iterator<Item = &EvalMetrics> {
        self.records.iter().filter_map(|r| match r {
            MetricsRecord::Eval(e) => Some(e),
            _ => None,
        })
    }

    pub fn to_jsonl(&self, header: &MetricsHeader) -> String {
        let mut s = serde_json::to_string(&serde_json::json!({ "kind": "header", "header": header })).expect("json");
        s.push('\n');
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("json"));
            s.push('\n');
        }
        s
    }

    /// Parses a log written by [`MetricsLog::to_jsonl`], skipping the header.
    pub fn from_jsonl(text: &str) -> Result<(MetricsHeader, Self)> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let first = lines.next().ok_or_else(|| Error::Format("empty metrics log".into()))?;
        let v: serde_json::Value = serde_json::from_str(first).map_err(|e| Error::Format(e.to_string()))?;
        let header: MetricsHeader =
            serde_json::from_value(v["header"].clone()).map_err(|e| Error::Format(format!("metrics header: {e}")))?;
        if header.schema_version != METRICS_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "metrics schema {} unsupported",
                header.schema_version
            )));
        }
        let records = lines
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(e.to_string())))
            .collect::<Result<_>>()?;
        Ok((header, Self { records }))
    }

    pub fn extend(&mut self, other: MetricsLog) {
        self.records.extend(other.records);
    }
}

/// Model, optimiser state and progress at a step boundary.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: Option<Adam>,
    pub step: usize,
    pub best: Option<(usize, f64)>,
}

impl Checkpoint {
    pub fn fresh(params: ModelParams) -> Self {
        Self {
            params,
            optimizer: None,
            step: 0,
            best: None,
        }
    }

    pub fn to_container(&self) -> Container {
        let mut c = self.params.to_container();
        if let Some(opt) = &self.optimizer {
            opt.save_into(&self.params.params, &mut c);
        }
        c.meta.insert("train.step".into(), self.step.to_string());
        if let Some((s, w)) = self.best {
            c.meta.insert("train.best_step".into(), s.to_string());
            c.meta.insert("train.best_score".into(), format!("{w:?}"));
        }
        c
    }

    /// Restores parameters and, when present, the optimiser state.
    pub fn from_container(c: &Container, optimizer: AdamConfig) -> Result<Self> {
        let mut params = ModelParams::from_checkpoint(c)?;
        // parameter entries only; the optimiser moments are separate names
        let trainable = c.meta.get("ilm_only").map(|s| s == "true").unwrap_or(false);
        params.set_ilm_only_trainable(trainable);
        let optimizer = if c.meta.contains_key("adam.step") {
            Some(Adam::load_from(optimizer, &params.params, c)?)
        } else {
            None
        };
        let parse = |k: &str| c.meta.get(k).and_then(|s| s.parse::<f64>().ok());
        let step = parse("train.step").unwrap_or(0.0) as usize;
        let best = match (parse("train.best_step"), parse("train.best_score")) {
            (Some(s), Some(w)) => Some((s as usize, w)),
            _ => None,
        };
        Ok(Self {
            params,
            optimizer,
            step,
            best,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Lowest dev WER seen at an evaluation (the last state if none ran).
    pub best: ModelParams,
    pub best_step: usize,
    pub log: MetricsLog,
    pub wall_seconds: f64,
}

/// Where to write checkpoints and the metrics log during a run.
#[derive(Debug, Clone, Copy)]
pub struct RunOutputs<'p> {
    pub dir: &'p Path,
}

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Runs `cfg.steps` steps from `start` (a fresh model or a resumed
/// checkpoint; the step counter continues from `start.step`).
///
/// ILMA marks only the internal-LM subset trainable and adapts against
/// `frozen`, which should be the ILMT checkpoint the run was seeded from.
pub fn run_training(
    cfg: &TrainConfig,
    bundle: &SplitBundle,
    start: Checkpoint,
    frozen: Option<&ModelParams>,
    out: Option<RunOutputs<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = std::time::Instant::now();
    let started_unix = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0);
    let ilma = cfg.objective.mode == Mode::Ilma;
    if ilma && frozen.is_none() {
        return Err(Error::Config("ILMA needs the frozen ILMT snapshot".into()));
    }
    let Checkpoint {
        params: mut mp,
        optimizer,
        step: first,
        mut best,
    } = start;
    mp.set_ilm_only_trainable(ilma);
    let mut opt = optimizer.unwrap_or_else(|| Adam::new(cfg.optimizer, &mp.params));
    let mut sched = BatchScheduler::new(&bundle.paired_train, &bundle.unpaired_text, cfg)?;
    let mut log = MetricsLog::default();
    let mut best_params = mp.clone();
    let mut best_step = best.map_or(first, |b| b.0);
    let end = first + cfg.steps;

    let save = |ck: &Checkpoint, name: &str| -> Result<()> {
        if let Some(o) = out {
            fs::create_dir_all(o.dir)?;
            let mut c = ck.to_container();
            c.meta.insert("ilm_only".into(), ilma.to_string());
            c.save(o.dir.join(name))?;
        }
        Ok(())
    };

    for step in first..end {
        let batch = sched.batch(step);
        let m = train_step(&mut mp, &mut opt, &batch, cfg, frozen, step)?;
        log.records.push(MetricsRecord::Step(m));
        let done = step + 1;
        if cfg.eval_every > 0 && (done % cfg.eval_every == 0 || done == end) {
            let e = evaluate(&mp, bundle, &cfg.eval, done)?;
            if best.is_none_or(|(_, w)| e.dev_wer < w) {
                best = Some((done, e.dev_wer));
                best_params = mp.clone();
                best_step = done;
                save(
                    &Checkpoint {
                        params: mp.clone(),
                        optimizer: None,
                        step: done,
                        best,
                    },
                    BEST_CHECKPOINT,
                )?;
            }
            log.records.push(MetricsRecord::Eval(e));
        }
    }
    if cfg.eval_every == 0 || best.is_none() {
        best_params = mp.clone();
        best_step = end;
    }
    let last = Checkpoint {
        params: mp,
        optimizer: Some(opt),
        step: end,
        best,
    };
    save(&last, LAST_CHECKPOINT)?;
    let wall_seconds = started.elapsed().as_secs_f64();
    if let Some(o) = out {
        let header = MetricsHeader {
            schema_version: METRICS_SCHEMA_VERSION,
            mode: cfg.objective.mode,
            variant: last.params.config.variant,
            start_step: first,
            steps: cfg.steps,
            started_unix,
        };
        let mut f = fs::File::create(o.dir.join(METRICS_FILE))?;
        f.write_all(log.to_jsonl(&header).as_bytes())?;
        let timing =
            serde_json::json!({ "steps": cfg.steps, "wall_seconds": wall_seconds, "started_unix": started_unix });
        fs::write(
            o.dir.join("timing.json"),
            serde_json::to_string_pretty(&timing).expect("json"),
        )?;
    }
    Ok(TrainOutcome {
        last,
        best: best_params,
        best_step,
        log,
        wall_seconds,
    })
}
