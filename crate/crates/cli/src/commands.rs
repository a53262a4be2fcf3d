//! One function per subcommand. Each reads its inputs from the experiment
//! directory named by the config and writes its outputs next to them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use jeit_core::corpus::{generate_corpus, SplitBundle, Utterance};
use jeit_core::decoding::{beam_search, train_external_lm, wer, ExternalLm, FusionConfig, LmTrainLog, WerBreakdown};
use jeit_core::losses::Mode;
use jeit_core::models::{ModelParams, Variant};
use jeit_core::numerics::Container;
use jeit_core::training::{
    evaluate, run_training, Checkpoint, EvalMetrics, RunOutputs, TrainOutcome, BEST_CHECKPOINT, LAST_CHECKPOINT,
    METRICS_FILE,
};
use serde::{Deserialize, Serialize};

use crate::artifacts::{
    data_dir, echo_config, load_corpus, nbest_rows, read_nbest, run_dir, write_corpus, write_nbest, Manifest,
    ScoreTable,
};
use crate::config::{RunConfig, RunSpec};
use crate::CliError;

pub const LM_DIR: &str = "lm";
pub const LM_CHECKPOINT: &str = "lm.ckpt";
pub const CURVE_FILE: &str = "curve.tsv";
pub const SCORES_FILE: &str = "scores.json";
pub const SWEEP_FILE: &str = "sweep.tsv";
pub const BEST_FUSION_FILE: &str = "best_fusion.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const DECODE_DIR: &str = "decode";
pub const SWEEP_DIR: &str = "sweep";
/// Test-set decodes with the dev-selected fusion weights, kept apart from the
/// plain decodes even when the sweep picks λ = 0.
pub const FUSED_DIR: &str = "fused";

/// `--seed-override` and `--out`, applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

pub fn load_config(path: &Path, o: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = o.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(out) = &o.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `--lambda-lm`, `--lambda-ilm`, `--beam`.
#[derive(Debug, Clone, Copy, Default)]
pub struct FusionOverrides {
    pub lambda_lm: Option<f64>,
    pub lambda_ilm: Option<f64>,
    pub beam: Option<usize>,
}

impl FusionOverrides {
    pub fn apply(&self, base: &FusionConfig) -> Result<FusionConfig, CliError> {
        let f = FusionConfig {
            lambda_lm: self.lambda_lm.unwrap_or(base.lambda_lm),
            lambda_ilm: self.lambda_ilm.unwrap_or(base.lambda_ilm),
            beam_width: self.beam.unwrap_or(base.beam_width),
            max_symbols_per_frame: base.max_symbols_per_frame,
        };
        f.validate()?;
        Ok(f)
    }
}

/// Directory name for one decoding configuration.
pub fn fusion_tag(f: &FusionConfig) -> String {
    format!("lm{}-ilm{}-beam{}", f.lambda_lm, f.lambda_ilm, f.beam_width)
}

pub fn gen_data(cfg: &RunConfig) -> Result<Manifest, CliError> {
    let bundle = generate_corpus(&cfg.corpus)?;
    let dir = data_dir(cfg);
    let (manifest, _) = write_corpus(&dir, &bundle, cfg)?;
    echo_config(&dir, cfg)?;
    if !manifest.audit_passed {
        return Err(CliError::Audit(manifest.audit_violations.join("; ")));
    }
    Ok(manifest)
}

fn fresh_params(cfg: &RunConfig, variant: Variant) -> Result<ModelParams, CliError> {
    Ok(ModelParams::init(
        &cfg.model.config(variant, &cfg.corpus),
        cfg.model.init_seed,
    )?)
}

pub fn train(cfg: &RunConfig, variant: Variant, mode: Mode) -> Result<TrainOutcome, CliError> {
    if mode == Mode::Ilma {
        return Err(CliError::Config(
            "ILMA starts from an ILMT checkpoint; use `adapt`".into(),
        ));
    }
    let bundle = load_corpus(cfg)?;
    let run = RunSpec { variant, mode };
    let dir = run_dir(cfg, &run.name());
    echo_config(&dir, cfg)?;
    let tc = cfg.train_config(mode, variant);
    let start = Checkpoint::fresh(fresh_params(cfg, variant)?);
    Ok(run_training(&tc, &bundle, start, None, Some(RunOutputs { dir: &dir }))?)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, CliError> {
    let c = Container::load(path)
        .map_err(|e| CliError::Config(format!("cannot load checkpoint {}: {e}", path.display())))?;
    Ok(ModelParams::from_checkpoint(&c)?)
}

/// Name of the ILMA run directory for a given KLD weight.
pub fn adapt_run_name(variant: Variant, kld_weight: f64) -> String {
    format!("{variant}-ilma-kld{kld_weight}")
}

/// One evaluation point of the adaptation curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub rare_wer: f64,
    pub base_wer: f64,
    pub dev_wer: f64,
    pub ilm_perplexity: f64,
}

impl From<&EvalMetrics> for CurvePoint {
    fn from(e: &EvalMetrics) -> Self {
        Self {
            step: e.step,
            rare_wer: e.rare_wer,
            base_wer: e.rate("base").unwrap_or(f64::NAN),
            dev_wer: e.dev_wer,
            ilm_perplexity: e.ilm_perplexity,
        }
    }
}

pub const CURVE_HEADER: &str = "step\trare_wer\tbase_wer\tdev_wer\tilm_perplexity";

pub fn write_curve(path: &Path, points: &[CurvePoint]) -> Result<(), CliError> {
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for p in points {
        let _ = writeln!(
            s,
            "{}\t{:?}\t{:?}\t{:?}\t{:?}",
            p.step, p.rare_wer, p.base_wer, p.dev_wer, p.ilm_perplexity
        );
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_curve(path: &Path) -> Result<Vec<CurvePoint>, CliError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(CURVE_HEADER) {
        return Err(CliError::Audit(format!("{} is not a curve file", path.display())));
    }
    lines
        .map(|l| {
            let bad = || CliError::Audit(format!("malformed curve line in {}: {l}", path.display()));
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(CurvePoint {
                step: f[0].parse().map_err(|_| bad())?,
                rare_wer: num(f[1])?,
                base_wer: num(f[2])?,
                dev_wer: num(f[3])?,
                ilm_perplexity: num(f[4])?,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub dir: PathBuf,
    pub curve: Vec<CurvePoint>,
    pub outcome: TrainOutcome,
}

/// ILMA from `seed_ckpt` (default: the variant's ILMT run). Writes the
/// WER-vs-steps curve, including the unadapted seed at step 0, and checks
/// afterwards that nothing outside θ_ILM moved.
pub fn adapt(
    cfg: &RunConfig,
    variant: Variant,
    seed_ckpt: Option<&Path>,
    kld_weight: Option<f64>,
) -> Result<AdaptOutcome, CliError> {
    let bundle = load_corpus(cfg)?;
    let default_seed = run_dir(
        cfg,
        &RunSpec {
            variant,
            mode: Mode::Ilmt,
        }
        .name(),
    )
    .join(LAST_CHECKPOINT);
    let seed_path = seed_ckpt.unwrap_or(&default_seed);
    if !seed_path.exists() {
        return Err(CliError::Config(format!(
            "no ILMT seed checkpoint at {}; run `train --mode ilmt` first",
            seed_path.display()
        )));
    }
    let seed = load_checkpoint(seed_path)?;
    if seed.config.variant != variant {
        return Err(CliError::Config(format!(
            "seed checkpoint is {}, not {variant}",
            seed.config.variant
        )));
    }
    let mut tc = cfg.adapt_config(variant);
    if let Some(k) = kld_weight {
        tc.objective.kld_weight = k;
    }
    tc.validate()?;
    let dir = run_dir(cfg, &adapt_run_name(variant, tc.objective.kld_weight));
    echo_config(&dir, cfg)?;

    let mut curve = vec![CurvePoint::from(&evaluate(&seed, &bundle, &tc.eval, 0)?)];
    let outcome = run_training(
        &tc,
        &bundle,
        Checkpoint::fresh(seed.clone()),
        Some(&seed),
        Some(RunOutputs { dir: &dir }),
    )?;
    curve.extend(outcome.log.evals().map(CurvePoint::from));
    write_curve(&dir.join(CURVE_FILE), &curve)?;

    let adapted = &outcome.last.params;
    for (id, p) in seed.params.iter() {
        if !seed.is_ilm(id) && adapted.params.tensor(id).data() != p.tensor.data() {
            return Err(CliError::Audit(format!("ILMA changed non-ILM parameter {}", p.name)));
        }
    }
    Ok(AdaptOutcome { dir, curve, outcome })
}

pub fn lm_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join(LM_DIR).join(LM_CHECKPOINT)
}

pub fn train_lm(cfg: &RunConfig) -> Result<(ExternalLm, LmTrainLog), CliError> {
    let bundle = load_corpus(cfg)?;
    let dir = cfg.out_dir.join(LM_DIR);
    echo_config(&dir, cfg)?;
    let mut tc = cfg.lm.train;
    tc.seed ^= cfg.seed;
    let (lm, log) = train_external_lm(
        &bundle.transcripts(),
        &bundle.unpaired_text,
        cfg.lm.config(cfg.corpus.vocab_size()),
        &tc,
    )?;
    lm.to_container().save(dir.join(LM_CHECKPOINT))?;
    fs::write(
        dir.join("train_log.json"),
        serde_json::to_string_pretty(&log).expect("json") + "\n",
    )?;
    Ok((lm, log))
}

fn load_lm(cfg: &RunConfig, fusion: &FusionConfig) -> Result<Option<ExternalLm>, CliError> {
    if fusion.lambda_lm == 0.0 {
        return Ok(None);
    }
    let p = lm_path(cfg);
    let c = Container::load(&p).map_err(|e| {
        CliError::Config(format!(
            "λ_lm > 0 needs an external LM at {} ({e}); run `train-lm`",
            p.display()
        ))
    })?;
    Ok(Some(ExternalLm::from_container(&c)?))
}

/// Which evaluation sets to decode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeSets {
    Tests,
    Dev,
    All,
}

fn named_sets(bundle: &SplitBundle, which: DecodeSets) -> Vec<(&str, &[Utterance])> {
    let mut out = Vec::new();
    if which != DecodeSets::Dev {
        out.extend(bundle.test_sets());
    }
    if which != DecodeSets::Tests {
        out.push(("dev", bundle.dev.as_slice()));
    }
    out
}

pub fn utt_id(set: &str, index: usize) -> String {
    format!("{set}/{index:05}")
}

/// Resolves a `--checkpoint` argument: a path, or a run name whose best
/// checkpoint is used.
pub fn resolve_checkpoint(cfg: &RunConfig, arg: &str) -> PathBuf {
    let p = PathBuf::from(arg);
    if p.is_file() {
        p
    } else {
        run_dir(cfg, arg).join(BEST_CHECKPOINT)
    }
}

/// Beam-searches every utterance of the selected sets and writes one n-best
/// file per set under `<checkpoint dir>/decode/<fusion tag>/` (`sweep/`
/// instead of `decode/` for dev-only decodes).
pub fn decode(
    cfg: &RunConfig,
    checkpoint: &Path,
    fusion: &FusionConfig,
    which: DecodeSets,
) -> Result<PathBuf, CliError> {
    let sub = if which == DecodeSets::Dev {
        SWEEP_DIR
    } else {
        DECODE_DIR
    };
    decode_into(cfg, checkpoint, fusion, which, sub)
}

/// [`decode`] into `<checkpoint dir>/<sub>/<fusion tag>/`.
pub fn decode_into(
    cfg: &RunConfig,
    checkpoint: &Path,
    fusion: &FusionConfig,
    which: DecodeSets,
    sub: &str,
) -> Result<PathBuf, CliError> {
    fusion.validate()?;
    let bundle = load_corpus(cfg)?;
    let mp = load_checkpoint(checkpoint)?;
    let lm = load_lm(cfg, fusion)?;
    let run = checkpoint.parent().unwrap_or(Path::new("."));
    let dir = run.join(sub).join(fusion_tag(fusion));
    echo_config(&dir, cfg)?;
    fs::write(
        dir.join("fusion.json"),
        serde_json::to_string_pretty(fusion).expect("json") + "\n",
    )?;
    for (name, utts) in named_sets(&bundle, which) {
        let mut rows = Vec::new();
        for (i, u) in utts.iter().enumerate() {
            let nbest = beam_search(&mp, &u.features, fusion, lm.as_ref())?;
            rows.extend(nbest_rows(&utt_id(name, i), &nbest, |t| bundle.vocab.render(t)));
        }
        write_nbest(&dir.join(format!("{name}.nbest.tsv")), &rows)?;
    }
    Ok(dir)
}

/// Scores the top hypothesis of every n-best file in `decode_dir` against
/// the references and writes `scores.json` there.
pub fn score(cfg: &RunConfig, decode_dir: &Path, system: &str) -> Result<ScoreTable, CliError> {
    let bundle = load_corpus(cfg)?;
    let mut sets = BTreeMap::new();
    for (name, utts) in named_sets(&bundle, DecodeSets::All) {
        let path = decode_dir.join(format!("{name}.nbest.tsv"));
        if !path.exists() {
            continue;
        }
        let mut top: BTreeMap<String, String> = BTreeMap::new();
        for r in read_nbest(&path)? {
            if r.rank == 0 {
                top.insert(r.utt, r.tokens);
            }
        }
        let mut total = WerBreakdown::default();
        for (i, u) in utts.iter().enumerate() {
            let id = utt_id(name, i);
            let text = top
                .get(&id)
                .ok_or_else(|| CliError::Audit(format!("{} has no hypothesis for {id}", path.display())))?;
            let hyp = bundle.vocab.parse(text)?;
            total.add(&wer(&u.transcript, &hyp)?);
        }
        if top.len() != utts.len() {
            return Err(CliError::Audit(format!("{} lists unknown utterances", path.display())));
        }
        sets.insert(name.to_string(), total);
    }
    if sets.is_empty() {
        return Err(CliError::Config(format!("no n-best files in {}", decode_dir.display())));
    }
    let table = ScoreTable {
        system: system.to_string(),
        sets,
    };
    table.write(&decode_dir.join(SCORES_FILE))?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// `(λ_lm, λ_ilm, dev WER)` in grid order.
    pub grid: Vec<(f64, f64, f64)>,
    pub best: FusionConfig,
    pub best_dev_wer: f64,
}

/// Decodes the dev set over the configured λ grid, picks the lowest dev WER
/// (first in grid order on ties) and records it next to the checkpoint.
pub fn sweep(cfg: &RunConfig, checkpoint: &Path, beam: Option<usize>) -> Result<SweepResult, CliError> {
    let mut grid = Vec::new();
    let mut best: Option<(FusionConfig, f64)> = None;
    for (lm, ilm) in cfg.sweep.grid() {
        let f = FusionOverrides {
            lambda_lm: Some(lm),
            lambda_ilm: Some(ilm),
            beam,
        }
        .apply(&cfg.fusion)?;
        let dir = decode(cfg, checkpoint, &f, DecodeSets::Dev)?;
        let w = score(cfg, &dir, &fusion_tag(&f))?.rate("dev").expect("dev decoded");
        grid.push((lm, ilm, w));
        if best.as_ref().is_none_or(|(_, b)| w < *b) {
            best = Some((f, w));
        }
    }
    let (best, best_dev_wer) = best.ok_or_else(|| CliError::Config("fusion sweep grid is empty".into()))?;
    let run = checkpoint.parent().unwrap_or(Path::new("."));
    let mut s = String::from("lambda_lm\tlambda_ilm\tdev_wer\n");
    for (l, i, w) in &grid {
        let _ = writeln!(s, "{l}\t{i}\t{w:?}");
    }
    fs::write(run.join(SWEEP_FILE), s)?;
    let result = SweepResult {
        grid,
        best,
        best_dev_wer,
    };
    fs::write(
        run.join(BEST_FUSION_FILE),
        serde_json::to_string_pretty(&result).expect("json") + "\n",
    )?;
    Ok(result)
}

/// Headline numbers of one decoded system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSummary {
    pub system: String,
    pub base_wer: f64,
    pub rare_wer: f64,
    pub per_set: BTreeMap<String, f64>,
    pub ilm_perplexity: Option<f64>,
}

impl SystemSummary {
    fn new(t: &ScoreTable, ilm_perplexity: Option<f64>) -> Self {
        Self {
            system: t.system.clone(),
            base_wer: t.rate("base").unwrap_or(f64::NAN),
            rare_wer: t.rare().rate(),
            per_set: t.sets.iter().map(|(k, v)| (k.clone(), v.rate())).collect(),
            ilm_perplexity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptSummary {
    pub variant: Variant,
    pub kld_weight: f64,
    pub curve: Vec<CurvePoint>,
}

impl AdaptSummary {
    /// Step with the lowest rare-word WER (earliest on ties).
    pub fn best(&self) -> &CurvePoint {
        self.curve
            .iter()
            .reduce(|a, b| if b.rare_wer < a.rare_wer { b } else { a })
            .expect("curve has the step-0 point")
    }

    pub fn last(&self) -> &CurvePoint {
        self.curve.last().expect("non-empty curve")
    }
}

/// Everything `experiment` produced, written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub systems: Vec<SystemSummary>,
    pub adapt: Vec<AdaptSummary>,
    pub fusion: Vec<(String, SweepResult)>,
}

impl ExperimentSummary {
    pub fn system(&self, name: &str) -> Option<&SystemSummary> {
        self.systems.iter().find(|s| s.system == name)
    }
}

fn last_ilm_perplexity(o: &TrainOutcome) -> Option<f64> {
    o.log.evals().last().map(|e| e.ilm_perplexity)
}

/// gen-data → train-lm → train every configured run → decode and score →
/// ILMT + ILMA (configured KLD and KLD 0) → fusion sweep → report.
pub fn experiment(cfg: &RunConfig) -> Result<ExperimentSummary, CliError> {
    gen_data(cfg)?;
    let need_lm = !cfg.experiment.fused_runs.is_empty();
    if need_lm {
        train_lm(cfg)?;
    }
    let plain = FusionConfig::no_fusion(cfg.fusion.beam_width);
    let mut systems = Vec::new();
    let mut trained = BTreeMap::new();
    let mut todo: Vec<RunSpec> = cfg.experiment.runs.clone();
    for &variant in &cfg.experiment.adapt_variants {
        todo.push(RunSpec {
            variant,
            mode: Mode::Ilmt,
        });
    }
    todo.extend(cfg.experiment.fused_runs.iter().copied());
    for run in todo {
        if trained.contains_key(&run.name()) {
            continue;
        }
        let outcome = train(cfg, run.variant, run.mode)?;
        let ckpt = run_dir(cfg, &run.name()).join(BEST_CHECKPOINT);
        let dir = decode(cfg, &ckpt, &plain, DecodeSets::Tests)?;
        let table = score(cfg, &dir, &run.name())?;
        systems.push(SystemSummary::new(&table, last_ilm_perplexity(&outcome)));
        trained.insert(run.name(), ());
    }

    let mut adapt_runs = Vec::new();
    for &variant in &cfg.experiment.adapt_variants {
        let mut klds = vec![cfg.objectives.ilma_kld_weight];
        if !klds.contains(&0.0) {
            klds.push(0.0);
        }
        for kld in klds {
            let a = adapt(cfg, variant, None, Some(kld))?;
            adapt_runs.push(AdaptSummary {
                variant,
                kld_weight: kld,
                curve: a.curve,
            });
        }
    }

    let mut fusion = Vec::new();
    for run in &cfg.experiment.fused_runs {
        let ckpt = run_dir(cfg, &run.name()).join(BEST_CHECKPOINT);
        let s = sweep(cfg, &ckpt, None)?;
        let dir = decode_into(cfg, &ckpt, &s.best, DecodeSets::Tests, FUSED_DIR)?;
        let name = format!("{}+fusion", run.name());
        systems.push(SystemSummary::new(&score(cfg, &dir, &name)?, None));
        fusion.push((run.name(), s));
    }

    let summary = ExperimentSummary {
        systems,
        adapt: adapt_runs,
        fusion,
    };
    fs::write(
        cfg.out_dir.join(SUMMARY_FILE),
        serde_json::to_string_pretty(&summary).expect("json") + "\n",
    )?;
    crate::report::report(cfg)?;
    Ok(summary)
}

/// Paths of all metric logs, score tables and curves under the runs dir.
pub fn run_names(cfg: &RunConfig) -> Result<Vec<String>, CliError> {
    let root = cfg.out_dir.join("runs");
    if !root.exists() {
        return Ok(Vec::new());
    }
    let mut names: Vec<String> = fs::read_dir(&root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    Ok(names)
}

pub fn metrics_path(cfg: &RunConfig, run: &str) -> PathBuf {
    run_dir(cfg, run).join(METRICS_FILE)
}
