//! The declarative experiment document.

use std::path::{Path, PathBuf};

use jeit_core::corpus::CorpusSpec;
use jeit_core::decoding::{FusionConfig, LmConfig, LmTrainConfig};
use jeit_core::losses::{IlmTextSource, Mode, ObjectiveSpec, UpsampleMaskConfig};
use jeit_core::models::{LabelDecoderConfig, ModelConfig, TextEncoderConfig, Variant};
use jeit_core::numerics::AdamConfig;
use jeit_core::training::{EvalConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Model dimensions shared by both variants; vocabulary and input width
/// come from the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub encoder_dim: usize,
    pub encoder_layers: usize,
    pub label_decoder: LabelDecoderConfig,
    /// MHAT only.
    pub blank_decoder_dim: usize,
    pub joint_dim: usize,
    pub text_encoder: TextEncoderConfig,
    pub init_seed: u64,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            encoder_dim: 32,
            encoder_layers: 2,
            label_decoder: LabelDecoderConfig::Recurrent {
                layers: 1,
                width: 32,
                embed_dim: 16,
            },
            blank_decoder_dim: 16,
            joint_dim: 32,
            text_encoder: TextEncoderConfig {
                layers: 1,
                injection_layer: 1,
                embed_dim: 16,
            },
            init_seed: 1,
        }
    }
}

impl ModelShape {
    pub fn config(&self, variant: Variant, corpus: &CorpusSpec) -> ModelConfig {
        ModelConfig {
            variant,
            vocab_size: corpus.vocab_size(),
            feature_dim: corpus.feature_dim(),
            encoder_dim: self.encoder_dim,
            encoder_layers: self.encoder_layers,
            label_decoder: self.label_decoder.clone(),
            blank_decoder_dim: (variant == Variant::Mhat).then_some(self.blank_decoder_dim),
            joint_dim: self.joint_dim,
            text_encoder: self.text_encoder.clone(),
        }
    }
}

/// Loss weights per mode. JEIT's β differs by variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveWeights {
    pub ilmt_beta: f64,
    pub jeit_beta_hat: f64,
    pub jeit_beta_mhat: f64,
    pub joist_alpha: f64,
    pub cjjt_alpha: f64,
    pub cjjt_beta: f64,
    pub ilma_kld_weight: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            ilmt_beta: 0.1,
            jeit_beta_hat: 0.2,
            jeit_beta_mhat: 1.0,
            joist_alpha: 0.25,
            cjjt_alpha: 0.25,
            cjjt_beta: 1.5,
            ilma_kld_weight: 0.5,
        }
    }
}

impl ObjectiveWeights {
    pub fn spec(&self, mode: Mode, variant: Variant) -> ObjectiveSpec {
        match mode {
            Mode::Base => ObjectiveSpec::base(),
            Mode::Ilmt => ObjectiveSpec::ilmt(self.ilmt_beta),
            Mode::Jeit => ObjectiveSpec::jeit(match variant {
                Variant::Hat => self.jeit_beta_hat,
                Variant::Mhat => self.jeit_beta_mhat,
            }),
            Mode::Joist => ObjectiveSpec::joist(self.joist_alpha),
            Mode::Cjjt => ObjectiveSpec::cjjt(self.cjjt_alpha, self.cjjt_beta),
            Mode::Ilma => ObjectiveSpec::ilma(self.ilma_kld_weight),
        }
    }
}

/// Everything in [`TrainConfig`] except the objective, which is chosen per
/// run from `--mode` and [`ObjectiveWeights`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub paired_batch_size: usize,
    pub unpaired_batch_size: usize,
    pub steps: usize,
    pub optimizer: AdamConfig,
    pub eval_every: usize,
    pub eval: EvalConfig,
    pub upsample: UpsampleMaskConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            paired_batch_size: t.paired_batch_size,
            unpaired_batch_size: t.unpaired_batch_size,
            steps: 3000,
            optimizer: t.optimizer,
            eval_every: 1000,
            eval: t.eval,
            upsample: t.upsample,
        }
    }
}

/// ILMA: paired ILMT seed training, then text-only adaptation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptSettings {
    pub steps: usize,
    pub eval_every: usize,
    pub unpaired_batch_size: usize,
    pub optimizer: AdamConfig,
}

impl Default for AdaptSettings {
    fn default() -> Self {
        Self {
            steps: 1000,
            eval_every: 100,
            unpaired_batch_size: 128,
            optimizer: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSettings {
    pub embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub train: LmTrainConfig,
}

impl Default for LmSettings {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            hidden: 32,
            layers: 2,
            train: LmTrainConfig::default(),
        }
    }
}

impl LmSettings {
    pub fn config(&self, vocab_size: usize) -> LmConfig {
        LmConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            layers: self.layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub lambda_lm: Vec<f64>,
    pub lambda_ilm: Vec<f64>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            lambda_lm: vec![0.0, 0.1, 0.2, 0.3, 0.5],
            lambda_ilm: vec![0.0, 0.1, 0.2, 0.3],
        }
    }
}

impl SweepSettings {
    /// Valid `(λ_lm, λ_ilm)` pairs in grid order.
    pub fn grid(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for &l in &self.lambda_lm {
            for &i in &self.lambda_ilm {
                if i == 0.0 || l > 0.0 {
                    out.push((l, i));
                }
            }
        }
        out
    }
}

/// One training run of the experiment table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub variant: Variant,
    pub mode: Mode,
}

impl RunSpec {
    pub fn name(&self) -> String {
        format!("{}-{}", self.variant, self.mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSettings {
    /// Full-training runs (ILMA is driven by `adapt_variants`).
    pub runs: Vec<RunSpec>,
    /// Variants that get ILMT seed training followed by ILMA.
    pub adapt_variants: Vec<Variant>,
    /// Runs decoded with LM fusion after a dev-set sweep.
    pub fused_runs: Vec<RunSpec>,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        let r = |variant, mode| RunSpec { variant, mode };
        Self {
            runs: vec![
                r(Variant::Mhat, Mode::Base),
                r(Variant::Mhat, Mode::Jeit),
                r(Variant::Mhat, Mode::Joist),
                r(Variant::Mhat, Mode::Cjjt),
            ],
            adapt_variants: vec![Variant::Hat, Variant::Mhat],
            fused_runs: vec![r(Variant::Mhat, Mode::Cjjt)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusSpec,
    pub model: ModelShape,
    pub objectives: ObjectiveWeights,
    pub ilm_text_source: IlmTextSource,
    pub train: TrainSettings,
    pub adapt: AdaptSettings,
    pub fusion: FusionConfig,
    pub lm: LmSettings,
    pub sweep: SweepSettings,
    pub experiment: ExperimentSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 1,
            out_dir: PathBuf::from("runs/default"),
            corpus: CorpusSpec::default(),
            model: ModelShape::default(),
            objectives: ObjectiveWeights::default(),
            ilm_text_source: IlmTextSource::Unpaired,
            train: TrainSettings::default(),
            adapt: AdaptSettings::default(),
            fusion: FusionConfig::default(),
            lm: LmSettings::default(),
            sweep: SweepSettings::default(),
            experiment: ExperimentSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.corpus.validate()?;
        for v in [Variant::Hat, Variant::Mhat] {
            self.model.config(v, &self.corpus).validate()?;
        }
        self.fusion.validate()?;
        for m in Mode::ALL {
            for v in [Variant::Hat, Variant::Mhat] {
                self.objectives.spec(m, v).validate()?;
            }
        }
        self.train_config(Mode::Cjjt, Variant::Mhat).validate()?;
        self.adapt_config(Variant::Hat).validate()?;
        if self.sweep.grid().is_empty() {
            return Err(CliError::Config("fusion sweep grid is empty".into()));
        }
        Ok(())
    }

    /// Applies `--seed-override`: the corpus, initialisation and batching
    /// seeds all derive from the run seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.corpus.seed = seed;
        self.model.init_seed = seed;
        self
    }

    pub fn train_config(&self, mode: Mode, variant: Variant) -> TrainConfig {
        let mut objective = self.objectives.spec(mode, variant);
        if matches!(mode, Mode::Jeit | Mode::Cjjt) {
            objective.ilm_text_source = self.ilm_text_source;
        }
        let t = &self.train;
        TrainConfig {
            objective,
            paired_batch_size: t.paired_batch_size,
            unpaired_batch_size: t.unpaired_batch_size,
            steps: t.steps,
            optimizer: t.optimizer,
            eval_every: t.eval_every,
            eval: t.eval.clone(),
            upsample: t.upsample.with_seed(self.seed ^ t.upsample.seed),
            seed: self.seed,
        }
    }

    pub fn adapt_config(&self, variant: Variant) -> TrainConfig {
        let a = &self.adapt;
        TrainConfig {
            objective: self.objectives.spec(Mode::Ilma, variant),
            paired_batch_size: 0,
            unpaired_batch_size: a.unpaired_batch_size,
            steps: a.steps,
            optimizer: a.optimizer,
            eval_every: a.eval_every,
            ..self.train_config(Mode::Ilma, variant)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_and_fills_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = RunConfig::from_toml("schema_version = 1\n[corpus]\nnoise_level = 0.2\n").unwrap();
        assert_eq!(partial.corpus.noise_level, 0.2);
        assert_eq!(partial.corpus.paired_count, CorpusSpec::default().paired_count);
    }

    #[test]
    fn rejects_bad_documents() {
        let bad = |s: &str| matches!(RunConfig::from_toml(s), Err(CliError::Config(_)));
        assert!(bad("schema_version = 2\n"));
        assert!(bad("schema_version = 1\nbogus = 3\n"));
        assert!(bad("[fusion]\nlambda_lm = 0.0\nlambda_ilm = 0.2\n"));
        assert!(bad("[train]\npaired_batch_size = 64\nunpaired_batch_size = 8\n"));
    }

    #[test]
    fn sweep_grid_skips_subtraction_without_fusion() {
        let g = SweepSettings::default().grid();
        assert!(g.contains(&(0.0, 0.0)));
        assert!(!g.iter().any(|&(l, i)| l == 0.0 && i > 0.0));
    }
}
