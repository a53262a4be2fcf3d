//! Training objectives: the paired transducer loss, the text-injection
//! (JOIST) loss on upsampled and masked text, the internal-LM cross entropy,
//! the ILMA KL regularizer and their weighted combinations.
//!
//! Every loss is a sum over its batch; normalisation happens in the trainer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::lattice::transducer_loglik;
use crate::models::{network, ModelParams, TextSymbol, TokenSequence};
use crate::numerics::{Gradients, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Base,
    Ilmt,
    Jeit,
    Joist,
    Cjjt,
    Ilma,
}

impl Mode {
    pub const ALL: [Mode; 6] = [Mode::Base, Mode::Ilmt, Mode::Jeit, Mode::Joist, Mode::Cjjt, Mode::Ilma];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Base => "base",
            Mode::Ilmt => "ilmt",
            Mode::Jeit => "jeit",
            Mode::Joist => "joist",
            Mode::Cjjt => "cjjt",
            Mode::Ilma => "ilma",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IlmTextSource {
    PairedTranscripts,
    Unpaired,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub mode: Mode,
    /// Weight of the text-injection E2E loss.
    pub alpha: f64,
    /// Weight of the internal-LM loss (fixed at 1 for ILMA).
    pub beta: f64,
    /// ILMA only.
    pub kld_weight: f64,
    pub ilm_text_source: IlmTextSource,
}

impl ObjectiveSpec {
    pub fn base() -> Self {
        Self {
            mode: Mode::Base,
            alpha: 0.0,
            beta: 0.0,
            kld_weight: 0.0,
            ilm_text_source: IlmTextSource::Unpaired,
        }
    }

    pub fn ilmt(beta: f64) -> Self {
        Self {
            mode: Mode::Ilmt,
            beta,
            ilm_text_source: IlmTextSource::PairedTranscripts,
            ..Self::base()
        }
    }

    pub fn jeit(beta: f64) -> Self {
        Self {
            mode: Mode::Jeit,
            beta,
            ..Self::base()
        }
    }

    pub fn joist(alpha: f64) -> Self {
        Self {
            mode: Mode::Joist,
            alpha,
            ..Self::base()
        }
    }

    pub fn cjjt(alpha: f64, beta: f64) -> Self {
        Self {
            mode: Mode::Cjjt,
            alpha,
            beta,
            ..Self::base()
        }
    }

    pub fn ilma(kld_weight: f64) -> Self {
        Self {
            mode: Mode::Ilma,
            beta: 1.0,
            kld_weight,
            ..Self::base()
        }
    }

    /// Published weights for `mode` and `variant`.
    pub fn default_for(mode: Mode, variant: crate::models::Variant) -> Self {
        use crate::models::Variant;
        match mode {
            Mode::Base => Self::base(),
            Mode::Ilmt => Self::ilmt(0.1),
            Mode::Jeit => Self::jeit(match variant {
                Variant::Hat => 0.2,
                Variant::Mhat => 4.0,
            }),
            Mode::Joist => Self::joist(0.25),
            Mode::Cjjt => Self::cjjt(0.25, 1.5),
            Mode::Ilma => Self::ilma(0.5),
        }
    }

    /// Rejects weights the mode does not use. Zero weights on terms the
    /// mode does use are accepted so degenerate limits stay expressible;
    /// [`ObjectiveSpec::validate_strict`] also requires them positive.
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("kld_weight", self.kld_weight),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        let m = self.mode;
        let forbid = |name: &str, w: f64| {
            if w != 0.0 {
                Err(Error::Config(format!("mode {m} does not use {name} (got {w})")))
            } else {
                Ok(())
            }
        };
        if m != Mode::Ilma {
            forbid("kld_weight", self.kld_weight)?;
        }
        match m {
            Mode::Base => {
                forbid("alpha", self.alpha)?;
                forbid("beta", self.beta)?;
            }
            Mode::Ilmt | Mode::Jeit => forbid("alpha", self.alpha)?,
            Mode::Joist => forbid("beta", self.beta)?,
            Mode::Cjjt => {}
            Mode::Ilma => {
                forbid("alpha", self.alpha)?;
                if self.beta != 1.0 {
                    return Err(Error::Config(format!(
                        "ILMA uses unit ILM weight, got beta {}",
                        self.beta
                    )));
                }
                if self.ilm_text_source != IlmTextSource::Unpaired {
                    return Err(Error::Config("ILMA adapts on unpaired text".into()));
                }
            }
        }
        Ok(())
    }

    pub fn validate_strict(&self) -> Result<()> {
        self.validate()?;
        let need = |name: &str, w: f64| {
            if w > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("mode {} needs {name} > 0", self.mode)))
            }
        };
        match self.mode {
            Mode::Ilmt | Mode::Jeit => need("beta", self.beta),
            Mode::Joist => need("alpha", self.alpha),
            Mode::Cjjt => need("alpha", self.alpha).and(need("beta", self.beta)),
            _ => Ok(()),
        }
    }

    pub fn uses_unpaired(&self) -> bool {
        self.alpha > 0.0
            || self.mode == Mode::Ilma
            || (self.beta > 0.0 && self.ilm_text_source == IlmTextSource::Unpaired)
    }

    pub fn uses_paired(&self) -> bool {
        self.mode != Mode::Ilma
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "lowercase")]
pub enum RepeatPolicy {
    Fixed { k: usize },
    Random { k_min: usize, k_max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UpsampleMaskConfig {
    pub repeat: RepeatPolicy,
    pub mask_prob: f64,
    pub seed: u64,
}

impl UpsampleMaskConfig {
    pub fn validate(&self) -> Result<()> {
        match self.repeat {
            RepeatPolicy::Fixed { k } if k >= 1 => {}
            RepeatPolicy::Random { k_min, k_max } if k_min >= 1 && k_min <= k_max => {}
            r => return Err(Error::Config(format!("invalid repeat policy {r:?}"))),
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config(format!("mask_prob {} outside [0, 1]", self.mask_prob)));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

impl Default for UpsampleMaskConfig {
    fn default() -> Self {
        Self {
            repeat: RepeatPolicy::Random { k_min: 1, k_max: 3 },
            mask_prob: 0.3,
            seed: 0,
        }
    }
}

fn upsample_mask_rng<R: Rng>(sentence: &[usize], cfg: &UpsampleMaskConfig, rng: &mut R) -> Vec<TextSymbol> {
    let mut out = Vec::new();
    for &tok in sentence {
        let k = match cfg.repeat {
            RepeatPolicy::Fixed { k } => k,
            RepeatPolicy::Random { k_min, k_max } => rng.random_range(k_min..=k_max),
        };
        for _ in 0..k {
            // Always draw so the stream does not depend on mask_prob edge cases.
            let masked = rng.random::<f64>() < cfg.mask_prob;
            out.push(if masked {
                TextSymbol::Mask
            } else {
                TextSymbol::Token(tok)
            });
        }
    }
    out
}

/// Replicates each token per the repeat policy, then masks each position
/// independently with probability `mask_prob`.
pub fn upsample_mask(sentence: &TokenSequence, cfg: &UpsampleMaskConfig) -> Vec<TextSymbol> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    upsample_mask_rng(sentence, cfg, &mut rng)
}

/// A loss value with its gradient over every model parameter.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grads: Gradients,
}

fn accumulate_paired(batch: &[Utterance], mp: &ModelParams, weight: f64, grads: &mut Gradients) -> Result<f64> {
    let mut total = 0.0;
    for (i, utt) in batch.iter().enumerate() {
        let mut tape = Tape::new(&mp.params);
        let frames = network::encode_vars(&mut tape, mp, &utt.features)?;
        let ll = transducer_loglik(&mut tape, mp, &frames, &utt.transcript).map_err(|e| match e {
            Error::Unreachable { frames, labels } => Error::NonFinite(format!(
                "paired utterance {i} unreachable (T={frames}, U={labels}): loss is +inf"
            )),
            other => other,
        })?;
        total -= tape.scalar(ll);
        tape.backward_into(ll, -weight, grads);
    }
    Ok(total)
}

fn accumulate_unpaired(
    batch: &[TokenSequence],
    mp: &ModelParams,
    cfg: &UpsampleMaskConfig,
    weight: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut total = 0.0;
    for (i, y) in batch.iter().enumerate() {
        if y.is_empty() {
            return Err(Error::Shape {
                op: "e2e_loss_unpaired",
                detail: format!("sentence {i} is empty"),
            });
        }
        let symbols = upsample_mask_rng(y, cfg, &mut rng);
        let mut tape = Tape::new(&mp.params);
        let frames = network::encode_text_vars(&mut tape, mp, &symbols)?;
        let ll = transducer_loglik(&mut tape, mp, &frames, y)?;
        total -= tape.scalar(ll);
        tape.backward_into(ll, -weight, grads);
    }
    Ok(total)
}

fn accumulate_ilm(batch: &[TokenSequence], mp: &ModelParams, weight: f64, grads: &mut Gradients) -> Result<f64> {
    let mut total = 0.0;
    for y in batch {
        if y.is_empty() {
            continue;
        }
        let mut tape = Tape::new(&mp.params);
        let g = network::label_decoder_outputs(&mut tape, mp, y)?;
        let mut picks = Vec::with_capacity(y.len());
        for (u, &tok) in y.iter().enumerate() {
            let lp = network::ilm_from_decoder(&mut tape, mp, g[u])?;
            picks.push((tape.pick(lp, tok)?, -1.0));
        }
        let nll = tape.combine(&picks);
        total += tape.scalar(nll);
        tape.backward_into(nll, weight, grads);
    }
    Ok(total)
}

/// Frozen internal-LM distributions for every position of `y`.
fn ilm_distributions(mp: &ModelParams, y: &[usize]) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new(&mp.params);
    let g = network::label_decoder_outputs(&mut tape, mp, y)?;
    (0..y.len())
        .map(|u| Ok(network::ilm_from_decoder(&mut tape, mp, g[u])?).map(|v| tape.value(v).to_vec()))
        .collect()
}

fn accumulate_kld(
    batch: &[TokenSequence],
    mp: &ModelParams,
    frozen: &ModelParams,
    weight: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    if frozen.config != mp.config {
        return Err(Error::Config("frozen snapshot has a different model config".into()));
    }
    let mut total = 0.0;
    for y in batch {
        if y.is_empty() {
            continue;
        }
        let reference = ilm_distributions(frozen, y)?;
        let mut tape = Tape::new(&mp.params);
        let g = network::label_decoder_outputs(&mut tape, mp, y)?;
        for (u, lf) in reference.iter().enumerate() {
            let la = network::ilm_from_decoder(&mut tape, mp, g[u])?;
            // KL(p_f || p_a) = sum p_f (log p_f - log p_a); d/d log p_a = -p_f
            let pf: Vec<f64> = lf.iter().map(|v| v.exp()).collect();
            let kl: f64 = pf
                .iter()
                .zip(lf.iter().zip(tape.value(la)))
                .map(|(p, (a, b))| if *p > 0.0 { p * (a - b) } else { 0.0 })
                .sum();
            let node = tape.custom_vector(kl, vec![(la, pf.iter().map(|p| -p).collect())]);
            total += kl;
            tape.backward_into(node, weight, grads);
        }
    }
    Ok(total)
}

/// `-sum log P(Y | X)` over the batch.
pub fn e2e_loss_paired(batch: &[Utterance], mp: &ModelParams) -> Result<LossValue> {
    nonempty(batch.len(), "e2e_loss_paired")?;
    let mut grads = Gradients::zeros_like(&mp.params);
    let value = accumulate_paired(batch, mp, 1.0, &mut grads)?;
    Ok(LossValue { value, grads })
}

/// `-sum log P(Y | F(Y))` with `F` = upsample, mask, text-encode, then the
/// acoustic encoder from the injection layer. Sentence `i` draws its
/// repeats and masks from one stream seeded by `cfg.seed`.
pub fn e2e_loss_unpaired(batch: &[TokenSequence], mp: &ModelParams, cfg: &UpsampleMaskConfig) -> Result<LossValue> {
    nonempty(batch.len(), "e2e_loss_unpaired")?;
    let mut grads = Gradients::zeros_like(&mp.params);
    let value = accumulate_unpaired(batch, mp, cfg, 1.0, &mut grads)?;
    Ok(LossValue { value, grads })
}

/// `-sum_Y sum_u log P_ILM(y_u | y_<u)`; only internal-LM parameters
/// receive gradient.
pub fn ilm_loss(batch: &[TokenSequence], mp: &ModelParams) -> Result<LossValue> {
    nonempty(batch.len(), "ilm_loss")?;
    let mut grads = Gradients::zeros_like(&mp.params);
    let value = accumulate_ilm(batch, mp, 1.0, &mut grads)?;
    Ok(LossValue { value, grads })
}

/// `sum over positions of KL(frozen ILM || adapted ILM)`.
pub fn kld_regularizer(batch: &[TokenSequence], mp: &ModelParams, frozen: &ModelParams) -> Result<LossValue> {
    nonempty(batch.len(), "kld_regularizer")?;
    let mut grads = Gradients::zeros_like(&mp.params);
    let value = accumulate_kld(batch, mp, frozen, 1.0, &mut grads)?;
    Ok(LossValue { value, grads })
}

fn nonempty(n: usize, op: &'static str) -> Result<()> {
    if n == 0 {
        Err(Error::Shape {
            op,
            detail: "empty batch".into(),
        })
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub e2e_paired: f64,
    pub e2e_unpaired: f64,
    pub ilm: f64,
    pub kld: f64,
}

#[derive(Debug, Clone)]
pub struct ObjectiveValue {
    pub total: f64,
    pub components: LossComponents,
    pub grads: Gradients,
}

/// The weighted objective for `spec.mode`. Terms with zero weight are not
/// evaluated, so a zero-weight mode reproduces its reduced form exactly.
/// ILMA ignores `paired` and keeps gradients on the internal-LM subset.
pub fn composite_objective(
    spec: &ObjectiveSpec,
    paired: &[Utterance],
    text: &[TokenSequence],
    mp: &ModelParams,
    frozen: Option<&ModelParams>,
    upsample: &UpsampleMaskConfig,
) -> Result<ObjectiveValue> {
    spec.validate()?;
    let mut grads = Gradients::zeros_like(&mp.params);
    let mut c = LossComponents::default();
    let mut total = 0.0;

    if spec.mode == Mode::Ilma {
        let frozen = frozen.ok_or_else(|| Error::Config("ILMA needs a frozen snapshot".into()))?;
        nonempty(text.len(), "composite_objective(ilma)")?;
        c.ilm = accumulate_ilm(text, mp, 1.0, &mut grads)?;
        total += c.ilm;
        if spec.kld_weight > 0.0 {
            c.kld = accumulate_kld(text, mp, frozen, spec.kld_weight, &mut grads)?;
            total += spec.kld_weight * c.kld;
        }
        grads.restrict(|id| mp.is_ilm(id));
        return Ok(ObjectiveValue {
            total,
            components: c,
            grads,
        });
    }

    nonempty(paired.len(), "composite_objective")?;
    c.e2e_paired = accumulate_paired(paired, mp, 1.0, &mut grads)?;
    total += c.e2e_paired;
    if spec.alpha > 0.0 {
        nonempty(text.len(), "composite_objective(unpaired)")?;
        c.e2e_unpaired = accumulate_unpaired(text, mp, upsample, spec.alpha, &mut grads)?;
        total += spec.alpha * c.e2e_unpaired;
    }
    if spec.beta > 0.0 {
        c.ilm = match spec.ilm_text_source {
            IlmTextSource::PairedTranscripts => {
                let transcripts: Vec<TokenSequence> = paired.iter().map(|u| u.transcript.clone()).collect();
                accumulate_ilm(&transcripts, mp, spec.beta, &mut grads)?
            }
            IlmTextSource::Unpaired => {
                nonempty(text.len(), "composite_objective(ilm)")?;
                accumulate_ilm(text, mp, spec.beta, &mut grads)?
            }
        };
        total += spec.beta * c.ilm;
    }
    Ok(ObjectiveValue {
        total,
        components: c,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{fill_grid, forward_backward};
    use crate::models::{ModelConfig, Variant};
    use crate::numerics::{grad_check_report, Tensor};

    const V: usize = 5;
    const DX: usize = 3;

    fn model(variant: Variant, seed: u64) -> ModelParams {
        ModelParams::init(&ModelConfig::tiny(variant, V, DX), seed).unwrap()
    }

    fn utt(rng: &mut ChaCha8Rng, t: usize, tokens: Vec<usize>) -> Utterance {
        let data = (0..t * DX).map(|_| rng.random_range(-1.0..1.0)).collect();
        Utterance {
            features: Tensor::new(vec![t, DX], data).unwrap(),
            transcript: tokens.into(),
            domain_id: 0,
        }
    }

    fn batch(seed: u64) -> (Vec<Utterance>, Vec<TokenSequence>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let paired = vec![utt(&mut rng, 3, vec![1, 4]), utt(&mut rng, 2, vec![0])];
        let text = vec![vec![2, 3].into(), vec![4, 0, 1].into()];
        (paired, text)
    }

    fn ups() -> UpsampleMaskConfig {
        UpsampleMaskConfig {
            repeat: RepeatPolicy::Random { k_min: 1, k_max: 2 },
            mask_prob: 0.3,
            seed: 11,
        }
    }

    #[test]
    fn single_blank_loss() {
        let mp = model(Variant::Hat, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = utt(&mut rng, 1, vec![]);
        let grid = fill_grid(&mp, &u.features, &u.transcript).unwrap();
        let loss = e2e_loss_paired(std::slice::from_ref(&u), &mp).unwrap();
        assert_eq!(loss.value, -grid.blank(0, 0));
    }

    #[test]
    fn paired_loss_is_additive() {
        let mp = model(Variant::Mhat, 2);
        let (paired, _) = batch(3);
        let a = e2e_loss_paired(&paired[..1], &mp).unwrap().value;
        let b = e2e_loss_paired(&paired[1..], &mp).unwrap().value;
        let ab = e2e_loss_paired(&paired, &mp).unwrap().value;
        assert!((ab - (a + b)).abs() < 1e-12);
        let direct: f64 = paired
            .iter()
            .map(|u| -forward_backward(&fill_grid(&mp, &u.features, &u.transcript).unwrap()).loglik)
            .sum();
        assert!((ab - direct).abs() < 1e-12);
    }

    #[test]
    fn upsample_examples() {
        let fixed = UpsampleMaskConfig {
            repeat: RepeatPolicy::Fixed { k: 2 },
            mask_prob: 0.0,
            seed: 5,
        };
        let t = TextSymbol::Token;
        assert_eq!(upsample_mask(&vec![7, 9].into(), &fixed), vec![t(7), t(7), t(9), t(9)]);
        let all = UpsampleMaskConfig {
            mask_prob: 1.0,
            ..fixed
        };
        let out = upsample_mask(&vec![1, 2, 3].into(), &all);
        assert_eq!(out, vec![TextSymbol::Mask; 6]);
    }

    #[test]
    fn upsample_random_statistics() {
        let cfg = UpsampleMaskConfig {
            repeat: RepeatPolicy::Random { k_min: 1, k_max: 3 },
            mask_prob: 0.3,
            seed: 77,
        };
        let sentence: TokenSequence = (0..20).map(|i| i % V).collect::<Vec<_>>().into();
        let (mut masked, mut total) = (0usize, 0usize);
        let mut k = 0u64;
        while total < 100_000 {
            let out = upsample_mask(&sentence, &cfg.with_seed(k));
            assert!(out.len() >= 20 && out.len() <= 60);
            masked += out.iter().filter(|s| **s == TextSymbol::Mask).count();
            total += out.len();
            k += 1;
        }
        let frac = masked as f64 / total as f64;
        assert!((frac - 0.3).abs() < 0.01, "{frac}");
        assert_eq!(upsample_mask(&sentence, &cfg), upsample_mask(&sentence, &cfg));
    }

    #[test]
    fn invalid_upsample_config() {
        let bad = UpsampleMaskConfig {
            repeat: RepeatPolicy::Random { k_min: 3, k_max: 2 },
            ..ups()
        };
        assert!(bad.validate().is_err());
        assert!(UpsampleMaskConfig {
            repeat: RepeatPolicy::Fixed { k: 0 },
            ..ups()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn unpaired_loss_deterministic() {
        let mp = model(Variant::Hat, 4);
        let (_, text) = batch(0);
        let a = e2e_loss_unpaired(&text, &mp, &ups()).unwrap();
        let b = e2e_loss_unpaired(&text, &mp, &ups()).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.grads.buffers(), b.grads.buffers());
        let c = e2e_loss_unpaired(&text, &mp, &ups().with_seed(12)).unwrap();
        assert_ne!(a.value, c.value);
    }

    #[test]
    fn uniform_ilm_loss() {
        let mut mp = model(Variant::Mhat, 5);
        for p in mp.params.iter_mut() {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let (_, text) = batch(0);
        let loss = ilm_loss(&text, &mp).unwrap().value;
        assert!((loss - 5.0 * (V as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ilm_gradient_stays_in_subset() {
        for variant in [Variant::Hat, Variant::Mhat] {
            let mp = model(variant, 6);
            let (_, text) = batch(0);
            let loss = ilm_loss(&text, &mp).unwrap();
            for (id, p) in mp.params.iter() {
                if !mp.is_ilm(id) {
                    assert_eq!(loss.grads.max_abs(id), 0.0, "{}", p.name);
                }
            }
            assert!(mp.params.iter().any(|(id, _)| loss.grads.max_abs(id) > 0.0));
        }
    }

    /// Independent next-token scorer written against the value-level API.
    #[test]
    fn ilm_loss_matches_value_api() {
        let mp = model(Variant::Hat, 7);
        let y: TokenSequence = vec![3, 1, 1, 4].into();
        let mut nll = 0.0;
        for u in 0..y.len() {
            let lp = crate::models::ilm_logprobs(&y[..u], &mp).unwrap();
            nll -= lp.data()[y[u]];
        }
        let loss = ilm_loss(std::slice::from_ref(&y), &mp).unwrap().value;
        assert!((loss - nll).abs() < 1e-12);
    }

    #[test]
    fn kld_properties() {
        let mp = model(Variant::Mhat, 8);
        let (_, text) = batch(0);
        let same = kld_regularizer(&text, &mp, &mp.clone()).unwrap();
        assert_eq!(same.value, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let mut other = mp.clone();
            for p in other.params.iter_mut() {
                p.tensor
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v += rng.random_range(-0.3..0.3));
            }
            assert!(kld_regularizer(&text, &other, &mp).unwrap().value >= 0.0);
        }
    }

    #[test]
    fn kld_two_symbol_by_hand() {
        // KL([0.3, 0.7] || [0.6, 0.4]) by the direct formula
        let expected = 0.3 * (0.3f64 / 0.6).ln() + 0.7 * (0.7f64 / 0.4).ln();
        assert!((expected - 0.1837868973868122).abs() < 1e-15);

        let frozen = ModelParams::init(&ModelConfig::tiny(Variant::Mhat, 2, DX), 3).unwrap();
        let mut adapted = frozen.clone();
        let w4 = adapted.params.id("joint.W4").unwrap();
        adapted.params.get_mut(w4).tensor.data_mut()[0] += 0.8;
        let y: TokenSequence = vec![1, 0].into();
        let mut by_hand = 0.0;
        for u in 0..2 {
            let p = crate::models::ilm_logprobs(&y[..u], &frozen).unwrap();
            let q = crate::models::ilm_logprobs(&y[..u], &adapted).unwrap();
            let (p, q) = (p.data(), q.data());
            by_hand += p[0].exp() * (p[0] - q[0]) + p[1].exp() * (p[1] - q[1]);
        }
        let got = kld_regularizer(std::slice::from_ref(&y), &adapted, &frozen)
            .unwrap()
            .value;
        assert!(by_hand > 0.0);
        assert!((got - by_hand).abs() < 1e-14);
    }

    fn objective(
        spec: ObjectiveSpec,
        mp: &ModelParams,
        paired: &[Utterance],
        text: &[TokenSequence],
    ) -> ObjectiveValue {
        composite_objective(&spec, paired, text, mp, None, &ups()).unwrap()
    }

    fn assert_identical(a: &ObjectiveValue, b: &ObjectiveValue) {
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        assert_eq!(a.grads.buffers(), b.grads.buffers());
    }

    #[test]
    fn reduction_identities() {
        for variant in [Variant::Hat, Variant::Mhat] {
            let m = model(variant, 9);
            let (paired, text) = batch(1);
            let base = objective(ObjectiveSpec::base(), &m, &paired, &text);
            let jeit0 = objective(ObjectiveSpec::jeit(0.0), &m, &paired, &text);
            assert_identical(&base, &jeit0);
            let jeit = objective(ObjectiveSpec::jeit(1.5), &m, &paired, &text);
            let cjjt_a0 = objective(ObjectiveSpec::cjjt(0.0, 1.5), &m, &paired, &text);
            assert_identical(&jeit, &cjjt_a0);
            let joist = objective(ObjectiveSpec::joist(0.25), &m, &paired, &text);
            let cjjt_b0 = objective(ObjectiveSpec::cjjt(0.25, 0.0), &m, &paired, &text);
            assert_identical(&joist, &cjjt_b0);
        }
    }

    #[test]
    fn ilma_gradients_only_on_subset() {
        for variant in [Variant::Hat, Variant::Mhat] {
            let mp = model(variant, 10);
            let mut frozen = mp.clone();
            for p in frozen.params.iter_mut() {
                p.tensor.data_mut()[0] += 0.2;
            }
            let (paired, text) = batch(2);
            let v = composite_objective(&ObjectiveSpec::ilma(0.5), &paired, &text, &mp, Some(&frozen), &ups()).unwrap();
            assert!(v.components.kld > 0.0);
            for (id, _) in mp.params.iter() {
                if !mp.is_ilm(id) {
                    assert_eq!(v.grads.max_abs(id), 0.0);
                }
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(ObjectiveSpec {
            beta: 0.1,
            ..ObjectiveSpec::base()
        }
        .validate()
        .is_err());
        assert!(ObjectiveSpec {
            alpha: 0.1,
            ..ObjectiveSpec::jeit(0.2)
        }
        .validate()
        .is_err());
        assert!(ObjectiveSpec {
            beta: 0.1,
            ..ObjectiveSpec::joist(0.2)
        }
        .validate()
        .is_err());
        assert!(ObjectiveSpec {
            kld_weight: 0.5,
            ..ObjectiveSpec::jeit(0.2)
        }
        .validate()
        .is_err());
        assert!(ObjectiveSpec::jeit(0.0).validate().is_ok());
        assert!(ObjectiveSpec::jeit(0.0).validate_strict().is_err());
        assert!(ObjectiveSpec::cjjt(0.25, 1.5).validate_strict().is_ok());
        assert!(ObjectiveSpec::jeit(-1.0).validate().is_err());
        assert_eq!(ObjectiveSpec::default_for(Mode::Jeit, Variant::Mhat).beta, 4.0);
        assert_eq!(ObjectiveSpec::default_for(Mode::Jeit, Variant::Hat).beta, 0.2);
        assert_eq!(ObjectiveSpec::default_for(Mode::Ilma, Variant::Hat).kld_weight, 0.5);
        assert_eq!("CJJT".parse::<Mode>().unwrap(), Mode::Cjjt);
        let (paired, text) = batch(0);
        let mp = model(Variant::Hat, 0);
        assert!(composite_objective(&ObjectiveSpec::ilma(0.5), &paired, &text, &mp, None, &ups()).is_err());
    }

    #[test]
    fn every_mode_passes_gradient_check() {
        for variant in [Variant::Hat, Variant::Mhat] {
            let mp = model(variant, 12);
            let mut frozen = mp.clone();
            for p in frozen.params.iter_mut() {
                p.tensor.data_mut().iter_mut().for_each(|v| *v *= 0.9);
            }
            let (paired, text) = batch(4);
            for mode in Mode::ALL {
                let spec = ObjectiveSpec::default_for(mode, variant);
                let f = |ps: &crate::numerics::ParamSet| {
                    let mut m = mp.clone();
                    m.params = ps.clone();
                    let v = composite_objective(&spec, &paired, &text, &m, Some(&frozen), &ups())?;
                    Ok((v.total, v.grads))
                };
                // Objectives are O(10); a 1e-4 step keeps roundoff well below the
                // smallest gradients while truncation stays O(eps^2).
                let r = grad_check_report(f, &mp.params, 1e-4, Some(6)).unwrap();
                assert!(r.max_relative_error < 1e-4, "{variant} {mode}: {r:?}");
            }
        }
    }
}
