use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{LabelDecoderConfig, ModelConfig, Variant, NUM_DOMAINS};
use crate::error::{Error, Result};
use crate::numerics::{Container, LstmCell, ParamId, ParamSet, Tensor};

/// One causal layer `h_t = tanh(A x_t + B x_{t-1} + b)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LookbackLayer {
    pub current: ParamId,
    pub previous: ParamId,
    pub bias: ParamId,
}

impl LookbackLayer {
    fn register(
        params: &mut ParamSet,
        prefix: &str,
        input: usize,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            current: params.insert_uniform(format!("{prefix}.current"), vec![output, input], rng)?,
            previous: params.insert_uniform(format!("{prefix}.previous"), vec![output, input], rng)?,
            bias: params.insert(format!("{prefix}.bias"), Tensor::zeros(vec![output]))?,
        })
    }
}

#[derive(Debug, Clone)]
pub(crate) enum LabelDecoderParams {
    Recurrent {
        embed: ParamId,
        cells: Vec<LstmCell>,
    },
    Window {
        tables: Vec<ParamId>,
        proj: ParamId,
        bias: ParamId,
    },
}

/// V2 embedding decoder with one table shared by both history slots.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BlankDecoderParams {
    pub embed: ParamId,
    pub proj: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum JointParams {
    Hat {
        /// `W1`: acoustic projection.
        w1: ParamId,
        /// `W2`: label-embedding projection.
        w2: ParamId,
        /// `w`: blank logit vector.
        w_blank: ParamId,
        /// `W`: label output projection.
        w_out: ParamId,
    },
    Mhat {
        /// `W3`: acoustic log-probability projection.
        w3: ParamId,
        /// `W4`: internal-LM log-probability projection.
        w4: ParamId,
        w1: ParamId,
        w2: ParamId,
        w_blank: ParamId,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub encoder: Vec<LookbackLayer>,
    pub label_decoder: LabelDecoderParams,
    pub blank_decoder: Option<BlankDecoderParams>,
    pub joint: JointParams,
    pub text_embed: ParamId,
    pub text_layers: Vec<LookbackLayer>,
}

/// All trainable weights of one HAT or MHAT model.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub(crate) layout: Layout,
}

impl ModelParams {
    /// Fresh parameters, uniform in `±1/sqrt(fan_in)` from `seed`; biases zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let v = config.vocab_size;
        let df = config.encoder_dim;

        let mut encoder = Vec::with_capacity(config.encoder_layers);
        for k in 0..config.encoder_layers {
            let input = if k == 0 { config.feature_dim } else { df };
            encoder.push(LookbackLayer::register(
                &mut ps,
                &format!("encoder.layer{k}"),
                input,
                df,
                &mut rng,
            )?);
        }

        let label_decoder = match &config.label_decoder {
            LabelDecoderConfig::Recurrent {
                layers,
                width,
                embed_dim,
            } => {
                let embed = ps.insert_uniform("label_decoder.embed", vec![v + 1, *embed_dim], &mut rng)?;
                let mut cells = Vec::with_capacity(*layers);
                for k in 0..*layers {
                    let input = if k == 0 { *embed_dim } else { *width };
                    cells.push(LstmCell::register(
                        &mut ps,
                        &format!("label_decoder.lstm{k}"),
                        input,
                        *width,
                        &mut rng,
                    )?);
                }
                LabelDecoderParams::Recurrent { embed, cells }
            }
            LabelDecoderConfig::V2Embed { embed_dim } | LabelDecoderConfig::V4Embed { embed_dim } => {
                let n = config.label_decoder.window().expect("window decoder");
                let mut tables = Vec::with_capacity(n);
                for k in 0..n {
                    tables.push(ps.insert_uniform(
                        format!("label_decoder.embed{k}"),
                        vec![v + 1, *embed_dim],
                        &mut rng,
                    )?);
                }
                let proj = ps.insert_uniform("label_decoder.proj", vec![*embed_dim, n * embed_dim], &mut rng)?;
                let bias = ps.insert("label_decoder.bias", Tensor::zeros(vec![*embed_dim]))?;
                LabelDecoderParams::Window { tables, proj, bias }
            }
        };
        let dg = config.label_decoder.output_dim();

        let blank_decoder = match config.blank_decoder_dim {
            Some(db) => Some(BlankDecoderParams {
                embed: ps.insert_uniform("blank_decoder.embed", vec![v + 1, db], &mut rng)?,
                proj: ps.insert_uniform("blank_decoder.proj", vec![db, 2 * db], &mut rng)?,
                bias: ps.insert("blank_decoder.bias", Tensor::zeros(vec![db]))?,
            }),
            None => None,
        };

        let dh = config.joint_dim;
        let joint = match config.variant {
            Variant::Hat => JointParams::Hat {
                w1: ps.insert_uniform("joint.W1", vec![dh, df], &mut rng)?,
                w2: ps.insert_uniform("joint.W2", vec![dh, dg], &mut rng)?,
                w_blank: ps.insert_uniform("joint.w", vec![dh], &mut rng)?,
                w_out: ps.insert_uniform("joint.W", vec![v, dh], &mut rng)?,
            },
            Variant::Mhat => {
                let db = config.blank_decoder_dim.expect("validated");
                JointParams::Mhat {
                    w3: ps.insert_uniform("joint.W3", vec![v, df], &mut rng)?,
                    w4: ps.insert_uniform("joint.W4", vec![v, dg], &mut rng)?,
                    w1: ps.insert_uniform("blank_joint.W1", vec![dh, df], &mut rng)?,
                    w2: ps.insert_uniform("blank_joint.W2", vec![dh, db], &mut rng)?,
                    w_blank: ps.insert_uniform("blank_joint.w", vec![dh], &mut rng)?,
                }
            }
        };

        let te = &config.text_encoder;
        let text_embed = ps.insert_uniform("text_encoder.embed", vec![v + 1, te.embed_dim], &mut rng)?;
        let mut text_layers = Vec::with_capacity(te.layers);
        for k in 0..te.layers {
            let input = if k == 0 { te.embed_dim + NUM_DOMAINS } else { df };
            text_layers.push(LookbackLayer::register(
                &mut ps,
                &format!("text_encoder.layer{k}"),
                input,
                df,
                &mut rng,
            )?);
        }

        Ok(Self {
            config: config.clone(),
            params: ps,
            layout: Layout {
                encoder,
                label_decoder,
                blank_decoder,
                joint,
                text_embed,
                text_layers,
            },
        })
    }

    /// Rebuilds the layout for `config` and loads every parameter from
    /// `container`.
    pub fn from_container(config: &ModelConfig, container: &Container) -> Result<Self> {
        let mut mp = Self::init(config, 0)?;
        container.load_into(&mut mp.params)?;
        Ok(mp)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::from_params(&self.params);
        c.meta.insert(
            "model_config".into(),
            serde_json::to_string(&self.config).expect("config serializes"),
        );
        c
    }

    /// Loads a checkpoint written by [`ModelParams::to_container`].
    pub fn from_checkpoint(container: &Container) -> Result<Self> {
        let cfg = container
            .meta
            .get("model_config")
            .ok_or_else(|| Error::Format("checkpoint has no model_config".into()))?;
        let config: ModelConfig = serde_json::from_str(cfg).map_err(|e| Error::Format(e.to_string()))?;
        Self::from_container(&config, container)
    }

    /// Whether `name` belongs to the internal-LM subset: the label decoder
    /// plus `W2`/`W` for HAT (the label path of the joint with the encoder
    /// zeroed), or the label decoder plus `W4` for MHAT.
    pub fn is_ilm_name(variant: Variant, name: &str) -> bool {
        if name.starts_with("label_decoder.") {
            return true;
        }
        match variant {
            Variant::Hat => name == "joint.W2" || name == "joint.W",
            Variant::Mhat => name == "joint.W4",
        }
    }

    pub fn is_ilm(&self, id: ParamId) -> bool {
        Self::is_ilm_name(self.config.variant, &self.params.get(id).name)
    }

    pub fn ilm_parameter_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(id, _)| self.is_ilm(*id))
            .map(|(_, p)| p.name.clone())
            .collect()
    }

    /// Marks only the internal-LM subset as trainable (or restores all).
    pub fn set_ilm_only_trainable(&mut self, ilm_only: bool) {
        let variant = self.config.variant;
        for p in self.params.iter_mut() {
            p.trainable = !ilm_only || Self::is_ilm_name(variant, &p.name);
        }
    }
}
