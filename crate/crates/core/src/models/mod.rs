//! HAT and MHAT transducers: acoustic encoder, label decoders (recurrent,
//! V2/V4 embedding), the MHAT blank decoder, joint networks, internal-LM
//! extraction and the text encoder used for encoder-side text injection.

mod config;
pub mod network;
mod params;

use serde::{Deserialize, Serialize};

pub use config::{LabelDecoderConfig, ModelConfig, TextEncoderConfig, Variant, NUM_DOMAINS, TEXT_DOMAIN};
pub use params::ModelParams;

use crate::error::{shape_err, Error, Result};
use crate::numerics::{LstmState, Tape, Tensor, Var};
use network::RecurrentMemory;
use params::LabelDecoderParams;

/// Label ids in `[0, vocab_size)`; the start token is implicit.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn new(tokens: Vec<usize>) -> Self {
        Self(tokens)
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        match self.0.iter().find(|t| **t >= vocab_size) {
            Some(t) => Err(Error::InvalidToken {
                token: *t,
                vocab: vocab_size,
            }),
            None => Ok(()),
        }
    }
}

impl std::ops::Deref for TokenSequence {
    type Target = [usize];
    fn deref(&self) -> &[usize] {
        &self.0
    }
}

impl From<Vec<usize>> for TokenSequence {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

/// One position of upsampled text fed to the text encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TextSymbol {
    Token(usize),
    Mask,
}

fn rows_to_tensor(tape: &Tape<'_>, vars: &[Var], width: usize) -> Tensor {
    let data = vars.iter().flat_map(|v| tape.value(*v).iter().copied()).collect();
    Tensor::new(vec![vars.len(), width], data).expect("consistent widths")
}

fn vec_input(tape: &mut Tape<'_>, t: &Tensor, want: usize, op: &'static str) -> Result<Var> {
    if t.len() != want {
        return Err(shape_err(op, format!("input length {} != {want}", t.len())));
    }
    Ok(tape.constant(t.data().to_vec()))
}

/// `F = Encoder(X)`: `T x d_x` features to `T x d_f` acoustic embeddings.
pub fn encode(features: &Tensor, mp: &ModelParams) -> Result<Tensor> {
    let mut tape = Tape::new(&mp.params);
    let out = network::encode_vars(&mut tape, mp, features)?;
    Ok(rows_to_tensor(&tape, &out, mp.config.encoder_dim))
}

/// Text-encoder embeddings for upsampled, masked text (`T' x d_f`).
pub fn text_encode(symbols: &[TextSymbol], mp: &ModelParams) -> Result<Tensor> {
    let mut tape = Tape::new(&mp.params);
    let out = network::text_encode_vars(&mut tape, mp, symbols)?;
    Ok(rows_to_tensor(&tape, &out, mp.config.encoder_dim))
}

/// Text embeddings after the shared upper encoder layers (`T' x d_f`).
pub fn encode_text(symbols: &[TextSymbol], mp: &ModelParams) -> Result<Tensor> {
    let mut tape = Tape::new(&mp.params);
    let out = network::encode_text_vars(&mut tape, mp, symbols)?;
    Ok(rows_to_tensor(&tape, &out, mp.config.encoder_dim))
}

/// `g^L_u = LabelDecoder(Y_{0:u-1})` for the given prefix.
pub fn label_decode(prefix: &[usize], mp: &ModelParams) -> Result<Tensor> {
    let mut tape = Tape::new(&mp.params);
    let outs = network::label_decoder_outputs(&mut tape, mp, prefix)?;
    let last = *outs.last().expect("at least g_0");
    Ok(Tensor::vector(tape.value(last).to_vec()))
}

/// `g^B_u = BlankDecoder(Y_{0:u-1})`; MHAT only.
pub fn blank_decode(prefix: &[usize], mp: &ModelParams) -> Result<Tensor> {
    let mut tape = Tape::new(&mp.params);
    let g = network::blank_decoder_output(&mut tape, mp, prefix)?;
    Ok(Tensor::vector(tape.value(g).to_vec()))
}

/// HAT emission at one cell: `(log b, log P(y | ...))`.
pub fn hat_joint(f_t: &Tensor, g_u: &Tensor, mp: &ModelParams) -> Result<(f64, Tensor)> {
    network::require_variant(mp, Variant::Hat)?;
    let mut tape = Tape::new(&mp.params);
    let f = vec_input(&mut tape, f_t, mp.config.encoder_dim, "hat_joint")?;
    let g = vec_input(&mut tape, g_u, mp.config.label_decoder.output_dim(), "hat_joint")?;
    let w = network::blank_vector(&mut tape, mp);
    let fp = network::project_frame(&mut tape, mp, f)?;
    let lp = network::project_label(&mut tape, mp, g, None)?;
    let cell = network::joint_cell(&mut tape, mp, w, &fp, &lp)?;
    Ok((
        tape.scalar(cell.blank),
        Tensor::vector(tape.value(cell.labels).to_vec()),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhatScores {
    pub blank_logprob: f64,
    /// `a_t = LogSoftmax(W3 f_t)`
    pub acoustic: Tensor,
    /// `l_u = LogSoftmax(W4 g^L_u)`
    pub ilm: Tensor,
    /// `log Softmax(a_t + l_u)`
    pub label_logprobs: Tensor,
}

pub fn mhat_scores(f_t: &Tensor, g_u: &Tensor, g_b: &Tensor, mp: &ModelParams) -> Result<MhatScores> {
    network::require_variant(mp, Variant::Mhat)?;
    let db = mp.config.blank_decoder_dim.expect("validated MHAT");
    let mut tape = Tape::new(&mp.params);
    let f = vec_input(&mut tape, f_t, mp.config.encoder_dim, "mhat_scores")?;
    let g = vec_input(&mut tape, g_u, mp.config.label_decoder.output_dim(), "mhat_scores")?;
    let gb = vec_input(&mut tape, g_b, db, "mhat_scores")?;
    let w = network::blank_vector(&mut tape, mp);
    let fp = network::project_frame(&mut tape, mp, f)?;
    let lp = network::project_label(&mut tape, mp, g, Some(gb))?;
    let cell = network::joint_cell(&mut tape, mp, w, &fp, &lp)?;
    let vec_of = |v: Var| Tensor::vector(tape.value(v).to_vec());
    Ok(MhatScores {
        blank_logprob: tape.scalar(cell.blank),
        acoustic: vec_of(fp.label),
        ilm: vec_of(lp.label),
        label_logprobs: vec_of(cell.labels),
    })
}

/// Internal-LM next-label log-distribution for `prefix`.
pub fn ilm_logprobs(prefix: &[usize], mp: &ModelParams) -> Result<Tensor> {
    let mut tape = Tape::new(&mp.params);
    let outs = network::label_decoder_outputs(&mut tape, mp, prefix)?;
    let g = *outs.last().expect("g_0");
    let l = network::ilm_from_decoder(&mut tape, mp, g)?;
    Ok(Tensor::vector(tape.value(l).to_vec()))
}

/// Decoder state for one hypothesis prefix, kept as plain values so it can
/// be cached across decoding steps.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixState {
    recurrent: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
    /// `g^L_u`
    pub label_out: Vec<f64>,
    /// `g^B_u` (MHAT)
    pub blank_out: Option<Vec<f64>>,
    /// Internal-LM log-distribution for the next label.
    pub ilm: Vec<f64>,
}

/// Emission distribution at one `(t, prefix)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Emission {
    pub blank_logprob: f64,
    /// `log[(1 - b) P(y | ...)]` for every label.
    pub label_logprobs: Vec<f64>,
}

impl ModelParams {
    fn finish_state(
        &self,
        tape: &mut Tape<'_>,
        g: Var,
        prefix: &[usize],
        recurrent: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
    ) -> Result<PrefixState> {
        let blank_out = match self.config.variant {
            Variant::Mhat => {
                let gb = network::blank_decoder_output(tape, self, prefix)?;
                Some(tape.value(gb).to_vec())
            }
            Variant::Hat => None,
        };
        let ilm = network::ilm_from_decoder(tape, self, g)?;
        Ok(PrefixState {
            recurrent,
            label_out: tape.value(g).to_vec(),
            blank_out,
            ilm: tape.value(ilm).to_vec(),
        })
    }

    /// State for the empty prefix.
    pub fn initial_state(&self) -> Result<PrefixState> {
        self.state_for(&[])
    }

    /// State computed from scratch for `prefix`.
    pub fn state_for(&self, prefix: &[usize]) -> Result<PrefixState> {
        let mut tape = Tape::new(&self.params);
        network::check_tokens(self, prefix)?;
        match &self.layout.label_decoder {
            LabelDecoderParams::Recurrent { .. } => {
                let mut memory = network::recurrent_zero(&mut tape, self);
                let mut g = None;
                for tok in std::iter::once(self.config.start_token()).chain(prefix.iter().copied()) {
                    let (m, out) = network::recurrent_feed(&mut tape, self, &memory, tok)?;
                    memory = m;
                    g = Some(out);
                }
                let snap = snapshot(&tape, &memory);
                self.finish_state(&mut tape, g.expect("start token fed"), prefix, Some(snap))
            }
            LabelDecoderParams::Window { .. } => {
                let g = network::window_decoder_output(&mut tape, self, prefix)?;
                self.finish_state(&mut tape, g, prefix, None)
            }
        }
    }

    /// Extends `state` (for `new_prefix` minus its last token) by the last
    /// token of `new_prefix`.
    pub fn advance_state(&self, state: &PrefixState, new_prefix: &[usize]) -> Result<PrefixState> {
        let Some((h, c)) = &state.recurrent else {
            return self.state_for(new_prefix);
        };
        let token = *new_prefix
            .last()
            .ok_or_else(|| Error::Config("advance_state needs a non-empty prefix".into()))?;
        network::check_tokens(self, &[token])?;
        let mut tape = Tape::new(&self.params);
        let memory = RecurrentMemory {
            states: h
                .iter()
                .zip(c)
                .map(|(h, c)| LstmState {
                    h: tape.constant(h.clone()),
                    c: tape.constant(c.clone()),
                })
                .collect(),
        };
        let (memory, g) = network::recurrent_feed(&mut tape, self, &memory, token)?;
        let snap = snapshot(&tape, &memory);
        self.finish_state(&mut tape, g, new_prefix, Some(snap))
    }

    /// Blank and label scores for acoustic frame `f_t` under `state`.
    pub fn emission(&self, f_t: &[f64], state: &PrefixState) -> Result<Emission> {
        let mut tape = Tape::new(&self.params);
        let f = tape.constant(f_t.to_vec());
        let g = tape.constant(state.label_out.clone());
        let gb = state.blank_out.as_ref().map(|b| tape.constant(b.clone()));
        let w = network::blank_vector(&mut tape, self);
        let fp = network::project_frame(&mut tape, self, f)?;
        let lp = network::project_label(&mut tape, self, g, gb)?;
        let cell = network::joint_cell(&mut tape, self, w, &fp, &lp)?;
        let emit = tape.scalar(cell.emit);
        Ok(Emission {
            blank_logprob: tape.scalar(cell.blank),
            label_logprobs: tape.value(cell.labels).iter().map(|l| emit + l).collect(),
        })
    }
}

fn snapshot(tape: &Tape<'_>, memory: &RecurrentMemory) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    memory
        .states
        .iter()
        .map(|s| (tape.value(s.h).to_vec(), tape.value(s.c).to_vec()))
        .unzip()
}
