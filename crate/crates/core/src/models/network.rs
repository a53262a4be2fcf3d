//! Tape-level forward computations shared by losses, the lattice and the
//! decoder.

use super::config::{Variant, NUM_DOMAINS, TEXT_DOMAIN};
use super::params::{JointParams, LabelDecoderParams, LookbackLayer, ModelParams};
use super::TextSymbol;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{recurrent_step, LstmState, Tape, Tensor, Var};

fn lookback_stack(tape: &mut Tape<'_>, layers: &[LookbackLayer], mut inputs: Vec<Var>) -> Result<Vec<Var>> {
    for layer in layers {
        let mut out = Vec::with_capacity(inputs.len());
        for t in 0..inputs.len() {
            let cur = tape.affine(layer.current, inputs[t], Some(layer.bias))?;
            let pre = if t > 0 {
                let prev = tape.affine(layer.previous, inputs[t - 1], None)?;
                tape.add(cur, prev)
            } else {
                cur
            };
            out.push(tape.tanh(pre));
        }
        inputs = out;
    }
    Ok(inputs)
}

/// Acoustic encoder over `T x d_x` features; one output per frame.
pub fn encode_vars(tape: &mut Tape<'_>, mp: &ModelParams, features: &Tensor) -> Result<Vec<Var>> {
    let dx = mp.config.feature_dim;
    if features.shape().len() != 2 || features.cols() != dx {
        return Err(shape_err(
            "encode",
            format!("features have shape {:?}, expected [T, {dx}]", features.shape()),
        ));
    }
    let inputs = (0..features.rows())
        .map(|t| tape.constant(features.row(t).to_vec()))
        .collect();
    lookback_stack(tape, &mp.layout.encoder, inputs)
}

/// Text encoder output for upsampled, masked text.
pub fn text_encode_vars(tape: &mut Tape<'_>, mp: &ModelParams, symbols: &[TextSymbol]) -> Result<Vec<Var>> {
    let v = mp.config.vocab_size;
    let mut domain = vec![0.0; NUM_DOMAINS];
    domain[TEXT_DOMAIN] = 1.0;
    let domain = tape.constant(domain);
    let mut inputs = Vec::with_capacity(symbols.len());
    for s in symbols {
        let row = match *s {
            TextSymbol::Token(id) if id < v => id,
            TextSymbol::Token(id) => return Err(Error::InvalidToken { token: id, vocab: v }),
            TextSymbol::Mask => mp.config.mask_token(),
        };
        let e = tape.embed(mp.layout.text_embed, row)?;
        inputs.push(tape.concat(&[e, domain]));
    }
    lookback_stack(tape, &mp.layout.text_layers, inputs)
}

/// Text embeddings pushed through the acoustic encoder from the injection
/// layer onward.
pub fn encode_text_vars(tape: &mut Tape<'_>, mp: &ModelParams, symbols: &[TextSymbol]) -> Result<Vec<Var>> {
    let embedded = text_encode_vars(tape, mp, symbols)?;
    let start = mp.config.text_encoder.injection_layer;
    lookback_stack(tape, &mp.layout.encoder[start..], embedded)
}

pub(crate) fn check_tokens(mp: &ModelParams, tokens: &[usize]) -> Result<()> {
    let v = mp.config.vocab_size;
    match tokens.iter().find(|t| **t >= v) {
        Some(t) => Err(Error::InvalidToken { token: *t, vocab: v }),
        None => Ok(()),
    }
}

/// Last `n` entries of `[y0] ++ prefix`, most recent first, padded with the
/// start token.
pub(crate) fn history_window(start: usize, prefix: &[usize], n: usize) -> Vec<usize> {
    (1..=n)
        .map(|k| {
            if k <= prefix.len() {
                prefix[prefix.len() - k]
            } else {
                start
            }
        })
        .collect()
}

fn window_output(tape: &mut Tape<'_>, mp: &ModelParams, history: &[usize]) -> Result<Var> {
    let LabelDecoderParams::Window { tables, proj, bias } = &mp.layout.label_decoder else {
        unreachable!("window decoder layout");
    };
    let parts = tables
        .iter()
        .zip(history)
        .map(|(table, tok)| tape.embed(*table, *tok))
        .collect::<Result<Vec<_>>>()?;
    let joined = tape.concat(&parts);
    let pre = tape.affine(*proj, joined, Some(*bias))?;
    Ok(tape.tanh(pre))
}

/// Recurrent decoder memory on a tape.
#[derive(Debug, Clone)]
pub struct RecurrentMemory {
    pub states: Vec<LstmState>,
}

pub(crate) fn recurrent_feed(
    tape: &mut Tape<'_>,
    mp: &ModelParams,
    memory: &RecurrentMemory,
    token: usize,
) -> Result<(RecurrentMemory, Var)> {
    let LabelDecoderParams::Recurrent { embed, cells } = &mp.layout.label_decoder else {
        unreachable!("recurrent decoder layout");
    };
    let mut x = tape.embed(*embed, token)?;
    let mut states = Vec::with_capacity(cells.len());
    for (cell, st) in cells.iter().zip(&memory.states) {
        let (next, h) = recurrent_step(tape, cell, *st, x)?;
        states.push(next);
        x = h;
    }
    Ok((RecurrentMemory { states }, x))
}

pub(crate) fn recurrent_zero(tape: &mut Tape<'_>, mp: &ModelParams) -> RecurrentMemory {
    let LabelDecoderParams::Recurrent { cells, .. } = &mp.layout.label_decoder else {
        unreachable!("recurrent decoder layout");
    };
    RecurrentMemory {
        states: cells.iter().map(|c| LstmState::zeros(tape, c.hidden)).collect(),
    }
}

/// Label-decoder outputs `g_0 .. g_U`, where `g_u` conditions on `y_0..y_u`.
pub fn label_decoder_outputs(tape: &mut Tape<'_>, mp: &ModelParams, tokens: &[usize]) -> Result<Vec<Var>> {
    check_tokens(mp, tokens)?;
    let start = mp.config.start_token();
    match &mp.layout.label_decoder {
        LabelDecoderParams::Recurrent { .. } => {
            let mut memory = recurrent_zero(tape, mp);
            let mut outs = Vec::with_capacity(tokens.len() + 1);
            for tok in std::iter::once(start).chain(tokens.iter().copied()) {
                let (m, g) = recurrent_feed(tape, mp, &memory, tok)?;
                memory = m;
                outs.push(g);
            }
            Ok(outs)
        }
        LabelDecoderParams::Window { tables, .. } => {
            let n = tables.len();
            (0..=tokens.len())
                .map(|u| window_output(tape, mp, &history_window(start, &tokens[..u], n)))
                .collect()
        }
    }
}

/// Window decoder output for an explicit prefix (embedding decoders only).
pub(crate) fn window_decoder_output(tape: &mut Tape<'_>, mp: &ModelParams, prefix: &[usize]) -> Result<Var> {
    let LabelDecoderParams::Window { tables, .. } = &mp.layout.label_decoder else {
        unreachable!("window decoder layout");
    };
    let h = history_window(mp.config.start_token(), prefix, tables.len());
    window_output(tape, mp, &h)
}

/// Blank-decoder output for one prefix (MHAT only).
pub fn blank_decoder_output(tape: &mut Tape<'_>, mp: &ModelParams, prefix: &[usize]) -> Result<Var> {
    let bd = mp.layout.blank_decoder.ok_or(Error::Variant { expected: "MHAT" })?;
    check_tokens(mp, prefix)?;
    let h = history_window(mp.config.start_token(), prefix, 2);
    let a = tape.embed(bd.embed, h[0])?;
    let b = tape.embed(bd.embed, h[1])?;
    let joined = tape.concat(&[a, b]);
    let pre = tape.affine(bd.proj, joined, Some(bd.bias))?;
    Ok(tape.tanh(pre))
}

pub fn blank_decoder_outputs(tape: &mut Tape<'_>, mp: &ModelParams, tokens: &[usize]) -> Result<Vec<Var>> {
    (0..=tokens.len())
        .map(|u| blank_decoder_output(tape, mp, &tokens[..u]))
        .collect()
}

/// Per-frame joint inputs.
#[derive(Debug, Clone, Copy)]
pub struct FrameProjection {
    /// `W1 f_t` of the blank head.
    pub blank: Var,
    /// HAT: `W1 f_t` (shared with the blank head); MHAT: `a_t`.
    pub label: Var,
}

/// Per-label-context joint inputs.
#[derive(Debug, Clone, Copy)]
pub struct LabelProjection {
    /// HAT: `W2 g^L_u`; MHAT: `W2 g^B_u`.
    pub blank: Var,
    /// HAT: `W2 g^L_u`; MHAT: `l_u`.
    pub label: Var,
}

pub fn project_frame(tape: &mut Tape<'_>, mp: &ModelParams, f: Var) -> Result<FrameProjection> {
    match mp.layout.joint {
        JointParams::Hat { w1, .. } => {
            let p = tape.affine(w1, f, None)?;
            Ok(FrameProjection { blank: p, label: p })
        }
        JointParams::Mhat { w3, w1, .. } => {
            let blank = tape.affine(w1, f, None)?;
            let logits = tape.affine(w3, f, None)?;
            let label = tape.log_softmax(logits)?;
            Ok(FrameProjection { blank, label })
        }
    }
}

/// `g_blank` is required for MHAT and ignored for HAT.
pub fn project_label(tape: &mut Tape<'_>, mp: &ModelParams, g: Var, g_blank: Option<Var>) -> Result<LabelProjection> {
    match mp.layout.joint {
        JointParams::Hat { w2, .. } => {
            let p = tape.affine(w2, g, None)?;
            Ok(LabelProjection { blank: p, label: p })
        }
        JointParams::Mhat { w4, w2, .. } => {
            let gb = g_blank.ok_or(Error::Variant { expected: "MHAT" })?;
            let blank = tape.affine(w2, gb, None)?;
            let logits = tape.affine(w4, g, None)?;
            let label = tape.log_softmax(logits)?;
            Ok(LabelProjection { blank, label })
        }
    }
}

/// The blank logit vector `w` as a node; push once per tape.
pub fn blank_vector(tape: &mut Tape<'_>, mp: &ModelParams) -> Var {
    match mp.layout.joint {
        JointParams::Hat { w_blank, .. } | JointParams::Mhat { w_blank, .. } => tape.param(w_blank),
    }
}

/// Emission scores at one lattice cell.
#[derive(Debug, Clone, Copy)]
pub struct CellScores {
    /// `log b_{t,u}`
    pub blank: Var,
    /// `log(1 - b_{t,u})`
    pub emit: Var,
    /// `log P(y | X_{1:t}, Y_{0:u})` over labels.
    pub labels: Var,
}

pub fn joint_cell(
    tape: &mut Tape<'_>,
    mp: &ModelParams,
    w: Var,
    frame: &FrameProjection,
    label: &LabelProjection,
) -> Result<CellScores> {
    let pre = tape.add(frame.blank, label.blank);
    let hidden = tape.tanh(pre);
    let z = tape.dot(w, hidden);
    let blank = tape.log_sigmoid(z);
    let emit = tape.log_one_minus_sigmoid(z);
    let labels = match mp.layout.joint {
        JointParams::Hat { w_out, .. } => {
            let logits = tape.affine(w_out, hidden, None)?;
            tape.log_softmax(logits)?
        }
        JointParams::Mhat { .. } => {
            let summed = tape.add(frame.label, label.label);
            tape.log_softmax(summed)?
        }
    };
    Ok(CellScores { blank, emit, labels })
}

/// Internal-LM log-distribution from a label-decoder output: the label
/// posterior with the encoder output zeroed (HAT) or `l_u` (MHAT).
pub fn ilm_from_decoder(tape: &mut Tape<'_>, mp: &ModelParams, g: Var) -> Result<Var> {
    match mp.layout.joint {
        JointParams::Hat { w2, w_out, .. } => {
            // W1 * 0 vanishes, leaving tanh(W2 g).
            let p = tape.affine(w2, g, None)?;
            let hidden = tape.tanh(p);
            let logits = tape.affine(w_out, hidden, None)?;
            tape.log_softmax(logits)
        }
        JointParams::Mhat { w4, .. } => {
            let logits = tape.affine(w4, g, None)?;
            tape.log_softmax(logits)
        }
    }
}

pub fn require_variant(mp: &ModelParams, variant: Variant) -> Result<()> {
    if mp.config.variant == variant {
        Ok(())
    } else {
        Err(Error::Variant {
            expected: match variant {
                Variant::Hat => "HAT",
                Variant::Mhat => "MHAT",
            },
        })
    }
}
