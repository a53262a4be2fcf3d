use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of one-hot domain slots appended to every input frame: the base
/// domain, four rare-word domains and the synthetic "text" domain used on
/// the text-injection path.
pub const NUM_DOMAINS: usize = 6;
pub const TEXT_DOMAIN: usize = NUM_DOMAINS - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Hat,
    Mhat,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Hat => "hat",
            Variant::Mhat => "mhat",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hat" => Ok(Variant::Hat),
            "mhat" => Ok(Variant::Mhat),
            _ => Err(Error::Config(format!("unknown variant {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelDecoderConfig {
    Recurrent {
        layers: usize,
        width: usize,
        embed_dim: usize,
    },
    /// Conditions on the last two labels, one look-up table per slot.
    V2Embed { embed_dim: usize },
    /// Conditions on the last four labels, one look-up table per slot.
    V4Embed { embed_dim: usize },
}

impl LabelDecoderConfig {
    pub fn output_dim(&self) -> usize {
        match self {
            Self::Recurrent { width, .. } => *width,
            Self::V2Embed { embed_dim } | Self::V4Embed { embed_dim } => *embed_dim,
        }
    }

    /// History window for embedding decoders.
    pub fn window(&self) -> Option<usize> {
        match self {
            Self::Recurrent { .. } => None,
            Self::V2Embed { .. } => Some(2),
            Self::V4Embed { .. } => Some(4),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub layers: usize,
    /// Index of the first acoustic-encoder layer that consumes text
    /// embeddings (layers below it are skipped on the text path).
    pub injection_layer: usize,
    pub embed_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Label inventory size, blank excluded.
    pub vocab_size: usize,
    /// Input frame width, domain one-hot included.
    pub feature_dim: usize,
    pub encoder_dim: usize,
    pub encoder_layers: usize,
    pub label_decoder: LabelDecoderConfig,
    /// Blank decoder width; required for MHAT, forbidden for HAT.
    pub blank_decoder_dim: Option<usize>,
    /// Hidden width of the blank/label joint (HAT) or of the blank head (MHAT).
    pub joint_dim: usize,
    pub text_encoder: TextEncoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        let dims = [
            self.feature_dim,
            self.encoder_dim,
            self.encoder_layers,
            self.label_decoder.output_dim(),
            self.joint_dim,
            self.text_encoder.layers,
            self.text_encoder.embed_dim,
        ];
        if dims.contains(&0) {
            return bad("all dimensions must be at least 1");
        }
        if let LabelDecoderConfig::Recurrent { layers, embed_dim, .. } = &self.label_decoder {
            if *layers == 0 || *embed_dim == 0 {
                return bad("recurrent decoder needs layers >= 1 and embed_dim >= 1");
            }
        }
        match (self.variant, self.blank_decoder_dim) {
            (Variant::Mhat, None) => return bad("MHAT requires a blank decoder"),
            (Variant::Mhat, Some(0)) => return bad("blank decoder dim must be at least 1"),
            (Variant::Hat, Some(_)) => return bad("HAT does not take a blank decoder"),
            _ => {}
        }
        let inj = self.text_encoder.injection_layer;
        if inj == 0 || inj >= self.encoder_layers {
            return Err(Error::Config(format!(
                "injection_layer must be in 1..{} (got {inj})",
                self.encoder_layers
            )));
        }
        Ok(())
    }

    /// Start-of-sentence id in decoder embedding tables.
    pub fn start_token(&self) -> usize {
        self.vocab_size
    }

    /// Mask id in the text-encoder embedding table.
    pub fn mask_token(&self) -> usize {
        self.vocab_size
    }

    /// A small configuration used throughout the tests.
    pub fn tiny(variant: Variant, vocab_size: usize, feature_dim: usize) -> Self {
        Self {
            variant,
            vocab_size,
            feature_dim,
            encoder_dim: 5,
            encoder_layers: 2,
            label_decoder: LabelDecoderConfig::Recurrent {
                layers: 1,
                width: 4,
                embed_dim: 3,
            },
            blank_decoder_dim: (variant == Variant::Mhat).then_some(3),
            joint_dim: 4,
            text_encoder: TextEncoderConfig {
                layers: 1,
                injection_layer: 1,
                embed_dim: 3,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blank_decoder_required_iff_mhat() {
        let mut c = ModelConfig::tiny(Variant::Mhat, 4, 3);
        c.validate().unwrap();
        c.blank_decoder_dim = None;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(Variant::Hat, 4, 3);
        c.validate().unwrap();
        c.blank_decoder_dim = Some(2);
        assert!(c.validate().is_err());
    }

    #[test]
    fn rejects_degenerate_sizes() {
        let mut c = ModelConfig::tiny(Variant::Hat, 1, 3);
        assert!(c.validate().is_err());
        c.vocab_size = 3;
        c.encoder_dim = 0;
        assert!(c.validate().is_err());
        c.encoder_dim = 2;
        c.text_encoder.injection_layer = 2;
        assert!(c.validate().is_err());
    }
}
