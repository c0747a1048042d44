use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Three-way label set in the order neutral, entailment, contradiction.
pub const THREE_WAY_LABELS: [&str; 3] = ["neutral", "entailment", "contradiction"];
/// Two-way label set used by SciTail.
pub const TWO_WAY_LABELS: [&str; 2] = ["neutral", "entails"];

/// Number of matching views (concat, sub, mul).
pub const NUM_VIEWS: usize = 3;

/// Model variant.
///
/// * `Full`: one matching view per turn, gated memory update.
/// * `NoMemory`: one view per turn, no memory; turn outputs are concatenated.
/// * `GateRelu`: like `Full` but memory is `ReLU(W_m [c ; m])`.
/// * `MixedSingleTurn`: the three views concatenated and inferred in one pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    NoMemory,
    GateRelu,
    MixedSingleTurn,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoMemory,
        Variant::GateRelu,
        Variant::MixedSingleTurn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoMemory => "no_memory",
            Variant::GateRelu => "gate_relu",
            Variant::MixedSingleTurn => "mixed_single_turn",
        }
    }

    /// Whether the variant consumes one matching view per turn.
    pub fn is_turn_per_view(self) -> bool {
        !matches!(self, Variant::MixedSingleTurn)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Word embedding width.
    pub embed_dim: usize,
    /// Hidden units per LSTM direction.
    pub hidden: usize,
    pub turns: usize,
    pub variant: Variant,
    pub mlp_hidden: usize,
    pub dropout: f64,
    pub labels: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 300,
            hidden: 300,
            turns: 3,
            variant: Variant::Full,
            mlp_hidden: 300,
            dropout: 0.2,
            labels: THREE_WAY_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl ModelConfig {
    /// Small dimensions for gradient checks and oracle comparisons.
    pub fn tiny(variant: Variant) -> Self {
        ModelConfig {
            embed_dim: 4,
            hidden: 4,
            mlp_hidden: 4,
            variant,
            dropout: 0.0,
            ..Self::default()
        }
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    /// Width `H` of the per-token inference output.
    pub fn inference_width(&self) -> usize {
        match self.variant {
            Variant::NoMemory => NUM_VIEWS * 2 * self.hidden,
            _ => 2 * self.hidden,
        }
    }

    /// Width of the pooled feature vector fed to the classifier.
    pub fn pooled_width(&self) -> usize {
        4 * self.inference_width()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if self.turns == 0 {
            return Err(Error::Config("turns must be at least 1".into()));
        }
        if self.variant.is_turn_per_view() && self.turns != NUM_VIEWS {
            return Err(Error::Config(format!(
                "variant {} needs turns = {NUM_VIEWS} (one per matching view), got {}",
                self.variant, self.turns
            )));
        }
        if !(2..=3).contains(&self.labels.len()) {
            return Err(Error::Config(format!(
                "label set must have 2 or 3 entries, got {}",
                self.labels.len()
            )));
        }
        for (i, l) in self.labels.iter().enumerate() {
            if self.labels[..i].contains(l) {
                return Err(Error::Config(format!("duplicate label `{l}`")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reported_settings() {
        let c = ModelConfig::default();
        assert_eq!((c.embed_dim, c.hidden, c.turns, c.mlp_hidden), (300, 300, 3, 300));
        assert_eq!(c.dropout, 0.2);
        assert_eq!(c.num_labels(), 3);
        c.validate().unwrap();
    }

    #[test]
    fn widths_per_variant() {
        let mut c = ModelConfig::default();
        assert_eq!(c.inference_width(), 600);
        assert_eq!(c.pooled_width(), 2400);
        c.variant = Variant::NoMemory;
        assert_eq!(c.inference_width(), 1800);
    }

    #[test]
    fn turn_count_must_match_views() {
        let mut c = ModelConfig::tiny(Variant::Full);
        c.turns = 2;
        assert!(c.validate().is_err());
        c.variant = Variant::MixedSingleTurn;
        c.validate().unwrap();
        c.turns = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn label_set_checks() {
        let mut c = ModelConfig::tiny(Variant::Full);
        c.labels = vec!["a".into()];
        assert!(c.validate().is_err());
        c.labels = vec!["a".into(), "a".into()];
        assert!(c.validate().is_err());
        c.labels = TWO_WAY_LABELS.iter().map(|s| s.to_string()).collect();
        c.validate().unwrap();
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        assert!("esim".parse::<Variant>().is_err());
    }
}
