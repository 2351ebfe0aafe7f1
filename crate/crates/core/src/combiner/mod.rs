//! Image/text fusion network and its ablation variants.
//!
//! The full network outputs `(1 - lambda) * img + lambda * txt + v`, where the
//! convex coefficient `lambda` comes from a sigmoid-gated branch and `v` is a
//! learned residual. Both branches read the concatenation of ReLU projections
//! of the two inputs.

mod checkpoint;
mod network;
mod params;

use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use network::{Forward, ForwardCache, Gradients, Phase};
pub use params::{
    CombinerParams, Linear, DEFAULT_DROPOUT, HIDDEN_FACTOR, PROJECTION_FACTOR, TENSOR_NAMES,
};

use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    /// Gated convex combination plus residual.
    Full,
    /// `img + txt`; no parameters involved.
    Sum,
    /// Gated convex combination without the residual.
    ConvexOnly,
    /// Residual branch alone.
    ResidualOnly,
    /// Fixed 0.5 / 0.5 combination plus residual.
    StaticSkip,
}

impl CombineMode {
    pub const ALL: [CombineMode; 5] = [
        CombineMode::Full,
        CombineMode::Sum,
        CombineMode::ConvexOnly,
        CombineMode::ResidualOnly,
        CombineMode::StaticSkip,
    ];

    pub fn uses_gate(self) -> bool {
        matches!(self, CombineMode::Full | CombineMode::ConvexOnly)
    }

    pub fn uses_residual(self) -> bool {
        matches!(
            self,
            CombineMode::Full | CombineMode::ResidualOnly | CombineMode::StaticSkip
        )
    }

    pub fn is_trainable(self) -> bool {
        self != CombineMode::Sum
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CombineMode::Full => "full",
            CombineMode::Sum => "sum",
            CombineMode::ConvexOnly => "convex_only",
            CombineMode::ResidualOnly => "residual_only",
            CombineMode::StaticSkip => "static_skip",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            CombineMode::Full => 0,
            CombineMode::Sum => 1,
            CombineMode::ConvexOnly => 2,
            CombineMode::ResidualOnly => 3,
            CombineMode::StaticSkip => 4,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.code() == code)
    }
}

impl std::fmt::Display for CombineMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CombineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown combine mode {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_codes_and_names_round_trip() {
        for m in CombineMode::ALL {
            assert_eq!(CombineMode::from_code(m.code()), Some(m));
            assert_eq!(m.as_str().parse::<CombineMode>().unwrap(), m);
        }
        assert_eq!(
            "static-skip".parse::<CombineMode>().unwrap(),
            CombineMode::StaticSkip
        );
        assert!("blend".parse::<CombineMode>().is_err());
    }
}
