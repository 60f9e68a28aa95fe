//! Stage costs on tracking error and input moves. Rewards are their negation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardSpec {
    /// `|e|^p + lambda |du|^q`
    PowerPenalty { p: u32, q: u32, lambda: f64 },
    /// `|e|` inside the unit band, `(e^2 + 1) / 2` outside.
    Hybrid,
    /// Hybrid cost plus `lambda du^2`.
    HybridPenalty { lambda: f64 },
    /// `|e| + lambda du^2`
    AbsPenalty { lambda: f64 },
    /// `e^2 + lambda du^2`
    SquarePenalty { lambda: f64 },
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec::AbsPenalty { lambda: 0.1 }
    }
}

impl RewardSpec {
    pub fn validate(&self) -> Result<()> {
        let lambda = match *self {
            RewardSpec::PowerPenalty { p, q, lambda } => {
                if !matches!(p, 1 | 2) || !matches!(q, 1 | 2) {
                    return Err(Error::InvalidParameter(format!("exponents must be 1 or 2, got p={p} q={q}")));
                }
                lambda
            }
            RewardSpec::Hybrid => 0.0,
            RewardSpec::HybridPenalty { lambda }
            | RewardSpec::AbsPenalty { lambda }
            | RewardSpec::SquarePenalty { lambda } => lambda,
        };
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("penalty weight must be >= 0, got {lambda}")));
        }
        Ok(())
    }

    /// Stage cost for tracking error `e` and input move `du`.
    pub fn cost(&self, e: f64, du: f64) -> f64 {
        match *self {
            RewardSpec::PowerPenalty { p, q, lambda } => e.abs().powi(p as i32) + lambda * du.abs().powi(q as i32),
            RewardSpec::Hybrid => hybrid(e),
            RewardSpec::HybridPenalty { lambda } => hybrid(e) + lambda * du * du,
            RewardSpec::AbsPenalty { lambda } => e.abs() + lambda * du * du,
            RewardSpec::SquarePenalty { lambda } => e * e + lambda * du * du,
        }
    }

    pub fn reward(&self, e: f64, du: f64) -> f64 {
        -self.cost(e, du)
    }
}

/// Absolute value near the origin joined to a parabola at `|e| = 1`.
pub fn hybrid(e: f64) -> f64 {
    let a = e.abs();
    if a < 1.0 {
        a
    } else {
        0.5 * (e * e + 1.0)
    }
}

/// `lambda = 1 / |du|_max`, the normalization starting point for the
/// penalty weight.
pub fn normalized_lambda(max_abs_du: f64) -> Result<f64> {
    if !(max_abs_du > 0.0 && max_abs_du.is_finite()) {
        return Err(Error::InvalidParameter(format!("|du|_max must be positive, got {max_abs_du}")));
    }
    Ok(1.0 / max_abs_du)
}

/// Short names used on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardPreset {
    /// `|e| + 0.1 du^2`
    Abs,
    /// hybrid cost
    Hybrid,
    /// `e^2 + 0.1 du^2`
    Square,
    /// hybrid cost `+ 0.1 du^2`
    HybridDu,
}

impl RewardPreset {
    pub fn spec(self) -> RewardSpec {
        match self {
            RewardPreset::Abs => RewardSpec::AbsPenalty { lambda: 0.1 },
            RewardPreset::Hybrid => RewardSpec::Hybrid,
            RewardPreset::Square => RewardSpec::SquarePenalty { lambda: 0.1 },
            RewardPreset::HybridDu => RewardSpec::HybridPenalty { lambda: 0.1 },
        }
    }
}

impl FromStr for RewardPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "abs" => Ok(RewardPreset::Abs),
            "hybrid" => Ok(RewardPreset::Hybrid),
            "square" => Ok(RewardPreset::Square),
            "hybrid-du" => Ok(RewardPreset::HybridDu),
            other => Err(Error::Config(format!("unknown reward preset {other:?}"))),
        }
    }
}

impl fmt::Display for RewardPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            RewardPreset::Abs => "abs",
            RewardPreset::Hybrid => "hybrid",
            RewardPreset::Square => "square",
            RewardPreset::HybridDu => "hybrid-du",
        };
        f.write_str(name)
    }
}
