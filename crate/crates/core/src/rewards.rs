//! Reward shapers: binary verifiable rewards and their confidence-weighted,
//! sign-penalized and clipped variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Rollout;

/// Clipping half-width used when none is given.
pub const DEFAULT_EPSILON: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant")]
pub enum RewardSpec {
    /// 1 for correct, 0 for incorrect.
    Binary01,
    /// +1 for correct, -1 for incorrect.
    BinarySign,
    /// `s` for correct, 0 for incorrect.
    ConfWeighted,
    /// `+s` for correct, `-s` for incorrect.
    ConfSign,
    /// `+s` clipped to `[1-eps, 1]` for correct, `-s` clipped to
    /// `[-1, eps-1]` for incorrect.
    ConfClip { epsilon: f64 },
}

impl RewardSpec {
    pub fn conf_clip(epsilon: f64) -> Result<Self> {
        let spec = RewardSpec::ConfClip { epsilon };
        spec.validate()?;
        Ok(spec)
    }

    pub fn all_variants(epsilon: f64) -> [RewardSpec; 5] {
        [
            RewardSpec::Binary01,
            RewardSpec::BinarySign,
            RewardSpec::ConfWeighted,
            RewardSpec::ConfSign,
            RewardSpec::ConfClip { epsilon },
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            RewardSpec::Binary01 => "Binary01",
            RewardSpec::BinarySign => "BinarySign",
            RewardSpec::ConfWeighted => "ConfWeighted",
            RewardSpec::ConfSign => "ConfSign",
            RewardSpec::ConfClip { .. } => "ConfClip",
        }
    }

    /// Builds a spec from its variant name; `epsilon` only matters for ConfClip.
    pub fn from_parts(variant: &str, epsilon: f64) -> Result<Self> {
        let spec = match variant {
            "Binary01" => RewardSpec::Binary01,
            "BinarySign" => RewardSpec::BinarySign,
            "ConfWeighted" => RewardSpec::ConfWeighted,
            "ConfSign" => RewardSpec::ConfSign,
            "ConfClip" => RewardSpec::ConfClip { epsilon },
            other => {
                return Err(Error::invalid(format!("unknown reward variant `{other}`")));
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    /// ConfClip accepts `0 < epsilon <= 1`; `epsilon = 1` is the unclipped
    /// sign reward.
    pub fn validate(&self) -> Result<()> {
        if let RewardSpec::ConfClip { epsilon } = *self {
            if !(epsilon > 0.0 && epsilon <= 1.0) {
                return Err(Error::invalid(format!(
                    "ConfClip epsilon must lie in (0, 1], got {epsilon}"
                )));
            }
        }
        Ok(())
    }

    pub fn uses_confidence(&self) -> bool {
        !matches!(self, RewardSpec::Binary01 | RewardSpec::BinarySign)
    }
}

impl fmt::Display for RewardSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RewardSpec::ConfClip { epsilon } => write!(f, "ConfClip(eps={epsilon})"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for RewardSpec {
    type Err = Error;

    /// Parses `Name` or `ConfClip(eps=0.2)`.
    fn from_str(s: &str) -> Result<Self> {
        if let Some(inner) = s.strip_prefix("ConfClip(").and_then(|r| r.strip_suffix(')')) {
            let eps = inner.strip_prefix("eps=").unwrap_or(inner);
            let eps: f64 = eps
                .parse()
                .map_err(|_| Error::invalid(format!("bad epsilon in `{s}`")))?;
            return RewardSpec::conf_clip(eps);
        }
        RewardSpec::from_parts(s, DEFAULT_EPSILON)
    }
}

/// A shaped reward together with the inputs that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapedReward {
    pub value: f64,
    pub correct: bool,
    pub confidence: f64,
}

/// Length-normalized sequence probability: the geometric mean of the
/// rollout's per-token probabilities.
pub fn confidence(rollout: &Rollout) -> Result<f64> {
    confidence_from_logprobs(&rollout.token_logprobs)
}

pub fn confidence_from_logprobs(token_logprobs: &[f64]) -> Result<f64> {
    if token_logprobs.is_empty() {
        return Err(Error::invalid("confidence of an empty rollout"));
    }
    let mean = token_logprobs.iter().sum::<f64>() / token_logprobs.len() as f64;
    Ok(mean.exp())
}

fn clip(x: f64, lo: f64, hi: f64) -> f64 {
    hi.min(lo.max(x))
}

pub fn shape_reward(spec: RewardSpec, correct: bool, s: f64) -> Result<f64> {
    if !(s > 0.0 && s <= 1.0) {
        return Err(Error::invalid(format!("confidence must lie in (0, 1], got {s}")));
    }
    spec.validate()?;
    let value = match (spec, correct) {
        (RewardSpec::Binary01, true) => 1.0,
        (RewardSpec::Binary01, false) => 0.0,
        (RewardSpec::BinarySign, true) => 1.0,
        (RewardSpec::BinarySign, false) => -1.0,
        (RewardSpec::ConfWeighted, true) => s,
        (RewardSpec::ConfWeighted, false) => 0.0,
        (RewardSpec::ConfSign, true) => s,
        (RewardSpec::ConfSign, false) => -s,
        (RewardSpec::ConfClip { epsilon }, true) => clip(s, 1.0 - epsilon, 1.0),
        (RewardSpec::ConfClip { epsilon }, false) => clip(-s, -1.0, epsilon - 1.0),
    };
    Ok(value)
}

/// Derivative of the shaped reward with respect to the confidence `s`.
///
/// Clip kinks report the derivative of the clamped side, i.e. 0.
pub fn shape_reward_ds(spec: RewardSpec, correct: bool, s: f64) -> f64 {
    let sign = if correct { 1.0 } else { -1.0 };
    match spec {
        RewardSpec::Binary01 | RewardSpec::BinarySign => 0.0,
        RewardSpec::ConfWeighted => {
            if correct {
                1.0
            } else {
                0.0
            }
        }
        RewardSpec::ConfSign => sign,
        RewardSpec::ConfClip { epsilon } => {
            if s > 1.0 - epsilon && s < 1.0 {
                sign
            } else {
                0.0
            }
        }
    }
}

pub fn shape(spec: RewardSpec, correct: bool, rollout: &Rollout) -> Result<ShapedReward> {
    let s = confidence(rollout)?;
    Ok(ShapedReward {
        value: shape_reward(spec, correct, s)?,
        correct,
        confidence: s,
    })
}
