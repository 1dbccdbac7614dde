//! Knowledge-awareness (KA) positioning.
//!
//! At each step the final layer's distribution picks a plausible head set
//! (tokens with probability at least `alpha` times the maximum). Every
//! internal layer's logit-lens distribution is compared against the final
//! one over that set, and KA is the mean of those divergences over a chosen
//! subset of internal layers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dist::{restricted_kl, softmax_with_temperature, Distribution, KlMode, TokenSet};
use crate::error::{Error, Result};
use crate::provider::LayerLogits;
use crate::real::Real;

pub const DEFAULT_ALPHA: f64 = 0.1;

/// Which internal layers (1-based, `1..=N-1`) feed the KA mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LayerSet {
    #[default]
    All,
    /// Layers `1..=floor((N-1)/2)`.
    Low,
    /// Layers `floor((N-1)/2)+1..=N-1`.
    High,
    /// Inclusive 1-based range.
    Range(usize, usize),
}

impl LayerSet {
    /// 0-based indices into a per-layer KL vector of length `internal`.
    pub fn indices(&self, internal: usize) -> Result<std::ops::Range<usize>> {
        let half = internal / 2;
        let r = match *self {
            LayerSet::All => 0..internal,
            LayerSet::Low => 0..half,
            LayerSet::High => half..internal,
            LayerSet::Range(lo, hi) => {
                if lo == 0 || hi < lo || hi > internal {
                    return Err(Error::arg(format!(
                        "layer range {lo}-{hi} outside internal layers 1-{internal}"
                    )));
                }
                lo - 1..hi
            }
        };
        if r.is_empty() {
            return Err(Error::arg(format!(
                "layer set `{self}` selects no layers out of {internal}"
            )));
        }
        Ok(r)
    }
}

impl fmt::Display for LayerSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSet::All => f.write_str("all"),
            LayerSet::Low => f.write_str("low"),
            LayerSet::High => f.write_str("high"),
            LayerSet::Range(lo, hi) => write!(f, "range:{lo}-{hi}"),
        }
    }
}

impl FromStr for LayerSet {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "all" => Ok(LayerSet::All),
            "low" => Ok(LayerSet::Low),
            "high" => Ok(LayerSet::High),
            _ => {
                let body = s
                    .strip_prefix("range:")
                    .ok_or_else(|| format!("expected all, low, high or range:LO-HI, got {s:?}"))?;
                let (lo, hi) = body
                    .split_once('-')
                    .ok_or_else(|| format!("range must look like range:LO-HI, got {s:?}"))?;
                let lo = lo.trim().parse().map_err(|e| format!("bad range start: {e}"))?;
                let hi = hi.trim().parse().map_err(|e| format!("bad range end: {e}"))?;
                Ok(LayerSet::Range(lo, hi))
            }
        }
    }
}

impl TryFrom<String> for LayerSet {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<LayerSet> for String {
    fn from(l: LayerSet) -> Self {
        l.to_string()
    }
}

/// Inputs of the KA computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KaParams<F> {
    pub alpha: F,
    pub layers: LayerSet,
    pub mode: KlMode,
    pub q_floor: F,
}

impl<F: Real> Default for KaParams<F> {
    fn default() -> Self {
        Self {
            alpha: F::of(DEFAULT_ALPHA),
            layers: LayerSet::All,
            mode: KlMode::LiteralClamped,
            q_floor: F::of(crate::dist::DEFAULT_Q_FLOOR),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KaSignal<F> {
    pub support: TokenSet,
    /// Entry `i` compares layer `i + 1` against the output layer.
    pub per_layer_kl: Vec<F>,
    pub ka: F,
}

/// Tokens whose probability is at least `alpha` times the maximum.
pub fn head_support<F: Real>(final_dist: &Distribution<F>, alpha: F) -> Result<TokenSet> {
    if !(alpha > F::zero() && alpha <= F::one()) {
        return Err(Error::arg(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    let threshold = alpha * final_dist.max();
    Ok(TokenSet::new(
        final_dist
            .probs()
            .iter()
            .enumerate()
            .filter(|(_, &p)| p >= threshold)
            .map(|(i, _)| i as u32),
    ))
}

/// Restricted KL of every internal layer against the output layer.
pub fn layer_kls<F: Real>(step: &LayerLogits<F>, support: &TokenSet, mode: KlMode, q_floor: F) -> Result<Vec<F>> {
    let n = step.num_layers();
    let p = softmax_with_temperature(step.final_row(), F::one())?;
    (0..n - 1)
        .map(|i| {
            let q = softmax_with_temperature(step.row(i), F::one())?;
            restricted_kl(&p, &q, support, mode, q_floor)
        })
        .collect()
}

/// Mean of the selected entries.
pub fn aggregate_ka<F: Real>(per_layer_kl: &[F], layers: LayerSet) -> Result<F> {
    let range = layers.indices(per_layer_kl.len())?;
    let n = F::of(range.len() as f64);
    Ok(per_layer_kl[range].iter().copied().sum::<F>() / n)
}

/// Full KA pipeline for one step.
pub fn knowledge_awareness<F: Real>(step: &LayerLogits<F>, params: &KaParams<F>) -> Result<KaSignal<F>> {
    let final_dist = softmax_with_temperature(step.final_row(), F::one())?;
    let support = head_support(&final_dist, params.alpha)?;
    let per_layer_kl = layer_kls(step, &support, params.mode, params.q_floor)?;
    let ka = aggregate_ka(&per_layer_kl, params.layers)?;
    Ok(KaSignal {
        support,
        per_layer_kl,
        ka,
    })
}
