//! Probability primitives: temperature softmax, entropy and KL divergence
//! restricted to a token subset.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// A validated probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution<F> {
    probs: Vec<F>,
}

impl<F: Real> Distribution<F> {
    /// Validates `probs`: every entry in `[0, 1]` and total mass within
    /// `1e-6` of one (widened to `V * eps` for single precision).
    pub fn new(probs: Vec<F>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::input("distribution needs at least two entries"));
        }
        let mut total = F::zero();
        for (i, &p) in probs.iter().enumerate() {
            if !(p >= F::zero() && p <= F::one()) {
                return Err(Error::input(format!("probability {p} at index {i} outside [0, 1]")));
            }
            total += p;
        }
        let tol = F::of(1e-6).max(F::epsilon() * F::of(probs.len() as f64));
        if (total - F::one()).abs() > tol {
            return Err(Error::input(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { probs })
    }

    pub(crate) fn from_normalized(probs: Vec<F>) -> Self {
        debug_assert!(probs.len() >= 2);
        Self { probs }
    }

    pub fn probs(&self) -> &[F] {
        &self.probs
    }

    pub fn into_probs(self) -> Vec<F> {
        self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn get(&self, token: u32) -> F {
        self.probs[token as usize]
    }

    /// Index of the largest probability; the lowest index wins ties.
    pub fn argmax(&self) -> u32 {
        argmax(&self.probs)
    }

    pub fn max(&self) -> F {
        self.probs.iter().copied().fold(F::neg_infinity(), F::max)
    }
}

/// Sorted, duplicate-free set of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSet(Vec<u32>);

impl TokenSet {
    pub fn new(ids: impl IntoIterator<Item = u32>) -> Self {
        let mut ids: Vec<u32> = ids.into_iter().collect();
        ids.sort_unstable();
        ids.dedup();
        Self(ids)
    }

    /// Every id in `0..vocab_size`.
    pub fn full(vocab_size: usize) -> Self {
        Self((0..vocab_size as u32).collect())
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, id: u32) -> bool {
        self.0.binary_search(&id).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.0.iter().copied()
    }

    fn check_range(&self, vocab_size: usize) -> Result<()> {
        match self.0.last() {
            Some(&last) if last as usize >= vocab_size => Err(Error::arg(format!(
                "token {last} outside vocabulary of size {vocab_size}"
            ))),
            _ => Ok(()),
        }
    }
}

/// How the KL sum over a restricted support is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlMode {
    /// `max(0, sum_{x in S} p(x) ln(p(x) / max(q(x), floor)))`, the sum as
    /// written over the raw probabilities, floored at zero.
    #[default]
    LiteralClamped,
    /// Both distributions renormalized over the support, then a proper KL.
    Renormalized,
}

pub const DEFAULT_Q_FLOOR: f64 = 1e-10;

pub(crate) fn argmax<F: Real>(values: &[F]) -> u32 {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best as u32
}

pub(crate) fn check_logits<F: Real>(logits: &[F]) -> Result<()> {
    if logits.len() < 2 {
        return Err(Error::input(format!(
            "logit vector needs at least two entries, got {}",
            logits.len()
        )));
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::input(format!("non-finite logit {} at index {i}", logits[i])));
    }
    Ok(())
}

/// `softmax(logits / t)` with max subtraction.
pub fn softmax_with_temperature<F: Real>(logits: &[F], t: F) -> Result<Distribution<F>> {
    if !(t > F::zero()) || !t.is_finite() {
        return Err(Error::arg(format!("temperature must be positive and finite, got {t}")));
    }
    check_logits(logits)?;
    Ok(Distribution::from_normalized(softmax_unchecked(logits, t)))
}

pub(crate) fn softmax_unchecked<F: Real>(logits: &[F], t: F) -> Vec<F> {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let mut out: Vec<F> = logits.iter().map(|&l| ((l - max) / t).exp()).collect();
    let total: F = out.iter().copied().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy<F: Real>(dist: &Distribution<F>) -> F {
    -dist
        .probs
        .iter()
        .filter(|&&p| p > F::zero())
        .map(|&p| p * p.ln())
        .sum::<F>()
}

/// KL divergence of `q` from `p` evaluated only over `support`.
pub fn restricted_kl<F: Real>(
    p: &Distribution<F>,
    q: &Distribution<F>,
    support: &TokenSet,
    mode: KlMode,
    q_floor: F,
) -> Result<F> {
    if support.is_empty() {
        return Err(Error::arg("KL support is empty"));
    }
    if p.len() != q.len() {
        return Err(Error::arg(format!(
            "distribution lengths differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    if !(q_floor > F::zero()) {
        return Err(Error::arg(format!("q_floor must be positive, got {q_floor}")));
    }
    support.check_range(p.len())?;

    match mode {
        KlMode::LiteralClamped => {
            let mut sum = F::zero();
            for x in support.iter() {
                let px = p.get(x);
                if px > F::zero() {
                    sum += px * (px / q.get(x).max(q_floor)).ln();
                }
            }
            Ok(sum.max(F::zero()))
        }
        KlMode::Renormalized => {
            let p_mass: F = support.iter().map(|x| p.get(x)).sum();
            if p_mass <= F::zero() {
                return Ok(F::zero());
            }
            let q_mass: F = support.iter().map(|x| q.get(x).max(q_floor)).sum();
            let mut sum = F::zero();
            for x in support.iter() {
                let px = p.get(x) / p_mass;
                if px > F::zero() {
                    let qx = q.get(x).max(q_floor) / q_mass;
                    sum += px * (px / qx).ln();
                }
            }
            // roundoff can leave a value a few ulps below zero
            Ok(sum.max(F::zero()))
        }
    }
}
