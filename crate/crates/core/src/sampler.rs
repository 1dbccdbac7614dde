//! Truncation samplers composed with a per-step temperature.
//!
//! The truncation set is always chosen from the temperature-1 distribution
//! of the raw logits; the temperature is applied afterwards to the
//! surviving logits only, i.e. the draw is from `softmax(S(logits) / T)`.

use std::cmp::Ordering;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{check_logits, entropy, softmax_unchecked, Distribution, TokenSet};
use crate::error::{Error, Result};
use crate::provider::LayerLogits;
use crate::real::Real;

pub const DEFAULT_TOP_K: usize = 10;
pub const DEFAULT_TOP_P: f64 = 0.9;
pub const DEFAULT_TAU: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    TemperatureOnly,
    TopK,
    #[default]
    Nucleus,
    Typical,
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerKind::TemperatureOnly => "temperature-only",
            SamplerKind::TopK => "top-k",
            SamplerKind::Nucleus => "nucleus",
            SamplerKind::Typical => "typical",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub k: usize,
    pub p: f64,
    pub tau: f64,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Nucleus,
            k: DEFAULT_TOP_K,
            p: DEFAULT_TOP_P,
            tau: DEFAULT_TAU,
        }
    }
}

impl SamplerSpec {
    pub fn of_kind(kind: SamplerKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v <= 1.0;
        match self.kind {
            SamplerKind::TemperatureOnly => Ok(()),
            SamplerKind::TopK if self.k == 0 => Err(Error::arg("top-k needs k >= 1")),
            SamplerKind::Nucleus if !in_unit(self.p) => {
                Err(Error::arg(format!("nucleus p must lie in (0, 1], got {}", self.p)))
            }
            SamplerKind::Typical if !in_unit(self.tau) => {
                Err(Error::arg(format!("typical tau must lie in (0, 1], got {}", self.tau)))
            }
            _ => Ok(()),
        }
    }
}

/// Probability-descending order, ties broken by ascending token id.
fn by_prob_desc<F: Real>(probs: &[F]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..probs.len() as u32).collect();
    order.sort_by(|&a, &b| {
        probs[b as usize]
            .partial_cmp(&probs[a as usize])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Smallest prefix of `order` whose mass reaches `target`; all of `order`
/// when rounding keeps the sum just below it.
fn mass_prefix<F: Real>(probs: &[F], order: &[u32], target: F) -> TokenSet {
    let mut mass = F::zero();
    for (i, &tok) in order.iter().enumerate() {
        mass += probs[tok as usize];
        if mass >= target {
            return TokenSet::new(order[..=i].iter().copied());
        }
    }
    TokenSet::new(order.iter().copied())
}

fn truncate_probs<F: Real>(probs: &[F], spec: &SamplerSpec) -> TokenSet {
    match spec.kind {
        SamplerKind::TemperatureOnly => TokenSet::full(probs.len()),
        SamplerKind::TopK => {
            let order = by_prob_desc(probs);
            TokenSet::new(order.into_iter().take(spec.k))
        }
        SamplerKind::Nucleus => mass_prefix(probs, &by_prob_desc(probs), F::of(spec.p)),
        SamplerKind::Typical => {
            let h = entropy(&Distribution::from_normalized(probs.to_vec()));
            let score = |p: F| {
                if p > F::zero() {
                    (-p.ln() - h).abs()
                } else {
                    F::infinity()
                }
            };
            let mut order: Vec<u32> = (0..probs.len() as u32).collect();
            order.sort_by(|&a, &b| {
                let (pa, pb) = (probs[a as usize], probs[b as usize]);
                score(pa)
                    .partial_cmp(&score(pb))
                    .unwrap_or(Ordering::Equal)
                    .then(pb.partial_cmp(&pa).unwrap_or(Ordering::Equal))
                    .then(a.cmp(&b))
            });
            mass_prefix(probs, &order, F::of(spec.tau))
        }
    }
}

/// Tokens that survive `spec`, chosen on the temperature-1 distribution.
pub fn truncate<F: Real>(logits: &[F], spec: &SamplerSpec) -> Result<TokenSet> {
    spec.validate()?;
    check_logits(logits)?;
    Ok(truncate_probs(&softmax_unchecked(logits, F::one()), spec))
}

/// The exact distribution a DFD step samples from: survivors' logits
/// divided by `t` and softmaxed, zero elsewhere.
pub fn dfd_distribution<F: Real>(logits: &[F], spec: &SamplerSpec, t: F) -> Result<Distribution<F>> {
    if !(t > F::zero()) || !t.is_finite() {
        return Err(Error::arg(format!("temperature must be positive and finite, got {t}")));
    }
    let keep = truncate(logits, spec)?;
    let max = keep.iter().map(|i| logits[i as usize]).fold(F::neg_infinity(), F::max);
    let mut probs = vec![F::zero(); logits.len()];
    let mut total = F::zero();
    for i in keep.iter() {
        let e = ((logits[i as usize] - max) / t).exp();
        probs[i as usize] = e;
        total += e;
    }
    for p in &mut probs {
        *p /= total;
    }
    Ok(Distribution::from_normalized(probs))
}

/// Inverse-CDF draw over the probability-sorted support of `dist`, using
/// one uniform from `rng`.
pub fn inverse_cdf<F: Real, R: Rng + ?Sized>(dist: &Distribution<F>, rng: &mut R) -> u32 {
    let u = F::of(rng.random::<f64>());
    let probs = dist.probs();
    let order = by_prob_desc(probs);
    let mut cum = F::zero();
    let mut last = order[0];
    for tok in order {
        let p = probs[tok as usize];
        if p <= F::zero() {
            break;
        }
        cum += p;
        last = tok;
        if u < cum {
            return tok;
        }
    }
    last
}

/// One DFD draw from the output-layer logits of `step`.
pub fn dfd_sample<F: Real, R: Rng + ?Sized>(
    step: &LayerLogits<F>,
    spec: &SamplerSpec,
    t: F,
    rng: &mut R,
) -> Result<u32> {
    sample_logits(step.final_row(), spec, t, rng)
}

pub fn sample_logits<F: Real, R: Rng + ?Sized>(logits: &[F], spec: &SamplerSpec, t: F, rng: &mut R) -> Result<u32> {
    let dist = dfd_distribution(logits, spec, t)?;
    Ok(inverse_cdf(&dist, rng))
}

/// Conventional sampler in the usual warper order: temperature first, then
/// truncation on the tempered probabilities, then renormalize. Agrees with
/// [`sample_logits`] whenever `t == 1`; used as the fixed-temperature
/// reference that dynamic decoding is compared against.
pub fn sample_conventional<F: Real, R: Rng + ?Sized>(
    logits: &[F],
    spec: &SamplerSpec,
    t: F,
    rng: &mut R,
) -> Result<u32> {
    spec.validate()?;
    check_logits(logits)?;
    if !(t > F::zero()) {
        return Err(Error::arg(format!("temperature must be positive, got {t}")));
    }
    let tempered = softmax_unchecked(logits, t);
    let keep = truncate_probs(&tempered, spec);
    let mass: F = keep.iter().map(|i| tempered[i as usize]).sum();
    let mut probs = vec![F::zero(); logits.len()];
    for i in keep.iter() {
        probs[i as usize] = tempered[i as usize] / mass;
    }
    Ok(inverse_cdf(&Distribution::from_normalized(probs), rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn logits_of(p: &[f64]) -> Vec<f64> {
        p.iter().map(|v| v.ln()).collect()
    }

    #[test]
    fn top_k_with_k_beyond_vocab_is_full() {
        let spec = SamplerSpec {
            k: 100,
            ..SamplerSpec::of_kind(SamplerKind::TopK)
        };
        assert_eq!(truncate(&[0.1, 0.5, -2.0], &spec).unwrap(), TokenSet::full(3));
    }

    #[test]
    fn nucleus_examples() {
        let l = logits_of(&[0.5, 0.3, 0.15, 0.05]);
        let spec = SamplerSpec::of_kind(SamplerKind::Nucleus);
        assert_eq!(truncate(&l, &spec).unwrap().ids(), &[0, 1, 2]);
        let full = SamplerSpec { p: 1.0, ..spec };
        assert_eq!(truncate(&l, &full).unwrap(), TokenSet::full(4));
    }

    #[test]
    fn typical_prefers_tokens_near_entropy() {
        // H = 1.1437; surprisals 0.69, 1.20, 1.90, 3.00
        let l = logits_of(&[0.5, 0.3, 0.15, 0.05]);
        let spec = SamplerSpec {
            tau: 0.25,
            ..SamplerSpec::of_kind(SamplerKind::Typical)
        };
        assert_eq!(truncate(&l, &spec).unwrap().ids(), &[1]);
        let spec = SamplerSpec { tau: 0.7, ..spec };
        assert_eq!(truncate(&l, &spec).unwrap().ids(), &[0, 1]);
    }

    #[test]
    fn typical_ties_prefer_higher_probability() {
        // uniform pair + small tail: equal scores for tokens 0 and 1
        let l = vec![0.0, 0.0, -30.0];
        let spec = SamplerSpec {
            tau: 0.4,
            ..SamplerSpec::of_kind(SamplerKind::Typical)
        };
        assert_eq!(truncate(&l, &spec).unwrap().ids(), &[0]);
    }

    #[test]
    fn invalid_specs() {
        let l = [0.0, 1.0];
        assert!(truncate(
            &l,
            &SamplerSpec {
                k: 0,
                ..SamplerSpec::of_kind(SamplerKind::TopK)
            }
        )
        .is_err());
        assert!(truncate(
            &l,
            &SamplerSpec {
                p: 0.0,
                ..SamplerSpec::default()
            }
        )
        .is_err());
        assert!(truncate(
            &l,
            &SamplerSpec {
                tau: 1.5,
                ..SamplerSpec::of_kind(SamplerKind::Typical)
            }
        )
        .is_err());
    }

    #[test]
    fn single_survivor_is_certain() {
        let spec = SamplerSpec {
            k: 1,
            ..SamplerSpec::of_kind(SamplerKind::TopK)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in [0.05, 1.0, 2.5] {
            for _ in 0..100 {
                assert_eq!(sample_logits(&[0.2, 3.0, 2.9], &spec, t, &mut rng).unwrap(), 1);
            }
        }
    }

    #[test]
    fn masked_tokens_get_zero_mass() {
        let spec = SamplerSpec {
            k: 2,
            ..SamplerSpec::of_kind(SamplerKind::TopK)
        };
        let d = dfd_distribution(&[1.0, 3.0, 2.0, -1.0], &spec, 0.7).unwrap();
        assert_eq!(d.probs()[0], 0.0);
        assert_eq!(d.probs()[3], 0.0);
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let expect = 1.0 / (1.0 + (-1.0f64 / 0.7).exp());
        assert!((d.probs()[1] - expect).abs() < 1e-12);
    }

    #[test]
    fn low_temperature_concentrates_on_argmax() {
        let spec = SamplerSpec::of_kind(SamplerKind::TemperatureOnly);
        let logits = [0.0, 2.0, -1.0, 0.5, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws = 100_000;
        let hits = (0..draws)
            .filter(|_| sample_logits(&logits, &spec, 0.05, &mut rng).unwrap() == 1)
            .count();
        assert!(hits as f64 / draws as f64 >= 0.999);
    }

    #[test]
    fn unit_temperature_matches_conventional_order() {
        let logits: Vec<f64> = (0..40).map(|i| ((i * 37 % 11) as f64 * 0.7).sin() * 3.0).collect();
        for kind in [
            SamplerKind::TemperatureOnly,
            SamplerKind::TopK,
            SamplerKind::Nucleus,
            SamplerKind::Typical,
        ] {
            let spec = SamplerSpec::of_kind(kind);
            let mut a = ChaCha8Rng::seed_from_u64(3);
            let mut b = ChaCha8Rng::seed_from_u64(3);
            for _ in 0..2000 {
                assert_eq!(
                    sample_logits(&logits, &spec, 1.0, &mut a).unwrap(),
                    sample_conventional(&logits, &spec, 1.0, &mut b).unwrap()
                );
            }
        }
    }
}
