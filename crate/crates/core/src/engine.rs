//! Per-step generation loop: provider step, KA, temperature, sample, append.

use std::collections::{BTreeSet, HashSet};
use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::focus::{calibrate_t0, FocusConfig};
use crate::ka::knowledge_awareness;
use crate::provider::LayerProvider;
use crate::real::Real;
use crate::sampler::{dfd_sample, sample_conventional, SamplerSpec};

pub const RECORD_SCHEMA: u32 = 1;
pub const DEFAULT_MAX_TOKENS: usize = 256;
pub const DEFAULT_NUM_SAMPLES: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prompt {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    pub tokens: Vec<u32>,
}

impl Prompt {
    pub fn new(id: impl Into<String>, tokens: Vec<u32>) -> Self {
        Self {
            id: id.into(),
            dataset: None,
            tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig<F> {
    pub max_tokens: usize,
    pub stop_tokens: BTreeSet<u32>,
    pub num_samples: usize,
    pub base_seed: u64,
    pub focus: FocusConfig<F>,
    pub sampler: SamplerSpec,
    /// Keep the per-layer KL vector of every step in the record.
    pub retain_layer_kl: bool,
}

impl<F: Real> Default for DecodeConfig<F> {
    fn default() -> Self {
        Self {
            max_tokens: DEFAULT_MAX_TOKENS,
            stop_tokens: BTreeSet::new(),
            num_samples: DEFAULT_NUM_SAMPLES,
            base_seed: 0,
            focus: FocusConfig::default(),
            sampler: SamplerSpec::default(),
            retain_layer_kl: false,
        }
    }
}

impl<F: Real> DecodeConfig<F> {
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.max_tokens == 0 {
            return Err(Error::config("decode.max_tokens", "must be at least 1"));
        }
        if self.num_samples == 0 {
            return Err(Error::config("decode.num_samples", "must be at least 1"));
        }
        self.sampler
            .validate()
            .map_err(|e| Error::config("sampler", e.to_string()))?;
        self.focus.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub ka: f64,
    pub temperature: f64,
    pub head_size: usize,
    pub chosen: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_layer_kl: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationRecord {
    pub schema: u32,
    pub prompt_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    pub sample_id: usize,
    pub seed: u64,
    pub tokens: Vec<u32>,
    pub steps: Vec<StepRecord>,
    /// Detokenized output, when attached by an external tool. Metrics use
    /// its whitespace-split words instead of token ids when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// Stream seed for sample `sample_id` of the prompt with id `prompt_id`:
/// the first eight bytes (little-endian) of
/// `SHA-256("dfd-seed-v1" || base_seed_le || len_le(prompt_id) || prompt_id || sample_id_le)`.
pub fn stream_seed(base_seed: u64, prompt_id: &str, sample_id: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(b"dfd-seed-v1");
    h.update(base_seed.to_le_bytes());
    h.update((prompt_id.len() as u64).to_le_bytes());
    h.update(prompt_id.as_bytes());
    h.update((sample_id as u64).to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

fn check_prompt(prompt: &Prompt, vocab_size: usize) -> Result<()> {
    if prompt.tokens.is_empty() {
        return Err(Error::arg(format!("prompt `{}` is empty", prompt.id)));
    }
    if let Some(&bad) = prompt.tokens.iter().find(|&&t| t as usize >= vocab_size) {
        return Err(Error::arg(format!(
            "prompt `{}` has token {bad} outside vocabulary of size {vocab_size}",
            prompt.id
        )));
    }
    Ok(())
}

fn at_step(step: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::AtStep {
        step,
        source: Box::new(e),
    }
}

/// Dynamic-focus generation of one sample.
pub fn generate<F: Real, P: LayerProvider<F>>(
    provider: &mut P,
    prompt: &Prompt,
    cfg: &DecodeConfig<F>,
    sample_id: usize,
    seed: u64,
) -> Result<GenerationRecord> {
    check_prompt(prompt, provider.meta().vocab_size)?;
    let ka_params = cfg.focus.ka_params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut context = prompt.tokens.clone();
    let mut tokens = Vec::new();
    let mut steps = Vec::new();

    for step in 0..cfg.max_tokens {
        let logits = provider.step(&context).map_err(at_step(step))?;
        let signal = knowledge_awareness(&logits, &ka_params).map_err(at_step(step))?;
        let temperature = cfg.focus.temperature(signal.ka);
        let chosen = dfd_sample(&logits, &cfg.sampler, temperature, &mut rng).map_err(at_step(step))?;
        steps.push(StepRecord {
            ka: signal.ka.as_f64(),
            temperature: temperature.as_f64(),
            head_size: signal.support.len(),
            chosen,
            per_layer_kl: cfg
                .retain_layer_kl
                .then(|| signal.per_layer_kl.iter().map(|v| v.as_f64()).collect()),
        });
        tokens.push(chosen);
        context.push(chosen);
        if cfg.stop_tokens.contains(&chosen) {
            break;
        }
    }

    Ok(GenerationRecord {
        schema: RECORD_SCHEMA,
        prompt_id: prompt.id.clone(),
        dataset: prompt.dataset.clone(),
        sample_id,
        seed,
        tokens,
        steps,
        text: None,
    })
}

/// Plain fixed-temperature sampling with the conventional warper order.
/// Uses only the output layer; no KA is computed. Same RNG stream layout
/// as [`generate`] (one uniform per step).
pub fn generate_baseline<F: Real, P: LayerProvider<F>>(
    provider: &mut P,
    prompt: &Prompt,
    sampler: &SamplerSpec,
    temperature: F,
    max_tokens: usize,
    stop_tokens: &BTreeSet<u32>,
    seed: u64,
) -> Result<Vec<u32>> {
    check_prompt(prompt, provider.meta().vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut context = prompt.tokens.clone();
    let mut out = Vec::new();
    for step in 0..max_tokens {
        let logits = provider.step(&context).map_err(at_step(step))?;
        let tok = sample_conventional(logits.final_row(), sampler, temperature, &mut rng).map_err(at_step(step))?;
        out.push(tok);
        context.push(tok);
        if stop_tokens.contains(&tok) {
            break;
        }
    }
    Ok(out)
}

#[derive(Debug)]
pub struct BatchItem {
    pub prompt_id: String,
    pub sample_id: usize,
    pub result: Result<GenerationRecord>,
}

/// `num_samples` generations per prompt, each with a fresh provider from
/// `factory` and a seed derived from the prompt id. Output order is
/// prompt-major in input order; failures are reported per item.
pub fn generate_batch<F, P, Fac>(
    factory: Fac,
    prompts: &[Prompt],
    cfg: &DecodeConfig<F>,
    workers: Option<usize>,
) -> Result<Vec<BatchItem>>
where
    F: Real,
    P: LayerProvider<F>,
    Fac: Fn() -> Result<P> + Sync,
{
    if prompts.is_empty() {
        return Err(Error::arg("no prompts"));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = prompts.iter().find(|p| !seen.insert(p.id.as_str())) {
        return Err(Error::arg(format!("duplicate prompt id `{}`", dup.id)));
    }

    let jobs: Vec<(&Prompt, usize)> = prompts
        .iter()
        .flat_map(|p| (0..cfg.num_samples).map(move |j| (p, j)))
        .collect();
    let run = |&(prompt, sample_id): &(&Prompt, usize)| {
        let seed = stream_seed(cfg.base_seed, &prompt.id, sample_id);
        let result = factory().and_then(|mut provider| generate(&mut provider, prompt, cfg, sample_id, seed));
        BatchItem {
            prompt_id: prompt.id.clone(),
            sample_id,
            result,
        }
    };

    match workers {
        Some(1) => Ok(jobs.iter().map(run).collect()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::arg(format!("cannot start worker pool: {e}")))?;
            Ok(pool.install(|| jobs.par_iter().map(run).collect()))
        }
        None => Ok(jobs.par_iter().map(run).collect()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub t0: f64,
    pub mean_ka: f64,
    pub num_samples: usize,
}

/// Runs the fixed `T = 1` baseline over `prompts`, gathers every step's KA
/// and solves for the `t0` that maps their mean to temperature 1 under
/// `cfg.focus`'s transform and sigma.
pub fn calibrate<F, P, Fac>(
    factory: Fac,
    prompts: &[Prompt],
    cfg: &DecodeConfig<F>,
    workers: Option<usize>,
) -> Result<Calibration>
where
    F: Real,
    P: LayerProvider<F>,
    Fac: Fn() -> Result<P> + Sync,
{
    let mut baseline = cfg.clone();
    baseline.focus = FocusConfig {
        transform: crate::focus::TransformKind::Fixed,
        t0: F::one(),
        ..cfg.focus.clone()
    };
    let mut samples = Vec::new();
    for item in generate_batch(factory, prompts, &baseline, workers)? {
        let rec = item
            .result
            .map_err(|e| Error::Calibration(format!("prompt `{}` sample {}: {e}", item.prompt_id, item.sample_id)))?;
        samples.extend(rec.steps.iter().map(|s| F::of(s.ka)));
    }
    let t0 = calibrate_t0(&samples, cfg.focus.sigma, cfg.focus.transform)?;
    let mean = samples.iter().map(|v| v.as_f64()).sum::<f64>() / samples.len() as f64;
    Ok(Calibration {
        t0: t0.as_f64(),
        mean_ka: mean,
        num_samples: samples.len(),
    })
}

/// One JSON object per line, in the given order.
pub fn write_records<W: Write>(mut w: W, records: &[GenerationRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads records written by [`write_records`]; blank lines are skipped.
pub fn read_records<R: BufRead>(r: R) -> Result<Vec<GenerationRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::input(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Prompts of random tokens, reproducible from `seed`.
pub fn synthetic_prompts(count: usize, len: usize, vocab_size: usize, seed: u64) -> Vec<Prompt> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let tokens = (0..len.max(1))
                .map(|_| rng.random_range(0..vocab_size as u32))
                .collect();
            Prompt {
                id: format!("synthetic-{i:03}"),
                dataset: Some("synthetic".into()),
                tokens,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::provider::BuiltinProvider;

    fn provider() -> BuiltinProvider<f64> {
        BuiltinProvider::from_config(ModelConfig::default()).unwrap()
    }

    fn small_cfg() -> DecodeConfig<f64> {
        DecodeConfig {
            max_tokens: 12,
            ..DecodeConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let prompt = Prompt::new("p", vec![1, 2, 3]);
        let a = generate(&mut provider(), &prompt, &small_cfg(), 0, 99).unwrap();
        let b = generate(&mut provider(), &prompt, &small_cfg(), 0, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens.len(), 12);
        assert_eq!(a.steps.len(), a.tokens.len());
    }

    #[test]
    fn stop_token_halts_generation() {
        let prompt = Prompt::new("p", vec![1, 2, 3]);
        let full = generate(&mut provider(), &prompt, &small_cfg(), 0, 5).unwrap();
        let stop = full.tokens[4];
        let first = full.tokens.iter().position(|&t| t == stop).unwrap();
        let mut cfg = small_cfg();
        cfg.stop_tokens.insert(stop);
        let cut = generate(&mut provider(), &prompt, &cfg, 0, 5).unwrap();
        assert_eq!(cut.tokens, full.tokens[..=first]);
    }

    #[test]
    fn temperatures_are_rederivable_from_records() {
        let prompt = Prompt::new("p", vec![9, 9, 4]);
        let cfg = small_cfg();
        let rec = generate(&mut provider(), &prompt, &cfg, 0, 1).unwrap();
        for s in &rec.steps {
            assert!((s.temperature - cfg.focus.temperature(s.ka)).abs() < 1e-9);
            assert!(s.head_size >= 1);
        }
    }

    #[test]
    fn per_layer_kl_retained_on_request() {
        let prompt = Prompt::new("p", vec![9, 9, 4]);
        let mut cfg = small_cfg();
        cfg.retain_layer_kl = true;
        let rec = generate(&mut provider(), &prompt, &cfg, 0, 1).unwrap();
        assert!(rec
            .steps
            .iter()
            .all(|s| s.per_layer_kl.as_ref().map(Vec::len) == Some(3)));
    }

    #[test]
    fn seeds_are_distinct_across_prompts_and_samples() {
        let seeds: HashSet<u64> = ["a", "b"]
            .iter()
            .flat_map(|p| (0..3).map(move |j| stream_seed(0, p, j)))
            .collect();
        assert_eq!(seeds.len(), 6);
    }

    #[test]
    fn bad_prompts_rejected() {
        let cfg = small_cfg();
        assert!(generate(&mut provider(), &Prompt::new("e", vec![]), &cfg, 0, 0).is_err());
        assert!(generate(&mut provider(), &Prompt::new("v", vec![64]), &cfg, 0, 0).is_err());
        let dup = vec![Prompt::new("x", vec![1]), Prompt::new("x", vec![2])];
        assert!(generate_batch(|| Ok(provider()), &dup, &cfg, Some(1)).is_err());
    }

    #[test]
    fn single_sample_batch_matches_direct_call() {
        let prompt = Prompt::new("solo", vec![4, 5, 6]);
        let mut cfg = small_cfg();
        cfg.num_samples = 1;
        let items = generate_batch(|| Ok(provider()), std::slice::from_ref(&prompt), &cfg, Some(2)).unwrap();
        assert_eq!(items.len(), 1);
        let direct = generate(&mut provider(), &prompt, &cfg, 0, stream_seed(cfg.base_seed, "solo", 0)).unwrap();
        assert_eq!(items[0].result.as_ref().unwrap(), &direct);
    }

    #[test]
    fn errors_carry_step_index() {
        let prompt = Prompt::new("p", vec![1]);
        let mut cfg = small_cfg();
        cfg.sampler.p = 2.0;
        let err = generate(&mut provider(), &prompt, &cfg, 0, 0).unwrap_err();
        assert!(matches!(err, Error::AtStep { step: 0, .. }));
    }
}
