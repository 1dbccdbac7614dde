//! Temperature-scaled cross-entropy (the focused training loss) on the
//! built-in transformer, with finite-difference gradient checking and a
//! small training loop.
//!
//! Per-step temperatures are constants of the loss: no gradient flows back
//! through the KA pipeline that produced them.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dist::check_logits;
use crate::error::{Error, Result};
use crate::focus::FocusConfig;
use crate::ka::knowledge_awareness;
use crate::model::{ModelConfig, TinyTransformer};
use crate::real::Real;

/// One teacher-forced sequence: `tokens` has `k + 1` entries, `temps` has
/// `k`, and position `i` predicts `tokens[i + 1]` at temperature `temps[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FTBatch<F> {
    tokens: Vec<u32>,
    temps: Vec<F>,
}

impl<F: Real> FTBatch<F> {
    pub fn new(tokens: Vec<u32>, temps: Vec<F>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::arg("a training batch needs at least two tokens"));
        }
        if temps.len() + 1 != tokens.len() {
            return Err(Error::arg(format!(
                "{} tokens need {} temperatures, got {}",
                tokens.len(),
                tokens.len() - 1,
                temps.len()
            )));
        }
        if let Some(t) = temps.iter().find(|t| !(**t > F::zero()) || !t.is_finite()) {
            return Err(Error::arg(format!("temperature must be positive and finite, got {t}")));
        }
        Ok(Self { tokens, temps })
    }

    /// Every step at temperature `t`.
    pub fn uniform(tokens: Vec<u32>, t: F) -> Result<Self> {
        let k = tokens.len().saturating_sub(1);
        Self::new(tokens, vec![t; k])
    }

    /// Temperatures from the inference-time KA pipeline run on the
    /// teacher-forced context.
    pub fn from_focus(model: &TinyTransformer<F>, tokens: Vec<u32>, focus: &FocusConfig<F>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::arg("a training batch needs at least two tokens"));
        }
        let k = tokens.len() - 1;
        let cache = model.forward(&tokens[..k])?;
        let params = focus.ka_params();
        let temps = (0..k)
            .map(|pos| {
                let step = model.layer_logits_at(&cache, pos);
                knowledge_awareness(&step, &params).map(|s| focus.temperature(s.ka))
            })
            .collect::<Result<Vec<F>>>()?;
        Self::new(tokens, temps)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn inputs(&self) -> &[u32] {
        &self.tokens[..self.tokens.len() - 1]
    }

    pub fn targets(&self) -> &[u32] {
        &self.tokens[1..]
    }

    pub fn temps(&self) -> &[F] {
        &self.temps
    }

    pub fn len(&self) -> usize {
        self.temps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.temps.is_empty()
    }
}

fn log_softmax_at<F: Real>(row: &[F], t: F, target: usize) -> F {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = row.iter().map(|&z| ((z - max) / t).exp()).sum::<F>().ln();
    (row[target] - max) / t - lse
}

/// `-(1/k) * sum_i log softmax(logits_i / T_i)[target_i]`.
pub fn ft_loss<F: Real>(logits: &[Vec<F>], targets: &[u32], temps: &[F]) -> Result<F> {
    if logits.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    if logits.len() != targets.len() || logits.len() != temps.len() {
        return Err(Error::arg(format!(
            "length mismatch: {} logit rows, {} targets, {} temperatures",
            logits.len(),
            targets.len(),
            temps.len()
        )));
    }
    let mut total = F::zero();
    for ((row, &y), &t) in logits.iter().zip(targets).zip(temps) {
        check_logits(row)?;
        if !(t > F::zero()) {
            return Err(Error::arg(format!("temperature must be positive, got {t}")));
        }
        if y as usize >= row.len() {
            return Err(Error::arg(format!(
                "target {y} outside vocabulary of size {}",
                row.len()
            )));
        }
        total -= log_softmax_at(row, t, y as usize);
    }
    Ok(total / F::of(logits.len() as f64))
}

/// Loss and `d loss / d logits` for flat `k x V` logits.
pub fn ft_loss_with_grad<F: Real>(
    logits: &[F],
    vocab_size: usize,
    targets: &[u32],
    temps: &[F],
) -> Result<(F, Vec<F>)> {
    let k = targets.len();
    if k == 0 || temps.len() != k || logits.len() != k * vocab_size {
        return Err(Error::arg("logits, targets and temperatures disagree in length"));
    }
    let kf = F::of(k as f64);
    let mut loss = F::zero();
    let mut grad = vec![F::zero(); logits.len()];
    for i in 0..k {
        let row = &logits[i * vocab_size..(i + 1) * vocab_size];
        let t = temps[i];
        let y = targets[i] as usize;
        if y >= vocab_size {
            return Err(Error::arg(format!(
                "target {y} outside vocabulary of size {vocab_size}"
            )));
        }
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let g = &mut grad[i * vocab_size..(i + 1) * vocab_size];
        let mut z = F::zero();
        for (gj, &l) in g.iter_mut().zip(row) {
            *gj = ((l - max) / t).exp();
            z += *gj;
        }
        loss -= (row[y] - max) / t - z.ln();
        let scale = F::one() / (t * kf);
        for gj in g.iter_mut() {
            *gj = *gj / z * scale;
        }
        g[y] -= scale;
    }
    let loss = loss / kf;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {loss}")));
    }
    Ok((loss, grad))
}

/// Loss only, for finite differences.
pub fn batch_loss<F: Real>(model: &TinyTransformer<F>, batch: &FTBatch<F>) -> Result<F> {
    let cache = model.forward(batch.inputs())?;
    let logits = model.output_logits(&cache);
    let v = model.config().vocab_size;
    Ok(ft_loss_with_grad(&logits, v, batch.targets(), batch.temps())?.0)
}

/// Loss and its gradient with respect to every model parameter.
pub fn loss_and_grad<F: Real>(model: &TinyTransformer<F>, batch: &FTBatch<F>) -> Result<(F, Vec<F>)> {
    let cache = model.forward(batch.inputs())?;
    let logits = model.output_logits(&cache);
    let v = model.config().vocab_size;
    let (loss, d_logits) = ft_loss_with_grad(&logits, v, batch.targets(), batch.temps())?;
    Ok((loss, model.backward(&cache, &d_logits)))
}

pub const DEFAULT_GRAD_EPS: f64 = 1e-5;
pub const DEFAULT_GRAD_CHECK_PARAMS: usize = 64;
/// Denominator floor so parameters with near-zero gradient do not blow up
/// the relative error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub checked: usize,
}

/// Compares analytic gradients with central differences on `num_params`
/// distinct parameters drawn with `seed`.
pub fn grad_check<F: Real>(
    model: &TinyTransformer<F>,
    batch: &FTBatch<F>,
    eps: F,
    num_params: usize,
    seed: u64,
) -> Result<GradCheck> {
    if batch.is_empty() {
        return Err(Error::arg("zero-length batch"));
    }
    if !(eps > F::zero()) {
        return Err(Error::arg("eps must be positive"));
    }
    let (_, analytic) = loss_and_grad(model, batch)?;
    let total = model.num_params();
    let count = num_params.min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, total, count).into_vec();
    picks.sort_unstable();

    let errors = picks
        .par_iter()
        .map(|&i| {
            let mut m = model.clone();
            let orig = m.params()[i];
            m.params_mut()[i] = orig + eps;
            let plus = batch_loss(&m, batch)?;
            m.params_mut()[i] = orig - eps;
            let minus = batch_loss(&m, batch)?;
            let numeric = ((plus - minus) / (eps + eps)).as_f64();
            let a = analytic[i].as_f64();
            let denom = (a.abs() + numeric.abs()).max(GRAD_CHECK_FLOOR);
            Ok((i, (a - numeric).abs() / denom))
        })
        .collect::<Result<Vec<(usize, f64)>>>()?;

    let (worst_param, max_rel_error) = errors
        .into_iter()
        .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
    Ok(GradCheck {
        max_rel_error,
        worst_param,
        checked: count,
    })
}

#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    m: Vec<F>,
    v: Vec<F>,
    t: i32,
}

impl<F: Real> Adam<F> {
    pub fn new(num_params: usize, lr: F) -> Self {
        Self {
            lr,
            beta1: F::of(0.9),
            beta2: F::of(0.999),
            eps: F::of(1e-8),
            m: vec![F::zero(); num_params],
            v: vec![F::zero(); num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [F], grad: &[F]) {
        self.t += 1;
        let c1 = F::one() - self.beta1.powi(self.t);
        let c2 = F::one() - self.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (F::one() - self.beta1) * g;
            *v = self.beta2 * *v + (F::one() - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Toy training run comparing plain cross-entropy with the focused loss.
#[derive(Debug, Clone)]
pub struct TrainDemoConfig<F> {
    pub model: ModelConfig,
    pub focus: FocusConfig<F>,
    pub steps: usize,
    pub seq_len: usize,
    pub lr: F,
    /// Seeds the synthetic corpus.
    pub data_seed: u64,
    /// Nonzero successor tokens per state of the corpus Markov chain.
    pub branching: usize,
}

impl<F: Real> Default for TrainDemoConfig<F> {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            focus: FocusConfig::default(),
            steps: 50,
            seq_len: 32,
            lr: F::of(3e-3),
            data_seed: 7,
            branching: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossPoint {
    pub step: usize,
    /// Training loss of the cross-entropy run.
    pub baseline_ce: f64,
    /// Training loss of the focused run.
    pub ft_loss: f64,
    /// Plain cross-entropy of the focused run's model on the same batch.
    pub ft_model_ce: f64,
    pub mean_temperature: f64,
}

/// Sparse random Markov chain over the vocabulary.
fn markov_sequence(vocab: usize, branching: usize, len: usize, chain_seed: u64, rng: &mut impl Rng) -> Vec<u32> {
    let mut table = ChaCha8Rng::seed_from_u64(chain_seed);
    let succ: Vec<Vec<u32>> = (0..vocab)
        .map(|_| (0..branching).map(|_| table.random_range(0..vocab as u32)).collect())
        .collect();
    let mut seq = Vec::with_capacity(len);
    seq.push(rng.random_range(0..vocab as u32));
    while seq.len() < len {
        let options = &succ[*seq.last().unwrap() as usize];
        seq.push(options[rng.random_range(0..options.len())]);
    }
    seq
}

pub fn train_demo<F: Real>(cfg: &TrainDemoConfig<F>) -> Result<Vec<LossPoint>> {
    if cfg.seq_len < 2 || cfg.seq_len > cfg.model.max_context + 1 {
        return Err(Error::arg(format!(
            "seq_len must lie in [2, {}], got {}",
            cfg.model.max_context + 1,
            cfg.seq_len
        )));
    }
    if cfg.branching == 0 {
        return Err(Error::arg("branching must be positive"));
    }
    cfg.focus.validate()?;
    let mut base = TinyTransformer::<F>::new(cfg.model.clone())?;
    let mut focused = base.clone();
    let mut opt_base = Adam::new(base.num_params(), cfg.lr);
    let mut opt_focused = Adam::new(focused.num_params(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
    let chain_seed = cfg.data_seed ^ 0x9e37_79b9_7f4a_7c15;

    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let seq = markov_sequence(cfg.model.vocab_size, cfg.branching, cfg.seq_len, chain_seed, &mut rng);

        let b = FTBatch::uniform(seq.clone(), F::one())?;
        let (ce, g) = loss_and_grad(&base, &b)?;
        opt_base.step(base.params_mut(), &g);

        let fb = FTBatch::from_focus(&focused, seq.clone(), &cfg.focus)?;
        let (ft, g) = loss_and_grad(&focused, &fb)?;
        let plain = batch_loss(&focused, &FTBatch::uniform(seq, F::one())?)?;
        opt_focused.step(focused.params_mut(), &g);

        let mean_t = fb.temps().iter().map(|t| t.as_f64()).sum::<f64>() / fb.len() as f64;
        curve.push(LossPoint {
            step,
            baseline_ce: ce.as_f64(),
            ft_loss: ft.as_f64(),
            ft_model_ce: plain.as_f64(),
            mean_temperature: mean_t,
        });
    }
    Ok(curve)
}
