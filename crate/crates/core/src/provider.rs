//! Sources of per-layer logits for one decoding step.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TinyTransformer};
use crate::real::Real;
use crate::trace::Trace;

/// Raw LM-head logits for every layer at one decoding step.
///
/// Rows are addressed 0-based: `row(i)` is layer `i + 1`, and the last row
/// is the model's output layer, which defines the sampling distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerLogits<F> {
    step_index: usize,
    num_layers: usize,
    vocab_size: usize,
    data: Vec<F>,
}

impl<F: Real> LayerLogits<F> {
    pub fn new(step_index: usize, rows: Vec<Vec<F>>) -> Result<Self> {
        let num_layers = rows.len();
        if num_layers < 2 {
            return Err(Error::input(format!("need at least two layers, got {num_layers}")));
        }
        let vocab_size = rows[0].len();
        if vocab_size < 2 {
            return Err(Error::input("vocabulary needs at least two tokens"));
        }
        if let Some(i) = rows.iter().position(|r| r.len() != vocab_size) {
            return Err(Error::input(format!(
                "layer {} has {} logits, expected {vocab_size}",
                i + 1,
                rows[i].len()
            )));
        }
        let data: Vec<F> = rows.into_iter().flatten().collect();
        Self::from_flat(step_index, num_layers, vocab_size, data)
    }

    /// Builds from a row-major `num_layers x vocab_size` buffer.
    pub fn from_flat(step_index: usize, num_layers: usize, vocab_size: usize, data: Vec<F>) -> Result<Self> {
        if num_layers < 2 || vocab_size < 2 || data.len() != num_layers * vocab_size {
            return Err(Error::input(format!(
                "bad logit block: {num_layers} layers x {vocab_size} tokens with {} values",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!(
                "non-finite logit at layer {}, token {}",
                i / vocab_size + 1,
                i % vocab_size
            )));
        }
        Ok(Self::from_parts(step_index, num_layers, vocab_size, data))
    }

    pub(crate) fn from_parts(step_index: usize, num_layers: usize, vocab_size: usize, data: Vec<F>) -> Self {
        Self {
            step_index,
            num_layers,
            vocab_size,
            data,
        }
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn with_step_index(mut self, step_index: usize) -> Self {
        self.step_index = step_index;
        self
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.vocab_size..(i + 1) * self.vocab_size]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.data[i * self.vocab_size..(i + 1) * self.vocab_size]
    }

    pub fn final_row(&self) -> &[F] {
        self.row(self.num_layers - 1)
    }

    pub fn rows(&self) -> impl Iterator<Item = &[F]> {
        self.data.chunks_exact(self.vocab_size)
    }

    pub fn as_flat(&self) -> &[F] {
        &self.data
    }

    pub fn cast<G: Real>(&self) -> LayerLogits<G> {
        LayerLogits {
            step_index: self.step_index,
            num_layers: self.num_layers,
            vocab_size: self.vocab_size,
            data: self.data.iter().map(|v| G::of(v.as_f64())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub num_layers: usize,
    pub vocab_size: usize,
    pub d_model: usize,
    pub param_count: u64,
    pub name: String,
}

impl ModelMeta {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 || self.vocab_size < 2 || self.d_model < 1 {
            return Err(Error::input(format!(
                "invalid model meta: N={}, V={}, d_model={}",
                self.num_layers, self.vocab_size, self.d_model
            )));
        }
        Ok(())
    }
}

/// Something that can produce all-layer logits for the next token.
pub trait LayerProvider<F: Real> {
    fn meta(&self) -> &ModelMeta;

    /// Logits of every layer at the last position of `context`.
    fn step(&mut self, context: &[u32]) -> Result<LayerLogits<F>>;
}

/// The built-in reference transformer. Cheap to clone; the weights are
/// shared immutably.
///
/// Contexts longer than the model's window are cut to their most recent
/// `max_context` tokens.
#[derive(Debug, Clone)]
pub struct BuiltinProvider<F> {
    model: Arc<TinyTransformer<F>>,
    meta: ModelMeta,
    steps: usize,
}

impl<F: Real> BuiltinProvider<F> {
    pub fn new(model: Arc<TinyTransformer<F>>) -> Self {
        let meta = model.meta();
        Self { model, meta, steps: 0 }
    }

    pub fn from_config(cfg: ModelConfig) -> Result<Self> {
        Ok(Self::new(Arc::new(TinyTransformer::new(cfg)?)))
    }

    pub fn model(&self) -> &TinyTransformer<F> {
        &self.model
    }
}

impl<F: Real> LayerProvider<F> for BuiltinProvider<F> {
    fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    fn step(&mut self, context: &[u32]) -> Result<LayerLogits<F>> {
        let window = self.model.config().max_context;
        let start = context.len().saturating_sub(window);
        let out = self.model.step_logits(&context[start..])?.with_step_index(self.steps);
        self.steps += 1;
        Ok(out)
    }
}

/// Replays a recorded trace. The caller must feed back exactly the
/// recorded tokens; any other context is a divergence error.
#[derive(Debug, Clone)]
pub struct ReplayProvider<F> {
    trace: Arc<Trace<F>>,
    cursor: usize,
}

impl<F: Real> ReplayProvider<F> {
    pub fn new(trace: Arc<Trace<F>>) -> Self {
        Self { trace, cursor: 0 }
    }

    pub fn trace(&self) -> &Trace<F> {
        &self.trace
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn rewind(&mut self) {
        self.cursor = 0;
    }
}

impl<F: Real> LayerProvider<F> for ReplayProvider<F> {
    fn meta(&self) -> &ModelMeta {
        &self.trace.meta
    }

    fn step(&mut self, context: &[u32]) -> Result<LayerLogits<F>> {
        let step = self.cursor;
        let prompt = &self.trace.context_tokens;
        let expected_len = prompt.len() + step;
        if context.len() != expected_len {
            return Err(Error::TraceDivergence {
                step,
                detail: format!("context has {} tokens, recording expects {expected_len}", context.len()),
            });
        }
        if context[..prompt.len()] != prompt[..] {
            return Err(Error::TraceDivergence {
                step,
                detail: "prompt differs from the recorded prompt".into(),
            });
        }
        for (i, (&got, s)) in context[prompt.len()..].iter().zip(&self.trace.steps).enumerate() {
            if got != s.token {
                return Err(Error::TraceDivergence {
                    step,
                    detail: format!("generated token {got} at step {i}, recording has {}", s.token),
                });
            }
        }
        let recorded = self.trace.steps.get(step).ok_or(Error::EndOfTrace(step))?;
        self.cursor += 1;
        Ok(recorded.logits.clone())
    }
}

/// Where a run's logits come from.
#[derive(Debug, Clone)]
pub enum ProviderSource<F> {
    Builtin(Arc<TinyTransformer<F>>),
    Replay(Arc<Trace<F>>),
}

impl<F: Real> ProviderSource<F> {
    /// A fresh provider (new cursor) over the shared source.
    pub fn open(&self) -> AnyProvider<F> {
        match self {
            ProviderSource::Builtin(m) => AnyProvider::Builtin(BuiltinProvider::new(m.clone())),
            ProviderSource::Replay(t) => AnyProvider::Replay(ReplayProvider::new(t.clone())),
        }
    }

    pub fn meta(&self) -> ModelMeta {
        match self {
            ProviderSource::Builtin(m) => m.meta(),
            ProviderSource::Replay(t) => t.meta.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum AnyProvider<F> {
    Builtin(BuiltinProvider<F>),
    Replay(ReplayProvider<F>),
}

impl<F: Real> LayerProvider<F> for AnyProvider<F> {
    fn meta(&self) -> &ModelMeta {
        match self {
            AnyProvider::Builtin(p) => p.meta(),
            AnyProvider::Replay(p) => p.meta(),
        }
    }

    fn step(&mut self, context: &[u32]) -> Result<LayerLogits<F>> {
        match self {
            AnyProvider::Builtin(p) => p.step(context),
            AnyProvider::Replay(p) => p.step(context),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::TraceStep;

    fn tiny_trace() -> Trace<f64> {
        let meta = ModelMeta {
            num_layers: 2,
            vocab_size: 3,
            d_model: 1,
            param_count: 0,
            name: "fixture".into(),
        };
        let step = |i: usize, tok: u32| TraceStep {
            token: tok,
            logits: LayerLogits::new(i, vec![vec![0.0, 1.0, 2.0], vec![i as f64, 0.0, 0.0]]).unwrap(),
        };
        Trace::new(meta, vec![1, 2], vec![step(0, 0), step(1, 2)]).unwrap()
    }

    #[test]
    fn replay_follows_recorded_prefix() {
        let mut p = ReplayProvider::new(Arc::new(tiny_trace()));
        let s0 = p.step(&[1, 2]).unwrap();
        assert_eq!(s0.final_row(), &[0.0, 0.0, 0.0]);
        let s1 = p.step(&[1, 2, 0]).unwrap();
        assert_eq!(s1.final_row(), &[1.0, 0.0, 0.0]);
        assert!(matches!(p.step(&[1, 2, 0, 2]), Err(Error::EndOfTrace(2))));
    }

    #[test]
    fn replay_detects_divergence() {
        let mut p = ReplayProvider::new(Arc::new(tiny_trace()));
        p.step(&[1, 2]).unwrap();
        assert!(matches!(
            p.step(&[1, 2, 1]),
            Err(Error::TraceDivergence { step: 1, .. })
        ));
        let mut q = ReplayProvider::new(Arc::new(tiny_trace()));
        assert!(matches!(q.step(&[9, 2]), Err(Error::TraceDivergence { step: 0, .. })));
    }

    #[test]
    fn layer_logits_validation() {
        assert!(LayerLogits::<f64>::new(0, vec![vec![0.0, 1.0]]).is_err());
        assert!(LayerLogits::<f64>::new(0, vec![vec![0.0, 1.0], vec![0.0]]).is_err());
        assert!(LayerLogits::<f64>::new(0, vec![vec![0.0, 1.0], vec![f64::INFINITY, 0.0]]).is_err());
    }

    #[test]
    fn builtin_window_truncates_long_contexts() {
        let mut p = BuiltinProvider::<f64>::from_config(ModelConfig::default()).unwrap();
        let long: Vec<u32> = (0..200).map(|i| (i * 7 % 64) as u32).collect();
        let a = p.step(&long).unwrap();
        let b = p.step(&long[200 - 128..]).unwrap();
        assert_eq!(a.as_flat(), b.as_flat());
    }
}
