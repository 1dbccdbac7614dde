//! Dynamic focus decoding.
//!
//! At each decoding step the next-token distributions read out of every
//! layer are compared with the final one. The mean divergence over the
//! plausible head tokens (knowledge-awareness, KA) is mapped to a sampling
//! temperature: high KA sharpens sampling, low KA leaves it diffuse.
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the scalar for callers that do not care.

// `!(x > 0)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod cost;
pub mod dist;
pub mod engine;
pub mod error;
pub mod focus;
pub mod ka;
pub mod metrics;
pub mod model;
pub mod provider;
pub mod real;
pub mod sampler;
pub mod trace;
pub mod training;

pub use config::RunConfig;
pub use cost::{flops_estimate, CostModel, FlopsEstimate};
pub use dist::{entropy, restricted_kl, softmax_with_temperature, KlMode, TokenSet};
pub use engine::{
    calibrate, generate, generate_baseline, generate_batch, read_records, stream_seed, synthetic_prompts,
    write_records, BatchItem, Calibration, GenerationRecord, Prompt, StepRecord,
};
pub use error::{Error, Result};
pub use focus::{calibrate_t0, TransformKind};
pub use ka::{aggregate_ka, head_support, knowledge_awareness, layer_kls, KaSignal, LayerSet};
pub use metrics::{distinct_n, pairwise_bleu, ResponseSet};
pub use model::ModelConfig;
pub use provider::{LayerProvider, ModelMeta};
pub use real::Real;
pub use sampler::{SamplerKind, SamplerSpec};
pub use training::ft_loss;

pub type Distribution32 = dist::Distribution<f32>;
pub type Distribution64 = dist::Distribution<f64>;
pub type LayerLogits32 = provider::LayerLogits<f32>;
pub type LayerLogits64 = provider::LayerLogits<f64>;
pub type FocusConfig32 = focus::FocusConfig<f32>;
pub type FocusConfig64 = focus::FocusConfig<f64>;
pub type DecodeConfig32 = engine::DecodeConfig<f32>;
pub type DecodeConfig64 = engine::DecodeConfig<f64>;
pub type Trace32 = trace::Trace<f32>;
pub type Trace64 = trace::Trace<f64>;
pub type TinyTransformer32 = model::TinyTransformer<f32>;
pub type TinyTransformer64 = model::TinyTransformer<f64>;
pub type BuiltinProvider64 = provider::BuiltinProvider<f64>;
pub type ReplayProvider64 = provider::ReplayProvider<f64>;
pub type FTBatch64 = training::FTBatch<f64>;
