//! Analytic FLOPs model for the cost of focus decoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Arithmetic per vocabulary entry for one restricted KL term: softmax
/// exponent, normalization, log ratio, multiply-accumulate.
pub const KL_FLOPS_PER_TOKEN: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub param_count: u64,
    pub d_model: u64,
    pub vocab_size: u64,
    pub num_layers: u64,
    /// Input embedding shares storage with the output head. When false the
    /// `vocab_size x d_model` embedding table is a lookup and costs no
    /// matmul FLOPs.
    #[serde(default)]
    pub tied_embeddings: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlopsEstimate {
    pub context_len: u64,
    pub baseline: f64,
    pub flops: f64,
    pub ratio_vs_baseline: f64,
}

impl CostModel {
    /// Llama-3.1-8B dimensions.
    pub const LLAMA_8B: CostModel = CostModel {
        param_count: 8_030_000_000,
        d_model: 4096,
        vocab_size: 128_256,
        num_layers: 32,
        tied_embeddings: false,
    };

    /// Llama-3.1-70B dimensions.
    pub const LLAMA_70B: CostModel = CostModel {
        param_count: 70_550_000_000,
        d_model: 8192,
        vocab_size: 128_256,
        num_layers: 80,
        tied_embeddings: false,
    };

    pub fn validate(&self) -> Result<()> {
        if self.param_count == 0 || self.d_model == 0 || self.vocab_size == 0 || self.num_layers == 0 {
            return Err(Error::arg("cost model fields must all be positive"));
        }
        if !self.tied_embeddings && self.param_count <= self.d_model * self.vocab_size {
            return Err(Error::arg("param_count does not exceed the embedding table size"));
        }
        Ok(())
    }

    /// Parameters touched by a matmul per token.
    pub fn matmul_params(&self) -> f64 {
        if self.tied_embeddings {
            self.param_count as f64
        } else {
            (self.param_count - self.d_model * self.vocab_size) as f64
        }
    }

    /// Extra work per decoded token: `N - 1` more head projections plus the
    /// KL arithmetic over the vocabulary for each.
    pub fn focus_overhead(&self) -> f64 {
        let internal = (self.num_layers - 1) as f64;
        let v = self.vocab_size as f64;
        internal * 2.0 * self.d_model as f64 * v + internal * KL_FLOPS_PER_TOKEN * v
    }
}

/// FLOPs for processing `context_len` tokens and emitting one, with or
/// without the focus overhead.
pub fn flops_estimate(model: &CostModel, context_len: u64, dfd: bool) -> Result<FlopsEstimate> {
    model.validate()?;
    if context_len == 0 {
        return Err(Error::arg("context length must be positive"));
    }
    let baseline = 2.0 * model.matmul_params() * context_len as f64;
    let flops = if dfd {
        baseline + model.focus_overhead()
    } else {
        baseline
    };
    Ok(FlopsEstimate {
        context_len,
        baseline,
        flops,
        ratio_vs_baseline: flops / baseline,
    })
}
