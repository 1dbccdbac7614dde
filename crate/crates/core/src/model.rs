//! Tiny decoder-only reference transformer with logit-lens taps.
//!
//! Architecture: learned token and position embeddings, `num_layers`
//! pre-norm blocks (RMSNorm, causal multi-head attention, RMSNorm, GELU
//! feed-forward), a final RMSNorm and an LM head tied to the token
//! embedding. No biases.
//!
//! Weights are drawn from `ChaCha8Rng::seed_from_u64(seed)` as standard
//! normals (`rand_distr::StandardNormal`) in parameter-layout order, each
//! scaled by its tensor's init std (see [`ModelConfig`]). Norm gains start
//! at one. Generation happens in `f64` and is cast to the model scalar, so
//! two builds of this crate produce bitwise-identical weights.
//!
//! All parameters live in a single flat vector; [`Layout`] maps tensors to
//! offsets so optimizers and gradient checks can address them uniformly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};

use crate::error::{Error, Result};
use crate::provider::{LayerLogits, ModelMeta};
use crate::real::Real;

const RMS_EPS: f64 = 1e-6;
const GELU_COEF: f64 = 0.044_715;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_mult: usize,
    pub max_context: usize,
    pub seed: u64,
    /// Skip every transformer block, so all hidden states equal the
    /// embedding output. Debug mode for the zero-divergence case.
    pub identity_blocks: bool,
    /// Apply the final RMSNorm to intermediate states before the LM head.
    pub normalize_lens: bool,
    pub embed_std: f64,
    pub pos_std: f64,
    /// Std of attention/FFN input projections is `proj_gain / sqrt(fan_in)`.
    pub proj_gain: f64,
    /// Output projections are additionally scaled by `1 / sqrt(2 * num_layers)`.
    pub out_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 32,
            num_layers: 4,
            num_heads: 4,
            ff_mult: 4,
            max_context: 128,
            seed: 0,
            identity_blocks: false,
            normalize_lens: true,
            embed_std: 0.25,
            pos_std: 0.1,
            proj_gain: 1.0,
            out_gain: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 {
            return Err(Error::arg("model needs at least two layers"));
        }
        if self.vocab_size < 2 {
            return Err(Error::arg("vocabulary needs at least two tokens"));
        }
        if self.d_model == 0 || self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::arg("d_model must be a positive multiple of num_heads"));
        }
        if self.ff_mult == 0 || self.max_context == 0 {
            return Err(Error::arg("ff_mult and max_context must be positive"));
        }
        Ok(())
    }
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub blocks: Vec<BlockLayout>,
    pub final_norm: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockLayout {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ff_norm: usize,
    pub w1: usize,
    pub w2: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let ff = d * cfg.ff_mult;
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let tok_emb = take(cfg.vocab_size * d);
        let pos_emb = take(cfg.max_context * d);
        let blocks = (0..cfg.num_layers)
            .map(|_| BlockLayout {
                attn_norm: take(d),
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                ff_norm: take(d),
                w1: take(d * ff),
                w2: take(ff * d),
            })
            .collect();
        let final_norm = take(d);
        Self {
            tok_emb,
            pos_emb,
            blocks,
            final_norm,
            total: at,
        }
    }
}

/// Activations kept from a forward pass for backpropagation.
struct BlockCache<F> {
    x_in: Vec<F>,
    rms1: Vec<F>,
    xn1: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    // per head, causal rows: att[h][t * T + j]
    att: Vec<Vec<F>>,
    heads_out: Vec<F>,
    x_mid: Vec<F>,
    rms2: Vec<F>,
    xn2: Vec<F>,
    pre_act: Vec<F>,
    act: Vec<F>,
}

pub struct ForwardCache<F> {
    tokens: Vec<u32>,
    blocks: Vec<BlockCache<F>>,
    /// Hidden state after each block, `hidden[0]` being the embeddings.
    hidden: Vec<Vec<F>>,
    rms_final: Vec<F>,
    xn_final: Vec<F>,
}

impl<F> ForwardCache<F> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct TinyTransformer<F> {
    cfg: ModelConfig,
    layout: Layout,
    params: Vec<F>,
}

impl<F: Real> TinyTransformer<F> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = vec![F::zero(); layout.total];
        let d = cfg.d_model;
        let ff = d * cfg.ff_mult;
        let out_scale = cfg.out_gain / (2.0 * cfg.num_layers as f64).sqrt();
        let mut fill = |params: &mut [F], offset: usize, len: usize, std: f64| {
            for p in &mut params[offset..offset + len] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *p = F::of(z * std);
            }
        };
        fill(&mut params, layout.tok_emb, cfg.vocab_size * d, cfg.embed_std);
        fill(&mut params, layout.pos_emb, cfg.max_context * d, cfg.pos_std);
        let in_std = cfg.proj_gain / (d as f64).sqrt();
        for b in &layout.blocks {
            params[b.attn_norm..b.attn_norm + d].fill(F::one());
            fill(&mut params, b.wq, d * d, in_std);
            fill(&mut params, b.wk, d * d, in_std);
            fill(&mut params, b.wv, d * d, in_std);
            fill(&mut params, b.wo, d * d, in_std * out_scale);
            params[b.ff_norm..b.ff_norm + d].fill(F::one());
            fill(&mut params, b.w1, d * ff, in_std);
            fill(&mut params, b.w2, ff * d, out_scale / (ff as f64).sqrt());
        }
        params[layout.final_norm..layout.final_norm + d].fill(F::one());
        Ok(Self { cfg, layout, params })
    }

    /// The reference model: V=64, d=32, 4 heads, 4 layers, seed 0.
    pub fn reference() -> Self {
        Self::new(ModelConfig::default()).expect("default config is valid")
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn meta(&self) -> ModelMeta {
        let name = if self.cfg.identity_blocks {
            "builtin-identity"
        } else {
            "builtin"
        };
        ModelMeta {
            num_layers: self.cfg.num_layers,
            vocab_size: self.cfg.vocab_size,
            d_model: self.cfg.d_model,
            param_count: self.params.len() as u64,
            name: format!("{name}-seed{}", self.cfg.seed),
        }
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::arg("context is empty"));
        }
        if tokens.len() > self.cfg.max_context {
            return Err(Error::arg(format!(
                "context length {} exceeds maximum {}",
                tokens.len(),
                self.cfg.max_context
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::arg(format!(
                "token {bad} outside vocabulary of size {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    /// Runs every block over `tokens`, keeping what backprop needs.
    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardCache<F>> {
        self.check_tokens(tokens)?;
        let cfg = &self.cfg;
        let d = cfg.d_model;
        let len = tokens.len();
        let p = &self.params;

        let mut x = vec![F::zero(); len * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let e = &p[self.layout.tok_emb + tok as usize * d..][..d];
            let pe = &p[self.layout.pos_emb + t * d..][..d];
            for i in 0..d {
                x[t * d + i] = e[i] + pe[i];
            }
        }

        let mut hidden = vec![x.clone()];
        let mut blocks = Vec::with_capacity(cfg.num_layers);
        for b in &self.layout.blocks {
            if cfg.identity_blocks {
                hidden.push(x.clone());
                continue;
            }
            let (cache, out) = self.block_forward(b, &x, len);
            x = out;
            hidden.push(x.clone());
            blocks.push(cache);
        }

        let gain = &p[self.layout.final_norm..][..d];
        let (xn_final, rms_final) = rms_norm(&x, gain, len, d);
        Ok(ForwardCache {
            tokens: tokens.to_vec(),
            blocks,
            hidden,
            rms_final,
            xn_final,
        })
    }

    fn block_forward(&self, b: &BlockLayout, x: &[F], len: usize) -> (BlockCache<F>, Vec<F>) {
        let d = self.cfg.d_model;
        let heads = self.cfg.num_heads;
        let hd = d / heads;
        let ff = d * self.cfg.ff_mult;
        let p = &self.params;
        let scale = F::one() / F::of(hd as f64).sqrt();

        let (xn1, rms1) = rms_norm(x, &p[b.attn_norm..][..d], len, d);
        let q = matmul(&xn1, &p[b.wq..][..d * d], len, d, d);
        let k = matmul(&xn1, &p[b.wk..][..d * d], len, d, d);
        let v = matmul(&xn1, &p[b.wv..][..d * d], len, d, d);

        let mut att = vec![vec![F::zero(); len * len]; heads];
        let mut heads_out = vec![F::zero(); len * d];
        for (h, att_h) in att.iter_mut().enumerate() {
            let off = h * hd;
            for t in 0..len {
                let row = &mut att_h[t * len..(t + 1) * len];
                let mut max = F::neg_infinity();
                for j in 0..=t {
                    let mut s = F::zero();
                    for i in 0..hd {
                        s += q[t * d + off + i] * k[j * d + off + i];
                    }
                    row[j] = s * scale;
                    max = max.max(row[j]);
                }
                let mut total = F::zero();
                for a in &mut row[..=t] {
                    *a = (*a - max).exp();
                    total += *a;
                }
                for a in &mut row[..=t] {
                    *a /= total;
                }
                for j in 0..=t {
                    let a = row[j];
                    for i in 0..hd {
                        heads_out[t * d + off + i] += a * v[j * d + off + i];
                    }
                }
            }
        }

        let attn = matmul(&heads_out, &p[b.wo..][..d * d], len, d, d);
        let x_mid: Vec<F> = x.iter().zip(&attn).map(|(&a, &b)| a + b).collect();
        let (xn2, rms2) = rms_norm(&x_mid, &p[b.ff_norm..][..d], len, d);
        let pre_act = matmul(&xn2, &p[b.w1..][..d * ff], len, d, ff);
        let act: Vec<F> = pre_act.iter().map(|&u| gelu(u)).collect();
        let ffn = matmul(&act, &p[b.w2..][..ff * d], len, ff, d);
        let out = x_mid.iter().zip(&ffn).map(|(&a, &b)| a + b).collect();

        let cache = BlockCache {
            x_in: x.to_vec(),
            rms1,
            xn1,
            q,
            k,
            v,
            att,
            heads_out,
            x_mid,
            rms2,
            xn2,
            pre_act,
            act,
        };
        (cache, out)
    }

    /// Maps one hidden state through the (optional) final norm and the head.
    fn lens_row(&self, h: &[F], normalize: bool, out: &mut [F]) {
        let d = self.cfg.d_model;
        let p = &self.params;
        let mut xn = h.to_vec();
        if normalize {
            let gain = &p[self.layout.final_norm..][..d];
            let r = rms(h);
            for i in 0..d {
                xn[i] = gain[i] * h[i] / r;
            }
        }
        for (tok, o) in out.iter_mut().enumerate() {
            let e = &p[self.layout.tok_emb + tok * d..][..d];
            *o = xn.iter().zip(e).map(|(&a, &b)| a * b).sum();
        }
    }

    /// Logit-lens rows for every layer at position `pos`: row `i - 1` holds
    /// layer `i`'s premature logits, the last row the model's own output.
    pub fn layer_logits_at(&self, cache: &ForwardCache<F>, pos: usize) -> LayerLogits<F> {
        let d = self.cfg.d_model;
        let v = self.cfg.vocab_size;
        let n = self.cfg.num_layers;
        let mut data = vec![F::zero(); n * v];
        for layer in 1..=n {
            let h = &cache.hidden[layer][pos * d..(pos + 1) * d];
            let normalize = layer == n || self.cfg.normalize_lens;
            self.lens_row(h, normalize, &mut data[(layer - 1) * v..layer * v]);
        }
        LayerLogits::from_parts(pos, n, v, data)
    }

    /// All-layer logits for the last position of `context`.
    pub fn step_logits(&self, context: &[u32]) -> Result<LayerLogits<F>> {
        let cache = self.forward(context)?;
        Ok(self.layer_logits_at(&cache, context.len() - 1))
    }

    /// Final-layer logits for every position, `len x V` row-major.
    pub fn output_logits(&self, cache: &ForwardCache<F>) -> Vec<F> {
        let d = self.cfg.d_model;
        let v = self.cfg.vocab_size;
        let emb = &self.params[self.layout.tok_emb..][..v * d];
        matmul_transposed(&cache.xn_final, emb, cache.len(), d, v)
    }

    /// Parameter gradient given `d loss / d output_logits` (`len x V`).
    pub fn backward(&self, cache: &ForwardCache<F>, d_logits: &[F]) -> Vec<F> {
        let cfg = &self.cfg;
        let d = cfg.d_model;
        let vsz = cfg.vocab_size;
        let len = cache.len();
        let ff = d * cfg.ff_mult;
        let p = &self.params;
        let lay = &self.layout;
        let mut grad = vec![F::zero(); p.len()];

        // tied head
        let emb = &p[lay.tok_emb..][..vsz * d];
        accumulate_outer(
            &mut grad[lay.tok_emb..][..vsz * d],
            d_logits,
            &cache.xn_final,
            len,
            vsz,
            d,
        );
        let d_xn = matmul(d_logits, emb, len, vsz, d);

        let x_last = cache.hidden.last().expect("at least the embedding state");
        let mut dx = vec![F::zero(); len * d];
        rms_norm_backward(
            x_last,
            &p[lay.final_norm..][..d],
            &cache.rms_final,
            &d_xn,
            &mut dx,
            &mut grad[lay.final_norm..][..d],
            len,
            d,
        );

        if !cfg.identity_blocks {
            for (b, c) in lay.blocks.iter().zip(&cache.blocks).rev() {
                self.block_backward(b, c, &mut dx, &mut grad, len, ff);
            }
        }

        for (t, &tok) in cache.tokens.iter().enumerate() {
            let row = &dx[t * d..(t + 1) * d];
            let ge = &mut grad[lay.tok_emb + tok as usize * d..][..d];
            for i in 0..d {
                ge[i] += row[i];
            }
            let gp = &mut grad[lay.pos_emb + t * d..][..d];
            for i in 0..d {
                gp[i] += row[i];
            }
        }
        grad
    }

    /// On entry `dx` is the gradient w.r.t. the block output; on exit the
    /// gradient w.r.t. its input.
    fn block_backward(&self, b: &BlockLayout, c: &BlockCache<F>, dx: &mut [F], grad: &mut [F], len: usize, ff: usize) {
        let d = self.cfg.d_model;
        let heads = self.cfg.num_heads;
        let hd = d / heads;
        let p = &self.params;
        let scale = F::one() / F::of(hd as f64).sqrt();

        // feed-forward branch: out = x_mid + gelu(xn2 W1) W2
        accumulate_outer(&mut grad[b.w2..][..ff * d], &c.act, dx, len, ff, d);
        let mut d_act = matmul_transposed(dx, &p[b.w2..][..ff * d], len, d, ff);
        for (g, &u) in d_act.iter_mut().zip(&c.pre_act) {
            *g *= gelu_grad(u);
        }
        accumulate_outer(&mut grad[b.w1..][..d * ff], &c.xn2, &d_act, len, d, ff);
        let d_xn2 = matmul_transposed(&d_act, &p[b.w1..][..d * ff], len, ff, d);
        let mut d_mid = dx.to_vec();
        rms_norm_backward(
            &c.x_mid,
            &p[b.ff_norm..][..d],
            &c.rms2,
            &d_xn2,
            &mut d_mid,
            &mut grad[b.ff_norm..][..d],
            len,
            d,
        );

        // attention branch: x_mid = x + heads(xn1) Wo
        accumulate_outer(&mut grad[b.wo..][..d * d], &c.heads_out, &d_mid, len, d, d);
        let d_heads = matmul_transposed(&d_mid, &p[b.wo..][..d * d], len, d, d);
        let mut dq = vec![F::zero(); len * d];
        let mut dk = vec![F::zero(); len * d];
        let mut dv = vec![F::zero(); len * d];
        let mut d_att = vec![F::zero(); len];
        for h in 0..heads {
            let off = h * hd;
            let att = &c.att[h];
            for t in 0..len {
                let row = &att[t * len..(t + 1) * len];
                let mut dot = F::zero();
                for j in 0..=t {
                    let mut s = F::zero();
                    for i in 0..hd {
                        s += d_heads[t * d + off + i] * c.v[j * d + off + i];
                        dv[j * d + off + i] += row[j] * d_heads[t * d + off + i];
                    }
                    d_att[j] = s;
                    dot += row[j] * s;
                }
                for j in 0..=t {
                    let ds = row[j] * (d_att[j] - dot) * scale;
                    for i in 0..hd {
                        dq[t * d + off + i] += ds * c.k[j * d + off + i];
                        dk[j * d + off + i] += ds * c.q[t * d + off + i];
                    }
                }
            }
        }
        accumulate_outer(&mut grad[b.wq..][..d * d], &c.xn1, &dq, len, d, d);
        accumulate_outer(&mut grad[b.wk..][..d * d], &c.xn1, &dk, len, d, d);
        accumulate_outer(&mut grad[b.wv..][..d * d], &c.xn1, &dv, len, d, d);
        let mut d_xn1 = matmul_transposed(&dq, &p[b.wq..][..d * d], len, d, d);
        for (a, b2) in d_xn1
            .iter_mut()
            .zip(matmul_transposed(&dk, &p[b.wk..][..d * d], len, d, d))
        {
            *a += b2;
        }
        for (a, b2) in d_xn1
            .iter_mut()
            .zip(matmul_transposed(&dv, &p[b.wv..][..d * d], len, d, d))
        {
            *a += b2;
        }
        dx.copy_from_slice(&d_mid);
        rms_norm_backward(
            &c.x_in,
            &p[b.attn_norm..][..d],
            &c.rms1,
            &d_xn1,
            dx,
            &mut grad[b.attn_norm..][..d],
            len,
            d,
        );
    }
}

fn rms<F: Real>(x: &[F]) -> F {
    let ms = x.iter().map(|&v| v * v).sum::<F>() / F::of(x.len() as f64);
    (ms + F::of(RMS_EPS)).sqrt()
}

fn rms_norm<F: Real>(x: &[F], gain: &[F], len: usize, d: usize) -> (Vec<F>, Vec<F>) {
    let mut out = vec![F::zero(); len * d];
    let mut rs = Vec::with_capacity(len);
    for t in 0..len {
        let row = &x[t * d..(t + 1) * d];
        let r = rms(row);
        for i in 0..d {
            out[t * d + i] = gain[i] * row[i] / r;
        }
        rs.push(r);
    }
    (out, rs)
}

/// Adds `d loss / d x` into `dx` and `d loss / d gain` into `d_gain`.
#[allow(clippy::too_many_arguments)]
fn rms_norm_backward<F: Real>(
    x: &[F],
    gain: &[F],
    rs: &[F],
    dy: &[F],
    dx: &mut [F],
    d_gain: &mut [F],
    len: usize,
    d: usize,
) {
    let df = F::of(d as f64);
    for t in 0..len {
        let r = rs[t];
        let xr = &x[t * d..(t + 1) * d];
        let dyr = &dy[t * d..(t + 1) * d];
        let mut dot = F::zero();
        for i in 0..d {
            d_gain[i] += dyr[i] * xr[i] / r;
            dot += gain[i] * dyr[i] * xr[i];
        }
        let r3 = r * r * r;
        for i in 0..d {
            dx[t * d + i] += gain[i] * dyr[i] / r - xr[i] * dot / (df * r3);
        }
    }
}

fn gelu<F: Real>(x: F) -> F {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + F::of(GELU_COEF) * x * x * x)).tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let half = F::of(0.5);
    let th = (c * (x + F::of(GELU_COEF) * x * x * x)).tanh();
    half * (F::one() + th) + half * x * (F::one() - th * th) * c * (F::one() + F::of(3.0 * GELU_COEF) * x * x)
}

/// `a (rows x inner) * w (inner x cols)`.
fn matmul<F: Real>(a: &[F], w: &[F], rows: usize, inner: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        let o = &mut out[r * cols..(r + 1) * cols];
        for i in 0..inner {
            let av = a[r * inner + i];
            let wr = &w[i * cols..(i + 1) * cols];
            for (oc, &wv) in o.iter_mut().zip(wr) {
                *oc += av * wv;
            }
        }
    }
    out
}

/// `a (rows x inner) * w^T` where `w` is `cols x inner`.
fn matmul_transposed<F: Real>(a: &[F], w: &[F], rows: usize, inner: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        let ar = &a[r * inner..(r + 1) * inner];
        for c in 0..cols {
            let wr = &w[c * inner..(c + 1) * inner];
            out[r * cols + c] = ar.iter().zip(wr).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// `g (m x n) += a^T b` with `a: rows x m`, `b: rows x n`.
fn accumulate_outer<F: Real>(g: &mut [F], a: &[F], b: &[F], rows: usize, m: usize, n: usize) {
    for r in 0..rows {
        let ar = &a[r * m..(r + 1) * m];
        let br = &b[r * n..(r + 1) * n];
        for i in 0..m {
            let av = ar[i];
            if av == F::zero() {
                continue;
            }
            let gr = &mut g[i * n..(i + 1) * n];
            for (gv, &bv) in gr.iter_mut().zip(br) {
                *gv += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_context_gives_identical_logits() {
        let m = TinyTransformer::<f64>::reference();
        let a = m.step_logits(&[1, 2, 3, 4]).unwrap();
        let b = m.step_logits(&[1, 2, 3, 4]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn weights_depend_only_on_seed() {
        let a = TinyTransformer::<f64>::reference();
        let b = TinyTransformer::<f64>::reference();
        assert_eq!(a.params(), b.params());
        let c = TinyTransformer::<f64>::new(ModelConfig {
            seed: 1,
            ..ModelConfig::default()
        })
        .unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn identity_blocks_make_all_rows_equal() {
        let m = TinyTransformer::<f64>::new(ModelConfig {
            identity_blocks: true,
            ..ModelConfig::default()
        })
        .unwrap();
        let step = m.step_logits(&[5, 9, 12]).unwrap();
        let last = step.final_row().to_vec();
        for layer in 0..step.num_layers() {
            assert_eq!(step.row(layer), &last[..]);
        }
    }

    #[test]
    fn rejects_bad_contexts() {
        let m = TinyTransformer::<f64>::reference();
        assert!(m.step_logits(&[]).is_err());
        assert!(m.step_logits(&[64]).is_err());
        assert!(m.step_logits(&vec![0; 129]).is_err());
    }

    #[test]
    fn final_row_matches_output_logits() {
        let m = TinyTransformer::<f64>::reference();
        let toks = [3, 1, 4, 1, 5];
        let cache = m.forward(&toks).unwrap();
        let out = m.output_logits(&cache);
        let v = m.config().vocab_size;
        for pos in 0..toks.len() {
            let step = m.layer_logits_at(&cache, pos);
            for (a, b) in step.final_row().iter().zip(&out[pos * v..(pos + 1) * v]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalization_toggle_only_touches_internal_rows() {
        let on = TinyTransformer::<f64>::reference();
        let off = TinyTransformer::<f64>::new(ModelConfig {
            normalize_lens: false,
            ..ModelConfig::default()
        })
        .unwrap();
        let a = on.step_logits(&[7, 8, 9]).unwrap();
        let b = off.step_logits(&[7, 8, 9]).unwrap();
        assert_eq!(a.final_row(), b.final_row());
        assert_ne!(a.row(0), b.row(0));
    }

    #[test]
    fn backward_matches_finite_differences_on_linear_probe() {
        // loss = sum_t sum_v w[t, v] * logits[t, v]
        let m = TinyTransformer::<f64>::new(ModelConfig {
            max_context: 8,
            ..ModelConfig::default()
        })
        .unwrap();
        let toks = [2u32, 7, 7, 30, 11];
        let v = m.config().vocab_size;
        let w: Vec<f64> = (0..toks.len() * v)
            .map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5)
            .collect();
        let loss = |model: &TinyTransformer<f64>| -> f64 {
            let c = model.forward(&toks).unwrap();
            model.output_logits(&c).iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let cache = m.forward(&toks).unwrap();
        let grad = m.backward(&cache, &w);
        let eps = 1e-5;
        let lay = m.layout().clone();
        let probes = [
            lay.tok_emb + 7 * 32 + 3,
            lay.pos_emb + 2 * 32 + 5,
            lay.blocks[0].wq + 17,
            lay.blocks[1].wk + 100,
            lay.blocks[2].wv + 33,
            lay.blocks[3].wo + 500,
            lay.blocks[1].w1 + 2000,
            lay.blocks[2].w2 + 3000,
            lay.blocks[0].attn_norm + 4,
            lay.blocks[3].ff_norm + 9,
            lay.final_norm + 1,
        ];
        for &idx in &probes {
            let mut plus = m.clone();
            plus.params_mut()[idx] += eps;
            let mut minus = m.clone();
            minus.params_mut()[idx] -= eps;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let rel = (fd - grad[idx]).abs() / fd.abs().max(grad[idx].abs()).max(1e-6);
            assert!(rel < 1e-5, "param {idx}: fd {fd} vs analytic {}", grad[idx]);
        }
    }
}
