//! The graph-informed hierarchical encoder-decoder.
//!
//! [`encoder`] stacks token-level transformer layers (self-attention within
//! each paragraph) under paragraph-level graph encoding layers whose
//! attention logits carry a Gaussian bias from the paragraph graph.
//! [`decoder`] stacks graph decoding layers whose cross-attention is split
//! into a graph-regularized global distribution over paragraphs and local
//! distributions over each paragraph's tokens.

pub mod decoder;
pub mod encoder;

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Model geometry and runtime behavior. The defaults are the desk-scale
/// configuration; [`ModelConfig::paper_scale`] restores the full-size layout.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub token_layers: usize,
    pub graph_enc_layers: usize,
    pub graph_dec_layers: usize,
    pub sigma: f64,
    pub dropout: f64,
    pub max_paragraphs: usize,
    pub max_tokens_per_paragraph: usize,
    pub max_summary_tokens: usize,
    pub vocab_size: usize,
    /// Disable the Gaussian bias in the encoder's graph attention.
    pub ablate_graph_enc: bool,
    /// Disable the Gaussian penalty in the decoder's global attention.
    pub ablate_graph_dec: bool,
    /// Round the central position to the nearest cell center instead of
    /// interpolating graph rows. Rounding detaches the position predictor
    /// from the loss, so interpolation is the default.
    pub round_central_position: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            d_ff: 256,
            heads: 4,
            token_layers: 2,
            graph_enc_layers: 1,
            graph_dec_layers: 2,
            sigma: 2.0,
            dropout: 0.1,
            max_paragraphs: 40,
            max_tokens_per_paragraph: 70,
            max_summary_tokens: 128,
            vocab_size: 0,
            ablate_graph_enc: false,
            ablate_graph_dec: false,
            round_central_position: false,
        }
    }
}

impl ModelConfig {
    /// The full-size layout: 256 hidden units, 1024 feed-forward, 8 heads,
    /// 6 token / 2 graph encoding / 8 graph decoding layers.
    pub fn paper_scale() -> Self {
        ModelConfig {
            d_model: 256,
            d_ff: 1024,
            heads: 8,
            token_layers: 6,
            graph_enc_layers: 2,
            graph_dec_layers: 8,
            ..ModelConfig::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.sigma <= 0.0 {
            return Err(Error::Config(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must satisfy 0 <= p < 1, got {}",
                self.dropout
            )));
        }
        if self.vocab_size < crate::text::RESERVED + 1 {
            return Err(Error::Config(format!(
                "vocab_size {} is too small",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

/// One named learnable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named parameter collection. Iteration follows sorted name order, which
/// keeps initialization, updates and serialization deterministic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    tensors: BTreeMap<String, ParamTensor>,
}

fn push_layer_norm(specs: &mut Vec<(String, Vec<usize>)>, prefix: &str, d: usize) {
    specs.push((format!("{prefix}.ln_g"), vec![d]));
    specs.push((format!("{prefix}.ln_b"), vec![d]));
}

fn push_ffn(specs: &mut Vec<(String, Vec<usize>)>, prefix: &str, d: usize, d_ff: usize) {
    specs.push((format!("{prefix}.w1"), vec![d, d_ff]));
    specs.push((format!("{prefix}.b1"), vec![d_ff]));
    specs.push((format!("{prefix}.w2"), vec![d_ff, d]));
    specs.push((format!("{prefix}.b2"), vec![d]));
    push_layer_norm(specs, prefix, d);
}

fn push_self_attention(specs: &mut Vec<(String, Vec<usize>)>, prefix: &str, d: usize) {
    for w in ["wq", "wk", "wv", "wo"] {
        specs.push((format!("{prefix}.{w}"), vec![d, d]));
    }
    push_layer_norm(specs, prefix, d);
}

/// Full parameter layout for a configuration, in declaration order.
pub fn parameter_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, d_ff, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let mut specs = Vec::new();
    specs.push(("embed.tok".to_string(), vec![v, d]));
    specs.push(("embed.para".to_string(), vec![cfg.max_paragraphs, d]));
    for i in 0..cfg.token_layers {
        push_self_attention(&mut specs, &format!("enc.tok{i}.self"), d);
        push_ffn(&mut specs, &format!("enc.tok{i}.ffn"), d, d_ff);
    }
    for i in 0..cfg.graph_enc_layers {
        let p = format!("enc.graph{i}");
        for w in ["wq", "wk", "wv"] {
            specs.push((format!("{p}.attn.{w}"), vec![d, d]));
        }
        // Graph-layer feed-forward: two matrices, no biases, one layer norm.
        specs.push((format!("{p}.ffn.w1"), vec![d, d_ff]));
        specs.push((format!("{p}.ffn.w2"), vec![d_ff, d]));
        push_layer_norm(&mut specs, &p, d);
    }
    for i in 0..cfg.graph_dec_layers {
        push_self_attention(&mut specs, &format!("dec{i}.self"), d);
        let h = format!("dec{i}.hier");
        specs.push((format!("{h}.wp"), vec![d, d]));
        specs.push((format!("{h}.up"), vec![d, 1]));
        specs.push((format!("{h}.glob.wq"), vec![d, d]));
        specs.push((format!("{h}.glob.wk"), vec![d, d]));
        specs.push((format!("{h}.loc.wq"), vec![d, d]));
        specs.push((format!("{h}.loc.wk"), vec![d, d]));
        specs.push((format!("{h}.ud"), vec![2 * d, d]));
        push_layer_norm(&mut specs, &h, d);
        push_ffn(&mut specs, &format!("dec{i}.ffn"), d, d_ff);
    }
    specs
}

impl ModelParams {
    /// Xavier-uniform matrices, unit gains, zero offsets/biases, drawn from
    /// one seeded stream in declaration order.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
        cfg.validate()?;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in parameter_specs(cfg) {
            let n: usize = shape.iter().product();
            let data = if shape.len() == 1 {
                if name.ends_with("ln_g") {
                    vec![1.0; n]
                } else {
                    vec![0.0; n]
                }
            } else {
                let (fan_in, fan_out) = (shape[0] as f64, shape[1] as f64);
                let limit = (6.0 / (fan_in + fan_out)).sqrt();
                (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
            };
            tensors.insert(name, ParamTensor { shape, data });
        }
        Ok(ModelParams { tensors })
    }

    pub fn from_tensors(tensors: BTreeMap<String, ParamTensor>) -> ModelParams {
        ModelParams { tensors }
    }

    pub fn get(&self, name: &str) -> &ParamTensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ParamTensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamTensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamTensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }
}

/// Tape handles for every parameter of one forward pass.
pub struct BoundParams {
    handles: BTreeMap<String, Tensor>,
}

impl BoundParams {
    /// Registers every parameter as a differentiable leaf.
    pub fn bind(tape: &mut Tape, params: &ModelParams) -> Result<BoundParams> {
        let mut handles = BTreeMap::new();
        for (name, tensor) in params.iter() {
            let handle = tape.param(tensor.data.clone(), &tensor.shape)?;
            handles.insert(name.clone(), handle);
        }
        Ok(BoundParams { handles })
    }

    pub fn get(&self, name: &str) -> Tensor {
        *self
            .handles
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' not bound"))
    }

    /// Gradients per parameter after `tape.backward`; parameters the loss
    /// never touched yield zeros.
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Vec<f64>> {
        self.handles
            .iter()
            .map(|(name, &h)| {
                let g = tape
                    .grad(h)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; tape.numel(h)]);
                (name.clone(), g)
            })
            .collect()
    }
}

/// Per-pass forward context: the tape plus dropout state.
pub struct ForwardCtx<'r> {
    pub tape: Tape,
    pub train: bool,
    pub dropout: f64,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> ForwardCtx<'r> {
    pub fn eval() -> ForwardCtx<'static> {
        ForwardCtx {
            tape: Tape::new(),
            train: false,
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn train(dropout: f64, rng: &'r mut ChaCha8Rng) -> ForwardCtx<'r> {
        ForwardCtx {
            tape: Tape::new(),
            train: true,
            dropout,
            rng: Some(rng),
        }
    }

    /// Dropout in training mode, identity otherwise.
    pub fn dropout(&mut self, x: Tensor) -> Result<Tensor> {
        if !self.train || self.dropout == 0.0 {
            return Ok(x);
        }
        let rng = self
            .rng
            .as_deref_mut()
            .ok_or_else(|| Error::Config("training forward pass without an RNG".into()))?;
        self.tape.dropout(x, self.dropout, true, rng)
    }
}

/// Within-sequence sinusoidal position encoding, flattened row-major n×d.
pub fn sinusoidal_positions(n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            out[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

pub(crate) const LN_EPS: f64 = 1e-6;

/// Multi-head scaled dot-product attention with projected values and an
/// optional additive bias shared by every head's logits.
#[allow(clippy::too_many_arguments)]
pub(crate) fn projected_attention(
    ctx: &mut ForwardCtx,
    queries: Tensor,
    keys: Tensor,
    values: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Option<Tensor>,
    heads: usize,
    bias: Option<Tensor>,
    mask: Option<&[bool]>,
) -> Result<Tensor> {
    let d = ctx.tape.shape(queries)[1];
    let head_dim = d / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let q_full = ctx.tape.matmul(queries, wq)?;
    let k_full = ctx.tape.matmul(keys, wk)?;
    let v_full = ctx.tape.matmul(values, wv)?;
    let mut contexts = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = ctx.tape.slice_cols(q_full, h * head_dim, head_dim)?;
        let k = ctx.tape.slice_cols(k_full, h * head_dim, head_dim)?;
        let v = ctx.tape.slice_cols(v_full, h * head_dim, head_dim)?;
        let kt = ctx.tape.transpose(k)?;
        let scores = ctx.tape.matmul(q, kt)?;
        let scores = ctx.tape.scale(scores, scale)?;
        let attn = ctx.tape.softmax_with_bias(scores, bias, mask)?;
        let attn = ctx.dropout(attn)?;
        contexts.push(ctx.tape.matmul(attn, v)?);
    }
    let merged = ctx.tape.concat_cols(&contexts)?;
    match wo {
        Some(wo) => ctx.tape.matmul(merged, wo),
        None => Ok(merged),
    }
}

/// Residual + layer norm around a sublayer output (dropout applied to the
/// sublayer result first).
pub(crate) fn add_norm(
    ctx: &mut ForwardCtx,
    x: Tensor,
    sublayer: Tensor,
    prefix: &str,
    bound: &BoundParams,
) -> Result<Tensor> {
    let sublayer = ctx.dropout(sublayer)?;
    let sum = ctx.tape.add(x, sublayer)?;
    ctx.tape.layer_norm(
        sum,
        bound.get(&format!("{prefix}.ln_g")),
        bound.get(&format!("{prefix}.ln_b")),
        LN_EPS,
    )
}

/// Position-wise feed-forward sublayer with residual and layer norm.
pub(crate) fn ffn_sublayer(
    ctx: &mut ForwardCtx,
    x: Tensor,
    prefix: &str,
    bound: &BoundParams,
) -> Result<Tensor> {
    let h = ctx.tape.matmul(x, bound.get(&format!("{prefix}.w1")))?;
    let h = ctx
        .tape
        .add_broadcast_row(h, bound.get(&format!("{prefix}.b1")))?;
    let h = ctx.tape.relu(h)?;
    let h = ctx.tape.matmul(h, bound.get(&format!("{prefix}.w2")))?;
    let h = ctx
        .tape
        .add_broadcast_row(h, bound.get(&format!("{prefix}.b2")))?;
    add_norm(ctx, x, h, prefix, bound)
}

/// Teacher-forced label-smoothed loss on one instance, summed over target
/// positions. The prefix is the summary without its final token; targets are
/// the summary shifted left. Returns the scalar sum and the position count.
pub fn instance_loss_sum(
    ctx: &mut ForwardCtx,
    bound: &BoundParams,
    cfg: &ModelConfig,
    instance: &crate::text::Instance,
    g: &crate::graph::GraphMatrix,
    label_smoothing: f64,
) -> Result<(Tensor, usize)> {
    if instance.summary.len() < 2 {
        return Err(Error::Validation(
            "instance summary has no target positions".into(),
        ));
    }
    let enc = encoder::encode(ctx, bound, cfg, instance, g)?;
    let prefix = &instance.summary[..instance.summary.len() - 1];
    let targets = &instance.summary[1..];
    let logits = decoder::decode_logits(ctx, bound, cfg, prefix, &enc, g)?;
    ctx.tape
        .cross_entropy_label_smoothed_sum(logits, targets, label_smoothing, crate::text::PAD)
}

/// Evaluation-mode loss value for one instance (mean over target positions).
/// Used by finite-difference oracles, which only ever need forward values.
pub fn eval_loss_value(
    params: &ModelParams,
    cfg: &ModelConfig,
    instance: &crate::text::Instance,
    g: &crate::graph::GraphMatrix,
    label_smoothing: f64,
) -> Result<f64> {
    let mut ctx = ForwardCtx::eval();
    let bound = BoundParams::bind(&mut ctx.tape, params)?;
    let (sum, count) = instance_loss_sum(&mut ctx, &bound, cfg, instance, g, label_smoothing)?;
    Ok(ctx.tape.value(sum) / count as f64)
}

#[cfg(test)]
mod tests;
