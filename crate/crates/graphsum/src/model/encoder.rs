//! Hierarchical encoder: token-level transformer layers within each
//! paragraph, paragraph pooling via the boundary token, then graph encoding
//! layers whose self-attention logits carry the Gaussian graph bias.

use super::{
    add_norm, ffn_sublayer, projected_attention, sinusoidal_positions, BoundParams, ForwardCtx,
    ModelConfig,
};
use crate::error::{Error, Result};
use crate::graph::GraphMatrix;
use crate::tensor::{Tape, Tensor};
use crate::text::{Instance, PBOUND};

/// Encoder memories consumed by the decoder: per-paragraph token states
/// (each `n_j × d`) and pooled paragraph states (`L × d`), both from the
/// same forward pass.
pub struct EncoderOutput {
    pub token_states: Vec<Tensor>,
    pub paragraph_states: Tensor,
    pub token_counts: Vec<usize>,
}

/// Detached encoder memories: plain buffers that outlive the encoding tape,
/// so beam search can re-bind them as constants on each decoding tape.
#[derive(Debug, Clone)]
pub struct EncodedMemory {
    pub d_model: usize,
    pub paragraph_states: Vec<f64>,
    pub token_states: Vec<Vec<f64>>,
    pub token_counts: Vec<usize>,
}

impl EncoderOutput {
    pub fn detach(&self, tape: &Tape) -> EncodedMemory {
        let d = tape.shape(self.paragraph_states)[1];
        EncodedMemory {
            d_model: d,
            paragraph_states: tape.data(self.paragraph_states).to_vec(),
            token_states: self
                .token_states
                .iter()
                .map(|&t| tape.data(t).to_vec())
                .collect(),
            token_counts: self.token_counts.clone(),
        }
    }
}

impl EncodedMemory {
    pub fn bind(&self, tape: &mut Tape) -> Result<EncoderOutput> {
        let l = self.token_counts.len();
        let paragraph_states = tape.leaf(self.paragraph_states.clone(), &[l, self.d_model])?;
        let mut token_states = Vec::with_capacity(l);
        for (data, &n) in self.token_states.iter().zip(&self.token_counts) {
            token_states.push(tape.leaf(data.clone(), &[n, self.d_model])?);
        }
        Ok(EncoderOutput {
            token_states,
            paragraph_states,
            token_counts: self.token_counts.clone(),
        })
    }
}

/// Gaussian bias of the graph weights: `-(1 - G[i][j])^2 / (2 sigma^2)`,
/// flattened row-major. Entries lie in `(-inf, 0]`; weight 1 means no
/// penalty.
pub fn graph_bias(g: &GraphMatrix, sigma: f64) -> Result<Vec<f64>> {
    if sigma <= 0.0 {
        return Err(Error::Config(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let denom = 2.0 * sigma * sigma;
    Ok(g.flat()
        .iter()
        .map(|&w| {
            let gap = 1.0 - w;
            -(gap * gap) / denom
        })
        .collect())
}

fn validate_instance(instance: &Instance, cfg: &ModelConfig, g: &GraphMatrix) -> Result<()> {
    let l = instance.n_paragraphs();
    if l == 0 {
        return Err(Error::Validation("instance has no paragraphs".into()));
    }
    if l > cfg.max_paragraphs {
        return Err(Error::Validation(format!(
            "instance has {l} paragraphs, config allows {}",
            cfg.max_paragraphs
        )));
    }
    if g.size() != l {
        return Err(Error::Validation(format!(
            "graph size {} does not match paragraph count {l}",
            g.size()
        )));
    }
    for (j, p) in instance.paragraphs.iter().enumerate() {
        if p.first() != Some(&PBOUND) {
            return Err(Error::Validation(format!(
                "paragraph {j} does not start with the boundary token"
            )));
        }
        if p.len() < 2 {
            return Err(Error::Validation(format!(
                "paragraph {j} is empty after the boundary token"
            )));
        }
        if p.len() > cfg.max_tokens_per_paragraph + 1 {
            return Err(Error::Validation(format!(
                "paragraph {j} has {} tokens, config allows {}",
                p.len() - 1,
                cfg.max_tokens_per_paragraph
            )));
        }
        if let Some(&bad) = p.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::Validation(format!(
                "paragraph {j} contains id {bad} outside the vocabulary"
            )));
        }
    }
    Ok(())
}

/// Shared-embedding lookup scaled by sqrt(d), plus within-paragraph
/// sinusoidal positions and a learned paragraph-index embedding.
pub fn embed_tokens(
    ctx: &mut ForwardCtx,
    bound: &BoundParams,
    cfg: &ModelConfig,
    instance: &Instance,
) -> Result<Vec<Tensor>> {
    let d = cfg.d_model;
    let table = bound.get("embed.tok");
    let para_table = bound.get("embed.para");
    let mut out = Vec::with_capacity(instance.n_paragraphs());
    for (j, ids) in instance.paragraphs.iter().enumerate() {
        let n = ids.len();
        let emb = ctx.tape.embedding(table, ids)?;
        let emb = ctx.tape.scale(emb, (d as f64).sqrt())?;
        let pos = ctx.tape.leaf(sinusoidal_positions(n, d), &[n, d])?;
        let emb = ctx.tape.add(emb, pos)?;
        let para_row = ctx.tape.slice_rows(para_table, j, 1)?;
        let emb = ctx.tape.add_broadcast_row(emb, para_row)?;
        out.push(ctx.dropout(emb)?);
    }
    Ok(out)
}

/// One transformer layer applied within a single paragraph: self-attention,
/// residual + norm, feed-forward, residual + norm.
pub fn token_encoder_layer(
    ctx: &mut ForwardCtx,
    bound: &BoundParams,
    cfg: &ModelConfig,
    layer: usize,
    states: Tensor,
) -> Result<Tensor> {
    let p = format!("enc.tok{layer}.self");
    let attn = projected_attention(
        ctx,
        states,
        states,
        states,
        bound.get(&format!("{p}.wq")),
        bound.get(&format!("{p}.wk")),
        bound.get(&format!("{p}.wv")),
        Some(bound.get(&format!("{p}.wo"))),
        cfg.heads,
        None,
        None,
    )
    .map_err(|e| e.with_context(&format!("token encoder layer {layer}")))?;
    let states = add_norm(ctx, states, attn, &p, bound)?;
    ffn_sublayer(ctx, states, &format!("enc.tok{layer}.ffn"), bound)
        .map_err(|e| e.with_context(&format!("token encoder layer {layer}")))
}

/// Paragraph vectors: the final token-layer state at each paragraph's
/// boundary-token position, stacked into `L × d`.
pub fn pool_paragraphs(tape: &mut Tape, token_states: &[Tensor]) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(token_states.len());
    for &t in token_states {
        rows.push(tape.slice_rows(t, 0, 1)?);
    }
    tape.concat_rows(&rows)
}

/// One graph encoding layer: multi-head self-attention over paragraph
/// vectors with the shared Gaussian bias added to every head's logits, then
/// the two-matrix feed-forward with the residual inside and a single layer
/// norm after.
pub fn graph_encoding_layer(
    ctx: &mut ForwardCtx,
    bound: &BoundParams,
    cfg: &ModelConfig,
    layer: usize,
    para_states: Tensor,
    bias: Option<Tensor>,
) -> Result<Tensor> {
    let p = format!("enc.graph{layer}");
    let u = projected_attention(
        ctx,
        para_states,
        para_states,
        para_states,
        bound.get(&format!("{p}.attn.wq")),
        bound.get(&format!("{p}.attn.wk")),
        bound.get(&format!("{p}.attn.wv")),
        None,
        cfg.heads,
        bias,
        None,
    )
    .map_err(|e| e.with_context(&format!("graph encoding layer {layer}")))?;
    let summed = ctx.tape.add(u, para_states)?;
    let h = ctx.tape.matmul(summed, bound.get(&format!("{p}.ffn.w1")))?;
    let h = ctx.tape.relu(h)?;
    let h = ctx.tape.matmul(h, bound.get(&format!("{p}.ffn.w2")))?;
    let h = ctx.dropout(h)?;
    let residual = ctx.tape.add(h, para_states)?;
    ctx.tape.layer_norm(
        residual,
        bound.get(&format!("{p}.ln_g")),
        bound.get(&format!("{p}.ln_b")),
        super::LN_EPS,
    )
}

/// Full encoder stack. With `ablate_graph_enc` the Gaussian bias is dropped
/// entirely, so the graph never influences the forward values.
pub fn encode(
    ctx: &mut ForwardCtx,
    bound: &BoundParams,
    cfg: &ModelConfig,
    instance: &Instance,
    g: &GraphMatrix,
) -> Result<EncoderOutput> {
    validate_instance(instance, cfg, g)?;
    let l = instance.n_paragraphs();
    let mut token_states = embed_tokens(ctx, bound, cfg, instance)?;
    for layer in 0..cfg.token_layers {
        for state in token_states.iter_mut() {
            *state = token_encoder_layer(ctx, bound, cfg, layer, *state)?;
        }
    }
    let mut para_states = pool_paragraphs(&mut ctx.tape, &token_states)?;
    let bias = if cfg.ablate_graph_enc {
        None
    } else {
        let bias_values = graph_bias(g, cfg.sigma)?;
        Some(ctx.tape.leaf(bias_values, &[l, l])?)
    };
    for layer in 0..cfg.graph_enc_layers {
        para_states = graph_encoding_layer(ctx, bound, cfg, layer, para_states, bias)?;
    }
    let token_counts = instance.paragraphs.iter().map(Vec::len).collect();
    Ok(EncoderOutput {
        token_states,
        paragraph_states: para_states,
        token_counts,
    })
}
