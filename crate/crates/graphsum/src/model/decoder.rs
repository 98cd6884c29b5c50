//! Graph decoding layers: masked summary self-attention, then hierarchical
//! graph attention (a graph-regularized global distribution over paragraphs
//! combined with local distributions over each paragraph's tokens), then a
//! position-wise feed-forward, each with residual + layer norm.

use super::{
    add_norm, ffn_sublayer, projected_attention, sinusoidal_positions, BoundParams, ForwardCtx,
    ModelConfig,
};
use crate::error::{Error, Result};
use crate::graph::GraphMatrix;
use crate::model::encoder::EncoderOutput;
use crate::tensor::Tensor;
use crate::text::{BOS, PAD};

/// Central positions for every summary position: `s_t = L * sigmoid(U_p^T
/// tanh(W_p y_t))`, returned as a `T×1` tensor with values in `(0, L)`.
pub fn predict_central_positions(
    ctx: &mut ForwardCtx,
    bound: &BoundParams,
    layer: usize,
    summary_states: Tensor,
    n_paragraphs: usize,
) -> Result<Tensor> {
    let h = format!("dec{layer}.hier");
    let hidden = ctx
        .tape
        .matmul(summary_states, bound.get(&format!("{h}.wp")))?;
    let hidden = ctx.tape.tanh(hidden)?;
    let raw = ctx.tape.matmul(hidden, bound.get(&format!("{h}.up")))?;
    let squashed = ctx.tape.sigmoid(raw)?;
    ctx.tape.scale(squashed, n_paragraphs as f64)
}

/// Gaussian penalty rows for the global attention: interpolates the graph
/// row at each position's `s_t` and maps weight w to `-(1-w)^2 / (2 sigma^2)`.
fn graph_penalty(
    ctx: &mut ForwardCtx,
    cfg: &ModelConfig,
    positions: Tensor,
    g: &GraphMatrix,
) -> Result<Tensor> {
    let l = g.size();
    let positions = if cfg.round_central_position {
        // Snap to the nearest cell center; this detaches the position
        // predictor from the gradient flow.
        let snapped: Vec<f64> = ctx
            .tape
            .data(positions)
            .iter()
            .map(|&s| (s - 0.5).round().clamp(0.0, (l - 1) as f64) + 0.5)
            .collect();
        let t = snapped.len();
        ctx.tape.leaf(snapped, &[t, 1])?
    } else {
        positions
    };
    let rows = ctx.tape.interp_rows(positions, g.flat(), l, l)?;
    let gap = ctx.tape.affine(rows, -1.0, 1.0)?;
    let sq = ctx.tape.mul(gap, gap)?;
    ctx.tape.scale(sq, -1.0 / (2.0 * cfg.sigma * cfg.sigma))
}

/// Hierarchical attention results, with the intermediate distributions kept
/// addressable for invariant checks (each beta row sums to 1; each gamma_hat
/// joint distribution over all tokens sums to 1).
pub struct HierarchicalAttention {
    /// Fused output `U_d^T [g_t, l_t]`, `T×d`.
    pub output: Tensor,
    /// Concatenated per-head global context vectors, `T×d`.
    pub global: Tensor,
    /// Concatenated per-head local context vectors, `T×d`.
    pub local: Tensor,
    /// Per head: global attention over paragraphs, `T×L`.
    pub beta: Vec<Tensor>,
    /// Per head, per paragraph: normalized local attention, `T×n_j`.
    pub gamma_hat: Vec<Vec<Tensor>>,
}

/// Hierarchical graph attention for one layer. Per head: a global
/// distribution over paragraphs biased by the Gaussian penalty (shared
/// across heads, one `s_t` per position), and per-paragraph local
/// distributions normalized by the global weights. Head outputs are
/// concatenated and the global/local pair is fused by one linear map.
pub fn hierarchical_attention(
    ctx: &mut ForwardCtx,
    bound: &BoundParams,
    cfg: &ModelConfig,
    layer: usize,
    summary_states: Tensor,
    enc: &EncoderOutput,
    g: &GraphMatrix,
) -> Result<HierarchicalAttention> {
    let h = format!("dec{layer}.hier");
    let l = g.size();
    let heads = cfg.heads;
    let head_dim = cfg.head_dim();
    let scale = 1.0 / (head_dim as f64).sqrt();

    let penalty = if cfg.ablate_graph_dec {
        None
    } else {
        let positions = predict_central_positions(ctx, bound, layer, summary_states, l)?;
        Some(graph_penalty(ctx, cfg, positions, g)?)
    };

    let q_glob = ctx
        .tape
        .matmul(summary_states, bound.get(&format!("{h}.glob.wq")))?;
    let k_glob = ctx
        .tape
        .matmul(enc.paragraph_states, bound.get(&format!("{h}.glob.wk")))?;
    let q_loc = ctx
        .tape
        .matmul(summary_states, bound.get(&format!("{h}.loc.wq")))?;
    let loc_wk = bound.get(&format!("{h}.loc.wk"));
    let k_loc: Vec<Tensor> = enc
        .token_states
        .iter()
        .map(|&t| ctx.tape.matmul(t, loc_wk))
        .collect::<Result<_>>()?;

    let mut globals = Vec::with_capacity(heads);
    let mut locals = Vec::with_capacity(heads);
    let mut betas = Vec::with_capacity(heads);
    let mut gamma_hats = Vec::with_capacity(heads);
    for head in 0..heads {
        let offset = head * head_dim;
        let q = ctx.tape.slice_cols(q_glob, offset, head_dim)?;
        let k = ctx.tape.slice_cols(k_glob, offset, head_dim)?;
        let kt = ctx.tape.transpose(k)?;
        let scores = ctx.tape.matmul(q, kt)?;
        let scores = ctx.tape.scale(scores, scale)?;
        let beta = ctx.tape.softmax_with_bias(scores, penalty, None)?;
        let beta = ctx.dropout(beta)?;
        betas.push(beta);

        // Global context: beta-weighted sum of the paragraph vectors
        // themselves (this head's slice).
        let para_slice = ctx.tape.slice_cols(enc.paragraph_states, offset, head_dim)?;
        globals.push(ctx.tape.matmul(beta, para_slice)?);

        // Local context: within-paragraph attention, renormalized by beta.
        let ql = ctx.tape.slice_cols(q_loc, offset, head_dim)?;
        let mut head_gamma_hats = Vec::with_capacity(enc.token_states.len());
        let mut local_sum: Option<Tensor> = None;
        for (j, (&tokens, &k_loc_j)) in enc.token_states.iter().zip(&k_loc).enumerate() {
            let klh = ctx.tape.slice_cols(k_loc_j, offset, head_dim)?;
            let klt = ctx.tape.transpose(klh)?;
            let scores = ctx.tape.matmul(ql, klt)?;
            let scores = ctx.tape.scale(scores, scale)?;
            let gamma = ctx.tape.softmax_with_bias(scores, None, None)?;
            let gamma = ctx.dropout(gamma)?;
            let beta_j = ctx.tape.slice_cols(beta, j, 1)?;
            let gamma_hat = ctx.tape.scale_rows(gamma, beta_j)?;
            head_gamma_hats.push(gamma_hat);
            let tok_slice = ctx.tape.slice_cols(tokens, offset, head_dim)?;
            let contribution = ctx.tape.matmul(gamma_hat, tok_slice)?;
            local_sum = Some(match local_sum {
                Some(acc) => ctx.tape.add(acc, contribution)?,
                None => contribution,
            });
        }
        gamma_hats.push(head_gamma_hats);
        locals.push(local_sum.expect("validated instances have paragraphs"));
    }

    let global = ctx.tape.concat_cols(&globals)?;
    let local = ctx.tape.concat_cols(&locals)?;
    let fused = ctx.tape.concat_cols(&[global, local])?;
    let output = ctx.tape.matmul(fused, bound.get(&format!("{h}.ud")))?;
    Ok(HierarchicalAttention {
        output,
        global,
        local,
        beta: betas,
        gamma_hat: gamma_hats,
    })
}

/// One graph decoding layer: causal self-attention, hierarchical graph
/// attention, feed-forward; each sublayer wrapped in residual + layer norm.
pub fn graph_decoding_layer(
    ctx: &mut ForwardCtx,
    bound: &BoundParams,
    cfg: &ModelConfig,
    layer: usize,
    summary_states: Tensor,
    enc: &EncoderOutput,
    g: &GraphMatrix,
    causal_mask: &[bool],
) -> Result<Tensor> {
    let p = format!("dec{layer}.self");
    let attn = projected_attention(
        ctx,
        summary_states,
        summary_states,
        summary_states,
        bound.get(&format!("{p}.wq")),
        bound.get(&format!("{p}.wk")),
        bound.get(&format!("{p}.wv")),
        Some(bound.get(&format!("{p}.wo"))),
        cfg.heads,
        None,
        Some(causal_mask),
    )
    .map_err(|e| e.with_context(&format!("graph decoding layer {layer}")))?;
    let states = add_norm(ctx, summary_states, attn, &p, bound)?;

    let fused = hierarchical_attention(ctx, bound, cfg, layer, states, enc, g)
        .map_err(|e| e.with_context(&format!("graph decoding layer {layer}")))?;
    let states = add_norm(ctx, states, fused.output, &format!("dec{layer}.hier"), bound)?;

    ffn_sublayer(ctx, states, &format!("dec{layer}.ffn"), bound)
        .map_err(|e| e.with_context(&format!("graph decoding layer {layer}")))
}

fn validate_prefix(prefix: &[usize], vocab_size: usize) -> Result<()> {
    if prefix.first() != Some(&BOS) {
        return Err(Error::Validation(
            "summary prefix must start with the BOS token".into(),
        ));
    }
    if prefix.iter().any(|&id| id == PAD) {
        return Err(Error::Validation(
            "summary prefix contains padding".into(),
        ));
    }
    if let Some(&bad) = prefix.iter().find(|&&id| id >= vocab_size) {
        return Err(Error::Validation(format!(
            "summary prefix id {bad} outside the vocabulary"
        )));
    }
    Ok(())
}

/// Position `q` may attend to keys `k <= q`.
pub fn causal_mask(t: usize) -> Vec<bool> {
    let mut mask = vec![false; t * t];
    for q in 0..t {
        for k in 0..=q {
            mask[q * t + k] = true;
        }
    }
    mask
}

/// Full decoder: embeds the BOS-led prefix, runs every graph decoding layer,
/// and projects with the transposed shared embedding, giving `T×V` logits.
pub fn decode_logits(
    ctx: &mut ForwardCtx,
    bound: &BoundParams,
    cfg: &ModelConfig,
    prefix: &[usize],
    enc: &EncoderOutput,
    g: &GraphMatrix,
) -> Result<Tensor> {
    validate_prefix(prefix, cfg.vocab_size)?;
    let (t, d) = (prefix.len(), cfg.d_model);
    let table = bound.get("embed.tok");
    let emb = ctx.tape.embedding(table, prefix)?;
    let emb = ctx.tape.scale(emb, (d as f64).sqrt())?;
    let pos = ctx.tape.leaf(sinusoidal_positions(t, d), &[t, d])?;
    let emb = ctx.tape.add(emb, pos)?;
    let mut states = ctx.dropout(emb)?;

    let mask = causal_mask(t);
    for layer in 0..cfg.graph_dec_layers {
        states = graph_decoding_layer(ctx, bound, cfg, layer, states, enc, g, &mask)?;
    }
    let projection = ctx.tape.transpose(table)?;
    ctx.tape.matmul(states, projection)
}
