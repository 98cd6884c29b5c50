//! Maximum-likelihood training: label-smoothed cross entropy, gradient
//! accumulation, global-norm clipping, Adam with the inverse-square-root
//! warmup schedule, and checksum-guarded binary checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::GraphMatrix;
use crate::model::{instance_loss_sum, BoundParams, ForwardCtx, ModelConfig, ModelParams, ParamTensor};
use crate::text::{Instance, Vocabulary};

/// Optimization recipe. Defaults are desk-scale; the full-scale run uses
/// `lr_factor = 2.0` and `warmup_steps = 8000`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_factor: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    /// Micro-steps accumulated into one optimizer update.
    pub accumulation: usize,
    /// Instances per micro-step.
    pub micro_batch: usize,
    pub label_smoothing: f64,
    pub max_steps: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_factor: 1.0,
            warmup_steps: 400,
            beta1: 0.9,
            beta2: 0.998,
            eps: 1e-9,
            clip_norm: 2.0,
            accumulation: 4,
            micro_batch: 1,
            label_smoothing: 0.1,
            max_steps: 2000,
            seed: 42,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.accumulation == 0 || self.micro_batch == 0 {
            return Err(Error::Config(
                "accumulation and micro_batch must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label smoothing must satisfy 0 <= e < 1, got {}",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

/// Inverse-square-root schedule with linear warmup:
/// `factor * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
/// Peaks exactly at `step == warmup_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig, d_model: usize) -> Result<f64> {
    if step == 0 {
        return Err(Error::Config("learning-rate schedule starts at step 1".into()));
    }
    let s = step as f64;
    let w = cfg.warmup_steps as f64;
    Ok(cfg.lr_factor * (d_model as f64).powf(-0.5) * (s.powf(-0.5)).min(s * w.powf(-1.5)))
}

/// Scales gradients so the global L2 norm does not exceed `clip_norm`.
/// Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut BTreeMap<String, Vec<f64>>, clip_norm: f64) -> f64 {
    let norm: f64 = grads
        .values()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > clip_norm {
        let scale = clip_norm / norm;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// First and second Adam moments per parameter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn zeros_like(params: &ModelParams) -> AdamState {
        let zero = |(name, t): (&String, &ParamTensor)| (name.clone(), vec![0.0; t.data.len()]);
        AdamState {
            m: params.iter().map(zero).collect(),
            v: params.iter().map(zero).collect(),
        }
    }
}

/// One Adam update with bias correction at step `t` (1-based).
pub fn adam_update(
    params: &mut ModelParams,
    adam: &mut AdamState,
    grads: &BTreeMap<String, Vec<f64>>,
    cfg: &TrainConfig,
    lr: f64,
    t: u64,
) {
    let bias1 = 1.0 - cfg.beta1.powi(t as i32);
    let bias2 = 1.0 - cfg.beta2.powi(t as i32);
    for (name, tensor) in params.iter_mut() {
        let g = &grads[name];
        let m = adam.m.get_mut(name).expect("moment missing");
        let v = adam.v.get_mut(name).expect("moment missing");
        for i in 0..tensor.data.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            tensor.data[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

/// Everything a resumable training run needs.
pub struct TrainState {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub vocab: Vocabulary,
    pub params: ModelParams,
    pub adam: AdamState,
    /// Completed optimizer steps.
    pub step: u64,
    /// Instances consumed from the corpus stream (wraps around).
    pub data_cursor: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
        vocab: Vocabulary,
    ) -> Result<TrainState> {
        train_cfg.validate()?;
        let params = ModelParams::init(&model_cfg, train_cfg.seed)?;
        let adam = AdamState::zeros_like(&params);
        // Stream 1 keeps dropout draws disjoint from the stream-0 draws used
        // by parameter initialization.
        let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
        rng.set_stream(1);
        Ok(TrainState {
            model_cfg,
            train_cfg,
            vocab,
            params,
            adam,
            step: 0,
            data_cursor: 0,
            rng,
        })
    }
}

/// One optimizer step over `accumulation * micro_batch` instances: per
/// instance, forward the summed loss and accumulate gradients; then divide
/// by the total target count, clip, and apply Adam. Returns the mean loss
/// per target token.
pub fn train_step(state: &mut TrainState, batch: &[(&Instance, &GraphMatrix)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Validation("empty training batch".into()));
    }
    let mut grads: BTreeMap<String, Vec<f64>> = state
        .params
        .iter()
        .map(|(name, t)| (name.clone(), vec![0.0; t.data.len()]))
        .collect();
    let mut loss_sum = 0.0;
    let mut token_count = 0usize;
    for (instance, graph) in batch {
        let mut ctx = ForwardCtx::train(state.model_cfg.dropout, &mut state.rng);
        let bound = BoundParams::bind(&mut ctx.tape, &state.params)?;
        let (sum, count) = instance_loss_sum(
            &mut ctx,
            &bound,
            &state.model_cfg,
            instance,
            graph,
            state.train_cfg.label_smoothing,
        )
        .map_err(|e| e.with_context(&format!("step {}", state.step + 1)))?;
        loss_sum += ctx.tape.value(sum);
        token_count += count;
        ctx.tape.backward(sum)?;
        for (name, g) in bound.grads(&ctx.tape) {
            let acc = grads.get_mut(&name).expect("gradient for unknown parameter");
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
    }
    let scale = 1.0 / token_count as f64;
    for g in grads.values_mut() {
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
    clip_gradients(&mut grads, state.train_cfg.clip_norm);
    state.step += 1;
    let lr = lr_at(state.step as usize, &state.train_cfg, state.model_cfg.d_model)?;
    adam_update(
        &mut state.params,
        &mut state.adam,
        &grads,
        &state.train_cfg,
        lr,
        state.step,
    );
    Ok(loss_sum / token_count as f64)
}

/// Per-step log record, one JSON object per line in training logs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Runs training from `state.step` to `max_steps`, drawing instances from
/// `data` in wrap-around order. `on_step` observes every completed step and
/// may persist checkpoints.
pub fn train_loop(
    state: &mut TrainState,
    data: &[(Instance, GraphMatrix)],
    mut on_step: impl FnMut(&StepLog, &TrainState) -> Result<()>,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Validation("training corpus is empty".into()));
    }
    for (i, (instance, graph)) in data.iter().enumerate() {
        if graph.size() != instance.n_paragraphs() {
            return Err(Error::Validation(format!(
                "instance {i}: graph size {} != paragraph count {}",
                graph.size(),
                instance.n_paragraphs()
            )));
        }
    }
    let per_step = state.train_cfg.accumulation * state.train_cfg.micro_batch;
    while state.step < state.train_cfg.max_steps as u64 {
        let batch: Vec<(&Instance, &GraphMatrix)> = (0..per_step)
            .map(|i| {
                let idx = ((state.data_cursor + i as u64) % data.len() as u64) as usize;
                (&data[idx].0, &data[idx].1)
            })
            .collect();
        let loss = train_step(state, &batch)?;
        state.data_cursor = (state.data_cursor + per_step as u64) % data.len() as u64;
        let lr = lr_at(state.step as usize, &state.train_cfg, state.model_cfg.d_model)?;
        let log = StepLog {
            step: state.step,
            lr,
            loss,
        };
        on_step(&log, state)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints: magic, version, JSON header, raw little-endian f64 payload,
// SHA-256 footer.

const MAGIC: &[u8; 8] = b"GSUMCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    kind: String, // param | adam_m | adam_v
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    train: TrainConfig,
    vocab: Vec<String>,
    step: u64,
    data_cursor: u64,
    rng_seed: Vec<u8>,
    rng_stream: u64,
    rng_word_pos_hi: u64,
    rng_word_pos_lo: u64,
    tensors: Vec<TensorEntry>,
}

/// Serializes the full training state. Byte-for-byte reproducible for a
/// given state.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    for (name, t) in state.params.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape.clone(),
            kind: "param".into(),
        });
        payload.extend_from_slice(&t.data);
    }
    for (name, m) in &state.adam.m {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: vec![m.len()],
            kind: "adam_m".into(),
        });
        payload.extend_from_slice(m);
    }
    for (name, v) in &state.adam.v {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: vec![v.len()],
            kind: "adam_v".into(),
        });
        payload.extend_from_slice(v);
    }
    let word_pos = state.rng.get_word_pos();
    let header = CheckpointHeader {
        model: state.model_cfg.clone(),
        train: state.train_cfg.clone(),
        vocab: state.vocab.ordered_tokens().to_vec(),
        step: state.step,
        data_cursor: state.data_cursor,
        rng_seed: state.rng.get_seed().to_vec(),
        rng_stream: state.rng.get_stream(),
        rng_word_pos_hi: (word_pos >> 64) as u64,
        rng_word_pos_lo: word_pos as u64,
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut out = Vec::with_capacity(header_bytes.len() + payload.len() * 8 + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for v in &payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    fs::write(path, out)
        .map_err(|e| Error::Io(format!("writing checkpoint {}: {e}", path.display())))?;
    Ok(())
}

/// Reads and verifies a checkpoint: magic, version, checksum, tensor shapes.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Io(format!("reading checkpoint {}: {e}", path.display())))?;
    if bytes.len() < MAGIC.len() + 4 + 8 + 32 {
        return Err(Error::Integrity("checkpoint file is truncated".into()));
    }
    let (body, footer) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != footer {
        return Err(Error::Integrity(
            "checkpoint checksum mismatch (corrupt or truncated file)".into(),
        ));
    }
    if &body[..8] != MAGIC {
        return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Validation(format!(
            "checkpoint version {version} is not supported (expected {VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    if body.len() < 20 + header_len {
        return Err(Error::Integrity("checkpoint header is truncated".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[20..20 + header_len])
        .map_err(|e| Error::Integrity(format!("checkpoint header unreadable: {e}")))?;

    let mut offset = 20 + header_len;
    let mut read_tensor = |len: usize| -> Result<Vec<f64>> {
        let end = offset + len * 8;
        if body.len() < end {
            return Err(Error::Integrity("checkpoint payload is truncated".into()));
        }
        let values = body[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset = end;
        Ok(values)
    };

    let mut params = BTreeMap::new();
    let mut adam = AdamState::default();
    for entry in &header.tensors {
        let len: usize = entry.shape.iter().product();
        let data = read_tensor(len)?;
        match entry.kind.as_str() {
            "param" => {
                params.insert(
                    entry.name.clone(),
                    ParamTensor {
                        shape: entry.shape.clone(),
                        data,
                    },
                );
            }
            "adam_m" => {
                adam.m.insert(entry.name.clone(), data);
            }
            "adam_v" => {
                adam.v.insert(entry.name.clone(), data);
            }
            other => {
                return Err(Error::Integrity(format!(
                    "unknown tensor kind '{other}' in checkpoint"
                )))
            }
        }
    }
    if offset != body.len() {
        return Err(Error::Integrity(
            "checkpoint payload has trailing bytes".into(),
        ));
    }

    let seed: [u8; 32] = header
        .rng_seed
        .as_slice()
        .try_into()
        .map_err(|_| Error::Integrity("bad RNG seed length in checkpoint".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(header.rng_stream);
    rng.set_word_pos(((header.rng_word_pos_hi as u128) << 64) | header.rng_word_pos_lo as u128);

    Ok(TrainState {
        model_cfg: header.model,
        train_cfg: header.train,
        vocab: Vocabulary::from_ordered_tokens(header.vocab),
        params: ModelParams::from_tensors(params),
        adam,
        step: header.step,
        data_cursor: header.data_cursor,
        rng,
    })
}

/// Rejects resuming/serving with a model geometry different from the one the
/// checkpoint was trained with.
pub fn ensure_config_matches(checkpoint: &ModelConfig, requested: &ModelConfig) -> Result<()> {
    let mismatches: Vec<String> = [
        ("d_model", checkpoint.d_model, requested.d_model),
        ("d_ff", checkpoint.d_ff, requested.d_ff),
        ("heads", checkpoint.heads, requested.heads),
        ("token_layers", checkpoint.token_layers, requested.token_layers),
        (
            "graph_enc_layers",
            checkpoint.graph_enc_layers,
            requested.graph_enc_layers,
        ),
        (
            "graph_dec_layers",
            checkpoint.graph_dec_layers,
            requested.graph_dec_layers,
        ),
        ("vocab_size", checkpoint.vocab_size, requested.vocab_size),
    ]
    .iter()
    .filter(|(_, a, b)| a != b)
    .map(|(what, a, b)| format!("{what}: checkpoint {a} vs requested {b}"))
    .collect();
    if mismatches.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "model configuration mismatch: {}",
            mismatches.join(", ")
        )))
    }
}
