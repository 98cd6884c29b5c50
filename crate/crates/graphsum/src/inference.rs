//! Beam-search decoding with length penalty and trigram blocking, plus the
//! end-to-end `summarize` entry point.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::graph::GraphMatrix;
use crate::model::decoder::decode_logits;
use crate::model::encoder::{encode, EncodedMemory};
use crate::model::{BoundParams, ForwardCtx, ModelConfig, ModelParams};
use crate::text::{Instance, Vocabulary, BOS, EOS};

/// Logits below this are never selected; used for blocked tokens instead of
/// real negative infinity so arithmetic stays finite.
const BLOCKED: f64 = -1e18;

/// Decoding options.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Length-penalty exponent; 0 disables normalization.
    pub alpha: f64,
    pub max_len: usize,
    pub min_len: usize,
    pub trigram_blocking: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 5,
            alpha: 0.6,
            max_len: 64,
            min_len: 0,
            trigram_blocking: true,
        }
    }
}

/// `((5 + length) / 6) ^ alpha`; 1.0 at length 1 for every alpha.
pub fn length_penalty(length: usize, alpha: f64) -> f64 {
    ((5.0 + length as f64) / 6.0).powf(alpha)
}

/// One beam-search state: the BOS-led token sequence, its accumulated
/// log-probability, and the set of every consecutive token triple emitted.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub trigrams: BTreeSet<(usize, usize, usize)>,
}

impl Hypothesis {
    fn start() -> Hypothesis {
        Hypothesis {
            tokens: vec![BOS],
            log_prob: 0.0,
            trigrams: BTreeSet::new(),
        }
    }

    /// Generated tokens, not counting the BOS seed.
    fn generated(&self) -> usize {
        self.tokens.len() - 1
    }

    fn extended(&self, token: usize, log_prob: f64) -> Hypothesis {
        let mut next = self.clone();
        let n = next.tokens.len();
        if n >= 2 {
            next.trigrams
                .insert((next.tokens[n - 2], next.tokens[n - 1], token));
        }
        next.tokens.push(token);
        next.log_prob = log_prob;
        next
    }

    fn score(&self, alpha: f64) -> f64 {
        self.log_prob / length_penalty(self.generated().max(1), alpha)
    }
}

/// Sets the log-probability of any token that would repeat an already
/// emitted trigram to an effective negative infinity. No-op on hypotheses
/// shorter than two tokens.
pub fn block_trigrams(hyp: &Hypothesis, log_probs: &mut [f64]) {
    let n = hyp.tokens.len();
    if n < 2 {
        return;
    }
    let (a, b) = (hyp.tokens[n - 2], hyp.tokens[n - 1]);
    for (v, lp) in log_probs.iter_mut().enumerate() {
        if hyp.trigrams.contains(&(a, b, v)) {
            *lp = BLOCKED;
        }
    }
}

/// Completed search result.
#[derive(Debug, Clone)]
pub struct SearchResult {
    /// Token ids including BOS (and EOS when the hypothesis finished).
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// Length-penalized score the result was selected by.
    pub score: f64,
    pub finished: bool,
}

fn prepare_log_probs(
    hyp: &Hypothesis,
    mut log_probs: Vec<f64>,
    decode: &DecodeConfig,
) -> Vec<f64> {
    // Structural ids are never generated.
    for id in [crate::text::PAD, BOS, crate::text::PBOUND] {
        log_probs[id] = BLOCKED;
    }
    if hyp.generated() < decode.min_len {
        log_probs[EOS] = BLOCKED;
    }
    if decode.trigram_blocking {
        block_trigrams(hyp, &mut log_probs);
    }
    log_probs
}

/// Beam search over an arbitrary next-token scorer (prefix in, log-probs
/// over the vocabulary out). EOS finishes a hypothesis and frees its slot;
/// the finished pool is capped at the beam size; the search stops when no
/// live hypothesis can still beat the worst finished score. Ties break on
/// lower token id, then earlier beam index.
pub fn beam_search_with<S>(
    mut scorer: S,
    vocab_size: usize,
    decode: &DecodeConfig,
) -> Result<SearchResult>
where
    S: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    if decode.beam == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    if decode.beam > vocab_size {
        return Err(Error::Config(format!(
            "beam size {} exceeds vocabulary size {vocab_size}",
            decode.beam
        )));
    }
    if decode.max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let mut live = vec![Hypothesis::start()];
    let mut finished: Vec<Hypothesis> = Vec::new();

    let worst_finished = |finished: &[Hypothesis]| -> f64 {
        finished
            .iter()
            .map(|h| h.score(decode.alpha))
            .fold(f64::INFINITY, f64::min)
    };

    for _ in 0..decode.max_len {
        if live.is_empty() {
            break;
        }
        // (candidate log-prob, token, source index) for every expansion.
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (idx, hyp) in live.iter().enumerate() {
            let log_probs = scorer(&hyp.tokens)?;
            if log_probs.len() != vocab_size {
                return Err(Error::Shape(format!(
                    "scorer returned {} log-probs for vocabulary of {vocab_size}",
                    log_probs.len()
                )));
            }
            let log_probs = prepare_log_probs(hyp, log_probs, decode);
            for (token, lp) in log_probs.iter().enumerate() {
                if *lp <= BLOCKED {
                    continue;
                }
                candidates.push((hyp.log_prob + lp, token, idx));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| a.1.cmp(&b.1))
                .then_with(|| a.2.cmp(&b.2))
        });
        candidates.truncate(decode.beam);

        let mut next_live = Vec::with_capacity(decode.beam);
        for (log_prob, token, idx) in candidates {
            let hyp = live[idx].extended(token, log_prob);
            if token == EOS {
                finished.push(hyp);
            } else if hyp.generated() < decode.max_len {
                next_live.push(hyp);
            } else {
                // Ran out of budget unfinished; keep as a fallback.
                finished.push(hyp);
            }
        }
        // Cap the pool at beam size, best scores first.
        finished.sort_by(|a, b| b.score(decode.alpha).total_cmp(&a.score(decode.alpha)));
        finished.truncate(decode.beam);
        live = next_live;

        if !finished.is_empty() && !live.is_empty() {
            // Most optimistic reachable score: no further log-prob loss,
            // maximal length normalization.
            let best_possible = live
                .iter()
                .map(|h| h.log_prob / length_penalty(decode.max_len, decode.alpha))
                .fold(f64::NEG_INFINITY, f64::max);
            if best_possible <= worst_finished(&finished) {
                break;
            }
        }
    }

    let pick_from = if finished.is_empty() { &live } else { &finished };
    let best = pick_from
        .iter()
        .max_by(|a, b| a.score(decode.alpha).total_cmp(&b.score(decode.alpha)))
        .ok_or_else(|| Error::Numeric("beam search produced no hypotheses".into()))?;
    Ok(SearchResult {
        tokens: best.tokens.clone(),
        log_prob: best.log_prob,
        score: best.score(decode.alpha),
        finished: best.tokens.last() == Some(&EOS),
    })
}

/// Greedy reference decoder: at each step take the single best token after
/// min-length and trigram filtering; stop at EOS or `max_len`.
pub fn greedy_decode_with<S>(
    mut scorer: S,
    vocab_size: usize,
    decode: &DecodeConfig,
) -> Result<SearchResult>
where
    S: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    let mut hyp = Hypothesis::start();
    for _ in 0..decode.max_len {
        let log_probs = scorer(&hyp.tokens)?;
        if log_probs.len() != vocab_size {
            return Err(Error::Shape("scorer vocabulary mismatch".into()));
        }
        let log_probs = prepare_log_probs(&hyp, log_probs, decode);
        let (token, lp) = log_probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then_with(|| b.0.cmp(&a.0)))
            .expect("non-empty vocabulary");
        hyp = hyp.extended(token, hyp.log_prob + lp);
        if token == EOS {
            break;
        }
    }
    Ok(SearchResult {
        tokens: hyp.tokens.clone(),
        log_prob: hyp.log_prob,
        score: hyp.score(decode.alpha),
        finished: hyp.tokens.last() == Some(&EOS),
    })
}

/// Log-softmax of the final position's logits for a prefix, decoded against
/// bound encoder memories on a fresh tape.
pub fn next_token_log_probs(
    params: &ModelParams,
    cfg: &ModelConfig,
    memory: &EncodedMemory,
    g: &GraphMatrix,
    prefix: &[usize],
) -> Result<Vec<f64>> {
    let mut ctx = ForwardCtx::eval();
    let bound = BoundParams::bind(&mut ctx.tape, params)?;
    let enc = memory.bind(&mut ctx.tape)?;
    let logits = decode_logits(&mut ctx, &bound, cfg, prefix, &enc, g)?;
    let v = cfg.vocab_size;
    let t = prefix.len();
    let row = &ctx.tape.data(logits)[(t - 1) * v..t * v];
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    Ok(row.iter().map(|x| x - lse).collect())
}

/// Runs the encoder once and beam-searches a summary for an encoded
/// instance. Returns the winning token ids (BOS-led).
pub fn beam_search(
    params: &ModelParams,
    cfg: &ModelConfig,
    instance: &Instance,
    g: &GraphMatrix,
    decode: &DecodeConfig,
) -> Result<SearchResult> {
    let memory = {
        let mut ctx = ForwardCtx::eval();
        let bound = BoundParams::bind(&mut ctx.tape, params)?;
        let enc = encode(&mut ctx, &bound, cfg, instance, g)?;
        enc.detach(&ctx.tape)
    };
    beam_search_with(
        |prefix| next_token_log_probs(params, cfg, &memory, g, prefix),
        cfg.vocab_size,
        decode,
    )
}

/// Full summarization: encode, beam search, detokenize (BOS/EOS stripped,
/// tokens space-joined).
pub fn summarize(
    params: &ModelParams,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    instance: &Instance,
    g: &GraphMatrix,
    decode: &DecodeConfig,
) -> Result<String> {
    if vocab.len() != cfg.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary size {} does not match model vocabulary {}",
            vocab.len(),
            cfg.vocab_size
        )));
    }
    let result = beam_search(params, cfg, instance, g, decode)?;
    Ok(vocab.decode(&result.tokens).join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{PBOUND, UNK};

    #[test]
    fn length_penalty_fixed_points() {
        assert_eq!(length_penalty(1, 0.6), 1.0);
        assert_eq!(length_penalty(1, 0.0), 1.0);
        assert_eq!(length_penalty(100, 0.0), 1.0);
        assert!((length_penalty(7, 0.6) - 2f64.powf(0.6)).abs() < 1e-15);
    }

    fn hyp_from(tokens: &[usize]) -> Hypothesis {
        let mut h = Hypothesis::start();
        for &t in tokens {
            h = h.extended(t, 0.0);
        }
        h
    }

    #[test]
    fn trigram_set_matches_all_consecutive_triples() {
        // Sequence (with BOS): [BOS, a, b, c, a, b]
        let (a, b, c) = (10, 11, 12);
        let h = hyp_from(&[a, b, c, a, b]);
        let expect: BTreeSet<(usize, usize, usize)> =
            [(BOS, a, b), (a, b, c), (b, c, a), (c, a, b)].into_iter().collect();
        assert_eq!(h.trigrams, expect);
    }

    #[test]
    fn blocking_only_hits_seen_trigrams() {
        let (a, b, c, d) = (10, 11, 12, 13);
        // "a b c d": tail (c, d); no trigram (c, d, x) exists yet.
        let h = hyp_from(&[a, b, c, d]);
        let mut lp = vec![0.0; 20];
        block_trigrams(&h, &mut lp);
        assert!(lp.iter().all(|&v| v == 0.0));

        // "a b c a b": tail (a, b); token c would repeat (a, b, c).
        let h = hyp_from(&[a, b, c, a, b]);
        let mut lp = vec![0.0; 20];
        block_trigrams(&h, &mut lp);
        assert!(lp[c] <= BLOCKED);
        assert_eq!(lp.iter().filter(|&&v| v <= BLOCKED).count(), 1);
    }

    #[test]
    fn blocking_is_a_no_op_for_short_hypotheses() {
        let h = Hypothesis::start();
        let mut lp = vec![0.5; 8];
        block_trigrams(&h, &mut lp);
        assert_eq!(lp, vec![0.5; 8]);
    }

    /// Hand-built conditional table over ids {EOS=2, A=5, B=6}, vocab 7.
    /// From BOS: A 0.6, B 0.4. After A: EOS 0.9, B 0.1. After B: A 0.95,
    /// EOS 0.05. After B A: EOS 0.9, B 0.1 (same as after A).
    fn toy_table(prefix: &[usize]) -> Result<Vec<f64>> {
        const A: usize = 5;
        const B: usize = 6;
        let mut p = vec![1e-12f64; 7];
        match prefix {
            [BOS] => {
                p[A] = 0.6;
                p[B] = 0.4;
            }
            [.., x] if *x == A => {
                p[EOS] = 0.9;
                p[B] = 0.1;
            }
            [.., x] if *x == B => {
                p[A] = 0.95;
                p[EOS] = 0.05;
            }
            // Junk continuations die out immediately.
            _ => p[EOS] = 1.0,
        }
        Ok(p.iter().map(|v| v.ln()).collect())
    }

    #[test]
    fn length_penalty_can_flip_the_ranking() {
        // Exhaustive enumeration of the toy table's finished hypotheses up
        // to 3 generated tokens:
        //   [A, EOS]       log-prob ln(0.54)  len 2
        //   [B, A, EOS]    log-prob ln(0.342) len 3
        // Raw log-prob prefers the short one; alpha = 5 flips it because
        // ln(0.54)/lp(2) < ln(0.342)/lp(3) at that exponent.
        let short = 0.54f64.ln();
        let long = 0.342f64.ln();
        assert!(short > long);
        let lp2 = length_penalty(2, 5.0);
        let lp3 = length_penalty(3, 5.0);
        assert!(long / lp3 > short / lp2, "enumerated flip must hold");

        let raw = beam_search_with(
            toy_table,
            7,
            &DecodeConfig {
                beam: 3,
                alpha: 0.0,
                max_len: 6,
                min_len: 0,
                trigram_blocking: true,
            },
        )
        .unwrap();
        assert_eq!(raw.tokens, vec![BOS, 5, EOS]);

        let penalized = beam_search_with(
            toy_table,
            7,
            &DecodeConfig {
                beam: 3,
                alpha: 5.0,
                max_len: 6,
                min_len: 0,
                trigram_blocking: true,
            },
        )
        .unwrap();
        assert_eq!(penalized.tokens, vec![BOS, 6, 5, EOS]);
    }

    #[test]
    fn min_len_defers_eos() {
        let out = beam_search_with(
            toy_table,
            7,
            &DecodeConfig {
                beam: 2,
                alpha: 0.0,
                max_len: 8,
                min_len: 2,
                trigram_blocking: true,
            },
        )
        .unwrap();
        assert!(out.tokens.len() >= 4, "{:?}", out.tokens); // BOS + 2 + EOS
    }

    #[test]
    fn beam_rejects_bad_sizes() {
        assert!(beam_search_with(toy_table, 7, &DecodeConfig {
            beam: 0,
            ..DecodeConfig::default()
        })
        .is_err());
        assert!(beam_search_with(toy_table, 7, &DecodeConfig {
            beam: 8,
            ..DecodeConfig::default()
        })
        .is_err());
    }

    fn random_model(
        seed: u64,
    ) -> (
        crate::model::ModelParams,
        crate::model::ModelConfig,
        Instance,
        GraphMatrix,
    ) {
        let cfg = crate::model::ModelConfig {
            d_model: 8,
            d_ff: 16,
            heads: 2,
            token_layers: 1,
            graph_enc_layers: 1,
            graph_dec_layers: 1,
            dropout: 0.0,
            max_paragraphs: 4,
            max_tokens_per_paragraph: 8,
            max_summary_tokens: 8,
            vocab_size: 12,
            ..crate::model::ModelConfig::default()
        };
        let params = crate::model::ModelParams::init(&cfg, seed).unwrap();
        let instance = Instance {
            paragraphs: vec![vec![PBOUND, 5, 6, 7], vec![PBOUND, 8, 9, UNK]],
            summary: vec![BOS, EOS],
            origins: vec![0, 1],
        };
        let g = GraphMatrix::new(vec![vec![1.0, 0.3], vec![0.3, 1.0]]).unwrap();
        (params, cfg, instance, g)
    }

    #[test]
    fn beam_one_equals_greedy_on_random_models() {
        for seed in [1u64, 2, 3, 4, 5] {
            let (params, cfg, instance, g) = random_model(seed);
            let memory = {
                let mut ctx = ForwardCtx::eval();
                let bound = BoundParams::bind(&mut ctx.tape, &params).unwrap();
                let enc = encode(&mut ctx, &bound, &cfg, &instance, &g).unwrap();
                enc.detach(&ctx.tape)
            };
            let decode = DecodeConfig {
                beam: 1,
                max_len: 10,
                ..DecodeConfig::default()
            };
            let beam = beam_search_with(
                |p| next_token_log_probs(&params, &cfg, &memory, &g, p),
                cfg.vocab_size,
                &decode,
            )
            .unwrap();
            let greedy = greedy_decode_with(
                |p| next_token_log_probs(&params, &cfg, &memory, &g, p),
                cfg.vocab_size,
                &decode,
            )
            .unwrap();
            assert_eq!(beam.tokens, greedy.tokens, "seed {seed}");
        }
    }

    #[test]
    fn outputs_never_repeat_a_trigram() {
        for seed in 0..10u64 {
            let (params, cfg, instance, g) = random_model(seed + 100);
            let out = beam_search(
                &params,
                &cfg,
                &instance,
                &g,
                &DecodeConfig {
                    beam: 3,
                    max_len: 16,
                    ..DecodeConfig::default()
                },
            )
            .unwrap();
            let mut seen = BTreeSet::new();
            for w in out.tokens.windows(3) {
                assert!(seen.insert((w[0], w[1], w[2])), "repeated trigram in {:?}", out.tokens);
            }
        }
    }

    #[test]
    fn beam_widening_never_hurts_raw_score() {
        for seed in [11u64, 12, 13] {
            let (params, cfg, instance, g) = random_model(seed);
            let run = |beam: usize| {
                beam_search(
                    &params,
                    &cfg,
                    &instance,
                    &g,
                    &DecodeConfig {
                        beam,
                        alpha: 0.0,
                        max_len: 8,
                        min_len: 0,
                        trigram_blocking: false,
                    },
                )
                .unwrap()
            };
            assert!(run(4).log_prob >= run(1).log_prob - 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn decoding_is_deterministic() {
        let (params, cfg, instance, g) = random_model(77);
        let decode = DecodeConfig {
            beam: 4,
            max_len: 12,
            ..DecodeConfig::default()
        };
        let a = beam_search(&params, &cfg, &instance, &g, &decode).unwrap();
        let b = beam_search(&params, &cfg, &instance, &g, &decode).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.log_prob, b.log_prob);
    }
}
