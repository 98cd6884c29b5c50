//! ROUGE-1/2/L scoring and the Lead extractive baseline.
//!
//! ROUGE-L comes in two modes. Sentence mode splits both sides into
//! sentences and aggregates per-reference-sentence union-LCS matches over
//! all candidate sentences. Summary mode matches each reference sentence
//! against the whole candidate sequence. Both clip matched tokens by their
//! counts on each side, keeping precision and recall inside [0, 1]; the
//! modes coincide on single-sentence texts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Precision / recall / F1 triple, each in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    fn from_counts(hits: usize, cand_total: usize, ref_total: usize) -> RougeScore {
        let precision = if cand_total == 0 {
            0.0
        } else {
            hits as f64 / cand_total as f64
        };
        let recall = if ref_total == 0 {
            0.0
        } else {
            hits as f64 / ref_total as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        RougeScore {
            precision,
            recall,
            f1,
        }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window.join("\u{1f}")).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap. Sequences shorter than `n` score zero rather
/// than erroring.
pub fn rouge_n(candidate: &[String], reference: &[String], n: usize) -> Result<RougeScore> {
    if n == 0 {
        return Err(Error::Config("rouge-n needs n >= 1".into()));
    }
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let overlap: usize = cand
        .iter()
        .filter_map(|(gram, &c)| refs.get(gram).map(|&r| c.min(r)))
        .sum();
    let cand_total: usize = cand.values().sum();
    let ref_total: usize = refs.values().sum();
    Ok(RougeScore::from_counts(overlap, cand_total, ref_total))
}

/// ROUGE-L granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RougeLMode {
    Summary,
    Sentence,
}

impl std::str::FromStr for RougeLMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<RougeLMode> {
        match s {
            "summary" => Ok(RougeLMode::Summary),
            "sentence" => Ok(RougeLMode::Sentence),
            other => Err(Error::Config(format!(
                "unknown rouge-l mode '{other}' (expected summary|sentence)"
            ))),
        }
    }
}

/// Sentence boundaries after ".", "!" or "?" tokens; a trailing fragment
/// without a terminator is its own sentence.
fn split_sentences(tokens: &[String]) -> Vec<Vec<String>> {
    let mut sentences = Vec::new();
    let mut current = Vec::new();
    for tok in tokens {
        current.push(tok.clone());
        if tok == "." || tok == "!" || tok == "?" {
            sentences.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        sentences.push(current);
    }
    sentences
}

/// Positions in `reference` matched by one LCS against `candidate`.
fn lcs_reference_positions(reference: &[String], candidate: &[String]) -> Vec<usize> {
    let (m, n) = (reference.len(), candidate.len());
    let mut dp = vec![0usize; (m + 1) * (n + 1)];
    let at = |i: usize, j: usize| i * (n + 1) + j;
    for i in 1..=m {
        for j in 1..=n {
            dp[at(i, j)] = if reference[i - 1] == candidate[j - 1] {
                dp[at(i - 1, j - 1)] + 1
            } else {
                dp[at(i - 1, j)].max(dp[at(i, j - 1)])
            };
        }
    }
    let mut positions = Vec::new();
    let (mut i, mut j) = (m, n);
    while i > 0 && j > 0 {
        if reference[i - 1] == candidate[j - 1] && dp[at(i, j)] == dp[at(i - 1, j - 1)] + 1 {
            positions.push(i - 1);
            i -= 1;
            j -= 1;
        } else if dp[at(i - 1, j)] >= dp[at(i, j - 1)] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    positions.reverse();
    positions
}

fn token_counts(sentences: &[Vec<String>]) -> BTreeMap<&str, usize> {
    let mut counts = BTreeMap::new();
    for s in sentences {
        for t in s {
            *counts.entry(t.as_str()).or_insert(0) += 1;
        }
    }
    counts
}

/// Union-LCS hit count over sentence sets with count clipping on both sides.
fn union_lcs_hits(ref_sentences: &[Vec<String>], cand_sentences: &[Vec<String>]) -> usize {
    let mut cnt_r = token_counts(ref_sentences);
    let mut cnt_c = token_counts(cand_sentences);
    let mut hits = 0;
    for r in ref_sentences {
        let mut matched = vec![false; r.len()];
        for c in cand_sentences {
            for pos in lcs_reference_positions(r, c) {
                matched[pos] = true;
            }
        }
        for (pos, hit) in matched.iter().enumerate() {
            if !hit {
                continue;
            }
            let tok = r[pos].as_str();
            let (cr, cc) = (
                cnt_r.get_mut(tok).expect("token counted"),
                cnt_c.entry(tok).or_insert(0),
            );
            if *cr > 0 && *cc > 0 {
                hits += 1;
                *cr -= 1;
                *cc -= 1;
            }
        }
    }
    hits
}

/// Longest-common-subsequence score in the requested mode. An empty
/// candidate scores zero.
pub fn rouge_l(candidate: &[String], reference: &[String], mode: RougeLMode) -> RougeScore {
    if candidate.is_empty() || reference.is_empty() {
        return RougeScore::default();
    }
    let ref_sentences = split_sentences(reference);
    let cand_sentences = match mode {
        RougeLMode::Sentence => split_sentences(candidate),
        RougeLMode::Summary => vec![candidate.to_vec()],
    };
    let hits = union_lcs_hits(&ref_sentences, &cand_sentences);
    RougeScore::from_counts(hits, candidate.len(), reference.len())
}

/// Lead baseline: the first `k` tokens of the paragraphs in ranked order.
pub fn lead_baseline(paragraphs: &[Vec<String>], k_tokens: usize) -> Vec<String> {
    paragraphs
        .iter()
        .flatten()
        .take(k_tokens)
        .cloned()
        .collect()
}

/// Scores for one candidate/reference pair across every tracked metric.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceScores {
    pub rouge_1: RougeScore,
    pub rouge_2: RougeScore,
    pub rouge_l_summary: RougeScore,
    pub rouge_l_sentence: RougeScore,
}

/// Score one pair on all metrics.
pub fn score_pair(candidate: &[String], reference: &[String]) -> Result<InstanceScores> {
    Ok(InstanceScores {
        rouge_1: rouge_n(candidate, reference, 1)?,
        rouge_2: rouge_n(candidate, reference, 2)?,
        rouge_l_summary: rouge_l(candidate, reference, RougeLMode::Summary),
        rouge_l_sentence: rouge_l(candidate, reference, RougeLMode::Sentence),
    })
}

/// Mean P/R/F1 as percentages rounded to two decimals.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AggregateScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn percent(x: f64) -> f64 {
    (x * 10000.0).round() / 100.0
}

fn aggregate<F: Fn(&InstanceScores) -> RougeScore>(
    instances: &[InstanceScores],
    pick: F,
) -> AggregateScore {
    let n = instances.len() as f64;
    let sum = instances.iter().map(&pick).fold((0.0, 0.0, 0.0), |acc, s| {
        (acc.0 + s.precision, acc.1 + s.recall, acc.2 + s.f1)
    });
    AggregateScore {
        precision: percent(sum.0 / n),
        recall: percent(sum.1 / n),
        f1: percent(sum.2 / n),
    }
}

/// Corpus-level evaluation report: aggregate block plus per-instance scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub aggregate: BTreeMap<String, AggregateScore>,
    pub instances: Vec<InstanceScores>,
}

/// Scores aligned candidate/reference token lists and aggregates the means
/// (as ×100 values with two decimals).
pub fn evaluate_corpus(
    system: &[Vec<String>],
    references: &[Vec<String>],
) -> Result<EvaluationReport> {
    if system.len() != references.len() {
        return Err(Error::Validation(format!(
            "system has {} summaries but references have {}",
            system.len(),
            references.len()
        )));
    }
    if system.is_empty() {
        return Err(Error::Validation("nothing to evaluate".into()));
    }
    let instances: Vec<InstanceScores> = system
        .iter()
        .zip(references)
        .map(|(c, r)| score_pair(c, r))
        .collect::<Result<_>>()?;
    let mut aggregate_block = BTreeMap::new();
    aggregate_block.insert("rouge_1".into(), aggregate(&instances, |s| s.rouge_1));
    aggregate_block.insert("rouge_2".into(), aggregate(&instances, |s| s.rouge_2));
    aggregate_block.insert(
        "rouge_l_summary".into(),
        aggregate(&instances, |s| s.rouge_l_summary),
    );
    aggregate_block.insert(
        "rouge_l_sentence".into(),
        aggregate(&instances, |s| s.rouge_l_sentence),
    );
    Ok(EvaluationReport {
        aggregate: aggregate_block,
        instances,
    })
}
