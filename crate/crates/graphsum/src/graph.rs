//! Paragraph-relation graphs: tf-idf similarity, LDA topic similarity and
//! marker/entity discourse evidence, all normalized to symmetric matrices
//! with unit diagonal and weights in [0, 1].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::ParagraphTokens;

/// Discourse markers used when no lexicon file is supplied.
pub const DEFAULT_MARKERS: [&str; 8] = [
    "however",
    "moreover",
    "therefore",
    "meanwhile",
    "furthermore",
    "instead",
    "nevertheless",
    "consequently",
];

/// Which builder produced a graph; stored in graph files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Similarity,
    Topic,
    Discourse,
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            GraphKind::Similarity => "similarity",
            GraphKind::Topic => "topic",
            GraphKind::Discourse => "discourse",
        };
        f.write_str(name)
    }
}

impl FromStr for GraphKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<GraphKind> {
        match s {
            "similarity" => Ok(GraphKind::Similarity),
            "topic" => Ok(GraphKind::Topic),
            "discourse" => Ok(GraphKind::Discourse),
            other => Err(Error::Config(format!(
                "unknown graph type '{other}' (expected similarity|topic|discourse)"
            ))),
        }
    }
}

/// Symmetric L×L paragraph-relation matrix with unit diagonal and entries
/// in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GraphMatrix {
    size: usize,
    weights: Vec<f64>,
}

impl GraphMatrix {
    /// Validates every invariant; errors name the offending indices.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<GraphMatrix> {
        let size = rows.len();
        if size == 0 {
            return Err(Error::Validation("graph must have at least one row".into()));
        }
        let mut offending = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != size {
                return Err(Error::Validation(format!(
                    "graph row {i} has {} entries, expected {size}",
                    row.len()
                )));
            }
            for (j, &w) in row.iter().enumerate() {
                if !w.is_finite() || !(0.0..=1.0).contains(&w) {
                    offending.push(format!("[{i}][{j}]={w} out of range"));
                } else if i == j && w != 1.0 {
                    offending.push(format!("[{i}][{i}]={w} != 1 on diagonal"));
                } else if j < i && (w - rows[j][i]).abs() > 1e-12 {
                    offending.push(format!("[{i}][{j}]={w} != [{j}][{i}]={}", rows[j][i]));
                }
            }
        }
        if !offending.is_empty() {
            return Err(Error::Validation(format!(
                "invalid graph matrix: {}",
                offending.join("; ")
            )));
        }
        Ok(GraphMatrix {
            size,
            weights: rows.into_iter().flatten().collect(),
        })
    }

    /// All-ones matrix: every paragraph maximally related (the bias-free
    /// reference graph).
    pub fn ones(size: usize) -> GraphMatrix {
        GraphMatrix {
            size,
            weights: vec![1.0; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.size..(i + 1) * self.size]
    }

    /// Row-major flat view, for tensor ops.
    pub fn flat(&self) -> &[f64] {
        &self.weights
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.weights.chunks(self.size).map(|r| r.to_vec()).collect()
    }

    /// Continuous row lookup with center-of-cell convention: `s = i + 0.5`
    /// hits row `i` exactly, in-between values interpolate linearly, and the
    /// ends clamp.
    pub fn row_at(&self, s: f64) -> Vec<f64> {
        let hi = (self.size - 1) as f64;
        let a = (s - 0.5).clamp(0.0, hi);
        let i0 = (a.floor() as usize).min(self.size - 1);
        let i1 = (i0 + 1).min(self.size - 1);
        let f = a - i0 as f64;
        self.row(i0)
            .iter()
            .zip(self.row(i1))
            .map(|(&lo, &hi)| (1.0 - f) * lo + f * hi)
            .collect()
    }
}

/// Zeroes off-diagonal entries below `threshold` and re-validates. Accepts
/// raw rows so out-of-contract inputs (asymmetry, range violations) are
/// reported with their indices.
pub fn normalize_graph(rows: Vec<Vec<f64>>, threshold: f64) -> Result<GraphMatrix> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::Config(format!(
            "graph threshold must satisfy 0 <= t < 1, got {threshold}"
        )));
    }
    let validated = GraphMatrix::new(rows)?;
    let size = validated.size;
    let mut weights = validated.weights;
    for i in 0..size {
        for j in 0..size {
            if i != j && weights[i * size + j] < threshold {
                weights[i * size + j] = 0.0;
            }
        }
    }
    Ok(GraphMatrix { size, weights })
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn cosine(a: &BTreeMap<usize, f64>, b: &BTreeMap<usize, f64>) -> f64 {
    let norm = |v: &BTreeMap<usize, f64>| v.values().map(|w| w * w).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a
        .iter()
        .filter_map(|(t, w)| b.get(t).map(|wb| w * wb))
        .sum();
    dot / (na * nb)
}

/// tf-idf cosine similarity graph. tf is the raw in-paragraph count; idf is
/// `ln(L / df)` with df counted over paragraphs, so terms present everywhere
/// carry no contrast and all-common paragraphs fall back to zero similarity.
pub fn build_similarity_graph(paragraphs: &[Vec<String>]) -> Result<GraphMatrix> {
    if paragraphs.is_empty() {
        return Err(Error::Validation("similarity graph needs paragraphs".into()));
    }
    let l = paragraphs.len();
    let mut term_ids: BTreeMap<&str, usize> = BTreeMap::new();
    for p in paragraphs {
        for t in p {
            let next = term_ids.len();
            term_ids.entry(t.as_str()).or_insert(next);
        }
    }
    let mut df = vec![0usize; term_ids.len()];
    let mut tf: Vec<BTreeMap<usize, f64>> = Vec::with_capacity(l);
    for p in paragraphs {
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        for t in p {
            *counts.entry(term_ids[t.as_str()]).or_insert(0.0) += 1.0;
        }
        for &term in counts.keys() {
            df[term] += 1;
        }
        tf.push(counts);
    }
    let idf: Vec<f64> = df.iter().map(|&d| (l as f64 / d as f64).ln()).collect();
    let vectors: Vec<BTreeMap<usize, f64>> = tf
        .into_iter()
        .map(|counts| {
            counts
                .into_iter()
                .map(|(t, c)| (t, c * idf[t]))
                .collect()
        })
        .collect();
    let mut rows = vec![vec![0.0; l]; l];
    for i in 0..l {
        rows[i][i] = 1.0;
        for j in i + 1..l {
            let w = clamp01(cosine(&vectors[i], &vectors[j]));
            rows[i][j] = w;
            rows[j][i] = w;
        }
    }
    GraphMatrix::new(rows)
}

/// Collapsed-Gibbs LDA configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LdaConfig {
    pub topics: usize,
    pub alpha: f64,
    pub beta: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for LdaConfig {
    fn default() -> Self {
        LdaConfig {
            topics: 10,
            alpha: 0.5, // 5.0 / topics
            beta: 0.01,
            iterations: 500,
            seed: 42,
        }
    }
}

impl LdaConfig {
    pub fn with_topics(topics: usize) -> LdaConfig {
        LdaConfig {
            topics,
            alpha: 5.0 / topics as f64,
            ..LdaConfig::default()
        }
    }
}

/// Fitted topic model: one smoothed topic distribution per paragraph.
#[derive(Debug, Clone)]
pub struct TopicModel {
    pub topics: usize,
    /// Per-paragraph topic distribution; each row sums to 1.
    pub theta: Vec<Vec<f64>>,
    /// Topic-word counts after the final sweep.
    pub topic_word: Vec<Vec<usize>>,
    pub vocab: Vec<String>,
}

/// Collapsed Gibbs sampling over paragraph token lists. Bit-deterministic
/// for a fixed seed.
pub fn fit_lda(paragraphs: &[Vec<String>], cfg: &LdaConfig) -> Result<TopicModel> {
    if paragraphs.is_empty() {
        return Err(Error::Validation("lda needs a non-empty corpus".into()));
    }
    if cfg.topics < 2 {
        return Err(Error::Config(format!(
            "lda needs at least 2 topics, got {}",
            cfg.topics
        )));
    }
    let mut word_ids: BTreeMap<&str, usize> = BTreeMap::new();
    for p in paragraphs {
        for t in p {
            let next = word_ids.len();
            word_ids.entry(t.as_str()).or_insert(next);
        }
    }
    let w = word_ids.len();
    if w == 0 {
        return Err(Error::Validation("lda corpus has no tokens".into()));
    }
    if cfg.topics > w {
        return Err(Error::Config(format!(
            "lda topic count {} exceeds vocabulary size {w}",
            cfg.topics
        )));
    }
    let k = cfg.topics;
    let docs: Vec<Vec<usize>> = paragraphs
        .iter()
        .map(|p| p.iter().map(|t| word_ids[t.as_str()]).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut doc_topic = vec![vec![0usize; k]; docs.len()];
    let mut topic_word = vec![vec![0usize; w]; k];
    let mut topic_total = vec![0usize; k];
    let mut assignments: Vec<Vec<usize>> = docs
        .iter()
        .map(|doc| doc.iter().map(|_| rng.gen_range(0..k)).collect())
        .collect();
    for (d, doc) in docs.iter().enumerate() {
        for (i, &word) in doc.iter().enumerate() {
            let z = assignments[d][i];
            doc_topic[d][z] += 1;
            topic_word[z][word] += 1;
            topic_total[z] += 1;
        }
    }

    let beta_w = cfg.beta * w as f64;
    let mut probs = vec![0.0; k];
    for _ in 0..cfg.iterations {
        for (d, doc) in docs.iter().enumerate() {
            for (i, &word) in doc.iter().enumerate() {
                let old = assignments[d][i];
                doc_topic[d][old] -= 1;
                topic_word[old][word] -= 1;
                topic_total[old] -= 1;

                let mut total = 0.0;
                for (t, p) in probs.iter_mut().enumerate() {
                    *p = (doc_topic[d][t] as f64 + cfg.alpha)
                        * (topic_word[t][word] as f64 + cfg.beta)
                        / (topic_total[t] as f64 + beta_w);
                    total += *p;
                }
                let mut pick = rng.gen::<f64>() * total;
                let mut new = k - 1;
                for (t, &p) in probs.iter().enumerate() {
                    pick -= p;
                    if pick <= 0.0 {
                        new = t;
                        break;
                    }
                }

                assignments[d][i] = new;
                doc_topic[d][new] += 1;
                topic_word[new][word] += 1;
                topic_total[new] += 1;
            }
        }
    }

    let theta = doc_topic
        .iter()
        .zip(&docs)
        .map(|(counts, doc)| {
            let denom = doc.len() as f64 + k as f64 * cfg.alpha;
            counts
                .iter()
                .map(|&c| (c as f64 + cfg.alpha) / denom)
                .collect()
        })
        .collect();
    let mut vocab: Vec<(usize, String)> = word_ids
        .into_iter()
        .map(|(t, id)| (id, t.to_string()))
        .collect();
    vocab.sort_by_key(|(id, _)| *id);
    Ok(TopicModel {
        topics: k,
        theta,
        topic_word,
        vocab: vocab.into_iter().map(|(_, t)| t).collect(),
    })
}

/// Cosine similarity between paragraph topic distributions.
pub fn build_topic_graph(model: &TopicModel) -> Result<GraphMatrix> {
    let l = model.theta.len();
    if l == 0 {
        return Err(Error::Validation("topic model covers no paragraphs".into()));
    }
    let dense_cos = |a: &[f64], b: &[f64]| -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    };
    let mut rows = vec![vec![0.0; l]; l];
    for i in 0..l {
        rows[i][i] = 1.0;
        for j in i + 1..l {
            let w = clamp01(dense_cos(&model.theta[i], &model.theta[j]));
            rows[i][j] = w;
            rows[j][i] = w;
        }
    }
    GraphMatrix::new(rows)
}

/// Discourse graph configuration: weights of the two evidence sources, the
/// marker lexicon and the minimum entity length in tokens.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DiscourseConfig {
    pub marker_weight: f64,
    pub entity_weight: f64,
    pub entity_min_len: usize,
    pub markers: Vec<String>,
}

impl Default for DiscourseConfig {
    fn default() -> Self {
        DiscourseConfig {
            marker_weight: 0.5,
            entity_weight: 0.5,
            entity_min_len: 2,
            markers: DEFAULT_MARKERS.iter().map(|m| m.to_string()).collect(),
        }
    }
}

/// Maximal runs of capitalized tokens of at least `min_len` tokens,
/// lowercased for matching.
fn entities(cased: &[String], min_len: usize) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut run: Vec<&str> = Vec::new();
    for tok in cased.iter().map(String::as_str).chain(std::iter::once("")) {
        if tok.chars().next().is_some_and(|c| c.is_uppercase()) {
            run.push(tok);
        } else {
            if run.len() >= min_len {
                out.insert(run.join(" ").to_lowercase());
            }
            run.clear();
        }
    }
    out
}

fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Discourse graph from marker adjacency and shared-entity overlap:
/// evidence(i, j) = w_m * [paragraph j directly follows i in the same source
/// document and opens with a marker] + w_e * entity Jaccard. Evidence is
/// max-symmetrized, rescaled by the largest off-diagonal value, diagonal 1.
pub fn build_discourse_graph(
    paragraphs: &[ParagraphTokens],
    cfg: &DiscourseConfig,
) -> Result<GraphMatrix> {
    if paragraphs.is_empty() {
        return Err(Error::Validation("discourse graph needs paragraphs".into()));
    }
    if cfg.markers.is_empty() {
        return Err(Error::Config("discourse marker lexicon is empty".into()));
    }
    let markers: BTreeSet<&str> = cfg.markers.iter().map(String::as_str).collect();
    let l = paragraphs.len();
    let sets: Vec<BTreeSet<String>> = paragraphs
        .iter()
        .map(|p| entities(&p.cased, cfg.entity_min_len))
        .collect();
    let opens_with_marker: Vec<bool> = paragraphs
        .iter()
        .map(|p| p.lower.first().is_some_and(|t| markers.contains(t.as_str())))
        .collect();

    let mut evidence = vec![0.0; l * l];
    for i in 0..l {
        for j in 0..l {
            if i == j {
                continue;
            }
            let marker = j == i + 1
                && paragraphs[i].origin == paragraphs[j].origin
                && opens_with_marker[j];
            evidence[i * l + j] = cfg.marker_weight * f64::from(u8::from(marker))
                + cfg.entity_weight * jaccard(&sets[i], &sets[j]);
        }
    }
    let mut rows = vec![vec![0.0; l]; l];
    let mut max = 0.0f64;
    for i in 0..l {
        for j in i + 1..l {
            let s = evidence[i * l + j].max(evidence[j * l + i]);
            rows[i][j] = s;
            rows[j][i] = s;
            max = max.max(s);
        }
    }
    for (i, row) in rows.iter_mut().enumerate() {
        for (j, w) in row.iter_mut().enumerate() {
            if i == j {
                *w = 1.0;
            } else if max > 0.0 {
                *w = clamp01(*w / max);
            }
        }
    }
    GraphMatrix::new(rows)
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    size: usize,
    #[serde(rename = "type")]
    kind: GraphKind,
    weights: Vec<Vec<f64>>,
}

/// Writes `{"size": L, "type": ..., "weights": [[..], ..]}`.
pub fn save_graph(path: &Path, graph: &GraphMatrix, kind: GraphKind) -> Result<()> {
    let file = GraphFile {
        size: graph.size(),
        kind,
        weights: graph.rows(),
    };
    fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

/// Reads and validates a graph file.
pub fn load_graph(path: &Path) -> Result<(GraphMatrix, GraphKind)> {
    let raw = fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("reading graph {}: {e}", path.display())))?;
    let file: GraphFile = serde_json::from_str(&raw)
        .map_err(|e| Error::Validation(format!("graph {}: {e}", path.display())))?;
    if file.weights.len() != file.size {
        return Err(Error::Validation(format!(
            "graph {} declares size {} but has {} rows",
            path.display(),
            file.size,
            file.weights.len()
        )));
    }
    Ok((GraphMatrix::new(file.weights)?, file.kind))
}

/// Builds the requested graph kind for one instance's paragraphs.
pub fn build_graph(
    kind: GraphKind,
    paragraphs: &[ParagraphTokens],
    lda: &LdaConfig,
    discourse: &DiscourseConfig,
) -> Result<GraphMatrix> {
    let lower: Vec<Vec<String>> = paragraphs.iter().map(|p| p.lower.clone()).collect();
    match kind {
        GraphKind::Similarity => build_similarity_graph(&lower),
        GraphKind::Topic => {
            let model = fit_lda(&lower, lda)?;
            build_topic_graph(&model)
        }
        GraphKind::Discourse => build_discourse_graph(paragraphs, discourse),
    }
}
