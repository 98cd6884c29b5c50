//! Text preparation: tokenization, paragraph splitting, vocabulary
//! construction and the on-disk corpus format.
//!
//! Corpus files are JSON lines, one object per instance:
//! `{"documents": ["raw text", ...], "summary": "raw text"}`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Paragraph-boundary token prepended to every encoded paragraph; its final
/// encoder state doubles as the paragraph vector.
pub const PBOUND: usize = 4;
pub const RESERVED: usize = 5;

const RESERVED_SYMBOLS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<p>"];

/// One raw summarization example as stored in a corpus file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawInstance {
    pub documents: Vec<String>,
    pub summary: String,
}

/// Token-id view of one example. Every paragraph starts with [`PBOUND`];
/// the summary is wrapped in [`BOS`]..[`EOS`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub paragraphs: Vec<Vec<usize>>,
    pub summary: Vec<usize>,
    /// Document-of-origin index per paragraph.
    pub origins: Vec<usize>,
}

impl Instance {
    pub fn n_paragraphs(&self) -> usize {
        self.paragraphs.len()
    }
}

/// Splits a token into word/punctuation pieces, preserving case.
/// Hyphens glue alphanumeric neighbors together ("state-of-the-art" stays
/// one token); every other punctuation character stands alone.
fn split_token_cased(chunk: &str) -> Vec<String> {
    let chars: Vec<char> = chunk.chars().collect();
    let mut pieces = Vec::new();
    let mut current = String::new();
    for (i, &ch) in chars.iter().enumerate() {
        if ch.is_alphanumeric() {
            current.push(ch);
        } else if ch == '-'
            && !current.is_empty()
            && chars.get(i + 1).is_some_and(|c| c.is_alphanumeric())
        {
            current.push(ch);
        } else {
            if !current.is_empty() {
                pieces.push(std::mem::take(&mut current));
            }
            pieces.push(ch.to_string());
        }
    }
    if !current.is_empty() {
        pieces.push(current);
    }
    pieces
}

/// Whitespace-and-punctuation tokenizer that keeps the original casing.
/// Used where the raw-text capitalization matters (entity detection,
/// paragraph truncation).
pub fn tokenize_cased(text: &str) -> Vec<String> {
    text.split_whitespace()
        .flat_map(|chunk| split_token_cased(chunk))
        .collect()
}

/// Lowercased tokenization: unicode whitespace split, punctuation split off,
/// intra-word hyphens kept. Stable across calls; empty input gives an empty
/// list.
pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_cased(text).iter().map(|t| t.to_lowercase()).collect()
}

/// A paragraph string with the index of the document it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Paragraph {
    pub text: String,
    pub origin: usize,
}

/// Splits documents into paragraphs on line breaks, keeps the first
/// `max_paragraphs / n_documents` paragraphs of each document (at least one),
/// and truncates each paragraph to `max_tokens_per_paragraph` tokens.
/// Paragraph order is document-major, preserving reading order.
pub fn split_paragraphs(
    documents: &[String],
    max_paragraphs: usize,
    max_tokens_per_paragraph: usize,
) -> Result<Vec<Paragraph>> {
    if max_paragraphs == 0 || max_tokens_per_paragraph == 0 {
        return Err(Error::Config(
            "paragraph and token caps must be positive".into(),
        ));
    }
    let non_blank = documents.iter().filter(|d| !d.trim().is_empty()).count();
    if non_blank == 0 {
        return Err(Error::Validation("all documents are blank".into()));
    }
    let quota = (max_paragraphs / non_blank).max(1);
    let mut out = Vec::new();
    for (origin, doc) in documents.iter().enumerate() {
        if doc.trim().is_empty() {
            continue;
        }
        let mut taken = 0;
        for block in doc.lines() {
            if taken >= quota {
                break;
            }
            let trimmed = block.trim();
            if trimmed.is_empty() {
                continue;
            }
            let tokens = tokenize_cased(trimmed);
            if tokens.is_empty() {
                continue;
            }
            let kept = &tokens[..tokens.len().min(max_tokens_per_paragraph)];
            out.push(Paragraph {
                text: kept.join(" "),
                origin,
            });
            taken += 1;
        }
    }
    out.truncate(max_paragraphs);
    if out.is_empty() {
        return Err(Error::Validation(
            "no non-empty paragraphs after splitting".into(),
        ));
    }
    Ok(out)
}

/// Word-level vocabulary with fixed reserved ids:
/// PAD=0, BOS=1, EOS=2, UNK=3, PBOUND=4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_of: BTreeMap<String, usize>,
    tokens: Vec<String>,
    min_freq: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    min_freq: usize,
}

impl Vocabulary {
    /// Keeps tokens with frequency >= `min_freq`, ordered by descending
    /// frequency then lexicographically, truncated so the total vocabulary
    /// (reserved ids included) has at most `max_size` entries.
    pub fn build<'a, I>(corpus: I, min_freq: usize, max_size: usize) -> Result<Vocabulary>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        if max_size < RESERVED + 1 {
            return Err(Error::Config(format!(
                "vocabulary max_size must be at least {}, got {max_size}",
                RESERVED + 1
            )));
        }
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        let mut any = false;
        for stream in corpus {
            for tok in stream {
                any = true;
                *freq.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
        if !any {
            return Err(Error::Validation("empty corpus".into()));
        }
        let mut ordered: Vec<(&str, usize)> =
            freq.into_iter().filter(|(_, n)| *n >= min_freq).collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ordered.truncate(max_size - RESERVED);
        let tokens: Vec<String> = ordered.into_iter().map(|(t, _)| t.to_string()).collect();
        Ok(Vocabulary::from_tokens(tokens, min_freq))
    }

    fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Vocabulary {
        let id_of = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), RESERVED + i))
            .collect();
        Vocabulary {
            id_of,
            tokens,
            min_freq,
        }
    }

    /// Rebuilds a vocabulary from the ordered non-reserved token list, as
    /// embedded in checkpoints.
    pub fn from_ordered_tokens(tokens: Vec<String>) -> Vocabulary {
        Vocabulary::from_tokens(tokens, 1)
    }

    /// Ordered non-reserved tokens (id = 5 + index).
    pub fn ordered_tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Total size, reserved ids included.
    pub fn len(&self) -> usize {
        RESERVED + self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.id_of.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        if id < RESERVED {
            RESERVED_SYMBOLS[id]
        } else {
            self.tokens
                .get(id - RESERVED)
                .map(String::as_str)
                .unwrap_or(RESERVED_SYMBOLS[UNK])
        }
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Renders ids back to text, skipping structural ids (PAD/BOS/EOS/PBOUND).
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id == UNK || id >= RESERVED)
            .map(|&id| self.token(id).to_string())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabFile {
            tokens: self.tokens.clone(),
            min_freq: self.min_freq,
        };
        fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let raw = fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("reading vocabulary {}: {e}", path.display())))?;
        let file: VocabFile = serde_json::from_str(&raw)?;
        Ok(Vocabulary::from_tokens(file.tokens, file.min_freq))
    }
}

/// Size limits applied while encoding an instance.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct EncodeCaps {
    pub max_paragraphs: usize,
    pub max_tokens_per_paragraph: usize,
    pub max_summary_tokens: usize,
}

impl Default for EncodeCaps {
    fn default() -> Self {
        // Mirrors the 40-paragraph / 70-token source layout the model
        // defaults assume.
        EncodeCaps {
            max_paragraphs: 40,
            max_tokens_per_paragraph: 70,
            max_summary_tokens: 128,
        }
    }
}

/// Encodes one raw instance: paragraphs become `[PBOUND, ids..]`, the summary
/// becomes `[BOS, ids.., EOS]`, out-of-vocabulary tokens map to [`UNK`].
/// An empty summary is an error when `require_summary` (training) and allowed
/// otherwise (inference).
pub fn encode_instance(
    raw: &RawInstance,
    vocab: &Vocabulary,
    caps: &EncodeCaps,
    require_summary: bool,
) -> Result<Instance> {
    let paragraphs = split_paragraphs(
        &raw.documents,
        caps.max_paragraphs,
        caps.max_tokens_per_paragraph,
    )?;
    let mut encoded = Vec::with_capacity(paragraphs.len());
    let mut origins = Vec::with_capacity(paragraphs.len());
    for p in &paragraphs {
        let mut ids = vec![PBOUND];
        ids.extend(vocab.encode(&tokenize(&p.text)));
        debug_assert!(ids.len() > 1, "split_paragraphs yields non-empty text");
        encoded.push(ids);
        origins.push(p.origin);
    }
    let summary_tokens = tokenize(&raw.summary);
    if require_summary && summary_tokens.is_empty() {
        return Err(Error::Validation("instance has an empty summary".into()));
    }
    let kept = &summary_tokens[..summary_tokens.len().min(caps.max_summary_tokens)];
    let mut summary = vec![BOS];
    summary.extend(vocab.encode(kept));
    summary.push(EOS);
    Ok(Instance {
        paragraphs: encoded,
        summary,
        origins,
    })
}

/// Reads a JSON-lines corpus file. Blank lines are skipped; malformed lines
/// are validation errors naming the line number.
pub fn read_corpus(path: &Path) -> Result<Vec<RawInstance>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Io(format!("opening corpus {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawInstance = serde_json::from_str(&line).map_err(|e| {
            Error::Validation(format!(
                "corpus {} line {}: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        out.push(raw);
    }
    if out.is_empty() {
        return Err(Error::Validation(format!(
            "corpus {} contains no instances",
            path.display()
        )));
    }
    Ok(out)
}

/// Tokenized paragraph in both casings, for the graph builders.
#[derive(Debug, Clone)]
pub struct ParagraphTokens {
    pub cased: Vec<String>,
    pub lower: Vec<String>,
    pub origin: usize,
}

/// Collects paragraph token lists for graph construction.
pub fn paragraph_token_lists(raw: &RawInstance, caps: &EncodeCaps) -> Result<Vec<ParagraphTokens>> {
    let paragraphs = split_paragraphs(
        &raw.documents,
        caps.max_paragraphs,
        caps.max_tokens_per_paragraph,
    )?;
    Ok(paragraphs
        .into_iter()
        .map(|p| ParagraphTokens {
            cased: tokenize_cased(&p.text),
            lower: tokenize(&p.text),
            origin: p.origin,
        })
        .collect())
}
