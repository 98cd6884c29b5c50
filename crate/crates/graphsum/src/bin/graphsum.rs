//! Command-line pipeline: `build-graph`, `train`, `summarize`, `evaluate`.
//!
//! Exit codes: 0 success, 2 usage, 3 validation/configuration,
//! 4 numeric failure, 5 I/O.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use graphsum::config::Config;
use graphsum::error::{Error, Result};
use graphsum::evaluation::{self, RougeLMode};
use graphsum::graph::{self, GraphKind, GraphMatrix};
use graphsum::inference;
use graphsum::model::ModelConfig;
use graphsum::text::{self, RawInstance, Vocabulary};
use graphsum::training::{self, TrainState};

#[derive(Parser)]
#[command(
    name = "graphsum",
    about = "Graph-informed multi-document summarization pipeline",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum GraphKindArg {
    Similarity,
    Topic,
    Discourse,
}

impl From<GraphKindArg> for GraphKind {
    fn from(k: GraphKindArg) -> GraphKind {
        match k {
            GraphKindArg::Similarity => GraphKind::Similarity,
            GraphKindArg::Topic => GraphKind::Topic,
            GraphKindArg::Discourse => GraphKind::Discourse,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RougeLModeArg {
    Summary,
    Sentence,
}

impl From<RougeLModeArg> for RougeLMode {
    fn from(m: RougeLModeArg) -> RougeLMode {
        match m {
            RougeLModeArg::Summary => RougeLMode::Summary,
            RougeLModeArg::Sentence => RougeLMode::Sentence,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build one paragraph-relation graph file per corpus instance.
    BuildGraph(BuildGraphArgs),
    /// Train the summarizer on a corpus with prebuilt graphs.
    Train(TrainArgs),
    /// Generate summaries from a checkpoint.
    Summarize(SummarizeArgs),
    /// Score system summaries against references with ROUGE.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct BuildGraphArgs {
    /// JSON-lines corpus file.
    #[arg(long)]
    corpus: PathBuf,
    /// Graph flavor to build.
    #[arg(long, value_enum)]
    graph: GraphKindArg,
    /// Output directory for graph files and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the topic-graph sampler.
    #[arg(long)]
    seed: Option<u64>,
    /// Sparsification threshold in [0, 1).
    #[arg(long)]
    threshold: Option<f64>,
    /// Discourse marker lexicon file (one marker per line).
    #[arg(long)]
    markers: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON-lines corpus file.
    #[arg(long)]
    corpus: PathBuf,
    /// Directory of per-instance graph files (from build-graph).
    #[arg(long)]
    graphs: PathBuf,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    out: PathBuf,
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Gaussian bias width override.
    #[arg(long)]
    sigma: Option<f64>,
    /// Optimizer step budget override.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Disable the graph bias in the encoder.
    #[arg(long)]
    no_graph_enc: bool,
    /// Disable the graph guidance in the decoder.
    #[arg(long)]
    no_graph_dec: bool,
    /// Continue from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct SummarizeArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON-lines corpus to summarize (summaries may be empty).
    #[arg(long)]
    input: PathBuf,
    /// Output file: one summary per line.
    #[arg(long)]
    out: PathBuf,
    /// Directory of prebuilt graphs aligned with the input.
    #[arg(long, conflicts_with = "graph")]
    graphs: Option<PathBuf>,
    /// Build this graph flavor on the fly instead.
    #[arg(long, value_enum)]
    graph: Option<GraphKindArg>,
    /// JSON config file (graph options for on-the-fly building).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Beam width.
    #[arg(long)]
    beam: Option<usize>,
    /// Length-penalty exponent.
    #[arg(long)]
    alpha: Option<f64>,
    /// Maximum generated tokens.
    #[arg(long)]
    max_len: Option<usize>,
    /// Minimum generated tokens before EOS is allowed.
    #[arg(long)]
    min_len: Option<usize>,
    /// Seed for on-the-fly topic graphs.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// System summaries: text lines, or a corpus file with --baseline.
    #[arg(long)]
    system: PathBuf,
    /// References: text lines or a JSON-lines corpus (summary field).
    #[arg(long)]
    references: PathBuf,
    /// JSON report output path.
    #[arg(long)]
    out: PathBuf,
    /// Which ROUGE-L mode to print on stdout (both are in the report).
    #[arg(long, value_enum, default_value = "summary")]
    rouge_l: RougeLModeArg,
    /// Score an extractive baseline instead of system output.
    #[arg(long, value_parser = ["lead"])]
    baseline: Option<String>,
    /// Token budget for the lead baseline.
    #[arg(long, default_value_t = 32)]
    k: usize,
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::BuildGraph(args) => cmd_build_graph(args),
        Command::Train(args) => cmd_train(args),
        Command::Summarize(args) => cmd_summarize(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    };
    if let Err(err) = outcome {
        eprintln!("error[{}]: {err}", err.code());
        std::process::exit(err.exit_code());
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn graph_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("graph_{index:06}.json"))
}

fn cmd_build_graph(args: BuildGraphArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.graph.lda.seed = seed;
    }
    if let Some(threshold) = args.threshold {
        cfg.graph.threshold = threshold;
    }
    if let Some(markers_path) = &args.markers {
        let raw = fs::read_to_string(markers_path)
            .map_err(|e| Error::Io(format!("reading markers {}: {e}", markers_path.display())))?;
        let markers: Vec<String> = raw
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| l.to_lowercase())
            .collect();
        if markers.is_empty() {
            return Err(Error::Config(format!(
                "marker lexicon {} has no markers",
                markers_path.display()
            )));
        }
        cfg.graph.discourse.markers = markers;
    }
    let kind: GraphKind = args.graph.into();
    let corpus = text::read_corpus(&args.corpus)?;
    fs::create_dir_all(&args.out)?;

    let caps = cfg.caps();
    for (i, raw) in corpus.iter().enumerate() {
        let paragraphs = text::paragraph_token_lists(raw, &caps)
            .map_err(|e| e.with_context(&format!("instance {i}")))?;
        let mut lda = cfg.graph.lda;
        lda.seed = lda.seed.wrapping_add(i as u64);
        let built = graph::build_graph(kind, &paragraphs, &lda, &cfg.graph.discourse)
            .map_err(|e| e.with_context(&format!("instance {i}")))?;
        let built = if cfg.graph.threshold > 0.0 {
            graph::normalize_graph(built.rows(), cfg.graph.threshold)?
        } else {
            built
        };
        graph::save_graph(&graph_path(&args.out, i), &built, kind)?;
    }
    let manifest = serde_json::json!({
        "count": corpus.len(),
        "type": kind.to_string(),
        "corpus": args.corpus.display().to_string(),
        "threshold": cfg.graph.threshold,
        "lda_seed": cfg.graph.lda.seed,
    });
    fs::write(
        args.out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    println!(
        "built {} {} graphs in {}",
        corpus.len(),
        kind,
        args.out.display()
    );
    Ok(())
}

fn load_aligned_graphs(dir: &Path, count: usize) -> Result<Vec<GraphMatrix>> {
    let missing: Vec<String> = (0..count)
        .filter(|&i| !graph_path(dir, i).exists())
        .map(|i| graph_path(dir, i).display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "missing graph files: {}",
            missing.join(", ")
        )));
    }
    (0..count)
        .map(|i| graph::load_graph(&graph_path(dir, i)).map(|(g, _)| g))
        .collect()
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(sigma) = args.sigma {
        cfg.model.sigma = sigma;
    }
    if args.no_graph_enc {
        cfg.model.ablate_graph_enc = true;
    }
    if args.no_graph_dec {
        cfg.model.ablate_graph_dec = true;
    }

    let corpus = text::read_corpus(&args.corpus)?;
    fs::create_dir_all(&args.out)?;

    let mut state = match &args.resume {
        Some(ckpt_path) => {
            let state = training::load_checkpoint(ckpt_path)?;
            if args.config.is_some() {
                let mut requested = cfg.model.clone();
                requested.vocab_size = state.model_cfg.vocab_size;
                training::ensure_config_matches(&state.model_cfg, &requested)?;
            }
            state
        }
        None => {
            let token_streams: Vec<Vec<String>> = corpus
                .iter()
                .flat_map(|raw| {
                    let mut streams: Vec<Vec<String>> =
                        raw.documents.iter().map(|d| text::tokenize(d)).collect();
                    streams.push(text::tokenize(&raw.summary));
                    streams
                })
                .collect();
            let vocab = Vocabulary::build(
                token_streams.iter().map(|v| v.as_slice()),
                cfg.vocab.min_freq,
                cfg.vocab.max_size,
            )?;
            vocab.save(&args.out.join("vocab.json"))?;
            let mut model_cfg = cfg.model.clone();
            model_cfg.vocab_size = vocab.len();
            TrainState::new(model_cfg, cfg.train.clone(), vocab)?
        }
    };
    if let Some(max_steps) = args.max_steps {
        state.train_cfg.max_steps = max_steps;
    }

    let caps = text::EncodeCaps {
        max_paragraphs: state.model_cfg.max_paragraphs,
        max_tokens_per_paragraph: state.model_cfg.max_tokens_per_paragraph,
        max_summary_tokens: state.model_cfg.max_summary_tokens,
    };
    let graphs = load_aligned_graphs(&args.graphs, corpus.len())?;
    let data: Vec<(text::Instance, GraphMatrix)> = corpus
        .iter()
        .zip(graphs)
        .enumerate()
        .map(|(i, (raw, g))| {
            let instance = text::encode_instance(raw, &state.vocab, &caps, true)
                .map_err(|e| e.with_context(&format!("instance {i}")))?;
            Ok((instance, g))
        })
        .collect::<Result<_>>()?;

    let log_path = args.out.join("train_log.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::Io(format!("opening log {}: {e}", log_path.display())))?;
    let out_dir = args.out.clone();
    training::train_loop(&mut state, &data, |entry, state| {
        writeln!(log, "{}", serde_json::to_string(entry)?)
            .map_err(|e| Error::Io(format!("writing log: {e}")))?;
        if state.train_cfg.checkpoint_every > 0
            && entry.step % state.train_cfg.checkpoint_every as u64 == 0
        {
            training::save_checkpoint(
                state,
                &out_dir.join(format!("checkpoint_step{:06}.ckpt", entry.step)),
            )?;
        }
        Ok(())
    })?;
    training::save_checkpoint(&state, &args.out.join("checkpoint_final.ckpt"))?;
    println!(
        "trained to step {} ({} instances); final checkpoint in {}",
        state.step,
        data.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_summarize(args: SummarizeArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let state = training::load_checkpoint(&args.checkpoint)?;
    let model_cfg: ModelConfig = state.model_cfg.clone();
    let mut decode = cfg.decode.clone();
    if let Some(beam) = args.beam {
        decode.beam = beam;
    }
    if let Some(alpha) = args.alpha {
        decode.alpha = alpha;
    }
    if let Some(max_len) = args.max_len {
        decode.max_len = max_len;
    }
    if let Some(min_len) = args.min_len {
        decode.min_len = min_len;
    }

    let corpus = text::read_corpus(&args.input)?;
    let caps = text::EncodeCaps {
        max_paragraphs: model_cfg.max_paragraphs,
        max_tokens_per_paragraph: model_cfg.max_tokens_per_paragraph,
        max_summary_tokens: model_cfg.max_summary_tokens,
    };
    let graphs: Vec<GraphMatrix> = match (&args.graphs, args.graph) {
        (Some(dir), None) => load_aligned_graphs(dir, corpus.len())?,
        (None, Some(kind)) => {
            let kind: GraphKind = kind.into();
            corpus
                .iter()
                .enumerate()
                .map(|(i, raw)| {
                    let paragraphs = text::paragraph_token_lists(raw, &caps)?;
                    let mut lda = cfg.graph.lda;
                    lda.seed = args.seed.unwrap_or(lda.seed).wrapping_add(i as u64);
                    graph::build_graph(kind, &paragraphs, &lda, &cfg.graph.discourse)
                })
                .collect::<Result<_>>()?
        }
        _ => {
            return Err(Error::Config(
                "summarize needs exactly one of --graphs DIR or --graph TYPE".into(),
            ))
        }
    };

    let mut lines = Vec::with_capacity(corpus.len());
    for (i, (raw, g)) in corpus.iter().zip(&graphs).enumerate() {
        let instance = text::encode_instance(raw, &state.vocab, &caps, false)
            .map_err(|e| e.with_context(&format!("instance {i}")))?;
        let summary = inference::summarize(
            &state.params,
            &model_cfg,
            &state.vocab,
            &instance,
            g,
            &decode,
        )
        .map_err(|e| e.with_context(&format!("instance {i}")))?;
        lines.push(summary);
    }
    fs::write(&args.out, lines.join("\n") + "\n")?;
    println!("wrote {} summaries to {}", lines.len(), args.out.display());
    Ok(())
}

/// References come either from a corpus file (summary field) or from plain
/// text lines; detected by trying the corpus schema on the first line.
fn read_reference_texts(path: &Path) -> Result<Vec<String>> {
    let raw = fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("reading references {}: {e}", path.display())))?;
    let lines: Vec<&str> = raw.lines().filter(|l| !l.trim().is_empty()).collect();
    if let Some(first) = lines.first() {
        if serde_json::from_str::<RawInstance>(first).is_ok() {
            return lines
                .iter()
                .map(|l| {
                    serde_json::from_str::<RawInstance>(l)
                        .map(|r| r.summary)
                        .map_err(|e| Error::Validation(format!("corpus line: {e}")))
                })
                .collect();
        }
    }
    Ok(lines.into_iter().map(str::to_string).collect())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let system_texts: Vec<String> = match args.baseline.as_deref() {
        Some("lead") => {
            if args.k == 0 {
                return Err(Error::Config("lead baseline needs k >= 1".into()));
            }
            let corpus = text::read_corpus(&args.system)?;
            let caps = text::EncodeCaps::default();
            corpus
                .iter()
                .map(|raw| {
                    let paragraphs = text::paragraph_token_lists(raw, &caps)?;
                    let lower: Vec<Vec<String>> =
                        paragraphs.into_iter().map(|p| p.lower).collect();
                    Ok(evaluation::lead_baseline(&lower, args.k).join(" "))
                })
                .collect::<Result<_>>()?
        }
        Some(other) => {
            return Err(Error::Config(format!("unknown baseline '{other}'")));
        }
        None => fs::read_to_string(&args.system)
            .map_err(|e| Error::Io(format!("reading system {}: {e}", args.system.display())))?
            .lines()
            .map(str::to_string)
            .collect(),
    };
    let reference_texts = read_reference_texts(&args.references)?;
    let system_tokens: Vec<Vec<String>> = system_texts.iter().map(|t| text::tokenize(t)).collect();
    let reference_tokens: Vec<Vec<String>> =
        reference_texts.iter().map(|t| text::tokenize(t)).collect();
    let report = evaluation::evaluate_corpus(&system_tokens, &reference_tokens)?;
    fs::write(&args.out, serde_json::to_string_pretty(&report)?)?;

    let mode: RougeLMode = args.rouge_l.into();
    let l_key = match mode {
        RougeLMode::Summary => "rouge_l_summary",
        RougeLMode::Sentence => "rouge_l_sentence",
    };
    println!(
        "ROUGE-1 F1 {:.2}  ROUGE-2 F1 {:.2}  ROUGE-L({}) F1 {:.2}  ({} instances)",
        report.aggregate["rouge_1"].f1,
        report.aggregate["rouge_2"].f1,
        match mode {
            RougeLMode::Summary => "summary",
            RougeLMode::Sentence => "sentence",
        },
        report.aggregate[l_key].f1,
        report.instances.len()
    );
    Ok(())
}
