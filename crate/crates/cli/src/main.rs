use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clamp_core::ablation::{ablation_suite, AblationArm, AblationConfig};
use clamp_core::contrastive::{
    build_vocab, encode_pairs, prepare_pairs, train_clamp, ClampTrainConfig, ContrastiveConfig,
};
use clamp_core::corpus::{corpus_stats, load_pairs, save_pairs, MusicTextPair};
use clamp_core::m3::{pretrain_m3, M3TrainConfig, NoiseConfig};
use clamp_core::nn::{Checkpoint, ClampModel, ContrastiveVariant, M3Model, ModelConfig, OptimizerConfig};
use clamp_core::retrieval::{
    build_index, classify_abc, eval_classification, eval_search, linear_probe, search, EmbeddingIndex,
    LabelPromptSet, ProbeConfig, BUNDLED_PROMPT_SETS,
};
use clamp_core::synth::toy_corpus;
use clap::{Args, Parser, Subcommand, ValueEnum};
use clamp_server::ServiceState;

#[derive(Parser)]
#[command(name = "clamp", version, about = "Music-text contrastive retrieval over ABC notation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Token and sequence-length statistics of a pair corpus.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Write a synthetic labelled corpus for smoke tests.
    Synth {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked bar-patch pretraining of the music encoder.
    PretrainM3(PretrainArgs),
    /// Contrastive training of the music and text encoders.
    TrainClamp(TrainArgs),
    /// Encode a corpus into an embedding index.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank indexed pieces against a text query.
    Search {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(short, long, default_value_t = 10)]
        k: usize,
    },
    /// Zero-shot classification of one ABC file against label prompts.
    Classify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        abc: PathBuf,
        #[command(flatten)]
        prompts: PromptArgs,
    },
    /// Retrieval metrics with each pair's joined texts as the query.
    EvalSearch {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Also score zero-shot classification of this label field.
        #[arg(long, requires = "prompt_set")]
        field: Option<String>,
        #[arg(long)]
        prompt_set: Option<String>,
        /// Keep per-query ranks in the report.
        #[arg(long)]
        ranks: bool,
    },
    /// Cross-validated linear probe on frozen music features.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        field: String,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// HTTP search and classification service.
    Serve {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
    },
    /// Train each ablation arm over several seeds and compare held-out MRR.
    Ablation(AblationArgs),
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 128)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 1)]
    decoder_layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 4)]
    ffn_mult: usize,
    #[arg(long, default_value_t = 512)]
    max_patches: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
}

impl ModelArgs {
    fn config(&self) -> ModelConfig {
        ModelConfig {
            hidden_dim: self.dim,
            encoder_layers: self.layers,
            text_layers: self.layers,
            decoder_layers: self.decoder_layers,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
            max_patches: self.max_patches,
            dropout: self.dropout,
            ..ModelConfig::desk()
        }
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Continue from an M3 checkpoint instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Per-epoch metrics are appended here as JSON lines.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    /// Positive excluded from each denominator.
    Eq1,
    Infonce,
}

impl From<Variant> for ContrastiveVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Eq1 => ContrastiveVariant::ExcludePositive,
            Variant::Infonce => ContrastiveVariant::IncludePositive,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// M3 checkpoint for the music encoder; its shape overrides the model flags.
    #[arg(long)]
    m3_init: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0.2)]
    tau: f64,
    #[arg(long, value_enum, default_value_t = Variant::Eq1)]
    variant: Variant,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long)]
    no_text_dropout: bool,
    #[arg(long)]
    no_normalize: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct PromptArgs {
    /// Label prompt file: {"name": ..., "labels": [{"label": ..., "prompt": ...}]}
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// One of the bundled prompt sets.
    #[arg(long)]
    prompt_set: Option<String>,
}

impl PromptArgs {
    fn load(&self) -> Result<LabelPromptSet> {
        match (&self.prompts, &self.prompt_set) {
            (Some(path), _) => LabelPromptSet::load(path).with_context(|| format!("loading {}", path.display())),
            (None, Some(name)) => load_prompt_set(name),
            (None, None) => unreachable!("clap enforces one of the two"),
        }
    }
}

#[derive(Args)]
struct AblationArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 40)]
    holdout: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 10)]
    m3_epochs: usize,
    /// Extra pieces for M3 pretraining only; their texts are ignored.
    #[arg(long)]
    m3_corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Stats { corpus, json } => {
            let stats = corpus_stats(&read_corpus(&corpus)?)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&stats)?);
            } else {
                println!("{stats}");
            }
        }
        Command::Synth { n, seed, out } => {
            save_pairs(&out, &toy_corpus(n, seed))?;
            log::info!("wrote {n} pairs to {}", out.display());
        }
        Command::PretrainM3(args) => pretrain(args)?,
        Command::TrainClamp(args) => train(args)?,
        Command::Index { corpus, checkpoint, out } => {
            let model = load_clamp(&checkpoint)?;
            let index = build_index(&model, &read_corpus(&corpus)?)?;
            index.save(&out)?;
            log::info!("indexed {} pieces into {}", index.len(), out.display());
        }
        Command::Search { index, checkpoint, query, k } => {
            let index = EmbeddingIndex::load(&index)?;
            let model = load_clamp(&checkpoint)?;
            for hit in search(&index, &model, &query, k)?.hits {
                let title = index.get(&hit.source_id).and_then(|r| r.title.as_deref()).unwrap_or("");
                println!("{:>3}  {:.4}  {}  {}", hit.rank, hit.score, hit.source_id, title);
            }
        }
        Command::Classify { checkpoint, abc, prompts } => {
            let model = load_clamp(&checkpoint)?;
            let text = std::fs::read_to_string(&abc).with_context(|| format!("reading {}", abc.display()))?;
            let result = classify_abc(&model, &text, &prompts.load()?)?;
            println!("{}", serde_json::to_string_pretty(&result)?);
        }
        Command::EvalSearch { index, checkpoint, corpus, field, prompt_set, ranks } => {
            let index = EmbeddingIndex::load(&index)?;
            let model = load_clamp(&checkpoint)?;
            let pairs = read_corpus(&corpus)?;
            let mut report = eval_search(&index, &model, &pairs)?;
            if !ranks {
                report.ranks.clear();
            }
            let mut out = serde_json::json!({ "search": report });
            if let (Some(field), Some(name)) = (field, prompt_set) {
                let cls = eval_classification(&model, &pairs, &load_prompt_set(&name)?, &field)?;
                out["classification"] = serde_json::to_value(cls)?;
            }
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Probe { checkpoint, corpus, field, folds, epochs, lr, seed } => {
            let model = load_clamp(&checkpoint)?;
            let labelled: Vec<MusicTextPair> =
                read_corpus(&corpus)?.into_iter().filter(|p| p.label(&field).is_some()).collect();
            if labelled.is_empty() {
                bail!("no pair carries the label field {field:?}");
            }
            let prepared = prepare_pairs(&labelled, model.config.max_patches)?;
            let (features, _) = encode_pairs(&model, &prepared, 32)?;
            let labels: Vec<String> = labelled.iter().map(|p| p.label(&field).unwrap_or_default().to_string()).collect();
            let ids: Vec<String> = labelled.iter().map(|p| p.source_id().to_string()).collect();
            let cfg = ProbeConfig { folds, epochs, lr, seed, ..ProbeConfig::default() };
            let report = linear_probe(&features, &labels, &ids, &cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Serve { index, checkpoint, bind } => {
            let state = ServiceState::new(load_clamp(&checkpoint)?, EmbeddingIndex::load(&index)?)?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(clamp_server::serve(Arc::new(state), bind))?;
        }
        Command::Ablation(args) => ablation(args)?,
    }
    Ok(())
}

fn read_corpus(path: &Path) -> Result<Vec<MusicTextPair>> {
    load_pairs(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn load_clamp(path: &Path) -> Result<ClampModel> {
    Checkpoint::load(path)
        .and_then(Checkpoint::into_clamp)
        .with_context(|| format!("loading CLaMP checkpoint {}", path.display()))
}

fn load_m3(path: &Path) -> Result<M3Model> {
    Checkpoint::load(path)
        .and_then(Checkpoint::into_m3)
        .with_context(|| format!("loading M3 checkpoint {}", path.display()))
}

fn load_prompt_set(name: &str) -> Result<LabelPromptSet> {
    LabelPromptSet::bundled(name)
        .with_context(|| format!("bundled prompt sets are {}", BUNDLED_PROMPT_SETS.join(", ")))
}

fn open_log(path: Option<&Path>) -> Result<Option<BufWriter<File>>> {
    path.map(|p| {
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(p)
            .map(BufWriter::new)
            .with_context(|| format!("opening log {}", p.display()))
    })
    .transpose()
}

fn append_line(log: &mut Option<BufWriter<File>>, value: &impl serde::Serialize) {
    if let Some(w) = log {
        let line = serde_json::to_string(value).expect("log records serialize");
        if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
            log::warn!("log write failed: {e}");
        }
    }
}

fn pretrain(args: PretrainArgs) -> Result<()> {
    let init = args.init.as_deref().map(load_m3).transpose()?;
    let model = init.as_ref().map_or_else(|| args.model.config(), |m| m.config.clone());
    let sequences: Vec<_> = prepare_pairs(&read_corpus(&args.corpus)?, model.max_patches)?
        .into_iter()
        .map(|p| p.patches)
        .collect();
    let cfg = M3TrainConfig {
        model,
        optim: OptimizerConfig { epochs: args.epochs, lr: args.lr, ..OptimizerConfig::default() },
        noise: NoiseConfig { seed: args.seed, ..NoiseConfig::default() },
        batch_size: args.batch,
        seed: args.seed,
    };
    let mut log = open_log(args.log.as_deref())?;
    let outcome = pretrain_m3(&sequences, &cfg, init, |e| {
        log::info!("epoch {} loss {:.4}", e.epoch, e.mean_loss);
        append_line(&mut log, e);
    })?;
    if let Some(epoch) = outcome.diverged_at {
        log::error!("loss diverged at epoch {epoch}; saving the last finite weights");
    }
    let meta = serde_json::json!({ "train": cfg, "epochs": outcome.epochs, "diverged_at": outcome.diverged_at });
    Checkpoint::from_m3(&outcome.model, meta).save(&args.out)?;
    log::info!("saved {}", args.out.display());
    if outcome.diverged_at.is_some() {
        bail!("training diverged");
    }
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let m3 = args.m3_init.as_deref().map(load_m3).transpose()?;
    let mut model = args.model.config();
    if let Some(m3) = &m3 {
        model = ModelConfig {
            hidden_dim: m3.config.hidden_dim,
            encoder_layers: m3.config.encoder_layers,
            heads: m3.config.heads,
            ffn_mult: m3.config.ffn_mult,
            max_patches: m3.config.max_patches,
            ..model
        };
    }
    let pairs = read_corpus(&args.corpus)?;
    let cfg = ClampTrainConfig {
        optim: OptimizerConfig { epochs: args.epochs, lr: args.lr, ..OptimizerConfig::default() },
        contrastive: ContrastiveConfig {
            tau: args.tau,
            batch_size: args.batch,
            variant: args.variant.into(),
            normalize: !args.no_normalize,
        },
        text_dropout: !args.no_text_dropout,
        seed: args.seed,
        model,
    };
    let prepared = prepare_pairs(&pairs, cfg.model.max_patches)?;
    let mut log = open_log(args.log.as_deref())?;
    let outcome = train_clamp(&prepared, build_vocab(&pairs), &cfg, m3.as_ref(), |e| {
        log::info!("epoch {} loss {:.4}", e.epoch, e.mean_loss);
        append_line(&mut log, e);
    })?;
    let meta = serde_json::json!({ "train": cfg, "epochs": outcome.epochs });
    Checkpoint::from_clamp(&outcome.model, meta).save(&args.out)?;
    log::info!("saved {}", args.out.display());
    Ok(())
}

fn ablation(args: AblationArgs) -> Result<()> {
    let pairs = read_corpus(&args.corpus)?;
    let model = args.model.config();
    let cfg = AblationConfig {
        clamp: ClampTrainConfig {
            model: model.clone(),
            optim: OptimizerConfig { epochs: args.epochs, lr: args.lr, ..OptimizerConfig::default() },
            contrastive: ContrastiveConfig { batch_size: args.batch, ..ContrastiveConfig::default() },
            ..ClampTrainConfig::default()
        },
        m3: M3TrainConfig {
            model,
            optim: OptimizerConfig { epochs: args.m3_epochs, lr: args.lr, ..OptimizerConfig::default() },
            ..M3TrainConfig::default()
        },
        seeds: (0..args.seeds).collect(),
        holdout: args.holdout,
        arms: AblationArm::ALL.to_vec(),
    };
    let unlabelled = match &args.m3_corpus {
        Some(path) => prepare_pairs(&read_corpus(path)?, cfg.m3.model.max_patches)?
            .into_iter()
            .map(|p| p.patches)
            .collect(),
        None => Vec::new(),
    };
    let report = ablation_suite(&pairs, &unlabelled, &cfg, |row| {
        log::info!("{:?} seed {}: mrr {:.4}", row.arm, row.seed, row.search.mrr);
    })?;
    let json = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => std::fs::write(path, &json)?,
        None => println!("{json}"),
    }
    for s in &report.summary {
        log::info!("{:?}: mean mrr {:.4} ± {:.4} over {} runs", s.arm, s.mean_mrr, s.std_mrr, s.runs);
    }
    Ok(())
}
