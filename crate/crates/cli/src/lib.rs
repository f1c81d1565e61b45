//! Command-line driver: corpus preparation, training, evaluation, ablation
//! and sweep runs, attention reports and synthetic data.
//!
//! Exit codes: 0 on success, 1 on usage errors (bad flags, missing files),
//! 2 when inputs or configuration fail validation.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use aspect_transfer::corpus::{load_corpus, save_corpus, split_corpus, DomainCorpus};
use aspect_transfer::embeddings::{load_embeddings, save_embeddings};
use aspect_transfer::metrics::{paired_t_test, summarize, F1Report};
use aspect_transfer::report::{attention_rows, write_attention_tsv};
use aspect_transfer::synth::{check_disjoint, generate_synthetic, paired_specs, synthetic_embeddings, DomainSpec, PairConfig, VectorSpec};
use aspect_transfer::trainer::{evaluate, run_ablation, Checkpoint, EpochRecord, Trainer, TransferData};
use aspect_transfer::{Ablation, EmbeddingTable, Model, ModelConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "aspect-transfer", version, about = "Cross-domain aspect term extraction")]
pub struct Cli {
    /// Run seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file with `ModelConfig` fields; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a corpus and split it into train and test files.
    Prepare(PrepareArgs),
    /// Train on a labeled source and a category-labeled target domain.
    Train(TrainArgs),
    /// Score a checkpoint on a labeled corpus.
    Eval(EvalArgs),
    /// Train every ablation over several seeds and compare.
    Ablate(AblateArgs),
    /// Vary one hyperparameter over several seeds.
    Sweep(SweepArgs),
    /// Write per-token general-attention weights.
    AttnReport(AttnArgs),
    /// Generate synthetic corpora and word vectors.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

/// Overrides for `ModelConfig` fields.
#[derive(Debug, Clone, Default, Args)]
pub struct ModelFlags {
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    #[arg(long)]
    pub lstm_layers: Option<usize>,
    /// Concatenated BiLSTM width.
    #[arg(long)]
    pub lstm_total: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub fc_layers: Option<usize>,
    #[arg(long)]
    pub fc_dim: Option<usize>,
    #[arg(long)]
    pub recon_levels: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Whether source sentences enter the reconstruction loss.
    #[arg(long, value_enum)]
    pub recon_source: Option<Switch>,
    #[arg(long)]
    pub freeze_embeddings: bool,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Learning rate of the embedding table; defaults to `--lr`.
    #[arg(long)]
    pub embedding_lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Token-labeled source corpus.
    #[arg(long)]
    pub source: PathBuf,
    /// Target corpus; only its category labels are used for training.
    #[arg(long)]
    pub target: PathBuf,
    /// Labeled target test corpus. Without it the target file's own tags,
    /// if any, are used for scoring.
    #[arg(long)]
    pub target_test: Option<PathBuf>,
    /// Whitespace-separated text word vectors.
    #[arg(long)]
    pub emb: PathBuf,
    /// Source domain name; defaults to the file stem.
    #[arg(long)]
    pub source_name: Option<String>,
    /// Target domain name; defaults to the file stem.
    #[arg(long)]
    pub target_name: Option<String>,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub domain: Option<String>,
    #[arg(long, default_value_t = 0.75)]
    pub train_fraction: f64,
    #[arg(long)]
    pub train_out: PathBuf,
    #[arg(long)]
    pub test_out: PathBuf,
    /// Drop token labels from the train side, as for a target domain.
    #[arg(long)]
    pub strip_labels: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelFlags,
    /// Output directory for the checkpoint, loss log and metrics.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Domain whose category heads the corpus uses; defaults to the
    /// checkpoint's target domain.
    #[arg(long)]
    pub domain: Option<String>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelFlags,
    /// Number of seeds, counted up from `--seed`.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Subset of settings (full, -SCM, -ITM, -ITMs, source-only).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub only: Vec<String>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Lambda,
    Beta,
    ReconLevels,
    Heads,
    LstmLayers,
    FcLayers,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long, value_enum)]
    pub param: SweepParam,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttnArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub domain: Option<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML domain spec; generates one corpus at `--out`.
    #[arg(long, conflicts_with = "pair")]
    pub spec: Option<PathBuf>,
    /// Generate the built-in source/target pair into the `--out` directory.
    #[arg(long)]
    pub pair: bool,
    #[arg(long, default_value_t = 500)]
    pub size: usize,
    /// Target test sentences for `--pair`.
    #[arg(long, default_value_t = 200)]
    pub test_size: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write word vectors of this dimension (`--pair` writes them to
    /// `vectors.txt`).
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub emb_out: Option<PathBuf>,
    /// Weight of the direction shared by all noun vectors.
    #[arg(long, default_value_t = 1.0)]
    pub noun_weight: f64,
    /// Weight of the direction shared by the words of one category.
    #[arg(long, default_value_t = 0.0)]
    pub category_weight: f64,
}

impl SynthArgs {
    fn vectors(&self, dim: usize) -> VectorSpec {
        VectorSpec {
            dim,
            noun_weight: self.noun_weight,
            category_weight: self.category_weight,
        }
    }
}

/// A failure that maps to exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<aspect_transfer::Error>() {
            return if e.is_validation() { EXIT_VALIDATION } else { EXIT_USAGE };
        }
    }
    EXIT_USAGE
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let base = base_config(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Prepare(a) => prepare(a, base.seed),
        Command::Train(a) => train(a, base),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a, base),
        Command::Sweep(a) => sweep(a, base),
        Command::AttnReport(a) => attn_report(a),
        Command::Synth(a) => synth(a, base.seed),
    }
}

fn base_config(path: Option<&Path>, seed: Option<u64>) -> anyhow::Result<ModelConfig> {
    let mut config = match path {
        None => ModelConfig::default(),
        Some(p) => {
            let text = read_text(p)?;
            toml::from_str(&text)
                .map_err(|e| aspect_transfer::Error::Config(format!("{}: {e}", p.display())))?
        }
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

pub fn apply_flags(mut c: ModelConfig, f: &ModelFlags) -> anyhow::Result<ModelConfig> {
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = f.$field {
                c.$field = v;
            }
        )*};
    }
    set!(embedding_dim, lstm_layers, lstm_total, heads, fc_layers, fc_dim, recon_levels, lambda, beta, lr, epochs, batch_size, dropout);
    if let Some(s) = f.recon_source {
        c.itm_source = s == Switch::On;
    }
    if f.embedding_lr.is_some() {
        c.embedding_lr = f.embedding_lr;
    }
    if f.freeze_embeddings {
        c.freeze_embeddings = true;
    }
    c.validate()?;
    Ok(c)
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    require_file(path)?;
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn require_file(path: &Path) -> anyhow::Result<()> {
    if !path.is_file() {
        return Err(usage(format!("no such file: {}", path.display())));
    }
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_owned())
}

fn load(path: &Path, domain: &str) -> anyhow::Result<DomainCorpus> {
    require_file(path)?;
    Ok(load_corpus(path, domain)?)
}

/// The corpora and vectors of a run, plus the corpus used for scoring.
struct Loaded {
    source: DomainCorpus,
    target: DomainCorpus,
    test: Option<DomainCorpus>,
    embeddings: EmbeddingTable,
}

fn load_data(d: &DataArgs, config: &ModelConfig) -> anyhow::Result<Loaded> {
    let source_name = d.source_name.clone().unwrap_or_else(|| stem(&d.source));
    let target_name = d.target_name.clone().unwrap_or_else(|| stem(&d.target));
    if source_name == target_name {
        return Err(aspect_transfer::Error::Config(format!(
            "source and target are both named `{source_name}`; pass --source-name/--target-name"
        ))
        .into());
    }
    let source = load(&d.source, &source_name)?;
    let target_full = load(&d.target, &target_name)?;
    let test = match &d.target_test {
        Some(p) => Some(load(p, &target_name)?),
        None if target_full.has_token_labels && !target_full.is_empty() => Some(target_full.clone()),
        None => None,
    };
    let mut vocab = BTreeSet::new();
    for c in [Some(&source), Some(&target_full), test.as_ref()].into_iter().flatten() {
        for s in &c.sentences {
            vocab.extend(s.tokens.iter().cloned());
        }
    }
    require_file(&d.emb)?;
    let embeddings = load_embeddings(&d.emb, &vocab, config.embedding_dim, config.seed, config.lowercase)?;
    Ok(Loaded {
        source,
        target: target_full.without_labels(),
        test,
        embeddings,
    })
}

fn prepare(a: PrepareArgs, seed: u64) -> anyhow::Result<()> {
    let domain = a.domain.clone().unwrap_or_else(|| stem(&a.input));
    let corpus = load(&a.input, &domain)?;
    let (train, test) = split_corpus(&corpus, a.train_fraction, seed)?;
    let train = if a.strip_labels { train.without_labels() } else { train };
    save_corpus(&train, &a.train_out)?;
    save_corpus(&test, &a.test_out)?;
    println!(
        "{domain}: {} sentences -> train {} ({}), test {} ({})",
        corpus.len(),
        train.len(),
        a.train_out.display(),
        test.len(),
        a.test_out.display()
    );
    Ok(())
}

pub fn format_loss_log(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch\textraction\tcategorization\treconstruction\ttotal\n");
    for r in history {
        out += &format!("{r}\n");
    }
    out
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train(a: TrainArgs, base: ModelConfig) -> anyhow::Result<()> {
    let config = apply_flags(base, &a.model)?;
    let data = load_data(&a.data, &config)?;
    create_dir(&a.out)?;
    let model = Model::for_pair(config.clone(), data.embeddings, &data.source, &data.target)?;
    let mut trainer = Trainer::new(model);
    let log_path = a.out.join("losses.tsv");
    trainer.fit_with(&data.source, &data.target, |r| eprintln!("epoch {r}"))?;
    write_file(&log_path, &format_loss_log(&trainer.state.history))?;
    trainer.checkpoint().save(a.out.join("checkpoint.json"))?;
    write_file(&a.out.join("config.toml"), &toml::to_string(&config)?)?;

    let metrics = match &data.test {
        Some(test) => {
            let report = evaluate(&trainer.model, test)?;
            println!("{}\t{report}", test.name);
            format!("{}\n", metrics_toml(&test.name, &report)?)
        }
        None => {
            println!("no labeled target data; skipped scoring");
            "# no labeled target data\n".to_owned()
        }
    };
    write_file(&a.out.join("metrics.toml"), &metrics)
}

fn metrics_toml(domain: &str, report: &F1Report) -> anyhow::Result<String> {
    #[derive(serde::Serialize)]
    struct Metrics<'a> {
        domain: &'a str,
        #[serde(flatten)]
        report: &'a F1Report,
    }
    Ok(toml::to_string(&Metrics { domain, report })?)
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    require_file(path)?;
    Ok(Checkpoint::load(path)?)
}

/// Target domain by default: the second registered head bank.
fn eval_domain(model: &Model, requested: Option<String>) -> String {
    requested.unwrap_or_else(|| {
        model
            .domains()
            .last()
            .map(str::to_owned)
            .unwrap_or_default()
    })
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let model = load_checkpoint(&a.checkpoint)?.model;
    let domain = eval_domain(&model, a.domain);
    let corpus = load(&a.corpus, &domain)?;
    model.check_domain(&corpus)?;
    let report = evaluate(&model, &corpus)?;
    println!("{domain}\t{report}");
    Ok(())
}

fn attn_report(a: AttnArgs) -> anyhow::Result<()> {
    let model = load_checkpoint(&a.checkpoint)?.model;
    let domain = eval_domain(&model, a.domain);
    let corpus = load(&a.corpus, &domain)?;
    let rows = attention_rows(&model, &corpus)?;
    let file = fs::File::create(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let mut out = BufWriter::new(file);
    write_attention_tsv(&rows, &mut out)?;
    out.flush()?;
    println!("{} tokens in {} sentences -> {}", rows.len(), corpus.len(), a.out.display());
    Ok(())
}

fn transfer_data(d: &DataArgs, config: &ModelConfig) -> anyhow::Result<TransferData> {
    let data = load_data(d, config)?;
    let target_test = data.test.ok_or_else(|| {
        aspect_transfer::Error::Validation("scoring needs --target-test or a tagged --target file".into())
    })?;
    Ok(TransferData {
        source: data.source,
        target: data.target,
        target_test,
        embeddings: data.embeddings,
    })
}

/// F1 per seed for one configuration.
fn seed_scores(data: &TransferData, config: &ModelConfig, which: Ablation, seeds: u64) -> anyhow::Result<Vec<F1Report>> {
    (0..seeds)
        .map(|i| {
            let config = ModelConfig {
                seed: config.seed + i,
                ..config.clone()
            };
            Ok(run_ablation(data, &config, which)?.report)
        })
        .collect()
}

fn setting_line(label: &str, reports: &[F1Report]) -> anyhow::Result<String> {
    let mean = |f: fn(&F1Report) -> f64| summarize(&reports.iter().map(f).collect::<Vec<_>>());
    let (p, r, f1) = (mean(|x| x.precision)?, mean(|x| x.recall)?, mean(|x| x.f1)?);
    Ok(format!(
        "{label}\tP={:.4}\tR={:.4}\tF1={:.4}\tmean±sd={:.4}±{:.4}\tn={}",
        p.mean, r.mean, f1.mean, f1.mean, f1.sd, f1.n
    ))
}

fn emit(lines: &[String], out: Option<&Path>) -> anyhow::Result<()> {
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    print!("{text}");
    if let Some(p) = out {
        write_file(p, &text)?;
    }
    Ok(())
}

fn ablate(a: AblateArgs, base: ModelConfig) -> anyhow::Result<()> {
    let config = apply_flags(base, &a.model)?;
    let settings: Vec<Ablation> = if a.only.is_empty() {
        Ablation::ALL.to_vec()
    } else {
        a.only.iter().map(|s| s.parse()).collect::<Result<_, _>>()?
    };
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let data = transfer_data(&a.data, &config)?;
    let mut lines = Vec::new();
    let mut results = Vec::new();
    for &which in &settings {
        let reports = seed_scores(&data, &config, which, a.seeds)?;
        lines.push(setting_line(which.label(), &reports)?);
        results.push((which, reports));
    }
    if let Some((_, full)) = results.iter().find(|(w, _)| *w == Ablation::Full) {
        if a.seeds >= 2 {
            let f = |r: &[F1Report]| r.iter().map(|x| x.f1).collect::<Vec<_>>();
            for (which, other) in results.iter().filter(|(w, _)| *w != Ablation::Full) {
                let t = paired_t_test(&f(full), &f(other))?;
                lines.push(format!("full vs {which}\tt={:.4}\tp={:.4}\tdf={}", t.t, t.p, t.df));
            }
        }
    }
    emit(&lines, a.out.as_deref())
}

fn sweep(a: SweepArgs, base: ModelConfig) -> anyhow::Result<()> {
    let config = apply_flags(base, &a.model)?;
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let data = transfer_data(&a.data, &config)?;
    let mut lines = Vec::new();
    for value in &a.values {
        let c = set_param(&config, a.param, value)?;
        let reports = seed_scores(&data, &c, Ablation::Full, a.seeds)?;
        lines.push(setting_line(&format!("{:?}={value}", a.param), &reports)?);
    }
    emit(&lines, a.out.as_deref())
}

fn set_param(config: &ModelConfig, param: SweepParam, value: &str) -> anyhow::Result<ModelConfig> {
    let bad = |e: &dyn fmt::Display| usage(format!("bad value `{value}` for {param:?}: {e}"));
    let int = || value.parse::<usize>().map_err(|e| bad(&e));
    let float = || value.parse::<f64>().map_err(|e| bad(&e));
    let mut c = config.clone();
    match param {
        SweepParam::Lambda => c.lambda = float()?,
        SweepParam::Beta => c.beta = float()?,
        SweepParam::ReconLevels => c.recon_levels = int()?,
        SweepParam::Heads => c.heads = int()?,
        SweepParam::LstmLayers => c.lstm_layers = int()?,
        SweepParam::FcLayers => c.fc_layers = int()?,
    }
    c.validate()?;
    Ok(c)
}

fn synth(a: SynthArgs, seed: u64) -> anyhow::Result<()> {
    if let Some(spec_path) = &a.spec {
        let spec: DomainSpec = toml::from_str(&read_text(spec_path)?)
            .map_err(|e| aspect_transfer::Error::Config(format!("{}: {e}", spec_path.display())))?;
        let corpus = generate_synthetic(&spec, a.size, seed)?;
        save_corpus(&corpus, &a.out)?;
        if let (Some(dim), Some(path)) = (a.dim, &a.emb_out) {
            save_embeddings(path, &synthetic_embeddings(&[&spec], &a.vectors(dim), seed))?;
        }
        println!("{}: {} sentences -> {}", spec.name, corpus.len(), a.out.display());
        return Ok(());
    }
    if !a.pair {
        return Err(usage("synth needs --spec FILE or --pair"));
    }
    let (src, tgt) = paired_specs(("source", "target"), &PairConfig::default());
    check_disjoint(&src, &tgt)?;
    create_dir(&a.out)?;
    let files = [
        ("source.tsv", generate_synthetic(&src, a.size, seed)?),
        ("target.tsv", generate_synthetic(&tgt, a.size, seed.wrapping_add(1))?.without_labels()),
        ("target_test.tsv", generate_synthetic(&tgt, a.test_size, seed.wrapping_add(2))?),
    ];
    for (name, corpus) in &files {
        save_corpus(corpus, a.out.join(name))?;
    }
    let dim = a
        .dim
        .ok_or_else(|| anyhow!("--pair needs --dim for the word vectors"))
        .map_err(|e| usage(e.to_string()))?;
    let vectors = a.emb_out.clone().unwrap_or_else(|| a.out.join("vectors.txt"));
    save_embeddings(&vectors, &synthetic_embeddings(&[&src, &tgt], &a.vectors(dim), seed.wrapping_add(3)))?;
    println!("wrote source/target/target_test corpora and {dim}-d vectors to {}", a.out.display());
    Ok(())
}
