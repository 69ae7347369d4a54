//! Command line for training, evaluating and analyzing refinement models
//! over delimited CTR data.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use frnet::checkpoint;
use frnet::config::{parse_ratios, parse_widths, TrainConfig};
use frnet::data::{self, Dataset, Prepared, RawData, Vocab};
use frnet::error::{Error, Result};
use frnet::metrics::{self, GateStats};
use frnet::model::{self, ModelParams};
use frnet::refine::Variant;
use frnet::synth;
use frnet::train::{train_streaming, METRICS_HEADER};

#[derive(Parser)]
#[command(
    name = "frnet",
    version,
    about = "Train and analyze context-aware feature-refinement CTR models"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write checkpoint, metrics CSV and vocabulary dump.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a data file and print AUC/Logloss.
    Eval(EvalArgs),
    /// Train every ablation variant (1..=13) and emit one comparison CSV.
    Ablate(AblateArgs),
    /// Run the double-precision finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Gate-weight distribution of a trained bit-gate checkpoint.
    Gatestats(GatestatsArgs),
    /// Dump the embedding table as CSV for external visualization.
    DumpEmbeddings(DumpArgs),
    /// Generate the planted-structure benchmark dataset.
    Synth(SynthArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Single data file, split by --split.
    #[arg(long, conflicts_with_all = ["train", "val", "test"])]
    data: Option<PathBuf>,
    /// Ratio split of --data, e.g. 7:2:1.
    #[arg(long, default_value = "7:2:1")]
    split: String,
    /// Explicit training file (with --val and --test).
    #[arg(long, requires_all = ["val", "test"])]
    train: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Field delimiter of the input files.
    #[arg(long, default_value = ",")]
    delimiter: char,
    /// Columns to log-discretize before vocabulary building,
    /// comma-separated.
    #[arg(long)]
    discretize: Option<String>,
}

#[derive(Args, Clone)]
struct Overrides {
    /// Config file of `key = value` lines; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Variant: 1..=13, fm, frnet or frnet-vec.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    attn_dim: Option<usize>,
    /// Hidden widths of the contextual extractor, e.g. `128` or `64,32`.
    #[arg(long)]
    cie_hidden: Option<String>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Fold tokens seen fewer than this many times into the unknown slot.
    #[arg(long)]
    min_count: Option<u64>,
    /// Single-thread reproducibility mode; zeroes the seconds column.
    #[arg(long)]
    deterministic: bool,
}

impl Overrides {
    fn build(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        if let Some(v) = &self.variant {
            cfg.variant = Variant::parse(v)?;
        }
        if let Some(v) = self.embed_dim {
            cfg.embed_dim = v;
        }
        if let Some(v) = self.attn_dim {
            cfg.attention_dim = Some(v);
        }
        if let Some(v) = &self.cie_hidden {
            cfg.cie_hidden = parse_widths(v)?;
        }
        if let Some(v) = self.batch {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.dropout {
            cfg.dropout = v;
        }
        if let Some(v) = self.max_epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.min_count {
            cfg.min_feature_count = v;
        }
        if self.deterministic {
            cfg.deterministic = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    overrides: Overrides,
    /// Directory all outputs are written into.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Data file to score.
    #[arg(long)]
    data: PathBuf,
    /// Vocabulary dump; defaults to vocab.tsv next to the checkpoint.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value = ",")]
    delimiter: char,
    #[arg(long)]
    discretize: Option<String>,
    #[arg(long, default_value_t = 4096)]
    batch: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random draws per check.
    #[arg(long, default_value_t = 50)]
    seeds: u64,
}

#[derive(Args)]
struct GatestatsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value = ",")]
    delimiter: char,
    #[arg(long)]
    discretize: Option<String>,
    /// Instances sampled for the distribution.
    #[arg(long, default_value_t = 100_000)]
    sample_size: usize,
    /// Seed of the instance subsample.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 4096)]
    batch: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = synth::DEFAULT_ROWS)]
    rows: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output file path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = ",")]
    delimiter: char,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help / --version land here too and must exit cleanly.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) => 1,
                Error::Data(_) | Error::Shape(_) | Error::Metric(_) | Error::Io(_) => 2,
                Error::Numeric(_) => 3,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Ablate(args) => cmd_ablate(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
        Cmd::Gatestats(args) => cmd_gatestats(args),
        Cmd::DumpEmbeddings(args) => cmd_dump_embeddings(args),
        Cmd::Synth(args) => cmd_synth(args),
    }
}

fn read_and_discretize(
    path: &Path,
    delimiter: char,
    discretize: &Option<String>,
) -> Result<RawData> {
    let mut raw = data::read_delimited(path, delimiter)?;
    if let Some(cols) = discretize {
        let names: Vec<String> = cols.split(',').map(|c| c.trim().to_string()).collect();
        data::discretize_columns(&mut raw, &names)?;
    }
    Ok(raw)
}

fn load_data(args: &DataArgs, seed: u64, min_count: u64) -> Result<Prepared> {
    if let Some(path) = &args.data {
        let ratios = parse_ratios(&args.split)?;
        let raw = read_and_discretize(path, args.delimiter, &args.discretize)?;
        data::prepare_split(raw, ratios, seed, min_count)
    } else {
        match (&args.train, &args.val, &args.test) {
            (Some(tr), Some(va), Some(te)) => {
                let tr = read_and_discretize(tr, args.delimiter, &args.discretize)?;
                let va = read_and_discretize(va, args.delimiter, &args.discretize)?;
                let te = read_and_discretize(te, args.delimiter, &args.discretize)?;
                data::prepare_files(tr, va, te, min_count)
            }
            _ => Err(Error::Config(
                "provide --data (with --split) or all of --train/--val/--test".into(),
            )),
        }
    }
}

fn load_eval_dataset(
    checkpoint_path: &Path,
    vocab: &Option<PathBuf>,
    data_path: &Path,
    delimiter: char,
    discretize: &Option<String>,
) -> Result<(ModelParams<f32>, Dataset)> {
    let (params, _echo) = checkpoint::load(checkpoint_path)?;
    let vocab_path = vocab.clone().unwrap_or_else(|| {
        checkpoint_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("vocab.tsv")
    });
    let vocab_file = File::open(&vocab_path)
        .map_err(|e| Error::Data(format!("cannot open vocab {}: {e}", vocab_path.display())))?;
    let vocab = std::sync::Arc::new(Vocab::parse_dump(vocab_file)?);
    if vocab.n_features() != params.dims.n_features || vocab.field_count() != params.dims.n_fields
    {
        return Err(Error::Data(format!(
            "vocab ({} features, {} fields) does not match checkpoint ({}, {})",
            vocab.n_features(),
            vocab.field_count(),
            params.dims.n_features,
            params.dims.n_fields
        )));
    }
    let raw = read_and_discretize(data_path, delimiter, discretize)?;
    let instances = raw
        .records
        .iter()
        .map(|r| vocab.encode(r))
        .collect::<Result<Vec<_>>>()?;
    Ok((params, Dataset { vocab, instances }))
}

fn dataset_metrics(params: &ModelParams<f32>, data: &Dataset, batch: usize) -> Result<(f64, f64)> {
    let probs = model::predict(params, &data.instances, batch)?;
    let probs64: Vec<f64> = probs.iter().map(|&p| p as f64).collect();
    let labels = data.labels();
    Ok((
        metrics::auc(&probs64, &labels)?,
        metrics::logloss(&probs64, &labels),
    ))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = args.overrides.build()?;
    let prepared = load_data(&args.data, cfg.seed, cfg.min_feature_count)?;
    std::fs::create_dir_all(&args.out_dir)?;

    println!(
        "training variant {} on {} train / {} val / {} test instances ({} features, {} fields)",
        cfg.variant,
        prepared.train.len(),
        prepared.val.len(),
        prepared.test.len(),
        prepared.train.n_features(),
        prepared.train.field_count()
    );

    let metrics_path = args.out_dir.join("metrics.csv");
    let mut metrics_file = File::create(&metrics_path)?;
    writeln!(metrics_file, "{METRICS_HEADER}")?;
    let outcome = train_streaming(&prepared, &cfg, &mut |rec| {
        writeln!(metrics_file, "{}", rec.csv_line())?;
        metrics_file.flush()?;
        println!(
            "epoch {:>3}  lr {:<8}  train_loss {:.6}  val_auc {:.6}  val_logloss {:.6}  ({:.1}s)",
            rec.epoch, rec.lr, rec.train_loss, rec.val_auc, rec.val_logloss, rec.seconds
        );
        Ok(())
    })?;

    std::fs::write(args.out_dir.join("vocab.tsv"), prepared.train.vocab.dump()?)?;
    checkpoint::save_with_config(
        &args.out_dir.join("checkpoint.frn"),
        &outcome.params,
        &cfg.echo(),
    )?;

    if let (Some(e), Some(a), Some(l)) = (
        outcome.best_epoch,
        outcome.best_val_auc,
        outcome.best_val_logloss,
    ) {
        println!("best epoch {e}: val auc = {a}, val logloss = {l}");
    }
    if let (Some(a), Some(l)) = (outcome.test_auc, outcome.test_logloss) {
        println!("auc = {a}");
        println!("logloss = {l}");
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (params, dataset) = load_eval_dataset(
        &args.checkpoint,
        &args.vocab,
        &args.data,
        args.delimiter,
        &args.discretize,
    )?;
    let (auc, logloss) = dataset_metrics(&params, &dataset, args.batch)?;
    println!("auc = {auc}");
    println!("logloss = {logloss}");
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let base = args.overrides.build()?;
    let prepared = load_data(&args.data, base.seed, base.min_feature_count)?;
    std::fs::create_dir_all(&args.out_dir)?;

    let mut csv =
        String::from("variant,name,best_epoch,val_auc,val_logloss,test_auc,test_logloss\n");
    for variant in Variant::all() {
        let mut cfg = base.clone();
        cfg.variant = variant;
        let outcome = train_streaming(&prepared, &cfg, &mut |_| Ok(()))?;
        let row = format!(
            "{},{},{},{},{},{},{}",
            variant.id(),
            variant.name(),
            outcome.best_epoch.map_or(String::new(), |e| e.to_string()),
            outcome
                .best_val_auc
                .map_or(String::new(), |v| v.to_string()),
            outcome
                .best_val_logloss
                .map_or(String::new(), |v| v.to_string()),
            outcome.test_auc.map_or(String::new(), |v| v.to_string()),
            outcome
                .test_logloss
                .map_or(String::new(), |v| v.to_string()),
        );
        println!("{row}");
        csv.push_str(&row);
        csv.push('\n');
    }
    std::fs::write(args.out_dir.join("ablation.csv"), csv)?;
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let reports = frnet::check::full_suite(args.seeds)?;
    let mut ok = true;
    for r in &reports {
        println!("{r}");
        ok &= r.passed();
    }
    if !ok {
        return Err(Error::Numeric(
            "gradient check failed; see report above".into(),
        ));
    }
    println!(
        "all {} checks passed ({} seeds each)",
        reports.len(),
        args.seeds
    );
    Ok(())
}

fn cmd_gatestats(args: GatestatsArgs) -> Result<()> {
    let (params, dataset) = load_eval_dataset(
        &args.checkpoint,
        &args.vocab,
        &args.data,
        args.delimiter,
        &args.discretize,
    )?;
    let instances = data::sample_instances(dataset.instances, args.sample_size, args.seed);
    let values = model::gate_values(&params, &instances, args.batch)?;
    let stats = GateStats::from_values(&values)?;
    std::fs::create_dir_all(&args.out_dir)?;
    std::fs::write(args.out_dir.join("gate_histogram.csv"), stats.to_csv())?;
    println!("instances = {}", instances.len());
    println!("gate values = {}", stats.count);
    println!("mean selection = {}", stats.mean);
    println!("mean complement = {}", stats.mean_complement);
    Ok(())
}

fn cmd_dump_embeddings(args: DumpArgs) -> Result<()> {
    let (params, _) = checkpoint::load(&args.checkpoint)?;
    std::fs::create_dir_all(&args.out_dir)?;
    let d = params.dims.embed_dim;
    let mut out = String::from("index");
    for k in 0..d {
        out.push_str(&format!(",v{k}"));
    }
    out.push('\n');
    for (i, row) in params.embed.data().chunks(d).enumerate() {
        out.push_str(&i.to_string());
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    std::fs::write(args.out_dir.join("embeddings.csv"), out)?;
    println!(
        "wrote {} embedding rows of width {d}",
        params.dims.n_features
    );
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let raw = synth::generate(args.rows, args.seed);
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    synth::write_delimited(&args.out, &raw, args.delimiter)?;
    let pos: usize = raw.records.iter().map(|r| r.label as usize).sum();
    println!(
        "wrote {} rows ({} fields, {:.1}% positive) to {}",
        raw.records.len(),
        raw.fields.len(),
        100.0 * pos as f64 / raw.records.len().max(1) as f64,
        args.out.display()
    );
    Ok(())
}
