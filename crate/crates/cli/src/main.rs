//! `varitab` command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use varitab::checkpoint::{load_checkpoint, save_checkpoint, LoadMode};
use varitab::data::{
    apply_codebook, fit_normalization, load_labeled_csv, read_manifest, split_columns, write_csv, write_manifest,
    CsvOptions, SplitMode, SplitSpec, TableDataset,
};
use varitab::model::NumericNorm;
use varitab::synth::{synth_tables, SynthSpec};
use varitab::trainer::{
    evaluate, finetune, predict_proba, pretrain_vpcl, train_supervised, TrainConfig, VpclConfig, VpclMode,
};
use varitab::vpcl::{Convention, PartitionSpec};
use varitab::{Model, ModelConfig};

#[derive(Parser, Debug)]
#[command(name = "varitab", version, about = "Transformer for tables with differing column sets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate related synthetic tables with known ground truth.
    Synth(SynthArgs),
    /// Split a table into incremental, transfer or zero-shot subsets.
    Split(SplitArgs),
    /// Supervised training from scratch, or continued from `--resume`.
    Train(TrainArgs),
    /// Contrastive pretraining on one or more tables.
    Pretrain(PretrainArgs),
    /// Replace the classifier of a checkpoint and train on a new table.
    Finetune(FinetuneArgs),
    /// Score a table; writes `row_index,score`.
    Predict(PredictArgs),
    /// AUROC of a checkpoint on a labelled table.
    Eval(EvalArgs),
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// CSV file.
    #[arg(long)]
    data: PathBuf,
    /// Schema manifest; defaults to the data path with a `.schema` extension.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long, default_value = "label")]
    label_column: String,
    /// The CSV has no header row (label, if any, follows the schema columns).
    #[arg(long)]
    no_header: bool,
}

#[derive(Args, Debug, Clone)]
struct SeedArg {
    #[arg(long, env = "VARITAB_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Clone)]
struct OptimArgs {
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 100)]
    max_epochs: usize,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 0.2)]
    eval_fraction: f64,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 128)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    /// `scale-then-norm` or `norm-then-scale`.
    #[arg(long, default_value = "scale-then-norm")]
    numeric_norm: NumericNorm,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// Rows per table, comma separated; two to five tables.
    #[arg(long, value_delimiter = ',', default_value = "1000,1000")]
    rows: Vec<usize>,
    #[arg(long, default_value_t = 6)]
    signal: usize,
    #[arg(long, default_value_t = 4)]
    noise: usize,
    #[arg(long, default_value_t = 5)]
    shared: usize,
    #[arg(long, default_value_t = 1.0)]
    strength: f64,
    #[arg(long, default_value_t = 10.0)]
    gain: f64,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ModeArg {
    Incremental,
    Transfer,
    Zeroshot,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Shared column fraction, transfer mode only.
    #[arg(long)]
    overlap: Option<f64>,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint, keeping its classifier.
    #[arg(long, conflicts_with_all = ["dim", "heads", "layers", "numeric_norm"])]
    resume: Option<PathBuf>,
    /// Training report CSV; defaults to `<out>.report.csv`.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum PretrainMode {
    #[value(name = "self")]
    SelfSupervised,
    Supervised,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ConventionArg {
    AsWritten,
    ExcludeSelf,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// One or more CSV files; each uses its own `.schema` manifest.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long, default_value = "label")]
    label_column: String,
    #[arg(long)]
    out: PathBuf,
    /// Start from an existing checkpoint instead of a fresh model.
    #[arg(long, conflicts_with_all = ["dim", "heads", "layers", "numeric_norm"])]
    resume: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "self")]
    mode: PretrainMode,
    #[arg(long, default_value_t = 2)]
    partitions: usize,
    #[arg(long, default_value_t = 0.0)]
    partition_overlap: f64,
    #[arg(long, value_enum, default_value = "as-written")]
    convention: ConventionArg,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    /// Prediction CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
}

fn schema_path(data: &Path, schema: Option<&PathBuf>) -> PathBuf {
    schema.cloned().unwrap_or_else(|| data.with_extension("schema"))
}

/// Loads a table with its manifest, maps codebooks and rescales numerical
/// columns to [0, 1] using the table's own range.
fn load_table(data: &Path, schema: Option<&PathBuf>, label_column: &str, has_header: bool) -> Result<TableDataset> {
    let schema_file = schema_path(data, schema);
    let columns = read_manifest(&schema_file)
        .with_context(|| format!("reading schema {}", schema_file.display()))?;
    let options = CsvOptions {
        has_header,
        label_column: Some(label_column.to_string()),
        require_labels: false,
    };
    let table = load_labeled_csv(data, &columns, &options).with_context(|| format!("loading {}", data.display()))?;
    let table = apply_codebook(&table);
    if table.is_empty() {
        bail!("{} has no rows", data.display());
    }
    Ok(fit_normalization(&table)?)
}

fn load_data(args: &DataArgs) -> Result<TableDataset> {
    load_table(&args.data, args.schema.as_ref(), &args.label_column, !args.no_header)
}

fn train_config(optim: &OptimArgs, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: optim.lr,
        batch_size: optim.batch_size,
        max_epochs: optim.max_epochs,
        patience: optim.patience,
        eval_fraction: optim.eval_fraction,
        seed,
        ..TrainConfig::default()
    }
}

fn class_count(table: &TableDataset) -> Result<usize> {
    let labels = table
        .labels
        .as_ref()
        .with_context(|| format!("table `{}` has no label column", table.name))?;
    Ok(labels.iter().max().map_or(2, |m| (m + 1).max(2)))
}

fn new_model(args: &ModelArgs, classes: usize, seed: u64) -> Result<Model> {
    Ok(Model::new(ModelConfig {
        dim: args.dim,
        heads: args.heads,
        layers: args.layers,
        classes,
        seed,
        numeric_norm: args.numeric_norm,
    })?)
}

fn report_path(out: &Path, report: Option<&PathBuf>) -> PathBuf {
    report.cloned().unwrap_or_else(|| {
        let mut name = out.as_os_str().to_owned();
        name.push(".report.csv");
        PathBuf::from(name)
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: &Path, mode: LoadMode) -> Result<Model> {
    load_checkpoint(path, mode).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn run_synth(args: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        seed: args.seed.seed,
        rows: args.rows,
        signal_columns: args.signal,
        noise_columns: args.noise,
        shared_columns: args.shared,
        signal_strength: args.strength,
        gain: args.gain,
    };
    let out = synth_tables(&spec)?;
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    for (table, bayes) in out.tables.iter().zip(&out.bayes) {
        let base = args.out_dir.join(&table.name);
        let mut csv = Vec::new();
        write_csv(table, &mut csv)?;
        write(&base.with_extension("csv"), csv)?;
        write(&base.with_extension("schema"), write_manifest(&table.schema))?;
        let mut scores = String::from("row_index,score\n");
        for (i, p) in bayes.iter().enumerate() {
            scores.push_str(&format!("{i},{p}\n"));
        }
        write(&base.with_extension("bayes.csv"), scores)?;
    }
    Ok(())
}

fn run_split(args: SplitArgs) -> Result<()> {
    let mode = match args.mode {
        ModeArg::Incremental => SplitMode::Incremental,
        ModeArg::Transfer => SplitMode::Transfer,
        ModeArg::Zeroshot => SplitMode::ZeroShot,
    };
    if args.overlap.is_some() && mode != SplitMode::Transfer {
        bail!("--overlap only applies to --mode transfer");
    }
    // Raw values are split, not normalized ones, so each subset can be
    // rescaled on its own later.
    let schema_file = schema_path(&args.data.data, args.data.schema.as_ref());
    let columns = read_manifest(&schema_file).with_context(|| format!("reading schema {}", schema_file.display()))?;
    let options = CsvOptions {
        has_header: !args.data.no_header,
        label_column: Some(args.data.label_column.clone()),
        require_labels: false,
    };
    let table = load_labeled_csv(&args.data.data, &columns, &options)
        .with_context(|| format!("loading {}", args.data.data.display()))?;
    let mut spec = SplitSpec::new(mode, args.seed.seed);
    if let Some(r) = args.overlap {
        spec.overlap_ratio = r;
    }
    let parts = split_columns(&table, &spec)?;
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let stem = args.data.data.file_stem().map_or("table".into(), |s| s.to_string_lossy().into_owned());
    for (i, part) in parts.iter().enumerate() {
        let base = args.out_dir.join(format!("{stem}_set{}", i + 1));
        let mut csv = Vec::new();
        write_csv(part, &mut csv)?;
        write(&base.with_extension("csv"), csv)?;
        write(&base.with_extension("schema"), write_manifest(&part.schema))?;
    }
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let table = load_data(&args.data)?;
    let classes = class_count(&table)?;
    let mut model = match &args.resume {
        Some(path) => load_model(path, LoadMode::Extend)?,
        None => new_model(&args.model, classes, args.seed.seed)?,
    };
    let report = train_supervised(&mut model, &table, &train_config(&args.optim, args.seed.seed))?;
    save_checkpoint(&model, &args.out).with_context(|| format!("saving {}", args.out.display()))?;
    write(&report_path(&args.out, args.report.as_ref()), report.to_csv())?;
    eprint!("{}", report.to_log());
    Ok(())
}

fn run_pretrain(args: PretrainArgs) -> Result<()> {
    let tables = args
        .data
        .iter()
        .map(|p| load_table(p, None, &args.label_column, true))
        .collect::<Result<Vec<_>>>()?;
    let mode = match args.mode {
        PretrainMode::SelfSupervised => VpclMode::SelfSupervised,
        PretrainMode::Supervised => VpclMode::Supervised,
    };
    let classes = if mode == VpclMode::Supervised {
        tables.iter().map(class_count).collect::<Result<Vec<_>>>()?.into_iter().max().unwrap_or(2)
    } else {
        2
    };
    let mut model = match &args.resume {
        Some(path) => load_model(path, LoadMode::Extend)?,
        None => new_model(&args.model, classes, args.seed.seed)?,
    };
    let config = TrainConfig {
        pretrain_epochs: args.epochs,
        vpcl: VpclConfig {
            partition: PartitionSpec {
                count: args.partitions,
                overlap_ratio: args.partition_overlap,
                seed: args.seed.seed,
            },
            mode,
            convention: match args.convention {
                ConventionArg::AsWritten => Convention::AsWritten,
                ConventionArg::ExcludeSelf => Convention::ExcludeSelf,
            },
        },
        ..train_config(&args.optim, args.seed.seed)
    };
    let report = pretrain_vpcl(&mut model, &tables, &config)?;
    save_checkpoint(&model, &args.out).with_context(|| format!("saving {}", args.out.display()))?;
    write(&report_path(&args.out, args.report.as_ref()), report.to_csv())?;
    Ok(())
}

fn run_finetune(args: FinetuneArgs) -> Result<()> {
    let table = load_data(&args.data)?;
    let mut model = load_model(&args.model, LoadMode::Extend)?;
    let report = finetune(&mut model, &table, &train_config(&args.optim, args.seed.seed))?;
    save_checkpoint(&model, &args.out).with_context(|| format!("saving {}", args.out.display()))?;
    write(&report_path(&args.out, args.report.as_ref()), report.to_csv())?;
    eprint!("{}", report.to_log());
    Ok(())
}

fn run_predict(args: PredictArgs) -> Result<()> {
    let table = load_data(&args.data)?;
    let model = load_model(&args.model, LoadMode::Exact)?;
    let probs = predict_proba(&model, &table)?;
    let mut out = String::new();
    if model.config.classes == 2 {
        out.push_str("row_index,score\n");
        for (i, p) in probs.iter().enumerate() {
            out.push_str(&format!("{i},{}\n", p[1]));
        }
    } else {
        // Multiclass: the top class and its probability.
        out.push_str("row_index,score,class\n");
        for (i, p) in probs.iter().enumerate() {
            let (class, score) = p
                .iter()
                .copied()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .expect("at least two classes");
            out.push_str(&format!("{i},{score},{class}\n"));
        }
    }
    match &args.out {
        Some(path) => write(path, out),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let table = load_data(&args.data)?;
    if table.labels.is_none() {
        bail!("{} has no `{}` column to evaluate against", args.data.data.display(), args.data.label_column);
    }
    let model = load_model(&args.model, LoadMode::Exact)?;
    let auroc = evaluate(&model, &table)?;
    println!("auroc,{auroc}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Split(a) => run_split(a),
        Command::Train(a) => run_train(a),
        Command::Pretrain(a) => run_pretrain(a),
        Command::Finetune(a) => run_finetune(a),
        Command::Predict(a) => run_predict(a),
        Command::Eval(a) => run_eval(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = format!("{e:#}").replace('\n', " ");
            eprintln!("varitab: {line}");
            ExitCode::FAILURE
        }
    }
}
