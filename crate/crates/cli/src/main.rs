//! `gsan`: train, evaluate, analyze, benchmark and inspect multiplication-free
//! convolutional networks.
//!
//! Exit codes: 0 success, 2 configuration/validation error, 3 I/O or data
//! format error, 1 unexpected runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gsan_core::analysis::{analyze_model, module_ratios, CostReport};
use gsan_core::checkpoint::load_checkpoint;
use gsan_core::config::parse_network_config;
use gsan_core::data::{load_cifar10, load_mnist, DatasetHandle};
use gsan_core::error::Error;
use gsan_core::ghost::{build_network, Model};
use gsan_core::train::{evaluate_limited, train, LrSchedule, TrainConfig};

#[derive(Parser)]
#[command(
    name = "gsan",
    about = "Multiplication-free CNN toolkit: shift and adder convolutions, ghost modules, cost analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network described by a config file
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(EvalArgs),
    /// Static FLOP/parameter/memory analysis of a config or checkpoint
    Analyze(AnalyzeArgs),
    /// Kernel latency microbenchmarks (multiply vs shift vs adder)
    Bench(BenchArgs),
    /// Dump a checkpoint's spec, tensor census and multiplication audit
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetKind {
    Mnist,
    Cifar10,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormat {
    Tsv,
    Kv,
}

#[derive(Args)]
struct TrainArgs {
    /// Network config file
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    dataset: DatasetKind,
    /// Dataset directory (falls back to $GSAN_DATA_DIR)
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Metrics log output path (tab-separated: epoch, train_loss, test_top1)
    #[arg(long, default_value = "metrics.tsv")]
    out: PathBuf,
    /// Checkpoint output path (best test accuracy wins)
    #[arg(long, default_value = "model.gsan")]
    checkpoint: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    momentum: Option<f32>,
    #[arg(long)]
    weight_decay: Option<f32>,
    /// Cap the number of training samples per epoch
    #[arg(long)]
    limit: Option<usize>,
    /// Disable the per-layer normalized step on adder weights
    #[arg(long)]
    no_adder_scaling: bool,
    /// Disable crop/flip augmentation (on by default for cifar10)
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum)]
    dataset: DatasetKind,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Network config file (exactly one of --config / --checkpoint)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Override the partition ratio for every stage
    #[arg(long)]
    gamma: Option<usize>,
    #[arg(long, value_enum, default_value = "tsv")]
    format: OutputFormat,
    /// Input spatial size the analysis propagates shapes from
    #[arg(long, default_value_t = 32)]
    input_size: usize,
    /// Also write the report to this path
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    /// Suite config file; the built-in depthwise/pointwise pair otherwise
    #[arg(long)]
    suite: Option<PathBuf>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    warmups: Option<usize>,
    /// Persist the TSV report to this path
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "tsv")]
    format: OutputFormat,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::Parse { .. }
        | Error::Validation(_)
        | Error::Geometry(_)
        | Error::Bench(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::Dimension { .. } => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Inspect(args) => cmd_inspect(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn resolve_data_dir(arg: Option<PathBuf>, dataset: DatasetKind) -> Result<PathBuf, Error> {
    let base = match arg {
        Some(dir) => dir,
        None => match std::env::var_os("GSAN_DATA_DIR") {
            Some(dir) => PathBuf::from(dir),
            None => {
                return Err(Error::Config(
                    "no dataset directory: pass --data-dir or set GSAN_DATA_DIR".into(),
                ))
            }
        },
    };
    // accept either the dataset directory itself or a parent containing a
    // conventional subdirectory
    let sub = base.join(match dataset {
        DatasetKind::Mnist => "mnist",
        DatasetKind::Cifar10 => "cifar10",
    });
    Ok(if sub.is_dir() { sub } else { base })
}

fn load_dataset(dataset: DatasetKind, dir: &Path) -> Result<(DatasetHandle, DatasetHandle), Error> {
    match dataset {
        DatasetKind::Mnist => load_mnist(dir),
        DatasetKind::Cifar10 => load_cifar10(dir),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let config_text = fs::read_to_string(&args.config).map_err(|e| Error::io(&args.config, e))?;
    let spec = parse_network_config(&config_text)?;
    let dir = resolve_data_dir(args.data_dir.clone(), args.dataset)?;
    let (train_set, test_set) = load_dataset(args.dataset, &dir)?;

    let mut config = match args.dataset {
        DatasetKind::Mnist => TrainConfig::mnist_toy(args.seed),
        DatasetKind::Cifar10 => TrainConfig::cifar_default(args.seed),
    };
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.lr {
        config.base_lr = v;
    }
    if let Some(v) = args.momentum {
        config.momentum = v;
    }
    if let Some(v) = args.weight_decay {
        config.weight_decay = v;
    }
    config.limit_train = args.limit;
    if args.no_adder_scaling {
        config.adder_lr_scaling = false;
    }
    if args.no_augment {
        config.augment = false;
    }
    config.schedule = LrSchedule::Cosine;

    let mut model = build_network(&spec, args.seed)?;
    let census = model.census();
    println!(
        "built network: {} trainable params, {} shift banks, {} adder banks, dense conv banks: {}",
        census.trainable_params,
        census.shift_conv_banks,
        census.adder_banks,
        census.dense_conv_banks
    );

    let mut log_lines = Vec::with_capacity(config.epochs);
    let outcome = train(
        &mut model,
        &train_set,
        &test_set,
        &config,
        Some(args.checkpoint.as_path()),
        |m| {
            println!("{}", m.console_line());
            log_lines.push(m.log_line());
        },
    )?;
    let mut text = log_lines.join("\n");
    text.push('\n');
    write_text(&args.out, &text)?;
    println!(
        "best top1 {:.2}% at epoch {}; metrics -> {}, checkpoint -> {}",
        outcome.best_top1,
        outcome.best_epoch,
        args.out.display(),
        args.checkpoint.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let model = load_checkpoint(&args.checkpoint)?;
    let dir = resolve_data_dir(args.data_dir.clone(), args.dataset)?;
    let (_, test_set) = load_dataset(args.dataset, &dir)?;
    let top1 = evaluate_limited(&model, &test_set, args.batch_size, args.limit)?;
    println!("top1\t{top1:.2}");
    Ok(())
}

fn analyze_report(model: &Model, input_size: usize) -> Result<(CostReport, String), Error> {
    let report = analyze_model(model, input_size, input_size)?;
    let ratio_rows = module_ratios(model);
    let mut tsv = String::new();
    tsv.push_str(
        "layer\tkind\tc_in\tc_out\tk\th_out\tw_out\tflops\tparams\tparam_bits\tmem_accesses\n",
    );
    for l in &report.layers {
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.2}\t{}\n",
            l.name,
            l.kind,
            l.in_channels,
            l.out_channels,
            l.kernel,
            l.h_out,
            l.w_out,
            l.flops,
            l.params,
            l.param_bits,
            l.mem_accesses
        ));
    }
    tsv.push_str("\nmodule\tr_s\tr_c\tr_m\tk2gamma\n");
    for (name, r) in &ratio_rows {
        tsv.push_str(&format!(
            "{name}\t{:.4}\t{:.4}\t{:.4}\t{:.1}\n",
            r.r_s, r.r_c, r.r_m, r.k2gamma
        ));
    }
    tsv.push_str(&format!(
        "\ntotal\tflops={}\tparams={}\tparam_bits={:.2}\tmem_accesses={}\n",
        report.total_flops(),
        report.total_params(),
        report.total_param_bits(),
        report.total_mem_accesses()
    ));
    Ok((report, tsv))
}

fn analyze_kv(model: &Model, input_size: usize) -> Result<String, Error> {
    let report = analyze_model(model, input_size, input_size)?;
    let mut out = String::new();
    for l in &report.layers {
        out.push_str(&format!("layer.{}.kind={}\n", l.name, l.kind));
        out.push_str(&format!("layer.{}.flops={}\n", l.name, l.flops));
        out.push_str(&format!("layer.{}.params={}\n", l.name, l.params));
        out.push_str(&format!(
            "layer.{}.param_bits={:.2}\n",
            l.name, l.param_bits
        ));
        out.push_str(&format!(
            "layer.{}.mem_accesses={}\n",
            l.name, l.mem_accesses
        ));
    }
    for (name, r) in module_ratios(model) {
        out.push_str(&format!("ratio.{name}.r_s={:.4}\n", r.r_s));
        out.push_str(&format!("ratio.{name}.r_c={:.4}\n", r.r_c));
        out.push_str(&format!("ratio.{name}.r_m={:.4}\n", r.r_m));
        out.push_str(&format!("ratio.{name}.k2gamma={:.1}\n", r.k2gamma));
    }
    out.push_str(&format!("total.flops={}\n", report.total_flops()));
    out.push_str(&format!("total.params={}\n", report.total_params()));
    out.push_str(&format!(
        "total.param_bits={:.2}\n",
        report.total_param_bits()
    ));
    out.push_str(&format!(
        "total.mem_accesses={}\n",
        report.total_mem_accesses()
    ));
    Ok(out)
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), Error> {
    let mut spec = match (&args.config, &args.checkpoint) {
        (Some(path), None) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_network_config(&text)?
        }
        (None, Some(path)) => load_checkpoint(path)?.spec,
        _ => {
            return Err(Error::Config(
                "pass exactly one of --config or --checkpoint".into(),
            ))
        }
    };
    if let Some(gamma) = args.gamma {
        if gamma < 2 {
            return Err(Error::Config(format!("--gamma must be >= 2, got {gamma}")));
        }
        spec.gamma_default = gamma;
        for stage in &mut spec.stages {
            stage.gamma = None;
        }
    }
    // analysis is structural; parameter values are irrelevant here
    let model = build_network(&spec, args.seed)?;
    let text = match args.format {
        OutputFormat::Tsv => analyze_report(&model, args.input_size)?.1,
        OutputFormat::Kv => analyze_kv(&model, args.input_size)?,
    };
    print!("{text}");
    if let Some(path) = &args.out {
        write_text(path, &text)?;
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<(), Error> {
    let mut suite = match &args.suite {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            gsan_bench::parse_suite(&text)?
        }
        None => gsan_bench::default_suite(),
    };
    if let Some(r) = args.repeats {
        suite.repeats = r;
    }
    if let Some(w) = args.warmups {
        suite.warmups = w;
    }
    let records = gsan_bench::bench_suite(&suite)?;
    let text = gsan_bench::records_tsv(&records);
    print!("{text}");
    if let Some(path) = &args.report {
        write_text(path, &text)?;
    }
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<(), Error> {
    let model = load_checkpoint(&args.checkpoint)?;
    let census = model.census();
    match args.format {
        OutputFormat::Tsv => {
            println!("checkpoint: {}", args.checkpoint.display());
            println!("--- embedded network spec ---");
            print!("{}", gsan_core::config::emit_network_config(&model.spec));
            println!("--- structural audit ---");
            println!(
                "dense multiplying conv filters: {}",
                census.dense_conv_banks
            );
            println!("shift conv banks: {}", census.shift_conv_banks);
            println!("adder banks: {}", census.adder_banks);
            println!("linear heads (dense, exempt): {}", census.linear_heads);
            println!("--- parameter census ---");
            println!("shift weights: {}", census.shift_weights);
            println!("adder weights: {}", census.adder_weights);
            println!("linear weights: {}", census.linear_weights);
            println!("biases: {}", census.bias_params);
            println!("bn affine: {}", census.bn_affine_params);
            println!("bn running stats: {}", census.bn_running_stats);
            println!("trainable params: {}", census.trainable_params);
            println!("total params: {}", census.total_params);
            println!("--- tensors ---");
            for e in model.store.entries() {
                println!("{}\t{}\t{:?}\t{}", e.name, e.kind.tag(), e.shape, e.len());
            }
        }
        OutputFormat::Kv => {
            println!("audit.dense_conv_banks={}", census.dense_conv_banks);
            println!("audit.shift_conv_banks={}", census.shift_conv_banks);
            println!("audit.adder_banks={}", census.adder_banks);
            println!("audit.linear_heads={}", census.linear_heads);
            println!("census.shift_weights={}", census.shift_weights);
            println!("census.adder_weights={}", census.adder_weights);
            println!("census.linear_weights={}", census.linear_weights);
            println!("census.bias_params={}", census.bias_params);
            println!("census.bn_affine_params={}", census.bn_affine_params);
            println!("census.bn_running_stats={}", census.bn_running_stats);
            println!("census.trainable_params={}", census.trainable_params);
            println!("census.total_params={}", census.total_params);
        }
    }
    Ok(())
}
