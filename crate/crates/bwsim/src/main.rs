use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use bwsim::config::SimConfig;
use bwsim::encoder::run_model;
use bwsim::report::{CompareReport, RunReport, SweepReport, SweepRow};
use bwsim::verify::{run_verification, VerifyOptions};
use bwsim::SimError;

#[derive(Parser)]
#[command(
    name = "bwsim",
    version,
    about = "Layout-aware transformer inference simulator: block-wise vs row-wise matrix storage on tiled accelerators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the encoder under one layout and report per-component cycles.
    Run(RunArgs),
    /// Run both layouts on the same machine and report the comparison.
    Compare(CompareArgs),
    /// Run both layouts across kernel sizes, accelerator kinds and core
    /// counts; flags for those axes pin them to a single value.
    Sweep(SweepArgs),
    /// Check the simulator against built-in independent oracles.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LayoutArg {
    Rwma,
    Bwma,
}

impl LayoutArg {
    fn name(self) -> &'static str {
        match self {
            LayoutArg::Rwma => "rwma",
            LayoutArg::Bwma => "bwma",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AccelArg {
    Sa,
    Simd,
}

impl AccelArg {
    fn name(self) -> &'static str {
        match self {
            AccelArg::Sa => "sa",
            AccelArg::Simd => "simd",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Json,
    Csv,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML configuration file; explicit flags override its values.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Small test model (64x96, 4 heads of 24, FF 384, 1 layer, kernel 8).
    #[arg(long)]
    toy: bool,

    /// Accelerator kind.
    #[arg(long, value_enum)]
    accel: Option<AccelArg>,

    /// Accelerator kernel size K (tiles are K x K).
    #[arg(long)]
    kernel_size: Option<usize>,

    /// Cores sharing the L2 (1, 2 or 4).
    #[arg(long)]
    cores: Option<usize>,

    #[arg(long)]
    seq_len: Option<usize>,

    #[arg(long)]
    model_dim: Option<usize>,

    #[arg(long)]
    heads: Option<usize>,

    #[arg(long)]
    head_dim: Option<usize>,

    #[arg(long)]
    ff_dim: Option<usize>,

    #[arg(long)]
    layers: Option<usize>,

    #[arg(long)]
    l1_kb: Option<usize>,

    #[arg(long)]
    l2_kb: Option<usize>,

    #[arg(long)]
    line_bytes: Option<usize>,

    #[arg(long)]
    l1_assoc: Option<usize>,

    #[arg(long)]
    l2_assoc: Option<usize>,

    #[arg(long)]
    mem_latency: Option<u64>,

    /// Tagged next-line prefetcher at L1.
    #[arg(long, value_enum)]
    prefetch: Option<Switch>,

    /// Activation fused into FF1 (gelu or relu).
    #[arg(long)]
    activation: Option<String>,

    #[arg(long)]
    seed: Option<u64>,

    /// Skip the numeric math; traces and timings do not depend on values.
    #[arg(long)]
    timing_only: bool,

    /// Generate per-core work concurrently on the host (results identical).
    #[arg(long, value_enum)]
    parallel: Option<Switch>,

    /// Write the report here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Args)]
struct RunArgs {
    /// Matrix storage layout.
    #[arg(long, value_enum)]
    layout: Option<LayoutArg>,

    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct VerifyArgs {
    /// Corrupt one probed address to demonstrate failure detection.
    #[arg(long, hide = true)]
    inject_offset_fault: bool,
}

fn build_config(common: &CommonArgs) -> Result<SimConfig, SimError> {
    let mut cfg = match &common.config {
        Some(path) => SimConfig::from_file(path)?,
        None => SimConfig::default(),
    };
    if common.toy {
        cfg.apply_toy();
    }
    macro_rules! override_field {
        ($($field:ident),* $(,)?) => {
            $(if let Some(v) = common.$field {
                cfg.$field = v;
            })*
        };
    }
    override_field!(
        kernel_size,
        cores,
        seq_len,
        model_dim,
        heads,
        ff_dim,
        layers,
        l1_kb,
        l2_kb,
        line_bytes,
        l1_assoc,
        l2_assoc,
        mem_latency,
        seed,
    );
    if let Some(hd) = common.head_dim {
        cfg.head_dim = Some(hd);
    }
    if let Some(a) = common.accel {
        cfg.accel = a.name().into();
    }
    if let Some(p) = common.prefetch {
        cfg.prefetch = p == Switch::On;
    }
    if let Some(act) = &common.activation {
        cfg.activation = act.clone();
    }
    if let Some(p) = common.parallel {
        cfg.parallel = p == Switch::On;
    }
    if common.timing_only {
        cfg.compute_values = false;
    }
    Ok(cfg)
}

fn emit(text: &str, out: &Option<PathBuf>) -> Result<(), SimError> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run_report_for(cfg: &SimConfig) -> Result<RunReport, SimError> {
    let params = cfg.to_params()?;
    let result = run_model(&params)?;
    Ok(RunReport::build(&params, &result))
}

fn cmd_run(args: &RunArgs) -> Result<(), SimError> {
    let mut cfg = build_config(&args.common)?;
    if let Some(layout) = args.layout {
        cfg.layout = layout.name().into();
    }
    let report = run_report_for(&cfg)?;
    let text = match args.common.format {
        Format::Json => report.to_json(),
        Format::Csv => report.to_csv()?,
        Format::Table => report.to_table(),
    };
    emit(&text, &args.common.out)
}

fn cmd_compare(args: &CompareArgs) -> Result<(), SimError> {
    let base = build_config(&args.common)?;
    let mut cfg = base.clone();
    cfg.layout = "rwma".into();
    let rwma = run_report_for(&cfg)?;
    cfg.layout = "bwma".into();
    let bwma = run_report_for(&cfg)?;
    let report = CompareReport::build(rwma, bwma);
    let text = match args.common.format {
        Format::Json => report.to_json(),
        Format::Csv => report.to_csv()?,
        Format::Table => report.to_table(),
    };
    emit(&text, &args.common.out)
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), SimError> {
    let base = build_config(&args.common)?;
    let kernel_sizes = match args.common.kernel_size {
        Some(k) => vec![k],
        None => vec![8, 16],
    };
    let accels = match args.common.accel {
        Some(a) => vec![a.name()],
        None => vec!["sa", "simd"],
    };
    let core_counts = match args.common.cores {
        Some(c) => vec![c],
        None => vec![1, 2, 4],
    };
    let mut rows = Vec::new();
    for &k in &kernel_sizes {
        for accel in &accels {
            for &cores in &core_counts {
                let mut cfg = base.clone();
                cfg.kernel_size = k;
                cfg.accel = (*accel).into();
                cfg.cores = cores;
                cfg.layout = "rwma".into();
                let rwma = match run_report_for(&cfg) {
                    Ok(r) => r,
                    Err(e) => {
                        eprintln!("skipping k={k} accel={accel} cores={cores}: {e}");
                        continue;
                    }
                };
                cfg.layout = "bwma".into();
                let bwma = run_report_for(&cfg)?;
                let speedup = if bwma.total_cycles == 0 {
                    0.0
                } else {
                    rwma.total_cycles as f64 / bwma.total_cycles as f64
                };
                rows.push(SweepRow {
                    kernel_size: k,
                    accelerator: accel.to_string(),
                    cores,
                    rwma_cycles: rwma.total_cycles,
                    bwma_cycles: bwma.total_cycles,
                    speedup,
                    rwma_l1_miss_rate: rwma.l1.miss_rate,
                    bwma_l1_miss_rate: bwma.l1.miss_rate,
                });
            }
        }
    }
    let report = SweepReport { rows };
    let text = match args.common.format {
        Format::Json => report.to_json(),
        Format::Csv => report.to_csv()?,
        Format::Table => report.to_table(),
    };
    emit(&text, &args.common.out)
}

fn cmd_verify(args: &VerifyArgs) -> Result<bool, SimError> {
    let report = run_verification(&VerifyOptions {
        inject_offset_fault: args.inject_offset_fault,
    });
    for line in &report.lines {
        println!("{line}");
    }
    println!("{} passed, {} failed", report.passed, report.failed);
    Ok(report.all_passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(args) => cmd_run(args).map(|()| true),
        Command::Compare(args) => cmd_compare(args).map(|()| true),
        Command::Sweep(args) => cmd_sweep(args).map(|()| true),
        Command::Verify(args) => cmd_verify(args),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
