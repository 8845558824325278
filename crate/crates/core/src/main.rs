use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use flexipath::adaptation::{FitConfig, HeadKind, QueryKind};
use flexipath::backbone::EncoderConfig;
use flexipath::checkpoint::load_teacher_backbone;
use flexipath::config::PretrainConfig;
use flexipath::data::synthetic_spec;
use flexipath::eval::{
    self, BenchConfig, BenchTask, CellDatasetSpec, DataRef, MilMode, MilRun, ProbeRun, SuiteConfig, TaskResult, TileDatasetSpec,
};
use flexipath::pretrain::{run_pretrain, RunOptions};
use flexipath::pyramid::{build_synthetic_pyramid, TextureClass};
use flexipath::{Error, Result};

#[derive(Parser)]
#[command(name = "flexipath", version, about = "Flexible-patch ViT pre-training and evaluation on image pyramids")]
struct Cli {
    /// Root seed; every subcommand derives its randomness from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic pyramids, or a labelled tile shard with --tiles.
    SynthData(SynthArgs),
    /// Self-supervised pre-training.
    Pretrain(PretrainArgs),
    /// Fit a probe on frozen teacher features.
    Probe(ProbeArgs),
    /// Fit an additive MIL head over tile bags.
    Mil(MilArgs),
    /// Inference throughput in tiles per second.
    Bench(BenchArgs),
    /// Full benchmark suite over a checkpoint.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 512)]
    base_size: usize,
    #[arg(long, value_delimiter = ',', default_value = "stripes,dots,checkerboard")]
    classes: Vec<TextureClass>,
    /// Write a labelled tile shard with this many tiles per pyramid instead
    /// of the pyramids themselves.
    #[arg(long)]
    tiles: Option<usize>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "print_config")]
    out: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long)]
    print_config: bool,
    /// Log every weighted loss term per step to loss_parts.csv.
    #[arg(long)]
    dump_loss_parts: bool,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Labelled tile shard; a synthetic set is generated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Synthetic pyramids per class-balanced tile set.
    #[arg(long, default_value_t = 40)]
    pyramids: usize,
    #[arg(long, default_value_t = 4)]
    tiles_per_pyramid: usize,
    #[arg(long, value_delimiter = ',', default_value = "stripes,dots")]
    classes: Vec<TextureClass>,
}

impl DataArgs {
    fn to_ref(&self, seed: u64) -> DataRef {
        match &self.data {
            Some(d) => DataRef::Shard(d.clone()),
            None => DataRef::Tiles(TileDatasetSpec {
                seed,
                num_pyramids: self.pyramids,
                tiles_per_pyramid: self.tiles_per_pyramid,
                classes: self.classes.clone(),
                ..TileDatasetSpec::default()
            }),
        }
    }
}

#[derive(Args, Clone)]
struct FitArgs {
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.5)]
    train_frac: f64,
    #[arg(long, default_value_t = 1000)]
    n_bootstrap: usize,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

impl FitArgs {
    fn fit(&self, seed: u64) -> FitConfig {
        FitConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed,
            ..FitConfig::default()
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Linear,
    Attentive,
    CenterCell,
}

#[derive(Clone, Copy, ValueEnum)]
enum QueryArg {
    Learned,
    Cls,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "linear")]
    head: HeadArg,
    #[arg(long, value_enum, default_value = "learned")]
    query: QueryArg,
    #[arg(long, default_value_t = 16)]
    patch: usize,
    /// Use the synthetic center-cell crops (96 px) instead of tissue tiles.
    #[arg(long)]
    cells: bool,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Frozen,
    Finetune,
}

#[derive(Args)]
struct MilArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "frozen")]
    mode: ModeArg,
    #[arg(long, default_value_t = 16)]
    patch: usize,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum TaskArg {
    Tile,
    Mil,
    Both,
}

#[derive(Args)]
struct BenchArgs {
    /// Benchmark the teacher of this checkpoint; otherwise a randomly
    /// initialized `--encoder` preset.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Encoder presets (desk, vit_s, vit_b), comma separated.
    #[arg(long, value_delimiter = ',', default_value = "desk")]
    encoder: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
    patch: Vec<usize>,
    #[arg(long, value_enum, default_value = "both")]
    task: TaskArg,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 3)]
    repetitions: usize,
    /// Minimum measured seconds across all repetitions.
    #[arg(long, default_value_t = 0.0)]
    duration: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n_bootstrap: usize,
    #[arg(long, default_value_t = 40)]
    pyramids: usize,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long)]
    no_bench: bool,
    #[arg(long, default_value_t = 8)]
    bench_batch_size: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.cmd {
        Command::SynthData(a) => synth_data(a, seed.unwrap_or(0)),
        Command::Pretrain(a) => pretrain(a, seed),
        Command::Probe(a) => probe(a, seed.unwrap_or(0)),
        Command::Mil(a) => mil(a, seed.unwrap_or(0)),
        Command::Bench(a) => bench(a, seed.unwrap_or(0)),
        Command::Report(a) => report(a, seed.unwrap_or(0)),
    }
}

fn synth_data(a: SynthArgs, seed: u64) -> Result<()> {
    if a.classes.is_empty() {
        return Err(Error::InvalidArgument("--classes is empty".into()));
    }
    fs::create_dir_all(&a.out)?;
    if let Some(tiles) = a.tiles {
        let ds = eval::synthetic_tile_dataset(&TileDatasetSpec {
            seed,
            num_pyramids: a.count,
            tiles_per_pyramid: tiles,
            classes: a.classes,
            base_size: a.base_size,
            ..TileDatasetSpec::default()
        })?;
        ds.write_shard(&a.out)?;
        println!("wrote {} tiles to {}", ds.tiles.len(), a.out.display());
        return Ok(());
    }
    for i in 0..a.count {
        let (s, class) = synthetic_spec(seed, &a.classes, i);
        build_synthetic_pyramid(s, a.base_size, class)?.save(&a.out.join(format!("pyramid_{i:05}")))?;
    }
    println!("wrote {} pyramids to {}", a.count, a.out.display());
    Ok(())
}

fn pretrain(a: PretrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => PretrainConfig::load(p)?,
        None => PretrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if a.print_config {
        print!("{}", cfg.to_toml_string()?);
        return Ok(());
    }
    let out = a.out.expect("clap requires --out");
    let summary = run_pretrain(
        cfg,
        &RunOptions {
            out,
            resume: a.resume,
            dump_loss_parts: a.dump_loss_parts,
            max_steps: a.max_steps,
            quiet: a.quiet,
        },
    )?;
    println!("{} steps; checkpoint {} ({})", summary.steps, summary.checkpoint.display(), summary.digest);
    Ok(())
}

fn write_task_reports(out: &Path, tasks: &[TaskResult]) -> Result<()> {
    fs::create_dir_all(out)?;
    eval::write_metrics_csv(&out.join(eval::METRICS_CSV), tasks)?;
    let summary = eval::summary_text(tasks, &[]);
    fs::write(out.join(eval::SUMMARY_TXT), &summary)?;
    print!("{summary}");
    Ok(())
}

fn probe(a: ProbeArgs, seed: u64) -> Result<()> {
    let head = match a.head {
        HeadArg::Linear => HeadKind::Linear,
        HeadArg::Attentive => HeadKind::Attentive,
        HeadArg::CenterCell => HeadKind::CenterCell,
    };
    let data = if a.cells {
        DataRef::Cells(CellDatasetSpec {
            seed,
            ..CellDatasetSpec::default()
        })
    } else {
        a.data.to_ref(seed)
    };
    let run = ProbeRun {
        checkpoint: a.checkpoint,
        data,
        head,
        query: match a.query {
            QueryArg::Learned => QueryKind::Learned,
            QueryArg::Cls => QueryKind::Cls,
        },
        patch: a.patch,
        train_frac: a.fit.train_frac,
        fit: a.fit.fit(seed),
        cache_dir: a.fit.cache_dir.clone(),
        n_bootstrap: a.fit.n_bootstrap,
        seed,
        workers: a.fit.workers,
    };
    write_task_reports(&a.out, &[eval::run_probe(&run)?])
}

fn mil(a: MilArgs, seed: u64) -> Result<()> {
    let run = MilRun {
        checkpoint: a.checkpoint,
        data: a.data.to_ref(seed),
        mode: match a.mode {
            ModeArg::Frozen => MilMode::Frozen,
            ModeArg::Finetune => MilMode::Finetune,
        },
        patch: a.patch,
        train_frac: a.fit.train_frac,
        fit: a.fit.fit(seed),
        cache_dir: a.fit.cache_dir.clone(),
        contributions_dir: Some(a.out.join("contributions")),
        n_bootstrap: a.fit.n_bootstrap,
        seed,
        workers: a.fit.workers,
    };
    write_task_reports(&a.out, &[eval::run_mil(&run)?])
}

fn bench(a: BenchArgs, seed: u64) -> Result<()> {
    let cfg = BenchConfig {
        batch_size: a.batch_size,
        repetitions: a.repetitions,
        duration: a.duration,
        seed,
    };
    let tasks: &[BenchTask] = match a.task {
        TaskArg::Tile => &[BenchTask::Tile],
        TaskArg::Mil => &[BenchTask::Mil],
        TaskArg::Both => &[BenchTask::Tile, BenchTask::Mil],
    };
    let mut reports = Vec::new();
    let backbones = match &a.checkpoint {
        Some(p) => {
            let b = load_teacher_backbone(p)?;
            vec![(b.cfg, Some(b.params))]
        }
        None => a
            .encoder
            .iter()
            .map(|n| EncoderConfig::by_name(n).map(|c| (c, None)))
            .collect::<Result<_>>()?,
    };
    for (enc, params) in &backbones {
        for &p in &a.patch {
            for &t in tasks {
                let r = eval::throughput_bench(enc, params.as_ref(), t, p, &cfg)?;
                eprintln!("{}", r.csv_line());
                reports.push(r);
            }
        }
    }
    fs::create_dir_all(&a.out)?;
    eval::write_throughput_csv(&a.out.join(eval::THROUGHPUT_CSV), &reports)?;
    let summary = eval::summary_text(&[], &reports);
    fs::write(a.out.join(eval::SUMMARY_TXT), &summary)?;
    print!("{summary}");
    Ok(())
}

fn report(a: ReportArgs, seed: u64) -> Result<()> {
    let mut cfg = SuiteConfig::new(a.checkpoint, a.out, seed);
    cfg.n_bootstrap = a.n_bootstrap;
    cfg.tissue.num_pyramids = a.pyramids;
    cfg.fit.epochs = a.epochs;
    cfg.workers = a.workers;
    cfg.bench = if a.no_bench {
        None
    } else {
        cfg.bench.map(|b| BenchConfig {
            batch_size: a.bench_batch_size,
            ..b
        })
    };
    let r = eval::run_benchmark_suite(&cfg)?;
    print!("{}", eval::summary_text(&r.tasks, &r.throughput));
    Ok(())
}
