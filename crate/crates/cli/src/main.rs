//! `ptq`: calibrate, quantize, evaluate and report on the synthetic benchmark.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ptq_core::accounting::{compression_table, render_table, LayerShape};
use ptq_core::artifact::{write_atomic, write_json};
use ptq_core::config::RunConfig;
use ptq_core::harness::{
    eval_model_error, instance, render_summary, summarize, ArmResult, Axis, ErrorMetrics, SeedContext,
};
use ptq_core::model::{LayerStack, QuantModel};
use ptq_core::volts::{
    build_with_report, calibrate_model, uniform_report, CalibConfig, Scheme,
};
use ptq_core::Error;

#[derive(Parser)]
#[command(name = "ptq", version, about = "Post-training quantization of synthetic linear-layer stacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// Run configuration (TOML); built-in defaults if omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding `out_dir` of the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write into an existing, non-empty output directory.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    bits_w: Option<u32>,
    #[arg(long)]
    bits_a: Option<u32>,
    #[arg(long)]
    rank: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Statistics pass, sensitivity classes and a budgeted build.
    Calibrate {
        #[command(flatten)]
        common: Common,
    },
    /// Build without a statistics pass, one budget for every layer.
    Quantize {
        #[command(flatten)]
        common: Common,
        /// uniform-frozen, uniform-light or uniform-full.
        #[arg(long, default_value = "uniform-frozen")]
        scheme: String,
    },
    /// Error of a quantized model archive against its full-precision model.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory written by `calibrate` or `quantize` (its `model` subdirectory).
        #[arg(long)]
        model: PathBuf,
    },
    /// Effective parameter and operation counts.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Compare the arms of one ablation axis over the benchmark seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// activation-scaling, qao or sensitivity-scheme.
        #[arg(long)]
        axis: String,
    },
    /// Print the default configuration.
    DumpDefaults {
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Format(_) | Error::Io(_) | Error::Json(_) => Failure::Usage(e.to_string()),
            Error::Dimension(_) | Error::NonFinite { .. } | Error::Calibration(_) | Error::Numeric { .. } => {
                Failure::Numeric(e.to_string())
            }
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Calibrate { common } => calibrate(&common),
        Command::Quantize { common, scheme } => quantize(&common, &scheme),
        Command::Eval { common, model } => eval(&common, &model),
        Command::Report { common } => report(&common),
        Command::Ablate { common, axis } => ablate(&common, &axis),
        Command::DumpDefaults { out, force } => dump_defaults(out.as_deref(), force),
    }
}

/// The config file (or defaults) with command-line overrides applied.
fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(b) = common.bits_w {
        cfg.layer.bits_w = b;
    }
    if let Some(b) = common.bits_a {
        cfg.layer.bits_a = b;
    }
    if let Some(r) = common.rank {
        cfg.layer.rank = r;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates the output directory, refusing a non-empty one without `--force`.
fn prepare_out(cfg: &RunConfig, force: bool) -> CliResult<PathBuf> {
    let dir = PathBuf::from(&cfg.out_dir);
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Failure::Usage(format!("{} exists and is not a directory", dir.display())));
        }
        let occupied = fs::read_dir(&dir).map_err(Error::from)?.next().is_some();
        if occupied && !force {
            return Err(Failure::Usage(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(&dir).map_err(Error::from)?;
    Ok(dir)
}

fn write_text(path: impl AsRef<Path>, text: &str) -> CliResult<()> {
    Ok(write_atomic(path, text.as_bytes())?)
}

fn json_line(value: &impl serde::Serialize) -> CliResult<String> {
    let mut line = serde_json::to_string(value).map_err(Error::from)?;
    line.push('\n');
    Ok(line)
}

/// Writes the model and the effective config next to it.
fn save_model(dir: &Path, cfg: &RunConfig, q: &QuantModel) -> CliResult<()> {
    q.save(dir.join("model"))?;
    write_text(dir.join("config.toml"), &cfg.to_toml()?)
}

fn calibrate(common: &Common) -> CliResult<()> {
    let cfg = load_config(common)?;
    let dir = prepare_out(&cfg, common.force)?;
    let calib = cfg.calib_config();
    let inst = instance(&cfg.model, &cfg.data, calib.num_samples, cfg.seed)?;
    let (q, report) = calibrate_model(&inst.model, &inst.calib, &calib)?;
    save_model(&dir, &cfg, &q)?;
    write_json(dir.join("report.json"), &report)?;
    let table = report.table();
    write_text(dir.join("report.txt"), &table)?;
    print!("{table}");
    println!("total optimizer rounds: {}", q.total_qao_rounds());
    Ok(())
}

fn quantize(common: &Common, scheme: &str) -> CliResult<()> {
    let scheme = Scheme::parse(scheme)?;
    let class = scheme.uniform_class().ok_or_else(|| {
        Failure::Usage(format!(
            "scheme {} needs calibration statistics; use `calibrate`",
            scheme.name()
        ))
    })?;
    let cfg = load_config(common)?;
    let calib: CalibConfig = cfg.calib_config();
    if calib.layer.act == ptq_core::quantizers::ActQuantKind::Static {
        return Err(Failure::Usage(
            "the static activation quantizer needs calibration statistics; use `calibrate`".into(),
        ));
    }
    let dir = prepare_out(&cfg, common.force)?;
    let inst = instance(&cfg.model, &cfg.data, 0, cfg.seed)?;
    let report = uniform_report(inst.model.depth(), class, &calib.budgets);
    let q = build_with_report(&inst.model, &report, &calib, None)?;
    save_model(&dir, &cfg, &q)?;
    println!("{} layers built with {}, {} optimizer rounds", q.depth(), scheme.name(), q.total_qao_rounds());
    Ok(())
}

#[derive(serde::Serialize)]
struct SeedMetrics {
    seed: u64,
    #[serde(flatten)]
    metrics: ErrorMetrics,
}

fn eval(common: &Common, model_dir: &Path) -> CliResult<()> {
    let archive = model_dir.join("model");
    if !archive.join("model.json").is_file() {
        return Err(Failure::Usage(format!("no model archive under {}", model_dir.display())));
    }
    let cfg = load_config(common)?;
    let q = QuantModel::load(&archive)?;
    let inst = instance(&cfg.model, &cfg.data, 0, cfg.seed)?;
    let fp = &inst.model;
    let dims_match =
        fp.depth() == q.depth() && (0..fp.depth()).all(|i| fp.layer_dims(i) == q.layer_dims(i));
    if !dims_match {
        return Err(Failure::Usage("archive does not match the configured model".into()));
    }
    let dir = prepare_out(&cfg, common.force)?;
    let metrics = eval_model_error(fp, &q, &inst.eval)?;
    let row = SeedMetrics { seed: cfg.seed, metrics };
    write_text(dir.join("metrics.jsonl"), &json_line(&row)?)?;
    let summary = format!(
        "{:<6} {:>14} {:>10} {:>14}\n{:<6} {:>14.6e} {:>10.3} {:>14.6e}\n",
        "seed", "rel_frob", "sqnr_db", "max_abs", cfg.seed, metrics.rel_frob, metrics.sqnr_db, metrics.max_abs
    );
    write_text(dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn report(common: &Common) -> CliResult<()> {
    let cfg = load_config(common)?;
    let dir = prepare_out(&cfg, common.force)?;
    let model = ptq_core::harness::gen_model(&cfg.model.spec(cfg.seed))?;
    let shapes = LayerShape::of_model(&model, cfg.layer.rank, cfg.layer.rotation);
    let rows = compression_table(&shapes, cfg.report.tokens, &[(8, 8), (6, 6), (4, 4)]);
    write_json(dir.join("compression.json"), &rows)?;
    let table = render_table(&rows);
    write_text(dir.join("compression.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn ablate(common: &Common, axis: &str) -> CliResult<()> {
    let axis = Axis::parse(axis)?;
    let cfg = load_config(common)?;
    let dir = prepare_out(&cfg, common.force)?;
    let calib = cfg.calib_config();
    let arms = axis.arms();
    let mut results: Vec<ArmResult> = Vec::new();
    let mut lines = String::new();
    for seed in cfg.benchmark_seeds() {
        let inst = instance(&cfg.model, &cfg.data, calib.num_samples, seed)?;
        let ctx = SeedContext::new(&inst, &calib)?;
        for arm in &arms {
            let r = ctx.run(arm, cfg.data.eval_range_scale)?;
            lines.push_str(&json_line(&r)?);
            results.push(r);
        }
        eprintln!("seed {seed} done");
    }
    let summary = summarize(&results);
    let name = axis.name();
    write_text(dir.join(format!("ablate-{name}.jsonl")), &lines)?;
    write_json(dir.join(format!("ablate-{name}.json")), &summary)?;
    let table = render_summary(&summary);
    write_text(dir.join(format!("ablate-{name}.txt")), &table)?;
    print!("{table}");
    Ok(())
}

fn dump_defaults(out: Option<&Path>, force: bool) -> CliResult<()> {
    let text = RunConfig::default().to_toml()?;
    match out {
        Some(path) => {
            if path.exists() && !force {
                return Err(Failure::Usage(format!(
                    "{} exists; pass --force to overwrite",
                    path.display()
                )));
            }
            write_text(path, &text)
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
