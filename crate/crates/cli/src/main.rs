use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use beadloc::batch::{analyze_path, run_batch, FrameStatus};
use beadloc::diagnose::{diagnostics_for_params, LagBins};
use beadloc::io::{csv_table, read_frame, read_json, to_canonical_json, to_canonical_json_line, write_frame, write_json, write_text};
use beadloc::select::IcVariant;
use beadloc::simulate::{simulate_frame, DesignPreset, NoiseLaw};
use beadloc::{FrameFormat, FrameReport, RunConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "beadloc", version, about = "Count and localize fluorescent beads in microscope frames")]
struct Cli {
    /// TOML file with run settings; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate frames from a named design.
    Simulate(SimulateArgs),
    /// Select and fit the beads of one frame.
    Fit(FitArgs),
    /// Residual diagnostics of a frame under the estimates in a report.
    Diagnose(DiagnoseArgs),
    /// Fit many frames; writes one JSON report per line.
    Batch(BatchArgs),
}

#[derive(Args, Default)]
struct Common {
    /// Pixel size in nm.
    #[arg(long)]
    pixel_size: Option<f64>,
    /// grid_text, csv or pgm16.
    #[arg(long)]
    format: Option<FrameFormat>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Default)]
struct SelectArgs {
    #[arg(long)]
    max_beads: Option<usize>,
    #[arg(long)]
    lrt_threshold: Option<f64>,
    /// sqrt_n or bic.
    #[arg(long)]
    ic: Option<IcVariant>,
    /// Joint coverage of the confidence ellipses.
    #[arg(long)]
    level: Option<f64>,
    /// Skip residual diagnostics.
    #[arg(long)]
    no_diagnostics: bool,
    /// Record per-frame wall-clock time.
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// typical1, typical4, typical15, dim, close, partial, heavy_tailed, asymmetric.
    #[arg(long)]
    design: DesignPreset,
    #[arg(long, default_value_t = 1)]
    replicates: u64,
    /// Seed of the first replicate; replicate i uses seed + i.
    #[arg(long)]
    seed: Option<u64>,
    /// gaussian, t3, exp or none; defaults to the design's own law.
    #[arg(long)]
    noise: Option<NoiseLaw>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct FitArgs {
    frame: PathBuf,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    select: SelectArgs,
}

#[derive(Args)]
struct DiagnoseArgs {
    frame: PathBuf,
    /// Report written by `fit`.
    #[arg(long)]
    report: PathBuf,
    /// Directory for diagnostics.json, variogram.csv and qq.csv.
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct BatchArgs {
    /// Frame files or directories of frame files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    select: SelectArgs,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn apply_common(config: &mut RunConfig, common: &Common) {
    if common.pixel_size.is_some() {
        config.pixel_size = common.pixel_size;
    }
    if common.format.is_some() {
        config.format = common.format;
    }
    if common.out.is_some() {
        config.output = common.out.clone();
    }
}

fn apply_select(config: &mut RunConfig, args: &SelectArgs) {
    if let Some(v) = args.max_beads {
        config.max_beads = v;
    }
    if let Some(v) = args.lrt_threshold {
        config.lrt_threshold = v;
    }
    if let Some(v) = args.ic {
        config.ic = v;
    }
    if let Some(v) = args.level {
        config.family_level = v;
    }
    if args.no_diagnostics {
        config.diagnostics = false;
    }
    if args.timing {
        config.timing = true;
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => write_text(p, text).map_err(Into::into),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn simulate(args: SimulateArgs, mut config: RunConfig) -> Result<bool> {
    apply_common(&mut config, &args.common);
    if let Some(seed) = args.seed {
        config.seed = Some(seed);
    }
    config.validate()?;
    let out = config.output.clone().context("simulate needs --out <directory>")?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut design = args.design.design();
    if let Some(law) = args.noise {
        design = design.with_noise(law);
    }
    if let Some(a) = config.pixel_size {
        design.grid.pixel_size = a;
    }
    let format = config.format.unwrap_or_default();
    let base = config.seed.unwrap_or(design.seed);
    let mut manifest = Vec::new();
    for i in 0..args.replicates {
        let seed = base + i;
        let d = design.with_seed(seed);
        let frame = simulate_frame(&d)?;
        let name = format!("{}_{seed:06}.{}", args.design.name(), format.extension());
        write_frame(&frame, &out.join(&name), format)?;
        manifest.push(name);
    }
    let summary = serde_json::json!({
        "design": args.design.name(),
        "seeds": (0..args.replicates).map(|i| base + i).collect::<Vec<_>>(),
        "files": manifest,
    });
    write_json(&summary, &out.join("simulation.json"))?;
    write_json(&design, &out.join("design.json"))?;
    Ok(true)
}

/// A headerless format without a pixel size is a configuration error, not a
/// bad frame.
fn check_pixel_size(paths: &[PathBuf], config: &RunConfig) -> Result<()> {
    if config.pixel_size.is_some() {
        return Ok(());
    }
    if let Some(p) = paths.iter().find(|p| config.format_for(p).needs_pixel_size()) {
        anyhow::bail!("{} has no header; set --pixel-size", p.display());
    }
    Ok(())
}

fn fit(args: FitArgs, mut config: RunConfig) -> Result<bool> {
    apply_common(&mut config, &args.common);
    apply_select(&mut config, &args.select);
    config.validate()?;
    check_pixel_size(std::slice::from_ref(&args.frame), &config)?;
    let report = analyze_path(&args.frame, &config);
    let mut text = to_canonical_json(&report)?;
    text.push('\n');
    emit(&text, config.output.as_deref())?;
    Ok(report.status == FrameStatus::Ok)
}

fn diagnose(args: DiagnoseArgs, mut config: RunConfig) -> Result<bool> {
    apply_common(&mut config, &args.common);
    config.validate()?;
    let report: FrameReport = read_json(&args.report)?;
    let params = report
        .params()
        .with_context(|| format!("{} holds no fitted parameters", args.report.display()))?;
    let frame = read_frame(&args.frame, config.format_for(&args.frame), config.pixel_size)?;
    let diag = diagnostics_for_params(&frame, &params, &LagBins::default_for(frame.grid()))?;
    match config.output {
        None => {
            let mut text = to_canonical_json(&diag)?;
            text.push('\n');
            emit(&text, None)?;
        }
        Some(dir) => {
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            write_json(&diag, &dir.join("diagnostics.json"))?;
            let bins = diag.matheron.bins.iter().zip(&diag.cressie.bins);
            let variogram = csv_table(
                &["lag", "pairs", "matheron", "cressie"],
                bins.map(|(m, c)| vec![m.lag, m.pairs as f64, m.gamma, c.gamma]),
            );
            write_text(&dir.join("variogram.csv"), &variogram)?;
            let qq = csv_table(&["theoretical", "empirical"], diag.qq.iter().map(|&(t, e)| vec![t, e]));
            write_text(&dir.join("qq.csv"), &qq)?;
        }
    }
    Ok(true)
}

fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut entries = fs::read_dir(input)
                .with_context(|| format!("listing {}", input.display()))?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<Vec<_>>>()?;
            entries.retain(|p| p.is_file() && p.extension().is_some_and(|e| e != "json" && e != "jsonl"));
            entries.sort();
            paths.extend(entries);
        } else {
            paths.push(input.clone());
        }
    }
    Ok(paths)
}

fn batch(args: BatchArgs, mut config: RunConfig) -> Result<bool> {
    apply_common(&mut config, &args.common);
    apply_select(&mut config, &args.select);
    if args.jobs.is_some() {
        config.jobs = args.jobs;
    }
    config.validate()?;
    let paths = expand_inputs(&args.inputs)?;
    check_pixel_size(&paths, &config)?;
    let reports = run_batch(&paths, &config)?;
    let mut text = String::new();
    for r in &reports {
        text.push_str(&to_canonical_json_line(r)?);
        text.push('\n');
    }
    emit(&text, config.output.as_deref())?;
    let failed = reports.iter().filter(|r| r.status == FrameStatus::Failed).count();
    if failed > 0 {
        eprintln!("{failed} of {} frames failed", reports.len());
    }
    Ok(failed == 0)
}

fn run(cli: Cli) -> Result<bool> {
    let config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate(a) => simulate(a, config),
        Command::Fit(a) => fit(a, config),
        Command::Diagnose(a) => diagnose(a, config),
        Command::Batch(a) => batch(a, config),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
