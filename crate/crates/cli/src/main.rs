//! Command-line front end for the weight fingerprinting pipelines.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
//! or precondition error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use weightprint::checkpoint::{open_checkpoint, CheckpointIndex};
use weightprint::export;
use weightprint::lora::{collect_lora_pairs, LoraConfig};
use weightprint::report::{
    compare_fingerprints, compare_fingerprints_shared, fingerprint_checkpoint, fingerprint_lora,
    read_from_file, write_to_file, BaseComparison, CompareMetric, Fingerprint, RunParameters,
};
use weightprint::spectral::ProfileNormalization;
use weightprint::stats::StdNormalization;
use weightprint::taxonomy::{collect_layout, ArchPreset};
use weightprint::ErrorClass;

#[derive(Parser)]
#[command(
    name = "weightprint",
    version,
    about = "Weight-level fingerprints for transformer checkpoints"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fingerprint a (possibly sharded) safetensors checkpoint
    Fingerprint(FingerprintCmd),
    /// Fingerprint the composed B*A deltas of a LoRA adapter
    Lora(LoraCmd),
    /// Compare two fingerprint reports; the result goes to stdout
    Compare(CompareCmd),
    /// Emit plot-ready CSV data from a report or a checkpoint
    ExportPlot(ExportPlotCmd),
}

#[derive(Args)]
struct PipelineOpts {
    /// Built-in architecture preset (llama, qwen2)
    #[arg(long, default_value = "llama")]
    preset: String,
    /// JSON preset file; overrides --preset
    #[arg(long)]
    preset_file: Option<PathBuf>,
    /// Singular values retained per projection matrix
    #[arg(long, default_value_t = 16)]
    rank: usize,
    /// Cluster count; the clustering vector is defined for 2
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Base seed for the clustering restarts
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// K-Means restarts (seeds seed..seed+restarts-1)
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    /// Normalization for the std vector
    #[arg(long, value_enum, default_value_t = StdNormArg::MaxOne)]
    std_norm: StdNormArg,
    /// Normalization for singular-value profiles
    #[arg(long, value_enum, default_value_t = ProfileNormArg::Top)]
    profile_norm: ProfileNormArg,
    /// Model identifier recorded in the report; defaults to the input name
    #[arg(long)]
    model_id: Option<String>,
}

#[derive(Args)]
struct FingerprintCmd {
    /// Checkpoint directory or .safetensors shard files
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[command(flatten)]
    opts: PipelineOpts,
    /// Report output path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LoraCmd {
    /// Adapter directory or .safetensors files
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[command(flatten)]
    opts: PipelineOpts,
    /// Apply the alpha/r scaling from the adapter config to each delta
    #[arg(long)]
    scale_alpha: bool,
    /// adapter_config.json path; defaults to the file next to the input
    #[arg(long)]
    adapter_config: Option<PathBuf>,
    /// Base-model report to embed a comparison section against
    #[arg(long)]
    base: Option<PathBuf>,
    /// Metric for the embedded comparison
    #[arg(long, value_enum, default_value_t = MetricArg::Cosine)]
    metric: MetricArg,
    /// Report output path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareCmd {
    a: PathBuf,
    b: PathBuf,
    #[arg(long, value_enum, default_value_t = MetricArg::Cosine)]
    metric: MetricArg,
}

#[derive(Args)]
struct ExportPlotCmd {
    /// A report (.json) or a checkpoint (directory / .safetensors)
    input: PathBuf,
    #[arg(long, value_enum)]
    what: PlotKind,
    /// CSV output path
    #[arg(long)]
    out: PathBuf,
    /// Sample size for --what dist
    #[arg(long, default_value_t = 2000)]
    sample: usize,
    /// Sampling seed for --what dist
    #[arg(long, default_value_t = 0)]
    sample_seed: u64,
    #[command(flatten)]
    opts: PipelineOpts,
}

#[derive(Clone, Copy, ValueEnum)]
enum StdNormArg {
    MaxOne,
    MinMax,
    UnitL2,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileNormArg {
    Top,
    UnitL2,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Cosine,
    L2,
    MaxAbsDiff,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    Std,
    Cv,
    Heatmap,
    Scatter,
    Dist,
}

impl From<StdNormArg> for StdNormalization {
    fn from(v: StdNormArg) -> Self {
        match v {
            StdNormArg::MaxOne => StdNormalization::MaxOne,
            StdNormArg::MinMax => StdNormalization::MinMax,
            StdNormArg::UnitL2 => StdNormalization::UnitL2,
        }
    }
}

impl From<ProfileNormArg> for ProfileNormalization {
    fn from(v: ProfileNormArg) -> Self {
        match v {
            ProfileNormArg::Top => ProfileNormalization::NormalizeByTop,
            ProfileNormArg::UnitL2 => ProfileNormalization::UnitL2,
        }
    }
}

impl From<MetricArg> for CompareMetric {
    fn from(v: MetricArg) -> Self {
        match v {
            MetricArg::Cosine => CompareMetric::Cosine,
            MetricArg::L2 => CompareMetric::L2,
            MetricArg::MaxAbsDiff => CompareMetric::MaxAbsDiff,
        }
    }
}

enum CliError {
    Usage(String),
    Lib(weightprint::Error),
}

impl From<weightprint::Error> for CliError {
    fn from(e: weightprint::Error) -> Self {
        CliError::Lib(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version requests are successes, not usage errors
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Lib(e)) => {
            eprintln!("error: {e}");
            match e.class() {
                ErrorClass::Data => ExitCode::from(2),
                ErrorClass::Numeric => ExitCode::from(3),
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Fingerprint(cmd) => cmd_fingerprint(cmd),
        Command::Lora(cmd) => cmd_lora(cmd),
        Command::Compare(cmd) => cmd_compare(cmd),
        Command::ExportPlot(cmd) => cmd_export_plot(cmd),
    }
}

/// Expand directories to their .safetensors files, sorted by name.
fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut shard_files: Vec<PathBuf> = std::fs::read_dir(input)
                .map_err(|e| weightprint::Error::io(input.display().to_string(), e))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|ext| ext == "safetensors"))
                .collect();
            shard_files.sort();
            if shard_files.is_empty() {
                return Err(CliError::Usage(format!(
                    "no .safetensors files in {}",
                    input.display()
                )));
            }
            files.extend(shard_files);
        } else {
            files.push(input.clone());
        }
    }
    if files.is_empty() {
        return Err(CliError::Usage("no input files".to_string()));
    }
    Ok(files)
}

fn default_model_id(input: &Path) -> String {
    input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| input.display().to_string())
}

fn load_preset(opts: &PipelineOpts) -> Result<ArchPreset, CliError> {
    match &opts.preset_file {
        Some(path) => Ok(ArchPreset::from_json_file(path)?),
        None => Ok(ArchPreset::by_name(&opts.preset)?),
    }
}

fn run_parameters(opts: &PipelineOpts, preset: &ArchPreset, lora_scaling: bool) -> RunParameters {
    RunParameters {
        rank: opts.rank,
        k: opts.k,
        seed: opts.seed,
        restarts: opts.restarts,
        std_normalization: opts.std_norm.into(),
        profile_normalization: opts.profile_norm.into(),
        lora_scaling,
        preset: preset.name.clone(),
        ..Default::default()
    }
}

fn build_checkpoint_fingerprint(
    inputs: &[PathBuf],
    opts: &PipelineOpts,
) -> Result<(Fingerprint, CheckpointIndex), CliError> {
    let files = expand_inputs(inputs)?;
    let preset = load_preset(opts)?;
    let index = open_checkpoint(&files)?;
    let layout = collect_layout(&index, &preset)?;
    let params = run_parameters(opts, &preset, false);
    let model_id = opts
        .model_id
        .clone()
        .unwrap_or_else(|| default_model_id(&inputs[0]));
    let fp = fingerprint_checkpoint(&index, &layout, &params, &model_id)?;
    Ok((fp, index))
}

fn cmd_fingerprint(cmd: FingerprintCmd) -> Result<(), CliError> {
    let (fp, _) = build_checkpoint_fingerprint(&cmd.inputs, &cmd.opts)?;
    write_to_file(&fp, &cmd.out)?;
    eprintln!("wrote {}", cmd.out.display());
    Ok(())
}

fn cmd_lora(cmd: LoraCmd) -> Result<(), CliError> {
    let files = expand_inputs(&cmd.inputs)?;
    let preset = load_preset(&cmd.opts)?;
    let index = open_checkpoint(&files)?;

    let config_path = cmd.adapter_config.clone().or_else(|| {
        let dir = if cmd.inputs[0].is_dir() {
            cmd.inputs[0].clone()
        } else {
            cmd.inputs[0].parent().map(Path::to_path_buf)?
        };
        let candidate = dir.join("adapter_config.json");
        candidate.exists().then_some(candidate)
    });
    let config = match &config_path {
        Some(path) => Some(LoraConfig::from_json_file(path)?),
        None => None,
    };

    let pairs = collect_lora_pairs(&index, &preset, config.as_ref())?;
    let params = run_parameters(&cmd.opts, &preset, cmd.scale_alpha);
    let model_id = cmd
        .opts
        .model_id
        .clone()
        .unwrap_or_else(|| default_model_id(&cmd.inputs[0]));

    let base = match &cmd.base {
        Some(path) => Some(read_from_file(path)?),
        None => None,
    };
    let mut fp = fingerprint_lora(
        &pairs,
        &params,
        &model_id,
        base.as_ref().map(|b| b.model_id.as_str()),
    )?;
    if let Some(base) = base {
        let result = compare_fingerprints_shared(&base, &fp, cmd.metric.into())?;
        fp.base_comparison = Some(BaseComparison {
            base_model_id: base.model_id.clone(),
            result,
        });
    }
    write_to_file(&fp, &cmd.out)?;
    eprintln!("wrote {}", cmd.out.display());
    Ok(())
}

fn cmd_compare(cmd: CompareCmd) -> Result<(), CliError> {
    let a = read_from_file(&cmd.a)?;
    let b = read_from_file(&cmd.b)?;
    let result = compare_fingerprints(&a, &b, cmd.metric.into())?;
    let mut text = serde_json_string(&result);
    text.push('\n');
    print!("{text}");
    Ok(())
}

fn serde_json_string(result: &weightprint::report::ComparisonResult) -> String {
    // ComparisonResult contains no map types, so output order is fixed
    serde_json::to_string_pretty(result).expect("comparison serialization cannot fail")
}

fn cmd_export_plot(cmd: ExportPlotCmd) -> Result<(), CliError> {
    let is_report = cmd.input.is_file()
        && cmd.input.extension().is_some_and(|ext| ext == "json");

    let csv = match cmd.what {
        PlotKind::Dist => {
            if is_report {
                return Err(CliError::Usage(
                    "--what dist needs checkpoint access, not a report file".to_string(),
                ));
            }
            let files = expand_inputs(std::slice::from_ref(&cmd.input))?;
            let preset = load_preset(&cmd.opts)?;
            let index = open_checkpoint(&files)?;
            let layout = collect_layout(&index, &preset)?;
            export::distribution_csv(&index, &layout, cmd.sample, cmd.sample_seed)?
        }
        other => {
            let fp = if is_report {
                read_from_file(&cmd.input)?
            } else {
                let inputs = vec![cmd.input.clone()];
                build_checkpoint_fingerprint(&inputs, &cmd.opts)?.0
            };
            match other {
                PlotKind::Std => export::std_vector_csv(&fp),
                PlotKind::Cv => export::clustering_vector_csv(&fp),
                PlotKind::Heatmap => export::heatmap_csv(&fp.label_grid_struct()),
                PlotKind::Scatter => export::scatter_csv(&fp)?,
                PlotKind::Dist => unreachable!(),
            }
        }
    };
    std::fs::write(&cmd.out, csv)
        .map_err(|e| weightprint::Error::io(cmd.out.display().to_string(), e))?;
    eprintln!("wrote {}", cmd.out.display());
    Ok(())
}
