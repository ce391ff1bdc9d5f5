//! `voxseg` — end-to-end pipeline driver: synthetic label generation,
//! SpCycleGAN training, microscopy synthesis, U-Net training, tiled
//! segmentation, postprocessing, evaluation, and overlay rendering.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use voxseg::gantrain::{generate_synthetic, train_spcyclegan, GanTrainConfig};
use voxseg::infer::{segment_volume, DEFAULT_THRESHOLD};
use voxseg::networks::{load_checkpoint, save_checkpoint, Role};
use voxseg::postproc::{
    colorize_labels, compute_metrics, connected_components_3d, remove_small_components,
    Connectivity,
};
use voxseg::segtrain::{prepare_training_set, train_unet, SegTrainConfig};
use voxseg::synthgen::{generate_binary_volume, SynthConfig};
use voxseg::volio::{read_volume, write_volume, SemanticTag};
use voxseg::volume::{LabelVolume, Volume};

#[derive(Parser)]
#[command(name = "voxseg", version, about = "3D nuclei segmentation pipeline")]
struct Cli {
    /// TOML pipeline configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Allows writing into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generates synthetic binary label volumes.
    SynthLabels(SynthLabelsArgs),
    /// Trains the SpCycleGAN networks on unpaired labels and microscopy.
    TrainSpcyclegan(TrainSpcycleganArgs),
    /// Runs generator G over label volumes to synthesize microscopy.
    GenMicroscopy(GenMicroscopyArgs),
    /// Trains the 3D U-Net on paired synthetic microscopy and labels.
    TrainUnet(TrainUnetArgs),
    /// Tiled sliding-window segmentation of a microscopy volume.
    Segment(SegmentArgs),
    /// Connected components and small-object removal on a segmentation.
    Postprocess(PostprocessArgs),
    /// Voxel metrics of a segmentation against ground truth.
    Evaluate(EvaluateArgs),
    /// Renders color-coded component slices.
    Overlay(OverlayArgs),
}

#[derive(Args)]
struct SynthLabelsArgs {
    /// Number of volumes to generate.
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainSpcycleganArgs {
    /// Directory of binary label volumes (*.vol).
    #[arg(long)]
    labels_dir: PathBuf,
    /// Directory of real microscopy volumes (*.vol, u8).
    #[arg(long)]
    real_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GenMicroscopyArgs {
    /// Generator G checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    labels_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainUnetArgs {
    /// Directory of synthetic microscopy volumes (paired with labels by
    /// sorted file name).
    #[arg(long)]
    syn_dir: PathBuf,
    #[arg(long)]
    labels_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SegmentArgs {
    /// Segmentation (role M) checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input microscopy volume.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Foreground threshold; defaults to the configured value.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct PostprocessArgs {
    /// Binary segmentation volume.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Components smaller than this are removed (strict).
    #[arg(long)]
    min_size: Option<usize>,
    /// Neighborhood connectivity: 6, 18 or 26.
    #[arg(long)]
    connectivity: Option<u8>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    seg: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Report path (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OverlayArgs {
    /// Component-labeled volume.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct InferSection {
    threshold: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PostprocSection {
    min_size: usize,
    connectivity: u8,
}

impl Default for PostprocSection {
    fn default() -> Self {
        PostprocSection {
            min_size: 100,
            connectivity: 26,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PipelineConfig {
    seed: Option<u64>,
    synthgen: Option<SynthConfig>,
    gantrain: Option<GanTrainConfig>,
    segtrain: Option<SegTrainConfig>,
    infer: InferSection,
    postproc: Option<PostprocSection>,
}

/// Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
fn exit_code_for(e: &voxseg::Error) -> u8 {
    use voxseg::Error::*;
    match e {
        Config(_) | Parameter(_) => 2,
        Numerical(_) | Optimizer(_) => 4,
        _ => 3,
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] voxseg::Error),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => exit_code_for(e),
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn load_config(path: Option<&Path>) -> CliResult<PipelineConfig> {
    match path {
        None => Ok(PipelineConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str(&text)
                .map_err(|e| CliError::Config(format!("bad config {}: {e}", p.display())))
        }
    }
}

/// Creates the output directory, refusing to reuse a non-empty one unless
/// --force is given.
fn prepare_out_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .map_err(|e| CliError::Data(format!("cannot inspect {}: {e}", dir.display())))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(CliError::Config(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
    Ok(())
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn file_checksum(path: &Path) -> CliResult<u64> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(fnv1a(&bytes))
}

#[derive(Serialize)]
struct ManifestEntry {
    name: String,
    checksum: String,
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: C,
    inputs: Vec<String>,
    outputs: Vec<ManifestEntry>,
    wall_time_secs: f64,
}

fn write_manifest<C: Serialize>(
    dir: &Path,
    command: &str,
    seed: u64,
    config: C,
    inputs: Vec<String>,
    output_files: &[PathBuf],
    started: Instant,
) -> CliResult<()> {
    let outputs = output_files
        .iter()
        .map(|p| {
            Ok(ManifestEntry {
                name: p
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                checksum: format!("{:016x}", file_checksum(p)?),
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config,
        inputs,
        outputs,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::Data(format!("manifest serialization failed: {e}")))?;
    std::fs::write(dir.join("manifest.json"), text)
        .map_err(|e| CliError::Data(format!("cannot write manifest: {e}")))?;
    Ok(())
}

/// All `.vol` volumes in a directory, sorted by file name.
fn list_volumes(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "vol"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Data(format!(
            "no .vol volumes found in {}",
            dir.display()
        )));
    }
    Ok(paths)
}

fn read_labels(paths: &[PathBuf]) -> CliResult<Vec<LabelVolume>> {
    paths
        .iter()
        .map(|p| Ok(LabelVolume::from_volume(&read_volume(p)?)))
        .collect()
}

fn path_strings(paths: &[PathBuf]) -> Vec<String> {
    paths.iter().map(|p| p.display().to_string()).collect()
}

fn effective_seed(cli: &Cli, config: &PipelineConfig) -> u64 {
    cli.seed.or(config.seed).unwrap_or(0)
}

fn cmd_synth_labels(cli: &Cli, args: &SynthLabelsArgs) -> CliResult<()> {
    let started = Instant::now();
    let config = load_config(cli.config.as_deref())?;
    let seed = effective_seed(cli, &config);
    let synth = SynthConfig {
        seed,
        ..config.synthgen.clone().unwrap_or_default()
    };
    prepare_out_dir(&args.out_dir, cli.force)?;
    let mut outputs = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let mut rng = synth.rng_for_volume(i as u64);
        let labels = generate_binary_volume(&synth, &mut rng)?;
        let path = args.out_dir.join(format!("label_{i:04}.vol"));
        write_volume(&path, &labels.to_u32_volume(), SemanticTag::Label)?;
        outputs.push(path);
    }
    write_manifest(&args.out_dir, "synth-labels", seed, &synth, vec![], &outputs, started)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> CliResult<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(
            &serde_json::to_string(r)
                .map_err(|e| CliError::Data(format!("log serialization failed: {e}")))?,
        );
        text.push('\n');
    }
    std::fs::write(path, text)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

fn cmd_train_spcyclegan(cli: &Cli, args: &TrainSpcycleganArgs) -> CliResult<()> {
    let started = Instant::now();
    let config = load_config(cli.config.as_deref())?;
    let seed = effective_seed(cli, &config);
    let gan = GanTrainConfig {
        seed,
        ..config.gantrain.clone().unwrap_or_default()
    };
    let label_paths = list_volumes(&args.labels_dir)?;
    let real_paths = list_volumes(&args.real_dir)?;
    let labels = read_labels(&label_paths)?;
    let reals = real_paths
        .iter()
        .map(|p| Ok(read_volume(p)?))
        .collect::<CliResult<Vec<Volume>>>()?;
    prepare_out_dir(&args.out_dir, cli.force)?;
    let result = train_spcyclegan(&gan, &labels, &reals)?;
    let mut outputs = Vec::new();
    for (name, net) in [
        ("g.ckpt", &result.models.g),
        ("f.ckpt", &result.models.f),
        ("h.ckpt", &result.models.h),
        ("d1.ckpt", &result.models.d1),
        ("d2.ckpt", &result.models.d2),
    ] {
        let path = args.out_dir.join(name);
        save_checkpoint(&path, net)?;
        outputs.push(path);
    }
    let log_path = args.out_dir.join("loss_log.jsonl");
    write_jsonl(&log_path, &result.log)?;
    outputs.push(log_path);
    let mut inputs = path_strings(&label_paths);
    inputs.extend(path_strings(&real_paths));
    write_manifest(&args.out_dir, "train-spcyclegan", seed, &gan, inputs, &outputs, started)
}

fn cmd_gen_microscopy(cli: &Cli, args: &GenMicroscopyArgs) -> CliResult<()> {
    let started = Instant::now();
    let config = load_config(cli.config.as_deref())?;
    let seed = effective_seed(cli, &config);
    let g = load_checkpoint(&args.checkpoint)?;
    if g.role() != Role::G {
        return Err(CliError::Core(voxseg::Error::Model(format!(
            "gen-microscopy needs a generator G checkpoint, {} has role {}",
            args.checkpoint.display(),
            g.role()
        ))));
    }
    let label_paths = list_volumes(&args.labels_dir)?;
    let labels = read_labels(&label_paths)?;
    prepare_out_dir(&args.out_dir, cli.force)?;
    let mut outputs = Vec::new();
    for (path, label) in label_paths.iter().zip(labels.iter()) {
        let syn = generate_synthetic(&g, label)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "volume".into());
        let out = args.out_dir.join(format!("{}_syn.vol", stem.replace("label", "syn")));
        write_volume(&out, &syn, SemanticTag::Syn)?;
        outputs.push(out);
    }
    write_manifest(
        &args.out_dir,
        "gen-microscopy",
        seed,
        serde_json::json!({ "checkpoint": args.checkpoint.display().to_string() }),
        path_strings(&label_paths),
        &outputs,
        started,
    )
}

fn cmd_train_unet(cli: &Cli, args: &TrainUnetArgs) -> CliResult<()> {
    let started = Instant::now();
    let config = load_config(cli.config.as_deref())?;
    let seed = effective_seed(cli, &config);
    let seg_cfg = SegTrainConfig {
        seed,
        ..config.segtrain.clone().unwrap_or_default()
    };
    let syn_paths = list_volumes(&args.syn_dir)?;
    let label_paths = list_volumes(&args.labels_dir)?;
    let syns = syn_paths
        .iter()
        .map(|p| Ok(read_volume(p)?))
        .collect::<CliResult<Vec<Volume>>>()?;
    let labels = read_labels(&label_paths)?;
    let pairs = prepare_training_set(&syns, &labels)?;
    prepare_out_dir(&args.out_dir, cli.force)?;
    let result = train_unet(&seg_cfg, &pairs)?;
    let final_path = args.out_dir.join("unet_final.ckpt");
    save_checkpoint(&final_path, &result.model)?;
    result.apply_best()?;
    let best_path = args.out_dir.join("unet_best.ckpt");
    save_checkpoint(&best_path, &result.model)?;
    let log_path = args.out_dir.join("loss_log.jsonl");
    write_jsonl(&log_path, &result.log)?;
    let mut inputs = path_strings(&syn_paths);
    inputs.extend(path_strings(&label_paths));
    write_manifest(
        &args.out_dir,
        "train-unet",
        seed,
        &seg_cfg,
        inputs,
        &[final_path, best_path, log_path],
        started,
    )
}

fn cmd_segment(cli: &Cli, args: &SegmentArgs) -> CliResult<()> {
    let started = Instant::now();
    let config = load_config(cli.config.as_deref())?;
    let seed = effective_seed(cli, &config);
    let threshold = args
        .threshold
        .or(config.infer.threshold)
        .unwrap_or(DEFAULT_THRESHOLD);
    let model = load_checkpoint(&args.checkpoint)?;
    let input = read_volume(&args.input)?;
    prepare_out_dir(&args.out_dir, cli.force)?;
    let (probs, seg) = segment_volume(&model, &input, threshold)?;
    let prob_path = args.out_dir.join("prob.vol");
    write_volume(&prob_path, &probs, SemanticTag::Prob)?;
    let seg_path = args.out_dir.join("seg.vol");
    write_volume(&seg_path, &seg.to_u8_volume(), SemanticTag::Seg)?;
    write_manifest(
        &args.out_dir,
        "segment",
        seed,
        serde_json::json!({
            "checkpoint": args.checkpoint.display().to_string(),
            "threshold": threshold,
        }),
        vec![args.input.display().to_string()],
        &[prob_path, seg_path],
        started,
    )
}

fn cmd_postprocess(cli: &Cli, args: &PostprocessArgs) -> CliResult<()> {
    let started = Instant::now();
    let config = load_config(cli.config.as_deref())?;
    let seed = effective_seed(cli, &config);
    let section = config.postproc.clone().unwrap_or_default();
    let min_size = args.min_size.unwrap_or(section.min_size);
    let connectivity = Connectivity::try_from(args.connectivity.unwrap_or(section.connectivity))?;
    let seg = LabelVolume::from_volume(&read_volume(&args.input)?);
    prepare_out_dir(&args.out_dir, cli.force)?;
    let components = connected_components_3d(&seg, connectivity)?;
    let kept = remove_small_components(&components, min_size)?;
    let out_path = args.out_dir.join("components.vol");
    write_volume(&out_path, &kept.to_u32_volume(), SemanticTag::Seg)?;
    write_manifest(
        &args.out_dir,
        "postprocess",
        seed,
        serde_json::json!({
            "min_size": min_size,
            "connectivity": u8::from(connectivity),
            "components_before": components.max_label(),
            "components_after": kept.max_label(),
        }),
        vec![args.input.display().to_string()],
        &[out_path],
        started,
    )
}

fn cmd_evaluate(args: &EvaluateArgs) -> CliResult<()> {
    let seg = LabelVolume::from_volume(&read_volume(&args.seg)?);
    let truth = LabelVolume::from_volume(&read_volume(&args.truth)?);
    let report = compute_metrics(&seg, &truth)?;
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Data(format!("report serialization failed: {e}")))?;
    std::fs::write(&args.out, text)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", args.out.display())))?;
    println!(
        "accuracy {:.4}  type1 {:.4}  type2 {:.4}",
        report.accuracy, report.type1_error, report.type2_error
    );
    Ok(())
}

fn cmd_overlay(cli: &Cli, args: &OverlayArgs) -> CliResult<()> {
    let started = Instant::now();
    let config = load_config(cli.config.as_deref())?;
    let seed = effective_seed(cli, &config);
    let labels = LabelVolume::from_volume(&read_volume(&args.labels)?);
    prepare_out_dir(&args.out_dir, cli.force)?;
    let slices = colorize_labels(&labels, seed);
    let mut outputs = Vec::new();
    for (i, img) in slices.iter().enumerate() {
        let path = args.out_dir.join(format!("slice_{:04}.png", i + 1));
        img.save(&path)
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
        outputs.push(path);
    }
    write_manifest(
        &args.out_dir,
        "overlay",
        seed,
        serde_json::json!({ "labels": args.labels.display().to_string() }),
        vec![args.labels.display().to_string()],
        &outputs,
        started,
    )
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::SynthLabels(args) => cmd_synth_labels(cli, args),
        Command::TrainSpcyclegan(args) => cmd_train_spcyclegan(cli, args),
        Command::GenMicroscopy(args) => cmd_gen_microscopy(cli, args),
        Command::TrainUnet(args) => cmd_train_unet(cli, args),
        Command::Segment(args) => cmd_segment(cli, args),
        Command::Postprocess(args) => cmd_postprocess(cli, args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Overlay(args) => cmd_overlay(cli, args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
