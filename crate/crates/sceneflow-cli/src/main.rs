//! Batch command-line surface: dataset generation, training, evaluation,
//! point-flow reconstruction, visualization, the batch-norm ablation
//! runner, and a file inspector.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use sceneflow::eval::{evaluate, projection_consistency_check, reconstruct_point_flow};
use sceneflow::io::{
    build_index, load_sample, read_flo, read_pfm, SampleRecord, Split, Subset,
};
use sceneflow::net::checkpoint::{describe_checkpoint, load_generator_checkpoint};
use sceneflow::net::{generator_forward, Phase};
use sceneflow::synth::{generate_dataset, SceneConfig};
use sceneflow::tensor::{pack_input, unpack_target, Batch, TargetTensor};
use sceneflow::train::{load_training_set, run_bn_ablation, train, TrainConfig};
use sceneflow::types::{CameraRig, SceneFlowField};
use sceneflow::viz::{plot_curves, save_disparity, save_flow};

/// Default output root when a command's --out is omitted.
const OUT_ENV: &str = "SCENEFLOW_OUT";

#[derive(Parser)]
#[command(name = "sceneflow", version, about = "Stereo scene-flow estimation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic stereo dataset with exact ground truth
    GenData(GenDataArgs),
    /// Train the adversarial estimator on an indexed dataset
    Train(TrainArgs),
    /// Evaluate a generator checkpoint and print the error table
    Evaluate(EvaluateArgs),
    /// Export 3D point flow reconstructed from a sample's field
    Reconstruct(ReconstructArgs),
    /// Render flow/disparity panels for a sample (and a checkpoint's prediction)
    Visualize(VisualizeArgs),
    /// Run the paired batch-norm ablation and plot both loss curves
    AblateBn(AblateArgs),
    /// Dump header and statistics of a PFM, .flo or checkpoint file
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset root (default: $SCENEFLOW_OUT or .)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "train")]
    split: Split,
    /// Scene configuration document (TOML); defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the full default configuration and exit
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "synthetic")]
    subset: Subset,
    #[arg(long, default_value = "train")]
    split: Split,
    /// Run directory for checkpoints and the loss log
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training configuration document (TOML)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured step count
    #[arg(long)]
    max_steps: Option<u64>,
    /// Override the configured seed
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "synthetic")]
    subset: Subset,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Generator checkpoint produced by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Model tag printed in the report header
    #[arg(long)]
    tag: Option<String>,
    /// Also write the report as JSON
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Sample directory holding the seven dataset files
    #[arg(long)]
    sample: PathBuf,
    /// Reconstruct from this generator checkpoint instead of ground truth
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 64.0)]
    focal_length: f64,
    #[arg(long, default_value_t = 0.5)]
    baseline: f64,
    /// Principal point x (default: image center)
    #[arg(long)]
    cx: Option<f64>,
    /// Principal point y (default: image center)
    #[arg(long)]
    cy: Option<f64>,
    /// Output text file of `x y z dx dy dz` rows
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VisualizeArgs {
    /// Sample directory holding the seven dataset files
    #[arg(long)]
    sample: PathBuf,
    /// Also render this checkpoint's prediction next to the ground truth
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory for the PNG panels
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fixed flow-color normalization magnitude (default: ground-truth max)
    #[arg(long)]
    max_magnitude: Option<f64>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "synthetic")]
    subset: Subset,
    #[arg(long, default_value = "train")]
    split: Split,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct InspectArgs {
    file: PathBuf,
}

enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
        Err(CliError::Runtime(err)) => {
            eprintln!("error: {err:#}");
            std::process::exit(1);
        }
    }
}

fn default_out() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Loads a TOML config document, or defaults when no path is given.
fn load_config<T: serde::de::DeserializeOwned + Default>(
    path: Option<&Path>,
    what: &str,
) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read {what} config {}: {e}", p.display())))?;
            toml::from_str(&text)
                .map_err(|e| usage(format!("malformed {what} config {}: {e}", p.display())))
        }
    }
}

fn print_config<T: serde::Serialize>(config: &T) -> Result<(), CliError> {
    let text = toml::to_string_pretty(config)
        .map_err(|e| CliError::Runtime(anyhow::anyhow!("config serialization: {e}")))?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Reconstruct(args) => cmd_reconstruct(args),
        Command::Visualize(args) => cmd_visualize(args),
        Command::AblateBn(args) => cmd_ablate(args),
        Command::Inspect(args) => cmd_inspect(args),
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let config: SceneConfig = load_config(args.config.as_deref(), "scene")?;
    if args.print_config {
        return print_config(&config);
    }
    let out = args.out.unwrap_or_else(default_out);
    let index = generate_dataset(&config, args.count, args.seed, &out, args.split)
        .context("dataset generation failed")?;
    println!(
        "generated {} sample(s) under {} ({} excluded)",
        index.len(),
        out.display(),
        index.diagnostics.len()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut config: TrainConfig = load_config(args.config.as_deref(), "train")?;
    if let Some(steps) = args.max_steps {
        config.max_steps = steps;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if args.print_config {
        return print_config(&config);
    }
    let data = args
        .data
        .ok_or_else(|| usage("--data <dataset root> is required"))?;
    if !data.is_dir() {
        return Err(usage(format!("dataset root {} does not exist", data.display())));
    }
    config.validate().map_err(|e| usage(e.to_string()))?;

    let index = build_index(&data, args.split, args.subset).context("indexing dataset")?;
    if index.is_empty() {
        return Err(usage(format!(
            "no samples under {}/{}/{}",
            data.display(),
            args.subset,
            args.split
        )));
    }
    let set = load_training_set(&index).context("loading samples")?;
    let out = args.out.unwrap_or_else(|| default_out().join("run"));
    let state = train(&config, &set, Some(&out)).context("training failed")?;
    let last = state.history.last().expect("max_steps >= 1 leaves a record");
    println!(
        "trained {} step(s); final joint {:.4} (epe {:.4}) -> {}",
        state.step,
        last.loss.joint,
        last.loss.epe,
        out.display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    if !args.checkpoint.is_file() {
        return Err(usage(format!(
            "checkpoint {} does not exist",
            args.checkpoint.display()
        )));
    }
    let (spec, step, params) =
        load_generator_checkpoint(&args.checkpoint, None).context("loading checkpoint")?;
    let index = build_index(&args.data, args.split, args.subset).context("indexing dataset")?;
    let tag = args
        .tag
        .unwrap_or_else(|| format!("generator@step{step}"));
    let report = evaluate(&spec, &params, &index, &tag).context("evaluation failed")?;
    print!("{}", report.render_table());
    if let Some(out) = args.out {
        std::fs::write(
            &out,
            serde_json::to_string_pretty(&report).expect("report serializes"),
        )
        .with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

/// Builds a SampleRecord from a bare sample directory.
fn sample_record_from_dir(dir: &Path) -> Result<SampleRecord, CliError> {
    if !dir.is_dir() {
        return Err(usage(format!("sample directory {} not found", dir.display())));
    }
    let file = |name: &str| dir.join(name);
    let flow = if file("flow.flo").is_file() {
        file("flow.flo")
    } else if file("flow.pfm").is_file() {
        file("flow.pfm")
    } else {
        return Err(usage(format!(
            "{} holds neither flow.flo nor flow.pfm",
            dir.display()
        )));
    };
    for name in [
        "left_t.png",
        "left_t1.png",
        "right_t.png",
        "right_t1.png",
        "disp_t.pfm",
        "disp_t1.pfm",
    ] {
        if !file(name).is_file() {
            return Err(usage(format!("{} is missing {name}", dir.display())));
        }
    }
    Ok(SampleRecord {
        id: dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "sample".into()),
        left_t: file("left_t.png"),
        left_t1: file("left_t1.png"),
        right_t: file("right_t.png"),
        right_t1: file("right_t1.png"),
        flow,
        disp_t: file("disp_t.pfm"),
        disp_t1: file("disp_t1.pfm"),
    })
}

fn predict_field(
    checkpoint: &Path,
    quad: &sceneflow::StereoQuad,
) -> Result<SceneFlowField, CliError> {
    let (spec, _, params) =
        load_generator_checkpoint(checkpoint, None).context("loading checkpoint")?;
    let input = Batch::stack(&[&pack_input(quad).0]);
    let out = generator_forward(&spec, &params, &input, Phase::Eval)
        .context("generator forward pass")?;
    Ok(unpack_target(&TargetTensor(out.extract(0))).context("prediction has invalid values")?)
}

fn cmd_reconstruct(args: ReconstructArgs) -> Result<(), CliError> {
    let record = sample_record_from_dir(&args.sample)?;
    let (quad, gt, _) = load_sample(&record).context("loading sample")?;
    let field = match &args.checkpoint {
        Some(ckpt) => predict_field(ckpt, &quad)?,
        None => gt,
    };
    let rig = CameraRig::new(
        args.focal_length,
        (
            args.cx.unwrap_or((field.width() as f64 - 1.0) / 2.0),
            args.cy.unwrap_or((field.height() as f64 - 1.0) / 2.0),
        ),
        args.baseline,
    )
    .map_err(|e| usage(e.to_string()))?;

    let cloud = reconstruct_point_flow(&field, &rig);
    let stats = projection_consistency_check(&field, &rig);
    println!(
        "reconstructed {} of {} pixels; reprojection residual mean {:.3e} px, max {:.3e} px",
        cloud.valid_count(),
        field.height() * field.width(),
        stats.mean,
        stats.max
    );
    let out = args
        .out
        .unwrap_or_else(|| default_out().join(format!("{}.xyz", record.id)));
    std::fs::write(&out, cloud.export_rows())
        .with_context(|| format!("writing {}", out.display()))?;
    println!("point flow -> {}", out.display());
    Ok(())
}

fn cmd_visualize(args: VisualizeArgs) -> Result<(), CliError> {
    let record = sample_record_from_dir(&args.sample)?;
    let (quad, gt, _) = load_sample(&record).context("loading sample")?;
    let out = args.out.unwrap_or_else(|| default_out().join("panels"));
    std::fs::create_dir_all(&out)
        .with_context(|| format!("creating {}", out.display()))?;

    // Shared normalization keeps ground truth and prediction comparable.
    let max_mag = args.max_magnitude.or_else(|| {
        let (u, v) = (gt.flow.u.channel(0), gt.flow.v.channel(0));
        Some(
            u.iter()
                .zip(v)
                .map(|(a, b)| a.hypot(*b))
                .fold(0.0f64, f64::max),
        )
    });

    save_flow(&out.join("gt_flow.png"), &gt.flow, max_mag).context("rendering flow")?;
    save_disparity(&out.join("gt_disp_t.png"), &gt.disparities.d_t)
        .context("rendering disparity")?;
    save_disparity(&out.join("gt_disp_t1.png"), &gt.disparities.d_t1)
        .context("rendering disparity")?;

    if let Some(ckpt) = &args.checkpoint {
        let pred = predict_field(ckpt, &quad)?;
        save_flow(&out.join("pred_flow.png"), &pred.flow, max_mag).context("rendering flow")?;
        save_disparity(&out.join("pred_disp_t.png"), &pred.disparities.d_t)
            .context("rendering disparity")?;
        save_disparity(&out.join("pred_disp_t1.png"), &pred.disparities.d_t1)
            .context("rendering disparity")?;
    }
    println!("panels -> {}", out.display());
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<(), CliError> {
    let mut config: TrainConfig = load_config(args.config.as_deref(), "train")?;
    if let Some(steps) = args.max_steps {
        config.max_steps = steps;
    }
    if args.print_config {
        return print_config(&config);
    }
    let data = args
        .data
        .ok_or_else(|| usage("--data <dataset root> is required"))?;
    config.validate().map_err(|e| usage(e.to_string()))?;
    let index = build_index(&data, args.split, args.subset).context("indexing dataset")?;
    let set = load_training_set(&index).context("loading samples")?;
    let curves = run_bn_ablation(&config, &set).context("ablation run failed")?;

    let out = args.out.unwrap_or_else(|| default_out().join("ablation"));
    std::fs::create_dir_all(&out)
        .with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(
        out.join("curves.json"),
        serde_json::to_string_pretty(&curves).expect("curves serialize"),
    )
    .context("writing curves.json")?;
    let plot = plot_curves(
        &[
            ("with batchnorm", curves.with_batchnorm.as_slice()),
            ("without batchnorm", curves.without_batchnorm.as_slice()),
        ],
        800,
        500,
    );
    plot.save(out.join("curves.png")).context("writing curves.png")?;
    println!(
        "ablation curves ({} steps each) -> {}",
        curves.with_batchnorm.len(),
        out.display()
    );
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<(), CliError> {
    if !args.file.is_file() {
        return Err(usage(format!("{} does not exist", args.file.display())));
    }
    let bytes = std::fs::read(&args.file)
        .with_context(|| format!("reading {}", args.file.display()))?;
    let ext = args
        .file
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "pfm" => {
            let decoded = read_pfm(&bytes).context("decoding PFM")?;
            let img = &decoded.image;
            let (lo, hi) = img.min_max();
            let signed_scale = if decoded.meta.little_endian {
                -decoded.meta.scale
            } else {
                decoded.meta.scale
            };
            println!(
                "pfm: dims {}x{} ({} channel(s)), scale {}, min {}, max {}, non-finite {}",
                img.width(),
                img.height(),
                img.channels(),
                signed_scale,
                lo,
                hi,
                decoded.meta.non_finite_count
            );
        }
        "flo" => {
            let flow = read_flo(&bytes).context("decoding .flo")?;
            let (ulo, uhi) = flow.u.min_max();
            let (vlo, vhi) = flow.v.min_max();
            println!(
                "flo: dims {}x{}, u in [{}, {}], v in [{}, {}]",
                flow.width(),
                flow.height(),
                ulo,
                uhi,
                vlo,
                vhi
            );
        }
        "ckpt" => {
            let summary = describe_checkpoint(&bytes).context("decoding checkpoint")?;
            print!("{summary}");
        }
        other => {
            return Err(usage(format!(
                "unsupported file extension '{other}' (expected pfm, flo or ckpt)"
            )));
        }
    }
    Ok(())
}
