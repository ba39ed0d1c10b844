//! Command-line surface for the layered-diffusion toolkit: dataset
//! generation, training, instance erasing, offline recomposition,
//! evaluation, and built-in self verification.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 verification
//! failure. All logging is one JSON object per line on standard output.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use layerdiff::composer::ComposeError;
use layerdiff::config::Config;
use layerdiff::diffusion::generate_layers;
use layerdiff::metrics::{eval_report, MetricsError};
use layerdiff::scenes::{
    generate_scene, read_dataset, read_mask_png, read_rgb_png, write_dataset, write_mask_png,
    write_rgb_png, DatasetError, MaskSet,
};
use layerdiff::selfcheck::{run_selfcheck, Fault};
use layerdiff::tensor::DRng;
use layerdiff::training::checkpoint::{load_checkpoint, save_checkpoint};
use layerdiff::training::{Stage, Trainer};

#[derive(Parser)]
#[command(name = "layerdiff", version, about = "Layered diffusion toolkit for multi-instance erasing", disable_help_subcommand = true)]
struct Cli {
    /// Print the default configuration as JSON and exit.
    #[arg(long, global = true)]
    dump_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural stick-figure scene dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        max_instances: usize,
    },
    /// Train the dual-branch denoiser on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON config file; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory receiving checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Total number of optimizer steps (including any resumed steps).
        #[arg(long)]
        steps: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Resume from an existing checkpoint (its config wins).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate all layers for one dataset sample and erase instances.
    Erase {
        #[arg(long)]
        ckpt: PathBuf,
        /// Sample as `<dataset-dir>/<index>`, e.g. `data/3`.
        #[arg(long)]
        sample: PathBuf,
        /// Comma-separated 1-based instance indices, or `all`, or `none`.
        #[arg(long, default_value = "none")]
        remove: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Recompose a saved layer directory with a removal set.
    Compose {
        #[arg(long)]
        layers_dir: PathBuf,
        #[arg(long, default_value = "none")]
        remove: String,
        /// Output PNG path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare predicted images against references and write a JSON report.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        /// Output JSON report path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in verification suites.
    Selfcheck {
        /// Inject a deliberate defect (for testing the suites themselves).
        #[arg(long, hide = true)]
        inject_fault: Vec<String>,
    },
}

/// An error carrying its process exit code.
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(msg: impl Into<String>) -> CliError {
        CliError { code: 1, message: msg.into() }
    }
    fn data(msg: impl Into<String>) -> CliError {
        CliError { code: 2, message: msg.into() }
    }
    fn verify(msg: impl Into<String>) -> CliError {
        CliError { code: 3, message: msg.into() }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> CliError {
        CliError::data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::data(e.to_string())
    }
}

impl From<ComposeError> for CliError {
    fn from(e: ComposeError) -> CliError {
        CliError::data(e.to_string())
    }
}

fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
        Err(e) => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    if cli.dump_config {
        println!("{}", Config::default().to_json());
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("error: a subcommand is required (see --help)");
        return ExitCode::from(1);
    };
    match run(command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData { out, count, size, seed, max_instances } => {
            cmd_gen_data(&out, count, size, seed, max_instances)
        }
        Command::Train { data, config, out, steps, seed, resume } => {
            cmd_train(&data, config.as_deref(), &out, steps, seed, resume.as_deref())
        }
        Command::Erase { ckpt, sample, remove, out, seed } => {
            cmd_erase(&ckpt, &sample, &remove, &out, seed)
        }
        Command::Compose { layers_dir, remove, out } => cmd_compose(&layers_dir, &remove, &out),
        Command::Eval { pred, gt, masks, out } => cmd_eval(&pred, &gt, &masks, &out),
        Command::Selfcheck { inject_fault } => cmd_selfcheck(&inject_fault),
    }
}

fn cmd_gen_data(
    out: &Path,
    count: usize,
    size: usize,
    seed: u64,
    max_instances: usize,
) -> Result<(), CliError> {
    let mut cfg = Config::default();
    cfg.model.image_size = size;
    cfg.data.size = size;
    cfg.data.max_instances = max_instances;
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
    if count == 0 {
        return Err(CliError::usage("--count must be at least 1"));
    }
    let root = DRng::new(seed);
    let samples: Vec<_> = (0..count)
        .map(|i| generate_scene(&mut root.split(i as u64), &cfg.data))
        .collect();
    write_dataset(out, &samples, &cfg, seed)?;
    emit(json!({"event": "gen_data", "out": out.display().to_string(), "count": count, "size": size, "seed": seed}));
    Ok(())
}

fn cmd_train(
    data: &Path,
    config: Option<&Path>,
    out: &Path,
    steps: u64,
    seed: u64,
    resume: Option<&Path>,
) -> Result<(), CliError> {
    let (manifest, samples) = read_dataset(data)?;
    let mut trainer = match resume {
        Some(path) => {
            if config.is_some() {
                emit(json!({"event": "note", "message": "--config ignored: resuming uses the checkpoint's config"}));
            }
            load_checkpoint(path).map_err(|e| CliError::data(e.to_string()))?
        }
        None => {
            let cfg = match config {
                Some(path) => Config::from_json(&std::fs::read_to_string(path)?)
                    .map_err(|e| CliError::usage(e.to_string()))?,
                None => manifest.config.clone(),
            };
            Trainer::new(cfg, seed)
        }
    };
    if trainer.cfg.data.size != manifest.config.data.size
        || trainer.cfg.model.image_size != manifest.config.data.size
    {
        return Err(CliError::data(format!(
            "dataset images are {0}x{0} but the model expects {1}x{1}",
            manifest.config.data.size, trainer.cfg.model.image_size
        )));
    }
    std::fs::create_dir_all(out)?;

    let n = samples.len();
    let batch_size = trainer.cfg.training.batch_size.max(1);
    let interval = trainer.cfg.training.checkpoint_interval.max(1) as u64;
    let mut last_stage: Option<Stage> = None;
    while trainer.step_index() < steps {
        let step = trainer.step_index();
        let batch: Vec<&_> = (0..batch_size)
            .map(|i| &samples[(step as usize * batch_size + i) % n])
            .collect();
        let report = trainer
            .train_step(&batch)
            .map_err(|e| CliError::data(e.to_string()))?;
        if last_stage != Some(report.stage) {
            emit(json!({"event": "stage_transition", "step": report.step, "stage": report.stage}));
            last_stage = Some(report.stage);
        }
        emit(serde_json::to_value(&report).expect("step report serializes"));
        let done = trainer.step_index();
        if done % interval == 0 {
            let path = out.join(format!("ckpt_{done:06}.bin"));
            save_checkpoint(&trainer, &path).map_err(|e| CliError::data(e.to_string()))?;
            emit(json!({"event": "checkpoint", "step": done, "path": path.display().to_string()}));
        }
    }
    let final_path = out.join("ckpt_final.bin");
    save_checkpoint(&trainer, &final_path).map_err(|e| CliError::data(e.to_string()))?;
    emit(json!({"event": "checkpoint", "step": trainer.step_index(), "path": final_path.display().to_string(), "final": true}));
    Ok(())
}

/// Parse `--remove`: `none`/empty, `all`, or comma-separated 1-based
/// indices. Returns 0-based indices.
fn parse_remove(spec: &str, n: usize) -> Result<Vec<usize>, CliError> {
    match spec.trim() {
        "" | "none" => Ok(Vec::new()),
        "all" => Ok((0..n).collect()),
        list => list
            .split(',')
            .map(|tok| {
                let idx: usize = tok
                    .trim()
                    .parse()
                    .map_err(|_| CliError::usage(format!("invalid removal index `{tok}`")))?;
                if idx == 0 || idx > n {
                    return Err(CliError::data(format!(
                        "removal index {idx} out of range 1..={n}"
                    )));
                }
                Ok(idx - 1)
            })
            .collect(),
    }
}

/// `<dataset-dir>/<index>` -> (dir, index)
fn parse_sample_ref(sample: &Path) -> Result<(&Path, usize), CliError> {
    let dir = sample
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .ok_or_else(|| CliError::usage("--sample must be <dataset-dir>/<index>"))?;
    let idx = sample
        .file_name()
        .and_then(|s| s.to_str())
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| CliError::usage("--sample must end in a numeric sample index"))?;
    Ok((dir, idx))
}

fn cmd_erase(
    ckpt: &Path,
    sample: &Path,
    remove: &str,
    out: &Path,
    seed: u64,
) -> Result<(), CliError> {
    let (data_dir, index) = parse_sample_ref(sample)?;
    let (manifest, samples) = read_dataset(data_dir)?;
    if index >= samples.len() {
        return Err(CliError::data(format!(
            "sample index {index} out of range (dataset has {})",
            samples.len()
        )));
    }
    let scene = &samples[index];
    let trainer = load_checkpoint(ckpt).map_err(|e| CliError::data(e.to_string()))?;
    if trainer.cfg.model.image_size != manifest.config.data.size {
        return Err(CliError::data(format!(
            "dataset images are {0}x{0} but the model expects {1}x{1}",
            manifest.config.data.size, trainer.cfg.model.image_size
        )));
    }
    let removal = parse_remove(remove, scene.instances())?;

    let (fg_conds, bg_cond) = trainer.conditions_for(scene);
    let mut rng = DRng::new(seed);
    let layers = generate_layers(
        &trainer.model,
        &trainer.store,
        &trainer.sched,
        trainer.cfg.diffusion.ddim_steps,
        &scene.masks,
        &fg_conds,
        &bg_cond,
        &mut rng,
    )
    .map_err(|e| CliError::data(e.to_string()))?;

    std::fs::create_dir_all(out)?;
    write_layer_set(out, &layers.background, &layers.foregrounds, &layers.masks)?;
    let full = layers.compose(&[])?;
    write_rgb_png(&out.join("composite.png"), &full)?;
    let result = layers.compose(&removal)?;
    write_rgb_png(&out.join("result.png"), &result)?;
    emit(json!({
        "event": "erase",
        "sample": index,
        "removed": removal.iter().map(|k| k + 1).collect::<Vec<_>>(),
        "layers": scene.instances() + 1,
        "out": out.display().to_string(),
    }));
    Ok(())
}

#[derive(serde::Serialize, serde::Deserialize)]
struct DepthFile {
    depth_order: Vec<usize>,
}

fn write_layer_set(
    dir: &Path,
    background: &layerdiff::Tensor,
    foregrounds: &[layerdiff::Tensor],
    masks: &MaskSet,
) -> Result<(), CliError> {
    write_rgb_png(&dir.join("background.png"), background)?;
    for (k, (layer, mask)) in foregrounds.iter().zip(&masks.masks).enumerate() {
        write_rgb_png(&dir.join(format!("layer_{k}.png")), layer)?;
        write_mask_png(&dir.join(format!("mask_{k}.png")), mask)?;
    }
    let depth = DepthFile { depth_order: masks.depth_order.clone() };
    std::fs::write(
        dir.join("depth.json"),
        serde_json::to_string_pretty(&depth).expect("depth order serializes"),
    )?;
    Ok(())
}

fn cmd_compose(layers_dir: &Path, remove: &str, out: &Path) -> Result<(), CliError> {
    let depth_path = layers_dir.join("depth.json");
    if !depth_path.exists() {
        return Err(CliError::data(format!("missing layer index {}", depth_path.display())));
    }
    let depth: DepthFile = serde_json::from_str(&std::fs::read_to_string(&depth_path)?)
        .map_err(|e| CliError::data(format!("bad depth.json: {e}")))?;
    let n = depth.depth_order.len();
    let background = read_rgb_png(&layers_dir.join("background.png"))?;
    let mut layers = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for k in 0..n {
        layers.push(read_rgb_png(&layers_dir.join(format!("layer_{k}.png")))?);
        masks.push(read_mask_png(&layers_dir.join(format!("mask_{k}.png")))?);
    }
    let masks = MaskSet::new(masks, depth.depth_order);
    let removal = parse_remove(remove, n)?;
    let composed = layerdiff::composer::compose(&background, &layers, &masks, &removal)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_rgb_png(out, &composed)?;
    emit(json!({
        "event": "compose",
        "removed": removal.iter().map(|k| k + 1).collect::<Vec<_>>(),
        "out": out.display().to_string(),
    }));
    Ok(())
}

fn cmd_eval(pred: &Path, gt: &Path, masks: &Path, out: &Path) -> Result<(), CliError> {
    let report = eval_report(pred, gt, masks).map_err(|e| match e {
        MetricsError::Io(e) => CliError::data(e.to_string()),
        other => CliError::data(other.to_string()),
    })?;
    std::fs::write(out, serde_json::to_string_pretty(&report).expect("report serializes"))?;
    emit(json!({
        "event": "eval",
        "samples": report.per_sample.len(),
        "aggregate": serde_json::to_value(&report.aggregate).expect("aggregate serializes"),
        "out": out.display().to_string(),
    }));
    Ok(())
}

fn cmd_selfcheck(inject: &[String]) -> Result<(), CliError> {
    let faults: Result<Vec<Fault>, CliError> = inject
        .iter()
        .map(|s| {
            Fault::parse(s).ok_or_else(|| CliError::usage(format!("unknown fault `{s}`")))
        })
        .collect();
    let report = run_selfcheck(&faults?);
    for suite in &report.suites {
        emit(serde_json::to_value(suite).expect("suite result serializes"));
    }
    emit(json!({"event": "selfcheck", "passed": report.passed, "suites": report.suites.len()}));
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .suites
            .iter()
            .filter(|s| !s.passed)
            .map(|s| s.name.as_str())
            .collect();
        Err(CliError::verify(format!("self-check failed: {}", failed.join(", "))))
    }
}
