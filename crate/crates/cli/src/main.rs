use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crowdcast_core::checkpoint::Archive;
use crowdcast_core::config::TrainConfig;
use crowdcast_core::data::{
    leave_one_out_split, load_scene_dir, normalize_window, synth_generate_with, window_scene, write_scene, SynthConfig,
    SynthMix, TrajectoryWindow,
};
use crowdcast_core::eval::{evaluate, summarize, ConstantVelocity, EvalOptions, FoldSummary, GroundTruthEcho, Predictor};
use crowdcast_core::exec::Execution;
use crowdcast_core::model::{HyperSttn, PreparedWindow};
use crowdcast_core::report::{metrics_jsonl, summary_csv, RunReport};
use crowdcast_core::rng::stream;
use crowdcast_core::tensor::Tape;
use crowdcast_core::train::{train, EpochRecord, TrainError};

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

const CONFIG_SIDECAR: &str = "config.txt";

#[derive(Parser)]
#[command(name = "crowdcast", version, about = "Multi-agent crowd trajectory forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on every scene in a directory, or one model per held-out scene.
    Train(TrainArgs),
    /// Best-of-K evaluation, one fold per scene file.
    Eval(EvalArgs),
    /// Write synthetic scenes in the frame-file format.
    Synth(SynthArgs),
    /// Dump attention maps and hypergraphs for one window.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Train one model per fold, holding each scene out and scoring it.
    #[arg(long)]
    leave_one_out: bool,
    /// Run windows one at a time instead of on the thread pool.
    #[arg(long)]
    sequential: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictorKind {
    Model,
    ConstantVelocity,
    GroundTruth,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to config.txt beside the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write metrics.jsonl and summary.csv here instead of stdout/stderr.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "model")]
    predictor: PredictorKind,
    #[arg(long)]
    sequential: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum MixArg {
    Interacting,
    ConstantVelocity,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    scenes: usize,
    #[arg(long, default_value_t = 3)]
    min_agents: usize,
    #[arg(long, default_value_t = 8)]
    max_agents: usize,
    #[arg(long, default_value_t = 40)]
    frames: usize,
    #[arg(long, value_enum, default_value = "interacting")]
    mix: MixArg,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene directory; defaults to one synthetic scene drawn from --seed.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    window: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    dump_attention: bool,
    #[arg(long)]
    dump_hypergraphs: bool,
}

fn exec(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn scene_windows(dir: &Path, cfg: &TrainConfig) -> CliResult<Vec<(String, Vec<TrajectoryWindow>)>> {
    Ok(load_scene_dir(dir)?
        .into_iter()
        .map(|(name, scene)| {
            let w = window_scene(&scene, cfg.model.horizon, cfg.window_stride);
            (name, w)
        })
        .collect())
}

fn config_for(checkpoint: &Path, explicit: Option<&Path>) -> CliResult<TrainConfig> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_SIDECAR),
    };
    TrainConfig::load(&path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn load_model(checkpoint: &Path, cfg: &TrainConfig) -> CliResult<HyperSttn> {
    let mut model = HyperSttn::new(&cfg.model, cfg.seed)?;
    Archive::load(checkpoint)?.load_into(&mut model.params)?;
    Ok(model)
}

fn log_epoch(r: &EpochRecord) {
    let val = r.val_total.map_or(String::new(), |v| format!(" val {v:.4}"));
    eprintln!(
        "epoch {:>4} lr {:.2e} loss {:.4} (dis {:.4} kl {:.4} ang {:.4} enc {:.4}){val}",
        r.epoch, r.learning_rate, r.total, r.distance, r.kl, r.angle, r.encoder
    );
}

/// Trains on `windows` and writes `model.ckpt` (plus `best.ckpt` when a
/// validation split is configured) into `out`. Returns the reloaded model so
/// evaluation sees exactly the stored parameters.
fn train_into(
    cfg: &TrainConfig,
    windows: &[TrajectoryWindow],
    out: &Path,
    exec: Execution,
) -> CliResult<(HyperSttn, Vec<EpochRecord>, Option<usize>)> {
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_SIDECAR), cfg.to_text())?;
    let outcome = match train(cfg, windows, exec, &mut log_epoch) {
        Ok(o) => o,
        Err(TrainError::Diverged { epoch, component, last_good }) => {
            let path = out.join("last_good.ckpt");
            Archive::from_params(&last_good.params).save(&path)?;
            return Err(format!(
                "training diverged at epoch {epoch} (non-finite {component}); last good parameters in {}",
                path.display()
            )
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    let model_path = out.join("model.ckpt");
    Archive::from_params(&outcome.model.params).save(&model_path)?;
    let best_epoch = match &outcome.best {
        Some((epoch, params)) => {
            Archive::from_params(params).save(&out.join("best.ckpt"))?;
            Some(*epoch)
        }
        None => None,
    };
    let model = load_model(&model_path, cfg)?;
    Ok((model, outcome.epochs, best_epoch))
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let cfg = TrainConfig::load(&args.config)?;
    let exec = exec(args.sequential);
    let scenes = scene_windows(&args.data, &cfg)?;
    let start = Instant::now();
    let mut all_epochs = Vec::new();
    let mut folds: Vec<FoldSummary> = Vec::new();
    let mut best = None;

    if args.leave_one_out {
        let names: Vec<String> = scenes.iter().map(|(n, _)| n.clone()).collect();
        let mut jsonl = String::new();
        for fold in leave_one_out_split(&names)? {
            eprintln!("fold {}: training on {}", fold.test, fold.train.join(", "));
            let train_windows: Vec<TrajectoryWindow> = scenes
                .iter()
                .filter(|(n, _)| fold.train.contains(n))
                .flat_map(|(_, w)| w.iter().cloned())
                .collect();
            let fold_dir = args.out.join(&fold.test);
            let (model, epochs, _) = train_into(&cfg, &train_windows, &fold_dir, exec)?;
            all_epochs.extend(epochs);
            let test = &scenes.iter().find(|(n, _)| *n == fold.test).expect("fold scene exists").1;
            let opts = EvalOptions {
                k: cfg.k_samples,
                seed: cfg.seed,
                selection: cfg.min_selection,
                exec,
            };
            let metrics = evaluate(&model, test, &fold.test, opts)?;
            jsonl.push_str(&metrics_jsonl(&metrics, cfg.k_samples));
            folds.push(summarize(&fold.test, &metrics));
        }
        fs::write(args.out.join("metrics.jsonl"), jsonl)?;
        fs::write(args.out.join("summary.csv"), summary_csv(&folds, cfg.k_samples))?;
    } else {
        let windows: Vec<TrajectoryWindow> = scenes.into_iter().flat_map(|(_, w)| w).collect();
        let (_, epochs, best_epoch) = train_into(&cfg, &windows, &args.out, exec)?;
        all_epochs = epochs;
        best = best_epoch;
    }

    let report = RunReport {
        config: cfg.to_text(),
        epochs: all_epochs,
        folds,
        best_epoch: best,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    fs::write(args.out.join("report.json"), report.to_json())?;
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    let cfg = config_for(&args.checkpoint, args.config.as_deref())?;
    let model;
    let predictor: &dyn Predictor = match args.predictor {
        PredictorKind::Model => {
            model = load_model(&args.checkpoint, &cfg)?;
            &model
        }
        PredictorKind::ConstantVelocity => &ConstantVelocity,
        PredictorKind::GroundTruth => &GroundTruthEcho,
    };
    let opts = EvalOptions {
        k: args.k,
        seed: args.seed,
        selection: cfg.min_selection,
        exec: exec(args.sequential),
    };
    let mut jsonl = String::new();
    let mut folds = Vec::new();
    for (name, windows) in scene_windows(&args.data, &cfg)? {
        let metrics = evaluate(predictor, &windows, &name, opts)?;
        jsonl.push_str(&metrics_jsonl(&metrics, args.k));
        folds.push(summarize(&name, &metrics));
    }
    let csv = summary_csv(&folds, args.k);
    match args.out {
        Some(dir) => {
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("metrics.jsonl"), jsonl)?;
            fs::write(dir.join("summary.csv"), csv)?;
        }
        None => {
            print!("{jsonl}");
            eprint!("{csv}");
        }
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> CliResult<()> {
    let cfg = SynthConfig {
        seed: args.seed,
        n_scenes: args.scenes,
        agents_range: (args.min_agents, args.max_agents),
        n_frames: args.frames,
        mix: match args.mix {
            MixArg::Interacting => SynthMix::Interacting,
            MixArg::ConstantVelocity => SynthMix::ConstantVelocity,
        },
        ..SynthConfig::default()
    };
    fs::create_dir_all(&args.out)?;
    for (i, s) in synth_generate_with(&cfg)?.iter().enumerate() {
        write_scene(&s.scene, &args.out.join(format!("scene_{i:03}.txt")))?;
    }
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> CliResult<()> {
    let cfg = config_for(&args.checkpoint, args.config.as_deref())?;
    let model = load_model(&args.checkpoint, &cfg)?;
    if !args.dump_attention && !args.dump_hypergraphs {
        let mut total = 0;
        for (name, t) in model.params.iter() {
            println!("{name} {:?}", t.shape());
            total += t.data().len();
        }
        println!("{total} parameters");
        return Ok(());
    }

    let windows: Vec<TrajectoryWindow> = match &args.data {
        Some(dir) => scene_windows(dir, &cfg)?.into_iter().flat_map(|(_, w)| w).collect(),
        None => {
            let synth = SynthConfig { seed: args.seed, n_scenes: 1, ..SynthConfig::default() };
            let scene = &synth_generate_with(&synth)?[0].scene;
            window_scene(scene, cfg.model.horizon, cfg.window_stride)
        }
    };
    let window = windows
        .get(args.window)
        .ok_or_else(|| format!("window {} out of range ({} windows)", args.window, windows.len()))?;
    let (w, _) = normalize_window(window);
    let mut tape = Tape::with_probes();
    let mut rng = stream(args.seed, &[args.window as u64]);
    model.sample_on_tape(&mut tape, &PreparedWindow::new(&w), 1, &mut rng)?;
    let probes = tape.take_probes();
    fs::create_dir_all(&args.out)?;

    if args.dump_attention {
        let mut archive = Archive::new();
        for (name, t) in probes.iter().filter(|(n, _)| n.starts_with("attn/")) {
            archive.push(name.clone(), t.clone());
        }
        let path = args.out.join("attention.ckpt");
        archive.save(&path)?;
        eprintln!("{} attention maps -> {}", archive.records.len(), path.display());
    }
    if args.dump_hypergraphs {
        let mut lines = String::new();
        for (name, h) in probes.iter().filter(|(n, _)| n.starts_with("hypergraph/")) {
            let scale: usize = name["hypergraph/".len()..].parse()?;
            let (n, m) = (h.shape()[0], h.shape()[1]);
            let edges: Vec<Vec<usize>> = (0..m)
                .map(|e| (0..n).filter(|&v| h.data()[v * m + e] != 0.0).collect())
                .collect();
            lines.push_str(&json!({ "scale": scale, "edges": edges }).to_string());
            lines.push('\n');
        }
        let path = args.out.join("hypergraphs.jsonl");
        fs::write(&path, lines)?;
        eprintln!("hypergraphs -> {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
