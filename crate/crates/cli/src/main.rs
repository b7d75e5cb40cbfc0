use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use querypose::bench::{default_cases, run_bench, to_csv, to_svg};
use querypose::config::RunConfig;
use querypose::data::{read_dataset, synth_generate, write_dataset, Dataset};
use querypose::eval::{write_instances, Scoring};
use querypose::gradsuite::{gradient_suite, GRAD_TOLERANCE};
use querypose::model::PoseModel;
use querypose::numerics::Checkpoint;
use querypose::pipeline::{evaluate_instances, predict_instances, EvalOptions};
use querypose::train::{prepare_samples, train};

#[derive(Parser)]
#[command(name = "querypose", version, about = "Query-based keypoint regression on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides one config key, e.g. `--set steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into the output directory.
    Synth(Common),
    /// Train on `dataset`, writing metrics.jsonl and checkpoint.qpc.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; writes report.json and predictions.jsonl.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Rank detections by box score alone.
        #[arg(long)]
        no_rescore: bool,
        /// Keypoint score half-width in normalized units.
        #[arg(long)]
        score_a: Option<f64>,
    },
    /// Write predictions.jsonl for every annotated box of a dataset.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck(Common),
    /// Compare sampled and projected attention; writes bench.csv and bench.svg.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Timing repetitions per case.
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
}

fn resolve(common: &Common, extra: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    for raw in &common.overrides {
        let (k, v) = raw.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{raw}`"))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &common.out {
        overrides.push(("out_dir".into(), toml_string(out)));
    }
    for (k, v) in extra {
        if let Some(v) = v {
            overrides.push((k.to_string(), v.clone()));
        }
    }
    Ok(RunConfig::load(common.config.as_deref(), &overrides)?)
}

fn toml_string(p: &Path) -> String {
    format!("{:?}", p.to_string_lossy())
}

fn path_arg(p: &Option<PathBuf>) -> Option<String> {
    p.as_deref().map(toml_string)
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    match p {
        Some(p) => Ok(p),
        None => bail!("`{key}` is not set; pass --{key} or set it in the config"),
    }
}

fn load_dataset(p: &Option<PathBuf>, key: &str) -> Result<Dataset> {
    let dir = required(p, key)?;
    read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))
}

fn load_model(cfg: &RunConfig, data: &Dataset) -> Result<PoseModel> {
    let path = required(&cfg.checkpoint, "checkpoint")?;
    let model = PoseModel::from_checkpoint(&Checkpoint::load(path)?)?;
    if model.keypoints() != data.manifest.keypoints {
        bail!(
            "checkpoint {} predicts {} keypoints but the dataset has {}",
            path.display(),
            model.keypoints(),
            data.manifest.keypoints
        );
    }
    Ok(model)
}

fn eval_options(cfg: &RunConfig, scoring: Scoring) -> EvalOptions {
    EvalOptions { score_a: cfg.score_a, scoring, crop_padding: cfg.crop_padding, pck_alpha: cfg.pck_alpha, ..Default::default() }
}

fn write_predictions(dir: &Path, preds: &[querypose::eval::PoseInstance]) -> Result<PathBuf> {
    let path = dir.join("predictions.jsonl");
    write_instances(fs::File::create(&path)?, preds)?;
    Ok(path)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth(common) => {
            let cfg = resolve(&common, &[])?;
            let synth = cfg.synth();
            let scenes = synth_generate(cfg.seed, cfg.synth_count, &synth)?;
            write_dataset(&cfg.out_dir, &scenes, &synth, cfg.seed)?;
            println!("wrote {} scenes to {}", scenes.len(), cfg.out_dir.display());
        }
        Command::Train { common, dataset } => {
            let cfg = resolve(&common, &[("dataset", path_arg(&dataset))])?;
            let data = load_dataset(&cfg.dataset, "dataset")?;
            let input = (cfg.input_size[0], cfg.input_size[1]);
            let samples = prepare_samples(&data.scenes, input, cfg.crop_padding)?;
            let val = match &cfg.val_dataset {
                Some(dir) => Some(prepare_samples(&read_dataset(dir)?.scenes, input, cfg.crop_padding)?),
                None => None,
            };
            fs::create_dir_all(&cfg.out_dir)?;
            fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml())?;
            let outcome = train(&cfg.model(), &cfg.train(), &samples, val.as_deref(), Some(&cfg.out_dir))?;
            println!(
                "trained {} steps on {} instances: mean L1 {:.3} px, outputs in {}",
                cfg.steps,
                samples.len(),
                outcome.final_l1_px,
                cfg.out_dir.display()
            );
        }
        Command::Eval { common, dataset, checkpoint, no_rescore, score_a } => {
            let extra = [
                ("dataset", path_arg(&dataset)),
                ("checkpoint", path_arg(&checkpoint)),
                ("score_a", score_a.map(|a| a.to_string())),
            ];
            let cfg = resolve(&common, &extra)?;
            let data = load_dataset(&cfg.dataset, "dataset")?;
            let model = load_model(&cfg, &data)?;
            let scoring = if no_rescore { Scoring::BboxOnly } else { Scoring::Rescored };
            let opts = eval_options(&cfg, scoring);
            let preds = predict_instances(&model, &data.scenes, &opts)?;
            let gts: Vec<_> = data.scenes.iter().flat_map(|s| s.instances.iter().cloned()).collect();
            let report = evaluate_instances(&preds, &gts, &opts)?;
            fs::create_dir_all(&cfg.out_dir)?;
            let text = serde_json::to_string_pretty(&report)?;
            fs::write(cfg.out_dir.join("report.json"), &text)?;
            write_predictions(&cfg.out_dir, &preds)?;
            println!("{text}");
        }
        Command::Infer { common, dataset, checkpoint } => {
            let cfg = resolve(&common, &[("dataset", path_arg(&dataset)), ("checkpoint", path_arg(&checkpoint))])?;
            let data = load_dataset(&cfg.dataset, "dataset")?;
            let model = load_model(&cfg, &data)?;
            let preds = predict_instances(&model, &data.scenes, &eval_options(&cfg, Scoring::Rescored))?;
            fs::create_dir_all(&cfg.out_dir)?;
            let path = write_predictions(&cfg.out_dir, &preds)?;
            println!("wrote {} predictions to {}", preds.len(), path.display());
        }
        Command::Gradcheck(common) => {
            let cfg = resolve(&common, &[])?;
            let checks = gradient_suite(cfg.seed)?;
            let mut failed = 0;
            for c in &checks {
                let ok = c.passed();
                failed += (!ok) as usize;
                println!("{} {:<40} {:.3e}", if ok { "ok  " } else { "FAIL" }, c.name, c.max_rel_err);
            }
            println!("{} checks, {failed} failed (tolerance {GRAD_TOLERANCE:e})", checks.len());
            return Ok(failed == 0);
        }
        Command::Bench { common, reps } => {
            let cfg = resolve(&common, &[])?;
            let rows = run_bench(&default_cases(), cfg.seed, reps)?;
            fs::create_dir_all(&cfg.out_dir)?;
            let csv = to_csv(&rows);
            fs::write(cfg.out_dir.join("bench.csv"), &csv)?;
            fs::write(cfg.out_dir.join("bench.svg"), to_svg(&rows))?;
            print!("{csv}");
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
