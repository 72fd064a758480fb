//! `flowsup` command-line interface.
//!
//! Subcommands: `gen-data`, `pretrain`, `finetune`, `eval`, `sweep`, `plot`,
//! and `repro-table1`. Configuration comes from `--config` (JSON); explicit
//! flags override the file, and `FLOWSUP_SEED` overrides the seed unless a
//! `--seed` flag is present. Exit codes: 0 success, 2 configuration error,
//! 3 data error, 4 divergence abort, 1 anything else.

use crate::data::{load_quarantined_gt, Dataset, FlowSample};
use crate::eval::{evaluate, iteration_sweep, line_chart, Series};
use crate::exp::{run_benchmark, write_benchmark_datasets, ExperimentConfig};
use crate::model::{Checkpoint, PassHidden};
use crate::teachers::TeacherKind;
use crate::train::{finetune_semisup, pretrain, RunLog, TrainMode, Trainer};
use crate::{Error, Result};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "flowsup",
    version,
    about = "Desk-scale semi-supervised optical flow training lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct CommonOpts {
    /// JSON experiment configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Experiment seed (overrides config and FLOWSUP_SEED).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the four benchmark dataset splits on disk.
    GenData {
        #[command(flatten)]
        common: CommonOpts,
        /// Overwrite an existing non-empty data directory.
        #[arg(long)]
        force: bool,
    },
    /// Supervised pretraining on the labeled source split.
    Pretrain {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        steps: Option<u64>,
        /// Resume from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Semi-supervised fine-tuning from a pretrained checkpoint.
    Finetune {
        #[command(flatten)]
        common: CommonOpts,
        /// Teacher strategy: fs, self, ema, fixed, unsup, or none.
        #[arg(long)]
        teacher: Option<String>,
        /// Pretrained checkpoint (defaults to <out>/runs/pretrain.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        lambda_ts: Option<f64>,
        #[arg(long)]
        lambda_tu: Option<f64>,
        /// Hidden-state wiring into the supervisor: init, concat, or off.
        #[arg(long)]
        pass_hidden: Option<String>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one dataset split.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        /// source_train, source_val, target_val, or target_train_heldout.
        #[arg(long, default_value = "target_val")]
        split: String,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Evaluate one checkpoint across refinement iteration counts.
    Sweep {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated ascending iteration counts.
        #[arg(long, default_value = "1,2,4,8,12")]
        iters: String,
        #[arg(long, default_value = "target_val")]
        split: String,
    },
    /// Render plots and the summary table from existing run logs.
    Plot {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Run the full six-row strategy comparison in one shot.
    ReproTable1 {
        #[command(flatten)]
        common: CommonOpts,
        /// Comma-separated strategies (default: unsup,self,ema,fixed,fs).
        #[arg(long)]
        strategies: Option<String>,
    },
}

fn load_config(common: &CommonOpts) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Ok(env_seed) = std::env::var("FLOWSUP_SEED") {
        cfg.seed = env_seed
            .parse()
            .map_err(|_| Error::Config(format!("FLOWSUP_SEED is not an integer: {env_seed}")))?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.display().to_string();
    }
    // Training seeds follow the experiment seed unless set explicitly.
    cfg.pretrain.seed = cfg.seed;
    cfg.finetune.seed = cfg.seed.wrapping_add(1);
    cfg.validate()?;
    Ok(cfg)
}

fn data_dir(cfg: &ExperimentConfig) -> PathBuf {
    Path::new(&cfg.out_dir).join("data")
}

fn runs_dir(cfg: &ExperimentConfig) -> PathBuf {
    Path::new(&cfg.out_dir).join("runs")
}

fn load_split(cfg: &ExperimentConfig, split: &str) -> Result<Vec<FlowSample>> {
    let dir = data_dir(cfg).join(split);
    let ds = Dataset::open(&dir)?;
    (0..ds.len()).map(|i| ds.load(i)).collect()
}

/// Target-train samples with quarantined ground truth re-attached; the
/// held-out path used only by evaluation.
fn load_target_train_heldout(cfg: &ExperimentConfig) -> Result<Vec<FlowSample>> {
    let dir = data_dir(cfg).join("target_train");
    let ds = Dataset::open(&dir)?;
    (0..ds.len())
        .map(|i| {
            let mut sample = ds.load(i)?;
            let id = ds.manifest().samples[i].id.clone();
            let (flow, valid) = load_quarantined_gt(&dir, &id)?;
            sample.flow = Some(flow);
            sample.valid = Some(valid);
            Ok(sample)
        })
        .collect()
}

fn cmd_gen_data(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let dir = data_dir(cfg);
    if dir.exists() && dir.read_dir()?.next().is_some() {
        if !force {
            return Err(Error::Data(format!(
                "{} exists and is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(&dir)?;
    let manifests = write_benchmark_datasets(cfg, &dir)?;
    for m in &manifests {
        println!(
            "wrote {:<13} {:>4} samples ({:?})",
            m.name,
            m.samples.len(),
            m.domain
        );
    }
    Ok(())
}

fn cmd_pretrain(cfg: &ExperimentConfig, steps: Option<u64>, resume: Option<&Path>) -> Result<()> {
    let mut train_cfg = cfg.pretrain.clone();
    if let Some(s) = steps {
        train_cfg.steps = s;
    }
    let labeled = load_split(cfg, "source_train")?;
    let source_val = load_split(cfg, "source_val")?;
    let target_val = load_split(cfg, "target_val")?;
    let data = crate::train::TrainData {
        labeled: &labeled,
        unlabeled: &[],
        source_val: &source_val,
        target_val: &target_val,
    };
    let runs = runs_dir(cfg);
    let ckpt_path = runs.join("pretrain.ckpt");
    let mut log = RunLog::create(&runs.join("pretrain.jsonl"))?;
    match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let mut trainer =
                Trainer::from_checkpoint(TrainMode::Pretrain, train_cfg.clone(), cfg.model, &ckpt)?;
            trainer.run(&data, &mut log, train_cfg.steps)?;
            trainer.checkpoint().save(&ckpt_path)?;
        }
        None => {
            pretrain(&data, &train_cfg, &cfg.model, &mut log, Some(&ckpt_path))?;
        }
    }
    println!("pretrain done -> {}", ckpt_path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_finetune(
    cfg: &ExperimentConfig,
    teacher: Option<&str>,
    checkpoint: Option<&Path>,
    steps: Option<u64>,
    alpha: Option<f64>,
    lambda_ts: Option<f64>,
    lambda_tu: Option<f64>,
    pass_hidden: Option<&str>,
    resume: Option<&Path>,
) -> Result<()> {
    let mut train_cfg = cfg.finetune.clone();
    let mut model_cfg = cfg.model;
    if let Some(t) = teacher {
        train_cfg.teacher = t.parse()?;
    }
    if let Some(s) = steps {
        train_cfg.steps = s;
    }
    if let Some(a) = alpha {
        train_cfg.weights.alpha = a;
    }
    if let Some(l) = lambda_ts {
        train_cfg.weights.lambda_ts = l;
    }
    if let Some(l) = lambda_tu {
        train_cfg.weights.lambda_tu = l;
    }
    if let Some(ph) = pass_hidden {
        model_cfg.pass_hidden = match ph {
            "init" => PassHidden::Init,
            "concat" => PassHidden::Concat,
            "off" => PassHidden::Off,
            other => {
                return Err(Error::Config(format!(
                    "unknown pass-hidden mode '{other}' (expected init|concat|off)"
                )))
            }
        };
    }

    let labeled = load_split(cfg, "source_train")?;
    let unlabeled = load_split(cfg, "target_train")?;
    let source_val = load_split(cfg, "source_val")?;
    let target_val = load_split(cfg, "target_val")?;
    let data = crate::train::TrainData {
        labeled: &labeled,
        unlabeled: &unlabeled,
        source_val: &source_val,
        target_val: &target_val,
    };

    let runs = runs_dir(cfg);
    let name = format!("finetune_{}", train_cfg.teacher);
    let ckpt_out = runs.join(format!("{name}.ckpt"));
    let mut log = RunLog::create(&runs.join(format!("{name}.jsonl")))?;
    let diverged = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let mut trainer =
                Trainer::from_checkpoint(TrainMode::Finetune, train_cfg.clone(), model_cfg, &ckpt)?;
            let diverged = trainer.run(&data, &mut log, train_cfg.steps)?;
            trainer.checkpoint().save(&ckpt_out)?;
            diverged
        }
        None => {
            let ckpt_path = checkpoint
                .map(Path::to_path_buf)
                .unwrap_or_else(|| runs.join("pretrain.ckpt"));
            let pretrained = Checkpoint::load(&ckpt_path)?.student;
            let outcome = finetune_semisup(
                pretrained,
                &data,
                &train_cfg,
                &model_cfg,
                &mut log,
                Some(&ckpt_out),
            )?;
            outcome.diverged
        }
    };
    println!("finetune ({}) done -> {}", train_cfg.teacher, ckpt_out.display());
    if let Some(step) = diverged {
        return Err(Error::Diverged { step });
    }
    Ok(())
}

fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, split: &str, iters: Option<usize>) -> Result<()> {
    let samples = match split {
        "target_train_heldout" => load_target_train_heldout(cfg)?,
        "source_train" | "source_val" | "target_val" => load_split(cfg, split)?,
        other => {
            return Err(Error::Config(format!(
                "unknown split '{other}' (expected source_train|source_val|target_val|target_train_heldout)"
            )))
        }
    };
    let ckpt = Checkpoint::load(checkpoint)?;
    let iters = iters.unwrap_or(cfg.finetune.iters.n_student);
    let report = evaluate(&ckpt.student, &cfg.model, &samples, iters, split, "student", ckpt.step)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_sweep(cfg: &ExperimentConfig, checkpoint: &Path, iters: &str, split: &str) -> Result<()> {
    let counts: Vec<usize> = iters
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad iteration count '{s}'")))
        })
        .collect::<Result<_>>()?;
    let samples = load_split(cfg, split)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let curve = iteration_sweep(&ckpt.student, &cfg.model, &samples, &counts, ckpt.step)?;

    let out = Path::new(&cfg.out_dir).join("plots");
    std::fs::create_dir_all(&out)?;
    let series = vec![Series {
        name: "student".into(),
        points: curve.iter().map(|(k, r)| (*k as f64, r.epe)).collect(),
        markers: vec![],
    }];
    line_chart(
        &out.join("iteration_sweep.png"),
        "EPE vs refinement iterations",
        "iterations",
        "EPE (px)",
        &series,
    )?;
    let payload: Vec<_> = curve
        .iter()
        .map(|(k, r)| serde_json::json!({"iters": k, "epe": r.epe, "fl_all": r.fl_all}))
        .collect();
    let sweep_json = serde_json::to_string_pretty(&payload)?;
    std::fs::write(out.join("iteration_sweep_data.json"), &sweep_json)?;
    println!("{sweep_json}");
    Ok(())
}

fn cmd_plot(cfg: &ExperimentConfig) -> Result<()> {
    let runs = runs_dir(cfg);
    let mut logs = Vec::new();
    if runs.exists() {
        let mut paths: Vec<_> = std::fs::read_dir(&runs)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        for path in paths {
            let name = path.file_stem().unwrap().to_string_lossy().to_string();
            logs.push((name, RunLog::load(&path)?));
        }
    }
    let written = crate::eval::emit_plots(&logs, &Path::new(&cfg.out_dir).join("plots"))?;
    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_repro_table1(cfg: &ExperimentConfig, strategies: Option<&str>) -> Result<()> {
    let kinds: Vec<TeacherKind> = match strategies {
        Some(list) => list
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<Result<_>>()?,
        None => vec![
            TeacherKind::Unsup,
            TeacherKind::SelfDistill,
            TeacherKind::Ema,
            TeacherKind::Fixed,
            TeacherKind::Fs,
        ],
    };
    let out = Path::new(&cfg.out_dir).join("repro-table1");
    let result = run_benchmark(cfg, &kinds, &out)?;
    let table = std::fs::read_to_string(out.join("table1.txt"))?;
    println!("{table}");
    println!("details: {}", out.join("result.json").display());
    let _ = result;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, force } => cmd_gen_data(&load_config(&common)?, force),
        Command::Pretrain {
            common,
            steps,
            resume,
        } => cmd_pretrain(&load_config(&common)?, steps, resume.as_deref()),
        Command::Finetune {
            common,
            teacher,
            checkpoint,
            steps,
            alpha,
            lambda_ts,
            lambda_tu,
            pass_hidden,
            resume,
        } => cmd_finetune(
            &load_config(&common)?,
            teacher.as_deref(),
            checkpoint.as_deref(),
            steps,
            alpha,
            lambda_ts,
            lambda_tu,
            pass_hidden.as_deref(),
            resume.as_deref(),
        ),
        Command::Eval {
            common,
            checkpoint,
            split,
            iters,
        } => cmd_eval(&load_config(&common)?, &checkpoint, &split, iters),
        Command::Sweep {
            common,
            checkpoint,
            iters,
            split,
        } => cmd_sweep(&load_config(&common)?, &checkpoint, &iters, &split),
        Command::Plot { common } => cmd_plot(&load_config(&common)?),
        Command::ReproTable1 { common, strategies } => {
            cmd_repro_table1(&load_config(&common)?, strategies.as_deref())
        }
    }
}

/// CLI entry point; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}
