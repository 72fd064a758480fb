//! The two-domain benchmark experiment.
//!
//! Source domain: flat-background scenes with clean photometrics, labeled.
//! Target domain: textured, slightly moving background with a blur
//! degradation, unlabeled for training. Pretraining on the source leaves a
//! measurable gap on the target; fine-tuning strategies are compared by how
//! much of that gap they close on a held-out target validation split.

use crate::data::{
    gen_synthetic_pair, write_dataset, BackgroundKind, Degradation, Domain, FlowSample, Manifest,
    MotionKind, SceneSpec,
};
use crate::eval::{emit_plots, summary_csv, summary_table, SummaryRow};
use crate::model::{ModelConfig, ParamSet};
use crate::teachers::TeacherKind;
use crate::train::{finetune_semisup, pretrain, RunLog, TrainConfig, TrainData, TrainOutcome};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Scene distribution for one domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSetConfig {
    pub height: usize,
    pub width: usize,
    pub background: BackgroundKind,
    /// Background translation magnitude bound (textured backgrounds only).
    pub bg_translation_max: f64,
    pub objects_min: usize,
    pub objects_max: usize,
    pub motions: Vec<MotionKind>,
    pub max_translation: f64,
    pub max_rotation: f64,
    pub scale_range: (f64, f64),
    pub radius_range: (f64, f64),
    pub degradation: Degradation,
    pub max_disp: f64,
}

impl Default for SceneSetConfig {
    fn default() -> Self {
        Self {
            height: 96,
            width: 96,
            background: BackgroundKind::Flat,
            bg_translation_max: 0.0,
            objects_min: 1,
            objects_max: 3,
            motions: vec![MotionKind::Translation, MotionKind::Rotation, MotionKind::Scaling],
            max_translation: 10.0,
            max_rotation: 0.35,
            scale_range: (0.9, 1.12),
            radius_range: (7.0, 16.0),
            degradation: Degradation::None,
            max_disp: 16.0,
        }
    }
}

impl SceneSetConfig {
    pub fn source_default() -> Self {
        Self::default()
    }

    pub fn target_default() -> Self {
        Self {
            background: BackgroundKind::Textured,
            bg_translation_max: 5.0,
            objects_min: 2,
            objects_max: 4,
            degradation: Degradation::Blur,
            ..Self::default()
        }
    }

    /// Spec for the `index`-th sample of a split.
    pub fn scene_spec(&self, base_seed: u64, index: u64) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(
            base_seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x51AB),
        );
        let object_count = rng.random_range(self.objects_min..=self.objects_max);
        let bg_motion = if self.background == BackgroundKind::Textured && self.bg_translation_max > 0.0
        {
            (
                rng.random_range(-self.bg_translation_max..=self.bg_translation_max),
                rng.random_range(-self.bg_translation_max..=self.bg_translation_max),
            )
        } else {
            (0.0, 0.0)
        };
        SceneSpec {
            height: self.height,
            width: self.width,
            background: self.background,
            bg_motion,
            object_count,
            motions: self.motions.clone(),
            max_translation: self.max_translation,
            max_rotation: self.max_rotation,
            scale_range: self.scale_range,
            radius_range: self.radius_range,
            degradation: self.degradation,
            max_disp: self.max_disp,
            rng_seed: rng.random(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: SceneSetConfig,
    pub target: SceneSetConfig,
    pub train_count: usize,
    pub val_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: SceneSetConfig::source_default(),
            target: SceneSetConfig::target_default(),
            train_count: 280,
            val_count: 8,
        }
    }
}

/// Top-level experiment description: data recipe, model size, and the two
/// training phases. Unknown keys in a config file are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub out_dir: String,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "two-domain".into(),
            out_dir: "out".into(),
            seed: 17,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            pretrain: TrainConfig {
                steps: 2000,
                lr0: 2e-3,
                lr_halving_period: 500,
                teacher: TeacherKind::None,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                steps: 2000,
                lr0: 2e-4,
                lr_halving_period: 500,
                teacher: TeacherKind::Fs,
                ..TrainConfig::default()
            },
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.data.train_count == 0 || self.data.val_count == 0 {
            return Err(Error::Config("dataset counts must be >= 1".into()));
        }
        for (name, set) in [("source", &self.data.source), ("target", &self.data.target)] {
            // One representative spec validates the configured ranges.
            set.scene_spec(self.seed, 0)
                .validate()
                .map_err(|e| Error::Config(format!("{name} scene config: {e}")))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// In-memory benchmark splits. Target-train ground truth is stripped before
/// it ever reaches a training loop.
pub struct BenchmarkData {
    pub source_train: Vec<FlowSample>,
    pub source_val: Vec<FlowSample>,
    pub target_train: Vec<FlowSample>,
    pub target_val: Vec<FlowSample>,
}

/// Distinct per-split seed offsets keep splits disjoint.
const SPLIT_SALTS: [(u64, &str); 4] = [
    (0x0515_0001, "source_train"),
    (0x0515_0002, "source_val"),
    (0x0515_0003, "target_train"),
    (0x0515_0004, "target_val"),
];

pub fn generate_split(
    set: &SceneSetConfig,
    count: usize,
    base_seed: u64,
    domain: Domain,
) -> Result<Vec<FlowSample>> {
    (0..count)
        .map(|i| gen_synthetic_pair(&set.scene_spec(base_seed, i as u64), domain))
        .collect()
}

fn strip_labels(samples: &mut [FlowSample]) {
    for s in samples.iter_mut() {
        s.flow = None;
        s.valid = None;
    }
}

/// Generate all four splits from the experiment seed.
pub fn generate_benchmark_data(cfg: &ExperimentConfig) -> Result<BenchmarkData> {
    let seed = cfg.seed;
    let source_train = generate_split(
        &cfg.data.source,
        cfg.data.train_count,
        seed ^ SPLIT_SALTS[0].0,
        Domain::Source,
    )?;
    let source_val = generate_split(
        &cfg.data.source,
        cfg.data.val_count,
        seed ^ SPLIT_SALTS[1].0,
        Domain::Source,
    )?;
    let mut target_train = generate_split(
        &cfg.data.target,
        cfg.data.train_count,
        seed ^ SPLIT_SALTS[2].0,
        Domain::Target,
    )?;
    strip_labels(&mut target_train);
    let target_val = generate_split(
        &cfg.data.target,
        cfg.data.val_count,
        seed ^ SPLIT_SALTS[3].0,
        Domain::Target,
    )?;
    Ok(BenchmarkData {
        source_train,
        source_val,
        target_train,
        target_val,
    })
}

/// Write the four splits to `data_dir` (target-train ground truth goes to
/// the quarantine subdirectory). Returns the manifests in split order.
pub fn write_benchmark_datasets(cfg: &ExperimentConfig, data_dir: &Path) -> Result<Vec<Manifest>> {
    let mut manifests = Vec::new();
    for (salt, name) in SPLIT_SALTS {
        let (set, domain, count) = match name {
            "source_train" => (&cfg.data.source, Domain::Source, cfg.data.train_count),
            "source_val" => (&cfg.data.source, Domain::Source, cfg.data.val_count),
            "target_train" => (&cfg.data.target, Domain::Target, cfg.data.train_count),
            _ => (&cfg.data.target, Domain::Target, cfg.data.val_count),
        };
        let samples = generate_split(set, count, cfg.seed ^ salt, domain)?;
        let quarantine = name == "target_train";
        manifests.push(write_dataset(
            &data_dir.join(name),
            name,
            cfg.seed ^ salt,
            &samples,
            quarantine,
        )?);
    }
    Ok(manifests)
}

/// One fine-tuning row of the comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyRow {
    pub kind: TeacherKind,
    pub label: String,
    pub target_epe: Option<f64>,
    pub target_fl: Option<f64>,
    pub source_epe: Option<f64>,
    pub diverged: Option<u64>,
    /// Relative target-val EPE improvement over the pretrained checkpoint,
    /// in percent (positive = better).
    pub improvement_pct: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub pretrain_target_epe: f64,
    pub pretrain_target_fl: f64,
    pub pretrain_source_epe: f64,
    pub rows: Vec<StrategyRow>,
    pub out_dir: String,
}

pub fn strategy_label(kind: TeacherKind) -> String {
    match kind {
        TeacherKind::None => "Sup".into(),
        TeacherKind::Unsup => "Sup + Unsup".into(),
        TeacherKind::SelfDistill => "Sup + Self".into(),
        TeacherKind::Ema => "Sup + EMA".into(),
        TeacherKind::Fixed => "Sup + Fixed".into(),
        TeacherKind::Fs => "Sup + FS".into(),
    }
}

fn final_target_metrics(log: &RunLog) -> Option<(f64, f64)> {
    log.final_snapshot("target-val", "student").map(|(_, e, f)| (e, f))
}

/// Run pretraining once, then every requested strategy from the same
/// pretrained checkpoint. Writes logs, checkpoints, plots, and the summary
/// table under `out_dir`; divergence is recorded, never treated as failure.
pub fn run_benchmark(
    cfg: &ExperimentConfig,
    strategies: &[TeacherKind],
    out_dir: &Path,
) -> Result<BenchmarkResult> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let data = generate_benchmark_data(cfg)?;
    let train_data = TrainData {
        labeled: &data.source_train,
        unlabeled: &data.target_train,
        source_val: &data.source_val,
        target_val: &data.target_val,
    };

    eprintln!("[benchmark] pretraining {} steps", cfg.pretrain.steps);
    let mut pre_log = RunLog::create(&out_dir.join("pretrain.jsonl"))?;
    let pre_out = pretrain(
        &train_data,
        &cfg.pretrain,
        &cfg.model,
        &mut pre_log,
        Some(&out_dir.join("pretrain.ckpt")),
    )?;
    let (pre_target_epe, pre_target_fl) = final_target_metrics(&pre_log)
        .ok_or_else(|| Error::Data("pretraining produced no target snapshot".into()))?;
    let pre_source_epe = pre_log
        .final_snapshot("source-val", "student")
        .map(|(_, e, _)| e)
        .unwrap_or(f64::NAN);

    // Strategies are independent given the pretrained weights; fan out.
    let pretrained = &pre_out.student;
    let results: Vec<Result<(TeacherKind, PathBuf, TrainOutcome)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = strategies
            .iter()
            .map(|&kind| {
                let train_data = TrainData {
                    labeled: &data.source_train,
                    unlabeled: &data.target_train,
                    source_val: &data.source_val,
                    target_val: &data.target_val,
                };
                let log_path = out_dir.join(format!("finetune_{kind}.jsonl"));
                let ckpt_path = out_dir.join(format!("finetune_{kind}.ckpt"));
                scope.spawn(move || {
                    let mut fin_cfg = cfg.finetune.clone();
                    fin_cfg.teacher = kind;
                    let mut log = RunLog::create(&log_path)?;
                    let outcome = finetune_semisup(
                        pretrained.clone(),
                        &train_data,
                        &fin_cfg,
                        &cfg.model,
                        &mut log,
                        Some(&ckpt_path),
                    )?;
                    Ok((kind, log_path, outcome))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("strategy thread")).collect()
    });

    let mut rows = Vec::with_capacity(strategies.len());
    for result in results {
        let (kind, log_path, outcome) = result?;
        let records = RunLog::load(&log_path)?;
        let mut log = RunLog::in_memory();
        for r in records {
            log.push(r)?;
        }
        let metrics = final_target_metrics(&log);
        let improvement = metrics.map(|(epe, _)| 100.0 * (pre_target_epe - epe) / pre_target_epe);
        rows.push(StrategyRow {
            kind,
            label: strategy_label(kind),
            target_epe: metrics.map(|m| m.0),
            target_fl: metrics.map(|m| m.1),
            source_epe: log.final_snapshot("source-val", "student").map(|(_, e, _)| e),
            diverged: outcome.diverged,
            improvement_pct: improvement,
        });
    }

    // Summary table in the comparison's canonical row order.
    let mut summary = vec![SummaryRow {
        label: "Sup".into(),
        epe: Some(pre_target_epe),
        fl_all: Some(pre_target_fl),
        diverged: false,
    }];
    let canonical = [
        TeacherKind::Unsup,
        TeacherKind::SelfDistill,
        TeacherKind::Ema,
        TeacherKind::Fixed,
        TeacherKind::Fs,
    ];
    for kind in canonical {
        if let Some(row) = rows.iter().find(|r| r.kind == kind) {
            summary.push(SummaryRow {
                label: row.label.clone(),
                epe: row.target_epe,
                fl_all: row.target_fl,
                diverged: row.diverged.is_some(),
            });
        }
    }
    std::fs::write(out_dir.join("table1.txt"), summary_table(&summary))?;
    std::fs::write(out_dir.join("table1.csv"), summary_csv(&summary))?;

    let mut logs = vec![(
        "pretrain".to_string(),
        RunLog::load(&out_dir.join("pretrain.jsonl"))?,
    )];
    for kind in strategies {
        logs.push((
            strategy_label(*kind),
            RunLog::load(&out_dir.join(format!("finetune_{kind}.jsonl")))?,
        ));
    }
    emit_plots(&logs, &out_dir.join("plots"))?;

    let result = BenchmarkResult {
        pretrain_target_epe: pre_target_epe,
        pretrain_target_fl: pre_target_fl,
        pretrain_source_epe: pre_source_epe,
        rows,
        out_dir: out_dir.display().to_string(),
    };
    std::fs::write(
        out_dir.join("result.json"),
        serde_json::to_string_pretty(&result)?,
    )?;
    Ok(result)
}
