//! Pretraining and semi-supervised fine-tuning.
//!
//! One training step is a serialized transaction over (student, teacher
//! state, optimizer state, RNG): draw a labeled and an unlabeled sample,
//! crop + augment the student's views, build the strategy's objective,
//! backpropagate, clip, and apply one update. Run logs are deterministic
//! given the seed; all wall-clock output goes to stderr.

mod divergence;
mod optim;
mod runlog;

pub use divergence::{DivergenceMonitor, DivergenceStatus};
pub use optim::{AdamW, OptGroup};
pub use runlog::{RunLog, RunRecord};

use crate::autodiff::{backward, Tape, Var};
use crate::data::{photometric_augment, random_crop, AugmentParams, AugmentedView, FlowSample};
use crate::eval::{evaluate, teacher_vs_student_eval};
use crate::losses::{
    joint_loss, l_self, l_sup_sequence, l_unsup, JointBatch, LossBreakdown, LossWeights,
    PenaltyMode, RobustLossParams, UnsupConfig, UnsupInputs,
};
use crate::model::{
    init_student_params, student_forward, BoundParams, Checkpoint, IterationConfig, ModelConfig,
    ParamSet,
};
use crate::teachers::{ema_update, make_teacher, teacher_target, TeacherKind, TeacherStrategy, TeacherTarget};
use crate::{Error, Result};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub lr0: f64,
    pub lr_halving_period: u64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub weights: LossWeights,
    pub iters: IterationConfig,
    pub teacher: TeacherKind,
    pub ema_beta: f64,
    pub seed: u64,
    pub crop_h: usize,
    pub crop_w: usize,
    pub augment: AugmentParams,
    pub unsup: UnsupConfig,
    pub penalty: RobustLossParams,
    pub divergence_window: usize,
    pub divergence_factor: f64,
    pub eval_every: u64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr0: 1e-5,
            lr_halving_period: 500,
            batch_labeled: 1,
            batch_unlabeled: 1,
            weights: LossWeights::default(),
            iters: IterationConfig::default(),
            teacher: TeacherKind::None,
            ema_beta: 0.999,
            seed: 0,
            crop_h: 64,
            crop_w: 64,
            augment: AugmentParams::default(),
            unsup: UnsupConfig::default(),
            penalty: RobustLossParams::default(),
            divergence_window: 50,
            divergence_factor: 10.0,
            eval_every: 100,
            weight_decay: 1e-5,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if self.lr_halving_period == 0 {
            return Err(Error::Config("lr halving period must be >= 1".into()));
        }
        if self.crop_h % 8 != 0 || self.crop_w % 8 != 0 {
            return Err(Error::Config("crop sides must be multiples of 8".into()));
        }
        if self.teacher == TeacherKind::Fs && self.batch_labeled != self.batch_unlabeled {
            return Err(Error::Config(
                "fs teacher pairs labeled and unlabeled draws; batch sizes must match".into(),
            ));
        }
        self.weights.validate()?;
        self.iters.validate()?;
        Ok(())
    }
}

/// Step-dependent learning rate: `lr0 · 0.5^floor(step / period)`.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * 0.5f64.powi((step / cfg.lr_halving_period) as i32)
}

/// In-memory dataset splits for one run.
pub struct TrainData<'a> {
    pub labeled: &'a [FlowSample],
    pub unlabeled: &'a [FlowSample],
    pub source_val: &'a [FlowSample],
    pub target_val: &'a [FlowSample],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Pretrain,
    Finetune,
}

pub struct TrainOutcome {
    pub student: ParamSet,
    pub supervisor: Option<ParamSet>,
    pub diverged: Option<u64>,
    pub steps_done: u64,
}

pub fn config_hash(cfg: &TrainConfig, model_cfg: &ModelConfig) -> String {
    let json = serde_json::to_string(&(cfg, model_cfg)).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    let mut hex = String::with_capacity(16);
    for b in digest.iter().take(8) {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

/// Training engine; holds everything a checkpoint restores.
pub struct Trainer {
    mode: TrainMode,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    student: ParamSet,
    teacher: TeacherStrategy,
    opt: AdamW,
    rng: ChaCha8Rng,
    global_step: u64,
    monitor: DivergenceMonitor,
    hash: String,
}

impl Trainer {
    pub fn new_pretrain(cfg: TrainConfig, model_cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.teacher != TeacherKind::None {
            return Err(Error::Config("pretraining runs with teacher 'none'".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let student = init_student_params(&model_cfg, &mut rng);
        let hash = config_hash(&cfg, &model_cfg);
        Ok(Self {
            mode: TrainMode::Pretrain,
            opt: AdamW::new(cfg.weight_decay, cfg.clip_norm),
            monitor: DivergenceMonitor::new(cfg.divergence_window, cfg.divergence_factor),
            teacher: TeacherStrategy::None,
            student,
            rng,
            global_step: 0,
            hash,
            cfg,
            model_cfg,
        })
    }

    pub fn new_finetune(cfg: TrainConfig, model_cfg: ModelConfig, pretrained: ParamSet) -> Result<Self> {
        cfg.validate()?;
        let teacher = make_teacher(cfg.teacher, Some(&pretrained), &model_cfg, cfg.ema_beta)?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let hash = config_hash(&cfg, &model_cfg);
        Ok(Self {
            mode: TrainMode::Finetune,
            opt: AdamW::new(cfg.weight_decay, cfg.clip_norm),
            monitor: DivergenceMonitor::new(cfg.divergence_window, cfg.divergence_factor),
            teacher,
            student: pretrained,
            rng,
            global_step: 0,
            hash,
            cfg,
            model_cfg,
        })
    }

    /// Rebuild a trainer mid-run. The divergence monitor restarts empty;
    /// parameters, optimizer state, RNG position, and step counter are
    /// restored bit-exactly.
    pub fn from_checkpoint(
        mode: TrainMode,
        cfg: TrainConfig,
        model_cfg: ModelConfig,
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        cfg.validate()?;
        let hash = config_hash(&cfg, &model_cfg);
        if ckpt.config_hash != hash {
            return Err(Error::Checkpoint(format!(
                "checkpoint was produced by a different configuration ({} vs {hash})",
                ckpt.config_hash
            )));
        }
        let teacher = match (mode, cfg.teacher) {
            (TrainMode::Pretrain, _) | (_, TeacherKind::None) => TeacherStrategy::None,
            (_, TeacherKind::SelfDistill) => TeacherStrategy::SelfDistill,
            (_, TeacherKind::Unsup) => TeacherStrategy::Unsup,
            (_, TeacherKind::Fs) => TeacherStrategy::Fs {
                supervisor: ckpt
                    .supervisor
                    .clone()
                    .ok_or_else(|| Error::Checkpoint("fs checkpoint lacks supervisor".into()))?,
            },
            (_, TeacherKind::Ema) => TeacherStrategy::Ema {
                teacher: ckpt
                    .supervisor
                    .clone()
                    .ok_or_else(|| Error::Checkpoint("ema checkpoint lacks teacher".into()))?,
                beta: cfg.ema_beta,
            },
            (_, TeacherKind::Fixed) => TeacherStrategy::Fixed {
                teacher: ckpt
                    .supervisor
                    .clone()
                    .ok_or_else(|| Error::Checkpoint("fixed checkpoint lacks teacher".into()))?,
            },
        };
        let mut opt = AdamW::new(cfg.weight_decay, cfg.clip_norm);
        opt.load_state(&ckpt.opt_state)?;
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng_seed);
        rng.set_word_pos(ckpt.rng_word_pos);
        Ok(Self {
            mode,
            monitor: DivergenceMonitor::new(cfg.divergence_window, cfg.divergence_factor),
            opt,
            teacher,
            student: ckpt.student.clone(),
            rng,
            global_step: ckpt.step,
            hash,
            cfg,
            model_cfg,
        })
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn student(&self) -> &ParamSet {
        &self.student
    }

    pub fn supervisor(&self) -> Option<&ParamSet> {
        self.teacher.supervisor()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let teacher_state = match &self.teacher {
            TeacherStrategy::Fs { supervisor } => Some(supervisor.clone()),
            TeacherStrategy::Ema { teacher, .. } | TeacherStrategy::Fixed { teacher } => {
                Some(teacher.clone())
            }
            _ => None,
        };
        Checkpoint {
            student: self.student.clone(),
            supervisor: teacher_state,
            opt_state: self.opt.state_arrays(),
            step: self.global_step,
            rng_seed: self.rng.get_seed(),
            rng_word_pos: self.rng.get_word_pos(),
            config_hash: self.hash.clone(),
        }
    }

    fn draw_view(&mut self, pool: &[FlowSample], what: &str) -> Result<(FlowSample, AugmentedView)> {
        if pool.is_empty() {
            return Err(Error::Data(format!("empty {what} dataset")));
        }
        let idx = self.rng.random_range(0..pool.len());
        let sample = pool[idx].clone();
        let (view, _) = random_crop(&sample, self.cfg.crop_h, self.cfg.crop_w, &mut self.rng)?;
        let view = photometric_augment(&view, &self.cfg.augment, &mut self.rng)?;
        Ok((sample, view))
    }

    fn sup_mode(&self) -> PenaltyMode {
        match self.mode {
            TrainMode::Pretrain => PenaltyMode::L1,
            TrainMode::Finetune => PenaltyMode::Charbonnier,
        }
    }

    /// Build the step objective, backpropagate, and apply one update.
    /// Returns the loss breakdown, or `None` when divergence was detected
    /// (in which case no update was applied).
    fn train_step(&mut self, data: &TrainData<'_>) -> Result<Option<LossBreakdown>> {
        let cfg_penalty = self.cfg.penalty;
        let sup_mode = self.sup_mode();

        // Draw everything up front so the RNG stream is a flat sequence.
        let mut labeled = Vec::with_capacity(self.cfg.batch_labeled);
        for _ in 0..self.cfg.batch_labeled {
            labeled.push(self.draw_view(data.labeled, "labeled")?);
        }
        let needs_unlabeled =
            self.mode == TrainMode::Finetune && self.cfg.teacher != TeacherKind::None;
        let mut unlabeled = Vec::new();
        if needs_unlabeled {
            for _ in 0..self.cfg.batch_unlabeled {
                unlabeled.push(self.draw_view(data.unlabeled, "unlabeled")?);
            }
        }

        let tape = Tape::new();
        let student_bp = BoundParams::bind(&tape, &self.student);
        let supervisor_bp = self
            .teacher
            .supervisor()
            .map(|sup| BoundParams::bind(&tape, sup));

        let mut breakdown = LossBreakdown::default();
        let mut total: Option<Var<'_>> = None;
        fn add<'t>(acc: &mut Option<Var<'t>>, v: Var<'t>) {
            *acc = Some(match acc.take() {
                Some(a) => a.add(v),
                None => v,
            });
        }

        match (&self.teacher, self.mode) {
            (TeacherStrategy::Fs { supervisor }, TrainMode::Finetune) => {
                let supervisor_bp = supervisor_bp.as_ref().unwrap();
                let scale = 1.0 / labeled.len() as f64;
                for ((l_full, l_view), (u_full, u_view)) in labeled.iter().zip(unlabeled.iter()) {
                    let batch = JointBatch {
                        labeled_full: l_full,
                        labeled_view: l_view,
                        unlabeled_full: u_full,
                        unlabeled_view: u_view,
                    };
                    let out = joint_loss(
                        &tape,
                        &student_bp,
                        supervisor_bp,
                        &self.student,
                        supervisor,
                        &self.model_cfg,
                        &self.cfg.iters,
                        &batch,
                        &self.cfg.weights,
                        &self.cfg.unsup,
                        &cfg_penalty,
                        sup_mode,
                    )?;
                    add(&mut total, out.total.mul_scalar(scale));
                    breakdown.l_sup += scale * out.breakdown.l_sup;
                    breakdown.l_fs += scale * out.breakdown.l_fs;
                    breakdown.l_ts += scale * out.breakdown.l_ts;
                    breakdown.l_tu += scale * out.breakdown.l_tu;
                    breakdown.census_skipped |= out.breakdown.census_skipped;
                }
            }
            _ => {
                // Supervised term on labeled views (all strategies).
                let scale = 1.0 / labeled.len() as f64;
                for (_, view) in &labeled {
                    let out = student_forward(
                        &tape,
                        &student_bp,
                        &self.model_cfg,
                        view.x1_aug.pixels(),
                        view.x2_aug.pixels(),
                        self.cfg.iters.n_student,
                    )?;
                    let y = view
                        .flow
                        .as_ref()
                        .ok_or_else(|| Error::Data("labeled view lacks ground truth".into()))?;
                    let valid = view
                        .valid
                        .as_ref()
                        .ok_or_else(|| Error::Data("labeled view lacks validity mask".into()))?;
                    let sup = l_sup_sequence(
                        &out.flows_full,
                        &y.vectors().clone().into_dyn(),
                        valid.weights(),
                        self.cfg.weights.gamma_sup,
                        sup_mode,
                        &cfg_penalty,
                    )?
                    .mul_scalar(scale);
                    breakdown.l_sup += sup.item();
                    add(&mut total, sup);
                }

                // Strategy-specific term on unlabeled views.
                if needs_unlabeled {
                    let alpha = self.cfg.weights.alpha;
                    let scale = alpha / unlabeled.len() as f64;
                    for (full, view) in &unlabeled {
                        let out = student_forward(
                            &tape,
                            &student_bp,
                            &self.model_cfg,
                            view.x1_aug.pixels(),
                            view.x2_aug.pixels(),
                            self.cfg.iters.n_student,
                        )?;
                        match &self.teacher {
                            TeacherStrategy::Unsup => {
                                let needs_bw = self.cfg.unsup.census_weight > 0.0
                                    && self.cfg.unsup.occlusion
                                        != crate::losses::OcclusionMethod::None;
                                let flow_bw = if needs_bw {
                                    let scratch = Tape::new();
                                    let bw_bp = BoundParams::bind(&scratch, &self.student);
                                    let bw = student_forward(
                                        &scratch,
                                        &bw_bp,
                                        &self.model_cfg,
                                        view.x2_aug.pixels(),
                                        view.x1_aug.pixels(),
                                        self.cfg.iters.n_student,
                                    )?;
                                    Some(to_array3(&bw.flows_full.last().unwrap().value()))
                                } else {
                                    None
                                };
                                let inputs = UnsupInputs {
                                    x1: view.x1_aug.pixels(),
                                    x2: view.x2_aug.pixels(),
                                    x2_full: Some((
                                        full.x2.pixels(),
                                        (view.crop.offset_x, view.crop.offset_y),
                                    )),
                                };
                                let (term, skipped) = l_unsup(
                                    &inputs,
                                    &out.flows_full,
                                    flow_bw.as_ref(),
                                    &self.cfg.unsup,
                                    &cfg_penalty,
                                    self.cfg.weights.gamma_tu,
                                )?;
                                breakdown.census_skipped |= skipped;
                                let term = term.mul_scalar(scale);
                                breakdown.l_unsup += term.item();
                                add(&mut total, term);
                            }
                            TeacherStrategy::SelfDistill
                            | TeacherStrategy::Ema { .. }
                            | TeacherStrategy::Fixed { .. } => {
                                let target = teacher_target(
                                    &self.teacher,
                                    &self.student,
                                    &self.model_cfg,
                                    full.x1.pixels(),
                                    full.x2.pixels(),
                                    None,
                                    &self.cfg.iters,
                                )?;
                                let TeacherTarget::Flow(flow_full) = target else {
                                    return Err(Error::Config("teacher produced no flow target".into()));
                                };
                                let c = &view.crop;
                                let target_crop = flow_full
                                    .slice(ndarray::s![
                                        c.offset_y..c.offset_y + c.crop_h,
                                        c.offset_x..c.offset_x + c.crop_w,
                                        ..
                                    ])
                                    .to_owned()
                                    .into_dyn();
                                let term = l_self(
                                    &out.flows_full,
                                    &target_crop,
                                    self.cfg.weights.gamma_fs,
                                    &cfg_penalty,
                                )?
                                .mul_scalar(scale);
                                breakdown.l_self += term.item();
                                add(&mut total, term);
                            }
                            _ => unreachable!("fs handled above; none draws no unlabeled"),
                        }
                    }
                }
            }
        }

        let total = total.expect("at least one loss term");
        breakdown.total = total.item();

        if !breakdown.total.is_finite() {
            match self.mode {
                TrainMode::Pretrain => {
                    return Err(Error::NonFinite(format!(
                        "pretraining loss at step {}",
                        self.global_step
                    )))
                }
                TrainMode::Finetune => return Ok(None),
            }
        }
        if self.monitor.push(breakdown.total) == DivergenceStatus::Diverged {
            return Ok(None);
        }

        let grads = backward(total);
        let student_grads = student_bp.gradients(&grads);
        let lr = lr_schedule(self.global_step, &self.cfg);
        match (&mut self.teacher, supervisor_bp) {
            (TeacherStrategy::Fs { supervisor }, Some(sup_bp)) => {
                let sup_grads = sup_bp.gradients(&grads);
                self.opt.step(
                    lr,
                    &mut [
                        OptGroup {
                            prefix: "student",
                            params: &mut self.student,
                            grads: student_grads,
                        },
                        OptGroup {
                            prefix: "supervisor",
                            params: supervisor,
                            grads: sup_grads,
                        },
                    ],
                );
            }
            _ => {
                self.opt.step(
                    lr,
                    &mut [OptGroup {
                        prefix: "student",
                        params: &mut self.student,
                        grads: student_grads,
                    }],
                );
            }
        }
        if let TeacherStrategy::Ema { teacher, beta } = &mut self.teacher {
            let b = *beta;
            ema_update(teacher, &self.student, b)?;
        }
        Ok(Some(breakdown))
    }

    fn snapshots(&self, data: &TrainData<'_>, log: &mut RunLog) -> Result<()> {
        let step = self.global_step;
        for (split, samples) in [("source-val", data.source_val), ("target-val", data.target_val)] {
            if samples.is_empty() {
                continue;
            }
            let report = evaluate(
                &self.student,
                &self.model_cfg,
                samples,
                self.cfg.iters.n_student,
                split,
                "student",
                step,
            )?;
            log.push(RunRecord::Snapshot {
                step,
                split: split.into(),
                model: "student".into(),
                epe: report.epe,
                fl_all: report.fl_all,
                n_pixels: report.n_pixels,
            })?;
        }
        if let Some(supervisor) = self.teacher.supervisor() {
            if !data.target_val.is_empty() {
                let (_, sup_report) = teacher_vs_student_eval(
                    &self.student,
                    supervisor,
                    &self.model_cfg,
                    data.target_val,
                    &self.cfg.iters,
                    step,
                )?;
                log.push(RunRecord::Snapshot {
                    step,
                    split: "target-val".into(),
                    model: "supervisor".into(),
                    epe: sup_report.epe,
                    fl_all: sup_report.fl_all,
                    n_pixels: sup_report.n_pixels,
                })?;
            }
        }
        Ok(())
    }

    /// Train until `until` steps are done (or divergence). Returns the step
    /// at which divergence was flagged, if any.
    pub fn run(&mut self, data: &TrainData<'_>, log: &mut RunLog, until: u64) -> Result<Option<u64>> {
        if self.global_step == 0 {
            log.push(RunRecord::Meta {
                seed: self.cfg.seed,
                teacher: self.cfg.teacher.to_string(),
                config_hash: self.hash.clone(),
            })?;
            if !data.source_val.is_empty() || !data.target_val.is_empty() {
                self.snapshots(data, log)?;
            }
        }
        let started = std::time::Instant::now();
        while self.global_step < until {
            let result = self.train_step(data)?;
            let Some(breakdown) = result else {
                // Divergence: flag the log and stop without applying the update.
                log.push(RunRecord::Divergence {
                    step: self.global_step,
                })?;
                log.flush()?;
                eprintln!(
                    "[{}] diverged at step {} — stopping",
                    self.cfg.teacher, self.global_step
                );
                return Ok(Some(self.global_step));
            };
            let lr = lr_schedule(self.global_step, &self.cfg);
            self.global_step += 1;
            log.push(RunRecord::Step {
                step: self.global_step,
                lr,
                losses: breakdown,
            })?;
            if self.global_step % self.cfg.eval_every == 0 {
                self.snapshots(data, log)?;
            }
            if self.global_step % 200 == 0 {
                eprintln!(
                    "[{}] step {}/{} total={:.4} ({:.1}s)",
                    self.cfg.teacher,
                    self.global_step,
                    until,
                    breakdown.total,
                    started.elapsed().as_secs_f64()
                );
            }
        }
        if self.global_step % self.cfg.eval_every != 0 {
            self.snapshots(data, log)?;
        }
        log.flush()?;
        Ok(None)
    }
}

fn to_array3(value: &crate::autodiff::Arr) -> Array3<f64> {
    value
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap()
        .to_owned()
}

/// Supervised pretraining on the labeled source split.
pub fn pretrain(
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    log: &mut RunLog,
    checkpoint_path: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new_pretrain(cfg.clone(), *model_cfg)?;
    let diverged = trainer.run(data, log, cfg.steps)?;
    if let Some(path) = checkpoint_path {
        trainer.checkpoint().save(path)?;
    }
    Ok(TrainOutcome {
        steps_done: trainer.global_step,
        supervisor: None,
        student: trainer.student,
        diverged,
    })
}

/// Semi-supervised fine-tuning from pretrained weights under the configured
/// teacher strategy.
pub fn finetune_semisup(
    pretrained: ParamSet,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    log: &mut RunLog,
    checkpoint_path: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new_finetune(cfg.clone(), *model_cfg, pretrained)?;
    let diverged = trainer.run(data, log, cfg.steps)?;
    if let Some(path) = checkpoint_path {
        trainer.checkpoint().save(path)?;
    }
    Ok(TrainOutcome {
        steps_done: trainer.global_step,
        supervisor: trainer.teacher.supervisor().cloned(),
        student: trainer.student,
        diverged,
    })
}
