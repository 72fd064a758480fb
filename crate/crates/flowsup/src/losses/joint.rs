//! The joint fine-tuning objective: supervised loss on labeled crops,
//! flow-supervisor loss on unlabeled crops, and the supervisor's own
//! supervised/unsupervised teacher losses on privileged full frames.

use super::photometric::{l_tu, UnsupInputs};
use super::{l_fs_sequence, l_sup_sequence, l_ts, LossWeights, PenaltyMode, Reduction, RobustLossParams, UnsupConfig};
use crate::autodiff::{Arr, Tape, Var};
use crate::data::{pad_student_to_full, AugmentedView, FlowSample};
use crate::model::{
    student_forward, supervisor_forward, BoundParams, IterationConfig, ModelConfig, ParamSet,
    StudentOutput,
};
use crate::{Error, Result};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

/// One fine-tuning step's data: a labeled and an unlabeled sample, each as
/// clean full frames plus the student's augmented crop view.
pub struct JointBatch<'a> {
    pub labeled_full: &'a FlowSample,
    pub labeled_view: &'a AugmentedView,
    pub unlabeled_full: &'a FlowSample,
    pub unlabeled_view: &'a AugmentedView,
}

/// Weighted loss terms; they sum to `total`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_sup: f64,
    pub l_fs: f64,
    pub l_ts: f64,
    pub l_tu: f64,
    pub l_self: f64,
    pub l_unsup: f64,
    pub census_skipped: bool,
}

/// The objective value plus its per-term report.
pub struct JointLossOutput<'t> {
    pub total: Var<'t>,
    pub breakdown: LossBreakdown,
}

fn to_array3(value: &Arr) -> Array3<f64> {
    value
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap()
        .to_owned()
}

/// Pad a student pass's final flow and hidden state into the full coarse
/// frame (both detached: these are plain arrays).
fn padded_student_outputs(
    student: &StudentOutput<'_>,
    view: &AugmentedView,
) -> Result<(Array3<f64>, Array3<f64>)> {
    let flow = to_array3(&student.flows_coarse.last().unwrap().value());
    let hidden = to_array3(&student.hidden.value());
    let flow_pad = pad_student_to_full(&flow, &view.crop, view.full_size)?;
    let hidden_pad = pad_student_to_full(&hidden, &view.crop, view.full_size)?;
    Ok((flow_pad, hidden_pad))
}

fn crop_window(full: &Arr, view: &AugmentedView) -> Arr {
    let c = &view.crop;
    full.view()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap()
        .slice(ndarray::s![
            c.offset_y..c.offset_y + c.crop_h,
            c.offset_x..c.offset_x + c.crop_w,
            ..
        ])
        .to_owned()
        .into_dyn()
}

/// Build the full fine-tuning objective on `tape`.
///
/// `student_bp`/`supervisor_bp` are the tape bindings whose leaves will
/// carry the gradients; the raw parameter sets are additionally needed for
/// scratch-tape passes (pseudo-label production and backward-flow
/// estimation), which deliberately stay off the main graph.
///
/// Gradient paths: the supervised and flow-supervisor terms reach the
/// student parameters only (the pseudo-label is detached); the teacher terms
/// reach the supervisor parameters only (its inputs are detached).
#[allow(clippy::too_many_arguments)]
pub fn joint_loss<'t>(
    tape: &'t Tape,
    student_bp: &BoundParams<'t>,
    supervisor_bp: &BoundParams<'t>,
    student_params: &ParamSet,
    supervisor_params: &ParamSet,
    model_cfg: &ModelConfig,
    iters: &IterationConfig,
    batch: &JointBatch<'_>,
    weights: &LossWeights,
    unsup_cfg: &UnsupConfig,
    penalty: &RobustLossParams,
    sup_mode: PenaltyMode,
) -> Result<JointLossOutput<'t>> {
    weights.validate()?;
    iters.validate()?;
    let mut breakdown = LossBreakdown::default();

    // Supervised term on the labeled crop.
    let labeled_view = batch.labeled_view;
    let student_labeled = student_forward(
        tape,
        student_bp,
        model_cfg,
        labeled_view.x1_aug.pixels(),
        labeled_view.x2_aug.pixels(),
        iters.n_student,
    )?;
    let y_crop = labeled_view
        .flow
        .as_ref()
        .ok_or_else(|| Error::Data("labeled view lacks ground truth".into()))?;
    let valid_crop = labeled_view
        .valid
        .as_ref()
        .ok_or_else(|| Error::Data("labeled view lacks validity mask".into()))?;
    let sup = l_sup_sequence(
        &student_labeled.flows_full,
        &y_crop.vectors().clone().into_dyn(),
        valid_crop.weights(),
        weights.gamma_sup,
        sup_mode,
        penalty,
    )?;
    breakdown.l_sup = sup.item();
    let mut total = sup;

    // Supervised teacher term: supervisor refines the student's labeled-crop
    // prediction with privileged full frames and is scored against the label.
    if weights.lambda_ts > 0.0 {
        let (flow_pad, hidden_pad) = padded_student_outputs(&student_labeled, labeled_view)?;
        let supervisor_labeled = supervisor_forward(
            tape,
            student_bp,
            supervisor_bp,
            model_cfg,
            batch.labeled_full.x1.pixels(),
            batch.labeled_full.x2.pixels(),
            &flow_pad,
            &hidden_pad,
            iters.m_supervisor,
        )?;
        let y_full = batch
            .labeled_full
            .flow
            .as_ref()
            .ok_or_else(|| Error::Data("labeled sample lacks ground truth".into()))?;
        let valid_full = batch
            .labeled_full
            .valid
            .as_ref()
            .ok_or_else(|| Error::Data("labeled sample lacks validity mask".into()))?;
        let ts = l_ts(
            &supervisor_labeled.flows_full,
            &y_full.vectors().clone().into_dyn(),
            valid_full.weights(),
            weights.gamma_ts,
            sup_mode,
            penalty,
        )?;
        let weighted = ts.mul_scalar(weights.lambda_ts);
        breakdown.l_ts = weighted.item();
        total = total.add(weighted);
    }

    // Flow-supervisor term on the unlabeled crop, plus (optionally) the
    // unsupervised teacher term on the supervisor's full-frame outputs.
    if weights.alpha > 0.0 || weights.lambda_tu > 0.0 {
        let unlabeled_view = batch.unlabeled_view;
        let student_unlabeled = student_forward(
            tape,
            student_bp,
            model_cfg,
            unlabeled_view.x1_aug.pixels(),
            unlabeled_view.x2_aug.pixels(),
            iters.n_student,
        )?;
        let (flow_pad, hidden_pad) = padded_student_outputs(&student_unlabeled, unlabeled_view)?;

        let x1_full = batch.unlabeled_full.x1.pixels();
        let x2_full = batch.unlabeled_full.x2.pixels();
        let pseudo_label_full: Arr = if weights.lambda_tu > 0.0 {
            // Teacher losses need gradients through the supervisor pass.
            let supervisor_unlabeled = supervisor_forward(
                tape,
                student_bp,
                supervisor_bp,
                model_cfg,
                x1_full,
                x2_full,
                &flow_pad,
                &hidden_pad,
                iters.m_supervisor,
            )?;
            let needs_bw = unsup_cfg.census_weight > 0.0
                && unsup_cfg.occlusion != super::OcclusionMethod::None;
            let flow_bw = if needs_bw {
                let scratch = Tape::new();
                let bw_bp = BoundParams::bind(&scratch, student_params);
                let bw = student_forward(&scratch, &bw_bp, model_cfg, x2_full, x1_full, iters.n_student)?;
                Some(to_array3(&bw.flows_full.last().unwrap().value()))
            } else {
                None
            };
            let inputs = UnsupInputs {
                x1: x1_full,
                x2: x2_full,
                x2_full: None,
            };
            let (tu, skipped) = l_tu(
                &inputs,
                &supervisor_unlabeled.flows_full,
                flow_bw.as_ref(),
                unsup_cfg,
                penalty,
                weights.gamma_tu,
            )?;
            breakdown.census_skipped |= skipped;
            let weighted = tu.mul_scalar(weights.lambda_tu);
            breakdown.l_tu = weighted.item();
            total = total.add(weighted);
            supervisor_unlabeled.pseudo_label()
        } else {
            // Pure pseudo-label production: no gradients needed anywhere.
            let scratch = Tape::new();
            let s_bp = BoundParams::bind(&scratch, student_params);
            let p_bp = BoundParams::bind(&scratch, supervisor_params);
            let supervisor_unlabeled = supervisor_forward(
                &scratch,
                &s_bp,
                &p_bp,
                model_cfg,
                x1_full,
                x2_full,
                &flow_pad,
                &hidden_pad,
                iters.m_supervisor,
            )?;
            supervisor_unlabeled.pseudo_label()
        };

        if weights.alpha > 0.0 {
            // Supervise only the crop window: outside it the padded student
            // flow is synthetic zero, not a prediction.
            let pseudo_crop = crop_window(&pseudo_label_full, unlabeled_view);
            let fs = l_fs_sequence(
                &student_unlabeled.flows_full,
                &pseudo_crop,
                weights.gamma_fs,
                penalty,
                Reduction::MeanValid,
            )?;
            let weighted = fs.mul_scalar(weights.alpha);
            breakdown.l_fs = weighted.item();
            total = total.add(weighted);
        }
    }

    breakdown.total = total.item();
    Ok(JointLossOutput { total, breakdown })
}
