//! Evaluation: end-point error, Fl-all, iteration sweeps, paired
//! supervisor/student reports, and summary tables.

mod plot;

pub use plot::{emit_plots, line_chart, Series};

use crate::autodiff::Tape;
use crate::data::FlowSample;
use crate::model::{student_forward, supervisor_forward, BoundParams, IterationConfig, ModelConfig, ParamSet};
use crate::{Error, Result};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

/// Aggregate flow metrics over one split.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    /// Mean end-point error in pixels.
    pub epe: f64,
    /// Percentage of valid pixels that are outliers (err > 3 px and
    /// err > 5% of the ground-truth magnitude).
    pub fl_all: f64,
    pub n_pixels: usize,
    pub split: String,
    pub model: String,
    pub step: u64,
}

/// Mean Euclidean error over valid pixels.
pub fn epe(pred: &Array3<f64>, gt: &Array3<f64>, valid: &Array2<f64>) -> Result<f64> {
    let (sum, weight) = epe_sums(pred, gt, valid)?;
    Ok(sum / weight)
}

fn epe_sums(pred: &Array3<f64>, gt: &Array3<f64>, valid: &Array2<f64>) -> Result<(f64, f64)> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "epe: pred {:?} vs gt {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let (h, w, _) = pred.dim();
    if valid.dim() != (h, w) {
        return Err(Error::Shape("epe: valid mask shape mismatch".into()));
    }
    let mut sum = 0.0;
    let mut weight = 0.0;
    for i in 0..h {
        for j in 0..w {
            let v = valid[[i, j]];
            if v == 0.0 {
                continue;
            }
            let du = pred[[i, j, 0]] - gt[[i, j, 0]];
            let dv = pred[[i, j, 1]] - gt[[i, j, 1]];
            sum += v * (du * du + dv * dv).sqrt();
            weight += v;
        }
    }
    if weight <= 0.0 {
        return Err(Error::Data("epe: empty valid mask".into()));
    }
    Ok((sum, weight))
}

/// Percentage of valid pixels where the error exceeds both 3 px and 5% of
/// the ground-truth magnitude (the standard outlier rule).
pub fn fl_all(pred: &Array3<f64>, gt: &Array3<f64>, valid: &Array2<f64>) -> Result<f64> {
    let (out, weight) = fl_sums(pred, gt, valid)?;
    Ok(100.0 * out / weight)
}

fn fl_sums(pred: &Array3<f64>, gt: &Array3<f64>, valid: &Array2<f64>) -> Result<(f64, f64)> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape("fl_all: shape mismatch".into()));
    }
    let (h, w, _) = pred.dim();
    if valid.dim() != (h, w) {
        return Err(Error::Shape("fl_all: valid mask shape mismatch".into()));
    }
    let mut outliers = 0.0;
    let mut weight = 0.0;
    for i in 0..h {
        for j in 0..w {
            let v = valid[[i, j]];
            if v == 0.0 {
                continue;
            }
            let du = pred[[i, j, 0]] - gt[[i, j, 0]];
            let dv = pred[[i, j, 1]] - gt[[i, j, 1]];
            let err = (du * du + dv * dv).sqrt();
            let mag = (gt[[i, j, 0]].powi(2) + gt[[i, j, 1]].powi(2)).sqrt();
            if err > 3.0 && err > 0.05 * mag {
                outliers += v;
            }
            weight += v;
        }
    }
    if weight <= 0.0 {
        return Err(Error::Data("fl_all: empty valid mask".into()));
    }
    Ok((outliers, weight))
}

fn final_flow(out: &crate::model::StudentOutput<'_>) -> Array3<f64> {
    out.flows_full
        .last()
        .unwrap()
        .value()
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap()
        .to_owned()
}

/// Full-frame evaluation of a student over a labeled split, pooling pixels
/// across samples.
pub fn evaluate(
    params: &ParamSet,
    model_cfg: &ModelConfig,
    samples: &[FlowSample],
    iters: usize,
    split: &str,
    model: &str,
    step: u64,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Data(format!("split '{split}' is empty")));
    }
    let mut epe_sum = 0.0;
    let mut fl_sum = 0.0;
    let mut weight = 0.0;
    for sample in samples {
        let gt = sample
            .flow
            .as_ref()
            .ok_or_else(|| Error::Data("evaluation sample lacks ground truth".into()))?;
        let valid = sample
            .valid
            .as_ref()
            .ok_or_else(|| Error::Data("evaluation sample lacks validity mask".into()))?;
        let tape = Tape::new();
        let bp = BoundParams::bind(&tape, params);
        let out = student_forward(
            &tape,
            &bp,
            model_cfg,
            sample.x1.pixels(),
            sample.x2.pixels(),
            iters,
        )?;
        let pred = final_flow(&out);
        let (es, w) = epe_sums(&pred, gt.vectors(), valid.weights())?;
        let (fs, _) = fl_sums(&pred, gt.vectors(), valid.weights())?;
        epe_sum += es;
        fl_sum += fs;
        weight += w;
    }
    Ok(MetricReport {
        epe: epe_sum / weight,
        fl_all: 100.0 * fl_sum / weight,
        n_pixels: weight.round() as usize,
        split: split.to_string(),
        model: model.to_string(),
        step,
    })
}

/// Evaluate at several iteration counts, reusing one forward pass per
/// sample: the k-iteration prediction is the k-th refinement output.
pub fn iteration_sweep(
    params: &ParamSet,
    model_cfg: &ModelConfig,
    samples: &[FlowSample],
    iters_list: &[usize],
    step: u64,
) -> Result<Vec<(usize, MetricReport)>> {
    if iters_list.is_empty() {
        return Err(Error::Config("iteration sweep needs at least one count".into()));
    }
    if iters_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("iteration counts must be strictly ascending".into()));
    }
    if samples.is_empty() {
        return Err(Error::Data("iteration sweep on empty split".into()));
    }
    let max_iters = *iters_list.last().unwrap();
    let mut acc: Vec<(f64, f64, f64)> = vec![(0.0, 0.0, 0.0); iters_list.len()];
    for sample in samples {
        let gt = sample
            .flow
            .as_ref()
            .ok_or_else(|| Error::Data("sweep sample lacks ground truth".into()))?;
        let valid = sample
            .valid
            .as_ref()
            .ok_or_else(|| Error::Data("sweep sample lacks validity mask".into()))?;
        let tape = Tape::new();
        let bp = BoundParams::bind(&tape, params);
        let out = student_forward(
            &tape,
            &bp,
            model_cfg,
            sample.x1.pixels(),
            sample.x2.pixels(),
            max_iters,
        )?;
        for (slot, &k) in iters_list.iter().enumerate() {
            let pred = out.flows_full[k - 1]
                .value()
                .view()
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap()
                .to_owned();
            let (es, w) = epe_sums(&pred, gt.vectors(), valid.weights())?;
            let (fs, _) = fl_sums(&pred, gt.vectors(), valid.weights())?;
            acc[slot].0 += es;
            acc[slot].1 += fs;
            acc[slot].2 += w;
        }
    }
    Ok(iters_list
        .iter()
        .zip(acc)
        .map(|(&k, (es, fs, w))| {
            (
                k,
                MetricReport {
                    epe: es / w,
                    fl_all: 100.0 * fs / w,
                    n_pixels: w.round() as usize,
                    split: "sweep".into(),
                    model: "student".into(),
                    step,
                },
            )
        })
        .collect())
}

/// Paired student/supervisor reports on clean full frames. The supervisor is
/// seeded with the student's own full-frame outputs (no padding needed).
pub fn teacher_vs_student_eval(
    student: &ParamSet,
    supervisor: &ParamSet,
    model_cfg: &ModelConfig,
    samples: &[FlowSample],
    iters: &IterationConfig,
    step: u64,
) -> Result<(MetricReport, MetricReport)> {
    if samples.is_empty() {
        return Err(Error::Data("teacher_vs_student_eval on empty split".into()));
    }
    let mut s_epe = 0.0;
    let mut s_fl = 0.0;
    let mut p_epe = 0.0;
    let mut p_fl = 0.0;
    let mut weight = 0.0;
    for sample in samples {
        let gt = sample.flow.as_ref().ok_or_else(|| Error::Data("sample lacks GT".into()))?;
        let valid = sample.valid.as_ref().ok_or_else(|| Error::Data("sample lacks mask".into()))?;
        let tape = Tape::new();
        let s_bp = BoundParams::bind(&tape, student);
        let out = student_forward(
            &tape,
            &s_bp,
            model_cfg,
            sample.x1.pixels(),
            sample.x2.pixels(),
            iters.n_student,
        )?;
        let s_pred = final_flow(&out);

        let flow_pad = out
            .flows_coarse
            .last()
            .unwrap()
            .value()
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .to_owned();
        let hidden_pad = out
            .hidden
            .value()
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .to_owned();
        let p_bp = BoundParams::bind(&tape, supervisor);
        let sup_out = supervisor_forward(
            &tape,
            &s_bp,
            &p_bp,
            model_cfg,
            sample.x1.pixels(),
            sample.x2.pixels(),
            &flow_pad,
            &hidden_pad,
            iters.m_supervisor,
        )?;
        let p_pred = sup_out
            .pseudo_label()
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .to_owned();

        let (es, w) = epe_sums(&s_pred, gt.vectors(), valid.weights())?;
        let (fs, _) = fl_sums(&s_pred, gt.vectors(), valid.weights())?;
        let (ep, _) = epe_sums(&p_pred, gt.vectors(), valid.weights())?;
        let (fp, _) = fl_sums(&p_pred, gt.vectors(), valid.weights())?;
        s_epe += es;
        s_fl += fs;
        p_epe += ep;
        p_fl += fp;
        weight += w;
    }
    let make = |e: f64, f: f64, model: &str| MetricReport {
        epe: e / weight,
        fl_all: 100.0 * f / weight,
        n_pixels: weight.round() as usize,
        split: "eval".into(),
        model: model.into(),
        step,
    };
    Ok((make(s_epe, s_fl, "student"), make(p_epe, p_fl, "supervisor")))
}

/// One row of the strategy-comparison summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub epe: Option<f64>,
    pub fl_all: Option<f64>,
    pub diverged: bool,
}

/// Plain-text strategy comparison table.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<14} {:>12} {:>14}  {}\n",
        "Method", "EPE", "Fl-all (%)", "Status"
    ));
    out.push_str(&"-".repeat(52));
    out.push('\n');
    for row in rows {
        let (epe_s, fl_s, status) = if row.diverged {
            ("diverged".to_string(), "diverged".to_string(), "diverged")
        } else {
            (
                row.epe.map_or("-".into(), |v| format!("{v:.3}")),
                row.fl_all.map_or("-".into(), |v| format!("{v:.2}")),
                "ok",
            )
        };
        out.push_str(&format!(
            "{:<14} {:>12} {:>14}  {}\n",
            row.label, epe_s, fl_s, status
        ));
    }
    out
}

/// CSV variant of the summary table.
pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("method,epe,fl_all,status\n");
    for row in rows {
        let status = if row.diverged { "diverged" } else { "ok" };
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.label,
            row.epe.map_or(String::new(), |v| format!("{v:.6}")),
            row.fl_all.map_or(String::new(), |v| format!("{v:.6}")),
            status
        ));
    }
    out
}
