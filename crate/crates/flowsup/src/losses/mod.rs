//! Differentiable training objectives.
//!
//! Sequence losses follow the decayed-sum convention: with per-step values
//! `a_1..a_n` and decay `γ`, the loss is `Σ_i γ^(n−i)·a_i` (later steps
//! weigh more). Per-step values are means over valid pixels and flow
//! channels unless the `Sum` reduction is requested.

mod joint;
mod photometric;

pub use joint::{joint_loss, JointBatch, JointLossOutput, LossBreakdown};
pub use photometric::{
    census_loss, l_tu, l_unsup, occlusion_mask, smoothness_loss, warp, warp_arr, warp_from_full,
    OcclusionMethod, SmoothOrder, UnsupInputs,
};

use crate::autodiff::{Arr, Var};
use crate::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Generalized Charbonnier parameters: `ρ(x) = (x² + eps²)^(q/2)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustLossParams {
    pub eps: f64,
    pub q: f64,
}

impl Default for RobustLossParams {
    fn default() -> Self {
        Self { eps: 1e-3, q: 0.8 }
    }
}

impl RobustLossParams {
    /// Plain squared penalty (`ρ(x) = x²`), used by update-rule identities.
    pub fn square() -> Self {
        Self { eps: 0.0, q: 2.0 }
    }
}

/// Per-pixel penalty for supervised-style losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyMode {
    L1,
    Charbonnier,
}

/// How a per-step loss map collapses to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Mean over valid pixels and flow channels (training default).
    MeanValid,
    /// Plain sum (used to verify unnormalized gradient identities).
    Sum,
}

/// Loss weights and per-loss decay factors.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda_ts: f64,
    pub lambda_tu: f64,
    pub gamma_sup: f64,
    pub gamma_fs: f64,
    pub gamma_ts: f64,
    pub gamma_tu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lambda_ts: 1.0,
            lambda_tu: 0.0,
            gamma_sup: 0.8,
            gamma_fs: 0.8,
            gamma_ts: 1.0,
            gamma_tu: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("lambda_ts", self.lambda_ts),
            ("lambda_tu", self.lambda_tu),
        ] {
            if v < 0.0 {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        for (name, g) in [
            ("gamma_sup", self.gamma_sup),
            ("gamma_fs", self.gamma_fs),
            ("gamma_ts", self.gamma_ts),
            ("gamma_tu", self.gamma_tu),
        ] {
            if !(g > 0.0 && g <= 1.0) {
                return Err(Error::Config(format!("{name} must be in (0,1], got {g}")));
            }
        }
        Ok(())
    }
}

/// Unsupervised-objective configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnsupConfig {
    pub census_weight: f64,
    pub smooth1_weight: f64,
    pub smooth2_weight: f64,
    pub occlusion: OcclusionMethod,
    pub census_window: usize,
    pub edge_lambda: f64,
}

impl Default for UnsupConfig {
    fn default() -> Self {
        Self {
            census_weight: 1.0,
            smooth1_weight: 2.5,
            smooth2_weight: 0.0,
            occlusion: OcclusionMethod::Wang,
            census_window: 7,
            edge_lambda: 150.0,
        }
    }
}

impl UnsupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.census_weight < 0.0 || self.smooth1_weight < 0.0 || self.smooth2_weight < 0.0 {
            return Err(Error::Config("unsupervised loss weights must be >= 0".into()));
        }
        if self.census_window < 3 || self.census_window % 2 == 0 {
            return Err(Error::Config(format!(
                "census window must be odd and >= 3, got {}",
                self.census_window
            )));
        }
        Ok(())
    }

    pub fn zero() -> Self {
        Self {
            census_weight: 0.0,
            smooth1_weight: 0.0,
            smooth2_weight: 0.0,
            occlusion: OcclusionMethod::None,
            ..Self::default()
        }
    }
}

/// Elementwise generalized Charbonnier penalty.
pub fn charbonnier<'t>(x: Var<'t>, p: &RobustLossParams) -> Var<'t> {
    x.mul(x).add_scalar(p.eps * p.eps).powf_const(p.q / 2.0)
}

fn apply_penalty<'t>(e: Var<'t>, mode: PenaltyMode, p: &RobustLossParams) -> Var<'t> {
    match mode {
        PenaltyMode::L1 => e.abs(),
        PenaltyMode::Charbonnier => charbonnier(e, p),
    }
}

fn broadcast_mask(mask: &Array2<f64>, channels: usize) -> Arr {
    let (h, w) = mask.dim();
    Arr::from_shape_fn(ndarray::IxDyn(&[h, w, channels]), |ix| mask[[ix[0], ix[1]]])
}

/// Decayed sequence loss core shared by the supervised, self-supervision,
/// and flow-supervisor objectives.
fn sequence_loss<'t>(
    flows: &[Var<'t>],
    target: &Arr,
    valid: Option<&Array2<f64>>,
    gamma: f64,
    mode: PenaltyMode,
    p: &RobustLossParams,
    reduction: Reduction,
) -> Result<Var<'t>> {
    if flows.is_empty() {
        return Err(Error::Config("sequence loss needs at least one flow".into()));
    }
    let shape = flows[0].shape();
    if target.shape() != shape.as_slice() {
        return Err(Error::Shape(format!(
            "loss target shape {:?} does not match flow shape {shape:?} (misaligned windows?)",
            target.shape()
        )));
    }
    let (mask3, denom) = match valid {
        Some(mask) => {
            if mask.dim() != (shape[0], shape[1]) {
                return Err(Error::Shape("valid mask does not match flow shape".into()));
            }
            let total: f64 = mask.sum();
            if total <= 0.0 {
                return Err(Error::Data("empty valid mask".into()));
            }
            (Some(broadcast_mask(mask, shape[2])), total * shape[2] as f64)
        }
        None => (None, (shape[0] * shape[1] * shape[2]) as f64),
    };

    let n = flows.len();
    let mut total: Option<Var<'t>> = None;
    for (i, flow) in flows.iter().enumerate() {
        let weight = gamma.powi((n - 1 - i) as i32);
        let err = flow.add_arr(&(target * -1.0));
        let pen = apply_penalty(err, mode, p);
        let masked = match &mask3 {
            Some(m) => pen.mul_arr(m),
            None => pen,
        };
        let step_value = match reduction {
            Reduction::MeanValid => masked.sum().mul_scalar(1.0 / denom),
            Reduction::Sum => masked.sum(),
        };
        let weighted = step_value.mul_scalar(weight);
        total = Some(match total {
            Some(acc) => acc.add(weighted),
            None => weighted,
        });
    }
    Ok(total.unwrap())
}

/// Supervised sequence loss against ground truth.
pub fn l_sup_sequence<'t>(
    flows: &[Var<'t>],
    y: &Arr,
    valid: &Array2<f64>,
    gamma: f64,
    mode: PenaltyMode,
    p: &RobustLossParams,
) -> Result<Var<'t>> {
    sequence_loss(flows, y, Some(valid), gamma, mode, p, Reduction::MeanValid)
}

/// Flow-supervisor loss: decayed robust penalty between every student
/// iterate and the (detached) final pseudo-label, on the crop window.
pub fn l_fs_sequence<'t>(
    student_flows: &[Var<'t>],
    pseudo_label: &Arr,
    gamma: f64,
    p: &RobustLossParams,
    reduction: Reduction,
) -> Result<Var<'t>> {
    sequence_loss(
        student_flows,
        pseudo_label,
        None,
        gamma,
        PenaltyMode::Charbonnier,
        p,
        reduction,
    )
}

/// Baseline self-supervision loss: same accumulation rule as the
/// flow-supervisor loss, with a baseline teacher's detached prediction.
pub fn l_self<'t>(
    student_flows: &[Var<'t>],
    teacher_flow: &Arr,
    gamma: f64,
    p: &RobustLossParams,
) -> Result<Var<'t>> {
    l_fs_sequence(student_flows, teacher_flow, gamma, p, Reduction::MeanValid)
}

/// Supervised teacher loss on supervisor outputs (gradients reach the
/// supervisor parameters only; its inputs are detached upstream).
pub fn l_ts<'t>(
    supervisor_flows: &[Var<'t>],
    y: &Arr,
    valid: &Array2<f64>,
    gamma: f64,
    mode: PenaltyMode,
    p: &RobustLossParams,
) -> Result<Var<'t>> {
    sequence_loss(supervisor_flows, y, Some(valid), gamma, mode, p, Reduction::MeanValid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{max_rel_error, numeric_grad};
    use crate::autodiff::{backward, scalar_arr, Tape};
    use ndarray::IxDyn;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn charbonnier_value_at_zero() {
        let p = RobustLossParams::default();
        let tape = Tape::new();
        let x = tape.var(scalar_arr(0.0));
        let rho = charbonnier(x, &p);
        let expected = 1e-3f64.powf(0.8);
        assert!((rho.item() - expected).abs() < 1e-15);
        assert!((expected - 3.981e-3).abs() < 1e-5);
    }

    #[test]
    fn charbonnier_square_mode_is_exact() {
        let p = RobustLossParams::square();
        let tape = Tape::new();
        let x = tape.var(scalar_arr(-1.75));
        assert_eq!(charbonnier(x, &p).item(), 1.75 * 1.75);
    }

    proptest! {
        #[test]
        fn charbonnier_even_and_monotone(x in 0.01f64..10.0, d in 0.01f64..1.0) {
            let p = RobustLossParams::default();
            let tape = Tape::new();
            let pos = charbonnier(tape.var(scalar_arr(x)), &p).item();
            let neg = charbonnier(tape.var(scalar_arr(-x)), &p).item();
            prop_assert!((pos - neg).abs() < 1e-15);
            let bigger = charbonnier(tape.var(scalar_arr(x + d)), &p).item();
            prop_assert!(bigger > pos);
        }
    }

    #[test]
    fn charbonnier_gradient_matches_finite_differences() {
        let p = RobustLossParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let x0 = Arr::from_shape_fn(IxDyn(&[4, 6]), |_| rng.random_range(-2.0..2.0));
        let tape = Tape::new();
        let x = tape.var(x0.clone());
        let loss = charbonnier(x, &p).sum();
        let grads = backward(loss);
        let ga: Vec<f64> = grads.get(x).unwrap().iter().copied().collect();
        let gn = numeric_grad(
            |v| {
                let t = Tape::new();
                charbonnier(t.var(Arr::from_shape_vec(x0.raw_dim(), v.to_vec()).unwrap()), &p)
                    .sum()
                    .item()
            },
            &x0.iter().copied().collect::<Vec<_>>(),
            1e-6,
        );
        assert!(max_rel_error(&ga, &gn) < 1e-4);
    }

    fn flows_from<'t>(tape: &'t Tape, arrs: &[Arr]) -> Vec<crate::autodiff::Var<'t>> {
        arrs.iter().map(|a| tape.var(a.clone())).collect()
    }

    #[test]
    fn l_sup_exact_match_is_zero_in_l1_mode() {
        let tape = Tape::new();
        let y = Arr::from_shape_fn(IxDyn(&[4, 4, 2]), |ix| ix[0] as f64 - ix[1] as f64);
        let flows = flows_from(&tape, &[y.clone()]);
        let valid = Array2::ones((4, 4));
        let loss = l_sup_sequence(
            &flows,
            &y,
            &valid,
            0.8,
            PenaltyMode::L1,
            &RobustLossParams::default(),
        )
        .unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn l_sup_decay_weighting_matches_hand_sum() {
        // Two steps with per-step mean L1 errors a1, a2 -> 0.8*a1 + a2.
        let tape = Tape::new();
        let y = Arr::zeros(IxDyn(&[2, 2, 2]));
        let f1 = Arr::from_elem(IxDyn(&[2, 2, 2]), 1.5); // mean L1 = 1.5
        let f2 = Arr::from_elem(IxDyn(&[2, 2, 2]), -0.25); // mean L1 = 0.25
        let flows = flows_from(&tape, &[f1, f2]);
        let valid = Array2::ones((2, 2));
        let loss = l_sup_sequence(
            &flows,
            &y,
            &valid,
            0.8,
            PenaltyMode::L1,
            &RobustLossParams::default(),
        )
        .unwrap();
        assert!((loss.item() - (0.8 * 1.5 + 0.25)).abs() < 1e-12);
    }

    #[test]
    fn l_sup_single_step_matches_pixel_summation_oracle() {
        // 2x2 flow with per-pixel errors (1,0), (0,2), (0,0), (3,4):
        // elementwise mean = (1+2+0+7)/8.
        let tape = Tape::new();
        let y = Arr::zeros(IxDyn(&[2, 2, 2]));
        let mut f = Arr::zeros(IxDyn(&[2, 2, 2]));
        f[[0, 0, 0]] = 1.0;
        f[[0, 1, 1]] = 2.0;
        f[[1, 1, 0]] = 3.0;
        f[[1, 1, 1]] = 4.0;
        let flows = flows_from(&tape, &[f.clone()]);
        let valid = Array2::ones((2, 2));
        let loss = l_sup_sequence(
            &flows,
            &y,
            &valid,
            0.8,
            PenaltyMode::L1,
            &RobustLossParams::default(),
        )
        .unwrap();
        // Independent per-pixel summation oracle.
        let mut acc = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                for c in 0..2 {
                    acc += f[[i, j, c]].abs();
                }
            }
        }
        let oracle = acc / 8.0;
        assert!((loss.item() - oracle).abs() < 1e-15);
        assert!((loss.item() - 10.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn l_sup_empty_valid_mask_is_an_error() {
        let tape = Tape::new();
        let y = Arr::zeros(IxDyn(&[2, 2, 2]));
        let flows = flows_from(&tape, &[y.clone()]);
        let valid = Array2::zeros((2, 2));
        assert!(l_sup_sequence(
            &flows,
            &y,
            &valid,
            0.8,
            PenaltyMode::L1,
            &RobustLossParams::default()
        )
        .is_err());
    }

    #[test]
    fn l_fs_all_steps_at_pseudo_label_hits_floor() {
        // Every student flow equals the pseudo-label: loss = eps^q · Σ γ^(n−i).
        let p = RobustLossParams::default();
        let tape = Tape::new();
        let label = Arr::from_elem(IxDyn(&[3, 3, 2]), 2.0);
        let flows = flows_from(&tape, &[label.clone(), label.clone(), label.clone()]);
        let loss = l_fs_sequence(&flows, &label, 0.8, &p, Reduction::MeanValid).unwrap();
        let floor = 1e-3f64.powf(0.8) * (1.0 + 0.8 + 0.64);
        assert!((loss.item() - floor).abs() < 1e-15);
    }

    #[test]
    fn l_fs_three_step_decay_matches_direct_sum_oracle() {
        let p = RobustLossParams::default();
        let tape = Tape::new();
        let label = Arr::zeros(IxDyn(&[2, 2, 2]));
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let arrs: Vec<Arr> = (0..3)
            .map(|_| Arr::from_shape_fn(IxDyn(&[2, 2, 2]), |_| rng.random_range(-2.0..2.0)))
            .collect();
        let flows = flows_from(&tape, &arrs);
        let loss = l_fs_sequence(&flows, &label, 0.8, &p, Reduction::MeanValid).unwrap();
        // Direct weighted-sum oracle with independently computed rho.
        let rho = |x: f64| (x * x + 1e-6).powf(0.4);
        let mut oracle = 0.0;
        for (i, arr) in arrs.iter().enumerate() {
            let mean: f64 = arr.iter().map(|&v| rho(v)).sum::<f64>() / 8.0;
            oracle += 0.8f64.powi((2 - i) as i32) * mean;
        }
        assert!((loss.item() - oracle).abs() < 1e-12);
    }

    #[test]
    fn l_fs_misaligned_windows_rejected() {
        let tape = Tape::new();
        let label = Arr::zeros(IxDyn(&[4, 4, 2]));
        let flows = flows_from(&tape, &[Arr::zeros(IxDyn(&[2, 2, 2]))]);
        assert!(l_fs_sequence(&flows, &label, 0.8, &RobustLossParams::default(), Reduction::MeanValid).is_err());
    }

    #[test]
    fn l_self_with_ground_truth_target_equals_l_sup_charbonnier() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let p = RobustLossParams::default();
        let tape = Tape::new();
        let y = Arr::from_shape_fn(IxDyn(&[3, 3, 2]), |_| rng.random_range(-1.0..1.0));
        let arrs: Vec<Arr> = (0..2)
            .map(|_| Arr::from_shape_fn(IxDyn(&[3, 3, 2]), |_| rng.random_range(-1.0..1.0)))
            .collect();
        let flows = flows_from(&tape, &arrs);
        let a = l_self(&flows, &y, 0.8, &p).unwrap();
        let valid = Array2::ones((3, 3));
        let b = l_sup_sequence(&flows, &y, &valid, 0.8, PenaltyMode::Charbonnier, &p).unwrap();
        assert_eq!(a.item(), b.item());
    }

    #[test]
    fn sequence_losses_gradcheck() {
        let p = RobustLossParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let y = Arr::from_shape_fn(IxDyn(&[4, 4, 2]), |_| rng.random_range(-1.0..1.0));
        let f0 = Arr::from_shape_fn(IxDyn(&[4, 4, 2]), |_| rng.random_range(-1.0..1.0));
        let valid = Array2::from_shape_fn((4, 4), |(i, j)| ((i + j) % 2) as f64);

        for mode in [PenaltyMode::L1, PenaltyMode::Charbonnier] {
            let tape = Tape::new();
            let f = tape.var(f0.clone());
            let loss = l_sup_sequence(&[f], &y, &valid, 0.8, mode, &p).unwrap();
            let grads = backward(loss);
            let ga: Vec<f64> = grads.get(f).unwrap().iter().copied().collect();
            let gn = numeric_grad(
                |v| {
                    let t = Tape::new();
                    let f = t.var(Arr::from_shape_vec(f0.raw_dim(), v.to_vec()).unwrap());
                    l_sup_sequence(&[f], &y, &valid, 0.8, mode, &p).unwrap().item()
                },
                &f0.iter().copied().collect::<Vec<_>>(),
                1e-6,
            );
            assert!(max_rel_error(&ga, &gn) < 1e-4, "mode {mode:?}");
        }
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            gamma_sup: 0.0,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossWeights {
            alpha: -1.0,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
    }
}
