//! Photometric machinery: differentiable warping, soft census loss,
//! edge-aware smoothness, occlusion estimation, and the unsupervised
//! objective that combines them.

use super::{RobustLossParams, UnsupConfig};
use crate::autodiff::{bilinear_sample, neighbor_diff, Arr, Tape, Var};
use crate::{Error, Result};
use ndarray::{Array2, Array3, IxDyn};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OcclusionMethod {
    #[default]
    Wang,
    Brox,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmoothOrder {
    First,
    Second,
}

/// Backward-warp `image` by `flow`: `out(p) = image(p + flow(p))` with
/// bilinear sampling. The mask is 1 where the sample point stayed in bounds.
pub fn warp<'t>(image: Var<'t>, flow: Var<'t>) -> (Var<'t>, Array2<f64>) {
    let shape = flow.shape();
    let (h, w) = (shape[0], shape[1]);
    let base = Arr::from_shape_fn(IxDyn(&[h, w, 2]), |ix| {
        if ix[2] == 0 {
            ix[1] as f64
        } else {
            ix[0] as f64
        }
    });
    let coords = flow.add_arr(&base);
    bilinear_sample(image, coords)
}

/// Warp from an uncropped second frame: view pixel (i, j) samples the full
/// frame at `(offset + (j, i)) + flow(i, j)`, so motion that leaves the crop
/// window is still observed.
pub fn warp_from_full<'t>(
    tape: &'t Tape,
    x2_full: &Array3<f64>,
    offset: (usize, usize), // (offset_x, offset_y)
    flow: Var<'t>,
) -> (Var<'t>, Array2<f64>) {
    let shape = flow.shape();
    let (h, w) = (shape[0], shape[1]);
    let base = Arr::from_shape_fn(IxDyn(&[h, w, 2]), |ix| {
        if ix[2] == 0 {
            (ix[1] + offset.0) as f64
        } else {
            (ix[0] + offset.1) as f64
        }
    });
    let coords = flow.add_arr(&base);
    let image = tape.var(x2_full.clone().into_dyn());
    bilinear_sample(image, coords)
}

/// Plain-array warp used by occlusion estimation (no gradients involved).
pub fn warp_arr(image: &Array3<f64>, flow: &Array3<f64>) -> (Array3<f64>, Array2<f64>) {
    let tape = Tape::new();
    let (out, mask) = warp(tape.var(image.clone().into_dyn()), tape.var(flow.clone().into_dyn()));
    let out3 = out
        .value()
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap()
        .to_owned();
    (out3, mask)
}

fn luma_const(image: &Array3<f64>) -> Array2<f64> {
    let (h, w, _) = image.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        (0.299 * image[[i, j, 0]] + 0.587 * image[[i, j, 1]] + 0.114 * image[[i, j, 2]]) * 255.0
    })
}

fn luma_var<'t>(image: Var<'t>) -> Var<'t> {
    let shape = image.shape();
    let r = image.slice_channels(0, 1).mul_scalar(0.299 * 255.0);
    let g = image.slice_channels(1, 2).mul_scalar(0.587 * 255.0);
    let b = image.slice_channels(2, 3).mul_scalar(0.114 * 255.0);
    r.add(g).add(b).reshape(&[shape[0], shape[1]])
}

/// Census descriptors: normalized neighbor−center differences
/// `d / sqrt(0.81 + d²)` over the window, on 0–255 luma.
fn census_descriptors<'t>(gray: Var<'t>, window: usize) -> Var<'t> {
    let d = neighbor_diff(gray, window);
    let den = d.mul(d).add_scalar(0.81).powf_const(-0.5);
    d.mul(den)
}

/// Soft census loss between a reference frame and a warped frame.
///
/// Descriptor distance is a soft Hamming sum `Σ_k sd_k/(0.1 + sd_k)` over
/// window channels, pushed through a robust penalty that vanishes at zero
/// (`(h + 0.01)^0.4 − 0.01^0.4`) and averaged over the masked interior
/// (a window/2 border is always excluded). Identical frames give exactly 0,
/// and a uniform additive intensity shift on both frames cancels in the
/// neighbor differences.
pub fn census_loss<'t>(
    x1: &Array3<f64>,
    x2_warped: Var<'t>,
    mask: &Array2<f64>,
    window: usize,
) -> Result<Var<'t>> {
    let (h, w, _) = x1.dim();
    let shape = x2_warped.shape();
    if shape != vec![h, w, 3] {
        return Err(Error::Shape(format!(
            "census: frames differ, {h}x{w}x3 vs {shape:?}"
        )));
    }
    if window % 2 == 0 || window < 3 {
        return Err(Error::Config(format!("census window must be odd >= 3, got {window}")));
    }
    if window > h || window > w {
        return Err(Error::Config(format!(
            "census window {window} larger than image {h}x{w}"
        )));
    }
    if mask.dim() != (h, w) {
        return Err(Error::Shape("census mask shape mismatch".into()));
    }

    let tape = x2_warped.tape();
    let gray1 = tape.var(luma_const(x1).into_dyn());
    let desc1 = census_descriptors(gray1, window);
    let desc2 = census_descriptors(luma_var(x2_warped), window);

    let diff = desc2.sub(desc1);
    let sd = diff.mul(diff);
    let soft = sd.div(sd.add_scalar(0.1));
    let hamming = soft.sum_last_axis();
    let floor = 0.01f64.powf(0.4);
    let pen = hamming.add_scalar(0.01).powf_const(0.4).add_scalar(-floor);

    // Exclude the border where descriptors see outside the image.
    let r = window / 2;
    let mut m = mask.clone();
    for i in 0..h {
        for j in 0..w {
            if i < r || j < r || i >= h - r || j >= w - r {
                m[[i, j]] = 0.0;
            }
        }
    }
    let denom = m.sum() + 1e-6;
    Ok(pen.mul_arr(&m.into_dyn()).sum().mul_scalar(1.0 / denom))
}

/// Edge-aware smoothness penalty on a flow field.
///
/// For each spatial direction, flow differences of the requested order are
/// weighted by `exp(−edge_lambda · mean_c|∂image|)` and averaged; the two
/// directional terms are averaged.
pub fn smoothness_loss<'t>(
    flow: Var<'t>,
    image: &Array3<f64>,
    order: SmoothOrder,
    edge_lambda: f64,
) -> Result<Var<'t>> {
    let shape = flow.shape();
    let (h, w) = (shape[0], shape[1]);
    if image.dim().0 != h || image.dim().1 != w {
        return Err(Error::Shape("smoothness: image/flow shape mismatch".into()));
    }
    let need = match order {
        SmoothOrder::First => 2,
        SmoothOrder::Second => 3,
    };
    if h < need || w < need {
        return Err(Error::Shape("smoothness: field too small for order".into()));
    }

    let img_dx = |i: usize, j: usize| -> f64 {
        (0..3).map(|c| (image[[i, j + 1, c]] - image[[i, j, c]]).abs()).sum::<f64>() / 3.0
    };
    let img_dy = |i: usize, j: usize| -> f64 {
        (0..3).map(|c| (image[[i + 1, j, c]] - image[[i, j, c]]).abs()).sum::<f64>() / 3.0
    };

    let term = |d: Var<'t>, weights: Arr| -> Var<'t> {
        let n = d.value().len() as f64;
        d.abs().mul_arr(&weights).sum().mul_scalar(1.0 / n)
    };

    let (tx, ty) = match order {
        SmoothOrder::First => {
            let dx = flow.slice_spatial(0, h, 1, w).sub(flow.slice_spatial(0, h, 0, w - 1));
            let wx = Arr::from_shape_fn(IxDyn(&[h, w - 1, 2]), |ix| {
                (-edge_lambda * img_dx(ix[0], ix[1])).exp()
            });
            let dy = flow.slice_spatial(1, h, 0, w).sub(flow.slice_spatial(0, h - 1, 0, w));
            let wy = Arr::from_shape_fn(IxDyn(&[h - 1, w, 2]), |ix| {
                (-edge_lambda * img_dy(ix[0], ix[1])).exp()
            });
            (term(dx, wx), term(dy, wy))
        }
        SmoothOrder::Second => {
            let d2x = flow
                .slice_spatial(0, h, 2, w)
                .sub(flow.slice_spatial(0, h, 1, w - 1).mul_scalar(2.0))
                .add(flow.slice_spatial(0, h, 0, w - 2));
            let wx = Arr::from_shape_fn(IxDyn(&[h, w - 2, 2]), |ix| {
                let e = 0.5 * (img_dx(ix[0], ix[1]) + img_dx(ix[0], ix[1] + 1));
                (-edge_lambda * e).exp()
            });
            let d2y = flow
                .slice_spatial(2, h, 0, w)
                .sub(flow.slice_spatial(1, h - 1, 0, w).mul_scalar(2.0))
                .add(flow.slice_spatial(0, h - 2, 0, w));
            let wy = Arr::from_shape_fn(IxDyn(&[h - 2, w, 2]), |ix| {
                let e = 0.5 * (img_dy(ix[0], ix[1]) + img_dy(ix[0] + 1, ix[1]));
                (-edge_lambda * e).exp()
            });
            (term(d2x, wx), term(d2y, wy))
        }
    };
    Ok(tx.add(ty).mul_scalar(0.5))
}

/// Occlusion mask for frame 1 (1 = visible in frame 2).
///
/// `brox`: forward-backward consistency — occluded where
/// `‖f_fw + f_bw∘w‖² ≥ α₁(‖f_fw‖² + ‖f_bw∘w‖²) + α₂` with α₁ = 0.01,
/// α₂ = 0.5, or where the lookup leaves the frame.
///
/// `wang`: a range map built by bilinearly splatting ones along the backward
/// flow; frame-1 pixels whose accumulated coverage falls below 0.95 are
/// occluded.
pub fn occlusion_mask(
    flow_fw: &Array3<f64>,
    flow_bw: &Array3<f64>,
    method: OcclusionMethod,
) -> Array2<f64> {
    let (h, w, _) = flow_fw.dim();
    match method {
        OcclusionMethod::None => Array2::ones((h, w)),
        OcclusionMethod::Brox => {
            let (bw_at_fw, in_bounds) = warp_arr(flow_bw, flow_fw);
            let mut mask = Array2::zeros((h, w));
            for i in 0..h {
                for j in 0..w {
                    if in_bounds[[i, j]] == 0.0 {
                        continue;
                    }
                    let fw = [flow_fw[[i, j, 0]], flow_fw[[i, j, 1]]];
                    let bw = [bw_at_fw[[i, j, 0]], bw_at_fw[[i, j, 1]]];
                    let resid = (fw[0] + bw[0]).powi(2) + (fw[1] + bw[1]).powi(2);
                    let bound = 0.01
                        * (fw[0] * fw[0] + fw[1] * fw[1] + bw[0] * bw[0] + bw[1] * bw[1])
                        + 0.5;
                    if resid < bound {
                        mask[[i, j]] = 1.0;
                    }
                }
            }
            mask
        }
        OcclusionMethod::Wang => {
            let mut coverage = Array2::<f64>::zeros((h, w));
            for i in 0..h {
                for j in 0..w {
                    let tx = j as f64 + flow_bw[[i, j, 0]];
                    let ty = i as f64 + flow_bw[[i, j, 1]];
                    let (x0, y0) = (tx.floor(), ty.floor());
                    let (fx, fy) = (tx - x0, ty - y0);
                    for (yy, wy) in [(y0, 1.0 - fy), (y0 + 1.0, fy)] {
                        if yy < 0.0 || yy > (h - 1) as f64 {
                            continue;
                        }
                        for (xx, wx) in [(x0, 1.0 - fx), (x0 + 1.0, fx)] {
                            if xx < 0.0 || xx > (w - 1) as f64 {
                                continue;
                            }
                            coverage[[yy as usize, xx as usize]] += wy * wx;
                        }
                    }
                }
            }
            coverage.mapv(|c| if c >= 0.95 { 1.0 } else { 0.0 })
        }
    }
}

/// Inputs for the unsupervised objective.
pub struct UnsupInputs<'a> {
    /// Reference frame at the flow's resolution.
    pub x1: &'a Array3<f64>,
    /// Second frame at the flow's resolution (used when no full frame).
    pub x2: &'a Array3<f64>,
    /// Uncropped second frame plus the view's offset (x, y); when present,
    /// warping samples the full frame so out-of-crop motion stays visible.
    pub x2_full: Option<(&'a Array3<f64>, (usize, usize))>,
}

/// Unsupervised loss: occlusion-masked census photometric term plus weighted
/// first/second-order smoothness, accumulated over the flow sequence with
/// decay `gamma`.
///
/// Returns the loss and a flag set when the photometric term was skipped
/// because (nearly) every pixel was masked out.
pub fn l_unsup<'t>(
    inputs: &UnsupInputs<'_>,
    flows: &[Var<'t>],
    flow_bw_final: Option<&Array3<f64>>,
    cfg: &UnsupConfig,
    _p: &RobustLossParams,
    gamma: f64,
) -> Result<(Var<'t>, bool)> {
    cfg.validate()?;
    if flows.is_empty() {
        return Err(Error::Config("l_unsup needs at least one flow".into()));
    }
    let tape = flows[0].tape();
    if cfg.census_weight == 0.0 && cfg.smooth1_weight == 0.0 && cfg.smooth2_weight == 0.0 {
        return Ok((tape.scalar(0.0), false));
    }

    let occ = if cfg.census_weight > 0.0 {
        match cfg.occlusion {
            OcclusionMethod::None => {
                let s = flows.last().unwrap().shape();
                Array2::ones((s[0], s[1]))
            }
            method => {
                let bw = flow_bw_final.ok_or_else(|| {
                    Error::Config("occlusion handling requires a backward flow".into())
                })?;
                let fw = flows
                    .last()
                    .unwrap()
                    .value()
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap()
                    .to_owned();
                occlusion_mask(&fw, bw, method)
            }
        }
    } else {
        let s = flows.last().unwrap().shape();
        Array2::ones((s[0], s[1]))
    };

    let n = flows.len();
    let mut total = tape.scalar(0.0);
    let mut skipped = false;
    for (i, flow) in flows.iter().enumerate() {
        let weight = gamma.powi((n - 1 - i) as i32);
        if cfg.census_weight > 0.0 {
            let (warped, warp_mask) = match inputs.x2_full {
                Some((full, offset)) => warp_from_full(tape, full, offset, *flow),
                None => {
                    let x2 = tape.var(inputs.x2.clone().into_dyn());
                    warp(x2, *flow)
                }
            };
            let mask = &occ * &warp_mask;
            if mask.sum() < 1.0 {
                skipped = true;
            } else {
                let census = census_loss(inputs.x1, warped, &mask, cfg.census_window)?;
                total = total.add(census.mul_scalar(weight * cfg.census_weight));
            }
        }
        if cfg.smooth1_weight > 0.0 {
            let s = smoothness_loss(*flow, inputs.x1, SmoothOrder::First, cfg.edge_lambda)?;
            total = total.add(s.mul_scalar(weight * cfg.smooth1_weight));
        }
        if cfg.smooth2_weight > 0.0 {
            let s = smoothness_loss(*flow, inputs.x1, SmoothOrder::Second, cfg.edge_lambda)?;
            total = total.add(s.mul_scalar(weight * cfg.smooth2_weight));
        }
    }
    Ok((total, skipped))
}

/// Unsupervised teacher loss: the same objective applied to supervisor
/// outputs (gradients reach the supervisor parameters only).
pub fn l_tu<'t>(
    inputs: &UnsupInputs<'_>,
    supervisor_flows: &[Var<'t>],
    flow_bw_final: Option<&Array3<f64>>,
    cfg: &UnsupConfig,
    p: &RobustLossParams,
    gamma: f64,
) -> Result<(Var<'t>, bool)> {
    l_unsup(inputs, supervisor_flows, flow_bw_final, cfg, p, gamma)
}
