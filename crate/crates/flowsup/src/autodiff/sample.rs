//! Sampling operators: bilinear image sampling, bilinear upsampling,
//! windowed correlation lookup, and census neighbor differences.

use super::{Arr, Edge, Var};
use ndarray::{Array2, IxDyn};
use std::rc::Rc;

/// Bilinear taps for coordinate `c` on an axis of length `n` (n >= 2):
/// returns (i0, i1, frac) with coordinates clamped to the valid range.
#[inline]
fn taps(c: f64, n: usize) -> (usize, usize, f64) {
    let cl = c.clamp(0.0, (n - 1) as f64);
    let i0 = (cl.floor() as usize).min(n - 2);
    (i0, i0 + 1, cl - i0 as f64)
}

/// Sample `img` (`[H, W, C]`) at real coordinates `coords` (`[H2, W2, 2]`,
/// channel 0 = x, channel 1 = y). Coordinates are clamped to the border;
/// the returned mask is 1 where the untouched coordinate was in bounds.
///
/// Differentiable in both the image and the coordinates; the coordinate
/// gradient is zero wherever clamping was active.
pub fn bilinear_sample<'t>(img: Var<'t>, coords: Var<'t>) -> (Var<'t>, Array2<f64>) {
    let iv = img.value();
    let cv = coords.value();
    assert_eq!(iv.ndim(), 3, "bilinear_sample: image must be [H,W,C]");
    assert_eq!(cv.ndim(), 3, "bilinear_sample: coords must be [H2,W2,2]");
    assert_eq!(cv.shape()[2], 2, "bilinear_sample: coords last dim must be 2");
    let (h, w, c) = (iv.shape()[0], iv.shape()[1], iv.shape()[2]);
    assert!(h >= 2 && w >= 2, "bilinear_sample: image too small");
    let (oh, ow) = (cv.shape()[0], cv.shape()[1]);

    let ivs = Rc::new(iv.as_standard_layout().to_owned());
    let cvs = Rc::new(cv.as_standard_layout().to_owned());
    let isl = ivs.as_slice().unwrap();
    let csl = cvs.as_slice().unwrap();

    let mut out = Arr::zeros(IxDyn(&[oh, ow, c]));
    let mut mask = Array2::<f64>::zeros((oh, ow));
    {
        let osl = out.as_slice_mut().unwrap();
        for i in 0..oh {
            for j in 0..ow {
                let x = csl[(i * ow + j) * 2];
                let y = csl[(i * ow + j) * 2 + 1];
                if x >= 0.0 && x <= (w - 1) as f64 && y >= 0.0 && y <= (h - 1) as f64 {
                    mask[[i, j]] = 1.0;
                }
                let (x0, x1, wx) = taps(x, w);
                let (y0, y1, wy) = taps(y, h);
                let base = (i * ow + j) * c;
                for ch in 0..c {
                    let v00 = isl[(y0 * w + x0) * c + ch];
                    let v01 = isl[(y0 * w + x1) * c + ch];
                    let v10 = isl[(y1 * w + x0) * c + ch];
                    let v11 = isl[(y1 * w + x1) * c + ch];
                    osl[base + ch] = (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01)
                        + wy * ((1.0 - wx) * v10 + wx * v11);
                }
            }
        }
    }

    let cv_img = Rc::clone(&cvs);
    let iv_coord = Rc::clone(&ivs);
    let cv_coord = Rc::clone(&cvs);
    let edges = vec![
        Edge {
            parent: img.index,
            vjp: Box::new(move |g| {
                let gs = g.as_standard_layout();
                let gsl = gs.as_slice().unwrap();
                let csl = cv_img.as_slice().unwrap();
                let mut dimg = Arr::zeros(IxDyn(&[h, w, c]));
                let dsl = dimg.as_slice_mut().unwrap();
                for i in 0..oh {
                    for j in 0..ow {
                        let x = csl[(i * ow + j) * 2];
                        let y = csl[(i * ow + j) * 2 + 1];
                        let (x0, x1, wx) = taps(x, w);
                        let (y0, y1, wy) = taps(y, h);
                        let base = (i * ow + j) * c;
                        for ch in 0..c {
                            let gv = gsl[base + ch];
                            dsl[(y0 * w + x0) * c + ch] += gv * (1.0 - wy) * (1.0 - wx);
                            dsl[(y0 * w + x1) * c + ch] += gv * (1.0 - wy) * wx;
                            dsl[(y1 * w + x0) * c + ch] += gv * wy * (1.0 - wx);
                            dsl[(y1 * w + x1) * c + ch] += gv * wy * wx;
                        }
                    }
                }
                dimg
            }),
        },
        Edge {
            parent: coords.index,
            vjp: Box::new(move |g| {
                let gs = g.as_standard_layout();
                let gsl = gs.as_slice().unwrap();
                let isl = iv_coord.as_slice().unwrap();
                let csl = cv_coord.as_slice().unwrap();
                let mut dc = Arr::zeros(IxDyn(&[oh, ow, 2]));
                let dsl = dc.as_slice_mut().unwrap();
                for i in 0..oh {
                    for j in 0..ow {
                        let x = csl[(i * ow + j) * 2];
                        let y = csl[(i * ow + j) * 2 + 1];
                        // Clamped coordinates are constants: no gradient.
                        let x_active = x > 0.0 && x < (w - 1) as f64;
                        let y_active = y > 0.0 && y < (h - 1) as f64;
                        let (x0, x1, wx) = taps(x, w);
                        let (y0, y1, wy) = taps(y, h);
                        let base = (i * ow + j) * c;
                        let (mut dx, mut dy) = (0.0, 0.0);
                        for ch in 0..c {
                            let gv = gsl[base + ch];
                            let v00 = isl[(y0 * w + x0) * c + ch];
                            let v01 = isl[(y0 * w + x1) * c + ch];
                            let v10 = isl[(y1 * w + x0) * c + ch];
                            let v11 = isl[(y1 * w + x1) * c + ch];
                            if x_active {
                                dx += gv * ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10));
                            }
                            if y_active {
                                dy += gv * ((1.0 - wx) * (v10 - v00) + wx * (v11 - v01));
                            }
                        }
                        dsl[(i * ow + j) * 2] = dx;
                        dsl[(i * ow + j) * 2 + 1] = dy;
                    }
                }
                dc
            }),
        },
    ];
    (img.tape.push(out, edges), mask)
}

/// Bilinear spatial upsampling of `[h, w, C]` by an integer factor, using
/// half-pixel centers (`src = (dst + 0.5)/f − 0.5`, clamped). Constant
/// fields upsample to constant fields; values are not rescaled.
pub fn upsample_bilinear<'t>(x: Var<'t>, factor: usize) -> Var<'t> {
    let xv = x.value();
    assert_eq!(xv.ndim(), 3, "upsample_bilinear: input must be [h,w,C]");
    assert!(factor >= 1);
    let (h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    let (oh, ow) = (h * factor, w * factor);

    // Per-axis tap tables are shared by the forward and backward passes.
    let make_taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|d| {
                let src = (d as f64 + 0.5) / factor as f64 - 0.5;
                if n_in == 1 {
                    (0, 0, 0.0)
                } else {
                    taps(src, n_in)
                }
            })
            .collect()
    };
    let ty = Rc::new(make_taps(h, oh));
    let tx = Rc::new(make_taps(w, ow));

    let xs = xv.as_standard_layout();
    let xsl = xs.as_slice().unwrap();
    let mut out = Arr::zeros(IxDyn(&[oh, ow, c]));
    {
        let osl = out.as_slice_mut().unwrap();
        for i in 0..oh {
            let (y0, y1, wy) = ty[i];
            for j in 0..ow {
                let (x0, x1, wx) = tx[j];
                let base = (i * ow + j) * c;
                for ch in 0..c {
                    let v00 = xsl[(y0 * w + x0) * c + ch];
                    let v01 = xsl[(y0 * w + x1) * c + ch];
                    let v10 = xsl[(y1 * w + x0) * c + ch];
                    let v11 = xsl[(y1 * w + x1) * c + ch];
                    osl[base + ch] = (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01)
                        + wy * ((1.0 - wx) * v10 + wx * v11);
                }
            }
        }
    }

    let edges = vec![Edge {
        parent: x.index,
        vjp: Box::new(move |g| {
            let gs = g.as_standard_layout();
            let gsl = gs.as_slice().unwrap();
            let mut dx = Arr::zeros(IxDyn(&[h, w, c]));
            let dsl = dx.as_slice_mut().unwrap();
            for i in 0..oh {
                let (y0, y1, wy) = ty[i];
                for j in 0..ow {
                    let (x0, x1, wx) = tx[j];
                    let base = (i * ow + j) * c;
                    for ch in 0..c {
                        let gv = gsl[base + ch];
                        dsl[(y0 * w + x0) * c + ch] += gv * (1.0 - wy) * (1.0 - wx);
                        dsl[(y0 * w + x1) * c + ch] += gv * (1.0 - wy) * wx;
                        dsl[(y1 * w + x0) * c + ch] += gv * wy * (1.0 - wx);
                        dsl[(y1 * w + x1) * c + ch] += gv * wy * wx;
                    }
                }
            }
            dx
        }),
    }];
    x.tape.push(out, edges)
}

/// Windowed correlation lookup.
///
/// `corr` is the all-pairs volume `[Hc, Wc, Hc, Wc]` (`corr[p, q]` is the
/// feature dot product of source cell `p` and target cell `q`). `flow_cells`
/// is a *constant* `[Hc, Wc, 2]` displacement in coarse-cell units (the flow
/// fed to a refinement step is detached, so no coordinate gradient exists).
/// For every cell the volume is sampled bilinearly at the flow-displaced
/// position plus each window offset; taps outside the grid contribute zero.
/// Output is `[Hc, Wc, (2r+1)²]`.
pub fn corr_lookup<'t>(corr: Var<'t>, flow_cells: &Arr, radius: usize) -> Var<'t> {
    let cvol = corr.value();
    assert_eq!(cvol.ndim(), 4, "corr_lookup: volume must be [Hc,Wc,Hc,Wc]");
    let (hc, wc) = (cvol.shape()[0], cvol.shape()[1]);
    assert_eq!(cvol.shape()[2], hc);
    assert_eq!(cvol.shape()[3], wc);
    assert_eq!(flow_cells.shape(), &[hc, wc, 2], "corr_lookup: flow shape");
    let k = 2 * radius + 1;
    let kk = k * k;

    let cs = Rc::new(cvol.as_standard_layout().to_owned());
    let fs = Rc::new(flow_cells.as_standard_layout().to_owned());
    let csl = cs.as_slice().unwrap();
    let fsl = fs.as_slice().unwrap();

    let mut out = Arr::zeros(IxDyn(&[hc, wc, kk]));
    {
        let osl = out.as_slice_mut().unwrap();
        for i in 0..hc {
            for j in 0..wc {
                let cx = j as f64 + fsl[(i * wc + j) * 2];
                let cy = i as f64 + fsl[(i * wc + j) * 2 + 1];
                let vol_base = (i * wc + j) * hc * wc;
                let out_base = (i * wc + j) * kk;
                let mut ki = 0usize;
                for dy in -(radius as isize)..=(radius as isize) {
                    for dx in -(radius as isize)..=(radius as isize) {
                        let x = cx + dx as f64;
                        let y = cy + dy as f64;
                        let mut acc = 0.0;
                        let x0 = x.floor();
                        let y0 = y.floor();
                        let (wx, wy) = (x - x0, y - y0);
                        for (ty, twy) in [(y0, 1.0 - wy), (y0 + 1.0, wy)] {
                            if ty < 0.0 || ty > (hc - 1) as f64 || twy == 0.0 {
                                continue;
                            }
                            for (tx, twx) in [(x0, 1.0 - wx), (x0 + 1.0, wx)] {
                                if tx < 0.0 || tx > (wc - 1) as f64 || twx == 0.0 {
                                    continue;
                                }
                                acc += twy
                                    * twx
                                    * csl[vol_base + (ty as usize) * wc + tx as usize];
                            }
                        }
                        osl[out_base + ki] = acc;
                        ki += 1;
                    }
                }
            }
        }
    }

    let fs_b = Rc::clone(&fs);
    let edges = vec![Edge {
        parent: corr.index,
        vjp: Box::new(move |g| {
            let gs = g.as_standard_layout();
            let gsl = gs.as_slice().unwrap();
            let fsl = fs_b.as_slice().unwrap();
            let mut dvol = Arr::zeros(IxDyn(&[hc, wc, hc, wc]));
            let dsl = dvol.as_slice_mut().unwrap();
            for i in 0..hc {
                for j in 0..wc {
                    let cx = j as f64 + fsl[(i * wc + j) * 2];
                    let cy = i as f64 + fsl[(i * wc + j) * 2 + 1];
                    let vol_base = (i * wc + j) * hc * wc;
                    let out_base = (i * wc + j) * kk;
                    let mut ki = 0usize;
                    for dy in -(radius as isize)..=(radius as isize) {
                        for dx in -(radius as isize)..=(radius as isize) {
                            let gv = gsl[out_base + ki];
                            ki += 1;
                            if gv == 0.0 {
                                continue;
                            }
                            let x = cx + dx as f64;
                            let y = cy + dy as f64;
                            let x0 = x.floor();
                            let y0 = y.floor();
                            let (wx, wy) = (x - x0, y - y0);
                            for (ty, twy) in [(y0, 1.0 - wy), (y0 + 1.0, wy)] {
                                if ty < 0.0 || ty > (hc - 1) as f64 || twy == 0.0 {
                                    continue;
                                }
                                for (tx, twx) in [(x0, 1.0 - wx), (x0 + 1.0, wx)] {
                                    if tx < 0.0 || tx > (wc - 1) as f64 || twx == 0.0 {
                                        continue;
                                    }
                                    dsl[vol_base + (ty as usize) * wc + tx as usize] +=
                                        gv * twy * twx;
                                }
                            }
                        }
                    }
                }
            }
            dvol
        }),
    }];
    corr.tape.push(out, edges)
}

/// Census neighbor differences: for a `[H, W]` intensity map and an odd
/// window `k`, output `[H, W, k²]` where channel (dy, dx) holds
/// `gray[p + (dy, dx)] − gray[p]`. Neighbors outside the image read as zero
/// (callers mask the border away).
pub fn neighbor_diff<'t>(gray: Var<'t>, window: usize) -> Var<'t> {
    let gv = gray.value();
    assert_eq!(gv.ndim(), 2, "neighbor_diff: input must be [H,W]");
    assert!(window % 2 == 1, "neighbor_diff: window must be odd");
    let (h, w) = (gv.shape()[0], gv.shape()[1]);
    let r = (window / 2) as isize;
    let kk = window * window;

    let gs = gv.as_standard_layout();
    let gsl = gs.as_slice().unwrap();
    let mut out = Arr::zeros(IxDyn(&[h, w, kk]));
    {
        let osl = out.as_slice_mut().unwrap();
        for i in 0..h {
            for j in 0..w {
                let center = gsl[i * w + j];
                let base = (i * w + j) * kk;
                let mut ki = 0usize;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (ny, nx) = (i as isize + dy, j as isize + dx);
                        let nb = if ny >= 0 && nx >= 0 && ny < h as isize && nx < w as isize {
                            gsl[(ny as usize) * w + nx as usize]
                        } else {
                            0.0
                        };
                        osl[base + ki] = nb - center;
                        ki += 1;
                    }
                }
            }
        }
    }

    let edges = vec![Edge {
        parent: gray.index,
        vjp: Box::new(move |g| {
            let gsv = g.as_standard_layout();
            let gsl = gsv.as_slice().unwrap();
            let mut dg = Arr::zeros(IxDyn(&[h, w]));
            let dsl = dg.as_slice_mut().unwrap();
            for i in 0..h {
                for j in 0..w {
                    let base = (i * w + j) * kk;
                    let mut ki = 0usize;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let gv = gsl[base + ki];
                            ki += 1;
                            if gv == 0.0 {
                                continue;
                            }
                            let (ny, nx) = (i as isize + dy, j as isize + dx);
                            if ny >= 0 && nx >= 0 && ny < h as isize && nx < w as isize {
                                dsl[(ny as usize) * w + nx as usize] += gv;
                            }
                            dsl[i * w + j] -= gv;
                        }
                    }
                }
            }
            dg
        }),
    }];
    gray.tape.push(out, edges)
}
