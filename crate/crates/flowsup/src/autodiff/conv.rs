//! 2-D convolution as an im2col + GEMM tape operation.

use super::{Arr, Edge, Var};
use ndarray::{Array2, IxDyn};
use std::rc::Rc;

/// Same-padded 2-D convolution.
///
/// `x` is `[H, W, Cin]`, `w` is `[KH, KW, Cin, Cout]` (odd kernel sides),
/// `b` is `[Cout]`. Output is `[H', W', Cout]` with
/// `H' = (H + 2·(KH/2) − KH)/stride + 1`.
pub fn conv2d<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>, stride: usize) -> Var<'t> {
    let xv = x.value();
    let wv = w.value();
    let bv = b.value();
    assert_eq!(xv.ndim(), 3, "conv2d: input must be [H,W,Cin]");
    assert_eq!(wv.ndim(), 4, "conv2d: weight must be [KH,KW,Cin,Cout]");
    let (h, win, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    let (kh, kw, wcin, cout) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
    assert_eq!(cin, wcin, "conv2d: channel mismatch");
    assert_eq!(bv.len(), cout, "conv2d: bias length mismatch");
    assert!(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel sides must be odd");
    assert!(stride >= 1);

    let (ph, pw) = (kh / 2, kw / 2);
    let oh = (h + 2 * ph - kh) / stride + 1;
    let ow = (win + 2 * pw - kw) / stride + 1;

    let col = Rc::new(im2col(&xv, kh, kw, stride));
    let w2 = wv
        .to_shape((kh * kw * cin, cout))
        .unwrap()
        .to_owned();
    let mut y2 = col.dot(&w2);
    for mut row in y2.rows_mut() {
        for (c, v) in row.iter_mut().enumerate() {
            *v += bv[[c]];
        }
    }
    let value = y2.into_shape_with_order((oh, ow, cout)).unwrap().into_dyn();

    let in_shape = (h, win, cin);
    let col_x = Rc::clone(&col);
    let w2_c = w2.clone();
    let edges = vec![
        Edge {
            parent: x.index,
            vjp: Box::new(move |g| {
                let g2 = g
                    .to_shape((oh * ow, cout))
                    .unwrap()
                    .to_owned();
                let dcol = g2.dot(&w2_c.t());
                col2im(&dcol, in_shape, kh, kw, stride)
            }),
        },
        Edge {
            parent: w.index,
            vjp: Box::new(move |g| {
                let g2 = g.to_shape((oh * ow, cout)).unwrap().to_owned();
                let dw2 = col_x.t().dot(&g2);
                dw2.into_shape_with_order((kh, kw, cin, cout))
                    .unwrap()
                    .into_dyn()
            }),
        },
        Edge {
            parent: b.index,
            vjp: Box::new(move |g| {
                let g2 = g.to_shape((oh * ow, cout)).unwrap().to_owned();
                g2.sum_axis(ndarray::Axis(0)).into_dyn()
            }),
        },
    ];
    x.tape.push(value, edges)
}

fn im2col(x: &Arr, kh: usize, kw: usize, stride: usize) -> Array2<f64> {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ph, pw) = (kh / 2, kw / 2);
    let oh = (h + 2 * ph - kh) / stride + 1;
    let ow = (w + 2 * pw - kw) / stride + 1;
    let xs = x.as_standard_layout();
    let xsl = xs.as_slice().unwrap();
    let mut col = Array2::<f64>::zeros((oh * ow, kh * kw * cin));
    let csl = col.as_slice_mut().unwrap();
    let row_len = kh * kw * cin;
    for oy in 0..oh {
        for ox in 0..ow {
            let rbase = (oy * ow + ox) * row_len;
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - ph as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pw as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = ((iy as usize) * w + ix as usize) * cin;
                    let dst = rbase + (ky * kw + kx) * cin;
                    csl[dst..dst + cin].copy_from_slice(&xsl[src..src + cin]);
                }
            }
        }
    }
    col
}

fn col2im(dcol: &Array2<f64>, in_shape: (usize, usize, usize), kh: usize, kw: usize, stride: usize) -> Arr {
    let (h, w, cin) = in_shape;
    let (ph, pw) = (kh / 2, kw / 2);
    let oh = (h + 2 * ph - kh) / stride + 1;
    let ow = (w + 2 * pw - kw) / stride + 1;
    let mut dx = Arr::zeros(IxDyn(&[h, w, cin]));
    let dxs = dx.as_slice_mut().unwrap();
    let ds = dcol.as_slice().unwrap();
    let row_len = kh * kw * cin;
    for oy in 0..oh {
        for ox in 0..ow {
            let rbase = (oy * ow + ox) * row_len;
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - ph as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pw as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = ((iy as usize) * w + ix as usize) * cin;
                    let src = rbase + (ky * kw + kx) * cin;
                    for c in 0..cin {
                        dxs[dst + c] += ds[src + c];
                    }
                }
            }
        }
    }
    dx
}
