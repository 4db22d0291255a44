//! 2-D convolution on the tape, via im2col and GEMM.
//!
//! Batches are split into at most 8 chunks processed in parallel; every
//! output element is computed by a fixed-order accumulation, so results do
//! not depend on thread scheduling.

use super::{Tape, Var};
use ndarray::linalg::general_mat_mul;
use ndarray::parallel::prelude::*;
use ndarray::{Array2, Array4, ArrayView4, ArrayViewMut4, Axis, Ix1, Ix4};
use std::rc::Rc;

/// Per-chunk backward contribution: (weight grad, input grad), each optional.
type ChunkGrads = (Option<Array2<f64>>, Option<Array4<f64>>);

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvSpec {
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kh) / self.stride + 1,
            (w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }
}

fn batch_chunk(b: usize) -> usize {
    b.div_ceil(8).max(1)
}

/// Lay out conv patches of one batch chunk as a `[cin*kh*kw, b*oh*ow]` matrix.
fn im2col(x: &ArrayView4<f64>, spec: ConvSpec, oh: usize, ow: usize) -> Array2<f64> {
    let (b, cin, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((cin * spec.kh * spec.kw, b * oh * ow));
    for bi in 0..b {
        for ci in 0..cin {
            for ki in 0..spec.kh {
                for kj in 0..spec.kw {
                    let row = (ci * spec.kh + ki) * spec.kw + kj;
                    for oi in 0..oh {
                        let ii = (oi * spec.stride + ki) as isize - spec.pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oj in 0..ow {
                            let jj = (oj * spec.stride + kj) as isize - spec.pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            cols[[row, (bi * oh + oi) * ow + oj]] =
                                x[[bi, ci, ii as usize, jj as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add a `[cin*kh*kw, b*oh*ow]` gradient matrix back onto the input.
fn col2im(dcols: &Array2<f64>, dx: &mut ArrayViewMut4<f64>, spec: ConvSpec, oh: usize, ow: usize) {
    let (b, cin, h, w) = dx.dim();
    for bi in 0..b {
        for ci in 0..cin {
            for ki in 0..spec.kh {
                for kj in 0..spec.kw {
                    let row = (ci * spec.kh + ki) * spec.kw + kj;
                    for oi in 0..oh {
                        let ii = (oi * spec.stride + ki) as isize - spec.pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oj in 0..ow {
                            let jj = (oj * spec.stride + kj) as isize - spec.pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            dx[[bi, ci, ii as usize, jj as usize]] +=
                                dcols[[row, (bi * oh + oi) * ow + oj]];
                        }
                    }
                }
            }
        }
    }
}

fn forward_chunk(
    out: &mut ArrayViewMut4<f64>,
    x: &ArrayView4<f64>,
    w_mat: &Array2<f64>,
    bias: &ndarray::ArrayView1<f64>,
    spec: ConvSpec,
) {
    let (b, cout, oh, ow) = out.dim();
    let cols = im2col(x, spec, oh, ow);
    let mut out_mat = Array2::<f64>::zeros((cout, b * oh * ow));
    general_mat_mul(1.0, w_mat, &cols, 0.0, &mut out_mat);
    for bi in 0..b {
        for co in 0..cout {
            let bv = bias[co];
            for oi in 0..oh {
                for oj in 0..ow {
                    out[[bi, co, oi, oj]] = out_mat[[co, (bi * oh + oi) * ow + oj]] + bv;
                }
            }
        }
    }
}

/// Plain (tape-free) convolution forward pass.
pub fn conv2d_raw(
    x: &Array4<f64>,
    weight: &Array4<f64>,
    bias: &ndarray::Array1<f64>,
    spec: ConvSpec,
) -> Array4<f64> {
    let (b, cin, h, w) = x.dim();
    let (cout, wcin, kh, kw) = weight.dim();
    assert_eq!(cin, wcin, "conv2d: input channel mismatch");
    assert_eq!((kh, kw), (spec.kh, spec.kw), "conv2d: kernel spec mismatch");
    assert_eq!(bias.len(), cout, "conv2d: bias length");
    let (oh, ow) = spec.out_size(h, w);
    let w_mat = weight
        .view()
        .into_shape_with_order((cout, cin * kh * kw))
        .unwrap()
        .to_owned();
    let mut out = Array4::<f64>::zeros((b, cout, oh, ow));
    let chunk = batch_chunk(b);
    out.axis_chunks_iter_mut(Axis(0), chunk)
        .into_par_iter()
        .zip(x.axis_chunks_iter(Axis(0), chunk).into_par_iter())
        .for_each(|(mut oc, xc)| {
            forward_chunk(&mut oc.view_mut(), &xc.view(), &w_mat, &bias.view(), spec);
        });
    out
}

impl Tape {
    /// Convolution with bias: `x [B,Cin,H,W] ⊛ w [Cout,Cin,kh,kw] + b [Cout]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let x4 = xv.view().into_dimensionality::<Ix4>().expect("conv x 4-d");
        let w4 = wv.view().into_dimensionality::<Ix4>().expect("conv w 4-d");
        let b1 = bv.view().into_dimensionality::<Ix1>().expect("conv b 1-d");
        let (bn, cin, h, win) = x4.dim();
        let (cout, wcin, kh, kw) = w4.dim();
        assert_eq!(cin, wcin, "conv2d: input channel mismatch");
        assert_eq!(b1.len(), cout, "conv2d: bias length");
        let spec = ConvSpec {
            stride,
            pad,
            kh,
            kw,
        };
        let (oh, ow) = spec.out_size(h, win);
        let out = conv2d_raw(
            &x4.to_owned(),
            &w4.to_owned(),
            &b1.to_owned(),
            spec,
        );

        let (nx, nw, nb) = (self.needs_grad(x), self.needs_grad(w), self.needs_grad(b));
        let xv2 = Rc::clone(&xv);
        let wv2 = Rc::clone(&wv);
        self.op(
            out.into_dyn(),
            &[x, w, b],
            Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let x4 = xv2.view().into_dimensionality::<Ix4>().unwrap();
                let w_mat = wv2
                    .view()
                    .into_shape_with_order((cout, cin * kh * kw))
                    .unwrap()
                    .to_owned();
                let chunk = batch_chunk(bn);
                let mut contribs = Vec::new();

                // Per-chunk gradient matrices; chunk results are reduced in
                // index order so the sum is scheduling-independent.
                let chunk_results: Vec<ChunkGrads> = g4
                    .axis_chunks_iter(Axis(0), chunk)
                    .into_par_iter()
                    .zip(x4.axis_chunks_iter(Axis(0), chunk).into_par_iter())
                    .map(|(gc, xc)| {
                        let cb = gc.dim().0;
                        let mut g_mat = Array2::<f64>::zeros((cout, cb * oh * ow));
                        for bi in 0..cb {
                            for co in 0..cout {
                                for oi in 0..oh {
                                    for oj in 0..ow {
                                        g_mat[[co, (bi * oh + oi) * ow + oj]] =
                                            gc[[bi, co, oi, oj]];
                                    }
                                }
                            }
                        }
                        let dw = if nw {
                            let cols = im2col(&xc.view(), spec, oh, ow);
                            let mut dw = Array2::<f64>::zeros((cout, cin * kh * kw));
                            general_mat_mul(1.0, &g_mat, &cols.t().to_owned(), 0.0, &mut dw);
                            Some(dw)
                        } else {
                            None
                        };
                        let dx = if nx {
                            let mut dcols = Array2::<f64>::zeros((cin * kh * kw, cb * oh * ow));
                            general_mat_mul(1.0, &w_mat.t().to_owned(), &g_mat, 0.0, &mut dcols);
                            let mut dxc = Array4::<f64>::zeros((cb, cin, h, win));
                            col2im(&dcols, &mut dxc.view_mut(), spec, oh, ow);
                            Some(dxc)
                        } else {
                            None
                        };
                        (dw, dx)
                    })
                    .collect();

                if nw {
                    let mut dw_total = Array2::<f64>::zeros((cout, cin * kh * kw));
                    for (dw, _) in &chunk_results {
                        dw_total += dw.as_ref().unwrap();
                    }
                    contribs.push((
                        w.id,
                        dw_total
                            .into_shape_with_order((cout, cin, kh, kw))
                            .unwrap()
                            .into_dyn(),
                    ));
                }
                if nx {
                    let mut dx = Array4::<f64>::zeros((bn, cin, h, win));
                    let mut offset = 0;
                    for (_, dxc) in &chunk_results {
                        let dxc = dxc.as_ref().unwrap();
                        let cb = dxc.dim().0;
                        dx.slice_mut(ndarray::s![offset..offset + cb, .., .., ..])
                            .assign(dxc);
                        offset += cb;
                    }
                    contribs.push((x.id, dx.into_dyn()));
                }
                if nb {
                    let mut db = ndarray::Array1::<f64>::zeros(cout);
                    for bi in 0..bn {
                        for co in 0..cout {
                            for oi in 0..oh {
                                for oj in 0..ow {
                                    db[co] += g4[[bi, co, oi, oj]];
                                }
                            }
                        }
                    }
                    contribs.push((b.id, db.into_dyn()));
                }
                contribs
            }),
        )
    }
}
