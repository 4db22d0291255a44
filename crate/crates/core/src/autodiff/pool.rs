//! Pooling ops: max pooling with argmax backward, and global average pooling.

use super::{Tape, Var};
use ndarray::{Array2, Array4, ArrayD, Ix4};

impl Tape {
    /// Max pooling over `kxk` windows; padding positions count as -inf.
    pub fn maxpool2d(&self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let x4 = xv.view().into_dimensionality::<Ix4>().expect("pool x 4-d");
        let (b, c, h, w) = x4.dim();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut out = Array4::<f64>::zeros((b, c, oh, ow));
        // Flat input index of each window maximum, for routing gradients.
        let mut argmax = vec![0usize; b * c * oh * ow];
        for bi in 0..b {
            for ci in 0..c {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for ki in 0..k {
                            let ii = (oi * stride + ki) as isize - pad as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for kj in 0..k {
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                let v = x4[[bi, ci, ii as usize, jj as usize]];
                                if v > best {
                                    best = v;
                                    best_idx = ((bi * c + ci) * h + ii as usize) * w + jj as usize;
                                }
                            }
                        }
                        out[[bi, ci, oi, oj]] = best;
                        argmax[((bi * c + ci) * oh + oi) * ow + oj] = best_idx;
                    }
                }
            }
        }
        self.op(
            out.into_dyn(),
            &[x],
            Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = vec![0.0f64; b * c * h * w];
                for bi in 0..b {
                    for ci in 0..c {
                        for oi in 0..oh {
                            for oj in 0..ow {
                                dx[argmax[((bi * c + ci) * oh + oi) * ow + oj]] +=
                                    g4[[bi, ci, oi, oj]];
                            }
                        }
                    }
                }
                let dx = ArrayD::from_shape_vec(vec![b, c, h, w], dx).unwrap();
                vec![(x.id, dx)]
            }),
        )
    }

    /// Global average pooling: `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&self, x: Var) -> Var {
        let xv = self.value(x);
        let x4 = xv.view().into_dimensionality::<Ix4>().expect("gap x 4-d");
        let (b, c, h, w) = x4.dim();
        let area = (h * w) as f64;
        let mut out = Array2::<f64>::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                let mut s = 0.0;
                for hi in 0..h {
                    for wi in 0..w {
                        s += x4[[bi, ci, hi, wi]];
                    }
                }
                out[[bi, ci]] = s / area;
            }
        }
        self.op(
            out.into_dyn(),
            &[x],
            Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let mut dx = ArrayD::<f64>::zeros(vec![b, c, h, w]);
                for bi in 0..b {
                    for ci in 0..c {
                        let gv = g2[[bi, ci]] / area;
                        for hi in 0..h {
                            for wi in 0..w {
                                dx[[bi, ci, hi, wi]] = gv;
                            }
                        }
                    }
                }
                vec![(x.id, dx)]
            }),
        )
    }
}
