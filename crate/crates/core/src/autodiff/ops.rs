//! Elementwise, linear and structural ops on the tape.

use super::{Tape, Var};
use ndarray::{ArrayD, ArrayViewD, Axis, Ix1, Ix2, IxDyn};
use std::rc::Rc;

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let out = av.as_ref() + bv.as_ref();
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        self.op(
            out,
            &[a, b],
            Box::new(move |g| {
                let mut contribs = Vec::new();
                if na {
                    contribs.push((a.id, g.clone()));
                }
                if nb {
                    contribs.push((b.id, g.clone()));
                }
                contribs
            }),
        )
    }

    pub fn mul_scalar(&self, a: Var, k: f64) -> Var {
        let out = self.value(a).as_ref() * k;
        self.op(out, &[a], Box::new(move |g| vec![(a.id, g * k)]))
    }

    pub fn relu(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(|x| x.max(0.0));
        self.op(
            out,
            &[a],
            Box::new(move |g| {
                let mut dx = g.clone();
                dx.zip_mut_with(av.as_ref(), |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                vec![(a.id, dx)]
            }),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = Rc::new(self.value(a).mapv(stable_sigmoid));
        let captured = Rc::clone(&out);
        self.op_rc(
            out,
            &[a],
            Box::new(move |g| {
                let mut dx = g.clone();
                dx.zip_mut_with(captured.as_ref(), |d, &y| *d *= y * (1.0 - y));
                vec![(a.id, dx)]
            }),
        )
    }

    /// Clamp values to `[lo, hi]`; gradient passes only inside the open interval.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let av = self.value(a);
        let out = av.mapv(|x| x.clamp(lo, hi));
        self.op(
            out,
            &[a],
            Box::new(move |g| {
                let mut dx = g.clone();
                dx.zip_mut_with(av.as_ref(), |d, &x| {
                    if x <= lo || x >= hi {
                        *d = 0.0
                    }
                });
                vec![(a.id, dx)]
            }),
        )
    }

    /// Fully connected layer: `x [B,N] · w[M,N]ᵀ + b[M] -> [B,M]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let x2 = xv.view().into_dimensionality::<Ix2>().expect("linear: x 2-d");
        let w2 = wv.view().into_dimensionality::<Ix2>().expect("linear: w 2-d");
        let b1 = bv.view().into_dimensionality::<Ix1>().expect("linear: b 1-d");
        assert_eq!(x2.ncols(), w2.ncols(), "linear: in-features mismatch");
        assert_eq!(w2.nrows(), b1.len(), "linear: bias length mismatch");
        let mut out = x2.dot(&w2.t());
        out += &b1;
        let (nx, nw, nb) = (self.needs_grad(x), self.needs_grad(w), self.needs_grad(b));
        let xv2 = Rc::clone(&xv);
        let wv2 = Rc::clone(&wv);
        self.op(
            out.into_dyn(),
            &[x, w, b],
            Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut contribs = Vec::new();
                if nx {
                    let w2 = wv2.view().into_dimensionality::<Ix2>().unwrap();
                    contribs.push((x.id, g2.dot(&w2).into_dyn()));
                }
                if nw {
                    let x2 = xv2.view().into_dimensionality::<Ix2>().unwrap();
                    contribs.push((w.id, g2.t().dot(&x2).into_dyn()));
                }
                if nb {
                    contribs.push((b.id, g2.sum_axis(Axis(0)).into_dyn()));
                }
                contribs
            }),
        )
    }

    /// Concatenate along axis 1 (the channel/column axis).
    pub fn concat_axis1(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let views: Vec<ArrayViewD<f64>> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_axis1: shape mismatch");
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[1]).collect();
        let needs: Vec<bool> = parts.iter().map(|&p| self.needs_grad(p)).collect();
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.op(
            out,
            parts,
            Box::new(move |g| {
                let mut contribs = Vec::new();
                let mut offset = 0;
                for ((&id, &w), &n) in ids.iter().zip(&widths).zip(&needs) {
                    if n {
                        let slice = g
                            .slice_axis(Axis(1), ndarray::Slice::from(offset..offset + w))
                            .to_owned();
                        contribs.push((id, slice));
                    }
                    offset += w;
                }
                contribs
            }),
        )
    }

    /// Select the half-open channel range `lo..hi` along axis 1.
    pub fn slice_axis1(&self, a: Var, lo: usize, hi: usize) -> Var {
        let av = self.value(a);
        let full = av.shape()[1];
        assert!(lo < hi && hi <= full, "slice_axis1: bad range");
        let out = av
            .slice_axis(Axis(1), ndarray::Slice::from(lo..hi))
            .to_owned();
        let shape: Vec<usize> = av.shape().to_vec();
        self.op(
            out,
            &[a],
            Box::new(move |g| {
                let mut dx = ArrayD::<f64>::zeros(IxDyn(&shape));
                dx.slice_axis_mut(Axis(1), ndarray::Slice::from(lo..hi))
                    .assign(g);
                vec![(a.id, dx)]
            }),
        )
    }

    /// Gather rows along axis 0: `out[k] = x[idx[k]]`.
    pub fn index_select0(&self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let n = av.shape()[0];
        assert!(idx.iter().all(|&i| i < n), "index_select0: out of range");
        let out = av.select(Axis(0), idx);
        let idx = idx.to_vec();
        let shape: Vec<usize> = av.shape().to_vec();
        self.op(
            out,
            &[a],
            Box::new(move |g| {
                let mut dx = ArrayD::<f64>::zeros(IxDyn(&shape));
                for (k, &i) in idx.iter().enumerate() {
                    let mut row = dx.index_axis_mut(Axis(0), i);
                    row += &g.index_axis(Axis(0), k);
                }
                vec![(a.id, dx)]
            }),
        )
    }

    /// Per-channel scaling: `y[b,c,h,w] = x[b,c,h,w] * s[b,c]` (the SE gate).
    pub fn scale_channels(&self, x: Var, s: Var) -> Var {
        let xv = self.value(x);
        let sv = self.value(s);
        let shape = xv.shape().to_vec();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        assert_eq!(sv.shape(), [b, c], "scale_channels: gate shape");
        let mut out = xv.as_ref().clone();
        for bi in 0..b {
            for ci in 0..c {
                let k = sv[[bi, ci]];
                for hi in 0..h {
                    for wi in 0..w {
                        out[[bi, ci, hi, wi]] *= k;
                    }
                }
            }
        }
        let (nx, ns) = (self.needs_grad(x), self.needs_grad(s));
        let xv2 = Rc::clone(&xv);
        let sv2 = Rc::clone(&sv);
        self.op(
            out,
            &[x, s],
            Box::new(move |g| {
                let mut contribs = Vec::new();
                if nx {
                    let mut dx = g.clone();
                    for bi in 0..b {
                        for ci in 0..c {
                            let k = sv2[[bi, ci]];
                            for hi in 0..h {
                                for wi in 0..w {
                                    dx[[bi, ci, hi, wi]] *= k;
                                }
                            }
                        }
                    }
                    contribs.push((x.id, dx));
                }
                if ns {
                    let mut ds = ArrayD::<f64>::zeros(IxDyn(&[b, c]));
                    for bi in 0..b {
                        for ci in 0..c {
                            let mut acc = 0.0;
                            for hi in 0..h {
                                for wi in 0..w {
                                    acc += g[[bi, ci, hi, wi]] * xv2[[bi, ci, hi, wi]];
                                }
                            }
                            ds[[bi, ci]] = acc;
                        }
                    }
                    contribs.push((s.id, ds));
                }
                contribs
            }),
        )
    }

    /// Reparameterized draw: `y[b,c,h,w] = mean[b,c,h,w] + eps[b,0,h,w] * std[b,0,h,w]`,
    /// with the shared std (and eps) broadcast across channels.
    pub fn add_scaled_noise(&self, mean: Var, std: Var, eps: &ArrayD<f64>) -> Var {
        let mv = self.value(mean);
        let sv = self.value(std);
        let shape = mv.shape().to_vec();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        assert_eq!(sv.shape(), [b, 1, h, w], "add_scaled_noise: std shape");
        assert_eq!(eps.shape(), [b, 1, h, w], "add_scaled_noise: eps shape");
        let mut out = mv.as_ref().clone();
        for bi in 0..b {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        out[[bi, ci, hi, wi]] += eps[[bi, 0, hi, wi]] * sv[[bi, 0, hi, wi]];
                    }
                }
            }
        }
        let (nm, ns) = (self.needs_grad(mean), self.needs_grad(std));
        let eps = eps.clone();
        self.op(
            out,
            &[mean, std],
            Box::new(move |g| {
                let mut contribs = Vec::new();
                if nm {
                    contribs.push((mean.id, g.clone()));
                }
                if ns {
                    // d/d std[b,0,h,w] = eps[b,0,h,w] * sum_c g[b,c,h,w]
                    let mut ds = ArrayD::<f64>::zeros(IxDyn(&[b, 1, h, w]));
                    for bi in 0..b {
                        for hi in 0..h {
                            for wi in 0..w {
                                let mut acc = 0.0;
                                for ci in 0..c {
                                    acc += g[[bi, ci, hi, wi]];
                                }
                                ds[[bi, 0, hi, wi]] = acc * eps[[bi, 0, hi, wi]];
                            }
                        }
                    }
                    contribs.push((std.id, ds));
                }
                contribs
            }),
        )
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "mul: shape mismatch");
        let out = av.as_ref() * bv.as_ref();
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let av2 = Rc::clone(&av);
        let bv2 = Rc::clone(&bv);
        self.op(
            out,
            &[a, b],
            Box::new(move |g| {
                let mut contribs = Vec::new();
                if na {
                    contribs.push((a.id, g * bv2.as_ref()));
                }
                if nb {
                    contribs.push((b.id, g * av2.as_ref()));
                }
                contribs
            }),
        )
    }

    /// Group means along axis 0: `out[k] = mean over x[i] for i in groups[k]`.
    ///
    /// Used to build class prototypes (the sample-axis average of each
    /// class's K support features).
    pub fn group_mean_axis0(&self, a: Var, groups: &[Vec<usize>]) -> Var {
        let av = self.value(a);
        let n = av.shape()[0];
        assert!(!groups.is_empty(), "group_mean_axis0: no groups");
        for grp in groups {
            assert!(!grp.is_empty(), "group_mean_axis0: empty group");
            assert!(grp.iter().all(|&i| i < n), "group_mean_axis0: out of range");
        }
        let mut out_shape = av.shape().to_vec();
        out_shape[0] = groups.len();
        let mut out = ArrayD::<f64>::zeros(IxDyn(&out_shape));
        for (k, grp) in groups.iter().enumerate() {
            let mut row = out.index_axis_mut(Axis(0), k);
            for &i in grp {
                row += &av.index_axis(Axis(0), i);
            }
            row /= grp.len() as f64;
        }
        let groups = groups.to_vec();
        let in_shape = av.shape().to_vec();
        self.op(
            out,
            &[a],
            Box::new(move |g| {
                let mut dx = ArrayD::<f64>::zeros(IxDyn(&in_shape));
                for (k, grp) in groups.iter().enumerate() {
                    let scaled = g.index_axis(Axis(0), k).to_owned() / grp.len() as f64;
                    for &i in grp {
                        let mut row = dx.index_axis_mut(Axis(0), i);
                        row += &scaled;
                    }
                }
                vec![(a.id, dx)]
            }),
        )
    }

    /// Mean over all elements, producing a 0-d scalar node.
    pub fn mean_all(&self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.len() as f64;
        let out = ArrayD::from_elem(IxDyn(&[]), av.sum() / n);
        let shape = av.shape().to_vec();
        self.op(
            out,
            &[a],
            Box::new(move |g| {
                let scale = g.sum() / n;
                vec![(a.id, ArrayD::from_elem(IxDyn(&shape), scale))]
            }),
        )
    }

    /// Elementwise binary cross entropy against constant targets in `{0,1}`.
    pub fn bce(&self, r: Var, targets: &ArrayD<f64>) -> Var {
        let rv = self.value(r);
        assert_eq!(rv.shape(), targets.shape(), "bce: target shape");
        let mut out = rv.as_ref().clone();
        out.zip_mut_with(targets, |p, &y| {
            *p = -(y * p.ln() + (1.0 - y) * (1.0 - *p).ln());
        });
        let targets = targets.clone();
        let rv2 = Rc::clone(&rv);
        self.op(
            out,
            &[r],
            Box::new(move |g| {
                let mut dr = g.clone();
                ndarray::Zip::from(&mut dr)
                    .and(rv2.as_ref())
                    .and(&targets)
                    .for_each(|d, &p, &y| {
                        *d *= (p - y) / (p * (1.0 - p));
                    });
                vec![(r.id, dr)]
            }),
        )
    }

    /// `(1/P) Σ_{p,v} w[v] · x[p,v]` for a `[P,V]` matrix and constant weights.
    pub fn weighted_mean_rows(&self, x: Var, weights: &[f64]) -> Var {
        let xv = self.value(x);
        let x2 = xv.view().into_dimensionality::<Ix2>().expect("2-d input");
        let (p, v) = (x2.nrows(), x2.ncols());
        assert_eq!(v, weights.len(), "weighted_mean_rows: weight length");
        let mut acc = 0.0;
        for row in x2.rows() {
            for (val, wv) in row.iter().zip(weights) {
                acc += val * wv;
            }
        }
        let out = ArrayD::from_elem(IxDyn(&[]), acc / p as f64);
        let weights = weights.to_vec();
        self.op(
            out,
            &[x],
            Box::new(move |g| {
                let scale = g.sum() / p as f64;
                let mut dx = ArrayD::<f64>::zeros(IxDyn(&[p, v]));
                for mut row in dx.rows_mut() {
                    for (d, wv) in row.iter_mut().zip(&weights) {
                        *d = scale * wv;
                    }
                }
                vec![(x.id, dx)]
            }),
        )
    }

    /// Mean softmax cross entropy of logits `[B,C]` against integer labels.
    pub fn softmax_cross_entropy(&self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        let l2 = lv.view().into_dimensionality::<Ix2>().expect("2-d logits");
        let (b, c) = (l2.nrows(), l2.ncols());
        assert_eq!(labels.len(), b, "softmax_cross_entropy: label count");
        assert!(labels.iter().all(|&y| y < c), "label out of range");
        let mut probs = l2.to_owned();
        let mut loss = 0.0;
        for (i, mut row) in probs.rows_mut().into_iter().enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|z| (z - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|e| e / sum);
            loss -= row[labels[i]].ln();
        }
        let out = ArrayD::from_elem(IxDyn(&[]), loss / b as f64);
        let labels = labels.to_vec();
        self.op(
            out,
            &[logits],
            Box::new(move |g| {
                let scale = g.sum() / b as f64;
                let mut dz = probs.clone();
                for (i, mut row) in dz.rows_mut().into_iter().enumerate() {
                    row[labels[i]] -= 1.0;
                    row.mapv_inplace(|v| v * scale);
                }
                vec![(logits.id, dz.into_dyn())]
            }),
        )
    }
}
