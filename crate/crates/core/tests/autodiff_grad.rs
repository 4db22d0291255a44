//! Finite-difference validation of every tape operation's backward pass.
//!
//! Each check builds the same scalar program twice: once with differentiable
//! leaves to collect analytic gradients, and once per perturbed coordinate
//! to form a central difference. Inputs are chosen away from the kinks of
//! non-smooth ops (relu zeros, clamp edges, pooling ties) so the finite
//! difference is meaningful.

use dcn::autodiff::{Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;
const H: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in [-1, 1].
fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Uniform magnitudes in [0.1, 1] with random sign: bounded away from zero.
fn uniform_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// All-distinct values: index-staggered so no pooling window has a tie.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|i| rng.gen_range(-0.4..0.4) + i as f64 * 1e-2)
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Compare analytic gradients of a scalar program against central differences.
fn check_grads(inputs: &[ArrayD<f64>], build: &dyn Fn(&Tape, &[Var]) -> Var) {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let root = build(&tape, &vars);
    assert_eq!(tape.value(root).len(), 1, "check root must be scalar");
    let grads = tape.backward(root, &vars);

    let eval = |xs: &[ArrayD<f64>]| -> f64 {
        let t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        t.value(build(&t, &vs)).sum()
    };

    for (i, x) in inputs.iter().enumerate() {
        let g = grads
            .get(&vars[i].id)
            .unwrap_or_else(|| panic!("no gradient for input {i}"));
        assert_eq!(g.shape(), x.shape(), "gradient shape for input {i}");
        let ga = g.as_slice().unwrap();
        for j in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[i].as_slice_mut().unwrap()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].as_slice_mut().unwrap()[j] -= H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let denom = 1.0_f64.max(ga[j].abs()).max(fd.abs());
            assert!(
                ((ga[j] - fd) / denom).abs() <= TOL,
                "input {i}, element {j}: analytic {} vs finite difference {fd}",
                ga[j]
            );
        }
    }
}

/// Reduce a tensor node to a scalar by a fixed random projection, so the
/// check exercises the full Jacobian rather than just the row sums.
fn project(tape: &Tape, v: Var, seed: u64) -> Var {
    let shape = tape.value(v).shape().to_vec();
    let r = tape.constant(uniform(&mut rng(seed ^ 0x9e37), &shape));
    tape.mean_all(tape.mul(v, r))
}

#[test]
fn mean_all_gradient() {
    let x = uniform(&mut rng(1), &[3, 4]);
    check_grads(&[x], &|t, v| t.mean_all(v[0]));
}

#[test]
fn mul_gradient() {
    let mut r = rng(2);
    let a = uniform(&mut r, &[2, 3]);
    let b = uniform(&mut r, &[2, 3]);
    check_grads(&[a, b], &|t, v| t.mean_all(t.mul(v[0], v[1])));
}

#[test]
fn add_gradient() {
    let mut r = rng(3);
    let a = uniform(&mut r, &[2, 3, 2]);
    let b = uniform(&mut r, &[2, 3, 2]);
    check_grads(&[a, b], &|t, v| project(t, t.add(v[0], v[1]), 3));
}

#[test]
fn mul_scalar_gradient() {
    let x = uniform(&mut rng(4), &[4, 3]);
    check_grads(&[x], &|t, v| project(t, t.mul_scalar(v[0], -1.7), 4));
}

#[test]
fn relu_gradient_away_from_zero() {
    let x = uniform_off_zero(&mut rng(5), &[3, 4]);
    check_grads(&[x], &|t, v| project(t, t.relu(v[0]), 5));
}

#[test]
fn sigmoid_gradient() {
    let x = uniform(&mut rng(6), &[3, 4]);
    check_grads(&[x], &|t, v| project(t, t.sigmoid(v[0]), 6));
}

#[test]
fn clamp_gradient_inside_and_outside_band() {
    // Values well inside (0.3..0.7) and well outside; none near the edges,
    // so the flat regions have an exact zero derivative on both sides.
    let data = vec![0.35, 0.5, 0.65, 0.1, 0.9, -0.2, 1.3, 0.45, 0.55];
    let x = ArrayD::from_shape_vec(IxDyn(&[3, 3]), data).unwrap();
    check_grads(&[x], &|t, v| project(t, t.clamp(v[0], 0.2, 0.8), 7));
}

#[test]
fn linear_gradient() {
    let mut r = rng(8);
    let x = uniform(&mut r, &[3, 4]);
    let w = uniform(&mut r, &[2, 4]);
    let b = uniform(&mut r, &[2]);
    check_grads(&[x, w, b], &|t, v| {
        project(t, t.linear(v[0], v[1], v[2]), 8)
    });
}

#[test]
fn concat_axis1_gradient() {
    let mut r = rng(9);
    let a = uniform(&mut r, &[2, 3, 2, 2]);
    let b = uniform(&mut r, &[2, 1, 2, 2]);
    let c = uniform(&mut r, &[2, 2, 2, 2]);
    check_grads(&[a, b, c], &|t, v| {
        project(t, t.concat_axis1(&[v[0], v[1], v[2]]), 9)
    });
}

#[test]
fn slice_axis1_gradient() {
    let x = uniform(&mut rng(10), &[2, 5, 2, 2]);
    check_grads(&[x], &|t, v| project(t, t.slice_axis1(v[0], 1, 4), 10));
}

#[test]
fn index_select0_gradient_accumulates_repeats() {
    let x = uniform(&mut rng(11), &[3, 2, 2]);
    // Row 2 selected twice: its gradient must be the sum of both uses.
    check_grads(&[x], &|t, v| {
        project(t, t.index_select0(v[0], &[2, 0, 2, 1]), 11)
    });
}

#[test]
fn scale_channels_gradient() {
    let mut r = rng(12);
    let x = uniform(&mut r, &[2, 3, 2, 2]);
    let s = uniform(&mut r, &[2, 3]);
    check_grads(&[x, s], &|t, v| {
        project(t, t.scale_channels(v[0], v[1]), 12)
    });
}

#[test]
fn add_scaled_noise_gradient() {
    let mut r = rng(13);
    let mean = uniform(&mut r, &[2, 3, 2, 2]);
    let std = uniform(&mut r, &[2, 1, 2, 2]);
    let eps = uniform(&mut r, &[2, 1, 2, 2]);
    check_grads(&[mean, std], &|t, v| {
        project(t, t.add_scaled_noise(v[0], v[1], &eps), 13)
    });
}

#[test]
fn group_mean_axis0_gradient_with_overlap() {
    let x = uniform(&mut rng(14), &[5, 2, 2]);
    // Row 2 belongs to both groups; its gradient accumulates both shares.
    let groups = vec![vec![0, 2], vec![2, 3, 4]];
    check_grads(&[x], &|t, v| {
        project(t, t.group_mean_axis0(v[0], &groups), 14)
    });
}

#[test]
fn bce_gradient() {
    let mut r = rng(15);
    let n: usize = 12;
    let probs: Vec<f64> = (0..n).map(|_| r.gen_range(0.1..0.9)).collect();
    let x = ArrayD::from_shape_vec(IxDyn(&[3, 4]), probs).unwrap();
    let targets: Vec<f64> = (0..n).map(|_| f64::from(r.gen_bool(0.5))).collect();
    let targets = ArrayD::from_shape_vec(IxDyn(&[3, 4]), targets).unwrap();
    check_grads(&[x], &|t, v| project(t, t.bce(v[0], &targets), 15));
}

#[test]
fn weighted_mean_rows_gradient() {
    let x = uniform(&mut rng(16), &[3, 4]);
    let w = [0.3, 0.4, 0.5, 1.0];
    check_grads(&[x], &|t, v| t.weighted_mean_rows(v[0], &w));
}

#[test]
fn softmax_cross_entropy_gradient() {
    let x = uniform(&mut rng(17), &[3, 4]);
    let labels = [1usize, 0, 3];
    check_grads(&[x], &|t, v| t.softmax_cross_entropy(v[0], &labels));
}

#[test]
fn conv2d_gradient_stride1_pad1() {
    let mut r = rng(18);
    let x = uniform(&mut r, &[2, 2, 5, 5]);
    let w = uniform(&mut r, &[3, 2, 3, 3]);
    let b = uniform(&mut r, &[3]);
    check_grads(&[x, w, b], &|t, v| {
        project(t, t.conv2d(v[0], v[1], v[2], 1, 1), 18)
    });
}

#[test]
fn conv2d_gradient_stride2_pad1() {
    let mut r = rng(19);
    let x = uniform(&mut r, &[2, 2, 5, 5]);
    let w = uniform(&mut r, &[3, 2, 3, 3]);
    let b = uniform(&mut r, &[3]);
    check_grads(&[x, w, b], &|t, v| {
        project(t, t.conv2d(v[0], v[1], v[2], 2, 1), 19)
    });
}

#[test]
fn conv2d_gradient_1x1_kernel() {
    let mut r = rng(20);
    let x = uniform(&mut r, &[2, 3, 4, 4]);
    let w = uniform(&mut r, &[2, 3, 1, 1]);
    let b = uniform(&mut r, &[2]);
    check_grads(&[x, w, b], &|t, v| {
        project(t, t.conv2d(v[0], v[1], v[2], 1, 0), 20)
    });
}

#[test]
fn conv2d_gradient_7x7_stride2_pad3() {
    let mut r = rng(21);
    let x = uniform(&mut r, &[1, 2, 8, 8]);
    let w = uniform(&mut r, &[2, 2, 7, 7]);
    let b = uniform(&mut r, &[2]);
    check_grads(&[x, w, b], &|t, v| {
        project(t, t.conv2d(v[0], v[1], v[2], 2, 3), 21)
    });
}

#[test]
fn conv2d_gradient_unpadded() {
    let mut r = rng(22);
    let x = uniform(&mut r, &[2, 2, 5, 5]);
    let w = uniform(&mut r, &[2, 2, 3, 3]);
    let b = uniform(&mut r, &[2]);
    check_grads(&[x, w, b], &|t, v| {
        project(t, t.conv2d(v[0], v[1], v[2], 1, 0), 22)
    });
}

#[test]
fn maxpool2d_gradient() {
    let x = distinct(&mut rng(23), &[2, 2, 6, 6]);
    check_grads(&[x], &|t, v| project(t, t.maxpool2d(v[0], 3, 2, 1), 23));
}

#[test]
fn maxpool2d_matches_plain_scan() {
    // Forward oracle: brute-force window maxima with -inf padding.
    let x = distinct(&mut rng(24), &[1, 1, 5, 5]);
    let tape = Tape::new();
    let out = tape.value_owned(tape.maxpool2d(tape.constant(x.clone()), 3, 2, 1));
    assert_eq!(out.shape(), [1, 1, 3, 3]);
    for oi in 0..3 {
        for oj in 0..3 {
            let mut best = f64::NEG_INFINITY;
            for ki in 0..3 {
                for kj in 0..3 {
                    let ii = (oi * 2 + ki) as isize - 1;
                    let jj = (oj * 2 + kj) as isize - 1;
                    if (0..5).contains(&ii) && (0..5).contains(&jj) {
                        best = best.max(x[[0, 0, ii as usize, jj as usize]]);
                    }
                }
            }
            assert_eq!(out[[0, 0, oi, oj]], best);
        }
    }
}

#[test]
fn global_avg_pool_gradient() {
    let x = uniform(&mut rng(25), &[2, 3, 4, 4]);
    check_grads(&[x], &|t, v| project(t, t.global_avg_pool(v[0]), 25));
}

#[test]
fn global_avg_pool_forward_is_spatial_mean() {
    let x = uniform(&mut rng(26), &[2, 3, 4, 5]);
    let tape = Tape::new();
    let out = tape.value_owned(tape.global_avg_pool(tape.constant(x.clone())));
    assert_eq!(out.shape(), [2, 3]);
    for b in 0..2 {
        for c in 0..3 {
            let mut s = 0.0;
            for h in 0..4 {
                for w in 0..5 {
                    s += x[[b, c, h, w]];
                }
            }
            assert!((out[[b, c]] - s / 20.0).abs() < 1e-12);
        }
    }
}

#[test]
fn conv2d_forward_matches_direct_convolution() {
    // Forward oracle: direct quadruple-loop convolution.
    let mut r = rng(27);
    let x = uniform(&mut r, &[2, 3, 5, 5]);
    let w = uniform(&mut r, &[4, 3, 3, 3]);
    let b = uniform(&mut r, &[4]);
    let (stride, pad) = (2usize, 1usize);
    let tape = Tape::new();
    let out = tape.value_owned(tape.conv2d(
        tape.constant(x.clone()),
        tape.constant(w.clone()),
        tape.constant(b.clone()),
        stride,
        pad,
    ));
    assert_eq!(out.shape(), [2, 4, 3, 3]);
    for bi in 0..2 {
        for co in 0..4 {
            for oi in 0..3 {
                for oj in 0..3 {
                    let mut acc = b[[co]];
                    for ci in 0..3 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let ii = (oi * stride + ki) as isize - pad as isize;
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                if (0..5).contains(&ii) && (0..5).contains(&jj) {
                                    acc += x[[bi, ci, ii as usize, jj as usize]]
                                        * w[[co, ci, ki, kj]];
                                }
                            }
                        }
                    }
                    let got = out[[bi, co, oi, oj]];
                    assert!(
                        (got - acc).abs() <= 1e-12 * acc.abs().max(1.0),
                        "out[{bi},{co},{oi},{oj}] = {got}, direct {acc}"
                    );
                }
            }
        }
    }
}

#[test]
fn shared_subexpression_accumulates_both_paths() {
    // f(a) = mean(a*a) + mean(a): df/da = 2a/n + 1/n through two paths.
    let x = uniform(&mut rng(28), &[2, 3]);
    check_grads(&[x], &|t, v| {
        t.add(t.mean_all(t.mul(v[0], v[0])), t.mean_all(v[0]))
    });
}

#[test]
fn constant_subgraph_gets_no_gradient() {
    let tape = Tape::new();
    let a = tape.leaf(uniform(&mut rng(29), &[2, 2]));
    let c = tape.constant(uniform(&mut rng(30), &[2, 2]));
    let root = tape.mean_all(tape.mul(a, c));
    let grads = tape.backward(root, &[a, c]);
    assert!(grads.contains_key(&a.id));
    assert!(!grads.contains_key(&c.id), "constants must not get gradients");
}

#[test]
fn gradients_are_deterministic_across_runs() {
    // The conv backward runs chunked in parallel; results must still be
    // bitwise identical run to run.
    let mut r = rng(31);
    let x = uniform(&mut r, &[9, 2, 8, 8]);
    let w = uniform(&mut r, &[4, 2, 3, 3]);
    let b = uniform(&mut r, &[4]);
    let run = || {
        let t = Tape::new();
        let (xv, wv, bv) = (t.leaf(x.clone()), t.leaf(w.clone()), t.leaf(b.clone()));
        let root = t.mean_all(t.conv2d(xv, wv, bv, 1, 1));
        let g = t.backward(root, &[xv, wv, bv]);
        (
            g[&xv.id].clone(),
            g[&wv.id].clone(),
            g[&bv.id].clone(),
        )
    };
    let (x1, w1, b1) = run();
    for _ in 0..3 {
        let (x2, w2, b2) = run();
        assert_eq!(x1, x2);
        assert_eq!(w1, w2);
        assert_eq!(b1, b2);
    }
}
