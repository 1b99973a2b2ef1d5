use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::gradcheck::max_relative_error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Random inputs whose entries keep a margin from zero, so kinks (relu, max)
/// and singularities (log, div, sqrt) sit outside the difference stencil.
fn randn_away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    randn(shape, seed).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

const TOL: f64 = 1e-4;

#[test]
fn sigmoid_at_zero_is_half() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(0.0));
    let y = g.sigmoid(x);
    assert_eq!(g.value(y).item(), 0.5);
}

#[test]
fn add_vectors() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2], &[1.0, 2.0]));
    let b = g.constant(t(&[2], &[3.0, 4.0]));
    let c = g.add(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[4.0, 6.0]);
}

#[test]
fn sigmoid_derivative_at_zero_matches_finite_difference() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(0.0));
    let y = g.sigmoid(x);
    g.backward(y).unwrap();
    let analytic = g.grad(x).unwrap().item();
    let h = 1e-5;
    let numeric = (super::sigmoid(h) - super::sigmoid(-h)) / (2.0 * h);
    assert_eq!(analytic, 0.25);
    assert!((analytic - numeric).abs() < 1e-8);
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2]));
    let err = g.add(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[2]"), "{err}");
}

#[test]
fn mean_and_population_variance() {
    let mut g = Graph::new();
    let a = g.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
    let m = g.mean(a, &[0], false).unwrap();
    assert_eq!(g.value(m).item(), 2.5);
    let b = g.constant(t(&[7], &[0.0, -1.0, 1.0, -1.5, -0.5, 0.5, 1.5]));
    let v = g.variance(b, &[0], false).unwrap();
    assert!((g.value(v).item() - 1.0).abs() < 1e-15);
}

#[test]
fn keepdim_controls_result_shape() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::ones(&[2, 3, 4]));
    let k = g.sum(a, &[1], true).unwrap();
    let d = g.sum(a, &[1], false).unwrap();
    assert_eq!(g.shape(k), &[2, 1, 4]);
    assert_eq!(g.shape(d), &[2, 4]);
    assert!(g.sum(a, &[3], false).is_err());
    assert!(g.sum(a, &[], false).is_err());
}

#[test]
fn sum_backward_is_all_ones() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[0.3, -2.0, 7.0]));
    let s = g.sum_all(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn square_sum_backward_is_two_x() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let y = g.mul(x, x).unwrap();
    let s = g.sum_all(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_and_accumulates() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let y = g.mul_scalar(x, 3.0);
    assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
    let s = g.sum_all(y);
    g.backward(s).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[6.0, 6.0]);
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn conv_ones_kernel_counts_overlap() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[1, 1, 4, 4]));
    let k = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = g.conv2d(x, k, 1, 1).unwrap();
    let out = g.value(y);
    assert_eq!(out.shape(), &[1, 1, 4, 4]);
    assert_eq!(out.at(&[0, 0, 0, 0]), 4.0);
    assert_eq!(out.at(&[0, 0, 3, 3]), 4.0);
    assert_eq!(out.at(&[0, 0, 1, 1]), 9.0);
    assert_eq!(out.at(&[0, 0, 2, 2]), 9.0);
    assert_eq!(out.at(&[0, 0, 0, 1]), 6.0);
}

#[test]
fn conv_identity_kernel() {
    let x0 = randn(&[1, 2, 5, 5], 1);
    let mut k0 = Tensor::zeros(&[2, 2, 3, 3]);
    k0.set(&[0, 0, 1, 1], 1.0);
    k0.set(&[1, 1, 1, 1], 1.0);
    let mut g = Graph::new();
    let x = g.constant(x0.clone());
    let k = g.constant(k0);
    let y = g.conv2d(x, k, 1, 1).unwrap();
    assert_eq!(g.value(y), &x0);
}

#[test]
fn conv_matches_direct_loop() {
    let x0 = randn(&[2, 3, 7, 6], 2);
    let k0 = randn(&[4, 3, 3, 3], 3);
    for (stride, pad) in [(1, 1), (2, 1), (2, 0), (3, 2)] {
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let k = g.constant(k0.clone());
        let y = g.conv2d(x, k, stride, pad).unwrap();
        let out = g.value(y);
        let (oh, ow) = (out.shape()[2], out.shape()[3]);
        assert_eq!(oh, (7 + 2 * pad - 3) / stride + 1);
        for b in 0..2 {
            for co in 0..4 {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..3 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let ii = (i * stride + ki) as isize - pad as isize;
                                    let jj = (j * stride + kj) as isize - pad as isize;
                                    if ii >= 0 && ii < 7 && jj >= 0 && jj < 6 {
                                        acc += x0.at(&[b, ci, ii as usize, jj as usize]) * k0.at(&[co, ci, ki, kj]);
                                    }
                                }
                            }
                        }
                        assert!((out.at(&[b, co, i, j]) - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn conv_rejects_even_kernels_and_empty_output() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[1, 1, 4, 4]));
    let k = g.constant(Tensor::ones(&[1, 1, 2, 2]));
    assert!(g.conv2d(x, k, 1, 0).is_err());
    let k = g.constant(Tensor::ones(&[1, 1, 7, 7]));
    assert!(g.conv2d(x, k, 1, 0).is_err());
}

// ---- finite-difference checks for every differentiable op ----------------

#[test]
fn gradcheck_binary_ops_with_broadcast() {
    for (i, kind) in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div].into_iter().enumerate() {
        for (sa, sb) in [(vec![2, 3], vec![2, 3]), (vec![2, 3, 4], vec![3, 1]), (vec![1, 4], vec![3, 1])] {
            let a = randn_away_from_zero(&sa, 10 + i as u64);
            let b = randn_away_from_zero(&sb, 20 + i as u64);
            let w = randn(&broadcast_shape(&sa, &sb).unwrap(), 30);
            let err = max_relative_error(
                &|g: &mut Graph, v: &[Var]| {
                    let y = g.binary(kind, v[0], v[1])?;
                    let wv = g.constant(w.clone());
                    let z = g.mul(y, wv)?;
                    Ok(g.sum_all(z))
                },
                &[a, b],
            )
            .unwrap();
            assert!(err < TOL, "{kind:?} {sa:?} {sb:?}: {err}");
        }
    }
}

#[test]
fn gradcheck_unary_ops() {
    use UnaryOp::*;
    for kind in [Sigmoid, Relu, Exp, Log, Sqrt, Neg, Square] {
        let mut x = randn_away_from_zero(&[3, 4], 40);
        if matches!(kind, Log | Sqrt) {
            x = x.map(|v| v.abs() + 0.1);
        }
        let w = randn(&[3, 4], 41);
        let err = max_relative_error(
            &|g: &mut Graph, v: &[Var]| {
                let y = g.unary(kind, v[0]);
                let y = g.add_scalar(y, 0.5);
                let y = g.mul_scalar(y, 1.7);
                let wv = g.constant(w.clone());
                let z = g.mul(y, wv)?;
                Ok(g.sum_all(z))
            },
            &[x],
        )
        .unwrap();
        assert!(err < TOL, "{kind:?}: {err}");
    }
}

#[test]
fn gradcheck_reductions() {
    for kind in [ReduceOp::Sum, ReduceOp::Mean, ReduceOp::Variance, ReduceOp::Max] {
        for axes in [vec![0], vec![1], vec![0, 2], vec![1, 2]] {
            for keep in [true, false] {
                let x = randn(&[3, 4, 5], 50);
                let out_len = {
                    let mut g = Graph::new();
                    let v = g.constant(x.clone());
                    let r = g.reduce(kind, v, &axes, keep).unwrap();
                    g.value(r).shape().to_vec()
                };
                let w = randn(&out_len, 51);
                let err = max_relative_error(
                    &|g: &mut Graph, v: &[Var]| {
                        let r = g.reduce(kind, v[0], &axes, keep)?;
                        let wv = g.constant(w.clone());
                        let z = g.mul(r, wv)?;
                        Ok(g.sum_all(z))
                    },
                    &[x],
                )
                .unwrap();
                assert!(err < TOL, "{kind:?} {axes:?} keep={keep}: {err}");
            }
        }
    }
}

#[test]
fn gradcheck_shape_ops_and_matmul() {
    let a = randn(&[3, 4], 60);
    let b = randn(&[4, 2], 61);
    let c = randn(&[3, 2], 62);
    let err = max_relative_error(
        &|g: &mut Graph, v: &[Var]| {
            let m = g.matmul(v[0], v[1])?;
            let cat = g.concat(&[m, v[2], m], 1)?;
            let s = g.slice(cat, 1, 1, 4)?;
            let tr = g.transpose(s)?;
            let r = g.reshape(tr, &[2, 6])?;
            let sq = g.square(r);
            Ok(g.sum_all(sq))
        },
        &[a, b, c],
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn gradcheck_conv2d_random() {
    let x = randn(&[2, 2, 5, 5], 70);
    let k = randn(&[3, 2, 3, 3], 71);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let w_shape = {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let kv = g.constant(k.clone());
            let y = g.conv2d(xv, kv, stride, pad).unwrap();
            g.shape(y).to_vec()
        };
        let w = randn(&w_shape, 72);
        let err = max_relative_error(
            &|g: &mut Graph, v: &[Var]| {
                let y = g.conv2d(v[0], v[1], stride, pad)?;
                let wv = g.constant(w.clone());
                let z = g.mul(y, wv)?;
                Ok(g.sum_all(z))
            },
            &[x.clone(), k.clone()],
        )
        .unwrap();
        assert!(err < 1e-5, "stride {stride} pad {pad}: {err}");
    }
}

#[test]
fn gradcheck_max_pool() {
    let x = randn(&[1, 2, 6, 6], 80);
    let w = randn(&[1, 2, 3, 3], 81);
    let err = max_relative_error(
        &|g: &mut Graph, v: &[Var]| {
            let y = g.max_pool2d(v[0], 3, 2, 1)?;
            let wv = g.constant(w.clone());
            let z = g.mul(y, wv)?;
            Ok(g.sum_all(z))
        },
        &[x],
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn gradcheck_batch_norm() {
    let x = randn(&[3, 2, 3, 3], 90);
    let gamma = randn(&[2], 91);
    let beta = randn(&[2], 92);
    let w = randn(&[3, 2, 3, 3], 93);
    let err = max_relative_error(
        &|g: &mut Graph, v: &[Var]| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], 1e-5)?;
            let wv = g.constant(w.clone());
            let z = g.mul(y, wv)?;
            Ok(g.sum_all(z))
        },
        &[x, gamma, beta],
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn batch_norm_matches_composed_primitives() {
    let x0 = randn(&[4, 3, 2, 2], 94);
    let mut g = Graph::new();
    let x = g.constant(x0);
    let gamma = g.constant(Tensor::ones(&[3]));
    let beta = g.constant(Tensor::zeros(&[3]));
    let (fused, stats) = g.batch_norm(x, gamma, beta, 1e-5).unwrap();
    let mean = g.mean(x, &[0, 2, 3], true).unwrap();
    let var = g.variance(x, &[0, 2, 3], true).unwrap();
    let centered = g.sub(x, mean).unwrap();
    let var_eps = g.add_scalar(var, 1e-5);
    let std = g.sqrt(var_eps);
    let composed = g.div(centered, std).unwrap();
    assert!(g.value(fused).max_abs_diff(g.value(composed)) < 1e-12);
    assert_eq!(stats.mean.len(), 3);
    for (c, &m) in stats.mean.iter().enumerate() {
        assert!((m - g.value(mean).data()[c]).abs() < 1e-14);
    }
}

#[test]
fn gradcheck_log_softmax_and_masked_logsumexp() {
    let x = randn(&[3, 4], 100);
    let w = randn(&[3, 4], 101);
    let mask: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
    let err = max_relative_error(
        &|g: &mut Graph, v: &[Var]| {
            let ls = g.log_softmax(v[0])?;
            let wv = g.constant(w.clone());
            let a = g.mul(ls, wv)?;
            let a = g.sum_all(a);
            let m = g.masked_logsumexp(v[0], &mask)?;
            let b = g.sum_all(m);
            g.add(a, b)
        },
        &[x],
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn masked_logsumexp_rejects_empty_row() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 2]));
    assert!(g.masked_logsumexp(x, &[true, false, false, false]).is_err());
}

#[test]
fn log_softmax_is_stable_for_large_logits() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 3], &[1000.0, 0.0, -1000.0]));
    let y = g.log_softmax(x).unwrap();
    assert!(g.value(y).all_finite());
    assert!(g.value(y).data()[0].abs() < 1e-12);
}

/// Exhaustive small-case oracle: broadcast multiply followed by a full sum
/// equals an explicit loop over the broadcast index space, for all shape
/// pairs up to rank 4 with extents in {1, 2, 3}.
#[test]
fn broadcast_multiply_sum_matches_explicit_loop() {
    fn shapes(rank: usize) -> Vec<Vec<usize>> {
        if rank == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for s in shapes(rank - 1) {
            for d in [1, 2, 3] {
                let mut v = s.clone();
                v.push(d);
                out.push(v);
            }
        }
        out
    }
    let mut seed = 0;
    let mut checked = 0;
    for ra in 0..=4 {
        for rb in 0..=4 {
            for sa in shapes(ra) {
                for sb in shapes(rb) {
                    let Some(out) = broadcast_shape(&sa, &sb) else { continue };
                    seed += 1;
                    let a = randn(&sa, seed);
                    let b = randn(&sb, seed + 100_000);
                    let mut g = Graph::new();
                    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
                    let m = g.mul(va, vb).unwrap();
                    let s = g.sum_all(m);
                    let got = g.value(s).item();
                    let rank = out.len();
                    let pad = |s: &[usize]| -> Vec<usize> {
                        let mut p = vec![1; rank - s.len()];
                        p.extend_from_slice(s);
                        p
                    };
                    let (pa, pb) = (pad(&sa), pad(&sb));
                    let mut expected = 0.0;
                    let mut idx = vec![0usize; rank];
                    for _ in 0..out.iter().product::<usize>() {
                        let ia: Vec<usize> = idx.iter().zip(&pa).map(|(&i, &d)| if d == 1 { 0 } else { i }).collect();
                        let ib: Vec<usize> = idx.iter().zip(&pb).map(|(&i, &d)| if d == 1 { 0 } else { i }).collect();
                        let fa = ia.iter().zip(&pa).fold(0, |acc, (&i, &d)| acc * d + i);
                        let fb = ib.iter().zip(&pb).fold(0, |acc, (&i, &d)| acc * d + i);
                        expected += a.data()[fa] * b.data()[fb];
                        for ax in (0..rank).rev() {
                            idx[ax] += 1;
                            if idx[ax] < out[ax] {
                                break;
                            }
                            idx[ax] = 0;
                        }
                    }
                    assert!((got - expected).abs() < 1e-10, "{sa:?} x {sb:?}: {got} vs {expected}");
                    checked += 1;
                }
            }
        }
    }
    assert!(checked > 1000, "only {checked} shape pairs");
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let x = g.param(randn(&[2, 3, 6, 6], 110));
        let k = g.param(randn(&[4, 3, 3, 3], 111));
        let y = g.conv2d(x, k, 2, 1).unwrap();
        let y = g.sigmoid(y);
        let m = g.mean(y, &[1], true).unwrap();
        let z = g.mul(y, m).unwrap();
        let s = g.sum_all(z);
        g.backward(s).unwrap();
        (g.grad(x).unwrap(), g.grad(k).unwrap())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn nan_propagates_through_relu_pool_and_logsumexp() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 2, 2], &[f64::NAN, -1.0, 2.0, 0.5]));
    let r = g.relu(x);
    assert!(g.value(r).data()[0].is_nan());
    assert_eq!(&g.value(r).data()[1..], &[0.0, 2.0, 0.5]);
    let p = g.max_pool2d(x, 2, 2, 0).unwrap();
    assert!(g.value(p).data()[0].is_nan());
    let m = g.constant(t(&[2, 2], &[f64::NAN, f64::NAN, 1.0, f64::NEG_INFINITY]));
    let l = g.masked_logsumexp(m, &[true, true, true, true]).unwrap();
    assert!(g.value(l).data()[0].is_nan());
    assert_eq!(g.value(l).data()[1], 1.0);
    assert!(g.masked_logsumexp(m, &[false, false, true, true]).is_err());
}

#[test]
fn op_suite_passes_on_several_seeds() {
    use crate::tensor::gradcheck::{check_op, op_suite, GradCheckOptions};
    let suite = op_suite();
    assert_eq!(suite.len(), 31);
    for case in &suite {
        for seed in 0..3 {
            let err = check_op(case, seed, GradCheckOptions::default()).unwrap();
            assert!(err < TOL, "{} seed {seed}: {err}", case.name);
        }
    }
}

#[test]
fn probes_straddling_a_relu_kink_are_set_aside() {
    use crate::tensor::gradcheck::{check_gradients, GradCheckOptions};
    let loss = |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let r = g.relu(v[0]);
        Ok(g.sum_all(r))
    };
    let x = t(&[3], &[2e-6, -0.5, 0.5]);
    let reports = check_gradients(&loss, &[x], GradCheckOptions::default(), |_, _| None).unwrap();
    assert_eq!(reports[0].straddled, 1);
    assert_eq!(reports[0].checked, 2);
    assert!(reports[0].max_rel_error < 1e-9);
}

#[test]
fn branch_fingerprint_tracks_relu_signs_and_max_winners() {
    let print = |x: &[f64]| {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 3], x));
        let r = g.relu(a);
        let _ = g.max(r, &[1], false).unwrap();
        g.branch_fingerprint()
    };
    assert_eq!(print(&[1.0, -2.0, 0.5]), print(&[1.5, -1.0, 0.2]));
    assert_ne!(print(&[1.0, -2.0, 0.5]), print(&[1.0, 2.0, 0.5]));
    assert_ne!(print(&[1.0, -2.0, 0.5]), print(&[0.4, -2.0, 0.5]));
}
