use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
    let mut s = ParamStore::new();
    let ids = values
        .iter()
        .map(|(n, t)| s.add(*n, t.clone(), ParamGroup::Shared))
        .collect();
    (s, ids)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Reduce any node to a scalar via a fixed random weighting so every
/// output element carries a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<'_>, x: NodeId, seed: u64) -> NodeId {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = g.shape(x).to_vec();
    let w = random_tensor(&mut rng, &shape, 1.0);
    let wn = g.constant(w).unwrap();
    let p = g.mul(x, wn).unwrap();
    g.sum(p).unwrap()
}

fn fd_error<F>(store: &mut ParamStore, build: F) -> f64
where
    F: Fn(&mut Graph<'_>) -> crate::Result<NodeId>,
{
    finite_difference_check(|s| forward_backward(s, |g| build(g)), store, 1e-5).unwrap()
}

#[test]
fn square_value_and_gradient() {
    let (store, ids) = store_with(&[("x", Tensor::scalar(3.0))]);
    let (v, grads) = forward_backward(&store, |g| {
        let x = g.param(ids[0]);
        g.mul(x, x)
    })
    .unwrap();
    assert_eq!(v, 9.0);
    assert_eq!(grads.get(ids[0]).item(), 6.0);
}

#[test]
fn sum_gradient_is_ones() {
    let (store, ids) = store_with(&[("x", Tensor::zeros(&[2, 3]))]);
    let (_, grads) = forward_backward(&store, |g| {
        let x = g.param(ids[0]);
        g.sum(x)
    })
    .unwrap();
    assert_eq!(grads.get(ids[0]), &Tensor::filled(&[2, 3], 1.0));
}

#[test]
fn softmax_cross_entropy_matches_central_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut store, ids) = store_with(&[("logits", random_tensor(&mut rng, &[4, 1], 2.0))]);
    let err = fd_error(&mut store, |g| {
        let z = g.param(ids[0]);
        g.cross_entropy_logits(z, &[2], &[1.0])
    });
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn unreferenced_params_get_zero_gradient() {
    let (store, ids) = store_with(&[("a", Tensor::scalar(2.0)), ("b", Tensor::vector(vec![1.0, 2.0]))]);
    let (_, grads) = forward_backward(&store, |g| {
        let a = g.param(ids[0]);
        g.affine(a, 3.0, 0.0)
    })
    .unwrap();
    assert_eq!(grads.len(), 2);
    assert_eq!(grads.get(ids[1]), &Tensor::zeros(&[2]));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let (store, ids) = store_with(&[("x", Tensor::zeros(&[2]))]);
    let g = {
        let mut g = Graph::new(&store);
        let x = g.param(ids[0]);
        let y = g.tanh(x).unwrap();
        g.backward(y).err()
    };
    assert!(matches!(g, Some(crate::Error::NonScalarLoss(_))));
}

#[test]
fn nan_in_forward_reports_node() {
    let (store, _) = store_with(&[]);
    let mut g = Graph::new(&store);
    let err = g.constant(Tensor::vector(vec![1.0, f64::NAN])).unwrap_err();
    assert!(matches!(err, crate::Error::NonFinite { node: 0, .. }), "{err}");
}

#[test]
fn gradient_reverse_forward_and_backward() {
    let (store, ids) = store_with(&[("x", Tensor::vector(vec![1.0, 2.0]))]);
    for (scale, expect) in [(0.05, -0.05), (0.0, 0.0)] {
        let mut g = Graph::new(&store);
        let x = g.param(ids[0]);
        let r = g.gradient_reverse(x, scale).unwrap();
        assert_eq!(g.value(r).data(), &[1.0, 2.0]);
        let s = g.sum(r).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(ids[0]).data(), &[expect, expect]);
    }
    let mut g = Graph::new(&store);
    let x = g.param(ids[0]);
    assert!(g.gradient_reverse(x, -1.0).is_err());
}

#[test]
fn gradient_reverse_negates_downstream_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (store, ids) = store_with(&[
        ("x", random_tensor(&mut rng, &[3, 4], 1.0)),
        ("w", random_tensor(&mut rng, &[2, 3], 1.0)),
    ]);
    for scale in [0.01, 0.05, 1.0] {
        let run = |grl: bool| {
            forward_backward(&store, |g| {
                let x = g.param(ids[0]);
                let x = if grl { g.gradient_reverse(x, scale)? } else { x };
                let w = g.param(ids[1]);
                let y = g.matmul(w, x)?;
                let y = g.tanh(y)?;
                g.cross_entropy_logits(y, &[0, 1, 1, 0], &[1.0; 4])
            })
            .unwrap()
            .1
        };
        let (with, without) = (run(true), run(false));
        for (a, b) in with.get(ids[0]).data().iter().zip(without.get(ids[0]).data()) {
            assert!((a + scale * b).abs() < 1e-15);
        }
        assert_eq!(with.get(ids[1]), without.get(ids[1]));
    }
}

#[test]
fn quadratic_is_exact_under_central_difference() {
    let (mut store, ids) = store_with(&[("x", Tensor::scalar(1.0))]);
    let err = fd_error(&mut store, |g| {
        let x = g.param(ids[0]);
        g.mul(x, x)
    });
    assert!(err < 1e-8, "{err}");
}

#[test]
fn abs_kink_is_flagged() {
    let (mut store, ids) = store_with(&[("x", Tensor::scalar(0.0))]);
    let err = fd_error(&mut store, |g| {
        let x = g.param(ids[0]);
        g.abs(x)
    });
    assert!(err > 0.5, "kink should produce a large error, got {err}");
}

#[test]
fn nondeterministic_loss_is_detected() {
    let (mut store, _) = store_with(&[("x", Tensor::scalar(1.0))]);
    let mut calls = 0.0;
    let res = finite_difference_check(
        |s| {
            calls += 1.0;
            Ok((calls, GradMap::zeros(s)))
        },
        &mut store,
        1e-5,
    );
    assert!(matches!(res, Err(crate::Error::Nondeterministic { .. })));
}

#[test]
fn bce_clamps_probabilities() {
    let (store, ids) = store_with(&[("p", Tensor::vector(vec![0.0, 1.0]))]);
    let mut g = Graph::new(&store);
    let p = g.param(ids[0]);
    let l = g.bce(p, &Tensor::vector(vec![0.0, 1.0]), &[1.0, 1.0]).unwrap();
    let v = g.value(l).item();
    assert!(v > 0.0 && v < 1e-6, "{v}");
}

#[test]
fn conv_rejects_even_kernel() {
    let (store, ids) = store_with(&[
        ("x", Tensor::zeros(&[2, 5])),
        ("w", Tensor::zeros(&[3, 2, 2])),
        ("b", Tensor::zeros(&[3])),
    ]);
    let mut g = Graph::new(&store);
    let (x, w, b) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
    assert!(g.conv1d(x, w, b, 1).is_err());
}

#[test]
fn conv_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, &[2, 7], 1.0);
    let w = random_tensor(&mut rng, &[3, 2, 3], 1.0);
    let b = random_tensor(&mut rng, &[3], 1.0);
    let (store, ids) = store_with(&[("x", x.clone()), ("w", w.clone()), ("b", b.clone())]);
    let mut g = Graph::new(&store);
    let (xn, wn, bn) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
    for dilation in [1, 2, 3, 9] {
        let y = g.conv1d(xn, wn, bn, dilation).unwrap();
        for o in 0..3 {
            for t in 0..7isize {
                let mut expect = b.data()[o];
                for i in 0..2 {
                    for k in 0..3isize {
                        let src = t + (k - 1) * dilation as isize;
                        if (0..7).contains(&src) {
                            expect += w.data()[(o * 2 + i) * 3 + k as usize] * x.at(i, src as usize);
                        }
                    }
                }
                assert!((g.value(y).at(o, t as usize) - expect).abs() < 1e-12);
            }
        }
    }
}

/// Each required op, reduced to a scalar, agrees with central differences
/// on randomized small shapes.
#[test]
fn every_op_passes_gradient_check_over_100_seeds() {
    type Case = fn(&mut ChaCha8Rng) -> (ParamStore, Box<dyn Fn(&mut Graph<'_>, u64) -> NodeId>);
    let cases: Vec<(&str, Case)> = vec![
        ("matmul", |rng| {
            let (m, k, n) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
            let (s, ids) = store_with(&[
                ("a", random_tensor(rng, &[m, k], 1.0)),
                ("b", random_tensor(rng, &[k, n], 1.0)),
                ("v", random_tensor(rng, &[k], 1.0)),
            ]);
            (s, Box::new(move |g, seed| {
                let (a, b, v) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
                let mm = g.matmul(a, b).unwrap();
                let mv = g.matmul(a, v).unwrap();
                let s1 = weighted_sum(g, mm, seed);
                let s2 = weighted_sum(g, mv, seed + 1);
                g.add(s1, s2).unwrap()
            }))
        }),
        ("broadcast_arith", |rng| {
            let (c, l) = (rng.gen_range(1..4), rng.gen_range(1..5));
            let (s, ids) = store_with(&[
                ("a", random_tensor(rng, &[c, l], 1.0)),
                ("b", random_tensor(rng, &[c, l], 1.0)),
                ("v", random_tensor(rng, &[c], 1.0)),
            ]);
            (s, Box::new(move |g, seed| {
                let (a, b, v) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
                let x = g.add(a, v).unwrap();
                let y = g.sub(x, b).unwrap();
                let z = g.mul(y, v).unwrap();
                let w = g.mul(z, a).unwrap();
                let w = g.sub(w, v).unwrap();
                weighted_sum(g, w, seed)
            }))
        }),
        ("activations", |rng| {
            let n = rng.gen_range(1..6);
            let (s, ids) = store_with(&[("x", random_tensor(rng, &[n], 2.0))]);
            (s, Box::new(move |g, seed| {
                let x = g.param(ids[0]);
                let a = g.tanh(x).unwrap();
                let b = g.sigmoid(x).unwrap();
                let c = g.relu(x).unwrap();
                let d = g.affine(x, -0.7, 0.3).unwrap();
                let ab = g.mul(a, b).unwrap();
                let cd = g.add(c, d).unwrap();
                let y = g.add(ab, cd).unwrap();
                weighted_sum(g, y, seed)
            }))
        }),
        ("softmax", |rng| {
            let (r, c) = (rng.gen_range(1..4), rng.gen_range(2..5));
            let axis = rng.gen_range(0..2);
            let (s, ids) = store_with(&[("x", random_tensor(rng, &[r, c], 2.0))]);
            (s, Box::new(move |g, seed| {
                let x = g.param(ids[0]);
                let y = g.softmax(x, axis).unwrap();
                weighted_sum(g, y, seed)
            }))
        }),
        ("layer_norm", |rng| {
            let (r, c) = (rng.gen_range(3..6), rng.gen_range(1..4));
            let axis = rng.gen_range(0..2);
            let shape = if axis == 0 { [r, c] } else { [c, r] };
            let (s, ids) = store_with(&[("x", random_tensor(rng, &shape, 2.0))]);
            (s, Box::new(move |g, seed| {
                let x = g.param(ids[0]);
                let y = g.layer_norm(x, axis).unwrap();
                let t = g.tanh(y).unwrap();
                weighted_sum(g, t, seed)
            }))
        }),
        ("concat_split", |rng| {
            let (r, c1, c2) = (rng.gen_range(1..4), rng.gen_range(1..3), rng.gen_range(1..3));
            let axis = rng.gen_range(0..2);
            let (sa, sb) = if axis == 1 { ([r, c1], [r, c2]) } else { ([c1, r], [c2, r]) };
            let (s, ids) = store_with(&[
                ("a", random_tensor(rng, &sa, 1.0)),
                ("b", random_tensor(rng, &sb, 1.0)),
            ]);
            (s, Box::new(move |g, seed| {
                let (a, b) = (g.param(ids[0]), g.param(ids[1]));
                let x = g.concat(&[a, b, a], axis).unwrap();
                let t = g.tanh(x).unwrap();
                let parts = g.split(t, axis, &[c1, c2, c1]).unwrap();
                let m = g.mul(parts[0], parts[2]).unwrap();
                let s1 = weighted_sum(g, m, seed);
                let s2 = weighted_sum(g, parts[1], seed + 7);
                let r = g.reshape(s2, &[1]).unwrap();
                let r = g.reshape(r, &[]).unwrap();
                g.add(s1, r).unwrap()
            }))
        }),
        ("conv1d", |rng| {
            let (ci, co, l) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..8));
            let k = [1, 3, 5][rng.gen_range(0..3)];
            let d = [1, 2, 3][rng.gen_range(0..3)];
            let (s, ids) = store_with(&[
                ("x", random_tensor(rng, &[ci, l], 1.0)),
                ("w", random_tensor(rng, &[co, ci, k], 1.0)),
                ("b", random_tensor(rng, &[co], 1.0)),
            ]);
            (s, Box::new(move |g, seed| {
                let (x, w, b) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
                let y = g.conv1d(x, w, b, d).unwrap();
                weighted_sum(g, y, seed)
            }))
        }),
        ("lstm_cell", |rng| {
            let (nx, h) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let (s, ids) = store_with(&[
                ("x", random_tensor(rng, &[nx], 1.0)),
                ("h", random_tensor(rng, &[h], 1.0)),
                ("c", random_tensor(rng, &[h], 1.0)),
                ("w", random_tensor(rng, &[4 * h, nx + h], 1.0)),
                ("b", random_tensor(rng, &[4 * h], 1.0)),
            ]);
            (s, Box::new(move |g, seed| {
                let p: Vec<NodeId> = ids.iter().map(|&i| g.param(i)).collect();
                let (h1, c1) = g.lstm_cell(p[0], p[1], p[2], p[3], p[4]).unwrap();
                let (h2, c2) = g.lstm_cell(p[0], h1, c1, p[3], p[4]).unwrap();
                let a = weighted_sum(g, h2, seed);
                let b = weighted_sum(g, c2, seed + 3);
                g.add(a, b).unwrap()
            }))
        }),
        ("gather", |rng| {
            let (d, v) = (rng.gen_range(1..4), rng.gen_range(1..5));
            let ids_in: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..v)).collect();
            let (s, ids) = store_with(&[("t", random_tensor(rng, &[d, v], 1.0))]);
            (s, Box::new(move |g, seed| {
                let t = g.param(ids[0]);
                let y = g.gather_cols(t, &ids_in).unwrap();
                let y = g.tanh(y).unwrap();
                weighted_sum(g, y, seed)
            }))
        }),
        ("losses", |rng| {
            let n = rng.gen_range(1..6);
            let target = random_tensor(rng, &[n], 1.0);
            let bits = Tensor::vector((0..n).map(|_| f64::from(rng.gen_range(0..2u8))).collect());
            let mut mask: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
            mask[0] = 1.0;
            let classes: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let (s, ids) = store_with(&[
                ("x", random_tensor(rng, &[n], 2.0)),
                ("z", random_tensor(rng, &[3, n], 2.0)),
            ]);
            (s, Box::new(move |g, _| {
                let (x, z) = (g.param(ids[0]), g.param(ids[1]));
                let a = g.mse(x, &target, &mask).unwrap();
                let p = g.sigmoid(x).unwrap();
                let b = g.bce(p, &bits, &mask).unwrap();
                let c = g.cross_entropy_logits(z, &classes, &mask).unwrap();
                let d = g.masked_mean(x, &mask).unwrap();
                let ab = g.add(a, b).unwrap();
                let cd = g.add(c, d).unwrap();
                g.add(ab, cd).unwrap()
            }))
        }),
    ];

    for (name, make) in cases {
        let mut worst: f64 = 0.0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mut store, build) = make(&mut rng);
            let err = finite_difference_check(
                |s| forward_backward(s, |g| Ok(build(g, seed))),
                &mut store,
                1e-5,
            )
            .unwrap();
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "{name}: max relative error {worst}");
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-30.0f64..30.0, 2..24), cols in 1usize..4) {
        let rows = vals.len() / cols;
        prop_assume!(rows >= 1);
        let t = Tensor::new(vec![rows, cols], vals[..rows * cols].to_vec()).unwrap();
        let (store, _) = store_with(&[]);
        let mut g = Graph::new(&store);
        let x = g.constant(t).unwrap();
        let y = g.softmax(x, 0).unwrap();
        let v = g.value(y);
        for c in 0..cols {
            let col = v.col(c);
            prop_assert!(col.iter().all(|&p| p > 0.0));
            prop_assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes(vals in prop::collection::vec(-1e3f64..1e3, 4..24), scale in 1e-2f64..1e4) {
        let rows = vals.len() / 2;
        let t = Tensor::new(vec![rows, 2], vals[..rows * 2].iter().map(|v| v * scale).collect()).unwrap();
        let (store, _) = store_with(&[]);
        let mut g = Graph::new(&store);
        let x = g.constant(t).unwrap();
        let y = g.layer_norm(x, 0).unwrap();
        let v = g.value(y);
        for c in 0..2 {
            let col = v.col(c);
            let mean = col.iter().sum::<f64>() / rows as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!(col.iter().all(|y| y.abs() <= (rows as f64).sqrt() + 1e-9));
        }
    }

    #[test]
    fn split_inverts_concat(a in prop::collection::vec(-5.0f64..5.0, 1..12), b in prop::collection::vec(-5.0f64..5.0, 1..12)) {
        let (store, _) = store_with(&[]);
        let mut g = Graph::new(&store);
        let an = g.constant(Tensor::vector(a.clone())).unwrap();
        let bn = g.constant(Tensor::vector(b.clone())).unwrap();
        let c = g.concat(&[an, bn], 0).unwrap();
        let parts = g.split(c, 0, &[a.len(), b.len()]).unwrap();
        prop_assert_eq!(g.value(parts[0]).data(), &a[..]);
        prop_assert_eq!(g.value(parts[1]).data(), &b[..]);
    }
}
