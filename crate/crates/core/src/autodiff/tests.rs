use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_t(shape: &[usize], seed: u64) -> DenseTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DenseTensor::uniform(shape, -1.0, 1.0, &mut rng)
}

fn m(rows: &[&[f64]]) -> DenseTensor {
    DenseTensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let i = tape.leaf(DenseTensor::identity(2));
    let b = tape.leaf(m(&[&[3.0, 4.0], &[5.0, 6.0]]));
    let out = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(out), &m(&[&[3.0, 4.0], &[5.0, 6.0]]));

    let r = tape.leaf(m(&[&[1.0, 2.0]]));
    let c = tape.leaf(m(&[&[3.0], &[4.0]]));
    let dot = tape.matmul(r, c).unwrap();
    assert_eq!(tape.value(dot).data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.leaf(DenseTensor::zeros(&[2, 3]));
    let b = tape.leaf(DenseTensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let b = Arc::new(rand_t(&[3, 5], 2));
    let a = rand_t(&[4, 3], 1);
    let rep = finite_diff_check(
        |t, x| {
            let bv = t.leaf((*b).clone());
            t.matmul(x, bv)
        },
        &a,
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-6, "{rep:?}");
    let rep = finite_diff_check(
        |t, x| {
            let av = t.leaf(a.clone());
            t.matmul(av, x)
        },
        &b,
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-6, "{rep:?}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(m(&[&[2.5, 2.5, 2.5]]));
    let y = tape.row_softmax(x, 7.0).unwrap();
    for v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.leaf(m(&[&[0.0, 3f64.ln()]]));
    let y = tape.row_softmax(x, 1.0).unwrap();
    let d = tape.value(y).data();
    assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_rejects_bad_inputs() {
    let mut tape = Tape::new();
    let x = tape.leaf(m(&[&[f64::NAN, 0.0]]));
    assert!(matches!(tape.row_softmax(x, 1.0), Err(Error::Numeric(_))));
    let x = tape.leaf(m(&[&[0.0, 0.0]]));
    assert!(tape.row_softmax(x, 0.0).is_err());
}

#[test]
fn softmax_gradient() {
    let x = rand_t(&[3, 4], 5);
    let rep = finite_diff_check(|t, v| t.row_softmax(v, 1.7), &x, 1e-5).unwrap();
    assert!(rep.max_rel_err < 1e-6, "{rep:?}");
}

#[test]
fn relu_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(DenseTensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(DenseTensor::filled(&[2, 2], -0.5));
    let y = tape.relu(x).unwrap();
    let s = tape.sum(y).unwrap();
    assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
    let g = tape.backward(s).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|v| *v == 0.0));
}

#[test]
fn relu_gradient_away_from_kink() {
    let mut x = rand_t(&[4, 4], 9);
    for v in x.data_mut() {
        if v.abs() < 0.05 {
            *v = 0.3;
        }
    }
    let rep = finite_diff_check(|t, v| t.relu(v), &x, 1e-5).unwrap();
    assert!(rep.max_rel_err < 1e-6, "{rep:?}");
}

#[test]
fn linear_examples() {
    let x = rand_t(&[3, 2], 3);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let w = tape.leaf(DenseTensor::zeros(&[2, 4]));
    let b = tape.leaf(DenseTensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = tape.linear(xv, w, b).unwrap();
    for r in 0..3 {
        assert_eq!(tape.value(y).row(r), &[1.0, 2.0, 3.0, 4.0]);
    }
    let w = tape.leaf(DenseTensor::identity(2));
    let b = tape.leaf(DenseTensor::zeros(&[2]));
    let y = tape.linear(xv, w, b).unwrap();
    assert_eq!(tape.value(y), &x);

    let bad = tape.leaf(DenseTensor::zeros(&[3]));
    let w = tape.leaf(DenseTensor::zeros(&[2, 4]));
    assert!(matches!(tape.linear(xv, w, bad), Err(Error::Dimension { .. })));
}

#[test]
fn linear_parameter_gradients() {
    let mut store = ParamStore::new();
    let w = store.register("w", rand_t(&[3, 4], 1)).unwrap();
    let b = store.register("b", rand_t(&[4], 2)).unwrap();
    let x = rand_t(&[5, 3], 3);
    let rep = finite_diff_check_params(
        &store,
        &[w, b],
        |t, bind| {
            let xv = t.leaf(x.clone());
            let (wv, bv) = (bind.var(t, w), bind.var(t, b));
            t.linear(xv, wv, bv)
        },
        1e-5,
        usize::MAX,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-6, "{rep:?}");
}

#[test]
fn backward_of_sum_and_quadratic() {
    let x = rand_t(&[6], 4);
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let s = tape.sum(v).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.get(v).unwrap().data().iter().all(|d| *d == 1.0));

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone().reshaped(&[6, 1]).unwrap());
    let vt = tape.transpose(v).unwrap();
    let q = tape.matmul(vt, v).unwrap();
    let g = tape.backward(q).unwrap();
    for (d, xv) in g.get(v).unwrap().data().iter().zip(x.data()) {
        assert!((d - 2.0 * xv).abs() < 1e-15);
    }
}

#[test]
fn backward_contract_errors() {
    let mut tape = Tape::new();
    let v = tape.leaf(DenseTensor::zeros(&[2, 2]));
    assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
    let mut other = Tape::new();
    let w = other.leaf(DenseTensor::scalar(1.0));
    assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
}

#[test]
fn unreachable_parameter_gets_no_contribution() {
    let mut store = ParamStore::new();
    let used = store.register("used", DenseTensor::filled(&[2], 1.0)).unwrap();
    let unused = store.register("unused", DenseTensor::filled(&[2], 1.0)).unwrap();
    let mut tape = Tape::new();
    let mut bind = Binder::new(&store);
    let u = bind.var(&mut tape, used);
    let _ = bind.var(&mut tape, unused);
    let s = tape.sum(u).unwrap();
    let g = tape.backward(s).unwrap();
    store.accumulate(&tape, &g);
    assert_eq!(store.get(used).grad.data(), &[1.0, 1.0]);
    assert_eq!(store.get(unused).grad.data(), &[0.0, 0.0]);
}

#[test]
fn composed_chain_matches_finite_differences() {
    let w = rand_t(&[4, 3], 7);
    let k = rand_t(&[5, 3], 8);
    let bias = rand_t(&[3], 9);
    let x = rand_t(&[6, 4], 10);
    let rep = finite_diff_check(
        |t, v| {
            let wv = t.leaf(w.clone());
            let kv = t.leaf(k.clone());
            let bv = t.leaf(bias.clone());
            let q = t.matmul(v, wv)?;
            let logits = t.matmul_nt(q, kv)?;
            let att = t.row_softmax(logits, 3f64.sqrt())?;
            let val = t.matmul(att, kv)?;
            let wt = t.transpose(wv)?;
            let h = t.matmul(val, wt)?;
            let h = t.matmul(h, wv)?;
            let eye = t.leaf(DenseTensor::identity(3));
            t.linear(h, eye, bv)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-5, "{rep:?}");
}

#[test]
fn finite_diff_of_identity_is_exact() {
    let x = rand_t(&[3, 3], 12);
    let rep = finite_diff_check(|_, v| Ok(v), &x, 1e-5).unwrap();
    assert!(rep.max_rel_err < 1e-9, "{rep:?}");
}

#[test]
fn remaining_ops_match_finite_differences() {
    let x = rand_t(&[4, 5], 21);
    let g = Arc::new(vec![3usize, 0, 3, 1]);
    let other = rand_t(&[4, 2], 22);
    let row = rand_t(&[5], 23);
    let cases: Vec<(&str, Box<dyn Fn(&mut Tape, Var) -> Result<Var>>)> = vec![
        ("row_normalize", Box::new(|t, v| t.row_normalize(v))),
        ("row_scale_norm", Box::new(|t, v| t.row_scale_norm(v, 1e-6))),
        ("row_norm", Box::new(|t, v| t.row_norm(v))),
        ("square", Box::new(|t, v| t.square(v))),
        ("mean", Box::new(|t, v| t.mean(v))),
        ("pick", Box::new(|t, v| t.pick(v, 2, 3))),
        ("scale", Box::new(|t, v| t.scale(v, -2.5))),
        ("add_scalar", Box::new(|t, v| t.add_scalar(v, 0.7))),
        ("gather_rows", Box::new(move |t, v| t.gather_rows(v, g.clone()))),
        (
            "concat_cols",
            Box::new(move |t, v| {
                let o = t.leaf(other.clone());
                t.concat_cols(o, v)
            }),
        ),
        (
            "mul_row",
            Box::new(move |t, v| {
                let r = t.leaf(row.clone());
                t.mul_row(v, r)
            }),
        ),
        (
            "sub",
            Box::new(|t, v| {
                let sq = t.square(v)?;
                t.sub(sq, v)
            }),
        ),
        ("reshape", Box::new(|t, v| t.reshape(v, &[2, 10]))),
    ];
    for (name, f) in cases {
        let rep = finite_diff_check(|t, v| f(t, v), &x, 1e-5).unwrap();
        assert!(rep.max_rel_err < 1e-6, "{name}: {rep:?}");
    }
}

#[test]
fn mul_row_weight_gradient() {
    let x = rand_t(&[4, 5], 31);
    let w = rand_t(&[5], 32);
    let rep = finite_diff_check(
        |t, v| {
            let xv = t.leaf(x.clone());
            t.mul_row(xv, v)
        },
        &w,
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-6, "{rep:?}");
}

#[test]
fn conv2d_gradients() {
    let x = rand_t(&[6, 4, 2], 41);
    let k = rand_t(&[3, 3, 2, 3], 42);
    for stride in [1, 2] {
        let rep = finite_diff_check(
            |t, v| {
                let kv = t.leaf(k.clone());
                t.conv2d(v, kv, stride)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "input stride {stride}: {rep:?}");
        let rep = finite_diff_check(
            |t, v| {
                let xv = t.leaf(x.clone());
                t.conv2d(xv, v, stride)
            },
            &k,
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "kernel stride {stride}: {rep:?}");
    }
}

#[test]
fn gradients_accumulate_across_backward_calls() {
    let mut store = ParamStore::new();
    let w = store.register("w", rand_t(&[3, 2], 51)).unwrap();
    let x = rand_t(&[4, 3], 52);
    let run = |store: &mut ParamStore| {
        let snapshot = store.clone();
        let mut tape = Tape::new();
        let mut bind = Binder::new(&snapshot);
        let xv = tape.leaf(x.clone());
        let wv = bind.var(&mut tape, w);
        let y = tape.matmul(xv, wv).unwrap();
        let y = tape.square(y).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        store.accumulate(&tape, &g);
    };
    run(&mut store);
    let single = store.get(w).grad.clone();
    run(&mut store);
    let mut doubled = single.clone();
    doubled.add_assign(&single);
    assert_eq!(store.get(w).grad, doubled);
    store.zero_grad();
    assert!(store.get(w).grad.data().iter().all(|v| *v == 0.0));
}

#[test]
fn forward_replay_is_bit_identical() {
    let x = rand_t(&[5, 4], 61);
    let k = rand_t(&[6, 4], 62);
    let run = || {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let kv = t.leaf(k.clone());
        let l = t.matmul_nt(xv, kv).unwrap();
        let s = t.row_softmax(l, 2.0).unwrap();
        t.value(s).clone()
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn duplicate_parameter_names_rejected() {
    let mut store = ParamStore::new();
    store.register("a", DenseTensor::zeros(&[1])).unwrap();
    assert!(store.register("a", DenseTensor::zeros(&[1])).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        vals in proptest::collection::vec(-50.0f64..50.0, 12),
        scale in 0.1f64..10.0,
    ) {
        let mut tape = Tape::new();
        let x = tape.leaf(DenseTensor::new(vec![3, 4], vals).unwrap());
        let y = tape.row_softmax(x, scale).unwrap();
        let y = tape.value(y);
        for r in 0..3 {
            let s: f64 = y.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(y.row(r).iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
