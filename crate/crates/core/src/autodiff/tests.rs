use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn vec_var(tape: &mut Tape, v: &[f64]) -> Var {
    tape.constant(Tensor::vector(v.to_vec()))
}

#[test]
fn add_componentwise() {
    let mut t = Tape::new();
    let a = vec_var(&mut t, &[1.0, 2.0]);
    let b = vec_var(&mut t, &[3.0, 4.0]);
    let c = t.elementwise(Elementwise::Add, &[a, b]).unwrap();
    assert_eq!(t.value(c).data(), &[4.0, 6.0]);
}

#[test]
fn exp_of_zero() {
    let mut t = Tape::new();
    let a = vec_var(&mut t, &[0.0]);
    let c = t.exp(a);
    assert_eq!(t.value(c).data(), &[1.0]);
}

#[test]
fn elu_of_minus_one() {
    let mut t = Tape::new();
    let a = vec_var(&mut t, &[-1.0]);
    let c = t.elu(a);
    let expected = (-1f64).exp() - 1.0;
    assert!((t.value(c).item() - expected).abs() < 1e-15);
    assert!((t.value(c).item() + 0.6321).abs() < 1e-4);
}

#[test]
fn binary_shape_mismatch() {
    let mut t = Tape::new();
    let a = vec_var(&mut t, &[1.0, 2.0]);
    let b = vec_var(&mut t, &[1.0]);
    assert!(matches!(t.add(a, b), Err(Error::Contract(_))));
    assert!(matches!(
        t.elementwise(Elementwise::Exp, &[a, b]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn log_of_non_positive() {
    let mut t = Tape::new();
    let a = vec_var(&mut t, &[1.0, 0.0]);
    assert!(matches!(t.log(a), Err(Error::Domain(_))));
}

#[test]
fn matmul_examples() {
    let mut t = Tape::new();
    let eye = t.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let col = t.constant(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
    let r = t.matmul(eye, col).unwrap();
    assert_eq!(t.value(r).data(), &[1.0, 2.0]);

    let row = t.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
    let col = t.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
    let r = t.matmul(row, col).unwrap();
    assert_eq!(t.value(r).data(), &[11.0]);

    let zero = t.constant(Tensor::zeros(&[1, 2]));
    let any = t.constant(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let r = t.matmul(zero, any).unwrap();
    assert_eq!(t.value(r).data(), &[0.0, 0.0, 0.0]);

    assert!(t.matmul(any, any).is_err());
}

#[test]
fn reductions() {
    let mut t = Tape::new();
    let a = vec_var(&mut t, &[1.0, 2.0, 3.0]);
    let s = t.sum(a);
    let m = t.mean(a);
    assert_eq!(t.value(s).item(), 6.0);
    assert_eq!(t.value(m).item(), 2.0);

    let mat = t.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let s0 = t.sum_axis(mat, 0).unwrap();
    assert_eq!(t.value(s0).data(), &[4.0, 6.0]);
    let m1 = t.mean_axis(mat, 1).unwrap();
    assert_eq!(t.value(m1).data(), &[1.5, 3.5]);
    assert!(t.sum_axis(mat, 2).is_err());
}

#[test]
fn log_softmax_examples() {
    let mut t = Tape::new();
    let a = vec_var(&mut t, &[0.0, 0.0]);
    let r = t.log_softmax(a).unwrap();
    for v in t.value(r).data() {
        assert!((v - 0.5f64.ln()).abs() < 1e-15);
    }

    for c in [-700.0, 0.0, 3.5, 800.0] {
        let a = vec_var(&mut t, &[c, c, c]);
        let r = t.log_softmax(a).unwrap();
        for v in t.value(r).data() {
            assert!((v - (1.0f64 / 3.0).ln()).abs() < 1e-12);
        }
    }

    let a = vec_var(&mut t, &[1f64.ln(), 3f64.ln()]);
    let r = t.log_softmax(a).unwrap();
    assert!((t.value(r).data()[0] - 0.25f64.ln()).abs() < 1e-12);
    assert!((t.value(r).data()[1] - 0.75f64.ln()).abs() < 1e-12);
}

#[test]
fn log_softmax_normalizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut t = Tape::new();
    for _ in 0..50 {
        let v: Vec<f64> = (0..7).map(|_| rng.random_range(-40.0..40.0)).collect();
        let a = vec_var(&mut t, &v);
        let r = t.log_softmax(a).unwrap();
        let total: f64 = t.value(r).data().iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

fn params_of(name: &str, v: Tensor) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert(name, v).unwrap();
    p
}

#[test]
fn backward_of_sum_is_ones() {
    let params = params_of("p", Tensor::matrix(2, 3, vec![0.5; 6]).unwrap());
    let mut t = Tape::new();
    let p = t.param(&params, "p").unwrap();
    let s = t.sum(p);
    let g = t.backward(s, &params).unwrap();
    assert_eq!(g["p"].data(), &[1.0; 6]);
    assert_eq!(g["p"].shape(), &[2, 3]);
}

#[test]
fn backward_of_sum_of_squares() {
    let params = params_of("p", Tensor::vector(vec![1.0, 2.0]));
    let mut t = Tape::new();
    let p = t.param(&params, "p").unwrap();
    let sq = t.square(p);
    let s = t.sum(sq);
    let g = t.backward(s, &params).unwrap();
    assert_eq!(g["p"].data(), &[2.0, 4.0]);
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let logits = [0.3, -1.2, 2.0, 0.7];
    let label = 2;
    let params = params_of("z", Tensor::vector(logits.to_vec()));
    let mut t = Tape::new();
    let z = t.param(&params, "z").unwrap();
    let z2 = t.reshape(z, vec![1, 4]).unwrap();
    let lp = t.log_softmax(z2).unwrap();
    let picked = t.pick(lp, &[label]).unwrap();
    let s = t.sum(picked);
    let loss = t.neg(s);
    let g = t.backward(loss, &params).unwrap();

    let lse = log_sum_exp(&logits);
    for (i, (&gi, &zi)) in g["z"].data().iter().zip(&logits).enumerate() {
        let expected = (zi - lse).exp() - if i == label { 1.0 } else { 0.0 };
        assert!((gi - expected).abs() < 1e-12);
    }

    let err = grad_check(
        |t, z| {
            let z2 = t.reshape(z, vec![1, 4])?;
            let lp = t.log_softmax(z2)?;
            let picked = t.pick(lp, &[label])?;
            let s = t.sum(picked);
            Ok(t.neg(s))
        },
        &Tensor::vector(logits.to_vec()),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "cross-entropy grad check {err}");
}

#[test]
fn absent_parameters_get_zero_gradient() {
    let mut params = params_of("used", Tensor::vector(vec![1.0]));
    params
        .insert("unused", Tensor::matrix(2, 2, vec![1.0; 4]).unwrap())
        .unwrap();
    let mut t = Tape::new();
    let u = t.param(&params, "used").unwrap();
    let s = t.sum(u);
    let g = t.backward(s, &params).unwrap();
    assert_eq!(g["unused"].data(), &[0.0; 4]);
    assert_eq!(g["unused"].shape(), &[2, 2]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let params = params_of("p", Tensor::vector(vec![1.0, 2.0]));
    let mut t = Tape::new();
    let p = t.param(&params, "p").unwrap();
    assert!(matches!(t.backward(p, &params), Err(Error::Contract(_))));
}

#[test]
fn repeated_param_use_accumulates() {
    let params = params_of("p", Tensor::vector(vec![3.0]));
    let mut t = Tape::new();
    let a = t.param(&params, "p").unwrap();
    let b = t.param(&params, "p").unwrap();
    assert_eq!(a, b);
    let prod = t.mul(a, b).unwrap();
    let s = t.sum(prod);
    let g = t.backward(s, &params).unwrap();
    assert_eq!(g["p"].data(), &[6.0]);
}

#[test]
fn grad_check_examples() {
    let linear = grad_check(
        |t, x| Ok(t.sum(x)),
        &Tensor::vector(vec![0.3, -2.0, 5.0]),
        1e-5,
    );
    assert!(linear.unwrap() <= 1e-10);

    let e = grad_check(
        |t, x| {
            let y = t.exp(x);
            Ok(t.sum(y))
        },
        &Tensor::vector(vec![0.0, 1.0]),
        1e-5,
    )
    .unwrap();
    assert!(e <= 1e-6);

    assert!(grad_check(|t, x| Ok(t.sum(x)), &Tensor::scalar(0.0), 0.0).is_err());
    assert!(grad_check(|t, x| Ok(t.sum(x)), &Tensor::scalar(0.0), 0.1).is_err());
}

type Unary = fn(&mut Tape, Var) -> crate::Result<Var>;

/// Every differentiable op reduced to a scalar through a fixed random
/// projection, so that each output coordinate carries a distinct weight.
fn scalarize(t: &mut Tape, y: Var, seed: u64) -> crate::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = t.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = t.constant(Tensor::new(shape, w)?);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn check_op(name: &str, op: Unary, shape: &[usize], lo: f64, hi: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    for trial in 0..20 {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        let point = Tensor::new(shape.to_vec(), data).unwrap();
        let err = grad_check(
            |t, x| {
                let y = op(t, x)?;
                scalarize(t, y, trial)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{name}: trial {trial} relative error {err}");
    }
}

#[test]
fn every_op_passes_grad_check() {
    let cases: Vec<(&str, Unary, Vec<usize>, f64, f64)> = vec![
        ("neg", |t, x| Ok(t.neg(x)), vec![5], -3.0, 3.0),
        ("exp", |t, x| Ok(t.exp(x)), vec![5], -3.0, 3.0),
        ("log", |t, x| t.log(x), vec![5], 0.2, 5.0),
        ("square", |t, x| Ok(t.square(x)), vec![5], -3.0, 3.0),
        ("sqrt", |t, x| t.sqrt(x), vec![5], 0.2, 5.0),
        ("elu", |t, x| Ok(t.elu(x)), vec![5], -3.0, 3.0),
        ("swish1", |t, x| Ok(t.swish1(x)), vec![5], -4.0, 4.0),
        // interior of the clamp interval only
        ("clamp", |t, x| t.clamp(x, -10.0, 10.0), vec![5], -9.0, 9.0),
        ("scale", |t, x| Ok(t.scale(x, -2.5)), vec![5], -3.0, 3.0),
        ("shift", |t, x| Ok(t.shift(x, 1.5)), vec![5], -3.0, 3.0),
        (
            "add",
            |t, x| {
                let y = t.exp(x);
                t.add(x, y)
            },
            vec![4],
            -2.0,
            2.0,
        ),
        (
            "sub",
            |t, x| {
                let y = t.square(x);
                t.sub(x, y)
            },
            vec![4],
            -2.0,
            2.0,
        ),
        (
            "mul",
            |t, x| {
                let y = t.exp(x);
                t.mul(x, y)
            },
            vec![4],
            -2.0,
            2.0,
        ),
        (
            "div",
            |t, x| {
                let y = t.exp(x);
                t.div(x, y)
            },
            vec![4],
            -2.0,
            2.0,
        ),
        (
            "matmul",
            |t, x| {
                let xt = t.transpose(x)?;
                t.matmul(x, xt)
            },
            vec![3, 4],
            -2.0,
            2.0,
        ),
        ("sum_axis0", |t, x| t.sum_axis(x, 0), vec![3, 4], -2.0, 2.0),
        (
            "mean_axis1",
            |t, x| t.mean_axis(x, 1),
            vec![3, 4],
            -2.0,
            2.0,
        ),
        ("mean", |t, x| Ok(t.mean(x)), vec![2, 3, 2], -2.0, 2.0),
        (
            "log_mean_exp_axis1",
            |t, x| t.log_mean_exp(x, 1),
            vec![2, 5, 3],
            -4.0,
            4.0,
        ),
        ("log_softmax", |t, x| t.log_softmax(x), vec![6], -4.0, 4.0),
        (
            "log_softmax_rows",
            |t, x| t.log_softmax(x),
            vec![3, 4],
            -4.0,
            4.0,
        ),
        (
            "reshape",
            |t, x| t.reshape(x, vec![2, 6]),
            vec![3, 4],
            -2.0,
            2.0,
        ),
        (
            "broadcast_rows",
            |t, x| {
                let r = t.sum_axis(x, 0)?;
                t.broadcast_rows(r, 3)
            },
            vec![2, 4],
            -2.0,
            2.0,
        ),
        (
            "broadcast_cols",
            |t, x| {
                let r = t.sum_axis(x, 1)?;
                t.broadcast_cols(r, 3)
            },
            vec![2, 4],
            -2.0,
            2.0,
        ),
        (
            "concat_axis1",
            |t, x| {
                let y = t.exp(x);
                t.concat(&[x, y, x], 1)
            },
            vec![2, 3],
            -2.0,
            2.0,
        ),
        (
            "concat_axis0",
            |t, x| {
                let y = t.square(x);
                t.concat(&[y, x], 0)
            },
            vec![2, 3],
            -2.0,
            2.0,
        ),
        (
            "rows",
            |t, x| t.rows(x, &[2, 0, 2, 1]),
            vec![3, 2],
            -2.0,
            2.0,
        ),
        ("cols", |t, x| t.cols(x, &[1, 1, 0]), vec![3, 2], -2.0, 2.0),
        ("pick", |t, x| t.pick(x, &[1, 0, 1]), vec![3, 2], -2.0, 2.0),
    ];
    for (name, op, shape, lo, hi) in cases {
        check_op(name, op, &shape, lo, hi);
    }
}

#[test]
fn clamp_blocks_gradient_outside() {
    let params = params_of("p", Tensor::vector(vec![-20.0, 0.0, 20.0]));
    let mut t = Tape::new();
    let p = t.param(&params, "p").unwrap();
    let c = t.clamp(p, -10.0, 10.0).unwrap();
    assert_eq!(t.value(c).data(), &[-10.0, 0.0, 10.0]);
    let s = t.sum(c);
    let g = t.backward(s, &params).unwrap();
    assert_eq!(g["p"].data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn custom_op_uses_supplied_backward() {
    let params = params_of("p", Tensor::vector(vec![2.0]));
    let mut t = Tape::new();
    let p = t.param(&params, "p").unwrap();
    let x = t.value(p).item();
    let cube = t.custom(&[p], Tensor::vector(vec![x * x * x]), move |g| {
        vec![vec![3.0 * x * x * g[0]]]
    });
    let s = t.sum(cube);
    let g = t.backward(s, &params).unwrap();
    assert_eq!(g["p"].data(), &[12.0]);
}

#[test]
fn forward_is_independent_of_tape_state() {
    let input = Tensor::matrix(2, 3, vec![0.1, -0.4, 2.0, 1.3, -0.7, 0.05]).unwrap();
    let run = |t: &mut Tape| {
        let x = t.constant(input.clone());
        let e = t.elu(x);
        let xt = t.transpose(e).unwrap();
        let m = t.matmul(x, xt).unwrap();
        let ls = t.log_softmax(m).unwrap();
        let s = t.sum(ls);
        t.value(s).item()
    };
    let fresh = run(&mut Tape::new());
    let mut busy = Tape::new();
    for _ in 0..5 {
        run(&mut busy);
    }
    assert_eq!(fresh.to_bits(), run(&mut busy).to_bits());
}

fn two_functions(t: &mut Tape, x: Var) -> (Var, Var) {
    let e = t.exp(x);
    let f = t.sum(e);
    let sq = t.square(x);
    let el = t.elu(sq);
    let g = t.mean(el);
    (f, g)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_is_linear(
        xs in proptest::collection::vec(-2.0f64..2.0, 1..6),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let params = params_of("x", Tensor::vector(xs.clone()));
        let grad = |combine: &dyn Fn(&mut Tape, Var, Var) -> Var| {
            let mut t = Tape::new();
            let x = t.param(&params, "x").unwrap();
            let (f, g) = two_functions(&mut t, x);
            let loss = combine(&mut t, f, g);
            t.backward(loss, &params).unwrap()["x"].clone()
        };
        let gf = grad(&|_, f, _| f);
        let gg = grad(&|_, _, g| g);
        let gc = grad(&|t, f, g| {
            let fa = t.scale(f, a);
            let gb = t.scale(g, b);
            t.add(fa, gb).unwrap()
        });
        for i in 0..xs.len() {
            let expected = a * gf.data()[i] + b * gg.data()[i];
            prop_assert!((gc.data()[i] - expected).abs() < 1e-12 * (1.0 + expected.abs()));
        }
    }

    #[test]
    fn log_softmax_shift_invariant(
        xs in proptest::collection::vec(-50.0f64..50.0, 1..8),
        c in -100.0f64..100.0,
    ) {
        let mut t = Tape::new();
        let a = vec_var(&mut t, &xs);
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        let b = vec_var(&mut t, &shifted);
        let la = t.log_softmax(a).unwrap();
        let lb = t.log_softmax(b).unwrap();
        prop_assert!(t.value(la).max_abs_diff(t.value(lb)) < 1e-10);
    }
}
