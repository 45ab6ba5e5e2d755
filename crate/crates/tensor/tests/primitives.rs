//! Finite-difference checks for every primitive plus algebraic properties.

use msved_tensor::{finite_difference_check, Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect())
}

/// Reduces `y` to a scalar with fixed random weights so every output
/// coordinate contributes a distinct gradient.
fn weighted_sum<'t>(tape: &mut Tape<'t>, y: Var, seed: u64) -> Result<Var> {
    let (r, c) = tape.value(y).dims2()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random(&mut rng, r, c, -1.0, 1.0));
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

fn check_unary(name: &str, lo: f64, hi: f64, op: impl for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (r, c) in [(1, 1), (3, 5), (16, 16)] {
        let x = random(&mut rng, r, c, lo, hi);
        let err = finite_difference_check(
            |t, v| {
                let y = op(t, v)?;
                weighted_sum(t, y, 11)
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err < TOL, "{name} {r}x{c}: relative error {err}");
    }
}

#[test]
fn elementwise_primitives_match_finite_differences() {
    check_unary("sigmoid", -3.0, 3.0, |t, x| t.sigmoid(x));
    check_unary("tanh", -2.0, 2.0, |t, x| t.tanh(x));
    check_unary("softplus", -4.0, 4.0, |t, x| t.softplus(x));
    check_unary("exp", -2.0, 2.0, |t, x| t.exp(x));
    check_unary("log", 0.2, 3.0, |t, x| t.log(x));
    check_unary("square", -2.0, 2.0, |t, x| t.square(x));
    check_unary("scale_shift", -2.0, 2.0, |t, x| t.scale_shift(x, -1.7, 0.3));
}

#[test]
fn row_normalizers_match_finite_differences() {
    check_unary("softmax", -3.0, 3.0, |t, x| t.softmax(x, 1.0));
    check_unary("softmax_tau", -3.0, 3.0, |t, x| t.softmax(x, 0.37));
    check_unary("log_softmax", -3.0, 3.0, |t, x| t.log_softmax(x));
    check_unary("sum_rows", -1.0, 1.0, |t, x| t.sum_rows(x));
    check_unary("mean_all", -1.0, 1.0, |t, x| t.mean_all(x));
}

type BinaryCase = (&'static str, Tensor, Box<dyn for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>>);

#[test]
fn binary_primitives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, 4, 6, -1.0, 1.0);
    let b = random(&mut rng, 6, 5, -1.0, 1.0);
    let same = random(&mut rng, 4, 6, -1.0, 1.0);
    let bias = random(&mut rng, 1, 6, -1.0, 1.0);
    let col = random(&mut rng, 4, 1, -1.0, 1.0);

    // Gradient w.r.t. each argument in turn, the other held constant.
    let cases: Vec<BinaryCase> = vec![
        ("matmul/lhs", a.clone(), Box::new({
            let b = b.clone();
            move |t, x| { let c = t.constant(b.clone()); t.matmul(x, c) }
        })),
        ("matmul/rhs", b.clone(), Box::new({
            let a = a.clone();
            move |t, x| { let c = t.constant(a.clone()); t.matmul(c, x) }
        })),
        ("add", a.clone(), Box::new({
            let s = same.clone();
            move |t, x| { let c = t.constant(s.clone()); t.add(x, c) }
        })),
        ("sub/rhs", a.clone(), Box::new({
            let s = same.clone();
            move |t, x| { let c = t.constant(s.clone()); t.sub(c, x) }
        })),
        ("mul", a.clone(), Box::new({
            let s = same.clone();
            move |t, x| { let c = t.constant(s.clone()); t.mul(c, x) }
        })),
        ("add_bias/x", a.clone(), Box::new({
            let bias = bias.clone();
            move |t, x| { let c = t.constant(bias.clone()); t.add_bias(x, c) }
        })),
        ("add_bias/bias", bias.clone(), Box::new({
            let a = a.clone();
            move |t, x| { let c = t.constant(a.clone()); t.add_bias(c, x) }
        })),
        ("scale_rows/x", a.clone(), Box::new({
            let col = col.clone();
            move |t, x| { let c = t.constant(col.clone()); t.scale_rows(x, c) }
        })),
        ("scale_rows/s", col.clone(), Box::new({
            let a = a.clone();
            move |t, x| { let c = t.constant(a.clone()); t.scale_rows(c, x) }
        })),
        ("select_rows", a.clone(), Box::new({
            let s = same.clone();
            move |t, x| { let c = t.constant(s.clone()); t.select_rows(&[true, false, true, true], x, c) }
        })),
        ("concat_cols", a.clone(), Box::new({
            let col = col.clone();
            move |t, x| { let c = t.constant(col.clone()); t.concat_cols(&[c, x, x]) }
        })),
        ("slice_cols", a.clone(), Box::new(|t, x| t.slice_cols(x, 2, 3))),
        ("slice_rows", a.clone(), Box::new(|t, x| t.slice_rows(x, 1, 2))),
        ("concat_rows", a.clone(), Box::new({
            let s = same.clone();
            move |t, x| { let c = t.constant(s.clone()); let top = t.slice_rows(x, 0, 3)?; t.concat_rows(&[top, c, x]) }
        })),
        ("lookup", b.clone(), Box::new(|t, x| t.lookup(x, &[5, 0, 5, 2]))),
        ("pick", a.clone(), Box::new(|t, x| t.pick(x, &[Some(1), None, Some(5), Some(0)]))),
        ("cross_entropy", a.clone(), Box::new(|t, x| t.masked_cross_entropy(x, &[Some(1), None, Some(5), Some(0)]))),
        ("dot_rows", a.clone(), Box::new({
            let s = same.clone();
            move |t, x| { let c = t.constant(s.clone()); t.dot_rows(x, c) }
        })),
    ];
    for (name, x, op) in cases {
        let err = finite_difference_check(
            |t, v| {
                let y = op(t, v)?;
                weighted_sum(t, y, 5)
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err < TOL, "{name}: relative error {err}");
    }
}

#[test]
fn gradient_of_sum_of_product_is_b_transposed_broadcast() {
    // d/dA sum(A B) = 1 B^T: every row equals the row sums of B.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, 3, 4, -1.0, 1.0);
    let b = random(&mut rng, 4, 2, -1.0, 1.0);
    let mut tape = Tape::new();
    let av = tape.leaf(a.clone(), true);
    let bv = tape.constant(b.clone());
    let p = tape.matmul(av, bv).unwrap();
    let s = tape.sum_all(p).unwrap();
    let g = tape.backward(s).unwrap();
    let grad = g.get(av).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let want = b.at(k, 0) + b.at(k, 1);
            assert!((grad[i * 4 + k] - want).abs() < 1e-14);
        }
    }
    let err = finite_difference_check(
        |t, x| {
            let c = t.constant(b.clone());
            let p = t.matmul(x, c)?;
            t.sum_all(p)
        },
        &a,
        H,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(
        data in prop::collection::vec(-50.0f64..50.0, 12),
        tau in 0.05f64..20.0,
    ) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(3, 4, data));
        let y = tape.softmax(x, tau).unwrap();
        for row in tape.value(y).data().chunks(4) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn doubled_function_doubles_the_gradient(data in prop::collection::vec(-2.0f64..2.0, 6)) {
        let f = |t: &mut Tape, x: Var| -> Result<Var> {
            let s = t.tanh(x)?;
            let e = t.mul(s, x)?;
            t.sum_all(e)
        };
        let x = Tensor::matrix(2, 3, data);
        let mut tape = Tape::new();
        let leaf = tape.leaf(x.clone(), true);
        let once = f(&mut tape, leaf).unwrap();
        let g1 = tape.backward(once).unwrap().get(leaf).unwrap().to_vec();

        // Same node added to itself: the seed gradient is exactly 2.
        let mut tape = Tape::new();
        let leaf = tape.leaf(x.clone(), true);
        let y = f(&mut tape, leaf).unwrap();
        let twice = tape.add(y, y).unwrap();
        let g2 = tape.backward(twice).unwrap().get(leaf).unwrap().to_vec();
        for (x1, x2) in g1.iter().zip(&g2) {
            prop_assert_eq!(2.0 * x1, *x2);
        }

        // Two separate evaluations accumulate in a different order.
        let mut tape = Tape::new();
        let leaf = tape.leaf(x, true);
        let a = f(&mut tape, leaf).unwrap();
        let b = f(&mut tape, leaf).unwrap();
        let sum = tape.add(a, b).unwrap();
        let g3 = tape.backward(sum).unwrap().get(leaf).unwrap().to_vec();
        for (x1, x3) in g1.iter().zip(&g3) {
            prop_assert!((2.0 * x1 - x3).abs() <= 1e-12 * (1.0 + x3.abs()));
        }
    }

    #[test]
    fn replay_is_bit_identical(seed in any::<u64>()) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, 4, 4, -1.0, 1.0);
            let w = random(&mut rng, 4, 3, -1.0, 1.0);
            let mut tape = Tape::new();
            let xv = tape.leaf(x, true);
            let wv = tape.leaf(w, true);
            let h = tape.matmul(xv, wv).unwrap();
            let s = tape.log_softmax(h).unwrap();
            let l = tape.mean_all(s).unwrap();
            let g = tape.backward(l).unwrap();
            (tape.scalar(l).to_bits(), g.get(wv).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        prop_assert_eq!(run(), run());
    }
}
