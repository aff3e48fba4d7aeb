use proptest::prelude::*;
use rand::Rng;
use xavt_core::autograd::{Tape, Var};
use xavt_core::gradcheck::relative_error;
use xavt_core::rng;
use xavt_core::Tensor;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed, "test/tensor");
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

#[test]
fn matmul_equals_triple_loop_on_all_small_shapes() {
    for m in 1..=8 {
        for k in 1..=8 {
            for n in 1..=8 {
                let a = random(&[m, k], (m * 100 + k * 10 + n) as u64);
                let b = random(&[k, n], (m * 100 + k * 10 + n) as u64 + 7);
                let mut t = Tape::new();
                let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
                let c = t.matmul(va, vb).unwrap();
                let want = triple_loop(a.data(), b.data(), m, k, n);
                for (x, y) in t.value(c).data().iter().zip(&want) {
                    assert!((x - y).abs() <= 1e-5, "{m}x{k}x{n}");
                }
            }
        }
    }
}

#[test]
fn batched_matmul_is_per_batch_triple_loop() {
    let a = random(&[3, 2, 4, 5], 1);
    let b = random(&[3, 2, 5, 6], 2);
    let mut t = Tape::new();
    let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
    let c = t.matmul(va, vb).unwrap();
    assert_eq!(t.shape(c), &[3, 2, 4, 6]);
    for g in 0..6 {
        let want = triple_loop(&a.data()[g * 20..(g + 1) * 20], &b.data()[g * 30..(g + 1) * 30], 4, 5, 6);
        let got = &t.value(c).data()[g * 24..(g + 1) * 24];
        assert!(got.iter().zip(&want).all(|(x, y)| (x - y).abs() <= 1e-12));
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..6,
        cols in 1usize..12,
        scale in 0.1f64..200.0,
        seed in any::<u64>(),
    ) {
        let x = random(&[rows, cols], seed).map(|v| v * scale);
        let mut t = Tape::new();
        let v = t.constant(x.cast::<f32>());
        let s = t.softmax(v).unwrap();
        for row in t.value(s).data().chunks(cols) {
            let sum: f32 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-5);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }
}

/// Central differences of `sum(op(inputs) * w)` for a fixed random `w`,
/// against backward.
fn check_op(name: &str, inputs: Vec<Tensor<f64>>, op: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
    let eval = |xs: &[Tensor<f64>], want_grads: bool| -> (f64, Vec<Tensor<f64>>) {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone(), true)).collect();
        let y = op(&mut t, &vars);
        let w = random(t.shape(y), 99);
        let wv = t.constant(w);
        let p = t.mul(y, wv).unwrap();
        let l = t.sum(p);
        let value = t.value(l).item();
        if !want_grads {
            return (value, Vec::new());
        }
        let g = t.backward(l).unwrap();
        let grads = vars
            .iter()
            .zip(xs)
            .map(|(v, x)| g.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect();
        (value, grads)
    };
    let (_, analytic) = eval(&inputs, true);
    let h = 1e-6;
    for (i, x) in inputs.iter().enumerate() {
        for j in 0..x.len() {
            let mut xs = inputs.clone();
            xs[i].data_mut()[j] += h;
            let fp = eval(&xs, false).0;
            xs[i].data_mut()[j] -= 2.0 * h;
            let fm = eval(&xs, false).0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[i].data()[j];
            let e = relative_error(a, numeric);
            assert!(e <= 1e-3, "{name}: input {i} element {j}: {a} vs {numeric}");
        }
    }
}

#[test]
fn primitive_gradients_match_central_differences() {
    check_op("matmul", vec![random(&[3, 4], 1), random(&[4, 2], 2)], |t, v| {
        t.matmul(v[0], v[1]).unwrap()
    });
    check_op("batched matmul", vec![random(&[2, 3, 4], 3), random(&[4, 2], 4)], |t, v| {
        t.matmul(v[0], v[1]).unwrap()
    });
    check_op("add broadcast", vec![random(&[2, 3, 4], 5), random(&[4], 6)], |t, v| {
        t.add(v[0], v[1]).unwrap()
    });
    check_op("mul", vec![random(&[3, 4], 7), random(&[3, 4], 8)], |t, v| {
        t.mul(v[0], v[1]).unwrap()
    });
    check_op("scale", vec![random(&[5], 9)], |t, v| t.scale(v[0], -1.7));
    check_op("scale_rows", vec![random(&[3, 2, 4], 10)], |t, v| {
        t.scale_rows(v[0], vec![0.0, 1.25, 2.0]).unwrap()
    });
    check_op("gelu", vec![random(&[12], 11).map(|x| 3.0 * x)], |t, v| t.gelu(v[0]));
    check_op("softmax", vec![random(&[3, 5], 12).map(|x| 2.0 * x)], |t, v| {
        t.softmax(v[0]).unwrap()
    });
    check_op("masked softmax", vec![random(&[2, 3], 13)], |t, v| {
        let m = Tensor::new(vec![2, 3], vec![0.0, f64::NEG_INFINITY, 0.0, 0.0, 0.0, f64::NEG_INFINITY]).unwrap();
        let m = t.constant(m);
        let x = t.add(v[0], m).unwrap();
        t.softmax(x).unwrap()
    });
    check_op(
        "layer_norm",
        vec![random(&[3, 6], 14).map(|x| 2.0 * x + 0.3), random(&[6], 15), random(&[6], 16)],
        |t, v| t.layer_norm(v[0], v[1], v[2], 1e-6).unwrap(),
    );
    check_op("sum", vec![random(&[2, 3], 17)], |t, v| t.sum(v[0]));
    check_op("mean_axis", vec![random(&[2, 3, 4], 18)], |t, v| t.mean_axis(v[0], 1).unwrap());
    check_op("reshape", vec![random(&[2, 6], 19)], |t, v| t.reshape(v[0], &[3, 4]).unwrap());
    check_op("permute", vec![random(&[2, 3, 4], 20)], |t, v| {
        t.permute(v[0], &[2, 0, 1]).unwrap()
    });
    check_op("concat", vec![random(&[2, 1, 3], 21), random(&[2, 4, 3], 22)], |t, v| {
        t.concat(&[v[0], v[1]], 1).unwrap()
    });
    check_op("slice", vec![random(&[2, 5, 3], 23)], |t, v| t.slice(v[0], 1, 1, 3).unwrap());
    check_op("index_select", vec![random(&[4, 3], 24)], |t, v| {
        t.index_select(v[0], &[3, 0, 3, 1]).unwrap()
    });
    check_op("cross_entropy", vec![random(&[4, 3], 25).map(|x| 3.0 * x)], |t, v| {
        t.cross_entropy(v[0], &[0, 2, 1, 2]).unwrap()
    });
}

#[test]
fn second_backward_is_rejected() {
    let mut t = Tape::new();
    let x = t.leaf(random(&[3], 1), true);
    let l = t.sum(x);
    assert!(t.backward(l).is_ok());
    assert!(t.backward(l).is_err());
}
