use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{check_gradients, GradCheckOptions};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    out
}

/// exp(x_i) / Σ exp(x_j) without max-subtraction, compensated summation.
fn softmax_oracle(x: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &v in &e {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    let total = sum + comp;
    e.iter().map(|v| v / total).collect()
}

#[test]
fn matmul_identity_and_shape() {
    let mut r = rng(1);
    let m = Tensor::<f64>::randn(&[3, 3], 1.0, &mut r);
    assert_eq!(Tensor::eye(3).matmul(&m).unwrap(), m);
    let a = Tensor::<f64>::randn(&[2, 3], 1.0, &mut r);
    let b = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
    assert_eq!(a.matmul(&b).unwrap().shape(), &[2, 4]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(2);
    for _ in 0..10 {
        let a = Tensor::<f64>::randn(&[4, 4], 1.0, &mut r);
        let b = Tensor::<f64>::randn(&[4, 4], 1.0, &mut r);
        let got = a.matmul(&b).unwrap();
        for (g, e) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((g - e).abs() <= 1e-12 * e.abs().max(1.0), "{g} vs {e}");
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

#[test]
fn softmax_closed_forms() {
    let s = t(&[4], &[0.7; 4]).softmax(0).unwrap();
    for v in s.data() {
        assert!((v - 0.25).abs() < 1e-15);
    }
    let s = t(&[2], &[0.0, 3f64.ln()]).softmax(0).unwrap();
    assert!((s.data()[0] - 0.25).abs() < 1e-15);
    assert!((s.data()[1] - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_matches_compensated_oracle() {
    let mut r = rng(3);
    for _ in 0..20 {
        let x = Tensor::<f64>::randn(&[8], 2.0, &mut r);
        let got = x.softmax(0).unwrap();
        for (g, e) in got.data().iter().zip(softmax_oracle(x.data())) {
            assert!((g - e).abs() <= 1e-12 * e, "{g} vs {e}");
        }
    }
}

#[test]
fn softmax_rejects_non_finite() {
    let x = t(&[2], &[f64::NAN, 0.0]);
    assert!(matches!(x.softmax(0), Err(Error::Numeric { .. })));
}

#[test]
fn layer_norm_cases() {
    let mut g = Graph::<f64>::new();
    let gain = g.constant(Tensor::ones(&[3]));
    let bias = g.constant(Tensor::zeros(&[3]));
    let x = g.constant(t(&[1, 3], &[2.0, 2.0, 2.0]));
    let y = g.layer_norm(x, gain, bias).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));

    let gain = g.constant(Tensor::ones(&[2]));
    let bias = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(t(&[2], &[1.0, -1.0]));
    let y = g.layer_norm(x, gain, bias).unwrap();
    let expected = 1.0 / (1.0f64 + LAYER_NORM_EPS).sqrt();
    assert!((g.value(y).data()[0] - expected).abs() < 1e-12);
    assert!((g.value(y).data()[1] + expected).abs() < 1e-12);
}

#[test]
fn layer_norm_rejects_mismatched_gain() {
    let mut g = Graph::<f64>::new();
    let gain = g.constant(Tensor::ones(&[2]));
    let bias = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(Tensor::zeros(&[1, 3]));
    assert!(g.layer_norm(x, gain, bias).is_err());
}

#[test]
fn stop_gradient_contract() {
    let x0 = t(&[3], &[1.0, -2.0, 0.5]);
    let mut g = Graph::<f64>::new();
    let x = g.param(x0.clone());
    let s = g.stop_gradient(x);
    assert_eq!(g.value(s), &x0);
    let total = g.sum_all(s).unwrap();
    // The output does not even require grad, so there is nothing to seed.
    assert!(!g.requires_grad(total));

    let mut g = Graph::<f64>::new();
    let x = g.param(x0.clone());
    let s = g.stop_gradient(x);
    let d = g.sub(x, s).unwrap();
    assert!(g.value(d).data().iter().all(|v| *v == 0.0));
    let total = g.sum_all(d).unwrap();
    let grads = g.backward(total).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn stop_gradient_zeroes_only_its_edge() {
    // f = sum(x * y) + sum(sg(x) * y): grad_x sees only the first term.
    let mut r = rng(4);
    let x0 = Tensor::<f64>::randn(&[4], 1.0, &mut r);
    let y0 = Tensor::<f64>::randn(&[4], 1.0, &mut r);
    let mut g = Graph::<f64>::new();
    let x = g.param(x0.clone());
    let y = g.param(y0.clone());
    let p = g.mul(x, y).unwrap();
    let sx = g.stop_gradient(x);
    let q = g.mul(sx, y).unwrap();
    let f = g.add(p, q).unwrap();
    let f = g.sum_all(f).unwrap();
    let grads = g.backward(f).unwrap();
    assert_eq!(grads.get(x).unwrap(), &y0);
    assert_eq!(grads.get(y).unwrap(), &x0.scale(2.0));
}

#[test]
fn elementary_values() {
    let mut g = Graph::<f64>::new();
    let v = g.constant(t(&[2], &[3.0, 4.0]));
    let n = g.l2_normalize(v).unwrap();
    assert_eq!(g.value(n).data(), &[0.6, 0.8]);
    let m = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let mean = g.mean_all(m).unwrap();
    assert_eq!(g.value(mean).item(), 2.0);
}

#[test]
fn backward_visits_in_reverse_construction_order() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let a = g.exp(x);
    let b = g.mul(a, x).unwrap();
    let c = g.sum_all(b).unwrap();
    for v in [a, b, c] {
        assert!(g.parents(v).iter().all(|p| p.index() < v.index()));
    }
    // d/dx (x e^x) = e^x (1 + x)
    let grads = g.backward(c).unwrap();
    let gx = grads.get(x).unwrap().data();
    assert!((gx[0] - 1f64.exp() * 2.0).abs() < 1e-12);
    assert!((gx[1] - 2f64.exp() * 3.0).abs() < 1e-12);
}

#[test]
fn backward_requires_scalar_output() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros(&[2]));
    assert!(g.backward(x).is_err());
}

#[test]
fn backward_is_linear_over_independent_subgraphs() {
    let mut r = rng(5);
    let x0 = Tensor::<f64>::randn(&[3, 3], 1.0, &mut r);
    let build = |g: &mut Graph<f64>, x: Var, which: u8| -> Var {
        let f = match which {
            0 => {
                let e = g.exp(x);
                g.sum_all(e).unwrap()
            }
            _ => {
                let s = g.softmax(x, 1).unwrap();
                let s = g.mul(s, x).unwrap();
                g.sum_all(s).unwrap()
            }
        };
        f
    };
    let grad_of = |which: &[u8]| {
        let mut g = Graph::<f64>::new();
        let x = g.param(x0.clone());
        let outs: Vec<Var> = which.iter().map(|&w| build(&mut g, x, w)).collect();
        let mut total = outs[0];
        for o in &outs[1..] {
            total = g.add(total, *o).unwrap();
        }
        g.backward(total).unwrap().get(x).unwrap().clone()
    };
    let both = grad_of(&[0, 1]);
    let sum = grad_of(&[0]).add(&grad_of(&[1])).unwrap();
    assert!(both.max_abs_diff(&sum) < 1e-14);
}

/// Every differentiable primitive against central differences at 10 random points.
#[test]
fn primitives_match_finite_differences() {
    type Case = (&'static str, Vec<Vec<usize>>, fn(&mut Graph<f64>, &[Var]) -> Result<Var>);
    let cases: Vec<Case> = vec![
        ("add", vec![vec![2, 3], vec![3]], |g, v| {
            let y = g.add(v[0], v[1])?;
            let y = g.mul(y, y)?;
            g.sum_all(y)
        }),
        ("sub", vec![vec![2, 3], vec![2, 1]], |g, v| {
            let y = g.sub(v[0], v[1])?;
            let y = g.mul(y, y)?;
            g.sum_all(y)
        }),
        ("mul", vec![vec![2, 3], vec![1, 3]], |g, v| {
            let y = g.mul(v[0], v[1])?;
            let y = g.exp(y);
            g.sum_all(y)
        }),
        ("div", vec![vec![2, 3], vec![3]], |g, v| {
            let e = g.exp(v[1]);
            let y = g.div(v[0], e)?;
            let y = g.mul(y, y)?;
            g.sum_all(y)
        }),
        ("matmul", vec![vec![2, 3, 4], vec![4, 2]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let y = g.mul(y, y)?;
            g.sum_all(y)
        }),
        ("batched_matmul", vec![vec![2, 3, 4], vec![2, 4, 2]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let y = g.mul(y, y)?;
            g.sum_all(y)
        }),
        ("softmax", vec![vec![3, 4], vec![3, 4]], |g, v| {
            let y = g.softmax(v[0], 0)?;
            let y = g.mul(y, v[1])?;
            g.sum_all(y)
        }),
        ("logsumexp", vec![vec![3, 4]], |g, v| {
            let y = g.logsumexp(v[0], 1)?;
            let y = g.mul(y, y)?;
            g.sum_all(y)
        }),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5], vec![3, 5]], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            let y = g.mul(y, v[3])?;
            g.sum_all(y)
        }),
        ("gelu", vec![vec![10]], |g, v| {
            let y = g.gelu(v[0]);
            let y = g.mul(y, y)?;
            g.sum_all(y)
        }),
        ("exp_log", vec![vec![6]], |g, v| {
            let e = g.exp(v[0]);
            let one = g.constant(Tensor::ones(&[6]));
            let s = g.add(e, one)?;
            let l = g.log(s)?;
            let l = g.mul(l, v[0])?;
            g.sum_all(l)
        }),
        ("l2_normalize", vec![vec![3, 4], vec![3, 4]], |g, v| {
            let y = g.l2_normalize(v[0])?;
            let y = g.mul(y, v[1])?;
            g.sum_all(y)
        }),
        ("mean_transpose", vec![vec![3, 4]], |g, v| {
            let y = g.transpose(v[0])?;
            let y = g.mul(y, y)?;
            let y = g.mean(y, 0)?;
            let y = g.exp(y);
            g.sum_all(y)
        }),
        ("permute_reshape", vec![vec![2, 3, 4], vec![4, 2, 3]], |g, v| {
            let y = g.permute(v[0], &[2, 0, 1])?;
            let y = g.mul(y, v[1])?;
            let y = g.reshape(y, &[24])?;
            let y = g.mul(y, y)?;
            g.sum_all(y)
        }),
        ("concat_slice", vec![vec![2, 3], vec![2, 2]], |g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            let s = g.slice(c, 1, 1, 4)?;
            let y = g.mul(s, s)?;
            let y = g.exp(y);
            g.sum_all(y)
        }),
        ("gather_scatter", vec![vec![4, 3], vec![5, 3]], |g, v| {
            let rows = g.gather_rows(v[0], &[2, 0, 2, 3])?;
            let back = g.scatter_rows(rows, &[1, 4, 1, 0], 5)?;
            let y = g.mul(back, v[1])?;
            let y = g.mul(y, y)?;
            g.sum_all(y)
        }),
        ("broadcast_clamp", vec![vec![3], vec![2, 3]], |g, v| {
            let b = g.broadcast_to(v[0], &[2, 3])?;
            let e = g.exp(v[1]);
            let c = g.clamp_min(e, 0.5);
            let y = g.mul(b, c)?;
            let y = g.mul(y, y)?;
            g.sum_all(y)
        }),
        ("scale_neg", vec![vec![4]], |g, v| {
            let y = g.scale(v[0], 3.0);
            let y = g.neg(y);
            let y = g.exp(y);
            g.sum_all(y)
        }),
    ];
    let opts = GradCheckOptions::default();
    for (name, shapes, f) in cases {
        for point in 0..10u64 {
            let mut r = rng(100 + point);
            let inputs: Vec<Tensor<f64>> =
                shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut r)).collect();
            let report = check_gradients(&inputs, f, &opts).unwrap();
            assert!(
                report.max_rel_err < 1e-4,
                "{name} point {point}: {report:?}"
            );
        }
    }
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(values in prop::collection::vec(-30.0f64..30.0, 1..12)) {
        let n = values.len();
        let s = Tensor::from_f64(&[n], &values).unwrap().softmax(0).unwrap();
        let total: f64 = s.data().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-9);
        prop_assert!(s.data().iter().all(|&p| p > 0.0 && p <= 1.0));
    }

    #[test]
    fn matmul_associates_within_rounding(seed in 0u64..1000) {
        let mut r = rng(seed);
        let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
        let b = Tensor::<f64>::randn(&[4, 2], 1.0, &mut r);
        let c = Tensor::<f64>::randn(&[2, 5], 1.0, &mut r);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-10);
    }
}
