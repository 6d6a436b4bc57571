use protonet_core::tensor::{finite_diff_check, Graph, Result, Scalar, ScalarFn, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0f32..1.0))
}

fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let [n, ci, h, w] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let [co, _, kh, kw] = <[usize; 4]>::try_from(k.shape()).unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Vec::new();
    for b in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                let xx = (ox * stride + kx) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                let xi = ((b * ci + c) * h + y as usize) * w + xx as usize;
                                let ki = ((o * ci + c) * kh + ky) * kw + kx;
                                acc += x.data()[xi] as f64 * k.data()[ki] as f64;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn assert_close(actual: &[f32], expected: &[f64], tol: f64) {
    assert_eq!(actual.len(), expected.len());
    for (i, (&a, &e)) in actual.iter().zip(expected).enumerate() {
        assert!((a as f64 - e).abs() <= tol, "element {i}: {a} vs {e}");
    }
}

#[test]
fn conv_identity_kernel_returns_input() {
    let mut g = Graph::<f32>::new();
    let x = Tensor::from_fn([1, 1, 4, 4], |i| i as f32 * 0.5);
    let xv = g.constant(x.clone());
    let k = g.constant(Tensor::full([1, 1, 1, 1], 1.0));
    let y = g.conv2d(xv, k, None, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_zero_kernel_annihilates() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::<f32>::new();
    let xv = g.constant(random(&mut rng, &[2, 3, 7, 5]));
    let k = g.constant(Tensor::zeros([4, 3, 3, 3]));
    let y = g.conv2d(xv, k, None, 1, 1).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_matches_loop_oracle_on_fixed_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[1, 1, 4, 4]);
    let k = random(&mut rng, &[1, 1, 3, 3]);
    let mut g = Graph::<f32>::new();
    let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
    let y = g.conv2d(xv, kv, None, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    assert_close(g.value(y).data(), &conv_oracle(&x, &k, 1, 0), 1e-6);
}

#[test]
fn conv_matches_loop_oracle_on_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let n = rng.random_range(1..3);
        let ci = rng.random_range(1..4);
        let co = rng.random_range(1..4);
        let kh = rng.random_range(1..4);
        let kw = rng.random_range(1..4);
        let pad = rng.random_range(0..2);
        let stride = rng.random_range(1..3);
        let h = rng.random_range(kh.max(2)..9);
        let w = rng.random_range(kw.max(2)..9);
        let x = random(&mut rng, &[n, ci, h, w]);
        let k = random(&mut rng, &[co, ci, kh, kw]);
        let mut g = Graph::<f32>::new();
        let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
        let y = g.conv2d(xv, kv, None, stride, pad).unwrap();
        assert_close(g.value(y).data(), &conv_oracle(&x, &k, stride, pad), 1e-5);
    }
}

#[test]
fn conv_rejects_channel_mismatch_naming_dimension() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros([1, 2, 4, 4]));
    let k = g.constant(Tensor::zeros([1, 3, 3, 3]));
    let err = g.conv2d(x, k, None, 1, 0).unwrap_err().to_string();
    assert!(err.contains("channels"), "{err}");
    let big = g.constant(Tensor::zeros([1, 2, 5, 5]));
    let err = g.conv2d(x, big, None, 1, 0).unwrap_err().to_string();
    assert!(err.contains("height"), "{err}");
}

#[test]
fn relu_forward_and_dead_region() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::new([3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::full([5], -0.3));
    let y = g.relu(x).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn relu_matches_elementwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[64]);
    let mut g = Graph::<f32>::new();
    let xv = g.constant(x.clone());
    let y = g.relu(xv).unwrap();
    for (&a, &b) in g.value(y).data().iter().zip(x.data()) {
        assert_eq!(a, b.max(0.0));
    }
}

#[test]
fn max_pool_definition_and_tie_break() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.max_pool2d(x, 2).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);

    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::full([1, 1, 4, 4], 7.0));
    let y = g.max_pool2d(x, 2).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 7.0));
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    #[rustfmt::skip]
    let expected = [
        1.0, 0.0, 1.0, 0.0,
        0.0, 0.0, 0.0, 0.0,
        1.0, 0.0, 1.0, 0.0,
        0.0, 0.0, 0.0, 0.0,
    ];
    assert_eq!(g.grad(x).unwrap().data(), &expected);
}

#[test]
fn max_pool_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[1, 1, 8, 8]);
    let mut g = Graph::<f32>::new();
    let xv = g.constant(x.clone());
    let y = g.max_pool2d(xv, 2).unwrap();
    let mut expected = Vec::new();
    for oy in 0..4 {
        for ox in 0..4 {
            let mut m = f32::NEG_INFINITY;
            for dy in 0..2 {
                for dx in 0..2 {
                    m = m.max(x.data()[(2 * oy + dy) * 8 + 2 * ox + dx]);
                }
            }
            expected.push(m as f64);
        }
    }
    assert_close(g.value(y).data(), &expected, 0.0);
}

#[test]
fn max_pool_rejects_indivisible_extent() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros([1, 1, 5, 4]));
    assert!(g.max_pool2d(x, 2).is_err());
}

#[test]
fn linear_identity_constant_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, &[3, 4]);

    let mut g = Graph::<f32>::new();
    let xv = g.constant(x.clone());
    let eye = g.constant(Tensor::from_fn([4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 }));
    let zero_b = g.constant(Tensor::zeros([4]));
    let y = g.linear(xv, eye, Some(zero_b)).unwrap();
    assert_eq!(g.value(y), &x);

    let w0 = g.constant(Tensor::zeros([2, 4]));
    let b = g.constant(Tensor::new([2], vec![0.5, -1.5]).unwrap());
    let y = g.linear(xv, w0, Some(b)).unwrap();
    for r in 0..3 {
        assert_eq!(g.value(y).row(r), &[0.5, -1.5]);
    }

    let w = random(&mut rng, &[2, 4]);
    let wv = g.constant(w.clone());
    let y = g.linear(xv, wv, None).unwrap();
    let mut expected = Vec::new();
    for i in 0..3 {
        for o in 0..2 {
            let mut acc = 0.0f64;
            for j in 0..4 {
                acc += x.data()[i * 4 + j] as f64 * w.data()[o * 4 + j] as f64;
            }
            expected.push(acc);
        }
    }
    assert_close(g.value(y).data(), &expected, 1e-6);
}

#[test]
fn linear_rejects_inner_mismatch() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros([3, 4]));
    let w = g.constant(Tensor::zeros([2, 5]));
    assert!(g.linear(x, w, None).is_err());
}

#[test]
fn backward_linear_functional_and_constant() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::from_fn([2, 3], |i| i as f32));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::from_fn([4], |i| i as f32));
    let c = g.constant(Tensor::scalar(3.0));
    g.backward(c).unwrap();
    let grad = g.grad(x).cloned().unwrap_or_else(|| Tensor::zeros([4]));
    assert!(grad.data().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::zeros([3]));
    assert!(g.backward(x).is_err());
}

struct Square;
impl ScalarFn for Square {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let sq = g.mul(x, x)?;
        g.sum(sq)
    }
}

struct Sum;
impl ScalarFn for Sum {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.sum(x)
    }
}

#[test]
fn finite_diff_exact_cases() {
    let x = Tensor::scalar(3.0f32);
    assert!(finite_diff_check(&Square, &x, 1e-4).unwrap() < 1e-6);
    let x = Tensor::from_fn([5], |i| i as f32 - 2.0);
    assert!(finite_diff_check(&Sum, &x, 1e-4).unwrap() < 1e-9);
    assert!(finite_diff_check(&Sum, &x, 0.0).is_err());
}

struct Overflow;
impl ScalarFn for Overflow {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        // scaling 1e30 by 1e300 overflows even in f64
        let n = g.value(x).len();
        let row = g.reshape(x, &[1, n])?;
        let big = g.scale(row, 1e300)?;
        g.sum(big)
    }
}

#[test]
fn finite_diff_rejects_non_finite_objective() {
    let x = Tensor::from_fn([2], |_| 1e30f32);
    assert!(finite_diff_check(&Overflow, &x, 1e-4).is_err());
}

/// Builds `sum(w2 · relu(conv(x, k)) ... )` over every differentiable op so a
/// single check walks each backward rule.
struct Chain {
    which: usize,
    fixed: Vec<Tensor>,
    labels: Vec<usize>,
}

impl ScalarFn for Chain {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let mut vars: Vec<Var> = self.fixed.iter().map(|t| g.constant(t.cast())).collect();
        vars[self.which] = x;
        let (input, kernel, cbias, weight, lbias) = (vars[0], vars[1], vars[2], vars[3], vars[4]);
        let c = g.conv2d(input, kernel, Some(cbias), 1, 1)?;
        let r = g.relu(c)?;
        let p = g.max_pool2d(r, 2)?;
        let f = g.flatten(p)?;
        let e = g.linear(f, weight, Some(lbias))?;
        let protos = g.group_mean(e, &self.labels, 2)?;
        let d = g.sq_dist(e, protos)?;
        let nd = g.neg(d)?;
        let lp = g.log_softmax(nd)?;
        g.nll(lp, &self.labels)
    }
}

#[test]
fn analytic_gradients_match_finite_differences_across_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let fixed = vec![
            random(&mut rng, &[4, 1, 6, 6]),
            random(&mut rng, &[2, 1, 3, 3]),
            random(&mut rng, &[2]),
            random(&mut rng, &[3, 18]),
            random(&mut rng, &[3]),
        ];
        let which = trial % fixed.len();
        let x = fixed[which].clone();
        let f = Chain { which, fixed, labels: vec![0, 1, 0, 1] };
        worst = worst.max(finite_diff_check(&f, &x, 1e-4).unwrap());
    }
    assert!(worst < 1e-3, "max relative error {worst}");
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::<f32>::new();
        let x = g.constant(random(&mut rng, &[3, 2, 8, 8]));
        let k = g.param(random(&mut rng, &[4, 2, 3, 3]));
        let c = g.conv2d(x, k, None, 1, 1).unwrap();
        let r = g.relu(c).unwrap();
        let s = g.sum(r).unwrap();
        g.backward(s).unwrap();
        g.grad(k).unwrap().clone()
    };
    let (a, b) = (run(), run());
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn sqrt_and_select_backward() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::new([3], vec![4.0, 0.0, 9.0]).unwrap());
    let r = g.sqrt(x).unwrap();
    let s = g.select(r, 2).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.value(s).data(), &[3.0]);
    let grad = g.grad(x).unwrap().data().to_vec();
    assert_eq!(grad[0], 0.0);
    assert_eq!(grad[1], 0.0);
    assert!((grad[2] - 1.0 / 6.0).abs() < 1e-7);
}
