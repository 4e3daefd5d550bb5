use num_rational::Ratio;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t32(shape: &[usize], v: &[f64]) -> Tensor<f32> {
    Tensor::from_f64(shape.to_vec(), v).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Central-difference check of `f` w.r.t. every entry of every input.
/// Evaluates `f` on constant leaves only, so it never touches backward.
fn check<F>(inputs: &[Tensor<f64>], f: F, tol: f64)
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> crate::Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&vars).unwrap();
    let grads = tape.backward(&out).unwrap();

    let eval = |ins: &[Tensor<f64>]| {
        let tape = Tape::new();
        let vars: Vec<_> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        f(&vars).unwrap().value().item()
    };
    let h = 1e-4;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(&vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < tol, "input {k}[{i}]: analytic {a} numeric {numeric} rel {rel}");
        }
    }
}

/// Projects onto fixed random weights so every output entry matters.
fn project<'t>(x: &Var<'t, f64>, seed: u64) -> crate::Result<Var<'t, f64>> {
    let r = x.tape().constant(random(x.shape(), seed));
    x.mul(&r)?.sum_all()
}

#[test]
fn add_small_vectors() {
    let tape = Tape::new();
    let a = tape.constant(t32(&[2], &[1.0, 2.0]));
    let b = tape.constant(t32(&[2], &[3.0, 4.0]));
    assert_eq!(a.add(&b).unwrap().value().data(), &[4.0, 6.0]);
}

#[test]
fn charbonnier_at_zero_is_epsilon() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::zeros(vec![1]));
    let y = x.square().unwrap().add_scalar(1e-6).unwrap().sqrt().unwrap();
    assert!((y.value().item() - 1e-3).abs() < 1e-15);
}

#[test]
fn mul_by_one_is_bitwise_identity() {
    let tape = Tape::new();
    let x = tape.constant(t32(&[3], &[0.1, -7.25, 1e-30]));
    let one = tape.constant(Tensor::scalar(1.0));
    assert_eq!(x.mul(&one).unwrap().value(), x.value());
}

#[test]
fn elementwise_errors() {
    let tape = Tape::new();
    let a = tape.constant(t32(&[2], &[1.0, 2.0]));
    let b = tape.constant(t32(&[3], &[1.0, 2.0, 3.0]));
    assert!(matches!(a.add(&b), Err(Error::ShapeMismatch { .. })));
    let z = tape.constant(t32(&[2], &[1.0, 0.0]));
    assert!(matches!(a.div(&z), Err(Error::DivisionByZero(_))));
    let neg = tape.constant(t32(&[1], &[-1.0]));
    assert!(matches!(neg.sqrt(), Err(Error::NegativeSqrt(_))));
}

#[test]
fn elementwise_gradients() {
    let a = random(&[2, 3], 1);
    let b = random(&[2, 3], 2).map(|v| v.abs() + 0.5);
    check(&[a.clone(), b.clone()], |v| v[0].add(&v[1])?.mul(&v[0])?.div(&v[1])?.sum_all(), 1e-6);
    check(&[a.clone(), b.clone()], |v| v[0].sub(&v[1])?.square()?.add_scalar(0.1)?.sqrt()?.sum_all(), 1e-6);
    check(&[a.clone()], |v| project(&v[0].sigmoid()?.gelu()?.scale(1.7)?, 3), 1e-6);
    // broadcast along leading axes and per-channel
    let c = random(&[1, 3], 4).map(|v| v + 2.0);
    check(&[a.clone(), c], |v| project(&v[0].mul(&v[1])?.div(&v[1].square()?)?, 5), 1e-6);
}

#[test]
fn matmul_hand_values() {
    let tape = Tape::new();
    let a = tape.constant(t32(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(t32(&[2, 1], &[1.0, 1.0]));
    assert_eq!(a.matmul(&b).unwrap().value().data(), &[3.0, 7.0]);
    let eye = tape.constant(t32(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    assert_eq!(eye.matmul(&a).unwrap().value(), a.value());
    let bad = tape.constant(t32(&[3, 1], &[1.0, 1.0, 1.0]));
    assert!(a.matmul(&bad).is_err());
}

#[test]
fn matmul_gradient() {
    check(&[random(&[3, 4], 6), random(&[4, 2], 7)], |v| project(&v[0].matmul(&v[1])?, 8), 1e-4);
    // batched with a shared right operand
    check(&[random(&[2, 3, 4], 9), random(&[4, 2], 10)], |v| project(&v[0].matmul(&v[1])?, 11), 1e-4);
}

#[test]
fn conv_identity_kernel_is_bit_exact() {
    let tape = Tape::new();
    let x = tape.constant(t32(&[1, 1, 2, 3], &[0.1, 0.2, 0.3, -4.0, 5.5, 1e-7]));
    let w = tape.constant(t32(&[1, 1, 1, 1], &[1.0]));
    let b = tape.constant(t32(&[1], &[0.0]));
    let y = x.conv2d(&w, Some(&b), Conv2dOpts::default()).unwrap();
    assert_eq!(y.value(), x.value());
}

#[test]
fn conv_ones_kernel_on_constant_image() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::<f32>::full(vec![1, 1, 5, 5], 0.5));
    let w = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
    let y = x.conv2d(&w, None, Conv2dOpts::same(3)).unwrap();
    assert_eq!(y.shape(), &[1, 1, 5, 5]);
    assert_eq!(y.value().data()[2 * 5 + 2], 4.5);
    assert_eq!(y.value().data()[0], 2.0); // corner sees 4 taps
}

#[test]
fn conv_rejects_bad_geometry() {
    let tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(vec![1, 4, 6, 6]));
    let w = tape.constant(Tensor::zeros(vec![2, 3, 3, 3]));
    assert!(x.conv2d(&w, None, Conv2dOpts { groups: 2, ..Default::default() }).is_err());
    let w = tape.constant(Tensor::zeros(vec![4, 4, 3, 3]));
    let strided = Conv2dOpts { stride: 2, padding: 1, groups: 1 };
    assert!(x.conv2d(&w, None, strided).is_err(), "(6 + 2 - 3) / 2 is not integral");
}

#[test]
fn conv_gradients() {
    let x = random(&[1, 4, 6, 6], 12);
    let w = random(&[8, 4, 3, 3], 13);
    let b = random(&[8], 14);
    check(&[x, w, b], |v| project(&v[0].conv2d(&v[1], Some(&v[2]), Conv2dOpts::same(3))?, 15), 1e-4);
    // depth-wise, strided with a 4x4 kernel
    let x = random(&[2, 3, 6, 6], 16);
    let w = random(&[3, 1, 4, 4], 17);
    let opts = Conv2dOpts { stride: 2, padding: 1, groups: 3 };
    check(&[x, w], |v| project(&v[0].conv2d(&v[1], None, opts)?, 18), 1e-4);
}

#[test]
fn resize_constant_and_affine() {
    let tape = Tape::<f64>::new();
    let c = tape.constant(Tensor::full(vec![1, 2, 8, 6], 0.37));
    for (h, w) in [(4, 3), (16, 12), (5, 7)] {
        let r = c.resize_bilinear(h, w).unwrap();
        assert!(r.value().data().iter().all(|v| (v - 0.37).abs() < 1e-12));
    }
    let (h, w) = (8, 12);
    let ramp: Vec<f64> = (0..h * w).map(|i| 0.01 * (i / w) as f64 - 0.03 * (i % w) as f64 + 0.2).collect();
    let x = tape.constant(Tensor::new(vec![1, 1, h, w], ramp).unwrap());
    let down = x.rescale(Ratio::new(1, 2)).unwrap();
    assert_eq!(down.shape(), &[1, 1, 4, 6]);
    let back = down.rescale(Ratio::from_integer(2)).unwrap();
    assert!(back.value().max_abs_diff(x.value()) < 1e-6);
    assert!(x.rescale(Ratio::new(1, 3)).is_err());
    assert!(x.resize_bilinear(0, 4).is_err());
}

#[test]
fn resize_gradient() {
    check(&[random(&[1, 2, 4, 6], 19)], |v| project(&v[0].resize_bilinear(8, 3)?, 20), 1e-6);
}

#[test]
fn softmax_values() {
    let tape = Tape::new();
    let z = tape.constant(t32(&[2], &[0.0, 0.0]));
    assert_eq!(z.softmax(0).unwrap().value().data(), &[0.5, 0.5]);
    let big = tape.constant(t32(&[2], &[1000.0, 1000.0]));
    assert_eq!(big.softmax(0).unwrap().value().data(), &[0.5, 0.5]);
    assert!(big.softmax(1).is_err());
}

#[test]
fn softmax_gradient() {
    check(&[random(&[4], 21)], |v| project(&v[0].softmax(0)?, 22), 1e-4);
    check(&[random(&[2, 3, 4], 23)], |v| project(&v[0].softmax(1)?, 24), 1e-4);
}

#[test]
fn backward_basics() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_f64(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let g = tape.backward(&x.sum_all().unwrap()).unwrap();
    assert_eq!(g.get(&x).unwrap().data(), &[1.0; 4]);

    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap());
    let g = tape.backward(&x.mul(&x).unwrap().sum_all().unwrap()).unwrap();
    assert_eq!(g.get(&x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_errors_and_unreachable_leaves() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::zeros(vec![3]));
    let unused = tape.param(Tensor::zeros(vec![3]));
    assert!(matches!(tape.backward(&x), Err(Error::NonScalarRoot(_))));
    let c = tape.constant(Tensor::scalar(1.0));
    assert!(matches!(tape.backward(&c), Err(Error::OffTape)));
    let g = tape.backward(&x.sum_all().unwrap()).unwrap();
    assert!(g.get(&unused).is_none());
}

#[test]
fn accumulation_is_exact_for_shared_inputs() {
    let tape = Tape::<f32>::new();
    let x = tape.param(Tensor::from_f64(vec![3], &[0.3, -1.0, 2.0]).unwrap());
    let y = x.add(&x).unwrap();
    let w = tape.constant(Tensor::from_f64(vec![3], &[0.1, 0.7, -3.3]).unwrap());
    let g = tape.backward(&y.mul(&w).unwrap().sum_all().unwrap()).unwrap();
    let expected: Vec<f32> = w.value().data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(g.get(&x).unwrap().data(), expected.as_slice());
}

#[test]
fn shape_ops_gradients() {
    let a = random(&[2, 3, 4], 25);
    let b = random(&[2, 1, 4], 26);
    check(&[a.clone(), b], |v| project(&Var::concat(&[v[0].clone(), v[1].clone()], 1)?, 27), 1e-6);
    check(&[a.clone()], |v| project(&v[0].permute(&[2, 0, 1])?.reshape(&[4, 6])?, 28), 1e-6);
    check(&[a.clone()], |v| project(&v[0].slice(1, 1, 2)?.transpose_last2()?, 29), 1e-6);
    check(&[random(&[1, 2, 3, 3], 30)], |v| project(&v[0].pad2d([1, 0, 2, 1])?, 31), 1e-6);
    check(&[a.clone()], |v| project(&v[0].mean_axes(&[0, 2])?, 32), 1e-6);
    check(&[random(&[2, 3, 4, 5], 33)], |v| project(&v[0].global_avg_pool()?, 34), 1e-6);
}

#[test]
fn relu_and_clamp_gradients_away_from_kinks() {
    let x = random(&[10], 35).map(|v| if v.abs() < 0.05 { 0.3 } else { v });
    check(&[x.clone()], |v| project(&v[0].relu()?, 36), 1e-6);
    check(&[x], |v| project(&v[0].clamp(-0.5, 0.5)?, 37), 1e-6);
}

#[test]
fn snap_lands_on_grid_and_passes_gradient() {
    let tape = Tape::<f32>::new();
    let x = tape.param(Tensor::from_f64(vec![3], &[0.123456789, -0.5, 3.0]).unwrap());
    let s = x.snap().unwrap();
    let q = 2f32.powi(f32::GRID_BITS);
    assert!(s.value().data().iter().all(|v| (v * q).fract() == 0.0));
    let g = tape.backward(&s.sum_all().unwrap()).unwrap();
    assert_eq!(g.get(&x).unwrap().data(), &[1.0; 3]);
}

#[test]
fn non_finite_results_are_errors() {
    let tape = Tape::<f32>::new();
    let x = tape.constant(t32(&[1], &[1e30]));
    assert!(matches!(x.mul(&x), Err(Error::NonFinite(_))));
}

use crate::scalar::Scalar;

proptest! {
    #[test]
    fn softmax_rows_are_simplex_points(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![3, 4], vals).unwrap());
        let y = x.softmax(1).unwrap();
        for row in y.value().data().chunks(4) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_reproduces_affine_images(a in -1.0f64..1.0, by in -0.2f64..0.2, bx in -0.2f64..0.2,
                                        h in 1usize..5, w in 1usize..5, up in 1usize..4) {
        let (h, w) = (2 * h, 2 * w);
        let data = (0..h * w).map(|i| a + by * (i / w) as f64 + bx * (i % w) as f64).collect();
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 1, h, w], data).unwrap());
        let y = x.resize_bilinear(h * up, w * up).unwrap();
        for (i, v) in y.value().data().iter().enumerate() {
            let (oy, ox) = ((i / (w * up)) as f64, (i % (w * up)) as f64);
            let sy = (oy + 0.5) / up as f64 - 0.5;
            let sx = (ox + 0.5) / up as f64 - 0.5;
            prop_assert!((v - (a + by * sy + bx * sx)).abs() < 1e-6);
        }
    }

    #[test]
    fn smooth_primitives_match_finite_differences(
        shape in proptest::collection::vec(1usize..=6, 1..=4),
        seed in 0u64..1000,
    ) {
        let a = random(&shape, seed);
        let b = random(&shape, seed + 1).map(|v| v + 2.5);
        let last = shape.len() - 1;
        check(&[a, b], |x| {
            let y = x[0].mul(&x[1])?.add(&x[0].sigmoid()?)?.sub(&x[0].gelu()?)?.div(&x[1])?;
            let z = y.add(&x[1].square()?.add_scalar(0.1)?.sqrt()?)?.softmax(last)?;
            project(&z.add(&y.mean_axes(&[last])?)?, seed)
        }, 1e-4);
    }
}
