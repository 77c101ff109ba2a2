use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use revmark::numerics::ops::{self, Elementwise};
use revmark::numerics::{grad_check, Graph, LinearMap, RealTensor, RoundMode, Var};
use revmark::Error;

/// Textbook cross-correlation, written independently of the library kernel:
/// explicit zero padding and the same channel/row/column summation order.
fn direct_conv(x: &RealTensor, w: &RealTensor, b: &RealTensor, stride: usize, pad: usize) -> RealTensor {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (f, _, k, _) = w.dims4().unwrap();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let at = |ni: usize, ci: usize, y: isize, xx: isize| -> f64 {
        if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
            0.0
        } else {
            x.data()[((ni * c + ci) * h + y as usize) * wd + xx as usize]
        }
    };
    let mut out = vec![0.0; n * f * ho * wo];
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                let xx = (ox * stride + kx) as isize - pad as isize;
                                let v = at(ni, ci, y, xx);
                                if v != 0.0 {
                                    acc += w.data()[((fi * c + ci) * k + ky) * k + kx] * v;
                                }
                            }
                        }
                    }
                    out[((ni * f + fi) * ho + oy) * wo + ox] = acc + b.data()[fi];
                }
            }
        }
    }
    RealTensor::new(vec![n, f, ho, wo], out).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> RealTensor {
    RealTensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn conv_matches_direct_oracle_reference_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[2, 3, 8, 8], &mut rng);
    let w = random(&[4, 3, 3, 3], &mut rng);
    let b = random(&[4], &mut rng);
    let got = ops::conv2d(&x, &w, Some(&b), 1, 1).unwrap();
    let want = direct_conv(&x, &w, &b, 1, 1);
    assert_eq!(got.shape(), want.shape());
    for (a, e) in got.data().iter().zip(want.data()) {
        assert!((a - e).abs() <= 1e-12 * (1.0 + e.abs()), "{a} vs {e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_direct_oracle(
        n in 1usize..=2, c in 1usize..=4, f in 1usize..=3,
        h in 3usize..=16, w in 3usize..=16,
        k in prop::sample::select(vec![1usize, 3, 4]),
        stride in 1usize..=2, pad in 0usize..=1, seed in any::<u64>(),
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[n, c, h, w], &mut rng);
        let wt = random(&[f, c, k, k], &mut rng);
        let b = random(&[f], &mut rng);
        let got = ops::conv2d(&x, &wt, Some(&b), stride, pad).unwrap();
        let want = direct_conv(&x, &wt, &b, stride, pad);
        prop_assert_eq!(got.shape(), want.shape());
        for (a, e) in got.data().iter().zip(want.data()) {
            prop_assert!((a - e).abs() <= 1e-12 * (1.0 + e.abs()));
        }
    }

    #[test]
    fn transposed_conv_is_adjoint(
        c in 1usize..=3, f in 1usize..=3, h in 2usize..=9,
        k in prop::sample::select(vec![1usize, 3, 4]),
        stride in 1usize..=2, pad in 0usize..=1, seed in any::<u64>(),
    ) {
        prop_assume!(h + 2 * pad >= k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[1, c, h, h], &mut rng);
        let w = random(&[f, c, k, k], &mut rng);
        let y = ops::conv2d(&a, &w, None, stride, pad).unwrap();
        let b = random(y.shape(), &mut rng);
        let lhs = y.dot(&b).unwrap();
        let back = ops::conv_transpose2d_sized(&b, &w, None, stride, pad, h, h).unwrap();
        let rhs = a.dot(&back).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn deterministic_rounding_idempotent_on_integers(v in prop::collection::vec(-1_000_000i64..1_000_000, 1..64)) {
        let t = RealTensor::new(vec![v.len()], v.iter().map(|&x| x as f64).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = ops::round_ste(&t, RoundMode::Deterministic, &mut rng).unwrap();
        prop_assert_eq!(r, t);
    }
}

#[test]
fn transposed_stride_two_doubles_when_kernel_is_twice_stride() {
    let x = RealTensor::full(&[1, 2, 5, 7], 1.0);
    let w = RealTensor::full(&[2, 3, 4, 4], 1.0);
    let y = ops::conv_transpose2d(&x, &w, None, 2, 1).unwrap();
    assert_eq!(y.shape(), &[1, 3, 10, 14]);
}

#[test]
fn conv_channel_mismatch_is_shape_error() {
    let x = RealTensor::zeros(&[1, 2, 5, 5]);
    let w = RealTensor::zeros(&[1, 3, 3, 3]);
    assert!(matches!(ops::conv2d(&x, &w, None, 1, 0), Err(Error::ShapeMismatch(_))));
    let tiny = RealTensor::zeros(&[1, 3, 2, 2]);
    assert!(matches!(
        ops::conv2d(&tiny, &w, None, 1, 0),
        Err(Error::ShapeMismatch(_))
    ));
}

#[test]
fn elementwise_broadcast_rules() {
    let a = RealTensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    let s = RealTensor::scalar(2.0);
    let y = ops::elementwise(Elementwise::Mul, &[&a, &s]).unwrap();
    assert_eq!(y.data(), &[2.0, 4.0, 6.0]);
    let bad = RealTensor::zeros(&[2]);
    assert!(matches!(
        ops::elementwise(Elementwise::Add, &[&a, &bad]),
        Err(Error::ShapeMismatch(_))
    ));
    let z = RealTensor::new(vec![3], vec![1.0, 0.0, 1.0]).unwrap();
    assert!(matches!(
        ops::elementwise(Elementwise::Div, &[&a, &z]),
        Err(Error::DivisionByZero)
    ));
}

#[test]
fn stochastic_rounding_noise_is_centered_and_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let x = RealTensor::from_fn(&[100_000], |i| (i as f64) * 0.37 - 17_000.0);
    let r = ops::round_ste(&x, RoundMode::Stochastic, &mut rng).unwrap();
    let mut sum = 0.0;
    for (a, b) in r.data().iter().zip(x.data()) {
        let u = a - b.round();
        assert!((-0.5..0.5).contains(&u), "{u}");
        sum += u;
    }
    assert!((sum / 100_000.0).abs() < 0.01);
}

#[test]
fn round_ste_rejects_non_finite() {
    let x = RealTensor::new(vec![2], vec![1.0, f64::NAN]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        ops::round_ste(&x, RoundMode::Deterministic, &mut rng),
        Err(Error::NonFiniteInput(_))
    ));
}

#[test]
fn grad_check_quadratic() {
    let x = RealTensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
    let err = grad_check(
        |g, p| {
            let sq = g.mul(p[0], p[0])?;
            let s = g.affine(sq, 3.0, 1.0);
            Ok(g.sum(s))
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn conv_weight_gradient_is_sum_of_patches() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[1, 2, 5, 5], &mut rng);
    let w = random(&[1, 2, 3, 3], &mut rng);
    let mut g = Graph::new(RoundMode::Deterministic, 0);
    let xv = g.constant(x.clone());
    let wv = g.param(w);
    let bv = g.param(RealTensor::zeros(&[1]));
    let y = g.conv2d(xv, wv, bv, 1, 0).unwrap();
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    let gw = grads.get(wv).unwrap();
    for ci in 0..2 {
        for ky in 0..3 {
            for kx in 0..3 {
                let mut patch_sum = 0.0;
                for oy in 0..3 {
                    for ox in 0..3 {
                        patch_sum += x.data()[(ci * 5 + oy + ky) * 5 + ox + kx];
                    }
                }
                let a = gw.data()[(ci * 3 + ky) * 3 + kx];
                assert!((a - patch_sum).abs() < 1e-12);
            }
        }
    }
    assert_eq!(grads.get(bv).unwrap().data(), &[9.0]);
}

#[test]
fn grad_check_two_layer_conv_net() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = vec![
        random(&[1, 2, 6, 6], &mut rng),
        random(&[3, 2, 3, 3], &mut rng),
        random(&[3], &mut rng),
        random(&[2, 3, 4, 4], &mut rng),
        random(&[2], &mut rng),
    ];
    let err = grad_check(
        |g, p| {
            let h = g.conv2d(p[0], p[1], p[2], 1, 1)?;
            let h = g.sigmoid(h);
            let o = g.conv2d(h, p[3], p[4], 2, 1)?;
            let sq = g.mul(o, o)?;
            Ok(g.mean(sq))
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

/// One graph exercising every differentiable tape op.
fn all_ops(g: &mut Graph, p: &[Var]) -> revmark::Result<Var> {
    let x = p[0];
    let c = g.conv2d(x, p[1], p[2], 1, 1)?;
    let c = g.leaky_relu(c, 0.01);
    let mean = g.channel_mean(c)?;
    let max = g.channel_max(c)?;
    let cat = g.concat_channels(mean, max)?;
    let gate_logits = g.conv2d(cat, p[3], p[4], 1, 3)?;
    let gate = g.sigmoid(gate_logits);
    let a = g.gate_channels(c, gate)?;
    let t = g.conv_transpose2d(a, p[5], p[6], 2, 1)?;
    let r = g.round_ste(t)?;
    let small = g.affine(r, 0.1, 0.0);
    let e = g.exp(small);
    let s = g.affine(e, 0.5, 1.0);
    let d = g.div(r, s)?;
    let m = g.mul(d, p[7])?;
    let sub = g.sub(m, r)?;
    let rl = g.relu(sub);
    let add = g.add(rl, d)?;
    let lin: Arc<dyn LinearMap> = Arc::new(Scale2);
    let l = g.linear(add, lin)?;
    let sq = g.mul(l, l)?;
    Ok(g.mean(sq))
}

struct Scale2;

impl LinearMap for Scale2 {
    fn apply(&self, x: &RealTensor) -> revmark::Result<RealTensor> {
        Ok(x.map(|v| 2.0 * v))
    }
    fn adjoint(&self, g: &RealTensor) -> revmark::Result<RealTensor> {
        Ok(g.map(|v| 2.0 * v))
    }
}

#[test]
fn grad_check_every_op_with_ste_surrogate() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = vec![
        random(&[1, 2, 4, 4], &mut rng),
        random(&[3, 2, 3, 3], &mut rng),
        random(&[3], &mut rng),
        random(&[1, 2, 7, 7], &mut rng),
        random(&[1], &mut rng),
        random(&[3, 2, 4, 4], &mut rng),
        random(&[2], &mut rng),
        RealTensor::scalar(0.8),
    ];
    let err = grad_check(all_ops, &params, 1e-5).unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn repeated_runs_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = random(&[1, 2, 4, 4], &mut rng);
        let mut g = Graph::new(RoundMode::Stochastic, 42);
        let xv = g.param(x);
        let r = g.round_ste(xv).unwrap();
        let sq = g.mul(r, r).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        (g.value(loss).clone(), grads.get(xv).unwrap().clone())
    };
    assert_eq!(run(), run());
}
