use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use revmark::numerics::IntTensor;
use revmark::rdh::{capacity, expandable_count, pee_embed, pee_extract_restore, rhombus_predict};
use revmark::Error;

#[derive(Debug, Clone, Copy)]
enum Texture {
    Smooth,
    Noisy,
    Saturated,
}

fn image(tex: Texture, c: usize, side: usize, seed: u64) -> IntTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fx, fy): (f64, f64) = (rng.random_range(0.05..0.3), rng.random_range(0.05..0.3));
    IntTensor::from_fn(&[c, side, side], |k| {
        let (ch, i, j) = ((k / (side * side)) as f64, (k / side % side) as f64, (k % side) as f64);
        let base = 128.0 + 90.0 * (fx * i + ch).sin() * (fy * j).cos();
        let v: f64 = match tex {
            Texture::Smooth => base + rng.random_range(-2.0..2.0),
            Texture::Noisy => rng.random_range(0.0..256.0),
            // bands pushed into both rails: well over 30% of pixels at 0 or 255
            Texture::Saturated => 3.0 * (base - 128.0) + 128.0 + rng.random_range(-3.0..3.0),
        };
        v.clamp(0.0, 255.0) as i64
    })
}

fn bits(n: usize, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_bool(0.5)).collect()
}

fn texture() -> impl Strategy<Value = Texture> {
    prop::sample::select(vec![Texture::Smooth, Texture::Noisy, Texture::Saturated])
}

#[test]
fn predictor_matches_float_mean() {
    let img = image(Texture::Noisy, 2, 12, 3);
    for c in 0..2 {
        for i in 1..11 {
            for j in 1..11 {
                let at = |a: usize, b: usize| img.data()[(c * 12 + a) * 12 + b] as f64;
                let mean = (at(i - 1, j) + at(i + 1, j) + at(i, j - 1) + at(i, j + 1)) / 4.0;
                assert_eq!(rhombus_predict(&img, c, i, j).unwrap(), mean.floor() as i64);
            }
        }
    }
}

#[test]
fn saturated_texture_is_adversarial() {
    let img = image(Texture::Saturated, 1, 64, 1);
    let rails = img.data().iter().filter(|&&v| v == 0 || v == 255).count();
    assert!(rails * 10 >= img.len() * 3, "{rails} saturated of {}", img.len());
}

#[test]
fn constant_image_expands_half_the_interior_per_pass() {
    let img = IntTensor::full(&[1, 64, 64], 100);
    let count = expandable_count(&img, 0).unwrap();
    // header rows are excluded from the targets; the rest expands fully
    let interior = 62 * 62;
    assert!(count as f64 > 0.9 * interior as f64 && count <= interior, "{count}");
}

#[test]
fn oversized_payload_is_refused() {
    let img = image(Texture::Smooth, 1, 16, 5);
    let err = pee_embed(&img, &bits(1000, 1)).unwrap_err();
    assert!(matches!(err, Error::CapacityExceeded { .. }), "{err:?}");
}

#[test]
fn out_of_range_host_is_refused() {
    let mut img = image(Texture::Smooth, 1, 16, 5);
    img.data_mut()[40] = 256;
    assert!(matches!(pee_embed(&img, &bits(8, 1)), Err(Error::BadParams(_))));
}

#[test]
fn every_single_pixel_change_is_detected() {
    for tex in [Texture::Smooth, Texture::Saturated] {
        let img = image(tex, 1, 24, 11);
        let payload = bits(60, 2);
        let stego = pee_embed(&img, &payload).unwrap().image;
        for idx in 0..stego.len() {
            for delta in [-1i64, 1] {
                let v = stego.data()[idx] + delta;
                if !(0..=255).contains(&v) {
                    continue;
                }
                let mut t = stego.clone();
                t.data_mut()[idx] = v;
                assert!(
                    pee_extract_restore(&t).is_err(),
                    "{tex:?}: change at {idx} by {delta} undetected"
                );
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn roundtrip_is_bit_exact(tex in texture(), c in 1usize..=3, side in prop::sample::select(vec![16usize, 24, 32]),
                              frac in 0.0f64..1.0, seed in any::<u64>()) {
        let img = image(tex, c, side, seed);
        let cap = [0u8, 2, 8, 32, 255].iter().map(|&t| capacity(&img, t).unwrap()).max().unwrap();
        prop_assume!(cap > 0);
        let payload = bits((cap as f64 * frac) as usize, seed ^ 1);
        let e = pee_embed(&img, &payload).unwrap();
        prop_assert!(e.image.data().iter().all(|v| (0..=255).contains(v)));
        let (host, back) = pee_extract_restore(&e.image).unwrap();
        prop_assert_eq!(host, img);
        prop_assert_eq!(back, payload);
    }

    #[test]
    fn capacity_is_a_guarantee(tex in texture(), t in 0u8..=40, seed in any::<u64>()) {
        let img = image(tex, 1, 24, seed);
        let cap = capacity(&img, t).unwrap();
        prop_assume!(cap > 0);
        let e = pee_embed(&img, &bits(cap, seed)).unwrap();
        prop_assert!(e.threshold <= t);
    }

    #[test]
    fn expandable_count_is_monotone(tex in texture(), t in 0u8..255, seed in any::<u64>()) {
        let img = image(tex, 2, 16, seed);
        prop_assert!(expandable_count(&img, t + 1).unwrap() >= expandable_count(&img, t).unwrap());
    }
}
