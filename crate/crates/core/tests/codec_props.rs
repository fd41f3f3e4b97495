//! Wire-format properties: roundtrip identity, exact bit accounting,
//! deterministic bytes, corruption detection.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qsubgrad::codec::{decode, encode, GradientMessage, IndicatorBitmap};
use qsubgrad::quantize::TernaryGradient;

/// A random quantized gradient with an f32-exact scale plus an independent
/// indicator.
fn message_parts(dim: usize, rng: &mut ChaCha8Rng) -> (TernaryGradient, IndicatorBitmap) {
    let scale_f32: f32 = rng.random_range(0.0f32..10.0);
    let mut codes: Vec<i8> = (0..dim)
        .map(|_| [0i8, 1, -1][rng.random_range(0..3)])
        .collect();
    let mut scale = f64::from(scale_f32);
    if scale == 0.0 || codes.iter().all(|&c| c == 0) {
        codes.iter_mut().for_each(|c| *c = 0);
        scale = 0.0;
    }
    let q = TernaryGradient::new(scale, codes).unwrap();
    let density = rng.random::<f64>();
    let indicator = IndicatorBitmap::from_fn(dim, |_| rng.random::<f64>() < density);
    (q, indicator)
}

/// Meaningful serialized bits: everything after the 4-byte dimension word,
/// minus byte-alignment padding of the bitmap and the code block.
fn serialized_payload_bits(bytes: &[u8], dim: usize, k: usize) -> u64 {
    let total = (bytes.len() as u64 - 4) * 8;
    let bitmap_pad = (8 - dim % 8) % 8;
    let code_pad = (8 - (2 * k) % 8) % 8;
    total - bitmap_pad as u64 - code_pad as u64
}

#[test]
fn fuzz_roundtrip_and_bit_accounting() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0DEC);
    for trial in 0..2_000 {
        let dim = rng.random_range(1..=512);
        let (q, indicator) = message_parts(dim, &mut rng);
        let msg = encode(&q, &indicator).unwrap();
        let bytes = msg.to_bytes();
        let k = indicator.count_ones();

        assert_eq!(msg.payload_bits(), 32 + dim as u64 + 2 * k as u64);
        assert_eq!(
            serialized_payload_bits(&bytes, dim, k),
            msg.payload_bits(),
            "trial {trial}: dim {dim} k {k}"
        );

        let parsed = GradientMessage::from_bytes(&bytes).unwrap();
        assert_eq!(parsed, msg);
        let back = decode(&parsed).unwrap();
        for i in 0..dim {
            let expect = if indicator.get(i) { q.value(i) } else { 0.0 };
            assert_eq!(back.value(i), expect, "trial {trial} coordinate {i}");
        }
    }
}

#[test]
fn flipping_any_code_entry_to_11_fails_decode() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let dim = 60;
    let (q, indicator) = message_parts(dim, &mut rng);
    assert!(
        indicator.count_ones() > 0,
        "fixture should select something"
    );
    let bytes = encode(&q, &indicator).unwrap().to_bytes();
    let code_start = 8 + dim.div_ceil(8);
    for entry in 0..indicator.count_ones() {
        let mut corrupted = bytes.clone();
        corrupted[code_start + entry / 4] |= 0b11 << (2 * (entry % 4));
        assert!(
            GradientMessage::from_bytes(&corrupted).is_err(),
            "entry {entry} should corrupt the message"
        );
    }
}

proptest! {
    #[test]
    fn roundtrip_restricted_to_indicator(seed in any::<u64>(), dim in 1usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, indicator) = message_parts(dim, &mut rng);
        let msg = encode(&q, &indicator).unwrap();
        let back = decode(&msg).unwrap();
        for i in 0..dim {
            if indicator.get(i) {
                prop_assert_eq!(back.codes()[i], q.codes()[i]);
                if q.codes()[i] != 0 {
                    prop_assert_eq!(back.scale(), q.scale());
                }
            } else {
                prop_assert_eq!(back.codes()[i], 0);
            }
        }
    }

    #[test]
    fn byte_output_is_deterministic(seed in any::<u64>(), dim in 1usize..200) {
        let mut rng1 = ChaCha8Rng::seed_from_u64(seed);
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed);
        let (q1, i1) = message_parts(dim, &mut rng1);
        let (q2, i2) = message_parts(dim, &mut rng2);
        prop_assert_eq!(
            encode(&q1, &i1).unwrap().to_bytes(),
            encode(&q2, &i2).unwrap().to_bytes()
        );
    }

    #[test]
    fn scale_narrowing_is_the_only_loss(scale in 1e-6f64..1000.0, dim in 1usize..40) {
        // With a general f64 scale the roundtrip reproduces codes exactly and
        // the scale to f32 precision.
        let codes: Vec<i8> = (0..dim).map(|i| if i % 3 == 0 { 1 } else { -1 }).collect();
        let q = TernaryGradient::new(scale, codes).unwrap();
        let ind = IndicatorBitmap::ones(dim);
        let back = decode(&encode(&q, &ind).unwrap()).unwrap();
        prop_assert_eq!(back.codes(), q.codes());
        prop_assert_eq!(back.scale(), f64::from(scale as f32));
    }
}
