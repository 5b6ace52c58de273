use finlora::numerics::{bf16, Rng, Tensor};
use finlora::quant::{
    dequantize, nf4_codebook, pack, packed_bytes, packed_bytes_for, quantize, unpack, CodebookId,
    QuantConfig,
};
use proptest::prelude::*;

fn configs() -> impl Strategy<Value = QuantConfig> {
    (
        prop_oneof![
            Just((8u8, CodebookId::IntAbsmax)),
            Just((4, CodebookId::IntAbsmax)),
            Just((4, CodebookId::Nf4))
        ],
        1usize..80,
    )
        .prop_map(|((bits, book), block)| QuantConfig::new(bits, block, book).unwrap())
}

proptest! {
    #[test]
    fn dequantize_is_a_fixed_point(cfg in configs(), seed: u64, n in 1usize..300, scale in 1e-3f64..1e3) {
        let t = Rng::new(seed).normal_tensor(&[n], scale);
        let d = dequantize(&quantize(&t, cfg).unwrap()).unwrap();
        let again = dequantize(&quantize(&d, cfg).unwrap()).unwrap();
        prop_assert_eq!(d.data(), again.data());
    }

    #[test]
    fn absmax_error_bound(bits in prop_oneof![Just(8u8), Just(4)], block in 1usize..80, seed: u64, n in 1usize..300) {
        let cfg = QuantConfig::new(bits, block, CodebookId::IntAbsmax).unwrap();
        let t = Rng::new(seed).normal_tensor(&[n], 1.0);
        let q = quantize(&t, cfg).unwrap();
        let d = dequantize(&q).unwrap();
        let levels = ((1i32 << (bits - 1)) - 1) as f64;
        for (b, chunk) in t.data().chunks(block).enumerate() {
            let s = q.scales()[b] as f64;
            for (j, &x) in chunk.iter().enumerate() {
                let y = d.data()[b * block + j];
                // half a step plus one BF16 ulp from snapping the scale
                let bound = s / (2.0 * levels) + bf16::ulp(x.abs());
                prop_assert!((x - y).abs() <= bound, "x {} y {} bound {}", x, y, bound);
            }
        }
    }

    #[test]
    fn block_extreme_is_reconstructed(cfg in configs(), seed: u64, n in 1usize..200, scale in 1e-3f64..1e3) {
        let t = Rng::new(seed).normal_tensor(&[n], scale);
        let d = dequantize(&quantize(&t, cfg).unwrap()).unwrap();
        for (x, y) in t.data().chunks(cfg.block_size).zip(d.data().chunks(cfg.block_size)) {
            let i = (0..x.len()).max_by(|&a, &b| x[a].abs().total_cmp(&x[b].abs())).unwrap();
            prop_assert!((x[i] - y[i]).abs() <= bf16::ulp(y[i]), "{} vs {}", x[i], y[i]);
        }
    }

    #[test]
    fn packing_roundtrips(bits in prop_oneof![Just(8u8), Just(4)], codes in prop::collection::vec(0u8..16, 0..100)) {
        let packed = pack(&codes, bits);
        prop_assert_eq!(packed.len(), (codes.len() * bits as usize).div_ceil(8));
        prop_assert_eq!(unpack(&packed, bits, codes.len()).unwrap(), codes);
    }

    #[test]
    fn stored_size_matches_prediction(cfg in configs(), n in 1usize..500) {
        let t = Rng::new(n as u64).normal_tensor(&[n], 1.0);
        prop_assert_eq!(packed_bytes(&quantize(&t, cfg).unwrap()), packed_bytes_for(n, cfg));
    }
}

#[test]
fn zero_block_roundtrips_to_zero() {
    let t = Tensor::zeros(&[130]);
    for cfg in [QuantConfig::int8(), QuantConfig::int4(), QuantConfig::nf4()] {
        let d = dequantize(&quantize(&t, cfg).unwrap()).unwrap();
        assert!(d.data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn nf4_codebook_shape() {
    let book = nf4_codebook();
    let l = book.levels();
    assert_eq!(l.len(), 16);
    assert_eq!(l[0], -1.0);
    assert_eq!(l[15], 1.0);
    assert!(l.contains(&0.0));
    assert!(l.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn rejects_bad_input() {
    assert!(QuantConfig::new(3, 64, CodebookId::IntAbsmax).is_err());
    assert!(QuantConfig::new(8, 64, CodebookId::Nf4).is_err());
    assert!(QuantConfig::new(8, 0, CodebookId::IntAbsmax).is_err());
    let t = Tensor::vector(&[1.0, f64::NAN]);
    assert!(quantize(&t, QuantConfig::int8()).is_err());
}
