use std::collections::BTreeMap;

use finlora::numerics::{bf16, grad, Graph, NodeId, Rng, Tensor};
use finlora::Result;
use proptest::prelude::*;

proptest! {
    #[test]
    fn bf16_round_is_idempotent_and_close(x in -1e30f64..1e30) {
        let r = bf16::round(x);
        prop_assert_eq!(bf16::round(r), r);
        prop_assert!((r - x).abs() <= bf16::ulp(x) / 2.0 + f64::EPSILON * x.abs());
    }

    #[test]
    fn bf16_round_is_monotone(a in -1e6f64..1e6, b in -1e6f64..1e6) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(bf16::round(lo) <= bf16::round(hi));
    }

    #[test]
    fn bf16_bits_roundtrip(x in -1e30f64..1e30) {
        prop_assert_eq!(bf16::from_bits(bf16::to_bits(x)), bf16::round(x));
    }

    #[test]
    fn derived_streams_are_reproducible(seed: u64, stream: u64) {
        let a: Vec<u64> = { let mut r = Rng::derived(seed, stream); (0..8).map(|_| r.next_u64()).collect() };
        let b: Vec<u64> = { let mut r = Rng::derived(seed, stream); (0..8).map(|_| r.next_u64()).collect() };
        prop_assert_eq!(a, b);
    }
}

#[test]
fn bf16_ties_to_even() {
    // 1 + 2^-8 sits halfway between 1 and 1 + 2^-7
    assert_eq!(bf16::round(1.0 + 2f64.powi(-8)), 1.0);
    assert_eq!(
        bf16::round(1.0 + 3.0 * 2f64.powi(-8)),
        1.0 + 2.0 * 2f64.powi(-7)
    );
    assert!(bf16::round(f64::MAX).is_infinite());
    assert!(bf16::round(f64::NAN).is_nan());
}

type Build = fn(&mut Graph, &BTreeMap<String, NodeId>) -> Result<NodeId>;

fn fd_check(params: BTreeMap<String, Tensor>, f: Build) {
    let analytic = grad(&params, f).unwrap();
    let eval = |p: &BTreeMap<String, Tensor>| {
        let mut g = Graph::new();
        let ids = p
            .iter()
            .map(|(k, v)| (k.clone(), g.constant(v.clone())))
            .collect();
        let out = f(&mut g, &ids).unwrap();
        g.value(out).data()[0]
    };
    let h = 1e-5;
    for (name, t) in &params {
        for i in 0..t.numel() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[name].data()[i];
            assert!(
                (a - fd).abs() <= 1e-6 * (1.0 + a.abs()),
                "{name}[{i}]: analytic {a} vs fd {fd}"
            );
        }
    }
}

fn two(seed: u64, sa: [usize; 2], sb: [usize; 2]) -> BTreeMap<String, Tensor> {
    let mut rng = Rng::new(seed);
    BTreeMap::from([
        ("a".to_string(), rng.normal_tensor(&sa, 1.0)),
        ("b".to_string(), rng.normal_tensor(&sb, 1.0)),
    ])
}

#[test]
fn per_op_gradients() {
    for seed in 0..100 {
        fd_check(two(seed, [3, 4], [4, 2]), |g, p| {
            let y = g.matmul(p["a"], p["b"])?;
            let y = g.mul(y, y)?;
            Ok(g.sum(y))
        });
        fd_check(two(seed, [3, 4], [3, 4]), |g, p| {
            let s = g.silu(p["a"]);
            let d = g.sub(s, p["b"])?;
            let m = g.mul(d, p["a"])?;
            let t = g.transpose(m)?;
            let t = g.scale(t, 0.7);
            Ok(g.sum(t))
        });
        fd_check(two(seed, [4, 6], [6, 4]), |g, p| {
            let n = g.rms_norm(p["a"], 1e-6)?;
            let y = g.matmul(n, p["b"])?;
            let s = g.causal_softmax(y)?;
            let w = g.mul(s, s)?;
            Ok(g.sum(w))
        });
        fd_check(two(seed, [3, 4], [3, 2]), |g, p| {
            let l = g.slice_cols(p["a"], 1, 3)?;
            let c = g.concat_cols(&[l, p["b"], p["a"]])?;
            let y = g.add(c, c)?;
            g.cross_entropy(y, &[Some(0), None, Some(7)])
        });
    }
}

#[test]
fn identity_matmul_is_exact() {
    let mut rng = Rng::new(4);
    for (r, c) in [(1, 1), (3, 5), (7, 2)] {
        let a = rng.normal_tensor(&[r, c], 10.0);
        assert_eq!(Tensor::eye(r).matmul(&a).unwrap(), a);
        assert_eq!(a.matmul(&Tensor::eye(c)).unwrap(), a);
    }
}

#[test]
fn seeded_tensors_are_bitwise_identical() {
    let a = Rng::new(77).normal_tensor(&[5, 5], 1.0);
    let b = Rng::new(77).normal_tensor(&[5, 5], 1.0);
    assert_eq!(a.to_le_bytes(), b.to_le_bytes());
    assert_eq!(a.round_bf16().round_bf16(), a.round_bf16());
}

#[test]
fn frozen_parameters_refuse_gradients() {
    let mut g = Graph::new();
    let w = g.frozen("w", Tensor::scalar(2.0));
    let y = g.mul(w, w).unwrap();
    assert!(g.backward(y, &["w"]).is_err());
}

#[test]
fn matmul_shape_mismatch() {
    let a = Tensor::zeros(&[2, 3]);
    assert!(a.matmul(&Tensor::zeros(&[2, 3])).is_err());
}
