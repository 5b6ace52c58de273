use finlora::lora::Binding;
use finlora::lora::{
    decode_adapters, encode_adapters, header_len, init_adapter, lora_forward, merge, AdaptedLinear,
    FrozenWeight, LoraAdapter, Mode,
};
use finlora::numerics::{Graph, Rng, Tensor};
use finlora::Error;
use proptest::prelude::*;

fn random_adapter(rng: &mut Rng, name: &str, n_in: usize, n_out: usize, r: usize) -> LoraAdapter {
    let a = rng.normal_tensor(&[r, n_in], 1.0).round_bf16();
    let b = rng.normal_tensor(&[n_out, r], 1.0).round_bf16();
    LoraAdapter::from_factors(name, a, b, 1.0 + rng.below(32) as f64, 0.1).unwrap()
}

proptest! {
    #[test]
    fn unmerged_equals_merged_in_eval(seed: u64, n_in in 1usize..12, n_out in 1usize..12, rows in 1usize..5) {
        let mut rng = Rng::new(seed);
        let r = 1 + rng.below(n_in.min(n_out));
        let w0 = rng.normal_tensor(&[n_out, n_in], 1.0).round_bf16();
        let adapter = random_adapter(&mut rng, "x", n_in, n_out, r);
        let merged = merge(&w0, &adapter).unwrap();
        let mut layer = AdaptedLinear::new(FrozenWeight::dense(w0).unwrap());
        layer.attach(adapter).unwrap();
        let x = rng.normal_tensor(&[rows, n_in], 1.0);
        let y = lora_forward(&layer, &x, Mode::Eval, &mut rng).unwrap();
        let expect = x.matmul(&merged.transpose().unwrap()).unwrap();
        for (u, v) in y.data().iter().zip(expect.data()) {
            prop_assert!((u - v).abs() <= 1e-10 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn fresh_adapter_is_a_no_op(seed: u64, n_in in 1usize..12, n_out in 1usize..12) {
        let mut rng = Rng::new(seed);
        let r = 1 + rng.below(n_in.min(n_out));
        let w0 = rng.normal_tensor(&[n_out, n_in], 1.0).round_bf16();
        let mut layer = AdaptedLinear::new(FrozenWeight::dense(w0.clone()).unwrap());
        layer.attach(init_adapter("x", n_in, n_out, r, 16.0, 0.3, &mut rng).unwrap()).unwrap();
        let x = rng.normal_tensor(&[n_in], 1.0);
        for mode in [Mode::Eval, Mode::Train] {
            let y = lora_forward(&layer, &x, mode, &mut rng).unwrap();
            let base = w0.matmul(&x.clone().reshape(&[n_in, 1]).unwrap()).unwrap();
            prop_assert_eq!(y.data(), base.data());
        }
    }

    #[test]
    fn encoding_roundtrips(seed: u64, count in 0usize..4) {
        let mut rng = Rng::new(seed);
        let adapters: Vec<LoraAdapter> = (0..count)
            .map(|i| {
                let (n_in, n_out) = (1 + rng.below(10), 1 + rng.below(10));
                let r = 1 + rng.below(n_in.min(n_out));
                random_adapter(&mut rng, &format!("layer{i}"), n_in, n_out, r)
            })
            .collect();
        let bytes = encode_adapters(&adapters);
        let payload: usize = adapters.iter().map(|a| 2 * a.param_count()).sum();
        prop_assert_eq!(bytes.len(), header_len(&adapters) + payload);
        prop_assert_eq!(decode_adapters(&bytes).unwrap(), adapters);
    }

    #[test]
    fn truncated_files_are_format_errors(seed: u64, cut in 0usize..200) {
        let mut rng = Rng::new(seed);
        let bytes = encode_adapters(&[random_adapter(&mut rng, "q", 6, 5, 3)]);
        let cut = cut % bytes.len();
        let is_format_error = matches!(decode_adapters(&bytes[..cut]), Err(Error::Format { .. }));
        prop_assert!(is_format_error);
    }
}

fn layer_with(w0: &Tensor, adapters: &[LoraAdapter]) -> AdaptedLinear {
    let mut layer = AdaptedLinear::new(FrozenWeight::dense(w0.clone()).unwrap());
    for a in adapters {
        layer.attach(a.clone()).unwrap();
    }
    layer
}

#[test]
fn doubling_alpha_doubles_the_update() {
    for seed in 0..100 {
        let mut rng = Rng::new(seed);
        let w0 = rng.normal_tensor(&[5, 7], 1.0).round_bf16();
        let a = random_adapter(&mut rng, "x", 7, 5, 3);
        let mut a2 = a.clone();
        a2.alpha *= 2.0;
        let x = rng.normal_tensor(&[2, 7], 1.0);
        let base = lora_forward(&layer_with(&w0, &[]), &x, Mode::Eval, &mut rng).unwrap();
        let y1 = lora_forward(&layer_with(&w0, &[a]), &x, Mode::Eval, &mut rng)
            .unwrap()
            .sub(&base)
            .unwrap();
        let y2 = lora_forward(&layer_with(&w0, &[a2]), &x, Mode::Eval, &mut rng)
            .unwrap()
            .sub(&base)
            .unwrap();
        for (u, v) in y1.data().iter().zip(y2.data()) {
            assert!(
                (2.0 * u - v).abs() <= 1e-12 * (1.0 + v.abs()),
                "seed {seed}: {u} {v}"
            );
        }
    }
}

#[test]
fn adapters_add_in_eval_mode() {
    for seed in 0..100 {
        let mut rng = Rng::new(seed);
        let w0 = rng.normal_tensor(&[6, 4], 1.0).round_bf16();
        let a = random_adapter(&mut rng, "a", 4, 6, 2);
        let b = random_adapter(&mut rng, "b", 4, 6, 3);
        let x = rng.normal_tensor(&[3, 4], 1.0);
        let both = lora_forward(
            &layer_with(&w0, &[a.clone(), b.clone()]),
            &x,
            Mode::Eval,
            &mut rng,
        )
        .unwrap();
        let only_a = lora_forward(&layer_with(&w0, &[a]), &x, Mode::Eval, &mut rng).unwrap();
        let expect = only_a
            .add(&x.matmul(&b.delta().unwrap().transpose().unwrap()).unwrap())
            .unwrap();
        for (u, v) in both.data().iter().zip(expect.data()) {
            assert!((u - v).abs() <= 1e-10 * (1.0 + v.abs()));
        }
    }
}

#[test]
fn base_weight_gets_no_gradient() {
    let mut rng = Rng::new(1);
    let layer = layer_with(
        &rng.normal_tensor(&[3, 4], 1.0),
        &[random_adapter(&mut rng, "x", 4, 3, 2)],
    );
    let mut g = Graph::new();
    let x = g.constant(rng.normal_tensor(&[2, 4], 1.0));
    let y = layer
        .forward_graph(&mut g, x, "p", Binding::Trainable, Mode::Train, &mut rng)
        .unwrap();
    let loss = g.sum(y);
    let grads = g.backward(loss, &["p.x.A", "p.x.B"]).unwrap();
    assert_eq!(grads.keys().collect::<Vec<_>>(), ["p.x.A", "p.x.B"]);
}

#[test]
fn eval_dropout_is_identity_train_dropout_is_seeded() {
    let mut rng = Rng::new(3);
    let w0 = rng.normal_tensor(&[4, 6], 1.0).round_bf16();
    let mut layer = AdaptedLinear::new(FrozenWeight::dense(w0).unwrap());
    layer
        .attach(random_adapter(&mut rng, "x", 6, 4, 2))
        .unwrap();
    let x = rng.normal_tensor(&[3, 6], 1.0);
    let e1 = lora_forward(&layer, &x, Mode::Eval, &mut Rng::new(1)).unwrap();
    let e2 = lora_forward(&layer, &x, Mode::Eval, &mut Rng::new(2)).unwrap();
    assert_eq!(e1, e2);
    let t1 = lora_forward(&layer, &x, Mode::Train, &mut Rng::new(1)).unwrap();
    let t2 = lora_forward(&layer, &x, Mode::Train, &mut Rng::new(1)).unwrap();
    assert_eq!(t1, t2);
    assert_ne!(t1, e1);
}

#[test]
fn rank_and_shape_errors() {
    let mut rng = Rng::new(0);
    assert!(matches!(
        init_adapter("x", 4, 4, 0, 8.0, 0.1, &mut rng),
        Err(Error::Rank { .. })
    ));
    assert!(matches!(
        init_adapter("x", 4, 3, 4, 8.0, 0.1, &mut rng),
        Err(Error::Rank { .. })
    ));
    assert!(init_adapter("x", 4, 4, 2, 8.0, 1.0, &mut rng).is_err());
    let mut layer = AdaptedLinear::new(FrozenWeight::dense(Tensor::zeros(&[4, 4])).unwrap());
    assert!(layer
        .attach(init_adapter("x", 4, 5, 2, 8.0, 0.1, &mut rng).unwrap())
        .is_err());
    layer
        .attach(init_adapter("x", 4, 4, 2, 8.0, 0.1, &mut rng).unwrap())
        .unwrap();
    assert!(layer
        .attach(init_adapter("x", 4, 4, 2, 8.0, 0.1, &mut rng).unwrap())
        .is_err());
    let mut bad = encode_adapters(&[]);
    bad[0] = b'X';
    assert!(matches!(
        decode_adapters(&bad),
        Err(Error::Format { offset: 0, .. })
    ));
}
