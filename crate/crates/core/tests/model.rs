mod common;

use finlora::lora::Mode;
use finlora::model::{
    build_model, decode_checkpoint, decode_tokens, encode_checkpoint, encode_text, ArchConfig,
    LoraConfig,
};
use finlora::numerics::Rng;
use finlora::quant::QuantConfig;
use finlora::Error;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn checkpoint_roundtrips(seed: u64, quant in prop_oneof![Just(None), Just(Some(QuantConfig::int8())), Just(Some(QuantConfig::nf4()))]) {
        let mut rng = Rng::new(seed);
        let arch = common::random_arch(&mut rng);
        let model = common::random_model(&mut rng, &arch, quant);
        // adapters are stored as BF16, so the first decode rounds; after that
        // the encoding is a fixed point
        let bytes = encode_checkpoint(&model);
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(back.base_hash(), model.base_hash());
        prop_assert_eq!(&encode_checkpoint(&back), &bytes);
        let again = decode_checkpoint(&bytes).unwrap();
        let ex = common::random_example(&mut rng, &arch);
        prop_assert_eq!(again.forward(&ex.tokens).unwrap(), back.forward(&ex.tokens).unwrap());
    }

    #[test]
    fn analytic_gradient_matches_finite_differences(seed: u64) {
        let mut rng = Rng::new(seed);
        let arch = common::random_arch(&mut rng);
        let model = common::random_model(&mut rng, &arch, None);
        let ex = common::random_example(&mut rng, &arch);
        let (_, analytic) = model.loss_and_grads(&ex, Mode::Train, &mut Rng::derived(seed, 0)).unwrap();
        let fd = common::finite_difference(&model, &ex, Mode::Train, seed, 1e-5);
        prop_assert!(common::rel_err(&analytic, &fd) < 1e-6);
    }

    #[test]
    fn forward_is_causal(seed: u64) {
        let mut rng = Rng::new(seed);
        let arch = common::random_arch(&mut rng);
        let model = common::random_model(&mut rng, &arch, None);
        let mut tokens = common::random_example(&mut rng, &arch).tokens;
        let full = model.forward(&tokens).unwrap();
        let last = tokens.len() - 1;
        tokens[last] = (tokens[last] + 1) % arch.vocab_size;
        let changed = model.forward(&tokens).unwrap();
        prop_assert_eq!(&full.data()[..last * arch.vocab_size], &changed.data()[..last * arch.vocab_size]);
    }
}

#[test]
fn fresh_model_starts_at_its_base() {
    let arch = ArchConfig::toy();
    let mut model =
        build_model(&arch, Some(QuantConfig::int8()), LoraConfig::default(), 5).unwrap();
    let tokens = encode_text("Q: abc\nA: ");
    let before = model.forward(&tokens).unwrap();
    model.zero_adapters();
    assert_eq!(model.forward(&tokens).unwrap(), before);
    assert_eq!(
        model.trainable_count() as u64,
        finlora::planner::count_lora_params(&arch, 8)
    );
}

#[test]
fn same_seed_same_model() {
    let a = build_model(&ArchConfig::toy(), None, LoraConfig::default(), 9).unwrap();
    let b = build_model(&ArchConfig::toy(), None, LoraConfig::default(), 9).unwrap();
    let c = build_model(&ArchConfig::toy(), None, LoraConfig::default(), 10).unwrap();
    assert_eq!(encode_checkpoint(&a), encode_checkpoint(&b));
    assert_ne!(a.base_hash(), c.base_hash());
}

#[test]
fn text_roundtrip_and_vocab_errors() {
    assert_eq!(decode_tokens(&encode_text("héllo\n")), "héllo\n");
    let model = build_model(&ArchConfig::toy(), None, LoraConfig::default(), 0).unwrap();
    assert!(matches!(
        model.forward(&[1, 999]),
        Err(Error::Vocabulary { token: 999, .. })
    ));
    assert!(model.forward(&vec![1; 65]).is_err());
}

#[test]
fn presets_are_planner_only() {
    assert!(build_model(&ArchConfig::llama3_8b(), None, LoraConfig::default(), 0).is_err());
    assert!(matches!(ArchConfig::preset("gpt-5"), Err(Error::Config(_))));
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let model = build_model(
        &ArchConfig::toy(),
        Some(QuantConfig::int4()),
        LoraConfig::default(),
        0,
    )
    .unwrap();
    let bytes = encode_checkpoint(&model);
    assert!(matches!(
        decode_checkpoint(&bytes[..bytes.len() / 2]),
        Err(Error::Format { .. })
    ));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode_checkpoint(&extra).is_err());
}
