use evctx_core::data::format::{decode_features, encode_features};
use evctx_core::nn::ParamStore;
use evctx_core::runtime::pipeline::build_corpora;
use evctx_core::runtime::{Checkpoint, RunConfig, Stage};
use evctx_core::{Error, Tensor};
use proptest::prelude::*;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::desk_scale();
    cfg.apply_text("data.n_movies = 4\ndata.eval_movies = 2\n").unwrap();
    cfg
}

fn checkpoint() -> Checkpoint {
    let mut params = ParamStore::new();
    params.add("w", Tensor::new(vec![2, 3], vec![0.5, -1.0, f32::MIN_POSITIVE, 3.25, 0.0, -0.0]).unwrap());
    params.add("b", Tensor::new(vec![3], vec![1e-30, 7.0, -2.5]).unwrap());
    let cfg = small_config();
    Checkpoint {
        stage: Stage::Txe,
        config_hash: cfg.hash(),
        config: cfg.to_text(),
        params,
    }
}

#[test]
fn every_truncation_of_a_feature_file_is_an_error() {
    let (train, _) = build_corpora(&small_config()).unwrap();
    let bytes = encode_features(&train).unwrap();
    for len in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
        assert!(decode_features(&bytes[..len]).is_err(), "prefix of {len} bytes decoded");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(decode_features(&long).is_err());
}

#[test]
fn every_truncation_of_a_checkpoint_is_an_error() {
    let bytes = checkpoint().encode().unwrap();
    for len in 0..bytes.len() {
        assert!(Checkpoint::decode(&bytes[..len]).is_err(), "prefix of {len} bytes decoded");
    }
}

#[test]
fn checkpoint_stage_is_enforced() {
    let c = checkpoint();
    c.expect_stage(Stage::Txe).unwrap();
    assert!(matches!(c.expect_stage(Stage::Probe), Err(Error::StageMismatch { .. })));
}

#[test]
fn config_text_round_trips() {
    let mut cfg = RunConfig::desk_scale();
    cfg.set("mask.alpha", "0.4").unwrap();
    cfg.set("run.seed", "9").unwrap();
    let back = RunConfig::parse(&cfg.to_text()).unwrap();
    assert_eq!(back.to_text(), cfg.to_text());
    assert_eq!(back.hash(), cfg.hash());
    assert_ne!(RunConfig::desk_scale().hash(), cfg.hash());
}

#[test]
fn config_rejects_unknown_and_malformed_keys() {
    let mut cfg = RunConfig::desk_scale();
    assert!(matches!(cfg.set("mask.nope", "1"), Err(Error::Config(_))));
    assert!(cfg.apply_override("mask.alpha").is_err());
    assert!(cfg.set("mask.steps", "many").is_err());
    assert!(RunConfig::preset("huge").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flipped_checkpoint_bytes_never_decode_silently(pos in 0usize..10_000, bit in 0u8..8) {
        let bytes = checkpoint().encode().unwrap();
        let mut b = bytes.clone();
        let i = pos % b.len();
        b[i] ^= 1 << bit;
        prop_assert!(Checkpoint::decode(&b).is_err());
    }

    #[test]
    fn flipped_feature_bytes_never_panic(pos in 0usize..1_000_000, byte: u8) {
        let (train, _) = build_corpora(&small_config()).unwrap();
        let mut b = encode_features(&train).unwrap();
        let i = pos % b.len();
        b[i] = byte;
        if let Ok(c) = decode_features(&b) {
            prop_assert_eq!(c.n_events(), train.n_events());
        }
    }
}
