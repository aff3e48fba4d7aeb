mod common;

use common::*;
use xavt_core::attention::WindowShape;
use xavt_core::bca::Direction;
use xavt_core::model::{Model, ModelConfig, Variant};

fn check_against_oracle(config: ModelConfig, seed: u64) {
    let model = randomized(config, seed, 0.5);
    let (video, audio) = random_inputs(&model.config, 2, seed);
    let (feats, logits) = oracle_batch(&model, &video, audio.as_ref(), false);
    let r64 = run(&model.cast::<f64>(), &video, audio.as_ref());
    let r32 = run(&model, &video, audio.as_ref());
    for (e, f) in &feats {
        let d64 = max_abs_diff(&to_f64(&r64.features[e]), f);
        let d32 = max_abs_diff(&to_f64(&r32.features[e]), f);
        assert!(d64 < 1e-10, "{} features f64 {d64}", e.name());
        assert!(d32 < 1e-4, "{} features f32 {d32}", e.name());
    }
    let d64 = max_abs_diff(&to_f64(&r64.logits), &logits);
    let d32 = max_abs_diff(&to_f64(&r32.logits), &logits);
    assert!(d64 < 1e-10, "logits f64 {d64}");
    assert!(d32 < 1e-4, "logits f32 {d32}");
    // the perturbation must actually reach the logits through every path
    assert!(logits.iter().any(|v| v.abs() > 1e-3));
}

#[test]
fn cast_matches_scalar_oracle() {
    check_against_oracle(tiny(Variant::Cast), 1);
}

#[test]
fn cava_matches_scalar_oracle() {
    check_against_oracle(tiny(Variant::Cava), 2);
}

#[test]
fn ca2st_matches_scalar_oracle() {
    check_against_oracle(tiny(Variant::Ca2st), 3);
}

#[test]
fn unshared_projections_and_custom_windows_match_oracle() {
    let mut c = tiny(Variant::Ca2st);
    c.share_projections = false;
    c.windows.insert(Direction::parse("T2S").unwrap(), WindowShape::SpaceTime);
    c.windows.insert(Direction::parse("S2T").unwrap(), WindowShape::Time);
    check_against_oracle(c, 4);
}

#[test]
fn disabled_direction_matches_oracle() {
    let mut c = tiny(Variant::Ca2st);
    c.disabled.insert(Direction::parse("A2S").unwrap());
    c.disabled.insert(Direction::parse("S2T").unwrap());
    check_against_oracle(c, 5);
}

#[test]
fn single_expert_variants_match_oracle() {
    for v in [Variant::SpatialOnly, Variant::TemporalOnly, Variant::AudioOnly] {
        check_against_oracle(tiny(v), 6);
    }
}

#[test]
fn zero_init_equals_plain_frozen_transformer() {
    for v in [Variant::Cast, Variant::Cava, Variant::Ca2st] {
        let model = Model::build(tiny(v), None).unwrap();
        let (video, audio) = random_inputs(&model.config, 2, 9);
        let (plain, _) = oracle_batch(&model, &video, audio.as_ref(), true);
        let r = run(&model, &video, audio.as_ref());
        for (e, f) in &plain {
            let d = max_abs_diff(&to_f64(&r.features[e]), f);
            assert!(d <= 1e-5, "{} {}: {d}", v.name(), e.name());
        }
        let r64 = run(&model.cast::<f64>(), &video, audio.as_ref());
        for (e, f) in &plain {
            let d = max_abs_diff(&to_f64(&r64.features[e]), f);
            assert!(d <= 1e-6, "{} {} f64: {d}", v.name(), e.name());
        }
        let bias = model.store.by_name("head.bias").unwrap().value.data().to_vec();
        for row in r.logits.data().chunks(bias.len()) {
            assert_eq!(row, bias.as_slice());
        }
    }
}
