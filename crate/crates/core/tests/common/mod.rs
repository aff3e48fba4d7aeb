#![allow(dead_code)]

pub mod oracle;

use std::collections::BTreeMap;

use rand::Rng;
use xavt_core::bca::Expert;
use xavt_core::model::{Model, ModelConfig, Variant};
use xavt_core::param::randomize;
use xavt_core::rng;
use xavt_core::session::Session;
use xavt_core::tensor::{Real, Tensor};
use xavt_core::tokenizer::{SpectrogramBatch, VideoBatch};

/// Tiny geometry: 4x4 frames, patch 2, 4 input frames, D=8.
pub fn tiny(variant: Variant) -> ModelConfig {
    let mut c = ModelConfig::toy(variant);
    c.height = 4;
    c.width = 4;
    c.patch = 2;
    c.dim = 8;
    c.heads = 2;
    c.d_adapter = 4;
    c.d_bca = 4;
    c.time_mlp_hidden = 6;
    c.mlp_ratio = 2;
    c.spec_time = 26;
    c.mel_bins = 16;
    c.audio_patch = 6;
    c.audio_stride = 5;
    c.num_classes = 3;
    c
}

/// [`tiny`] at 8x8 pixels with patch 4 and two classes, the smallest clip
/// the generator draws.
pub fn small(variant: Variant) -> ModelConfig {
    let mut c = tiny(variant);
    c.height = 8;
    c.width = 8;
    c.patch = 4;
    c.num_classes = 2;
    c
}

/// Model with every trainable redrawn from `U(-bound, bound)`.
pub fn randomized(config: ModelConfig, seed: u64, bound: f64) -> Model<f32> {
    let mut m = Model::build(config, None).unwrap();
    let ids = m.trainable_parameters();
    randomize(&mut m.store, &ids, seed, bound);
    m
}

pub fn random_inputs(c: &ModelConfig, batch: usize, seed: u64) -> (Tensor<f32>, Option<Tensor<f32>>) {
    let mut r = rng::stream(seed, "test/inputs");
    let vshape = vec![batch, c.frames, c.height, c.width, c.channels];
    let n: usize = vshape.iter().product();
    let video = Tensor::new(vshape, (0..n).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
    let audio = c.variant.uses_audio().then(|| {
        let ashape = vec![batch, c.spec_time, c.mel_bins];
        let n: usize = ashape.iter().product();
        Tensor::new(ashape, (0..n).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
    });
    (video, audio)
}

pub struct Run<F> {
    pub logits: Tensor<F>,
    pub features: BTreeMap<Expert, Tensor<F>>,
}

/// Forward pass at precision `F` without drop path.
pub fn run<F: Real>(model: &Model<F>, video: &Tensor<f32>, audio: Option<&Tensor<f32>>) -> Run<F> {
    let c = &model.config;
    let v = VideoBatch::new(video.cast::<F>(), c.frame_rate).unwrap();
    let a = audio.map(|a| SpectrogramBatch::new(a.cast::<F>(), c.spec_duration_s()).unwrap());
    let mut s = Session::new(&model.store);
    let out = model.forward(&mut s, &v, a.as_ref()).unwrap();
    Run {
        logits: s.value(out.logits).clone(),
        features: out
            .features
            .iter()
            .map(|(&e, t)| (e, s.value(t.tokens).clone()))
            .collect(),
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn to_f64<F: Real>(t: &Tensor<F>) -> Vec<f64> {
    t.data().iter().map(|x| x.to_f64_lossy()).collect()
}

/// Oracle over every clip of a batch: flattened features per expert and
/// logits `[batch * classes]`.
pub fn oracle_batch(
    model: &Model<f32>,
    video: &Tensor<f32>,
    audio: Option<&Tensor<f32>>,
    plain: bool,
) -> (BTreeMap<Expert, Vec<f64>>, Vec<f64>) {
    let b = video.shape()[0];
    let vn = video.len() / b;
    let vd: Vec<f64> = video.data().iter().map(|&x| x as f64).collect();
    let ad: Option<Vec<f64>> = audio.map(|a| a.data().iter().map(|&x| x as f64).collect());
    let mut feats: BTreeMap<Expert, Vec<f64>> = BTreeMap::new();
    let mut logits = Vec::new();
    for i in 0..b {
        let a = ad.as_ref().map(|a| {
            let an = a.len() / b;
            &a[i * an..(i + 1) * an]
        });
        let out = oracle::forward(
            model,
            &oracle::Input {
                video: &vd[i * vn..(i + 1) * vn],
                audio: a,
            },
            plain,
        );
        for (e, m) in out.features {
            feats.entry(e).or_default().extend(m.into_iter().flatten());
        }
        logits.extend(out.logits);
    }
    (feats, logits)
}

/// Checks exported T2S/S2T weights of a CAST model over `n` random inputs:
/// zeros exactly outside the window, non-negative, rows summing to one.
/// Returns the number of rows inspected.
pub fn window_structure(n: usize, seed: u64) -> Result<usize, String> {
    let model = randomized(ModelConfig::toy(Variant::Cast), seed, 0.5);
    let c = &model.config;
    let patches = c.grid().0 * c.grid().1;
    // spatial clip index -> (frame, Some(patch) | None for the class token)
    let spatial = |i: usize| {
        let r = i % (1 + patches);
        (i / (1 + patches), (r > 0).then(|| r - 1))
    };
    let temporal = |i: usize| (i / patches, i % patches);
    let mut rows = 0;
    for k in 0..n {
        let (video, _) = random_inputs(c, 1, seed.wrapping_mul(1_000_003).wrapping_add(k as u64));
        let v = VideoBatch::new(video, c.frame_rate).unwrap();
        let mut s = Session::instrumented(&model.store);
        model.forward(&mut s, &v, None).unwrap();
        for rec in s.records() {
            let [_, heads, lq, lk]: [usize; 4] = rec.weights.shape().try_into().unwrap();
            let allow = |q: usize, key: usize| match rec.direction.as_str() {
                "T2S" => {
                    let (qf, qp) = spatial(q);
                    let (kf, kp) = temporal(key);
                    match qp {
                        Some(p) => p == kp,
                        None => qf == kf,
                    }
                }
                "S2T" => spatial(key).0 == temporal(q).0,
                d => panic!("unexpected direction {d}"),
            };
            for h in 0..heads {
                for q in 0..lq {
                    let row = &rec.weights.data()[(h * lq + q) * lk..(h * lq + q + 1) * lk];
                    let sum: f32 = row.iter().sum();
                    if (sum - 1.0).abs() > 1e-5 {
                        return Err(format!("{} row {q} sums to {sum}", rec.direction));
                    }
                    for (key, &w) in row.iter().enumerate() {
                        if w < 0.0 || (!allow(q, key) && w != 0.0) {
                            return Err(format!("{} weight [{q}, {key}] = {w}", rec.direction));
                        }
                    }
                    rows += 1;
                }
            }
        }
    }
    Ok(rows)
}

fn grads_by_name(model: &Model<f32>, video: &Tensor<f32>, audio: &Tensor<f32>, labels: &[usize]) -> (f64, BTreeMap<String, Tensor<f32>>) {
    let v = VideoBatch::new(video.clone(), model.config.frame_rate).unwrap();
    let a = SpectrogramBatch::new(audio.clone(), model.config.spec_duration_s()).unwrap();
    let mut s = Session::new(&model.store);
    let out = model.forward(&mut s, &v, Some(&a)).unwrap();
    let loss = s.tape.cross_entropy(out.logits, labels).unwrap();
    let l = s.scalar(loss).unwrap() as f64;
    let g = s.backward(loss).unwrap();
    let named = g
        .iter()
        .map(|(id, t)| (model.store.get(*id).name.clone(), t.clone()))
        .collect();
    (l, named)
}

/// Bottleneck projection name of a direction in an unshared model, mapped to
/// the per-expert name of a shared one.
fn shared_name(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        [block, "bca", dir, w @ ("w_down" | "w_up")] if dir.len() == 3 => {
            format!("{block}.bca.{}.{w}", &dir[2..])
        }
        _ => name.to_string(),
    }
}

/// Largest gap between the gradient of each shared CA2ST projection and the
/// sum of the gradients of its per-direction copies in an equal unshared
/// model, plus the loss difference between the two.
pub fn shared_gradient_gap(seed: u64) -> (f64, f64) {
    let shared = randomized(ModelConfig::toy(Variant::Ca2st), seed, 0.3);
    let mut cfg = shared.config.clone();
    cfg.share_projections = false;
    let mut split = Model::build(cfg, None).unwrap();
    let ids: Vec<_> = split.store.ids().collect();
    for id in ids {
        let src = shared_name(&split.store.get(id).name);
        split.store.get_mut(id).value = shared.store.by_name(&src).unwrap().value.clone();
    }
    let (video, audio) = random_inputs(&shared.config, 2, seed);
    let audio = audio.unwrap();
    let labels = [0, 1];
    let (ls, gs) = grads_by_name(&shared, &video, &audio, &labels);
    let (lu, gu) = grads_by_name(&split, &video, &audio, &labels);
    let mut worst = 0.0f64;
    let mut compared = 0;
    for (name, g) in &gs {
        let parts: Vec<&str> = name.split('.').collect();
        if !matches!(parts.as_slice(), [_, "bca", e, "w_down" | "w_up"] if e.len() == 1) {
            continue;
        }
        let mut sum = vec![0.0f64; g.len()];
        let mut copies = 0;
        for (n2, g2) in &gu {
            if n2 != name && shared_name(n2) == *name {
                copies += 1;
                for (a, b) in sum.iter_mut().zip(g2.data()) {
                    *a += *b as f64;
                }
            }
        }
        assert_eq!(copies, 2, "{name} should have two per-direction copies");
        compared += 1;
        for (a, b) in g.data().iter().zip(&sum) {
            worst = worst.max((*a as f64 - b).abs());
        }
    }
    assert_eq!(compared, 2 * 3 * shared.config.depth);
    (worst, (ls - lu).abs())
}

/// Runs `steps` optimiser steps on synthetic batches; returns the names of
/// frozen parameters that moved and trainable ones that did not.
pub fn frozen_partition_after(variant: Variant, steps: usize, seed: u64) -> (Vec<String>, Vec<String>) {
    use xavt_core::synthdata::{generate, Coupling};
    use xavt_core::train::{batch_gradients, optimizer_step, synth_spec_for, OptimConfig, OptimState};
    let mut model = Model::build(ModelConfig { seed, ..ModelConfig::toy(variant) }, None).unwrap();
    let data = generate(&synth_spec_for(&model.config, Coupling::Xor, 8, seed)).unwrap();
    let before = model.to_tensors();
    let mut state = OptimState::new(&model.store, OptimConfig::new(model.config.depth + 1));
    for step in 0..steps {
        let idx: Vec<usize> = (0..4).map(|j| (step * 4 + j) % data.len()).collect();
        let (_, _, g) = batch_gradients(&model, &data, &idx, None).unwrap();
        optimizer_step(&mut state, &mut model.store, &g, 1e-3).unwrap();
    }
    let after = model.to_tensors();
    let mut moved = Vec::new();
    let mut stuck = Vec::new();
    for (b, a) in before.iter().zip(&after) {
        assert_eq!(b.name, a.name);
        let same = b.value.data().iter().zip(a.value.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        if !b.trainable && !same {
            moved.push(b.name.clone());
        }
        if b.trainable && same {
            stuck.push(b.name.clone());
        }
    }
    (moved, stuck)
}
