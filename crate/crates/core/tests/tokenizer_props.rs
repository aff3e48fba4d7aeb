mod common;

use common::*;
use proptest::prelude::*;
use xavt_core::model::{Model, Variant};
use xavt_core::session::Session;
use xavt_core::tensor::Tensor;
use xavt_core::tokenizer::{
    audio_patches, tokenize_audio, tokenize_spatial, tokenize_temporal, tube_patches, untube, window_count,
    PatchEmbed, SpectrogramBatch, TokenSequence, VideoBatch,
};

proptest! {
    #[test]
    fn tubes_invert_exactly(
        b in 1usize..3,
        t in 1usize..3,
        gh in 1usize..3,
        gw in 1usize..3,
        p in 1usize..4,
        c in 1usize..4,
        seed in any::<u64>(),
    ) {
        let (video, _) = {
            let mut cfg = tiny(Variant::TemporalOnly);
            cfg.frames = 2 * t;
            cfg.height = gh * p;
            cfg.width = gw * p;
            cfg.channels = c;
            random_inputs(&cfg, b, seed)
        };
        let tubes = tube_patches(&video, p).unwrap();
        let shape: [usize; 5] = video.shape().try_into().unwrap();
        prop_assert_eq!(untube(&tubes, shape, p).unwrap(), video);
    }

    #[test]
    fn audio_patch_count_is_enumeration(extent in 16usize..=300, patch in 1usize..=16, stride in 1usize..=16) {
        let enumerated = (0..).take_while(|k| k * stride + patch <= extent).count();
        prop_assert_eq!(window_count(extent, patch, stride).unwrap(), enumerated);
    }
}

#[test]
fn full_scale_audio_geometry() {
    let spec = Tensor::<f32>::zeros(&[1, 1024, 128]);
    let (p, nt, nf) = audio_patches(&spec, 16, 10).unwrap();
    assert_eq!((nt, nf), (101, 12));
    assert_eq!(p.shape(), &[1, 1212, 256]);
}

fn tokens(
    model: &Model<f32>,
    which: Variant,
    video: &Tensor<f32>,
    audio: Option<&Tensor<f32>>,
) -> Vec<f32> {
    let c = &model.config;
    let mut s = Session::new(&model.store);
    let e = which.experts()[0];
    let embed: PatchEmbed = model.paths[&e].embed;
    let seq: TokenSequence = match which {
        Variant::SpatialOnly => {
            tokenize_spatial(&mut s, &VideoBatch::new(video.clone(), c.frame_rate).unwrap(), c.patch, &embed).unwrap()
        }
        Variant::TemporalOnly => {
            tokenize_temporal(&mut s, &VideoBatch::new(video.clone(), c.frame_rate).unwrap(), c.patch, &embed).unwrap()
        }
        _ => {
            let a = SpectrogramBatch::new(audio.unwrap().clone(), c.spec_duration_s()).unwrap();
            tokenize_audio(&mut s, &a, c.audio_patch, c.audio_stride, &embed).unwrap()
        }
    };
    s.value(seq.tokens).data().to_vec()
}

#[test]
fn batch_permutation_permutes_token_rows() {
    for v in [Variant::SpatialOnly, Variant::TemporalOnly, Variant::AudioOnly] {
        let model = Model::build(tiny(v), None).unwrap();
        let c = model.config.clone();
        let mut cv = c.clone();
        cv.variant = Variant::Cava;
        let (video, audio) = random_inputs(&cv, 3, 4);
        let perm = [2usize, 0, 1];
        let permute = |t: &Tensor<f32>| {
            let n = t.len() / 3;
            let d: Vec<f32> = perm.iter().flat_map(|&i| t.data()[i * n..(i + 1) * n].to_vec()).collect();
            Tensor::new(t.shape().to_vec(), d).unwrap()
        };
        let base = tokens(&model, v, &video, audio.as_ref());
        let moved = tokens(&model, v, &permute(&video), audio.as_ref().map(permute).as_ref());
        let n = base.len() / 3;
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(moved[dst * n..(dst + 1) * n], base[src * n..(src + 1) * n], "{}", v.name());
        }
    }
}

#[test]
fn tokenization_is_affine_in_pixels() {
    for v in [Variant::SpatialOnly, Variant::TemporalOnly, Variant::AudioOnly] {
        let model = Model::build(tiny(v), None).unwrap();
        let c = model.config.clone();
        let mut cv = c.clone();
        cv.variant = Variant::Cava;
        let f = |(v, a): (Tensor<f32>, Option<Tensor<f32>>)| (v.cast::<f64>(), a.map(|a| a.cast::<f64>()));
        let (v1, a1) = f(random_inputs(&cv, 1, 5));
        let (v2, a2) = f(random_inputs(&cv, 1, 6));
        let (alpha, beta) = (0.75, -1.5);
        let mix = |x: &Tensor<f64>, y: &Tensor<f64>| {
            let d = x.data().iter().zip(y.data()).map(|(p, q)| alpha * p + beta * q).collect();
            Tensor::new(x.shape().to_vec(), d).unwrap()
        };
        let zero_v = Tensor::zeros(v1.shape());
        let zero_a = a1.as_ref().map(|a| Tensor::zeros(a.shape()));
        let m64 = model.cast::<f64>();
        let run = |video: &Tensor<f64>, audio: Option<&Tensor<f64>>| -> Vec<f64> {
            let mut s = Session::new(&m64.store);
            let e = v.experts()[0];
            let embed = m64.paths[&e].embed;
            let seq = match v {
                Variant::SpatialOnly => tokenize_spatial(
                    &mut s,
                    &VideoBatch::new(video.clone(), c.frame_rate).unwrap(),
                    c.patch,
                    &embed,
                ),
                Variant::TemporalOnly => tokenize_temporal(
                    &mut s,
                    &VideoBatch::new(video.clone(), c.frame_rate).unwrap(),
                    c.patch,
                    &embed,
                ),
                _ => tokenize_audio(
                    &mut s,
                    &SpectrogramBatch::new(audio.unwrap().clone(), c.spec_duration_s()).unwrap(),
                    c.audio_patch,
                    c.audio_stride,
                    &embed,
                ),
            }
            .unwrap();
            s.value(seq.tokens).data().to_vec()
        };
        let t1 = run(&v1, a1.as_ref());
        let t2 = run(&v2, a2.as_ref());
        let t0 = run(&zero_v, zero_a.as_ref());
        let mixed_a = a1.as_ref().zip(a2.as_ref()).map(|(x, y)| mix(x, y));
        let tm = run(&mix(&v1, &v2), mixed_a.as_ref());
        for i in 0..tm.len() {
            // tokenize(x) - tokenize(0) is linear in x
            let want = alpha * (t1[i] - t0[i]) + beta * (t2[i] - t0[i]) + t0[i];
            assert!((tm[i] - want).abs() < 1e-9, "{}: {} vs {want}", v.name(), tm[i]);
        }
    }
}
