//! Loss, optimiser, schedule, training loop and multi-view inference.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;

use crate::autograd::Var;
use crate::checkpoint::NamedTensor;
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, grad_check_with, GradReport, Objective};
use crate::metrics::{argmax, metrics, Metrics};
use crate::model::{Model, ModelConfig};
use crate::param::{randomize, ParamId, ParamStore};
use crate::rng;
use crate::session::{ParamGrads, Session};
use crate::synthdata::{corrupt, generate, Coupling, CorruptionKind, Dataset, Sample, SynthSpec};
use crate::tensor::{Real, Tensor};
use crate::tokenizer::{SpectrogramBatch, VideoBatch};

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy<F: Real>(s: &mut Session<'_, F>, logits: Var, labels: &[usize]) -> Result<Var> {
    s.tape.cross_entropy(logits, labels)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

/// Linear warmup from 0, then half-cosine decay to 0 at `total_steps`.
pub fn lr_at(step: usize, sched: &Schedule) -> f64 {
    let (w, n) = (sched.warmup_steps, sched.total_steps.max(1));
    if step < w {
        return sched.base_lr * step as f64 / w as f64;
    }
    if n <= w {
        return sched.base_lr;
    }
    let progress = ((step - w) as f64 / (n - w) as f64).min(1.0);
    sched.base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub layer_decay: f64,
    /// Largest layer index, i.e. the head's (`depth + 1`).
    pub top_layer: usize,
}

impl OptimConfig {
    pub fn new(top_layer: usize) -> Self {
        Self {
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.05,
            layer_decay: 0.8,
            top_layer,
        }
    }

    /// Learning-rate multiplier of a parameter at `layer`.
    pub fn layer_scale(&self, layer: usize) -> f64 {
        self.layer_decay
            .powi(self.top_layer.saturating_sub(layer) as i32)
    }
}

#[derive(Clone, Debug)]
pub struct OptimState<F> {
    pub config: OptimConfig,
    pub step: u64,
    moments: BTreeMap<ParamId, (Tensor<F>, Tensor<F>)>,
}

impl<F: Real> OptimState<F> {
    pub fn new(store: &ParamStore<F>, config: OptimConfig) -> Self {
        let moments = store
            .trainable_ids()
            .into_iter()
            .map(|id| {
                let shape = store.get(id).value.shape();
                (id, (Tensor::zeros(shape), Tensor::zeros(shape)))
            })
            .collect();
        Self {
            config,
            step: 0,
            moments,
        }
    }

    pub fn moments(&self, id: ParamId) -> Option<(&Tensor<F>, &Tensor<F>)> {
        self.moments.get(&id).map(|(m, v)| (m, v))
    }

    /// Moments as `{param}.m` / `{param}.v` plus a `step` counter split into
    /// two 24-bit halves so it survives the f32 container exactly.
    pub fn to_tensors(&self, store: &ParamStore<F>) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        let lo = (self.step & 0xff_ffff) as f32;
        let hi = (self.step >> 24) as f32;
        out.push(NamedTensor {
            name: "step".into(),
            trainable: false,
            value: Tensor::new(vec![2], vec![lo, hi]).expect("two elements"),
        });
        for (&id, (m, v)) in &self.moments {
            let name = &store.get(id).name;
            for (suffix, t) in [("m", m), ("v", v)] {
                out.push(NamedTensor {
                    name: format!("{name}.{suffix}"),
                    trainable: false,
                    value: t.cast(),
                });
            }
        }
        out
    }

    pub fn from_tensors(store: &ParamStore<F>, config: OptimConfig, tensors: &[NamedTensor]) -> Result<Self> {
        let by_name: BTreeMap<&str, &Tensor<f32>> =
            tensors.iter().map(|t| (t.name.as_str(), &t.value)).collect();
        let step = match by_name.get("step").map(|t| t.data()) {
            Some(&[lo, hi]) => (hi as u64) << 24 | lo as u64,
            _ => return Err(Error::format("optimiser state lacks a step counter")),
        };
        let mut state = Self::new(store, config);
        state.step = step;
        let mut bad = Vec::new();
        for (&id, (m, v)) in state.moments.iter_mut() {
            let name = &store.get(id).name;
            for (suffix, slot) in [("m", m), ("v", v)] {
                let key = format!("{name}.{suffix}");
                match by_name.get(key.as_str()) {
                    Some(t) if t.shape() == slot.shape() => *slot = t.cast(),
                    _ => bad.push(key),
                }
            }
        }
        if !bad.is_empty() || by_name.len() != 1 + 2 * state.moments.len() {
            return Err(Error::Load(bad));
        }
        Ok(state)
    }
}

/// One decoupled-weight-decay adaptive-moment update of every trainable
/// parameter at base rate `lr`. Frozen parameters are never written.
pub fn optimizer_step<F: Real>(
    state: &mut OptimState<F>,
    store: &mut ParamStore<F>,
    grads: &ParamGrads<F>,
    lr: f64,
) -> Result<()> {
    if let Some((id, _)) = state.moments.iter().find(|(id, _)| grads.get(**id).is_none()) {
        return Err(Error::contract(format!(
            "no gradient for trainable parameter {}",
            store.get(*id).name
        )));
    }
    let c = state.config;
    let t = state.step + 1;
    let (b1, b2) = c.betas;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for (&id, (m, v)) in state.moments.iter_mut() {
        let g = grads.get(id).expect("checked above");
        let p = store.get_mut(id);
        if !p.trainable || g.shape() != p.value.shape() {
            return Err(Error::contract(format!("bad gradient for {}", p.name)));
        }
        let plr = lr * c.layer_scale(p.layer);
        let wd = if p.no_decay { 0.0 } else { c.weight_decay };
        let (b1f, b2f) = (F::lit(b1), F::lit(b2));
        for (((pv, &gv), mv), vv) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1f * *mv + (F::one() - b1f) * gv;
            *vv = b2f * *vv + (F::one() - b2f) * gv * gv;
            let mh = mv.to_f64_lossy() / bc1;
            let vh = vv.to_f64_lossy() / bc2;
            let x = pv.to_f64_lossy();
            *pv = F::lit(x - plr * (mh / (vh.sqrt() + c.eps) + wd * x));
        }
    }
    state.step = t;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Micro-batches accumulated per optimiser step.
    pub accumulate: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub layer_decay: f64,
    pub seed: u64,
    /// Stop once this many epochs are done. The schedule still spans `epochs`.
    pub stop_after: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            accumulate: 1,
            base_lr: 1e-3,
            warmup_epochs: 5,
            weight_decay: 0.05,
            layer_decay: 0.8,
            seed: 0,
            stop_after: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub top1: f64,
}

impl StepLog {
    pub fn line(&self) -> String {
        format!(
            "{}\t{}\t{:.6e}\t{:.6}\t{:.4}",
            self.step, self.epoch, self.lr, self.loss, self.top1
        )
    }
}

fn micro_batches(n: usize, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::indexed_stream(cfg.seed, "data/shuffle", epoch as u64));
    order.chunks(cfg.batch_size.max(1)).map(|c| c.to_vec()).collect()
}

pub fn steps_per_epoch(n: usize, cfg: &TrainConfig) -> usize {
    n.div_ceil(cfg.batch_size.max(1)).div_ceil(cfg.accumulate.max(1))
}

/// Forward and backward of one batch; returns loss, correct count and grads.
pub fn batch_gradients(
    model: &Model<f32>,
    data: &Dataset,
    idx: &[usize],
    dropout_stream: Option<u64>,
) -> Result<(f64, usize, ParamGrads<f32>)> {
    let (video, audio, labels) = data.batch(idx)?;
    let audio = model.config.variant.uses_audio().then_some(audio);
    let mut s = Session::new(&model.store);
    if let Some(k) = dropout_stream {
        s = s.with_drop_path(
            model.config.drop_path,
            rng::indexed_stream(model.config.seed, "dropout", k),
        );
    }
    let out = model.forward(&mut s, &video, audio.as_ref())?;
    let preds = predictions(s.value(out.logits));
    let loss = cross_entropy(&mut s, out.logits, &labels)?;
    let l = s.scalar(loss)?.to_f64_lossy();
    if !l.is_finite() {
        return Err(Error::Numeric(format!("loss became {l}")));
    }
    let grads = s.backward(loss)?;
    let hit = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    Ok((l, hit, grads))
}

pub fn predictions(logits: &Tensor<f32>) -> Vec<usize> {
    let k = logits.last_dim();
    logits.data().chunks(k).map(argmax).collect()
}

/// Runs the full schedule, writing one tab-separated log line per step.
pub fn train(
    model: &mut Model<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<Vec<StepLog>> {
    train_from(model, data, cfg, None, log).map(|(logs, _)| logs)
}

/// Like [`train`], optionally continuing an optimiser state. A resumed
/// state must sit on an epoch boundary; training picks up at that epoch so
/// an interrupted run reproduces an uninterrupted one.
pub fn train_from(
    model: &mut Model<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    state: Option<OptimState<f32>>,
    log: &mut dyn Write,
) -> Result<(Vec<StepLog>, OptimState<f32>)> {
    if data.is_empty() || cfg.batch_size == 0 || cfg.accumulate == 0 {
        return Err(Error::config("need data, a positive batch size and accumulation"));
    }
    if data.num_classes != model.config.num_classes {
        return Err(Error::config(format!(
            "dataset has {} classes, model {}",
            data.num_classes, model.config.num_classes
        )));
    }
    let per_epoch = steps_per_epoch(data.len(), cfg);
    let sched = Schedule {
        base_lr: cfg.base_lr,
        warmup_steps: cfg.warmup_epochs * per_epoch,
        total_steps: cfg.epochs * per_epoch,
    };
    let mut oc = OptimConfig::new(model.config.depth + 1);
    oc.weight_decay = cfg.weight_decay;
    oc.layer_decay = cfg.layer_decay;
    let mut state = state.unwrap_or_else(|| OptimState::new(&model.store, oc));
    let mut logs = Vec::new();
    let mut step = state.step as usize;
    if step % per_epoch != 0 {
        return Err(Error::contract(format!(
            "resumed at step {step}, not a multiple of {per_epoch} steps per epoch"
        )));
    }
    let end = cfg.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    for epoch in step / per_epoch..end {
        let batches = micro_batches(data.len(), cfg, epoch);
        for group in batches.chunks(cfg.accumulate) {
            let mut acc = ParamGrads::default();
            let (mut loss, mut hit, mut seen) = (0.0, 0, 0);
            for (j, idx) in group.iter().enumerate() {
                let stream = (step * cfg.accumulate + j) as u64;
                let (l, h, g) = batch_gradients(model, data, idx, Some(stream))?;
                acc.accumulate(&g);
                loss += l * idx.len() as f64;
                hit += h;
                seen += idx.len();
            }
            acc.scale(1.0 / group.len() as f32);
            let lr = lr_at(step, &sched);
            optimizer_step(&mut state, &mut model.store, &acc, lr)?;
            let entry = StepLog {
                step,
                epoch,
                lr,
                loss: loss / seen as f64,
                top1: hit as f64 / seen as f64,
            };
            writeln!(log, "{}", entry.line())?;
            logs.push(entry);
            step += 1;
        }
    }
    Ok((logs, state))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropPolicy {
    /// Crops spread along the longer image side, centred on the shorter.
    ThreeCrop,
    Center,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViewSpec {
    pub temporal_views: usize,
    pub spatial_crops: usize,
    pub policy: CropPolicy,
}

impl ViewSpec {
    pub fn single() -> Self {
        Self {
            temporal_views: 1,
            spatial_crops: 1,
            policy: CropPolicy::Center,
        }
    }

    /// `TxS`, e.g. `2x3`; more than one crop implies three-crop placement.
    pub fn parse(s: &str) -> Result<Self> {
        let (t, c) = s
            .split_once('x')
            .ok_or_else(|| Error::config(format!("views must look like TxS, got {s}")))?;
        let p = |x: &str| {
            x.parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::config(format!("bad view count {x}")))
        };
        let (t, c) = (p(t)?, p(c)?);
        Ok(Self {
            temporal_views: t,
            spatial_crops: c,
            policy: if c > 1 { CropPolicy::ThreeCrop } else { CropPolicy::Center },
        })
    }
}

fn spread(count: usize, free: usize) -> Vec<usize> {
    if count == 1 {
        return vec![free / 2];
    }
    (0..count)
        .map(|i| ((i * free) as f64 / (count - 1) as f64).round() as usize)
        .collect()
}

/// Averaged per-view class probabilities for one sample, which may be longer
/// and larger than the model input.
pub fn multi_view_predict(
    model: &Model<f32>,
    sample: &Sample,
    frame_rate: f64,
    vs: &ViewSpec,
    corruption: Option<(CorruptionKind, u64)>,
) -> Result<Vec<f64>> {
    let c = &model.config;
    if vs.temporal_views == 0 || vs.spatial_crops == 0 {
        return Err(Error::contract("view counts must be positive"));
    }
    let [f, h, w, ch]: [usize; 4] = sample
        .video
        .shape()
        .try_into()
        .map_err(|_| Error::contract("sample video must be [2T,H,W,C]"))?;
    if f < c.frames || h < c.height || w < c.width || ch != c.channels {
        return Err(Error::contract(format!(
            "cannot cut {}x{}x{} views from a {f}x{h}x{w} clip",
            c.frames, c.height, c.width
        )));
    }
    if vs.policy == CropPolicy::Center && vs.spatial_crops > 1 {
        return Err(Error::contract("center policy takes one crop"));
    }
    let [ta, mel]: [usize; 2] = sample
        .audio
        .shape()
        .try_into()
        .map_err(|_| Error::contract("sample audio must be [T_spec, mel]"))?;
    if c.variant.uses_audio() && (ta < c.spec_time || mel != c.mel_bins) {
        return Err(Error::contract("spectrogram too short for the model"));
    }
    let starts = spread(vs.temporal_views, f - c.frames);
    let crops: Vec<(usize, usize)> = match vs.policy {
        CropPolicy::Center => vec![((h - c.height) / 2, (w - c.width) / 2)],
        CropPolicy::ThreeCrop => {
            if h >= w {
                spread(vs.spatial_crops, h - c.height)
                    .into_iter()
                    .map(|y| (y, (w - c.width) / 2))
                    .collect()
            } else {
                spread(vs.spatial_crops, w - c.width)
                    .into_iter()
                    .map(|x| ((h - c.height) / 2, x))
                    .collect()
            }
        }
    };
    let mut probs = vec![0.0; c.num_classes];
    let views = (starts.len() * crops.len()) as f64;
    for &t0 in &starts {
        let audio = if c.variant.uses_audio() {
            // the audio window covering the same seconds as the frame window
            let a0 = ((t0 as f64 * ta as f64 / f as f64).round() as usize).min(ta - c.spec_time);
            let data = sample.audio.data()[a0 * mel..(a0 + c.spec_time) * mel].to_vec();
            let batch = SpectrogramBatch::new(
                Tensor::new(vec![1, c.spec_time, mel], data)?,
                c.frames as f64 / frame_rate,
            )?;
            Some(match corruption {
                Some((kind, seed)) => corrupt(&batch, kind, seed)?,
                None => batch,
            })
        } else {
            None
        };
        for &(y0, x0) in &crops {
            let mut v = Vec::with_capacity(c.frames * c.height * c.width * ch);
            for t in t0..t0 + c.frames {
                for y in y0..y0 + c.height {
                    let row = ((t * h + y) * w + x0) * ch;
                    v.extend_from_slice(&sample.video.data()[row..row + c.width * ch]);
                }
            }
            let video = VideoBatch::new(
                Tensor::new(vec![1, c.frames, c.height, c.width, ch], v)?,
                frame_rate,
            )?;
            let mut s = Session::new(&model.store);
            let out = model.forward(&mut s, &video, audio.as_ref())?;
            let logits = s.value(out.logits).data();
            for (p, q) in probs.iter_mut().zip(softmax64(logits)) {
                *p += q / views;
            }
        }
    }
    Ok(probs)
}

pub fn softmax64(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let e: Vec<f64> = logits.iter().map(|&x| (x as f64 - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub preds: Vec<usize>,
    pub probs: Vec<Vec<f64>>,
    pub metrics: Metrics,
}

/// Multi-view evaluation of every sample, optionally with corrupted audio
/// (sample `i` uses corruption stream `seed + i`).
pub fn evaluate(
    model: &Model<f32>,
    data: &Dataset,
    vs: &ViewSpec,
    corruption: Option<(CorruptionKind, u64)>,
) -> Result<Evaluation> {
    let mut preds = Vec::with_capacity(data.len());
    let mut probs = Vec::with_capacity(data.len());
    for (i, s) in data.samples.iter().enumerate() {
        let c = corruption.map(|(k, seed)| (k, seed.wrapping_add(i as u64)));
        let p = multi_view_predict(model, s, data.frame_rate, vs, c)?;
        let best = (0..p.len()).fold(0, |b, j| if p[j] > p[b] { j } else { b });
        preds.push(best);
        probs.push(p);
    }
    let m = metrics(&preds, &data.labels(), data.num_classes)?;
    Ok(Evaluation {
        preds,
        probs,
        metrics: m,
    })
}

/// Mean cross-entropy of a model on fixed inputs, evaluable at any
/// precision; the gradient check's objective.
pub struct SupervisedObjective<'m, M> {
    pub model: &'m Model<M>,
    video: Tensor<f64>,
    frame_rate: f64,
    audio: Option<(Tensor<f64>, f64)>,
    labels: Vec<usize>,
}

impl<'m, M> SupervisedObjective<'m, M> {
    pub fn new(
        model: &'m Model<M>,
        video: &VideoBatch<f32>,
        audio: Option<&SpectrogramBatch<f32>>,
        labels: Vec<usize>,
    ) -> Self {
        Self {
            model,
            video: video.data.cast(),
            frame_rate: video.frame_rate,
            audio: audio.map(|a| (a.data.cast(), a.duration_s)),
            labels,
        }
    }
}

impl<M> Objective for SupervisedObjective<'_, M> {
    fn loss<F: Real>(&self, s: &mut Session<'_, F>) -> Result<Var> {
        let video = VideoBatch::new(self.video.cast(), self.frame_rate)?;
        let audio = match &self.audio {
            Some((a, d)) => Some(SpectrogramBatch::new(a.cast(), *d)?),
            None => None,
        };
        let out = self.model.forward(s, &video, audio.as_ref())?;
        cross_entropy(s, out.logits, &self.labels)
    }
}

/// Synthetic data with the geometry `config` expects.
pub fn synth_spec_for(config: &ModelConfig, coupling: Coupling, samples_per_class: usize, seed: u64) -> SynthSpec {
    SynthSpec {
        num_classes: config.num_classes,
        samples_per_class,
        coupling,
        frames: config.frames,
        height: config.height,
        width: config.width,
        channels: config.channels,
        frame_rate: config.frame_rate,
        spec_time: config.spec_time,
        mel_bins: config.mel_bins,
        noise: 0.3,
        seed,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelCheck {
    /// 32: f32 backward against an f64 difference oracle. 64: both in f64.
    pub bits: u32,
    pub h: f64,
    /// Trainables are redrawn from `U(-bound, bound)` so zero-initialised
    /// up-projections do not hide the branches behind them.
    pub bound: f64,
    pub batch: usize,
    pub seed: u64,
}

impl ModelCheck {
    pub fn new(bits: u32) -> Self {
        Self {
            bits,
            h: if bits == 64 { 1e-4 } else { 1e-3 },
            bound: 0.1,
            batch: 2,
            seed: 11,
        }
    }
}

/// Gradient check of the supervised loss of a freshly built model.
pub fn model_grad_check(config: ModelConfig, check: &ModelCheck) -> Result<GradReport> {
    let mut model = Model::build(config, None)?;
    let ids = model.trainable_parameters();
    randomize(&mut model.store, &ids, check.seed, check.bound);
    let per_class = check.batch.div_ceil(model.config.num_classes);
    let data = generate(&synth_spec_for(&model.config, Coupling::Xor, per_class, check.seed))?;
    let idx: Vec<usize> = (0..check.batch.min(data.len())).collect();
    let (video, audio, labels) = data.batch(&idx)?;
    let audio = model.config.variant.uses_audio().then_some(audio);
    let obj = SupervisedObjective::new(&model, &video, audio.as_ref(), labels);
    match check.bits {
        32 => grad_check_with::<f32, f64, _>(&obj, &model.store, &ids, check.h),
        64 => grad_check(&obj, &model.store.cast::<f64>(), &ids, check.h),
        b => Err(Error::config(format!("precision must be 32 or 64 bits, got {b}"))),
    }
}
