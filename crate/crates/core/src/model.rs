//! Expert paths assembled into CAST, CAVA and CA²ST.
//!
//! Every block runs, per path, the attention block, then the cross-expert
//! exchange, then the feed-forward block. Expert weights are frozen; the
//! adapters, the exchange parameters, the per-path final norms and the head
//! are trained.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::attention::{
    expert_attn_block, ffn_block, AdapterParams, AttentionParams, FfnParams, LnParams,
};
use crate::autograd::Var;
use crate::bca::{
    exchange, BcaEmbed, BcaParams, Direction, DirectionSpec, Exchange, ExchangeContext, Expert,
    PhiOrder, WindowShape,
};
use crate::checkpoint::{self, NamedTensor, CHECKPOINT_MAGIC};
use crate::error::{Error, Result};
use crate::param::{Init, ParamBuilder, ParamId, ParamStore};
use crate::session::Session;
use crate::tensor::Real;
use crate::tokenizer::{
    frame_intervals, tokenize_audio, tokenize_spatial, tokenize_temporal, window_count, Layout,
    PatchEmbed, SpectrogramBatch, TimeMlp, TokenSequence, VideoBatch,
};

pub const DEFAULT_LN_EPS: f64 = 1e-6;
const EMBED_INIT: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Spatial + temporal experts.
    Cast,
    /// Audio + spatial experts.
    Cava,
    /// Audio + spatial + temporal experts.
    Ca2st,
    /// Single-expert baselines without exchange.
    SpatialOnly,
    TemporalOnly,
    AudioOnly,
}

impl Variant {
    pub fn experts(self) -> Vec<Expert> {
        use Expert::*;
        match self {
            Variant::Cast => vec![Spatial, Temporal],
            Variant::Cava => vec![Spatial, Audio],
            Variant::Ca2st => vec![Spatial, Temporal, Audio],
            Variant::SpatialOnly => vec![Spatial],
            Variant::TemporalOnly => vec![Temporal],
            Variant::AudioOnly => vec![Audio],
        }
    }

    /// Directions of the exchange, in summation order.
    pub fn directions(self) -> Vec<Direction> {
        let e = self.experts();
        let mut out = Vec::new();
        for &q in &e {
            for &k in &e {
                if k != q {
                    out.push(Direction::new(k, q));
                }
            }
        }
        out
    }

    pub fn uses_audio(self) -> bool {
        self.experts().contains(&Expert::Audio)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cast" => Ok(Variant::Cast),
            "cava" => Ok(Variant::Cava),
            "ca2st" => Ok(Variant::Ca2st),
            "spatial" => Ok(Variant::SpatialOnly),
            "temporal" => Ok(Variant::TemporalOnly),
            "audio" => Ok(Variant::AudioOnly),
            _ => Err(Error::config(format!("unknown variant {s}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Cast => "CAST",
            Variant::Cava => "CAVA",
            Variant::Ca2st => "CA2ST",
            Variant::SpatialOnly => "spatial",
            Variant::TemporalOnly => "temporal",
            Variant::AudioOnly => "audio",
        }
    }
}

pub fn default_window(dir: Direction) -> WindowShape {
    if dir.involves_audio() {
        WindowShape::SpaceTime
    } else if dir.query == Expert::Spatial {
        WindowShape::Time
    } else {
        WindowShape::Space
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    /// Input frames `2T`.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub frame_rate: f64,
    pub spec_time: usize,
    pub mel_bins: usize,
    pub audio_patch: usize,
    pub audio_stride: usize,
    pub d_adapter: usize,
    pub d_bca: usize,
    pub bca_heads: usize,
    pub time_mlp_hidden: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub windows: BTreeMap<Direction, WindowShape>,
    /// Ablated directions: no Φ term is added for them.
    pub disabled: BTreeSet<Direction>,
    /// Share each expert's bottleneck projections across its incoming
    /// directions.
    pub share_projections: bool,
    pub drop_path: f64,
    pub ln_eps: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// The small geometry used by gradient checks and the synthetic tasks:
    /// depth 2, D=32, 4 frames of 16x16x3, a 32x32 spectrogram.
    pub fn toy(variant: Variant) -> Self {
        let mut c = Self {
            variant,
            depth: 2,
            dim: 32,
            heads: 2,
            patch: 8,
            frames: 4,
            height: 16,
            width: 16,
            channels: 3,
            frame_rate: 4.0,
            spec_time: 32,
            mel_bins: 32,
            audio_patch: 16,
            audio_stride: 10,
            d_adapter: 8,
            d_bca: 8,
            bca_heads: 2,
            time_mlp_hidden: 16,
            mlp_ratio: 4,
            num_classes: 2,
            windows: BTreeMap::new(),
            disabled: BTreeSet::new(),
            share_projections: true,
            drop_path: 0.0,
            ln_eps: DEFAULT_LN_EPS,
            seed: 0,
        };
        c.fill_default_windows();
        c
    }

    /// CPU-minute scale: 8 frames of 32x32, D=64.
    pub fn desk(variant: Variant) -> Self {
        let mut c = Self::toy(variant);
        c.depth = 4;
        c.dim = 64;
        c.heads = 4;
        c.frames = 8;
        c.height = 32;
        c.width = 32;
        c.spec_time = 64;
        c.d_adapter = 16;
        c.d_bca = 16;
        c.time_mlp_hidden = 32;
        c
    }

    /// Full-size geometry (ViT-B/16 experts on 16x224x224 clips and
    /// 1024x128 spectrograms). Only used for parameter counting.
    pub fn full(variant: Variant) -> Self {
        let mut c = Self::toy(variant);
        c.depth = 12;
        c.dim = 768;
        c.heads = 12;
        c.patch = 16;
        c.frames = 16;
        c.height = 224;
        c.width = 224;
        c.frame_rate = 8.0;
        c.spec_time = 1024;
        c.mel_bins = 128;
        c.d_adapter = 192;
        c.d_bca = 384;
        c.bca_heads = 6;
        c.time_mlp_hidden = 768;
        c.num_classes = 400;
        c.drop_path = 0.2;
        c
    }

    pub fn fill_default_windows(&mut self) {
        for d in self.variant.directions() {
            self.windows.entry(d).or_insert_with(|| default_window(d));
        }
    }

    pub fn window(&self, dir: Direction) -> WindowShape {
        self.windows.get(&dir).copied().unwrap_or_else(|| default_window(dir))
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn layout(&self, e: Expert) -> Result<Layout> {
        let (gh, gw) = self.grid();
        Ok(match e {
            Expert::Spatial => Layout::Spatial {
                frames: self.frames / 2,
                grid_h: gh,
                grid_w: gw,
            },
            Expert::Temporal => Layout::Temporal {
                frames: self.frames / 2,
                grid_h: gh,
                grid_w: gw,
            },
            Expert::Audio => Layout::Audio {
                time: window_count(self.spec_time, self.audio_patch, self.audio_stride)?,
                freq: window_count(self.mel_bins, self.audio_patch, self.audio_stride)?,
            },
        })
    }

    pub fn spec_duration_s(&self) -> f64 {
        self.frames as f64 / self.frame_rate
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.dim == 0 || self.num_classes == 0 {
            return bad("depth, dim and num_classes must be positive".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.bca_heads == 0 || self.d_bca % self.bca_heads != 0 {
            return bad(format!(
                "d_bca {} not divisible by bca_heads {}",
                self.d_bca, self.bca_heads
            ));
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return bad(format!(
                "image {}x{} not divisible by patch {}",
                self.height, self.width, self.patch
            ));
        }
        if self.frames == 0 || self.frames % 2 != 0 {
            return bad(format!("frame count {} must be even and positive", self.frames));
        }
        if self.d_adapter == 0 || self.d_bca == 0 || self.time_mlp_hidden == 0 {
            return bad("bottleneck widths must be positive".into());
        }
        if !(self.frame_rate > 0.0) || !(0.0..1.0).contains(&self.drop_path) {
            return bad("frame_rate must be > 0 and drop_path in [0, 1)".into());
        }
        if self.variant.uses_audio() {
            let l = self.layout(Expert::Audio)?;
            if self.variant.directions().iter().any(|d| d.involves_audio())
                && l.time_steps() < self.frames / 2
            {
                return bad(format!(
                    "{} audio time positions cannot be grouped into {} frames",
                    l.time_steps(),
                    self.frames / 2
                ));
            }
        }
        let dirs = self.variant.directions();
        for (d, w) in &self.windows {
            if !dirs.contains(d) {
                return bad(format!("window given for unused direction {d}"));
            }
            if d.involves_audio() && *w != WindowShape::SpaceTime {
                return bad(format!("audio direction {d} needs the space-time window"));
            }
        }
        for d in &self.disabled {
            if !dirs.contains(d) {
                return bad(format!("cannot disable unused direction {d}"));
            }
        }
        Ok(())
    }

    /// Trainable scalar count derived from the configuration alone.
    pub fn expected_trainable_count(&self) -> Result<usize> {
        let d_model = self.dim;
        let (da, db) = (self.d_adapter, self.d_bca);
        let experts = self.variant.experts();
        let mut total = 0;
        for _ in &experts {
            total += self.depth * 2 * (2 * d_model * da); // two adapters per block
            total += 2 * d_model; // final norm
            total += 2 * d_model * da; // head adapter
        }
        total += d_model * self.num_classes + self.num_classes;
        let dirs = self.variant.directions();
        let enabled = |d: &Direction| !self.disabled.contains(d);
        let mut per_block = 0;
        for d in &dirs {
            let ql = self.layout(d.query)?;
            per_block += 2 * db;
            per_block += if d.involves_audio() {
                let h = self.time_mlp_hidden;
                2 * h + h + h * db + db + if ql.has_cls() { db } else { 0 }
            } else {
                ql.clip_len() * db
            };
            if enabled(d) {
                per_block += 3 * db * db;
            }
        }
        if self.share_projections {
            for &e in &experts {
                if dirs.iter().any(|d| d.query == e) {
                    per_block += d_model * db;
                }
                if dirs.iter().any(|d| d.query == e && enabled(d)) {
                    per_block += db * d_model;
                }
            }
        } else {
            for d in &dirs {
                per_block += d_model * db;
                if enabled(d) {
                    per_block += db * d_model;
                }
            }
        }
        Ok(total + self.depth * per_block)
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1: LnParams,
    pub attn: AttentionParams,
    pub attn_adapter: AdapterParams,
    pub ln2: LnParams,
    pub ffn: FfnParams,
    pub ffn_adapter: AdapterParams,
    pub window: WindowShape,
}

#[derive(Clone, Debug)]
pub struct PathParams {
    pub embed: PatchEmbed,
    pub blocks: Vec<BlockParams>,
    pub final_ln: LnParams,
    pub head_adapter: AdapterParams,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub store: ParamStore<F>,
    pub paths: BTreeMap<Expert, PathParams>,
    /// One exchange per block; empty for single-expert variants.
    pub exchanges: Vec<Exchange>,
    pub head: HeadParams,
}

/// Final per-path tokens and the logits computed from them.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub features: BTreeMap<Expert, TokenSequence>,
}

struct Builder<'a> {
    pb: ParamBuilder<'a, f32>,
    cfg: &'a ModelConfig,
}

impl Builder<'_> {
    fn frozen(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        self.pb.add(name, shape, init, false, 0)
    }

    fn train(&mut self, name: &str, shape: &[usize], init: Init, layer: usize) -> Result<ParamId> {
        self.pb.add(name, shape, init, true, layer)
    }

    fn ln(&mut self, prefix: &str, width: usize, trainable: bool, layer: usize) -> Result<LnParams> {
        Ok(LnParams {
            gamma: self.pb.add(&format!("{prefix}.gamma"), &[width], Init::Ones, trainable, layer)?,
            beta: self.pb.add(&format!("{prefix}.beta"), &[width], Init::Zeros, trainable, layer)?,
            eps: self.cfg.ln_eps,
        })
    }

    fn adapter(&mut self, prefix: &str, layer: usize) -> Result<AdapterParams> {
        let (d, da) = (self.cfg.dim, self.cfg.d_adapter);
        Ok(AdapterParams {
            w_down: self.train(&format!("{prefix}.w_down"), &[d, da], Init::FanIn, layer)?,
            w_up: self.train(&format!("{prefix}.w_up"), &[da, d], Init::Zeros, layer)?,
        })
    }

    fn path(&mut self, e: Expert) -> Result<PathParams> {
        let c = self.cfg;
        let d = c.dim;
        let name = e.name();
        let layout = c.layout(e)?;
        let patch_len = match e {
            Expert::Spatial => c.patch * c.patch * c.channels,
            Expert::Temporal => 2 * c.patch * c.patch * c.channels,
            Expert::Audio => c.audio_patch * c.audio_patch,
        };
        let fan_bound = 1.0 / (patch_len as f64).sqrt();
        let embed = PatchEmbed {
            weight: self.frozen(&format!("{name}.patch.weight"), &[patch_len, d], Init::FanIn)?,
            bias: self.frozen(&format!("{name}.patch.bias"), &[d], Init::Uniform(fan_bound))?,
            pos: self.frozen(
                &format!("{name}.pos"),
                &[layout.tokens_per_row(), d],
                Init::Uniform(EMBED_INIT),
            )?,
            cls: if layout.has_cls() {
                Some(self.frozen(&format!("{name}.cls"), &[1, d], Init::Uniform(EMBED_INIT))?)
            } else {
                None
            },
        };
        let window = match e {
            Expert::Spatial => WindowShape::Space,
            _ => WindowShape::SpaceTime,
        };
        let hidden = c.mlp_ratio * d;
        let mut blocks = Vec::with_capacity(c.depth);
        for l in 1..=c.depth {
            let p = format!("{name}.block{l}");
            blocks.push(BlockParams {
                ln1: self.ln(&format!("{p}.ln1"), d, false, 0)?,
                attn: AttentionParams {
                    w_q: self.frozen(&format!("{p}.attn.w_q"), &[d, d], Init::FanIn)?,
                    w_k: self.frozen(&format!("{p}.attn.w_k"), &[d, d], Init::FanIn)?,
                    w_v: self.frozen(&format!("{p}.attn.w_v"), &[d, d], Init::FanIn)?,
                    heads: c.heads,
                },
                attn_adapter: self.adapter(&format!("{p}.adapter_attn"), l)?,
                ln2: self.ln(&format!("{p}.ln2"), d, false, 0)?,
                ffn: FfnParams {
                    w1: self.frozen(&format!("{p}.ffn.w1"), &[d, hidden], Init::FanIn)?,
                    b1: self.frozen(
                        &format!("{p}.ffn.b1"),
                        &[hidden],
                        Init::Uniform(1.0 / (d as f64).sqrt()),
                    )?,
                    w2: self.frozen(&format!("{p}.ffn.w2"), &[hidden, d], Init::FanIn)?,
                    b2: self.frozen(
                        &format!("{p}.ffn.b2"),
                        &[d],
                        Init::Uniform(1.0 / (hidden as f64).sqrt()),
                    )?,
                },
                ffn_adapter: self.adapter(&format!("{p}.adapter_ffn"), l)?,
                window,
            });
        }
        let head_layer = c.depth + 1;
        Ok(PathParams {
            embed,
            blocks,
            final_ln: self.ln(&format!("{name}.final_ln"), d, true, head_layer)?,
            head_adapter: self.adapter(&format!("{name}.head_adapter"), head_layer)?,
        })
    }

    fn exchange(&mut self, l: usize) -> Result<Exchange> {
        let c = self.cfg;
        let (d, db) = (c.dim, c.d_bca);
        let dirs = c.variant.directions();
        let enabled = |dir: &Direction| !c.disabled.contains(dir);
        // bottleneck projections, keyed by the query expert (shared) or the
        // direction (unshared)
        let mut downs: BTreeMap<String, ParamId> = BTreeMap::new();
        let mut ups: BTreeMap<String, ParamId> = BTreeMap::new();
        let mut specs = Vec::with_capacity(dirs.len());
        for dir in dirs.iter().copied() {
            let key = if c.share_projections {
                dir.query.tag().to_string()
            } else {
                dir.to_string()
            };
            let w_down = match downs.get(&key) {
                Some(&id) => id,
                None => {
                    let id = self.train(&format!("block{l}.bca.{key}.w_down"), &[d, db], Init::FanIn, l)?;
                    downs.insert(key.clone(), id);
                    id
                }
            };
            let w_up = if enabled(&dir) {
                Some(match ups.get(&key) {
                    Some(&id) => id,
                    None => {
                        let id = self.train(&format!("block{l}.bca.{key}.w_up"), &[db, d], Init::Zeros, l)?;
                        ups.insert(key.clone(), id);
                        id
                    }
                })
            } else {
                None
            };
            let p = format!("block{l}.bca.{dir}");
            let ql = c.layout(dir.query)?;
            let embed = if dir.involves_audio() {
                let h = c.time_mlp_hidden;
                BcaEmbed::Time {
                    mlp: TimeMlp {
                        w1: self.train(&format!("{p}.time_mlp.w1"), &[2, h], Init::FanIn, l)?,
                        b1: self.train(&format!("{p}.time_mlp.b1"), &[h], Init::Zeros, l)?,
                        w2: self.train(&format!("{p}.time_mlp.w2"), &[h, db], Init::FanIn, l)?,
                        b2: self.train(&format!("{p}.time_mlp.b2"), &[db], Init::Zeros, l)?,
                    },
                    cls_row: if ql.has_cls() {
                        Some(self.train(&format!("{p}.time_cls"), &[1, db], Init::Uniform(EMBED_INIT), l)?)
                    } else {
                        None
                    },
                }
            } else {
                BcaEmbed::Positional(self.train(
                    &format!("{p}.embed"),
                    &[ql.clip_len(), db],
                    Init::Uniform(EMBED_INIT),
                    l,
                )?)
            };
            let xattn = if enabled(&dir) {
                Some(AttentionParams {
                    w_q: self.train(&format!("{p}.xattn.w_q"), &[db, db], Init::FanIn, l)?,
                    w_k: self.train(&format!("{p}.xattn.w_k"), &[db, db], Init::FanIn, l)?,
                    w_v: self.train(&format!("{p}.xattn.w_v"), &[db, db], Init::FanIn, l)?,
                    heads: c.bca_heads,
                })
            } else {
                None
            };
            specs.push(DirectionSpec {
                dir,
                window: c.window(dir),
                params: BcaParams {
                    w_down,
                    ln: self.ln(&format!("{p}.ln"), db, true, l)?,
                    embed,
                    xattn,
                    w_up,
                },
            });
        }
        Ok(Exchange {
            layer: l,
            directions: specs,
        })
    }
}

impl Model<f32> {
    /// Deterministic construction from the config seed, optionally overlaying
    /// tensors from a checkpoint (absent names keep their initial values).
    pub fn build(config: ModelConfig, init: Option<&[NamedTensor]>) -> Result<Self> {
        let mut config = config;
        config.fill_default_windows();
        config.validate()?;
        let mut store = ParamStore::new();
        let (paths, exchanges, head) = {
            let mut b = Builder {
                pb: ParamBuilder::new(&mut store, config.seed),
                cfg: &config,
            };
            let mut paths = BTreeMap::new();
            for e in config.variant.experts() {
                paths.insert(e, b.path(e)?);
            }
            let mut exchanges = Vec::new();
            if config.variant.experts().len() > 1 {
                for l in 1..=config.depth {
                    exchanges.push(b.exchange(l)?);
                }
            }
            let hl = config.depth + 1;
            let head = HeadParams {
                weight: b.train("head.weight", &[config.dim, config.num_classes], Init::FanIn, hl)?,
                bias: b.train("head.bias", &[config.num_classes], Init::Zeros, hl)?,
            };
            (paths, exchanges, head)
        };
        let mut model = Model {
            config,
            store,
            paths,
            exchanges,
            head,
        };
        if let Some(tensors) = init {
            model.load_tensors(tensors)?;
        }
        Ok(model)
    }

    /// Overwrites parameters by name; every unknown name or shape mismatch is
    /// reported together.
    pub fn load_tensors(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        let mut bad = Vec::new();
        for t in tensors {
            match self.store.id(&t.name) {
                Some(id) if self.store.get(id).value.shape() == t.value.shape() => {}
                _ => bad.push(t.name.clone()),
            }
        }
        if !bad.is_empty() {
            return Err(Error::Load(bad));
        }
        for t in tensors {
            let id = self.store.id(&t.name).unwrap();
            self.store.get_mut(id).value = t.value.clone();
        }
        Ok(())
    }
}

impl<F: Real> Model<F> {
    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            paths: self.paths.clone(),
            exchanges: self.exchanges.clone(),
            head: self.head,
        }
    }

    /// Trainable parameters in name order; shared parameters appear once.
    pub fn trainable_parameters(&self) -> Vec<ParamId> {
        self.store.trainable_ids()
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut v: Vec<NamedTensor> = self
            .store
            .iter()
            .map(|(_, p)| NamedTensor {
                name: p.name.clone(),
                trainable: p.trainable,
                value: p.value.cast(),
            })
            .collect();
        v.sort_by(|a, b| a.name.cmp(&b.name));
        v
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::write_file(path, CHECKPOINT_MAGIC, &self.to_tensors())
    }
}

/// Forward passes; the session may hold the parameters at any precision.
impl<F> Model<F> {
    fn check_inputs<G: Real>(&self, video: &VideoBatch<G>, audio: Option<&SpectrogramBatch<G>>) -> Result<()> {
        let c = &self.config;
        let vs = video.data.shape();
        if vs[1..] != [c.frames, c.height, c.width, c.channels] {
            return Err(Error::Shape {
                op: "forward(video)",
                lhs: vs.to_vec(),
                rhs: vec![0, c.frames, c.height, c.width, c.channels],
            });
        }
        match (c.variant.uses_audio(), audio) {
            (true, None) => Err(Error::contract(format!(
                "{} needs an audio input",
                c.variant.name()
            ))),
            (false, Some(_)) => Err(Error::contract(format!(
                "{} takes no audio input",
                c.variant.name()
            ))),
            (true, Some(a)) => {
                if a.data.shape()[1..] != [c.spec_time, c.mel_bins] || a.batch() != video.batch() {
                    return Err(Error::Shape {
                        op: "forward(audio)",
                        lhs: a.data.shape().to_vec(),
                        rhs: vec![video.batch(), c.spec_time, c.mel_bins],
                    });
                }
                Ok(())
            }
            (false, None) => Ok(()),
        }
    }

    /// Tokenises the inputs and runs every block; returns the final tokens of
    /// each path.
    pub fn features<G: Real>(
        &self,
        s: &mut Session<'_, G>,
        video: &VideoBatch<G>,
        audio: Option<&SpectrogramBatch<G>>,
    ) -> Result<BTreeMap<Expert, TokenSequence>> {
        self.features_with(s, video, audio, PhiOrder::Forward)
    }

    pub fn features_with<G: Real>(
        &self,
        s: &mut Session<'_, G>,
        video: &VideoBatch<G>,
        audio: Option<&SpectrogramBatch<G>>,
        order: PhiOrder,
    ) -> Result<BTreeMap<Expert, TokenSequence>> {
        self.check_inputs(video, audio)?;
        let c = &self.config;
        let mut xs = BTreeMap::new();
        for (&e, p) in &self.paths {
            let seq = match e {
                Expert::Spatial => tokenize_spatial(s, video, c.patch, &p.embed)?,
                Expert::Temporal => tokenize_temporal(s, video, c.patch, &p.embed)?,
                Expert::Audio => {
                    let a = audio.ok_or_else(|| Error::contract("missing audio"))?;
                    tokenize_audio(s, a, c.audio_patch, c.audio_stride, &p.embed)?
                }
            };
            xs.insert(e, seq);
        }
        // each of the T sampled frames stands for a pair of input frames
        let ctx = ExchangeContext {
            intervals: frame_intervals(c.frames / 2, video.frame_rate / 2.0),
        };
        for l in 0..c.depth {
            let mut ys = BTreeMap::new();
            for (&e, x) in &xs {
                let b = &self.paths[&e].blocks[l];
                ys.insert(e, expert_attn_block(s, x, &b.ln1, &b.attn, &b.attn_adapter, b.window)?);
            }
            let bs = match self.exchanges.get(l) {
                Some(ex) => exchange(s, &ys, ex, &ctx, order)?,
                None => ys,
            };
            let mut next = BTreeMap::new();
            for (&e, b) in &bs {
                let p = &self.paths[&e].blocks[l];
                next.insert(e, ffn_block(s, b, &p.ln2, &p.ffn, &p.ffn_adapter)?);
            }
            xs = next;
        }
        Ok(xs)
    }

    /// Pooled, normalised summary `[clips, D]` of one path.
    pub fn summary<G: Real>(&self, s: &mut Session<'_, G>, e: Expert, x: &TokenSequence) -> Result<Var> {
        let d = self.config.dim;
        let pooled = match x.layout {
            Layout::Spatial { frames, .. } => {
                let cls = s.tape.slice(x.tokens, 1, 0, 1)?;
                let cls = s.tape.reshape(cls, &[x.clips, frames, d])?;
                s.tape.mean_axis(cls, 1)?
            }
            Layout::Temporal { .. } => s.tape.mean_axis(x.tokens, 1)?,
            Layout::Audio { .. } => {
                let cls = s.tape.slice(x.tokens, 1, 0, 1)?;
                s.tape.reshape(cls, &[x.clips, d])?
            }
        };
        crate::attention::layer_norm(s, pooled, &self.paths[&e].final_ln)
    }

    /// `Z = Σ_paths ADAP(summary)`, then the linear classifier.
    pub fn classification_head<G: Real>(
        &self,
        s: &mut Session<'_, G>,
        features: &BTreeMap<Expert, TokenSequence>,
    ) -> Result<Var> {
        if self.config.variant.experts().contains(&Expert::Spatial)
            && !features.contains_key(&Expert::Spatial)
        {
            return Err(Error::contract("spatial path missing at the head"));
        }
        let mut z: Option<Var> = None;
        for (&e, x) in features {
            let sm = self.summary(s, e, x)?;
            let a = crate::attention::adapter(s, sm, &self.paths[&e].head_adapter)?;
            z = Some(match z {
                Some(acc) => s.tape.add(acc, a)?,
                None => a,
            });
        }
        let z = z.ok_or_else(|| Error::contract("no paths"))?;
        let w = s.param(self.head.weight);
        let b = s.param(self.head.bias);
        let logits = s.tape.matmul(z, w)?;
        s.tape.add(logits, b)
    }

    pub fn forward<G: Real>(
        &self,
        s: &mut Session<'_, G>,
        video: &VideoBatch<G>,
        audio: Option<&SpectrogramBatch<G>>,
    ) -> Result<ForwardOutput> {
        let features = self.features(s, video, audio)?;
        let logits = self.classification_head(s, &features)?;
        Ok(ForwardOutput { logits, features })
    }
}

pub fn load_checkpoint(path: &Path, config: ModelConfig) -> Result<Model<f32>> {
    let tensors = checkpoint::read_file(path, CHECKPOINT_MAGIC)?;
    Model::build(config, Some(&tensors))
}
