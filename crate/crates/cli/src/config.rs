//! Flat `key = value` run configuration.
//!
//! `preset` and `variant` are applied first, every other key overrides a
//! field of the resulting model, training or evaluation settings. A single
//! `seed` drives model initialisation, shuffling and drop path.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use xavt_core::attention::WindowShape;
use xavt_core::bca::Direction;
use xavt_core::model::{ModelConfig, Variant};
use xavt_core::train::{TrainConfig, ViewSpec};
use xavt_core::{Error, Result};

pub const KEYS_HELP: &str = "\
config keys (defaults from the toy preset):
  preset            toy | desk | full                     [toy]
  variant           cast | cava | ca2st | spatial | temporal | audio [cast]
  seed              one seed for init, shuffling and drop path [0]
  depth dim heads patch frames height width channels frame_rate
  spec_time mel_bins audio_patch audio_stride d_adapter d_bca bca_heads
  time_mlp_hidden mlp_ratio num_classes drop_path ln_eps share_projections
  window.<DIR>      space | time | space-time, e.g. window.T2S = time
  disable           comma-separated directions, e.g. A2S
  epochs batch_size accumulate base_lr warmup_epochs weight_decay layer_decay
                                                          [30 16 1 1e-3 5 0.05 0.8]
  views             TxS temporal x spatial views          [1x1]
  train_data test_data out_dir                            paths";

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub views: String,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

fn bad(msg: String) -> Error {
    Error::Config(msg)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(format!("{key}: cannot parse {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn preset(name: &str, variant: Variant) -> Result<ModelConfig> {
    match name {
        "toy" => Ok(ModelConfig::toy(variant)),
        "desk" => Ok(ModelConfig::desk(variant)),
        "full" => Ok(ModelConfig::full(variant)),
        _ => Err(bad(format!("unknown preset {name}"))),
    }
}

/// Parses `key = value` lines; `#` starts a comment. Duplicate keys are
/// rejected.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("line {}: expected key = value", n + 1)))?;
        let k = k.trim().to_string();
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(bad(format!("line {}: duplicate key {k}", n + 1)));
        }
    }
    Ok(out)
}

impl RunConfig {
    pub fn defaults() -> Self {
        Self::from_pairs(&BTreeMap::new()).expect("defaults are valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_pairs(&parse_pairs(&std::fs::read_to_string(path)?)?)
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| pairs.get(k).map(String::as_str);
        let variant = Variant::parse(get("variant").unwrap_or("cast"))?;
        let preset_name = get("preset").unwrap_or("toy").to_string();
        let mut c = RunConfig {
            model: preset(&preset_name, variant)?,
            preset: preset_name,
            train: TrainConfig::default(),
            views: "1x1".into(),
            train_data: None,
            test_data: None,
            out_dir: None,
        };
        for (k, v) in pairs {
            c.set(k, v)?;
        }
        c.model.fill_default_windows();
        c.model.validate()?;
        ViewSpec::parse(&c.views)?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "preset" | "variant" => {}
            "seed" => {
                m.seed = num(key, v)?;
                t.seed = m.seed;
            }
            "depth" => m.depth = num(key, v)?,
            "dim" => m.dim = num(key, v)?,
            "heads" => m.heads = num(key, v)?,
            "patch" => m.patch = num(key, v)?,
            "frames" => m.frames = num(key, v)?,
            "height" => m.height = num(key, v)?,
            "width" => m.width = num(key, v)?,
            "channels" => m.channels = num(key, v)?,
            "frame_rate" => m.frame_rate = num(key, v)?,
            "spec_time" => m.spec_time = num(key, v)?,
            "mel_bins" => m.mel_bins = num(key, v)?,
            "audio_patch" => m.audio_patch = num(key, v)?,
            "audio_stride" => m.audio_stride = num(key, v)?,
            "d_adapter" => m.d_adapter = num(key, v)?,
            "d_bca" => m.d_bca = num(key, v)?,
            "bca_heads" => m.bca_heads = num(key, v)?,
            "time_mlp_hidden" => m.time_mlp_hidden = num(key, v)?,
            "mlp_ratio" => m.mlp_ratio = num(key, v)?,
            "num_classes" => m.num_classes = num(key, v)?,
            "drop_path" => m.drop_path = num(key, v)?,
            "ln_eps" => m.ln_eps = num(key, v)?,
            "share_projections" => m.share_projections = flag(key, v)?,
            "disable" => {
                m.disabled.clear();
                for d in v.split(',').map(str::trim).filter(|d| !d.is_empty()) {
                    m.disabled.insert(Direction::parse(d)?);
                }
            }
            "epochs" => t.epochs = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "accumulate" => t.accumulate = num(key, v)?,
            "base_lr" => t.base_lr = num(key, v)?,
            "warmup_epochs" => t.warmup_epochs = num(key, v)?,
            "weight_decay" => t.weight_decay = num(key, v)?,
            "layer_decay" => t.layer_decay = num(key, v)?,
            "views" => self.views = v.to_string(),
            "train_data" => self.train_data = Some(v.into()),
            "test_data" => self.test_data = Some(v.into()),
            "out_dir" => self.out_dir = Some(v.into()),
            _ => match key.strip_prefix("window.") {
                Some(d) => {
                    let d = Direction::parse(d)?;
                    m.windows.insert(d, WindowShape::parse(v)?);
                }
                None => return Err(bad(format!("unknown config key {key}"))),
            },
        }
        Ok(())
    }

    /// Re-validates after command-line overrides.
    pub fn finish(&mut self) -> Result<()> {
        self.model.fill_default_windows();
        self.model.validate()?;
        ViewSpec::parse(&self.views)?;
        Ok(())
    }

    pub fn set_variant(&mut self, v: Variant) -> Result<()> {
        let mut next = preset(&self.preset, v)?;
        let m = &self.model;
        next.depth = m.depth;
        next.dim = m.dim;
        next.heads = m.heads;
        next.patch = m.patch;
        next.frames = m.frames;
        next.height = m.height;
        next.width = m.width;
        next.channels = m.channels;
        next.frame_rate = m.frame_rate;
        next.spec_time = m.spec_time;
        next.mel_bins = m.mel_bins;
        next.audio_patch = m.audio_patch;
        next.audio_stride = m.audio_stride;
        next.d_adapter = m.d_adapter;
        next.d_bca = m.d_bca;
        next.bca_heads = m.bca_heads;
        next.time_mlp_hidden = m.time_mlp_hidden;
        next.mlp_ratio = m.mlp_ratio;
        next.num_classes = m.num_classes;
        next.drop_path = m.drop_path;
        next.ln_eps = m.ln_eps;
        next.share_projections = m.share_projections;
        next.seed = m.seed;
        let dirs = v.directions();
        next.windows = m
            .windows
            .iter()
            .filter(|(d, _)| dirs.contains(d))
            .map(|(d, w)| (*d, *w))
            .collect();
        next.disabled = m.disabled.iter().copied().filter(|d| dirs.contains(d)).collect();
        self.model = next;
        self.finish()
    }

    /// Every effective key, one per line; loading the result reproduces
    /// this configuration.
    pub fn render(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("preset", self.preset.clone());
        kv("variant", m.variant.name().into());
        kv("seed", m.seed.to_string());
        kv("depth", m.depth.to_string());
        kv("dim", m.dim.to_string());
        kv("heads", m.heads.to_string());
        kv("patch", m.patch.to_string());
        kv("frames", m.frames.to_string());
        kv("height", m.height.to_string());
        kv("width", m.width.to_string());
        kv("channels", m.channels.to_string());
        kv("frame_rate", format!("{:?}", m.frame_rate));
        kv("spec_time", m.spec_time.to_string());
        kv("mel_bins", m.mel_bins.to_string());
        kv("audio_patch", m.audio_patch.to_string());
        kv("audio_stride", m.audio_stride.to_string());
        kv("d_adapter", m.d_adapter.to_string());
        kv("d_bca", m.d_bca.to_string());
        kv("bca_heads", m.bca_heads.to_string());
        kv("time_mlp_hidden", m.time_mlp_hidden.to_string());
        kv("mlp_ratio", m.mlp_ratio.to_string());
        kv("num_classes", m.num_classes.to_string());
        kv("drop_path", format!("{:?}", m.drop_path));
        kv("ln_eps", format!("{:?}", m.ln_eps));
        kv("share_projections", m.share_projections.to_string());
        for (d, w) in &m.windows {
            kv(&format!("window.{d}"), w.name().into());
        }
        let disabled: Vec<String> = m.disabled.iter().map(|d| d.to_string()).collect();
        kv("disable", disabled.join(","));
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("accumulate", t.accumulate.to_string());
        kv("base_lr", format!("{:?}", t.base_lr));
        kv("warmup_epochs", t.warmup_epochs.to_string());
        kv("weight_decay", format!("{:?}", t.weight_decay));
        kv("layer_decay", format!("{:?}", t.layer_decay));
        kv("views", self.views.clone());
        for (k, p) in [
            ("train_data", &self.train_data),
            ("test_data", &self.test_data),
            ("out_dir", &self.out_dir),
        ] {
            if let Some(p) = p {
                kv(k, p.display().to_string());
            }
        }
        s
    }
}
