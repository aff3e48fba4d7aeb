//! Cross-attention entropy and attention-map export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::attention::{window_allows, WindowShape};
use crate::bca::Direction;
use crate::checkpoint::{self, NamedTensor, DUMP_MAGIC};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::session::{AttentionRecord, Session};
use crate::synthdata::Dataset;
use crate::tensor::Tensor;
use crate::tokenizer::Layout;

#[derive(Clone, Debug, PartialEq)]
pub struct DumpEntry {
    /// `[heads, queries, keys]`.
    pub weights: Tensor<f32>,
    pub window: WindowShape,
    pub query_layout: Layout,
    pub key_layout: Layout,
}

/// Cross-attention weights of one sample, keyed by `(layer, direction)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDump {
    pub sample: String,
    pub entries: BTreeMap<(usize, String), DumpEntry>,
}

impl AttentionDump {
    /// Takes clip `clip` out of every record of an instrumented forward.
    pub fn from_records(sample: &str, records: &[AttentionRecord<f32>], clip: usize) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for r in records {
            let s = r.weights.shape();
            if clip >= s[0] {
                return Err(Error::contract(format!("clip {clip} not in a batch of {}", s[0])));
            }
            entries.insert(
                (r.layer, r.direction.clone()),
                DumpEntry {
                    weights: r.weights.index0(clip),
                    window: r.window,
                    query_layout: r.query_layout,
                    key_layout: r.key_layout,
                },
            );
        }
        Ok(Self {
            sample: sample.to_string(),
            entries,
        })
    }

    pub fn get(&self, layer: usize, direction: &str) -> Result<&DumpEntry> {
        self.entries
            .get(&(layer, direction.to_string()))
            .ok_or_else(|| Error::Lookup(format!("no attention for layer {layer} direction {direction}")))
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut out = vec![NamedTensor {
            name: "sample".into(),
            trainable: false,
            value: Tensor::new(
                vec![self.sample.len().max(1)],
                if self.sample.is_empty() {
                    vec![0.0]
                } else {
                    self.sample.bytes().map(f32::from).collect()
                },
            )
            .expect("non-empty"),
        }];
        for ((layer, dir), e) in &self.entries {
            let name = format!("layer{layer}.{dir}");
            let mut meta = vec![window_code(e.window)];
            meta.extend(layout_code(&e.query_layout));
            meta.extend(layout_code(&e.key_layout));
            out.push(NamedTensor {
                name: format!("{name}.meta"),
                trainable: false,
                value: Tensor::new(vec![meta.len()], meta).expect("non-empty"),
            });
            out.push(NamedTensor {
                name,
                trainable: false,
                value: e.weights.clone(),
            });
        }
        out
    }

    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let by_name: BTreeMap<&str, &NamedTensor> =
            tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let sample = by_name
            .get("sample")
            .map(|t| {
                t.value
                    .data()
                    .iter()
                    .filter(|&&b| b != 0.0)
                    .map(|&b| b as u8 as char)
                    .collect()
            })
            .unwrap_or_default();
        let mut entries = BTreeMap::new();
        for t in tensors {
            let Some(rest) = t.name.strip_prefix("layer") else {
                continue;
            };
            if t.name.ends_with(".meta") {
                continue;
            }
            let (layer, dir) = rest
                .split_once('.')
                .ok_or_else(|| Error::format(format!("bad dump entry {}", t.name)))?;
            let layer: usize = layer
                .parse()
                .map_err(|_| Error::format(format!("bad layer in {}", t.name)))?;
            let meta = by_name
                .get(format!("{}.meta", t.name).as_str())
                .ok_or_else(|| Error::format(format!("{} has no metadata", t.name)))?;
            let m = meta.value.data();
            if m.len() != 9 || t.value.rank() != 3 {
                return Err(Error::format(format!("malformed dump entry {}", t.name)));
            }
            entries.insert(
                (layer, dir.to_string()),
                DumpEntry {
                    weights: t.value.clone(),
                    window: window_from_code(m[0])?,
                    query_layout: layout_from_code(&m[1..5])?,
                    key_layout: layout_from_code(&m[5..9])?,
                },
            );
        }
        Ok(Self { sample, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_file(path, DUMP_MAGIC, &self.to_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(&checkpoint::read_file(path, DUMP_MAGIC)?)
    }
}

fn window_code(w: WindowShape) -> f32 {
    match w {
        WindowShape::Time => 0.0,
        WindowShape::Space => 1.0,
        WindowShape::SpaceTime => 2.0,
    }
}

fn window_from_code(c: f32) -> Result<WindowShape> {
    Ok(match c as u32 {
        0 => WindowShape::Time,
        1 => WindowShape::Space,
        2 => WindowShape::SpaceTime,
        _ => return Err(Error::format("bad window code")),
    })
}

fn layout_code(l: &Layout) -> [f32; 4] {
    match *l {
        Layout::Spatial {
            frames,
            grid_h,
            grid_w,
        } => [0.0, frames as f32, grid_h as f32, grid_w as f32],
        Layout::Temporal {
            frames,
            grid_h,
            grid_w,
        } => [1.0, frames as f32, grid_h as f32, grid_w as f32],
        Layout::Audio { time, freq } => [2.0, time as f32, freq as f32, 0.0],
    }
}

fn layout_from_code(c: &[f32]) -> Result<Layout> {
    let u = |x: f32| x as usize;
    Ok(match c[0] as u32 {
        0 => Layout::Spatial {
            frames: u(c[1]),
            grid_h: u(c[2]),
            grid_w: u(c[3]),
        },
        1 => Layout::Temporal {
            frames: u(c[1]),
            grid_h: u(c[2]),
            grid_w: u(c[3]),
        },
        2 => Layout::Audio {
            time: u(c[1]),
            freq: u(c[2]),
        },
        _ => return Err(Error::format("bad layout code")),
    })
}

/// Normalised entropy of one row over `n` admissible keys, written as
/// `1 - KL(p || uniform) / ln n` so that uniform rows give exactly 1.
pub fn row_entropy_ratio(row: &[f32], n: usize) -> f64 {
    if n <= 1 {
        return 1.0;
    }
    let total: f64 = row.iter().map(|&w| w as f64).sum();
    if total <= 0.0 {
        return 0.0;
    }
    let nf = n as f64;
    let kl: f64 = row
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| {
            let w = w as f64;
            (w / total) * ((nf * w) / total).ln()
        })
        .sum();
    (1.0 - kl / nf.ln()).clamp(0.0, 1.0)
}

/// Mean over heads, then queries, of each row's entropy divided by the
/// entropy of a uniform row over the keys its window admits.
pub fn entropy_ratio(dump: &AttentionDump, layer: usize, direction: &str) -> Result<f64> {
    let e = dump.get(layer, direction)?;
    let [heads, lq, lk]: [usize; 3] = e
        .weights
        .shape()
        .try_into()
        .map_err(|_| Error::format("dump weights must be [heads, queries, keys]"))?;
    let qpos = e.query_layout.positions();
    let kpos = e.key_layout.positions();
    if qpos.len() != lq || kpos.len() != lk {
        return Err(Error::format("dump weights disagree with their layouts"));
    }
    let admitted: Vec<usize> = qpos
        .iter()
        .map(|&q| kpos.iter().filter(|&&k| window_allows(e.window, q, k)).count())
        .collect();
    let w = e.weights.data();
    let mut per_query = vec![0.0; lq];
    for h in 0..heads {
        for (q, acc) in per_query.iter_mut().enumerate() {
            let row = &w[(h * lq + q) * lk..(h * lq + q + 1) * lk];
            *acc += row_entropy_ratio(row, admitted[q]) / heads as f64;
        }
    }
    Ok(per_query.iter().sum::<f64>() / lq as f64)
}

/// Instrumented forward of one sample.
pub fn dump_sample(model: &Model<f32>, data: &Dataset, index: usize) -> Result<AttentionDump> {
    let (video, audio, _) = data.batch(&[index])?;
    let audio = model.config.variant.uses_audio().then_some(audio);
    let mut s = Session::instrumented(&model.store);
    model.forward(&mut s, &video, audio.as_ref())?;
    AttentionDump::from_records(&format!("sample{index}"), s.records(), 0)
}

/// Per-layer entropy ratio of `direction`, averaged over the given samples.
pub fn entropy_curve(
    model: &Model<f32>,
    data: &Dataset,
    samples: &[usize],
    direction: Direction,
) -> Result<Vec<(usize, f64)>> {
    if samples.is_empty() {
        return Err(Error::contract("entropy curve over no samples"));
    }
    let depth = model.config.depth;
    let mut sums = vec![0.0; depth];
    let dir = direction.to_string();
    for &i in samples {
        let dump = dump_sample(model, data, i)?;
        for (l, acc) in sums.iter_mut().enumerate() {
            *acc += entropy_ratio(&dump, l + 1, &dir)?;
        }
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(l, s)| (l + 1, s / samples.len() as f64))
        .collect())
}

pub fn format_curve(curve: &[(usize, f64)]) -> String {
    let mut out = String::from("layer\tratio\n");
    for (l, r) in curve {
        let _ = writeln!(out, "{l}\t{r:.6}");
    }
    out
}

/// One `[grid_h, grid_w]` map per frame, jointly rescaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub frames: Vec<Vec<f64>>,
}

/// Head-averaged attention of query `query` (default: the first query token,
/// the class token where there is one) over a frame/patch key layout.
pub fn export_attention_map(
    dump: &AttentionDump,
    layer: usize,
    direction: &str,
    query: Option<usize>,
) -> Result<AttentionMap> {
    let e = dump.get(layer, direction)?;
    let (frames, gh, gw, cls) = match e.key_layout {
        Layout::Spatial {
            frames,
            grid_h,
            grid_w,
        } => (frames, grid_h, grid_w, 1),
        Layout::Temporal {
            frames,
            grid_h,
            grid_w,
        } => (frames, grid_h, grid_w, 0),
        Layout::Audio { .. } => {
            return Err(Error::contract(format!(
                "{direction} keys are spectrogram tokens, not frame patches"
            )))
        }
    };
    let s = e.weights.shape();
    let (heads, lq, lk) = (s[0], s[1], s[2]);
    let q = query.unwrap_or(0);
    if q >= lq {
        return Err(Error::contract(format!("query {q} outside 0..{lq}")));
    }
    let w = e.weights.data();
    let n = gh * gw;
    let mut maps = vec![vec![0.0; n]; frames];
    for h in 0..heads {
        let row = &w[(h * lq + q) * lk..(h * lq + q + 1) * lk];
        for (f, map) in maps.iter_mut().enumerate() {
            for (p, cell) in map.iter_mut().enumerate() {
                *cell += row[f * (n + cls) + cls + p] as f64 / heads as f64;
            }
        }
    }
    let lo = maps.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = maps.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    for v in maps.iter_mut().flatten() {
        *v = if hi > lo { (*v - lo) / (hi - lo) } else { 0.5 };
    }
    Ok(AttentionMap {
        grid_h: gh,
        grid_w: gw,
        frames: maps,
    })
}

/// Writes `{stem}_frame{f}.pgm` (binary graymap) per frame and `{stem}.tsv`
/// with one grid row per line, frames separated by `# frame f` lines.
pub fn write_attention_map(map: &AttentionMap, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut tsv = String::new();
    for (f, cells) in map.frames.iter().enumerate() {
        let mut pgm = format!("P5\n{} {}\n255\n", map.grid_w, map.grid_h).into_bytes();
        pgm.extend(cells.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        let p = dir.join(format!("{stem}_frame{f}.pgm"));
        fs::write(&p, pgm)?;
        written.push(p);
        let _ = writeln!(tsv, "# frame {f}");
        for r in 0..map.grid_h {
            let line: Vec<String> = cells[r * map.grid_w..(r + 1) * map.grid_w]
                .iter()
                .map(|v| format!("{v:.6}"))
                .collect();
            let _ = writeln!(tsv, "{}", line.join("\t"));
        }
    }
    let p = dir.join(format!("{stem}.tsv"));
    fs::write(&p, tsv)?;
    written.push(p);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_reference_values() {
        assert_eq!(row_entropy_ratio(&[0.25; 4], 4), 1.0);
        assert_eq!(row_entropy_ratio(&[1.0, 0.0, 0.0], 3), 0.0);
        let r = row_entropy_ratio(&[1.0 / 3.0, 2.0 / 3.0], 2);
        assert!((r - 0.9183).abs() < 1e-3, "{r}");
    }
}
