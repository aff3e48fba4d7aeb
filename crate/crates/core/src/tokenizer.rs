//! Video and spectrogram tokenizers.
//!
//! Three token streams come out of a clip:
//! - spatial: every even frame cut into `p x p` patches, one row per frame,
//!   a class token in front of each row;
//! - temporal: frame pairs cut into `2 x p x p` tubes, one row per clip, no
//!   class token;
//! - audio: overlapping `patch x patch` spectrogram windows, time-major with
//!   frequency varying fastest, one class token per clip.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::param::ParamId;
use crate::session::Session;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct VideoBatch<F> {
    /// `[B, 2T, H, W, C]`, values in `[0, 1]`.
    pub data: Tensor<F>,
    pub frame_rate: f64,
}

#[derive(Clone, Debug)]
pub struct SpectrogramBatch<F> {
    /// `[B, T_spec, mel_bins]`.
    pub data: Tensor<F>,
    pub duration_s: f64,
}

impl<F: Real> VideoBatch<F> {
    pub fn new(data: Tensor<F>, frame_rate: f64) -> Result<Self> {
        let s = data.shape();
        if s.len() != 5 {
            return Err(Error::config(format!("video must be rank 5, got {s:?}")));
        }
        if s[1] % 2 != 0 {
            return Err(Error::config(format!("frame count {} must be even", s[1])));
        }
        if !(frame_rate > 0.0) {
            return Err(Error::config("frame rate must be positive"));
        }
        Ok(Self { data, frame_rate })
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    /// Number of frames `2T`.
    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn duration_s(&self) -> f64 {
        self.frames() as f64 / self.frame_rate
    }
}

impl<F: Real> SpectrogramBatch<F> {
    pub fn new(data: Tensor<F>, duration_s: f64) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::config(format!(
                "spectrogram must be rank 3, got {:?}",
                data.shape()
            )));
        }
        if !(duration_s > 0.0) {
            return Err(Error::config("spectrogram duration must be positive"));
        }
        Ok(Self { data, duration_s })
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn time_frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn mel_bins(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Per-clip token layout of a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Rows are frames; each row is `[cls, patches..]`.
    Spatial { frames: usize, grid_h: usize, grid_w: usize },
    /// One row per clip of `frames * grid_h * grid_w` tube tokens, frame-major.
    Temporal { frames: usize, grid_h: usize, grid_w: usize },
    /// One row per clip: `[cls, (time, freq)..]` with frequency fastest.
    Audio { time: usize, freq: usize },
}

/// Where one token sits in its clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenPos {
    /// Class token; spatial class tokens belong to a frame.
    Cls { frame: Option<usize> },
    Patch { frame: usize, patch: usize },
    Audio { time: usize, freq: usize },
}

impl Layout {
    pub fn has_cls(&self) -> bool {
        !matches!(self, Layout::Temporal { .. })
    }

    /// Rows of the row-form tensor per clip.
    pub fn rows_per_clip(&self) -> usize {
        match *self {
            Layout::Spatial { frames, .. } => frames,
            _ => 1,
        }
    }

    pub fn tokens_per_row(&self) -> usize {
        match *self {
            Layout::Spatial { grid_h, grid_w, .. } => 1 + grid_h * grid_w,
            Layout::Temporal {
                frames,
                grid_h,
                grid_w,
            } => frames * grid_h * grid_w,
            Layout::Audio { time, freq } => 1 + time * freq,
        }
    }

    pub fn clip_len(&self) -> usize {
        self.rows_per_clip() * self.tokens_per_row()
    }

    /// Frames (or spectrogram time positions) along the time axis.
    pub fn time_steps(&self) -> usize {
        match *self {
            Layout::Spatial { frames, .. } | Layout::Temporal { frames, .. } => frames,
            Layout::Audio { time, .. } => time,
        }
    }

    pub fn is_visual(&self) -> bool {
        !matches!(self, Layout::Audio { .. })
    }

    /// Token positions in clip order.
    pub fn positions(&self) -> Vec<TokenPos> {
        match *self {
            Layout::Spatial {
                frames,
                grid_h,
                grid_w,
            } => {
                let n = grid_h * grid_w;
                let mut v = Vec::with_capacity(frames * (n + 1));
                for f in 0..frames {
                    v.push(TokenPos::Cls { frame: Some(f) });
                    v.extend((0..n).map(|p| TokenPos::Patch { frame: f, patch: p }));
                }
                v
            }
            Layout::Temporal {
                frames,
                grid_h,
                grid_w,
            } => {
                let n = grid_h * grid_w;
                (0..frames * n)
                    .map(|i| TokenPos::Patch {
                        frame: i / n,
                        patch: i % n,
                    })
                    .collect()
            }
            Layout::Audio { time, freq } => std::iter::once(TokenPos::Cls { frame: None })
                .chain((0..time * freq).map(|i| TokenPos::Audio {
                    time: i / freq,
                    freq: i % freq,
                }))
                .collect(),
        }
    }
}

/// A batch of token embeddings living on a session's tape.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    /// Row form: `[clips * rows_per_clip, tokens_per_row, D]`.
    pub tokens: Var,
    pub layout: Layout,
    pub clips: usize,
}

impl TokenSequence {
    pub fn rows(&self) -> usize {
        self.clips * self.layout.rows_per_clip()
    }

    /// Clip form `[clips, clip_len, D]` of the same tokens.
    pub fn clip_form<F: Real>(&self, s: &mut Session<'_, F>) -> Result<Var> {
        if self.layout.rows_per_clip() == 1 {
            return Ok(self.tokens);
        }
        let d = s.tape.shape(self.tokens)[2];
        s.tape
            .reshape(self.tokens, &[self.clips, self.layout.clip_len(), d])
    }

    /// Rebuilds a sequence from a clip-form tensor.
    pub fn from_clip_form<F: Real>(
        s: &mut Session<'_, F>,
        clip: Var,
        layout: Layout,
        clips: usize,
    ) -> Result<Self> {
        let d = s.tape.shape(clip)[2];
        let tokens = if layout.rows_per_clip() == 1 {
            clip
        } else {
            s.tape.reshape(
                clip,
                &[clips * layout.rows_per_clip(), layout.tokens_per_row(), d],
            )?
        };
        Ok(Self {
            tokens,
            layout,
            clips,
        })
    }

    pub fn with_tokens(&self, tokens: Var) -> Self {
        Self { tokens, ..*self }
    }
}

/// Frozen patch projection plus embeddings for one path.
#[derive(Clone, Copy, Debug)]
pub struct PatchEmbed {
    pub weight: ParamId,
    pub bias: ParamId,
    pub pos: ParamId,
    pub cls: Option<ParamId>,
}

/// Overlapping-window count along one axis.
pub fn window_count(extent: usize, patch: usize, stride: usize) -> Result<usize> {
    if patch == 0 || stride == 0 {
        return Err(Error::config("patch and stride must be positive"));
    }
    if extent < patch {
        return Err(Error::config(format!(
            "extent {extent} smaller than patch {patch}"
        )));
    }
    Ok((extent - patch) / stride + 1)
}

fn check_divisible(h: usize, w: usize, p: usize) -> Result<()> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::config(format!(
            "spatial extents {h}x{w} not divisible by patch {p}"
        )));
    }
    Ok(())
}

/// Patches of the even frames: `[B*T, N, p*p*C]`, each patch flattened as
/// `(row, col, channel)`.
pub fn frame_patches<F: Real>(video: &Tensor<F>, p: usize) -> Result<Tensor<F>> {
    let &[b, ft, h, w, c] = video.shape() else {
        return Err(Error::config("video must be rank 5"));
    };
    check_divisible(h, w, p)?;
    let t = ft / 2;
    let (gh, gw) = (h / p, w / p);
    let v = video.data();
    let mut out = Vec::with_capacity(b * t * gh * gw * p * p * c);
    for bi in 0..b {
        for ti in 0..t {
            let frame = (bi * ft + 2 * ti) * h * w * c;
            for py in 0..gh {
                for px in 0..gw {
                    for y in 0..p {
                        let row = frame + ((py * p + y) * w + px * p) * c;
                        out.extend_from_slice(&v[row..row + p * c]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b * t, gh * gw, p * p * c], out)
}

/// Tubes over frame pairs `(2f, 2f+1)`: `[B, T*N, 2*p*p*C]`, flattened as
/// `(dt, row, col, channel)`.
pub fn tube_patches<F: Real>(video: &Tensor<F>, p: usize) -> Result<Tensor<F>> {
    let &[b, ft, h, w, c] = video.shape() else {
        return Err(Error::config("video must be rank 5"));
    };
    check_divisible(h, w, p)?;
    let t = ft / 2;
    let (gh, gw) = (h / p, w / p);
    let v = video.data();
    let mut out = Vec::with_capacity(b * ft * h * w * c);
    for bi in 0..b {
        for ti in 0..t {
            for py in 0..gh {
                for px in 0..gw {
                    for dt in 0..2 {
                        let frame = (bi * ft + 2 * ti + dt) * h * w * c;
                        for y in 0..p {
                            let row = frame + ((py * p + y) * w + px * p) * c;
                            out.extend_from_slice(&v[row..row + p * c]);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, t * gh * gw, 2 * p * p * c], out)
}

/// Inverse of [`tube_patches`].
pub fn untube<F: Real>(tubes: &Tensor<F>, shape: [usize; 5], p: usize) -> Result<Tensor<F>> {
    let [b, ft, h, w, c] = shape;
    check_divisible(h, w, p)?;
    let (gh, gw) = (h / p, w / p);
    let mut out = vec![F::zero(); b * ft * h * w * c];
    let mut src = tubes.data().iter();
    for bi in 0..b {
        for ti in 0..ft / 2 {
            for py in 0..gh {
                for px in 0..gw {
                    for dt in 0..2 {
                        let frame = (bi * ft + 2 * ti + dt) * h * w * c;
                        for y in 0..p {
                            let row = frame + ((py * p + y) * w + px * p) * c;
                            for o in &mut out[row..row + p * c] {
                                *o = *src.next().ok_or_else(|| Error::format("short tube tensor"))?;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Overlapping spectrogram windows: `[B, M, patch*patch]` with
/// `M = count_time * count_freq`, frequency fastest.
pub fn audio_patches<F: Real>(
    spec: &Tensor<F>,
    patch: usize,
    stride: usize,
) -> Result<(Tensor<F>, usize, usize)> {
    let &[b, ts, om] = spec.shape() else {
        return Err(Error::config("spectrogram must be rank 3"));
    };
    let nt = window_count(ts, patch, stride)?;
    let nf = window_count(om, patch, stride)?;
    let v = spec.data();
    let mut out = Vec::with_capacity(b * nt * nf * patch * patch);
    for bi in 0..b {
        for it in 0..nt {
            for jf in 0..nf {
                for dt in 0..patch {
                    let row = (bi * ts + it * stride + dt) * om + jf * stride;
                    out.extend_from_slice(&v[row..row + patch]);
                }
            }
        }
    }
    Ok((Tensor::new(vec![b, nt * nf, patch * patch], out)?, nt, nf))
}

fn project<F: Real>(
    s: &mut Session<'_, F>,
    patches: Tensor<F>,
    embed: &PatchEmbed,
) -> Result<Var> {
    let x = s.constant(patches);
    let w = s.param(embed.weight);
    let b = s.param(embed.bias);
    let y = s.tape.matmul(x, w)?;
    s.tape.add(y, b)
}

fn prepend_cls<F: Real>(s: &mut Session<'_, F>, x: Var, cls: ParamId) -> Result<Var> {
    let rows = s.tape.shape(x)[0];
    let d = s.tape.shape(x)[2];
    let c = s.param(cls);
    let c = s.tape.reshape(c, &[1, 1, d])?;
    let c = s.tape.index_select(c, &vec![0; rows])?;
    s.tape.concat(&[c, x], 1)
}

pub fn tokenize_spatial<F: Real>(
    s: &mut Session<'_, F>,
    video: &VideoBatch<F>,
    p: usize,
    embed: &PatchEmbed,
) -> Result<TokenSequence> {
    let shape = video.data.shape();
    let patches = frame_patches(&video.data, p)?;
    let x = project(s, patches, embed)?;
    let cls = embed
        .cls
        .ok_or_else(|| Error::config("spatial path needs a class token"))?;
    let x = prepend_cls(s, x, cls)?;
    let pos = s.param(embed.pos);
    let x = s.tape.add(x, pos)?;
    Ok(TokenSequence {
        tokens: x,
        layout: Layout::Spatial {
            frames: shape[1] / 2,
            grid_h: shape[2] / p,
            grid_w: shape[3] / p,
        },
        clips: shape[0],
    })
}

pub fn tokenize_temporal<F: Real>(
    s: &mut Session<'_, F>,
    video: &VideoBatch<F>,
    p: usize,
    embed: &PatchEmbed,
) -> Result<TokenSequence> {
    let shape = video.data.shape();
    let tubes = tube_patches(&video.data, p)?;
    let x = project(s, tubes, embed)?;
    let pos = s.param(embed.pos);
    let x = s.tape.add(x, pos)?;
    Ok(TokenSequence {
        tokens: x,
        layout: Layout::Temporal {
            frames: shape[1] / 2,
            grid_h: shape[2] / p,
            grid_w: shape[3] / p,
        },
        clips: shape[0],
    })
}

pub fn tokenize_audio<F: Real>(
    s: &mut Session<'_, F>,
    spec: &SpectrogramBatch<F>,
    patch: usize,
    stride: usize,
    embed: &PatchEmbed,
) -> Result<TokenSequence> {
    let (patches, nt, nf) = audio_patches(&spec.data, patch, stride)?;
    let x = project(s, patches, embed)?;
    let cls = embed
        .cls
        .ok_or_else(|| Error::config("audio path needs a class token"))?;
    let x = prepend_cls(s, x, cls)?;
    let pos = s.param(embed.pos);
    let x = s.tape.add(x, pos)?;
    Ok(TokenSequence {
        tokens: x,
        layout: Layout::Audio { time: nt, freq: nf },
        clips: spec.batch(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeInterval {
    pub start_s: f64,
    pub end_s: f64,
}

impl TimeInterval {
    pub fn new(start_s: f64, end_s: f64) -> Result<Self> {
        if !(start_s >= 0.0 && start_s < end_s) {
            return Err(Error::contract(format!(
                "invalid interval [{start_s}, {end_s})"
            )));
        }
        Ok(Self { start_s, end_s })
    }
}

/// `t` back-to-back intervals `[i/rate, (i+1)/rate)`.
pub fn frame_intervals(t: usize, rate: f64) -> Vec<TimeInterval> {
    (0..t)
        .map(|i| TimeInterval {
            start_s: i as f64 / rate,
            end_s: (i + 1) as f64 / rate,
        })
        .collect()
}

/// Two-layer perceptron over `(start, end)` pairs.
#[derive(Clone, Copy, Debug)]
pub struct TimeMlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

pub fn time_interval_embed<F: Real>(
    s: &mut Session<'_, F>,
    intervals: &[TimeInterval],
    mlp: &TimeMlp,
) -> Result<Var> {
    if intervals.is_empty() {
        return Err(Error::contract("no intervals"));
    }
    let mut raw = Vec::with_capacity(intervals.len() * 2);
    for iv in intervals {
        TimeInterval::new(iv.start_s, iv.end_s)?;
        raw.push(F::lit(iv.start_s));
        raw.push(F::lit(iv.end_s));
    }
    let x = s.constant(Tensor::new(vec![intervals.len(), 2], raw)?);
    let (w1, b1, w2, b2) = (s.param(mlp.w1), s.param(mlp.b1), s.param(mlp.w2), s.param(mlp.b2));
    let h = s.tape.matmul(x, w1)?;
    let h = s.tape.add(h, b1)?;
    let h = s.tape.gelu(h);
    let y = s.tape.matmul(h, w2)?;
    s.tape.add(y, b2)
}

/// Row of the `[t interval embeddings; class row]` table each token of a clip
/// reads. Class tokens read row `t`.
pub fn time_assignment(layout: &Layout, t: usize) -> Result<Vec<usize>> {
    if t == 0 {
        return Err(Error::contract("zero time groups"));
    }
    match *layout {
        Layout::Spatial { frames, .. } | Layout::Temporal { frames, .. } if frames != t => {
            Err(Error::contract(format!(
                "{t} time groups for a {frames}-frame layout"
            )))
        }
        Layout::Audio { time, .. } if time < t => Err(Error::contract(format!(
            "cannot split {time} audio time positions into {t} groups"
        ))),
        _ => Ok(layout
            .positions()
            .into_iter()
            .map(|pos| match pos {
                TokenPos::Cls { .. } => t,
                TokenPos::Patch { frame, .. } => frame,
                TokenPos::Audio { time, .. } => match *layout {
                    Layout::Audio { time: total, .. } => time * t / total,
                    _ => unreachable!(),
                },
            })
            .collect()),
    }
}

/// Per-token time-embedding matrix `[clip_len, d]` built from `t` interval
/// embeddings and a learned class row `[1, d]`.
pub fn assign_time_embeddings<F: Real>(
    s: &mut Session<'_, F>,
    layout: &Layout,
    embeds: Var,
    cls_row: Var,
) -> Result<Var> {
    let t = s.tape.shape(embeds)[0];
    let idx = time_assignment(layout, t)?;
    let table = s.tape.concat(&[embeds, cls_row], 0)?;
    s.tape.index_select(table, &idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enumerate_windows(extent: usize, patch: usize, stride: usize) -> usize {
        (0..).take_while(|k| k * stride + patch <= extent).count()
    }

    #[test]
    fn audio_window_counts() {
        assert_eq!(window_count(128, 16, 10).unwrap(), 12);
        assert_eq!(window_count(1024, 16, 10).unwrap(), 101);
        assert_eq!(window_count(1024, 16, 10).unwrap() * 12, 1212);
        for extent in 16..=300 {
            assert_eq!(
                window_count(extent, 16, 10).unwrap(),
                enumerate_windows(extent, 16, 10),
                "extent {extent}"
            );
        }
        assert!(window_count(15, 16, 10).is_err());
        // stride == patch tiles without overlap
        assert_eq!(window_count(64, 16, 16).unwrap(), 4);
    }

    #[test]
    fn spatial_patch_count_at_full_scale() {
        let layout = Layout::Spatial {
            frames: 8,
            grid_h: 224 / 16,
            grid_w: 224 / 16,
        };
        assert_eq!(layout.tokens_per_row(), 197);
        let temporal = Layout::Temporal {
            frames: 8,
            grid_h: 14,
            grid_w: 14,
        };
        assert_eq!(temporal.clip_len(), 1568);
    }

    #[test]
    fn tube_roundtrip_is_exact() {
        let shape = [2, 4, 8, 12, 3];
        let video = Tensor::<f32>::from_fn(&shape, |i| (i as f32 * 0.37).sin());
        let tubes = tube_patches(&video, 4).unwrap();
        assert_eq!(tubes.shape(), &[2, 2 * 6, 2 * 4 * 4 * 3]);
        let back = untube(&tubes, shape, 4).unwrap();
        assert_eq!(back, video);
    }

    #[test]
    fn indivisible_extent_is_config_error() {
        let video = Tensor::<f32>::zeros(&[1, 2, 10, 8, 1]);
        assert!(matches!(frame_patches(&video, 4), Err(Error::Config(_))));
    }

    #[test]
    fn frame_patches_take_even_frames() {
        let shape = [1, 4, 2, 2, 1];
        let video = Tensor::<f32>::from_fn(&shape, |i| i as f32);
        let p = frame_patches(&video, 2).unwrap();
        assert_eq!(p.shape(), &[2, 1, 4]);
        assert_eq!(p.data(), &[0.0, 1.0, 2.0, 3.0, 8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn audio_time_partition_is_balanced() {
        let layout = Layout::Audio { time: 101, freq: 12 };
        let idx = time_assignment(&layout, 8).unwrap();
        assert_eq!(idx[0], 8);
        let mut sizes = [0usize; 8];
        for (k, pos) in layout.positions().iter().enumerate() {
            if let TokenPos::Audio { freq: 0, .. } = pos {
                sizes[idx[k]] += 1;
            }
        }
        let (lo, hi) = (101 / 8, 101usize.div_ceil(8));
        assert!(sizes.iter().all(|&n| n == lo || n == hi), "{sizes:?}");
        assert_eq!(sizes.iter().sum::<usize>(), 101);
        // contiguous groups
        let groups: Vec<usize> = idx[1..].iter().step_by(12).copied().collect();
        assert!(groups.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn spatial_assignment_is_constant_per_frame() {
        let layout = Layout::Spatial {
            frames: 8,
            grid_h: 14,
            grid_w: 14,
        };
        let idx = time_assignment(&layout, 8).unwrap();
        assert_eq!(idx.len(), 8 * 197);
        for f in 0..8 {
            let row = &idx[f * 197..(f + 1) * 197];
            assert_eq!(row[0], 8);
            assert!(row[1..].iter().all(|&i| i == f));
        }
        assert!(time_assignment(&layout, 4).is_err());
        let single = Layout::Spatial {
            frames: 1,
            grid_h: 2,
            grid_w: 2,
        };
        assert!(time_assignment(&single, 1).unwrap()[1..].iter().all(|&i| i == 0));
    }

    #[test]
    fn frame_intervals_do_not_overlap() {
        let iv = frame_intervals(8, 4.0);
        assert_eq!(iv.len(), 8);
        for w in iv.windows(2) {
            assert_eq!(w[0].end_s, w[1].start_s);
            assert!(w[0].start_s < w[0].end_s);
        }
        assert!(TimeInterval::new(1.0, 1.0).is_err());
    }
}
