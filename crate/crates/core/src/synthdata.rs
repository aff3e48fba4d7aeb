//! Synthetic audio-visual clips and audio corruptions.
//!
//! The visual factor is a bright square following one of several motion
//! templates; the audio factor is a tone occupying one mel band with a
//! class-specific on/off rhythm. Labels depend on either factor or on both.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use crate::tokenizer::{SpectrogramBatch, VideoBatch};

pub const CLIP_MAGIC: [u8; 4] = *b"XAVC";
pub const CLIP_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coupling {
    VisualOnly,
    AudioOnly,
    /// `label = (v + a) mod num_classes`.
    Xor,
}

impl Coupling {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "visual" | "visual-only" => Ok(Coupling::VisualOnly),
            "audio" | "audio-only" => Ok(Coupling::AudioOnly),
            "xor" | "xor-coupled" => Ok(Coupling::Xor),
            _ => Err(Error::config(format!("unknown coupling {s}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Coupling::VisualOnly => "visual",
            Coupling::AudioOnly => "audio",
            Coupling::Xor => "xor",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub coupling: Coupling,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub frame_rate: f64,
    pub spec_time: usize,
    pub mel_bins: usize,
    /// Standard deviation of the additive noise (clamped to `[0, 1]`).
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Two visual and two audio templates, label = XOR, toy geometry.
    pub fn xor2x2(samples_per_class: usize, seed: u64) -> Self {
        Self {
            num_classes: 2,
            samples_per_class,
            coupling: Coupling::Xor,
            frames: 4,
            height: 16,
            width: 16,
            channels: 3,
            frame_rate: 4.0,
            spec_time: 32,
            mel_bins: 32,
            noise: 0.3,
            seed,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.frames as f64 / self.frame_rate
    }

    /// Number of visual and audio templates.
    pub fn factors(&self) -> (usize, usize) {
        (self.num_classes, self.num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_classes < 2 || self.samples_per_class == 0 {
            return bad("need at least two classes and one sample per class");
        }
        if self.num_classes > 4 {
            return bad("at most four motion templates are available");
        }
        if self.frames < 2 || self.height < 8 || self.width < 8 || self.channels == 0 {
            return bad("clip must have at least 2 frames of 8x8 pixels");
        }
        if self.mel_bins < 4 * self.num_classes || self.spec_time < 4 {
            return bad("spectrogram too small for the tone bands");
        }
        if !(self.frame_rate > 0.0) || !(self.noise >= 0.0) {
            return bad("frame_rate must be positive and noise non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[2T, H, W, C]`.
    pub video: Tensor<f32>,
    /// `[T_spec, mel_bins]`.
    pub audio: Tensor<f32>,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub frame_rate: f64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples[0].video.shape()[0] as f64 / self.frame_rate
    }

    /// Stacks the listed samples into model inputs.
    pub fn batch(&self, idx: &[usize]) -> Result<(VideoBatch<f32>, SpectrogramBatch<f32>, Vec<usize>)> {
        if idx.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let first = &self.samples[idx[0]];
        let (vs, as_) = (first.video.shape().to_vec(), first.audio.shape().to_vec());
        let mut v = Vec::with_capacity(idx.len() * first.video.len());
        let mut a = Vec::with_capacity(idx.len() * first.audio.len());
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::contract(format!("sample {i} out of range")))?;
            if s.video.shape() != vs.as_slice() || s.audio.shape() != as_.as_slice() {
                return Err(Error::contract("samples differ in geometry"));
            }
            v.extend_from_slice(s.video.data());
            a.extend_from_slice(s.audio.data());
            labels.push(s.label);
        }
        let mut vshape = vec![idx.len()];
        vshape.extend_from_slice(&vs);
        let mut ashape = vec![idx.len()];
        ashape.extend_from_slice(&as_);
        let video = VideoBatch::new(Tensor::new(vshape, v)?, self.frame_rate)?;
        let duration = video.duration_s();
        let audio = SpectrogramBatch::new(Tensor::new(ashape, a)?, duration)?;
        Ok((video, audio, labels))
    }
}

/// Factor pair `(v, a)` of the `i`-th sample and its label.
fn factors_of(spec: &SynthSpec, i: usize, r: &mut impl Rng) -> (usize, usize, usize) {
    let k = spec.num_classes;
    let label = i % k;
    let j = i / k;
    match spec.coupling {
        Coupling::VisualOnly => (label, r.random_range(0..k), label),
        Coupling::AudioOnly => (r.random_range(0..k), label, label),
        Coupling::Xor => {
            // cycle through the k pairs with (v + a) mod k == label
            let v = j % k;
            let a = (label + k - v) % k;
            (v, a, label)
        }
    }
}

/// Start corner (fractions of the free range) and direction per template.
const MOTIONS: [((f64, f64), (f64, f64)); 4] = [
    ((0.0, 0.0), (0.0, 1.0)),  // top edge, left to right
    ((1.0, 1.0), (0.0, -1.0)), // bottom edge, right to left
    ((0.0, 1.0), (1.0, 0.0)),  // right edge, downwards
    ((1.0, 0.0), (-1.0, 0.0)), // left edge, upwards
];

fn draw_video(spec: &SynthSpec, v: usize, r: &mut impl Rng) -> Vec<f64> {
    let (f, h, w, c) = (spec.frames, spec.height, spec.width, spec.channels);
    let side = (h.min(w) / 4).max(2);
    let (fy, fx) = ((h - side) as f64, (w - side) as f64);
    let ((sy, sx), (dy, dx)) = MOTIONS[v];
    let jitter_y = r.random_range(-1i64..=1) as f64;
    let jitter_x = r.random_range(-1i64..=1) as f64;
    let mut out = vec![0.0; f * h * w * c];
    for t in 0..f {
        let prog = if f > 1 { t as f64 / (f - 1) as f64 } else { 0.0 };
        let y0 = (sy * fy + dy * prog * fy + jitter_y).round().clamp(0.0, fy) as usize;
        let x0 = (sx * fx + dx * prog * fx + jitter_x).round().clamp(0.0, fx) as usize;
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                for ch in 0..c {
                    out[((t * h + y) * w + x) * c + ch] = 1.0;
                }
            }
        }
    }
    out
}

fn draw_audio(spec: &SynthSpec, a: usize, r: &mut impl Rng) -> Vec<f64> {
    let (t, m) = (spec.spec_time, spec.mel_bins);
    let band = m / spec.num_classes;
    let lo = a * band + band / 4;
    let hi = (a + 1) * band - band / 4;
    // rhythm period in frames: class a blinks with period 2(a+2)
    let period = 2 * (a + 2);
    let phase = r.random_range(0..period);
    let mut out = vec![0.0; t * m];
    for ti in 0..t {
        if ((ti + phase) / (period / 2)) % 2 == 0 {
            for mi in lo..hi.max(lo + 1) {
                out[ti * m + mi] = 0.8;
            }
        }
    }
    out
}

fn add_noise(data: &mut [f64], sigma: f64, r: &mut impl Rng) {
    if sigma == 0.0 {
        return;
    }
    let n = Normal::new(0.0, sigma).expect("valid sigma");
    for x in data.iter_mut() {
        *x = (*x + n.sample(r)).clamp(0.0, 1.0);
    }
}

pub fn generate_sample(spec: &SynthSpec, i: usize) -> Sample {
    let mut r = rng::indexed_stream(spec.seed, "data/sample", i as u64);
    let (v, a, label) = factors_of(spec, i, &mut r);
    let mut video = draw_video(spec, v, &mut r);
    let mut audio = draw_audio(spec, a, &mut r);
    add_noise(&mut video, spec.noise, &mut r);
    add_noise(&mut audio, spec.noise, &mut r);
    let to32 = |d: Vec<f64>| d.into_iter().map(|x| x as f32).collect::<Vec<_>>();
    Sample {
        video: Tensor::new(
            vec![spec.frames, spec.height, spec.width, spec.channels],
            to32(video),
        )
        .expect("geometry checked"),
        audio: Tensor::new(vec![spec.spec_time, spec.mel_bins], to32(audio)).expect("geometry checked"),
        label,
    }
}

/// Factor indices `(v, a)` of sample `i`, for tests of the label construction.
pub fn sample_factors(spec: &SynthSpec, i: usize) -> (usize, usize) {
    let mut r = rng::indexed_stream(spec.seed, "data/sample", i as u64);
    let (v, a, _) = factors_of(spec, i, &mut r);
    (v, a)
}

pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.num_classes * spec.samples_per_class;
    Ok(Dataset {
        samples: (0..n).map(|i| generate_sample(spec, i)).collect(),
        num_classes: spec.num_classes,
        frame_rate: spec.frame_rate,
    })
}

pub fn encode_clip(s: &Sample) -> Result<Vec<u8>> {
    let vs = s.video.shape();
    let as_ = s.audio.shape();
    if vs.len() != 4 || as_.len() != 2 {
        return Err(Error::contract("clip sample must be [2T,H,W,C] and [T_spec,mel]"));
    }
    let label = u32::try_from(s.label).map_err(|_| Error::contract("label too large"))?;
    let mut out = Vec::with_capacity(48 + 4 * (s.video.len() + s.audio.len()));
    out.extend_from_slice(&CLIP_MAGIC);
    out.extend_from_slice(&CLIP_VERSION.to_le_bytes());
    for d in [1, vs[0], vs[1], vs[2], vs[3], as_[0], as_[1]] {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in s.video.data().iter().chain(s.audio.data()) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out.extend_from_slice(&label.to_le_bytes());
    Ok(out)
}

pub fn decode_clip(bytes: &[u8]) -> Result<Sample> {
    let header = 4 + 4 + 7 * 8;
    if bytes.len() < header || bytes[..4] != CLIP_MAGIC {
        return Err(Error::format("not an XAVC clip"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CLIP_VERSION {
        return Err(Error::format(format!("unsupported clip version {version}")));
    }
    let dims: Vec<usize> = (0..7)
        .map(|i| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap()) as usize)
        .collect();
    if dims[0] != 1 {
        return Err(Error::format("clip files hold exactly one sample"));
    }
    let nv = dims[1] * dims[2] * dims[3] * dims[4];
    let na = dims[5] * dims[6];
    if bytes.len() != header + 4 * (nv + na) + 4 {
        return Err(Error::format("clip length does not match its header"));
    }
    let reals: Vec<f32> = bytes[header..header + 4 * (nv + na)]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let label = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap()) as usize;
    Ok(Sample {
        video: Tensor::new(dims[1..5].to_vec(), reals[..nv].to_vec())?,
        audio: Tensor::new(dims[5..7].to_vec(), reals[nv..].to_vec())?,
        label,
    })
}

/// Writes one clip file per sample plus `index.tsv` (`path \t label`).
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut index = String::new();
    for (i, s) in data.samples.iter().enumerate() {
        let name = format!("clip_{i:05}.xavc");
        fs::write(dir.join(&name), encode_clip(s)?)?;
        index.push_str(&format!("{name}\t{}\n", s.label));
    }
    let path = dir.join(INDEX_FILE);
    let mut f = fs::File::create(&path)?;
    f.write_all(index.as_bytes())?;
    Ok(path)
}

/// Reads an index file; relative clip paths are resolved against its
/// directory.
pub fn read_dataset(index: &Path, num_classes: usize, frame_rate: f64) -> Result<Dataset> {
    let base = index.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(index)?;
    let mut samples = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (path, label) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(format!("{}:{}: expected path<TAB>label", index.display(), n + 1)))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| Error::format(format!("{}:{}: bad label", index.display(), n + 1)))?;
        let s = decode_clip(&fs::read(base.join(path))?)?;
        if s.label != label {
            return Err(Error::format(format!("{path}: index label {label} but file says {}", s.label)));
        }
        if label >= num_classes {
            return Err(Error::format(format!("{path}: label {label} outside 0..{num_classes}")));
        }
        samples.push(s);
    }
    if samples.is_empty() {
        return Err(Error::format(format!("{} lists no clips", index.display())));
    }
    Ok(Dataset {
        samples,
        num_classes,
        frame_rate,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CorruptionKind {
    /// Circular time shift in seconds, positive delays the audio.
    Misalignment { shift_s: f64 },
    /// Zeroes this fraction of time frames.
    Dropout { rate: f64 },
    Gaussian { sigma: f64 },
    Pink { sigma: f64 },
}

impl CorruptionKind {
    /// `misalign:S`, `misalign` (shift drawn from [-2, 2] s), `dropout:R`,
    /// `gaussian:S`, `pink:S`.
    pub fn parse(s: &str, seed: u64) -> Result<Self> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        let num = |default: Option<f64>| -> Result<f64> {
            match arg {
                Some(a) => a
                    .parse::<f64>()
                    .map_err(|_| Error::config(format!("bad corruption argument {a}"))),
                None => default.ok_or_else(|| Error::config(format!("{kind} needs an argument"))),
            }
        };
        let k = match kind {
            "misalign" | "misalignment" => {
                let drawn = rng::stream(seed, "corrupt/shift").random_range(-2.0..=2.0);
                CorruptionKind::Misalignment {
                    shift_s: num(Some(drawn))?,
                }
            }
            "dropout" => CorruptionKind::Dropout { rate: num(Some(0.2))? },
            "gaussian" => CorruptionKind::Gaussian { sigma: num(None)? },
            "pink" => CorruptionKind::Pink { sigma: num(None)? },
            _ => return Err(Error::config(format!("unknown corruption {kind}"))),
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            CorruptionKind::Misalignment { shift_s } => shift_s.is_finite() && shift_s.abs() <= 2.0,
            CorruptionKind::Dropout { rate } => (0.0..=1.0).contains(&rate),
            CorruptionKind::Gaussian { sigma } | CorruptionKind::Pink { sigma } => {
                sigma.is_finite() && sigma >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("corruption parameters out of range: {self:?}")))
        }
    }
}

/// Applies a corruption to every spectrogram of the batch; each batch element
/// draws from its own stream.
pub fn corrupt(
    audio: &SpectrogramBatch<f32>,
    kind: CorruptionKind,
    seed: u64,
) -> Result<SpectrogramBatch<f32>> {
    kind.validate()?;
    let (b, t, m) = (audio.batch(), audio.time_frames(), audio.mel_bins());
    if let CorruptionKind::Misalignment { shift_s } = kind {
        if shift_s.abs() > audio.duration_s {
            return Err(Error::config("shift longer than the clip"));
        }
    }
    let mut data = audio.data.data().to_vec();
    for bi in 0..b {
        let clip = &mut data[bi * t * m..(bi + 1) * t * m];
        let mut r = rng::indexed_stream(seed, "corrupt", bi as u64);
        match kind {
            CorruptionKind::Misalignment { shift_s } => {
                let k = (shift_s * t as f64 / audio.duration_s).round() as i64;
                let k = k.rem_euclid(t as i64) as usize;
                // delay by k frames: out[ti] = in[ti - k]
                clip.rotate_right(k * m);
            }
            CorruptionKind::Dropout { rate } => {
                let n = (rate * t as f64).round() as usize;
                for ti in index::sample(&mut r, t, n) {
                    clip[ti * m..(ti + 1) * m].fill(0.0);
                }
            }
            CorruptionKind::Gaussian { sigma } => {
                if sigma > 0.0 {
                    let dist = Normal::new(0.0, sigma).expect("valid sigma");
                    for x in clip.iter_mut() {
                        *x += dist.sample(&mut r) as f32;
                    }
                }
            }
            CorruptionKind::Pink { sigma } => {
                if sigma > 0.0 {
                    let noise = pink_noise(t, m, sigma, &mut r);
                    for (x, n) in clip.iter_mut().zip(noise) {
                        *x += n as f32;
                    }
                }
            }
        }
    }
    SpectrogramBatch::new(Tensor::new(audio.data.shape().to_vec(), data)?, audio.duration_s)
}

fn fft2(buf: &mut [Complex<f64>], rows: usize, cols: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(cols), planner.plan_fft_inverse(rows))
    } else {
        (planner.plan_fft_forward(cols), planner.plan_fft_forward(rows))
    };
    for r in buf.chunks_exact_mut(cols) {
        row_fft.process(r);
    }
    let mut col = vec![Complex::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            col[r] = buf[r * cols + c];
        }
        col_fft.process(&mut col);
        for r in 0..rows {
            buf[r * cols + c] = col[r];
        }
    }
}

/// White noise shaped by `1/sqrt(f)` over the 2-D frequency grid, rescaled
/// to standard deviation `sigma`.
pub fn pink_noise(rows: usize, cols: usize, sigma: f64, r: &mut impl Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut buf: Vec<Complex<f64>> = (0..rows * cols)
        .map(|_| Complex::new(normal.sample(r), 0.0))
        .collect();
    fft2(&mut buf, rows, cols, false);
    let freq = |i: usize, n: usize| -> f64 {
        let k = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
        k / n as f64
    };
    for ri in 0..rows {
        for ci in 0..cols {
            let f = (freq(ri, rows).powi(2) + freq(ci, cols).powi(2)).sqrt();
            let gain = if f == 0.0 { 0.0 } else { 1.0 / f.sqrt() };
            buf[ri * cols + ci] *= gain;
        }
    }
    fft2(&mut buf, rows, cols, true);
    let re: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let n = re.len() as f64;
    let mean = re.iter().sum::<f64>() / n;
    let sd = (re.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd == 0.0 {
        return vec![0.0; re.len()];
    }
    re.iter().map(|x| (x - mean) / sd * sigma).collect()
}

/// Radially averaged power of a 2-D field at low and high frequencies; used
/// to confirm the pink envelope.
pub fn band_power(field: &[f64], rows: usize, cols: usize) -> (f64, f64) {
    let mut buf: Vec<Complex<f64>> = field.iter().map(|&x| Complex::new(x, 0.0)).collect();
    fft2(&mut buf, rows, cols, false);
    let (mut lo, mut nlo, mut hi, mut nhi) = (0.0, 0, 0.0, 0);
    for ri in 0..rows {
        for ci in 0..cols {
            let fy = ri.min(rows - ri) as f64 / rows as f64;
            let fx = ci.min(cols - ci) as f64 / cols as f64;
            let f = (fy * fy + fx * fx).sqrt();
            let p = buf[ri * cols + ci].norm_sqr();
            if f > 0.0 && f < 0.125 {
                lo += p;
                nlo += 1;
            } else if f > 0.375 {
                hi += p;
                nhi += 1;
            }
        }
    }
    (lo / nlo.max(1) as f64, hi / nhi.max(1) as f64)
}
