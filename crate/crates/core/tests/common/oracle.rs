//! Straight-line scalar reimplementation of the full model in f64, reading
//! weights by name. Shares no code with the engine beyond configuration
//! types.

use std::collections::BTreeMap;

use xavt_core::attention::WindowShape;
use xavt_core::bca::{Direction, Expert};
use xavt_core::model::{Model, ModelConfig};

pub type Mat = Vec<Vec<f64>>;

pub struct Weights(BTreeMap<String, (Vec<usize>, Vec<f64>)>);

impl Weights {
    pub fn of(model: &Model<f32>) -> Self {
        Self(
            model
                .to_tensors()
                .into_iter()
                .map(|t| {
                    let v = t.value.data().iter().map(|&x| x as f64).collect();
                    (t.name, (t.value.shape().to_vec(), v))
                })
                .collect(),
        )
    }

    fn vec(&self, name: &str) -> &[f64] {
        &self.0.get(name).unwrap_or_else(|| panic!("no tensor {name}")).1
    }

    fn mat(&self, name: &str) -> Mat {
        let (shape, v) = self.0.get(name).unwrap_or_else(|| panic!("no tensor {name}"));
        assert_eq!(shape.len(), 2, "{name}");
        v.chunks(shape[1]).map(|r| r.to_vec()).collect()
    }
}

fn matmul(x: &Mat, w: &Mat) -> Mat {
    x.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|j| (0..row.len()).map(|k| row[k] * w[k][j]).sum())
                .collect()
        })
        .collect()
}

fn add_row(x: &mut Mat, b: &[f64]) {
    for r in x.iter_mut() {
        for (v, bb) in r.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn gelu_mat(x: &Mat) -> Mat {
    x.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect()
}

fn layer_norm(x: &Mat, g: &[f64], b: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(j, v)| g[j] * (v - mean) / (var + eps).sqrt() + b[j])
                .collect()
        })
        .collect()
}

fn attention(
    q_in: &Mat,
    kv_in: &Mat,
    w: [&Mat; 3],
    heads: usize,
    allow: &dyn Fn(usize, usize) -> bool,
) -> Mat {
    let (q, k, v) = (matmul(q_in, w[0]), matmul(kv_in, w[1]), matmul(kv_in, w[2]));
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..q.len() {
            let scores: Vec<Option<f64>> = (0..k.len())
                .map(|j| {
                    allow(i, j).then(|| {
                        cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                })
                .collect();
            let m = scores.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let e: Vec<f64> = scores.iter().map(|s| s.map_or(0.0, |s| (s - m).exp())).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                out[i][c] = (0..k.len()).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Pos {
    Cls(Option<usize>),
    Patch(usize, usize),
    Audio(usize),
}

fn frame(p: Pos) -> Option<usize> {
    match p {
        Pos::Cls(f) => f,
        Pos::Patch(f, _) => Some(f),
        Pos::Audio(_) => None,
    }
}

fn allowed(w: WindowShape, q: Pos, k: Pos) -> bool {
    let same_frame = match (frame(q), frame(k)) {
        (Some(a), Some(b)) => a == b,
        _ => true,
    };
    match (w, q, k) {
        (WindowShape::SpaceTime, _, _) => true,
        (WindowShape::Space, _, _) => same_frame,
        (WindowShape::Time, Pos::Patch(_, a), Pos::Patch(_, b)) => a == b,
        (WindowShape::Time, _, _) => same_frame,
    }
}

/// Tokens of one clip of one path, in clip order.
struct Path {
    tokens: Mat,
    pos: Vec<Pos>,
    /// Audio time positions, for the interval assignment.
    audio_time: usize,
}

pub struct Input<'a> {
    /// `[frames, height, width, channels]` of one clip.
    pub video: &'a [f64],
    /// `[spec_time, mel_bins]`.
    pub audio: Option<&'a [f64]>,
}

fn tokenize(c: &ModelConfig, w: &Weights, e: Expert, inp: &Input) -> Path {
    let name = e.name();
    let p = c.patch;
    let (gh, gw) = (c.height / p, c.width / p);
    let t = c.frames / 2;
    let px = |f: usize, y: usize, x: usize, ch: usize| inp.video[((f * c.height + y) * c.width + x) * c.channels + ch];
    let weight = w.mat(&format!("{name}.patch.weight"));
    let bias = w.vec(&format!("{name}.patch.bias"));
    let posemb = w.mat(&format!("{name}.pos"));
    let project = |patch: Vec<f64>| -> Vec<f64> {
        let mut r = matmul(&vec![patch], &weight);
        add_row(&mut r, bias);
        r.remove(0)
    };
    let plus = |a: Vec<f64>, b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + y).collect() };
    let mut tokens = Vec::new();
    let mut pos = Vec::new();
    let mut audio_time = 0;
    match e {
        Expert::Spatial => {
            let cls = w.vec(&format!("{name}.cls")).to_vec();
            for f in 0..t {
                tokens.push(plus(cls.clone(), &posemb[0]));
                pos.push(Pos::Cls(Some(f)));
                for n in 0..gh * gw {
                    let (py, pxx) = (n / gw, n % gw);
                    let mut v = Vec::new();
                    for y in 0..p {
                        for x in 0..p {
                            for ch in 0..c.channels {
                                v.push(px(2 * f, py * p + y, pxx * p + x, ch));
                            }
                        }
                    }
                    tokens.push(plus(project(v), &posemb[1 + n]));
                    pos.push(Pos::Patch(f, n));
                }
            }
        }
        Expert::Temporal => {
            for f in 0..t {
                for n in 0..gh * gw {
                    let (py, pxx) = (n / gw, n % gw);
                    let mut v = Vec::new();
                    for dt in 0..2 {
                        for y in 0..p {
                            for x in 0..p {
                                for ch in 0..c.channels {
                                    v.push(px(2 * f + dt, py * p + y, pxx * p + x, ch));
                                }
                            }
                        }
                    }
                    tokens.push(plus(project(v), &posemb[f * gh * gw + n]));
                    pos.push(Pos::Patch(f, n));
                }
            }
        }
        Expert::Audio => {
            let a = inp.audio.expect("audio input");
            let (ap, st) = (c.audio_patch, c.audio_stride);
            let nt = (c.spec_time - ap) / st + 1;
            let nf = (c.mel_bins - ap) / st + 1;
            audio_time = nt;
            tokens.push(plus(w.vec(&format!("{name}.cls")).to_vec(), &posemb[0]));
            pos.push(Pos::Cls(None));
            for i in 0..nt * nf {
                let (it, jf) = (i / nf, i % nf);
                let mut v = Vec::new();
                for dt in 0..ap {
                    for df in 0..ap {
                        v.push(a[(it * st + dt) * c.mel_bins + jf * st + df]);
                    }
                }
                tokens.push(plus(project(v), &posemb[1 + i]));
                pos.push(Pos::Audio(it));
            }
        }
    }
    Path {
        tokens,
        pos,
        audio_time,
    }
}

fn adapter(w: &Weights, prefix: &str, x: &Mat) -> Mat {
    let h = gelu_mat(&matmul(x, &w.mat(&format!("{prefix}.w_down"))));
    matmul(&h, &w.mat(&format!("{prefix}.w_up")))
}

fn ln(c: &ModelConfig, w: &Weights, prefix: &str, x: &Mat) -> Mat {
    layer_norm(x, w.vec(&format!("{prefix}.gamma")), w.vec(&format!("{prefix}.beta")), c.ln_eps)
}

fn proj_key(c: &ModelConfig, d: Direction) -> String {
    if c.share_projections {
        d.query.tag().to_string()
    } else {
        d.to_string()
    }
}

/// `E + LN(Y W_down)` of the query side of direction `d`.
fn prepare(c: &ModelConfig, w: &Weights, l: usize, d: Direction, path: &Path) -> Mat {
    let down = matmul(&path.tokens, &w.mat(&format!("block{l}.bca.{}.w_down", proj_key(c, d))));
    let normed = ln(c, w, &format!("block{l}.bca.{d}.ln"), &down);
    let emb: Mat = if d.involves_audio() {
        let t = c.frames / 2;
        let rate = c.frame_rate / 2.0;
        let p = format!("block{l}.bca.{d}.time_mlp");
        let mut rows: Mat = (0..t)
            .map(|i| vec![i as f64 / rate, (i + 1) as f64 / rate])
            .collect();
        rows = matmul(&rows, &w.mat(&format!("{p}.w1")));
        add_row(&mut rows, w.vec(&format!("{p}.b1")));
        rows = matmul(&gelu_mat(&rows), &w.mat(&format!("{p}.w2")));
        add_row(&mut rows, w.vec(&format!("{p}.b2")));
        path.pos
            .iter()
            .map(|&q| match q {
                Pos::Cls(_) => w.vec(&format!("block{l}.bca.{d}.time_cls")).to_vec(),
                Pos::Patch(f, _) => rows[f].clone(),
                Pos::Audio(tt) => rows[tt * t / path.audio_time].clone(),
            })
            .collect()
    } else {
        w.mat(&format!("block{l}.bca.{d}.embed"))
    };
    add(&normed, &emb)
}

fn phi(c: &ModelConfig, w: &Weights, l: usize, d: Direction, yq: &Path, yk: &Path) -> Mat {
    let q = prepare(c, w, l, d, yq);
    let k = prepare(c, w, l, d.mirror(), yk);
    let p = format!("block{l}.bca.{d}.xattn");
    let (wq, wk, wv) = (
        w.mat(&format!("{p}.w_q")),
        w.mat(&format!("{p}.w_k")),
        w.mat(&format!("{p}.w_v")),
    );
    let window = c.window(d);
    let out = attention(&q, &k, [&wq, &wk, &wv], c.bca_heads, &|i, j| {
        allowed(window, yq.pos[i], yk.pos[j])
    });
    matmul(&gelu_mat(&out), &w.mat(&format!("block{l}.bca.{}.w_up", proj_key(c, d))))
}

pub struct Output {
    /// Final tokens of each path in clip order.
    pub features: BTreeMap<Expert, Mat>,
    pub logits: Vec<f64>,
}

/// `plain` drops every adapter and the exchange: a vanilla frozen
/// pre-norm transformer per path.
pub fn forward(model: &Model<f32>, inp: &Input, plain: bool) -> Output {
    let c = &model.config;
    let w = Weights::of(model);
    let experts = c.variant.experts();
    let mut xs: BTreeMap<Expert, Path> = experts.iter().map(|&e| (e, tokenize(c, &w, e, inp))).collect();
    for l in 1..=c.depth {
        let mut ys = BTreeMap::new();
        for (&e, x) in &xs {
            let p = format!("{}.block{l}", e.name());
            let h = ln(c, &w, &format!("{p}.ln1"), &x.tokens);
            let window = if e == Expert::Spatial {
                WindowShape::Space
            } else {
                WindowShape::SpaceTime
            };
            let (wq, wk, wv) = (
                w.mat(&format!("{p}.attn.w_q")),
                w.mat(&format!("{p}.attn.w_k")),
                w.mat(&format!("{p}.attn.w_v")),
            );
            let a = attention(&h, &h, [&wq, &wk, &wv], c.heads, &|i, j| allowed(window, x.pos[i], x.pos[j]));
            let mut y = add(&x.tokens, &a);
            if !plain {
                y = add(&y, &adapter(&w, &format!("{p}.adapter_attn"), &a));
            }
            ys.insert(
                e,
                Path {
                    tokens: y,
                    pos: x.pos.clone(),
                    audio_time: x.audio_time,
                },
            );
        }
        let mut bs: BTreeMap<Expert, Mat> = ys.iter().map(|(&e, y)| (e, y.tokens.clone())).collect();
        if !plain && experts.len() > 1 {
            for d in c.variant.directions() {
                if c.disabled.contains(&d) {
                    continue;
                }
                let delta = phi(c, &w, l, d, &ys[&d.query], &ys[&d.key]);
                let b = bs.get_mut(&d.query).unwrap();
                *b = add(b, &delta);
            }
        }
        for (&e, b) in &bs {
            let p = format!("{}.block{l}", e.name());
            let h = ln(c, &w, &format!("{p}.ln2"), b);
            let mut f = matmul(&h, &w.mat(&format!("{p}.ffn.w1")));
            add_row(&mut f, w.vec(&format!("{p}.ffn.b1")));
            let mut f = matmul(&gelu_mat(&f), &w.mat(&format!("{p}.ffn.w2")));
            add_row(&mut f, w.vec(&format!("{p}.ffn.b2")));
            let mut y = add(b, &f);
            if !plain {
                y = add(&y, &adapter(&w, &format!("{p}.adapter_ffn"), &h));
            }
            xs.get_mut(&e).unwrap().tokens = y;
        }
    }
    let dim = c.dim;
    let mut z = vec![0.0; dim];
    for (&e, x) in &xs {
        let pooled: Vec<f64> = match e {
            Expert::Spatial => {
                let cls: Vec<&Vec<f64>> = x
                    .tokens
                    .iter()
                    .zip(&x.pos)
                    .filter(|(_, p)| matches!(p, Pos::Cls(_)))
                    .map(|(t, _)| t)
                    .collect();
                (0..dim).map(|j| cls.iter().map(|t| t[j]).sum::<f64>() / cls.len() as f64).collect()
            }
            Expert::Temporal => (0..dim)
                .map(|j| x.tokens.iter().map(|t| t[j]).sum::<f64>() / x.tokens.len() as f64)
                .collect(),
            Expert::Audio => x.tokens[0].clone(),
        };
        let s = ln(c, &w, &format!("{}.final_ln", e.name()), &vec![pooled]);
        let a = adapter(&w, &format!("{}.head_adapter", e.name()), &s);
        for j in 0..dim {
            z[j] += a[0][j];
        }
    }
    let mut logits = matmul(&vec![z], &w.mat("head.weight"));
    add_row(&mut logits, w.vec("head.bias"));
    Output {
        features: xs.into_iter().map(|(e, p)| (e, p.tokens)).collect(),
        logits: logits.remove(0),
    }
}
