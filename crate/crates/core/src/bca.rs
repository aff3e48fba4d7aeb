//! Bottleneck cross-attention between experts.
//!
//! A direction `K2Q` lets expert `Q` query expert `K`. Each side of the
//! attention is first down-projected, normalised and embedded with the
//! parameters of the direction in which that expert is the query, so the key
//! side of `K2Q` is prepared exactly like the query side of `Q2K`. The
//! attended result is passed through GELU and projected back up with the
//! receiving expert's up-projection.

use std::collections::BTreeMap;
use std::fmt;

use crate::attention::{attend, drop_branch, layer_norm, window_mask, AttentionParams, LnParams};
pub use crate::attention::WindowShape;
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::param::ParamId;
use crate::session::{AttentionRecord, Session};
use crate::tensor::Real;
use crate::tokenizer::{assign_time_embeddings, time_interval_embed, TimeInterval, TimeMlp, TokenSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Expert {
    Spatial,
    Temporal,
    Audio,
}

impl Expert {
    pub fn tag(self) -> char {
        match self {
            Expert::Spatial => 'S',
            Expert::Temporal => 'T',
            Expert::Audio => 'A',
        }
    }

    pub fn from_tag(c: char) -> Option<Self> {
        match c {
            'S' => Some(Expert::Spatial),
            'T' => Some(Expert::Temporal),
            'A' => Some(Expert::Audio),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Expert::Spatial => "spatial",
            Expert::Temporal => "temporal",
            Expert::Audio => "audio",
        }
    }
}

/// Key expert feeding query expert.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Direction {
    pub key: Expert,
    pub query: Expert,
}

impl Direction {
    pub fn new(key: Expert, query: Expert) -> Self {
        Self { key, query }
    }

    pub fn mirror(self) -> Self {
        Self {
            key: self.query,
            query: self.key,
        }
    }

    pub fn involves_audio(self) -> bool {
        self.key == Expert::Audio || self.query == Expert::Audio
    }

    pub fn parse(s: &str) -> Result<Self> {
        let c: Vec<char> = s.chars().collect();
        match c.as_slice() {
            [k, '2', q] => match (Expert::from_tag(*k), Expert::from_tag(*q)) {
                (Some(key), Some(query)) if key != query => Ok(Self { key, query }),
                _ => Err(Error::config(format!("bad direction {s}"))),
            },
            _ => Err(Error::config(format!("bad direction {s}"))),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}2{}", self.key.tag(), self.query.tag())
    }
}

/// Embedding added after the bottleneck normalisation.
#[derive(Clone, Copy, Debug)]
pub enum BcaEmbed {
    /// Learned per-token table `[clip_len, d]`.
    Positional(ParamId),
    /// Time Interval MLP over frame intervals plus a learned class row.
    Time { mlp: TimeMlp, cls_row: Option<ParamId> },
}

/// Learnables of one direction. `w_down`/`w_up` belong to the query expert
/// and may be shared with its other incoming direction.
#[derive(Clone, Copy, Debug)]
pub struct BcaParams {
    pub w_down: ParamId,
    pub ln: LnParams,
    pub embed: BcaEmbed,
    /// Absent when the direction is ablated; its preparation parameters are
    /// still used as the key side of the mirror direction.
    pub xattn: Option<AttentionParams>,
    pub w_up: Option<ParamId>,
}

impl BcaParams {
    pub fn enabled(&self) -> bool {
        self.xattn.is_some() && self.w_up.is_some()
    }
}

#[derive(Clone, Debug)]
pub struct DirectionSpec {
    pub dir: Direction,
    pub window: WindowShape,
    pub params: BcaParams,
}

/// All directions of one block's exchange.
#[derive(Clone, Debug)]
pub struct Exchange {
    pub layer: usize,
    pub directions: Vec<DirectionSpec>,
}

impl Exchange {
    pub fn spec(&self, dir: Direction) -> Result<&DirectionSpec> {
        self.directions
            .iter()
            .find(|d| d.dir == dir)
            .ok_or_else(|| Error::Lookup(format!("direction {dir} not configured")))
    }
}

/// Per-forward information the embeddings need.
#[derive(Clone, Debug)]
pub struct ExchangeContext {
    /// One interval per frame of the spatial/temporal paths.
    pub intervals: Vec<TimeInterval>,
}

/// `E + LN(Y W_down)` in clip form `[clips, clip_len, d]`.
pub fn prepare<F: Real>(
    s: &mut Session<'_, F>,
    y: &TokenSequence,
    p: &BcaParams,
    ctx: &ExchangeContext,
) -> Result<Var> {
    let clip = y.clip_form(s)?;
    let wd = s.param(p.w_down);
    let down = s.tape.matmul(clip, wd)?;
    let normed = layer_norm(s, down, &p.ln)?;
    let embed = match p.embed {
        BcaEmbed::Positional(table) => s.param(table),
        BcaEmbed::Time { mlp, cls_row } => {
            let e = time_interval_embed(s, &ctx.intervals, &mlp)?;
            let d = s.tape.shape(e)[1];
            let cls = match cls_row {
                Some(id) => s.param(id),
                None if !y.layout.has_cls() => s.constant(crate::tensor::Tensor::zeros(&[1, d])),
                None => return Err(Error::contract("class token without a class time row")),
            };
            assign_time_embeddings(s, &y.layout, e, cls)?
        }
    };
    s.tape.add(normed, embed)
}

/// Multi-head cross-attention of `q` (clip form, layout of `query`) over `kv`.
pub fn mhca<F: Real>(
    s: &mut Session<'_, F>,
    q: Var,
    query: &TokenSequence,
    kv: Var,
    key: &TokenSequence,
    ap: &AttentionParams,
    window: WindowShape,
) -> Result<(Var, Var)> {
    if query.clips != key.clips {
        return Err(Error::contract("cross-attention operands differ in batch size"));
    }
    let mask = match window_mask::<F>(window, &query.layout, &key.layout)? {
        Some(m) => Some(s.constant(m)),
        None => None,
    };
    attend(s, q, kv, ap, mask)
}

/// The delta `Φ_{key→query}` in the row form of `y_query`.
pub fn phi<F: Real>(
    s: &mut Session<'_, F>,
    y_query: &TokenSequence,
    y_key: &TokenSequence,
    spec: &DirectionSpec,
    mirror: &BcaParams,
    ctx: &ExchangeContext,
    layer: usize,
) -> Result<Var> {
    let (Some(xattn), Some(w_up)) = (spec.params.xattn, spec.params.w_up) else {
        return Err(Error::contract(format!("direction {} is disabled", spec.dir)));
    };
    let q = prepare(s, y_query, &spec.params, ctx)?;
    let k = prepare(s, y_key, mirror, ctx)?;
    let (out, weights) = mhca(s, q, y_query, k, y_key, &xattn, spec.window)?;
    if s.is_recording() {
        let rec = AttentionRecord {
            layer,
            direction: spec.dir.to_string(),
            window: spec.window,
            weights: s.value(weights).clone(),
            query_layout: y_query.layout,
            key_layout: y_key.layout,
        };
        s.record(rec);
    }
    let act = s.tape.gelu(out);
    let wu = s.param(w_up);
    let up = s.tape.matmul(act, wu)?;
    let l = y_query.layout;
    let d = s.tape.shape(up)[2];
    s.tape.reshape(up, &[y_query.rows(), l.tokens_per_row(), d])
}

/// Evaluation order of the Φ terms; results never depend on it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PhiOrder {
    #[default]
    Forward,
    Reverse,
}

/// `b_i = y_i + Σ_j Φ_{j→i}`; every Φ reads the pre-exchange inputs and the
/// terms are summed in configuration order.
pub fn exchange<F: Real>(
    s: &mut Session<'_, F>,
    paths: &BTreeMap<Expert, TokenSequence>,
    ex: &Exchange,
    ctx: &ExchangeContext,
    order: PhiOrder,
) -> Result<BTreeMap<Expert, TokenSequence>> {
    let mut active: Vec<&DirectionSpec> = ex
        .directions
        .iter()
        .filter(|d| d.params.enabled())
        .collect();
    if order == PhiOrder::Reverse {
        active.reverse();
    }
    let mut deltas: BTreeMap<Direction, Var> = BTreeMap::new();
    for spec in active {
        let yq = paths
            .get(&spec.dir.query)
            .ok_or_else(|| Error::contract(format!("missing {} path", spec.dir.query.name())))?;
        let yk = paths
            .get(&spec.dir.key)
            .ok_or_else(|| Error::contract(format!("missing {} path", spec.dir.key.name())))?;
        let mirror = ex.spec(spec.dir.mirror())?;
        let delta = phi(s, yq, yk, spec, &mirror.params, ctx, ex.layer)?;
        let delta = drop_branch(s, yq, delta)?;
        deltas.insert(spec.dir, delta);
    }
    let mut out = BTreeMap::new();
    for (&expert, y) in paths {
        let mut acc = y.tokens;
        for spec in &ex.directions {
            if spec.dir.query != expert {
                continue;
            }
            if let Some(&d) = deltas.get(&spec.dir) {
                acc = s.tape.add(acc, d)?;
            }
        }
        out.insert(expert, y.with_tokens(acc));
    }
    Ok(out)
}

/// Two-expert exchange: returns `(b1, b2)`.
pub fn exchange_two<F: Real>(
    s: &mut Session<'_, F>,
    y1: (Expert, &TokenSequence),
    y2: (Expert, &TokenSequence),
    ex: &Exchange,
    ctx: &ExchangeContext,
) -> Result<(TokenSequence, TokenSequence)> {
    let paths = BTreeMap::from([(y1.0, *y1.1), (y2.0, *y2.1)]);
    let out = exchange(s, &paths, ex, ctx, PhiOrder::Forward)?;
    Ok((out[&y1.0], out[&y2.0]))
}

/// Three-expert exchange with shared per-expert projections.
pub fn exchange_three<F: Real>(
    s: &mut Session<'_, F>,
    ys: [(Expert, &TokenSequence); 3],
    ex: &Exchange,
    ctx: &ExchangeContext,
) -> Result<[TokenSequence; 3]> {
    let paths: BTreeMap<Expert, TokenSequence> = ys.iter().map(|(e, y)| (*e, **y)).collect();
    if paths.len() != 3 || ex.directions.len() != 6 {
        return Err(Error::contract("three-expert exchange needs 3 paths and 6 directions"));
    }
    let out = exchange(s, &paths, ex, ctx, PhiOrder::Forward)?;
    Ok(ys.map(|(e, _)| out[&e]))
}
