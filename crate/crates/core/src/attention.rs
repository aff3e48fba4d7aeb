//! Per-expert transformer sub-blocks: multi-head self attention, the
//! bottleneck adapter, the attention block with its parallel adapter, and the
//! feed-forward block with its adapter.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::param::ParamId;
use crate::session::Session;
use crate::tensor::{Real, Tensor};
use crate::tokenizer::{Layout, TokenPos, TokenSequence};

/// Which keys a query may see.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WindowShape {
    /// Same patch position across all frames.
    Time,
    /// Same frame.
    Space,
    /// Everything (global).
    SpaceTime,
}

impl WindowShape {
    pub fn name(self) -> &'static str {
        match self {
            WindowShape::Time => "time",
            WindowShape::Space => "space",
            WindowShape::SpaceTime => "space-time",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "time" => Ok(WindowShape::Time),
            "space" => Ok(WindowShape::Space),
            "space-time" | "spacetime" | "global" => Ok(WindowShape::SpaceTime),
            _ => Err(Error::config(format!("unknown window shape {s}"))),
        }
    }
}

fn frame_of(p: TokenPos) -> Option<usize> {
    match p {
        TokenPos::Cls { frame } => frame,
        TokenPos::Patch { frame, .. } => Some(frame),
        TokenPos::Audio { .. } => None,
    }
}

/// Window membership of key `k` for query `q`. Class tokens act as members
/// of their whole frame row; a clip-level class token matches every frame.
pub fn window_allows(window: WindowShape, q: TokenPos, k: TokenPos) -> bool {
    let same_frame = match (frame_of(q), frame_of(k)) {
        (Some(a), Some(b)) => a == b,
        _ => true,
    };
    match window {
        WindowShape::SpaceTime => true,
        WindowShape::Space => same_frame,
        WindowShape::Time => match (q, k) {
            (TokenPos::Patch { patch: a, .. }, TokenPos::Patch { patch: b, .. }) => a == b,
            _ => same_frame,
        },
    }
}

/// Additive `[Lq, Lk]` mask (0 or -inf), `None` for the global window.
pub fn window_mask<F: Real>(
    window: WindowShape,
    query: &Layout,
    key: &Layout,
) -> Result<Option<Tensor<F>>> {
    if window == WindowShape::SpaceTime {
        return Ok(None);
    }
    if !query.is_visual() || !key.is_visual() {
        return Err(Error::contract(format!(
            "{} window needs frame-aligned tokens on both sides",
            window.name()
        )));
    }
    if query.time_steps() != key.time_steps() {
        return Err(Error::contract("query and key layouts disagree on frame count"));
    }
    let grid = |l: &Layout| match *l {
        Layout::Spatial { grid_h, grid_w, .. } | Layout::Temporal { grid_h, grid_w, .. } => {
            (grid_h, grid_w)
        }
        Layout::Audio { .. } => unreachable!(),
    };
    if grid(query) != grid(key) {
        return Err(Error::contract("query and key layouts disagree on patch grid"));
    }
    let qp = query.positions();
    let kp = key.positions();
    let mut data = Vec::with_capacity(qp.len() * kp.len());
    for &q in &qp {
        for &k in &kp {
            data.push(if window_allows(window, q, k) {
                F::zero()
            } else {
                F::neg_infinity()
            });
        }
    }
    Ok(Some(Tensor::new(vec![qp.len(), kp.len()], data)?))
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub heads: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct AdapterParams {
    pub w_down: ParamId,
    pub w_up: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct LnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

pub fn layer_norm<F: Real>(s: &mut Session<'_, F>, x: Var, ln: &LnParams) -> Result<Var> {
    s.counters.layer_norm_calls += 1;
    let g = s.param(ln.gamma);
    let b = s.param(ln.beta);
    s.tape.layer_norm(x, g, b, F::lit(ln.eps))
}

/// Scaled dot-product attention of `q_in [G, Lq, D]` over `kv_in [G, Lk, D]`.
/// Returns the output `[G, Lq, D]` and the weights `[G, H, Lq, Lk]`.
pub fn attend<F: Real>(
    s: &mut Session<'_, F>,
    q_in: Var,
    kv_in: Var,
    ap: &AttentionParams,
    mask: Option<Var>,
) -> Result<(Var, Var)> {
    let sq = s.tape.shape(q_in).to_vec();
    let sk = s.tape.shape(kv_in).to_vec();
    if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] {
        return Err(Error::Shape {
            op: "attention",
            lhs: sq,
            rhs: sk,
        });
    }
    let (g, lq, d) = (sq[0], sq[1], sq[2]);
    let lk = sk[1];
    let h = ap.heads;
    if h == 0 || d % h != 0 {
        return Err(Error::config(format!("dim {d} not divisible by {h} heads")));
    }
    let dh = d / h;
    let (wq, wk, wv) = (s.param(ap.w_q), s.param(ap.w_k), s.param(ap.w_v));
    let q = s.tape.matmul(q_in, wq)?;
    let k = s.tape.matmul(kv_in, wk)?;
    let v = s.tape.matmul(kv_in, wv)?;
    let q = s.tape.reshape(q, &[g, lq, h, dh])?;
    let q = s.tape.permute(q, &[0, 2, 1, 3])?;
    let k = s.tape.reshape(k, &[g, lk, h, dh])?;
    let k = s.tape.permute(k, &[0, 2, 3, 1])?;
    let v = s.tape.reshape(v, &[g, lk, h, dh])?;
    let v = s.tape.permute(v, &[0, 2, 1, 3])?;
    let logits = s.tape.matmul(q, k)?;
    let mut logits = s.tape.scale(logits, F::lit(1.0 / (dh as f64).sqrt()));
    if let Some(m) = mask {
        logits = s.tape.add(logits, m)?;
    }
    let weights = s.tape.softmax(logits)?;
    let out = s.tape.matmul(weights, v)?;
    let out = s.tape.permute(out, &[0, 2, 1, 3])?;
    let out = s.tape.reshape(out, &[g, lq, d])?;
    Ok((out, weights))
}

/// Multi-head self attention restricted to `window`.
pub fn mhsa<F: Real>(
    s: &mut Session<'_, F>,
    x: &TokenSequence,
    ap: &AttentionParams,
    window: WindowShape,
) -> Result<TokenSequence> {
    s.counters.mhsa_calls += 1;
    // Per-frame rows already isolate frames: no mask needed.
    if matches!(x.layout, Layout::Spatial { .. }) && window == WindowShape::Space {
        let (out, _) = attend(s, x.tokens, x.tokens, ap, None)?;
        return Ok(x.with_tokens(out));
    }
    let clip = x.clip_form(s)?;
    let mask = match window_mask::<F>(window, &x.layout, &x.layout)? {
        Some(m) => Some(s.constant(m)),
        None => None,
    };
    let (out, _) = attend(s, clip, clip, ap, mask)?;
    TokenSequence::from_clip_form(s, out, x.layout, x.clips)
}

/// `gelu(x W_down) W_up`; no internal residual.
pub fn adapter<F: Real>(s: &mut Session<'_, F>, x: Var, ad: &AdapterParams) -> Result<Var> {
    let wd = s.param(ad.w_down);
    let wu = s.param(ad.w_up);
    let h = s.tape.matmul(x, wd)?;
    let h = s.tape.gelu(h);
    s.tape.matmul(h, wu)
}

/// Applies the session's stochastic-depth mask (if any) to a residual branch.
pub(crate) fn drop_branch<F: Real>(
    s: &mut Session<'_, F>,
    x: &TokenSequence,
    branch: Var,
) -> Result<Var> {
    match s.drop_path_factors(x.clips) {
        None => Ok(branch),
        Some(per_clip) => {
            let rpc = x.layout.rows_per_clip();
            let per_row = per_clip
                .iter()
                .flat_map(|&f| std::iter::repeat_n(f, rpc))
                .collect();
            s.tape.scale_rows(branch, per_row)
        }
    }
}

/// `Y = X + ADAP(MHSA(LN(X))) + MHSA(LN(X))`, with one shared MHSA evaluation.
pub fn expert_attn_block<F: Real>(
    s: &mut Session<'_, F>,
    x: &TokenSequence,
    ln: &LnParams,
    ap: &AttentionParams,
    ad: &AdapterParams,
    window: WindowShape,
) -> Result<TokenSequence> {
    let h = layer_norm(s, x.tokens, ln)?;
    let attn = mhsa(s, &x.with_tokens(h), ap, window)?;
    let adapted = adapter(s, attn.tokens, ad)?;
    let branch = s.tape.add(adapted, attn.tokens)?;
    let branch = drop_branch(s, x, branch)?;
    let y = s.tape.add(x.tokens, branch)?;
    Ok(x.with_tokens(y))
}

/// Two-layer perceptron with GELU in between.
pub fn ffn<F: Real>(s: &mut Session<'_, F>, x: Var, p: &FfnParams) -> Result<Var> {
    let (w1, b1, w2, b2) = (s.param(p.w1), s.param(p.b1), s.param(p.w2), s.param(p.b2));
    let h = s.tape.matmul(x, w1)?;
    let h = s.tape.add(h, b1)?;
    let h = s.tape.gelu(h);
    let y = s.tape.matmul(h, w2)?;
    s.tape.add(y, b2)
}

/// `X' = B + FFN(LN(B)) + ADAP(LN(B))`, with one shared LN evaluation.
pub fn ffn_block<F: Real>(
    s: &mut Session<'_, F>,
    b: &TokenSequence,
    ln: &LnParams,
    ffn_params: &FfnParams,
    ad: &AdapterParams,
) -> Result<TokenSequence> {
    let h = layer_norm(s, b.tokens, ln)?;
    let f = ffn(s, h, ffn_params)?;
    let a = adapter(s, h, ad)?;
    let branch = s.tape.add(f, a)?;
    let branch = drop_branch(s, b, branch)?;
    let y = s.tape.add(b.tokens, branch)?;
    Ok(b.with_tokens(y))
}
