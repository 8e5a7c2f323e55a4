//! Graph-level building blocks: projections, multi-head attention, and the
//! post-norm encoder/decoder layers.
//!
//! Every function operates on a batch of equal-length sequences stacked
//! along the rows, so one graph handles a whole minibatch. Attention never
//! crosses sequence boundaries.

use serde::{Deserialize, Serialize};

use crate::tensor::{AttentionSegment, Graph, Result, TensorError, Var};

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.linear(x, self.weight, self.bias)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gain: Var,
    pub bias: Var,
}

impl NormVars {
    pub fn apply(&self, g: &mut Graph, x: Var, eps: f64) -> Result<Var> {
        g.layer_norm(x, self.gain, self.bias, eps)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub q: LinearVars,
    pub k: LinearVars,
    pub v: LinearVars,
    pub out: LinearVars,
    pub heads: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForwardVars {
    pub up: LinearVars,
    pub down: LinearVars,
}

impl FeedForwardVars {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.apply(g, x)?;
        let h = g.gelu(h)?;
        self.down.apply(g, h)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerVars {
    pub attn: AttentionVars,
    pub norm_attn: NormVars,
    pub ff: FeedForwardVars,
    pub norm_ff: NormVars,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayerVars {
    pub self_attn: Option<(AttentionVars, NormVars)>,
    pub cross: AttentionVars,
    pub norm_cross: NormVars,
    pub ff: FeedForwardVars,
    pub norm_ff: NormVars,
}

/// Which stream supplies the values mixed by cross-attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossAttentionValues {
    /// Values are projected from the query stream and aligned with key
    /// positions, so both streams must have the same length.
    #[default]
    QueryStream,
    /// Values are projected from the context (key) stream.
    ContextStream,
}

/// Attention output together with the raw attention node, whose saved
/// probabilities can be read back with [`Graph::attention_probs`].
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub output: Var,
    pub mixed: Var,
}

fn segments(n_seq: usize, q_len: usize, k_len: usize, values_from_query: bool) -> Vec<AttentionSegment> {
    (0..n_seq)
        .map(|s| AttentionSegment {
            q_start: s * q_len,
            q_len,
            k_start: s * k_len,
            k_len,
            v_start: if values_from_query { s * q_len } else { s * k_len },
        })
        .collect()
}

fn sequence_count(g: &Graph, x: Var, len: usize) -> Result<usize> {
    let rows = g.value(x).rows();
    if len == 0 || rows % len != 0 {
        return Err(TensorError::Invalid(format!(
            "{rows} rows do not split into sequences of length {len}"
        )));
    }
    Ok(rows / len)
}

/// `softmax(q(H)·k(H)ᵀ/√d_head)·v(H)` per head, then the output projection.
pub fn self_attention(g: &mut Graph, h: Var, p: &AttentionVars, seq_len: usize) -> Result<Attended> {
    let n = sequence_count(g, h, seq_len)?;
    let q = p.q.apply(g, h)?;
    let k = p.k.apply(g, h)?;
    let v = p.v.apply(g, h)?;
    let mixed = g.attention(q, k, v, p.heads, &segments(n, seq_len, seq_len, false))?;
    let output = p.out.apply(g, mixed)?;
    Ok(Attended { output, mixed })
}

/// Queries come from `query`, keys from `context`; values per `mode`.
pub fn cross_attention(
    g: &mut Graph,
    query: Var,
    context: Var,
    p: &AttentionVars,
    q_len: usize,
    k_len: usize,
    mode: CrossAttentionValues,
) -> Result<Attended> {
    let n = sequence_count(g, query, q_len)?;
    let nk = sequence_count(g, context, k_len)?;
    if n != nk {
        return Err(TensorError::Invalid(format!(
            "cross_attention: {n} query sequences vs {nk} context sequences"
        )));
    }
    let from_query = mode == CrossAttentionValues::QueryStream;
    if from_query && q_len != k_len {
        return Err(TensorError::Invalid(format!(
            "cross_attention: query-stream values need equal lengths, got {q_len} and {k_len}"
        )));
    }
    let q = p.q.apply(g, query)?;
    let k = p.k.apply(g, context)?;
    let v = p.v.apply(g, if from_query { query } else { context })?;
    let mixed = g.attention(q, k, v, p.heads, &segments(n, q_len, k_len, from_query))?;
    let output = p.out.apply(g, mixed)?;
    Ok(Attended { output, mixed })
}

/// `H' = LN(SA(H) + H)`, `H'' = LN(FF(H') + H')`.
pub fn encoder_layer(
    g: &mut Graph,
    h: Var,
    p: &EncoderLayerVars,
    seq_len: usize,
    eps: f64,
) -> Result<Var> {
    let sa = self_attention(g, h, &p.attn, seq_len)?.output;
    let r = g.add(sa, h)?;
    let h_attn = p.norm_attn.apply(g, r, eps)?;
    let ff = p.ff.apply(g, h_attn)?;
    let r = g.add(ff, h_attn)?;
    p.norm_ff.apply(g, r, eps)
}

/// Optional self-attention, then cross-attention to `context`, then the
/// feed-forward block; each sublayer is residual followed by LN.
pub fn decoder_layer(
    g: &mut Graph,
    h: Var,
    context: Var,
    p: &DecoderLayerVars,
    seq_len: usize,
    mode: CrossAttentionValues,
    eps: f64,
) -> Result<Var> {
    let mut h = h;
    if let Some((attn, norm)) = &p.self_attn {
        let sa = self_attention(g, h, attn, seq_len)?.output;
        let r = g.add(sa, h)?;
        h = norm.apply(g, r, eps)?;
    }
    let ca = cross_attention(g, h, context, &p.cross, seq_len, seq_len, mode)?.output;
    let r = g.add(ca, h)?;
    h = p.norm_cross.apply(g, r, eps)?;
    let ff = p.ff.apply(g, h)?;
    let r = g.add(ff, h)?;
    p.norm_ff.apply(g, r, eps)
}
