//! Transformer building blocks over packed sequences, and their parameter builders.
//!
//! Every block is pre-norm with residual connections and a GELU feed-forward.

use rand::Rng;

use crate::autograd::{AttnMask, Span, Tape, Var};
use crate::params::{Init, ParamStore};
use crate::scalar::Scalar;

/// Standard deviation of embedding tables; linear maps use `1/sqrt(fan_in)`.
pub const INIT_STD: f64 = 0.02;

/// Rows of one tape node grouped into sequences.
#[derive(Clone, Debug)]
pub struct Packed {
    pub var: Var,
    pub spans: Vec<Span>,
}

impl Packed {
    pub fn new(var: Var, spans: Vec<Span>) -> Self {
        Self { var, spans }
    }

    pub fn with_var(&self, var: Var) -> Self {
        Self { var, spans: self.spans.clone() }
    }

    /// Row index of the first position of every sequence.
    pub fn first_rows(&self) -> Vec<usize> {
        self.spans.iter().map(|s| s.start).collect()
    }
}

// ---------------------------------------------------------------------------
// parameter builders

pub fn add_linear<T: Scalar, R: Rng>(
    ps: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
) {
    let std = (1.0 / fan_in as f64).sqrt();
    ps.insert(format!("{prefix}.w"), Init::TruncNormal(std).build(fan_in, fan_out, rng));
    if bias {
        ps.insert(format!("{prefix}.b"), Init::Zeros.build(1, fan_out, rng));
    }
}

pub fn add_layer_norm<T: Scalar, R: Rng>(ps: &mut ParamStore<T>, rng: &mut R, prefix: &str, d: usize) {
    ps.insert(format!("{prefix}.g"), Init::Ones.build(1, d, rng));
    ps.insert(format!("{prefix}.b"), Init::Zeros.build(1, d, rng));
}

fn add_attention<T: Scalar, R: Rng>(ps: &mut ParamStore<T>, rng: &mut R, prefix: &str, d: usize) {
    for proj in ["q", "k", "v", "o"] {
        add_linear(ps, rng, &format!("{prefix}.{proj}"), d, d, true);
    }
}

fn add_ffn<T: Scalar, R: Rng>(ps: &mut ParamStore<T>, rng: &mut R, prefix: &str, d: usize, mult: usize) {
    add_linear(ps, rng, &format!("{prefix}.fc1"), d, d * mult, true);
    add_linear(ps, rng, &format!("{prefix}.fc2"), d * mult, d, true);
}

/// Self-attention stack: `{prefix}.l{i}.*` plus a final norm `{prefix}.ln_f`.
pub fn add_encoder_stack<T: Scalar, R: Rng>(
    ps: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    d: usize,
    layers: usize,
    mult: usize,
) {
    for l in 0..layers {
        let p = format!("{prefix}.l{l}");
        add_layer_norm(ps, rng, &format!("{p}.ln1"), d);
        add_attention(ps, rng, &format!("{p}.attn"), d);
        add_layer_norm(ps, rng, &format!("{p}.ln2"), d);
        add_ffn(ps, rng, &format!("{p}.ffn"), d, mult);
    }
    add_layer_norm(ps, rng, &format!("{prefix}.ln_f"), d);
}

/// Self-attention + cross-attention + FFN blocks, plus `{prefix}.ln_f`.
pub fn add_cross_stack<T: Scalar, R: Rng>(
    ps: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    d: usize,
    layers: usize,
    mult: usize,
) {
    for l in 0..layers {
        let p = format!("{prefix}.l{l}");
        add_layer_norm(ps, rng, &format!("{p}.ln1"), d);
        add_attention(ps, rng, &format!("{p}.attn"), d);
        add_layer_norm(ps, rng, &format!("{p}.ln2"), d);
        add_attention(ps, rng, &format!("{p}.xattn"), d);
        add_layer_norm(ps, rng, &format!("{p}.ln3"), d);
        add_ffn(ps, rng, &format!("{p}.ffn"), d, mult);
    }
    add_layer_norm(ps, rng, &format!("{prefix}.ln_f"), d);
}

// ---------------------------------------------------------------------------
// forward

pub fn linear<T: Scalar>(t: &mut Tape<T>, ps: &ParamStore<T>, prefix: &str, x: Var) -> Var {
    let w = t.param(ps, &format!("{prefix}.w"));
    let y = t.matmul(x, w);
    let bias = format!("{prefix}.b");
    if ps.contains(&bias) {
        let b = t.param(ps, &bias);
        t.add_row(y, b)
    } else {
        y
    }
}

pub fn layer_norm<T: Scalar>(t: &mut Tape<T>, ps: &ParamStore<T>, prefix: &str, x: Var) -> Var {
    let g = t.param(ps, &format!("{prefix}.g"));
    let b = t.param(ps, &format!("{prefix}.b"));
    let y = t.layer_norm(x);
    let y = t.mul_row(y, g);
    t.add_row(y, b)
}

/// Multi-head attention of `q_in` over `kv_in`. Returns the projected output and
/// the attention node (for reading probabilities).
#[allow(clippy::too_many_arguments)]
pub fn attention<T: Scalar>(
    t: &mut Tape<T>,
    ps: &ParamStore<T>,
    prefix: &str,
    heads: usize,
    q_in: Var,
    kv_in: Var,
    q_spans: &[Span],
    k_spans: &[Span],
    masks: &[AttnMask],
) -> (Var, Var) {
    let q = linear(t, ps, &format!("{prefix}.q"), q_in);
    let k = linear(t, ps, &format!("{prefix}.k"), kv_in);
    let v = linear(t, ps, &format!("{prefix}.v"), kv_in);
    let a = t.attention(q, k, v, heads, q_spans, k_spans, masks);
    (linear(t, ps, &format!("{prefix}.o"), a), a)
}

pub fn ffn<T: Scalar>(t: &mut Tape<T>, ps: &ParamStore<T>, prefix: &str, x: Var) -> Var {
    let h = linear(t, ps, &format!("{prefix}.fc1"), x);
    let h = t.gelu(h);
    linear(t, ps, &format!("{prefix}.fc2"), h)
}

/// Runs an encoder stack built by [`add_encoder_stack`].
pub fn encoder_stack<T: Scalar>(
    t: &mut Tape<T>,
    ps: &ParamStore<T>,
    prefix: &str,
    heads: usize,
    x: &Packed,
    masks: &[AttnMask],
) -> Packed {
    let mut h = x.var;
    let spans = &x.spans;
    for l in 0.. {
        let p = format!("{prefix}.l{l}");
        if !ps.contains(&format!("{p}.ln1.g")) {
            break;
        }
        let n = layer_norm(t, ps, &format!("{p}.ln1"), h);
        let (a, _) = attention(t, ps, &format!("{p}.attn"), heads, n, n, spans, spans, masks);
        h = t.add(h, a);
        let n = layer_norm(t, ps, &format!("{p}.ln2"), h);
        let f = ffn(t, ps, &format!("{p}.ffn"), n);
        h = t.add(h, f);
    }
    let out = layer_norm(t, ps, &format!("{prefix}.ln_f"), h);
    x.with_var(out)
}

/// Runs a cross stack built by [`add_cross_stack`]. Query sequence `i` attends
/// to key rows `kv_spans[i]` of `kv`. Returns the output and the final block's
/// cross-attention node.
pub fn cross_stack<T: Scalar>(
    t: &mut Tape<T>,
    ps: &ParamStore<T>,
    prefix: &str,
    heads: usize,
    x: &Packed,
    kv: Var,
    kv_spans: &[Span],
    self_masks: &[AttnMask],
) -> (Packed, Option<Var>) {
    let full = vec![AttnMask::Full; x.spans.len()];
    let mut h = x.var;
    let mut last_cross = None;
    for l in 0.. {
        let p = format!("{prefix}.l{l}");
        if !ps.contains(&format!("{p}.ln1.g")) {
            break;
        }
        let n = layer_norm(t, ps, &format!("{p}.ln1"), h);
        let (a, _) = attention(t, ps, &format!("{p}.attn"), heads, n, n, &x.spans, &x.spans, self_masks);
        h = t.add(h, a);
        let n = layer_norm(t, ps, &format!("{p}.ln2"), h);
        let (c, node) = attention(t, ps, &format!("{p}.xattn"), heads, n, kv, &x.spans, kv_spans, &full);
        h = t.add(h, c);
        last_cross = Some(node);
        let n = layer_norm(t, ps, &format!("{p}.ln3"), h);
        let f = ffn(t, ps, &format!("{p}.ffn"), n);
        h = t.add(h, f);
    }
    let out = layer_norm(t, ps, &format!("{prefix}.ln_f"), h);
    (x.with_var(out), last_cross)
}
