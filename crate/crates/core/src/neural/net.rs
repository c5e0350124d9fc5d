//! Image encoder, masked-attention text encoders, cross-modal encoders, the
//! causal report decoder, and the projection heads, all read from one
//! [`ParamStore`].

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3};
use rand::Rng;

use crate::autograd::{AttnMask, Span, Tape, Var};
use crate::error::{Error, Result};
use crate::graph_knowledge::NodeKind;
use crate::neural::config::EncoderConfig;
use crate::neural::layers::{self, Packed, INIT_STD};
use crate::neural::tokenizer::{BOS, EOS, PAD};
use crate::params::{Init, ParamStore};
use crate::scalar::Scalar;

pub const IMAGE_STACK: &str = "img.enc";
pub const TEXT_STACK: &str = "txt.enc";
pub const GK_STACK: &str = "gk.enc";
pub const SK_STACK: &str = "sk.enc";
pub const GK_CROSS: &str = "x.gk2v";
pub const SK_CROSS: &str = "x.sk2v";
pub const MATCH_CROSS: &str = "x.v2t";
pub const DECODER: &str = "dec";

/// Initial value of both learnable temperatures.
pub const INIT_TEMPERATURE: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjHead {
    Image,
    Text,
}

impl ProjHead {
    fn prefix(self) -> &'static str {
        match self {
            ProjHead::Image => "proj.img",
            ProjHead::Text => "proj.txt",
        }
    }
}

/// Freshly initialized parameters for every pretraining component.
pub fn init_params<T: Scalar, R: Rng>(cfg: &EncoderConfig, vocab_size: usize, rng: &mut R) -> ParamStore<T> {
    let d = cfg.d_model;
    let (l, m) = (cfg.n_layers, cfg.ffn_mult);
    let mut ps = ParamStore::new();
    let normal = Init::TruncNormal(INIT_STD);
    ps.insert("embed.tok", normal.build(vocab_size, d, rng));
    ps.insert("embed.pos", normal.build(cfg.max_positions(), d, rng));
    ps.insert("graph.struct", normal.build(3, d, rng));

    layers::add_linear(&mut ps, rng, "img.patch", cfg.patch_dim(), d, true);
    ps.insert("img.cls", normal.build(1, d, rng));
    ps.insert("img.pos", normal.build(cfg.image_tokens(), d, rng));
    layers::add_encoder_stack(&mut ps, rng, IMAGE_STACK, d, l, m);

    layers::add_encoder_stack(&mut ps, rng, TEXT_STACK, d, l, m);
    if !cfg.tie_knowledge_encoders {
        layers::add_encoder_stack(&mut ps, rng, GK_STACK, d, l, m);
        layers::add_encoder_stack(&mut ps, rng, SK_STACK, d, l, m);
    }
    for prefix in [GK_CROSS, SK_CROSS, MATCH_CROSS, DECODER] {
        layers::add_cross_stack(&mut ps, rng, prefix, d, l, m);
    }
    layers::add_linear(&mut ps, rng, "dec.head", d, vocab_size, true);
    layers::add_linear(&mut ps, rng, "proj.img", d, cfg.proj_dim, cfg.proj_bias);
    layers::add_linear(&mut ps, rng, "proj.txt", d, cfg.proj_dim, cfg.proj_bias);
    layers::add_linear(&mut ps, rng, "itm.head", d, 2, true);
    ps.insert("temp.itc", Init::Const(INIT_TEMPERATURE).build(1, 1, rng));
    ps.insert("temp.mlc", Init::Const(INIT_TEMPERATURE).build(1, 1, rng));
    ps
}

/// Read-only view binding a configuration to one parameter set (online or momentum).
#[derive(Clone, Copy)]
pub struct Net<'a, T> {
    pub cfg: &'a EncoderConfig,
    pub ps: &'a ParamStore<T>,
}

impl<'a, T: Scalar> Net<'a, T> {
    pub fn new(cfg: &'a EncoderConfig, ps: &'a ParamStore<T>) -> Self {
        Self { cfg, ps }
    }

    pub fn heads(&self) -> usize {
        self.cfg.n_heads
    }

    pub fn gk_stack(&self) -> &'static str {
        if self.cfg.tie_knowledge_encoders {
            TEXT_STACK
        } else {
            GK_STACK
        }
    }

    pub fn sk_stack(&self) -> &'static str {
        if self.cfg.tie_knowledge_encoders {
            TEXT_STACK
        } else {
            SK_STACK
        }
    }

    /// Token plus position embeddings for each sequence.
    pub fn embed_tokens(&self, t: &mut Tape<T>, seqs: &[&[u32]]) -> Packed {
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().map(|&i| i as usize)).collect();
        let pos: Vec<usize> = seqs.iter().flat_map(|s| 0..s.len()).collect();
        let tok = t.param(self.ps, "embed.tok");
        let pe = t.param(self.ps, "embed.pos");
        let e = t.rows(tok, &ids);
        let p = t.rows(pe, &pos);
        let x = t.add(e, p);
        Packed::new(x, Span::pack(&seqs.iter().map(|s| s.len()).collect::<Vec<_>>()))
    }

    /// Encodes token sequences with `stack`. `[PAD]` positions are hidden from
    /// every query.
    pub fn encode_tokens(&self, t: &mut Tape<T>, stack: &str, seqs: &[&[u32]]) -> Packed {
        let x = self.embed_tokens(t, seqs);
        let masks: Vec<AttnMask> = seqs.iter().map(|s| pad_mask(s, None)).collect();
        layers::encoder_stack(t, self.ps, stack, self.heads(), &x, &masks)
    }

    /// Single-sequence text encoding with an optional visible mask (allowed = true).
    pub fn encode_text(
        &self,
        t: &mut Tape<T>,
        stack: &str,
        tokens: &[u32],
        visible: Option<&Array2<bool>>,
    ) -> Result<Packed> {
        if tokens.is_empty() || tokens.len() > self.cfg.max_positions() {
            return Err(Error::Shape(format!("token sequence of length {}", tokens.len())));
        }
        if let Some(m) = visible {
            if m.dim() != (tokens.len(), tokens.len()) {
                return Err(Error::Shape(format!(
                    "mask {:?} for {} tokens",
                    m.dim(),
                    tokens.len()
                )));
            }
        }
        let x = self.embed_tokens(t, &[tokens]);
        let mask = pad_mask(tokens, visible);
        if let AttnMask::Explicit(m) = &mask {
            if m.rows().into_iter().any(|r| !r.iter().any(|&e| e)) {
                return Err(Error::Precondition("attention mask row without a visible key".into()));
            }
        }
        Ok(layers::encoder_stack(t, self.ps, stack, self.heads(), &x, &[mask]))
    }

    /// Splits images into row-major non-overlapping patches, one row per patch.
    pub fn patchify(&self, images: &[&Array3<T>]) -> Result<Array2<T>> {
        let c = self.cfg;
        let (ps, side) = (c.patch_size, c.patches_per_side());
        let mut out = Array2::zeros((images.len() * c.n_patches(), c.patch_dim()));
        for (b, img) in images.iter().enumerate() {
            if img.dim() != (c.image_size, c.image_size, c.channels) {
                return Err(Error::Shape(format!(
                    "image {:?}, expected ({}, {}, {})",
                    img.dim(),
                    c.image_size,
                    c.image_size,
                    c.channels
                )));
            }
            for py in 0..side {
                for px in 0..side {
                    let row = b * c.n_patches() + py * side + px;
                    let mut k = 0;
                    for dy in 0..ps {
                        for dx in 0..ps {
                            for ch in 0..c.channels {
                                out[[row, k]] = img[[py * ps + dy, px * ps + dx, ch]];
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Image features `(1 + n_patches) x d` per image; row 0 is the class position.
    pub fn encode_images(&self, t: &mut Tape<T>, images: &[&Array3<T>]) -> Result<Packed> {
        let patches = self.patchify(images)?;
        let np = self.cfg.n_patches();
        let x = t.constant(patches);
        let e = layers::linear(t, self.ps, "img.patch", x);
        let cls = t.param(self.ps, "img.cls");
        let both = t.concat_rows(&[cls, e]);
        let mut order = Vec::with_capacity(images.len() * (np + 1));
        for b in 0..images.len() {
            order.push(0);
            order.extend((0..np).map(|i| 1 + b * np + i));
        }
        let seq = t.rows(both, &order);
        let pos = t.param(self.ps, "img.pos");
        let pos_idx: Vec<usize> = (0..images.len()).flat_map(|_| 0..np + 1).collect();
        let p = t.rows(pos, &pos_idx);
        let x = t.add(seq, p);
        let packed = Packed::new(x, Span::pack(&vec![np + 1; images.len()]));
        let masks = vec![AttnMask::Full; images.len()];
        Ok(layers::encoder_stack(t, self.ps, IMAGE_STACK, self.heads(), &packed, &masks))
    }

    /// Node embeddings: mean word embedding of the name plus the kind embedding.
    pub fn node_embeddings(&self, t: &mut Tape<T>, words: &[Vec<usize>], kinds: &[NodeKind]) -> Var {
        let flat: Vec<usize> = words.iter().flatten().copied().collect();
        let mut avg = Array2::zeros((words.len(), flat.len()));
        let mut col = 0;
        for (i, w) in words.iter().enumerate() {
            for _ in w {
                avg[[i, col]] = T::one() / T::lit(w.len() as f64);
                col += 1;
            }
        }
        let tok = t.param(self.ps, "embed.tok");
        let rows = t.rows(tok, &flat);
        let avg = t.constant(avg);
        let word = t.matmul(avg, rows);
        let st = t.param(self.ps, "graph.struct");
        let kind_idx: Vec<usize> = kinds.iter().map(|k| k.index()).collect();
        let s = t.rows(st, &kind_idx);
        t.add(word, s)
    }

    /// General-knowledge encoding with the adjacency as visible mask.
    pub fn encode_graph(&self, t: &mut Tape<T>, embeddings: Var, adjacency: Arc<Array2<bool>>) -> Result<Var> {
        let n = t.value(embeddings).nrows();
        if adjacency.dim() != (n, n) {
            return Err(Error::Shape(format!("adjacency {:?} for {n} nodes", adjacency.dim())));
        }
        let x = Packed::new(embeddings, vec![Span::new(0, n)]);
        let out = layers::encoder_stack(t, self.ps, self.gk_stack(), self.heads(), &x, &[AttnMask::Explicit(adjacency)]);
        Ok(out.var)
    }

    pub fn cross_encode(
        &self,
        t: &mut Tape<T>,
        prefix: &str,
        query: &Packed,
        kv: Var,
        kv_spans: &[Span],
        self_masks: Option<&[AttnMask]>,
    ) -> Result<(Packed, Option<Var>)> {
        if kv_spans.len() != query.spans.len() {
            return Err(Error::Shape(format!("{} key spans for {} queries", kv_spans.len(), query.spans.len())));
        }
        let kv_rows = t.value(kv).nrows();
        if kv_spans.iter().any(|s| s.len == 0 || s.end() > kv_rows) {
            return Err(Error::Shape("key span outside key rows".into()));
        }
        let full;
        let masks = match self_masks {
            Some(m) => m,
            None => {
                full = vec![AttnMask::Full; query.spans.len()];
                &full
            }
        };
        Ok(layers::cross_stack(t, self.ps, prefix, self.heads(), query, kv, kv_spans, masks))
    }

    /// Row 0 of every sequence.
    pub fn pooled(&self, t: &mut Tape<T>, x: &Packed) -> Var {
        t.rows(x.var, &x.first_rows())
    }

    /// Linear head then unit L2 normalization.
    pub fn project(&self, t: &mut Tape<T>, head: ProjHead, rows: Var) -> Var {
        let y = layers::linear(t, self.ps, head.prefix(), rows);
        t.l2_normalize(y)
    }

    /// Two-class match logits from the `[Encode]` position of each text attended
    /// against its image rows.
    pub fn itm_logits(&self, t: &mut Tape<T>, img: Var, img_spans: &[Span], texts: &[&[u32]]) -> Result<Var> {
        let q = self.embed_tokens(t, texts);
        let masks: Vec<AttnMask> = texts.iter().map(|s| pad_mask(s, None)).collect();
        let (out, _) = self.cross_encode(t, MATCH_CROSS, &q, img, img_spans, Some(&masks))?;
        let pooled = self.pooled(t, &out);
        Ok(layers::linear(t, self.ps, "itm.head", pooled))
    }

    /// Next-token logits at every prefix position (`Σ len x vocab`).
    pub fn decoder_logits(&self, t: &mut Tape<T>, img: Var, img_spans: &[Span], prefixes: &[&[u32]]) -> Result<Packed> {
        let q = self.embed_tokens(t, prefixes);
        let masks = vec![AttnMask::Causal; prefixes.len()];
        let (h, _) = self.cross_encode(t, DECODER, &q, img, img_spans, Some(&masks))?;
        let logits = layers::linear(t, self.ps, "dec.head", h.var);
        Ok(h.with_var(logits))
    }
}

/// Hides `[PAD]` keys, combined with an optional visible mask.
fn pad_mask(tokens: &[u32], visible: Option<&Array2<bool>>) -> AttnMask {
    let has_pad = tokens.contains(&PAD);
    match (visible, has_pad) {
        (None, false) => AttnMask::Full,
        (vis, _) => {
            let n = tokens.len();
            AttnMask::Explicit(Arc::new(Array2::from_shape_fn((n, n), |(i, j)| {
                tokens[j] != PAD && vis.map_or(true, |m| m[[i, j]])
            })))
        }
    }
}

/// Decoding strategy for [`generate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

/// Log-probabilities of the next token after `prefix` (which starts with `[BOS]`).
pub fn next_token_log_probs<T: Scalar>(net: &Net<'_, T>, image: &Array2<T>, prefix: &[u32]) -> Result<Array1<T>> {
    if prefix.first() != Some(&BOS) {
        return Err(Error::Precondition("decoder prefix must start with [BOS]".into()));
    }
    let mut t = Tape::new();
    let img = t.constant(image.clone());
    let spans = [Span::new(0, image.nrows())];
    let out = net.decoder_logits(&mut t, img, &spans, &[prefix])?;
    let logits = t.value(out.var).row(prefix.len() - 1).to_owned();
    Ok(log_softmax(logits))
}

fn log_softmax<T: Scalar>(x: Array1<T>) -> Array1<T> {
    let lse = crate::autograd::log_sum_exp(x.iter().copied());
    x.mapv(|e| e - lse)
}

/// Autoregressive generation from one image's feature rows. Stops at `[EOS]`
/// or `max_len` tokens; the returned ids exclude `[BOS]`.
pub fn generate<T: Scalar>(net: &Net<'_, T>, image: &Array2<T>, max_len: usize, strategy: Strategy) -> Result<Vec<u32>> {
    let limit = max_len.min(net.cfg.max_positions());
    match strategy {
        Strategy::Greedy => {
            let mut seq = vec![BOS];
            while seq.len() < limit {
                let lp = next_token_log_probs(net, image, &seq)?;
                let next = argmax(&lp);
                seq.push(next);
                if next == EOS {
                    break;
                }
            }
            Ok(seq[1..].to_vec())
        }
        Strategy::Beam(width) => beam_search(net, image, limit, width.max(1)),
    }
}

fn argmax<T: Scalar>(v: &Array1<T>) -> u32 {
    let mut best = 0;
    for (i, &e) in v.iter().enumerate() {
        if e > v[best] {
            best = i;
        }
    }
    best as u32
}

fn beam_search<T: Scalar>(net: &Net<'_, T>, image: &Array2<T>, limit: usize, width: usize) -> Result<Vec<u32>> {
    let mut live: Vec<(Vec<u32>, f64)> = vec![(vec![BOS], 0.0)];
    let mut done: Vec<(Vec<u32>, f64)> = Vec::new();
    while !live.is_empty() && live[0].0.len() < limit {
        let best_done = done.iter().map(|d| d.1).fold(f64::NEG_INFINITY, f64::max);
        if live.iter().all(|l| l.1 <= best_done) {
            break;
        }
        let mut t = Tape::new();
        let img = t.constant(image.clone());
        let spans = vec![Span::new(0, image.nrows()); live.len()];
        let prefixes: Vec<&[u32]> = live.iter().map(|(s, _)| s.as_slice()).collect();
        let out = net.decoder_logits(&mut t, img, &spans, &prefixes)?;
        let logits = t.value(out.var);
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        for (b, sp) in out.spans.iter().enumerate() {
            let lp = log_softmax(logits.row(sp.end() - 1).to_owned());
            for (tok, &l) in lp.iter().enumerate() {
                cands.push((live[b].1 + l.as_f64(), b, tok as u32));
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(width);
        for (score, b, tok) in cands.into_iter().take(width) {
            let mut seq = live[b].0.clone();
            seq.push(tok);
            if tok == EOS {
                done.push((seq, score));
            } else {
                next.push((seq, score));
            }
        }
        live = next;
    }
    let mut best: Option<(Vec<u32>, f64)> = None;
    for cand in done.into_iter().chain(live) {
        if best.as_ref().map_or(true, |b| cand.1 > b.1) {
            best = Some(cand);
        }
    }
    let seq = best.map(|b| b.0).unwrap_or_else(|| vec![BOS]);
    Ok(seq[1..].to_vec())
}
