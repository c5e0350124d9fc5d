//! Knowledge injection: general knowledge into image features, text-based
//! multi-label classification on the result, then retrieval and injection of
//! specific knowledge.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::autograd::{sigmoid, softplus, Span, Tape, Var};
use crate::error::{Error, Result};
use crate::feature_queue::FeatureQueue;
use crate::graph_knowledge::{node_word_indices, KnowledgeGraph, NodeKind};
use crate::neural::layers::Packed;
use crate::neural::net::{Net, ProjHead, GK_CROSS, SK_CROSS};
use crate::neural::{TokenMode, Tokenizer};
use crate::scalar::Scalar;
use crate::triplet_store::{extract_entities, linearize, query_triplets, EntityLexicon, Triplet, TripletStore};

/// Disease labels in the fixed ChestX-ray14 order, as lowercase text.
pub const CHEST_LABELS: [&str; 14] = [
    "atelectasis",
    "cardiomegaly",
    "effusion",
    "infiltration",
    "mass",
    "nodule",
    "pneumonia",
    "pneumothorax",
    "consolidation",
    "edema",
    "emphysema",
    "fibrosis",
    "pleural thickening",
    "hernia",
];

pub const N_LABELS: usize = 14;

/// Default number of reports retrieved for specific knowledge.
pub const DEFAULT_TOP_K: usize = 3;

/// The 14 class names and their `[CLS]`-mode token sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSet {
    names: Vec<String>,
    tokens: Vec<Vec<u32>>,
}

impl LabelSet {
    pub fn new(names: Vec<String>, tokenizer: &Tokenizer) -> Result<Self> {
        if names.len() != N_LABELS {
            return Err(Error::Config(format!("label set needs {N_LABELS} names, got {}", names.len())));
        }
        let tokens = names.iter().map(|n| tokenizer.tokenize_unpadded(n, TokenMode::EncodeCls)).collect();
        Ok(Self { names, tokens })
    }

    pub fn chest(tokenizer: &Tokenizer) -> Self {
        Self::new(CHEST_LABELS.iter().map(|s| s.to_string()).collect(), tokenizer).expect("14 names")
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tokens(&self) -> &[Vec<u32>] {
        &self.tokens
    }
}

/// Graph plus the token ids of every node name, ready for embedding.
#[derive(Clone, Debug)]
pub struct GraphInputs {
    pub graph: KnowledgeGraph,
    pub node_words: Vec<Vec<usize>>,
    pub kinds: Vec<NodeKind>,
}

impl GraphInputs {
    pub fn new(graph: KnowledgeGraph, tokenizer: &Tokenizer) -> Result<Self> {
        let node_words = node_word_indices(&graph, |w| tokenizer.id(w).map(|i| i as usize))?;
        let kinds = graph.nodes().iter().map(|n| n.kind).collect();
        Ok(Self { graph, node_words, kinds })
    }

    /// `f_gk`: node embeddings encoded under the adjacency mask.
    pub fn encode<T: Scalar>(&self, t: &mut Tape<T>, net: &Net<'_, T>) -> Result<Var> {
        let emb = net.node_embeddings(t, &self.node_words, &self.kinds);
        net.encode_graph(t, emb, self.graph.adjacency_shared())
    }
}

/// Specific-knowledge resources: lexicon, triplet base and retrieval settings.
#[derive(Clone, Debug)]
pub struct SpecificKnowledge {
    pub lexicon: EntityLexicon,
    pub store: TripletStore,
    pub top_k: usize,
    pub cap: usize,
}

/// `(f_v^gk, final cross-attention node)`: image rows query the graph features.
pub fn inject_gk<T: Scalar>(
    t: &mut Tape<T>,
    net: &Net<'_, T>,
    f_v: &Packed,
    f_gk: Var,
) -> Result<(Packed, Option<Var>)> {
    let n = t.value(f_gk).nrows();
    let spans = vec![Span::new(0, n); f_v.spans.len()];
    net.cross_encode(t, GK_CROSS, f_v, f_gk, &spans, None)
}

/// Projected, unit-norm label features (`14 x p`).
pub fn label_features<T: Scalar>(t: &mut Tape<T>, net: &Net<'_, T>, labels: &LabelSet) -> Var {
    let seqs: Vec<&[u32]> = labels.tokens.iter().map(Vec::as_slice).collect();
    let enc = net.encode_tokens(t, crate::neural::net::TEXT_STACK, &seqs);
    let pooled = net.pooled(t, &enc);
    net.project(t, ProjHead::Text, pooled)
}

/// `p_C = image_proj · label_projᵀ` (`B x 14`).
pub fn mlc_scores<T: Scalar>(t: &mut Tape<T>, img_proj: Var, label_proj: Var) -> Var {
    t.matmul_t(img_proj, label_proj)
}

/// Plain-array form of [`mlc_scores`] for one image.
pub fn mlc_forward<T: Scalar>(img_proj: ArrayView1<T>, label_proj: ArrayView2<T>) -> Array1<T> {
    label_proj.dot(&img_proj)
}

/// Mean over classes of `BCE(sigmoid(p / tau), y)`.
pub fn mlc_loss<T: Scalar>(p: ArrayView1<T>, y: &[bool], tau: T) -> T {
    let total = p.iter().zip(y).fold(T::zero(), |acc, (&pi, &yi)| {
        let x = pi / tau;
        acc + softplus(x) - if yi { x } else { T::zero() }
    });
    total / T::lit(y.len() as f64)
}

pub fn mlc_probabilities<T: Scalar>(p: ArrayView1<T>, tau: T) -> Array1<T> {
    p.mapv(|x| sigmoid(x / tau))
}

/// Tape form of [`mlc_loss`] over a batch of score rows.
pub fn mlc_loss_tape<T: Scalar>(t: &mut Tape<T>, scores: Var, temp: Var, labels: &Array2<T>) -> Var {
    let x = t.div_by(scores, temp);
    t.bce_with_logits(x, labels.clone())
}

/// Outcome of specific-knowledge retrieval for one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Retrieval {
    pub ids: Vec<u64>,
    pub similarities: Vec<f64>,
    pub entities: Vec<String>,
    pub triplets: Vec<Triplet>,
}

/// Top-k report retrieval from `queue` with `query` (projected `f_v^gk` row 0),
/// then entity extraction in rank order and triplet lookup.
pub fn retrieve_specific<'c, T: Scalar>(
    query: ArrayView1<T>,
    queue: &FeatureQueue<T>,
    reports: impl Fn(u64) -> Option<&'c str>,
    sk: &SpecificKnowledge,
    exclude: Option<u64>,
) -> Result<Retrieval> {
    if queue.is_empty() {
        return Ok(Retrieval::default());
    }
    let hits = queue.top_k_excluding(query, sk.top_k, |id| Some(id) == exclude)?;
    let mut out = Retrieval::default();
    for (id, sim) in hits {
        let text = reports(id).ok_or_else(|| Error::Precondition(format!("no report text for id {id}")))?;
        out.ids.push(id);
        out.similarities.push(sim.as_f64());
        for e in extract_entities(text, &sk.lexicon) {
            if !out.entities.contains(&e) {
                out.entities.push(e);
            }
        }
    }
    out.triplets = query_triplets(&sk.store, &out.entities, sk.cap);
    Ok(out)
}

/// Token sequence of the specific-knowledge sentence; `[CLS]` alone when empty.
pub fn sk_tokens(triplets: &[Triplet], tokenizer: &Tokenizer, max_len: usize) -> Vec<u32> {
    linearize(triplets, tokenizer, max_len)
}

/// `(f_v^{gk→sk}, final cross-attention node, f_sk)`.
pub fn inject_sk<T: Scalar>(
    t: &mut Tape<T>,
    net: &Net<'_, T>,
    f_v_gk: &Packed,
    sk_seqs: &[Vec<u32>],
) -> Result<(Packed, Option<Var>, Packed)> {
    if sk_seqs.len() != f_v_gk.spans.len() {
        return Err(Error::Shape(format!("{} knowledge sentences for {} images", sk_seqs.len(), f_v_gk.spans.len())));
    }
    let seqs: Vec<&[u32]> = sk_seqs.iter().map(Vec::as_slice).collect();
    let f_sk = net.encode_tokens(t, net.sk_stack(), &seqs);
    let (out, node) = net.cross_encode(t, SK_CROSS, f_v_gk, f_sk.var, &f_sk.spans, None)?;
    Ok((out, node, f_sk))
}

/// Head-averaged attention maps of one sequence from an attention node.
pub fn mean_attention<T: Scalar>(t: &Tape<T>, node: Option<Var>, seq: usize) -> Option<Array2<T>> {
    let probs = t.attention_probs(node?)?;
    let heads = probs.get(seq)?;
    let mut acc = heads[0].clone();
    for h in &heads[1..] {
        acc += h;
    }
    Some(acc.mapv(|e| e / T::lit(heads.len() as f64)))
}

/// Everything produced by one inference-time injection pass over a single image.
#[derive(Clone, Debug)]
pub struct InjectionOutput<T> {
    pub f_v_gk: Array2<T>,
    pub f_v_gk_sk: Array2<T>,
    pub retrieved_ids: Vec<u64>,
    pub triplets: Vec<Triplet>,
    /// Image rows × graph nodes.
    pub attn_gk: Array2<T>,
    /// Image rows × knowledge-sentence tokens.
    pub attn_sk: Array2<T>,
    pub sk_tokens: Vec<u32>,
    pub mlc_scores: Array1<T>,
}

/// Runs encode_image → GK injection → MLC → SK retrieval → SK injection for
/// one image with attention capture.
#[allow(clippy::too_many_arguments)]
pub fn run_injection<'c, T: Scalar>(
    net: &Net<'_, T>,
    graph: &GraphInputs,
    labels: &LabelSet,
    image: &ndarray::Array3<T>,
    queue: &FeatureQueue<T>,
    reports: impl Fn(u64) -> Option<&'c str>,
    sk: &SpecificKnowledge,
    tokenizer: &Tokenizer,
) -> Result<InjectionOutput<T>> {
    let mut t = Tape::new();
    let f_gk = graph.encode(&mut t, net)?;
    let f_v = net.encode_images(&mut t, &[image])?;
    let (f_v_gk, gk_node) = inject_gk(&mut t, net, &f_v, f_gk)?;
    let pooled = net.pooled(&mut t, &f_v_gk);
    let img_proj = net.project(&mut t, ProjHead::Image, pooled);
    let label_proj = label_features(&mut t, net, labels);
    let scores = mlc_scores(&mut t, img_proj, label_proj);
    let query = t.value(img_proj).row(0).to_owned();
    let retrieval = if queue.len() >= sk.top_k {
        retrieve_specific(query.view(), queue, reports, sk, None)?
    } else {
        Retrieval::default()
    };
    let seq = sk_tokens(&retrieval.triplets, tokenizer, net.cfg.sk_max_len);
    let (f_v_gk_sk, sk_node, _) = inject_sk(&mut t, net, &f_v_gk, std::slice::from_ref(&seq))?;
    let attn_gk = mean_attention(&t, gk_node, 0).ok_or_else(|| Error::Precondition("no gk attention".into()))?;
    let attn_sk = mean_attention(&t, sk_node, 0).ok_or_else(|| Error::Precondition("no sk attention".into()))?;
    Ok(InjectionOutput {
        f_v_gk: t.value(f_v_gk.var).clone(),
        f_v_gk_sk: t.value(f_v_gk_sk.var).clone(),
        retrieved_ids: retrieval.ids,
        triplets: retrieval.triplets,
        attn_gk,
        attn_sk,
        sk_tokens: seq,
        mlc_scores: t.value(scores).row(0).to_owned(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn mlc_dot_products() {
        let label: Array2<f64> = array![[0.6, 0.8], [-0.8, 0.6]];
        let p = mlc_forward(array![0.6, 0.8].view(), label.view());
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert!(p[1].abs() < 1e-12);
    }

    #[test]
    fn mlc_loss_at_zero_is_ln2() {
        let p = Array1::<f64>::zeros(14);
        let y: Vec<bool> = (0..14).map(|i| i % 3 == 0).collect();
        assert!((mlc_loss(p.view(), &y, 0.07) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mlc_loss_vanishes_when_confident() {
        let y = [true, false, true];
        let p: Array1<f64> = array![1.0, -1.0, 1.0];
        assert!(mlc_loss(p.view(), &y, 1e-3) < 1e-12);
    }

    #[test]
    fn mlc_loss_matches_scalar_formula() {
        let p: Array1<f64> = array![0.3, -0.7, 0.1, 0.95];
        let y = [true, false, false, true];
        let tau: f64 = 0.25;
        let oracle: f64 = p
            .iter()
            .zip(y)
            .map(|(&pi, yi)| {
                let s = 1.0 / (1.0 + (-pi / tau).exp());
                if yi {
                    -s.ln()
                } else {
                    -(1.0 - s).ln()
                }
            })
            .sum::<f64>()
            / 4.0;
        assert!((mlc_loss(p.view(), &y, tau) - oracle).abs() < 1e-12);
        let mut t = Tape::new();
        let scores = t.constant(p.clone().insert_axis(ndarray::Axis(0)));
        let temp = t.constant(array![[tau]]);
        let labels = Array2::from_shape_fn((1, 4), |(_, j)| if y[j] { 1.0 } else { 0.0 });
        let l = mlc_loss_tape(&mut t, scores, temp, &labels);
        assert!((t.scalar(l) - oracle).abs() < 1e-12);
    }

    #[test]
    fn label_set_has_fourteen_in_table_order() {
        let tok = Tokenizer::from_texts(CHEST_LABELS, 8);
        let ls = LabelSet::chest(&tok);
        assert_eq!(ls.names().len(), 14);
        assert_eq!(ls.names()[0], "atelectasis");
        assert_eq!(ls.names()[13], "hernia");
        assert!(ls.tokens().iter().all(|s| s[0] == crate::neural::tokenizer::CLS));
        assert!(LabelSet::new(vec!["a".into()], &tok).is_err());
    }
}
