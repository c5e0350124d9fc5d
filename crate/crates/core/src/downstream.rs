//! Task adaptation of a pretrained model: report retrieval, report
//! generation, diagnosis classification and visual question answering.

use std::cmp::Ordering;

use ndarray::{concatenate, s, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, AttnMask, Span, Tape, Var};
use crate::corpus::{vqa_source_id, Corpus, CorpusRecord, QuestionType, Split};
use crate::error::{Error, Result};
use crate::feature_queue::UNIT_NORM_TOL;
use crate::injection::N_LABELS;
use crate::metrics::{self, recall_at_k};
use crate::model::{Batch, Knowledge, ModelState};
use crate::neural::layers::{self, Packed};
use crate::neural::net::{Net, ProjHead, MATCH_CROSS, TEXT_STACK};
use crate::neural::{generate, Strategy, TokenMode};
use crate::objectives::{softmax_rows, LossWeights};
use crate::params::{AdamW, Init, ParamStore};
use crate::pretrain::{
    check_grads, image_features, text_projection, train, BatchSampler, PretrainOptions, StepEnv, StepLog, StepPlan,
};
use crate::scalar::Scalar;

/// Images per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 32;
pub const DEFAULT_RERANK_TOP_M: usize = 16;
pub const CLS_HEAD: &str = "cls.head";
pub const VQA_TYPE_HEAD: &str = "vqa.type";
/// Type-classifier probability at or above which a question is routed as open-ended.
pub const VQA_ROUTE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Retrieval,
    Generation,
    Classification,
    Vqa,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneOptions {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Classification: heads read knowledge-enhanced features instead of the
    /// image encoder output. VQA: knowledge injection stays active.
    pub use_knowledge: bool,
    /// ITM re-ranking depth for finetuned retrieval; 0 disables it.
    pub rerank_top_m: usize,
    /// Generation length cap in tokens.
    pub max_len: usize,
    pub beam_width: usize,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self::for_task(Task::Retrieval)
    }
}

impl FinetuneOptions {
    pub fn for_task(task: Task) -> Self {
        let (lr, use_knowledge) = match task {
            Task::Retrieval => (5e-5, true),
            Task::Generation => (1e-5, true),
            Task::Classification => (1e-5, false),
            Task::Vqa => (5e-3, true),
        };
        Self {
            steps: 500,
            batch_size: 16,
            lr,
            weight_decay: 0.02,
            use_knowledge,
            rerank_top_m: DEFAULT_RERANK_TOP_M,
            max_len: 48,
            beam_width: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("finetune batch_size {} < 2", self.batch_size)));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("finetune lr must be positive and weight_decay nonnegative".into()));
        }
        if self.beam_width == 0 || self.max_len < 2 {
            return Err(Error::Config("beam_width must be positive and max_len at least 2".into()));
        }
        Ok(())
    }

    pub fn strategy(&self) -> Strategy {
        if self.beam_width == 1 {
            Strategy::Greedy
        } else {
            Strategy::Beam(self.beam_width)
        }
    }
}

// ---------------------------------------------------------------------------
// embeddings

/// Projected image features and the full knowledge-enhanced feature rows of
/// every image.
#[derive(Clone, Debug)]
pub struct ImageEmbeddings<T> {
    pub proj: Array2<T>,
    pub feats: Vec<Array2<T>>,
}

fn split_rows<T: Scalar>(t: &Tape<T>, packed: &Packed) -> Vec<Array2<T>> {
    let v = t.value(packed.var);
    packed.spans.iter().map(|sp| v.slice(s![sp.start..sp.end(), ..]).to_owned()).collect()
}

/// Image side of the pretraining pipeline (injection with retrieval from the
/// report queue) for the records at `indices`.
pub fn embed_images<T: Scalar>(
    state: &ModelState<T>,
    know: &Knowledge,
    opts: &PretrainOptions,
    corpus: &Corpus,
    indices: &[usize],
) -> Result<ImageEmbeddings<T>> {
    let net = state.net();
    let env = StepEnv::for_state(state, know, opts, corpus);
    let mut proj = Vec::new();
    let mut feats = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let batch = Batch::from_corpus(corpus, chunk, &state.tokenizer, state.cfg.image_size)?;
        let mut t = Tape::new();
        let f = image_features(&mut t, &net, &batch, &env, &mut StepPlan::default())?;
        let pooled = net.pooled(&mut t, &f);
        let p = net.project(&mut t, ProjHead::Image, pooled);
        proj.push(t.value(p).clone());
        feats.extend(split_rows(&t, &f));
    }
    Ok(ImageEmbeddings { proj: stack_rows(&proj, state.cfg.proj_dim), feats })
}

/// Projected `[CLS]` report features of the records at `indices`.
pub fn embed_texts<T: Scalar>(state: &ModelState<T>, corpus: &Corpus, indices: &[usize]) -> Array2<T> {
    let net = state.net();
    let mut out = Vec::new();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let cls: Vec<Vec<u32>> = chunk
            .iter()
            .map(|&i| state.tokenizer.tokenize_unpadded(&corpus.records[i].report, TokenMode::EncodeCls))
            .collect();
        let mut t = Tape::new();
        let p = text_projection(&mut t, &net, &cls);
        out.push(t.value(p).clone());
    }
    stack_rows(&out, state.cfg.proj_dim)
}

fn stack_rows<T: Scalar>(parts: &[Array2<T>], cols: usize) -> Array2<T> {
    if parts.is_empty() {
        return Array2::zeros((0, cols));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).expect("equal widths")
}

/// Match probability of each (image features, `[Encode]` text) pair.
pub fn itm_match_probs<T: Scalar>(net: &Net<'_, T>, feats: &[&Array2<T>], texts: &[&[u32]]) -> Result<Vec<f64>> {
    if feats.is_empty() {
        return Ok(Vec::new());
    }
    let lens: Vec<usize> = feats.iter().map(|f| f.nrows()).collect();
    let views: Vec<_> = feats.iter().map(|f| f.view()).collect();
    let mut t = Tape::new();
    let kv = t.constant(concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?);
    let logits = net.itm_logits(&mut t, kv, &Span::pack(&lens), texts)?;
    let p = softmax_rows(t.value(logits).view());
    Ok(p.column(1).iter().map(|e| e.as_f64()).collect())
}

// ---------------------------------------------------------------------------
// retrieval

/// Gallery of paired image and text projections.
#[derive(Clone, Debug)]
pub struct RetrievalIndex<T> {
    pub img: Array2<T>,
    pub txt: Array2<T>,
    pub ids: Vec<u64>,
}

impl<T: Scalar> RetrievalIndex<T> {
    pub fn new(img: Array2<T>, txt: Array2<T>, ids: Vec<u64>) -> Result<Self> {
        if img.dim() != txt.dim() || img.nrows() != ids.len() {
            return Err(Error::Shape(format!("index of {:?} images, {:?} texts, {} ids", img.dim(), txt.dim(), ids.len())));
        }
        for (name, m) in [("image", &img), ("text", &txt)] {
            for (r, row) in m.rows().into_iter().enumerate() {
                let norm = row.iter().map(|e| e.as_f64().powi(2)).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 10.0 * UNIT_NORM_TOL {
                    return Err(Error::Precondition(format!("{name} row {r} has norm {norm}")));
                }
            }
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Precondition("duplicate gallery ids".into()));
        }
        Ok(Self { img, txt, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Image queries ranking reports.
    I2t,
    /// Report queries ranking images.
    T2i,
}

/// Optional ITM re-scoring of the first `top_m` candidates; `score` maps
/// gallery positions to match probabilities.
pub struct Rerank<'a> {
    pub top_m: usize,
    pub score: &'a mut dyn FnMut(&[usize]) -> Result<Vec<f64>>,
}

/// Gallery positions by descending cosine similarity; ties keep gallery order.
pub fn rank_positions<T: Scalar>(query: ArrayView1<T>, gallery: &Array2<T>) -> Vec<usize> {
    let sims = gallery.dot(&query);
    let mut order: Vec<usize> = (0..gallery.nrows()).collect();
    order.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap_or(Ordering::Equal));
    order
}

/// Stable re-sort of the first `scores.len()` entries of `order` by descending score.
pub fn rerank_positions(order: &mut [usize], scores: &[f64]) {
    let m = scores.len().min(order.len());
    let mut top: Vec<(usize, f64)> = order[..m].iter().copied().zip(scores.iter().copied()).collect();
    top.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal));
    for (slot, (pos, _)) in order.iter_mut().zip(top) {
        *slot = pos;
    }
}

pub fn rank_gallery<T: Scalar>(
    query: ArrayView1<T>,
    index: &RetrievalIndex<T>,
    direction: Direction,
    rerank: Option<Rerank<'_>>,
) -> Result<Vec<u64>> {
    if index.is_empty() {
        return Err(Error::Precondition("empty retrieval gallery".into()));
    }
    let gallery = match direction {
        Direction::I2t => &index.txt,
        Direction::T2i => &index.img,
    };
    let mut order = rank_positions(query, gallery);
    if let Some(r) = rerank {
        let m = r.top_m.min(order.len());
        if m > 0 {
            let scores = (r.score)(&order[..m])?;
            rerank_positions(&mut order, &scores);
        }
    }
    Ok(order.into_iter().map(|p| index.ids[p]).collect())
}

/// Ranked id lists for every query in both directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rankings {
    pub queries: Vec<u64>,
    pub i2t: Vec<Vec<u64>>,
    pub t2i: Vec<Vec<u64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallSet {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

impl RecallSet {
    pub fn from_rankings(rankings: &[Vec<u64>], targets: &[u64]) -> Self {
        Self {
            r1: recall_at_k(rankings, targets, 1),
            r5: recall_at_k(rankings, targets, 5),
            r10: recall_at_k(rankings, targets, 10),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub gallery_size: usize,
    /// Report retrieval (image queries).
    pub i2t: RecallSet,
    /// Image retrieval (report queries).
    pub t2i: RecallSet,
}

impl RetrievalReport {
    pub fn from_rankings(r: &Rankings) -> Self {
        Self {
            gallery_size: r.queries.len(),
            i2t: RecallSet::from_rankings(&r.i2t, &r.queries),
            t2i: RecallSet::from_rankings(&r.t2i, &r.queries),
        }
    }

    pub fn mean_r1(&self) -> f64 {
        (self.i2t.r1 + self.t2i.r1) / 2.0
    }
}

/// Ranks the paired gallery at `indices` against itself in both directions,
/// re-scoring the first `rerank_top_m` candidates with the matching head when
/// nonzero.
pub fn retrieval_rankings<T: Scalar>(
    state: &ModelState<T>,
    know: &Knowledge,
    opts: &PretrainOptions,
    corpus: &Corpus,
    indices: &[usize],
    rerank_top_m: usize,
) -> Result<Rankings> {
    let emb = embed_images(state, know, opts, corpus, indices)?;
    let txt = embed_texts(state, corpus, indices);
    let ids: Vec<u64> = indices.iter().map(|&i| corpus.records[i].id).collect();
    let index = RetrievalIndex::new(emb.proj, txt, ids.clone())?;
    let matched: Vec<Vec<u32>> = indices
        .iter()
        .map(|&i| state.tokenizer.tokenize_unpadded(&corpus.records[i].report, TokenMode::EncodeMatch))
        .collect();
    let net = state.net();
    let mut i2t = Vec::with_capacity(ids.len());
    let mut t2i = Vec::with_capacity(ids.len());
    for q in 0..ids.len() {
        let mut score_text = |pos: &[usize]| {
            let feats = vec![&emb.feats[q]; pos.len()];
            let texts: Vec<&[u32]> = pos.iter().map(|&p| matched[p].as_slice()).collect();
            itm_match_probs(&net, &feats, &texts)
        };
        let rr = (rerank_top_m > 0).then(|| Rerank { top_m: rerank_top_m, score: &mut score_text });
        i2t.push(rank_gallery(index.img.row(q), &index, Direction::I2t, rr)?);
        let mut score_image = |pos: &[usize]| {
            let feats: Vec<&Array2<T>> = pos.iter().map(|&p| &emb.feats[p]).collect();
            let texts = vec![matched[q].as_slice(); pos.len()];
            itm_match_probs(&net, &feats, &texts)
        };
        let rr = (rerank_top_m > 0).then(|| Rerank { top_m: rerank_top_m, score: &mut score_image });
        t2i.push(rank_gallery(index.txt.row(q), &index, Direction::T2i, rr)?);
    }
    Ok(Rankings { queries: ids, i2t, t2i })
}

pub fn evaluate_retrieval<T: Scalar>(
    state: &ModelState<T>,
    know: &Knowledge,
    opts: &PretrainOptions,
    corpus: &Corpus,
    indices: &[usize],
    rerank_top_m: usize,
) -> Result<RetrievalReport> {
    Ok(RetrievalReport::from_rankings(&retrieval_rankings(state, know, opts, corpus, indices, rerank_top_m)?))
}

// ---------------------------------------------------------------------------
// finetuning through the pretraining step

fn finetune_opts(popts: &PretrainOptions, f: &FinetuneOptions, weights: LossWeights) -> PretrainOptions {
    PretrainOptions {
        steps: f.steps,
        batch_size: f.batch_size,
        lr: f.lr,
        weight_decay: f.weight_decay,
        warmup_steps: 0,
        update_report_queue: false,
        weights,
        ..popts.clone()
    }
}

fn begin_finetune<T: Scalar>(state: &mut ModelState<T>, f: &FinetuneOptions) -> Result<()> {
    f.validate()?;
    state.optimizer = AdamW::new(f.lr, f.weight_decay);
    Ok(())
}

/// ITC + ITM finetuning; the decoder is frozen.
pub fn finetune_retrieval<T: Scalar>(
    state: &mut ModelState<T>,
    corpus: &Corpus,
    know: &Knowledge,
    popts: &PretrainOptions,
    f: &FinetuneOptions,
    on_step: impl FnMut(&ModelState<T>, &StepLog) -> Result<()>,
) -> Result<()> {
    begin_finetune(state, f)?;
    let opts = finetune_opts(popts, f, LossWeights { itc: 1.0, itm: 1.0, lm: 0.0, mlc: 0.0 });
    train(state, corpus, know, &opts, &retrieval_trainable, on_step)
}

pub fn retrieval_trainable(name: &str) -> bool {
    !name.starts_with("dec.") && name != "temp.mlc"
}

/// LM finetuning through the full injection pipeline; the matching head,
/// projections and temperatures are frozen.
pub fn finetune_generation<T: Scalar>(
    state: &mut ModelState<T>,
    corpus: &Corpus,
    know: &Knowledge,
    popts: &PretrainOptions,
    f: &FinetuneOptions,
    on_step: impl FnMut(&ModelState<T>, &StepLog) -> Result<()>,
) -> Result<()> {
    begin_finetune(state, f)?;
    let opts = finetune_opts(popts, f, LossWeights { itc: 0.0, itm: 0.0, lm: 1.0, mlc: 0.0 });
    train(state, corpus, know, &opts, &generation_trainable, on_step)
}

pub fn generation_trainable(name: &str) -> bool {
    !(name.starts_with("itm.head") || name.starts_with("proj.") || name.starts_with("temp."))
}

/// Generated reports for the records at `indices`.
pub fn generate_reports<T: Scalar>(
    state: &ModelState<T>,
    know: &Knowledge,
    opts: &PretrainOptions,
    corpus: &Corpus,
    indices: &[usize],
    max_len: usize,
    strategy: Strategy,
) -> Result<Vec<String>> {
    let emb = embed_images(state, know, opts, corpus, indices)?;
    let net = state.net();
    emb.feats
        .iter()
        .map(|f| Ok(state.tokenizer.decode(&generate(&net, f, max_len, strategy)?)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
}

impl GenerationReport {
    pub fn score(candidates: &[String], references: &[String]) -> Self {
        let refs: Vec<Vec<String>> = references.iter().map(|r| vec![r.clone()]).collect();
        Self {
            bleu4: metrics::bleu4(candidates, &refs),
            rouge_l: metrics::rouge_l(candidates, &refs),
            cider_d: metrics::cider_d(candidates, &refs, metrics::CIDER_SIGMA),
        }
    }
}

// ---------------------------------------------------------------------------
// custom-loss finetuning

/// Optimizer loop over `pool` with a task loss built by `loss`; returns the
/// per-step losses.
fn custom_loop<T: Scalar>(
    state: &mut ModelState<T>,
    f: &FinetuneOptions,
    pool: Vec<usize>,
    trainable: &dyn Fn(&str) -> bool,
    mut loss: impl FnMut(&mut Tape<T>, &ModelState<T>, &[usize]) -> Result<Var>,
    mut on_step: impl FnMut(u64, f64) -> Result<()>,
) -> Result<Vec<f64>> {
    begin_finetune(state, f)?;
    let mut sampler = BatchSampler::new(pool, f.batch_size)?;
    let mut losses = Vec::with_capacity(f.steps as usize);
    for step in 0..f.steps {
        let idx = sampler.next(&mut state.rng).to_vec();
        let (value, grads) = {
            let mut t = Tape::new();
            let l = loss(&mut t, state, &idx)?;
            (t.scalar(l).as_f64(), t.backward(l))
        };
        if !value.is_finite() {
            return Err(Error::NonFinite { what: "finetune loss".into(), step, detail: format!("{value}") });
        }
        check_grads(&grads, state.params.names().map(str::to_string).collect::<Vec<_>>().into_iter(), step)?;
        state.optimizer.update(&mut state.params, &grads.into_params(), trainable);
        losses.push(value);
        on_step(step, value)?;
    }
    Ok(losses)
}

// ---------------------------------------------------------------------------
// classification

/// Adds zero-initialized `d x 14` classification heads if absent.
pub fn add_classifier<T: Scalar>(state: &mut ModelState<T>) {
    let d = state.cfg.d_model;
    if !state.params.contains(&format!("{CLS_HEAD}.w")) {
        state.params.insert(format!("{CLS_HEAD}.w"), Array2::zeros((d, N_LABELS)));
        state.params.insert(format!("{CLS_HEAD}.b"), Array2::zeros((1, N_LABELS)));
    }
}

/// Class-token rows the heads read: the image encoder output, or the
/// knowledge-enhanced features when `use_knowledge` is set.
fn class_features<T: Scalar>(
    t: &mut Tape<T>,
    net: &Net<'_, T>,
    batch: &Batch<T>,
    env: &StepEnv<'_, T>,
    use_knowledge: bool,
) -> Result<Var> {
    let f = if use_knowledge {
        image_features(t, net, batch, env, &mut StepPlan::default())?
    } else {
        net.encode_images(t, &batch.image_refs())?
    };
    Ok(net.pooled(t, &f))
}

pub fn classification_trainable(use_knowledge: bool) -> impl Fn(&str) -> bool {
    move |name: &str| {
        name.starts_with(CLS_HEAD) || name.starts_with("img.") || (use_knowledge && !name.starts_with("dec."))
    }
}

/// Trains the 14 heads (and the image encoder) with BCE on the training labels.
pub fn finetune_classification<T: Scalar>(
    state: &mut ModelState<T>,
    corpus: &Corpus,
    know: &Knowledge,
    popts: &PretrainOptions,
    f: &FinetuneOptions,
    on_step: impl FnMut(u64, f64) -> Result<()>,
) -> Result<Vec<f64>> {
    add_classifier(state);
    let uk = f.use_knowledge;
    let loss = |t: &mut Tape<T>, st: &ModelState<T>, idx: &[usize]| {
        let batch = Batch::from_corpus(corpus, idx, &st.tokenizer, st.cfg.image_size)?;
        let net = st.net();
        let env = StepEnv::for_state(st, know, popts, corpus);
        let x = class_features(t, &net, &batch, &env, uk)?;
        let logits = layers::linear(t, &st.params, CLS_HEAD, x);
        Ok(t.bce_with_logits(logits, batch.labels.clone()))
    };
    custom_loop(state, f, corpus.split_indices(Split::Train), &classification_trainable(uk), loss, on_step)
}

/// `N x 14` label probabilities for the records at `indices`.
pub fn classify<T: Scalar>(
    state: &ModelState<T>,
    know: &Knowledge,
    popts: &PretrainOptions,
    corpus: &Corpus,
    indices: &[usize],
    use_knowledge: bool,
) -> Result<Array2<f64>> {
    if !state.params.contains(&format!("{CLS_HEAD}.w")) {
        return Err(Error::Precondition("model has no classification heads".into()));
    }
    let net = state.net();
    let env = StepEnv::for_state(state, know, popts, corpus);
    let mut out = Vec::new();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let batch = Batch::from_corpus(corpus, chunk, &state.tokenizer, state.cfg.image_size)?;
        let mut t = Tape::new();
        let x = class_features(&mut t, &net, &batch, &env, use_knowledge)?;
        let logits = layers::linear(&mut t, &state.params, CLS_HEAD, x);
        out.push(t.value(logits).mapv(|e| sigmoid(e).as_f64()));
    }
    Ok(stack_rows(&out, N_LABELS))
}

/// Label matrix of the records at `indices`.
pub fn label_matrix(corpus: &Corpus, indices: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((indices.len(), N_LABELS), |(r, c)| corpus.records[indices[r]].labels[c] as f64)
}

// ---------------------------------------------------------------------------
// visual question answering

/// Answer vocabularies of the two question types.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaHead {
    pub open_answers: Vec<String>,
    pub closed_answers: Vec<String>,
}

impl VqaHead {
    pub fn new(open_answers: Vec<String>, closed_answers: Vec<String>) -> Result<Self> {
        if open_answers.is_empty() || closed_answers.is_empty() {
            return Err(Error::Precondition("empty answer vocabulary".into()));
        }
        if open_answers.iter().any(|a| closed_answers.contains(a)) {
            return Err(Error::Precondition("answer vocabularies overlap".into()));
        }
        Ok(Self { open_answers, closed_answers })
    }

    /// Sorted distinct answers of each type.
    pub fn from_records<'r>(records: impl IntoIterator<Item = &'r CorpusRecord>) -> Result<Self> {
        let mut open = Vec::new();
        let mut closed = Vec::new();
        for r in records {
            let (Some(a), Some(q)) = (&r.answer, r.qtype) else { continue };
            match q {
                QuestionType::Open => open.push(a.clone()),
                QuestionType::Closed => closed.push(a.clone()),
            }
        }
        for v in [&mut open, &mut closed] {
            v.sort();
            v.dedup();
        }
        Self::new(open, closed)
    }

    pub fn answers(&self, q: QuestionType) -> &[String] {
        match q {
            QuestionType::Open => &self.open_answers,
            QuestionType::Closed => &self.closed_answers,
        }
    }
}

pub fn vqa_prefix(q: QuestionType) -> &'static str {
    match q {
        QuestionType::Open => "vqa.open",
        QuestionType::Closed => "vqa.closed",
    }
}

/// Adds the type classifier, two copies of the pretrained matching encoder and
/// the two answer classifiers.
pub fn add_vqa_head<T: Scalar, R: Rng>(state: &mut ModelState<T>, head: &VqaHead, rng: &mut R) {
    let d = state.cfg.d_model;
    for q in [QuestionType::Open, QuestionType::Closed] {
        let p = vqa_prefix(q);
        state.params.copy_prefix(&format!("{MATCH_CROSS}."), &format!("{p}.x."));
        layers::add_linear(&mut state.params, rng, &format!("{p}.head"), d, head.answers(q).len(), true);
    }
    state.params.insert(format!("{VQA_TYPE_HEAD}.w"), Init::Zeros.build(d, 1, rng));
    state.params.insert(format!("{VQA_TYPE_HEAD}.b"), Init::Zeros.build(1, 1, rng));
}

pub fn vqa_trainable(name: &str) -> bool {
    name.starts_with("vqa.") || name.starts_with("img.") || name.starts_with(TEXT_STACK)
}

/// How questions reach an answer classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    /// Follow the type classifier.
    Auto,
    Force(QuestionType),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaPrediction {
    pub id: u64,
    pub qtype: QuestionType,
    pub p_open: f64,
    pub answer: String,
}

struct VqaInputs<T> {
    batch: Batch<T>,
    cls: Vec<Vec<u32>>,
    matched: Vec<Vec<u32>>,
}

fn vqa_inputs<T: Scalar>(state: &ModelState<T>, corpus: &Corpus, records: &[&CorpusRecord]) -> Result<VqaInputs<T>> {
    let src: Vec<usize> = records
        .iter()
        .map(|r| corpus.index_of(vqa_source_id(r.id)).ok_or_else(|| Error::Precondition(format!("no image for question {}", r.id))))
        .collect::<Result<_>>()?;
    let question = |r: &CorpusRecord| r.question.clone().unwrap_or_default();
    Ok(VqaInputs {
        batch: Batch::from_corpus(corpus, &src, &state.tokenizer, state.cfg.image_size)?,
        cls: records.iter().map(|r| state.tokenizer.tokenize_unpadded(&question(r), TokenMode::EncodeCls)).collect(),
        matched: records.iter().map(|r| state.tokenizer.tokenize_unpadded(&question(r), TokenMode::EncodeMatch)).collect(),
    })
}

/// Type logits (`B x 1`, open = positive) and answer logits for the rows in
/// `groups` routed to each type.
fn vqa_forward<T: Scalar>(
    t: &mut Tape<T>,
    net: &Net<'_, T>,
    inputs: &VqaInputs<T>,
    env: &StepEnv<'_, T>,
    use_knowledge: bool,
    groups: &[(QuestionType, Vec<usize>)],
) -> Result<(Var, Vec<Var>)> {
    let f = if use_knowledge {
        image_features(t, net, &inputs.batch, env, &mut StepPlan::default())?
    } else {
        net.encode_images(t, &inputs.batch.image_refs())?
    };
    let qs: Vec<&[u32]> = inputs.cls.iter().map(Vec::as_slice).collect();
    let enc = net.encode_tokens(t, crate::neural::net::TEXT_STACK, &qs);
    let pooled = net.pooled(t, &enc);
    let type_logits = layers::linear(t, net.ps, VQA_TYPE_HEAD, pooled);
    let mut answers = Vec::with_capacity(groups.len());
    for (q, rows) in groups {
        let texts: Vec<&[u32]> = rows.iter().map(|&r| inputs.matched[r].as_slice()).collect();
        let spans: Vec<Span> = rows.iter().map(|&r| f.spans[r]).collect();
        let query = net.embed_tokens(t, &texts);
        let masks = vec![AttnMask::Full; texts.len()];
        let p = vqa_prefix(*q);
        let (out, _) = net.cross_encode(t, &format!("{p}.x"), &query, f.var, &spans, Some(&masks))?;
        let pooled = net.pooled(t, &out);
        answers.push(layers::linear(t, net.ps, &format!("{p}.head"), pooled));
    }
    Ok((type_logits, answers))
}

fn answer_index(head: &VqaHead, r: &CorpusRecord) -> Result<(QuestionType, usize)> {
    let q = r.qtype.ok_or_else(|| Error::Precondition(format!("record {} has no question type", r.id)))?;
    let a = r.answer.as_deref().unwrap_or_default();
    let i = head
        .answers(q)
        .iter()
        .position(|x| x == a)
        .ok_or_else(|| Error::Precondition(format!("answer {a:?} outside the vocabulary")))?;
    Ok((q, i))
}

/// Trains the type classifier with type-balanced BCE and both answer
/// classifiers with cross-entropy on ground-truth types.
pub fn finetune_vqa<T: Scalar>(
    state: &mut ModelState<T>,
    corpus: &Corpus,
    know: &Knowledge,
    popts: &PretrainOptions,
    f: &FinetuneOptions,
    head: &VqaHead,
    records: &[CorpusRecord],
    on_step: impl FnMut(u64, f64) -> Result<()>,
) -> Result<Vec<f64>> {
    if !state.params.contains(&format!("{VQA_TYPE_HEAD}.w")) {
        let mut rng = state.rng.clone();
        add_vqa_head(state, head, &mut rng);
        state.rng = rng;
    }
    let train: Vec<usize> = (0..records.len()).filter(|&i| records[i].split == Split::Train).collect();
    let uk = f.use_knowledge;
    let loss = |t: &mut Tape<T>, st: &ModelState<T>, idx: &[usize]| {
        let recs: Vec<&CorpusRecord> = idx.iter().map(|&i| &records[train[i]]).collect();
        let inputs = vqa_inputs(st, corpus, &recs)?;
        let labels: Vec<(QuestionType, usize)> = recs.iter().map(|r| answer_index(head, r)).collect::<Result<_>>()?;
        let groups: Vec<(QuestionType, Vec<usize>)> = [QuestionType::Open, QuestionType::Closed]
            .into_iter()
            .map(|q| (q, (0..recs.len()).filter(|&r| labels[r].0 == q).collect::<Vec<_>>()))
            .filter(|(_, rows)| !rows.is_empty())
            .collect();
        let net = st.net();
        let env = StepEnv::for_state(st, know, popts, corpus);
        let (type_logits, answers) = vqa_forward(t, &net, &inputs, &env, uk, &groups)?;
        // type loss averaged per type so the rarer open questions weigh equally
        let mut total = t.constant(Array2::zeros((1, 1)));
        for (q, rows) in &groups {
            let target = T::lit(if *q == QuestionType::Open { 1.0 } else { 0.0 });
            let sel = t.rows(type_logits, rows);
            let bce = t.bce_with_logits(sel, Array2::from_elem((rows.len(), 1), target));
            let bce = t.scale(bce, T::lit(1.0 / groups.len() as f64));
            total = t.add(total, bce);
        }
        for ((q, rows), logits) in groups.iter().zip(answers) {
            let n = head.answers(*q).len();
            let mut target = Array2::zeros((rows.len(), n));
            for (k, &r) in rows.iter().enumerate() {
                target[[k, labels[r].1]] = T::one();
            }
            let ce = t.cross_entropy(logits, target, vec![T::one(); rows.len()]);
            total = t.add(total, ce);
        }
        Ok(total)
    };
    custom_loop(state, f, (0..train.len()).collect(), &vqa_trainable, loss, on_step)
}

/// Answers `records`, routing each question by the type classifier unless
/// `route` forces a type.
#[allow(clippy::too_many_arguments)]
pub fn vqa_answer<T: Scalar>(
    state: &ModelState<T>,
    corpus: &Corpus,
    know: &Knowledge,
    popts: &PretrainOptions,
    head: &VqaHead,
    records: &[&CorpusRecord],
    use_knowledge: bool,
    route: Route,
) -> Result<Vec<VqaPrediction>> {
    let net = state.net();
    let env = StepEnv::for_state(state, know, popts, corpus);
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(EVAL_CHUNK) {
        let inputs = vqa_inputs(state, corpus, chunk)?;
        // type probabilities first, then answers along the chosen routes
        let mut t = Tape::new();
        let (type_logits, _) = vqa_forward(&mut t, &net, &inputs, &env, use_knowledge, &[])?;
        let p_open: Vec<f64> = t.value(type_logits).column(0).iter().map(|&e| sigmoid(e).as_f64()).collect();
        let routed: Vec<QuestionType> = p_open
            .iter()
            .map(|&p| match route {
                Route::Force(q) => q,
                Route::Auto if p >= VQA_ROUTE_THRESHOLD => QuestionType::Open,
                Route::Auto => QuestionType::Closed,
            })
            .collect();
        let groups: Vec<(QuestionType, Vec<usize>)> = [QuestionType::Open, QuestionType::Closed]
            .into_iter()
            .map(|q| (q, (0..chunk.len()).filter(|&r| routed[r] == q).collect::<Vec<_>>()))
            .filter(|(_, rows)| !rows.is_empty())
            .collect();
        let mut t = Tape::new();
        let (_, answers) = vqa_forward(&mut t, &net, &inputs, &env, use_knowledge, &groups)?;
        let mut answer = vec![String::new(); chunk.len()];
        for ((q, rows), logits) in groups.iter().zip(answers) {
            let vocab = head.answers(*q);
            for (k, &r) in rows.iter().enumerate() {
                let row = t.value(logits).row(k);
                let best = (0..vocab.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                answer[r] = vocab[best].clone();
            }
        }
        for (k, r) in chunk.iter().enumerate() {
            out.push(VqaPrediction { id: r.id, qtype: routed[k], p_open: p_open[k], answer: std::mem::take(&mut answer[k]) });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaReport {
    pub closed_accuracy: f64,
    pub open_accuracy: f64,
    pub overall_accuracy: f64,
    pub type_accuracy: f64,
}

impl VqaReport {
    pub fn score(records: &[&CorpusRecord], preds: &[VqaPrediction]) -> Self {
        let acc = |filter: &dyn Fn(&CorpusRecord) -> bool| {
            let (mut hit, mut n) = (0usize, 0usize);
            for (r, p) in records.iter().zip(preds) {
                if filter(r) {
                    n += 1;
                    hit += usize::from(r.answer.as_deref() == Some(p.answer.as_str()));
                }
            }
            if n == 0 {
                0.0
            } else {
                hit as f64 / n as f64
            }
        };
        let types = records.iter().zip(preds).filter(|(r, p)| r.qtype == Some(p.qtype)).count();
        Self {
            closed_accuracy: acc(&|r| r.qtype == Some(QuestionType::Closed)),
            open_accuracy: acc(&|r| r.qtype == Some(QuestionType::Open)),
            overall_accuracy: acc(&|_| true),
            type_accuracy: if records.is_empty() { 0.0 } else { types as f64 / records.len() as f64 },
        }
    }
}

/// Parameters whose values differ between two stores with the same names.
pub fn changed_params<T: Scalar>(a: &ParamStore<T>, b: &ParamStore<T>) -> Vec<String> {
    a.iter().filter(|(n, v)| b.get(n).is_some_and(|w| w != *v)).map(|(n, _)| n.to_string()).collect()
}
