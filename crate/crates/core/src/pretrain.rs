//! One pretraining step (GK injection → MLC → SK retrieval → SK injection →
//! ITC/ITM/LM) and the pretraining loop.

use ndarray::{concatenate, Array2, Axis};
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result};
use crate::feature_queue::{momentum_update, FeatureQueue, MomentumCoeff};
use crate::injection::{
    inject_gk, inject_sk, label_features, mlc_loss_tape, mlc_scores, retrieve_specific, sk_tokens, DEFAULT_TOP_K,
};
use crate::model::{Batch, Knowledge, ModelState};
use crate::neural::layers::Packed;
use crate::neural::net::{Net, ProjHead, TEXT_STACK};
use crate::neural::tokenizer::CLS;
use crate::neural::Tokenizer;
use crate::objectives::{
    itc_loss_tape, itm_loss_tape, lm_loss_tape, one_hot_targets, softmax_rows, total_loss, weighted_sum, LossParts,
    LossWeights, TEMP_MAX, TEMP_MIN,
};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::triplet_store::DEFAULT_TRIPLET_CAP;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainOptions {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Momentum-encoder coefficient.
    pub momentum: f64,
    /// Contrastive queue length `M`.
    pub itc_queue: usize,
    /// Report queue length `n_Q`.
    pub report_queue: usize,
    pub top_k: usize,
    pub triplet_cap: usize,
    /// Steps during which specific knowledge stays empty.
    pub warmup_steps: u64,
    /// Keep the paired report out of its own retrieval.
    pub exclude_own_report: bool,
    pub label_smoothing: f64,
    /// `false` trains the variant without graph or triplet knowledge (and without MLC).
    pub use_knowledge: bool,
    /// Weight of momentum-similarity soft targets in ITC; 0 gives one-hot targets.
    pub itc_soft_alpha: f64,
    /// Push momentum report features into the retrieval queue after each step.
    pub update_report_queue: bool,
    pub weights: LossWeights,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr: 1e-4,
            weight_decay: 0.02,
            momentum: 0.995,
            itc_queue: 256,
            report_queue: 512,
            top_k: DEFAULT_TOP_K,
            triplet_cap: DEFAULT_TRIPLET_CAP,
            warmup_steps: 200,
            exclude_own_report: true,
            label_smoothing: 0.1,
            use_knowledge: true,
            itc_soft_alpha: 0.0,
            update_report_queue: true,
            weights: LossWeights::default(),
        }
    }
}

impl PretrainOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size {} < 2 leaves no in-batch negatives", self.batch_size));
        }
        if self.batch_size > self.itc_queue || self.batch_size > self.report_queue {
            return bad("queues must hold at least one batch".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.top_k == 0 {
            return bad("top_k must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr must be positive and weight_decay nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) || !(0.0..=1.0).contains(&self.itc_soft_alpha) {
            return bad("label_smoothing in [0,1) and itc_soft_alpha in [0,1] required".into());
        }
        self.weights.validate()
    }
}

/// Report text lookup by record id.
pub trait ReportSource {
    fn report(&self, id: u64) -> Option<&str>;
}

impl ReportSource for Corpus {
    fn report(&self, id: u64) -> Option<&str> {
        Corpus::report(self, id)
    }
}

impl ReportSource for std::collections::HashMap<u64, String> {
    fn report(&self, id: u64) -> Option<&str> {
        self.get(&id).map(String::as_str)
    }
}

/// Read-only context of one step.
pub struct StepEnv<'a, T> {
    pub opts: &'a PretrainOptions,
    pub know: &'a Knowledge,
    pub tokenizer: &'a Tokenizer,
    pub momentum: &'a ParamStore<T>,
    pub img_queue: &'a FeatureQueue<T>,
    pub txt_queue: &'a FeatureQueue<T>,
    pub report_queue: &'a FeatureQueue<T>,
    pub reports: &'a dyn ReportSource,
    pub step: u64,
    pub sk_max_len: usize,
}

impl<'a, T: Scalar> StepEnv<'a, T> {
    pub fn for_state(
        state: &'a ModelState<T>,
        know: &'a Knowledge,
        opts: &'a PretrainOptions,
        reports: &'a dyn ReportSource,
    ) -> Self {
        Self {
            opts,
            know,
            tokenizer: &state.tokenizer,
            momentum: &state.momentum,
            img_queue: &state.img_queue,
            txt_queue: &state.txt_queue,
            report_queue: &state.report_queue,
            reports,
            step: state.step,
            sk_max_len: state.cfg.sk_max_len,
        }
    }
}

/// Non-differentiable decisions of a step. Empty fields are filled during the
/// first forward pass; a filled plan replays the same decisions, which keeps
/// repeated evaluations (finite differences) on one smooth loss surface.
#[derive(Clone, Debug, Default)]
pub struct StepPlan<T> {
    pub sk: Option<Vec<Vec<u32>>>,
    pub retrieved: Vec<Vec<u64>>,
    pub momentum_img: Option<Array2<T>>,
    pub momentum_txt: Option<Array2<T>>,
    pub img_queue: Option<Array2<T>>,
    pub txt_queue: Option<Array2<T>>,
    /// Negative text for each image and negative image for each text.
    pub negatives: Option<(Vec<usize>, Vec<usize>)>,
}

/// Tape nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub itc: Var,
    pub itm: Var,
    pub lm: Var,
    pub mlc: Option<Var>,
    pub total: Var,
    pub label_proj: Option<Var>,
}

impl LossVars {
    pub fn parts<T: Scalar>(&self, t: &Tape<T>) -> LossParts {
        LossParts {
            itc: t.scalar(self.itc).as_f64(),
            itm: t.scalar(self.itm).as_f64(),
            lm: t.scalar(self.lm).as_f64(),
            mlc: self.mlc.map_or(0.0, |v| t.scalar(v).as_f64()),
        }
    }
}

/// Knowledge-enhanced image features `f_v^{gk→sk}` (or `f_v` without knowledge)
/// plus the MLC loss and label projections.
struct ImageSide {
    feats: Packed,
    mlc: Option<Var>,
    label_proj: Option<Var>,
}

fn image_side<T: Scalar>(
    t: &mut Tape<T>,
    net: &Net<'_, T>,
    batch: &Batch<T>,
    env: &StepEnv<'_, T>,
    plan: &mut StepPlan<T>,
    with_mlc: bool,
) -> Result<ImageSide> {
    let f_v = net.encode_images(t, &batch.image_refs())?;
    if !env.opts.use_knowledge {
        return Ok(ImageSide { feats: f_v, mlc: None, label_proj: None });
    }
    let f_gk = env.know.graph.encode(t, net)?;
    let (f_v_gk, _) = inject_gk(t, net, &f_v, f_gk)?;
    let pooled = net.pooled(t, &f_v_gk);
    let gk_proj = net.project(t, ProjHead::Image, pooled);
    let (mlc, label_proj) = if with_mlc {
        let label_proj = label_features(t, net, &env.know.labels);
        let scores = mlc_scores(t, gk_proj, label_proj);
        let temp = t.param(net.ps, "temp.mlc");
        (Some(mlc_loss_tape(t, scores, temp, &batch.labels)), Some(label_proj))
    } else {
        (None, None)
    };
    if plan.sk.is_none() {
        let queries = t.value(gk_proj).clone();
        let (seqs, ids) = specific_knowledge(&queries, batch, env)?;
        plan.sk = Some(seqs);
        plan.retrieved = ids;
    }
    let sk = plan.sk.as_ref().expect("filled above");
    let (feats, _, _) = inject_sk(t, net, &f_v_gk, sk)?;
    Ok(ImageSide { feats, mlc, label_proj })
}

/// Retrieved knowledge sentences per image; `[CLS]` alone during warmup or
/// while the report queue holds fewer than `top_k` entries.
fn specific_knowledge<T: Scalar>(
    queries: &Array2<T>,
    batch: &Batch<T>,
    env: &StepEnv<'_, T>,
) -> Result<(Vec<Vec<u32>>, Vec<Vec<u64>>)> {
    let active = env.step >= env.opts.warmup_steps && env.report_queue.len() >= env.opts.top_k;
    let mut seqs = Vec::with_capacity(batch.len());
    let mut ids = Vec::with_capacity(batch.len());
    for (row, &id) in queries.rows().into_iter().zip(&batch.ids) {
        if !active {
            seqs.push(vec![CLS]);
            ids.push(Vec::new());
            continue;
        }
        let exclude = env.opts.exclude_own_report.then_some(id);
        let r = retrieve_specific(row, env.report_queue, |i| env.reports.report(i), &env.know.sk, exclude)?;
        seqs.push(sk_tokens(&r.triplets, env.tokenizer, env.sk_max_len));
        ids.push(r.ids);
    }
    Ok((seqs, ids))
}

/// Projected text features (`B x p`) of `[CLS]` report tokens.
pub fn text_projection<T: Scalar>(t: &mut Tape<T>, net: &Net<'_, T>, cls: &[Vec<u32>]) -> Var {
    let seqs: Vec<&[u32]> = cls.iter().map(Vec::as_slice).collect();
    let enc = net.encode_tokens(t, TEXT_STACK, &seqs);
    let pooled = net.pooled(t, &enc);
    net.project(t, ProjHead::Text, pooled)
}

fn momentum_projections<T: Scalar>(
    net: &Net<'_, T>,
    batch: &Batch<T>,
    env: &StepEnv<'_, T>,
    plan: &mut StepPlan<T>,
) -> Result<(Array2<T>, Array2<T>)> {
    let mut t = Tape::new();
    let side = image_side(&mut t, net, batch, env, plan, false)?;
    let pooled = net.pooled(&mut t, &side.feats);
    let img = net.project(&mut t, ProjHead::Image, pooled);
    let txt = text_projection(&mut t, net, &batch.cls);
    Ok((t.value(img).clone(), t.value(txt).clone()))
}

fn sample_negative<R: Rng>(sims: ndarray::ArrayView1<f64>, positive: usize, rng: &mut R) -> usize {
    let max = sims.iter().enumerate().filter(|&(j, _)| j != positive).map(|(_, &s)| s).fold(f64::MIN, f64::max);
    let w: Vec<f64> = sims
        .iter()
        .enumerate()
        .map(|(j, &s)| if j == positive { 0.0 } else { (s - max).exp() })
        .collect();
    match WeightedIndex::new(&w) {
        Ok(dist) => dist.sample(rng),
        Err(_) => (positive + 1) % sims.len(),
    }
}

/// Knowledge-enhanced image features for `batch` without the MLC branch; the
/// retrieval decisions are recorded in (or replayed from) `plan`.
pub fn image_features<T: Scalar>(
    t: &mut Tape<T>,
    net: &Net<'_, T>,
    batch: &Batch<T>,
    env: &StepEnv<'_, T>,
    plan: &mut StepPlan<T>,
) -> Result<Packed> {
    Ok(image_side(t, net, batch, env, plan, false)?.feats)
}

/// Builds every loss of one step on `t`. `rng` is used only for negatives not
/// already fixed by `plan`. Terms with zero weight are not built and read 0.
pub fn forward_losses<T: Scalar, R: Rng>(
    t: &mut Tape<T>,
    net: &Net<'_, T>,
    batch: &Batch<T>,
    env: &StepEnv<'_, T>,
    plan: &mut StepPlan<T>,
    rng: &mut R,
) -> Result<LossVars> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::Precondition("matching needs at least 2 pairs per batch".into()));
    }
    let w = env.opts.weights;
    let side = image_side(t, net, batch, env, plan, w.mlc > 0.0)?;
    let f = side.feats;
    let zero = |t: &mut Tape<T>| t.constant(Array2::zeros((1, 1)));

    let (itc, itm) = if w.itc > 0.0 || w.itm > 0.0 {
        let pooled = net.pooled(t, &f);
        let img_proj = net.project(t, ProjHead::Image, pooled);
        let txt_proj = text_projection(t, net, &batch.cls);
        let temp = t.param(net.ps, "temp.itc");
        let tau = t.scalar(temp);
        let itc = if w.itc > 0.0 {
            contrastive(t, net, batch, env, plan, img_proj, txt_proj, temp)?
        } else {
            zero(t)
        };
        let itm = if w.itm > 0.0 {
            if plan.negatives.is_none() {
                let ip = t.value(img_proj).mapv(|e| e.as_f64());
                let tp = t.value(txt_proj).mapv(|e| e.as_f64());
                let s = ip.dot(&tp.t()) / tau.as_f64();
                let neg_txt = (0..b).map(|i| sample_negative(s.row(i), i, rng)).collect();
                let neg_img = (0..b).map(|i| sample_negative(s.column(i), i, rng)).collect();
                plan.negatives = Some((neg_txt, neg_img));
            }
            let (neg_txt, neg_img) = plan.negatives.clone().expect("filled above");
            let mut spans = Vec::with_capacity(3 * b);
            let mut texts: Vec<&[u32]> = Vec::with_capacity(3 * b);
            let mut labels = Vec::with_capacity(3 * b);
            for i in 0..b {
                for (img, txt, is_match) in [(i, i, true), (i, neg_txt[i], false), (neg_img[i], i, false)] {
                    spans.push(f.spans[img]);
                    texts.push(&batch.matched[txt]);
                    labels.push(is_match);
                }
            }
            let logits = net.itm_logits(t, f.var, &spans, &texts)?;
            itm_loss_tape(t, logits, &labels)
        } else {
            zero(t)
        };
        (itc, itm)
    } else {
        (zero(t), zero(t))
    };

    let lm = if w.lm > 0.0 {
        let prefixes: Vec<&[u32]> = batch.decode.iter().map(|s| &s[..s.len() - 1]).collect();
        let targets: Vec<u32> = batch.decode.iter().flat_map(|s| s[1..].iter().copied()).collect();
        let logits = net.decoder_logits(t, f.var, &f.spans, &prefixes)?;
        lm_loss_tape(t, logits.var, &targets, env.opts.label_smoothing)
    } else {
        zero(t)
    };

    let mut terms: Vec<(Var, f64)> =
        [(itc, w.itc), (itm, w.itm), (lm, w.lm)].into_iter().filter(|&(_, wt)| wt > 0.0).collect();
    if let Some(m) = side.mlc {
        terms.push((m, w.mlc));
    }
    if terms.is_empty() {
        return Err(Error::Config("every loss weight is zero".into()));
    }
    let total = weighted_sum(t, &terms);
    Ok(LossVars { itc, itm, lm, mlc: side.mlc, total, label_proj: side.label_proj })
}

/// ITC against the momentum batch projections followed by the queues.
#[allow(clippy::too_many_arguments)]
fn contrastive<T: Scalar>(
    t: &mut Tape<T>,
    net: &Net<'_, T>,
    batch: &Batch<T>,
    env: &StepEnv<'_, T>,
    plan: &mut StepPlan<T>,
    img_proj: Var,
    txt_proj: Var,
    temp: Var,
) -> Result<Var> {
    let b = batch.len();
    if plan.momentum_img.is_none() {
        let mnet = Net::new(net.cfg, env.momentum);
        let (mi, mt) = momentum_projections(&mnet, batch, env, plan)?;
        plan.momentum_img = Some(mi);
        plan.momentum_txt = Some(mt);
        plan.img_queue = Some(env.img_queue.snapshot());
        plan.txt_queue = Some(env.txt_queue.snapshot());
    }
    let mi = plan.momentum_img.as_ref().expect("filled above");
    let mt = plan.momentum_txt.as_ref().expect("filled above");
    let img_cands = concatenate![Axis(0), *mi, *plan.img_queue.as_ref().expect("filled above")];
    let txt_cands = concatenate![Axis(0), *mt, *plan.txt_queue.as_ref().expect("filled above")];
    let tau = t.scalar(temp);
    let n_cands = img_cands.nrows();
    let mut g_i2t = one_hot_targets::<T>(b, n_cands);
    let mut g_t2i = g_i2t.clone();
    let alpha = env.opts.itc_soft_alpha;
    if alpha > 0.0 {
        let a = T::lit(alpha);
        let soft_i2t = softmax_rows(mi.dot(&txt_cands.t()).mapv(|e| e / tau).view());
        let soft_t2i = softmax_rows(mt.dot(&img_cands.t()).mapv(|e| e / tau).view());
        g_i2t = g_i2t.mapv(|e| (T::one() - a) * e) + soft_i2t.mapv(|e| a * e);
        g_t2i = g_t2i.mapv(|e| (T::one() - a) * e) + soft_t2i.mapv(|e| a * e);
    }
    let ic = t.constant(img_cands);
    let tc = t.constant(txt_cands);
    Ok(itc_loss_tape(t, img_proj, txt_proj, ic, tc, temp, g_i2t, g_t2i))
}

/// Scalars logged after every step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub itc: f64,
    pub itm: f64,
    pub lm: f64,
    pub mlc: f64,
    pub tau: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,loss,itc,itm,lm,mlc,tau";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            self.step, self.loss, self.itc, self.itm, self.lm, self.mlc, self.tau
        )
    }
}

pub(crate) fn check_grads<T: Scalar>(grads: &Gradients<T>, names: impl Iterator<Item = String>, step: u64) -> Result<()> {
    for name in names {
        if let Some(g) = grads.param(&name) {
            if g.iter().any(|e| !e.is_finite()) {
                return Err(Error::NonFinite { what: format!("gradient of {name}"), step, detail: String::new() });
            }
        }
    }
    Ok(())
}

pub(crate) fn clamp_temperatures<T: Scalar>(ps: &mut ParamStore<T>) {
    for name in ["temp.itc", "temp.mlc"] {
        if let Some(v) = ps.get_mut(name) {
            v.mapv_inplace(|e| e.max(T::lit(TEMP_MIN)).min(T::lit(TEMP_MAX)));
        }
    }
}

/// Forward, backward, optimizer and momentum update, then queue writes.
pub fn pretrain_step<T: Scalar>(
    state: &mut ModelState<T>,
    batch: &Batch<T>,
    know: &Knowledge,
    opts: &PretrainOptions,
    reports: &dyn ReportSource,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<StepLog> {
    let mut plan = StepPlan::default();
    let mut rng = state.rng.clone();
    let (parts, tau, grads) = {
        let env = StepEnv::for_state(state, know, opts, reports);
        let net = Net::new(&state.cfg, &state.params);
        let mut t = Tape::new();
        let vars = forward_losses(&mut t, &net, batch, &env, &mut plan, &mut rng)?;
        let parts = vars.parts(&t);
        let grads = t.backward(vars.total);
        (parts, state.params.get("temp.itc").map_or(0.0, |v| v[[0, 0]].as_f64()), grads)
    };
    state.rng = rng;
    let loss = total_loss(parts, opts.weights, state.step)?;
    check_grads(&grads, state.params.names().map(str::to_string).collect::<Vec<_>>().into_iter(), state.step)?;
    state.optimizer.lr = opts.lr;
    state.optimizer.weight_decay = opts.weight_decay;
    state.optimizer.update(&mut state.params, &grads.into_params(), trainable);
    clamp_temperatures(&mut state.params);
    if !state.params.all_finite() {
        return Err(Error::NonFinite { what: "parameters".into(), step: state.step, detail: "after update".into() });
    }
    momentum_update(&state.params, &mut state.momentum, MomentumCoeff::new(opts.momentum)?)?;
    if let (Some(mi), Some(mt)) = (plan.momentum_img, plan.momentum_txt) {
        state.img_queue.enqueue(mi.view(), &batch.ids)?;
        state.txt_queue.enqueue(mt.view(), &batch.ids)?;
        if opts.update_report_queue {
            state.report_queue.enqueue(mt.view(), &batch.ids)?;
        }
    }
    let log = StepLog { step: state.step, loss, itc: parts.itc, itm: parts.itm, lm: parts.lm, mlc: parts.mlc, tau };
    state.step += 1;
    Ok(log)
}

/// Cycles through shuffled training indices in batches.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    pool: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl BatchSampler {
    pub fn new(pool: Vec<usize>, batch: usize) -> Result<Self> {
        if pool.len() < batch {
            return Err(Error::Config(format!("{} training records for batch size {batch}", pool.len())));
        }
        Ok(Self { pool, order: Vec::new(), pos: 0, batch })
    }

    pub fn next<R: Rng>(&mut self, rng: &mut R) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.order = self.pool.clone();
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let s = &self.order[self.pos..self.pos + self.batch];
        self.pos += self.batch;
        s
    }
}

/// Runs `opts.steps` pretraining steps on the training split, calling
/// `on_step` after each.
pub fn pretrain<T: Scalar>(
    state: &mut ModelState<T>,
    corpus: &Corpus,
    know: &Knowledge,
    opts: &PretrainOptions,
    on_step: impl FnMut(&ModelState<T>, &StepLog) -> Result<()>,
) -> Result<()> {
    train(state, corpus, know, opts, &|_| true, on_step)
}

/// [`pretrain`] restricted to the parameters accepted by `trainable`.
pub fn train<T: Scalar>(
    state: &mut ModelState<T>,
    corpus: &Corpus,
    know: &Knowledge,
    opts: &PretrainOptions,
    trainable: &dyn Fn(&str) -> bool,
    mut on_step: impl FnMut(&ModelState<T>, &StepLog) -> Result<()>,
) -> Result<()> {
    opts.validate()?;
    let mut sampler = BatchSampler::new(corpus.split_indices(Split::Train), opts.batch_size)?;
    for _ in 0..opts.steps {
        let idx = sampler.next(&mut state.rng).to_vec();
        let batch = Batch::from_corpus(corpus, &idx, &state.tokenizer, state.cfg.image_size)?;
        let log = pretrain_step(state, &batch, know, opts, corpus, trainable)?;
        on_step(state, &log)?;
    }
    Ok(())
}
