//! Finite-difference verification of every pretraining loss, run in `f64` on
//! the tiny configuration with the step's discrete decisions held fixed.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::corpus::{gen_corpus, Corpus, CorpusConfig, Split};
use crate::error::{Error, Result};
use crate::graph_knowledge::KnowledgeGraph;
use crate::model::{build_tokenizer, Batch, Knowledge, ModelState, QueueSizes};
use crate::neural::net::{Net, GK_CROSS};
use crate::neural::EncoderConfig;
use crate::params::ParamStore;
use crate::pretrain::{forward_losses, PretrainOptions, StepEnv, StepPlan};

pub const LOSS_NAMES: [&str; 5] = ["itc", "itm", "lm", "mlc", "total"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub h: f64,
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
    /// Random entries per tensor, in addition to the largest-gradient entry.
    pub samples: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub queue_len: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { h: 1e-5, tolerance: 1e-4, floor: 1e-5, samples: 2, seed: 11, batch_size: 2, queue_len: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryCheck {
    pub loss: String,
    pub param: String,
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checks: Vec<EntryCheck>,
    pub max_rel_error: f64,
    /// Index into `checks` of the worst entry.
    pub worst: Option<usize>,
    /// The classification loss has a nonzero gradient on the graph-injection cross encoder.
    pub mlc_reaches_gk_cross: bool,
    /// The language-modeling loss has no gradient path to the label prototypes.
    pub lm_ignores_labels: bool,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance && self.mlc_reaches_gk_cross && self.lm_ignores_labels
    }
}

pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Fixed inputs of one gradient check.
pub struct Fixture {
    pub state: ModelState<f64>,
    pub corpus: Corpus,
    pub know: Knowledge,
    pub batch: Batch<f64>,
    pub opts: PretrainOptions,
}

fn unit_rows<R: Rng>(n: usize, dim: usize, rng: &mut R) -> Array2<f64> {
    let mut a: Array2<f64> = Array2::from_shape_simple_fn((n, dim), || rng.gen_range(-1.0..1.0));
    for mut row in a.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }
    a
}

impl Fixture {
    /// Tiny model, `batch_size` training pairs and `queue_len` queued negatives;
    /// the report queue holds enough entries for specific-knowledge retrieval
    /// to be active.
    pub fn tiny(g: &GradcheckOptions) -> Result<Self> {
        let graph = KnowledgeGraph::default_chest();
        let corpus = gen_corpus(&CorpusConfig { seed: g.seed, n_records: 40, ..Default::default() }, &graph)?;
        let cfg = EncoderConfig::tiny();
        let tokenizer = build_tokenizer(&corpus, &[], cfg.max_text_len);
        let opts = PretrainOptions {
            batch_size: g.batch_size,
            itc_queue: g.queue_len.max(g.batch_size),
            report_queue: 4.max(g.batch_size),
            top_k: 2,
            warmup_steps: 0,
            ..Default::default()
        };
        let know = Knowledge::from_corpus(&corpus, &tokenizer, opts.top_k, opts.triplet_cap)?;
        let queues = QueueSizes { itc: opts.itc_queue, report: opts.report_queue };
        let mut state = ModelState::<f64>::new(cfg, tokenizer, queues, g.seed)?;
        let train = corpus.split_indices(Split::Train);
        let (batch_idx, rest) = train.split_at(g.batch_size);
        let p = state.cfg.proj_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(g.seed ^ 0x9e37);
        let queued: Vec<u64> = rest.iter().take(opts.report_queue).map(|&i| corpus.records[i].id).collect();
        state.report_queue.enqueue(unit_rows(queued.len(), p, &mut rng).view(), &queued)?;
        let m: Vec<u64> = queued[..g.queue_len].to_vec();
        state.img_queue.enqueue(unit_rows(m.len(), p, &mut rng).view(), &m)?;
        state.txt_queue.enqueue(unit_rows(m.len(), p, &mut rng).view(), &m)?;
        let batch = Batch::from_corpus(&corpus, batch_idx, &state.tokenizer, state.cfg.image_size)?;
        Ok(Self { state, corpus, know, batch, opts })
    }

    fn env(&self) -> StepEnv<'_, f64> {
        StepEnv {
            opts: &self.opts,
            know: &self.know,
            tokenizer: &self.state.tokenizer,
            momentum: &self.state.momentum,
            img_queue: &self.state.img_queue,
            txt_queue: &self.state.txt_queue,
            report_queue: &self.state.report_queue,
            reports: &self.corpus,
            step: self.state.step,
            sk_max_len: self.state.cfg.sk_max_len,
        }
    }

    /// Loss values `[itc, itm, lm, mlc, total]` at `params` under a fixed plan.
    pub fn losses(&self, params: &ParamStore<f64>, plan: &mut StepPlan<f64>) -> Result<[f64; 5]> {
        let net = Net::new(&self.state.cfg, params);
        let mut t = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = forward_losses(&mut t, &net, &self.batch, &self.env(), plan, &mut rng)?;
        let mlc = v.mlc.ok_or_else(|| Error::Precondition("gradient check needs the MLC loss".into()))?;
        Ok([v.itc, v.itm, v.lm, mlc, v.total].map(|x| t.scalar(x)))
    }
}

/// Compares analytic and central-difference gradients of every loss for
/// sampled entries of every parameter tensor.
pub fn run(g: &GradcheckOptions) -> Result<GradcheckReport> {
    let fx = Fixture::tiny(g)?;
    let mut plan = StepPlan::default();
    let params = &fx.state.params;
    let net = Net::new(&fx.state.cfg, params);
    let mut t = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let v = forward_losses(&mut t, &net, &fx.batch, &fx.env(), &mut plan, &mut rng)?;
    let mlc = v.mlc.ok_or_else(|| Error::Precondition("gradient check needs the MLC loss".into()))?;
    let grads: Vec<_> = [v.itc, v.itm, v.lm, mlc, v.total].iter().map(|&x| t.backward(x)).collect();

    let mlc_reaches_gk_cross = params
        .names()
        .filter(|n| n.starts_with(GK_CROSS))
        .any(|n| grads[3].param(n).is_some_and(|g| g.iter().any(|e| *e != 0.0)));
    let lm_ignores_labels = match v.label_proj {
        Some(lp) => grads[2].wrt(lp).map_or(true, |g| g.iter().all(|e| *e == 0.0)),
        None => false,
    };

    let mut checks = Vec::new();
    let mut perturbed = params.clone();
    for (name, value) in params.iter() {
        let (rows, cols) = value.dim();
        let mut entries = Vec::with_capacity(g.samples + 1);
        if let Some(gt) = grads[4].param(name) {
            let best = gt.indexed_iter().fold(((0, 0), -1.0f64), |acc, (ix, e)| if e.abs() > acc.1 { (ix, e.abs()) } else { acc });
            entries.push(best.0);
        }
        while entries.len() < g.samples + 1 {
            entries.push((rng.gen_range(0..rows), rng.gen_range(0..cols)));
        }
        entries.sort_unstable();
        entries.dedup();
        for ix in entries {
            let base = value[ix];
            perturbed.get_mut(name).expect("same structure")[ix] = base + g.h;
            let up = fx.losses(&perturbed, &mut plan)?;
            perturbed.get_mut(name).expect("same structure")[ix] = base - g.h;
            let down = fx.losses(&perturbed, &mut plan)?;
            perturbed.get_mut(name).expect("same structure")[ix] = base;
            for (k, loss) in LOSS_NAMES.iter().enumerate() {
                let numeric = (up[k] - down[k]) / (2.0 * g.h);
                let analytic = grads[k].param(name).map_or(0.0, |a| a[ix]);
                checks.push(EntryCheck {
                    loss: loss.to_string(),
                    param: name.to_string(),
                    index: ix,
                    analytic,
                    numeric,
                    rel_error: rel_error(analytic, numeric, g.floor),
                });
            }
        }
    }
    let worst = (0..checks.len()).max_by(|&a, &b| checks[a].rel_error.total_cmp(&checks[b].rel_error));
    Ok(GradcheckReport {
        max_rel_error: worst.map_or(0.0, |w| checks[w].rel_error),
        worst,
        checks,
        mlc_reaches_gk_cross,
        lm_ignores_labels,
        tolerance: g.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_uses_floor() {
        assert_eq!(rel_error(0.0, 0.0, 1e-6), 0.0);
        assert!((rel_error(1e-9, 0.0, 1e-6) - 1e-3).abs() < 1e-15);
        assert!((rel_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn replayed_plan_reproduces_losses() {
        let fx = Fixture::tiny(&GradcheckOptions::default()).unwrap();
        let mut plan = StepPlan::default();
        let a = fx.losses(&fx.state.params, &mut plan).unwrap();
        assert!(plan.sk.as_ref().unwrap().iter().any(|s| s.len() > 1), "specific knowledge inactive");
        let b = fx.losses(&fx.state.params, &mut plan).unwrap();
        assert_eq!(a, b);
        let sum = a[0] + a[1] + a[2] + a[3];
        assert!((a[4] - sum).abs() < 1e-12);
    }
}
