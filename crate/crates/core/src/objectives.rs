//! Pretraining losses: image-text contrastive (ITC), image-text matching (ITM),
//! language modeling (LM), and their weighted total.
//!
//! Each loss has a plain-array form used for fixtures and reporting, and a tape
//! form used for training.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autograd::{log_sum_exp, Tape, Var, LOG_PROB_FLOOR};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Valid range of the contrastive temperature.
pub const TEMP_MIN: f64 = 0.001;
pub const TEMP_MAX: f64 = 0.5;

/// Balance factors of the total loss: `L = itc*L_itc + itm*L_itm + lm*L_lm + mlc*L_mlc`.
/// Pretraining keeps `itc = 1`; zero weights let finetuning drop terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub itc: f64,
    pub itm: f64,
    pub lm: f64,
    pub mlc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { itc: 1.0, itm: 1.0, lm: 1.0, mlc: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("itc", self.itc), ("itm", self.itm), ("lm", self.lm), ("mlc", self.mlc)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss weight {name} = {v}")));
            }
        }
        Ok(())
    }
}

/// Scalar loss components of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub itc: f64,
    pub itm: f64,
    pub lm: f64,
    pub mlc: f64,
}

/// Weighted total; a non-finite component aborts with the offending values.
pub fn total_loss(parts: LossParts, w: LossWeights, step: u64) -> Result<f64> {
    let named = [("itc", parts.itc), ("itm", parts.itm), ("lm", parts.lm), ("mlc", parts.mlc)];
    if let Some((name, v)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("loss component {name}"),
            step,
            detail: format!("{v} in {parts:?}"),
        });
    }
    Ok(w.itc * parts.itc + w.itm * parts.itm + w.lm * parts.lm + w.mlc * parts.mlc)
}

pub fn softmax_rows<T: Scalar>(logits: ArrayView2<T>) -> Array2<T> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let lse = log_sum_exp(row.iter().copied());
        row.mapv_inplace(|e| (e - lse).exp());
    }
    out
}

/// Row-wise softmax similarities `(f_i2t, f_t2i)` of the batch projections
/// against their candidate sets (current-batch momentum projections followed
/// by the queue snapshot).
pub fn itc_similarities<T: Scalar>(
    img: ArrayView2<T>,
    txt: ArrayView2<T>,
    img_candidates: ArrayView2<T>,
    txt_candidates: ArrayView2<T>,
    temp: T,
) -> (Array2<T>, Array2<T>) {
    let i2t = img.dot(&txt_candidates.t()).mapv(|e| e / temp);
    let t2i = txt.dot(&img_candidates.t()).mapv(|e| e / temp);
    (softmax_rows(i2t.view()), softmax_rows(t2i.view()))
}

/// One-hot targets: row `i` is positive at candidate `i`.
pub fn one_hot_targets<T: Scalar>(batch: usize, candidates: usize) -> Array2<T> {
    Array2::from_shape_fn((batch, candidates), |(i, j)| if i == j { T::one() } else { T::zero() })
}

/// Half the sum of the two directional cross-entropies, averaged over the batch.
pub fn itc_loss<T: Scalar>(f_i2t: ArrayView2<T>, f_t2i: ArrayView2<T>, g_i2t: ArrayView2<T>, g_t2i: ArrayView2<T>) -> T {
    let ce = |f: ArrayView2<T>, g: ArrayView2<T>| {
        let floor = T::lit(LOG_PROB_FLOOR);
        let total = f
            .iter()
            .zip(g.iter())
            .fold(T::zero(), |acc, (&p, &y)| acc - y * p.max(floor).ln());
        total / T::lit(f.nrows() as f64)
    };
    T::lit(0.5) * (ce(f_i2t, g_i2t) + ce(f_t2i, g_t2i))
}

/// Mean two-class cross-entropy; column 1 is "match".
pub fn itm_loss_from_logits<T: Scalar>(logits: ArrayView2<T>, is_match: &[bool]) -> T {
    let mut total = T::zero();
    for (row, &m) in logits.rows().into_iter().zip(is_match) {
        let lse = log_sum_exp(row.iter().copied());
        total -= row[usize::from(m)] - lse;
    }
    total / T::lit(is_match.len() as f64)
}

/// Mean next-token negative log-likelihood with optional label smoothing.
pub fn lm_loss_from_logits<T: Scalar>(logits: ArrayView2<T>, targets: &[u32], smoothing: f64) -> T {
    let v = logits.ncols();
    let mut total = T::zero();
    for (row, &y) in logits.rows().into_iter().zip(targets) {
        let lse = log_sum_exp(row.iter().copied());
        let nll = lse - row[y as usize];
        let uniform = lse - row.sum() / T::lit(v as f64);
        total += T::lit(1.0 - smoothing) * nll + T::lit(smoothing) * uniform;
    }
    total / T::lit(targets.len() as f64)
}

// ---------------------------------------------------------------------------
// tape forms

/// Contrastive loss on the tape. `temp` is a `1x1` node; `targets_*` are the
/// per-row target distributions over candidates.
#[allow(clippy::too_many_arguments)]
pub fn itc_loss_tape<T: Scalar>(
    t: &mut Tape<T>,
    img: Var,
    txt: Var,
    img_candidates: Var,
    txt_candidates: Var,
    temp: Var,
    targets_i2t: Array2<T>,
    targets_t2i: Array2<T>,
) -> Var {
    let b = t.value(img).nrows();
    let s_i2t = t.matmul_t(img, txt_candidates);
    let s_i2t = t.div_by(s_i2t, temp);
    let l_i2t = t.cross_entropy(s_i2t, targets_i2t, vec![T::one(); b]);
    let s_t2i = t.matmul_t(txt, img_candidates);
    let s_t2i = t.div_by(s_t2i, temp);
    let l_t2i = t.cross_entropy(s_t2i, targets_t2i, vec![T::one(); b]);
    let sum = t.add(l_i2t, l_t2i);
    t.scale(sum, T::lit(0.5))
}

pub fn itm_loss_tape<T: Scalar>(t: &mut Tape<T>, logits: Var, is_match: &[bool]) -> Var {
    let targets = Array2::from_shape_fn((is_match.len(), 2), |(i, c)| {
        if c == usize::from(is_match[i]) {
            T::one()
        } else {
            T::zero()
        }
    });
    t.cross_entropy(logits, targets, vec![T::one(); is_match.len()])
}

pub fn lm_loss_tape<T: Scalar>(t: &mut Tape<T>, logits: Var, targets: &[u32], smoothing: f64) -> Var {
    let v = t.value(logits).ncols();
    let off = T::lit(smoothing / v as f64);
    let on = T::lit(1.0 - smoothing) + off;
    let dist = Array2::from_shape_fn((targets.len(), v), |(i, c)| if c == targets[i] as usize { on } else { off });
    t.cross_entropy(logits, dist, vec![T::one(); targets.len()])
}

/// `Σ w_k * loss_k` on the tape.
pub fn weighted_sum<T: Scalar>(t: &mut Tape<T>, terms: &[(Var, f64)]) -> Var {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        let s = if w == 1.0 { v } else { t.scale(v, T::lit(w)) };
        acc = Some(match acc {
            Some(a) => t.add(a, s),
            None => s,
        });
    }
    acc.expect("at least one loss term")
}
