//! Evaluation metrics: recall@K, corpus BLEU-4, ROUGE-L, CIDEr-D, AUROC and
//! the F1 family.
//!
//! Text metrics score lowercase, punctuation-stripped, whitespace-split words.

use std::collections::HashMap;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::text;

/// Fraction of queries whose target id is among the first `k` ranked ids.
pub fn recall_at_k(rankings: &[Vec<u64>], targets: &[u64], k: usize) -> f64 {
    if rankings.is_empty() {
        return 0.0;
    }
    let hits = rankings.iter().zip(targets).filter(|(r, t)| r.iter().take(k).any(|id| id == *t)).count();
    hits as f64 / rankings.len() as f64
}

type Ngrams = HashMap<Vec<String>, usize>;

fn ngrams(words: &[String], n: usize) -> Ngrams {
    let mut out = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *out.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    out
}

/// Per-order n-gram counts of one tokenized text.
#[derive(Clone, Debug, PartialEq)]
pub struct NgramStats {
    pub counts: Vec<Ngrams>,
    pub len: usize,
}

impl NgramStats {
    pub fn new(words: &[String], max_n: usize) -> Self {
        Self { counts: (1..=max_n).map(|n| ngrams(words, n)).collect(), len: words.len() }
    }
}

/// Corpus-level BLEU-4: clipped n-gram precisions pooled over the corpus,
/// uniform weights, brevity penalty against the closest reference length.
pub fn bleu4(candidates: &[String], references: &[Vec<String>]) -> f64 {
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        let c = NgramStats::new(&text::words(cand), 4);
        let rs: Vec<NgramStats> = refs.iter().map(|r| NgramStats::new(&text::words(r), 4)).collect();
        c_len += c.len;
        r_len += rs
            .iter()
            .map(|r| r.len)
            .min_by_key(|&l| ((l as isize - c.len as isize).abs(), l))
            .unwrap_or(0);
        for n in 0..4 {
            for (g, &cnt) in &c.counts[n] {
                let max_ref = rs.iter().map(|r| r.counts[n].get(g).copied().unwrap_or(0)).max().unwrap_or(0);
                matched[n] += cnt.min(max_ref);
                total[n] += cnt;
            }
        }
    }
    if c_len == 0 || (0..4).any(|n| matched[n] == 0 || total[n] == 0) {
        return 0.0;
    }
    let log_p: f64 = (0..4).map(|n| (matched[n] as f64 / total[n] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    bp * log_p.exp()
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Recall weight `β²` of the ROUGE-L F-measure.
pub const ROUGE_BETA2: f64 = 1.2;

/// Sentence ROUGE-L: best precision and best recall over the references.
pub fn rouge_l_sentence(candidate: &str, references: &[String]) -> f64 {
    let c = text::words(candidate);
    let (mut p, mut r) = (0.0f64, 0.0f64);
    for reference in references {
        let rw = text::words(reference);
        let l = lcs(&c, &rw) as f64;
        if !c.is_empty() {
            p = p.max(l / c.len() as f64);
        }
        if !rw.is_empty() {
            r = r.max(l / rw.len() as f64);
        }
    }
    if p == 0.0 || r == 0.0 {
        return 0.0;
    }
    (1.0 + ROUGE_BETA2) * p * r / (r + ROUGE_BETA2 * p)
}

/// Mean sentence ROUGE-L over the corpus.
pub fn rouge_l(candidates: &[String], references: &[Vec<String>]) -> f64 {
    if candidates.is_empty() {
        return 0.0;
    }
    let total: f64 = candidates.iter().zip(references).map(|(c, r)| rouge_l_sentence(c, r)).sum();
    total / candidates.len() as f64
}

pub const CIDER_SIGMA: f64 = 6.0;

struct TfIdf {
    vecs: Vec<HashMap<Vec<String>, f64>>,
    norms: Vec<f64>,
    /// Bigram count, used for the length penalty.
    len: f64,
}

fn tfidf(stats: &NgramStats, df: &HashMap<Vec<String>, f64>, log_docs: f64) -> TfIdf {
    let mut vecs = Vec::with_capacity(4);
    let mut norms = Vec::with_capacity(4);
    let mut len = 0.0;
    for (n, counts) in stats.counts.iter().enumerate() {
        let mut v = HashMap::new();
        let mut norm = 0.0;
        for (g, &tf) in counts {
            let d = df.get(g).copied().unwrap_or(0.0).max(1.0).ln();
            let w = tf as f64 * (log_docs - d);
            norm += w * w;
            v.insert(g.clone(), w);
            if n == 1 {
                len += tf as f64;
            }
        }
        vecs.push(v);
        norms.push(norm.sqrt());
    }
    TfIdf { vecs, norms, len }
}

fn cider_sim(h: &TfIdf, r: &TfIdf, sigma: f64) -> f64 {
    let delta = h.len - r.len;
    let penalty = (-(delta * delta) / (2.0 * sigma * sigma)).exp();
    let mut total = 0.0;
    for n in 0..4 {
        let mut val: f64 = h.vecs[n]
            .iter()
            .map(|(g, &hv)| {
                let rv = r.vecs[n].get(g).copied().unwrap_or(0.0);
                hv.min(rv) * rv
            })
            .sum();
        if h.norms[n] != 0.0 && r.norms[n] != 0.0 {
            val /= h.norms[n] * r.norms[n];
        }
        total += val * penalty;
    }
    total / 4.0
}

/// CIDEr-D: TF-IDF n-gram cosine (n = 1..4) with clipped candidate weights and
/// a Gaussian length penalty, document frequencies from the references,
/// scaled by 10 and averaged over the corpus.
pub fn cider_d(candidates: &[String], references: &[Vec<String>], sigma: f64) -> f64 {
    if candidates.is_empty() {
        return 0.0;
    }
    let ref_stats: Vec<Vec<NgramStats>> = references
        .iter()
        .map(|rs| rs.iter().map(|r| NgramStats::new(&text::words(r), 4)).collect())
        .collect();
    let mut df: HashMap<Vec<String>, f64> = HashMap::new();
    for rs in &ref_stats {
        let mut seen: std::collections::HashSet<&Vec<String>> = std::collections::HashSet::new();
        for s in rs {
            for counts in &s.counts {
                seen.extend(counts.keys());
            }
        }
        for g in seen {
            *df.entry(g.clone()).or_insert(0.0) += 1.0;
        }
    }
    let log_docs = (candidates.len() as f64).ln();
    let mut total = 0.0;
    for (cand, rs) in candidates.iter().zip(&ref_stats) {
        let h = tfidf(&NgramStats::new(&text::words(cand), 4), &df, log_docs);
        if rs.is_empty() {
            continue;
        }
        let s: f64 = rs.iter().map(|r| cider_sim(&h, &tfidf(r, &df, log_docs), sigma)).sum();
        total += s / rs.len() as f64 * 10.0;
    }
    total / candidates.len() as f64
}

/// Area under the ROC curve with half credit for tied scores; `None` when
/// only one class is present.
pub fn auroc_binary(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(std::cmp::Ordering::Equal));
    // average ranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg_rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AurocReport {
    /// Per-class AUROC; `None` marks a class with a single label value.
    pub per_class: Vec<Option<f64>>,
    /// Mean over the classes that have both labels.
    pub mean: Option<f64>,
}

/// Column-wise AUROC of `scores` (`N x C`) against binary `labels`.
pub fn auroc(scores: ArrayView2<f64>, labels: ArrayView2<f64>) -> AurocReport {
    let per_class: Vec<Option<f64>> = (0..scores.ncols())
        .map(|c| {
            let s: Vec<f64> = scores.column(c).to_vec();
            let l: Vec<bool> = labels.column(c).iter().map(|&v| v > 0.5).collect();
            auroc_binary(&s, &l)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    AurocReport { per_class, mean }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub per_class: Vec<f64>,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub example_f1: f64,
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Thresholded F1 scores. Every 0/0 case scores 0.
pub fn f1_suite(probabilities: ArrayView2<f64>, labels: ArrayView2<f64>, threshold: f64) -> F1Report {
    let (n, c) = probabilities.dim();
    let pred = probabilities.mapv(|p| p >= threshold);
    let truth = labels.mapv(|l| l > 0.5);
    let mut per_class = Vec::with_capacity(c);
    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    for j in 0..c {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for i in 0..n {
            match (pred[[i, j]], truth[[i, j]]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        per_class.push(f1(tp, fp, fn_));
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
    }
    let example_f1 = if n == 0 {
        0.0
    } else {
        (0..n)
            .map(|i| {
                let tp = (0..c).filter(|&j| pred[[i, j]] && truth[[i, j]]).count();
                let p = (0..c).filter(|&j| pred[[i, j]]).count();
                let t = (0..c).filter(|&j| truth[[i, j]]).count();
                f1(tp, p - tp, t - tp)
            })
            .sum::<f64>()
            / n as f64
    };
    F1Report {
        macro_f1: if c == 0 { 0.0 } else { per_class.iter().sum::<f64>() / c as f64 },
        micro_f1: f1(tp_all, fp_all, fn_all),
        per_class,
        example_f1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn s(x: &str) -> String {
        x.to_string()
    }

    #[test]
    fn recall_counting_fixture() {
        let ranks = [1usize, 2, 6, 11, 4];
        let rankings: Vec<Vec<u64>> = ranks
            .iter()
            .enumerate()
            .map(|(q, &r)| {
                let mut v: Vec<u64> = (100..120).collect();
                v.insert(r - 1, q as u64);
                v
            })
            .collect();
        let gt: Vec<u64> = (0..5).collect();
        assert_eq!(recall_at_k(&rankings, &gt, 1), 0.2);
        assert_eq!(recall_at_k(&rankings, &gt, 5), 0.6);
        assert_eq!(recall_at_k(&rankings, &gt, 10), 0.8);
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let c = vec![s("the left lung shows a small effusion")];
        assert!((bleu4(&c, &[c.clone()]) - 1.0).abs() < 1e-12);
        assert_eq!(bleu4(&[s("alpha beta gamma delta")], &[vec![s("one two three four")]]), 0.0);
    }

    #[test]
    fn bleu_two_sentence_fixture() {
        // cand1 "a b c d e" vs ref "a b c d f": 1g 4/5, 2g 3/4, 3g 2/3, 4g 1/2
        // cand2 "a b c d" vs ref "a b c d x y": 1g 4/4, 2g 3/3, 3g 2/2, 4g 1/1
        // pooled: 8/9, 6/7, 4/5, 2/3; c = 9, r = 11
        let cands = [s("a b c d e"), s("a b c d")];
        let refs = [vec![s("a b c d f")], vec![s("a b c d x y")]];
        let p: f64 = [8.0 / 9.0, 6.0 / 7.0, 4.0 / 5.0, 2.0 / 3.0].iter().map(|v: &f64| v.ln()).sum::<f64>() / 4.0;
        let oracle = (1.0f64 - 11.0 / 9.0).exp() * p.exp();
        assert!((bleu4(&cands, &refs) - oracle).abs() < 1e-9);
    }

    #[test]
    fn bleu_clips_repeated_ngrams() {
        // "the the the the" vs "the cat": unigram clipped to 1/4, higher orders 0
        assert_eq!(bleu4(&[s("the the the the")], &[vec![s("the cat")]]), 0.0);
    }

    #[test]
    fn rouge_fixtures() {
        assert!((rouge_l(&[s("a b c")], &[vec![s("a b c")]]) - 1.0).abs() < 1e-12);
        assert_eq!(rouge_l(&[s("a b")], &[vec![s("c d")]]), 0.0);
        assert!((rouge_l(&[s("a b c d")], &[vec![s("a c d e")]]) - 0.75).abs() < 1e-12);
        // unequal P and R exercise the weighting
        let (p, r) = (2.0 / 2.0, 2.0 / 4.0);
        let want = (1.0 + ROUGE_BETA2) * p * r / (r + ROUGE_BETA2 * p);
        assert!((rouge_l_sentence("a b", &[s("a x b y")]) - want).abs() < 1e-12);
    }

    /// Direct formula evaluation for a corpus where each image has one reference.
    fn cider_oracle(cands: &[&str], refs: &[&str]) -> f64 {
        let n_docs = cands.len() as f64;
        let grams = |t: &str, n: usize| -> Vec<Vec<String>> {
            let w = text::words(t);
            if w.len() < n {
                vec![]
            } else {
                w.windows(n).map(|x| x.to_vec()).collect()
            }
        };
        let mut total = 0.0;
        for (c, r) in cands.iter().zip(refs) {
            let mut sum = 0.0;
            let lc = grams(c, 2).len() as f64;
            let lr = grams(r, 2).len() as f64;
            for n in 1..=4 {
                let df = |g: &Vec<String>| refs.iter().filter(|d| grams(d, n).contains(g)).count() as f64;
                let weight = |text: &str| -> HashMap<Vec<String>, f64> {
                    let mut m = HashMap::new();
                    for g in grams(text, n) {
                        *m.entry(g).or_insert(0.0) += 1.0;
                    }
                    m.into_iter().map(|(g, tf)| {
                        let w = tf * (n_docs.ln() - df(&g).max(1.0).ln());
                        (g, w)
                    }).collect()
                };
                let (wc, wr) = (weight(c), weight(r));
                let nc = wc.values().map(|v| v * v).sum::<f64>().sqrt();
                let nr = wr.values().map(|v| v * v).sum::<f64>().sqrt();
                let mut dot: f64 = wc.iter().map(|(g, v)| v.min(*wr.get(g).unwrap_or(&0.0)) * wr.get(g).unwrap_or(&0.0)).sum();
                if nc > 0.0 && nr > 0.0 {
                    dot /= nc * nr;
                }
                sum += dot * (-(lc - lr).powi(2) / 72.0).exp();
            }
            total += sum / 4.0 * 10.0;
        }
        total / n_docs
    }

    #[test]
    fn cider_matches_oracle_on_two_documents() {
        let cands = ["small left effusion is seen", "the heart is normal"];
        let refs = ["small left effusion is seen", "lungs are clear today"];
        let got = cider_d(
            &cands.map(s),
            &refs.map(|r| vec![s(r)]),
            CIDER_SIGMA,
        );
        let want = cider_oracle(&cands, &refs);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        // document 1 n-grams are unique to it, so its self-similarity is 10 per order
        assert!((want - 5.0).abs() < 1e-9);
    }

    #[test]
    fn cider_zero_overlap_and_duplicate_document_idf() {
        let z = cider_d(&[s("a b c"), s("d e f")], &[vec![s("x y z")], vec![s("u v w")]], CIDER_SIGMA);
        assert_eq!(z, 0.0);
        let cands = ["a b c d", "a b c d", "e f g h"];
        let refs = ["a b c d", "a b c d", "e f x h"];
        let got = cider_d(&cands.map(s), &refs.map(|r| vec![s(r)]), CIDER_SIGMA);
        assert!((got - cider_oracle(&cands, &refs)).abs() < 1e-9);
    }

    #[test]
    fn auroc_fixtures() {
        assert_eq!(auroc_binary(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), Some(1.0));
        assert_eq!(auroc_binary(&[0.1, 0.2], &[true, true]), None);
        let scores = [0.3, 0.7, 0.7, 0.1, 0.5, 0.7];
        let labels = [false, true, false, false, true, true];
        let mut credit = 0.0;
        let mut pairs = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    credit += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        assert!((auroc_binary(&scores, &labels).unwrap() - credit / pairs).abs() < 1e-12);
    }

    #[test]
    fn auroc_report_skips_single_class_columns() {
        let scores = array![[0.9, 0.2], [0.1, 0.4]];
        let labels = array![[1.0, 0.0], [0.0, 0.0]];
        let r = auroc(scores.view(), labels.view());
        assert_eq!(r.per_class, vec![Some(1.0), None]);
        assert_eq!(r.mean, Some(1.0));
    }

    #[test]
    fn f1_fixtures() {
        let y = array![[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        let perfect = f1_suite(y.view(), y.view(), 0.5);
        assert_eq!(perfect.per_class, vec![1.0, 1.0, 1.0]);
        assert_eq!((perfect.macro_f1, perfect.micro_f1, perfect.example_f1), (1.0, 1.0, 1.0));

        let none = f1_suite(ndarray::Array2::zeros((2, 3)).view(), y.view(), 0.5);
        assert_eq!(none.per_class, vec![0.0, 0.0, 0.0]);

        // 4 examples x 3 classes
        let p = array![[0.9, 0.1, 0.6], [0.2, 0.8, 0.4], [0.7, 0.7, 0.1], [0.1, 0.3, 0.9]];
        let y = array![[1.0, 0.0, 0.0], [0.0, 1.0, 1.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        // class 0: tp 2 fp 0 fn 0; class 1: tp 1 fp 1 fn 0; class 2: tp 1 fp 1 fn 1
        let r = f1_suite(p.view(), y.view(), 0.5);
        let want = [1.0, 2.0 / 3.0, 0.5];
        for (a, b) in r.per_class.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((r.macro_f1 - (1.0 + 2.0 / 3.0 + 0.5) / 3.0).abs() < 1e-12);
        assert!((r.micro_f1 - 8.0 / 11.0).abs() < 1e-12);
        // per example: {0,2}vs{0}: 2/3; {1}vs{1,2}: 2/3; {0,1}vs{0}: 2/3; {2}vs{2}: 1
        assert!((r.example_f1 - (2.0 / 3.0 * 3.0 + 1.0) / 4.0).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn auroc_invariant_under_monotone_transform(
                scores in proptest::collection::vec(-5.0f64..5.0, 8),
                labels in proptest::collection::vec(any::<bool>(), 8),
            ) {
                let a = auroc_binary(&scores, &labels);
                let warped: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
                prop_assert_eq!(a, auroc_binary(&warped, &labels));
            }

            #[test]
            fn text_metrics_permutation_invariant(seed in 0u64..200) {
                let pool = ["a b c", "a c d e", "left effusion", "small left effusion seen", "b c a"];
                let cands: Vec<String> = (0..4).map(|i| pool[(seed as usize + i) % 5].to_string()).collect();
                let refs: Vec<Vec<String>> = (0..4).map(|i| vec![pool[(seed as usize * 3 + i) % 5].to_string()]).collect();
                let mut rc = cands.clone();
                let mut rr = refs.clone();
                rc.reverse();
                rr.reverse();
                prop_assert!((bleu4(&cands, &refs) - bleu4(&rc, &rr)).abs() < 1e-12);
                prop_assert!((rouge_l(&cands, &refs) - rouge_l(&rc, &rr)).abs() < 1e-12);
                prop_assert!((cider_d(&cands, &refs, 6.0) - cider_d(&rc, &rr, 6.0)).abs() < 1e-9);
            }
        }
    }
}
