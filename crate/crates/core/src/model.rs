//! Trainable state (parameters, momentum copies, queues, optimizer, RNG) and
//! the fixed knowledge resources it is trained against.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, CLOSED_QUESTION_PREFIX, OPEN_FINDING_QUESTION, OPEN_ORGAN_QUESTION};
use crate::error::Result;
use crate::feature_queue::FeatureQueue;
use crate::injection::{GraphInputs, LabelSet, SpecificKnowledge, CHEST_LABELS};
use crate::neural::net::init_params;
use crate::neural::{EncoderConfig, Net, TokenMode, Tokenizer};
use crate::params::{AdamW, ParamStore};
use crate::scalar::Scalar;

/// Capacities of the contrastive queues and of the report queue.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueueSizes {
    pub itc: usize,
    pub report: usize,
}

#[derive(Clone, Debug)]
pub struct ModelState<T> {
    pub cfg: EncoderConfig,
    pub tokenizer: Tokenizer,
    pub params: ParamStore<T>,
    pub momentum: ParamStore<T>,
    /// Momentum image projections (ITC negatives).
    pub img_queue: FeatureQueue<T>,
    /// Momentum text projections (ITC negatives).
    pub txt_queue: FeatureQueue<T>,
    /// Momentum text projections with record ids, for specific-knowledge retrieval.
    pub report_queue: FeatureQueue<T>,
    pub optimizer: AdamW<T>,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl<T: Scalar> ModelState<T> {
    pub fn new(cfg: EncoderConfig, tokenizer: Tokenizer, queues: QueueSizes, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&cfg, tokenizer.vocab_size(), &mut rng);
        let p = cfg.proj_dim;
        Ok(Self {
            momentum: params.clone(),
            params,
            img_queue: FeatureQueue::new(queues.itc, p),
            txt_queue: FeatureQueue::new(queues.itc, p),
            report_queue: FeatureQueue::new(queues.report, p),
            optimizer: AdamW::new(1e-4, 0.0),
            tokenizer,
            cfg,
            rng,
            step: 0,
        })
    }

    pub fn net(&self) -> Net<'_, T> {
        Net::new(&self.cfg, &self.params)
    }

    pub fn momentum_net(&self) -> Net<'_, T> {
        Net::new(&self.cfg, &self.momentum)
    }
}

/// Vocabulary covering reports, graph node names, triplets, label names and
/// the VQA question templates.
pub fn build_tokenizer(corpus: &Corpus, extra: &[&str], max_text_len: usize) -> Tokenizer {
    let mut texts: Vec<String> = corpus.records.iter().map(|r| r.report.clone()).collect();
    texts.extend(corpus.graph.nodes().iter().map(|n| n.name.clone()));
    texts.extend(corpus.store.triplets().iter().map(|t| format!("{} {} {}", t.head, t.relation, t.tail)));
    texts.extend(CHEST_LABELS.iter().map(|s| s.to_string()));
    texts.extend([CLOSED_QUESTION_PREFIX, OPEN_FINDING_QUESTION, OPEN_ORGAN_QUESTION, "yes no"].map(String::from));
    texts.extend(extra.iter().map(|s| s.to_string()));
    Tokenizer::from_texts(texts.iter().map(String::as_str), max_text_len)
}

/// Graph, label set and triplet resources for one run.
#[derive(Clone, Debug)]
pub struct Knowledge {
    pub graph: GraphInputs,
    pub labels: LabelSet,
    pub sk: SpecificKnowledge,
}

impl Knowledge {
    pub fn from_corpus(corpus: &Corpus, tokenizer: &Tokenizer, top_k: usize, cap: usize) -> Result<Self> {
        Ok(Self {
            graph: GraphInputs::new(corpus.graph.clone(), tokenizer)?,
            labels: LabelSet::chest(tokenizer),
            sk: SpecificKnowledge { lexicon: corpus.lexicon.clone(), store: corpus.store.clone(), top_k, cap },
        })
    }
}

/// Tokenized, tensorized training examples.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub ids: Vec<u64>,
    pub images: Vec<Array3<T>>,
    /// `[CLS]` report tokens (text encoder input).
    pub cls: Vec<Vec<u32>>,
    /// `[Encode]` report tokens (matching encoder input).
    pub matched: Vec<Vec<u32>>,
    /// `[BOS] … [EOS]` report tokens (decoder).
    pub decode: Vec<Vec<u32>>,
    /// `B x 14` binary labels.
    pub labels: Array2<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_corpus(corpus: &Corpus, indices: &[usize], tokenizer: &Tokenizer, image_size: usize) -> Result<Self> {
        let mut labels = Array2::zeros((indices.len(), CHEST_LABELS.len()));
        for (b, &i) in indices.iter().enumerate() {
            for (c, &l) in corpus.records[i].labels.iter().enumerate() {
                labels[[b, c]] = T::lit(l as f64);
            }
        }
        let tok = |mode| indices.iter().map(|&i| tokenizer.tokenize_unpadded(&corpus.records[i].report, mode)).collect();
        Ok(Self {
            ids: indices.iter().map(|&i| corpus.records[i].id).collect(),
            images: indices.iter().map(|&i| corpus.image_tensor_at(i, image_size)).collect::<Result<_>>()?,
            cls: tok(TokenMode::EncodeCls),
            matched: tok(TokenMode::EncodeMatch),
            decode: tok(TokenMode::Decode),
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn image_refs(&self) -> Vec<&Array3<T>> {
        self.images.iter().collect()
    }
}
