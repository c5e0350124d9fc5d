//! Deterministic synthetic corpus: procedurally rendered chest-like images with
//! templated reports, 14-dim labels, a matching triplet store and lexicon, and
//! a question-answering variant.
//!
//! The images are drawn from simple glyphs and have no clinical meaning.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_knowledge::KnowledgeGraph;
use crate::injection::{CHEST_LABELS, N_LABELS};
use crate::scalar::Scalar;
use crate::triplet_store::{extract_entities, EntityLexicon, Triplet, TripletStore};

pub const IMAGE_SIZE: usize = 64;
pub const MAX_FINDINGS: usize = 3;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const VQA_FILE: &str = "vqa.jsonl";
pub const TRIPLETS_FILE: &str = "triplets.tsv";
pub const LEXICON_FILE: &str = "lexicon.txt";
pub const GRAPH_FILE: &str = "graph.tsv";
pub const IMAGE_DIR: &str = "images";

/// Co-occurrence rules `(finding, co-finding)` of the generator. They surface
/// only in the triplet store as `suggestive of` relations.
pub const CO_FINDINGS: [(&str, &str); 7] = [
    ("effusion", "atelectasis"),
    ("pneumonia", "consolidation"),
    ("cardiomegaly", "edema"),
    ("mass", "nodule"),
    ("fibrosis", "thickening"),
    ("infiltration", "opacity"),
    ("emphysema", "hernia"),
];

const CO_FINDING_PROB: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionType {
    Open,
    Closed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Small,
    Moderate,
    Large,
}

impl Severity {
    fn word(self) -> &'static str {
        match self {
            Severity::Small => "small",
            Severity::Moderate => "moderate",
            Severity::Large => "large",
        }
    }

    fn radius(self) -> f64 {
        match self {
            Severity::Small => 3.0,
            Severity::Moderate => 4.5,
            Severity::Large => 6.0,
        }
    }
}

impl Side {
    fn word(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneFinding {
    pub name: String,
    pub side: Side,
    pub severity: Severity,
}

/// What one synthetic image shows.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub organs: Vec<String>,
    pub findings: Vec<SceneFinding>,
    pub seed: u64,
}

/// One line of `corpus.jsonl` (or `vqa.jsonl`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: u64,
    pub image_path: String,
    pub report: String,
    pub labels: Vec<u8>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qtype: Option<QuestionType>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_records: usize,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    /// Emit correlated co-findings (the knowledge-only signal).
    pub co_occurrence: bool,
    pub noise_std: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { seed: 7, n_records: 500, split: [0.7, 0.1, 0.2], co_occurrence: true, noise_std: 6.0 }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let s: f64 = self.split.iter().sum();
        if self.split.iter().any(|f| !(0.0..=1.0).contains(f)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {:?} must be in [0,1] and sum to 1", self.split)));
        }
        if self.n_records == 0 {
            return Err(Error::Config("n_records must be positive".into()));
        }
        Ok(())
    }
}

/// In-memory corpus with decoded images (`IMAGE_SIZE²` grayscale, row-major).
#[derive(Clone, Debug)]
pub struct Corpus {
    pub records: Vec<CorpusRecord>,
    pub images: Vec<Array2<u8>>,
    pub store: TripletStore,
    pub lexicon: EntityLexicon,
    pub graph: KnowledgeGraph,
}

impl Corpus {
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.records.binary_search_by_key(&id, |r| r.id).ok()
    }

    pub fn report(&self, id: u64) -> Option<&str> {
        self.index_of(id).map(|i| self.records[i].report.as_str())
    }

    /// Image `i` as an `H x W x 1` array scaled to `[0, 1]`.
    pub fn image_tensor<T: Scalar>(&self, i: usize) -> Array3<T> {
        to_tensor(&self.images[i])
    }

    /// Image `i` area-averaged down to `size x size`.
    pub fn image_tensor_at<T: Scalar>(&self, i: usize, size: usize) -> Result<Array3<T>> {
        downsample(&self.image_tensor(i), size)
    }

    pub fn labels_f<T: Scalar>(&self, i: usize) -> Vec<T> {
        self.records[i].labels.iter().map(|&l| T::lit(l as f64)).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join(IMAGE_DIR)).map_err(|e| Error::io(dir, e))?;
        for (r, img) in self.records.iter().zip(&self.images) {
            write_pgm(&dir.join(&r.image_path), img)?;
        }
        write_jsonl(&dir.join(CORPUS_FILE), &self.records)?;
        write_text(&dir.join(TRIPLETS_FILE), &self.store.to_tsv())?;
        write_text(&dir.join(LEXICON_FILE), &self.lexicon.to_lines())?;
        write_text(&dir.join(GRAPH_FILE), &self.graph.to_tsv())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let records: Vec<CorpusRecord> = read_jsonl(&dir.join(CORPUS_FILE))?;
        let images = records
            .iter()
            .map(|r| read_pgm(&dir.join(&r.image_path)))
            .collect::<Result<Vec<_>>>()?;
        let graph_path = dir.join(GRAPH_FILE);
        let graph = if graph_path.exists() {
            KnowledgeGraph::load(&graph_path, crate::graph_knowledge::GraphSchema::ANY)?
        } else {
            KnowledgeGraph::default_chest()
        };
        let mut corpus = Self {
            records,
            images,
            store: TripletStore::load(dir.join(TRIPLETS_FILE))?,
            lexicon: EntityLexicon::load(dir.join(LEXICON_FILE))?,
            graph,
        };
        corpus.sort_by_id();
        Ok(corpus)
    }

    fn sort_by_id(&mut self) {
        let mut order: Vec<usize> = (0..self.records.len()).collect();
        order.sort_by_key(|&i| self.records[i].id);
        self.records = order.iter().map(|&i| self.records[i].clone()).collect();
        self.images = order.iter().map(|&i| self.images[i].clone()).collect();
    }
}

pub fn to_tensor<T: Scalar>(img: &Array2<u8>) -> Array3<T> {
    let (h, w) = img.dim();
    Array3::from_shape_fn((h, w, 1), |(y, x, _)| T::lit(img[[y, x]] as f64 / 255.0))
}

/// Block-mean downsampling of an `H x W x C` image to `size x size`; the
/// side lengths must be multiples of `size`.
pub fn downsample<T: Scalar>(img: &Array3<T>, size: usize) -> Result<Array3<T>> {
    let (h, w, c) = img.dim();
    if size == 0 || h % size != 0 || w % size != 0 {
        return Err(Error::Shape(format!("cannot downsample {h}x{w} to {size}x{size}")));
    }
    if h == size && w == size {
        return Ok(img.clone());
    }
    let (fy, fx) = (h / size, w / size);
    let norm = T::lit((fy * fx) as f64);
    Ok(Array3::from_shape_fn((size, size, c), |(y, x, ch)| {
        let mut acc = T::zero();
        for dy in 0..fy {
            for dx in 0..fx {
                acc += img[[y * fy + dy, x * fx + dx, ch]];
            }
        }
        acc / norm
    }))
}

/// Label index of a finding: exact label name or the last word of a label.
pub fn label_index(finding: &str) -> Option<usize> {
    CHEST_LABELS
        .iter()
        .position(|l| *l == finding)
        .or_else(|| CHEST_LABELS.iter().position(|l| l.split_whitespace().last() == Some(finding)))
}

pub fn labels_for(findings: &[SceneFinding]) -> Vec<u8> {
    let mut y = vec![0u8; N_LABELS];
    for f in findings {
        if let Some(i) = label_index(&f.name) {
            y[i] = 1;
        }
    }
    y
}

/// Triplets mirroring the generator: location of every finding plus the
/// co-occurrence rules.
pub fn knowledge_triplets(graph: &KnowledgeGraph) -> Result<TripletStore> {
    let mut out = Vec::new();
    for f in graph.findings() {
        out.push(Triplet::new(&f.name, "located at", f.parent_organ.as_deref().unwrap_or("-"))?);
    }
    for (a, b) in CO_FINDINGS {
        if graph.index_of(a).is_some() && graph.index_of(b).is_some() {
            out.push(Triplet::new(a, "suggestive of", b)?);
        }
    }
    Ok(TripletStore::new(out))
}

pub fn finding_lexicon(graph: &KnowledgeGraph) -> Result<EntityLexicon> {
    EntityLexicon::new(graph.findings().map(|f| f.name.clone()))
}

fn record_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn sample_scene(graph: &KnowledgeGraph, seed: u64, id: u64, co_occurrence: bool) -> SyntheticScene {
    let mut rng = record_rng(seed, id);
    let findings: Vec<&str> = graph.findings().map(|f| f.name.as_str()).collect();
    let n = [0.2, 0.35, 0.3, 0.15]
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .position({
            let u: f64 = rng.gen();
            move |c| u < c
        })
        .unwrap_or(0);
    let mut chosen: Vec<String> = Vec::new();
    while chosen.len() < n {
        let f = findings[rng.gen_range(0..findings.len())].to_string();
        if chosen.contains(&f) {
            continue;
        }
        chosen.push(f.clone());
        if co_occurrence && chosen.len() < MAX_FINDINGS {
            if let Some((_, co)) = CO_FINDINGS.iter().find(|(a, _)| *a == f) {
                if graph.index_of(co).is_some() && !chosen.iter().any(|c| c == co) && rng.gen_bool(CO_FINDING_PROB) {
                    chosen.push(co.to_string());
                }
            }
        }
    }
    let findings: Vec<SceneFinding> = chosen
        .into_iter()
        .map(|name| SceneFinding {
            name,
            side: if rng.gen_bool(0.5) { Side::Left } else { Side::Right },
            severity: *[Severity::Small, Severity::Moderate, Severity::Large].choose(&mut rng).expect("nonempty"),
        })
        .collect();
    let organs = graph
        .organs()
        .filter(|o| {
            let needed = findings.iter().any(|f| graph.parent_of(&f.name) == Some(o.name.as_str()));
            needed || rng.gen_bool(0.9)
        })
        .map(|o| o.name.clone())
        .collect();
    SyntheticScene { organs, findings, seed: rng.gen() }
}

const FINDING_TEMPLATES: [&str; 4] = [
    "there is a {sev} {side} {f}",
    "{sev} {f} is noted on the {side}",
    "the {side} side shows {sev} {f}",
    "findings consistent with {sev} {side} {f}",
];

const DISTRACTORS: [&str; 12] = [
    "the heart size is within normal limits",
    "the lungs are well expanded",
    "no focal abnormality is identified elsewhere",
    "the mediastinal contours are stable",
    "osseous structures are intact",
    "the trachea is midline",
    "soft tissues are unremarkable",
    "the costophrenic angles are sharp",
    "lines and tubes are absent",
    "the visualized upper abdomen is unremarkable",
    "comparison is made with prior study",
    "the hila are normal in size",
];

/// Templated report: every finding once, padded with distractor sentences so
/// that at least 60% of 3 to 8 sentences are distractors.
pub fn render_report(scene: &SyntheticScene) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0x5eed_0f_7e87);
    let k = scene.findings.len();
    let min_total = 3.max((k as f64 / 0.4).ceil() as usize);
    let total = rng.gen_range(min_total..=8.max(min_total));
    let mut sentences: Vec<String> = scene
        .findings
        .iter()
        .map(|f| {
            FINDING_TEMPLATES[rng.gen_range(0..FINDING_TEMPLATES.len())]
                .replace("{sev}", f.severity.word())
                .replace("{side}", f.side.word())
                .replace("{f}", &f.name)
        })
        .collect();
    let mut pool: Vec<&str> = DISTRACTORS.to_vec();
    pool.shuffle(&mut rng);
    sentences.extend(pool.into_iter().take(total - k).map(str::to_string));
    sentences.shuffle(&mut rng);
    sentences.join(" . ") + " ."
}

/// Canonical anchor of organ slot `i` for a given side, in 64-pixel units.
fn organ_anchor(slot: usize, side: Side) -> (f64, f64) {
    let left = side == Side::Left;
    let mirror = |x: f64| if left { x } else { 64.0 - x };
    match slot % 7 {
        0 => (mirror(20.0), 28.0), // lung
        1 => (mirror(30.0), 42.0), // heart
        2 => (mirror(12.0), 36.0), // pleural
        3 => (mirror(20.0), 16.0), // airspace
        4 => (mirror(28.0), 30.0), // bone
        5 => (mirror(29.0), 14.0), // mediastinum
        _ => (mirror(22.0), 53.0), // diaphragm
    }
}

const FINDING_OFFSETS: [(f64, f64); 8] =
    [(-3.0, -7.0), (3.0, -7.0), (-3.0, 0.0), (3.0, 0.0), (-3.0, 7.0), (3.0, 7.0), (0.0, -3.5), (0.0, 3.5)];

/// Renders a `IMAGE_SIZE²` grayscale image of the scene.
pub fn render_image(graph: &KnowledgeGraph, scene: &SyntheticScene, noise_std: f64) -> Array2<u8> {
    let n = IMAGE_SIZE;
    let s = n as f64 / 64.0;
    let mut img = Array2::<f64>::from_elem((n, n), 20.0);
    let organs: Vec<&str> = graph.organs().map(|o| o.name.as_str()).collect();
    let blob = |img: &mut Array2<f64>, cx: f64, cy: f64, rx: f64, ry: f64, amp: f64, pattern: usize| {
        for y in 0..n {
            for x in 0..n {
                let (fx, fy) = (x as f64 / s, y as f64 / s);
                let d = ((fx - cx) / rx).powi(2) + ((fy - cy) / ry).powi(2);
                if d <= 1.0 {
                    let tex = match pattern {
                        0 => 1.0,
                        1 => -1.0,
                        2 => if (y / 2) % 2 == 0 { 1.0 } else { -0.3 },
                        3 => if (x / 2) % 2 == 0 { 1.0 } else { -0.3 },
                        _ => if (x / 2 + y / 2) % 2 == 0 { 1.0 } else { -1.0 },
                    };
                    img[[y, x]] += amp * tex;
                }
            }
        }
    };
    for (slot, organ) in organs.iter().enumerate() {
        if !scene.organs.iter().any(|o| o == organ) {
            continue;
        }
        let amp = 35.0 + 12.0 * (slot % 5) as f64;
        for side in [Side::Left, Side::Right] {
            let (cx, cy) = organ_anchor(slot, side);
            let (rx, ry) = match slot % 7 {
                0 => (8.0, 13.0),
                1 => (6.0, 6.0),
                2 => (2.5, 10.0),
                3 => (4.0, 3.0),
                4 => (2.0, 24.0),
                5 => (3.0, 7.0),
                _ => (10.0, 1.8),
            };
            blob(&mut img, cx, cy, rx, ry, amp, 0);
        }
    }
    let findings_by_organ = |organ: &str| -> Vec<&str> {
        graph
            .findings()
            .filter(|f| f.parent_organ.as_deref() == Some(organ))
            .map(|f| f.name.as_str())
            .collect()
    };
    let all_findings: Vec<&str> = graph.findings().map(|f| f.name.as_str()).collect();
    for f in &scene.findings {
        let Some(organ) = graph.parent_of(&f.name) else { continue };
        let slot = organs.iter().position(|o| *o == organ).unwrap_or(0);
        let k = findings_by_organ(organ).iter().position(|x| *x == f.name).unwrap_or(0);
        let global = all_findings.iter().position(|x| *x == f.name).unwrap_or(0);
        let (ax, ay) = organ_anchor(slot, f.side);
        let (ox, oy) = FINDING_OFFSETS[k % FINDING_OFFSETS.len()];
        let r = f.severity.radius();
        blob(&mut img, ax + ox, ay + oy, r, r, 70.0, global % 5);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    let noise = Normal::new(0.0, noise_std.max(1e-9)).expect("valid std");
    img.mapv(|v| (v + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8)
}

fn assign_splits(n: usize, fractions: [f64; 3], seed: u64) -> Vec<Split> {
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let mut splits: Vec<Split> = (0..n)
        .map(|i| {
            if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            }
        })
        .collect();
    splits.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5917));
    splits
}

/// Generates the full corpus in memory. Deterministic given `cfg`.
pub fn gen_corpus(cfg: &CorpusConfig, graph: &KnowledgeGraph) -> Result<Corpus> {
    cfg.validate()?;
    let splits = assign_splits(cfg.n_records, cfg.split, cfg.seed);
    let mut records = Vec::with_capacity(cfg.n_records);
    let mut images = Vec::with_capacity(cfg.n_records);
    for (i, split) in splits.into_iter().enumerate() {
        let id = i as u64;
        let scene = sample_scene(graph, cfg.seed, id, cfg.co_occurrence);
        images.push(render_image(graph, &scene, cfg.noise_std));
        records.push(CorpusRecord {
            id,
            image_path: format!("{IMAGE_DIR}/{id:06}.pgm"),
            report: render_report(&scene),
            labels: labels_for(&scene.findings),
            split,
            question: None,
            answer: None,
            qtype: None,
        });
    }
    Ok(Corpus {
        records,
        images,
        store: knowledge_triplets(graph)?,
        lexicon: finding_lexicon(graph)?,
        graph: graph.clone(),
    })
}

pub const CLOSED_QUESTION_PREFIX: &str = "is there";
pub const OPEN_FINDING_QUESTION: &str = "what finding is present ?";
pub const OPEN_ORGAN_QUESTION: &str = "which organ is abnormal ?";
/// Question slots per source record in VQA ids.
pub const VQA_ID_STRIDE: u64 = 32;

/// Source record id of a VQA question id.
pub fn vqa_source_id(question_id: u64) -> u64 {
    question_id / VQA_ID_STRIDE
}

/// Question-answer records derived from the corpus. Each record yields a
/// closed question for every present finding, as many about absent findings
/// (at least one), and an open question where the answer is unambiguous.
/// Question ids are `32 * source_id + slot`, where a closed question's slot is
/// the finding's index in the graph and the open question takes slot 31.
pub fn gen_vqa(corpus: &Corpus, seed: u64) -> Result<Vec<CorpusRecord>> {
    let graph = &corpus.graph;
    let findings: Vec<&str> = graph.findings().map(|f| f.name.as_str()).collect();
    if findings.len() as u64 >= VQA_ID_STRIDE {
        return Err(Error::Config(format!("VQA ids support fewer than {VQA_ID_STRIDE} findings")));
    }
    let mut out = Vec::new();
    for r in &corpus.records {
        let mut rng = record_rng(seed ^ 0x7a, r.id);
        let present = extract_entities(&r.report, &corpus.lexicon);
        let base = CorpusRecord { question: None, answer: None, qtype: None, ..r.clone() };
        let mut absent: Vec<&str> = findings.iter().copied().filter(|f| !present.iter().any(|p| p == f)).collect();
        absent.shuffle(&mut rng);
        absent.truncate(present.len().max(1));
        let asked = present.iter().map(|f| (f.as_str(), "yes")).chain(absent.into_iter().map(|f| (f, "no")));
        let mut closed: Vec<CorpusRecord> = asked
            .map(|(f, ans)| CorpusRecord {
                id: VQA_ID_STRIDE * r.id + findings.iter().position(|x| *x == f).unwrap_or(0) as u64,
                question: Some(format!("{CLOSED_QUESTION_PREFIX} {f} ?")),
                answer: Some(ans.into()),
                qtype: Some(QuestionType::Closed),
                ..base.clone()
            })
            .collect();
        closed.sort_by_key(|q| q.id);
        out.extend(closed);
        let organs: Vec<&str> = present.iter().filter_map(|p| graph.parent_of(p)).collect();
        let open = if present.len() == 1 && rng.gen_bool(0.5) {
            Some((OPEN_FINDING_QUESTION, present[0].clone()))
        } else if !organs.is_empty() && organs.iter().all(|o| *o == organs[0]) {
            Some((OPEN_ORGAN_QUESTION, organs[0].to_string()))
        } else {
            None
        };
        if let Some((q, a)) = open {
            out.push(CorpusRecord {
                id: VQA_ID_STRIDE * r.id + VQA_ID_STRIDE - 1,
                question: Some(q.into()),
                answer: Some(a),
                qtype: Some(QuestionType::Open),
                ..base
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// file helpers

pub fn write_pgm(path: &Path, img: &Array2<u8>) -> Result<()> {
    let (h, w) = img.dim();
    let buf: Vec<u8> = img.iter().copied().collect();
    let gray = image::GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer matches dims");
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = image::codecs::pnm::PnmEncoder::new(BufWriter::new(file))
        .with_subtype(image::codecs::pnm::PnmSubtype::Graymap(image::codecs::pnm::SampleEncoding::Binary));
    enc.encode(gray.as_raw().as_slice(), w as u32, h as u32, image::ExtendedColorType::L8)
        .map_err(|e| Error::Precondition(format!("{}: {e}", path.display())))
}

pub fn read_pgm(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Parse { path: path.display().to_string(), line: 0, msg: e.to_string() })?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_vec((h as usize, w as usize), img.into_raw()).expect("buffer matches dims"))
}

pub fn write_jsonl<S: Serialize>(path: &Path, items: &[S]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<S>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
