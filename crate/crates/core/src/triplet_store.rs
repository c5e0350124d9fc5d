//! Instance-related knowledge: entity recognition by lexicon lookup and
//! head-indexed triplet queries.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::neural::tokenizer::{Tokenizer, CLS, SEP};
use crate::text;

/// Default number of triplets kept before linearization.
pub const DEFAULT_TRIPLET_CAP: usize = 32;
/// Maximum token length of the linearized knowledge sentence.
pub const SK_MAX_LEN: usize = 90;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triplet {
    /// Normalizes all three fields; errors if any ends up empty.
    pub fn new(head: &str, relation: &str, tail: &str) -> Result<Self> {
        let norm = |s: &str| s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ");
        let t = Self { head: norm(head), relation: norm(relation), tail: norm(tail) };
        if t.head.is_empty() || t.relation.is_empty() || t.tail.is_empty() {
            return Err(Error::Precondition(format!("triplet with empty field: {t}")));
        }
        Ok(t)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.head
            .split_whitespace()
            .chain(self.relation.split_whitespace())
            .chain(self.tail.split_whitespace())
    }
}

impl fmt::Display for Triplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{}, {}, {}>", self.head, self.relation, self.tail)
    }
}

/// Ordered triplets with a head-entity index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TripletStore {
    triplets: Vec<Triplet>,
    head_index: HashMap<String, Vec<usize>>,
}

impl TripletStore {
    pub fn new(triplets: Vec<Triplet>) -> Self {
        let mut head_index: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, t) in triplets.iter().enumerate() {
            head_index.entry(t.head.clone()).or_default().push(i);
        }
        Self { triplets, head_index }
    }

    /// Parses `head<TAB>relation<TAB>tail` lines; `#` starts a comment line.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut triplets = Vec::new();
        for (i, line) in content_lines(text) {
            let fields: Vec<&str> = line.split('\t').collect();
            let err = |msg: String| Error::Parse { path: source.into(), line: i + 1, msg };
            if fields.len() != 3 {
                return Err(err(format!("expected 3 tab-separated fields, got {}", fields.len())));
            }
            let t = Triplet::new(fields[0], fields[1], fields[2]).map_err(|e| err(e.to_string()))?;
            triplets.push(t);
        }
        Ok(Self::new(triplets))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_tsv(&self) -> String {
        self.triplets
            .iter()
            .map(|t| format!("{}\t{}\t{}\n", t.head, t.relation, t.tail))
            .collect()
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn by_head(&self, entity: &str) -> impl Iterator<Item = &Triplet> {
        self.head_index
            .get(entity)
            .into_iter()
            .flatten()
            .map(move |&i| &self.triplets[i])
    }

    /// All words used by the store.
    pub fn vocabulary(&self) -> BTreeSet<String> {
        self.triplets.iter().flat_map(|t| t.words().map(str::to_string)).collect()
    }
}

/// Known entity strings, single- or multi-word.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EntityLexicon {
    entries: BTreeSet<String>,
    max_words: usize,
}

impl EntityLexicon {
    pub fn new(entries: impl IntoIterator<Item = String>) -> Result<Self> {
        let entries: BTreeSet<String> =
            entries.into_iter().map(|e| text::normalize(&e)).filter(|e| !e.is_empty()).collect();
        if entries.is_empty() {
            return Err(Error::Precondition("entity lexicon is empty".into()));
        }
        let max_words = entries.iter().map(|e| e.split(' ').count()).max().unwrap_or(1);
        Ok(Self { entries, max_words })
    }

    /// One entity per line; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        Self::new(content_lines(text).map(|(_, l)| l.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_lines(&self) -> String {
        self.entries.iter().map(|e| format!("{e}\n")).collect()
    }

    pub fn contains(&self, entity: &str) -> bool {
        self.entries.contains(entity)
    }

    pub fn entries(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(String::as_str)
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .map(|l| l.trim_end_matches('\r'))
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
}

/// Longest-match, left-to-right lexicon scan. First occurrences only.
pub fn extract_entities(text: &str, lexicon: &EntityLexicon) -> Vec<String> {
    let tokens = text::words(text);
    let mut found = Vec::new();
    let mut seen = HashSet::new();
    let mut i = 0;
    while i < tokens.len() {
        let longest = (1..=lexicon.max_words.min(tokens.len() - i)).rev().find_map(|n| {
            let phrase = tokens[i..i + n].join(" ");
            lexicon.contains(&phrase).then_some((n, phrase))
        });
        match longest {
            Some((n, phrase)) => {
                if seen.insert(phrase.clone()) {
                    found.push(phrase);
                }
                i += n;
            }
            None => i += 1,
        }
    }
    found
}

/// Head-indexed triplets for each entity in order, deduplicated, truncated to `cap`.
pub fn query_triplets(store: &TripletStore, entities: &[String], cap: usize) -> Vec<Triplet> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    'outer: for e in entities {
        for t in store.by_head(e) {
            if out.len() >= cap {
                break 'outer;
            }
            if seen.insert(t) {
                out.push(t.clone());
            }
        }
    }
    out
}

/// `[CLS] head relation tail ; head relation tail …` as words, cut at `max_len`.
pub fn linearize_words(triplets: &[Triplet], max_len: usize) -> Vec<String> {
    let mut out = vec!["[CLS]".to_string()];
    for (i, t) in triplets.iter().enumerate() {
        if i > 0 {
            out.push(";".into());
        }
        out.extend(t.words().map(str::to_string));
        if out.len() >= max_len {
            break;
        }
    }
    out.truncate(max_len);
    out
}

/// Token ids of [`linearize_words`]; unknown words become `[UNK]`.
pub fn linearize(triplets: &[Triplet], tokenizer: &Tokenizer, max_len: usize) -> Vec<u32> {
    linearize_words(triplets, max_len)
        .iter()
        .enumerate()
        .map(|(i, w)| match (i, w.as_str()) {
            (0, _) => CLS,
            (_, ";") => SEP,
            _ => tokenizer.id_or_unk(w),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lex(words: &[&str]) -> EntityLexicon {
        EntityLexicon::new(words.iter().map(|s| s.to_string())).unwrap()
    }

    fn sample_store() -> TripletStore {
        TripletStore::parse(
            "# radiology relations\nconsolidation\tsuggestive of\tpneumothorax\neffusion\tlocated at\tpleural\n",
            "t",
        )
        .unwrap()
    }

    #[test]
    fn longest_match_wins() {
        let l = lex(&["pleural effusion", "effusion", "consolidation"]);
        let got = extract_entities("small left pleural effusion with consolidation", &l);
        assert_eq!(got, ["pleural effusion", "consolidation"]);
    }

    #[test]
    fn no_hits_and_dedup() {
        let l = lex(&["effusion"]);
        assert!(extract_entities("the lungs are clear", &l).is_empty());
        assert_eq!(extract_entities("effusion. effusion,", &l), ["effusion"]);
    }

    #[test]
    fn query_returns_store_triplets_by_head() {
        let s = sample_store();
        let got = query_triplets(&s, &["consolidation".into()], 32);
        assert_eq!(got, [Triplet::new("consolidation", "suggestive of", "pneumothorax").unwrap()]);
        let got = query_triplets(&s, &["effusion".into()], 32);
        assert_eq!(got, [Triplet::new("effusion", "located at", "pleural").unwrap()]);
        let once = query_triplets(&s, &["effusion".into()], 32);
        let twice = query_triplets(&s, &["effusion".into(), "effusion".into()], 32);
        assert_eq!(once, twice);
        assert!(query_triplets(&s, &["effusion".into(), "consolidation".into()], 1).len() == 1);
    }

    #[test]
    fn linearized_sentence() {
        let s = sample_store();
        let k = query_triplets(&s, &["consolidation".into(), "effusion".into()], 32);
        let words = linearize_words(&k, SK_MAX_LEN);
        assert_eq!(
            words.join(" "),
            "[CLS] consolidation suggestive of pneumothorax ; effusion located at pleural"
        );
        let tok = Tokenizer::from_words(s.vocabulary(), 64);
        let ids = linearize(&k, &tok, SK_MAX_LEN);
        assert_eq!(ids.len(), words.len());
        assert_eq!(ids[0], CLS);
        assert_eq!(ids[5], SEP);
        assert_eq!(linearize(&[], &tok, SK_MAX_LEN), vec![CLS]);
    }

    #[test]
    fn long_knowledge_is_cut_at_max_len() {
        // 1 + 40*5 + 39 separators = 240 tokens before truncation
        let k: Vec<Triplet> = (0..40)
            .map(|i| Triplet::new(&format!("h{i} x"), "r y", &format!("t{i}")).unwrap())
            .collect();
        assert_eq!(linearize_words(&k, 10_000).len(), 240);
        assert_eq!(linearize_words(&k, SK_MAX_LEN).len(), 90);
    }

    #[test]
    fn malformed_store_line() {
        assert!(matches!(TripletStore::parse("a\tb\n", "s"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(TripletStore::parse("a\t \tc\n", "s"), Err(Error::Parse { .. })));
        assert!(EntityLexicon::parse("# nothing\n").is_err());
    }

    #[test]
    fn files_round_trip() {
        let s = sample_store();
        assert_eq!(TripletStore::parse(&s.to_tsv(), "r").unwrap(), s);
        let l = lex(&["pleural effusion", "edema"]);
        assert_eq!(EntityLexicon::parse(&l.to_lines()).unwrap(), l);
    }

    proptest! {
        #[test]
        fn truncation_is_monotone(n in 0usize..12, m in 1usize..40, extra in 0usize..40) {
            let k: Vec<Triplet> = (0..n)
                .map(|i| Triplet::new(&format!("e{i}"), "located at", &format!("o{}", i % 3)).unwrap())
                .collect();
            let short = linearize_words(&k, m);
            let long = linearize_words(&k, m + extra);
            prop_assert!(short.len() <= m);
            prop_assert_eq!(&long[..short.len()], &short[..]);
        }

        #[test]
        fn query_is_sound(picks in proptest::collection::vec(0usize..6, 0..8), cap in 0usize..10) {
            let names = ["effusion", "edema", "consolidation", "mass", "nodule", "hernia"];
            let store = TripletStore::new(
                names.iter().flat_map(|h| {
                    vec![
                        Triplet::new(h, "located at", "lung").unwrap(),
                        Triplet::new(h, "suggestive of", "edema").unwrap(),
                    ]
                }).collect(),
            );
            let ents: Vec<String> = picks.iter().map(|&i| names[i].to_string()).collect();
            let got = query_triplets(&store, &ents, cap);
            prop_assert!(got.len() <= cap);
            for t in &got {
                prop_assert!(ents.contains(&t.head));
            }
            let uniq: HashSet<_> = got.iter().collect();
            prop_assert_eq!(uniq.len(), got.len());
            prop_assert_eq!(query_triplets(&store, &ents, cap), got);
        }
    }
}
