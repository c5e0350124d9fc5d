//! The instance-agnostic organ/finding graph and its visible mask.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default graph shipped with the crate.
pub const DEFAULT_GRAPH_TSV: &str = include_str!("../assets/chest_graph.tsv");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Root,
    Organ,
    Finding,
}

impl NodeKind {
    /// Row of the structure embedding table.
    pub fn index(self) -> usize {
        match self {
            NodeKind::Root => 0,
            NodeKind::Organ => 1,
            NodeKind::Finding => 2,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "root" => Some(NodeKind::Root),
            "organ" => Some(NodeKind::Organ),
            "finding" => Some(NodeKind::Finding),
            _ => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            NodeKind::Root => "root",
            NodeKind::Organ => "organ",
            NodeKind::Finding => "finding",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphNode {
    pub name: String,
    pub kind: NodeKind,
    pub parent_organ: Option<String>,
}

impl GraphNode {
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.name.split_whitespace()
    }
}

/// Expected node counts. `None` accepts any count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphSchema {
    pub organs: Option<usize>,
    pub findings: Option<usize>,
}

impl GraphSchema {
    /// One root, 7 organ/tissue nodes and 20 finding nodes.
    pub const CHEST: GraphSchema = GraphSchema { organs: Some(7), findings: Some(20) };
    pub const ANY: GraphSchema = GraphSchema { organs: None, findings: None };
}

/// Validated graph with its binary adjacency (allowed = true).
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeGraph {
    nodes: Vec<GraphNode>,
    adjacency: Arc<Array2<bool>>,
}

impl KnowledgeGraph {
    /// Parses the line format `kind<TAB>name<TAB>parent_or_dash`.
    pub fn parse(text: &str, source: &str, schema: GraphSchema) -> Result<Self> {
        let mut nodes = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: source.to_string(),
                line: lineno + 1,
                msg,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(parse_err(format!("expected 3 tab-separated fields, got {}", fields.len())));
            }
            let kind = NodeKind::parse(fields[0].trim())
                .ok_or_else(|| parse_err(format!("unknown node kind `{}`", fields[0])))?;
            let name = normalize_name(fields[1]);
            if name.is_empty() {
                return Err(parse_err("empty node name".into()));
            }
            let parent = match fields[2].trim() {
                "-" | "" => None,
                p => Some(normalize_name(p)),
            };
            nodes.push(GraphNode { name, kind, parent_organ: parent });
        }
        Self::from_nodes(nodes, schema)
    }

    pub fn load(path: impl AsRef<Path>, schema: GraphSchema) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string(), schema)
    }

    /// The 28-node chest graph shipped in `assets/chest_graph.tsv`.
    pub fn default_chest() -> Self {
        Self::parse(DEFAULT_GRAPH_TSV, "assets/chest_graph.tsv", GraphSchema::CHEST)
            .expect("shipped graph is valid")
    }

    pub fn from_nodes(nodes: Vec<GraphNode>, schema: GraphSchema) -> Result<Self> {
        validate(&nodes, schema)?;
        let adjacency = Arc::new(build_adjacency(&nodes));
        Ok(Self { nodes, adjacency })
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn adjacency(&self) -> &Array2<bool> {
        &self.adjacency
    }

    pub fn adjacency_shared(&self) -> Arc<Array2<bool>> {
        Arc::clone(&self.adjacency)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn organs(&self) -> impl Iterator<Item = &GraphNode> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Organ)
    }

    pub fn findings(&self) -> impl Iterator<Item = &GraphNode> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Finding)
    }

    /// Parent organ of a finding.
    pub fn parent_of(&self, finding: &str) -> Option<&str> {
        self.nodes
            .iter()
            .find(|n| n.name == finding)
            .and_then(|n| n.parent_organ.as_deref())
    }

    /// Serializes in the same line format `parse` reads.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            let parent = n.parent_organ.as_deref().unwrap_or("-");
            out.push_str(&format!("{}\t{}\t{}\n", n.kind.as_str(), n.name, parent));
        }
        out
    }
}

impl fmt::Display for KnowledgeGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let organs = self.organs().count();
        let findings = self.findings().count();
        write!(f, "graph: {} nodes ({organs} organs, {findings} findings)", self.len())
    }
}

fn normalize_name(s: &str) -> String {
    s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

fn validate(nodes: &[GraphNode], schema: GraphSchema) -> Result<()> {
    let mut seen = HashMap::new();
    for n in nodes {
        if seen.insert(n.name.as_str(), n.kind).is_some() {
            return Err(Error::Schema(format!("duplicate node name `{}`", n.name)));
        }
    }
    let roots = nodes.iter().filter(|n| n.kind == NodeKind::Root).count();
    if roots != 1 {
        return Err(Error::Schema(format!("expected exactly one root, found {roots}")));
    }
    for n in nodes {
        match (n.kind, &n.parent_organ) {
            (NodeKind::Finding, None) => {
                return Err(Error::Schema(format!("finding `{}` has no parent organ", n.name)))
            }
            (NodeKind::Finding, Some(p)) => match seen.get(p.as_str()) {
                Some(NodeKind::Organ) => {}
                Some(_) => {
                    return Err(Error::Schema(format!(
                        "parent `{p}` of finding `{}` is not an organ",
                        n.name
                    )))
                }
                None => {
                    return Err(Error::Schema(format!(
                        "finding `{}` names missing parent organ `{p}`",
                        n.name
                    )))
                }
            },
            (_, Some(p)) => {
                return Err(Error::Schema(format!(
                    "{} node `{}` must not have a parent (got `{p}`)",
                    n.kind.as_str(),
                    n.name
                )))
            }
            (_, None) => {}
        }
    }
    let organs = nodes.iter().filter(|n| n.kind == NodeKind::Organ).count();
    let findings = nodes.iter().filter(|n| n.kind == NodeKind::Finding).count();
    if let Some(want) = schema.organs.filter(|&w| w != organs) {
        return Err(Error::Schema(format!("expected {want} organ nodes, found {organs}")));
    }
    if let Some(want) = schema.findings.filter(|&w| w != findings) {
        return Err(Error::Schema(format!("expected {want} finding nodes, found {findings}")));
    }
    Ok(())
}

/// Symmetric visible mask with an all-true diagonal.
///
/// The root sees everything, organs see each other, a finding sees its parent
/// organ and the findings sharing that parent.
pub fn build_adjacency(nodes: &[GraphNode]) -> Array2<bool> {
    let n = nodes.len();
    Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            return true;
        }
        let (a, b) = (&nodes[i], &nodes[j]);
        use NodeKind::*;
        match (a.kind, b.kind) {
            (Root, _) | (_, Root) => true,
            (Organ, Organ) => true,
            (Finding, Finding) => a.parent_organ == b.parent_organ,
            (Finding, Organ) => a.parent_organ.as_deref() == Some(b.name.as_str()),
            (Organ, Finding) => b.parent_organ.as_deref() == Some(a.name.as_str()),
        }
    })
}

/// Word and structure embedding tables for graph nodes.
#[derive(Clone, Debug)]
pub struct NodeEmbeddingTables<T> {
    /// One row per vocabulary word.
    pub word_rows: Array2<T>,
    pub word_index: HashMap<String, usize>,
    /// Rows for root, organ, finding.
    pub structure: Array2<T>,
}

impl<T: Scalar> NodeEmbeddingTables<T> {
    pub fn validate(&self) -> Result<()> {
        if self.structure.nrows() != 3 {
            return Err(Error::Shape(format!(
                "structure table needs 3 rows, has {}",
                self.structure.nrows()
            )));
        }
        if self.structure.ncols() != self.word_rows.ncols() {
            return Err(Error::Shape("word and structure widths differ".into()));
        }
        let finite = self.word_rows.iter().chain(self.structure.iter()).all(|e| e.is_finite());
        if !finite {
            return Err(Error::Precondition("embedding tables contain non-finite values".into()));
        }
        Ok(())
    }
}

/// Vocabulary rows for each node's words. Multi-word names average their words.
pub fn node_word_indices(
    graph: &KnowledgeGraph,
    lookup: impl Fn(&str) -> Option<usize>,
) -> Result<Vec<Vec<usize>>> {
    graph
        .nodes()
        .iter()
        .map(|n| {
            n.words()
                .map(|w| lookup(w).ok_or_else(|| Error::MissingEmbedding(w.to_string())))
                .collect()
        })
        .collect()
}

/// `row_i = word(name_i) + structure(kind_i)`.
pub fn embed_nodes<T: Scalar>(
    graph: &KnowledgeGraph,
    tables: &NodeEmbeddingTables<T>,
) -> Result<Array2<T>> {
    tables.validate()?;
    let idx = node_word_indices(graph, |w| tables.word_index.get(w).copied())?;
    let d = tables.structure.ncols();
    let mut out = Array2::zeros((graph.len(), d));
    for (i, (node, words)) in graph.nodes().iter().zip(&idx).enumerate() {
        let mut row = out.row_mut(i);
        let inv = T::one() / T::lit(words.len() as f64);
        for &w in words {
            row.scaled_add(inv, &tables.word_rows.row(w));
        }
        row += &tables.structure.row(node.kind.index());
    }
    Ok(out)
}
