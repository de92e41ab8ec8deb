//! Residual-quantization document hierarchy and per-node keyword labels.
//!
//! Level 1 clusters the document vectors; each deeper level clusters, within
//! one node, the residuals left after subtracting the centroids of all
//! ancestors. Clusters that still hold several documents at the last level
//! get one extra child per document so that every root-to-document path is
//! distinct once sibling labels are.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::embed::Embedding;
use crate::corpus::{content_words, Corpus, Tokenizer};
use crate::error::{Error, Result};

pub const MAX_KMEANS_ITERS: usize = 25;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Root,
    Cluster,
    Document,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RqNode {
    pub kind: NodeKind,
    pub depth: usize,
    pub parent: Option<NodeId>,
    /// Set for cluster nodes; lives in the residual space of its level.
    pub centroid: Option<Embedding>,
    pub label: String,
    pub children: Vec<NodeId>,
    /// Indices into [`RqHierarchy::keys`], ascending.
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RqHierarchy {
    pub levels: usize,
    pub branching: usize,
    pub dim: usize,
    keys: Vec<String>,
    vectors: Vec<Embedding>,
    nodes: Vec<RqNode>,
    leaf_of: Vec<NodeId>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid, lowest index on ties.
pub fn nearest(point: &[f64], centroids: &[Embedding]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Deterministic k-means.
///
/// Farthest-point seeding starts from `points[0]` and takes the first point
/// at maximal distance on ties; seeding stops early once every point
/// coincides with a chosen centroid. Lloyd iterations run until the
/// assignment is stable or [`MAX_KMEANS_ITERS`] updates have been made. The
/// returned assignment is always nearest-centroid with respect to the
/// returned centroids, and no returned cluster is empty.
pub fn kmeans(points: &[&[f64]], k: usize) -> (Vec<Embedding>, Vec<usize>) {
    assert!(!points.is_empty() && k >= 1);
    let mut centroids: Vec<Embedding> = vec![points[0].to_vec()];
    let mut min_d: Vec<f64> = points.iter().map(|p| sq_dist(p, points[0])).collect();
    while centroids.len() < k {
        let (far, &far_d) =
            min_d.iter().enumerate().fold(
                (0, &f64::NEG_INFINITY),
                |acc, (i, d)| if *d > *acc.1 { (i, d) } else { acc },
            );
        if far_d <= 0.0 {
            break;
        }
        centroids.push(points[far].to_vec());
        for (d, p) in min_d.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, points[far]));
        }
    }

    let assign_all = |cs: &[Embedding]| -> Vec<usize> { points.iter().map(|p| nearest(p, cs)).collect() };
    let mut assignment = assign_all(&centroids);
    for _ in 0..MAX_KMEANS_ITERS {
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p.iter()).for_each(|(s, x)| *s += x);
        }
        for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                *c = s.into_iter().map(|x| x / n as f64).collect();
            }
        }
        let next = assign_all(&centroids);
        if next == assignment {
            break;
        }
        assignment = next;
    }

    // drop clusters nobody chose; relative order is kept so ties still
    // resolve to the lowest surviving index
    let mut used = vec![false; centroids.len()];
    assignment.iter().for_each(|&a| used[a] = true);
    let mut remap = vec![usize::MAX; centroids.len()];
    let mut kept = Vec::new();
    for (i, c) in centroids.into_iter().enumerate() {
        if used[i] {
            remap[i] = kept.len();
            kept.push(c);
        }
    }
    let assignment = assignment.into_iter().map(|a| remap[a]).collect();
    (kept, assignment)
}

impl RqHierarchy {
    /// Builds the hierarchy over `vectors` (iteration order = key order).
    ///
    /// `branching` is clamped to the number of documents in each node.
    pub fn build(vectors: &BTreeMap<String, Embedding>, levels: usize, branching: usize) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::DegenerateInput("no vectors".into()));
        }
        if levels == 0 || branching == 0 {
            return Err(Error::DegenerateInput(format!("levels={levels} branching={branching}")));
        }
        let dim = vectors.values().next().map(Vec::len).unwrap_or(0);
        if dim == 0 {
            return Err(Error::DegenerateInput("zero-dimensional vectors".into()));
        }
        for (key, v) in vectors {
            if v.len() != dim {
                return Err(Error::DegenerateInput(format!("{key}: dimension {} != {dim}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::DegenerateInput(format!("{key}: non-finite entry")));
            }
        }

        let keys: Vec<String> = vectors.keys().cloned().collect();
        let raw: Vec<Embedding> = vectors.values().cloned().collect();
        let mut h = RqHierarchy {
            levels,
            branching,
            dim,
            keys,
            vectors: raw.clone(),
            nodes: vec![RqNode {
                kind: NodeKind::Root,
                depth: 0,
                parent: None,
                centroid: None,
                label: String::new(),
                children: Vec::new(),
                members: (0..raw.len()).collect(),
            }],
            leaf_of: vec![usize::MAX; raw.len()],
        };

        let mut residuals = raw;
        let mut frontier = vec![0];
        for depth in 1..=levels {
            let mut next_frontier = Vec::new();
            for &node in &frontier {
                let members = h.nodes[node].members.clone();
                let points: Vec<&[f64]> = members.iter().map(|&m| residuals[m].as_slice()).collect();
                let k = branching.min(points.len());
                let (centroids, assignment) = kmeans(&points, k);
                let mut groups = vec![Vec::new(); centroids.len()];
                for (&m, &a) in members.iter().zip(&assignment) {
                    groups[a].push(m);
                }
                for (centroid, group) in centroids.into_iter().zip(groups) {
                    for &m in &group {
                        residuals[m].iter_mut().zip(&centroid).for_each(|(r, c)| *r -= c);
                    }
                    let id = h.add_node(node, NodeKind::Cluster, depth, Some(centroid), group);
                    next_frontier.push(id);
                }
            }
            frontier = next_frontier;
        }

        for &leaf in &frontier {
            let members = h.nodes[leaf].members.clone();
            if members.len() == 1 {
                h.leaf_of[members[0]] = leaf;
                continue;
            }
            for m in members {
                let id = h.add_node(leaf, NodeKind::Document, levels + 1, None, vec![m]);
                h.leaf_of[m] = id;
            }
        }
        Ok(h)
    }

    fn add_node(
        &mut self,
        parent: NodeId,
        kind: NodeKind,
        depth: usize,
        centroid: Option<Embedding>,
        members: Vec<usize>,
    ) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(RqNode {
            kind,
            depth,
            parent: Some(parent),
            centroid,
            label: String::new(),
            children: Vec::new(),
            members,
        });
        self.nodes[parent].children.push(id);
        id
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn vector(&self, doc: usize) -> &[f64] {
        &self.vectors[doc]
    }

    pub fn nodes(&self) -> &[RqNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &RqNode {
        &self.nodes[id]
    }

    pub fn root(&self) -> NodeId {
        0
    }

    pub fn doc_index(&self, key: &str) -> Option<usize> {
        self.keys.binary_search_by(|k| k.as_str().cmp(key)).ok()
    }

    pub fn leaf(&self, key: &str) -> Result<NodeId> {
        self.doc_index(key)
            .map(|i| self.leaf_of[i])
            .ok_or_else(|| Error::UnknownDoc(key.to_string()))
    }

    /// Nodes from depth 1 down to the document's leaf.
    pub fn path(&self, key: &str) -> Result<Vec<NodeId>> {
        let mut id = self.leaf(key)?;
        let mut path = Vec::new();
        while let Some(parent) = self.nodes[id].parent {
            path.push(id);
            id = parent;
        }
        path.reverse();
        Ok(path)
    }

    /// Cluster nodes on the document's path, one per level.
    pub fn cluster_path(&self, key: &str) -> Result<Vec<NodeId>> {
        Ok(self
            .path(key)?
            .into_iter()
            .filter(|&n| self.nodes[n].kind == NodeKind::Cluster)
            .collect())
    }

    /// Sum of the first `levels` centroids on the document's path.
    pub fn reconstruction(&self, key: &str, levels: usize) -> Result<Embedding> {
        let mut out = vec![0.0; self.dim];
        for node in self.cluster_path(key)?.into_iter().take(levels) {
            let c = self.nodes[node].centroid.as_ref().expect("cluster centroid");
            out.iter_mut().zip(c).for_each(|(o, x)| *o += x);
        }
        Ok(out)
    }

    /// Mean squared reconstruction error using the first `levels` levels.
    pub fn mean_squared_residual(&self, levels: usize) -> f64 {
        let total: f64 = self
            .keys
            .iter()
            .zip(&self.vectors)
            .map(|(k, v)| sq_dist(v, &self.reconstruction(k, levels).expect("known key")))
            .sum();
        total / self.keys.len() as f64
    }

    /// Labels every node below the root. See [`assign_keywords`].
    pub fn assign_keywords(&mut self, corpus: &Corpus, tokenizer: &Tokenizer) -> Result<()> {
        let stats = TermStats::new(corpus, tokenizer);
        let mut doc_terms = Vec::with_capacity(self.keys.len());
        for key in &self.keys {
            let doc = corpus.get(key).ok_or_else(|| Error::UnknownDoc(key.clone()))?;
            doc_terms.push(stats.doc_terms(&doc.doc_key).clone());
        }

        let mut queue = std::collections::VecDeque::from([(0usize, HashSet::<String>::new())]);
        while let Some((node, inherited)) = queue.pop_front() {
            let mut sibling_used: HashSet<String> = HashSet::new();
            let children = self.nodes[node].children.clone();
            for (ordinal, &child) in children.iter().enumerate() {
                let ranked = rank_terms(&stats, &doc_terms, &self.nodes[child].members);
                let pick = ranked
                    .iter()
                    .find(|t| !inherited.contains(*t) && !sibling_used.contains(*t));
                let (label, base) = match pick {
                    Some(t) => (t.clone(), t.clone()),
                    None => {
                        let base = ranked.first().cloned().unwrap_or_else(|| "node".into());
                        (format!("{base}-{}", ordinal + 1), base)
                    }
                };
                sibling_used.insert(label.clone());
                sibling_used.insert(base.clone());
                self.nodes[child].label = label.clone();

                let mut below = inherited.clone();
                below.insert(label);
                below.insert(base);
                queue.push_back((child, below));
            }
        }
        Ok(())
    }

    /// Root-to-leaf labels joined with `-`.
    pub fn path_surface(&self, key: &str) -> Result<String> {
        let labels: Vec<&str> = self
            .path(key)?
            .into_iter()
            .map(|n| self.nodes[n].label.as_str())
            .collect();
        Ok(labels.join("-"))
    }

    pub fn to_serial(&self) -> HierarchyNode {
        self.serial_node(0)
    }

    fn serial_node(&self, id: NodeId) -> HierarchyNode {
        let node = &self.nodes[id];
        HierarchyNode {
            kind: node.kind,
            label: node.label.clone(),
            centroid: node.centroid.clone(),
            docs: node.members.iter().map(|&m| self.keys[m].clone()).collect(),
            children: node.children.iter().map(|&c| self.serial_node(c)).collect(),
        }
    }
}

/// Builds the hierarchy from document vectors.
pub fn build_rq_hierarchy(
    vectors: &BTreeMap<String, Embedding>,
    levels: usize,
    branching: usize,
) -> Result<RqHierarchy> {
    RqHierarchy::build(vectors, levels, branching)
}

/// Labels each node with its best TF-IDF term not used by an ancestor or an
/// earlier sibling; ties go to the lexicographically smaller term. A node
/// whose candidates are exhausted is labelled `<best>-<ordinal>`.
pub fn assign_keywords(mut h: RqHierarchy, corpus: &Corpus, tokenizer: &Tokenizer) -> Result<RqHierarchy> {
    h.assign_keywords(corpus, tokenizer)?;
    Ok(h)
}

/// Serialized form of one hierarchy node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyNode {
    pub kind: NodeKind,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centroid: Option<Embedding>,
    pub docs: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<HierarchyNode>,
}

/// Corpus-level document frequencies plus per-document term sets.
pub(crate) struct TermStats {
    n_docs: usize,
    df: HashMap<String, usize>,
    terms: HashMap<String, HashSet<String>>,
}

impl TermStats {
    pub(crate) fn new(corpus: &Corpus, tokenizer: &Tokenizer) -> Self {
        let mut df: HashMap<String, usize> = HashMap::new();
        let mut terms = HashMap::new();
        for doc in corpus {
            let mut text = doc.title.clone().unwrap_or_default();
            text.push(' ');
            text.push_str(&doc.text);
            let set: HashSet<String> = content_words(tokenizer, &text).into_iter().collect();
            for t in &set {
                *df.entry(t.clone()).or_default() += 1;
            }
            terms.insert(doc.doc_key.clone(), set);
        }
        TermStats {
            n_docs: corpus.len(),
            df,
            terms,
        }
    }

    pub(crate) fn idf(&self, term: &str) -> f64 {
        let df = self.df.get(term).copied().unwrap_or(0).max(1);
        (1.0 + self.n_docs as f64 / df as f64).ln()
    }

    fn doc_terms(&self, key: &str) -> &HashSet<String> {
        &self.terms[key]
    }
}

/// Terms of a node ordered by score, where score = (fraction of the node's
/// documents containing the term) * ln(1 + N / df).
fn rank_terms(stats: &TermStats, doc_terms: &[HashSet<String>], members: &[usize]) -> Vec<String> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for &m in members {
        for t in &doc_terms[m] {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let n = members.len().max(1) as f64;
    let mut scored: Vec<(f64, &str)> = counts
        .into_iter()
        .map(|(t, c)| (c as f64 / n * stats.idf(t), t))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    scored.into_iter().map(|(_, t)| t.to_string()).collect()
}
