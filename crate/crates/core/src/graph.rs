//! Undirected graphs: supports, weighted graphs, Laplacians, hop distances
//! and node splits.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor;

/// A set of unordered node pairs `{i, j}`, `i ≠ j`, on `n` nodes.
///
/// Edges are stored once as `(i, j)` with `i < j`, sorted lexicographically,
/// so an edge's index is stable and doubles as its parameter slot.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportPattern {
    n: usize,
    edges: Arc<[(usize, usize)]>,
    neighbors: Vec<Vec<usize>>,
}

impl SupportPattern {
    /// Builds a support from arbitrary pairs; orientation and duplicates are
    /// normalised away. Self-loops and out-of-range nodes are rejected.
    pub fn new(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut edges = Vec::new();
        for (a, b) in pairs {
            if a >= n || b >= n {
                return Err(Error::contract(format!("edge ({a},{b}) outside {n} nodes")));
            }
            if a == b {
                return Err(Error::contract(format!("self-loop on node {a}")));
            }
            edges.push((a.min(b), a.max(b)));
        }
        edges.sort_unstable();
        edges.dedup();
        let mut neighbors = vec![Vec::new(); n];
        for &(i, j) in &edges {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Ok(Self { n, edges: edges.into(), neighbors })
    }

    pub fn empty(n: usize) -> Self {
        Self { n, edges: Arc::from(Vec::new()), neighbors: vec![Vec::new(); n] }
    }

    pub fn complete(n: usize) -> Self {
        Self::new(n, (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))).expect("valid pairs")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Shared edge list, as consumed by [`crate::ad::Tape::scatter_sym`].
    pub fn edges_shared(&self) -> Arc<[(usize, usize)]> {
        self.edges.clone()
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.neighbors[u]
    }

    pub fn edge_index(&self, i: usize, j: usize) -> Option<usize> {
        let key = (i.min(j), i.max(j));
        self.edges.binary_search(&key).ok()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.edge_index(i, j).is_some()
    }

    pub fn is_subset_of(&self, other: &SupportPattern) -> bool {
        self.n == other.n && self.edges.iter().all(|&(i, j)| other.contains(i, j))
    }

    /// 0/1 adjacency matrix of the pattern.
    pub fn indicator(&self) -> Tensor {
        let mut a = Tensor::zeros(self.n, self.n);
        for &(i, j) in self.edges.iter() {
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
        a
    }
}

/// Non-negative-by-projection weights on a [`SupportPattern`], one per edge.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedGraph {
    support: Arc<SupportPattern>,
    weights: Vec<f64>,
}

impl WeightedGraph {
    pub fn new(support: Arc<SupportPattern>, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != support.num_edges() {
            return Err(Error::dim(
                "weighted_graph",
                format!("{} weights for {} edges", weights.len(), support.num_edges()),
            ));
        }
        Ok(Self { support, weights })
    }

    pub fn unit(support: Arc<SupportPattern>) -> Self {
        let weights = vec![1.0; support.num_edges()];
        Self { support, weights }
    }

    pub fn n(&self) -> usize {
        self.support.n()
    }

    pub fn support(&self) -> &Arc<SupportPattern> {
        &self.support
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.support.edge_index(i, j).map_or(0.0, |k| self.weights[k])
    }

    /// Dense symmetric adjacency; `A = Aᵀ` holds exactly.
    pub fn adjacency(&self) -> Tensor {
        let n = self.n();
        let mut a = Tensor::zeros(n, n);
        for (&(i, j), &w) in self.support.edges().iter().zip(&self.weights) {
            a.set(i, j, w);
            a.set(j, i, w);
        }
        a
    }

    pub fn degrees(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n()];
        for (&(i, j), &w) in self.support.edges().iter().zip(&self.weights) {
            d[i] += w;
            d[j] += w;
        }
        d
    }
}

/// `L = D − A` of a weighted graph.
pub fn laplacian(g: &WeightedGraph) -> Tensor {
    laplacian_dense(&g.adjacency())
}

/// `L = D − A` of a dense symmetric adjacency.
pub fn laplacian_dense(a: &Tensor) -> Tensor {
    let n = a.rows();
    let mut l = a.scale(-1.0);
    for i in 0..n {
        let deg: f64 = a.row(i).iter().sum();
        l.add_at(i, i, deg);
    }
    l
}

/// BFS hop distances from the nearest source; `None` marks unreachable nodes.
pub fn hop_distances(support: &SupportPattern, sources: &[usize]) -> Result<Vec<Option<usize>>> {
    if sources.is_empty() {
        return Err(Error::contract("hop_distances needs at least one source"));
    }
    let mut dist = vec![None; support.n()];
    let mut queue = VecDeque::new();
    for &s in sources {
        if s >= support.n() {
            return Err(Error::contract(format!("source {s} outside {} nodes", support.n())));
        }
        if dist[s].is_none() {
            dist[s] = Some(0);
            queue.push_back(s);
        }
    }
    while let Some(u) = queue.pop_front() {
        let du = dist[u].expect("queued nodes have distances");
        for &v in support.neighbors(u) {
            if dist[v].is_none() {
                dist[v] = Some(du + 1);
                queue.push_back(v);
            }
        }
    }
    Ok(dist)
}

/// How [`edge_distance`] measures an edge's distance to the labelled nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMode {
    /// Min over endpoints of the hop distance to `V_tr ∪ V_out`.
    Gcn,
    /// Min over endpoints of `dist(V_tr) + dist(V_out)`.
    Laplacian,
}

fn add_opt(a: Option<usize>, b: Option<usize>) -> Option<usize> {
    Some(a? + b?)
}

fn min_opt(a: Option<usize>, b: Option<usize>) -> Option<usize> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, None) | (None, x) => x,
    }
}

/// Per-edge distance to the labelled nodes (`None` = infinite).
pub fn edge_distance(support: &SupportPattern, split: &NodeSplit, mode: DistanceMode) -> Result<Vec<Option<usize>>> {
    edge_distance_via(support, support.edges(), split, mode)
}

/// Like [`edge_distance`] for arbitrary node pairs, with hops counted on
/// `metric` rather than on the graph the pairs come from.
pub fn edge_distance_via(
    metric: &SupportPattern,
    pairs: &[(usize, usize)],
    split: &NodeSplit,
    mode: DistanceMode,
) -> Result<Vec<Option<usize>>> {
    let per_node: Vec<Option<usize>> = match mode {
        DistanceMode::Gcn => hop_distances(metric, &split.labelled())?,
        DistanceMode::Laplacian => {
            let dt = hop_distances(metric, &split.train)?;
            let dout = hop_distances(metric, &split.outer)?;
            dt.iter().zip(&dout).map(|(&a, &b)| add_opt(a, b)).collect()
        }
    };
    pairs
        .iter()
        .map(|&(i, j)| {
            if i >= metric.n() || j >= metric.n() {
                return Err(Error::contract(format!("pair ({i},{j}) outside {} nodes", metric.n())));
            }
            Ok(min_opt(per_node[i], per_node[j]))
        })
        .collect()
}

/// Per-edge `(q, k)`: the smallest endpoint hop distance to `V_tr` and to
/// `V_out` respectively, `None` when either is infinite.
pub fn edge_train_outer_distances(support: &SupportPattern, split: &NodeSplit) -> Result<Vec<Option<(usize, usize)>>> {
    let dt = hop_distances(support, &split.train)?;
    let dout = hop_distances(support, &split.outer)?;
    Ok(support.edges().iter().map(|&(i, j)| Some((min_opt(dt[i], dt[j])?, min_opt(dout[i], dout[j])?))).collect())
}

/// Pairs joined by a path of at most `r` hops, i.e. the zero pattern of
/// `Σ_{t=1}^{r} Aᵗ` without the diagonal.
pub fn power_support(support: &SupportPattern, r: usize) -> Result<SupportPattern> {
    if r == 0 {
        return Err(Error::contract("power_support needs r >= 1"));
    }
    let n = support.n();
    let reach = parallel::map_indexed(n, |s| {
        let mut dist = vec![usize::MAX; n];
        dist[s] = 0;
        let mut queue = VecDeque::from([s]);
        let mut found = Vec::new();
        while let Some(u) = queue.pop_front() {
            if dist[u] == r {
                continue;
            }
            for &v in support.neighbors(u) {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                    if v > s {
                        found.push(v);
                    }
                }
            }
        }
        found
    });
    SupportPattern::new(n, reach.into_iter().enumerate().flat_map(|(s, vs)| vs.into_iter().map(move |v| (s, v))))
}

/// Clamps every weight into `[lo, hi]`.
pub fn project_weights(g: &WeightedGraph, lo: f64, hi: f64) -> Result<WeightedGraph> {
    if !(lo <= hi) {
        return Err(Error::contract(format!("projection bounds [{lo}, {hi}] are empty")));
    }
    Ok(WeightedGraph { support: g.support.clone(), weights: g.weights.iter().map(|w| w.clamp(lo, hi)).collect() })
}

/// Component label per node and the number of components.
pub fn connected_components(support: &SupportPattern) -> (Vec<usize>, usize) {
    let n = support.n();
    let mut label = vec![usize::MAX; n];
    let mut count = 0;
    for s in 0..n {
        if label[s] != usize::MAX {
            continue;
        }
        label[s] = count;
        let mut stack = vec![s];
        while let Some(u) = stack.pop() {
            for &v in support.neighbors(u) {
                if label[v] == usize::MAX {
                    label[v] = count;
                    stack.push(v);
                }
            }
        }
        count += 1;
    }
    (label, count)
}

/// Disjoint node index sets of a semi-supervised task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSplit {
    pub train: Vec<usize>,
    pub outer: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl NodeSplit {
    /// Validates disjointness, range and non-emptiness of `train`/`outer`.
    pub fn new(n: usize, train: Vec<usize>, outer: Vec<usize>, val: Vec<usize>, test: Vec<usize>) -> Result<Self> {
        let split = Self { train, outer, val, test };
        split.validate(n)?;
        Ok(split)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.train.is_empty() || self.outer.is_empty() {
            return Err(Error::contract("V_tr and V_out must be nonempty"));
        }
        let mut seen = vec![false; n];
        for set in [&self.train, &self.outer, &self.val, &self.test] {
            for &u in set {
                if u >= n {
                    return Err(Error::contract(format!("split node {u} outside {n} nodes")));
                }
                if seen[u] {
                    return Err(Error::contract(format!("node {u} appears in two split sets")));
                }
                seen[u] = true;
            }
        }
        Ok(())
    }

    /// `V_tr ∪ V_out`, sorted.
    pub fn labelled(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.train.iter().chain(&self.outer).copied().collect();
        all.sort_unstable();
        all
    }
}

/// Writes one `i j w` line per edge.
pub fn write_edge_list(g: &WeightedGraph, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (&(i, j), &w) in g.support().edges().iter().zip(g.weights()) {
        writeln!(out, "{i} {j} {w:e}").expect("writing to a String");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads an `i j w` edge list. The node count is `n` when given, otherwise
/// one more than the largest index seen.
pub fn read_edge_list(path: &Path, n: Option<usize>) -> Result<WeightedGraph> {
    let text = std::fs::read_to_string(path)?;
    let parse_err = |line: usize, msg: String| Error::Parse { path: path.display().to_string(), line, msg };
    let mut triples = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line_no = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(line_no, format!("expected `i j w`, found {} fields", fields.len())));
        }
        let i: usize = fields[0].parse().map_err(|e| parse_err(line_no, format!("node `{}`: {e}", fields[0])))?;
        let j: usize = fields[1].parse().map_err(|e| parse_err(line_no, format!("node `{}`: {e}", fields[1])))?;
        let w: f64 = fields[2].parse().map_err(|e| parse_err(line_no, format!("weight `{}`: {e}", fields[2])))?;
        if i == j {
            return Err(parse_err(line_no, format!("self-loop on node {i}")));
        }
        if !w.is_finite() {
            return Err(parse_err(line_no, format!("non-finite weight {w}")));
        }
        triples.push((line_no, i.min(j), i.max(j), w));
    }
    let n = match n {
        Some(n) => n,
        None => triples.iter().map(|t| t.2 + 1).max().unwrap_or(0),
    };
    if let Some(t) = triples.iter().find(|t| t.2 >= n) {
        return Err(parse_err(t.0, format!("node {} outside {n} nodes", t.2)));
    }
    let mut sorted = triples.clone();
    sorted.sort_by_key(|t| (t.1, t.2));
    if let Some(w) = sorted.windows(2).find(|w| (w[0].1, w[0].2) == (w[1].1, w[1].2)) {
        return Err(parse_err(w[1].0, format!("duplicate edge ({}, {})", w[1].1, w[1].2)));
    }
    let support = SupportPattern::new(n, sorted.iter().map(|t| (t.1, t.2)))?;
    WeightedGraph::new(Arc::new(support), sorted.iter().map(|t| t.3).collect())
}
