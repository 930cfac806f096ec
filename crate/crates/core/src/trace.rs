//! Causal tracing from one input covariate through the trunk.
//!
//! The input column is shifted by `δ` standard deviations. Layer-1 neurons
//! whose mean absolute change reaches `τ` times their own activation sd form
//! the first frontier. Each frontier node is then patched alone, with its
//! perturbed activation, into the clean run; the neurons of the next layer
//! that move past their threshold become nodes with an edge from it. A node
//! that moves nothing in the next layer is a failed source. Layers are
//! numbered from 1; layer 0 holds the input node.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::matrix::Matrix;
use crate::nnet::MultiTaskNet;
use crate::rng::{self, streams};
use crate::stats;
use crate::{Error, Result};

/// `(layer, neuron)`; layer 0 is the input layer.
pub type Node = (usize, usize);
pub type Edge = (Node, Node);

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TraceConfig {
    /// Input shift in units of the input column's sd.
    pub perturbation_sd_multiple: f64,
    /// Activation threshold as a fraction of each neuron's sd.
    pub relative_threshold: f64,
    pub probe_batch: usize,
    pub seed: u64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            perturbation_sd_multiple: 1.0,
            relative_threshold: 0.1,
            probe_batch: 1000,
            seed: 42,
        }
    }
}

impl TraceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.perturbation_sd_multiple > 0.0) || !self.perturbation_sd_multiple.is_finite() {
            return Err(Error::InvalidParameter {
                name: "perturbation_sd_multiple",
                reason: "must be finite and positive".into(),
            });
        }
        // +inf is allowed: it saturates the threshold
        if !(self.relative_threshold > 0.0) {
            return Err(Error::InvalidParameter {
                name: "relative_threshold",
                reason: "must be positive".into(),
            });
        }
        if self.probe_batch == 0 {
            return Err(Error::InvalidParameter {
                name: "probe_batch",
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PathwayGraph {
    pub source_input: usize,
    /// Number of trunk layers.
    pub layer_count: usize,
    /// Activated trunk nodes (layer ≥ 1).
    pub nodes: BTreeSet<Node>,
    pub failed: BTreeSet<Node>,
    /// Includes the `(0, source_input) → (1, j)` edges.
    pub edges: BTreeSet<Edge>,
}

impl PathwayGraph {
    pub fn empty(source_input: usize, layer_count: usize) -> Self {
        Self {
            source_input,
            layer_count,
            nodes: BTreeSet::new(),
            failed: BTreeSet::new(),
            edges: BTreeSet::new(),
        }
    }

    /// Nodes that are not failed sources.
    pub fn activated(&self) -> BTreeSet<Node> {
        self.nodes.difference(&self.failed).copied().collect()
    }

    pub fn layer_width(&self, layer: usize) -> usize {
        self.nodes.range((layer, 0)..(layer + 1, 0)).count()
    }

    /// Checks the structural invariants; returns a description of the first
    /// violation.
    pub fn check(&self) -> core::result::Result<(), String> {
        for &(l, j) in &self.nodes {
            if l == 0 || l > self.layer_count {
                return Err(format!("node ({l}, {j}) outside layers 1..={}", self.layer_count));
            }
        }
        if let Some(f) = self.failed.iter().find(|f| !self.nodes.contains(f)) {
            return Err(format!("failed node {f:?} is not a node"));
        }
        for &(u, v) in &self.edges {
            if v.0 != u.0 + 1 {
                return Err(format!("edge {u:?} -> {v:?} skips layers"));
            }
            if u.0 == 0 && u.1 != self.source_input {
                return Err(format!("edge from input {} but source is {}", u.1, self.source_input));
            }
            if u.0 > 0 && !self.nodes.contains(&u) {
                return Err(format!("edge source {u:?} is not a node"));
            }
            if !self.nodes.contains(&v) {
                return Err(format!("edge target {v:?} is not a node"));
            }
            if self.failed.contains(&u) {
                return Err(format!("failed node {u:?} has an outgoing edge"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PathwayMetrics {
    pub sparsity: f64,
    pub success: f64,
}

/// Seeded subsample of `probe_batch` rows, in ascending row order.
pub fn probe_rows(n: usize, probe_batch: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, streams::SUBSAMPLE));
    idx.truncate(probe_batch);
    idx.sort_unstable();
    idx
}

/// Clean activations of a probe batch and per-neuron activation sds,
/// shared by every trace on the same sample.
#[derive(Clone, Debug)]
pub struct TraceCache {
    pub batch: Matrix,
    pub clean: Vec<Matrix>,
    pub sd: Vec<Vec<f64>>,
}

impl TraceCache {
    pub fn new(net: &MultiTaskNet, sample: &Matrix, config: &TraceConfig) -> Result<Self> {
        config.validate()?;
        if sample.rows() < config.probe_batch {
            return Err(Error::TooFewRows {
                needed: config.probe_batch,
                found: sample.rows(),
            });
        }
        let batch = sample.select_rows(&probe_rows(sample.rows(), config.probe_batch, config.seed));
        let clean = net.trunk_activations(&batch)?;
        let sd = clean
            .iter()
            .map(|h| (0..h.cols()).map(|j| stats::population_sd(&h.column(j))).collect())
            .collect();
        Ok(Self { batch, clean, sd })
    }
}

fn mean_abs_diff(a: &Matrix, b: &Matrix, j: usize) -> f64 {
    let d: Vec<f64> = (0..a.rows()).map(|i| (a.get(i, j) - b.get(i, j)).abs()).collect();
    stats::mean(&d)
}

/// Whether a mean absolute change counts as activation. A neuron with zero
/// sd on the batch (dead) would pass a zero threshold with a zero change,
/// so the change must also be strictly positive.
fn passes(change: f64, sd: f64, tau: f64) -> bool {
    change > 0.0 && change >= tau * sd
}

pub fn trace_input(
    net: &MultiTaskNet,
    sample: &Matrix,
    input_idx: usize,
    config: &TraceConfig,
) -> Result<PathwayGraph> {
    let cache = TraceCache::new(net, sample, config)?;
    trace_cached(net, &cache, input_idx, config)
}

/// Traces on a prepared cache. `config.probe_batch` and `config.seed` are
/// ignored; the cache already fixed the batch.
pub fn trace_cached(
    net: &MultiTaskNet,
    cache: &TraceCache,
    input_idx: usize,
    config: &TraceConfig,
) -> Result<PathwayGraph> {
    config.validate()?;
    if input_idx >= net.input_dim() {
        return Err(Error::IndexOutOfRange {
            what: "input",
            index: input_idx,
            bound: net.input_dim(),
        });
    }
    let depth = net.depth();
    let mut graph = PathwayGraph::empty(input_idx, depth);
    let tau = config.relative_threshold;

    let col = cache.batch.column(input_idx);
    let shift = config.perturbation_sd_multiple * stats::population_sd(&col);
    let mut perturbed_input = cache.batch.clone();
    for i in 0..perturbed_input.rows() {
        let v = perturbed_input.get(i, input_idx);
        perturbed_input.set(i, input_idx, v + shift);
    }
    let perturbed = net.trunk_activations(&perturbed_input)?;

    let mut frontier = Vec::new();
    for j in 0..net.hidden_size() {
        if passes(mean_abs_diff(&perturbed[0], &cache.clean[0], j), cache.sd[0][j], tau) {
            frontier.push(j);
            graph.nodes.insert((1, j));
            graph.edges.insert(((0, input_idx), (1, j)));
        }
    }

    for l in 0..depth - 1 {
        let mut next = BTreeSet::new();
        for &u in &frontier {
            let mut patched = cache.clean[l].clone();
            for i in 0..patched.rows() {
                patched.set(i, u, perturbed[l].get(i, u));
            }
            let out = net.trunk_layer(l + 1, &patched);
            let mut any = false;
            for v in 0..net.hidden_size() {
                if passes(mean_abs_diff(&out, &cache.clean[l + 1], v), cache.sd[l + 1][v], tau) {
                    any = true;
                    next.insert(v);
                    graph.nodes.insert((l + 2, v));
                    graph.edges.insert(((l + 1, u), (l + 2, v)));
                }
            }
            if !any {
                graph.failed.insert((l + 1, u));
            }
        }
        frontier = next.into_iter().collect();
    }
    Ok(graph)
}

/// One graph per input column on a shared cache.
pub fn trace_all_inputs(net: &MultiTaskNet, sample: &Matrix, config: &TraceConfig) -> Result<Vec<PathwayGraph>> {
    let cache = TraceCache::new(net, sample, config)?;
    (0..net.input_dim())
        .map(|i| trace_cached(net, &cache, i, config))
        .collect()
}

pub fn pathway_metrics(graph: &PathwayGraph) -> PathwayMetrics {
    let widths: Vec<usize> = (1..=graph.layer_count)
        .map(|l| graph.layer_width(l))
        .filter(|&w| w > 0)
        .collect();
    let sparsity = if widths.is_empty() {
        0.0
    } else {
        widths.iter().map(|&w| 1.0 / w as f64).sum::<f64>() / widths.len() as f64
    };
    let intermediate: Vec<&Node> = graph.nodes.iter().filter(|n| n.0 < graph.layer_count).collect();
    let success = if intermediate.is_empty() {
        0.0
    } else {
        let failed = intermediate.iter().filter(|n| graph.failed.contains(n)).count();
        1.0 - failed as f64 / intermediate.len() as f64
    };
    PathwayMetrics { sparsity, success }
}

/// Jaccard index of the non-failed trunk nodes; two empty sets give 1.
pub fn jaccard(a: &PathwayGraph, b: &PathwayGraph) -> f64 {
    let (na, nb) = (a.activated(), b.activated());
    let union = na.union(&nb).count();
    if union == 0 {
        return 1.0;
    }
    na.intersection(&nb).count() as f64 / union as f64
}

pub fn overlap_matrix(graphs: &[PathwayGraph]) -> Matrix {
    let n = graphs.len();
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        m.set(i, i, 1.0);
        for j in i + 1..n {
            let v = jaccard(&graphs[i], &graphs[j]);
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    m
}

pub fn node_name(node: Node) -> String {
    format!("L{}N{}", node.0, node.1)
}

const COLOR_ACTIVE: &str = "orange";
const COLOR_OVERLAY: &str = "lightblue";
const COLOR_SHARED: &str = "green";
const COLOR_FAILED: &str = "gray";

/// DOT digraph with one rank per layer. With an overlay, nodes present in
/// both graphs are green, nodes only in the overlay light blue and its own
/// edges dashed.
pub fn export_graph(graph: &PathwayGraph, overlay: Option<&PathwayGraph>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "digraph pathway {{");
    let _ = writeln!(out, "  rankdir=LR;");
    let _ = writeln!(out, "  node [shape=circle, style=filled];");

    let mut inputs = BTreeSet::new();
    inputs.insert(graph.source_input);
    if let Some(o) = overlay {
        inputs.insert(o.source_input);
    }
    for &i in &inputs {
        let _ = writeln!(
            out,
            "  {} [label=\"W{}\", shape=box, fillcolor=white];",
            node_name((0, i)),
            i + 1
        );
    }

    let empty = BTreeSet::new();
    let other = overlay.map_or(&empty, |o| &o.nodes);
    let all: BTreeSet<Node> = graph.nodes.union(other).copied().collect();
    let layers = overlay.map_or(graph.layer_count, |o| o.layer_count.max(graph.layer_count));
    for l in 1..=layers {
        let in_layer: Vec<&Node> = all.range((l, 0)..(l + 1, 0)).collect();
        if in_layer.is_empty() {
            continue;
        }
        let _ = writeln!(out, "  {{ rank=same;");
        for n in in_layer {
            let color = match (graph.nodes.contains(n), other.contains(n)) {
                (true, true) if overlay.is_some() => COLOR_SHARED,
                (true, _) if graph.failed.contains(n) => COLOR_FAILED,
                (true, _) => COLOR_ACTIVE,
                (false, _) if overlay.is_some_and(|o| o.failed.contains(n)) => COLOR_FAILED,
                (false, _) => COLOR_OVERLAY,
            };
            let _ = writeln!(out, "    {} [fillcolor={}];", node_name(*n), color);
        }
        let _ = writeln!(out, "  }}");
    }

    for (u, v) in &graph.edges {
        let _ = writeln!(out, "  {} -> {};", node_name(*u), node_name(*v));
    }
    if let Some(o) = overlay {
        for e in o.edges.difference(&graph.edges) {
            let _ = writeln!(out, "  {} -> {} [style=dashed];", node_name(e.0), node_name(e.1));
        }
    }
    let _ = writeln!(out, "}}");
    out
}
