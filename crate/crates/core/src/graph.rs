//! Dynamic task-similarity graph over the round's sampled clients, built
//! from classification-head responses and feature-anchor cosine similarity.

use std::io::Write;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::model::{ClientId, DenseLayer, FeatureAnchorSet};

/// Trade-off between head-response similarity and anchor similarity.
#[derive(Debug, Clone, Copy)]
pub struct GraphConfig {
    /// α in [0, 1]; weight on head similarity.
    pub alpha: f64,
}

impl GraphConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(Self { alpha })
    }
}

/// Symmetric non-negative weighted graph over sampled clients.
///
/// `build_graph` produces a zero diagonal; `community::coarsen` reuses this
/// type with self-loop entries on the diagonal (a self-loop value counts
/// once in its node's degree and half in the total weight, which keeps
/// degrees and total weight conserved across coarsening).
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    pub nodes: Vec<ClientId>,
    /// Shape (n, n); `adjacency[[i, j]]` is the weight between nodes i and j.
    pub adjacency: Array2<f64>,
    /// δ_k: full row sums (diagonal included once).
    pub degrees: Vec<f64>,
    /// M = ½ Σ_{k,ℓ} a_kℓ.
    pub total_weight: f64,
}

impl SimilarityGraph {
    /// Graph from an explicit adjacency matrix; degrees and M are derived.
    pub fn from_adjacency(nodes: Vec<ClientId>, adjacency: Array2<f64>) -> Result<Self> {
        let n = nodes.len();
        if adjacency.dim() != (n, n) {
            return Err(Error::Config(format!(
                "adjacency shape {:?} does not match {n} nodes",
                adjacency.dim()
            )));
        }
        for i in 0..n {
            for j in 0..n {
                let w = adjacency[[i, j]];
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::Config(format!(
                        "edge weight ({i},{j}) = {w} must be finite and non-negative"
                    )));
                }
                if (w - adjacency[[j, i]]).abs() != 0.0 {
                    return Err(Error::Config(format!(
                        "adjacency not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        let degrees: Vec<f64> = (0..n).map(|i| adjacency.row(i).sum()).collect();
        let total_weight = degrees.iter().sum::<f64>() / 2.0;
        Ok(Self {
            nodes,
            adjacency,
            degrees,
            total_weight,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Recompute degrees and M from the adjacency (consistency check).
    pub fn recompute_sums(&self) -> (Vec<f64>, f64) {
        let n = self.node_count();
        let degrees: Vec<f64> = (0..n).map(|i| self.adjacency.row(i).sum()).collect();
        let total = degrees.iter().sum::<f64>() / 2.0;
        (degrees, total)
    }

    /// Index of a client id within `nodes`.
    pub fn index_of(&self, id: ClientId) -> Option<usize> {
        self.nodes.iter().position(|&k| k == id)
    }

    /// Write nonzero edges as `round,src,dst,weight` CSV rows, weights at 9
    /// significant digits. Callers emit the header.
    pub fn write_edge_list<W: Write>(&self, round: usize, out: &mut W) -> Result<()> {
        let n = self.node_count();
        for i in 0..n {
            for j in (i + 1)..n {
                let w = self.adjacency[[i, j]];
                if w > 0.0 {
                    writeln!(out, "{round},{},{},{:.8e}", self.nodes[i], self.nodes[j], w)?;
                }
            }
        }
        Ok(())
    }
}

/// Parse an edge-list CSV into a graph. Rows are `src,dst,weight` or
/// `round,src,dst,weight` (the round column is ignored); one header line is
/// tolerated. Duplicate pairs accumulate; `src == dst` becomes a self-loop.
pub fn read_edge_list_csv(path: &std::path::Path) -> Result<SimilarityGraph> {
    let text = std::fs::read_to_string(path)?;
    let mut edges: Vec<(ClientId, ClientId, f64)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let (src, dst, w) = match fields.len() {
            3 => (fields[0], fields[1], fields[2]),
            4 => (fields[1], fields[2], fields[3]),
            n => {
                return Err(Error::Format(format!(
                    "{}:{}: expected 3 or 4 fields, found {n}",
                    path.display(),
                    lineno + 1
                )))
            }
        };
        let parsed = (src.parse::<usize>(), dst.parse::<usize>(), w.parse::<f64>());
        match parsed {
            (Ok(s), Ok(d), Ok(w)) => {
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::Format(format!(
                        "{}:{}: weight {w} must be finite and non-negative",
                        path.display(),
                        lineno + 1
                    )));
                }
                edges.push((s, d, w));
            }
            _ if lineno == 0 => continue, // header
            _ => {
                return Err(Error::Format(format!(
                    "{}:{}: cannot parse '{line}'",
                    path.display(),
                    lineno + 1
                )))
            }
        }
    }
    let mut nodes: Vec<ClientId> = edges
        .iter()
        .flat_map(|&(s, d, _)| [s, d])
        .collect();
    nodes.sort_unstable();
    nodes.dedup();
    let index: std::collections::BTreeMap<ClientId, usize> =
        nodes.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let n = nodes.len();
    let mut adjacency = Array2::zeros((n, n));
    for (s, d, w) in edges {
        let (i, j) = (index[&s], index[&d]);
        if i == j {
            adjacency[[i, i]] += w;
        } else {
            adjacency[[i, j]] += w;
            adjacency[[j, i]] += w;
        }
    }
    SimilarityGraph::from_adjacency(nodes, adjacency)
}

/// Cosine similarity; vectors with norm below 1e-12 are treated as
/// uninformative and yield 0.
pub fn cos_sim(u: &Array1<f64>, v: &Array1<f64>) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    let nu = u.dot(u).sqrt();
    let nv = v.dot(v).sqrt();
    if nu < 1e-12 || nv < 1e-12 {
        return 0.0;
    }
    u.dot(v) / (nu * nv)
}

/// Mean anchor cosine over the classes both clients own; 0 when they share
/// no class.
pub fn sim_repr(anchors_k: &FeatureAnchorSet, anchors_l: &FeatureAnchorSet) -> f64 {
    let mut total = 0.0;
    let mut shared = 0usize;
    for (class, hk) in anchors_k.iter() {
        if let Some(hl) = anchors_l.get(class) {
            total += cos_sim(hk, hl);
            shared += 1;
        }
    }
    if shared == 0 {
        0.0
    } else {
        total / shared as f64
    }
}

/// How similarly two heads respond to the anchors of both clients, averaged
/// over shared classes: for each shared class c,
/// ½ [cos(φ_k(h_k^c), φ_ℓ(h_k^c)) + cos(φ_k(h_ℓ^c), φ_ℓ(h_ℓ^c))].
pub fn sim_head(
    head_k: &DenseLayer,
    head_l: &DenseLayer,
    anchors_k: &FeatureAnchorSet,
    anchors_l: &FeatureAnchorSet,
) -> Result<f64> {
    if head_k.weights.dim() != head_l.weights.dim() {
        return Err(Error::Config(format!(
            "head shapes differ: {:?} vs {:?}",
            head_k.weights.dim(),
            head_l.weights.dim()
        )));
    }
    let mut total = 0.0;
    let mut shared = 0usize;
    for (class, hk) in anchors_k.iter() {
        if let Some(hl) = anchors_l.get(class) {
            let on_hk = cos_sim(&head_k.respond(hk), &head_l.respond(hk));
            let on_hl = cos_sim(&head_k.respond(hl), &head_l.respond(hl));
            total += 0.5 * (on_hk + on_hl);
            shared += 1;
        }
    }
    Ok(if shared == 0 { 0.0 } else { total / shared as f64 })
}

/// α · s_head + (1−α) · s_repr, clamped at zero.
pub fn edge_weight(config: &GraphConfig, s_head: f64, s_repr: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&config.alpha) {
        return Err(Error::Config(format!("alpha {} outside [0, 1]", config.alpha)));
    }
    Ok((config.alpha * s_head + (1.0 - config.alpha) * s_repr).max(0.0))
}

/// Build the round's similarity graph over the sampled clients.
///
/// Fewer than two clients yields a valid zero-edge graph (the community
/// step then returns singletons).
pub fn build_graph(
    clients: &[(ClientId, &DenseLayer, &FeatureAnchorSet)],
    config: &GraphConfig,
) -> Result<SimilarityGraph> {
    let n = clients.len();
    let mut adjacency = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let (_, head_i, anchors_i) = clients[i];
            let (_, head_j, anchors_j) = clients[j];
            let s_head = sim_head(head_i, head_j, anchors_i, anchors_j)?;
            let s_repr = sim_repr(anchors_i, anchors_j);
            let w = edge_weight(config, s_head, s_repr)?;
            adjacency[[i, j]] = w;
            adjacency[[j, i]] = w;
        }
    }
    SimilarityGraph::from_adjacency(clients.iter().map(|c| c.0).collect(), adjacency)
}
