//! Binary MRF energy over the surface graph and its exact minimization by
//! max-flow/min-cut.
//!
//! Energy of a labeling `l`:
//!
//! ```text
//! E(l) = sum_i t[l_i](i) + lambda * sum_{(u,v)} w_uv * [l_u != l_v]
//! ```
//!
//! The boundary term is the standard Potts penalty: cutting an edge with
//! high learned similarity is expensive. All weights are non-negative, so
//! every pairwise term is submodular and the s/t min cut is the exact
//! global minimizer.
//!
//! Flow network convention: `source -> i` carries `t0(i)` and `i -> sink`
//! carries `t1(i)`; neighbor arcs carry `lambda * w` both ways. A node
//! reachable from the source in the residual graph takes label 1, so the
//! cut pays `t0` across `source -> i` exactly when `l_i = 0`, pays `t1`
//! across `i -> sink` exactly when `l_i = 1`, and pays `lambda * w` across
//! cut neighbor arcs; the max-flow value therefore equals the energy of
//! the returned labeling with no constant offset. Nodes with both t-links
//! saturated at lambda = 0 end up unreachable, which breaks ties toward
//! label 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flatmap::FlatMap;
use crate::neural::{predict_nlink, predict_tlink, NlinkNet, TlinkNet};
use crate::patches::{extract_patch, local_frame, PatchSize};
use crate::surface::SurfaceMesh;
use crate::volio::Volume3D;

/// Clamp for -ln(p): keeps t-link weights bounded so lambda stays
/// meaningful against the boundary term.
pub const PROB_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegGraph {
    pub n_nodes: usize,
    /// Cost of assigning label 0 per node.
    pub t0: Vec<f64>,
    /// Cost of assigning label 1 per node.
    pub t1: Vec<f64>,
    /// Undirected weighted edges (u, v, w), u != v, no duplicates.
    pub edges: Vec<(usize, usize, f64)>,
    pub lambda: f64,
}

pub type Labeling = Vec<u8>;

impl SegGraph {
    pub fn new(
        t0: Vec<f64>,
        t1: Vec<f64>,
        edges: Vec<(usize, usize, f64)>,
        lambda: f64,
    ) -> Result<Self> {
        if t0.len() != t1.len() {
            return Err(Error::Dimension(format!(
                "t0 has {} entries, t1 has {}",
                t0.len(),
                t1.len()
            )));
        }
        let n_nodes = t0.len();
        let check_weight = |w: f64, what: &str| -> Result<()> {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Input(format!("{what} weight {w} must be >= 0")));
            }
            Ok(())
        };
        for &w in t0.iter().chain(t1.iter()) {
            check_weight(w, "t-link")?;
        }
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::Input(format!("lambda {lambda} must be >= 0")));
        }
        let mut seen = std::collections::HashSet::new();
        for &(u, v, w) in &edges {
            if u == v {
                return Err(Error::Input(format!("self loop at node {u}")));
            }
            if u >= n_nodes || v >= n_nodes {
                return Err(Error::Input(format!(
                    "edge ({u},{v}) out of range for {n_nodes} nodes"
                )));
            }
            check_weight(w, "n-link")?;
            if !seen.insert((u.min(v), u.max(v))) {
                return Err(Error::Input(format!("duplicate edge ({u},{v})")));
            }
        }
        Ok(Self {
            n_nodes,
            t0,
            t1,
            edges,
            lambda,
        })
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        SegGraph::new(self.t0.clone(), self.t1.clone(), self.edges.clone(), lambda)
    }
}

/// Evaluates the MRF energy of a labeling.
pub fn energy(g: &SegGraph, labeling: &[u8]) -> Result<f64> {
    if labeling.len() != g.n_nodes {
        return Err(Error::Dimension(format!(
            "labeling has {} entries for {} nodes",
            labeling.len(),
            g.n_nodes
        )));
    }
    let mut e = 0.0;
    for i in 0..g.n_nodes {
        e += if labeling[i] == 0 { g.t0[i] } else { g.t1[i] };
    }
    let mut cut = 0.0;
    for &(u, v, w) in &g.edges {
        if labeling[u] != labeling[v] {
            cut += w;
        }
    }
    Ok(e + g.lambda * cut)
}

/// Cut-edge weight sum and count for a labeling.
pub fn cut_stats(g: &SegGraph, labeling: &[u8]) -> (f64, usize) {
    let mut weight = 0.0;
    let mut count = 0;
    for &(u, v, w) in &g.edges {
        if labeling[u] != labeling[v] {
            weight += w;
            count += 1;
        }
    }
    (weight, count)
}

const RESIDUAL_EPS: f64 = 1e-12;

struct FlowNetwork {
    to: Vec<usize>,
    cap: Vec<f64>,
    adj: Vec<Vec<usize>>,
}

impl FlowNetwork {
    fn new(n: usize) -> Self {
        Self {
            to: Vec::new(),
            cap: Vec::new(),
            adj: vec![Vec::new(); n],
        }
    }

    /// Adds the arc pair (u->v cap_fwd, v->u cap_rev); reverse of arc `a`
    /// is `a ^ 1`.
    fn add_arc(&mut self, u: usize, v: usize, cap_fwd: f64, cap_rev: f64) {
        self.adj[u].push(self.to.len());
        self.to.push(v);
        self.cap.push(cap_fwd);
        self.adj[v].push(self.to.len());
        self.to.push(u);
        self.cap.push(cap_rev);
    }

    fn bfs_levels(&self, s: usize, t: usize) -> Option<Vec<i32>> {
        let mut level = vec![-1i32; self.adj.len()];
        let mut queue = std::collections::VecDeque::new();
        level[s] = 0;
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            for &a in &self.adj[u] {
                let v = self.to[a];
                if level[v] < 0 && self.cap[a] > RESIDUAL_EPS {
                    level[v] = level[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        (level[t] >= 0).then_some(level)
    }

    fn dfs_push(
        &mut self,
        u: usize,
        t: usize,
        pushed: f64,
        level: &[i32],
        iter: &mut [usize],
    ) -> f64 {
        if u == t {
            return pushed;
        }
        while iter[u] < self.adj[u].len() {
            let a = self.adj[u][iter[u]];
            let v = self.to[a];
            if level[v] == level[u] + 1 && self.cap[a] > RESIDUAL_EPS {
                let d = self.dfs_push(v, t, pushed.min(self.cap[a]), level, iter);
                if d > 0.0 {
                    self.cap[a] -= d;
                    self.cap[a ^ 1] += d;
                    return d;
                }
            }
            iter[u] += 1;
        }
        0.0
    }

    /// Dinic max flow.
    fn max_flow(&mut self, s: usize, t: usize) -> f64 {
        let mut flow = 0.0;
        while let Some(level) = self.bfs_levels(s, t) {
            let mut iter = vec![0usize; self.adj.len()];
            loop {
                let pushed = self.dfs_push(s, t, f64::INFINITY, &level, &mut iter);
                if pushed <= 0.0 {
                    break;
                }
                flow += pushed;
            }
        }
        flow
    }

    fn reachable_from(&self, s: usize) -> Vec<bool> {
        let mut seen = vec![false; self.adj.len()];
        let mut stack = vec![s];
        seen[s] = true;
        while let Some(u) = stack.pop() {
            for &a in &self.adj[u] {
                let v = self.to[a];
                if !seen[v] && self.cap[a] > RESIDUAL_EPS {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen
    }
}

/// Exact global minimizer of the energy via max-flow. Returns the labeling
/// and the flow value, which equals the labeling's energy.
pub fn min_cut(g: &SegGraph) -> Result<(Labeling, f64)> {
    // re-validate: negative weights break submodularity
    let checked = SegGraph::new(g.t0.clone(), g.t1.clone(), g.edges.clone(), g.lambda)?;
    let n = checked.n_nodes;
    let (s, t) = (n, n + 1);
    let mut net = FlowNetwork::new(n + 2);
    for i in 0..n {
        net.add_arc(s, i, checked.t0[i], 0.0);
        net.add_arc(i, t, checked.t1[i], 0.0);
    }
    for &(u, v, w) in &checked.edges {
        let c = checked.lambda * w;
        net.add_arc(u, v, c, c);
    }
    let flow = net.max_flow(s, t);
    let reach = net.reachable_from(s);
    let labeling: Labeling = (0..n).map(|i| if reach[i] { 1 } else { 0 }).collect();
    Ok((labeling, flow))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub unary: f64,
    pub boundary: f64,
    pub lambda: f64,
    pub total: f64,
    pub cut_edges: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphConfig {
    pub lambda: f64,
    pub size: PatchSize,
    pub step_mm: [f64; 3],
}

impl GraphConfig {
    pub fn default_for(vol: &Volume3D) -> Self {
        let min_spacing = vol
            .spacing_mm
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        Self {
            lambda: 0.6,
            size: [9, 9, 13],
            step_mm: [vol.spacing_mm[0], vol.spacing_mm[1], min_spacing],
        }
    }
}

/// Assembles the graph from learned potentials: per node the negative log
/// class probabilities of the unshifted patch, per mesh edge the predicted
/// similarity on the patch pair and 3D edge length.
pub fn build_seg_graph(
    mesh: &SurfaceMesh,
    _map: &FlatMap,
    vol: &Volume3D,
    tnet: &TlinkNet,
    nnet: &NlinkNet,
    cfg: &GraphConfig,
) -> Result<SegGraph> {
    let patch_len = cfg.size[0] * cfg.size[1] * cfg.size[2];
    if patch_len != tnet.mlp.input_dim() {
        return Err(Error::Dimension(format!(
            "patch geometry {:?} ({patch_len} samples) does not match t-link input {}",
            cfg.size,
            tnet.mlp.input_dim()
        )));
    }
    if patch_len != nnet.encoder.input_dim() {
        return Err(Error::Dimension(format!(
            "patch geometry {:?} ({patch_len} samples) does not match n-link input {}",
            cfg.size,
            nnet.encoder.input_dim()
        )));
    }
    if mesh.normals.len() != mesh.n_vertices() {
        return Err(Error::Input("mesh normals missing".into()));
    }

    let node_patch = |v: usize| {
        let frame = local_frame(mesh, v).expect("normals checked");
        extract_patch(vol, &frame, cfg.size, cfg.step_mm, 0.0, v).expect("validated geometry")
    };

    let tlinks = crate::par::map_indexed(mesh.n_vertices(), |v| {
        let patch = node_patch(v);
        let (p0, p1) = predict_tlink(tnet, &patch).expect("dims checked");
        (-(p0.max(PROB_EPSILON)).ln(), -(p1.max(PROB_EPSILON)).ln())
    });
    let edges = crate::par::map_indexed(mesh.edges.len(), |e| {
        let (u, v, len) = mesh.edges[e];
        let w = predict_nlink(nnet, &node_patch(u), &node_patch(v), len).expect("dims checked");
        (u, v, w)
    });

    let (t0, t1) = tlinks.into_iter().unzip();
    SegGraph::new(t0, t1, edges, cfg.lambda)
}

/// Full per-volume segmentation output.
#[derive(Debug, Clone)]
pub struct SegmentOutput {
    pub mesh: SurfaceMesh,
    pub map: FlatMap,
    pub graph: SegGraph,
    pub labels: Labeling,
    pub flow: f64,
    pub energy: EnergyBreakdown,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub graph: GraphConfig,
    /// Label of the cavity in the input label volume.
    pub cavity_label: u8,
    /// Seed for the flat-map default-seed draw.
    pub rng_seed: u64,
}

impl SegmentConfig {
    pub fn default_for(vol: &Volume3D, rng_seed: u64) -> Self {
        Self {
            graph: GraphConfig::default_for(vol),
            cavity_label: 1,
            rng_seed,
        }
    }
}

/// Runs surface -> flat map -> patches -> graph -> min cut on one volume.
pub fn segment(
    vol: &Volume3D,
    lab: &crate::volio::LabelVolume,
    tnet: &TlinkNet,
    nnet: &NlinkNet,
    cfg: &SegmentConfig,
) -> Result<SegmentOutput> {
    let mesh = crate::surface::extract_surface(lab, cfg.cavity_label)?;
    let seed = crate::flatmap::default_seed(&mesh, cfg.rng_seed)?;
    let map = crate::flatmap::equidistant_project(&mesh, seed)?;
    let graph = build_seg_graph(&mesh, &map, vol, tnet, nnet, &cfg.graph)?;
    let (labels, flow) = min_cut(&graph)?;
    let unary: f64 = (0..graph.n_nodes)
        .map(|i| if labels[i] == 0 { graph.t0[i] } else { graph.t1[i] })
        .sum();
    let (cut_weight, cut_edges) = cut_stats(&graph, &labels);
    let breakdown = EnergyBreakdown {
        unary,
        boundary: cut_weight,
        lambda: graph.lambda,
        total: unary + graph.lambda * cut_weight,
        cut_edges,
    };
    Ok(SegmentOutput {
        mesh,
        map,
        graph,
        labels,
        flow,
        energy: breakdown,
    })
}

/// On-disk record shared by the graph-cut and baseline segmenters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegReport {
    pub method: String,
    pub labels: Vec<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t0: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t1: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub energy: Option<EnergyBreakdown>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flow: Option<f64>,
    /// Baseline per-node feature values, when applicable.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub node_values: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

impl SegReport {
    pub fn from_output(out: &SegmentOutput) -> Self {
        Self {
            method: "learngc".into(),
            labels: out.labels.clone(),
            lambda: Some(out.graph.lambda),
            t0: Some(out.graph.t0.clone()),
            t1: Some(out.graph.t1.clone()),
            energy: Some(out.energy.clone()),
            flow: Some(out.flow),
            node_values: None,
            threshold: None,
        }
    }
}

pub fn save_seg_report(report: &SegReport, path: impl AsRef<std::path::Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_vec_pretty(report).expect("report serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_seg_report(path: impl AsRef<std::path::Path>) -> Result<SegReport> {
    let path = path.as_ref();
    let text = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_slice(&text)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use rand::Rng;

    /// Exhaustive minimizer over all 2^n labelings; the independent oracle
    /// for min_cut.
    pub fn brute_force_min(g: &SegGraph) -> (Labeling, f64) {
        assert!(g.n_nodes <= 20, "brute force limited to small graphs");
        let mut best = (Vec::new(), f64::INFINITY);
        for mask in 0u32..(1 << g.n_nodes) {
            let labeling: Labeling = (0..g.n_nodes).map(|i| ((mask >> i) & 1) as u8).collect();
            let e = energy(g, &labeling).unwrap();
            if e < best.1 {
                best = (labeling, e);
            }
        }
        best
    }

    pub fn random_graph(n: usize, density: f64, lambda: f64, seed: u64) -> SegGraph {
        let mut r = crate::rng::rng_from(seed);
        let t0: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..10.0)).collect();
        let t1: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..10.0)).collect();
        let mut edges = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                if r.gen_bool(density) {
                    edges.push((u, v, r.gen_range(0.0..10.0)));
                }
            }
        }
        SegGraph::new(t0, t1, edges, lambda).unwrap()
    }
}
