//! Knowledge graph embedding: the three-tier medical graph, its derived
//! binary adjacency, a single-head graph attention layer, and
//! question-conditioned knowledge retrieval.
//!
//! The graph is stored as nodes only; edges are never serialized. They are
//! derived from organ membership by [`build_adjacency`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{attend, attend_backward, linear_backward, softmax_slice, softmax_backward_slice, AttnCache};
use crate::params::ModelParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Global,
    Organ,
    Finding,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KgNode {
    pub id: usize,
    pub label: String,
    pub kind: NodeKind,
    /// For findings: the id of the organ they belong to.
    #[serde(default)]
    pub organ: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    pub nodes: Vec<KgNode>,
}

impl KnowledgeGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Check the structural invariants: dense unique ids, exactly one
    /// global node, findings referencing existing organs, nonempty labels.
    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Graph("graph has no nodes".into()));
        }
        let n = self.nodes.len();
        let mut seen = vec![false; n];
        let mut globals = 0usize;
        for node in &self.nodes {
            if node.id >= n || seen[node.id] {
                return Err(Error::Graph(format!(
                    "node id {} is not unique and dense in 0..{}",
                    node.id, n
                )));
            }
            seen[node.id] = true;
            if node.label.is_empty() {
                return Err(Error::Graph(format!("node {} has an empty label", node.id)));
            }
            match node.kind {
                NodeKind::Global => globals += 1,
                NodeKind::Organ => {}
                NodeKind::Finding => {
                    let organ = node.organ.ok_or_else(|| {
                        Error::Graph(format!("finding node {} has no organ", node.id))
                    })?;
                    let ok = self
                        .nodes
                        .iter()
                        .any(|m| m.id == organ && m.kind == NodeKind::Organ);
                    if !ok {
                        return Err(Error::Graph(format!(
                            "finding node {} references missing organ {}",
                            node.id, organ
                        )));
                    }
                }
            }
        }
        if globals != 1 {
            return Err(Error::Graph(format!(
                "graph must have exactly one global node, found {globals}"
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: KnowledgeGraph = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }

    pub fn node(&self, id: usize) -> &KgNode {
        self.nodes.iter().find(|n| n.id == id).expect("validated id")
    }
}

/// Symmetric binary adjacency with self-loops.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    n: usize,
    entries: Vec<bool>,
}

impl AdjacencyMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.entries[i * self.n + j]
    }

    fn set_sym(&mut self, i: usize, j: usize) {
        self.entries[i * self.n + j] = true;
        self.entries[j * self.n + i] = true;
    }

    /// Re-apply symmetric closure; a no-op on a valid matrix.
    pub fn symmetric_closure(&self) -> AdjacencyMatrix {
        let mut out = self.clone();
        for i in 0..self.n {
            for j in 0..self.n {
                if self.get(i, j) {
                    out.set_sym(i, j);
                }
            }
        }
        out
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.get(i, j)).collect()
    }
}

/// Derive the adjacency matrix from the organ-membership rules:
/// global-organ, organ-finding, finding-global, plus self-loops
/// everywhere. Findings of one organ meet through their organ hub.
pub fn build_adjacency(graph: &KnowledgeGraph) -> Result<AdjacencyMatrix> {
    graph.validate()?;
    let n = graph.len();
    let mut adj = AdjacencyMatrix {
        n,
        entries: vec![false; n * n],
    };
    let global = graph
        .nodes
        .iter()
        .find(|m| m.kind == NodeKind::Global)
        .expect("validated")
        .id;
    for i in 0..n {
        adj.set_sym(i, i);
    }
    for node in &graph.nodes {
        match node.kind {
            NodeKind::Global => {}
            NodeKind::Organ => adj.set_sym(node.id, global),
            NodeKind::Finding => {
                let organ = node.organ.expect("validated");
                adj.set_sym(node.id, organ);
                adj.set_sym(node.id, global);
            }
        }
    }
    Ok(adj)
}

/// Per-layer cache of a GAT forward pass.
pub struct GatCache {
    /// W f_j for every node.
    pub wf: Tensor,
    /// Softmaxed attention rows over each node's neighbor list.
    pub alpha: Vec<Vec<f64>>,
    /// Raw pre-LeakyReLU scores per neighbor.
    pub raw: Vec<Vec<f64>>,
    pub input: Tensor,
}

pub const LEAKY_SLOPE: f64 = 0.2;

fn leaky(x: f64) -> f64 {
    if x >= 0.0 { x } else { LEAKY_SLOPE * x }
}

fn leaky_grad(x: f64) -> f64 {
    if x >= 0.0 { 1.0 } else { LEAKY_SLOPE }
}

/// Single-head graph attention layer.
///
/// For each node i: alpha_ij = softmax_j LeakyReLU(a^T [W f_i || W f_j])
/// over the neighbor set, output_i = sum_j alpha_ij W f_j.
pub fn gat_forward(
    w: &Tensor,
    a: &Tensor,
    features: &Tensor,
    adj: &AdjacencyMatrix,
) -> Result<(Tensor, GatCache)> {
    let n = adj.n();
    if features.rank() != 2 || features.rows() != n {
        return Err(Error::Shape(format!(
            "gat features {:?} vs {} nodes",
            features.shape(),
            n
        )));
    }
    let d = features.cols();
    assert_eq!(a.len(), 2 * d, "attention vector must have extent 2d");
    let wf = features.matmul(w)?;
    let mut out = Tensor::zeros(&[n, d]);
    let mut alpha = Vec::with_capacity(n);
    let mut raw = Vec::with_capacity(n);
    for i in 0..n {
        let nbrs = adj.neighbors(i);
        if nbrs.is_empty() {
            return Err(Error::Graph(format!("node {i} has no neighbors")));
        }
        let mut scores = Vec::with_capacity(nbrs.len());
        let a_i: f64 = (0..d).map(|c| a.data()[c] * wf.at2(i, c)).sum();
        for &j in &nbrs {
            let a_j: f64 = (0..d).map(|c| a.data()[d + c] * wf.at2(j, c)).sum();
            scores.push(a_i + a_j);
        }
        let act: Vec<f64> = scores.iter().map(|&s| leaky(s)).collect();
        let al = softmax_slice(&act);
        for (&j, &w_ij) in nbrs.iter().zip(&al) {
            for c in 0..d {
                *out.at2_mut(i, c) += w_ij * wf.at2(j, c);
            }
        }
        alpha.push(al);
        raw.push(scores);
    }
    Ok((
        out,
        GatCache {
            wf,
            alpha,
            raw,
            input: features.clone(),
        },
    ))
}

/// Backward through [`gat_forward`]. Accumulates into the `w`/`a` grads and
/// returns the gradient with respect to the input features.
pub fn gat_backward(
    w: &Tensor,
    a: &Tensor,
    adj: &AdjacencyMatrix,
    cache: &GatCache,
    dy: &Tensor,
    dw: &mut Tensor,
    da: &mut Tensor,
) -> Tensor {
    let n = adj.n();
    let d = cache.input.cols();
    let mut dwf = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let nbrs = adj.neighbors(i);
        let al = &cache.alpha[i];
        // dy through the weighted sum: out_i = sum_j alpha_ij wf_j
        let mut dalpha = vec![0.0; nbrs.len()];
        for (idx, &j) in nbrs.iter().enumerate() {
            for c in 0..d {
                dwf.data_mut()[j * d + c] += al[idx] * dy.at2(i, c);
                dalpha[idx] += dy.at2(i, c) * cache.wf.at2(j, c);
            }
        }
        let dact = softmax_backward_slice(al, &dalpha);
        for (idx, &j) in nbrs.iter().enumerate() {
            let dscore = dact[idx] * leaky_grad(cache.raw[i][idx]);
            // score = sum_c a[c] wf_i[c] + sum_c a[d+c] wf_j[c]
            for c in 0..d {
                da.data_mut()[c] += dscore * cache.wf.at2(i, c);
                da.data_mut()[d + c] += dscore * cache.wf.at2(j, c);
                dwf.data_mut()[i * d + c] += dscore * a.data()[c];
                dwf.data_mut()[j * d + c] += dscore * a.data()[d + c];
            }
        }
    }
    // wf = input W
    let dinput = dwf.matmul(&w.transpose2()).unwrap();
    dw.add_assign(&cache.input.transpose2().matmul(&dwf).unwrap());
    dinput
}

/// Cache for [`knowledge_retrieve`].
pub struct RetrieveCache {
    pub q: Vec<Tensor>,
    pub k: Tensor,
    pub v: Tensor,
    pub attn: Vec<AttnCache>,
    pub text: Vec<Tensor>,
    pub fg: Tensor,
}

/// Cross-attention with the question text as queries and the aggregated
/// graph features as keys/values:
/// k' = softmax((t Wq)(f_g Wk)^T / sqrt(d)) (f_g Wv), per batch element.
/// Each text position retrieves a mixture of node embeddings, so unseen
/// mentions pull in whatever the graph links them to.
pub fn knowledge_retrieve(
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    fg: &Tensor,
    text: &Tensor,
) -> Result<(Tensor, RetrieveCache)> {
    if fg.rank() != 2 || text.rank() != 3 || fg.cols() != text.shape()[2] {
        return Err(Error::Shape(format!(
            "knowledge_retrieve f_g {:?} vs text {:?}",
            fg.shape(),
            text.shape()
        )));
    }
    let b = text.shape()[0];
    let l = text.shape()[1];
    let k = fg.matmul(wk)?;
    let v = fg.matmul(wv)?;
    let mut out = Tensor::zeros(&[b, l, fg.cols()]);
    let mut qs = Vec::new();
    let mut attns = Vec::new();
    let mut texts = Vec::new();
    for i in 0..b {
        let t = text.batch(i);
        let q = t.matmul(wq)?;
        let (o, cache) = attend(&q, &k, &v, false);
        out.set_batch(i, &o);
        qs.push(q);
        attns.push(cache);
        texts.push(t);
    }
    Ok((
        out,
        RetrieveCache {
            q: qs,
            k,
            v,
            attn: attns,
            text: texts,
            fg: fg.clone(),
        },
    ))
}

/// Backward through [`knowledge_retrieve`]. Accumulates projection grads
/// and returns (d_fg, d_text).
#[allow(clippy::too_many_arguments)]
pub fn knowledge_retrieve_backward(
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    cache: &RetrieveCache,
    dy: &Tensor,
    dwq: &mut Tensor,
    dwk: &mut Tensor,
    dwv: &mut Tensor,
) -> (Tensor, Tensor) {
    let b = dy.shape()[0];
    let mut dtext = Tensor::zeros(&[b, cache.text[0].rows(), cache.text[0].cols()]);
    let mut dk_total = Tensor::zeros(cache.k.shape());
    let mut dv_total = Tensor::zeros(cache.v.shape());
    for i in 0..b {
        let dyb = dy.batch(i);
        let (dq, dk, dv) =
            attend_backward(&cache.q[i], &cache.k, &cache.v, &cache.attn[i], &dyb);
        dk_total.add_assign(&dk);
        dv_total.add_assign(&dv);
        let (dt, dwq_i, _) = linear_backward(&cache.text[i], wq, &dq);
        dwq.add_assign(&dwq_i);
        dtext.set_batch(i, &dt);
    }
    let (dfg_k, dwk_i, _) = linear_backward(&cache.fg, wk, &dk_total);
    let (dfg_v, dwv_i, _) = linear_backward(&cache.fg, wv, &dv_total);
    dwk.add_assign(&dwk_i);
    dwv.add_assign(&dwv_i);
    let mut dfg = dfg_k;
    dfg.add_assign(&dfg_v);
    (dfg, dtext)
}

/// Initial scale of the retrieval key projection.
pub const RETRIEVE_KEY_GAIN: f64 = 12.0;

/// Parameter keys for the knowledge module, all under the `kge.` prefix.
pub fn init_params(params: &mut ModelParams, d: usize, gat_layers: usize) {
    for l in 0..gat_layers {
        params.insert(&format!("kge.gat{l}.w"), Tensor::eye(d));
        params.insert(&format!("kge.gat{l}.a"), Tensor::zeros(&[2 * d]));
    }
    params.insert("kge.retr.wq", Tensor::eye(d));
    // Scaled-identity keys sharpen the text-to-node match at init: node
    // features and question tokens share an embedding table, and the
    // softmax runs over every node, so unit-scale scores would start
    // nearly uniform.
    params.insert("kge.retr.wk", Tensor::eye(d).scale(RETRIEVE_KEY_GAIN));
    params.insert("kge.retr.wv", Tensor::eye(d));
    params.insert("kge.norm.gain", Tensor::full(&[d], 1.0));
    params.insert("kge.norm.bias", Tensor::zeros(&[d]));
}

/// Run the configured GAT stack over the node features.
pub fn gat_stack_forward(
    params: &ModelParams,
    gat_layers: usize,
    features: &Tensor,
    adj: &AdjacencyMatrix,
) -> Result<(Tensor, Vec<GatCache>)> {
    let mut x = features.clone();
    let mut caches = Vec::new();
    for l in 0..gat_layers {
        let (y, cache) = gat_forward(
            params.get(&format!("kge.gat{l}.w")),
            params.get(&format!("kge.gat{l}.a")),
            &x,
            adj,
        )?;
        caches.push(cache);
        x = y;
    }
    Ok((x, caches))
}

pub fn gat_stack_backward(
    params: &mut ModelParams,
    gat_layers: usize,
    adj: &AdjacencyMatrix,
    caches: &[GatCache],
    dy: &Tensor,
) -> Tensor {
    let mut grad = dy.clone();
    for l in (0..gat_layers).rev() {
        let w = params.get(&format!("kge.gat{l}.w")).clone();
        let a = params.get(&format!("kge.gat{l}.a")).clone();
        let mut dw = Tensor::zeros(w.shape());
        let mut da = Tensor::zeros(a.shape());
        grad = gat_backward(&w, &a, adj, &caches[l], &grad, &mut dw, &mut da);
        params.accumulate(&format!("kge.gat{l}.w"), &dw);
        params.accumulate(&format!("kge.gat{l}.a"), &da);
    }
    grad
}
