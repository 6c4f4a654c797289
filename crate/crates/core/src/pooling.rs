//! Top-K graph pooling: score nodes with a learnable vector p, keep the K
//! best, gate their features with σ(score), and induce the subgraph
//! adjacency. Selection itself carries no gradient — p stays trainable only
//! through the sigmoid gate, the standard top-K pooling contract.

use crate::error::{PgeError, Result};
use crate::gnn::TagConvLayer;
use crate::graph::normalize_adjacency;
use crate::params::{uniform_init, Bound, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, TensorId};
use rand::Rng;
use std::rc::Rc;

/// One pooling level: its learnable vector p, keep fraction, and the TAGCN
/// weights W_{p,l} applied on the pooled graph.
pub struct PoolingLayer {
    pub pool_vector: ParamId,
    pub keep_ratio: f64,
    pub pooled_conv: TagConvLayer,
}

impl PoolingLayer {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        keep_ratio: f64,
        hops: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let scale = (1.0 / dim as f64).sqrt();
        Self {
            pool_vector: store.register(
                &format!("{name}.p"),
                uniform_init(rng, &[dim], scale),
                ParamGroup::Pool,
                true,
            ),
            keep_ratio,
            pooled_conv: TagConvLayer::init(
                store,
                &format!("{name}.conv"),
                ParamGroup::PooledGnn,
                dim,
                dim,
                hops,
                rng,
            ),
        }
    }

    /// K = round(keep_ratio · N).
    pub fn k_for(&self, n: usize) -> usize {
        (self.keep_ratio * n as f64).round() as usize
    }
}

/// The focused subgraph: selected nodes, raw scores, induced adjacency, and
/// σ(S)-gated features for both branches.
pub struct PooledGraph {
    /// Indices of the K kept nodes, descending score order.
    pub selected: Vec<usize>,
    /// Raw scores `S[N]` on the tape (input branch).
    pub scores: TensorId,
    /// Induced binary `[K, K]` submatrix of A.
    pub adjacency_p: Rc<Tensor>,
    /// Normalization of `adjacency_p`, recomputed from its own degrees.
    pub norm_adjacency_p: Rc<Tensor>,
    /// `norm_adjacency_p` as a tape constant.
    pub norm_id: TensorId,
    /// Rows of σ(S)⊙Z restricted to `selected`.
    pub gated_input_nodes: TensorId,
    /// Rows of σ(S)⊙V restricted to `selected`.
    pub gated_output_nodes: TensorId,
}

/// s_i = pᵀ z_i as a traced `[N]` vector. With `normalize`, p is replaced by
/// p/‖p‖ (differentiably) before the products — the original top-K pooling
/// convention; the default keeps the raw dot product.
pub fn score_nodes(
    tape: &mut Tape,
    bound: &Bound,
    pool_vector: ParamId,
    z: TensorId,
    normalize: bool,
) -> Result<TensorId> {
    let d = tape.value(z).shape()[1];
    let p_len = tape.value(bound.id(pool_vector)).len();
    if p_len != d {
        return Err(PgeError::Shape(format!(
            "score_nodes needs p[{d}] to match node width, got p[{p_len}]"
        )));
    }
    let n = tape.value(z).shape()[0];
    let mut p_col = tape.reshape(bound.id(pool_vector), vec![1, d])?;
    if normalize {
        p_col = tape.l2_normalize_rows(p_col)?;
    }
    let p_col = tape.transpose(p_col)?; // [d, 1]
    let scores = tape.matmul(z, p_col)?;
    tape.reshape(scores, vec![n])
}

/// Indices of the K largest scores; ties broken toward the lower index.
/// Pure value-level computation — no gradient, by contract.
pub fn top_k_select(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(PgeError::Capacity(format!(
            "cannot select top {k} of {} scores",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort on descending score leaves equal scores in index order.
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    order.truncate(k);
    Ok(order)
}

/// Pool one graph pair: scores come from Z only; the same selection and the
/// same σ(S) gate apply to both branches; the induced adjacency gets its
/// normalization recomputed.
pub fn pool_graph_pair(
    tape: &mut Tape,
    bound: &Bound,
    layer: &PoolingLayer,
    adjacency: &Tensor,
    z: TensorId,
    v: TensorId,
    normalize_scores: bool,
) -> Result<PooledGraph> {
    if tape.value(z).shape() != tape.value(v).shape() {
        return Err(PgeError::Contract(format!(
            "pool_graph_pair needs Z and V of equal shape, got {:?} vs {:?}",
            tape.value(z).shape(),
            tape.value(v).shape()
        )));
    }
    let n = tape.value(z).shape()[0];
    if adjacency.shape() != [n, n] {
        return Err(PgeError::Shape(format!(
            "adjacency {:?} does not match {n} nodes",
            adjacency.shape()
        )));
    }
    let k = layer.k_for(n);
    if k < 2 {
        return Err(PgeError::Contract(format!(
            "keep_ratio {} keeps {k} < 2 of {n} nodes; a contrastive loss needs a negative",
            layer.keep_ratio
        )));
    }
    let scores = score_nodes(tape, bound, layer.pool_vector, z, normalize_scores)?;
    let selected = top_k_select(tape.value(scores).data(), k)?;
    let sel = Rc::new(selected.clone());

    let gate = tape.sigmoid(scores);
    let gate_col = tape.reshape(gate, vec![n, 1])?;
    let gate_sel = tape.gather_rows(gate_col, Rc::clone(&sel))?;
    let z_sel = tape.gather_rows(z, Rc::clone(&sel))?;
    let v_sel = tape.gather_rows(v, Rc::clone(&sel))?;
    let gated_input_nodes = tape.scale_rows(z_sel, gate_sel)?;
    let gated_output_nodes = tape.scale_rows(v_sel, gate_sel)?;

    let mut sub = vec![0.0; k * k];
    for (i, &si) in selected.iter().enumerate() {
        for (j, &sj) in selected.iter().enumerate() {
            sub[i * k + j] = adjacency.at2(si, sj);
        }
    }
    let adjacency_p = Rc::new(Tensor::new(vec![k, k], sub)?);
    let norm_adjacency_p = Rc::new(normalize_adjacency(&adjacency_p)?);
    let norm_id = tape.constant((*norm_adjacency_p).clone());

    Ok(PooledGraph {
        selected,
        scores,
        adjacency_p,
        norm_adjacency_p,
        norm_id,
        gated_input_nodes,
        gated_output_nodes,
    })
}

/// TAGCN propagation on the pooled graph with its own weights W_{p,l},
/// shared between both branches.
pub fn pooled_features(
    tape: &mut Tape,
    bound: &Bound,
    layer: &PoolingLayer,
    pooled: &PooledGraph,
) -> Result<(TensorId, TensorId)> {
    layer.pooled_conv.node_features_pair(
        tape,
        bound,
        pooled.norm_id,
        pooled.gated_input_nodes,
        pooled.gated_output_nodes,
    )
}

/// σ(S_in) and σ(S_out): the pooled-attention heatmap values over all N
/// nodes for the input (Z) and output (V) branches.
pub fn attention_maps(
    tape: &mut Tape,
    bound: &Bound,
    pool_vector: ParamId,
    z: TensorId,
    v: TensorId,
    normalize_scores: bool,
) -> Result<(TensorId, TensorId)> {
    let s_in = score_nodes(tape, bound, pool_vector, z, normalize_scores)?;
    let s_out = score_nodes(tape, bound, pool_vector, v, normalize_scores)?;
    Ok((tape.sigmoid(s_in), tape.sigmoid(s_out)))
}
