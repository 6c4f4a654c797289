//! Training objectives: node infoNCE on full and pooled graphs, the LSGAN
//! adversarial pair, the identity regularizer, and their assembly into the
//! total generator objective.
//!
//! LSGAN follows the standard convention: the discriminator regresses real
//! inputs to 1 and fakes to 0; the generator drives D(fake) toward 1.

use crate::error::{PgeError, Result};
use crate::gnn::TagConvLayer;
use crate::graph::{build_graph_pair, GraphPair, ProjectionHead};
use crate::params::Bound;
use crate::pooling::{pool_graph_pair, pooled_features, PoolingLayer};
use crate::tensor::{Tape, TensorId};
use rand::Rng;

/// Hyperparameters the loss assembly needs.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    pub lambda_g: f64,
    pub temperature: f64,
    pub pooling_levels: usize,
    pub normalize_embeddings: bool,
    pub normalize_pool_scores: bool,
    pub patch_count: usize,
    pub threshold: f64,
}

impl LossConfig {
    pub fn from_train(cfg: &crate::config::TrainConfig) -> Self {
        Self {
            lambda_g: cfg.lambda_g,
            temperature: cfg.temperature,
            pooling_levels: cfg.pooling_levels,
            normalize_embeddings: cfg.normalize_embeddings,
            normalize_pool_scores: cfg.normalize_pool_scores,
            patch_count: cfg.patch_count,
            threshold: cfg.threshold,
        }
    }
}

/// `-(1/M)·Σ_i log[ exp(zᵢᵀvᵢ/τ) / Σ_j exp(zᵢᵀvⱼ/τ) ]`, row i of V being
/// the positive for row i of Z. Rows are optionally L2-normalized first;
/// the softmax is row-max stabilized.
pub fn info_nce(
    tape: &mut Tape,
    z: TensorId,
    v: TensorId,
    temperature: f64,
    normalize: bool,
) -> Result<TensorId> {
    let m = tape.value(z).shape()[0];
    if m < 2 {
        return Err(PgeError::Contract(format!(
            "info_nce needs M ≥ 2 rows (at least one negative), got {m}"
        )));
    }
    if !(temperature > 0.0) {
        return Err(PgeError::Contract(format!(
            "info_nce needs positive temperature, got {temperature}"
        )));
    }
    let (mut zz, mut vv) = (z, v);
    if normalize {
        zz = tape.l2_normalize_rows(zz)?;
        vv = tape.l2_normalize_rows(vv)?;
    }
    let vt = tape.transpose(vv)?;
    let logits = tape.matmul(zz, vt)?;
    let logits = tape.scale(logits, 1.0 / temperature);
    tape.cross_entropy_diag(logits)
}

/// Everything one encoder layer contributes to the graph loss: its
/// projection head, its TAGCN weights, and its pooling stack.
pub struct GraphBranch {
    pub head: ProjectionHead,
    pub conv: TagConvLayer,
    pub pools: Vec<PoolingLayer>,
}

/// Graph loss of one encoder layer, split by pooling level (`levels[0]` is
/// the unpooled term).
pub struct LayerGraphLoss {
    pub levels: Vec<TensorId>,
    /// The graph pair, kept for attention/spectral emission.
    pub pair: GraphPair,
}

/// Build the graph pair for one encoder layer, propagate, and apply the
/// infoNCE at every pooling level: the per-layer slice of
/// `Σ_{p=0}^{P} L^p_GNN`.
#[allow(clippy::too_many_arguments)]
pub fn graph_loss_layer(
    tape: &mut Tape,
    bound: &Bound,
    branch: &GraphBranch,
    x_map: TensorId,
    gx_map: TensorId,
    cfg: &LossConfig,
    layer_id: usize,
    rng: &mut impl Rng,
) -> Result<LayerGraphLoss> {
    let pair = build_graph_pair(
        tape,
        bound,
        x_map,
        gx_map,
        &branch.head,
        cfg.patch_count,
        cfg.threshold,
        layer_id,
        rng,
    )?;
    let (mut z, mut v) = branch.conv.node_features_pair(
        tape,
        bound,
        pair.input.norm_id,
        pair.input.nodes,
        pair.output.nodes,
    )?;
    let mut levels =
        vec![info_nce(tape, z, v, cfg.temperature, cfg.normalize_embeddings)?];
    let mut adjacency = std::rc::Rc::clone(&pair.input.adjacency);
    for level in 0..cfg.pooling_levels.min(branch.pools.len()) {
        let layer = &branch.pools[level];
        let pooled = pool_graph_pair(
            tape,
            bound,
            layer,
            &adjacency,
            z,
            v,
            cfg.normalize_pool_scores,
        )?;
        let (zp, vp) = pooled_features(tape, bound, layer, &pooled)?;
        levels.push(info_nce(
            tape,
            zp,
            vp,
            cfg.temperature,
            cfg.normalize_embeddings,
        )?);
        adjacency = std::rc::Rc::clone(&pooled.adjacency_p);
        (z, v) = (zp, vp);
    }
    Ok(LayerGraphLoss { levels, pair })
}

/// Multi-layer graph loss: each encoder layer contributes the sum over its
/// pooling levels; layers are averaged. Returns per-level averages (for
/// logging) alongside the traced totals.
pub struct GraphLoss {
    /// Level-p loss averaged over encoder layers.
    pub per_level: Vec<TensorId>,
    /// Σ_p per_level[p].
    pub total: TensorId,
    pub layers: Vec<LayerGraphLoss>,
}

pub fn graph_loss(
    tape: &mut Tape,
    bound: &Bound,
    branches: &[GraphBranch],
    x_maps: &[TensorId],
    gx_maps: &[TensorId],
    cfg: &LossConfig,
    rng: &mut impl Rng,
) -> Result<GraphLoss> {
    if branches.len() != x_maps.len() || x_maps.len() != gx_maps.len() {
        return Err(PgeError::Contract(format!(
            "graph_loss needs one branch per tap pair: {} branches, {} / {} maps",
            branches.len(),
            x_maps.len(),
            gx_maps.len()
        )));
    }
    let mut layers = Vec::with_capacity(branches.len());
    for (layer_id, branch) in branches.iter().enumerate() {
        layers.push(graph_loss_layer(
            tape,
            bound,
            branch,
            x_maps[layer_id],
            gx_maps[layer_id],
            cfg,
            layer_id,
            rng,
        )?);
    }
    let n_levels = layers.iter().map(|l| l.levels.len()).max().unwrap_or(0);
    let inv = 1.0 / branches.len() as f64;
    let mut per_level = Vec::with_capacity(n_levels);
    for p in 0..n_levels {
        let mut acc: Option<TensorId> = None;
        for layer in &layers {
            if let Some(&loss) = layer.levels.get(p) {
                acc = Some(match acc {
                    None => loss,
                    Some(a) => tape.add(a, loss)?,
                });
            }
        }
        per_level.push(tape.scale(acc.expect("n_levels bounds the loop"), inv));
    }
    let mut total = per_level[0];
    for &lvl in &per_level[1..] {
        total = tape.add(total, lvl)?;
    }
    Ok(GraphLoss {
        per_level,
        total,
        layers,
    })
}

/// `mean((D_real − 1)²) + mean(D_fake²)`: the discriminator side of LSGAN.
pub fn lsgan_d(tape: &mut Tape, d_real: TensorId, d_fake: TensorId) -> Result<TensorId> {
    let real_shift = tape.add_scalar(d_real, -1.0);
    let real_sq = tape.mul(real_shift, real_shift)?;
    let real_term = tape.mean(real_sq);
    let fake_sq = tape.mul(d_fake, d_fake)?;
    let fake_term = tape.mean(fake_sq);
    tape.add(real_term, fake_term)
}

/// `mean((D_fake − 1)²)`: the generator side of LSGAN.
pub fn lsgan_g(tape: &mut Tape, d_fake: TensorId) -> Result<TensorId> {
    let shift = tape.add_scalar(d_fake, -1.0);
    let sq = tape.mul(shift, shift)?;
    Ok(tape.mean(sq))
}
