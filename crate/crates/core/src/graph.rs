//! Patch-graph construction: sample patch features from encoder maps,
//! project them through the learnable head h, threshold cosine similarities
//! into a binary adjacency A, and build the input/output graph pair sharing
//! one A.
//!
//! Adjacency construction is non-differentiable by contract: A is computed
//! from detached feature *values*, so no gradient ever flows through the
//! thresholding path. Node features stay on the tape.

use crate::error::{PgeError, Result};
use crate::params::{he_scale, uniform_init, Bound, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, TensorId, NORM_EPS};
use rand::Rng;
use std::rc::Rc;

/// N sampled patch-feature rows plus the grid positions they came from.
pub struct PatchSet {
    /// Traced `[N, c]` feature rows.
    pub features: TensorId,
    /// Row-major positions into the `h×w` tap grid; distinct, in sample order.
    pub indices: Vec<usize>,
    /// Which encoder tap produced the features.
    pub layer_id: usize,
    /// Tap grid extent `(h, w)`; kept for heatmap emission.
    pub grid: (usize, usize),
}

/// Graph over patches: binary adjacency (shared between the input and
/// output branches), its symmetric normalization, and traced node features.
pub struct PatchGraph {
    /// Binary symmetric `[N, N]` matrix with unit diagonal. Both branches
    /// hold the same allocation.
    pub adjacency: Rc<Tensor>,
    /// `Ā = D^{-1/2} A D^{-1/2}`.
    pub norm_adjacency: Rc<Tensor>,
    /// `norm_adjacency` as a tape constant, ready for propagation matmuls.
    pub norm_id: TensorId,
    /// Projected node features `[N, c']` on the tape (F_i or F_o).
    pub nodes: TensorId,
    pub threshold: f64,
}

/// Two affine layers with a rectifier between: the learnable map h whose
/// outputs define both the adjacency and the GNN node features. One head
/// per encoder layer, shared by the input and output branches.
pub struct ProjectionHead {
    w0: ParamId,
    b0: ParamId,
    w1: ParamId,
    b1: ParamId,
}

impl ProjectionHead {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let g = ParamGroup::Heads;
        Self {
            w0: store.register(
                &format!("{name}.fc0.weight"),
                uniform_init(rng, &[in_dim, hidden], he_scale(in_dim)),
                g,
                true,
            ),
            b0: store.register(
                &format!("{name}.fc0.bias"),
                uniform_init(rng, &[hidden], 1.0 / (in_dim as f64).sqrt()),
                g,
                true,
            ),
            w1: store.register(
                &format!("{name}.fc1.weight"),
                uniform_init(rng, &[hidden, out_dim], he_scale(hidden)),
                g,
                true,
            ),
            b1: store.register(
                &format!("{name}.fc1.bias"),
                uniform_init(rng, &[out_dim], 1.0 / (hidden as f64).sqrt()),
                g,
                true,
            ),
        }
    }

    pub fn apply(&self, tape: &mut Tape, bound: &Bound, x: TensorId) -> Result<TensorId> {
        let h = tape.matmul(x, bound.id(self.w0))?;
        let h = tape.row_bias(h, bound.id(self.b0))?;
        let h = tape.relu(h);
        let out = tape.matmul(h, bound.id(self.w1))?;
        tape.row_bias(out, bound.id(self.b1))
    }
}

/// Draw `count` distinct positions uniformly without replacement from the
/// `h·w` grid of `feature_map [c,h,w]` and gather their channel vectors as
/// rows.
pub fn sample_patches(
    tape: &mut Tape,
    feature_map: TensorId,
    count: usize,
    layer_id: usize,
    rng: &mut impl Rng,
) -> Result<PatchSet> {
    let shape = tape.value(feature_map).shape().to_vec();
    if shape.len() != 3 {
        return Err(PgeError::Shape(format!(
            "sample_patches needs a [c,h,w] map, got {shape:?}"
        )));
    }
    let cells = shape[1] * shape[2];
    if count > cells {
        return Err(PgeError::Capacity(format!(
            "cannot sample {count} distinct patches from a grid of {cells} cells"
        )));
    }
    // Partial Fisher–Yates: first `count` entries are a uniform sample
    // without replacement, in sampled order.
    let mut pool: Vec<usize> = (0..cells).collect();
    for i in 0..count {
        let j = rng.gen_range(i..cells);
        pool.swap(i, j);
    }
    pool.truncate(count);
    sample_patches_at(tape, feature_map, pool, layer_id)
}

/// Gather feature rows at exactly the given grid positions, same order.
pub fn sample_patches_at(
    tape: &mut Tape,
    feature_map: TensorId,
    indices: Vec<usize>,
    layer_id: usize,
) -> Result<PatchSet> {
    let shape = tape.value(feature_map).shape().to_vec();
    if shape.len() != 3 {
        return Err(PgeError::Shape(format!(
            "sample_patches_at needs a [c,h,w] map, got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if let Some(&bad) = indices.iter().find(|&&i| i >= h * w) {
        return Err(PgeError::Bounds(format!(
            "patch index {bad} out of range for a {h}x{w} grid"
        )));
    }
    let flat = tape.reshape(feature_map, vec![c, h * w])?;
    let by_pos = tape.transpose(flat)?; // [h·w, c]
    let features = tape.gather_rows(by_pos, Rc::new(indices.clone()))?;
    Ok(PatchSet {
        features,
        indices,
        layer_id,
        grid: (h, w),
    })
}

/// Threshold pairwise cosine similarities of `projected [N, c']` rows into a
/// binary symmetric adjacency with unit diagonal. Zero-norm rows get cosine
/// 0 against everything (isolated node), diagonal forced to 1.
pub fn build_adjacency(projected: &Tensor, t: f64) -> Result<Tensor> {
    if projected.rank() != 2 {
        return Err(PgeError::Shape(format!(
            "build_adjacency needs [N, c'], got {:?}",
            projected.shape()
        )));
    }
    let (n, d) = (projected.shape()[0], projected.shape()[1]);
    let data = projected.data();
    let norms: Vec<f64> = (0..n)
        .map(|i| {
            data[i * d..(i + 1) * d]
                .iter()
                .map(|&e| e * e)
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        a[i * n + i] = 1.0;
        for j in i + 1..n {
            let cos = if norms[i] < NORM_EPS || norms[j] < NORM_EPS {
                0.0
            } else {
                let dot: f64 = data[i * d..(i + 1) * d]
                    .iter()
                    .zip(&data[j * d..(j + 1) * d])
                    .map(|(&x, &y)| x * y)
                    .sum();
                dot / (norms[i] * norms[j])
            };
            if cos >= t {
                a[i * n + j] = 1.0;
                a[j * n + i] = 1.0;
            }
        }
    }
    Tensor::new(vec![n, n], a)
}

/// `Ā = D^{-1/2} A D^{-1/2}` for a symmetric binary `A` with unit diagonal
/// (so every degree ≥ 1 and the inverse square roots exist).
pub fn normalize_adjacency(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(PgeError::Shape(format!(
            "normalize_adjacency needs a square matrix, got {:?}",
            a.shape()
        )));
    }
    let n = a.shape()[0];
    let data = a.data();
    let dinv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let deg: f64 = data[i * n..(i + 1) * n].iter().sum();
            1.0 / deg.sqrt()
        })
        .collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = dinv_sqrt[i] * data[i * n + j] * dinv_sqrt[j];
        }
    }
    Tensor::new(vec![n, n], out)
}

/// The input/output graph pair with one shared adjacency.
pub struct GraphPair {
    pub input: PatchGraph,
    pub output: PatchGraph,
    /// The single patch sampling both branches used.
    pub indices: Vec<usize>,
    pub grid: (usize, usize),
}

/// Sample once, project both maps through the same head, build A from the
/// projected *input* features only, and hand both graphs the identical A.
pub fn build_graph_pair(
    tape: &mut Tape,
    bound: &Bound,
    input_map: TensorId,
    output_map: TensorId,
    head: &ProjectionHead,
    count: usize,
    threshold: f64,
    layer_id: usize,
    rng: &mut impl Rng,
) -> Result<GraphPair> {
    if tape.value(input_map).shape() != tape.value(output_map).shape() {
        return Err(PgeError::Contract(format!(
            "graph pair needs maps of one encoder layer, got {:?} vs {:?}",
            tape.value(input_map).shape(),
            tape.value(output_map).shape()
        )));
    }
    let ps_in = sample_patches(tape, input_map, count, layer_id, rng)?;
    let ps_out = sample_patches_at(tape, output_map, ps_in.indices.clone(), layer_id)?;
    let f_in = head.apply(tape, bound, ps_in.features)?;
    let f_out = head.apply(tape, bound, ps_out.features)?;
    // Detach: adjacency sees values only, never the trace.
    let adjacency = Rc::new(build_adjacency(tape.value(f_in), threshold)?);
    let norm = Rc::new(normalize_adjacency(&adjacency)?);
    let norm_id = tape.constant((*norm).clone());
    let mk = |nodes: TensorId| PatchGraph {
        adjacency: Rc::clone(&adjacency),
        norm_adjacency: Rc::clone(&norm),
        norm_id,
        nodes,
        threshold,
    };
    Ok(GraphPair {
        input: mk(f_in),
        output: mk(f_out),
        indices: ps_in.indices,
        grid: ps_in.grid,
    })
}
