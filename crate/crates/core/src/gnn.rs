//! Topology-adaptive graph convolution: `Σ_{l=0}^{L} (Ā)^l F W_l`, computed
//! by iterated multiplication `H_{l+1} = Ā·H_l` rather than explicit matrix
//! powers. One linear hop-sum, no nonlinearity between hops; the same
//! weights serve the input and output branches, producing Z and V.

use crate::error::{PgeError, Result};
use crate::params::{uniform_init, Bound, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tape, TensorId};
use rand::Rng;

/// L+1 hop weight matrices W_0…W_L, all `[c', d]`.
pub struct TagConvLayer {
    hop_weights: Vec<ParamId>,
    hops: usize,
}

impl TagConvLayer {
    /// Register L+1 weight matrices under `name.w{l}`.
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        hops: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let scale = (1.0 / in_dim as f64).sqrt();
        let hop_weights = (0..=hops)
            .map(|l| {
                store.register(
                    &format!("{name}.w{l}"),
                    uniform_init(rng, &[in_dim, out_dim], scale),
                    group,
                    true,
                )
            })
            .collect();
        Self { hop_weights, hops }
    }

    /// Wrap existing parameter handles; hop/weight count must agree.
    pub fn new(hop_weights: Vec<ParamId>, hops: usize) -> Result<Self> {
        if hop_weights.len() != hops + 1 {
            return Err(PgeError::Contract(format!(
                "TAGCN with L={hops} needs {} weight matrices, got {}",
                hops + 1,
                hop_weights.len()
            )));
        }
        Ok(Self { hop_weights, hops })
    }

    pub fn hops(&self) -> usize {
        self.hops
    }

    pub fn weight_ids(&self) -> &[ParamId] {
        &self.hop_weights
    }

    /// `Σ_l (Ā)^l · nodes · W_l`; differentiable w.r.t. nodes and weights.
    /// `norm_adjacency` is a tape constant (topology carries no gradient).
    pub fn propagate(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        norm_adjacency: TensorId,
        nodes: TensorId,
    ) -> Result<TensorId> {
        let a_shape = tape.value(norm_adjacency).shape().to_vec();
        let n_shape = tape.value(nodes).shape().to_vec();
        if a_shape.len() != 2 || a_shape[0] != a_shape[1] || n_shape[0] != a_shape[0] {
            return Err(PgeError::Shape(format!(
                "propagate needs Ā[N,N] and nodes[N,c'], got {a_shape:?} and {n_shape:?}"
            )));
        }
        let mut hop = nodes;
        let mut acc = tape.matmul(nodes, bound.id(self.hop_weights[0]))?;
        for l in 1..=self.hops {
            hop = tape.matmul(norm_adjacency, hop)?;
            let term = tape.matmul(hop, bound.id(self.hop_weights[l]))?;
            acc = tape.add(acc, term)?;
        }
        Ok(acc)
    }

    /// Z and V from one shared set of weights.
    pub fn node_features_pair(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        norm_adjacency: TensorId,
        f_in: TensorId,
        f_out: TensorId,
    ) -> Result<(TensorId, TensorId)> {
        if tape.value(f_in).shape() != tape.value(f_out).shape() {
            return Err(PgeError::Contract(format!(
                "node_features_pair needs F_i and F_o of equal shape, got {:?} vs {:?}",
                tape.value(f_in).shape(),
                tape.value(f_out).shape()
            )));
        }
        let z = self.propagate(tape, bound, norm_adjacency, f_in)?;
        let v = self.propagate(tape, bound, norm_adjacency, f_out)?;
        Ok((z, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hop_weight_count_contract() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = TagConvLayer::init(&mut store, "t", ParamGroup::Gnn, 3, 2, 2, &mut rng);
        assert_eq!(layer.weight_ids().len(), 3);
        let ids = layer.weight_ids().to_vec();
        assert!(TagConvLayer::new(ids.clone(), 1).is_err());
        assert!(TagConvLayer::new(ids, 2).is_ok());
    }

    #[test]
    fn identity_topology_sums_weights() {
        // Ā = I ⇒ result = nodes · (Σ W_l).
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = TagConvLayer::init(&mut store, "t", ParamGroup::Gnn, 2, 2, 2, &mut rng);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |_| false);
        let eye = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let nodes = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let out = layer.propagate(&mut tape, &bound, eye, nodes).unwrap();

        let mut wsum = Tensor::zeros(&[2, 2]);
        for &w in layer.weight_ids() {
            for (o, &e) in wsum.data_mut().iter_mut().zip(store.value(w).data()) {
                *o += e;
            }
        }
        let wsum_id = tape.constant(wsum);
        let expect = tape.matmul(nodes, wsum_id).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(tape.value(expect).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
