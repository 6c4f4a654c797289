//! Named parameter storage, decoupled from the per-step autodiff tape.
//!
//! Parameters live here across steps (values plus Adam moments). Each step
//! binds the whole store onto a fresh [`Tape`] as leaves; which leaves are
//! marked `requires_grad` depends on the update being taken (discriminator
//! step vs generator-side step), so freezing falls out of the tape's
//! requires-grad propagation with no explicit detach anywhere.

use crate::error::{PgeError, Result};
use crate::tensor::{Tape, Tensor, TensorId};
use rand::Rng;

/// Optimizer/gradcheck partition of the parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Frozen feature extractor; never trainable.
    Encoder,
    Generator,
    Discriminator,
    /// Projection heads h, one per encoder layer.
    Heads,
    /// TAGCN hop weights W_l on the full graph.
    Gnn,
    /// TAGCN hop weights W_{p,l} on pooled graphs.
    PooledGnn,
    /// Learnable pooling vectors p.
    Pool,
}

impl ParamGroup {
    pub fn label(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Generator => "generator",
            ParamGroup::Discriminator => "discriminator",
            ParamGroup::Heads => "heads",
            ParamGroup::Gnn => "gnn",
            ParamGroup::PooledGnn => "pooled_gnn",
            ParamGroup::Pool => "pool",
        }
    }

    /// Groups updated by the generator-side step (everything trainable
    /// except the discriminator).
    pub fn is_generator_side(self) -> bool {
        matches!(
            self,
            ParamGroup::Generator
                | ParamGroup::Heads
                | ParamGroup::Gnn
                | ParamGroup::PooledGnn
                | ParamGroup::Pool
        )
    }
}

struct Param {
    name: String,
    value: Tensor,
    group: ParamGroup,
    trainable: bool,
    // Adam state; step count is per-parameter because the alternating
    // schedule updates disjoint halves of the store.
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Handle into a [`ParamStore`]; stable across steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter tensor. Names must be unique; registration order
    /// is the checkpoint serialization order, so model construction must be
    /// deterministic.
    pub fn register(
        &mut self,
        name: &str,
        value: Tensor,
        group: ParamGroup,
        trainable: bool,
    ) -> ParamId {
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let n = value.len();
        self.params.push(Param {
            name: name.to_string(),
            value,
            group,
            trainable,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.params[id.0].group
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    /// Place every parameter on `tape`. A leaf requires grad iff the
    /// parameter is trainable and its group passes `trainable_now`.
    pub fn bind(&self, tape: &mut Tape, trainable_now: impl Fn(ParamGroup) -> bool) -> Bound {
        let ids = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), p.trainable && trainable_now(p.group)))
            .collect();
        Bound { ids }
    }

    /// Deterministic digest of current values, used by tests to prove which
    /// halves of the store an update touched.
    pub fn digest(&self, filter: impl Fn(ParamGroup) -> bool) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64; // FNV-1a over value bit patterns
        for p in &self.params {
            if !filter(p.group) {
                continue;
            }
            for &x in p.value.data() {
                for byte in x.to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Per-tape mapping from [`ParamId`] to the leaf holding that parameter.
pub struct Bound {
    ids: Vec<TensorId>,
}

impl Bound {
    pub fn id(&self, p: ParamId) -> TensorId {
        self.ids[p.0]
    }
}

/// Adam hyperparameters (bias-corrected adaptive-moment SGD).
#[derive(Debug, Clone, Copy)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }

    /// Apply one update to every parameter that received a gradient on
    /// `tape` (i.e. was bound with requires_grad this step).
    pub fn step(&self, store: &mut ParamStore, tape: &Tape, bound: &Bound) {
        for i in 0..store.params.len() {
            let Some(grad) = tape.grad(bound.ids[i]) else {
                continue;
            };
            let p = &mut store.params[i];
            p.t += 1;
            let bc1 = 1.0 - self.beta1.powi(p.t as i32);
            let bc2 = 1.0 - self.beta2.powi(p.t as i32);
            let data = p.value.data_mut();
            for ((x, &g), (m, v)) in data
                .iter_mut()
                .zip(grad)
                .zip(p.m.iter_mut().zip(p.v.iter_mut()))
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *x -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Uniform(-scale, scale) tensor, the standard fan-in scaled initialization
/// used by every network in the engine.
pub fn uniform_init(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data consistent by construction")
}

/// He-style scale for a conv/linear weight: sqrt(2 / fan_in).
pub fn he_scale(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

impl ParamStore {
    /// Verify that `ids` covers every trainable parameter exactly once;
    /// names are checked unique at registration. Used by the optimizer
    /// uniqueness test.
    pub fn check_unique_names(&self) -> Result<()> {
        let mut names: Vec<&str> = self.params.iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        for w in names.windows(2) {
            if w[0] == w[1] {
                return Err(PgeError::Contract(format!(
                    "parameter name {} registered more than once",
                    w[0]
                )));
            }
        }
        Ok(())
    }
}
