//! Central finite-difference verification of the assembled training
//! objectives, grouped by parameter family. The discriminator group is
//! checked against the discriminator loss; every generator-side group is
//! checked against the full generator objective. Patch sampling is re-seeded
//! identically for every evaluation so all forwards see the same graph.

use crate::config::TrainConfig;
use crate::data::SyntheticDomainPair;
use crate::error::{PgeError, Result};
use crate::losses::LossConfig;
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tape;
use crate::train::{discriminator_objective, generator_objective, Model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_COORDS_PER_PARAM: usize = 4;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error: keeps central-difference
/// roundoff noise from dominating when a true gradient is near zero.
pub const REL_FLOOR: f64 = 1e-3;
/// Relative errors above this trigger re-evaluation at smaller step sizes:
/// a rectifier kink inside the difference interval stops contaminating the
/// quotient once the interval shrinks past it, while a genuine analytic
/// mismatch persists at every scale.
pub const REFINE_THRESHOLD: f64 = 1e-6;

/// Worst observed |analytic − fd| / max(|analytic|, |fd|, floor) per group.
#[derive(Debug, Clone)]
pub struct GroupReport {
    pub group: ParamGroup,
    pub params: usize,
    pub coords: usize,
    pub worst_rel: f64,
    pub worst_param: String,
}

impl GroupReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.worst_rel < tolerance
    }
}

/// The six trainable groups (the frozen encoder has no optimizer state and
/// is excluded by construction).
pub const CHECKED_GROUPS: [ParamGroup; 6] = [
    ParamGroup::Generator,
    ParamGroup::Discriminator,
    ParamGroup::Heads,
    ParamGroup::Gnn,
    ParamGroup::PooledGnn,
    ParamGroup::Pool,
];

pub fn run(
    cfg: &TrainConfig,
    seed: u64,
    eps: f64,
    coords_per_param: usize,
) -> Result<Vec<GroupReport>> {
    cfg.validate()?;
    if !(eps > 0.0) {
        return Err(PgeError::Contract(format!(
            "finite-difference epsilon must be positive, got {eps}"
        )));
    }
    if coords_per_param == 0 {
        return Err(PgeError::Contract(
            "coords_per_param must be at least 1".into(),
        ));
    }

    let mut store = ParamStore::new();
    let model = Model::build(cfg, &mut store);
    let loss_cfg = LossConfig::from_train(cfg);
    let data = SyntheticDomainPair::new(cfg.image_size);
    let x = data.sample_x(seed);
    let y = data.sample_y(seed.wrapping_add(1));
    let patch_seed = seed.wrapping_add(2);

    let eval_gen = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |_| false);
        let mut rng = ChaCha8Rng::seed_from_u64(patch_seed);
        let obj = generator_objective(&mut tape, &bound, &model, &loss_cfg, &x, &y, &mut rng)?;
        tape.value(obj.total).item()
    };
    let eval_disc = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |_| false);
        let d = discriminator_objective(&mut tape, &bound, &model, &x, &y)?;
        tape.value(d).item()
    };

    // One backward per objective covers every group it trains.
    let mut gen_tape = Tape::new();
    let gen_bound = store.bind(&mut gen_tape, ParamGroup::is_generator_side);
    let mut rng = ChaCha8Rng::seed_from_u64(patch_seed);
    let obj = generator_objective(&mut gen_tape, &gen_bound, &model, &loss_cfg, &x, &y, &mut rng)?;
    gen_tape.backward(obj.total)?;

    let mut d_tape = Tape::new();
    let d_bound = store.bind(&mut d_tape, |g| g == ParamGroup::Discriminator);
    let d_loss = discriminator_objective(&mut d_tape, &d_bound, &model, &x, &y)?;
    d_tape.backward(d_loss)?;

    let mut coord_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut reports = Vec::new();
    for group in CHECKED_GROUPS {
        let is_disc = group == ParamGroup::Discriminator;
        let (tape, bound) = if is_disc {
            (&d_tape, &d_bound)
        } else {
            (&gen_tape, &gen_bound)
        };
        let mut report = GroupReport {
            group,
            params: 0,
            coords: 0,
            worst_rel: 0.0,
            worst_param: String::new(),
        };
        for pid in store.ids() {
            if store.group(pid) != group {
                continue;
            }
            report.params += 1;
            let len = store.value(pid).len();
            let picks = rand::seq::index::sample(&mut coord_rng, len, coords_per_param.min(len));
            let analytic = tape.grad(bound.id(pid)).map(|g| g.to_vec());
            for c in picks.iter() {
                let a = analytic.as_ref().map_or(0.0, |g| g[c]);
                let orig = store.value(pid).data()[c];
                let mut rel_at = |e: f64| -> Result<f64> {
                    store.value_mut(pid).data_mut()[c] = orig + e;
                    let f_plus = if is_disc { eval_disc(&store) } else { eval_gen(&store) }?;
                    store.value_mut(pid).data_mut()[c] = orig - e;
                    let f_minus = if is_disc { eval_disc(&store) } else { eval_gen(&store) }?;
                    store.value_mut(pid).data_mut()[c] = orig;
                    let fd = (f_plus - f_minus) / (2.0 * e);
                    Ok((a - fd).abs() / a.abs().max(fd.abs()).max(REL_FLOOR))
                };
                let mut rel = rel_at(eps)?;
                let mut e = eps;
                while rel > REFINE_THRESHOLD && e > eps / 101.0 {
                    e /= 10.0;
                    rel = rel.min(rel_at(e)?);
                }
                report.coords += 1;
                if rel > report.worst_rel {
                    report.worst_rel = rel;
                    report.worst_param = format!("{}[{}]", store.name(pid), c);
                }
            }
        }
        reports.push(report);
    }
    Ok(reports)
}
