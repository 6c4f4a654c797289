//! Model assembly and the one-sided translation training loop: alternating
//! discriminator / generator-side updates with adaptive-moment SGD, CSV
//! metrics, and periodic checkpoints. The discriminator sees target-domain
//! images as real and G(x) as fake; the generator-side step optimizes
//! LSGAN + λ_g·(graph loss on (x, G(x)) + identity graph loss on (y, G(y))).

use crate::checkpoint;
use crate::config::TrainConfig;
use crate::data::SyntheticDomainPair;
use crate::error::{PgeError, Result};
use crate::gnn::TagConvLayer;
use crate::graph::ProjectionHead;
use crate::losses::{graph_loss, lsgan_d, lsgan_g, GraphBranch, GraphLoss, LossConfig};
use crate::nets::{Discriminator, Encoder, Generator, ENCODER_CHANNELS};
use crate::params::{Adam, Bound, ParamGroup, ParamStore};
use crate::pooling::PoolingLayer;
use crate::spectral::fmt17;
use crate::tensor::{Tape, Tensor, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Every network and graph-side module, bound to one parameter store.
pub struct Model {
    pub encoder: Encoder,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub branches: Vec<GraphBranch>,
}

impl Model {
    /// Deterministic construction: one seeded stream initializes every
    /// parameter in a fixed registration order (which is also the
    /// checkpoint order).
    pub fn build(cfg: &TrainConfig, store: &mut ParamStore) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.model_seed);
        let encoder = Encoder::init(store, &mut rng);
        let generator = Generator::init(store, cfg.gen_width, cfg.res_blocks, &mut rng);
        let discriminator = Discriminator::init(store, cfg.disc_width, &mut rng);
        let branches = ENCODER_CHANNELS
            .iter()
            .enumerate()
            .map(|(i, &in_dim)| {
                let head = ProjectionHead::init(
                    store,
                    &format!("head{i}"),
                    in_dim,
                    cfg.head_hidden,
                    cfg.embed_dim,
                    &mut rng,
                );
                let conv = TagConvLayer::init(
                    store,
                    &format!("gnn{i}"),
                    ParamGroup::Gnn,
                    cfg.embed_dim,
                    cfg.embed_dim,
                    cfg.hops,
                    &mut rng,
                );
                let pools = (0..cfg.pooling_levels)
                    .map(|p| {
                        PoolingLayer::init(
                            store,
                            &format!("pool{i}.level{p}"),
                            cfg.embed_dim,
                            cfg.keep_ratio,
                            cfg.hops,
                            &mut rng,
                        )
                    })
                    .collect();
                GraphBranch { head, conv, pools }
            })
            .collect();
        Self {
            encoder,
            generator,
            discriminator,
            branches,
        }
    }
}

/// Traced generator-side objective and its logged components.
pub struct GenObjective {
    pub gan_g: TensorId,
    pub graph_x: GraphLoss,
    pub graph_idt: GraphLoss,
    pub total: TensorId,
}

/// lsgan_g(D(G(x))) + λ_g·graph(x, G(x)) + λ_g·graph(y, G(y)), all on one
/// tape. Shared verbatim by the training loop and the gradient checker.
pub fn generator_objective(
    tape: &mut Tape,
    bound: &Bound,
    model: &Model,
    cfg: &LossConfig,
    x: &Tensor,
    y: &Tensor,
    rng: &mut impl Rng,
) -> Result<GenObjective> {
    let x_id = tape.constant(x.clone());
    let y_id = tape.constant(y.clone());
    let gx = model.generator.forward(tape, bound, x_id)?;
    let gy = model.generator.forward(tape, bound, y_id)?;

    let d_fake = model.discriminator.forward(tape, bound, gx)?;
    let gan_g = lsgan_g(tape, d_fake)?;

    let x_taps = model.encoder.taps(tape, bound, x_id)?;
    let gx_taps = model.encoder.taps(tape, bound, gx)?;
    let graph_x = graph_loss(tape, bound, &model.branches, &x_taps, &gx_taps, cfg, rng)?;

    let y_taps = model.encoder.taps(tape, bound, y_id)?;
    let gy_taps = model.encoder.taps(tape, bound, gy)?;
    let graph_idt = graph_loss(tape, bound, &model.branches, &y_taps, &gy_taps, cfg, rng)?;

    let weighted_x = tape.scale(graph_x.total, cfg.lambda_g);
    let weighted_idt = tape.scale(graph_idt.total, cfg.lambda_g);
    let partial = tape.add(gan_g, weighted_x)?;
    let total = tape.add(partial, weighted_idt)?;
    Ok(GenObjective {
        gan_g,
        graph_x,
        graph_idt,
        total,
    })
}

/// lsgan_d(D(y), D(G(x))): target-domain reals, translated fakes.
pub fn discriminator_objective(
    tape: &mut Tape,
    bound: &Bound,
    model: &Model,
    x: &Tensor,
    y: &Tensor,
) -> Result<TensorId> {
    let x_id = tape.constant(x.clone());
    let y_id = tape.constant(y.clone());
    let gx = model.generator.forward(tape, bound, x_id)?;
    let d_real = model.discriminator.forward(tape, bound, y_id)?;
    let d_fake = model.discriminator.forward(tape, bound, gx)?;
    lsgan_d(tape, d_real, d_fake)
}

/// One logged metrics row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss_gan_g: f64,
    pub loss_gan_d: f64,
    pub loss_gnn_p0: f64,
    pub loss_gnn_p1: f64,
    pub loss_idt: f64,
    pub total: f64,
}

pub const METRICS_HEADER: &str =
    "step,loss_gan_g,loss_gan_d,loss_gnn_p0,loss_gnn_p1,loss_idt,total";

impl MetricsRow {
    fn to_csv(self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            fmt17(self.loss_gan_g),
            fmt17(self.loss_gan_d),
            fmt17(self.loss_gnn_p0),
            fmt17(self.loss_gnn_p1),
            fmt17(self.loss_idt),
            fmt17(self.total)
        )
    }
}

/// Where a finished run left its artifacts.
#[derive(Debug)]
pub struct TrainReport {
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub config_path: PathBuf,
    pub rows: Vec<MetricsRow>,
}

fn check_finite(name: &str, v: f64, step: usize) -> Result<f64> {
    if !v.is_finite() {
        return Err(PgeError::Numerical(format!(
            "non-finite {name} = {v} at step {step}"
        )));
    }
    Ok(v)
}

/// Run the full loop: alternating D / generator-side updates, metrics CSV
/// every `log_interval` steps, checkpoint rewrites every
/// `checkpoint_interval` steps plus a final one.
pub fn train(cfg: &TrainConfig, out_dir: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let config_path = out_dir.join("config.txt");
    std::fs::write(&config_path, cfg.to_text())?;

    let mut store = ParamStore::new();
    let model = Model::build(cfg, &mut store);
    store.check_unique_names()?;
    let loss_cfg = LossConfig::from_train(cfg);
    let adam = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2);
    let data = SyntheticDomainPair::new(cfg.image_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = std::fs::File::create(&metrics_path)?;
    writeln!(metrics, "{METRICS_HEADER}")?;
    let checkpoint_path = out_dir.join("checkpoint.pge");
    let mut rows = Vec::new();

    for step in 1..=cfg.steps {
        let batch: Vec<(Tensor, Tensor)> = (0..cfg.batch_size)
            .map(|_| {
                let x = data.sample_x(rng.gen());
                let y = data.sample_y(rng.gen());
                (x, y)
            })
            .collect();
        let inv_b = 1.0 / cfg.batch_size as f64;

        // Discriminator update; generator-side leaves stay frozen on the tape.
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |g| g == ParamGroup::Discriminator);
        let mut d_total: Option<TensorId> = None;
        for (x, y) in &batch {
            let item = discriminator_objective(&mut tape, &bound, &model, x, y)?;
            d_total = Some(match d_total {
                None => item,
                Some(acc) => tape.add(acc, item)?,
            });
        }
        let d_loss = tape.scale(d_total.expect("batch_size ≥ 1"), inv_b);
        let loss_gan_d = check_finite("loss_gan_d", tape.value(d_loss).item()?, step)?;
        tape.backward(d_loss)?;
        adam.step(&mut store, &tape, &bound);

        // Generator-side update with the just-updated discriminator frozen.
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, ParamGroup::is_generator_side);
        let mut g_total: Option<TensorId> = None;
        let (mut gan_g, mut gnn_p0, mut gnn_p1, mut idt) = (0.0, 0.0, 0.0, 0.0);
        for (x, y) in &batch {
            let obj = generator_objective(&mut tape, &bound, &model, &loss_cfg, x, y, &mut rng)?;
            gan_g += tape.value(obj.gan_g).item()? * inv_b;
            gnn_p0 += tape.value(obj.graph_x.per_level[0]).item()? * inv_b;
            for &lvl in &obj.graph_x.per_level[1..] {
                gnn_p1 += tape.value(lvl).item()? * inv_b;
            }
            idt += tape.value(obj.graph_idt.total).item()? * inv_b;
            g_total = Some(match g_total {
                None => obj.total,
                Some(acc) => tape.add(acc, obj.total)?,
            });
        }
        let g_loss = tape.scale(g_total.expect("batch_size ≥ 1"), inv_b);
        let total = tape.value(g_loss).item()?;
        for (name, v) in [
            ("loss_gan_g", gan_g),
            ("loss_gnn_p0", gnn_p0),
            ("loss_gnn_p1", gnn_p1),
            ("loss_idt", idt),
            ("total", total),
        ] {
            check_finite(name, v, step)?;
        }
        tape.backward(g_loss)?;
        adam.step(&mut store, &tape, &bound);

        if step % cfg.log_interval == 0 {
            let row = MetricsRow {
                step,
                loss_gan_g: gan_g,
                loss_gan_d,
                loss_gnn_p0: gnn_p0,
                loss_gnn_p1: gnn_p1,
                loss_idt: idt,
                total,
            };
            writeln!(metrics, "{}", row.to_csv())?;
            rows.push(row);
        }
        if cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 {
            checkpoint::save(&store, &checkpoint_path)?;
        }
    }
    metrics.flush()?;
    checkpoint::save(&store, &checkpoint_path)?;
    Ok(TrainReport {
        checkpoint_path,
        metrics_path,
        config_path,
        rows,
    })
}

/// Deterministic inference: G(x) values for one image.
pub fn translate(model: &Model, store: &ParamStore, image: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, |_| false);
    let x = tape.constant(image.clone());
    let out = model.generator.forward(&mut tape, &bound, x)?;
    Ok(tape.value(out).clone())
}

/// Encoder tap values for one image (no gradients).
pub fn encoder_taps_values(model: &Model, store: &ParamStore, image: &Tensor) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, |_| false);
    let x = tape.constant(image.clone());
    let taps = model.encoder.taps(&mut tape, &bound, x)?;
    Ok(taps.into_iter().map(|t| tape.value(t).clone()).collect())
}
