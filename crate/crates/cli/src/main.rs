//! `pge` — command-line entry point for the patch-graph engine: training,
//! translation inference, spectral graph analysis, pooled-attention dumps,
//! and gradient verification. One command per process; exit code 0 on
//! success, 2 on configuration/contract/file errors, 3 on numerical failure.

use clap::{Parser, Subcommand};
use pge_core::checkpoint;
use pge_core::config::TrainConfig;
use pge_core::error::{PgeError, Result};
use pge_core::gradcheck;
use pge_core::graph;
use pge_core::image;
use pge_core::losses::LossConfig;
use pge_core::params::ParamStore;
use pge_core::pooling;
use pge_core::spectral;
use pge_core::tensor::{Tape, Tensor};
use pge_core::train::{self, Model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "pge",
    version,
    about = "Patch-graph engine: topology-aware patch-wise contrastive image translation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on the synthetic two-domain pair; writes checkpoint.pge,
    /// metrics.csv, and config.txt into --out.
    Train {
        /// key=value config file; defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Overrides data_seed with SEED and model_seed with SEED+1
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the generator on a binary PPM image and write the translation.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image (binary PPM, 8-bit)
        #[arg(long = "in")]
        input: PathBuf,
        /// Output image path (binary PPM)
        #[arg(long)]
        out: PathBuf,
        /// Config describing the checkpoint's architecture
        #[arg(long)]
        config: Option<PathBuf>,
        /// Accepted for interface uniformity; translation is deterministic
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build the patch graph at one encoder tap and emit Laplacian eigenmaps.
    GraphSpectral {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Encoder tap layer
        #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u8).range(0..=2))]
        layer: u8,
        /// Number of eigenmaps (smallest nonzero eigenvalues)
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Cosine threshold; defaults to the config value
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed for patch sampling
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Emit σ(S_in)/σ(S_out) pooled-attention heatmaps for x and G(x).
    PoolAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed for patch sampling
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Verify analytic gradients of every parameter group against central
    /// finite differences on a 16×16 toy instance.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Maximum allowed relative error per group
        #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                PgeError::Numerical(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

/// Fail early with the offending path; bare io errors don't carry it.
fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(PgeError::Config(format!(
            "{what} not found: {}",
            path.display()
        )))
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            require_file(p, "config file")?;
            TrainConfig::parse(&std::fs::read_to_string(p)?)
        }
    }
}

/// Rebuild the architecture from the config, then fill it from a checkpoint.
fn load_model(cfg: &TrainConfig, ckpt: &Path) -> Result<(ParamStore, Model)> {
    require_file(ckpt, "checkpoint")?;
    let mut store = ParamStore::new();
    let model = Model::build(cfg, &mut store);
    checkpoint::load_into(&mut store, ckpt)?;
    Ok((store, model))
}

fn read_image(path: &Path) -> Result<Tensor> {
    require_file(path, "input image")?;
    image::read_ppm(path)
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train { config, out, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.data_seed = s;
                cfg.model_seed = s.wrapping_add(1);
            }
            let report = train::train(&cfg, &out)?;
            println!(
                "trained {} steps; checkpoint {}; metrics {}",
                cfg.steps,
                report.checkpoint_path.display(),
                report.metrics_path.display()
            );
            Ok(())
        }
        Cmd::Translate {
            checkpoint,
            input,
            out,
            config,
            seed: _,
        } => {
            let cfg = load_config(config.as_deref())?;
            let (store, model) = load_model(&cfg, &checkpoint)?;
            let img = read_image(&input)?;
            let translated = train::translate(&model, &store, &img)?;
            image::write_ppm(&out, &translated)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Cmd::GraphSpectral {
            checkpoint,
            input,
            layer,
            k,
            threshold,
            out,
            config,
            seed,
        } => {
            let cfg = load_config(config.as_deref())?;
            let (store, model) = load_model(&cfg, &checkpoint)?;
            let img = read_image(&input)?;
            let layer = layer as usize;
            let t = threshold.unwrap_or(cfg.threshold);
            if !(-1.0..=1.0).contains(&t) {
                return Err(PgeError::Config(format!(
                    "threshold must lie in [-1,1], got {t}"
                )));
            }

            let tap = train::encoder_taps_values(&model, &store, &img)?
                .swap_remove(layer);
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, |_| false);
            let map = tape.constant(tap);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let patches =
                graph::sample_patches(&mut tape, map, cfg.patch_count, layer, &mut rng)?;
            let projected = model.branches[layer]
                .head
                .apply(&mut tape, &bound, patches.features)?;
            let a = graph::build_adjacency(tape.value(projected), t)?;
            let lap = spectral::laplacian(&a)?;
            let result = spectral::eigendecompose(&lap)?;
            let paths =
                spectral::emit_eigenmaps(&result, &patches.indices, patches.grid, k, &out)?;
            println!(
                "graph on {} patches (layer {layer}, threshold {t}): {} zero eigenvalues; wrote {} eigenmaps to {}",
                cfg.patch_count,
                result.zero_multiplicity(),
                paths.len(),
                out.display()
            );
            Ok(())
        }
        Cmd::PoolAttn {
            checkpoint,
            input,
            out,
            config,
            seed,
        } => {
            let cfg = load_config(config.as_deref())?;
            if cfg.pooling_levels == 0 {
                return Err(PgeError::Config(
                    "pool-attn needs pooling_levels >= 1".into(),
                ));
            }
            let (store, model) = load_model(&cfg, &checkpoint)?;
            let img = read_image(&input)?;
            let translated = train::translate(&model, &store, &img)?;
            let x_taps = train::encoder_taps_values(&model, &store, &img)?;
            let gx_taps = train::encoder_taps_values(&model, &store, &translated)?;
            let loss_cfg = LossConfig::from_train(&cfg);
            std::fs::create_dir_all(&out)?;

            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, |_| false);
            for (layer, branch) in model.branches.iter().enumerate() {
                let x_map = tape.constant(x_taps[layer].clone());
                let gx_map = tape.constant(gx_taps[layer].clone());
                let pair = graph::build_graph_pair(
                    &mut tape,
                    &bound,
                    x_map,
                    gx_map,
                    &branch.head,
                    cfg.patch_count,
                    cfg.threshold,
                    layer,
                    &mut rng,
                )?;
                let (z, v) = branch.conv.node_features_pair(
                    &mut tape,
                    &bound,
                    pair.input.norm_id,
                    pair.input.nodes,
                    pair.output.nodes,
                )?;
                let (s_in, s_out) = pooling::attention_maps(
                    &mut tape,
                    &bound,
                    branch.pools[0].pool_vector,
                    z,
                    v,
                    loss_cfg.normalize_pool_scores,
                )?;
                write_attention_layer(
                    &out,
                    layer,
                    &pair.indices,
                    pair.grid,
                    tape.value(s_in).data(),
                    tape.value(s_out).data(),
                )?;
            }
            println!(
                "wrote attention maps for {} layers to {}",
                model.branches.len(),
                out.display()
            );
            Ok(())
        }
        Cmd::Gradcheck {
            config,
            tolerance,
            seed,
        } => {
            let cfg = load_config(config.as_deref())?.toy();
            let reports = gradcheck::run(
                &cfg,
                seed,
                gradcheck::DEFAULT_EPSILON,
                gradcheck::DEFAULT_COORDS_PER_PARAM,
            )?;
            let mut failing = Vec::new();
            for r in &reports {
                println!(
                    "group {:<14} params {:>3} coords {:>4} worst relative error {:.3e} ({})",
                    r.group.label(),
                    r.params,
                    r.coords,
                    r.worst_rel,
                    r.worst_param
                );
                if !r.passes(tolerance) {
                    failing.push(format!("{} ({:.3e})", r.group.label(), r.worst_rel));
                }
            }
            if failing.is_empty() {
                println!("gradient check passed (tolerance {tolerance:e})");
                Ok(())
            } else {
                Err(PgeError::Numerical(format!(
                    "gradient check failed at tolerance {tolerance:e}: {}",
                    failing.join(", ")
                )))
            }
        }
    }
}

/// One CSV (both branches) plus one PGM per branch, on the tap grid;
/// unsampled cells render black.
fn write_attention_layer(
    dir: &Path,
    layer: usize,
    indices: &[usize],
    grid: (usize, usize),
    s_in: &[f64],
    s_out: &[f64],
) -> Result<()> {
    let (h, w) = grid;
    let mut csv = String::from("node_index,grid_row,grid_col,sigma_in,sigma_out\n");
    for (node, &pos) in indices.iter().enumerate() {
        csv += &format!(
            "{},{},{},{},{}\n",
            node,
            pos / w,
            pos % w,
            spectral::fmt17(s_in[node]),
            spectral::fmt17(s_out[node])
        );
    }
    std::fs::write(dir.join(format!("attn_layer{layer}.csv")), csv)?;

    for (tag, vals) in [("in", s_in), ("out", s_out)] {
        let mut map = Tensor::zeros(&[h, w]);
        for (&pos, &v) in indices.iter().zip(vals) {
            map.data_mut()[pos] = v;
        }
        image::write_pgm(&dir.join(format!("attn_layer{layer}_{tag}.pgm")), &map)?;
    }
    Ok(())
}
