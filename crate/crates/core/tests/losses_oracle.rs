//! Loss oracles: the CUT reduction (hops 0, no pooling) against a fully
//! independent plain-f64 reimplementation of head → W_0 → normalize →
//! infoNCE, closed forms for infoNCE and LSGAN, shift invariance, and the
//! aligned-beats-misaligned expectation.

use pge_core::config::TrainConfig;
use pge_core::data::SyntheticDomainPair;
use pge_core::gnn::TagConvLayer;
use pge_core::graph::ProjectionHead;
use pge_core::losses::{graph_loss, info_nce, lsgan_d, lsgan_g, GraphBranch, LossConfig};
use pge_core::params::{ParamGroup, ParamStore};
use pge_core::tensor::{Tape, Tensor};
use pge_core::train::{generator_objective, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn by_name<'a>(store: &'a ParamStore, name: &str) -> &'a Tensor {
    let id = store
        .ids()
        .find(|&id| store.name(id) == name)
        .unwrap_or_else(|| panic!("no parameter named {name}"));
    store.value(id)
}

fn matmul_plain(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for kk in 0..k {
            let av = a[i * k + kk];
            for j in 0..m {
                out[i * m + j] += av * b[kk * m + j];
            }
        }
    }
    out
}

/// head(x) = relu(x·w0 + b0)·w1 + b1, replicated outside the engine.
fn head_plain(store: &ParamStore, name: &str, rows: &[f64], n: usize, c: usize) -> Vec<f64> {
    let w0 = by_name(store, &format!("{name}.fc0.weight"));
    let b0 = by_name(store, &format!("{name}.fc0.bias"));
    let w1 = by_name(store, &format!("{name}.fc1.weight"));
    let b1 = by_name(store, &format!("{name}.fc1.bias"));
    let h = w0.shape()[1];
    let d = w1.shape()[1];
    let mut hidden = matmul_plain(rows, w0.data(), n, c, h);
    for i in 0..n {
        for j in 0..h {
            hidden[i * h + j] = (hidden[i * h + j] + b0.data()[j]).max(0.0);
        }
    }
    let mut out = matmul_plain(&hidden, w1.data(), n, h, d);
    for i in 0..n {
        for j in 0..d {
            out[i * d + j] += b1.data()[j];
        }
    }
    out
}

/// −(1/M)·Σ_i log softmax(z_i·v_j/τ)_{ii} with optional row normalization,
/// written directly from the definition.
fn info_nce_plain(z: &[f64], v: &[f64], m: usize, d: usize, tau: f64, normalize: bool) -> f64 {
    let norm_rows = |x: &[f64]| -> Vec<f64> {
        let mut out = x.to_vec();
        for i in 0..m {
            let norm = x[i * d..(i + 1) * d]
                .iter()
                .map(|&e| e * e)
                .sum::<f64>()
                .sqrt()
                .max(1e-12);
            for e in &mut out[i * d..(i + 1) * d] {
                *e /= norm;
            }
        }
        out
    };
    let (zz, vv) = if normalize {
        (norm_rows(z), norm_rows(v))
    } else {
        (z.to_vec(), v.to_vec())
    };
    let mut loss = 0.0;
    for i in 0..m {
        let logits: Vec<f64> = (0..m)
            .map(|j| {
                (0..d)
                    .map(|k| zz[i * d + k] * vv[j * d + k])
                    .sum::<f64>()
                    / tau
            })
            .collect();
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse: f64 = logits.iter().map(|&l| (l - mx).exp()).sum();
        loss += mx + lse.ln() - logits[i];
    }
    loss / m as f64
}

#[test]
fn cut_reduction_matches_the_independent_oracle() {
    // Hops 0, no pooling: the graph loss must shrink to a plain patch
    // infoNCE with linear projection W_0, to < 1e-12, on 100 seeded pairs.
    let (c, h, w, n, d) = (5, 4, 4, 6, 4);
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x10_55 + trial);
        let mut store = ParamStore::new();
        let head = ProjectionHead::init(&mut store, "h0", c, 6, d, &mut rng);
        let conv = TagConvLayer::init(&mut store, "g0", ParamGroup::Gnn, d, d, 0, &mut rng);
        let branch = GraphBranch {
            head,
            conv,
            pools: vec![],
        };
        let (tau, normalize) = if trial % 2 == 0 { (0.07, true) } else { (1.0, false) };
        let cfg = LossConfig {
            lambda_g: 1.0,
            temperature: tau,
            pooling_levels: 0,
            normalize_embeddings: normalize,
            normalize_pool_scores: false,
            patch_count: n,
            threshold: 0.1,
        };
        let x_map: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gx_map: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |_| false);
        let x_id = tape.constant(Tensor::new(vec![c, h, w], x_map.clone()).unwrap());
        let gx_id = tape.constant(Tensor::new(vec![c, h, w], gx_map.clone()).unwrap());
        let mut patch_rng = ChaCha8Rng::seed_from_u64(trial);
        let loss = graph_loss(
            &mut tape,
            &bound,
            std::slice::from_ref(&branch),
            &[x_id],
            &[gx_id],
            &cfg,
            &mut patch_rng,
        )
        .unwrap();
        let got = tape.value(loss.total).item().unwrap();

        // Oracle: gather the same patch rows, run the plain pipeline.
        let indices = &loss.layers[0].pair.indices;
        let gather = |map: &[f64]| -> Vec<f64> {
            let mut rows = vec![0.0; indices.len() * c];
            for (r, &pos) in indices.iter().enumerate() {
                for ch in 0..c {
                    rows[r * c + ch] = map[ch * h * w + pos];
                }
            }
            rows
        };
        let fx = head_plain(&store, "h0", &gather(&x_map), n, c);
        let fgx = head_plain(&store, "h0", &gather(&gx_map), n, c);
        let w0 = by_name(&store, "g0.w0");
        let z = matmul_plain(&fx, w0.data(), n, d, d);
        let v = matmul_plain(&fgx, w0.data(), n, d, d);
        let want = info_nce_plain(&z, &v, n, d, tau, normalize);
        assert!(
            (got - want).abs() < 1e-12,
            "trial {trial}: engine {got} vs oracle {want}"
        );
    }
}

#[test]
fn uniform_logits_cost_log_m() {
    for m in [2usize, 64, 256] {
        let mut tape = Tape::new();
        // Identical anchor rows against identical candidate rows: every
        // pairwise logit is the same, so the softmax is uniform.
        let z = tape.constant(Tensor::full(&[m, 3], 0.7));
        let v = tape.constant(Tensor::full(&[m, 3], -0.4));
        let loss = info_nce(&mut tape, z, v, 0.5, false).unwrap();
        let got = tape.value(loss).item().unwrap();
        assert!(
            (got - (m as f64).ln()).abs() < 1e-12,
            "M = {m}: {got} vs {}",
            (m as f64).ln()
        );
    }
}

#[test]
fn two_pair_closed_form() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap());
    let v = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let loss = info_nce(&mut tape, z, v, 1.0, false).unwrap();
    let got = tape.value(loss).item().unwrap();
    assert!((got - 0.126928).abs() < 1e-6);
    assert!((got - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
}

#[test]
fn per_row_logit_shifts_leave_the_loss_unchanged() {
    // With every candidate row sharing first coordinate 1, adding c·τ to an
    // anchor's first coordinate shifts that row's logits by the constant c;
    // logsumexp shift invariance must absorb it to 1e-12.
    let (m, d, tau) = (5, 4, 0.7);
    let mut rng = ChaCha8Rng::seed_from_u64(0x10_57);
    let mut z: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut v: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for i in 0..m {
        v[i * d] = 1.0;
    }
    let eval = |z: &[f64], v: &[f64]| {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::new(vec![m, d], z.to_vec()).unwrap());
        let v = tape.constant(Tensor::new(vec![m, d], v.to_vec()).unwrap());
        let loss = info_nce(&mut tape, z, v, tau, false).unwrap();
        tape.value(loss).item().unwrap()
    };
    let base = eval(&z, &v);
    for (i, shift) in [(0usize, 3.0), (2, -7.5), (4, 40.0)] {
        z[i * d] += shift * tau;
        let shifted = eval(&z, &v);
        assert!(
            (shifted - base).abs() < 1e-12,
            "row {i} shift {shift}: {shifted} vs {base}"
        );
        z[i * d] -= shift * tau;
    }
}

#[test]
fn normalized_info_nce_is_nonnegative() {
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x10_58 + trial);
        let (m, d) = (rng.gen_range(2..10), rng.gen_range(1..6));
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::new(
            vec![m, d],
            (0..m * d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap());
        let v = tape.constant(Tensor::new(
            vec![m, d],
            (0..m * d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap());
        let loss = info_nce(&mut tape, z, v, 0.07, true).unwrap();
        assert!(tape.value(loss).item().unwrap() >= 0.0);
    }
}

#[test]
fn lsgan_matches_the_direct_mean_square_expression() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x10_59);
    for _ in 0..50 {
        let count = 12;
        let real: Vec<f64> = (0..count).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let fake: Vec<f64> = (0..count).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::new(vec![1, 3, 4], real.clone()).unwrap());
        let f = tape.constant(Tensor::new(vec![1, 3, 4], fake.clone()).unwrap());
        let d_loss = lsgan_d(&mut tape, r, f).unwrap();
        let g_loss = lsgan_g(&mut tape, f).unwrap();
        let mean = |it: &[f64], target: f64| {
            it.iter().map(|&x| (x - target).powi(2)).sum::<f64>() / count as f64
        };
        let want_d = mean(&real, 1.0) + mean(&fake, 0.0);
        let want_g = mean(&fake, 1.0);
        assert!((tape.value(d_loss).item().unwrap() - want_d).abs() < 1e-14);
        assert!((tape.value(g_loss).item().unwrap() - want_g).abs() < 1e-14);
    }
}

#[test]
fn lsgan_g_gradient_closed_form_and_finite_differences() {
    let count = 9;
    let mut rng = ChaCha8Rng::seed_from_u64(0x10_5a);
    let fake: Vec<f64> = (0..count).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let mut tape = Tape::new();
    let f = tape.leaf(Tensor::new(vec![1, 3, 3], fake.clone()).unwrap(), true);
    let loss = lsgan_g(&mut tape, f).unwrap();
    tape.backward(loss).unwrap();
    let grad = tape.grad(f).unwrap().to_vec();

    let eval = |fake: &[f64]| {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::new(vec![1, 3, 3], fake.to_vec()).unwrap());
        let loss = lsgan_g(&mut tape, f).unwrap();
        tape.value(loss).item().unwrap()
    };
    let eps = 1e-6;
    let mut pert = fake.clone();
    for e in 0..count {
        let expect = 2.0 * (fake[e] - 1.0) / count as f64;
        assert!((grad[e] - expect).abs() < 1e-12, "closed form at {e}");
        pert[e] = fake[e] + eps;
        let plus = eval(&pert);
        pert[e] = fake[e] - eps;
        let minus = eval(&pert);
        pert[e] = fake[e];
        let fd = (plus - minus) / (2.0 * eps);
        let rel = (grad[e] - fd).abs() / grad[e].abs().max(fd.abs()).max(0.1);
        assert!(rel < 1e-6, "fd at {e}: {} vs {fd}", grad[e]);
    }
}

#[test]
fn aligned_positives_beat_misaligned_in_expectation() {
    // graph_loss(x, x) should underbid graph_loss(x, unrelated) on average
    // over 50 seeded instances: identical maps make every positive logit
    // maximal.
    let (c, h, w, n, d) = (4, 4, 4, 6, 4);
    let mut sum_aligned = 0.0;
    let mut sum_misaligned = 0.0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x10_5b + seed);
        let mut store = ParamStore::new();
        let head = ProjectionHead::init(&mut store, "h0", c, 6, d, &mut rng);
        let conv = TagConvLayer::init(&mut store, "g0", ParamGroup::Gnn, d, d, 1, &mut rng);
        let branch = GraphBranch {
            head,
            conv,
            pools: vec![],
        };
        let cfg = LossConfig {
            lambda_g: 1.0,
            temperature: 0.07,
            pooling_levels: 0,
            normalize_embeddings: true,
            normalize_pool_scores: false,
            patch_count: n,
            threshold: 0.1,
        };
        let x: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let other: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eval = |out_map: &[f64]| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, |_| false);
            let x_id = tape.constant(Tensor::new(vec![c, h, w], x.clone()).unwrap());
            let o_id = tape.constant(Tensor::new(vec![c, h, w], out_map.to_vec()).unwrap());
            let mut patch_rng = ChaCha8Rng::seed_from_u64(seed);
            let loss = graph_loss(
                &mut tape,
                &bound,
                std::slice::from_ref(&branch),
                &[x_id],
                &[o_id],
                &cfg,
                &mut patch_rng,
            )
            .unwrap();
            tape.value(loss.total).item().unwrap()
        };
        sum_aligned += eval(&x);
        sum_misaligned += eval(&other);
    }
    assert!(
        sum_aligned < sum_misaligned,
        "mean aligned {} vs misaligned {}",
        sum_aligned / 50.0,
        sum_misaligned / 50.0
    );
}

#[test]
fn zero_lambda_reduces_the_generator_objective_to_pure_lsgan() {
    let mut cfg = TrainConfig::default().toy();
    cfg.gen_width = 4;
    cfg.disc_width = 4;
    cfg.embed_dim = 8;
    cfg.head_hidden = 8;
    cfg.res_blocks = 1;
    let mut store = ParamStore::new();
    let model = Model::build(&cfg, &mut store);
    let data = SyntheticDomainPair::new(cfg.image_size);
    let x = data.sample_x(1);
    let y = data.sample_y(2);

    let mut loss_cfg = LossConfig::from_train(&cfg);
    loss_cfg.lambda_g = 0.0;
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, |_| false);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let obj = generator_objective(&mut tape, &bound, &model, &loss_cfg, &x, &y, &mut rng).unwrap();
    assert_eq!(
        tape.value(obj.total).item().unwrap(),
        tape.value(obj.gan_g).item().unwrap()
    );

    // With the default weight every summand is nonnegative, so the total is.
    let loss_cfg = LossConfig::from_train(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let obj = generator_objective(&mut tape, &bound, &model, &loss_cfg, &x, &y, &mut rng).unwrap();
    assert!(tape.value(obj.total).item().unwrap() >= 0.0);
}
