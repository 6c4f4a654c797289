//! Black-box tests of the `pge` binary: exit codes, error wording, artifact
//! determinism, and the byte-identical zero-step checkpoint dump.

use pge_core::checkpoint;
use pge_core::data::SyntheticDomainPair;
use pge_core::image;
use pge_core::params::ParamStore;
use pge_core::train::Model;
use pge_core::TrainConfig;
use std::path::{Path, PathBuf};
use std::process::Output;
use std::sync::OnceLock;

fn pge(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_pge"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn toy_config() -> TrainConfig {
    let mut cfg = TrainConfig::default().toy();
    cfg.gen_width = 4;
    cfg.disc_width = 4;
    cfg.embed_dim = 8;
    cfg.head_hidden = 8;
    cfg.res_blocks = 1;
    cfg
}

struct Fixture {
    config_path: PathBuf,
    checkpoint_path: PathBuf,
    image_path: PathBuf,
}

/// One zero-step training run shared by the read-only tests.
fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli_fixture");
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let config_path = dir.join("config.txt");
        std::fs::write(&config_path, toy_config().to_text()).unwrap();
        let image_path = dir.join("input.ppm");
        image::write_ppm(&image_path, &SyntheticDomainPair::new(16).sample_x(42)).unwrap();
        let out = pge(&[
            "train",
            "--config",
            config_path.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "fixture train failed: {}", stderr(&out));
        Fixture {
            config_path,
            checkpoint_path: dir.join("checkpoint.pge"),
            image_path,
        }
    })
}

#[test]
fn help_prints_every_subcommand_and_exits_zero() {
    let out = pge(&["--help"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    for cmd in ["train", "translate", "graph-spectral", "pool-attn", "gradcheck"] {
        assert!(text.contains(cmd), "--help lists {cmd}");
    }
}

#[test]
fn unknown_flags_and_subcommands_exit_two() {
    let out = pge(&["train", "--frobnicate", "1", "--out", "x"]);
    assert_eq!(code(&out), 2);
    let out = pge(&["no-such-command"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_inputs_exit_two_and_name_the_path() {
    let out = pge(&["train", "--config", "/nonexistent/c.txt", "--out", "/tmp/x"]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("config file not found") && err.contains("/nonexistent/c.txt"));

    let out = pge(&[
        "translate",
        "--checkpoint",
        "/nonexistent/ck.pge",
        "--in",
        "/nonexistent/i.ppm",
        "--out",
        "/tmp/o.ppm",
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("checkpoint not found: /nonexistent/ck.pge"));

    let fx = fixture();
    let out = pge(&[
        "translate",
        "--checkpoint",
        fx.checkpoint_path.to_str().unwrap(),
        "--config",
        fx.config_path.to_str().unwrap(),
        "--in",
        "/nonexistent/i.ppm",
        "--out",
        "/tmp/o.ppm",
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("input image not found: /nonexistent/i.ppm"));
}

#[test]
fn a_zero_step_run_dumps_the_seeded_init_byte_identically() {
    let fx = fixture();
    let scratch = tempfile::tempdir().unwrap();
    let again = scratch.path().join("again");
    let out = pge(&[
        "train",
        "--config",
        fx.config_path.to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);

    let first = std::fs::read(&fx.checkpoint_path).unwrap();
    let second = std::fs::read(again.join("checkpoint.pge")).unwrap();
    assert_eq!(first, second, "same config and seeds, same bytes");

    // And both must equal a direct dump of the seeded initialization.
    let mut store = ParamStore::new();
    Model::build(&toy_config(), &mut store);
    let direct = scratch.path().join("direct.pge");
    checkpoint::save(&store, &direct).unwrap();
    assert_eq!(first, std::fs::read(&direct).unwrap());
}

#[test]
fn translate_is_deterministic_and_writes_a_valid_ppm() {
    let fx = fixture();
    let scratch = tempfile::tempdir().unwrap();
    let (a, b) = (scratch.path().join("a.ppm"), scratch.path().join("b.ppm"));
    for out_path in [&a, &b] {
        let out = pge(&[
            "translate",
            "--checkpoint",
            fx.checkpoint_path.to_str().unwrap(),
            "--config",
            fx.config_path.to_str().unwrap(),
            "--in",
            fx.image_path.to_str().unwrap(),
            "--out",
            out_path.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    assert!(bytes.starts_with(b"P6\n16 16\n255\n"));
    let img = image::read_ppm(&a).unwrap();
    assert_eq!(img.shape(), &[3, 16, 16]);
    assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn an_incompatible_checkpoint_exits_two_listing_every_mismatch() {
    let fx = fixture();
    let scratch = tempfile::tempdir().unwrap();
    let mut wrong = toy_config();
    wrong.embed_dim = 16;
    let wrong_path = scratch.path().join("wrong.txt");
    std::fs::write(&wrong_path, wrong.to_text()).unwrap();

    let out = pge(&[
        "translate",
        "--checkpoint",
        fx.checkpoint_path.to_str().unwrap(),
        "--config",
        wrong_path.to_str().unwrap(),
        "--in",
        fx.image_path.to_str().unwrap(),
        "--out",
        scratch.path().join("o.ppm").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("checkpoint error") && err.contains("mismatch(es)"));
    assert!(err.contains("file shape"), "lists shape conflicts: {err}");
}

#[test]
fn malformed_ppm_inputs_exit_two_with_a_byte_offset() {
    let fx = fixture();
    let scratch = tempfile::tempdir().unwrap();

    let bad_header = scratch.path().join("bad_header.ppm");
    std::fs::write(&bad_header, b"P6\n16 bogus\n255\n").unwrap();
    let bad_payload = scratch.path().join("short.ppm");
    std::fs::write(&bad_payload, b"P6\n2 2\n255\nabcde").unwrap();

    for bad in [&bad_header, &bad_payload] {
        let out = pge(&[
            "translate",
            "--checkpoint",
            fx.checkpoint_path.to_str().unwrap(),
            "--config",
            fx.config_path.to_str().unwrap(),
            "--in",
            bad.to_str().unwrap(),
            "--out",
            scratch.path().join("o.ppm").to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 2);
        assert!(
            stderr(&out).contains("image error at byte"),
            "offset reported: {}",
            stderr(&out)
        );
    }
}

#[test]
fn graph_spectral_and_pool_attn_emit_their_documented_files() {
    let fx = fixture();
    let scratch = tempfile::tempdir().unwrap();
    let spectral_dir = scratch.path().join("spec");
    let out = pge(&[
        "graph-spectral",
        "--checkpoint",
        fx.checkpoint_path.to_str().unwrap(),
        "--config",
        fx.config_path.to_str().unwrap(),
        "--in",
        fx.image_path.to_str().unwrap(),
        "--layer",
        "1",
        "--k",
        "2",
        "--out",
        spectral_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("zero eigenvalues"));
    let first_map = std::fs::read_to_string(spectral_dir.join("eigenmap_0.csv")).unwrap();
    assert!(first_map.starts_with("eigen_rank,eigenvalue\n0,"));
    assert!(spectral_dir.join("eigenmap_0.pgm").exists());

    let attn_dir = scratch.path().join("attn");
    let out = pge(&[
        "pool-attn",
        "--checkpoint",
        fx.checkpoint_path.to_str().unwrap(),
        "--config",
        fx.config_path.to_str().unwrap(),
        "--in",
        fx.image_path.to_str().unwrap(),
        "--out",
        attn_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for layer in 0..3 {
        let csv =
            std::fs::read_to_string(attn_dir.join(format!("attn_layer{layer}.csv"))).unwrap();
        assert!(csv.starts_with("node_index,grid_row,grid_col,sigma_in,sigma_out\n"));
        for tag in ["in", "out"] {
            assert!(attn_dir.join(format!("attn_layer{layer}_{tag}.pgm")).exists());
        }
    }
}

#[test]
fn an_invalid_config_value_exits_two() {
    let scratch = tempfile::tempdir().unwrap();
    let cfg_path = scratch.path().join("bad.txt");
    let mut cfg = toy_config();
    cfg.keep_ratio = 0.0;
    std::fs::write(&cfg_path, cfg.to_text()).unwrap();
    let out = pge(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        scratch.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("keep_ratio"));
}
