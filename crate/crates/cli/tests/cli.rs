//! Drives the `repgan` binary end to end on the 256-image fixture.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

/// Small network on the fixture, used as both train and test split.
fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let f = fixtures();
    let images = f.join("mnist-256-images-idx3-ubyte.gz");
    let labels = f.join("mnist-256-labels-idx1-ubyte.gz");
    let text = format!(
        r#"
[arch]
conv_widths = [4, 8]
fc_width = 32
critic_width = 32

[train]
batch_size = 32
max_steps = 8
checkpoint_every = 4
seed = 3

[data]
train_images = "{i}"
train_labels = "{l}"
test_images = "{i}"
test_labels = "{l}"

[eval]
batch_size = 128
latent_samples = 64
{extra}
"#,
        i = images.display(),
        l = labels.display()
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn repgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_repgan")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn error_line(o: &Output) -> serde_json::Value {
    let line = stderr(o).lines().last().unwrap().to_string();
    serde_json::from_str(&line).unwrap_or_else(|_| panic!("not a JSON error line: {line}"))
}

#[test]
fn train_then_inspect() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let run = tmp.path().join("run");
    let o = repgan(&["train", "--config", s(&cfg), "--run-dir", s(&run), "--model", "repgan", "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    for f in ["config.toml", "run.json", "metrics.csv", "latest.ckpt", "checkpoints/step-00000004.ckpt", "checkpoints/step-00000008.ckpt"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let info: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(info["seed"], 7);
    assert!(!info["source_revision"].as_str().unwrap().is_empty());
    let provenance = info["data_provenance"].as_array().unwrap();
    assert_eq!(provenance.len(), 2);
    assert_eq!(provenance[0]["md5"].as_str().unwrap().len(), 32);
    assert!(fs::read_to_string(run.join("config.toml")).unwrap().contains("seed = 7"));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "step,phase,adv_c,adv_s,adv_n,adv_x,rec_x,rec_c,rec_s,wall_clock_s");
    assert_eq!(lines.len(), 9);
    assert!(lines[1].starts_with("0,x-Rep-x,") && lines[2].starts_with("1,Rep-x-Rep,"));

    let ck = run.join("latest.ckpt");
    let out = tmp.path().join("eval");
    let o = repgan(&["eval", "--checkpoint", s(&ck), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = String::from_utf8_lossy(&o.stdout);
    for k in ["accuracy", "recon_mse", "latent_mse"] {
        assert!(summary.contains(k), "{summary}");
    }
    let csv = fs::read_to_string(out.join("eval.csv")).unwrap();
    let acc: f64 = csv
        .lines()
        .find_map(|l| l.strip_prefix("accuracy,"))
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let png = tmp.path().join("gen.png");
    assert_eq!(code(&repgan(&["generate", "--checkpoint", s(&ck), "--count", "10", "--cols", "4", "--out", s(&png)])), 0);
    assert_eq!(&fs::read(&png).unwrap()[1..4], b"PNG");

    let pgm = tmp.path().join("rec.pgm");
    assert_eq!(code(&repgan(&["reconstruct", "--checkpoint", s(&ck), "--count", "3", "--out", s(&pgm)])), 0);
    // 3 rows x 2 columns of 28px tiles with 2px separators
    assert!(fs::read(&pgm).unwrap().starts_with(b"P5\n62 92\n255\n"));

    let a = tmp.path().join("a.png");
    let b = tmp.path().join("b.png");
    for p in [&a, &b] {
        let o = repgan(&["traverse", "--checkpoint", s(&ck), "--vary", "c", "--steps", "8", "--out", s(p)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let o = repgan(&["traverse", "--checkpoint", s(&ck), "--vary", "n", "--dims", "0,1", "--out", s(&a)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = repgan(&["traverse", "--checkpoint", s(&ck), "--vary", "s", "--category", "10", "--out", s(&a)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn resume_continues_the_same_trajectory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let straight = tmp.path().join("straight");
    let o = repgan(&["train", "--config", s(&cfg), "--run-dir", s(&straight), "--max-steps", "6"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let split = tmp.path().join("split");
    let o = repgan(&["train", "--config", s(&cfg), "--run-dir", s(&split), "--max-steps", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ck = split.join("latest.ckpt");
    let o = repgan(&["train", "--config", s(&cfg), "--run-dir", s(&split), "--max-steps", "6", "--resume", s(&ck)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let a = repgan_cli::checkpoint::load::<f32>(&straight.join("latest.ckpt")).unwrap();
    let b = repgan_cli::checkpoint::load::<f32>(&split.join("latest.ckpt")).unwrap();
    assert_eq!(a.state.step, 6);
    use repgan::nn::Module;
    assert_eq!(a.state.params.checksum(), b.state.params.checksum());
    assert_eq!(a.state.rng, b.state.rng);
    let rows = fs::read_to_string(split.join("metrics.csv")).unwrap().lines().count();
    assert_eq!(rows, 7);

    // a different seed changes the config hash
    let o = repgan(&["train", "--config", s(&cfg), "--run-dir", s(&split), "--seed", "4", "--resume", s(&ck)]);
    assert_eq!(code(&o), 2);
    let o = repgan(&["train", "--config", s(&cfg), "--run-dir", s(&split), "--seed", "4", "--resume", s(&ck), "--force"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn sweep_writes_fifteen_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("sweep.csv");
    let o = repgan(&[
        "sweep-latent", "--config", s(&cfg), "--set", "train.max_steps=2", "--dims", "2,8,16,32,64",
        "--models", "x-rep-x,rep-x-rep,repgan", "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "model,dim,latent_mse,recon_mse,steps,seed");
    assert_eq!(lines.len(), 16);
    assert!(lines[1].starts_with("x-rep-x,2,") && lines[15].starts_with("repgan,64,"));
}

#[test]
fn failures_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();

    let cfg = write_config(tmp.path(), "bogus = 1");
    let o = repgan(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 2);
    assert_eq!(error_line(&o)["error"], "config");

    let o = repgan(&["eval", "--checkpoint", s(&tmp.path().join("nope.ckpt"))]);
    assert_eq!(code(&o), 5);
    assert_eq!(error_line(&o)["exit_code"], 5);

    let junk = tmp.path().join("junk.gz");
    fs::write(&junk, b"not an archive").unwrap();
    let cfg = write_config(tmp.path(), "");
    let o = repgan(&[
        "train", "--config", s(&cfg), "--run-dir", s(&tmp.path().join("r")),
        "--set", &format!("data.train_images=\"{}\"", junk.display()),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert_eq!(error_line(&o)["error"], "data");

    let run = tmp.path().join("div");
    let o = repgan(&[
        "train", "--config", s(&cfg), "--run-dir", s(&run), "--max-steps", "60",
        "--set", "train.lr_generators=1e30", "--set", "train.lr_dx=1e30", "--set", "train.checkpoint_every=1",
    ]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert_eq!(error_line(&o)["error"], "divergence");
    assert!(run.join("divergence.json").exists());

    assert_eq!(code(&repgan(&["train", "--model", "gan"])), 2);
    assert_eq!(code(&repgan(&["verify-bounds", "--trials", "20"])), 0);
    assert_eq!(code(&repgan(&["verify-bounds", "--max-alphabet", "65"])), 2);
}
