use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gazecast::data::{dataset_digest, read_dataset, read_dataset_modalities};
use gazecast::eval::predict;
use gazecast::heads::argmax_index;
use gazecast::pgm::{Gray, PRED_MARK};
use gazecast::ModalityId;
use serde_json::Value;
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gazecast"))
        .args(args)
        .env("GAZECAST_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SPEC: &str = "resolution = 64\nrng_seed = 3\ninout = true\np_out = 0.25\n";

const CONFIG: &str = "variant = \"multimodal\"
dtype = \"f64\"
seed = 2
model.input_resolution = 64
model.heatmap_resolution = 64
model.widths = [4, 8, 8]
model.feature_channels = 4
model.fused_channels = 4
model.embedding_size = 6
model.crop_resolution = 8
model.gaze_widths = [4, 4]
model.inout_head = true
train.epochs = 1
train.batch_size = 4
train.lr = 1e-3
";

struct Run {
    dir: TempDir,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("spec.toml"), SPEC).unwrap();
        fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn gen(&self, count: usize, test_fraction: Option<&str>) {
        let (spec, data) = (self.path("spec.toml"), self.path("data"));
        let n = count.to_string();
        let mut args = vec!["gen", "--spec", s(&spec), "--out", s(&data), "--count", &n];
        if let Some(f) = test_fraction {
            args.extend(["--test-fraction", f]);
        }
        ok(&args);
    }

    fn train(&self, out: &str) -> PathBuf {
        let (cfg, data, ckpt) = (self.path("run.toml"), self.path("data/train"), self.path(out));
        ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt)]);
        ckpt
    }
}

#[test]
fn gen_zero_samples_is_a_valid_dataset() {
    let r = Run::new();
    r.gen(0, None);
    assert!(read_dataset(&r.path("data")).unwrap().is_empty());
}

#[test]
fn gen_is_deterministic() {
    let r = Run::new();
    let spec = r.path("spec.toml");
    for d in ["a", "b"] {
        ok(&["gen", "--spec", s(&spec), "--out", s(&r.path(d)), "--count", "6"]);
    }
    assert_eq!(dataset_digest(&r.path("a")).unwrap(), dataset_digest(&r.path("b")).unwrap());
}

#[test]
fn train_eval_infer_round() {
    let r = Run::new();
    r.gen(20, Some("0.25"));
    let ckpt = r.train("m.ckpt");
    assert!(r.path("m.loss.csv").exists());
    let again = r.train("again.ckpt");
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&again).unwrap());

    let test = r.path("data/test");
    let (report, dump) = (r.path("report.json"), r.path("dump.jsonl"));
    ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&test), "--report", s(&report), "--dump", s(&dump)]);
    let rep: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let lines: Vec<Value> = fs::read_to_string(&dump)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let n_test = read_dataset(&test).unwrap().len();
    assert_eq!(lines.len(), n_test);
    assert_eq!(rep["n_samples"].as_u64().unwrap() as usize, n_test);
    let hash = rep["config_hash"].as_str().unwrap();
    assert!(lines.iter().all(|l| l["config_hash"] == hash));
    for m in ["raw", "depth", "pose"] {
        let mean = lines.iter().map(|l| l["attention"][m].as_f64().unwrap()).sum::<f64>() / n_test as f64;
        assert!((mean - rep["attention"][m].as_f64().unwrap()).abs() < 1e-9, "{m}");
    }

    let wrong = run(&[
        "eval", "--ckpt", s(&ckpt), "--data", s(&test), "--report", s(&report), "--variant", "pose_only",
    ]);
    assert_eq!(wrong.status.code(), Some(3));

    let id = lines[0]["sample_id"].as_u64().unwrap().to_string();
    let (a, b) = (r.path("render_a"), r.path("render_b"));
    for dir in [&a, &b] {
        ok(&["infer", "--ckpt", s(&ckpt), "--data", s(&test), "--sample", &id, "--render", s(dir)]);
    }
    for f in ["cone.pgm", "heatmap.pgm", "overlay.pgm"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let heat = Gray::decode(&fs::read(a.join("heatmap.pgm")).unwrap()).unwrap();
    assert_eq!((heat.width, heat.height), (64, 64));

    let model = gazecast::checkpoint::load_checkpoint::<f64>(&ckpt).unwrap();
    let samples = read_dataset_modalities(&test, &[ModalityId::Raw, ModalityId::Depth, ModalityId::Pose]).unwrap();
    let sample = samples.iter().find(|x| x.sample_id.to_string() == id).unwrap();
    let want = argmax_index(&predict(&model, std::slice::from_ref(sample)).unwrap().heatmaps[0]);
    let overlay = Gray::decode(&fs::read(a.join("overlay.pgm")).unwrap()).unwrap();
    let marked: Vec<usize> = (0..overlay.pixels.len()).filter(|&i| overlay.pixels[i] == PRED_MARK).collect();
    assert_eq!(marked, vec![want]);

    let missing = run(&["infer", "--ckpt", s(&ckpt), "--data", s(&test), "--sample", "999999", "--render", s(&a)]);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn init_flag_seeds_the_multimodal_model() {
    let r = Run::new();
    r.gen(8, Some("0.25"));
    fs::write(r.path("image.toml"), CONFIG.replace("multimodal", "image_only")).unwrap();
    let (data, src) = (r.path("data/train"), r.path("image.ckpt"));
    ok(&["train", "--config", s(&r.path("image.toml")), "--data", s(&data), "--out", s(&src)]);
    let out = ok(&[
        "train", "--config", s(&r.path("run.toml")), "--data", s(&data), "--out", s(&r.path("mm.ckpt")), "--init",
        s(&src),
    ]);
    assert!(out.contains("initialized"), "{out}");

    fs::write(r.path("privacy.toml"), CONFIG.replace("multimodal", "privacy")).unwrap();
    let bad = run(&[
        "train", "--config", s(&r.path("privacy.toml")), "--data", s(&data), "--out", s(&r.path("p.ckpt")), "--init",
        s(&src),
    ]);
    assert!(!bad.status.success());
}

#[test]
fn exit_codes() {
    let grad = run(&["check", "--suite", "grad"]);
    assert_eq!(grad.status.code(), Some(0), "{}", String::from_utf8_lossy(&grad.stdout));
    assert!(String::from_utf8_lossy(&grad.stdout).contains("max error"));

    let corrupt = run(&["check", "--suite", "grad", "--corrupt-conv-backward"]);
    assert_eq!(corrupt.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&corrupt.stderr).contains("conv2d"));

    assert_eq!(run(&["gen", "--bogus"]).status.code(), Some(1));

    let r = Run::new();
    let missing = r.path("nowhere");
    let out = run(&[
        "train", "--config", s(&r.path("run.toml")), "--data", s(&missing), "--out", s(&r.path("x.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(3));

    fs::write(r.path("bad.toml"), "variant = \"no_modrop\"\ntrain.p_drop = 0.3\n").unwrap();
    let out = run(&["train", "--config", s(&r.path("bad.toml")), "--data", s(&missing), "--out", s(&r.path("x.ckpt"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn nan_loss_exits_diverged() {
    let r = Run::new();
    r.gen(8, Some("0.25"));
    fs::write(r.path("hot.toml"), CONFIG.replace("train.lr = 1e-3", "train.lr = 1e300")).unwrap();
    let out = run(&[
        "train", "--config", s(&r.path("hot.toml")), "--data", s(&r.path("data/train")), "--out", s(&r.path("h.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(!r.path("h.ckpt").exists());
}
