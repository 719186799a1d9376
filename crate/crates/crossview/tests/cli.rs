use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crossview::tnsr;
use crossview_core::geocalib::GeocalibResult;

const SMALL: &str = "\
data.scenes = 6
train.epochs = 1
finetune.steps = 3
finetune.images = 2
geocal.grid = 3
geocal.step = 4
render.scale = 2
";

fn crossview(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossview"))
        .args(args)
        .env_remove("CROSSVIEW_CONFIG")
        .output()
        .unwrap()
}

#[track_caller]
fn ok(args: &[&str]) -> String {
    let out = crossview(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    crossview(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Sorted (name, bytes) of every file in a directory.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    train: PathBuf,
    test: PathBuf,
    ckpt: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let config = root.join("small.conf");
    fs::write(&config, SMALL).unwrap();
    let (train, test, run) = (root.join("train"), root.join("test"), root.join("run"));
    let c = s(&config);
    ok(&["gen-data", "--config", c, "--out", s(&train)]);
    ok(&["gen-data", "--config", c, "--out", s(&test), "--split", "test", "--random-orientation", "true"]);
    ok(&["train", "--config", c, "--data", s(&train), "--eval", s(&test), "--out", s(&run)]);
    let ckpt = run.join("model.ckpt");
    Fixture {
        _tmp: tmp,
        root,
        config,
        train,
        test,
        ckpt,
    }
}

#[test]
fn pipeline_writes_outputs_and_leaves_inputs_alone() {
    let f = fixture();
    let c = s(&f.config);
    let run = f.ckpt.parent().unwrap();
    for name in ["model.ckpt", "train_log.txt", "config.txt"] {
        assert!(run.join(name).is_file(), "{name}");
    }
    let before = (snapshot(&f.test), fs::read(&f.ckpt).unwrap());

    let m1 = ok(&["evaluate", "--config", c, "--checkpoint", s(&f.ckpt), "--data", s(&f.test)]);
    let m2 = ok(&["evaluate", "--config", c, "--checkpoint", s(&f.ckpt), "--data", s(&f.test), "--threads", "3"]);
    assert_eq!(m1, m2);
    assert!(m1.starts_with("pixels=") && m1.contains("accuracy="), "{m1}");

    let pg = f.root.join("pg");
    let rows = ok(&[
        "predict-ground", "--config", c, "--checkpoint", s(&f.ckpt), "--data", s(&f.test), "--index", "1", "--out", s(&pg),
    ]);
    assert_eq!(rows.lines().count(), 4 * 16);
    let g = tnsr::decode::<f32>(&fs::read(pg.join("ground.tnsr")).unwrap()).unwrap();
    assert_eq!(g.shape(), [4, 16, 4]);
    assert!(fs::read(pg.join("ground.ppm")).unwrap().starts_with(b"P6\n"));
    assert_eq!(fs::read_to_string(pg.join("config.txt")).unwrap(), fs::read_to_string(run.join("config.txt")).unwrap());

    let sa = f.root.join("sa");
    ok(&["segment-aerial", "--config", c, "--checkpoint", s(&f.ckpt), "--data", s(&f.test), "--index", "0", "--out", s(&sa)]);
    let a = tnsr::decode::<f32>(&fs::read(sa.join("aerial.tnsr")).unwrap()).unwrap();
    assert_eq!(a.shape(), [8, 8, 4]);

    for mode in ["raw", "cellgrid"] {
        let rt = f.root.join(format!("rt_{mode}"));
        ok(&[
            "render-transform", "--config", c, "--checkpoint", s(&f.ckpt), "--data", s(&f.test), "--index", "0", "--mode", mode,
            "--out", s(&rt),
        ]);
        assert!(rt.join(format!("transform_{mode}.ppm")).is_file());
    }

    let ft = f.root.join("ft");
    let fm = ok(&[
        "finetune", "--config", c, "--data", s(&f.train), "--init", "pretrained", "--checkpoint", s(&f.ckpt), "--eval",
        s(&f.test), "--out", s(&ft),
    ]);
    assert!(fm.contains("mean_precision="), "{fm}");
    assert!(ft.join("model.ckpt").is_file());

    assert_eq!((snapshot(&f.test), fs::read(&f.ckpt).unwrap()), before);
}

#[test]
fn geocalibration_outputs_agree() {
    let f = fixture();
    let c = s(&f.config);
    let gc = f.root.join("gc");
    ok(&["geocalibrate", "--config", c, "--checkpoint", s(&f.ckpt), "--synthetic-seed", "7", "--out", s(&gc)]);
    let text = fs::read_to_string(gc.join("geocal.txt")).unwrap();
    let r = GeocalibResult::from_text(&text).unwrap();
    assert_eq!(r.grid, (3, 3));
    assert!(gc.join("flowmap.ppm").is_file() && gc.join("truth.txt").is_file());

    // Replaying the saved inputs reproduces the synthetic run.
    let again = f.root.join("gc2");
    ok(&[
        "geocalibrate", "--config", c, "--checkpoint", s(&f.ckpt), "--aerial", s(&gc.join("aerial.tnsr")), "--query",
        s(&gc.join("query.tnsr")), "--out", s(&again), "--threads", "2",
    ]);
    assert_eq!(fs::read_to_string(again.join("geocal.txt")).unwrap(), text);

    // A one-cell grid is the plain orientation estimate.
    let one = f.root.join("one");
    ok(&["geocalibrate", "--config", c, "--checkpoint", s(&f.ckpt), "--synthetic-seed", "3", "--grid", "1", "--out", s(&one)]);
    let eo = f.root.join("eo");
    ok(&[
        "estimate-orientation", "--config", c, "--checkpoint", s(&f.ckpt), "--aerial", s(&one.join("aerial.tnsr")), "--query",
        s(&one.join("query.tnsr")), "--out", s(&eo),
    ]);
    assert_eq!(
        fs::read_to_string(eo.join("orientation.txt")).unwrap(),
        fs::read_to_string(one.join("geocal.txt")).unwrap()
    );

    // Offsets past the image edge are refused.
    let out = crossview(&[
        "geocalibrate", "--config", c, "--checkpoint", s(&f.ckpt), "--aerial", s(&one.join("aerial.tnsr")), "--query",
        s(&one.join("query.tnsr")), "--grid", "3", "--out", s(&f.root.join("bad")),
    ]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("offset"));
}

#[test]
fn gen_data_is_deterministic_and_refuses_to_clobber() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["gen-data", "--out", s(&a), "--scenes", "3", "--seed", "9", "--threads", "2"]);
    ok(&["gen-data", "--out", s(&b), "--scenes", "3", "--seed", "9"]);
    assert_eq!(snapshot(&a), snapshot(&b));
    let manifest = fs::read_to_string(a.join("manifest")).unwrap();
    assert!(manifest.contains("data.seed = 9"), "{manifest}");

    assert_eq!(code(&["gen-data", "--out", s(&a), "--scenes", "1"]), 2);
    ok(&["gen-data", "--out", s(&a), "--scenes", "1", "--force"]);
    assert_eq!(snapshot(&a).len(), 1 + 4);

    let empty = tmp.path().join("empty");
    ok(&["gen-data", "--out", s(&empty), "--scenes", "0"]);
    assert_eq!(code(&["train", "--data", s(&empty), "--epochs", "1", "--out", s(&tmp.path().join("r"))]), 2);
}

#[test]
fn configuration_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = s(tmp.path());
    assert_eq!(code(&["gen-data", "--out", out, "--set", "train.learning_rate=1"]), 2);
    assert_eq!(code(&["gen-data", "--out", out, "--set", "train.lr=fast"]), 2);
    assert_eq!(code(&["verify", "--suite", "everything"]), 2);
    assert_eq!(code(&["no-such-command"]), 2);
    assert_eq!(code(&["gen-data", "--out", out, "--config", s(&tmp.path().join("missing.conf"))]), 1);

    let conf = tmp.path().join("bad.conf");
    fs::write(&conf, "bogus = 1\n").unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_crossview"))
        .args(["gen-data", "--out", s(&tmp.path().join("x"))])
        .env("CROSSVIEW_CONFIG", &conf)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn checkpoint_config_mismatch_is_refused_before_compute() {
    let f = fixture();
    let out = crossview(&[
        "evaluate", "--config", s(&f.config), "--set", "model.d_s=16", "--checkpoint", s(&f.ckpt), "--data", s(&f.test),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.d_s"));
    assert!(out.stdout.is_empty());
}

#[test]
fn verify_reports_one_line_per_check() {
    let out = ok(&["verify", "--suite", "grad"]);
    assert!(!out.is_empty());
    assert!(out.lines().all(|l| l.starts_with("PASS ")), "{out}");
}
