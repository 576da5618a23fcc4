use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use geoparam::cli::checkpoint::load_checkpoint;
use geoparam::cli::runner::read_manifest;
use geoparam::cli::ExperimentConfig;
use geoparam::data::gen_levy;
use geoparam::model::{Model, MlpSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn geoparam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geoparam"))
        .args(args)
        .env_remove("GEOPARAM_THREADS")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn levy_smoke(out: &Path) -> Output {
    geoparam(&["preset", "levy-gmp", "--epochs", "20", "--seed", "7", "--out", out.to_str().unwrap()])
}

#[test]
fn levy_preset_writes_its_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("levy");
    let o = levy_smoke(&out);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["metrics.csv", "stability.csv", "trace.csv", "results.csv", "manifest.txt", "config.txt", "checkpoint.bin"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,train_loss,test_metric,lr\n"));
    assert_eq!(metrics.lines().count(), 21);
    let stability = fs::read_to_string(out.join("stability.csv")).unwrap();
    assert_eq!(stability.lines().count(), 21, "one row per step");

    let manifest = read_manifest(&out.join("manifest.txt")).unwrap();
    assert_eq!(manifest["manifest.status"], "ok");
    assert_eq!(manifest["manifest.param_count"], "301");
    assert_eq!(manifest["manifest.metric"], "rmse");
}

#[test]
fn same_seed_reproduces_metrics_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(levy_smoke(&a).status.success());
    assert!(levy_smoke(&b).status.success());
    for f in ["metrics.csv", "stability.csv", "trace.csv", "checkpoint.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn checkpoint_reloads_into_the_configured_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert!(levy_smoke(&out).status.success());
    let cfg = ExperimentConfig::from_file(&out.join("config.txt")).unwrap();
    assert_eq!(cfg.run.epochs, 20);
    let spec = MlpSpec::mlp(1, &cfg.model.hidden, 1, cfg.model.param, cfg.dataset.loss(), 99);
    let mut model = Model::from_seed(spec).unwrap();
    load_checkpoint(&mut model, &out.join("checkpoint.bin")).unwrap();

    // The restored net reproduces the reported final test RMSE.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    let _train = gen_levy(256, 0.5, (-10.0, 10.0), &mut rng).unwrap();
    let test = gen_levy(256, 0.5, (-10.0, 10.0), &mut rng).unwrap();
    let rmse = geoparam::train::evaluate(&model, &test).unwrap();
    let manifest = read_manifest(&out.join("manifest.txt")).unwrap();
    let reported: f64 = manifest["manifest.test_metric_mean"].parse().unwrap();
    assert_eq!(rmse, reported);
}

#[test]
fn print_shows_a_config_that_parses_back() {
    let o = geoparam(&["preset", "banana", "--param", "bn", "--grid", "--print"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let cfg = ExperimentConfig::parse(&text).unwrap();
    assert_eq!(cfg.to_text(), text);
    assert!(text.contains("model.param = bn\n"));
    assert!(matches!(cfg.optim.lr, geoparam::cli::LrChoice::Grid(ref g) if g.len() == 6), "{text}");
}

#[test]
fn invalid_parameterization_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    let text = geoparam(&["preset", "levy", "--print"]).stdout;
    let text = String::from_utf8(text).unwrap().replace("model.param = gmp", "model.param = sigmoid");
    fs::write(&path, text).unwrap();
    let o = geoparam(&["run", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.param"), "{}", stderr(&o));

    let o = geoparam(&["preset", "levy", "--param", "sigmoid"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.param"));
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("typo.cfg");
    let text = String::from_utf8(geoparam(&["preset", "levy", "--print"]).stdout).unwrap();
    fs::write(&path, text + "run.epoch = 3\n").unwrap();
    let o = geoparam(&["run", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("run.epoch"), "{}", stderr(&o));
}

#[test]
fn every_split_diverging_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("boom");
    let path = dir.path().join("boom.cfg");
    let text = String::from_utf8(geoparam(&["preset", "levy-sp", "--epochs", "50", "--print"]).stdout).unwrap();
    let text = text
        .replace("optim.kind = adam\noptim.beta1 = 0.9\noptim.beta2 = 0.999\noptim.eps = 0.00000001\n", "optim.kind = sgd\noptim.momentum = 0\n")
        .replace("optim.lr = 0.01", "optim.lr = 1000")
        .replace("output.dir = runs/levy-sp", &format!("output.dir = {}", out.display()));
    fs::write(&path, text).unwrap();
    let o = geoparam(&["run", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let manifest = read_manifest(&out.join("manifest.txt")).unwrap();
    assert_eq!(manifest["manifest.status"], "all_lr_diverged");
    assert_ne!(manifest["manifest.split.0.diverged_at"], "none");
}

#[test]
fn io_failures_exit_4() {
    let o = geoparam(&["run", "/nonexistent/geoparam.cfg"]);
    assert_eq!(o.status.code(), Some(4));

    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let out = blocker.join("run");
    let o = geoparam(&["preset", "levy", "--epochs", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn gradcheck_and_perturb_demo_succeed() {
    let o = geoparam(&["gradcheck", "--seed", "3"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 3, "{text}");

    let o = geoparam(&["perturb-demo"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("param,epsilon,"));
    assert_eq!(text.lines().count(), 13);
}
