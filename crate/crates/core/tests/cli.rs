//! End-to-end checks of the `mast` binary and its file formats.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mast::harness::{run_pretrain, RunConfig};
use mast::model::{load_checkpoint, restore_params, Mast};
use mast::numerics::Graph;
use mast::ssl::SslModel;

fn mast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mast"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen(dir: &Path, n: usize, test_n: usize) {
    let o = mast(&["gen-synth", "--out", dir.to_str().unwrap(), "--n", &n.to_string(), "--test-n", &test_n.to_string(), "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

/// A config file with paths relative to its own directory.
fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(
        &path,
        format!(
            "# small run\npaths.train_manifest = train.csv\npaths.test_manifest = test.csv\n\
             optim.batch_size = 4\noptim.epochs = 1\nmetrics.every = 1\nmetrics.wall_ms = false\n{extra}"
        ),
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn shapes_prints_the_desk_pyramid() {
    let o = mast(&["shapes"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.trim_end().ends_with("stage,4,4,2,2,256"), "{text}");
    assert!(text.contains("depths  [1, 2, 11, 2]"));
}

#[test]
fn unit_strides_keep_the_token_count() {
    let o = mast(&["shapes", "--model.q_strides", "1,1,1,1", "--model.kv_strides=1,1,1,1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let counts: Vec<String> = stdout(&o)
        .lines()
        .filter(|l| l.starts_with("stage,"))
        .map(|l| l.split(',').nth(2).unwrap().to_string())
        .collect();
    assert_eq!(counts, ["256"; 4]);
}

#[test]
fn config_errors_exit_with_two_and_name_the_stage() {
    let o = mast(&["shapes", "--model.pool_kernel", "5", "--model.pool_padding", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stage 2"), "{}", stderr(&o));
    assert_eq!(mast(&["shapes", "--model.nonsense", "1"]).status.code(), Some(2));
    assert_eq!(mast(&["shapes", "--ssl.tau"]).status.code(), Some(2));
    assert_eq!(mast(&["no-such-command"]).status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_mast")).arg("shapes").env("MAST_THREADS", "0").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_files_and_bad_labels_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 6, 2);
    let cfg = write_config(dir.path(), "");
    let o = mast(&["train", "--config", &cfg, "--paths.train_manifest", "/nonexistent/train.csv"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let o = mast(&["train", "--config", &cfg, "--model.num_classes", "3"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("label id"), "{}", stderr(&o));
}

#[test]
fn fixed_seed_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 8, 4);
    let cfg = write_config(dir.path(), "");
    for run in ["a", "b"] {
        let o = mast(&[
            "train",
            "--config",
            &cfg,
            "--paths.metrics_out",
            dir.path().join(format!("{run}.csv")).to_str().unwrap(),
            "--paths.checkpoint_out",
            dir.path().join(format!("{run}.ckpt")).to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let read = |name: &str| fs::read(dir.path().join(name)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_eq!(read("a.ckpt"), read("b.ckpt"));
    let text = String::from_utf8(read("a.csv")).unwrap();
    assert!(text.starts_with("step,split,loss,accuracy,wall_ms\n1,train,"), "{text}");
    assert!(text.lines().any(|l| l.contains(",test,")));

    let o = mast(&["eval", "--config", &cfg, "--checkpoint", dir.path().join("a.ckpt").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("accuracy"));
}

#[test]
fn zero_learning_rate_keeps_the_loss_constant() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 4, 1);
    let cfg = write_config(dir.path(), "optim.lr = 0\noptim.epochs = 3\npaths.metrics_out = m.csv\n");
    let o = mast(&["train", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("m.csv")).unwrap();
    let losses: Vec<&str> = text
        .lines()
        .filter(|l| l.contains(",train,"))
        .map(|l| l.split(',').nth(2).unwrap())
        .collect();
    assert_eq!(losses.len(), 3);
    assert!(losses.iter().all(|l| *l == losses[0]), "{losses:?}");
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 4, 2);
    let cfg = write_config(dir.path(), "paths.checkpoint_out = c.ckpt\n");
    assert!(mast(&["train", "--config", &cfg]).status.success());
    let path = dir.path().join("c.ckpt");
    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&path, bytes).unwrap();
    let o = mast(&["eval", "--config", &cfg, "--checkpoint", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("checksum"), "{}", stderr(&o));
}

#[test]
fn pretraining_lowers_the_loss_and_round_trips_through_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 32, 8);
    let mut cfg = RunConfig::from_file(Path::new(&write_config(dir.path(), "optim.batch_size = 16\noptim.epochs = 2\n"))).unwrap();
    cfg.paths.checkpoint_out = Some(dir.path().join("p.ckpt"));
    let out = run_pretrain(&cfg).unwrap();
    assert_eq!(out.losses.len(), 4);
    assert!(out.losses[3] < out.losses[0], "{:?}", out.losses);

    let entries = load_checkpoint(&dir.path().join("p.ckpt")).unwrap();
    let (model, mut student) = SslModel::init(&cfg.model, 99).unwrap();
    restore_params(&mut student, &entries, "student/").unwrap();
    let (_, mut teacher) = SslModel::init(&cfg.model, 98).unwrap();
    restore_params(&mut teacher, &entries, "teacher/").unwrap();
    assert!(student.values() == out.student.values() && teacher.values() == out.teacher.values());

    let grid = mast::frontend::patch_rows(
        &mast::frontend::SynthSpec::default().sample(0).unwrap().0,
        cfg.model.patch,
    )
    .unwrap();
    let embed = |ps: &mast::numerics::ParamSet<f32>| {
        let mut g = Graph::new(ps, false);
        let z = model.embed(&mut g, &grid).unwrap();
        g.value(z).clone()
    };
    assert_eq!(embed(&student), embed(&out.student));

    // The probe and fine-tuning read the encoder; eval refuses a headless checkpoint.
    let ckpt = dir.path().join("p.ckpt");
    let cfg_path = dir.path().join("run.cfg");
    let o = mast(&["probe", "--config", cfg_path.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(), "--probe.epochs", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("probe accuracy"));
    let o = mast(&["eval", "--config", cfg_path.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = mast(&["train", "--config", cfg_path.to_str().unwrap(), "--paths.checkpoint_in", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn patch_drop_toggle_is_independent() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), 8, 0);
    let cfg = write_config(dir.path(), "paths.test_manifest =\n");
    for j in ["0", "0.2"] {
        let o = mast(&["pretrain", "--config", &cfg, "--ssl.patch_drop", j]);
        assert!(o.status.success(), "j={j}: {}", stderr(&o));
    }
    let o = mast(&["pretrain", "--config", &cfg, "--optim.batch_size", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn classifier_checkpoint_reproduces_logits_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = mast::model::ModelConfig::desk();
    let (model, params) = Mast::init(&cfg, 4).unwrap();
    let path = dir.path().join("m.ckpt");
    mast::model::save_checkpoint(&path, params.iter()).unwrap();
    let (_, mut loaded) = Mast::init(&cfg, 5).unwrap();
    restore_params(&mut loaded, &load_checkpoint(&path).unwrap(), "").unwrap();
    let grid = mast::frontend::patch_rows(&mast::frontend::SynthSpec::default().sample(7).unwrap().0, cfg.patch).unwrap();
    let logits = |ps: &mast::numerics::ParamSet<f32>| {
        let mut g = Graph::new(ps, false);
        let l = model.logits(&mut g, &grid).unwrap();
        g.value(l).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(logits(&params), logits(&loaded));
}

#[test]
fn featurize_writes_a_loadable_manifest() {
    let src = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    fs::create_dir_all(src.path().join("hum")).unwrap();
    let w = mast::frontend::Waveform::new(vec![0.1; 16_000], 16_000).unwrap();
    fs::write(src.path().join("hum/x.wav"), mast::frontend::encode_wav(&w).unwrap()).unwrap();
    let o = mast(&["featurize", "--wav-dir", src.path().to_str().unwrap(), "--out", out.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = fs::read_to_string(out.path().join("manifest.csv")).unwrap();
    assert_eq!(manifest, "relative_path,label_id\nhum/x.mastf,0\n");
    fs::write(src.path().join("hum/bad.wav"), b"RIFFnope").unwrap();
    let o = mast(&["featurize", "--wav-dir", src.path().to_str().unwrap(), "--out", out.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}
