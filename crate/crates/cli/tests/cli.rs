use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_gnsp");

fn gnsp(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A short two-task run that exercises every output.
const SMALL: &str = r#"
[trainer]
iterations_per_task = 20
batch_size = 16
rho = 0.1

[pretrain]
iterations = 50
corpus_size = 200

[tasks]
count = 2
per_class = 20

[reference]
size = 64

[probes]
size = 64

[output]
embeddings = true
plots = true
recall_k = [1, 5]
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn run_writes_outputs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = gnsp(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for name in [
        "accuracy_matrix.csv",
        "summary.csv",
        "gap.csv",
        "recall.csv",
        "spectra.csv",
    ] {
        let x = fs::read(a.join(name)).unwrap();
        assert_eq!(x, fs::read(b.join(name)).unwrap(), "{name}");
    }
    let acc = fs::read_to_string(a.join("accuracy_matrix.csv")).unwrap();
    assert_eq!(acc.lines().next().unwrap(), "after_task,task1,task2");
    assert_eq!(acc.lines().count(), 4);
    let recall = fs::read_to_string(a.join("recall.csv")).unwrap();
    assert_eq!(recall.lines().count(), 3);
    assert!(a.join("final.ckpt").exists());
    assert!(a.join("effective_config.toml").exists());
    assert!(a.join("run.log").exists());
    assert!(fs::read_dir(&a)
        .unwrap()
        .any(|e| e.unwrap().path().extension().is_some_and(|x| x == "svg")));
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(
        gnsp(&["run", "--config", &cfg, "--out", a.to_str().unwrap(), "--seed", "3"])
            .status
            .success()
    );
    assert!(
        gnsp(&["run", "--config", &cfg, "--out", b.to_str().unwrap(), "--seed", "4"])
            .status
            .success()
    );
    let eff = fs::read_to_string(a.join("effective_config.toml")).unwrap();
    assert!(eff.contains("seed = 3"));
    assert_ne!(
        fs::read(a.join("gap.csv")).unwrap(),
        fs::read(b.join("gap.csv")).unwrap()
    );
}

#[test]
fn invalid_rho_exits_2_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[trainer]\nbatch_size = 8\nrho = 1.5\n");
    let o = gnsp(&["run", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("trainer.rho") && err.contains("line 3"), "{err}");
}

#[test]
fn unknown_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[trainer]\nlearning_rat = 0.1\n");
    let o = gnsp(&["run", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rat"));
}

#[test]
fn selftest_passes_and_negative_control_fails() {
    let o = gnsp(&["selftest"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(!String::from_utf8_lossy(&o.stdout).contains("FAIL"));

    let o = gnsp(&["selftest", "--perturb-projector"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL projector: idempotence"));
}

#[test]
fn plot_rejects_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("empty.csv");
    fs::write(&input, "").unwrap();
    let o = gnsp(&[
        "plot",
        "--in",
        input.to_str().unwrap(),
        "--out",
        dir.path().join("x.svg").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn plot_reports_malformed_row() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.csv");
    fs::write(&input, "x,y\n0,1\n1,oops\n").unwrap();
    let o = gnsp(&[
        "plot",
        "--in",
        input.to_str().unwrap(),
        "--out",
        dir.path().join("x.svg").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("row 3"), "{}", stderr(&o));
}

#[test]
fn plot_two_point_series() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("s.csv");
    let out = dir.path().join("s.svg");
    fs::write(&input, "x,y\n0,1\n1,2\n").unwrap();
    let o = gnsp(&["plot", "--in", input.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = fs::read_to_string(out).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 1);
}

#[test]
fn plot_gap_csv_has_one_series_per_probe() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("gap.csv");
    let out = dir.path().join("gap.svg");
    fs::write(
        &input,
        "checkpoint,probe,gap\n0,probe,0.7\n0,task1,0.1\n1,probe,0.69\n1,task1,0.4\n2,probe,0.68\n2,task1,0.45\n",
    )
    .unwrap();
    assert!(
        gnsp(&["plot", "--in", input.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .status
            .success()
    );
    assert_eq!(fs::read_to_string(out).unwrap().matches("<polyline").count(), 2);
}

#[test]
fn eval_and_export_embeddings_read_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    assert!(gnsp(&["run", "--config", &cfg, "--out", out.to_str().unwrap()])
        .status
        .success());
    let ckpt = out.join("final.ckpt");

    let o = gnsp(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("metric,name,value"));
    // the evaluated accuracies match the last row of the run's grid
    let grid = fs::read_to_string(out.join("accuracy_matrix.csv")).unwrap();
    let last_row: Vec<&str> = grid.lines().last().unwrap().split(',').skip(1).collect();
    let evaluated: Vec<&str> = text
        .lines()
        .filter(|l| l.starts_with("accuracy,"))
        .map(|l| l.rsplit(',').next().unwrap())
        .collect();
    assert_eq!(evaluated, last_row);
    assert!(text.contains("recall@5,"));

    let emb = dir.path().join("emb.csv");
    let o = gnsp(&[
        "export-embeddings",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--probe",
        "probe",
        "--out",
        emb.to_str().unwrap(),
        "--config",
        &cfg,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(&emb).unwrap();
    assert!(csv.starts_with("index,modality,e0,"));
    // 64 probe pairs, both modalities
    assert_eq!(csv.lines().count(), 1 + 2 * 64);

    let o = gnsp(&[
        "export-embeddings",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--probe",
        "nope",
        "--out",
        emb.to_str().unwrap(),
        "--config",
        &cfg,
    ]);
    assert!(!o.status.success());
}

#[test]
fn corrupted_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.ckpt");
    fs::write(&ckpt, b"GNSPnot really a checkpoint").unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = gnsp(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn rerunning_from_the_effective_config_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(
        gnsp(&["run", "--config", &cfg, "--out", a.to_str().unwrap(), "--seed", "9"])
            .status
            .success()
    );
    let effective = a.join("effective_config.toml");
    assert!(gnsp(&[
        "run",
        "--config",
        effective.to_str().unwrap(),
        "--out",
        b.to_str().unwrap()
    ])
    .status
    .success());
    for name in ["accuracy_matrix.csv", "gap.csv", "summary.csv"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
}
