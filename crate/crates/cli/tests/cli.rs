use std::path::Path;
use std::process::{Command, Output};

fn setnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_setnet"))
        .args(args)
        .arg("--out-dir")
        .arg(dir)
        .env_remove("SETNET_OUT_DIR")
        .output()
        .expect("spawn setnet")
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stdout:\n{}\nstderr:\n{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
}

const SMALL_GRID: [&str; 6] = ["--lets", "20,60", "--vds", "0.6,1.8", "--max-rel-err", "1e-3"];

fn generate_and_train(dir: &Path) {
    let mut g = vec!["generate"];
    g.extend(SMALL_GRID);
    ok(&setnet(dir, &g));
    ok(&setnet(dir, &["train", "--arch", "4x1", "--epochs", "5", "--lm-batch", "300"]));
}

#[test]
fn generate_train_export_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate_and_train(d);
    for f in ["dataset.csv", "dataset.manifest", "model.txt", "train_report.csv"] {
        assert!(d.join(f).is_file(), "{f} missing");
    }
    let header = std::fs::read_to_string(d.join("dataset.csv")).unwrap();
    assert!(header.lines().next().unwrap().contains("split"));

    ok(&setnet(d, &["export"]));
    let va = std::fs::read_to_string(d.join("set_source.va")).unwrap();
    assert!(va.contains("module set_source(p, n);"));
    assert!(va.contains("I(p, n) <+"));

    ok(&setnet(d, &["simulate", "--sim-stop", "4e-10"]));
    let traces: Vec<_> = std::fs::read_dir(d.join("traces")).unwrap().map(|e| e.unwrap().file_name()).collect();
    let csvs = traces.iter().filter(|n| n.to_string_lossy().starts_with("trace_let")).count();
    assert_eq!(csvs, 5, "{traces:?}");
    let summary = std::fs::read_to_string(d.join("simulate_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 6);
}

#[test]
fn bad_architecture_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = setnet(dir.path(), &["train", "--arch", "8xx1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = setnet(dir.path(), &["train", "--transfer", "purelin"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_inputs_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = setnet(dir.path(), &["export", "--model", "nope.txt"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("nope.txt") && err.contains("not found"), "{err}");
    let o = setnet(dir.path(), &["train"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("dataset.csv"));
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        generate_and_train(d);
        ok(&setnet(d, &["export", "--check-points", "10"]));
    }
    for f in ["dataset.csv", "model.txt", "train_report.csv", "set_source.va"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("run.cfg");
    std::fs::write(&cfg, "# small grid\nlets = 20,60\nvds = 0.6,1.8\nmax_rel_err = 1e-3\ndataset = from_config.csv\n").unwrap();
    let cfg = cfg.to_str().unwrap();
    ok(&setnet(d, &["generate", "--config", cfg]));
    assert!(d.join("from_config.csv").is_file());
    ok(&setnet(d, &["generate", "--config", cfg, "--dataset", "from_flag.csv"]));
    assert!(d.join("from_flag.csv").is_file());
    assert_eq!(std::fs::read(d.join("from_config.csv")).unwrap(), std::fs::read(d.join("from_flag.csv")).unwrap());

    std::fs::write(d.join("bad.cfg"), "lets\n").unwrap();
    let o = setnet(d, &["generate", "--config", d.join("bad.cfg").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_writes_table_in_requested_order() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut g = vec!["generate"];
    g.extend(SMALL_GRID);
    ok(&setnet(d, &g));
    let archs = "4x1:elliotsig,4x1:tansig,2x2x1:logsig";
    ok(&setnet(d, &["sweep", "--archs", archs, "--epochs", "3"]));
    let table = std::fs::read_to_string(d.join("sweep.csv")).unwrap();
    let names: Vec<String> = table.lines().skip(1).map(|l| l.split(',').take(2).collect::<Vec<_>>().join(":")).collect();
    assert_eq!(names, vec!["4x1:elliotsig", "4x1:tansig", "2x2x1:logsig"]);

    ok(&setnet(d, &["sweep", "--archs", archs, "--epochs", "3", "--sort", "--table", "sorted.csv"]));
    let sorted = std::fs::read_to_string(d.join("sorted.csv")).unwrap();
    let mse: Vec<f64> = sorted.lines().skip(1).map(|l| l.split(',').nth(4).unwrap().parse().unwrap()).collect();
    assert!(mse.windows(2).all(|w| w[0] <= w[1]));
}
