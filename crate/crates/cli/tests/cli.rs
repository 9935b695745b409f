use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 8] = [
    "--train-count",
    "60",
    "--id-test-count",
    "30",
    "--ood-test-count",
    "30",
    "--dims",
    "8",
];

fn qe(args: &[&str], out_dir_env: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_qe"));
    cmd.args(args).env_remove("QE_OUT_DIR");
    if let Some(d) = out_dir_env {
        cmd.env("QE_OUT_DIR", d);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Asserts a single-line `error[CODE]: ...` on stderr and the exit status.
fn assert_fails(o: &Output, code: &str, status: i32) {
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(o.status.code(), Some(status), "stderr: {err}");
    assert_eq!(err.lines().count(), 1, "stderr: {err}");
    assert!(err.starts_with(&format!("error[{code}]: ")), "stderr: {err}");
}

#[test]
fn help_succeeds() {
    let o = qe(&["--help"], None);
    assert!(o.status.success());
    for cmd in ["gen-data", "train", "eval", "gradcheck", "report"] {
        assert!(stdout(&o).contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn argument_problems_are_one_line_usage_errors() {
    assert_fails(&qe(&[], None), "E_USAGE", 2);
    assert_fails(&qe(&["report"], None), "E_USAGE", 2);
    assert_fails(&qe(&["train", "--epochs", "many"], None), "E_USAGE", 2);
    assert_fails(&qe(&["train", "--set", "noequals"], None), "E_USAGE", 2);
    assert_fails(&qe(&["train", "--set", "train.speed=3"], None), "E_PARSE", 2);
    assert_fails(&qe(&["gen-data"], None), "E_USAGE", 2);
}

#[test]
fn invalid_configs_name_the_reason() {
    assert_fails(&qe(&["train", "--rho", "0.1"], None), "E_SPEC", 1);
    assert_fails(&qe(&["train", "--batch-size", "0"], None), "E_CONFIG", 1);
    assert_fails(&qe(&["train", "--config", "/nonexistent/qe.cfg"], None), "E_IO", 1);
    assert_fails(
        &qe(&["eval", "--checkpoint", "/nonexistent/x.ckpt"], None),
        "E_IO",
        1,
    );
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.tsv");
    let b = dir.path().join("b.tsv");
    for p in [&a, &b] {
        let o = qe(&[&["gen-data", "--output", p.to_str().unwrap()][..], &SMALL].concat(), None);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 120);
    assert_eq!(text, fs::read_to_string(&b).unwrap());

    // default destination comes from the output directory
    let o = qe(&[&["gen-data"][..], &SMALL].concat(), Some(dir.path()));
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(dir.path().join("dataset.tsv")).unwrap(), text);
}

#[test]
fn train_eval_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let env_dir = dir.path().join("from-env");
    let args = [&["train", "--variant", "gat", "--epochs", "1"][..], &SMALL].concat();
    let o = qe(&args, Some(&env_dir));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.starts_with("gat/concat/copy/K2/s3 seed=1 id_acc="), "{out}");

    let rows = env_dir.join("rows.csv");
    let ckpt = env_dir.join("gat-concat_copy_K2_s3-seed1.ckpt");
    assert!(rows.exists() && ckpt.exists());

    // same seed again: identical metrics in the appended row
    assert!(qe(&args, Some(&env_dir)).status.success());
    let text = fs::read_to_string(&rows).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    let strip = |l: &str| {
        let mut f: Vec<&str> = l.split(',').collect();
        f.remove(11); // seconds
        f.join(",")
    };
    assert_eq!(strip(lines[1]), strip(lines[2]));

    let o = qe(
        &[&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--split", "ood-test"][..], &SMALL].concat(),
        None,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("split=ood-test\nprobe=full-q\ntotal=30\n"), "{out}");
    let acc: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("accuracy="))
        .unwrap()
        .parse()
        .unwrap();
    let ood_col: f64 = lines[1].split(',').nth(4).unwrap().parse().unwrap();
    assert_eq!(acc, ood_col);

    let o = qe(&["report", rows.to_str().unwrap(), "--format", "table", "--aggregate"], None);
    assert!(o.status.success());
    assert!(stdout(&o).contains("gat"));
    let report = dir.path().join("r.csv");
    let o = qe(&["report", rows.to_str().unwrap(), "--format", "csv", "--output", report.to_str().unwrap()], None);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(&report).unwrap().lines().count(), 3);

    assert_fails(&qe(&["report", rows.to_str().unwrap(), "--format", "xml"], None), "E_PARSE", 2);
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, lines[0]).unwrap();
    assert_fails(&qe(&["report", empty.to_str().unwrap()], None), "E_USAGE", 2);
}

#[test]
fn explicit_out_dir_beats_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = qe(&["show-config", "--out-dir", "flag-dir"], Some(dir.path()));
    assert!(stdout(&o).contains("run.out_dir=flag-dir\n"));
    let o = qe(&["show-config"], Some(dir.path()));
    assert!(stdout(&o).contains(&format!("run.out_dir={}\n", dir.path().display())));
}

#[test]
fn config_file_is_canonical_text() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# grid cell\nencoder.variant=bigru\nencoder.aggregation=sum\nrun.seed=4\n").unwrap();
    let o = qe(&["show-config", "--config", cfg.to_str().unwrap(), "--lr", "0.005"], None);
    assert!(o.status.success());
    let text = stdout(&o);
    for line in ["encoder.variant=bigru", "encoder.aggregation=sum", "run.seed=4", "train.lr=0.005"] {
        assert!(text.lines().any(|l| l == line), "{line} missing:\n{text}");
    }
    // the printed form reads back to the same configuration
    let again = dir.path().join("again.cfg");
    fs::write(&again, &text).unwrap();
    let o2 = qe(&["show-config", "--config", again.to_str().unwrap()], None);
    assert_eq!(stdout(&o2), text);
}

#[test]
fn gradcheck_reports_and_enforces_the_tolerance() {
    let o = qe(&["gradcheck", "--variant", "transformer", "--pos-enc", "conv1d", "--len", "4"], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.starts_with("transformer/conv1d/split/L1/K2 max_rel_error="), "{out}");
    let o = qe(&["gradcheck", "--variant", "gru", "--tol", "0"], None);
    assert!(!stdout(&o).is_empty());
    assert_fails(&o, "E_GRADCHECK", 1);
}
