use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMOKE: &str = include_str!("../../../configs/smoke.toml");

fn distildp() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_distildp"));
    cmd.env_remove("DISTILDP_OUT_DIR");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn distildp")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

fn output_names(m: &Value) -> Vec<String> {
    m["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| o["path"].as_str().unwrap().to_string())
        .collect()
}

fn sha256_file(path: &Path) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(fs::read(path).unwrap())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[test]
fn prepare_writes_splits_with_a_matching_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "smoke.toml", SMOKE);
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    for out in [&out_a, &out_b] {
        let o = run(distildp()
            .args(["prepare", "--config"])
            .arg(&config)
            .arg("--out-dir")
            .arg(out));
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let m = manifest(&out_a);
    let mut names = output_names(&m);
    names.sort();
    assert_eq!(
        names,
        [
            "schema.json",
            "test.jsonl",
            "train.jsonl",
            "validation.jsonl",
            "vocab.json"
        ]
    );
    for o in m["outputs"].as_array().unwrap() {
        let path = out_a.join(o["path"].as_str().unwrap());
        assert_eq!(
            o["bytes"].as_u64().unwrap(),
            fs::metadata(&path).unwrap().len()
        );
        assert_eq!(
            o["sha256"].as_str().unwrap(),
            sha256_file(&path),
            "{}",
            path.display()
        );
    }
    assert_eq!(m["seeds"]["root"], 1);
    assert_eq!(m["command"], "prepare");
    assert_eq!(
        fs::read(out_a.join("manifest.json")).unwrap(),
        fs::read(out_b.join("manifest.json")).unwrap()
    );

    let train = fs::read_to_string(out_a.join("train.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 160);
    let first: Value = serde_json::from_str(train.lines().next().unwrap()).unwrap();
    let boundary = first["boundary"].as_u64().unwrap() as usize;
    let tokens = first["tokens"].as_array().unwrap();
    assert!(boundary > 0 && boundary < tokens.len());
    assert_eq!(tokens.last().unwrap(), 1);
}

#[test]
fn malformed_configs_exit_2_and_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        (
            "[budget]\nepsilon = 4.0",
            "[budget]\nepsilon = \"four\"",
            "budget.epsilon",
        ),
        (
            "temperature = 1.0",
            "temperature = 0.0",
            "student.kd.temperature",
        ),
        (
            "sampling_rate = 0.1",
            "sampling_rate = 1.5",
            "teacher.dp.sampling_rate",
        ),
        (
            "method = \"distildp\"",
            "method = \"teacherless\"",
            "method",
        ),
    ];
    for (i, (from, to, field)) in cases.iter().enumerate() {
        let text = SMOKE.replacen(from, to, 1);
        assert_ne!(text, SMOKE, "{field}");
        let config = write_config(tmp.path(), &format!("bad{i}.toml"), &text);
        let o = run(distildp()
            .args(["run", "--config"])
            .arg(&config)
            .arg("--out-dir")
            .arg(tmp.path().join("out")));
        assert_eq!(code(&o), 2, "{field}: {}", stderr(&o));
        assert!(stderr(&o).contains(field), "{field}: {}", stderr(&o));
    }
    let o = run(distildp()
        .args(["run", "--config"])
        .arg(tmp.path().join("missing.toml")));
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn distildp_run_writes_every_artifact_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "smoke.toml", SMOKE);
    let dirs = [tmp.path().join("a"), tmp.path().join("b")];
    for (out, threads) in dirs.iter().zip(["1", "3"]) {
        let o = run(distildp()
            .args(["--threads", threads, "run", "--config"])
            .arg(&config)
            .arg("--out-dir")
            .arg(out));
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("test PPL"));
    }
    let mut names = output_names(&manifest(&dirs[0]));
    names.sort();
    assert_eq!(
        names,
        [
            "metrics.csv",
            "report.json",
            "student.ckpt",
            "synthetic.jsonl",
            "teacher.ckpt"
        ]
    );
    for name in [
        "report.json",
        "student.ckpt",
        "teacher.ckpt",
        "synthetic.jsonl",
    ] {
        assert_eq!(
            fs::read(dirs[0].join(name)).unwrap(),
            fs::read(dirs[1].join(name)).unwrap(),
            "{name}"
        );
    }
    let report: Value =
        serde_json::from_slice(&fs::read(dirs[0].join("report.json")).unwrap()).unwrap();
    assert_eq!(report["method"], "distildp");
    let phases: Vec<&str> = report["phases"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["phase"].as_str().unwrap())
        .collect();
    assert_eq!(phases, ["teacher", "generation", "student"]);
    assert!(report["total_spent_epsilon"].as_f64().unwrap() <= 4.0);
    let synthetic = fs::read_to_string(dirs[0].join("synthetic.jsonl")).unwrap();
    assert_eq!(synthetic.lines().count(), 200);

    let metrics = fs::read_to_string(dirs[0].join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert!(
        header.contains(&"test_ppl") && header.contains(&"seconds"),
        "{header:?}"
    );
    assert_eq!(lines.count(), 1);
}

#[test]
fn zero_shot_run_writes_only_the_student() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(
        tmp.path(),
        "zs.toml",
        &SMOKE.replacen("method = \"distildp\"", "method = \"zero_shot\"", 1),
    );
    let out = tmp.path().join("out");
    let o = run(distildp()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out-dir")
        .arg(&out));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut names = output_names(&manifest(&out));
    names.sort();
    assert_eq!(names, ["metrics.csv", "report.json", "student.ckpt"]);
    let report: Value =
        serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["total_spent_epsilon"], 0.0);
}

#[test]
fn out_dir_comes_from_the_environment_when_no_flag_is_given() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "smoke.toml", SMOKE);
    let env_dir = tmp.path().join("from-env");
    let o = run(distildp()
        .env("DISTILDP_OUT_DIR", &env_dir)
        .current_dir(tmp.path())
        .args(["prepare", "--config"])
        .arg(&config));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(env_dir.join("manifest.json").exists());
    assert!(!tmp.path().join("out").exists());

    let flag_dir = tmp.path().join("from-flag");
    let o = run(distildp()
        .env("DISTILDP_OUT_DIR", &env_dir)
        .args(["prepare", "--config"])
        .arg(&config)
        .arg("--out-dir")
        .arg(&flag_dir));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(flag_dir.join("manifest.json").exists());
}

#[test]
fn underfunded_noise_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let text = SMOKE.replacen(
        "[teacher.dp]\nclip_norm = 1.0\nsampling_rate = 0.1\nepochs = 1.0",
        "[teacher.dp]\nclip_norm = 1.0\nnoise_multiplier = 0.4\nsampling_rate = 0.1\nepochs = 5.0",
        1,
    );
    assert_ne!(text, SMOKE);
    let config = write_config(tmp.path(), "poor.toml", &text);
    let o = run(distildp()
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out-dir")
        .arg(tmp.path().join("out")));
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("teacher"), "{}", stderr(&o));
}

#[test]
fn sweep_shares_one_teacher_across_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "smoke.toml", SMOKE);
    let out = tmp.path().join("sweep");
    let o = run(distildp()
        .args(["sweep", "--config"])
        .arg(&config)
        .args(["--axis", "lambda", "--values", "0,0.5,1"])
        .arg("--out-dir")
        .arg(&out));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut reader = csv::Reader::from_path(out.join("sweep.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .unwrap_or_else(|| panic!("no column {name}"))
    };
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    let lambdas: Vec<f64> = rows
        .iter()
        .map(|r| r[col("lambda")].parse().unwrap())
        .collect();
    assert_eq!(lambdas, [0.0, 0.5, 1.0]);
    let teachers: Vec<&str> = rows.iter().map(|r| &r[col("teacher_sha256")]).collect();
    assert!(!teachers[0].is_empty() && teachers.iter().all(|t| *t == teachers[0]));
    assert!(rows
        .iter()
        .all(|r| r[col("error")].is_empty() && r[col("test_ppl")].parse::<f64>().unwrap() > 1.0));
    assert_eq!(output_names(&manifest(&out)), ["sweep.csv"]);

    let o = run(distildp()
        .args(["sweep", "--config"])
        .arg(&config)
        .args(["--axis", "depth", "--values", "1"])
        .arg("--out-dir")
        .arg(&out));
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = run(distildp()
        .args(["sweep", "--config"])
        .arg(&config)
        .args(["--axis", "lambda"])
        .arg("--out-dir")
        .arg(&out));
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

fn account(q: &str, sigma: &str, steps: &str, delta: &str) -> (i32, String) {
    let o = run(distildp().args([
        "account", "--q", q, "--sigma", sigma, "--steps", steps, "--delta", delta,
    ]));
    (code(&o), stdout(&o) + &stderr(&o))
}

fn minimum_epsilon(text: &str) -> f64 {
    let line = text
        .lines()
        .find(|l| l.starts_with("minimum at order"))
        .expect("summary line");
    line.rsplit(' ').next().unwrap().parse().unwrap()
}

#[test]
fn account_prints_the_rdp_curve() {
    let (c, text) = account("0.01", "50", "100", "0.0005");
    assert_eq!(c, 0, "{text}");
    assert!(text.starts_with("order,rdp,epsilon\n"));
    let rows = text.lines().skip(1).take_while(|l| !l.is_empty()).count();
    assert_eq!(rows, 15);
    assert!(minimum_epsilon(&text) < 0.01, "{text}");

    let (_, none) = account("0.05", "1", "0", "1e-5");
    assert_eq!(minimum_epsilon(&none), 0.0);

    let (_, one) = account("0.05", "1", "300", "1e-5");
    let (_, two) = account("0.05", "1", "600", "1e-5");
    assert!(minimum_epsilon(&two) > minimum_epsilon(&one));

    for bad in [
        ["0", "1", "10", "1e-5"],
        ["0.1", "-1", "10", "1e-5"],
        ["0.1", "1", "10", "1"],
    ] {
        let (c, text) = account(bad[0], bad[1], bad[2], bad[3]);
        assert_eq!(c, 2, "{bad:?}: {text}");
    }
}

#[test]
fn generate_toy_is_deterministic_and_threads_must_be_positive() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a.jsonl");
    let b = tmp.path().join("nested/b.jsonl");
    for p in [&a, &b] {
        let o = run(distildp()
            .args(["generate-toy", "--seed", "5", "--n", "50", "--out"])
            .arg(p));
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 50);
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert!(first["text"].is_string() && first["attributes"].is_object());

    let o = run(distildp().args([
        "--threads",
        "0",
        "account",
        "--q",
        "0.1",
        "--sigma",
        "1",
        "--steps",
        "1",
        "--delta",
        "1e-5",
    ]));
    assert_eq!(code(&o), 2);
}
