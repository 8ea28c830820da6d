use std::path::Path;
use std::process::{Command, Output};

fn pollen(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pollen"))
        .current_dir(dir)
        .env_remove("POLLEN_THREADS")
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn printed_config_reads_back_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let first = pollen(dir.path(), &["--print-config"]);
    assert_eq!(first.status.code(), Some(0));
    std::fs::write(dir.path().join("p.toml"), stdout(&first)).unwrap();
    let second = pollen(dir.path(), &["--config", "p.toml", "--print-config"]);
    assert_eq!(stdout(&second), stdout(&first));
}

#[test]
fn thread_count_comes_from_flag_or_environment() {
    let dir = tempfile::tempdir().unwrap();
    let flag = pollen(dir.path(), &["--threads", "3", "--print-config"]);
    assert!(stdout(&flag).contains("threads = 3"));
    let env = Command::new(env!("CARGO_BIN_EXE_pollen"))
        .current_dir(dir.path())
        .env("POLLEN_THREADS", "2")
        .arg("--print-config")
        .output()
        .unwrap();
    assert!(stdout(&env).contains("threads = 2"));
}

#[test]
fn usage_errors_exit_one_and_leave_no_output() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(pollen(dir.path(), &[]).status.code(), Some(1));
    assert_eq!(
        pollen(dir.path(), &["gen-data", "--bogus"]).status.code(),
        Some(1)
    );
    std::fs::write(
        dir.path().join("bad.toml"),
        "[detector]\ninput_extent = 100\n",
    )
    .unwrap();
    let bad = pollen(
        dir.path(),
        &[
            "--config", "bad.toml", "gen-data", "--n", "1", "--out", "out",
        ],
    );
    assert_eq!(bad.status.code(), Some(1), "{}", stderr(&bad));
    assert!(!dir.path().join("out").exists());
    std::fs::write(dir.path().join("typo.toml"), "[train]\nepoch = 3\n").unwrap();
    assert_eq!(
        pollen(dir.path(), &["--config", "typo.toml", "--print-config"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn authenticating_without_a_model_asks_for_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("f.json"),
        r#"{"counts": [10, 2, 1], "frames": 2}"#,
    )
    .unwrap();
    let o = pollen(
        dir.path(),
        &[
            "authenticate",
            "--model",
            "none.plna",
            "--features",
            "f.json",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train-auth"), "{}", stderr(&o));
}

#[test]
fn unreadable_weights_are_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("w.plnw"), b"not weights").unwrap();
    std::fs::write(dir.path().join("x.ppm"), b"P6\n2 2\n255\n000000000000").unwrap();
    let o = pollen(
        dir.path(),
        &[
            "detect",
            "--weights",
            "w.plnw",
            "--images",
            "x.ppm",
            "--out",
            "d.txt",
        ],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn blank_slide_gives_an_empty_record() {
    let dir = tempfile::tempdir().unwrap();
    let small = "[detector]\ninput_extent = 64\nanchors = 3\n";
    std::fs::write(dir.path().join("small.toml"), small).unwrap();
    let blank = format!("{small}\n[slide]\ncounts = [[0, 0], [0, 0], [0, 0]]\nbubbles = [0, 0]\n");
    std::fs::write(dir.path().join("blank.toml"), blank).unwrap();
    let run = |config: &str, args: &[&str]| {
        let mut all = vec!["--config", config];
        all.extend_from_slice(args);
        let o = pollen(dir.path(), &all);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
        o
    };
    run("small.toml", &["gen-data", "--n", "6", "--out", "train"]);
    run(
        "small.toml",
        &[
            "train-detector",
            "--data",
            "train",
            "--out",
            "run",
            "--epochs",
            "30",
        ],
    );
    run("blank.toml", &["gen-data", "--n", "2", "--out", "blank"]);
    run(
        "blank.toml",
        &[
            "detect",
            "--weights",
            "run/final.plnw",
            "--images",
            "blank",
            "--out",
            "d.txt",
        ],
    );
    let records = std::fs::read_to_string(dir.path().join("d.txt")).unwrap();
    assert!(records.lines().all(|l| l.starts_with('#')), "{records}");
    let table = run(
        "blank.toml",
        &[
            "evaluate",
            "--detections",
            "d.txt",
            "--annotations",
            "blank",
            "--out",
            "r.json",
        ],
    );
    assert!(stdout(&table).contains("2 images"), "{}", stdout(&table));
}
