use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn bin(dir: &Path) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pmu-prospector"));
    c.current_dir(dir).env_remove("PMU_PROSPECTOR_CONFIG");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin(dir).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_and_version_exit_zero() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(d.path(), &["--help"])), 0);
    assert_eq!(code(&run(d.path(), &["--version"])), 0);
    let help = String::from_utf8(run(d.path(), &["--help"]).stdout).unwrap();
    for sub in ["scan", "analyze-umask", "detect", "sidechannel", "report"] {
        assert!(help.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn usage_errors_exit_two() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(d.path(), &["scan", "--bogus"])), 2);
    assert_eq!(code(&run(d.path(), &["frobnicate"])), 2);
    assert_eq!(code(&run(d.path(), &["detect", "collect", "--attack", "rowhammer", "--selector", "0x0101"])), 2);
    assert_eq!(code(&run(d.path(), &["detect", "collect", "--attack", "meltdown", "--selector", "zz"])), 2);
    let o = run(d.path(), &["scan", "--catalog", "x.csv"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--corpus"));
    assert_eq!(code(&run(d.path(), &["--jobs", "0", "report", "--in", "x"])), 2);
}

#[test]
fn runtime_errors_exit_one() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &["report", "--in", "missing.json"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("missing.json"));

    std::fs::write(d.path().join("junk.txt"), "hello\n").unwrap();
    assert_eq!(code(&run(d.path(), &["report", "--in", "junk.txt"])), 1);

    let o = run(
        d.path(),
        &["--backend", "native", "detect", "collect", "--attack", "meltdown", "--selector", "0x016C"],
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("native") || stderr(&o).contains("sim"));
}

#[test]
fn bad_config_names_line_and_field() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("run.conf"), "seed = 3\njobs = lots\n").unwrap();
    let o = run(d.path(), &["--config", "run.conf", "report", "--in", "x"]);
    assert_eq!(code(&o), 2);
    let e = stderr(&o);
    assert!(e.contains("run.conf:2") && e.contains("jobs"), "{e}");
}

#[test]
fn config_from_environment_matches_flags() {
    let d = tempfile::tempdir().unwrap();
    let corpus = data("corpus.tsv");
    let catalog = data("catalog.csv");
    let conf = d.path().join("env.conf");
    std::fs::write(
        &conf,
        format!(
            "# scan settings\ncorpus = \"{}\"\ncatalog = \"{}\"\nseed = 5\nrepetitions = 3\n",
            corpus.display(),
            catalog.display()
        ),
    )
    .unwrap();
    let o = bin(d.path())
        .env("PMU_PROSPECTOR_CONFIG", &conf)
        .args(["scan", "--out", "env.json"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(
        d.path(),
        &[
            "--seed",
            "5",
            "scan",
            "--corpus",
            corpus.to_str().unwrap(),
            "--catalog",
            catalog.to_str().unwrap(),
            "--repetitions",
            "3",
            "--out",
            "flags.json",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let a = std::fs::read(d.path().join("env.json")).unwrap();
    let b = std::fs::read(d.path().join("flags.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn scan_output_does_not_depend_on_jobs() {
    let d = tempfile::tempdir().unwrap();
    let corpus = data("corpus.tsv");
    let catalog = data("catalog.csv");
    for (jobs, out) in [("1", "j1.json"), ("3", "j3.json")] {
        let o = run(
            d.path(),
            &[
                "--jobs",
                jobs,
                "scan",
                "--corpus",
                corpus.to_str().unwrap(),
                "--catalog",
                catalog.to_str().unwrap(),
                "--out",
                out,
            ],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for ext in ["json", "ndjson"] {
        let a = std::fs::read(d.path().join(format!("j1.{ext}"))).unwrap();
        let b = std::fs::read(d.path().join(format!("j3.{ext}"))).unwrap();
        assert_eq!(a, b, "{ext} differs");
    }
    let report = std::fs::read_to_string(d.path().join("j1.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(parsed["total_instructions"], 48);
}

#[test]
fn analyze_umask_recovers_reference_masks() {
    let d = tempfile::tempdir().unwrap();
    let corpus = data("corpus.tsv");
    let catalog = data("catalog.csv");
    let o = run(
        d.path(),
        &["scan", "--corpus", corpus.to_str().unwrap(), "--catalog", catalog.to_str().unwrap(), "--out", "r.json"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(d.path(), &["analyze-umask", "--report", "r.json", "--out", "u"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let masks = std::fs::read_to_string(d.path().join("u/relevance_masks.csv")).unwrap();
    for line in ["0x6C,0x01", "0xA2,0x01", "0xB1,0x80", "0xC3,0x04", "0xD4,0x10", "0x48,0x02", "0x5E,0x20"] {
        assert!(masks.contains(line), "{line} missing from\n{masks}");
    }
    assert!(!masks.contains("false"), "{masks}");
}

#[test]
fn sidechannel_run_recovers_secret() {
    let d = tempfile::tempdir().unwrap();
    let secret = data("secret.bin");
    let o = run(
        d.path(),
        &[
            "sidechannel",
            "run",
            "--attack",
            "meltdown",
            "--selector",
            "0x01A2",
            "--secret-file",
            secret.to_str().unwrap(),
            "--out",
            "sc.json",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.path().join("sc.json")).unwrap()).unwrap();
    assert_eq!(v["error_rate"], 0.0);
    let hex: String = std::fs::read(&secret).unwrap().iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(v["recovered"].as_str().unwrap().to_lowercase(), hex);
}
