use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_conceptmil"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(&["synth", "--preset", "small", "--seed", "5", "--out", s(&root.join("data"))]);
        Self { _dir: dir, root }
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn manifest(&self) -> String {
        s(&self.p("data/manifest.toml")).to_string()
    }
}

fn write_tiny_cohort(dir: &Path, d_in: usize) -> PathBuf {
    fs::create_dir_all(dir.join("tiles")).unwrap();
    let mut manifest = format!("cohort_id = \"tiny\"\nd_in = {d_in}\nlabel_kind = \"hpv\"\n");
    for (i, label) in ["positive", "negative"].iter().enumerate() {
        manifest.push_str(&format!(
            "\n[[slides]]\nslide_id = \"t{i}\"\nlabel = \"{label}\"\ntable = \"tiles/t{i}.csv\"\n"
        ));
        let mut table = String::from("tile_id,row,col");
        for j in 0..d_in {
            table.push_str(&format!(",e{j}"));
        }
        table.push('\n');
        for t in 0..4 {
            table.push_str(&format!("{t},0,{t}"));
            for j in 0..d_in {
                table.push_str(&format!(",{}", (i + t + j) as f64 * 0.1));
            }
            table.push('\n');
        }
        fs::write(dir.join(format!("tiles/t{i}.csv")), table).unwrap();
    }
    let path = dir.join("manifest.toml");
    fs::write(&path, manifest).unwrap();
    path
}

#[test]
fn small_preset_chain_writes_every_artifact() {
    let f = Fixture::new();
    let m = f.manifest();
    let go = |args: &[&str]| {
        let mut all = args.to_vec();
        all.extend(["--preset", "small", "--seed", "5"]);
        ok(&all)
    };
    let mil = s(&f.p("mil/mil.txt")).to_string();
    let concepts = s(&f.p("disc/concepts.txt")).to_string();

    go(&["train-mil", "--cohort", &m, "--out", s(&f.p("mil"))]);
    go(&["discover", "--cohort", &m, "--mil", &mil, "--out", s(&f.p("disc"))]);
    go(&[
        "fit-rule", "--cohort", &m, "--mil", &mil, "--concepts", &concepts, "--out", s(&f.p("rule")),
    ]);
    go(&[
        "fractions", "--cohort", &m, "--mil", &mil, "--concepts", &concepts, "--out", s(&f.p("frac")),
    ]);
    go(&[
        "render", "--cohort", &m, "--mil", &mil, "--concepts", &concepts, "--slide", "s000",
        "--out", s(&f.p("render")),
    ]);
    go(&[
        "top-tiles", "--cohort", &m, "--mil", &mil, "--concepts", &concepts, "--m", "3",
        "--out", s(&f.p("top")),
    ]);
    go(&[
        "transfer", "--cohort", &m, "--mil", &mil, "--concepts", &concepts, "--classifier",
        s(&f.p("rule/classifier.txt")), "--out", s(&f.p("xfer")),
    ]);
    go(&[
        "evaluate", "--cohort", &m, "--method", "aw_h,mil_base", "--out", s(&f.p("eval")),
    ]);
    let rec = go(&[
        "recovery", "--metrics", s(&f.p("eval/metrics.csv")), "--out", s(&f.p("rec")),
    ]);
    let mean: f64 = String::from_utf8(rec.stdout).unwrap().trim().parse().unwrap();
    assert!(mean > 0.0 && mean <= 1.0);

    for rel in [
        "data/ground_truth.csv",
        "mil/mil.txt",
        "disc/assignments.csv",
        "rule/classifier.txt",
        "frac/fractions.csv",
        "frac/class_averages.csv",
        "render/concept_map_s000.ppm",
        "render/concept_map_s000.csv",
        "render/attention_s000.ppm",
        "render/attention_s000.csv",
        "render/fraction_chart.ppm",
        "top/representative_tiles.csv",
        "xfer/metrics.csv",
        "eval/predictions_aw_h.csv",
        "rec/recovery.csv",
    ] {
        assert!(f.p(rel).is_file(), "missing {rel}");
    }
    for dir in ["mil", "disc", "eval", "render"] {
        assert!(f.p(dir).join("run_config.toml").is_file());
    }
    let top = fs::read_to_string(f.p("top/representative_tiles.csv")).unwrap();
    assert!(top.starts_with("concept,rank,slide_id,tile_id,distance\n"));
    let metrics = fs::read_to_string(f.p("eval/metrics.csv")).unwrap();
    assert!(metrics.lines().any(|l| l.starts_with("mil_base,mean,")));
}

#[test]
fn evaluate_is_byte_identical_across_thread_counts() {
    let f = Fixture::new();
    let m = f.manifest();
    for (dir, threads) in [("e1", "1"), ("e2", "3")] {
        ok(&[
            "evaluate", "--preset", "small", "--seed", "9", "--method", "aw_h", "--cohort", &m,
            "--threads", threads, "--out", s(&f.p(dir)),
        ]);
    }
    let a = fs::read(f.p("e1/metrics.csv")).unwrap();
    let b = fs::read(f.p("e2/metrics.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        fs::read(f.p("e1/predictions_aw_h.csv")).unwrap(),
        fs::read(f.p("e2/predictions_aw_h.csv")).unwrap()
    );
}

#[test]
fn config_echo_reproduces_the_run() {
    let f = Fixture::new();
    let m = f.manifest();
    ok(&[
        "evaluate", "--preset", "small", "--seed", "4", "--epochs", "3", "--method", "encoder",
        "--cohort", &m, "--out", s(&f.p("a")),
    ]);
    let echo = f.p("a/run_config.toml");
    ok(&["evaluate", "--config", s(&echo), "--method", "encoder", "--cohort", &m, "--out", s(&f.p("b"))]);
    assert_eq!(
        fs::read(f.p("a/metrics.csv")).unwrap(),
        fs::read(f.p("b/metrics.csv")).unwrap()
    );
    let body = fs::read_to_string(echo).unwrap();
    assert!(body.contains("epochs = 3"));
}

#[test]
fn transfer_with_mismatched_width_fails_validation() {
    let f = Fixture::new();
    let m = f.manifest();
    ok(&["train-mil", "--preset", "small", "--cohort", &m, "--out", s(&f.p("mil"))]);
    let mil = s(&f.p("mil/mil.txt")).to_string();
    ok(&["discover", "--preset", "small", "--cohort", &m, "--mil", &mil, "--out", s(&f.p("disc"))]);
    let concepts = s(&f.p("disc/concepts.txt")).to_string();
    ok(&[
        "fit-rule", "--cohort", &m, "--mil", &mil, "--concepts", &concepts, "--out", s(&f.p("rule")),
    ]);
    let tiny = write_tiny_cohort(&f.p("tiny"), 3);
    let out = run(&[
        "transfer", "--cohort", s(&tiny), "--mil", &mil, "--concepts", &concepts, "--classifier",
        s(&f.p("rule/classifier.txt")), "--out", s(&f.p("xfer")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("dimension-mismatch:"), "{err}");
}

#[test]
fn usage_and_validation_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["evaluate", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["synth"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&[
        "train-mil", "--cohort", s(&dir.path().join("absent.toml")), "--out", s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("io:"));
    let tiny = write_tiny_cohort(&dir.path().join("tiny"), 2);
    let out = run(&[
        "discover", "--cohort", s(&tiny), "--space", "aw_h", "--out", s(&dir.path().join("d")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let help = run(&["--help"]);
    assert!(help.status.success());
    let text = String::from_utf8(help.stdout).unwrap();
    for cmd in [
        "synth", "train-mil", "discover", "elbow", "fractions", "fit-rule", "evaluate", "transfer",
        "survival", "render", "top-tiles", "recovery",
    ] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn fractions_reject_mode_incompatible_with_space() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = write_tiny_cohort(&dir.path().join("tiny"), 2);
    ok(&[
        "discover", "--cohort", s(&tiny), "--space", "encoder", "--k", "2", "--out",
        s(&dir.path().join("d")),
    ]);
    let out = run(&[
        "fractions", "--cohort", s(&tiny), "--concepts", s(&dir.path().join("d/concepts.txt")),
        "--mode", "aw", "--out", s(&dir.path().join("f")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("invalid-input:"));
    ok(&[
        "fractions", "--cohort", s(&tiny), "--concepts", s(&dir.path().join("d/concepts.txt")),
        "--mode", "raw", "--bootstrap-reps", "50", "--out", s(&dir.path().join("f")),
    ]);
}
