use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use quetzal::checkpoint;

const TINY: &str = "\
n_layers = 2
width = 8
n_heads = 2
mlp_ratio = 2
diff_width = 8
diff_blocks = 1
n_fourier_coord = 3
n_fourier_diff = 3
max_positions = 16
pack_capacity = 32
max_per_pack = 4
packs_per_batch = 2
steps = 3
log_every = 1
checkpoint_every = 2
";

fn quetzal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quetzal"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = quetzal(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A toy corpus and a model trained on it for three steps.
struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("toy.xyz");
        ok(&["make-toy", "--molecules", "methane,water", "--count", "4", "--out", s(&data)]);
        let cfg = dir.path().join("tiny.toml");
        fs::write(&cfg, TINY).unwrap();
        let run = dir.path().join("run");
        ok(&["train", "--data", s(&data), "--out", s(&run), "--config", s(&cfg)]);
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn ckpt(&self) -> PathBuf {
        self.path("run/checkpoint.qz")
    }
}

#[test]
fn schedule_dump_endpoints() {
    assert_eq!(ok(&["schedule-dump", "--n-diff", "2"]), "80 0.0001\n");
    let grid = ok(&["schedule-dump"]);
    assert_eq!(grid.split_whitespace().count(), 60);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(quetzal(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(quetzal(&["schedule-dump", "--n-diff", "1"]).status.code(), Some(1));
    assert_eq!(quetzal(&["sample"]).status.code(), Some(1));
    assert_eq!(quetzal(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.qz");
    assert_eq!(quetzal(&["sample", "--checkpoint", s(&missing)]).status.code(), Some(2));
    let bad = dir.path().join("bad.xyz");
    fs::write(&bad, "2\n\nC 0 0 0\n").unwrap();
    assert_eq!(quetzal(&["eval", "--input", s(&bad)]).status.code(), Some(2));
}

#[test]
fn make_toy_and_pack_stats() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("m.xyz");
    ok(&["make-toy", "--count", "20", "--jitter", "0.02", "--out", s(&data)]);
    let text = fs::read_to_string(&data).unwrap();
    assert_eq!(quetzal::geom::parse_xyz(&text).unwrap().len(), 20);
    let stats = ok(&["pack-stats", "--data", s(&data)]);
    let rows: Vec<Vec<&str>> = stats.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows[0][..3], ["molecules", "tokens", "packs"]);
    // 20 documents of 6 tokens, at most 6 per pack of 128.
    assert_eq!(rows[1][..3], ["20", "120", "4"]);
}

#[test]
fn eval_directory_reports_five_columns() {
    let dir = tempfile::tempdir().unwrap();
    let empty = ok(&["eval", "--input", s(dir.path())]);
    assert_eq!(
        empty,
        "n_molecules\tatom_stable\tmol_stable\tvalid_lookup\tvalid_x_unique_lookup\n0\tn/a\tn/a\tn/a\tn/a\n"
    );
    ok(&["make-toy", "--molecules", "methane", "--count", "3", "--out", s(&dir.path().join("a.xyz"))]);
    ok(&["make-toy", "--molecules", "water", "--count", "2", "--jitter", "0", "--out", s(&dir.path().join("b.xyz"))]);
    fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    let report = ok(&["eval", "--input", s(dir.path())]);
    let row: Vec<&str> = report.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(row.len(), 5);
    assert_eq!(row[..4], ["5", "100.00", "100.00", "100.00"]);
    // Two distinct graphs among five valid molecules.
    assert_eq!(row[4], "40.00");
}

#[test]
fn train_writes_log_config_and_resumes() {
    let f = Fixture::new();
    let log = fs::read_to_string(f.path("run/loss.tsv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step\ttype_loss\tdiff_loss\tgrad_norm\tlr");
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().all(|l| l.split('\t').count() == 5));

    ok(&[
        "train",
        "--data",
        s(&f.path("toy.xyz")),
        "--out",
        s(&f.path("run")),
        "--resume",
        s(&f.ckpt()),
        "--steps",
        "5",
    ]);
    let log = fs::read_to_string(f.path("run/loss.tsv")).unwrap();
    let steps: Vec<&str> = log.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(steps, ["1", "2", "3", "4", "5"]);
    let ck = checkpoint::load::<f32>(&f.ckpt()).unwrap();
    assert_eq!(ck.train.unwrap().step, 5);

    // The written config rebuilds the same architecture.
    let again = f.path("again");
    ok(&[
        "train",
        "--data",
        s(&f.path("toy.xyz")),
        "--out",
        s(&again),
        "--config",
        s(&f.path("run/config.toml")),
        "--steps",
        "1",
    ]);
    let other = checkpoint::load::<f32>(&again.join("checkpoint.qz")).unwrap();
    let shapes = |m: &quetzal::model::Quetzal<f32>| -> Vec<(String, Vec<usize>)> {
        m.params.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect()
    };
    assert_eq!(shapes(&ck.model), shapes(&other.model));
    assert_eq!(ck.model.config, other.model.config);
}

#[test]
fn inference_subcommands() {
    let f = Fixture::new();
    let ck = f.ckpt();
    let data = f.path("toy.xyz");
    let flags = ["--checkpoint", s(&ck), "--n-diff", "4", "--max-atoms", "6"];
    let score_flags = &flags[..4];

    let (a, b) = (f.path("a.xyz"), f.path("b.xyz"));
    for out in [&a, &b] {
        let mut args = vec!["sample", "--seed", "7", "--n", "5", "--out", s(out)];
        args.extend(flags);
        ok(&args);
    }
    let first = fs::read(&a).unwrap();
    assert_eq!(first, fs::read(&b).unwrap());
    let samples = quetzal::geom::parse_xyz(&String::from_utf8(first).unwrap()).unwrap();
    assert_eq!(samples.len(), 5);
    assert!(samples.iter().all(|m| m.len() <= 6));

    let mut args = vec!["nll", "--data", s(&data), "--no-ema"];
    args.extend(score_flags);
    let nll = ok(&args);
    let lines: Vec<&str> = nll.lines().collect();
    assert_eq!(lines.len(), 1 + 8 + 1);
    assert!(lines[9].starts_with("mean\t"));
    for l in &lines[1..] {
        let v: f64 = l.split('\t').nth(4).unwrap().parse().unwrap();
        assert!(v.is_finite());
    }

    let dec = f.path("dec.xyz");
    let mut args = vec!["decorate-h", "--data", s(&data), "--out", s(&dec)];
    args.extend(flags);
    let report = ok(&args);
    assert!(report.starts_with("n\tcorrect_h\trmsd_lt_0.5"));
    let decorated = quetzal::geom::parse_xyz(&fs::read_to_string(&dec).unwrap()).unwrap();
    assert_eq!(decorated.len(), 8);

    let scaffold = f.path("scaffold.xyz");
    fs::write(&scaffold, "1\n\nC 0.1 0.2 0.3\n").unwrap();
    let mut args = vec!["scaffold", "--scaffold", s(&scaffold), "--n", "3"];
    args.extend(flags);
    let out = quetzal::geom::parse_xyz(&ok(&args)).unwrap();
    assert_eq!(out.len(), 3);
    for m in &out {
        assert_eq!(m.elements[0], quetzal::geom::Element::C);
        assert_eq!(m.coords[0], [0.1, 0.2, 0.3]);
    }

    let foreign = f.path("foreign.xyz");
    fs::write(&foreign, "1\n\nS 0 0 0\n").unwrap();
    let mut args = vec!["nll", "--data", s(&foreign)];
    args.extend(score_flags);
    assert_eq!(quetzal(&args).status.code(), Some(2));
}
