use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bgl::data::Dataset;
use bgl::graph::LabelGraph;

fn bgl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bgl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Two well separated classes in two dimensions, one coarse type of size 2.
fn write_separable(dir: &Path) {
    let graph = LabelGraph::from_one_based(2, vec![2], vec![vec![1], vec![2]]).unwrap();
    fs::write(dir.join("graph.txt"), graph.to_text()).unwrap();
    let mut data = Dataset::new(2, 2);
    for s in 0..10 {
        let t = s as f64 * 0.1;
        data.push(vec![2.0 + t, 1.0 - t], 0);
        data.push(vec![-2.0 - t, -1.0 + t], 1);
    }
    fs::write(dir.join("data.txt"), data.to_text()).unwrap();
}

#[test]
fn help_for_every_subcommand() {
    for sub in ["train", "eval", "gradcheck", "bench", "synth"] {
        let o = bgl(&[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub}: {}", stderr(&o));
        assert!(stdout(&o).contains("Usage"), "{sub}");
    }
    assert_eq!(code(&bgl(&["--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&bgl(&[])), 1);
    assert_eq!(code(&bgl(&["frobnicate"])), 1);
    assert_eq!(code(&bgl(&["train", "--epochs", "many"])), 1);
}

#[test]
fn missing_data_path_is_named() {
    let dir = tempfile::tempdir().unwrap();
    write_separable(dir.path());
    let missing = dir.path().join("nope.txt");
    let o = bgl(&[
        "train",
        "--graph",
        p(&dir.path().join("graph.txt")),
        "--data",
        p(&missing),
        "--out",
        p(&dir.path().join("out")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nope.txt"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_sabotage_fails() {
    let o = bgl(&["gradcheck", "--random", "6", "2", "3", "--instances", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("gradcheck passed"));

    let o = bgl(&[
        "gradcheck",
        "--random",
        "6",
        "2",
        "3",
        "--instances",
        "5",
        "--sabotage",
    ]);
    assert_eq!(code(&o), 3);

    let o = bgl(&["gradcheck", "--random", "5", "0", "1", "--instances", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn gradcheck_reads_graph_file() {
    let dir = tempfile::tempdir().unwrap();
    write_separable(dir.path());
    let o = bgl(&[
        "gradcheck",
        "--graph",
        p(&dir.path().join("graph.txt")),
        "--instances",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn bench_rejects_zero_repetitions() {
    assert_eq!(code(&bgl(&["bench", "--reps", "0"])), 2);
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.csv");
    let o = bgl(&[
        "bench",
        "--k",
        "50",
        "--m",
        "0,2",
        "--kj",
        "5",
        "--reps",
        "3",
        "--warmup",
        "1",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 5);
    assert!(csv.contains("bgl_backward_fast"));
}

#[test]
fn synth_round_robin_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    let o = bgl(&[
        "synth",
        "--k",
        "4",
        "--m",
        "1",
        "--sizes",
        "2",
        "--d",
        "3",
        "--n",
        "2",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let graph = LabelGraph::parse(&fs::read_to_string(out.join("graph.txt")).unwrap()).unwrap();
    let parents: Vec<usize> = (0..4).map(|i| graph.parent(i, 0) + 1).collect();
    assert_eq!(parents, [1, 2, 1, 2]);
    let data = Dataset::parse(&fs::read_to_string(out.join("data.txt")).unwrap()).unwrap();
    assert_eq!(data.len(), 8);

    let a = dir.path().join("b1");
    let b = dir.path().join("b2");
    for d in [&a, &b] {
        let o = bgl(&["synth", "--seed", "3", "--test-n", "2", "--out", p(d)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["graph.txt", "data.txt", "test.txt"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn synth_rejects_negative_noise() {
    let dir = tempfile::tempdir().unwrap();
    let o = bgl(&["synth", "--sigma", "-1", "--out", p(dir.path())]);
    assert_ne!(code(&o), 0);
}

#[test]
fn synth_without_coarse_types() {
    let dir = tempfile::tempdir().unwrap();
    let o = bgl(&[
        "synth",
        "--k",
        "5",
        "--m",
        "0",
        "--d",
        "2",
        "--n",
        "1",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let graph =
        LabelGraph::parse(&fs::read_to_string(dir.path().join("graph.txt")).unwrap()).unwrap();
    assert_eq!(graph.m(), 0);
}

#[test]
fn train_then_eval_on_separable_data() {
    let dir = tempfile::tempdir().unwrap();
    write_separable(dir.path());
    let out = dir.path().join("out");
    let o = bgl(&[
        "train",
        "--graph",
        p(&dir.path().join("graph.txt")),
        "--data",
        p(&dir.path().join("data.txt")),
        "--out",
        p(&out),
        "--epochs",
        "30",
        "--batch-size",
        "4",
        "--no-timing",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(
        stdout(&o).contains("train fine_acc=1.0000"),
        "{}",
        stdout(&o)
    );

    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    assert_eq!(
        header,
        ["epoch", "loss", "fine_acc", "coarse_acc_1", "seconds"]
    );
    assert_eq!(csv.lines().count(), 31);

    let o = bgl(&[
        "eval",
        "--graph",
        p(&dir.path().join("graph.txt")),
        "--data",
        p(&dir.path().join("data.txt")),
        "--model",
        p(&out.join("model.bglm")),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(
        stdout(&o).contains("eval fine_acc=1.0000 coarse_acc_1=1.0000"),
        "{}",
        stdout(&o)
    );
}

#[test]
fn train_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    write_separable(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = bgl(&[
            "train",
            "--mode",
            "bglm",
            "--extractor",
            "hidden",
            "--hidden-dim",
            "4",
            "--feature-dim",
            "3",
            "--graph",
            p(&dir.path().join("graph.txt")),
            "--data",
            p(&dir.path().join("data.txt")),
            "--out",
            p(&out),
            "--epochs",
            "5",
            "--workers",
            "2",
            "--no-timing",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        (
            fs::read(out.join("report.csv")).unwrap(),
            fs::read(out.join("model.bglm")).unwrap(),
        )
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    write_separable(dir.path());
    let cfg = dir.path().join("train.conf");
    fs::write(
        &cfg,
        format!(
            "# training defaults\ngraph = {}\ndata = {}\nepochs = 7\nno_timing = true\n",
            p(&dir.path().join("graph.txt")),
            p(&dir.path().join("data.txt")),
        ),
    )
    .unwrap();

    let out = dir.path().join("c1");
    let o = bgl(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(out.join("report.csv"))
            .unwrap()
            .lines()
            .count(),
        8
    );

    let out = dir.path().join("c2");
    let o = bgl(&[
        "train",
        "--config",
        p(&cfg),
        "--out",
        p(&out),
        "--epochs",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(out.join("report.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );
}

#[test]
fn missing_config_file_is_a_data_error() {
    let o = bgl(&["bench", "--config", "/nonexistent/bgl.conf"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bgl1_report_on_benchmark_spec_has_metric_column_per_type() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("bench");
    assert_eq!(
        code(&bgl(&["synth", "--seed", "1", "--out", p(&data_dir)])),
        0
    );
    let out = dir.path().join("run");
    let o = bgl(&[
        "train",
        "--mode",
        "bgl1",
        "--graph",
        p(&data_dir.join("graph.txt")),
        "--data",
        p(&data_dir.join("data.txt")),
        "--out",
        p(&out),
        "--epochs",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let metrics: Vec<&str> = header
        .into_iter()
        .filter(|h| *h != "epoch" && *h != "seconds")
        .collect();
    // loss, fine accuracy and one accuracy per coarse type (m = 2)
    assert_eq!(
        metrics,
        ["loss", "fine_acc", "coarse_acc_1", "coarse_acc_2"]
    );
}
