use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_nlroi");

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(cwd)
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
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["frobnicate"][..],
        &["gradcheck", "--bogus"],
        &[],
        &["train", "--variant", "big"],
    ] {
        let o = run(args, dir.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(stdout(&o).is_empty());
        assert!(!stderr(&o).is_empty());
    }
    let o = run(&["--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("oracle-diff"));
}

#[test]
fn internal_errors_exit_1_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["eval", "--weights", "missing.bin"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.bin"));
    assert!(stdout(&o).is_empty());

    std::fs::write(dir.path().join("bad.cfg"), "d = 8\nd_f = 0\n").unwrap();
    let o = run(&["gradcheck", "--config", "bad.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    std::fs::write(dir.path().join("junk.bin"), b"XXXXXXXX\0\0\0\0").unwrap();
    let o = run(&["eval", "--weights", "junk.bin"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("format"));
}

#[test]
fn oracle_diff_default_seed() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["oracle-diff", "--seed", "0"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let line = stdout(&o);
    let diff: f64 = line
        .split_whitespace()
        .find_map(|w| w.strip_prefix("max_abs_diff="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(diff < 1e-9);
}

#[test]
fn oracle_diff_with_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.cfg"),
        "n = 5\nd = 8\nh = 2\nw = 4\nattend_to_self = false\nscaling = full_flatten\n",
    )
    .unwrap();
    let o = run(
        &["oracle-diff", "--config", "c.cfg", "--seed", "3"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("ORACLE_DIFF "));
}

#[test]
fn gradcheck_default_config_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let last = stdout(&o).lines().last().unwrap().to_string();
    assert!(
        last.starts_with("GRADCHECK pass=true max_rel_err="),
        "{last}"
    );
}

#[test]
fn bench_csv_to_stdout_and_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("small.cfg"),
        "d = 4\nh = 2\nw = 2\nk_classes = 2\n",
    )
    .unwrap();
    let args = [
        "bench",
        "--config",
        "small.cfg",
        "--n-values",
        "2,4,8,16",
        "--reps",
        "5",
    ];
    let o = run(&args, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("n,d,d_f,d_g,h,w,reps,forward_ms,backward_ms")
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    for (row, n) in rows.iter().zip([2, 4, 8, 16]) {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(
            &fields[..7],
            &[&n.to_string()[..], "4", "1", "1", "2", "2", "5"]
        );
        for f in &fields[7..] {
            let decimals = f.split('.').nth(1).unwrap();
            assert_eq!(decimals.len(), 3, "{row}");
        }
    }

    let mut with_out = args.to_vec();
    with_out.extend(["--out", "b.csv"]);
    let o = run(&with_out, dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).is_empty());
    let file = std::fs::read_to_string(dir.path().join("b.csv")).unwrap();
    assert_eq!(file.lines().count(), 5);

    let o = run(&["bench", "--n-values", "4", "--reps", "2"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_eval_init_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("quick.cfg"),
        "steps = 250\nscenes_per_step = 2\n",
    )
    .unwrap();

    let o = run(
        &[
            "train",
            "--config",
            "quick.cfg",
            "--variant",
            "baseline",
            "--out",
            "w.bin",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let lines: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("step=100 loss="));
    assert!(lines[1].starts_with("step=200 loss="));
    let loss: f64 = lines[1].split("loss=").nth(1).unwrap().parse().unwrap();
    assert!(loss.is_finite());

    let o = run(
        &[
            "eval",
            "--config",
            "quick.cfg",
            "--weights",
            "w.bin",
            "--scenes",
            "100",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let acc: f64 = stdout(&o)
        .trim()
        .strip_prefix("ACCURACY ")
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let o = run(&["init", "--out", "fresh.bin", "--seed", "5"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let a = std::fs::read(dir.path().join("fresh.bin")).unwrap();
    run(&["init", "--out", "fresh2.bin", "--seed", "5"], dir.path());
    let b = std::fs::read(dir.path().join("fresh2.bin")).unwrap();
    assert_eq!(a, b);
    assert_eq!(&a[..8], b"NLROIW01");

    // weights trained for one shape do not load under another
    std::fs::write(dir.path().join("other.cfg"), "d = 8\n").unwrap();
    let o = run(
        &["eval", "--config", "other.cfg", "--weights", "w.bin"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_then_eval_reaches_target_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &["train", "--variant", "nlroi", "--out", "nl.bin"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 30);
    let o = run(&["eval", "--weights", "nl.bin"], dir.path());
    let acc: f64 = stdout(&o)
        .trim()
        .strip_prefix("ACCURACY ")
        .unwrap()
        .parse()
        .unwrap();
    assert!(acc >= 0.95, "{acc}");
}
