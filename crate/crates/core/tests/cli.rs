use pimtune::cli::{ABLATE_HEADER, REPORT_HEADER};
use pimtune::sched::{trace_to_json, BindAxis, Instruction};
use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

fn pimtune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pimtune")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn field<'a>(row: &'a str, header: &str, name: &str) -> &'a str {
    let i = header.trim_end().split(',').position(|h| h == name).unwrap();
    row.split(',').nth(i).unwrap().trim()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(pimtune(&[]).status.code(), Some(2));
    assert_eq!(pimtune(&["eval", "--workload", "conv2d"]).status.code(), Some(2));
    assert_eq!(pimtune(&["eval", "--workload", "mtv", "--m", "8"]).status.code(), Some(2));
    assert_eq!(pimtune(&["eval", "--workload", "gemv-boundary", "--opt-level", "7"]).status.code(), Some(2));
    assert_eq!(pimtune(&["--help"]).status.code(), Some(0));
}

#[test]
fn corrupted_trace_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("trace.json");
    std::fs::write(&p, "[{\"Split\": {\"loop\": 0, \"factors\": [1,").unwrap();
    let o = pimtune(&["eval", "--workload", "gemv-boundary", "--trace", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn violating_trace_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("trace.json");
    let trace = vec![
        Instruction::Split { loop_: 0, factors: vec![Some(1), Some(32), None] },
        Instruction::Bind { loop_: 2, axis: BindAxis::DpuX },
        Instruction::Bind { loop_: 3, axis: BindAxis::Tasklet },
    ];
    std::fs::write(&p, trace_to_json(&trace)).unwrap();
    let o = pimtune(&["verify", "--workload", "va", "--n", "64", "--trace", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("TaskletCountExceeded"));
    let o = pimtune(&["verify", "--workload", "gemv-boundary"]);
    assert_eq!((o.status.code(), stdout(&o).as_str()), (Some(0), "ok\n"));
}

#[test]
fn boundary_gemv_rows_per_level() {
    // (branches, dma, innermost iterations) of the busiest tasklet.
    let golden = [("0", "290", "0", "96"), ("1", "96", "13", "96"), ("2", "80", "13", "80"), ("3", "2", "13", "80")];
    for (level, branches, dma, iters) in golden {
        let o = pimtune(&["eval", "--workload", "gemv-boundary", "--opt-level", level]);
        assert_eq!(o.status.code(), Some(0));
        let text = stdout(&o);
        let row = text.lines().last().unwrap();
        assert_eq!(field(row, REPORT_HEADER, "branches"), branches, "O{level}");
        assert_eq!(field(row, REPORT_HEADER, "dma"), dma, "O{level}");
        assert_eq!(field(row, REPORT_HEADER, "iters"), iters, "O{level}");
    }
}

#[test]
fn ablation_claims() {
    let o = pimtune(&["ablate"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.starts_with(ABLATE_HEADER));
    let mut t: BTreeMap<(String, String), Vec<u64>> = BTreeMap::new();
    for row in text.lines().skip(1) {
        let f: Vec<&str> = row.split(',').collect();
        t.insert((f[0].into(), f[1].into()), f[2..].iter().map(|v| v.parse().unwrap()).collect());
    }
    let get = |p: &str, l: &str| t[&(p.to_string(), l.to_string())].clone();
    let (guards, dma, iters) = (0, 1, 2);
    assert_eq!(get("aligned", "O1"), get("aligned", "O2"));
    assert_eq!(get("aligned", "O2"), get("aligned", "O3"));
    assert!(get("misaligned-col", "O2")[iters] < get("misaligned-col", "O1")[iters]);
    assert!(get("misaligned-row", "O3")[guards] < get("misaligned-row", "O2")[guards]);
    assert_eq!(get("aligned", "O0")[guards], 0);
    for p in ["misaligned-row", "misaligned-col", "misaligned-both", "misaligned-va"] {
        assert!(get(p, "O1")[guards] < get(p, "O0")[guards], "{p}");
    }
    for p in ["aligned", "misaligned-row", "misaligned-col", "misaligned-both", "misaligned-va"] {
        assert!(get(p, "O1")[dma] >= 1);
        assert!(get(p, "O3")[guards] <= get(p, "O2")[guards], "{p}");
        assert!(get(p, "O3")[iters] <= get(p, "O1")[iters], "{p}");
    }
}

fn autotune(out: &Path, seed: &str) -> Output {
    pimtune(&["autotune", "--workload", "mmtv", "--m", "4", "--n", "8", "--k", "24", "--trials", "30", "--seed", seed, "--out", out.to_str().unwrap()])
}

#[test]
fn autotune_artifacts_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = autotune(&out, "3");
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["db.jsonl", "history.csv", "manifest.json", "best.trace.json", "best.ir.txt", "report.csv"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    let measured = history.lines().skip(1).filter(|l| l.ends_with(",true")).count();
    assert_eq!(measured, 30);
    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(report.starts_with(REPORT_HEADER));
    assert_eq!(report.lines().count(), 2);

    // The stored best trace replays to the same report row.
    let trace = out.join("best.trace.json");
    let o = pimtune(&["eval", "--workload", "mmtv", "--m", "4", "--n", "8", "--k", "24", "--trace", trace.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().last(), report.lines().last());

    let o = pimtune(&["report", "--db", out.join("db.jsonl").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let summary = stdout(&o);
    let header = summary.lines().next().unwrap().to_string();
    let row = summary.lines().nth(1).unwrap();
    assert_eq!(field(row, &header, "verified"), "30");
}

#[test]
fn autotune_seeds_differ_but_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        assert_eq!(autotune(&out, seed).status.code(), Some(0));
        std::fs::read_to_string(out.join("history.csv")).unwrap()
    };
    let (a, b, c) = (run("a", "1"), run("b", "1"), run("c", "2"));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn missing_database_is_an_io_failure() {
    let o = pimtune(&["report", "--db", "/nonexistent/db.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
}
