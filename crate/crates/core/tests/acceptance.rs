//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use common::*;
use pimtune::cli::gemv_tiles;
use pimtune::ir::{build_workload, random_inputs, Counters, Expr, ForKind, IntrinsicCall, Stmt, WorkloadKind, WorkloadSpec};
use pimtune::lower::{descriptors, lower, opt_bulk_transfer, LoweredModule};
use pimtune::machine::{interpret, MachineConfig};
use pimtune::pimopt::OptLevel;
use pimtune::sched::{replay, BindAxis, Instruction};
use pimtune::tune::{default_schedule, epsilon_at, tune, tune_cached, Bench, MeasureCache, SearchConfig};
use pimtune::verify::{verify, ViolationKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::{Duration, Instant};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(t0: Instant, limit: Duration) -> (bool, String) {
    let e = t0.elapsed();
    (e < limit, format!("{:.1}s of {}s", e.as_secs_f64(), limit.as_secs()))
}

fn boundary_gemv_tasklets(level: OptLevel, cfg: &MachineConfig) -> Vec<Counters> {
    let spec = WorkloadSpec::new(WorkloadKind::Gemv, &[7, 40]);
    let prog = build_workload(&spec).unwrap();
    let s = replay(&gemv_tiles(&spec), &prog).unwrap();
    let m = pimtune::compile(&s, level, cfg).unwrap();
    assert!(verify(&m, cfg).is_empty());
    let run = interpret(&m, &random_inputs(&prog, 1), cfg).unwrap();
    run.metrics.dpus[0].tasklets.clone()
}

fn c1_boundary_gemv(cfg: &MachineConfig) -> Outcome {
    let t0 = Instant::now();
    let t: Vec<Vec<Counters>> = OptLevel::ALL.iter().map(|&l| boundary_gemv_tasklets(l, cfg)).collect();
    let max = |l: usize, f: fn(&Counters) -> u64| t[l].iter().map(f).max().unwrap();
    let iters = |c: &Counters| c.innermost_iters;
    let guards = |c: &Counters| c.branches;
    let (o1, o2, o3) = (1, 2, 3);
    let boundary = t[o2].len() - 1;
    let (b2, b3) = (t[o2][boundary], t[o3][boundary]);
    let (time_ok, time) = within(t0, Duration::from_secs(1));
    let pass = t[o2].len() == 4
        && max(o1, iters) == 96
        && max(o2, iters) == 80
        && max(o2, guards) == 40 * max(o3, guards)
        && b2.dma_loads == 2 * b3.dma_loads
        && b2.innermost_iters == 2 * b3.innermost_iters
        && time_ok;
    outcome(
        pass,
        format!(
            "iters O1={} O2={}; guards O2={} O3={}; boundary tasklet dma {}->{} compute {}->{}; {time}",
            max(o1, iters),
            max(o2, iters),
            max(o2, guards),
            max(o3, guards),
            b2.dma_loads,
            b3.dma_loads,
            b2.innermost_iters,
            b3.innermost_iters
        ),
    )
}

fn c2_semantics(cfg: &MachineConfig) -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = Vec::new();
    for kind in KINDS {
        for _ in 0..200 {
            let v = random_verified(kind, &mut rng, cfg);
            if let Err(e) = check_against_oracle(&v, rng.gen(), cfg) {
                failures.push(e);
            }
        }
    }
    let (time_ok, time) = within(t0, Duration::from_secs(300));
    let first = failures.first().cloned().unwrap_or_default();
    outcome(failures.is_empty() && time_ok, format!("{} tuples, {} failures {first}; {time}", 200 * KINDS.len(), failures.len()))
}

/// Per-byte view of a transfer list, sorted.
fn byte_multiset(m: &LoweredModule) -> Vec<(String, i64, u32, i64, i64)> {
    let mut v: Vec<_> = descriptors(m)
        .iter()
        .flat_map(|d| {
            (0..d.bytes).map(move |i| (d.direction.to_string(), d.dpu, d.global, d.global_offset + i, d.mram_offset + i))
        })
        .collect();
    v.sort();
    v
}

fn c3_bulk() -> Outcome {
    let mut bad = Vec::new();
    for k in 2..=64i64 {
        for dpus in 1..=3i64 {
            let prog = build_workload(&WorkloadSpec::new(WorkloadKind::Va, &[dpus * k])).unwrap();
            let trace = vec![
                Instruction::Split { loop_: 0, factors: vec![Some(dpus), Some(1), None] },
                Instruction::Bind { loop_: 2, axis: BindAxis::DpuX },
                Instruction::Bind { loop_: 3, axis: BindAxis::Tasklet },
            ];
            let before = lower(&replay(&trace, &prog).unwrap()).unwrap();
            let after = opt_bulk_transfer(before.clone());
            let (n0, n1) = (descriptors(&before).len(), descriptors(&after).len());
            if n0 != k as usize * n1 || byte_multiset(&before) != byte_multiset(&after) {
                bad.push(format!("K={k} dpus={dpus}: {n0} -> {n1}"));
            }
        }
    }
    outcome(bad.is_empty(), format!("K in 2..=64 x 3 grids, {} mismatches {}", bad.len(), bad.first().cloned().unwrap_or_default()))
}

fn va_tiled(dpus: i64, tasklets: i64, tile: i64) -> Vec<Instruction> {
    use Instruction::*;
    vec![
        Split { loop_: 0, factors: vec![Some(dpus), Some(tasklets), None, Some(tile)] },
        Bind { loop_: 2, axis: BindAxis::DpuX },
        Bind { loop_: 3, axis: BindAxis::Tasklet },
        CacheRead { block: 1, index: 0 },
        ComputeAt { block: 6, loop_: 4 },
        CacheRead { block: 1, index: 1 },
        ComputeAt { block: 7, loop_: 4 },
        CacheWrite { block: 1, index: 0 },
        ReverseComputeAt { block: 8, loop_: 4 },
    ]
}

fn va_module(n: i64, dpus: i64, tasklets: i64, tile: i64, cfg: &MachineConfig) -> LoweredModule {
    let prog = build_workload(&WorkloadSpec::new(WorkloadKind::Va, &[n])).unwrap();
    let s = replay(&va_tiled(dpus, tasklets, tile), &prog).unwrap();
    pimtune::compile(&s, OptLevel::O3, cfg).unwrap()
}

/// One constructed module per violation kind.
fn violation_generators(cfg: &MachineConfig) -> Vec<(ViolationKind, LoweredModule)> {
    let base = va_module(64, 1, 4, 16, cfg);
    let per_copy = pimtune::verify::iram_estimate(&base.kernel, cfg);
    let copies = (cfg.iram_bytes / per_copy + 1) as usize;
    let iram = LoweredModule { kernel: Stmt::seq(vec![base.kernel.clone(); copies]), ..base.clone() };
    let zero = LoweredModule { kernel: Stmt::for_loop(0, Expr::Int(0), ForKind::Serial, base.kernel.clone()), ..base.clone() };
    // The DMA pass leaves misaligned tiles as scalar copies, so place one by hand.
    let (a_m, a_w) = (base.buffer_by_name("A_m").unwrap().id, base.buffer_by_name("A_w").unwrap().id);
    let dma = IntrinsicCall::DmaLoad { mram: a_m, mram_offset: Expr::Int(3), wram: a_w, wram_offset: Expr::Int(0), bytes: 16 };
    let misaligned = LoweredModule { kernel: Stmt::seq(vec![base.kernel.clone(), Stmt::Intrinsic(dma)]), ..base };
    vec![
        (ViolationKind::DpuCountExceeded, va_module(cfg.num_dpus_max * 2, cfg.num_dpus_max * 2, 1, 1, cfg)),
        (ViolationKind::TaskletCountExceeded, va_module(64, 1, cfg.tasklets_max + 8, 1, cfg)),
        (ViolationKind::WramOverflow, va_module(16 * 4096, 1, 16, 4096, cfg)),
        (ViolationKind::IramHeuristicOverflow, iram),
        (ViolationKind::DmaMisaligned, misaligned),
        (ViolationKind::ZeroExtentLoop, zero),
    ]
}

fn c4_verifier(cfg: &MachineConfig) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut faults = Vec::new();
    for i in 0..10_000 {
        let v = random_verified(KINDS[i % KINDS.len()], &mut rng, cfg);
        if let Err(e) = interpret(&v.module, &random_inputs(&v.prog, rng.gen()), cfg) {
            faults.push(format!("{}: {e}", v.spec.to_kv()));
        }
    }
    let missed: Vec<String> = violation_generators(cfg)
        .into_iter()
        .filter(|(kind, m)| !verify(m, cfg).iter().any(|v| v.kind == *kind))
        .map(|(kind, _)| format!("{kind:?}"))
        .collect();
    outcome(
        faults.is_empty() && missed.is_empty(),
        format!(
            "10000 verified candidates, {} runtime faults {}; generators missed: [{}]",
            faults.len(),
            faults.first().cloned().unwrap_or_default(),
            missed.join(",")
        ),
    )
}

fn c5_epsilon() -> Outcome {
    let mut bad = Vec::new();
    for trials in [50usize, 200, 1000] {
        let cfg = SearchConfig { max_trials: trials, ..Default::default() };
        let window = 0.4 * trials as f64;
        for t in 0..=trials {
            let want = if (t as f64) < window { 0.5 - 0.45 * t as f64 / window } else { 0.05 };
            let got = epsilon_at(t, &cfg);
            if (got - want).abs() > 1e-12 {
                bad.push(format!("T={trials} t={t}: {got} vs {want}"));
            }
        }
        let w = window as usize;
        if epsilon_at(0, &cfg) != 0.5 || epsilon_at(w, &cfg) != 0.05 || epsilon_at(trials, &cfg) != 0.05 {
            bad.push(format!("T={trials}: endpoints"));
        }
    }
    outcome(bad.is_empty(), format!("T in {{50,200,1000}}, {} mismatches {}", bad.len(), bad.first().cloned().unwrap_or_default()))
}

fn c6_balanced(cfg: &MachineConfig) -> Outcome {
    let t0 = Instant::now();
    let spec = WorkloadSpec::new(WorkloadKind::Mtv, &[256, 256]);
    let mut cache = MeasureCache::default();
    let (mut wins, mut worse) = (0, 0);
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let bal = SearchConfig { seed, ..Default::default() };
        let a = tune_cached(&spec, &bal, cfg, &mut cache).unwrap().best.cost.unwrap();
        let b = tune_cached(&spec, &bal.unbalanced(), cfg, &mut cache).unwrap().best.cost.unwrap();
        wins += (a <= b) as usize;
        worse += (a > 1.05 * b) as usize;
        worst = worst.max(a / b);
    }
    let (time_ok, time) = within(t0, Duration::from_secs(600));
    outcome(
        wins >= 16 && worse == 0 && time_ok,
        format!("{wins}/20 seeds at or below unbalanced, {worse} over 5% worse, worst ratio {worst:.4}; {time}"),
    )
}

fn c7_tuned_vs_default(cfg: &MachineConfig) -> Outcome {
    let t0 = Instant::now();
    let shapes = [
        (WorkloadKind::Mtv, [256, 256]),
        (WorkloadKind::Mtv, [1024, 128]),
        (WorkloadKind::Gemv, [512, 256]),
        (WorkloadKind::Gemv, [300, 100]),
    ];
    let mut rows = Vec::new();
    let mut pass = true;
    for (kind, shape) in shapes {
        let spec = WorkloadSpec::new(kind, &shape);
        let search = SearchConfig::default();
        let bench = Bench::new(&spec, cfg, search.opt_level).unwrap();
        let def = default_schedule(&bench.prog, cfg).unwrap();
        let def_cost = bench.evaluate(&def).unwrap().and_then(|e| e.cost).unwrap();
        let tuned = tune(&spec, &search, cfg).unwrap().best.cost.unwrap();
        pass &= tuned <= def_cost;
        rows.push(format!("{kind} {}x{}: {tuned:.2} vs {def_cost:.2}", shape[0], shape[1]));
    }
    let (time_ok, time) = within(t0, Duration::from_secs(600));
    outcome(pass && time_ok, format!("{}; {time}", rows.join(", ")))
}

fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["pimtune"];
    argv.extend_from_slice(args);
    pimtune::cli::run(argv, &mut std::io::sink(), &mut std::io::sink())
}

fn c8_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let out = |name: &str| dir.path().join(name);
    let first = out("first");
    let code = cli(&["autotune", "--workload", "mtv", "--m", "64", "--n", "48", "--trials", "60", "--seed", "7", "--out", first.to_str().unwrap()]);
    if code != 0 {
        return outcome(false, format!("autotune exited {code}"));
    }
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(first.join("manifest.json")).unwrap()).unwrap();
    let mut dirs = vec![first];
    for name in ["replay1", "replay2"] {
        let mut man = manifest.clone();
        man["out"] = serde_json::Value::String(out(name).to_string_lossy().into());
        let path = out(&format!("{name}.json"));
        std::fs::write(&path, man.to_string()).unwrap();
        let code = cli(&["autotune", "--manifest", path.to_str().unwrap()]);
        if code != 0 {
            return outcome(false, format!("manifest replay exited {code}"));
        }
        dirs.push(out(name));
    }
    let read = |d: &std::path::Path, f: &str| std::fs::read(d.join(f)).unwrap();
    let same = ["history.csv", "report.csv"].iter().all(|f| dirs.iter().all(|d| read(d, f) == read(&dirs[0], f)));
    outcome(same, "history.csv and report.csv identical across a run and two manifest replays".into())
}

fn main() {
    let cfg = MachineConfig::upmem_default();
    type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);
    let criteria: Vec<Criterion> = vec![
        ("1 boundary gemv counts", Box::new(|| c1_boundary_gemv(&cfg))),
        ("2 semantic preservation", Box::new(|| c2_semantics(&cfg))),
        ("3 bulk coalescing", Box::new(c3_bulk)),
        ("4 verifier soundness", Box::new(|| c4_verifier(&cfg))),
        ("5 epsilon schedule", Box::new(c5_epsilon)),
        ("6 balanced search", Box::new(|| c6_balanced(&cfg))),
        ("7 tuned vs default", Box::new(|| c7_tuned_vs_default(&cfg))),
        ("8 determinism", Box::new(c8_determinism)),
    ];
    // Optional criterion numbers on the command line select a subset.
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.split(' ').next() == Some(o.as_str())) {
            continue;
        }
        let o = run();
        failed += !o.pass as usize;
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
