mod common;

use common::*;
use pimtune::ir::{build_workload, evaluate_reference, random_inputs, Counters, ScalarType, WorkloadKind, WorkloadSpec};
use pimtune::lower::{descriptors, lower, opt_bulk_transfer, Grouping};
use pimtune::machine::{interpret, kernel_cycles, MachineConfig};
use pimtune::sched::{replay, BindAxis, Instruction};
use pimtune::tune::{
    balanced_top_k, epsilon_at, generate_sketches, tune, Bench, CostModel, Family, SearchConfig, TuningDatabase,
    TuningRecord,
};
use pimtune::verify::{verify, wram_footprint, ViolationKind};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_search(seed: u64) -> SearchConfig {
    SearchConfig { max_trials: 24, population: 16, batch: 4, seed, ..Default::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn verified_candidates_match_reference(seed in any::<u64>(), kind in 0..KINDS.len()) {
        let cfg = MachineConfig::upmem_default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_verified(KINDS[kind], &mut rng, &cfg);
        let inputs = random_inputs(&v.prog, seed);
        let run = interpret(&v.module, &inputs, &cfg).unwrap();
        let want = evaluate_reference(&v.prog, &inputs).unwrap();
        for (name, t) in &want {
            prop_assert!(run.outputs[name].approx_eq(t, 1e-6), "{}", v.spec.to_kv());
        }
    }

    #[test]
    fn bulk_transfer_divides_descriptors(k in 2i64..=64, dpus in 1i64..=4, wide in any::<bool>()) {
        let dtype = if wide { ScalarType::Int64 } else { ScalarType::Int32 };
        let prog = build_workload(&WorkloadSpec::new(WorkloadKind::Va, &[dpus * k]).with_dtype(dtype)).unwrap();
        let trace = vec![
            Instruction::Split { loop_: 0, factors: vec![Some(dpus), Some(1), None] },
            Instruction::Bind { loop_: 2, axis: BindAxis::DpuX },
            Instruction::Bind { loop_: 3, axis: BindAxis::Tasklet },
        ];
        let before = descriptors(&lower(&replay(&trace, &prog).unwrap()).unwrap());
        let after = descriptors(&opt_bulk_transfer(lower(&replay(&trace, &prog).unwrap()).unwrap()));
        prop_assert_eq!(before.len(), k as usize * after.len());
        prop_assert!(after.iter().all(|d| d.grouping == Grouping::Bulk && d.bytes == k * dtype.bytes()));
        let bytes = |ds: &[pimtune::lower::TransferDescriptor]| {
            let mut v: Vec<_> = ds
                .iter()
                .flat_map(|d| (0..d.bytes).map(move |i| (d.direction, d.dpu, d.global, d.global_offset + i, d.mram_offset + i)))
                .map(|(dir, p, g, go, mo)| (dir.to_string(), p, g, go, mo))
                .collect();
            v.sort();
            v
        };
        prop_assert_eq!(bytes(&before), bytes(&after));
    }

    #[test]
    fn epsilon_decays_monotonically(trials in 1usize..2000, t in 0usize..2000) {
        let cfg = SearchConfig { max_trials: trials, ..Default::default() };
        let (a, b) = (epsilon_at(t, &cfg), epsilon_at(t + 1, &cfg));
        prop_assert!(b <= a);
        prop_assert!((0.05..=0.5).contains(&a));
        prop_assert_eq!(epsilon_at(t, &cfg.unbalanced()), 0.05);
    }

    #[test]
    fn kernel_cycles_monotone(base in prop::array::uniform6(0u64..10_000), field in 0usize..6, bump in 1u64..1000, tasklets in 1i64..=24) {
        let cfg = MachineConfig::upmem_default();
        let make = |v: [u64; 6]| Counters {
            instrs: v[0],
            branches: v[1],
            dma_loads: v[2],
            dma_stores: v[3],
            dma_bytes: v[4],
            mram_scalar: v[5],
            ..Default::default()
        };
        let mut more = base;
        more[field] += bump;
        prop_assert!(kernel_cycles(&make(more), tasklets, &cfg) > kernel_cycles(&make(base), tasklets, &cfg));
    }

    #[test]
    fn linear_landscape_is_learned(w in prop::array::uniform4(-1.0f64..1.0), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut point = || -> Vec<f64> { std::iter::once(1.0).chain((0..3).map(|_| rng.gen_range(0.0..4.0))).collect() };
        let cost = |x: &[f64]| w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>().exp();
        let train: Vec<(Vec<f64>, f64)> = (0..50).map(|_| { let x = point(); let y = cost(&x); (x, y) }).collect();
        let held: Vec<Vec<f64>> = (0..20).map(|_| point()).collect();
        let m = CostModel::fit(&train);
        for x in train.iter().map(|(x, _)| x).chain(&held) {
            prop_assert!((m.predict(x) - cost(x)).abs() / cost(x) < 0.05);
        }
        prop_assert_eq!(CostModel::fit(&train), m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn instantiation_accepts_every_in_range_decision(seed in any::<u64>(), kind in 0..KINDS.len()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prog = build_workload(&random_spec(KINDS[kind], &mut rng)).unwrap();
        for sk in generate_sketches(&prog) {
            prop_assert!(sk.instantiate(&prog, &sk.sample(&mut rng)).is_ok());
        }
    }
}

#[test]
fn mutation_keeps_family_and_domains() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut flips = 0;
    for kind in KINDS {
        let prog = build_workload(&random_spec(kind, &mut rng)).unwrap();
        let sketches = generate_sketches(&prog);
        for _ in 0..1000 {
            let sk = &sketches[rng.gen_range(0..sketches.len())];
            let child = sk.mutate(&sk.sample(&mut rng), &mut rng);
            let s = sk.instantiate(&prog, &child).unwrap();
            flips += (s.has_rfactor() != (sk.family == Family::Rfactor)) as usize;
            assert!(child.iter().zip(&sk.holes).all(|(v, h)| h.domain.contains(v)));
        }
    }
    assert_eq!(flips, 0);
}

#[test]
fn both_families_inside_the_window() {
    let rec = |seq: usize, family: Family, cost: f64| TuningRecord {
        seq,
        workload: "w".into(),
        sketch: 0,
        family,
        decisions: vec![],
        trace: vec![],
        hash: format!("{seq:04}"),
        violations: vec![],
        cost: Some(cost),
        predicted: None,
        features: vec![],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let mut db = TuningDatabase::default();
        let (rf, nr) = (rng.gen_range(1..15), rng.gen_range(1..15));
        for i in 0..rf + nr {
            db.push(rec(i, if i < rf { Family::Rfactor } else { Family::NonRfactor }, rng.gen_range(1.0..100.0)));
        }
        let cfg = SearchConfig::default();
        let k = rng.gen_range(2..=10);
        let top = balanced_top_k(&db, k, 0, &cfg);
        let count = |f| top.iter().filter(|r| r.family == f).count();
        assert_eq!(top.len(), k.min(rf + nr));
        assert!(count(Family::Rfactor) >= 1 && count(Family::NonRfactor) >= 1);
        assert!(count(Family::Rfactor) >= (k / 2).min(rf));
        assert!(count(Family::NonRfactor) >= (k / 2).min(nr));
    }
}

#[test]
fn tuning_is_reproducible_and_curves_descend() {
    let cfg = MachineConfig::upmem_default();
    let spec = WorkloadSpec::new(WorkloadKind::Mtv, &[32, 24]);
    for seed in 0..3 {
        let a = tune(&spec, &small_search(seed), &cfg).unwrap();
        let b = tune(&spec, &small_search(seed), &cfg).unwrap();
        assert_eq!(a.history_csv(), b.history_csv());
        assert_eq!(a.db.to_jsonl(), b.db.to_jsonl());
        assert_eq!(a.best, b.best);
        let curve = a.best_curve();
        assert_eq!(curve.len(), 24);
        assert!(curve.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*curve.last().unwrap(), a.best.cost.unwrap());
    }
}

#[test]
fn stored_records_replay_to_their_cost() {
    let cfg = MachineConfig::upmem_default();
    let spec = WorkloadSpec::new(WorkloadKind::Mmtv, &[4, 6, 20]);
    let search = small_search(3);
    let report = tune(&spec, &search, &cfg).unwrap();
    let bench = Bench::new(&spec, &cfg, search.opt_level).unwrap();
    for r in &report.db.records {
        assert!(r.cost.is_none() || r.violations.is_empty());
        let s = replay(&r.trace, &bench.prog).unwrap();
        assert_eq!(s.structural_hash(), r.hash);
        let e = bench.evaluate(&s).unwrap().unwrap();
        assert_eq!(e.violations, r.violations);
        if let Some(c) = r.cost {
            assert_eq!(e.cost, Some(c));
        }
    }
}

#[test]
fn violation_values_reproduce_the_check() {
    let cfg = MachineConfig::upmem_default();
    let prog = build_workload(&WorkloadSpec::new(WorkloadKind::Va, &[16 * 2048])).unwrap();
    let trace = vec![
        Instruction::Split { loop_: 0, factors: vec![Some(1), Some(16), None, Some(2048)] },
        Instruction::Bind { loop_: 2, axis: BindAxis::DpuX },
        Instruction::Bind { loop_: 3, axis: BindAxis::Tasklet },
        Instruction::CacheRead { block: 1, index: 0 },
        Instruction::ComputeAt { block: 6, loop_: 4 },
    ];
    let m = pimtune::compile(&replay(&trace, &prog).unwrap(), pimtune::pimopt::OptLevel::O3, &cfg).unwrap();
    let v = verify(&m, &cfg);
    let wram = v.iter().find(|v| v.kind == ViolationKind::WramOverflow).unwrap();
    assert_eq!(wram.value, wram_footprint(&m.kernel, &m.buffers) * 16);
    assert_eq!(wram.value, 2048 * 4 * 16);
    assert_eq!(wram.limit, cfg.wram_bytes);
}

#[test]
fn pretty_printing_is_stable() {
    let cfg = MachineConfig::upmem_default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for kind in KINDS {
        let prog = build_workload(&random_spec(kind, &mut rng)).unwrap();
        let print = || {
            let s = pimtune::tune::default_schedule(&prog, &cfg)?;
            Some(pimtune::compile(&s, pimtune::pimopt::OptLevel::O3, &cfg).unwrap().pretty())
        };
        assert_eq!(print(), print());
    }
}

#[test]
fn gemv_cache_footprints() {
    use Instruction::*;
    let cfg = MachineConfig::upmem_default();
    let spec = WorkloadSpec::new(WorkloadKind::Gemv, &[7, 40]);
    let prog = build_workload(&spec).unwrap();
    let footprint = |trace: &[Instruction]| {
        let m = pimtune::compile(&replay(trace, &prog).unwrap(), pimtune::pimopt::OptLevel::O3, &cfg).unwrap();
        wram_footprint(&m.kernel, &m.buffers)
    };
    // Row loop outside the column tiles: one row of A per tile.
    assert_eq!(footprint(&pimtune::cli::gemv_tiles(&spec)), 16 * 4 + 16 * 4 + 2 * 4);
    // Column tiles outside the row loop: both rows of A per tile.
    let reordered = vec![
        Split { loop_: 0, factors: vec![Some(1), None, Some(2)] },
        Split { loop_: 1, factors: vec![None, Some(16)] },
        Bind { loop_: 3, axis: BindAxis::DpuX },
        Bind { loop_: 4, axis: BindAxis::Tasklet },
        Reorder { loops: vec![6, 5] },
        CacheRead { block: 2, index: 0 },
        ComputeAt { block: 8, loop_: 6 },
        CacheRead { block: 2, index: 1 },
        ComputeAt { block: 9, loop_: 6 },
        CacheWrite { block: 2, index: 0 },
        ReverseComputeAt { block: 10, loop_: 4 },
    ];
    assert_eq!(footprint(&reordered), 2 * 16 * 4 + 16 * 4 + 2 * 4);
}
