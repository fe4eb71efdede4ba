#![allow(dead_code)]

use pimtune::ir::{build_workload, random_inputs, LoopProgram, ScalarType, Tensor, WorkloadKind, WorkloadSpec};
use pimtune::lower::LoweredModule;
use pimtune::machine::{interpret, MachineConfig};
use pimtune::pimopt::OptLevel;
use pimtune::sched::Schedule;
use pimtune::tune::generate_sketches;
use pimtune::verify::verify;
use rand::Rng;
use std::collections::BTreeMap;

pub const KINDS: [WorkloadKind; 7] = [
    WorkloadKind::Va,
    WorkloadKind::Geva,
    WorkloadKind::Red,
    WorkloadKind::Mtv,
    WorkloadKind::Gemv,
    WorkloadKind::Ttv,
    WorkloadKind::Mmtv,
];

/// Small shapes, mostly not multiples of any tile size.
pub fn random_spec(kind: WorkloadKind, rng: &mut impl Rng) -> WorkloadSpec {
    let shape: Vec<i64> = match kind {
        WorkloadKind::Va | WorkloadKind::Geva | WorkloadKind::Red => vec![rng.gen_range(1..=300)],
        WorkloadKind::Mtv | WorkloadKind::Gemv => vec![rng.gen_range(1..=48), rng.gen_range(1..=64)],
        WorkloadKind::Ttv | WorkloadKind::Mmtv => {
            vec![rng.gen_range(1..=8), rng.gen_range(1..=12), rng.gen_range(1..=24)]
        }
    };
    let dtype = if rng.gen_bool(0.5) { ScalarType::Int32 } else { ScalarType::Float32 };
    let mut spec = WorkloadSpec::new(kind, &shape).with_dtype(dtype);
    if spec.c.is_some() {
        spec.c = Some(rng.gen_range(-3..=3) as f64);
    }
    if spec.d.is_some() {
        spec.d = Some(rng.gen_range(-3..=3) as f64);
    }
    spec
}

/// Brute-force evaluation of the workload definition, in f64.
pub fn oracle(spec: &WorkloadSpec, inputs: &BTreeMap<String, Tensor>) -> Vec<f64> {
    let get = |name: &str| -> Vec<f64> {
        let t = &inputs[name];
        if t.dtype.is_float() {
            t.floats().iter().map(|&v| v as f64).collect()
        } else {
            t.ints().iter().map(|&v| v as f64).collect()
        }
    };
    let a = get("A");
    let (m, n, k) = (spec.m.unwrap_or(1) as usize, spec.n.unwrap_or(1) as usize, spec.k.unwrap_or(1) as usize);
    match spec.kind {
        WorkloadKind::Red => vec![a.iter().sum()],
        WorkloadKind::Va => a.iter().zip(get("B")).map(|(x, y)| x + y).collect(),
        WorkloadKind::Geva => {
            let (c, d) = (spec.c.unwrap(), spec.d.unwrap());
            a.iter().zip(get("B")).map(|(x, y)| c * x + d * y).collect()
        }
        WorkloadKind::Mtv | WorkloadKind::Gemv => {
            let b = get("B");
            let c = if spec.kind == WorkloadKind::Gemv { spec.c.unwrap() } else { 1.0 };
            (0..m).map(|i| (0..n).map(|j| c * a[i * n + j] * b[j]).sum()).collect()
        }
        WorkloadKind::Ttv => {
            let b = get("B");
            (0..m * n).map(|ij| (0..k).map(|l| a[ij * k + l] * b[l]).sum()).collect()
        }
        WorkloadKind::Mmtv => {
            let b = get("B");
            (0..m * n).map(|ij| (0..k).map(|l| a[ij * k + l] * b[(ij / n) * k + l]).sum()).collect()
        }
    }
}

pub fn output_values(t: &Tensor) -> Vec<f64> {
    if t.dtype.is_float() {
        t.floats().iter().map(|&v| v as f64).collect()
    } else {
        t.ints().iter().map(|&v| v as f64).collect()
    }
}

/// Bit-exact for integers; 1e-6 relative (absolute near zero) for floats.
pub fn matches_oracle(spec: &WorkloadSpec, got: &[f64], want: &[f64]) -> bool {
    got.len() == want.len()
        && got.iter().zip(want).all(|(g, w)| {
            if spec.dtype.is_float() {
                (g - w).abs() <= 1e-6 * w.abs().max(1.0)
            } else {
                g == w
            }
        })
}

/// A schedule drawn from a random sketch with random hole values.
pub fn random_schedule(prog: &LoopProgram, rng: &mut impl Rng) -> Option<Schedule> {
    let sketches = generate_sketches(prog);
    let sk = &sketches[rng.gen_range(0..sketches.len())];
    sk.instantiate(prog, &sk.sample(rng)).ok()
}

/// A random workload, schedule and level that compiles and passes the verifier.
pub struct Verified {
    pub spec: WorkloadSpec,
    pub prog: LoopProgram,
    pub module: LoweredModule,
}

pub fn random_verified(kind: WorkloadKind, rng: &mut impl Rng, cfg: &MachineConfig) -> Verified {
    loop {
        let spec = random_spec(kind, rng);
        let prog = build_workload(&spec).expect("valid spec");
        let Some(s) = random_schedule(&prog, rng) else { continue };
        let level = OptLevel::ALL[rng.gen_range(0..4)];
        let Ok(module) = pimtune::compile(&s, level, cfg) else { continue };
        if verify(&module, cfg).is_empty() {
            return Verified { spec, prog, module };
        }
    }
}

/// Interpret with fresh seeded inputs and compare against the oracle.
pub fn check_against_oracle(v: &Verified, seed: u64, cfg: &MachineConfig) -> Result<(), String> {
    let inputs = random_inputs(&v.prog, seed);
    let run = interpret(&v.module, &inputs, cfg).map_err(|e| format!("{}: runtime fault: {e}", v.spec.to_kv()))?;
    let out = &run.outputs[v.prog.buffer(v.prog.outputs[0]).name.as_str()];
    let (got, want) = (output_values(out), oracle(&v.spec, &inputs));
    if matches_oracle(&v.spec, &got, &want) {
        Ok(())
    } else {
        Err(format!("{}: output differs from oracle", v.spec.to_kv()))
    }
}
