//! Evolutionary schedule search with a surrogate cost model.

mod estimate;
mod model;
mod sketch;

pub use estimate::{innermost_trips, static_time};
pub use model::{CostModel, MIN_RECORDS};
pub use sketch::{factor_domain, generate_sketches, Family, Hole, Sketch, SketchKind};

use crate::ir::{build_workload, evaluate_reference, random_inputs, LoopProgram, Tensor, WorkloadSpec};
use crate::lower::LoweredModule;
use crate::machine::{estimate_time, interpret, MachineConfig};
use crate::pimopt::OptLevel;
use crate::sched::{Instruction, Schedule};
use crate::verify::{verify, wram_footprint, Violation};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, Write as _};
use std::path::Path;
use thiserror::Error;

/// Seed for measurement inputs; fixed so stored costs replay exactly.
pub const INPUT_SEED: u64 = 0x5eed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub max_trials: usize,
    pub population: usize,
    pub batch: usize,
    pub top_k: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub exploration_window: f64,
    /// Probability that a mutated child receives a further mutation.
    pub mutation_rate: f64,
    /// Share of each population drawn fresh rather than from the database.
    pub fresh_ratio: f64,
    pub seed: u64,
    /// Split top-K evenly between families inside the exploration window.
    pub balanced: bool,
    /// Decay ε over the exploration window; otherwise hold `epsilon_end`.
    pub adaptive_epsilon: bool,
    pub opt_level: OptLevel,
    /// Model-only evolution steps per measurement round.
    pub generations: usize,
    /// Search rounds allowed without a new measurement before giving up.
    pub patience: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            max_trials: 200,
            population: 64,
            batch: 8,
            top_k: 10,
            epsilon_start: 0.5,
            epsilon_end: 0.05,
            exploration_window: 0.4,
            mutation_rate: 0.6,
            fresh_ratio: 0.5,
            seed: 0,
            balanced: true,
            adaptive_epsilon: true,
            opt_level: OptLevel::O3,
            generations: 8,
            patience: 50,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), TuneError> {
        let ok = (0.0..=1.0).contains(&self.epsilon_end)
            && self.epsilon_end <= self.epsilon_start
            && self.epsilon_start <= 1.0
            && self.exploration_window > 0.0
            && self.exploration_window < 1.0
            && self.max_trials > 0
            && self.population > 0
            && self.batch > 0
            && self.top_k > 0
            && (0.0..=1.0).contains(&self.fresh_ratio)
            && (0.0..=1.0).contains(&self.mutation_rate);
        if ok {
            Ok(())
        } else {
            Err(TuneError::Config("search parameters out of range".into()))
        }
    }

    /// The strategy without family balancing and with a fixed ε.
    pub fn unbalanced(&self) -> SearchConfig {
        SearchConfig { balanced: false, adaptive_epsilon: false, ..self.clone() }
    }
}

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("invalid search configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Workload(#[from] crate::ir::WorkloadError),
    #[error("no valid candidate found after {0} search rounds")]
    NoValidCandidate(usize),
    #[error("candidate {hash} disagrees with the reference evaluator: {detail}")]
    SemanticMismatch { hash: String, detail: String },
    #[error("database: {0}")]
    Database(String),
}

/// Linear decay from `epsilon_start` to `epsilon_end` over the exploration
/// window, constant afterwards.
pub fn epsilon_at(trial: usize, cfg: &SearchConfig) -> f64 {
    if !cfg.adaptive_epsilon {
        return cfg.epsilon_end;
    }
    let window = cfg.exploration_window * cfg.max_trials as f64;
    let t = trial as f64;
    if t >= window {
        cfg.epsilon_end
    } else {
        cfg.epsilon_start + (cfg.epsilon_end - cfg.epsilon_start) * t / window
    }
}

fn in_window(trial: usize, cfg: &SearchConfig) -> bool {
    (trial as f64) < cfg.exploration_window * cfg.max_trials as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningRecord {
    /// Position in the database; stands in for a wall-clock timestamp.
    pub seq: usize,
    pub workload: String,
    pub sketch: usize,
    pub family: Family,
    pub decisions: Vec<i64>,
    pub trace: Vec<Instruction>,
    pub hash: String,
    pub violations: Vec<Violation>,
    pub cost: Option<f64>,
    pub predicted: Option<f64>,
    pub features: Vec<f64>,
}

impl TuningRecord {
    pub fn verified(&self) -> bool {
        self.violations.is_empty() && self.cost.is_some()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TuningDatabase {
    pub records: Vec<TuningRecord>,
}

fn by_cost(a: &&TuningRecord, b: &&TuningRecord) -> std::cmp::Ordering {
    a.cost.partial_cmp(&b.cost).unwrap_or(std::cmp::Ordering::Equal).then_with(|| a.hash.cmp(&b.hash))
}

impl TuningDatabase {
    pub fn push(&mut self, mut r: TuningRecord) {
        r.seq = self.records.len();
        self.records.push(r);
    }

    pub fn measured(&self) -> impl Iterator<Item = &TuningRecord> {
        self.records.iter().filter(|r| r.verified())
    }

    pub fn best(&self, workload: &str) -> Option<&TuningRecord> {
        self.measured().filter(|r| r.workload == workload).min_by(by_cost)
    }

    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())
    }

    pub fn load(path: &Path) -> Result<TuningDatabase, TuneError> {
        let f = std::fs::File::open(path).map_err(|e| TuneError::Database(e.to_string()))?;
        let mut db = TuningDatabase::default();
        for line in std::io::BufReader::new(f).lines() {
            let line = line.map_err(|e| TuneError::Database(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            db.records.push(serde_json::from_str(&line).map_err(|e| TuneError::Database(e.to_string()))?);
        }
        Ok(db)
    }
}

/// Best measured records; inside the exploration window with balancing on,
/// half come from each family and a short family is backfilled.
pub fn balanced_top_k<'a>(db: &'a TuningDatabase, k: usize, trial: usize, cfg: &SearchConfig) -> Vec<&'a TuningRecord> {
    let mut all: Vec<&TuningRecord> = db.measured().collect();
    all.sort_by(by_cost);
    if !(cfg.balanced && in_window(trial, cfg)) {
        all.truncate(k);
        return all;
    }
    let rf: Vec<&TuningRecord> = all.iter().copied().filter(|r| r.family == Family::Rfactor).collect();
    let nr: Vec<&TuningRecord> = all.iter().copied().filter(|r| r.family == Family::NonRfactor).collect();
    let want_rf = k.div_ceil(2).min(rf.len());
    let want_nr = (k / 2).min(nr.len());
    let mut take_rf = want_rf;
    let mut take_nr = want_nr;
    let short = k - want_rf - want_nr;
    if short > 0 {
        let extra_rf = (rf.len() - want_rf).min(short);
        take_rf += extra_rf;
        take_nr += (nr.len() - want_nr).min(short - extra_rf);
    }
    let mut out: Vec<&TuningRecord> = rf[..take_rf].iter().chain(&nr[..take_nr]).copied().collect();
    out.sort_by(by_cost);
    out
}

/// Outcome of compiling, verifying and (when valid) running one schedule.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub module: LoweredModule,
    pub violations: Vec<Violation>,
    pub cost: Option<f64>,
    pub features: Vec<f64>,
}

/// Fixed-length feature vector of a compiled candidate.
pub fn features(m: &LoweredModule, cfg: &MachineConfig) -> Vec<f64> {
    let transfer: i64 = m
        .sites
        .iter()
        .map(|s| s.loops.iter().map(|l| l.1).product::<i64>() * m.buffers[s.global as usize].dtype.bytes())
        .sum::<i64>()
        * m.num_dpus();
    vec![
        1.0,
        static_time(m, cfg).max(1e-9).ln(),
        (m.num_dpus() as f64).ln(),
        (m.tasklets as f64).ln(),
        (1.0 + wram_footprint(&m.kernel, &m.buffers) as f64).ln(),
        if m.has_rfactor { 1.0 } else { 0.0 },
        (1.0 + transfer as f64).ln(),
        (1.0 + innermost_trips(m)).ln(),
        (1.0 + m.kernel.node_count() as f64).ln(),
    ]
}

/// Everything needed to measure candidates of one workload.
pub struct Bench {
    pub prog: LoopProgram,
    pub inputs: BTreeMap<String, Tensor>,
    pub reference: BTreeMap<String, Tensor>,
    pub machine: MachineConfig,
    pub level: OptLevel,
}

impl Bench {
    pub fn new(spec: &WorkloadSpec, machine: &MachineConfig, level: OptLevel) -> Result<Bench, TuneError> {
        let prog = build_workload(spec)?;
        let inputs = random_inputs(&prog, INPUT_SEED);
        let reference = evaluate_reference(&prog, &inputs).map_err(|e| TuneError::Config(e.to_string()))?;
        Ok(Bench { prog, inputs, reference, machine: machine.clone(), level })
    }

    pub fn compile(&self, s: &Schedule) -> Option<(LoweredModule, Vec<Violation>)> {
        let m = crate::compile(s, self.level, &self.machine).ok()?;
        let v = verify(&m, &self.machine);
        Some((m, v))
    }

    /// Run a verified module and check it against the reference outputs.
    pub fn run(&self, m: &LoweredModule, hash: &str) -> Result<f64, TuneError> {
        let r = interpret(m, &self.inputs, &self.machine)
            .map_err(|e| TuneError::SemanticMismatch { hash: hash.to_string(), detail: e.to_string() })?;
        for (name, want) in &self.reference {
            let got = &r.outputs[name];
            if !got.approx_eq(want, 1e-6) {
                return Err(TuneError::SemanticMismatch { hash: hash.to_string(), detail: format!("output `{name}` differs") });
            }
        }
        Ok(estimate_time(&r.metrics, &self.machine))
    }

    pub fn evaluate(&self, s: &Schedule) -> Result<Option<Evaluation>, TuneError> {
        let Some((module, violations)) = self.compile(s) else {
            return Ok(None);
        };
        let cost = if violations.is_empty() { Some(self.run(&module, &s.structural_hash())?) } else { None };
        let features = self.inspect_uncached(s).map(|e| e.features).unwrap_or_default();
        Ok(Some(Evaluation { module, violations, cost, features }))
    }
}

/// The fixed library-style schedule: rows spread over DPUs and 16
/// tasklets, 16-element cache tiles.
pub fn default_decisions(sk: &Sketch, prog: &LoopProgram, machine: &MachineConfig) -> Option<Vec<i64>> {
    if sk.kind != SketchKind::Spatial1d {
        return None;
    }
    let def = prog.block.as_ref()?;
    let p = def.axes.iter().find(|a| !a.reduce)?.extent;
    let pow2_le = |n: i64| if n < 1 { 1 } else { 1i64 << (63 - n.leading_zeros()) };
    let tasklets = pow2_le(p.min(16));
    let dpus = pow2_le((p / 16).max(1).min(machine.num_dpus_max));
    let mut d = Vec::new();
    for h in &sk.holes {
        let v = match h.name.as_str() {
            "dpu_x" => dpus,
            "tasklet" => tasklets,
            "inner_p" => 1,
            "inner_q" | "inner_r" => *h.domain.iter().filter(|v| **v <= 16).max()?,
            "write_at" => 0,
            _ => *h.domain.last()?,
        };
        d.push(v);
    }
    Some(d)
}

pub fn default_schedule(prog: &LoopProgram, machine: &MachineConfig) -> Option<Schedule> {
    let sk = generate_sketches(prog).into_iter().find(|s| s.kind == SketchKind::Spatial1d)?;
    let d = default_decisions(&sk, prog, machine)?;
    sk.instantiate(prog, &d).ok()
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub trial: usize,
    pub best_cost: Option<f64>,
    pub cost: Option<f64>,
    pub family: Family,
    pub verified: bool,
}

#[derive(Clone, Debug)]
pub struct TuneReport {
    pub workload: String,
    pub best: TuningRecord,
    pub history: Vec<HistoryRow>,
    pub db: TuningDatabase,
}

fn fmt_cost(c: Option<f64>) -> String {
    c.map(|c| format!("{c:.6}")).unwrap_or_default()
}

impl TuneReport {
    pub fn history_csv(&self) -> String {
        let mut out = String::from("trial,best_cost,cost,family,verified\n");
        for r in &self.history {
            writeln!(out, "{},{},{},{},{}", r.trial, fmt_cost(r.best_cost), fmt_cost(r.cost), r.family, r.verified)
                .unwrap();
        }
        out
    }

    /// Best cost after each measured trial.
    pub fn best_curve(&self) -> Vec<f64> {
        self.history.iter().filter(|r| r.verified).filter_map(|r| r.best_cost).collect()
    }
}

struct Candidate {
    sketch: usize,
    decisions: Vec<i64>,
    /// Present when this round built it; cached candidates are rebuilt on demand.
    schedule: Option<Schedule>,
    hash: String,
}

impl Candidate {
    fn schedule(&mut self, sketches: &[Sketch], prog: &LoopProgram) -> &Schedule {
        self.schedule.get_or_insert_with(|| {
            sketches[self.sketch].instantiate(prog, &self.decisions).expect("instantiated before")
        })
    }
}

/// Result of compiling and measuring one schedule, without the module.
#[derive(Clone, Debug, PartialEq)]
pub struct Measured {
    pub violations: Vec<Violation>,
    pub features: Vec<f64>,
    pub cost: Option<f64>,
}

/// Memoized measurements keyed by workload, level and schedule hash.
/// Measurement is deterministic, so runs on the same machine can share one.
#[derive(Debug, Default)]
pub struct MeasureCache {
    entries: HashMap<String, Option<Measured>>,
    /// Structural hash per (workload, sketch, decisions); `None` when the
    /// decisions do not instantiate.
    hashes: HashMap<(String, usize, Vec<i64>), Option<String>>,
}

impl MeasureCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn cache_key(workload: &str, level: OptLevel, hash: &str) -> String {
    format!("{workload}/{level}/{hash}")
}

impl Bench {
    /// Compile and verify, reusing cached results. `None` when lowering fails.
    fn inspect(&self, key: &str, c: &mut Candidate, sketches: &[Sketch], cache: &mut MeasureCache) -> Option<Measured> {
        if let Some(e) = cache.entries.get(key) {
            return e.clone();
        }
        let r = self.inspect_uncached(c.schedule(sketches, &self.prog));
        cache.entries.insert(key.to_string(), r.clone());
        r
    }

    /// Everything but bank-parallel grouping, which affects neither the
    /// verifier nor the features.
    fn inspect_uncached(&self, s: &Schedule) -> Option<Measured> {
        let m = crate::lower::opt_bulk_transfer(crate::lower::lower(s).ok()?);
        let m = crate::pimopt::optimize(m, self.level);
        let violations = verify(&m, &self.machine);
        Some(Measured { features: features(&m, &self.machine), violations, cost: None })
    }

    fn measure(&self, key: &str, hash: &str, s: &Schedule, cache: &mut MeasureCache) -> Result<Option<f64>, TuneError> {
        let Some(Some(e)) = cache.entries.get(key) else {
            return Ok(None);
        };
        if e.cost.is_some() || !e.violations.is_empty() {
            return Ok(e.cost);
        }
        let (m, _) = self.compile(s).expect("lowered during inspection");
        let c = self.run(&m, hash)?;
        if let Some(Some(e)) = cache.entries.get_mut(key) {
            e.cost = Some(c);
        }
        Ok(Some(c))
    }
}

/// Run the search until `max_trials` candidates have been measured.
pub fn tune(spec: &WorkloadSpec, cfg: &SearchConfig, machine: &MachineConfig) -> Result<TuneReport, TuneError> {
    tune_cached(spec, cfg, machine, &mut MeasureCache::default())
}

/// As [`tune`], sharing measurements with other runs on the same machine.
pub fn tune_cached(
    spec: &WorkloadSpec,
    cfg: &SearchConfig,
    machine: &MachineConfig,
    cache: &mut MeasureCache,
) -> Result<TuneReport, TuneError> {
    cfg.validate()?;
    let bench = Bench::new(spec, machine, cfg.opt_level)?;
    let workload = spec.fingerprint();
    let sketches = generate_sketches(&bench.prog);
    let families: Vec<Family> = sketches.iter().map(|s| s.family).collect::<BTreeSet<_>>().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut db = TuningDatabase::default();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut model = CostModel::default();
    let mut history = Vec::new();
    let mut measured = 0usize;
    let mut best: Option<f64> = None;
    let mut idle = 0usize;
    let mut rounds = 0usize;

    while measured < cfg.max_trials && idle < cfg.patience {
        rounds += 1;
        let before = measured;
        let mut local = BTreeSet::new();
        let mut score = |raw: Vec<(usize, Vec<i64>)>, local: &mut BTreeSet<String>| {
            materialize(&sketches, &bench.prog, &workload, raw, &seen, local, cache)
                .into_iter()
                .map(|mut c| {
                    let key = cache_key(&workload, cfg.opt_level, &c.hash);
                    let e = bench.inspect(&key, &mut c, &sketches, cache);
                    let pred = match &e {
                        Some(e) if e.violations.is_empty() => model.predict(&e.features),
                        _ => f64::INFINITY,
                    };
                    (c, key, e, pred)
                })
                .collect::<Vec<_>>()
        };
        let raw = population(&sketches, &families, &db, measured, cfg, &mut rng);
        let mut scored: Vec<(Candidate, String, Option<Measured>, f64)> = score(raw, &mut local);
        // Further generations evolve against the model alone.
        for _ in 1..cfg.generations {
            if !model.is_trained() {
                break;
            }
            let mut order: Vec<usize> = (0..scored.len()).filter(|&i| scored[i].3.is_finite()).collect();
            order.sort_by(|&a, &b| scored[a].3.total_cmp(&scored[b].3).then_with(|| scored[a].0.hash.cmp(&scored[b].0.hash)));
            order.truncate((cfg.population / 4).max(1));
            if order.is_empty() {
                break;
            }
            let children: Vec<(usize, Vec<i64>)> = (0..cfg.population / 2)
                .map(|i| {
                    let p = &scored[order[i % order.len()]].0;
                    let sk = &sketches[p.sketch];
                    let mut d = sk.mutate(&p.decisions, &mut rng);
                    while rng.gen::<f64>() < cfg.mutation_rate {
                        d = sk.mutate(&d, &mut rng);
                    }
                    (p.sketch, d)
                })
                .collect();
            let next = score(children, &mut local);
            scored.extend(next);
        }
        let eps = epsilon_at(measured, cfg);
        let mut batch = Vec::new();
        while batch.len() < cfg.batch && !scored.is_empty() {
            let i = if rng.gen::<f64>() < eps {
                rng.gen_range(0..scored.len())
            } else {
                (0..scored.len())
                    .min_by(|&a, &b| {
                        scored[a]
                            .3
                            .partial_cmp(&scored[b].3)
                            .unwrap_or(std::cmp::Ordering::Equal)
                            .then_with(|| scored[a].0.hash.cmp(&scored[b].0.hash))
                    })
                    .expect("nonempty")
            };
            batch.push(scored.swap_remove(i));
        }
        for (mut cand, key, entry, pred) in batch {
            if measured >= cfg.max_trials {
                break;
            }
            seen.insert(cand.hash.clone());
            let Some(entry) = entry else {
                continue;
            };
            let hash = cand.hash.clone();
            let cost = bench.measure(&key, &hash, cand.schedule(&sketches, &bench.prog), cache)?;
            if let Some(c) = cost {
                measured += 1;
                best = Some(best.map_or(c, |b: f64| b.min(c)));
            }
            let family = sketches[cand.sketch].family;
            let trace = cand.schedule(&sketches, &bench.prog).trace.clone();
            history.push(HistoryRow { trial: measured, best_cost: best, cost, family, verified: cost.is_some() });
            db.push(TuningRecord {
                seq: 0,
                workload: workload.clone(),
                sketch: cand.sketch,
                family,
                decisions: cand.decisions,
                trace,
                hash: cand.hash,
                violations: entry.violations,
                cost,
                predicted: model.is_trained().then_some(pred),
                features: entry.features,
            });
        }
        let samples: Vec<(Vec<f64>, f64)> = db.measured().map(|r| (r.features.clone(), r.cost.unwrap())).collect();
        model = CostModel::fit(&samples);
        idle = if measured > before { 0 } else { idle + 1 };
    }
    let best = db.best(&workload).cloned().ok_or(TuneError::NoValidCandidate(rounds))?;
    Ok(TuneReport { workload, best, history, db })
}

#[allow(clippy::too_many_arguments)]
fn population(
    sketches: &[Sketch],
    families: &[Family],
    db: &TuningDatabase,
    trial: usize,
    cfg: &SearchConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, Vec<i64>)> {
    let parents = balanced_top_k(db, cfg.top_k, trial, cfg);
    let n_fresh = if parents.is_empty() {
        cfg.population
    } else {
        (cfg.population as f64 * cfg.fresh_ratio).round() as usize
    };
    let mut raw: Vec<(usize, Vec<i64>)> = Vec::new();
    for _ in 0..n_fresh {
        let fam = *families.choose(rng).expect("at least one sketch");
        let ids: Vec<usize> = sketches.iter().filter(|s| s.family == fam).map(|s| s.id).collect();
        let id = *ids.choose(rng).expect("family has sketches");
        raw.push((id, sketches[id].sample(rng)));
    }
    for i in 0..cfg.population - n_fresh.min(cfg.population) {
        let p = parents[i % parents.len()];
        let sk = &sketches[p.sketch];
        let mut d = sk.mutate(&p.decisions, rng);
        while rng.gen::<f64>() < cfg.mutation_rate {
            d = sk.mutate(&d, rng);
        }
        raw.push((p.sketch, d));
    }
    raw
}

/// Instantiate decisions, dropping failures and anything already seen.
fn materialize(
    sketches: &[Sketch],
    prog: &LoopProgram,
    workload: &str,
    raw: Vec<(usize, Vec<i64>)>,
    seen: &BTreeSet<String>,
    local: &mut BTreeSet<String>,
    cache: &mut MeasureCache,
) -> Vec<Candidate> {
    let mut out = Vec::new();
    for (id, d) in raw {
        let memo = (workload.to_string(), id, d);
        let (hash, schedule) = match cache.hashes.get(&memo) {
            Some(None) => continue,
            Some(Some(h)) => (h.clone(), None),
            None => match sketches[id].instantiate(prog, &memo.2) {
                Ok(s) => {
                    let h = s.structural_hash();
                    cache.hashes.insert(memo.clone(), Some(h.clone()));
                    (h, Some(s))
                }
                Err(_) => {
                    cache.hashes.insert(memo, None);
                    continue;
                }
            },
        };
        if seen.contains(&hash) || !local.insert(hash.clone()) {
            continue;
        }
        out.push(Candidate { sketch: id, decisions: memo.2, schedule, hash });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(family: Family, cost: f64, i: usize) -> TuningRecord {
        TuningRecord {
            seq: i,
            workload: "w".into(),
            sketch: 0,
            family,
            decisions: vec![],
            trace: vec![],
            hash: format!("{i:04}"),
            violations: vec![],
            cost: Some(cost),
            predicted: None,
            features: vec![],
        }
    }

    #[test]
    fn epsilon_schedule() {
        let cfg = SearchConfig { max_trials: 1000, ..Default::default() };
        assert_eq!(epsilon_at(0, &cfg), 0.5);
        assert!((epsilon_at(200, &cfg) - 0.275).abs() < 1e-12);
        assert_eq!(epsilon_at(400, &cfg), 0.05);
        assert_eq!(epsilon_at(999, &cfg), 0.05);
    }

    #[test]
    fn balanced_selection_and_backfill() {
        let cfg = SearchConfig { max_trials: 100, ..Default::default() };
        let mut db = TuningDatabase::default();
        for i in 0..10 {
            db.push(record(Family::Rfactor, 10.0 + i as f64, i));
            db.push(record(Family::NonRfactor, 1.0 + i as f64, 100 + i));
        }
        let top = balanced_top_k(&db, 4, 0, &cfg);
        assert_eq!(top.iter().filter(|r| r.family == Family::Rfactor).count(), 2);
        let late = balanced_top_k(&db, 4, 90, &cfg);
        assert!(late.iter().all(|r| r.family == Family::NonRfactor));

        let mut only = TuningDatabase::default();
        for i in 0..6 {
            only.push(record(Family::NonRfactor, i as f64, i));
        }
        assert_eq!(balanced_top_k(&only, 4, 0, &cfg).len(), 4);
    }
}
