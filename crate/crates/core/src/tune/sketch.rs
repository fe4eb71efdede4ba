use crate::ir::LoopProgram;
use crate::sched::{create_schedule, BindAxis, Handle, Instruction, Schedule, ScheduleError};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Rfactor,
    NonRfactor,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Rfactor => "rfactor",
            Family::NonRfactor => "non-rfactor",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SketchKind {
    /// First spatial axis over dpu.x and tasklets, the rest serial.
    Spatial1d,
    /// First two spatial axes over dpu.x and dpu.y.
    Spatial2d,
    /// Spatial axis over dpu.x, reduction over dpu.y through rfactor.
    Rfactor2d,
    /// Pure reduction on one DPU and one tasklet.
    ReduceSerial,
    /// Pure reduction spread over DPUs and tasklets through rfactor.
    ReduceRfactor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hole {
    pub name: String,
    /// Candidate values; for location holes, indices into the legal loop list.
    pub domain: Vec<i64>,
}

/// A trace template whose split factors and cache locations are holes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sketch {
    pub id: usize,
    pub kind: SketchKind,
    pub family: Family,
    pub holes: Vec<Hole>,
}

/// Divisors of `n` together with the powers of two not above it.
pub fn factor_domain(n: i64) -> Vec<i64> {
    let mut v: Vec<i64> = (1..=n).filter(|d| n % d == 0).collect();
    let mut p = 1;
    while p <= n {
        v.push(p);
        p *= 2;
    }
    v.sort_unstable();
    v.dedup();
    v
}

struct Axes {
    spatial: Vec<(Handle, i64)>,
    reduce: Option<(Handle, i64)>,
}

fn axes(prog: &LoopProgram) -> Axes {
    let def = prog.block.as_ref().expect("workload program");
    let mut spatial = Vec::new();
    let mut reduce = None;
    for (h, a) in def.axes.iter().enumerate() {
        if a.reduce {
            reduce = Some((h as Handle, a.extent));
        } else {
            spatial.push((h as Handle, a.extent));
        }
    }
    Axes { spatial, reduce }
}

fn hole(name: &str, extent: i64) -> Hole {
    Hole { name: name.to_string(), domain: factor_domain(extent) }
}

fn loc(name: &str, choices: usize) -> Hole {
    Hole { name: name.to_string(), domain: (0..choices as i64).collect() }
}

/// Sketch families for a workload program.
pub fn generate_sketches(prog: &LoopProgram) -> Vec<Sketch> {
    let ax = axes(prog);
    let def = prog.block.as_ref().expect("workload program");
    let reads = def.reads.len();
    let mut out = Vec::new();
    let mut push = |kind, family, holes| {
        let id = out.len();
        out.push(Sketch { id, kind, family, holes });
    };
    let read_locs = |n: usize| (0..reads).map(move |i| loc(&format!("read{i}_at"), n));
    if let Some(&(_, p)) = ax.spatial.first() {
        let q = ax.spatial.get(1).map(|a| a.1);
        let r = ax.reduce.map(|a| a.1);
        // Tile loops at or below the tasklet loop where caches may sit.
        let outer = 2 + usize::from(q.is_some()) + usize::from(r.is_some());
        let above_r = 2 + usize::from(q.is_some());

        let mut h = vec![hole("dpu_x", p), hole("tasklet", p), hole("inner_p", p)];
        if let Some(q) = q {
            h.push(hole("inner_q", q));
        }
        if let Some(r) = r {
            h.push(hole("inner_r", r));
        }
        h.extend(read_locs(outer));
        h.push(loc("write_at", above_r));
        push(SketchKind::Spatial1d, Family::NonRfactor, h);

        if let Some(q) = q {
            let mut h = vec![hole("dpu_x", p), hole("tasklet", p), hole("inner_p", p), hole("dpu_y", q), hole("inner_q", q)];
            if let Some(r) = r {
                h.push(hole("inner_r", r));
            }
            h.extend(read_locs(outer));
            h.push(loc("write_at", above_r));
            push(SketchKind::Spatial2d, Family::NonRfactor, h);
        }
        if let Some(r) = r {
            let mut h = vec![hole("dpu_x", p), hole("tasklet", p), hole("inner_p", p), hole("dpu_y", r), hole("inner_r", r)];
            if let Some(q) = q {
                h.push(hole("inner_q", q));
            }
            h.extend(read_locs(outer));
            h.push(loc("write_at", above_r));
            h.push(hole("host_tile", p));
            push(SketchKind::Rfactor2d, Family::Rfactor, h);
        }
    } else if let Some((_, r)) = ax.reduce {
        let mut h = vec![hole("inner_r", r)];
        h.extend(read_locs(1));
        push(SketchKind::ReduceSerial, Family::NonRfactor, h);
        let mut h = vec![hole("partials", r), hole("dpu_x", r), hole("inner_r", r)];
        h.extend(read_locs(2));
        push(SketchKind::ReduceRfactor, Family::Rfactor, h);
    }
    out
}

struct Builder {
    s: Schedule,
    trace: Vec<Instruction>,
}

impl Builder {
    fn apply(&mut self, i: Instruction) -> Result<(), ScheduleError> {
        self.s = self.s.apply(&i)?;
        self.trace.push(i);
        Ok(())
    }

    fn split(&mut self, h: Handle, factors: Vec<Option<i64>>) -> Result<Vec<Handle>, ScheduleError> {
        let first = self.s.next_handle();
        let n = factors.len() as Handle;
        self.apply(Instruction::Split { loop_: h, factors })?;
        Ok((first..first + n).collect())
    }

    fn bind(&mut self, h: Handle, axis: BindAxis) -> Result<(), ScheduleError> {
        self.apply(Instruction::Bind { loop_: h, axis })
    }

    fn caches(&mut self, reads: usize, read_at: &[&[Handle]], write_at: Option<&[Handle]>, d: &mut Decisions) -> Result<(), ScheduleError> {
        let block = self.s.block_handles()[0];
        for (i, choices) in read_at.iter().enumerate().take(reads) {
            let c = self.s.next_handle();
            self.apply(Instruction::CacheRead { block, index: i })?;
            let at = choices[d.next() as usize];
            self.apply(Instruction::ComputeAt { block: c, loop_: at })?;
        }
        if let Some(choices) = write_at {
            let c = self.s.next_handle();
            self.apply(Instruction::CacheWrite { block, index: 0 })?;
            let at = choices[d.next() as usize];
            self.apply(Instruction::ReverseComputeAt { block: c, loop_: at })?;
        }
        Ok(())
    }
}

struct Decisions<'a> {
    vals: &'a [i64],
    pos: usize,
}

impl Decisions<'_> {
    fn next(&mut self) -> i64 {
        let v = self.vals[self.pos];
        self.pos += 1;
        v
    }
}

impl Sketch {
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<i64> {
        self.holes.iter().map(|h| h.domain[rng.gen_range(0..h.domain.len())]).collect()
    }

    /// Resample exactly one hole.
    pub fn mutate(&self, decisions: &[i64], rng: &mut impl Rng) -> Vec<i64> {
        let mut d = decisions.to_vec();
        let i = rng.gen_range(0..self.holes.len());
        d[i] = self.holes[i].domain[rng.gen_range(0..self.holes[i].domain.len())];
        d
    }

    /// Replay the sketch with concrete decisions.
    pub fn instantiate(&self, prog: &LoopProgram, decisions: &[i64]) -> Result<Schedule, ScheduleError> {
        if decisions.len() != self.holes.len()
            || decisions.iter().zip(&self.holes).any(|(v, h)| !h.domain.contains(v))
        {
            return Err(ScheduleError::Illegal("decision outside its hole domain".into()));
        }
        let ax = axes(prog);
        let reads = prog.block.as_ref().map(|b| b.reads.len()).unwrap_or(0);
        let mut b = Builder { s: create_schedule(prog)?, trace: Vec::new() };
        let mut d = Decisions { vals: decisions, pos: 0 };
        match self.kind {
            SketchKind::Spatial1d | SketchKind::Spatial2d | SketchKind::Rfactor2d => {
                let (dx, t, ip) = (d.next(), d.next(), d.next());
                let p = b.split(ax.spatial[0].0, vec![Some(dx), Some(t), None, Some(ip)])?;
                let (mut q0, mut q, mut r0, mut r) = (None, None, None, None);
                match self.kind {
                    SketchKind::Spatial1d => {
                        if let Some(&(qh, _)) = ax.spatial.get(1) {
                            q = Some(b.split(qh, vec![None, Some(d.next())])?);
                        }
                        if let Some((rh, _)) = ax.reduce {
                            r = Some(b.split(rh, vec![None, Some(d.next())])?);
                        }
                    }
                    SketchKind::Spatial2d => {
                        let (dy, iq) = (d.next(), d.next());
                        let qs = b.split(ax.spatial[1].0, vec![Some(dy), None, Some(iq)])?;
                        q0 = Some(qs[0]);
                        q = Some(qs[1..].to_vec());
                        if let Some((rh, _)) = ax.reduce {
                            r = Some(b.split(rh, vec![None, Some(d.next())])?);
                        }
                    }
                    _ => {
                        let (dy, ir) = (d.next(), d.next());
                        let rs = b.split(ax.reduce.expect("reduction").0, vec![Some(dy), None, Some(ir)])?;
                        r0 = Some(rs[0]);
                        r = Some(rs[1..].to_vec());
                        if let Some(&(qh, _)) = ax.spatial.get(1) {
                            q = Some(b.split(qh, vec![None, Some(d.next())])?);
                        }
                    }
                }
                let mut order = vec![p[0]];
                order.extend(q0);
                order.extend(r0);
                order.extend([p[1], p[2]]);
                order.extend(q.as_ref().map(|q| q[0]));
                order.extend(r.as_ref().map(|r| r[0]));
                order.push(p[3]);
                order.extend(q.as_ref().map(|q| q[1]));
                order.extend(r.as_ref().map(|r| r[1]));
                b.apply(Instruction::Reorder { loops: order })?;
                if let Some(r0) = r0 {
                    b.apply(Instruction::Rfactor { loop_: r0, factor_axis: 0 })?;
                }
                b.bind(p[0], BindAxis::DpuX)?;
                if let Some(y) = q0.or(r0) {
                    b.bind(y, BindAxis::DpuY)?;
                }
                b.bind(p[1], BindAxis::Tasklet)?;
                let mut outer = vec![p[1], p[2]];
                outer.extend(q.as_ref().map(|q| q[0]));
                let above_r = outer.clone();
                outer.extend(r.as_ref().map(|r| r[0]));
                let read_at: Vec<&[Handle]> = vec![&outer; reads];
                b.caches(reads, &read_at, Some(&above_r), &mut d)?;
                if self.kind == SketchKind::Rfactor2d {
                    let host = d.next();
                    let fin = b.s.state.blocks[1].loops[0];
                    let hs = b.split(fin, vec![None, Some(host)])?;
                    b.apply(Instruction::Parallel { loop_: hs[0] })?;
                }
            }
            SketchKind::ReduceSerial => {
                let rh = ax.reduce.expect("reduction").0;
                let r = b.split(rh, vec![Some(1), None, Some(d.next())])?;
                b.bind(r[0], BindAxis::DpuX)?;
                let read_at: Vec<&[Handle]> = vec![&r[1..2]; reads];
                b.caches(reads, &read_at, None, &mut d)?;
            }
            SketchKind::ReduceRfactor => {
                let rh = ax.reduce.expect("reduction").0;
                let (parts, dx, ir) = (d.next(), d.next(), d.next());
                let r = b.split(rh, vec![Some(parts), None, Some(ir)])?;
                b.apply(Instruction::Rfactor { loop_: r[0], factor_axis: 0 })?;
                let pr = b.split(r[0], vec![Some(dx), None])?;
                b.bind(pr[0], BindAxis::DpuX)?;
                b.bind(pr[1], BindAxis::Tasklet)?;
                let outer = [pr[1], r[1]];
                let read_at: Vec<&[Handle]> = vec![&outer; reads];
                b.caches(reads, &read_at, None, &mut d)?;
            }
        }
        Ok(b.s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{build_workload, WorkloadKind, WorkloadSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn domains_mix_divisors_and_powers() {
        assert_eq!(factor_domain(12), vec![1, 2, 3, 4, 6, 8, 12]);
        assert!(factor_domain(8192).iter().all(|v| v.count_ones() == 1));
    }

    #[test]
    fn families_per_workload() {
        let fams = |k: WorkloadKind, shape: &[i64]| -> Vec<Family> {
            let p = build_workload(&WorkloadSpec::new(k, shape)).unwrap();
            generate_sketches(&p).iter().map(|s| s.family).collect()
        };
        assert_eq!(fams(WorkloadKind::Va, &[64]), vec![Family::NonRfactor]);
        let mtv = fams(WorkloadKind::Mtv, &[64, 64]);
        assert!(mtv.contains(&Family::Rfactor) && mtv.contains(&Family::NonRfactor));
        assert_eq!(fams(WorkloadKind::Mmtv, &[4, 8, 16]).len(), 3);
        let red = fams(WorkloadKind::Red, &[256]);
        assert!(red.contains(&Family::Rfactor) && red.contains(&Family::NonRfactor));
    }

    #[test]
    fn every_sample_instantiates() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (k, shape) in [
            (WorkloadKind::Va, vec![100]),
            (WorkloadKind::Red, vec![100]),
            (WorkloadKind::Mtv, vec![24, 40]),
            (WorkloadKind::Ttv, vec![6, 10, 12]),
            (WorkloadKind::Mmtv, vec![3, 10, 12]),
            (WorkloadKind::Gemv, vec![7, 40]),
            (WorkloadKind::Geva, vec![33]),
        ] {
            let p = build_workload(&WorkloadSpec::new(k, &shape)).unwrap();
            for sk in generate_sketches(&p) {
                for _ in 0..20 {
                    let d = sk.sample(&mut rng);
                    sk.instantiate(&p, &d).unwrap_or_else(|e| panic!("{k} {:?} {d:?}: {e}", sk.kind));
                }
            }
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let p = build_workload(&WorkloadSpec::new(WorkloadKind::Mtv, &[64, 64])).unwrap();
        let sk = &generate_sketches(&p)[0];
        let a = sk.sample(&mut ChaCha8Rng::seed_from_u64(42));
        let b = sk.sample(&mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
    }
}
