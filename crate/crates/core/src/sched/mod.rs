//! Replayable schedule primitives over a single compute block.
//!
//! A [`Schedule`] keeps an abstract description of the loop nest (loop
//! order, extents, bindings, guards, cache stages) and renders it to a
//! [`LoopProgram`] after every instruction. Loops, blocks and cache stages
//! are addressed through integer handles that are allocated sequentially,
//! so a trace replayed against the same program reproduces the same ids.

pub(crate) mod render;

pub(crate) use render::{render_block, Backing, RefBacking};

use crate::ir::{Affine, BufId, Buffer, Expr, ForKind, LoopProgram, MemoryScope, VarId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use thiserror::Error;

pub type Handle = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BindAxis {
    #[serde(rename = "dpu.x")]
    DpuX,
    #[serde(rename = "dpu.y")]
    DpuY,
    #[serde(rename = "tasklet")]
    Tasklet,
}

impl BindAxis {
    fn kind(self) -> ForKind {
        match self {
            BindAxis::DpuX => ForKind::BoundDpuX,
            BindAxis::DpuY => ForKind::BoundDpuY,
            BindAxis::Tasklet => ForKind::BoundTasklet,
        }
    }
}

impl fmt::Display for BindAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BindAxis::DpuX => "dpu.x",
            BindAxis::DpuY => "dpu.y",
            BindAxis::Tasklet => "tasklet",
        })
    }
}

/// One schedule primitive application. Handles refer to loops, blocks or
/// cache stages of the schedule the instruction is applied to.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Instruction {
    Split {
        #[serde(rename = "loop")]
        loop_: Handle,
        factors: Vec<Option<i64>>,
    },
    Reorder {
        loops: Vec<Handle>,
    },
    Bind {
        #[serde(rename = "loop")]
        loop_: Handle,
        axis: BindAxis,
    },
    Rfactor {
        #[serde(rename = "loop")]
        loop_: Handle,
        factor_axis: u32,
    },
    CacheRead {
        block: Handle,
        index: usize,
    },
    CacheWrite {
        block: Handle,
        index: usize,
    },
    ComputeAt {
        block: Handle,
        #[serde(rename = "loop")]
        loop_: Handle,
    },
    ReverseComputeAt {
        block: Handle,
        #[serde(rename = "loop")]
        loop_: Handle,
    },
    Parallel {
        #[serde(rename = "loop")]
        loop_: Handle,
    },
}

impl Instruction {
    pub fn name(&self) -> &'static str {
        match self {
            Instruction::Split { .. } => "split",
            Instruction::Reorder { .. } => "reorder",
            Instruction::Bind { .. } => "bind",
            Instruction::Rfactor { .. } => "rfactor",
            Instruction::CacheRead { .. } => "cache_read",
            Instruction::CacheWrite { .. } => "cache_write",
            Instruction::ComputeAt { .. } => "compute_at",
            Instruction::ReverseComputeAt { .. } => "reverse_compute_at",
            Instruction::Parallel { .. } => "parallel",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("handle {0} is not valid")]
    InvalidHandle(Handle),
    #[error("handle {handle} is not a {expected}")]
    WrongKind { handle: Handle, expected: &'static str },
    #[error("bad split factors: {0}")]
    BadFactors(String),
    #[error("loops are not nested in one block: {0}")]
    NotNested(String),
    #[error("axis {0} is already bound")]
    AlreadyBound(BindAxis),
    #[error("rfactor requires a reduction loop")]
    SpatialRfactor,
    #[error("only factor_axis=0 is supported, got {0}")]
    UnsupportedFactorAxis(u32),
    #[error("illegal compute location: {0}")]
    IllegalLocation(String),
    #[error("illegal schedule: {0}")]
    Illegal(String),
    #[error("instruction {index}: {source}")]
    Replay { index: usize, source: Box<ScheduleError> },
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LoopInfo {
    pub var: VarId,
    pub extent: i64,
    pub kind: ForKind,
    pub block: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Entry {
    Loop(LoopInfo),
    Block(usize),
    Cache { block: usize, index: usize },
    Dead,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct CacheStage {
    pub handle: Handle,
    /// The buffer being staged.
    pub buf: BufId,
    pub wram: BufId,
    pub write: bool,
    /// `None` stages the whole buffer above every loop.
    pub at: Option<Handle>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Access {
    pub buf: BufId,
    pub dims: Vec<Affine>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Guard {
    pub expr: Affine,
    pub bound: i64,
}

impl Guard {
    pub fn to_expr(&self) -> Expr {
        Expr::lt(self.expr.to_expr(), Expr::Int(self.bound))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BlockState {
    pub name: String,
    pub handle: Handle,
    pub loops: Vec<Handle>,
    pub reduce: BTreeSet<Handle>,
    pub output: Access,
    pub reads: Vec<Access>,
    /// Value with placeholder loads `Load(buf, 0)` for each read.
    pub value: Expr,
    pub guards: Vec<Guard>,
    pub caches: Vec<CacheStage>,
    /// Final-reduction block produced by rfactor; runs on the host.
    pub host: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct State {
    pub name: String,
    pub buffers: Vec<Buffer>,
    pub inputs: Vec<BufId>,
    pub outputs: Vec<BufId>,
    pub var_names: Vec<String>,
    pub entries: Vec<Entry>,
    pub blocks: Vec<BlockState>,
    /// Intermediate buffer created by rfactor, if any.
    pub rf_buffer: Option<BufId>,
}

impl State {
    pub fn loop_info(&self, h: Handle) -> Result<&LoopInfo, ScheduleError> {
        match self.entries.get(h as usize) {
            Some(Entry::Loop(l)) => Ok(l),
            Some(Entry::Dead) | None => Err(ScheduleError::InvalidHandle(h)),
            Some(_) => Err(ScheduleError::WrongKind { handle: h, expected: "loop" }),
        }
    }

    fn loop_mut(&mut self, h: Handle) -> Result<&mut LoopInfo, ScheduleError> {
        self.loop_info(h)?;
        match &mut self.entries[h as usize] {
            Entry::Loop(l) => Ok(l),
            _ => unreachable!(),
        }
    }

    fn block_of(&self, h: Handle) -> Result<usize, ScheduleError> {
        match self.entries.get(h as usize) {
            Some(Entry::Block(b)) => Ok(*b),
            Some(Entry::Dead) | None => Err(ScheduleError::InvalidHandle(h)),
            Some(_) => Err(ScheduleError::WrongKind { handle: h, expected: "block" }),
        }
    }

    fn cache_of(&self, h: Handle) -> Result<(usize, usize), ScheduleError> {
        match self.entries.get(h as usize) {
            Some(Entry::Cache { block, index }) => Ok((*block, *index)),
            Some(Entry::Dead) | None => Err(ScheduleError::InvalidHandle(h)),
            Some(_) => Err(ScheduleError::WrongKind { handle: h, expected: "cache block" }),
        }
    }

    fn new_handle(&mut self, e: Entry) -> Handle {
        self.entries.push(e);
        (self.entries.len() - 1) as Handle
    }

    fn new_var(&mut self, name: String) -> VarId {
        self.var_names.push(name);
        (self.var_names.len() - 1) as VarId
    }

    pub fn extent(&self, h: Handle) -> i64 {
        self.loop_info(h).map(|l| l.extent).unwrap_or(1)
    }

    pub fn var(&self, h: Handle) -> VarId {
        self.loop_info(h).map(|l| l.var).unwrap_or(0)
    }

    pub fn kind(&self, h: Handle) -> ForKind {
        self.loop_info(h).map(|l| l.kind).unwrap_or(ForKind::Serial)
    }

    /// Inclusive range of every schedule loop variable.
    pub fn var_range(&self, v: VarId) -> (i64, i64) {
        for e in &self.entries {
            if let Entry::Loop(l) = e {
                if l.var == v {
                    return (0, l.extent - 1);
                }
            }
        }
        (0, 0)
    }

    fn position(&self, b: usize, h: Handle) -> Option<usize> {
        self.blocks[b].loops.iter().position(|x| *x == h)
    }

    /// Reduction loops with extent 1 carry no accumulation and are treated
    /// as spatial for placement rules.
    pub fn is_effective_reduce(&self, b: usize, h: Handle) -> bool {
        self.blocks[b].reduce.contains(&h) && self.extent(h) > 1
    }

    fn validate(&self) -> Result<(), ScheduleError> {
        for (bi, b) in self.blocks.iter().enumerate() {
            for c in &b.caches {
                let Some(at) = c.at else { continue };
                let pos = self
                    .position(bi, at)
                    .ok_or_else(|| ScheduleError::IllegalLocation(format!("loop {at} not in block {}", b.name)))?;
                if c.write && b.loops[..=pos].iter().any(|h| self.is_effective_reduce(bi, *h)) {
                    return Err(ScheduleError::IllegalLocation(format!(
                        "write cache of `{}` under reduction loop {}",
                        self.buffers[c.buf as usize].name,
                        self.var_names[self.var(at) as usize]
                    )));
                }
            }
            let mut seen = BTreeSet::new();
            for h in &b.loops {
                let k = self.kind(*h);
                if matches!(k, ForKind::BoundDpuX | ForKind::BoundDpuY | ForKind::BoundTasklet) && !seen.insert(k as u8) {
                    return Err(ScheduleError::Illegal(format!("axis bound twice in block {}", b.name)));
                }
            }
        }
        Ok(())
    }
}

fn substitute_block(b: &mut BlockState, var: VarId, with: &Affine) {
    for d in b.output.dims.iter_mut().chain(b.reads.iter_mut().flat_map(|r| r.dims.iter_mut())) {
        *d = d.substitute(var, with);
    }
    for g in b.guards.iter_mut() {
        g.expr = g.expr.substitute(var, with);
    }
}

/// A program plus the instructions applied to it so far.
#[derive(Clone, Debug)]
pub struct Schedule {
    base: LoopProgram,
    pub trace: Vec<Instruction>,
    pub(crate) state: State,
    program: LoopProgram,
}

pub fn create_schedule(prog: &LoopProgram) -> Result<Schedule, ScheduleError> {
    let def = prog.block.as_ref().ok_or_else(|| ScheduleError::Illegal("program has no compute block".into()))?;
    let mut st = State {
        name: prog.name.clone(),
        buffers: prog.buffers.clone(),
        inputs: prog.inputs.clone(),
        outputs: prog.outputs.clone(),
        var_names: prog.var_names.clone(),
        entries: Vec::new(),
        blocks: Vec::new(),
        rf_buffer: None,
    };
    let mut order: Vec<&crate::ir::workload::Axis> = def.axes.iter().filter(|a| !a.reduce).collect();
    order.extend(def.axes.iter().filter(|a| a.reduce));
    let mut loops = Vec::new();
    let mut reduce = BTreeSet::new();
    for a in order {
        let h = st.new_handle(Entry::Loop(LoopInfo { var: a.var, extent: a.extent, kind: ForKind::Serial, block: 0 }));
        loops.push(h);
        if a.reduce {
            reduce.insert(h);
        }
    }
    let handle = st.new_handle(Entry::Block(0));
    st.blocks.push(BlockState {
        name: def.name.clone(),
        handle,
        loops,
        reduce,
        output: Access { buf: def.output.buf, dims: def.output.dims.clone() },
        reads: def.reads.iter().map(|r| Access { buf: r.buf, dims: r.dims.clone() }).collect(),
        value: def.value.clone(),
        guards: Vec::new(),
        caches: Vec::new(),
        host: false,
    });
    Ok(Schedule { base: prog.clone(), trace: Vec::new(), state: st, program: prog.clone() })
}

impl Schedule {
    pub fn program(&self) -> &LoopProgram {
        &self.program
    }

    pub fn base_program(&self) -> &LoopProgram {
        &self.base
    }

    /// Handles of live loops, block by block, outer to inner.
    pub fn loop_handles(&self) -> Vec<Handle> {
        self.state.blocks.iter().flat_map(|b| b.loops.iter().copied()).collect()
    }

    pub fn block_handles(&self) -> Vec<Handle> {
        self.state.blocks.iter().map(|b| b.handle).collect()
    }

    pub fn loop_extent(&self, h: Handle) -> Result<i64, ScheduleError> {
        Ok(self.state.loop_info(h)?.extent)
    }

    pub fn loop_name(&self, h: Handle) -> Result<&str, ScheduleError> {
        let v = self.state.loop_info(h)?.var;
        Ok(&self.state.var_names[v as usize])
    }

    pub fn loop_kind(&self, h: Handle) -> Result<ForKind, ScheduleError> {
        Ok(self.state.loop_info(h)?.kind)
    }

    pub fn is_reduce_loop(&self, h: Handle) -> bool {
        self.state.blocks.iter().any(|b| b.reduce.contains(&h))
    }

    /// Handle that the next created entry will receive.
    pub fn next_handle(&self) -> Handle {
        self.state.entries.len() as Handle
    }

    pub fn has_rfactor(&self) -> bool {
        self.state.rf_buffer.is_some()
    }

    pub fn structural_hash(&self) -> String {
        self.program.structural_hash()
    }

    pub fn apply(&self, instr: &Instruction) -> Result<Schedule, ScheduleError> {
        let mut st = self.state.clone();
        apply_to_state(&mut st, instr)?;
        st.validate()?;
        let program = render::render_program(&st, self.base.block.clone());
        let mut trace = self.trace.clone();
        trace.push(instr.clone());
        Ok(Schedule { base: self.base.clone(), trace, state: st, program })
    }
}

fn apply_to_state(st: &mut State, instr: &Instruction) -> Result<(), ScheduleError> {
    match instr {
        Instruction::Split { loop_, factors } => split(st, *loop_, factors),
        Instruction::Reorder { loops } => reorder(st, loops),
        Instruction::Bind { loop_, axis } => bind(st, *loop_, *axis),
        Instruction::Rfactor { loop_, factor_axis } => rfactor(st, *loop_, *factor_axis),
        Instruction::CacheRead { block, index } => cache(st, *block, *index, false),
        Instruction::CacheWrite { block, index } => cache(st, *block, *index, true),
        Instruction::ComputeAt { block, loop_ } => compute_at(st, *block, *loop_, false),
        Instruction::ReverseComputeAt { block, loop_ } => compute_at(st, *block, *loop_, true),
        Instruction::Parallel { loop_ } => parallel(st, *loop_),
    }
}

fn split(st: &mut State, h: Handle, factors: &[Option<i64>]) -> Result<(), ScheduleError> {
    let info = st.loop_info(h)?.clone();
    if info.kind != ForKind::Serial {
        return Err(ScheduleError::Illegal("cannot split a bound or parallel loop".into()));
    }
    if factors.len() < 2 {
        return Err(ScheduleError::BadFactors("need at least two factors".into()));
    }
    if factors.iter().filter(|f| f.is_none()).count() != 1 {
        return Err(ScheduleError::BadFactors("exactly one factor must be unspecified".into()));
    }
    if let Some(bad) = factors.iter().flatten().find(|f| **f <= 0) {
        return Err(ScheduleError::BadFactors(format!("factor {bad} is not positive")));
    }
    let b = info.block;
    if st.blocks[b].caches.iter().any(|c| c.at == Some(h)) {
        return Err(ScheduleError::Illegal("cannot split a compute_at target".into()));
    }
    let known: i64 = factors.iter().flatten().product();
    let inferred = (info.extent + known - 1) / known;
    let extents: Vec<i64> = factors.iter().map(|f| f.unwrap_or(inferred)).collect();
    let base = st.var_names[info.var as usize].clone();
    let mut new_loops = Vec::new();
    let mut expr = Affine::default();
    let mut stride: i64 = extents.iter().product();
    for (k, &e) in extents.iter().enumerate() {
        stride /= e;
        let var = st.new_var(format!("{base}_{k}"));
        let nh = st.new_handle(Entry::Loop(LoopInfo { var, extent: e, kind: ForKind::Serial, block: b }));
        new_loops.push(nh);
        expr = expr.add(&Affine::term(var, stride));
    }
    let product: i64 = extents.iter().product();
    let blk = &mut st.blocks[b];
    substitute_block(blk, info.var, &expr);
    if product > info.extent {
        blk.guards.push(Guard { expr: expr.clone(), bound: info.extent });
    }
    let pos = blk.loops.iter().position(|x| *x == h).expect("loop in block");
    blk.loops.splice(pos..=pos, new_loops.iter().copied());
    if blk.reduce.remove(&h) {
        blk.reduce.extend(new_loops.iter().copied());
    }
    st.entries[h as usize] = Entry::Dead;
    Ok(())
}

fn reorder(st: &mut State, loops: &[Handle]) -> Result<(), ScheduleError> {
    if loops.is_empty() {
        return Ok(());
    }
    let b = st.loop_info(loops[0])?.block;
    let mut positions = Vec::new();
    for h in loops {
        let info = st.loop_info(*h)?;
        if info.block != b {
            return Err(ScheduleError::NotNested(format!("loop {h} belongs to another block")));
        }
        positions.push(st.position(b, *h).expect("loop in block"));
    }
    let uniq: BTreeSet<_> = positions.iter().collect();
    if uniq.len() != positions.len() {
        return Err(ScheduleError::NotNested("duplicate loop in reorder".into()));
    }
    let mut sorted = positions.clone();
    sorted.sort_unstable();
    for (slot, h) in sorted.into_iter().zip(loops) {
        st.blocks[b].loops[slot] = *h;
    }
    Ok(())
}

fn bind(st: &mut State, h: Handle, axis: BindAxis) -> Result<(), ScheduleError> {
    let info = st.loop_info(h)?.clone();
    let blk = &st.blocks[info.block];
    if blk.host {
        return Err(ScheduleError::Illegal("host loops cannot be bound".into()));
    }
    if info.kind != ForKind::Serial {
        return Err(ScheduleError::Illegal("loop is already bound".into()));
    }
    if blk.loops.iter().any(|l| st.kind(*l) == axis.kind()) {
        return Err(ScheduleError::AlreadyBound(axis));
    }
    if blk.reduce.contains(&h) && info.extent > 1 {
        return Err(ScheduleError::Illegal("cannot bind a reduction loop; rfactor it first".into()));
    }
    st.loop_mut(h)?.kind = axis.kind();
    Ok(())
}

fn rfactor(st: &mut State, h: Handle, factor_axis: u32) -> Result<(), ScheduleError> {
    if factor_axis != 0 {
        return Err(ScheduleError::UnsupportedFactorAxis(factor_axis));
    }
    let info = st.loop_info(h)?.clone();
    let b = info.block;
    if !st.blocks[b].reduce.contains(&h) {
        return Err(ScheduleError::SpatialRfactor);
    }
    if st.rf_buffer.is_some() || st.blocks[b].host {
        return Err(ScheduleError::Illegal("block is already rfactored".into()));
    }
    if !st.blocks[b].caches.is_empty() {
        return Err(ScheduleError::Illegal("rfactor must precede cache stages".into()));
    }
    let out = st.blocks[b].output.clone();
    let out_buf = st.buffers[out.buf as usize].clone();
    let rf_id = st.buffers.len() as BufId;
    let mut shape = vec![info.extent];
    shape.extend(out_buf.shape.iter().copied());
    st.buffers.push(Buffer {
        id: rf_id,
        name: format!("{}_rf", out_buf.name),
        dtype: out_buf.dtype,
        shape,
        scope: MemoryScope::HostGlobal,
    });
    st.rf_buffer = Some(rf_id);
    {
        let blk = &mut st.blocks[b];
        blk.reduce.remove(&h);
        let mut dims = vec![Affine::var(info.var)];
        dims.extend(out.dims.iter().cloned());
        blk.output = Access { buf: rf_id, dims };
    }

    let final_block = st.blocks.len();
    let fh = st.new_handle(Entry::Block(final_block));
    let mut loops = Vec::new();
    let mut out_dims = Vec::new();
    for (d, &e) in out_buf.shape.iter().enumerate() {
        let var = st.new_var(format!("{}_r{d}", out_buf.name));
        loops.push(st.new_handle(Entry::Loop(LoopInfo { var, extent: e, kind: ForKind::Serial, block: final_block })));
        out_dims.push(Affine::var(var));
    }
    let fvar = st.new_var(format!("{}_f", out_buf.name));
    let f = st.new_handle(Entry::Loop(LoopInfo { var: fvar, extent: info.extent, kind: ForKind::Serial, block: final_block }));
    loops.push(f);
    let mut rf_dims = vec![Affine::var(fvar)];
    rf_dims.extend(out_dims.iter().cloned());
    st.blocks.push(BlockState {
        name: format!("{}_final", st.blocks[b].name),
        handle: fh,
        loops,
        reduce: [f].into_iter().collect(),
        output: Access { buf: out.buf, dims: out_dims },
        reads: vec![Access { buf: rf_id, dims: rf_dims }],
        value: Expr::load(rf_id, Expr::Int(0)),
        guards: Vec::new(),
        caches: Vec::new(),
        host: true,
    });
    Ok(())
}

fn cache(st: &mut State, bh: Handle, index: usize, write: bool) -> Result<(), ScheduleError> {
    let b = st.block_of(bh)?;
    let blk = &st.blocks[b];
    if blk.host {
        return Err(ScheduleError::Illegal("host blocks are not cached".into()));
    }
    let buf = if write {
        if index != 0 {
            return Err(ScheduleError::Illegal(format!("block has one output, got index {index}")));
        }
        blk.output.buf
    } else {
        blk.reads.get(index).ok_or_else(|| ScheduleError::Illegal(format!("no read at index {index}")))?.buf
    };
    if blk.caches.iter().any(|c| c.buf == buf) {
        return Err(ScheduleError::Illegal("buffer is already cached".into()));
    }
    let src = st.buffers[buf as usize].clone();
    let wram = st.buffers.len() as BufId;
    let mut name = format!("{}_w", src.name);
    while st.buffers.iter().any(|x| x.name == name) {
        name.push('w');
    }
    st.buffers.push(Buffer { id: wram, name, dtype: src.dtype, shape: vec![1], scope: MemoryScope::Wram });
    let index = st.blocks[b].caches.len();
    let handle = st.new_handle(Entry::Cache { block: b, index });
    st.blocks[b].caches.push(CacheStage { handle, buf, wram, write, at: None });
    Ok(())
}

fn compute_at(st: &mut State, ch: Handle, h: Handle, reverse: bool) -> Result<(), ScheduleError> {
    let (b, index) = st.cache_of(ch)?;
    let info = st.loop_info(h)?;
    if info.block != b {
        return Err(ScheduleError::IllegalLocation("loop is in another block".into()));
    }
    let c = &mut st.blocks[b].caches[index];
    if c.write != reverse {
        return Err(ScheduleError::IllegalLocation(if reverse {
            "reverse_compute_at needs a write cache".into()
        } else {
            "compute_at needs a read cache".into()
        }));
    }
    c.at = Some(h);
    Ok(())
}

fn parallel(st: &mut State, h: Handle) -> Result<(), ScheduleError> {
    let info = st.loop_info(h)?.clone();
    let blk = &st.blocks[info.block];
    if !blk.host {
        return Err(ScheduleError::Illegal("parallel applies only to host loops".into()));
    }
    if blk.reduce.contains(&h) {
        return Err(ScheduleError::Illegal("cannot parallelize a reduction loop".into()));
    }
    if info.kind != ForKind::Serial {
        return Err(ScheduleError::Illegal("loop is already parallel".into()));
    }
    st.loop_mut(h)?.kind = ForKind::HostParallel;
    Ok(())
}

/// Re-apply a trace to a fresh schedule of `prog`.
pub fn replay(trace: &[Instruction], prog: &LoopProgram) -> Result<Schedule, ScheduleError> {
    let mut s = create_schedule(prog)?;
    for (index, instr) in trace.iter().enumerate() {
        s = s.apply(instr).map_err(|e| ScheduleError::Replay { index, source: Box::new(e) })?;
    }
    Ok(s)
}

pub fn trace_to_json(trace: &[Instruction]) -> String {
    serde_json::to_string(trace).expect("trace serializes")
}

pub fn trace_from_json(text: &str) -> Result<Vec<Instruction>, serde_json::Error> {
    serde_json::from_str(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{build_workload, evaluate_reference, print_program, ScalarType, Tensor, WorkloadKind, WorkloadSpec};
    use std::collections::BTreeMap;

    fn gemv(m: i64, n: i64) -> LoopProgram {
        build_workload(&WorkloadSpec::new(WorkloadKind::Gemv, &[m, n])).unwrap()
    }

    #[test]
    fn handles_follow_program_order() {
        let s = create_schedule(&gemv(7, 40)).unwrap();
        assert_eq!(s.loop_handles(), vec![0, 1]);
        assert_eq!(s.loop_name(1).unwrap(), "j");
        let red = create_schedule(&build_workload(&WorkloadSpec::new(WorkloadKind::Red, &[4])).unwrap()).unwrap();
        assert_eq!(red.loop_handles(), vec![0]);
        assert_eq!(red.block_handles(), vec![1]);
    }

    #[test]
    fn even_split_has_no_guard() {
        let p = build_workload(&WorkloadSpec::new(WorkloadKind::Va, &[8192])).unwrap();
        let s = create_schedule(&p).unwrap().apply(&Instruction::Split { loop_: 0, factors: vec![Some(32), None] }).unwrap();
        let hs = s.loop_handles();
        assert_eq!((s.loop_extent(hs[0]).unwrap(), s.loop_extent(hs[1]).unwrap()), (32, 256));
        assert!(!print_program(s.program()).contains("if "));
    }

    #[test]
    fn misaligned_split_guards_the_tail() {
        let p = build_workload(&WorkloadSpec::new(WorkloadKind::Va, &[7])).unwrap();
        let s = create_schedule(&p).unwrap().apply(&Instruction::Split { loop_: 0, factors: vec![None, Some(2)] }).unwrap();
        let hs = s.loop_handles();
        assert_eq!((s.loop_extent(hs[0]).unwrap(), s.loop_extent(hs[1]).unwrap()), (4, 2));
        let text = print_program(s.program());
        assert!(text.contains("if (((i_0 * 2) + i_1) < 7):"), "{text}");
    }

    #[test]
    fn stale_handle_is_rejected() {
        let p = gemv(8, 8);
        let trace = vec![
            Instruction::Split { loop_: 0, factors: vec![Some(2), None] },
            Instruction::Split { loop_: 0, factors: vec![Some(2), None] },
        ];
        match replay(&trace, &p) {
            Err(ScheduleError::Replay { index: 1, source }) => assert_eq!(*source, ScheduleError::InvalidHandle(0)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rfactor_rejects_spatial_loop() {
        let s = create_schedule(&gemv(4, 4)).unwrap();
        assert_eq!(s.apply(&Instruction::Rfactor { loop_: 0, factor_axis: 0 }).unwrap_err(), ScheduleError::SpatialRfactor);
    }

    #[test]
    fn rfactor_keeps_semantics() {
        let p = gemv(5, 12);
        let trace = vec![
            Instruction::Split { loop_: 1, factors: vec![Some(4), None] },
            Instruction::Rfactor { loop_: 3, factor_axis: 0 },
        ];
        let s = replay(&trace, &p).unwrap();
        assert_eq!(s.state.buffers[s.state.rf_buffer.unwrap() as usize].shape, vec![4, 5]);
        let mut inputs = BTreeMap::new();
        inputs.insert("A".to_string(), Tensor::from_i64(vec![5, 12], ScalarType::Int32, (0..60).collect()));
        inputs.insert("B".to_string(), Tensor::from_i64(vec![12], ScalarType::Int32, (0..12).collect()));
        assert_eq!(evaluate_reference(s.program(), &inputs).unwrap(), evaluate_reference(&p, &inputs).unwrap());
    }

    #[test]
    fn trace_json_round_trips() {
        let trace = vec![
            Instruction::Split { loop_: 1, factors: vec![Some(4), None] },
            Instruction::Bind { loop_: 2, axis: BindAxis::DpuX },
            Instruction::CacheRead { block: 2, index: 0 },
        ];
        let text = trace_to_json(&trace);
        assert!(text.contains("\"op\":\"split\""), "{text}");
        assert_eq!(trace_from_json(&text).unwrap(), trace);
    }

    #[test]
    fn write_cache_under_reduction_is_illegal() {
        let p = gemv(4, 4);
        let trace = vec![Instruction::CacheWrite { block: 2, index: 0 }, Instruction::ReverseComputeAt { block: 3, loop_: 1 }];
        assert!(matches!(
            replay(&trace, &p),
            Err(ScheduleError::Replay { index: 1, .. })
        ));
    }
}
