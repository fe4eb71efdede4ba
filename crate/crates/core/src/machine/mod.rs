//! Simulated PIM machine: configuration, interpreter and cost model.

use crate::ir::{
    BufId, Counters, Direction, Env, EvalError, ExecHooks, ForKind, IntrinsicCall, Mem, MemoryScope, Stmt, Tensor,
};
use crate::lower::{host_extents, LoweredModule};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

const DEFAULT_PROFILE: &str = include_str!("../../machines/upmem-default.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineConfig {
    pub name: String,
    pub num_dpus_max: i64,
    pub num_ranks: i64,
    pub rank_size: i64,
    pub tasklets_max: i64,
    pub wram_bytes: i64,
    pub iram_bytes: i64,
    pub mram_bytes_per_dpu: i64,
    pub dma_alignment_bytes: i64,
    pub clock_mhz: f64,
    pub cycles_per_arith: f64,
    pub branch_penalty_cycles: f64,
    pub dma_setup_cycles: f64,
    pub dma_bytes_per_cycle: f64,
    /// Cost of a scalar load or store that goes straight to MRAM.
    pub mram_access_cycles: f64,
    pub tasklet_saturation: i64,
    pub h2d_bytes_per_us: f64,
    pub d2h_bytes_per_us: f64,
    pub parallel_transfer_width: i64,
    /// Fixed host overhead per transfer call.
    pub transfer_call_us: f64,
    pub launch_us: f64,
    pub host_ops_per_us: f64,
    pub host_threads: i64,
    /// Static code size charged per IR node by the IRAM proxy.
    pub iram_bytes_per_node: i64,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read machine profile: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid TOML machine profile: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid JSON machine profile: {0}")]
    Json(#[from] serde_json::Error),
    #[error("machine parameter `{0}` must be positive")]
    NonPositive(&'static str),
    #[error("tasklets_max {0} exceeds the hardware limit of 24")]
    TooManyTasklets(i64),
}

impl Default for MachineConfig {
    fn default() -> Self {
        Self::upmem_default()
    }
}

impl MachineConfig {
    pub fn upmem_default() -> MachineConfig {
        toml::from_str(DEFAULT_PROFILE).expect("bundled profile parses")
    }

    /// Parse a profile; text starting with `{` is JSON, anything else TOML.
    pub fn parse(text: &str) -> Result<MachineConfig, ConfigError> {
        let cfg: MachineConfig =
            if text.trim_start().starts_with('{') { serde_json::from_str(text)? } else { toml::from_str(text)? };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<MachineConfig, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let ints = [
            ("num_dpus_max", self.num_dpus_max),
            ("num_ranks", self.num_ranks),
            ("rank_size", self.rank_size),
            ("tasklets_max", self.tasklets_max),
            ("wram_bytes", self.wram_bytes),
            ("iram_bytes", self.iram_bytes),
            ("mram_bytes_per_dpu", self.mram_bytes_per_dpu),
            ("dma_alignment_bytes", self.dma_alignment_bytes),
            ("tasklet_saturation", self.tasklet_saturation),
            ("parallel_transfer_width", self.parallel_transfer_width),
            ("host_threads", self.host_threads),
            ("iram_bytes_per_node", self.iram_bytes_per_node),
        ];
        for (name, v) in ints {
            if v <= 0 {
                return Err(ConfigError::NonPositive(name));
            }
        }
        let floats = [
            ("clock_mhz", self.clock_mhz),
            ("cycles_per_arith", self.cycles_per_arith),
            ("branch_penalty_cycles", self.branch_penalty_cycles),
            ("dma_setup_cycles", self.dma_setup_cycles),
            ("dma_bytes_per_cycle", self.dma_bytes_per_cycle),
            ("mram_access_cycles", self.mram_access_cycles),
            ("h2d_bytes_per_us", self.h2d_bytes_per_us),
            ("d2h_bytes_per_us", self.d2h_bytes_per_us),
            ("transfer_call_us", self.transfer_call_us),
            ("launch_us", self.launch_us),
            ("host_ops_per_us", self.host_ops_per_us),
        ];
        for (name, v) in floats {
            if v.is_nan() || v <= 0.0 {
                return Err(ConfigError::NonPositive(name));
            }
        }
        if self.tasklets_max > 24 {
            return Err(ConfigError::TooManyTasklets(self.tasklets_max));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DpuMetrics {
    pub dpu: i64,
    pub counters: Counters,
    pub tasklets: Vec<Counters>,
    pub cycles: f64,
}

/// Host traffic of one transfer phase.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TransferStats {
    pub bytes: i64,
    pub calls: i64,
    /// Bytes divided by the parallel width they moved at.
    pub effective_bytes: f64,
}

impl TransferStats {
    fn record(&mut self, bytes: i64, width: i64) {
        self.bytes += bytes;
        self.calls += 1;
        self.effective_bytes += bytes as f64 / width.max(1) as f64;
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExecutionMetrics {
    pub dpus: Vec<DpuMetrics>,
    pub tasklets_used: i64,
    /// Transfer-once constants.
    pub setup: TransferStats,
    pub h2d: TransferStats,
    pub d2h: TransferStats,
    pub post_ops: u64,
    pub post_threads: i64,
    /// Sum of per-DPU counters.
    pub totals: Counters,
}

impl ExecutionMetrics {
    pub fn max_kernel_cycles(&self) -> f64 {
        self.dpus.iter().map(|d| d.cycles).fold(0.0, f64::max)
    }

    pub fn h2d_bytes(&self) -> i64 {
        self.setup.bytes + self.h2d.bytes
    }

    pub fn d2h_bytes(&self) -> i64 {
        self.d2h.bytes
    }

    /// Counters of one tasklet on one DPU.
    pub fn tasklet(&self, dpu: usize, tasklet: usize) -> Counters {
        self.dpus[dpu].tasklets.get(tasklet).copied().unwrap_or_default()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MachineError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("input `{0}` missing")]
    MissingInput(String),
}

/// Simulated kernel cycles of one DPU.
pub fn kernel_cycles(c: &Counters, tasklets: i64, cfg: &MachineConfig) -> f64 {
    let t = tasklets.max(1) as f64;
    let issue = (cfg.tasklet_saturation as f64 / t).max(1.0);
    c.instrs as f64 * cfg.cycles_per_arith * issue
        + c.branches as f64 * cfg.branch_penalty_cycles
        + c.dma_count() as f64 * cfg.dma_setup_cycles
        + c.dma_bytes as f64 / cfg.dma_bytes_per_cycle
        + c.mram_scalar as f64 * cfg.mram_access_cycles
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TimeBreakdown {
    pub setup_us: f64,
    pub h2d_us: f64,
    pub kernel_us: f64,
    pub d2h_us: f64,
    pub post_us: f64,
}

impl TimeBreakdown {
    pub fn total(&self) -> f64 {
        self.setup_us + self.h2d_us + self.kernel_us + self.d2h_us + self.post_us
    }
}

pub fn time_breakdown(m: &ExecutionMetrics, cfg: &MachineConfig) -> TimeBreakdown {
    let xfer = |s: &TransferStats, bw: f64| s.effective_bytes / bw + s.calls as f64 * cfg.transfer_call_us;
    let kernel = m.max_kernel_cycles();
    TimeBreakdown {
        setup_us: xfer(&m.setup, cfg.h2d_bytes_per_us),
        h2d_us: xfer(&m.h2d, cfg.h2d_bytes_per_us),
        kernel_us: if m.dpus.is_empty() { 0.0 } else { kernel / cfg.clock_mhz + cfg.launch_us },
        d2h_us: xfer(&m.d2h, cfg.d2h_bytes_per_us),
        post_us: m.post_ops as f64 / (cfg.host_ops_per_us * m.post_threads.max(1) as f64),
    }
}

/// Simulated end-to-end microseconds.
pub fn estimate_time(m: &ExecutionMetrics, cfg: &MachineConfig) -> f64 {
    time_breakdown(m, cfg).total()
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub outputs: BTreeMap<String, Tensor>,
    pub metrics: ExecutionMetrics,
}

struct KernelHooks {
    tasklets: Vec<Counters>,
    start: Counters,
    live_wram: i64,
    tasklet_count: i64,
    wram_limit: i64,
}

impl ExecHooks for KernelHooks {
    fn enter_iteration(&mut self, kind: ForKind, _iter: i64, c: &Counters) {
        if kind == ForKind::BoundTasklet {
            self.start = *c;
        }
    }
    fn exit_iteration(&mut self, kind: ForKind, iter: i64, c: &Counters) {
        if kind == ForKind::BoundTasklet {
            let i = iter as usize;
            if self.tasklets.len() <= i {
                self.tasklets.resize(i + 1, Counters::default());
            }
            self.tasklets[i].add(&c.diff(&self.start));
        }
    }
    fn on_alloc(&mut self, mem: &Mem) -> Result<(), EvalError> {
        self.live_wram += mem.byte_len();
        let used = self.live_wram * self.tasklet_count;
        if used > self.wram_limit {
            return Err(EvalError::WramOverflow { used, limit: self.wram_limit });
        }
        Ok(())
    }
    fn on_free(&mut self, mem: &Mem) {
        self.live_wram -= mem.byte_len();
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Phase {
    Setup,
    H2d,
    D2h,
}

struct HostHooks<'a> {
    m: &'a LoweredModule,
    /// Per DPU, MRAM memories indexed by buffer id (empty for other scopes).
    mram: Vec<Vec<Mem>>,
    phase: Phase,
    metrics: ExecutionMetrics,
}

impl HostHooks<'_> {
    fn stats(&mut self) -> &mut TransferStats {
        match self.phase {
            Phase::Setup => &mut self.metrics.setup,
            Phase::H2d => &mut self.metrics.h2d,
            Phase::D2h => &mut self.metrics.d2h,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn copy(
        &mut self,
        env: &mut Env,
        dir: Direction,
        global: BufId,
        go: i64,
        dpu: i64,
        mram: BufId,
        mo: i64,
        bytes: i64,
    ) -> Result<(), EvalError> {
        if dpu < 0 || dpu >= self.mram.len() as i64 {
            return Err(EvalError::Machine(format!("transfer targets DPU {dpu}, outside the grid")));
        }
        let g = &mut env.mem[global as usize];
        let n = bytes / g.dtype.bytes();
        let d = &mut self.mram[dpu as usize][mram as usize];
        for (mem, off) in [(&*g, go), (&*d, mo)] {
            if off < 0 || off + n > mem.len() as i64 {
                return Err(EvalError::OutOfRange { buf: mem.name.clone(), index: off + n - 1, len: mem.len() });
            }
        }
        for k in 0..n {
            let (gi, di) = ((go + k) as usize, (mo + k) as usize);
            match dir {
                Direction::H2D => {
                    d.data[di] = g.data[gi];
                    d.defined[di] = g.defined[gi];
                }
                Direction::D2H => {
                    if !d.defined[di] {
                        return Err(EvalError::PaddingRead { buf: d.name.clone(), index: mo + k });
                    }
                    g.data[gi] = d.data[di];
                    g.defined[gi] = true;
                }
            }
        }
        Ok(())
    }
}

impl ExecHooks for HostHooks<'_> {
    fn intrinsic(&mut self, env: &mut Env, call: &IntrinsicCall, c: &mut Counters) -> Result<(), EvalError> {
        match call {
            IntrinsicCall::HostToDpu { global, global_offset, dpu, mram, mram_offset, bytes }
            | IntrinsicCall::DpuToHost { global, global_offset, dpu, mram, mram_offset, bytes } => {
                let dir = if matches!(call, IntrinsicCall::HostToDpu { .. }) { Direction::H2D } else { Direction::D2H };
                let go = env.eval_int(global_offset, c)?;
                let d = env.eval_int(dpu, c)?;
                let mo = env.eval_int(mram_offset, c)?;
                self.copy(env, dir, *global, go, d, *mram, mo, *bytes)?;
                self.stats().record(*bytes, 1);
            }
            IntrinsicCall::ParallelTransferGroup { direction, global, mram, mram_offset, bytes, members } => {
                let mo = env.eval_int(mram_offset, c)?;
                for mbr in members {
                    let go = env.eval_int(&mbr.global_offset, c)?;
                    self.copy(env, *direction, *global, go, mbr.dpu, *mram, mo, *bytes)?;
                }
                let width = (members.len() as i64).max(1);
                self.stats().record(bytes * width, width);
            }
            other => return Err(EvalError::Machine(format!("unexpected host intrinsic {other:?}"))),
        }
        Ok(())
    }
}

/// Run one DPU's kernel over its MRAM state.
fn run_dpu(
    m: &LoweredModule,
    dpu: i64,
    mram: &mut [Mem],
    wram: &mut [Mem],
    cfg: &MachineConfig,
) -> Result<DpuMetrics, EvalError> {
    let mut mem: Vec<Mem> = Vec::with_capacity(m.buffers.len());
    for b in &m.buffers {
        let slot = match b.scope {
            MemoryScope::Mram => std::mem::replace(&mut mram[b.id as usize], empty_mem()),
            MemoryScope::Wram => std::mem::replace(&mut wram[b.id as usize], empty_mem()),
            MemoryScope::HostGlobal => empty_mem(),
        };
        mem.push(slot);
    }
    let mut env = Env::new(m.var_names.len(), mem);
    let (x, y) = m.dpu_coords(dpu);
    if let Some(v) = m.dpu_vars.0 {
        env.vars[v as usize] = x;
    }
    if let Some(v) = m.dpu_vars.1 {
        env.vars[v as usize] = y;
    }
    let mut hooks = KernelHooks {
        tasklets: Vec::new(),
        start: Counters::default(),
        live_wram: 0,
        tasklet_count: m.tasklets,
        wram_limit: cfg.wram_bytes,
    };
    let mut c = Counters::default();
    let r = env.exec(&m.kernel, &mut hooks, &mut c);
    for b in &m.buffers {
        match b.scope {
            MemoryScope::Mram => mram[b.id as usize] = std::mem::replace(&mut env.mem[b.id as usize], empty_mem()),
            MemoryScope::Wram => wram[b.id as usize] = std::mem::replace(&mut env.mem[b.id as usize], empty_mem()),
            MemoryScope::HostGlobal => {}
        }
    }
    r?;
    Ok(DpuMetrics { dpu, cycles: kernel_cycles(&c, m.tasklets, cfg), counters: c, tasklets: hooks.tasklets })
}

fn empty_mem() -> Mem {
    Mem::undefined("", crate::ir::ScalarType::Int32, MemoryScope::HostGlobal, 0)
}

pub(crate) fn parallel_threads(s: &Stmt, cfg: &MachineConfig) -> i64 {
    let mut t = 1;
    s.visit(&mut |x| {
        if let Stmt::For(l) = x {
            if l.kind == ForKind::HostParallel {
                let e = l.extent.as_int().unwrap_or(cfg.host_threads);
                t = t.max(e.min(cfg.host_threads));
            }
        }
    });
    t
}

/// Execute a lowered module: pre-launch transfers, every DPU kernel in id
/// order with tasklets in id order, post-launch transfers and host
/// post-processing.
pub fn interpret(
    m: &LoweredModule,
    inputs: &BTreeMap<String, Tensor>,
    cfg: &MachineConfig,
) -> Result<RunResult, MachineError> {
    let extents = host_extents(m);
    let mut host_mem = Vec::with_capacity(m.buffers.len());
    for b in &m.buffers {
        if b.scope != MemoryScope::HostGlobal {
            host_mem.push(empty_mem());
            continue;
        }
        let len = extents.get(&b.id).copied().unwrap_or(b.numel()) as usize;
        let mut mem = Mem::undefined(&b.name, b.dtype, b.scope, len);
        if m.inputs.contains(&b.id) {
            let t = inputs.get(&b.name).ok_or_else(|| MachineError::MissingInput(b.name.clone()))?;
            if t.shape != b.shape || t.dtype != b.dtype {
                return Err(EvalError::ShapeMismatch {
                    name: b.name.clone(),
                    got: t.shape.clone(),
                    got_dtype: t.dtype,
                    want: b.shape.clone(),
                    want_dtype: b.dtype,
                }
                .into());
            }
            for (i, v) in t.data.iter().enumerate() {
                mem.data[i] = *v;
                mem.defined[i] = true;
            }
        }
        host_mem.push(mem);
    }
    let per_dpu: Vec<Mem> = m
        .buffers
        .iter()
        .map(|b| match b.scope {
            MemoryScope::Mram => Mem::undefined(&b.name, b.dtype, b.scope, b.numel() as usize),
            _ => empty_mem(),
        })
        .collect();
    let mut wram: Vec<Mem> = m
        .buffers
        .iter()
        .map(|b| match b.scope {
            MemoryScope::Wram => Mem::undefined(&b.name, b.dtype, b.scope, b.numel() as usize),
            _ => empty_mem(),
        })
        .collect();
    let mut hooks = HostHooks {
        m,
        mram: vec![per_dpu; m.num_dpus() as usize],
        phase: Phase::Setup,
        metrics: ExecutionMetrics { tasklets_used: m.tasklets, ..Default::default() },
    };
    let mut env = Env::new(m.var_names.len(), host_mem);
    let mut c = Counters::default();
    env.exec(&m.setup, &mut hooks, &mut c)?;
    hooks.phase = Phase::H2d;
    env.exec(&m.h2d, &mut hooks, &mut c)?;

    for dpu in 0..m.num_dpus() {
        let dm = run_dpu(hooks.m, dpu, &mut hooks.mram[dpu as usize], &mut wram, cfg)?;
        hooks.metrics.totals.add(&dm.counters);
        hooks.metrics.dpus.push(dm);
    }

    hooks.phase = Phase::D2h;
    env.exec(&m.d2h, &mut hooks, &mut c)?;
    let mut pc = Counters::default();
    env.exec(&m.post, &mut NoTransfers, &mut pc)?;
    hooks.metrics.post_ops = pc.instrs;
    hooks.metrics.post_threads = parallel_threads(&m.post, cfg);

    let mut outputs = BTreeMap::new();
    for &o in &m.outputs {
        let b = &m.buffers[o as usize];
        let mem = &env.mem[o as usize];
        let n = b.numel() as usize;
        if let Some(i) = mem.defined[..n].iter().position(|d| !d) {
            return Err(EvalError::Unwritten { buf: b.name.clone(), index: i }.into());
        }
        outputs.insert(b.name.clone(), Tensor { dtype: b.dtype, shape: b.shape.clone(), data: mem.data[..n].to_vec() });
    }
    Ok(RunResult { outputs, metrics: hooks.metrics })
}

struct NoTransfers;
impl ExecHooks for NoTransfers {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_profile_is_valid() {
        let cfg = MachineConfig::upmem_default();
        cfg.validate().unwrap();
        assert_eq!(cfg.wram_bytes, 65536);
        assert_eq!(cfg.num_dpus_max, 2560);
        assert_eq!(cfg.tasklets_max, 24);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(MachineConfig::parse(&json).unwrap(), cfg);
    }

    #[test]
    fn rejects_non_positive_parameters() {
        let mut cfg = MachineConfig::upmem_default();
        cfg.rank_size = 0;
        let text = toml::to_string(&cfg).unwrap();
        assert!(matches!(MachineConfig::parse(&text), Err(ConfigError::NonPositive("rank_size"))));
    }

    #[test]
    fn zero_metrics_cost_nothing() {
        let cfg = MachineConfig::upmem_default();
        assert_eq!(estimate_time(&ExecutionMetrics::default(), &cfg), 0.0);
    }

    #[test]
    fn tasklet_scaling_below_saturation() {
        let cfg = MachineConfig::upmem_default();
        let c = Counters { instrs: 1000, ..Default::default() };
        for t in 1..=cfg.tasklet_saturation {
            let expect = 1000.0 * 11.0 / t as f64;
            assert!((kernel_cycles(&c, t, &cfg) - expect).abs() / expect < 0.01);
        }
        assert_eq!(kernel_cycles(&c, 24, &cfg), 1000.0);
    }
}
