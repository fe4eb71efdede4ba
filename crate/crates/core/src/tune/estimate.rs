//! Static end-to-end time estimate of a lowered module, used as a model
//! feature. Guards are assumed taken and loop extents take their upper bound.

use crate::ir::{Buffer, Counters, Expr, IntrinsicCall, MemoryScope, Stmt};
use crate::lower::LoweredModule;
use crate::machine::{kernel_cycles, parallel_threads, MachineConfig};

fn bound(e: &Expr) -> Option<i64> {
    match e {
        Expr::Int(v) => Some(*v),
        Expr::Min(a, b) => match (bound(a), bound(b)) {
            (Some(x), Some(y)) => Some(x.min(y)),
            (x, y) => x.or(y),
        },
        Expr::Add(a, b) => Some(bound(a)? + bound(b)?),
        Expr::Mul(a, b) => Some(bound(a)? * bound(b)?),
        _ => None,
    }
}

#[derive(Default)]
struct Tally {
    instrs: f64,
    branches: f64,
    dma: f64,
    dma_bytes: f64,
    mram_scalar: f64,
    innermost: f64,
    /// Host transfer calls and bytes, per DPU.
    calls: f64,
    bytes: f64,
}

impl Tally {
    fn expr(&mut self, e: &Expr, bufs: &[Buffer], k: f64) {
        e.visit(&mut |x| match x {
            Expr::Int(_) | Expr::Float(_) | Expr::Var(_) => {}
            Expr::Load(b, _) => {
                self.instrs += k;
                if bufs[*b as usize].scope == MemoryScope::Mram {
                    self.mram_scalar += k;
                }
            }
            _ => self.instrs += k,
        });
    }

    fn walk(&mut self, s: &Stmt, bufs: &[Buffer], dpu_loop: &dyn Fn(&crate::ir::For) -> bool, k: f64) {
        match s {
            Stmt::For(l) => {
                if dpu_loop(l) {
                    return self.walk(&l.body, bufs, dpu_loop, k);
                }
                let n = bound(&l.extent).unwrap_or(1).max(0) as f64;
                self.instrs += 2.0 * k * n;
                if !l.body.contains_loop() {
                    self.innermost += k * n;
                }
                self.walk(&l.body, bufs, dpu_loop, k * n);
            }
            Stmt::IfThen { cond, then, otherwise } => {
                self.instrs += k;
                self.branches += k;
                self.expr(cond, bufs, k);
                self.walk(then, bufs, dpu_loop, k);
                if let Some(o) = otherwise {
                    self.walk(o, bufs, dpu_loop, k);
                }
            }
            Stmt::Store { buf, index, value } => {
                self.instrs += k;
                if bufs[*buf as usize].scope == MemoryScope::Mram {
                    self.mram_scalar += k;
                }
                self.expr(index, bufs, k);
                self.expr(value, bufs, k);
            }
            Stmt::Allocate { body, .. } => self.walk(body, bufs, dpu_loop, k),
            Stmt::Seq(items) => items.iter().for_each(|i| self.walk(i, bufs, dpu_loop, k)),
            Stmt::Intrinsic(c) => match c {
                IntrinsicCall::DmaLoad { bytes, .. } | IntrinsicCall::DmaStore { bytes, .. } => {
                    self.instrs += 2.0 * k;
                    self.dma += k;
                    self.dma_bytes += k * *bytes as f64;
                }
                IntrinsicCall::HostToDpu { bytes, .. } | IntrinsicCall::DpuToHost { bytes, .. } => {
                    self.calls += k;
                    self.bytes += k * *bytes as f64;
                }
                IntrinsicCall::ParallelTransferGroup { bytes, members, .. } => {
                    self.calls += k;
                    self.bytes += k * (*bytes * members.len() as i64) as f64;
                }
                IntrinsicCall::LaunchKernel => {}
            },
            Stmt::Evaluate(e) => self.expr(e, bufs, k),
        }
    }
}

/// Innermost-loop iterations of one DPU, summed over its tasklets.
pub fn innermost_trips(m: &LoweredModule) -> f64 {
    let mut t = Tally::default();
    t.walk(&m.kernel, &m.buffers, &|_| false, 1.0);
    t.innermost
}

/// Estimated microseconds for one execution of `m`.
pub fn static_time(m: &LoweredModule, cfg: &MachineConfig) -> f64 {
    let is_dpu = |l: &crate::ir::For| Some(l.var) == m.dpu_vars.0 || Some(l.var) == m.dpu_vars.1;
    let never = |_: &crate::ir::For| false;
    let dpus = m.num_dpus().max(1) as f64;

    let mut k = Tally::default();
    k.walk(&m.kernel, &m.buffers, &never, 1.0);
    let c = Counters {
        instrs: k.instrs as u64,
        branches: k.branches as u64,
        dma_loads: k.dma as u64,
        dma_stores: 0,
        dma_bytes: k.dma_bytes as u64,
        mram_scalar: k.mram_scalar as u64,
        innermost_iters: 0,
        loop_iters: 0,
    };
    let kernel = kernel_cycles(&c, m.tasklets, cfg) / cfg.clock_mhz + cfg.launch_us;

    let width = (cfg.parallel_transfer_width as f64).min(dpus);
    let xfer = |s: &Stmt, bw: f64| {
        let mut t = Tally::default();
        t.walk(s, &m.buffers, &is_dpu, 1.0);
        // Ungrouped nests repeat per DPU; the grid is walked once above.
        t.bytes * dpus / width / bw + t.calls * (dpus / width).ceil() * cfg.transfer_call_us
    };
    let mut post = Tally::default();
    post.walk(&m.post, &m.buffers, &never, 1.0);
    let post_us = post.instrs / (cfg.host_ops_per_us * parallel_threads(&m.post, cfg) as f64);

    kernel
        + xfer(&m.setup, cfg.h2d_bytes_per_us)
        + xfer(&m.h2d, cfg.h2d_bytes_per_us)
        + xfer(&m.d2h, cfg.d2h_bytes_per_us)
        + post_us
}
