//! Static checks against machine limits, run before measurement.

use crate::ir::{Affine, Buffer, Expr, IntrinsicCall, MemoryScope, Stmt};
use crate::lower::LoweredModule;
use crate::machine::MachineConfig;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ViolationKind {
    DpuCountExceeded,
    TaskletCountExceeded,
    WramOverflow,
    IramHeuristicOverflow,
    DmaMisaligned,
    ZeroExtentLoop,
}

/// A failed check with the offending value and the limit it was held to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub value: i64,
    pub limit: i64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}({} vs {})", self.kind, self.value, self.limit)
    }
}

/// Bytes of WRAM one tasklet allocates, assuming every cache is live at once.
pub fn wram_footprint(kernel: &Stmt, buffers: &[Buffer]) -> i64 {
    let mut seen = BTreeSet::new();
    kernel.visit(&mut |s| {
        if let Stmt::Allocate { buf, .. } = s {
            if buffers[*buf as usize].scope == MemoryScope::Wram {
                seen.insert(*buf);
            }
        }
    });
    seen.iter().map(|b| buffers[*b as usize].bytes()).sum()
}

/// Static code size estimate charged against IRAM.
pub fn iram_estimate(kernel: &Stmt, cfg: &MachineConfig) -> i64 {
    kernel.node_count() as i64 * cfg.iram_bytes_per_node
}

fn dma_alignment(call: &IntrinsicCall, buffers: &[Buffer], align: i64) -> Option<Violation> {
    let (mram, mo, wram, wo, bytes) = match call {
        IntrinsicCall::DmaLoad { mram, mram_offset, wram, wram_offset, bytes }
        | IntrinsicCall::DmaStore { mram, mram_offset, wram, wram_offset, bytes } => {
            (*mram, mram_offset, *wram, wram_offset, *bytes)
        }
        _ => return None,
    };
    if bytes % align != 0 {
        return Some(Violation { kind: ViolationKind::DmaMisaligned, value: bytes, limit: align });
    }
    for (b, off) in [(mram, mo), (wram, wo)] {
        let elem = buffers[b as usize].dtype.bytes();
        match Affine::from_expr(off) {
            Some(a) => {
                if let Some(bad) = std::iter::once(a.constant)
                    .chain(a.terms.values().copied())
                    .map(|c| c * elem)
                    .find(|c| c % align != 0)
                {
                    return Some(Violation { kind: ViolationKind::DmaMisaligned, value: bad, limit: align });
                }
            }
            None => return Some(Violation { kind: ViolationKind::DmaMisaligned, value: -1, limit: align }),
        }
    }
    None
}

pub fn verify(m: &LoweredModule, cfg: &MachineConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    let dpus = m.num_dpus();
    if dpus > cfg.num_dpus_max {
        out.push(Violation { kind: ViolationKind::DpuCountExceeded, value: dpus, limit: cfg.num_dpus_max });
    }
    if m.tasklets > cfg.tasklets_max {
        out.push(Violation { kind: ViolationKind::TaskletCountExceeded, value: m.tasklets, limit: cfg.tasklets_max });
    }
    let wram = wram_footprint(&m.kernel, &m.buffers) * m.tasklets;
    if wram > cfg.wram_bytes {
        out.push(Violation { kind: ViolationKind::WramOverflow, value: wram, limit: cfg.wram_bytes });
    }
    let iram = iram_estimate(&m.kernel, cfg);
    if iram > cfg.iram_bytes {
        out.push(Violation { kind: ViolationKind::IramHeuristicOverflow, value: iram, limit: cfg.iram_bytes });
    }
    let mut dma = None;
    let mut zero = None;
    for s in [&m.setup, &m.h2d, &m.kernel, &m.d2h, &m.post] {
        s.visit(&mut |x| match x {
            Stmt::Intrinsic(c) if dma.is_none() => dma = dma_alignment(c, &m.buffers, cfg.dma_alignment_bytes),
            Stmt::For(l) if zero.is_none() => {
                if let Expr::Int(e) = l.extent {
                    if e < 1 {
                        zero = Some(Violation { kind: ViolationKind::ZeroExtentLoop, value: e, limit: 1 });
                    }
                }
            }
            _ => {}
        });
    }
    out.extend(dma);
    out.extend(zero);
    out
}
