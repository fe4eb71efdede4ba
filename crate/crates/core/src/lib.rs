//! A small autotuning tensor compiler for a simulated bank-parallel
//! processing-in-DRAM machine.

pub mod cli;
pub mod ir;
pub mod lower;
pub mod machine;
pub mod pimopt;
pub mod sched;
pub mod tune;
pub mod verify;

use lower::{LowerError, LoweredModule};
use machine::MachineConfig;
use pimopt::OptLevel;
use sched::Schedule;

/// Full pipeline from a schedule to an executable module: lowering,
/// transfer generation and coalescing, then kernel passes up to `level`.
pub fn compile(s: &Schedule, level: OptLevel, cfg: &MachineConfig) -> Result<LoweredModule, LowerError> {
    let m = lower::lower(s)?;
    let m = lower::opt_bulk_transfer(m);
    let m = lower::opt_bank_parallel(m, cfg.parallel_transfer_width);
    Ok(pimopt::optimize(m, level))
}
