use crate::ir::WorkloadSpec;
use crate::sched::{BindAxis, Instruction};

/// A named workload, optionally with a fixed hand-written schedule.
pub struct Preset {
    pub name: &'static str,
    /// Shape used by default.
    pub scaled: &'static str,
    /// Shape selected by `--full-shape`.
    pub full: &'static str,
    pub trace: Option<fn(&WorkloadSpec) -> Vec<Instruction>>,
    /// Part of the optimization-level ablation table.
    pub ablation: bool,
}

/// One DPU, two rows per tasklet, 16-column cache tiles.
pub fn gemv_tiles(_: &WorkloadSpec) -> Vec<Instruction> {
    use Instruction::*;
    vec![
        Split { loop_: 0, factors: vec![Some(1), None, Some(2)] },
        Split { loop_: 1, factors: vec![None, Some(16)] },
        Bind { loop_: 3, axis: BindAxis::DpuX },
        Bind { loop_: 4, axis: BindAxis::Tasklet },
        CacheRead { block: 2, index: 0 },
        ComputeAt { block: 8, loop_: 6 },
        CacheRead { block: 2, index: 1 },
        ComputeAt { block: 9, loop_: 6 },
        CacheWrite { block: 2, index: 0 },
        ReverseComputeAt { block: 10, loop_: 4 },
    ]
}

/// One DPU, four tasklets, 16-element cache tiles.
pub fn va_tiles(_: &WorkloadSpec) -> Vec<Instruction> {
    use Instruction::*;
    vec![
        Split { loop_: 0, factors: vec![Some(1), Some(4), None, Some(16)] },
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

pub const PRESETS: &[Preset] = &[
    Preset { name: "gemv-boundary", scaled: "workload=gemv m=7 n=40", full: "workload=gemv m=7 n=40", trace: Some(gemv_tiles), ablation: false },
    Preset { name: "aligned", scaled: "workload=gemv m=8 n=32", full: "workload=gemv m=8 n=32", trace: Some(gemv_tiles), ablation: true },
    Preset { name: "misaligned-row", scaled: "workload=gemv m=7 n=32", full: "workload=gemv m=7 n=32", trace: Some(gemv_tiles), ablation: true },
    Preset { name: "misaligned-col", scaled: "workload=gemv m=8 n=40", full: "workload=gemv m=8 n=40", trace: Some(gemv_tiles), ablation: true },
    Preset { name: "misaligned-both", scaled: "workload=gemv m=7 n=40", full: "workload=gemv m=7 n=40", trace: Some(gemv_tiles), ablation: true },
    Preset { name: "misaligned-va", scaled: "workload=va n=1000", full: "workload=va n=1000", trace: Some(va_tiles), ablation: true },
    // GPT-J 6B fully connected layers (hidden size 4096) and attention MMTV
    // at batch 4, 128 tokens; the scaled forms divide each grid by 16.
    Preset { name: "gptj-qkv", scaled: "workload=mtv m=768 n=256", full: "workload=mtv m=12288 n=4096", trace: None, ablation: false },
    Preset { name: "gptj-proj", scaled: "workload=mtv m=256 n=256", full: "workload=mtv m=4096 n=4096", trace: None, ablation: false },
    Preset { name: "gptj-fc", scaled: "workload=mtv m=1024 n=256", full: "workload=mtv m=16384 n=4096", trace: None, ablation: false },
    Preset { name: "gptj-fcproj", scaled: "workload=mtv m=256 n=1024", full: "workload=mtv m=4096 n=16384", trace: None, ablation: false },
    Preset { name: "gptj-mmtv", scaled: "workload=mmtv m=16 n=32 k=256", full: "workload=mmtv m=64 n=128 k=256", trace: None, ablation: false },
];

pub fn preset(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}
