//! Host/kernel split, per-DPU addressing and host transfer generation.

mod transfer;

pub use transfer::{
    descriptors, descriptors_csv, host_extents, opt_bank_parallel, opt_bulk_transfer, Grouping, TransferDescriptor,
};

use crate::ir::workload::flat_index;
use crate::ir::{
    print_stmt, Affine, BufId, Buffer, Direction, Expr, ForKind, IntrinsicCall, MemoryScope, Stmt, VarId,
};
use crate::sched::{render_block, Backing, RefBacking, Schedule};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LowerError {
    #[error("schedule binds no loop to a DPU axis")]
    NoDpuBinding,
    #[error("DPU-bound loops must be outermost")]
    DpuNotOutermost,
    #[error("the tasklet loop must directly follow the DPU loops")]
    TaskletPlacement,
    #[error("WRAM buffer `{0}` is accessed outside its compute_at region")]
    CacheOutsideKernel(String),
    #[error("non-affine MRAM offset for `{0}`")]
    NonAffine(String),
}

/// Where a global buffer lives on the machine.
#[derive(Clone, Debug, PartialEq)]
pub struct Placement {
    pub scope: MemoryScope,
    pub mram: BufId,
    /// Per-DPU MRAM allocation, padded.
    pub mram_bytes: i64,
}

/// Everything needed to emit host transfers for one global buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferSite {
    pub global: BufId,
    pub mram: BufId,
    pub direction: Direction,
    pub once: bool,
    /// Kernel loops outside the caching point that move the index, then the
    /// per-dimension copy loops, outer to inner.
    pub loops: Vec<(VarId, i64)>,
    /// Global coordinates of one transferred element.
    pub coords: Vec<Affine>,
}

#[derive(Clone, Debug)]
pub struct LoweredModule {
    pub name: String,
    pub buffers: Vec<Buffer>,
    pub var_names: Vec<String>,
    pub inputs: Vec<BufId>,
    pub outputs: Vec<BufId>,
    pub constants: Vec<BufId>,
    pub dpu_grid: (i64, i64),
    /// Variables of the loops bound to dpu.x and dpu.y, when bound.
    pub dpu_vars: (Option<VarId>, Option<VarId>),
    pub tasklets: i64,
    /// Transfer-once constant tensors, sent before anything else.
    pub setup: Stmt,
    pub h2d: Stmt,
    pub kernel: Stmt,
    pub d2h: Stmt,
    /// Host post-processing, e.g. the final reduction after rfactor.
    pub post: Stmt,
    pub placements: BTreeMap<BufId, Placement>,
    pub sites: Vec<TransferSite>,
    pub has_rfactor: bool,
}

impl LoweredModule {
    pub fn num_dpus(&self) -> i64 {
        self.dpu_grid.0 * self.dpu_grid.1
    }

    /// The complete host program with the launch marker in place.
    pub fn host(&self) -> Stmt {
        Stmt::seq(vec![
            self.setup.clone(),
            self.h2d.clone(),
            Stmt::Intrinsic(IntrinsicCall::LaunchKernel),
            self.d2h.clone(),
            self.post.clone(),
        ])
    }

    /// Linearized DPU id of grid coordinates.
    pub fn dpu_id(&self, x: i64, y: i64) -> i64 {
        x * self.dpu_grid.1 + y
    }

    pub fn dpu_coords(&self, id: i64) -> (i64, i64) {
        (id / self.dpu_grid.1, id % self.dpu_grid.1)
    }

    fn dpu_expr(&self) -> Expr {
        let x = self.dpu_vars.0.map(Expr::Var).unwrap_or(Expr::Int(0));
        let y = self.dpu_vars.1.map(Expr::Var).unwrap_or(Expr::Int(0));
        crate::ir::simplify(&Expr::add(Expr::mul(x, Expr::Int(self.dpu_grid.1)), y))
    }

    pub fn buffer_by_name(&self, name: &str) -> Option<&Buffer> {
        self.buffers.iter().find(|b| b.name == name)
    }

    /// Deterministic textual form used for golden comparisons.
    pub fn pretty(&self) -> String {
        let mut out = String::new();
        writeln!(out, "module {} grid=({}, {}) tasklets={}", self.name, self.dpu_grid.0, self.dpu_grid.1, self.tasklets)
            .unwrap();
        for b in &self.buffers {
            writeln!(out, "  buffer {}: {}{:?} @{}", b.name, b.dtype, b.shape, b.scope).unwrap();
        }
        for (title, s) in [
            ("setup", &self.setup),
            ("h2d", &self.h2d),
            ("kernel", &self.kernel),
            ("d2h", &self.d2h),
            ("post", &self.post),
        ] {
            writeln!(out, "{title}:").unwrap();
            out.push_str(&indent(&print_stmt(s, &self.var_names, &self.buffers)));
        }
        out
    }
}

fn indent(s: &str) -> String {
    s.lines().map(|l| format!("  {l}\n")).collect()
}

struct KernelBacking {
    mram: BTreeMap<BufId, (BufId, Vec<i64>)>,
    dpu_vars: BTreeSet<VarId>,
}

impl KernelBacking {
    fn local(&self, dims: &[Affine]) -> Vec<Affine> {
        dims.iter().map(|d| d.restrict(|v| !self.dpu_vars.contains(&v))).collect()
    }
}

impl Backing for KernelBacking {
    fn access(&self, buf: BufId, dims: &[Affine]) -> (BufId, Expr) {
        let (m, shape) = &self.mram[&buf];
        (*m, flat_index(&self.local(dims), shape).to_expr())
    }
    fn guard_init(&self) -> bool {
        false
    }
}

/// Split a scheduled program into host and kernel parts and generate the
/// scalar transfer nests.
pub fn lower(s: &Schedule) -> Result<LoweredModule, LowerError> {
    Ok(generate_transfers(lower_kernel(s)?))
}

/// Host/kernel split without transfer code; transfer sites are recorded
/// for [`generate_transfers`].
pub fn lower_kernel(s: &Schedule) -> Result<LoweredModule, LowerError> {
    let st = &s.state;
    let blk = &st.blocks[0];
    let ndpu = blk
        .loops
        .iter()
        .take_while(|h| matches!(st.kind(**h), ForKind::BoundDpuX | ForKind::BoundDpuY))
        .count();
    if ndpu == 0 {
        return Err(if blk.loops.iter().any(|h| st.kind(*h).is_dpu()) {
            LowerError::DpuNotOutermost
        } else {
            LowerError::NoDpuBinding
        });
    }
    if blk.loops[ndpu..].iter().any(|h| st.kind(*h).is_dpu()) {
        return Err(LowerError::DpuNotOutermost);
    }
    let tpos = blk.loops.iter().position(|h| st.kind(*h) == ForKind::BoundTasklet);
    if tpos.is_some_and(|p| p != ndpu) {
        return Err(LowerError::TaskletPlacement);
    }
    let tasklets = tpos.map(|p| st.extent(blk.loops[p])).unwrap_or(1);
    let mut dpu_vars = (None, None);
    let (mut xb, mut yb) = (1, 1);
    for h in &blk.loops[..ndpu] {
        match st.kind(*h) {
            ForKind::BoundDpuX => {
                dpu_vars.0 = Some(st.var(*h));
                xb = st.extent(*h);
            }
            _ => {
                dpu_vars.1 = Some(st.var(*h));
                yb = st.extent(*h);
            }
        }
    }
    let min_depth = ndpu + usize::from(tpos.is_some());
    for c in &blk.caches {
        let depth = crate::sched::render::cache_depth(st, 0, c);
        if depth < min_depth {
            return Err(LowerError::CacheOutsideKernel(st.buffers[c.wram as usize].name.clone()));
        }
    }

    let dpu_set: BTreeSet<VarId> = [dpu_vars.0, dpu_vars.1].into_iter().flatten().collect();
    let mut buffers = st.buffers.clone();
    let mut placements = BTreeMap::new();
    let mut mram = BTreeMap::new();
    let mut accesses: Vec<(&crate::sched::Access, Direction)> =
        blk.reads.iter().map(|r| (r, Direction::H2D)).collect();
    accesses.push((&blk.output, Direction::D2H));
    for (acc, _) in &accesses {
        let g = &st.buffers[acc.buf as usize];
        let ext: Vec<i64> = acc
            .dims
            .iter()
            .map(|d| d.restrict(|v| !dpu_set.contains(&v)).range(|v| st.var_range(v)).1 + 1)
            .collect();
        let shape = crate::sched::render::pad_last_dim(ext, g.dtype.bytes());
        let id = buffers.len() as BufId;
        let mb = Buffer { id, name: format!("{}_m", g.name), dtype: g.dtype, shape: shape.clone(), scope: MemoryScope::Mram };
        placements.insert(acc.buf, Placement { scope: MemoryScope::Mram, mram: id, mram_bytes: mb.bytes() });
        buffers.push(mb);
        mram.insert(acc.buf, (id, shape));
    }
    let backing = KernelBacking { mram: mram.clone(), dpu_vars: dpu_set.clone() };
    let mut vars = st.var_names.clone();
    let kernel = render_block(st, 0, ndpu, &backing, &mut vars, &mut buffers)
        .map_err(LowerError::CacheOutsideKernel)?;
    let post = if st.blocks.len() > 1 {
        let rb = RefBacking::new(&st.buffers);
        render_block(st, 1, 0, &rb, &mut vars, &mut buffers).map_err(LowerError::CacheOutsideKernel)?
    } else {
        Stmt::empty()
    };


    let mut sites = Vec::new();
    for (acc, dir) in &accesses {
        let cache = blk.caches.iter().find(|c| c.buf == acc.buf);
        let (loops_part, coords_base, fill): (Vec<crate::sched::Handle>, Vec<Affine>, Vec<i64>) = match cache {
            Some(c) => {
                let depth = crate::sched::render::cache_depth(st, 0, c);
                let g = crate::sched::render::cache_geometry(st, 0, c);
                (blk.loops[ndpu..depth].to_vec(), g.outer.clone(), g.ext.clone())
            }
            None => (blk.loops[ndpu..].to_vec(), acc.dims.clone(), vec![1; acc.dims.len()]),
        };
        let used: BTreeSet<VarId> = coords_base.iter().flat_map(|a| a.terms.keys().copied()).collect();
        let mut loops: Vec<(VarId, i64)> = loops_part
            .iter()
            .filter(|h| used.contains(&st.var(**h)))
            .map(|h| (st.var(*h), st.extent(*h)))
            .collect();
        let gname = st.buffers[acc.buf as usize].name.clone();
        let mut coords = coords_base.clone();
        for (d, &e) in fill.iter().enumerate() {
            if e > 1 {
                vars.push(format!("{gname}_t{d}"));
                let v = (vars.len() - 1) as VarId;
                loops.push((v, e));
                coords[d] = coords[d].add(&Affine::var(v));
            }
        }
        sites.push(TransferSite {
            global: acc.buf,
            mram: mram[&acc.buf].0,
            direction: *dir,
            once: false,
            loops,
            coords,
        });
    }

    Ok(LoweredModule {
        name: st.name.clone(),
        buffers,
        var_names: vars,
        inputs: st.inputs.clone(),
        outputs: st.outputs.clone(),
        constants: Vec::new(),
        dpu_grid: (xb, yb),
        dpu_vars,
        tasklets,
        setup: Stmt::empty(),
        h2d: Stmt::empty(),
        kernel,
        d2h: Stmt::empty(),
        post,
        placements,
        sites,
        has_rfactor: st.rf_buffer.is_some(),
    })
}

/// Mark input buffers as transfer-once constants by name.
pub fn mark_constants(mut m: LoweredModule, names: &[String]) -> LoweredModule {
    m.constants = m
        .inputs
        .iter()
        .copied()
        .filter(|b| names.iter().any(|n| *n == m.buffers[*b as usize].name))
        .collect();
    for site in m.sites.iter_mut() {
        site.once = m.constants.contains(&site.global);
    }
    generate_transfers(m)
}

/// Emit one scalar transfer per element at each site, nested under host
/// loops over the DPU grid.
pub fn generate_transfers(mut m: LoweredModule) -> LoweredModule {
    let mut setup = Vec::new();
    let mut h2d = Vec::new();
    let mut d2h = Vec::new();
    let dpu = m.dpu_expr();
    let ranges: BTreeMap<VarId, i64> = m
        .sites
        .iter()
        .flat_map(|s| s.loops.iter().copied())
        .chain([(m.dpu_vars.0, m.dpu_grid.0), (m.dpu_vars.1, m.dpu_grid.1)].into_iter().filter_map(|(v, e)| v.map(|v| (v, e))))
        .collect();
    for site in &m.sites {
        let g = &m.buffers[site.global as usize];
        let mb = &m.buffers[site.mram as usize];
        let dpu_set: BTreeSet<VarId> = [m.dpu_vars.0, m.dpu_vars.1].into_iter().flatten().collect();
        let local: Vec<Affine> = site.coords.iter().map(|d| d.restrict(|v| !dpu_set.contains(&v))).collect();
        let global_offset = flat_index(&site.coords, &g.shape).to_expr();
        let mram_offset = flat_index(&local, &mb.shape).to_expr();
        let bytes = g.dtype.bytes();
        let call = match site.direction {
            Direction::H2D => IntrinsicCall::HostToDpu {
                global: site.global,
                global_offset,
                dpu: dpu.clone(),
                mram: site.mram,
                mram_offset,
                bytes,
            },
            Direction::D2H => IntrinsicCall::DpuToHost {
                global: site.global,
                global_offset,
                dpu: dpu.clone(),
                mram: site.mram,
                mram_offset,
                bytes,
            },
        };
        let mut conds = Vec::new();
        for (d, c) in site.coords.iter().enumerate() {
            let max = c.range(|v| (0, ranges.get(&v).copied().unwrap_or(1) - 1)).1;
            if max >= g.shape[d] {
                conds.push(Expr::lt(c.to_expr(), Expr::Int(g.shape[d])));
            }
        }
        let mut body = Stmt::Intrinsic(call);
        if let Some(c) = Expr::all_of(conds) {
            body = Stmt::if_then(c, body);
        }
        for &(v, e) in site.loops.iter().rev() {
            body = Stmt::for_loop(v, Expr::Int(e), ForKind::Serial, body);
        }
        for (v, e) in [(m.dpu_vars.1, m.dpu_grid.1), (m.dpu_vars.0, m.dpu_grid.0)] {
            if let Some(v) = v {
                body = Stmt::for_loop(v, Expr::Int(e), ForKind::Serial, body);
            }
        }
        match (site.direction, site.once) {
            (Direction::H2D, true) => setup.push(body),
            (Direction::H2D, false) => h2d.push(body),
            (Direction::D2H, _) => d2h.push(body),
        }
    }
    m.setup = Stmt::Seq(setup);
    m.h2d = Stmt::Seq(h2d);
    m.d2h = Stmt::Seq(d2h);
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{build_workload, WorkloadKind, WorkloadSpec};
    use crate::sched::{create_schedule, replay, BindAxis, Instruction};

    #[test]
    fn requires_a_dpu_binding() {
        let p = build_workload(&WorkloadSpec::new(WorkloadKind::Va, &[8])).unwrap();
        let s = create_schedule(&p).unwrap();
        assert_eq!(lower(&s).unwrap_err(), LowerError::NoDpuBinding);
    }

    #[test]
    fn linearizes_two_dpu_axes() {
        let p = build_workload(&WorkloadSpec::new(WorkloadKind::Mtv, &[64, 128])).unwrap();
        let trace = vec![
            Instruction::Split { loop_: 0, factors: vec![Some(32), None] },
            Instruction::Split { loop_: 1, factors: vec![Some(64), None] },
            Instruction::Reorder { loops: vec![3, 5, 4, 6] },
            Instruction::Rfactor { loop_: 5, factor_axis: 0 },
            Instruction::Bind { loop_: 3, axis: BindAxis::DpuX },
            Instruction::Bind { loop_: 5, axis: BindAxis::DpuY },
        ];
        let s = replay(&trace, &p).unwrap();
        let m = lower(&s).unwrap();
        assert_eq!(m.dpu_grid, (32, 64));
        assert_eq!(m.num_dpus(), 2048);
        assert_eq!(m.dpu_id(1, 2), 66);
        let text = crate::ir::print_expr(&m.dpu_expr(), &m.var_names, &m.buffers);
        assert_eq!(text, "((i_0 * 64) + j_0)");
    }
}
