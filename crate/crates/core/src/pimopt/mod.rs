//! PIM-aware kernel passes: DMA boundary-check elimination, loop-bound
//! tightening and invariant branch hoisting.

use crate::ir::{simplify, Affine, Buffer, Expr, For, IntrinsicCall, MemoryScope, Stmt, VarId};
use crate::lower::LoweredModule;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OptLevel {
    O0,
    O1,
    O2,
    #[default]
    O3,
}

impl OptLevel {
    pub const ALL: [OptLevel; 4] = [OptLevel::O0, OptLevel::O1, OptLevel::O2, OptLevel::O3];

    pub fn index(self) -> u8 {
        self as u8
    }
}

impl fmt::Display for OptLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "O{}", self.index())
    }
}

impl FromStr for OptLevel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim_start_matches(['O', 'o']) {
            "0" => Ok(OptLevel::O0),
            "1" => Ok(OptLevel::O1),
            "2" => Ok(OptLevel::O2),
            "3" => Ok(OptLevel::O3),
            _ => Err(format!("unknown optimization level `{s}` (expected 0-3)")),
        }
    }
}

/// Buffer table and ranges of variables bound outside the kernel.
#[derive(Clone, Debug)]
pub struct KernelInfo {
    pub buffers: Vec<Buffer>,
    pub ranges: BTreeMap<VarId, (i64, i64)>,
}

impl KernelInfo {
    pub fn of(m: &LoweredModule) -> KernelInfo {
        let mut ranges = BTreeMap::new();
        if let Some(v) = m.dpu_vars.0 {
            ranges.insert(v, (0, m.dpu_grid.0 - 1));
        }
        if let Some(v) = m.dpu_vars.1 {
            ranges.insert(v, (0, m.dpu_grid.1 - 1));
        }
        KernelInfo { buffers: m.buffers.clone(), ranges }
    }
}

/// Upper bound of an integer expression, when one is derivable.
fn upper_bound(e: &Expr, ranges: &BTreeMap<VarId, (i64, i64)>) -> Option<i64> {
    match e {
        Expr::Min(a, b) => match (upper_bound(a, ranges), upper_bound(b, ranges)) {
            (Some(x), Some(y)) => Some(x.min(y)),
            (x, y) => x.or(y),
        },
        Expr::Max(a, b) => Some(upper_bound(a, ranges)?.max(upper_bound(b, ranges)?)),
        Expr::FloorDiv(a, b) => {
            let d = b.as_int().filter(|d| *d > 0)?;
            Some(upper_bound(a, ranges)?.div_euclid(d))
        }
        _ => {
            let a = Affine::from_expr(e)?;
            if a.terms.keys().any(|v| !ranges.contains_key(v)) {
                return None;
            }
            Some(a.range(|v| ranges[&v]).1)
        }
    }
}

fn lower_bound(e: &Expr, ranges: &BTreeMap<VarId, (i64, i64)>) -> Option<i64> {
    match e {
        Expr::Min(a, b) => Some(lower_bound(a, ranges)?.min(lower_bound(b, ranges)?)),
        Expr::Max(a, b) => match (lower_bound(a, ranges), lower_bound(b, ranges)) {
            (Some(x), Some(y)) => Some(x.max(y)),
            (x, y) => x.or(y),
        },
        Expr::FloorDiv(a, b) => {
            let d = b.as_int().filter(|d| *d > 0)?;
            Some(lower_bound(a, ranges)?.div_euclid(d))
        }
        _ => {
            let a = Affine::from_expr(e)?;
            if a.terms.keys().any(|v| !ranges.contains_key(v)) {
                return None;
            }
            Some(a.range(|v| ranges[&v]).0)
        }
    }
}

fn with_loop(ranges: &BTreeMap<VarId, (i64, i64)>, l: &For) -> BTreeMap<VarId, (i64, i64)> {
    let mut r = ranges.clone();
    match (lower_bound(&l.min, ranges), upper_bound(&l.min, ranges), upper_bound(&l.extent, ranges)) {
        (Some(lo), Some(min_hi), Some(ext)) => {
            r.insert(l.var, (lo, (min_hi + ext - 1).max(lo)));
        }
        _ => {
            r.remove(&l.var);
        }
    }
    r
}

/// Rebuild a statement, applying `f` to every loop bottom-up with the
/// ranges of enclosing loop variables.
fn rewrite_loops(
    s: &Stmt,
    ranges: &BTreeMap<VarId, (i64, i64)>,
    f: &mut impl FnMut(For, &BTreeMap<VarId, (i64, i64)>) -> Stmt,
) -> Stmt {
    match s {
        Stmt::For(l) => {
            let inner = with_loop(ranges, l);
            let body = rewrite_loops(&l.body, &inner, f);
            f(For { body, ..(**l).clone() }, ranges)
        }
        Stmt::IfThen { cond, then, otherwise } => Stmt::IfThen {
            cond: cond.clone(),
            then: Box::new(rewrite_loops(then, ranges, f)),
            otherwise: otherwise.as_ref().map(|o| Box::new(rewrite_loops(o, ranges, f))),
        },
        Stmt::Allocate { buf, body } => Stmt::allocate(*buf, rewrite_loops(body, ranges, f)),
        Stmt::Seq(items) => Stmt::Seq(items.iter().map(|i| rewrite_loops(i, ranges, f)).collect()),
        other => other.clone(),
    }
}

fn unguard(body: &Stmt) -> (Vec<Expr>, &Stmt) {
    match body {
        Stmt::IfThen { cond, then, otherwise: None } => (cond.conjuncts(), then),
        other => (Vec::new(), other),
    }
}

fn guarded(conds: Vec<Expr>, s: Stmt) -> Stmt {
    match Expr::all_of(conds) {
        Some(c) => Stmt::if_then(c, s),
        None => s,
    }
}

/// Replace a guarded element-copy loop between MRAM and WRAM by one DMA.
pub fn eliminate_dma_boundary_checks(k: &Stmt, info: &KernelInfo) -> Stmt {
    rewrite_loops(k, &info.ranges, &mut |l, ranges| match copy_to_dma(&l, ranges, &info.buffers) {
        Some(dma) => dma,
        None => Stmt::For(Box::new(l)),
    })
}

fn copy_to_dma(l: &For, ranges: &BTreeMap<VarId, (i64, i64)>, bufs: &[Buffer]) -> Option<Stmt> {
    let extent = l.extent.as_int()?;
    if l.min != Expr::Int(0) || extent < 1 {
        return None;
    }
    let (_, body) = unguard(&l.body);
    let Stmt::Store { buf: dst, index: di, value: Expr::Load(src, si) } = body else {
        return None;
    };
    let (d, s) = (&bufs[*dst as usize], &bufs[*src as usize]);
    let load = match (s.scope, d.scope) {
        (MemoryScope::Mram, MemoryScope::Wram) => true,
        (MemoryScope::Wram, MemoryScope::Mram) => false,
        _ => return None,
    };
    if s.dtype != d.dtype {
        return None;
    }
    let elem = d.dtype.bytes();
    let (da, sa) = (Affine::from_expr(di)?, Affine::from_expr(si)?);
    if da.coef(l.var) != 1 || sa.coef(l.var) != 1 {
        return None;
    }
    let mut bytes = extent * elem;
    if load {
        bytes = (bytes + 7) / 8 * 8;
    } else if bytes % 8 != 0 {
        return None;
    }
    let n = bytes / elem;
    let at0 = |a: &Affine| a.substitute(l.var, &Affine::constant(0));
    let (d0, s0) = (at0(&da), at0(&sa));
    for (a, b) in [(&d0, d), (&s0, s)] {
        if a.constant * elem % 8 != 0 || a.terms.values().any(|c| c * elem % 8 != 0) {
            return None;
        }
        if a.terms.keys().any(|v| !ranges.contains_key(v)) {
            return None;
        }
        let (lo, hi) = a.range(|v| ranges[&v]);
        if lo < 0 || hi + n > b.numel() {
            return None;
        }
    }
    let (mram, mram_offset, wram, wram_offset) =
        if load { (*src, s0.to_expr(), *dst, d0.to_expr()) } else { (*dst, d0.to_expr(), *src, s0.to_expr()) };
    Some(Stmt::Intrinsic(if load {
        IntrinsicCall::DmaLoad { mram, mram_offset, wram, wram_offset, bytes }
    } else {
        IntrinsicCall::DmaStore { mram, mram_offset, wram, wram_offset, bytes }
    }))
}

/// Fold affine guard conjuncts on a loop's own variable into its bound.
pub fn tighten_loop_bounds(k: &Stmt, info: &KernelInfo) -> Stmt {
    rewrite_loops(k, &info.ranges, &mut |l, ranges| tighten(l, ranges))
}

fn tighten(mut l: For, ranges: &BTreeMap<VarId, (i64, i64)>) -> Stmt {
    let Stmt::IfThen { cond, then, otherwise: None } = &l.body else {
        return Stmt::For(Box::new(l));
    };
    if l.min != Expr::Int(0) {
        return Stmt::For(Box::new(l));
    }
    let mut keep = Vec::new();
    let mut extent = l.extent.clone();
    let mut changed = false;
    for c in cond.conjuncts() {
        let Expr::Lt(a, b) = &c else {
            keep.push(c);
            continue;
        };
        let aff = match (Affine::from_expr(a), Affine::from_expr(b)) {
            (Some(x), Some(y)) => x.sub(&y),
            _ => {
                keep.push(c);
                continue;
            }
        };
        let coef = aff.coef(l.var);
        if coef < 1 {
            keep.push(c);
            continue;
        }
        // coef·v + rest < 0  <=>  v < ceil(-rest / coef)
        let rest = aff.substitute(l.var, &Affine::constant(0));
        let numer = rest.scale(-1).add(&Affine::constant(coef - 1));
        let bound = simplify(&Expr::floordiv(numer.to_expr(), Expr::Int(coef)));
        let always = match (lower_bound(&bound, ranges), upper_bound(&extent, ranges)) {
            (Some(lo), Some(hi)) => lo >= hi,
            _ => false,
        };
        if !always {
            extent = simplify(&Expr::min(extent, bound));
        }
        changed = true;
    }
    if changed {
        l.extent = extent;
        l.body = guarded(keep, (**then).clone());
    }
    Stmt::For(Box::new(l))
}

/// Unswitch loop-invariant guards, sinking the DMA cache fills that feed
/// only the guarded region beneath them, until nothing moves.
pub fn hoist_invariant_branches(k: &Stmt, info: &KernelInfo) -> Stmt {
    let mut cur = k.clone();
    loop {
        let next = rewrite_loops(&cur, &info.ranges, &mut |l, _| hoist(l));
        if next == cur {
            return next;
        }
        cur = next;
    }
}

fn hoist(mut l: For) -> Stmt {
    l.body = sink_fills(&l.body);
    let Stmt::IfThen { cond, then, otherwise: None } = &l.body else {
        return Stmt::For(Box::new(l));
    };
    let (inv, dep): (Vec<Expr>, Vec<Expr>) = cond
        .conjuncts()
        .into_iter()
        .partition(|c| !c.uses_var(l.var) && c.loads().is_empty());
    if inv.is_empty() {
        return Stmt::For(Box::new(l));
    }
    l.body = guarded(dep, (**then).clone());
    guarded(inv, Stmt::For(Box::new(l)))
}

/// `alloc*(seq[dma loads.., if c: T])` becomes `if c: alloc*(seq[dma loads.., T])`
/// when the guard reads no memory.
fn sink_fills(s: &Stmt) -> Stmt {
    let mut allocs = Vec::new();
    let mut cur = s;
    while let Stmt::Allocate { buf, body } = cur {
        allocs.push(*buf);
        cur = body;
    }
    let Stmt::Seq(items) = cur else {
        return s.clone();
    };
    let Some((Stmt::IfThen { cond, then, otherwise: None }, fills)) = items.split_last() else {
        return s.clone();
    };
    if fills.is_empty()
        || !cond.loads().is_empty()
        || !fills.iter().all(|f| matches!(f, Stmt::Intrinsic(IntrinsicCall::DmaLoad { .. })))
    {
        return s.clone();
    }
    let mut inner = fills.to_vec();
    inner.push((**then).clone());
    let body = allocs.iter().rev().fold(Stmt::Seq(inner), |b, a| Stmt::allocate(*a, b));
    Stmt::if_then(cond.clone(), body)
}

/// Cumulative passes up to `level`, in fixed order.
pub fn apply_pim_opts(k: &Stmt, info: &KernelInfo, level: OptLevel) -> Stmt {
    let mut k = k.clone();
    if level >= OptLevel::O1 {
        k = eliminate_dma_boundary_checks(&k, info);
    }
    if level >= OptLevel::O2 {
        k = tighten_loop_bounds(&k, info);
    }
    if level >= OptLevel::O3 {
        k = hoist_invariant_branches(&k, info);
    }
    k
}

/// Apply the passes to a lowered module's kernel.
pub fn optimize(mut m: LoweredModule, level: OptLevel) -> LoweredModule {
    let info = KernelInfo::of(&m);
    m.kernel = apply_pim_opts(&m.kernel, &info, level);
    m
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StaticMetrics {
    pub guards: usize,
    pub dma_sites: usize,
    pub loops: usize,
}

pub fn count_static_metrics(k: &Stmt) -> StaticMetrics {
    let mut m = StaticMetrics::default();
    k.visit(&mut |s| match s {
        Stmt::IfThen { .. } => m.guards += 1,
        Stmt::Intrinsic(c) if c.is_dma() => m.dma_sites += 1,
        Stmt::For(_) => m.loops += 1,
        _ => {}
    });
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{print_stmt, ForKind, ScalarType};

    fn bufs() -> Vec<Buffer> {
        vec![
            Buffer { id: 0, name: "X_m".into(), dtype: ScalarType::Int32, shape: vec![64], scope: MemoryScope::Mram },
            Buffer { id: 1, name: "X_w".into(), dtype: ScalarType::Int32, shape: vec![16], scope: MemoryScope::Wram },
        ]
    }

    fn info() -> KernelInfo {
        KernelInfo { buffers: bufs(), ranges: BTreeMap::new() }
    }

    fn names() -> Vec<String> {
        vec!["j".into(), "k".into()]
    }

    #[test]
    fn copy_loop_becomes_one_dma() {
        // for k in 16: if j*16 + k < 40: X_w[k] = X_m[j*16 + k]
        let idx = Expr::add(Expr::mul(Expr::Var(0), Expr::Int(16)), Expr::Var(1));
        let copy = Stmt::Store { buf: 1, index: Expr::Var(1), value: Expr::load(0, idx.clone()) };
        let inner =
            Stmt::for_loop(1, Expr::Int(16), ForKind::Serial, Stmt::if_then(Expr::lt(idx, Expr::Int(40)), copy));
        let k = Stmt::for_loop(0, Expr::Int(3), ForKind::Serial, inner);
        let out = eliminate_dma_boundary_checks(&k, &info());
        let text = print_stmt(&out, &names(), &bufs());
        assert!(text.contains("dma_load"), "{text}");
        assert!(text.contains("64 B"), "{text}");
        assert_eq!(count_static_metrics(&out), StaticMetrics { guards: 0, dma_sites: 1, loops: 1 });
    }

    #[test]
    fn compute_loop_is_untouched() {
        let acc = Stmt::Store {
            buf: 1,
            index: Expr::Int(0),
            value: Expr::add(Expr::load(1, Expr::Int(0)), Expr::load(0, Expr::Var(1))),
        };
        let k = Stmt::for_loop(1, Expr::Int(16), ForKind::Serial, Stmt::if_then(Expr::lt(Expr::Var(1), Expr::Int(9)), acc));
        assert_eq!(eliminate_dma_boundary_checks(&k, &info()), k);
    }

    #[test]
    fn tightening_solves_the_linear_guard() {
        // for k in 8: if 2k + 3 < 10: ...
        let body = Stmt::Store { buf: 1, index: Expr::Int(0), value: Expr::Var(1) };
        let g = Expr::lt(Expr::add(Expr::mul(Expr::Var(1), Expr::Int(2)), Expr::Int(3)), Expr::Int(10));
        let k = Stmt::for_loop(1, Expr::Int(8), ForKind::Serial, Stmt::if_then(g, body.clone()));
        let out = tighten_loop_bounds(&k, &info());
        assert_eq!(out, Stmt::for_loop(1, Expr::Int(4), ForKind::Serial, body));
    }

    #[test]
    fn even_split_guard_disappears() {
        let body = Stmt::Store { buf: 1, index: Expr::Int(0), value: Expr::Var(1) };
        let idx = Expr::add(Expr::mul(Expr::Var(0), Expr::Int(8)), Expr::Var(1));
        let inner = Stmt::for_loop(1, Expr::Int(8), ForKind::Serial, Stmt::if_then(Expr::lt(idx, Expr::Int(40)), body.clone()));
        let k = Stmt::for_loop(0, Expr::Int(5), ForKind::Serial, inner);
        let out = tighten_loop_bounds(&k, &info());
        let want = Stmt::for_loop(0, Expr::Int(5), ForKind::Serial, Stmt::for_loop(1, Expr::Int(8), ForKind::Serial, body));
        assert_eq!(out, want);
    }

    #[test]
    fn empty_kernel_counts_zero() {
        assert_eq!(count_static_metrics(&Stmt::empty()), StaticMetrics::default());
        assert_eq!(apply_pim_opts(&Stmt::empty(), &info(), OptLevel::O3), Stmt::empty());
    }

    #[test]
    fn level_parsing() {
        assert_eq!("2".parse::<OptLevel>().unwrap(), OptLevel::O2);
        assert_eq!("O3".parse::<OptLevel>().unwrap(), OptLevel::O3);
        assert!("4".parse::<OptLevel>().is_err());
    }
}
