use super::LoweredModule;
use crate::ir::{
    prove, simplify, Affine, BufId, Buffer, Counters, Direction, Env, EvalError, ExecHooks, Expr, ForKind,
    GroupMember, IntrinsicCall, Stmt, VarId,
};
use std::collections::BTreeMap;

/// Merge scalar transfers whose innermost loop walks contiguous memory on
/// both sides into one larger transfer, repeating outward.
pub fn opt_bulk_transfer(mut m: LoweredModule) -> LoweredModule {
    m.setup = bulk(&m.setup, &m.buffers);
    m.h2d = bulk(&m.h2d, &m.buffers);
    m.d2h = bulk(&m.d2h, &m.buffers);
    m
}

fn bulk(s: &Stmt, bufs: &[Buffer]) -> Stmt {
    match s {
        Stmt::For(l) => {
            let body = bulk(&l.body, bufs);
            if let (Expr::Int(0), Expr::Int(e)) = (&l.min, &l.extent) {
                if let Some(merged) = merge(l.var, *e, &body, bufs) {
                    return merged;
                }
            }
            let mut l = (**l).clone();
            l.body = body;
            Stmt::For(Box::new(l))
        }
        Stmt::Seq(items) => Stmt::Seq(items.iter().map(|i| bulk(i, bufs)).collect()),
        Stmt::IfThen { cond, then, otherwise } => Stmt::IfThen {
            cond: cond.clone(),
            then: Box::new(bulk(then, bufs)),
            otherwise: otherwise.as_ref().map(|o| Box::new(bulk(o, bufs))),
        },
        other => other.clone(),
    }
}

fn split_guarded(body: &Stmt) -> Option<(Vec<Expr>, &IntrinsicCall)> {
    match body {
        Stmt::Intrinsic(c) => Some((Vec::new(), c)),
        Stmt::IfThen { cond, then, otherwise: None } => match &**then {
            Stmt::Intrinsic(c) => Some((cond.conjuncts(), c)),
            _ => None,
        },
        _ => None,
    }
}

fn wrap(conds: Vec<Expr>, s: Stmt) -> Stmt {
    match Expr::all_of(conds) {
        Some(c) => Stmt::if_then(c, s),
        None => s,
    }
}

fn merge(v: VarId, extent: i64, body: &Stmt, bufs: &[Buffer]) -> Option<Stmt> {
    let (conds, call) = split_guarded(body)?;
    let (dir, global, go, dpu, mo, bytes) = match call {
        IntrinsicCall::HostToDpu { global, global_offset, dpu, mram_offset, bytes, .. } => {
            (Direction::H2D, *global, global_offset, dpu, mram_offset, *bytes)
        }
        IntrinsicCall::DpuToHost { global, global_offset, dpu, mram_offset, bytes, .. } => {
            (Direction::D2H, *global, global_offset, dpu, mram_offset, *bytes)
        }
        _ => return None,
    };
    let n = bytes / bufs[global as usize].dtype.bytes();
    let (ga, ma) = (Affine::from_expr(go)?, Affine::from_expr(mo)?);
    if ga.coef(v) != n || ma.coef(v) != n || dpu.uses_var(v) {
        return None;
    }
    let (dependent, keep): (Vec<Expr>, Vec<Expr>) = conds.into_iter().partition(|c| c.uses_var(v));
    // Host writes are exact: a partially valid span cannot be merged.
    if dir == Direction::D2H && !dependent.is_empty() {
        return None;
    }
    let zero = Expr::Int(0);
    let mut merged = call.map_exprs(&mut |e| simplify(&e.substitute(v, &zero)));
    match &mut merged {
        IntrinsicCall::HostToDpu { bytes, .. } | IntrinsicCall::DpuToHost { bytes, .. } => *bytes *= extent,
        _ => unreachable!(),
    }
    Some(wrap(keep, Stmt::Intrinsic(merged)))
}

/// Batch transfers that move the same MRAM region of every DPU in a rank
/// into one parallel group. DPUs whose guard is not provably uniform keep
/// individual transfers.
pub fn opt_bank_parallel(mut m: LoweredModule, rank_size: i64) -> LoweredModule {
    let (dv, grid) = (m.dpu_vars, m.dpu_grid);
    for section in [&mut m.setup, &mut m.h2d, &mut m.d2h] {
        let items = match &*section {
            Stmt::Seq(items) => items.clone(),
            other => vec![other.clone()],
        };
        let out: Vec<Stmt> = items
            .iter()
            .map(|s| {
                group_nest(s, dv, grid, rank_size.max(1)).unwrap_or_else(|| s.clone())
            })
            .collect();
        *section = Stmt::Seq(out);
    }
    m
}

/// DPU-dependent part, range of the rest, and whether the bound is strict.
type ShiftedBound = (Affine, (i64, i64), bool);

fn group_nest(s: &Stmt, dv: (Option<VarId>, Option<VarId>), grid: (i64, i64), rank: i64) -> Option<Stmt> {
    let mut cur = s;
    let mut peeled = 0;
    while let Stmt::For(l) = cur {
        if Some(l.var) == dv.0 || Some(l.var) == dv.1 {
            cur = &l.body;
            peeled += 1;
        } else {
            break;
        }
    }
    if peeled == 0 {
        return None;
    }
    let mut loops = Vec::new();
    while let Stmt::For(l) = cur {
        loops.push((l.var, l.extent.as_int()?));
        if l.min != Expr::Int(0) {
            return None;
        }
        cur = &l.body;
    }
    let (conds, call) = split_guarded(cur)?;
    let (direction, global, go, mram, mo, bytes) = match call {
        IntrinsicCall::HostToDpu { global, global_offset, mram, mram_offset, bytes, .. } => {
            (Direction::H2D, *global, global_offset, *mram, mram_offset, *bytes)
        }
        IntrinsicCall::DpuToHost { global, global_offset, mram, mram_offset, bytes, .. } => {
            (Direction::D2H, *global, global_offset, *mram, mram_offset, *bytes)
        }
        _ => return None,
    };
    let is_dpu = |v: VarId| Some(v) == dv.0 || Some(v) == dv.1;
    if mo.vars().into_iter().any(is_dpu) {
        return None;
    }
    let (dep, rest): (Vec<Expr>, Vec<Expr>) = conds.into_iter().partition(|c| c.vars().into_iter().any(is_dpu));
    let ranges: BTreeMap<VarId, (i64, i64)> = loops.iter().map(|&(v, e)| (v, (0, e - 1))).collect();
    let lookup = |v: VarId| ranges.get(&v).copied();

    // Affine conditions reduce to a DPU-dependent shift of a fixed range.
    let fast: Option<Vec<ShiftedBound>> = dep
        .iter()
        .map(|c| {
            let (a, b, strict) = match c {
                Expr::Lt(a, b) => (a, b, true),
                Expr::Le(a, b) => (a, b, false),
                _ => return None,
            };
            let d = Affine::from_expr(a)?.sub(&Affine::from_expr(b)?);
            let rest = d.restrict(|v| !is_dpu(v));
            if rest.terms.keys().any(|v| !ranges.contains_key(v)) {
                return None;
            }
            let (lo, hi) = rest.range(|v| ranges[&v]);
            Some((d.restrict(is_dpu), (lo + d.constant, hi + d.constant), strict))
        })
        .collect();
    let go_affine = Affine::from_expr(go);
    let at = |x: i64, y: i64| {
        move |v: VarId| {
            if Some(v) == dv.0 {
                x
            } else if Some(v) == dv.1 {
                y
            } else {
                0
            }
        }
    };

    let mut by_rank: BTreeMap<i64, Vec<GroupMember>> = BTreeMap::new();
    let mut single = Vec::new();
    for x in 0..grid.0 {
        for y in 0..grid.1 {
            let id = x * grid.1 + y;
            if let (Some(fast), Some(ga)) = (&fast, &go_affine) {
                let mut all = true;
                let mut none = false;
                for (dp, (lo, hi), strict) in fast {
                    let k = dp.eval(at(x, y));
                    let (lo, hi) = (lo + k, hi + k);
                    let (t, f) = if *strict { (hi < 0, lo >= 0) } else { (hi <= 0, lo > 0) };
                    none |= f;
                    all &= t;
                }
                if none {
                    continue;
                }
                if all {
                    let off = ga.restrict(|v| !is_dpu(v)).add(&Affine::constant(ga.constant + ga.restrict(is_dpu).eval(at(x, y))));
                    by_rank.entry(id / rank).or_default().push(GroupMember { dpu: id, global_offset: off.to_expr() });
                    continue;
                }
            }
            let bind = |e: &Expr| {
                let mut e = e.clone();
                if let Some(v) = dv.0 {
                    e = e.substitute(v, &Expr::Int(x));
                }
                if let Some(v) = dv.1 {
                    e = e.substitute(v, &Expr::Int(y));
                }
                simplify(&e)
            };
            let d: Vec<Expr> = dep.iter().map(&bind).collect();
            let verdicts: Vec<Option<bool>> = d.iter().map(|c| prove(c, &lookup)).collect();
            if verdicts.contains(&Some(false)) {
                continue;
            }
            if verdicts.iter().all(|v| *v == Some(true)) {
                by_rank.entry(id / rank).or_default().push(GroupMember { dpu: id, global_offset: bind(go) });
            } else {
                let mut c = call.map_exprs(&mut |e| bind(e));
                if let IntrinsicCall::HostToDpu { dpu, .. } | IntrinsicCall::DpuToHost { dpu, .. } = &mut c {
                    *dpu = Expr::Int(id);
                }
                let mut conds: Vec<Expr> = d.into_iter().filter(|c| prove(c, &lookup) != Some(true)).collect();
                conds.extend(rest.iter().cloned());
                single.push(nest(&loops, wrap(conds, Stmt::Intrinsic(c))));
            }
        }
    }
    let groups: Vec<Stmt> = by_rank
        .into_values()
        .map(|members| {
            Stmt::Intrinsic(IntrinsicCall::ParallelTransferGroup {
                direction,
                global,
                mram,
                mram_offset: mo.clone(),
                bytes,
                members,
            })
        })
        .collect();
    let mut out = Vec::new();
    if !groups.is_empty() {
        out.push(nest(&loops, wrap(rest.clone(), Stmt::Seq(groups))));
    }
    out.extend(single);
    Some(Stmt::Seq(out))
}

fn nest(loops: &[(VarId, i64)], body: Stmt) -> Stmt {
    loops.iter().rev().fold(body, |b, &(v, e)| Stmt::for_loop(v, Expr::Int(e), ForKind::Serial, b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grouping {
    Scalar,
    Bulk,
    /// Index of the parallel group within its section.
    BankParallel(usize),
}

/// One executed host transfer. Offsets are in bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransferDescriptor {
    pub direction: Direction,
    pub dpu: i64,
    pub global: BufId,
    pub global_offset: i64,
    pub mram_offset: i64,
    pub bytes: i64,
    pub grouping: Grouping,
}

struct Recorder<'a> {
    bufs: &'a [Buffer],
    out: Vec<TransferDescriptor>,
    groups: usize,
}

impl ExecHooks for Recorder<'_> {
    fn intrinsic(&mut self, env: &mut Env, call: &IntrinsicCall, c: &mut Counters) -> Result<(), EvalError> {
        let elem = |b: BufId| self.bufs[b as usize].dtype.bytes();
        match call {
            IntrinsicCall::HostToDpu { global, global_offset, dpu, mram_offset, bytes, .. }
            | IntrinsicCall::DpuToHost { global, global_offset, dpu, mram_offset, bytes, .. } => {
                let e = elem(*global);
                let direction =
                    if matches!(call, IntrinsicCall::HostToDpu { .. }) { Direction::H2D } else { Direction::D2H };
                self.out.push(TransferDescriptor {
                    direction,
                    dpu: env.eval_int(dpu, c)?,
                    global: *global,
                    global_offset: env.eval_int(global_offset, c)? * e,
                    mram_offset: env.eval_int(mram_offset, c)? * e,
                    bytes: *bytes,
                    grouping: if *bytes > e { Grouping::Bulk } else { Grouping::Scalar },
                });
            }
            IntrinsicCall::ParallelTransferGroup { direction, global, mram_offset, bytes, members, .. } => {
                let e = elem(*global);
                let mo = env.eval_int(mram_offset, c)? * e;
                for mbr in members {
                    self.out.push(TransferDescriptor {
                        direction: *direction,
                        dpu: mbr.dpu,
                        global: *global,
                        global_offset: env.eval_int(&mbr.global_offset, c)? * e,
                        mram_offset: mo,
                        bytes: *bytes,
                        grouping: Grouping::BankParallel(self.groups),
                    });
                }
                self.groups += 1;
            }
            _ => {}
        }
        Ok(())
    }
}

/// Enumerate every transfer the host sections perform, in execution order.
pub fn descriptors(m: &LoweredModule) -> Vec<TransferDescriptor> {
    let mut rec = Recorder { bufs: &m.buffers, out: Vec::new(), groups: 0 };
    let mut env = Env::new(m.var_names.len(), Vec::new());
    let mut c = Counters::default();
    for s in [&m.setup, &m.h2d, &m.d2h] {
        env.exec(s, &mut rec, &mut c).expect("transfer sections evaluate without memory");
    }
    rec.out
}

pub fn descriptors_csv(m: &LoweredModule) -> String {
    let mut out = String::from("direction,dpu,buffer,global_off,mram_off,bytes,group\n");
    for d in descriptors(m) {
        let group = match d.grouping {
            Grouping::Scalar => "scalar".to_string(),
            Grouping::Bulk => "bulk".to_string(),
            Grouping::BankParallel(g) => format!("bank{g}"),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            d.direction, d.dpu, m.buffers[d.global as usize].name, d.global_offset, d.mram_offset, d.bytes, group
        ));
    }
    out
}

/// Host-side element count needed per global buffer so that every
/// transfer stays in bounds, including slack read by merged transfers.
pub fn host_extents(m: &LoweredModule) -> BTreeMap<BufId, i64> {
    let mut ext: BTreeMap<BufId, i64> = BTreeMap::new();
    for b in &m.buffers {
        if b.scope == crate::ir::MemoryScope::HostGlobal {
            ext.insert(b.id, b.shape.iter().product());
        }
    }
    for d in descriptors(m) {
        let e = m.buffers[d.global as usize].dtype.bytes();
        let end = (d.global_offset + d.bytes) / e;
        let slot = ext.entry(d.global).or_insert(0);
        *slot = (*slot).max(end);
    }
    ext
}
