//! Loop-based tensor IR.
//!
//! Programs are trees of [`Stmt`] over flat-indexed [`Buffer`]s. Every
//! transformation in the crate produces a new tree; nothing here is mutated
//! in place after construction.

mod affine;
mod eval;
mod print;
pub(crate) mod workload;

pub use affine::{prove, simplify, Affine};
pub use eval::{evaluate_reference, Counters, Env, EvalError, ExecHooks, Mem, NoHooks, Tensor};
pub use print::{print_expr, print_program, print_stmt};
pub use workload::{build_workload, random_inputs, Access, Axis, BlockDef, WorkloadError, WorkloadKind, WorkloadSpec};

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;

/// Element type of a buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalarType {
    Int32,
    Int64,
    Float32,
}

impl ScalarType {
    pub fn bytes(self) -> i64 {
        match self {
            ScalarType::Int32 | ScalarType::Float32 => 4,
            ScalarType::Int64 => 8,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, ScalarType::Float32)
    }

    pub fn zero(self) -> Scalar {
        if self.is_float() {
            Scalar::F(0.0)
        } else {
            Scalar::I(0)
        }
    }
}

impl fmt::Display for ScalarType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScalarType::Int32 => "int32",
            ScalarType::Int64 => "int64",
            ScalarType::Float32 => "float32",
        })
    }
}

impl std::str::FromStr for ScalarType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "int32" | "i32" => Ok(ScalarType::Int32),
            "int64" | "i64" => Ok(ScalarType::Int64),
            "float32" | "f32" => Ok(ScalarType::Float32),
            other => Err(format!("unknown dtype `{other}`")),
        }
    }
}

/// A runtime scalar value. Integers are held widened to i64 and range-checked
/// against the destination type on store.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scalar {
    I(i64),
    F(f32),
}

impl Scalar {
    pub fn as_i64(self) -> i64 {
        match self {
            Scalar::I(v) => v,
            Scalar::F(v) => v as i64,
        }
    }

    pub fn as_f32(self) -> f32 {
        match self {
            Scalar::I(v) => v as f32,
            Scalar::F(v) => v,
        }
    }

    pub fn truthy(self) -> bool {
        match self {
            Scalar::I(v) => v != 0,
            Scalar::F(v) => v != 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MemoryScope {
    HostGlobal,
    Mram,
    Wram,
}

impl fmt::Display for MemoryScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MemoryScope::HostGlobal => "global",
            MemoryScope::Mram => "mram",
            MemoryScope::Wram => "wram",
        })
    }
}

pub type BufId = u32;
pub type VarId = u32;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Buffer {
    pub id: BufId,
    pub name: String,
    pub dtype: ScalarType,
    pub shape: Vec<i64>,
    pub scope: MemoryScope,
}

impl Buffer {
    pub fn numel(&self) -> i64 {
        self.shape.iter().product()
    }

    pub fn bytes(&self) -> i64 {
        self.numel() * self.dtype.bytes()
    }

    /// Row-major strides in elements.
    pub fn strides(&self) -> Vec<i64> {
        row_major_strides(&self.shape)
    }
}

pub fn row_major_strides(shape: &[i64]) -> Vec<i64> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Int(i64),
    Float(f32),
    Var(VarId),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    FloorDiv(Box<Expr>, Box<Expr>),
    FloorMod(Box<Expr>, Box<Expr>),
    Min(Box<Expr>, Box<Expr>),
    Max(Box<Expr>, Box<Expr>),
    Lt(Box<Expr>, Box<Expr>),
    Le(Box<Expr>, Box<Expr>),
    Eq(Box<Expr>, Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Load(BufId, Box<Expr>),
    Select(Box<Expr>, Box<Expr>, Box<Expr>),
}

macro_rules! binop_ctor {
    ($($name:ident => $variant:ident),* $(,)?) => {
        $(#[allow(clippy::should_implement_trait)]
        pub fn $name(a: Expr, b: Expr) -> Expr {
            Expr::$variant(Box::new(a), Box::new(b))
        })*
    };
}

impl Expr {
    binop_ctor! {
        add => Add, sub => Sub, mul => Mul, floordiv => FloorDiv, floormod => FloorMod,
        min => Min, max => Max, lt => Lt, le => Le, eq => Eq, and => And,
    }

    pub fn load(buf: BufId, index: Expr) -> Expr {
        Expr::Load(buf, Box::new(index))
    }

    pub fn select(c: Expr, t: Expr, e: Expr) -> Expr {
        Expr::Select(Box::new(c), Box::new(t), Box::new(e))
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Expr::Int(v) => Some(*v),
            _ => None,
        }
    }

    /// Visit every sub-expression, pre-order.
    pub fn visit(&self, f: &mut impl FnMut(&Expr)) {
        f(self);
        match self {
            Expr::Int(_) | Expr::Float(_) | Expr::Var(_) => {}
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::FloorDiv(a, b)
            | Expr::FloorMod(a, b)
            | Expr::Min(a, b)
            | Expr::Max(a, b)
            | Expr::Lt(a, b)
            | Expr::Le(a, b)
            | Expr::Eq(a, b)
            | Expr::And(a, b) => {
                a.visit(f);
                b.visit(f);
            }
            Expr::Load(_, i) => i.visit(f),
            Expr::Select(c, t, e) => {
                c.visit(f);
                t.visit(f);
                e.visit(f);
            }
        }
    }

    /// Rebuild bottom-up, letting `f` replace any node after its children.
    pub fn map(&self, f: &mut impl FnMut(Expr) -> Expr) -> Expr {
        let rebuilt = match self {
            Expr::Int(_) | Expr::Float(_) | Expr::Var(_) => self.clone(),
            Expr::Add(a, b) => Expr::add(a.map(f), b.map(f)),
            Expr::Sub(a, b) => Expr::sub(a.map(f), b.map(f)),
            Expr::Mul(a, b) => Expr::mul(a.map(f), b.map(f)),
            Expr::FloorDiv(a, b) => Expr::floordiv(a.map(f), b.map(f)),
            Expr::FloorMod(a, b) => Expr::floormod(a.map(f), b.map(f)),
            Expr::Min(a, b) => Expr::min(a.map(f), b.map(f)),
            Expr::Max(a, b) => Expr::max(a.map(f), b.map(f)),
            Expr::Lt(a, b) => Expr::lt(a.map(f), b.map(f)),
            Expr::Le(a, b) => Expr::le(a.map(f), b.map(f)),
            Expr::Eq(a, b) => Expr::eq(a.map(f), b.map(f)),
            Expr::And(a, b) => Expr::and(a.map(f), b.map(f)),
            Expr::Load(buf, i) => Expr::load(*buf, i.map(f)),
            Expr::Select(c, t, e) => Expr::select(c.map(f), t.map(f), e.map(f)),
        };
        f(rebuilt)
    }

    pub fn substitute(&self, var: VarId, with: &Expr) -> Expr {
        self.map(&mut |e| match e {
            Expr::Var(v) if v == var => with.clone(),
            other => other,
        })
    }

    pub fn vars(&self) -> BTreeSet<VarId> {
        let mut out = BTreeSet::new();
        self.visit(&mut |e| {
            if let Expr::Var(v) = e {
                out.insert(*v);
            }
        });
        out
    }

    pub fn uses_var(&self, var: VarId) -> bool {
        let mut found = false;
        self.visit(&mut |e| {
            if matches!(e, Expr::Var(v) if *v == var) {
                found = true;
            }
        });
        found
    }

    pub fn loads(&self) -> Vec<BufId> {
        let mut out = Vec::new();
        self.visit(&mut |e| {
            if let Expr::Load(b, _) = e {
                out.push(*b);
            }
        });
        out
    }

    /// Split a chain of `And` into its conjuncts.
    pub fn conjuncts(&self) -> Vec<Expr> {
        match self {
            Expr::And(a, b) => {
                let mut v = a.conjuncts();
                v.extend(b.conjuncts());
                v
            }
            other => vec![other.clone()],
        }
    }

    pub fn all_of(mut conds: Vec<Expr>) -> Option<Expr> {
        if conds.is_empty() {
            return None;
        }
        let first = conds.remove(0);
        Some(conds.into_iter().fold(first, Expr::and))
    }

    pub fn node_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_| n += 1);
        n
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ForKind {
    Serial,
    Unrolled,
    HostParallel,
    BoundDpuX,
    BoundDpuY,
    BoundTasklet,
}

impl ForKind {
    pub fn is_dpu(self) -> bool {
        matches!(self, ForKind::BoundDpuX | ForKind::BoundDpuY)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    H2D,
    D2H,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::H2D => "H2D",
            Direction::D2H => "D2H",
        })
    }
}

/// One member of a bank-parallel transfer group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupMember {
    pub dpu: i64,
    pub global_offset: Expr,
}

/// Offsets are in elements of the respective buffer; `bytes` is the transfer size.
#[derive(Clone, Debug, PartialEq)]
pub enum IntrinsicCall {
    DmaLoad {
        mram: BufId,
        mram_offset: Expr,
        wram: BufId,
        wram_offset: Expr,
        bytes: i64,
    },
    DmaStore {
        mram: BufId,
        mram_offset: Expr,
        wram: BufId,
        wram_offset: Expr,
        bytes: i64,
    },
    HostToDpu {
        global: BufId,
        global_offset: Expr,
        dpu: Expr,
        mram: BufId,
        mram_offset: Expr,
        bytes: i64,
    },
    DpuToHost {
        global: BufId,
        global_offset: Expr,
        dpu: Expr,
        mram: BufId,
        mram_offset: Expr,
        bytes: i64,
    },
    ParallelTransferGroup {
        direction: Direction,
        global: BufId,
        mram: BufId,
        mram_offset: Expr,
        bytes: i64,
        members: Vec<GroupMember>,
    },
    /// Marks the point where the host hands control to all DPUs.
    LaunchKernel,
}

impl IntrinsicCall {
    pub fn is_dma(&self) -> bool {
        matches!(self, IntrinsicCall::DmaLoad { .. } | IntrinsicCall::DmaStore { .. })
    }

    pub fn exprs(&self) -> Vec<&Expr> {
        match self {
            IntrinsicCall::DmaLoad { mram_offset, wram_offset, .. }
            | IntrinsicCall::DmaStore { mram_offset, wram_offset, .. } => vec![mram_offset, wram_offset],
            IntrinsicCall::HostToDpu { global_offset, dpu, mram_offset, .. }
            | IntrinsicCall::DpuToHost { global_offset, dpu, mram_offset, .. } => {
                vec![global_offset, dpu, mram_offset]
            }
            IntrinsicCall::ParallelTransferGroup { mram_offset, members, .. } => {
                let mut v = vec![mram_offset];
                v.extend(members.iter().map(|m| &m.global_offset));
                v
            }
            IntrinsicCall::LaunchKernel => vec![],
        }
    }

    pub fn map_exprs(&self, f: &mut impl FnMut(&Expr) -> Expr) -> IntrinsicCall {
        let mut c = self.clone();
        match &mut c {
            IntrinsicCall::DmaLoad { mram_offset, wram_offset, .. }
            | IntrinsicCall::DmaStore { mram_offset, wram_offset, .. } => {
                *mram_offset = f(mram_offset);
                *wram_offset = f(wram_offset);
            }
            IntrinsicCall::HostToDpu { global_offset, dpu, mram_offset, .. }
            | IntrinsicCall::DpuToHost { global_offset, dpu, mram_offset, .. } => {
                *global_offset = f(global_offset);
                *dpu = f(dpu);
                *mram_offset = f(mram_offset);
            }
            IntrinsicCall::ParallelTransferGroup { mram_offset, members, .. } => {
                *mram_offset = f(mram_offset);
                for m in members.iter_mut() {
                    m.global_offset = f(&m.global_offset);
                }
            }
            IntrinsicCall::LaunchKernel => {}
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct For {
    pub var: VarId,
    pub min: Expr,
    pub extent: Expr,
    pub kind: ForKind,
    pub body: Stmt,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Stmt {
    For(Box<For>),
    IfThen {
        cond: Expr,
        then: Box<Stmt>,
        otherwise: Option<Box<Stmt>>,
    },
    Store {
        buf: BufId,
        index: Expr,
        value: Expr,
    },
    Allocate {
        buf: BufId,
        body: Box<Stmt>,
    },
    Seq(Vec<Stmt>),
    Intrinsic(IntrinsicCall),
    Evaluate(Expr),
}

impl Stmt {
    pub fn for_loop(var: VarId, extent: Expr, kind: ForKind, body: Stmt) -> Stmt {
        Stmt::For(Box::new(For { var, min: Expr::Int(0), extent, kind, body }))
    }

    pub fn if_then(cond: Expr, then: Stmt) -> Stmt {
        Stmt::IfThen { cond, then: Box::new(then), otherwise: None }
    }

    pub fn allocate(buf: BufId, body: Stmt) -> Stmt {
        Stmt::Allocate { buf, body: Box::new(body) }
    }

    /// Build a sequence, flattening nested sequences and dropping empty ones.
    pub fn seq(items: Vec<Stmt>) -> Stmt {
        let mut flat = Vec::with_capacity(items.len());
        for s in items {
            match s {
                Stmt::Seq(inner) => flat.extend(inner),
                other => flat.push(other),
            }
        }
        if flat.len() == 1 {
            flat.pop().unwrap()
        } else {
            Stmt::Seq(flat)
        }
    }

    pub fn empty() -> Stmt {
        Stmt::Seq(Vec::new())
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, Stmt::Seq(v) if v.is_empty())
    }

    pub fn visit(&self, f: &mut impl FnMut(&Stmt)) {
        f(self);
        match self {
            Stmt::For(l) => l.body.visit(f),
            Stmt::IfThen { then, otherwise, .. } => {
                then.visit(f);
                if let Some(o) = otherwise {
                    o.visit(f);
                }
            }
            Stmt::Allocate { body, .. } => body.visit(f),
            Stmt::Seq(items) => items.iter().for_each(|s| s.visit(f)),
            Stmt::Store { .. } | Stmt::Intrinsic(_) | Stmt::Evaluate(_) => {}
        }
    }

    /// Visit every expression appearing anywhere in the tree.
    pub fn visit_exprs(&self, f: &mut impl FnMut(&Expr)) {
        self.visit(&mut |s| match s {
            Stmt::For(l) => {
                l.min.visit(f);
                l.extent.visit(f);
            }
            Stmt::IfThen { cond, .. } => cond.visit(f),
            Stmt::Store { index, value, .. } => {
                index.visit(f);
                value.visit(f);
            }
            Stmt::Intrinsic(c) => c.exprs().into_iter().for_each(|e| e.visit(f)),
            Stmt::Evaluate(e) => e.visit(f),
            Stmt::Allocate { .. } | Stmt::Seq(_) => {}
        });
    }

    /// Whether the tree stores an arithmetic result, as opposed to a plain
    /// copy or constant.
    pub fn has_compute_store(&self) -> bool {
        let mut found = false;
        self.visit(&mut |s| {
            if let Stmt::Store { value, .. } = s {
                if !matches!(value, Expr::Int(_) | Expr::Float(_) | Expr::Var(_) | Expr::Load(..)) {
                    found = true;
                }
            }
        });
        found
    }

    pub fn contains_loop(&self) -> bool {
        let mut found = false;
        self.visit(&mut |s| {
            if matches!(s, Stmt::For(_)) {
                found = true;
            }
        });
        found
    }

    /// Rewrite every expression in the tree with `f`.
    pub fn map_exprs(&self, f: &mut impl FnMut(&Expr) -> Expr) -> Stmt {
        match self {
            Stmt::For(l) => Stmt::For(Box::new(For {
                var: l.var,
                min: f(&l.min),
                extent: f(&l.extent),
                kind: l.kind,
                body: l.body.map_exprs(f),
            })),
            Stmt::IfThen { cond, then, otherwise } => Stmt::IfThen {
                cond: f(cond),
                then: Box::new(then.map_exprs(f)),
                otherwise: otherwise.as_ref().map(|o| Box::new(o.map_exprs(f))),
            },
            Stmt::Store { buf, index, value } => Stmt::Store { buf: *buf, index: f(index), value: f(value) },
            Stmt::Allocate { buf, body } => Stmt::allocate(*buf, body.map_exprs(f)),
            Stmt::Seq(items) => Stmt::Seq(items.iter().map(|s| s.map_exprs(f)).collect()),
            Stmt::Intrinsic(c) => Stmt::Intrinsic(c.map_exprs(f)),
            Stmt::Evaluate(e) => Stmt::Evaluate(f(e)),
        }
    }

    pub fn substitute(&self, var: VarId, with: &Expr) -> Stmt {
        self.map_exprs(&mut |e| simplify(&e.substitute(var, with)))
    }

    pub fn node_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_| n += 1);
        self.visit_exprs(&mut |_| n += 1);
        n
    }
}

/// A complete program: buffer table, loop-variable names and a body.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopProgram {
    pub name: String,
    pub buffers: Vec<Buffer>,
    pub var_names: Vec<String>,
    pub inputs: Vec<BufId>,
    pub outputs: Vec<BufId>,
    pub body: Stmt,
    /// The compute definition the program was generated from, when known.
    pub block: Option<BlockDef>,
}

impl LoopProgram {
    pub fn buffer(&self, id: BufId) -> &Buffer {
        &self.buffers[id as usize]
    }

    pub fn buffer_by_name(&self, name: &str) -> Option<&Buffer> {
        self.buffers.iter().find(|b| b.name == name)
    }

    pub fn var_name(&self, v: VarId) -> &str {
        self.var_names.get(v as usize).map(String::as_str).unwrap_or("?")
    }

    /// Stable content hash of the printed program.
    pub fn structural_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let text = print_program(self);
        hex::encode(&Sha256::digest(text.as_bytes())[..16])
    }
}
