//! Tree-walking execution shared by the reference evaluator and the machine
//! simulator.

use super::{BufId, Expr, ForKind, IntrinsicCall, LoopProgram, MemoryScope, Scalar, ScalarType, Stmt};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("buffer `{0}` is not bound to an input tensor")]
    UnboundBuffer(String),
    #[error("input `{name}` has shape {got:?}/{got_dtype}, expected {want:?}/{want_dtype}")]
    ShapeMismatch { name: String, got: Vec<i64>, got_dtype: ScalarType, want: Vec<i64>, want_dtype: ScalarType },
    #[error("index {index} out of range for `{buf}` (length {len})")]
    OutOfRange { buf: String, index: i64, len: usize },
    #[error("integer overflow evaluating {0}")]
    Overflow(String),
    #[error("division by zero")]
    DivByZero,
    #[error("misaligned DMA on `{buf}`: offset {offset_bytes} B, size {bytes} B")]
    MisalignedDma { buf: String, offset_bytes: i64, bytes: i64 },
    #[error("WRAM overflow: {used} B live exceeds {limit} B")]
    WramOverflow { used: i64, limit: i64 },
    #[error("host-visible read of padding in `{buf}` at element {index}")]
    PaddingRead { buf: String, index: i64 },
    #[error("output `{buf}` element {index} was never written")]
    Unwritten { buf: String, index: usize },
    #[error("{0}")]
    Machine(String),
}

/// A dense tensor value bound to a program buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dtype: ScalarType,
    pub shape: Vec<i64>,
    pub data: Vec<Scalar>,
}

impl Tensor {
    pub fn from_i64(shape: Vec<i64>, dtype: ScalarType, data: Vec<i64>) -> Tensor {
        assert_eq!(shape.iter().product::<i64>() as usize, data.len());
        Tensor { dtype, shape, data: data.into_iter().map(Scalar::I).collect() }
    }

    pub fn from_f32(shape: Vec<i64>, data: Vec<f32>) -> Tensor {
        assert_eq!(shape.iter().product::<i64>() as usize, data.len());
        Tensor { dtype: ScalarType::Float32, shape, data: data.into_iter().map(Scalar::F).collect() }
    }

    pub fn zeros(shape: Vec<i64>, dtype: ScalarType) -> Tensor {
        let n = shape.iter().product::<i64>() as usize;
        Tensor { dtype, shape, data: vec![dtype.zero(); n] }
    }

    pub fn ints(&self) -> Vec<i64> {
        self.data.iter().map(|s| s.as_i64()).collect()
    }

    pub fn floats(&self) -> Vec<f32> {
        self.data.iter().map(|s| s.as_f32()).collect()
    }

    /// Exact for integer tensors, relative tolerance `rel` for floats.
    pub fn approx_eq(&self, other: &Tensor, rel: f32) -> bool {
        if self.shape != other.shape || self.data.len() != other.data.len() {
            return false;
        }
        self.data.iter().zip(&other.data).all(|(a, b)| match (a, b) {
            (Scalar::I(x), Scalar::I(y)) => x == y,
            _ => {
                let (x, y) = (a.as_f32(), b.as_f32());
                (x - y).abs() <= rel * x.abs().max(y.abs()).max(1.0)
            }
        })
    }
}

/// Dynamic event counts gathered during execution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub instrs: u64,
    pub branches: u64,
    pub dma_loads: u64,
    pub dma_stores: u64,
    pub dma_bytes: u64,
    pub mram_scalar: u64,
    pub innermost_iters: u64,
    pub loop_iters: u64,
}

impl Counters {
    pub fn dma_count(&self) -> u64 {
        self.dma_loads + self.dma_stores
    }

    pub fn add(&mut self, o: &Counters) {
        self.instrs += o.instrs;
        self.branches += o.branches;
        self.dma_loads += o.dma_loads;
        self.dma_stores += o.dma_stores;
        self.dma_bytes += o.dma_bytes;
        self.mram_scalar += o.mram_scalar;
        self.innermost_iters += o.innermost_iters;
        self.loop_iters += o.loop_iters;
    }

    pub fn diff(&self, earlier: &Counters) -> Counters {
        Counters {
            instrs: self.instrs - earlier.instrs,
            branches: self.branches - earlier.branches,
            dma_loads: self.dma_loads - earlier.dma_loads,
            dma_stores: self.dma_stores - earlier.dma_stores,
            dma_bytes: self.dma_bytes - earlier.dma_bytes,
            mram_scalar: self.mram_scalar - earlier.mram_scalar,
            innermost_iters: self.innermost_iters - earlier.innermost_iters,
            loop_iters: self.loop_iters - earlier.loop_iters,
        }
    }
}

/// Backing storage of one buffer. `defined` shadows `data`: an element is
/// undefined until something stores a value computed only from defined data.
#[derive(Clone, Debug)]
pub struct Mem {
    pub name: String,
    pub dtype: ScalarType,
    pub scope: MemoryScope,
    pub data: Vec<Scalar>,
    pub defined: Vec<bool>,
}

impl Mem {
    pub fn undefined(name: &str, dtype: ScalarType, scope: MemoryScope, len: usize) -> Mem {
        Mem { name: name.to_string(), dtype, scope, data: vec![dtype.zero(); len], defined: vec![false; len] }
    }

    pub fn from_tensor(name: &str, scope: MemoryScope, t: &Tensor) -> Mem {
        Mem {
            name: name.to_string(),
            dtype: t.dtype,
            scope,
            data: t.data.clone(),
            defined: vec![true; t.data.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn byte_len(&self) -> i64 {
        self.data.len() as i64 * self.dtype.bytes()
    }

    fn check(&self, index: i64) -> Result<usize, EvalError> {
        if index < 0 || index as usize >= self.data.len() {
            return Err(EvalError::OutOfRange { buf: self.name.clone(), index, len: self.data.len() });
        }
        Ok(index as usize)
    }
}

/// Callbacks for the parts of execution that depend on where code runs.
pub trait ExecHooks {
    fn intrinsic(&mut self, _env: &mut Env, call: &IntrinsicCall, _c: &mut Counters) -> Result<(), EvalError> {
        Err(EvalError::Machine(format!("intrinsic {call:?} not supported here")))
    }
    /// Called around each iteration of tasklet-bound and host-parallel loops.
    fn enter_iteration(&mut self, _kind: ForKind, _iter: i64, _c: &Counters) {}
    fn exit_iteration(&mut self, _kind: ForKind, _iter: i64, _c: &Counters) {}
    fn on_alloc(&mut self, _mem: &Mem) -> Result<(), EvalError> {
        Ok(())
    }
    fn on_free(&mut self, _mem: &Mem) {}
}

pub struct NoHooks;
impl ExecHooks for NoHooks {}

/// Variable and memory state of one executing program.
pub struct Env {
    pub vars: Vec<i64>,
    pub mem: Vec<Mem>,
    poisoned: bool,
}

type Fallible<T> = Result<T, Box<EvalError>>;

const I32_RANGE: std::ops::RangeInclusive<i64> = (i32::MIN as i64)..=(i32::MAX as i64);

impl Env {
    pub fn new(num_vars: usize, mem: Vec<Mem>) -> Env {
        Env { vars: vec![0; num_vars], mem, poisoned: false }
    }

    pub fn eval_int(&mut self, e: &Expr, c: &mut Counters) -> Result<i64, EvalError> {
        self.int(e, c).map_err(|b| *b)
    }

    pub fn eval(&mut self, e: &Expr, c: &mut Counters) -> Result<Scalar, EvalError> {
        self.ev(e, c).map_err(|b| *b)
    }

    pub fn exec(&mut self, s: &Stmt, h: &mut dyn ExecHooks, c: &mut Counters) -> Result<(), EvalError> {
        self.run(s, h, c).map_err(|b| *b)
    }

    fn int(&mut self, e: &Expr, c: &mut Counters) -> Fallible<i64> {
        Ok(self.ev(e, c)?.as_i64())
    }

    fn ev(&mut self, e: &Expr, c: &mut Counters) -> Fallible<Scalar> {
        use Scalar::{F, I};
        let arith = |c: &mut Counters| c.instrs += 1;
        Ok(match e {
            Expr::Int(v) => I(*v),
            Expr::Float(v) => F(*v),
            Expr::Var(v) => I(self.vars[*v as usize]),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) => {
                let (x, y) = (self.ev(a, c)?, self.ev(b, c)?);
                arith(c);
                match (x, y) {
                    (I(x), I(y)) => {
                        let r = match e {
                            Expr::Add(..) => x.checked_add(y),
                            Expr::Sub(..) => x.checked_sub(y),
                            _ => x.checked_mul(y),
                        };
                        I(r.ok_or_else(|| EvalError::Overflow(format!("{x} op {y}")))?)
                    }
                    _ => {
                        let (x, y) = (x.as_f32(), y.as_f32());
                        F(match e {
                            Expr::Add(..) => x + y,
                            Expr::Sub(..) => x - y,
                            _ => x * y,
                        })
                    }
                }
            }
            Expr::FloorDiv(a, b) | Expr::FloorMod(a, b) => {
                let (x, y) = (self.ev(a, c)?, self.ev(b, c)?);
                arith(c);
                match (x, y) {
                    (I(_), I(0)) => return Err(Box::new(EvalError::DivByZero)),
                    (I(x), I(y)) => I(if matches!(e, Expr::FloorDiv(..)) { x.div_euclid(y) } else { x.rem_euclid(y) }),
                    _ => {
                        let (x, y) = (x.as_f32(), y.as_f32());
                        F(if matches!(e, Expr::FloorDiv(..)) { (x / y).floor() } else { x - (x / y).floor() * y })
                    }
                }
            }
            Expr::Min(a, b) | Expr::Max(a, b) => {
                let (x, y) = (self.ev(a, c)?, self.ev(b, c)?);
                arith(c);
                let is_min = matches!(e, Expr::Min(..));
                match (x, y) {
                    (I(x), I(y)) => I(if is_min { x.min(y) } else { x.max(y) }),
                    _ => {
                        let (x, y) = (x.as_f32(), y.as_f32());
                        F(if is_min { x.min(y) } else { x.max(y) })
                    }
                }
            }
            Expr::Lt(a, b) | Expr::Le(a, b) | Expr::Eq(a, b) => {
                let (x, y) = (self.ev(a, c)?, self.ev(b, c)?);
                arith(c);
                let r = match (x, y) {
                    (I(x), I(y)) => match e {
                        Expr::Lt(..) => x < y,
                        Expr::Le(..) => x <= y,
                        _ => x == y,
                    },
                    _ => {
                        let (x, y) = (x.as_f32(), y.as_f32());
                        match e {
                            Expr::Lt(..) => x < y,
                            Expr::Le(..) => x <= y,
                            _ => x == y,
                        }
                    }
                };
                I(r as i64)
            }
            Expr::And(a, b) => {
                let x = self.ev(a, c)?;
                arith(c);
                if !x.truthy() {
                    I(0)
                } else {
                    I(self.ev(b, c)?.truthy() as i64)
                }
            }
            Expr::Load(buf, idx) => {
                let i = self.int(idx, c)?;
                c.instrs += 1;
                let m = &self.mem[*buf as usize];
                let i = m.check(i)?;
                if m.scope == MemoryScope::Mram {
                    c.mram_scalar += 1;
                }
                if !m.defined[i] {
                    self.poisoned = true;
                }
                m.data[i]
            }
            Expr::Select(cond, t, f) => {
                let x = self.ev(cond, c)?;
                arith(c);
                if x.truthy() {
                    self.ev(t, c)?
                } else {
                    self.ev(f, c)?
                }
            }
        })
    }

    fn store(&mut self, buf: BufId, index: i64, v: Scalar, defined: bool) -> Fallible<()> {
        let m = &mut self.mem[buf as usize];
        let i = m.check(index)?;
        let v = match m.dtype {
            ScalarType::Float32 => Scalar::F(v.as_f32()),
            ScalarType::Int32 => {
                let x = v.as_i64();
                if !I32_RANGE.contains(&x) {
                    return Err(Box::new(EvalError::Overflow(format!("store of {x} into int32 `{}`", m.name))));
                }
                Scalar::I(x)
            }
            ScalarType::Int64 => Scalar::I(v.as_i64()),
        };
        m.data[i] = v;
        m.defined[i] = defined;
        Ok(())
    }

    fn dma(&mut self, call: &IntrinsicCall, c: &mut Counters) -> Fallible<()> {
        let (mram, mram_offset, wram, wram_offset, bytes, load) = match call {
            IntrinsicCall::DmaLoad { mram, mram_offset, wram, wram_offset, bytes } => {
                (*mram, mram_offset, *wram, wram_offset, *bytes, true)
            }
            IntrinsicCall::DmaStore { mram, mram_offset, wram, wram_offset, bytes } => {
                (*mram, mram_offset, *wram, wram_offset, *bytes, false)
            }
            _ => unreachable!(),
        };
        let mo = self.int(mram_offset, c)?;
        let wo = self.int(wram_offset, c)?;
        c.instrs += 2;
        if load {
            c.dma_loads += 1;
        } else {
            c.dma_stores += 1;
        }
        c.dma_bytes += bytes as u64;
        let elem = self.mem[mram as usize].dtype.bytes();
        for (buf, off) in [(mram, mo), (wram, wo)] {
            if bytes % 8 != 0 || (off * elem) % 8 != 0 {
                return Err(Box::new(EvalError::MisalignedDma {
                    buf: self.mem[buf as usize].name.clone(),
                    offset_bytes: off * elem,
                    bytes,
                }));
            }
        }
        let n = bytes / elem;
        let (src, so, dst, dof) = if load { (mram, mo, wram, wo) } else { (wram, wo, mram, mo) };
        self.mem[src as usize].check(so)?;
        self.mem[src as usize].check(so + n - 1)?;
        self.mem[dst as usize].check(dof)?;
        self.mem[dst as usize].check(dof + n - 1)?;
        for k in 0..n {
            let (v, d) = {
                let s = &self.mem[src as usize];
                (s.data[(so + k) as usize], s.defined[(so + k) as usize])
            };
            let dm = &mut self.mem[dst as usize];
            dm.data[(dof + k) as usize] = v;
            dm.defined[(dof + k) as usize] = d;
        }
        Ok(())
    }

    fn run(&mut self, s: &Stmt, h: &mut dyn ExecHooks, c: &mut Counters) -> Fallible<()> {
        match s {
            Stmt::For(l) => {
                let min = self.int(&l.min, c)?;
                let ext = self.int(&l.extent, c)?;
                let innermost = !l.body.contains_loop() && l.body.has_compute_store();
                let bound = matches!(l.kind, ForKind::BoundTasklet | ForKind::HostParallel);
                for it in 0..ext.max(0) {
                    self.vars[l.var as usize] = min + it;
                    c.instrs += 2;
                    c.loop_iters += 1;
                    if innermost {
                        c.innermost_iters += 1;
                    }
                    if bound {
                        h.enter_iteration(l.kind, it, c);
                    }
                    self.run(&l.body, h, c)?;
                    if bound {
                        h.exit_iteration(l.kind, it, c);
                    }
                }
            }
            Stmt::IfThen { cond, then, otherwise } => {
                let v = self.ev(cond, c)?;
                c.instrs += 1;
                c.branches += 1;
                if v.truthy() {
                    self.run(then, h, c)?;
                } else if let Some(o) = otherwise {
                    self.run(o, h, c)?;
                }
            }
            Stmt::Store { buf, index, value } => {
                let i = self.int(index, c)?;
                self.poisoned = false;
                let v = self.ev(value, c)?;
                let defined = !self.poisoned;
                c.instrs += 1;
                if self.mem[*buf as usize].scope == MemoryScope::Mram {
                    c.mram_scalar += 1;
                }
                self.store(*buf, i, v, defined)?;
            }
            Stmt::Allocate { buf, body } => {
                let m = &mut self.mem[*buf as usize];
                m.defined.iter_mut().for_each(|d| *d = false);
                h.on_alloc(&self.mem[*buf as usize])?;
                let r = self.run(body, h, c);
                h.on_free(&self.mem[*buf as usize]);
                r?;
            }
            Stmt::Seq(items) => {
                for i in items {
                    self.run(i, h, c)?;
                }
            }
            Stmt::Intrinsic(call) if call.is_dma() => self.dma(call, c)?,
            Stmt::Intrinsic(call) => h.intrinsic(self, call, c)?,
            Stmt::Evaluate(e) => {
                self.ev(e, c)?;
            }
        }
        Ok(())
    }
}

/// Naive sequential interpretation of a program. Inputs are matched to
/// buffers by name; every output element must end up defined.
pub fn evaluate_reference(
    prog: &LoopProgram,
    inputs: &BTreeMap<String, Tensor>,
) -> Result<BTreeMap<String, Tensor>, EvalError> {
    let mut mem = Vec::with_capacity(prog.buffers.len());
    for b in &prog.buffers {
        if prog.inputs.contains(&b.id) {
            let t = inputs.get(&b.name).ok_or_else(|| EvalError::UnboundBuffer(b.name.clone()))?;
            if t.shape != b.shape || t.dtype != b.dtype {
                return Err(EvalError::ShapeMismatch {
                    name: b.name.clone(),
                    got: t.shape.clone(),
                    got_dtype: t.dtype,
                    want: b.shape.clone(),
                    want_dtype: b.dtype,
                });
            }
            mem.push(Mem::from_tensor(&b.name, b.scope, t));
        } else {
            mem.push(Mem::undefined(&b.name, b.dtype, b.scope, b.numel() as usize));
        }
    }
    let mut env = Env::new(prog.var_names.len(), mem);
    let mut c = Counters::default();
    env.exec(&prog.body, &mut NoHooks, &mut c)?;
    let mut out = BTreeMap::new();
    for &o in &prog.outputs {
        let b = prog.buffer(o);
        let m = &env.mem[o as usize];
        if let Some(i) = m.defined.iter().position(|d| !d) {
            return Err(EvalError::Unwritten { buf: b.name.clone(), index: i });
        }
        out.insert(b.name.clone(), Tensor { dtype: b.dtype, shape: b.shape.clone(), data: m.data.clone() });
    }
    Ok(out)
}
