use super::{BlockState, CacheStage, State};
use crate::ir::workload::{flat_index, instantiate_value};
use crate::ir::{Affine, BufId, Buffer, Expr, ForKind, LoopProgram, Stmt, VarId};
use std::collections::{BTreeMap, BTreeSet};

/// Maps an access at global coordinates to a concrete buffer and flat index.
pub(crate) trait Backing {
    fn access(&self, buf: BufId, dims: &[Affine]) -> (BufId, Expr);
    /// Whether accumulator initialisation into a backing buffer must be
    /// guarded (unpadded storage).
    fn guard_init(&self) -> bool;
}

pub(crate) struct RefBacking {
    pub shapes: Vec<Vec<i64>>,
}

impl RefBacking {
    pub fn new(buffers: &[Buffer]) -> Self {
        RefBacking { shapes: buffers.iter().map(|b| b.shape.clone()).collect() }
    }
}

impl Backing for RefBacking {
    fn access(&self, buf: BufId, dims: &[Affine]) -> (BufId, Expr) {
        (buf, flat_index(dims, &self.shapes[buf as usize]).to_expr())
    }
    fn guard_init(&self) -> bool {
        true
    }
}

/// Region of a buffer staged by a cache at a given loop depth.
#[derive(Clone, Debug)]
pub(crate) struct CacheGeometry {
    /// Per-dimension part of the access that varies inside the location.
    pub inner: Vec<Affine>,
    /// Per-dimension base, fixed at the location.
    pub outer: Vec<Affine>,
    /// Logical extent of the staged region per dimension.
    pub ext: Vec<i64>,
    /// Allocated shape; the last dimension is padded to 8 bytes.
    pub shape: Vec<i64>,
}

pub(crate) fn pad_last_dim(mut shape: Vec<i64>, elem_bytes: i64) -> Vec<i64> {
    let unit = (8 / elem_bytes).max(1);
    if let Some(last) = shape.last_mut() {
        *last = (*last + unit - 1) / unit * unit;
    }
    shape
}

pub(crate) fn cache_depth(st: &State, b: usize, c: &CacheStage) -> usize {
    match c.at {
        None => 0,
        Some(h) => st.blocks[b].loops.iter().position(|x| *x == h).expect("cache location in block") + 1,
    }
}

pub(crate) fn cache_dims<'a>(blk: &'a BlockState, c: &CacheStage) -> &'a [Affine] {
    if c.write {
        &blk.output.dims
    } else {
        &blk.reads.iter().find(|r| r.buf == c.buf).expect("cached read").dims
    }
}

pub(crate) fn cache_geometry(st: &State, b: usize, c: &CacheStage) -> CacheGeometry {
    let blk = &st.blocks[b];
    let depth = cache_depth(st, b, c);
    let inner_vars: BTreeSet<VarId> = blk.loops[depth..].iter().map(|h| st.var(*h)).collect();
    let dims = cache_dims(blk, c);
    let inner: Vec<Affine> = dims.iter().map(|d| d.restrict(|v| inner_vars.contains(&v))).collect();
    let outer: Vec<Affine> = dims.iter().zip(&inner).map(|(d, i)| d.sub(i)).collect();
    let ext: Vec<i64> = inner.iter().map(|a| a.range(|v| st.var_range(v)).1 + 1).collect();
    let elem = st.buffers[c.buf as usize].dtype.bytes();
    CacheGeometry { inner, outer, shape: pad_last_dim(ext.clone(), elem), ext }
}

struct Ctx<'a> {
    st: &'a State,
    b: usize,
    backing: &'a dyn Backing,
    vars: &'a mut Vec<String>,
    geoms: BTreeMap<BufId, CacheGeometry>,
}

impl Ctx<'_> {
    fn fresh(&mut self, name: String) -> VarId {
        self.vars.push(name);
        (self.vars.len() - 1) as VarId
    }

    fn blk(&self) -> &BlockState {
        &self.st.blocks[self.b]
    }

    fn cache_for(&self, buf: BufId) -> Option<&CacheStage> {
        self.blk().caches.iter().find(|c| c.buf == buf)
    }

    /// Access `buf` at `dims`, through its cache when one exists. `inner_of`
    /// gives the cache-relative index for the same point.
    fn access(&self, buf: BufId, dims: &[Affine], inner: Option<&[Affine]>) -> (BufId, Expr) {
        match (self.cache_for(buf), inner) {
            (Some(c), Some(inner)) => {
                let g = &self.geoms[&c.buf];
                (c.wram, flat_index(inner, &g.shape).to_expr())
            }
            _ => self.backing.access(buf, dims),
        }
    }

    /// Copy loops between a cache and its backing buffer.
    fn copy_nest(&mut self, c: &CacheStage) -> Stmt {
        let g = self.geoms[&c.buf].clone();
        let wram_name = self.st.buffers[c.wram as usize].name.clone();
        let shape = self.st.buffers[c.buf as usize].shape.clone();
        let mut loops = Vec::new();
        let mut offs = Vec::new();
        for (d, &e) in g.ext.iter().enumerate() {
            if e > 1 {
                let v = self.fresh(format!("{wram_name}_{d}"));
                loops.push((v, e));
                offs.push(Affine::var(v));
            } else {
                offs.push(Affine::default());
            }
        }
        let coords: Vec<Affine> = g.outer.iter().zip(&offs).map(|(o, v)| o.add(v)).collect();
        let mut conds = Vec::new();
        for (d, c_d) in coords.iter().enumerate() {
            let max = g.outer[d].range(|v| self.st.var_range(v)).1 + g.ext[d] - 1;
            if max >= shape[d] {
                conds.push(Expr::lt(c_d.to_expr(), Expr::Int(shape[d])));
            }
        }
        let widx = flat_index(&offs, &g.shape).to_expr();
        let (xb, xidx) = self.backing.access(c.buf, &coords);
        let mut body = if c.write {
            Stmt::Store { buf: xb, index: xidx, value: Expr::load(c.wram, widx) }
        } else {
            Stmt::Store { buf: c.wram, index: widx, value: Expr::load(xb, xidx) }
        };
        if let Some(cond) = Expr::all_of(conds) {
            body = Stmt::if_then(cond, body);
        }
        for (v, e) in loops.into_iter().rev() {
            body = Stmt::for_loop(v, Expr::Int(e), ForKind::Serial, body);
        }
        body
    }

    fn out_target(&self, dims: &[Affine], subst: &dyn Fn(&Affine) -> Affine) -> (BufId, Expr) {
        let blk = self.blk();
        let out = blk.output.buf;
        let inner = self.cache_for(out).map(|c| {
            let g = &self.geoms[&c.buf];
            g.inner.iter().map(subst).collect::<Vec<_>>()
        });
        let dims: Vec<Affine> = dims.iter().map(subst).collect();
        self.access(out, &dims, inner.as_deref())
    }

    fn compute(&self) -> Stmt {
        let blk = self.blk();
        let id = |a: &Affine| a.clone();
        let (tb, tidx) = self.out_target(&blk.output.dims, &id);
        let value = instantiate_value(&blk.value, &|buf| {
            let r = blk.reads.iter().find(|r| r.buf == buf).expect("read access");
            let inner = self.cache_for(buf).map(|c| self.geoms[&c.buf].inner.clone());
            self.access(buf, &r.dims, inner.as_deref())
        });
        let value = if blk.reduce.is_empty() { value } else { Expr::add(Expr::load(tb, tidx.clone()), value) };
        let store = Stmt::Store { buf: tb, index: tidx, value };
        match Expr::all_of(blk.guards.iter().map(|g| g.to_expr()).collect()) {
            Some(cond) => Stmt::if_then(cond, store),
            None => store,
        }
    }

    /// Zero-initialise the accumulator for every spatial point reachable
    /// inside depth `q`.
    fn init(&mut self, q: usize) -> Stmt {
        let st = self.st;
        let blk = &st.blocks[self.b];
        let mut map: BTreeMap<VarId, VarId> = BTreeMap::new();
        let mut loops = Vec::new();
        for h in &blk.loops[q..] {
            if blk.reduce.contains(h) {
                continue;
            }
            let v = st.var(*h);
            let nv = self.fresh(format!("{}_z", st.var_names[v as usize]));
            map.insert(v, nv);
            loops.push((nv, st.extent(*h)));
        }
        let subst = |a: &Affine| {
            map.iter().fold(a.clone(), |acc, (old, new)| acc.substitute(*old, &Affine::var(*new)))
        };
        let (tb, tidx) = self.out_target(&blk.output.dims, &subst);
        let zero = st.buffers[blk.output.buf as usize].dtype.zero_expr();
        let mut body = Stmt::Store { buf: tb, index: tidx, value: zero };
        let to_cache = self.cache_for(blk.output.buf).is_some();
        if !to_cache && self.backing.guard_init() {
            let spatial_vars: BTreeSet<VarId> =
                blk.loops.iter().filter(|h| !blk.reduce.contains(*h)).map(|h| st.var(*h)).collect();
            let conds: Vec<Expr> = blk
                .guards
                .iter()
                .filter(|g| g.expr.terms.keys().all(|v| spatial_vars.contains(v)))
                .map(|g| Expr::lt(subst(&g.expr).to_expr(), Expr::Int(g.bound)))
                .collect();
            if let Some(cond) = Expr::all_of(conds) {
                body = Stmt::if_then(cond, body);
            }
        }
        for (v, e) in loops.into_iter().rev() {
            body = Stmt::for_loop(v, Expr::Int(e), ForKind::Serial, body);
        }
        body
    }

    fn nest(&mut self, p: usize, init_at: Option<usize>) -> Stmt {
        let st = self.st;
        let blk = &st.blocks[self.b];
        let n = blk.loops.len();
        let core = if p == n {
            self.compute()
        } else {
            let h = blk.loops[p];
            let body = self.nest(p + 1, init_at);
            let l = st.loop_info(h).expect("live loop");
            Stmt::for_loop(l.var, Expr::Int(l.extent), l.kind, body)
        };
        let here: Vec<CacheStage> =
            blk.caches.iter().filter(|c| cache_depth(st, self.b, c) == p).cloned().collect();
        let mut items = Vec::new();
        for c in here.iter().filter(|c| !c.write) {
            items.push(self.copy_nest(c));
        }
        if init_at == Some(p) {
            items.push(self.init(p));
        }
        items.push(core);
        for c in here.iter().filter(|c| c.write) {
            items.push(self.copy_nest(c));
        }
        let mut s = Stmt::seq(items);
        for c in here.iter().filter(|c| !c.write).rev() {
            s = Stmt::allocate(c.wram, s);
        }
        for c in here.iter().filter(|c| c.write).rev() {
            s = Stmt::allocate(c.wram, s);
        }
        s
    }
}

/// Render block `b` starting at loop depth `start` (loops above it are
/// provided by the caller, as the DPU grid is for kernels). Cache buffer
/// shapes are written into `buffers`.
pub(crate) fn render_block(
    st: &State,
    b: usize,
    start: usize,
    backing: &dyn Backing,
    vars: &mut Vec<String>,
    buffers: &mut [Buffer],
) -> Result<Stmt, String> {
    let blk = &st.blocks[b];
    let mut geoms = BTreeMap::new();
    for c in &blk.caches {
        if cache_depth(st, b, c) < start {
            return Err(format!(
                "cache of `{}` is placed outside the kernel",
                st.buffers[c.buf as usize].name
            ));
        }
        let g = cache_geometry(st, b, c);
        buffers[c.wram as usize].shape = g.shape.clone();
        geoms.insert(c.buf, g);
    }
    let init_at = if blk.reduce.is_empty() {
        None
    } else {
        let first = blk.loops.iter().position(|h| st.is_effective_reduce(b, *h)).unwrap_or(blk.loops.len());
        Some(first.max(start))
    };
    let mut ctx = Ctx { st, b, backing, vars, geoms };
    Ok(ctx.nest(start, init_at))
}

pub(crate) fn render_program(st: &State, block: Option<crate::ir::BlockDef>) -> LoopProgram {
    let mut buffers = st.buffers.clone();
    let mut vars = st.var_names.clone();
    let backing = RefBacking::new(&st.buffers);
    let mut items = Vec::new();
    for b in 0..st.blocks.len() {
        items.push(render_block(st, b, 0, &backing, &mut vars, &mut buffers).expect("reference rendering"));
    }
    LoopProgram {
        name: st.name.clone(),
        buffers,
        var_names: vars,
        inputs: st.inputs.clone(),
        outputs: st.outputs.clone(),
        body: Stmt::seq(items),
        block,
    }
}
