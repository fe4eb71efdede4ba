use super::{Buffer, Expr, ForKind, IntrinsicCall, LoopProgram, Stmt, VarId};
use std::fmt::Write;

pub(crate) struct Names<'a> {
    pub vars: &'a [String],
    pub buffers: &'a [Buffer],
}

impl Names<'_> {
    fn var(&self, v: VarId) -> String {
        match self.vars.get(v as usize) {
            Some(n) => n.clone(),
            None => format!("v{v}"),
        }
    }

    fn buf(&self, b: u32) -> String {
        match self.buffers.get(b as usize) {
            Some(buf) => buf.name.clone(),
            None => format!("buf{b}"),
        }
    }
}

pub fn print_expr(e: &Expr, vars: &[String], buffers: &[Buffer]) -> String {
    expr(e, &Names { vars, buffers })
}

pub fn print_stmt(s: &Stmt, vars: &[String], buffers: &[Buffer]) -> String {
    let mut out = String::new();
    stmt(s, &Names { vars, buffers }, 0, &mut out);
    out
}

pub fn print_program(p: &LoopProgram) -> String {
    let mut out = String::new();
    writeln!(out, "program {}", p.name).unwrap();
    for b in &p.buffers {
        let role = if p.inputs.contains(&b.id) {
            " input"
        } else if p.outputs.contains(&b.id) {
            " output"
        } else {
            ""
        };
        writeln!(out, "  buffer {}: {}{:?} @{}{}", b.name, b.dtype, b.shape, b.scope, role).unwrap();
    }
    stmt(&p.body, &Names { vars: &p.var_names, buffers: &p.buffers }, 1, &mut out);
    out
}

pub(crate) fn expr(e: &Expr, n: &Names) -> String {
    let bin = |op: &str, a: &Expr, b: &Expr| format!("({} {} {})", expr(a, n), op, expr(b, n));
    let call = |f: &str, a: &Expr, b: &Expr| format!("{}({}, {})", f, expr(a, n), expr(b, n));
    match e {
        Expr::Int(v) => v.to_string(),
        Expr::Float(v) => format!("{v:?}f"),
        Expr::Var(v) => n.var(*v),
        Expr::Add(a, b) => bin("+", a, b),
        Expr::Sub(a, b) => bin("-", a, b),
        Expr::Mul(a, b) => bin("*", a, b),
        Expr::FloorDiv(a, b) => bin("//", a, b),
        Expr::FloorMod(a, b) => bin("%", a, b),
        Expr::Min(a, b) => call("min", a, b),
        Expr::Max(a, b) => call("max", a, b),
        Expr::Lt(a, b) => bin("<", a, b),
        Expr::Le(a, b) => bin("<=", a, b),
        Expr::Eq(a, b) => bin("==", a, b),
        Expr::And(a, b) => bin("&&", a, b),
        Expr::Load(b, i) => format!("{}[{}]", n.buf(*b), expr(i, n)),
        Expr::Select(c, t, f) => format!("select({}, {}, {})", expr(c, n), expr(t, n), expr(f, n)),
    }
}

fn kind_tag(k: ForKind) -> &'static str {
    match k {
        ForKind::Serial => "",
        ForKind::Unrolled => " unrolled",
        ForKind::HostParallel => " parallel",
        ForKind::BoundDpuX => " dpu.x",
        ForKind::BoundDpuY => " dpu.y",
        ForKind::BoundTasklet => " tasklet",
    }
}

fn intrinsic(c: &IntrinsicCall, n: &Names) -> String {
    match c {
        IntrinsicCall::DmaLoad { mram, mram_offset, wram, wram_offset, bytes } => format!(
            "dma_load({}[{}] <- {}[{}], {} B)",
            n.buf(*wram),
            expr(wram_offset, n),
            n.buf(*mram),
            expr(mram_offset, n),
            bytes
        ),
        IntrinsicCall::DmaStore { mram, mram_offset, wram, wram_offset, bytes } => format!(
            "dma_store({}[{}] <- {}[{}], {} B)",
            n.buf(*mram),
            expr(mram_offset, n),
            n.buf(*wram),
            expr(wram_offset, n),
            bytes
        ),
        IntrinsicCall::HostToDpu { global, global_offset, dpu, mram, mram_offset, bytes } => format!(
            "h2d(dpu {}: {}[{}] <- {}[{}], {} B)",
            expr(dpu, n),
            n.buf(*mram),
            expr(mram_offset, n),
            n.buf(*global),
            expr(global_offset, n),
            bytes
        ),
        IntrinsicCall::DpuToHost { global, global_offset, dpu, mram, mram_offset, bytes } => format!(
            "d2h(dpu {}: {}[{}] <- {}[{}], {} B)",
            expr(dpu, n),
            n.buf(*global),
            expr(global_offset, n),
            n.buf(*mram),
            expr(mram_offset, n),
            bytes
        ),
        IntrinsicCall::ParallelTransferGroup { direction, global, mram, mram_offset, bytes, members } => {
            let ms: Vec<String> =
                members.iter().map(|m| format!("{}:{}", m.dpu, expr(&m.global_offset, n))).collect();
            format!(
                "parallel_xfer {}({}[{}] <-> {}[..], {} B, members [{}])",
                direction,
                n.buf(*mram),
                expr(mram_offset, n),
                n.buf(*global),
                bytes,
                ms.join(", ")
            )
        }
        IntrinsicCall::LaunchKernel => "launch_kernel()".to_string(),
    }
}

pub(crate) fn stmt(s: &Stmt, n: &Names, depth: usize, out: &mut String) {
    let pad = "  ".repeat(depth);
    match s {
        Stmt::For(l) => {
            let range = if l.min == Expr::Int(0) {
                expr(&l.extent, n)
            } else {
                format!("{}, {}", expr(&l.min, n), expr(&l.extent, n))
            };
            writeln!(out, "{pad}for {} in range({}){}:", n.var(l.var), range, kind_tag(l.kind)).unwrap();
            stmt(&l.body, n, depth + 1, out);
        }
        Stmt::IfThen { cond, then, otherwise } => {
            writeln!(out, "{pad}if {}:", expr(cond, n)).unwrap();
            stmt(then, n, depth + 1, out);
            if let Some(o) = otherwise {
                writeln!(out, "{pad}else:").unwrap();
                stmt(o, n, depth + 1, out);
            }
        }
        Stmt::Store { buf, index, value } => {
            writeln!(out, "{pad}{}[{}] = {}", n.buf(*buf), expr(index, n), expr(value, n)).unwrap();
        }
        Stmt::Allocate { buf, body } => {
            let b = n.buffers.get(*buf as usize);
            let desc = b.map(|b| format!("{}{:?} @{}", b.dtype, b.shape, b.scope)).unwrap_or_default();
            writeln!(out, "{pad}allocate {} {}", n.buf(*buf), desc).unwrap();
            stmt(body, n, depth, out);
        }
        Stmt::Seq(items) => {
            if items.is_empty() {
                writeln!(out, "{pad}pass").unwrap();
            }
            for i in items {
                stmt(i, n, depth, out);
            }
        }
        Stmt::Intrinsic(c) => writeln!(out, "{pad}{}", intrinsic(c, n)).unwrap(),
        Stmt::Evaluate(e) => writeln!(out, "{pad}{}", expr(e, n)).unwrap(),
    }
}
