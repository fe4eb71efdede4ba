//! Workload registry: declarative specs and the canonical loop programs they
//! lower to.

use super::{Affine, BufId, Buffer, Expr, ForKind, LoopProgram, MemoryScope, ScalarType, Stmt, Tensor, VarId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkloadKind {
    Va,
    Red,
    Mtv,
    Ttv,
    Mmtv,
    Geva,
    Gemv,
}

impl WorkloadKind {
    pub const ALL: [WorkloadKind; 7] = [
        WorkloadKind::Va,
        WorkloadKind::Red,
        WorkloadKind::Mtv,
        WorkloadKind::Ttv,
        WorkloadKind::Mmtv,
        WorkloadKind::Geva,
        WorkloadKind::Gemv,
    ];

    /// Which of `m`, `n`, `k` the workload takes.
    pub fn shape_params(self) -> &'static [&'static str] {
        match self {
            WorkloadKind::Va | WorkloadKind::Red | WorkloadKind::Geva => &["n"],
            WorkloadKind::Mtv | WorkloadKind::Gemv => &["m", "n"],
            WorkloadKind::Ttv | WorkloadKind::Mmtv => &["m", "n", "k"],
        }
    }

    pub fn scalar_params(self) -> &'static [&'static str] {
        match self {
            WorkloadKind::Geva => &["c", "d"],
            WorkloadKind::Gemv => &["c"],
            _ => &[],
        }
    }

    /// Matrix operands that are weights and can be transferred once.
    pub fn default_constants(self) -> Vec<String> {
        match self {
            WorkloadKind::Mtv | WorkloadKind::Ttv | WorkloadKind::Mmtv | WorkloadKind::Gemv => vec!["A".into()],
            _ => vec![],
        }
    }
}

impl fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WorkloadKind::Va => "va",
            WorkloadKind::Red => "red",
            WorkloadKind::Mtv => "mtv",
            WorkloadKind::Ttv => "ttv",
            WorkloadKind::Mmtv => "mmtv",
            WorkloadKind::Geva => "geva",
            WorkloadKind::Gemv => "gemv",
        })
    }
}

impl std::str::FromStr for WorkloadKind {
    type Err = WorkloadError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        WorkloadKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| WorkloadError::UnknownWorkload(s.to_string()))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkloadError {
    #[error("unknown workload `{0}`")]
    UnknownWorkload(String),
    #[error("workload {workload} requires shape parameter `{param}`")]
    MissingParam { workload: WorkloadKind, param: &'static str },
    #[error("shape parameter `{param}` must be positive, got {value}")]
    NonPositive { param: String, value: i64 },
    #[error("workload {workload} does not take parameter `{param}`")]
    UnexpectedParam { workload: WorkloadKind, param: String },
    #[error("malformed workload description: {0}")]
    Parse(String),
}

/// Declarative description of one workload instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    #[serde(rename = "workload")]
    pub kind: WorkloadKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<i64>,
    #[serde(default = "default_dtype")]
    pub dtype: ScalarType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<f64>,
    /// Input buffers transferred once before any launch.
    #[serde(default)]
    pub constants: Vec<String>,
}

fn default_dtype() -> ScalarType {
    ScalarType::Int32
}

impl WorkloadSpec {
    pub fn new(kind: WorkloadKind, shape: &[i64]) -> WorkloadSpec {
        let p = kind.shape_params();
        let get = |name: &str| p.iter().position(|q| *q == name).and_then(|i| shape.get(i).copied());
        let mut s = WorkloadSpec {
            kind,
            m: get("m"),
            n: get("n"),
            k: get("k"),
            dtype: ScalarType::Int32,
            c: None,
            d: None,
            constants: kind.default_constants(),
        };
        s.fill_scalar_defaults();
        s
    }

    pub fn with_dtype(mut self, dtype: ScalarType) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn with_scalars(mut self, c: Option<f64>, d: Option<f64>) -> Self {
        self.c = c;
        self.d = d;
        self
    }

    fn fill_scalar_defaults(&mut self) {
        let sp = self.kind.scalar_params();
        if sp.contains(&"c") && self.c.is_none() {
            self.c = Some(1.0);
        }
        if sp.contains(&"d") && self.d.is_none() {
            self.d = Some(1.0);
        }
    }

    pub fn shape(&self) -> Vec<i64> {
        self.kind
            .shape_params()
            .iter()
            .map(|p| match *p {
                "m" => self.m.unwrap_or(0),
                "n" => self.n.unwrap_or(0),
                _ => self.k.unwrap_or(0),
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let wanted = self.kind.shape_params();
        for (name, val) in [("m", self.m), ("n", self.n), ("k", self.k)] {
            match (wanted.contains(&name), val) {
                (true, None) => return Err(WorkloadError::MissingParam { workload: self.kind, param: wanted[wanted.iter().position(|p| *p == name).unwrap()] }),
                (true, Some(v)) if v <= 0 => return Err(WorkloadError::NonPositive { param: name.into(), value: v }),
                (false, Some(_)) => return Err(WorkloadError::UnexpectedParam { workload: self.kind, param: name.into() }),
                _ => {}
            }
        }
        let sp = self.kind.scalar_params();
        for (name, val) in [("c", self.c), ("d", self.d)] {
            match (sp.contains(&name), val) {
                (true, None) => return Err(WorkloadError::Parse(format!("missing scalar `{name}`"))),
                (false, Some(_)) => return Err(WorkloadError::UnexpectedParam { workload: self.kind, param: name.into() }),
                (true, Some(v)) if !self.dtype.is_float() && v.fract() != 0.0 => {
                    return Err(WorkloadError::Parse(format!("scalar `{name}`={v} is not an integer")))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Parse the flat `key=value` form, e.g. `workload=mmtv m=256 n=512 k=256 dtype=int32`.
    /// A leading `{` selects JSON instead.
    pub fn parse(text: &str) -> Result<WorkloadSpec, WorkloadError> {
        let text = text.trim();
        if text.starts_with('{') {
            let mut s: WorkloadSpec =
                serde_json::from_str(text).map_err(|e| WorkloadError::Parse(e.to_string()))?;
            s.fill_scalar_defaults();
            s.validate()?;
            return Ok(s);
        }
        let mut kind = None;
        let (mut m, mut n, mut k, mut c, mut d) = (None, None, None, None, None);
        let mut dtype = ScalarType::Int32;
        let mut constants = None;
        for tok in text.split_whitespace() {
            let tok = tok.trim_start_matches("--");
            let (key, val) =
                tok.split_once('=').ok_or_else(|| WorkloadError::Parse(format!("expected key=value, got `{tok}`")))?;
            let int = |v: &str| v.parse::<i64>().map_err(|e| WorkloadError::Parse(format!("{key}: {e}")));
            let float = |v: &str| v.parse::<f64>().map_err(|e| WorkloadError::Parse(format!("{key}: {e}")));
            match key {
                "workload" => kind = Some(val.parse::<WorkloadKind>()?),
                "m" => m = Some(int(val)?),
                "n" => n = Some(int(val)?),
                "k" => k = Some(int(val)?),
                "c" => c = Some(float(val)?),
                "d" => d = Some(float(val)?),
                "dtype" => dtype = val.parse().map_err(WorkloadError::Parse)?,
                "const" | "constants" => {
                    constants = Some(val.split(',').filter(|s| !s.is_empty()).map(String::from).collect())
                }
                other => return Err(WorkloadError::Parse(format!("unknown key `{other}`"))),
            }
        }
        let kind = kind.ok_or_else(|| WorkloadError::Parse("missing `workload=`".into()))?;
        let mut s = WorkloadSpec {
            kind,
            m,
            n,
            k,
            dtype,
            c,
            d,
            constants: constants.unwrap_or_else(|| kind.default_constants()),
        };
        s.fill_scalar_defaults();
        s.validate()?;
        Ok(s)
    }

    pub fn to_kv(&self) -> String {
        let mut parts = vec![format!("workload={}", self.kind)];
        for (name, v) in [("m", self.m), ("n", self.n), ("k", self.k)] {
            if let Some(v) = v {
                parts.push(format!("{name}={v}"));
            }
        }
        parts.push(format!("dtype={}", self.dtype));
        for (name, v) in [("c", self.c), ("d", self.d)] {
            if let Some(v) = v {
                parts.push(format!("{name}={v}"));
            }
        }
        parts.push(format!("const={}", self.constants.join(",")));
        parts.join(" ")
    }

    /// Stable identifier used to key tuning records.
    pub fn fingerprint(&self) -> String {
        self.to_kv()
    }

    fn scalar_expr(&self, v: f64) -> Expr {
        if self.dtype.is_float() {
            Expr::Float(v as f32)
        } else {
            Expr::Int(v as i64)
        }
    }
}

/// A buffer access whose per-dimension indices are affine in the block's
/// axis variables.
#[derive(Clone, Debug, PartialEq)]
pub struct Access {
    pub buf: BufId,
    pub dims: Vec<Affine>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub name: String,
    pub extent: i64,
    pub reduce: bool,
    pub var: VarId,
}

/// The single compute statement of a workload, in iteration-space form.
///
/// `value` refers to each read through a placeholder `Load(buf, 0)`; the
/// renderer swaps in the real (possibly cached) index.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockDef {
    pub name: String,
    pub axes: Vec<Axis>,
    pub output: Access,
    pub reads: Vec<Access>,
    pub value: Expr,
}

impl BlockDef {
    pub fn is_reduction(&self) -> bool {
        self.axes.iter().any(|a| a.reduce)
    }
}

/// Build the canonical perfectly nested program for a workload: spatial
/// loops outermost, an explicit zero-initialisation of the accumulator,
/// then reduction loops.
pub fn build_workload(spec: &WorkloadSpec) -> Result<LoopProgram, WorkloadError> {
    spec.validate()?;
    let dt = spec.dtype;
    let (m, n, k) = (spec.m.unwrap_or(1), spec.n.unwrap_or(1), spec.k.unwrap_or(1));
    let axis = |name: &str, extent: i64, reduce: bool, var: VarId| Axis { name: name.into(), extent, reduce, var };
    let buf = |id: BufId, name: &str, shape: Vec<i64>| Buffer {
        id,
        name: name.into(),
        dtype: dt,
        shape,
        scope: MemoryScope::HostGlobal,
    };
    let v = |i: VarId| Affine::var(i);
    let ld = |b: BufId| Expr::load(b, Expr::Int(0));
    let (a, b, c) = (0, 1, 2);

    let (axes, buffers, output, reads, value) = match spec.kind {
        WorkloadKind::Va | WorkloadKind::Geva => {
            let value = if spec.kind == WorkloadKind::Va {
                Expr::add(ld(a), ld(b))
            } else {
                Expr::add(
                    Expr::mul(spec.scalar_expr(spec.c.unwrap()), ld(a)),
                    Expr::mul(spec.scalar_expr(spec.d.unwrap()), ld(b)),
                )
            };
            (
                vec![axis("i", n, false, 0)],
                vec![buf(a, "A", vec![n]), buf(b, "B", vec![n]), buf(c, "C", vec![n])],
                Access { buf: c, dims: vec![v(0)] },
                vec![Access { buf: a, dims: vec![v(0)] }, Access { buf: b, dims: vec![v(0)] }],
                value,
            )
        }
        WorkloadKind::Red => (
            vec![axis("i", n, true, 0)],
            vec![buf(a, "A", vec![n]), buf(1, "b", vec![1])],
            Access { buf: 1, dims: vec![Affine::constant(0)] },
            vec![Access { buf: a, dims: vec![v(0)] }],
            ld(a),
        ),
        WorkloadKind::Mtv | WorkloadKind::Gemv => {
            let prod = Expr::mul(ld(a), ld(b));
            let value = match spec.kind {
                WorkloadKind::Gemv => Expr::mul(spec.scalar_expr(spec.c.unwrap()), prod),
                _ => prod,
            };
            (
                vec![axis("i", m, false, 0), axis("j", n, true, 1)],
                vec![buf(a, "A", vec![m, n]), buf(b, "B", vec![n]), buf(c, "C", vec![m])],
                Access { buf: c, dims: vec![v(0)] },
                vec![Access { buf: a, dims: vec![v(0), v(1)] }, Access { buf: b, dims: vec![v(1)] }],
                value,
            )
        }
        WorkloadKind::Ttv => (
            vec![axis("i", m, false, 0), axis("j", n, false, 1), axis("k", k, true, 2)],
            vec![buf(a, "A", vec![m, n, k]), buf(b, "B", vec![k]), buf(c, "C", vec![m, n])],
            Access { buf: c, dims: vec![v(0), v(1)] },
            vec![Access { buf: a, dims: vec![v(0), v(1), v(2)] }, Access { buf: b, dims: vec![v(2)] }],
            Expr::mul(ld(a), ld(b)),
        ),
        WorkloadKind::Mmtv => (
            vec![axis("i", m, false, 0), axis("j", n, false, 1), axis("k", k, true, 2)],
            vec![buf(a, "A", vec![m, n, k]), buf(b, "B", vec![m, k]), buf(c, "C", vec![m, n])],
            Access { buf: c, dims: vec![v(0), v(1)] },
            vec![Access { buf: a, dims: vec![v(0), v(1), v(2)] }, Access { buf: b, dims: vec![v(0), v(2)] }],
            Expr::mul(ld(a), ld(b)),
        ),
    };

    let block = BlockDef { name: spec.kind.to_string(), axes, output, reads, value };
    let body = canonical_body(&block, &buffers);
    let out_id = block.output.buf;
    let input_ids: Vec<BufId> = block.reads.iter().map(|r| r.buf).collect();
    Ok(LoopProgram {
        name: spec.kind.to_string(),
        var_names: block.axes.iter().map(|a| a.name.clone()).collect(),
        inputs: input_ids,
        outputs: vec![out_id],
        buffers,
        body,
        block: Some(block),
    })
}

pub(crate) fn flat_index(dims: &[Affine], shape: &[i64]) -> Affine {
    let strides = super::row_major_strides(shape);
    dims.iter().zip(strides).fold(Affine::default(), |acc, (d, s)| acc.add(&d.scale(s)))
}

/// Substitute each placeholder load in `value` with `index_of(buf)`.
pub(crate) fn instantiate_value(value: &Expr, index_of: &impl Fn(BufId) -> (BufId, Expr)) -> Expr {
    value.map(&mut |e| match e {
        Expr::Load(b, _) => {
            let (nb, idx) = index_of(b);
            Expr::load(nb, idx)
        }
        other => other,
    })
}

fn canonical_body(block: &BlockDef, buffers: &[Buffer]) -> Stmt {
    let shape_of = |b: BufId| buffers[b as usize].shape.clone();
    let out = block.output.buf;
    let out_idx = flat_index(&block.output.dims, &shape_of(out)).to_expr();
    let value = instantiate_value(&block.value, &|b| {
        let acc = block.reads.iter().find(|r| r.buf == b).expect("read access");
        (b, flat_index(&acc.dims, &shape_of(b)).to_expr())
    });
    let nest = |axes: Vec<&Axis>, inner: Stmt| {
        axes.into_iter()
            .rev()
            .fold(inner, |body, a| Stmt::for_loop(a.var, Expr::Int(a.extent), ForKind::Serial, body))
    };
    let spatial: Vec<&Axis> = block.axes.iter().filter(|a| !a.reduce).collect();
    let reduce: Vec<&Axis> = block.axes.iter().filter(|a| a.reduce).collect();
    let inner = if reduce.is_empty() {
        Stmt::Store { buf: out, index: out_idx, value }
    } else {
        let init = Stmt::Store { buf: out, index: out_idx.clone(), value: buffers[out as usize].dtype.zero_expr() };
        let update = Stmt::Store {
            buf: out,
            index: out_idx.clone(),
            value: Expr::add(Expr::load(out, out_idx), value),
        };
        Stmt::seq(vec![init, nest(reduce, update)])
    };
    nest(spatial, inner)
}

impl ScalarType {
    pub fn zero_expr(self) -> Expr {
        if self.is_float() {
            Expr::Float(0.0)
        } else {
            Expr::Int(0)
        }
    }
}

/// Seeded input tensors with small values, so int32 reductions cannot
/// overflow and float sums stay exact.
pub fn random_inputs(prog: &LoopProgram, seed: u64) -> BTreeMap<String, Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    prog.inputs
        .iter()
        .map(|&b| {
            let buf = prog.buffer(b);
            let n = buf.numel() as usize;
            let t = if buf.dtype.is_float() {
                Tensor::from_f32(buf.shape.clone(), (0..n).map(|_| rng.gen_range(-8i32..8) as f32 / 8.0).collect())
            } else {
                Tensor::from_i64(buf.shape.clone(), buf.dtype, (0..n).map(|_| rng.gen_range(-8..8)).collect())
            };
            (buf.name.clone(), t)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{evaluate_reference, print_program, Tensor};
    use std::collections::BTreeMap;

    #[test]
    fn va_is_a_single_loop() {
        let p = build_workload(&WorkloadSpec::new(WorkloadKind::Va, &[8])).unwrap();
        let text = print_program(&p);
        assert!(text.contains("for i in range(8):"), "{text}");
        assert!(text.contains("C[i] = (A[i] + B[i])"), "{text}");
    }

    #[test]
    fn red_sums() {
        let p = build_workload(&WorkloadSpec::new(WorkloadKind::Red, &[4])).unwrap();
        let mut inputs = BTreeMap::new();
        inputs.insert("A".to_string(), Tensor::from_i64(vec![4], ScalarType::Int32, vec![1, 2, 3, 4]));
        let out = evaluate_reference(&p, &inputs).unwrap();
        assert_eq!(out["b"].ints(), vec![10]);
    }

    #[test]
    fn gemv_row_sums_of_ones() {
        let spec = WorkloadSpec::new(WorkloadKind::Gemv, &[7, 40]).with_scalars(Some(1.0), None);
        let p = build_workload(&spec).unwrap();
        let mut inputs = BTreeMap::new();
        inputs.insert("A".to_string(), Tensor::from_i64(vec![7, 40], ScalarType::Int32, vec![1; 280]));
        inputs.insert("B".to_string(), Tensor::from_i64(vec![40], ScalarType::Int32, vec![1; 40]));
        let out = evaluate_reference(&p, &inputs).unwrap();
        assert_eq!(out["C"].ints(), vec![40; 7]);
    }

    #[test]
    fn geva_scalars() {
        let spec = WorkloadSpec::new(WorkloadKind::Geva, &[3]).with_scalars(Some(2.0), Some(3.0));
        let p = build_workload(&spec).unwrap();
        let mut inputs = BTreeMap::new();
        inputs.insert("A".to_string(), Tensor::from_i64(vec![3], ScalarType::Int32, vec![1; 3]));
        inputs.insert("B".to_string(), Tensor::from_i64(vec![3], ScalarType::Int32, vec![1; 3]));
        assert_eq!(evaluate_reference(&p, &inputs).unwrap()["C"].ints(), vec![5, 5, 5]);
    }

    #[test]
    fn parse_key_value() {
        let s = WorkloadSpec::parse("workload=mmtv m=256 n=512 k=256 dtype=int32").unwrap();
        assert_eq!(s.kind, WorkloadKind::Mmtv);
        assert_eq!(s.shape(), vec![256, 512, 256]);
        assert_eq!(s.constants, vec!["A".to_string()]);
        let again = WorkloadSpec::parse(&s.to_kv()).unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn parse_json() {
        let s = WorkloadSpec::parse(r#"{"workload":"gemv","m":7,"n":40,"c":2}"#).unwrap();
        assert_eq!(s.c, Some(2.0));
        assert_eq!(s.dtype, ScalarType::Int32);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(matches!(WorkloadSpec::parse("workload=conv n=3"), Err(WorkloadError::UnknownWorkload(_))));
        assert!(matches!(WorkloadSpec::parse("workload=va n=0"), Err(WorkloadError::NonPositive { .. })));
        assert!(matches!(WorkloadSpec::parse("workload=mtv m=4"), Err(WorkloadError::MissingParam { .. })));
        assert!(matches!(WorkloadSpec::parse("workload=va n=4 k=2"), Err(WorkloadError::UnexpectedParam { .. })));
        assert!(WorkloadSpec::parse("workload=va n=4 c=2").is_err());
    }
}
