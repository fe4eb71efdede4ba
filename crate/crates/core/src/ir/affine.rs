use super::{Expr, VarId};
use std::collections::BTreeMap;

/// `Σ coef·var + constant`, terms kept sorted by variable id with no zero
/// coefficients.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Affine {
    pub terms: BTreeMap<VarId, i64>,
    pub constant: i64,
}

impl Affine {
    pub fn constant(c: i64) -> Self {
        Affine { terms: BTreeMap::new(), constant: c }
    }

    pub fn var(v: VarId) -> Self {
        Self::term(v, 1)
    }

    pub fn term(v: VarId, coef: i64) -> Self {
        let mut a = Affine::default();
        if coef != 0 {
            a.terms.insert(v, coef);
        }
        a
    }

    pub fn coef(&self, v: VarId) -> i64 {
        self.terms.get(&v).copied().unwrap_or(0)
    }

    pub fn is_const(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn add(&self, other: &Affine) -> Affine {
        let mut out = self.clone();
        for (&v, &c) in &other.terms {
            let e = out.terms.entry(v).or_insert(0);
            *e += c;
            if *e == 0 {
                out.terms.remove(&v);
            }
        }
        out.constant += other.constant;
        out
    }

    pub fn scale(&self, k: i64) -> Affine {
        if k == 0 {
            return Affine::default();
        }
        Affine {
            terms: self.terms.iter().map(|(&v, &c)| (v, c * k)).collect(),
            constant: self.constant * k,
        }
    }

    pub fn sub(&self, other: &Affine) -> Affine {
        self.add(&other.scale(-1))
    }

    /// Replace `v` with an affine expression.
    pub fn substitute(&self, v: VarId, with: &Affine) -> Affine {
        match self.terms.get(&v) {
            None => self.clone(),
            Some(&c) => {
                let mut rest = self.clone();
                rest.terms.remove(&v);
                rest.add(&with.scale(c))
            }
        }
    }

    /// Keep only the terms whose variable satisfies `keep`; the constant is dropped.
    pub fn restrict(&self, keep: impl Fn(VarId) -> bool) -> Affine {
        Affine {
            terms: self.terms.iter().filter(|(v, _)| keep(**v)).map(|(&v, &c)| (v, c)).collect(),
            constant: 0,
        }
    }

    pub fn eval(&self, lookup: impl Fn(VarId) -> i64) -> i64 {
        self.terms.iter().map(|(&v, &c)| c * lookup(v)).sum::<i64>() + self.constant
    }

    /// Inclusive value range given inclusive ranges for every variable.
    pub fn range(&self, ranges: impl Fn(VarId) -> (i64, i64)) -> (i64, i64) {
        let mut lo = self.constant;
        let mut hi = self.constant;
        for (&v, &c) in &self.terms {
            let (a, b) = ranges(v);
            if c >= 0 {
                lo += c * a;
                hi += c * b;
            } else {
                lo += c * b;
                hi += c * a;
            }
        }
        (lo, hi)
    }

    pub fn to_expr(&self) -> Expr {
        let mut acc: Option<Expr> = None;
        for (&v, &c) in &self.terms {
            let t = if c == 1 { Expr::Var(v) } else { Expr::mul(Expr::Var(v), Expr::Int(c)) };
            acc = Some(match acc {
                None => t,
                Some(a) => Expr::add(a, t),
            });
        }
        match acc {
            None => Expr::Int(self.constant),
            Some(a) if self.constant == 0 => a,
            Some(a) => Expr::add(a, Expr::Int(self.constant)),
        }
    }

    /// Classify `e` as affine in its variables.
    pub fn from_expr(e: &Expr) -> Option<Affine> {
        match e {
            Expr::Int(c) => Some(Affine::constant(*c)),
            Expr::Var(v) => Some(Affine::var(*v)),
            Expr::Add(a, b) => Some(Self::from_expr(a)?.add(&Self::from_expr(b)?)),
            Expr::Sub(a, b) => Some(Self::from_expr(a)?.sub(&Self::from_expr(b)?)),
            Expr::Mul(a, b) => {
                let (x, y) = (Self::from_expr(a)?, Self::from_expr(b)?);
                if x.is_const() {
                    Some(y.scale(x.constant))
                } else if y.is_const() {
                    Some(x.scale(y.constant))
                } else {
                    None
                }
            }
            _ => None,
        }
    }
}

fn floor_div(a: i64, b: i64) -> i64 {
    a.div_euclid(b)
}

fn floor_mod(a: i64, b: i64) -> i64 {
    a.rem_euclid(b)
}

/// Canonicalize an expression: affine sub-trees become a sorted term list
/// plus constant, and integer operations on constants are folded.
pub fn simplify(e: &Expr) -> Expr {
    if let Some(a) = Affine::from_expr(e) {
        return a.to_expr();
    }
    let s = |x: &Expr| simplify(x);
    let rebuilt = match e {
        Expr::Int(_) | Expr::Float(_) | Expr::Var(_) => return e.clone(),
        Expr::Add(a, b) => Expr::add(s(a), s(b)),
        Expr::Sub(a, b) => Expr::sub(s(a), s(b)),
        Expr::Mul(a, b) => Expr::mul(s(a), s(b)),
        Expr::FloorDiv(a, b) => Expr::floordiv(s(a), s(b)),
        Expr::FloorMod(a, b) => Expr::floormod(s(a), s(b)),
        Expr::Min(a, b) => Expr::min(s(a), s(b)),
        Expr::Max(a, b) => Expr::max(s(a), s(b)),
        Expr::Lt(a, b) => Expr::lt(s(a), s(b)),
        Expr::Le(a, b) => Expr::le(s(a), s(b)),
        Expr::Eq(a, b) => Expr::eq(s(a), s(b)),
        Expr::And(a, b) => Expr::and(s(a), s(b)),
        Expr::Load(buf, i) => return Expr::load(*buf, s(i)),
        Expr::Select(c, t, f) => Expr::select(s(c), s(t), s(f)),
    };
    if let Some(a) = Affine::from_expr(&rebuilt) {
        return a.to_expr();
    }
    fold(rebuilt)
}

fn fold(e: Expr) -> Expr {
    match e {
        Expr::FloorDiv(a, b) => match (a.as_int(), b.as_int()) {
            (Some(x), Some(y)) if y != 0 => Expr::Int(floor_div(x, y)),
            (_, Some(1)) => *a,
            _ => Expr::FloorDiv(a, b),
        },
        Expr::FloorMod(a, b) => match (a.as_int(), b.as_int()) {
            (Some(x), Some(y)) if y != 0 => Expr::Int(floor_mod(x, y)),
            (_, Some(1)) => Expr::Int(0),
            _ => Expr::FloorMod(a, b),
        },
        Expr::Min(a, b) | Expr::Max(a, b) if a == b => *a,
        Expr::Min(a, b) => match affine_diff(&a, &b) {
            Some(d) if d <= 0 => *a,
            Some(_) => *b,
            None => Expr::Min(a, b),
        },
        Expr::Max(a, b) => match affine_diff(&a, &b) {
            Some(d) if d >= 0 => *a,
            Some(_) => *b,
            None => Expr::Max(a, b),
        },
        Expr::Lt(a, b) => match affine_diff(&a, &b) {
            Some(d) => Expr::Int((d < 0) as i64),
            None => Expr::Lt(a, b),
        },
        Expr::Le(a, b) => match affine_diff(&a, &b) {
            Some(d) => Expr::Int((d <= 0) as i64),
            None => Expr::Le(a, b),
        },
        Expr::Eq(a, b) => match affine_diff(&a, &b) {
            Some(d) => Expr::Int((d == 0) as i64),
            None => Expr::Eq(a, b),
        },
        Expr::And(a, b) => match (a.as_int(), b.as_int()) {
            (Some(0), _) | (_, Some(0)) => Expr::Int(0),
            (Some(_), _) => *b,
            (_, Some(_)) => *a,
            _ => Expr::And(a, b),
        },
        Expr::Select(c, t, f) => match c.as_int() {
            Some(0) => *f,
            Some(_) => *t,
            None => Expr::Select(c, t, f),
        },
        other => other,
    }
}

/// `a − b` when both are affine and differ by a constant.
fn affine_diff(a: &Expr, b: &Expr) -> Option<i64> {
    let d = Affine::from_expr(a)?.sub(&Affine::from_expr(b)?);
    d.is_const().then_some(d.constant)
}

/// Decide a condition over inclusive variable ranges. `None` when the
/// outcome depends on the values or a variable has no known range.
pub fn prove(cond: &Expr, ranges: &impl Fn(VarId) -> Option<(i64, i64)>) -> Option<bool> {
    let diff = |a: &Expr, b: &Expr| -> Option<(i64, i64)> {
        let d = Affine::from_expr(a)?.sub(&Affine::from_expr(b)?);
        if d.terms.keys().any(|v| ranges(*v).is_none()) {
            return None;
        }
        Some(d.range(|v| ranges(v).unwrap()))
    };
    match cond {
        Expr::Int(v) => Some(*v != 0),
        Expr::Lt(a, b) => match diff(a, b)? {
            (_, hi) if hi < 0 => Some(true),
            (lo, _) if lo >= 0 => Some(false),
            _ => None,
        },
        Expr::Le(a, b) => match diff(a, b)? {
            (_, hi) if hi <= 0 => Some(true),
            (lo, _) if lo > 0 => Some(false),
            _ => None,
        },
        Expr::And(a, b) => match (prove(a, ranges), prove(b, ranges)) {
            (Some(false), _) | (_, Some(false)) => Some(false),
            (Some(true), Some(true)) => Some(true),
            _ => None,
        },
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(i: VarId) -> Expr {
        Expr::Var(i)
    }

    #[test]
    fn merges_like_terms() {
        let e = Expr::add(Expr::add(Expr::mul(v(0), Expr::Int(4)), Expr::Int(2)), Expr::mul(v(0), Expr::Int(4)));
        assert_eq!(simplify(&e), Expr::add(Expr::mul(v(0), Expr::Int(8)), Expr::Int(2)));
    }

    #[test]
    fn folds_min_of_constants() {
        let e = Expr::min(Expr::Int(16), Expr::sub(Expr::Int(40), Expr::Int(32)));
        assert_eq!(simplify(&e), Expr::Int(8));
    }

    #[test]
    fn folds_ceil_division() {
        let e = Expr::floordiv(Expr::sub(Expr::add(Expr::Int(7), Expr::Int(2)), Expr::Int(1)), Expr::Int(2));
        assert_eq!(simplify(&e), Expr::Int(4));
    }

    #[test]
    fn min_of_offset_affines() {
        let e = Expr::min(Expr::add(v(1), Expr::Int(16)), Expr::add(v(1), Expr::Int(8)));
        assert_eq!(simplify(&e), Expr::add(v(1), Expr::Int(8)));
    }

    #[test]
    fn non_affine_is_kept() {
        let e = Expr::mul(v(0), v(1));
        assert_eq!(simplify(&e), e);
        assert!(Affine::from_expr(&e).is_none());
    }

    #[test]
    fn range_with_negative_coefficient() {
        let a = Affine::term(0, 3).add(&Affine::term(1, -2)).add(&Affine::constant(1));
        assert_eq!(a.range(|_| (0, 4)), (1 - 8, 1 + 12));
    }
}
