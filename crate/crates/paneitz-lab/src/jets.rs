//! Truncated multivariate Taylor arithmetic ("jets").
//!
//! A [`Jet`] holds the Taylor-normalized coefficients `c_alpha = d^alpha f(x0) / alpha!`
//! of a smooth function at a base point, for every multi-index with `|alpha| <= order`,
//! in graded-lexicographic layout. Sums, products and compositions are exact truncated
//! polynomial arithmetic — the only error is roundoff, there is no step size anywhere.
//! The independent cross-check against finite differences lives in [`fd`].

use std::collections::HashMap;
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::{Mutex, OnceLock};

use thiserror::Error;

/// Hard cap on jet order. Cost grows like C(dim+order, order)^2 per product and
/// everything downstream needs at most metric order 5 (divergence checks), so
/// higher orders are refused rather than silently ground through.
pub const MAX_ORDER: usize = 6;
/// Hard cap on the number of variables.
pub const MAX_DIM: usize = 8;

#[derive(Debug, Error)]
pub enum JetError {
    #[error("jet order {0} exceeds the supported maximum {MAX_ORDER}")]
    OrderTooHigh(usize),
    #[error("dimension {0} outside the supported range 1..={MAX_DIM}")]
    BadDim(usize),
    #[error("domain error in {op}: value {value}")]
    Domain { op: &'static str, value: f64 },
}

// ---------------------------------------------------------------------------
// Multi-index tables
// ---------------------------------------------------------------------------

/// Shared per-(dim, order) lookup data: the graded-lex multi-index list, the
/// factorials, and the flattened multiplication pair table. Tables are built
/// once and leaked; every `Jet` holds a `&'static` handle so hot loops never
/// touch the global cache.
pub struct JetTable {
    dim: usize,
    order: usize,
    /// Exponent vectors, graded lex, flattened `len * dim`.
    exps: Vec<u8>,
    /// `deg_start[d]` = index of the first multi-index of degree `d`;
    /// has `order + 2` entries so `deg_start[order + 1] == len`.
    deg_start: Vec<usize>,
    /// `alpha!` per index.
    factorial: Vec<f64>,
    /// Rank lookup for exponent vectors (padded to `MAX_DIM`).
    rank: HashMap<[u8; MAX_DIM], u32>,
    /// For each left index `ia`, the product targets for every right index
    /// `ib < mul_limit[ia]`: `mul_target[mul_offset[ia] + ib] = rank(a + b)`.
    mul_offset: Vec<usize>,
    mul_limit: Vec<usize>,
    mul_target: Vec<u32>,
}

impl JetTable {
    /// Number of stored coefficients, `C(dim + order, order)`.
    pub fn len(&self) -> usize {
        self.deg_start[self.order + 1]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Exponent vector of the `k`-th coefficient.
    pub fn exp(&self, k: usize) -> &[u8] {
        &self.exps[k * self.dim..(k + 1) * self.dim]
    }

    pub fn degree(&self, k: usize) -> usize {
        self.exp(k).iter().map(|&e| e as usize).sum()
    }

    /// Index of an exponent vector, if `|alpha| <= order`.
    pub fn index_of(&self, alpha: &[u8]) -> Option<usize> {
        let mut key = [0u8; MAX_DIM];
        key[..alpha.len()].copy_from_slice(alpha);
        self.rank.get(&key).map(|&r| r as usize)
    }

    pub fn factorial(&self, k: usize) -> f64 {
        self.factorial[k]
    }

    fn build(dim: usize, order: usize) -> Self {
        let mut exps: Vec<u8> = Vec::new();
        let mut deg_start = vec![0usize; order + 2];
        let mut scratch = vec![0u8; dim];
        for d in 0..=order {
            deg_start[d] = exps.len() / dim;
            emit_degree(d, 0, &mut scratch, &mut exps);
        }
        deg_start[order + 1] = exps.len() / dim;
        let len = exps.len() / dim;

        let mut rank = HashMap::with_capacity(len);
        let mut factorial = Vec::with_capacity(len);
        for k in 0..len {
            let e = &exps[k * dim..(k + 1) * dim];
            let mut key = [0u8; MAX_DIM];
            key[..dim].copy_from_slice(e);
            rank.insert(key, k as u32);
            factorial.push(e.iter().map(|&x| fact(x as usize)).product());
        }

        // Multiplication table: for each ia, all ib with deg(a) + deg(b) <= order.
        // The graded layout makes the admissible ib a simple prefix.
        let mut mul_offset = vec![0usize; len];
        let mut mul_limit = vec![0usize; len];
        let mut mul_target: Vec<u32> = Vec::new();
        for ia in 0..len {
            let da: usize = exps[ia * dim..(ia + 1) * dim]
                .iter()
                .map(|&e| e as usize)
                .sum();
            let limit = deg_start[order - da + 1];
            mul_offset[ia] = mul_target.len();
            mul_limit[ia] = limit;
            for ib in 0..limit {
                let mut key = [0u8; MAX_DIM];
                for j in 0..dim {
                    key[j] = exps[ia * dim + j] + exps[ib * dim + j];
                }
                mul_target.push(rank[&key]);
            }
        }

        JetTable {
            dim,
            order,
            exps,
            deg_start,
            factorial,
            rank,
            mul_offset,
            mul_limit,
            mul_target,
        }
    }
}

fn fact(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Emit all exponent vectors of exact degree `d` over `scratch[pos..]`,
/// first coordinate descending — together with the outer degree loop this
/// yields graded-lex order.
fn emit_degree(d: usize, pos: usize, scratch: &mut Vec<u8>, out: &mut Vec<u8>) {
    if pos == scratch.len() - 1 {
        scratch[pos] = d as u8;
        out.extend_from_slice(scratch);
        return;
    }
    for v in (0..=d).rev() {
        scratch[pos] = v as u8;
        emit_degree(d - v, pos + 1, scratch, out);
    }
}

/// Global table cache. Bounded: at most `MAX_DIM * (MAX_ORDER + 1)` tables ever
/// get built and leaked.
pub fn table(dim: usize, order: usize) -> Result<&'static JetTable, JetError> {
    if dim == 0 || dim > MAX_DIM {
        return Err(JetError::BadDim(dim));
    }
    if order > MAX_ORDER {
        return Err(JetError::OrderTooHigh(order));
    }
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), &'static JetTable>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("jet table cache poisoned");
    Ok(guard
        .entry((dim, order))
        .or_insert_with(|| Box::leak(Box::new(JetTable::build(dim, order)))))
}

// ---------------------------------------------------------------------------
// Jet
// ---------------------------------------------------------------------------

/// Truncated Taylor expansion of a scalar function at a point.
#[derive(Clone)]
pub struct Jet {
    table: &'static JetTable,
    c: Vec<f64>,
}

impl std::fmt::Debug for Jet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Jet")
            .field("dim", &self.dim())
            .field("order", &self.order())
            .field("value", &self.value())
            .finish()
    }
}

impl Jet {
    pub fn zero(dim: usize, order: usize) -> Self {
        let table = table(dim, order).expect("jet shape out of range");
        Jet {
            table,
            c: vec![0.0; table.len()],
        }
    }

    pub fn constant(dim: usize, order: usize, v: f64) -> Self {
        let mut j = Jet::zero(dim, order);
        j.c[0] = v;
        j
    }

    /// The coordinate function `x_i`, expanded at `x0_i`.
    pub fn variable(dim: usize, order: usize, i: usize, x0_i: f64) -> Self {
        assert!(i < dim, "variable index {i} out of range for dim {dim}");
        let mut j = Jet::zero(dim, order);
        j.c[0] = x0_i;
        if order >= 1 {
            // linear block starts right after the constant; variables appear
            // first-coordinate-descending, so x_i sits at offset (dim - i).
            // Safer: look it up.
            let mut e = vec![0u8; dim];
            e[i] = 1;
            let k = j.table.index_of(&e).expect("linear index in table");
            j.c[k] = 1.0;
        }
        j
    }

    /// All coordinate jets at a base point.
    pub fn coords(order: usize, x0: &[f64]) -> Vec<Self> {
        (0..x0.len())
            .map(|i| Jet::variable(x0.len(), order, i, x0[i]))
            .collect()
    }

    pub fn from_coeffs(dim: usize, order: usize, c: Vec<f64>) -> Self {
        let table = table(dim, order).expect("jet shape out of range");
        assert_eq!(c.len(), table.len(), "coefficient count mismatch");
        Jet { table, c }
    }

    pub fn dim(&self) -> usize {
        self.table.dim
    }

    pub fn order(&self) -> usize {
        self.table.order
    }

    pub fn table(&self) -> &'static JetTable {
        self.table
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.c
    }

    pub fn value(&self) -> f64 {
        self.c[0]
    }

    /// Taylor-normalized coefficient for a multi-index (zero when `|alpha|` exceeds the order).
    pub fn coeff(&self, alpha: &[u8]) -> f64 {
        assert_eq!(alpha.len(), self.dim());
        self.table.index_of(alpha).map_or(0.0, |k| self.c[k])
    }

    /// The actual partial derivative `d^alpha f`, i.e. coefficient times `alpha!`.
    pub fn partial(&self, alpha: &[u8]) -> f64 {
        assert_eq!(alpha.len(), self.dim());
        self.table
            .index_of(alpha)
            .map_or(0.0, |k| self.c[k] * self.table.factorial(k))
    }

    pub fn set_coeff(&mut self, alpha: &[u8], v: f64) {
        let k = self
            .table
            .index_of(alpha)
            .expect("multi-index outside jet order");
        self.c[k] = v;
    }

    /// Copy truncated to a lower (or equal) order. Graded layout makes this a prefix copy.
    pub fn truncated(&self, order: usize) -> Jet {
        assert!(order <= self.order(), "truncated() cannot raise the order");
        let table = table(self.dim(), order).expect("jet shape out of range");
        Jet {
            table,
            c: self.c[..table.len()].to_vec(),
        }
    }

    /// Re-express the jet in a chart with more variables: variable `i` here
    /// becomes variable `i + offset` there, and the function is constant in
    /// the remaining coordinates. Used to lift spatial metrics onto a
    /// spacetime chart.
    pub fn embed(&self, dim: usize, order: usize, offset: usize) -> Result<Jet, JetError> {
        if offset + self.dim() > dim {
            return Err(JetError::BadDim(offset + self.dim()));
        }
        let out_table = table(dim, order)?;
        let mut out = Jet {
            table: out_table,
            c: vec![0.0; out_table.len()],
        };
        for (k, &v) in self.c.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            if self.table.degree(k) > order {
                break;
            }
            let mut key = [0u8; MAX_DIM];
            key[offset..offset + self.dim()].copy_from_slice(self.table.exp(k));
            out.c[out_table.rank[&key] as usize] = v;
        }
        Ok(out)
    }

    /// Partial derivative as a jet of one order less.
    pub fn derivative(&self, i: usize) -> Jet {
        assert!(i < self.dim());
        if self.order() == 0 {
            return Jet::zero(self.dim(), 0);
        }
        let out_table = table(self.dim(), self.order() - 1).expect("jet shape out of range");
        let mut out = vec![0.0; out_table.len()];
        let dim = self.dim();
        let mut key = [0u8; MAX_DIM];
        for (k, slot) in out.iter_mut().enumerate() {
            let beta = out_table.exp(k);
            key[..dim].copy_from_slice(beta);
            key[i] += 1;
            let src = self.table.rank[&key] as usize;
            *slot = self.c[src] * (beta[i] as f64 + 1.0);
            key[i] = 0;
            // clear only the touched entries; cheaper than re-zeroing MAX_DIM
            for j in 0..dim {
                key[j] = 0;
            }
        }
        Jet {
            table: out_table,
            c: out,
        }
    }

    pub fn scale(&self, s: f64) -> Jet {
        Jet {
            table: self.table,
            c: self.c.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add_scalar(&self, s: f64) -> Jet {
        let mut out = self.clone();
        out.c[0] += s;
        out
    }

    fn assert_same_shape(&self, other: &Jet) {
        assert!(
            std::ptr::eq(self.table, other.table),
            "jet shape mismatch: ({},{}) vs ({},{})",
            self.dim(),
            self.order(),
            other.dim(),
            other.order()
        );
    }

    /// Truncated product. Operands of different orders are aligned to the lower one.
    pub fn mul_jet(&self, other: &Jet) -> Jet {
        assert_eq!(self.dim(), other.dim(), "jet dimension mismatch");
        if self.order() != other.order() {
            let k = self.order().min(other.order());
            return self.truncated(k).mul_jet(&other.truncated(k));
        }
        let t = self.table;
        let mut out = vec![0.0; t.len()];
        for ia in 0..t.len() {
            let a = self.c[ia];
            if a == 0.0 {
                continue;
            }
            let lim = t.mul_limit[ia];
            let targets = &t.mul_target[t.mul_offset[ia]..t.mul_offset[ia] + lim];
            let rhs = &other.c[..lim];
            for (tb, b) in targets.iter().zip(rhs) {
                out[*tb as usize] += a * b;
            }
        }
        Jet {
            table: t,
            c: out,
        }
    }

    /// Evaluate the truncated polynomial at a displacement from the base point.
    pub fn eval_poly(&self, dx: &[f64]) -> f64 {
        assert_eq!(dx.len(), self.dim());
        let t = self.table;
        let mut acc = 0.0;
        for k in 0..t.len() {
            let mut m = self.c[k];
            if m == 0.0 {
                continue;
            }
            for (j, &e) in t.exp(k).iter().enumerate() {
                for _ in 0..e {
                    m *= dx[j];
                }
            }
            acc += m;
        }
        acc
    }

    /// Compose with a univariate analytic function given by its Taylor
    /// coefficients `series[k] = h^(k)(value)/k!` at the jet's value.
    /// Horner evaluation in the zero-constant part keeps every product truncated.
    pub fn compose_series(&self, series: &[f64]) -> Jet {
        assert!(series.len() >= self.order() + 1, "series too short");
        let mut w = self.clone();
        w.c[0] = 0.0;
        let k_max = self.order();
        let mut r = Jet::constant(self.dim(), self.order(), series[k_max]);
        for k in (0..k_max).rev() {
            r = r.mul_jet(&w);
            r.c[0] += series[k];
        }
        r
    }

    pub fn exp(&self) -> Jet {
        self.compose_series(&series_exp(self.value(), self.order()))
    }

    pub fn ln(&self) -> Result<Jet, JetError> {
        Ok(self.compose_series(&series_ln(self.value(), self.order())?))
    }

    pub fn sqrt(&self) -> Result<Jet, JetError> {
        Ok(self.compose_series(&series_pow(self.value(), 0.5, self.order())?))
    }

    pub fn recip(&self) -> Result<Jet, JetError> {
        if self.value() == 0.0 {
            return Err(JetError::Domain {
                op: "recip",
                value: 0.0,
            });
        }
        Ok(self.compose_series(&series_recip(self.value(), self.order())))
    }

    /// Real power. Integer exponents work for any nonzero value; fractional
    /// exponents require a positive value.
    pub fn powf(&self, p: f64) -> Result<Jet, JetError> {
        if p == p.trunc() && p.abs() <= 64.0 {
            return Ok(self.powi(p as i64));
        }
        Ok(self.compose_series(&series_pow(self.value(), p, self.order())?))
    }

    pub fn powi(&self, p: i64) -> Jet {
        if p < 0 {
            let inv = self.recip().expect("powi of a zero-valued jet");
            return inv.powi(-p);
        }
        let mut acc = Jet::constant(self.dim(), self.order(), 1.0);
        let mut base = self.clone();
        let mut e = p as u64;
        while e > 0 {
            if e & 1 == 1 {
                acc = acc.mul_jet(&base);
            }
            e >>= 1;
            if e > 0 {
                base = base.mul_jet(&base);
            }
        }
        acc
    }

    pub fn div_jet(&self, other: &Jet) -> Result<Jet, JetError> {
        Ok(self.mul_jet(&other.recip()?))
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.c.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

impl Add<&Jet> for &Jet {
    type Output = Jet;
    fn add(self, rhs: &Jet) -> Jet {
        self.assert_same_shape(rhs);
        Jet {
            table: self.table,
            c: self.c.iter().zip(&rhs.c).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub<&Jet> for &Jet {
    type Output = Jet;
    fn sub(self, rhs: &Jet) -> Jet {
        self.assert_same_shape(rhs);
        Jet {
            table: self.table,
            c: self.c.iter().zip(&rhs.c).map(|(a, b)| a - b).collect(),
        }
    }
}

impl Mul<&Jet> for &Jet {
    type Output = Jet;
    fn mul(self, rhs: &Jet) -> Jet {
        self.mul_jet(rhs)
    }
}

impl Mul<f64> for &Jet {
    type Output = Jet;
    fn mul(self, rhs: f64) -> Jet {
        self.scale(rhs)
    }
}

impl Neg for &Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}

/// Substitute `inners` into `outer`: the jet of `f(g_1(z), ..., g_m(z))`.
/// The base point of `outer` must be the tuple of inner values; the caller is
/// responsible for that pairing (constructors in the metrics layer do it).
pub fn compose_multi(outer: &Jet, inners: &[Jet]) -> Jet {
    assert_eq!(outer.dim(), inners.len(), "inner count != outer dimension");
    let dim_z = inners[0].dim();
    let order = inners
        .iter()
        .map(|j| j.order())
        .min()
        .unwrap()
        .min(outer.order());
    let w: Vec<Jet> = inners
        .iter()
        .map(|g| {
            let mut t = g.truncated(order);
            t.c[0] = 0.0;
            t
        })
        .collect();

    let ot = outer.table;
    // Monomial cache over the outer index set: each monomial extends an
    // already-built one by a single variable, so it costs one product.
    let used = table(outer.dim(), order.min(outer.order()))
        .expect("jet shape out of range");
    let mut monomials: Vec<Jet> = Vec::with_capacity(used.len());
    monomials.push(Jet::constant(dim_z, order, 1.0));
    let mut key = [0u8; MAX_DIM];
    let mut acc = Jet::constant(dim_z, order, outer.value());
    for k in 1..used.len() {
        let e = used.exp(k);
        let i = e.iter().position(|&v| v > 0).expect("nonconstant index");
        key[..e.len()].copy_from_slice(e);
        key[i] -= 1;
        let prev = used.rank[&key] as usize;
        for j in 0..e.len() {
            key[j] = 0;
        }
        let mono = monomials[prev].mul_jet(&w[i]);
        let c = outer.c[ot.index_of(e).expect("index present in outer")];
        if c != 0.0 {
            acc = &acc + &mono.scale(c);
        }
        monomials.push(mono);
    }
    acc
}

// ---------------------------------------------------------------------------
// Univariate Taylor series of the library functions
// ---------------------------------------------------------------------------

pub fn series_exp(v: f64, order: usize) -> Vec<f64> {
    let e = v.exp();
    let mut s = Vec::with_capacity(order + 1);
    let mut term = e;
    s.push(term);
    for k in 1..=order {
        term /= k as f64;
        s.push(term);
    }
    s
}

pub fn series_ln(v: f64, order: usize) -> Result<Vec<f64>, JetError> {
    if v <= 0.0 {
        return Err(JetError::Domain {
            op: "ln",
            value: v,
        });
    }
    let mut s = Vec::with_capacity(order + 1);
    s.push(v.ln());
    // d^k ln / k! = (-1)^{k-1} / (k v^k)
    let mut p = 1.0;
    for k in 1..=order {
        p /= v;
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        s.push(sign * p / k as f64);
    }
    Ok(s)
}

pub fn series_recip(v: f64, order: usize) -> Vec<f64> {
    // 1/(v + t) = sum (-1)^k t^k / v^{k+1}
    let mut s = Vec::with_capacity(order + 1);
    let mut term = 1.0 / v;
    s.push(term);
    for _ in 1..=order {
        term *= -1.0 / v;
        s.push(term);
    }
    s
}

pub fn series_pow(v: f64, p: f64, order: usize) -> Result<Vec<f64>, JetError> {
    if v <= 0.0 {
        return Err(JetError::Domain {
            op: "pow",
            value: v,
        });
    }
    // binom(p, k) v^{p-k}
    let mut s = Vec::with_capacity(order + 1);
    let mut term = v.powf(p);
    s.push(term);
    for k in 1..=order {
        term *= (p - (k as f64 - 1.0)) / k as f64 / v;
        s.push(term);
    }
    Ok(s)
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

/// Central finite differences, kept deliberately independent of the jet code:
/// plain stencils on function values. Used to cross-examine jet coefficients.
pub mod fd {
    /// Default step for a given total differentiation order: balances the
    /// truncation error of the stencils against roundoff in double precision.
    pub fn default_step(total_order: usize, x: &[f64]) -> f64 {
        let scale = x.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        // Calibrated so stencil truncation error and f64 roundoff amplification
        // (sum|w| * eps / h^m) balance near each order's achievable floor.
        let base = match total_order {
            0 | 1 => 1e-4,
            2 => 3e-4,
            3 => 3e-3,
            4 => 7e-3,
            _ => 2e-2,
        };
        base * scale
    }

    /// Offsets and weights of the central stencil for the m-th derivative.
    /// Second-order stencils for m <= 2, fourth-order for m >= 3 (the higher
    /// orders are where truncation error actually bites).
    fn stencil(m: usize, high_accuracy: bool) -> (&'static [i32], &'static [f64]) {
        match (m, high_accuracy) {
            (1, false) => (&[-1, 1], &[-0.5, 0.5]),
            (1, true) => (
                &[-2, -1, 1, 2],
                &[1.0 / 12.0, -8.0 / 12.0, 8.0 / 12.0, -1.0 / 12.0],
            ),
            (2, false) => (&[-1, 0, 1], &[1.0, -2.0, 1.0]),
            (2, true) => (
                &[-2, -1, 0, 1, 2],
                &[
                    -1.0 / 12.0,
                    16.0 / 12.0,
                    -30.0 / 12.0,
                    16.0 / 12.0,
                    -1.0 / 12.0,
                ],
            ),
            (3, _) => (
                &[-3, -2, -1, 1, 2, 3],
                &[
                    1.0 / 8.0,
                    -1.0,
                    13.0 / 8.0,
                    -13.0 / 8.0,
                    1.0,
                    -1.0 / 8.0,
                ],
            ),
            (4, _) => (
                &[-3, -2, -1, 0, 1, 2, 3],
                &[
                    -1.0 / 6.0,
                    2.0,
                    -13.0 / 2.0,
                    28.0 / 3.0,
                    -13.0 / 2.0,
                    2.0,
                    -1.0 / 6.0,
                ],
            ),
            (5, _) => (
                &[-4, -3, -2, -1, 1, 2, 3, 4],
                &[
                    1.0 / 6.0,
                    -3.0 / 2.0,
                    13.0 / 3.0,
                    -29.0 / 6.0,
                    29.0 / 6.0,
                    -13.0 / 3.0,
                    3.0 / 2.0,
                    -1.0 / 6.0,
                ],
            ),
            _ => panic!("fd stencil only provided for derivative orders 1..=5"),
        }
    }

    /// `d^alpha f` at `x` by nested central differences. `step` overrides the
    /// default per-order step. Mixed indices nest stencils direction by direction.
    pub fn fd_derivative<F: FnMut(&[f64]) -> f64>(
        f: &mut F,
        x: &[f64],
        alpha: &[usize],
        step: Option<f64>,
    ) -> f64 {
        let total: usize = alpha.iter().sum();
        if total == 0 {
            return f(x);
        }
        assert!(total <= 5, "fd oracle supports |alpha| <= 5");
        let h = step.unwrap_or_else(|| default_step(total, x));
        let high = total >= 3;
        let mut point = x.to_vec();
        let mut alpha = alpha.to_vec();
        nested(f, &mut point, &mut alpha, h, high)
    }

    fn nested<F: FnMut(&[f64]) -> f64>(
        f: &mut F,
        x: &mut Vec<f64>,
        alpha: &mut Vec<usize>,
        h: f64,
        high: bool,
    ) -> f64 {
        let dir = match alpha.iter().position(|&a| a > 0) {
            Some(i) => i,
            None => return f(x),
        };
        let m = alpha[dir];
        alpha[dir] = 0;
        let (offsets, weights) = stencil(m, high);
        let x0 = x[dir];
        let mut acc = 0.0;
        for (&o, &w) in offsets.iter().zip(weights) {
            x[dir] = x0 + o as f64 * h;
            acc += w * nested(f, x, alpha, h, high);
        }
        x[dir] = x0;
        alpha[dir] = m;
        acc / h.powi(m as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn jet_of<F: Fn(&Jet, &Jet) -> Jet>(f: F, x: f64, y: f64, order: usize) -> Jet {
        let xs = Jet::coords(order, &[x, y]);
        f(&xs[0], &xs[1])
    }

    #[test]
    fn enumeration_counts_and_rank_roundtrip() {
        for dim in 1..=5 {
            for order in 0..=4 {
                let t = table(dim, order).unwrap();
                // C(dim + order, order)
                let expect: usize = {
                    let mut num = 1usize;
                    let mut den = 1usize;
                    for k in 1..=order {
                        num *= dim + k;
                        den *= k;
                    }
                    num / den
                };
                assert_eq!(t.len(), expect, "dim {dim} order {order}");
                for k in 0..t.len() {
                    assert_eq!(t.index_of(t.exp(k)), Some(k));
                }
                // graded: degrees never decrease
                for k in 1..t.len() {
                    assert!(t.degree(k) >= t.degree(k - 1));
                }
            }
        }
    }

    #[test]
    fn polynomial_jet_coefficients_by_hand() {
        // f(x, y) = x^2 y at (1, 2): d_x = 2xy = 4, d_y = x^2 = 1,
        // c_(2,0) = y = 2, c_(1,1) = 2x = 2, c_(2,1) = 1 (after /1!), rest 0.
        let j = jet_of(|x, y| &(x * x) * y, 1.0, 2.0, 3);
        assert_relative_eq!(j.value(), 2.0, epsilon = 1e-15);
        assert_relative_eq!(j.coeff(&[1, 0]), 4.0, epsilon = 1e-15);
        assert_relative_eq!(j.coeff(&[0, 1]), 1.0, epsilon = 1e-15);
        assert_relative_eq!(j.coeff(&[2, 0]), 2.0, epsilon = 1e-15);
        assert_relative_eq!(j.coeff(&[1, 1]), 2.0, epsilon = 1e-15);
        assert_relative_eq!(j.coeff(&[2, 1]), 1.0, epsilon = 1e-15);
        assert_relative_eq!(j.coeff(&[3, 0]), 0.0, epsilon = 1e-15);
        assert_relative_eq!(j.partial(&[2, 1]), 2.0, epsilon = 1e-15);
    }

    /// Brute-force truncated product, written against the exponent vectors
    /// directly — this is the independent oracle for `mul_jet`.
    fn mul_brute(a: &Jet, b: &Jet) -> Jet {
        let t = a.table();
        let mut out = Jet::zero(a.dim(), a.order());
        for ia in 0..t.len() {
            for ib in 0..t.len() {
                let mut alpha = vec![0u8; a.dim()];
                let mut deg = 0usize;
                for j in 0..a.dim() {
                    alpha[j] = t.exp(ia)[j] + t.exp(ib)[j];
                    deg += alpha[j] as usize;
                }
                if deg > a.order() {
                    continue;
                }
                let k = t.index_of(&alpha).unwrap();
                out.c[k] += a.coeffs()[ia] * b.coeffs()[ib];
            }
        }
        out
    }

    #[test]
    fn product_matches_bruteforce_convolution() {
        // deterministic pseudo-random coefficients
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for (dim, order) in [(2, 4), (3, 3), (5, 4), (4, 5)] {
            let t = table(dim, order).unwrap();
            let a = Jet::from_coeffs(dim, order, (0..t.len()).map(|_| next()).collect());
            let b = Jet::from_coeffs(dim, order, (0..t.len()).map(|_| next()).collect());
            let fast = a.mul_jet(&b);
            let slow = mul_brute(&a, &b);
            for k in 0..t.len() {
                assert_relative_eq!(fast.coeffs()[k], slow.coeffs()[k], epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn truncation_commutes_with_product() {
        let xs = Jet::coords(4, &[0.7, -0.3, 1.1]);
        let f = &(&xs[0] * &xs[1]).exp() + &xs[2];
        let g = &(&xs[2] * &xs[2]) - &xs[0];
        let full = f.mul_jet(&g).truncated(2);
        let cut = f.truncated(2).mul_jet(&g.truncated(2));
        for k in 0..full.coeffs().len() {
            assert_relative_eq!(full.coeffs()[k], cut.coeffs()[k], epsilon = 1e-13);
        }
    }

    #[test]
    fn exp_ln_roundtrip_and_known_series() {
        let xs = Jet::coords(5, &[0.4]);
        let f = xs[0].exp();
        // exp expanded at 0.4: coefficients e^{0.4}/k!
        for k in 0..=5 {
            let expect = 0.4_f64.exp() / fact(k);
            assert_relative_eq!(f.coeffs()[k], expect, epsilon = 1e-14);
        }
        let back = f.ln().unwrap();
        assert_relative_eq!(back.coeffs()[0], 0.4, epsilon = 1e-13);
        assert_relative_eq!(back.coeffs()[1], 1.0, epsilon = 1e-13);
        for k in 2..=5 {
            assert_relative_eq!(back.coeffs()[k], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn sqrt_powi_recip_consistency() {
        let xs = Jet::coords(4, &[1.3, -0.2]);
        let g = &(&(&xs[0] * &xs[0]) + &(&xs[1] * &xs[1])).add_scalar(0.5);
        let s = g.sqrt().unwrap();
        let s2 = s.mul_jet(&s);
        for k in 0..g.coeffs().len() {
            assert_relative_eq!(s2.coeffs()[k], g.coeffs()[k], epsilon = 1e-12);
        }
        let inv = g.recip().unwrap();
        let one = g.mul_jet(&inv);
        assert_relative_eq!(one.value(), 1.0, epsilon = 1e-13);
        for k in 1..one.coeffs().len() {
            assert_relative_eq!(one.coeffs()[k], 0.0, epsilon = 1e-12);
        }
        let p = g.powf(-3.0).unwrap();
        let q = inv.powi(3);
        for k in 0..p.coeffs().len() {
            assert_relative_eq!(p.coeffs()[k], q.coeffs()[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn mixed_partials_commute() {
        let xs = Jet::coords(5, &[0.9, 0.4, -0.7]);
        let f = (&(&xs[0] * &xs[1]) + &(&xs[2] * &xs[2])).exp();
        let fxy = f.derivative(0).derivative(1);
        let fyx = f.derivative(1).derivative(0);
        for k in 0..fxy.coeffs().len() {
            assert_relative_eq!(fxy.coeffs()[k], fyx.coeffs()[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn compose_multi_against_direct_expansion() {
        // f(u, v) = exp(u) * v at (u0, v0); u = x^2 + y, v = x - y at (0.3, 0.8)
        let z0 = [0.3, 0.8];
        let zs = Jet::coords(4, &z0);
        let u = &(&zs[0] * &zs[0]) + &zs[1];
        let v = &zs[0] - &zs[1];
        let us = Jet::coords(4, &[u.value(), v.value()]);
        let outer = &us[0].exp() * &us[1];
        let composed = compose_multi(&outer, &[u.clone(), v.clone()]);
        let direct = &(&(&zs[0] * &zs[0]) + &zs[1]).exp() * &(&zs[0] - &zs[1]);
        for k in 0..composed.coeffs().len() {
            assert_relative_eq!(composed.coeffs()[k], direct.coeffs()[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn eval_poly_tracks_function_nearby() {
        let x0 = [1.2, 0.5];
        let xs = Jet::coords(5, &x0);
        let f = (&(&xs[0] * &xs[0]) + &(&xs[1] * &xs[1])).sqrt().unwrap();
        let dx = [4e-3, -5e-3];
        let exact = ((x0[0] + dx[0]).powi(2) + (x0[1] + dx[1]).powi(2)).sqrt();
        assert_relative_eq!(f.eval_poly(&dx), exact, epsilon = 1e-12);
    }

    // ---- finite-difference oracle ----

    #[test]
    fn fd_first_derivative_of_square() {
        // worked example pinned up front: d/dx x^2 at x = 3, step 1e-4
        let mut f = |x: &[f64]| x[0] * x[0];
        let d = fd::fd_derivative(&mut f, &[3.0], &[1], Some(1e-4));
        assert!((d - 6.0).abs() < 1e-7, "got {d}");
    }

    #[test]
    fn fd_matches_closed_forms_to_high_order() {
        let mut f = |x: &[f64]| (x[0] * x[1]).sin() + (x[0] * x[0] * x[1]).exp() * 0.1;
        let x: [f64; 2] = [0.6, -0.4];
        let closed = |a: usize, b: usize| -> f64 {
            // differentiate via jets only to *generate* expected values is
            // forbidden here; use hand closed forms for a few indices instead.
            let (u, v) = (x[0], x[1]);
            match (a, b) {
                (1, 0) => v * (u * v).cos() + 0.1 * (u * u * v).exp() * 2.0 * u * v,
                (0, 1) => u * (u * v).cos() + 0.1 * (u * u * v).exp() * u * u,
                (1, 1) => {
                    (u * v).cos() - u * v * (u * v).sin()
                        + 0.1 * (u * u * v).exp() * (2.0 * u + 2.0 * u * u * u * v)
                }
                _ => unreachable!(),
            }
        };
        for (alpha, expect) in [
            ([1usize, 0], closed(1, 0)),
            ([0, 1], closed(0, 1)),
            ([1, 1], closed(1, 1)),
        ] {
            let d = fd::fd_derivative(&mut f, &x, &alpha, None);
            assert_relative_eq!(d, expect, epsilon = 1e-7, max_relative = 1e-7);
        }
    }

    #[test]
    fn jet_coefficients_agree_with_fd_oracle() {
        // The oracle side is fixed first: plain stencils on the closed-form
        // function below, steps from fd::default_step. The jet side must meet it.
        let func = |x: &[f64]| (1.0 + x[0] * x[0] + 0.5 * x[1] * x[2]).powf(-1.5) * (0.3 * x[2]).exp();
        let x0 = [0.8, -0.5, 1.1];
        let xs = Jet::coords(4, &x0);
        let base = &(&(&xs[0] * &xs[0]).add_scalar(1.0) + &(&xs[1] * &xs[2]).scale(0.5))
            .powf(-1.5)
            .unwrap();
        let j = base.mul_jet(&xs[2].scale(0.3).exp());
        let t = j.table();
        for k in 0..t.len() {
            let alpha: Vec<usize> = t.exp(k).iter().map(|&e| e as usize).collect();
            if alpha.iter().sum::<usize>() > 4 {
                continue;
            }
            let mut f = func;
            let fd_val = fd::fd_derivative(&mut f, &x0, &alpha, None);
            let jet_val = j.coeffs()[k] * t.factorial(k);
            let tol = 1e-6 * jet_val.abs().max(1.0);
            assert!(
                (fd_val - jet_val).abs() < tol,
                "alpha {alpha:?}: fd {fd_val} vs jet {jet_val}"
            );
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn small_coeffs(len: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(-2.0_f64..2.0, len)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn ring_axioms(a in small_coeffs(35), b in small_coeffs(35), c in small_coeffs(35)) {
                // dim 3 order 3 has C(6,3) = 20 coefficients; take prefixes
                let t = table(3, 3).unwrap();
                let n = t.len();
                let ja = Jet::from_coeffs(3, 3, a[..n].to_vec());
                let jb = Jet::from_coeffs(3, 3, b[..n].to_vec());
                let jc = Jet::from_coeffs(3, 3, c[..n].to_vec());
                let ab = ja.mul_jet(&jb);
                let ba = jb.mul_jet(&ja);
                let assoc_l = ab.mul_jet(&jc);
                let assoc_r = ja.mul_jet(&jb.mul_jet(&jc));
                let distrib_l = ja.mul_jet(&(&jb + &jc));
                let distrib_r = &ja.mul_jet(&jb) + &ja.mul_jet(&jc);
                for k in 0..n {
                    prop_assert!((ab.coeffs()[k] - ba.coeffs()[k]).abs() < 1e-12);
                    prop_assert!((assoc_l.coeffs()[k] - assoc_r.coeffs()[k]).abs() < 1e-11);
                    prop_assert!((distrib_l.coeffs()[k] - distrib_r.coeffs()[k]).abs() < 1e-11);
                }
            }

            #[test]
            fn derivative_is_linear(a in small_coeffs(35), b in small_coeffs(35), s in -3.0_f64..3.0) {
                let t = table(3, 3).unwrap();
                let n = t.len();
                let ja = Jet::from_coeffs(3, 3, a[..n].to_vec());
                let jb = Jet::from_coeffs(3, 3, b[..n].to_vec());
                let lhs = (&ja + &jb.scale(s)).derivative(1);
                let rhs = &ja.derivative(1) + &jb.derivative(1).scale(s);
                for k in 0..lhs.coeffs().len() {
                    prop_assert!((lhs.coeffs()[k] - rhs.coeffs()[k]).abs() < 1e-12);
                }
            }
        }
    }
}
