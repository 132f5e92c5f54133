//! Curvature from a metric presented as jets at a point.
//!
//! A [`MetricJet`] is the symmetric matrix of component jets around a base
//! point. [`curvature_at`] turns it into a [`CurvaturePack`]: Christoffel
//! symbols, Riemann/Ricci/scalar curvature, Schouten and Weyl, everything as
//! jets so that covariant derivatives of curvature are still exact
//! differentiations of the truncated Taylor data, never finite differences
//! across points.
//!
//! Derivative budget: Christoffel spends one jet order, Riemann two. A metric
//! of order K yields curvature of order K−2, so K ≥ 4 when the fourth-order
//! operators downstream need the Laplacian of the scalar curvature, and K = 5
//! when a divergence of a fourth-order tensor is wanted on top.
//!
//! Sign conventions, pinned by tests: `R^i_{jkl} = dx^i(R(∂_k,∂_l)∂_j)`,
//! Ricci is the contraction `R_{jl} = R^k_{jkl}` (unit round 2-sphere gets
//! scalar curvature +2), and the Laplacian has negative spectrum (`Δ|x|² =
//! 2n` on flat space).

use crate::jets::{Jet, JetError};
use crate::tensors::{PointMetric, PointTensor, TensorError, Variance};
use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error(transparent)]
    Jet(#[from] JetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("metric jets are not symmetric: component ({i},{j}) differs from ({j},{i}) by {defect:e}")]
    Asymmetric { i: usize, j: usize, defect: f64 },
    #[error("metric value matrix is degenerate at the base point (scaled |det| < 1e-13)")]
    Degenerate,
    #[error("jet order {have} too low: this operation needs {need}")]
    OrderTooLow { need: usize, have: usize },
    #[error("operation needs a Riemannian metric, got signature ({0},{1})")]
    NotRiemannian(usize, usize),
    #[error("component list of length {0} does not match dimension {1}")]
    BadShape(usize, usize),
    #[error("base point |x| = {have} is not on the sphere of radius {want}")]
    OffSphere { want: f64, have: f64 },
    #[error("coordinate sphere of radius {0} is empty or degenerate")]
    BadRadius(f64),
}

fn mat(n: usize, i: usize, j: usize) -> usize {
    i * n + j
}

fn idx3(n: usize, a: usize, b: usize, c: usize) -> usize {
    (a * n + b) * n + c
}

fn idx4(n: usize, a: usize, b: usize, c: usize, d: usize) -> usize {
    ((a * n + b) * n + c) * n + d
}

// ---------------------------------------------------------------------------
// MetricJet
// ---------------------------------------------------------------------------

/// Symmetric n×n matrix of jets around a base point, with the value-level
/// metric (inverse, determinant, signature) precomputed.
#[derive(Debug, Clone)]
pub struct MetricJet {
    dim: usize,
    order: usize,
    base: Vec<f64>,
    comps: Vec<Jet>,
    value: PointMetric,
    signature: (usize, usize),
}

impl MetricJet {
    pub fn new(base: Vec<f64>, comps: Vec<Jet>) -> Result<Self, GeomError> {
        let n = base.len();
        if comps.len() != n * n || n == 0 {
            return Err(GeomError::BadShape(comps.len(), n));
        }
        let order = comps[0].order();
        for c in &comps {
            if c.dim() != n || c.order() != order {
                return Err(GeomError::BadShape(comps.len(), n));
            }
        }
        // per-coefficient symmetry
        let mut scale = 0.0_f64;
        for c in &comps {
            scale = scale.max(c.max_abs_coeff());
        }
        let tol = 1e-12 * scale.max(1.0);
        for i in 0..n {
            for j in (i + 1)..n {
                let a = &comps[mat(n, i, j)];
                let b = &comps[mat(n, j, i)];
                for (ca, cb) in a.coeffs().iter().zip(b.coeffs()) {
                    let defect = (ca - cb).abs();
                    if defect > tol {
                        return Err(GeomError::Asymmetric { i, j, defect });
                    }
                }
            }
        }
        let values: Vec<f64> = comps.iter().map(|c| c.value()).collect();
        let vscale = values.iter().fold(0.0_f64, |s, v| s.max(v.abs())).max(1e-30);
        let m = DMatrix::from_row_slice(n, n, &values).unscale(vscale);
        if m.determinant().abs() < 1e-13 {
            return Err(GeomError::Degenerate);
        }
        let value = PointMetric::new(n, values).map_err(|_| GeomError::Degenerate)?;
        // signature from the symmetric eigendecomposition of the value matrix
        let eig = m.symmetric_eigen();
        let mut pos = 0;
        let mut neg = 0;
        for ev in eig.eigenvalues.iter() {
            if *ev > 0.0 {
                pos += 1;
            } else {
                neg += 1;
            }
        }
        Ok(MetricJet {
            dim: n,
            order,
            base,
            comps,
            value,
            signature: (pos, neg),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn base(&self) -> &[f64] {
        &self.base
    }

    pub fn component(&self, i: usize, j: usize) -> &Jet {
        &self.comps[mat(self.dim, i, j)]
    }

    pub fn components(&self) -> &[Jet] {
        &self.comps
    }

    pub fn value_metric(&self) -> &PointMetric {
        &self.value
    }

    /// (positive, negative) eigenvalue counts of the value matrix.
    pub fn signature(&self) -> (usize, usize) {
        self.signature
    }

    pub fn is_riemannian(&self) -> bool {
        self.signature.1 == 0
    }

    pub fn truncated(&self, order: usize) -> MetricJet {
        assert!(order <= self.order);
        MetricJet {
            dim: self.dim,
            order,
            base: self.base.clone(),
            comps: self.comps.iter().map(|c| c.truncated(order)).collect(),
            value: self.value.clone(),
            signature: self.signature,
        }
    }

    /// Inverse metric as jets of the given order. The value-level inverse
    /// seeds a Newton iteration H ← H(2I − GH), which doubles the correct
    /// order each step, so ceil(log2(order+1)) matrix products suffice and the
    /// coefficients are exact to the requested order.
    pub fn inverse_jets(&self, order: usize) -> Result<Vec<Jet>, GeomError> {
        if order > self.order {
            return Err(GeomError::OrderTooLow {
                need: order,
                have: self.order,
            });
        }
        let n = self.dim;
        let g: Vec<Jet> = self.comps.iter().map(|c| c.truncated(order)).collect();
        let mut h: Vec<Jet> = (0..n * n)
            .map(|k| Jet::constant(n, order, self.value.upper(k / n, k % n)))
            .collect();
        let mut correct = 0usize; // exact through this order
        while correct < order {
            let gh = matmul_jets(&g, &h, n);
            let mut e: Vec<Jet> = gh.iter().map(|j| j.scale(-1.0)).collect();
            for i in 0..n {
                e[mat(n, i, i)] = e[mat(n, i, i)].add_scalar(2.0);
            }
            h = matmul_jets(&h, &e, n);
            correct = 2 * correct + 1;
        }
        Ok(h)
    }
}

fn matmul_jets(a: &[Jet], b: &[Jet], n: usize) -> Vec<Jet> {
    let order = a[0].order().min(b[0].order());
    let dim = a[0].dim();
    let mut out = vec![Jet::zero(dim, order); n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = Jet::zero(dim, order);
            for k in 0..n {
                acc = &acc + &a[mat(n, i, k)].mul_jet(&b[mat(n, k, j)]).truncated(order);
            }
            out[mat(n, i, j)] = acc;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Tensors of jets
// ---------------------------------------------------------------------------

/// A tensor whose components are jets: the form curvature and its covariant
/// derivatives take while they are still being differentiated. `value()`
/// collapses it to a [`PointTensor`] at the base point.
#[derive(Debug, Clone)]
pub struct JetTensor {
    dim: usize,
    variance: Vec<Variance>,
    comps: Vec<Jet>,
}

impl JetTensor {
    pub fn new(dim: usize, variance: Vec<Variance>, comps: Vec<Jet>) -> Result<Self, GeomError> {
        if comps.len() != dim.pow(variance.len() as u32) {
            return Err(GeomError::BadShape(comps.len(), dim));
        }
        Ok(JetTensor {
            dim,
            variance,
            comps,
        })
    }

    pub fn zeros(dim: usize, order: usize, variance: Vec<Variance>) -> Self {
        let len = dim.pow(variance.len() as u32);
        JetTensor {
            dim,
            variance,
            comps: vec![Jet::zero(dim, order); len],
        }
    }

    pub fn scalar(j: Jet) -> Self {
        JetTensor {
            dim: j.dim(),
            variance: Vec::new(),
            comps: vec![j],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.variance.len()
    }

    pub fn order(&self) -> usize {
        self.comps[0].order()
    }

    pub fn variance(&self) -> &[Variance] {
        &self.variance
    }

    pub fn comps(&self) -> &[Jet] {
        &self.comps
    }

    fn flatten(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.rank());
        idx.iter().fold(0, |acc, &i| acc * self.dim + i)
    }

    pub fn get(&self, idx: &[usize]) -> &Jet {
        &self.comps[self.flatten(idx)]
    }

    pub fn set(&mut self, idx: &[usize], j: Jet) {
        let k = self.flatten(idx);
        self.comps[k] = j;
    }

    pub fn value(&self) -> PointTensor {
        let mut idx = vec![0usize; self.rank()];
        let mut out = PointTensor::zeros(self.dim.max(1), self.variance.clone())
            .expect("rank already validated");
        for (flat, c) in self.comps.iter().enumerate() {
            unflatten(self.dim, flat, &mut idx);
            out.set(&idx, c.value());
        }
        out
    }

    pub fn truncated(&self, order: usize) -> JetTensor {
        JetTensor {
            dim: self.dim,
            variance: self.variance.clone(),
            comps: self.comps.iter().map(|c| c.truncated(order)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> JetTensor {
        JetTensor {
            dim: self.dim,
            variance: self.variance.clone(),
            comps: self.comps.iter().map(|c| c.scale(s)).collect(),
        }
    }

    pub fn add(&self, other: &JetTensor) -> Result<JetTensor, GeomError> {
        if self.variance != other.variance || self.dim != other.dim {
            return Err(GeomError::BadShape(other.comps.len(), self.dim));
        }
        let order = self.order().min(other.order());
        let comps = self
            .comps
            .iter()
            .zip(&other.comps)
            .map(|(a, b)| &a.truncated(order) + &b.truncated(order))
            .collect();
        Ok(JetTensor {
            dim: self.dim,
            variance: self.variance.clone(),
            comps,
        })
    }

    pub fn max_abs_value(&self) -> f64 {
        self.comps.iter().fold(0.0_f64, |m, c| m.max(c.value().abs()))
    }
}

fn unflatten(dim: usize, mut flat: usize, idx: &mut [usize]) {
    for slot in (0..idx.len()).rev() {
        idx[slot] = flat % dim;
        flat /= dim;
    }
}

// ---------------------------------------------------------------------------
// CurvaturePack
// ---------------------------------------------------------------------------

/// Everything curvature at one point, all jets. Orders: metric K, Christoffel
/// K−1, curvature K−2.
pub struct CurvaturePack {
    dim: usize,
    base: Vec<f64>,
    metric_order: usize,
    metric: Vec<Jet>,
    value: PointMetric,
    /// g^{ij}, order K−1
    inverse: Vec<Jet>,
    /// Γ^c_{ij} at [idx3(c,i,j)], order K−1
    christoffel: Vec<Jet>,
    /// R^i_{jkl} at [idx4(i,j,k,l)], order K−2
    riemann_up: Vec<Jet>,
    /// R_{ijkl} = g_{im} R^m_{jkl}
    riemann_down: Vec<Jet>,
    /// R_{jl} = R^k_{jkl}
    ricci: Vec<Jet>,
    scalar: Jet,
    /// (Ric − R g / (2(n−1))) / (n−2); None for n < 3
    schouten: Option<Vec<Jet>>,
    /// W_{ijkl}; None for n < 3
    weyl: Option<Vec<Jet>>,
}

/// Compute the full curvature pack. Needs K ≥ 2.
pub fn curvature_at(metric: &MetricJet) -> Result<CurvaturePack, GeomError> {
    let n = metric.dim();
    let k = metric.order();
    if k < 2 {
        return Err(GeomError::OrderTooLow { need: 2, have: k });
    }
    let k1 = k - 1;
    let k2 = k - 2;
    let inverse = metric.inverse_jets(k1)?;
    let christoffel = christoffel_jets(metric, &inverse, k1);

    // ∂_d Γ^c_{ab}
    let mut dgamma = vec![Jet::zero(n, k2); n * n * n * n];
    for c in 0..n {
        for a in 0..n {
            for b in a..n {
                let g = &christoffel[idx3(n, c, a, b)];
                for d in 0..n {
                    let dg = g.derivative(d);
                    dgamma[idx4(n, d, c, a, b)] = dg.clone();
                    if a != b {
                        dgamma[idx4(n, d, c, b, a)] = dg;
                    }
                }
            }
        }
    }
    let gamma_t: Vec<Jet> = christoffel.iter().map(|g| g.truncated(k2)).collect();

    let mut riemann_up = vec![Jet::zero(n, k2); n * n * n * n];
    for i in 0..n {
        for j in 0..n {
            for kk in 0..n {
                for l in (kk + 1)..n {
                    // R^i_{jkl} = ∂_k Γ^i_{lj} − ∂_l Γ^i_{kj} + Γ^i_{km}Γ^m_{lj} − Γ^i_{lm}Γ^m_{kj}
                    let mut acc =
                        &dgamma[idx4(n, kk, i, l, j)] - &dgamma[idx4(n, l, i, kk, j)];
                    for m in 0..n {
                        acc = &acc
                            + &gamma_t[idx3(n, i, kk, m)].mul_jet(&gamma_t[idx3(n, m, l, j)]);
                        acc = &acc
                            - &gamma_t[idx3(n, i, l, m)].mul_jet(&gamma_t[idx3(n, m, kk, j)]);
                    }
                    riemann_up[idx4(n, i, j, l, kk)] = acc.scale(-1.0);
                    riemann_up[idx4(n, i, j, kk, l)] = acc;
                }
            }
        }
    }
    drop(dgamma);

    let metric_t: Vec<Jet> = metric.components().iter().map(|c| c.truncated(k2)).collect();
    let mut riemann_down = vec![Jet::zero(n, k2); n * n * n * n];
    for i in 0..n {
        for j in 0..n {
            for kk in 0..n {
                for l in (kk + 1)..n {
                    let mut acc = Jet::zero(n, k2);
                    for m in 0..n {
                        acc = &acc
                            + &metric_t[mat(n, i, m)].mul_jet(&riemann_up[idx4(n, m, j, kk, l)]);
                    }
                    riemann_down[idx4(n, i, j, l, kk)] = acc.scale(-1.0);
                    riemann_down[idx4(n, i, j, kk, l)] = acc;
                }
            }
        }
    }

    let mut ricci = vec![Jet::zero(n, k2); n * n];
    for j in 0..n {
        for l in 0..n {
            let mut acc = Jet::zero(n, k2);
            for kk in 0..n {
                acc = &acc + &riemann_up[idx4(n, kk, j, kk, l)];
            }
            ricci[mat(n, j, l)] = acc;
        }
    }

    let inverse_t: Vec<Jet> = inverse.iter().map(|c| c.truncated(k2)).collect();
    let mut scalar = Jet::zero(n, k2);
    for j in 0..n {
        for l in 0..n {
            scalar = &scalar + &inverse_t[mat(n, j, l)].mul_jet(&ricci[mat(n, j, l)]);
        }
    }

    let (schouten, weyl) = if n >= 3 {
        let nf = n as f64;
        let mut s = vec![Jet::zero(n, k2); n * n];
        for j in 0..n {
            for l in 0..n {
                let trace_part = scalar
                    .mul_jet(&metric_t[mat(n, j, l)])
                    .scale(1.0 / (2.0 * (nf - 1.0)));
                s[mat(n, j, l)] =
                    (&ricci[mat(n, j, l)] - &trace_part).scale(1.0 / (nf - 2.0));
            }
        }
        // W = Riem − S ⊘ g (Kulkarni–Nomizu)
        let mut w = vec![Jet::zero(n, k2); n * n * n * n];
        for i in 0..n {
            for j in 0..n {
                for kk in 0..n {
                    for l in 0..n {
                        let kn = &(&s[mat(n, i, kk)].mul_jet(&metric_t[mat(n, j, l)])
                            - &s[mat(n, i, l)].mul_jet(&metric_t[mat(n, j, kk)]))
                            + &(&s[mat(n, j, l)].mul_jet(&metric_t[mat(n, i, kk)])
                                - &s[mat(n, j, kk)].mul_jet(&metric_t[mat(n, i, l)]));
                        w[idx4(n, i, j, kk, l)] = &riemann_down[idx4(n, i, j, kk, l)] - &kn;
                    }
                }
            }
        }
        (Some(s), Some(w))
    } else {
        (None, None)
    };

    Ok(CurvaturePack {
        dim: n,
        base: metric.base().to_vec(),
        metric_order: k,
        metric: metric.components().to_vec(),
        value: metric.value_metric().clone(),
        inverse,
        christoffel,
        riemann_up,
        riemann_down,
        ricci,
        scalar,
        schouten,
        weyl,
    })
}

fn christoffel_jets(metric: &MetricJet, inverse: &[Jet], order: usize) -> Vec<Jet> {
    let n = metric.dim();
    // ∂_a g_{bc}
    let mut dg = vec![Jet::zero(n, order); n * n * n];
    for b in 0..n {
        for c in b..n {
            let comp = metric.component(b, c);
            for a in 0..n {
                let d = comp.derivative(a);
                dg[idx3(n, a, b, c)] = d.clone();
                if b != c {
                    dg[idx3(n, a, c, b)] = d;
                }
            }
        }
    }
    let inv_t: Vec<Jet> = inverse.iter().map(|c| c.truncated(order)).collect();
    let mut gamma = vec![Jet::zero(n, order); n * n * n];
    for c in 0..n {
        for i in 0..n {
            for j in i..n {
                let mut acc = Jet::zero(n, order);
                for l in 0..n {
                    let sym = &(&dg[idx3(n, i, l, j)] + &dg[idx3(n, j, l, i)])
                        - &dg[idx3(n, l, i, j)];
                    acc = &acc + &inv_t[mat(n, c, l)].mul_jet(&sym);
                }
                let acc = acc.scale(0.5);
                gamma[idx3(n, c, j, i)] = acc.clone();
                gamma[idx3(n, c, i, j)] = acc;
            }
        }
    }
    gamma
}

impl CurvaturePack {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn base(&self) -> &[f64] {
        &self.base
    }

    pub fn metric_order(&self) -> usize {
        self.metric_order
    }

    pub fn curvature_order(&self) -> usize {
        self.metric_order - 2
    }

    pub fn value_metric(&self) -> &PointMetric {
        &self.value
    }

    pub fn metric_jet(&self, i: usize, j: usize) -> &Jet {
        &self.metric[mat(self.dim, i, j)]
    }

    pub fn inverse_jet(&self, i: usize, j: usize) -> &Jet {
        &self.inverse[mat(self.dim, i, j)]
    }

    pub fn christoffel_jet(&self, c: usize, i: usize, j: usize) -> &Jet {
        &self.christoffel[idx3(self.dim, c, i, j)]
    }

    pub fn riemann_up_jet(&self, i: usize, j: usize, k: usize, l: usize) -> &Jet {
        &self.riemann_up[idx4(self.dim, i, j, k, l)]
    }

    pub fn riemann_down_jet(&self, i: usize, j: usize, k: usize, l: usize) -> &Jet {
        &self.riemann_down[idx4(self.dim, i, j, k, l)]
    }

    pub fn ricci_jet(&self, j: usize, l: usize) -> &Jet {
        &self.ricci[mat(self.dim, j, l)]
    }

    pub fn scalar_jet(&self) -> &Jet {
        &self.scalar
    }

    pub fn schouten_jet(&self, j: usize, l: usize) -> Option<&Jet> {
        self.schouten.as_ref().map(|s| &s[mat(self.dim, j, l)])
    }

    pub fn scalar_value(&self) -> f64 {
        self.scalar.value()
    }

    pub fn ricci_tensor(&self) -> JetTensor {
        JetTensor {
            dim: self.dim,
            variance: vec![Variance::Down, Variance::Down],
            comps: self.ricci.clone(),
        }
    }

    pub fn schouten_tensor(&self) -> Option<JetTensor> {
        self.schouten.as_ref().map(|s| JetTensor {
            dim: self.dim,
            variance: vec![Variance::Down, Variance::Down],
            comps: s.clone(),
        })
    }

    pub fn metric_tensor(&self) -> JetTensor {
        JetTensor {
            dim: self.dim,
            variance: vec![Variance::Down, Variance::Down],
            comps: self.metric.clone(),
        }
    }

    pub fn inverse_tensor(&self) -> JetTensor {
        JetTensor {
            dim: self.dim,
            variance: vec![Variance::Up, Variance::Up],
            comps: self.inverse.clone(),
        }
    }

    pub fn ricci_value(&self) -> PointTensor {
        self.ricci_tensor().value()
    }

    pub fn riemann_down_value(&self) -> PointTensor {
        JetTensor {
            dim: self.dim,
            variance: vec![Variance::Down; 4],
            comps: self.riemann_down.clone(),
        }
        .value()
    }

    pub fn riemann_up_value(&self) -> PointTensor {
        JetTensor {
            dim: self.dim,
            variance: vec![
                Variance::Up,
                Variance::Down,
                Variance::Down,
                Variance::Down,
            ],
            comps: self.riemann_up.clone(),
        }
        .value()
    }

    pub fn schouten_value(&self) -> Option<PointTensor> {
        self.schouten_tensor().map(|t| t.value())
    }

    pub fn weyl_value(&self) -> Option<PointTensor> {
        self.weyl.as_ref().map(|w| {
            JetTensor {
                dim: self.dim,
                variance: vec![Variance::Down; 4],
                comps: w.clone(),
            }
            .value()
        })
    }

    pub fn weyl_jet(&self, i: usize, j: usize, k: usize, l: usize) -> Option<&Jet> {
        self.weyl.as_ref().map(|w| &w[idx4(self.dim, i, j, k, l)])
    }

    /// Laplace–Beltrami of a scalar jet: `g^{ij}(∂_i∂_j f − Γ^k_{ij} ∂_k f)`,
    /// returned at order min(order f, K) − 2.
    pub fn laplace_beltrami(&self, f: &Jet) -> Result<Jet, GeomError> {
        let t = match f.order().min(self.metric_order).checked_sub(2) {
            Some(t) => t,
            None => {
                return Err(GeomError::OrderTooLow {
                    need: 2,
                    have: f.order().min(self.metric_order),
                })
            }
        };
        laplace_kernel(f, &self.inverse, &self.christoffel, self.dim, t)
    }

    /// ∇²f as jets of order min(order f − 2, K − 1).
    pub fn covariant_hessian_jets(&self, f: &Jet) -> Result<JetTensor, GeomError> {
        if f.order() < 2 {
            return Err(GeomError::OrderTooLow {
                need: 2,
                have: f.order(),
            });
        }
        let n = self.dim;
        let t = (f.order() - 2).min(self.metric_order - 1);
        let df: Vec<Jet> = (0..n).map(|i| f.derivative(i)).collect();
        let mut comps = vec![Jet::zero(n, t); n * n];
        for i in 0..n {
            for j in i..n {
                let mut acc = df[i].derivative(j).truncated(t);
                for k in 0..n {
                    acc = &acc
                        - &self.christoffel[idx3(n, k, i, j)]
                            .mul_jet(&df[k])
                            .truncated(t);
                }
                comps[mat(n, j, i)] = acc.clone();
                comps[mat(n, i, j)] = acc;
            }
        }
        Ok(JetTensor {
            dim: n,
            variance: vec![Variance::Down, Variance::Down],
            comps,
        })
    }

    /// ∇²f evaluated at the base point.
    pub fn covariant_hessian(&self, f: &Jet) -> Result<PointTensor, GeomError> {
        Ok(self.covariant_hessian_jets(f)?.value())
    }

    /// Gradient with the index raised: `(∇f)^i = g^{ij} ∂_j f`.
    pub fn gradient_vector(&self, f: &Jet) -> Result<JetTensor, GeomError> {
        if f.order() < 1 {
            return Err(GeomError::OrderTooLow {
                need: 1,
                have: f.order(),
            });
        }
        let n = self.dim;
        let t = (f.order() - 1).min(self.metric_order - 1);
        let df: Vec<Jet> = (0..n).map(|i| f.derivative(i).truncated(t)).collect();
        let mut comps = vec![Jet::zero(n, t); n];
        for (i, slot) in comps.iter_mut().enumerate() {
            let mut acc = Jet::zero(n, t);
            for j in 0..n {
                acc = &acc + &self.inverse[mat(n, i, j)].mul_jet(&df[j]).truncated(t);
            }
            *slot = acc;
        }
        Ok(JetTensor {
            dim: n,
            variance: vec![Variance::Up],
            comps,
        })
    }

    /// Levi-Civita covariant derivative. The new (lower) derivative slot sits
    /// first; the order drops to min(order T − 1, K − 1).
    pub fn covariant_derivative(&self, t: &JetTensor) -> Result<JetTensor, GeomError> {
        if t.order() < 1 {
            return Err(GeomError::OrderTooLow {
                need: 1,
                have: t.order(),
            });
        }
        let n = self.dim;
        let target = (t.order() - 1).min(self.metric_order - 1);
        let rank = t.rank();
        let mut variance = Vec::with_capacity(rank + 1);
        variance.push(Variance::Down);
        variance.extend_from_slice(t.variance());
        let mut out = JetTensor::zeros(n, target, variance);
        let mut idx = vec![0usize; rank + 1];
        let mut inner = vec![0usize; rank];
        let out_len = out.comps.len();
        for flat in 0..out_len {
            unflatten(n, flat, &mut idx);
            let a = idx[0];
            inner.copy_from_slice(&idx[1..]);
            let mut acc = t.get(&inner).derivative(a).truncated(target);
            for slot in 0..rank {
                let is = inner[slot];
                for m in 0..n {
                    let saved = inner[slot];
                    inner[slot] = m;
                    let tm = t.get(&inner).truncated(target);
                    inner[slot] = saved;
                    let term = match t.variance()[slot] {
                        Variance::Up => self.christoffel[idx3(n, is, a, m)]
                            .mul_jet(&tm)
                            .truncated(target),
                        Variance::Down => self.christoffel[idx3(n, m, a, is)]
                            .mul_jet(&tm)
                            .truncated(target)
                            .scale(-1.0),
                    };
                    acc = &acc + &term;
                }
            }
            out.comps[flat] = acc;
        }
        Ok(out)
    }

    /// Trace of the second covariant derivative, `g^{ab} ∇_a ∇_b T` — the
    /// Laplacian (d'Alembertian, in Lorentzian signature) on tensors, with all
    /// Christoffel terms.
    pub fn box_tensor(&self, t: &JetTensor) -> Result<JetTensor, GeomError> {
        let d1 = self.covariant_derivative(t)?;
        let d2 = self.covariant_derivative(&d1)?;
        let n = self.dim;
        let target = d2.order();
        let rank = t.rank();
        let mut out = JetTensor::zeros(n, target, t.variance().to_vec());
        let mut idx = vec![0usize; rank];
        let mut full = vec![0usize; rank + 2];
        let out_len = out.comps.len();
        for flat in 0..out_len {
            unflatten(n, flat, &mut idx);
            full[2..].copy_from_slice(&idx);
            let mut acc = Jet::zero(n, target);
            for a in 0..n {
                for b in 0..n {
                    full[0] = a;
                    full[1] = b;
                    acc = &acc
                        + &self.inverse[mat(n, a, b)]
                            .mul_jet(d2.get(&full))
                            .truncated(target);
                }
            }
            out.comps[flat] = acc;
        }
        Ok(out)
    }

    /// ∇_i v^i for a vector of jets.
    pub fn divergence_vector(&self, v: &JetTensor) -> Result<Jet, GeomError> {
        if v.rank() != 1 || v.variance()[0] != Variance::Up {
            return Err(GeomError::BadShape(v.comps.len(), self.dim));
        }
        let d = self.covariant_derivative(v)?;
        let n = self.dim;
        let mut acc = Jet::zero(n, d.order());
        for a in 0..n {
            acc = &acc + d.get(&[a, a]);
        }
        Ok(acc)
    }

    /// (div T)_j = g^{ai} ∇_a T_{ij} for a (0,2) tensor of jets.
    pub fn divergence_two_tensor(&self, t: &JetTensor) -> Result<JetTensor, GeomError> {
        if t.rank() != 2
            || t.variance()[0] != Variance::Down
            || t.variance()[1] != Variance::Down
        {
            return Err(GeomError::BadShape(t.comps.len(), self.dim));
        }
        let d = self.covariant_derivative(t)?;
        let n = self.dim;
        let target = d.order();
        let mut comps = vec![Jet::zero(n, target); n];
        for (j, slot) in comps.iter_mut().enumerate() {
            let mut acc = Jet::zero(n, target);
            for a in 0..n {
                for i in 0..n {
                    acc = &acc
                        + &self.inverse[mat(n, a, i)]
                            .mul_jet(d.get(&[a, i, j]))
                            .truncated(target);
                }
            }
            *slot = acc;
        }
        Ok(JetTensor {
            dim: n,
            variance: vec![Variance::Down],
            comps,
        })
    }

    /// Flip one slot of a jet tensor through the metric.
    pub fn raise_slot(&self, t: &JetTensor, slot: usize) -> Result<JetTensor, GeomError> {
        self.convert_slot(t, slot, Variance::Up)
    }

    pub fn lower_slot(&self, t: &JetTensor, slot: usize) -> Result<JetTensor, GeomError> {
        self.convert_slot(t, slot, Variance::Down)
    }

    fn convert_slot(
        &self,
        t: &JetTensor,
        slot: usize,
        target: Variance,
    ) -> Result<JetTensor, GeomError> {
        if slot >= t.rank() {
            return Err(GeomError::BadShape(t.comps.len(), self.dim));
        }
        if t.variance()[slot] == target {
            return Ok(t.clone());
        }
        let n = self.dim;
        let order = t.order().min(self.metric_order - 1);
        let mut out = t.truncated(order);
        out.variance[slot] = target;
        let rank = t.rank();
        let mut idx = vec![0usize; rank];
        let out_len = out.comps.len();
        for flat in 0..out_len {
            unflatten(n, flat, &mut idx);
            let i = idx[slot];
            let mut acc = Jet::zero(n, order);
            for m in 0..n {
                idx[slot] = m;
                let w = match target {
                    Variance::Up => &self.inverse[mat(n, i, m)],
                    Variance::Down => &self.metric[mat(n, i, m)],
                };
                acc = &acc + &w.mul_jet(t.get(&idx)).truncated(order);
            }
            idx[slot] = i;
            out.comps[flat] = acc;
        }
        Ok(out)
    }

    /// Full metric contraction of two jet tensors of equal rank, slot by slot.
    pub fn inner_product_jets(&self, a: &JetTensor, b: &JetTensor) -> Result<Jet, GeomError> {
        if a.rank() != b.rank() || a.dim() != b.dim() {
            return Err(GeomError::BadShape(b.comps.len(), self.dim));
        }
        // convert a to the pattern dual to b, then sum componentwise
        let mut dual = a.clone();
        for s in 0..b.rank() {
            dual = match b.variance()[s] {
                Variance::Up => self.lower_slot(&dual, s)?,
                Variance::Down => self.raise_slot(&dual, s)?,
            };
        }
        let order = dual.order().min(b.order());
        let mut acc = Jet::zero(self.dim.max(1), order);
        if a.rank() == 0 {
            return Ok(dual.comps[0].mul_jet(&b.comps[0]));
        }
        for (x, y) in dual.comps.iter().zip(&b.comps) {
            acc = &acc + &x.mul_jet(y).truncated(order);
        }
        Ok(acc)
    }
}

fn laplace_kernel(
    f: &Jet,
    inverse: &[Jet],
    christoffel: &[Jet],
    n: usize,
    t: usize,
) -> Result<Jet, GeomError> {
    let df: Vec<Jet> = (0..n).map(|i| f.derivative(i)).collect();
    let mut acc = Jet::zero(n, t);
    for i in 0..n {
        for j in 0..n {
            let mut h = df[i].derivative(j).truncated(t);
            for k in 0..n {
                h = &h
                    - &christoffel[idx3(n, k, i, j)]
                        .mul_jet(&df[k])
                        .truncated(t);
            }
            acc = &acc + &inverse[mat(n, i, j)].mul_jet(&h).truncated(t);
        }
    }
    Ok(acc)
}

/// Free-standing Laplace–Beltrami: builds only the Christoffel data it needs.
pub fn laplace_beltrami(f: &Jet, metric: &MetricJet) -> Result<Jet, GeomError> {
    let t = match f.order().min(metric.order()).checked_sub(2) {
        Some(t) => t,
        None => {
            return Err(GeomError::OrderTooLow {
                need: 2,
                have: f.order().min(metric.order()),
            })
        }
    };
    let inv = metric.inverse_jets(t + 1)?;
    let gamma = christoffel_jets(metric, &inv, t + 1);
    laplace_kernel(f, &inv, &gamma, metric.dim(), t)
}

/// Covariant Hessian at the base point without a full curvature pack.
pub fn covariant_hessian(f: &Jet, metric: &MetricJet) -> Result<PointTensor, GeomError> {
    if f.order() < 2 || metric.order() < 1 {
        return Err(GeomError::OrderTooLow {
            need: 2,
            have: f.order().min(metric.order()),
        });
    }
    let n = metric.dim();
    let inv = metric.inverse_jets(1.min(metric.order()))?;
    let gamma = christoffel_jets(metric, &inv, 1.min(metric.order()));
    let mut out = PointTensor::zeros(n, vec![Variance::Down, Variance::Down])?;
    let mut alpha = vec![0u8; n];
    for i in 0..n {
        for j in 0..n {
            alpha.iter_mut().for_each(|a| *a = 0);
            alpha[i] += 1;
            alpha[j] += 1;
            let mut v = f.partial(&alpha);
            for k in 0..n {
                alpha.iter_mut().for_each(|a| *a = 0);
                alpha[k] = 1;
                v -= gamma[idx3(n, k, i, j)].value() * f.partial(&alpha);
            }
            out.set(&[i, j], v);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Lean scalar-curvature path
// ---------------------------------------------------------------------------

/// Scalar curvature as a jet of the requested order, touching nothing beyond
/// Ricci. This is the hot path for volume integrands: a metric of order
/// `order + 2` is enough, and no Riemann/Weyl storage is built.
pub fn scalar_curvature_jet(metric: &MetricJet, order: usize) -> Result<Jet, GeomError> {
    let need = order + 2;
    if metric.order() < need {
        return Err(GeomError::OrderTooLow {
            need,
            have: metric.order(),
        });
    }
    let m = if metric.order() > need {
        metric.truncated(need)
    } else {
        metric.clone()
    };
    let n = m.dim();
    let k1 = order + 1;
    let inv = m.inverse_jets(k1)?;
    let gamma = christoffel_jets(&m, &inv, k1);
    let gamma_t: Vec<Jet> = gamma.iter().map(|g| g.truncated(order)).collect();
    // trace Γ^k_{km}
    let mut gtr = vec![Jet::zero(n, k1); n];
    for (mm, slot) in gtr.iter_mut().enumerate() {
        let mut acc = Jet::zero(n, k1);
        for k in 0..n {
            acc = &acc + &gamma[idx3(n, k, k, mm)];
        }
        *slot = acc;
    }
    let inv_t: Vec<Jet> = inv.iter().map(|c| c.truncated(order)).collect();
    let mut scalar = Jet::zero(n, order);
    for j in 0..n {
        for l in j..n {
            // Ric_{jl} = ∂_k Γ^k_{lj} − ∂_l Γ^k_{kj} + Γ^k_{km}Γ^m_{lj} − Γ^k_{lm}Γ^m_{kj}
            let mut ric = Jet::zero(n, order);
            for k in 0..n {
                ric = &ric + &gamma[idx3(n, k, l, j)].derivative(k).truncated(order);
            }
            ric = &ric - &gtr[j].derivative(l).truncated(order);
            for mm in 0..n {
                ric = &ric
                    + &gtr[mm]
                        .truncated(order)
                        .mul_jet(&gamma_t[idx3(n, mm, l, j)]);
                for k in 0..n {
                    ric = &ric
                        - &gamma_t[idx3(n, k, l, mm)].mul_jet(&gamma_t[idx3(n, mm, k, j)]);
                }
            }
            let w = if j == l { 1.0 } else { 2.0 };
            scalar = &scalar + &inv_t[mat(n, j, l)].mul_jet(&ric).scale(w);
        }
    }
    Ok(scalar)
}

/// Values the energy integrands consume at one point: scalar curvature jet
/// (order 2), its metric Laplacian, its gradient, and the volume density.
pub struct ScalarData {
    pub r_jet: Jet,
    pub laplacian_r: f64,
    /// ∂_i R values
    pub grad_r: Vec<f64>,
    /// g^{ij} ∂_j R values
    pub grad_r_up: Vec<f64>,
    pub volume_density: f64,
}

pub fn scalar_curvature_data(metric: &MetricJet) -> Result<ScalarData, GeomError> {
    if metric.order() < 4 {
        return Err(GeomError::OrderTooLow {
            need: 4,
            have: metric.order(),
        });
    }
    let m = if metric.order() > 4 {
        metric.truncated(4)
    } else {
        metric.clone()
    };
    let n = m.dim();
    let r_jet = scalar_curvature_jet(&m, 2)?;
    // Laplacian of R at the value level
    let inv = m.inverse_jets(1)?;
    let gamma = christoffel_jets(&m, &inv, 1);
    let lap = laplace_kernel(&r_jet, &inv, &gamma, n, 0)?;
    let mut alpha = vec![0u8; n];
    let mut grad_r = vec![0.0; n];
    for (i, g) in grad_r.iter_mut().enumerate() {
        alpha.iter_mut().for_each(|a| *a = 0);
        alpha[i] = 1;
        *g = r_jet.partial(&alpha);
    }
    let vm = m.value_metric();
    let mut grad_r_up = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            grad_r_up[i] += vm.upper(i, j) * grad_r[j];
        }
    }
    Ok(ScalarData {
        r_jet,
        laplacian_r: lap.value(),
        grad_r,
        grad_r_up,
        volume_density: vm.volume_density(),
    })
}

// ---------------------------------------------------------------------------
// Coordinate spheres
// ---------------------------------------------------------------------------

/// Geometry of the coordinate sphere S_r through the base point: outward unit
/// normal, second fundamental form, mean curvature, and the densities that
/// boundary integrals need. `H = (n−1)/r > 0` on round spheres in flat space;
/// in two dimensions `mean_curvature` is the geodesic curvature of the circle.
#[derive(Debug)]
pub struct SphereFrame {
    pub radius: f64,
    /// ν^i (outward unit normal)
    pub normal_up: Vec<f64>,
    /// ν_i = g_{ij} ν^j
    pub conormal: Vec<f64>,
    /// Second fundamental form of S_r, tangential (0,2)
    pub ii: PointTensor,
    /// tr_γ II
    pub mean_curvature: f64,
    /// γ_{ij} = g_{ij} − ν_i ν_j
    pub tangential_metric: PointTensor,
    /// P^i_j = δ^i_j − ν^i ν_j, row-major
    pub projection: Vec<f64>,
    /// dA_g / dA_euclidean = sqrt(det g) · |∇r|_g
    pub area_density: f64,
    /// |dr|_g at the point
    pub grad_r_norm: f64,
}

pub fn second_fundamental_form(
    radius: f64,
    metric: &MetricJet,
) -> Result<SphereFrame, GeomError> {
    if !(radius > 0.0) {
        return Err(GeomError::BadRadius(radius));
    }
    if !metric.is_riemannian() {
        let (p, q) = metric.signature();
        return Err(GeomError::NotRiemannian(p, q));
    }
    if metric.order() < 2 {
        return Err(GeomError::OrderTooLow {
            need: 2,
            have: metric.order(),
        });
    }
    let n = metric.dim();
    let base = metric.base();
    let r0 = base.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (r0 - radius).abs() > 1e-9 * radius.max(1.0) {
        return Err(GeomError::OffSphere {
            want: radius,
            have: r0,
        });
    }
    let k = metric.order();
    let xs = Jet::coords(k, base);
    let mut r2 = Jet::zero(n, k);
    for x in &xs {
        r2 = &r2 + &x.mul_jet(x);
    }
    let rjet = r2.sqrt()?;
    let dr: Vec<Jet> = (0..n).map(|i| rjet.derivative(i)).collect();
    let k1 = k - 1;
    let inv = metric.inverse_jets(k1)?;
    // |dr|_g² = g^{ij} ∂_i r ∂_j r
    let mut len2 = Jet::zero(n, k1);
    for i in 0..n {
        for j in 0..n {
            len2 = &len2
                + &inv[mat(n, i, j)]
                    .truncated(k1)
                    .mul_jet(&dr[i])
                    .mul_jet(&dr[j])
                    .truncated(k1);
        }
    }
    let len = len2.sqrt()?;
    let nu_co: Vec<Jet> = dr
        .iter()
        .map(|d| d.div_jet(&len))
        .collect::<Result<_, _>>()?;
    let vm = metric.value_metric();
    let conormal: Vec<f64> = nu_co.iter().map(|j| j.value()).collect();
    let mut normal_up = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            normal_up[i] += vm.upper(i, j) * conormal[j];
        }
    }
    // Γ values for ∇ν
    let gamma = christoffel_jets(metric, &inv, k1);
    let mut grad_nu = vec![0.0; n * n]; // ∇_a ν_b
    let mut alpha = vec![0u8; n];
    for a in 0..n {
        for b in 0..n {
            alpha.iter_mut().for_each(|x| *x = 0);
            alpha[a] = 1;
            let mut v = nu_co[b].partial(&alpha);
            for m in 0..n {
                v -= gamma[idx3(n, m, a, b)].value() * conormal[m];
            }
            grad_nu[mat(n, a, b)] = v;
        }
    }
    let mut projection = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            projection[mat(n, i, j)] =
                if i == j { 1.0 } else { 0.0 } - normal_up[i] * conormal[j];
        }
    }
    let mut ii = PointTensor::zeros(n, vec![Variance::Down, Variance::Down])?;
    for k_ in 0..n {
        for l in 0..n {
            let mut acc = 0.0;
            for a in 0..n {
                for b in 0..n {
                    acc += projection[mat(n, a, k_)]
                        * projection[mat(n, b, l)]
                        * grad_nu[mat(n, a, b)];
                }
            }
            ii.set(&[k_, l], acc);
        }
    }
    let mut mean = 0.0;
    for k_ in 0..n {
        for l in 0..n {
            mean += vm.upper(k_, l) * ii.get(&[k_, l]);
        }
    }
    let mut gamma_t = PointTensor::zeros(n, vec![Variance::Down, Variance::Down])?;
    for i in 0..n {
        for j in 0..n {
            gamma_t.set(&[i, j], vm.lower(i, j) - conormal[i] * conormal[j]);
        }
    }
    let grad_r_norm = len.value();
    Ok(SphereFrame {
        radius,
        normal_up,
        conormal,
        ii,
        mean_curvature: mean,
        tangential_metric: gamma_t,
        projection,
        area_density: vm.volume_density() * grad_r_norm,
        grad_r_norm,
    })
}

// ---------------------------------------------------------------------------
