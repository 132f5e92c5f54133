//! Quadrature on coordinate spheres `S^{n-1}_r`, annulus volume integrals
//! over asymptotically flat ends, and extrapolation of flux ladders to
//! r -> infinity.
//!
//! Everything here is plain Euclidean-chart quadrature: metric volume
//! factors (sqrt(det g) and friends) belong to the integrand supplied by
//! the caller. Node evaluations are independent and are reduced with a
//! fixed-order pairwise sum, so results do not depend on the thread count.

use nalgebra::DMatrix;
use rayon::prelude::*;
use std::fmt;

#[derive(Debug, Clone)]
pub enum IntegrateError {
    /// Sphere rules are built by recursing down to the circle; the table
    /// construction is only wired up for ambient dimensions 2..=8.
    UnsupportedDimension(usize),
    UnsupportedDegree(usize),
    /// An integrand refused to evaluate at a node; the index identifies it.
    NodeEvaluation { index: usize, message: String },
    BadShell { r_in: f64, r_out: f64 },
    /// Fewer radii than the fit has effective degrees of freedom.
    ShortLadder(usize),
    LadderNotIncreasing { index: usize },
    LengthMismatch { radii: usize, values: usize },
    /// The freshly built rule failed its own exactness audit. This should
    /// never fire; if it does, the Golub-Welsch tables are wrong.
    AuditFailure(String),
}

impl fmt::Display for IntegrateError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IntegrateError::UnsupportedDimension(n) => {
                write!(f, "sphere quadrature supports ambient dimension 2..=8, got {n}")
            }
            IntegrateError::UnsupportedDegree(l) => {
                write!(f, "exactness degree must be in 1..=40, got {l}")
            }
            IntegrateError::NodeEvaluation { index, message } => {
                write!(f, "integrand failed at node {index}: {message}")
            }
            IntegrateError::BadShell { r_in, r_out } => {
                write!(f, "annulus needs 0 < r_in < r_out, got [{r_in}, {r_out}]")
            }
            IntegrateError::ShortLadder(m) => {
                write!(f, "limit extrapolation needs at least 4 radii, got {m}")
            }
            IntegrateError::LadderNotIncreasing { index } => {
                write!(f, "radius ladder must be strictly increasing (violated at index {index})")
            }
            IntegrateError::LengthMismatch { radii, values } => {
                write!(f, "{radii} radii against {values} flux values")
            }
            IntegrateError::AuditFailure(msg) => write!(f, "quadrature self-audit failed: {msg}"),
        }
    }
}

impl std::error::Error for IntegrateError {}

/// Gamma(k/2) for positive integer k, exact up to rounding.
/// Covers every Gamma value the sphere formulas need.
pub fn gamma_half(k: usize) -> f64 {
    assert!(k > 0, "gamma_half needs a positive argument");
    let mut z = k as f64 / 2.0;
    let mut acc = 1.0;
    while z > 1.25 {
        z -= 1.0;
        acc *= z;
    }
    if (z - 1.0).abs() < 0.25 {
        acc // Gamma(1) = 1
    } else {
        acc * std::f64::consts::PI.sqrt() // Gamma(1/2)
    }
}

/// omega_{n-1} = vol(S^{n-1}) = 2 pi^{n/2} / Gamma(n/2).
pub fn unit_sphere_volume(n: usize) -> f64 {
    2.0 * std::f64::consts::PI.powf(n as f64 / 2.0) / gamma_half(n)
}

/// Fixed-order pairwise summation. Deterministic for a given slice, and
/// noticeably more accurate than a running sum on long node lists.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}

/// Gauss nodes/weights for the weight (1-t^2)^alpha on [-1, 1] via
/// Golub-Welsch on the symmetric Jacobi recurrence. alpha = 0 is plain
/// Gauss-Legendre; alpha = (m-2)/2 is what the sphere recursion needs.
fn gauss_gegenbauer(alpha: f64, k: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(k >= 1);
    // mu0 = int (1-t^2)^alpha dt = sqrt(pi) Gamma(alpha+1) / Gamma(alpha+3/2).
    // alpha is always a half-integer here, so twice it is integral.
    let two_alpha = (2.0 * alpha).round() as usize;
    let mu0 = std::f64::consts::PI.sqrt() * gamma_half(two_alpha + 2) / gamma_half(two_alpha + 3);
    if k == 1 {
        return (vec![0.0], vec![mu0]);
    }
    let mut jac = DMatrix::<f64>::zeros(k, k);
    for i in 1..k {
        let kk = i as f64;
        let b2 = kk * (kk + 2.0 * alpha)
            / ((2.0 * kk + 2.0 * alpha + 1.0) * (2.0 * kk + 2.0 * alpha - 1.0));
        let b = b2.sqrt();
        jac[(i - 1, i)] = b;
        jac[(i, i - 1)] = b;
    }
    let eig = jac.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..k)
        .map(|j| {
            let node = eig.eigenvalues[j];
            let first = eig.eigenvectors[(0, j)];
            (node, mu0 * first * first)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    pairs.into_iter().unzip()
}

/// Gauss-Legendre nodes/weights on [a, b].
pub fn gauss_legendre(k: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (t, w) = gauss_gegenbauer(0.0, k);
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    (
        t.iter().map(|ti| mid + half * ti).collect(),
        w.iter().map(|wi| wi * half).collect(),
    )
}

/// Product quadrature rule on the unit sphere S^{n-1}, exact (to rounding)
/// for polynomials of total degree <= `degree`.
#[derive(Debug, Clone)]
pub struct SphereRule {
    n: usize,
    degree: usize,
    /// Flat node storage, `n` coordinates per node, unit vectors.
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl SphereRule {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn node_count(&self) -> usize {
        self.weights.len()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.n..(i + 1) * self.n]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    /// Integral over the unit sphere of an everywhere-defined field.
    pub fn integrate_unit<F>(&self, field: F) -> f64
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        let terms: Vec<f64> = (0..self.node_count())
            .into_par_iter()
            .map(|i| self.weights[i] * field(self.node(i)))
            .collect();
        pairwise_sum(&terms)
    }
}

/// Closed-form integral of the monomial prod x_i^{beta_i} over S^{n-1}:
/// zero if any exponent is odd, else 2 prod Gamma((beta_i+1)/2) / Gamma((|beta|+n)/2).
fn sphere_monomial_integral(beta: &[usize]) -> f64 {
    if beta.iter().any(|&b| b % 2 == 1) {
        return 0.0;
    }
    let total: usize = beta.iter().sum();
    let mut num = 2.0;
    for &b in beta {
        num *= gamma_half(b + 1);
    }
    num / gamma_half(total + beta.len())
}

/// Build the product rule: Gauss-Gegenbauer in each polar cosine, uniform
/// in the azimuth, recursing S^{n-1} -> S^{n-2} down to the circle.
pub fn sphere_quadrature(n: usize, degree: usize) -> Result<SphereRule, IntegrateError> {
    if !(2..=8).contains(&n) {
        return Err(IntegrateError::UnsupportedDimension(n));
    }
    if degree == 0 || degree > 40 {
        return Err(IntegrateError::UnsupportedDegree(degree));
    }
    let rule = build_sphere_rule(n, degree);
    audit_rule(&rule)?;
    Ok(rule)
}

fn build_sphere_rule(n: usize, degree: usize) -> SphereRule {
    if n == 2 {
        // Uniform m-point rule on the circle integrates trigonometric
        // polynomials of degree <= m-1, hence all polynomials of total
        // degree <= degree once m > degree.
        let m = degree + 1;
        let step = 2.0 * std::f64::consts::PI / m as f64;
        let mut nodes = Vec::with_capacity(2 * m);
        let mut weights = Vec::with_capacity(m);
        for j in 0..m {
            let th = step * j as f64;
            nodes.push(th.cos());
            nodes.push(th.sin());
            weights.push(step);
        }
        return SphereRule { n, degree, nodes, weights };
    }
    let sub = build_sphere_rule(n - 1, degree);
    // x = (t, sqrt(1-t^2) y): the surface measure factors as
    // (1-t^2)^{(n-3)/2} dt dsigma_{n-2}, which is exactly the Gauss weight.
    let k = degree / 2 + 1;
    let (ts, ws) = gauss_gegenbauer((n as f64 - 3.0) / 2.0, k);
    let count = k * sub.node_count();
    let mut nodes = Vec::with_capacity(count * n);
    let mut weights = Vec::with_capacity(count);
    for (t, wt) in ts.iter().zip(&ws) {
        let s = (1.0 - t * t).max(0.0).sqrt();
        for j in 0..sub.node_count() {
            nodes.push(*t);
            for c in sub.node(j) {
                nodes.push(s * c);
            }
            weights.push(wt * sub.weight(j));
        }
    }
    SphereRule { n, degree, nodes, weights }
}

fn audit_rule(rule: &SphereRule) -> Result<(), IntegrateError> {
    let omega = unit_sphere_volume(rule.n);
    let total = pairwise_sum(&rule.weights);
    if (total - omega).abs() > 1e-12 * omega {
        return Err(IntegrateError::AuditFailure(format!(
            "weights sum to {total}, expected omega = {omega}"
        )));
    }
    // Spot-check exactness on a deterministic sample of monomials of total
    // degree <= L, odd ones included (they must vanish).
    let mut state = 0x5eed_ab1e_u64 ^ ((rule.n as u64) << 32) ^ rule.degree as u64;
    for _ in 0..48 {
        let mut beta = vec![0usize; rule.n];
        let total_deg = (lcg(&mut state) * (rule.degree as f64 + 1.0)) as usize;
        for _ in 0..total_deg {
            let slot = (lcg(&mut state) * rule.n as f64) as usize % rule.n;
            beta[slot] += 1;
        }
        let exact = sphere_monomial_integral(&beta);
        let got = rule.integrate_unit(|x| {
            let mut p = 1.0;
            for (xi, bi) in x.iter().zip(&beta) {
                p *= xi.powi(*bi as i32);
            }
            p
        });
        if (got - exact).abs() > 1e-11 * exact.abs().max(1.0) {
            return Err(IntegrateError::AuditFailure(format!(
                "monomial {beta:?}: rule gives {got}, exact {exact}"
            )));
        }
    }
    Ok(())
}

fn lcg(state: &mut u64) -> f64 {
    *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (*state >> 11) as f64 / (1u64 << 53) as f64
}

/// Flux of a scalar field through the coordinate sphere of radius r:
/// r^{n-1} sum_i w_i field(r theta_i). Any metric area factor belongs in
/// the field itself.
pub fn surface_flux<F>(field: F, r: f64, rule: &SphereRule) -> Result<f64, IntegrateError>
where
    F: Fn(&[f64]) -> Result<f64, String> + Sync,
{
    let n = rule.dim();
    let evals: Vec<(usize, Result<f64, String>)> = (0..rule.node_count())
        .into_par_iter()
        .map(|i| {
            let x: Vec<f64> = rule.node(i).iter().map(|c| c * r).collect();
            (i, field(&x))
        })
        .collect();
    let mut terms = Vec::with_capacity(evals.len());
    for (i, ev) in evals {
        match ev {
            Ok(v) => terms.push(rule.weight(i) * v),
            Err(message) => return Err(IntegrateError::NodeEvaluation { index: i, message }),
        }
    }
    Ok(r.powi(n as i32 - 1) * pairwise_sum(&terms))
}

/// Volume integral of a density over the coordinate annulus r_in < |x| < r_out:
/// Gauss-Legendre radially, the sphere rule angularly. The density must
/// already include any metric volume factor (sqrt(det g)); the Euclidean
/// r^{n-1} Jacobian is supplied here.
pub fn annulus_volume_integral<F>(
    density: F,
    r_in: f64,
    r_out: f64,
    rule: &SphereRule,
    radial_nodes: usize,
) -> Result<f64, IntegrateError>
where
    F: Fn(&[f64]) -> Result<f64, String> + Sync,
{
    if !(r_in > 0.0 && r_in < r_out) {
        return Err(IntegrateError::BadShell { r_in, r_out });
    }
    let (rs, ws) = gauss_legendre(radial_nodes.max(2), r_in, r_out);
    let mut shells = Vec::with_capacity(rs.len());
    for (r, w) in rs.iter().zip(&ws) {
        shells.push(w * surface_flux(&density, *r, rule)?);
    }
    Ok(pairwise_sum(&shells))
}

/// A ladder of boundary fluxes F(r_k) together with the fitted limit
/// E = lim_{r->inf} F(r), modeled as F(r) = E + a r^{-s}.
#[derive(Debug, Clone, serde::Serialize)]
pub struct FluxSeries {
    pub radii: Vec<f64>,
    pub values: Vec<f64>,
    /// Extrapolated limit; present after `extrapolate_limit`.
    pub limit: Option<f64>,
    /// Fitted decay exponent s >= 0.25; absent for degenerate (exact) fits.
    pub exponent: Option<f64>,
    /// RMS misfit of the model over the ladder. Reported, never hidden.
    pub residual: Option<f64>,
    /// Residual small against max(|E|, 1).
    pub converged: bool,
    /// All ladder values coincide to rounding; the limit is their common value.
    pub exact: bool,
}

impl FluxSeries {
    pub fn new(radii: Vec<f64>, values: Vec<f64>) -> Result<Self, IntegrateError> {
        if radii.len() != values.len() {
            return Err(IntegrateError::LengthMismatch {
                radii: radii.len(),
                values: values.len(),
            });
        }
        for i in 1..radii.len() {
            if radii[i] <= radii[i - 1] {
                return Err(IntegrateError::LadderNotIncreasing { index: i });
            }
        }
        Ok(FluxSeries {
            radii,
            values,
            limit: None,
            exponent: None,
            residual: None,
            converged: false,
            exact: false,
        })
    }

    /// The geometric ladder used throughout unless a caller overrides it.
    pub fn default_ladder() -> Vec<f64> {
        vec![10.0, 20.0, 40.0, 80.0]
    }
}

/// Least squares of F = E + a r^{-s} for fixed s; returns (E, a, rms).
fn power_fit(radii: &[f64], values: &[f64], s: f64) -> (f64, f64, f64) {
    let m = radii.len() as f64;
    let phi: Vec<f64> = radii.iter().map(|r| r.powf(-s)).collect();
    let sp: f64 = phi.iter().sum();
    let spp: f64 = phi.iter().map(|p| p * p).sum();
    let sf: f64 = values.iter().sum();
    let spf: f64 = phi.iter().zip(values).map(|(p, f)| p * f).sum();
    let det = m * spp - sp * sp;
    let (e, a) = if det.abs() < 1e-300 {
        (sf / m, 0.0)
    } else {
        ((spp * sf - sp * spf) / det, (m * spf - sp * sf) / det)
    };
    let ss: f64 = radii
        .iter()
        .zip(values)
        .map(|(r, f)| {
            let d = f - e - a * r.powf(-s);
            d * d
        })
        .sum();
    (e, a, (ss / m).sqrt())
}

/// Fit the decaying-power model to a flux ladder and fill in the limit,
/// exponent, residual, and convergence flags.
pub fn extrapolate_limit(series: FluxSeries) -> Result<FluxSeries, IntegrateError> {
    let mut out = series;
    let m = out.radii.len();
    if m < 4 {
        return Err(IntegrateError::ShortLadder(m));
    }
    let scale = out.values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let spread = out
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if spread.1 - spread.0 <= 1e-13 * scale.max(1.0) {
        let e = out.values[m - 1];
        out.limit = Some(e);
        out.exponent = None;
        out.residual = Some(spread.1 - spread.0);
        out.converged = true;
        out.exact = true;
        return Ok(out);
    }
    // Coarse scan over the admissible exponent range, then golden-section
    // refinement of the best bracket. The model is linear in (E, a) for
    // fixed s, so each probe is a closed-form least squares.
    const S_MIN: f64 = 0.25;
    const S_MAX: f64 = 16.0;
    let probes = 64;
    let mut best_s = S_MIN;
    let mut best_rms = f64::INFINITY;
    for i in 0..=probes {
        let s = S_MIN + (S_MAX - S_MIN) * i as f64 / probes as f64;
        let (_, _, rms) = power_fit(&out.radii, &out.values, s);
        if rms < best_rms {
            best_rms = rms;
            best_s = s;
        }
    }
    let width = (S_MAX - S_MIN) / probes as f64;
    let (mut lo, mut hi) = ((best_s - width).max(S_MIN), (best_s + width).min(S_MAX));
    let inv_phi = (5.0f64.sqrt() - 1.0) / 2.0;
    for _ in 0..80 {
        let a = hi - inv_phi * (hi - lo);
        let b = lo + inv_phi * (hi - lo);
        let ra = power_fit(&out.radii, &out.values, a).2;
        let rb = power_fit(&out.radii, &out.values, b).2;
        if ra < rb {
            hi = b;
        } else {
            lo = a;
        }
    }
    let s = 0.5 * (lo + hi);
    let (e, _, rms) = power_fit(&out.radii, &out.values, s);
    out.limit = Some(e);
    out.exponent = Some(s);
    out.residual = Some(rms);
    out.converged = rms <= 1e-3 * e.abs().max(1.0);
    out.exact = false;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn sphere_volumes_match_the_closed_form() {
        assert_relative_eq!(unit_sphere_volume(2), 2.0 * PI, max_relative = 1e-14);
        assert_relative_eq!(unit_sphere_volume(3), 4.0 * PI, max_relative = 1e-14);
        assert_relative_eq!(unit_sphere_volume(4), 2.0 * PI * PI, max_relative = 1e-14);
        assert_relative_eq!(unit_sphere_volume(5), 8.0 * PI * PI / 3.0, max_relative = 1e-14);
        assert_relative_eq!(unit_sphere_volume(6), PI * PI * PI, max_relative = 1e-14);
        for n in 2..=8 {
            let rule = sphere_quadrature(n, if n <= 6 { 16 } else { 6 }).unwrap();
            let total = pairwise_sum(&rule.weights);
            assert_relative_eq!(total, unit_sphere_volume(n), max_relative = 1e-12);
        }
    }

    #[test]
    fn monomials_integrate_exactly() {
        let s4 = sphere_quadrature(5, 16).unwrap();
        assert_relative_eq!(s4.integrate_unit(|_| 1.0), 8.0 * PI * PI / 3.0, max_relative = 1e-12);

        let s2 = sphere_quadrature(3, 16).unwrap();
        assert_relative_eq!(s2.integrate_unit(|x| x[0] * x[0]), 4.0 * PI / 3.0, max_relative = 1e-12);
        assert!(s2.integrate_unit(|x| x[0] * x[1] * x[1]).abs() < 1e-13);

        // x1^2 x2^4 on S^3 against the Gamma closed form.
        let s3 = sphere_quadrature(4, 16).unwrap();
        let exact = sphere_monomial_integral(&[2, 4, 0, 0]);
        assert_relative_eq!(s3.integrate_unit(|x| x[0] * x[0] * x[1].powi(4)), exact, max_relative = 1e-12);
    }

    #[test]
    fn gauss_legendre_integrates_high_degree_polynomials() {
        let (t, w) = gauss_legendre(5, -1.0, 1.0);
        let got: f64 = t.iter().zip(&w).map(|(ti, wi)| wi * ti.powi(8)).sum();
        assert_relative_eq!(got, 2.0 / 9.0, max_relative = 1e-13);
        let (t, w) = gauss_legendre(8, 1.0, 2.0);
        let got: f64 = t.iter().zip(&w).map(|(ti, wi)| wi / ti).sum();
        assert_relative_eq!(got, 2.0f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn surface_flux_of_the_coulomb_kernel_gives_gauss_law() {
        // field = d/dr (1/rho) = -1/r^2 on S_r in n=3; flux is -omega_2.
        let rule = sphere_quadrature(3, 16).unwrap();
        for r in [1.0, 5.0, 80.0] {
            let flux = surface_flux(
                |x: &[f64]| {
                    let rho2: f64 = x.iter().map(|c| c * c).sum();
                    Ok(-1.0 / rho2)
                },
                r,
                &rule,
            )
            .unwrap();
            assert_relative_eq!(flux, -4.0 * PI, max_relative = 1e-12);
        }
    }

    #[test]
    fn surface_flux_scales_by_homogeneity_degree() {
        let rule = sphere_quadrature(4, 12).unwrap();
        // degree-2 homogeneous field in n=4: flux ~ r^{n-1+2} = r^5
        let field = |x: &[f64]| Ok(x[0] * x[0] + 2.0 * x[1] * x[3]);
        let f1 = surface_flux(field, 2.0, &rule).unwrap();
        let f2 = surface_flux(field, 6.0, &rule).unwrap();
        assert_relative_eq!(f2 / f1, 3.0f64.powi(5), max_relative = 1e-12);
    }

    #[test]
    fn node_failures_carry_the_node_index() {
        let rule = sphere_quadrature(3, 4).unwrap();
        let err = surface_flux(
            |x: &[f64]| {
                if x[2] > 0.0 {
                    Err("upper hemisphere refused".to_string())
                } else {
                    Ok(1.0)
                }
            },
            1.0,
            &rule,
        )
        .unwrap_err();
        match err {
            IntegrateError::NodeEvaluation { message, .. } => {
                assert!(message.contains("refused"));
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn annulus_volume_matches_shell_closed_forms() {
        let rule = sphere_quadrature(3, 8).unwrap();
        let vol = annulus_volume_integral(|_: &[f64]| Ok(1.0), 1.0, 2.0, &rule, 8).unwrap();
        assert_relative_eq!(vol, 4.0 * PI / 3.0 * 7.0, max_relative = 1e-12);

        // Divergence theorem for the n=5 Coulomb kernel: Delta(1/rho) = -2/rho^3,
        // and the flux of d_r(1/rho) = -rho^-2 through S_r is -omega_4 r^2.
        let rule5 = sphere_quadrature(5, 8).unwrap();
        let lhs = annulus_volume_integral(
            |x: &[f64]| {
                let rho = x.iter().map(|c| c * c).sum::<f64>().sqrt();
                Ok(-2.0 / (rho * rho * rho))
            },
            1.0,
            2.0,
            &rule5,
            12,
        )
        .unwrap();
        let omega4 = unit_sphere_volume(5);
        assert_relative_eq!(lhs, -omega4 * (4.0 - 1.0), max_relative = 1e-12);
    }

    #[test]
    fn divergence_theorem_closes_on_a_smooth_field() {
        // V = x exp(-rho^2) in n=3, div V = (3 - 2 rho^2) exp(-rho^2).
        let rule = sphere_quadrature(3, 20).unwrap();
        let (r_in, r_out) = (0.5, 3.0);
        let radial = |x: &[f64]| {
            let rho2: f64 = x.iter().map(|c| c * c).sum();
            Ok(rho2.sqrt() * (-rho2).exp())
        };
        let div = |x: &[f64]| {
            let rho2: f64 = x.iter().map(|c| c * c).sum();
            Ok((3.0 - 2.0 * rho2) * (-rho2).exp())
        };
        let out_flux = surface_flux(radial, r_out, &rule).unwrap();
        let in_flux = surface_flux(radial, r_in, &rule).unwrap();
        let bulk = annulus_volume_integral(div, r_in, r_out, &rule, 40).unwrap();
        assert_relative_eq!(out_flux - in_flux, bulk, max_relative = 1e-7);
    }

    #[test]
    fn doubling_the_degree_leaves_analytic_integrals_alone() {
        let coarse = sphere_quadrature(4, 16).unwrap();
        let fine = sphere_quadrature(4, 32).unwrap();
        let field = |x: &[f64]| (0.7 * x[0] - 0.3 * x[2] + 0.11 * x[3]).exp();
        let a = coarse.integrate_unit(field);
        let b = fine.integrate_unit(field);
        assert!((a - b).abs() < 1e-9 * b.abs());
    }

    #[test]
    fn extrapolation_recovers_power_law_limits() {
        let radii = FluxSeries::default_ladder();
        let values: Vec<f64> = radii.iter().map(|r| 5.0 + 1.0 / (r * r)).collect();
        let fitted = extrapolate_limit(FluxSeries::new(radii, values).unwrap()).unwrap();
        assert!((fitted.limit.unwrap() - 5.0).abs() < 1e-6);
        assert!((fitted.exponent.unwrap() - 2.0).abs() < 0.05);
        assert!(fitted.converged);
        assert!(!fitted.exact);
    }

    #[test]
    fn constant_ladders_are_flagged_exact() {
        let radii = FluxSeries::default_ladder();
        let zero = extrapolate_limit(FluxSeries::new(radii.clone(), vec![0.0; 4]).unwrap()).unwrap();
        assert_eq!(zero.limit, Some(0.0));
        assert!(zero.exact && zero.converged);
        assert!(zero.exponent.is_none());

        let c = extrapolate_limit(FluxSeries::new(radii, vec![3.0; 4]).unwrap()).unwrap();
        assert_eq!(c.limit, Some(3.0));
        assert!(c.exact);
    }

    #[test]
    fn misfits_are_flagged_not_hidden() {
        // An oscillating ladder fits no decaying power; the flag must say so.
        let radii = vec![10.0, 20.0, 40.0, 80.0, 160.0];
        let values: Vec<f64> = radii.iter().map(|r: &f64| 2.0 + (0.9 * r).sin()).collect();
        let fitted = extrapolate_limit(FluxSeries::new(radii, values).unwrap()).unwrap();
        assert!(!fitted.converged);
        assert!(fitted.residual.unwrap() > 0.0);
    }

    #[test]
    fn ladder_validation_rejects_bad_input() {
        assert!(matches!(
            FluxSeries::new(vec![1.0, 1.0, 2.0, 3.0], vec![0.0; 4]),
            Err(IntegrateError::LadderNotIncreasing { index: 1 })
        ));
        assert!(matches!(
            extrapolate_limit(FluxSeries::new(vec![1.0, 2.0, 3.0], vec![0.0; 3]).unwrap()),
            Err(IntegrateError::ShortLadder(3))
        ));
        assert!(matches!(
            annulus_volume_integral(|_: &[f64]| Ok(1.0), 2.0, 1.0, &sphere_quadrature(3, 4).unwrap(), 4),
            Err(IntegrateError::BadShell { .. })
        ));
    }

    #[test]
    fn pairwise_sum_agrees_with_compensated_reference() {
        let mut state = 42u64;
        let xs: Vec<f64> = (0..1000).map(|_| lcg(&mut state) - 0.5).collect();
        // Kahan reference
        let (mut s, mut c) = (0.0f64, 0.0f64);
        for &x in &xs {
            let y = x - c;
            let t = s + y;
            c = (t - s) - y;
            s = t;
        }
        let p = pairwise_sum(&xs);
        assert!((p - s).abs() <= 1e-12 * s.abs().max(1.0));
        assert_eq!(p, pairwise_sum(&xs));
    }
}
