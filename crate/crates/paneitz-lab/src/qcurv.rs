//! Fourth-order curvature quantities: Q-curvature (two independent
//! algebraic routes), the Paneitz operator, conformal transformation
//! checks, and the field-equation tensor of quadratic curvature
//! functionals together with its divergence audit.

use crate::geometry::{curvature_at, CurvaturePack, GeomError, JetTensor, MetricJet};
use crate::jets::{Jet, JetError};
use crate::tensors::Variance;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QcurvError {
    #[error("needs jets of order at least {need}, metric carries {have}")]
    OrderTooLow { need: usize, have: usize },
    #[error("not defined in dimension {n}: {what}")]
    Dimension { n: usize, what: String },
    #[error("conformal mode '{mode}' does not apply in dimension {n}")]
    ModeMismatch { n: usize, mode: String },
    #[error("conformal factor must be positive, got {value}")]
    NonPositiveFactor { value: f64 },
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Jet(#[from] JetError),
}

/// Q-curvature at a point, computed along two algebraically independent
/// routes that must agree: the direct formula in (Delta R, |Ric|^2, R^2)
/// and the sigma-polynomial form in the Schouten tensor.
#[derive(Debug, Clone)]
pub struct QCurvature {
    pub value: f64,
    pub sigma_form: f64,
    /// Jet of the direct form, order K - 4.
    pub jet: Jet,
}

fn require_order(metric: &MetricJet, need: usize) -> Result<(), QcurvError> {
    if metric.order() < need {
        return Err(QcurvError::OrderTooLow { need, have: metric.order() });
    }
    Ok(())
}

fn require_dim(metric: &MetricJet, what: &str) -> Result<(), QcurvError> {
    if metric.dim() < 3 {
        return Err(QcurvError::Dimension { n: metric.dim(), what: what.to_string() });
    }
    Ok(())
}

/// Direct form:
///   Q = -Delta R / (2(n-1)) - 2 |Ric|^2 / (n-2)^2 + c_n R^2,
///   c_n = (n^3 - 4n^2 + 16n - 16) / (8 (n-1)^2 (n-2)^2).
fn q_direct(pack: &CurvaturePack) -> Result<Jet, QcurvError> {
    let nf = pack.dim() as f64;
    let r = pack.scalar_jet();
    let lap_r = pack.laplace_beltrami(r)?;
    let target = lap_r.order();
    let ric = pack.ricci_tensor();
    let ric2 = pack.inner_product_jets(&ric, &ric)?.truncated(target);
    let r2 = r.mul_jet(r).truncated(target);
    let c = (nf.powi(3) - 4.0 * nf * nf + 16.0 * nf - 16.0)
        / (8.0 * (nf - 1.0).powi(2) * (nf - 2.0).powi(2));
    let mut q = lap_r.scale(-1.0 / (2.0 * (nf - 1.0)));
    q = &q + &ric2.scale(-2.0 / (nf - 2.0).powi(2));
    q = &q + &r2.scale(c);
    Ok(q)
}

/// Sigma form: Q = -Delta sigma1 + 4 sigma2(S) + (n-4)/2 sigma1^2, with
/// sigma1 = tr S, sigma2 = (sigma1^2 - |S|^2)/2 in the Schouten tensor.
fn q_sigma(pack: &CurvaturePack) -> Result<Jet, QcurvError> {
    let nf = pack.dim() as f64;
    let s = pack.schouten_tensor().ok_or_else(|| QcurvError::Dimension {
        n: pack.dim(),
        what: "the Schouten tensor needs n >= 3".to_string(),
    })?;
    let sigma1 = pack.scalar_jet().scale(1.0 / (2.0 * (nf - 1.0)));
    let lap_s1 = pack.laplace_beltrami(&sigma1)?;
    let target = lap_s1.order();
    let s2 = pack.inner_product_jets(&s, &s)?.truncated(target);
    let s1sq = sigma1.mul_jet(&sigma1).truncated(target);
    let sigma2 = (&s1sq - &s2).scale(0.5);
    let mut q = lap_s1.scale(-1.0);
    q = &q + &sigma2.scale(4.0);
    q = &q + &s1sq.scale((nf - 4.0) / 2.0);
    Ok(q)
}

/// Q-curvature of the metric at its base point, both routes. Needs jets
/// of order >= 4 (for Delta R) and dimension >= 3.
pub fn q_curvature(metric: &MetricJet) -> Result<QCurvature, QcurvError> {
    require_order(metric, 4)?;
    require_dim(metric, "Q-curvature")?;
    let pack = curvature_at(metric)?;
    let direct = q_direct(&pack)?;
    let sigma = q_sigma(&pack)?;
    Ok(QCurvature { value: direct.value(), sigma_form: sigma.value(), jet: direct })
}

/// The Paneitz operator applied to a scalar jet:
///   P u = Delta^2 u + div( T(grad u, .) ) + (n-4)/2 Q u,
///   T = 4 S - (n-2) sigma1 g.
/// Output jet has order min(order u, K) - 4.
pub fn paneitz_apply(metric: &MetricJet, u: &Jet) -> Result<Jet, QcurvError> {
    require_order(metric, 4)?;
    require_dim(metric, "the Paneitz operator")?;
    if u.order() < 4 {
        return Err(QcurvError::OrderTooLow { need: 4, have: u.order() });
    }
    let n = metric.dim();
    let nf = n as f64;
    let pack = curvature_at(metric)?;

    let lap_u = pack.laplace_beltrami(u)?;
    let lap2_u = pack.laplace_beltrami(&lap_u)?;
    let target = lap2_u.order();

    // T = 4 S - (n-2) sigma1 g as explicit component jets
    let s = pack.schouten_tensor().ok_or_else(|| QcurvError::Dimension {
        n,
        what: "the Schouten tensor needs n >= 3".to_string(),
    })?;
    let sigma1 = pack.scalar_jet().scale(1.0 / (2.0 * (nf - 1.0)));
    let t_order = s.order();
    let mut t = JetTensor::zeros(n, t_order, vec![Variance::Down, Variance::Down]);
    for i in 0..n {
        for j in 0..n {
            let tij = &s.get(&[i, j]).scale(4.0)
                - &sigma1
                    .mul_jet(pack.metric_jet(i, j))
                    .truncated(t_order)
                    .scale(nf - 2.0);
            t.set(&[i, j], tij);
        }
    }

    // V^j = g^{jl} T_{lk} (grad u)^k
    let grad = pack.gradient_vector(u)?;
    let v_order = t_order.min(grad.order());
    let mut w = vec![Jet::zero(n, v_order); n];
    for (l, slot) in w.iter_mut().enumerate() {
        let mut acc = Jet::zero(n, v_order);
        for k in 0..n {
            acc = &acc + &t.get(&[l, k]).mul_jet(grad.get(&[k])).truncated(v_order);
        }
        *slot = acc;
    }
    let mut v = JetTensor::zeros(n, v_order, vec![Variance::Up]);
    for j in 0..n {
        let mut acc = Jet::zero(n, v_order);
        for (l, wl) in w.iter().enumerate() {
            acc = &acc + &pack.inverse_jet(j, l).mul_jet(wl).truncated(v_order);
        }
        v.set(&[j], acc);
    }
    let div_v = pack.divergence_vector(&v)?;

    let q = q_direct(&pack)?;
    let qu = q.mul_jet(&u.truncated(q.order().min(u.order())));

    let mut out = lap2_u.truncated(target);
    out = &out + &div_v.truncated(target);
    out = &out + &qu.truncated(target).scale((nf - 4.0) / 2.0);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Conformal factors and transformation checks
// ---------------------------------------------------------------------------

/// A pointwise conformal change ghat = w g, with w derived from a scalar
/// jet under one of the three exponent conventions.
#[derive(Debug, Clone)]
pub enum ConformalFactor {
    /// ghat = u^{4/(n-4)} g; the fourth-order convention, n != 4.
    Power { u: Jet },
    /// ghat = e^{2 phi} g; the n = 4 convention.
    Exponential { phi: Jet },
    /// ghat = u^{4/(n-2)} g; the second-order convention.
    Yamabe { u: Jet },
}

impl ConformalFactor {
    fn mode_name(&self) -> &'static str {
        match self {
            ConformalFactor::Power { .. } => "power",
            ConformalFactor::Exponential { .. } => "exponential",
            ConformalFactor::Yamabe { .. } => "yamabe",
        }
    }

    /// The metric weight w with ghat = w g.
    pub fn weight_jet(&self, n: usize) -> Result<Jet, QcurvError> {
        match self {
            ConformalFactor::Power { u } => {
                if n == 4 {
                    return Err(QcurvError::ModeMismatch { n, mode: "power".to_string() });
                }
                if u.value() <= 0.0 {
                    return Err(QcurvError::NonPositiveFactor { value: u.value() });
                }
                Ok(u.powf(4.0 / (n as f64 - 4.0))?)
            }
            ConformalFactor::Exponential { phi } => Ok(phi.scale(2.0).exp()),
            ConformalFactor::Yamabe { u } => {
                if u.value() <= 0.0 {
                    return Err(QcurvError::NonPositiveFactor { value: u.value() });
                }
                Ok(u.powf(4.0 / (n as f64 - 2.0))?)
            }
        }
    }

    /// Componentwise scaled metric ghat = w g as a fresh jet bundle.
    pub fn scale_metric(&self, metric: &MetricJet) -> Result<MetricJet, QcurvError> {
        let n = metric.dim();
        let w = self.weight_jet(n)?;
        let mut comps = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                comps.push(w.mul_jet(metric.component(i, j)));
            }
        }
        Ok(MetricJet::new(metric.base().to_vec(), comps)?)
    }
}

/// Both sides of the Q-curvature transformation law at the base point.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TransformCheck {
    /// Q of the scaled metric, computed from its own curvature.
    pub direct: f64,
    /// The same value predicted through the Paneitz operator of g.
    pub via_paneitz: f64,
    pub defect: f64,
}

/// Verify the conformal transformation law of Q at the base point:
///   n != 4:  Q_ghat = 2/(n-4) u^{-(n+4)/(n-4)} P_g u,   ghat = u^{4/(n-4)} g
///   n  = 4:  Q_ghat = e^{-4 phi} (P_g phi + Q_g),        ghat = e^{2 phi} g
/// The `direct` side never touches P_g; the two routes share no curvature
/// algebra beyond the jets of g itself.
pub fn q_transform_check(
    metric: &MetricJet,
    factor: &ConformalFactor,
) -> Result<TransformCheck, QcurvError> {
    let n = metric.dim();
    let nf = n as f64;
    let (direct, via_paneitz) = match factor {
        ConformalFactor::Power { u } if n != 4 => {
            let ghat = factor.scale_metric(metric)?;
            let direct = q_curvature(&ghat)?.value;
            let pu = paneitz_apply(metric, u)?;
            let predicted =
                2.0 / (nf - 4.0) * u.value().powf(-(nf + 4.0) / (nf - 4.0)) * pu.value();
            (direct, predicted)
        }
        ConformalFactor::Exponential { phi } if n == 4 => {
            let ghat = factor.scale_metric(metric)?;
            let direct = q_curvature(&ghat)?.value;
            let p_phi = paneitz_apply(metric, phi)?;
            let qg = q_curvature(metric)?.value;
            let predicted = (-4.0 * phi.value()).exp() * (p_phi.value() + qg);
            (direct, predicted)
        }
        other => {
            return Err(QcurvError::ModeMismatch { n, mode: other.mode_name().to_string() })
        }
    };
    Ok(TransformCheck { direct, via_paneitz, defect: (direct - via_paneitz).abs() })
}

/// Conformal covariance of the Paneitz operator itself (n != 4):
///   P_ghat(phi) = u^{-(n+4)/(n-4)} P_g(u phi),   ghat = u^{4/(n-4)} g.
/// Returns the absolute defect between the two sides at the base point.
pub fn paneitz_covariance_check(
    metric: &MetricJet,
    u: &Jet,
    phi: &Jet,
) -> Result<f64, QcurvError> {
    let n = metric.dim();
    if n == 4 {
        return Err(QcurvError::ModeMismatch { n, mode: "power".to_string() });
    }
    let nf = n as f64;
    let factor = ConformalFactor::Power { u: u.clone() };
    let ghat = factor.scale_metric(metric)?;
    let lhs = paneitz_apply(&ghat, phi)?.value();
    let rhs = u.value().powf(-(nf + 4.0) / (nf - 4.0))
        * paneitz_apply(metric, &u.mul_jet(phi))?.value();
    Ok((lhs - rhs).abs())
}

// ---------------------------------------------------------------------------
// Quadratic curvature field equations
// ---------------------------------------------------------------------------

/// Field-equation tensor of the quadratic functional
/// S = integral( alpha R^2 + beta |Ric|^2 ):
///   A = beta BoxRic + (beta/2 + 2 alpha) (BoxR) g - (2 alpha + beta) Hess R
///       - 2 beta Ric.Riem + 2 alpha R Ric - (alpha/2) R^2 g
///       - (beta/2) |Ric|^2 g,
/// with (Ric.Riem)_{ij} = Ric^{kl} R_{kijl}. Component jets have order
/// K - 4; Lorentzian metrics are welcome (Box is the d'Alembertian there).
pub fn a_tensor(metric: &MetricJet, alpha: f64, beta: f64) -> Result<JetTensor, QcurvError> {
    require_order(metric, 4)?;
    require_dim(metric, "the quadratic field equations")?;
    let n = metric.dim();
    let pack = curvature_at(metric)?;

    let r = pack.scalar_jet();
    let ric = pack.ricci_tensor();
    let box_ric = pack.box_tensor(&ric)?;
    let box_r = pack.laplace_beltrami(r)?;
    let hess_r = pack.covariant_hessian_jets(r)?;
    let target = box_ric.order().min(box_r.order()).min(hess_r.order());

    let ric_up = pack.raise_slot(&pack.raise_slot(&ric, 0)?, 1)?;
    let ric2 = pack.inner_product_jets(&ric, &ric)?.truncated(target);
    let r2 = r.mul_jet(r).truncated(target);

    let mut out = JetTensor::zeros(n, target, vec![Variance::Down, Variance::Down]);
    for i in 0..n {
        for j in 0..n {
            let g_ij = pack.metric_jet(i, j).truncated(target);
            let mut acc = box_ric.get(&[i, j]).truncated(target).scale(beta);
            acc = &acc
                + &box_r.truncated(target).mul_jet(&g_ij).scale(beta / 2.0 + 2.0 * alpha);
            acc = &acc - &hess_r.get(&[i, j]).truncated(target).scale(2.0 * alpha + beta);
            // (Ric.Riem)_{ij}
            let mut rr = Jet::zero(n, target);
            for k in 0..n {
                for l in 0..n {
                    rr = &rr
                        + &ric_up
                            .get(&[k, l])
                            .mul_jet(pack.riemann_down_jet(k, i, j, l))
                            .truncated(target);
                }
            }
            acc = &acc - &rr.scale(2.0 * beta);
            acc = &acc
                + &r.truncated(target)
                    .mul_jet(&ric.get(&[i, j]).truncated(target))
                    .scale(2.0 * alpha);
            acc = &acc - &r2.mul_jet(&g_ij).scale(alpha / 2.0);
            acc = &acc - &ric2.mul_jet(&g_ij).scale(beta / 2.0);
            out.set(&[i, j], acc);
        }
    }
    Ok(out)
}

/// The generalized Bianchi identity: the field-equation tensor of any
/// diffeomorphism-invariant functional is divergence-free, identically,
/// for every metric. `max_defect` is max_j |(div A)_j| at the base point;
/// `scale` is the size of the covariant derivative of A for comparison.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DivergenceCheck {
    pub max_defect: f64,
    pub scale: f64,
}

pub fn a_divergence_check(
    metric: &MetricJet,
    alpha: f64,
    beta: f64,
) -> Result<DivergenceCheck, QcurvError> {
    require_order(metric, 5)?;
    let a = a_tensor(metric, alpha, beta)?;
    let pack = curvature_at(metric)?;
    let div = pack.divergence_two_tensor(&a)?;
    let n = metric.dim();
    let mut max_defect = 0.0f64;
    for j in 0..n {
        max_defect = max_defect.max(div.get(&[j]).value().abs());
    }
    let grad_a = pack.covariant_derivative(&a)?;
    let scale = grad_a.max_abs_value();
    Ok(DivergenceCheck { max_defect, scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::laplace_beltrami;
    use crate::metrics::{
        build_family, bump, flat, minkowski, round_s4_chart, schwarzschild_slice,
        schwarzschild_spacetime, sphere_stereo, FamilyParams,
    };
    use approx::assert_relative_eq;

    fn gaussian_bump_jet(dim: usize, order: usize, point: &[f64], amp: f64) -> Jet {
        // 1 + amp * exp(-|x - c|^2 / 4) with c displaced from the origin
        let zs = Jet::coords(order, point);
        let mut q = Jet::zero(dim, order);
        for (i, z) in zs.iter().enumerate() {
            let shifted = z.add_scalar(-0.3 - 0.1 * i as f64);
            q = &q + &shifted.mul_jet(&shifted);
        }
        q.scale(-0.25).exp().scale(amp).add_scalar(1.0)
    }

    #[test]
    fn flat_space_has_zero_q_and_trivial_paneitz() {
        for n in [4usize, 5] {
            let fam = flat(n);
            let point: Vec<f64> = (0..n).map(|i| 0.3 * i as f64 - 0.4).collect();
            let mj = fam.jets_at(&point, 4).unwrap();
            let q = q_curvature(&mj).unwrap();
            assert!(q.value.abs() < 1e-14);
            assert!(q.sigma_form.abs() < 1e-14);

            // |x|^2 is biharmonic; so is r^{4-n} away from the origin
            let zs = Jet::coords(4, &point);
            let mut r2 = Jet::zero(n, 4);
            for z in &zs {
                r2 = &r2 + &z.mul_jet(z);
            }
            let p1 = paneitz_apply(&mj, &r2).unwrap();
            assert!(p1.value().abs() < 1e-12, "P(|x|^2) = {}", p1.value());
            if n == 5 {
                let kernel = r2.sqrt().unwrap().recip().unwrap();
                let p2 = paneitz_apply(&mj, &kernel).unwrap();
                assert!(p2.value().abs() < 1e-10, "P(1/r) = {}", p2.value());
            }
        }
    }

    #[test]
    fn round_spheres_hit_the_closed_form() {
        // Q(S^n, radius 1) = n(n^2-4)/8; radius a scales it by a^{-4}.
        for n in [3usize, 4, 5] {
            let fam = sphere_stereo(n, 1.0).unwrap();
            let point: Vec<f64> = (0..n).map(|i| 0.2 - 0.15 * i as f64).collect();
            let q = q_curvature(&fam.jets_at(&point, 4).unwrap()).unwrap();
            let want = (n as f64) * ((n * n) as f64 - 4.0) / 8.0;
            assert_relative_eq!(q.value, want, max_relative = 1e-9);
            assert_relative_eq!(q.sigma_form, want, max_relative = 1e-9);
        }
        let fam = sphere_stereo(4, 2.0).unwrap();
        let q = q_curvature(&fam.jets_at(&[0.5, 0.1, -0.2, 0.3], 4).unwrap()).unwrap();
        assert_relative_eq!(q.value, 0.375, max_relative = 1e-9);
    }

    #[test]
    fn both_q_routes_agree_on_a_messy_metric() {
        let fam = bump(4, 0.05).unwrap();
        for point in [[3.0, 1.0, -0.5, 0.8], [4.5, -1.2, 0.3, 0.2]] {
            let q = q_curvature(&fam.jets_at(&point, 4).unwrap()).unwrap();
            assert!(
                (q.value - q.sigma_form).abs() <= 1e-10 * q.value.abs().max(1.0),
                "direct {} vs sigma {}",
                q.value,
                q.sigma_form
            );
            assert!(q.value.abs() > 1e-6, "bump point should carry curvature");
        }
    }

    #[test]
    fn paneitz_on_constants_reduces_to_the_q_term() {
        // P(c) = (n-4)/2 Q c: zero in dimension four, Q/2 on the unit S^5.
        let s4 = round_s4_chart();
        let mj = s4.jets_at(&[0.1, -0.3, 0.4, 0.2], 4).unwrap();
        let p = paneitz_apply(&mj, &Jet::constant(4, 4, 2.5)).unwrap();
        assert!(p.value().abs() < 1e-12);

        let s5 = sphere_stereo(5, 1.0).unwrap();
        let mj = s5.jets_at(&[0.1, -0.3, 0.4, 0.2, 0.0], 4).unwrap();
        let p = paneitz_apply(&mj, &Jet::constant(5, 4, 1.0)).unwrap();
        let q = q_curvature(&mj).unwrap().value;
        assert_relative_eq!(p.value(), q / 2.0, max_relative = 1e-9);
    }

    #[test]
    fn q_transforms_conformally_in_five_and_six_dimensions() {
        for n in [5usize, 6] {
            let fam = bump(n, 0.02).unwrap();
            let point: Vec<f64> = (0..n).map(|i| if i == 0 { 3.2 } else { 0.4 - 0.2 * i as f64 }).collect();
            let mj = fam.jets_at(&point, 4).unwrap();
            let u = gaussian_bump_jet(n, 4, &point, 0.2);
            let check =
                q_transform_check(&mj, &ConformalFactor::Power { u }).unwrap();
            assert!(
                check.defect <= 1e-8 * check.direct.abs().max(1.0),
                "n = {n}: {} vs {}",
                check.direct,
                check.via_paneitz
            );
        }
    }

    #[test]
    fn q_transforms_conformally_in_dimension_four() {
        let fam = bump(4, 0.02).unwrap();
        let point = [3.0, 0.8, -0.6, 0.4];
        let mj = fam.jets_at(&point, 4).unwrap();
        let zs = Jet::coords(4, &point);
        let phi = zs[0].scale(0.05);
        let check = q_transform_check(&mj, &ConformalFactor::Exponential { phi }).unwrap();
        assert!(
            check.defect <= 1e-8 * check.direct.abs().max(1.0),
            "{} vs {}",
            check.direct,
            check.via_paneitz
        );

        // identity factor: ghat = g, both sides equal Q_g
        let ident = ConformalFactor::Exponential { phi: Jet::zero(4, 4) };
        let check = q_transform_check(&mj, &ident).unwrap();
        assert!(check.defect < 1e-12);
    }

    #[test]
    fn paneitz_is_conformally_covariant() {
        let fam = schwarzschild_slice(5, 0.4).unwrap();
        let point = [1.4, -0.6, 0.8, 0.3, 1.0];
        let mj = fam.jets_at(&point, 4).unwrap();
        let u = gaussian_bump_jet(5, 4, &point, 0.15);
        let zs = Jet::coords(4, &point);
        let phi = &zs[1].scale(0.3) + &zs[2].mul_jet(&zs[0]).scale(0.05);
        let defect = paneitz_covariance_check(&mj, &u, &phi).unwrap();
        let scale = paneitz_apply(&mj, &u.mul_jet(&phi)).unwrap().value().abs();
        assert!(defect <= 1e-8 * scale.max(1.0), "covariance defect {defect}");
    }

    #[test]
    fn conformal_mode_mismatches_are_rejected() {
        let mj = flat(5).jets_at(&[0.1, 0.2, 0.3, 0.4, 0.5], 4).unwrap();
        let phi = Jet::zero(5, 4);
        match q_transform_check(&mj, &ConformalFactor::Exponential { phi }) {
            Err(QcurvError::ModeMismatch { n: 5, .. }) => {}
            other => panic!("expected mode mismatch, got {other:?}"),
        }
        let mj4 = flat(4).jets_at(&[0.1, 0.2, 0.3, 0.4], 4).unwrap();
        let u = Jet::constant(4, 4, 1.0);
        match q_transform_check(&mj4, &ConformalFactor::Power { u }) {
            Err(QcurvError::ModeMismatch { n: 4, .. }) => {}
            other => panic!("expected mode mismatch, got {other:?}"),
        }
    }

    #[test]
    fn field_equations_vanish_on_flat_and_ricci_flat_spacetimes() {
        let mink = minkowski(4);
        let a = a_tensor(&mink.jets_at(&[0.3, 1.0, -2.0, 0.5], 4).unwrap(), 0.7, 1.3).unwrap();
        assert_eq!(a.max_abs_value(), 0.0);

        let schw = schwarzschild_spacetime(1.0).unwrap();
        let mj = schw.jets_at(&[0.0, 2.5, 1.0, -0.8], 4).unwrap();
        let a = a_tensor(&mj, 0.7, 1.3).unwrap();
        assert!(a.max_abs_value() < 1e-8, "A on Schwarzschild = {}", a.max_abs_value());
    }

    #[test]
    fn field_equations_vanish_on_the_round_sphere() {
        // In dimension four every Einstein metric solves the quadratic
        // field equations, for any (alpha, beta).
        let fam = round_s4_chart();
        let mj = fam.jets_at(&[0.4, -0.1, 0.3, 0.2], 4).unwrap();
        let a = a_tensor(&mj, 0.9, -0.35).unwrap();
        assert!(a.max_abs_value() < 1e-9, "A on S^4 = {}", a.max_abs_value());
    }

    #[test]
    fn trace_identity_pins_the_coefficients_in_dimension_four() {
        // g^{ij} A_ij = (6 alpha + 2 beta) Box R in dimension four.
        let fam = bump(4, 0.01).unwrap();
        let point = [3.4, 0.9, -0.7, 0.5];
        let mj = fam.jets_at(&point, 6).unwrap();
        let (alpha, beta) = (0.7, -1.1);
        let a = a_tensor(&mj, alpha, beta).unwrap();
        let pack = curvature_at(&mj).unwrap();
        let mut trace = Jet::zero(4, a.order());
        for i in 0..4 {
            for j in 0..4 {
                trace = &trace
                    + &pack.inverse_jet(i, j).mul_jet(a.get(&[i, j])).truncated(a.order());
            }
        }
        let box_r = pack.laplace_beltrami(pack.scalar_jet()).unwrap();
        let want = (6.0 * alpha + 2.0 * beta) * box_r.value();
        assert_relative_eq!(trace.value(), want, max_relative = 1e-8, epsilon = 1e-12);
        assert!(want.abs() > 1e-8, "test point should have Box R != 0");
    }

    #[test]
    fn field_equations_are_divergence_free() {
        // Generalized Bianchi: div A = 0 identically, separately in the
        // alpha and beta parts. A random quartic bump supplies a metric
        // with no special structure.
        let fam = bump(4, 0.01).unwrap();
        let point = [3.1, 1.2, -0.4, 0.6];
        let mj = fam.jets_at(&point, 5).unwrap();
        for (alpha, beta) in [(1.0, 0.0), (0.0, 1.0)] {
            let check = a_divergence_check(&mj, alpha, beta).unwrap();
            assert!(
                check.max_defect <= 1e-6,
                "alpha={alpha}, beta={beta}: div A = {} (scale {})",
                check.max_defect,
                check.scale
            );
            assert!(check.scale > 1e-9, "derivatives of A should not vanish here");
        }
    }

    #[test]
    fn order_gates_report_cleanly() {
        let mj = flat(4).jets_at(&[0.0; 4], 3).unwrap();
        match q_curvature(&mj) {
            Err(QcurvError::OrderTooLow { need: 4, have: 3 }) => {}
            other => panic!("expected order error, got {other:?}"),
        }
        let mj = flat(4).jets_at(&[0.0; 4], 4).unwrap();
        match a_divergence_check(&mj, 1.0, 1.0) {
            Err(QcurvError::OrderTooLow { need: 5, have: 4 }) => {}
            other => panic!("expected order error, got {other:?}"),
        }
    }

    #[test]
    fn blowup_charts_carry_constant_q_on_spheres() {
        // sanity hookup between modules: laplace of Q on the round sphere
        // vanishes (Q is constant), via the family registry path.
        let fam = build_family("round_s4_chart", &FamilyParams::default()).unwrap();
        let mj = fam.jets_at(&[0.2, 0.1, -0.3, 0.4], 6).unwrap();
        let q = q_curvature(&mj).unwrap();
        let lap_q = laplace_beltrami(&q.jet, &mj.truncated(2)).unwrap();
        assert!(lap_q.value().abs() < 1e-8, "Delta Q on S^4 = {}", lap_q.value());
    }
}
