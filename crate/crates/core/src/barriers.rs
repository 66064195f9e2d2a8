//! Explicit barrier functions and their sampled certification.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{norm, sub, unit, SymMatrix};
use crate::operators::{pucci_minus_eigs, OperatorSpec, Problem};
use crate::sampling::{self, random_in_annulus, random_in_ball};

/// Number of annulus samples used to certify a barrier.
pub const CERT_SAMPLES: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BarrierKind {
    RadialSub,
    RadialSuper,
    Power,
    Exponential,
}

/// Closed-form barrier with value, gradient and Hessian.
///
/// * radial: `ψ(x) = C̃(e^{-γs²} − e^{-γ})` with `s = |x−c|/ρ` on `½ < s < 1`,
///   1 inside, 0 outside; the sub barrier is `δψ`, the super barrier `δ(1−ψ)`.
/// * power: `c̄(|x−c|^{-γ} − ρ^{-γ})` on `1/20 < |x−c| < ρ`, 1 inside, 0 outside.
/// * exponential: `C₁ − C₂e^{γx_d}`.
#[derive(Clone, Debug, Serialize)]
pub struct BarrierSpec {
    pub kind: BarrierKind,
    pub center: Vec<f64>,
    pub rho: f64,
    pub gamma: f64,
    pub delta: f64,
    /// Certified margin (0 until certified).
    pub sigma: f64,
    /// C̃, c̄ or C₂ depending on the kind.
    pub coeff: f64,
    /// C₁ for the exponential barrier, 0 otherwise.
    pub offset: f64,
}

/// Radius of the inner ball of the power barrier.
pub const POWER_INNER: f64 = 1.0 / 20.0;

impl BarrierSpec {
    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// (value, gradient, Hessian) at `x`.
    pub fn jet(&self, x: &[f64]) -> (f64, Vec<f64>, SymMatrix) {
        let d = self.dim();
        let y = sub(x, &self.center);
        let r = norm(&y);
        let zero = (0.0, vec![0.0; d], SymMatrix::zeros(d));
        match self.kind {
            BarrierKind::RadialSub | BarrierKind::RadialSuper => {
                let s = r / self.rho;
                let sign = if self.kind == BarrierKind::RadialSub { 1.0 } else { -1.0 };
                let base = if self.kind == BarrierKind::RadialSub { 0.0 } else { self.delta };
                if s <= 0.5 {
                    return (base + sign * self.delta, vec![0.0; d], SymMatrix::zeros(d));
                }
                if s >= 1.0 {
                    return (base, vec![0.0; d], SymMatrix::zeros(d));
                }
                let g = self.gamma;
                let e = (-g * s * s).exp();
                let amp = self.delta * self.coeff;
                let value = base + sign * amp * (e - (-g).exp());
                let k = -2.0 * amp * g * e / (self.rho * self.rho);
                let grad: Vec<f64> = y.iter().map(|v| sign * k * v).collect();
                let q = 2.0 * g / (self.rho * self.rho);
                let hess = SymMatrix::from_fn(d, |i, j| {
                    let id = if i == j { 1.0 } else { 0.0 };
                    sign * k * (id - q * y[i] * y[j])
                });
                (value, grad, hess)
            }
            BarrierKind::Power => {
                if r <= POWER_INNER {
                    return (1.0, vec![0.0; d], SymMatrix::zeros(d));
                }
                if r >= self.rho {
                    return zero;
                }
                let g = self.gamma;
                let c = self.coeff;
                let value = c * (r.powf(-g) - self.rho.powf(-g));
                let k = -c * g * r.powf(-g - 2.0);
                let grad: Vec<f64> = y.iter().map(|v| k * v).collect();
                let hess = SymMatrix::from_fn(d, |i, j| {
                    let id = if i == j { 1.0 } else { 0.0 };
                    k * (id - (g + 2.0) * y[i] * y[j] / (r * r))
                });
                (value, grad, hess)
            }
            BarrierKind::Exponential => {
                let g = self.gamma;
                let e = self.coeff * (g * x[d - 1]).exp();
                let mut grad = vec![0.0; d];
                grad[d - 1] = -g * e;
                let mut hess = SymMatrix::zeros(d);
                hess.set(d - 1, d - 1, -g * g * e);
                (self.offset - e, grad, hess)
            }
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.jet(x).0
    }

    /// Region on which the barrier inequality is certified: (inner, outer) radii.
    fn annulus(&self) -> (f64, f64) {
        match self.kind {
            BarrierKind::RadialSub | BarrierKind::RadialSuper => (0.5 * self.rho, self.rho),
            BarrierKind::Power => (POWER_INNER, self.rho),
            BarrierKind::Exponential => (0.0, 1.0),
        }
    }
}

/// Open-annulus sample avoiding the two spheres themselves.
fn annulus_point<R: rand::Rng>(rng: &mut R, center: &[f64], r_in: f64, r_out: f64) -> Vec<f64> {
    let pad = 1e-9 * r_out;
    random_in_annulus(rng, center, r_in + pad, r_out - pad)
}

/// Sampled margin of a barrier against `op`.
///
/// Radial sub barriers return `min F(D²ζ,∇ζ,x)`; radial super barriers and the
/// exponential barrier return `−max F`; power barriers return `min M⁻(D²ψ)`.
/// The barrier is certified when the returned value is positive.
pub fn certify(spec: &BarrierSpec, op: &OperatorSpec, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = sampling::rng(seed);
    let (r_in, r_out) = spec.annulus();
    let mut worst = f64::INFINITY;
    let mut worst_point = spec.center.clone();
    for _ in 0..samples {
        let x = match spec.kind {
            BarrierKind::Exponential => random_in_ball(&mut rng, &spec.center, 1.0),
            _ => annulus_point(&mut rng, &spec.center, r_in, r_out),
        };
        let (_, grad, hess) = spec.jet(&x);
        let m = match spec.kind {
            BarrierKind::RadialSub => op.eval(&hess, &grad, &x),
            BarrierKind::RadialSuper | BarrierKind::Exponential => -op.eval(&hess, &grad, &x),
            BarrierKind::Power => pucci_minus_eigs(&hess.eigenvalues(), op.lambda, op.big_lambda),
        };
        if m < worst {
            worst = m;
            worst_point = x;
        }
    }
    if !(worst > 0.0) {
        return Err(Error::BarrierFailure { point: worst_point, value: worst });
    }
    Ok(worst)
}

/// Smallest γ with unit slack in the worst case `s = ½` of the radial Hessian:
/// `λ(γ/2 − 1) − Λ(d−1) − Lip·ρ ≥ 1`.
pub fn radial_gamma(op: &OperatorSpec, rho: f64) -> f64 {
    let d = op.dim as f64;
    2.0 * (1.0 + op.lambda + op.big_lambda * (d - 1.0) + op.lip_grad * rho) / op.lambda
}

fn check_radial_input(rho: f64, delta: f64, gamma: f64) -> Result<()> {
    if !(rho > 0.0 && delta > 0.0 && gamma > 0.0) {
        return Err(Error::InvalidInput(format!(
            "radial barrier needs positive rho, delta, gamma; got ({rho}, {delta}, {gamma})"
        )));
    }
    Ok(())
}

/// Radial barrier of either kind with an explicit γ, certified on the annulus
/// `ρ/2 < |x − center| < ρ`.
#[allow(clippy::too_many_arguments)]
pub fn radial_barrier(
    kind: BarrierKind,
    center: &[f64],
    rho: f64,
    delta: f64,
    gamma: f64,
    op: &OperatorSpec,
    samples: usize,
    seed: u64,
) -> Result<(BarrierSpec, f64)> {
    check_radial_input(rho, delta, gamma)?;
    if !matches!(kind, BarrierKind::RadialSub | BarrierKind::RadialSuper) {
        return Err(Error::InvalidInput("radial_barrier builds radial kinds only".into()));
    }
    let coeff = 1.0 / ((-gamma / 4.0).exp() - (-gamma).exp());
    let mut spec = BarrierSpec {
        kind,
        center: center.to_vec(),
        rho,
        gamma,
        delta,
        sigma: 0.0,
        coeff,
        offset: 0.0,
    };
    let sigma = certify(&spec, op, samples, seed)?;
    spec.sigma = sigma;
    Ok((spec, sigma))
}

/// Radial subsolution `ζ = δψ` centered at the origin of `problem`.
pub fn radial_subsolution(rho: f64, delta: f64, problem: &Problem) -> Result<(BarrierSpec, f64)> {
    let gamma = radial_gamma(&problem.op, rho);
    let center = vec![0.0; problem.dim()];
    radial_barrier(BarrierKind::RadialSub, &center, rho, delta, gamma, &problem.op, CERT_SAMPLES, sampling::DEFAULT_SEED)
}

/// Radial supersolution `ζ̃ = δ(1 − ψ)` centered at the origin of `problem`.
pub fn radial_supersolution(rho: f64, delta: f64, problem: &Problem) -> Result<(BarrierSpec, f64)> {
    let gamma = radial_gamma(&problem.op, rho);
    let center = vec![0.0; problem.dim()];
    radial_barrier(BarrierKind::RadialSuper, &center, rho, delta, gamma, &problem.op, CERT_SAMPLES, sampling::DEFAULT_SEED)
}

/// Threshold exponent for the power barrier: `max(Λ(d−1)/λ − 1, 0)`.
pub fn power_threshold(dim: usize, lambda: f64, big_lambda: f64) -> f64 {
    (big_lambda * (dim as f64 - 1.0) / lambda - 1.0).max(0.0)
}

/// Power barrier equal to 1 on `|x − center| ≤ 1/20` and 0 outside radius ρ,
/// certified by `min M⁻(D²ψ) > 0` on the annulus in between.
pub fn power_barrier(center: &[f64], rho: f64, gamma: f64, lambda: f64, big_lambda: f64) -> Result<BarrierSpec> {
    let d = center.len();
    let thr = power_threshold(d, lambda, big_lambda);
    if !(gamma > thr) {
        return Err(Error::Precondition(format!("power barrier exponent {gamma} must exceed {thr}")));
    }
    if !(rho > POWER_INNER) {
        return Err(Error::InvalidInput(format!("outer radius {rho} must exceed {POWER_INNER}")));
    }
    let coeff = 1.0 / (POWER_INNER.powf(-gamma) - rho.powf(-gamma));
    let mut spec = BarrierSpec {
        kind: BarrierKind::Power,
        center: center.to_vec(),
        rho,
        gamma,
        delta: 1.0,
        sigma: 0.0,
        coeff,
        offset: 0.0,
    };
    let pucci = OperatorSpec::pucci_minus(d, lambda, big_lambda)?;
    spec.sigma = certify(&spec, &pucci, CERT_SAMPLES, sampling::DEFAULT_SEED)?;
    Ok(spec)
}

/// Closed form `w = C₁ − C₂e^{γx_d}` with
/// `γ = Lip/λ + 1`, `C₂ = max(1, ‖f‖e^γ/(γ(λγ − Lip)))` and
/// `C₁ = C₂e^γ + max(minorant, datum, 0) + 1`.
///
/// The returned margin is `−max F(D²w,∇w,x) − ‖f‖` over the unit ball, so a
/// non-negative value certifies `F(D²w,∇w,x) ≤ −‖f‖`.
pub fn exponential_supersolution(
    problem: &Problem,
    f_bound: f64,
    minorant_bound: f64,
    datum_bound: f64,
) -> Result<(BarrierSpec, f64)> {
    for (name, v) in [("f_bound", f_bound), ("minorant_bound", minorant_bound), ("datum_bound", datum_bound)] {
        if !v.is_finite() {
            return Err(Error::InvalidInput(format!("{name} must be finite")));
        }
    }
    let op = &problem.op;
    let d = problem.dim();
    let gamma = op.lip_grad / op.lambda + 1.0;
    let slope = gamma * (op.lambda * gamma - op.lip_grad);
    let c2 = (f_bound.abs() * gamma.exp() / slope).max(1.0);
    let c1 = c2 * gamma.exp() + minorant_bound.max(datum_bound).max(0.0) + 1.0;
    let mut spec = BarrierSpec {
        kind: BarrierKind::Exponential,
        center: vec![0.0; d],
        rho: 1.0,
        gamma,
        delta: 1.0,
        sigma: 0.0,
        coeff: c2,
        offset: c1,
    };
    let neg_max = certify(&spec, op, CERT_SAMPLES, sampling::DEFAULT_SEED).unwrap_or(f64::NEG_INFINITY);
    let margin = neg_max - f_bound.abs();
    if margin < -1e-12 * (1.0 + f_bound.abs()) {
        return Err(Error::BarrierFailure { point: unit(d, d - 1), value: margin });
    }
    spec.sigma = margin.max(0.0);
    Ok((spec, margin))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{BoundaryLaw, Rhs};

    fn laplace_problem(d: usize) -> Problem {
        Problem::unit_ball(OperatorSpec::laplace(d), Rhs::constant(0.0), BoundaryLaw::constant(d, 1.0).unwrap()).unwrap()
    }

    #[test]
    fn radial_boundary_values() {
        let pb = laplace_problem(2);
        let (sub, _) = radial_subsolution(1.0, 1.0, &pb).unwrap();
        let (sup, _) = radial_supersolution(1.0, 1.0, &pb).unwrap();
        for x in [[0.5, 0.0], [0.0, -0.5]] {
            assert!((sub.value(&x) - 1.0).abs() < 1e-12);
            assert!(sup.value(&x).abs() < 1e-12);
        }
        assert!(sub.value(&[0.0, 1.0]).abs() < 1e-12);
        assert!((sup.value(&[1.0, 0.0]) - 1.0).abs() < 1e-12);
        let p = [0.3, 0.6];
        assert!((sub.value(&p) + sup.value(&p) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unit_gamma_fails_honest_certification() {
        let op = OperatorSpec::laplace(2);
        let r = radial_barrier(BarrierKind::RadialSub, &[0.0, 0.0], 1.0, 1.0, 1.0, &op, 1000, 1);
        assert!(matches!(r, Err(Error::BarrierFailure { .. })));
    }

    #[test]
    fn power_threshold_examples() {
        assert_eq!(power_threshold(2, 1.0, 1.0), 0.0);
        assert_eq!(power_threshold(3, 1.0, 2.0), 3.0);
        assert!(matches!(power_barrier(&[0.0; 3], 0.5, 3.0, 1.0, 2.0), Err(Error::Precondition(_))));
    }
}
