//! Polynomial class, flatness measurement and the quadratic
//! improvement-of-flatness iteration.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{lattice_offsets, GridField};
use crate::linalg::{
    dot, fit_loglog, least_squares, mat_vec, norm, normalized, rotation_to_last_axis, sub, transpose, unit, Mat,
    SymMatrix,
};
use crate::oblique::{linearize, pointwise_expansion, solve_oblique, ObliqueProblem};
use crate::operators::{choose_delta, compute_tau, measure_iof_moduli, IofParams, OperatorSpec, Problem, rescale};

/// Homogeneous quadratic `p(x) = ½ M x·x`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuadPoly {
    pub m: SymMatrix,
}

impl QuadPoly {
    pub fn new(m: SymMatrix) -> Self {
        QuadPoly { m }
    }

    pub fn zero(dim: usize) -> Self {
        QuadPoly { m: SymMatrix::zeros(dim) }
    }

    pub fn dim(&self) -> usize {
        self.m.dim()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        0.5 * self.m.quad(x)
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        self.m.mul_vec(x)
    }

    /// `‖p‖_{L∞(B_r)} = ½ r² max |μᵢ|`.
    pub fn sup_on_ball(&self, r: f64) -> f64 {
        let e = self.m.eigenvalues();
        0.5 * r * r * e.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    pub fn sub(&self, other: &QuadPoly) -> QuadPoly {
        QuadPoly { m: self.m.sub(&other.m) }
    }

    pub fn scale(&self, s: f64) -> QuadPoly {
        QuadPoly { m: self.m.scale(s) }
    }

    /// `x ↦ p(R x)`.
    pub fn compose_rotation(&self, r: &Mat) -> QuadPoly {
        QuadPoly { m: self.m.congruence(&transpose(r)) }
    }
}

/// Something that can be sampled like a solution: a grid field (bilinear
/// interpolation) or a closed-form function.
pub trait Datum {
    fn value(&self, x: &[f64]) -> Option<f64>;
    /// Grid spacing of the underlying data; 0 for exact formulas.
    fn resolution(&self) -> f64;
}

impl Datum for GridField {
    fn value(&self, x: &[f64]) -> Option<f64> {
        self.interpolate(x)
    }

    fn resolution(&self) -> f64 {
        self.h()
    }
}

pub struct Formula<F: Fn(&[f64]) -> f64>(pub F);

impl<F: Fn(&[f64]) -> f64> Datum for Formula<F> {
    fn value(&self, x: &[f64]) -> Option<f64> {
        Some((self.0)(x))
    }

    fn resolution(&self) -> f64 {
        0.0
    }
}

/// Smallest admissible |τ′_ℓ| in the polynomial adjustment.
pub const TAU_MIN: f64 = 1e-6;

fn check_unit(nu: &[f64]) -> Result<()> {
    if (norm(nu) - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidInput(format!("direction is not a unit vector (|nu| = {})", norm(nu))));
    }
    Ok(())
}

/// Symmetric correction of `s0` so that `(S τ′)_j = ξ′_j` for `j < d`, i.e.
/// `∇p·τ′ = ξ′·x` on `{x_d = 0}`. Only row and column ℓ = argmax |τ′ᵢ| change.
pub fn sigma_correct(s0: &SymMatrix, tau: &[f64], xi: &[f64]) -> Result<SymMatrix> {
    let d = s0.dim();
    let l = (0..d).max_by(|&a, &b| tau[a].abs().total_cmp(&tau[b].abs())).unwrap_or(0);
    let tl = tau[l];
    if tl.abs() < TAU_MIN {
        return Err(Error::Precondition(format!("all components of tau' are below {TAU_MIN}")));
    }
    let st = s0.mul_vec(tau);
    let r: Vec<f64> = (0..d).map(|j| xi[j] - st[j]).collect();
    let mut s = s0.clone();
    let mut sigma = vec![0.0; d];
    for j in 0..d.saturating_sub(1) {
        if j != l {
            sigma[j] = r[j] / tl;
            s.set(l, j, s.get(l, j) + sigma[j]);
        }
    }
    if l < d - 1 {
        let cross: f64 = (0..d - 1).filter(|&k| k != l).map(|k| sigma[k] * tau[k]).sum();
        s.set(l, l, s.get(l, l) + (r[l] - cross) / tl);
    }
    Ok(s)
}

/// Largest defect of `∇p·τ = ξ·x` over a basis of `{x·ν = 0}`.
pub fn oblique_defect(p: &QuadPoly, tau: &[f64], xi: &[f64], nu: &[f64]) -> f64 {
    let d = p.dim();
    let rt = transpose(&rotation_to_last_axis(nu));
    (0..d - 1)
        .map(|k| {
            let b = mat_vec(&rt, &unit(d, k));
            (dot(&p.grad(&b), tau) - dot(xi, &b)).abs()
        })
        .fold(0.0, f64::max)
}

/// Defects of both defining conditions of the polynomial class at direction ν:
/// (oblique condition, equation residual).
pub fn polynomial_defects(p: &QuadPoly, problem: &Problem, nu: &[f64]) -> Result<(f64, f64)> {
    let d = problem.dim();
    let zero = vec![0.0; d];
    let tau = compute_tau(&problem.law, nu, &zero)?;
    let xi = problem.law.grad_x(&zero, nu);
    let g = problem.law.g(&zero, nu);
    let xi_f: Vec<f64> = nu.iter().map(|v| g * v).collect();
    let eq = (problem.op.eval(&p.m, &xi_f, &zero) - problem.f.eval(&zero)).abs();
    Ok((oblique_defect(p, &tau, &xi, nu), eq))
}

/// Unit vector orthogonal to τ: the normalized projection of the last axis,
/// or of the first axis when τ is parallel to the last one.
pub fn tau_perp(tau: &[f64]) -> Vec<f64> {
    let d = tau.len();
    let t = normalized(tau).expect("tau is nonzero");
    for k in [d - 1, 0] {
        let e = unit(d, k);
        let proj: Vec<f64> = e.iter().zip(&t).map(|(a, b)| a - dot(&e, &t) * b).collect();
        if norm(&proj) > 1e-8 {
            return normalized(&proj).unwrap();
        }
    }
    unit(d, 0)
}

/// Adds `t τ⊥⊗τ⊥` so that `F(M, g(0,ν)ν, 0) = f(0)`; `t` by bisection.
fn equation_correct(m: &SymMatrix, problem: &Problem, nu: &[f64], tau: &[f64]) -> Result<SymMatrix> {
    let d = problem.dim();
    let zero = vec![0.0; d];
    let g = problem.law.g(&zero, nu);
    let xi: Vec<f64> = nu.iter().map(|v| g * v).collect();
    let f0 = problem.f.eval(&zero);
    let tp = tau_perp(tau);
    let dir = SymMatrix::outer(&tp);
    let phi = |t: f64| problem.op.eval(&m.add_scaled(t, &dir), &xi, &zero) - f0;
    let p0 = phi(0.0);
    if p0 == 0.0 {
        return Ok(m.clone());
    }
    let (lam, big) = (problem.op.lambda, problem.op.big_lambda);
    let (mut lo, mut hi) = if p0 > 0.0 { (-p0 / lam, -p0 / big) } else { (-p0 / big, -p0 / lam) };
    let pad = 1e-12 * (1.0 + lo.abs() + hi.abs());
    lo -= pad;
    hi += pad;
    let mut grow = 0;
    while !(phi(lo) <= 0.0 && phi(hi) >= 0.0) {
        let w = (hi - lo).max(1e-12);
        lo -= w;
        hi += w;
        grow += 1;
        if grow > 60 {
            return Err(Error::Invariant("no sign change bracketing the equation correction".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if phi(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let t = if phi(lo).abs() <= phi(hi).abs() { lo } else { hi };
    Ok(m.add_scaled(t, &dir))
}

/// A member of the polynomial class at direction ν for `problem` (already
/// rescaled; everything is evaluated at the origin).
pub fn construct_polynomial(problem: &Problem, nu: &[f64]) -> Result<QuadPoly> {
    check_unit(nu)?;
    let d = problem.dim();
    let zero = vec![0.0; d];
    let g = problem.law.g(&zero, nu);
    if !(g > 0.0) || g < problem.law.gamma0 * (1.0 - 1e-12) {
        return Err(Error::BoundaryLawNotElliptic(g));
    }
    let tau = compute_tau(&problem.law, nu, &zero)?;
    let xi = problem.law.grad_x(&zero, nu);
    let r = rotation_to_last_axis(nu);
    let s = sigma_correct(&SymMatrix::zeros(d), &mat_vec(&r, &tau), &mat_vec(&r, &xi))?;
    let m = s.congruence(&transpose(&r));
    Ok(QuadPoly::new(equation_correct(&m, problem, nu, &tau)?))
}

fn entry_scale(m: &SymMatrix, tau: &[f64], tau2: &[f64]) -> SymMatrix {
    let w: Vec<f64> = tau
        .iter()
        .zip(tau2)
        .map(|(&t, &t2)| {
            let q = if t2.abs() > TAU_MIN { t / t2 } else { f64::NAN };
            if q.is_finite() && (q - 1.0).abs() <= 0.5 {
                q
            } else {
                1.0
            }
        })
        .collect();
    SymMatrix::from_fn(m.dim(), |i, j| 0.5 * (w[i] + w[j]) * m.get(i, j))
}

/// Moves `p` (oblique condition for (τ, ξ) on `{x_d = 0}`) to a nearby
/// polynomial with `∇p′·τ′ = ξ′·x` on `{x·ν′ = 0}`: entry scaling by τᵢ/τ′ᵢ and
/// a row-ℓ correction, then the same in the frame where ν′ is the last axis.
pub fn adjust_polynomial(
    p: &QuadPoly,
    tau: &[f64],
    tau2: &[f64],
    xi: &[f64],
    xi2: &[f64],
    nu2: &[f64],
) -> Result<QuadPoly> {
    check_unit(nu2)?;
    let d = p.dim();
    if [tau, tau2, xi, xi2, nu2].iter().any(|v| v.len() != d) {
        return Err(Error::InvalidInput("vector dimension mismatch".into()));
    }
    if tau2.iter().all(|t| t.abs() < TAU_MIN) {
        return Err(Error::Precondition(format!("all components of tau' are below {TAU_MIN}")));
    }
    let tilde = sigma_correct(&entry_scale(&p.m, tau, tau2), tau2, xi2)?;
    let r = rotation_to_last_axis(nu2);
    let (rt2, rx2) = (mat_vec(&r, tau2), mat_vec(&r, xi2));
    let bar = sigma_correct(&entry_scale(&tilde, tau2, &rt2), &rt2, &rx2)?;
    Ok(QuadPoly::new(bar).compose_rotation(&r))
}

/// Unit vector in the direction `g₀ ν_base + r_amp · correction`.
pub fn renormalize_direction(nu_base: &[f64], g0: f64, correction: &[f64], r_amp: f64) -> Result<Vec<f64>> {
    if !(g0 > 0.0) {
        return Err(Error::BoundaryLawNotElliptic(g0));
    }
    let v: Vec<f64> = nu_base.iter().zip(correction).map(|(n, c)| g0 * n + r_amp * c).collect();
    normalized(&v).ok_or_else(|| Error::Invariant("renormalized direction vanished".into()))
}

pub fn default_spacing(dim: usize) -> f64 {
    if dim <= 2 {
        1.0 / 64.0
    } else {
        1.0 / 20.0
    }
}

/// Smallest ε with `(P − ε)₊ ≤ u_{x₀,r} ≤ (P + ε)₊` on lattice points of B₁,
/// `P(x) = g(x₀,ν)(x·ν) + p(x)`.
pub fn measure_flatness(
    u: &dyn Datum,
    x0: &[f64],
    r: f64,
    nu: &[f64],
    p: &QuadPoly,
    problem: &Problem,
) -> Result<f64> {
    check_unit(nu)?;
    let d = problem.dim();
    let g0 = problem.law.g(x0, nu);
    if !(g0 > 0.0) {
        return Err(Error::BoundaryLawNotElliptic(g0));
    }
    let res = u.resolution();
    let ux0 = u.value(x0).ok_or_else(|| Error::Domain(format!("{x0:?} outside the data")))?;
    let thr = (2.0 * res * g0).max(1e-9);
    if ux0.abs() > thr {
        return Err(Error::Precondition(format!("u(x0) = {ux0:e} exceeds the free boundary threshold {thr:e}")));
    }
    // node-aligned lattice when the data live on a grid
    let base = default_spacing(d);
    let s = if res > 0.0 { res / r * (base * r / res).max(1.0).ceil() } else { base };
    let k = (1.0 / s + 1e-9).floor() as i64;
    let mut eps = 0.0f64;
    let mut x = vec![0.0; d];
    let mut y = vec![0.0; d];
    let mut visit = |o: &[i64]| -> Result<()> {
        for i in 0..d {
            x[i] = o[i] as f64 * s;
        }
        if norm(&x) > 1.0 + 1e-12 {
            return Ok(());
        }
        for i in 0..d {
            y[i] = x0[i] + r * x[i];
        }
        let v = u.value(&y).ok_or_else(|| Error::Domain(format!("B_{r}({x0:?}) leaves the data")))? / r;
        let pp = g0 * dot(&x, nu) + p.eval(&x);
        let e = if v > 0.0 { (v - pp).abs() } else { pp.max(0.0) };
        eps = eps.max(e);
        Ok(())
    };
    visit(&vec![0; d])?;
    for o in lattice_offsets(d, k) {
        visit(&o)?;
    }
    Ok(eps)
}

#[derive(Clone, Debug, Serialize)]
pub struct FlatnessParams {
    pub rho: f64,
    pub r0: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Initial scale; `None` picks it from the measured moduli, raised to the grid floor.
    pub delta: Option<f64>,
    pub oblique_h: f64,
    /// Threshold of the flatness precondition at the initial scale; `None` means ½ g(x₀,ν).
    pub eps0: Option<f64>,
    /// A scale is resolution-bound once it spans fewer than this many grid cells.
    pub floor_cells: f64,
    pub max_iters: usize,
    pub check_moduli: bool,
    pub seed: u64,
}

impl Default for FlatnessParams {
    fn default() -> Self {
        FlatnessParams {
            rho: 0.25,
            r0: 1.0 / 32.0,
            alpha: 0.25,
            beta: 0.5,
            delta: None,
            oblique_h: 1.0 / 32.0,
            eps0: None,
            floor_cells: 4.0,
            max_iters: 12,
            check_moduli: false,
            seed: crate::sampling::DEFAULT_SEED,
        }
    }
}

impl FlatnessParams {
    fn iof(&self) -> IofParams {
        IofParams { rho: self.rho, r0: self.r0, alpha: self.alpha, beta: self.beta, samples: 200, seed: self.seed }
    }
}

/// `α = min(α₀, β)/2` with α₀ the measured Taylor exponent surplus (capped at 1).
pub fn default_alpha(alpha0: f64, beta: f64) -> f64 {
    0.5 * alpha0.clamp(0.0, 1.0).min(beta)
}

#[derive(Clone, Debug, Serialize)]
pub struct FlatnessRecord {
    pub n: usize,
    pub rho_n: f64,
    pub r_n: f64,
    pub nu: Vec<f64>,
    pub p: QuadPoly,
    pub eps: f64,
    /// ε_n ≤ r_n^{1+α}.
    pub flat: bool,
    pub resolution_bound: bool,
    /// |ν_n − ν_{n−1}|.
    pub nu_step: f64,
    /// ‖p_n/ρ − p_{n−1}‖_{L∞(B₁)}.
    pub p_step: f64,
    pub moduli_pass: Option<bool>,
    pub oblique_sweeps: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct FlatnessTrace {
    pub x0: Vec<f64>,
    pub delta: f64,
    pub params: FlatnessParams,
    pub records: Vec<FlatnessRecord>,
    /// max over steps of max(|ν_{n+1}−ν_n|, ‖p′_n−p_n‖)/r_n^{1+α}.
    pub c_bar: f64,
    pub halted: Option<String>,
}

impl FlatnessTrace {
    /// Starts a trace at scale δ with direction ν₀ and p₀ from the polynomial class.
    pub fn start(
        u: &dyn Datum,
        x0: &[f64],
        problem: &Problem,
        nu0: &[f64],
        delta: f64,
        params: FlatnessParams,
    ) -> Result<Self> {
        let resc = rescale(problem, x0, delta)?;
        let p0 = construct_polynomial(&resc.problem, nu0)?;
        let eps = measure_flatness(u, x0, delta, nu0, &p0, problem)?;
        let mut trace =
            FlatnessTrace { x0: x0.to_vec(), delta, params, records: Vec::new(), c_bar: 0.0, halted: None };
        let moduli_pass = trace.moduli(problem, 0)?;
        trace.records.push(FlatnessRecord {
            n: 0,
            rho_n: delta,
            r_n: trace.params.r0,
            nu: nu0.to_vec(),
            p: p0,
            eps,
            flat: eps <= trace.params.r0.powf(1.0 + trace.params.alpha),
            resolution_bound: trace.bound(u, delta),
            nu_step: 0.0,
            p_step: 0.0,
            moduli_pass,
            oblique_sweeps: 0,
        });
        Ok(trace)
    }

    pub fn rho_n(&self, n: usize) -> f64 {
        self.delta * self.params.rho.powi(n as i32)
    }

    pub fn r_n(&self, n: usize) -> f64 {
        self.params.r0 * self.params.rho.powi(n as i32)
    }

    pub fn last(&self) -> &FlatnessRecord {
        self.records.last().expect("trace is never empty")
    }

    fn bound(&self, u: &dyn Datum, rho: f64) -> bool {
        let res = u.resolution();
        res > 0.0 && rho < self.params.floor_cells * res
    }

    fn moduli(&self, problem: &Problem, n: usize) -> Result<Option<bool>> {
        if !self.params.check_moduli {
            return Ok(None);
        }
        Ok(Some(measure_iof_moduli(problem, &self.x0, self.delta, n, &self.params.iof())?.all_pass()))
    }

    /// Fitted slope of log ε_n against log r_n over records above the noise
    /// level and off the grid floor.
    pub fn decay_exponent(&self) -> Option<f64> {
        let pts: Vec<(f64, f64)> =
            self.records.iter().filter(|r| !r.resolution_bound && r.eps > 1e-12).map(|r| (r.r_n, r.eps)).collect();
        (pts.len() >= 2).then(|| {
            let (xs, ys): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            fit_loglog(&xs, &ys)
        })
    }

    pub fn to_csv(&self) -> String {
        let d = self.x0.len();
        let mut s = String::from("n,rho_n,r_n,eps_n");
        for i in 0..d {
            let _ = write!(s, ",nu_{i}");
        }
        for i in 0..d {
            for j in i..d {
                let _ = write!(s, ",m_{i}{j}");
            }
        }
        s.push('\n');
        for r in &self.records {
            let _ = write!(s, "{},{:e},{:e},{:e}", r.n, r.rho_n, r.r_n, r.eps);
            for v in &r.nu {
                let _ = write!(s, ",{v:e}");
            }
            for v in r.p.m.upper() {
                let _ = write!(s, ",{v:e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// One step of the quadratic improvement of flatness at the last record.
pub fn improve_flatness(u: &dyn Datum, mut trace: FlatnessTrace, problem: &Problem) -> Result<FlatnessTrace> {
    let d = problem.dim();
    let zero = vec![0.0; d];
    let cur = trace.last().clone();
    let n = cur.n;
    let rho_n = trace.rho_n(n);
    let resc = rescale(problem, &trace.x0, rho_n)?;
    let pb = &resc.problem;
    let law = &pb.law;
    let nu = cur.nu.clone();
    let r = rotation_to_last_axis(&nu);
    let rt = transpose(&r);
    let g0 = law.g(&zero, &nu);
    if !(g0 > 0.0) {
        return Err(Error::BoundaryLawNotElliptic(g0));
    }
    let tau = compute_tau(law, &nu, &zero)?;
    let xi = law.grad_x(&zero, &nu);
    let mut tau_r = mat_vec(&r, &tau);
    if (tau_r[d - 1] - 1.0).abs() > 1e-9 {
        return Err(Error::Invariant(format!("tau·nu = {} differs from 1", tau_r[d - 1])));
    }
    tau_r[d - 1] = 1.0;
    let m_r = cur.p.m.congruence(&r);
    let amp = cur.eps.max(1e-14);

    // linearized datum in the frame where ν_n is the last axis
    let op_r: OperatorSpec = pb.op.rotated(&r);
    let mut xi_lin = vec![0.0; d];
    xi_lin[d - 1] = g0;
    let lin = linearize(&op_r, &m_r, xi_lin, amp)?;
    let oprob = ObliqueProblem::new(lin, tau_r.clone(), trace.params.oblique_h)?;
    let x0 = trace.x0.clone();
    let data = |z: &[f64]| {
        let y: Vec<f64> = x0.iter().zip(mat_vec(&rt, z)).map(|(a, b)| a + rho_n * b).collect();
        match u.value(&y) {
            Some(v) => (v / rho_n - g0 * z[d - 1] - 0.5 * m_r.quad(z)) / amp,
            None => f64::NAN,
        }
    };
    let (field, stats) = solve_oblique(&oprob, data)?;
    if field.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("B_{rho_n}({:?}) leaves the data", trace.x0)));
    }
    let exp = pointwise_expansion(&field)?;

    // new direction
    let nu_next = renormalize_direction(&nu, g0, &mat_vec(&rt, &exp.grad0), amp)?;
    // Hessian correction compatible with the current oblique condition
    let w = sigma_correct(&exp.hess0, &tau_r, &vec![0.0; d])?;
    let p_bar = m_r.add_scaled(amp, &w);
    let tau2 = compute_tau(law, &nu_next, &zero)?;
    let xi2 = law.grad_x(&zero, &nu_next);
    let xi_r = mat_vec(&r, &xi);
    let tilde =
        adjust_polynomial(&QuadPoly::new(p_bar), &tau_r, &mat_vec(&r, &tau2), &xi_r, &mat_vec(&r, &xi2), &mat_vec(&r, &nu_next))?;
    let m_tilde = tilde.m.congruence(&rt);
    let p_prime = equation_correct(&m_tilde, pb, &nu_next, &tau2)?;

    let rho = trace.params.rho;
    let p_next = QuadPoly::new(p_prime.scale(rho));
    let rho_next = trace.rho_n(n + 1);
    let eps_next = measure_flatness(u, &trace.x0, rho_next, &nu_next, &p_next, problem)?;
    let nu_step = norm(&sub(&nu_next, &nu));
    let p_step = QuadPoly::new(p_prime.sub(&cur.p.m)).sup_on_ball(1.0);
    let rn = trace.r_n(n);
    trace.c_bar = trace.c_bar.max(nu_step.max(p_step) / rn.powf(1.0 + trace.params.alpha));
    let bound = trace.bound(u, rho_next);
    let moduli_pass = trace.moduli(problem, n + 1)?;
    let r_next = trace.r_n(n + 1);
    trace.records.push(FlatnessRecord {
        n: n + 1,
        rho_n: rho_next,
        r_n: r_next,
        nu: nu_next,
        p: p_next,
        eps: eps_next,
        flat: eps_next <= r_next.powf(1.0 + trace.params.alpha),
        resolution_bound: bound,
        nu_step,
        p_step,
        moduli_pass,
        oblique_sweeps: stats.sweeps,
    });
    // interpolation error of the data, in rescaled units, carried into p
    let res = u.resolution();
    let grid_noise = res * res / rho_next * (1.0 + cur.p.m.norm_inf() / rho_n);
    if !bound && !cur.resolution_bound && eps_next > cur.eps + FLATNESS_NOISE + grid_noise {
        trace.halted = Some(format!("flatness did not decrease at step {}: {:e} -> {:e}", n + 1, cur.eps, eps_next));
    }
    Ok(trace)
}

/// Flatness differences below this are treated as rounding.
pub const FLATNESS_NOISE: f64 = 1e-10;

#[derive(Clone, Debug, Serialize)]
pub struct TaylorReport {
    pub nu: Vec<f64>,
    /// Expansion polynomial in unscaled variables.
    pub p: QuadPoly,
    /// (r, sup_{B_r(x₀)∩{u>0}} |u(x₀+y) − g(x₀,ν)(y·ν) − p(y)|).
    pub profile: Vec<(f64, f64)>,
    pub exponent: Option<f64>,
    /// The errors reached the grid or rounding floor before a rate could be fitted.
    pub resolution_bound: bool,
    /// The iteration stopped before the grid floor (see `trace.halted`).
    pub partial: bool,
    pub trace: FlatnessTrace,
}

/// Direction of the least-squares linear fit of the positive samples near x₀.
fn estimate_direction(u: &dyn Datum, x0: &[f64], radius: f64, gamma0: f64) -> Result<Vec<f64>> {
    let d = x0.len();
    let k = 8i64;
    let s = radius / k as f64;
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for o in lattice_offsets(d, k) {
        let x: Vec<f64> = o.iter().map(|&v| v as f64 * s).collect();
        if norm(&x) > radius {
            continue;
        }
        let y: Vec<f64> = x0.iter().zip(&x).map(|(a, b)| a + b).collect();
        if let Some(v) = u.value(&y) {
            if v > 0.0 {
                let mut row = vec![1.0];
                row.extend_from_slice(&x);
                rows.push(row);
                rhs.push(v);
            }
        }
    }
    let c = least_squares(&rows, &rhs)?;
    let b = &c[1..];
    if norm(b) < 0.5 * gamma0 {
        return Err(Error::Precondition(format!(
            "no linear term near the free boundary point (|slope| = {:.3e} < γ₀/2)",
            norm(b)
        )));
    }
    Ok(normalized(b).unwrap())
}

fn expansion_error(u: &dyn Datum, x0: &[f64], r: f64, g: f64, nu: &[f64], p: &QuadPoly) -> f64 {
    let d = x0.len();
    let res = u.resolution();
    let s = if res > 0.0 { res * (r / (16.0 * res)).floor().max(1.0) } else { r / 16.0 };
    let k = (r / s + 1e-9).floor() as i64;
    let mut worst = 0.0f64;
    for o in lattice_offsets(d, k) {
        let x: Vec<f64> = o.iter().map(|&v| v as f64 * s).collect();
        if norm(&x) > r {
            continue;
        }
        let y: Vec<f64> = x0.iter().zip(&x).map(|(a, b)| a + b).collect();
        if let Some(v) = u.value(&y) {
            if v > 0.0 {
                worst = worst.max((v - g * dot(&x, nu) - p.eval(&x)).abs());
            }
        }
    }
    worst
}

/// Runs the improvement of flatness at x₀ down to the grid floor and fits the
/// rate of the resulting second-order expansion.
pub fn taylor_expand_at_fb(
    u: &dyn Datum,
    x0: &[f64],
    problem: &Problem,
    nu0: Option<&[f64]>,
    params: FlatnessParams,
) -> Result<TaylorReport> {
    let d = problem.dim();
    let res = u.resolution();
    let room = problem.radius - norm(&sub(x0, &problem.center));
    if room <= 0.0 {
        return Err(Error::Domain(format!("{x0:?} lies outside the domain")));
    }
    let floor = params.floor_cells * res / (params.rho * params.rho);
    let delta = match params.delta {
        Some(v) => v,
        None => choose_delta(problem, x0, &params.iof())?.max(floor).min(room).min(1.0),
    };
    let nu = match nu0 {
        Some(v) => {
            check_unit(v)?;
            v.to_vec()
        }
        None => estimate_direction(u, x0, (0.25 * delta).max(4.0 * res), problem.law.gamma0)?,
    };
    let g = problem.law.g(x0, &nu);
    let eps0 = params.eps0.unwrap_or(0.5 * g);
    let flat0 = measure_flatness(u, x0, delta, &nu, &QuadPoly::zero(d), problem)?;
    if flat0 > eps0 {
        return Err(Error::Precondition(format!(
            "not flat at scale {delta}: ε = {flat0:.3e} exceeds {eps0:.3e}"
        )));
    }
    let max_iters = params.max_iters;
    let mut trace = FlatnessTrace::start(u, x0, problem, &nu, delta, params)?;
    while trace.records.len() <= max_iters && trace.halted.is_none() && !trace.last().resolution_bound {
        trace = improve_flatness(u, trace, problem)?;
    }
    let last = trace.records.iter().rev().find(|r| !r.resolution_bound).unwrap_or(trace.last());
    let p = last.p.scale(1.0 / last.rho_n);
    let nu = last.nu.clone();
    let g = problem.law.g(x0, &nu);
    let r_min = if res > 0.0 { params_floor(&trace, res) } else { delta * 1e-3 };
    let mut profile = Vec::new();
    let mut r = delta;
    while r >= r_min && profile.len() < 16 {
        profile.push((r, expansion_error(u, x0, r, g, &nu, &p)));
        r *= 0.5;
    }
    let noise = 1e-12 * (1.0 + g);
    let usable: Vec<&(f64, f64)> = profile.iter().filter(|e| e.1 > noise).collect();
    let exponent = (usable.len() >= 3).then(|| {
        let xs: Vec<f64> = usable.iter().map(|e| e.0).collect();
        let ys: Vec<f64> = usable.iter().map(|e| e.1).collect();
        fit_loglog(&xs, &ys)
    });
    let partial = trace.halted.is_some();
    Ok(TaylorReport {
        nu,
        p,
        resolution_bound: exponent.is_none() || res > 0.0 && trace.last().resolution_bound,
        exponent,
        profile,
        partial,
        trace,
    })
}

fn params_floor(trace: &FlatnessTrace, res: f64) -> f64 {
    trace.params.floor_cells * res
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{BoundaryLaw, Rhs};

    fn laplace_problem(d: usize, f: f64, law: BoundaryLaw) -> Problem {
        Problem::unit_ball(OperatorSpec::laplace(d), Rhs::constant(f), law).unwrap()
    }

    #[test]
    fn constant_data_gives_zero_polynomial() {
        let pb = laplace_problem(2, 0.0, BoundaryLaw::constant(2, 1.0).unwrap());
        let p = construct_polynomial(&pb, &[0.0, 1.0]).unwrap();
        assert!(p.m.norm_inf() < 1e-14);
    }

    #[test]
    fn quadratic_in_normal_direction_is_admissible() {
        let pb = laplace_problem(2, 0.7, BoundaryLaw::constant(2, 1.0).unwrap());
        let p = QuadPoly::new(SymMatrix::diag(&[0.0, 0.7]));
        let (ob, eq) = polynomial_defects(&p, &pb, &[0.0, 1.0]).unwrap();
        assert!(ob < 1e-14 && eq < 1e-14);
        let q = construct_polynomial(&pb, &[0.0, 1.0]).unwrap();
        let (ob, eq) = polynomial_defects(&q, &pb, &[0.0, 1.0]).unwrap();
        assert!(ob < 1e-10 && eq < 1e-10);
    }

    #[test]
    fn affine_law_gives_mixed_term() {
        let pb = laplace_problem(3, 0.0, BoundaryLaw::affine_x(1.0, vec![0.2, -0.1, 0.0]).unwrap());
        let p = construct_polynomial(&pb, &[0.0, 0.0, 1.0]).unwrap();
        // p = x_d (a·x′)
        assert!((p.m.get(0, 2) - 0.2).abs() < 1e-14);
        assert!((p.m.get(1, 2) + 0.1).abs() < 1e-14);
        assert!(p.m.get(0, 0).abs() < 1e-14 && p.m.get(2, 2).abs() < 1e-14);
    }

    #[test]
    fn construct_tilted_pucci() {
        let op = OperatorSpec::pucci_minus(2, 1.0, 2.0).unwrap();
        let pb = Problem::unit_ball(op, Rhs::constant(0.3), BoundaryLaw::angular(2, 1.0, 0.2, 0).unwrap()).unwrap();
        let nu = normalized(&[0.3, 1.0]).unwrap();
        let p = construct_polynomial(&pb, &nu).unwrap();
        let (ob, eq) = polynomial_defects(&p, &pb, &nu).unwrap();
        assert!(ob < 1e-10 && eq < 1e-10, "{ob} {eq}");
    }

    #[test]
    fn adjust_identity_and_substitution() {
        let p = QuadPoly::new(SymMatrix::from_upper(2, vec![0.3, 0.0, 1.0]).unwrap());
        let e2 = [0.0, 1.0];
        let same = adjust_polynomial(&p, &e2, &e2, &[0.0, 0.0], &[0.0, 0.0], &e2).unwrap();
        assert!(same.sub(&p).m.norm_inf() < 1e-15);
        let c = 1.0;
        let p = QuadPoly::new(SymMatrix::diag(&[0.0, c]));
        let a = 0.05;
        let q = adjust_polynomial(&p, &e2, &e2, &[0.0, 0.0], &[a, 0.0], &e2).unwrap();
        assert!((q.m.get(0, 1) - a).abs() < 1e-15 && (q.m.get(1, 1) - c).abs() < 1e-15);
    }

    #[test]
    fn adjust_rejects_vanishing_tau() {
        let p = QuadPoly::zero(2);
        let r = adjust_polynomial(&p, &[0.0, 1.0], &[1e-9, 1e-9], &[0.0; 2], &[0.0; 2], &[0.0, 1.0]);
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn renormalize_examples() {
        let b = [0.0, 1.0];
        assert_eq!(renormalize_direction(&b, 1.0, &[0.0, 0.0], 1.0).unwrap(), b.to_vec());
        let v = renormalize_direction(&b, 2.0, &[0.0, 5.0], 0.1).unwrap();
        assert!((v[1] - 1.0).abs() < 1e-15);
        let v = renormalize_direction(&b, 1.0, &[1.0, 0.0], 1e-3).unwrap();
        assert!((v[0] - 1e-3).abs() < 1e-6 && (v[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn half_plane_is_flat() {
        let pb = laplace_problem(2, 0.0, BoundaryLaw::constant(2, 1.0).unwrap());
        let u = Formula(|x: &[f64]| x[1].max(0.0));
        let e = measure_flatness(&u, &[0.0, 0.0], 0.5, &[0.0, 1.0], &QuadPoly::zero(2), &pb).unwrap();
        assert!(e < 1e-15);
        let th = 0.02f64;
        let tilted = [th.sin(), th.cos()];
        let e = measure_flatness(&u, &[0.0, 0.0], 0.5, &tilted, &QuadPoly::zero(2), &pb).unwrap();
        assert!((e - th.sin()).abs() < 0.1 * th.sin(), "{e}");
    }

    #[test]
    fn flatness_requires_free_boundary_point() {
        let pb = laplace_problem(2, 0.0, BoundaryLaw::constant(2, 1.0).unwrap());
        let u = Formula(|x: &[f64]| (x[1] + 0.3).max(0.0));
        assert!(matches!(
            measure_flatness(&u, &[0.0, 0.0], 0.5, &[0.0, 1.0], &QuadPoly::zero(2), &pb),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let pb = laplace_problem(2, 1.0, BoundaryLaw::constant(2, 1.0).unwrap());
        let u = Formula(|x: &[f64]| (x[1] + 0.5 * x[1] * x[1]).max(0.0));
        let t = FlatnessTrace::start(&u, &[0.0, 0.0], &pb, &[0.0, 1.0], 0.5, FlatnessParams::default()).unwrap();
        let csv = t.to_csv();
        assert!(csv.starts_with("n,rho_n,r_n,eps_n,nu_0,nu_1,m_00,m_01,m_11\n"));
        assert_eq!(csv.lines().count(), 2);
    }
}
