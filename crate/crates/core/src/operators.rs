//! Fully nonlinear operators in the class E(λ,Λ), right-hand sides, free
//! boundary laws, the rescaling family and the oblique vector τ.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Mat, SymMatrix, mat_vec, transpose};
use crate::sampling::{self, random_in_ball, random_sym, random_unit, random_vec};

type OpFn = dyn Fn(&SymMatrix, &[f64], &[f64]) -> f64 + Send + Sync;
type PointFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type LawFn = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;
type LawVecFn = dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync;

fn check_constants(lambda: f64, big_lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda <= big_lambda && big_lambda.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "ellipticity constants must satisfy 0 < lambda <= Lambda, got ({lambda}, {big_lambda})"
        )));
    }
    Ok(())
}

/// `Λ Σ_{μ>0} μ + λ Σ_{μ<0} μ` over precomputed eigenvalues.
#[inline]
pub fn pucci_plus_eigs(eigs: &[f64], lambda: f64, big_lambda: f64) -> f64 {
    eigs.iter().map(|&m| if m > 0.0 { big_lambda * m } else { lambda * m }).sum()
}

/// `λ Σ_{μ>0} μ + Λ Σ_{μ<0} μ` over precomputed eigenvalues.
#[inline]
pub fn pucci_minus_eigs(eigs: &[f64], lambda: f64, big_lambda: f64) -> f64 {
    eigs.iter().map(|&m| if m > 0.0 { lambda * m } else { big_lambda * m }).sum()
}

/// Maximal Pucci operator M⁺(N).
pub fn pucci_plus(n: &SymMatrix, lambda: f64, big_lambda: f64) -> Result<f64> {
    check_constants(lambda, big_lambda)?;
    if !n.is_finite() {
        return Err(Error::InvalidInput("matrix has non-finite entries".into()));
    }
    Ok(pucci_plus_eigs(&n.eigenvalues(), lambda, big_lambda))
}

/// Minimal Pucci operator M⁻(N).
pub fn pucci_minus(n: &SymMatrix, lambda: f64, big_lambda: f64) -> Result<f64> {
    check_constants(lambda, big_lambda)?;
    if !n.is_finite() {
        return Err(Error::InvalidInput("matrix has non-finite entries".into()));
    }
    Ok(pucci_minus_eigs(&n.eigenvalues(), lambda, big_lambda))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Concavity {
    Concave,
    Convex,
    Neither,
}

/// Structural information the discrete schemes use for fast paths.
#[derive(Clone, Debug)]
pub enum OpKind {
    /// `tr(A M) + b·ξ`, no x-dependence.
    Linear { a: SymMatrix, b: Vec<f64> },
    PucciMinus,
    PucciPlus,
    General,
}

/// A fully nonlinear operator F(M, ξ, x) with its declared structure constants.
#[derive(Clone)]
pub struct OperatorSpec {
    pub name: String,
    pub dim: usize,
    pub lambda: f64,
    pub big_lambda: f64,
    /// Declared Lipschitz seminorm in the gradient variable.
    pub lip_grad: f64,
    /// Hölder exponent β of the x-dependence.
    pub holder_beta: f64,
    /// Declared Hölder seminorm in x (0 for x-independent operators).
    pub holder_seminorm: f64,
    pub concavity: Concavity,
    pub kind: OpKind,
    eval: Arc<OpFn>,
}

impl fmt::Debug for OperatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OperatorSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("lambda", &self.lambda)
            .field("Lambda", &self.big_lambda)
            .field("lip_grad", &self.lip_grad)
            .finish()
    }
}

/// Names accepted by [`OperatorSpec::from_name`].
pub const OPERATOR_NAMES: [&str; 4] = ["laplace", "pucci_minus", "pucci_plus", "bellman"];

impl OperatorSpec {
    #[inline]
    pub fn eval(&self, m: &SymMatrix, xi: &[f64], x: &[f64]) -> f64 {
        (self.eval)(m, xi, x)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn custom(
        name: &str,
        dim: usize,
        lambda: f64,
        big_lambda: f64,
        lip_grad: f64,
        concavity: Concavity,
        f: impl Fn(&SymMatrix, &[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        check_constants(lambda, big_lambda)?;
        Ok(OperatorSpec {
            name: name.to_string(),
            dim,
            lambda,
            big_lambda,
            lip_grad,
            holder_beta: 1.0,
            holder_seminorm: 0.0,
            concavity,
            kind: OpKind::General,
            eval: Arc::new(f),
        })
    }

    /// `tr(A M) + b·ξ`; λ, Λ are the extreme eigenvalues of `A`.
    pub fn linear(a: SymMatrix, b: Vec<f64>) -> Result<Self> {
        let dim = a.dim();
        if b.len() != dim {
            return Err(Error::InvalidInput("drift has wrong dimension".into()));
        }
        let eigs = a.eigenvalues();
        let (lambda, big_lambda) = (eigs[0], eigs[dim - 1]);
        check_constants(lambda, big_lambda)?;
        let (a2, b2) = (a.clone(), b.clone());
        Ok(OperatorSpec {
            name: "linear".into(),
            dim,
            lambda,
            big_lambda,
            lip_grad: norm(&b),
            holder_beta: 1.0,
            holder_seminorm: 0.0,
            concavity: Concavity::Concave,
            kind: OpKind::Linear { a, b },
            eval: Arc::new(move |m, xi, _x| a2.frob_dot(m) + dot(&b2, xi)),
        })
    }

    /// The Laplacian `tr M`.
    pub fn laplace(dim: usize) -> Self {
        let mut op = Self::linear(SymMatrix::identity(dim), vec![0.0; dim]).expect("identity is elliptic");
        op.name = "laplace".into();
        op
    }

    pub fn pucci_minus(dim: usize, lambda: f64, big_lambda: f64) -> Result<Self> {
        let mut op = Self::custom("pucci_minus", dim, lambda, big_lambda, 0.0, Concavity::Concave, move |m, _, _| {
            pucci_minus_eigs(&m.eigenvalues(), lambda, big_lambda)
        })?;
        op.kind = OpKind::PucciMinus;
        Ok(op)
    }

    pub fn pucci_plus(dim: usize, lambda: f64, big_lambda: f64) -> Result<Self> {
        let mut op = Self::custom("pucci_plus", dim, lambda, big_lambda, 0.0, Concavity::Convex, move |m, _, _| {
            pucci_plus_eigs(&m.eigenvalues(), lambda, big_lambda)
        })?;
        op.kind = OpKind::PucciPlus;
        Ok(op)
    }

    /// Concave Bellman operator `min(tr(A₁M) + b₁·ξ, tr(A₂M) + b₂·ξ)`.
    pub fn bellman(a1: SymMatrix, b1: Vec<f64>, a2: SymMatrix, b2: Vec<f64>) -> Result<Self> {
        let dim = a1.dim();
        let e1 = a1.eigenvalues();
        let e2 = a2.eigenvalues();
        let lambda = e1[0].min(e2[0]);
        let big_lambda = e1[dim - 1].max(e2[dim - 1]);
        let lip = norm(&b1).max(norm(&b2));
        Self::custom("bellman", dim, lambda, big_lambda, lip, Concavity::Concave, move |m, xi, _| {
            (a1.frob_dot(m) + dot(&b1, xi)).min(a2.frob_dot(m) + dot(&b2, xi))
        })
    }

    /// Registry default for `bellman`: two diagonal operators with the roles of
    /// λ and Λ swapped along alternating axes, no drift.
    pub fn bellman_default(dim: usize, lambda: f64, big_lambda: f64) -> Result<Self> {
        check_constants(lambda, big_lambda)?;
        let d1: Vec<f64> = (0..dim).map(|i| if i % 2 == 0 { lambda } else { big_lambda }).collect();
        let d2: Vec<f64> = (0..dim).map(|i| if i % 2 == 0 { big_lambda } else { lambda }).collect();
        let mut op = Self::bellman(SymMatrix::diag(&d1), vec![0.0; dim], SymMatrix::diag(&d2), vec![0.0; dim])?;
        op.lambda = lambda;
        op.big_lambda = big_lambda;
        Ok(op)
    }

    /// Built-in registry lookup.
    pub fn from_name(name: &str, dim: usize, lambda: f64, big_lambda: f64) -> Result<Self> {
        match name {
            "laplace" => Ok(Self::laplace(dim)),
            "pucci_minus" => Self::pucci_minus(dim, lambda, big_lambda),
            "pucci_plus" => Self::pucci_plus(dim, lambda, big_lambda),
            "bellman" => Self::bellman_default(dim, lambda, big_lambda),
            other => Err(Error::Config(format!(
                "unknown operator '{other}' (known: {})",
                OPERATOR_NAMES.join(", ")
            ))),
        }
    }

    /// Operator in rotated coordinates `y = R x`:
    /// `F_R(M, ξ, y) = F(Rᵀ M R, Rᵀ ξ, Rᵀ y)`.
    pub fn rotated(&self, r: &Mat) -> OperatorSpec {
        let rt = transpose(r);
        let base = self.clone();
        let rt2 = rt.clone();
        let mut out = OperatorSpec {
            name: format!("{}@rotated", self.name),
            kind: OpKind::General,
            eval: Arc::new(move |m, xi, y| {
                let mm = m.congruence(&rt2);
                base.eval(&mm, &mat_vec(&rt2, xi), &mat_vec(&rt2, y))
            }),
            ..self.clone()
        };
        match &self.kind {
            OpKind::PucciMinus => out.kind = OpKind::PucciMinus,
            OpKind::PucciPlus => out.kind = OpKind::PucciPlus,
            OpKind::Linear { a, b } => {
                out.kind = OpKind::Linear { a: a.congruence(r), b: mat_vec(r, b) };
            }
            OpKind::General => {}
        }
        out
    }

    /// Diagonal coefficients and drift when the operator is linear with a
    /// diagonal coefficient matrix; such operators are evaluated with the
    /// axis stencil directly.
    pub fn linear_diagonal(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        match &self.kind {
            OpKind::Linear { a, b } => {
                let d = a.dim();
                let off = (0..d).any(|i| (0..d).any(|j| i != j && a.get(i, j) != 0.0));
                if off {
                    None
                } else {
                    Some(((0..d).map(|i| a.get(i, i)).collect(), b.clone()))
                }
            }
            _ => None,
        }
    }

    /// Hessian-only operator `M ↦ F(M, ξ₀, x₀)` with the remaining arguments frozen.
    pub fn frozen(&self, xi0: Vec<f64>, x0: Vec<f64>) -> OperatorSpec {
        let base = self.clone();
        let mut out = OperatorSpec {
            name: format!("{}@frozen", self.name),
            lip_grad: 0.0,
            holder_seminorm: 0.0,
            kind: OpKind::General,
            eval: Arc::new(move |m, _xi, _x| base.eval(m, &xi0, &x0)),
            ..self.clone()
        };
        match &self.kind {
            OpKind::PucciMinus => out.kind = OpKind::PucciMinus,
            OpKind::PucciPlus => out.kind = OpKind::PucciPlus,
            OpKind::Linear { a, b } if b.iter().all(|v| *v == 0.0) => {
                out.kind = OpKind::Linear { a: a.clone(), b: b.clone() };
            }
            _ => {}
        }
        out
    }
}

/// Right-hand side f(x) with a declared sup bound on the unit ball.
#[derive(Clone)]
pub struct Rhs {
    pub name: String,
    pub sup: f64,
    eval: Arc<PointFn>,
    constant: Option<f64>,
}

impl fmt::Debug for Rhs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Rhs({}, sup={})", self.name, self.sup)
    }
}

impl Rhs {
    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }

    pub fn constant(c: f64) -> Self {
        Rhs { name: format!("const({c})"), sup: c.abs(), eval: Arc::new(move |_| c), constant: Some(c) }
    }

    /// `c + a·x`; `sup` is taken over the unit ball.
    pub fn affine(c: f64, a: Vec<f64>) -> Self {
        let sup = c.abs() + norm(&a);
        Rhs {
            name: "affine".into(),
            sup,
            eval: Arc::new(move |x| c + dot(&a, x)),
            constant: None,
        }
    }

    pub fn custom(name: &str, sup: f64, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Rhs { name: name.into(), sup, eval: Arc::new(f), constant: None }
    }

    pub fn as_constant(&self) -> Option<f64> {
        self.constant
    }
}

/// Free boundary condition g(x, ν) with its spatial and spherical gradients.
#[derive(Clone)]
pub struct BoundaryLaw {
    pub name: String,
    pub dim: usize,
    pub gamma0: f64,
    g: Arc<LawFn>,
    grad_x: Arc<LawVecFn>,
    grad_theta: Arc<LawVecFn>,
}

impl fmt::Debug for BoundaryLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BoundaryLaw({}, d={}, gamma0={})", self.name, self.dim, self.gamma0)
    }
}

impl BoundaryLaw {
    pub fn custom(
        name: &str,
        dim: usize,
        gamma0: f64,
        g: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
        grad_x: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
        grad_theta: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Result<Self> {
        if !(gamma0 > 0.0) {
            return Err(Error::InvalidInput(format!("gamma0 must be positive, got {gamma0}")));
        }
        Ok(BoundaryLaw {
            name: name.into(),
            dim,
            gamma0,
            g: Arc::new(g),
            grad_x: Arc::new(grad_x),
            grad_theta: Arc::new(grad_theta),
        })
    }

    pub fn constant(dim: usize, g0: f64) -> Result<Self> {
        Self::custom(&format!("const({g0})"), dim, g0, move |_, _| g0, move |_, _| vec![0.0; dim], move |_, _| {
            vec![0.0; dim]
        })
    }

    /// `g(x, ν) = g₀ + a·x`; γ₀ is its minimum over the unit ball.
    pub fn affine_x(g0: f64, a: Vec<f64>) -> Result<Self> {
        let dim = a.len();
        let gamma0 = g0 - norm(&a);
        let a2 = a.clone();
        Self::custom("affine_x", dim, gamma0, move |x, _| g0 + dot(&a, x), move |_, _| a2.clone(), move |_, _| {
            vec![0.0; dim]
        })
    }

    /// `g(x, ν) = g₀ (1 + ε ν_k)`; its spherical gradient is `g₀ ε (e_k − ν_k ν)`.
    pub fn angular(dim: usize, g0: f64, eps: f64, k: usize) -> Result<Self> {
        if k >= dim {
            return Err(Error::InvalidInput("axis index out of range".into()));
        }
        Self::custom(
            "angular",
            dim,
            g0 * (1.0 - eps.abs()),
            move |_, nu| g0 * (1.0 + eps * nu[k]),
            move |_, _| vec![0.0; dim],
            move |_, nu| (0..dim).map(|i| g0 * eps * ((i == k) as u8 as f64 - nu[k] * nu[i])).collect(),
        )
    }

    #[inline]
    pub fn g(&self, x: &[f64], nu: &[f64]) -> f64 {
        (self.g)(x, nu)
    }

    pub fn grad_x(&self, x: &[f64], nu: &[f64]) -> Vec<f64> {
        (self.grad_x)(x, nu)
    }

    pub fn grad_theta(&self, x: &[f64], nu: &[f64]) -> Vec<f64> {
        (self.grad_theta)(x, nu)
    }

    /// Sampled minimum of g over the unit ball and the sphere, and whether it
    /// stays above γ₀.
    pub fn check_lower_bound(&self, samples: usize, seed: u64) -> (f64, bool) {
        let mut rng = sampling::rng(seed);
        let center = vec![0.0; self.dim];
        let mut min = f64::INFINITY;
        for _ in 0..samples {
            let x = random_in_ball(&mut rng, &center, 1.0);
            let nu = random_unit(&mut rng, self.dim);
            min = min.min(self.g(&x, &nu));
        }
        (min, min >= self.gamma0 - 1e-12)
    }

    /// Largest discrepancy between the supplied spherical gradient and a
    /// central difference along tangent directions (step 1e-4).
    pub fn fd_check_grad_theta(&self, samples: usize, seed: u64) -> f64 {
        let mut rng = sampling::rng(seed);
        let center = vec![0.0; self.dim];
        let step = 1e-4;
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let x = random_in_ball(&mut rng, &center, 1.0);
            let nu = random_unit(&mut rng, self.dim);
            let gt = self.grad_theta(&x, &nu);
            for _ in 0..self.dim.saturating_sub(1) {
                let w = random_unit(&mut rng, self.dim);
                let t: Vec<f64> = w.iter().zip(&nu).map(|(wi, ni)| wi - dot(&w, &nu) * ni).collect();
                let tn = norm(&t);
                if tn < 1e-3 {
                    continue;
                }
                let t: Vec<f64> = t.iter().map(|v| v / tn).collect();
                let on_sphere = |s: f64| -> Vec<f64> {
                    let v: Vec<f64> = nu.iter().zip(&t).map(|(n, ti)| n * s.cos() + ti * s.sin()).collect();
                    v
                };
                let fd = (self.g(&x, &on_sphere(step)) - self.g(&x, &on_sphere(-step))) / (2.0 * step);
                worst = worst.max((fd - dot(&gt, &t)).abs());
            }
        }
        worst
    }

    /// Same cross-check for the spatial gradient.
    pub fn fd_check_grad_x(&self, samples: usize, seed: u64) -> f64 {
        let mut rng = sampling::rng(seed);
        let center = vec![0.0; self.dim];
        let step = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let x = random_in_ball(&mut rng, &center, 0.9);
            let nu = random_unit(&mut rng, self.dim);
            let gx = self.grad_x(&x, &nu);
            for k in 0..self.dim {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += step;
                xm[k] -= step;
                let fd = (self.g(&xp, &nu) - self.g(&xm, &nu)) / (2.0 * step);
                worst = worst.max((fd - gx[k]).abs());
            }
        }
        worst
    }
}

/// Operator, right-hand side and free boundary law posed on a ball.
#[derive(Clone, Debug)]
pub struct Problem {
    pub op: OperatorSpec,
    pub f: Rhs,
    pub law: BoundaryLaw,
    pub center: Vec<f64>,
    pub radius: f64,
}

impl Problem {
    /// Problem on the unit ball centered at the origin.
    pub fn unit_ball(op: OperatorSpec, f: Rhs, law: BoundaryLaw) -> Result<Self> {
        if op.dim != law.dim {
            return Err(Error::InvalidInput(format!(
                "operator dimension {} differs from boundary law dimension {}",
                op.dim, law.dim
            )));
        }
        let dim = op.dim;
        Ok(Problem { op, f, law, center: vec![0.0; dim], radius: 1.0 })
    }

    pub fn dim(&self) -> usize {
        self.op.dim
    }
}

/// The triple (F_{x₀,ρ}, f_{x₀,ρ}, g_{x₀,ρ}) together with its provenance.
#[derive(Clone, Debug)]
pub struct RescaledProblem {
    pub x0: Vec<f64>,
    pub rho: f64,
    pub problem: Problem,
}

/// `F_{x₀,ρ}(M,ξ,x) = ρ F(ρ⁻¹M, ξ, x₀+ρx)`, `f_{x₀,ρ}(x) = ρ f(x₀+ρx)`,
/// `g_{x₀,ρ}(x,ν) = g(x₀+ρx, ν)`.
pub fn rescale(problem: &Problem, x0: &[f64], rho: f64) -> Result<RescaledProblem> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidInput(format!("scale must lie in (0, 1], got {rho}")));
    }
    if x0.len() != problem.dim() {
        return Err(Error::InvalidInput("center has wrong dimension".into()));
    }
    let dist = norm(&crate::linalg::sub(x0, &problem.center));
    if dist + rho > problem.radius * (1.0 + 1e-12) + 1e-12 {
        return Err(Error::Domain(format!(
            "ball of radius {rho} around {x0:?} escapes the domain of radius {}",
            problem.radius
        )));
    }
    let dim = problem.dim();
    let shift = move |x: &[f64], x0: &[f64]| -> Vec<f64> { x0.iter().zip(x).map(|(a, b)| a + rho * b).collect() };

    let base_op = problem.op.clone();
    let x0a = x0.to_vec();
    let mut op = OperatorSpec {
        name: format!("{}@rescaled", base_op.name),
        lip_grad: rho * base_op.lip_grad,
        holder_seminorm: base_op.holder_seminorm * rho.powf(1.0 + base_op.holder_beta),
        kind: OpKind::General,
        eval: Arc::new(move |m, xi, x| rho * base_op.eval(&m.scale(1.0 / rho), xi, &shift(x, &x0a))),
        ..problem.op.clone()
    };
    match &problem.op.kind {
        OpKind::Linear { a, b } => op.kind = OpKind::Linear { a: a.clone(), b: b.iter().map(|v| rho * v).collect() },
        OpKind::PucciMinus => op.kind = OpKind::PucciMinus,
        OpKind::PucciPlus => op.kind = OpKind::PucciPlus,
        OpKind::General => {}
    }

    let base_f = problem.f.clone();
    let x0b = x0.to_vec();
    let f = match base_f.as_constant() {
        Some(c) => Rhs::constant(rho * c),
        None => Rhs {
            name: format!("{}@rescaled", base_f.name),
            sup: rho * base_f.sup,
            eval: Arc::new(move |x| rho * base_f.eval(&shift(x, &x0b))),
            constant: None,
        },
    };

    let (l1, l2, l3) = (problem.law.clone(), problem.law.clone(), problem.law.clone());
    let (xa, xb, xc) = (x0.to_vec(), x0.to_vec(), x0.to_vec());
    let law = BoundaryLaw {
        name: format!("{}@rescaled", problem.law.name),
        dim,
        gamma0: problem.law.gamma0,
        g: Arc::new(move |x, nu| l1.g(&shift(x, &xa), nu)),
        grad_x: Arc::new(move |x, nu| l2.grad_x(&shift(x, &xb), nu).iter().map(|v| rho * v).collect()),
        grad_theta: Arc::new(move |x, nu| l3.grad_theta(&shift(x, &xc), nu)),
    };

    let center: Vec<f64> = problem.center.iter().zip(x0).map(|(c, a)| (c - a) / rho).collect();
    Ok(RescaledProblem {
        x0: x0.to_vec(),
        rho,
        problem: Problem { op, f, law, center, radius: problem.radius / rho },
    })
}

/// τ(ν, g) = ν + ((∇_θg·ν)ν − ∇_θg)/g evaluated at x₀.
pub fn compute_tau(law: &BoundaryLaw, nu: &[f64], x0: &[f64]) -> Result<Vec<f64>> {
    if (norm(nu) - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidInput(format!("direction is not a unit vector (|nu| = {})", norm(nu))));
    }
    let g = law.g(x0, nu);
    if !(g > 0.0) {
        return Err(Error::BoundaryLawNotElliptic(g));
    }
    let gt = law.grad_theta(x0, nu);
    let gn = dot(&gt, nu);
    Ok(nu.iter().zip(&gt).map(|(n, t)| n + (gn * n - t) / g).collect())
}

/// Outcome of the sampled structure checks on an operator.
#[derive(Clone, Debug, Serialize)]
pub struct SandwichReport {
    pub samples: usize,
    /// Largest amount by which the lower Pucci bound was violated (≤ 0 means fine).
    pub lower_violation: f64,
    pub upper_violation: f64,
    pub zero_at_origin: f64,
    /// Largest midpoint concavity (or convexity) defect; 0 when not applicable.
    pub concavity_defect: f64,
    pub passed: bool,
}

/// Samples the Pucci sandwich, `F(0,0,x) = 0` and midpoint concavity.
pub fn check_operator(op: &OperatorSpec, samples: usize, seed: u64) -> SandwichReport {
    let d = op.dim;
    let mut rng = sampling::rng(seed);
    let center = vec![0.0; d];
    let zero_m = SymMatrix::zeros(d);
    let zero_v = vec![0.0; d];
    let mut lower: f64 = f64::NEG_INFINITY;
    let mut upper: f64 = f64::NEG_INFINITY;
    let mut zero: f64 = 0.0;
    let mut conc: f64 = 0.0;
    for _ in 0..samples {
        let m = random_sym(&mut rng, d, 2.0);
        let n = random_sym(&mut rng, d, 2.0);
        let xi = random_vec(&mut rng, d, 2.0);
        let eta = random_vec(&mut rng, d, 2.0);
        let x = random_in_ball(&mut rng, &center, 1.0);
        let diff = op.eval(&m.add(&n), &xi, &x) - op.eval(&m, &eta, &x);
        let eigs = n.eigenvalues();
        let lip = op.lip_grad * norm(&crate::linalg::sub(&xi, &eta));
        let lo = pucci_minus_eigs(&eigs, op.lambda, op.big_lambda) - lip;
        let hi = pucci_plus_eigs(&eigs, op.lambda, op.big_lambda) + lip;
        let tol = 1e-10 * (1.0 + diff.abs() + lo.abs() + hi.abs());
        lower = lower.max(lo - diff - tol);
        upper = upper.max(diff - hi - tol);
        zero = zero.max(op.eval(&zero_m, &zero_v, &x).abs());
        let sign = match op.concavity {
            Concavity::Concave => 1.0,
            Concavity::Convex => -1.0,
            Concavity::Neither => 0.0,
        };
        if sign != 0.0 {
            let mid = op.eval(&m.add(&n).scale(0.5), &xi, &x);
            let avg = 0.5 * (op.eval(&m, &xi, &x) + op.eval(&n, &xi, &x));
            let defect = sign * (avg - mid) - 1e-10 * (1.0 + mid.abs());
            conc = conc.max(defect);
        }
    }
    SandwichReport {
        samples,
        lower_violation: lower,
        upper_violation: upper,
        zero_at_origin: zero,
        concavity_defect: conc,
        passed: lower <= 0.0 && upper <= 0.0 && zero <= 1e-12 && conc <= 0.0,
    }
}

/// Worst relative defects of the Pucci identities over random matrices.
#[derive(Clone, Debug, Serialize)]
pub struct PucciSuiteReport {
    pub samples: usize,
    /// `M⁻(N) ≤ tr(AN) ≤ M⁺(N)` for random `A` with spectrum in `[λ,Λ]`.
    pub sandwich: f64,
    /// `M±(tN) = t M±(N)` for `t > 0`.
    pub homogeneity: f64,
    /// `M⁺` subadditive, `M⁻` superadditive.
    pub additivity: f64,
    /// `M⁻(N) = −M⁺(−N)`.
    pub sign_symmetry: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Samples the Pucci identities with `samples` matrices in each listed
/// dimension.
pub fn pucci_suite(dims: &[usize], lambda: f64, big_lambda: f64, samples: usize, seed: u64, tol: f64) -> Result<PucciSuiteReport> {
    check_constants(lambda, big_lambda)?;
    let mut rng = sampling::rng(seed);
    let (mut sandwich, mut homog, mut addit, mut sign): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    let rel = |defect: f64, scale: f64| defect / (1.0 + scale.abs());
    for &d in dims {
        for _ in 0..samples {
            let n = random_sym(&mut rng, d, 10.0);
            let n2 = random_sym(&mut rng, d, 10.0);
            let eig = n.eigen();
            let (p, m) = (pucci_plus_eigs(&eig.values, lambda, big_lambda), pucci_minus_eigs(&eig.values, lambda, big_lambda));
            let mut spec = random_sym(&mut rng, d, 1.0).eigen();
            for v in spec.values.iter_mut() {
                *v = lambda + (big_lambda - lambda) * rand::Rng::gen::<f64>(&mut rng);
            }
            let lin = spec.reconstruct().frob_dot(&n);
            sandwich = sandwich.max(rel(m - lin, lin)).max(rel(lin - p, lin));
            let t = rand::Rng::gen_range(&mut rng, 0.01..100.0);
            let nt = n.scale(t);
            homog = homog
                .max(rel((pucci_plus(&nt, lambda, big_lambda)? - t * p).abs(), t * p))
                .max(rel((pucci_minus(&nt, lambda, big_lambda)? - t * m).abs(), t * m));
            let sum = n.add(&n2);
            let (p2, m2) = (pucci_plus(&n2, lambda, big_lambda)?, pucci_minus(&n2, lambda, big_lambda)?);
            addit = addit
                .max(rel(pucci_plus(&sum, lambda, big_lambda)? - p - p2, p.abs() + p2.abs()))
                .max(rel(m + m2 - pucci_minus(&sum, lambda, big_lambda)?, m.abs() + m2.abs()));
            sign = sign.max(rel((m + pucci_plus(&n.scale(-1.0), lambda, big_lambda)?).abs(), m));
        }
    }
    let worst = sandwich.max(homog).max(addit).max(sign);
    Ok(PucciSuiteReport {
        samples: samples * dims.len(),
        sandwich,
        homogeneity: homog,
        additivity: addit,
        sign_symmetry: sign,
        tol,
        passed: worst <= tol,
    })
}

/// Parameters of the improvement-of-flatness iteration that the hypothesis
/// checks compare against.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct IofParams {
    pub rho: f64,
    pub r0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for IofParams {
    fn default() -> Self {
        IofParams { rho: 0.25, r0: 1.0 / 32.0, alpha: 0.25, beta: 0.5, samples: 400, seed: sampling::DEFAULT_SEED }
    }
}

/// Measured moduli of the rescaled data at step n and the resulting verdicts.
#[derive(Clone, Debug, Serialize)]
pub struct ModulusReport {
    pub n: usize,
    pub rho_n: f64,
    pub r_n: f64,
    pub lip_grad: f64,
    /// sup |F_n(M,ξ,x) − F_n(M,ξ,0)| / (r^β (r + r|ξ| + |M|)).
    pub x_modulus_ratio: f64,
    pub f_sup: f64,
    pub f_oscillation: f64,
    pub f_holder: f64,
    pub operator_holder: f64,
    pub grad_x_g: f64,
    pub g_taylor: f64,
    pub grad_x_g_holder_ratio: f64,
    pub operator_ok: bool,
    pub rhs_ok: bool,
    pub law_ok: bool,
    /// The scale-δ bounds with threshold r₀² (meaningful at n = 0).
    pub initial_scale_ok: bool,
}

impl ModulusReport {
    pub fn all_pass(&self) -> bool {
        self.operator_ok && self.rhs_ok && self.law_ok
    }
}

/// Samples the moduli of (F_n, f_n, g_n) at scale ρ_n = δρⁿ around x₀.
pub fn measure_iof_moduli(problem: &Problem, x0: &[f64], delta: f64, n: usize, params: &IofParams) -> Result<ModulusReport> {
    let rho_n = delta * params.rho.powi(n as i32);
    let r_n = params.r0 * params.rho.powi(n as i32);
    let resc = rescale(problem, x0, rho_n)?;
    let p = &resc.problem;
    let d = problem.dim();
    let beta = params.beta;
    let mut rng = sampling::rng(params.seed);
    let origin = vec![0.0; d];

    let mut lip: f64 = 0.0;
    let mut xmod: f64 = 0.0;
    let mut op_holder: f64 = 0.0;
    let mut f_sup: f64 = 0.0;
    let mut f_osc: f64 = 0.0;
    let mut f_holder: f64 = 0.0;
    let mut gx: f64 = 0.0;
    let mut g_taylor: f64 = 0.0;
    let mut gx_holder: f64 = 0.0;
    let f0 = p.f.eval(&origin);
    for _ in 0..params.samples {
        let m = random_sym(&mut rng, d, 2.0);
        let xi = random_vec(&mut rng, d, 2.0);
        let eta = random_vec(&mut rng, d, 2.0);
        let x = random_in_ball(&mut rng, &origin, 1.0);
        let y = random_in_ball(&mut rng, &origin, 1.0);
        let dxe = norm(&crate::linalg::sub(&xi, &eta));
        if dxe > 1e-9 {
            lip = lip.max((p.op.eval(&m, &xi, &x) - p.op.eval(&m, &eta, &x)).abs() / dxe);
        }
        let fx = p.op.eval(&m, &xi, &x);
        let denom = r_n.powf(beta) * (r_n + r_n * norm(&xi) + m.norm_inf());
        xmod = xmod.max((fx - p.op.eval(&m, &xi, &origin)).abs() / denom);
        let dxy = norm(&crate::linalg::sub(&x, &y));
        if dxy > 1e-9 {
            let w = (1.0 + norm(&xi) + m.norm_inf()) * dxy.powf(beta);
            op_holder = op_holder.max((fx - p.op.eval(&m, &xi, &y)).abs() / w);
            f_holder = f_holder.max((p.f.eval(&x) - p.f.eval(&y)).abs() / dxy.powf(beta));
        }
        let fxv = p.f.eval(&x);
        f_sup = f_sup.max(fxv.abs());
        f_osc = f_osc.max((fxv - f0).abs());

        let nu0 = random_unit(&mut rng, d);
        let nu1 = random_unit(&mut rng, d);
        let g0 = p.law.g(&origin, &nu0);
        let gx0 = p.law.grad_x(&origin, &nu0);
        gx = gx.max(norm(&gx0));
        g_taylor = g_taylor.max((p.law.g(&x, &nu0) - g0 - dot(&gx0, &x)).abs());
        let dn = norm(&crate::linalg::sub(&nu1, &nu0));
        if dn > 1e-6 {
            let gx1 = p.law.grad_x(&origin, &nu1);
            gx_holder = gx_holder.max(norm(&crate::linalg::sub(&gx1, &gx0)) / (r_n * dn.powf(beta)));
        }
    }
    let tol = 1e-12;
    let operator_ok = lip <= r_n + tol && xmod <= 1.0 + tol;
    let rhs_ok = f_osc <= r_n.powf(1.0 + beta) + tol;
    let law_ok = gx <= r_n + tol && g_taylor <= r_n.powf(1.0 + beta) + tol && gx_holder <= 1.0 + tol;
    let r02 = params.r0 * params.r0;
    let initial_scale_ok = lip <= r02 + tol
        && op_holder <= r02 + tol
        && f_holder <= r02 + tol
        && f_sup <= r02 + tol
        && gx <= r02 + tol
        && gx_holder * r_n <= r02 + tol;
    Ok(ModulusReport {
        n,
        rho_n,
        r_n,
        lip_grad: lip,
        x_modulus_ratio: xmod,
        f_sup,
        f_oscillation: f_osc,
        f_holder,
        operator_holder: op_holder,
        grad_x_g: gx,
        g_taylor,
        grad_x_g_holder_ratio: gx_holder,
        operator_ok,
        rhs_ok,
        law_ok,
        initial_scale_ok,
    })
}

/// Largest δ (up to the distance to the domain boundary) for which the
/// scale-δ bounds hold, by bisection in log δ.
pub fn choose_delta(problem: &Problem, x0: &[f64], params: &IofParams) -> Result<f64> {
    let room = problem.radius - norm(&crate::linalg::sub(x0, &problem.center));
    if room <= 0.0 {
        return Err(Error::Domain("center lies outside the domain".into()));
    }
    let hi0 = room.min(1.0);
    if measure_iof_moduli(problem, x0, hi0, 0, params)?.initial_scale_ok {
        return Ok(hi0);
    }
    let (mut lo, mut hi) = (1e-12f64.ln(), hi0.ln());
    if !measure_iof_moduli(problem, x0, lo.exp(), 0, params)?.initial_scale_ok {
        return Err(Error::Precondition("no admissible rescaling found down to 1e-12".into()));
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if measure_iof_moduli(problem, x0, mid.exp(), 0, params)?.initial_scale_ok {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-6 {
            break;
        }
    }
    Ok(lo.exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pucci_examples() {
        let z = SymMatrix::zeros(2);
        assert_eq!(pucci_plus(&z, 1.0, 2.0).unwrap(), 0.0);
        assert_eq!(pucci_minus(&z, 1.0, 2.0).unwrap(), 0.0);
        let i = SymMatrix::identity(2);
        assert_eq!(pucci_plus(&i, 1.0, 2.0).unwrap(), 4.0);
        assert_eq!(pucci_minus(&i, 1.0, 2.0).unwrap(), 2.0);
        let n = SymMatrix::diag(&[1.0, -1.0]);
        assert!((pucci_plus(&n, 1.0, 2.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pucci_rejects_bad_input() {
        let mut n = SymMatrix::zeros(2);
        n.set(0, 1, f64::NAN);
        assert!(matches!(pucci_plus(&n, 1.0, 2.0), Err(Error::InvalidInput(_))));
        assert!(pucci_minus(&SymMatrix::zeros(2), 2.0, 1.0).is_err());
    }

    #[test]
    fn pucci_suite_passes() {
        let rep = pucci_suite(&[2, 3], 1.0, 2.0, 200, 7, 1e-10).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn registry_rejects_typo() {
        assert!(matches!(OperatorSpec::from_name("laplacee", 2, 1.0, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn tau_of_constant_law_is_nu() {
        let law = BoundaryLaw::constant(3, 1.5).unwrap();
        let nu = crate::linalg::normalized(&[0.2, -0.4, 1.0]).unwrap();
        let tau = compute_tau(&law, &nu, &[0.0; 3]).unwrap();
        assert!(norm(&crate::linalg::sub(&tau, &nu)) < 1e-15);
    }

    #[test]
    fn tau_of_angular_law() {
        let (g0, eps) = (2.0, 0.1);
        let law = BoundaryLaw::angular(2, g0, eps, 0).unwrap();
        let tau = compute_tau(&law, &[0.0, 1.0], &[0.0, 0.0]).unwrap();
        assert!((tau[0] + eps).abs() < 1e-15);
        assert!((tau[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rescale_identity_and_constant_rhs() {
        let pb = Problem::unit_ball(OperatorSpec::laplace(2), Rhs::constant(1.0), BoundaryLaw::constant(2, 1.0).unwrap())
            .unwrap();
        let r = rescale(&pb, &[0.0, 0.0], 0.25).unwrap();
        assert_eq!(r.problem.f.eval(&[0.3, 0.1]), 0.25);
        assert!(rescale(&pb, &[0.9, 0.0], 0.25).is_err());
        let id = rescale(&pb, &[0.0, 0.0], 1.0).unwrap();
        let m = SymMatrix::diag(&[1.0, 3.0]);
        assert_eq!(id.problem.op.eval(&m, &[0.0, 0.0], &[0.1, 0.1]), 4.0);
    }
}
