//! Linearized limit problem: F̃(D²ũ) = 0 on the half-ball B½ ∩ {x_d ≥ 0}
//! with ∇ũ·τ = 0 on the flat part, and its pointwise quadratic expansion.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flatness::QuadPoly;
use crate::grid::{Grid, GridField, NodeKind, INSIDE_TOL};
use crate::linalg::{fit_loglog, least_squares, norm, SymMatrix};
use crate::operators::{OpKind, OperatorSpec, Problem};
use crate::scheme::SolveStats;

pub const HALF_BALL_RADIUS: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct ObliqueProblem {
    pub op: OperatorSpec,
    pub tau: Vec<f64>,
    pub h: f64,
    /// Stopping tolerance on the largest nodal update.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl ObliqueProblem {
    pub fn new(op: OperatorSpec, tau: Vec<f64>, h: f64) -> Result<Self> {
        let d = op.dim;
        if !(1..=8).contains(&d) {
            return Err(Error::InvalidInput(format!("dimension {d} outside 1..=8")));
        }
        if tau.len() != d {
            return Err(Error::InvalidInput(format!("tau has length {}, expected {d}", tau.len())));
        }
        if (tau[d - 1] - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("tau·e_d = {} must equal 1", tau[d - 1])));
        }
        if tau.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidInput("tau is not finite".into()));
        }
        if !(h > 0.0) || HALF_BALL_RADIUS / h < 4.0 {
            return Err(Error::Resolution(format!("h = {h} too coarse for the half-ball")));
        }
        Ok(ObliqueProblem { op, tau, h, tol: 1e-11, max_sweeps: 200_000 })
    }

    pub fn dim(&self) -> usize {
        self.op.dim
    }

    pub fn tau_norm(&self) -> f64 {
        norm(&self.tau)
    }

    /// Grid covering the half-ball: symmetric in x′, starting at x_d = 0.
    pub fn grid(&self) -> Result<Grid> {
        let d = self.dim();
        let k = (HALF_BALL_RADIUS / self.h + 1e-9).floor() as usize;
        let mut n = vec![2 * k + 1; d];
        n[d - 1] = k + 1;
        let mut lo = vec![-(k as f64) * self.h; d];
        lo[d - 1] = 0.0;
        Grid::new(n, lo, self.h)
    }

    /// Interior nodes have all 3ᵈ neighbours in the ball (ghost rows count);
    /// flat nodes with that property carry the oblique condition; the rest of
    /// the inside nodes hold Dirichlet data.
    pub fn mask(&self, grid: &Grid) -> Vec<NodeKind> {
        let d = grid.dim;
        let r = HALF_BALL_RADIUS * (1.0 + INSIDE_TOL);
        let inside = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt() <= r;
        let offs = grid.neighbor_offsets();
        (0..grid.len())
            .map(|i| {
                let x = grid.coord(i);
                if !inside(&x) {
                    return NodeKind::Exterior;
                }
                let full = offs.iter().all(|o| {
                    let y: Vec<f64> = x.iter().zip(o).map(|(a, &b)| a + b as f64 * grid.h).collect();
                    inside(&y)
                });
                if !full {
                    NodeKind::Dirichlet
                } else if grid.multi_index(i)[d - 1] == 0 {
                    NodeKind::Oblique
                } else {
                    NodeKind::Interior
                }
            })
            .collect()
    }

    pub fn empty_field(&self) -> Result<GridField> {
        let grid = self.grid()?;
        let mask = self.mask(&grid);
        GridField::new(grid, mask)
    }

    /// Largest mismatch between the eliminated ghost value and `q` at the
    /// ghost point, over all flat nodes, with `q` sampled on the grid.
    pub fn ghost_identity_defect(&self, q: impl Fn(&[f64]) -> f64) -> Result<f64> {
        let mut field = self.empty_field()?;
        let mask = field.mask.clone();
        field.fill(|x| q(x));
        let st = Sweeper::new(self, &field.grid, &mask);
        let d = self.dim();
        let mut worst = 0.0f64;
        for i in 0..mask.len() {
            if mask[i] != NodeKind::Oblique {
                continue;
            }
            let mut y = field.coord(i);
            y[d - 1] -= self.h;
            worst = worst.max((st.ghost(&field.values, i) - q(&y)).abs());
        }
        Ok(worst)
    }
}

/// M ↦ [F(D²p + εM, g₀e_d + ∇p(0), 0) − F(D²p, g₀e_d + ∇p(0), 0)]/ε.
pub fn linearize_operator(problem: &Problem, p: &QuadPoly, g0: f64, eps: f64) -> Result<OperatorSpec> {
    let d = problem.dim();
    let mut xi = vec![0.0; d];
    xi[d - 1] = g0;
    linearize(&problem.op, &p.m, xi, eps)
}

/// Difference quotient of `op` at Hessian `base` and gradient `xi`, x = 0.
pub fn linearize(op: &OperatorSpec, base: &SymMatrix, xi: Vec<f64>, eps: f64) -> Result<OperatorSpec> {
    if !(eps > 0.0) {
        return Err(Error::InvalidInput(format!("eps = {eps} must be positive")));
    }
    let d = op.dim;
    if base.dim() != d || xi.len() != d {
        return Err(Error::InvalidInput("polynomial dimension mismatch".into()));
    }
    if let OpKind::Linear { a, .. } = &op.kind {
        let mut lin = OperatorSpec::linear(a.clone(), vec![0.0; d])?;
        lin.name = format!("linearized {}", op.name);
        return Ok(lin);
    }
    let x0 = vec![0.0; d];
    let f0 = op.eval(base, &xi, &x0);
    let parent = op.clone();
    let base = base.clone();
    OperatorSpec::custom(
        &format!("linearized {}", op.name),
        d,
        op.lambda,
        op.big_lambda,
        0.0,
        op.concavity,
        move |m, _xi, _x| (parent.eval(&base.add_scaled(eps, m), &xi, &x0) - f0) / eps,
    )
}

/// Node-local discretization shared by the solver and the identity check.
/// Only valid at interior and flat nodes, whose 3ᵈ neighbourhoods exist.
struct Sweeper<'a> {
    dim: usize,
    h: f64,
    tau: &'a [f64],
    strides: Vec<usize>,
    /// Live tangential neighbours (east, west) of flat-row nodes, per axis.
    flat_nbrs: Vec<[Option<usize>; 2]>,
    n_last: usize,
}

impl<'a> Sweeper<'a> {
    fn new(prob: &'a ObliqueProblem, grid: &Grid, mask: &[NodeKind]) -> Self {
        let d = grid.dim;
        let live = |j: Option<usize>| j.filter(|&j| mask[j] != NodeKind::Exterior);
        let mut flat_nbrs = vec![[None, None]; grid.len() * (d - 1)];
        for i in (0..grid.len()).filter(|i| i % grid.n[d - 1] == 0) {
            for k in 0..d - 1 {
                flat_nbrs[i * (d - 1) + k] = [live(grid.step(i, k, 1)), live(grid.step(i, k, -1))];
            }
        }
        Sweeper { dim: d, h: grid.h, tau: &prob.tau, strides: grid.strides(), flat_nbrs, n_last: grid.n[d - 1] }
    }

    /// Ghost value below flat node `i`: the normal part of ∇u·τ = 0 uses the
    /// one-sided difference (u_N − u_S)/(2h) centred at the node, the
    /// tangential parts central differences, switching to upwind ones when
    /// |τ_k| > 1 (keeps the elimination monotone).
    fn ghost(&self, u: &[f64], i: usize) -> f64 {
        let d = self.dim;
        let uc = u[i];
        let mut g = u[i + self.strides[d - 1]];
        for k in 0..d - 1 {
            let t = self.tau[k];
            if t == 0.0 {
                continue;
            }
            g += match self.flat_nbrs[i * (d - 1) + k] {
                [Some(e), Some(w)] if t.abs() <= 1.0 => t * (u[e] - u[w]),
                [Some(e), _] if t > 0.0 => 2.0 * t * (u[e] - uc),
                [_, Some(w)] if t < 0.0 => 2.0 * t * (uc - u[w]),
                [Some(e), None] => 2.0 * t * (u[e] - uc),
                [None, Some(w)] => 2.0 * t * (uc - u[w]),
                _ => 0.0,
            };
        }
        g
    }

    /// Value at offset `o` from node `i`; a step below the flat boundary
    /// reads the ghost of the flat node above it.
    fn value(&self, u: &[f64], i: usize, o: &[i64]) -> f64 {
        let d = self.dim;
        let mut j = i as i64;
        for k in 0..d {
            j += o[k] * self.strides[k] as i64;
        }
        if o[d - 1] < 0 && i.is_multiple_of(self.n_last) {
            self.ghost(u, (j + self.strides[d - 1] as i64) as usize)
        } else {
            u[j as usize]
        }
    }

    fn hessian(&self, u: &[f64], i: usize) -> SymMatrix {
        let d = self.dim;
        let h2 = self.h * self.h;
        let mut hm = SymMatrix::zeros(d);
        let mut o = [0i64; 8];
        let o = &mut o[..d];
        for a in 0..d {
            o[a] = 1;
            let up = self.value(u, i, o);
            o[a] = -1;
            let dn = self.value(u, i, o);
            o[a] = 0;
            hm.set(a, a, (up + dn - 2.0 * u[i]) / h2);
            for b in a + 1..d {
                let mut s = 0.0;
                for (sa, sb, w) in [(1, 1, 1.0), (1, -1, -1.0), (-1, 1, -1.0), (-1, -1, 1.0)] {
                    o[a] = sa;
                    o[b] = sb;
                    s += w * self.value(u, i, o);
                }
                o[a] = 0;
                o[b] = 0;
                hm.set(a, b, s / (4.0 * h2));
            }
        }
        hm
    }
}

/// Solves F̃(D²ũ) = 0 with ∇ũ·τ = 0 on the flat part and ũ = `data` on the
/// curved part, by nonlinear Gauss–Seidel (SOR for linear F̃).
pub fn solve_oblique(prob: &ObliqueProblem, data: impl Fn(&[f64]) -> f64) -> Result<(GridField, SolveStats)> {
    let mut field = prob.empty_field()?;
    let d = prob.dim();
    field.set_dirichlet(&data);
    let mask = field.mask.clone();
    let grid = field.grid.clone();
    let st = Sweeper::new(prob, &grid, &mask);
    let active: Vec<usize> =
        (0..mask.len()).filter(|&i| matches!(mask[i], NodeKind::Interior | NodeKind::Oblique)).collect();
    if active.is_empty() {
        return Err(Error::Resolution("half-ball grid has no unknowns".into()));
    }
    let h = prob.h;
    let delta = h * h;
    let dc_floor = prob.op.lambda / (h * h);
    let linear = matches!(prob.op.kind, OpKind::Linear { .. });
    let omega = if linear { 2.0 / (1.0 + (std::f64::consts::PI * h / HALF_BALL_RADIUS).sin()) } else { 1.0 };
    let zero_xi = vec![0.0; d];
    let x0 = vec![0.0; d];
    let scale = field.max_abs().max(1.0);
    let mut history = Vec::new();
    let u = &mut field.values;
    for sweep in 1..=prob.max_sweeps {
        let mut max_step = 0.0f64;
        for &i in &active {
            let r0 = prob.op.eval(&st.hessian(u, i), &zero_xi, &x0);
            let keep = u[i];
            u[i] = keep + delta;
            let r1 = prob.op.eval(&st.hessian(u, i), &zero_xi, &x0);
            u[i] = keep;
            let dc = ((r0 - r1) / delta).max(dc_floor);
            let step = omega * r0 / dc;
            u[i] = keep + step;
            max_step = max_step.max(step.abs());
        }
        if sweep % 50 == 0 {
            history.push(max_step);
        }
        if !max_step.is_finite() {
            break;
        }
        if max_step <= prob.tol * scale {
            let stats = SolveStats { stage: "oblique".into(), sweeps: sweep, residual: max_step, omega };
            return Ok((field, stats));
        }
    }
    Err(Error::Nonconvergence {
        stage: "oblique".into(),
        sweeps: prob.max_sweeps,
        residual: history.last().copied().unwrap_or(f64::NAN),
        history,
    })
}

/// Second-order expansion of a half-ball field at the origin.
#[derive(Clone, Debug, Serialize)]
pub struct Expansion {
    pub value0: f64,
    pub grad0: Vec<f64>,
    pub hess0: SymMatrix,
    /// Sup-norm residual of the fit on B_{1/8}⁺.
    pub residual: f64,
    /// (ρ, sup residual of a fit on B_ρ⁺).
    pub profile: Vec<(f64, f64)>,
    /// Log-log slope of the profile; `None` when residuals sit at rounding level.
    pub exponent: Option<f64>,
}

pub const EXPANSION_RADII: [f64; 3] = [0.125, 0.0625, 0.03125];

struct QuadFit {
    coef: Vec<f64>,
    residual: f64,
}

fn quad_features(x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mut row = Vec::with_capacity(1 + d + d * (d + 1) / 2);
    row.push(1.0);
    row.extend_from_slice(x);
    for a in 0..d {
        for b in a..d {
            row.push(if a == b { 0.5 * x[a] * x[a] } else { x[a] * x[b] });
        }
    }
    row
}

fn fit_on(field: &GridField, rho: f64) -> Result<QuadFit> {
    let d = field.dim();
    let npar = 1 + d + d * (d + 1) / 2;
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for i in 0..field.len() {
        if field.mask[i] == NodeKind::Exterior {
            continue;
        }
        let x = field.coord(i);
        if x[d - 1] < 0.0 || norm(&x) > rho * (1.0 + 1e-9) {
            continue;
        }
        rows.push(quad_features(&x));
        rhs.push(field.values[i]);
    }
    if rows.len() < npar + 1 {
        return Err(Error::Resolution(format!(
            "{} nodes in the half-ball of radius {rho}, need {} for a quadratic fit",
            rows.len(),
            npar + 1
        )));
    }
    let coef = least_squares(&rows, &rhs)?;
    let residual = rows
        .iter()
        .zip(&rhs)
        .map(|(r, v)| (r.iter().zip(&coef).map(|(a, c)| a * c).sum::<f64>() - v).abs())
        .fold(0.0, f64::max);
    Ok(QuadFit { coef, residual })
}

pub fn pointwise_expansion(field: &GridField) -> Result<Expansion> {
    let d = field.dim();
    let main = fit_on(field, EXPANSION_RADII[0])?;
    let value0 = main.coef[0];
    let grad0 = main.coef[1..=d].to_vec();
    let mut hess0 = SymMatrix::zeros(d);
    let mut k = d + 1;
    for a in 0..d {
        for b in a..d {
            hess0.set(a, b, main.coef[k]);
            k += 1;
        }
    }
    let mut profile = vec![(EXPANSION_RADII[0], main.residual)];
    for &rho in &EXPANSION_RADII[1..] {
        if let Ok(f) = fit_on(field, rho) {
            profile.push((rho, f.residual));
        }
    }
    let floor = 1e-12 * field.max_abs().max(1.0);
    let usable: Vec<&(f64, f64)> = profile.iter().filter(|p| p.1 > floor).collect();
    let exponent = (usable.len() >= 2).then(|| {
        let xs: Vec<f64> = usable.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = usable.iter().map(|p| p.1).collect();
        fit_loglog(&xs, &ys)
    });
    Ok(Expansion { value0, grad0, hess0, residual: main.residual, profile, exponent })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{BoundaryLaw, Rhs};

    fn laplace_problem(tau: Vec<f64>, h: f64) -> ObliqueProblem {
        ObliqueProblem::new(OperatorSpec::laplace(2), tau, h).unwrap()
    }

    #[test]
    fn tau_normalization_enforced() {
        assert!(ObliqueProblem::new(OperatorSpec::laplace(2), vec![0.0, 1.1], 1.0 / 32.0).is_err());
        assert!(ObliqueProblem::new(OperatorSpec::laplace(2), vec![3.0, 1.0], 1.0 / 32.0).is_ok());
    }

    #[test]
    fn mask_has_flat_nodes() {
        let p = laplace_problem(vec![0.0, 1.0], 1.0 / 16.0);
        let f = p.empty_field().unwrap();
        let flat = f.nodes(NodeKind::Oblique).count();
        assert!(flat >= 5);
        for i in f.nodes(NodeKind::Oblique) {
            assert_eq!(f.coord(i)[1], 0.0);
        }
    }

    #[test]
    fn ghost_identity_exact_on_compatible_quadratics() {
        let p = laplace_problem(vec![0.0, 1.0], 1.0 / 16.0);
        assert!(p.ghost_identity_defect(|x| x[1] * x[1] - x[0] * x[0] + 3.0 * x[0]).unwrap() < 1e-13);
        let p = laplace_problem(vec![0.7, 1.0], 1.0 / 16.0);
        assert!(p.ghost_identity_defect(|x| x[0] - 0.7 * x[1] + 2.0).unwrap() < 1e-13);
        // upwind branch is still exact on affine functions
        let p = laplace_problem(vec![2.5, 1.0], 1.0 / 16.0);
        assert!(p.ghost_identity_defect(|x| x[0] - 2.5 * x[1]).unwrap() < 1e-13);
    }

    #[test]
    fn neumann_affine_recovered() {
        let p = laplace_problem(vec![0.0, 1.0], 1.0 / 16.0);
        let (u, _) = solve_oblique(&p, |x| x[0]).unwrap();
        assert!(u.sup_error(|x| x[0]) < 1e-8);
    }

    #[test]
    fn linearization_of_trace_is_trace() {
        let prob = Problem::unit_ball(
            OperatorSpec::laplace(2),
            Rhs::constant(0.0),
            BoundaryLaw::constant(2, 1.0).unwrap(),
        )
        .unwrap();
        let p = QuadPoly::new(SymMatrix::diag(&[0.0, 1.0]));
        let lin = linearize_operator(&prob, &p, 1.0, 0.3).unwrap();
        let m = SymMatrix::from_upper(2, vec![1.0, 2.0, -3.0]).unwrap();
        assert!((lin.eval(&m, &[0.0, 0.0], &[0.0, 0.0]) - m.trace()).abs() < 1e-12);
    }

    #[test]
    fn expansion_of_exact_quadratic() {
        let p = laplace_problem(vec![0.0, 1.0], 1.0 / 64.0);
        let mut f = p.empty_field().unwrap();
        f.fill(|x| x[1] * x[1] - x[0] * x[0]);
        let e = pointwise_expansion(&f).unwrap();
        assert!((e.hess0.get(0, 0) + 2.0).abs() < 1e-9);
        assert!((e.hess0.get(1, 1) - 2.0).abs() < 1e-9);
        assert!(e.residual < 1e-10);
        assert!(e.exponent.is_none());
    }

    #[test]
    fn coarse_grid_expansion_is_resolution_error() {
        let p = laplace_problem(vec![0.0, 1.0], 0.125);
        let f = p.empty_field().unwrap();
        assert!(matches!(pointwise_expansion(&f), Err(Error::Resolution(_))));
    }
}
