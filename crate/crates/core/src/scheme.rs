//! Finite-difference evaluation of F(D²u, ∇u, x) on grid fields and the
//! nonlinear Gauss-Seidel relaxation shared by every grid solve.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{lattice_offsets, Grid, GridField, NodeKind};
use crate::linalg::{dot, SymMatrix};
use crate::operators::{OpKind, Problem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    CentralHessian,
    WideStencil,
}

/// Default relative residual tolerance of grid solves.
pub const DEFAULT_TOL: f64 = 1e-8;
/// Default sweep cap of grid solves.
pub const DEFAULT_MAX_SWEEPS: usize = 1_000_000;

#[derive(Clone, Debug)]
pub struct DiscreteProblem {
    pub problem: Problem,
    pub scheme: Scheme,
    /// Lattice directions of the wide stencil (± pairs).
    pub directions: Vec<Vec<i64>>,
    /// Positivity cutoff; `None` means h².
    pub fb_threshold: Option<f64>,
    /// Relative tolerance: solves stop once the residual is below
    /// `tol · max(1, ‖u‖∞)`.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Relaxation factor override.
    pub omega: Option<f64>,
}

impl DiscreteProblem {
    pub fn new(problem: Problem, scheme: Scheme) -> Self {
        let d = problem.dim();
        DiscreteProblem {
            problem,
            scheme,
            directions: lattice_offsets(d, 1),
            fb_threshold: None,
            tol: DEFAULT_TOL,
            max_sweeps: DEFAULT_MAX_SWEEPS,
            omega: None,
        }
    }

    /// Replaces the wide-stencil direction set; it must span ℝᵈ, come in ±
    /// pairs and stay within one node per axis.
    pub fn with_directions(mut self, dirs: Vec<Vec<i64>>) -> Result<Self> {
        let d = self.problem.dim();
        if dirs.iter().any(|v| v.len() != d || v.iter().all(|&e| e == 0) || v.iter().any(|e| e.abs() > 1)) {
            return Err(Error::InvalidInput("stencil directions must be nonzero vectors in {-1,0,1}^d".into()));
        }
        for v in &dirs {
            let neg: Vec<i64> = v.iter().map(|e| -e).collect();
            if !dirs.contains(&neg) {
                return Err(Error::InvalidInput(format!("direction {v:?} lacks its opposite")));
            }
        }
        let rank_ok = (0..d).all(|k| dirs.iter().any(|v| v[k] != 0));
        let mut gram = SymMatrix::zeros(d);
        for v in &dirs {
            let vf: Vec<f64> = v.iter().map(|&e| e as f64).collect();
            gram = gram.add(&SymMatrix::outer(&vf));
        }
        if !rank_ok || gram.eigenvalues()[0] < 1e-9 {
            return Err(Error::InvalidInput("stencil directions do not span the space".into()));
        }
        self.directions = dirs;
        Ok(self)
    }

    pub fn threshold(&self, h: f64) -> f64 {
        self.fb_threshold.unwrap_or(h * h)
    }

    /// Conservative diagonal dominance constant `2dΛ/h² + Lip/h`.
    pub fn diag_scale(&self, h: f64) -> f64 {
        let op = &self.problem.op;
        2.0 * op.dim as f64 * op.big_lambda / (h * h) + op.lip_grad / h
    }
}

/// Precomputed linear-index offsets for interior nodes.
#[derive(Clone, Debug)]
pub(crate) struct Stencil {
    pub dim: usize,
    pub h: f64,
    pub strides: Vec<isize>,
    /// (linear offset, |v|², unit direction) for every wide-stencil direction.
    pub dirs: Vec<(isize, f64, Vec<f64>)>,
    diag: Option<(Vec<f64>, Vec<f64>)>,
}

impl Stencil {
    /// Central differences only (no wide-stencil directions).
    pub fn central(grid: &Grid) -> Self {
        let strides: Vec<isize> = grid.strides().iter().map(|&s| s as isize).collect();
        Stencil { dim: grid.dim, h: grid.h, strides, dirs: Vec::new(), diag: None }
    }

    pub fn new(grid: &Grid, dp: &DiscreteProblem) -> Self {
        let strides: Vec<isize> = grid.strides().iter().map(|&s| s as isize).collect();
        let dirs = dp
            .directions
            .iter()
            .map(|v| {
                let off: isize = v.iter().zip(&strides).map(|(&e, &s)| e as isize * s).sum();
                let n2: f64 = v.iter().map(|&e| (e * e) as f64).sum();
                let unit: Vec<f64> = v.iter().map(|&e| e as f64 / n2.sqrt()).collect();
                (off, n2, unit)
            })
            .collect();
        Stencil { dim: grid.dim, h: grid.h, strides, dirs, diag: dp.problem.op.linear_diagonal() }
    }

    #[inline]
    fn at(values: &[f64], i: usize, off: isize) -> f64 {
        values[(i as isize + off) as usize]
    }

    /// Central-difference gradient and Hessian at an interior node.
    pub fn jet(&self, values: &[f64], i: usize) -> (Vec<f64>, SymMatrix) {
        let d = self.dim;
        let h = self.h;
        let u0 = values[i];
        let mut grad = vec![0.0; d];
        let mut hess = SymMatrix::zeros(d);
        for k in 0..d {
            let sk = self.strides[k];
            let up = Self::at(values, i, sk);
            let um = Self::at(values, i, -sk);
            grad[k] = (up - um) / (2.0 * h);
            hess.set(k, k, (up - 2.0 * u0 + um) / (h * h));
            for l in (k + 1)..d {
                let sl = self.strides[l];
                let v = (Self::at(values, i, sk + sl) - Self::at(values, i, sk - sl) - Self::at(values, i, sl - sk)
                    + Self::at(values, i, -sk - sl))
                    / (4.0 * h * h);
                hess.set(k, l, v);
            }
        }
        (grad, hess)
    }

    /// Hessian whose eigenvalues are replaced by second differences along the
    /// lattice direction closest to each eigenvector.
    pub fn wide_hessian(&self, values: &[f64], i: usize, central: &SymMatrix) -> SymMatrix {
        let d = self.dim;
        let eig = central.eigen();
        let u0 = values[i];
        let mut out = SymMatrix::zeros(d);
        for k in 0..d {
            let v: Vec<f64> = (0..d).map(|r| eig.vectors[r][k]).collect();
            let (off, n2, _) = self
                .dirs
                .iter()
                .max_by(|a, b| dot(&a.2, &v).abs().total_cmp(&dot(&b.2, &v).abs()))
                .expect("direction set is nonempty");
            let second = (Self::at(values, i, *off) - 2.0 * u0 + Self::at(values, i, -*off)) / (self.h * self.h * n2);
            out = out.add_scaled(second, &SymMatrix::outer(&v));
        }
        out
    }

    /// F(D²u, ∇u, x) at an interior node.
    #[inline]
    pub fn eval(&self, values: &[f64], i: usize, x: &[f64], dp: &DiscreteProblem) -> f64 {
        if let Some((a, b)) = &self.diag {
            let h = self.h;
            let u0 = values[i];
            let mut acc = 0.0;
            for k in 0..self.dim {
                let sk = self.strides[k];
                let up = Self::at(values, i, sk);
                let um = Self::at(values, i, -sk);
                acc += a[k] * (up - 2.0 * u0 + um) / (h * h);
                if b[k] != 0.0 {
                    acc += b[k] * (up - um) / (2.0 * h);
                }
            }
            return acc;
        }
        let (grad, hess) = self.jet(values, i);
        let m = match dp.scheme {
            Scheme::CentralHessian => hess,
            Scheme::WideStencil => self.wide_hessian(values, i, &hess),
        };
        dp.problem.op.eval(&m, &grad, x)
    }
}

/// Discretized F(D²u, ∇u, x) at `node`.
pub fn evaluate_f(field: &GridField, dp: &DiscreteProblem, node: usize) -> Result<f64> {
    if node >= field.len() || field.mask[node] != NodeKind::Interior {
        return Err(Error::BoundaryStencil(node));
    }
    let st = Stencil::new(&field.grid, dp);
    Ok(st.eval(&field.values, node, &field.coord(node), dp))
}

/// Central-difference Hessian at an interior node.
pub fn hessian_at(field: &GridField, node: usize) -> Result<SymMatrix> {
    if node >= field.len() || field.mask[node] != NodeKind::Interior {
        return Err(Error::BoundaryStencil(node));
    }
    Ok(Stencil::central(&field.grid).jet(&field.values, node).1)
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct SolveStats {
    pub stage: String,
    pub sweeps: usize,
    pub residual: f64,
    pub omega: f64,
}

/// Which nodes move and the bounds they are projected onto.
pub(crate) struct Relax<'a> {
    pub active: &'a [bool],
    pub lower: Option<&'a [f64]>,
    pub upper: Option<&'a [f64]>,
    pub stage: &'a str,
}

/// Projected nonlinear Gauss-Seidel in red-black order:
/// `u ← clamp(u + ω(F − f)/D)`, until the projected residual drops below the
/// problem tolerance.
pub(crate) fn relax(values: &mut [f64], grid: &Grid, dp: &DiscreteProblem, r: Relax<'_>) -> Result<SolveStats> {
    let st = Stencil::new(grid, dp);
    let h = grid.h;
    let dscale = dp.diag_scale(h);
    let mut red = Vec::new();
    let mut black = Vec::new();
    let mut lo_ix = vec![usize::MAX; grid.dim];
    let mut hi_ix = vec![0usize; grid.dim];
    for i in 0..grid.len() {
        if !r.active[i] {
            continue;
        }
        let m = grid.multi_index(i);
        for k in 0..grid.dim {
            lo_ix[k] = lo_ix[k].min(m[k]);
            hi_ix[k] = hi_ix[k].max(m[k]);
        }
        let x = grid.coord(i);
        let f = dp.problem.f.eval(&x);
        if m.iter().sum::<usize>() % 2 == 0 {
            red.push((i, x, f));
        } else {
            black.push((i, x, f));
        }
    }
    let omega = dp.omega.unwrap_or_else(|| {
        if matches!(dp.problem.op.kind, OpKind::Linear { .. }) && !red.is_empty() {
            let extent = (0..grid.dim).map(|k| (hi_ix[k] - lo_ix[k] + 2) as f64 * h).fold(0.0, f64::max);
            2.0 / (1.0 + (std::f64::consts::PI * h / extent).sin())
        } else {
            1.0
        }
    });
    let mut stats = SolveStats { stage: r.stage.to_string(), sweeps: 0, residual: 0.0, omega };
    if red.is_empty() && black.is_empty() {
        return Ok(stats);
    }
    let scale = values.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let tol = dp.tol * scale;
    let mut history = Vec::new();
    for sweep in 1..=dp.max_sweeps {
        let mut res: f64 = 0.0;
        for list in [&red, &black] {
            for (i, x, f) in list.iter() {
                let i = *i;
                let fv = st.eval(values, i, x, dp);
                let old = values[i];
                let mut new = old + (fv - f) / dscale;
                if let Some(lo) = r.lower {
                    new = new.max(lo[i]);
                }
                if let Some(up) = r.upper {
                    new = new.min(up[i]);
                }
                res = res.max((new - old).abs() * dscale);
                let mut relaxed = old + omega * (new - old);
                if let Some(lo) = r.lower {
                    relaxed = relaxed.max(lo[i]);
                }
                if let Some(up) = r.upper {
                    relaxed = relaxed.min(up[i]);
                }
                values[i] = relaxed;
            }
        }
        stats.sweeps = sweep;
        stats.residual = res;
        if !res.is_finite() {
            return Err(Error::Nonconvergence { stage: r.stage.into(), sweeps: sweep, residual: res, history });
        }
        if res <= tol {
            return Ok(stats);
        }
        if sweep % 1000 == 0 {
            history.push(res);
        }
    }
    Err(Error::Nonconvergence { stage: r.stage.into(), sweeps: dp.max_sweeps, residual: stats.residual, history })
}

/// Solves F(D²u,∇u,x) = f at the interior nodes of `init`, holding the
/// Dirichlet node values fixed; `init` also serves as initial guess.
pub fn solve_interior(dp: &DiscreteProblem, init: &GridField) -> Result<(GridField, SolveStats)> {
    let mut out = init.clone();
    let active: Vec<bool> = init.mask.iter().map(|&m| m == NodeKind::Interior).collect();
    let stats = relax(&mut out.values, &init.grid, dp, Relax { active: &active, lower: None, upper: None, stage: "solve_interior" })?;
    Ok((out, stats))
}

/// Max of |F − f| over interior nodes satisfying `select`.
pub fn interior_residual(field: &GridField, dp: &DiscreteProblem, select: impl Fn(usize) -> bool) -> f64 {
    let st = Stencil::new(&field.grid, dp);
    (0..field.len())
        .filter(|&i| field.mask[i] == NodeKind::Interior && select(i))
        .map(|i| {
            let x = field.coord(i);
            (st.eval(&field.values, i, &x, dp) - dp.problem.f.eval(&x)).abs()
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{BoundaryLaw, OperatorSpec, Rhs};

    fn dp(op: OperatorSpec, f: Rhs, scheme: Scheme) -> DiscreteProblem {
        let d = op.dim;
        DiscreteProblem::new(Problem::unit_ball(op, f, BoundaryLaw::constant(d, 1.0).unwrap()).unwrap(), scheme)
    }

    #[test]
    fn quadratic_is_exact() {
        let p = dp(OperatorSpec::laplace(2), Rhs::constant(0.0), Scheme::CentralHessian);
        let mut u = GridField::unit_ball(2, 1.0 / 16.0).unwrap();
        u.fill(|x| 1.5 * x[1] * x[1]);
        for i in u.nodes(NodeKind::Interior).collect::<Vec<_>>() {
            assert!((evaluate_f(&u, &p, i).unwrap() - 3.0).abs() < 1e-9);
        }
        let dir = u.nodes(NodeKind::Dirichlet).next().unwrap();
        assert!(matches!(evaluate_f(&u, &p, dir), Err(Error::BoundaryStencil(_))));
    }

    #[test]
    fn pucci_minus_on_profile() {
        let op = OperatorSpec::pucci_minus(2, 1.0, 2.0).unwrap();
        let p = dp(op, Rhs::constant(0.0), Scheme::CentralHessian);
        let mut u = GridField::unit_ball(2, 1.0 / 64.0).unwrap();
        u.fill(|x| 1.3 * x[1] + 0.5 * x[1] * x[1]);
        let i = u.grid.index(&[70, 80]);
        assert!((evaluate_f(&u, &p, i).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn wide_stencil_matches_on_axis_quadratic() {
        let op = OperatorSpec::pucci_plus(2, 1.0, 2.0).unwrap();
        let p = dp(op, Rhs::constant(0.0), Scheme::WideStencil);
        let mut u = GridField::unit_ball(2, 1.0 / 16.0).unwrap();
        u.fill(|x| x[0] * x[0] - 0.5 * x[1] * x[1]);
        let i = u.grid.index(&[16, 16]);
        assert!((evaluate_f(&u, &p, i).unwrap() - (2.0 * 2.0 - 1.0)).abs() < 1e-9);
    }

    #[test]
    fn directions_validated() {
        let p = dp(OperatorSpec::laplace(2), Rhs::constant(0.0), Scheme::WideStencil);
        assert!(p.clone().with_directions(vec![vec![1, 0], vec![-1, 0]]).is_err());
        assert!(p.clone().with_directions(vec![vec![1, 0], vec![0, 1]]).is_err());
        assert!(p.with_directions(vec![vec![1, 0], vec![-1, 0], vec![0, 1], vec![0, -1]]).is_ok());
    }
}
