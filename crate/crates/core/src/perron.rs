//! Discrete Perron pipeline: obstacle replacement, minima of supersolutions,
//! carving, free boundary extraction and the Lipschitz / non-degeneracy /
//! Harnack measurements.

use serde::Serialize;

use crate::barriers::exponential_supersolution;
use crate::error::{Error, Result};
use crate::grid::{lattice_offsets, Grid, GridField, NodeKind};
use crate::linalg::{dot, least_squares, norm, sub, unit, SymMatrix};
use crate::operators::BoundaryLaw;
use crate::scheme::{hessian_at, relax, DiscreteProblem, Relax, SolveStats, Stencil};

/// Knobs of the carve/replace loop.
#[derive(Clone, Debug, Serialize)]
pub struct PerronParams {
    /// Carve ball radius in units of h.
    pub carve_radius_nodes: f64,
    /// Cone opening σ of the carving domain.
    pub sigma: f64,
    /// carve_margin = factor · h · (1 + ‖D²‖).
    pub margin_factor: f64,
    /// Revert threshold on the free boundary slope excess after a carve, in units of h.
    pub refine_tol_factor: f64,
    /// Fraction of the predicted front advance taken per refinement round.
    pub refine_step: f64,
    /// Node-wise refinement of the free boundary after carving.
    pub refine: bool,
    pub max_rounds: usize,
}

impl Default for PerronParams {
    fn default() -> Self {
        PerronParams {
            carve_radius_nodes: 8.0,
            sigma: 0.25,
            margin_factor: 5.0,
            refine_tol_factor: 0.25,
            refine_step: 0.5,
            refine: true,
            max_rounds: 10_000,
        }
    }
}

/// One free boundary node with its one-sided gradient data.
#[derive(Clone, Debug, Serialize)]
pub struct FbNode {
    pub node: usize,
    pub x: Vec<f64>,
    /// Estimated free boundary point `x − (u/|∇u|)ν`.
    pub point: Vec<f64>,
    /// Unit normal pointing into the positivity set.
    pub normal: Vec<f64>,
    pub grad_norm: f64,
    /// Gradient magnitude extrapolated to the free boundary point.
    pub slope: f64,
    /// g at the free boundary point and normal.
    pub g: f64,
    /// Max of the field over the surrounding 3ᵈ patch.
    pub patch_max: f64,
}

fn is_positive(field: &GridField, i: usize, thr: f64) -> bool {
    field.mask[i] != NodeKind::Exterior && field.values[i] > thr
}

/// Interior nodes above the threshold with an axis neighbor at or below it.
pub fn free_boundary_nodes(field: &GridField, thr: f64) -> Vec<usize> {
    let g = &field.grid;
    (0..field.len())
        .filter(|&i| field.mask[i] == NodeKind::Interior && field.values[i] > thr)
        .filter(|&i| {
            (0..g.dim).any(|k| {
                [-1i64, 1].iter().any(|&s| g.step(i, k, s).is_some_and(|j| field.values[j] <= thr))
            })
        })
        .collect()
}

/// One-sided gradient analysis at every free boundary node.
pub fn fb_analysis(field: &GridField, law: &BoundaryLaw, thr: f64) -> Vec<FbNode> {
    free_boundary_nodes(field, thr).into_iter().map(|i| fb_node(field, law, thr, i)).collect()
}

fn fb_node(field: &GridField, law: &BoundaryLaw, thr: f64, i: usize) -> FbNode {
    let g = &field.grid;
    let d = g.dim;
    let u0 = field.values[i];
    let (grad, hess) = fb_fit(field, thr, i).unwrap_or_else(|| fb_stencil(field, thr, i));
    let gn = norm(&grad);
    let normal: Vec<f64> = if gn > 1e-14 { grad.iter().map(|v| v / gn).collect() } else { unit(d, d - 1) };
    let x = g.coord(i);
    let (slope, point) = fb_probe(field, thr, &x, &normal).unwrap_or_else(|| {
        let s = if gn > 1e-14 { u0 / gn } else { 0.0 };
        ((gn - s * hess.quad(&normal)).max(0.0), x.iter().zip(&normal).map(|(a, n)| a - s * n).collect())
    });
    let patch_max = g
        .neighbor_offsets()
        .iter()
        .filter_map(|o| g.offset(i, o))
        .filter(|&j| field.mask[j] != NodeKind::Exterior)
        .map(|j| field.values[j])
        .fold(u0, f64::max);
    FbNode { node: i, g: law.g(&point, &normal), x, point, normal, grad_norm: gn, slope, patch_max }
}

/// Slope read off the jet at `x + kh·ν` (k = 3, else 2), interpolated from
/// nodes whose whole 3ᵈ patch is positive, and carried back to the free
/// boundary along ν with the quadratic model `u(t) = at + ½bt²`:
/// `a = √(|∇u|² − 2bu)` with `b = νᵀD²uν`. Returns (slope, free boundary point).
fn fb_probe(field: &GridField, thr: f64, x: &[f64], normal: &[f64]) -> Option<(f64, Vec<f64>)> {
    let g = &field.grid;
    let d = g.dim;
    let h = g.h;
    let st = Stencil::central(g);
    let offs = g.neighbor_offsets();
    'probe: for k in [3.0, 2.0] {
        let q: Vec<f64> = x.iter().zip(normal).map(|(a, n)| a + k * h * n).collect();
        let Some((cell, t)) = g.locate(&q) else { continue };
        let mut u = 0.0;
        let mut grad = vec![0.0; d];
        let mut hess = SymMatrix::zeros(d);
        for corner in 0..(1usize << d) {
            let mut m = cell.clone();
            let mut w = 1.0;
            for a in 0..d {
                if corner >> a & 1 == 1 {
                    m[a] += 1;
                    w *= t[a];
                } else {
                    w *= 1.0 - t[a];
                }
            }
            let j = g.index(&m);
            let ok = field.mask[j] == NodeKind::Interior
                && field.values[j] > thr
                && offs.iter().all(|o| g.offset(j, o).is_some_and(|l| is_positive(field, l, thr)));
            if !ok {
                continue 'probe;
            }
            let (gj, hj) = st.jet(&field.values, j);
            u += w * field.values[j];
            for a in 0..d {
                grad[a] += w * gj[a];
            }
            hess = hess.add_scaled(w, &hj);
        }
        let gn = norm(&grad);
        if gn <= 1e-14 {
            return None;
        }
        let nu: Vec<f64> = grad.iter().map(|v| v / gn).collect();
        let b = hess.quad(&nu);
        let disc = gn * gn - 2.0 * b * u;
        if disc < 0.0 {
            return None;
        }
        let a = disc.sqrt();
        let dist = if b.abs() > 1e-12 { (gn - a) / b } else { u / gn };
        let point = q.iter().zip(&nu).map(|(c, n)| c - dist * n).collect();
        return Some((a, point));
    }
    None
}

/// Least-squares quadratic through the positive nodes within 2.5h; returns
/// the gradient and Hessian at the node itself.
fn fb_fit(field: &GridField, thr: f64, i: usize) -> Option<(Vec<f64>, SymMatrix)> {
    let g = &field.grid;
    let d = g.dim;
    let h = g.h;
    let npar = 1 + d + d * (d + 1) / 2;
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    let mut offs = lattice_offsets(d, 2);
    offs.push(vec![0; d]);
    for o in offs.iter().filter(|o| o.iter().map(|e| e * e).sum::<i64>() * 4 <= 25) {
        let Some(j) = g.offset(i, o) else { continue };
        if !is_positive(field, j, thr) {
            continue;
        }
        let y: Vec<f64> = o.iter().map(|&e| e as f64).collect();
        let mut row = Vec::with_capacity(npar);
        row.push(1.0);
        row.extend_from_slice(&y);
        for a in 0..d {
            for b in a..d {
                row.push(if a == b { 0.5 * y[a] * y[a] } else { y[a] * y[b] });
            }
        }
        rows.push(row);
        rhs.push(field.values[j]);
    }
    if rows.len() < npar + 2 {
        return None;
    }
    let c = least_squares(&rows, &rhs).ok()?;
    let grad: Vec<f64> = c[1..=d].iter().map(|v| v / h).collect();
    let hess = SymMatrix::from_upper(d, c[1 + d..].iter().map(|v| v / (h * h)).collect()).ok()?;
    Some((grad, hess))
}

/// One-sided difference gradient: central along axes with both neighbors
/// positive, three-point one-sided toward the positive side otherwise.
fn fb_stencil(field: &GridField, thr: f64, i: usize) -> (Vec<f64>, SymMatrix) {
    let g = &field.grid;
    let d = g.dim;
    let h = g.h;
    let u0 = field.values[i];
    let mut grad = vec![0.0; d];
    let mut d2 = vec![0.0; d];
    let val = |j: Option<usize>| j.filter(|&j| is_positive(field, j, thr)).map(|j| field.values[j]);
    for k in 0..d {
        let up = val(g.step(i, k, 1));
        let dn = val(g.step(i, k, -1));
        match (dn, up) {
            (Some(a), Some(b)) => {
                grad[k] = (b - a) / (2.0 * h);
                d2[k] = (b - 2.0 * u0 + a) / (h * h);
            }
            (None, Some(u1)) | (Some(u1), None) => {
                let sgn = if up.is_some() { 1i64 } else { -1 };
                let far = g.step(i, k, 2 * sgn).and_then(|j| val(Some(j)));
                let (dd, sd) = match far {
                    Some(u2) => ((-3.0 * u0 + 4.0 * u1 - u2) / (2.0 * h), (u0 - 2.0 * u1 + u2) / (h * h)),
                    None => ((u1 - u0) / h, 0.0),
                };
                grad[k] = sgn as f64 * dd;
                d2[k] = sd;
            }
            (None, None) => {}
        }
    }
    (grad, SymMatrix::diag(&d2))
}

/// Nodes (any mask) within distance `radius` of `center`.
pub fn nodes_in_ball(grid: &Grid, center: &[f64], radius: f64) -> Vec<usize> {
    let d = grid.dim;
    let mut lo = vec![0usize; d];
    let mut hi = vec![0usize; d];
    for k in 0..d {
        let a = ((center[k] - radius - grid.lo[k]) / grid.h).floor().max(0.0) as usize;
        let b = ((center[k] + radius - grid.lo[k]) / grid.h).ceil();
        if b < 0.0 {
            return Vec::new();
        }
        lo[k] = a;
        hi[k] = (b as usize).min(grid.n[k] - 1);
        if lo[k] > hi[k] {
            return Vec::new();
        }
    }
    let mut out = Vec::new();
    let mut m = lo.clone();
    loop {
        let i = grid.index(&m);
        let x = grid.coord(i);
        if norm(&sub(&x, center)) <= radius * (1.0 + 1e-12) {
            out.push(i);
        }
        let mut k = d;
        loop {
            if k == 0 {
                return out;
            }
            k -= 1;
            if m[k] < hi[k] {
                m[k] += 1;
                break;
            }
            m[k] = lo[k];
        }
    }
}

fn lower_bounds(field: &GridField, minorant: Option<&GridField>) -> Result<Vec<f64>> {
    match minorant {
        Some(m) => {
            field.check_same_grid(m)?;
            Ok(m.values.iter().map(|v| v.max(0.0)).collect())
        }
        None => Ok(vec![0.0; field.len()]),
    }
}

/// Obstacle replacement of `w` on its positivity set: the result `w̄`
/// satisfies `max(0, minorant) ≤ w̄ ≤ w`, equals `w` at Dirichlet nodes, solves
/// F = f where it lies strictly between the bounds and `F ≤ f` where it
/// touches the lower one.
pub fn obstacle_replace(w: &GridField, dp: &DiscreteProblem, minorant: Option<&GridField>) -> Result<(GridField, SolveStats)> {
    let lower = lower_bounds(w, minorant)?;
    let thr = dp.threshold(w.h());
    let mut out = w.clone();
    let mut active = vec![false; w.len()];
    for i in 0..w.len() {
        if w.mask[i] != NodeKind::Interior {
            continue;
        }
        if w.values[i] > thr {
            active[i] = true;
        } else {
            out.values[i] = lower[i].min(w.values[i].max(0.0));
        }
    }
    let upper = out.values.clone();
    let stats = relax(
        &mut out.values,
        &w.grid,
        dp,
        Relax { active: &active, lower: Some(&lower), upper: Some(&upper), stage: "obstacle_replace" },
    )?;
    Ok((out, stats))
}

/// Node-wise minimum of two supersolutions.
pub fn min_supersolutions(w1: &GridField, w2: &GridField) -> Result<GridField> {
    w1.min_with(w2)
}

/// Result of a single carve.
#[derive(Clone, Debug)]
pub struct CarveOutcome {
    pub field: GridField,
    /// False when the comparison function fell below `w` on the rim, in which
    /// case the field is returned unchanged.
    pub applied: bool,
    pub stats: SolveStats,
}

/// Local comparison carve at a free boundary node.
///
/// Inside `B_r(x₀)` (x₀ the estimated free boundary point, ν its normal) the
/// function v solves F = f on
/// `D_σ = {(y−x₀)·ν/r > −σ + 2σω(|y−x₀|/r)}` with `v = g(x₀,ν)((y−x₀)·ν + σr)₊`
/// on the rim shell and `v = 0` off `D_σ`; the carve replaces w by `min(w, v)`
/// in the ball provided `v ≥ w` on the rim.
pub fn carve(
    w: &GridField,
    fb: &FbNode,
    dp: &DiscreteProblem,
    params: &PerronParams,
    minorant: Option<&GridField>,
) -> Result<CarveOutcome> {
    let lower = lower_bounds(w, minorant)?;
    carve_with_lower(w, fb, dp, params, &lower)
}

fn cutoff(s: f64) -> f64 {
    (2.0 - 4.0 * s).clamp(0.0, 1.0)
}

fn carve_with_lower(w: &GridField, fb: &FbNode, dp: &DiscreteProblem, params: &PerronParams, lower: &[f64]) -> Result<CarveOutcome> {
    let grid = &w.grid;
    let h = grid.h;
    let r = params.carve_radius_nodes * h;
    let sigma = params.sigma;
    let x0 = &fb.point;
    let nu = &fb.normal;
    let g0 = dp.problem.law.g(x0, nu);
    let rim = r - (grid.dim as f64).sqrt() * h;
    let ball = nodes_in_ball(grid, x0, r);
    let mut vals = w.values.clone();
    let mut active = vec![false; w.len()];
    let mut rim_nodes = Vec::new();
    for &j in &ball {
        if w.mask[j] != NodeKind::Interior {
            continue;
        }
        let y = sub(&grid.coord(j), x0);
        let dist = norm(&y);
        let t = dot(&y, nu);
        if dist > rim {
            vals[j] = (g0 * (t + sigma * r)).max(0.0).max(lower[j]);
            rim_nodes.push(j);
        } else if t / r > -sigma + 2.0 * sigma * cutoff(dist / r) {
            active[j] = true;
            vals[j] = vals[j].max(lower[j]);
        } else {
            vals[j] = lower[j];
        }
    }
    let stats = relax(&mut vals, grid, dp, Relax { active: &active, lower: Some(lower), upper: None, stage: "carve" })?;
    let slack = 1e-12 * (1.0 + w.max_abs());
    if rim_nodes.iter().any(|&j| vals[j] < w.values[j] - slack) {
        return Ok(CarveOutcome { field: w.clone(), applied: false, stats });
    }
    let mut out = w.clone();
    for &j in &ball {
        if w.mask[j] == NodeKind::Interior {
            out.values[j] = w.values[j].min(vals[j]);
        }
    }
    Ok(CarveOutcome { field: out, applied: true, stats })
}

/// `g − slope` over free boundary points within `reach` of `p`, sorted.
fn local_deficits(fb: &[FbNode], p: &[f64], reach: f64) -> Vec<f64> {
    let mut v: Vec<f64> = fb.iter().filter(|n| norm(&sub(&n.point, p)) <= reach).map(|n| n.g - n.slope).collect();
    v.sort_by(f64::total_cmp);
    v
}

/// 90th percentile over interior nodes with a positive 3ᵈ patch of `max |D²u|`.
pub fn hessian_scale(field: &GridField, thr: f64) -> f64 {
    let offs = field.grid.neighbor_offsets();
    let mut vals: Vec<f64> = (0..field.len())
        .filter(|&i| field.mask[i] == NodeKind::Interior && field.values[i] > thr)
        .filter(|&i| offs.iter().all(|o| field.grid.offset(i, o).is_some_and(|j| field.values[j] > thr)))
        .filter_map(|i| hessian_at(field, i).ok())
        .map(|m| m.norm_inf())
        .collect();
    if vals.is_empty() {
        return 0.0;
    }
    vals.sort_by(f64::total_cmp);
    vals[((vals.len() - 1) as f64 * 0.9).round() as usize]
}

#[derive(Clone, Debug, Serialize)]
pub struct StageRecord {
    pub tag: String,
    pub sweeps: usize,
    pub residual: f64,
    /// Largest pointwise increase relative to the previous stage (≤ 0 when monotone).
    pub max_increase: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct PerronReport {
    pub stages: Vec<StageRecord>,
    pub carve_rounds: usize,
    pub carves_applied: usize,
    pub carves_skipped: usize,
    pub refine_rounds: usize,
    pub carve_margin: f64,
    pub interior_residual: f64,
    pub fb_nodes: usize,
    pub max_fb_excess: f64,
    pub max_fb_deficit: f64,
    pub monotone: bool,
    pub stalled: bool,
}

/// Current supersolution with its stage history.
#[derive(Clone, Debug)]
pub struct PerronState {
    pub w: GridField,
    pub report: PerronReport,
}

impl PerronState {
    fn advance(&mut self, tag: &str, next: GridField, stats: Option<&SolveStats>) {
        let inc = self
            .w
            .values
            .iter()
            .zip(&next.values)
            .zip(&self.w.mask)
            .filter(|(_, &m)| m != NodeKind::Exterior)
            .map(|((a, b), _)| b - a)
            .fold(f64::NEG_INFINITY, f64::max);
        self.report.stages.push(StageRecord {
            tag: tag.to_string(),
            sweeps: stats.map_or(0, |s| s.sweeps),
            residual: stats.map_or(0.0, |s| s.residual),
            max_increase: inc,
        });
        self.w = next;
    }
}

#[derive(Clone, Debug)]
pub struct PerronOutput {
    pub field: GridField,
    pub fb: Vec<FbNode>,
    pub report: PerronReport,
}

/// Perron pipeline on the unit ball: exponential supersolution, then
/// replace/carve rounds until no free boundary slope falls short of g by more
/// than the carve margin, then node-wise refinement of the free boundary.
pub fn perron_solve(
    dp: &DiscreteProblem,
    h: f64,
    phi: impl Fn(&[f64]) -> f64,
    minorant: Option<&GridField>,
    params: &PerronParams,
) -> Result<PerronOutput> {
    let problem = &dp.problem;
    if problem.radius != 1.0 || problem.center.iter().any(|&c| c != 0.0) {
        return Err(Error::InvalidInput("perron_solve works on the unit ball".into()));
    }
    let mut base = GridField::unit_ball(problem.dim(), h)?;
    let mut datum_bound: f64 = 0.0;
    for i in base.nodes(NodeKind::Dirichlet).collect::<Vec<_>>() {
        let v = phi(&base.coord(i));
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::InvalidInput(format!("boundary datum must be finite and non-negative, got {v}")));
        }
        datum_bound = datum_bound.max(v);
    }
    let minorant_bound = match minorant {
        Some(m) => {
            base.check_same_grid(m)?;
            m.max_abs()
        }
        None => 0.0,
    };
    let f_bound = (0..base.len())
        .filter(|&i| base.mask[i] != NodeKind::Exterior)
        .map(|i| problem.f.eval(&base.coord(i)).abs())
        .fold(0.0, f64::max);
    let (exp, _) = exponential_supersolution(problem, f_bound, minorant_bound, datum_bound)?;
    base.fill(|x| exp.value(x));
    base.set_dirichlet(&phi);

    let lower = lower_bounds(&base, minorant)?;
    let thr = dp.threshold(h);
    let mut state = PerronState { w: base.clone(), report: PerronReport { monotone: true, ..Default::default() } };
    state.report.stages.push(StageRecord { tag: "exponential".into(), sweeps: 0, residual: 0.0, max_increase: 0.0 });

    let reach = params.carve_radius_nodes * h;
    let tol = params.refine_tol_factor * h;
    let mut settled: Vec<Vec<f64>> = Vec::new();
    let (next, stats) = obstacle_replace(&state.w, dp, minorant)?;
    state.advance("replace", next, Some(&stats));
    let mut converged = false;
    for round in 0..params.max_rounds {
        let margin = params.margin_factor * h * (1.0 + hessian_scale(&state.w, thr));
        state.report.carve_margin = margin;
        let fb = fb_analysis(&state.w, &problem.law, thr);
        let violators: Vec<&FbNode> = fb
            .iter()
            .filter(|n| n.slope < n.g && lower[n.node] <= thr)
            .filter(|n| !settled.iter().any(|c| norm(&sub(c, &n.point)) < reach))
            .filter(|n| local_deficits(&fb, &n.point, reach).first().is_some_and(|&m| m > margin))
            .collect();
        state.report.carve_rounds = round + 1;
        if violators.is_empty() {
            converged = true;
            break;
        }
        // Carves of one round use disjoint balls so that a dent is never
        // carved again before the next replacement.
        let mut w = state.w.clone();
        let mut carved: Vec<(Vec<f64>, Vec<(usize, f64)>)> = Vec::new();
        for v in violators {
            if carved.iter().any(|(c, _)| norm(&sub(c, &v.point)) < 2.0 * reach) {
                continue;
            }
            let out = carve_with_lower(&w, v, dp, params, &lower)?;
            let changes: Vec<(usize, f64)> = (0..w.len())
                .filter(|&j| out.field.values[j] != w.values[j])
                .map(|j| (j, out.field.values[j]))
                .collect();
            if out.applied && !changes.is_empty() {
                carved.push((v.point.clone(), changes));
                w = out.field;
            } else {
                state.report.carves_skipped += 1;
                settled.push(v.point.clone());
            }
        }
        if carved.is_empty() {
            state.report.stalled = true;
            converged = true;
            break;
        }
        // A carve that leaves free boundary slopes above g around it went
        // past the solution; it is undone and its neighborhood is left to
        // the node-wise refinement.
        let (rep, stats) = obstacle_replace(&w, dp, minorant)?;
        let fb_after = fb_analysis(&rep, &problem.law, thr);
        let (good, bad): (Vec<_>, Vec<_>) =
            carved.into_iter().partition(|(c, _)| {
                let v = local_deficits(&fb_after, c, reach);
                v.is_empty() || -v[v.len() / 2] <= tol
            });
        state.report.carves_applied += good.len();
        state.report.carves_skipped += bad.len();
        if bad.is_empty() {
            state.advance("carve", w, None);
            state.advance("replace", rep, Some(&stats));
            continue;
        }
        settled.extend(bad.into_iter().map(|(c, _)| c));
        if good.is_empty() {
            continue;
        }
        let mut w = state.w.clone();
        for (_, changes) in &good {
            for &(j, v) in changes {
                w.values[j] = v;
            }
        }
        let (rep, stats) = obstacle_replace(&w, dp, minorant)?;
        state.advance("carve", w, None);
        state.advance("replace", rep, Some(&stats));
    }
    if !converged {
        let history = state.report.stages.iter().map(|s| s.residual).collect();
        return Err(Error::Nonconvergence {
            stage: "perron carve loop".into(),
            sweeps: params.max_rounds,
            residual: state.report.carve_margin,
            history,
        });
    }

    if params.refine {
        refine(&mut state, dp, minorant, &lower, params)?;
    }

    let field = state.w;
    let fb = fb_analysis(&field, &problem.law, thr);
    let mut report = state.report;
    report.monotone = report.stages.iter().all(|s| s.max_increase <= 1e-12 * (1.0 + datum_bound));
    report.fb_nodes = fb.len();
    report.max_fb_excess = fb.iter().map(|n| n.slope - n.g).fold(0.0, f64::max);
    report.max_fb_deficit = fb.iter().map(|n| n.g - n.slope).fold(0.0, f64::max);
    let st = Stencil::new(&field.grid, dp);
    let offs = field.grid.neighbor_offsets();
    report.interior_residual = (0..field.len())
        .filter(|&i| field.mask[i] == NodeKind::Interior && field.values[i] > thr)
        .filter(|&i| offs.iter().all(|o| field.grid.offset(i, o).is_some_and(|j| field.values[j] > thr)))
        .map(|i| {
            let x = field.coord(i);
            (st.eval(&field.values, i, &x, dp) - problem.f.eval(&x)).abs()
        })
        .fold(0.0, f64::max);
    Ok(PerronOutput { field, fb, report })
}

/// Mean of `slope/g` over free boundary points within `radius` of each point.
fn smoothed_ratios(fb: &[FbNode], radius: f64) -> Vec<f64> {
    fb.iter()
        .map(|n| {
            let near: Vec<f64> =
                fb.iter().filter(|m| norm(&sub(&m.point, &n.point)) <= radius).map(|m| m.slope / m.g).collect();
            near.iter().sum::<f64>() / near.len() as f64
        })
        .collect()
}

/// Distance from `p` along the unit vector `v` to the sphere `∂B_R(c)`.
fn ray_to_sphere(p: &[f64], v: &[f64], c: &[f64], r: f64) -> f64 {
    let q = sub(p, c);
    let b = dot(&q, v);
    (b * b - dot(&q, &q) + r * r).max(0.0).sqrt() - b
}

/// Advances the free boundary where the slope, averaged over free boundary
/// points within `3h`, is below g: a front node is zeroed when its distance to
/// the estimated free boundary point is below `step · L · (1 − slope/g)`, L
/// being the distance along the normal to the Dirichlet boundary.
fn refine(state: &mut PerronState, dp: &DiscreteProblem, minorant: Option<&GridField>, lower: &[f64], params: &PerronParams) -> Result<()> {
    let h = state.w.h();
    let thr = dp.threshold(h);
    let law = &dp.problem.law;
    for _ in 0..params.max_rounds {
        let fb = fb_analysis(&state.w, law, thr);
        let ratios = smoothed_ratios(&fb, 3.0 * h);
        let wants: Vec<bool> = fb
            .iter()
            .zip(&ratios)
            .map(|(n, &ratio)| {
                let reach = ray_to_sphere(&n.point, &n.normal, &dp.problem.center, dp.problem.radius);
                let advance = params.refine_step * reach * (1.0 - ratio);
                lower[n.node] <= thr && advance > 0.0 && norm(&sub(&n.x, &n.point)) < advance
            })
            .collect();
        // A node is only zeroed together with at least half of its
        // neighbors along the front (or when they are already ahead of it),
        // and never while a neighbor lags behind it.
        let cands: Vec<usize> = (0..fb.len())
            .filter(|&i| wants[i])
            .filter(|&i| {
                let (mut tot, mut yes) = (0, 0);
                for (j, m) in fb.iter().enumerate() {
                    if j != i && norm(&sub(&m.point, &fb[i].point)) <= 2.0 * h {
                        let lead = dot(&sub(&m.x, &fb[i].x), &fb[i].normal);
                        if lead < -0.5 * h {
                            return false;
                        }
                        tot += 1;
                        yes += usize::from(wants[j] || lead > 0.5 * h);
                    }
                }
                2 * yes >= tot
            })
            .map(|i| fb[i].node)
            .collect();
        if cands.is_empty() {
            break;
        }
        state.report.refine_rounds += 1;
        let mut trial = state.w.clone();
        for &c in &cands {
            trial.values[c] = lower[c];
        }
        let (trial, stats) = obstacle_replace(&trial, dp, minorant)?;
        state.advance("refine", trial, Some(&stats));
    }
    Ok(())
}

/// Supersolution (or subsolution) residual report.
#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub kind: String,
    /// max over interior positive nodes of (F − f)₊ (super) or (f − F)₊ (sub).
    pub interior_violation: f64,
    pub interior_nodes: usize,
    pub fb_nodes: usize,
    /// Signed worst free boundary defect: slope − g (super) or g − slope (sub).
    pub max_fb_defect: f64,
    pub fb_tol: f64,
    /// Free boundary nodes whose defect exceeds `fb_tol`.
    pub fb_violations: Vec<usize>,
    /// Dichotomy tags: (a) slope ≥ cutoff, (b) patch max ≤ cutoff·h.
    pub tagged_a: usize,
    pub tagged_b: usize,
    pub untagged: usize,
    pub slope_cutoff: f64,
}

impl VerifyReport {
    pub fn passes(&self, interior_tol: f64) -> bool {
        self.interior_violation <= interior_tol && self.fb_violations.is_empty()
    }
}

fn verify(w: &GridField, dp: &DiscreteProblem, fb_tol: f64, sign: f64, kind: &str) -> VerifyReport {
    let h = w.h();
    let thr = dp.threshold(h);
    let st = Stencil::new(&w.grid, dp);
    let offs = w.grid.neighbor_offsets();
    let mut interior_violation: f64 = 0.0;
    let mut interior_nodes = 0;
    for i in 0..w.len() {
        if w.mask[i] != NodeKind::Interior || w.values[i] <= thr {
            continue;
        }
        if !offs.iter().all(|o| w.grid.offset(i, o).is_some_and(|j| w.values[j] > thr)) {
            continue;
        }
        interior_nodes += 1;
        let x = w.coord(i);
        let r = st.eval(&w.values, i, &x, dp) - dp.problem.f.eval(&x);
        interior_violation = interior_violation.max(sign * r);
    }
    let fb = fb_analysis(w, &dp.problem.law, thr);
    let cutoff = h.sqrt();
    let mut rep = VerifyReport {
        kind: kind.into(),
        interior_violation,
        interior_nodes,
        fb_nodes: fb.len(),
        max_fb_defect: f64::NEG_INFINITY,
        fb_tol,
        fb_violations: Vec::new(),
        tagged_a: 0,
        tagged_b: 0,
        untagged: 0,
        slope_cutoff: cutoff,
    };
    for n in &fb {
        let defect = sign * (n.slope - n.g);
        rep.max_fb_defect = rep.max_fb_defect.max(defect);
        if defect > fb_tol {
            rep.fb_violations.push(n.node);
        }
        if n.slope >= cutoff {
            rep.tagged_a += 1;
        } else if n.patch_max <= cutoff * h {
            rep.tagged_b += 1;
        } else {
            rep.untagged += 1;
        }
    }
    if fb.is_empty() {
        rep.max_fb_defect = 0.0;
    }
    rep
}

/// Interior inequality `F ≤ f` on positive nodes and free boundary slopes
/// `≤ g + fb_tol`.
pub fn verify_supersolution(w: &GridField, dp: &DiscreteProblem, fb_tol: f64) -> VerifyReport {
    verify(w, dp, fb_tol, 1.0, "supersolution")
}

/// Interior inequality `F ≥ f` on positive nodes and free boundary slopes
/// `≥ g − fb_tol`.
pub fn verify_subsolution(w: &GridField, dp: &DiscreteProblem, fb_tol: f64) -> VerifyReport {
    verify(w, dp, fb_tol, -1.0, "subsolution")
}

/// Max of `|u(a) − u(b)|/|a − b|` over node pairs at most two nodes apart
/// inside `B_ρ`.
pub fn lipschitz_norm(u: &GridField, rho: f64) -> f64 {
    let g = &u.grid;
    let offs: Vec<Vec<i64>> =
        lattice_offsets(g.dim, 2).into_iter().filter(|o| o.iter().map(|e| e * e).sum::<i64>() <= 4).collect();
    let inside = |i: usize| u.mask[i] != NodeKind::Exterior && norm(&g.coord(i)) <= rho * (1.0 + 1e-12);
    let mut best: f64 = 0.0;
    for i in 0..u.len() {
        if !inside(i) {
            continue;
        }
        for o in &offs {
            if let Some(j) = g.offset(i, o) {
                if inside(j) {
                    let dist = g.h * (o.iter().map(|e| (e * e) as f64).sum::<f64>()).sqrt();
                    best = best.max((u.values[i] - u.values[j]).abs() / dist);
                }
            }
        }
    }
    best
}

#[derive(Clone, Debug, Serialize)]
pub struct NondegeneracyReport {
    pub constant: f64,
    /// (r, min over free boundary nodes of sup_{B_r} u / r).
    pub per_radius: Vec<(f64, f64)>,
    /// True when the ratio is at most r at every listed radius.
    pub degenerate: bool,
}

/// `min_{x, r} sup_{B_r(x)} u / r` over the given free boundary nodes.
pub fn nondegeneracy_constant(u: &GridField, fb_nodes: &[usize], radii: &[f64]) -> NondegeneracyReport {
    let mut per_radius = Vec::with_capacity(radii.len());
    for &r in radii {
        let mut worst = f64::INFINITY;
        for &i in fb_nodes {
            let sup = nodes_in_ball(&u.grid, &u.coord(i), r)
                .into_iter()
                .filter(|&j| u.mask[j] != NodeKind::Exterior)
                .map(|j| u.values[j])
                .fold(f64::NEG_INFINITY, f64::max);
            worst = worst.min(sup / r);
        }
        per_radius.push((r, worst));
    }
    let constant = per_radius.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let degenerate = !per_radius.is_empty() && per_radius.iter().all(|&(r, c)| c <= r);
    NondegeneracyReport { constant, per_radius, degenerate }
}

/// `sup_{B_ρ} u / (inf_{B_ρ} u + f_sup)` where `f_sup` bounds |f| on `B_{2ρ}`.
pub fn harnack_ratio(u: &GridField, center: &[f64], rho: f64, f_sup: f64) -> Result<f64> {
    for j in nodes_in_ball(&u.grid, center, 2.0 * rho) {
        if u.mask[j] == NodeKind::Exterior || u.values[j] <= 0.0 {
            return Err(Error::Precondition(format!("field is not positive on B_2rho around {center:?}")));
        }
    }
    let (mut sup, mut inf) = (f64::NEG_INFINITY, f64::INFINITY);
    for j in nodes_in_ball(&u.grid, center, rho) {
        sup = sup.max(u.values[j]);
        inf = inf.min(u.values[j]);
    }
    if !sup.is_finite() {
        return Err(Error::Resolution("no grid nodes inside the ball".into()));
    }
    Ok(sup / (inf + f_sup))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{OperatorSpec, Problem, Rhs};
    use crate::scheme::Scheme;

    fn laplace_dp(d: usize, f: f64) -> DiscreteProblem {
        let pb = Problem::unit_ball(OperatorSpec::laplace(d), Rhs::constant(f), BoundaryLaw::constant(d, 1.0).unwrap()).unwrap();
        DiscreteProblem::new(pb, Scheme::CentralHessian)
    }

    #[test]
    fn planar_slopes_are_read_exactly() {
        let dp = laplace_dp(2, 0.0);
        let mut u = GridField::unit_ball(2, 1.0 / 32.0).unwrap();
        u.fill(|x| (2.0 * x[1]).max(0.0));
        let rep = verify_supersolution(&u, &dp, 0.01);
        assert!((rep.max_fb_defect - 1.0).abs() < 1e-9);
        assert!(!rep.fb_violations.is_empty());
        u.fill(|x| x[1].max(0.0));
        assert!(verify_supersolution(&u, &dp, 1e-9).passes(1e-9));
        assert!(verify_subsolution(&u, &dp, 1e-9).passes(1e-9));
        u.fill(|x| (0.5 * x[1]).max(0.0));
        assert!(!verify_subsolution(&u, &dp, 0.01).fb_violations.is_empty());
    }

    #[test]
    fn zero_field_is_a_subsolution() {
        let dp = laplace_dp(2, 0.0);
        let u = GridField::unit_ball(2, 1.0 / 16.0).unwrap();
        let rep = verify_subsolution(&u, &dp, 0.0);
        assert_eq!(rep.fb_nodes, 0);
        assert!(rep.passes(0.0));
    }

    #[test]
    fn lipschitz_of_half_plane() {
        let mut u = GridField::unit_ball(2, 1.0 / 32.0).unwrap();
        u.fill(|x| x[1].max(0.0));
        assert!((lipschitz_norm(&u, 0.9) - 1.0).abs() < 1e-12);
        u.fill(|_| 3.0);
        assert_eq!(lipschitz_norm(&u, 0.9), 0.0);
    }

    #[test]
    fn harnack_of_constant() {
        let mut u = GridField::unit_ball(2, 1.0 / 32.0).unwrap();
        u.fill(|_| 1.0);
        assert!((harnack_ratio(&u, &[0.0, 0.0], 0.25, 0.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn one_dimensional_perron() {
        let dp = laplace_dp(1, 0.0);
        let h = 1.0 / 100.0;
        let out = perron_solve(&dp, h, |x| if x[0] > 0.0 { 0.5 } else { 0.0 }, None, &PerronParams::default()).unwrap();
        assert_eq!(out.fb.len(), 1);
        assert!((out.fb[0].point[0] - 0.5).abs() <= 2.0 * h, "{:?}", out.fb[0]);
        assert!(out.report.monotone);
    }
}
