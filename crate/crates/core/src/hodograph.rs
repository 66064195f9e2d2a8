//! Hodograph charts (partial Legendre transform in the last variable), the
//! derivative identities relating the two charts, the transformed operator
//! and the complementing condition for the linearized boundary problem.

use num_complex::Complex64;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Grid, GridField, NodeKind};
use crate::linalg::{fit_slope, least_squares, norm, SymMatrix};
use crate::operators::{BoundaryLaw, Problem};
use crate::sampling::{random_unit, rng};

/// Largest admissible angle (degrees) between the measured free boundary
/// normal and the last axis.
pub const MAX_TILT_DEG: f64 = 15.0;

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ChartParams {
    /// Patch radius.
    pub delta: f64,
    /// Nondegeneracy level; columns must rise with slope at least `gamma0 / 2`.
    pub gamma0: f64,
    pub fb_threshold: f64,
}

impl ChartParams {
    pub fn new(delta: f64, gamma0: f64) -> Self {
        ChartParams { delta, gamma0, fb_threshold: 1e-9 }
    }
}

/// One vertical line of source nodes above the free boundary.
#[derive(Clone, Debug)]
struct Column {
    /// Grid multi-index of the column without the last entry.
    tangential: Vec<usize>,
    /// Last-axis index of the last node at or below the threshold.
    j_fb: usize,
    xd: Vec<f64>,
    u: Vec<f64>,
}

fn lagrange(xs: &[f64], us: &[f64], t: f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..xs.len() {
        let mut l = 1.0;
        for j in 0..xs.len() {
            if i != j {
                l *= (t - xs[j]) / (xs[i] - xs[j]);
            }
        }
        acc += l * us[i];
    }
    acc
}

fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * (1.0 + mid.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}

impl Column {
    /// `x_d` with `u(x', x_d) = y` from the local cubic through four
    /// consecutive positive nodes. Below the first positive node the cubic is
    /// extrapolated down to the last zero node.
    fn invert(&self, y: f64, h: f64) -> Option<f64> {
        let m = self.u.len();
        if y > self.u[m - 1] {
            return None;
        }
        let (s, lo, hi) = if y < self.u[0] {
            (0, self.xd[0] - h, self.xd[0])
        } else {
            let k = self.u.partition_point(|&v| v <= y).clamp(1, m - 1) - 1;
            (k.saturating_sub(1).min(m - 4), self.xd[k], self.xd[k + 1])
        };
        let (xs, us) = (&self.xd[s..s + 4], &self.u[s..s + 4]);
        let p = |t: f64| lagrange(xs, us, t) - y;
        if p(lo) > 0.0 {
            return Some(lo);
        }
        if p(hi) < 0.0 {
            return Some(hi);
        }
        Some(bisect(p, lo, hi))
    }
}

/// Hodograph chart of a patch: `w(y', y_d)` solves `u(y', w) = y_d` on a grid
/// whose tangential nodes are the source columns.
#[derive(Clone, Debug)]
pub struct HodographChart {
    pub x0: Vec<f64>,
    pub params: ChartParams,
    pub h: f64,
    pub w: GridField,
    /// Smallest forward slope of `u` along the columns.
    pub gamma_min: f64,
    /// Largest central-difference gradient of `u` on the patch.
    pub lipschitz: f64,
    /// Gradient of the affine fit to `w(·, 0)`.
    pub fb_slope: Vec<f64>,
    pub tilt_deg: f64,
    /// Sup of `|w(y', u(x)) − x_d|` over positive patch nodes.
    pub round_trip: f64,
    /// Sup distance from `w(y', 0)` to the grid cell where `u` crosses the
    /// threshold.
    pub fb_residual: f64,
    columns: Vec<Column>,
}

impl HodographChart {
    pub fn dim(&self) -> usize {
        self.w.dim()
    }

    /// Cutoff for `∂_{y_d} w` below which the transform refuses to evaluate.
    pub fn wd_cutoff(&self) -> f64 {
        0.5 / self.lipschitz.max(f64::MIN_POSITIVE)
    }

    fn column_of(&self, target_node: usize) -> &Column {
        let m = self.w.grid.multi_index(target_node);
        let d = m.len();
        let mut id = 0;
        for k in 0..d - 1 {
            id = id * self.w.grid.n[k] + m[k];
        }
        &self.columns[id]
    }
}

fn index_range(lo: f64, h: f64, n: usize, a: f64, b: f64) -> Result<(usize, usize)> {
    let i0 = ((a - lo) / h - 1e-9).ceil();
    let i1 = ((b - lo) / h + 1e-9).floor();
    if i0 < 0.0 || i1 > (n - 1) as f64 || i0 > i1 {
        return Err(Error::Domain(format!("patch [{a}, {b}] leaves the grid")));
    }
    Ok((i0 as usize, i1 as usize))
}

/// Builds the chart on the cylinder `|x' − x₀'|_∞ ≤ δ/(2√(d−1))`,
/// `|x_d − x₀_d| ≤ δ√3/2`, which lies inside `B_δ(x₀)`.
pub fn hodograph_forward(u: &GridField, x0: &[f64], params: ChartParams) -> Result<HodographChart> {
    let d = u.dim();
    let g = &u.grid;
    let h = g.h;
    let ChartParams { delta, gamma0, fb_threshold: thr } = params;
    if x0.len() != d {
        return Err(Error::InvalidInput("base point has wrong dimension".into()));
    }
    if !(delta > 0.0 && gamma0 > 0.0) {
        return Err(Error::InvalidInput(format!("need delta > 0 and gamma0 > 0, got {delta}, {gamma0}")));
    }
    let a = if d > 1 { delta / (2.0 * ((d - 1) as f64).sqrt()) } else { 0.0 };
    let hv = delta * 3f64.sqrt() / 2.0;
    let mut ranges = Vec::with_capacity(d);
    for k in 0..d {
        let (lo, hi) = if k + 1 < d { (x0[k] - a, x0[k] + a) } else { (x0[k] - hv, x0[k] + hv) };
        ranges.push(index_range(g.lo[k], h, g.n[k], lo, hi)?);
    }
    let counts: Vec<usize> = ranges[..d - 1].iter().map(|(i0, i1)| i1 - i0 + 1).collect();
    let n_cols: usize = counts.iter().product();
    let (jlo, jhi) = ranges[d - 1];

    let mut columns = Vec::with_capacity(n_cols);
    let mut gamma_min = f64::INFINITY;
    for id in 0..n_cols {
        let mut tangential = vec![0; d - 1];
        let mut rest = id;
        for k in (0..d - 1).rev() {
            tangential[k] = ranges[k].0 + rest % counts[k];
            rest /= counts[k];
        }
        let mut m = tangential.clone();
        m.push(0);
        let mut vals = Vec::with_capacity(jhi - jlo + 1);
        for j in jlo..=jhi {
            m[d - 1] = j;
            let i = g.index(&m);
            if u.mask[i] == NodeKind::Exterior {
                return Err(Error::Domain(format!("patch meets exterior node {:?}", g.coord(i))));
            }
            vals.push(u.values[i]);
        }
        let xprime: Vec<f64> = (0..d - 1).map(|k| g.lo[k] + tangential[k] as f64 * h).collect();
        let Some(last_zero) = vals.iter().rposition(|&v| v <= thr) else {
            return Err(Error::Precondition(format!("column x' = {xprime:?} does not meet the free boundary")));
        };
        let first = last_zero + 1;
        if vals.len() - first < 4 {
            return Err(Error::Resolution(format!("column x' = {xprime:?} has fewer than 4 positive nodes")));
        }
        let xd: Vec<f64> = (first..vals.len()).map(|j| g.lo[d - 1] + (jlo + j) as f64 * h).collect();
        let uv = vals[first..].to_vec();
        for k in 0..uv.len() - 1 {
            let slope = (uv[k + 1] - uv[k]) / h;
            if slope < 0.5 * gamma0 {
                return Err(Error::Precondition(format!(
                    "patch too large: column x' = {xprime:?} has slope {slope:.3e} < gamma0/2 at x_d = {}",
                    xd[k]
                )));
            }
            gamma_min = gamma_min.min(slope);
        }
        columns.push(Column { tangential, j_fb: jlo + last_zero, xd, u: uv });
    }

    let ymax = columns.iter().map(|c| *c.u.last().unwrap()).fold(f64::INFINITY, f64::min);
    let nd = (ymax / h + 1e-9).floor() as usize;
    if nd < 4 {
        return Err(Error::Resolution(format!("hodograph range {ymax:.3e} spans fewer than 4 cells")));
    }
    let mut n = counts.clone();
    n.push(nd + 1);
    let mut lo: Vec<f64> = (0..d - 1).map(|k| g.lo[k] + ranges[k].0 as f64 * h).collect();
    lo.push(0.0);
    let tgrid = Grid::new(n, lo, h)?;
    let mask = vec![NodeKind::Interior; tgrid.len()];
    let mut w = GridField::new(tgrid, mask)?;
    for i in 0..w.len() {
        let m = w.grid.multi_index(i);
        let mut id = 0;
        for k in 0..d - 1 {
            id = id * counts[k] + m[k];
        }
        let yd = m[d - 1] as f64 * h;
        w.values[i] = columns[id]
            .invert(yd, h)
            .ok_or_else(|| Error::Domain(format!("value {yd} outside column range")))?;
    }

    let mut chart = HodographChart {
        x0: x0.to_vec(),
        params,
        h,
        w,
        gamma_min,
        lipschitz: patch_lipschitz(u, &columns, thr),
        fb_slope: vec![0.0; d - 1],
        tilt_deg: 0.0,
        round_trip: 0.0,
        fb_residual: 0.0,
        columns,
    };
    check_chart(&mut chart, x0)?;
    Ok(chart)
}

fn patch_lipschitz(u: &GridField, columns: &[Column], thr: f64) -> f64 {
    let g = &u.grid;
    let d = g.dim;
    let mut best: f64 = 0.0;
    for c in columns {
        let mut m = c.tangential.clone();
        m.push(0);
        for j in c.j_fb + 1..c.j_fb + 1 + c.u.len() {
            m[d - 1] = j;
            let i = g.index(&m);
            let mut grad = vec![0.0; d];
            let mut ok = true;
            for (k, gk) in grad.iter_mut().enumerate() {
                match (g.step(i, k, 1), g.step(i, k, -1)) {
                    (Some(p), Some(q)) if u.values[p] > thr && u.values[q] > thr => {
                        *gk = (u.values[p] - u.values[q]) / (2.0 * g.h)
                    }
                    _ => ok = false,
                }
            }
            if ok {
                best = best.max(norm(&grad));
            }
        }
    }
    best
}

fn check_chart(chart: &mut HodographChart, x0: &[f64]) -> Result<()> {
    let d = chart.dim();
    let h = chart.h;
    let nd = chart.w.grid.n[d - 1];
    let ytop = (nd - 1) as f64 * h;
    let mut round_trip: f64 = 0.0;
    let mut fb_residual: f64 = 0.0;
    let (mut rows, mut rhs) = (Vec::new(), Vec::new());
    let lo_d = chart.w.grid.lo.clone();
    for (id, c) in chart.columns.iter().enumerate() {
        let base = id * nd;
        let wcol = &chart.w.values[base..base + nd];
        for (xd, &y) in c.xd.iter().zip(&c.u) {
            if y > ytop {
                break;
            }
            let s = (y / h).floor().min((nd - 2) as f64);
            let t = y / h - s;
            let k = s as usize;
            let back = (1.0 - t) * wcol[k] + t * wcol[k + 1];
            round_trip = round_trip.max((back - xd).abs());
        }
        let cell_lo = c.xd[0] - h;
        let cell_hi = c.xd[0];
        let w0 = wcol[0];
        fb_residual = fb_residual.max((cell_lo - w0).max(w0 - cell_hi).max(0.0));
        let mut row = vec![1.0];
        for k in 0..d - 1 {
            row.push(lo_d[k] + (c.tangential[k] - chart.columns[0].tangential[k]) as f64 * h - x0[k]);
        }
        rows.push(row);
        rhs.push(w0);
    }
    chart.round_trip = round_trip;
    chart.fb_residual = fb_residual;
    if d > 1 {
        let coef = least_squares(&rows, &rhs)?;
        chart.fb_slope = coef[1..].to_vec();
        chart.tilt_deg = norm(&chart.fb_slope).atan().to_degrees();
        if chart.tilt_deg > MAX_TILT_DEG {
            return Err(Error::Precondition(format!(
                "free boundary normal is {:.1} degrees from the last axis; rotate the field first",
                chart.tilt_deg
            )));
        }
    }
    if round_trip > 5.0 * h {
        return Err(Error::Invariant(format!("chart round trip {round_trip:.3e} exceeds 5h")));
    }
    Ok(())
}

/// Central-difference gradient and Hessian at node `i`, provided every node
/// of the 3ᵈ stencil exists and passes `ok`.
fn jet(field: &GridField, i: usize, ok: impl Fn(usize) -> bool) -> Option<(Vec<f64>, SymMatrix)> {
    let g = &field.grid;
    let d = g.dim;
    let h = g.h;
    let v = |o: &[i64]| -> Option<f64> {
        let j = g.offset(i, o)?;
        ok(j).then(|| field.values[j])
    };
    let u0 = field.values[i];
    let mut grad = vec![0.0; d];
    let mut hess = SymMatrix::zeros(d);
    let mut o = vec![0i64; d];
    for k in 0..d {
        o[k] = 1;
        let up = v(&o)?;
        o[k] = -1;
        let dn = v(&o)?;
        o[k] = 0;
        grad[k] = (up - dn) / (2.0 * h);
        hess.set(k, k, (up - 2.0 * u0 + dn) / (h * h));
        for l in k + 1..d {
            let mut q = |a: i64, b: i64| {
                o[k] = a;
                o[l] = b;
                let r = v(&o);
                o[k] = 0;
                o[l] = 0;
                r
            };
            let mixed = (q(1, 1)? - q(1, -1)? - q(-1, 1)? + q(-1, -1)?) / (4.0 * h * h);
            hess.set(k, l, mixed);
        }
    }
    Some((grad, hess))
}

/// `Ψ₂(ξ) = (−ξ'/ξ_d, 1/ξ_d)`: the gradient of `u` in terms of `∇w`.
pub fn psi2(xi: &[f64]) -> Result<Vec<f64>> {
    let d = xi.len();
    let xd = xi[d - 1];
    if xd == 0.0 || !xd.is_finite() {
        return Err(Error::SingularTransform(format!("xi_d = {xd}")));
    }
    let mut out: Vec<f64> = xi[..d - 1].iter().map(|x| -x / xd).collect();
    out.push(1.0 / xd);
    Ok(out)
}

/// `Ψ₁(M, ξ)`: the Hessian of `u` in terms of `D²w` and `∇w`, assembled from
/// the second-order identities (normal-normal, then mixed, then tangential).
/// Equivalently `−ξ_d⁻¹ Jᵀ M J` with `J e_i = e_i − (ξ_i/ξ_d) e_d` for
/// `i < d` and `J e_d = e_d/ξ_d`.
pub fn psi1(m: &SymMatrix, xi: &[f64]) -> Result<SymMatrix> {
    let d = xi.len();
    let n = d - 1;
    let xd = xi[n];
    if xd == 0.0 || !xd.is_finite() {
        return Err(Error::SingularTransform(format!("xi_d = {xd}")));
    }
    let (x2, x3) = (xd * xd, xd * xd * xd);
    let mdd = m.get(n, n);
    let mut out = SymMatrix::zeros(d);
    out.set(n, n, -mdd / x3);
    for i in 0..n {
        out.set(n, i, -m.get(n, i) / x2 + xi[i] * mdd / x3);
        for j in i..n {
            let v = -m.get(i, j) / xd + (xi[i] * m.get(n, j) + xi[j] * m.get(n, i)) / x2 - xi[i] * xi[j] * mdd / x3;
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// Sup residuals of the five identities between the jets of `u` and `w`.
#[derive(Clone, Debug, Default, Serialize)]
pub struct DerivativeReport {
    pub points: usize,
    /// `∂_{x_i}u = −∂_{y_i}w / ∂_{y_d}w`, `i < d`.
    pub tangential_gradient: f64,
    /// `∂_{x_d}u = 1 / ∂_{y_d}w`.
    pub normal_gradient: f64,
    pub normal_normal: f64,
    pub mixed: f64,
    pub tangential_hessian: f64,
}

impl DerivativeReport {
    pub fn max(&self) -> f64 {
        [self.tangential_gradient, self.normal_gradient, self.normal_normal, self.mixed, self.tangential_hessian]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

/// Compares central-difference jets of `u` (interpolated linearly along the
/// column to `x = (y', w(y))`) with those predicted from the jets of `w`.
/// Only points where both stencils lie in the positive phase are used.
pub fn legendre_derivative_check(chart: &HodographChart, u: &GridField) -> Result<DerivativeReport> {
    let d = chart.dim();
    let n = d - 1;
    if u.dim() != d {
        return Err(Error::GridMismatch("field and chart dimensions differ".into()));
    }
    let g = &u.grid;
    let thr = chart.params.fb_threshold;
    let positive = |j: usize| u.mask[j] != NodeKind::Exterior && u.values[j] > thr;
    let mut rep = DerivativeReport::default();
    for i in 0..chart.w.len() {
        let Some((wg, wh)) = jet(&chart.w, i, |_| true) else { continue };
        let c = chart.column_of(i);
        let x = chart.w.values[i];
        let s = ((x - g.lo[n]) / g.h).floor();
        if s < 0.0 || s as usize + 1 >= g.n[n] {
            continue;
        }
        let t = (x - g.lo[n]) / g.h - s;
        let mut m = c.tangential.clone();
        m.push(s as usize);
        let below = jet(u, g.index(&m), positive);
        m[n] += 1;
        let above = jet(u, g.index(&m), positive);
        let (Some((g0, h0)), Some((g1, h1))) = (below, above) else { continue };
        let ug: Vec<f64> = g0.iter().zip(&g1).map(|(a, b)| (1.0 - t) * a + t * b).collect();
        let uh = h0.scale(1.0 - t).add(&h1.scale(t));
        let pg = psi2(&wg)?;
        let ph = psi1(&wh, &wg)?;
        rep.points += 1;
        rep.normal_gradient = rep.normal_gradient.max((ug[n] - pg[n]).abs());
        rep.normal_normal = rep.normal_normal.max((uh.get(n, n) - ph.get(n, n)).abs());
        for a in 0..n {
            rep.tangential_gradient = rep.tangential_gradient.max((ug[a] - pg[a]).abs());
            rep.mixed = rep.mixed.max((uh.get(n, a) - ph.get(n, a)).abs());
            for b in a..n {
                rep.tangential_hessian = rep.tangential_hessian.max((uh.get(a, b) - ph.get(a, b)).abs());
            }
        }
    }
    if rep.points == 0 {
        return Err(Error::Resolution("no chart point has complete stencils on both charts".into()));
    }
    Ok(rep)
}

/// `F̃(M, ξ, z, y) = F(Ψ₁(M,ξ), Ψ₂(ξ), (y', z)) − f(y', z)`.
#[derive(Clone, Debug)]
pub struct TransformedOperator {
    pub problem: Problem,
    pub wd_cutoff: f64,
}

pub fn transform_operator(problem: &Problem, chart: &HodographChart) -> Result<TransformedOperator> {
    if problem.dim() != chart.dim() {
        return Err(Error::InvalidInput("problem and chart dimensions differ".into()));
    }
    Ok(TransformedOperator { problem: problem.clone(), wd_cutoff: chart.wd_cutoff() })
}

#[derive(Clone, Debug, Serialize)]
pub struct TransformReport {
    pub points: usize,
    pub sup_residual: f64,
    pub min_wd: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EllipticityProbe {
    pub samples: usize,
    /// Largest increase of `F̃` along a positive semidefinite direction.
    /// `F̃` is nonincreasing in `M`, so ellipticity holds for `−F̃` when this
    /// is zero up to rounding.
    pub max_violation: f64,
}

impl TransformedOperator {
    pub fn eval(&self, m: &SymMatrix, xi: &[f64], z: f64, y_prime: &[f64]) -> Result<f64> {
        let d = xi.len();
        if xi[d - 1] < self.wd_cutoff {
            return Err(Error::SingularTransform(format!(
                "xi_d = {:.3e} below cutoff {:.3e}",
                xi[d - 1],
                self.wd_cutoff
            )));
        }
        let mut x = y_prime.to_vec();
        x.push(z);
        Ok(self.problem.op.eval(&psi1(m, xi)?, &psi2(xi)?, &x) - self.problem.f.eval(&x))
    }

    fn chart_jets(chart: &HodographChart) -> Vec<(usize, Vec<f64>, SymMatrix)> {
        (0..chart.w.len()).filter_map(|i| jet(&chart.w, i, |_| true).map(|(g, h)| (i, g, h))).collect()
    }

    fn y_prime(chart: &HodographChart, i: usize) -> Vec<f64> {
        let mut y = chart.w.coord(i);
        y.pop();
        y
    }

    /// Sup of `|F̃(D²w, ∇w, w, y)|` over chart nodes with a full stencil.
    pub fn chart_residual(&self, chart: &HodographChart) -> Result<TransformReport> {
        let mut rep = TransformReport { points: 0, sup_residual: 0.0, min_wd: f64::INFINITY };
        for (i, g, h) in Self::chart_jets(chart) {
            let r = self.eval(&h, &g, chart.w.values[i], &Self::y_prime(chart, i))?;
            rep.points += 1;
            rep.sup_residual = rep.sup_residual.max(r.abs());
            rep.min_wd = rep.min_wd.min(g[g.len() - 1]);
        }
        Ok(rep)
    }

    /// Perturbs chart jets by random rank-one positive directions `s vvᵀ` and
    /// records any increase of `F̃`.
    pub fn ellipticity_probe(&self, chart: &HodographChart, samples: usize, seed: u64) -> Result<EllipticityProbe> {
        let jets = Self::chart_jets(chart);
        if jets.is_empty() {
            return Err(Error::Resolution("chart has no interior jets".into()));
        }
        let mut r = rng(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let (i, g, h) = &jets[r.gen_range(0..jets.len())];
            let v = random_unit(&mut r, chart.dim());
            let s = r.gen_range(1e-3..1.0);
            let y = Self::y_prime(chart, *i);
            let z = chart.w.values[*i];
            let base = self.eval(h, g, z, &y)?;
            let moved = self.eval(&h.add_scaled(s, &SymMatrix::outer(&v)), g, z, &y)?;
            worst = worst.max(moved - base - 1e-12 * (1.0 + base.abs()));
        }
        Ok(EllipticityProbe { samples, max_violation: worst.max(0.0) })
    }
}

/// `G(x, ξ) = |ξ| − g(x, ξ/|ξ|)`.
pub fn bernoulli_residual(law: &BoundaryLaw, x: &[f64], xi: &[f64]) -> Result<f64> {
    let r = norm(xi);
    if r == 0.0 || !r.is_finite() {
        return Err(Error::InvalidInput("Bernoulli residual needs a nonzero gradient".into()));
    }
    let nu: Vec<f64> = xi.iter().map(|v| v / r).collect();
    Ok(r - law.g(x, &nu))
}

/// `G̃(y', z, ξ) = G((y', z), Ψ₂(ξ))`.
pub fn transformed_bernoulli(law: &BoundaryLaw, y_prime: &[f64], z: f64, xi: &[f64]) -> Result<f64> {
    let mut x = y_prime.to_vec();
    x.push(z);
    bernoulli_residual(law, &x, &psi2(xi)?)
}

#[derive(Clone, Debug)]
pub struct ComplementingInput {
    /// Second-order coefficients of the linearized operator.
    pub a: SymMatrix,
    /// Coefficients of the boundary operator.
    pub b: Vec<f64>,
    /// Tangential frequency, length `d − 1`.
    pub xi_prime: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Satisfied,
    /// A nontrivial decaying solution `(C₁, C₂)` of the boundary row.
    Violated { witness: [[f64; 2]; 2] },
    /// `b_d = 0`.
    Degenerate,
}

#[derive(Clone, Debug, Serialize)]
pub struct ComplementingRecord {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub xi_prime: Vec<f64>,
    /// Characteristic roots as `[re, im]`.
    pub roots: [[f64; 2]; 2],
    #[serde(flatten)]
    pub verdict: Verdict,
}

fn pair(z: Complex64) -> [f64; 2] {
    [z.re, z.im]
}

/// Decides whether only the trivial combination of decaying modes
/// `C₁e^{μ₁y_d} + C₂e^{μ₂y_d}` satisfies `b_d φ'(0) + i s φ(0) = 0`.
/// Modes with `Re μ = 0` do not decay.
fn verdict_from_roots(mu: [Complex64; 2], bd: f64, s: f64, scale: f64) -> Verdict {
    let decaying: Vec<usize> = (0..2).filter(|&k| mu[k].re < 0.0).collect();
    let row = |k: usize| mu[k] * bd + Complex64::new(0.0, s);
    let tol = 1e-12 * scale;
    match decaying.as_slice() {
        [] => Verdict::Satisfied,
        [k] => {
            if row(*k).norm() > tol {
                Verdict::Satisfied
            } else {
                let mut w = [[0.0; 2]; 2];
                w[*k] = [1.0, 0.0];
                Verdict::Violated { witness: w }
            }
        }
        _ => {
            let (r0, r1) = (row(0), row(1));
            let (c1, c2) = if r0.norm() <= tol && r1.norm() <= tol {
                (Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0))
            } else {
                (r1, -r0)
            };
            Verdict::Violated { witness: [pair(c1), pair(c2)] }
        }
    }
}

/// Complementing condition for `Σ a_jk ∂_jk v = 0` in `{y_d > 0}` with
/// `Σ b_j ∂_j v = 0` on `{y_d = 0}` at tangential frequency `ξ'`.
pub fn check_complementing(input: &ComplementingInput) -> Result<ComplementingRecord> {
    let d = input.a.dim();
    let n = d - 1;
    if d < 2 || input.b.len() != d || input.xi_prime.len() != n {
        return Err(Error::InvalidInput("complementing check needs d >= 2 and matching lengths".into()));
    }
    if norm(&input.xi_prime) == 0.0 {
        return Err(Error::InvalidInput("tangential frequency must be nonzero".into()));
    }
    let eig = input.a.eigenvalues();
    if !(input.a.is_finite() && eig.iter().all(|&e| e > 0.0)) {
        return Err(Error::Precondition(format!("coefficient matrix is not elliptic: eigenvalues {eig:?}")));
    }
    let xi = &input.xi_prime;
    let qa = input.a.get(n, n);
    let qb: f64 = (0..n).map(|j| 2.0 * input.a.get(j, n) * xi[j]).sum();
    let qc: f64 = -(0..n).flat_map(|j| (0..n).map(move |k| (j, k))).map(|(j, k)| input.a.get(j, k) * xi[j] * xi[k]).sum::<f64>();
    let disc = Complex64::new(-qb * qb - 4.0 * qa * qc, 0.0).sqrt();
    let ib = Complex64::new(0.0, -qb);
    let mu = [(ib + disc) / (2.0 * qa), (ib - disc) / (2.0 * qa)];
    let bmax = input.b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let bd = input.b[n];
    let verdict = if bd.abs() <= 1e-12 * bmax {
        Verdict::Degenerate
    } else {
        let s: f64 = (0..n).map(|j| input.b[j] * xi[j]).sum();
        let scale = bmax * (mu[0].norm().max(mu[1].norm()) + norm(xi));
        verdict_from_roots(mu, bd, s, scale)
    };
    Ok(ComplementingRecord {
        a: input.a.to_dense(),
        b: input.b.clone(),
        xi_prime: xi.clone(),
        roots: [pair(mu[0]), pair(mu[1])],
        verdict,
    })
}

/// Central-difference `∂_{ξ_d} G` at `(x, ξ)` with step `step`.
pub fn bernoulli_normal_derivative(law: &BoundaryLaw, x: &[f64], xi: &[f64], step: f64) -> Result<f64> {
    let d = xi.len();
    let mut p = xi.to_vec();
    let mut q = xi.to_vec();
    p[d - 1] += step;
    q[d - 1] -= step;
    Ok((bernoulli_residual(law, x, &p)? - bernoulli_residual(law, x, &q)?) / (2.0 * step))
}

/// Fitted slope of the chart's free boundary graph against the tangential
/// coordinate, for `d = 2`.
pub fn fb_graph_slope(chart: &HodographChart) -> Option<f64> {
    if chart.dim() != 2 {
        return None;
    }
    let nd = chart.w.grid.n[1];
    let ys: Vec<f64> = (0..chart.w.grid.n[0]).map(|k| chart.w.grid.lo[0] + k as f64 * chart.h).collect();
    let ws: Vec<f64> = (0..ys.len()).map(|k| chart.w.values[k * nd]).collect();
    Some(fit_slope(&ys, &ws))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{OperatorSpec, Rhs};

    fn patch(d: usize, h: f64, f: impl Fn(&[f64]) -> f64) -> GridField {
        let g = Grid::centered_cube(d, 0.75, h).unwrap();
        let mask = vec![NodeKind::Interior; g.len()];
        GridField::from_fn(g, mask, f).unwrap()
    }

    fn quad(x: &[f64]) -> f64 {
        let t = x[x.len() - 1];
        if t > 0.0 { t + 0.5 * t * t } else { 0.0 }
    }

    #[test]
    fn half_plane_chart_is_identity() {
        for d in [1, 2] {
            let u = patch(d, 1.0 / 32.0, |x| x[d - 1].max(0.0));
            let c = hodograph_forward(&u, &vec![0.0; d], ChartParams::new(0.5, 1.0)).unwrap();
            assert!(c.w.sup_error(|y| y[d - 1]) < 1e-12);
            let rep = legendre_derivative_check(&c, &u).unwrap();
            assert!(rep.max() < 1e-10, "{rep:?}");
        }
    }

    #[test]
    fn quadratic_chart_matches_root() {
        let h = 1.0 / 64.0;
        let u = patch(2, h, quad);
        let c = hodograph_forward(&u, &[0.0, 0.0], ChartParams::new(0.5, 1.0)).unwrap();
        let err = c.w.sup_error(|y| -1.0 + (1.0 + 2.0 * y[1]).sqrt());
        assert!(err < 1e-6, "{err}");
        assert!(c.round_trip <= 5.0 * h);
        let rep = legendre_derivative_check(&c, &u).unwrap();
        assert!(rep.normal_normal < 1e-2, "{rep:?}");
    }

    #[test]
    fn tilted_half_plane_slope() {
        let th = 0.1f64;
        let u = patch(2, 1.0 / 64.0, |x| (x[0] * th.sin() + x[1] * th.cos()).max(0.0));
        let c = hodograph_forward(&u, &[0.0, 0.0], ChartParams::new(0.5, 0.5)).unwrap();
        let s = fb_graph_slope(&c).unwrap();
        assert!((s + th.tan()).abs() < 1.0 / 64.0, "{s}");
        assert!(c.fb_residual == 0.0);
    }

    #[test]
    fn steep_boundary_rejected() {
        let u = patch(2, 1.0 / 32.0, |x| (x[0] + x[1]).max(0.0));
        assert!(matches!(hodograph_forward(&u, &[0.0, 0.0], ChartParams::new(0.5, 0.5)), Err(Error::Precondition(_))));
    }

    #[test]
    fn mixed_identity() {
        let (g0, a) = (1.0, 0.3);
        let u = patch(2, 1.0 / 64.0, |x| ((g0 + a * x[0]) * x[1]).max(0.0));
        let c = hodograph_forward(&u, &[0.0, 0.0], ChartParams::new(0.5, 1.0)).unwrap();
        assert!(c.w.sup_error(|y| y[1] / (g0 + a * y[0])) < 1e-9);
        let rep = legendre_derivative_check(&c, &u).unwrap();
        assert!(rep.mixed < 1.0 / 64.0, "{rep:?}");
    }

    #[test]
    fn psi1_inverts_closed_form() {
        // w = y_d / (1 + y_1) at y = (0.2, 0.3)
        let (y1, yd) = (0.2, 0.3);
        let s = 1.0 + y1;
        let xi = [-yd / (s * s), 1.0 / s];
        let m = SymMatrix::from_upper(2, vec![2.0 * yd / (s * s * s), -1.0 / (s * s), 0.0]).unwrap();
        let d = psi1(&m, &xi).unwrap();
        // u = (1 + x_1) x_d: u_11 = 0, u_1d = 1, u_dd = 0
        assert!(d.get(0, 0).abs() < 1e-12 && (d.get(0, 1) - 1.0).abs() < 1e-12 && d.get(1, 1).abs() < 1e-12);
        let g = psi2(&xi).unwrap();
        let x_d = yd / s;
        assert!((g[0] - x_d).abs() < 1e-12 && (g[1] - s).abs() < 1e-12);
    }

    #[test]
    fn transformed_trace_vanishes() {
        let u = patch(2, 1.0 / 32.0, |x| x[1].max(0.0));
        let c = hodograph_forward(&u, &[0.0, 0.0], ChartParams::new(0.5, 1.0)).unwrap();
        let law = BoundaryLaw::constant(2, 1.0).unwrap();
        let p = Problem::unit_ball(OperatorSpec::laplace(2), Rhs::constant(0.0), law).unwrap();
        let t = transform_operator(&p, &c).unwrap();
        assert!(t.chart_residual(&c).unwrap().sup_residual < 1e-10);
        assert!(t.ellipticity_probe(&c, 200, 3).unwrap().max_violation == 0.0);
        let bad = t.eval(&SymMatrix::zeros(2), &[0.0, 1e-3], 0.1, &[0.0]);
        assert!(matches!(bad, Err(Error::SingularTransform(_))));
    }

    #[test]
    fn bernoulli_examples() {
        let law = BoundaryLaw::constant(2, 1.0).unwrap();
        assert_eq!(bernoulli_residual(&law, &[0.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((bernoulli_residual(&law, &[0.0, 0.0], &[0.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(bernoulli_residual(&law, &[0.0, 0.0], &[0.0, 0.0]).is_err());
        let ang = BoundaryLaw::angular(2, 1.0, 0.2, 0).unwrap();
        let g0 = ang.g(&[0.0, 0.0], &[0.0, 1.0]);
        let dg = bernoulli_normal_derivative(&ang, &[0.0, 0.0], &[0.0, g0], 1e-5).unwrap();
        assert!((dg - 1.0).abs() < 1e-6, "{dg}");
        assert!(transformed_bernoulli(&law, &[0.0], 0.0, &[0.0, 1.0]).unwrap().abs() < 1e-15);
    }

    #[test]
    fn complementing_laplacian() {
        let input = ComplementingInput { a: SymMatrix::identity(2), b: vec![0.0, 1.0], xi_prime: vec![2.0] };
        let rec = check_complementing(&input).unwrap();
        assert_eq!(rec.verdict, Verdict::Satisfied);
        let mut r = rec.roots;
        r.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert!((r[0][0] + 2.0).abs() < 1e-12 && (r[1][0] - 2.0).abs() < 1e-12);
        let deg = ComplementingInput { b: vec![1.0, 0.0], ..input.clone() };
        assert_eq!(check_complementing(&deg).unwrap().verdict, Verdict::Degenerate);
        let bad = ComplementingInput { a: SymMatrix::diag(&[1.0, -1.0]), ..input };
        assert!(matches!(check_complementing(&bad), Err(Error::Precondition(_))));
    }

    #[test]
    fn double_root_is_satisfied() {
        let mu = Complex64::new(0.0, -0.7);
        assert_eq!(verdict_from_roots([mu, mu], 1.0, 0.4, 1.0), Verdict::Satisfied);
        let dec = Complex64::new(-1.0, 0.0);
        assert!(matches!(verdict_from_roots([dec, dec], 1.0, 0.0, 1.0), Verdict::Violated { .. }));
    }

    #[test]
    fn record_json_shape() {
        let input = ComplementingInput { a: SymMatrix::identity(2), b: vec![0.0, 1.0], xi_prime: vec![1.0] };
        let v = serde_json::to_value(check_complementing(&input).unwrap()).unwrap();
        assert_eq!(v["verdict"], "satisfied");
        assert_eq!(v["roots"].as_array().unwrap().len(), 2);
    }
}
