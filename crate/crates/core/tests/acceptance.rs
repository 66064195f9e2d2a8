//! End-to-end acceptance checks. Each test prints one line of the form
//! `criterion N [PASS|FAIL] name: details` and then asserts it.

#![allow(clippy::type_complexity)]

use std::time::{Duration, Instant};

use fbxlab::barriers::{certify, power_barrier, power_threshold, radial_barrier, radial_gamma, BarrierKind};
use fbxlab::flatness::{
    adjust_polynomial, improve_flatness, oblique_defect, sigma_correct, taylor_expand_at_fb, FlatnessParams,
    FlatnessTrace, Formula, QuadPoly,
};
use fbxlab::grid::{ball_mask, Grid, GridField, NodeKind};
use fbxlab::hodograph::{
    check_complementing, hodograph_forward, legendre_derivative_check, transform_operator, ChartParams,
    ComplementingInput, Verdict,
};
use fbxlab::linalg::{axpy, fit_loglog, norm, normalized, SymMatrix};
use fbxlab::oblique::{pointwise_expansion, solve_oblique, ObliqueProblem};
use fbxlab::operators::{pucci_suite, BoundaryLaw, OperatorSpec, Problem, Rhs};
use fbxlab::perron::{
    free_boundary_nodes, lipschitz_norm, nondegeneracy_constant, perron_solve, verify_subsolution,
    verify_supersolution, PerronParams,
};
use fbxlab::sampling::{random_unit, rng};
use fbxlab::scheme::{DiscreteProblem, Scheme};

fn report(n: usize, name: &str, pass: bool, elapsed: Duration, limit: Duration, detail: String) {
    let pass = pass && elapsed < limit;
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("criterion {n} [{tag}] {name}: {detail} ({:.2?} of {:.0?})", elapsed, limit);
    assert!(pass, "criterion {n} failed: {detail}");
}

fn problem(op: OperatorSpec, f: f64, g: f64) -> Problem {
    let d = op.dim;
    Problem::unit_ball(op, Rhs::constant(f), BoundaryLaw::constant(d, g).unwrap()).unwrap()
}

fn sampled(d: usize, h: f64, f: impl Fn(&[f64]) -> f64) -> GridField {
    let grid = Grid::centered_cube(d, 1.0, h).unwrap();
    let mask = ball_mask(&grid, &vec![0.0; d], 1.0);
    GridField::from_fn(grid, mask, f).unwrap()
}

fn quad_solution(x: &[f64]) -> f64 {
    let t = x[x.len() - 1];
    if t > 0.0 {
        t + 0.5 * t * t
    } else {
        0.0
    }
}

#[test]
fn criterion_01_pucci_suite() {
    let t = Instant::now();
    let rep = pucci_suite(&[2, 3], 1.0, 2.0, 1000, 0x5EED, 1e-10).unwrap();
    report(
        1,
        "Pucci suite",
        rep.passed,
        t.elapsed(),
        Duration::from_secs(1),
        format!(
            "{} samples, sandwich {:.1e} homogeneity {:.1e} additivity {:.1e} sign {:.1e}",
            rep.samples, rep.sandwich, rep.homogeneity, rep.additivity, rep.sign_symmetry
        ),
    );
}

#[test]
fn criterion_02_barrier_certification() {
    let t = Instant::now();
    let mut worst = f64::INFINITY;
    let mut all = true;
    for (lambda, big) in [(1.0, 1.0), (1.0, 2.0)] {
        for d in [2, 3] {
            let center = vec![0.0; d];
            let minus = OperatorSpec::pucci_minus(d, lambda, big).unwrap();
            let plus = OperatorSpec::pucci_plus(d, lambda, big).unwrap();
            let gamma = radial_gamma(&minus, 1.0);
            let sub = radial_barrier(BarrierKind::RadialSub, &center, 1.0, 1.0, gamma, &minus, 10_000, 11);
            let sup = radial_barrier(BarrierKind::RadialSuper, &center, 1.0, 1.0, gamma, &plus, 10_000, 12);
            let pow = power_barrier(&center, 0.5, power_threshold(d, lambda, big) + 1.0, lambda, big)
                .and_then(|spec| certify(&spec, &minus, 10_000, 13));
            for r in [sub.map(|(_, s)| s), sup.map(|(_, s)| s), pow] {
                match r {
                    Ok(s) => worst = worst.min(s),
                    Err(_) => all = false,
                }
            }
        }
    }
    report(
        2,
        "barrier certification",
        all && worst > 0.0,
        t.elapsed(),
        Duration::from_secs(1),
        format!("12 barriers, smallest margin {worst:.3e}"),
    );
}

#[test]
fn criterion_03_perron_1d() {
    let h = 1.0 / 200.0;
    let dp = DiscreteProblem::new(problem(OperatorSpec::laplace(1), 0.0, 1.0), Scheme::CentralHessian);
    for b in [0.3, 0.5, 1.0] {
        let t = Instant::now();
        let out = perron_solve(&dp, h, |x| if x[0] > 0.0 { b } else { 0.0 }, None, &PerronParams::default()).unwrap();
        let fb = &out.fb;
        let ok = fb.len() == 1 && (fb[0].point[0] - (1.0 - b)).abs() <= 2.0 * h && (fb[0].slope - 1.0).abs() <= 0.05;
        let detail = match fb.first() {
            Some(n) => format!("b = {b}: fb at {:.5} (target {:.5}), slope {:.4}", n.point[0], 1.0 - b, n.slope),
            None => format!("b = {b}: no free boundary found"),
        };
        report(3, "1D Perron exactness", ok, t.elapsed(), Duration::from_secs(10), detail);
    }
}

#[test]
fn criterion_04_half_plane() {
    let t = Instant::now();
    let h = 1.0 / 64.0;
    let dp = DiscreteProblem::new(problem(OperatorSpec::laplace(2), 0.0, 1.0), Scheme::CentralHessian);
    let out = perron_solve(&dp, h, |x| x[1].max(0.0), None, &PerronParams::default()).unwrap();
    let err = out.field.sup_error(|x| x[1].max(0.0));
    let sup = verify_supersolution(&out.field, &dp, 3.0 * h);
    let sub = verify_subsolution(&out.field, &dp, 3.0 * h);
    let ok = err <= 4.0 * h && sup.fb_violations.is_empty() && sub.fb_violations.is_empty();
    report(
        4,
        "2D half-plane",
        ok,
        t.elapsed(),
        Duration::from_secs(60),
        format!(
            "sup error {err:.3e} (<= {:.3e}), fb violations super {} sub {}",
            4.0 * h,
            sup.fb_violations.len(),
            sub.fb_violations.len()
        ),
    );
}

#[test]
fn criterion_05_quadratic_solution() {
    let t = Instant::now();
    let h = 1.0 / 64.0;
    let dp = DiscreteProblem::new(problem(OperatorSpec::laplace(2), 1.0, 1.0), Scheme::CentralHessian);
    let out = perron_solve(&dp, h, quad_solution, None, &PerronParams::default()).unwrap();
    let u = &out.field;
    let err = u.sup_error(quad_solution);
    let fb: Vec<usize> = free_boundary_nodes(u, h * h).into_iter().filter(|&i| norm(&u.coord(i)) <= 0.5).collect();
    let radii: Vec<f64> = (0..).map(|k| 8.0 * h * 2f64.powi(k)).take_while(|&r| r <= 0.25 + 1e-12).collect();
    let nd = nondegeneracy_constant(u, &fb, &radii);
    let lip = lipschitz_norm(u, 0.5);
    let ok = err <= 4.0 * h && nd.constant >= 0.5 && lip <= 1.6;
    report(
        5,
        "quadratic exact solution",
        ok,
        t.elapsed(),
        Duration::from_secs(60),
        format!("sup error {err:.3e}, nondegeneracy {:.3} over {} radii, lipschitz {lip:.4}", nd.constant, radii.len()),
    );
}

#[test]
fn criterion_06_flatness_fixed_point() {
    let t = Instant::now();
    let u = sampled(2, 1.0 / 256.0, quad_solution);
    let pb = problem(OperatorSpec::laplace(2), 1.0, 1.0);
    let mut tr = FlatnessTrace::start(&u, &[0.0, 0.0], &pb, &[0.0, 1.0], 0.5, FlatnessParams::default()).unwrap();
    for _ in 0..4 {
        tr = improve_flatness(&u, tr, &pb).unwrap();
    }
    let target = [0.0, 0.0, 1.0];
    let mut nu_dev: f64 = 0.0;
    let mut coef_dev: f64 = 0.0;
    let mut monotone = true;
    for (k, r) in tr.records.iter().enumerate() {
        nu_dev = nu_dev.max(norm(&axpy(&r.nu, -1.0, &[0.0, 1.0])));
        if r.n > 0 {
            let m = r.p.m.scale(1.0 / r.rho_n);
            for (a, b) in m.upper().iter().zip(target) {
                coef_dev = coef_dev.max((a - b).abs());
            }
        }
        if k > 0 && !r.resolution_bound && !tr.records[k - 1].resolution_bound {
            monotone &= r.eps <= tr.records[k - 1].eps + 1e-9;
        }
    }
    let ok = tr.records.len() == 5 && nu_dev <= 1e-2 && coef_dev <= 0.1 && monotone;
    let eps: Vec<String> = tr.records.iter().map(|r| format!("{:.1e}", r.eps)).collect();
    report(
        6,
        "improvement-of-flatness fixed point",
        ok,
        t.elapsed(),
        Duration::from_secs(120),
        format!("|nu - e_d| {nu_dev:.1e}, coefficient deviation {coef_dev:.3}, eps [{}]", eps.join(", ")),
    );
}

#[test]
fn criterion_07_decay_exponent() {
    let t = Instant::now();
    let u = |x: &[f64]| (x[1] + 0.5 * x[1] * x[1] + 0.05 * norm(x).powf(2.5)).max(0.0);
    let grad = |x: &[f64]| -> Vec<f64> {
        let r = norm(x);
        (0..2).map(|i| 0.125 * r.sqrt() * x[i] + if i == 1 { 1.0 + x[1] } else { 0.0 }).collect()
    };
    let grad_x_g = move |x: &[f64]| -> Vec<f64> {
        let r = norm(x);
        let gu = grad(x);
        let gn = norm(&gu);
        let mut hess = SymMatrix::zeros(2);
        for i in 0..2 {
            for j in i..2 {
                let mut v = if i == j { 0.125 * r.sqrt() } else { 0.0 };
                if i == 1 && j == 1 {
                    v += 1.0;
                }
                if r > 0.0 {
                    v += 0.0625 * x[i] * x[j] / r.powf(1.5);
                }
                hess.set(i, j, v);
            }
        }
        hess.mul_vec(&gu).iter().map(|v| v / gn).collect()
    };
    let law =
        BoundaryLaw::custom("synthetic", 2, 0.5, move |x, _| norm(&grad(x)), move |x, _| grad_x_g(x), |_, _| vec![0.0; 2])
            .unwrap();
    let f = Rhs::custom("synthetic", 2.0, |x| 1.0 + 0.125 * 2.5 * norm(x).sqrt());
    let pb = Problem::unit_ball(OperatorSpec::laplace(2), f, law).unwrap();
    let datum = Formula(u);
    let mut tr = FlatnessTrace::start(&datum, &[0.0, 0.0], &pb, &[0.0, 1.0], 0.5, FlatnessParams::default()).unwrap();
    for _ in 0..6 {
        tr = improve_flatness(&datum, tr, &pb).unwrap();
    }
    let slope = tr.decay_exponent();
    let need = 1.0 + 0.25 - 0.1;
    report(
        7,
        "decay exponent fit",
        slope.is_some_and(|s| s >= need),
        t.elapsed(),
        Duration::from_secs(10),
        format!("slope {slope:?} over {} records (need >= {need})", tr.records.len()),
    );
}

#[test]
fn criterion_08_adjust_polynomial_scaling() {
    let t = Instant::now();
    let mut worst_exp = f64::INFINITY;
    let mut worst_defect: f64 = 0.0;
    for tau in [vec![0.0, 0.0, 1.0], vec![0.3, -0.2, 1.0]] {
        let xi = vec![0.1, -0.05, 0.0];
        let m0 = SymMatrix::from_upper(3, vec![0.4, 0.1, 0.0, -0.3, 0.0, 0.2]).unwrap();
        let p = QuadPoly::new(sigma_correct(&m0, &tau, &xi).unwrap());
        let (mut rs, mut devs) = (vec![], vec![]);
        for k in 3..=10 {
            let r = 0.5f64.powi(k);
            let s = r.powf(1.5);
            let tau2 = axpy(&tau, s, &[0.7, -0.4, 0.5]);
            let xi2 = axpy(&xi, s, &[-0.6, 0.9, 0.3]);
            let nu2 = normalized(&axpy(&[0.0, 0.0, 1.0], s, &[0.5, 0.8, 0.0])).unwrap();
            let q = adjust_polynomial(&p, &tau, &tau2, &xi, &xi2, &nu2).unwrap();
            worst_defect = worst_defect.max(oblique_defect(&q, &tau2, &xi2, &nu2));
            rs.push(r);
            devs.push(q.sub(&p).sup_on_ball(1.0));
        }
        worst_exp = worst_exp.min(fit_loglog(&rs, &devs));
    }
    report(
        8,
        "adjust_polynomial scaling",
        worst_exp >= 1.4 && worst_defect <= 1e-10,
        t.elapsed(),
        Duration::from_secs(1),
        format!("smallest exponent {worst_exp:.3}, constraint defect {worst_defect:.1e}"),
    );
}

#[test]
fn criterion_09_oblique_solver() {
    let t = Instant::now();
    let h = 1.0 / 64.0;
    let cases: [(&str, Vec<f64>, fn(&[f64]) -> f64); 3] = [
        ("neumann affine", vec![0.0, 1.0], |x| 1.0 + 0.5 * x[0]),
        ("neumann quadratic", vec![0.0, 1.0], |x| x[1] * x[1] - x[0] * x[0]),
        ("oblique affine", vec![1.0, 1.0], |x| x[0] - x[1]),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, tau, exact) in cases {
        let prob = ObliqueProblem::new(OperatorSpec::laplace(2), tau, h).unwrap();
        let (field, stats) = solve_oblique(&prob, exact).unwrap();
        let err = field.sup_error(exact);
        let bound = 4.0 * h * h + prob.tol * field.max_abs().max(1.0);
        ok &= err <= bound;
        parts.push(format!("{name} {err:.1e} ({} sweeps)", stats.sweeps));
    }
    let op = OperatorSpec::bellman_default(2, 1.0, 2.0).unwrap();
    let prob = ObliqueProblem::new(op, vec![0.3, 1.0], h).unwrap();
    let (field, _) = solve_oblique(&prob, |x| x[0] * x[1] + 0.5 * x[1] * x[1] + 0.2 * x[0].powi(3)).unwrap();
    let exp = pointwise_expansion(&field).unwrap().exponent;
    ok &= exp.is_some_and(|e| e >= 1.9);
    parts.push(format!("bellman expansion exponent {exp:?}"));
    report(9, "oblique solver", ok, t.elapsed(), Duration::from_secs(60), parts.join(", "));
}

#[test]
fn criterion_10_hodograph() {
    let t = Instant::now();
    let h = 1.0 / 128.0;
    type Case = (&'static str, usize, fn(&[f64]) -> f64, f64);
    let cases: [Case; 5] = [
        ("half-plane 1D", 1, |x| x[0].max(0.0), 0.0),
        ("half-plane 2D", 2, |x| x[1].max(0.0), 0.0),
        ("quadratic 1D", 1, quad_solution, 1.0),
        ("quadratic 2D", 2, quad_solution, 1.0),
        ("affine slope 2D", 2, |x| ((1.0 + 0.3 * x[0]) * x[1]).max(0.0), 0.0),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, d, f, rhs) in cases {
        let grid = Grid::centered_cube(d, 0.75, h).unwrap();
        let mask = vec![NodeKind::Interior; grid.len()];
        let u = GridField::from_fn(grid, mask, f).unwrap();
        let chart = hodograph_forward(&u, &vec![0.0; d], ChartParams::new(0.5, 0.5)).unwrap();
        let ids = legendre_derivative_check(&chart, &u).unwrap();
        let pb = problem(OperatorSpec::laplace(d), rhs, 1.0);
        let tr = transform_operator(&pb, &chart).unwrap().chart_residual(&chart).unwrap();
        ok &= chart.round_trip <= 5.0 * h && ids.max() <= 10.0 * h && tr.sup_residual <= 1e-3;
        parts.push(format!(
            "{name}: round trip {:.1e}, identities {:.1e}, transform {:.1e}",
            chart.round_trip,
            ids.max(),
            tr.sup_residual
        ));
    }
    report(10, "hodograph", ok, t.elapsed(), Duration::from_secs(30), parts.join("; "));
}

#[test]
fn criterion_11_complementing() {
    let t = Instant::now();
    let mut r = rng(11);
    let mut ok = true;
    for k in 0..100 {
        let d = 2 + k % 2;
        let xi = random_unit(&mut r, d - 1).iter().map(|v| v * (0.1 + 5.0 * (k as f64) / 100.0)).collect::<Vec<_>>();
        let input = ComplementingInput { a: SymMatrix::identity(d), b: fbxlab::linalg::unit(d, d - 1), xi_prime: xi };
        let base = check_complementing(&input).unwrap().verdict;
        ok &= base == Verdict::Satisfied;
        for s in [1e-3, 7.0, 1e4] {
            let scaled_xi = ComplementingInput { xi_prime: input.xi_prime.iter().map(|v| v * s).collect(), ..input.clone() };
            let scaled_ab =
                ComplementingInput { a: input.a.scale(s), b: input.b.iter().map(|v| v * s).collect(), ..input.clone() };
            ok &= check_complementing(&scaled_xi).unwrap().verdict == base;
            ok &= check_complementing(&scaled_ab).unwrap().verdict == base;
        }
        let degenerate = ComplementingInput { b: fbxlab::linalg::unit(d, 0), ..input };
        ok &= check_complementing(&degenerate).unwrap().verdict == Verdict::Degenerate;
    }
    report(
        11,
        "complementing checker",
        ok,
        t.elapsed(),
        Duration::from_secs(1),
        "100 frequencies satisfied, b_d = 0 degenerate, scaling invariant".into(),
    );
}

#[test]
fn criterion_12_degenerate_solution() {
    let t = Instant::now();
    let h = 1.0 / 128.0;
    let u = sampled(2, h, |x| 0.5 * x[1] * x[1]);
    let fb: Vec<usize> = free_boundary_nodes(&u, h * h).into_iter().filter(|&i| norm(&u.coord(i)) <= 0.5).collect();
    let radii: Vec<f64> = (0..).map(|k| 8.0 * h * 2f64.powi(k)).take_while(|&r| r <= 0.25 + 1e-12).collect();
    let nd = nondegeneracy_constant(&u, &fb, &radii);
    let pb = problem(OperatorSpec::laplace(2), 1.0, 1.0);
    let free = taylor_expand_at_fb(&u, &[0.0, 0.0], &pb, None, FlatnessParams::default());
    let given = taylor_expand_at_fb(&u, &[0.0, 0.0], &pb, Some(&[0.0, 1.0]), FlatnessParams::default());
    let rejected = |r: &fbxlab::Result<_>| matches!(r, Err(fbxlab::Error::Precondition(_)));
    let ok = !fb.is_empty() && nd.degenerate && rejected(&free) && rejected(&given);
    report(
        12,
        "degenerate solution discrimination",
        ok,
        t.elapsed(),
        Duration::from_secs(5),
        format!(
            "{} fb nodes, degenerate {} (sup u / r per radius {:?}), precondition errors {} / {}",
            fb.len(),
            nd.degenerate,
            nd.per_radius.iter().map(|(r, q)| format!("{r:.4}: {q:.4}")).collect::<Vec<_>>(),
            free.as_ref().err().map_or("none".into(), |e| e.to_string()),
            given.as_ref().err().map_or("none".into(), |e| e.to_string())
        ),
    );
}
