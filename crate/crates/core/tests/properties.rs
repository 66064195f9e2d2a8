use fbxlab::cli::Config;
use fbxlab::flatness::sigma_correct;
use fbxlab::hodograph::{check_complementing, psi1, psi2, ComplementingInput, Verdict};
use fbxlab::linalg::{dot, SymMatrix};
use fbxlab::operators::{compute_tau, pucci_minus, pucci_plus, BoundaryLaw, OperatorSpec};
use proptest::prelude::*;

const LAM: f64 = 0.5;
const BIG: f64 = 2.0;

fn sym(d: usize) -> impl Strategy<Value = SymMatrix> {
    prop::collection::vec(-3.0..3.0f64, d * (d + 1) / 2).prop_map(move |e| SymMatrix::from_upper(d, e).unwrap())
}

fn vector(d: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, d)
}

fn unit(d: usize) -> impl Strategy<Value = Vec<f64>> {
    vector(d, -1.0, 1.0)
        .prop_filter("nonzero", |v| dot(v, v) > 1e-2)
        .prop_map(|v| {
            let n = dot(&v, &v).sqrt();
            v.iter().map(|x| x / n).collect()
        })
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

/// Elliptic matrix with eigenvalues in roughly [0.4, 4].
fn elliptic(d: usize) -> impl Strategy<Value = SymMatrix> {
    sym(d).prop_map(move |m| {
        let e = m.eigenvalues();
        let (lo, hi) = (e[0], e[d - 1]);
        let span = (hi - lo).max(1e-9);
        let shifted = m.add(&SymMatrix::identity(d).scale(-lo));
        shifted.scale(3.6 / span).add(&SymMatrix::identity(d).scale(0.4))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pucci_ordering_and_duality(m in sym(3)) {
        let lo = pucci_minus(&m, LAM, BIG).unwrap();
        let hi = pucci_plus(&m, LAM, BIG).unwrap();
        prop_assert!(lo <= hi + 1e-12);
        prop_assert!(close(lo, -pucci_plus(&m.scale(-1.0), LAM, BIG).unwrap(), 1e-12));
    }

    #[test]
    fn pucci_homogeneous_and_subadditive(a in sym(3), b in sym(3), t in 0.0..10.0f64) {
        let pa = pucci_plus(&a, LAM, BIG).unwrap();
        prop_assert!(close(pucci_plus(&a.scale(t), LAM, BIG).unwrap(), t * pa, 1e-12));
        let pb = pucci_plus(&b, LAM, BIG).unwrap();
        prop_assert!(pucci_plus(&a.add(&b), LAM, BIG).unwrap() <= pa + pb + 1e-10);
        let ma = pucci_minus(&a, LAM, BIG).unwrap();
        let mb = pucci_minus(&b, LAM, BIG).unwrap();
        prop_assert!(pucci_minus(&a.add(&b), LAM, BIG).unwrap() >= ma + mb - 1e-10);
    }

    #[test]
    fn builtin_operators_sandwiched(m in sym(2), n in sym(2), xi in vector(2, -2.0, 2.0), name in prop::sample::select(vec!["laplace", "pucci_minus", "pucci_plus", "bellman"])) {
        let op = OperatorSpec::from_name(name, 2, LAM, BIG).unwrap();
        let x = [0.1, -0.2];
        let diff = op.eval(&m.add(&n), &xi, &x) - op.eval(&m, &xi, &x);
        let lo = pucci_minus(&n, op.lambda, op.big_lambda).unwrap();
        let hi = pucci_plus(&n, op.lambda, op.big_lambda).unwrap();
        prop_assert!(lo - 1e-10 <= diff && diff <= hi + 1e-10, "{lo} {diff} {hi}");
    }

    #[test]
    fn tau_has_unit_normal_component(nu in unit(3), x in vector(3, -0.5, 0.5), eps in 0.0..0.4f64, k in 0usize..3) {
        let law = BoundaryLaw::angular(3, 1.0, eps, k).unwrap();
        let tau = compute_tau(&law, &nu, &x).unwrap();
        prop_assert!((dot(&tau, &nu) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sigma_correct_meets_tangential_constraint(s0 in sym(3), tau in vector(3, -1.0, 1.0), xi in vector(3, -2.0, 2.0)) {
        prop_assume!(tau[..2].iter().any(|t| t.abs() > 0.2));
        let s = sigma_correct(&s0, &tau, &xi).unwrap();
        let st = s.mul_vec(&tau);
        for j in 0..2 {
            prop_assert!(close(st[j], xi[j], 1e-10), "{j}: {} vs {}", st[j], xi[j]);
        }
    }

    #[test]
    fn psi2_is_an_involution(xi in vector(3, -2.0, 2.0), xd in 0.2..3.0f64) {
        let mut v = xi.clone();
        v[2] = xd;
        let back = psi2(&psi2(&v).unwrap()).unwrap();
        for k in 0..3 {
            prop_assert!(close(back[k], v[k], 1e-12));
        }
    }

    #[test]
    fn psi1_inverts_and_reverses_order(m in sym(3), v in vector(3, -1.0, 1.0), xi in vector(3, -2.0, 2.0), xd in 0.2..3.0f64) {
        let mut x = xi.clone();
        x[2] = xd;
        let t = psi1(&m, &x).unwrap();
        let back = psi1(&t, &psi2(&x).unwrap()).unwrap();
        prop_assert!(back.sub(&m).norm_inf() <= 1e-8 * (1.0 + m.norm_inf()));
        // adding a nonnegative matrix can only decrease the image
        let bumped = psi1(&m.add(&SymMatrix::outer(&v)), &x).unwrap();
        let top = bumped.sub(&t).eigenvalues()[2];
        prop_assert!(top <= 1e-9 * (1.0 + t.norm_inf()), "{top}");
    }

    #[test]
    fn complementing_verdict_is_scale_invariant(a in elliptic(3), b in vector(3, -1.0, 1.0), xi in vector(2, -1.0, 1.0), s in 0.1..10.0f64, t in 0.1..10.0f64) {
        prop_assume!(dot(&xi, &xi) > 1e-2 && b[2].abs() > 0.05);
        let base = check_complementing(&ComplementingInput { a: a.clone(), b: b.clone(), xi_prime: xi.clone() }).unwrap();
        let scaled = check_complementing(&ComplementingInput {
            a: a.scale(s),
            b: b.iter().map(|v| v * t).collect(),
            xi_prime: xi.iter().map(|v| v * s).collect(),
        }).unwrap();
        prop_assert_eq!(matches!(base.verdict, Verdict::Satisfied), matches!(scaled.verdict, Verdict::Satisfied));
    }

    #[test]
    fn conormal_condition_is_complementing(a in elliptic(3), xi in vector(2, -1.0, 1.0)) {
        prop_assume!(dot(&xi, &xi) > 1e-2);
        let b: Vec<f64> = (0..3).map(|j| a.get(2, j)).collect();
        let rec = check_complementing(&ComplementingInput { a, b, xi_prime: xi }).unwrap();
        prop_assert_eq!(rec.verdict, Verdict::Satisfied);
    }

    #[test]
    fn tangential_condition_is_degenerate(a in elliptic(3), b in vector(2, -1.0, 1.0), xi in vector(2, -1.0, 1.0)) {
        prop_assume!(dot(&xi, &xi) > 1e-2);
        let rec = check_complementing(&ComplementingInput { a, b: vec![b[0], b[1], 0.0], xi_prime: xi }).unwrap();
        prop_assert_eq!(rec.verdict, Verdict::Degenerate);
    }

    #[test]
    fn config_survives_ini_round_trip(h in 0.001..0.2f64, seed in any::<u32>(), name in prop::sample::select(vec!["laplace", "pucci_minus", "bellman"])) {
        let mut cfg = Config::parse("").unwrap();
        cfg.set("run.h", &h.to_string()).unwrap();
        cfg.set("run.seed", &seed.to_string()).unwrap();
        cfg.set("operator.name", name).unwrap();
        let again = Config::parse(&cfg.to_ini()).unwrap();
        prop_assert_eq!(again.to_ini(), cfg.to_ini());
        prop_assert_eq!(again.f64("run.h").unwrap(), h);
        prop_assert_eq!(again.u64("run.seed").unwrap(), seed as u64);
    }
}
