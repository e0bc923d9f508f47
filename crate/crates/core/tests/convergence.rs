//! Asymptotic convergence orders on fine macro-step ladders.

use nalgebra::DVector;

use mrgark::integrate::{convergence_study, fitted_order, PartitionedOde, State};
use mrgark::problems::{CoupledPair, LinearTwoRate};
use mrgark::tableaux::{method_names, registry_lookup, ButcherTableau, MrGarkMethod};

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// `bᵀA^p 1 = 1/(p+1)!`: the base method is one order higher on linear problems.
fn linear_order_bonus(t: &ButcherTableau, p: usize) -> bool {
    let mut v = DVector::from_element(t.stages(), 1.0);
    for _ in 0..p {
        v = &t.a * v;
    }
    (t.b.dot(&v) - 1.0 / factorial(p + 1)).abs() < 1e-14
}

fn expected_linear_order(m: &MrGarkMethod) -> f64 {
    let p = m.order_p;
    if linear_order_bonus(&m.fast, p) && linear_order_bonus(&m.slow, p) {
        (p + 1) as f64
    } else {
        p as f64
    }
}

#[test]
fn linear_problem_reaches_expected_order() {
    let ode = LinearTwoRate::default();
    let y0 = State::from_element(1, 1.0);
    let ladder: Vec<usize> = (8..=10).map(|k| 1 << k).collect();
    for name in method_names() {
        let meth = registry_lookup(name).unwrap();
        let want = expected_linear_order(&meth);
        for m in [2, 4] {
            let rows = convergence_study(&meth, &ode, &y0, 1.0, &ladder, &[m], 1);
            let p = fitted_order(&rows).unwrap();
            assert!((p - want).abs() <= 0.4, "{name} M={m}: {p:.3} vs {want}");
        }
    }
}

#[test]
fn only_one_method_gains_a_linear_order() {
    let gaining: Vec<&str> = method_names()
        .into_iter()
        .filter(|n| {
            let m = registry_lookup(n).unwrap();
            expected_linear_order(&m) > m.order_p as f64
        })
        .collect();
    assert_eq!(gaining, vec!["EX-EX 3(2)4s-A"]);
}

/// `y' = y²/2 + y²/2`, `y(0) = 1`, exact solution `1/(1 − t)`.
struct Riccati;

impl PartitionedOde for Riccati {
    fn dim(&self) -> usize {
        1
    }
    fn f_slow(&self, _t: f64, y: &State) -> State {
        y.map(|v| 0.5 * v * v)
    }
    fn f_fast(&self, _t: f64, y: &State) -> State {
        y.map(|v| 0.5 * v * v)
    }
    fn exact_solution(&self, t: f64) -> Option<State> {
        Some(State::from_element(1, 1.0 / (1.0 - t)))
    }
}

#[test]
fn nonlinear_problem_shows_declared_order() {
    let y0 = State::from_element(1, 1.0);
    for name in method_names() {
        let meth = registry_lookup(name).unwrap();
        for m in [1, 2] {
            // coarse enough to stay above the Newton tolerance floor of the implicit schemes
            let rows = convergence_study(&meth, &Riccati, &y0, 0.5, &[32, 64, 128, 256], &[m], 1);
            let p = fitted_order(&rows).unwrap();
            assert!((p - meth.order_p as f64).abs() <= 0.4, "{name} M={m}: {p:.3}");
        }
    }
}

#[test]
fn coupled_pair_errors_shrink_with_step() {
    let ode = CoupledPair::default();
    let y0 = State::from_vec(vec![1.0, 0.5]);
    for name in method_names() {
        let meth = registry_lookup(name).unwrap();
        let rows = convergence_study(&meth, &ode, &y0, 1.0, &[32, 64, 128], &[3], 16);
        let errs: Vec<f64> = rows.iter().map(|r| r.error.unwrap()).collect();
        assert!(errs.windows(2).all(|w| w[1] < w[0] / 3.0), "{name}: {errs:?}");
    }
}

#[test]
fn single_step_ladder_has_no_observed_order() {
    let meth = registry_lookup("EX-EX 2(1)A").unwrap();
    let rows = convergence_study(
        &meth,
        &LinearTwoRate::default(),
        &State::from_element(1, 1.0),
        1.0,
        &[16],
        &[2],
        1,
    );
    assert_eq!(rows.len(), 1);
    assert!(rows[0].error.is_some() && rows[0].observed_order.is_none());
}
