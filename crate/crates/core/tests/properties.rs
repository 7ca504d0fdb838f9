use proptest::prelude::*;
use xva_core::contracts::{closeout_theta, CollateralSpec, Contract, Defaulter, Payoff};
use xva_core::market::{deflator, AssetModel, DefaultModel, RateCurve, RatePair, RateSystem};
use xva_core::nonlinear::solve_bsde;
use xva_core::oracles::{bs_carry_discount, brute_force_bsde, OptionKind, TreeInput, TwoRateBSInput};
use xva_core::problem::{McConfig, PricingProblem};

const HORIZON: f64 = 10.0;

fn curve() -> impl Strategy<Value = RateCurve> {
    prop::collection::vec((0.01f64..2.0, -0.05f64..0.15), 1..6).prop_map(|steps| {
        let mut t = 0.0;
        let mut points = Vec::new();
        for (dt, v) in steps {
            points.push((t, v));
            t += dt;
        }
        RateCurve::new(&points, HORIZON).unwrap()
    })
}

fn party() -> impl Strategy<Value = Defaulter> {
    prop_oneof![Just(Defaulter::Trader), Just(Defaulter::Counterparty), Just(Defaulter::Joint)]
}

proptest! {
    #[test]
    fn deflators_multiply(eta in curve(), a in 0.0..HORIZON, b in 0.0..HORIZON, c in 0.0..HORIZON) {
        let mut x = [a, b, c];
        x.sort_by(f64::total_cmp);
        let [t, u, s] = x;
        let lhs = deflator(&eta, t, u).unwrap() * deflator(&eta, u, s).unwrap();
        prop_assert!((lhs - deflator(&eta, t, s).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn closeout_splits_into_loss_terms(
        q in -1e3f64..1e3, c in -1e3f64..1e3, who in party(), l_i in 0.0f64..=1.0, l_c in 0.0f64..=1.0,
    ) {
        let u = q - c;
        let trader = matches!(who, Defaulter::Trader | Defaulter::Joint);
        let counterparty = matches!(who, Defaulter::Counterparty | Defaulter::Joint);
        let expected = if trader { l_i * (-u).max(0.0) } else { 0.0 } - if counterparty { l_c * u.max(0.0) } else { 0.0 };
        let theta = closeout_theta(q, c, who, l_i, l_c);
        prop_assert!((theta - q - expected).abs() <= 1e-12 * (q.abs() + c.abs() + 1.0));
    }

    #[test]
    fn closeout_is_monotone_in_the_clean_value(
        q in -1e3f64..1e3, dq in 0.0f64..1e3, c in -1e3f64..1e3, who in party(), l_i in 0.0f64..=1.0, l_c in 0.0f64..=1.0,
    ) {
        prop_assert!(closeout_theta(q + dq, c, who, l_i, l_c) >= closeout_theta(q, c, who, l_i, l_c));
    }

    #[test]
    fn closeout_negates_with_the_parties(
        q in -1e3f64..1e3, c in -1e3f64..1e3, who in party(), l_i in 0.0f64..=1.0, l_c in 0.0f64..=1.0,
    ) {
        prop_assert_eq!(closeout_theta(-q, -c, who.other(), l_c, l_i), -closeout_theta(q, c, who, l_i, l_c));
    }

    #[test]
    fn full_collateral_neutralizes_closeout(q in -1e3f64..1e3, who in party(), l_i in 0.0f64..=1.0, l_c in 0.0f64..=1.0) {
        prop_assert_eq!(closeout_theta(q, q, who, l_i, l_c), q);
    }

    #[test]
    fn put_call_parity(
        s0 in 1.0f64..500.0, strike in 1.0f64..500.0, sigma in 0.01f64..1.0, maturity in 0.01f64..10.0,
        carry in -0.05f64..0.1, discount in -0.05f64..0.1,
    ) {
        let x = TwoRateBSInput { s0, strike, sigma, maturity, carry, discount };
        let parity = (-discount * maturity).exp() * (s0 * (carry * maturity).exp() - strike);
        let gap = bs_carry_discount(&x, OptionKind::Call) - bs_carry_discount(&x, OptionKind::Put) - parity;
        prop_assert!(gap.abs() < 1e-12 * (1.0 + s0.max(strike)), "{gap}");
    }

    #[test]
    fn tree_liability_price_falls_with_the_borrow_rate(f_l in 0.0f64..0.05, d1 in 0.0f64..0.05, d2 in 0.0f64..0.05) {
        let x = TreeInput {
            s0: 100.0, strike: 100.0, sigma: 0.2, maturity: 1.0, kind: OptionKind::Call, quantity: -1.0,
            r: 0.02, f_lend: f_l, f_borrow: f_l + d1, h_lend: 0.02, h_borrow: 0.02, c_lend: 0.02, c_borrow: 0.02,
            alpha: 0.0, lambda_i: 0.0, lambda_c: 0.0, loss_i: 0.0, loss_c: 0.0,
        };
        let low = brute_force_bsde(&x, 200);
        let high = brute_force_bsde(&TreeInput { f_borrow: f_l + d1 + d2, ..x }, 200);
        prop_assert!(high <= low + 1e-12, "{high} > {low}");
    }
}

#[test]
fn engine_liability_price_falls_with_the_borrow_rate() {
    let flat = |v| RateCurve::flat(v, 1.0).unwrap();
    let price = |f_b: f64| {
        let mut rs = RateSystem::single_rate(flat(0.02), 1);
        rs.funding = RatePair::new(flat(0.025), flat(f_b)).unwrap();
        let short = Contract::terminal(1.0, -1.0, Payoff::Call { asset: 0, strike: 100.0 }).unwrap();
        let p = PricingProblem::new(
            AssetModel::single(100.0, 0.2).unwrap(),
            rs,
            DefaultModel::none(1.0),
            short,
            CollateralSpec::none(),
        )
        .unwrap();
        solve_bsde(&p, &McConfig::default().with_paths(10_000).with_steps(16)).unwrap().report.price
    };
    let prices: Vec<f64> = [0.025, 0.045, 0.08].iter().map(|&f| price(f)).collect();
    assert!(prices.windows(2).all(|w| w[1] <= w[0]), "{prices:?}");
}
