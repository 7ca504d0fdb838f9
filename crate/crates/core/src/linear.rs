//! Pricing when funding and repo rates have no lend/borrow spread: the
//! funding-measure representation, the risk-neutral representation with
//! adjusted cash flows, and the explicit linear BSDE solution.

use crate::error::{Result, XvaError};
use crate::market::{DeflatorChoice, RateCurve};
use crate::picard::{self, ExtraDriver, PicardOutcome};
use crate::problem::{McConfig, PricingProblem};
use crate::report::{decompose, Estimate, Metadata, ValuationReport};
use crate::simulation::{accumulate_legs, exposure, mean_se, Exposure, LegContext, PathEnsemble};

/// Analytic risk-free clean price `π^r_0(A)`.
pub fn clean_price(problem: &PricingProblem) -> f64 {
    problem.clean_model().value_ex(&problem.contract, 0.0, &problem.model.s0)
}

/// Risk-free clean values and collateral on every path and node.
pub fn clean_exposure(problem: &PricingProblem, ens: &PathEnsemble) -> Result<Exposure> {
    exposure(ens, &problem.contract, &problem.collateral, &problem.clean_model())
}

pub(crate) fn leg_context(problem: &PricingProblem) -> LegContext<'_> {
    LegContext {
        model: &problem.model,
        rates: &problem.rates,
        defaults: &problem.defaults,
        closeout: problem.closeout,
    }
}

fn require_linear_funding(problem: &PricingProblem) -> Result<()> {
    let r = &problem.rates;
    if !r.funding.is_degenerate() || !r.repo.iter().all(|p| p.is_degenerate()) {
        return Err(XvaError::Unsupported(
            "funding or repo lend/borrow spread present; use the nonlinear pricer".into(),
        ));
    }
    Ok(())
}

pub(crate) fn metadata(method: &str, ens: &PathEnsemble, problem: &PricingProblem) -> Metadata {
    Metadata {
        method: method.into(),
        preset: Some(ens.preset),
        paths: ens.n_paths,
        steps: ens.grid.steps(),
        seed: ens.seed,
        notional: problem.notional,
        notes: vec![],
    }
}

/// Price under the measure with discount `f` and repo drifts `h`, where
/// the funding account drops out. Collateral may carry a lend/borrow spread.
pub fn price_funding_measure(problem: &PricingProblem, cfg: &McConfig) -> Result<ValuationReport> {
    require_linear_funding(problem)?;
    let ens = problem.simulate(&DeflatorChoice::funding(&problem.rates, &problem.model), cfg)?;
    price_funding_measure_on(problem, &ens)
}

/// As [`price_funding_measure`] on a caller-supplied ensemble, which must
/// have been simulated under the funding preset.
pub fn price_funding_measure_on(problem: &PricingProblem, ens: &PathEnsemble) -> Result<ValuationReport> {
    require_linear_funding(problem)?;
    if ens.preset != crate::market::Preset::Funding {
        return Err(XvaError::validation("ensemble was not simulated under the funding preset"));
    }
    let exp = clean_exposure(problem, ens)?;
    let legs = accumulate_legs(ens, &exp, &leg_context(problem), None)?;
    let (price, adjustments) = decompose(&legs, &[])?;
    let mut metadata = metadata("funding_measure", ens, problem);
    metadata
        .notes
        .push("funding account absorbed by discounting at the treasury rate; FVA reported as zero".into());
    Ok(ValuationReport {
        price: price.mean,
        std_error: price.se,
        clean: clean_price(problem),
        adjustments,
        metadata,
        ..Default::default()
    })
}

/// Report from a converged iteration plus any extra pathwise legs.
pub(crate) fn picard_report(
    method: &str,
    problem: &PricingProblem,
    ens: &PathEnsemble,
    out: &PicardOutcome,
    extra: &[&[f64]],
) -> Result<ValuationReport> {
    let (price, adjustments) = decompose(&out.legs, extra)?;
    Ok(ValuationReport {
        price: price.mean,
        std_error: price.se,
        clean: clean_price(problem),
        adjustments,
        convergence: out.log.clone(),
        sign_mismatches: out.sign_mismatches,
        metadata: metadata(method, ens, problem),
        ..Default::default()
    })
}

/// Risk-neutral price with the funding and repo legs evaluated on the
/// funding accounts implied by the price and hedge paths.
pub fn price_risk_neutral(problem: &PricingProblem, cfg: &McConfig) -> Result<ValuationReport> {
    price_instrumental(problem, &DeflatorChoice::risk_free(&problem.rates, &problem.model), cfg)
}

/// Price under an arbitrary deflator choice.
pub fn price_instrumental(problem: &PricingProblem, choice: &DeflatorChoice, cfg: &McConfig) -> Result<ValuationReport> {
    require_linear_funding(problem)?;
    let ens = problem.simulate(choice, cfg)?;
    price_instrumental_on(problem, &ens, cfg)
}

pub fn price_instrumental_on(problem: &PricingProblem, ens: &PathEnsemble, cfg: &McConfig) -> Result<ValuationReport> {
    require_linear_funding(problem)?;
    let exp = clean_exposure(problem, ens)?;
    let ctx = leg_context(problem);
    let out = picard::run(ens, &exp, &ctx, &ExtraDriver::None, cfg.basis, &cfg.picard, problem.notional, None)?;
    picard_report("risk_neutral", problem, ens, &out, &[])
}

fn is_zero(c: &RateCurve) -> bool {
    c.points().iter().all(|&(_, v)| v == 0.0)
}

/// `Y_0 = E[−D_f(0,T) X + ∫ D_f (c̄ − f) C du]` under the funding preset, in
/// the sign of the replicating portfolio (the negative of the receive-`A`
/// price). Requires no defaults and a single payoff at maturity.
pub fn linear_bsde_explicit(problem: &PricingProblem, cfg: &McConfig) -> Result<Estimate> {
    require_linear_funding(problem)?;
    let d = &problem.defaults;
    if !is_zero(&d.lambda_i) || !is_zero(&d.lambda_c) {
        return Err(XvaError::validation("explicit linear solution requires zero default intensities"));
    }
    let dates = problem.contract.dates();
    if dates.len() > 1 || dates.first().is_some_and(|x| x.time != problem.contract.maturity) {
        return Err(XvaError::validation("explicit linear solution requires a single payoff at maturity"));
    }
    let ens = problem.simulate(&DeflatorChoice::funding(&problem.rates, &problem.model), cfg)?;
    let exp = clean_exposure(problem, &ens)?;
    let f = &problem.rates.funding.lend;
    let c = &problem.rates.collateral;
    let nodes = ens.grid.nodes();
    let n = ens.n_nodes();
    let w = |rate: &RateCurve| -> Vec<f64> {
        let spread = rate.sub(f);
        nodes.windows(2).map(|x| RateCurve::weighted_discount_integral(Some(&spread), f, x[0], x[1])).collect()
    };
    let (w_b, w_l) = (w(&c.borrow), w(&c.lend));
    let d_t = (-f.integral_to(problem.contract.maturity)).exp();
    let y: Vec<f64> = (0..ens.n_paths)
        .map(|p| {
            let mut acc = -d_t * exp.dividend[exp.at(p, n - 1)];
            for k in 0..n - 1 {
                let ck = exp.collateral[exp.at(p, k)];
                acc += ck * if ck >= 0.0 { w_b[k] } else { w_l[k] };
            }
            acc
        })
        .collect();
    let (mean, se) = mean_se(&y);
    Ok(Estimate { mean, se })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contracts::{CollateralSpec, Contract, Payoff};
    use crate::market::{AssetModel, DefaultModel, RatePair, RateSystem};

    fn flat(v: f64) -> RateCurve {
        RateCurve::flat(v, 1.0).unwrap()
    }

    fn rates(r: f64, f: f64, h: f64, c: f64) -> RateSystem {
        let mut rs = RateSystem::single_rate(flat(r), 1);
        rs.funding = RatePair::single(flat(f));
        rs.repo = vec![RatePair::single(flat(h))];
        rs.collateral = RatePair::single(flat(c));
        rs
    }

    fn problem(contract: Contract, collateral: CollateralSpec, rs: RateSystem, defaults: DefaultModel) -> PricingProblem {
        PricingProblem::new(AssetModel::single(100.0, 0.2).unwrap(), rs, defaults, contract, collateral).unwrap()
    }

    fn cfg() -> McConfig {
        McConfig::default().with_paths(4_000).with_steps(16)
    }

    #[test]
    fn zero_coupon_clean_price() {
        let zc = Contract::terminal(1.0, 1.0, Payoff::Fixed { amount: 1.0 }).unwrap();
        let p = problem(zc, CollateralSpec::none(), rates(0.02, 0.02, 0.02, 0.02), DefaultModel::none(1.0));
        assert!((clean_price(&p) - (-0.02f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn spread_pairs_are_rejected() {
        let mut rs = rates(0.02, 0.03, 0.025, 0.015);
        rs.funding = RatePair::new(flat(0.03), flat(0.05)).unwrap();
        let c = Contract::terminal(1.0, 1.0, Payoff::Call { asset: 0, strike: 100.0 }).unwrap();
        let p = problem(c, CollateralSpec::none(), rs, DefaultModel::none(1.0));
        assert!(matches!(price_funding_measure(&p, &cfg()), Err(XvaError::Unsupported(_))));
        assert!(price_risk_neutral(&p, &cfg()).is_err());
    }

    #[test]
    fn explicit_solution_constant_collateral() {
        // X = 0 and C ≡ c0: Y_0 = c0 (c − f)(1 − e^{−fT}) / f.
        let (f, c, c0) = (0.03, 0.015, 10.0);
        let p = problem(
            Contract::empty(1.0).unwrap(),
            CollateralSpec::constant(c0),
            rates(0.02, f, 0.025, c),
            DefaultModel::none(1.0),
        );
        let y = linear_bsde_explicit(&p, &cfg()).unwrap();
        let expected = c0 * (c - f) * (1.0 - (-f).exp()) / f;
        assert!((y.mean - expected).abs() < 1e-12, "{} vs {expected}", y.mean);
        assert!(y.se < 1e-12);
    }

    #[test]
    fn explicit_solution_forward_and_defaults() {
        let (f, h) = (0.03, 0.025);
        let fwd = Contract::terminal(1.0, 1.0, Payoff::Forward { asset: 0, strike: 95.0 }).unwrap();
        let p = problem(fwd, CollateralSpec::none(), rates(0.02, f, h, 0.015), DefaultModel::none(1.0));
        let y = linear_bsde_explicit(&p, &McConfig::default().with_paths(50_000).with_steps(4)).unwrap();
        let expected = -(-f).exp() * (100.0 * h.exp() - 95.0);
        assert!((y.mean - expected).abs() < 3.0 * y.se, "{} vs {expected} ± {}", y.mean, y.se);
        let d = DefaultModel::new(flat(0.01), flat(0.0), 0.4, 0.4).unwrap();
        let p = PricingProblem { defaults: d, ..p };
        assert!(linear_bsde_explicit(&p, &cfg()).is_err());
    }

    #[test]
    fn representations_agree_without_defaults() {
        let call = Contract::terminal(1.0, 1.0, Payoff::Call { asset: 0, strike: 100.0 }).unwrap();
        let p = problem(call, CollateralSpec::fraction(0.5).unwrap(), rates(0.02, 0.03, 0.025, 0.015), DefaultModel::none(1.0));
        let cfg = McConfig::default().with_paths(20_000).with_steps(16);
        let a = price_funding_measure(&p, &cfg).unwrap();
        let b = price_risk_neutral(&p, &cfg).unwrap();
        let se = a.std_error.hypot(b.std_error);
        assert!((a.price - b.price).abs() < 3.0 * se, "{} vs {} ± {se}", a.price, b.price);
        assert!(b.convergence.len() >= 2);
        assert!(b.adjustments.identity_residual.abs() < 1e-10);
        let y = linear_bsde_explicit(&p, &cfg).unwrap();
        assert!((y.mean + a.price).abs() < 1e-9 * p.notional, "{} vs {}", y.mean, a.price);
    }
}
