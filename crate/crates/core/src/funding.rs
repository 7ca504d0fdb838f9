//! External funding default legs, and valuation in the incomplete market
//! where the bank funds itself through a defaultable borrowing account.

use crate::contracts::{neg, CleanModel, CloseoutSpec, Defaulter};
use crate::error::{Result, XvaError};
use crate::linear::{leg_context, metadata, picard_report};
use crate::market::{AssetFunding, DeflatorChoice, DefaultModel, Preset, RateCurve, RatePair, RateSystem};
use crate::picard::{self, ExtraDriver};
use crate::problem::{McConfig, PricingProblem};
use crate::report::{decompose, Estimate, ExternalSplits, NetBenefit, ValuationReport};
use crate::simulation::{exposure, external_leg, ExternalConvention, ExternalLegs, LegContext, PathEnsemble};
use rayon::prelude::*;

/// Borrowing account `B^b` with `dB^b = f^b B^b dt − L_I B^b_− d1{t ≥ τ_I}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DefaultableAccount {
    pub rate: RateCurve,
    pub loss: f64,
}

impl DefaultableAccount {
    pub fn new(rate: RateCurve, loss: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&loss) {
            return Err(XvaError::validation("loss given default must lie in [0, 1]"));
        }
        Ok(Self { rate, loss })
    }

    /// Recovered fraction of the account at `t`: 1 before `τ_I`, `1 − L_I` from `τ_I` on.
    pub fn multiplier(&self, t: f64, tau_i: f64) -> f64 {
        if t >= tau_i {
            1.0 - self.loss
        } else {
            1.0
        }
    }

    pub fn value(&self, t: f64, tau_i: f64) -> f64 {
        self.rate.integral_to(t).exp() * self.multiplier(t, tau_i)
    }

    /// `B^b_{t−}`.
    pub fn left_limit(&self, t: f64, tau_i: f64) -> f64 {
        let m = if t > tau_i { 1.0 - self.loss } else { 1.0 };
        self.rate.integral_to(t).exp() * m
    }

    pub fn path(&self, times: &[f64], tau_i: f64) -> Vec<f64> {
        times.iter().map(|&t| self.value(t, tau_i)).collect()
    }
}

/// Means of the external funding legs: `(DVA^f, CVA^f)` under the
/// independent convention, `(DVA^{f,−}, DVA^{f,+})` under net borrowing.
pub fn external_adjustments(legs: &ExternalLegs, convention: ExternalConvention) -> Result<(Estimate, Estimate)> {
    if legs.convention != convention {
        return Err(XvaError::validation("external legs were accumulated under another convention"));
    }
    Ok((Estimate::of(&legs.benefit), Estimate::of(&legs.cost)))
}

/// Treasury policy towards the external lender.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalSettings {
    pub convention: ExternalConvention,
    /// Bank-wide external position `Y` excluding the trade (`Y < 0`
    /// borrowing), checked against `Y ≤ 0` and `Y + F ≤ 0` under net borrowing.
    pub bank_position: Option<RateCurve>,
}

impl ExternalSettings {
    pub fn independent() -> Self {
        Self { convention: ExternalConvention::Independent, bank_position: None }
    }

    pub fn net_borrower(bank_position: RateCurve) -> Self {
        Self { convention: ExternalConvention::NetBorrower, bank_position: Some(bank_position) }
    }
}

fn curves_equal(a: &RateCurve, b: &RateCurve) -> bool {
    a.same_shape(b)
}

/// Price of a single terminal payoff including the external funding
/// default legs, on the risk-free ensemble with repo rates equal to `r`.
pub fn price_with_external(problem: &PricingProblem, settings: &ExternalSettings, cfg: &McConfig) -> Result<ValuationReport> {
    let ens = problem.simulate(&DeflatorChoice::risk_free(&problem.rates, &problem.model), cfg)?;
    price_with_external_on(problem, &ens, settings, cfg)
}

pub fn price_with_external_on(
    problem: &PricingProblem,
    ens: &PathEnsemble,
    settings: &ExternalSettings,
    cfg: &McConfig,
) -> Result<ValuationReport> {
    let c = &problem.contract;
    if c.dates().len() != 1 || c.dates()[0].time != c.maturity {
        return Err(XvaError::validation("external funding pricing needs a single payoff at maturity"));
    }
    if problem.closeout != CloseoutSpec::RiskFree {
        return Err(XvaError::validation("external funding pricing needs the risk-free closeout"));
    }
    let rates = &problem.rates;
    for (i, kind) in problem.model.funding.iter().enumerate() {
        let pair = &rates.repo[i];
        if *kind == AssetFunding::Repo && !(pair.is_degenerate() && curves_equal(&pair.lend, &rates.r)) {
            return Err(XvaError::validation("external funding pricing needs repo rates equal to r"));
        }
    }
    if ens.preset != Preset::RiskFree {
        return Err(XvaError::validation("ensemble was not simulated under the risk-free preset"));
    }
    let bank = match (settings.convention, &settings.bank_position) {
        (ExternalConvention::NetBorrower, None) => {
            return Err(XvaError::validation("net-borrower convention needs the bank-wide position"))
        }
        (_, y) => y.as_ref(),
    };
    let exp = crate::linear::clean_exposure(problem, ens)?;
    let ctx = leg_context(problem);
    let extra = ExtraDriver::External(settings.convention);
    let out = picard::run(ens, &exp, &ctx, &extra, cfg.basis, &cfg.picard, problem.notional, None)?;
    let legs = external_leg(ens, &exp, &out.funding, &problem.defaults, settings.convention)?;
    let (benefit, cost) = external_adjustments(&legs, settings.convention)?;
    let psi = legs.psi();
    let mut report = picard_report("external", problem, ens, &out, &[&psi])?;

    let (n, np) = (ens.n_nodes(), ens.n_paths);
    let nodes = ens.grid.nodes();
    let violations = match (settings.convention, bank) {
        (ExternalConvention::NetBorrower, Some(y)) => (0..np)
            .into_par_iter()
            .map(|p| {
                let tau = ens.tau(p);
                (0..n - 1)
                    .take_while(|&k| nodes[k] < tau)
                    .filter(|&k| {
                        let yk = y.value(nodes[k]);
                        yk > 0.0 || yk + out.funding.treasury[p * n + k] > 0.0
                    })
                    .count()
            })
            .sum(),
        _ => 0,
    };
    if violations > 0 {
        report
            .metadata
            .notes
            .push(format!("net-borrower condition Y ≤ 0, Y + F ≤ 0 fails at {violations} path nodes"));
    }

    let mut special_case = None;
    if settings.convention == ExternalConvention::NetBorrower && exp.collateral.iter().all(|&x| x == 0.0) {
        let payoff: Vec<f64> = (0..np).map(|p| exp.dividend[p * n + n - 1]).collect();
        let adj = &report.adjustments;
        if payoff.iter().all(|&x| x >= 0.0) {
            special_case = Some("payoff_nonnegative".to_string());
            report.metadata.notes.push(format!(
                "nonnegative payoff: lend-side legs FBA^f = {:.3e}, DVA^f+ = {:.3e}",
                adj.fba_f.mean, cost.mean
            ));
        } else if payoff.iter().all(|&x| x <= 0.0) {
            if curves_equal(&rates.funding.lend, &rates.r) {
                special_case = Some("payoff_nonpositive_lend_at_r".to_string());
                let gap: Vec<f64> = legs.cost.iter().zip(&out.legs.dva).map(|(a, b)| b - a).collect();
                let gap = Estimate::of(&gap);
                report.metadata.notes.push(format!(
                    "DVA − DVA^f+ = {:.3e} ± {:.3e}; price − clean = {:.3e} ± {:.3e}",
                    gap.mean,
                    gap.se,
                    report.price - report.clean,
                    report.std_error
                ));
            } else {
                special_case = Some("payoff_nonpositive".to_string());
            }
        }
    }
    report.external = Some(ExternalSplits {
        convention: match settings.convention {
            ExternalConvention::Independent => "independent",
            ExternalConvention::NetBorrower => "net_borrower",
        }
        .into(),
        benefit,
        cost,
        special_case,
        violations,
        net_funding_benefit: Estimate::of(
            &psi.iter().enumerate().map(|(p, x)| x + out.legs.fva_f(p)).collect::<Vec<_>>(),
        ),
    });
    Ok(report)
}

/// Net funding/default benefit `J_0` of the borrowing account with
/// per-node shortfall `(W − v + C)⁻` (path-major) and funding spread `s^f`.
pub fn net_benefit(ens: &PathEnsemble, shortfall: &[f64], defaults: &DefaultModel, spread: &RateCurve) -> Result<NetBenefit> {
    let (n, np) = (ens.n_nodes(), ens.n_paths);
    if shortfall.len() != n * np {
        return Err(XvaError::validation("shortfall path does not match the ensemble"));
    }
    let nodes = ens.grid.nodes();
    let horizon = ens.grid.horizon();
    let eta = &ens.eta;
    let l_i = defaults.loss_i();
    let cost: Vec<f64> = nodes
        .windows(2)
        .map(|w| RateCurve::weighted_discount_integral(Some(spread), eta, w[0], w[1]))
        .collect();
    let pathwise: Vec<f64> = (0..np)
        .into_par_iter()
        .map(|p| {
            let tau = ens.tau(p);
            let stop = tau.min(horizon);
            let mut acc = 0.0;
            for k in (0..n - 1).take_while(|&k| nodes[k] < stop) {
                let w = if nodes[k + 1] <= stop {
                    cost[k]
                } else {
                    RateCurve::weighted_discount_integral(Some(spread), eta, nodes[k], stop)
                };
                acc -= w * shortfall[p * n + k];
            }
            if matches!(ens.defaulter(p), Some(Defaulter::Trader | Defaulter::Joint)) {
                let k = ens.grid.last_before(tau);
                acc += l_i * (-eta.integral_to(tau)).exp() * shortfall[p * n + k];
            }
            acc
        })
        .collect();
    let integrand = defaults.lambda_i.scale(l_i).sub(spread);
    let killed = eta.add(&defaults.lambda());
    let marginalized = (0..n - 1)
        .map(|k| {
            let w = RateCurve::weighted_discount_integral(Some(&integrand), &killed, nodes[k], nodes[k + 1]);
            if w == 0.0 {
                return 0.0;
            }
            w * (0..np).map(|p| shortfall[p * n + k]).sum::<f64>() / np as f64
        })
        .sum();
    let max_abs_integrand = integrand.points().iter().map(|&(_, v)| v.abs()).fold(0.0, f64::max);
    Ok(NetBenefit { monte_carlo: Estimate::of(&pathwise), marginalized, max_abs_integrand, wealth_gap: None })
}

/// Synthetic wealth process `W` of the bank's strategy.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SyntheticWealth {
    Constant { level: f64 },
    /// `level + beta·S^asset`.
    Spot { asset: usize, level: f64, beta: f64 },
}

impl SyntheticWealth {
    /// Path-major values on the ensemble.
    pub fn path(&self, ens: &PathEnsemble) -> Result<Vec<f64>> {
        let n = ens.n_nodes();
        match *self {
            Self::Constant { level } => Ok(vec![level; n * ens.n_paths]),
            Self::Spot { asset, level, beta } => {
                if asset >= ens.n_assets {
                    return Err(XvaError::validation("wealth references an undefined asset"));
                }
                Ok((0..ens.n_paths)
                    .flat_map(|p| (0..n).map(move |k| level + beta * ens.spot(p, k)[asset]))
                    .collect())
            }
        }
    }
}

/// Two wealth paths used to confirm that the price does not depend on `W`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IncompleteSettings {
    pub wealth: [SyntheticWealth; 2],
}

impl Default for IncompleteSettings {
    fn default() -> Self {
        Self {
            wealth: [SyntheticWealth::Constant { level: 0.0 }, SyntheticWealth::Spot { asset: 0, level: 0.0, beta: 1.0 }],
        }
    }
}

/// Incomplete-market price under `Q^h` with deflation at the deposit rate
/// `η = f^l`. Every asset must be repo-funded at one shared rate `h`. The
/// funding spread is `rates.funding_spread`, or the fair `L_I λ^I` when
/// unset; an unfair spread keeps the wealth-dependent terms in the iteration.
pub fn price_incomplete(problem: &PricingProblem, settings: &IncompleteSettings, cfg: &McConfig) -> Result<ValuationReport> {
    let rates = &problem.rates;
    let m = problem.model.n_assets();
    if problem.model.funding.iter().any(|&f| f != AssetFunding::Repo) {
        return Err(XvaError::validation("incomplete-market pricing needs every asset on repo"));
    }
    let h = rates.repo[0].lend.clone();
    if !rates.repo.iter().all(|p| p.is_degenerate() && curves_equal(&p.lend, &h)) {
        return Err(XvaError::validation("incomplete-market pricing needs one shared repo rate"));
    }
    let eta = rates.funding.lend.clone();
    let d = &problem.defaults;
    let fair = d.lambda_i.scale(d.loss_i());
    let spread = rates.funding_spread.clone().unwrap_or_else(|| fair.clone());
    let is_fair = fair.sub(&spread).points().iter().all(|&(_, v)| v == 0.0);

    let ens = problem.simulate(&DeflatorChoice::repo(eta.clone(), h.clone(), m), cfg)?;
    let clean = CleanModel { discount: eta.clone(), carry: vec![h; m], sigma: problem.model.sigma.clone() };
    let exp = exposure(&ens, &problem.contract, &problem.collateral, &clean)?;
    let inc_rates = RateSystem { funding: RatePair::single(eta), ..rates.clone() };
    let ctx = LegContext { rates: &inc_rates, ..leg_context(problem) };

    let mut priced = Vec::with_capacity(2);
    for w in &settings.wealth {
        let wealth = w.path(&ens)?;
        let extra = ExtraDriver::Wealth { wealth: &wealth, spread: &spread };
        let out = picard::run(&ens, &exp, &ctx, &extra, cfg.basis, &cfg.picard, problem.notional, None)?;
        let shortfall: Vec<f64> = (0..wealth.len())
            .map(|j| neg(wealth[j] - out.funding.v[j] + exp.collateral[j]))
            .collect();
        let nb = net_benefit(&ens, &shortfall, d, &spread)?;
        let (price, adjustments) = decompose(&out.legs, &[&vec![nb.marginalized; ens.n_paths]])?;
        priced.push((price, adjustments, nb, out));
    }
    let gap = (priced[0].0.mean - priced[1].0.mean).abs();
    if is_fair && gap > 1e-10 * problem.notional {
        return Err(XvaError::Numeric(format!("price depends on the wealth path under the fair spread ({gap:.3e})")));
    }
    let (price, adjustments, nb, out) = priced.swap_remove(0);
    let mut meta = metadata("incomplete", &ens, problem);
    meta.notes.push("measure Q^h: every asset drifts at the repo rate, intensities as specified".into());
    meta.notes.push(format!(
        "{} funding spread; price gap across wealth paths {gap:.3e}",
        if is_fair { "fair" } else { "explicit" }
    ));
    Ok(ValuationReport {
        price: price.mean,
        std_error: price.se,
        clean: clean.value_ex(&problem.contract, 0.0, &problem.model.s0),
        adjustments,
        net_benefit: Some(NetBenefit { wealth_gap: Some(gap), ..nb }),
        convergence: out.log,
        sign_mismatches: out.sign_mismatches,
        metadata: meta,
        ..Default::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contracts::{CollateralSpec, Contract, Payoff};
    use crate::linear::price_risk_neutral;
    use crate::market::AssetModel;
    use crate::oracles::integrate;
    use crate::simulation::{FundingPaths, SeedPolicy};

    fn flat(v: f64) -> RateCurve {
        RateCurve::flat(v, 1.0).unwrap()
    }

    fn defaults(li: f64, lc: f64, loss: f64) -> DefaultModel {
        DefaultModel::new(flat(li), flat(lc), 1.0 - loss, 1.0 - loss).unwrap()
    }

    fn call_problem(rates: RateSystem, d: DefaultModel, quantity: f64) -> PricingProblem {
        let c = Contract::terminal(1.0, quantity, Payoff::Call { asset: 0, strike: 100.0 }).unwrap();
        PricingProblem::new(AssetModel::single(100.0, 0.2).unwrap(), rates, d, c, CollateralSpec::none()).unwrap()
    }

    fn small() -> McConfig {
        McConfig::default().with_paths(4_000).with_steps(16)
    }

    #[test]
    fn borrowing_account_jumps_once_at_default() {
        let acc = DefaultableAccount::new(flat(0.04), 0.6).unwrap();
        let tau = 0.37;
        assert_eq!(acc.multiplier(tau, tau) / acc.multiplier(tau - 1e-9, tau), 1.0 - 0.6);
        let ratio = acc.value(tau, tau) / acc.left_limit(tau, tau);
        assert!((ratio - 0.4).abs() <= 4.0 * f64::EPSILON);
        let t = 0.8;
        assert_eq!(acc.value(t, tau), acc.left_limit(t, tau));
        assert_eq!(acc.path(&[0.0, 0.5], f64::INFINITY), vec![1.0, 0.02f64.exp()]);
        assert!(DefaultableAccount::new(flat(0.04), 1.5).is_err());
    }

    /// Empty contract with the treasury account forced to `F ≡ −1`.
    fn borrowing_setup(lambda_i: f64, loss: f64, r: f64, paths: usize) -> (PathEnsemble, ExternalLegs) {
        let p = PricingProblem::new(
            AssetModel::single(100.0, 0.2).unwrap(),
            RateSystem::single_rate(flat(r), 1),
            defaults(lambda_i, 0.0, loss),
            Contract::empty(1.0).unwrap(),
            CollateralSpec::none(),
        )
        .unwrap();
        let cfg = McConfig::default().with_paths(paths).with_steps(8);
        let ens = p.simulate(&DeflatorChoice::risk_free(&p.rates, &p.model), &cfg).unwrap();
        let exp = crate::linear::clean_exposure(&p, &ens).unwrap();
        let f = FundingPaths::new(&p.model, &exp, vec![1.0; exp.q_ex.len()], vec![0.0; exp.q_ex.len()]);
        let legs = external_leg(&ens, &exp, &f, &p.defaults, ExternalConvention::NetBorrower).unwrap();
        (ens, legs)
    }

    #[test]
    fn constant_borrowing_debit_adjustment() {
        let (lam, loss, r) = (0.05, 0.6, 0.02);
        let (_, legs) = borrowing_setup(lam, loss, r, 200_000);
        let (minus, plus) = external_adjustments(&legs, ExternalConvention::NetBorrower).unwrap();
        let expected = loss * integrate(|u| lam * (-lam * u).exp() * (-r * u).exp(), 0.0, 1.0, 1e-12);
        assert_eq!(plus.mean, 0.0);
        assert!((minus.mean - expected).abs() < 3.0 * minus.se, "{} vs {expected} ± {}", minus.mean, minus.se);
        assert!(external_adjustments(&legs, ExternalConvention::Independent).is_err());
        let (_, legs) = borrowing_setup(lam, 0.0, r, 2_000);
        assert_eq!(external_adjustments(&legs, ExternalConvention::NetBorrower).unwrap().0.mean, 0.0);
    }

    fn shortfall_ensemble(d: &DefaultModel) -> (PathEnsemble, Vec<f64>) {
        let model = AssetModel::single(100.0, 0.2).unwrap();
        let grid = crate::simulation::TimeGrid::new(1.0, 16, &[]).unwrap();
        let choice = DeflatorChoice::flat_instrumental(flat(0.02), 1);
        let ens = crate::simulation::simulate(&model, &choice, d, &grid, &SeedPolicy::new(11), 100_000).unwrap();
        let n = ens.n_nodes();
        let y = (0..ens.n_paths).flat_map(|p| (0..n).map(move |k| (p, k))).map(|(p, k)| 0.5 * ens.spot(p, k)[0]).collect();
        (ens, y)
    }

    #[test]
    fn fair_spread_cancels_the_net_benefit() {
        let d = defaults(0.05, 0.03, 0.6);
        let (ens, y) = shortfall_ensemble(&d);
        let fair = d.lambda_i.scale(d.loss_i());
        let j = net_benefit(&ens, &y, &d, &fair).unwrap();
        assert_eq!(j.marginalized, 0.0);
        assert_eq!(j.max_abs_integrand, 0.0);
        assert!(j.monte_carlo.mean.abs() < 3.0 * j.monte_carlo.se, "{:?}", j.monte_carlo);

        let zero = flat(0.0);
        let benefit = net_benefit(&ens, &y, &d, &zero).unwrap();
        assert!(benefit.monte_carlo.mean > 3.0 * benefit.monte_carlo.se && benefit.marginalized > 0.0);
        let diff = benefit.monte_carlo.mean - benefit.marginalized;
        assert!(diff.abs() < 3.0 * benefit.monte_carlo.se, "{diff}");

        let riskless = defaults(0.05, 0.03, 0.0);
        let cost = net_benefit(&ens, &y, &riskless, &flat(0.01)).unwrap();
        assert!(cost.monte_carlo.mean < 0.0 && cost.marginalized < 0.0);
    }

    #[test]
    fn incomplete_price_ignores_wealth_under_fair_spread() {
        let mut rs = RateSystem::single_rate(flat(0.02), 1);
        rs.funding = RatePair::single(flat(0.03));
        rs.repo = vec![RatePair::single(flat(0.025))];
        let p = call_problem(rs, defaults(0.04, 0.02, 0.6), 1.0);
        let r = price_incomplete(&p, &IncompleteSettings::default(), &small()).unwrap();
        let nb = r.net_benefit.unwrap();
        assert_eq!(nb.marginalized, 0.0);
        assert!(r.adjustments.identity_residual.abs() < 1e-10 * p.notional);

        let mut unfair = p.clone();
        unfair.rates.funding_spread = Some(flat(0.0));
        let u = price_incomplete(&unfair, &IncompleteSettings::default(), &small()).unwrap();
        assert!(u.net_benefit.unwrap().marginalized > 0.0);
    }

    #[test]
    fn incomplete_price_matches_linear_route_at_risk_free_rates() {
        let p = call_problem(RateSystem::single_rate(flat(0.02), 1), defaults(0.04, 0.02, 0.6), 1.0);
        let a = price_incomplete(&p, &IncompleteSettings::default(), &small()).unwrap();
        let b = price_risk_neutral(&p, &small()).unwrap();
        assert!((a.price - b.price).abs() < 1e-8 * p.notional, "{} vs {}", a.price, b.price);
    }

    #[test]
    fn lossless_external_price_is_the_stopped_clean_price() {
        let p = call_problem(RateSystem::single_rate(flat(0.02), 1), defaults(0.04, 0.02, 0.0), 1.0);
        let r = price_with_external(&p, &ExternalSettings::net_borrower(flat(-1e6)), &small()).unwrap();
        assert!((r.price - r.adjustments.clean_leg.mean).abs() < 1e-12 * p.notional);
        let ext = r.external.unwrap();
        assert_eq!((ext.benefit.mean, ext.cost.mean, ext.violations), (0.0, 0.0, 0));
        assert_eq!(ext.special_case.as_deref(), Some("payoff_nonnegative"));
    }

    #[test]
    fn short_payoff_lending_at_r_cancels_adjustments() {
        let p = call_problem(RateSystem::single_rate(flat(0.02), 1), defaults(0.04, 0.02, 0.6), -1.0);
        let r = price_with_external(&p, &ExternalSettings::net_borrower(flat(-1e6)), &small()).unwrap();
        let ext = r.external.as_ref().unwrap();
        assert!((r.adjustments.dva.mean - ext.cost.mean).abs() < 3.0 * r.adjustments.dva.se.hypot(ext.cost.se));
        assert_eq!(ext.special_case.as_deref(), Some("payoff_nonpositive_lend_at_r"));
        assert!((r.price - r.clean).abs() < 3.0 * r.std_error);
        let tight = price_with_external(&p, &ExternalSettings::net_borrower(flat(-1.0)), &small()).unwrap();
        assert!(tight.external.unwrap().violations > 0);
        assert!(price_with_external(&p, &ExternalSettings { bank_position: None, ..ExternalSettings::net_borrower(flat(0.0)) }, &small()).is_err());
    }
}
