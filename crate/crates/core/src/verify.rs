//! Acceptance matrix: each criterion prices a small scenario and compares it
//! with an oracle or an invariant. Tolerances live in [`tol`].

use crate::contracts::{closeout_payoff, recovery_payoff, CloseoutSpec, CollateralSpec, Contract, Defaulter, Payoff};
use crate::error::Result;
use crate::funding::{price_incomplete, price_with_external_on, ExternalSettings, IncompleteSettings};
use crate::linear::{clean_exposure, leg_context, price_funding_measure_on, price_instrumental, price_instrumental_on};
use crate::market::{AssetModel, DefaultModel, DeflatorChoice, RateCurve, RatePair, RateSystem};
use crate::nonlinear::{picard_price_on, solve_bsde_on};
use crate::oracles::{
    calibrate_fair_borrow_rate, quadrature_xva, tree_reference, ExternalFundingInput, OptionKind, OracleMeasure,
    TreeInput, XvaOracleInput,
};
use crate::problem::{McConfig, PricingProblem};
use crate::report::Estimate;
use crate::simulation::{accumulate_legs, mean_se};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Tolerances of the acceptance criteria. Absolute bounds are multiples of
/// the initial spot `S_0`.
pub mod tol {
    /// Standard-error multiple for statistical comparisons.
    pub const SE_MULTIPLE: f64 = 3.0;
    /// Largest standard error of the linear price, relative to `S_0`.
    pub const SE_RELATIVE: f64 = 1e-3;
    pub const LINEAR_RUNTIME_SECONDS: f64 = 60.0;
    pub const IDENTITY: f64 = 1e-10;
    pub const COLLAPSE: f64 = 1e-12;
    pub const DEGENERATE: f64 = 1e-8;
    pub const WEALTH_INDEPENDENCE: f64 = 1e-10;
    /// Accepted ratio of successive grid-refinement differences.
    pub const REFINEMENT: (f64, f64) = (1.5, 3.0);
    pub const CLOSEOUT_TUPLES: usize = 10_000;
    /// Tree steps for the nonlinear reference (run at half, full and double).
    pub const TREE_STEPS: usize = 1000;
}

/// One measured quantity with its accepted range.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub label: String,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Check {
    fn at_most(label: impl Into<String>, value: f64, upper: f64) -> Self {
        Self { label: label.into(), value, lower: f64::NEG_INFINITY, upper }
    }

    fn above(label: impl Into<String>, value: f64, lower: f64) -> Self {
        Self { label: label.into(), value, lower, upper: f64::INFINITY }
    }

    fn within(label: impl Into<String>, value: f64, lower: f64, upper: f64) -> Self {
        Self { label: label.into(), value, lower, upper }
    }

    fn exact(label: impl Into<String>, holds: bool) -> Self {
        Self::at_most(label, if holds { 0.0 } else { 1.0 }, 0.0)
    }

    pub fn passed(&self) -> bool {
        if self.lower == f64::NEG_INFINITY {
            self.value <= self.upper
        } else if self.upper == f64::INFINITY {
            self.value > self.lower
        } else {
            self.lower <= self.value && self.value <= self.upper
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub id: usize,
    pub title: &'static str,
    pub checks: Vec<Check>,
    pub error: Option<String>,
    pub seconds: f64,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.error.is_none() && !self.checks.is_empty() && self.checks.iter().all(Check::passed)
    }

    pub fn line(&self) -> String {
        format!("{} criterion {:>2}: {} ({:.1} s)", if self.passed() { "PASS" } else { "FAIL" }, self.id, self.title, self.seconds)
    }
}

/// Monte Carlo size of the matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyConfig {
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        let d = McConfig::default();
        Self { paths: 100_000, steps: 128, seed: d.seed }
    }
}

impl VerifyConfig {
    fn mc(&self) -> McConfig {
        McConfig::default().with_paths(self.paths).with_steps(self.steps).with_seed(self.seed)
    }

    /// Half the paths and steps, for the criteria that run several
    /// regression pricers.
    fn reduced(&self) -> McConfig {
        self.mc().with_paths((self.paths / 2).max(1_000)).with_steps((self.steps / 2).max(8))
    }
}

pub const TITLES: [&str; 11] = [
    "linear price matches the quadrature oracle",
    "invariance across instrumental measures",
    "decomposition identity",
    "degenerate collapse to the stopped clean price",
    "buy/sell symmetry",
    "nonlinear pricers against the binomial reference",
    "nonlinear pricers reduce to the linear route",
    "fair funding spread cancels the net benefit",
    "external funding special cases",
    "simulation correctness",
    "closeout invariants",
];

pub fn run(id: usize, cfg: &VerifyConfig) -> Outcome {
    let start = Instant::now();
    let result = match id {
        1 => linear_oracle(cfg),
        2 => invariance(cfg),
        3 => identity(cfg),
        4 => collapse(cfg),
        5 => symmetry(cfg),
        6 => nonlinear_reference(cfg),
        7 => nonlinear_degeneracy(cfg),
        8 => fair_spread(cfg),
        9 => external_cases(cfg),
        10 => simulation(cfg),
        11 => Ok(closeout_suite(cfg.seed)),
        _ => Ok(vec![]),
    };
    let (checks, error) = match result {
        Ok(c) => (c, None),
        Err(e) => (vec![], Some(e.to_string())),
    };
    Outcome {
        id,
        title: TITLES.get(id.wrapping_sub(1)).copied().unwrap_or("unknown criterion"),
        checks,
        error,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn run_all(cfg: &VerifyConfig) -> Vec<Outcome> {
    (1..=TITLES.len()).map(|id| run(id, cfg)).collect()
}

/// Pass/fail table with every check.
pub fn render(outcomes: &[Outcome]) -> String {
    let mut s = String::new();
    for o in outcomes {
        s.push_str(&o.line());
        s.push('\n');
        if let Some(e) = &o.error {
            s.push_str(&format!("    error: {e}\n"));
        }
        for c in &o.checks {
            let range = match (c.lower.is_finite(), c.upper.is_finite()) {
                (false, true) => format!("≤ {:.3e}", c.upper),
                (true, false) => format!("> {:.3e}", c.lower),
                _ => format!("in [{:.3e}, {:.3e}]", c.lower, c.upper),
            };
            let mark = if c.passed() { "ok " } else { "BAD" };
            s.push_str(&format!("    [{mark}] {}: {:.6e} {range}\n", c.label, c.value));
        }
    }
    s
}

const S0: f64 = 100.0;

fn flat(v: f64) -> RateCurve {
    RateCurve::flat(v, 1.0).expect("flat curve")
}

fn atm_call(quantity: f64) -> Contract {
    Contract::terminal(1.0, quantity, Payoff::Call { asset: 0, strike: 100.0 }).expect("call")
}

/// Linear scenario: `r = 2%`, `f = 3%`, `h = 2.5%`, `c = 1.5%`, defaults at
/// 1% and 2% with 60% loss.
fn linear_rates() -> RateSystem {
    let mut rs = RateSystem::single_rate(flat(0.02), 1);
    rs.funding = RatePair::single(flat(0.03));
    rs.repo = vec![RatePair::single(flat(0.025))];
    rs.collateral = RatePair::single(flat(0.015));
    rs
}

fn linear_defaults() -> DefaultModel {
    DefaultModel::new(flat(0.01), flat(0.02), 0.4, 0.4).expect("defaults")
}

fn linear_problem(alpha: f64) -> Result<PricingProblem> {
    PricingProblem::new(
        AssetModel::single(S0, 0.2)?,
        linear_rates(),
        linear_defaults(),
        atm_call(1.0),
        CollateralSpec::fraction(alpha)?,
    )
}

fn se_bound(se: f64) -> f64 {
    tol::SE_MULTIPLE * se
}

fn linear_oracle(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let start = Instant::now();
    for alpha in [0.0, 0.8, 1.0] {
        let p = linear_problem(alpha)?;
        let ens = p.simulate(&DeflatorChoice::funding(&p.rates, &p.model), &cfg.mc())?;
        let r = price_funding_measure_on(&p, &ens)?;
        let oracle = quadrature_xva(
            &XvaOracleInput {
                s0: S0,
                strike: 100.0,
                sigma: 0.2,
                maturity: 1.0,
                kind: OptionKind::Call,
                quantity: 1.0,
                r: 0.02,
                c_lend: 0.015,
                c_borrow: 0.015,
                lambda_i: 0.01,
                lambda_c: 0.02,
                loss_i: 0.6,
                loss_c: 0.6,
                alpha,
            },
            &OracleMeasure { discount: 0.03, carry: 0.025 },
            1e-10,
        );
        checks.push(Check::at_most(format!("α={alpha}: |price − oracle|"), (r.price - oracle.total).abs(), se_bound(r.std_error)));
        checks.push(Check::at_most(format!("α={alpha}: SE / S0"), r.std_error / S0, tol::SE_RELATIVE));
    }
    checks.push(Check::at_most("seconds for three prices", start.elapsed().as_secs_f64(), tol::LINEAR_RUNTIME_SECONDS));
    Ok(checks)
}

fn invariance(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let p = linear_problem(0.8)?;
    let mc = cfg.mc();
    let fm_ens = p.simulate(&DeflatorChoice::funding(&p.rates, &p.model), &mc)?;
    let fm = price_funding_measure_on(&p, &fm_ens)?;
    let rn = price_instrumental(&p, &DeflatorChoice::risk_free(&p.rates, &p.model), &mc)?;
    let eta = price_instrumental(&p, &DeflatorChoice::flat_instrumental(flat(0.05), 1), &mc)?;
    Ok(vec![
        Check::at_most("|risk-free − funding|", (rn.price - fm.price).abs(), se_bound(rn.std_error.hypot(fm.std_error))),
        Check::at_most("|η=5% − funding|", (eta.price - fm.price).abs(), se_bound(eta.std_error.hypot(fm.std_error))),
    ])
}

fn identity(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let p = linear_problem(0.8)?;
    let mc = cfg.reduced();
    let fm_ens = p.simulate(&DeflatorChoice::funding(&p.rates, &p.model), &mc)?;
    let fm = price_funding_measure_on(&p, &fm_ens)?;
    let rn = price_instrumental(&p, &DeflatorChoice::risk_free(&p.rates, &p.model), &mc)?;
    let bound = tol::IDENTITY * S0;
    Ok(vec![
        Check::at_most("funding measure residual", fm.adjustments.identity_residual.abs(), bound),
        Check::at_most("risk-free residual", rn.adjustments.identity_residual.abs(), bound),
    ])
}

fn collapse(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let mut p = PricingProblem::new(
        AssetModel::single(S0, 0.2)?,
        RateSystem::single_rate(flat(0.02), 1),
        linear_defaults(),
        atm_call(1.0),
        CollateralSpec::fraction(0.8)?,
    )?;
    p.closeout = CloseoutSpec::Null;
    let mc = cfg.reduced();
    let ens = p.simulate(&DeflatorChoice::funding(&p.rates, &p.model), &mc)?;
    let fm = price_funding_measure_on(&p, &ens)?;
    let rn = price_instrumental_on(&p, &ens, &mc)?;
    // Stopped clean price on the same paths: the payoff if no default by T.
    let n = ens.n_nodes();
    let d_t = (-0.02f64).exp();
    let stopped: Vec<f64> =
        (0..ens.n_paths).map(|q| if ens.tau(q) > 1.0 { d_t * (ens.spot(q, n - 1)[0] - 100.0).max(0.0) } else { 0.0 }).collect();
    let stopped = mean_se(&stopped).0;
    let bound = tol::COLLAPSE * S0;
    Ok(vec![
        Check::at_most("|funding measure − stopped clean|", (fm.price - stopped).abs(), bound),
        Check::at_most("|risk-free − stopped clean|", (rn.price - stopped).abs(), bound),
    ])
}

fn symmetry(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let p = linear_problem(0.8)?;
    let mc = cfg.mc();
    let ens = p.simulate(&DeflatorChoice::funding(&p.rates, &p.model), &mc)?;
    let mirror = ens.mirrored();
    let buy = price_funding_measure_on(&p, &ens)?;
    let sell = price_funding_measure_on(&p.mirrored(), &mirror)?;
    let mut spread = p.clone();
    spread.rates.collateral = RatePair::new(flat(0.015), flat(0.025))?;
    let totals = |q: &PricingProblem, e: &crate::simulation::PathEnsemble| -> Result<Vec<f64>> {
        let exp = clean_exposure(q, e)?;
        Ok(accumulate_legs(e, &exp, &leg_context(q), None)?.totals())
    };
    let a = totals(&spread, &ens)?;
    let b = totals(&spread.mirrored(), &mirror)?;
    let gap = Estimate::of(&a.iter().zip(&b).map(|(x, y)| x + y).collect::<Vec<_>>());
    Ok(vec![
        Check::exact("price(A) = −price(−A) bitwise without collateral spread", buy.price.to_bits() == (-sell.price).to_bits()),
        Check::above("|asymmetry| / SE with 100bp collateral spread", gap.mean.abs() / gap.se, tol::SE_MULTIPLE),
    ])
}

fn nonlinear_problem() -> Result<(PricingProblem, TreeInput)> {
    let mut rs = RateSystem::single_rate(flat(0.02), 1);
    rs.funding = RatePair::new(flat(0.025), flat(0.045))?;
    rs.repo = vec![RatePair::single(flat(0.025))];
    let p = PricingProblem::new(AssetModel::single(S0, 0.2)?, rs, DefaultModel::none(1.0), atm_call(1.0), CollateralSpec::none())?;
    let tree = TreeInput {
        s0: S0,
        strike: 100.0,
        sigma: 0.2,
        maturity: 1.0,
        kind: OptionKind::Call,
        quantity: 1.0,
        r: 0.02,
        f_lend: 0.025,
        f_borrow: 0.045,
        h_lend: 0.025,
        h_borrow: 0.025,
        c_lend: 0.02,
        c_borrow: 0.02,
        alpha: 0.0,
        lambda_i: 0.0,
        lambda_c: 0.0,
        loss_i: 0.0,
        loss_c: 0.0,
    };
    Ok((p, tree))
}

fn nonlinear_reference(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let (p, tree) = nonlinear_problem()?;
    let reference = tree_reference(&tree, tol::TREE_STEPS)
        .ok_or_else(|| crate::XvaError::validation("tree too small for the reference"))?;
    let mc = cfg.mc();
    let fm_ens = p.simulate(&DeflatorChoice::funding(&p.rates, &p.model), &mc)?;
    let mut values = Vec::new();
    let mut fine = None;
    for factor in [4, 2, 1] {
        let ens = fm_ens.coarsen(factor)?;
        let s = solve_bsde_on(&p, &ens, &mc)?;
        values.push(s.report.price);
        fine = Some(s.report);
    }
    let bsde = fine.expect("three grids");
    let rn_ens = p.simulate(&DeflatorChoice::risk_free(&p.rates, &p.model), &mc)?;
    let picard = picard_price_on(&p, &rn_ens, &mc)?;
    let ratio = (values[0] - values[1]) / (values[1] - values[2]);
    Ok(vec![
        Check::at_most(
            "|bsde − tree|",
            (bsde.price - reference.value).abs(),
            reference.error_bar + se_bound(bsde.std_error),
        ),
        Check::at_most(
            "|picard − tree|",
            (picard.price - reference.value).abs(),
            reference.error_bar + se_bound(picard.std_error),
        ),
        Check::within("bsde refinement ratio", ratio, tol::REFINEMENT.0, tol::REFINEMENT.1),
    ])
}

fn nonlinear_degeneracy(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let p = linear_problem(0.8)?;
    let mc = cfg.reduced();
    let fm_ens = p.simulate(&DeflatorChoice::funding(&p.rates, &p.model), &mc)?;
    let fm = price_funding_measure_on(&p, &fm_ens)?;
    let bsde = solve_bsde_on(&p, &fm_ens, &mc)?.report;
    let half = solve_bsde_on(&p, &fm_ens.coarsen(2)?, &mc)?.report;
    let rn_ens = p.simulate(&DeflatorChoice::risk_free(&p.rates, &p.model), &mc)?;
    let rn = price_instrumental_on(&p, &rn_ens, &mc)?;
    let picard = picard_price_on(&p, &rn_ens, &mc)?;
    let floor = tol::DEGENERATE * S0;
    Ok(vec![
        Check::at_most("|picard − risk-free|", (picard.price - rn.price).abs(), floor),
        Check::at_most(
            "|bsde − funding measure|",
            (bsde.price - fm.price).abs(),
            floor + se_bound(bsde.std_error) + (bsde.price - half.price).abs(),
        ),
    ])
}

fn fair_spread(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let p = linear_problem(0.8)?;
    let r = price_incomplete(&p, &IncompleteSettings::default(), &cfg.reduced())?;
    let nb = r.net_benefit.expect("incomplete report carries the net benefit");
    Ok(vec![
        Check::at_most("max |L_I λ^I − s^f|", nb.max_abs_integrand, 0.0),
        Check::at_most("|marginalized J|", nb.marginalized.abs(), 0.0),
        Check::at_most("|J (Monte Carlo)|", nb.monte_carlo.mean.abs(), se_bound(nb.monte_carlo.se)),
        Check::at_most("price gap across wealth paths", nb.wealth_gap.unwrap_or(f64::INFINITY), tol::WEALTH_INDEPENDENCE * S0),
    ])
}

fn external_cases(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let mc = cfg.reduced();
    let defaults = linear_defaults();
    let base = |quantity: f64, rates: RateSystem| {
        PricingProblem::new(AssetModel::single(S0, 0.2)?, rates, defaults.clone(), atm_call(quantity), CollateralSpec::none())
    };
    let borrower = ExternalSettings::net_borrower(flat(-1e6));

    let short = base(-1.0, RateSystem::single_rate(flat(0.02), 1))?;
    let ens = short.simulate(&DeflatorChoice::risk_free(&short.rates, &short.model), &mc)?;
    let s = price_with_external_on(&short, &ens, &borrower, &mc)?;
    let ext = s.external.as_ref().expect("external splits");
    let dva = s.adjustments.dva;

    let long = base(1.0, RateSystem::single_rate(flat(0.02), 1))?;
    let f_b = calibrate_fair_borrow_rate(&ExternalFundingInput {
        clean_price: crate::linear::clean_price(&long),
        maturity: 1.0,
        r: 0.02,
        lambda_i: 0.01,
        lambda_c: 0.02,
        loss_i: 0.6,
        loss_c: 0.6,
    });
    let mut rates = RateSystem::single_rate(flat(0.02), 1);
    rates.funding = RatePair::new(flat(0.02), flat(f_b))?;
    let long = base(1.0, rates)?;
    let l = price_with_external_on(&long, &ens, &borrower, &mc)?;
    let net = l.external.as_ref().expect("external splits").net_funding_benefit;
    Ok(vec![
        Check::exact(
            "short payoff detected with lending at r",
            ext.special_case.as_deref() == Some("payoff_nonpositive_lend_at_r"),
        ),
        Check::at_most("|DVA − DVA^f+|", (dva.mean - ext.cost.mean).abs(), se_bound(dva.se.hypot(ext.cost.se))),
        Check::at_most("|price − clean| (short payoff)", (s.price - s.clean).abs(), se_bound(s.std_error)),
        Check::at_most("net-borrower violations", ext.violations as f64, 0.0),
        Check::at_most("|DVA^f− − FCA^f| at the calibrated borrow rate", net.mean.abs(), se_bound(net.se)),
    ])
}

fn simulation(cfg: &VerifyConfig) -> Result<Vec<Check>> {
    let p = linear_problem(0.0)?;
    let ens = p.simulate(&DeflatorChoice::funding(&p.rates, &p.model), &cfg.mc())?;
    let nodes = ens.grid.nodes();
    let mut worst: f64 = 0.0;
    for (k, &t) in nodes.iter().enumerate() {
        let d = (-0.025 * t).exp();
        let x: Vec<f64> = (0..ens.n_paths).map(|q| d * ens.spot(q, k)[0]).collect();
        let (m, se) = mean_se(&x);
        if se > 0.0 {
            worst = worst.max((m - S0).abs() / se);
        }
    }
    let hits: Vec<f64> =
        (0..ens.n_paths).map(|q| f64::from(u8::from(ens.defaulter(q) == Some(Defaulter::Counterparty)))).collect();
    let hit = Estimate::of(&hits);
    let (lc, lam) = (0.02, 0.03);
    let exact = lc / lam * (1.0 - (-lam * 1.0f64).exp());
    Ok(vec![
        Check::at_most("max over nodes of |E[D S] − S0| / SE", worst, tol::SE_MULTIPLE),
        Check::at_most("|P(τ = τ_C ≤ T) − closed form|", (hit.mean - exact).abs(), se_bound(hit.se)),
    ])
}

/// Randomized dyadic tuples, so that every identity holds in exact arithmetic.
pub fn closeout_suite(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parties = [Defaulter::Trader, Defaulter::Counterparty, Defaulter::Joint];
    let (mut decomposition, mut negation, mut neutral, mut joint) = (0, 0, 0, 0);
    for _ in 0..tol::CLOSEOUT_TUPLES {
        let q = f64::from(rng.random_range(-4096i32..=4096)) / 64.0;
        let c = f64::from(rng.random_range(-4096i32..=4096)) / 64.0;
        let l_i = f64::from(rng.random_range(0u8..=16)) / 16.0;
        let l_c = f64::from(rng.random_range(0u8..=16)) / 16.0;
        let who = parties[rng.random_range(0..3)];
        let out = closeout_payoff(q, c, who, l_i, l_c).expect("losses in range");
        if out.theta != c + recovery_payoff(q - c, who, 1.0 - l_i, 1.0 - l_c) {
            decomposition += 1;
        }
        let mirrored = closeout_payoff(-q, -c, who.other(), l_c, l_i).expect("losses in range");
        if mirrored.theta != -out.theta {
            negation += 1;
        }
        if closeout_payoff(q, q, who, l_i, l_c).expect("losses in range").theta != q {
            neutral += 1;
        }
        let j = closeout_payoff(q, c, Defaulter::Joint, l_i, l_c).expect("losses in range").theta;
        let single = if q >= c { Defaulter::Counterparty } else { Defaulter::Trader };
        if j != closeout_payoff(q, c, single, l_i, l_c).expect("losses in range").theta {
            joint += 1;
        }
    }
    vec![
        Check::at_most("θ ≠ C + recovery", f64::from(decomposition), 0.0),
        Check::at_most("negation symmetry failures", f64::from(negation), 0.0),
        Check::at_most("full-collateral neutralization failures", f64::from(neutral), 0.0),
        Check::at_most("joint-default branch failures", f64::from(joint), 0.0),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn check_ranges() {
        assert!(Check::at_most("x", 1.0, 1.0).passed());
        assert!(!Check::above("x", 3.0, 3.0).passed());
        assert!(Check::within("x", 2.0, 1.5, 3.0).passed());
        assert!(!Check::exact("x", false).passed());
    }

    #[test]
    fn closeout_suite_passes() {
        assert!(closeout_suite(1).iter().all(Check::passed));
    }

    #[test]
    fn unknown_criterion_fails() {
        assert!(!run(12, &VerifyConfig::default()).passed());
    }
}
