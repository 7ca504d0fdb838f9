//! Contract cash flows, collateral rules and the CSA closeout payoff.
//!
//! Values are stated from the trader's side in the canonical orientation:
//! the trader receives the stream `A`. A price that pays the stream is
//! obtained by negating the contract.

use crate::error::{Result, XvaError};
use crate::market::RateCurve;
use statrs::function::erf::erfc;
use std::sync::Arc;

/// Payoff functional of the asset state at a payment date.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payoff {
    Forward { asset: usize, strike: f64 },
    Call { asset: usize, strike: f64 },
    Put { asset: usize, strike: f64 },
    CashOrNothing { asset: usize, strike: f64, cash: f64 },
    Fixed { amount: f64 },
}

impl Payoff {
    pub fn asset(&self) -> Option<usize> {
        match *self {
            Payoff::Forward { asset, .. }
            | Payoff::Call { asset, .. }
            | Payoff::Put { asset, .. }
            | Payoff::CashOrNothing { asset, .. } => Some(asset),
            Payoff::Fixed { .. } => None,
        }
    }

    /// Intrinsic value at the payment date.
    pub fn intrinsic(&self, s: &[f64]) -> f64 {
        match *self {
            Payoff::Forward { asset, strike } => s[asset] - strike,
            Payoff::Call { asset, strike } => (s[asset] - strike).max(0.0),
            Payoff::Put { asset, strike } => (strike - s[asset]).max(0.0),
            Payoff::CashOrNothing { asset, strike, cash } => {
                if s[asset] > strike {
                    cash
                } else {
                    0.0
                }
            }
            Payoff::Fixed { amount } => amount,
        }
    }

    /// Lognormal value given the discount factor to the payment date, the
    /// forward growth factor of the referenced asset and the remaining
    /// total variance.
    fn lognormal_value(&self, s: &[f64], discount: f64, growth: f64, variance: f64) -> f64 {
        match *self {
            Payoff::Fixed { amount } => amount * discount,
            Payoff::Forward { asset, strike } => discount * (s[asset] * growth - strike),
            Payoff::Call { asset, strike } => {
                let fwd = s[asset] * growth;
                if variance <= 0.0 || strike <= 0.0 {
                    return discount * (fwd - strike).max(0.0);
                }
                let (d1, d2) = d12(fwd, strike, variance);
                discount * (fwd * norm_cdf(d1) - strike * norm_cdf(d2))
            }
            Payoff::Put { asset, strike } => {
                let fwd = s[asset] * growth;
                if strike <= 0.0 {
                    return 0.0;
                }
                if variance <= 0.0 {
                    return discount * (strike - fwd).max(0.0);
                }
                let (d1, d2) = d12(fwd, strike, variance);
                discount * (strike * norm_cdf(-d2) - fwd * norm_cdf(-d1))
            }
            Payoff::CashOrNothing { asset, strike, cash } => {
                let fwd = s[asset] * growth;
                if strike <= 0.0 {
                    return discount * cash;
                }
                if variance <= 0.0 {
                    return if fwd > strike { discount * cash } else { 0.0 };
                }
                let (_, d2) = d12(fwd, strike, variance);
                discount * cash * norm_cdf(d2)
            }
        }
    }
}

fn d12(fwd: f64, strike: f64, variance: f64) -> (f64, f64) {
    let sd = variance.sqrt();
    let d1 = ((fwd / strike).ln() + 0.5 * variance) / sd;
    (d1, d1 - sd)
}

/// Standard normal distribution function.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// One flow: `quantity × payoff`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Flow {
    pub quantity: f64,
    pub payoff: Payoff,
}

/// All flows settled at one date.
#[derive(Debug, Clone, PartialEq)]
pub struct PaymentDate {
    pub time: f64,
    pub flows: Vec<Flow>,
}

impl PaymentDate {
    pub fn amount(&self, s: &[f64]) -> f64 {
        self.flows.iter().map(|f| f.quantity * f.payoff.intrinsic(s)).sum()
    }
}

/// The dividend stream `A`: dated payments on `(0, T]`, `A_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Contract {
    pub maturity: f64,
    dates: Vec<PaymentDate>,
}

impl Contract {
    /// Groups `(time, flow)` pairs into payment dates.
    pub fn new(maturity: f64, flows: Vec<(f64, Flow)>) -> Result<Self> {
        if !(maturity.is_finite() && maturity > 0.0) {
            return Err(XvaError::validation("maturity must be positive"));
        }
        let mut dates: Vec<PaymentDate> = Vec::new();
        for (t, flow) in flows {
            if !(t > 0.0 && t <= maturity) {
                return Err(XvaError::validation(format!("payment time {t} outside (0, {maturity}]")));
            }
            if !flow.quantity.is_finite() {
                return Err(XvaError::validation("non-finite quantity"));
            }
            match dates.iter_mut().find(|d| d.time == t) {
                Some(d) => d.flows.push(flow),
                None => dates.push(PaymentDate { time: t, flows: vec![flow] }),
            }
        }
        dates.sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap());
        Ok(Self { maturity, dates })
    }

    /// A single terminal payoff at `maturity`.
    pub fn terminal(maturity: f64, quantity: f64, payoff: Payoff) -> Result<Self> {
        Self::new(maturity, vec![(maturity, Flow { quantity, payoff })])
    }

    pub fn empty(maturity: f64) -> Result<Self> {
        Self::new(maturity, vec![])
    }

    pub fn dates(&self) -> &[PaymentDate] {
        &self.dates
    }

    pub fn payment_times(&self) -> Vec<f64> {
        self.dates.iter().map(|d| d.time).collect()
    }

    /// Highest asset index referenced, if any.
    pub fn max_asset(&self) -> Option<usize> {
        self.dates.iter().flat_map(|d| d.flows.iter().filter_map(|f| f.payoff.asset())).max()
    }

    /// The stream with every quantity negated (`A ↦ -A`).
    pub fn negated(&self) -> Self {
        let dates = self
            .dates
            .iter()
            .map(|d| PaymentDate {
                time: d.time,
                flows: d
                    .flows
                    .iter()
                    .map(|f| Flow { quantity: -f.quantity, payoff: f.payoff.clone() })
                    .collect(),
            })
            .collect();
        Self { maturity: self.maturity, dates }
    }

    /// `ΔA_t` on the state `s`: payments scheduled exactly at `t`.
    pub fn dividend_at(&self, t: f64, s: &[f64]) -> f64 {
        self.dates.iter().filter(|d| d.time == t).map(|d| d.amount(s)).sum()
    }
}

/// Payments strictly before `tau` are kept; later ones are dropped. The
/// bullet at `tau` itself re-enters through the closeout value.
pub fn stop_stream(contract: &Contract, tau: f64) -> Contract {
    Contract {
        maturity: contract.maturity,
        dates: contract.dates.iter().filter(|d| d.time < tau).cloned().collect(),
    }
}

/// Lognormal valuation setting for clean values: discount curve, carry curve
/// per asset and volatilities.
#[derive(Debug, Clone)]
pub struct CleanModel {
    pub discount: RateCurve,
    pub carry: Vec<RateCurve>,
    pub sigma: Vec<f64>,
}

impl CleanModel {
    /// Ex-dividend value at `t` of all payments strictly after `t`.
    pub fn value_ex(&self, contract: &Contract, t: f64, s: &[f64]) -> f64 {
        let mut v = 0.0;
        for d in contract.dates.iter().filter(|d| d.time > t) {
            let discount = (-self.discount.integral(t, d.time)).exp();
            for f in &d.flows {
                let (growth, variance) = match f.payoff.asset() {
                    Some(a) => (
                        self.carry[a].integral(t, d.time).exp(),
                        self.sigma[a] * self.sigma[a] * (d.time - t),
                    ),
                    None => (1.0, 0.0),
                };
                v += f.quantity * f.payoff.lognormal_value(s, discount, growth, variance);
            }
        }
        v
    }

    /// Cum-dividend closeout value `Q_t = ΔA_t + π_t(A)`.
    pub fn value_cum(&self, contract: &Contract, t: f64, s: &[f64]) -> f64 {
        contract.dividend_at(t, s) + self.value_ex(contract, t, s)
    }
}

/// Exogenous collateral functional `(t, S_t, Q_t) -> C_t`.
pub type ExogenousCollateral = Arc<dyn Fn(f64, &[f64], f64) -> f64 + Send + Sync>;

/// Rule producing the collateral amount.
#[derive(Clone)]
pub enum CollateralRule {
    /// `C_t = α·Q_t` with `Q` the clean closeout value.
    Fraction(f64),
    Exogenous(ExogenousCollateral),
}

impl std::fmt::Debug for CollateralRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CollateralRule::Fraction(a) => write!(f, "Fraction({a})"),
            CollateralRule::Exogenous(_) => write!(f, "Exogenous"),
        }
    }
}

/// Collateral agreement. Collateral is always rehypothecable; accrual rates
/// come from the collateral pair of the rate system.
#[derive(Debug, Clone)]
pub struct CollateralSpec {
    pub rule: CollateralRule,
}

impl CollateralSpec {
    pub fn fraction(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() {
            return Err(XvaError::validation("collateral fraction must be finite"));
        }
        Ok(Self { rule: CollateralRule::Fraction(alpha) })
    }

    pub fn none() -> Self {
        Self { rule: CollateralRule::Fraction(0.0) }
    }

    pub fn constant(amount: f64) -> Self {
        Self { rule: CollateralRule::Exogenous(Arc::new(move |_, _, _| amount)) }
    }

    /// Collateral for the negated contract.
    pub fn negated(&self) -> Self {
        match &self.rule {
            CollateralRule::Fraction(a) => Self { rule: CollateralRule::Fraction(*a) },
            CollateralRule::Exogenous(g) => {
                let g = g.clone();
                Self { rule: CollateralRule::Exogenous(Arc::new(move |t, s, q| -g(t, s, -q))) }
            }
        }
    }
}

/// `C_t` for the clean value `q` at time `t` and state `s`.
pub fn collateral_value(rule: &CollateralRule, t: f64, s: &[f64], q: f64) -> f64 {
    match rule {
        CollateralRule::Fraction(alpha) => alpha * q,
        CollateralRule::Exogenous(g) => g(t, s, q),
    }
}

/// Effective collateral accrual rate: borrow rate when the trader holds
/// collateral (`C ≥ 0`), lend rate when it has posted.
pub fn effective_collateral_rate(c: f64, c_lend: f64, c_borrow: f64) -> f64 {
    if c >= 0.0 {
        c_borrow
    } else {
        c_lend
    }
}

/// Closeout valuation convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloseoutSpec {
    /// `Q_τ = ΔA_τ + π^r_τ(A)`.
    RiskFree,
    /// No closeout exchange: `R_τ = -C_{τ-}`, so `θ_τ = 0`.
    Null,
}

/// Party defaulting first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Defaulter {
    Trader,
    Counterparty,
    Joint,
}

impl Defaulter {
    pub fn other(self) -> Self {
        match self {
            Defaulter::Trader => Defaulter::Counterparty,
            Defaulter::Counterparty => Defaulter::Trader,
            Defaulter::Joint => Defaulter::Joint,
        }
    }
}

/// Result of the closeout at the first default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloseoutOutcome {
    pub upsilon: f64,
    pub defaulter: Defaulter,
    pub theta: f64,
    pub recovery: f64,
}

#[inline]
pub fn pos(x: f64) -> f64 {
    x.max(0.0)
}

#[inline]
pub fn neg(x: f64) -> f64 {
    (-x).max(0.0)
}

/// `θ_τ = Q_τ + 1{I}·L_I·Υ⁻ − 1{C}·L_C·Υ⁺` without validation.
#[inline]
pub fn closeout_theta(q: f64, c_pre: f64, defaulter: Defaulter, l_i: f64, l_c: f64) -> f64 {
    let u = q - c_pre;
    match defaulter {
        Defaulter::Trader => q + l_i * neg(u),
        Defaulter::Counterparty => q - l_c * pos(u),
        Defaulter::Joint => q + (l_i * neg(u) - l_c * pos(u)),
    }
}

/// Closeout payoff in the reduced form, with `R_τ = θ_τ − C_{τ-}`.
pub fn closeout_payoff(q: f64, c_pre: f64, defaulter: Defaulter, l_i: f64, l_c: f64) -> Result<CloseoutOutcome> {
    for l in [l_i, l_c] {
        if !(0.0..=1.0).contains(&l) {
            return Err(XvaError::validation(format!("loss given default {l} outside [0, 1]")));
        }
    }
    let theta = closeout_theta(q, c_pre, defaulter, l_i, l_c);
    Ok(CloseoutOutcome { upsilon: q - c_pre, defaulter, theta, recovery: theta - c_pre })
}

/// Recovery payoff `R_τ` as defined by the CSA, from `Υ` and the recovery
/// rates `R_I = 1 − L_I`, `R_C = 1 − L_C`.
pub fn recovery_payoff(upsilon: f64, defaulter: Defaulter, r_i: f64, r_c: f64) -> f64 {
    match defaulter {
        Defaulter::Counterparty => r_c * pos(upsilon) - neg(upsilon),
        Defaulter::Trader => pos(upsilon) - r_i * neg(upsilon),
        Defaulter::Joint => r_c * pos(upsilon) - r_i * neg(upsilon),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call() -> Contract {
        Contract::terminal(1.0, 1.0, Payoff::Call { asset: 0, strike: 100.0 }).unwrap()
    }

    #[test]
    fn stop_stream_rules() {
        let c = Contract::new(
            1.0,
            vec![
                (0.5, Flow { quantity: 1.0, payoff: Payoff::Fixed { amount: 1.0 } }),
                (1.0, Flow { quantity: 1.0, payoff: Payoff::Fixed { amount: 1.0 } }),
            ],
        )
        .unwrap();
        assert_eq!(stop_stream(&c, 2.0).dates().len(), 2);
        assert_eq!(stop_stream(&c, 0.75).payment_times(), vec![0.5]);
        assert!(stop_stream(&c, 0.5).dates().is_empty());
        assert_eq!(c.dividend_at(0.5, &[100.0]), 1.0);
    }

    #[test]
    fn rejects_payments_outside_horizon() {
        let f = Flow { quantity: 1.0, payoff: Payoff::Fixed { amount: 1.0 } };
        assert!(Contract::new(1.0, vec![(0.0, f.clone())]).is_err());
        assert!(Contract::new(1.0, vec![(1.5, f)]).is_err());
    }

    #[test]
    fn collateral_rate_sign_rule() {
        assert_eq!(effective_collateral_rate(10.0, 0.01, 0.02), 0.02);
        assert_eq!(effective_collateral_rate(-10.0, 0.01, 0.02), 0.01);
        assert_eq!(effective_collateral_rate(0.0, 0.01, 0.02), 0.02);
    }

    #[test]
    fn collateral_rules() {
        assert_eq!(collateral_value(&CollateralRule::Fraction(0.8), 0.0, &[1.0], 100.0), 80.0);
        assert_eq!(collateral_value(&CollateralRule::Fraction(0.0), 0.0, &[1.0], 100.0), 0.0);
        assert_eq!(collateral_value(&CollateralRule::Fraction(1.0), 0.0, &[1.0], -50.0), -50.0);
        let c = CollateralSpec::constant(7.0);
        assert_eq!(collateral_value(&c.rule, 0.3, &[1.0], 1.0), 7.0);
        assert_eq!(collateral_value(&c.negated().rule, 0.3, &[1.0], -1.0), -7.0);
    }

    #[test]
    fn closeout_examples() {
        let o = closeout_payoff(100.0, 80.0, Defaulter::Counterparty, 0.6, 0.6).unwrap();
        assert_eq!(o.upsilon, 20.0);
        assert_eq!(o.theta, 88.0);
        assert_eq!(o.recovery, 8.0);
        let o = closeout_payoff(-50.0, -40.0, Defaulter::Trader, 0.6, 0.6).unwrap();
        assert_eq!(o.upsilon, -10.0);
        assert_eq!(o.theta, -44.0);
        let o = closeout_payoff(37.0, 11.0, Defaulter::Trader, 0.0, 0.0).unwrap();
        assert_eq!(o.theta, 37.0);
        assert!(closeout_payoff(1.0, 0.0, Defaulter::Trader, 1.2, 0.0).is_err());
    }

    #[test]
    fn clean_value_of_zero_coupon_and_forward() {
        let r = RateCurve::flat(0.02, 2.0).unwrap();
        let m = CleanModel { discount: r.clone(), carry: vec![r], sigma: vec![0.2] };
        let zc = Contract::terminal(2.0, 1.0, Payoff::Fixed { amount: 1.0 }).unwrap();
        assert!((m.value_ex(&zc, 0.0, &[100.0]) - (-0.04f64).exp()).abs() < 1e-15);
        let fwd = Contract::terminal(2.0, 1.0, Payoff::Forward { asset: 0, strike: 90.0 }).unwrap();
        let v = m.value_ex(&fwd, 0.5, &[100.0]);
        assert!((v - (100.0 - 90.0 * (-0.03f64).exp())).abs() < 1e-12);
        assert_eq!(m.value_ex(&fwd, 2.0, &[100.0]), 0.0);
        assert_eq!(m.value_cum(&fwd, 2.0, &[100.0]), 10.0);
    }

    #[test]
    fn clean_value_put_call_parity() {
        let r = RateCurve::flat(0.03, 1.0).unwrap();
        let m = CleanModel { discount: r.clone(), carry: vec![r], sigma: vec![0.25] };
        let c = m.value_ex(&call(), 0.2, &[95.0]);
        let p = m.value_ex(&Contract::terminal(1.0, 1.0, Payoff::Put { asset: 0, strike: 100.0 }).unwrap(), 0.2, &[95.0]);
        let f = 95.0 - 100.0 * (-0.03f64 * 0.8).exp();
        assert!((c - p - f).abs() < 1e-12);
    }

    #[test]
    fn negation_flips_values_exactly() {
        let r = RateCurve::flat(0.03, 1.0).unwrap();
        let m = CleanModel { discount: r.clone(), carry: vec![r], sigma: vec![0.25] };
        let a = call();
        let v = m.value_ex(&a, 0.3, &[103.0]);
        assert_eq!(m.value_ex(&a.negated(), 0.3, &[103.0]), -v);
        assert_eq!(a.negated().negated(), a);
    }
}
