//! Versioned JSON scenario files and dispatch to the pricers.
//!
//! Curves are either a number (flat) or `[[t, v], ...]` pairs. Rate pairs are
//! a curve, used for both sides, or `{"lend": .., "borrow": ..}`; funding,
//! collateral and repo pairs default to `r`.

use crate::contracts::{CloseoutSpec, CollateralSpec, Contract, Flow, Payoff};
use crate::error::{Result, XvaError};
use crate::funding::{price_incomplete, price_with_external, ExternalSettings, IncompleteSettings, SyntheticWealth};
use crate::linear::{price_funding_measure, price_instrumental, price_risk_neutral};
use crate::market::{AssetFunding, AssetModel, DefaultModel, DeflatorChoice, RateCurve, RatePair, RateSystem};
use crate::nonlinear::{picard_price, solve_bsde};
use crate::problem::{McConfig, PicardSettings, PricingProblem};
use crate::regression::RegressionBasis;
use crate::report::ValuationReport;
use crate::simulation::ExternalConvention;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CurveSpec {
    Flat(f64),
    Points(Vec<(f64, f64)>),
}

impl CurveSpec {
    pub fn build(&self, horizon: f64) -> Result<RateCurve> {
        match self {
            Self::Flat(v) => RateCurve::flat(*v, horizon),
            Self::Points(p) => RateCurve::new(p, horizon),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PairSpec {
    Single(CurveSpec),
    Split { lend: CurveSpec, borrow: CurveSpec },
}

impl PairSpec {
    pub fn build(&self, horizon: f64) -> Result<RatePair> {
        match self {
            Self::Single(c) => Ok(RatePair::single(c.build(horizon)?)),
            Self::Split { lend, borrow } => RatePair::new(lend.build(horizon)?, borrow.build(horizon)?),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssetSpec {
    pub s0: f64,
    pub sigma: f64,
    #[serde(default = "repo_funded")]
    pub funding: AssetFunding,
}

fn repo_funded() -> AssetFunding {
    AssetFunding::Repo
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalEntitySpec {
    pub lambda: CurveSpec,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefaultsSpec {
    #[serde(default = "zero_curve")]
    pub lambda_i: CurveSpec,
    #[serde(default = "zero_curve")]
    pub lambda_c: CurveSpec,
    #[serde(default)]
    pub recovery_i: f64,
    #[serde(default)]
    pub recovery_c: f64,
    #[serde(default)]
    pub external: Option<ExternalEntitySpec>,
}

fn zero_curve() -> CurveSpec {
    CurveSpec::Flat(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSpec {
    pub horizon: f64,
    pub r: CurveSpec,
    #[serde(default)]
    pub funding: Option<PairSpec>,
    #[serde(default)]
    pub collateral: Option<PairSpec>,
    /// One pair per asset; a single entry applies to every asset.
    #[serde(default)]
    pub repo: Vec<PairSpec>,
    /// Funding spread `s^f` of the incomplete market; absent means the fair
    /// spread `L_I λ^I`.
    #[serde(default)]
    pub funding_spread: Option<CurveSpec>,
    pub assets: Vec<AssetSpec>,
    /// Identity when absent.
    #[serde(default)]
    pub correlation: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub defaults: Option<DefaultsSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub time: f64,
    pub quantity: f64,
    pub payoff: Payoff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractSpec {
    pub maturity: f64,
    pub flows: Vec<FlowSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CollateralBlock {
    /// `C = α π^r(A)`.
    Fraction { alpha: f64 },
    Constant { amount: f64 },
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalFundingSpec {
    pub convention: ExternalConvention,
    /// Bank-wide external position excluding the trade; required under
    /// `net_borrower`.
    #[serde(default)]
    pub bank_position: Option<CurveSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IncompleteSpec {
    pub wealth: [SyntheticWealth; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Linear,
    Nonlinear,
    Incomplete,
    Verify,
}

impl std::str::FromStr for Mode {
    type Err = XvaError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.into()))
            .map_err(|_| XvaError::validation(format!("unknown mode '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Measure {
    Funding,
    RiskFree,
    Instrumental { eta: CurveSpec },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Picard,
    Bsde,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSpec {
    pub mode: Mode,
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
    pub measure: Measure,
    pub solver: Solver,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub damping: f64,
    pub basis: RegressionBasis,
}

impl Default for RunSpec {
    fn default() -> Self {
        let mc = McConfig::default();
        Self {
            mode: Mode::Linear,
            paths: mc.paths,
            steps: mc.steps,
            seed: mc.seed,
            measure: Measure::Funding,
            solver: Solver::Picard,
            tolerance: mc.picard.tolerance,
            max_iterations: mc.picard.max_iterations,
            damping: mc.picard.damping,
            basis: mc.basis,
        }
    }
}

impl RunSpec {
    pub fn mc_config(&self) -> McConfig {
        McConfig {
            paths: self.paths,
            steps: self.steps,
            seed: self.seed,
            basis: self.basis,
            picard: PicardSettings { tolerance: self.tolerance, max_iterations: self.max_iterations, damping: self.damping },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub market: MarketSpec,
    pub contract: ContractSpec,
    #[serde(default)]
    pub collateral: Option<CollateralBlock>,
    #[serde(default)]
    pub closeout: Option<CloseoutSpec>,
    #[serde(default)]
    pub external_funding: Option<ExternalFundingSpec>,
    #[serde(default)]
    pub incomplete: Option<IncompleteSpec>,
    #[serde(default)]
    pub run: RunSpec,
}

const MISSING_COLLATERAL: &str = "collateral block missing; priced uncollateralized (alpha = 0)";

impl Scenario {
    /// Parses a scenario, reporting the offending field path, line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let s: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            XvaError::validation(format!("scenario field '{path}' (line {}, column {}): {inner}", inner.line(), inner.column()))
        })?;
        if s.schema_version != SCHEMA_VERSION {
            return Err(XvaError::validation(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                s.schema_version
            )));
        }
        Ok(s)
    }

    pub fn problem(&self) -> Result<PricingProblem> {
        let m = &self.market;
        let h = m.horizon;
        let n = m.assets.len();
        let r = m.r.build(h)?;
        let pair_or_r = |p: &Option<PairSpec>| p.as_ref().map_or_else(|| Ok(RatePair::single(r.clone())), |p| p.build(h));
        let repo = match m.repo.len() {
            0 => vec![RatePair::single(r.clone()); n],
            1 => vec![m.repo[0].build(h)?; n],
            k if k == n => m.repo.iter().map(|p| p.build(h)).collect::<Result<_>>()?,
            k => return Err(XvaError::validation(format!("{k} repo pairs for {n} assets"))),
        };
        let rates = RateSystem {
            funding: pair_or_r(&m.funding)?,
            collateral: pair_or_r(&m.collateral)?,
            repo,
            funding_spread: m.funding_spread.as_ref().map(|c| c.build(h)).transpose()?,
            r,
        };
        let identity = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let model = AssetModel::new(
            m.assets.iter().map(|a| a.s0).collect(),
            m.assets.iter().map(|a| a.sigma).collect(),
            m.correlation.clone().unwrap_or(identity),
            m.assets.iter().map(|a| a.funding).collect(),
        )?;
        let defaults = match &m.defaults {
            None => DefaultModel::none(h),
            Some(d) => {
                let base = DefaultModel::new(d.lambda_i.build(h)?, d.lambda_c.build(h)?, d.recovery_i, d.recovery_c)?;
                match &d.external {
                    Some(e) => base.with_external(e.lambda.build(h)?, e.loss)?,
                    None => base,
                }
            }
        };
        let flows = self
            .contract
            .flows
            .iter()
            .map(|f| (f.time, Flow { quantity: f.quantity, payoff: f.payoff.clone() }))
            .collect();
        let contract = Contract::new(self.contract.maturity, flows)?;
        let collateral = match &self.collateral {
            None | Some(CollateralBlock::None) => CollateralSpec::none(),
            Some(CollateralBlock::Fraction { alpha }) => CollateralSpec::fraction(*alpha)?,
            Some(CollateralBlock::Constant { amount }) => CollateralSpec::constant(*amount),
        };
        let mut p = PricingProblem::new(model, rates, defaults, contract, collateral)?;
        if let Some(c) = self.closeout {
            p.closeout = c;
        }
        p.validate()?;
        Ok(p)
    }

    fn external_settings(&self, spec: &ExternalFundingSpec) -> Result<ExternalSettings> {
        let bank_position = spec.bank_position.as_ref().map(|c| c.build(self.market.horizon)).transpose()?;
        Ok(ExternalSettings { convention: spec.convention, bank_position })
    }

    /// Runs the pricer selected by the run block. An external-funding block
    /// routes linear and nonlinear modes to the external-funding pricer.
    pub fn price(&self) -> Result<ValuationReport> {
        let problem = self.problem()?;
        let cfg = self.run.mc_config();
        let mut report = match (self.run.mode, &self.external_funding) {
            (Mode::Verify, _) => {
                return Err(XvaError::validation("verify mode runs the acceptance matrix, not a scenario price"))
            }
            (Mode::Incomplete, _) => {
                let settings = self.incomplete.as_ref().map_or_else(IncompleteSettings::default, |i| IncompleteSettings {
                    wealth: i.wealth,
                });
                price_incomplete(&problem, &settings, &cfg)?
            }
            (_, Some(ext)) => price_with_external(&problem, &self.external_settings(ext)?, &cfg)?,
            (Mode::Linear, None) => match &self.run.measure {
                Measure::Funding => price_funding_measure(&problem, &cfg)?,
                Measure::RiskFree => price_risk_neutral(&problem, &cfg)?,
                Measure::Instrumental { eta } => {
                    let choice = DeflatorChoice::flat_instrumental(eta.build(self.market.horizon)?, problem.model.n_assets());
                    price_instrumental(&problem, &choice, &cfg)?
                }
            },
            (Mode::Nonlinear, None) => match self.run.solver {
                Solver::Picard => picard_price(&problem, &cfg)?,
                Solver::Bsde => solve_bsde(&problem, &cfg)?.report,
            },
        };
        if self.collateral.is_none() {
            report.metadata.notes.push(MISSING_COLLATERAL.into());
        }
        Ok(report)
    }
}
