//! Pricing inputs bundled together, and Monte Carlo settings.

use crate::contracts::{CleanModel, CloseoutSpec, CollateralSpec, Contract};
use crate::error::{Result, XvaError};
use crate::market::{AssetModel, DefaultModel, DeflatorChoice, RateSystem};
use crate::regression::RegressionBasis;
use crate::simulation::{simulate, PathEnsemble, SeedPolicy, TimeGrid};

/// Everything that defines one valuation problem.
#[derive(Debug, Clone)]
pub struct PricingProblem {
    pub model: AssetModel,
    pub rates: RateSystem,
    pub defaults: DefaultModel,
    pub contract: Contract,
    pub collateral: CollateralSpec,
    pub closeout: CloseoutSpec,
    /// Scale for absolute tolerances; defaults to the largest initial spot.
    pub notional: f64,
}

impl PricingProblem {
    pub fn new(
        model: AssetModel,
        rates: RateSystem,
        defaults: DefaultModel,
        contract: Contract,
        collateral: CollateralSpec,
    ) -> Result<Self> {
        let notional = model.s0.iter().copied().fold(0.0, f64::max);
        let p = Self { model, rates, defaults, contract, collateral, closeout: CloseoutSpec::RiskFree, notional };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.model.n_assets();
        self.rates.validate(m)?;
        self.defaults.validate()?;
        if self.contract.max_asset().is_some_and(|a| a >= m) {
            return Err(XvaError::validation("contract references an undefined asset"));
        }
        let h = self.rates.horizon();
        if self.contract.maturity > h + 1e-12 {
            return Err(XvaError::validation(format!(
                "maturity {} beyond curve horizon {h}",
                self.contract.maturity
            )));
        }
        if !(self.notional.is_finite() && self.notional > 0.0) {
            return Err(XvaError::validation("notional must be positive"));
        }
        Ok(())
    }

    /// Same problem for the opposite side: `−A`, `−C`, parties swapped.
    pub fn mirrored(&self) -> Self {
        Self {
            contract: self.contract.negated(),
            collateral: self.collateral.negated(),
            defaults: self.defaults.mirrored(),
            ..self.clone()
        }
    }

    /// Risk-free clean valuation: discount `r`, every asset carrying `r`.
    pub fn clean_model(&self) -> CleanModel {
        CleanModel {
            discount: self.rates.r.clone(),
            carry: vec![self.rates.r.clone(); self.model.n_assets()],
            sigma: self.model.sigma.clone(),
        }
    }

    pub fn grid(&self, steps: usize) -> Result<TimeGrid> {
        TimeGrid::new(self.contract.maturity, steps, &self.contract.payment_times())
    }

    pub fn simulate(&self, choice: &DeflatorChoice, cfg: &McConfig) -> Result<PathEnsemble> {
        simulate(&self.model, choice, &self.defaults, &self.grid(cfg.steps)?, &SeedPolicy::new(cfg.seed), cfg.paths)
    }
}

/// Fixed-point iteration controls.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PicardSettings {
    /// Sup-norm stopping tolerance on successive value paths, relative to
    /// the notional.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub damping: f64,
}

impl Default for PicardSettings {
    fn default() -> Self {
        Self { tolerance: 1e-8, max_iterations: 50, damping: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
    pub basis: RegressionBasis,
    pub picard: PicardSettings,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            paths: 100_000,
            steps: 128,
            seed: 20_240_601,
            basis: RegressionBasis::default(),
            picard: PicardSettings::default(),
        }
    }
}

impl McConfig {
    pub fn with_paths(mut self, paths: usize) -> Self {
        self.paths = paths;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}
