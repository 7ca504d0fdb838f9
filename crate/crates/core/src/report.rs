//! Valuation report and its JSON / CSV renderings.

use crate::error::{Result, XvaError};
use crate::market::Preset;
use crate::simulation::{mean_se, LegAccumulator};
use serde::{Deserialize, Serialize};

/// Mean and standard error of one leg.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    pub fn of(values: &[f64]) -> Self {
        let (mean, se) = mean_se(values);
        Self { mean, se }
    }
}

/// Adjustment terms in the receive-`A` orientation: CVA reduces value, DVA
/// increases it, FVA and LVA are signed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Adjustments {
    /// Promised flows plus `1{τ≤T} D Q_τ` on the same paths.
    pub clean_leg: Estimate,
    pub cva: Estimate,
    pub dva: Estimate,
    pub lva: Estimate,
    pub fva_f: Estimate,
    pub fba_f: Estimate,
    pub fca_f: Estimate,
    /// Per asset.
    pub fva_h: Vec<Estimate>,
    pub fba_h: Vec<Estimate>,
    pub fca_h: Vec<Estimate>,
    /// `price − (clean_leg + LVA + DVA − CVA + FVA^f + ΣFVA^h)`.
    pub identity_residual: f64,
}

/// External funding default legs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalSplits {
    pub convention: String,
    /// `DVA^f` or `DVA^{f,−}`.
    pub benefit: Estimate,
    /// `CVA^f` or `DVA^{f,+}`.
    pub cost: Estimate,
    /// Special case detected from the payoff sign, if any.
    pub special_case: Option<String>,
    /// Nodes where the bank-wide net-borrower condition fails.
    pub violations: usize,
    /// `ψ + FVA^f` per path: external default legs plus treasury funding.
    pub net_funding_benefit: Estimate,
}

/// Net funding/default benefit on the defaultable borrowing account.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetBenefit {
    pub monte_carlo: Estimate,
    /// Intensity-marginalized value used in the price.
    pub marginalized: f64,
    /// Largest `|L_I λ^I(t) − s^f(t)|` over the grid.
    pub max_abs_integrand: f64,
    /// Price difference between two wealth paths, when both were priced.
    pub wealth_gap: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metadata {
    pub method: String,
    pub preset: Option<Preset>,
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
    pub notional: f64,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValuationReport {
    pub price: f64,
    pub std_error: f64,
    /// Analytic risk-free clean price `π^r_0(A)`.
    pub clean: f64,
    pub adjustments: Adjustments,
    pub external: Option<ExternalSplits>,
    pub net_benefit: Option<NetBenefit>,
    pub convergence: Vec<IterationLog>,
    /// Nodes where the effective rates implied by the converged solution
    /// differ from those used in the final iteration.
    pub sign_mismatches: usize,
    pub metadata: Metadata,
}

/// Splits per-path legs into the adjustment table. `extra` holds further
/// pathwise legs (external funding, net benefit) added to the price.
/// Returns the price estimate and the adjustments.
pub fn decompose(legs: &LegAccumulator, extra: &[&[f64]]) -> Result<(Estimate, Adjustments)> {
    let n = legs.n_paths();
    if extra.iter().any(|x| x.len() != n) {
        return Err(XvaError::validation("legs come from different ensembles"));
    }
    let clean: Vec<f64> = (0..n).map(|p| legs.promised[p] + legs.closeout[p]).collect();
    let fva_f: Vec<f64> = (0..n).map(|p| legs.fva_f(p)).collect();
    let m = legs.fba_h.len();
    let fva_h: Vec<Vec<f64>> = (0..m).map(|i| (0..n).map(|p| legs.fva_h(i, p)).collect()).collect();
    let totals: Vec<f64> = (0..n).map(|p| legs.total(p) + extra.iter().map(|x| x[p]).sum::<f64>()).collect();
    let price = Estimate::of(&totals);
    let a = Adjustments {
        clean_leg: Estimate::of(&clean),
        cva: Estimate::of(&legs.cva),
        dva: Estimate::of(&legs.dva),
        lva: Estimate::of(&legs.collateral),
        fva_f: Estimate::of(&fva_f),
        fba_f: Estimate::of(&legs.fba_f),
        fca_f: Estimate::of(&legs.fca_f),
        fva_h: fva_h.iter().map(|x| Estimate::of(x)).collect(),
        fba_h: legs.fba_h.iter().map(|x| Estimate::of(x)).collect(),
        fca_h: legs.fca_h.iter().map(|x| Estimate::of(x)).collect(),
        identity_residual: 0.0,
    };
    let sum = a.clean_leg.mean + a.lva.mean + a.dva.mean - a.cva.mean
        + a.fva_f.mean
        + a.fva_h.iter().map(|e| e.mean).sum::<f64>()
        + extra.iter().map(|x| Estimate::of(x).mean).sum::<f64>();
    Ok((price, Adjustments { identity_residual: price.mean - sum, ..a }))
}

impl ValuationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `term,mean,se` rows of the adjustment table.
    pub fn to_csv(&self) -> String {
        let a = &self.adjustments;
        let mut rows = vec![
            ("price".to_string(), Estimate { mean: self.price, se: self.std_error }),
            ("clean".to_string(), Estimate { mean: self.clean, se: 0.0 }),
            ("clean_leg".to_string(), a.clean_leg),
            ("cva".to_string(), a.cva),
            ("dva".to_string(), a.dva),
            ("lva".to_string(), a.lva),
            ("fva_f".to_string(), a.fva_f),
            ("fba_f".to_string(), a.fba_f),
            ("fca_f".to_string(), a.fca_f),
        ];
        for (i, e) in a.fva_h.iter().enumerate() {
            rows.push((format!("fva_h_{i}"), *e));
            rows.push((format!("fba_h_{i}"), a.fba_h.get(i).copied().unwrap_or_default()));
            rows.push((format!("fca_h_{i}"), a.fca_h.get(i).copied().unwrap_or_default()));
        }
        if let Some(x) = &self.external {
            rows.push(("external_benefit".to_string(), x.benefit));
            rows.push(("external_cost".to_string(), x.cost));
        }
        if let Some(j) = &self.net_benefit {
            rows.push(("net_benefit_mc".to_string(), j.monte_carlo));
            rows.push(("net_benefit_marginalized".to_string(), Estimate { mean: j.marginalized, se: 0.0 }));
        }
        let mut out = String::from("term,mean,se\n");
        for (name, e) in rows {
            out.push_str(&format!("{name},{:.12e},{:.12e}\n", e.mean, e.se));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let r = ValuationReport {
            price: 1.5,
            std_error: 0.01,
            adjustments: Adjustments { fva_h: vec![Estimate { mean: 0.1, se: 0.0 }], ..Default::default() },
            metadata: Metadata { method: "test".into(), preset: Some(Preset::Funding), ..Default::default() },
            ..Default::default()
        };
        let back: ValuationReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_csv().starts_with("term,mean,se\nprice,"));
    }
}
