//! Path simulation, default times and the discounted cash-flow legs.

use crate::contracts::{collateral_value, neg, pos, CleanModel, CloseoutSpec, CollateralSpec, Contract, Defaulter};
use crate::error::{Result, XvaError};
use crate::market::{drift_under, AssetFunding, AssetModel, DefaultModel, DeflatorChoice, Preset, RateCurve, RateSystem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;

const SNAP: f64 = 1e-9;
const CHUNK: usize = 4096;

/// Simulation nodes: a uniform grid on `[0, T]` refined with payment dates.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    nodes: Vec<f64>,
    steps: usize,
    refined: bool,
}

impl TimeGrid {
    /// `steps` uniform cells, with every time in `extra` inserted as a node
    /// (or snapped onto a node closer than 1e-9).
    pub fn new(horizon: f64, steps: usize, extra: &[f64]) -> Result<Self> {
        if steps == 0 {
            return Err(XvaError::validation("grid needs at least one step"));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(XvaError::validation("grid horizon must be positive"));
        }
        let mut nodes: Vec<f64> = (0..=steps).map(|k| horizon * k as f64 / steps as f64).collect();
        nodes[steps] = horizon;
        let mut refined = false;
        for &t in extra {
            if !(t > 0.0 && t <= horizon) {
                return Err(XvaError::validation(format!("grid time {t} outside (0, {horizon}]")));
            }
            let i = nodes.partition_point(|&x| x < t);
            let near = [i.checked_sub(1), Some(i)]
                .into_iter()
                .flatten()
                .find(|&j| j < nodes.len() && (nodes[j] - t).abs() < SNAP);
            match near {
                Some(0) => return Err(XvaError::validation("grid time too close to 0")),
                Some(j) => nodes[j] = t,
                None => {
                    nodes.insert(i, t);
                    refined = true;
                }
            }
        }
        Ok(Self { nodes, steps, refined })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Index of the node equal to `t`, if any.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        self.nodes.iter().position(|&x| x == t)
    }

    /// Last node strictly before `t` (for `t > 0`).
    pub fn last_before(&self, t: f64) -> usize {
        self.nodes.partition_point(|&x| x < t).saturating_sub(1)
    }

    /// Every `factor`-th node of an unrefined grid.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if self.refined || factor == 0 || !self.steps.is_multiple_of(factor) {
            return Err(XvaError::validation("grid cannot be coarsened by this factor"));
        }
        let nodes = self.nodes.iter().step_by(factor).copied().collect();
        Ok(Self { nodes, steps: self.steps / factor, refined: false })
    }
}

/// Counter-based seeding: the streams of path `p` are a pure function of
/// `(master, p)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedPolicy {
    pub master: u64,
}

impl SeedPolicy {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn asset_rng(&self, path: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        rng.set_stream(path as u64);
        rng
    }

    pub fn default_rng(&self, path: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master ^ 0x9E37_79B9_7F4A_7C15);
        rng.set_stream(path as u64);
        rng
    }
}

/// Default times per path; `f64::INFINITY` when no default occurs before the
/// horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct DefaultTimes {
    pub tau_i: Vec<f64>,
    pub tau_c: Vec<f64>,
    pub tau_e: Vec<f64>,
}

/// Inverse-transform sampling `τ = Λ^{-1}(E)` with unit exponentials drawn
/// independently of the asset drivers.
pub fn sample_default_times(defaults: &DefaultModel, seeds: &SeedPolicy, n_paths: usize) -> DefaultTimes {
    let draw = |lambda: &RateCurve, e: f64| lambda.inverse_integral(e).unwrap_or(f64::INFINITY);
    let rows: Vec<(f64, f64, f64)> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = seeds.default_rng(p);
            let ei: f64 = rng.sample(Exp1);
            let ec: f64 = rng.sample(Exp1);
            let ee: f64 = rng.sample(Exp1);
            let te = defaults.external.as_ref().map_or(f64::INFINITY, |x| draw(&x.lambda, ee));
            (draw(&defaults.lambda_i, ei), draw(&defaults.lambda_c, ec), te)
        })
        .collect();
    DefaultTimes {
        tau_i: rows.iter().map(|r| r.0).collect(),
        tau_c: rows.iter().map(|r| r.1).collect(),
        tau_e: rows.iter().map(|r| r.2).collect(),
    }
}

/// Simulated asset paths and default times under one instrumental measure.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub n_assets: usize,
    spots: Vec<f64>,
    pub tau_i: Vec<f64>,
    pub tau_c: Vec<f64>,
    pub tau_e: Vec<f64>,
    pub eta: RateCurve,
    pub drift: Vec<RateCurve>,
    pub preset: Preset,
    pub seed: u64,
}

/// Exact lognormal stepping with the cell-average drift of `choice`.
pub fn simulate_assets(
    model: &AssetModel,
    choice: &DeflatorChoice,
    grid: &TimeGrid,
    seeds: &SeedPolicy,
    n_paths: usize,
) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return Err(XvaError::validation("need at least one path"));
    }
    let m = model.n_assets();
    let drift: Vec<RateCurve> = (0..m).map(|i| drift_under(choice, i).cloned()).collect::<Result<_>>()?;
    let nodes = grid.nodes();
    let n = nodes.len();
    // Per cell and asset: log-drift and volatility scale.
    let mut mu = vec![0.0; (n - 1) * m];
    let mut vol = vec![0.0; (n - 1) * m];
    for k in 0..n - 1 {
        let dt = nodes[k + 1] - nodes[k];
        for i in 0..m {
            let s = model.sigma[i];
            mu[k * m + i] = drift[i].integral(nodes[k], nodes[k + 1]) - 0.5 * s * s * dt;
            vol[k * m + i] = s * dt.sqrt();
        }
    }
    let chol = model.cholesky();
    let mut spots = vec![0.0; n_paths * n * m];
    spots.par_chunks_mut(n * m).enumerate().for_each(|(p, row)| {
        let mut rng = seeds.asset_rng(p);
        let mut z = vec![0.0; m];
        let mut log_s: Vec<f64> = model.s0.iter().map(|s| s.ln()).collect();
        row[..m].copy_from_slice(&model.s0);
        for k in 0..n - 1 {
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            for i in 0..m {
                let w: f64 = (0..=i).map(|j| chol[i][j] * z[j]).sum();
                log_s[i] += mu[k * m + i] + vol[k * m + i] * w;
                row[(k + 1) * m + i] = log_s[i].exp();
            }
        }
    });
    Ok(PathEnsemble {
        grid: grid.clone(),
        n_paths,
        n_assets: m,
        spots,
        tau_i: vec![f64::INFINITY; n_paths],
        tau_c: vec![f64::INFINITY; n_paths],
        tau_e: vec![f64::INFINITY; n_paths],
        eta: choice.eta.clone(),
        drift,
        preset: choice.preset,
        seed: seeds.master,
    })
}

/// Assets and default times in one call.
pub fn simulate(
    model: &AssetModel,
    choice: &DeflatorChoice,
    defaults: &DefaultModel,
    grid: &TimeGrid,
    seeds: &SeedPolicy,
    n_paths: usize,
) -> Result<PathEnsemble> {
    defaults.validate()?;
    let ens = simulate_assets(model, choice, grid, seeds, n_paths)?;
    Ok(ens.with_defaults(sample_default_times(defaults, seeds, n_paths)))
}

impl PathEnsemble {
    pub fn with_defaults(mut self, times: DefaultTimes) -> Self {
        assert_eq!(times.tau_i.len(), self.n_paths);
        self.tau_i = times.tau_i;
        self.tau_c = times.tau_c;
        self.tau_e = times.tau_e;
        self
    }

    pub fn n_nodes(&self) -> usize {
        self.grid.len()
    }

    /// Asset vector on path `p` at node `k`.
    pub fn spot(&self, p: usize, k: usize) -> &[f64] {
        let m = self.n_assets;
        let at = (p * self.n_nodes() + k) * m;
        &self.spots[at..at + m]
    }

    /// First default time `τ = τ_I ∧ τ_C`.
    pub fn tau(&self, p: usize) -> f64 {
        self.tau_i[p].min(self.tau_c[p])
    }

    /// First defaulter if `τ ≤ T`.
    pub fn defaulter(&self, p: usize) -> Option<Defaulter> {
        let (ti, tc) = (self.tau_i[p], self.tau_c[p]);
        if ti.min(tc) > self.grid.horizon() {
            return None;
        }
        Some(if ti < tc {
            Defaulter::Trader
        } else if tc < ti {
            Defaulter::Counterparty
        } else {
            Defaulter::Joint
        })
    }

    /// Same asset paths with the roles of the two parties swapped.
    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        std::mem::swap(&mut out.tau_i, &mut out.tau_c);
        out
    }

    /// Nested coarse ensemble on every `factor`-th node (common random numbers).
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let grid = self.grid.coarsen(factor)?;
        let (n, nc, m) = (self.n_nodes(), grid.len(), self.n_assets);
        let mut spots = Vec::with_capacity(self.n_paths * nc * m);
        for p in 0..self.n_paths {
            for k in (0..n).step_by(factor) {
                spots.extend_from_slice(&self.spots[(p * n + k) * m..(p * n + k + 1) * m]);
            }
        }
        Ok(Self { grid, spots, ..self.clone() })
    }

    /// `exp(-∫_0^{t_k} η)` for every node.
    pub fn node_discounts(&self) -> Vec<f64> {
        self.grid.nodes().iter().map(|&t| (-self.eta.integral_to(t)).exp()).collect()
    }
}

/// Mean and standard error with a fixed summation order.
pub fn mean_se(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let sum: f64 = x.chunks(CHUNK).map(|c| c.iter().sum::<f64>()).sum();
    let mean = sum / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = x.chunks(CHUNK).map(|c| c.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()).sum();
    (mean, (ss / (n - 1) as f64 / n as f64).sqrt())
}

/// Clean closeout values, dividends and collateral at every path node.
#[derive(Debug, Clone)]
pub struct Exposure {
    pub n_nodes: usize,
    /// Ex-dividend clean value `π^r_{t_k}(A)`.
    pub q_ex: Vec<f64>,
    /// `ΔA_{t_k}`.
    pub dividend: Vec<f64>,
    /// `C_{t_k}` computed from the ex-dividend clean value.
    pub collateral: Vec<f64>,
    /// Discount curve of the clean model, used to interpolate `Q_τ`.
    pub discount: RateCurve,
}

impl Exposure {
    #[inline]
    pub fn at(&self, p: usize, k: usize) -> usize {
        p * self.n_nodes + k
    }

    /// Cum-dividend `Q_{t_k}`.
    pub fn q_cum(&self, p: usize, k: usize) -> f64 {
        let j = self.at(p, k);
        self.dividend[j] + self.q_ex[j]
    }
}

pub fn exposure(
    ens: &PathEnsemble,
    contract: &Contract,
    collateral: &CollateralSpec,
    clean: &CleanModel,
) -> Result<Exposure> {
    if contract.max_asset().is_some_and(|a| a >= ens.n_assets) {
        return Err(XvaError::validation("contract references an undefined asset"));
    }
    for t in contract.payment_times() {
        if ens.grid.index_of(t).is_none() {
            return Err(XvaError::validation(format!("payment time {t} is not a grid node")));
        }
    }
    let n = ens.n_nodes();
    let nodes = ens.grid.nodes();
    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..ens.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut q = vec![0.0; n];
            let mut d = vec![0.0; n];
            let mut c = vec![0.0; n];
            for k in 0..n {
                let s = ens.spot(p, k);
                q[k] = clean.value_ex(contract, nodes[k], s);
                d[k] = contract.dividend_at(nodes[k], s);
                c[k] = collateral_value(&collateral.rule, nodes[k], s, q[k]);
            }
            (q, d, c)
        })
        .collect();
    let mut out = Exposure {
        n_nodes: n,
        q_ex: Vec::with_capacity(n * ens.n_paths),
        dividend: Vec::with_capacity(n * ens.n_paths),
        collateral: Vec::with_capacity(n * ens.n_paths),
        discount: clean.discount.clone(),
    };
    for (q, d, c) in rows {
        out.q_ex.extend(q);
        out.dividend.extend(d);
        out.collateral.extend(c);
    }
    Ok(out)
}

/// Value at `τ` inside cell `k` by linear interpolation of the discounted
/// ex-dividend value at `t_k` and the cum-dividend value at `t_{k+1}`.
pub fn interpolate_at_default(discount: &RateCurve, nodes: &[f64], k: usize, tau: f64, left: f64, right: f64) -> f64 {
    let (a, b) = (nodes[k], nodes[k + 1]);
    let w = (tau - a) / (b - a);
    let da = (-discount.integral_to(a)).exp();
    let db = (-discount.integral_to(b)).exp();
    let dt = (-discount.integral_to(tau)).exp();
    ((1.0 - w) * da * left + w * db * right) / dt
}

/// Funding-account state supplied by a pricer: pre-default value `v`,
/// per-asset repo cash `F^S_i = S^i ∂v/∂S^i` and the treasury account
/// `F = C − v + Σ_{treasury} F^S_i`.
#[derive(Debug, Clone)]
pub struct FundingPaths {
    pub n_nodes: usize,
    pub n_assets: usize,
    pub v: Vec<f64>,
    pub repo_cash: Vec<f64>,
    pub treasury: Vec<f64>,
}

impl FundingPaths {
    pub fn new(model: &AssetModel, exposure: &Exposure, v: Vec<f64>, repo_cash: Vec<f64>) -> Self {
        let m = model.n_assets();
        let n = exposure.n_nodes;
        let treasury = (0..v.len())
            .map(|j| {
                let extra: f64 = (0..m)
                    .filter(|&i| model.funding[i] == AssetFunding::Treasury)
                    .map(|i| repo_cash[j * m + i])
                    .sum();
                exposure.collateral[j] - v[j] + extra
            })
            .collect();
        Self { n_nodes: n, n_assets: m, v, repo_cash, treasury }
    }

    /// `F_τ` with `v_τ` interpolated like the clean value and collateral
    /// frozen at the last node before `τ`.
    pub fn at_default(&self, ens: &PathEnsemble, exposure: &Exposure, p: usize, tau: f64) -> f64 {
        let nodes = ens.grid.nodes();
        let k = ens.grid.last_before(tau);
        let j = p * self.n_nodes + k;
        let v_tau = interpolate_at_default(
            &exposure.discount,
            nodes,
            k,
            tau,
            self.v[j],
            self.v[j + 1] + exposure.dividend[j + 1],
        );
        // Treasury-funded hedge cash is held at its last rebalancing value.
        let extra = self.treasury[j] - exposure.collateral[j] + self.v[j];
        exposure.collateral[j] - v_tau + extra
    }
}

/// Per-path discounted legs, each stopped at `τ̄ = τ ∧ T`.
#[derive(Debug, Clone, Default)]
pub struct LegAccumulator {
    /// Promised flows `Π` strictly before `τ`.
    pub promised: Vec<f64>,
    /// `1{τ≤T} D(0,τ) Q_τ`.
    pub closeout: Vec<f64>,
    /// `1{τ=τ_C≤T} D(0,τ) L_C Υ⁺`.
    pub cva: Vec<f64>,
    /// `1{τ=τ_I≤T} D(0,τ) L_I Υ⁻`.
    pub dva: Vec<f64>,
    /// `∫ D (η − c̄) C`.
    pub collateral: Vec<f64>,
    /// `∫ D (f^l − η) F⁺`.
    pub fba_f: Vec<f64>,
    /// `∫ D (f^b − η) F⁻`.
    pub fca_f: Vec<f64>,
    /// `∫ D (h^{i,l} − γ^i) (F^S_i)⁺` per asset (for treasury-funded assets,
    /// the signed carry `∫ D (η − γ^i) F^S_i`).
    pub fba_h: Vec<Vec<f64>>,
    /// `∫ D (h^{i,b} − γ^i) (F^S_i)⁻` per asset.
    pub fca_h: Vec<Vec<f64>>,
}

impl LegAccumulator {
    pub fn n_paths(&self) -> usize {
        self.promised.len()
    }

    pub fn fva_f(&self, p: usize) -> f64 {
        self.fba_f[p] - self.fca_f[p]
    }

    pub fn fva_h(&self, i: usize, p: usize) -> f64 {
        self.fba_h[i][p] - self.fca_h[i][p]
    }

    /// Pathwise price `Π + γ + φ_f + Σφ_h + ϑ`.
    pub fn total(&self, p: usize) -> f64 {
        let mut t = self.promised[p] + self.closeout[p] - self.cva[p] + self.dva[p] + self.collateral[p];
        t += self.fva_f(p);
        for i in 0..self.fba_h.len() {
            t += self.fva_h(i, p);
        }
        t
    }

    pub fn totals(&self) -> Vec<f64> {
        (0..self.n_paths()).map(|p| self.total(p)).collect()
    }
}

/// Model inputs shared by leg accumulation.
#[derive(Debug, Clone, Copy)]
pub struct LegContext<'a> {
    pub model: &'a AssetModel,
    pub rates: &'a RateSystem,
    pub defaults: &'a DefaultModel,
    pub closeout: CloseoutSpec,
}

/// `∫_{t_k}^{t_{k+1}} ρ(u) D_η(0,u) du` for each cell and each tabulated `ρ`.
struct WeightTable<'a> {
    eta: &'a RateCurve,
    nodes: &'a [f64],
    curves: Vec<RateCurve>,
    full: Vec<Vec<f64>>,
}

impl<'a> WeightTable<'a> {
    fn new(eta: &'a RateCurve, nodes: &'a [f64], curves: Vec<RateCurve>) -> Self {
        let full = curves
            .iter()
            .map(|c| {
                nodes.windows(2).map(|w| RateCurve::weighted_discount_integral(Some(c), eta, w[0], w[1])).collect()
            })
            .collect();
        Self { eta, nodes, curves, full }
    }

    #[inline]
    fn get(&self, curve: usize, k: usize, end: f64) -> f64 {
        if end >= self.nodes[k + 1] {
            self.full[curve][k]
        } else {
            RateCurve::weighted_discount_integral(Some(&self.curves[curve]), self.eta, self.nodes[k], end)
        }
    }
}

const W_COLL_B: usize = 0;
const W_COLL_L: usize = 1;
const W_FUND_L: usize = 2;
const W_FUND_B: usize = 3;
const W_REPO: usize = 4;

/// Accumulates every leg path by path. Funding legs are zero when
/// `funding` is `None`.
pub fn accumulate_legs(
    ens: &PathEnsemble,
    exposure: &Exposure,
    ctx: &LegContext,
    funding: Option<&FundingPaths>,
) -> Result<LegAccumulator> {
    let n = ens.n_nodes();
    if exposure.n_nodes != n || exposure.q_ex.len() != n * ens.n_paths {
        return Err(XvaError::validation("exposure does not match the ensemble"));
    }
    if let Some(f) = funding {
        if f.v.len() != n * ens.n_paths || f.n_assets != ens.n_assets {
            return Err(XvaError::validation("funding paths do not match the ensemble"));
        }
    }
    let m = ens.n_assets;
    let eta = &ens.eta;
    let rates = ctx.rates;
    let mut curves = vec![
        eta.sub(&rates.collateral.borrow),
        eta.sub(&rates.collateral.lend),
        rates.funding.lend.sub(eta),
        rates.funding.borrow.sub(eta),
    ];
    for i in 0..m {
        match ctx.model.funding[i] {
            AssetFunding::Repo => {
                curves.push(rates.repo[i].lend.sub(&ens.drift[i]));
                curves.push(rates.repo[i].borrow.sub(&ens.drift[i]));
            }
            AssetFunding::Treasury => {
                curves.push(eta.sub(&ens.drift[i]));
                curves.push(eta.sub(&ens.drift[i]));
            }
        }
    }
    let nodes = ens.grid.nodes();
    let table = WeightTable::new(eta, nodes, curves);
    let disc = ens.node_discounts();
    let horizon = ens.grid.horizon();
    let (l_i, l_c) = (ctx.defaults.loss_i(), ctx.defaults.loss_c());

    struct Row {
        promised: f64,
        closeout: f64,
        cva: f64,
        dva: f64,
        collateral: f64,
        fba_f: f64,
        fca_f: f64,
        fba_h: Vec<f64>,
        fca_h: Vec<f64>,
    }

    let rows: Vec<Row> = (0..ens.n_paths)
        .into_par_iter()
        .map(|p| {
            let tau = ens.tau(p);
            let stop = tau.min(horizon);
            let mut r = Row {
                promised: 0.0,
                closeout: 0.0,
                cva: 0.0,
                dva: 0.0,
                collateral: 0.0,
                fba_f: 0.0,
                fca_f: 0.0,
                fba_h: vec![0.0; m],
                fca_h: vec![0.0; m],
            };
            for k in 0..n - 1 {
                if nodes[k] >= stop {
                    break;
                }
                let end = nodes[k + 1].min(stop);
                let j = exposure.at(p, k);
                let c = exposure.collateral[j];
                if c != 0.0 {
                    let w = if c >= 0.0 { W_COLL_B } else { W_COLL_L };
                    r.collateral += c * table.get(w, k, end);
                }
                if let Some(f) = funding {
                    let fk = f.treasury[j];
                    if fk >= 0.0 {
                        r.fba_f += fk * table.get(W_FUND_L, k, end);
                    } else {
                        r.fca_f += -fk * table.get(W_FUND_B, k, end);
                    }
                    for i in 0..m {
                        let x = f.repo_cash[j * m + i];
                        if ctx.model.funding[i] == AssetFunding::Treasury || x >= 0.0 {
                            r.fba_h[i] += x * table.get(W_REPO + 2 * i, k, end);
                        } else {
                            r.fca_h[i] += -x * table.get(W_REPO + 2 * i + 1, k, end);
                        }
                    }
                }
                if nodes[k + 1] < tau {
                    r.promised += disc[k + 1] * exposure.dividend[j + 1];
                }
            }
            if tau <= horizon && ctx.closeout == CloseoutSpec::RiskFree {
                let k = ens.grid.last_before(tau);
                let j = exposure.at(p, k);
                let q = interpolate_at_default(
                    &exposure.discount,
                    nodes,
                    k,
                    tau,
                    exposure.q_ex[j],
                    exposure.q_cum(p, k + 1),
                );
                let d = (-eta.integral_to(tau)).exp();
                let u = q - exposure.collateral[j];
                r.closeout = d * q;
                match ens.defaulter(p) {
                    Some(Defaulter::Trader) => r.dva = d * l_i * neg(u),
                    Some(Defaulter::Counterparty) => r.cva = d * l_c * pos(u),
                    Some(Defaulter::Joint) => {
                        r.dva = d * l_i * neg(u);
                        r.cva = d * l_c * pos(u);
                    }
                    None => {}
                }
            }
            r
        })
        .collect();

    let mut out = LegAccumulator {
        fba_h: vec![Vec::with_capacity(ens.n_paths); m],
        fca_h: vec![Vec::with_capacity(ens.n_paths); m],
        ..Default::default()
    };
    for r in rows {
        out.promised.push(r.promised);
        out.closeout.push(r.closeout);
        out.cva.push(r.cva);
        out.dva.push(r.dva);
        out.collateral.push(r.collateral);
        out.fba_f.push(r.fba_f);
        out.fca_f.push(r.fca_f);
        for i in 0..m {
            out.fba_h[i].push(r.fba_h[i]);
            out.fca_h[i].push(r.fca_h[i]);
        }
    }
    Ok(out)
}

/// Convention for the external funding default legs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExternalConvention {
    /// External lender `E` may default independently.
    Independent,
    /// The bank is always a net borrower; `E` does not default.
    NetBorrower,
}

/// Per-path external funding legs, both nonnegative. Under `Independent`
/// these are `(DVA^f, CVA^f)`; under `NetBorrower` `(DVA^{f,−}, DVA^{f,+})`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalLegs {
    pub convention: ExternalConvention,
    pub benefit: Vec<f64>,
    pub cost: Vec<f64>,
}

impl ExternalLegs {
    /// `ψ` per path.
    pub fn psi(&self) -> Vec<f64> {
        self.benefit.iter().zip(&self.cost).map(|(b, c)| b - c).collect()
    }
}

pub fn external_leg(
    ens: &PathEnsemble,
    exposure: &Exposure,
    funding: &FundingPaths,
    defaults: &DefaultModel,
    convention: ExternalConvention,
) -> Result<ExternalLegs> {
    let horizon = ens.grid.horizon();
    if convention == ExternalConvention::NetBorrower && ens.tau_e.iter().any(|t| t.is_finite()) {
        return Err(XvaError::validation("net-borrower convention requires a non-defaultable lender"));
    }
    let l_i = defaults.loss_i();
    let l_e = defaults.external.as_ref().map_or(0.0, |e| e.loss);
    let rows: Vec<(f64, f64)> = (0..ens.n_paths)
        .into_par_iter()
        .map(|p| {
            let tau = ens.tau(p);
            let te = ens.tau_e[p];
            match convention {
                ExternalConvention::NetBorrower => {
                    if ens.tau_i[p] < ens.tau_c[p] && tau <= horizon {
                        let f = funding.at_default(ens, exposure, p, tau);
                        let d = (-ens.eta.integral_to(tau)).exp();
                        (d * l_i * neg(f), d * l_i * pos(f))
                    } else {
                        (0.0, 0.0)
                    }
                }
                ExternalConvention::Independent => {
                    let first = tau.min(te);
                    if first > horizon {
                        (0.0, 0.0)
                    } else if ens.tau_i[p] == first {
                        let f = funding.at_default(ens, exposure, p, first);
                        ((-ens.eta.integral_to(first)).exp() * l_i * neg(f), 0.0)
                    } else if te == first && te < tau {
                        let f = funding.at_default(ens, exposure, p, te);
                        (0.0, (-ens.eta.integral_to(te)).exp() * l_e * pos(f))
                    } else {
                        (0.0, 0.0)
                    }
                }
            }
        })
        .collect();
    Ok(ExternalLegs {
        convention,
        benefit: rows.iter().map(|r| r.0).collect(),
        cost: rows.iter().map(|r| r.1).collect(),
    })
}
