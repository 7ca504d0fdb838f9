//! Fixed-point iteration on the adjusted-cash-flow representation. Each
//! iteration takes the funding accounts implied by the previous value and
//! hedge paths, re-evaluates the conditional expectations backward by
//! regression, and stops once successive value paths agree in sup norm.

use crate::contracts::{neg, pos, CloseoutSpec};
use crate::error::{Result, XvaError};
use crate::market::{AssetFunding, RateCurve};
use crate::problem::PicardSettings;
use crate::regression::{linear_slopes, Projector, RegressionBasis};
use crate::report::IterationLog;
use crate::simulation::{accumulate_legs, ExternalConvention, Exposure, FundingPaths, LegAccumulator, LegContext, PathEnsemble};
use rayon::prelude::*;

/// Driver terms beyond the funding, repo, collateral and closeout legs.
#[derive(Debug, Clone, Copy)]
pub enum ExtraDriver<'a> {
    None,
    /// Own-default gain or loss on the external funding account.
    External(ExternalConvention),
    /// Net funding/default benefit on the defaultable borrowing account,
    /// driven by `Y = (W − v + C)⁻` with `W` given per path and node.
    Wealth { wealth: &'a [f64], spread: &'a RateCurve },
}

#[derive(Debug, Clone)]
pub struct PicardOutcome {
    pub funding: FundingPaths,
    pub legs: LegAccumulator,
    pub log: Vec<IterationLog>,
    /// Nodes where the account signs implied by the converged solution
    /// differ from those used in the last iteration.
    pub sign_mismatches: usize,
    /// `v_0` from the last backward pass.
    pub backward_value: f64,
}

const COLL_B: usize = 0;
const COLL_L: usize = 1;
const FUND_L: usize = 2;
const FUND_B: usize = 3;
const DEF_I: usize = 4;
const DEF_C: usize = 5;
const EXTRA_A: usize = 6;
const EXTRA_B: usize = 7;
const REPO: usize = 8;

/// Per-cell weights `∫_{t_k}^{t_{k+1}} ρ(u) e^{−∫_{t_k}^u (η+λ)} du` and the
/// cell decay `e^{−∫_{t_k}^{t_{k+1}} (η+λ)}`.
struct Cells {
    decay: Vec<f64>,
    w: Vec<Vec<f64>>,
}

fn cell_weights(rho: &RateCurve, discount: &RateCurve, base: &RateCurve, nodes: &[f64]) -> Vec<f64> {
    nodes
        .windows(2)
        .map(|w| RateCurve::weighted_discount_integral(Some(rho), discount, w[0], w[1]) * base.integral_to(w[0]).exp())
        .collect()
}

fn cells(ens: &PathEnsemble, ctx: &LegContext, extra: &ExtraDriver) -> Result<Cells> {
    let nodes = ens.grid.nodes();
    let eta = &ens.eta;
    let rates = ctx.rates;
    let d = ctx.defaults;
    let base = eta.add(&d.lambda());
    let zero = eta.scale(0.0);
    let mut curves = vec![
        eta.sub(&rates.collateral.borrow),
        eta.sub(&rates.collateral.lend),
        rates.funding.lend.sub(eta),
        rates.funding.borrow.sub(eta),
        d.lambda_i.clone(),
        d.lambda_c.clone(),
    ];
    let (a, b) = match extra {
        ExtraDriver::None => (zero.clone(), zero.clone()),
        ExtraDriver::External(ExternalConvention::NetBorrower) => (d.lambda_i.scale(d.loss_i()), zero.clone()),
        ExtraDriver::External(ExternalConvention::Independent) => {
            let e = d
                .external
                .as_ref()
                .ok_or_else(|| XvaError::validation("independent external convention needs an external lender"))?;
            (d.lambda_i.scale(d.loss_i()), e.lambda.scale(e.loss))
        }
        ExtraDriver::Wealth { spread, .. } => (d.lambda_i.scale(d.loss_i()).sub(spread), zero.clone()),
    };
    curves.push(a);
    curves.push(b);
    for i in 0..ens.n_assets {
        let g = &ens.drift[i];
        match ctx.model.funding[i] {
            AssetFunding::Repo => {
                curves.push(rates.repo[i].lend.sub(g));
                curves.push(rates.repo[i].borrow.sub(g));
            }
            AssetFunding::Treasury => {
                curves.push(eta.sub(g));
                curves.push(eta.sub(g));
            }
        }
    }
    let mut w: Vec<Vec<f64>> = curves.iter().map(|c| cell_weights(c, &base, &base, nodes)).collect();
    if let ExtraDriver::External(ExternalConvention::Independent) = extra {
        // Weighted by the external lender's survival from time zero.
        let e = d.external.as_ref().expect("checked above");
        let with_e = base.add(&e.lambda);
        w[EXTRA_A] = cell_weights(&curves[EXTRA_A], &with_e, &base, nodes);
        w[EXTRA_B] = cell_weights(&curves[EXTRA_B], &with_e, &base, nodes);
    }
    let decay = nodes.windows(2).map(|x| (-base.integral(x[0], x[1])).exp()).collect();
    Ok(Cells { decay, w })
}

/// Asset states of every path at node `k`, row-major.
pub(crate) fn states_at(ens: &PathEnsemble, k: usize) -> Vec<f64> {
    let mut s = Vec::with_capacity(ens.n_paths * ens.n_assets);
    for p in 0..ens.n_paths {
        s.extend_from_slice(ens.spot(p, k));
    }
    s
}

/// Per-node regression designs over node-major states, built once and
/// reused for every target.
pub(crate) struct Regressions<'a> {
    spot: &'a [f64],
    projectors: Vec<Option<Projector>>,
    n_assets: usize,
    n_paths: usize,
}

impl<'a> Regressions<'a> {
    /// `spot` holds the states node-major, `n_paths × n_assets` per node.
    pub(crate) fn new(spot: &'a [f64], n_nodes: usize, n_paths: usize, n_assets: usize, basis: RegressionBasis) -> Result<Self> {
        let mut projectors = vec![None; n_nodes];
        let width = n_paths * n_assets;
        for (k, proj) in projectors.iter_mut().enumerate().take(n_nodes - 1).skip(1) {
            *proj = Some(Projector::new(&spot[k * width..(k + 1) * width], n_assets, basis)?);
        }
        Ok(Self { spot, projectors, n_assets, n_paths })
    }

    fn states(&self, k: usize) -> &[f64] {
        let width = self.n_paths * self.n_assets;
        &self.spot[k * width..(k + 1) * width]
    }

    /// Conditional expectation of `target` (a function of node `k+1`)
    /// given node `k`, with its gradient in the node-`k` state (row-major).
    /// Node 0 is shared by every path, so the mean and the linear slope on
    /// node 1 are used there.
    pub(crate) fn continuation(&self, k: usize, target: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let m = self.n_assets;
        if k == 0 {
            let mean = target.iter().sum::<f64>() / target.len() as f64;
            let slopes = linear_slopes(self.states(1), m, target);
            return Ok((vec![mean; self.n_paths], slopes.repeat(self.n_paths)));
        }
        let proj = self.projectors[k].as_ref().expect("interior node");
        let fit = proj.fit(self.states(k), target)?;
        Ok(fit.evaluate(self.states(k), m))
    }
}

/// Pathwise `λθ` cell term under the configured closeout.
#[inline]
fn closeout_term(cells: &Cells, ctx: &LegContext, k: usize, q: f64, c: f64) -> f64 {
    if ctx.closeout == CloseoutSpec::Null {
        return 0.0;
    }
    let u = q - c;
    let (l_i, l_c) = (ctx.defaults.loss_i(), ctx.defaults.loss_c());
    cells.w[DEF_I][k] * (q + l_i * neg(u)) + cells.w[DEF_C][k] * (q - l_c * pos(u))
}

/// Path-major `[p·n + k]` to node-major `[k·np + p]`, with `width` values
/// per entry.
pub(crate) fn to_node_major(x: &[f64], np: usize, n: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for p in 0..np {
        for k in 0..n {
            let (a, b) = ((p * n + k) * width, (k * np + p) * width);
            out[b..b + width].copy_from_slice(&x[a..a + width]);
        }
    }
    out
}

pub(crate) fn to_path_major(x: &[f64], np: usize, n: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for k in 0..n {
        for p in 0..np {
            let (a, b) = ((k * np + p) * width, (p * n + k) * width);
            out[b..b + width].copy_from_slice(&x[a..a + width]);
        }
    }
    out
}

/// Node-major view of the exposure and asset states.
pub(crate) struct NodeMajor {
    pub(crate) n: usize,
    pub(crate) np: usize,
    pub(crate) m: usize,
    pub(crate) q: Vec<f64>,
    pub(crate) c: Vec<f64>,
    pub(crate) div: Vec<f64>,
    pub(crate) spot: Vec<f64>,
    /// Assets whose hedge is funded through the treasury.
    pub(crate) treasury_assets: Vec<usize>,
}

impl NodeMajor {
    pub(crate) fn new(ens: &PathEnsemble, exposure: &Exposure, ctx: &LegContext) -> Self {
        let (n, np, m) = (ens.n_nodes(), ens.n_paths, ens.n_assets);
        let mut spot = Vec::with_capacity(n * np * m);
        for k in 0..n {
            spot.extend(states_at(ens, k));
        }
        Self {
            n,
            np,
            m,
            q: to_node_major(&exposure.q_ex, np, n, 1),
            c: to_node_major(&exposure.collateral, np, n, 1),
            div: to_node_major(&exposure.dividend, np, n, 1),
            spot,
            treasury_assets: (0..m).filter(|&i| ctx.model.funding[i] == AssetFunding::Treasury).collect(),
        }
    }

    /// Treasury account `F = C − v + Σ_{treasury} F^S_i`, node-major.
    pub(crate) fn treasury(&self, v: &[f64], rc: &[f64]) -> Vec<f64> {
        (0..v.len())
            .map(|j| self.c[j] - v[j] + self.treasury_assets.iter().map(|&i| rc[j * self.m + i]).sum::<f64>())
            .collect()
    }
}

/// Node-major iterate.
struct Iterate {
    v: Vec<f64>,
    rc: Vec<f64>,
    f: Vec<f64>,
}

fn backward(
    nm: &NodeMajor,
    ctx: &LegContext,
    cells: &Cells,
    extra: &ExtraDriver,
    wealth: Option<&[f64]>,
    reg: &Regressions,
    prev: &Iterate,
) -> Result<Iterate> {
    let (n, np, m) = (nm.n, nm.np, nm.m);
    let mut v = vec![0.0; np * n];
    let mut rc = vec![0.0; np * n * m];
    for k in (0..n - 1).rev() {
        let (next, rest) = v.split_at_mut((k + 1) * np);
        let next_v = &rest[..np];
        let div = &nm.div[(k + 1) * np..(k + 2) * np];
        let target: Vec<f64> = next_v.iter().zip(div).map(|(a, b)| a + b).collect();
        let (e, grad) = reg.continuation(k, &target)?;
        let decay = cells.decay[k];
        let w = |i: usize| cells.w[i][k];
        let base = k * np;
        next[base..base + np].par_iter_mut().enumerate().for_each(|(p, out)| {
            let j = base + p;
            let c = nm.c[j];
            let mut x = decay * e[p];
            x += c * if c >= 0.0 { w(COLL_B) } else { w(COLL_L) };
            let f = prev.f[j];
            x += f * if f >= 0.0 { w(FUND_L) } else { w(FUND_B) };
            for i in 0..m {
                let fs = prev.rc[j * m + i];
                x += fs * if fs >= 0.0 { w(REPO + 2 * i) } else { w(REPO + 2 * i + 1) };
            }
            x += closeout_term(cells, ctx, k, nm.q[j], c);
            x += match extra {
                ExtraDriver::None => 0.0,
                ExtraDriver::External(ExternalConvention::NetBorrower) => w(EXTRA_A) * (neg(f) - pos(f)),
                ExtraDriver::External(ExternalConvention::Independent) => w(EXTRA_A) * neg(f) - w(EXTRA_B) * pos(f),
                ExtraDriver::Wealth { .. } => w(EXTRA_A) * neg(wealth.expect("wealth")[j] - prev.v[j] + c),
            };
            *out = x;
        });
        for (q, (r, g)) in rc[base * m..(base + np) * m].iter_mut().zip(nm.spot[base * m..].iter().zip(&grad)) {
            *q = r * g * decay;
        }
    }
    let f = nm.treasury(&v, &rc);
    Ok(Iterate { v, rc, f })
}

fn sign_changes(nm: &NodeMajor, model_funding: &[AssetFunding], a: &Iterate, b: &Iterate) -> usize {
    let m = nm.m;
    let mut count = 0;
    for j in 0..(nm.n - 1) * nm.np {
        let mut differs = (a.f[j] >= 0.0) != (b.f[j] >= 0.0);
        for (i, &fund) in model_funding.iter().enumerate() {
            if fund == AssetFunding::Repo {
                differs |= (a.rc[j * m + i] >= 0.0) != (b.rc[j * m + i] >= 0.0);
            }
        }
        count += usize::from(differs);
    }
    count
}

/// Runs the iteration from the clean value shifted to `start` at time zero,
/// then accumulates the pathwise legs with the converged funding accounts.
#[allow(clippy::too_many_arguments)]
pub fn run(
    ens: &PathEnsemble,
    exposure: &Exposure,
    ctx: &LegContext,
    extra: &ExtraDriver,
    basis: RegressionBasis,
    settings: &PicardSettings,
    notional: f64,
    start: Option<f64>,
) -> Result<PicardOutcome> {
    if let ExtraDriver::Wealth { wealth, .. } = extra {
        if wealth.len() != exposure.q_ex.len() {
            return Err(XvaError::validation("wealth path does not match the ensemble"));
        }
    }
    if !(settings.damping > 0.0 && settings.damping <= 1.0) {
        return Err(XvaError::validation("damping must lie in (0, 1]"));
    }
    let (n, np, m) = (ens.n_nodes(), ens.n_paths, ens.n_assets);
    let cells = cells(ens, ctx, extra)?;
    let nm = NodeMajor::new(ens, exposure, ctx);
    let reg = Regressions::new(&nm.spot, n, np, m, basis)?;
    let wealth = match extra {
        ExtraDriver::Wealth { wealth, .. } => Some(to_node_major(wealth, np, n, 1)),
        _ => None,
    };
    let shift = start.map_or(0.0, |s| s - exposure.q_ex[0]);
    let v0: Vec<f64> = (0..n * np).map(|j| if j >= (n - 1) * np { 0.0 } else { nm.q[j] + shift }).collect();
    let rc0 = vec![0.0; n * np * m];
    let mut cur = Iterate { f: nm.treasury(&v0, &rc0), v: v0, rc: rc0 };
    let mut log = Vec::new();
    let tol = settings.tolerance * notional;
    let mut residual = f64::INFINITY;
    for iteration in 1..=settings.max_iterations {
        let mut next = backward(&nm, ctx, &cells, extra, wealth.as_deref(), &reg, &cur)?;
        residual = next.v.iter().zip(&cur.v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if !residual.is_finite() {
            return Err(XvaError::Numeric("iteration produced a non-finite value".into()));
        }
        let d = settings.damping;
        if d < 1.0 {
            next.v.iter_mut().zip(&cur.v).for_each(|(a, b)| *a = d * *a + (1.0 - d) * b);
            next.rc.iter_mut().zip(&cur.rc).for_each(|(a, b)| *a = d * *a + (1.0 - d) * b);
            next.f = nm.treasury(&next.v, &next.rc);
        }
        log.push(IterationLog { iteration, residual });
        if residual < tol {
            let sign_mismatches = sign_changes(&nm, &ctx.model.funding, &cur, &next);
            let funding = FundingPaths::new(
                ctx.model,
                exposure,
                to_path_major(&next.v, np, n, 1),
                to_path_major(&next.rc, np, n, m),
            );
            let legs = accumulate_legs(ens, exposure, ctx, Some(&funding))?;
            let backward_value = next.v[0];
            return Ok(PicardOutcome { funding, legs, log, sign_mismatches, backward_value });
        }
        cur = next;
    }
    Err(XvaError::NonConvergence { iterations: settings.max_iterations, residual })
}
