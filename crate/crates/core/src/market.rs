//! Rate curves, asset and default models, and the instrumental measures.
//!
//! Every curve is deterministic and piecewise constant on right-open
//! segments, with the last value extended flat to the horizon. Rates are
//! continuously compounded per annum; times are year fractions.

use crate::error::{Result, XvaError};

const HORIZON_SLACK: f64 = 1e-12;

/// Piecewise-constant curve `t -> value` on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateCurve {
    times: Vec<f64>,
    values: Vec<f64>,
    /// `cumulative[i]` is the integral of the curve over `[0, times[i]]`.
    cumulative: Vec<f64>,
    horizon: f64,
}

impl RateCurve {
    /// Builds a curve from `(time, value)` pairs. The first time must be 0.
    pub fn new(points: &[(f64, f64)], horizon: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(XvaError::validation("curve needs at least one point"));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(XvaError::validation(format!("invalid horizon {horizon}")));
        }
        if points[0].0 != 0.0 {
            return Err(XvaError::validation("curve must start at t = 0"));
        }
        for w in points.windows(2) {
            if w[1].0 <= w[0].0 || w[1].0.is_nan() {
                return Err(XvaError::validation("curve breakpoints must be strictly increasing"));
            }
        }
        if points.iter().any(|&(t, v)| !t.is_finite() || !v.is_finite()) {
            return Err(XvaError::validation("curve contains non-finite entries"));
        }
        let times: Vec<f64> = points.iter().map(|p| p.0).collect();
        let values: Vec<f64> = points.iter().map(|p| p.1).collect();
        let mut cumulative = Vec::with_capacity(times.len());
        cumulative.push(0.0);
        for i in 1..times.len() {
            let prev = cumulative[i - 1];
            cumulative.push(prev + values[i - 1] * (times[i] - times[i - 1]));
        }
        Ok(Self { times, values, cumulative, horizon })
    }

    pub fn flat(value: f64, horizon: f64) -> Result<Self> {
        Self::new(&[(0.0, value)], horizon)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn points(&self) -> Vec<(f64, f64)> {
        self.times.iter().copied().zip(self.values.iter().copied()).collect()
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.times
    }

    fn segment(&self, t: f64) -> usize {
        // last i with times[i] <= t
        match self.times.partition_point(|&x| x <= t) {
            0 => 0,
            n => n - 1,
        }
    }

    /// Curve value at `t`.
    pub fn value(&self, t: f64) -> f64 {
        self.values[self.segment(t)]
    }

    /// `∫_0^t` of the curve.
    pub fn integral_to(&self, t: f64) -> f64 {
        let i = self.segment(t);
        self.cumulative[i] + self.values[i] * (t - self.times[i])
    }

    /// `∫_a^b` of the curve, exact for the piecewise-constant shape.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        self.integral_to(b) - self.integral_to(a)
    }

    /// Smallest `t` with `∫_0^t = target`, or `None` if the integral stays
    /// below `target` up to the horizon.
    pub fn inverse_integral(&self, target: f64) -> Option<f64> {
        if target <= 0.0 {
            return Some(0.0);
        }
        if self.integral_to(self.horizon) < target {
            return None;
        }
        let n = self.times.len();
        for i in 0..n {
            let end = if i + 1 < n { self.times[i + 1].min(self.horizon) } else { self.horizon };
            let start = self.times[i];
            if start >= self.horizon {
                break;
            }
            let at_end = self.cumulative[i] + self.values[i] * (end - start);
            if at_end >= target && self.values[i] > 0.0 {
                let t = start + (target - self.cumulative[i]) / self.values[i];
                return Some(t.min(end));
            }
        }
        None
    }

    pub fn is_nonnegative(&self) -> bool {
        self.values.iter().all(|&v| v >= 0.0)
    }

    /// Pointwise combination `a·self + b·other` on the union of breakpoints.
    pub fn combine(&self, a: f64, other: &RateCurve, b: f64) -> RateCurve {
        let mut times: Vec<f64> = self.times.iter().chain(other.times.iter()).copied().collect();
        times.sort_by(|x, y| x.partial_cmp(y).unwrap());
        times.dedup();
        let points: Vec<(f64, f64)> =
            times.iter().map(|&t| (t, a * self.value(t) + b * other.value(t))).collect();
        RateCurve::new(&points, self.horizon.max(other.horizon)).expect("combination of valid curves")
    }

    pub fn add(&self, other: &RateCurve) -> RateCurve {
        self.combine(1.0, other, 1.0)
    }

    pub fn sub(&self, other: &RateCurve) -> RateCurve {
        self.combine(1.0, other, -1.0)
    }

    pub fn scale(&self, k: f64) -> RateCurve {
        let points: Vec<(f64, f64)> = self.points().into_iter().map(|(t, v)| (t, k * v)).collect();
        RateCurve::new(&points, self.horizon).expect("scaled valid curve")
    }

    /// Bitwise equality of the curve shape, used for degeneracy flags.
    pub fn same_shape(&self, other: &RateCurve) -> bool {
        let mut times: Vec<f64> = self.times.iter().chain(other.times.iter()).copied().collect();
        times.sort_by(|x, y| x.partial_cmp(y).unwrap());
        times.dedup();
        times.iter().all(|&t| self.value(t).to_bits() == other.value(t).to_bits())
    }

    /// `∫_a^b ρ(u)·exp(-∫_0^u η) du`, exact for piecewise-constant `ρ` and `η`.
    pub fn weighted_discount_integral(rho: Option<&RateCurve>, eta: &RateCurve, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        let mut cuts: Vec<f64> = vec![a, b];
        for c in [Some(eta), rho].into_iter().flatten() {
            cuts.extend(c.times.iter().copied().filter(|&t| t > a && t < b));
        }
        cuts.sort_by(|x, y| x.partial_cmp(y).unwrap());
        cuts.dedup();
        let mut acc = 0.0;
        for w in cuts.windows(2) {
            let (s, e) = (w[0], w[1]);
            let mid = 0.5 * (s + e);
            let k = eta.value(mid);
            let level = rho.map_or(1.0, |c| c.value(mid));
            let d0 = (-eta.integral_to(s)).exp();
            let len = e - s;
            let x = k * len;
            let factor = if x.abs() < 1e-8 { len * (1.0 - 0.5 * x) } else { (1.0 - (-x).exp()) / k };
            acc += level * d0 * factor;
        }
        acc
    }
}

/// Discount factor `exp(-∫_t^s η)`.
pub fn deflator(eta: &RateCurve, t: f64, s: f64) -> Result<f64> {
    check_interval(eta, t, s)?;
    Ok((-eta.integral(t, s)).exp())
}

/// Survival probability `exp(-(Λ_s - Λ_t))` for the intensity curve `lambda`.
pub fn survival(lambda: &RateCurve, t: f64, s: f64) -> Result<f64> {
    check_interval(lambda, t, s)?;
    Ok((-lambda.integral(t, s)).exp())
}

fn check_interval(curve: &RateCurve, t: f64, s: f64) -> Result<()> {
    if !(t >= 0.0 && t <= s && s <= curve.horizon + HORIZON_SLACK) {
        return Err(XvaError::validation(format!(
            "interval [{t}, {s}] outside [0, {}]",
            curve.horizon
        )));
    }
    Ok(())
}

/// Lend/borrow pair of curves.
#[derive(Debug, Clone, PartialEq)]
pub struct RatePair {
    pub lend: RateCurve,
    pub borrow: RateCurve,
    degenerate: bool,
}

impl RatePair {
    pub fn new(lend: RateCurve, borrow: RateCurve) -> Result<Self> {
        if (lend.horizon - borrow.horizon).abs() > HORIZON_SLACK {
            return Err(XvaError::validation("rate pair defined on different horizons"));
        }
        let degenerate = lend.same_shape(&borrow);
        Ok(Self { lend, borrow, degenerate })
    }

    pub fn single(curve: RateCurve) -> Self {
        Self { lend: curve.clone(), borrow: curve, degenerate: true }
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }
}

/// All deterministic rate curves of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct RateSystem {
    pub r: RateCurve,
    pub funding: RatePair,
    pub collateral: RatePair,
    /// One repo pair per asset (ignored for treasury-funded assets).
    pub repo: Vec<RatePair>,
    /// Optional explicit funding spread `s^f`; `None` means fair (`L_I·λ^I`).
    pub funding_spread: Option<RateCurve>,
}

impl RateSystem {
    /// Every curve equal to `r`.
    pub fn single_rate(r: RateCurve, n_assets: usize) -> Self {
        Self {
            funding: RatePair::single(r.clone()),
            collateral: RatePair::single(r.clone()),
            repo: vec![RatePair::single(r.clone()); n_assets],
            funding_spread: None,
            r,
        }
    }

    pub fn horizon(&self) -> f64 {
        self.r.horizon
    }

    /// True when every lend/borrow pair coincides (the linear setup).
    pub fn is_linear(&self) -> bool {
        self.funding.is_degenerate()
            && self.collateral.is_degenerate()
            && self.repo.iter().all(RatePair::is_degenerate)
    }

    pub fn validate(&self, n_assets: usize) -> Result<()> {
        if self.repo.len() != n_assets {
            return Err(XvaError::validation(format!(
                "{} repo pairs for {} assets",
                self.repo.len(),
                n_assets
            )));
        }
        let h = self.horizon();
        let pairs = [&self.funding, &self.collateral].into_iter().chain(self.repo.iter());
        for p in pairs {
            if (p.lend.horizon - h).abs() > HORIZON_SLACK {
                return Err(XvaError::validation("rate curves defined on different horizons"));
            }
        }
        Ok(())
    }
}

/// How the hedge position in an asset is financed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssetFunding {
    Repo,
    Treasury,
}

/// Correlated geometric Brownian motions.
#[derive(Debug, Clone, PartialEq)]
pub struct AssetModel {
    pub s0: Vec<f64>,
    pub sigma: Vec<f64>,
    pub correlation: Vec<Vec<f64>>,
    pub funding: Vec<AssetFunding>,
    cholesky: Vec<Vec<f64>>,
}

impl AssetModel {
    pub fn new(
        s0: Vec<f64>,
        sigma: Vec<f64>,
        correlation: Vec<Vec<f64>>,
        funding: Vec<AssetFunding>,
    ) -> Result<Self> {
        let n = s0.len();
        if n == 0 {
            return Err(XvaError::validation("at least one asset required"));
        }
        if sigma.len() != n || funding.len() != n || correlation.len() != n {
            return Err(XvaError::validation("asset field lengths disagree"));
        }
        if s0.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(XvaError::validation("initial prices must be positive"));
        }
        if sigma.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return Err(XvaError::validation("volatilities must be nonnegative"));
        }
        for (i, row) in correlation.iter().enumerate() {
            if row.len() != n {
                return Err(XvaError::validation("correlation matrix is not square"));
            }
            if row[i] != 1.0 {
                return Err(XvaError::validation("correlation diagonal must be 1"));
            }
            for (j, &c) in row.iter().enumerate() {
                if c != correlation[j][i] || !(-1.0..=1.0).contains(&c) {
                    return Err(XvaError::validation("correlation must be symmetric in [-1, 1]"));
                }
            }
        }
        let cholesky = psd_cholesky(&correlation)?;
        Ok(Self { s0, sigma, correlation, funding, cholesky })
    }

    pub fn single(s0: f64, sigma: f64) -> Result<Self> {
        Self::new(vec![s0], vec![sigma], vec![vec![1.0]], vec![AssetFunding::Repo])
    }

    pub fn n_assets(&self) -> usize {
        self.s0.len()
    }

    /// Lower-triangular factor `L` with `L·Lᵀ` equal to the correlation.
    pub fn cholesky(&self) -> &[Vec<f64>] {
        &self.cholesky
    }
}

/// Cholesky factorisation accepting semidefinite input (zero pivots give a
/// zero column) and rejecting indefinite matrices.
fn psd_cholesky(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for j in 0..n {
        let d = a[j][j] - (0..j).map(|k| l[j][k] * l[j][k]).sum::<f64>();
        if d < -1e-10 {
            return Err(XvaError::validation("correlation matrix is not positive semidefinite"));
        }
        if d <= 1e-12 {
            for i in (j + 1)..n {
                let off = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
                if off.abs() > 1e-8 {
                    return Err(XvaError::validation("correlation matrix is not positive semidefinite"));
                }
            }
            continue;
        }
        let p = d.sqrt();
        l[j][j] = p;
        for i in (j + 1)..n {
            l[i][j] = (a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>()) / p;
        }
    }
    Ok(l)
}

/// External funding entity of the bank.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalEntity {
    pub lambda: RateCurve,
    pub loss: f64,
}

/// Default intensities and recoveries of trader (I) and counterparty (C).
#[derive(Debug, Clone, PartialEq)]
pub struct DefaultModel {
    pub lambda_i: RateCurve,
    pub lambda_c: RateCurve,
    pub recovery_i: f64,
    pub recovery_c: f64,
    pub external: Option<ExternalEntity>,
}

impl DefaultModel {
    pub fn new(lambda_i: RateCurve, lambda_c: RateCurve, recovery_i: f64, recovery_c: f64) -> Result<Self> {
        let m = Self { lambda_i, lambda_c, recovery_i, recovery_c, external: None };
        m.validate()?;
        Ok(m)
    }

    pub fn none(horizon: f64) -> Self {
        let zero = RateCurve::flat(0.0, horizon).expect("flat zero");
        Self { lambda_i: zero.clone(), lambda_c: zero, recovery_i: 1.0, recovery_c: 1.0, external: None }
    }

    pub fn with_external(mut self, lambda: RateCurve, loss: f64) -> Result<Self> {
        self.external = Some(ExternalEntity { lambda, loss });
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda_i.is_nonnegative() || !self.lambda_c.is_nonnegative() {
            return Err(XvaError::validation("default intensities must be nonnegative"));
        }
        for r in [self.recovery_i, self.recovery_c] {
            if !(0.0..=1.0).contains(&r) {
                return Err(XvaError::validation("recoveries must lie in [0, 1]"));
            }
        }
        if let Some(e) = &self.external {
            if !e.lambda.is_nonnegative() || !(0.0..=1.0).contains(&e.loss) {
                return Err(XvaError::validation("invalid external entity"));
            }
        }
        Ok(())
    }

    pub fn loss_i(&self) -> f64 {
        1.0 - self.recovery_i
    }

    pub fn loss_c(&self) -> f64 {
        1.0 - self.recovery_c
    }

    /// Intensity of the first default `λ = λ^I + λ^C`.
    pub fn lambda(&self) -> RateCurve {
        self.lambda_i.add(&self.lambda_c)
    }

    /// Same model seen from the counterparty: roles of I and C swapped.
    pub fn mirrored(&self) -> Self {
        Self {
            lambda_i: self.lambda_c.clone(),
            lambda_c: self.lambda_i.clone(),
            recovery_i: self.recovery_c,
            recovery_c: self.recovery_i,
            external: self.external.clone(),
        }
    }
}

/// Named instrumental-measure presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    RiskFree,
    Funding,
    Repo,
    Custom,
}

/// Discounting rate `η` plus one drift curve per asset, defining `Q^{ζ,γ,ν}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeflatorChoice {
    pub preset: Preset,
    pub eta: RateCurve,
    /// Rates `ζ^1, ζ^2` of the two defaultable bonds. No bond hedges are
    /// traded, so they only enter through their deflators.
    pub zeta: [RateCurve; 2],
    /// `γ^i` for repo assets, `ν^i` for treasury-funded ones.
    pub drift: Vec<RateCurve>,
}

impl DeflatorChoice {
    /// All rates equal to `r`.
    pub fn risk_free(rates: &RateSystem, assets: &AssetModel) -> Self {
        Self {
            preset: Preset::RiskFree,
            eta: rates.r.clone(),
            zeta: [rates.r.clone(), rates.r.clone()],
            drift: vec![rates.r.clone(); assets.n_assets()],
        }
    }

    /// `Q^{f,h,f}`: discount at the treasury rate, repo assets drift at their
    /// repo rate, treasury-funded assets at the treasury rate. In a
    /// nonlinear rate system the lend-side curves are used.
    pub fn funding(rates: &RateSystem, assets: &AssetModel) -> Self {
        let f = rates.funding.lend.clone();
        let drift = assets
            .funding
            .iter()
            .enumerate()
            .map(|(i, kind)| match kind {
                AssetFunding::Repo => rates.repo[i].lend.clone(),
                AssetFunding::Treasury => f.clone(),
            })
            .collect();
        Self { preset: Preset::Funding, zeta: [f.clone(), f.clone()], eta: f, drift }
    }

    /// `Q^h`: every asset drifts at the shared repo rate `h`, discount `η`.
    pub fn repo(eta: RateCurve, h: RateCurve, n_assets: usize) -> Self {
        Self { preset: Preset::Repo, zeta: [eta.clone(), eta.clone()], eta, drift: vec![h; n_assets] }
    }

    /// Discount `η` with every asset drifting at `η` as well.
    pub fn flat_instrumental(eta: RateCurve, n_assets: usize) -> Self {
        Self {
            preset: Preset::Custom,
            zeta: [eta.clone(), eta.clone()],
            drift: vec![eta.clone(); n_assets],
            eta,
        }
    }
}

/// Drift of asset `i` under the measure attached to `choice`.
pub fn drift_under(choice: &DeflatorChoice, i: usize) -> Result<&RateCurve> {
    choice
        .drift
        .get(i)
        .ok_or_else(|| XvaError::validation(format!("asset index {i} out of range")))
}
