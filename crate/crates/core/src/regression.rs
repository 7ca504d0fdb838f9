//! Least-squares regression of pathwise values on polynomial functions of
//! the asset state, with analytic derivatives for hedge ratios.

use crate::error::{Result, XvaError};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

const CHUNK: usize = 4096;
const MIN_PATHS_PER_TERM: usize = 10;
const PIVOT_TOL: f64 = 1e-12;

/// Regressor family over standardized coordinates: polynomials in `log S`,
/// polynomials in `S`, or additive linear splines in `S` with knots at
/// sample quantiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisFamily {
    LogPolynomial,
    Polynomial,
    Spline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RegressionBasis {
    pub family: BasisFamily,
    /// Total polynomial degree.
    pub degree: usize,
    /// Interior knots per asset for the spline family.
    pub knots: usize,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self { family: BasisFamily::Spline, degree: 3, knots: 8 }
    }
}

impl RegressionBasis {
    pub fn log_polynomial(degree: usize) -> Self {
        Self { family: BasisFamily::LogPolynomial, degree, ..Default::default() }
    }

    pub fn polynomial(degree: usize) -> Self {
        Self { family: BasisFamily::Polynomial, degree, ..Default::default() }
    }

    pub fn spline(knots: usize) -> Self {
        Self { family: BasisFamily::Spline, knots, ..Default::default() }
    }
}

/// Fitted conditional expectation as a function of the asset state.
#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    family: BasisFamily,
    /// Assets with a non-degenerate cross-section.
    active: Vec<usize>,
    center: Vec<f64>,
    scale: Vec<f64>,
    /// Exponents per term over the active assets (polynomial families).
    terms: Vec<Vec<u32>>,
    /// Knots per active asset (spline family).
    knots: Vec<Vec<f64>>,
    coeffs: Vec<f64>,
}

impl Fit {
    fn constant(value: f64) -> Self {
        Self {
            family: BasisFamily::Polynomial,
            active: vec![],
            center: vec![],
            scale: vec![],
            terms: vec![vec![]],
            knots: vec![],
            coeffs: vec![value],
        }
    }

    /// Number of basis functions actually used.
    pub fn n_terms(&self) -> usize {
        self.coeffs.len()
    }

    fn coords_into(&self, s: &[f64], z: &mut [f64]) {
        for (a, &i) in self.active.iter().enumerate() {
            z[a] = (transform(self.family, s[i]) - self.center[a]) / self.scale[a];
        }
    }

    fn features(&self, z: &[f64], out: &mut [f64]) {
        match self.family {
            BasisFamily::Spline => spline_features(&self.knots, z, out),
            _ => {
                for (o, t) in out.iter_mut().zip(&self.terms) {
                    *o = monomial(t, z);
                }
            }
        }
    }

    pub fn value(&self, s: &[f64]) -> f64 {
        let mut z = vec![0.0; self.active.len()];
        let mut f = vec![0.0; self.coeffs.len()];
        self.value_with(s, &mut z, &mut f)
    }

    fn value_with(&self, s: &[f64], z: &mut [f64], f: &mut [f64]) -> f64 {
        self.coords_into(s, z);
        self.features(z, f);
        f.iter().zip(&self.coeffs).map(|(x, c)| c * x).sum()
    }

    /// `∂fit/∂S^i` for every asset.
    pub fn gradient(&self, s: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.active.len()];
        let mut g = vec![0.0; s.len()];
        self.gradient_with(s, &mut z, &mut g);
        g
    }

    fn gradient_with(&self, s: &[f64], z: &mut [f64], g: &mut [f64]) {
        self.coords_into(s, z);
        g.iter_mut().for_each(|x| *x = 0.0);
        let mut offset = 1;
        for (a, &i) in self.active.iter().enumerate() {
            let dz = match self.family {
                BasisFamily::Spline => {
                    let k = &self.knots[a];
                    let mut d = self.coeffs[offset];
                    for (j, &knot) in k.iter().enumerate() {
                        if z[a] > knot {
                            d += self.coeffs[offset + 1 + j];
                        }
                    }
                    offset += 1 + k.len();
                    d
                }
                _ => {
                    let mut d = 0.0;
                    for (t, c) in self.terms.iter().zip(&self.coeffs) {
                        if t[a] == 0 {
                            continue;
                        }
                        let mut term = c * t[a] as f64;
                        for (b, (&e, &x)) in t.iter().zip(z.iter()).enumerate() {
                            let e = if b == a { e - 1 } else { e };
                            term *= x.powi(e as i32);
                        }
                        d += term;
                    }
                    d
                }
            };
            let chain = match self.family {
                BasisFamily::LogPolynomial => 1.0 / (self.scale[a] * s[i]),
                _ => 1.0 / self.scale[a],
            };
            g[i] = dz * chain;
        }
    }

    /// Values and gradients (row-major, one row per path) at every state.
    pub fn evaluate(&self, states: &[f64], n_assets: usize) -> (Vec<f64>, Vec<f64>) {
        let m = n_assets.max(1);
        let rows = states.len() / m;
        let mut values = vec![0.0; rows];
        let mut grads = vec![0.0; rows * n_assets];
        values
            .par_chunks_mut(CHUNK)
            .zip(grads.par_chunks_mut(CHUNK * n_assets.max(1)))
            .enumerate()
            .for_each(|(c, (vals, gs))| {
                let mut z = vec![0.0; self.active.len()];
                let mut f = vec![0.0; self.coeffs.len()];
                for (r, v) in vals.iter_mut().enumerate() {
                    let row = c * CHUNK + r;
                    let s = &states[row * m..row * m + n_assets];
                    *v = self.value_with(s, &mut z, &mut f);
                    self.gradient_with(s, &mut z, &mut gs[r * n_assets..(r + 1) * n_assets]);
                }
            });
        (values, grads)
    }
}

fn transform(family: BasisFamily, s: f64) -> f64 {
    match family {
        BasisFamily::LogPolynomial => s.ln(),
        _ => s,
    }
}

fn monomial(exps: &[u32], z: &[f64]) -> f64 {
    exps.iter().zip(z).map(|(&e, &x)| x.powi(e as i32)).product()
}

fn spline_features(knots: &[Vec<f64>], z: &[f64], out: &mut [f64]) {
    out[0] = 1.0;
    let mut o = 1;
    for (a, k) in knots.iter().enumerate() {
        out[o] = z[a];
        for (j, &knot) in k.iter().enumerate() {
            out[o + 1 + j] = (z[a] - knot).max(0.0);
        }
        o += 1 + k.len();
    }
}

/// Exponent vectors of total degree ≤ `degree`, ordered by degree.
fn terms(n: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out: Vec<Vec<u32>> = vec![vec![0; n]];
    for d in 1..=degree {
        let mut level: Vec<Vec<u32>> = Vec::new();
        let mut cur = vec![0u32; n];
        fill(&mut level, &mut cur, 0, d as u32);
        level.sort_by(|a, b| b.cmp(a));
        out.extend(level);
    }
    out
}

fn fill(out: &mut Vec<Vec<u32>>, cur: &mut Vec<u32>, i: usize, left: u32) {
    if i + 1 == cur.len() {
        cur[i] = left;
        out.push(cur.clone());
        return;
    }
    for e in 0..=left {
        cur[i] = e;
        fill(out, cur, i + 1, left - e);
    }
}

/// Knots at the `j/(count+1)` quantiles of a strided subsample.
fn quantile_knots(z: &[f64], count: usize) -> Vec<f64> {
    let stride = z.len().div_ceil(4096).max(1);
    let mut sample: Vec<f64> = z.iter().step_by(stride).copied().collect();
    sample.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut out: Vec<f64> = (1..=count)
        .map(|j| sample[(j * sample.len() / (count + 1)).min(sample.len() - 1)])
        .collect();
    out.dedup();
    out
}

/// Chunked Gram matrix `Σ φφᵀ` (lower triangle mirrored) with a fixed
/// reduction order.
fn gram(rows: usize, p: usize, phi: &(dyn Fn(usize, &mut [f64]) + Sync)) -> DMatrix<f64> {
    let partial: Vec<Vec<f64>> = (0..rows.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut a = vec![0.0; p * p];
            let mut f = vec![0.0; p];
            for r in c * CHUNK..((c + 1) * CHUNK).min(rows) {
                phi(r, &mut f);
                for i in 0..p {
                    for j in 0..=i {
                        a[i * p + j] += f[i] * f[j];
                    }
                }
            }
            a
        })
        .collect();
    let mut a = DMatrix::<f64>::zeros(p, p);
    for pa in &partial {
        for i in 0..p {
            for j in 0..=i {
                a[(i, j)] += pa[i * p + j];
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            a[(j, i)] = a[(i, j)];
        }
    }
    a
}

/// Chunked `Σ φ y`.
fn moment(rows: usize, p: usize, phi: &(dyn Fn(usize, &mut [f64]) + Sync), y: &[f64]) -> DVector<f64> {
    let partial: Vec<Vec<f64>> = (0..rows.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut b = vec![0.0; p];
            let mut f = vec![0.0; p];
            let end = ((c + 1) * CHUNK).min(rows);
            for (r, &yr) in y.iter().enumerate().take(end).skip(c * CHUNK) {
                phi(r, &mut f);
                for i in 0..p {
                    b[i] += f[i] * yr;
                }
            }
            b
        })
        .collect();
    let mut b = DVector::<f64>::zeros(p);
    for pb in &partial {
        for i in 0..p {
            b[i] += pb[i];
        }
    }
    b
}

/// Cholesky factor of the Gram matrix, or `None` when it is numerically
/// rank deficient.
fn factor(a: DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let p = a.nrows();
    let max_diag = (0..p).map(|i| a[(i, i)]).fold(0.0, f64::max);
    let chol = a.cholesky()?;
    let l = chol.l();
    if (0..p).any(|i| l[(i, i)] * l[(i, i)] <= PIVOT_TOL * max_diag) {
        return None;
    }
    Some(chol)
}

/// Solves the normal equations for features `phi` (one row per path).
/// Returns `None` when the design is numerically rank deficient.
fn least_squares(rows: usize, p: usize, phi: &(dyn Fn(usize, &mut [f64]) + Sync), y: &[f64]) -> Option<Vec<f64>> {
    let chol = factor(gram(rows, p, phi))?;
    Some(chol.solve(&moment(rows, p, phi, y)).iter().copied().collect())
}

/// Least-squares projection onto the basis at a fixed set of states. The
/// design is built and factorized once, so repeated fits on the same
/// states only cost one pass over the paths.
#[derive(Debug, Clone)]
pub struct Projector {
    shape: Fit,
    n_assets: usize,
    rows: usize,
    chol: Cholesky<f64, Dyn>,
}

impl Projector {
    /// The basis is shrunk (highest degree or knot count first) until the
    /// design has full rank and at least ten paths per term; the constant
    /// is the last resort.
    pub fn new(states: &[f64], n_assets: usize, basis: RegressionBasis) -> Result<Self> {
        let n = states.len().checked_div(n_assets).unwrap_or(0);
        if n == 0 {
            return Err(XvaError::Numeric("regression on an empty path set".into()));
        }
        if states.len() != n * n_assets {
            return Err(XvaError::validation("regression states do not match values"));
        }
        let raw = |r: usize, i: usize| transform(basis.family, states[r * n_assets + i]);
        let mut active = Vec::new();
        let mut center = Vec::new();
        let mut scale = Vec::new();
        for i in 0..n_assets {
            let mean = (0..n).map(|r| raw(r, i)).sum::<f64>() / n as f64;
            let var = (0..n).map(|r| (raw(r, i) - mean).powi(2)).sum::<f64>() / n as f64;
            let sd = var.sqrt();
            if sd > 1e-12 * mean.abs().max(1.0) {
                active.push(i);
                center.push(mean);
                scale.push(sd);
            }
        }
        let na = active.len();
        let spline = basis.family == BasisFamily::Spline;
        let mut level = if na == 0 { 0 } else if spline { basis.knots + 1 } else { basis.degree };
        let mut z = vec![0.0; n * na];
        for r in 0..n {
            for a in 0..na {
                z[r * na + a] = (raw(r, active[a]) - center[a]) / scale[a];
            }
        }
        while level > 0 {
            let mut shape = Fit {
                family: basis.family,
                active: active.clone(),
                center: center.clone(),
                scale: scale.clone(),
                terms: vec![],
                knots: vec![],
                coeffs: vec![],
            };
            let p = if spline {
                // Level 1 is the plain linear fit.
                shape.knots = (0..na)
                    .map(|a| {
                        let za: Vec<f64> = (0..n).map(|r| z[r * na + a]).collect();
                        quantile_knots(&za, level - 1)
                    })
                    .collect();
                1 + shape.knots.iter().map(|k| 1 + k.len()).sum::<usize>()
            } else {
                shape.terms = terms(na, level);
                shape.terms.len()
            };
            if n >= MIN_PATHS_PER_TERM * p {
                let phi = |r: usize, out: &mut [f64]| shape.features(&z[r * na..(r + 1) * na], out);
                if let Some(chol) = factor(gram(n, p, &phi)) {
                    shape.coeffs = vec![0.0; p];
                    return Ok(Self { shape, n_assets, rows: n, chol });
                }
            }
            level -= 1;
        }
        let chol = DMatrix::from_element(1, 1, n as f64).cholesky().expect("positive");
        Ok(Self { shape: Fit::constant(0.0), n_assets, rows: n, chol })
    }

    pub fn n_terms(&self) -> usize {
        self.shape.coeffs.len()
    }

    /// Fit of `y` given on the states the projector was built from.
    pub fn fit(&self, states: &[f64], y: &[f64]) -> Result<Fit> {
        if y.len() != self.rows || states.len() != self.rows * self.n_assets {
            return Err(XvaError::validation("regression states do not match values"));
        }
        let m = self.n_assets;
        let shape = &self.shape;
        let na = shape.active.len();
        let phi = |r: usize, out: &mut [f64]| {
            let mut z = [0.0; 8];
            let mut big;
            let zs: &mut [f64] = if na <= 8 {
                &mut z[..na]
            } else {
                big = vec![0.0; na];
                &mut big
            };
            shape.coords_into(&states[r * m..(r + 1) * m], zs);
            shape.features(zs, out);
        };
        let b = moment(self.rows, self.n_terms(), &phi, y);
        let coeffs = self.chol.solve(&b).iter().copied().collect();
        Ok(Fit { coeffs, ..shape.clone() })
    }
}

/// Least-squares fit of `y` on the basis evaluated at `states` (row-major,
/// `n_assets` values per path); see [`Projector::new`] for the fallbacks.
pub fn regress(states: &[f64], n_assets: usize, y: &[f64], basis: RegressionBasis) -> Result<Fit> {
    if y.is_empty() {
        return Err(XvaError::Numeric("regression on an empty path set".into()));
    }
    if states.len() != y.len() * n_assets {
        return Err(XvaError::validation("regression states do not match values"));
    }
    if n_assets == 0 {
        return Ok(Fit::constant(y.iter().sum::<f64>() / y.len() as f64));
    }
    Projector::new(states, n_assets, basis)?.fit(states, y)
}

/// `Z^i = ∂fit/∂S^i` at the given state.
pub fn hedge_delta(fit: &Fit, s: &[f64]) -> Vec<f64> {
    fit.gradient(s)
}

/// Slopes of the multivariate linear regression of `y` on the raw states
/// (with intercept); zeros when the design is degenerate.
pub fn linear_slopes(states: &[f64], n_assets: usize, y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let p = n_assets + 1;
    if n < p + 1 {
        return vec![0.0; n_assets];
    }
    let center: Vec<f64> = (0..n_assets).map(|i| (0..n).map(|r| states[r * n_assets + i]).sum::<f64>() / n as f64).collect();
    let phi = |r: usize, out: &mut [f64]| {
        out[0] = 1.0;
        for i in 0..n_assets {
            out[i + 1] = states[r * n_assets + i] - center[i];
        }
    };
    match least_squares(n, p, &phi, y) {
        Some(c) => c[1..].to_vec(),
        None => vec![0.0; n_assets],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{AssetModel, DeflatorChoice, RateCurve};
    use crate::oracles::{bs_carry_discount, OptionKind, TwoRateBSInput};
    use crate::simulation::{simulate_assets, SeedPolicy, TimeGrid};

    fn spread(n: usize) -> Vec<f64> {
        (0..n).map(|i| 60.0 + 80.0 * i as f64 / n as f64).collect()
    }

    #[test]
    fn constants_are_reproduced() {
        let s = spread(500);
        let fit = regress(&s, 1, &vec![3.5; 500], RegressionBasis::default()).unwrap();
        for x in [70.0, 100.0, 130.0] {
            assert!((fit.value(&[x]) - 3.5).abs() < 1e-10);
            assert!(fit.gradient(&[x])[0].abs() < 1e-10);
        }
    }

    #[test]
    fn affine_in_log_is_exact() {
        let s = spread(500);
        let y: Vec<f64> = s.iter().map(|x| 2.0 - 0.7 * x.ln()).collect();
        let fit = regress(&s, 1, &y, RegressionBasis::log_polynomial(3)).unwrap();
        for x in [65.0, 99.0, 135.0] {
            assert!((fit.value(&[x]) - (2.0 - 0.7 * f64::ln(x))).abs() < 1e-10);
            assert!((fit.gradient(&[x])[0] + 0.7 / x).abs() < 1e-10);
        }
    }

    #[test]
    fn identity_has_unit_delta() {
        let s = spread(400);
        let basis = RegressionBasis::polynomial(1);
        let fit = regress(&s, 1, &s, basis).unwrap();
        assert!((hedge_delta(&fit, &[91.0])[0] - 1.0).abs() < 1e-12);
        let flat = regress(&s, 1, &vec![1.0; 400], basis).unwrap();
        assert!(hedge_delta(&flat, &[91.0])[0].abs() < 1e-12);
    }

    #[test]
    fn degenerate_design_falls_back_to_mean() {
        let s = vec![100.0; 50];
        let y: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let fit = regress(&s, 1, &y, RegressionBasis::default()).unwrap();
        assert_eq!(fit.n_terms(), 1);
        assert!((fit.value(&[100.0]) - 24.5).abs() < 1e-12);
        // Too few paths for a cubic: degree is reduced.
        let few = regress(&spread(25), 1, &spread(25), RegressionBasis::log_polynomial(3)).unwrap();
        assert_eq!(few.n_terms(), 2);
        assert!(regress(&[], 1, &[], RegressionBasis::default()).is_err());
    }

    #[test]
    fn two_asset_terms() {
        assert_eq!(terms(2, 2).len(), 6);
        assert_eq!(terms(3, 3).len(), 20);
    }

    #[test]
    fn negated_values_give_negated_fit() {
        let s = spread(300);
        let y: Vec<f64> = s.iter().map(|x| (x - 100.0).max(0.0)).collect();
        let ny: Vec<f64> = y.iter().map(|v| -v).collect();
        let a = regress(&s, 1, &y, RegressionBasis::default()).unwrap();
        let b = regress(&s, 1, &ny, RegressionBasis::default()).unwrap();
        assert_eq!(a.value(&[97.0]), -b.value(&[97.0]));
    }

    fn one_step(n_paths: usize, dt: f64) -> (Vec<f64>, Vec<f64>) {
        let model = AssetModel::single(100.0, 0.2).unwrap();
        let choice = DeflatorChoice::flat_instrumental(RateCurve::flat(0.02, 2.0).unwrap(), 1);
        let grid = TimeGrid::new(1.0 - dt, 1, &[]).unwrap();
        let ens = simulate_assets(&model, &choice, &grid, &SeedPolicy::new(17), n_paths).unwrap();
        let start: Vec<f64> = (0..n_paths).map(|p| ens.spot(p, 1)[0]).collect();
        let grid2 = TimeGrid::new(dt, 1, &[]).unwrap();
        let model2 = AssetModel::single(1.0, 0.2).unwrap();
        let step = simulate_assets(&model2, &choice, &grid2, &SeedPolicy::new(18), n_paths).unwrap();
        let end: Vec<f64> = (0..n_paths).map(|p| start[p] * step.spot(p, 1)[0]).collect();
        (start, end)
    }

    #[test]
    fn call_continuation_matches_lognormal_conditional_mean() {
        let dt = 0.25;
        let (start, end) = one_step(50_000, dt);
        let y: Vec<f64> = end.iter().map(|s| (s - 100.0).max(0.0)).collect();
        let fit = regress(&start, 1, &y, RegressionBasis::log_polynomial(3)).unwrap();
        let quintic = regress(&start, 1, &y, RegressionBasis::log_polynomial(5)).unwrap();
        let exact = |x: f64| {
            bs_carry_discount(
                &TwoRateBSInput { s0: x, strike: 100.0, sigma: 0.2, maturity: dt, carry: 0.02, discount: 0.0 },
                OptionKind::Call,
            )
        };
        // Projection bias concentrates at the kink and shrinks with the degree.
        for x in [90.0, 110.0] {
            assert!((fit.value(&[x]) - exact(x)).abs() < 0.3);
        }
        let e3 = (fit.value(&[100.0]) - exact(100.0)).abs();
        let e5 = (quintic.value(&[100.0]) - exact(100.0)).abs();
        assert!(e3 < 1.0 && e5 < e3, "{e3} {e5}");
        // With an intercept the fitted values keep the sample mean.
        let fitted: f64 = start.iter().map(|s| fit.value(&[*s])).sum::<f64>() / start.len() as f64;
        let sample: f64 = y.iter().sum::<f64>() / y.len() as f64;
        assert!((fitted - sample).abs() < 1e-9);
        // Spline deltas stay in [0, 1] up to sampling noise in the flat tails.
        let spline = regress(&start, 1, &y, RegressionBasis::spline(8)).unwrap();
        assert!((spline.value(&[100.0]) - exact(100.0)).abs() < 0.05);
        let in_range = start
            .iter()
            .filter(|s| (-0.02..=1.02).contains(&hedge_delta(&spline, &[**s])[0]))
            .count();
        assert!(in_range as f64 >= 0.99 * start.len() as f64, "{in_range}");
    }

    #[test]
    fn linear_slopes_recover_coefficients() {
        let s = spread(200);
        let y: Vec<f64> = s.iter().map(|x| 4.0 + 0.25 * x).collect();
        let b = linear_slopes(&s, 1, &y);
        assert!((b[0] - 0.25).abs() < 1e-12);
        assert_eq!(linear_slopes(&[100.0; 20], 1, &[1.0; 20]), vec![0.0]);
    }
}
