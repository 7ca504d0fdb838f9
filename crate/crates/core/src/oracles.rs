//! Reference values for testing: closed-form lognormal prices, adaptive
//! quadrature of the XVA integrals, and a binomial tree for the nonlinear
//! pricing equation.
//!
//! Nothing here calls into the pricers or their curve helpers. All rates
//! are flat and passed as plain numbers.

use statrs::function::erf::erfc;

fn phi(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn density(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[allow(clippy::excessive_precision)]
const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];
#[allow(clippy::excessive_precision)]
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
#[allow(clippy::excessive_precision)]
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn gauss_kronrod<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for i in 0..7 {
        let dx = h * XGK[i];
        let s = f(c - dx) + f(c + dx);
        k += WGK[i] * s;
        if i % 2 == 1 {
            g += WG[i / 2] * s;
        }
    }
    (k * h, (k - g).abs() * h)
}

fn adapt<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let (k, err) = gauss_kronrod(f, a, b);
    if err <= tol || depth >= 40 || (b - a).abs() < 1e-14 {
        return k;
    }
    let m = 0.5 * (a + b);
    adapt(f, a, m, 0.5 * tol, depth + 1) + adapt(f, m, b, 0.5 * tol, depth + 1)
}

/// Adaptive Gauss–Kronrod (7/15) quadrature of `f` on `[a, b]` with the
/// given relative tolerance.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let n = 16;
    let w = (b - a) / n as f64;
    let coarse: f64 = (0..n).map(|i| gauss_kronrod(&f, a + i as f64 * w, a + (i + 1) as f64 * w).0).sum();
    let tol = rel_tol * coarse.abs().max(1e-300);
    (0..n).map(|i| adapt(&f, a + i as f64 * w, a + (i + 1) as f64 * w, tol / n as f64, 0)).sum()
}

/// Quadrature over consecutive breakpoints, for integrands with kinks.
pub fn integrate_pieces<F: Fn(f64) -> f64>(f: F, cuts: &[f64], rel_tol: f64) -> f64 {
    cuts.windows(2).map(|w| integrate(&f, w[0], w[1], rel_tol)).sum()
}

/// Payoff kind for the lognormal oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptionKind {
    Call,
    Put,
    Forward,
}

/// Single lognormal asset with flat carry `q` and flat discount `rho`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoRateBSInput {
    pub s0: f64,
    pub strike: f64,
    pub sigma: f64,
    pub maturity: f64,
    pub carry: f64,
    pub discount: f64,
}

/// `e^{-ρT}(F N(d1) − K N(d2))` with `F = S0 e^{qT}`, plus put and forward.
pub fn bs_carry_discount(x: &TwoRateBSInput, kind: OptionKind) -> f64 {
    let df = (-x.discount * x.maturity).exp();
    let fwd = x.s0 * (x.carry * x.maturity).exp();
    let k = x.strike;
    if kind == OptionKind::Forward {
        return df * (fwd - k);
    }
    let sd = x.sigma * x.maturity.sqrt();
    if sd == 0.0 || k <= 0.0 {
        return match kind {
            OptionKind::Call => df * (fwd - k).max(0.0),
            _ => df * (k - fwd).max(0.0),
        };
    }
    let d1 = ((fwd / k).ln() + 0.5 * sd * sd) / sd;
    let d2 = d1 - sd;
    match kind {
        OptionKind::Call => df * (fwd * phi(d1) - k * phi(d2)),
        _ => df * (k * phi(-d2) - fwd * phi(-d1)),
    }
}

/// The same price by quadrature of the payoff against the lognormal law.
pub fn bs_by_quadrature(x: &TwoRateBSInput, kind: OptionKind) -> f64 {
    let df = (-x.discount * x.maturity).exp();
    let fwd = x.s0 * (x.carry * x.maturity).exp();
    let sd = x.sigma * x.maturity.sqrt();
    let terminal = |z: f64| fwd * (-0.5 * sd * sd + sd * z).exp();
    let payoff = move |z: f64| {
        let s = terminal(z);
        let p = match kind {
            OptionKind::Call => (s - x.strike).max(0.0),
            OptionKind::Put => (x.strike - s).max(0.0),
            OptionKind::Forward => s - x.strike,
        };
        p * density(z)
    };
    let kink = if sd > 0.0 && x.strike > 0.0 {
        ((x.strike / fwd).ln() + 0.5 * sd * sd) / sd
    } else {
        0.0
    };
    let kink = kink.clamp(-11.0, 11.0);
    df * integrate_pieces(payoff, &[-12.0, kink, 12.0], 1e-13)
}

/// Constant-parameter scenario for the XVA quadrature: one asset, one
/// terminal payoff `quantity × kind(K)` at `maturity`, collateral
/// `C = α·Q` with `Q` the risk-free clean value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct XvaOracleInput {
    pub s0: f64,
    pub strike: f64,
    pub sigma: f64,
    pub maturity: f64,
    pub kind: OptionKind,
    pub quantity: f64,
    pub r: f64,
    pub c_lend: f64,
    pub c_borrow: f64,
    pub lambda_i: f64,
    pub lambda_c: f64,
    pub loss_i: f64,
    pub loss_c: f64,
    pub alpha: f64,
}

/// Flat discount rate and asset carry of the measure used for the
/// expectation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleMeasure {
    pub discount: f64,
    pub carry: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct XvaOracleOutput {
    /// Promised flows plus closeout value `Q_τ`, discounted and survival-weighted.
    pub clean: f64,
    pub cva: f64,
    pub dva: f64,
    pub lva: f64,
    pub total: f64,
}

impl XvaOracleInput {
    fn kind_at(&self, tenor: f64, strike: f64, carry: f64, discount: f64, kind: OptionKind) -> f64 {
        bs_carry_discount(
            &TwoRateBSInput { s0: self.s0, strike, sigma: self.sigma, maturity: tenor, carry, discount },
            kind,
        )
    }

    /// Risk-free clean price at time 0.
    pub fn clean_price(&self) -> f64 {
        self.quantity * self.kind_at(self.maturity, self.strike, self.r, self.r, self.kind)
    }

    /// `(E[D_η(0,u) Q_u⁺], E[D_η(0,u) Q_u⁻])` under the measure with carry
    /// `κ`: `Q_u` is the `r`-clean value at `u`.
    fn exposure(&self, u: f64, m: &OracleMeasure) -> (f64, f64) {
        let t = self.maturity;
        let rem = t - u;
        match self.kind {
            OptionKind::Call | OptionKind::Put => {
                // Q_u ≥ 0 for a long option; E[D_η Q_u] collapses to a price with
                // carry κ on [0,u] and r on [u,T].
                let q = (m.carry * u + self.r * rem) / t;
                let d = (m.discount * u + self.r * rem) / t;
                let v = self.kind_at(t, self.strike, q, d, self.kind);
                if self.quantity >= 0.0 {
                    (self.quantity * v, 0.0)
                } else {
                    (0.0, -self.quantity * v)
                }
            }
            OptionKind::Forward => {
                if u <= 0.0 {
                    let q0 = self.quantity * (self.s0 - self.strike * (-self.r * t).exp());
                    return (q0.max(0.0), (-q0).max(0.0));
                }
                let k_eff = self.strike * (-self.r * rem).exp();
                let call = self.kind_at(u, k_eff, m.carry, m.discount, OptionKind::Call);
                let put = self.kind_at(u, k_eff, m.carry, m.discount, OptionKind::Put);
                if self.quantity >= 0.0 {
                    (self.quantity * call, self.quantity * put)
                } else {
                    (-self.quantity * put, -self.quantity * call)
                }
            }
        }
    }

    /// Expected discounted terminal payoff under the measure.
    fn terminal(&self, m: &OracleMeasure) -> f64 {
        self.quantity * self.kind_at(self.maturity, self.strike, m.carry, m.discount, self.kind)
    }
}

/// XVA terms by adaptive quadrature over the default time, with the
/// exposure expectations in closed form at each date.
pub fn quadrature_xva(x: &XvaOracleInput, m: &OracleMeasure, rel_tol: f64) -> XvaOracleOutput {
    let lam = x.lambda_i + x.lambda_c;
    let t = x.maturity;
    let surv = |u: f64| (-lam * u).exp();
    let clean_flow = |u: f64| {
        let (p, n) = x.exposure(u, m);
        lam * surv(u) * (p - n)
    };
    let clean = surv(t) * x.terminal(m) + integrate(clean_flow, 0.0, t, rel_tol);
    let cva = x.loss_c * (1.0 - x.alpha) * integrate(|u| x.lambda_c * surv(u) * x.exposure(u, m).0, 0.0, t, rel_tol);
    let dva = x.loss_i * (1.0 - x.alpha) * integrate(|u| x.lambda_i * surv(u) * x.exposure(u, m).1, 0.0, t, rel_tol);
    let lva = x.alpha
        * integrate(
            |u| {
                let (p, n) = x.exposure(u, m);
                surv(u) * ((m.discount - x.c_borrow) * p - (m.discount - x.c_lend) * n)
            },
            0.0,
            t,
            rel_tol,
        );
    XvaOracleOutput { clean, cva, dva, lva, total: clean + lva + dva - cva }
}

/// Setting for the external-funding calibration: long option, no
/// collateral, repo rate equal to `r`, bank always a net borrower.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExternalFundingInput {
    pub clean_price: f64,
    pub maturity: f64,
    pub r: f64,
    pub lambda_i: f64,
    pub lambda_c: f64,
    pub loss_i: f64,
    pub loss_c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExternalFundingTerms {
    pub fca: f64,
    pub dva_f_minus: f64,
}

/// Funding cost and funding debit adjustment of a long position funded by
/// borrowing at the flat rate `f_borrow`.
pub fn external_funding_terms(x: &ExternalFundingInput, f_borrow: f64) -> ExternalFundingTerms {
    let lam = x.lambda_i + x.lambda_c;
    let kappa = f_borrow + lam - x.lambda_i * x.loss_i;
    let t = x.maturity;
    let pi0 = x.clean_price;
    // E[v_u] for the price of the funded position.
    let mean_value = |u: f64| {
        let running = integrate(
            |s| (-kappa * (s - u)).exp() * (x.r * s).exp() * pi0,
            u,
            t,
            1e-11,
        );
        (lam - x.lambda_c * x.loss_c) * running + (-kappa * (t - u)).exp() * (x.r * t).exp() * pi0
    };
    let exposure = integrate(|u| (-(x.r + lam) * u).exp() * mean_value(u), 0.0, t, 1e-10);
    ExternalFundingTerms { fca: (f_borrow - x.r) * exposure, dva_f_minus: x.loss_i * x.lambda_i * exposure }
}

/// Flat borrow rate at which the funding cost equals the funding debit
/// benefit, by bisection on `[r, r + 1]`.
pub fn calibrate_fair_borrow_rate(x: &ExternalFundingInput) -> f64 {
    let gap = |fb: f64| {
        let v = external_funding_terms(x, fb);
        v.fca - v.dva_f_minus
    };
    let (mut lo, mut hi) = (x.r, x.r + 1.0);
    let mut g_lo = gap(lo);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        let g = gap(mid);
        if (g < 0.0) == (g_lo < 0.0) {
            lo = mid;
            g_lo = g;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// One-asset scenario for the binomial reference of the nonlinear pricing
/// equation. Defaults, if any, are weighted by their intensities per step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeInput {
    pub s0: f64,
    pub strike: f64,
    pub sigma: f64,
    pub maturity: f64,
    pub kind: OptionKind,
    pub quantity: f64,
    pub r: f64,
    pub f_lend: f64,
    pub f_borrow: f64,
    pub h_lend: f64,
    pub h_borrow: f64,
    pub c_lend: f64,
    pub c_borrow: f64,
    pub alpha: f64,
    pub lambda_i: f64,
    pub lambda_c: f64,
    pub loss_i: f64,
    pub loss_c: f64,
}

/// Backward induction on an `m`-step CRR tree. At each node the repo rate
/// follows the sign of the hedge (from the local delta) and the treasury
/// rate follows the sign of the funding account, trying both branches.
pub fn brute_force_bsde(x: &TreeInput, m: usize) -> f64 {
    let dt = x.maturity / m as f64;
    let u = (x.sigma * dt.sqrt()).exp();
    let d = 1.0 / u;
    let lam = x.lambda_i + x.lambda_c;
    let payoff = |s: f64| {
        x.quantity
            * match x.kind {
                OptionKind::Call => (s - x.strike).max(0.0),
                OptionKind::Put => (x.strike - s).max(0.0),
                OptionKind::Forward => s - x.strike,
            }
    };
    let clean = |s: f64, tenor: f64| {
        x.quantity
            * bs_carry_discount(
                &TwoRateBSInput { s0: s, strike: x.strike, sigma: x.sigma, maturity: tenor, carry: x.r, discount: x.r },
                x.kind,
            )
    };
    let mut v: Vec<f64> = (0..=m).map(|j| payoff(x.s0 * u.powi(j as i32) * d.powi((m - j) as i32))).collect();
    for n in (0..m).rev() {
        let tenor = x.maturity - n as f64 * dt;
        for j in 0..=n {
            let s = x.s0 * u.powi(j as i32) * d.powi((n - j) as i32);
            let (vu, vd) = (v[j + 1], v[j]);
            let delta = (vu - vd) / (s * (u - d));
            let h = if delta >= 0.0 { x.h_lend } else { x.h_borrow };
            let p = ((h * dt).exp() - d) / (u - d);
            let e = p * vu + (1.0 - p) * vd;
            let q = clean(s, tenor);
            let c = x.alpha * q;
            let cbar = if c >= 0.0 { x.c_borrow } else { x.c_lend };
            let ups = q - c;
            let lam_theta = lam * q + x.lambda_i * x.loss_i * (-ups).max(0.0) - x.lambda_c * x.loss_c * ups.max(0.0);
            let step = |f: f64| {
                let k = f + lam;
                let decay = (-k * dt).exp();
                let w = if k.abs() < 1e-12 { dt } else { (1.0 - decay) / k };
                decay * e + w * ((f - cbar) * c + lam_theta)
            };
            let vl = step(x.f_lend);
            let vb = step(x.f_borrow);
            v[j] = if c - vl >= 0.0 {
                vl
            } else if c - vb < 0.0 {
                vb
            } else {
                c
            };
        }
    }
    v[0]
}

/// Richardson-extrapolated tree value with an error bar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeReference {
    pub value: f64,
    pub error_bar: f64,
    /// `(P(M/2) − P(M)) / (P(M) − P(2M))`; close to 2 for first-order convergence.
    pub convergence_ratio: f64,
    pub coarse: f64,
    pub fine: f64,
}

/// Runs the tree at `m/2`, `m` and `2m` steps (`2m ≤ 2000`).
pub fn tree_reference(x: &TreeInput, m: usize) -> Option<TreeReference> {
    if m < 4 || 2 * m > 2000 {
        return None;
    }
    let p_half = brute_force_bsde(x, m / 2);
    let p = brute_force_bsde(x, m);
    let p2 = brute_force_bsde(x, 2 * m);
    let value = 2.0 * p2 - p;
    Some(TreeReference {
        value,
        error_bar: (p2 - p).abs(),
        convergence_ratio: (p_half - p) / (p - p2),
        coarse: p,
        fine: p2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn atm(carry: f64, discount: f64) -> TwoRateBSInput {
        TwoRateBSInput { s0: 100.0, strike: 100.0, sigma: 0.2, maturity: 1.0, carry, discount }
    }

    #[test]
    fn quadrature_of_smooth_functions() {
        let v = integrate(|x: f64| x.exp(), 0.0, 1.0, 1e-12);
        assert!((v - (1f64.exp() - 1.0)).abs() < 1e-13);
        let v = integrate(|x: f64| (x * 3.0).sin(), 0.0, 2.0, 1e-12);
        assert!((v - (1.0 - 6f64.cos()) / 3.0).abs() < 1e-13);
    }

    #[test]
    fn step_function_integral() {
        let eta = |u: f64| if u < 0.5 { 0.01 } else { 0.03 };
        let v = integrate_pieces(eta, &[0.0, 0.5, 1.0], 1e-12);
        assert!(((-v).exp() - (-0.02f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn closed_form_matches_lognormal_quadrature() {
        for (q, rho) in [(0.0, 0.0), (0.025, 0.03), (-0.01, 0.05)] {
            for kind in [OptionKind::Call, OptionKind::Put, OptionKind::Forward] {
                let x = atm(q, rho);
                let a = bs_carry_discount(&x, kind);
                let b = bs_by_quadrature(&x, kind);
                assert!((a - b).abs() < 1e-9, "{kind:?} {q} {rho}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn atm_zero_rate_reference() {
        // 1-D quadrature of the lognormal payoff, frozen.
        let v = bs_by_quadrature(&atm(0.0, 0.0), OptionKind::Call);
        assert!((v - 7.965567455405798).abs() < 1e-9);
        assert!((bs_carry_discount(&atm(0.0, 0.0), OptionKind::Call) - v).abs() < 1e-9);
    }

    #[test]
    fn limits_and_parity() {
        let mut x = atm(0.05, 0.02);
        x.sigma = 0.0;
        let fwd = 100.0 * 0.05f64.exp();
        assert!((bs_carry_discount(&x, OptionKind::Call) - (-0.02f64).exp() * (fwd - 100.0)).abs() < 1e-12);
        let mut z = atm(0.05, 0.02);
        z.strike = 0.0;
        assert!((bs_carry_discount(&z, OptionKind::Call) - 100.0 * 0.03f64.exp()).abs() < 1e-12);
        let y = atm(0.025, 0.03);
        let parity = bs_carry_discount(&y, OptionKind::Call)
            - bs_carry_discount(&y, OptionKind::Put)
            - bs_carry_discount(&y, OptionKind::Forward);
        assert!(parity.abs() < 1e-12);
    }

    fn scenario(alpha: f64) -> XvaOracleInput {
        XvaOracleInput {
            s0: 100.0,
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
        }
    }

    #[test]
    fn cva_collapses_under_risk_neutral_measure() {
        let x = scenario(0.0);
        let m = OracleMeasure { discount: 0.02, carry: 0.02 };
        let out = quadrature_xva(&x, &m, 1e-10);
        let lam: f64 = 0.03;
        let closed = 0.6 * x.clean_price() * (0.02 / lam) * (1.0 - (-lam).exp());
        assert!((out.cva - closed).abs() < 1e-10);
        assert_eq!(out.dva, 0.0);
        assert!((out.clean - x.clean_price()).abs() < 1e-10);
    }

    #[test]
    fn full_collateral_kills_credit_terms() {
        let out = quadrature_xva(&scenario(1.0), &OracleMeasure { discount: 0.03, carry: 0.025 }, 1e-10);
        assert_eq!(out.cva, 0.0);
        assert_eq!(out.dva, 0.0);
    }

    #[test]
    fn quadrature_tolerance_is_stable() {
        let m = OracleMeasure { discount: 0.03, carry: 0.025 };
        for alpha in [0.0, 0.8] {
            let a = quadrature_xva(&scenario(alpha), &m, 1e-10);
            let b = quadrature_xva(&scenario(alpha), &m, 5e-11);
            assert!((a.total - b.total).abs() < 1e-9);
            assert!((a.cva - b.cva).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_exposure_splits() {
        let mut x = scenario(0.0);
        x.kind = OptionKind::Forward;
        let m = OracleMeasure { discount: 0.02, carry: 0.02 };
        let out = quadrature_xva(&x, &m, 1e-10);
        assert!(out.cva > 0.0 && out.dva > 0.0);
        assert!((out.clean - x.clean_price()).abs() < 1e-9);
    }

    fn tree(f_lend: f64, f_borrow: f64) -> TreeInput {
        TreeInput {
            s0: 100.0,
            strike: 100.0,
            sigma: 0.2,
            maturity: 1.0,
            kind: OptionKind::Call,
            quantity: 1.0,
            r: 0.02,
            f_lend,
            f_borrow,
            h_lend: 0.025,
            h_borrow: 0.025,
            c_lend: 0.02,
            c_borrow: 0.02,
            alpha: 0.0,
            lambda_i: 0.0,
            lambda_c: 0.0,
            loss_i: 0.6,
            loss_c: 0.6,
        }
    }

    #[test]
    fn tree_matches_closed_form_in_linear_case() {
        let t = tree_reference(&tree(0.03, 0.03), 1000).unwrap();
        let bs = bs_carry_discount(&atm(0.025, 0.03), OptionKind::Call);
        assert!((t.value - bs).abs() < 1e-4, "{} vs {bs}", t.value);
        assert!((1.7..=2.3).contains(&t.convergence_ratio), "{}", t.convergence_ratio);
    }

    #[test]
    fn zero_strike_call_is_repo_forward() {
        let mut x = tree(0.02, 0.04);
        x.strike = 0.0;
        let v = brute_force_bsde(&x, 400);
        assert!((v - 100.0 * (0.025f64 - 0.04).exp()).abs() < 1e-9);
    }

    #[test]
    fn writer_and_buyer_prices_differ() {
        let buyer = tree(0.02, 0.04);
        let mut writer = buyer;
        writer.quantity = -1.0;
        let vb = brute_force_bsde(&buyer, 500);
        let vw = brute_force_bsde(&writer, 500);
        assert!(vb + vw < -0.1);
    }

    #[test]
    fn fair_borrow_rate_equals_loss_times_intensity() {
        let x = ExternalFundingInput {
            clean_price: 8.9,
            maturity: 1.0,
            r: 0.02,
            lambda_i: 0.01,
            lambda_c: 0.02,
            loss_i: 0.6,
            loss_c: 0.6,
        };
        let fb = calibrate_fair_borrow_rate(&x);
        assert!((fb - 0.026).abs() < 1e-10, "{fb}");
    }
}
