//! Matérn covariance evaluation and the modified Bessel function of the
//! second kind it requires.
//!
//! `bessel_k` reduces the order to a base u in [-1/2, 1/2], evaluates
//! (K_u, K_{u+1}) by a power series for x <= 2 and by a continued fraction
//! for x > 2, then recurs upward to the requested order. Upward recurrence
//! is stable for K since the function grows with the order.

use crate::dense::Mat;
use crate::error::{Error, Result};
use crate::geometry::PointSet;
use serde::{Deserialize, Serialize};

pub const DEFAULT_DENSE_CAP: usize = 8192;

/// Matérn covariance parameters (sigma^2, ell, nu) plus a diagonal nugget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaternParams {
    pub sigma2: f64,
    pub ell: f64,
    pub nu: f64,
    #[serde(default)]
    pub nugget: f64,
}

impl MaternParams {
    pub fn new(sigma2: f64, ell: f64, nu: f64, nugget: f64) -> Result<Self> {
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(Error::InvalidParameter(format!("sigma2 must be > 0, got {sigma2}")));
        }
        if !(ell > 0.0) || !ell.is_finite() {
            return Err(Error::InvalidParameter(format!("ell must be > 0, got {ell}")));
        }
        if !(nu > 0.0) || !nu.is_finite() {
            return Err(Error::InvalidParameter(format!("nu must be > 0, got {nu}")));
        }
        if !(nugget >= 0.0) || !nugget.is_finite() {
            return Err(Error::InvalidParameter(format!("nugget must be >= 0, got {nugget}")));
        }
        Ok(MaternParams { sigma2, ell, nu, nugget })
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.sigma2, self.ell, self.nu, self.nugget).map(|_| ())
    }

    pub fn with_nugget(&self, nugget: f64) -> Self {
        MaternParams { nugget, ..*self }
    }
}

// ---------------------------------------------------------------------------
// Gamma function machinery
// ---------------------------------------------------------------------------

// Lanczos (g = 7, 9 terms). Relative accuracy ~1e-14 on (0, 30).
const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// Gamma function for positive real argument.
pub fn gamma_fn(x: f64) -> f64 {
    if x < 0.5 {
        // reflection keeps the Lanczos argument away from 0
        std::f64::consts::PI / ((std::f64::consts::PI * x).sin() * gamma_fn(1.0 - x))
    } else {
        let z = x - 1.0;
        let mut s = LANCZOS_COEF[0];
        for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
            s += c / (z + i as f64);
        }
        let t = z + LANCZOS_G + 0.5;
        (2.0 * std::f64::consts::PI).sqrt() * t.powf(z + 0.5) * (-t).exp() * s
    }
}

// Taylor coefficients of 1/Gamma(z) = sum c_k z^k (Abramowitz & Stegun 6.1.34).
// Used as 1/Gamma(1+u) = sum c_k u^{k-1}, which converges to full precision
// for |u| <= 1/2 and gives cancellation-free even series for the Temme
// auxiliary functions gamma1, gamma2.
const RECIP_GAMMA_C: [f64; 26] = [
    1.000_000_000_000_000_0,
    0.577_215_664_901_532_9,
    -0.655_878_071_520_253_8,
    -0.042_002_635_034_095_2,
    0.166_538_611_382_291_5,
    -0.042_197_734_555_544_3,
    -0.009_621_971_527_877_0,
    0.007_218_943_246_663_0,
    -0.001_165_167_591_859_1,
    -0.000_215_241_674_114_9,
    0.000_128_050_282_388_2,
    -0.000_020_134_854_780_8,
    -0.000_001_250_493_482_1,
    0.000_001_133_027_232_0,
    -0.000_000_205_633_841_7,
    0.000_000_006_116_095_0,
    0.000_000_005_002_007_5,
    -0.000_000_001_181_274_6,
    0.000_000_000_104_342_7,
    0.000_000_000_007_782_3,
    -0.000_000_000_003_696_8,
    0.000_000_000_000_510_0,
    -0.000_000_000_000_020_6,
    -0.000_000_000_000_005_4,
    0.000_000_000_000_001_4,
    0.000_000_000_000_000_1,
];

/// 1/Gamma(1+u) for |u| <= 1/2.
fn recip_gamma_1p(u: f64) -> f64 {
    debug_assert!(u.abs() <= 0.5 + 1e-12);
    let mut s = 0.0;
    for &c in RECIP_GAMMA_C.iter().rev() {
        s = s * u + c;
    }
    s
}

/// gamma1(u) = [1/Gamma(1-u) - 1/Gamma(1+u)] / (2u), as an even series in u.
fn temme_gamma1(u: f64) -> f64 {
    let u2 = u * u;
    let mut s = 0.0;
    for j in (0..13).rev() {
        s = s * u2 + RECIP_GAMMA_C[2 * j + 1];
    }
    -s
}

/// gamma2(u) = [1/Gamma(1+u) + 1/Gamma(1-u)] / 2, as an even series in u.
fn temme_gamma2(u: f64) -> f64 {
    let u2 = u * u;
    let mut s = 0.0;
    for j in (0..13).rev() {
        s = s * u2 + RECIP_GAMMA_C[2 * j];
    }
    s
}

// ---------------------------------------------------------------------------
// Modified Bessel function of the second kind
// ---------------------------------------------------------------------------

const MAX_SERIES_ITER: usize = 500;

/// Per-order constants for K_nu, reusable across many arguments x. The
/// reciprocal tables remove all divisions from the series inner loop.
#[derive(Debug, Clone)]
struct BesselOrder {
    /// base order in [-1/2, 1/2]
    u: f64,
    /// number of upward recurrence steps; nu = |input| = n + u
    n: usize,
    gam1: f64,
    gam2: f64,
    /// 1/Gamma(1+u)
    rg_pos: f64,
    /// 1/Gamma(1-u)
    rg_neg: f64,
    /// u*pi / sin(u*pi), the removable-singularity factor at u = 0
    sin_factor: f64,
    /// 1/(k^2 - u^2), 1/(k - u), 1/(k + u), 1/k for k = 1..TABLE
    inv_k2mu2: Vec<f64>,
    inv_km: Vec<f64>,
    inv_kp: Vec<f64>,
    inv_k: Vec<f64>,
}

const SERIES_TABLE: usize = 64;

impl BesselOrder {
    fn new(nu: f64) -> Self {
        let nu = nu.abs(); // K_{-nu} = K_nu
        let n = nu.round();
        let u = nu - n;
        let upi = u * std::f64::consts::PI;
        let sin_factor = if upi.abs() < 1e-300 { 1.0 } else { upi / upi.sin() };
        let mut inv_k2mu2 = Vec::with_capacity(SERIES_TABLE + 1);
        let mut inv_km = Vec::with_capacity(SERIES_TABLE + 1);
        let mut inv_kp = Vec::with_capacity(SERIES_TABLE + 1);
        let mut inv_k = Vec::with_capacity(SERIES_TABLE + 1);
        inv_k2mu2.push(0.0);
        inv_km.push(0.0);
        inv_kp.push(0.0);
        inv_k.push(0.0);
        for k in 1..=SERIES_TABLE {
            let kf = k as f64;
            inv_k2mu2.push(1.0 / (kf * kf - u * u));
            inv_km.push(1.0 / (kf - u));
            inv_kp.push(1.0 / (kf + u));
            inv_k.push(1.0 / kf);
        }
        BesselOrder {
            u,
            n: n as usize,
            gam1: temme_gamma1(u),
            gam2: temme_gamma2(u),
            rg_pos: recip_gamma_1p(u),
            rg_neg: recip_gamma_1p(-u),
            sin_factor,
            inv_k2mu2,
            inv_km,
            inv_kp,
            inv_k,
        }
    }

    /// (K_u(x), K_{u+1}(x)) by the Temme power series; requires x <= 2.
    /// `lnx` must equal x.ln(); sharing it lets callers reuse the logarithm.
    fn base_series(&self, x: f64, lnx: f64) -> Result<(f64, f64)> {
        let u = self.u;
        let d = std::f64::consts::LN_2 - lnx; // -ln(x/2)
        let sigma = u * d;
        // (x/2)^u = e^{-sigma}: one exponential serves the power, cosh, sinh
        let es = sigma.exp();
        let es_inv = 1.0 / es;
        let cosh_s = 0.5 * (es + es_inv);
        let sinh_ratio = if sigma.abs() < 1e-8 {
            1.0 + sigma * sigma / 6.0
        } else {
            0.5 * (es - es_inv) / sigma
        };
        let mut f = self.sin_factor * (cosh_s * self.gam1 + sinh_ratio * d * self.gam2);
        let mut p = 0.5 * es / self.rg_pos;
        let mut q = 0.5 * es_inv / self.rg_neg;
        let mut coef = 1.0;
        let mut sum = f;
        let mut sum1 = p;
        let x2_4 = x * x * 0.25;
        for k in 1..=MAX_SERIES_ITER {
            let kf = k as f64;
            if k <= SERIES_TABLE {
                f = (kf * f + p + q) * self.inv_k2mu2[k];
                p *= self.inv_km[k];
                q *= self.inv_kp[k];
                coef *= x2_4 * self.inv_k[k];
            } else {
                f = (kf * f + p + q) / (kf * kf - u * u);
                p /= kf - u;
                q /= kf + u;
                coef *= x2_4 / kf;
            }
            let h = p - kf * f;
            sum += coef * f;
            sum1 += coef * h;
            if (coef * f).abs() < sum.abs() * f64::EPSILON {
                return Ok((sum, 2.0 * sum1 / x));
            }
        }
        Err(Error::InvalidParameter("bessel_k series failed to converge".into()))
    }

    /// (K_u(x), K_{u+1}(x)) by the Thompson-Barnett continued fraction;
    /// requires x > 1. Returns (0, 0) when e^{-x} underflows.
    fn base_cf(&self, x: f64) -> Result<(f64, f64)> {
        let v = self.u;
        let mut a = v * v - 0.25;
        let mut b = 2.0 * (x + 1.0);
        let mut d = 1.0 / b;
        let mut delta = d;
        let mut f = d;
        let mut prev = 0.0;
        let mut cur = 1.0;
        let mut q = -a;
        let mut c = -a;
        let mut s = 1.0 + q * delta;
        let mut converged = false;
        for k in 2..MAX_SERIES_ITER {
            let kf = k as f64;
            a -= 2.0 * (kf - 1.0);
            b += 2.0;
            d = 1.0 / (a * d + b);
            delta *= b * d - 1.0;
            f += delta;
            let t = (prev - (b - 2.0) * cur) / a;
            prev = cur;
            cur = t;
            c *= -a / kf;
            q += c * t;
            s += q * delta;
            if (q * delta).abs() < s.abs() * f64::EPSILON * 0.5 {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::InvalidParameter(
                "bessel_k continued fraction failed to converge".into(),
            ));
        }
        let ku = (std::f64::consts::PI / (2.0 * x)).sqrt() * (-x).exp() / s;
        let ku1 = ku * ((v * v - 0.25) * f + 0.5 + v + x) / x;
        Ok((ku, ku1))
    }

    fn eval(&self, x: f64) -> Result<f64> {
        self.eval_with_ln(x, x.ln())
    }

    fn eval_with_ln(&self, x: f64, lnx: f64) -> Result<f64> {
        let (mut prev, mut cur) =
            if x <= 2.0 { self.base_series(x, lnx)? } else { self.base_cf(x)? };
        if self.n == 0 {
            return Ok(prev);
        }
        for j in 1..self.n {
            let next = prev + (2.0 * (self.u + j as f64) / x) * cur;
            prev = cur;
            cur = next;
            if !cur.is_finite() {
                return Err(Error::Overflow("bessel_k recurrence overflow".into()));
            }
        }
        if !cur.is_finite() {
            return Err(Error::Overflow("bessel_k overflow".into()));
        }
        Ok(cur)
    }
}

/// Modified Bessel function of the second kind K_nu(x).
///
/// The symmetry K_{-nu} = K_nu is applied internally; x must be positive.
/// Results that underflow to zero for large x are returned as 0.
pub fn bessel_k(nu: f64, x: f64) -> Result<f64> {
    if !x.is_finite() || x <= 0.0 {
        return Err(Error::InvalidParameter(format!("bessel_k requires x > 0, got {x}")));
    }
    if !nu.is_finite() {
        return Err(Error::InvalidParameter("bessel_k requires finite nu".into()));
    }
    BesselOrder::new(nu).eval(x)
}

// ---------------------------------------------------------------------------
// Matérn covariance
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum MaternForm {
    /// nu = 1/2: sigma^2 exp(-t)
    Exponential,
    /// nu = 3/2: sigma^2 (1 + t) exp(-t)
    HalfThree,
    /// nu = 5/2: sigma^2 (1 + t + t^2/3) exp(-t)
    HalfFive,
    /// general order through K_nu
    General { order: BesselOrder, prefactor: f64 },
}

/// Precompiled Matérn kernel: parameter validation and per-order constants
/// are paid once, then `eval` is cheap enough for assembly inner loops.
#[derive(Debug, Clone)]
pub struct MaternKernel {
    params: MaternParams,
    inv_ell: f64,
    form: MaternForm,
}

impl MaternKernel {
    pub fn new(params: &MaternParams) -> Result<Self> {
        params.validate()?;
        let form = if params.nu == 0.5 {
            MaternForm::Exponential
        } else if params.nu == 1.5 {
            MaternForm::HalfThree
        } else if params.nu == 2.5 {
            MaternForm::HalfFive
        } else {
            let prefactor = params.sigma2 / (2f64.powf(params.nu - 1.0) * gamma_fn(params.nu));
            MaternForm::General { order: BesselOrder::new(params.nu), prefactor }
        };
        Ok(MaternKernel { params: *params, inv_ell: 1.0 / params.ell, form })
    }

    pub fn params(&self) -> &MaternParams {
        &self.params
    }

    /// Diagonal value: sigma^2 + nugget.
    pub fn diag(&self) -> f64 {
        self.params.sigma2 + self.params.nugget
    }

    /// Off-diagonal covariance at distance h >= 0 (no nugget; tends to
    /// sigma^2 as h -> 0).
    pub fn eval(&self, h: f64) -> f64 {
        let t = h * self.inv_ell;
        match &self.form {
            MaternForm::Exponential => self.params.sigma2 * (-t).exp(),
            MaternForm::HalfThree => self.params.sigma2 * (1.0 + t) * (-t).exp(),
            MaternForm::HalfFive => self.params.sigma2 * (1.0 + t + t * t / 3.0) * (-t).exp(),
            MaternForm::General { order, prefactor } => {
                if t == 0.0 {
                    return self.params.sigma2;
                }
                let lnt = t.ln();
                match order.eval_with_ln(t, lnt) {
                    Ok(k) => {
                        let v = prefactor * (self.params.nu * lnt).exp() * k;
                        // guard the h -> 0 rounding regime: the limit is sigma^2
                        if v.is_finite() {
                            v.min(self.params.sigma2)
                        } else {
                            self.params.sigma2
                        }
                    }
                    // K underflows to 0 far in the tail
                    Err(_) => 0.0,
                }
            }
        }
    }

    #[inline]
    pub fn eval_points(&self, a: [f64; 3], b: [f64; 3]) -> f64 {
        self.eval(dist3(a, b))
    }
}

#[inline]
pub fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Matérn covariance at distance h: the spec'd entry point with input
/// validation. h = 0 includes the nugget.
pub fn matern(h: f64, params: &MaternParams) -> Result<f64> {
    if !h.is_finite() || h < 0.0 {
        return Err(Error::InvalidParameter(format!("matern requires finite h >= 0, got {h}")));
    }
    let kernel = MaternKernel::new(params)?;
    if h == 0.0 {
        Ok(kernel.diag())
    } else {
        Ok(kernel.eval(h))
    }
}

/// Matérn evaluation forced through the Bessel path regardless of order,
/// for cross-checking the closed forms.
pub fn matern_bessel_path(h: f64, params: &MaternParams) -> Result<f64> {
    if !h.is_finite() || h < 0.0 {
        return Err(Error::InvalidParameter(format!("matern requires finite h >= 0, got {h}")));
    }
    params.validate()?;
    if h == 0.0 {
        return Ok(params.sigma2 + params.nugget);
    }
    let t = h / params.ell;
    let prefactor = params.sigma2 / (2f64.powf(params.nu - 1.0) * gamma_fn(params.nu));
    Ok(prefactor * t.powf(params.nu) * bessel_k(params.nu, t)?)
}

/// Exact dense covariance matrix in tree-permuted ordering. Symmetric by
/// construction: each entry is computed once and mirrored.
pub fn build_dense_covariance(points: &PointSet, params: &MaternParams, cap: usize) -> Result<Mat> {
    let n = points.len();
    if n > cap {
        return Err(Error::DenseCapExceeded { n, cap });
    }
    let kernel = MaternKernel::new(params)?;
    let inv = points.inv_perm();
    let coords: Vec<[f64; 3]> = inv.iter().map(|&i| points.point(i as usize)).collect();
    let mut c = Mat::zeros(n, n);
    for i in 0..n {
        c[(i, i)] = kernel.diag();
        for j in i + 1..n {
            let v = kernel.eval_points(coords[i], coords[j]);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn gamma_known_values() {
        assert!(rel(gamma_fn(0.5), std::f64::consts::PI.sqrt()) < 1e-14);
        assert!(rel(gamma_fn(1.0), 1.0) < 1e-14);
        assert!(rel(gamma_fn(5.0), 24.0) < 1e-14);
        assert!(rel(gamma_fn(10.0), 362_880.0) < 1e-13);
        // Gamma(1/3), reference value
        assert!(rel(gamma_fn(1.0 / 3.0), 2.678_938_534_707_747_6) < 1e-13);
    }

    #[test]
    fn recip_gamma_series_matches_lanczos() {
        for k in 0..=20 {
            let u = -0.5 + k as f64 * 0.05;
            let series = recip_gamma_1p(u);
            let direct = 1.0 / gamma_fn(1.0 + u);
            assert!(rel(series, direct) < 1e-13, "u={u}: {series} vs {direct}");
        }
    }

    #[test]
    fn bessel_half_integer_closed_forms() {
        // K_{1/2}(x) = sqrt(pi/(2x)) e^{-x}
        let k12 = bessel_k(0.5, 2.0).unwrap();
        let expect = (std::f64::consts::PI / 4.0).sqrt() * (-2.0f64).exp();
        assert!(rel(k12, expect) < 1e-13, "{k12} vs {expect}");
        // K_{3/2}(1) = sqrt(pi/2) e^{-1} (1 + 1)
        let k32 = bessel_k(1.5, 1.0).unwrap();
        let expect = (std::f64::consts::PI / 2.0).sqrt() * (-1.0f64).exp() * 2.0;
        assert!(rel(k32, expect) < 1e-13);
        // K_{5/2}(x) = sqrt(pi/(2x)) e^{-x} (1 + 3/x + 3/x^2)
        for &x in &[0.3, 1.0, 2.0, 3.7, 20.0] {
            let k52 = bessel_k(2.5, x).unwrap();
            let expect = (std::f64::consts::PI / (2.0 * x)).sqrt() * (-x).exp() * (1.0 + 3.0 / x + 3.0 / (x * x));
            assert!(rel(k52, expect) < 1e-12, "x={x}");
        }
    }

    #[test]
    fn bessel_recurrence_property() {
        // K_{v+1}(x) = K_{v-1}(x) + (2v/x) K_v(x)
        for &(v, x) in &[(1.0, 0.7), (2.3, 1.9), (0.8, 3.0), (4.6, 10.0), (7.2, 0.05), (9.5, 30.0)] {
            let km = bessel_k(v - 1.0, x).unwrap();
            let k0 = bessel_k(v, x).unwrap();
            let kp = bessel_k(v + 1.0, x).unwrap();
            let rhs = km + (2.0 * v / x) * k0;
            assert!(rel(kp, rhs) < 1e-10, "v={v} x={x}: {kp} vs {rhs}");
        }
    }

    #[test]
    fn bessel_rejects_bad_inputs_and_underflows_to_zero() {
        assert!(bessel_k(1.0, 0.0).is_err());
        assert!(bessel_k(1.0, -1.0).is_err());
        assert!(bessel_k(f64::NAN, 1.0).is_err());
        assert_eq!(bessel_k(0.5, 800.0).unwrap(), 0.0);
        // symmetry in the order
        let a = bessel_k(-1.3, 0.9).unwrap();
        let b = bessel_k(1.3, 0.9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn matern_zero_lag_and_exponential() {
        let p = MaternParams::new(2.5, 0.1, 0.5, 0.0).unwrap();
        assert_eq!(matern(0.0, &p).unwrap(), 2.5);
        let p = MaternParams::new(1.0, 0.1, 0.5, 0.0).unwrap();
        let v = matern(0.1, &p).unwrap();
        assert!(rel(v, (-1.0f64).exp()) < 1e-15);
        let pn = MaternParams::new(1.0, 0.1, 0.5, 1e-8).unwrap();
        assert_eq!(matern(0.0, &pn).unwrap(), 1.0 + 1e-8);
    }

    #[test]
    fn matern_closed_forms_match_bessel_path() {
        for &nu in &[0.5, 1.5, 2.5] {
            let p = MaternParams::new(1.7, 0.23, nu, 0.0).unwrap();
            for &h in &[1e-3, 0.05, 0.2, 0.9, 3.0] {
                let closed = matern(h, &p).unwrap();
                let general = matern_bessel_path(h, &p).unwrap();
                assert!(rel(closed, general) < 1e-10, "nu={nu} h={h}: {closed} vs {general}");
            }
        }
    }

    #[test]
    fn matern_continuous_at_zero_general_order() {
        let p = MaternParams::new(1.0, 0.2, 1.7, 0.0).unwrap();
        let v = matern_bessel_path(1e-10 * p.ell, &p).unwrap();
        assert!((v - p.sigma2).abs() < 1e-8, "{v}");
    }

    #[test]
    fn matern_monotone_nonincreasing() {
        for &nu in &[0.5, 0.8, 1.5, 1.7, 2.5, 3.3] {
            let p = MaternParams::new(1.3, 0.37, nu, 0.0).unwrap();
            let kernel = MaternKernel::new(&p).unwrap();
            let mut last = f64::INFINITY;
            for k in 0..200 {
                let h = k as f64 * 0.02;
                let v = kernel.eval(h);
                assert!(v <= last + 1e-12, "nu={nu} h={h}");
                last = v;
            }
        }
    }

    #[test]
    fn matern_rejects_bad_inputs() {
        let p = MaternParams::new(1.0, 1.0, 1.0, 0.0).unwrap();
        assert!(matern(f64::NAN, &p).is_err());
        assert!(matern(-0.1, &p).is_err());
        assert!(MaternParams::new(0.0, 1.0, 1.0, 0.0).is_err());
        assert!(MaternParams::new(1.0, -1.0, 1.0, 0.0).is_err());
        assert!(MaternParams::new(1.0, 1.0, 0.0, 0.0).is_err());
        assert!(MaternParams::new(1.0, 1.0, 1.0, -1e-9).is_err());
    }

    #[test]
    fn dense_covariance_small_cases() {
        // n = 1
        let mut ps = PointSet::new(vec![vec![0.0, 0.0]]).unwrap();
        crate::geometry::build_cluster_tree(&mut ps, 32).unwrap();
        let p = MaternParams::new(1.5, 0.1, 0.5, 0.0).unwrap();
        let c = build_dense_covariance(&ps, &p, DEFAULT_DENSE_CAP).unwrap();
        assert_eq!(c.nrows(), 1);
        assert_eq!(c[(0, 0)], 1.5);

        // duplicate points with a nugget stay positive definite
        let mut ps = PointSet::new(vec![vec![0.3, 0.3], vec![0.3, 0.3]]).unwrap();
        crate::geometry::build_cluster_tree(&mut ps, 32).unwrap();
        let p = MaternParams::new(1.0, 0.1, 0.5, 1e-8).unwrap();
        let mut c = build_dense_covariance(&ps, &p, DEFAULT_DENSE_CAP).unwrap();
        assert_eq!(c[(0, 1)], 1.0);
        assert_eq!(c[(0, 0)], 1.0 + 1e-8);
        assert!(crate::dense::cholesky_lower(&mut c).is_ok());
    }

    #[test]
    fn dense_covariance_2x2_mesh_exponential() {
        let mut ps = crate::geometry::generate_perturbed_mesh(2, 0.0, 0).unwrap();
        crate::geometry::build_cluster_tree(&mut ps, 32).unwrap();
        let p = MaternParams::new(1.0, 0.1, 0.5, 0.0).unwrap();
        let c = build_dense_covariance(&ps, &p, DEFAULT_DENSE_CAP).unwrap();
        // distances on the unperturbed 2x2 mesh: 0, 0.5, 0.5*sqrt(2)
        let inv = ps.inv_perm();
        for a in 0..4 {
            for b in 0..4 {
                let pa = ps.point(inv[a] as usize);
                let pb = ps.point(inv[b] as usize);
                let h = dist3(pa, pb);
                let expect = matern(h, &p).unwrap();
                assert!((c[(a, b)] - expect).abs() < 1e-15);
            }
        }
        assert!((c[(0, 1)] - (-5.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn dense_cap_enforced() {
        let mut ps = crate::geometry::generate_perturbed_mesh(3, 0.0, 0).unwrap();
        crate::geometry::build_cluster_tree(&mut ps, 4).unwrap();
        let p = MaternParams::new(1.0, 0.1, 0.5, 0.0).unwrap();
        match build_dense_covariance(&ps, &p, 4) {
            Err(Error::DenseCapExceeded { n, cap }) => {
                assert_eq!((n, cap), (9, 4));
            }
            other => panic!("expected cap error, got {other:?}"),
        }
    }
}
