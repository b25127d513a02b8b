//! Seasonal ARIMA: differencing, exact Gaussian likelihood through a Kalman
//! filter on the expanded ARMA, maximum-likelihood fitting and forecasting.
//!
//! Sign conventions: the AR polynomial is `1 − φ₁B − … − φ_pB^p` and the MA
//! polynomial `1 + θ₁B + … + θ_qB^q`, seasonal factors alike in `B^s`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::classical::optim::{nelder_mead, NelderMeadOptions};
use crate::error::{Error, Result};
use crate::forecast::ForecastDistribution;

const LN_2PI: f64 = 1.8378770664093453;
/// Bound on transformed partial autocorrelations; keeps every root strictly
/// outside the unit circle.
const PACF_BOUND: f64 = 0.999;
/// Roots must clear the unit circle by this margin.
pub const ROOT_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SarimaOrder {
    pub p: usize,
    pub d: usize,
    pub q: usize,
    pub seasonal_p: usize,
    pub seasonal_d: usize,
    pub seasonal_q: usize,
    pub season: usize,
}

impl SarimaOrder {
    pub fn new(p: usize, d: usize, q: usize, sp: usize, sd: usize, sq: usize, season: usize) -> Result<Self> {
        let o = Self {
            p,
            d,
            q,
            seasonal_p: sp,
            seasonal_d: sd,
            seasonal_q: sq,
            season,
        };
        o.validate()?;
        Ok(o)
    }

    /// Non-seasonal ARIMA(p, d, q).
    pub fn arima(p: usize, d: usize, q: usize) -> Self {
        Self::new(p, d, q, 0, 0, 0, 1).expect("non-seasonal order within bounds")
    }

    pub fn validate(&self) -> Result<()> {
        if self.p > 5 || self.q > 5 || self.seasonal_p > 2 || self.seasonal_q > 2 || self.d > 2 || self.seasonal_d > 1 || self.season == 0 {
            return Err(Error::Config(format!("SARIMA order {self} outside the search bounds")));
        }
        Ok(())
    }

    /// Intercept is estimated only for undifferenced models.
    pub fn has_intercept(&self) -> bool {
        self.d + self.seasonal_d == 0
    }

    /// Free parameters excluding σ².
    pub fn n_coefficients(&self) -> usize {
        self.p + self.q + self.seasonal_p + self.seasonal_q + self.has_intercept() as usize
    }

    fn differencing_loss(&self) -> usize {
        self.d + self.seasonal_d * self.season
    }

    /// Minimum series length accepted by [`fit_sarima`].
    pub fn min_length(&self) -> usize {
        10 + self.differencing_loss() + self.n_coefficients()
    }
}

impl std::fmt::Display for SarimaOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({},{},{})({},{},{})[{}]",
            self.p, self.d, self.q, self.seasonal_p, self.seasonal_d, self.seasonal_q, self.season
        )
    }
}

/// Model coefficients. `sigma2` is the innovation variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SarimaParams {
    pub ar: Vec<f64>,
    pub ma: Vec<f64>,
    pub sar: Vec<f64>,
    pub sma: Vec<f64>,
    pub intercept: f64,
    pub sigma2: f64,
}

impl SarimaParams {
    pub fn zeros(order: &SarimaOrder) -> Self {
        Self {
            ar: vec![0.0; order.p],
            ma: vec![0.0; order.q],
            sar: vec![0.0; order.seasonal_p],
            sma: vec![0.0; order.seasonal_q],
            intercept: 0.0,
            sigma2: 1.0,
        }
    }

    fn check(&self, order: &SarimaOrder) -> Result<()> {
        if self.ar.len() != order.p || self.ma.len() != order.q || self.sar.len() != order.seasonal_p || self.sma.len() != order.seasonal_q {
            return Err(Error::Contract(format!("coefficient lengths do not match order {order}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SarimaFit {
    pub order: SarimaOrder,
    pub ar: Vec<f64>,
    pub ma: Vec<f64>,
    pub sar: Vec<f64>,
    pub sma: Vec<f64>,
    pub intercept: f64,
    pub sigma2: f64,
    pub loglik: f64,
    pub aic: f64,
    pub n_obs: usize,
}

impl SarimaFit {
    pub fn params(&self) -> SarimaParams {
        SarimaParams {
            ar: self.ar.clone(),
            ma: self.ma.clone(),
            sar: self.sar.clone(),
            sma: self.sma.clone(),
            intercept: self.intercept,
            sigma2: self.sigma2,
        }
    }
}

/// `2k − 2·loglik`.
pub fn aic(loglik: f64, k: usize) -> f64 {
    2.0 * k as f64 - 2.0 * loglik
}

/// Coefficients of `(1 − B)^d (1 − B^s)^D` as `[1, δ₁, δ₂, …]`.
pub fn differencing_polynomial(d: usize, seasonal_d: usize, season: usize) -> Vec<f64> {
    let mut poly = vec![1.0];
    for _ in 0..d {
        poly = poly_mul(&poly, &[1.0, -1.0]);
    }
    for _ in 0..seasonal_d {
        let mut f = vec![0.0; season + 1];
        f[0] = 1.0;
        f[season] = -1.0;
        poly = poly_mul(&poly, &f);
    }
    poly
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Apply `(1 − B)^d (1 − B^s)^D`; the result is `d + D·s` shorter.
pub fn difference(series: &[f64], d: usize, seasonal_d: usize, season: usize) -> Result<Vec<f64>> {
    let poly = differencing_polynomial(d, seasonal_d, season);
    let lag = poly.len() - 1;
    if series.len() <= lag {
        return Err(Error::History(format!(
            "series of {} points cannot absorb {lag} lags of differencing",
            series.len()
        )));
    }
    Ok((lag..series.len())
        .map(|t| poly.iter().enumerate().map(|(j, c)| c * series[t - j]).sum())
        .collect())
}

/// Invert [`difference`] given the first `d + D·s` original values.
pub fn integrate(diffed: &[f64], initial: &[f64], d: usize, seasonal_d: usize, season: usize) -> Result<Vec<f64>> {
    let poly = differencing_polynomial(d, seasonal_d, season);
    let lag = poly.len() - 1;
    if initial.len() != lag {
        return Err(Error::Contract(format!("integration needs {lag} initial values, got {}", initial.len())));
    }
    let mut out = initial.to_vec();
    for &w in diffed {
        let t = out.len();
        let x = w - (1..=lag).map(|j| poly[j] * out[t - j]).sum::<f64>();
        out.push(x);
    }
    Ok(out)
}

/// Continue `history` with values whose differences are `future_diffs`.
fn integrate_forward(history: &[f64], future_diffs: &[f64], poly: &[f64]) -> Vec<f64> {
    let lag = poly.len() - 1;
    let mut buf = history[history.len() - lag..].to_vec();
    for &w in future_diffs {
        let t = buf.len();
        let x = w - (1..=lag).map(|j| poly[j] * buf[t - j]).sum::<f64>();
        buf.push(x);
    }
    buf[lag..].to_vec()
}

/// Expanded AR coefficients `φ*` of `φ(B)Φ(B^s)` so that
/// `w_t = Σ φ*_k w_{t−k} + …`.
fn expand_ar(ar: &[f64], sar: &[f64], s: usize) -> Vec<f64> {
    let mut reg = vec![1.0];
    reg.extend(ar.iter().map(|a| -a));
    let mut seas = vec![0.0; sar.len() * s + 1];
    seas[0] = 1.0;
    for (i, a) in sar.iter().enumerate() {
        seas[(i + 1) * s] = -a;
    }
    poly_mul(&reg, &seas)[1..].iter().map(|c| -c).collect()
}

/// Expanded MA coefficients of `θ(B)Θ(B^s)`, without the leading 1.
fn expand_ma(ma: &[f64], sma: &[f64], s: usize) -> Vec<f64> {
    let mut reg = vec![1.0];
    reg.extend_from_slice(ma);
    let mut seas = vec![0.0; sma.len() * s + 1];
    seas[0] = 1.0;
    for (i, a) in sma.iter().enumerate() {
        seas[(i + 1) * s] = *a;
    }
    poly_mul(&reg, &seas)[1..].to_vec()
}

/// Map unconstrained reals to coefficients of a stationary AR polynomial
/// via partial autocorrelations and the Durbin-Levinson recursion.
pub fn pacf_to_ar(raw: &[f64]) -> Vec<f64> {
    let pacf: Vec<f64> = raw.iter().map(|u| PACF_BOUND * u.tanh()).collect();
    let mut phi: Vec<f64> = Vec::with_capacity(pacf.len());
    for (k, &r) in pacf.iter().enumerate() {
        let prev = phi.clone();
        for j in 0..k {
            phi[j] = prev[j] - r * prev[k - 1 - j];
        }
        phi.push(r);
    }
    phi
}

/// Inverse of [`pacf_to_ar`] for coefficients inside the stationary region.
pub fn ar_to_pacf(phi: &[f64]) -> Vec<f64> {
    let mut cur = phi.to_vec();
    let mut raw = vec![0.0; phi.len()];
    for k in (0..phi.len()).rev() {
        let r = cur[k].clamp(-PACF_BOUND + 1e-9, PACF_BOUND - 1e-9);
        raw[k] = (r / PACF_BOUND).atanh();
        let denom = 1.0 - r * r;
        let prev: Vec<f64> = (0..k).map(|j| (cur[j] + r * cur[k - 1 - j]) / denom).collect();
        cur = prev;
    }
    raw
}

/// Largest modulus of the reciprocal roots of `1 − c₁z − … − c_nz^n`. The
/// polynomial's roots lie outside the unit circle iff this is below 1.
pub fn max_inverse_root(coeffs: &[f64]) -> f64 {
    let n = coeffs.len();
    if n == 0 || coeffs.iter().all(|&c| c == 0.0) {
        return 0.0;
    }
    let mut companion = DMatrix::<f64>::zeros(n, n);
    for (j, c) in coeffs.iter().enumerate() {
        companion[(0, j)] = *c;
    }
    for i in 1..n {
        companion[(i, i - 1)] = 1.0;
    }
    companion
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// True when every AR and MA factor has all roots with modulus > 1 + margin.
pub fn is_stationary_invertible(fit: &SarimaFit) -> bool {
    let ok = |c: &[f64]| max_inverse_root(c) < 1.0 / (1.0 + ROOT_MARGIN);
    let neg = |c: &[f64]| c.iter().map(|x| -x).collect::<Vec<_>>();
    ok(&fit.ar) && ok(&fit.sar) && ok(&neg(&fit.ma)) && ok(&neg(&fit.sma))
}

/// Harvey state-space form of a stationary ARMA with unit innovation
/// variance: `α_t = T α_{t−1} + R ε_t`, `w_t = α_t[0]`.
struct StateSpace {
    dim: usize,
    /// First column of T.
    phi: Vec<f64>,
    /// R = [1, θ₁, …, θ_{dim−1}].
    r: Vec<f64>,
}

impl StateSpace {
    fn new(phi: &[f64], theta: &[f64]) -> Self {
        let dim = phi.len().max(theta.len() + 1);
        let mut p = vec![0.0; dim];
        p[..phi.len()].copy_from_slice(phi);
        let mut r = vec![0.0; dim];
        r[0] = 1.0;
        r[1..=theta.len()].copy_from_slice(theta);
        Self { dim, phi: p, r }
    }

    fn transition(&self, a: &[f64]) -> Vec<f64> {
        let n = self.dim;
        (0..n)
            .map(|i| self.phi[i] * a[0] + if i + 1 < n { a[i + 1] } else { 0.0 })
            .collect()
    }

    /// Stationary state covariance `P = T P Tᵀ + R Rᵀ` by the doubling
    /// iteration `P ← P + A P Aᵀ`, `A ← A²`.
    fn stationary_covariance(&self) -> Result<Vec<f64>> {
        let n = self.dim;
        let mut p: Vec<f64> = (0..n * n).map(|k| self.r[k / n] * self.r[k % n]).collect();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            a[i * n] = self.phi[i];
            if i + 1 < n {
                a[i * n + i + 1] = 1.0;
            }
        }
        let mut tmp = vec![0.0; n * n];
        let mut apa = vec![0.0; n * n];
        for _ in 0..60 {
            // apa = A P Aᵀ
            crate::tensor::graph::gemm(n, n, n, &a, &p, &mut tmp);
            unsafe {
                matrixmultiply::dgemm(
                    n, n, n, 1.0,
                    tmp.as_ptr(), n as isize, 1,
                    a.as_ptr(), 1, n as isize,
                    0.0,
                    apa.as_mut_ptr(), n as isize, 1,
                );
            }
            let scale = p.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let delta = apa.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            for (pi, d) in p.iter_mut().zip(&apa) {
                *pi += d;
            }
            if !scale.is_finite() {
                break;
            }
            if delta <= 1e-12 * scale {
                return Ok(p);
            }
            crate::tensor::graph::gemm(n, n, n, &a, &a, &mut tmp);
            std::mem::swap(&mut a, &mut tmp);
        }
        Err(Error::Numerics("stationary state covariance did not converge".into()))
    }
}

/// Sufficient statistics of one filter pass with unit innovation variance.
struct FilterPass {
    n: usize,
    sum_log_f: f64,
    sum_sq: f64,
    /// Predicted state and covariance for the step after the sample.
    next_state: Vec<f64>,
}

fn kalman(ss: &StateSpace, w: &[f64]) -> Result<FilterPass> {
    let n = ss.dim;
    let (phi, r) = (&ss.phi, &ss.r);
    let mut p = ss.stationary_covariance()?;
    let mut next_p = vec![0.0; n * n];
    let mut a = vec![0.0; n];
    let mut filtered = vec![0.0; n];
    let mut pe = vec![0.0; n];
    let mut sum_log_f = 0.0;
    let mut sum_sq = 0.0;
    let mut steady: Option<(Vec<f64>, f64)> = None;
    for &y in w {
        let v = y - a[0];
        if let Some((gain, f)) = &steady {
            sum_log_f += f.ln();
            sum_sq += v * v / f;
            let a0 = a[0];
            for i in 0..n {
                let below = if i + 1 < n { a[i + 1] } else { 0.0 };
                a[i] = phi[i] * a0 + below + gain[i] * v;
            }
            continue;
        }
        let f = p[0];
        if !(f > 0.0) || !f.is_finite() {
            return Err(Error::Numerics(format!("innovation variance {f} lost positivity")));
        }
        sum_log_f += f.ln();
        sum_sq += v * v / f;
        for i in 0..n {
            pe[i] = p[i * n];
            filtered[i] = a[i] + pe[i] * v / f;
        }
        // next = T (P − pe peᵀ/f) Tᵀ + R Rᵀ, expanded through the companion
        // structure of T without forming the filtered covariance.
        let m = |i: usize, j: usize| -> f64 {
            if i >= n || j >= n {
                0.0
            } else {
                p[i * n + j] - pe[i] * pe[j] / f
            }
        };
        let m00 = m(0, 0);
        let mut change = 0.0f64;
        for i in 0..n {
            let mi0 = m(i + 1, 0);
            for j in i..n {
                let val = phi[i] * phi[j] * m00 + phi[i] * m(0, j + 1) + phi[j] * mi0 + m(i + 1, j + 1) + r[i] * r[j];
                change = change.max((val - p[i * n + j]).abs());
                next_p[i * n + j] = val;
                next_p[j * n + i] = val;
            }
        }
        for i in 0..n {
            let below = if i + 1 < n { filtered[i + 1] } else { 0.0 };
            a[i] = phi[i] * filtered[0] + below;
        }
        std::mem::swap(&mut p, &mut next_p);
        if change < 1e-9 * p[0].abs().max(1.0) {
            // Gain K = T P e1 / f with P frozen.
            let f = p[0];
            for i in 0..n {
                pe[i] = p[i * n] / f;
            }
            steady = Some((ss.transition(&pe), f));
        }
    }
    Ok(FilterPass {
        n: w.len(),
        sum_log_f,
        sum_sq,
        next_state: a,
    })
}

fn state_space_for(order: &SarimaOrder, params: &SarimaParams) -> StateSpace {
    let phi = expand_ar(&params.ar, &params.sar, order.season);
    let theta = expand_ma(&params.ma, &params.sma, order.season);
    StateSpace::new(&phi, &theta)
}

fn centered(order: &SarimaOrder, params: &SarimaParams, series: &[f64]) -> Result<Vec<f64>> {
    let mut w = difference(series, order.d, order.seasonal_d, order.season)?;
    if order.has_intercept() {
        w.iter_mut().for_each(|x| *x -= params.intercept);
    }
    Ok(w)
}

/// Exact Gaussian log-likelihood of the differenced series at the given
/// coefficients and innovation variance.
pub fn sarima_loglik(order: &SarimaOrder, params: &SarimaParams, series: &[f64]) -> Result<f64> {
    params.check(order)?;
    if !(params.sigma2 > 0.0) {
        return Err(Error::Domain(format!("σ² = {} must be > 0", params.sigma2)));
    }
    let w = centered(order, params, series)?;
    let pass = kalman(&state_space_for(order, params), &w)?;
    Ok(-0.5 * (pass.n as f64 * (LN_2PI + params.sigma2.ln()) + pass.sum_log_f + pass.sum_sq / params.sigma2))
}

/// Log-likelihood with σ² profiled out; returns `(loglik, σ̂²)`.
fn concentrated_loglik(order: &SarimaOrder, params: &SarimaParams, series: &[f64]) -> Result<(f64, f64)> {
    let w = centered(order, params, series)?;
    let pass = kalman(&state_space_for(order, params), &w)?;
    let n = pass.n as f64;
    let sigma2 = pass.sum_sq / n;
    if !(sigma2 > 0.0) {
        return Err(Error::Numerics("zero residual variance".into()));
    }
    Ok((-0.5 * (n * (LN_2PI + sigma2.ln() + 1.0) + pass.sum_log_f), sigma2))
}

/// Unconstrained parameter vector layout: ar, ma, sar, sma, intercept.
struct Packing {
    order: SarimaOrder,
    mean: f64,
    scale: f64,
}

impl Packing {
    fn unpack(&self, x: &[f64]) -> SarimaParams {
        let o = &self.order;
        let mut at = 0;
        let mut take = |k: usize| {
            let s = &x[at..at + k];
            at += k;
            s
        };
        let ar = pacf_to_ar(take(o.p));
        let ma: Vec<f64> = pacf_to_ar(take(o.q)).iter().map(|c| -c).collect();
        let sar = pacf_to_ar(take(o.seasonal_p));
        let sma: Vec<f64> = pacf_to_ar(take(o.seasonal_q)).iter().map(|c| -c).collect();
        let intercept = if o.has_intercept() { self.mean + self.scale * take(1)[0] } else { 0.0 };
        SarimaParams { ar, ma, sar, sma, intercept, sigma2: 1.0 }
    }
}

fn sample_pacf(w: &[f64], max_lag: usize) -> Vec<f64> {
    let n = w.len();
    let mean = w.iter().sum::<f64>() / n as f64;
    let c0: f64 = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    if c0 == 0.0 || max_lag == 0 {
        return vec![0.0; max_lag];
    }
    let acf: Vec<f64> = (0..=max_lag)
        .map(|k| {
            if k >= n {
                return 0.0;
            }
            (k..n).map(|t| (w[t] - mean) * (w[t - k] - mean)).sum::<f64>() / (n as f64 * c0)
        })
        .collect();
    // Durbin-Levinson on the sample autocorrelations.
    let mut phi: Vec<f64> = Vec::new();
    let mut out = Vec::with_capacity(max_lag);
    let mut v = 1.0;
    for k in 1..=max_lag {
        let num = acf[k] - phi.iter().enumerate().map(|(j, p)| p * acf[k - 1 - j]).sum::<f64>();
        let r = if v > 1e-12 { (num / v).clamp(-0.95, 0.95) } else { 0.0 };
        let prev = phi.clone();
        for j in 0..prev.len() {
            phi[j] = prev[j] - r * prev[prev.len() - 1 - j];
        }
        phi.push(r);
        v *= 1.0 - r * r;
        out.push(r);
    }
    out
}

/// How [`fit_sarima_with`] estimates coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    /// Conditional sum of squares only. Fast, used during order search.
    Css,
    /// Exact likelihood from the moment-based start.
    Ml,
    /// Conditional sum of squares for the start, then exact likelihood.
    #[default]
    CssMl,
}

/// Conditional-sum-of-squares log-likelihood with σ² profiled out. Every
/// order conditions on the same leading values (the largest AR lag allowed
/// by the bounds), so values are comparable across orders with equal
/// differencing.
fn css_loglik(order: &SarimaOrder, params: &SarimaParams, series: &[f64]) -> Result<(f64, f64)> {
    let w = centered(order, params, series)?;
    let phi = expand_ar(&params.ar, &params.sar, order.season);
    let theta = expand_ma(&params.ma, &params.sma, order.season);
    let start = phi.len().max(5 + 2 * order.season).min(w.len() / 2);
    if w.len() <= start + 1 {
        return Err(Error::History("too few points to condition on".into()));
    }
    let mut e = vec![0.0; w.len()];
    let mut ss = 0.0;
    for t in start..w.len() {
        let mut v = w[t];
        for (k, c) in phi.iter().enumerate() {
            v -= c * w[t - 1 - k];
        }
        for (j, c) in theta.iter().enumerate().take(t) {
            v -= c * e[t - 1 - j];
        }
        e[t] = v;
        ss += v * v;
    }
    let n = (w.len() - start) as f64;
    let sigma2 = ss / n;
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(Error::Numerics("degenerate conditional residual variance".into()));
    }
    Ok((-0.5 * n * (LN_2PI + sigma2.ln() + 1.0), sigma2))
}

/// Fit with the default [`FitMethod::CssMl`].
pub fn fit_sarima(series: &[f64], order: &SarimaOrder) -> Result<SarimaFit> {
    fit_sarima_with(series, order, FitMethod::CssMl)
}

/// Estimate coefficients by Nelder-Mead over the unconstrained
/// partial-autocorrelation parametrization. The moment-based start uses
/// sample partial autocorrelations of the differenced series.
pub fn fit_sarima_with(series: &[f64], order: &SarimaOrder, method: FitMethod) -> Result<SarimaFit> {
    order.validate()?;
    if series.len() < order.min_length() {
        return Err(Error::History(format!(
            "order {order} needs {} points, got {}",
            order.min_length(),
            series.len()
        )));
    }
    if series.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("series contains non-finite values".into()));
    }
    let w = difference(series, order.d, order.seasonal_d, order.season)?;
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let sd = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd == 0.0 {
        return Err(Error::Numerics(format!("differenced series is constant under {order}")));
    }
    let packing = Packing { order: *order, mean, scale: sd };

    let mut x0 = Vec::with_capacity(order.n_coefficients());
    let regular = sample_pacf(&w, order.p);
    x0.extend(regular.iter().map(|r| (r / PACF_BOUND).atanh()));
    x0.extend(std::iter::repeat_n(0.0, order.q));
    let seasonal = sample_pacf(&w, order.seasonal_p * order.season);
    for k in 1..=order.seasonal_p {
        let r = seasonal[k * order.season - 1];
        x0.push((r / PACF_BOUND).atanh() * 0.5);
    }
    x0.extend(std::iter::repeat_n(0.0, order.seasonal_q));
    if order.has_intercept() {
        x0.push(0.0);
    }

    let dim = x0.len();
    let opts = NelderMeadOptions {
        max_evals: 200 * (dim + 1),
        ..NelderMeadOptions::default()
    };
    let minimize = |objective: &dyn Fn(&[f64]) -> f64, start: &[f64], restart: bool| {
        let mut best = nelder_mead(objective, start, &opts);
        // One restart from the optimum guards against a collapsed simplex.
        if restart && dim > 0 {
            let again = nelder_mead(objective, &best.x, &opts);
            if again.f <= best.f {
                best = again;
            }
        }
        best
    };
    let css = |x: &[f64]| -> f64 {
        css_loglik(order, &packing.unpack(x), series).map_or(f64::INFINITY, |(ll, _)| -ll / n)
    };
    let exact = |x: &[f64]| -> f64 {
        concentrated_loglik(order, &packing.unpack(x), series).map_or(f64::INFINITY, |(ll, _)| -ll / n)
    };
    let best = match method {
        FitMethod::Css => minimize(&css, &x0, true),
        FitMethod::Ml => minimize(&exact, &x0, true),
        FitMethod::CssMl => {
            let start = minimize(&css, &x0, true);
            if start.f.is_finite() {
                // Already near the optimum: a short polish suffices.
                let polish = NelderMeadOptions {
                    max_evals: 100 * (dim + 1),
                    initial_step: 0.05,
                    ..opts.clone()
                };
                nelder_mead(&exact, &start.x, &polish)
            } else {
                minimize(&exact, &x0, true)
            }
        }
    };
    if !best.f.is_finite() {
        return Err(Error::Convergence(format!("no finite likelihood found for {order}")));
    }
    if !best.converged && dim > 0 {
        log::debug!("order {order}: simplex stopped after {} evaluations", best.evals);
    }
    let params = packing.unpack(&best.x);
    let (loglik, sigma2) = match method {
        FitMethod::Css => css_loglik(order, &params, series)?,
        _ => concentrated_loglik(order, &params, series)?,
    };
    let k = order.n_coefficients() + 1;
    let fit = SarimaFit {
        order: *order,
        ar: params.ar,
        ma: params.ma,
        sar: params.sar,
        sma: params.sma,
        intercept: params.intercept,
        sigma2,
        loglik,
        aic: aic(loglik, k),
        n_obs: w.len(),
    };
    if !is_stationary_invertible(&fit) {
        return Err(Error::Convergence(format!("fit of {order} left the stationary region")));
    }
    Ok(fit)
}

/// ψ-weights of `θ(B)Θ(B^s) / (φ(B)Φ(B^s)(1−B)^d(1−B^s)^D)`.
fn psi_weights(fit: &SarimaFit, horizon: usize) -> Vec<f64> {
    let o = &fit.order;
    let phi = expand_ar(&fit.ar, &fit.sar, o.season);
    let mut ar_poly = vec![1.0];
    ar_poly.extend(phi.iter().map(|c| -c));
    let full = poly_mul(&ar_poly, &differencing_polynomial(o.d, o.seasonal_d, o.season));
    let theta = expand_ma(&fit.ma, &fit.sma, o.season);
    let mut psi = vec![0.0; horizon];
    for j in 0..horizon {
        let mut v = if j == 0 { 1.0 } else { theta.get(j - 1).copied().unwrap_or(0.0) };
        for k in 1..=j.min(full.len() - 1) {
            v -= full[k] * psi[j - k];
        }
        psi[j] = v;
    }
    psi
}

/// Point forecasts and Gaussian standard deviations on the original scale.
pub fn sarima_predict(fit: &SarimaFit, series: &[f64], horizon: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let o = &fit.order;
    let params = fit.params();
    let w = centered(o, &params, series)?;
    let ss = state_space_for(o, &params);
    let pass = kalman(&ss, &w)?;
    let mut state = pass.next_state;
    let mut diffs = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        diffs.push(state[0] + params.intercept);
        state = ss.transition(&state);
    }
    let poly = differencing_polynomial(o.d, o.seasonal_d, o.season);
    let point = if poly.len() > 1 {
        integrate_forward(series, &diffs, &poly)
    } else {
        diffs
    };
    let psi = psi_weights(fit, horizon);
    let mut acc = 0.0;
    let sd = psi
        .iter()
        .map(|p| {
            acc += p * p;
            (fit.sigma2 * acc).sqrt()
        })
        .collect();
    Ok((point, sd))
}

/// Forecast distribution with Gaussian 50% bands (±0.6745 σ_h).
pub fn sarima_forecast(fit: &SarimaFit, series: &[f64], horizon: usize) -> Result<ForecastDistribution> {
    let (point, sd) = sarima_predict(fit, series, horizon)?;
    Ok(ForecastDistribution::gaussian(point, sd))
}
