//! Probability kernels: negative binomial and low-rank multivariate normal.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

/// Counts up to this size use the product form of the gamma ratio, which
/// stays accurate as the dispersion goes to zero.
const SERIES_LIMIT: f64 = 500.0;

fn small_integer(y: f64) -> bool {
    y <= SERIES_LIMIT && y.fract() == 0.0
}

/// `log NB(y; mean μ, dispersion α)` with variance `μ + αμ²`, no validation.
pub(crate) fn nb_logpdf_unchecked(y: f64, mu: f64, alpha: f64) -> f64 {
    let am = alpha * mu;
    let l1p = am.ln_1p();
    let base = -l1p / alpha + y * (mu.ln() - l1p) - ln_gamma(y + 1.0);
    if small_integer(y) {
        // Γ(y + 1/α) / Γ(1/α) · α^y = Π_{k<y} (1 + kα)
        let mut s = 0.0;
        for k in 0..y as usize {
            s += (k as f64 * alpha).ln_1p();
        }
        base + s
    } else {
        let r = 1.0 / alpha;
        base + ln_gamma(y + r) - ln_gamma(r) + y * alpha.ln()
    }
}

/// Partial derivatives of the NB log-pmf with respect to `(μ, α)`.
pub(crate) fn nb_logpdf_grad(y: f64, mu: f64, alpha: f64) -> (f64, f64) {
    let am = alpha * mu;
    let d_mu = y / mu - (y * alpha + 1.0) / (1.0 + am);
    let common = am.ln_1p() / (alpha * alpha) - mu / (alpha * (1.0 + am)) - y * mu / (1.0 + am);
    let d_alpha = if small_integer(y) {
        let mut s = 0.0;
        for k in 0..y as usize {
            let k = k as f64;
            s += k / (1.0 + k * alpha);
        }
        common + s
    } else {
        let r = 1.0 / alpha;
        common - (digamma(y + r) - digamma(r)) / (alpha * alpha) + y / alpha
    };
    (d_mu, d_alpha)
}

/// Negative binomial log-pmf with mean `mu` and dispersion `alpha`.
pub fn neg_binomial_logpdf(y: f64, mu: f64, alpha: f64) -> Result<f64> {
    if y < 0.0 || !y.is_finite() {
        return Err(Error::Domain(format!("negative binomial count {y} must be ≥ 0")));
    }
    if !(mu > 0.0 && mu.is_finite() && alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Domain(format!(
            "negative binomial needs μ > 0 and α > 0, got μ={mu}, α={alpha}"
        )));
    }
    Ok(nb_logpdf_unchecked(y, mu, alpha))
}

/// Gamma-Poisson mixture draw.
pub fn neg_binomial_sample<R: Rng + ?Sized>(rng: &mut R, mu: f64, alpha: f64) -> u64 {
    if !(mu > 0.0) || !mu.is_finite() {
        return 0;
    }
    let rate = if alpha > 1e-10 {
        let shape = 1.0 / alpha;
        match Gamma::new(shape, mu * alpha) {
            Ok(g) => g.sample(rng),
            Err(_) => mu,
        }
    } else {
        mu
    };
    if !(rate > 0.0) || !rate.is_finite() {
        return 0;
    }
    match Poisson::new(rate) {
        Ok(p) => {
            let v: f64 = p.sample(rng);
            v as u64
        }
        Err(_) => rate.round() as u64,
    }
}

/// Lower Cholesky factor of a small dense SPD matrix, row-major.
fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::Numerics("capacitance matrix not positive definite".into()));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

fn chol_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[i * n + k] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[k * n + i] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    y
}

struct Woodbury {
    n: usize,
    r: usize,
    /// D⁻¹V, N×r.
    w: Vec<f64>,
    /// Cholesky factor of I + VᵀD⁻¹V.
    chol: Vec<f64>,
    /// Σ⁻¹ (z − μ).
    u: Vec<f64>,
    logpdf: f64,
}

fn woodbury(z: &[f64], mu: &[f64], diag: &[f64], factor: &[f64], r: usize) -> Result<Woodbury> {
    let n = z.len();
    if mu.len() != n || diag.len() != n || factor.len() != n * r {
        return Err(Error::Shape {
            op: "lowrank_gaussian_logpdf",
            left: [n, 1],
            right: [factor.len() / r.max(1), r],
        });
    }
    if r > n {
        return Err(Error::Domain(format!("rank {r} exceeds dimension {n}")));
    }
    if let Some(bad) = diag.iter().find(|&&d| !(d > 0.0) || !d.is_finite()) {
        return Err(Error::Domain(format!("diagonal entry {bad} must be > 0")));
    }
    let e: Vec<f64> = z.iter().zip(mu).map(|(z, m)| z - m).collect();
    let de: Vec<f64> = e.iter().zip(diag).map(|(e, d)| e / d).collect();
    let mut w = vec![0.0; n * r];
    for i in 0..n {
        for j in 0..r {
            w[i * r + j] = factor[i * r + j] / diag[i];
        }
    }
    let mut cap = vec![0.0; r * r];
    for a in 0..r {
        cap[a * r + a] = 1.0;
    }
    for i in 0..n {
        for a in 0..r {
            let va = factor[i * r + a];
            for b in 0..r {
                cap[a * r + b] += va * w[i * r + b];
            }
        }
    }
    let chol = cholesky(&cap, r)?;
    let mut proj = vec![0.0; r];
    for i in 0..n {
        for a in 0..r {
            proj[a] += factor[i * r + a] * de[i];
        }
    }
    let c = chol_solve(&chol, r, &proj);
    let mut u = de.clone();
    for i in 0..n {
        for a in 0..r {
            u[i] -= w[i * r + a] * c[a];
        }
    }
    let quad: f64 = e.iter().zip(&u).map(|(e, u)| e * u).sum();
    let logdet = diag.iter().map(|d| d.ln()).sum::<f64>()
        + 2.0 * (0..r).map(|a| chol[a * r + a].ln()).sum::<f64>();
    let logpdf = -0.5 * (n as f64 * LN_2PI + logdet + quad);
    Ok(Woodbury { n, r, w, chol, u, logpdf })
}

/// `log N(z; μ, diag(d) + V Vᵀ)` with `V` row-major `N×r`, evaluated in
/// `O(N r²)` through the capacitance matrix `I + Vᵀ D⁻¹ V`.
pub fn lowrank_gaussian_logpdf(z: &[f64], mu: &[f64], diag: &[f64], factor: &[f64], r: usize) -> Result<f64> {
    woodbury(z, mu, diag, factor, r).map(|w| w.logpdf)
}

/// Log-density and its gradients with respect to `μ`, `d` and `V`.
pub struct LowRankGrad {
    pub logpdf: f64,
    pub d_mu: Vec<f64>,
    pub d_diag: Vec<f64>,
    pub d_factor: Vec<f64>,
}

pub fn lowrank_gaussian_logpdf_grad(
    z: &[f64],
    mu: &[f64],
    diag: &[f64],
    factor: &[f64],
    r: usize,
) -> Result<LowRankGrad> {
    let wb = woodbury(z, mu, diag, factor, r)?;
    let (n, r) = (wb.n, wb.r);
    // C⁻¹ column by column.
    let mut cinv = vec![0.0; r * r];
    for a in 0..r {
        let mut unit = vec![0.0; r];
        unit[a] = 1.0;
        let col = chol_solve(&wb.chol, r, &unit);
        for b in 0..r {
            cinv[b * r + a] = col[b];
        }
    }
    // Σ⁻¹V = D⁻¹V C⁻¹
    let mut sinv_v = vec![0.0; n * r];
    for i in 0..n {
        for b in 0..r {
            let mut s = 0.0;
            for a in 0..r {
                s += wb.w[i * r + a] * cinv[a * r + b];
            }
            sinv_v[i * r + b] = s;
        }
    }
    let mut ut_v = vec![0.0; r];
    for i in 0..n {
        for a in 0..r {
            ut_v[a] += wb.u[i] * factor[i * r + a];
        }
    }
    let mut d_diag = Vec::with_capacity(n);
    let mut d_factor = vec![0.0; n * r];
    for i in 0..n {
        // (Σ⁻¹)_ii = 1/d_i − (D⁻¹V C⁻¹ VᵀD⁻¹)_ii
        let mut corr = 0.0;
        for a in 0..r {
            corr += sinv_v[i * r + a] * wb.w[i * r + a];
        }
        let sinv_ii = 1.0 / diag[i] - corr;
        d_diag.push(0.5 * (wb.u[i] * wb.u[i] - sinv_ii));
        for a in 0..r {
            d_factor[i * r + a] = wb.u[i] * ut_v[a] - sinv_v[i * r + a];
        }
    }
    Ok(LowRankGrad {
        logpdf: wb.logpdf,
        d_mu: wb.u,
        d_diag,
        d_factor,
    })
}
