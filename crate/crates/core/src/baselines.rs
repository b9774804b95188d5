//! Model-based beamformers (MRT, ZF, WMMSE), the downlink sum-rate and its
//! analytic gradients.
//!
//! Channels are passed in row-per-user form: `h_rows` is `K x M` and its
//! row `k` is `h_k^H`, so `h_rows * V` holds every `h_k^H v_j`.
//!
//! Gradients of the real-valued sum-rate with respect to a complex matrix
//! `Z` are returned as the conjugate (Wirtinger) derivative `∂R/∂Z*`. The
//! derivatives with respect to the real and imaginary parts are
//! `∂R/∂Re Z = 2 Re(∂R/∂Z*)` and `∂R/∂Im Z = 2 Im(∂R/∂Z*)`.

use std::f64::consts::LN_2;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cinv, cmul, fro_norm, hermitian, real_inverse_with_cond, stacked_block, ComplexMatrix};

/// Reject ZF when the condition estimate of `X X^H` exceeds this.
pub const ZF_MAX_COND: f64 = 1e12;

/// Relative slack on the downlink power budget.
pub const POWER_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Beamformer {
    /// `M x K`, column `k` serves user `k`.
    pub v: ComplexMatrix,
    pub power_budget: f64,
}

impl Beamformer {
    /// `Tr(V V^H)`.
    pub fn power(&self) -> f64 {
        self.v.fro_norm_sq()
    }

    pub fn is_feasible(&self) -> bool {
        self.power() <= self.power_budget * (1.0 + POWER_SLACK)
    }
}

fn check_rows_vs_beams(h_rows: &ComplexMatrix, v: &ComplexMatrix) -> Result<()> {
    if h_rows.cols() != v.rows() || h_rows.rows() != v.cols() {
        return Err(Error::dims("sum_rate", h_rows.dim(), v.dim()));
    }
    Ok(())
}

/// Per-user signal power `|h_k^H v_k|²` and interference-plus-noise.
struct RateTerms {
    cross: ComplexMatrix,
    signal: Vec<f64>,
    /// `Σ_i |h_k^H v_i|² + σ²`
    total: Vec<f64>,
    /// `Σ_{i≠k} |h_k^H v_i|² + σ²`
    interference: Vec<f64>,
}

fn rate_terms(h_rows: &ComplexMatrix, v: &ComplexMatrix, noise: f64) -> Result<RateTerms> {
    check_rows_vs_beams(h_rows, v)?;
    let cross = cmul(h_rows, v)?;
    let k_users = cross.rows();
    let mut signal = vec![0.0; k_users];
    let mut total = vec![0.0; k_users];
    for k in 0..k_users {
        let mut t = noise;
        for i in 0..k_users {
            t += cross.get(k, i).norm_sqr();
        }
        signal[k] = cross.get(k, k).norm_sqr();
        total[k] = t;
    }
    let interference = total.iter().zip(&signal).map(|(t, s)| t - s).collect();
    Ok(RateTerms {
        cross,
        signal,
        total,
        interference,
    })
}

/// `Σ_k log2(1 + |h_k^H v_k|² / (Σ_{j≠k} |h_k^H v_j|² + σ²))`.
pub fn sum_rate(h_rows: &ComplexMatrix, v: &ComplexMatrix, noise: f64) -> Result<f64> {
    let t = rate_terms(h_rows, v, noise)?;
    Ok(t.signal
        .iter()
        .zip(&t.interference)
        .map(|(s, i)| (1.0 + s / i).log2())
        .sum())
}

/// Individual user rates in bits/s/Hz.
pub fn user_rates(h_rows: &ComplexMatrix, v: &ComplexMatrix, noise: f64) -> Result<Vec<f64>> {
    let t = rate_terms(h_rows, v, noise)?;
    Ok(t.signal
        .iter()
        .zip(&t.interference)
        .map(|(s, i)| (1.0 + s / i).log2())
        .collect())
}

/// Maximum ratio transmission, `V = γ H^H` with `Tr(V V^H) = P`.
pub fn mrt(h_rows: &ComplexMatrix, power: f64) -> Result<Beamformer> {
    let norm = fro_norm(h_rows);
    if norm == 0.0 {
        return Err(Error::ZeroChannel);
    }
    Ok(Beamformer {
        v: hermitian(h_rows).scale(power.sqrt() / norm),
        power_budget: power,
    })
}

/// Unnormalized ZF direction `X^H (X X^H)^{-1}` and `(X X^H)^{-1}`.
fn zf_direction(x: &ComplexMatrix) -> Result<(ComplexMatrix, ComplexMatrix)> {
    let gram = cmul(x, &hermitian(x))?;
    let cond = match real_inverse_with_cond(&stacked_block(&gram)) {
        Ok((_, cond)) => cond,
        Err(_) => f64::INFINITY,
    };
    if !(cond <= ZF_MAX_COND) {
        return Err(Error::ZfIllPosed { cond });
    }
    let inv = cinv(&gram).map_err(|e| match e {
        Error::Singular { cond } => Error::ZfIllPosed { cond },
        other => other,
    })?;
    Ok((cmul(&hermitian(x), &inv)?, inv))
}

/// Zero-forcing on input `X` (`K x M`): `V = γ X^H (X X^H)^{-1}` with
/// `γ = sqrt(P) / ‖X^H (X X^H)^{-1}‖_F`.
pub fn zf(x: &ComplexMatrix, power: f64) -> Result<Beamformer> {
    let (w, _) = zf_direction(x)?;
    let norm = fro_norm(&w);
    Ok(Beamformer {
        v: w.scale(power.sqrt() / norm),
        power_budget: power,
    })
}

/// `∂R/∂V*` of the log2 sum-rate: `H^H B / ln 2` with
///
/// ```text
/// b_kk = h_k^H v_k / (Σ_i |h_k^H v_i|² + σ²)
/// b_jk = -|h_j^H v_j|² h_j^H v_k / ((Σ_i |h_j^H v_i|² + σ²)(Σ_{i≠j} |h_j^H v_i|² + σ²)),  j ≠ k
/// ```
pub fn grad_sum_rate_v(h_rows: &ComplexMatrix, v: &ComplexMatrix, noise: f64) -> Result<ComplexMatrix> {
    let b = b_matrix(h_rows, v, noise)?;
    Ok(cmul(&hermitian(h_rows), &b)?.scale(1.0 / LN_2))
}

fn b_matrix(h_rows: &ComplexMatrix, v: &ComplexMatrix, noise: f64) -> Result<ComplexMatrix> {
    let t = rate_terms(h_rows, v, noise)?;
    let k_users = t.cross.rows();
    Ok(ComplexMatrix::from_fn(k_users, k_users, |j, k| {
        if j == k {
            t.cross.get(k, k) / t.total[k]
        } else {
            -t.cross.get(j, k) * (t.signal[j] / (t.total[j] * t.interference[j]))
        }
    }))
}

/// `∂R/∂X*` of `R(zf(X))`, including the dependence of `γ_ZF` on `X`.
///
/// With `A = (X X^H)^{-1}`, `X' = A X` and `G = ∂R/∂V*` at `V = zf(X)`:
///
/// ```text
/// γ [A G^H - X' G X' - A G^H X'^H X]  +  (γ c / Tr A) A X'
/// ```
///
/// where `c = Re Tr(G^H W)`, `W = X^H A`. The bracket treats `γ` as fixed;
/// the second term is the chain rule through `γ = sqrt(P / Tr A)`.
pub fn grad_sum_rate_x(h_rows: &ComplexMatrix, x: &ComplexMatrix, power: f64, noise: f64) -> Result<ComplexMatrix> {
    let (w, a) = zf_direction(x)?;
    let trace_a = fro_norm(&w).powi(2);
    let gamma = (power / trace_a).sqrt();
    let v = w.scale(gamma);
    let g = grad_sum_rate_v(h_rows, &v, noise)?;
    let g_h = hermitian(&g);
    let x_prime = cmul(&a, x)?;

    let a_gh = cmul(&a, &g_h)?;
    let term2 = cmul(&cmul(&x_prime, &g)?, &x_prime)?;
    let term3 = cmul(&cmul(&a_gh, &hermitian(&x_prime))?, x)?;
    let fixed_gamma = a_gh.sub(&term2)?.sub(&term3)?.scale(gamma);

    let c = real_trace_inner(&g, &w);
    let gamma_term = cmul(&a, &x_prime)?.scale(gamma * c / trace_a);
    fixed_gamma.add(&gamma_term)
}

/// `Re Tr(A^H B)`.
fn real_trace_inner(a: &ComplexMatrix, b: &ComplexMatrix) -> f64 {
    let re = a.re().iter().zip(b.re().iter()).map(|(x, y)| x * y).sum::<f64>();
    let im = a.im().iter().zip(b.im().iter()).map(|(x, y)| x * y).sum::<f64>();
    re + im
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WmmseOptions {
    pub max_iters: usize,
    /// Stop when the sum-rate improves by less than this.
    pub tol: f64,
    /// Relative width at which the multiplier bisection stops.
    pub bisection_tol: f64,
}

impl Default for WmmseOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
            bisection_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WmmseResult {
    pub beamformer: Beamformer,
    /// Sum-rate of the initial point followed by one entry per iteration.
    pub trace: Vec<f64>,
}

/// WMMSE from the ZF starting point (MRT when ZF is ill-posed).
pub fn wmmse(h_rows: &ComplexMatrix, power: f64, noise: f64, opts: &WmmseOptions) -> Result<WmmseResult> {
    let init = match zf(h_rows, power) {
        Ok(b) => b.v,
        Err(_) => mrt(h_rows, power)?.v,
    };
    wmmse_from(h_rows, init, power, noise, opts)
}

/// Weighted MMSE block-coordinate ascent for the unweighted sum-rate.
///
/// Each iteration updates the receive scalars `u_k = h_k^H v_k / T_k`, the
/// MSE weights `w_k = 1 / (1 - u_k^* h_k^H v_k)` and then the beamformers
///
/// ```text
/// V(μ) = (H^H D H + μ I)^{-1} H^H C = H^H (μ I + D H H^H)^{-1} C
/// ```
///
/// with `D = diag(w_k |u_k|²)`, `C = diag(w_k u_k)` and `μ ≥ 0` found by
/// bisection so that `Tr(V V^H) = P` (or `μ = 0` if that is feasible).
pub fn wmmse_from(
    h_rows: &ComplexMatrix,
    init: ComplexMatrix,
    power: f64,
    noise: f64,
    opts: &WmmseOptions,
) -> Result<WmmseResult> {
    if opts.max_iters == 0 {
        return Err(Error::Config("wmmse needs max_iters >= 1".into()));
    }
    let k_users = h_rows.rows();
    let h_h = hermitian(h_rows);
    let gram = cmul(h_rows, &h_h)?;
    let mut v = init;
    let mut rate = sum_rate(h_rows, &v, noise)?;
    let mut trace = vec![rate];
    for _ in 0..opts.max_iters {
        let t = rate_terms(h_rows, &v, noise)?;
        let mut d = vec![0.0; k_users];
        let mut c = vec![Complex64::new(0.0, 0.0); k_users];
        for k in 0..k_users {
            let a = t.cross.get(k, k);
            let u = a / t.total[k];
            let w = t.total[k] / t.interference[k];
            d[k] = w * u.norm_sqr();
            c[k] = u * w;
        }
        let next = wmmse_beamformer(&gram, &h_h, &d, &c, power, opts.bisection_tol)?;
        let next_rate = sum_rate(h_rows, &next, noise)?;
        v = next;
        let delta = next_rate - rate;
        rate = next_rate;
        trace.push(rate);
        if delta.abs() < opts.tol {
            break;
        }
    }
    Ok(WmmseResult {
        beamformer: Beamformer { v, power_budget: power },
        trace,
    })
}

fn wmmse_beamformer(
    gram: &ComplexMatrix,
    h_h: &ComplexMatrix,
    d: &[f64],
    c: &[Complex64],
    power: f64,
    rel_tol: f64,
) -> Result<ComplexMatrix> {
    let k_users = gram.rows();
    let c_diag = ComplexMatrix::from_fn(
        k_users,
        k_users,
        |i, j| {
            if i == j {
                c[i]
            } else {
                Complex64::new(0.0, 0.0)
            }
        },
    );
    let dg = ComplexMatrix::from_fn(k_users, k_users, |i, j| gram.get(i, j) * d[i]);
    let h_h_c = cmul(h_h, &c_diag)?;
    // V(μ) = (H^H D H + μI)^{-1} H^H C = H^H (D H H^H + μI)^{-1} C
    let beam = |mu: f64| -> Result<ComplexMatrix> {
        let shifted = dg.add(&ComplexMatrix::identity(k_users).scale(mu))?;
        cmul(&cmul(h_h, &cinv(&shifted)?)?, &c_diag)
    };

    if let Ok(v0) = beam(0.0) {
        let p0 = v0.fro_norm_sq();
        if v0.is_finite() && p0 > 0.0 && p0 <= power {
            // scaling up to the budget only raises every SINR
            return Ok(v0.scale((power / p0).sqrt()));
        }
    }
    let mut low = 0.0;
    let mut high = fro_norm(&h_h_c) / power.sqrt();
    let mut v_high = beam(high)?;
    if v_high.fro_norm_sq() > power * (1.0 + POWER_SLACK) {
        return Err(Error::Bracket {
            low,
            high,
            residual: v_high.fro_norm_sq() - power,
        });
    }
    while high - low > rel_tol * high {
        let mid = 0.5 * (low + high);
        let v_mid = beam(mid)?;
        if v_mid.fro_norm_sq() > power {
            low = mid;
        } else {
            high = mid;
            v_high = v_mid;
        }
    }
    // land exactly on the budget; μ is already within rel_tol of the root
    let scale = (power / v_high.fro_norm_sq()).sqrt();
    Ok(v_high.scale(scale))
}

/// Sum-rate at `zf(H)` and at `zf(H + step D / ‖D‖)` with `D = ∂R/∂X*`
/// evaluated at `X = H`.
pub fn gradient_step_probe(h_rows: &ComplexMatrix, power: f64, noise: f64, step: f64) -> Result<(f64, f64)> {
    let base = zf(h_rows, power)?;
    let r_zf = sum_rate(h_rows, &base.v, noise)?;
    let grad = grad_sum_rate_x(h_rows, h_rows, power, noise)?;
    let norm = fro_norm(&grad);
    if norm == 0.0 {
        return Ok((r_zf, r_zf));
    }
    let x = h_rows.add(&grad.scale(step / norm))?;
    let calibrated = zf(&x, power)?;
    Ok((r_zf, sum_rate(h_rows, &calibrated.v, noise)?))
}

/// Default probe step, `1e-3 ‖H‖_F`.
pub fn default_probe_step(h_rows: &ComplexMatrix) -> f64 {
    1e-3 * fro_norm(h_rows)
}
