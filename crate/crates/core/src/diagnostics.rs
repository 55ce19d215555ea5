//! Convergence diagnostics on uniform periodic grids: relative entropy,
//! Fisher information, the Csiszár–Kullback check, the coupled rate `λ`,
//! Holley–Stroock LSI lower bounds and exponential-rate fitting.
//!
//! Densities are grid samples on a unit-volume torus, so integrals are means.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::potentials::PotentialSpec;

/// LSI constant of the uniform measure on the unit circle, `4π²`.
pub const CIRCLE_LSI: f64 = 4.0 * PI * PI;

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} grid values", p.len(), q.len())));
    }
    for &v in p.iter().chain(q) {
        if !v.is_finite() {
            return Err(Error::NonFinite(v));
        }
        if v < 0.0 {
            return Err(Error::InvalidArgument(format!("negative density value {v}")));
        }
    }
    Ok(())
}

/// `∫ p ln(p/q)`, accumulated as `∫ q φ(p/q − 1)` with
/// `φ(u) = (1 + u) ln(1 + u) − u ≥ 0`, which equals it for densities of equal
/// mass and stays accurate as `p → q`.
pub fn relative_entropy(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if b <= 0.0 {
            if a > 0.0 {
                return Err(Error::SupportViolation);
            }
            continue;
        }
        if a == 0.0 {
            acc += b;
            continue;
        }
        let u = (a - b) / b;
        acc += b * ((1.0 + u) * u.ln_1p() - u);
    }
    Ok((acc / p.len() as f64).max(0.0))
}

/// `∫ |∇ ln(p/q)|² p` with periodic central differences.
///
/// `shape` is `[bins]` or `[rows, cols]` (row-major); both densities must be
/// strictly positive.
pub fn fisher_information(p: &[f64], q: &[f64], shape: &[usize]) -> Result<f64> {
    check_pair(p, q)?;
    let (rows, cols) = match *shape {
        [b] => (1, b),
        [r, c] => (r, c),
        _ => return Err(Error::Unsupported(format!("Fisher information on shape {shape:?}"))),
    };
    if rows * cols != p.len() {
        return Err(Error::ShapeMismatch(format!("{} values for shape {shape:?}", p.len())));
    }
    if p.iter().any(|&v| v <= 0.0) {
        return Err(Error::InvalidArgument("Fisher information needs p > 0".into()));
    }
    if q.iter().any(|&v| v <= 0.0) {
        return Err(Error::SupportViolation);
    }
    let l: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a / b).ln()).collect();
    let at = |i: usize, j: usize| l[(i % rows) * cols + j % cols];
    let mut acc = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let dj = (at(i, j + 1) - at(i, j + cols - 1)) * cols as f64 / 2.0;
            let di = if rows > 1 {
                (at(i + 1, j) - at(i + rows - 1, j)) * rows as f64 / 2.0
            } else {
                0.0
            };
            acc += (di * di + dj * dj) * p[i * cols + j];
        }
    }
    Ok(acc / p.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CkCheck {
    pub l1: f64,
    pub bound: f64,
    pub ok: bool,
}

/// `∫|p − q| ≤ √(2 H(p|q))`.
pub fn csiszar_kullback_check(p: &[f64], q: &[f64]) -> Result<CkCheck> {
    let h = relative_entropy(p, q)?;
    let l1 = p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64;
    let bound = (2.0 * h).sqrt();
    Ok(CkCheck {
        l1,
        bound,
        ok: l1 <= bound + 1e-12,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaRate {
    pub lambda: f64,
    /// `ρ₁ρ₂ ≥ β²κ₁κ₂`.
    pub condition18: bool,
}

/// Rate `λ = (ρ₁ + ρ₂ − √((ρ₁ − ρ₂)² + 4β²κ₁κ₂/(ρ₁ρ₂)))/4`.
///
/// The coupling constants enter through `βκ`, the form they take once time
/// is rescaled to unit temperature.
pub fn lambda_rate(rho1: f64, rho2: f64, kappa1: f64, kappa2: f64, beta: f64) -> Result<LambdaRate> {
    if !(rho1 > 0.0 && rho2 > 0.0) {
        return Err(Error::InvalidArgument("LSI constants must be positive".into()));
    }
    if kappa1 < 0.0 || kappa2 < 0.0 || !(beta > 0.0) {
        return Err(Error::InvalidArgument("need κ ≥ 0 and β > 0".into()));
    }
    let coupling = beta * beta * kappa1 * kappa2;
    let disc = (rho1 - rho2).powi(2) + 4.0 * coupling / (rho1 * rho2);
    Ok(LambdaRate {
        lambda: (rho1 + rho2 - disc.sqrt()) / 4.0,
        condition18: rho1 * rho2 >= coupling,
    })
}

fn holley_stroock(osc: f64) -> f64 {
    CIRCLE_LSI * (-osc).exp()
}

/// Largest oscillation over the other variable, taken over all values of
/// the conditioning variable `axis`, of a row-major `bins × bins` table.
fn max_conditional_oscillation(values: &[f64], bins: usize, axis: usize) -> f64 {
    let mut worst = 0.0f64;
    for a in 0..bins {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for b in 0..bins {
            let v = if axis == 0 { values[a * bins + b] } else { values[b * bins + a] };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        worst = worst.max(hi - lo);
    }
    worst
}

/// Holley–Stroock bound `4π² exp(−β osc)` for the measures conditioned on
/// `x_axis`, where `osc` is the largest oscillation of `V` in the remaining
/// variable, scanned on the `bins × bins` grid of nodes `k / bins`.
pub fn lsi_lower_bound_conditional(spec: &PotentialSpec, beta: f64, axis: usize, bins: usize) -> Result<f64> {
    if spec.dim() != 2 {
        return Err(Error::Unsupported("conditional LSI bound needs n = 2".into()));
    }
    if axis > 1 {
        return Err(Error::InvalidArgument(format!("axis {axis} not in {{0, 1}}")));
    }
    if bins == 0 {
        return Err(Error::EmptyGrid);
    }
    let node = |k: usize| k as f64 / bins as f64;
    let mut v = Vec::with_capacity(bins * bins);
    for a in 0..bins {
        for b in 0..bins {
            v.push(spec.energy(&[node(a), node(b)]));
        }
    }
    Ok(holley_stroock(beta * max_conditional_oscillation(&v, bins, axis)))
}

/// Holley–Stroock bound for the conditionals of a positive `bins × bins`
/// density `ψ`, using the oscillation of `−ln ψ`.
pub fn lsi_lower_bound_from_density(psi: &[f64], bins: usize, axis: usize) -> Result<f64> {
    if psi.len() != bins * bins || bins == 0 {
        return Err(Error::ShapeMismatch(format!("{} values for {bins}x{bins}", psi.len())));
    }
    if axis > 1 {
        return Err(Error::InvalidArgument(format!("axis {axis} not in {{0, 1}}")));
    }
    if psi.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument("density must be positive and finite".into()));
    }
    let u: Vec<f64> = psi.iter().map(|v| -v.ln()).collect();
    Ok(holley_stroock(max_conditional_oscillation(&u, bins, axis)))
}

/// Least-squares exponential rate of a positive series over `[t_a, t_b]`.
/// Returns `(rate, R²)`.
pub fn fit_decay_rate(series: &[(f64, f64)], window: (f64, f64)) -> Result<(f64, f64)> {
    let pts: Vec<(f64, f64)> = series
        .iter()
        .copied()
        .filter(|&(t, _)| t >= window.0 && t <= window.1)
        .collect();
    if pts.len() < 10 {
        return Err(Error::InvalidArgument(format!(
            "need at least 10 points in the fit window, got {}",
            pts.len()
        )));
    }
    if let Some(&(t, v)) = pts.iter().find(|&&(_, v)| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-positive value {v} at t = {t}")));
    }
    let k = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1.ln()).sum::<f64>() / k;
    let (mut stt, mut sty, mut syy) = (0.0, 0.0, 0.0);
    for &(t, v) in &pts {
        let (dt, dy) = (t - mt, v.ln() - my);
        stt += dt * dt;
        sty += dt * dy;
        syy += dy * dy;
    }
    if stt == 0.0 {
        return Err(Error::InvalidArgument("fit window has a single time".into()));
    }
    let slope = sty / stt;
    let ss_res = syy - slope * sty;
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - ss_res.max(0.0) / syy };
    Ok((-slope, r2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedRate {
    pub rate: f64,
    pub r_squared: f64,
    pub window: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub kappa1: f64,
    pub kappa2: f64,
    pub rho1_lb: f64,
    pub rho2_lb: f64,
    pub lambda_lb: f64,
    pub r: f64,
    pub condition18: bool,
    pub fitted_rates: BTreeMap<String, FittedRate>,
}

impl ConvergenceReport {
    pub fn new(kappa: (f64, f64), rho_lb: (f64, f64), beta: f64) -> Result<Self> {
        let l = lambda_rate(rho_lb.0, rho_lb.1, kappa.0, kappa.1, beta)?;
        Ok(Self {
            kappa1: kappa.0,
            kappa2: kappa.1,
            rho1_lb: rho_lb.0,
            rho2_lb: rho_lb.1,
            lambda_lb: l.lambda,
            r: CIRCLE_LSI,
            condition18: l.condition18,
            fitted_rates: BTreeMap::new(),
        })
    }

    pub fn record_fit(&mut self, name: impl Into<String>, series: &[(f64, f64)], window: (f64, f64)) -> Result<FittedRate> {
        let (rate, r_squared) = fit_decay_rate(series, window)?;
        let f = FittedRate {
            rate,
            r_squared,
            window,
        };
        self.fitted_rates.insert(name.into(), f.clone());
        Ok(f)
    }
}
