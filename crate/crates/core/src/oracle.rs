//! Deterministic grid references: quadrature free energies and canonical
//! averages, the fixed-point solver for the stationary bias pair, and a
//! finite-volume Fokker–Planck evolver for the adaptive dynamics on `T²`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{csiszar_kullback_check, fisher_information, relative_entropy, CkCheck};
use crate::error::{Error, Result};
use crate::estimator::BiasFunction1D;
use crate::export::fmt_f64;
use crate::free_energy::FreeEnergySurface2D;
use crate::geometry::PeriodicGrid1D;
use crate::potentials::PotentialSpec;

/// Nonnegative density on a `bins × bins` cell-centered grid of `T²`, stored
/// row-major with `x₁` as the row index and normalized to mean 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityField2D {
    bins: usize,
    values: Vec<f64>,
}

impl DensityField2D {
    /// Validates and normalizes `values`.
    pub fn new(bins: usize, values: Vec<f64>) -> Result<Self> {
        if bins == 0 {
            return Err(Error::EmptyGrid);
        }
        if values.len() != bins * bins {
            return Err(Error::ShapeMismatch(format!("{} values for {bins}x{bins}", values.len())));
        }
        for &v in &values {
            if !v.is_finite() {
                return Err(Error::NonFinite(v));
            }
            if v < 0.0 {
                return Err(Error::InvalidArgument(format!("negative density {v}")));
            }
        }
        let mut d = Self { bins, values };
        d.normalize()?;
        Ok(d)
    }

    pub fn from_fn(bins: usize, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let g = PeriodicGrid1D::new(bins)?;
        let mut v = Vec::with_capacity(bins * bins);
        for x1 in g.centers() {
            for x2 in g.centers() {
                v.push(f(x1, x2));
            }
        }
        Self::new(bins, v)
    }

    pub fn uniform(bins: usize) -> Result<Self> {
        Self::new(bins, vec![1.0; bins * bins])
    }

    /// Canonical density `∝ exp(−βV)` at cell centers (`n = 2`).
    pub fn canonical(spec: &PotentialSpec, beta: f64, bins: usize) -> Result<Self> {
        if spec.dim() != 2 {
            return Err(Error::Unsupported("2D densities need n = 2".into()));
        }
        let v = cell_values(spec, bins)?;
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        Self::new(bins, v.iter().map(|e| (-beta * (e - min)).exp()).collect())
    }

    pub fn normalize(&mut self) -> Result<()> {
        let mass = self.mass();
        if !(mass > 0.0) {
            return Err(Error::InvalidArgument("density has zero mass".into()));
        }
        self.values.iter_mut().for_each(|v| *v /= mass);
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `∫ψ`, the periodic midpoint rule.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Marginal along `x_{axis+1}` as a density on `bins` cells (mean 1).
    pub fn marginal(&self, axis: usize) -> Vec<f64> {
        let b = self.bins;
        (0..b)
            .map(|a| {
                (0..b)
                    .map(|c| if axis == 0 { self.values[a * b + c] } else { self.values[c * b + a] })
                    .sum::<f64>()
                    / b as f64
            })
            .collect()
    }

    /// `∫|ψ − 1| / 2`.
    pub fn tv_from_uniform(&self) -> f64 {
        self.values.iter().map(|v| (v - 1.0).abs()).sum::<f64>() / (2.0 * self.values.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.bins != other.bins {
            return Err(Error::ShapeMismatch("density grids differ".into()));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// CSV with columns `x1,x2,density`.
    pub fn to_csv(&self) -> String {
        let g = PeriodicGrid1D::new(self.bins).expect("nonzero");
        let mut out = String::from("x1,x2,density\n");
        for i in 0..self.bins {
            for j in 0..self.bins {
                out.push_str(&format!(
                    "{},{},{}\n",
                    fmt_f64(g.center(i)),
                    fmt_f64(g.center(j)),
                    fmt_f64(self.values[i * self.bins + j])
                ));
            }
        }
        out
    }
}

/// `V` at the cell centers of a `bins × bins` grid, row-major.
fn cell_values(spec: &PotentialSpec, bins: usize) -> Result<Vec<f64>> {
    let g = PeriodicGrid1D::new(bins)?;
    let mut v = Vec::with_capacity(bins * bins);
    for x1 in g.centers() {
        for x2 in g.centers() {
            v.push(spec.energy(&[x1, x2]));
        }
    }
    Ok(v)
}

/// Potential values on the full `bins^n` cell-centered grid (`n ≤ 3`),
/// row-major.
fn grid_values(spec: &PotentialSpec, bins: usize) -> Result<Vec<f64>> {
    let n = spec.dim();
    if n > 3 {
        return Err(Error::Unsupported(format!(
            "quadrature oracle on T^{n} (supported: n <= 3)"
        )));
    }
    let g = PeriodicGrid1D::new(bins)?;
    let total = bins.pow(n as u32);
    let mut x = vec![0.0; n];
    let mut out = Vec::with_capacity(total);
    for flat in 0..total {
        let mut r = flat;
        for xi in x.iter_mut().rev() {
            *xi = g.center(r % bins);
            r /= bins;
        }
        out.push(spec.energy(&x));
    }
    Ok(out)
}

/// `−β⁻¹ ln mean exp(−βv)` computed stably.
fn soft_min(values: impl Iterator<Item = f64> + Clone, beta: f64) -> f64 {
    let m = values.clone().fold(f64::INFINITY, f64::min);
    let mut count = 0usize;
    let s: f64 = values
        .map(|v| {
            count += 1;
            (-beta * (v - m)).exp()
        })
        .sum();
    m - (s / count as f64).ln() / beta
}

/// `A(x₁, x₂) = −β⁻¹ ln ∫ exp(−βV) dx₃`, anchored to min 0, at cell centers.
pub fn free_energy_2d(spec: &PotentialSpec, beta: f64, bins: usize) -> Result<FreeEnergySurface2D> {
    let n = spec.dim();
    if !(2..=3).contains(&n) {
        return Err(Error::Unsupported(format!("2D free energy needs n in {{2, 3}}, got {n}")));
    }
    let v = grid_values(spec, bins)?;
    let rest = if n == 3 { bins } else { 1 };
    let a: Vec<f64> = v.chunks(rest).map(|c| soft_min(c.iter().copied(), beta)).collect();
    FreeEnergySurface2D::anchored((bins, bins), a, None)
}

/// Cell-averaged free energy: `−β⁻¹ ln` of the mean of `exp(−βA)` over a
/// `refine × refine` subgrid of each cell. This is what a histogram with
/// `bins` cells per axis estimates.
pub fn cell_averaged_free_energy_2d(
    spec: &PotentialSpec,
    beta: f64,
    bins: usize,
    refine: usize,
) -> Result<FreeEnergySurface2D> {
    if refine == 0 {
        return Err(Error::InvalidArgument("refine must be positive".into()));
    }
    let fine = free_energy_2d(spec, beta, bins * refine)?;
    let fb = bins * refine;
    let fv = fine.values();
    let mut a = Vec::with_capacity(bins * bins);
    for i in 0..bins {
        for j in 0..bins {
            let cell = (0..refine).flat_map(move |p| {
                (0..refine).map(move |q| fv[(i * refine + p) * fb + j * refine + q])
            });
            a.push(soft_min(cell, beta));
        }
    }
    FreeEnergySurface2D::anchored((bins, bins), a, None)
}

/// `A^α(x_α) = −β⁻¹ ln ∫ exp(−βV) dx_{≠α}`, anchored to min 0.
pub fn free_energy_1d(spec: &PotentialSpec, axis: usize, beta: f64, bins: usize) -> Result<BiasFunction1D> {
    let n = spec.dim();
    if axis >= n {
        return Err(Error::InvalidArgument(format!("axis {axis} out of range for n = {n}")));
    }
    let v = grid_values(spec, bins)?;
    let stride = bins.pow((n - 1 - axis) as u32);
    let a: Vec<f64> = (0..bins)
        .map(|k| {
            let it = v
                .iter()
                .enumerate()
                .filter(move |(flat, _)| (flat / stride) % bins == k)
                .map(|(_, &e)| e);
            soft_min(it, beta)
        })
        .collect();
    BiasFunction1D::anchored(a)
}

/// `∫ φ exp(−βV) / Z` by the midpoint rule on `bins^n` cells (`n ≤ 3`).
pub fn canonical_average(spec: &PotentialSpec, phi: &dyn Fn(&[f64]) -> f64, beta: f64, bins: usize) -> Result<f64> {
    let n = spec.dim();
    let v = grid_values(spec, bins)?;
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let g = PeriodicGrid1D::new(bins)?;
    let mut x = vec![0.0; n];
    let (mut num, mut den) = (0.0, 0.0);
    for (flat, &e) in v.iter().enumerate() {
        let mut r = flat;
        for xi in x.iter_mut().rev() {
            *xi = g.center(r % bins);
            r /= bins;
        }
        let w = (-beta * (e - min)).exp();
        num += w * phi(&x);
        den += w;
    }
    Ok(num / den)
}

/// Stationary pair `(ρ¹, ρ²)` with `ρ^α = exp(−βA_∞^α)` at cell centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryPair {
    pub beta: f64,
    pub rho1: Vec<f64>,
    pub rho2: Vec<f64>,
    pub iterations: usize,
    /// Sup-norm residual of the discretized stationary system.
    pub residual: f64,
    /// Sup-norm change of `ρ¹` per iteration.
    pub history: Vec<f64>,
    /// Cell values of `exp(−βA)` used by the iteration, row-major.
    weights: Vec<f64>,
}

impl StationaryPair {
    pub fn bins(&self) -> usize {
        self.rho1.len()
    }

    /// `A_∞^α = −β⁻¹ ln ρ^α`, anchored to min 0.
    pub fn bias(&self, axis: usize) -> Result<BiasFunction1D> {
        let rho = if axis == 0 { &self.rho1 } else { &self.rho2 };
        BiasFunction1D::anchored(rho.iter().map(|r| -r.ln() / self.beta).collect())
    }

    /// `ψ_∞ ∝ exp(−βA)/(ρ¹ρ²)`.
    pub fn density(&self) -> Result<DensityField2D> {
        let b = self.bins();
        let mut v = Vec::with_capacity(b * b);
        for i in 0..b {
            for j in 0..b {
                v.push(self.weights[i * b + j] / (self.rho1[i] * self.rho2[j]));
            }
        }
        DensityField2D::new(b, v)
    }

    /// CSV with columns `z,rho1,rho2,A1,A2`.
    pub fn to_csv(&self) -> Result<String> {
        let g = PeriodicGrid1D::new(self.bins())?;
        let a1 = self.bias(0)?;
        let a2 = self.bias(1)?;
        let mut out = String::from("z,rho1,rho2,A1,A2\n");
        for k in 0..self.bins() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                fmt_f64(g.center(k)),
                fmt_f64(self.rho1[k]),
                fmt_f64(self.rho2[k]),
                fmt_f64(a1.values()[k]),
                fmt_f64(a2.values()[k])
            ));
        }
        Ok(out)
    }
}

/// Solves the stationary system for `V` on `T^n`, `n ∈ {2, 3}`.
pub fn solve_stationary_pair(
    spec: &PotentialSpec,
    beta: f64,
    bins: usize,
    tol: f64,
    max_iter: usize,
) -> Result<StationaryPair> {
    let a = free_energy_2d(spec, beta, bins)?;
    solve_stationary_pair_from_surface(&a, beta, tol, max_iter)
}

/// Iterates `ρ¹ ← Z ∫ e^{−βA} / (∫ e^{−βA}/ρ¹ dx₁) dx₂` with `Z` fixing
/// `∫ 1/ρ¹ = 1`, on a square free-energy grid.
pub fn solve_stationary_pair_from_surface(
    a: &FreeEnergySurface2D,
    beta: f64,
    tol: f64,
    max_iter: usize,
) -> Result<StationaryPair> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("tol must be positive".into()));
    }
    let (b1, b2) = a.bins();
    if b1 != b2 {
        return Err(Error::ShapeMismatch("stationary solver needs a square grid".into()));
    }
    let b = b1;
    if a.mask().iter().any(|m| !m) {
        return Err(Error::InvalidArgument("stationary solver needs a fully defined surface".into()));
    }
    let e: Vec<f64> = a.values().iter().map(|v| (-beta * v).exp()).collect();
    let (lo, hi) = e
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let (lower, upper) = ((lo / hi).powi(2), (hi / lo).powi(2));
    let slack = 1e-12;

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    // ρ²(x₂) = ∫ e^{−βA}/ρ¹ dx₁
    let rho2_of = |rho1: &[f64]| -> Vec<f64> {
        (0..b)
            .map(|j| (0..b).map(|i| e[i * b + j] / rho1[i]).sum::<f64>() / b as f64)
            .collect()
    };
    // unnormalized ∫ e^{−βA}/ρ² dx₂
    let rho1_raw = |rho2: &[f64]| -> Vec<f64> {
        (0..b)
            .map(|i| (0..b).map(|j| e[i * b + j] / rho2[j]).sum::<f64>() / b as f64)
            .collect()
    };
    let normalize = |mut r: Vec<f64>| -> Vec<f64> {
        let z = mean(&r.iter().map(|v| 1.0 / v).collect::<Vec<_>>());
        r.iter_mut().for_each(|v| *v *= z);
        r
    };

    let mut rho1 = vec![1.0; b];
    let mut history = vec![];
    for it in 1..=max_iter {
        let next = normalize(rho1_raw(&rho2_of(&rho1)));
        for &r in &next {
            if !(r >= lower * (1.0 - slack) && r <= upper * (1.0 + slack)) {
                return Err(Error::BoundViolation(format!(
                    "iteration {it}: rho = {r} outside [{lower}, {upper}]"
                )));
            }
        }
        let change = next
            .iter()
            .zip(&rho1)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        history.push(change);
        rho1 = next;
        if change < tol {
            let rho2 = rho2_of(&rho1);
            let check = normalize(rho1_raw(&rho2));
            let residual = check
                .iter()
                .zip(&rho1)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            return Ok(StationaryPair {
                beta,
                rho1,
                rho2,
                iterations: it,
                residual,
                history,
                weights: e,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual: history.last().copied().unwrap_or(f64::NAN),
    })
}

/// How the Fokker–Planck evolver treats the biasing potential.
#[derive(Debug, Clone, PartialEq)]
pub enum FpBias {
    /// Plain diffusion in `V`.
    None,
    /// A fixed bias `A¹(x₁) + A²(x₂)` given at cell centers.
    Frozen { a1: Vec<f64>, a2: Vec<f64> },
    /// The adaptive bias recomputed from the current density every step.
    Adaptive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FpOptions {
    pub beta: f64,
    pub bins: usize,
    pub dt: f64,
    pub t_final: f64,
    pub bias: FpBias,
    /// Record a series row every this many steps (and at the end).
    pub record_every: usize,
    /// Keep full density snapshots every this many steps; 0 keeps none.
    pub snapshot_every: usize,
    /// Reference density for the entropy, Fisher and Csiszár–Kullback columns.
    pub reference: Option<DensityField2D>,
    /// Reference bias derivatives at the faces for the derivative error columns.
    pub reference_bias: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpRow {
    pub t: f64,
    pub mass: f64,
    /// `H(ψ|ψ_ref)` (0 without a reference).
    pub h: f64,
    /// `I(ψ|ψ_ref)`.
    pub fisher: f64,
    /// Relative entropies of the two marginals to uniform.
    pub hm1: f64,
    pub hm2: f64,
    /// `∫|(A_t^α)′ − (A_ref^α)′|²` at the faces.
    pub bias_err1: f64,
    pub bias_err2: f64,
    pub ck: Option<CkCheck>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FpSnapshot {
    pub t: f64,
    pub density: DensityField2D,
    /// `(A_t^α)′` at the faces `(k + 1)/bins`.
    pub bias_derivative1: Vec<f64>,
    pub bias_derivative2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FpRun {
    pub rows: Vec<FpRow>,
    pub snapshots: Vec<FpSnapshot>,
    pub final_density: DensityField2D,
    /// Explicit-scheme bound on `dt` at the initial state.
    pub dt_bound: f64,
    pub steps: usize,
}

impl FpRun {
    /// CSV with columns `t,H,I,H_M1,H_M2,mass,bias_err1,bias_err2`.
    pub fn series_csv(&self) -> String {
        let mut out = String::from("t,H,I,H_M1,H_M2,mass,bias_err1,bias_err2\n");
        for r in &self.rows {
            let cells = [r.t, r.h, r.fisher, r.hm1, r.hm2, r.mass, r.bias_err1, r.bias_err2];
            let cells: Vec<String> = cells.iter().map(|v| fmt_f64(*v)).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Exponential-fitting face weights and the evolving state of the scheme.
struct FpScheme {
    b: usize,
    beta: f64,
    /// `e^{∓βΔV/2}` across x₁ faces (i → i+1) and x₂ faces (j → j+1).
    wp1: Vec<f64>,
    wm1: Vec<f64>,
    wp2: Vec<f64>,
    wm2: Vec<f64>,
    /// `e^{βa/2}` per face row (x₁ faces) and column (x₂ faces).
    y1: Vec<f64>,
    y2: Vec<f64>,
}

impl FpScheme {
    fn new(spec: &PotentialSpec, beta: f64, b: usize) -> Result<Self> {
        let v = cell_values(spec, b)?;
        let mut wp1 = vec![0.0; b * b];
        let mut wm1 = vec![0.0; b * b];
        let mut wp2 = vec![0.0; b * b];
        let mut wm2 = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                let k = i * b + j;
                let d1 = v[((i + 1) % b) * b + j] - v[k];
                let d2 = v[i * b + (j + 1) % b] - v[k];
                wp1[k] = (-beta * d1 / 2.0).exp();
                wm1[k] = (beta * d1 / 2.0).exp();
                wp2[k] = (-beta * d2 / 2.0).exp();
                wm2[k] = (beta * d2 / 2.0).exp();
            }
        }
        Ok(Self {
            b,
            beta,
            wp1,
            wm1,
            wp2,
            wm2,
            y1: vec![1.0; b],
            y2: vec![1.0; b],
        })
    }

    fn set_frozen(&mut self, a1: &[f64], a2: &[f64]) {
        let b = self.b;
        for i in 0..b {
            self.y1[i] = (self.beta * (a1[(i + 1) % b] - a1[i]) / 2.0).exp();
            self.y2[i] = (self.beta * (a2[(i + 1) % b] - a2[i]) / 2.0).exp();
        }
    }

    /// Positive root of `P y² − S y − Q = 0`, which makes the summed face
    /// flux equal the pure-diffusion flux of the marginal.
    fn root(p: f64, q: f64, s: f64) -> f64 {
        let disc = (s * s + 4.0 * p * q).sqrt();
        if s >= 0.0 {
            (s + disc) / (2.0 * p)
        } else {
            2.0 * q / (disc - s)
        }
    }

    fn set_adaptive(&mut self, psi: &[f64]) {
        let b = self.b;
        let (wp1, wm1, wp2, wm2) = (&self.wp1, &self.wm1, &self.wp2, &self.wm2);
        self.y1.par_iter_mut().enumerate().for_each(|(i, y)| {
            let ip = (i + 1) % b;
            let (mut p, mut q, mut s) = (0.0, 0.0, 0.0);
            for j in 0..b {
                p += psi[i * b + j] * wp1[i * b + j];
                q += psi[ip * b + j] * wm1[i * b + j];
                s += psi[i * b + j] - psi[ip * b + j];
            }
            *y = Self::root(p, q, s);
        });
        self.y2.par_iter_mut().enumerate().for_each(|(j, y)| {
            let jp = (j + 1) % b;
            let (mut p, mut q, mut s) = (0.0, 0.0, 0.0);
            for i in 0..b {
                p += psi[i * b + j] * wp2[i * b + j];
                q += psi[i * b + jp] * wm2[i * b + j];
                s += psi[i * b + j] - psi[i * b + jp];
            }
            *y = Self::root(p, q, s);
        });
    }

    /// `(A^α)′` at the faces implied by the current increments.
    fn bias_derivatives(&self) -> (Vec<f64>, Vec<f64>) {
        let scale = 2.0 * self.b as f64 / self.beta;
        (
            self.y1.iter().map(|y| y.ln() * scale).collect(),
            self.y2.iter().map(|y| y.ln() * scale).collect(),
        )
    }

    /// Largest stable `dt`: the inverse of the largest total outflow rate.
    fn dt_bound(&self) -> f64 {
        let b = self.b;
        let d = 1.0 / self.beta;
        let h2 = 1.0 / (b * b) as f64;
        let mut worst = 0.0f64;
        for i in 0..b {
            let im = (i + b - 1) % b;
            for j in 0..b {
                let jm = (j + b - 1) % b;
                let out = self.wp1[i * b + j] * self.y1[i]
                    + self.wm1[im * b + j] / self.y1[im]
                    + self.wp2[i * b + j] * self.y2[j]
                    + self.wm2[i * b + jm] / self.y2[jm];
                worst = worst.max(out);
            }
        }
        h2 / (d * worst)
    }

    fn step(&self, psi: &[f64], out: &mut [f64], dt: f64) {
        let b = self.b;
        let c = dt * (b * b) as f64 / self.beta;
        out.par_chunks_mut(b).enumerate().for_each(|(i, row)| {
            let im = (i + b - 1) % b;
            let ip = (i + 1) % b;
            for j in 0..b {
                let jm = (j + b - 1) % b;
                let jp = (j + 1) % b;
                let k = i * b + j;
                // scaled fluxes through the four faces of cell (i, j)
                let right = psi[k] * self.wp1[k] * self.y1[i] - psi[ip * b + j] * self.wm1[k] / self.y1[i];
                let left = psi[im * b + j] * self.wp1[im * b + j] * self.y1[im]
                    - psi[k] * self.wm1[im * b + j] / self.y1[im];
                let up = psi[k] * self.wp2[k] * self.y2[j] - psi[i * b + jp] * self.wm2[k] / self.y2[j];
                let down = psi[i * b + jm] * self.wp2[i * b + jm] * self.y2[jm]
                    - psi[k] * self.wm2[i * b + jm] / self.y2[jm];
                row[j] = psi[k] + c * (left - right + down - up);
            }
        });
    }
}

fn marginal_entropy(m: &[f64]) -> f64 {
    m.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>() / m.len() as f64
}

/// Upper bound on `dt` for the explicit scheme at density `psi0`.
pub fn fp_stability_bound(spec: &PotentialSpec, psi0: &DensityField2D, beta: f64, bias: &FpBias) -> Result<f64> {
    let mut s = FpScheme::new(spec, beta, psi0.bins())?;
    match bias {
        FpBias::None => {}
        FpBias::Frozen { a1, a2 } => s.set_frozen(a1, a2),
        FpBias::Adaptive => s.set_adaptive(psi0.values()),
    }
    Ok(s.dt_bound())
}

/// Explicit conservative finite-volume evolution of the biased
/// Fokker–Planck equation on `T²`.
///
/// Face fluxes use exponential fitting,
/// `J = (D/h)[ψ_L e^{−β(ΔV−Δa)/2} − ψ_R e^{β(ΔV−Δa)/2}]` with `D = β⁻¹`,
/// where `Δa` is the bias increment across the face. In adaptive mode the
/// increment of each face row is the one for which the row-summed flux equals
/// the diffusive flux of the marginal, so the discrete marginals solve the
/// discrete heat equation exactly and every stationary pair is an exact
/// fixed point.
pub fn evolve_fokker_planck(spec: &PotentialSpec, psi0: &DensityField2D, opts: &FpOptions) -> Result<FpRun> {
    if spec.dim() != 2 {
        return Err(Error::Unsupported("Fokker–Planck evolution needs n = 2".into()));
    }
    let b = opts.bins;
    if psi0.bins() != b {
        return Err(Error::ShapeMismatch("initial density grid".into()));
    }
    if !(opts.beta > 0.0 && opts.dt > 0.0 && opts.t_final >= 0.0) {
        return Err(Error::InvalidArgument("need beta > 0, dt > 0, t_final >= 0".into()));
    }
    if let Some(r) = &opts.reference {
        if r.bins() != b {
            return Err(Error::ShapeMismatch("reference density grid".into()));
        }
    }
    let mut scheme = FpScheme::new(spec, opts.beta, b)?;
    if let FpBias::Frozen { a1, a2 } = &opts.bias {
        if a1.len() != b || a2.len() != b {
            return Err(Error::ShapeMismatch("frozen bias length".into()));
        }
        scheme.set_frozen(a1, a2);
    }
    let adaptive = opts.bias == FpBias::Adaptive;
    let mut psi = psi0.values().to_vec();
    let mut next = vec![0.0; b * b];
    if adaptive {
        scheme.set_adaptive(&psi);
    }
    let dt_bound = scheme.dt_bound();
    let steps = (opts.t_final / opts.dt).round() as usize;
    let every = opts.record_every.max(1);

    let record = |psi: &[f64], scheme: &FpScheme, t: f64| -> Result<FpRow> {
        let field = DensityField2D {
            bins: b,
            values: psi.to_vec(),
        };
        let (h, fisher, ck) = match &opts.reference {
            Some(r) => {
                let ck = csiszar_kullback_check(psi, r.values())?;
                if !ck.ok {
                    return Err(Error::BoundViolation(format!(
                        "Csiszár–Kullback fails at t = {t}: {} > {}",
                        ck.l1, ck.bound
                    )));
                }
                (
                    relative_entropy(psi, r.values())?,
                    fisher_information(psi, r.values(), &[b, b]).unwrap_or(f64::NAN),
                    Some(ck),
                )
            }
            None => (0.0, 0.0, None),
        };
        let (d1, d2) = scheme.bias_derivatives();
        let (e1, e2) = match &opts.reference_bias {
            Some((r1, r2)) => {
                let l2 = |d: &[f64], r: &[f64]| d.iter().zip(r).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / b as f64;
                (l2(&d1, r1), l2(&d2, r2))
            }
            None => (0.0, 0.0),
        };
        Ok(FpRow {
            t,
            mass: field.mass(),
            h,
            fisher,
            hm1: marginal_entropy(&field.marginal(0)),
            hm2: marginal_entropy(&field.marginal(1)),
            bias_err1: e1,
            bias_err2: e2,
            ck,
        })
    };
    let snapshot = |psi: &[f64], scheme: &FpScheme, t: f64| -> FpSnapshot {
        let (d1, d2) = scheme.bias_derivatives();
        FpSnapshot {
            t,
            density: DensityField2D {
                bins: b,
                values: psi.to_vec(),
            },
            bias_derivative1: d1,
            bias_derivative2: d2,
        }
    };

    let mut rows = vec![record(&psi, &scheme, 0.0)?];
    let mut snapshots = vec![];
    if opts.snapshot_every > 0 {
        snapshots.push(snapshot(&psi, &scheme, 0.0));
    }
    for step in 1..=steps {
        scheme.step(&psi, &mut next, opts.dt);
        let min = next.iter().copied().fold(f64::INFINITY, f64::min);
        if min < -1e-12 || !min.is_finite() {
            return Err(Error::Stability {
                min_density: min,
                dt_bound: scheme.dt_bound(),
            });
        }
        std::mem::swap(&mut psi, &mut next);
        if adaptive {
            scheme.set_adaptive(&psi);
        }
        let t = step as f64 * opts.dt;
        if step % every == 0 || step == steps {
            rows.push(record(&psi, &scheme, t)?);
        }
        if opts.snapshot_every > 0 && (step % opts.snapshot_every == 0 || step == steps) {
            snapshots.push(snapshot(&psi, &scheme, t));
        }
    }
    Ok(FpRun {
        rows,
        snapshots,
        final_density: DensityField2D { bins: b, values: psi },
        dt_bound,
        steps,
    })
}

/// Face derivatives `(A(k+1) − A(k))·bins` of cell-centered bias values.
pub fn face_derivatives(a: &[f64]) -> Vec<f64> {
    let b = a.len();
    (0..b).map(|k| (a[(k + 1) % b] - a[k]) * b as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::fit_decay_rate;
    use crate::potentials::{CosineTerm, StandardFamily};
    use std::f64::consts::PI;

    fn coupled(eps: f64) -> PotentialSpec {
        StandardFamily::CoupledDoubleWell { coupling: eps }.build(2).unwrap()
    }

    #[test]
    fn free_energy_2d_examples() {
        let c = coupled(0.5);
        let a = free_energy_2d(&c, 1.0, 16).unwrap();
        let v = cell_values(&c, 16).unwrap();
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        for (x, y) in a.values().iter().zip(&v) {
            assert!((x - (y - min)).abs() < 1e-12);
        }
        let d3 = StandardFamily::DecoupledDoubleWell
            .build(3)
            .unwrap()
            .with_terms(vec![CosineTerm::cosine(1.0, vec![0, 0, 1])])
            .unwrap();
        let a3 = free_energy_2d(&d3, 1.0, 16).unwrap();
        let d2 = free_energy_2d(&StandardFamily::DecoupledDoubleWell.build(2).unwrap(), 1.0, 16).unwrap();
        for (x, y) in a3.values().iter().zip(d2.values()) {
            assert!((x - y).abs() < 1e-12);
        }
        let four = PotentialSpec::constant(4, 0.0).unwrap();
        assert!(free_energy_2d(&four, 1.0, 4).is_err());
    }

    #[test]
    fn free_energy_1d_examples() {
        let d = StandardFamily::DecoupledDoubleWell.build(2).unwrap();
        let a = free_energy_1d(&d, 0, 1.0, 64).unwrap();
        let g = PeriodicGrid1D::new(64).unwrap();
        let exact: Vec<f64> = g.centers().map(|z| (4.0 * PI * z).cos()).collect();
        let min = exact.iter().copied().fold(f64::INFINITY, f64::min);
        for (x, y) in a.values().iter().zip(&exact) {
            assert!((x - (y - min)).abs() < 1e-12);
        }
        let flat = PotentialSpec::constant(2, 0.0).unwrap();
        assert!(free_energy_1d(&flat, 1, 1.0, 8).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn coupled_free_energy_1d_matches_frozen_reference() {
        // numpy oracle: A¹(0) − A¹(1/4) = 2.0535709556844166 for coupled(0.5).
        // Bins 0 and 128 of 512 sit half a bin past those nodes, which moves
        // the difference by O(h²).
        let a = free_energy_1d(&coupled(0.5), 0, 1.0, 512).unwrap();
        let v = a.values();
        assert!(((v[0] - v[128]) - 2.053_570_955_684_416_6).abs() < 1e-3, "{}", v[0] - v[128]);
        assert!((v[0] - v[256]).abs() < 1e-12);
    }

    #[test]
    fn canonical_average_examples() {
        let flat = PotentialSpec::constant(2, 0.0).unwrap();
        let one = |_: &[f64]| 1.0;
        let c1 = |x: &[f64]| (2.0 * PI * x[0]).cos();
        assert!((canonical_average(&coupled(0.5), &one, 1.0, 32).unwrap() - 1.0).abs() < 1e-14);
        assert!(canonical_average(&flat, &c1, 1.0, 32).unwrap().abs() < 1e-14);
        // by the symmetry x → x + (1/2, 1/2) the average vanishes
        assert!(canonical_average(&coupled(0.5), &c1, 1.0, 64).unwrap().abs() < 1e-12);
    }

    #[test]
    fn stationary_pair_decoupled_recovers_free_energies() {
        let d = StandardFamily::DecoupledDoubleWell.build(2).unwrap();
        let pair = solve_stationary_pair(&d, 1.0, 128, 1e-12, 100).unwrap();
        for axis in 0..2 {
            let ainf = pair.bias(axis).unwrap();
            let a = free_energy_1d(&d, axis, 1.0, 128).unwrap();
            let err = ainf
                .values()
                .iter()
                .zip(a.values())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-8, "{err}");
        }
        assert!(pair.residual < 1e-10);
    }

    #[test]
    fn stationary_pair_constant_potential() {
        let flat = PotentialSpec::constant(2, 3.0).unwrap();
        let p = solve_stationary_pair(&flat, 1.0, 16, 1e-12, 10).unwrap();
        assert!(p.rho1.iter().chain(&p.rho2).all(|&r| (r - p.rho1[0]).abs() < 1e-14));
    }

    #[test]
    fn stationary_pair_coupled_properties() {
        for (eps, tv) in [(1.0, 0.288_717_353_190_479_7), (0.5, 0.155_052_066_237_137_24)] {
            let p = solve_stationary_pair(&coupled(eps), 1.0, 128, 1e-10, 200).unwrap();
            assert!(p.residual < 1e-9);
            let psi = p.density().unwrap();
            for axis in 0..2 {
                let m = psi.marginal(axis);
                assert!(m.iter().all(|v| (v - 1.0).abs() < 1e-8));
            }
            assert!((psi.tv_from_uniform() - tv).abs() < 1e-8, "{}", psi.tv_from_uniform());
            // observed: the change decreases monotonically after the first iteration
            assert!(p.history.windows(2).skip(1).all(|w| w[1] <= w[0]));
        }
        let err = solve_stationary_pair(&coupled(1.0), 1.0, 64, 1e-300, 3).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { iterations: 3, .. }));
    }

    fn opts(bins: usize, dt: f64, t_final: f64, bias: FpBias) -> FpOptions {
        FpOptions {
            beta: 1.0,
            bins,
            dt,
            t_final,
            bias,
            record_every: 1,
            snapshot_every: 0,
            reference: None,
            reference_bias: None,
        }
    }

    #[test]
    fn pure_diffusion_marginal_decays_at_heat_rate() {
        let flat = PotentialSpec::constant(2, 0.0).unwrap();
        let bins = 64;
        let psi0 = DensityField2D::from_fn(bins, |x1, _| 1.0 + 0.5 * (2.0 * PI * x1).cos()).unwrap();
        let dt = 0.2 / (bins * bins) as f64;
        let run = evolve_fokker_planck(&flat, &psi0, &opts(bins, dt, 0.02, FpBias::None)).unwrap();
        let m = run.final_density.marginal(0);
        // amplitude of the cos mode: discrete decay factor per step
        let amp: f64 = m
            .iter()
            .enumerate()
            .map(|(k, v)| v * (2.0 * PI * (k as f64 + 0.5) / bins as f64).cos())
            .sum::<f64>()
            * 2.0
            / bins as f64;
        let exact = 0.5 * (-4.0 * PI * PI * 0.02f64).exp();
        assert!((amp / exact - 1.0).abs() < 2e-3, "{amp} vs {exact}");
        for r in &run.rows {
            assert!((r.mass - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stationary_density_is_fixed_point() {
        let c = coupled(0.5);
        let bins = 32;
        let pair = solve_stationary_pair(&c, 1.0, bins, 1e-13, 500).unwrap();
        let psi_inf = pair.density().unwrap();
        let a1: Vec<f64> = pair.rho1.iter().map(|r| -r.ln()).collect();
        let a2: Vec<f64> = pair.rho2.iter().map(|r| -r.ln()).collect();
        let bound = fp_stability_bound(&c, &psi_inf, 1.0, &FpBias::Adaptive).unwrap();
        let dt = 0.9 * bound;
        for bias in [FpBias::Adaptive, FpBias::Frozen { a1, a2 }] {
            let run = evolve_fokker_planck(&c, &psi_inf, &opts(bins, dt, 10_000.0 * dt, bias)).unwrap();
            assert!(run.final_density.max_abs_diff(&psi_inf).unwrap() < 1e-6);
        }
    }

    #[test]
    fn adaptive_run_entropy_is_nonincreasing() {
        let c = coupled(0.5);
        let bins = 32;
        let pair = solve_stationary_pair(&c, 1.0, bins, 1e-13, 500).unwrap();
        let psi0 = DensityField2D::from_fn(bins, |x1, x2| {
            1.0 + 0.5 * (2.0 * PI * (x1 + 2.0 * x2)).sin() + 0.3 * (2.0 * PI * x1).cos()
        })
        .unwrap();
        let dt = 0.5 * fp_stability_bound(&c, &psi0, 1.0, &FpBias::Adaptive).unwrap();
        let mut o = opts(bins, dt, 0.2, FpBias::Adaptive);
        o.reference = Some(pair.density().unwrap());
        o.record_every = 10;
        let run = evolve_fokker_planck(&c, &psi0, &o).unwrap();
        for w in run.rows.windows(2) {
            assert!(w[1].h <= w[0].h + 1e-14, "{:?}", w);
            assert!(w[1].ck.unwrap().ok);
        }
        assert!(run.rows.last().unwrap().h < 1e-4);
    }

    #[test]
    fn marginals_follow_discrete_heat_equation_in_adaptive_runs() {
        let c = coupled(1.0);
        let bins = 32;
        let psi0 = DensityField2D::from_fn(bins, |x1, x2| {
            (1.5 * (2.0 * PI * x1).sin() + (2.0 * PI * (x1 - x2)).cos()).exp()
        })
        .unwrap();
        let flat = PotentialSpec::constant(2, 0.0).unwrap();
        let dt = 0.5 * fp_stability_bound(&c, &psi0, 1.0, &FpBias::Adaptive).unwrap();
        let a = evolve_fokker_planck(&c, &psi0, &opts(bins, dt, 200.0 * dt, FpBias::Adaptive)).unwrap();
        // with V ≡ 0 and no bias the same marginal evolves by the same stencil
        let b = evolve_fokker_planck(&flat, &psi0, &opts(bins, dt, 200.0 * dt, FpBias::None)).unwrap();
        for axis in 0..2 {
            let ma = a.final_density.marginal(axis);
            let mb = b.final_density.marginal(axis);
            let err = ma.iter().zip(&mb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "{err}");
        }
    }

    #[test]
    fn negative_density_is_reported() {
        let c = coupled(0.5);
        let psi0 = DensityField2D::from_fn(16, |x1, _| if x1 < 0.1 { 1.0 } else { 0.0 }).unwrap();
        let err = evolve_fokker_planck(&c, &psi0, &opts(16, 0.1, 0.5, FpBias::None)).unwrap_err();
        assert!(matches!(err, Error::Stability { .. }), "{err:?}");
    }

    #[test]
    fn heat_rate_fit_on_entropy_series() {
        let flat = PotentialSpec::constant(2, 0.0).unwrap();
        let bins = 64;
        let psi0 = DensityField2D::from_fn(bins, |x1, _| 1.0 + 0.5 * (2.0 * PI * x1).cos()).unwrap();
        let dt = 0.2 / (bins * bins) as f64;
        let mut o = opts(bins, dt, 0.1, FpBias::None);
        o.record_every = 20;
        let run = evolve_fokker_planck(&flat, &psi0, &o).unwrap();
        let series: Vec<(f64, f64)> = run.rows.iter().map(|r| (r.t, r.hm1)).collect();
        let (rate, r2) = fit_decay_rate(&series, (0.05, 0.1)).unwrap();
        assert!((rate / (8.0 * PI * PI) - 1.0).abs() < 0.02, "{rate}");
        assert!(r2 > 0.999);
    }
}
