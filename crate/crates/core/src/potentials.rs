//! Analytic periodic potentials built from finite sums of cosine products.
//!
//! Every term has the form `c * prod_i cos(2 pi k_i x_i + phi_i)`, which keeps
//! gradients, mixed second derivatives and low-order quadrature exact.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PeriodicGrid1D, TorusPoint};

const TWO_PI: f64 = 2.0 * PI;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineTerm {
    pub amplitude: f64,
    pub wavevector: Vec<i32>,
    pub phase: Vec<f64>,
}

impl CosineTerm {
    pub fn new(amplitude: f64, wavevector: Vec<i32>, phase: Vec<f64>) -> Self {
        Self {
            amplitude,
            wavevector,
            phase,
        }
    }

    /// Term with all phases zero.
    pub fn cosine(amplitude: f64, wavevector: Vec<i32>) -> Self {
        let phase = vec![0.0; wavevector.len()];
        Self::new(amplitude, wavevector, phase)
    }

    #[inline]
    fn angle(&self, i: usize, x: f64) -> f64 {
        TWO_PI * self.wavevector[i] as f64 * x + self.phase[i]
    }
}

/// A smooth 1-periodic potential `V: T^n -> R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialSpec {
    n: usize,
    terms: Vec<CosineTerm>,
    label: String,
}

impl PotentialSpec {
    pub fn new(n: usize, terms: Vec<CosineTerm>, label: impl Into<String>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("potential needs n >= 1".into()));
        }
        for t in &terms {
            if t.wavevector.len() != n || t.phase.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: t.wavevector.len().min(t.phase.len()),
                });
            }
            if !t.amplitude.is_finite() {
                return Err(Error::NonFinite(t.amplitude));
            }
            if let Some(p) = t.phase.iter().find(|p| !p.is_finite()) {
                return Err(Error::NonFinite(*p));
            }
        }
        Ok(Self {
            n,
            terms,
            label: label.into(),
        })
    }

    /// `V ≡ value` on `T^n`.
    pub fn constant(n: usize, value: f64) -> Result<Self> {
        Self::new(
            n,
            vec![CosineTerm::cosine(value, vec![0; n])],
            "constant",
        )
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn terms(&self) -> &[CosineTerm] {
        &self.terms
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Appends terms, e.g. to give a standard family extra degrees of freedom.
    pub fn with_terms(mut self, extra: Vec<CosineTerm>) -> Result<Self> {
        let mut terms = std::mem::take(&mut self.terms);
        terms.extend(extra);
        Self::new(self.n, terms, self.label)
    }

    fn check_dim(&self, found: usize) -> Result<()> {
        if found != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                found,
            });
        }
        Ok(())
    }

    pub fn evaluate(&self, x: &TorusPoint) -> Result<f64> {
        self.check_dim(x.dim())?;
        Ok(self.energy(x.coords()))
    }

    pub fn gradient(&self, x: &TorusPoint) -> Result<Vec<f64>> {
        self.check_dim(x.dim())?;
        let mut g = vec![0.0; self.n];
        self.gradient_into(x.coords(), &mut g);
        Ok(g)
    }

    /// Energy at raw coordinates; the caller guarantees `x.len() == n`.
    pub fn energy(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                t.amplitude
                    * x.iter()
                        .enumerate()
                        .filter(|(i, _)| t.wavevector[*i] != 0 || t.phase[*i] != 0.0)
                        .map(|(i, &xi)| t.angle(i, xi).cos())
                        .product::<f64>()
            })
            .sum()
    }

    /// Writes `∇V(x)` into `out`; the caller guarantees matching lengths.
    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|g| *g = 0.0);
        let n = self.n;
        let mut cosines = [0.0f64; 8];
        let mut dsines = [0.0f64; 8];
        let mut cos_vec;
        let mut dsin_vec;
        let (cs, ds): (&mut [f64], &mut [f64]) = if n <= 8 {
            (&mut cosines[..n], &mut dsines[..n])
        } else {
            cos_vec = vec![0.0; n];
            dsin_vec = vec![0.0; n];
            (&mut cos_vec[..], &mut dsin_vec[..])
        };
        for t in &self.terms {
            if t.wavevector.iter().all(|&k| k == 0) {
                continue;
            }
            for i in 0..n {
                let th = t.angle(i, x[i]);
                let (s, c) = th.sin_cos();
                cs[i] = c;
                ds[i] = -TWO_PI * t.wavevector[i] as f64 * s;
            }
            for j in 0..n {
                if t.wavevector[j] == 0 {
                    continue;
                }
                let mut p = t.amplitude * ds[j];
                for (i, c) in cs.iter().enumerate() {
                    if i != j {
                        p *= c;
                    }
                }
                out[j] += p;
            }
        }
    }

    /// Analytic `∂²V / ∂x_i ∂x_j` at raw coordinates.
    pub fn second_derivative(&self, x: &[f64], i: usize, j: usize) -> f64 {
        let mut acc = 0.0;
        for t in &self.terms {
            if t.wavevector[i] == 0 || t.wavevector[j] == 0 {
                continue;
            }
            let mut p = t.amplitude;
            for (l, &xl) in x.iter().enumerate() {
                let th = t.angle(l, xl);
                let kl = TWO_PI * t.wavevector[l] as f64;
                p *= if l == i && l == j {
                    -kl * kl * th.cos()
                } else if l == i || l == j {
                    -kl * th.sin()
                } else {
                    th.cos()
                };
            }
            acc += p;
        }
        acc
    }

    /// True when some term couples axis `axis` to another coordinate.
    pub fn mixes(&self, axis: usize) -> bool {
        self.terms.iter().any(|t| {
            t.wavevector[axis] != 0
                && t
                    .wavevector
                    .iter()
                    .enumerate()
                    .any(|(l, &k)| l != axis && k != 0)
        })
    }

    /// Grid estimate of the coupling constants
    /// `κ_α = sup |∇_{x ≠ x_α} ∂_{x_α} V|` for `α = 1, 2`.
    ///
    /// Evaluated on the bin-center product grid with `bins` points per axis,
    /// which gives a lower bound converging to the sup norm under refinement.
    pub fn coupling_constants(&self, bins: usize) -> Result<(f64, f64)> {
        if self.n < 2 {
            return Err(Error::InvalidArgument(
                "coupling constants need n >= 2".into(),
            ));
        }
        let grid = PeriodicGrid1D::new(bins)?;
        let kappa = |axis: usize| -> f64 {
            if !self.mixes(axis) {
                return 0.0;
            }
            let total = bins.pow(self.n as u32);
            let mut x = vec![0.0; self.n];
            let mut best = 0.0f64;
            for flat in 0..total {
                let mut r = flat;
                for xi in x.iter_mut().rev() {
                    *xi = grid.center(r % bins);
                    r /= bins;
                }
                let norm_sq: f64 = (0..self.n)
                    .filter(|&j| j != axis)
                    .map(|j| self.second_derivative(&x, axis, j).powi(2))
                    .sum();
                best = best.max(norm_sq.sqrt());
            }
            best
        };
        Ok((kappa(0), kappa(1)))
    }
}

/// Named potentials used throughout the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum StandardFamily {
    /// `cos(4πx₁) + cos(4πx₂)`.
    DecoupledDoubleWell,
    /// `cos(4πx₁) + cos(4πx₂) + ε cos(2π(x₁ − x₂))`.
    CoupledDoubleWell { coupling: f64 },
    /// `s (1 − cos(2π(x₁ − x₂))) + cos(2π(x₁ + x₂))`: a low channel along the
    /// diagonal with a periodic barrier along it.
    DiagonalChannel { strength: f64 },
}

impl StandardFamily {
    pub fn label(&self) -> String {
        match self {
            Self::DecoupledDoubleWell => "decoupled_double_well".into(),
            Self::CoupledDoubleWell { coupling } => format!("coupled_double_well({coupling})"),
            Self::DiagonalChannel { strength } => format!("diagonal_channel({strength})"),
        }
    }

    /// Builds the potential on `T^n`; coordinates beyond the second are free.
    pub fn build(&self, n: usize) -> Result<PotentialSpec> {
        if n < 2 {
            return Err(Error::InvalidArgument(
                "standard families live on T^n with n >= 2".into(),
            ));
        }
        let axes = |k1: i32, k2: i32| {
            let mut k = vec![0; n];
            k[0] = k1;
            k[1] = k2;
            k
        };
        let shifted = |k1: i32, k2: i32| {
            let mut p = vec![0.0; n];
            if k1 != 0 {
                p[0] = -PI / 2.0;
            }
            if k2 != 0 {
                p[1] = -PI / 2.0;
            }
            CosineTerm::new(1.0, axes(k1, k2), p)
        };
        let scaled = |mut t: CosineTerm, a: f64| {
            t.amplitude *= a;
            t
        };
        let mut terms = vec![];
        match *self {
            Self::DecoupledDoubleWell => {
                terms.push(CosineTerm::cosine(1.0, axes(2, 0)));
                terms.push(CosineTerm::cosine(1.0, axes(0, 2)));
            }
            Self::CoupledDoubleWell { coupling } => {
                terms.push(CosineTerm::cosine(1.0, axes(2, 0)));
                terms.push(CosineTerm::cosine(1.0, axes(0, 2)));
                if coupling != 0.0 {
                    // cos(a - b) = cos a cos b + sin a sin b
                    terms.push(CosineTerm::cosine(coupling, axes(1, 1)));
                    terms.push(scaled(shifted(1, 1), coupling));
                }
            }
            Self::DiagonalChannel { strength } => {
                terms.push(CosineTerm::cosine(strength, vec![0; n]));
                terms.push(CosineTerm::cosine(-strength, axes(1, 1)));
                terms.push(scaled(shifted(1, 1), -strength));
                // cos(a + b) = cos a cos b - sin a sin b
                terms.push(CosineTerm::cosine(1.0, axes(1, 1)));
                terms.push(scaled(shifted(1, 1), -1.0));
            }
        }
        PotentialSpec::new(n, terms, self.label())
    }
}
