//! Flat unit-torus arithmetic: wrapping, minimal signed differences,
//! periodic binning and the periodic midpoint quadrature rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reduces `z` modulo 1 into `[0, 1)`.
pub fn wrap(z: f64) -> Result<f64> {
    if !z.is_finite() {
        return Err(Error::NonFinite(z));
    }
    Ok(wrap_unit(z))
}

/// Infallible version of [`wrap`] for values already known to be finite.
#[inline]
pub(crate) fn wrap_unit(z: f64) -> f64 {
    let r = z - z.floor();
    // z slightly below an integer rounds up to exactly 1.0
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Minimal signed representative of `a - b` on the torus, in `[-0.5, 0.5)`.
pub fn periodic_delta(a: f64, b: f64) -> Result<f64> {
    if !a.is_finite() {
        return Err(Error::NonFinite(a));
    }
    if !b.is_finite() {
        return Err(Error::NonFinite(b));
    }
    Ok(wrap_unit(a - b + 0.5) - 0.5)
}

/// A point of the flat torus `T^n`; every component lives in `[0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorusPoint {
    coords: Vec<f64>,
}

impl TorusPoint {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidArgument("torus point needs n >= 1".into()));
        }
        let coords = coords.into_iter().map(wrap).collect::<Result<Vec<_>>>()?;
        Ok(Self { coords })
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Returns the point shifted by `delta`, wrapped back onto the torus.
    pub fn translate(&self, delta: &[f64]) -> Result<Self> {
        if delta.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: delta.len(),
            });
        }
        let coords = self
            .coords
            .iter()
            .zip(delta)
            .map(|(x, d)| wrap(x + d))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { coords })
    }
}

/// Uniform binning of the unit circle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodicGrid1D {
    bins: usize,
}

impl PeriodicGrid1D {
    pub fn new(bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::EmptyGrid);
        }
        Ok(Self { bins })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn width(&self) -> f64 {
        1.0 / self.bins as f64
    }

    /// `floor(z * bins)` for `z` in `[0, 1)`; other inputs are wrapped first.
    #[inline]
    pub fn bin_index(&self, z: f64) -> usize {
        let k = (wrap_unit(z) * self.bins as f64) as usize;
        k.min(self.bins - 1)
    }

    #[inline]
    pub fn center(&self, k: usize) -> f64 {
        (k as f64 + 0.5) / self.bins as f64
    }

    pub fn centers(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.bins).map(move |k| self.center(k))
    }
}

/// Periodic midpoint rule on a uniform grid of `T^d`, `d <= 3`.
///
/// `values` is the row-major flattening of a grid of shape `shape`. The torus
/// has unit volume, so the integral is the plain mean of the samples.
pub fn periodic_quadrature(values: &[f64], shape: &[usize]) -> Result<f64> {
    if shape.is_empty() || shape.len() > 3 {
        return Err(Error::Unsupported(format!(
            "quadrature on T^{} (supported: 1 <= d <= 3)",
            shape.len()
        )));
    }
    let total: usize = shape.iter().product();
    if total == 0 || values.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if values.len() != total {
        return Err(Error::ShapeMismatch(format!(
            "{} values for grid shape {:?}",
            values.len(),
            shape
        )));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(*bad));
    }
    Ok(values.iter().sum::<f64>() / total as f64)
}
