//! Binned running conditional means of deposited force samples.
//!
//! A [`BiasGrid1D`] stores the estimate of the derivative of a one-dimensional
//! adaptive bias, a [`BiasGrid2D`] the gradient of a two-dimensional one.
//! The bias derivative is piecewise constant over bins.

use serde::{Deserialize, Serialize};

use crate::coordinates::{CoordinateGroup, CoordinateSet};
use crate::error::{Error, Result};
use crate::export::fmt_f64;
use crate::geometry::PeriodicGrid1D;

/// `min(1, count / threshold)`; a zero threshold disables ramping.
#[inline]
pub fn ramp(count: u64, threshold: u64) -> f64 {
    if threshold == 0 {
        1.0
    } else {
        (count as f64 / threshold as f64).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasGrid1D {
    grid: PeriodicGrid1D,
    count: Vec<u64>,
    force_sum: Vec<f64>,
}

impl BiasGrid1D {
    pub fn new(bins: usize) -> Result<Self> {
        let grid = PeriodicGrid1D::new(bins)?;
        Ok(Self {
            grid,
            count: vec![0; bins],
            force_sum: vec![0.0; bins],
        })
    }

    /// A grid whose bins hold the given means with unit counts; used to
    /// freeze a bias at a known derivative table.
    pub fn from_means(means: &[f64]) -> Result<Self> {
        let mut g = Self::new(means.len())?;
        for (k, &m) in means.iter().enumerate() {
            if !m.is_finite() {
                return Err(Error::NonFinite(m));
            }
            g.count[k] = 1;
            g.force_sum[k] = m;
        }
        Ok(g)
    }

    pub fn grid(&self) -> PeriodicGrid1D {
        self.grid
    }

    pub fn bins(&self) -> usize {
        self.grid.bins()
    }

    pub fn counts(&self) -> &[u64] {
        &self.count
    }

    pub fn sums(&self) -> &[f64] {
        &self.force_sum
    }

    pub fn deposit(&mut self, z: f64, sample: f64) -> Result<()> {
        if !sample.is_finite() {
            return Err(Error::NonFiniteSample { z, sample });
        }
        let k = self.grid.bin_index(z);
        self.deposit_bin(k, sample);
        Ok(())
    }

    #[inline]
    pub(crate) fn deposit_bin(&mut self, k: usize, sample: f64) {
        self.count[k] += 1;
        self.force_sum[k] += sample;
    }

    pub fn mean(&self, k: usize) -> f64 {
        if self.count[k] == 0 {
            0.0
        } else {
            self.force_sum[k] / self.count[k] as f64
        }
    }

    pub fn means(&self) -> Vec<f64> {
        (0..self.bins()).map(|k| self.mean(k)).collect()
    }

    /// Ramped bin mean at `z`: the derivative of the applied bias.
    #[inline]
    pub fn bias_derivative(&self, z: f64, ramp_threshold: u64) -> f64 {
        let k = self.grid.bin_index(z);
        ramp(self.count[k], ramp_threshold) * self.mean(k)
    }

    /// Count-weighted average of the bin means. On a periodic coordinate the
    /// derivative of a converged bias should average to about zero.
    pub fn mean_residual(&self) -> f64 {
        let total: u64 = self.count.iter().sum();
        if total == 0 {
            0.0
        } else {
            self.force_sum.iter().sum::<f64>() / total as f64
        }
    }

    pub fn empty_bins(&self) -> Vec<usize> {
        (0..self.bins()).filter(|&k| self.count[k] == 0).collect()
    }

    pub fn clear(&mut self) {
        self.count.iter_mut().for_each(|c| *c = 0);
        self.force_sum.iter_mut().for_each(|s| *s = 0.0);
    }

    /// Integrates the bin means into bias values at bin centers.
    ///
    /// The global mean of the bin means is removed first so the result is
    /// periodic; values are then accumulated with the trapezoid rule between
    /// neighbouring centers and shifted so that the minimum is zero.
    pub fn integrate_bias(&self) -> Result<BiasFunction1D> {
        let empty = self.empty_bins();
        if !empty.is_empty() {
            return Err(Error::IncompleteSampling { empty_bins: empty });
        }
        let means = self.means();
        let n = means.len();
        let avg = means.iter().sum::<f64>() / n as f64;
        let h = self.grid.width();
        let mut values = vec![0.0; n];
        for k in 0..n - 1 {
            values[k + 1] = values[k] + h * ((means[k] - avg) + (means[k + 1] - avg)) / 2.0;
        }
        BiasFunction1D::anchored(values)
    }

    /// Same means with their global average removed; freezing this table
    /// gives a drift that derives from a periodic potential.
    pub fn centered(&self) -> Result<Self> {
        let means = self.means();
        let avg = means.iter().sum::<f64>() / means.len() as f64;
        let centered: Vec<f64> = means.iter().map(|m| m - avg).collect();
        Self::from_means(&centered)
    }

    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.bins() != other.bins() {
            return Err(Error::ShapeMismatch(format!(
                "merging 1D grids with {} and {} bins",
                self.bins(),
                other.bins()
            )));
        }
        Ok(Self {
            grid: self.grid,
            count: self.count.iter().zip(&other.count).map(|(a, b)| a + b).collect(),
            force_sum: self
                .force_sum
                .iter()
                .zip(&other.force_sum)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// CSV with columns `bin_center,count,mean_force`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_center,count,mean_force\n");
        for k in 0..self.bins() {
            out.push_str(&format!(
                "{},{},{}\n",
                fmt_f64(self.grid.center(k)),
                self.count[k],
                fmt_f64(self.mean(k))
            ));
        }
        out
    }
}

/// A one-dimensional bias sampled at the bin centers of a periodic grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasFunction1D {
    values: Vec<f64>,
}

impl BiasFunction1D {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyGrid);
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(*v));
        }
        Ok(Self { values })
    }

    /// Values shifted so that the minimum is zero.
    pub fn anchored(values: Vec<f64>) -> Result<Self> {
        let f = Self::new(values)?;
        let min = f.values.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Self {
            values: f.values.iter().map(|v| v - min).collect(),
        })
    }

    pub fn zeros(bins: usize) -> Result<Self> {
        Self::new(vec![0.0; bins])
    }

    pub fn bins(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn grid(&self) -> PeriodicGrid1D {
        PeriodicGrid1D::new(self.values.len()).expect("non-empty")
    }

    /// Periodic linear interpolation between bin centers.
    pub fn value_at(&self, z: f64) -> f64 {
        let n = self.values.len();
        let s = crate::geometry::wrap_unit(z) * n as f64 - 0.5;
        let fl = s.floor();
        let t = s - fl;
        let k0 = (fl as i64).rem_euclid(n as i64) as usize;
        let k1 = (k0 + 1) % n;
        (1.0 - t) * self.values[k0] + t * self.values[k1]
    }

    /// Forward differences between neighbouring centers divided by the bin
    /// width: the derivative at the bin edges `(k + 1)/bins`.
    pub fn edge_derivatives(&self) -> Vec<f64> {
        let n = self.values.len();
        (0..n)
            .map(|k| (self.values[(k + 1) % n] - self.values[k]) * n as f64)
            .collect()
    }

    /// CSV with columns `z,value`.
    pub fn to_csv(&self) -> String {
        let g = self.grid();
        let mut out = String::from("z,value\n");
        for (k, v) in self.values.iter().enumerate() {
            out.push_str(&format!("{},{}\n", fmt_f64(g.center(k)), fmt_f64(*v)));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasGrid2D {
    bins: (usize, usize),
    count: Vec<u64>,
    force_sum: Vec<[f64; 2]>,
}

impl BiasGrid2D {
    pub fn new(bins1: usize, bins2: usize) -> Result<Self> {
        if bins1 == 0 || bins2 == 0 {
            return Err(Error::EmptyGrid);
        }
        Ok(Self {
            bins: (bins1, bins2),
            count: vec![0; bins1 * bins2],
            force_sum: vec![[0.0; 2]; bins1 * bins2],
        })
    }

    /// Grid built from raw per-bin counts and vector sums.
    pub fn from_parts(bins: (usize, usize), count: Vec<u64>, force_sum: Vec<[f64; 2]>) -> Result<Self> {
        let total = bins.0 * bins.1;
        if total == 0 {
            return Err(Error::EmptyGrid);
        }
        if count.len() != total || force_sum.len() != total {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} grid with {} counts and {} sums",
                bins.0,
                bins.1,
                count.len(),
                force_sum.len()
            )));
        }
        Ok(Self {
            bins,
            count,
            force_sum,
        })
    }

    pub fn bins(&self) -> (usize, usize) {
        self.bins
    }

    pub fn counts(&self) -> &[u64] {
        &self.count
    }

    pub fn sums(&self) -> &[[f64; 2]] {
        &self.force_sum
    }

    #[inline]
    pub fn flat_index(&self, z1: f64, z2: f64) -> usize {
        let k1 = PeriodicGrid1D::new(self.bins.0).expect("nonzero").bin_index(z1);
        let k2 = PeriodicGrid1D::new(self.bins.1).expect("nonzero").bin_index(z2);
        k1 * self.bins.1 + k2
    }

    pub fn deposit(&mut self, z1: f64, z2: f64, sample: [f64; 2]) -> Result<()> {
        for s in sample {
            if !s.is_finite() {
                return Err(Error::NonFiniteSample { z: z1, sample: s });
            }
        }
        let k = self.flat_index(z1, z2);
        self.deposit_bin(k, sample);
        Ok(())
    }

    #[inline]
    pub(crate) fn deposit_bin(&mut self, k: usize, sample: [f64; 2]) {
        self.count[k] += 1;
        self.force_sum[k][0] += sample[0];
        self.force_sum[k][1] += sample[1];
    }

    pub fn mean_flat(&self, k: usize) -> [f64; 2] {
        let c = self.count[k];
        if c == 0 {
            [0.0; 2]
        } else {
            [self.force_sum[k][0] / c as f64, self.force_sum[k][1] / c as f64]
        }
    }

    pub fn mean(&self, k1: usize, k2: usize) -> [f64; 2] {
        self.mean_flat(k1 * self.bins.1 + k2)
    }

    /// Ramped bin-mean gradient at `(z1, z2)`.
    #[inline]
    pub fn bias_gradient(&self, z1: f64, z2: f64, ramp_threshold: u64) -> [f64; 2] {
        let k = self.flat_index(z1, z2);
        let r = ramp(self.count[k], ramp_threshold);
        let m = self.mean_flat(k);
        [r * m[0], r * m[1]]
    }

    pub fn visited(&self) -> usize {
        self.count.iter().filter(|&&c| c > 0).count()
    }

    pub fn clear(&mut self) {
        self.count.iter_mut().for_each(|c| *c = 0);
        self.force_sum.iter_mut().for_each(|s| *s = [0.0; 2]);
    }

    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.bins != other.bins {
            return Err(Error::ShapeMismatch(format!(
                "merging 2D grids {:?} and {:?}",
                self.bins, other.bins
            )));
        }
        Ok(Self {
            bins: self.bins,
            count: self.count.iter().zip(&other.count).map(|(a, b)| a + b).collect(),
            force_sum: self
                .force_sum
                .iter()
                .zip(&other.force_sum)
                .map(|(a, b)| [a[0] + b[0], a[1] + b[1]])
                .collect(),
        })
    }

    /// CSV with columns `z1,z2,count,mean_force_1,mean_force_2`, row-major.
    pub fn to_csv(&self) -> String {
        let g1 = PeriodicGrid1D::new(self.bins.0).expect("nonzero");
        let g2 = PeriodicGrid1D::new(self.bins.1).expect("nonzero");
        let mut out = String::from("z1,z2,count,mean_force_1,mean_force_2\n");
        for k1 in 0..self.bins.0 {
            for k2 in 0..self.bins.1 {
                let k = k1 * self.bins.1 + k2;
                let m = self.mean_flat(k);
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    fmt_f64(g1.center(k1)),
                    fmt_f64(g2.center(k2)),
                    self.count[k],
                    fmt_f64(m[0]),
                    fmt_f64(m[1])
                ));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasGroup {
    OneD(BiasGrid1D),
    TwoD(BiasGrid2D),
}

impl BiasGroup {
    pub fn clear(&mut self) {
        match self {
            Self::OneD(g) => g.clear(),
            Self::TwoD(g) => g.clear(),
        }
    }

    fn merge(&self, other: &Self) -> Result<Self> {
        match (self, other) {
            (Self::OneD(a), Self::OneD(b)) => Ok(Self::OneD(a.merge(b)?)),
            (Self::TwoD(a), Self::TwoD(b)) => Ok(Self::TwoD(a.merge(b)?)),
            _ => Err(Error::ShapeMismatch("merging 1D with 2D group".into())),
        }
    }
}

/// One bias grid per coordinate group, in group order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasGroupSet {
    groups: Vec<BiasGroup>,
}

impl BiasGroupSet {
    /// Empty grids matching the grouping of `coords`: `bins_1d` bins for
    /// singletons and `bins_2d × bins_2d` for the pair.
    pub fn for_coordinates(coords: &CoordinateSet, bins_1d: usize, bins_2d: usize) -> Result<Self> {
        let groups = coords
            .groups()
            .iter()
            .map(|g| match g {
                CoordinateGroup::Single(_) => BiasGrid1D::new(bins_1d).map(BiasGroup::OneD),
                CoordinateGroup::Pair(..) => BiasGrid2D::new(bins_2d, bins_2d).map(BiasGroup::TwoD),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { groups })
    }

    pub fn new(groups: Vec<BiasGroup>) -> Self {
        Self { groups }
    }

    pub fn groups(&self) -> &[BiasGroup] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [BiasGroup] {
        &mut self.groups
    }

    /// Checks group arity against the coordinate grouping.
    pub fn check_against(&self, coords: &CoordinateSet) -> Result<()> {
        if self.groups.len() != coords.groups().len() {
            return Err(Error::ShapeMismatch(format!(
                "{} bias groups for {} coordinate groups",
                self.groups.len(),
                coords.groups().len()
            )));
        }
        for (b, c) in self.groups.iter().zip(coords.groups()) {
            match (b, c) {
                (BiasGroup::OneD(_), CoordinateGroup::Single(_))
                | (BiasGroup::TwoD(_), CoordinateGroup::Pair(..)) => {}
                _ => {
                    return Err(Error::ShapeMismatch(format!(
                        "bias group arity does not match coordinate group {c:?}"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn clear(&mut self) {
        self.groups.iter_mut().for_each(BiasGroup::clear);
    }

    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.groups.len() != other.groups.len() {
            return Err(Error::ShapeMismatch("different group counts".into()));
        }
        let groups = self
            .groups
            .iter()
            .zip(&other.groups)
            .map(|(a, b)| a.merge(b))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { groups })
    }
}

/// Restartable JSON snapshot of a bias set, tagged with the config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSnapshot {
    pub config_hash: String,
    pub step: u64,
    pub groups: BiasGroupSet,
    /// Count-weighted mean of the 1D bin means, one entry per 1D group.
    pub mean_residuals: Vec<f64>,
}

impl GridSnapshot {
    pub fn new(config_hash: impl Into<String>, step: u64, groups: BiasGroupSet) -> Self {
        let mean_residuals = groups
            .groups()
            .iter()
            .filter_map(|g| match g {
                BiasGroup::OneD(g) => Some(g.mean_residual()),
                BiasGroup::TwoD(_) => None,
            })
            .collect();
        Self {
            config_hash: config_hash.into(),
            step,
            groups,
            mean_residuals,
        }
    }

    /// Pretty JSON with sorted keys.
    pub fn to_json(&self) -> Result<String> {
        crate::export::to_sorted_json(self)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
