//! Free-energy surfaces from biased runs: histogram reconstruction under
//! frozen biases, binned mean-force fields and their least-squares
//! integration, reweighted canonical averages, and seeding a standard-ABF
//! grid from a force field.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::coordinates::CoordinateSet;
use crate::error::{Error, Result};
use crate::estimator::{BiasFunction1D, BiasGrid2D};
use crate::export::{fmt_f64, pgm_p2, PgmSidecar};
use crate::geometry::PeriodicGrid1D;

/// Values `A(z₁, z₂)` at cell centers (row-major, `z₁` rows) in units of
/// `k_BT`, with a visited mask. Masked cells hold 0 and are never compared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergySurface2D {
    bins: (usize, usize),
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl FreeEnergySurface2D {
    /// Builds a surface shifted so that the minimum over visited cells is 0.
    pub fn anchored(bins: (usize, usize), values: Vec<f64>, mask: Option<Vec<bool>>) -> Result<Self> {
        let total = bins.0 * bins.1;
        if total == 0 {
            return Err(Error::EmptyGrid);
        }
        let mask = mask.unwrap_or_else(|| vec![true; total]);
        if values.len() != total || mask.len() != total {
            return Err(Error::ShapeMismatch(format!(
                "{} values / {} mask entries for {}x{}",
                values.len(),
                mask.len(),
                bins.0,
                bins.1
            )));
        }
        let mut min = f64::INFINITY;
        for (v, &m) in values.iter().zip(&mask) {
            if m {
                if !v.is_finite() {
                    return Err(Error::NonFinite(*v));
                }
                min = min.min(*v);
            }
        }
        let values = values
            .iter()
            .zip(&mask)
            .map(|(v, &m)| if m { v - min } else { 0.0 })
            .collect();
        Ok(Self { bins, values, mask })
    }

    pub fn bins(&self) -> (usize, usize) {
        self.bins
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn value(&self, k1: usize, k2: usize) -> Option<f64> {
        let k = k1 * self.bins.1 + k2;
        self.mask[k].then(|| self.values[k])
    }

    pub fn visited(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    fn compared(&self, other: &Self, include: Option<&[bool]>) -> Result<Vec<usize>> {
        if self.bins != other.bins {
            return Err(Error::ShapeMismatch(format!(
                "surfaces {:?} and {:?}",
                self.bins, other.bins
            )));
        }
        if let Some(inc) = include {
            if inc.len() != self.values.len() {
                return Err(Error::ShapeMismatch("comparison mask length".into()));
            }
        }
        let idx: Vec<usize> = (0..self.values.len())
            .filter(|&k| self.mask[k] && other.mask[k] && include.map_or(true, |m| m[k]))
            .collect();
        if idx.is_empty() {
            return Err(Error::InvalidArgument("no cells to compare".into()));
        }
        Ok(idx)
    }

    /// RMS difference over cells visited in both surfaces, as anchored.
    pub fn rms_difference(&self, other: &Self) -> Result<f64> {
        let idx = self.compared(other, None)?;
        let s: f64 = idx.iter().map(|&k| (self.values[k] - other.values[k]).powi(2)).sum();
        Ok((s / idx.len() as f64).sqrt())
    }

    /// RMS difference over the compared cells after removing the mean
    /// offset, i.e. the distance between the two surfaces modulo constants.
    pub fn rms_difference_aligned(&self, other: &Self, include: Option<&[bool]>) -> Result<f64> {
        let idx = self.compared(other, include)?;
        let k = idx.len() as f64;
        let off: f64 = idx.iter().map(|&i| self.values[i] - other.values[i]).sum::<f64>() / k;
        let s: f64 = idx
            .iter()
            .map(|&i| (self.values[i] - other.values[i] - off).powi(2))
            .sum();
        Ok((s / k).sqrt())
    }

    /// CSV with columns `z1,z2,value,mask`.
    pub fn to_csv(&self) -> String {
        let g1 = PeriodicGrid1D::new(self.bins.0).expect("nonzero");
        let g2 = PeriodicGrid1D::new(self.bins.1).expect("nonzero");
        let mut out = String::from("z1,z2,value,mask\n");
        for i in 0..self.bins.0 {
            for j in 0..self.bins.1 {
                let k = i * self.bins.1 + j;
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    fmt_f64(g1.center(i)),
                    fmt_f64(g2.center(j)),
                    fmt_f64(self.values[k]),
                    u8::from(self.mask[k])
                ));
            }
        }
        out
    }

    pub fn to_pgm(&self) -> Result<(String, PgmSidecar)> {
        pgm_p2(&self.values, self.bins.0, self.bins.1, Some(&self.mask))
    }
}

/// Per-bin mean gradient estimates `(∂₁A, ∂₂A)` with their sample counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientField2D {
    bins: (usize, usize),
    count: Vec<u64>,
    mean: Vec<[f64; 2]>,
}

impl GradientField2D {
    pub fn new(bins: (usize, usize), count: Vec<u64>, mean: Vec<[f64; 2]>) -> Result<Self> {
        let total = bins.0 * bins.1;
        if total == 0 {
            return Err(Error::EmptyGrid);
        }
        if count.len() != total || mean.len() != total {
            return Err(Error::ShapeMismatch("gradient field shape".into()));
        }
        for (c, m) in count.iter().zip(&mean) {
            if *c > 0 && !(m[0].is_finite() && m[1].is_finite()) {
                return Err(Error::NonFinite(if m[0].is_finite() { m[1] } else { m[0] }));
            }
        }
        Ok(Self { bins, count, mean })
    }

    /// Field given by a function on every cell center, with unit counts.
    pub fn from_fn(bins: (usize, usize), f: impl Fn(f64, f64) -> [f64; 2]) -> Result<Self> {
        let g1 = PeriodicGrid1D::new(bins.0)?;
        let g2 = PeriodicGrid1D::new(bins.1)?;
        let mut mean = Vec::with_capacity(bins.0 * bins.1);
        for z1 in g1.centers() {
            for z2 in g2.centers() {
                mean.push(f(z1, z2));
            }
        }
        Self::new(bins, vec![1; bins.0 * bins.1], mean)
    }

    pub fn bins(&self) -> (usize, usize) {
        self.bins
    }

    pub fn counts(&self) -> &[u64] {
        &self.count
    }

    pub fn means(&self) -> &[[f64; 2]] {
        &self.mean
    }

    /// CSV with columns `z1,z2,count,grad_1,grad_2`.
    pub fn to_csv(&self) -> String {
        let g1 = PeriodicGrid1D::new(self.bins.0).expect("nonzero");
        let g2 = PeriodicGrid1D::new(self.bins.1).expect("nonzero");
        let mut out = String::from("z1,z2,count,grad_1,grad_2\n");
        for i in 0..self.bins.0 {
            for j in 0..self.bins.1 {
                let k = i * self.bins.1 + j;
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    fmt_f64(g1.center(i)),
                    fmt_f64(g2.center(j)),
                    self.count[k],
                    fmt_f64(self.mean[k][0]),
                    fmt_f64(self.mean[k][1])
                ));
            }
        }
        out
    }
}

/// `A = −β⁻¹ ln(p / cell_area) + A₁(z₁) + A₂(z₂)` from a joint histogram
/// collected under the frozen biases `A₁`, `A₂`; empty cells are masked.
pub fn reconstruct_histogram(
    histogram: &[u64],
    bins: (usize, usize),
    bias1: &BiasFunction1D,
    bias2: &BiasFunction1D,
    beta: f64,
) -> Result<FreeEnergySurface2D> {
    if histogram.len() != bins.0 * bins.1 {
        return Err(Error::ShapeMismatch(format!(
            "{} histogram cells for {}x{}",
            histogram.len(),
            bins.0,
            bins.1
        )));
    }
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(Error::ZeroTotalCount);
    }
    let g1 = PeriodicGrid1D::new(bins.0)?;
    let g2 = PeriodicGrid1D::new(bins.1)?;
    let area = g1.width() * g2.width();
    let mut values = vec![0.0; histogram.len()];
    let mut mask = vec![false; histogram.len()];
    for i in 0..bins.0 {
        let a1 = bias1.value_at(g1.center(i));
        for j in 0..bins.1 {
            let k = i * bins.1 + j;
            if histogram[k] > 0 {
                let p = histogram[k] as f64 / total as f64 / area;
                values[k] = -p.ln() / beta + a1 + bias2.value_at(g2.center(j));
                mask[k] = true;
            }
        }
    }
    FreeEnergySurface2D::anchored(bins, values, Some(mask))
}

/// Per-bin means of the `F` samples accumulated in `samples`.
pub fn estimate_gradient_field(samples: &BiasGrid2D) -> GradientField2D {
    let bins = samples.bins();
    let mean = (0..bins.0 * bins.1).map(|k| samples.mean_flat(k)).collect();
    GradientField2D {
        bins,
        count: samples.counts().to_vec(),
        mean,
    }
}

/// Standard-ABF grid holding the field's per-bin means and counts.
pub fn seed_standard_abf(field: &GradientField2D) -> BiasGrid2D {
    let sums = field
        .count
        .iter()
        .zip(&field.mean)
        .map(|(&c, m)| [m[0] * c as f64, m[1] * c as f64])
        .collect();
    BiasGrid2D::from_parts(field.bins, field.count.clone(), sums).expect("shapes agree")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegratedSurface {
    pub surface: FreeEnergySurface2D,
    /// RMS of `∂₂F₁ − ∂₁F₂` by central differences over visited cells whose
    /// four neighbours are visited.
    pub curl_residual: f64,
    pub iterations: usize,
}

/// Sizes of the 4-connected components of the visited cells on the periodic
/// grid, largest first.
fn components(bins: (usize, usize), visited: &[bool]) -> Vec<usize> {
    let (b1, b2) = bins;
    let mut seen = vec![false; visited.len()];
    let mut sizes = vec![];
    for start in 0..visited.len() {
        if !visited[start] || seen[start] {
            continue;
        }
        let mut size = 0;
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(k) = queue.pop_front() {
            size += 1;
            let (i, j) = (k / b2, k % b2);
            for (ni, nj) in [
                ((i + 1) % b1, j),
                ((i + b1 - 1) % b1, j),
                (i, (j + 1) % b2),
                (i, (j + b2 - 1) % b2),
            ] {
                let n = ni * b2 + nj;
                if visited[n] && !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            }
        }
        sizes.push(size);
    }
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    sizes
}

/// Zero-mean least-squares solution of `x[b] − x[a] ≈ g` over the edges
/// `(a, b, g)` of a connected graph on `m` nodes, by conjugate gradients on
/// the graph Laplacian.
fn fit_increments(m: usize, edges: &[(usize, usize, f64)]) -> Result<(Vec<f64>, usize)> {
    let mut rhs = vec![0.0; m];
    for &(a, b, g) in edges {
        rhs[b] += g;
        rhs[a] -= g;
    }
    let apply = |x: &[f64], out: &mut [f64]| {
        out.iter_mut().for_each(|v| *v = 0.0);
        for &(a, b, _) in edges {
            let d = x[b] - x[a];
            out[b] += d;
            out[a] -= d;
        }
    };
    let project = |v: &mut [f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter_mut().for_each(|x| *x -= mean);
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    project(&mut rhs);
    let mut x = vec![0.0; m];
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut ap = vec![0.0; m];
    let mut rr = dot(&r, &r);
    let target = 1e-26 * dot(&rhs, &rhs).max(f64::MIN_POSITIVE);
    let max_iter = 20 * m + 100;
    let mut iterations = 0;
    while rr > target && iterations < max_iter {
        apply(&p, &mut ap);
        let alpha = rr / dot(&p, &ap);
        for q in 0..m {
            x[q] += alpha * p[q];
            r[q] -= alpha * ap[q];
        }
        project(&mut r);
        let next = dot(&r, &r);
        let beta = next / rr;
        for q in 0..m {
            p[q] = r[q] + beta * p[q];
        }
        rr = next;
        iterations += 1;
    }
    if rr > target {
        return Err(Error::NonConvergence {
            iterations,
            residual: rr.sqrt(),
        });
    }
    Ok((x, iterations))
}

/// Least-squares surface whose differences across visited neighbouring
/// cells best match the trapezoid increments `h (F_L + F_R)/2` of the field.
///
/// The normal equations are a graph Laplacian on the visited cells, solved
/// by conjugate gradients in the zero-mean subspace.
pub fn integrate_gradient_2d(field: &GradientField2D) -> Result<IntegratedSurface> {
    let (b1, b2) = field.bins;
    let total = b1 * b2;
    let visited: Vec<bool> = field.count.iter().map(|&c| c > 0).collect();
    let comps = components(field.bins, &visited);
    if comps.is_empty() {
        return Err(Error::InvalidArgument("gradient field has no visited cells".into()));
    }
    if comps.len() > 1 {
        return Err(Error::DisconnectedRegion { sizes: comps });
    }
    let (h1, h2) = (1.0 / b1 as f64, 1.0 / b2 as f64);
    let cells: Vec<usize> = (0..total).filter(|&k| visited[k]).collect();
    let mut slot = vec![usize::MAX; total];
    for (s, &k) in cells.iter().enumerate() {
        slot[k] = s;
    }
    // Edges (from, to, target increment) between visited neighbours in the
    // +z₁ and +z₂ directions. A 1- or 2-cell periodic axis produces no edges.
    let mut edges: Vec<(usize, usize, f64)> = vec![];
    for &k in &cells {
        let (i, j) = (k / b2, k % b2);
        if b1 > 2 || (b1 == 2 && i == 0) {
            let n = ((i + 1) % b1) * b2 + j;
            if visited[n] {
                edges.push((slot[k], slot[n], h1 * (field.mean[k][0] + field.mean[n][0]) / 2.0));
            }
        }
        if b2 > 2 || (b2 == 2 && j == 0) {
            let n = i * b2 + (j + 1) % b2;
            if visited[n] {
                edges.push((slot[k], slot[n], h2 * (field.mean[k][1] + field.mean[n][1]) / 2.0));
            }
        }
    }
    let (x, iterations) = fit_increments(cells.len(), &edges)?;
    let mut values = vec![0.0; total];
    for (s, &k) in cells.iter().enumerate() {
        values[k] = x[s];
    }
    let surface = FreeEnergySurface2D::anchored(field.bins, values, Some(visited.clone()))?;

    let mut curl = 0.0;
    let mut n_curl = 0usize;
    for &k in &cells {
        let (i, j) = (k / b2, k % b2);
        let (ip, im) = (((i + 1) % b1) * b2 + j, ((i + b1 - 1) % b1) * b2 + j);
        let (jp, jm) = (i * b2 + (j + 1) % b2, i * b2 + (j + b2 - 1) % b2);
        if [ip, im, jp, jm].iter().all(|&n| visited[n]) {
            let d2f1 = (field.mean[jp][0] - field.mean[jm][0]) / (2.0 * h2);
            let d1f2 = (field.mean[ip][1] - field.mean[im][1]) / (2.0 * h1);
            curl += (d2f1 - d1f2).powi(2);
            n_curl += 1;
        }
    }
    let curl_residual = if n_curl == 0 { 0.0 } else { (curl / n_curl as f64).sqrt() };
    Ok(IntegratedSurface {
        surface,
        curl_residual,
        iterations,
    })
}

/// Online self-normalized importance average with log-domain weights.
#[derive(Debug, Clone, Default)]
pub struct UnbiasedAccumulator {
    shift: Option<f64>,
    num: f64,
    den: f64,
    count: usize,
}

impl UnbiasedAccumulator {
    /// Adds a sample with log-weight `log_w` and observable value `phi`.
    pub fn add(&mut self, log_w: f64, phi: f64) {
        self.count += 1;
        if !log_w.is_finite() {
            return;
        }
        match self.shift {
            Some(s) if log_w <= s => {
                let w = (log_w - s).exp();
                self.num += w * phi;
                self.den += w;
            }
            Some(s) => {
                let rescale = (s - log_w).exp();
                self.num = self.num * rescale + phi;
                self.den = self.den * rescale + 1.0;
                self.shift = Some(log_w);
            }
            None => {
                self.shift = Some(log_w);
                self.num = phi;
                self.den = 1.0;
            }
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn value(&self) -> Result<f64> {
        if self.shift.is_none() || !(self.den > 0.0) {
            return Err(Error::WeightUnderflow);
        }
        Ok(self.num / self.den)
    }
}

/// `Σ φ w / Σ w` with `w = exp(−β(A₁(ξ₁(x)) + A₂(ξ₂(x))))` over samples
/// drawn under the frozen biases.
pub fn unbiased_average(
    samples: &[(&[f64], f64)],
    bias1: &BiasFunction1D,
    bias2: &BiasFunction1D,
    coords: &CoordinateSet,
    beta: f64,
) -> Result<f64> {
    if coords.len() != 2 {
        return Err(Error::InvalidArgument("unbiasing needs two coordinates".into()));
    }
    let mut acc = UnbiasedAccumulator::default();
    for &(x, phi) in samples {
        if x.len() != coords.dim() {
            return Err(Error::DimensionMismatch {
                expected: coords.dim(),
                found: x.len(),
            });
        }
        let z1 = coords.coord(0).value_raw(x);
        let z2 = coords.coord(1).value_raw(x);
        acc.add(-beta * (bias1.value_at(z1) + bias2.value_at(z2)), phi);
    }
    acc.value()
}
