//! Reaction coordinates `ξ: T^n -> T` with constant gradient norm, and the
//! local-mean-force and Gram-matrix formulas built on them.
//!
//! Only projections and integer linear combinations taken mod 1 are
//! supported. Their gradients are constant vectors, so every divergence
//! correction `div(∇ξ / |∇ξ|²)` (and the Gram-weighted one in the mean-force
//! vector) vanishes identically.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_unit, TorusPoint};
use crate::potentials::PotentialSpec;

const SINGULAR_GRAM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoordinateKind {
    Projection { axis: usize },
    IntegerCombination { coefficients: Vec<i64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReactionCoordinate {
    kind: CoordinateKind,
    n: usize,
    gradient: Vec<f64>,
    norm_sq: f64,
}

impl ReactionCoordinate {
    pub fn projection(axis: usize, n: usize) -> Result<Self> {
        if axis >= n {
            return Err(Error::InvalidArgument(format!(
                "projection axis {axis} out of range for n = {n}"
            )));
        }
        let mut gradient = vec![0.0; n];
        gradient[axis] = 1.0;
        Ok(Self {
            kind: CoordinateKind::Projection { axis },
            n,
            gradient,
            norm_sq: 1.0,
        })
    }

    pub fn integer_combination(coefficients: Vec<i64>) -> Result<Self> {
        if coefficients.iter().all(|&c| c == 0) {
            return Err(Error::InvalidArgument(
                "integer combination needs a nonzero coefficient".into(),
            ));
        }
        let gradient: Vec<f64> = coefficients.iter().map(|&c| c as f64).collect();
        let norm_sq = gradient.iter().map(|g| g * g).sum();
        Ok(Self {
            n: coefficients.len(),
            kind: CoordinateKind::IntegerCombination { coefficients },
            gradient,
            norm_sq,
        })
    }

    pub fn from_kind(kind: CoordinateKind, n: usize) -> Result<Self> {
        match kind {
            CoordinateKind::Projection { axis } => Self::projection(axis, n),
            CoordinateKind::IntegerCombination { coefficients } => {
                if coefficients.len() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        found: coefficients.len(),
                    });
                }
                Self::integer_combination(coefficients)
            }
        }
    }

    pub fn kind(&self) -> &CoordinateKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// `∇ξ`, constant over the torus.
    pub fn gradient(&self) -> &[f64] {
        &self.gradient
    }

    /// `|∇ξ|²`, constant over the torus.
    pub fn grad_norm_sq(&self) -> f64 {
        self.norm_sq
    }

    /// `div(∇ξ / |∇ξ|²)`, identically zero for the supported kinds.
    pub fn divergence_correction(&self, _x: &[f64]) -> f64 {
        0.0
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

    pub fn value(&self, x: &TorusPoint) -> Result<f64> {
        self.check_dim(x.dim())?;
        Ok(self.value_raw(x.coords()))
    }

    #[inline]
    pub(crate) fn value_raw(&self, x: &[f64]) -> f64 {
        match &self.kind {
            CoordinateKind::Projection { axis } => wrap_unit(x[*axis]),
            CoordinateKind::IntegerCombination { .. } => {
                wrap_unit(self.gradient.iter().zip(x).map(|(c, xi)| c * xi).sum())
            }
        }
    }

    /// `∇V·∇ξ / |∇ξ|² − β⁻¹ div(∇ξ/|∇ξ|²)`, where the divergence term is zero.
    pub fn local_mean_force_simplified(&self, spec: &PotentialSpec, x: &TorusPoint) -> Result<f64> {
        self.check_dim(x.dim())?;
        let g = spec.gradient(x)?;
        Ok(self.project(&g))
    }

    /// `v·∇ξ / |∇ξ|²`.
    #[inline]
    pub(crate) fn project(&self, v: &[f64]) -> f64 {
        self.gradient.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / self.norm_sq
    }
}

/// How coordinates are grouped for biasing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoordinateGroup {
    /// Biased by a one-dimensional function of a single coordinate.
    Single(usize),
    /// Biased jointly by a two-dimensional function.
    Pair(usize, usize),
}

impl CoordinateGroup {
    pub fn members(&self) -> Vec<usize> {
        match *self {
            Self::Single(i) => vec![i],
            Self::Pair(i, j) => vec![i, j],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateSet {
    coords: Vec<ReactionCoordinate>,
    groups: Vec<CoordinateGroup>,
}

impl CoordinateSet {
    pub fn new(coords: Vec<ReactionCoordinate>, groups: Vec<CoordinateGroup>) -> Result<Self> {
        let m = coords.len();
        if m == 0 {
            return Err(Error::InvalidArgument("coordinate set is empty".into()));
        }
        let n = coords[0].dim();
        if let Some(c) = coords.iter().find(|c| c.dim() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: c.dim(),
            });
        }
        let mut seen = vec![false; m];
        let mut pairs = 0;
        for g in &groups {
            if matches!(g, CoordinateGroup::Pair(..)) {
                pairs += 1;
            }
            if let CoordinateGroup::Pair(i, j) = g {
                if i == j {
                    return Err(Error::InvalidArgument(format!("pair ({i}, {j}) repeats a coordinate")));
                }
            }
            for i in g.members() {
                if i >= m || seen[i] {
                    return Err(Error::InvalidArgument(format!(
                        "groups must partition 0..{m}; index {i} invalid or repeated"
                    )));
                }
                seen[i] = true;
            }
        }
        if pairs > 1 {
            return Err(Error::InvalidArgument("at most one coupled pair is supported".into()));
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!("coordinate {i} is in no group")));
        }
        Ok(Self { coords, groups })
    }

    /// Every coordinate biased on its own.
    pub fn independent(coords: Vec<ReactionCoordinate>) -> Result<Self> {
        let groups = (0..coords.len()).map(CoordinateGroup::Single).collect();
        Self::new(coords, groups)
    }

    /// Two coordinates biased jointly (the standard multidimensional setup).
    pub fn joint_pair(first: ReactionCoordinate, second: ReactionCoordinate) -> Result<Self> {
        Self::new(vec![first, second], vec![CoordinateGroup::Pair(0, 1)])
    }

    /// `ξ₁ = x₁, ξ₂ = x₂` on `T^n`, biased independently.
    pub fn projections(n: usize) -> Result<Self> {
        Self::independent(vec![
            ReactionCoordinate::projection(0, n)?,
            ReactionCoordinate::projection(1, n)?,
        ])
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.coords[0].dim()
    }

    pub fn coords(&self) -> &[ReactionCoordinate] {
        &self.coords
    }

    pub fn coord(&self, i: usize) -> &ReactionCoordinate {
        &self.coords[i]
    }

    pub fn groups(&self) -> &[CoordinateGroup] {
        &self.groups
    }

    /// Same coordinates regrouped, e.g. to run standard ABF on a pair that
    /// was previously biased independently.
    pub fn regrouped(&self, groups: Vec<CoordinateGroup>) -> Result<Self> {
        Self::new(self.coords.clone(), groups)
    }

    fn require_pair(&self) -> Result<()> {
        if self.coords.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "operation needs exactly two coordinates, got {}",
                self.coords.len()
            )));
        }
        Ok(())
    }

    /// Local mean force along coordinate `alpha` of a two-coordinate set,
    /// with the other coordinate's adaptive bias removed from the force:
    /// `[∇V − (A^ᾱ)'(ξ_ᾱ) ∇ξ_ᾱ]·∇ξ_α / |∇ξ_α|²`.
    pub fn local_mean_force_coupled(
        &self,
        alpha: usize,
        other_bias_derivative: &dyn Fn(f64) -> f64,
        spec: &PotentialSpec,
        x: &TorusPoint,
    ) -> Result<f64> {
        self.require_pair()?;
        if alpha > 1 {
            return Err(Error::InvalidArgument(format!("alpha = {alpha} not in {{0, 1}}")));
        }
        let this = &self.coords[alpha];
        let other = &self.coords[1 - alpha];
        this.check_dim(x.dim())?;
        let g = spec.gradient(x)?;
        let bias = other_bias_derivative(other.value_raw(x.coords()));
        let cross = this.project(other.gradient());
        Ok(this.project(&g) - bias * cross)
    }

    /// `G_{αγ} = ∇ξ_α·∇ξ_γ` for coordinates `i` and `j`.
    pub(crate) fn gram_of(&self, i: usize, j: usize) -> Result<[[f64; 2]; 2]> {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let gi = self.coords[i].gradient();
        let gj = self.coords[j].gradient();
        let g = [[dot(gi, gi), dot(gi, gj)], [dot(gj, gi), dot(gj, gj)]];
        let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
        if det.abs() < SINGULAR_GRAM {
            return Err(Error::SingularGram { det });
        }
        Ok(g)
    }

    pub(crate) fn inverse_gram_of(&self, i: usize, j: usize) -> Result<[[f64; 2]; 2]> {
        let g = self.gram_of(i, j)?;
        let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
        Ok([
            [g[1][1] / det, -g[0][1] / det],
            [-g[1][0] / det, g[0][0] / det],
        ])
    }

    /// Gram matrix of a two-coordinate set at `x`.
    pub fn gram_matrix(&self, x: &TorusPoint) -> Result<[[f64; 2]; 2]> {
        self.require_pair()?;
        self.coords[0].check_dim(x.dim())?;
        self.gram_of(0, 1)
    }

    /// Mean-force vector `F_α = Σ_γ G⁻¹_{αγ} ∇ξ_γ·∇V − β⁻¹ div(Σ_γ G⁻¹_{αγ} ∇ξ_γ)`
    /// for a two-coordinate set; `G` is constant so the divergence vanishes.
    pub fn mean_force_vector(&self, spec: &PotentialSpec, x: &TorusPoint) -> Result<[f64; 2]> {
        self.require_pair()?;
        self.coords[0].check_dim(x.dim())?;
        let g = spec.gradient(x)?;
        self.pair_force(0, 1, &g)
    }

    /// `G⁻¹ (∇ξ_i·v, ∇ξ_j·v)` for an arbitrary force vector `v`.
    pub(crate) fn pair_force(&self, i: usize, j: usize, v: &[f64]) -> Result<[f64; 2]> {
        let inv = self.inverse_gram_of(i, j)?;
        let dot = |a: &[f64]| a.iter().zip(v).map(|(p, q)| p * q).sum::<f64>();
        let pi = dot(self.coords[i].gradient());
        let pj = dot(self.coords[j].gradient());
        Ok([
            inv[0][0] * pi + inv[0][1] * pj,
            inv[1][0] * pi + inv[1][1] * pj,
        ])
    }
}
