//! Euler–Maruyama integration of overdamped Langevin dynamics on `T^n`,
//! unbiased or driven by an adaptive bias (tensor or standard ABF).
//!
//! Replicas advance in parallel against a read-only snapshot of the bias;
//! their force samples are deposited afterwards in replica order, so results
//! do not depend on the number of worker threads.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coordinates::{CoordinateGroup, CoordinateSet};
use crate::error::{Error, Result};
use crate::estimator::{BiasGrid2D, BiasGroup, BiasGroupSet};
use crate::geometry::{wrap_unit, PeriodicGrid1D};
use crate::potentials::PotentialSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    #[default]
    None,
    StandardAbf,
    TensorAbf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    /// Grids accumulate over the whole run.
    #[default]
    TimeAverage,
    /// Grids hold only the current step's ensemble.
    EnsembleAverage,
}

fn default_cap() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

fn default_ramp() -> u64 {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub beta: f64,
    pub dt: f64,
    pub steps: u64,
    pub replicas: usize,
    pub seed: u64,
    #[serde(default)]
    pub bias_mode: BiasMode,
    #[serde(default = "default_ramp")]
    pub ramp_threshold: u64,
    #[serde(default)]
    pub estimator_mode: EstimatorMode,
    /// Largest allowed drift displacement `|drift|·dt` per step.
    #[serde(default = "default_cap")]
    pub displacement_cap: f64,
    /// Set to false only for deterministic drift tests.
    #[serde(default = "default_true")]
    pub noise: bool,
    /// Use the coupled local mean force for two independently biased
    /// coordinates instead of the simplified one.
    #[serde(default)]
    pub coupled_form: bool,
    /// Apply the bias but never update it.
    #[serde(default)]
    pub frozen: bool,
}

impl SimulationConfig {
    pub fn new(beta: f64, dt: f64, steps: u64, replicas: usize, seed: u64) -> Self {
        Self {
            beta,
            dt,
            steps,
            replicas,
            seed,
            bias_mode: BiasMode::None,
            ramp_threshold: default_ramp(),
            estimator_mode: EstimatorMode::TimeAverage,
            displacement_cap: default_cap(),
            noise: true,
            coupled_form: false,
            frozen: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive and finite");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive and finite");
        }
        if self.replicas == 0 {
            return bad("replicas must be at least 1");
        }
        if !(self.displacement_cap > 0.0) {
            return bad("displacement_cap must be positive");
        }
        Ok(())
    }
}

/// Replica positions stored row-major (`replicas × n`) plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleState {
    n: usize,
    positions: Vec<f64>,
    step_index: u64,
}

impl EnsembleState {
    /// Every replica starts at `x`.
    pub fn point_mass(x: &[f64], replicas: usize) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::InvalidArgument("empty position".into()));
        }
        let mut positions = Vec::with_capacity(x.len() * replicas);
        for _ in 0..replicas {
            for &c in x {
                positions.push(crate::geometry::wrap(c)?);
            }
        }
        Ok(Self {
            n: x.len(),
            positions,
            step_index: 0,
        })
    }

    pub fn from_positions(n: usize, positions: Vec<f64>) -> Result<Self> {
        if n == 0 || positions.is_empty() || positions.len() % n != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} coordinates do not split into replicas of dimension {n}",
                positions.len()
            )));
        }
        let positions = positions
            .into_iter()
            .map(crate::geometry::wrap)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            n,
            positions,
            step_index: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn replicas(&self) -> usize {
        self.positions.len() / self.n
    }

    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn replica(&self, r: usize) -> &[f64] {
        &self.positions[r * self.n..(r + 1) * self.n]
    }
}

/// Two standard normals from two uniform draws (Box–Muller).
pub fn box_muller_pair(rng: &mut impl RngCore, out: &mut [f64; 2]) {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    let u1 = ((rng.next_u64() >> 11) + 1) as f64 * SCALE;
    let u2 = (rng.next_u64() >> 11) as f64 * SCALE;
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
    out[0] = r * c;
    out[1] = r * s;
}

/// Counter-based normal increments: replica `r` at step `s` reads a fixed
/// window of the ChaCha stream `r`, so the draw depends only on
/// `(seed, r, s)`.
#[derive(Clone)]
struct NoiseSource {
    base: ChaCha8Rng,
    words_per_step: u128,
}

impl NoiseSource {
    fn new(seed: u64, n: usize) -> Self {
        // each Box–Muller pair consumes two u64, i.e. four 32-bit words
        Self {
            base: ChaCha8Rng::seed_from_u64(seed),
            words_per_step: 4 * n.div_ceil(2) as u128,
        }
    }

    fn fill(&self, replica: usize, step: u64, out: &mut [f64]) {
        let mut rng = self.base.clone();
        rng.set_stream(replica as u64);
        rng.set_word_pos(step as u128 * self.words_per_step);
        let mut pair = [0.0; 2];
        for chunk in out.chunks_mut(2) {
            box_muller_pair(&mut rng, &mut pair);
            chunk.copy_from_slice(&pair[..chunk.len()]);
        }
    }
}

/// Accumulates mean-force vectors `F` and visit counts on a `(ξ₀, ξ₁)` grid,
/// independently of the bias being applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monitor {
    pub field: BiasGrid2D,
}

impl Monitor {
    pub fn new(bins: usize) -> Result<Self> {
        Ok(Self {
            field: BiasGrid2D::new(bins, bins)?,
        })
    }
}

/// Everything a step needs besides the mutable state.
struct Plan<'a> {
    spec: &'a PotentialSpec,
    coords: Option<&'a CoordinateSet>,
    bias: Option<&'a BiasGroupSet>,
    cfg: &'a SimulationConfig,
    monitor: bool,
    /// Inverse Gram matrices per pair group, and for the monitor.
    pair_inv: Vec<Option<[[f64; 2]; 2]>>,
    monitor_inv: Option<[[f64; 2]; 2]>,
    sample_width: usize,
}

impl<'a> Plan<'a> {
    fn new(
        spec: &'a PotentialSpec,
        coords: Option<&'a CoordinateSet>,
        bias: Option<&'a BiasGroupSet>,
        cfg: &'a SimulationConfig,
        monitor: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut pair_inv = vec![];
        let mut sample_width = 0;
        if let Some(c) = coords {
            if c.dim() != spec.dim() {
                return Err(Error::DimensionMismatch {
                    expected: spec.dim(),
                    found: c.dim(),
                });
            }
            for g in c.groups() {
                match *g {
                    CoordinateGroup::Single(_) => {
                        pair_inv.push(None);
                        sample_width += 1;
                    }
                    CoordinateGroup::Pair(i, j) => {
                        pair_inv.push(Some(c.inverse_gram_of(i, j)?));
                        sample_width += 2;
                    }
                }
            }
        }
        if let (Some(b), Some(c)) = (bias, coords) {
            b.check_against(c)?;
        }
        if bias.is_some() && coords.is_none() {
            return Err(Error::InvalidArgument("bias given without coordinates".into()));
        }
        let monitor_inv = match (monitor, coords) {
            (true, Some(c)) if c.len() >= 2 => Some(c.inverse_gram_of(0, 1)?),
            (true, _) => {
                return Err(Error::InvalidArgument(
                    "the force monitor needs at least two coordinates".into(),
                ))
            }
            _ => None,
        };
        let coupled = cfg.coupled_form
            && coords.is_some_and(|c| {
                c.len() == 2 && c.groups().iter().all(|g| matches!(g, CoordinateGroup::Single(_)))
            });
        if cfg.coupled_form && !coupled {
            return Err(Error::InvalidArgument(
                "coupled local mean force needs exactly two independently biased coordinates".into(),
            ));
        }
        Ok(Self {
            spec,
            coords,
            bias,
            cfg,
            monitor,
            pair_inv,
            monitor_inv,
            sample_width,
        })
    }

    fn m(&self) -> usize {
        self.coords.map_or(0, CoordinateSet::len)
    }

    /// Per-replica record: `[ξ values | samples | monitor F (2) | displacement]`.
    fn record_width(&self) -> usize {
        self.m() + self.sample_width + if self.monitor { 2 } else { 0 } + 1
    }

    fn bias_derivative_1d(&self, group: usize, z: f64) -> f64 {
        match self.bias.map(|b| &b.groups()[group]) {
            Some(BiasGroup::OneD(g)) => g.bias_derivative(z, self.cfg.ramp_threshold),
            _ => 0.0,
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

#[inline]
fn pair_force(inv: &[[f64; 2]; 2], gi: &[f64], gj: &[f64], v: &[f64]) -> [f64; 2] {
    let pi = dot(gi, v);
    let pj = dot(gj, v);
    [inv[0][0] * pi + inv[0][1] * pj, inv[1][0] * pi + inv[1][1] * pj]
}

struct Scratch {
    grad: Vec<f64>,
    drift: Vec<f64>,
    noise: Vec<f64>,
}

fn advance_replica(
    plan: &Plan<'_>,
    noise: &NoiseSource,
    step: u64,
    replica: usize,
    x: &mut [f64],
    rec: &mut [f64],
    s: &mut Scratch,
) {
    let cfg = plan.cfg;
    plan.spec.gradient_into(x, &mut s.grad);
    for (d, g) in s.drift.iter_mut().zip(&s.grad) {
        *d = -g;
    }
    let m = plan.m();
    if let Some(coords) = plan.coords {
        for (i, c) in coords.coords().iter().enumerate() {
            rec[i] = c.value_raw(x);
        }
        let apply = plan.bias.is_some() && cfg.bias_mode != BiasMode::None;
        let mut off = m;
        for (gi, group) in coords.groups().iter().enumerate() {
            match *group {
                CoordinateGroup::Single(i) => {
                    let ci = coords.coord(i);
                    if apply {
                        let d = plan.bias_derivative_1d(gi, rec[i]);
                        for (dr, g) in s.drift.iter_mut().zip(ci.gradient()) {
                            *dr += d * g;
                        }
                    }
                    let mut f = ci.project(&s.grad);
                    if cfg.coupled_form {
                        let o = 1 - i;
                        let og = coords
                            .groups()
                            .iter()
                            .position(|g| *g == CoordinateGroup::Single(o))
                            .expect("validated grouping");
                        let d_other = if apply {
                            plan.bias_derivative_1d(og, rec[o])
                        } else {
                            0.0
                        };
                        f -= d_other * ci.project(coords.coord(o).gradient());
                    }
                    rec[off] = f;
                    off += 1;
                }
                CoordinateGroup::Pair(i, j) => {
                    let (gi_, gj_) = (coords.coord(i).gradient(), coords.coord(j).gradient());
                    if apply {
                        if let Some(BiasGroup::TwoD(g)) = plan.bias.map(|b| &b.groups()[gi]) {
                            let b = g.bias_gradient(rec[i], rec[j], cfg.ramp_threshold);
                            for ((dr, a), c) in s.drift.iter_mut().zip(gi_).zip(gj_) {
                                *dr += b[0] * a + b[1] * c;
                            }
                        }
                    }
                    let inv = plan.pair_inv[gi].expect("pair inverse");
                    let f = pair_force(&inv, gi_, gj_, &s.grad);
                    rec[off] = f[0];
                    rec[off + 1] = f[1];
                    off += 2;
                }
            }
        }
        if let Some(inv) = plan.monitor_inv {
            let f = pair_force(&inv, coords.coord(0).gradient(), coords.coord(1).gradient(), &s.grad);
            rec[off] = f[0];
            rec[off + 1] = f[1];
        }
    }
    let disp = cfg.dt * dot(&s.drift, &s.drift).sqrt();
    *rec.last_mut().expect("record has a displacement slot") = disp;
    if cfg.noise {
        noise.fill(replica, step, &mut s.noise);
        let amp = (2.0 * cfg.dt / cfg.beta).sqrt();
        for ((xi, d), g) in x.iter_mut().zip(&s.drift).zip(&s.noise) {
            *xi = wrap_unit(*xi + d * cfg.dt + amp * g);
        }
    } else {
        for (xi, d) in x.iter_mut().zip(&s.drift) {
            *xi = wrap_unit(*xi + d * cfg.dt);
        }
    }
}

fn advance(
    state: &mut EnsembleState,
    plan: &Plan<'_>,
    mut bias: Option<&mut BiasGroupSet>,
    mut monitor: Option<&mut Monitor>,
) -> Result<()> {
    let n = state.n;
    if n != plan.spec.dim() {
        return Err(Error::DimensionMismatch {
            expected: plan.spec.dim(),
            found: n,
        });
    }
    let replicas = state.replicas();
    let width = plan.record_width();
    let mut records = vec![0.0; replicas * width];
    let noise = NoiseSource::new(plan.cfg.seed, n);
    let step = state.step_index;
    state
        .positions
        .par_chunks_mut(n)
        .zip(records.par_chunks_mut(width))
        .enumerate()
        .with_min_len(64)
        .for_each_init(
            || Scratch {
                grad: vec![0.0; n],
                drift: vec![0.0; n],
                noise: vec![0.0; n],
            },
            |s, (r, (x, rec))| advance_replica(plan, &noise, step, r, x, rec, s),
        );

    for (r, rec) in records.chunks(width).enumerate() {
        let disp = rec[width - 1];
        if !disp.is_finite() || disp > plan.cfg.displacement_cap {
            return Err(Error::DisplacementCap {
                replica: r,
                displacement: disp,
                cap: plan.cfg.displacement_cap,
            });
        }
    }

    let m = plan.m();
    let update = !plan.cfg.frozen && plan.cfg.bias_mode != BiasMode::None;
    if let (Some(bias), true, Some(coords)) = (bias.as_deref_mut(), update, plan.coords) {
        if plan.cfg.estimator_mode == EstimatorMode::EnsembleAverage {
            bias.clear();
        }
        let groups = coords.groups();
        for rec in records.chunks(width) {
            let mut off = m;
            for (g, grid) in groups.iter().zip(bias.groups_mut()) {
                match (*g, grid) {
                    (CoordinateGroup::Single(i), BiasGroup::OneD(grid)) => {
                        grid.deposit(rec[i], rec[off])?;
                        off += 1;
                    }
                    (CoordinateGroup::Pair(i, j), BiasGroup::TwoD(grid)) => {
                        grid.deposit(rec[i], rec[j], [rec[off], rec[off + 1]])?;
                        off += 2;
                    }
                    _ => unreachable!("grouping checked when planning"),
                }
            }
        }
    }
    if let Some(mon) = monitor.as_deref_mut() {
        let off = m + plan.sample_width;
        for rec in records.chunks(width) {
            mon.field.deposit(rec[0], rec[1], [rec[off], rec[off + 1]])?;
        }
    }
    state.step_index += 1;
    Ok(())
}

/// One unbiased Euler–Maruyama step for every replica.
pub fn step_unbiased(state: &mut EnsembleState, spec: &PotentialSpec, cfg: &SimulationConfig) -> Result<()> {
    let plan = Plan::new(spec, None, None, cfg, false)?;
    advance(state, &plan, None, None)
}

/// One tensor-ABF step: each coordinate group is biased by its own grid and
/// receives one local-mean-force sample per replica.
pub fn step_tensor_abf(
    state: &mut EnsembleState,
    spec: &PotentialSpec,
    coords: &CoordinateSet,
    bias: &mut BiasGroupSet,
    cfg: &SimulationConfig,
) -> Result<()> {
    let mut cfg = cfg.clone();
    cfg.bias_mode = BiasMode::TensorAbf;
    let snapshot = bias.clone();
    let plan = Plan::new(spec, Some(coords), Some(&snapshot), &cfg, false)?;
    advance(state, &plan, Some(bias), None)
}

/// One standard-ABF step on a two-coordinate set biased by a joint 2D grid.
pub fn step_standard_abf(
    state: &mut EnsembleState,
    spec: &PotentialSpec,
    coords: &CoordinateSet,
    bias2d: &mut BiasGrid2D,
    cfg: &SimulationConfig,
) -> Result<()> {
    if coords.len() != 2 {
        return Err(Error::InvalidArgument("standard ABF needs exactly two coordinates".into()));
    }
    let joint = coords.regrouped(vec![CoordinateGroup::Pair(0, 1)])?;
    let mut cfg = cfg.clone();
    cfg.bias_mode = BiasMode::StandardAbf;
    let mut set = BiasGroupSet::new(vec![BiasGroup::TwoD(std::mem::replace(
        bias2d,
        BiasGrid2D::new(1, 1)?,
    ))]);
    let snapshot = set.clone();
    let result = Plan::new(spec, Some(&joint), Some(&snapshot), &cfg, false)
        .and_then(|plan| advance(state, &plan, Some(&mut set), None));
    if let Some(BiasGroup::TwoD(g)) = set.groups_mut().first_mut() {
        *bias2d = std::mem::replace(g, BiasGrid2D::new(1, 1)?);
    }
    result
}

/// A replica ensemble together with its potential, coordinates and bias.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub spec: PotentialSpec,
    pub coords: Option<CoordinateSet>,
    pub bias: Option<BiasGroupSet>,
    pub cfg: SimulationConfig,
    pub state: EnsembleState,
    pub monitor: Option<Monitor>,
}

impl Simulation {
    pub fn new(
        spec: PotentialSpec,
        coords: Option<CoordinateSet>,
        bias: Option<BiasGroupSet>,
        cfg: SimulationConfig,
        state: EnsembleState,
    ) -> Result<Self> {
        cfg.validate()?;
        if state.replicas() != cfg.replicas {
            return Err(Error::ShapeMismatch(format!(
                "{} replicas in state, {} in config",
                state.replicas(),
                cfg.replicas
            )));
        }
        if cfg.bias_mode == BiasMode::StandardAbf {
            let ok = coords.as_ref().is_some_and(|c| {
                c.len() == 2 && c.groups() == [CoordinateGroup::Pair(0, 1)]
            });
            if !ok {
                return Err(Error::InvalidArgument(
                    "standard ABF needs two coordinates grouped as one pair".into(),
                ));
            }
        }
        if cfg.bias_mode != BiasMode::None && bias.is_none() {
            return Err(Error::InvalidArgument("biased run without bias grids".into()));
        }
        Ok(Self {
            spec,
            coords,
            bias,
            cfg,
            state,
            monitor: None,
        })
    }

    /// Enables the `(ξ₀, ξ₁)` force and visit monitor.
    pub fn with_monitor(mut self, bins: usize) -> Result<Self> {
        self.monitor = Some(Monitor::new(bins)?);
        Ok(self)
    }

    pub fn step(&mut self) -> Result<()> {
        let snapshot = self.bias.clone();
        let plan = Plan::new(
            &self.spec,
            self.coords.as_ref(),
            snapshot.as_ref(),
            &self.cfg,
            self.monitor.is_some(),
        )?;
        advance(&mut self.state, &plan, self.bias.as_mut(), self.monitor.as_mut())
    }

    pub fn run(&mut self, steps: u64) -> Result<()> {
        self.run_observed(steps, |_| Ok(()))
    }

    /// Runs `steps` steps, calling `observe` after each one.
    pub fn run_observed(
        &mut self,
        steps: u64,
        mut observe: impl FnMut(&Self) -> Result<()>,
    ) -> Result<()> {
        for _ in 0..steps {
            self.step()?;
            observe(self)?;
        }
        Ok(())
    }
}

/// Histogram of `ξ` over the ensemble on `bins` uniform bins, as a density
/// (mean 1).
pub fn marginal_density(state: &EnsembleState, coords: &CoordinateSet, axis: usize, bins: usize) -> Result<Vec<f64>> {
    let grid = PeriodicGrid1D::new(bins)?;
    let mut h = vec![0.0; bins];
    let c = coords.coord(axis);
    for r in 0..state.replicas() {
        h[grid.bin_index(c.value_raw(state.replica(r)))] += 1.0;
    }
    let scale = bins as f64 / state.replicas() as f64;
    h.iter_mut().for_each(|v| *v *= scale);
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::BiasGrid1D;
    use crate::potentials::StandardFamily;
    use std::f64::consts::PI;

    fn quiet(dt: f64) -> SimulationConfig {
        let mut c = SimulationConfig::new(1.0, dt, 1, 1, 0);
        c.noise = false;
        c
    }

    #[test]
    fn zero_drift_zero_noise_is_identity() {
        let flat = PotentialSpec::constant(2, 0.0).unwrap();
        let mut s = EnsembleState::point_mass(&[0.3, 0.6], 1).unwrap();
        let before = s.positions().to_vec();
        step_unbiased(&mut s, &flat, &quiet(1e-3)).unwrap();
        assert_eq!(s.positions(), &before[..]);
        assert_eq!(s.step_index(), 1);
    }

    #[test]
    fn analytic_drift_step() {
        let dw = StandardFamily::DecoupledDoubleWell.build(2).unwrap();
        let mut s = EnsembleState::point_mass(&[0.125, 0.125], 1).unwrap();
        step_unbiased(&mut s, &dw, &quiet(1e-3)).unwrap();
        let expect = 0.125 + 4.0 * PI * 1e-3;
        for &x in s.positions() {
            assert!((x - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn displacement_cap_names_replica() {
        let dw = StandardFamily::DecoupledDoubleWell.build(2).unwrap();
        let mut s = EnsembleState::from_positions(2, vec![0.0, 0.0, 0.125, 0.125]).unwrap();
        let mut cfg = quiet(0.1);
        cfg.replicas = 2;
        match step_unbiased(&mut s, &dw, &cfg) {
            Err(Error::DisplacementCap { replica, .. }) => assert_eq!(replica, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn increment_variance_matches_two_dt() {
        let flat = PotentialSpec::constant(2, 0.0).unwrap();
        let replicas = 100_000;
        let mut s = EnsembleState::point_mass(&[0.5, 0.5], replicas).unwrap();
        let cfg = SimulationConfig::new(1.0, 1e-3, 1, replicas, 42);
        step_unbiased(&mut s, &flat, &cfg).unwrap();
        for axis in 0..2 {
            let d: Vec<f64> = (0..replicas).map(|r| s.replica(r)[axis] - 0.5).collect();
            let mean = d.iter().sum::<f64>() / replicas as f64;
            let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (replicas - 1) as f64;
            // chi-square: relative sd of the variance estimate is sqrt(2/N) ≈ 0.45%
            assert!((var / 2e-3 - 1.0).abs() < 0.03, "axis {axis}: {var}");
        }
    }

    #[test]
    fn noise_depends_only_on_seed_replica_and_step() {
        let src = NoiseSource::new(9, 3);
        let mut a = [0.0; 3];
        let mut b = [0.0; 3];
        src.fill(5, 17, &mut a);
        src.fill(4, 17, &mut b);
        assert_ne!(a, b);
        src.fill(5, 16, &mut b);
        assert_ne!(a, b);
        src.fill(5, 17, &mut b);
        assert_eq!(a, b);
    }

    fn tensor_setup(spec: &PotentialSpec, bins: usize) -> (CoordinateSet, BiasGroupSet) {
        let coords = CoordinateSet::projections(spec.dim()).unwrap();
        let bias = BiasGroupSet::for_coordinates(&coords, bins, bins).unwrap();
        (coords, bias)
    }

    #[test]
    fn first_tensor_step_matches_unbiased() {
        let c = StandardFamily::CoupledDoubleWell { coupling: 0.5 }.build(2).unwrap();
        let (coords, mut bias) = tensor_setup(&c, 16);
        let mut a = EnsembleState::point_mass(&[0.2, 0.7], 4).unwrap();
        let mut b = a.clone();
        let mut cfg = SimulationConfig::new(1.0, 1e-4, 1, 4, 3);
        cfg.ramp_threshold = 0;
        step_unbiased(&mut a, &c, &cfg).unwrap();
        step_tensor_abf(&mut b, &c, &coords, &mut bias, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deposited_projection_sample_is_partial_derivative() {
        let c = StandardFamily::CoupledDoubleWell { coupling: 0.5 }.build(2).unwrap();
        let (coords, mut bias) = tensor_setup(&c, 16);
        let x = [0.21, 0.64];
        let mut s = EnsembleState::point_mass(&x, 1).unwrap();
        step_tensor_abf(&mut s, &c, &coords, &mut bias, &quiet(1e-4)).unwrap();
        let mut g = [0.0; 2];
        c.gradient_into(&x, &mut g);
        for (axis, grid) in bias.groups().iter().enumerate() {
            let BiasGroup::OneD(grid) = grid else { panic!() };
            let k = grid.grid().bin_index(x[axis]);
            assert_eq!(grid.counts()[k], 1);
            assert_eq!(grid.sums()[k], g[axis]);
        }
    }

    #[test]
    fn oracle_loaded_bias_cancels_decoupled_drift() {
        // For the decoupled family the exact free-energy derivative along x₁ is
        // ∂₁V itself; load it at bin centers and check the drift at centers.
        let dw = StandardFamily::DecoupledDoubleWell.build(2).unwrap();
        let bins = 64;
        let grid = PeriodicGrid1D::new(bins).unwrap();
        let d: Vec<f64> = grid.centers().map(|z| -4.0 * PI * (4.0 * PI * z).sin()).collect();
        let coords = CoordinateSet::projections(2).unwrap();
        let mut bias = BiasGroupSet::new(vec![
            BiasGroup::OneD(BiasGrid1D::from_means(&d).unwrap()),
            BiasGroup::OneD(BiasGrid1D::from_means(&d).unwrap()),
        ]);
        let mut cfg = quiet(1e-3);
        cfg.ramp_threshold = 0;
        cfg.frozen = true;
        for k in [0, 5, 17, 40] {
            let x = [grid.center(k), grid.center((k * 7) % bins)];
            let mut s = EnsembleState::point_mass(&x, 1).unwrap();
            step_tensor_abf(&mut s, &dw, &coords, &mut bias, &cfg).unwrap();
            for a in 0..2 {
                assert!((s.positions()[a] - x[a]).abs() < 1e-8 * 1e-3);
            }
        }
    }

    #[test]
    fn standard_abf_examples() {
        let flat = PotentialSpec::constant(2, 1.0).unwrap();
        let coords = CoordinateSet::projections(2).unwrap();
        let mut g = BiasGrid2D::new(8, 8).unwrap();
        let mut s = EnsembleState::point_mass(&[0.3, 0.3], 16).unwrap();
        let mut cfg = SimulationConfig::new(1.0, 1e-4, 1, 16, 1);
        for _ in 0..20 {
            step_standard_abf(&mut s, &flat, &coords, &mut g, &cfg).unwrap();
        }
        assert_eq!(g.counts().iter().sum::<u64>(), 320);
        assert!(g.sums().iter().all(|v| v[0] == 0.0 && v[1] == 0.0));

        // empty bin gives no bias: identical to an unbiased step
        let dw = StandardFamily::DecoupledDoubleWell.build(2).unwrap();
        let mut a = EnsembleState::point_mass(&[0.1, 0.9], 16).unwrap();
        let mut b = a.clone();
        let mut empty = BiasGrid2D::new(8, 8).unwrap();
        cfg.ramp_threshold = 0;
        step_standard_abf(&mut a, &dw, &coords, &mut empty, &cfg).unwrap();
        step_unbiased(&mut b, &dw, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let c = StandardFamily::CoupledDoubleWell { coupling: 0.5 }.build(2).unwrap();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let (coords, bias) = tensor_setup(&c, 32);
                let mut cfg = SimulationConfig::new(1.0, 1e-4, 50, 500, 77);
                cfg.bias_mode = BiasMode::TensorAbf;
                cfg.ramp_threshold = 10;
                let state = EnsembleState::point_mass(&[0.25, 0.75], 500).unwrap();
                let mut sim = Simulation::new(c.clone(), Some(coords), Some(bias), cfg, state)
                    .unwrap()
                    .with_monitor(16)
                    .unwrap();
                sim.run(50).unwrap();
                sim
            })
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.state, b.state);
        assert_eq!(a.bias, b.bias);
        assert_eq!(a.monitor, b.monitor);
    }

    #[test]
    fn tensor_abf_marginal_entropy_decays_at_heat_rate() {
        // Ensemble estimator, point-mass start: the ξ₁ marginal should follow
        // the heat equation, whose relative entropy to uniform decays at
        // 2·4π²/β asymptotically.
        let c = StandardFamily::CoupledDoubleWell { coupling: 0.5 }.build(2).unwrap();
        let replicas = 40_000;
        let bins = 32;
        let (coords, bias) = tensor_setup(&c, bins);
        let mut cfg = SimulationConfig::new(1.0, 5e-5, 0, replicas, 2024);
        cfg.bias_mode = BiasMode::TensorAbf;
        cfg.estimator_mode = EstimatorMode::EnsembleAverage;
        cfg.ramp_threshold = 0;
        let state = EnsembleState::point_mass(&[0.3, 0.3], replicas).unwrap();
        let mut sim = Simulation::new(c, Some(coords.clone()), Some(bias), cfg, state).unwrap();
        let mut series = vec![];
        sim.run_observed(1200, |s| {
            if s.state.step_index() % 20 == 0 {
                let p = marginal_density(&s.state, &coords, 0, bins)?;
                let h = p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>() / bins as f64;
                // remove the finite-sample bias (bins − 1)/(2N) of the plug-in estimate
                let h = h - (bins as f64 - 1.0) / (2.0 * replicas as f64);
                series.push((s.state.step_index() as f64 * 5e-5, h));
            }
            Ok(())
        })
        .unwrap();
        let window: Vec<(f64, f64)> = series
            .iter()
            .copied()
            .filter(|&(_, h)| (0.01..0.3).contains(&h))
            .collect();
        let (rate, _) = crate::diagnostics::fit_decay_rate(&window, (0.0, f64::INFINITY)).unwrap();
        let target = 2.0 * 4.0 * PI * PI;
        assert!((rate / target - 1.0).abs() < 0.15, "rate {rate} vs {target}");
    }
}
