use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::json;
use tabf::diagnostics::{lsi_lower_bound_conditional, lsi_lower_bound_from_density, ConvergenceReport};
use tabf::export::csv_table;
use tabf::free_energy::{
    estimate_gradient_field, integrate_gradient_2d, reconstruct_histogram, seed_standard_abf,
};
use tabf::oracle::{
    evolve_fokker_planck, face_derivatives, fp_stability_bound, free_energy_1d, free_energy_2d,
    solve_stationary_pair, FpBias, FpOptions,
};
use tabf::{
    BiasFunction1D, BiasGroup, BiasGroupSet, CoordinateKind, CoordinateSet, DensityField2D,
    EnsembleState, FreeEnergySurface2D, GradientField2D, GridSnapshot, PotentialSpec, Simulation,
};

use crate::artifacts::{sha256_hex, ArtifactWriter, Manifest, SeedingLink};
use crate::config::{Experiment, ExperimentConfig, FpBiasChoice, InitialDensity};
use crate::error::CliError;

pub const SEED_FIELD: &str = "gradient_field.json";

/// Runs the configured experiment, writing every artifact into `dir`.
pub fn run(cfg: &ExperimentConfig, dir: &Path) -> Result<Manifest, CliError> {
    let hash = cfg.hash()?;
    let mut w = ArtifactWriter::create(dir)?;
    let mut manifest = Manifest {
        experiment: serde_json::to_value(cfg.experiment)?
            .as_str()
            .unwrap_or_default()
            .to_string(),
        config_hash: hash.clone(),
        config_toml: cfg.to_toml()?,
        seed: cfg.simulation.as_ref().map(|s| s.seed),
        versions: BTreeMap::from([
            ("tabf".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("format".to_string(), "1".to_string()),
        ]),
        files: BTreeMap::new(),
        seeding: None,
        restart_from: None,
    };
    match cfg.experiment {
        Experiment::Unbiased | Experiment::TensorAbf | Experiment::StandardAbf | Experiment::SeededAbf => {
            run_sampler(cfg, &hash, &mut w, &mut manifest)?
        }
        Experiment::FokkerPlanck => run_fokker_planck(cfg, &mut w)?,
        Experiment::StationarySolver => run_stationary(cfg, &mut w)?,
        Experiment::OracleTables => run_oracle_tables(cfg, &mut w)?,
        Experiment::Diagnose => run_diagnose(cfg, &mut w)?,
    }
    w.finish(manifest)
}

/// Oracle surface and per-coordinate marginal free energies, where the
/// coordinates are projections onto the first two axes.
struct Reference {
    surface: Option<FreeEnergySurface2D>,
    marginals: Vec<Option<BiasFunction1D>>,
}

impl Reference {
    fn new(cfg: &ExperimentConfig, spec: &PotentialSpec, coords: &CoordinateSet) -> Result<Self, CliError> {
        let beta = cfg.effective_beta();
        let axes: Vec<Option<usize>> = coords
            .coords()
            .iter()
            .map(|c| match c.kind() {
                CoordinateKind::Projection { axis } if *axis < 2 => Some(*axis),
                _ => None,
            })
            .collect();
        let oracle_ok = spec.dim() <= 3;
        let surface = if oracle_ok && axes.len() >= 2 && axes[0] == Some(0) && axes[1] == Some(1) {
            Some(free_energy_2d(spec, beta, cfg.grids.bins_2d)?)
        } else {
            None
        };
        let marginals = axes
            .iter()
            .map(|a| match a {
                Some(axis) if oracle_ok => free_energy_1d(spec, *axis, beta, cfg.grids.bins_1d).map(Some),
                _ => Ok(None),
            })
            .collect::<tabf::Result<Vec<_>>>()?;
        Ok(Self { surface, marginals })
    }

    fn surface_error(&self, s: &FreeEnergySurface2D) -> f64 {
        self.surface
            .as_ref()
            .and_then(|r| s.rms_difference_aligned(r, None).ok())
            .unwrap_or(f64::NAN)
    }

    fn marginal_error(&self, i: usize, f: &BiasFunction1D) -> f64 {
        let Some(Some(r)) = self.marginals.get(i) else {
            return f64::NAN;
        };
        let k = f.bins() as f64;
        let off = f.values().iter().zip(r.values()).map(|(a, b)| a - b).sum::<f64>() / k;
        let sq: f64 = f.values().iter().zip(r.values()).map(|(a, b)| (a - b - off).powi(2)).sum();
        (sq / k).sqrt()
    }
}

fn seed_from(cfg: &ExperimentConfig, manifest: &mut Manifest) -> Result<BiasGroupSet, CliError> {
    let seeding = cfg.seeding.as_ref().expect("validated");
    let source = Manifest::load(&seeding.source)?;
    if source.experiment != "tensor_abf" {
        return Err(CliError::Schema(format!(
            "seeding source is a {} run, expected tensor_abf",
            source.experiment
        )));
    }
    let path = seeding.source.join(SEED_FIELD);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let sha = sha256_hex(text.as_bytes());
    if source.files.get(SEED_FIELD) != Some(&sha) {
        return Err(CliError::Incomparable(format!(
            "{} does not match the hash in its manifest",
            path.display()
        )));
    }
    let field: GradientField2D = serde_json::from_str(&text)?;
    let b = cfg.grids.bins_2d;
    if field.bins() != (b, b) {
        return Err(CliError::Incomparable(format!(
            "seed field is {:?}, run uses {b}x{b}",
            field.bins()
        )));
    }
    manifest.seeding = Some(SeedingLink {
        source_dir: seeding.source.display().to_string(),
        source_config_hash: source.config_hash,
        source_file: SEED_FIELD.to_string(),
        source_sha256: sha,
    });
    Ok(BiasGroupSet::new(vec![BiasGroup::TwoD(seed_standard_abf(&field))]))
}

fn run_sampler(
    cfg: &ExperimentConfig,
    hash: &str,
    w: &mut ArtifactWriter,
    manifest: &mut Manifest,
) -> Result<(), CliError> {
    let spec = cfg.potential()?;
    let coords = cfg.coordinate_set()?;
    let sim_cfg = cfg.simulation()?;
    let (b1, b2) = (cfg.grids.bins_1d, cfg.grids.bins_2d);
    let mut bias = match cfg.experiment {
        Experiment::Unbiased => None,
        Experiment::SeededAbf => Some(seed_from(cfg, manifest)?),
        _ => Some(BiasGroupSet::for_coordinates(&coords, b1, b2)?),
    };
    if let Some(path) = &cfg.restart {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let snap = GridSnapshot::from_json(&text)?;
        snap.groups.check_against(&coords)?;
        manifest.restart_from = Some(format!("{}@{}", snap.config_hash, snap.step));
        bias = Some(snap.groups);
    }
    let x0 = cfg
        .initial_point
        .clone()
        .unwrap_or_else(|| vec![0.25; cfg.dimension]);
    let state = EnsembleState::point_mass(&x0, sim_cfg.replicas)?;
    let reference = Reference::new(cfg, &spec, &coords)?;
    let mut sim = Simulation::new(spec, Some(coords.clone()), bias, sim_cfg.clone(), state)?.with_monitor(b2)?;

    let n_coords = coords.len();
    let mut header: Vec<String> = vec!["step".into(), "t".into(), "visited_fraction".into()];
    match cfg.experiment {
        Experiment::TensorAbf => {
            for i in 0..n_coords {
                header.push(format!("mean_residual_{i}"));
                header.push(format!("marginal_bias_rms_err_{i}"));
            }
        }
        Experiment::Unbiased => header.push("histogram_surface_rms_err".into()),
        _ => header.push("surface_rms_err".into()),
    }
    let mut rows: Vec<Vec<f64>> = vec![];
    let every = cfg.snapshot_every;
    let total = sim_cfg.steps;
    let beta = sim_cfg.beta;
    let observe = |s: &Simulation, rows: &mut Vec<Vec<f64>>| {
        let step = s.state.step_index();
        let monitor = &s.monitor.as_ref().expect("monitor enabled").field;
        let mut row = vec![
            step as f64,
            step as f64 * s.cfg.dt,
            monitor.visited() as f64 / monitor.counts().len() as f64,
        ];
        match cfg.experiment {
            Experiment::TensorAbf => {
                let groups = s.bias.as_ref().expect("biased").groups();
                for (i, g) in groups.iter().enumerate() {
                    if let BiasGroup::OneD(g) = g {
                        row.push(g.mean_residual());
                        row.push(
                            g.integrate_bias()
                                .map(|f| reference.marginal_error(i, &f))
                                .unwrap_or(f64::NAN),
                        );
                    }
                }
            }
            Experiment::Unbiased => row.push(
                histogram_surface(monitor.counts(), (b2, b2), beta)
                    .map(|a| reference.surface_error(&a))
                    .unwrap_or(f64::NAN),
            ),
            _ => {
                let g = match &s.bias.as_ref().expect("biased").groups()[0] {
                    BiasGroup::TwoD(g) => g,
                    BiasGroup::OneD(_) => unreachable!("pair grouping"),
                };
                row.push(
                    integrate_gradient_2d(&estimate_gradient_field(g))
                        .map(|r| reference.surface_error(&r.surface))
                        .unwrap_or(f64::NAN),
                );
            }
        }
        rows.push(row);
    };
    observe(&sim, &mut rows);
    sim.run_observed(total, |s| {
        let step = s.state.step_index();
        if step % every == 0 || step == total {
            observe(s, &mut rows);
        }
        Ok(())
    })?;
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    w.write("series.csv", &csv_table(&header_refs, &rows)?)?;

    let monitor = sim.monitor.as_ref().expect("monitor enabled").field.clone();
    let field = estimate_gradient_field(&monitor);
    w.write("gradient_field.csv", &field.to_csv())?;
    w.write_json(SEED_FIELD, &field)?;

    let mut summary = BTreeMap::<String, serde_json::Value>::new();
    summary.insert("steps".into(), json!(sim.state.step_index()));
    summary.insert("visited_bins".into(), json!(monitor.visited()));

    if let Some(bias) = &sim.bias {
        w.write_json(
            "grid_snapshot.json",
            &GridSnapshot::new(hash, sim.state.step_index(), bias.clone()),
        )?;
        for (i, g) in bias.groups().iter().enumerate() {
            match g {
                BiasGroup::OneD(g) => {
                    w.write(&format!("bias_grid_{i}.csv"), &g.to_csv())?;
                    match g.integrate_bias() {
                        Ok(f) => {
                            w.write(&format!("marginal_bias_{i}.csv"), &f.to_csv())?;
                            summary.insert(
                                format!("marginal_bias_rms_err_{i}"),
                                json!(finite_or_null(reference.marginal_error(i, &f))),
                            );
                        }
                        Err(e) => {
                            summary.insert(format!("marginal_bias_{i}_error"), json!(e.to_string()));
                        }
                    }
                }
                BiasGroup::TwoD(g) => w.write("bias_grid_2d.csv", &g.to_csv())?,
            }
        }
    }

    let surface = match cfg.experiment {
        Experiment::Unbiased => histogram_surface(monitor.counts(), (b2, b2), beta).map(|s| (s, None)),
        Experiment::TensorAbf => integrate_gradient_2d(&field).map(|r| (r.surface, Some(r.curl_residual))),
        _ => {
            let g = match &sim.bias.as_ref().expect("biased").groups()[0] {
                BiasGroup::TwoD(g) => estimate_gradient_field(g),
                BiasGroup::OneD(_) => unreachable!("pair grouping"),
            };
            integrate_gradient_2d(&g).map(|r| (r.surface, Some(r.curl_residual)))
        }
    };
    match surface {
        Ok((s, curl)) => {
            write_surface(w, "surface", &s)?;
            summary.insert("surface_rms_err".into(), json!(finite_or_null(reference.surface_error(&s))));
            if let Some(c) = curl {
                summary.insert("curl_residual".into(), json!(c));
            }
        }
        Err(e) => {
            summary.insert("surface_error".into(), json!(e.to_string()));
        }
    }
    if let Some(r) = &reference.surface {
        write_surface(w, "oracle_surface", r)?;
    }
    w.write_json("summary.json", &summary)
}

fn finite_or_null(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

fn histogram_surface(counts: &[u64], bins: (usize, usize), beta: f64) -> tabf::Result<FreeEnergySurface2D> {
    let z1 = BiasFunction1D::zeros(bins.0)?;
    let z2 = BiasFunction1D::zeros(bins.1)?;
    reconstruct_histogram(counts, bins, &z1, &z2, beta)
}

fn write_surface(w: &mut ArtifactWriter, stem: &str, s: &FreeEnergySurface2D) -> Result<(), CliError> {
    w.write(&format!("{stem}.csv"), &s.to_csv())?;
    let (r, c) = s.bins();
    w.write_pgm(stem, s.values(), r, c, Some(s.mask()))
}

fn write_density(w: &mut ArtifactWriter, stem: &str, d: &DensityField2D) -> Result<(), CliError> {
    w.write(&format!("{stem}.csv"), &d.to_csv())?;
    w.write_pgm(stem, d.values(), d.bins(), d.bins(), None)
}

fn initial_density(cfg: &ExperimentConfig, spec: &PotentialSpec, bins: usize, which: InitialDensity) -> tabf::Result<DensityField2D> {
    use std::f64::consts::PI;
    match which {
        InitialDensity::Uniform => DensityField2D::uniform(bins),
        InitialDensity::Canonical => DensityField2D::canonical(spec, cfg.effective_beta(), bins),
        InitialDensity::Perturbed => DensityField2D::from_fn(bins, |x1, x2| {
            1.0 + 0.5 * (2.0 * PI * (x1 + 2.0 * x2)).sin() + (2.0 * PI * x1).cos() / 3.0
        }),
    }
}

#[derive(Serialize)]
struct FpSummary {
    dt: f64,
    dt_bound: f64,
    steps: usize,
    final_h: f64,
    ck_all_ok: bool,
    stationary_residual: f64,
}

fn run_fokker_planck(cfg: &ExperimentConfig, w: &mut ArtifactWriter) -> Result<(), CliError> {
    let spec = cfg.potential()?;
    let fp = cfg.fokker_planck.clone().unwrap_or_default();
    let beta = cfg.effective_beta();
    let pair = solve_stationary_pair(&spec, beta, fp.bins, cfg.solver.tol, cfg.solver.max_iter)?;
    let a1 = pair.bias(0)?;
    let a2 = pair.bias(1)?;
    let psi0 = initial_density(cfg, &spec, fp.bins, fp.initial)?;
    let bias = match fp.bias {
        FpBiasChoice::None => FpBias::None,
        FpBiasChoice::Stationary => FpBias::Frozen {
            a1: a1.values().to_vec(),
            a2: a2.values().to_vec(),
        },
        FpBiasChoice::Adaptive => FpBias::Adaptive,
    };
    let dt = match fp.dt {
        Some(dt) => dt,
        None => 0.5 * fp_stability_bound(&spec, &psi0, beta, &bias)?,
    };
    let reference = match fp.bias {
        FpBiasChoice::None => DensityField2D::canonical(&spec, beta, fp.bins)?,
        _ => pair.density()?,
    };
    let opts = FpOptions {
        beta,
        bins: fp.bins,
        dt,
        t_final: fp.t_final,
        bias,
        record_every: fp.record_every,
        snapshot_every: fp.snapshot_every,
        reference: Some(reference),
        reference_bias: Some((face_derivatives(a1.values()), face_derivatives(a2.values()))),
    };
    let run = evolve_fokker_planck(&spec, &psi0, &opts)?;
    w.write("fp_series.csv", &run.series_csv())?;
    write_density(w, "final_density", &run.final_density)?;
    for (k, snap) in run.snapshots.iter().enumerate() {
        write_density(w, &format!("snapshot_{k:04}_density"), &snap.density)?;
        let rows: Vec<Vec<f64>> = (0..fp.bins)
            .map(|i| {
                vec![
                    (i + 1) as f64 / fp.bins as f64,
                    snap.bias_derivative1[i],
                    snap.bias_derivative2[i],
                ]
            })
            .collect();
        w.write(
            &format!("snapshot_{k:04}_bias_derivative.csv"),
            &csv_table(&["face", "dA1", "dA2"], &rows)?,
        )?;
    }

    let kappa = spec.coupling_constants(fp.bins)?;
    let psi_inf = pair.density()?;
    let rho = (
        lsi_lower_bound_from_density(psi_inf.values(), fp.bins, 0)?,
        lsi_lower_bound_from_density(psi_inf.values(), fp.bins, 1)?,
    );
    let mut report = ConvergenceReport::new(kappa, rho, beta)?;
    let window = fp
        .fit_window
        .map_or((0.25 * fp.t_final, 0.75 * fp.t_final), |[a, b]| (a, b));
    let series = |f: fn(&tabf::oracle::FpRow) -> f64| -> Vec<(f64, f64)> { run.rows.iter().map(|r| (r.t, f(r))).collect() };
    let fits: [(&str, fn(&tabf::oracle::FpRow) -> f64); 5] = [
        ("H", |r| r.h),
        ("H_M1", |r| r.hm1),
        ("H_M2", |r| r.hm2),
        ("bias_err1", |r| r.bias_err1),
        ("bias_err2", |r| r.bias_err2),
    ];
    for (name, f) in fits {
        // series that have already reached round-off are skipped
        let _ = report.record_fit(name, &series(f), window);
    }
    w.write_json("convergence_report.json", &report)?;
    w.write_json(
        "summary.json",
        &FpSummary {
            dt,
            dt_bound: run.dt_bound,
            steps: run.steps,
            final_h: run.rows.last().map_or(f64::NAN, |r| r.h),
            ck_all_ok: run.rows.iter().all(|r| r.ck.is_none_or(|c| c.ok)),
            stationary_residual: pair.residual,
        },
    )
}

fn run_stationary(cfg: &ExperimentConfig, w: &mut ArtifactWriter) -> Result<(), CliError> {
    let spec = cfg.potential()?;
    let beta = cfg.effective_beta();
    let bins = cfg.grids.bins_2d;
    let pair = solve_stationary_pair(&spec, beta, bins, cfg.solver.tol, cfg.solver.max_iter)?;
    w.write("stationary_pair.csv", &pair.to_csv()?)?;
    let history: Vec<Vec<f64>> = pair
        .history
        .iter()
        .enumerate()
        .map(|(k, r)| vec![(k + 1) as f64, *r])
        .collect();
    w.write("residual_history.csv", &csv_table(&["iteration", "residual"], &history)?)?;
    let psi = pair.density()?;
    write_density(w, "stationary_density", &psi)?;
    let marginal_err = (0..2)
        .flat_map(|a| psi.marginal(a))
        .map(|m| (m - 1.0).abs())
        .fold(0.0, f64::max);
    w.write_json(
        "summary.json",
        &json!({
            "bins": bins,
            "iterations": pair.iterations,
            "residual": pair.residual,
            "tv_from_uniform": psi.tv_from_uniform(),
            "max_marginal_deviation": marginal_err,
        }),
    )
}

fn run_oracle_tables(cfg: &ExperimentConfig, w: &mut ArtifactWriter) -> Result<(), CliError> {
    let spec = cfg.potential()?;
    let beta = cfg.effective_beta();
    let bins = cfg.grids.bins_2d;
    let a = free_energy_2d(&spec, beta, bins)?;
    let a1 = free_energy_1d(&spec, 0, beta, bins)?;
    let a2 = free_energy_1d(&spec, 1, beta, bins)?;
    write_surface(w, "free_energy_2d", &a)?;
    w.write("marginal_free_energy_0.csv", &a1.to_csv())?;
    w.write("marginal_free_energy_1.csv", &a2.to_csv())?;
    if spec.dim() == 2 {
        write_density(w, "canonical_density", &DensityField2D::canonical(&spec, beta, bins)?)?;
    }
    let resid: Vec<f64> = (0..bins * bins)
        .map(|k| a.values()[k] - a1.values()[k / bins] - a2.values()[k % bins])
        .collect();
    let mean = resid.iter().sum::<f64>() / resid.len() as f64;
    let spread = resid.iter().map(|r| (r - mean).abs()).fold(0.0, f64::max);
    w.write_json(
        "summary.json",
        &json!({
            "bins": bins,
            "separability_residual": spread,
        }),
    )
}

fn run_diagnose(cfg: &ExperimentConfig, w: &mut ArtifactWriter) -> Result<(), CliError> {
    let spec = cfg.potential()?;
    let beta = cfg.effective_beta();
    let bins = cfg.grids.bins_2d;
    let kappa = spec.coupling_constants(bins)?;
    let from_potential = ConvergenceReport::new(
        kappa,
        (
            lsi_lower_bound_conditional(&spec, beta, 0, bins)?,
            lsi_lower_bound_conditional(&spec, beta, 1, bins)?,
        ),
        beta,
    )?;
    let pair = solve_stationary_pair(&spec, beta, bins, cfg.solver.tol, cfg.solver.max_iter)?;
    let psi = pair.density()?;
    let from_stationary = ConvergenceReport::new(
        kappa,
        (
            lsi_lower_bound_from_density(psi.values(), bins, 0)?,
            lsi_lower_bound_from_density(psi.values(), bins, 1)?,
        ),
        beta,
    )?;
    w.write_json(
        "convergence_report.json",
        &json!({
            "potential_conditionals": from_potential,
            "stationary_conditionals": from_stationary,
        }),
    )
}
