//! The subcommand pipelines. Each writes into a [`Bundle`] and records the
//! verification assertions that did not hold; [`execute`] wraps them with
//! the manifest and the exit-code mapping.

use std::path::PathBuf;
use std::time::Instant;

use serde::Serialize;
use sheat_core::analysis::{
    excitation_index, fit_rate, late_window, lyapunov_exponent, threshold_scan, verify_integral_bounds, Abscissa,
    EnergyPoint, ExcitationFit, FitPoint, IntegralBoundReport, RateFit, Thresholds, Z_95,
};
use sheat_core::kernel::{Boundary, Method};
use sheat_core::oracle::{calibrate_growth, lower_bound_envelope, second_moment_volterra, GrowthCalibration, MomentField};
use sheat_core::regularity::{grr_functional, grr_general, holder_bound_check, power_law_pair, Profile};
use sheat_core::stats::{EnsembleMoments, Functional};

use crate::config::{Backend, ExperimentConfig};
use crate::ensemble::{run_paths, with_workers};
use crate::error::{RunError, RunResult};
use crate::manifest::{CalibratedConstants, FailedCell, RunManifest};
use crate::output::{Bundle, PlotRow};
use crate::sweep::{run_sweep, SweepPlan, SweepResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Kernel,
    Simulate,
    Oracle,
    Moments,
    Lyapunov,
    Excitation,
    Thresholds,
    GrrCheck,
    VerifyBounds,
    All,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Kernel => "kernel",
            Self::Simulate => "simulate",
            Self::Oracle => "oracle",
            Self::Moments => "moments",
            Self::Lyapunov => "lyapunov",
            Self::Excitation => "excitation",
            Self::Thresholds => "thresholds",
            Self::GrrCheck => "grr-check",
            Self::VerifyBounds => "verify-bounds",
            Self::All => "all",
        }
    }
}

/// Everything a command needs besides its name.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub workers: usize,
    pub out: PathBuf,
}

#[derive(Debug, Default)]
struct Findings {
    failed_cells: Vec<FailedCell>,
    reused_cells: usize,
    failed_assertions: Vec<String>,
}

impl Findings {
    fn check(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.failed_assertions.push(what.into());
        }
    }
}

struct Run<'a> {
    ctx: &'a RunContext,
    cfg: &'a ExperimentConfig,
    bundle: Bundle,
    findings: Findings,
}

/// Runs `command`, writes the manifest, and maps the outcome to an error
/// when cells failed (numerical) or assertions did not hold.
pub fn execute(command: Command, ctx: &RunContext) -> RunResult<RunManifest> {
    let start = Instant::now();
    let mut config = ctx.config.clone();
    config.run.master_seed = ctx.seed;
    config.validate()?;
    let constants = CalibratedConstants::compute(&config)?;
    let mut run = Run { ctx, cfg: &config, bundle: Bundle::create(&ctx.out)?, findings: Findings::default() };
    let outcome = with_workers(ctx.workers, || run.dispatch(command, &constants))?;
    let manifest = RunManifest {
        command: command.name().to_string(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        workers: ctx.workers,
        diffusion_number: config.grid_spec()?.diffusion_number(config.model.nu),
        calibrated_constants: constants,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        outputs: run.bundle.files().to_vec(),
        failed_cells: run.findings.failed_cells,
        reused_cells: run.findings.reused_cells,
        failed_assertions: run.findings.failed_assertions,
    };
    manifest.write(&ctx.out)?;
    outcome?;
    if !manifest.failed_cells.is_empty() {
        let cells: Vec<String> = manifest.failed_cells.iter().map(|c| format!("λ = {}: {}", c.lambda, c.error)).collect();
        return Err(RunError::Numerical(cells.join("; ")));
    }
    if !manifest.failed_assertions.is_empty() {
        return Err(RunError::Assertion(manifest.failed_assertions.join("; ")));
    }
    Ok(manifest)
}

impl Run<'_> {
    fn dispatch(&mut self, command: Command, constants: &CalibratedConstants) -> RunResult<()> {
        match command {
            Command::Kernel => self.kernel(constants),
            Command::Simulate => self.simulate(),
            Command::Oracle => self.oracle(),
            Command::Moments => self.moments().map(|_| ()),
            Command::Lyapunov => self.lyapunov().map(|_| ()),
            Command::Excitation => self.excitation(),
            Command::Thresholds => self.thresholds(),
            Command::GrrCheck => self.grr_check(),
            Command::VerifyBounds => self.verify_bounds(),
            Command::All => {
                self.kernel(constants)?;
                self.simulate()?;
                if self.cfg.model.sigma.linear_slope().is_some() {
                    self.oracle()?;
                }
                self.moments()?;
                self.lyapunov()?;
                self.excitation()?;
                self.thresholds()?;
                self.grr_check()?;
                self.verify_bounds()
            }
        }
    }

    fn kernel(&mut self, constants: &CalibratedConstants) -> RunResult<()> {
        #[derive(Serialize)]
        struct Row {
            t: f64,
            x: f64,
            y: f64,
            dirichlet: f64,
            error_bound: f64,
            method: &'static str,
            neumann: f64,
            free: f64,
            longtime_bound: Option<f64>,
        }
        #[derive(Serialize)]
        struct TruncationRow {
            t: f64,
            terms: usize,
            tail_bound: f64,
            use_images: bool,
        }
        #[derive(Serialize)]
        struct Report<'a> {
            constants: &'a CalibratedConstants,
            image_threshold: f64,
            truncation: Vec<TruncationRow>,
        }
        let dirichlet = self.cfg.kernel_spec(Boundary::Dirichlet)?;
        let neumann = dirichlet.with_boundary(Boundary::Neumann);
        let free = dirichlet.with_boundary(Boundary::Free);
        let tol = dirichlet.tolerance();
        let mut rows = Vec::new();
        let mut truncation = Vec::new();
        let mut image_threshold = 0.0;
        for &t in &self.cfg.kernel.table_times {
            let tr = dirichlet.truncation(t)?;
            image_threshold = tr.image_threshold;
            truncation.push(TruncationRow { t, terms: tr.terms, tail_bound: tr.tail_bound, use_images: tr.use_images });
            for &x in &self.cfg.kernel.table_positions {
                for &y in &self.cfg.kernel.table_positions {
                    let d = dirichlet.eval_detailed(t, x, y)?;
                    let up = dirichlet.upper_bounds(t, x, y)?;
                    let g = free.eval(t, x, y)?;
                    self.findings.check(d.value <= g + 2.0 * tol, format!("g_D ≤ g at (t, x, y) = ({t}, {x}, {y})"));
                    if let Some(bound) = up.longtime {
                        self.findings.check(d.value <= bound + tol, format!("long-time bound at (t, x, y) = ({t}, {x}, {y})"));
                    }
                    rows.push(Row {
                        t,
                        x,
                        y,
                        dirichlet: d.value,
                        error_bound: d.error_bound,
                        method: match d.method {
                            Method::Series { .. } => "series",
                            Method::Images { .. } => "images",
                            Method::Closed => "closed",
                        },
                        neumann: neumann.eval(t, x, y)?,
                        free: g,
                        longtime_bound: up.longtime,
                    });
                }
            }
        }
        self.bundle.write_csv("kernel_table.csv", &rows)?;
        self.bundle.write_json("kernel_constants.json", &Report { constants, image_threshold, truncation })?;
        let c = constants;
        self.findings.check(c.kappa1 > 0.0 && c.kappa2 > 0.0, "calibrated κ₁, κ₂ positive");
        self.findings.check(c.lower_bound_margin >= 1.0, "kernel lower bound holds on the calibration grid");
        self.findings.check(c.k1 > 0.0 && c.k2 > 0.0 && c.k1.is_finite(), "derivative-bound constants positive and finite");
        Ok(())
    }

    fn simulate(&mut self) -> RunResult<()> {
        #[derive(Serialize)]
        struct Row {
            sample: u64,
            t: f64,
            x: f64,
            u: f64,
            log_abs_u: f64,
        }
        let lambda = self.cfg.lambdas()[0];
        let pc = self.cfg.path_config(lambda, self.ctx.seed)?;
        let paths = run_paths(&pc, self.cfg.run.saved_paths)?;
        let grid = pc.params.grid;
        let mut rows = Vec::new();
        for (s, path) in paths.iter().enumerate() {
            for (t, snap) in path.times.iter().zip(&path.snapshots) {
                for (j, v) in snap.values.iter().enumerate() {
                    let log_abs_u = v.abs().ln() + snap.log_scale;
                    rows.push(Row { sample: s as u64, t: *t, x: grid.node(j), u: v * snap.log_scale.exp(), log_abs_u });
                }
            }
        }
        self.bundle.write_csv("path.csv", &rows)?;
        Ok(())
    }

    fn oracle_field(&self, lambda: f64, horizon: Option<f64>) -> RunResult<MomentField> {
        let mut oc = self.cfg.oracle_config(lambda)?;
        if let Some(h) = horizon {
            oc.horizon = h;
        }
        Ok(second_moment_volterra(&oc)?)
    }

    fn oracle(&mut self) -> RunResult<()> {
        #[derive(Serialize)]
        struct Row {
            lambda: f64,
            t: f64,
            x: f64,
            log_m: f64,
            log_error: Option<f64>,
        }
        #[derive(Serialize)]
        struct EnergyRow {
            lambda: f64,
            t: f64,
            log_energy: f64,
            log_energy_error: Option<f64>,
        }
        let mut rows = Vec::new();
        let mut energy = Vec::new();
        for lambda in self.cfg.lambdas() {
            let field = self.oracle_field(lambda, None)?;
            for (k, &t) in field.times.iter().enumerate() {
                energy.push(EnergyRow { lambda, t, log_energy: field.log_energy(k), log_energy_error: field.log_energy_error(k) });
            }
            let horizon = *field.times.last().expect("oracle has times");
            let times: Vec<f64> = self.cfg.observation_times().into_iter().filter(|&t| t <= horizon).collect();
            for t in times {
                let k = field.time_index(t);
                for (j, &x) in field.nodes.iter().enumerate() {
                    let log_error = field.log_error.as_ref().map(|e| e[k][j]);
                    rows.push(Row { lambda, t: field.times[k], x, log_m: field.log_moment[k][j], log_error });
                }
            }
        }
        self.bundle.write_csv("oracle_moments.csv", &rows)?;
        self.bundle.write_csv("oracle_energy.csv", &energy)?;
        Ok(())
    }

    fn sweep(&mut self, plan: &SweepPlan, prefix: &str) -> RunResult<SweepResult> {
        let result = run_sweep(self.cfg, plan, &mut self.bundle, prefix)?;
        self.findings.reused_cells += result.reused;
        for f in &result.failed {
            if !self.findings.failed_cells.contains(f) {
                self.findings.failed_cells.push(f.clone());
            }
        }
        Ok(result)
    }

    fn moments(&mut self) -> RunResult<SweepResult> {
        let plan = SweepPlan::from_config(self.cfg, self.ctx.seed)?;
        let result = self.sweep(&plan, "cells")?;
        self.bundle.write_csv("moments.csv", &result.rows())?;
        Ok(result)
    }

    /// Lyapunov fits per λ: the L² energy from the oracle, or every
    /// configured functional from Monte Carlo.
    fn rate_fits(&mut self) -> RunResult<Vec<LyapunovEntry>> {
        let fraction = self.cfg.analysis.fit_fraction;
        let z = self.cfg.analysis.z;
        let mut entries = Vec::new();
        match self.cfg.analysis.backend {
            Backend::Oracle => {
                for lambda in self.cfg.lambdas() {
                    let field = self.oracle_field(lambda, None)?;
                    let fit = oracle_rate(&field, fraction, z)?;
                    entries.push(LyapunovEntry { lambda, functional: "oracle_l2".into(), p: 2.0, fit });
                }
            }
            Backend::MonteCarlo => {
                let plan = SweepPlan::from_config(self.cfg, self.ctx.seed)?;
                let result = self.sweep(&plan, "cells")?;
                let window = late_window(&plan.observation_times, fraction)?;
                for (lambda, ensemble) in &result.cells {
                    for f in &plan.functionals {
                        let fit = lyapunov_exponent(&series(ensemble, *f), window, z)?;
                        entries.push(LyapunovEntry { lambda: *lambda, functional: f.label(), p: f.p(), fit });
                    }
                }
            }
        }
        Ok(entries)
    }

    fn lyapunov(&mut self) -> RunResult<Vec<LyapunovEntry>> {
        let entries = self.rate_fits()?;
        let plot: Vec<PlotRow> = entries
            .iter()
            .flat_map(|e| {
                let series = format!("{}_p{}_lambda{}", e.functional, e.p, e.lambda);
                e.fit.points.iter().map(move |pt| PlotRow { series: series.clone(), x: pt.x, y: pt.y, y_err: pt.sd })
            })
            .collect();
        self.bundle.write_json("lyapunov.json", &entries)?;
        self.bundle.write_plot("lyapunov_plot.csv", &plot)?;
        Ok(entries)
    }

    fn excitation(&mut self) -> RunResult<()> {
        #[derive(Serialize)]
        struct Report {
            backend: Backend,
            t: f64,
            p: f64,
            /// The index estimate ê_p.
            slope: f64,
            slope_ci: f64,
            quartic_preferred: bool,
            points: Vec<EnergyPoint>,
            fit: ExcitationFit,
        }
        let t = self.cfg.analysis.excitation_time;
        let z = self.cfg.analysis.z;
        let lambdas = self.cfg.lambdas();
        let mut series: Vec<(f64, Vec<EnergyPoint>)> = Vec::new();
        match self.cfg.analysis.backend {
            Backend::Oracle => {
                let mut pts = Vec::new();
                for &lambda in &lambdas {
                    let field = self.oracle_field(lambda, Some(t))?;
                    let k = field.time_index(t);
                    pts.push(EnergyPoint { lambda, log_energy: 0.5 * field.log_energy(k), log_energy_sd: None });
                }
                series.push((2.0, pts));
            }
            Backend::MonteCarlo => {
                let functionals: Vec<Functional> = self.cfg.moments.p.iter().map(|&p| Functional::LpNorm { p }).collect();
                let plan = SweepPlan {
                    lambdas: lambdas.clone(),
                    functionals: functionals.clone(),
                    observation_times: vec![t],
                    n_samples: self.cfg.run.n_samples,
                    seed: self.ctx.seed,
                };
                let result = self.sweep(&plan, "excitation_cells")?;
                for f in functionals {
                    let mut pts = Vec::new();
                    for (lambda, ensemble) in &result.cells {
                        let est = ensemble.find(f, t).ok_or_else(|| RunError::Numerical(format!("no estimate at t = {t}")))?;
                        let e = est.p_energy()?;
                        let sd = e.log_ci_half_width / Z_95;
                        pts.push(EnergyPoint { lambda: *lambda, log_energy: e.log_value, log_energy_sd: Some(sd) });
                    }
                    series.push((f.p(), pts));
                }
            }
        }
        let mut reports = Vec::new();
        let mut plot = Vec::new();
        for (p, points) in series {
            let fit = excitation_index(&points, z)?;
            for pt in &fit.index.points {
                plot.push(PlotRow { series: format!("p{p}"), x: pt.x, y: pt.y, y_err: pt.sd });
            }
            reports.push(Report {
                backend: self.cfg.analysis.backend,
                t,
                p,
                slope: fit.index.slope,
                slope_ci: fit.index.slope_ci,
                quartic_preferred: fit.quartic_preferred(),
                points,
                fit,
            });
        }
        self.bundle.write_json("excitation.json", &reports)?;
        self.bundle.write_plot("excitation_plot.csv", &plot)?;
        Ok(())
    }

    fn thresholds(&mut self) -> RunResult<()> {
        #[derive(Serialize)]
        struct Row {
            lambda: f64,
            functional: String,
            slope: f64,
            slope_ci: f64,
            significantly_negative: bool,
            significantly_positive: bool,
        }
        #[derive(Serialize)]
        struct Report {
            functional: String,
            thresholds: Thresholds,
            ordered: bool,
            two_sided: bool,
            rows: Vec<Row>,
        }
        #[derive(Serialize)]
        enum Calibration {
            #[serde(rename = "calibration")]
            Done(GrowthCalibration),
            #[serde(rename = "unavailable")]
            Unavailable(String),
        }
        let entries = self.rate_fits()?;
        let mut labels: Vec<String> = entries.iter().map(|e| format!("{}:{}", e.functional, e.p)).collect();
        labels.dedup();
        labels.sort();
        labels.dedup();
        let mut reports = Vec::new();
        for label in labels {
            let group: Vec<&LyapunovEntry> = entries.iter().filter(|e| format!("{}:{}", e.functional, e.p) == label).collect();
            let fits: Vec<(f64, RateFit)> = group.iter().map(|e| (e.lambda, e.fit.clone())).collect();
            let thresholds = threshold_scan(&fits);
            self.findings.check(thresholds.ordered(), format!("λ_L ≤ λ_U for {label}"));
            let rows = group
                .iter()
                .map(|e| Row {
                    lambda: e.lambda,
                    functional: e.functional.clone(),
                    slope: e.fit.slope,
                    slope_ci: e.fit.slope_ci,
                    significantly_negative: e.fit.significantly_negative(),
                    significantly_positive: e.fit.significantly_positive(),
                })
                .collect();
            reports.push(Report { functional: label, ordered: thresholds.ordered(), two_sided: thresholds.two_sided(), thresholds, rows });
        }
        self.bundle.write_json("thresholds.json", &reports)?;
        if self.cfg.analysis.backend == Backend::Oracle {
            let calibration = match self.growth_calibration() {
                Ok(c) => Calibration::Done(c),
                Err(e) => Calibration::Unavailable(e.to_string()),
            };
            self.bundle.write_json("growth_calibration.json", &calibration)?;
        }
        Ok(())
    }

    fn growth_calibration(&self) -> RunResult<GrowthCalibration> {
        let mut runs = Vec::new();
        for lambda in self.cfg.lambdas() {
            let field = self.oracle_field(lambda, None)?;
            runs.push((lambda, lower_bound_envelope(&field, self.cfg.analysis.margin)?));
        }
        Ok(calibrate_growth(&runs, self.cfg.model.sigma.lower(), self.cfg.analysis.fit_fraction)?)
    }

    fn grr_check(&mut self) -> RunResult<()> {
        #[derive(Serialize)]
        struct Row {
            sample: u64,
            b: f64,
            b_with_slack: f64,
            cutoff: f64,
            cutoff_sensitivity: f64,
            divergent: bool,
            max_ratio: f64,
            violations: usize,
            pairs: usize,
        }
        #[derive(Serialize)]
        struct GeneralRow {
            b: f64,
            x: f64,
            y: f64,
            quadrature: f64,
            closed_form: f64,
            relative_error: f64,
        }
        let params = self.cfg.grr_params()?;
        let lambda = self.cfg.lambdas()[0];
        let mut pc = self.cfg.path_config(lambda, self.ctx.seed)?;
        pc.observation_times = vec![self.cfg.grid.horizon];
        let paths = run_paths(&pc, self.cfg.grr.n_paths)?;
        let mut rows = Vec::new();
        for (s, path) in paths.iter().enumerate() {
            let snap = path.snapshots.last().expect("one observation time");
            let profile = Profile::from_snapshot(snap, path.boundary)?;
            let value = grr_functional(&profile, &params)?;
            let report = holder_bound_check(&profile, &params, value.with_slack())?;
            rows.push(Row {
                sample: s as u64,
                b: value.extrapolated,
                b_with_slack: value.with_slack(),
                cutoff: value.cutoff,
                cutoff_sensitivity: value.sensitivity,
                divergent: value.divergent,
                max_ratio: report.max_ratio,
                violations: report.violations,
                pairs: report.pairs,
            });
        }
        let violations: usize = rows.iter().map(|r| r.violations).sum();
        let divergent = rows.iter().filter(|r| r.divergent).count();
        self.findings.check(violations == 0, format!("Hölder bound: {violations} violating pairs"));
        self.findings.check(divergent == 0, format!("GRR functional divergent on {divergent} paths"));
        let (big_phi, phi) = power_law_pair(&params);
        let b = rows.first().map_or(1.0, |r| r.b_with_slack);
        let mut general = Vec::new();
        for (x, y) in [(0.1, 0.2), (0.25, 0.75), (0.0, 1.0), (0.5, 0.5 + 1e-3)] {
            let q = grr_general(&big_phi, &phi, b, x, y)?;
            let closed = params.holder_bound(b, (y - x).abs());
            let relative_error = if closed > 0.0 { (q.value - closed).abs() / closed } else { q.value.abs() };
            self.findings.check(relative_error <= 1e-8 && !q.divergent, format!("general GRR form at ({x}, {y})"));
            general.push(GeneralRow { b, x, y, quadrature: q.value, closed_form: closed, relative_error });
        }
        self.bundle.write_csv("grr.csv", &rows)?;
        self.bundle.write_csv("grr_general.csv", &general)?;
        Ok(())
    }

    fn verify_bounds(&mut self) -> RunResult<()> {
        #[derive(Serialize)]
        struct Report {
            negative: IntegralBoundReport,
            threshold: IntegralBoundReport,
            negative_exponents_within_10pct: bool,
            threshold_exponents_within_10pct: bool,
        }
        let b = &self.cfg.bounds;
        let kernel = self.cfg.kernel_spec(Boundary::Dirichlet)?;
        let res = self.cfg.integral_resolution();
        let negative = verify_integral_bounds(&kernel, b.alpha, &b.negative_betas, b.t_max_negative, b.x_points, res, b.levels)?;
        let threshold_value = (2.0 - b.alpha) * kernel.spectral_gap();
        let betas: Vec<f64> = b.threshold_gaps.iter().map(|g| threshold_value * (1.0 - g)).collect();
        let threshold = verify_integral_bounds(&kernel, b.alpha, &betas, b.t_max_threshold, b.x_points, res, b.levels)?;
        for (name, r) in [("β < 0", &negative), ("near threshold", &threshold)] {
            self.findings.check(r.all_finite(), format!("integral bound {name}: finite"));
            self.findings.check(
                r.refinement_change < 0.02,
                format!("integral bound {name}: implied constant moved {:.3e} at the last refinement", r.refinement_change),
            );
        }
        let mut plot = Vec::new();
        for row in &negative.rows {
            plot.push(PlotRow { series: "negative".into(), x: -row.beta, y: row.sup, y_err: None });
        }
        for row in &threshold.rows {
            plot.push(PlotRow { series: "threshold".into(), x: threshold_value - row.beta, y: row.sup, y_err: None });
        }
        let report = Report {
            negative_exponents_within_10pct: negative.exponents_match(0.1),
            threshold_exponents_within_10pct: threshold.exponents_match(0.1),
            negative,
            threshold,
        };
        self.bundle.write_json("bounds.json", &report)?;
        self.bundle.write_plot("bounds_plot.csv", &plot)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LyapunovEntry {
    pub lambda: f64,
    pub functional: String,
    pub p: f64,
    pub fit: RateFit,
}

/// Estimates of one functional in time order.
pub fn series(ensemble: &EnsembleMoments, f: Functional) -> Vec<sheat_core::stats::MomentEstimate> {
    let mut s: Vec<_> = ensemble.estimates.iter().filter(|e| e.functional() == f).copied().collect();
    s.sort_by(|a, b| a.t().total_cmp(&b.t()));
    s
}

/// Fit of ln ∫m dx against t over the late window; t = 0 is excluded.
pub fn oracle_rate(field: &MomentField, fraction: f64, z: f64) -> RunResult<RateFit> {
    let points: Vec<FitPoint> = field
        .times
        .iter()
        .enumerate()
        .skip(1)
        .map(|(k, &t)| FitPoint::new(t, field.log_energy(k)))
        .collect();
    let xs: Vec<f64> = points.iter().map(|p| p.x).collect();
    let window = late_window(&xs, fraction)?;
    Ok(fit_rate(Abscissa::Time, &points, window, z)?)
}
