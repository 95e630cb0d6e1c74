use crate::manifest::RunManifest;
use crate::{Cli, Command, Failure, PlanMode};
use csda_core::dose_planner::{dose, dvh_fraction, inflow_trace, Control};
use csda_core::hypersingular::kappa_consistency_report;
use csda_core::io;
use csda_core::scenario::{Scenario, ScenarioParams};
use csda_core::solver::{solve_adjoint, solve_forward};
use csda_core::Error;
use std::path::Path;

/// Hypothesis samples drawn by `validate`; other commands draw fewer.
const VALIDATE_SAMPLES: usize = 200;
const PRECHECK_SAMPLES: usize = 20;

fn command_name(c: Command) -> String {
    match c {
        Command::Validate => "validate".into(),
        Command::Forward => "forward".into(),
        Command::Adjoint => "adjoint".into(),
        Command::Plan { mode } => format!("plan --mode={}", serde_json::to_value(mode).unwrap().as_str().unwrap()),
        Command::KappaStudy => "kappa-study".into(),
    }
}

fn load(cli: &Cli) -> Result<ScenarioParams, Error> {
    let mut p = match &cli.config {
        Some(path) => ScenarioParams::load(path)?,
        None => ScenarioParams::default(),
    };
    if let Some(s) = cli.seed {
        p.seed = s;
    }
    Ok(p)
}

pub fn run(cli: &Cli) -> Result<(), Failure> {
    let params = load(cli);
    let mut m = RunManifest::new(command_name(cli.command), cli.config.as_deref(), cli.threads, params.as_ref().ok().cloned());
    let outcome = params.map_err(Failure::from).and_then(|p| dispatch(cli, &p, &mut m));
    match &outcome {
        Ok(()) => m.finish("ok", 0),
        Err(f) => m.finish(&format!("failed: {}", f.message()), f.code()),
    }
    // A failure to write the manifest outranks the command's own status.
    io::write_json_atomic(&cli.out.join("manifest.json"), &m).map_err(|e| Failure::Io(e.to_string()))?;
    outcome
}

fn dispatch(cli: &Cli, params: &ScenarioParams, m: &mut RunManifest) -> Result<(), Failure> {
    if let Command::KappaStudy = cli.command {
        return kappa_study(&cli.out, params, m);
    }
    let scenario = m.stage("build", || Scenario::build(params))?;
    let n = 3 * scenario.op.layout().block();
    m.result("unknowns", n);
    let samples = if matches!(cli.command, Command::Validate) {
        VALIDATE_SAMPLES
    } else {
        PRECHECK_SAMPLES
    };
    let report = m.stage("validate", || scenario.hypothesis_report(samples));
    let failure = report
        .first_failure()
        .map(|c| format!("hypothesis violated: {} (value {:.6e}, bound {:.6e})", c.name, c.value, c.bound));
    for c in &report.checks {
        log::info!("{} {}: {:.6e}", if c.passed { "pass" } else { "FAIL" }, c.name, c.value);
    }
    m.validation = Some(report);
    if let Some(f) = failure {
        return Err(Failure::Validation(f));
    }
    match cli.command {
        Command::Validate => Ok(()),
        Command::Forward => forward(&cli.out, &scenario, m),
        Command::Adjoint => adjoint(&cli.out, &scenario, m),
        Command::Plan { mode } => plan(&cli.out, &scenario, mode, m),
        Command::KappaStudy => unreachable!(),
    }
}

fn forward(out: &Path, s: &Scenario, m: &mut RunManifest) -> Result<(), Failure> {
    let (psi, rep) = m.stage("solve", || solve_forward(s.op.clone(), &s.volume_source(), &s.beam(), &s.params.solver))?;
    let d = dose(&s.space, &psi, &s.stopping)?;
    io::write_species_field(&out.join("flux.f64"), &s.space, &psi, "forward flux")?;
    m.artifact("flux.f64");
    io::write_volume(&out.join("dose.f64"), &s.space, &d, "dose")?;
    m.artifact("dose.f64");
    write_dvh(out, s, &d, m)?;
    m.result("max_dose", d.iter().cloned().fold(0.0, f64::max));
    m.result("solve", rep);
    Ok(())
}

fn adjoint(out: &Path, s: &Scenario, m: &mut RunManifest) -> Result<(), Failure> {
    let src = s.detector_source()?;
    let (psi, rep) = m.stage("solve", || solve_adjoint(s.op.clone(), &src, &s.space.zero_boundary(), &s.params.solver))?;
    io::write_species_field(&out.join("adjoint_flux.f64"), &s.space, &psi, "adjoint flux (target dose importance)")?;
    m.artifact("adjoint_flux.f64");
    // Importance of unit inflow: the adjoint trace on the inflow boundary.
    let trace = inflow_trace(&s.space, &psi)?;
    io::write_boundary_field(&out.join("inflow_importance.f64"), &s.space, &trace, "adjoint inflow trace")?;
    m.artifact("inflow_importance.f64");
    m.result("solve", rep);
    Ok(())
}

fn plan(out: &Path, s: &Scenario, mode: PlanMode, m: &mut RunManifest) -> Result<(), Failure> {
    let p = s.planner()?;
    let fp = s.params.plan.fixed_point();
    let plan = m.stage("optimize", || match mode {
        PlanMode::External => p.optimize_external(None, &fp),
        PlanMode::Internal => p.optimize_internal(None, &fp),
        PlanMode::Linear => p.optimize_linear_unconstrained(None, &fp),
    })?;
    match &plan.control {
        Control::External(g) => io::write_boundary_field(&out.join("control.f64"), &s.space, g, "inflow control")?,
        Control::Internal(f) => io::write_species_field(&out.join("control.f64"), &s.space, f, "volumetric control")?,
    }
    m.artifact("control.f64");
    if mode == PlanMode::Linear {
        if let Control::External(g) = p.exported_initial_point(&plan)? {
            io::write_boundary_field(&out.join("initial_point.f64"), &s.space, &g, "projected initial point")?;
            m.artifact("initial_point.f64");
        }
    }
    io::write_volume(&out.join("dose.f64"), &s.space, &plan.dose, "dose")?;
    m.artifact("dose.f64");
    write_dvh(out, s, &plan.dose, m)?;

    let full = p.objective_full(&plan)?;
    let kkt = plan.kkt.unwrap_or_default();
    let b = plan.breakdown;
    io::write_named_values(
        &out.join("objective.csv"),
        &[
            ("initializer_target", b.target),
            ("initializer_critical", b.critical),
            ("initializer_normal", b.normal),
            ("initializer_stabilizer", b.stabilizer),
            ("initializer_total", b.total),
            ("full_target", full.target),
            ("full_critical", full.critical),
            ("full_normal", full.normal),
            ("full_dose_volume", full.dose_volume),
            ("full_admissibility", full.admissibility),
            ("full_stabilizer", full.stabilizer),
            ("full_total", full.total),
        ],
    )?;
    m.artifact("objective.csv");
    io::write_named_values(
        &out.join("kkt.csv"),
        &[
            ("stationarity", kkt.stationarity),
            ("complementarity", kkt.complementarity),
            ("pointwise_complementarity", kkt.pointwise_complementarity),
            ("primal_feasibility", kkt.primal_feasibility),
            ("scale", kkt.scale),
        ],
    )?;
    m.artifact("kkt.csv");
    let rows: Vec<Vec<f64>> = plan.log.iter().map(|r| vec![r.iteration as f64, r.objective, r.step, r.theta]).collect();
    io::write_table(&out.join("iterations.csv"), &["iteration", "objective", "step", "theta"], &rows)?;
    m.artifact("iterations.csv");
    m.result("mode", mode);
    m.result("iterations", plan.log.len());
    m.result("objective_initializer", b);
    m.result("objective_full", full);
    m.result("kkt", kkt);
    Ok(())
}

fn write_dvh(out: &Path, s: &Scenario, d: &[f64], m: &mut RunManifest) -> Result<(), Error> {
    let masks = s.masks();
    let names = ["target", "critical", "normal"];
    let used: Vec<usize> = (0..3).filter(|r| masks[*r].iter().any(|x| *x)).collect();
    let top = d.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let n = s.params.plan.dvh_points.max(2);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let level = top * i as f64 / (n - 1) as f64;
        let mut row = vec![level];
        for r in &used {
            row.push(dvh_fraction(&s.space, d, &masks[*r], level)?);
        }
        rows.push(row);
    }
    let mut header = vec!["dose"];
    header.extend(used.iter().map(|r| names[*r]));
    io::write_table(&out.join("dvh.csv"), &header, &rows)?;
    m.artifact("dvh.csv");
    let dc = &s.params.prescription;
    if masks[1].iter().any(|x| *x) {
        m.result("critical_fraction_above_dv_level", dvh_fraction(&s.space, d, &masks[1], dc.dv_level)?);
    }
    Ok(())
}

fn kappa_study(out: &Path, params: &ScenarioParams, m: &mut RunManifest) -> Result<(), Failure> {
    let k = &params.kappa_study;
    let cs = match &params.physics.material_table {
        Some(p) => csda_core::xsec::CrossSection::Table(io::read_cross_section_table(p)?),
        None => csda_core::xsec::CrossSection::Moller,
    };
    let dirs = csda_core::SphereGrid::build(k.direction_level).nodes;
    let psi = |_: csda_core::linalg::Vec3, e: f64| e * e;
    let rows = m.stage("kappa", || {
        kappa_consistency_report(&cs, params.physics.sigma0, &psi, &k.energies, &dirs, &k.kappas)
    })?;
    let table: Vec<Vec<f64>> = rows.iter().map(|r| vec![r.kappa, r.discrepancy, r.exact_max]).collect();
    io::write_table(&out.join("kappa.csv"), &["kappa", "discrepancy", "exact_max"], &table)?;
    m.artifact("kappa.csv");
    let decreasing = rows.windows(2).all(|w| w[1].discrepancy < w[0].discrepancy);
    m.result("rows", &rows);
    m.result("strictly_decreasing", decreasing);
    Ok(())
}
