//! One function per subcommand. Each writes its artifacts and records its checks.

use anyhow::{bail, Result};
use marcus_nls::control::{
    continuity_sequence, controlled_convergence_experiment, instanton_search, q_cost,
    rare_event_mc, skeleton_continuity_experiment, Control, Observable, RateReport, RateStatus,
    Target,
};
use marcus_nls::dynamics::{
    e_distance, solve_controlled, solve_nls, solve_skeleton, solve_skeleton_yosida,
    solve_stochastic, Trajectory,
};
use marcus_nls::noise::{marcus_flow, marcus_flow_ode_oracle, LevyMeasure};
use marcus_nls::rng::{stream, tagged_stream};
use marcus_nls::wong_zakai::{
    change_of_coordinates_check, linear_single_jump_fixture, wong_zakai_statistics,
    wong_zakai_table, Diffeomorphism, DrivingPath, FiniteSde,
};
use num_complex::Complex64;
use rand::Rng;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::output::{ArtifactDir, CheckRecord};

const CONSERVATION_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Simulate,
    Skeleton,
    Yosida,
    Convergence,
    Continuity,
    Instanton,
    RareEvent,
    WongZakai,
    Check,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Simulate => "simulate",
            Subcommand::Skeleton => "skeleton",
            Subcommand::Yosida => "yosida",
            Subcommand::Convergence => "convergence",
            Subcommand::Continuity => "continuity",
            Subcommand::Instanton => "instanton",
            Subcommand::RareEvent => "rare-event",
            Subcommand::WongZakai => "wongzakai",
            Subcommand::Check => "check",
        }
    }
}

pub fn run(cmd: Subcommand, cfg: &ExperimentConfig, out: &mut ArtifactDir) -> Result<()> {
    out.write_bytes("config.toml", toml::to_string(cfg)?.as_bytes())?;
    match cmd {
        Subcommand::Simulate => simulate(cfg, out),
        Subcommand::Skeleton => skeleton(cfg, out),
        Subcommand::Yosida => yosida(cfg, out),
        Subcommand::Convergence => convergence(cfg, out),
        Subcommand::Continuity => continuity(cfg, out),
        Subcommand::Instanton => instanton(cfg, out),
        Subcommand::RareEvent => rare_event(cfg, out),
        Subcommand::WongZakai => wongzakai(cfg, out),
        Subcommand::Check => check(cfg, out),
    }
}

fn record(out: &mut ArtifactDir, name: &str, pass: bool, detail: String) {
    out.checks.push(CheckRecord {
        name: name.to_string(),
        pass,
        detail,
    });
}

#[derive(Serialize)]
struct TrajectoryRow {
    t: f64,
    l2_norm: f64,
    lr_norm: f64,
    post_jump: bool,
}

fn write_trajectory(
    cfg: &ExperimentConfig,
    out: &mut ArtifactDir,
    traj: &Trajectory,
) -> Result<()> {
    let (_, r) = cfg.exponents()?;
    let rows = traj
        .times
        .iter()
        .zip(&traj.snapshots)
        .map(|(t, s)| {
            Ok(TrajectoryRow {
                t: *t,
                l2_norm: s.l2_norm(),
                lr_norm: s.lr_norm(r)?,
                post_jump: traj.is_jump_time(*t),
            })
        })
        .collect::<marcus_nls::Result<Vec<_>>>()?;
    out.write_csv("trajectory.csv", &rows)?;
    out.write_snapshots("snapshots", traj, cfg.solver.snapshot_dtype)
}

fn write_jump_path(out: &mut ArtifactDir, m: usize, traj: &Trajectory) -> Result<()> {
    let mut header = vec!["t".to_string()];
    header.extend((1..=m).map(|j| format!("z_{j}")));
    header.push("cell".into());
    let rows: Vec<Vec<String>> = traj
        .jumps
        .iter()
        .map(|e| {
            let mut row = vec![e.time.to_string()];
            row.extend(e.mark.iter().map(|z| z.to_string()));
            row.push(e.cell.to_string());
            row
        })
        .collect();
    out.write_table("path.csv", &header, &rows)
}

#[derive(Serialize)]
struct ControlRow {
    bin: usize,
    t_lo: f64,
    t_hi: f64,
    cell: usize,
    psi: f64,
}

fn write_control(out: &mut ArtifactDir, name: &str, psi: &Control) -> Result<()> {
    let mut rows = Vec::with_capacity(psi.values().len());
    for b in 0..psi.num_bins() {
        for c in 0..psi.num_cells() {
            rows.push(ControlRow {
                bin: b,
                t_lo: psi.edges()[b],
                t_hi: psi.edges()[b + 1],
                cell: c,
                psi: psi.value(b, c),
            });
        }
    }
    out.write_csv(name, &rows)
}

fn conservation_check(out: &mut ArtifactDir, name: &str, traj: &Trajectory, reference: f64) -> f64 {
    let drift = traj.max_relative_norm_drift(reference);
    record(
        out,
        name,
        drift <= CONSERVATION_TOL,
        format!("max relative L2 drift {drift:.3e} (tolerance {CONSERVATION_TOL:e})"),
    );
    drift
}

#[derive(Serialize)]
struct SimulateSummary {
    eps: f64,
    jumps: usize,
    initial_norm: f64,
    max_relative_norm_drift: f64,
    stiffness: f64,
}

fn simulate(cfg: &ExperimentConfig, out: &mut ArtifactDir) -> Result<()> {
    let model = cfg.model()?;
    let u0 = cfg.initial()?;
    let eps = cfg.experiment.eps[0];
    let traj = solve_stochastic(
        &u0,
        eps,
        &model,
        cfg.solver.horizon,
        &mut stream(cfg.seed, 0),
        &cfg.solver(),
    )?;
    write_trajectory(cfg, out, &traj)?;
    write_jump_path(out, model.measure.m(), &traj)?;
    let drift = conservation_check(out, "conservation", &traj, u0.l2_norm());
    out.write_json(
        "summary.json",
        &SimulateSummary {
            eps,
            jumps: traj.jumps.len(),
            initial_norm: u0.l2_norm(),
            max_relative_norm_drift: drift,
            stiffness: traj.stiffness,
        },
    )
}

#[derive(Serialize)]
struct SkeletonSummary {
    q_cost: f64,
    initial_norm: f64,
    max_relative_norm_drift: f64,
}

fn skeleton(cfg: &ExperimentConfig, out: &mut ArtifactDir) -> Result<()> {
    let model = cfg.model()?;
    let u0 = cfg.initial()?;
    let psi = cfg.control(model.measure.num_cells())?;
    let traj = solve_skeleton(&u0, &psi, &model, cfg.solver.horizon, &cfg.solver())?;
    write_trajectory(cfg, out, &traj)?;
    write_control(out, "control.csv", &psi)?;
    let drift = conservation_check(out, "conservation", &traj, u0.l2_norm());
    out.write_json(
        "summary.json",
        &SkeletonSummary {
            q_cost: q_cost(&psi, &model.measure)?,
            initial_norm: u0.l2_norm(),
            max_relative_norm_drift: drift,
        },
    )
}

#[derive(Serialize)]
struct YosidaRow {
    mu: f64,
    e_distance: f64,
    sup_l2: f64,
    time_lr: f64,
    norm_drift: f64,
}

fn yosida(cfg: &ExperimentConfig, out: &mut ArtifactDir) -> Result<()> {
    let model = cfg.model()?;
    let u0 = cfg.initial()?;
    let psi = cfg.control(model.measure.num_cells())?;
    let solver = cfg.solver();
    let (p, r) = cfg.exponents()?;
    let horizon = cfg.solver.horizon;
    let base = solve_skeleton(&u0, &psi, &model, horizon, &solver)?;
    let mut rows = Vec::new();
    for &mu in &cfg.solver.mu {
        let y = solve_skeleton_yosida(&u0, &psi, mu, &model, horizon, &solver)?;
        let d = e_distance(&y, &base, p, r)?;
        rows.push(YosidaRow {
            mu,
            e_distance: d.e_norm(),
            sup_l2: d.sup_l2,
            time_lr: d.time_lr,
            norm_drift: y.max_relative_norm_drift(u0.yosida_apply(mu)?.l2_norm()),
        });
    }
    out.write_csv("yosida.csv", &rows)?;
    let mut sorted: Vec<&YosidaRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.mu.total_cmp(&b.mu));
    let decreasing = sorted.windows(2).all(|w| w[1].e_distance < w[0].e_distance);
    record(
        out,
        "distance decreasing in mu",
        decreasing,
        sorted
            .iter()
            .map(|r| format!("{:e}: {:.3e}", r.mu, r.e_distance))
            .collect::<Vec<_>>()
            .join(", "),
    );
    let drift = rows.iter().map(|r| r.norm_drift).fold(0.0, f64::max);
    record(
        out,
        "yosida norm conservation",
        drift <= 1e-6,
        format!("max relative drift {drift:.3e}"),
    );
    Ok(())
}

#[derive(Serialize)]
struct CostSummary {
    q_cost: f64,
    delta: f64,
    samples: usize,
}

fn convergence(cfg: &ExperimentConfig, out: &mut ArtifactDir) -> Result<()> {
    let model = cfg.model()?;
    let u0 = cfg.initial()?;
    let psi = cfg.control(model.measure.num_cells())?;
    let (p, r) = cfg.exponents()?;
    let e = &cfg.experiment;
    let mut eps = e.eps.clone();
    eps.sort_by(|a, b| b.total_cmp(a));
    let rows = controlled_convergence_experiment(
        &psi,
        &eps,
        e.delta,
        e.samples,
        &u0,
        &model,
        cfg.solver.horizon,
        &cfg.solver(),
        cfg.seed,
        p,
        r,
    )?;
    out.write_csv("convergence.csv", &rows)?;
    write_control(out, "control.csv", &psi)?;
    let trend = rows.windows(2).all(|w| w[1].p_hat <= w[0].p_hat);
    record(
        out,
        "exceedance non-increasing as eps decreases",
        trend,
        rows.iter()
            .map(|r| format!("{}: {:.3}", r.eps, r.p_hat))
            .collect::<Vec<_>>()
            .join(", "),
    );
    out.write_json(
        "summary.json",
        &CostSummary {
            q_cost: q_cost(&psi, &model.measure)?,
            delta: e.delta,
            samples: e.samples,
        },
    )
}

fn continuity(cfg: &ExperimentConfig, out: &mut ArtifactDir) -> Result<()> {
    let model = cfg.model()?;
    let u0 = cfg.initial()?;
    let psi0 = cfg.control(model.measure.num_cells())?;
    let (p, r) = cfg.exponents()?;
    let seq = continuity_sequence(&psi0, &cfg.experiment.continuity_ns)?;
    let table = skeleton_continuity_experiment(
        &seq,
        &psi0,
        &u0,
        &model,
        cfg.solver.horizon,
        &cfg.solver(),
        p,
        r,
    )?;
    out.write_csv("continuity.csv", &table.rows)?;
    out.write_json("continuity.json", &table)?;
    let d: Vec<f64> = table.rows.iter().map(|r| r.distance).collect();
    record(
        out,
        "distance strictly decreasing",
        d.windows(2).all(|w| w[1] < w[0]),
        format!("first {:.3e}, last {:.3e}", d[0], d[d.len() - 1]),
    );
    Ok(())
}

fn instanton_target(cfg: &ExperimentConfig) -> Result<Target> {
    let spec = cfg.spec()?;
    let observable =
        Observable::terminal_distance(&cfg.initial()?, &spec, cfg.solver.horizon, &cfg.solver())?;
    Ok(Target {
        observable,
        level: cfg.experiment.level,
    })
}

fn write_report(out: &mut ArtifactDir, stem: &str, report: &RateReport) -> Result<()> {
    out.write_json(&format!("{stem}.json"), report)?;
    out.write_csv(&format!("{stem}_trace.csv"), &report.trace)?;
    write_control(out, &format!("{stem}_control.csv"), &report.control)
}

fn report_checks(out: &mut ArtifactDir, stem: &str, report: &RateReport) {
    let monotone = report
        .trace
        .windows(2)
        .all(|w| w[0].round != w[1].round || w[1].objective <= w[0].objective + 1e-12);
    record(
        out,
        &format!("{stem}: trace non-increasing per round"),
        monotone,
        format!("{} entries", report.trace.len()),
    );
    record(
        out,
        &format!("{stem}: feasible"),
        report.status == RateStatus::Feasible,
        format!(
            "status {:?}, Q* {:?}, F {:.6} vs level {}",
            report.status, report.q_star, report.observable_value, report.level
        ),
    );
}

fn instanton(cfg: &ExperimentConfig, out: &mut ArtifactDir) -> Result<()> {
    let model = cfg.model()?;
    let u0 = cfg.initial()?;
    let target = instanton_target(cfg)?;
    let solver = cfg.solver();
    let opts = cfg.instanton();
    let horizon = cfg.solver.horizon;
    let init = Control::constant(horizon, cfg.control.bins, model.measure.num_cells(), 1.0)?;
    let coarse = instanton_search(&target, &u0, &model, horizon, &solver, &init, &opts)?;
    write_report(out, "instanton", &coarse)?;
    report_checks(out, "instanton", &coarse);
    if cfg.experiment.refine > 1 {
        let fine_init = coarse.control.refine_time(cfg.experiment.refine)?;
        let fine = instanton_search(&target, &u0, &model, horizon, &solver, &fine_init, &opts)?;
        write_report(out, "instanton_refined", &fine)?;
        report_checks(out, "instanton_refined", &fine);
        if let (Some(a), Some(b)) = (coarse.q_star, fine.q_star) {
            record(
                out,
                "refinement does not increase Q*",
                b <= a + 1e-6,
                format!("{a:.6} -> {b:.6}"),
            );
        }
    }
    Ok(())
}

fn rare_event(cfg: &ExperimentConfig, out: &mut ArtifactDir) -> Result<()> {
    let model = cfg.model()?;
    let u0 = cfg.initial()?;
    let target = instanton_target(cfg)?;
    let e = &cfg.experiment;
    let rows = rare_event_mc(
        &e.rare_event_eps,
        &target,
        e.rare_event_samples,
        &u0,
        &model,
        cfg.solver.horizon,
        &cfg.solver(),
        cfg.seed,
    )?;
    out.write_csv("rare_event.csv", &rows)?;
    let resolved = rows.iter().filter(|r| !r.unresolved).count();
    record(
        out,
        "resolved noise levels",
        resolved > 0,
        format!("{resolved} of {} rows resolved", rows.len()),
    );
    Ok(())
}

#[derive(Serialize)]
struct CoordinateRow {
    fixture: &'static str,
    map: &'static str,
    deviation: f64,
}

fn wongzakai(cfg: &ExperimentConfig, out: &mut ArtifactDir) -> Result<()> {
    // the fixture's single jump sits at t = 1/2, so the horizon is fixed at 1
    let horizon = 1.0;
    let mcfg = cfg.marcus_solver();
    let (sde, path, measure) = linear_single_jump_fixture();
    let mut meshes: Vec<f64> = cfg
        .experiment
        .meshes
        .iter()
        .map(|k| horizon / *k as f64)
        .collect();
    meshes.sort_by(|a, b| b.total_cmp(a));
    let rows = wong_zakai_table(&sde, &path, &meshes, horizon, &mcfg)?;
    out.write_csv("wong_zakai.csv", &rows)?;
    let stats = wong_zakai_statistics(
        &sde,
        &measure,
        &meshes,
        horizon,
        cfg.experiment.wz_paths,
        cfg.seed,
        &mcfg,
    )?;
    out.write_csv("wong_zakai_statistics.csv", &stats)?;
    record(
        out,
        "terminal error strictly decreasing",
        rows.windows(2)
            .all(|w| w[1].uniform_error < w[0].uniform_error),
        rows.iter()
            .map(|r| format!("{:.3e}", r.uniform_error))
            .collect::<Vec<_>>()
            .join(", "),
    );
    record(
        out,
        "closer to Marcus than to Ito for h <= T/64",
        rows.iter()
            .filter(|r| r.h <= horizon / 64.0)
            .all(|r| r.uniform_error < r.ito_distance),
        String::new(),
    );

    let rotation = FiniteSde::rotation(vec![1.0], [0.6, -0.3])?;
    let marks = LevyMeasure::discrete(vec![vec![0.8], vec![-0.4]], vec![2.0, 1.0])?;
    let rot_path = DrivingPath::sample(&marks, horizon, &mut stream(cfg.seed, 1))?;
    let coords = vec![
        CoordinateRow {
            fixture: "linear",
            map: "identity",
            deviation: change_of_coordinates_check(
                &sde,
                &Diffeomorphism::identity(),
                &path,
                horizon,
                &mcfg,
            )?,
        },
        CoordinateRow {
            fixture: "linear",
            map: "linear",
            deviation: change_of_coordinates_check(
                &sde,
                &Diffeomorphism::linear_2x2([[2.0, 1.0], [-0.5, 1.5]])?,
                &path,
                horizon,
                &mcfg,
            )?,
        },
        CoordinateRow {
            fixture: "rotation",
            map: "cubic",
            deviation: change_of_coordinates_check(
                &rotation,
                &Diffeomorphism::cubic(),
                &rot_path,
                horizon,
                &mcfg,
            )?,
        },
    ];
    out.write_csv("coordinates.csv", &coords)?;
    let worst = coords.iter().map(|c| c.deviation).fold(0.0, f64::max);
    record(
        out,
        "change of coordinates",
        worst <= 1e-6,
        format!("max deviation {worst:.3e}"),
    );
    Ok(())
}

#[derive(Serialize)]
struct CheckRow {
    seed: u64,
    solver: &'static str,
    jumps: usize,
    drift: f64,
}

/// Conservation over several seeds plus cheap closed-form checks.
fn check(cfg: &ExperimentConfig, out: &mut ArtifactDir) -> Result<()> {
    let model = cfg.model()?;
    let u0 = cfg.initial()?;
    let psi = cfg.control(model.measure.num_cells())?;
    let solver = cfg.solver();
    let horizon = cfg.solver.horizon;
    let eps = cfg.experiment.eps[0];
    let norm = u0.l2_norm();
    let mut rows = Vec::new();
    for seed in 0..cfg.experiment.check_seeds as u64 {
        let runs = [
            ("nls", solve_nls(&u0, &model.spec, horizon, &solver)?),
            (
                "skeleton",
                solve_skeleton(&u0, &psi, &model, horizon, &solver)?,
            ),
            (
                "stochastic",
                solve_stochastic(
                    &u0,
                    eps,
                    &model,
                    horizon,
                    &mut tagged_stream(cfg.seed, 0, seed),
                    &solver,
                )?,
            ),
            (
                "controlled",
                solve_controlled(
                    &u0,
                    eps,
                    &psi,
                    &model,
                    horizon,
                    &mut tagged_stream(cfg.seed, 1, seed),
                    &solver,
                )?,
            ),
        ];
        for (name, traj) in runs {
            rows.push(CheckRow {
                seed,
                solver: name,
                jumps: traj.jumps.len(),
                drift: traj.max_relative_norm_drift(norm),
            });
        }
    }
    out.write_csv("conservation.csv", &rows)?;
    let worst = rows.iter().map(|r| r.drift).fold(0.0, f64::max);
    record(
        out,
        "conservation",
        worst <= CONSERVATION_TOL,
        format!("max relative L2 drift {worst:.3e} over {} runs", rows.len()),
    );

    let unit = Control::constant(horizon, cfg.control.bins, model.measure.num_cells(), 1.0)?;
    let zero = Control::constant(horizon, cfg.control.bins, model.measure.num_cells(), 0.0)?;
    let q0 = q_cost(&unit, &model.measure)?;
    let qz = q_cost(&zero, &model.measure)?;
    let mass = horizon * model.measure.total_mass();
    record(
        out,
        "entropy cost closed forms",
        q0.abs() <= 1e-12 && (qz - mass).abs() <= 1e-12 * mass.max(1.0),
        format!("Q(1) = {q0:e}, Q(0) = {qz} vs T nu(B) = {mass}"),
    );

    let mut rng = stream(cfg.seed, 2);
    let mut flow_err = 0.0f64;
    for _ in 0..1000 {
        let y = Complex64::from_polar(
            rng.random::<f64>().sqrt(),
            rng.random_range(0.0..std::f64::consts::TAU),
        );
        let (_, z) = model.measure.sample_mark(&mut rng);
        let e = rng.random_range(1e-3..=1.0);
        let oracle = marcus_flow_ode_oracle(y, &z, e, &model.family, 64)?;
        flow_err = flow_err.max((oracle - marcus_flow(y, &z, e, &model.family)).norm());
    }
    record(
        out,
        "marcus flow closed form",
        flow_err <= 1e-10,
        format!("max error {flow_err:.3e} over 1000 samples"),
    );

    let report = model.family.assumption_check(1e4, 2000)?;
    record(
        out,
        "noise coefficient assumptions",
        report.passed(),
        format!(
            "L1 {:.4}, L2 {:.4}; {}",
            report.l1,
            report.l2,
            report.violations.join("; ")
        ),
    );
    out.write_json("assumptions.json", &report)?;
    Ok(())
}

/// Fails with the list of failed checks, if any.
pub fn verdict(out: &ArtifactDir) -> Result<()> {
    let failed: Vec<&str> = out
        .checks
        .iter()
        .filter(|c| !c.pass)
        .map(|c| c.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        bail!("failed checks: {}", failed.join(", "))
    }
}
