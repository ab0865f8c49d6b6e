//! Jump-adapted Strang splitting for the deterministic, skeleton,
//! Yosida-regularized, stochastic and controlled equations.

use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coefficients::{NonlinearitySpec, SaturableFamily};
use crate::control::Control;
use crate::error::{invalid, Error, Result};
use crate::noise::{marcus_flow, sample_controlled_prm, sample_prm, JumpEvent, LevyMeasure};
use crate::spectral::{
    mixed_norm, ComplexField, FftWorkspace, NormReport, Representation, SpectralGrid,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Base step.
    pub dt: f64,
    /// A snapshot is stored every `stride` base steps (and after every jump).
    pub stride: usize,
    /// Apply the 2/3 filter after each nonlinear substep. Breaks exact L² conservation.
    pub dealias: bool,
    /// RK4 substeps per base step for the Yosida drift.
    pub yosida_substeps: usize,
    /// Abort when the L^r norm of a snapshot exceeds this value.
    pub lr_guard: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            stride: 10,
            dealias: false,
            yosida_substeps: 1,
            lr_guard: 1e6,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(invalid("dt", format!("must be positive, got {}", self.dt)));
        }
        if self.stride == 0 {
            return Err(invalid("stride", "must be at least 1"));
        }
        if self.yosida_substeps == 0 {
            return Err(invalid("yosida_substeps", "must be at least 1"));
        }
        if !(self.lr_guard > 0.0) {
            return Err(invalid("lr_guard", "must be positive"));
        }
        Ok(())
    }

    /// `dt · max |k|²`, the phase advanced by the stiffest resolved mode per step.
    pub fn stiffness(&self, grid: &SpectralGrid) -> f64 {
        self.dt * grid.max_k_squared()
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// Physical-space states; at a jump time the stored state is the post-jump value.
    pub snapshots: Vec<ComplexField>,
    pub jumps: Vec<JumpEvent>,
    pub seed: Option<u64>,
    pub stiffness: f64,
}

impl Trajectory {
    pub fn final_state(&self) -> &ComplexField {
        self.snapshots
            .last()
            .expect("trajectories hold at least the initial state")
    }

    pub fn l2_norms(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.l2_norm()).collect()
    }

    /// `max_t |‖u(t)‖ − reference| / reference`.
    pub fn max_relative_norm_drift(&self, reference: f64) -> f64 {
        self.snapshots
            .iter()
            .map(|s| (s.l2_norm() - reference).abs() / reference)
            .fold(0.0, f64::max)
    }

    pub fn is_jump_time(&self, t: f64) -> bool {
        self.jumps.iter().any(|j| j.time == t)
    }
}

/// Coefficients of the equation shared by all solvers.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: NonlinearitySpec,
    pub family: SaturableFamily,
    pub measure: LevyMeasure,
}

impl Model {
    pub fn new(
        spec: NonlinearitySpec,
        family: SaturableFamily,
        measure: LevyMeasure,
    ) -> Result<Self> {
        if family.m() != measure.m() {
            return Err(invalid(
                "m",
                format!(
                    "{} noise coefficients but marks of dimension {}",
                    family.m(),
                    measure.m()
                ),
            ));
        }
        Ok(Self {
            spec,
            family,
            measure,
        })
    }
}

/// Exact solution of `u' = -iλ|u|^{2σ}u` over `dt`.
pub fn nonlinear_phase_step(
    u: &ComplexField,
    dt: f64,
    spec: &NonlinearitySpec,
) -> Result<ComplexField> {
    u.map_pointwise(|y| {
        y * Complex64::from_polar(
            1.0,
            -dt * spec.lambda() * spec.intensity_power(y.norm_sqr()),
        )
    })
}

/// Pointwise phase `exp(-ih[λ|u|^{2σ} + Σ_j a_j g̃_j(|u|²)])`.
#[inline]
fn combined_phase(
    values: &mut [Complex64],
    h: f64,
    spec: &NonlinearitySpec,
    drift: Option<(&SaturableFamily, &[f64])>,
) {
    let lambda = spec.lambda();
    match drift {
        Some((family, a)) if a.iter().any(|&c| c != 0.0) => {
            for v in values.iter_mut() {
                let theta = v.norm_sqr();
                let rate = lambda * spec.intensity_power(theta) + family.weighted_sum(a, theta);
                *v *= Complex64::from_polar(1.0, -h * rate);
            }
        }
        _ => {
            if lambda != 0.0 {
                for v in values.iter_mut() {
                    *v *= Complex64::from_polar(
                        1.0,
                        -h * lambda * spec.intensity_power(v.norm_sqr()),
                    );
                }
            }
        }
    }
}

/// Per-step drift coefficients `a` in the combined phase.
enum DriftSchedule<'a> {
    None,
    Constant(&'a SaturableFamily, Vec<f64>),
    Binned(&'a SaturableFamily, &'a Control, Vec<Vec<f64>>),
}

impl DriftSchedule<'_> {
    fn at(&self, t_mid: f64) -> Option<(&SaturableFamily, &[f64])> {
        match self {
            DriftSchedule::None => None,
            DriftSchedule::Constant(f, a) => Some((f, a.as_slice())),
            DriftSchedule::Binned(f, psi, per_bin) => {
                Some((f, per_bin[psi.bin_of(t_mid)].as_slice()))
            }
        }
    }
}

enum NonlinearStage {
    /// Pointwise exact phase.
    Exact,
    /// RK4 for `Ŷ' = -i J F[(λ|JY|^{2σ} + Σ a_j g̃_j(|JY|²)) JY]`.
    Yosida { mu: f64, substeps: usize },
}

struct Stepper<'a> {
    grid: Arc<SpectralGrid>,
    ws: FftWorkspace,
    spec: &'a NonlinearitySpec,
    dealias: bool,
    stage: NonlinearStage,
    buf: Vec<[Vec<Complex64>; 5]>,
    /// `exp(-i|k|² h)` for the most recent half step `h`.
    free: (f64, Vec<Complex64>),
}

impl<'a> Stepper<'a> {
    fn new(
        grid: Arc<SpectralGrid>,
        spec: &'a NonlinearitySpec,
        cfg: &SolverConfig,
        stage: NonlinearStage,
    ) -> Self {
        let ws = grid.workspace();
        let buf = match stage {
            NonlinearStage::Exact => Vec::new(),
            NonlinearStage::Yosida { .. } => {
                let z = vec![Complex64::new(0.0, 0.0); grid.len()];
                vec![[z.clone(), z.clone(), z.clone(), z.clone(), z]]
            }
        };
        Self {
            grid,
            ws,
            spec,
            dealias: cfg.dealias,
            stage,
            buf,
            free: (f64::NAN, Vec::new()),
        }
    }

    fn free_half_step(&mut self, coeffs: &mut [Complex64], h: f64) {
        if self.free.0 != h {
            let mult = self
                .grid
                .k_squared()
                .iter()
                .map(|k2| Complex64::from_polar(1.0, -k2 * h))
                .collect();
            self.free = (h, mult);
        }
        for (c, m) in coeffs.iter_mut().zip(&self.free.1) {
            *c *= m;
        }
    }

    /// One Strang cycle `S_{h/2} ∘ N_h ∘ S_{h/2}` on physical values.
    fn strang(&mut self, u: &mut [Complex64], h: f64, drift: Option<(&SaturableFamily, &[f64])>) {
        let grid = self.grid.clone();
        grid.forward_raw(u, &mut self.ws);
        self.free_half_step(u, 0.5 * h);
        match self.stage {
            NonlinearStage::Exact => {
                grid.inverse_raw(u, &mut self.ws);
                combined_phase(u, h, self.spec, drift);
                grid.forward_raw(u, &mut self.ws);
            }
            NonlinearStage::Yosida { mu, substeps } => {
                let sub = h / substeps as f64;
                for _ in 0..substeps {
                    self.yosida_rk4(u, sub, mu, drift);
                }
            }
        }
        if self.dealias {
            grid.apply_two_thirds_filter(u);
        }
        self.free_half_step(u, 0.5 * h);
        grid.inverse_raw(u, &mut self.ws);
    }

    fn yosida_rhs(
        &mut self,
        coeffs: &[Complex64],
        out: &mut [Complex64],
        mu: f64,
        drift: Option<(&SaturableFamily, &[f64])>,
    ) {
        let grid = self.grid.clone();
        out.copy_from_slice(coeffs);
        grid.apply_yosida_multiplier(out, mu);
        grid.inverse_raw(out, &mut self.ws);
        let lambda = self.spec.lambda();
        for w in out.iter_mut() {
            let theta = w.norm_sqr();
            let mut rate = lambda * self.spec.intensity_power(theta);
            if let Some((family, a)) = drift {
                rate += family.weighted_sum(a, theta);
            }
            *w *= rate;
        }
        grid.forward_raw(out, &mut self.ws);
        grid.apply_yosida_multiplier(out, mu);
        for v in out.iter_mut() {
            *v = Complex64::new(v.im, -v.re);
        }
    }

    fn yosida_rk4(
        &mut self,
        y: &mut [Complex64],
        h: f64,
        mu: f64,
        drift: Option<(&SaturableFamily, &[f64])>,
    ) {
        let [mut k1, mut k2, mut k3, mut k4, mut tmp] = self.buf.pop().expect("yosida buffers");
        self.yosida_rhs(y, &mut k1, mu, drift);
        for ((t, a), b) in tmp.iter_mut().zip(y.iter()).zip(&k1) {
            *t = a + b * (0.5 * h);
        }
        self.yosida_rhs(&tmp, &mut k2, mu, drift);
        for ((t, a), b) in tmp.iter_mut().zip(y.iter()).zip(&k2) {
            *t = a + b * (0.5 * h);
        }
        self.yosida_rhs(&tmp, &mut k3, mu, drift);
        for ((t, a), b) in tmp.iter_mut().zip(y.iter()).zip(&k3) {
            *t = a + b * h;
        }
        self.yosida_rhs(&tmp, &mut k4, mu, drift);
        for (i, v) in y.iter_mut().enumerate() {
            *v += (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) * (h / 6.0);
        }
        self.buf.push([k1, k2, k3, k4, tmp]);
    }
}

struct Run<'a> {
    horizon: f64,
    cfg: &'a SolverConfig,
    drift: DriftSchedule<'a>,
    jumps: Vec<JumpEvent>,
    jump_map: Option<(f64, &'a SaturableFamily)>,
}

fn guard(u: &[Complex64], grid: &SpectralGrid, t: f64, r: f64, cfg: &SolverConfig) -> Result<()> {
    if u.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
        return Err(Error::BlowUp {
            time: t,
            detail: "non-finite values in the solution".into(),
        });
    }
    let lr = crate::spectral::lr_of_values(u, grid.cell_volume(), r);
    if lr > cfg.lr_guard {
        return Err(Error::BlowUp {
            time: t,
            detail: format!("L^{r} norm {lr:.3e} exceeds the guard {:.3e}", cfg.lr_guard),
        });
    }
    Ok(())
}

fn integrate(u0: ComplexField, mut stepper: Stepper<'_>, run: Run<'_>) -> Result<Trajectory> {
    let cfg = run.cfg;
    cfg.validate()?;
    if !(run.horizon >= 0.0 && run.horizon.is_finite()) {
        return Err(invalid(
            "horizon",
            format!("must be >= 0, got {}", run.horizon),
        ));
    }
    if let Some(bad) = run
        .jumps
        .iter()
        .find(|j| !(j.time > 0.0 && j.time <= run.horizon))
    {
        return Err(invalid(
            "jumps",
            format!("jump time {} outside (0, {}]", bad.time, run.horizon),
        ));
    }
    if let Some(i) = run.jumps.windows(2).position(|w| w[1].time < w[0].time) {
        return Err(Error::NonMonotoneTimes { index: i + 1 });
    }
    let grid = u0.grid().clone();
    let r = stepper.spec.r();
    let mut u = u0.to_repr(Representation::Physical).into_values();
    guard(&u, &grid, 0.0, r, cfg)?;
    let snapshot =
        |u: &[Complex64]| ComplexField::new(grid.clone(), u.to_vec(), Representation::Physical);
    let mut times = vec![0.0];
    let mut snapshots = vec![snapshot(&u)?];
    let steps = if run.horizon == 0.0 {
        0
    } else {
        ((run.horizon / cfg.dt) - 1e-9).ceil().max(1.0) as usize
    };
    let mut t = 0.0;
    let mut next_jump = 0;
    for k in 0..steps {
        let t_next = if k + 1 == steps {
            run.horizon
        } else {
            (k + 1) as f64 * cfg.dt
        };
        let drift = run.drift.at(0.5 * (t + t_next));
        let mut cur = t;
        while next_jump < run.jumps.len() && run.jumps[next_jump].time <= t_next {
            let tau = run.jumps[next_jump].time;
            if tau > cur {
                stepper.strang(&mut u, tau - cur, drift);
                cur = tau;
            }
            let (eps, family) = run
                .jump_map
                .ok_or_else(|| invalid("jumps", "no jump map configured"))?;
            while next_jump < run.jumps.len() && run.jumps[next_jump].time == tau {
                let z = &run.jumps[next_jump].mark;
                u.iter_mut()
                    .for_each(|v| *v = marcus_flow(*v, z, eps, family));
                next_jump += 1;
            }
            guard(&u, &grid, tau, r, cfg)?;
            times.push(tau);
            snapshots.push(snapshot(&u)?);
        }
        if t_next > cur {
            stepper.strang(&mut u, t_next - cur, drift);
        }
        t = t_next;
        if (k + 1) % cfg.stride == 0 || k + 1 == steps {
            if times.last() != Some(&t_next) {
                guard(&u, &grid, t_next, r, cfg)?;
                times.push(t_next);
                snapshots.push(snapshot(&u)?);
            }
        } else if u.iter().any(|v| !v.re.is_finite()) {
            return Err(Error::BlowUp {
                time: t_next,
                detail: "non-finite values in the solution".into(),
            });
        }
    }
    Ok(Trajectory {
        times,
        snapshots,
        jumps: run.jumps,
        seed: None,
        stiffness: cfg.stiffness(&grid),
    })
}

fn check_dim(u0: &ComplexField, spec: &NonlinearitySpec) -> Result<()> {
    if u0.grid().dim() != spec.dim() {
        return Err(Error::GridMismatch(format!(
            "grid has dimension {}, nonlinearity was set up for dimension {}",
            u0.grid().dim(),
            spec.dim()
        )));
    }
    Ok(())
}

fn check_bin_alignment(psi: &Control, horizon: f64, dt: f64) -> Result<()> {
    if psi.horizon() < horizon * (1.0 - 1e-12) {
        return Err(Error::ControlShape(format!(
            "control covers [0, {}], solve requested on [0, {horizon}]",
            psi.horizon()
        )));
    }
    for &edge in &psi.edges()[1..psi.num_bins()] {
        if edge >= horizon {
            break;
        }
        let k = edge / dt;
        if (k - k.round()).abs() > 1e-9 * k.max(1.0) {
            return Err(Error::BinMisalignment { edge, dt });
        }
    }
    Ok(())
}

/// Deterministic equation `du = i[Δu − λ|u|^{2σ}u] dt`.
pub fn solve_nls(
    u0: &ComplexField,
    spec: &NonlinearitySpec,
    horizon: f64,
    cfg: &SolverConfig,
) -> Result<Trajectory> {
    check_dim(u0, spec)?;
    let stepper = Stepper::new(u0.grid().clone(), spec, cfg, NonlinearStage::Exact);
    integrate(
        u0.clone(),
        stepper,
        Run {
            horizon,
            cfg,
            drift: DriftSchedule::None,
            jumps: Vec::new(),
            jump_map: None,
        },
    )
}

fn skeleton_schedule<'a>(
    psi: &'a Control,
    model: &'a Model,
    horizon: f64,
    dt: f64,
) -> Result<DriftSchedule<'a>> {
    model.measure.check_control(psi)?;
    check_bin_alignment(psi, horizon, dt)?;
    if psi.is_identically_one() {
        return Ok(DriftSchedule::None);
    }
    let per_bin = (0..psi.num_bins())
        .map(|b| model.measure.control_moments_in_bin(psi, b))
        .collect();
    Ok(DriftSchedule::Binned(&model.family, psi, per_bin))
}

/// Skeleton equation: the deterministic NLS plus the control drift
/// `-i Σ_j c_j(t) g_j(Y)` with `c_j(t) = ∫ z_j (ψ(t, z) − 1) ν(dz)`.
pub fn solve_skeleton(
    u0: &ComplexField,
    psi: &Control,
    model: &Model,
    horizon: f64,
    cfg: &SolverConfig,
) -> Result<Trajectory> {
    check_dim(u0, &model.spec)?;
    cfg.validate()?;
    let drift = skeleton_schedule(psi, model, horizon, cfg.dt)?;
    let stepper = Stepper::new(u0.grid().clone(), &model.spec, cfg, NonlinearStage::Exact);
    integrate(
        u0.clone(),
        stepper,
        Run {
            horizon,
            cfg,
            drift,
            jumps: Vec::new(),
            jump_map: None,
        },
    )
}

/// Skeleton equation with every nonlinearity sandwiched by `J_μ`, started from `J_μ u0`.
pub fn solve_skeleton_yosida(
    u0: &ComplexField,
    psi: &Control,
    mu: f64,
    model: &Model,
    horizon: f64,
    cfg: &SolverConfig,
) -> Result<Trajectory> {
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(invalid("mu", format!("must be positive, got {mu}")));
    }
    check_dim(u0, &model.spec)?;
    cfg.validate()?;
    let drift = skeleton_schedule(psi, model, horizon, cfg.dt)?;
    let start = u0.yosida_apply(mu)?;
    let stepper = Stepper::new(
        u0.grid().clone(),
        &model.spec,
        cfg,
        NonlinearStage::Yosida {
            mu,
            substeps: cfg.yosida_substeps,
        },
    );
    integrate(
        start,
        stepper,
        Run {
            horizon,
            cfg,
            drift,
            jumps: Vec::new(),
            jump_map: None,
        },
    )
}

/// Stochastic equation driven by a given jump path: Marcus jumps at the event
/// times and the drift `+i Σ_j m_j g_j(u)` between them.
pub fn solve_with_jumps(
    u0: &ComplexField,
    eps: f64,
    jumps: Vec<JumpEvent>,
    model: &Model,
    horizon: f64,
    cfg: &SolverConfig,
) -> Result<Trajectory> {
    check_dim(u0, &model.spec)?;
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(invalid("eps", format!("must lie in (0, 1], got {eps}")));
    }
    if let Some(j) = jumps.iter().find(|j| j.mark.len() != model.measure.m()) {
        return Err(invalid(
            "jumps",
            format!("mark of dimension {} at t = {}", j.mark.len(), j.time),
        ));
    }
    let m = model.measure.drift_moments();
    let drift = if m.iter().all(|&v| v == 0.0) {
        DriftSchedule::None
    } else {
        DriftSchedule::Constant(&model.family, m.iter().map(|v| -v).collect())
    };
    let stepper = Stepper::new(u0.grid().clone(), &model.spec, cfg, NonlinearStage::Exact);
    if model.family.is_trivial() {
        // identity jumps: no step splitting, the path is kept for the record
        let mut traj = integrate(
            u0.clone(),
            stepper,
            Run {
                horizon,
                cfg,
                drift,
                jumps: Vec::new(),
                jump_map: None,
            },
        )?;
        traj.jumps = jumps;
        return Ok(traj);
    }
    integrate(
        u0.clone(),
        stepper,
        Run {
            horizon,
            cfg,
            drift,
            jumps,
            jump_map: Some((eps, &model.family)),
        },
    )
}

/// Stochastic equation with jumps of intensity `ε⁻¹ν`.
pub fn solve_stochastic<R: Rng + ?Sized>(
    u0: &ComplexField,
    eps: f64,
    model: &Model,
    horizon: f64,
    rng: &mut R,
    cfg: &SolverConfig,
) -> Result<Trajectory> {
    let jumps = sample_prm(&model.measure, eps, horizon, rng)?;
    solve_with_jumps(u0, eps, jumps, model, horizon, cfg)
}

/// Controlled equation: jumps of intensity `ε⁻¹ψν`, same drift as the uncontrolled one.
pub fn solve_controlled<R: Rng + ?Sized>(
    u0: &ComplexField,
    eps: f64,
    psi: &Control,
    model: &Model,
    horizon: f64,
    rng: &mut R,
    cfg: &SolverConfig,
) -> Result<Trajectory> {
    let jumps = sample_controlled_prm(&model.measure, psi, eps, horizon, rng)?;
    solve_with_jumps(u0, eps, jumps, model, horizon, cfg)
}

/// Mixed-norm distance between two trajectories on their common sample times.
pub fn e_distance(a: &Trajectory, b: &Trajectory, p: f64, r: f64) -> Result<NormReport> {
    let tol = 1e-12;
    let (mut i, mut j) = (0, 0);
    let mut times = Vec::new();
    let mut diffs = Vec::new();
    while i < a.times.len() && j < b.times.len() {
        let (ta, tb) = (a.times[i], b.times[j]);
        if (ta - tb).abs() <= tol * ta.abs().max(1.0) {
            // both sides may carry a post-jump sample at the same instant; skip repeats
            if times.last().is_none_or(|&last: &f64| ta > last) {
                times.push(ta);
                diffs.push(a.snapshots[i].sub(&b.snapshots[j])?);
            }
            i += 1;
            j += 1;
        } else if ta < tb {
            i += 1;
        } else {
            j += 1;
        }
    }
    mixed_norm(&times, &diffs, p, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::Profile;
    use crate::rng::stream;
    use std::f64::consts::PI;

    fn grid() -> Arc<SpectralGrid> {
        SpectralGrid::new(1, 256, 40.0).unwrap()
    }

    fn model(lambda: f64) -> Model {
        Model::new(
            NonlinearitySpec::new(lambda, 1.0, 1).unwrap(),
            SaturableFamily::uniform(Profile::Saturation { rho: 1.0 }, 1).unwrap(),
            LevyMeasure::symmetric_default(),
        )
        .unwrap()
    }

    fn plane_wave(g: &Arc<SpectralGrid>, amp: f64, mode: f64, t: f64, lambda: f64) -> ComplexField {
        let k = 2.0 * PI * mode / g.length();
        ComplexField::from_fn(g.clone(), |x| {
            Complex64::from_polar(amp, k * x[0] - (k * k + lambda * amp * amp) * t)
        })
    }

    fn max_err(a: &ComplexField, b: &ComplexField) -> f64 {
        a.values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max)
    }

    #[test]
    fn phase_step_examples() {
        let g = grid();
        let spec0 = NonlinearitySpec::new(0.0, 1.0, 1).unwrap();
        let u = ComplexField::gaussian(g.clone(), 1.0, 1.0, 0.5);
        assert_eq!(
            nonlinear_phase_step(&u, 0.1, &spec0).unwrap().values(),
            u.values()
        );
        let spec = NonlinearitySpec::new(-1.0, 1.0, 1).unwrap();
        let c = Complex64::new(0.6, 0.3);
        let out = nonlinear_phase_step(&ComplexField::constant(g.clone(), c), 0.2, &spec).unwrap();
        let expected = c * Complex64::from_polar(1.0, 0.2 * c.norm_sqr());
        assert!(out.values().iter().all(|v| (v - expected).norm() < 1e-15));
        let v = nonlinear_phase_step(&u, 0.7, &spec).unwrap();
        assert!((v.l2_norm() - u.l2_norm()).abs() < 1e-14 * u.l2_norm());
    }

    #[test]
    fn plane_wave_is_reproduced() {
        let g = grid();
        for lambda in [1.0, -1.0] {
            let spec = NonlinearitySpec::new(lambda, 1.0, 1).unwrap();
            let u0 = plane_wave(&g, 0.8, 3.0, 0.0, lambda);
            let traj = solve_nls(&u0, &spec, 1.0, &SolverConfig::default()).unwrap();
            for (t, s) in traj.times.iter().zip(&traj.snapshots) {
                let exact = plane_wave(&g, 0.8, 3.0, *t, lambda);
                assert!(s.l2_distance(&exact).unwrap() < 1e-8);
            }
        }
    }

    #[test]
    fn linear_case_is_the_free_flow() {
        let g = grid();
        let spec = NonlinearitySpec::new(0.0, 1.0, 1).unwrap();
        let u0 = ComplexField::gaussian(g, 1.0, 1.0, 1.0);
        let traj = solve_nls(&u0, &spec, 0.5, &SolverConfig::default()).unwrap();
        let exact = u0.free_propagate(0.5).unwrap();
        assert!(max_err(traj.final_state(), &exact) < 1e-12);
    }

    #[test]
    fn snapshots_follow_the_stride() {
        let g = grid();
        let spec = NonlinearitySpec::new(1.0, 1.0, 1).unwrap();
        let u0 = ComplexField::gaussian(g, 1.0, 1.0, 0.0);
        let cfg = SolverConfig {
            stride: 25,
            ..Default::default()
        };
        let traj = solve_nls(&u0, &spec, 0.1, &cfg).unwrap();
        assert_eq!(traj.times.len(), 5);
        assert!((traj.times[4] - 0.1).abs() < 1e-15);
        assert!(solve_nls(
            &u0,
            &spec,
            0.1,
            &SolverConfig {
                dt: -1.0,
                ..cfg.clone()
            }
        )
        .is_err());
        assert_eq!(solve_nls(&u0, &spec, 0.0, &cfg).unwrap().times, vec![0.0]);
    }

    #[test]
    fn jumps_are_resolved_exactly() {
        let g = grid();
        let m = model(1.0);
        let u0 = ComplexField::gaussian(g, 1.0, 1.0, 0.0);
        let cfg = SolverConfig::default();
        let jumps = vec![
            JumpEvent {
                time: 0.0125,
                mark: vec![0.75],
                cell: 3,
            },
            JumpEvent {
                time: 0.02,
                mark: vec![-0.25],
                cell: 1,
            },
        ];
        let traj = solve_with_jumps(&u0, 0.5, jumps.clone(), &m, 0.05, &cfg).unwrap();
        assert!(traj.times.windows(2).all(|w| w[1] > w[0]));
        let i = traj.times.iter().position(|&t| t == 0.0125).unwrap();
        // pre-jump state from a jump-free run to the same instant
        let pre = solve_nls(&u0, &m.spec, 0.0125, &cfg).unwrap();
        let expected =
            crate::noise::jump_field(pre.final_state(), &[0.75], 0.5, &m.family).unwrap();
        assert!(max_err(&traj.snapshots[i], &expected) < 1e-13);
        // a jump on a stride point is stored once
        assert_eq!(traj.times.iter().filter(|&&t| t == 0.02).count(), 1);
        let outside = vec![JumpEvent {
            time: 2.0,
            mark: vec![0.25],
            cell: 2,
        }];
        assert!(solve_with_jumps(&u0, 0.5, outside, &m, 1.0, &cfg).is_err());
    }

    #[test]
    fn empty_jump_path_matches_the_deterministic_solver() {
        let g = grid();
        let m = model(-1.0);
        let u0 = ComplexField::gaussian(g, 1.0, 1.0, 0.0);
        let cfg = SolverConfig::default();
        let a = solve_with_jumps(&u0, 0.1, Vec::new(), &m, 1.0, &cfg).unwrap();
        let b = solve_nls(&u0, &m.spec, 1.0, &cfg).unwrap();
        assert_eq!(a.times, b.times);
        assert_eq!(a.final_state().values(), b.final_state().values());
    }

    #[test]
    fn unit_control_skeleton_is_the_deterministic_solution() {
        let g = grid();
        let m = model(1.0);
        let u0 = ComplexField::gaussian(g, 1.0, 1.0, 0.0);
        let cfg = SolverConfig::default();
        let ones = Control::constant(1.0, 8, 4, 1.0).unwrap();
        let a = solve_skeleton(&u0, &ones, &m, 1.0, &cfg).unwrap();
        let b = solve_nls(&u0, &m.spec, 1.0, &cfg).unwrap();
        assert_eq!(a.final_state().values(), b.final_state().values());
    }

    #[test]
    fn control_phase_scales_with_the_control_excess() {
        // λ = 0 and a constant field: Y(t) = exp(-i c t g̃(|c0|²)) c0
        let g = grid();
        let measure = LevyMeasure::discrete(vec![vec![0.5]], vec![2.0]).unwrap();
        let family = SaturableFamily::uniform(Profile::Saturation { rho: 1.0 }, 1).unwrap();
        let m = Model::new(
            NonlinearitySpec::new(0.0, 1.0, 1).unwrap(),
            family.clone(),
            measure,
        )
        .unwrap();
        let c0 = Complex64::new(0.8, 0.0);
        let u0 = ComplexField::constant(g, c0);
        let cfg = SolverConfig::default();
        let phase = |excess: f64| {
            let psi = Control::constant(1.0, 4, 1, 1.0 + excess).unwrap();
            let y = solve_skeleton(&u0, &psi, &m, 1.0, &cfg).unwrap();
            let v = y.final_state().values()[17];
            let expected = c0
                * Complex64::from_polar(
                    1.0,
                    -0.5 * 2.0 * excess * family.weighted_sum(&[1.0], 0.64),
                );
            assert!((v - expected).norm() < 1e-12);
            (v / c0).arg()
        };
        let (p1, p2) = (phase(0.3), phase(0.6));
        assert!((p2 - 2.0 * p1).abs() < 1e-12);
    }

    #[test]
    fn misaligned_bins_are_rejected() {
        let g = grid();
        let m = model(1.0);
        let u0 = ComplexField::gaussian(g, 1.0, 1.0, 0.0);
        let psi = Control::new(vec![0.0, 0.33333, 1.0], 4, vec![1.5; 8]).unwrap();
        assert!(matches!(
            solve_skeleton(&u0, &psi, &m, 1.0, &SolverConfig::default()),
            Err(Error::BinMisalignment { .. })
        ));
    }

    #[test]
    fn yosida_starts_from_the_regularized_datum() {
        let g = grid();
        let m = model(1.0);
        let u0 = ComplexField::gaussian(g, 1.0, 1.0, 0.0);
        let psi = Control::constant(1.0, 4, 4, 1.0).unwrap();
        let cfg = SolverConfig::default();
        let y = solve_skeleton_yosida(&u0, &psi, 50.0, &m, 0.1, &cfg).unwrap();
        assert_eq!(
            y.snapshots[0].l2_norm(),
            u0.yosida_apply(50.0).unwrap().l2_norm()
        );
        assert!(solve_skeleton_yosida(&u0, &psi, 0.0, &m, 0.1, &cfg).is_err());
    }

    #[test]
    fn yosida_norm_drift_shrinks_under_step_halving() {
        // coarse steps and a large datum make the inner RK4 error visible
        let g = grid();
        let m = model(1.0);
        let u0 = ComplexField::gaussian(g, 2.0, 1.0, 0.0);
        let psi = Control::from_fn(1.0, 4, 4, |_, c| if c >= 2 { 3.0 } else { 1.0 }).unwrap();
        let reference = u0.yosida_apply(10.0).unwrap().l2_norm();
        let drift = |dt: f64| {
            let cfg = SolverConfig {
                dt,
                stride: 1,
                ..Default::default()
            };
            solve_skeleton_yosida(&u0, &psi, 10.0, &m, 1.0, &cfg)
                .unwrap()
                .max_relative_norm_drift(reference)
        };
        let (coarse, fine) = (drift(0.125), drift(0.0625));
        assert!(coarse > 1e-9, "{coarse}");
        assert!(coarse / fine >= 3.5, "{coarse} / {fine}");
    }

    #[test]
    fn focusing_guard_aborts() {
        let g = grid();
        let spec = NonlinearitySpec::new(-1.0, 1.0, 1).unwrap();
        let u0 = ComplexField::gaussian(g, 3.0, 1.0, 0.0);
        let cfg = SolverConfig {
            lr_guard: 1.0,
            ..Default::default()
        };
        assert!(matches!(
            solve_nls(&u0, &spec, 0.1, &cfg),
            Err(Error::BlowUp { .. })
        ));
    }

    #[test]
    fn stochastic_paths_conserve_mass() {
        let g = grid();
        let m = model(1.0);
        let u0 = ComplexField::gaussian(g, 1.0, 1.0, 0.0);
        let cfg = SolverConfig::default();
        let traj = solve_stochastic(&u0, 0.1, &m, 1.0, &mut stream(3, 0), &cfg).unwrap();
        assert!(!traj.jumps.is_empty());
        assert!(traj.max_relative_norm_drift(u0.l2_norm()) < 1e-10);
        let ones = Control::constant(1.0, 4, 4, 1.0).unwrap();
        let ctrl = solve_controlled(&u0, 0.1, &ones, &m, 1.0, &mut stream(3, 0), &cfg).unwrap();
        assert_eq!(ctrl.jumps, traj.jumps);
        assert_eq!(ctrl.final_state().values(), traj.final_state().values());
    }

    #[test]
    fn e_distance_of_identical_runs_is_zero() {
        let g = grid();
        let m = model(1.0);
        let u0 = ComplexField::gaussian(g, 1.0, 1.0, 0.0);
        let cfg = SolverConfig::default();
        let a = solve_stochastic(&u0, 0.1, &m, 1.0, &mut stream(1, 1), &cfg).unwrap();
        let d = e_distance(&a, &a, 8.0, 4.0).unwrap();
        assert_eq!(d.e_norm(), 0.0);
        let b = solve_nls(&u0, &m.spec, 1.0, &cfg).unwrap();
        assert!(e_distance(&a, &b, 8.0, 4.0).unwrap().e_norm() > 0.0);
    }
}
