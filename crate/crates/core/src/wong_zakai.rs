//! Finite-dimensional Marcus SDEs driven by a compensated pure-jump path,
//! their piecewise-linear (Wong–Zakai) approximations, and coordinate changes.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::noise::{sample_prm, JumpEvent, LevyMeasure};
use crate::rng::stream;

pub type VectorField = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type InverseMap = Arc<dyn Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync>;
pub type JacobianMap = Arc<dyn Fn(&[f64]) -> Vec<Vec<f64>> + Send + Sync>;

/// `dX = Σ_j b_j(X) ⋄ dL_j`, `X(0) = x0`.
#[derive(Clone)]
pub struct FiniteSde {
    dim: usize,
    fields: Vec<VectorField>,
    x0: Vec<f64>,
}

impl fmt::Debug for FiniteSde {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FiniteSde")
            .field("dim", &self.dim)
            .field("fields", &self.fields.len())
            .field("x0", &self.x0)
            .finish()
    }
}

fn mat_vec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter()
        .map(|row| row.iter().zip(x).map(|(r, v)| r * v).sum())
        .collect()
}

impl FiniteSde {
    pub fn new(dim: usize, fields: Vec<VectorField>, x0: Vec<f64>) -> Result<Self> {
        if dim == 0 || x0.len() != dim {
            return Err(invalid(
                "x0",
                format!("initial state must have dimension {dim}"),
            ));
        }
        if fields.is_empty() {
            return Err(invalid("fields", "at least one vector field is required"));
        }
        Ok(Self { dim, fields, x0 })
    }

    /// `b_j(x) = A_j x`.
    pub fn linear(matrices: Vec<Vec<Vec<f64>>>, x0: Vec<f64>) -> Result<Self> {
        let dim = x0.len();
        for (j, a) in matrices.iter().enumerate() {
            if a.len() != dim || a.iter().any(|row| row.len() != dim) {
                return Err(invalid("matrices", format!("A_{j} must be {dim}x{dim}")));
            }
        }
        let fields = matrices
            .into_iter()
            .map(|a| Arc::new(move |x: &[f64]| mat_vec(&a, x)) as VectorField)
            .collect();
        Self::new(dim, fields, x0)
    }

    /// Planar rotation fields `b_j(x) = ω_j (−x₁, x₀)`.
    pub fn rotation(omegas: Vec<f64>, x0: [f64; 2]) -> Result<Self> {
        let fields = omegas
            .into_iter()
            .map(|w| Arc::new(move |x: &[f64]| vec![-w * x[1], w * x[0]]) as VectorField)
            .collect();
        Self::new(2, fields, x0.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn m(&self) -> usize {
        self.fields.len()
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn with_x0(&self, x0: Vec<f64>) -> Result<Self> {
        Self::new(self.dim, self.fields.clone(), x0)
    }

    /// `Σ_j w_j b_j(x)`.
    pub fn combined(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (b, &wj) in self.fields.iter().zip(w) {
            if wj != 0.0 {
                for (o, v) in out.iter_mut().zip(b(x)) {
                    *o += wj * v;
                }
            }
        }
        out
    }

    /// RK4 for `x' = Σ_j w_j b_j(x)` over `duration` in `steps` steps.
    pub fn flow(&self, x: &[f64], w: &[f64], duration: f64, steps: usize) -> Result<Vec<f64>> {
        let mut y = x.to_vec();
        if duration == 0.0 || w.iter().all(|&v| v == 0.0) {
            return Ok(y);
        }
        let h = duration / steps as f64;
        let axpy = |a: &[f64], b: &[f64], s: f64| -> Vec<f64> {
            a.iter().zip(b).map(|(p, q)| p + s * q).collect()
        };
        for _ in 0..steps {
            let k1 = self.combined(&y, w);
            let k2 = self.combined(&axpy(&y, &k1, 0.5 * h), w);
            let k3 = self.combined(&axpy(&y, &k2, 0.5 * h), w);
            let k4 = self.combined(&axpy(&y, &k3, h), w);
            for i in 0..self.dim {
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::FlowOverflow(format!(
                    "state left the finite range after {duration} time units"
                )));
            }
        }
        Ok(y)
    }
}

/// `L(t) = Σ_{τ ≤ t} z_τ − m t`: the jumps of a Poisson random measure and its
/// compensator drift `m = ∫ z ν(dz)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrivingPath {
    pub jumps: Vec<JumpEvent>,
    pub compensator: Vec<f64>,
}

impl DrivingPath {
    pub fn new(jumps: Vec<JumpEvent>, compensator: Vec<f64>) -> Result<Self> {
        if let Some(i) = jumps.windows(2).position(|w| !(w[1].time > w[0].time)) {
            return Err(Error::NonMonotoneTimes { index: i + 1 });
        }
        if let Some(j) = jumps.iter().find(|j| j.mark.len() != compensator.len()) {
            return Err(invalid(
                "jumps",
                format!("mark dimension {} != {}", j.mark.len(), compensator.len()),
            ));
        }
        Ok(Self { jumps, compensator })
    }

    pub fn sample<R: Rng + ?Sized>(
        measure: &LevyMeasure,
        horizon: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(
            sample_prm(measure, 1.0, horizon, rng)?,
            measure.drift_moments().to_vec(),
        )
    }

    pub fn value(&self, t: f64) -> Vec<f64> {
        let mut out: Vec<f64> = self.compensator.iter().map(|m| -m * t).collect();
        for j in self.jumps.iter().take_while(|j| j.time <= t) {
            for (o, z) in out.iter_mut().zip(&j.mark) {
                *o += z;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatePath {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl StatePath {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("paths hold the initial state")
    }

    /// State at the last sample time `≤ t`.
    pub fn at(&self, t: f64) -> &[f64] {
        let i = self.times.partition_point(|&s| s <= t).max(1) - 1;
        &self.states[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarcusSolverConfig {
    /// RK4 step for the compensator drift between jumps.
    pub drift_step: f64,
    /// RK4 substeps for each unit-time jump flow.
    pub flow_substeps: usize,
    /// Sample spacing of the output path (jump times are always sampled).
    pub sample_dt: f64,
}

impl Default for MarcusSolverConfig {
    fn default() -> Self {
        Self {
            drift_step: 1.0 / 64.0,
            flow_substeps: 64,
            sample_dt: 1.0 / 64.0,
        }
    }
}

fn drift_flow(
    sde: &FiniteSde,
    x: &[f64],
    neg_m: &[f64],
    duration: f64,
    max_step: f64,
) -> Result<Vec<f64>> {
    if duration <= 0.0 {
        return Ok(x.to_vec());
    }
    let steps = (duration / max_step - 1e-9).ceil().max(1.0) as usize;
    sde.flow(x, neg_m, duration, steps)
}

/// Marcus solution: compensator drift `−Σ_j m_j b_j` between jumps and the
/// unit-time flow of `Σ_j z_j b_j` at each jump. Post-jump states are stored
/// at jump times.
pub fn marcus_sde_solve(
    sde: &FiniteSde,
    path: &DrivingPath,
    horizon: f64,
    cfg: &MarcusSolverConfig,
) -> Result<StatePath> {
    check_path(sde, path, horizon)?;
    if !(cfg.drift_step > 0.0 && cfg.sample_dt > 0.0) || cfg.flow_substeps < 4 {
        return Err(invalid(
            "cfg",
            "need positive steps and at least 4 flow substeps",
        ));
    }
    let neg_m: Vec<f64> = path.compensator.iter().map(|m| -m).collect();
    let samples = ((horizon / cfg.sample_dt) - 1e-9).ceil().max(0.0) as usize;
    let mut grid: Vec<(f64, Option<usize>)> = (1..=samples)
        .map(|k| ((k as f64 * cfg.sample_dt).min(horizon), None))
        .collect();
    grid.extend(
        path.jumps
            .iter()
            .enumerate()
            .map(|(i, j)| (j.time, Some(i))),
    );
    grid.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.is_some().cmp(&a.1.is_some())));
    let mut times = vec![0.0];
    let mut states = vec![sde.x0().to_vec()];
    let mut x = sde.x0().to_vec();
    let mut t = 0.0;
    for (s, jump) in grid {
        x = drift_flow(sde, &x, &neg_m, s - t, cfg.drift_step)?;
        t = s;
        if let Some(i) = jump {
            x = sde.flow(&x, &path.jumps[i].mark, 1.0, cfg.flow_substeps)?;
        }
        if times.last() == Some(&s) {
            *states.last_mut().expect("non-empty") = x.clone();
        } else {
            times.push(s);
            states.push(x.clone());
        }
    }
    Ok(StatePath { times, states })
}

/// Itô counterpart of [`marcus_sde_solve`] for linear fields: the jump acts as
/// `x ↦ x + Σ_j z_j b_j(x)`.
pub fn ito_sde_solve(
    sde: &FiniteSde,
    path: &DrivingPath,
    horizon: f64,
    cfg: &MarcusSolverConfig,
) -> Result<StatePath> {
    check_path(sde, path, horizon)?;
    let neg_m: Vec<f64> = path.compensator.iter().map(|m| -m).collect();
    let mut times = vec![0.0];
    let mut states = vec![sde.x0().to_vec()];
    let mut x = sde.x0().to_vec();
    let mut t = 0.0;
    for j in &path.jumps {
        x = drift_flow(sde, &x, &neg_m, j.time - t, cfg.drift_step)?;
        let inc = sde.combined(&x, &j.mark);
        x.iter_mut().zip(inc).for_each(|(a, b)| *a += b);
        t = j.time;
        times.push(t);
        states.push(x.clone());
    }
    if horizon > t {
        x = drift_flow(sde, &x, &neg_m, horizon - t, cfg.drift_step)?;
        times.push(horizon);
        states.push(x);
    }
    Ok(StatePath { times, states })
}

fn check_path(sde: &FiniteSde, path: &DrivingPath, horizon: f64) -> Result<()> {
    if path.compensator.len() != sde.m() {
        return Err(invalid(
            "path",
            format!(
                "{} noise components for {} vector fields",
                path.compensator.len(),
                sde.m()
            ),
        ));
    }
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(invalid("horizon", "must be finite and >= 0"));
    }
    if let Some(j) = path
        .jumps
        .iter()
        .find(|j| !(j.time > 0.0 && j.time <= horizon))
    {
        return Err(invalid(
            "path",
            format!("jump at {} outside (0, {horizon}]", j.time),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Mesh {
    /// Nodes `k h`, independent of the jumps.
    Uniform { h: f64 },
    /// Nodes `k h` together with every jump time.
    JumpRefined { h: f64 },
}

impl Mesh {
    pub fn h(&self) -> f64 {
        match *self {
            Mesh::Uniform { h } | Mesh::JumpRefined { h } => h,
        }
    }
}

/// Solves `X' = Σ_j b_j(X) dL^h_j/dt` with `L^h` the linear interpolant of
/// the driving path on the mesh, by RK4 with 16 steps per mesh interval.
pub fn piecewise_linear_ode_solve(
    sde: &FiniteSde,
    path: &DrivingPath,
    mesh: Mesh,
    horizon: f64,
) -> Result<StatePath> {
    check_path(sde, path, horizon)?;
    let h = mesh.h();
    if !(h > 0.0) {
        return Err(invalid("h", "mesh width must be positive"));
    }
    let count = ((horizon / h) - 1e-9).ceil().max(0.0) as usize;
    let mut nodes: Vec<f64> = (0..=count).map(|k| (k as f64 * h).min(horizon)).collect();
    if let Mesh::JumpRefined { .. } = mesh {
        nodes.extend(path.jumps.iter().map(|j| j.time));
        nodes.sort_by(f64::total_cmp);
        nodes.dedup_by(|a, b| (*a - *b).abs() <= 1e-14);
    }
    nodes.dedup();
    let mut states = vec![sde.x0().to_vec()];
    let mut x = sde.x0().to_vec();
    let mut l_prev = path.value(nodes[0]);
    for w in nodes.windows(2) {
        let dt = w[1] - w[0];
        let l_next = path.value(w[1]);
        let slope: Vec<f64> = l_next
            .iter()
            .zip(&l_prev)
            .map(|(a, b)| (a - b) / dt)
            .collect();
        x = sde.flow(&x, &slope, dt, 16)?;
        states.push(x.clone());
        l_prev = l_next;
    }
    Ok(StatePath {
        times: nodes,
        states,
    })
}

/// A diffeomorphism `φ` of `ℝ^D` with its inverse and Jacobian.
#[derive(Clone)]
pub struct Diffeomorphism {
    pub forward: VectorField,
    pub inverse: InverseMap,
    /// Row-major Jacobian `φ'(x)`.
    pub jacobian: JacobianMap,
}

impl Diffeomorphism {
    pub fn identity() -> Self {
        Self {
            forward: Arc::new(|x| x.to_vec()),
            inverse: Arc::new(|y| Ok(y.to_vec())),
            jacobian: Arc::new(|x| {
                (0..x.len())
                    .map(|i| {
                        (0..x.len())
                            .map(|j| if i == j { 1.0 } else { 0.0 })
                            .collect()
                    })
                    .collect()
            }),
        }
    }

    /// `φ(x) = M x` for an invertible 2×2 matrix.
    pub fn linear_2x2(m: [[f64; 2]; 2]) -> Result<Self> {
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-14 {
            return Err(invalid("M", "matrix is singular"));
        }
        let inv = [
            [m[1][1] / det, -m[0][1] / det],
            [-m[1][0] / det, m[0][0] / det],
        ];
        let mm: Vec<Vec<f64>> = m.iter().map(|r| r.to_vec()).collect();
        let mi: Vec<Vec<f64>> = inv.iter().map(|r| r.to_vec()).collect();
        let mj = mm.clone();
        Ok(Self {
            forward: Arc::new(move |x| mat_vec(&mm, x)),
            inverse: Arc::new(move |y| Ok(mat_vec(&mi, y))),
            jacobian: Arc::new(move |_| mj.clone()),
        })
    }

    /// Componentwise `y = x + x³`, inverted by Newton's method.
    pub fn cubic() -> Self {
        Self {
            forward: Arc::new(|x| x.iter().map(|v| v + v * v * v).collect()),
            inverse: Arc::new(|y| y.iter().map(|&v| cubic_root_solve(v)).collect()),
            jacobian: Arc::new(|x| {
                (0..x.len())
                    .map(|i| {
                        (0..x.len())
                            .map(|j| if i == j { 1.0 + 3.0 * x[i] * x[i] } else { 0.0 })
                            .collect()
                    })
                    .collect()
            }),
        }
    }
}

/// Real root of `x + x³ = y`.
fn cubic_root_solve(y: f64) -> Result<f64> {
    if !y.is_finite() {
        return Err(Error::RootSolve(format!("non-finite target {y}")));
    }
    // the root lies between 0 and min(|y|, cbrt|y|) in the direction of y
    let mut x = y.signum() * y.abs().min(y.abs().cbrt());
    for _ in 0..100 {
        let f = x + x * x * x - y;
        let step = f / (1.0 + 3.0 * x * x);
        x -= step;
        if step.abs() <= 1e-15 * (1.0 + x.abs()) {
            return Ok(x);
        }
    }
    Err(Error::RootSolve(format!(
        "Newton iteration for x + x^3 = {y} did not converge"
    )))
}

/// `b̂_j(y) = φ'(φ⁻¹(y)) b_j(φ⁻¹(y))`, with inverse failures mapped to NaN
/// so the integrator reports them.
pub fn transformed_sde(sde: &FiniteSde, phi: &Diffeomorphism) -> Result<FiniteSde> {
    let fields = sde
        .fields
        .iter()
        .map(|b| {
            let b = b.clone();
            let phi = phi.clone();
            Arc::new(move |y: &[f64]| -> Vec<f64> {
                match (phi.inverse)(y) {
                    Ok(x) => mat_vec(&(phi.jacobian)(&x), &b(&x)),
                    Err(_) => vec![f64::NAN; y.len()],
                }
            }) as VectorField
        })
        .collect();
    FiniteSde::new(sde.dim, fields, (phi.forward)(sde.x0()))
}

/// `sup_t |φ(X(t)) − Y(t)|` over the common sample times, with `Y` the
/// Marcus solution of the transformed equation.
pub fn change_of_coordinates_check(
    sde: &FiniteSde,
    phi: &Diffeomorphism,
    path: &DrivingPath,
    horizon: f64,
    cfg: &MarcusSolverConfig,
) -> Result<f64> {
    (phi.inverse)(&(phi.forward)(sde.x0()))?;
    let x = marcus_sde_solve(sde, path, horizon, cfg)?;
    let y = marcus_sde_solve(&transformed_sde(sde, phi)?, path, horizon, cfg)?;
    let mut dev = 0.0f64;
    for (xs, ys) in x.states.iter().zip(&y.states) {
        let mapped = (phi.forward)(xs);
        let d = mapped
            .iter()
            .zip(ys)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        dev = dev.max(d);
    }
    Ok(dev)
}

fn euclid_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WongZakaiRow {
    pub h: f64,
    /// Terminal error of the uniform-mesh approximation.
    pub uniform_error: f64,
    /// Terminal error with jump times added to the mesh.
    pub refined_error: f64,
    /// Terminal distance of the uniform-mesh approximation to the Itô solution.
    pub ito_distance: f64,
}

/// Terminal errors against the Marcus solution of one fixed path, per mesh.
pub fn wong_zakai_table(
    sde: &FiniteSde,
    path: &DrivingPath,
    meshes: &[f64],
    horizon: f64,
    cfg: &MarcusSolverConfig,
) -> Result<Vec<WongZakaiRow>> {
    let marcus = marcus_sde_solve(sde, path, horizon, cfg)?;
    let ito = ito_sde_solve(sde, path, horizon, cfg)?;
    meshes
        .par_iter()
        .map(|&h| {
            let uni = piecewise_linear_ode_solve(sde, path, Mesh::Uniform { h }, horizon)?;
            let refined = piecewise_linear_ode_solve(sde, path, Mesh::JumpRefined { h }, horizon)?;
            Ok(WongZakaiRow {
                h,
                uniform_error: euclid_dist(uni.terminal(), marcus.terminal()),
                refined_error: euclid_dist(refined.terminal(), marcus.terminal()),
                ito_distance: euclid_dist(uni.terminal(), ito.terminal()),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub h: f64,
    pub paths: usize,
    pub mean: f64,
    pub median: f64,
    pub p90: f64,
    pub max: f64,
    pub refined_mean: f64,
}

/// Distribution of terminal Wong–Zakai errors over `paths` sampled jump paths
/// (path `k` on stream `k` of `seed`).
#[allow(clippy::too_many_arguments)]
pub fn wong_zakai_statistics(
    sde: &FiniteSde,
    measure: &LevyMeasure,
    meshes: &[f64],
    horizon: f64,
    paths: usize,
    seed: u64,
    cfg: &MarcusSolverConfig,
) -> Result<Vec<ErrorSummary>> {
    if paths == 0 {
        return Err(invalid("paths", "must be positive"));
    }
    let tables = (0..paths as u64)
        .into_par_iter()
        .map(|k| {
            let path = DrivingPath::sample(measure, horizon, &mut stream(seed, k))?;
            wong_zakai_table(sde, &path, meshes, horizon, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(meshes
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            let mut errs: Vec<f64> = tables.iter().map(|t| t[i].uniform_error).collect();
            errs.sort_by(f64::total_cmp);
            let q = |f: f64| errs[((errs.len() - 1) as f64 * f).round() as usize];
            ErrorSummary {
                h,
                paths,
                mean: errs.iter().sum::<f64>() / paths as f64,
                median: q(0.5),
                p90: q(0.9),
                max: errs[errs.len() - 1],
                refined_mean: tables.iter().map(|t| t[i].refined_error).sum::<f64>() / paths as f64,
            }
        })
        .collect())
}

/// Two non-commuting generators and an asymmetric two-atom mark law, with a
/// single jump at `t = 1/2` (a node of every dyadic mesh).
pub fn linear_single_jump_fixture() -> (FiniteSde, DrivingPath, LevyMeasure) {
    let a1 = vec![vec![0.0, 1.0], vec![0.0, 0.0]];
    let a2 = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
    let sde = FiniteSde::linear(vec![a1, a2], vec![1.0, 0.5]).expect("valid fixture");
    let measure = LevyMeasure::discrete(vec![vec![0.6, 0.5], vec![-0.2, 0.7]], vec![0.5, 1.0])
        .expect("valid fixture");
    let path = DrivingPath::new(
        vec![JumpEvent {
            time: 0.5,
            mark: vec![0.6, 0.5],
            cell: 0,
        }],
        measure.drift_moments().to_vec(),
    )
    .expect("valid fixture");
    (sde, path, measure)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix2;

    fn norm(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn no_jumps_no_drift_is_constant() {
        let sde = FiniteSde::rotation(vec![1.0], [0.3, 0.4]).unwrap();
        let path = DrivingPath::new(Vec::new(), vec![0.0]).unwrap();
        let x = marcus_sde_solve(&sde, &path, 1.0, &MarcusSolverConfig::default()).unwrap();
        assert!(x.states.iter().all(|s| s == &vec![0.3, 0.4]));
        let wz = piecewise_linear_ode_solve(&sde, &path, Mesh::Uniform { h: 0.125 }, 1.0).unwrap();
        assert!(wz.states.iter().all(|s| s == &vec![0.3, 0.4]));
    }

    #[test]
    fn linear_jump_map_is_the_matrix_exponential() {
        let (sde, path, _) = linear_single_jump_fixture();
        let still = DrivingPath::new(path.jumps.clone(), vec![0.0, 0.0]).unwrap();
        let x = marcus_sde_solve(&sde, &still, 1.0, &MarcusSolverConfig::default()).unwrap();
        let z = &still.jumps[0].mark;
        let gen = Matrix2::new(0.0, z[0], z[1], 0.0);
        let expected = gen.exp() * nalgebra::Vector2::new(1.0, 0.5);
        let got = x.terminal();
        assert!((got[0] - expected[0]).abs() < 1e-8 && (got[1] - expected[1]).abs() < 1e-8);
    }

    #[test]
    fn rotations_preserve_the_radius() {
        let sde = FiniteSde::rotation(vec![1.3, -0.4], [0.6, -0.8]).unwrap();
        let measure =
            LevyMeasure::discrete(vec![vec![0.5, 0.1], vec![-0.3, 0.9]], vec![2.0, 1.0]).unwrap();
        for k in 0..5 {
            let path = DrivingPath::sample(&measure, 1.0, &mut stream(4, k)).unwrap();
            let x = marcus_sde_solve(&sde, &path, 1.0, &MarcusSolverConfig::default()).unwrap();
            for s in &x.states {
                // RK4 damps a rotation by α⁶/144 per step of angle α
                assert!((norm(s) - 1.0).abs() < 1e-10, "{}", norm(s) - 1.0);
            }
        }
    }

    #[test]
    fn refinement_sequence_converges_to_the_marcus_solution() {
        let (sde, path, _) = linear_single_jump_fixture();
        let meshes: Vec<f64> = (3..=8).map(|k| 1.0 / f64::from(1u32 << k)).collect();
        let rows =
            wong_zakai_table(&sde, &path, &meshes, 1.0, &MarcusSolverConfig::default()).unwrap();
        assert!(rows
            .windows(2)
            .all(|w| w[1].uniform_error < w[0].uniform_error));
        let ito = ito_sde_solve(&sde, &path, 1.0, &MarcusSolverConfig::default()).unwrap();
        let marcus = marcus_sde_solve(&sde, &path, 1.0, &MarcusSolverConfig::default()).unwrap();
        assert!(euclid_dist(ito.terminal(), marcus.terminal()) > 0.05);
        for r in rows.iter().filter(|r| r.h <= 1.0 / 64.0) {
            assert!(r.uniform_error < r.ito_distance);
        }
    }

    #[test]
    fn identity_change_of_coordinates_is_exact() {
        let (sde, path, _) = linear_single_jump_fixture();
        let dev = change_of_coordinates_check(
            &sde,
            &Diffeomorphism::identity(),
            &path,
            1.0,
            &MarcusSolverConfig::default(),
        )
        .unwrap();
        assert!(dev < 1e-14);
    }

    #[test]
    fn linear_change_of_coordinates() {
        let (sde, path, _) = linear_single_jump_fixture();
        let phi = Diffeomorphism::linear_2x2([[2.0, 1.0], [-0.5, 1.5]]).unwrap();
        let dev =
            change_of_coordinates_check(&sde, &phi, &path, 1.0, &MarcusSolverConfig::default())
                .unwrap();
        assert!(dev <= 1e-8, "{dev}");
        assert!(Diffeomorphism::linear_2x2([[1.0, 2.0], [0.5, 1.0]]).is_err());
    }

    #[test]
    fn cubic_change_of_coordinates_on_rotations() {
        let sde = FiniteSde::rotation(vec![1.0], [0.6, -0.3]).unwrap();
        let measure = LevyMeasure::discrete(vec![vec![0.8], vec![-0.4]], vec![2.0, 1.0]).unwrap();
        for k in 0..5 {
            let path = DrivingPath::sample(&measure, 1.0, &mut stream(8, k)).unwrap();
            let dev = change_of_coordinates_check(
                &sde,
                &Diffeomorphism::cubic(),
                &path,
                1.0,
                &MarcusSolverConfig::default(),
            )
            .unwrap();
            assert!(dev <= 1e-6, "{dev}");
        }
    }

    #[test]
    fn cubic_inverse_round_trips() {
        for y in [-50.0, -2.0, -1e-9, 0.0, 0.3, 2.0, 1e6] {
            let x = cubic_root_solve(y).unwrap();
            assert!((x + x * x * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
        assert!(cubic_root_solve(f64::NAN).is_err());
    }

    #[test]
    fn scalar_chain_rule() {
        // f(x) = |x|² evaluated directly and through the transformed equation
        let sde =
            FiniteSde::linear(vec![vec![vec![0.3, 1.0], vec![-1.0, 0.2]]], vec![0.5, 0.5]).unwrap();
        let measure = LevyMeasure::discrete(vec![vec![0.7], vec![-0.5]], vec![1.0, 1.5]).unwrap();
        let path = DrivingPath::sample(&measure, 1.0, &mut stream(2, 0)).unwrap();
        let cfg = MarcusSolverConfig::default();
        let x = marcus_sde_solve(&sde, &path, 1.0, &cfg).unwrap();
        let phi = Diffeomorphism::cubic();
        let y = marcus_sde_solve(&transformed_sde(&sde, &phi).unwrap(), &path, 1.0, &cfg).unwrap();
        for (xs, ys) in x.states.iter().zip(&y.states) {
            let back = (phi.inverse)(ys).unwrap();
            assert!((norm(xs).powi(2) - norm(&back).powi(2)).abs() < 1e-7);
        }
    }

    #[test]
    fn statistics_over_paths() {
        let (sde, _, measure) = linear_single_jump_fixture();
        let stats = wong_zakai_statistics(
            &sde,
            &measure,
            &[1.0 / 16.0, 1.0 / 128.0],
            1.0,
            100,
            3,
            &MarcusSolverConfig::default(),
        )
        .unwrap();
        assert_eq!(stats[0].paths, 100);
        assert!(stats[1].mean < stats[0].mean);
        assert!(stats.iter().all(|s| s.median <= s.p90 && s.p90 <= s.max));
    }

    #[test]
    fn overflow_is_reported() {
        let sde = FiniteSde::new(
            1,
            vec![Arc::new(|x: &[f64]| vec![x[0] * x[0] * 1e3])],
            vec![1.0],
        )
        .unwrap();
        let path = DrivingPath::new(
            vec![JumpEvent {
                time: 0.5,
                mark: vec![1.0],
                cell: 0,
            }],
            vec![0.0],
        )
        .unwrap();
        assert!(matches!(
            marcus_sde_solve(&sde, &path, 1.0, &MarcusSolverConfig::default()),
            Err(Error::FlowOverflow(_))
        ));
    }
}
