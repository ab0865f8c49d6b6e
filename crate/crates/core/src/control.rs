//! Piecewise-constant controls, entropy cost, rate-function search and the
//! small-noise convergence experiments.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::NonlinearitySpec;
use crate::dynamics::{
    e_distance, solve_controlled, solve_nls, solve_skeleton, solve_stochastic, Model, SolverConfig,
    Trajectory,
};
use crate::error::{invalid, Error, Result};
use crate::noise::LevyMeasure;
use crate::rng::tagged_stream;
use crate::spectral::ComplexField;

/// `ψ(t, z)` constant on (time bin × mark cell), stored row-major by bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Control {
    edges: Vec<f64>,
    cells: usize,
    values: Vec<f64>,
    psi_max: f64,
}

impl Control {
    pub fn new(edges: Vec<f64>, cells: usize, values: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::ControlShape("need at least one time bin".into()));
        }
        if edges[0] != 0.0 {
            return Err(Error::ControlShape(format!(
                "first bin edge must be 0, got {}",
                edges[0]
            )));
        }
        if let Some(i) = edges.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::ControlShape(format!(
                "bin edges not increasing at index {}",
                i + 1
            )));
        }
        if !edges[edges.len() - 1].is_finite() {
            return Err(Error::ControlShape("horizon must be finite".into()));
        }
        if cells == 0 {
            return Err(Error::ControlShape("need at least one mark cell".into()));
        }
        let bins = edges.len() - 1;
        if values.len() != bins * cells {
            return Err(Error::ControlShape(format!(
                "{} values for {bins} bins x {cells} cells",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::UnboundedControl);
        }
        if let Some(v) = values.iter().find(|v| **v < 0.0) {
            return Err(invalid("psi", format!("controls must be >= 0, got {v}")));
        }
        let psi_max = values.iter().cloned().fold(0.0, f64::max);
        Ok(Self {
            edges,
            cells,
            values,
            psi_max,
        })
    }

    pub fn uniform_edges(horizon: f64, bins: usize) -> Vec<f64> {
        (0..=bins)
            .map(|b| horizon * b as f64 / bins as f64)
            .collect()
    }

    pub fn constant(horizon: f64, bins: usize, cells: usize, value: f64) -> Result<Self> {
        if !(horizon > 0.0) || bins == 0 {
            return Err(invalid(
                "bins",
                "need a positive horizon and at least one bin",
            ));
        }
        Self::new(
            Self::uniform_edges(horizon, bins),
            cells,
            vec![value; bins * cells],
        )
    }

    /// Builds `ψ` from `f(bin, cell)` on uniform bins.
    pub fn from_fn(
        horizon: f64,
        bins: usize,
        cells: usize,
        f: impl Fn(usize, usize) -> f64,
    ) -> Result<Self> {
        if !(horizon > 0.0) || bins == 0 {
            return Err(invalid(
                "bins",
                "need a positive horizon and at least one bin",
            ));
        }
        let values = (0..bins)
            .flat_map(|b| (0..cells).map(move |c| (b, c)))
            .map(|(b, c)| f(b, c))
            .collect();
        Self::new(Self::uniform_edges(horizon, bins), cells, values)
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn num_bins(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn num_cells(&self) -> usize {
        self.cells
    }

    pub fn horizon(&self) -> f64 {
        self.edges[self.edges.len() - 1]
    }

    pub fn psi_max(&self) -> f64 {
        self.psi_max
    }

    pub fn bin_width(&self, bin: usize) -> f64 {
        self.edges[bin + 1] - self.edges[bin]
    }

    #[inline]
    pub fn value(&self, bin: usize, cell: usize) -> f64 {
        self.values[bin * self.cells + cell]
    }

    /// Bin containing `t`, with bins closed on the left; `t ≥ T` maps to the last bin.
    pub fn bin_of(&self, t: f64) -> usize {
        let bins = self.num_bins();
        self.edges[1..bins].partition_point(|&e| e <= t)
    }

    /// Same values on new (bin × cell) data with the same edges.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.edges.clone(), self.cells, values)
    }

    /// Splits every bin into `factor` equal sub-bins carrying the parent value.
    pub fn refine_time(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(invalid("factor", "must be positive"));
        }
        let mut edges = Vec::with_capacity(self.num_bins() * factor + 1);
        let mut values = Vec::with_capacity(self.values.len() * factor);
        for b in 0..self.num_bins() {
            let (lo, hi) = (self.edges[b], self.edges[b + 1]);
            for s in 0..factor {
                edges.push(lo + (hi - lo) * s as f64 / factor as f64);
                values.extend_from_slice(&self.values[b * self.cells..(b + 1) * self.cells]);
            }
        }
        edges.push(self.horizon());
        Self::new(edges, self.cells, values)
    }

    pub fn is_identically_one(&self) -> bool {
        self.values.iter().all(|&v| v == 1.0)
    }
}

/// `ℓ(x) = x log x − x + 1` with `ℓ(0) = 1`.
#[inline]
pub fn ell(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        x * x.ln() - x + 1.0
    }
}

/// `Q(ψ) = Σ_bins Δt Σ_cells ν(cell) ℓ(ψ)`, exact for piecewise-constant controls.
pub fn q_cost(psi: &Control, measure: &LevyMeasure) -> Result<f64> {
    measure.check_control(psi)?;
    let mut total = 0.0;
    for b in 0..psi.num_bins() {
        let dt = psi.bin_width(b);
        for (c, cell) in measure.cells().iter().enumerate() {
            total += dt * cell.mass * ell(psi.value(b, c));
        }
    }
    Ok(total)
}

/// `ψ ∈ W^N`, i.e. `Q(ψ) ≤ N`.
pub fn wn_membership(psi: &Control, measure: &LevyMeasure, level: f64) -> Result<bool> {
    Ok(q_cost(psi, measure)? <= level)
}

/// Functional of the skeleton trajectory used as a rare-event target.
#[derive(Debug, Clone)]
pub enum Observable {
    /// `‖Y(T) − u_det(T)‖_{L²}` against a stored deterministic terminal state.
    TerminalDistance { reference: ComplexField },
    /// `∫_{lo ≤ x₀ ≤ hi} |Y(T)|² dx`.
    WindowMass { lo: f64, hi: f64 },
}

impl Observable {
    pub fn terminal_distance(
        u0: &ComplexField,
        spec: &NonlinearitySpec,
        horizon: f64,
        cfg: &SolverConfig,
    ) -> Result<Self> {
        let det = solve_nls(u0, spec, horizon, cfg)?;
        Ok(Observable::TerminalDistance {
            reference: det.final_state().clone(),
        })
    }

    pub fn evaluate(&self, traj: &Trajectory) -> Result<f64> {
        let last = traj.final_state();
        match self {
            Observable::TerminalDistance { reference } => last.l2_distance(reference),
            Observable::WindowMass { lo, hi } => last.window_mass(*lo, *hi),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Observable::TerminalDistance { .. } => {
                "terminal L2 distance from the deterministic solution".into()
            }
            Observable::WindowMass { lo, hi } => {
                format!("terminal mass in the window [{lo}, {hi}]")
            }
        }
    }
}

/// The event `F ≥ level`.
#[derive(Debug, Clone)]
pub struct Target {
    pub observable: Observable,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstantonConfig {
    /// Initial penalty weight.
    pub kappa: f64,
    /// Number of penalty rounds; `κ` grows 10× per round.
    pub rounds: usize,
    /// Accepted iterations per round at most.
    pub max_iters: usize,
    /// Relative finite-difference step.
    pub fd_step: f64,
    /// Stop a round when the projected step moves no entry by more than this.
    pub step_tol: f64,
}

impl Default for InstantonConfig {
    fn default() -> Self {
        Self {
            kappa: 10.0,
            rounds: 4,
            max_iters: 40,
            fd_step: 1e-4,
            step_tol: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub round: usize,
    pub iteration: usize,
    pub kappa: f64,
    /// Penalized objective `Q + κ·max(0, level − F)²`.
    pub objective: f64,
    pub cost: f64,
    pub violation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RateStatus {
    Feasible,
    InfeasibleOnGrid,
}

/// Result of the penalized search. `q_star` bounds the rate function from
/// above on the control grid; the penalized objective is non-increasing
/// within each penalty round of `trace`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateReport {
    pub status: RateStatus,
    pub q_star: Option<f64>,
    pub observable_value: f64,
    pub level: f64,
    pub target: String,
    pub control: Control,
    pub trace: Vec<TraceEntry>,
    pub evaluations: usize,
}

struct Evaluator<'a> {
    u0: &'a ComplexField,
    model: &'a Model,
    horizon: f64,
    cfg: &'a SolverConfig,
    target: &'a Target,
    template: &'a Control,
    count: std::sync::atomic::AtomicUsize,
}

impl Evaluator<'_> {
    fn observable(&self, values: &[f64]) -> Result<f64> {
        self.count
            .fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let psi = self.template.with_values(values.to_vec())?;
        let traj = solve_skeleton(self.u0, &psi, self.model, self.horizon, self.cfg)?;
        self.target.observable.evaluate(&traj)
    }

    fn cost(&self, values: &[f64]) -> Result<f64> {
        q_cost(
            &self.template.with_values(values.to_vec())?,
            &self.model.measure,
        )
    }
}

/// Projected-gradient search for the cheapest control reaching `F ≥ level`
/// on the grid of `init`.
pub fn instanton_search(
    target: &Target,
    u0: &ComplexField,
    model: &Model,
    horizon: f64,
    cfg: &SolverConfig,
    init: &Control,
    opts: &InstantonConfig,
) -> Result<RateReport> {
    model.measure.check_control(init)?;
    if !(opts.kappa > 0.0) || opts.rounds == 0 || !(opts.fd_step > 0.0) {
        return Err(invalid(
            "instanton",
            "need kappa > 0, rounds >= 1 and fd_step > 0",
        ));
    }
    let eval = Evaluator {
        u0,
        model,
        horizon,
        cfg,
        target,
        template: init,
        count: Default::default(),
    };
    let level = target.level;
    // ∂Q/∂ψ = Δt_b ν(cell) log ψ
    let weights: Vec<f64> = (0..init.num_bins())
        .flat_map(|b| {
            model
                .measure
                .cells()
                .iter()
                .map(move |c| init.bin_width(b) * c.mass)
        })
        .collect();
    let cost_grad = |psi: &[f64]| -> Vec<f64> {
        psi.iter()
            .zip(&weights)
            .map(|(&v, &w)| if v > 0.0 { w * v.ln() } else { -w * 50.0 })
            .collect()
    };

    let mut psi = init.values().to_vec();
    let mut f = eval.observable(&psi)?;
    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    let consider =
        |cost: f64, values: &[f64], fval: f64, best: &mut Option<(f64, Vec<f64>, f64)>| {
            if fval >= level && best.as_ref().is_none_or(|b| cost < b.0) {
                *best = Some((cost, values.to_vec(), fval));
            }
        };
    consider(eval.cost(&psi)?, &psi, f, &mut best);

    let mut trace = Vec::new();
    let mut kappa = opts.kappa;
    for round in 0..opts.rounds {
        let objective = |cost: f64, fval: f64| cost + kappa * (level - fval).max(0.0).powi(2);
        let mut cost = eval.cost(&psi)?;
        let mut obj = objective(cost, f);
        trace.push(TraceEntry {
            round,
            iteration: 0,
            kappa,
            objective: obj,
            cost,
            violation: (level - f).max(0.0),
        });
        let mut step = 1.0;
        for iteration in 1..=opts.max_iters {
            let mut grad = cost_grad(&psi);
            let violation = (level - f).max(0.0);
            if violation > 0.0 {
                let df = finite_difference_gradient(&eval, &psi, f, opts.fd_step)?;
                for (g, d) in grad.iter_mut().zip(df) {
                    *g -= 2.0 * kappa * violation * d;
                }
            }
            let mut accepted = None;
            while step > 1e-12 {
                let trial: Vec<f64> = psi
                    .iter()
                    .zip(&grad)
                    .map(|(v, g)| (v - step * g).max(0.0))
                    .collect();
                let moved: f64 = trial
                    .iter()
                    .zip(&psi)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                if moved <= opts.step_tol {
                    break;
                }
                let f_trial = eval.observable(&trial)?;
                let c_trial = eval.cost(&trial)?;
                let o_trial = objective(c_trial, f_trial);
                let decrease: f64 = grad
                    .iter()
                    .zip(trial.iter().zip(&psi))
                    .map(|(g, (a, b))| g * (a - b))
                    .sum();
                if o_trial <= obj + 1e-4 * decrease {
                    accepted = Some((trial, f_trial, c_trial, o_trial));
                    break;
                }
                step *= 0.5;
            }
            let Some((trial, f_trial, c_trial, o_trial)) = accepted else {
                break;
            };
            psi = trial;
            f = f_trial;
            cost = c_trial;
            obj = o_trial;
            consider(cost, &psi, f, &mut best);
            trace.push(TraceEntry {
                round,
                iteration,
                kappa,
                objective: obj,
                cost,
                violation: (level - f).max(0.0),
            });
            step = (step * 2.0).min(1e3);
        }
        kappa *= 10.0;
    }

    // push the final iterate along the ray from ψ ≡ 1 until the target is met
    if f < level {
        if let Some((_, values, fval)) = restore_feasibility(&eval, &psi, level)? {
            consider(eval.cost(&values)?, &values, fval, &mut best);
        }
    }

    let report = match best {
        Some((q, values, fval)) => RateReport {
            status: RateStatus::Feasible,
            q_star: Some(q),
            observable_value: fval,
            level,
            target: target.observable.describe(),
            control: init.with_values(values)?,
            trace,
            evaluations: eval.count.into_inner(),
        },
        None => RateReport {
            status: RateStatus::InfeasibleOnGrid,
            q_star: None,
            observable_value: f,
            level,
            target: target.observable.describe(),
            control: init.with_values(psi)?,
            trace,
            evaluations: eval.count.into_inner(),
        },
    };
    Ok(report)
}

fn finite_difference_gradient(
    eval: &Evaluator<'_>,
    psi: &[f64],
    f0: f64,
    rel: f64,
) -> Result<Vec<f64>> {
    (0..psi.len())
        .into_par_iter()
        .map(|i| {
            let h = rel * psi[i].abs().max(1.0);
            let mut up = psi.to_vec();
            up[i] += h;
            let f_up = eval.observable(&up)?;
            if psi[i] - h >= 0.0 {
                let mut down = psi.to_vec();
                down[i] -= h;
                Ok((f_up - eval.observable(&down)?) / (2.0 * h))
            } else {
                Ok((f_up - f0) / h)
            }
        })
        .collect()
}

/// Smallest `s ≥ 1` (to bisection accuracy) with `F(1 + s(ψ − 1)) ≥ level`.
fn restore_feasibility(
    eval: &Evaluator<'_>,
    psi: &[f64],
    level: f64,
) -> Result<Option<(f64, Vec<f64>, f64)>> {
    let along =
        |s: f64| -> Vec<f64> { psi.iter().map(|v| (1.0 + s * (v - 1.0)).max(0.0)).collect() };
    let mut lo = 1.0;
    let mut hi = None;
    let mut s = 1.0;
    for _ in 0..12 {
        s *= 1.5;
        let values = along(s);
        let fval = eval.observable(&values)?;
        if fval >= level {
            hi = Some((s, values, fval));
            break;
        }
        lo = s;
    }
    let Some(mut hi) = hi else {
        return Ok(None);
    };
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi.0);
        let values = along(mid);
        let fval = eval.observable(&values)?;
        if fval >= level {
            hi = (mid, values, fval);
        } else {
            lo = mid;
        }
        if hi.0 - lo < 1e-10 {
            break;
        }
    }
    Ok(Some(hi))
}

/// Wilson score interval for `hits` successes out of `n` at normal quantile `z`.
pub fn wilson_interval(hits: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = hits as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let centre = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    let lo = if hits == 0 {
        0.0
    } else {
        (centre - half).max(0.0)
    };
    let hi = if hits == n {
        1.0
    } else {
        (centre + half).min(1.0)
    };
    (lo, hi)
}

pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RareEventRow {
    pub eps: f64,
    pub samples: usize,
    pub hits: usize,
    pub p_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// `ε log p̂`; `None` when `p̂ = 0`.
    pub eps_log_p: Option<f64>,
    pub eps_log_ci_low: Option<f64>,
    pub eps_log_ci_high: f64,
    pub unresolved: bool,
}

impl RareEventRow {
    fn new(eps: f64, hits: usize, samples: usize) -> Self {
        let p_hat = hits as f64 / samples as f64;
        let (ci_low, ci_high) = wilson_interval(hits, samples, Z95);
        let log = |p: f64| if p > 0.0 { Some(eps * p.ln()) } else { None };
        Self {
            eps,
            samples,
            hits,
            p_hat,
            ci_low,
            ci_high,
            eps_log_p: log(p_hat),
            eps_log_ci_low: log(ci_low),
            eps_log_ci_high: eps * ci_high.ln(),
            unresolved: hits == 0,
        }
    }

    /// Width of the confidence interval on the `ε log p` scale.
    pub fn eps_log_ci_width(&self) -> Option<f64> {
        self.eps_log_ci_low.map(|lo| self.eps_log_ci_high - lo)
    }
}

/// Crude Monte Carlo of `P(F(u^ε) ≥ level)` for each `ε`. Path `k` at the
/// `i`-th `ε` uses stream `k` of tag `i` under `seed`. The largest `ε`
/// is run first; no hit there aborts with [`Error::LevelOutOfReach`].
#[allow(clippy::too_many_arguments)]
pub fn rare_event_mc(
    eps_list: &[f64],
    target: &Target,
    samples: usize,
    u0: &ComplexField,
    model: &Model,
    horizon: f64,
    cfg: &SolverConfig,
    seed: u64,
) -> Result<Vec<RareEventRow>> {
    if samples < 100 {
        return Err(invalid(
            "samples",
            format!("at least 100 required, got {samples}"),
        ));
    }
    if eps_list.is_empty() {
        return Err(invalid("eps", "need at least one noise level"));
    }
    let mut order: Vec<usize> = (0..eps_list.len()).collect();
    order.sort_by(|&a, &b| eps_list[b].total_cmp(&eps_list[a]));
    let mut rows: Vec<Option<RareEventRow>> = vec![None; eps_list.len()];
    for (rank, &i) in order.iter().enumerate() {
        let eps = eps_list[i];
        let hits = (0..samples as u64)
            .into_par_iter()
            .map(|k| {
                let mut rng = tagged_stream(seed, i as u32, k);
                let traj = solve_stochastic(u0, eps, model, horizon, &mut rng, cfg)?;
                Ok(target.observable.evaluate(&traj)? >= target.level)
            })
            .collect::<Result<Vec<bool>>>()?
            .into_iter()
            .filter(|&h| h)
            .count();
        if rank == 0 && hits == 0 {
            return Err(Error::LevelOutOfReach {
                level: target.level,
                detail: format!("no path out of {samples} reached it at the largest eps = {eps}"),
            });
        }
        rows[i] = Some(RareEventRow::new(eps, hits, samples));
    }
    Ok(rows
        .into_iter()
        .map(|r| r.expect("every row computed"))
        .collect())
}

/// `ψ_n = 1 + (ψ₀ − 1)(1 − 1/n)`.
pub fn continuity_sequence(psi0: &Control, ns: &[usize]) -> Result<Vec<Control>> {
    ns.iter()
        .map(|&n| {
            if n == 0 {
                return Err(invalid("n", "sequence indices start at 1"));
            }
            let s = 1.0 - 1.0 / n as f64;
            psi0.with_values(psi0.values().iter().map(|v| 1.0 + (v - 1.0) * s).collect())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuityRow {
    pub index: usize,
    pub sup_control_gap: f64,
    pub cost: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuityTable {
    pub rows: Vec<ContinuityRow>,
    /// Smallest `C` with `distance ≤ C · sup|ψ_n − ψ₀|` over the rows.
    pub lipschitz_fit: f64,
}

/// E-norm distances `‖Y^{ψ_n} − Y^{ψ₀}‖` for a sequence of controls.
#[allow(clippy::too_many_arguments)]
pub fn skeleton_continuity_experiment(
    sequence: &[Control],
    psi0: &Control,
    u0: &ComplexField,
    model: &Model,
    horizon: f64,
    cfg: &SolverConfig,
    p: f64,
    r: f64,
) -> Result<ContinuityTable> {
    let base = solve_skeleton(u0, psi0, model, horizon, cfg)?;
    let rows = sequence
        .par_iter()
        .enumerate()
        .map(|(index, psi)| {
            if psi.edges() != psi0.edges() || psi.num_cells() != psi0.num_cells() {
                return Err(Error::ControlShape(
                    "sequence controls must share the grid of psi0".into(),
                ));
            }
            let traj = solve_skeleton(u0, psi, model, horizon, cfg)?;
            let gap = psi
                .values()
                .iter()
                .zip(psi0.values())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            Ok(ContinuityRow {
                index,
                sup_control_gap: gap,
                cost: q_cost(psi, &model.measure)?,
                distance: e_distance(&traj, &base, p, r)?.e_norm(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let lipschitz_fit = rows
        .iter()
        .filter(|r| r.sup_control_gap > 0.0)
        .map(|r| r.distance / r.sup_control_gap)
        .fold(0.0, f64::max);
    Ok(ContinuityTable {
        rows,
        lipschitz_fit,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub eps: f64,
    pub samples: usize,
    pub exceedances: usize,
    pub p_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mean_distance: f64,
    pub max_distance: f64,
}

/// Empirical `P(‖X^{ψ,ε} − Y^ψ‖_E ≥ δ)` and mean distance for each `ε`,
/// with path `k` at the `i`-th `ε` on stream `k` of tag `i`.
#[allow(clippy::too_many_arguments)]
pub fn controlled_convergence_experiment(
    psi: &Control,
    eps_list: &[f64],
    delta: f64,
    samples: usize,
    u0: &ComplexField,
    model: &Model,
    horizon: f64,
    cfg: &SolverConfig,
    seed: u64,
    p: f64,
    r: f64,
) -> Result<Vec<ConvergenceRow>> {
    if samples == 0 {
        return Err(invalid("samples", "must be positive"));
    }
    let skeleton = solve_skeleton(u0, psi, model, horizon, cfg)?;
    eps_list
        .iter()
        .enumerate()
        .map(|(i, &eps)| {
            let dists = (0..samples as u64)
                .into_par_iter()
                .map(|k| {
                    let mut rng = tagged_stream(seed, i as u32, k);
                    let x = solve_controlled(u0, eps, psi, model, horizon, &mut rng, cfg)?;
                    Ok(e_distance(&x, &skeleton, p, r)?.e_norm())
                })
                .collect::<Result<Vec<f64>>>()?;
            let exceedances = dists.iter().filter(|&&d| d >= delta).count();
            let (ci_low, ci_high) = wilson_interval(exceedances, samples, Z95);
            Ok(ConvergenceRow {
                eps,
                samples,
                exceedances,
                p_hat: exceedances as f64 / samples as f64,
                ci_low,
                ci_high,
                mean_distance: dists.iter().sum::<f64>() / samples as f64,
                max_distance: dists.iter().cloned().fold(0.0, f64::max),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{Profile, SaturableFamily};
    use crate::spectral::SpectralGrid;
    use proptest::prelude::*;

    fn small() -> (ComplexField, Model, SolverConfig) {
        let g = SpectralGrid::new(1, 64, 20.0).unwrap();
        let model = Model::new(
            NonlinearitySpec::new(1.0, 1.0, 1).unwrap(),
            SaturableFamily::uniform(Profile::Saturation { rho: 1.0 }, 1).unwrap(),
            LevyMeasure::symmetric_default(),
        )
        .unwrap();
        let cfg = SolverConfig {
            dt: 0.01,
            stride: 5,
            ..Default::default()
        };
        (ComplexField::gaussian(g, 0.8, 1.0, 0.0), model, cfg)
    }

    #[test]
    fn control_validation() {
        assert!(Control::new(vec![0.0, 1.0], 2, vec![1.0, -0.5]).is_err());
        assert_eq!(
            Control::new(vec![0.0, 1.0], 1, vec![f64::INFINITY]),
            Err(Error::UnboundedControl)
        );
        assert!(Control::new(vec![0.0, 0.5, 0.5, 1.0], 1, vec![1.0; 3]).is_err());
        assert!(Control::new(vec![0.1, 1.0], 1, vec![1.0]).is_err());
        assert!(Control::new(vec![0.0, 1.0], 2, vec![1.0]).is_err());
        let psi = Control::from_fn(1.0, 4, 2, |b, c| (b * 2 + c) as f64).unwrap();
        assert_eq!(psi.psi_max(), 7.0);
        assert_eq!(psi.bin_of(0.0), 0);
        assert_eq!(psi.bin_of(0.25), 1);
        assert_eq!(psi.bin_of(0.9999), 3);
        assert_eq!(psi.bin_of(1.0), 3);
        assert_eq!(psi.value(2, 1), 5.0);
        let fine = psi.refine_time(2).unwrap();
        assert_eq!(fine.num_bins(), 8);
        assert_eq!(fine.value(5, 1), 5.0);
    }

    #[test]
    fn entropy_cost_closed_forms() {
        let nu = LevyMeasure::symmetric_default();
        let horizon = 1.5;
        let q = |v: f64| q_cost(&Control::constant(horizon, 3, 4, v).unwrap(), &nu).unwrap();
        assert_eq!(q(1.0), 0.0);
        assert!((q(0.0) - horizon * nu.total_mass()).abs() < 1e-12);
        assert!((q(std::f64::consts::E) - horizon * nu.total_mass()).abs() < 1e-12);
        let psi = Control::from_fn(horizon, 3, 4, |b, c| 0.5 + (b + c) as f64).unwrap();
        let fine = psi.refine_time(4).unwrap();
        assert!((q_cost(&fine, &nu).unwrap() - q_cost(&psi, &nu).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn membership_examples() {
        let nu = LevyMeasure::symmetric_default();
        let ones = Control::constant(1.0, 2, 4, 1.0).unwrap();
        assert!(wn_membership(&ones, &nu, 0.0).unwrap());
        let zeros = Control::constant(1.0, 2, 4, 0.0).unwrap();
        assert!(!wn_membership(&zeros, &nu, 1.9).unwrap());
        assert!(wn_membership(&zeros, &nu, q_cost(&zeros, &nu).unwrap()).unwrap());
    }

    proptest! {
        #[test]
        fn cost_is_convex_and_nonnegative(a in proptest::collection::vec(0.0f64..6.0, 8), b in proptest::collection::vec(0.0f64..6.0, 8)) {
            let nu = LevyMeasure::symmetric_default();
            let pa = Control::new(Control::uniform_edges(1.0, 2), 4, a.clone()).unwrap();
            let pb = Control::new(Control::uniform_edges(1.0, 2), 4, b.clone()).unwrap();
            let mid = pa.with_values(a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect()).unwrap();
            let (qa, qb, qm) = (q_cost(&pa, &nu).unwrap(), q_cost(&pb, &nu).unwrap(), q_cost(&mid, &nu).unwrap());
            prop_assert!(qa >= 0.0 && qb >= 0.0);
            prop_assert!(qm <= 0.5 * (qa + qb) + 1e-12);
        }

        #[test]
        fn membership_is_monotone_in_the_level(v in 0.0f64..5.0, n1 in 0.0f64..10.0, n2 in 0.0f64..10.0) {
            let nu = LevyMeasure::symmetric_default();
            let psi = Control::constant(1.0, 2, 4, v).unwrap();
            let (lo, hi) = if n1 <= n2 { (n1, n2) } else { (n2, n1) };
            prop_assert!(!wn_membership(&psi, &nu, lo).unwrap() || wn_membership(&psi, &nu, hi).unwrap());
        }
    }

    #[test]
    fn wilson_interval_examples() {
        let (lo, hi) = wilson_interval(0, 100, Z95);
        assert_eq!(lo, 0.0);
        assert!((hi - 0.036_995).abs() < 1e-5);
        let (lo, hi) = wilson_interval(50, 100, Z95);
        assert!((lo - 0.403_832).abs() < 1e-5 && (hi - 0.596_168).abs() < 1e-5);
    }

    #[test]
    fn trivial_target_returns_the_unit_control() {
        let (u0, model, cfg) = small();
        let obs = Observable::terminal_distance(&u0, &model.spec, 0.5, &cfg).unwrap();
        let target = Target {
            observable: obs,
            level: 0.0,
        };
        let init = Control::constant(0.5, 2, 4, 1.0).unwrap();
        let rep = instanton_search(
            &target,
            &u0,
            &model,
            0.5,
            &cfg,
            &init,
            &InstantonConfig::default(),
        )
        .unwrap();
        assert_eq!(rep.status, RateStatus::Feasible);
        assert_eq!(rep.q_star, Some(0.0));
        assert!(rep.control.is_identically_one());
    }

    #[test]
    fn unreachable_target_is_infeasible_on_grid() {
        let (u0, model, cfg) = small();
        let mass = u0.l2_norm().powi(2);
        let target = Target {
            observable: Observable::WindowMass {
                lo: -10.0,
                hi: 10.0,
            },
            level: 2.0 * mass,
        };
        let init = Control::constant(0.2, 1, 4, 1.0).unwrap();
        let opts = InstantonConfig {
            rounds: 1,
            max_iters: 3,
            ..Default::default()
        };
        let rep = instanton_search(&target, &u0, &model, 0.2, &cfg, &init, &opts).unwrap();
        assert_eq!(rep.status, RateStatus::InfeasibleOnGrid);
        assert_eq!(rep.q_star, None);
    }

    #[test]
    fn instanton_report_is_consistent() {
        let (u0, model, cfg) = small();
        let obs = Observable::terminal_distance(&u0, &model.spec, 0.5, &cfg).unwrap();
        let target = Target {
            observable: obs,
            level: 0.02,
        };
        let init = Control::constant(0.5, 2, 4, 1.0).unwrap();
        let opts = InstantonConfig {
            max_iters: 15,
            ..Default::default()
        };
        let rep = instanton_search(&target, &u0, &model, 0.5, &cfg, &init, &opts).unwrap();
        let q = rep.q_star.unwrap();
        assert!((q_cost(&rep.control, &model.measure).unwrap() - q).abs() <= 1e-12);
        let y = solve_skeleton(&u0, &rep.control, &model, 0.5, &cfg).unwrap();
        assert!(target.observable.evaluate(&y).unwrap() >= 0.02);
        assert!(q > 0.0);
        for w in rep.trace.windows(2) {
            if w[0].round == w[1].round {
                assert!(w[1].objective <= w[0].objective);
            }
        }
    }

    #[test]
    fn certain_event_has_unit_probability() {
        let (u0, model, cfg) = small();
        let obs = Observable::terminal_distance(&u0, &model.spec, 0.3, &cfg).unwrap();
        let target = Target {
            observable: obs,
            level: 0.0,
        };
        let rows = rare_event_mc(&[0.2, 0.1], &target, 100, &u0, &model, 0.3, &cfg, 1).unwrap();
        for row in rows {
            assert_eq!(row.p_hat, 1.0);
            assert_eq!(row.eps_log_p, Some(0.0));
            assert!(!row.unresolved);
        }
        assert!(rare_event_mc(&[0.2], &target, 50, &u0, &model, 0.3, &cfg, 1).is_err());
    }

    #[test]
    fn unreachable_level_fails_the_preflight() {
        let (u0, model, cfg) = small();
        let obs = Observable::terminal_distance(&u0, &model.spec, 0.3, &cfg).unwrap();
        // the terminal distance never exceeds twice the conserved norm
        let target = Target {
            observable: obs,
            level: 3.0 * u0.l2_norm(),
        };
        let err = rare_event_mc(&[0.2], &target, 100, &u0, &model, 0.3, &cfg, 1).unwrap_err();
        assert!(matches!(err, Error::LevelOutOfReach { .. }));
    }

    #[test]
    fn confidence_intervals_shrink_with_the_sample_size() {
        let (u0, model, cfg) = small();
        let obs = Observable::terminal_distance(&u0, &model.spec, 0.3, &cfg).unwrap();
        // pick the median terminal distance as the level
        let mut d: Vec<f64> = (0..200)
            .map(|k| {
                let traj =
                    solve_stochastic(&u0, 0.2, &model, 0.3, &mut tagged_stream(2, 0, k), &cfg)
                        .unwrap();
                obs.evaluate(&traj).unwrap()
            })
            .collect();
        d.sort_by(f64::total_cmp);
        let target = Target {
            observable: obs,
            level: d[100],
        };
        let small_n = rare_event_mc(&[0.2], &target, 200, &u0, &model, 0.3, &cfg, 7).unwrap();
        let large_n = rare_event_mc(&[0.2], &target, 800, &u0, &model, 0.3, &cfg, 7).unwrap();
        let ratio =
            (small_n[0].ci_high - small_n[0].ci_low) / (large_n[0].ci_high - large_n[0].ci_low);
        assert!((1.7..2.3).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn continuity_of_the_skeleton_map() {
        let (u0, model, cfg) = small();
        let psi0 =
            Control::from_fn(0.5, 2, 4, |b, c| if c >= 2 { 2.0 + b as f64 } else { 0.7 }).unwrap();
        let same = skeleton_continuity_experiment(
            std::slice::from_ref(&psi0),
            &psi0,
            &u0,
            &model,
            0.5,
            &cfg,
            8.0,
            4.0,
        )
        .unwrap();
        assert_eq!(same.rows[0].distance, 0.0);
        let seq = continuity_sequence(&psi0, &[1, 2, 4, 8, 16]).unwrap();
        let table =
            skeleton_continuity_experiment(&seq, &psi0, &u0, &model, 0.5, &cfg, 8.0, 4.0).unwrap();
        assert!(table.rows.windows(2).all(|w| w[1].distance < w[0].distance));
        let q0 = q_cost(&psi0, &model.measure).unwrap();
        assert!(table.rows.iter().all(|r| r.cost <= q0 + 1e-12));
        assert!(table
            .rows
            .iter()
            .all(|r| r.distance <= table.lipschitz_fit * r.sup_control_gap * (1.0 + 1e-12)));
    }

    #[test]
    fn decoupled_noise_gives_zero_distance() {
        let (u0, mut model, cfg) = small();
        model.family = SaturableFamily::uniform(Profile::Constant { value: 0.0 }, 1).unwrap();
        let psi = Control::from_fn(0.3, 3, 4, |_, c| if c >= 2 { 3.0 } else { 1.0 }).unwrap();
        let rows = controlled_convergence_experiment(
            &psi,
            &[0.1, 0.05],
            1e-12,
            20,
            &u0,
            &model,
            0.3,
            &cfg,
            3,
            8.0,
            4.0,
        )
        .unwrap();
        for row in rows {
            assert_eq!(row.exceedances, 0);
            assert_eq!(row.max_distance, 0.0);
        }
    }

    #[test]
    fn huge_threshold_is_never_exceeded() {
        let (u0, model, cfg) = small();
        let psi = Control::from_fn(0.3, 3, 4, |_, c| if c >= 2 { 3.0 } else { 1.0 }).unwrap();
        let rows = controlled_convergence_experiment(
            &psi,
            &[0.1],
            1e3,
            20,
            &u0,
            &model,
            0.3,
            &cfg,
            3,
            8.0,
            4.0,
        )
        .unwrap();
        assert_eq!(rows[0].p_hat, 0.0);
        assert!(rows[0].mean_distance > 0.0 && rows[0].max_distance < 1e3);
    }
}
