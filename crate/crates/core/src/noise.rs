//! Lévy intensity measures on the punctured unit ball, Poisson random measure
//! sampling (plain and thinned), and the Marcus jump map.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::coefficients::SaturableFamily;
use crate::control::Control;
use crate::error::{invalid, Error, Result};
use crate::spectral::ComplexField;

/// One cell of the mark partition: controls are constant on cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkCell {
    /// `ν(cell)`.
    pub mass: f64,
    /// `∫_cell z ν(dz)`.
    pub first_moment: Vec<f64>,
    /// `∫_cell |z|² ν(dz)`.
    pub second_moment: f64,
    /// Discrete atom, or radial shell `[r_lo, r_hi]` with an optional sign (m = 1).
    pub support: CellSupport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CellSupport {
    Atom(Vec<f64>),
    Shell {
        r_lo: f64,
        r_hi: f64,
        sign: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MeasureKind {
    Discrete,
    /// `ν(dz) = 2c r^{-1-α} dr ⊗ (uniform direction)` on `δ_min ≤ |z| ≤ 1`;
    /// for `m = 1` this is the density `c|z|^{-1-α}` on both half-lines.
    Radial {
        alpha: f64,
        c: f64,
        delta_min: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevyMeasure {
    m: usize,
    kind: MeasureKind,
    cells: Vec<MarkCell>,
    total_mass: f64,
    second_moment: f64,
    first_moment: Vec<f64>,
    /// Cumulative cell masses for categorical sampling.
    cumulative: Vec<f64>,
}

/// A realized jump: time, mark, and the index of the mark's cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent {
    pub time: f64,
    pub mark: Vec<f64>,
    pub cell: usize,
}

impl LevyMeasure {
    pub fn discrete(atoms: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() || atoms.len() != weights.len() {
            return Err(invalid(
                "atoms",
                "need a non-empty atom list with one weight per atom",
            ));
        }
        let m = atoms[0].len();
        if m == 0 {
            return Err(invalid("atoms", "marks must have at least one component"));
        }
        let mut cells = Vec::with_capacity(atoms.len());
        for (i, (z, &w)) in atoms.into_iter().zip(&weights).enumerate() {
            if z.len() != m {
                return Err(invalid(
                    "atoms",
                    format!("atom {i} has dimension {} != {m}", z.len()),
                ));
            }
            let norm = euclidean(&z);
            if !(norm > 0.0 && norm <= 1.0) {
                return Err(invalid(
                    "atoms",
                    format!("atom {i} has |z| = {norm}; marks must satisfy 0 < |z| <= 1"),
                ));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(invalid(
                    "weights",
                    format!("weight {i} must be positive, got {w}"),
                ));
            }
            cells.push(MarkCell {
                mass: w,
                first_moment: z.iter().map(|v| v * w).collect(),
                second_moment: w * norm * norm,
                support: CellSupport::Atom(z),
            });
        }
        Ok(Self::from_cells(m, MeasureKind::Discrete, cells))
    }

    /// Equal weights on `{±0.25, ±0.75}` in one mark dimension, total mass 2.
    pub fn symmetric_default() -> Self {
        Self::discrete(
            vec![vec![-0.75], vec![-0.25], vec![0.25], vec![0.75]],
            vec![0.5; 4],
        )
        .expect("valid default measure")
    }

    /// Truncated radial measure; `shells` equal-width radial cells carry the
    /// control (split by sign when `m = 1`).
    pub fn radial(m: usize, alpha: f64, c: f64, delta_min: f64, shells: usize) -> Result<Self> {
        if m == 0 {
            return Err(invalid("m", "must be positive"));
        }
        if !(alpha > 0.0 && alpha < 2.0) {
            return Err(invalid("alpha", format!("must lie in (0, 2), got {alpha}")));
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(invalid("c", format!("must be positive, got {c}")));
        }
        if !(delta_min > 0.0 && delta_min < 1.0) {
            return Err(invalid(
                "delta_min",
                format!("must lie in (0, 1) so the truncated mass is finite, got {delta_min}"),
            ));
        }
        if shells == 0 {
            return Err(invalid("shells", "must be positive"));
        }
        let density = |r: f64| c * r.powf(-1.0 - alpha);
        let mut cells = Vec::new();
        for s in 0..shells {
            let r_lo = delta_min + (1.0 - delta_min) * s as f64 / shells as f64;
            let r_hi = delta_min + (1.0 - delta_min) * (s + 1) as f64 / shells as f64;
            let mass = adaptive_simpson(&density, r_lo, r_hi, 1e-13)?;
            let first = adaptive_simpson(&|r| r * density(r), r_lo, r_hi, 1e-13)?;
            let second = adaptive_simpson(&|r| r * r * density(r), r_lo, r_hi, 1e-13)?;
            if m == 1 {
                for sign in [-1.0, 1.0] {
                    cells.push(MarkCell {
                        mass,
                        first_moment: vec![sign * first],
                        second_moment: second,
                        support: CellSupport::Shell {
                            r_lo,
                            r_hi,
                            sign: Some(sign),
                        },
                    });
                }
            } else {
                cells.push(MarkCell {
                    mass: 2.0 * mass,
                    first_moment: vec![0.0; m],
                    second_moment: 2.0 * second,
                    support: CellSupport::Shell {
                        r_lo,
                        r_hi,
                        sign: None,
                    },
                });
            }
        }
        Ok(Self::from_cells(
            m,
            MeasureKind::Radial {
                alpha,
                c,
                delta_min,
            },
            cells,
        ))
    }

    fn from_cells(m: usize, kind: MeasureKind, cells: Vec<MarkCell>) -> Self {
        let total_mass = cells.iter().map(|c| c.mass).sum();
        let second_moment = cells.iter().map(|c| c.second_moment).sum();
        let mut first_moment = vec![0.0; m];
        for c in &cells {
            for (acc, v) in first_moment.iter_mut().zip(&c.first_moment) {
                *acc += v;
            }
        }
        let mut cumulative = Vec::with_capacity(cells.len());
        let mut acc = 0.0;
        for c in &cells {
            acc += c.mass;
            cumulative.push(acc);
        }
        Self {
            m,
            kind,
            cells,
            total_mass,
            second_moment,
            first_moment,
            cumulative,
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn kind(&self) -> &MeasureKind {
        &self.kind
    }

    pub fn cells(&self) -> &[MarkCell] {
        &self.cells
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    /// `ν(B)`.
    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    /// `∫_B |z|² ν(dz)`.
    pub fn second_moment(&self) -> f64 {
        self.second_moment
    }

    /// `m_j = ∫_B z_j ν(dz)`.
    pub fn drift_moments(&self) -> &[f64] {
        &self.first_moment
    }

    /// `c_j(t) = ∫_B z_j (ψ(t, z) - 1) ν(dz)`.
    pub fn control_moments(&self, psi: &Control, t: f64) -> Result<Vec<f64>> {
        self.check_control(psi)?;
        let bin = psi.bin_of(t);
        Ok(self.control_moments_in_bin(psi, bin))
    }

    pub(crate) fn control_moments_in_bin(&self, psi: &Control, bin: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for (cell, c) in self.cells.iter().enumerate() {
            let excess = psi.value(bin, cell) - 1.0;
            if excess != 0.0 {
                for (acc, v) in out.iter_mut().zip(&c.first_moment) {
                    *acc += excess * v;
                }
            }
        }
        out
    }

    pub fn check_control(&self, psi: &Control) -> Result<()> {
        if psi.num_cells() != self.cells.len() {
            return Err(Error::ControlShape(format!(
                "control has {} mark cells, measure has {}",
                psi.num_cells(),
                self.cells.len()
            )));
        }
        Ok(())
    }

    /// Bound on the L² effect of the discarded jumps below `δ_min`:
    /// `ε ∫_{|z|<δ_min} |z|² ν(dz)` with the density continued to the origin.
    pub fn truncation_remainder_bound(&self, eps: f64) -> f64 {
        match self.kind {
            MeasureKind::Discrete => 0.0,
            MeasureKind::Radial {
                alpha,
                c,
                delta_min,
            } => eps * 2.0 * c * delta_min.powf(2.0 - alpha) / (2.0 - alpha),
        }
    }

    fn sample_cell<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u = rng.random::<f64>() * self.total_mass;
        self.cumulative
            .partition_point(|&c| c <= u)
            .min(self.cells.len() - 1)
    }

    fn sample_in_cell<R: Rng + ?Sized>(&self, cell: usize, rng: &mut R) -> Vec<f64> {
        match (&self.cells[cell].support, &self.kind) {
            (CellSupport::Atom(z), _) => z.clone(),
            (CellSupport::Shell { r_lo, r_hi, sign }, MeasureKind::Radial { alpha, .. }) => {
                // inverse CDF of r^{-1-α} on [r_lo, r_hi]
                let u: f64 = rng.random();
                let lo = r_lo.powf(-alpha);
                let hi = r_hi.powf(-alpha);
                let r = (lo - u * (lo - hi)).powf(-1.0 / alpha);
                match sign {
                    Some(s) => vec![s * r],
                    None => {
                        let mut dir: Vec<f64> =
                            (0..self.m).map(|_| StandardNormal.sample(rng)).collect();
                        let norm = euclidean(&dir).max(f64::MIN_POSITIVE);
                        dir.iter_mut().for_each(|v| *v *= r / norm);
                        dir
                    }
                }
            }
            (CellSupport::Shell { .. }, MeasureKind::Discrete) => {
                unreachable!("discrete measures have atom cells")
            }
        }
    }

    /// Mark distribution `ν/ν(B)`.
    pub fn sample_mark<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, Vec<f64>) {
        let cell = self.sample_cell(rng);
        (cell, self.sample_in_cell(cell, rng))
    }
}

/// Jumps of a Poisson random measure with intensity `ε⁻¹ dt ⊗ ν` on `(0, T]`.
pub fn sample_prm<R: Rng + ?Sized>(
    measure: &LevyMeasure,
    eps: f64,
    horizon: f64,
    rng: &mut R,
) -> Result<Vec<JumpEvent>> {
    check_eps_horizon(eps, horizon)?;
    let rate = measure.total_mass() / eps;
    let mut events = Vec::new();
    if horizon == 0.0 || rate == 0.0 {
        return Ok(events);
    }
    let clock = Exp::new(rate).map_err(|e| invalid("rate", e.to_string()))?;
    let mut t = 0.0;
    loop {
        t += clock.sample(rng);
        if t > horizon {
            break;
        }
        let (cell, mark) = measure.sample_mark(rng);
        events.push(JumpEvent {
            time: t,
            mark,
            cell,
        });
    }
    Ok(events)
}

/// Jumps with intensity `ε⁻¹ ψ(t, z) dt ⊗ ν`, by thinning a majorant stream
/// of rate `ε⁻¹ ψ_max ν(B)`. Proposals with `ψ = ψ_max` are accepted without
/// consuming randomness, so `ψ ≡ 1` reproduces [`sample_prm`] draw for draw.
pub fn sample_controlled_prm<R: Rng + ?Sized>(
    measure: &LevyMeasure,
    psi: &Control,
    eps: f64,
    horizon: f64,
    rng: &mut R,
) -> Result<Vec<JumpEvent>> {
    check_eps_horizon(eps, horizon)?;
    measure.check_control(psi)?;
    let psi_max = psi.psi_max();
    if !psi_max.is_finite() {
        return Err(Error::UnboundedControl);
    }
    if horizon > psi.horizon() * (1.0 + 1e-12) {
        return Err(Error::ControlShape(format!(
            "control covers [0, {}], sampling requested on [0, {horizon}]",
            psi.horizon()
        )));
    }
    let rate = psi_max * measure.total_mass() / eps;
    let mut events = Vec::new();
    if horizon == 0.0 || rate == 0.0 {
        return Ok(events);
    }
    let clock = Exp::new(rate).map_err(|e| invalid("rate", e.to_string()))?;
    let mut t = 0.0;
    loop {
        t += clock.sample(rng);
        if t > horizon {
            break;
        }
        let (cell, mark) = measure.sample_mark(rng);
        let value = psi.value(psi.bin_of(t), cell);
        let accept = value >= psi_max || rng.random::<f64>() * psi_max < value;
        if accept {
            events.push(JumpEvent {
                time: t,
                mark,
                cell,
            });
        }
    }
    Ok(events)
}

fn check_eps_horizon(eps: f64, horizon: f64) -> Result<()> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(invalid("eps", format!("must be positive, got {eps}")));
    }
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(invalid("horizon", format!("must be >= 0, got {horizon}")));
    }
    Ok(())
}

/// Phase angle `Σ_j z_j g̃_j(|y|²)` of the Marcus flow.
#[inline]
pub fn flow_angle(y: Complex64, z: &[f64], family: &SaturableFamily) -> f64 {
    family.weighted_sum(z, y.norm_sqr())
}

/// Time-one map of `Φ' = -iε Σ_j z_j g_j(Φ)`, `Φ(0) = y`.
///
/// The flow preserves `|Φ|`, so the generator is frozen at its initial value and
/// the map is the rotation `exp(-iε Σ_j z_j g̃_j(|y|²)) y`.
#[inline]
pub fn marcus_flow(y: Complex64, z: &[f64], eps: f64, family: &SaturableFamily) -> Complex64 {
    y * Complex64::from_polar(1.0, -eps * flow_angle(y, z, family))
}

/// Classical RK4 reference for [`marcus_flow`] on `[0, 1]`.
pub fn marcus_flow_ode_oracle(
    y: Complex64,
    z: &[f64],
    eps: f64,
    family: &SaturableFamily,
    steps: usize,
) -> Result<Complex64> {
    if steps < 4 {
        return Err(invalid(
            "steps",
            format!("at least 4 required, got {steps}"),
        ));
    }
    let rhs = |phi: Complex64| -Complex64::i() * eps * phi * flow_angle(phi, z, family);
    let h = 1.0 / steps as f64;
    let mut phi = y;
    for _ in 0..steps {
        let k1 = rhs(phi);
        let k2 = rhs(phi + k1 * (0.5 * h));
        let k3 = rhs(phi + k2 * (0.5 * h));
        let k4 = rhs(phi + k3 * h);
        phi += (k1 + 2.0 * k2 + 2.0 * k3 + k4) * (h / 6.0);
    }
    Ok(phi)
}

/// `G(ε, z, y) = Φ^ε(z, y) - y`.
pub fn g_map(eps: f64, z: &[f64], y: Complex64, family: &SaturableFamily) -> Complex64 {
    let theta = flow_angle(y, z, family);
    y * (Complex64::from_polar(1.0, -eps * theta) - 1.0)
}

/// `H(ε, z, y) = Φ^ε(z, y) - y + iε Σ_j z_j g_j(y)`.
pub fn h_map(eps: f64, z: &[f64], y: Complex64, family: &SaturableFamily) -> Complex64 {
    let x = eps * flow_angle(y, z, family);
    // e^{-ix} - 1 + ix, evaluated without cancellation for small x
    let remainder = if x.abs() < 1e-3 {
        let x2 = x * x;
        Complex64::new(
            -x2 / 2.0 + x2 * x2 / 24.0,
            x * x2 / 6.0 - x * x2 * x2 / 120.0,
        )
    } else {
        Complex64::from_polar(1.0, -x) - 1.0 + Complex64::new(0.0, x)
    };
    y * remainder
}

/// Pointwise jump map applied to a physical field.
pub fn jump_field(
    field: &ComplexField,
    z: &[f64],
    eps: f64,
    family: &SaturableFamily,
) -> Result<ComplexField> {
    field.map_pointwise(|y| marcus_flow(y, z, eps, family))
}

pub(crate) fn euclidean(z: &[f64]) -> f64 {
    z.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Adaptive Simpson quadrature with a depth cap.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> Result<f64> {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if delta.abs() <= 15.0 * tol {
            return Ok(left + right + delta / 15.0);
        }
        if depth == 0 {
            return Err(Error::Quadrature(format!("no convergence on [{a}, {b}]")));
        }
        Ok(recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?
            + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?)
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    if !(fa.is_finite() && fb.is_finite() && fm.is_finite()) {
        return Err(Error::Quadrature(
            "integrand not finite at the nodes".into(),
        ));
    }
    recurse(f, a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, 40)
}
