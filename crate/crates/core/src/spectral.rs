//! Periodic grids, the discrete Fourier transform, and norms on grid functions.
//!
//! The domain is the torus `[-L/2, L/2)^d` sampled at `n` points per axis.
//! Fourier coefficients are stored as Fourier-series coefficients
//! `û_f = n^{-d} Σ_x u(x) e^{-i k_f·x}`, so a constant field `c` has the single
//! coefficient `c` at frequency zero, and `l2_norm` is evaluated in whichever
//! representation a field is held (`V Σ|û|²` in Fourier space, `V/N Σ|u|²`
//! physically). The two agree by Parseval, which makes the transform an
//! isometry for the L² norm.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Which basis the amplitudes of a [`ComplexField`] are expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Representation {
    Physical,
    Fourier,
}

pub struct SpectralGrid {
    dim: usize,
    n: usize,
    length: f64,
    /// Per-axis wavenumbers in FFT order.
    axis_wavenumbers: Vec<f64>,
    /// |k|² for every flat index, FFT order, row-major.
    k_squared: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for SpectralGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpectralGrid")
            .field("dim", &self.dim)
            .field("n", &self.n)
            .field("length", &self.length)
            .finish()
    }
}

impl PartialEq for SpectralGrid {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.n == other.n && self.length == other.length
    }
}

impl SpectralGrid {
    pub fn new(dim: usize, n: usize, length: f64) -> Result<Arc<Self>> {
        if dim != 1 && dim != 2 {
            return Err(invalid("dim", format!("must be 1 or 2, got {dim}")));
        }
        if n < 8 || !n.is_power_of_two() {
            return Err(invalid(
                "n",
                format!("must be a power of two >= 8, got {n}"),
            ));
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(invalid("length", format!("must be positive, got {length}")));
        }
        let axis_wavenumbers: Vec<f64> = (0..n)
            .map(|i| {
                let f = if i < n / 2 {
                    i as f64
                } else {
                    i as f64 - n as f64
                };
                2.0 * std::f64::consts::PI * f / length
            })
            .collect();
        let k_squared = match dim {
            1 => axis_wavenumbers.iter().map(|k| k * k).collect(),
            _ => {
                let mut out = Vec::with_capacity(n * n);
                for k0 in &axis_wavenumbers {
                    for k1 in &axis_wavenumbers {
                        out.push(k0 * k0 + k1 * k1);
                    }
                }
                out
            }
        };
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);
        Ok(Arc::new(Self {
            dim,
            n,
            length,
            axis_wavenumbers,
            k_squared,
            forward,
            inverse,
        }))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    /// Total number of grid points, `n^d`.
    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        self.length / self.n as f64
    }

    /// Volume of the periodic box, `L^d`.
    pub fn volume(&self) -> f64 {
        self.length.powi(self.dim as i32)
    }

    /// Quadrature weight of one grid point, `(L/n)^d`.
    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    pub fn axis_wavenumbers(&self) -> &[f64] {
        &self.axis_wavenumbers
    }

    pub fn k_squared(&self) -> &[f64] {
        &self.k_squared
    }

    pub fn max_k_squared(&self) -> f64 {
        self.k_squared.iter().cloned().fold(0.0, f64::max)
    }

    /// Integer frequency of FFT index `i` along an axis.
    pub fn frequency(&self, i: usize) -> i64 {
        if i < self.n / 2 {
            i as i64
        } else {
            i as i64 - self.n as i64
        }
    }

    /// Physical coordinate of the point with flat index `idx`.
    pub fn point(&self, idx: usize) -> [f64; 2] {
        let h = self.spacing();
        let x0 = -0.5 * self.length;
        match self.dim {
            1 => [x0 + idx as f64 * h, 0.0],
            _ => {
                let (i0, i1) = (idx / self.n, idx % self.n);
                [x0 + i0 as f64 * h, x0 + i1 as f64 * h]
            }
        }
    }

    pub fn workspace(&self) -> FftWorkspace {
        let scratch_len = self
            .forward
            .get_inplace_scratch_len()
            .max(self.inverse.get_inplace_scratch_len());
        FftWorkspace {
            scratch: vec![Complex64::new(0.0, 0.0); scratch_len],
            column: vec![Complex64::new(0.0, 0.0); self.n],
        }
    }

    /// Forward transform of raw amplitudes, normalized to Fourier-series coefficients.
    pub fn forward_raw(&self, data: &mut [Complex64], ws: &mut FftWorkspace) {
        self.transform_raw(data, ws, true);
        let scale = 1.0 / self.len() as f64;
        data.iter_mut().for_each(|v| *v *= scale);
    }

    /// Inverse of [`SpectralGrid::forward_raw`].
    pub fn inverse_raw(&self, data: &mut [Complex64], ws: &mut FftWorkspace) {
        self.transform_raw(data, ws, false);
    }

    fn transform_raw(&self, data: &mut [Complex64], ws: &mut FftWorkspace, forward: bool) {
        debug_assert_eq!(data.len(), self.len());
        let plan = if forward {
            &self.forward
        } else {
            &self.inverse
        };
        let n = self.n;
        for row in data.chunks_exact_mut(n) {
            plan.process_with_scratch(row, &mut ws.scratch);
        }
        if self.dim == 2 {
            for c in 0..n {
                for r in 0..n {
                    ws.column[r] = data[r * n + c];
                }
                plan.process_with_scratch(&mut ws.column, &mut ws.scratch);
                for r in 0..n {
                    data[r * n + c] = ws.column[r];
                }
            }
        }
    }

    /// Applies `exp(-i|k|² dt)` to Fourier coefficients.
    pub fn apply_free_multiplier(&self, coeffs: &mut [Complex64], dt: f64) {
        if dt == 0.0 {
            return;
        }
        for (c, k2) in coeffs.iter_mut().zip(&self.k_squared) {
            *c *= Complex64::from_polar(1.0, -k2 * dt);
        }
    }

    /// Applies the Yosida multiplier `μ/(μ+|k|²)` to Fourier coefficients.
    pub fn apply_yosida_multiplier(&self, coeffs: &mut [Complex64], mu: f64) {
        for (c, k2) in coeffs.iter_mut().zip(&self.k_squared) {
            *c *= mu / (mu + k2);
        }
    }

    /// Zeroes every coefficient whose frequency exceeds `n/3` along some axis.
    pub fn apply_two_thirds_filter(&self, coeffs: &mut [Complex64]) {
        let cutoff = (self.n / 3) as i64;
        let keep = |i: usize| self.frequency(i).abs() <= cutoff;
        match self.dim {
            1 => coeffs.iter_mut().enumerate().for_each(|(i, c)| {
                if !keep(i) {
                    *c = Complex64::new(0.0, 0.0);
                }
            }),
            _ => coeffs.iter_mut().enumerate().for_each(|(idx, c)| {
                if !(keep(idx / self.n) && keep(idx % self.n)) {
                    *c = Complex64::new(0.0, 0.0);
                }
            }),
        }
    }
}

/// Scratch buffers for in-place transforms; one per worker.
pub struct FftWorkspace {
    scratch: Vec<Complex64>,
    column: Vec<Complex64>,
}

#[derive(Clone)]
pub struct ComplexField {
    grid: Arc<SpectralGrid>,
    values: Vec<Complex64>,
    repr: Representation,
}

impl fmt::Debug for ComplexField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ComplexField")
            .field("grid", &self.grid)
            .field("repr", &self.repr)
            .field("len", &self.values.len())
            .finish()
    }
}

impl ComplexField {
    pub fn new(
        grid: Arc<SpectralGrid>,
        values: Vec<Complex64>,
        repr: Representation,
    ) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(invalid(
                "values",
                format!("expected {} amplitudes, got {}", grid.len(), values.len()),
            ));
        }
        Ok(Self { grid, values, repr })
    }

    pub fn zeros(grid: Arc<SpectralGrid>) -> Self {
        let values = vec![Complex64::new(0.0, 0.0); grid.len()];
        Self {
            grid,
            values,
            repr: Representation::Physical,
        }
    }

    pub fn constant(grid: Arc<SpectralGrid>, c: Complex64) -> Self {
        let values = vec![c; grid.len()];
        Self {
            grid,
            values,
            repr: Representation::Physical,
        }
    }

    /// Samples `f` at every grid point (physical representation).
    pub fn from_fn(grid: Arc<SpectralGrid>, f: impl Fn([f64; 2]) -> Complex64) -> Self {
        let values = (0..grid.len()).map(|i| f(grid.point(i))).collect();
        Self {
            grid,
            values,
            repr: Representation::Physical,
        }
    }

    /// `amplitude · exp(-|x|²/(2 width²)) · exp(i k·x)`.
    pub fn gaussian(grid: Arc<SpectralGrid>, amplitude: f64, width: f64, wavenumber: f64) -> Self {
        Self::from_fn(grid, |x| {
            let r2 = x[0] * x[0] + x[1] * x[1];
            Complex64::from_polar(
                amplitude * (-r2 / (2.0 * width * width)).exp(),
                wavenumber * x[0],
            )
        })
    }

    pub fn grid(&self) -> &Arc<SpectralGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }

    pub fn repr(&self) -> Representation {
        self.repr
    }

    fn expect(&self, expected: Representation) -> Result<()> {
        if self.repr == expected {
            Ok(())
        } else {
            Err(Error::WrongRepresentation {
                expected,
                found: self.repr,
            })
        }
    }

    fn check_same_grid(&self, other: &Self) -> Result<()> {
        if Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{:?} vs {:?}",
                self.grid, other.grid
            )))
        }
    }

    pub fn forward_transform(&self) -> Result<Self> {
        self.expect(Representation::Physical)?;
        let mut out = self.clone();
        let mut ws = self.grid.workspace();
        self.grid.forward_raw(&mut out.values, &mut ws);
        out.repr = Representation::Fourier;
        Ok(out)
    }

    pub fn inverse_transform(&self) -> Result<Self> {
        self.expect(Representation::Fourier)?;
        let mut out = self.clone();
        let mut ws = self.grid.workspace();
        self.grid.inverse_raw(&mut out.values, &mut ws);
        out.repr = Representation::Physical;
        Ok(out)
    }

    /// Converts to the requested representation, transforming if needed.
    pub fn to_repr(&self, repr: Representation) -> Self {
        match (self.repr, repr) {
            (a, b) if a == b => self.clone(),
            (Representation::Physical, _) => self.forward_transform().expect("physical field"),
            _ => self.inverse_transform().expect("fourier field"),
        }
    }

    /// The free Schrödinger group `S_dt`, returned in the input's representation.
    pub fn free_propagate(&self, dt: f64) -> Result<Self> {
        if !dt.is_finite() {
            return Err(invalid("dt", "must be finite"));
        }
        self.fourier_multiply(|grid, c| grid.apply_free_multiplier(c, dt))
    }

    /// The Yosida smoothing operator `μ(μ - Δ)^{-1}`.
    pub fn yosida_apply(&self, mu: f64) -> Result<Self> {
        if !(mu > 0.0) {
            return Err(invalid("mu", format!("must be positive, got {mu}")));
        }
        self.fourier_multiply(|grid, c| grid.apply_yosida_multiplier(c, mu))
    }

    /// Spectral 2/3-rule truncation.
    pub fn dealias(&self) -> Self {
        self.fourier_multiply(|grid, c| grid.apply_two_thirds_filter(c))
            .expect("filter has no failure modes")
    }

    fn fourier_multiply(
        &self,
        apply: impl FnOnce(&SpectralGrid, &mut [Complex64]),
    ) -> Result<Self> {
        let mut out = self.clone();
        let mut ws = self.grid.workspace();
        if self.repr == Representation::Physical {
            self.grid.forward_raw(&mut out.values, &mut ws);
        }
        apply(&self.grid, &mut out.values);
        if self.repr == Representation::Physical {
            self.grid.inverse_raw(&mut out.values, &mut ws);
        }
        Ok(out)
    }

    pub fn l2_norm(&self) -> f64 {
        let sum: f64 = self.values.iter().map(|v| v.norm_sqr()).sum();
        match self.repr {
            Representation::Physical => (self.grid.cell_volume() * sum).sqrt(),
            Representation::Fourier => (self.grid.volume() * sum).sqrt(),
        }
    }

    /// Discrete `L^r` norm with weight `(L/n)^d`; `r = ∞` gives the max modulus.
    pub fn lr_norm(&self, r: f64) -> Result<f64> {
        if !(r >= 2.0) {
            return Err(invalid("r", format!("must be >= 2, got {r}")));
        }
        if self.repr == Representation::Fourier {
            return self.inverse_transform()?.lr_norm(r);
        }
        Ok(lr_of_values(&self.values, self.grid.cell_volume(), r))
    }

    /// Pointwise `self - other`, both physical.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_grid(other)?;
        self.expect(Representation::Physical)?;
        other.expect(Representation::Physical)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Self {
            grid: self.grid.clone(),
            values,
            repr: Representation::Physical,
        })
    }

    pub fn l2_distance(&self, other: &Self) -> Result<f64> {
        Ok(self.sub(other)?.l2_norm())
    }

    /// Pointwise map over physical values.
    pub fn map_pointwise(&self, f: impl Fn(Complex64) -> Complex64) -> Result<Self> {
        self.expect(Representation::Physical)?;
        Ok(Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
            repr: Representation::Physical,
        })
    }

    /// Mass inside the slab `lo <= x_0 < hi` (squared L² norm restricted to it).
    pub fn window_mass(&self, lo: f64, hi: f64) -> Result<f64> {
        self.expect(Representation::Physical)?;
        let sum: f64 = self
            .values
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                let x = self.grid.point(*i)[0];
                x >= lo && x < hi
            })
            .map(|(_, v)| v.norm_sqr())
            .sum();
        Ok(sum * self.grid.cell_volume())
    }
}

pub(crate) fn lr_of_values(values: &[Complex64], weight: f64, r: f64) -> f64 {
    if r.is_infinite() {
        return values.iter().map(|v| v.norm()).fold(0.0, f64::max);
    }
    if r == 2.0 {
        let sum: f64 = values.iter().map(|v| v.norm_sqr()).sum();
        return (weight * sum).sqrt();
    }
    let sum: f64 = values.iter().map(|v| v.norm_sqr().powf(0.5 * r)).sum();
    (weight * sum).powf(1.0 / r)
}

/// Strichartz admissibility: `2/p = d/2 - d/r` with `(p, r, d) != (2, ∞, 2)`.
pub fn admissible_pair_check(p: f64, r: f64, dim: usize) -> bool {
    if !(p >= 2.0 && r >= 2.0) || dim == 0 {
        return false;
    }
    if dim == 2 && p == 2.0 && r.is_infinite() {
        return false;
    }
    let d = dim as f64;
    let lhs = if p.is_infinite() { 0.0 } else { 2.0 / p };
    let rhs = d / 2.0 - if r.is_infinite() { 0.0 } else { d / r };
    (lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs())
}

/// The time exponent paired with `r` in dimension `d`, or `None` if no admissible `p` exists.
pub fn admissible_p_for(r: f64, dim: usize) -> Option<f64> {
    let d = dim as f64;
    let rhs = d / 2.0 - if r.is_infinite() { 0.0 } else { d / r };
    if !(0.0..=1.0).contains(&rhs) {
        return None;
    }
    let p = if rhs == 0.0 { f64::INFINITY } else { 2.0 / rhs };
    admissible_pair_check(p, r, dim).then_some(p)
}

/// Components of the `L^∞(L²) ∩ L^p(L^r)` norm of a sampled trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    /// `max_i ‖u(t_i)‖_{L²}`.
    pub sup_l2: f64,
    /// `(Σ_i (t_{i+1} - t_i) ‖u(t_i)‖_{L^r}^p)^{1/p}` (left-Riemann).
    pub time_lr: f64,
    pub p: f64,
    pub r: f64,
    /// Mean snapshot spacing used by the time quadrature.
    pub dt: f64,
}

impl NormReport {
    /// The E-norm: the sum of both components.
    pub fn e_norm(&self) -> f64 {
        self.sup_l2 + self.time_lr
    }
}

/// Mixed space-time norm of the snapshots `fields` taken at `times`.
pub fn mixed_norm(times: &[f64], fields: &[ComplexField], p: f64, r: f64) -> Result<NormReport> {
    if times.len() != fields.len() {
        return Err(invalid("times", "one sample time per snapshot is required"));
    }
    if times.len() < 2 {
        return Err(invalid("times", "at least two snapshots are required"));
    }
    if let Some(index) = times.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(Error::NonMonotoneTimes { index: index + 1 });
    }
    let dim = fields[0].grid().dim();
    if !admissible_pair_check(p, r, dim) {
        return Err(Error::InadmissiblePair { p, r, dim });
    }
    let mut sup_l2 = 0.0f64;
    for f in fields {
        sup_l2 = sup_l2.max(f.l2_norm());
    }
    let mut time_lr = 0.0f64;
    for i in 0..times.len() - 1 {
        let lr = fields[i].lr_norm(r)?;
        if p.is_infinite() {
            time_lr = time_lr.max(lr);
        } else {
            time_lr += (times[i + 1] - times[i]) * lr.powf(p);
        }
    }
    if p.is_finite() {
        time_lr = time_lr.powf(1.0 / p);
    }
    let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
    Ok(NormReport {
        sup_l2,
        time_lr,
        p,
        r,
        dt,
    })
}
