//! The power nonlinearity `f(u) = λ|u|^{2σ}u` and saturable noise coefficients
//! `g_j(y) = g̃_j(|y|²) y`.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::spectral::{admissible_p_for, ComplexField};

/// `λ|u|^{2σ}u` with `0 < σ < 2/d`; `λ > 0` defocusing, `λ < 0` focusing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonlinearitySpec {
    lambda: f64,
    sigma: f64,
    dim: usize,
    r: f64,
    p: f64,
}

impl NonlinearitySpec {
    pub fn new(lambda: f64, sigma: f64, dim: usize) -> Result<Self> {
        if !lambda.is_finite() {
            return Err(invalid("lambda", "must be finite"));
        }
        if dim == 0 {
            return Err(invalid("dim", "must be positive"));
        }
        let upper = 2.0 / dim as f64;
        if !(sigma > 0.0 && sigma < upper) {
            return Err(invalid(
                "sigma",
                format!("must satisfy 0 < sigma < 2/d = {upper}, got {sigma}"),
            ));
        }
        let r = 2.0 * sigma + 2.0;
        let p = admissible_p_for(r, dim)
            .ok_or_else(|| invalid("sigma", "no admissible time exponent"))?;
        Ok(Self {
            lambda,
            sigma,
            dim,
            r,
            p,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Space exponent `r = 2σ + 2`.
    pub fn r(&self) -> f64 {
        self.r
    }

    /// Time exponent admissible with `r`.
    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    /// `|u|^{2σ}` evaluated from `|u|²`; zero at the origin.
    #[inline]
    pub fn intensity_power(&self, modulus_sq: f64) -> f64 {
        if modulus_sq == 0.0 {
            0.0
        } else if self.sigma == 1.0 {
            modulus_sq
        } else {
            modulus_sq.powf(self.sigma)
        }
    }

    #[inline]
    pub fn eval_point(&self, u: Complex64) -> Complex64 {
        u * (self.lambda * self.intensity_power(u.norm_sqr()))
    }

    pub fn f_eval(&self, field: &ComplexField) -> Result<ComplexField> {
        field.map_pointwise(|u| self.eval_point(u))
    }
}

/// Hook for user-supplied profiles: value, first and (optionally) second derivative.
#[derive(Clone)]
pub struct CustomProfile {
    pub name: String,
    pub value: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub first: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub second: Option<Arc<dyn Fn(f64) -> f64 + Send + Sync>>,
}

impl fmt::Debug for CustomProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomProfile")
            .field("name", &self.name)
            .finish()
    }
}

/// Intensity profiles `g̃: [0, ∞) → ℝ`.
#[derive(Debug, Clone)]
pub enum Profile {
    /// `θ / (1 + ρθ)`
    Saturation {
        rho: f64,
    },
    /// `1 - (1 + θ)^{-1/2}`
    SquareRoot,
    /// `θ(2 + ρθ) / (1 + ρθ)²`
    Rational {
        rho: f64,
    },
    /// `log(1 + ρθ) / (1 + log(1 + ρθ))`
    Logarithmic {
        rho: f64,
    },
    /// `g̃ ≡ c`; a linear coefficient, used for degenerate and closed-form fixtures.
    Constant {
        value: f64,
    },
    Custom(CustomProfile),
}

impl Profile {
    pub fn tag(&self) -> &str {
        match self {
            Profile::Saturation { .. } => "sat",
            Profile::SquareRoot => "sqrt",
            Profile::Rational { .. } => "rational",
            Profile::Logarithmic { .. } => "log",
            Profile::Constant { .. } => "constant",
            Profile::Custom(c) => &c.name,
        }
    }

    /// Builds a built-in profile from its configuration tag.
    pub fn from_tag(tag: &str, rho: f64) -> Result<Self> {
        let needs_rho = |p: Profile| {
            if rho > 0.0 && rho.is_finite() {
                Ok(p)
            } else {
                Err(invalid(
                    "rho",
                    format!("must be positive for `{tag}`, got {rho}"),
                ))
            }
        };
        match tag {
            "sat" => needs_rho(Profile::Saturation { rho }),
            "sqrt" => Ok(Profile::SquareRoot),
            "rational" => needs_rho(Profile::Rational { rho }),
            "log" => needs_rho(Profile::Logarithmic { rho }),
            "zero" => Ok(Profile::Constant { value: 0.0 }),
            "constant" => Ok(Profile::Constant { value: rho }),
            "linear" => Ok(Profile::linear()),
            other => Err(invalid("profile", format!("unknown profile tag `{other}`"))),
        }
    }

    /// The unsaturated profile `g̃(θ) = θ`, which violates the growth conditions.
    pub fn linear() -> Self {
        Profile::Custom(CustomProfile {
            name: "linear".into(),
            value: Arc::new(|t| t),
            first: Arc::new(|_| 1.0),
            second: Some(Arc::new(|_| 0.0)),
        })
    }

    #[inline]
    pub fn value(&self, theta: f64) -> f64 {
        match self {
            Profile::Saturation { rho } => theta / (1.0 + rho * theta),
            Profile::SquareRoot => 1.0 - 1.0 / (1.0 + theta).sqrt(),
            Profile::Rational { rho } => {
                let s = 1.0 + rho * theta;
                theta * (2.0 + rho * theta) / (s * s)
            }
            Profile::Logarithmic { rho } => {
                let l = (rho * theta).ln_1p();
                l / (1.0 + l)
            }
            Profile::Constant { value } => *value,
            Profile::Custom(c) => (c.value)(theta),
        }
    }

    pub fn first_derivative(&self, theta: f64) -> f64 {
        match self {
            Profile::Saturation { rho } => {
                let s = 1.0 + rho * theta;
                1.0 / (s * s)
            }
            Profile::SquareRoot => 0.5 * (1.0 + theta).powf(-1.5),
            Profile::Rational { rho } => 2.0 / (1.0 + rho * theta).powi(3),
            Profile::Logarithmic { rho } => {
                let l = (rho * theta).ln_1p();
                rho / ((1.0 + rho * theta) * (1.0 + l).powi(2))
            }
            Profile::Constant { .. } => 0.0,
            Profile::Custom(c) => (c.first)(theta),
        }
    }

    pub fn second_derivative(&self, theta: f64) -> Option<f64> {
        Some(match self {
            Profile::Saturation { rho } => -2.0 * rho / (1.0 + rho * theta).powi(3),
            Profile::SquareRoot => -0.75 * (1.0 + theta).powf(-2.5),
            Profile::Rational { rho } => -6.0 * rho / (1.0 + rho * theta).powi(4),
            Profile::Logarithmic { rho } => {
                let s = 1.0 + rho * theta;
                let l = s.ln();
                let d1 = rho / s;
                let d2 = -rho * rho / (s * s);
                d2 / (1.0 + l).powi(2) - 2.0 * d1 * d1 / (1.0 + l).powi(3)
            }
            Profile::Constant { .. } => 0.0,
            Profile::Custom(c) => return c.second.as_ref().map(|f| f(theta)),
        })
    }
}

/// The `m` noise channels, one profile each.
#[derive(Debug, Clone)]
pub struct SaturableFamily {
    profiles: Vec<Profile>,
}

impl SaturableFamily {
    pub fn new(profiles: Vec<Profile>) -> Result<Self> {
        if profiles.is_empty() {
            return Err(invalid(
                "profiles",
                "at least one noise channel is required",
            ));
        }
        Ok(Self { profiles })
    }

    /// `m` copies of one profile.
    pub fn uniform(profile: Profile, m: usize) -> Result<Self> {
        Self::new(vec![profile; m])
    }

    pub fn m(&self) -> usize {
        self.profiles.len()
    }

    pub fn profiles(&self) -> &[Profile] {
        &self.profiles
    }

    /// Every channel is the zero profile, so the noise acts as the identity.
    pub fn is_trivial(&self) -> bool {
        self.profiles
            .iter()
            .all(|p| matches!(p, Profile::Constant { value } if *value == 0.0))
    }

    fn profile(&self, j: usize) -> Result<&Profile> {
        self.profiles.get(j).ok_or_else(|| {
            invalid(
                "j",
                format!("channel {j} out of range for m = {}", self.m()),
            )
        })
    }

    /// `g̃_j(θ)`; channels are zero-based.
    pub fn gtilde_eval(&self, j: usize, theta: f64) -> Result<f64> {
        if !(theta >= 0.0) {
            return Err(invalid("theta", format!("must be >= 0, got {theta}")));
        }
        Ok(self.profile(j)?.value(theta))
    }

    pub fn gtilde_deriv(&self, j: usize, theta: f64) -> Result<f64> {
        if !(theta >= 0.0) {
            return Err(invalid("theta", format!("must be >= 0, got {theta}")));
        }
        Ok(self.profile(j)?.first_derivative(theta))
    }

    /// `Σ_j coeffs_j g̃_j(θ)`, the combined phase rate used by the solvers.
    #[inline]
    pub fn weighted_sum(&self, coeffs: &[f64], theta: f64) -> f64 {
        coeffs
            .iter()
            .zip(&self.profiles)
            .map(|(c, p)| if *c == 0.0 { 0.0 } else { c * p.value(theta) })
            .sum()
    }

    #[inline]
    pub fn g_point(&self, j: usize, y: Complex64) -> Complex64 {
        y * self.profiles[j].value(y.norm_sqr())
    }

    pub fn g_eval(&self, j: usize, field: &ComplexField) -> Result<ComplexField> {
        let profile = self.profile(j)?;
        field.map_pointwise(|y| y * profile.value(y.norm_sqr()))
    }

    /// Real derivative of `g_j` at `x` applied to the direction `h`:
    /// `g̃_j(|x|²) h + 2 g̃_j'(|x|²) Re(x̄ h) x`.
    pub fn g_directional(&self, j: usize, x: Complex64, h: Complex64) -> Complex64 {
        let p = &self.profiles[j];
        let theta = x.norm_sqr();
        h * p.value(theta) + x * (2.0 * p.first_derivative(theta) * (x.conj() * h).re)
    }

    pub fn assumption_check(&self, theta_max: f64, samples: usize) -> Result<AssumptionReport> {
        assumption_check(self, theta_max, samples)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelReport {
    pub profile: String,
    /// Sampled supremum of `g̃ + (1+θ)g̃' + (1+θ^{3/2})g̃''` on `[0, θ_max]`.
    pub boundedness_sup: f64,
    /// The same supremum on `[0, θ_max/10]`.
    pub boundedness_sup_coarse: f64,
    pub l1: f64,
    pub l1_coarse: f64,
}

/// Fitted growth constants of a family, with divergence flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub theta_max: f64,
    pub samples: usize,
    pub channels: Vec<ChannelReport>,
    /// Fitted Lipschitz constant of the `g_j` (max over channels).
    pub l1: f64,
    /// Fitted Lipschitz constant of `g_j'(x) g_k(x)` (max over channel pairs).
    pub l2: f64,
    pub violations: Vec<String>,
    pub warnings: Vec<String>,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

// Growth of a sampled supremum by more than this factor when the sampled range
// is enlarged tenfold counts as divergence.
const DIVERGENCE_FACTOR: f64 = 1.5;

/// Samples the growth conditions on `θ ∈ [0, θ_max]`, `|x|, |y| ≤ √θ_max`,
/// and flags any fitted constant that keeps growing with the range.
pub fn assumption_check(
    family: &SaturableFamily,
    theta_max: f64,
    samples: usize,
) -> Result<AssumptionReport> {
    if !(theta_max > 0.0 && theta_max.is_finite()) {
        return Err(invalid(
            "theta_max",
            format!("must be positive, got {theta_max}"),
        ));
    }
    if samples < 100 {
        return Err(invalid(
            "samples",
            format!("at least 100 required, got {samples}"),
        ));
    }
    let mut violations = Vec::new();
    let mut warnings = Vec::new();
    let mut channels = Vec::new();

    // log-spaced θ grid plus the origin
    let thetas = log_grid(theta_max, samples);
    for (j, profile) in family.profiles().iter().enumerate() {
        let mut sup_full = f64::NEG_INFINITY;
        let mut sup_coarse = f64::NEG_INFINITY;
        let mut weak_only = false;
        for &theta in &thetas {
            let g = profile.value(theta);
            let d1 = profile.first_derivative(theta);
            let d2 = match profile.second_derivative(theta) {
                Some(v) => v,
                None => {
                    weak_only = true;
                    central_second_difference(profile, theta)
                }
            };
            if !(g.is_finite() && d1.is_finite() && d2.is_finite()) {
                return Err(Error::NotDifferentiable {
                    profile: profile.tag().to_string(),
                    theta,
                });
            }
            let functional = g + (1.0 + theta) * d1 + (1.0 + theta.powf(1.5)) * d2;
            sup_full = sup_full.max(functional);
            if theta <= theta_max / 10.0 {
                sup_coarse = sup_coarse.max(functional);
            }
        }
        if weak_only {
            warnings.push(format!(
                "channel {j} (`{}`): no analytic second derivative; checked with finite differences",
                profile.tag()
            ));
        }
        if grows(sup_coarse, sup_full) {
            violations.push(format!(
                "channel {j} (`{}`): boundedness functional grows from {sup_coarse:.3e} to {sup_full:.3e}",
                profile.tag()
            ));
        }
        let l1 = fit_lipschitz(theta_max, samples, j as u64, |x| family.g_point(j, x));
        let l1_coarse = fit_lipschitz(theta_max / 10.0, samples, j as u64, |x| {
            family.g_point(j, x)
        });
        if grows(l1_coarse, l1) {
            violations.push(format!(
                "channel {j} (`{}`): Lipschitz fit grows from {l1_coarse:.3e} to {l1:.3e}",
                profile.tag()
            ));
        }
        channels.push(ChannelReport {
            profile: profile.tag().to_string(),
            boundedness_sup: sup_full,
            boundedness_sup_coarse: sup_coarse,
            l1,
            l1_coarse,
        });
    }

    let mut l2 = 0.0f64;
    for j in 0..family.m() {
        for k in 0..family.m() {
            let cross = |x: Complex64| family.g_directional(j, x, family.g_point(k, x));
            let fit = fit_lipschitz(
                theta_max,
                samples,
                1000 + (j * family.m() + k) as u64,
                cross,
            );
            let coarse = fit_lipschitz(
                theta_max / 10.0,
                samples,
                1000 + (j * family.m() + k) as u64,
                cross,
            );
            if grows(coarse, fit) {
                violations.push(format!(
                    "channels ({j}, {k}): cross-term Lipschitz fit grows from {coarse:.3e} to {fit:.3e}"
                ));
            }
            l2 = l2.max(fit);
        }
    }
    let l1 = channels.iter().map(|c| c.l1).fold(0.0, f64::max);
    Ok(AssumptionReport {
        theta_max,
        samples,
        channels,
        l1,
        l2,
        violations,
        warnings,
    })
}

fn grows(coarse: f64, full: f64) -> bool {
    full.abs() > DIVERGENCE_FACTOR * coarse.abs().max(1e-12)
}

fn log_grid(theta_max: f64, samples: usize) -> Vec<f64> {
    let lo = (theta_max * 1e-8).min(1e-6).ln();
    let hi = theta_max.ln();
    let mut out = vec![0.0];
    out.extend((0..samples).map(|i| (lo + (hi - lo) * i as f64 / (samples - 1) as f64).exp()));
    out
}

fn central_second_difference(profile: &Profile, theta: f64) -> f64 {
    let h = 1e-4 * theta.max(1e-2);
    let lo = (theta - h).max(0.0);
    let hi = lo + 2.0 * h;
    (profile.first_derivative(hi) - profile.first_derivative(lo)) / (hi - lo)
}

/// Maximum difference quotient `|f(x)-f(y)|/|x-y|` over random pairs with
/// moduli log-distributed up to `√θ_max` and a mix of near and far partners.
fn fit_lipschitz(
    theta_max: f64,
    samples: usize,
    seed: u64,
    f: impl Fn(Complex64) -> Complex64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4c49_5053 ^ seed);
    let r_max = theta_max.sqrt();
    let draw = |rng: &mut ChaCha8Rng| {
        let r = r_max * 10f64.powf(-4.0 * rng.random::<f64>());
        Complex64::from_polar(r, rng.random_range(0.0..std::f64::consts::TAU))
    };
    let mut best = 0.0f64;
    for i in 0..samples.max(100) * 10 {
        let x = draw(&mut rng);
        let y = if i % 2 == 0 {
            draw(&mut rng)
        } else {
            let step = x.norm().max(1e-6) * 1e-3;
            x + Complex64::from_polar(step, rng.random_range(0.0..std::f64::consts::TAU))
        };
        let dist = (x - y).norm();
        if dist > 0.0 {
            best = best.max((f(x) - f(y)).norm() / dist);
        }
    }
    best
}
