use marcus_nls::coefficients::{NonlinearitySpec, Profile, SaturableFamily};
use marcus_nls::control::{q_cost, wilson_interval, Control, Z95};
use marcus_nls::dynamics::{
    solve_controlled, solve_stochastic, solve_with_jumps, Model, SolverConfig,
};
use marcus_nls::noise::{marcus_flow, LevyMeasure};
use marcus_nls::rng::{stream, tagged_stream};
use marcus_nls::spectral::{ComplexField, SpectralGrid};
use num_complex::Complex64;
use proptest::prelude::*;

fn model() -> Model {
    Model::new(
        NonlinearitySpec::new(1.0, 1.0, 1).unwrap(),
        SaturableFamily::uniform(Profile::Saturation { rho: 1.0 }, 1).unwrap(),
        LevyMeasure::symmetric_default(),
    )
    .unwrap()
}

fn cfg() -> SolverConfig {
    SolverConfig {
        dt: 0.01,
        stride: 5,
        ..Default::default()
    }
}

#[test]
fn stochastic_solve_is_seed_deterministic() {
    let grid = SpectralGrid::new(1, 64, 20.0).unwrap();
    let u0 = ComplexField::gaussian(grid, 0.8, 1.0, 0.5);
    let m = model();
    let a = solve_stochastic(&u0, 0.1, &m, 1.0, &mut stream(3, 9), &cfg()).unwrap();
    let b = solve_stochastic(&u0, 0.1, &m, 1.0, &mut stream(3, 9), &cfg()).unwrap();
    assert_eq!(a.times, b.times);
    assert_eq!(a.jumps, b.jumps);
    assert_eq!(a.final_state().values(), b.final_state().values());
    let c = solve_stochastic(&u0, 0.1, &m, 1.0, &mut tagged_stream(3, 1, 9), &cfg()).unwrap();
    assert_ne!(a.jumps, c.jumps);
}

#[test]
fn replaying_sampled_jumps_reproduces_the_path() {
    let grid = SpectralGrid::new(1, 64, 20.0).unwrap();
    let u0 = ComplexField::gaussian(grid, 0.8, 1.0, 0.0);
    let m = model();
    let psi =
        Control::from_fn(1.0, 4, 4, |b, c| if c >= 2 { 1.0 + b as f64 } else { 0.5 }).unwrap();
    let traj = solve_controlled(&u0, 0.2, &psi, &m, 1.0, &mut stream(5, 0), &cfg()).unwrap();
    let replay = solve_with_jumps(&u0, 0.2, traj.jumps.clone(), &m, 1.0, &cfg()).unwrap();
    assert!(
        replay
            .final_state()
            .l2_distance(traj.final_state())
            .unwrap()
            <= 1e-13
    );
    assert_eq!(replay.times, traj.times);
}

proptest! {
    #[test]
    fn flow_inverse_composition(re in -3.0..3.0f64, im in -3.0..3.0f64, z in -1.0..1.0f64, eps in 1e-3..1.0f64) {
        let fam = SaturableFamily::uniform(Profile::Saturation { rho: 1.0 }, 1).unwrap();
        let y = Complex64::new(re, im);
        let forward = marcus_flow(y, &[z], eps, &fam);
        let back = marcus_flow(forward, &[-z], eps, &fam);
        prop_assert!((back - y).norm() <= 1e-14 * (1.0 + y.norm()));
    }

    #[test]
    fn cost_is_nonnegative_and_zero_only_at_one(values in proptest::collection::vec(0.0..5.0f64, 8)) {
        let psi = Control::new(Control::uniform_edges(1.0, 2), 4, values.clone()).unwrap();
        let q = q_cost(&psi, &LevyMeasure::symmetric_default()).unwrap();
        prop_assert!(q >= 0.0);
        if values.iter().any(|v| (v - 1.0).abs() > 1e-3) {
            prop_assert!(q > 0.0);
        }
    }

    #[test]
    fn wilson_interval_brackets_estimate(n in 1usize..5000, frac in 0.0..=1.0f64) {
        let hits = ((n as f64) * frac).floor() as usize;
        let (lo, hi) = wilson_interval(hits, n, Z95);
        let p = hits as f64 / n as f64;
        prop_assert!(0.0 <= lo && lo <= p + 1e-15);
        prop_assert!(p <= hi + 1e-15 && hi <= 1.0);
    }
}
