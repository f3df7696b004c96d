//! Property tests for the invariants of each module.

mod oracles;

use proptest::prelude::*;

use sdde_smp::absde::solve_absde;
use sdde_smp::hilbert::{shift_adjoint, shift_semigroup, HilbertPoint};
use sdde_smp::measures::{mollify, past_integral, Atom, DelayMeasure, Density, PastSegment};
use sdde_smp::model::{scenario_lq_delay, scenario_portfolio, ControlPath, LqDelayParams, MeasureChoice, PortfolioConfig};
use sdde_smp::paths::{make_grid, sample_brownian, BrownianBundle};
use sdde_smp::regression::RegressionConfig;
use sdde_smp::sdde::{simulate_linearized, simulate_spiked, simulate_state, SpikeWindow};
use sdde_smp::smp::{p00_quadratic_form, Representation};
use sdde_smp::stats::mean_stderr;

const LAG: usize = 32;
const SPAN: f64 = 0.5;

fn segment(values: &[f64]) -> PastSegment {
    PastSegment::new(values.to_vec(), 1, SPAN / LAG as f64).unwrap()
}

/// Grid-aligned atoms with weights in `[lo, hi]` plus an optional constant density.
fn measure(lo: f64, hi: f64) -> impl Strategy<Value = DelayMeasure> {
    (
        prop::collection::vec((0..=LAG, lo..hi), 0..4),
        prop::option::of(lo..hi),
    )
        .prop_map(|(atoms, dens)| {
            let atoms = atoms
                .into_iter()
                .map(|(j, w)| Atom { theta: -SPAN + j as f64 * SPAN / LAG as f64, weight: w })
                .collect();
            DelayMeasure::new(SPAN, atoms, dens.map(Density::Constant)).unwrap().with_resolution(LAG)
        })
}

fn values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, LAG + 1)
}

proptest! {
    #[test]
    fn past_integral_is_linear(mu in measure(-2.0, 2.0), s1 in values(), s2 in values(), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let mix: Vec<f64> = s1.iter().zip(&s2).map(|(x, y)| a * x + b * y).collect();
        let lhs = past_integral(&segment(&mix), &mu).unwrap()[0];
        let rhs = a * past_integral(&segment(&s1), &mu).unwrap()[0] + b * past_integral(&segment(&s2), &mu).unwrap()[0];
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn constant_density_is_exact_on_constants(c in -4.0..4.0f64, span in 0.1..3.0f64, lag in 1usize..200) {
        let mu = DelayMeasure::new(span, vec![], Some(Density::Constant(c))).unwrap();
        let seg = PastSegment::from_fn(span, lag, 1, |_| vec![1.0]);
        let v = past_integral(&seg, &mu).unwrap()[0];
        prop_assert!((v - c * span).abs() <= 1e-12 * (1.0 + (c * span).abs()));
    }

    #[test]
    fn mollification_preserves_positive_mass(mu in measure(0.0, 2.0), n in 1usize..64) {
        let m = mollify(&mu, n).unwrap();
        prop_assert!(!m.has_atoms());
        prop_assert!((m.total_variation() - mu.total_variation()).abs() <= 1e-12);
    }

    #[test]
    fn mollified_atoms_obey_the_lipschitz_bound(j in 0..=64usize, slope in -3.0..3.0f64, freq in 0.0..4.0f64) {
        let (span, lag) = (1.0, 1024);
        let mu = DelayMeasure::dirac(span, -span + j as f64 * span / 64.0, 1.0).unwrap();
        let f = |t: f64| slope * t + (freq * t).sin();
        let lip = slope.abs() + freq;
        let seg = PastSegment::from_fn(span, lag, 1, |t| vec![f(t)]);
        let exact = past_integral(&seg, &mu).unwrap()[0];
        for n in [2usize, 4, 8, 16, 32] {
            let err = (past_integral(&seg, &mollify(&mu, n).unwrap()).unwrap()[0] - exact).abs();
            prop_assert!(err <= lip * span / n as f64 + 1e-12, "n = {n}: {err}");
        }
    }

    // Curvature and boundary-reflection biases can cancel at coarse n, and so can the biases of
    // atoms near opposite ends, so monotonicity is checked for one atom against an affine segment.
    #[test]
    fn mollified_error_is_non_increasing_for_one_atom(j in 0..=LAG, weight in 0.1..3.0f64, slope in -3.0..3.0f64, c in -2.0..2.0f64) {
        let mu = DelayMeasure::dirac(SPAN, -SPAN + j as f64 * SPAN / LAG as f64, weight).unwrap();
        let seg = PastSegment::from_fn(SPAN, 4 * LAG, 1, |t| vec![c + slope * t]);
        let exact = past_integral(&seg, &mu).unwrap()[0];
        let mut prev = f64::INFINITY;
        for n in [1usize, 2, 4, 8, 16, 32] {
            let err = (past_integral(&seg, &mollify(&mu, n).unwrap()).unwrap()[0] - exact).abs();
            prop_assert!(err <= 1.1 * prev + 1e-12, "n = {n}: {err} after {prev}");
            prev = err;
        }
    }

    #[test]
    fn commensurate_delays_give_integer_lags(steps in 1usize..500, k in 0usize..500, horizon in 0.1..5.0f64) {
        let k = k.min(steps);
        let delay = k as f64 * horizon / steps as f64;
        let g = make_grid(horizon, steps, delay).unwrap();
        prop_assert_eq!(g.lag, k);
        prop_assert_eq!(g.history_nodes(), steps + k + 1);
    }

    #[test]
    fn off_grid_delays_are_rejected(steps in 2usize..500, k in 1usize..400, frac in 0.2..0.8f64) {
        let k = k.min(steps - 1);
        let delay = (k as f64 + frac) / steps as f64;
        prop_assert!(make_grid(1.0, steps, delay).is_err());
    }
}

fn wiggle(seed: u64, n: usize) -> Vec<f64> {
    (0..n).map(|i| ((seed as f64 + 1.3) * (i as f64 + 0.7)).sin()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shift_adjoint_is_the_transpose(a in 0u64..1000, b in 0u64..1000, k in 0usize..=16, lagq in 0usize..=4) {
        let g = make_grid(1.0, 16, lagq as f64 * 0.25).unwrap();
        let d = 2;
        let h = HilbertPoint::new(wiggle(a, d), wiggle(a + 1, d * (g.lag + 1)), g).unwrap();
        let kk = HilbertPoint::new(wiggle(b, d), wiggle(b + 1, d * (g.lag + 1)), g).unwrap();
        let t = g.time(k as isize);
        let lhs = shift_semigroup(t, &h).unwrap().inner(&kk);
        let rhs = h.inner(&shift_adjoint(t, &kk).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn shift_composition_is_exact(a in 0u64..1000, i in 0usize..=8, j in 0usize..=8) {
        let g = make_grid(1.0, 16, 0.5).unwrap();
        let h = HilbertPoint::new(wiggle(a, 1), wiggle(a + 3, g.lag + 1), g).unwrap();
        let (s, t) = (g.time(i as isize), g.time(j as isize));
        let two = shift_semigroup(t, &shift_semigroup(s, &h).unwrap()).unwrap();
        let one = shift_semigroup(g.time((i + j) as isize), &h).unwrap();
        prop_assert_eq!(two.to_vec(), one.to_vec());
    }
}

fn noisy() -> LqDelayParams {
    LqDelayParams {
        a0: 0.3,
        a1: -0.5,
        s0: 0.4,
        s1: 0.3,
        c_u: 1.0,
        c_xu: 0.5,
        kappa_b: 0.5,
        kappa_sigma: 0.5,
        delay: 0.5,
        mu_b: MeasureChoice::Mixed,
        mu_sigma: MeasureChoice::Uniform,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn spiked_state_matches_before_the_window(seed in 0u64..1000, start in 0usize..30, width in 0usize..8) {
        let spec = scenario_lq_delay(&noisy()).unwrap();
        let g = make_grid(1.0, 32, 0.5).unwrap();
        let w = sample_brownian(g, 64, 1, seed).unwrap();
        let u = ControlPath::constant(32, 0);
        let width = width.min(32 - start);
        let win = SpikeWindow { start: g.time(start as isize), width: width as f64 * g.dt, value: 1 };
        let x = simulate_state(&spec, &u, &w).unwrap();
        let xe = simulate_spiked(&spec, &u, &win, &w).unwrap();
        for p in 0..64 {
            for i in -(g.lag as isize)..=start as isize {
                prop_assert_eq!(x.at(p, i), xe.at(p, i));
            }
        }
    }

    #[test]
    fn linearized_flow_is_additive(seed in 0u64..1000, s in 0usize..16, h in -3.0..3.0f64, k in -3.0..3.0f64) {
        let spec = scenario_lq_delay(&noisy()).unwrap();
        let g = make_grid(1.0, 16, 0.5).unwrap();
        let w = sample_brownian(g, 32, 1, seed).unwrap();
        let u = ControlPath::constant(16, 1);
        let x = simulate_state(&spec, &u, &w).unwrap();
        let t = g.time(s as isize);
        let yh = simulate_linearized(&spec, &x, t, &[h], &u, &w).unwrap();
        let yk = simulate_linearized(&spec, &x, t, &[k], &u, &w).unwrap();
        let yhk = simulate_linearized(&spec, &x, t, &[h + k], &u, &w).unwrap();
        for (a, (b, c)) in yhk.raw().iter().zip(yh.raw().iter().zip(yk.raw())) {
            prop_assert!((a - b - c).abs() <= 1e-10 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn second_moment_is_bounded_by_the_history(x0 in -3.0..3.0f64, seed in 0u64..1000) {
        // Largest E sup|x|² / (1 + x₀²) over x₀ ∈ [-3, 3] was 19.4 at 40 000 paths.
        const C: f64 = 20.0;
        let spec = scenario_lq_delay(&LqDelayParams { x0, ..noisy() }).unwrap();
        let g = make_grid(1.0, 32, 0.5).unwrap();
        let w = sample_brownian(g, 4096, 1, seed).unwrap();
        let x = simulate_state(&spec, &ControlPath::constant(32, 1), &w).unwrap();
        let m = x.sup_second_moment();
        prop_assert!(m.mean - 3.0 * m.stderr <= C * (1.0 + x0 * x0), "E sup|x|² = {m:?}");
    }

    #[test]
    fn adjoint_terminal_value_and_zero_extension(seed in 0u64..1000) {
        let spec = scenario_lq_delay(&noisy()).unwrap();
        let g = make_grid(1.0, 32, 0.5).unwrap();
        let w = sample_brownian(g, 800, 1, seed).unwrap();
        let u = ControlPath::constant(32, 0);
        let x = simulate_state(&spec, &u, &w).unwrap();
        let adj = solve_absde(&spec, &x, &u, &w, &RegressionConfig::default()).unwrap();
        for p in 0..w.paths {
            let xt = x.terminal(p)[0];
            prop_assert_eq!(adj.p(p, 32)[0], 2.0 * xt);
            for i in 33..=32 + g.lag {
                prop_assert_eq!(adj.p(p, i)[0], 0.0);
                prop_assert_eq!(adj.q(p, i)[0], 0.0);
            }
        }
    }

    #[test]
    fn quadratic_form_scales_and_polarizes_in_two_dimensions(seed in 0u64..1000, h in prop::array::uniform2(-2.0..2.0f64), k in prop::array::uniform2(-2.0..2.0f64), alpha in -3.0..3.0f64) {
        let spec = scenario_portfolio(&PortfolioConfig::default().params().unwrap()).unwrap();
        let g = make_grid(1.0, 16, 0.25).unwrap();
        let w = sample_brownian(g, 800, 1, seed).unwrap();
        let u = ControlPath::constant(16, 5);
        let x = simulate_state(&spec, &u, &w).unwrap();
        let adj = solve_absde(&spec, &x, &u, &w, &RegressionConfig::default()).unwrap();
        let rep = Representation::new(&spec, &x, &u, &adj, &w).unwrap();
        let q = |v: [f64; 2]| p00_quadratic_form(&rep, 0.25, &v).unwrap().mean;
        let (qh, qk) = (q(h), q(k));
        let scaled = q([alpha * h[0], alpha * h[1]]);
        prop_assert!((scaled - alpha * alpha * qh).abs() <= 1e-12 * (1.0 + scaled.abs()));
        // Bilinear form from polarization is symmetric and reproduces the quadratic form.
        let plus = q([h[0] + k[0], h[1] + k[1]]);
        let minus = q([h[0] - k[0], h[1] - k[1]]);
        let b = 0.25 * (plus - minus);
        prop_assert!((plus + minus - 2.0 * (qh + qk)).abs() <= 1e-10 * (1.0 + plus.abs() + minus.abs()));
        prop_assert!(b.is_finite());
    }
}

#[test]
fn brownian_increments_have_the_right_moments() {
    let g = make_grid(1.0, 8, 0.0).unwrap();
    let w = BrownianBundle::generate(g, 100_000, 2, 2024, false).unwrap();
    for c in 0..2 {
        for i in [0, 7] {
            let z: Vec<f64> = (0..w.paths).map(|p| w.increment(p, i)[c] / g.dt.sqrt()).collect();
            let m = mean_stderr(&z);
            assert!(m.mean.abs() <= 4.0 * m.stderr, "mean {m:?}");
            let sq: Vec<f64> = z.iter().map(|v| v * v).collect();
            let v = mean_stderr(&sq);
            assert!((v.mean - 1.0).abs() <= 4.0 * v.stderr, "variance {v:?}");
        }
    }
    let total: Vec<f64> = (0..w.paths).map(|p| w.window_sum(p, 0, 8, 0)).collect();
    let sq: Vec<f64> = total.iter().map(|v| v * v).collect();
    let v = mean_stderr(&sq);
    assert!((v.mean - 1.0).abs() <= 4.0 * v.stderr, "W(1)² {v:?}");
}


#[test]
fn oracle_without_delay_is_exponential() {
    let o = oracles::MethodOfSteps { a0: 0.7, a1: 0.0, forcing: 0.0, delay: 0.25, horizon: 1.0, kernel: oracles::Kernel::Dirac, x0: 1.0, q: 0.0, hw: 0.5, k: 2000 };
    let s = o.solve();
    assert!((s.x_at(1.0) - 0.7f64.exp()).abs() < 1e-6);
    assert!((s.p_at(0.0) - 1.4f64.exp()).abs() < 1e-6);
}

#[test]
fn oracle_second_moment_matches_the_lognormal_formula() {
    assert!((oracles::geometric_second_moment(0.5, 1.0, 0.0) - 0.25f64.exp()).abs() < 1e-15);
    assert_eq!(oracles::geometric_second_moment(0.5, 1.0, 1.0), 1.0);
}
