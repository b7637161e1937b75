use std::time::Instant;

use afcmem::comb::*;
use afcmem::harness::Config;
use afcmem::numerics::{integrate, QuadOptions};
use afcmem::pulses::PulseShape;

fn paper() -> CombSpec {
    Config::builtin().combs["paper"]
}

fn probe() -> PulseShape {
    Config::builtin().probes["paper"]
}

fn scaled(periodicity_khz: f64) -> CombSpec {
    CombSpec {
        periodicity_khz,
        tooth_fwhm_khz: 0.45 * periodicity_khz,
        bandwidth_khz: 20.0 * periodicity_khz,
        ..paper()
    }
}

#[test]
fn paper_comb_finesse() {
    let spec = paper();
    assert!((spec.finesse() - 100.0 / 45.0).abs() < 1e-12);
    assert_eq!(format!("{:.2}", spec.finesse()), "2.22");
}

#[test]
fn one_period_integral_matches_tooth_area() {
    for shape in [ToothShape::Gaussian, ToothShape::Square, ToothShape::Lorentzian] {
        let spec = CombSpec {
            tooth_shape: shape,
            background_od: 0.0,
            bandwidth_khz: 100_000.0,
            ..paper()
        };
        let profile = build_comb(&spec).unwrap();
        let d = spec.periodicity_khz;
        let c = spec.tooth_centers()[spec.tooth_count() / 2];
        let opts = QuadOptions {
            abs_tol: 1e-11,
            ..QuadOptions::default()
        };
        let g = spec.tooth_fwhm_khz;
        let edges = [c - 0.5 * d, c - 0.5 * g, c + 0.5 * g, c + 0.5 * d];
        let area: f64 = edges
            .windows(2)
            .map(|w| integrate(&|x| profile.optical_depth(x), w[0], w[1], &opts).unwrap().0)
            .sum();
        let expected = spec.peak_od * spec.tooth_fwhm_khz * shape.area_constant();
        let tol = match shape {
            ToothShape::Lorentzian => 1e-3,
            _ => 1e-8,
        };
        assert!((area - expected).abs() < tol * expected, "{shape:?}: {area} vs {expected}");
    }
}

#[test]
fn paper_echo_arrives_at_ten_microseconds() {
    let spec = paper();
    let ensemble = discretize(&spec, 32, Discretization::Grid, 1).unwrap();
    let opts = EchoOptions::default();
    let start = Instant::now();
    let sim = simulate_echo(&ensemble, &probe(), &opts).unwrap();
    assert!(start.elapsed().as_secs_f64() < 1.0);
    assert!((sim.echo_time_us - 10.0).abs() <= opts.step_us);
    assert!(sim.trace.times_us.windows(2).all(|w| w[1] > w[0]));
    assert!(sim.trace.intensity.iter().all(|i| *i >= 0.0));
    assert!(sim.trace.to_csv().starts_with("time_us,intensity\n"));
}

#[test]
fn simulated_efficiency_tracks_analytic() {
    let spec = paper();
    let analytic = afc_efficiency_analytic(&spec).unwrap();
    let ensemble = discretize(&spec, 32, Discretization::Grid, 1).unwrap();
    let sim = simulate_echo(&ensemble, &probe(), &EchoOptions::default()).unwrap();
    assert!((sim.efficiency - analytic).abs() < 0.15 * analytic, "{} vs {analytic}", sim.efficiency);
}

#[test]
fn agreement_improves_with_resolution() {
    let spec = paper();
    let analytic = afc_efficiency_analytic(&spec).unwrap();
    let errors: Vec<f64> = [2, 4, 8]
        .iter()
        .map(|&n| {
            let e = discretize(&spec, n, Discretization::Grid, 1).unwrap();
            let sim = simulate_echo(&e, &probe(), &EchoOptions::default()).unwrap();
            (sim.efficiency - analytic).abs()
        })
        .collect();
    assert!(errors.windows(2).all(|w| w[1] < w[0]), "{errors:?}");
}

#[test]
fn delta_teeth_revive_without_decay() {
    let spec = paper();
    let centers = spec.tooth_centers();
    let ensemble = AtomEnsemble {
        weights: vec![1e-3; centers.len()],
        detunings_khz: centers,
        periodicity_khz: spec.periodicity_khz,
        span_khz: spec.span_khz(),
    };
    let opts = EchoOptions {
        horizon_us: 35.0,
        propagation: Propagation::LinearResponse,
        ..EchoOptions::default()
    };
    let sim = simulate_echo(&ensemble, &probe(), &opts).unwrap();
    let peaks: Vec<(f64, f64)> = [10.0, 20.0, 30.0]
        .iter()
        .map(|&t| sim.trace.peak_between(t - 2.0, t + 2.0).unwrap())
        .collect();
    for (k, (t, i)) in peaks.iter().enumerate() {
        assert!((t - 10.0 * (k + 1) as f64).abs() <= opts.step_us);
        assert!((i - peaks[0].1).abs() < 1e-6 * peaks[0].1);
    }
}

#[test]
fn echo_time_scales_inversely_with_periodicity() {
    let mut times = Vec::new();
    for delta in [25.0, 50.0, 100.0, 200.0, 400.0] {
        let spec = scaled(delta);
        let echo = spec.echo_delay_us();
        let ensemble = discretize(&spec, 16, Discretization::Grid, 1).unwrap();
        let input = PulseShape::gaussian(0.2 * echo, 1.0);
        let opts = EchoOptions {
            horizon_us: 1.5 * echo,
            step_us: echo / 400.0,
            ..EchoOptions::default()
        };
        let sim = simulate_echo(&ensemble, &input, &opts).unwrap();
        assert!((sim.echo_time_us - echo).abs() <= opts.step_us);
        times.push((sim.echo_time_us, opts.step_us));
    }
    for w in times.windows(2) {
        assert!((w[0].0 - 2.0 * w[1].0).abs() <= w[0].1 + 2.0 * w[1].1);
    }
}

#[test]
fn passive_medium_never_amplifies() {
    for od in [0.8, 3.0, 10.0] {
        let spec = CombSpec {
            peak_od: od,
            ..paper()
        };
        for prop in [Propagation::LinearResponse, Propagation::SaturatedAbsorption] {
            let ensemble = discretize(&spec, 16, Discretization::Grid, 1).unwrap();
            let opts = EchoOptions {
                propagation: prop,
                ..EchoOptions::default()
            };
            let sim = simulate_echo(&ensemble, &probe(), &opts).unwrap();
            let after = sim.trace.peak_between(5.0, 30.0).unwrap().1;
            if prop == Propagation::SaturatedAbsorption {
                assert!(after <= 1.0, "od {od}: {after}");
            }
            assert!(sim.efficiency.is_finite());
        }
    }
}

#[test]
fn emission_is_linear_in_input() {
    let ensemble = discretize(&paper(), 8, Discretization::Grid, 1).unwrap();
    let opts = EchoOptions::default();
    let base = simulate_echo(&ensemble, &PulseShape::gaussian(2.0, 1.0), &opts).unwrap();
    for c in [0.01, 3.0, 250.0] {
        let sim = simulate_echo(&ensemble, &PulseShape::gaussian(2.0, c), &opts).unwrap();
        let scale = base.field.iter().map(|z| z.norm()).fold(0.0, f64::max);
        for (a, b) in sim.field.iter().zip(&base.field) {
            let out = a * c;
            let expected = b * c;
            assert!((out - expected).norm() <= 1e-9 * c * scale);
            assert!((a - b).norm() <= 1e-9 * scale);
        }
    }
}

#[test]
fn analytic_efficiency_monotone_in_optical_depth() {
    let values: Vec<f64> = (1..=40)
        .map(|k| {
            let spec = CombSpec {
                peak_od: 0.1 * k as f64,
                ..paper()
            };
            afc_efficiency_analytic(&spec).unwrap()
        })
        .collect();
    assert!(values.windows(2).all(|w| w[1] > w[0]));
    assert!(values.iter().all(|v| (0.0..1.0).contains(v)));
    let square = CombSpec {
        tooth_shape: ToothShape::Square,
        ..paper()
    };
    assert!(matches!(
        afc_efficiency_analytic(&square),
        Err(CombError::UnsupportedShape(_))
    ));
}

#[test]
fn sampled_histogram_converges() {
    let spec = paper();
    let profile = build_comb(&spec).unwrap();
    let span = spec.span_khz();
    let bins = 60;
    let width = span / bins as f64;
    let expected: Vec<f64> = (0..bins)
        .map(|b| {
            let lo = -0.5 * span + b as f64 * width;
            integrate(&|x| profile.optical_depth(x), lo, lo + width, &QuadOptions::default())
                .unwrap()
                .0
        })
        .collect();
    let total: f64 = expected.iter().sum();
    let chi2 = |n: usize| -> f64 {
        let seeds = 8;
        (0..seeds)
            .map(|seed| {
                let e = discretize(&spec, n, Discretization::Sampled, seed).unwrap();
                let mut hist = vec![0.0; bins];
                for (d, w) in e.detunings_khz.iter().zip(&e.weights) {
                    let b = (((d + 0.5 * span) / width) as usize).min(bins - 1);
                    hist[b] += w;
                }
                let sum: f64 = hist.iter().sum();
                hist.iter()
                    .zip(&expected)
                    .map(|(h, x)| {
                        let p = x / total;
                        (h / sum - p).powi(2) / p
                    })
                    .sum::<f64>()
            })
            .sum::<f64>()
            / seeds as f64
    };
    let values: Vec<f64> = [16, 32, 64, 128, 256].iter().map(|&n| chi2(n)).collect();
    assert!(values.windows(2).all(|w| w[1] < w[0]), "{values:?}");
    let a = discretize(&spec, 64, Discretization::Sampled, 5).unwrap();
    let b = discretize(&spec, 64, Discretization::Sampled, 5).unwrap();
    assert_eq!(a, b);
}

#[test]
fn profile_csv_has_units() {
    let profile = build_comb(&paper()).unwrap();
    let csv = profile.to_csv(&[0.0, 50.0]);
    assert!(csv.starts_with("detuning_kHz,optical_depth\n"));
    assert_eq!(csv.lines().count(), 3);
}
