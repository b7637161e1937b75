use std::f64::consts::PI;

use afcmem::dd::*;
use afcmem::harness::Config;
use afcmem::pulses::{InhomogeneousLine, LineShape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

fn ou(sigma: f64, tc: f64, seed: u64) -> NoiseModel {
    NoiseModel::new(
        NoiseSpectrum::OrnsteinUhlenbeck {
            sigma,
            correlation_time_s: tc,
        },
        seed,
    )
}

fn quad() -> FilterQuadrature {
    FilterQuadrature::default()
}

#[test]
fn sequence_layouts() {
    let cpmg = generate_sequence(SequenceFamily::Cpmg, 0.1, 4).unwrap();
    let times: Vec<f64> = cpmg.pulses.iter().map(|p| p.time_s).collect();
    for (t, e) in times.iter().zip([0.05, 0.15, 0.25, 0.35]) {
        assert!((t - e).abs() < 1e-15);
    }
    assert!(cpmg.pulses.iter().all(|p| p.phase == cpmg.pulses[0].phase));
    assert!((cpmg.total_s - 0.4).abs() < 1e-15);

    let kdd = generate_sequence(SequenceFamily::Kddx, 0.1, 10).unwrap();
    let phases: Vec<f64> = kdd.pulses.iter().map(|p| p.phase).collect();
    let block = [PI / 6.0, 0.0, PI / 2.0, 0.0, PI / 6.0];
    assert_eq!(&phases[..5], &block);
    assert_eq!(&phases[5..], &block);
    assert!(matches!(
        generate_sequence(SequenceFamily::Kddx, 0.1, 7),
        Err(DdError::KddxPulseCount(7))
    ));

    let hahn = generate_sequence(SequenceFamily::Free, 2.0, 1).unwrap();
    assert_eq!(hahn.pulses.len(), 1);
    assert!((hahn.pulses[0].time_s - 0.5 * hahn.total_s).abs() < 1e-15);
    assert!(cpmg.to_csv().starts_with("time_s,phase_rad\n"));
}

#[test]
fn filter_low_frequency_limits() {
    let free = generate_sequence(SequenceFamily::Free, 0.7, 0).unwrap();
    let f = filter_function(&free, 1e-6);
    assert!((f - 0.49).abs() < 1e-9);
    let hahn = generate_sequence(SequenceFamily::Free, 0.7, 1).unwrap();
    assert!(filter_function(&hahn, 1e-6) < 1e-12);
}

fn fft_filter(seq: &DDSequence, padding: usize, samples_per_s: f64) -> (Vec<f64>, Vec<f64>) {
    let window = padding as f64 * seq.total_s;
    let n = (window * samples_per_s).round() as usize;
    let dt = window / n as f64;
    let mut buffer: Vec<Complex<f64>> = (0..n)
        .map(|k| {
            let t = (k as f64 + 0.5) * dt;
            if t > seq.total_s {
                return Complex::new(0.0, 0.0);
            }
            let flips = seq.pulses.iter().filter(|p| p.time_s < t).count();
            let s = if flips % 2 == 0 { 1.0 } else { -1.0 };
            Complex::new(s * dt, 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buffer);
    let omegas = (0..n / 2).map(|k| 2.0 * PI * k as f64 / window).collect();
    let values = buffer[..n / 2].iter().map(|z| z.norm_sqr()).collect();
    (omegas, values)
}

#[test]
fn cpmg_filter_matches_fft_oracle() {
    let tau = 0.1;
    let seq = generate_sequence(SequenceFamily::Cpmg, tau, 8).unwrap();
    let (omegas, oracle) = fft_filter(&seq, 16, 2e5);
    let peak = (1..omegas.len())
        .filter(|&k| omegas[k] < 4.0 * PI / tau)
        .max_by(|&a, &b| oracle[a].total_cmp(&oracle[b]))
        .unwrap();
    assert!((omegas[peak] - PI / tau).abs() < 0.1 * PI / tau);
    let scale = oracle[peak];
    for k in (1..omegas.len()).filter(|&k| omegas[k] < 10.0 * PI / tau) {
        let f = filter_function(&seq, omegas[k]);
        assert!((f - oracle[k]).abs() < 1e-4 * scale, "{}: {f} vs {}", omegas[k], oracle[k]);
    }
}

#[test]
fn phases_do_not_enter_pure_dephasing() {
    let noise = Config::builtin().noise_model("paper_fit", 0).unwrap();
    for n in [5, 20, 100] {
        let cpmg = generate_sequence(SequenceFamily::Cpmg, 0.1, n).unwrap();
        let kdd = generate_sequence(SequenceFamily::Kddx, 0.1, n).unwrap();
        let a = coherence(&cpmg, &noise, &quad()).unwrap();
        let b = coherence(&kdd, &noise, &quad()).unwrap();
        assert!((a - b).abs() < 1e-9);
        for w in [0.3, 3.0, 31.4, 100.0] {
            assert_eq!(filter_function(&cpmg, w), filter_function(&kdd, w));
        }
    }
}

#[test]
fn silent_noise_keeps_full_coherence() {
    let noise = Config::builtin().noise_model("silent", 0).unwrap();
    let decay = coherence_decay(SequenceFamily::Cpmg, 0.1, &noise, &[1.0, 10.0, 100.0], &DecayOptions::default())
        .unwrap();
    assert!(decay.coherence.iter().all(|c| *c == 1.0));
    let seq = generate_sequence(SequenceFamily::Cpmg, 0.1, 20).unwrap();
    let mc = monte_carlo_dephasing(
        &seq,
        &noise,
        &MonteCarloOptions {
            trajectories: 100,
            pulse_errors: None,
        },
    )
    .unwrap();
    assert_eq!((mc.coherence, mc.stderr), (1.0, 0.0));
}

#[test]
fn white_noise_rate_ignores_interval() {
    let noise = Config::builtin().noise_model("white", 0).unwrap();
    let durations = [200.0, 400.0, 800.0, 1600.0];
    let lifetimes: Vec<f64> = [0.05, 0.1, 0.5]
        .iter()
        .map(|&tau| {
            let d = coherence_decay(SequenceFamily::Cpmg, tau, &noise, &durations, &DecayOptions::default())
                .unwrap();
            d.fit.unwrap().lifetime_s
        })
        .collect();
    for l in &lifetimes {
        assert!((l - lifetimes[0]).abs() < 1e-6 * lifetimes[0], "{lifetimes:?}");
    }
}

#[test]
fn paper_fit_noise_reproduces_calibration_datum() {
    let noise = Config::builtin().noise_model("paper_fit", 0).unwrap();
    let durations: Vec<f64> = (1..=8).map(|k| 600.0 * k as f64).collect();
    let d = coherence_decay(SequenceFamily::Cpmg, 0.1, &noise, &durations, &DecayOptions::default())
        .unwrap();
    let minutes = d.fit.unwrap().lifetime_s / 60.0;
    assert!((minutes - 52.9).abs() < 0.15 * 52.9, "{minutes}");
    assert!(d.coherence.iter().all(|c| (0.0..=1.0).contains(c)));
    assert!(d.coherence.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn cpmg_lifetime_non_increasing_in_interval() {
    let noise = ou(0.02, 5.0, 0);
    let durations: Vec<f64> = (1..=6).map(|k| 40.0 * k as f64).collect();
    let lifetimes: Vec<f64> = [0.05, 0.1, 0.2, 0.5, 1.0]
        .iter()
        .map(|&tau| {
            coherence_decay(SequenceFamily::Cpmg, tau, &noise, &durations, &DecayOptions::default())
                .unwrap()
                .fit
                .unwrap()
                .lifetime_s
        })
        .collect();
    assert!(lifetimes.windows(2).all(|w| w[1] <= w[0]), "{lifetimes:?}");
}

fn ou_hahn_chi(sigma: f64, tc: f64, t: f64) -> f64 {
    let x = t / tc;
    sigma * sigma * tc * tc * (x - 3.0 + 4.0 * (-0.5 * x).exp() - (-x).exp())
}

#[test]
fn monte_carlo_matches_closed_form_ou_echo() {
    let (sigma, tc, t) = (80.0, 1.0, 0.1);
    let noise = ou(sigma, tc, 42);
    let seq = generate_sequence(SequenceFamily::Free, t, 1).unwrap();
    let exact = (-ou_hahn_chi(sigma, tc, t)).exp();
    let filter = coherence(&seq, &noise, &quad()).unwrap();
    assert!((filter - exact).abs() < 1e-6, "{filter} vs {exact}");
    let mc = monte_carlo_dephasing(
        &seq,
        &noise,
        &MonteCarloOptions {
            trajectories: 4000,
            pulse_errors: None,
        },
    )
    .unwrap();
    assert!((mc.coherence - exact).abs() < 3.0 * mc.stderr, "{mc:?} vs {exact}");
}

#[test]
fn monte_carlo_is_seed_deterministic() {
    let noise = ou(0.5, 1.0, 9);
    let seq = generate_sequence(SequenceFamily::Cpmg, 0.1, 30).unwrap();
    let opts = MonteCarloOptions {
        trajectories: 200,
        pulse_errors: None,
    };
    let a = monte_carlo_dephasing(&seq, &noise, &opts).unwrap();
    let b = monte_carlo_dephasing(&seq, &noise, &opts).unwrap();
    assert_eq!(a, b);
}

#[test]
fn pulse_errors_separate_cpmg_from_kddx() {
    let noise = Config::builtin().noise_model("silent", 1).unwrap();
    let line = InhomogeneousLine::new(LineShape::Gaussian, 2.0, 0.05).unwrap();
    let opts = MonteCarloOptions {
        trajectories: 400,
        pulse_errors: Some(PulseErrorModel { line, t_pi_us: 65.1 }),
    };
    let cpmg = generate_sequence(SequenceFamily::Cpmg, 0.1, 100).unwrap();
    let kdd = generate_sequence(SequenceFamily::Kddx, 0.1, 100).unwrap();
    let a = monte_carlo_dephasing(&cpmg, &noise, &opts).unwrap();
    let b = monte_carlo_dephasing(&kdd, &noise, &opts).unwrap();
    assert!(a.coherence > b.coherence + 3.0 * (a.stderr + b.stderr), "{a:?} {b:?}");
}

#[test]
fn exponential_fit_recovers_exact_lifetime() {
    let t: Vec<f64> = (0..10).map(|k| 100.0 * k as f64).collect();
    let c: Vec<f64> = t.iter().map(|x| (-x / 600.0f64).exp()).collect();
    let fit = fit_lifetime(&t, &c, DecayModel::Exponential).unwrap();
    assert!((fit.lifetime_s / 600.0 - 1.0).abs() < 1e-6);
    for scale in [1e-3, 7.0, 1e4] {
        let ts: Vec<f64> = t.iter().map(|x| x * scale).collect();
        let scaled = fit_lifetime(&ts, &c, DecayModel::Exponential).unwrap();
        let expected = fit.lifetime_s * scale;
        assert!((scaled.lifetime_s - expected).abs() <= 4.0 * f64::EPSILON * expected);
    }
}

#[test]
fn stretched_fit_recovers_exponent_under_noise() {
    let normal = Normal::new(0.0, 0.01).unwrap();
    let t: Vec<f64> = (1..=25).map(|k| 40.0 * k as f64).collect();
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c: Vec<f64> = t
            .iter()
            .map(|x| ((-(x / 500.0f64).powi(2)).exp() * (1.0 + normal.sample(&mut rng))).clamp(1e-6, 1.0))
            .collect();
        let fit = fit_lifetime(&t, &c, DecayModel::Stretched).unwrap();
        assert!((fit.beta - 2.0).abs() < 0.05, "seed {seed}: {}", fit.beta);
    }
}

#[test]
fn non_decaying_data_is_flagged() {
    let t = [1.0, 2.0, 3.0, 4.0, 5.0];
    assert!(fit_lifetime(&t, &[1.0; 5], DecayModel::Exponential).is_err());
    assert!(fit_lifetime(&t[..3], &[1.0, 0.9, 0.8], DecayModel::Exponential).is_err());
}
