use std::f64::consts::PI;

use afcmem::comb::simulate_echo;
use afcmem::dd::{self, coherence_decay, fit_lifetime, DecayModel, DecayOptions, SequenceFamily};
use afcmem::experiment::*;
use afcmem::harness::Config;
use afcmem::spectra::{level_structure, LevelStructure};

fn levels(config: &Config) -> (LevelStructure, LevelStructure) {
    let t = &config.tensors["calc_ii"];
    let field = config.field.field().unwrap();
    (
        level_structure(&t.ground().unwrap(), &field).unwrap(),
        level_structure(&t.excited().unwrap(), &field).unwrap(),
    )
}

/// RK4 integration of the pumped rate equations with uniform branching.
fn rate_oracle(preset: &PumpPreset, dt: f64) -> [f64; 6] {
    let mut p = [1.0 / 6.0; 6];
    for stage in &preset.stages {
        let mut pumped = [false; 6];
        for pump in &stage.pumps {
            pumped[pump.ground - 1] = true;
        }
        let deriv = |p: &[f64; 6]| {
            let out_flow: f64 = (0..6).filter(|&i| pumped[i]).map(|i| p[i]).sum();
            let mut d = [0.0; 6];
            for k in 0..6 {
                d[k] = out_flow / 6.0 - if pumped[k] { p[k] } else { 0.0 };
            }
            d
        };
        let steps = (stage.cycles / dt).round() as usize;
        for _ in 0..steps {
            let add = |a: &[f64; 6], b: &[f64; 6], s: f64| std::array::from_fn(|i| a[i] + s * b[i]);
            let k1 = deriv(&p);
            let k2 = deriv(&add(&p, &k1, 0.5 * dt));
            let k3 = deriv(&add(&p, &k2, 0.5 * dt));
            let k4 = deriv(&add(&p, &k3, dt));
            p = std::array::from_fn(|i| p[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
        }
    }
    p
}

fn without_spin_pump(preset: &PumpPreset) -> PumpPreset {
    let mut p = preset.clone();
    for stage in &mut p.stages {
        stage.pumps.retain(|pump| pump.ground != preset.spin_level);
    }
    p
}

#[test]
fn ideal_pumping_fills_the_storage_level() {
    let config = Config::builtin();
    let (g, e) = levels(&config);
    let lambda = prepare_lambda(&g, &e, &config.pumps["ideal"]).unwrap();
    assert!((lambda.ground_populations[2] - 1.0).abs() < 1e-12);
    assert!(!lambda.residual_flag);
    let sum: f64 = lambda.ground_populations.iter().sum();
    assert!((sum - 1.0).abs() < 1e-9);
}

#[test]
fn paper_pumping_is_clean_and_class_selective() {
    let config = Config::builtin();
    let (g, e) = levels(&config);
    let preset = &config.pumps["paper"];
    let lambda = prepare_lambda(&g, &e, preset).unwrap();
    assert!(lambda.ground_populations[3] < preset.cleanliness_threshold);
    assert!(lambda.ground_populations[2] > 0.99);
    assert!(lambda.class_selective && !lambda.residual_flag);
    assert!(lambda.pump_offsets_mhz.iter().all(|o| o.abs() <= preset.max_offset_mhz));
    let oracle = rate_oracle(preset, 1e-3);
    for (p, o) in lambda.ground_populations.iter().zip(oracle) {
        assert!((p - o).abs() < 1e-9, "{p} vs {o}");
    }
}

#[test]
fn missing_spin_pump_leaves_flagged_residual() {
    let config = Config::builtin();
    let (g, e) = levels(&config);
    let finite = without_spin_pump(&config.pumps["paper"]);
    let lambda = prepare_lambda(&g, &e, &finite).unwrap();
    assert!(lambda.residual_flag);
    let oracle = rate_oracle(&finite, 1e-3);
    for (p, o) in lambda.ground_populations.iter().zip(oracle) {
        assert!((p - o).abs() < 1e-9, "{p} vs {o}");
    }

    let ideal = without_spin_pump(&config.pumps["ideal"]);
    let lambda = prepare_lambda(&g, &e, &ideal).unwrap();
    assert!(lambda.residual_flag);
    let mut long = ideal.clone();
    long.stages[0].cycles = 60.0;
    let oracle = rate_oracle(&long, 1e-3);
    for (p, o) in lambda.ground_populations.iter().zip(oracle) {
        assert!((p - o).abs() < 1e-9, "{p} vs {o}");
    }
    assert!((lambda.ground_populations[3] - 0.5).abs() < 1e-9);
}

#[test]
fn out_of_band_pump_is_rejected() {
    let config = Config::builtin();
    let (g, e) = levels(&config);
    let mut preset = config.pumps["paper"].clone();
    preset.max_offset_mhz = 5.0;
    assert!(matches!(
        prepare_lambda(&g, &e, &preset),
        Err(ExperimentError::PumpOutOfRange { .. })
    ));
}

#[test]
fn efficiency_ledger_examples() {
    let a = decompose_efficiency(0.035e-2, 0.025, 0.385).unwrap();
    assert!((a.eta_spin / 0.095 - 1.0).abs() < 0.02, "{}", a.eta_spin);
    let b = decompose_efficiency(0.052e-2, 0.025, 0.385).unwrap();
    assert!((b.eta_spin / 0.141 - 1.0).abs() < 0.02, "{}", b.eta_spin);
    let lossless = decompose_efficiency(0.025 * 0.385 * 0.385, 0.025, 0.385).unwrap();
    assert!((lossless.eta_spin - 1.0).abs() < 1e-12);
    for spin in [1e-4, 0.095, 0.5, 1.0] {
        let forward = EfficiencyBudget::compose(0.025, 0.385, spin);
        assert!((forward.eta_total - 0.025 * 0.385 * 0.385 * spin).abs() < 1e-12);
        let back = decompose_efficiency(forward.eta_total, forward.eta_afc, forward.eta_control).unwrap();
        assert!((back.eta_spin - spin).abs() < 1e-12);
    }
    assert!(matches!(
        decompose_efficiency(0.01, 0.025, 0.385),
        Err(ExperimentError::InconsistentMeasurement { .. })
    ));
}

#[test]
fn heating_penalty_follows_duty_cycle() {
    let preset = Config::builtin().heating["paper"];
    assert_eq!(heating_penalty(None, &preset), 1.0);
    let at = |tau: f64| {
        let seq = dd::generate_sequence(SequenceFamily::Cpmg, tau, 10).unwrap();
        heating_penalty(Some(&seq), &preset)
    };
    assert!((at(0.1) - 2.5 / 4.5).abs() < 1e-9);
    assert!(at(0.05) < at(0.1));
    let factors: Vec<f64> = [0.02, 0.05, 0.1, 0.2, 0.5, 1.0].iter().map(|&t| at(t)).collect();
    assert!(factors.windows(2).all(|w| w[1] >= w[0]));
    assert!(factors.iter().all(|f| *f > 0.0 && *f <= 1.0));
}

#[test]
fn degenerate_pipeline_reproduces_two_level_echo() {
    let config = Config::builtin();
    let pipeline = config.pipeline("two_level", 5).unwrap();
    let result = run_storage(&pipeline, 0.0).unwrap();
    let sim = simulate_echo(&pipeline.ensemble().unwrap(), &pipeline.probe, &pipeline.echo).unwrap();
    assert_eq!(result.field, sim.field);
    assert_eq!(result.trace, sim.trace);
    assert_eq!(result.budget.eta_total, sim.efficiency);
    assert!((result.echo_time_us - 10.0).abs() <= pipeline.echo.step_us);
}

#[test]
fn paper_pipeline_efficiency_within_factor() {
    let config = Config::builtin();
    let pipeline = config.pipeline("paper_cpmg", 1).unwrap();
    let r = run_storage(&pipeline, 300.0).unwrap();
    let ratio = r.budget.eta_total / 0.035e-2;
    assert!((1.0 / 1.5..=1.5).contains(&ratio), "{}", r.budget.eta_total);
    assert!((r.echo_time_us - 10.0).abs() <= pipeline.echo.step_us);
    assert!(r.snr.is_finite() && r.snr > 0.0);
    assert!(matches!(
        run_storage(&pipeline, 0.05),
        Err(ExperimentError::StorageTimeMismatch { .. })
    ));
}

#[test]
fn pipeline_adds_no_spurious_decay() {
    let config = Config::builtin();
    let pipeline = config.pipeline("paper_cpmg", 1).unwrap();
    let durations = [300.0, 900.0, 1800.0, 2700.0, 3600.0];
    let runs: Vec<StorageResult> = durations.iter().map(|&t| run_storage(&pipeline, t).unwrap()).collect();
    let reference = runs[0].budget.eta_total.sqrt() / runs[0].spin_coherence;
    let amplitude: Vec<f64> = runs.iter().map(|r| r.budget.eta_total.sqrt() / reference).collect();
    let pipeline_fit = fit_lifetime(&durations, &amplitude, DecayModel::Exponential).unwrap();
    let spec = pipeline.decoupling.unwrap();
    let direct = coherence_decay(spec.family, spec.tau_s, &pipeline.noise, &durations, &DecayOptions::default())
        .unwrap()
        .fit
        .unwrap();
    let tolerance = pipeline_fit.lifetime_stderr() + direct.lifetime_stderr() + 1e-9 * direct.lifetime_s;
    assert!((pipeline_fit.lifetime_s - direct.lifetime_s).abs() <= tolerance);
}

#[test]
fn interference_visibility_and_fidelity() {
    let config = Config::builtin();
    let phases: Vec<f64> = (0..24).map(|k| 2.0 * PI * k as f64 / 24.0).collect();
    let silent = config.pipeline("two_level", 0).unwrap();
    let clean = InterferenceSpec {
        background: 0.0,
        ..config.interference["paper"]
    };
    let r = timebin_interference(&silent, &clean, &phases, 0.0).unwrap();
    assert!((r.visibility - 1.0).abs() < 1e-9 && (r.fidelity - 1.0).abs() < 1e-9);
    let peak = r.intensities.iter().cloned().fold(f64::MIN, f64::max);
    assert_eq!(r.intensities[0], peak);

    let noisy = config.pipeline("paper_cpmg", 0).unwrap();
    let spec = config.interference["paper"];
    let r = timebin_interference(&noisy, &spec, &phases, 300.0).unwrap();
    assert!((r.visibility - 0.93).abs() < 1e-3, "{}", r.visibility);
    assert!((r.fidelity - 0.965).abs() < 1e-3);
    assert!(r.to_csv().starts_with("delta_phi_rad,middle_echo_intensity\n"));
}

#[test]
fn visibility_ignores_global_phase() {
    let config = Config::builtin();
    let pipeline = config.pipeline("paper_cpmg", 0).unwrap();
    let base_spec = config.interference["paper"];
    let phases: Vec<f64> = (0..24).map(|k| 2.0 * PI * k as f64 / 24.0).collect();
    let base = timebin_interference(&pipeline, &base_spec, &phases, 300.0).unwrap();
    for shift in [0.3, 1.7, -2.9] {
        let spec = InterferenceSpec {
            readout_phase: base_spec.readout_phase + shift,
            ..base_spec
        };
        let shifted: Vec<f64> = phases.iter().map(|p| p + shift).collect();
        let r = timebin_interference(&pipeline, &spec, &shifted, 300.0).unwrap();
        assert!((r.visibility - base.visibility).abs() < 1e-12);
    }
}

#[test]
fn fringe_fit_recovers_synthetic_parameters() {
    let x: Vec<f64> = (0..36).map(|k| 2.0 * PI * k as f64 / 36.0).collect();
    for (v, phase) in [(0.93, 0.4), (0.5, -1.2), (0.05, 2.5)] {
        let y: Vec<f64> = x.iter().map(|p| 3.0 * (1.0 + v * (p + phase).cos())).collect();
        let fit = fit_fringe(&x, &y).unwrap();
        assert!((fit.visibility - v).abs() < 0.01 * v);
        assert!((fit.phase - phase).abs() < 0.01 * phase.abs());
    }
    assert!(fit_fringe(&x, &vec![1.0; x.len()]).is_err());
}

#[test]
fn transport_comparison() {
    let preset = &Config::builtin().transport["paper"];
    let cmp = transport_vs_fiber(&preset.memory, &preset.channel, preset.speed_kmh).unwrap();
    assert_eq!(cmp.fiber_transmittance, 1e-6);
    assert!((cmp.transit_s - 3600.0).abs() < 1e-9);
    assert_eq!(cmp.memory.len(), 2);
    assert_eq!(cmp.closest_to(preset.reference_efficiency), Some(LifetimeConvention::Amplitude));

    let zero = FiberChannel {
        length_km: 0.0,
        ..preset.channel
    };
    let cmp = transport_vs_fiber(&preset.memory, &zero, preset.speed_kmh).unwrap();
    assert_eq!(cmp.fiber_transmittance, 1.0);
    for m in &cmp.memory {
        assert_eq!(m.efficiency, memory_efficiency(&preset.memory, m.convention, 0.0));
    }
}

#[test]
fn crossover_grows_with_lifetime() {
    let preset = &Config::builtin().transport["paper"];
    for convention in [LifetimeConvention::Intensity, LifetimeConvention::Amplitude] {
        let lengths: Vec<f64> = [1000.0, 3174.0, 1e4, 1e5]
            .iter()
            .filter_map(|&lifetime| {
                let memory = MemoryLink {
                    lifetime_s: lifetime,
                    ..preset.memory
                };
                crossover_length_km(&memory, convention, preset.channel.loss_db_per_km, preset.speed_kmh)
            })
            .collect();
        assert_eq!(lengths.len(), 4);
        assert!(lengths.windows(2).all(|w| w[1] < w[0]), "{lengths:?}");
    }
}
