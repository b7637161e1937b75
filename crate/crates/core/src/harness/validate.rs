use std::fmt::Write as _;

use serde::Serialize;

use super::config::{lookup, Config};
use super::Result;
use crate::comb::{afc_efficiency_analytic, discretize, simulate_echo};
use crate::dd::{
    coherence_decay, generate_sequence, DecayModel, DecayOptions, SequenceFamily,
};
use crate::experiment::{
    decompose_efficiency, fidelity_from_visibility, heating_penalty, prepare_lambda, run_storage,
    timebin_interference, transport_vs_fiber, LifetimeConvention,
};
use crate::pulses::{rabi_nutation, NutationOptions};
use crate::spectra::{find_zefoz, level_structure, rhd_scan, MagneticField, RhdWeights, ZefozOptions};

/// How a recomputed value is judged against the published one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TolerancePolicy {
    Exact,
    Absolute { tol: f64 },
    Relative { tol: f64 },
    /// Agreement to the published number of decimals: half a unit in the
    /// last quoted place.
    Rounding { decimals: u32 },
    /// Within a multiplicative factor either way.
    Factor { factor: f64 },
    /// The computed value may not exceed the published bound.
    AtMost,
    /// `value ± uncertainty`, each edge widened by the relative margin.
    WidenedBand { margin: f64 },
    ReportOnly,
}

/// What to recompute for a constant.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Quantity {
    ExcitedGap { tensors: String, lower: usize },
    ExcitedTransition { tensors: String, lower: usize, upper: usize },
    ZefozMagnitude { tensors: String, offset: f64 },
    /// Angle between the found field and the configured direction, rad.
    ZefozMisalignment { tensors: String, offset: f64 },
    RhdPeak { tensors: String, range_mhz: [f64; 2] },
    CombFinesse { comb: String },
    EchoDelay { pipeline: String },
    ControlEfficiency { control: String },
    PiPulseWidth { drive: String },
    /// Position of the single refocusing pulse as a fraction of `T`.
    HahnPulseFraction,
    /// Fitted 1/e lifetime in minutes.
    DecoupledLifetime { noise: String, family: SequenceFamily, tau_s: f64 },
    /// Fitted two-pulse memory time in seconds.
    HahnMemoryTime { noise: String },
    SpinLevelResidual { pumps: String, tensors: String },
    StoredEfficiency { pipeline: String, family: SequenceFamily, storage_s: f64 },
    SpinEfficiency { eta_total: f64, eta_afc: f64, eta_control: f64 },
    HeatingFactor { heating: String, tau_s: f64 },
    FringeFidelity { pipeline: String, interference: String, storage_s: f64 },
    FidelityFromVisibility { visibility: f64 },
    FiberTransmittance { transport: String },
    TransportedEfficiency { transport: String, convention: LifetimeConvention },
    AfcEfficiency { comb: String },
    /// Published decay points; none are stored in the repository.
    DigitizedDecay,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PaperConstant {
    pub name: String,
    pub quantity: Quantity,
    pub value: f64,
    pub uncertainty: f64,
    /// Where the value comes from: figure, table or sentence.
    pub anchor: String,
    pub policy: TolerancePolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Check {
    Pass,
    Fail,
    Report,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationEntry {
    pub name: String,
    pub anchor: String,
    pub expected: f64,
    pub uncertainty: f64,
    pub computed: Option<f64>,
    pub policy: TolerancePolicy,
    pub check: Check,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub entries: Vec<ValidationEntry>,
}

impl ValidationReport {
    pub fn failures(&self) -> usize {
        self.entries.iter().filter(|e| e.check == Check::Fail).count()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let tag = match e.check {
                Check::Pass => "PASS",
                Check::Fail => "FAIL",
                Check::Report => "INFO",
            };
            let computed = e.computed.map_or_else(|| "n/a".to_string(), |c| format!("{c:.6e}"));
            write!(
                out,
                "{tag} {}: computed {computed}, published {:.6e}",
                e.name, e.expected
            )
            .unwrap();
            if e.check == Check::Fail || !e.note.is_empty() {
                write!(out, " [{}]", e.anchor).unwrap();
            }
            if !e.note.is_empty() {
                write!(out, " {}", e.note).unwrap();
            }
            out.push('\n');
        }
        let passed = self.entries.iter().filter(|e| e.check == Check::Pass).count();
        writeln!(
            out,
            "{passed} passed, {} failed, {} report-only",
            self.failures(),
            self.entries.iter().filter(|e| e.check == Check::Report).count()
        )
        .unwrap();
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

impl TolerancePolicy {
    fn judge(&self, computed: f64, value: f64, uncertainty: f64) -> Check {
        let ok = match *self {
            TolerancePolicy::ReportOnly => return Check::Report,
            TolerancePolicy::Exact => computed == value,
            TolerancePolicy::Absolute { tol } => (computed - value).abs() <= tol,
            TolerancePolicy::Relative { tol } => (computed - value).abs() <= tol * value.abs(),
            TolerancePolicy::Rounding { decimals } => {
                (computed - value).abs() <= 0.5 * 10f64.powi(-(decimals as i32)) * (1.0 + 1e-9)
            }
            TolerancePolicy::Factor { factor } => {
                computed > 0.0 && value > 0.0 && (computed / value).ln().abs() <= factor.ln()
            }
            TolerancePolicy::AtMost => computed <= value,
            TolerancePolicy::WidenedBand { margin } => {
                let lo = (value - uncertainty) * (1.0 - margin);
                let hi = (value + uncertainty) * (1.0 + margin);
                computed >= lo && computed <= hi
            }
        };
        if ok {
            Check::Pass
        } else {
            Check::Fail
        }
    }
}

fn lifetime_grid(family: SequenceFamily, tau_s: f64) -> Vec<f64> {
    let unit = if family == SequenceFamily::Kddx { 5.0 * tau_s } else { tau_s };
    [600.0, 1200.0, 1800.0, 2400.0]
        .iter()
        .map(|t| (t / unit).round().max(1.0) * unit)
        .collect()
}

fn compute(q: &Quantity, config: &Config) -> Result<Option<f64>> {
    let field = || config.field.field();
    let levels = |tensors: &str| -> Result<_> {
        let t = lookup(&config.tensors, "tensors", tensors)?;
        let b = field()?;
        Ok((level_structure(&t.ground()?, &b)?, level_structure(&t.excited()?, &b)?))
    };
    let zefoz = |tensors: &str, offset: f64| -> Result<_> {
        let t = lookup(&config.tensors, "tensors", tensors)?;
        let b = field()?;
        let start = MagneticField::from_vector(&(b.vector() * (1.0 + offset)));
        Ok((find_zefoz(&t.ground()?, (3, 4), &start, &ZefozOptions::default())?, b))
    };
    let v = match q {
        Quantity::ExcitedGap { tensors, lower } => {
            let (_, e) = levels(tensors)?;
            e.neighbour_gaps().get(lower.wrapping_sub(1)).copied()
        }
        Quantity::ExcitedTransition { tensors, lower, upper } => {
            let (_, e) = levels(tensors)?;
            Some(e.energy(*upper)? - e.energy(*lower)?)
        }
        Quantity::ZefozMagnitude { tensors, offset } => Some(zefoz(tensors, *offset)?.0.field.magnitude()),
        Quantity::ZefozMisalignment { tensors, offset } => {
            let (z, b) = zefoz(tensors, *offset)?;
            let cos = z.field.vector().normalize().dot(&b.vector().normalize());
            Some(cos.clamp(-1.0, 1.0).acos())
        }
        Quantity::RhdPeak { tensors, range_mhz } => {
            let (_, e) = levels(tensors)?;
            let s = rhd_scan(&e, (range_mhz[0], range_mhz[1]), 1e-3, 20.0, &RhdWeights::Uniform(1.0))?;
            s.points
                .iter()
                .copied()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .filter(|_| !s.empty_window)
                .map(|p| p.0)
        }
        Quantity::CombFinesse { comb } => Some(lookup(&config.combs, "comb", comb)?.finesse()),
        Quantity::EchoDelay { pipeline } => {
            let p = config.pipeline(pipeline, 0)?;
            let ensemble = discretize(&p.comb, p.atoms_per_tooth, p.discretization, p.seed)?;
            let sim = simulate_echo(&ensemble, &p.probe, &p.echo)?;
            Some(sim.echo_time_us)
        }
        Quantity::ControlEfficiency { control } => {
            Some(lookup(&config.controls, "control", control)?.efficiency()?)
        }
        Quantity::PiPulseWidth { drive } => {
            let d = lookup(&config.drives, "drive", drive)?;
            let horizon = 4.0 / d.peak_rabi_khz * 1e3;
            Some(rabi_nutation(d, None, horizon, &NutationOptions::default())?.t_pi_us)
        }
        Quantity::HahnPulseFraction => {
            let seq = generate_sequence(SequenceFamily::Free, 2.0, 1)?;
            Some(seq.pulses[0].time_s / seq.total_s)
        }
        Quantity::DecoupledLifetime { noise, family, tau_s } => {
            let n = config.noise_model(noise, 0)?;
            let grid = lifetime_grid(*family, *tau_s);
            let d = coherence_decay(*family, *tau_s, &n, &grid, &DecayOptions::default())?;
            d.fit.map(|f| f.lifetime_s / 60.0)
        }
        Quantity::HahnMemoryTime { noise } => {
            let n = config.noise_model(noise, 0)?;
            let grid = [0.5, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0];
            let opts = DecayOptions {
                model: DecayModel::Stretched,
                ..DecayOptions::default()
            };
            let d = coherence_decay(SequenceFamily::Free, 1.0, &n, &grid, &opts)?;
            d.fit.map(|f| f.lifetime_s)
        }
        Quantity::SpinLevelResidual { pumps, tensors } => {
            let (g, e) = levels(tensors)?;
            let preset = lookup(&config.pumps, "pumps", pumps)?;
            let l = prepare_lambda(&g, &e, preset)?;
            Some(l.ground_populations[preset.spin_level - 1])
        }
        Quantity::StoredEfficiency { pipeline, family, storage_s } => {
            let mut p = config.pipeline(pipeline, 0)?;
            if let Some(d) = p.decoupling.as_mut() {
                d.family = *family;
            }
            Some(run_storage(&p, *storage_s)?.budget.eta_total)
        }
        Quantity::SpinEfficiency { eta_total, eta_afc, eta_control } => {
            Some(decompose_efficiency(*eta_total, *eta_afc, *eta_control)?.eta_spin)
        }
        Quantity::HeatingFactor { heating, tau_s } => {
            let h = lookup(&config.heating, "heating", heating)?;
            let seq = generate_sequence(SequenceFamily::Cpmg, *tau_s, 100)?;
            Some(heating_penalty(Some(&seq), h))
        }
        Quantity::FringeFidelity { pipeline, interference, storage_s } => {
            let p = config.pipeline(pipeline, 0)?;
            let spec = lookup(&config.interference, "interference", interference)?;
            let phases: Vec<f64> = (0..24).map(|k| std::f64::consts::TAU * k as f64 / 24.0).collect();
            Some(timebin_interference(&p, spec, &phases, *storage_s)?.fidelity)
        }
        Quantity::FidelityFromVisibility { visibility } => Some(fidelity_from_visibility(*visibility)),
        Quantity::FiberTransmittance { transport } => {
            let t = lookup(&config.transport, "transport", transport)?;
            Some(transport_vs_fiber(&t.memory, &t.channel, t.speed_kmh)?.fiber_transmittance)
        }
        Quantity::TransportedEfficiency { transport, convention } => {
            let t = lookup(&config.transport, "transport", transport)?;
            let c = transport_vs_fiber(&t.memory, &t.channel, t.speed_kmh)?;
            c.memory.iter().find(|m| m.convention == *convention).map(|m| m.efficiency)
        }
        Quantity::AfcEfficiency { comb } => {
            Some(afc_efficiency_analytic(lookup(&config.combs, "comb", comb)?)?)
        }
        Quantity::DigitizedDecay => None,
    };
    Ok(v)
}

/// Recomputes every constant. Failures, including computation errors, are
/// entries of the report rather than errors.
pub fn validate(constants: &[PaperConstant], config: &Config) -> ValidationReport {
    let entries = constants
        .iter()
        .map(|c| {
            let (computed, mut note) = match compute(&c.quantity, config) {
                Ok(v) => (v, String::new()),
                Err(e) => (None, format!("error: {e}")),
            };
            let check = match computed {
                Some(v) => c.policy.judge(v, c.value, c.uncertainty),
                None if c.policy == TolerancePolicy::ReportOnly => Check::Report,
                None => Check::Fail,
            };
            if computed.is_none() && note.is_empty() {
                note = "no data available".into();
            }
            if check == Check::Report && note.is_empty() {
                if let Some(v) = computed {
                    note = format!("ratio {:.4}", v / c.value);
                }
            }
            ValidationEntry {
                name: c.name.clone(),
                anchor: c.anchor.clone(),
                expected: c.value,
                uncertainty: c.uncertainty,
                computed,
                policy: c.policy,
                check,
                note,
            }
        })
        .collect();
    ValidationReport { entries }
}

fn constant(
    name: &str,
    quantity: Quantity,
    value: f64,
    uncertainty: f64,
    anchor: &str,
    policy: TolerancePolicy,
) -> PaperConstant {
    PaperConstant {
        name: name.into(),
        quantity,
        value,
        uncertainty,
        anchor: anchor.into(),
        policy,
    }
}

/// Published values checked by `validate`, with their sources and policies.
pub fn registry() -> Vec<PaperConstant> {
    use TolerancePolicy::*;
    let calc = || "calc_ii".to_string();
    let accounting = Relative { tol: 0.02 };
    let noise_physics = Relative { tol: 0.15 };
    let mut out = Vec::new();
    for (lower, gap) in [(1, 23.939), (2, 56.089), (3, 23.858), (4, 79.856), (5, 20.865)] {
        out.push(constant(
            &format!("excited gap {}e-{}e (MHz)", lower, lower + 1),
            Quantity::ExcitedGap { tensors: calc(), lower },
            gap,
            0.0,
            "excited-state hyperfine table, calc. II column",
            Absolute { tol: 0.05 },
        ));
    }
    out.extend([
        constant(
            "excited 3e-6e transition (MHz)",
            Quantity::ExcitedTransition { tensors: calc(), lower: 3, upper: 6 },
            124.52,
            0.0,
            "pulsed RHD spectrum of the excited state",
            Absolute { tol: 0.1 },
        ),
        constant(
            "ZEFOZ field magnitude from a 5% offset start (T)",
            Quantity::ZefozMagnitude { tensors: calc(), offset: 0.05 },
            1.280,
            0.0,
            "ZEFOZ field quoted in the main text",
            Absolute { tol: 1e-3 },
        ),
        constant(
            "ZEFOZ field misalignment (rad)",
            Quantity::ZefozMisalignment { tensors: calc(), offset: 0.05 },
            0.0,
            0.0,
            "ZEFOZ field direction quoted in the main text",
            Absolute { tol: 1e-3 },
        ),
        constant(
            "RHD peak in 124.3-124.7 MHz (MHz)",
            Quantity::RhdPeak { tensors: calc(), range_mhz: [124.3, 124.7] },
            124.52,
            0.0,
            "pulsed RHD spectrum of the excited state",
            Absolute { tol: 0.1 },
        ),
        constant(
            "comb finesse",
            Quantity::CombFinesse { comb: "paper".into() },
            2.22,
            0.0,
            "AFC efficiency estimate, supplementary",
            Absolute { tol: 5e-3 },
        ),
        constant(
            "echo delay (us)",
            Quantity::EchoDelay { pipeline: "two_level".into() },
            10.0,
            0.0,
            "storage sequence description, echo at 1/Δ",
            Absolute { tol: 0.05 },
        ),
        constant(
            "control transfer efficiency",
            Quantity::ControlEfficiency { control: "paper".into() },
            0.385,
            0.0,
            "efficiency analysis paragraph",
            accounting,
        ),
        constant(
            "RF pi-pulse width (us)",
            Quantity::PiPulseWidth { drive: "paper_pi".into() },
            65.1,
            0.0,
            "spin nutation, supplementary",
            Relative { tol: 1e-3 },
        ),
        constant(
            "Hahn refocusing pulse position (fraction of T)",
            Quantity::HahnPulseFraction,
            0.5,
            0.0,
            "two-pulse phase memory measurement, supplementary",
            Exact,
        ),
        constant(
            "CPMG lifetime at tau = 100 ms (min)",
            Quantity::DecoupledLifetime {
                noise: "paper_fit".into(),
                family: SequenceFamily::Cpmg,
                tau_s: 0.1,
            },
            52.9,
            1.2,
            "optical storage decay figure caption",
            noise_physics,
        ),
        constant(
            "spin-echo CPMG lifetime at tau = 100 ms (min)",
            Quantity::DecoupledLifetime {
                noise: "paper_fit".into(),
                family: SequenceFamily::Cpmg,
                tau_s: 0.1,
            },
            50.6,
            2.0,
            "RHD spin-echo decay figure caption",
            WidenedBand { margin: 0.15 },
        ),
        constant(
            "KDDx lifetime at tau = 100 ms (min)",
            Quantity::DecoupledLifetime {
                noise: "paper_fit".into(),
                family: SequenceFamily::Kddx,
                tau_s: 0.1,
            },
            33.3,
            1.1,
            "optical storage decay figure caption",
            ReportOnly,
        ),
        constant(
            "spin-echo KDDx lifetime at tau = 100 ms (min)",
            Quantity::DecoupledLifetime {
                noise: "paper_fit".into(),
                family: SequenceFamily::Kddx,
                tau_s: 0.1,
            },
            38.2,
            2.0,
            "RHD spin-echo decay figure caption",
            ReportOnly,
        ),
        constant(
            "spin-echo CPMG lifetime at tau = 20 ms (min)",
            Quantity::DecoupledLifetime {
                noise: "paper_fit".into(),
                family: SequenceFamily::Cpmg,
                tau_s: 0.02,
            },
            2.68 * 60.0,
            0.06 * 60.0,
            "RHD spin-echo decay figure caption",
            ReportOnly,
        ),
        constant(
            "two-pulse memory time (s)",
            Quantity::HahnMemoryTime { noise: "paper_fit".into() },
            21.5,
            0.0,
            "two-pulse phase memory measurement, supplementary",
            ReportOnly,
        ),
        constant(
            "digitized storage decay points",
            Quantity::DigitizedDecay,
            52.9,
            1.2,
            "storage decay versus time figure",
            ReportOnly,
        ),
        constant(
            "spin-level residual after pumping",
            Quantity::SpinLevelResidual { pumps: "paper".into(), tensors: calc() },
            1e-3,
            0.0,
            "experimental sequence figure, spin polarization",
            AtMost,
        ),
        constant(
            "total efficiency, CPMG 5 min",
            Quantity::StoredEfficiency {
                pipeline: "paper_cpmg".into(),
                family: SequenceFamily::Cpmg,
                storage_s: 300.0,
            },
            3.5e-4,
            0.0,
            "efficiency analysis paragraph",
            Factor { factor: 1.5 },
        ),
        constant(
            "total efficiency, KDDx 5 min",
            Quantity::StoredEfficiency {
                pipeline: "paper_cpmg".into(),
                family: SequenceFamily::Kddx,
                storage_s: 300.0,
            },
            5.2e-4,
            0.0,
            "efficiency analysis paragraph",
            ReportOnly,
        ),
        constant(
            "spin efficiency, CPMG 5 min",
            Quantity::SpinEfficiency { eta_total: 3.5e-4, eta_afc: 0.025, eta_control: 0.385 },
            0.095,
            0.0,
            "efficiency analysis paragraph",
            accounting,
        ),
        constant(
            "spin efficiency, KDDx 5 min",
            Quantity::SpinEfficiency { eta_total: 5.2e-4, eta_afc: 0.025, eta_control: 0.385 },
            0.141,
            0.0,
            "efficiency analysis paragraph",
            accounting,
        ),
        constant(
            "heating factor at tau = 100 ms",
            Quantity::HeatingFactor { heating: "paper".into(), tau_s: 0.1 },
            2.5 / 4.5,
            0.0,
            "efficiency analysis paragraph, AFC efficiency under RF",
            accounting,
        ),
        constant(
            "fringe fidelity, 5 min",
            Quantity::FringeFidelity {
                pipeline: "paper_cpmg".into(),
                interference: "paper".into(),
                storage_s: 300.0,
            },
            0.965,
            0.028,
            "time-bin interference paragraph",
            Rounding { decimals: 3 },
        ),
    ]);
    for (v, f) in [(0.930, 0.965), (0.953, 0.976), (0.929, 0.964)] {
        out.push(constant(
            &format!("fidelity from V = {v:.3}"),
            Quantity::FidelityFromVisibility { visibility: v },
            f,
            0.0,
            "time-bin interference paragraph",
            Rounding { decimals: 3 },
        ));
    }
    out.extend([
        constant(
            "fiber transmittance over 300 km",
            Quantity::FiberTransmittance { transport: "paper".into() },
            1e-6,
            0.0,
            "transport comparison paragraph",
            Relative { tol: 1e-12 },
        ),
        constant(
            "transported efficiency after one hour, intensity lifetime",
            Quantity::TransportedEfficiency {
                transport: "paper".into(),
                convention: LifetimeConvention::Intensity,
            },
            5e-5,
            0.0,
            "transport comparison paragraph",
            ReportOnly,
        ),
        constant(
            "transported efficiency after one hour, amplitude lifetime",
            Quantity::TransportedEfficiency {
                transport: "paper".into(),
                convention: LifetimeConvention::Amplitude,
            },
            5e-5,
            0.0,
            "transport comparison paragraph",
            ReportOnly,
        ),
        constant(
            "analytic AFC efficiency",
            Quantity::AfcEfficiency { comb: "paper".into() },
            0.044,
            0.0,
            "AFC efficiency estimate, supplementary",
            ReportOnly,
        ),
    ]);
    out
}
