//! End-to-end storage pipeline and the bookkeeping around it: Λ-system
//! preparation, the efficiency ledger, coil-heating penalty, time-bin
//! interference and the transport comparison.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comb::{
    discretize, simulate_echo, AtomEnsemble, CombError, CombSpec, Discretization, EchoOptions,
    EchoTrace,
};
use crate::dd::{self, DDSequence, DdError, FilterQuadrature, NoiseModel, SequenceFamily};
use crate::pulses::{
    inhomogeneous_coverage, CompoundingModel, ControlPreset, InhomogeneousLine, PulseError,
    PulseShape,
};
use crate::spectra::LevelStructure;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error("pump {name} at {offset_mhz:.3} MHz lies outside the ±{max_mhz} MHz sweep")]
    PumpOutOfRange {
        name: String,
        offset_mhz: f64,
        max_mhz: f64,
    },
    #[error("level index {0} outside 1..=6")]
    LevelIndex(usize),
    #[error("invalid pump preset: {0}")]
    InvalidPreset(String),
    #[error("inconsistent measurement: {0}")]
    InconsistentMeasurement(String),
    #[error("storage time {storage_s} s is not a whole number of {tau_s} s intervals")]
    StorageTimeMismatch { storage_s: f64, tau_s: f64 },
    #[error("fringe fit failed: {0}")]
    FitFailure(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Comb(#[from] CombError),
    #[error(transparent)]
    Pulse(#[from] PulseError),
    #[error(transparent)]
    Dd(#[from] DdError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// One optical pump connecting ground level `ground` to excited level
/// `excited` (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pump {
    pub ground: usize,
    pub excited: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PumpStage {
    pub name: String,
    pub pumps: Vec<Pump>,
    /// Pump rate times duration; `inf` runs the stage to its fixed point.
    #[serde(with = "cycles_serde")]
    pub cycles: f64,
    /// Stage burns away ions of other spectral classes.
    #[serde(default)]
    pub class_cleaning: bool,
}

mod cycles_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PumpPreset {
    pub stages: Vec<PumpStage>,
    /// `branching[e][g]`: probability that excited level `e+1` decays to
    /// ground level `g+1`. Uniform when absent.
    #[serde(default)]
    pub branching: Option<Vec<Vec<f64>>>,
    /// Optical offsets of every pump relative to the Λ transition
    /// `|storage⟩_g ↔ |excited⟩_e` must stay within this, MHz.
    pub max_offset_mhz: f64,
    pub storage_level: usize,
    pub spin_level: usize,
    pub excited_level: usize,
    /// Residual population in the spin level above this is flagged.
    pub cleanliness_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambdaSystem {
    pub storage_level: usize,
    pub spin_level: usize,
    pub excited_level: usize,
    pub ground_populations: [f64; 6],
    /// Excited-manifold populations reached by the storage-transition probe.
    pub excited_populations: [f64; 6],
    pub class_selective: bool,
    /// Spin-level residual above the cleanliness threshold: a spin-wave noise risk.
    pub residual_flag: bool,
    pub pump_offsets_mhz: Vec<f64>,
}

fn check_level(l: usize) -> Result<usize> {
    if (1..=6).contains(&l) {
        Ok(l - 1)
    } else {
        Err(ExperimentError::LevelIndex(l))
    }
}

fn branching_matrix(preset: &PumpPreset) -> Result<[[f64; 6]; 6]> {
    let mut b = [[1.0 / 6.0; 6]; 6];
    if let Some(rows) = &preset.branching {
        if rows.len() != 6 || rows.iter().any(|r| r.len() != 6) {
            return Err(ExperimentError::InvalidPreset("branching must be 6×6".into()));
        }
        for (e, row) in rows.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|v| *v < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(ExperimentError::InvalidPreset(format!(
                    "branching row {} must be non-negative and sum to 1",
                    e + 1
                )));
            }
            b[e].copy_from_slice(row);
        }
    }
    Ok(b)
}

/// Ground-manifold generator of one stage: each pumped level empties at unit
/// rate through its excited level, which decays instantly by `branching`.
fn stage_generator(stage: &PumpStage, branching: &[[f64; 6]; 6]) -> Result<DMatrix<f64>> {
    let mut g = DMatrix::zeros(6, 6);
    let mut seen = [false; 6];
    for p in &stage.pumps {
        let i = check_level(p.ground)?;
        let e = check_level(p.excited)?;
        if seen[i] {
            continue;
        }
        seen[i] = true;
        g[(i, i)] -= 1.0;
        for k in 0..6 {
            g[(k, i)] += branching[e][k];
        }
    }
    Ok(g)
}

fn run_stage(populations: &DVector<f64>, generator: &DMatrix<f64>, cycles: f64) -> Result<DVector<f64>> {
    if cycles.is_infinite() {
        return Ok(absorbing_limit(populations, generator));
    }
    Ok((generator * cycles).exp() * populations)
}

/// Long-time limit of `ṗ = G p`: mass in pumped (transient) levels ends up
/// in unpumped ones by a linear solve. With every level pumped the chain has
/// no absorbing state, and the stationary vector is returned instead.
pub fn absorbing_limit(populations: &DVector<f64>, generator: &DMatrix<f64>) -> DVector<f64> {
    let transient: Vec<usize> = (0..6).filter(|&i| generator[(i, i)] < 0.0).collect();
    let absorbing: Vec<usize> = (0..6).filter(|&i| generator[(i, i)] >= 0.0).collect();
    if transient.is_empty() {
        return populations.clone();
    }
    if absorbing.is_empty() {
        let mut a = generator.clone();
        for j in 0..6 {
            a[(5, j)] = 1.0;
        }
        let mut rhs = DVector::zeros(6);
        rhs[5] = 1.0;
        let total: f64 = populations.iter().sum();
        return a.lu().solve(&rhs).map(|v| v * total).unwrap_or_else(|| populations.clone());
    }
    let nt = transient.len();
    let gtt = DMatrix::from_fn(nt, nt, |r, c| generator[(transient[r], transient[c])]);
    let pt = DVector::from_fn(nt, |r, _| populations[transient[r]]);
    let occupancy = (-gtt).lu().solve(&pt).unwrap_or_else(|| DVector::zeros(nt));
    let mut out = DVector::zeros(6);
    for &a in &absorbing {
        let inflow: f64 = (0..nt).map(|c| generator[(a, transient[c])] * occupancy[c]).sum();
        out[a] = populations[a] + inflow;
    }
    out
}

/// Rate-equation bookkeeping of the class-cleaning and spin-polarization
/// stages, starting from thermal (uniform) ground populations.
pub fn prepare_lambda(
    ground: &LevelStructure,
    excited: &LevelStructure,
    preset: &PumpPreset,
) -> Result<LambdaSystem> {
    let storage = check_level(preset.storage_level)?;
    let spin = check_level(preset.spin_level)?;
    let upper = check_level(preset.excited_level)?;
    if storage == spin {
        return Err(ExperimentError::InvalidPreset("storage and spin levels coincide".into()));
    }
    if ground.energies.len() != 6 || excited.energies.len() != 6 {
        return Err(ExperimentError::InvalidPreset("need six ground and six excited levels".into()));
    }
    let branching = branching_matrix(preset)?;
    let reference = excited.energies[upper] - ground.energies[storage];
    let mut offsets = Vec::new();
    for stage in &preset.stages {
        if !(stage.cycles >= 0.0) {
            return Err(ExperimentError::InvalidPreset(format!(
                "stage {} has negative cycles",
                stage.name
            )));
        }
        for p in &stage.pumps {
            let g = check_level(p.ground)?;
            let e = check_level(p.excited)?;
            let offset = excited.energies[e] - ground.energies[g] - reference;
            if offset.abs() > preset.max_offset_mhz {
                return Err(ExperimentError::PumpOutOfRange {
                    name: format!("{} g{}→e{}", stage.name, p.ground, p.excited),
                    offset_mhz: offset,
                    max_mhz: preset.max_offset_mhz,
                });
            }
            offsets.push(offset);
        }
    }
    let mut pops = DVector::from_element(6, 1.0 / 6.0);
    for stage in &preset.stages {
        let g = stage_generator(stage, &branching)?;
        pops = run_stage(&pops, &g, stage.cycles)?;
    }
    let total: f64 = pops.iter().sum();
    let mut ground_populations = [0.0; 6];
    for (k, v) in pops.iter().enumerate() {
        ground_populations[k] = (v / total).max(0.0);
    }
    let mut excited_populations = [0.0; 6];
    excited_populations[upper] = 1.0;
    Ok(LambdaSystem {
        storage_level: preset.storage_level,
        spin_level: preset.spin_level,
        excited_level: preset.excited_level,
        residual_flag: ground_populations[spin] > preset.cleanliness_threshold,
        ground_populations,
        excited_populations,
        class_selective: preset.stages.iter().any(|s| s.class_cleaning && s.cycles > 0.0),
        pump_offsets_mhz: offsets,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyBudget {
    pub eta_afc: f64,
    pub eta_control: f64,
    pub eta_spin: f64,
    pub eta_total: f64,
}

impl EfficiencyBudget {
    /// `η_total = η_AFC · η_control² · η_spin`.
    pub fn compose(eta_afc: f64, eta_control: f64, eta_spin: f64) -> Self {
        Self {
            eta_afc,
            eta_control,
            eta_spin,
            eta_total: eta_afc * eta_control * eta_control * eta_spin,
        }
    }
}

/// Solves the ledger for `η_spin = η_total/(η_AFC·η_control²)`.
pub fn decompose_efficiency(eta_total: f64, eta_afc: f64, eta_control: f64) -> Result<EfficiencyBudget> {
    for (name, v) in [("eta_total", eta_total), ("eta_afc", eta_afc), ("eta_control", eta_control)] {
        if !(v > 0.0 && v <= 1.0) {
            return Err(ExperimentError::InconsistentMeasurement(format!(
                "{name} = {v} outside (0, 1]"
            )));
        }
    }
    let ceiling = eta_afc * eta_control * eta_control;
    if eta_total > ceiling * (1.0 + 1e-12) {
        return Err(ExperimentError::InconsistentMeasurement(format!(
            "total {eta_total} exceeds η_AFC·η_control² = {ceiling}"
        )));
    }
    Ok(EfficiencyBudget {
        eta_afc,
        eta_control,
        eta_spin: (eta_total / ceiling).min(1.0),
        eta_total,
    })
}

/// Coil heating: RF duty cycle broadens the optical homogeneous line by
/// `broadening_per_duty_khz · duty`, which damps the echo at `1/Δ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatingPreset {
    pub broadening_per_duty_khz: f64,
    pub t_pi_us: f64,
    pub periodicity_khz: f64,
}

/// `exp(−2π·Δγ_h/Δ)` with `Δγ_h` proportional to the π-pulse duty cycle.
pub fn heating_penalty(seq: Option<&DDSequence>, preset: &HeatingPreset) -> f64 {
    let Some(seq) = seq.filter(|s| !s.is_empty()) else {
        return 1.0;
    };
    let duty = (seq.len() as f64 * preset.t_pi_us * 1e-6 / seq.total_s).min(1.0);
    let broadening = preset.broadening_per_duty_khz * duty;
    (-2.0 * PI * broadening / preset.periodicity_khz).exp()
}

/// How the control pulses are modelled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlModel {
    Perfect,
    Chs(ControlPreset),
}

impl ControlModel {
    pub fn efficiency(&self) -> Result<f64> {
        match self {
            ControlModel::Perfect => Ok(1.0),
            ControlModel::Chs(p) => Ok(p.efficiency()?),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecouplingSpec {
    pub family: SequenceFamily,
    pub tau_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageSpec {
    pub line: InhomogeneousLine,
    pub t_pi_us: f64,
    pub model: CompoundingModel,
    /// Pulses entering the compounded coverage; every DD pulse when absent.
    #[serde(default)]
    pub pulse_count: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoragePipeline {
    pub comb: CombSpec,
    pub atoms_per_tooth: usize,
    pub discretization: Discretization,
    pub probe: PulseShape,
    pub echo: EchoOptions,
    pub control: ControlModel,
    pub decoupling: Option<DecouplingSpec>,
    pub noise: NoiseModel,
    pub coverage: Option<CoverageSpec>,
    pub heating: Option<HeatingPreset>,
    pub quadrature: FilterQuadrature,
    /// Detector noise floor in units of the input peak intensity.
    pub noise_floor: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StorageResult {
    /// Times run from the input pulse with the spin storage interval removed.
    #[serde(skip)]
    pub trace: EchoTrace,
    /// Complex echo field; intensities are its squared modulus.
    #[serde(skip)]
    pub field: Vec<num_complex::Complex64>,
    pub storage_time_s: f64,
    pub echo_time_us: f64,
    pub budget: EfficiencyBudget,
    pub two_level_efficiency: f64,
    pub heating_factor: f64,
    pub coverage: f64,
    pub spin_coherence: f64,
    pub pulses: usize,
    pub snr: f64,
}

impl StoragePipeline {
    pub fn ensemble(&self) -> Result<AtomEnsemble> {
        Ok(discretize(&self.comb, self.atoms_per_tooth, self.discretization, self.seed)?)
    }

    pub fn sequence(&self, storage_time_s: f64) -> Result<Option<DDSequence>> {
        let Some(spec) = self.decoupling else {
            return Ok(None);
        };
        if storage_time_s == 0.0 {
            return Ok(None);
        }
        dd::sequence_for_duration(spec.family, spec.tau_s, storage_time_s)
            .map(Some)
            .map_err(|_| ExperimentError::StorageTimeMismatch {
                storage_s: storage_time_s,
                tau_s: spec.tau_s,
            })
    }
}

/// Two-level echo, control transfer down and up, spin-state dephasing and
/// refocusing coverage over the storage time, and the heating penalty.
///
/// Loss factors multiply the emitted field amplitude, so the stored
/// efficiency is `η_AFC·h·η_control²·(C·W)²`.
pub fn run_storage(pipeline: &StoragePipeline, storage_time_s: f64) -> Result<StorageResult> {
    if !(storage_time_s >= 0.0 && storage_time_s.is_finite()) {
        return Err(ExperimentError::InvalidArgument(
            "storage time must be non-negative".into(),
        ));
    }
    let ensemble = pipeline.ensemble()?;
    let sim = simulate_echo(&ensemble, &pipeline.probe, &pipeline.echo)?;
    let eta_control = pipeline.control.efficiency()?;
    let seq = pipeline.sequence(storage_time_s)?;
    let (spin_coherence, coverage, heating_factor) = match &seq {
        None => (1.0, 1.0, 1.0),
        Some(s) => {
            let w = dd::coherence(s, &pipeline.noise, &pipeline.quadrature)?;
            let c = match &pipeline.coverage {
                None => 1.0,
                Some(cov) => {
                    let n = cov.pulse_count.unwrap_or(s.len() as u32);
                    if n == 0 {
                        1.0
                    } else {
                        inhomogeneous_coverage(&cov.line, cov.t_pi_us, n, cov.model)?.compounded
                    }
                }
            };
            let h = pipeline
                .heating
                .as_ref()
                .map_or(1.0, |p| heating_penalty(Some(s), p));
            (w, c, h)
        }
    };
    let amplitude = heating_factor.sqrt() * eta_control * coverage * spin_coherence;
    let field: Vec<_> = sim.field.iter().map(|f| f * amplitude).collect();
    let intensity: Vec<f64> = field.iter().map(|f| f.norm_sqr()).collect();
    let trace = EchoTrace {
        times_us: sim.trace.times_us.clone(),
        intensity,
    };
    let echo_us = pipeline.comb.echo_delay_us();
    let (echo_time_us, peak) = trace
        .peak_between(0.5 * echo_us, 1.5 * echo_us)
        .unwrap_or((echo_us, 0.0));
    let eta_afc = sim.efficiency * heating_factor;
    let eta_spin = (coverage * spin_coherence).powi(2);
    let budget = EfficiencyBudget {
        eta_afc,
        eta_control,
        eta_spin,
        eta_total: peak,
    };
    Ok(StorageResult {
        trace,
        field,
        storage_time_s,
        echo_time_us,
        budget,
        two_level_efficiency: sim.efficiency,
        heating_factor,
        coverage,
        spin_coherence,
        pulses: seq.as_ref().map_or(0, |s| s.len()),
        snr: if pipeline.noise_floor > 0.0 {
            peak / pipeline.noise_floor
        } else {
            f64::INFINITY
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterferenceSpec {
    /// Readout phase difference Δθ between the two read pulses.
    pub readout_phase: f64,
    /// Fixed interferometer offset φ₀.
    pub phase_offset: f64,
    /// Incoherent background relative to the coherent fringe mean.
    pub background: f64,
    /// Separation of the early and late bins, μs.
    pub bin_separation_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InterferenceResult {
    pub delta_phi: Vec<f64>,
    pub intensities: Vec<f64>,
    pub visibility: f64,
    pub fidelity: f64,
    pub fitted_phase: f64,
    pub rms_residual: f64,
}

impl InterferenceResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("delta_phi_rad,middle_echo_intensity\n");
        for (p, i) in self.delta_phi.iter().zip(&self.intensities) {
            out.push_str(&format!("{p},{i}\n"));
        }
        out
    }
}

/// `F = (1 + V)/2`.
pub fn fidelity_from_visibility(v: f64) -> f64 {
    0.5 * (1.0 + v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FringeFit {
    pub mean: f64,
    pub visibility: f64,
    pub phase: f64,
    pub rms_residual: f64,
}

/// Linear least-squares fit of `A(1 + V cos(x + φ))` written as
/// `A + B cos x + C sin x`.
pub fn fit_fringe(x: &[f64], y: &[f64]) -> Result<FringeFit> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(ExperimentError::FitFailure("need at least 3 paired samples".into()));
    }
    let mut ata = Matrix3::zeros();
    let mut aty = Vector3::zeros();
    for (&xi, &yi) in x.iter().zip(y) {
        let row = Vector3::new(1.0, xi.cos(), xi.sin());
        ata += row * row.transpose();
        aty += row * yi;
    }
    let sol = ata
        .lu()
        .solve(&aty)
        .ok_or_else(|| ExperimentError::FitFailure("phase grid does not span the fringe".into()))?;
    let (a, b, c) = (sol[0], sol[1], sol[2]);
    let amp = b.hypot(c);
    if !(a > 0.0) || amp <= 1e-12 * a.abs() {
        return Err(ExperimentError::FitFailure("flat fringe".into()));
    }
    let ss: f64 = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| (yi - a - b * xi.cos() - c * xi.sin()).powi(2))
        .sum();
    Ok(FringeFit {
        mean: a,
        visibility: amp / a,
        phase: (-c).atan2(b),
        rms_residual: (ss / x.len() as f64).sqrt(),
    })
}

/// Middle-echo intensity of the early-late and late-early paths versus the
/// input phase difference, and its fringe fit.
pub fn timebin_interference(
    pipeline: &StoragePipeline,
    spec: &InterferenceSpec,
    delta_phi: &[f64],
    storage_time_s: f64,
) -> Result<InterferenceResult> {
    if !(spec.background >= 0.0) || !(spec.bin_separation_us > 0.0) {
        return Err(ExperimentError::InvalidArgument(
            "background must be non-negative and bin separation positive".into(),
        ));
    }
    let storage = run_storage(pipeline, storage_time_s)?;
    // The two paths share the storage interval and differ by one bin of
    // free evolution, which sets their mutual coherence.
    let bin = dd::generate_sequence(SequenceFamily::Free, spec.bin_separation_us * 1e-6, 0)?;
    let mutual = dd::coherence(&bin, &pipeline.noise, &pipeline.quadrature)?;
    let path = 0.25 * storage.budget.eta_total;
    let intensities: Vec<f64> = delta_phi
        .iter()
        .map(|&p| {
            let arg = p - spec.readout_phase + spec.phase_offset;
            2.0 * path * (1.0 + mutual * arg.cos()) + 2.0 * path * spec.background
        })
        .collect();
    let shifted: Vec<f64> = delta_phi.iter().map(|p| p - spec.readout_phase).collect();
    let fit = fit_fringe(&shifted, &intensities)?;
    Ok(InterferenceResult {
        delta_phi: delta_phi.to_vec(),
        intensities,
        visibility: fit.visibility,
        fidelity: fidelity_from_visibility(fit.visibility),
        fitted_phase: fit.phase,
        rms_residual: fit.rms_residual,
    })
}

/// Lifetime convention used to extrapolate stored intensity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LifetimeConvention {
    /// The lifetime is the 1/e time of the echo intensity: `exp(−t/T)`.
    Intensity,
    /// The lifetime is the 1/e time of the field amplitude: `exp(−2t/T)`.
    Amplitude,
}

impl LifetimeConvention {
    pub fn rate_factor(self) -> f64 {
        match self {
            LifetimeConvention::Intensity => 1.0,
            LifetimeConvention::Amplitude => 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryLink {
    pub eta_ref: f64,
    pub t_ref_s: f64,
    pub lifetime_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiberChannel {
    pub length_km: f64,
    pub loss_db_per_km: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MemoryExtrapolation {
    pub convention: LifetimeConvention,
    pub efficiency: f64,
    /// Length beyond which the transported memory beats the fiber.
    pub crossover_km: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransportComparison {
    pub length_km: f64,
    pub transit_s: f64,
    pub fiber_transmittance: f64,
    pub memory: Vec<MemoryExtrapolation>,
}

impl TransportComparison {
    /// Convention whose extrapolation lies closest to `target` in log space.
    pub fn closest_to(&self, target: f64) -> Option<LifetimeConvention> {
        self.memory
            .iter()
            .min_by(|a, b| {
                let da = (a.efficiency / target).ln().abs();
                let db = (b.efficiency / target).ln().abs();
                da.total_cmp(&db)
            })
            .map(|m| m.convention)
    }
}

pub fn fiber_transmittance(channel: &FiberChannel) -> f64 {
    10f64.powf(-channel.loss_db_per_km * channel.length_km / 10.0)
}

/// Memory efficiency after `t` seconds, `η_ref·exp(−k(t − t_ref)/T)`.
pub fn memory_efficiency(memory: &MemoryLink, convention: LifetimeConvention, t_s: f64) -> f64 {
    memory.eta_ref * (-convention.rate_factor() * (t_s - memory.t_ref_s) / memory.lifetime_s).exp()
}

/// Crossover `L*` solving `η_mem(L/v) = 10^{−αL/10}`.
pub fn crossover_length_km(
    memory: &MemoryLink,
    convention: LifetimeConvention,
    loss_db_per_km: f64,
    speed_kmh: f64,
) -> Option<f64> {
    let k = convention.rate_factor();
    let speed_km_s = speed_kmh / 3600.0;
    let alpha = loss_db_per_km * std::f64::consts::LN_10 / 10.0;
    let denominator = alpha - k / (speed_km_s * memory.lifetime_s);
    let numerator = -(memory.eta_ref.ln() + k * memory.t_ref_s / memory.lifetime_s);
    let l = numerator / denominator;
    (denominator > 0.0 && l >= 0.0).then_some(l)
}

pub fn transport_vs_fiber(
    memory: &MemoryLink,
    channel: &FiberChannel,
    speed_kmh: f64,
) -> Result<TransportComparison> {
    if !(memory.eta_ref > 0.0 && memory.eta_ref <= 1.0)
        || !(memory.lifetime_s > 0.0)
        || !(memory.t_ref_s >= 0.0)
        || !(channel.length_km >= 0.0)
        || !(channel.loss_db_per_km >= 0.0)
        || !(speed_kmh > 0.0)
    {
        return Err(ExperimentError::InvalidArgument(
            "transport inputs must be positive".into(),
        ));
    }
    let transit_s = channel.length_km / speed_kmh * 3600.0;
    let memory_rows = [LifetimeConvention::Intensity, LifetimeConvention::Amplitude]
        .into_iter()
        .map(|c| MemoryExtrapolation {
            convention: c,
            efficiency: memory_efficiency(memory, c, transit_s),
            crossover_km: crossover_length_km(memory, c, channel.loss_db_per_km, speed_kmh),
        })
        .collect();
    Ok(TransportComparison {
        length_km: channel.length_km,
        transit_s,
        fiber_transmittance: fiber_transmittance(channel),
        memory: memory_rows,
    })
}
