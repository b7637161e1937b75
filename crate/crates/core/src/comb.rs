//! Atomic frequency comb: absorption profile, analytic two-level echo
//! efficiency, and a discretized-ensemble echo simulation.
//!
//! Units: detuning in kHz, time in μs, optical depth dimensionless.

use std::f64::consts::{LN_2, PI};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{integrate, QuadOptions, QuadratureError};
use crate::pulses::PulseShape;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CombError {
    #[error("invalid comb: {0}")]
    InvalidSpec(String),
    #[error("the closed-form efficiency only covers gaussian teeth, got {0:?}; use simulate_echo")]
    UnsupportedShape(ToothShape),
    #[error("atom ensemble is empty")]
    EmptyEnsemble,
    #[error("horizon {horizon_us} μs does not reach the echo at {echo_us} μs")]
    HorizonTooShort { horizon_us: f64, echo_us: f64 },
    #[error("invalid ensemble: {0}")]
    InvalidEnsemble(String),
    #[error("time step must be positive, got {0}")]
    InvalidStep(f64),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

pub type Result<T> = std::result::Result<T, CombError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToothShape {
    Gaussian,
    Square,
    Lorentzian,
}

impl ToothShape {
    /// Unit-peak tooth evaluated at offset `x` from its center, FWHM `fwhm`.
    pub fn value(self, x: f64, fwhm: f64) -> f64 {
        let u = x / fwhm;
        match self {
            ToothShape::Gaussian => (-4.0 * LN_2 * u * u).exp(),
            ToothShape::Square => {
                if (-0.5..0.5).contains(&u) {
                    1.0
                } else {
                    0.0
                }
            }
            ToothShape::Lorentzian => 1.0 / (1.0 + 4.0 * u * u),
        }
    }

    /// Area of a unit-peak tooth divided by its FWHM.
    pub fn area_constant(self) -> f64 {
        match self {
            ToothShape::Gaussian => (PI / (4.0 * LN_2)).sqrt(),
            ToothShape::Square => 1.0,
            ToothShape::Lorentzian => 0.5 * PI,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CombSpec {
    /// Tooth spacing Δ.
    pub periodicity_khz: f64,
    /// Tooth FWHM γ.
    pub tooth_fwhm_khz: f64,
    pub bandwidth_khz: f64,
    pub background_od: f64,
    /// αL, the optical depth at a tooth peak.
    pub peak_od: f64,
    pub tooth_shape: ToothShape,
}

impl CombSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(CombError::InvalidSpec(m.to_string()));
        if !(self.tooth_fwhm_khz > 0.0 && self.tooth_fwhm_khz < self.periodicity_khz) {
            return fail("require 0 < tooth_fwhm < periodicity");
        }
        if !(self.bandwidth_khz >= self.periodicity_khz) {
            return fail("bandwidth must hold at least one tooth");
        }
        if !(self.background_od >= 0.0 && self.peak_od >= self.background_od) {
            return fail("require peak_od >= background_od >= 0");
        }
        if !self.peak_od.is_finite() || !self.bandwidth_khz.is_finite() {
            return fail("parameters must be finite");
        }
        Ok(())
    }

    pub fn finesse(&self) -> f64 {
        self.periodicity_khz / self.tooth_fwhm_khz
    }

    pub fn tooth_count(&self) -> usize {
        ((self.bandwidth_khz / self.periodicity_khz).round() as usize).max(1)
    }

    /// Frequency span covered by the teeth, `tooth_count · Δ`.
    pub fn span_khz(&self) -> f64 {
        self.tooth_count() as f64 * self.periodicity_khz
    }

    /// Tooth centers, symmetric about zero detuning.
    pub fn tooth_centers(&self) -> Vec<f64> {
        let n = self.tooth_count();
        let half = 0.5 * self.span_khz();
        (0..n)
            .map(|k| -half + (k as f64 + 0.5) * self.periodicity_khz)
            .collect()
    }

    /// Echo delay 1/Δ in μs.
    pub fn echo_delay_us(&self) -> f64 {
        1e3 / self.periodicity_khz
    }
}

/// Evaluable optical-depth profile `d(δ)` of a comb.
#[derive(Debug, Clone)]
pub struct CombProfile {
    spec: CombSpec,
    centers: Vec<f64>,
}

impl CombProfile {
    pub fn spec(&self) -> &CombSpec {
        &self.spec
    }

    /// `d(δ) = d₀ + (αL − d₀)·Σ_k g(δ − δ_k)` with unit-peak teeth `g`.
    pub fn optical_depth(&self, detuning_khz: f64) -> f64 {
        let s = &self.spec;
        let teeth: f64 = self
            .centers
            .iter()
            .map(|c| s.tooth_shape.value(detuning_khz - c, s.tooth_fwhm_khz))
            .sum();
        s.background_od + (s.peak_od - s.background_od) * teeth
    }

    pub fn to_csv(&self, detunings_khz: &[f64]) -> String {
        let mut out = String::from("detuning_kHz,optical_depth\n");
        for &d in detunings_khz {
            out.push_str(&format!("{d},{}\n", self.optical_depth(d)));
        }
        out
    }
}

pub fn build_comb(spec: &CombSpec) -> Result<CombProfile> {
    spec.validate()?;
    Ok(CombProfile {
        spec: *spec,
        centers: spec.tooth_centers(),
    })
}

/// Mean optical depth of a gaussian comb, `(αL/F)·√(π/(4 ln 2))`.
pub fn effective_optical_depth(peak_od: f64, finesse: f64) -> f64 {
    peak_od / finesse * (PI / (4.0 * LN_2)).sqrt()
}

/// `η = (1 − e^{−(αL/F)√(π/(4 ln 2))})² · e^{−(1/F²)(π²/(2 ln 2))}`.
pub fn afc_efficiency_from_finesse(peak_od: f64, finesse: f64) -> f64 {
    let absorbed = 1.0 - (-effective_optical_depth(peak_od, finesse)).exp();
    let dephasing = (-(PI * PI / (2.0 * LN_2)) / (finesse * finesse)).exp();
    absorbed * absorbed * dephasing
}

pub fn afc_efficiency_analytic(spec: &CombSpec) -> Result<f64> {
    spec.validate()?;
    if spec.tooth_shape != ToothShape::Gaussian {
        return Err(CombError::UnsupportedShape(spec.tooth_shape));
    }
    Ok(afc_efficiency_from_finesse(spec.peak_od, spec.finesse()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Discretization {
    /// Cell midpoints on a uniform grid, weighted by the profile.
    Grid,
    /// Seeded draws from the profile, equal weights.
    Sampled,
}

/// Discrete detuning classes standing in for the inhomogeneous comb.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomEnsemble {
    pub detunings_khz: Vec<f64>,
    /// Absorption weight of each class, optical depth × kHz.
    pub weights: Vec<f64>,
    pub periodicity_khz: f64,
    /// Spectral span the weights are spread over, kHz.
    pub span_khz: f64,
}

impl AtomEnsemble {
    pub fn validate(&self) -> Result<()> {
        if self.detunings_khz.is_empty() {
            return Err(CombError::EmptyEnsemble);
        }
        if self.detunings_khz.len() != self.weights.len() {
            return Err(CombError::InvalidEnsemble("length mismatch".into()));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(CombError::InvalidEnsemble("negative weight".into()));
        }
        if !(self.periodicity_khz > 0.0 && self.span_khz > 0.0) {
            return Err(CombError::InvalidEnsemble(
                "periodicity and span must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Mean optical depth over the span.
    pub fn mean_optical_depth(&self) -> f64 {
        self.weights.iter().sum::<f64>() / self.span_khz
    }

    pub fn len(&self) -> usize {
        self.detunings_khz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detunings_khz.is_empty()
    }
}

pub fn discretize(
    spec: &CombSpec,
    atoms_per_tooth: usize,
    mode: Discretization,
    seed: u64,
) -> Result<AtomEnsemble> {
    let profile = build_comb(spec)?;
    if atoms_per_tooth == 0 {
        return Err(CombError::InvalidEnsemble("atoms_per_tooth must be >= 1".into()));
    }
    let span = spec.span_khz();
    let lo = -0.5 * span;
    let n = atoms_per_tooth * spec.tooth_count();
    let (detunings, weights) = match mode {
        Discretization::Grid => {
            let cell = span / n as f64;
            (0..n)
                .map(|k| {
                    let d = lo + (k as f64 + 0.5) * cell;
                    (d, profile.optical_depth(d) * cell)
                })
                .unzip()
        }
        Discretization::Sampled => {
            let area = profile_area(&profile, lo, -lo)?;
            let ceiling = profile_ceiling(&profile);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut detunings = Vec::with_capacity(n);
            while detunings.len() < n {
                let d = lo + span * rng.random::<f64>();
                if rng.random::<f64>() * ceiling <= profile.optical_depth(d) {
                    detunings.push(d);
                }
            }
            detunings.sort_by(f64::total_cmp);
            let w = area / n as f64;
            let weights = vec![w; n];
            (detunings, weights)
        }
    };
    Ok(AtomEnsemble {
        detunings_khz: detunings,
        weights,
        periodicity_khz: spec.periodicity_khz,
        span_khz: span,
    })
}

fn profile_area(profile: &CombProfile, lo: f64, hi: f64) -> Result<f64> {
    let s = profile.spec();
    // One panel per tooth keeps the square edges and narrow peaks resolved.
    let opts = QuadOptions {
        abs_tol: 1e-12,
        rel_tol: 1e-12,
        max_depth: 50,
    };
    let mut total = 0.0;
    let panels = s.tooth_count();
    let width = (hi - lo) / panels as f64;
    for k in 0..panels {
        let a = lo + k as f64 * width;
        let (v, _) = integrate(&|d| profile.optical_depth(d), a, a + width, &opts)?;
        total += v;
    }
    Ok(total)
}

fn profile_ceiling(profile: &CombProfile) -> f64 {
    let s = profile.spec();
    // Overlapping teeth can exceed αL between neighbours; bound by direct scan.
    let grid = 64 * s.tooth_count();
    let span = s.span_khz();
    let max = (0..=grid)
        .map(|k| profile.optical_depth(-0.5 * span + span * k as f64 / grid as f64))
        .fold(0.0f64, f64::max);
    1.05 * max.max(s.peak_od)
}

/// How re-absorption of the emitted field is treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Propagation {
    /// Bare first-order collective emission.
    LinearResponse,
    /// First-order emission rescaled by `(1 − e^{−d̃})/d̃`, with `d̃` the
    /// ensemble's mean optical depth, so the absorbed fraction saturates.
    SaturatedAbsorption,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EchoOptions {
    pub horizon_us: f64,
    pub step_us: f64,
    /// Time before the input-pulse center where the grid starts; defaults
    /// to three pulse widths.
    pub lead_us: Option<f64>,
    pub propagation: Propagation,
}

impl Default for EchoOptions {
    fn default() -> Self {
        Self {
            horizon_us: 30.0,
            step_us: 0.05,
            lead_us: None,
            propagation: Propagation::SaturatedAbsorption,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EchoTrace {
    pub times_us: Vec<f64>,
    /// Emitted intensity normalized to the input peak intensity.
    pub intensity: Vec<f64>,
}

impl EchoTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time_us,intensity\n");
        for (t, i) in self.times_us.iter().zip(&self.intensity) {
            out.push_str(&format!("{t},{i}\n"));
        }
        out
    }

    /// Time and value of the largest sample with `t` in `[from, to]`.
    pub fn peak_between(&self, from: f64, to: f64) -> Option<(f64, f64)> {
        self.times_us
            .iter()
            .zip(&self.intensity)
            .filter(|(t, _)| **t >= from && **t <= to)
            .fold(None, |best: Option<(f64, f64)>, (&t, &i)| match best {
                Some((_, bi)) if bi >= i => best,
                _ => Some((t, i)),
            })
    }
}

#[derive(Debug, Clone)]
pub struct EchoSimulation {
    pub trace: EchoTrace,
    /// Emitted field normalized to the input peak amplitude.
    pub field: Vec<Complex64>,
    pub echo_time_us: f64,
    /// Echo-to-input peak intensity ratio, the simulated η_AFC.
    pub efficiency: f64,
}

const CLASS_CHUNK: usize = 64;

/// Linear-response collective emission of the ensemble driven by `input`.
///
/// Each class carries a polarization `P_k` obeying `dP_k/dt = −i2πδ_k P_k + E(t)`,
/// integrated with an exponential trapezoid rule. The emitted field is
/// `−Σ_k w_k P_k`, which rephases at multiples of `1/Δ`. The input pulse is
/// centered at `t = 0`.
pub fn simulate_echo(
    ensemble: &AtomEnsemble,
    input: &PulseShape,
    opts: &EchoOptions,
) -> Result<EchoSimulation> {
    ensemble.validate()?;
    if !(opts.step_us > 0.0) {
        return Err(CombError::InvalidStep(opts.step_us));
    }
    let echo_us = 1e3 / ensemble.periodicity_khz;
    if !(opts.horizon_us > echo_us) {
        return Err(CombError::HorizonTooShort {
            horizon_us: opts.horizon_us,
            echo_us,
        });
    }
    let center = input.center_us();
    let lead = opts.lead_us.unwrap_or(center.max(3.0 * input.width_us()));
    let h = opts.step_us;
    let n_steps = ((opts.horizon_us + lead) / h).round() as usize + 1;
    let times: Vec<f64> = (0..n_steps).map(|n| -lead + n as f64 * h).collect();
    let drive: Vec<f64> = times.iter().map(|t| input.envelope(t + center)).collect();
    let peak = drive.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if peak == 0.0 {
        return Err(CombError::InvalidEnsemble("input pulse has zero amplitude".into()));
    }
    let phase = Complex64::from_polar(1.0, input.carrier_phase());

    // Fixed chunking so the reduction tree does not depend on thread count.
    let chunks: Vec<Vec<Complex64>> = ensemble
        .detunings_khz
        .par_chunks(CLASS_CHUNK)
        .zip(ensemble.weights.par_chunks(CLASS_CHUNK))
        .map(|(dets, ws)| {
            let mut acc = vec![Complex64::new(0.0, 0.0); n_steps];
            for (&d, &w) in dets.iter().zip(ws) {
                let rot = Complex64::from_polar(1.0, -2.0 * PI * d * 1e-3 * h);
                let weight = w * 1e-3;
                let mut p = Complex64::new(0.0, 0.0);
                for n in 0..n_steps {
                    if n > 0 {
                        p = rot * (p + 0.5 * h * drive[n - 1]) + 0.5 * h * drive[n];
                    }
                    acc[n] += p * weight;
                }
            }
            acc
        })
        .collect();

    let scale = match opts.propagation {
        Propagation::LinearResponse => 1.0,
        Propagation::SaturatedAbsorption => {
            let d = ensemble.mean_optical_depth();
            if d > 0.0 {
                (1.0 - (-d).exp()) / d
            } else {
                1.0
            }
        }
    };
    let mut field = vec![Complex64::new(0.0, 0.0); n_steps];
    for chunk in &chunks {
        for (f, c) in field.iter_mut().zip(chunk) {
            *f += c;
        }
    }
    for f in field.iter_mut() {
        *f *= -scale * phase / peak;
    }
    let intensity: Vec<f64> = field.iter().map(|f| f.norm_sqr()).collect();
    let trace = EchoTrace {
        times_us: times,
        intensity,
    };
    let (echo_time_us, efficiency) = trace
        .peak_between(0.5 * echo_us, 1.5 * echo_us)
        .unwrap_or((echo_us, 0.0));
    Ok(EchoSimulation {
        trace,
        field,
        echo_time_us,
        efficiency,
    })
}
