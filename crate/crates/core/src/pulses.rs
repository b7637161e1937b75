//! Two-level drive dynamics in the rotating frame.
//!
//! Frequencies are in kHz and times in μs throughout. The Bloch vector
//! `r = (u, v, w)` obeys `dr/dt = W × r` with
//! `W = 2π·10⁻³·(Ω cos φ, Ω sin φ, δ + δ_sweep(t))`, so a resonant drive with
//! phase 0 rotates about +x and `w = −1` is the ground state.

use std::f64::consts::{LN_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Cauchy, Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{golden_max, integrate, QuadOptions, QuadratureError};

/// Angular frequency in rad/μs of a rate given in kHz.
pub(crate) const KHZ_TO_RAD_PER_US: f64 = 2.0 * PI * 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PulseError {
    #[error("invalid pulse: {0}")]
    InvalidPulse(String),
    #[error("invalid line: {0}")]
    InvalidLine(String),
    #[error("step {step_us} μs exceeds the limit {max_us} μs")]
    StepTooCoarse { step_us: f64, max_us: f64 },
    #[error("no extremum of the nutation signal within {horizon_us} μs")]
    NoExtremum { horizon_us: f64 },
    #[error("horizon {horizon_us} μs is shorter than three nutation periods ({needed_us} μs)")]
    HorizonTooShort { horizon_us: f64, needed_us: f64 },
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

pub type Result<T> = std::result::Result<T, PulseError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PulseFamily {
    Gaussian,
    Square,
    Chs,
}

/// Gaussian envelopes are truncated at ±3 FWHM about their center.
const GAUSSIAN_HALF_SPAN: f64 = 3.0;

/// A drive pulse on `[0, duration]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseShape {
    pub family: PulseFamily,
    /// FWHM of the amplitude envelope for gaussian pulses, full length otherwise.
    pub width_us: f64,
    pub peak_rabi_khz: f64,
    /// Full detuning sweep of a chs pulse, kHz.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chirp_khz: Option<f64>,
    /// Envelope value at the edges of a chs pulse.
    #[serde(default = "default_truncation")]
    pub truncation: f64,
    #[serde(default)]
    pub carrier_phase: f64,
}

fn default_truncation() -> f64 {
    0.01
}

impl PulseShape {
    pub fn gaussian(fwhm_us: f64, peak_rabi_khz: f64) -> Self {
        Self {
            family: PulseFamily::Gaussian,
            width_us: fwhm_us,
            peak_rabi_khz,
            chirp_khz: None,
            truncation: default_truncation(),
            carrier_phase: 0.0,
        }
    }

    pub fn square(duration_us: f64, peak_rabi_khz: f64) -> Self {
        Self {
            family: PulseFamily::Square,
            ..Self::gaussian(duration_us, peak_rabi_khz)
        }
    }

    pub fn chs(duration_us: f64, peak_rabi_khz: f64, chirp_khz: f64, truncation: f64) -> Self {
        Self {
            family: PulseFamily::Chs,
            width_us: duration_us,
            peak_rabi_khz,
            chirp_khz: Some(chirp_khz),
            truncation,
            carrier_phase: 0.0,
        }
    }

    pub fn with_phase(mut self, phase: f64) -> Self {
        self.carrier_phase = phase;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(PulseError::InvalidPulse(m.to_string()));
        if !(self.width_us > 0.0 && self.width_us.is_finite()) {
            return fail("width must be positive");
        }
        if !(self.peak_rabi_khz >= 0.0 && self.peak_rabi_khz.is_finite()) {
            return fail("peak rabi frequency must be non-negative");
        }
        if !self.carrier_phase.is_finite() {
            return fail("carrier phase must be finite");
        }
        if self.family == PulseFamily::Chs {
            match self.chirp_khz {
                Some(c) if c.is_finite() && c >= 0.0 => {}
                _ => return fail("chs pulse requires a non-negative chirp range"),
            }
            if !(self.truncation > 0.0 && self.truncation < 1.0) {
                return fail("chs truncation must lie in (0, 1)");
            }
        }
        Ok(())
    }

    pub fn duration_us(&self) -> f64 {
        match self.family {
            PulseFamily::Gaussian => 2.0 * GAUSSIAN_HALF_SPAN * self.width_us,
            _ => self.width_us,
        }
    }

    pub fn center_us(&self) -> f64 {
        0.5 * self.duration_us()
    }

    pub fn width_us(&self) -> f64 {
        self.width_us
    }

    pub fn carrier_phase(&self) -> f64 {
        self.carrier_phase
    }

    fn chs_beta(&self) -> f64 {
        (1.0 / self.truncation).acosh() / (0.5 * self.width_us)
    }

    /// Unit-peak envelope; zero outside `[0, duration]`.
    pub fn envelope(&self, t_us: f64) -> f64 {
        if !(0.0..=self.duration_us()).contains(&t_us) {
            return 0.0;
        }
        let x = t_us - self.center_us();
        match self.family {
            PulseFamily::Gaussian => {
                let u = x / self.width_us;
                (-4.0 * LN_2 * u * u).exp()
            }
            PulseFamily::Square => 1.0,
            PulseFamily::Chs => 1.0 / (self.chs_beta() * x).cosh(),
        }
    }

    pub fn rabi_khz(&self, t_us: f64) -> f64 {
        self.peak_rabi_khz * self.envelope(t_us)
    }

    /// Instantaneous detuning sweep; spans `±chirp/2` across a chs pulse.
    pub fn sweep_khz(&self, t_us: f64) -> f64 {
        match (self.family, self.chirp_khz) {
            (PulseFamily::Chs, Some(chirp)) => {
                let b = self.chs_beta();
                let x = (t_us - self.center_us()).clamp(-0.5 * self.width_us, 0.5 * self.width_us);
                0.5 * chirp * (b * x).tanh() / (0.5 * b * self.width_us).tanh()
            }
            _ => 0.0,
        }
    }

    /// Largest rate the integrator has to resolve, kHz.
    pub fn max_rate_khz(&self) -> f64 {
        let sweep = match self.family {
            PulseFamily::Chs => 0.5 * self.chirp_khz.unwrap_or(0.0),
            _ => 0.0,
        };
        self.peak_rabi_khz.max(sweep)
    }

    /// Pulse area `∫Ω dt` in radians.
    pub fn area(&self) -> f64 {
        let integral = match self.family {
            PulseFamily::Square => self.width_us,
            PulseFamily::Gaussian => {
                let s = (PI / (4.0 * LN_2)).sqrt() * self.width_us;
                s * erf(GAUSSIAN_HALF_SPAN * 2.0 * LN_2.sqrt())
            }
            PulseFamily::Chs => {
                let b = self.chs_beta();
                4.0 / b * ((0.25 * b * self.width_us).tanh()).atan()
            }
        };
        KHZ_TO_RAD_PER_US * self.peak_rabi_khz * integral
    }
}

fn erf(x: f64) -> f64 {
    let opts = QuadOptions::default();
    let (v, _) = integrate(&|t: f64| (-t * t).exp(), 0.0, x, &opts).unwrap_or((0.0, 0.0));
    2.0 / PI.sqrt() * v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlochState {
    pub u: f64,
    pub v: f64,
    pub w: f64,
}

impl BlochState {
    pub const GROUND: BlochState = BlochState {
        u: 0.0,
        v: 0.0,
        w: -1.0,
    };

    pub fn new(u: f64, v: f64, w: f64) -> Self {
        Self { u, v, w }
    }

    pub fn norm(&self) -> f64 {
        (self.u * self.u + self.v * self.v + self.w * self.w).sqrt()
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.u, self.v, self.w]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn distance(&self, other: &BlochState) -> f64 {
        let d = [self.u - other.u, self.v - other.v, self.w - other.w];
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    }

    /// Population transferred to the upper level, `(1 + w)/2`.
    pub fn excited_population(&self) -> f64 {
        0.5 * (1.0 + self.w)
    }
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Rotates `r` by the angle `|omega|` about `omega` (Rodrigues).
pub(crate) fn rotate(r: [f64; 3], omega: [f64; 3]) -> [f64; 3] {
    let angle = (omega[0] * omega[0] + omega[1] * omega[1] + omega[2] * omega[2]).sqrt();
    if angle == 0.0 {
        return r;
    }
    let k = [omega[0] / angle, omega[1] / angle, omega[2] / angle];
    let (s, c) = angle.sin_cos();
    let kxr = cross(k, r);
    let kr = k[0] * r[0] + k[1] * r[1] + k[2] * r[2];
    [
        r[0] * c + kxr[0] * s + k[0] * kr * (1.0 - c),
        r[1] * c + kxr[1] * s + k[1] * kr * (1.0 - c),
        r[2] * c + kxr[2] * s + k[2] * kr * (1.0 - c),
    ]
}

fn drive_vector(pulse: &PulseShape, detuning_khz: f64, t: f64) -> [f64; 3] {
    let rabi = KHZ_TO_RAD_PER_US * pulse.rabi_khz(t);
    let (s, c) = pulse.carrier_phase.sin_cos();
    [
        rabi * c,
        rabi * s,
        KHZ_TO_RAD_PER_US * (detuning_khz + pulse.sweep_khz(t)),
    ]
}

/// Largest admissible step, `1/(20·max(Ω, |δ|, chirp/2))` with rates in MHz.
pub fn max_step_us(pulse: &PulseShape, detuning_khz: f64) -> f64 {
    let rate_mhz = 1e-3 * pulse.max_rate_khz().max(detuning_khz.abs());
    if rate_mhz == 0.0 {
        f64::INFINITY
    } else {
        1.0 / (20.0 * rate_mhz)
    }
}

/// Evolves `state` through `pulse` with a fixed-step fourth-order Magnus
/// integrator. The step is shrunk so a whole number of steps spans the pulse.
pub fn bloch_evolve(
    state: BlochState,
    pulse: &PulseShape,
    detuning_khz: f64,
    step_us: f64,
) -> Result<BlochState> {
    pulse.validate()?;
    if !detuning_khz.is_finite() {
        return Err(PulseError::InvalidArgument("detuning must be finite".into()));
    }
    let max_us = max_step_us(pulse, detuning_khz);
    if !(step_us > 0.0) || step_us > max_us {
        return Err(PulseError::StepTooCoarse { step_us, max_us });
    }
    let duration = pulse.duration_us();
    let n = (duration / step_us).ceil().max(1.0) as usize;
    let h = duration / n as f64;
    let offset = (0.5 - 3f64.sqrt() / 6.0) * h;
    let c2 = 3f64.sqrt() / 12.0 * h * h;
    let mut r = state.as_array();
    for k in 0..n {
        let t0 = k as f64 * h;
        let w1 = drive_vector(pulse, detuning_khz, t0 + offset);
        let w2 = drive_vector(pulse, detuning_khz, t0 + h - offset);
        let comm = cross(w2, w1);
        let omega = [
            0.5 * h * (w1[0] + w2[0]) + c2 * comm[0],
            0.5 * h * (w1[1] + w2[1]) + c2 * comm[1],
            0.5 * h * (w1[2] + w2[2]) + c2 * comm[2],
        ];
        r = rotate(r, omega);
    }
    Ok(BlochState::from_array(r))
}

/// Rotation of `state` about the axis at angle `phase` in the equatorial
/// plane, by `angle`, with a static detuning tilting the axis.
pub fn rotate_state(
    state: BlochState,
    rabi_khz: f64,
    detuning_khz: f64,
    phase: f64,
    duration_us: f64,
) -> BlochState {
    let (s, c) = phase.sin_cos();
    let k = KHZ_TO_RAD_PER_US * duration_us;
    let omega = [k * rabi_khz * c, k * rabi_khz * s, k * detuning_khz];
    BlochState::from_array(rotate(state.as_array(), omega))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferProfile {
    pub detunings_khz: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub average: f64,
}

impl TransferProfile {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("detuning_kHz,transfer_probability\n");
        for (d, p) in self.detunings_khz.iter().zip(&self.probabilities) {
            out.push_str(&format!("{d},{p}\n"));
        }
        out
    }
}

/// Transfer probability `(1 + w)/2` from the ground state at each detuning,
/// and its grid average.
pub fn chs_transfer_efficiency(
    pulse: &PulseShape,
    detunings_khz: &[f64],
    step_us: f64,
) -> Result<TransferProfile> {
    if pulse.family != PulseFamily::Chs {
        return Err(PulseError::InvalidPulse("expected a chs pulse".into()));
    }
    if detunings_khz.is_empty() {
        return Err(PulseError::InvalidArgument("empty detuning grid".into()));
    }
    let probabilities = detunings_khz
        .par_iter()
        .map(|&d| bloch_evolve(BlochState::GROUND, pulse, d, step_us).map(|s| s.excited_population()))
        .collect::<Result<Vec<_>>>()?;
    let average = probabilities.iter().sum::<f64>() / probabilities.len() as f64;
    Ok(TransferProfile {
        detunings_khz: detunings_khz.to_vec(),
        probabilities,
        average,
    })
}

/// Uniform grid of `points` detunings across `[-half_width, half_width]`.
pub fn detuning_grid(half_width_khz: f64, points: usize) -> Vec<f64> {
    match points {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..points)
            .map(|k| -half_width_khz + 2.0 * half_width_khz * k as f64 / (points - 1) as f64)
            .collect(),
    }
}

/// Control-pulse preset: model transfer times a loss factor for absorption
/// outside the pulse's polarization axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlPreset {
    pub pulse: PulseShape,
    pub scaling_factor: f64,
    pub grid_half_width_khz: f64,
    pub grid_points: usize,
    pub step_us: f64,
}

impl ControlPreset {
    /// `η_control = scaling_factor · ⟨(1 + w)/2⟩` over the grid.
    pub fn efficiency(&self) -> Result<f64> {
        if !(self.scaling_factor > 0.0 && self.scaling_factor <= 1.0) {
            return Err(PulseError::InvalidArgument(
                "scaling factor must lie in (0, 1]".into(),
            ));
        }
        let grid = detuning_grid(self.grid_half_width_khz, self.grid_points);
        let profile = chs_transfer_efficiency(&self.pulse, &grid, self.step_us)?;
        Ok(self.scaling_factor * profile.average)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LineShape {
    Gaussian,
    Lorentzian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InhomogeneousLine {
    pub shape: LineShape,
    pub fwhm_khz: f64,
    /// Relative standard deviation of the drive amplitude across the ensemble.
    #[serde(default)]
    pub rabi_spread: f64,
}

impl InhomogeneousLine {
    pub fn new(shape: LineShape, fwhm_khz: f64, rabi_spread: f64) -> Result<Self> {
        let line = Self {
            shape,
            fwhm_khz,
            rabi_spread,
        };
        line.validate()?;
        Ok(line)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fwhm_khz > 0.0 && self.fwhm_khz.is_finite()) {
            return Err(PulseError::InvalidLine("fwhm must be positive".into()));
        }
        if !(self.rabi_spread >= 0.0 && self.rabi_spread.is_finite()) {
            return Err(PulseError::InvalidLine("rabi spread must be non-negative".into()));
        }
        Ok(())
    }

    pub fn density(&self, detuning_khz: f64) -> f64 {
        match self.shape {
            LineShape::Gaussian => {
                let s = self.gaussian_sigma();
                (-0.5 * (detuning_khz / s).powi(2)).exp() / (s * (2.0 * PI).sqrt())
            }
            LineShape::Lorentzian => {
                let g = 0.5 * self.fwhm_khz;
                g / (PI * (detuning_khz * detuning_khz + g * g))
            }
        }
    }

    fn gaussian_sigma(&self) -> f64 {
        self.fwhm_khz / (2.0 * (2.0 * LN_2).sqrt())
    }

    /// Draws a (detuning, relative Rabi amplitude) pair.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let detuning = match self.shape {
            LineShape::Gaussian => Normal::new(0.0, self.gaussian_sigma())
                .map(|d| d.sample(rng))
                .unwrap_or(0.0),
            LineShape::Lorentzian => Cauchy::new(0.0, 0.5 * self.fwhm_khz)
                .map(|d| d.sample(rng))
                .unwrap_or(0.0),
        };
        let scale = if self.rabi_spread > 0.0 {
            Normal::new(1.0, self.rabi_spread)
                .map(|d| d.sample(rng))
                .unwrap_or(1.0)
        } else {
            1.0
        };
        (detuning, scale)
    }

    /// `∫ f(δ) ρ(δ) dδ` over the full line.
    pub fn average<F: Fn(f64) -> f64>(&self, f: F) -> Result<f64> {
        let opts = QuadOptions {
            abs_tol: 1e-13,
            rel_tol: 1e-11,
            max_depth: 50,
        };
        match self.shape {
            LineShape::Gaussian => {
                let s = self.gaussian_sigma();
                let g = |x: f64| f(s * x) * (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
                let mut total = 0.0;
                for k in -10..10 {
                    total += integrate(&g, k as f64, k as f64 + 1.0, &opts)?.0;
                }
                Ok(total)
            }
            LineShape::Lorentzian => {
                let g = 0.5 * self.fwhm_khz;
                let h = |theta: f64| f(g * theta.tan()) / PI;
                let edge = 0.5 * PI;
                let mut total = 0.0;
                let panels = 16;
                for k in 0..panels {
                    let a = -edge + PI * k as f64 / panels as f64;
                    let b = -edge + PI * (k + 1) as f64 / panels as f64;
                    total += integrate(&h, a, b, &opts)?.0;
                }
                Ok(total)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NutationTrace {
    pub times_us: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    pub t_pi_us: f64,
}

impl NutationTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time_us,u,v,w\n");
        for k in 0..self.times_us.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.times_us[k], self.u[k], self.v[k], self.w[k]
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NutationOptions {
    pub samples: usize,
    pub time_points: usize,
    pub seed: u64,
}

impl Default for NutationOptions {
    fn default() -> Self {
        Self {
            samples: 2000,
            time_points: 2001,
            seed: 0,
        }
    }
}

/// Ensemble-averaged nutation under a continuous square drive.
///
/// `t_π` is the first maximum of `⟨w⟩`, refined by golden-section search on
/// the exact ensemble average.
pub fn rabi_nutation(
    drive: &PulseShape,
    line: Option<&InhomogeneousLine>,
    horizon_us: f64,
    opts: &NutationOptions,
) -> Result<NutationTrace> {
    drive.validate()?;
    if drive.family != PulseFamily::Square {
        return Err(PulseError::InvalidPulse("nutation requires a square drive".into()));
    }
    if drive.peak_rabi_khz == 0.0 {
        return Err(PulseError::NoExtremum { horizon_us });
    }
    let needed_us = 3e3 / drive.peak_rabi_khz;
    if !(horizon_us >= needed_us) {
        return Err(PulseError::HorizonTooShort {
            horizon_us,
            needed_us,
        });
    }
    if opts.time_points < 3 {
        return Err(PulseError::InvalidArgument("need at least 3 time points".into()));
    }
    let members: Vec<(f64, f64)> = match line {
        None => vec![(0.0, 1.0)],
        Some(l) => {
            l.validate()?;
            if opts.samples == 0 {
                return Err(PulseError::InvalidArgument("need at least one sample".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            (0..opts.samples).map(|_| l.sample(&mut rng)).collect()
        }
    };
    let state_at = |t: f64| -> [f64; 3] {
        let mut acc = [0.0; 3];
        for &(d, scale) in &members {
            let s = rotate_state(
                BlochState::GROUND,
                drive.peak_rabi_khz * scale,
                d,
                drive.carrier_phase,
                t,
            );
            acc[0] += s.u;
            acc[1] += s.v;
            acc[2] += s.w;
        }
        let n = members.len() as f64;
        [acc[0] / n, acc[1] / n, acc[2] / n]
    };
    let times: Vec<f64> = (0..opts.time_points)
        .map(|k| horizon_us * k as f64 / (opts.time_points - 1) as f64)
        .collect();
    let states: Vec<[f64; 3]> = times.par_iter().map(|&t| state_at(t)).collect();
    let w: Vec<f64> = states.iter().map(|s| s[2]).collect();
    let first = (1..w.len() - 1).find(|&k| w[k] >= w[k - 1] && w[k] > w[k + 1]);
    let k = first.ok_or(PulseError::NoExtremum { horizon_us })?;
    let spacing = times[1] - times[0];
    let t_pi_us = golden_max(
        |t| state_at(t)[2],
        times[k - 1],
        times[k + 1],
        1e-9 * spacing.max(1.0),
    );
    Ok(NutationTrace {
        u: states.iter().map(|s| s[0]).collect(),
        v: states.iter().map(|s| s[1]).collect(),
        w,
        times_us: times,
        t_pi_us,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompoundingModel {
    /// `⟨p(δ)ⁿ⟩`: ions missed by any pulse are lost.
    CoherentSurvivor,
    /// `⟨½(1 + (2p(δ) − 1)ⁿ)⟩`: each imperfect pulse partially randomizes.
    PopulationRandomization,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Coverage {
    pub per_pulse: f64,
    pub compounded: f64,
}

/// Refocusing fidelity of a square π pulse at detuning `δ` (kHz).
pub fn pi_pulse_fidelity(detuning_khz: f64, t_pi_us: f64) -> f64 {
    let omega = PI / t_pi_us;
    let d = KHZ_TO_RAD_PER_US * detuning_khz;
    let g2 = omega * omega + d * d;
    omega * omega / g2 * (0.5 * g2.sqrt() * t_pi_us).sin().powi(2)
}

/// Line-averaged π-pulse fidelity and its compounding over `n_pulses`.
pub fn inhomogeneous_coverage(
    line: &InhomogeneousLine,
    t_pi_us: f64,
    n_pulses: u32,
    model: CompoundingModel,
) -> Result<Coverage> {
    line.validate()?;
    if !(t_pi_us > 0.0) || n_pulses == 0 {
        return Err(PulseError::InvalidArgument(
            "require t_pi > 0 and at least one pulse".into(),
        ));
    }
    let n = n_pulses as i32;
    let per_pulse = line.average(|d| pi_pulse_fidelity(d, t_pi_us))?;
    let compounded = match model {
        CompoundingModel::CoherentSurvivor => {
            line.average(|d| pi_pulse_fidelity(d, t_pi_us).powi(n))?
        }
        CompoundingModel::PopulationRandomization => line.average(|d| {
            0.5 * (1.0 + (2.0 * pi_pulse_fidelity(d, t_pi_us) - 1.0).powi(n))
        })?,
    };
    Ok(Coverage {
        per_pulse,
        compounded,
    })
}
