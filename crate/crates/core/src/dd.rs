//! Dynamical decoupling: pulse trains, filter functions, pure-dephasing
//! coherence under stationary Gaussian noise, a Monte Carlo check, and
//! lifetime fits.
//!
//! Times are in seconds and angular frequencies in rad/s. The noise
//! `δω(t)` is a frequency offset in rad/s with two-sided spectral density
//! `S(ω) = ∫ ⟨δω(0) δω(τ)⟩ e^{iωτ} dτ`, so that
//! `χ(T) = ⟨φ²⟩/2 = (1/2π) ∫₀^∞ S(ω) |F̃(ω)|² dω` and `W = e^{−χ}`.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Vector2};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{gk15, integrate, refine, CompensatedSum, QuadOptions, QuadratureError};
use crate::pulses::{rotate_state, BlochState, InhomogeneousLine};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DdError {
    #[error("kddx needs a multiple of 5 pulses, got {0}")]
    KddxPulseCount(usize),
    #[error("{0}")]
    InvalidSequence(String),
    #[error("invalid noise model: {0}")]
    InvalidNoise(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("coherence does not decay; lifetime unbounded")]
    NonDecaying,
    #[error("fit did not converge after {0} iterations")]
    FitNotConverged(usize),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

pub type Result<T> = std::result::Result<T, DdError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceFamily {
    Cpmg,
    Kddx,
    /// No pulses (`n = 0`) or a single refocusing pulse (`n = 1`).
    Free,
}

/// Phases of one Knill block relative to the x axis.
pub const KNILL_PHASES: [f64; 5] = [PI / 6.0, 0.0, PI / 2.0, 0.0, PI / 6.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DdPulse {
    pub time_s: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DDSequence {
    pub family: SequenceFamily,
    pub pulses: Vec<DdPulse>,
    pub interval_s: f64,
    pub total_s: f64,
}

/// Pulses at `τ/2 + kτ`, `T = nτ`. A free sequence with no pulses lasts `τ`.
pub fn generate_sequence(family: SequenceFamily, tau_s: f64, n_pulses: usize) -> Result<DDSequence> {
    if !(tau_s > 0.0 && tau_s.is_finite()) {
        return Err(DdError::InvalidArgument(format!("interval must be positive, got {tau_s}")));
    }
    match family {
        SequenceFamily::Cpmg if n_pulses == 0 => {
            return Err(DdError::InvalidArgument("cpmg needs at least one pulse".into()))
        }
        SequenceFamily::Kddx if n_pulses == 0 || n_pulses % 5 != 0 => {
            return Err(DdError::KddxPulseCount(n_pulses))
        }
        SequenceFamily::Free if n_pulses > 1 => {
            return Err(DdError::InvalidArgument(
                "free evolution takes zero or one pulse".into(),
            ))
        }
        _ => {}
    }
    let pulses = (0..n_pulses)
        .map(|k| DdPulse {
            time_s: tau_s * (k as f64 + 0.5),
            phase: match family {
                SequenceFamily::Kddx => KNILL_PHASES[k % 5],
                _ => 0.0,
            },
        })
        .collect();
    Ok(DDSequence {
        family,
        pulses,
        interval_s: tau_s,
        total_s: tau_s * n_pulses.max(1) as f64,
    })
}

impl DDSequence {
    pub fn validate(&self) -> Result<()> {
        let mut last = 0.0;
        for p in &self.pulses {
            if !(p.time_s > last && p.time_s < self.total_s) {
                return Err(DdError::InvalidSequence(
                    "pulse times must increase strictly inside (0, T)".into(),
                ));
            }
            last = p.time_s;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pulses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pulses.is_empty()
    }

    /// Whether the pulses sit exactly at `τ/2 + kτ` with `T = nτ`.
    pub fn is_uniform(&self) -> bool {
        let n = self.pulses.len();
        let tol = 1e-12 * self.total_s;
        (self.total_s - self.interval_s * n.max(1) as f64).abs() <= tol
            && self
                .pulses
                .iter()
                .enumerate()
                .all(|(k, p)| (p.time_s - self.interval_s * (k as f64 + 0.5)).abs() <= tol)
    }

    /// Segment boundaries `0, t₁, …, tₙ, T`.
    pub fn boundaries(&self) -> Vec<f64> {
        let mut b = Vec::with_capacity(self.pulses.len() + 2);
        b.push(0.0);
        b.extend(self.pulses.iter().map(|p| p.time_s));
        b.push(self.total_s);
        b
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("time_s,phase_rad\n");
        for p in &self.pulses {
            out.push_str(&format!("{},{}\n", p.time_s, p.phase));
        }
        out
    }
}

/// Switching-function transform with the pulse layout classified once.
#[derive(Debug, Clone, Copy)]
pub struct Filter<'a> {
    seq: &'a DDSequence,
    uniform: bool,
}

impl<'a> Filter<'a> {
    pub fn new(seq: &'a DDSequence) -> Self {
        Self {
            seq,
            uniform: seq.is_uniform() && !seq.is_empty(),
        }
    }

    /// `F̃(ω) = ∫₀^T s(t) e^{iωt} dt`.
    pub fn amplitude(&self, omega: f64) -> Complex64 {
        if omega == 0.0 {
            let b = self.seq.boundaries();
            let dc: f64 = b
                .windows(2)
                .enumerate()
                .map(|(j, w)| if j % 2 == 0 { w[1] - w[0] } else { w[0] - w[1] })
                .sum();
            return Complex64::new(dc, 0.0);
        }
        let numerator = if self.uniform {
            uniform_numerator(self.seq.pulses.len(), self.seq.interval_s, omega)
        } else {
            general_numerator(self.seq, omega)
        };
        numerator / Complex64::new(0.0, omega)
    }

    /// `|F̃(ω)|²`; tends to `T²` at `ω → 0` for free evolution.
    pub fn value(&self, omega: f64) -> f64 {
        self.amplitude(omega).norm_sqr()
    }
}

pub fn filter_amplitude(seq: &DDSequence, omega: f64) -> Complex64 {
    Filter::new(seq).amplitude(omega)
}

pub fn filter_function(seq: &DDSequence, omega: f64) -> f64 {
    Filter::new(seq).value(omega)
}

/// `iωF̃` as a sum over switching points.
fn general_numerator(seq: &DDSequence, omega: f64) -> Complex64 {
    let n = seq.pulses.len();
    let mut acc = Complex64::new(-1.0, 0.0);
    for (k, p) in seq.pulses.iter().enumerate() {
        let sign = if k % 2 == 0 { 2.0 } else { -2.0 };
        acc += sign * Complex64::from_polar(1.0, omega * p.time_s);
    }
    let end = if n % 2 == 0 { 1.0 } else { -1.0 };
    acc + end * Complex64::from_polar(1.0, omega * seq.total_s)
}

/// Closed form of `general_numerator` for pulses at `τ/2 + kτ`.
fn uniform_numerator(n: usize, tau: f64, omega: f64) -> Complex64 {
    // Σ_k (−e^{iωτ})^k = e^{i(n−1)θ/2} sin(nθ/2)/sin(θ/2) with θ = ωτ + π.
    let theta = (omega * tau + PI).rem_euclid(2.0 * PI);
    let theta = if theta > PI { theta - 2.0 * PI } else { theta };
    let nf = n as f64;
    let ratio = if theta.abs() < 1e-7 {
        nf * (1.0 - (nf * nf - 1.0) * theta * theta / 24.0)
    } else {
        (0.5 * nf * theta).sin() / (0.5 * theta).sin()
    };
    let geometric = Complex64::from_polar(ratio, 0.5 * (nf - 1.0) * theta);
    let end = if n % 2 == 0 { 1.0 } else { -1.0 };
    Complex64::new(-1.0, 0.0)
        + 2.0 * Complex64::from_polar(1.0, 0.5 * omega * tau) * geometric
        + end * Complex64::from_polar(1.0, omega * tau * nf)
}

pub fn filter_table(seq: &DDSequence, omegas: &[f64]) -> Result<Vec<f64>> {
    if omegas.iter().any(|w| !(*w > 0.0)) || omegas.windows(2).any(|w| w[1] < w[0]) {
        return Err(DdError::InvalidArgument(
            "frequency grid must be positive and sorted".into(),
        ));
    }
    let filter = Filter::new(seq);
    Ok(omegas.iter().map(|&w| filter.value(w)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpectrum {
    /// `S(ω) = S₀`, in rad²/s.
    White { psd: f64 },
    /// `S(ω) = 2σ²τ_c/(1 + ω²τ_c²)` with rms `σ` in rad/s.
    OrnsteinUhlenbeck { sigma: f64, correlation_time_s: f64 },
    /// Mixture of `components` OU processes with log-spaced correlation
    /// times and variances `∝ τ_m^{α−1}`, giving `S ∝ ω^{−α}` between
    /// `1/τ_max` and `1/τ_min`.
    PowerLaw {
        sigma: f64,
        exponent: f64,
        tau_min_s: f64,
        tau_max_s: f64,
        components: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    #[serde(flatten)]
    pub spectrum: NoiseSpectrum,
    #[serde(default)]
    pub seed: u64,
}

/// One OU component: variance and correlation time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuComponent {
    pub variance: f64,
    pub correlation_time_s: f64,
}

impl NoiseModel {
    pub fn new(spectrum: NoiseSpectrum, seed: u64) -> Self {
        Self { spectrum, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DdError::InvalidNoise(m.to_string()));
        match self.spectrum {
            NoiseSpectrum::White { psd } if !(psd >= 0.0 && psd.is_finite()) => {
                bad("psd must be non-negative")
            }
            NoiseSpectrum::OrnsteinUhlenbeck {
                sigma,
                correlation_time_s,
            } if !(sigma >= 0.0 && sigma.is_finite() && correlation_time_s > 0.0) => {
                bad("require sigma >= 0 and correlation time > 0")
            }
            NoiseSpectrum::PowerLaw {
                sigma,
                exponent,
                tau_min_s,
                tau_max_s,
                components,
            } if !(sigma >= 0.0
                && sigma.is_finite()
                && exponent > 0.0
                && exponent < 2.0
                && tau_min_s > 0.0
                && tau_max_s > tau_min_s
                && components >= 2) =>
            {
                bad("require sigma >= 0, 0 < exponent < 2, 0 < tau_min < tau_max, components >= 2")
            }
            _ => Ok(()),
        }
    }

    /// OU decomposition; empty for white noise.
    pub fn ou_components(&self) -> Vec<OuComponent> {
        match self.spectrum {
            NoiseSpectrum::White { .. } => vec![],
            NoiseSpectrum::OrnsteinUhlenbeck {
                sigma,
                correlation_time_s,
            } => vec![OuComponent {
                variance: sigma * sigma,
                correlation_time_s,
            }],
            NoiseSpectrum::PowerLaw {
                sigma,
                exponent,
                tau_min_s,
                tau_max_s,
                components,
            } => {
                let ratio = (tau_max_s / tau_min_s).ln();
                let taus: Vec<f64> = (0..components)
                    .map(|m| tau_min_s * (ratio * m as f64 / (components - 1) as f64).exp())
                    .collect();
                let raw: Vec<f64> = taus.iter().map(|t| t.powf(exponent - 1.0)).collect();
                let norm: f64 = raw.iter().sum();
                taus.iter()
                    .zip(&raw)
                    .map(|(&t, &r)| OuComponent {
                        variance: sigma * sigma * r / norm,
                        correlation_time_s: t,
                    })
                    .collect()
            }
        }
    }

    pub fn psd(&self, omega: f64) -> f64 {
        Psd::new(self).eval(omega)
    }

    pub fn is_silent(&self) -> bool {
        match self.spectrum {
            NoiseSpectrum::White { psd } => psd == 0.0,
            NoiseSpectrum::OrnsteinUhlenbeck { sigma, .. } | NoiseSpectrum::PowerLaw { sigma, .. } => {
                sigma == 0.0
            }
        }
    }

    /// Copy with the amplitude scaled so that `χ` scales by `factor`.
    pub fn scaled(&self, factor: f64) -> NoiseModel {
        let mut out = self.clone();
        match &mut out.spectrum {
            NoiseSpectrum::White { psd } => *psd *= factor,
            NoiseSpectrum::OrnsteinUhlenbeck { sigma, .. } | NoiseSpectrum::PowerLaw { sigma, .. } => {
                *sigma *= factor.sqrt()
            }
        }
        out
    }
}

/// Spectral density with the OU decomposition precomputed.
enum Psd {
    White(f64),
    Mixture(Vec<OuComponent>),
}

impl Psd {
    fn new(noise: &NoiseModel) -> Self {
        match noise.spectrum {
            NoiseSpectrum::White { psd } => Psd::White(psd),
            _ => Psd::Mixture(noise.ou_components()),
        }
    }

    fn eval(&self, omega: f64) -> f64 {
        match self {
            Psd::White(s) => *s,
            Psd::Mixture(components) => components
                .iter()
                .map(|c| {
                    let x = omega * c.correlation_time_s;
                    2.0 * c.variance * c.correlation_time_s / (1.0 + x * x)
                })
                .sum(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterQuadrature {
    /// Harmonic windows `[2πk/τ, 2π(k+1)/τ)` integrated explicitly; beyond
    /// them `|F̃|²` is replaced by its mean `(2 + 4n)/ω²`.
    pub windows: usize,
    pub rel_tol: f64,
}

impl Default for FilterQuadrature {
    fn default() -> Self {
        Self {
            windows: 8,
            rel_tol: 1e-9,
        }
    }
}

/// `χ(T) = (1/2π) ∫₀^∞ S(ω) |F̃(ω)|² dω`.
pub fn dephasing_exponent(seq: &DDSequence, noise: &NoiseModel, quad: &FilterQuadrature) -> Result<f64> {
    noise.validate()?;
    seq.validate()?;
    if noise.is_silent() {
        return Ok(0.0);
    }
    let n = seq.pulses.len();
    let tau = seq.interval_s;
    let window = 2.0 * PI / tau;
    let sub = n.max(1);
    let width = window / sub as f64;
    let filter = Filter::new(seq);
    let psd = Psd::new(noise);
    let integrand = |w: f64| psd.eval(w) * filter.value(w);
    let edges = |k: usize| (k as f64 * width, (k + 1) as f64 * width);
    let coarse: Vec<(f64, f64)> = (0..quad.windows * sub)
        .into_par_iter()
        .map(|k| {
            let (a, b) = edges(k);
            gk15(&integrand, a, b)
        })
        .collect::<std::result::Result<_, _>>()?;
    let scale: f64 = coarse.iter().map(|(v, _)| v.abs()).sum();
    let opts = QuadOptions {
        abs_tol: quad.rel_tol * scale / coarse.len() as f64,
        rel_tol: quad.rel_tol,
        max_depth: 40,
    };
    let panels: Vec<f64> = coarse
        .into_par_iter()
        .enumerate()
        .map(|(k, est)| {
            let (a, b) = edges(k);
            refine(&integrand, a, b, est, &opts).map(|(v, _)| v)
        })
        .collect::<std::result::Result<_, _>>()?;
    let mut total: CompensatedSum = panels.into_iter().collect();

    let cutoff = quad.windows as f64 * window;
    let tail_weight = 2.0 + 4.0 * n as f64;
    let (tail, _) = integrate(&|u: f64| psd.eval(cutoff / u.max(1e-300)), 0.0, 1.0, &opts)?;
    total.add(tail_weight * tail / cutoff);
    Ok(total.value() / (2.0 * PI))
}

pub fn coherence(seq: &DDSequence, noise: &NoiseModel, quad: &FilterQuadrature) -> Result<f64> {
    Ok((-dephasing_exponent(seq, noise, quad)?).exp())
}

/// Sequence of `family` with spacing `τ` lasting `duration`; a free family
/// yields a Hahn echo of that total length.
pub fn sequence_for_duration(family: SequenceFamily, tau_s: f64, duration_s: f64) -> Result<DDSequence> {
    if family == SequenceFamily::Free {
        return generate_sequence(family, duration_s, 1);
    }
    let n = (duration_s / tau_s).round();
    if n < 1.0 || (n * tau_s - duration_s).abs() > 1e-9 * duration_s {
        return Err(DdError::InvalidArgument(format!(
            "duration {duration_s} s is not a whole number of {tau_s} s intervals"
        )));
    }
    generate_sequence(family, tau_s, n as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayModel {
    Exponential,
    Stretched,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LifetimeFit {
    pub model: DecayModel,
    /// `T_{1/e}`, where the fitted curve crosses `1/e`.
    pub lifetime_s: f64,
    pub beta: f64,
    /// Covariance of `(T, β)`; the β entries are zero for exponential fits.
    pub covariance: [[f64; 2]; 2],
    pub rms_residual: f64,
}

impl LifetimeFit {
    pub fn lifetime_stderr(&self) -> f64 {
        self.covariance[0][0].max(0.0).sqrt()
    }

    pub fn evaluate(&self, t: f64) -> f64 {
        (-(t / self.lifetime_s).powf(self.beta)).exp()
    }
}

/// Least-squares fit of `exp(−(t/T)^β)`; β is held at 1 for the
/// exponential model. Durations are normalized by the largest one, so the
/// fit is equivariant under rescaling time.
pub fn fit_lifetime(durations_s: &[f64], coherence: &[f64], model: DecayModel) -> Result<LifetimeFit> {
    let m = durations_s.len();
    if m < 4 || coherence.len() != m {
        return Err(DdError::InvalidArgument("need at least 4 paired points".into()));
    }
    if coherence.iter().any(|c| !(*c > 0.0 && *c <= 1.0)) {
        return Err(DdError::InvalidArgument("coherence must lie in (0, 1]".into()));
    }
    if durations_s.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
        return Err(DdError::InvalidArgument("durations must be non-negative".into()));
    }
    let scale = durations_s.iter().cloned().fold(0.0, f64::max);
    if scale == 0.0 {
        return Err(DdError::NonDecaying);
    }
    let x: Vec<f64> = durations_s.iter().map(|t| t / scale).collect();
    let free_beta = model == DecayModel::Stretched;

    // Linearized start: ln(−ln y) = β ln x − β ln u.
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(coherence)
        .filter(|(x, y)| **x > 0.0 && **y < 1.0 - 1e-12)
        .map(|(x, y)| (x.ln(), (-y.ln()).ln()))
        .collect();
    if pts.len() < 2 {
        return Err(DdError::NonDecaying);
    }
    let np = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / np;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / np;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = if free_beta && sxx > 0.0 { sxy / sxx } else { 1.0 };
    let beta0 = if slope > 0.05 && slope < 20.0 { slope } else { 1.0 };
    let mut params = Vector2::new(mx - my / beta0, beta0.ln());

    let eval = |p: &Vector2<f64>| -> (Vec<f64>, Vec<[f64; 2]>) {
        let u = p[0].exp();
        let beta = p[1].exp();
        let mut res = Vec::with_capacity(m);
        let mut jac = Vec::with_capacity(m);
        for (&xi, &yi) in x.iter().zip(coherence) {
            if xi == 0.0 {
                res.push(yi - 1.0);
                jac.push([0.0, 0.0]);
                continue;
            }
            let r = xi / u;
            let z = r.powf(beta);
            let f = (-z).exp();
            res.push(yi - f);
            // Derivatives of the model with respect to (ln u, ln β).
            jac.push([f * z * beta, -f * z * r.ln() * beta]);
        }
        (res, jac)
    };
    let cost = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();

    let mut lambda = 1e-3;
    let (mut res, mut jac) = eval(&params);
    let mut current = cost(&res);
    let max_iter = 500;
    let mut converged = false;
    for _ in 0..max_iter {
        let mut jtj = Matrix2::zeros();
        let mut jtr = Vector2::zeros();
        for (r, j) in res.iter().zip(&jac) {
            let jv = Vector2::new(j[0], if free_beta { j[1] } else { 0.0 });
            jtj += jv * jv.transpose();
            jtr += jv * *r;
        }
        if !free_beta {
            jtj[(1, 1)] = 1.0;
        }
        let mut stepped = false;
        for _ in 0..60 {
            let mut damped = jtj;
            damped[(0, 0)] *= 1.0 + lambda;
            damped[(1, 1)] *= 1.0 + lambda;
            let Some(delta) = damped.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let trial = params + delta;
            let (tr, tj) = eval(&trial);
            let tc = cost(&tr);
            if tc.is_finite() && tc <= current {
                let small = (trial - params).amax() < 1e-14 || (current - tc) <= 1e-30 + 1e-15 * current;
                params = trial;
                res = tr;
                jac = tj;
                current = tc;
                lambda = (lambda / 10.0).max(1e-12);
                stepped = true;
                if small {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !stepped || converged {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(DdError::FitNotConverged(max_iter));
    }
    let u = params[0].exp();
    let beta = params[1].exp();
    if !(u < 1e6) {
        return Err(DdError::NonDecaying);
    }
    let lifetime_s = u * scale;

    // Covariance in (T, β): ∂f/∂T = f z β / T.
    let dof = m as f64 - if free_beta { 2.0 } else { 1.0 };
    let s2 = if dof > 0.0 { current / dof } else { 0.0 };
    let mut jtj = Matrix2::zeros();
    for j in &jac {
        let jv = Vector2::new(j[0] / lifetime_s, if free_beta { j[1] / beta } else { 0.0 });
        jtj += jv * jv.transpose();
    }
    let covariance = if free_beta {
        jtj.try_inverse()
            .map(|inv| inv * s2)
            .map(|c| [[c[(0, 0)], c[(0, 1)]], [c[(1, 0)], c[(1, 1)]]])
            .unwrap_or([[f64::INFINITY, 0.0], [0.0, f64::INFINITY]])
    } else {
        let v = if jtj[(0, 0)] > 0.0 { s2 / jtj[(0, 0)] } else { f64::INFINITY };
        [[v, 0.0], [0.0, 0.0]]
    };
    Ok(LifetimeFit {
        model,
        lifetime_s,
        beta,
        covariance,
        rms_residual: (current / m as f64).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoherenceDecay {
    pub family: SequenceFamily,
    pub interval_s: f64,
    pub durations_s: Vec<f64>,
    pub coherence: Vec<f64>,
    pub stderr: Vec<f64>,
    pub fit: Option<LifetimeFit>,
}

impl CoherenceDecay {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("duration_s,coherence,stderr\n");
        for k in 0..self.durations_s.len() {
            out.push_str(&format!(
                "{},{},{}\n",
                self.durations_s[k], self.coherence[k], self.stderr[k]
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayOptions {
    pub quadrature: FilterQuadrature,
    pub model: DecayModel,
    /// Only durations at or beyond this enter the lifetime fit.
    pub fit_from_s: f64,
}

impl Default for DecayOptions {
    fn default() -> Self {
        Self {
            quadrature: FilterQuadrature::default(),
            model: DecayModel::Exponential,
            fit_from_s: 0.0,
        }
    }
}

/// `W(T)` on a duration grid, with a lifetime fit when the data decay.
pub fn coherence_decay(
    family: SequenceFamily,
    tau_s: f64,
    noise: &NoiseModel,
    durations_s: &[f64],
    opts: &DecayOptions,
) -> Result<CoherenceDecay> {
    if durations_s.is_empty()
        || durations_s.iter().any(|d| !(*d > 0.0))
        || durations_s.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(DdError::InvalidArgument(
            "durations must be positive and strictly ascending".into(),
        ));
    }
    let coherence = durations_s
        .iter()
        .map(|&d| {
            let seq = sequence_for_duration(family, tau_s, d)?;
            coherence(&seq, noise, &opts.quadrature)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (fx, fy): (Vec<f64>, Vec<f64>) = durations_s
        .iter()
        .zip(&coherence)
        .filter(|(d, c)| **d >= opts.fit_from_s && **c > 0.0)
        .map(|(d, c)| (*d, *c))
        .unzip();
    let fit = fit_lifetime(&fx, &fy, opts.model).ok();
    Ok(CoherenceDecay {
        family,
        interval_s: tau_s,
        durations_s: durations_s.to_vec(),
        stderr: vec![0.0; coherence.len()],
        coherence,
        fit,
    })
}

/// Solves for the amplitude that puts `W = 1/e` at `target_lifetime_s`.
/// `χ` is quadratic in the amplitude, so one evaluation suffices.
pub fn calibrate_amplitude(
    family: SequenceFamily,
    tau_s: f64,
    noise: &NoiseModel,
    target_lifetime_s: f64,
    quad: &FilterQuadrature,
) -> Result<NoiseModel> {
    if noise.is_silent() {
        return Err(DdError::InvalidNoise("cannot calibrate a silent model".into()));
    }
    let seq = sequence_for_duration(family, tau_s, target_lifetime_s)?;
    let chi = dephasing_exponent(&seq, noise, quad)?;
    Ok(noise.scaled(1.0 / chi))
}

/// Static per-member pulse imperfections drawn from a line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseErrorModel {
    pub line: InhomogeneousLine,
    pub t_pi_us: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloOptions {
    pub trajectories: usize,
    pub pulse_errors: Option<PulseErrorModel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonteCarloEstimate {
    pub coherence: f64,
    pub stderr: f64,
    pub trajectories: usize,
}

/// Exact one-step update of an OU component over `h`: mean maps and the
/// Cholesky factor of the conditional covariance of `(X(t+h), ∫X)`.
#[derive(Debug, Clone, Copy)]
struct OuStep {
    decay: f64,
    integral_gain: f64,
    l11: f64,
    l21: f64,
    l22: f64,
}

impl OuStep {
    fn new(c: &OuComponent, h: f64) -> Self {
        let tc = c.correlation_time_s;
        let s2 = c.variance;
        let x = h / tc;
        let e1 = (-x).exp();
        let om = -(-x).exp_m1();
        let var_x = s2 * -(-2.0 * x).exp_m1();
        let var_i = s2 * tc * tc * ou_integral_shape(x);
        let cov = s2 * tc * om * om;
        let l11 = var_x.sqrt();
        let l21 = if l11 > 0.0 { cov / l11 } else { 0.0 };
        let l22 = (var_i - l21 * l21).max(0.0).sqrt();
        Self {
            decay: e1,
            integral_gain: tc * om,
            l11,
            l21,
            l22,
        }
    }
}

/// `2x − 3 + 4e^{−x} − e^{−2x}`, accurate for small `x`.
fn ou_integral_shape(x: f64) -> f64 {
    if x < 0.05 {
        let coeffs = [
            2.0 / 3.0,
            -0.5,
            7.0 / 30.0,
            -1.0 / 12.0,
            31.0 / 1260.0,
            -1.0 / 160.0,
            127.0 / 90720.0,
        ];
        let mut acc = 0.0;
        for c in coeffs.iter().rev() {
            acc = acc * x + c;
        }
        acc * x * x * x
    } else {
        2.0 * x + 4.0 * (-x).exp_m1() - (-2.0 * x).exp_m1()
    }
}

fn trajectory_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Phase picked up in each segment between switching points.
fn segment_phases(
    lengths: &[f64],
    noise: &NoiseModel,
    steps: &[Vec<OuStep>],
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut phases = vec![0.0; lengths.len()];
    match noise.spectrum {
        NoiseSpectrum::White { psd } => {
            for (p, &h) in phases.iter_mut().zip(lengths) {
                let z: f64 = StandardNormal.sample(rng);
                *p = (psd * h).sqrt() * z;
            }
        }
        _ => {
            for (c, comp_steps) in noise.ou_components().iter().zip(steps) {
                let z: f64 = StandardNormal.sample(rng);
                let mut state = c.variance.sqrt() * z;
                for (p, step) in phases.iter_mut().zip(comp_steps) {
                    let z1: f64 = StandardNormal.sample(rng);
                    let z2: f64 = StandardNormal.sample(rng);
                    let next = step.decay * state + step.l11 * z1;
                    *p += step.integral_gain * state + step.l21 * z1 + step.l22 * z2;
                    state = next;
                }
            }
        }
    }
    phases
}

/// Seeded Monte Carlo of `|⟨e^{iφ}⟩|` for the toggled noise phase. With a
/// pulse-error model each trajectory also carries a static detuning and
/// drive scale, and pulses act as full rotations on a state starting along x.
pub fn monte_carlo_dephasing(
    seq: &DDSequence,
    noise: &NoiseModel,
    opts: &MonteCarloOptions,
) -> Result<MonteCarloEstimate> {
    noise.validate()?;
    seq.validate()?;
    if opts.trajectories < 100 {
        return Err(DdError::InvalidArgument("need at least 100 trajectories".into()));
    }
    if let Some(pe) = &opts.pulse_errors {
        pe.line
            .validate()
            .map_err(|e| DdError::InvalidArgument(e.to_string()))?;
        if !(pe.t_pi_us > 0.0) {
            return Err(DdError::InvalidArgument("t_pi must be positive".into()));
        }
    }
    let b = seq.boundaries();
    let lengths: Vec<f64> = b.windows(2).map(|w| w[1] - w[0]).collect();
    let components = noise.ou_components();
    let steps: Vec<Vec<OuStep>> = components
        .iter()
        .map(|c| {
            let mut cache: Vec<(f64, OuStep)> = Vec::new();
            lengths
                .iter()
                .map(|&h| {
                    if let Some((_, s)) = cache.iter().find(|(l, _)| *l == h) {
                        *s
                    } else {
                        let s = OuStep::new(c, h);
                        cache.push((h, s));
                        s
                    }
                })
                .collect()
        })
        .collect();

    let samples: Vec<Complex64> = (0..opts.trajectories)
        .into_par_iter()
        .map(|i| {
            let mut rng = trajectory_rng(noise.seed, i);
            match &opts.pulse_errors {
                None => {
                    let phases = segment_phases(&lengths, noise, &steps, &mut rng);
                    let phi: f64 = phases
                        .iter()
                        .enumerate()
                        .map(|(j, p)| if j % 2 == 0 { *p } else { -*p })
                        .sum();
                    Complex64::from_polar(1.0, phi)
                }
                Some(pe) => {
                    let (detuning_khz, scale) = pe.line.sample(&mut rng);
                    let phases = segment_phases(&lengths, noise, &steps, &mut rng);
                    let rabi_khz = scale * 1e3 / (2.0 * pe.t_pi_us);
                    let static_rate = 2.0 * PI * 1e3 * detuning_khz;
                    let mut state = BlochState::new(1.0, 0.0, 0.0);
                    for (j, (&h, &p)) in lengths.iter().zip(&phases).enumerate() {
                        let angle = p + static_rate * h;
                        let (s, c) = angle.sin_cos();
                        state = BlochState::new(
                            c * state.u - s * state.v,
                            s * state.u + c * state.v,
                            state.w,
                        );
                        if let Some(pulse) = seq.pulses.get(j) {
                            state =
                                rotate_state(state, rabi_khz, detuning_khz, pulse.phase, pe.t_pi_us);
                        }
                    }
                    Complex64::new(state.u, state.v)
                }
            }
        })
        .collect();

    let n = samples.len() as f64;
    let mean = samples.iter().fold(Complex64::new(0.0, 0.0), |a, z| a + z) / n;
    let magnitude = mean.norm();
    let axis = if magnitude > 0.0 {
        mean / magnitude
    } else {
        Complex64::new(1.0, 0.0)
    };
    let projected: Vec<f64> = samples.iter().map(|z| (z * axis.conj()).re).collect();
    let pm = projected.iter().sum::<f64>() / n;
    let var = projected.iter().map(|p| (p - pm).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(MonteCarloEstimate {
        coherence: magnitude,
        stderr: (var / n).sqrt(),
        trajectories: opts.trajectories,
    })
}
