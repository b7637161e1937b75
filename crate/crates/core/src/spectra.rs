//! Hyperfine level structure of a rare-earth nuclear spin in a static field.
//!
//! The effective Hamiltonian is `H = B·M·I + I·Q·I` on the `2I+1` manifold,
//! with `M` the (enhanced) Zeeman tensor in MHz/T and `Q` the traceless
//! quadrupole tensor in MHz. Levels are labelled `|1⟩..|2I+1⟩` in ascending
//! energy; every public index in this module is 1-based to match that.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{nelder_mead, SimplexOptions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectraError {
    #[error("spin quantum number {0} is not a positive half-integer")]
    InvalidSpin(f64),
    #[error("{which} tensor is not symmetric (max asymmetry {asymmetry:e})")]
    AsymmetricTensor { which: &'static str, asymmetry: f64 },
    #[error("quadrupole tensor has trace {0:e}, expected traceless")]
    QuadrupoleNotTraceless(f64),
    #[error("field direction has norm {0}, expected a unit vector")]
    NonUnitDirection(f64),
    #[error("field magnitude must be finite and non-negative, got {0}")]
    InvalidMagnitude(f64),
    #[error("assembled Hamiltonian is not Hermitian (deviation {0:e})")]
    NonHermitian(f64),
    #[error("eigensolver did not converge")]
    EigenNoConvergence,
    #[error("level index {index} out of range 1..={dimension}")]
    LevelOutOfRange { index: usize, dimension: usize },
    #[error("transition needs two distinct levels, got ({0}, {0})")]
    SameLevel(usize),
    #[error("frequency range [{0}, {1}] is empty")]
    EmptyRange(f64, f64),
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("search collapsed to |B| = {magnitude} T, below the {min} T floor")]
    Collapsed { magnitude: f64, min: f64 },
}

pub type Result<T> = std::result::Result<T, SpectraError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElectronicState {
    Ground,
    Excited,
}

impl fmt::Display for ElectronicState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ElectronicState::Ground => write!(f, "g"),
            ElectronicState::Excited => write!(f, "e"),
        }
    }
}

/// Effective nuclear-spin Hamiltonian for one electronic state.
#[derive(Debug, Clone, PartialEq)]
pub struct SpinSystem {
    spin: f64,
    zeeman: Matrix3<f64>,
    quadrupole: Matrix3<f64>,
    label: ElectronicState,
}

fn max_abs(m: &Matrix3<f64>) -> f64 {
    m.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

fn asymmetry(m: &Matrix3<f64>) -> f64 {
    max_abs(&(m - m.transpose()))
}

impl SpinSystem {
    pub fn new(
        spin: f64,
        zeeman: Matrix3<f64>,
        quadrupole: Matrix3<f64>,
        label: ElectronicState,
    ) -> Result<Self> {
        let twice = 2.0 * spin;
        if !(spin > 0.0 && (twice - twice.round()).abs() < 1e-12) {
            return Err(SpectraError::InvalidSpin(spin));
        }
        let za = asymmetry(&zeeman);
        if za > 1e-12 * max_abs(&zeeman).max(f64::MIN_POSITIVE) {
            return Err(SpectraError::AsymmetricTensor {
                which: "zeeman",
                asymmetry: za,
            });
        }
        let qa = asymmetry(&quadrupole);
        if qa > 1e-12 * max_abs(&quadrupole).max(f64::MIN_POSITIVE) {
            return Err(SpectraError::AsymmetricTensor {
                which: "quadrupole",
                asymmetry: qa,
            });
        }
        let trace = quadrupole.trace();
        if trace.abs() > 1e-9 * max_abs(&quadrupole) {
            return Err(SpectraError::QuadrupoleNotTraceless(trace));
        }
        Ok(Self {
            spin,
            zeeman,
            quadrupole,
            label,
        })
    }

    pub fn spin(&self) -> f64 {
        self.spin
    }

    pub fn zeeman(&self) -> &Matrix3<f64> {
        &self.zeeman
    }

    pub fn quadrupole(&self) -> &Matrix3<f64> {
        &self.quadrupole
    }

    pub fn label(&self) -> ElectronicState {
        self.label
    }

    pub fn dimension(&self) -> usize {
        (2.0 * self.spin).round() as usize + 1
    }

    /// `H = B·M·I + I·Q·I` in MHz for a field vector in tesla.
    pub fn hamiltonian(&self, field: &Vector3<f64>) -> DMatrix<Complex64> {
        let ops = SpinOperators::new(self.spin);
        let dim = self.dimension();
        let mut h = DMatrix::<Complex64>::zeros(dim, dim);
        // Effective field acting on the spin: (B·M)_b
        let coupling = self.zeeman.transpose() * field;
        for b in 0..3 {
            h += ops.component(b) * Complex64::new(coupling[b], 0.0);
        }
        for a in 0..3 {
            for b in 0..3 {
                let q = self.quadrupole[(a, b)];
                if q != 0.0 {
                    h += (ops.component(a) * ops.component(b)) * Complex64::new(q, 0.0);
                }
            }
        }
        h
    }

    /// `∂H/∂B_a = Σ_b M_ab I_b`.
    fn field_derivative(&self, axis: usize, ops: &SpinOperators) -> DMatrix<Complex64> {
        let mut d = DMatrix::<Complex64>::zeros(self.dimension(), self.dimension());
        for b in 0..3 {
            d += ops.component(b) * Complex64::new(self.zeeman[(axis, b)], 0.0);
        }
        d
    }
}

/// Angular-momentum matrices in the |I, m⟩ basis, m descending from I.
#[derive(Debug, Clone)]
pub struct SpinOperators {
    pub x: DMatrix<Complex64>,
    pub y: DMatrix<Complex64>,
    pub z: DMatrix<Complex64>,
}

impl SpinOperators {
    pub fn new(spin: f64) -> Self {
        let dim = (2.0 * spin).round() as usize + 1;
        let m = |k: usize| spin - k as f64;
        let mut raise = DMatrix::<Complex64>::zeros(dim, dim);
        for k in 1..dim {
            let mk = m(k);
            raise[(k - 1, k)] = Complex64::new((spin * (spin + 1.0) - mk * (mk + 1.0)).sqrt(), 0.0);
        }
        let lower = raise.adjoint();
        let x = (&raise + &lower) * Complex64::new(0.5, 0.0);
        let y = (&raise - &lower) * Complex64::new(0.0, -0.5);
        let z = DMatrix::from_fn(dim, dim, |r, c| {
            if r == c {
                Complex64::new(m(r), 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        });
        Self { x, y, z }
    }

    pub fn component(&self, axis: usize) -> &DMatrix<Complex64> {
        match axis {
            0 => &self.x,
            1 => &self.y,
            _ => &self.z,
        }
    }
}

/// Static field in the crystal `[D1, D2, b]` frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagneticField {
    magnitude: f64,
    direction: [f64; 3],
}

impl MagneticField {
    pub fn new(magnitude: f64, direction: [f64; 3]) -> Result<Self> {
        if !(magnitude.is_finite() && magnitude >= 0.0) {
            return Err(SpectraError::InvalidMagnitude(magnitude));
        }
        let norm = Vector3::from(direction).norm();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(SpectraError::NonUnitDirection(norm));
        }
        Ok(Self {
            magnitude,
            direction,
        })
    }

    /// Accepts any non-unit direction and normalizes it.
    pub fn along(magnitude: f64, direction: [f64; 3]) -> Result<Self> {
        let v = Vector3::from(direction);
        let norm = v.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(SpectraError::NonUnitDirection(norm));
        }
        let u = v / norm;
        Self::new(magnitude, [u[0], u[1], u[2]])
    }

    pub fn zero() -> Self {
        Self {
            magnitude: 0.0,
            direction: [0.0, 0.0, 1.0],
        }
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        let magnitude = v.norm();
        if magnitude == 0.0 {
            return Self::zero();
        }
        let u = v / magnitude;
        Self {
            magnitude,
            direction: [u[0], u[1], u[2]],
        }
    }

    /// Polar angle from +b, azimuth from +D1 towards +D2.
    pub fn from_spherical(magnitude: f64, polar: f64, azimuth: f64) -> Self {
        Self {
            magnitude,
            direction: [
                polar.sin() * azimuth.cos(),
                polar.sin() * azimuth.sin(),
                polar.cos(),
            ],
        }
    }

    pub fn spherical(&self) -> (f64, f64, f64) {
        let [x, y, z] = self.direction;
        (self.magnitude, z.clamp(-1.0, 1.0).acos(), y.atan2(x))
    }

    pub fn magnitude(&self) -> f64 {
        self.magnitude
    }

    pub fn direction(&self) -> [f64; 3] {
        self.direction
    }

    pub fn vector(&self) -> Vector3<f64> {
        Vector3::from(self.direction) * self.magnitude
    }
}

/// Eigen-decomposition of `H`, energies ascending.
#[derive(Debug, Clone)]
pub struct LevelStructure {
    pub energies: Vec<f64>,
    /// Column `k` is the eigenvector of level `|k+1⟩`.
    pub eigenvectors: DMatrix<Complex64>,
    pub state: ElectronicState,
}

impl LevelStructure {
    pub fn dimension(&self) -> usize {
        self.energies.len()
    }

    /// Energy of level `|k⟩` (1-based).
    pub fn energy(&self, level: usize) -> Result<f64> {
        check_level(level, self.dimension())?;
        Ok(self.energies[level - 1])
    }

    /// Gaps between neighbouring levels `|k⟩ ↔ |k+1⟩`, ascending in `k`.
    pub fn neighbour_gaps(&self) -> Vec<f64> {
        self.energies.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

fn check_level(level: usize, dimension: usize) -> Result<()> {
    if level == 0 || level > dimension {
        Err(SpectraError::LevelOutOfRange {
            index: level,
            dimension,
        })
    } else {
        Ok(())
    }
}

const HERMITIAN_TOLERANCE: f64 = 1e-9;

pub fn diagonalize(h: DMatrix<Complex64>, state: ElectronicState) -> Result<LevelStructure> {
    let scale = h.iter().fold(0.0f64, |acc, z| acc.max(z.norm())).max(1.0);
    let deviation = (&h - h.adjoint()).iter().fold(0.0f64, |acc, z| acc.max(z.norm()));
    if deviation > HERMITIAN_TOLERANCE * scale {
        return Err(SpectraError::NonHermitian(deviation));
    }
    let dim = h.nrows();
    let eig = SymmetricEigen::try_new(h, 1e-15, 10_000).ok_or(SpectraError::EigenNoConvergence)?;
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let energies = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let eigenvectors = DMatrix::from_fn(dim, dim, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(LevelStructure {
        energies,
        eigenvectors,
        state,
    })
}

pub fn level_structure(system: &SpinSystem, field: &MagneticField) -> Result<LevelStructure> {
    diagonalize(system.hamiltonian(&field.vector()), system.label())
}

fn level_energies_at(system: &SpinSystem, b: &Vector3<f64>) -> Result<Vec<f64>> {
    Ok(diagonalize(system.hamiltonian(b), system.label())?.energies)
}

/// Transition frequency `E_upper - E_lower` at field vector `b`, levels 1-based.
pub fn transition_frequency(
    system: &SpinSystem,
    b: &Vector3<f64>,
    pair: (usize, usize),
) -> Result<f64> {
    let e = level_energies_at(system, b)?;
    check_level(pair.0, e.len())?;
    check_level(pair.1, e.len())?;
    Ok((e[pair.1 - 1] - e[pair.0 - 1]).abs())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientOptions {
    /// Central-difference step in tesla.
    pub step: f64,
    pub richardson: bool,
}

impl Default for GradientOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            richardson: false,
        }
    }
}

/// Central finite-difference gradient of a scalar function of the field vector.
pub fn central_gradient<F>(f: &F, b: &Vector3<f64>, opts: &GradientOptions) -> Result<Vector3<f64>>
where
    F: Fn(&Vector3<f64>) -> Result<f64>,
{
    let diff = |h: f64| -> Result<Vector3<f64>> {
        let mut g = Vector3::zeros();
        for a in 0..3 {
            let mut e = Vector3::zeros();
            e[a] = h;
            g[a] = (f(&(b + e))? - f(&(b - e))?) / (2.0 * h);
        }
        Ok(g)
    };
    let coarse = diff(opts.step)?;
    if !opts.richardson {
        return Ok(coarse);
    }
    let fine = diff(0.5 * opts.step)?;
    Ok((fine * 4.0 - coarse) / 3.0)
}

/// One row of a [`TransitionTable`].
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub lower: usize,
    pub upper: usize,
    /// MHz, non-negative.
    pub frequency: f64,
    /// First-order Zeeman coefficient `∇_B f`, MHz/T.
    pub s1: Vector3<f64>,
    pub degenerate: bool,
}

#[derive(Debug, Clone)]
pub struct TransitionTable {
    pub state: ElectronicState,
    pub transitions: Vec<Transition>,
}

impl TransitionTable {
    /// Looks up a transition in either order; `f(i, j) = f(j, i)`.
    pub fn get(&self, i: usize, j: usize) -> Option<&Transition> {
        let (lo, hi) = if i < j { (i, j) } else { (j, i) };
        self.transitions
            .iter()
            .find(|t| t.lower == lo && t.upper == hi)
    }

    pub fn frequency(&self, i: usize, j: usize) -> Option<f64> {
        if i == j {
            return Some(0.0);
        }
        self.get(i, j).map(|t| t.frequency)
    }
}

pub fn transition_frequencies(
    levels: &LevelStructure,
    system: &SpinSystem,
    field: &MagneticField,
    opts: &GradientOptions,
) -> Result<TransitionTable> {
    let dim = levels.dimension();
    let b = field.vector();
    let scale = levels
        .energies
        .iter()
        .fold(1.0f64, |acc, e| acc.max(e.abs()));
    let degenerate_below = 1e-9 * scale;

    // Gradients of all energies at once: 6 diagonalizations for any number of pairs.
    let shifted = |a: usize, h: f64| -> Result<Vec<f64>> {
        let mut e = Vector3::zeros();
        e[a] = h;
        level_energies_at(system, &(b + e))
    };
    let energy_gradient = |h: f64| -> Result<Vec<Vector3<f64>>> {
        let mut grads = vec![Vector3::zeros(); dim];
        for a in 0..3 {
            let plus = shifted(a, h)?;
            let minus = shifted(a, -h)?;
            for k in 0..dim {
                grads[k][a] = (plus[k] - minus[k]) / (2.0 * h);
            }
        }
        Ok(grads)
    };
    let mut grads = energy_gradient(opts.step)?;
    if opts.richardson {
        let fine = energy_gradient(0.5 * opts.step)?;
        for (g, f) in grads.iter_mut().zip(fine) {
            *g = (f * 4.0 - *g) / 3.0;
        }
    }

    let mut transitions = Vec::with_capacity(dim * (dim - 1) / 2);
    for i in 0..dim {
        for j in (i + 1)..dim {
            let frequency = levels.energies[j] - levels.energies[i];
            transitions.push(Transition {
                lower: i + 1,
                upper: j + 1,
                frequency,
                s1: grads[j] - grads[i],
                degenerate: frequency < degenerate_below,
            });
        }
    }
    Ok(TransitionTable {
        state: levels.state,
        transitions,
    })
}

/// Energy gradients from the Hellmann-Feynman theorem, `∂E_n/∂B_a = ⟨n|∂H/∂B_a|n⟩`.
/// Valid for non-degenerate levels only.
pub fn hellmann_feynman_gradients(
    levels: &LevelStructure,
    system: &SpinSystem,
) -> Vec<Vector3<f64>> {
    let ops = SpinOperators::new(system.spin());
    let derivs: Vec<_> = (0..3).map(|a| system.field_derivative(a, &ops)).collect();
    (0..levels.dimension())
        .map(|n| {
            let v = levels.eigenvectors.column(n);
            let mut g = Vector3::zeros();
            for a in 0..3 {
                g[a] = (v.adjoint() * &derivs[a] * v)[(0, 0)].re;
            }
            g
        })
        .collect()
}

/// Levels along a field path, with labels carried by eigenvector overlap so
/// that crossings keep their identity. The first point is ordered by energy.
pub fn sweep_levels(system: &SpinSystem, path: &[MagneticField]) -> Result<Vec<LevelStructure>> {
    let mut out: Vec<LevelStructure> = Vec::with_capacity(path.len());
    for field in path {
        let mut current = level_structure(system, field)?;
        if let Some(prev) = out.last() {
            let dim = current.dimension();
            let mut taken = vec![false; dim];
            let mut order = vec![0; dim];
            for k in 0..dim {
                let prev_vec = prev.eigenvectors.column(k);
                let (best, _) = (0..dim)
                    .filter(|&c| !taken[c])
                    .map(|c| {
                        let overlap = (prev_vec.adjoint() * current.eigenvectors.column(c))[(0, 0)].norm();
                        (c, overlap)
                    })
                    .fold((usize::MAX, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
                taken[best] = true;
                order[k] = best;
            }
            let energies = order.iter().map(|&c| current.energies[c]).collect();
            let eigenvectors = DMatrix::from_fn(dim, dim, |r, c| current.eigenvectors[(r, order[c])]);
            current = LevelStructure {
                energies,
                eigenvectors,
                state: current.state,
            };
        }
        out.push(current);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct ZefozOptions {
    /// Target `‖S₁‖` in MHz/T.
    pub tolerance: f64,
    /// Floor on `|B|` in tesla; the search rejects fields below it.
    pub min_magnitude: f64,
    pub max_iterations: usize,
    pub gradient: GradientOptions,
    /// Step for the Hessian, taken as central differences of the gradient.
    pub hessian_step: f64,
}

impl Default for ZefozOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-3,
            min_magnitude: 0.05,
            max_iterations: 4000,
            gradient: GradientOptions::default(),
            hessian_step: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ZefozResult {
    pub field: MagneticField,
    pub s1_norm: f64,
    /// Second-order Zeeman tensor `S₂`, MHz/T².
    pub s2: Matrix3<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Hessian by central differences of the finite-difference gradient.
pub fn finite_difference_hessian<F>(
    f: &F,
    b: &Vector3<f64>,
    gradient: &GradientOptions,
    step: f64,
) -> Result<Matrix3<f64>>
where
    F: Fn(&Vector3<f64>) -> Result<f64>,
{
    let mut h = Matrix3::zeros();
    for a in 0..3 {
        let mut e = Vector3::zeros();
        e[a] = step;
        let gp = central_gradient(f, &(b + e), gradient)?;
        let gm = central_gradient(f, &(b - e), gradient)?;
        h.set_column(a, &((gp - gm) / (2.0 * step)));
    }
    Ok((h + h.transpose()) * 0.5)
}

/// Minimizes `‖∇f(B)‖` for an arbitrary frequency function of the field.
///
/// A simplex descent over (magnitude, polar, azimuth) brings the field near
/// the stationary point; Newton steps on the finite-difference gradient then
/// polish it to the tolerance.
pub fn minimize_gradient_norm<F>(
    frequency: F,
    initial: &MagneticField,
    opts: &ZefozOptions,
) -> Result<ZefozResult>
where
    F: Fn(&Vector3<f64>) -> Result<f64>,
{
    let grad = |b: &Vector3<f64>| central_gradient(&frequency, b, &opts.gradient);
    let hessian =
        |b: &Vector3<f64>| finite_difference_hessian(&frequency, b, &opts.gradient, opts.hessian_step);

    let start = initial.vector();
    let start_norm = grad(&start)?.norm();
    if !opts.tolerance.is_finite() || start_norm < opts.tolerance {
        return Ok(ZefozResult {
            field: *initial,
            s1_norm: start_norm,
            s2: hessian(&start)?,
            converged: true,
            iterations: 0,
        });
    }

    let (mag0, polar0, azimuth0) = initial.spherical();
    let objective = |p: &[f64]| -> f64 {
        if p[0] < opts.min_magnitude {
            // Linear wall keeps the simplex away from the trivial B = 0 minimum.
            return 1e12 * (1.0 + opts.min_magnitude - p[0]);
        }
        let b = MagneticField::from_spherical(p[0], p[1], p[2]).vector();
        grad(&b).map(|g| g.norm()).unwrap_or(f64::INFINITY)
    };
    let step = [0.05 * mag0.max(opts.min_magnitude), 0.05, 0.05];
    let simplex = nelder_mead(
        objective,
        &[mag0, polar0, azimuth0],
        &step,
        &SimplexOptions {
            max_iterations: opts.max_iterations,
            f_tol: 0.01 * opts.tolerance,
            x_tol: 1e-10,
        },
    );
    let mut iterations = simplex.iterations;
    let mut best = MagneticField::from_spherical(simplex.x[0], simplex.x[1], simplex.x[2]).vector();
    let mut best_norm = grad(&best)?.norm();

    // Newton polish on the gradient.
    for _ in 0..50 {
        if best_norm < 1e-3 * opts.tolerance {
            break;
        }
        let g = grad(&best)?;
        let h = hessian(&best)?;
        let Some(inv) = h.try_inverse() else { break };
        let mut trial = best - inv * g;
        let mut trial_norm = grad(&trial)?.norm();
        let mut damping = 1.0;
        while !(trial_norm < best_norm) && damping > 1e-4 {
            damping *= 0.5;
            trial = best - inv * g * damping;
            trial_norm = grad(&trial)?.norm();
        }
        iterations += 1;
        if trial_norm < best_norm && trial.norm() >= opts.min_magnitude {
            best = trial;
            best_norm = trial_norm;
        } else {
            break;
        }
    }

    let field = MagneticField::from_vector(&best);
    if opts.min_magnitude > 0.0 && field.magnitude() < opts.min_magnitude {
        return Err(SpectraError::Collapsed {
            magnitude: field.magnitude(),
            min: opts.min_magnitude,
        });
    }
    Ok(ZefozResult {
        field,
        s1_norm: best_norm,
        s2: hessian(&best)?,
        converged: best_norm < opts.tolerance,
        iterations,
    })
}

/// Searches for a field where transition `pair` has zero first-order Zeeman shift.
pub fn find_zefoz(
    system: &SpinSystem,
    pair: (usize, usize),
    initial: &MagneticField,
    opts: &ZefozOptions,
) -> Result<ZefozResult> {
    if pair.0 == pair.1 {
        return Err(SpectraError::SameLevel(pair.0));
    }
    check_level(pair.0, system.dimension())?;
    check_level(pair.1, system.dimension())?;
    minimize_gradient_norm(|b| transition_frequency(system, b, pair), initial, opts)
}

/// Per-transition peak heights for [`rhd_scan`].
#[derive(Debug, Clone, PartialEq)]
pub enum RhdWeights {
    Uniform(f64),
    /// Keyed by (lower, upper), 1-based; missing transitions get zero.
    PerTransition(BTreeMap<(usize, usize), f64>),
}

impl RhdWeights {
    fn weight(&self, lower: usize, upper: usize) -> f64 {
        match self {
            RhdWeights::Uniform(w) => *w,
            RhdWeights::PerTransition(map) => map.get(&(lower, upper)).copied().unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RhdSpectrum {
    /// (RF frequency MHz, signal).
    pub points: Vec<(f64, f64)>,
    /// Transitions that fell inside the scan window, as (lower, upper, MHz).
    pub resonances: Vec<(usize, usize, f64)>,
    /// Set when no transition lies inside the window.
    pub empty_window: bool,
}

impl RhdSpectrum {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frequency_MHz,signal\n");
        for (f, s) in &self.points {
            out.push_str(&format!("{f},{s}\n"));
        }
        out
    }
}

/// Phenomenological Raman-heterodyne spectrum: Lorentzian lines of FWHM
/// `linewidth_khz` at each level-pair frequency inside `range_mhz`.
pub fn rhd_scan(
    levels: &LevelStructure,
    range_mhz: (f64, f64),
    step_mhz: f64,
    linewidth_khz: f64,
    weights: &RhdWeights,
) -> Result<RhdSpectrum> {
    let (lo, hi) = range_mhz;
    if !(hi > lo) {
        return Err(SpectraError::EmptyRange(lo, hi));
    }
    if !(step_mhz > 0.0) {
        return Err(SpectraError::NonPositive("step"));
    }
    if !(linewidth_khz > 0.0) {
        return Err(SpectraError::NonPositive("linewidth"));
    }
    let dim = levels.dimension();
    let mut resonances = Vec::new();
    for i in 0..dim {
        for j in (i + 1)..dim {
            let f = levels.energies[j] - levels.energies[i];
            if f >= lo && f <= hi {
                resonances.push((i + 1, j + 1, f));
            }
        }
    }
    let half_width = 0.5 * linewidth_khz * 1e-3;
    let n = ((hi - lo) / step_mhz).floor() as usize + 1;
    let points = (0..n)
        .map(|k| {
            let f = lo + k as f64 * step_mhz;
            let signal = resonances
                .iter()
                .map(|&(i, j, f0)| {
                    let x = (f - f0) / half_width;
                    weights.weight(i, j) / (1.0 + x * x)
                })
                .sum();
            (f, signal)
        })
        .collect();
    Ok(RhdSpectrum {
        empty_window: resonances.is_empty(),
        points,
        resonances,
    })
}
