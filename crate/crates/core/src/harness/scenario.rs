use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::{lookup, read_text, Config};
use super::{HarnessError, Result};
use crate::dd::{
    coherence_decay, fit_lifetime, monte_carlo_dephasing, DecayModel, DecayOptions,
    FilterQuadrature, MonteCarloOptions, SequenceFamily,
};
use crate::experiment::{
    prepare_lambda, run_storage, timebin_interference, transport_vs_fiber, DecouplingSpec,
    FiberChannel, LifetimeConvention, StoragePipeline,
};
use crate::spectra::{find_zefoz, level_structure, rhd_scan, MagneticField, RhdWeights, ZefozOptions};

const SCENARIOS: [(&str, &str); 6] = [
    ("cpmg_lifetime_sweep", include_str!("../../../../config/scenarios/cpmg_lifetime_sweep.toml")),
    ("cpmg_decay_trace", include_str!("../../../../config/scenarios/cpmg_decay_trace.toml")),
    ("timebin_fringes", include_str!("../../../../config/scenarios/timebin_fringes.toml")),
    ("excited_hyperfine_gaps", include_str!("../../../../config/scenarios/excited_hyperfine_gaps.toml")),
    ("efficiency_budget", include_str!("../../../../config/scenarios/efficiency_budget.toml")),
    ("transport", include_str!("../../../../config/scenarios/transport.toml")),
];

/// Convention every output states: stored lifetimes refer to the field
/// amplitude, intensities decay twice as fast.
const LIFETIME_CONVENTION: LifetimeConvention = LifetimeConvention::Amplitude;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Fitted lifetime versus pulse interval.
    LifetimeSweep,
    /// Stored-echo efficiency versus storage time through the full pipeline.
    DecayTrace,
    /// Middle-echo fringes versus input phase difference.
    TimebinFringes,
    /// Hyperfine levels, gaps, clock-transition search and RHD spectrum.
    HyperfineGaps,
    /// Per-factor efficiency ledger for each decoupling family.
    EfficiencyBudget,
    /// Transported memory against direct fiber transmission.
    Transport,
}

/// A sweep axis: explicit values or `points` evenly spaced values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Axis {
    Values(Vec<f64>),
    Range { start: f64, stop: f64, points: usize },
}

impl Axis {
    pub fn values(&self) -> Vec<f64> {
        match self {
            Axis::Values(v) => v.clone(),
            Axis::Range { start, stop, points } => match points {
                0 => vec![],
                1 => vec![*start],
                n => (0..*n)
                    .map(|k| start + (stop - start) * k as f64 / (*n - 1) as f64)
                    .collect(),
            },
        }
    }

    fn check(&self, name: &str) -> std::result::Result<(), String> {
        let v = self.values();
        if v.is_empty() {
            return Err(format!("sweep axis {name} is empty"));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(format!("sweep axis {name} has non-finite values"));
        }
        if let Axis::Range { start, stop, .. } = self {
            if stop < start {
                return Err(format!("sweep axis {name} runs backwards"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_s: Option<Axis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub storage_time_s: Option<Axis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_phi: Option<Axis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_km: Option<Axis>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioPresets {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pipeline: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tensors: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pumps: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interference: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transport: Option<String>,
}

fn default_families() -> Vec<SequenceFamily> {
    vec![SequenceFamily::Cpmg]
}

fn default_fit_model() -> DecayModel {
    DecayModel::Exponential
}

fn default_rhd_range() -> [f64; 2] {
    [124.3, 124.7]
}

fn default_rhd_step() -> f64 {
    1e-3
}

fn default_rhd_linewidth() -> f64 {
    20.0
}

fn default_zefoz_offset() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioOptions {
    #[serde(default = "default_families")]
    pub families: Vec<SequenceFamily>,
    /// Monte Carlo trajectories per point; zero disables the estimate.
    #[serde(default)]
    pub trajectories: usize,
    #[serde(default)]
    pub fit_from_s: f64,
    #[serde(default = "default_fit_model")]
    pub fit_model: DecayModel,
    #[serde(default = "default_rhd_range")]
    pub rhd_range_mhz: [f64; 2],
    #[serde(default = "default_rhd_step")]
    pub rhd_step_mhz: f64,
    #[serde(default = "default_rhd_linewidth")]
    pub rhd_linewidth_khz: f64,
    /// Relative field offset the clock-transition search starts from.
    #[serde(default = "default_zefoz_offset")]
    pub zefoz_offset: f64,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub id: String,
    pub kind: ScenarioKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub presets: ScenarioPresets,
    #[serde(default)]
    pub sweep: Sweep,
    #[serde(default)]
    pub options: ScenarioOptions,
}

impl Scenario {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| HarnessError::Schema {
            origin: origin.to_string(),
            message: e.to_string(),
        })?;
        s.check()?;
        Ok(s)
    }

    fn invalid(&self, message: impl Into<String>) -> HarnessError {
        HarnessError::InvalidScenario {
            id: self.id.clone(),
            message: message.into(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(self.invalid("id must not be empty"));
        }
        for (name, axis) in [
            ("tau_s", &self.sweep.tau_s),
            ("storage_time_s", &self.sweep.storage_time_s),
            ("delta_phi", &self.sweep.delta_phi),
            ("length_km", &self.sweep.length_km),
        ] {
            if let Some(a) = axis {
                a.check(name).map_err(|m| self.invalid(m))?;
            }
        }
        if self.options.families.is_empty() {
            return Err(self.invalid("families must not be empty"));
        }
        Ok(())
    }

    /// Ensures every referenced preset exists.
    pub fn resolve(&self, config: &Config) -> Result<()> {
        let p = &self.presets;
        if let Some(n) = &p.pipeline {
            lookup(&config.pipelines, "pipeline", n)?;
        }
        if let Some(n) = &p.noise {
            lookup(&config.noise, "noise", n)?;
        }
        if let Some(n) = &p.tensors {
            lookup(&config.tensors, "tensors", n)?;
        }
        if let Some(n) = &p.pumps {
            lookup(&config.pumps, "pumps", n)?;
        }
        if let Some(n) = &p.interference {
            lookup(&config.interference, "interference", n)?;
        }
        if let Some(n) = &p.transport {
            lookup(&config.transport, "transport", n)?;
        }
        Ok(())
    }

    fn require<'a>(&self, value: &'a Option<String>, what: &str) -> Result<&'a str> {
        value
            .as_deref()
            .ok_or_else(|| self.invalid(format!("needs a {what} preset")))
    }

    fn axis_or(&self, axis: &Option<Axis>, default: Vec<f64>) -> Vec<f64> {
        axis.as_ref().map_or(default, Axis::values)
    }
}

/// Built-in scenario ids and their text.
pub fn builtin_scenarios() -> impl Iterator<Item = (&'static str, &'static str)> {
    SCENARIOS.into_iter()
}

/// Reads a scenario from a path, or by id from the configured root's
/// `scenarios/` directory, or from the built-in set.
pub fn load_scenario(reference: &str, config_root: Option<&Path>) -> Result<Scenario> {
    let path = Path::new(reference);
    if path.is_file() {
        return Scenario::parse(&read_text(path)?, &path.display().to_string());
    }
    if let Some(root) = Config::root(config_root) {
        let candidate = root.join("scenarios").join(format!("{reference}.toml"));
        if candidate.is_file() {
            return Scenario::parse(&read_text(&candidate)?, &candidate.display().to_string());
        }
    }
    SCENARIOS
        .iter()
        .find(|(id, _)| *id == reference)
        .map(|(id, text)| Scenario::parse(text, &format!("built-in scenario {id}")))
        .unwrap_or_else(|| Err(HarnessError::UnknownScenario(reference.to_string())))
}

/// Seed of job `index` of a run seeded with `seed` (splitmix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Replaces the scenario's seed.
    pub seed: Option<u64>,
    /// Worker threads; zero means one per core.
    pub jobs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOutput {
    pub id: String,
    /// File name to contents; always contains `summary.json`.
    pub files: BTreeMap<String, String>,
}

fn float_cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

fn family_name(f: SequenceFamily) -> &'static str {
    match f {
        SequenceFamily::Cpmg => "cpmg",
        SequenceFamily::Kddx => "kddx",
        SequenceFamily::Free => "free",
    }
}

/// Durations snapped to whole sequence periods of `family` at `tau_s`.
fn snap_durations(family: SequenceFamily, tau_s: f64, durations: &[f64]) -> Vec<f64> {
    let unit = match family {
        SequenceFamily::Kddx => 5.0 * tau_s,
        SequenceFamily::Cpmg => tau_s,
        SequenceFamily::Free => return durations.to_vec(),
    };
    durations
        .iter()
        .map(|d| (d / unit).round().max(1.0) * unit)
        .collect()
}

fn with_family(pipeline: &StoragePipeline, family: SequenceFamily, tau_s: Option<f64>) -> StoragePipeline {
    let mut p = pipeline.clone();
    let tau_s = tau_s.or(p.decoupling.map(|d| d.tau_s)).unwrap_or(0.1);
    p.decoupling = Some(DecouplingSpec { family, tau_s });
    p
}

fn par_map<T, R, F>(items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R> + Sync,
{
    items
        .par_iter()
        .enumerate()
        .map(|(k, item)| f(k, item))
        .collect()
}

/// Executes a scenario; files are returned, not written.
pub fn run_scenario(scenario: &Scenario, config: &Config, opts: &RunOptions) -> Result<ScenarioOutput> {
    scenario.check()?;
    scenario.resolve(config)?;
    let seed = opts.seed.unwrap_or(scenario.seed);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;
    let mut files = BTreeMap::new();
    let results = pool.install(|| match scenario.kind {
        ScenarioKind::LifetimeSweep => lifetime_sweep(scenario, config, seed, &mut files),
        ScenarioKind::DecayTrace => decay_trace(scenario, config, seed, &mut files),
        ScenarioKind::TimebinFringes => fringes(scenario, config, seed, &mut files),
        ScenarioKind::HyperfineGaps => hyperfine_gaps(scenario, config, &mut files),
        ScenarioKind::EfficiencyBudget => efficiency_budget(scenario, config, seed, &mut files),
        ScenarioKind::Transport => transport(scenario, config, &mut files),
    })?;
    let mut resolved = scenario.clone();
    resolved.seed = seed;
    let summary = json!({
        "scenario": resolved,
        "lifetime_convention": LIFETIME_CONVENTION,
        "config": config,
        "results": results,
    });
    files.insert(
        "summary.json".to_string(),
        serde_json::to_string_pretty(&summary)? + "\n",
    );
    Ok(ScenarioOutput {
        id: scenario.id.clone(),
        files,
    })
}

/// Writes each file through a temporary sibling that is renamed into place.
pub fn write_outputs(output: &ScenarioOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| HarnessError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let mut written = Vec::new();
    for (name, contents) in &output.files {
        let target = dir.join(name);
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io(dir))?;
        tmp.write_all(contents.as_bytes()).map_err(io(&target))?;
        tmp.as_file().sync_all().map_err(io(&target))?;
        tmp.persist(&target).map_err(|e| HarnessError::Io {
            path: target.clone(),
            source: e.error,
        })?;
        written.push(target);
    }
    Ok(written)
}

fn lifetime_sweep(
    s: &Scenario,
    config: &Config,
    seed: u64,
    files: &mut BTreeMap<String, String>,
) -> Result<Value> {
    let noise = config.noise_model(s.require(&s.presets.noise, "noise")?, seed)?;
    let taus = s.axis_or(&s.sweep.tau_s, vec![0.1]);
    let durations = s.axis_or(&s.sweep.storage_time_s, vec![300.0, 900.0, 1800.0, 2700.0, 3600.0]);
    let jobs: Vec<(SequenceFamily, f64)> = s
        .options
        .families
        .iter()
        .flat_map(|&f| taus.iter().map(move |&t| (f, t)))
        .collect();
    let opts = DecayOptions {
        quadrature: FilterQuadrature::default(),
        model: s.options.fit_model,
        fit_from_s: s.options.fit_from_s,
    };
    let decays = par_map(&jobs, |_, &(family, tau)| {
        let grid = snap_durations(family, tau, &durations);
        Ok(coherence_decay(family, tau, &noise, &grid, &opts)?)
    })?;
    let mut table = String::from("family,tau_s,lifetime_s,lifetime_stderr_s,beta,rms_residual\n");
    let mut traces = String::from("family,tau_s,duration_s,coherence\n");
    let mut rows = Vec::new();
    for d in &decays {
        let name = family_name(d.family);
        let fit = d.fit.as_ref();
        writeln!(
            table,
            "{name},{},{},{},{},{}",
            d.interval_s,
            float_cell(fit.map(|f| f.lifetime_s)),
            float_cell(fit.map(|f| f.lifetime_stderr())),
            float_cell(fit.map(|f| f.beta)),
            float_cell(fit.map(|f| f.rms_residual)),
        )
        .unwrap();
        for (t, c) in d.durations_s.iter().zip(&d.coherence) {
            writeln!(traces, "{name},{},{t},{c}", d.interval_s).unwrap();
        }
        rows.push(json!({ "family": d.family, "tau_s": d.interval_s, "fit": d.fit }));
    }
    files.insert("lifetime_vs_tau.csv".into(), table);
    files.insert("decays.csv".into(), traces);
    Ok(json!({ "lifetimes": rows }))
}

fn decay_trace(
    s: &Scenario,
    config: &Config,
    seed: u64,
    files: &mut BTreeMap<String, String>,
) -> Result<Value> {
    let pipeline = config.pipeline(s.require(&s.presets.pipeline, "pipeline")?, seed)?;
    let spec = pipeline
        .decoupling
        .ok_or_else(|| s.invalid("pipeline has no decoupling block"))?;
    let raw = s.axis_or(&s.sweep.storage_time_s, vec![300.0, 900.0, 1800.0, 2700.0, 3600.0]);
    let times = snap_durations(spec.family, spec.tau_s, &raw);
    let trajectories = s.options.trajectories;
    let runs = par_map(&times, |k, &t| {
        let r = run_storage(&pipeline, t)?;
        let mc = if trajectories > 0 {
            let seq = pipeline
                .sequence(t)?
                .ok_or_else(|| s.invalid("zero storage time has no sequence"))?;
            let mut noise = pipeline.noise.clone();
            noise.seed = derive_seed(seed, k as u64);
            Some(monte_carlo_dephasing(
                &seq,
                &noise,
                &MonteCarloOptions {
                    trajectories,
                    pulse_errors: None,
                },
            )?)
        } else {
            None
        };
        Ok((r, mc))
    })?;
    let mut csv = String::from(
        "storage_time_s,eta_total,spin_coherence,coverage,heating_factor,snr,mc_coherence,mc_stderr\n",
    );
    let mut amplitudes = Vec::new();
    for (r, mc) in &runs {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.storage_time_s,
            r.budget.eta_total,
            r.spin_coherence,
            r.coverage,
            r.heating_factor,
            r.snr,
            float_cell(mc.map(|m| m.coherence)),
            float_cell(mc.map(|m| m.stderr)),
        )
        .unwrap();
        let unprotected = r.budget.eta_afc * r.budget.eta_control.powi(2) * r.coverage.powi(2);
        amplitudes.push((r.budget.eta_total / unprotected).sqrt().min(1.0));
    }
    files.insert("storage_decay.csv".into(), csv);
    if let Some((first, _)) = runs.first() {
        files.insert("echo_trace.csv".into(), first.trace.to_csv());
    }
    let fit_points: Vec<(f64, f64)> = times
        .iter()
        .copied()
        .zip(amplitudes.iter().copied())
        .filter(|(t, _)| *t >= s.options.fit_from_s)
        .collect();
    let (ft, fa): (Vec<f64>, Vec<f64>) = fit_points.into_iter().unzip();
    let pipeline_fit = fit_lifetime(&ft, &fa, s.options.fit_model).ok();
    let reference = coherence_decay(
        spec.family,
        spec.tau_s,
        &pipeline.noise,
        &times,
        &DecayOptions {
            quadrature: pipeline.quadrature,
            model: s.options.fit_model,
            fit_from_s: s.options.fit_from_s,
        },
    )?;
    Ok(json!({
        "family": spec.family,
        "tau_s": spec.tau_s,
        "runs": runs.iter().map(|(r, mc)| json!({ "storage": r, "monte_carlo": mc })).collect::<Vec<_>>(),
        "pipeline_fit": pipeline_fit,
        "coherence_decay_fit": reference.fit,
    }))
}

fn fringes(
    s: &Scenario,
    config: &Config,
    seed: u64,
    files: &mut BTreeMap<String, String>,
) -> Result<Value> {
    let pipeline = config.pipeline(s.require(&s.presets.pipeline, "pipeline")?, seed)?;
    let spec = *lookup(
        &config.interference,
        "interference",
        s.require(&s.presets.interference, "interference")?,
    )?;
    let raw = s.axis_or(&s.sweep.storage_time_s, vec![300.0]);
    let times = match pipeline.decoupling {
        Some(d) => snap_durations(d.family, d.tau_s, &raw),
        None => raw,
    };
    let phases = s.axis_or(
        &s.sweep.delta_phi,
        Axis::Range {
            start: 0.0,
            stop: 2.0 * PI,
            points: 25,
        }
        .values(),
    );
    let results = par_map(&times, |_, &t| {
        Ok(timebin_interference(&pipeline, &spec, &phases, t)?)
    })?;
    let mut csv = String::from("storage_time_s,delta_phi_rad,middle_echo_intensity\n");
    let mut rows = Vec::new();
    for (t, r) in times.iter().zip(&results) {
        for (p, i) in r.delta_phi.iter().zip(&r.intensities) {
            writeln!(csv, "{t},{p},{i}").unwrap();
        }
        rows.push(json!({
            "storage_time_s": t,
            "visibility": r.visibility,
            "fidelity": r.fidelity,
            "fitted_phase_rad": r.fitted_phase,
            "rms_residual": r.rms_residual,
        }));
    }
    files.insert("fringes.csv".into(), csv);
    Ok(json!({ "fringes": rows }))
}

fn hyperfine_gaps(s: &Scenario, config: &Config, files: &mut BTreeMap<String, String>) -> Result<Value> {
    let names: Vec<&String> = match &s.presets.tensors {
        Some(n) => vec![config.tensors.get_key_value(n).map(|(k, _)| k).expect("resolved")],
        None => config.tensors.keys().collect(),
    };
    let field = config.field.field()?;
    let mut gaps_csv = String::from("tensors,state,lower,upper,gap_MHz\n");
    let mut rows = Vec::new();
    for name in names {
        let preset = &config.tensors[name];
        let ground = preset.ground()?;
        let excited = preset.excited()?;
        let lg = level_structure(&ground, &field)?;
        let le = level_structure(&excited, &field)?;
        for (state, levels) in [("g", &lg), ("e", &le)] {
            for (k, gap) in levels.neighbour_gaps().iter().enumerate() {
                writeln!(gaps_csv, "{name},{state},{},{},{gap}", k + 1, k + 2).unwrap();
            }
        }
        let start = MagneticField::from_vector(&(field.vector() * (1.0 + s.options.zefoz_offset)));
        let zefoz = find_zefoz(&ground, (3, 4), &start, &ZefozOptions::default())?;
        let rhd = rhd_scan(
            &le,
            (s.options.rhd_range_mhz[0], s.options.rhd_range_mhz[1]),
            s.options.rhd_step_mhz,
            s.options.rhd_linewidth_khz,
            &RhdWeights::Uniform(1.0),
        )?;
        let peak = rhd
            .points
            .iter()
            .copied()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .filter(|_| !rhd.empty_window)
            .map(|p| p.0);
        files.insert(format!("rhd_{name}.csv"), rhd.to_csv());
        let lambda = match &s.presets.pumps {
            Some(p) => Some(prepare_lambda(&lg, &le, &config.pumps[p])?),
            None => None,
        };
        rows.push(json!({
            "tensors": name,
            "ground_energies_MHz": lg.energies,
            "excited_energies_MHz": le.energies,
            "ground_gaps_MHz": lg.neighbour_gaps(),
            "excited_gaps_MHz": le.neighbour_gaps(),
            "excited_3_6_MHz": le.energies[5] - le.energies[2],
            "ground_3_4_MHz": lg.energies[3] - lg.energies[2],
            "zefoz": {
                "magnitude_T": zefoz.field.magnitude(),
                "direction": zefoz.field.direction(),
                "s1_norm_MHz_per_T": zefoz.s1_norm,
                "s2_MHz_per_T2": (0..3).map(|i| (0..3).map(|j| zefoz.s2[(i, j)]).collect::<Vec<_>>()).collect::<Vec<_>>(),
                "converged": zefoz.converged,
                "iterations": zefoz.iterations,
            },
            "rhd_resonances": rhd.resonances,
            "rhd_peak_MHz": peak,
            "lambda": lambda,
        }));
    }
    files.insert("gaps.csv".into(), gaps_csv);
    Ok(json!({ "tensor_sets": rows }))
}

fn efficiency_budget(
    s: &Scenario,
    config: &Config,
    seed: u64,
    files: &mut BTreeMap<String, String>,
) -> Result<Value> {
    let base = config.pipeline(s.require(&s.presets.pipeline, "pipeline")?, seed)?;
    let times = s.axis_or(&s.sweep.storage_time_s, vec![300.0]);
    let taus: Vec<Option<f64>> = match &s.sweep.tau_s {
        Some(a) => a.values().into_iter().map(Some).collect(),
        None => vec![None],
    };
    let mut jobs = Vec::new();
    for &family in &s.options.families {
        for &tau in &taus {
            let p = with_family(&base, family, tau);
            let spec = p.decoupling.expect("set above");
            for t in snap_durations(family, spec.tau_s, &times) {
                jobs.push((p.clone(), t));
            }
        }
    }
    let runs = par_map(&jobs, |_, (p, t)| Ok(run_storage(p, *t)?))?;
    let mut csv = String::from(
        "family,tau_s,storage_time_s,eta_afc,eta_control,eta_spin,eta_total,heating_factor,coverage,spin_coherence,snr\n",
    );
    let mut rows = Vec::new();
    for ((p, _), r) in jobs.iter().zip(&runs) {
        let spec = p.decoupling.expect("set above");
        let b = r.budget;
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{}",
            family_name(spec.family),
            spec.tau_s,
            r.storage_time_s,
            b.eta_afc,
            b.eta_control,
            b.eta_spin,
            b.eta_total,
            r.heating_factor,
            r.coverage,
            r.spin_coherence,
            r.snr
        )
        .unwrap();
        rows.push(json!({ "family": spec.family, "tau_s": spec.tau_s, "storage": r }));
    }
    files.insert("budget.csv".into(), csv);
    let lambda = match (&s.presets.pumps, &s.presets.tensors) {
        (Some(pumps), Some(tensors)) => {
            let field = config.field.field()?;
            let t = &config.tensors[tensors];
            let lg = level_structure(&t.ground()?, &field)?;
            let le = level_structure(&t.excited()?, &field)?;
            Some(prepare_lambda(&lg, &le, &config.pumps[pumps])?)
        }
        _ => None,
    };
    Ok(json!({ "budgets": rows, "lambda": lambda }))
}

fn transport(s: &Scenario, config: &Config, files: &mut BTreeMap<String, String>) -> Result<Value> {
    let preset = lookup(
        &config.transport,
        "transport",
        s.require(&s.presets.transport, "transport")?,
    )?;
    let lengths = s.axis_or(&s.sweep.length_km, vec![preset.channel.length_km]);
    let mut csv = String::from(
        "length_km,transit_s,fiber_transmittance,memory_intensity_convention,memory_amplitude_convention\n",
    );
    let mut rows = Vec::new();
    for &l in &lengths {
        let channel = FiberChannel {
            length_km: l,
            ..preset.channel
        };
        let c = transport_vs_fiber(&preset.memory, &channel, preset.speed_kmh)?;
        let eff = |conv| {
            c.memory
                .iter()
                .find(|m| m.convention == conv)
                .map(|m| m.efficiency)
        };
        writeln!(
            csv,
            "{l},{},{},{},{}",
            c.transit_s,
            c.fiber_transmittance,
            float_cell(eff(LifetimeConvention::Intensity)),
            float_cell(eff(LifetimeConvention::Amplitude)),
        )
        .unwrap();
        rows.push(json!({
            "comparison": c,
            "closest_to_reference": c.closest_to(preset.reference_efficiency),
        }));
    }
    files.insert("transport.csv".into(), csv);
    Ok(json!({ "reference_efficiency": preset.reference_efficiency, "points": rows }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_scenarios_parse_and_resolve() {
        let config = Config::builtin();
        for (id, _) in builtin_scenarios() {
            let s = load_scenario(id, None).unwrap();
            assert_eq!(s.id, id);
            s.resolve(&config).unwrap();
        }
    }

    #[test]
    fn axis_range_and_errors() {
        let a = Axis::Range {
            start: 0.0,
            stop: 1.0,
            points: 5,
        };
        assert_eq!(a.values(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(Axis::Values(vec![]).check("x").is_err());
        let backwards = Axis::Range {
            start: 1.0,
            stop: 0.0,
            points: 3,
        };
        assert!(backwards.check("x").is_err());
    }

    #[test]
    fn snapping_respects_family_period() {
        assert_eq!(snap_durations(SequenceFamily::Kddx, 0.1, &[300.2]), vec![300.0]);
        let cpmg = snap_durations(SequenceFamily::Cpmg, 0.3, &[1.0]);
        assert!((cpmg[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn unknown_scenario_is_reported() {
        assert!(matches!(
            load_scenario("no_such_scenario", None),
            Err(HarnessError::UnknownScenario(_))
        ));
    }

    #[test]
    fn seeds_are_distinct_per_job() {
        let a: Vec<u64> = (0..8).map(|k| derive_seed(7, k)).collect();
        let mut b = a.clone();
        b.sort();
        b.dedup();
        assert_eq!(b.len(), 8);
        assert_eq!(derive_seed(7, 3), a[3]);
    }
}
