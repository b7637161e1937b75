use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::comb::{CombSpec, Discretization, EchoOptions};
use crate::dd::{FilterQuadrature, NoiseModel};
use crate::experiment::{
    ControlModel, CoverageSpec, DecouplingSpec, FiberChannel, HeatingPreset, InterferenceSpec,
    MemoryLink, PumpPreset, StoragePipeline,
};
use crate::pulses::{CompoundingModel, ControlPreset, InhomogeneousLine, PulseShape};
use crate::spectra::{ElectronicState, MagneticField, SpinSystem};

pub const DEFAULT_CONFIG: &str = include_str!("../../../../config/default.toml");

/// Directory holding `default.toml` and `scenarios/`, overriding the
/// built-in copies.
pub const CONFIG_ROOT_ENV: &str = "AFCMEM_CONFIG_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldPreset {
    pub magnitude_t: f64,
    pub direction: [f64; 3],
}

impl FieldPreset {
    pub fn field(&self) -> Result<MagneticField> {
        Ok(MagneticField::along(self.magnitude_t, self.direction)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorPair {
    /// MHz/T.
    pub zeeman: [[f64; 3]; 3],
    /// MHz.
    pub quadrupole: [[f64; 3]; 3],
}

impl TensorPair {
    fn system(&self, spin: f64, state: ElectronicState) -> Result<SpinSystem> {
        let m = Matrix3::from_fn(|i, j| self.zeeman[i][j]);
        let q = Matrix3::from_fn(|i, j| self.quadrupole[i][j]);
        Ok(SpinSystem::new(spin, m, q, state)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorPreset {
    pub spin: f64,
    pub ground: TensorPair,
    pub excited: TensorPair,
}

impl TensorPreset {
    pub fn ground(&self) -> Result<SpinSystem> {
        self.ground.system(self.spin, ElectronicState::Ground)
    }

    pub fn excited(&self) -> Result<SpinSystem> {
        self.excited.system(self.spin, ElectronicState::Excited)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportPreset {
    pub memory: MemoryLink,
    pub channel: FiberChannel,
    pub speed_kmh: f64,
    /// Efficiency the extrapolations are compared against.
    pub reference_efficiency: f64,
}

fn default_coverage_model() -> CompoundingModel {
    CompoundingModel::CoherentSurvivor
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelinePreset {
    pub comb: String,
    pub probe: String,
    /// Control preset name; perfect transfer when absent.
    #[serde(default)]
    pub control: Option<String>,
    pub noise: String,
    /// Spin inhomogeneous line for refocusing coverage.
    #[serde(default)]
    pub line: Option<String>,
    #[serde(default)]
    pub heating: Option<String>,
    #[serde(default)]
    pub decoupling: Option<DecouplingSpec>,
    #[serde(default)]
    pub t_pi_us: Option<f64>,
    #[serde(default = "default_coverage_model")]
    pub coverage_model: CompoundingModel,
    #[serde(default)]
    pub coverage_pulses: Option<u32>,
    pub atoms_per_tooth: usize,
    pub discretization: Discretization,
    pub noise_floor: f64,
    #[serde(default)]
    pub echo: EchoOptions,
    #[serde(default)]
    pub quadrature: FilterQuadrature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub field: FieldPreset,
    pub tensors: BTreeMap<String, TensorPreset>,
    pub combs: BTreeMap<String, CombSpec>,
    pub probes: BTreeMap<String, PulseShape>,
    pub controls: BTreeMap<String, ControlPreset>,
    pub drives: BTreeMap<String, PulseShape>,
    pub lines: BTreeMap<String, InhomogeneousLine>,
    pub noise: BTreeMap<String, NoiseModel>,
    pub heating: BTreeMap<String, HeatingPreset>,
    pub pumps: BTreeMap<String, PumpPreset>,
    pub interference: BTreeMap<String, InterferenceSpec>,
    pub transport: BTreeMap<String, TransportPreset>,
    pub pipelines: BTreeMap<String, PipelinePreset>,
}

pub(crate) fn lookup<'a, T>(
    map: &'a BTreeMap<String, T>,
    kind: &'static str,
    name: &str,
) -> Result<&'a T> {
    map.get(name).ok_or_else(|| HarnessError::PresetNotFound {
        kind,
        name: name.to_string(),
    })
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

impl Config {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let config: Config = toml::from_str(text).map_err(|e| HarnessError::Schema {
            origin: origin.to_string(),
            message: e.to_string(),
        })?;
        config.check_references()?;
        Ok(config)
    }

    /// Built-in presets.
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_CONFIG, "built-in default.toml").expect("built-in config is valid")
    }

    /// `root/default.toml` when a root is given or set through
    /// [`CONFIG_ROOT_ENV`], the built-in presets otherwise.
    pub fn load(root: Option<&Path>) -> Result<Self> {
        match Self::root(root) {
            Some(dir) => {
                let path = dir.join("default.toml");
                Self::parse(&read_text(&path)?, &path.display().to_string())
            }
            None => Ok(Self::builtin()),
        }
    }

    pub fn root(explicit: Option<&Path>) -> Option<PathBuf> {
        explicit
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(CONFIG_ROOT_ENV).map(PathBuf::from))
    }

    fn check_references(&self) -> Result<()> {
        for p in self.pipelines.values() {
            lookup(&self.combs, "comb", &p.comb)?;
            lookup(&self.probes, "probe", &p.probe)?;
            lookup(&self.noise, "noise", &p.noise)?;
            if let Some(c) = &p.control {
                lookup(&self.controls, "control", c)?;
            }
            if let Some(l) = &p.line {
                lookup(&self.lines, "line", l)?;
            }
            if let Some(h) = &p.heating {
                lookup(&self.heating, "heating", h)?;
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// Names of every preset, grouped by kind.
    pub fn preset_names(&self) -> Vec<(&'static str, Vec<&str>)> {
        fn names<T>(m: &BTreeMap<String, T>) -> Vec<&str> {
            m.keys().map(String::as_str).collect()
        }
        vec![
            ("tensors", names(&self.tensors)),
            ("combs", names(&self.combs)),
            ("probes", names(&self.probes)),
            ("controls", names(&self.controls)),
            ("drives", names(&self.drives)),
            ("lines", names(&self.lines)),
            ("noise", names(&self.noise)),
            ("heating", names(&self.heating)),
            ("pumps", names(&self.pumps)),
            ("interference", names(&self.interference)),
            ("transport", names(&self.transport)),
            ("pipelines", names(&self.pipelines)),
        ]
    }

    pub fn noise_model(&self, name: &str, seed: u64) -> Result<NoiseModel> {
        let mut model = lookup(&self.noise, "noise", name)?.clone();
        model.seed = seed;
        Ok(model)
    }

    pub fn pipeline(&self, name: &str, seed: u64) -> Result<StoragePipeline> {
        let p = lookup(&self.pipelines, "pipeline", name)?;
        let control = match &p.control {
            Some(c) => ControlModel::Chs(*lookup(&self.controls, "control", c)?),
            None => ControlModel::Perfect,
        };
        let coverage = match &p.line {
            Some(l) => {
                let t_pi_us = p.t_pi_us.ok_or_else(|| HarnessError::Schema {
                    origin: format!("pipeline {name}"),
                    message: "coverage line needs t_pi_us".into(),
                })?;
                Some(CoverageSpec {
                    line: *lookup(&self.lines, "line", l)?,
                    t_pi_us,
                    model: p.coverage_model,
                    pulse_count: p.coverage_pulses,
                })
            }
            None => None,
        };
        let heating = match &p.heating {
            Some(h) => Some(*lookup(&self.heating, "heating", h)?),
            None => None,
        };
        Ok(StoragePipeline {
            comb: *lookup(&self.combs, "comb", &p.comb)?,
            atoms_per_tooth: p.atoms_per_tooth,
            discretization: p.discretization,
            probe: *lookup(&self.probes, "probe", &p.probe)?,
            echo: p.echo,
            control,
            decoupling: p.decoupling,
            noise: self.noise_model(&p.noise, seed)?,
            coverage,
            heating,
            quadrature: p.quadrature,
            noise_floor: p.noise_floor,
            seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_parses_and_round_trips() {
        let c = Config::builtin();
        assert!(c.pipelines.contains_key("paper_cpmg"));
        assert!(c.pumps["ideal"].stages[0].cycles.is_infinite());
        let again = Config::parse(&c.to_toml(), "round trip").unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_field_reports_location() {
        let text = DEFAULT_CONFIG.replace("peak_od = 0.8", "peak_od = 0.8\npeak_odd = 1.0");
        let err = Config::parse(&text, "edited").unwrap_err().to_string();
        assert!(err.contains("peak_odd") && err.contains("line"), "{err}");
    }

    #[test]
    fn dangling_reference_is_rejected() {
        let text = DEFAULT_CONFIG.replace("noise = \"silent\"", "noise = \"missing\"");
        assert!(matches!(
            Config::parse(&text, "edited"),
            Err(HarnessError::PresetNotFound { kind: "noise", .. })
        ));
    }
}
