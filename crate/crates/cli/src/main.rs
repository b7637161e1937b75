use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use afcmem::harness::{
    builtin_scenarios, load_scenario, registry, run_scenario, validate, write_outputs, Config,
    RunOptions, CONFIG_ROOT_ENV,
};
use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

/// Spin-wave AFC memory simulator: runs reproduction scenarios and checks
/// recomputed values against published ones.
#[derive(Debug, Parser)]
#[command(name = "afcmem", version)]
struct Cli {
    /// Directory with default.toml and scenarios/ replacing the built-in copies.
    #[arg(long, global = true, env = CONFIG_ROOT_ENV)]
    config_root: Option<PathBuf>,
    /// Seed overriding the scenario's own.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Output directory; each scenario writes into a subdirectory named by its id.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Exit nonzero when a validation check fails.
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run scenarios given by path or built-in id; `all` runs every built-in.
    Run {
        #[arg(required = true)]
        scenarios: Vec<String>,
    },
    /// Recompute every registered published value and report pass/fail.
    Validate {
        /// Also write the machine-readable report here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// List presets and built-in scenarios.
    ListPresets,
    /// Print the resolved configuration as TOML.
    DumpConfig,
}

fn run(cli: &Cli, references: &[String]) -> anyhow::Result<()> {
    let root = cli.config_root.as_deref();
    let config = Config::load(root)?;
    let expanded: Vec<String> = if references.iter().any(|r| r == "all") {
        builtin_scenarios().map(|(id, _)| id.to_string()).collect()
    } else {
        references.to_vec()
    };
    let scenarios = expanded
        .iter()
        .map(|r| load_scenario(r, root).with_context(|| format!("loading scenario {r}")))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut ids = BTreeSet::new();
    for s in &scenarios {
        if !ids.insert(s.id.as_str()) {
            bail!("scenario id `{}` appears twice", s.id);
        }
    }
    let opts = RunOptions {
        seed: cli.seed,
        jobs: cli.jobs,
    };
    for s in &scenarios {
        let output = run_scenario(s, &config, &opts).with_context(|| format!("scenario {}", s.id))?;
        let dir = match (&cli.out_dir, &s.output_dir) {
            (Some(base), _) => base.join(&s.id),
            (None, Some(own)) => own.clone(),
            (None, None) => PathBuf::from("results").join(&s.id),
        };
        for path in write_outputs(&output, &dir)? {
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { scenarios } => run(&cli, scenarios).map(|_| true),
        Command::Validate { json } => (|| {
            let config = Config::load(cli.config_root.as_deref())?;
            let report = validate(&registry(), &config);
            print!("{}", report.to_text());
            if let Some(path) = json {
                std::fs::write(path, report.to_json())
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(!(cli.strict && report.failures() > 0))
        })(),
        Command::ListPresets => Config::load(cli.config_root.as_deref())
            .map(|config| {
                for (kind, names) in config.preset_names() {
                    println!("{kind}: {}", names.join(", "));
                }
                let ids: Vec<&str> = builtin_scenarios().map(|(id, _)| id).collect();
                println!("scenarios: {}", ids.join(", "));
                true
            })
            .map_err(Into::into),
        Command::DumpConfig => Config::load(cli.config_root.as_deref())
            .map(|config| {
                print!("{}", config.to_toml());
                true
            })
            .map_err(Into::into),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
