//! `pmm-bench`: run the named scenarios and write their CSV reports.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use poisson_midpoint::bench::{run_scenario, ExperimentConfig, Scenario};
use poisson_midpoint::Error;

const SCHEMA_HELP: &str = "\
Config files are TOML with these keys (unknown keys are rejected):
  scenario = \"<name>\"          one of `pmm-bench list-scenarios`
  seed, chains, steps          integers
  output = \"<path>\"            optional CSV destination
  [target]   dim, gammas, x0, mixture = [{weight, mean, cov}], [target.schedule], extra_schedules
  [sampler]  alphas, ks, options, variant, burn_in, permutations, level,
             calibration_trials, calibration_size, moment_r, replay_steps
`pmm-bench emit-default-config <scenario>` prints a complete example.";

#[derive(Parser, Debug)]
#[command(name = "pmm-bench", version, about = "Poisson midpoint benchmark harness", after_help = SCHEMA_HELP)]
struct Cli {
    /// Override the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Write the CSV here instead of the config's output path or stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the scenario described by a TOML config file.
    Run { config: PathBuf },
    /// Print the scenario names.
    ListScenarios,
    /// Print the default config of a scenario.
    EmitDefaultConfig { scenario: String },
}

fn usage(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}\n\n{SCHEMA_HELP}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            return usage("--threads must be at least 1");
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match cli.command {
        Command::ListScenarios => {
            for s in Scenario::ALL {
                println!("{:<26} {}", s.name(), s.description());
            }
            ExitCode::SUCCESS
        }
        Command::EmitDefaultConfig { scenario } => match scenario.parse::<Scenario>() {
            Ok(s) => {
                let mut c = ExperimentConfig::default_for(s);
                if let Some(seed) = cli.seed {
                    c.seed = seed;
                }
                print!("{}", c.to_toml());
                ExitCode::SUCCESS
            }
            Err(e) => {
                let names: Vec<_> = Scenario::ALL.iter().map(|s| s.name()).collect();
                eprintln!("error: {e}\nknown scenarios: {}", names.join(", "));
                ExitCode::from(2)
            }
        },
        Command::Run { config } => {
            let mut cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e @ Error::Io { .. }) => {
                    eprintln!("error: cannot read config {}: {e}", config.display());
                    return ExitCode::from(2);
                }
                Err(e) => return usage(format!("{}: {e}", config.display())),
            };
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            if let Err(e) = cfg.validate() {
                return usage(format!("{}: {e}", config.display()));
            }
            let report = match run_scenario(&cfg) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            };
            let csv = report.to_csv_string();
            match cli.out.or(cfg.output.clone()) {
                Some(path) => {
                    if let Err(e) = std::fs::write(&path, csv) {
                        eprintln!("error: cannot write {}: {e}", path.display());
                        return ExitCode::from(2);
                    }
                }
                None => print!("{csv}"),
            }
            let verdict = if report.passed() { "PASS" } else { "FAIL" };
            eprintln!(
                "{} {verdict}: {} checks, {} failed, {:.2}s",
                report.scenario,
                report.checked(),
                report.failures().len(),
                report.wall_time_s
            );
            for f in report.failures() {
                eprintln!("  failed: {} {} = {} ({})", f.case, f.metric, f.value, f.rule);
            }
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
