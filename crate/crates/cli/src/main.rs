//! `drainctl`: scenario simulation, controller benchmarking, data fitting
//! and flow-setpoint conversion for the drainage pilot toolkit.
//!
//! Exit codes: 0 on success, 2 on schema/usage errors (bad files, unknown
//! names, malformed values), 1 on runtime failures. Every error path prints
//! a single `error[schema]:` or `error[runtime]:` line on stderr.

mod report;

use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};
use thiserror::Error;

use drainctl_core::actuation::{select_setpoint, ConversionContext};
use drainctl_core::closedloop::{compare_controllers, run_closed_loop, ControllerKind, RunError};
use drainctl_core::config::AppConfig;
use drainctl_core::control::ControlError;
use drainctl_core::datafit::{
    fit_lls, fit_nlls, Dataset, ExpressionTemplate, FitError, NllsOptions,
};
use drainctl_core::lm::LmError;
use drainctl_core::scenario::Scenario;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Schema(String),
    #[error("{0}")]
    Runtime(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema(_) => 2,
            CliError::Runtime(_) | CliError::Io(_) => 1,
        }
    }

    fn prefix(&self) -> &'static str {
        match self {
            CliError::Schema(_) => "error[schema]",
            CliError::Runtime(_) | CliError::Io(_) => "error[runtime]",
        }
    }
}

impl From<drainctl_core::scenario::ScenarioError> for CliError {
    fn from(e: drainctl_core::scenario::ScenarioError) -> Self {
        match e {
            drainctl_core::scenario::ScenarioError::Io(io) => CliError::Io(io),
            other => CliError::Schema(other.to_string()),
        }
    }
}

impl From<drainctl_core::config::ConfigError> for CliError {
    fn from(e: drainctl_core::config::ConfigError) -> Self {
        match e {
            drainctl_core::config::ConfigError::Io(io) => CliError::Io(io),
            other => CliError::Schema(other.to_string()),
        }
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(c) => c.into(),
            RunError::BadFixedOpening(_) => CliError::Schema(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::Io(io) => CliError::Io(io),
            other => CliError::Schema(other.to_string()),
        }
    }
}

impl From<ControlError> for CliError {
    fn from(e: ControlError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<LmError> for CliError {
    fn from(e: LmError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Version plus the checksum of the embedded parameter tables, so a run is
/// traceable to the exact model coefficients and conversion rows it used.
static VERSION: LazyLock<String> = LazyLock::new(|| {
    format!(
        "{} (parameter tables sha256:{})",
        env!("CARGO_PKG_VERSION"),
        parameter_table_checksum()
    )
});

fn parameter_table_checksum() -> String {
    let defaults = AppConfig::default();
    let tables = serde_json::json!({
        "model": defaults.model,
        "grid": defaults.grid,
        "fill_table": defaults.fill_table,
        "empty_table": defaults.empty_table,
    });
    let digest = Sha256::digest(tables.to_string().as_bytes());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    hex[..12].to_string()
}

#[derive(Parser)]
#[command(name = "drainctl", version = &**VERSION, about = "Urban drainage control toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ControllerArg {
    Mpc,
    Rbc,
    Fixed,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FamilyArg {
    Fill,
    Empty,
}

#[derive(Subcommand)]
enum Command {
    /// Run one controller against a scenario and write the run directory.
    Simulate {
        /// Scenario CSV (`time_s,q_in4,q_in5,q_in6,q_md_mi`).
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum)]
        controller: ControllerArg,
        /// Fixed-controller openings, percent.
        #[arg(long, default_value_t = 100.0)]
        fixed_fill: f64,
        #[arg(long, default_value_t = 0.0)]
        fixed_empty: f64,
        /// JSON configuration; embedded defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (default `runs/<scenario>-<controller>`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the optimizer telemetry CSV.
        #[arg(long)]
        trace: bool,
    },
    /// Fit an expression template to a CSV dataset.
    Fit {
        /// Dataset CSV with a header row naming every column.
        #[arg(long)]
        data: PathBuf,
        /// Template name: linear, quadratic, cubic, poly\<N\>, mvquad,
        /// quadlog, logistic.
        #[arg(long)]
        template: String,
        /// Name of the target column; every other column is a feature.
        #[arg(long)]
        target: String,
        /// Initial parameters for nonlinear templates: inline JSON array or
        /// a path to one.
        #[arg(long)]
        init: Option<String>,
        /// Hold out this trailing fraction of the data for evaluation.
        #[arg(long)]
        holdout: Option<f64>,
        /// Write the fit result JSON here (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a conversion family, or select a setpoint for a flow target.
    Convert {
        #[arg(long, value_enum)]
        family: FamilyArg,
        /// Opening in percent; grid values only unless --interpolate.
        #[arg(long)]
        opening: Option<f64>,
        /// Comma-separated inputs, e.g. `q_in5=1.0` or
        /// `d_abro=2.0,g_out_a=0.5,q_in4=0.3`. Missing keys default to 0.
        #[arg(long, default_value = "")]
        inputs: String,
        /// Select the opening whose conversion value is closest to --target.
        #[arg(long)]
        select: bool,
        #[arg(long)]
        target: Option<f64>,
        /// Allow openings between grid values (linear interpolation).
        #[arg(long)]
        interpolate: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run both controllers on a scenario and write the comparison report.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (default `runs/<scenario>-compare`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        trace: bool,
    },
    /// Write the bundled synthetic storm scenario to a directory.
    Fixture {
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("{}: {}", e.prefix(), e);
        std::process::exit(e.exit_code());
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<AppConfig, CliError> {
    match path {
        Some(p) => Ok(AppConfig::load(p)?),
        None => Ok(AppConfig::default()),
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate {
            scenario,
            controller,
            fixed_fill,
            fixed_empty,
            config,
            out,
            trace,
        } => {
            let config = load_config(&config)?;
            let scenario = Scenario::from_csv_path(&scenario)?;
            let kind = match controller {
                ControllerArg::Mpc => ControllerKind::Mpc,
                ControllerArg::Rbc => ControllerKind::Rbc,
                ControllerArg::Fixed => ControllerKind::Fixed {
                    fill_pct: fixed_fill,
                    empty_pct: fixed_empty,
                },
            };
            let outcome = run_closed_loop(&scenario, kind, &config)?;
            let dir = out.unwrap_or_else(|| {
                PathBuf::from("runs").join(format!("{}-{}", scenario.name, kind.label()))
            });
            report::write_run_dir(&outcome, &dir, trace)?;
            println!(
                "{} on {}: total CSO {:.2}e3 m3, Sur WWTP {:.2}e3 m3 -> {}",
                kind.label(),
                scenario.name,
                outcome.kpi.total_cso(),
                outcome.kpi.q_wwtp_sur,
                dir.display()
            );
            Ok(())
        }
        Command::Fit {
            data,
            template,
            target,
            init,
            holdout,
            out,
        } => cmd_fit(
            &data,
            &template,
            &target,
            init.as_deref(),
            holdout,
            out.as_deref(),
        ),
        Command::Convert {
            family,
            opening,
            inputs,
            select,
            target,
            interpolate,
            config,
        } => cmd_convert(
            family,
            opening,
            &inputs,
            select,
            target,
            interpolate,
            &config,
        ),
        Command::Compare {
            scenario,
            config,
            out,
            trace,
        } => {
            let config = load_config(&config)?;
            let scenario = Scenario::from_csv_path(&scenario)?;
            let comparison = compare_controllers(&scenario, &config)?;
            let dir = out.unwrap_or_else(|| {
                PathBuf::from("runs").join(format!("{}-compare", scenario.name))
            });
            report::write_comparison_dir(&comparison, &dir, trace)?;
            for row in &comparison.rows {
                let delta = row
                    .delta_pct
                    .map(|d| format!("{d:+.1}%"))
                    .unwrap_or_else(|| "n/a".into());
                println!(
                    "{:<12} RBC {:>9.2}  MPC {:>9.2}  {}",
                    row.label, row.rbc, row.mpc, delta
                );
            }
            println!("written to {}", dir.display());
            Ok(())
        }
        Command::Fixture { out } => {
            let storm = Scenario::synthetic_storm();
            let path = storm
                .write_to_dir(&out)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn parse_init(init: &str) -> Result<Vec<f64>, CliError> {
    let raw = if init.trim_start().starts_with('[') {
        init.to_string()
    } else {
        std::fs::read_to_string(init)?
    };
    serde_json::from_str(&raw)
        .map_err(|e| CliError::Schema(format!("initial parameters must be a JSON array: {e}")))
}

fn cmd_fit(
    data: &Path,
    template_name: &str,
    target: &str,
    init: Option<&str>,
    holdout: Option<f64>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let template = ExpressionTemplate::parse(template_name)?;
    let dataset = Dataset::from_csv_path(data, target)?;
    let (train, test) = match holdout {
        Some(fraction) => {
            if !(0.0..1.0).contains(&fraction) {
                return Err(CliError::Schema(format!(
                    "holdout fraction must be in [0, 1), got {fraction}"
                )));
            }
            let (a, b) = dataset.split_holdout(fraction);
            (a, Some(b))
        }
        None => (dataset, None),
    };

    let result = if template.is_linear_in_params() {
        fit_lls(&train, &template)?
    } else {
        let init = init.ok_or_else(|| {
            CliError::Schema(format!(
                "template `{template_name}` is nonlinear; provide --init"
            ))
        })?;
        let initial = parse_init(init)?;
        fit_nlls(&train, &template, &initial, &NllsOptions::default())?
    };

    let holdout_metrics = match &test {
        Some(test) if !test.is_empty() => {
            let predictions: Vec<f64> = test
                .rows()
                .iter()
                .map(|x| template.eval(&result.params, x))
                .collect();
            Some(drainctl_core::datafit::metrics(
                test.targets(),
                &predictions,
            )?)
        }
        _ => None,
    };

    // Summary row in the style of the model-performance table:
    // mean(y) ± σ(y), max(y), RMSE, MAE, R².
    let y = train.targets();
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let std = (y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let r2_str = result
        .r2
        .map(|r| format!("{r:.4}"))
        .unwrap_or_else(|| "undefined".into());
    println!(
        "{target} | {mean:.2}+/-{std:.2} | {max:.2} | RMSE {:.4} | MAE {:.4} | R2 {r2_str}",
        result.rmse, result.mae
    );

    let doc = serde_json::json!({
        "template": template_name,
        "target": target,
        "fit": result,
        "holdout": holdout_metrics,
    });
    let rendered = serde_json::to_string_pretty(&doc).expect("fit result serializes");
    match out {
        Some(path) => std::fs::write(path, rendered)?,
        None => println!("{rendered}"),
    }

    if !result.converged {
        return Err(CliError::Runtime(format!(
            "fit did not converge within the iteration budget ({} iterations)",
            result.iterations
        )));
    }
    Ok(())
}

fn parse_inputs(raw: &str) -> Result<std::collections::BTreeMap<String, f64>, CliError> {
    let mut map = std::collections::BTreeMap::new();
    for part in raw.split(',').filter(|p| !p.trim().is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| CliError::Schema(format!("expected key=value, got `{part}`")))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| CliError::Schema(format!("invalid number `{value}` for `{key}`")))?;
        if !value.is_finite() || value < 0.0 {
            return Err(CliError::Schema(format!(
                "input `{key}` must be a finite nonnegative number, got {value}"
            )));
        }
        map.insert(key.trim().to_string(), value);
    }
    Ok(map)
}

fn cmd_convert(
    family: FamilyArg,
    opening: Option<f64>,
    inputs: &str,
    select: bool,
    target: Option<f64>,
    interpolate: bool,
    config: &Option<PathBuf>,
) -> Result<(), CliError> {
    let config = load_config(config)?;
    let inputs = parse_inputs(inputs)?;
    let allowed: &[&str] = match family {
        FamilyArg::Fill => &["q_in5"],
        FamilyArg::Empty => &["d_abro", "g_out_a", "q_in4"],
    };
    for key in inputs.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(CliError::Schema(format!(
                "unknown input `{key}` for this family (expected one of {})",
                allowed.join(", ")
            )));
        }
    }
    let get = |key: &str| inputs.get(key).copied().unwrap_or(0.0);
    let context = match family {
        FamilyArg::Fill => ConversionContext::Fill {
            q_in5: get("q_in5"),
        },
        FamilyArg::Empty => ConversionContext::Empty {
            d_abro: get("d_abro"),
            g_out_a: get("g_out_a"),
            q_in4: get("q_in4"),
        },
    };

    if select {
        let target =
            target.ok_or_else(|| CliError::Schema("--select needs --target <flow>".to_string()))?;
        if !target.is_finite() || target < 0.0 {
            return Err(CliError::Schema(format!(
                "target flow must be a finite nonnegative number, got {target}"
            )));
        }
        let decision = select_setpoint(
            target,
            &context,
            &config.fill_table,
            &config.empty_table,
            &config.grid,
        );
        println!(
            "{}",
            serde_json::to_string_pretty(&decision).expect("decision serializes")
        );
        return Ok(());
    }

    let opening = opening.ok_or_else(|| CliError::Schema("provide --opening <pct>".to_string()))?;
    let on_grid = config.grid.index_of(opening);
    if on_grid.is_none() && !interpolate {
        return Err(CliError::Schema(format!(
            "opening {opening}% is not on the setpoint grid; pass --interpolate to allow it"
        )));
    }
    let flow = match (family, on_grid) {
        (FamilyArg::Fill, Some(i)) => config.fill_table.flow_at(i, get("q_in5")),
        (FamilyArg::Fill, None) => config
            .fill_table
            .flow_at_opening(opening, get("q_in5"), &config.grid)
            .map_err(|e| CliError::Schema(e.to_string()))?,
        (FamilyArg::Empty, Some(i)) => {
            config
                .empty_table
                .flow_at(i, get("d_abro"), get("g_out_a"), get("q_in4"))
        }
        (FamilyArg::Empty, None) => config
            .empty_table
            .flow_at_opening(
                opening,
                get("d_abro"),
                get("g_out_a"),
                get("q_in4"),
                &config.grid,
            )
            .map_err(|e| CliError::Schema(e.to_string()))?,
    };
    println!("{flow}");
    Ok(())
}
