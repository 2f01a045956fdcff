use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod manifest;

use config::{ModelKind, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "catchflux", version, about = "Catchment source apportionment of trace elements")]
struct Cli {
    /// JSON run configuration (a previous manifest.json also works).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[arg(long, global = true, value_enum)]
    model: Option<ModelKind>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct ModelInputs {
    #[arg(long)]
    network: Option<PathBuf>,
    #[arg(long)]
    measurements: Option<PathBuf>,
    /// Groundwater concentration per catchment (two-source model).
    #[arg(long)]
    groundwater: Option<PathBuf>,
    /// Design matrix (custom model).
    #[arg(long)]
    design: Option<PathBuf>,
    #[arg(long)]
    inner_tol: Option<f64>,
    #[arg(long)]
    outer_tol: Option<f64>,
    #[arg(long)]
    max_outer: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the model by Laplace-approximate maximum likelihood.
    Fit(ModelInputs),
    /// Predict concentrations and mass budgets for every catchment.
    Predict {
        #[command(flatten)]
        inputs: ModelInputs,
        /// Use an existing fit.json instead of refitting.
        #[arg(long)]
        fit: Option<PathBuf>,
    },
    /// Leave-fold-out cross-validation.
    Cv {
        #[command(flatten)]
        inputs: ModelInputs,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Generate a synthetic network and measurements.
    Simulate {
        /// Simulation spec as JSON.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        n_catchments: Option<usize>,
    },
    /// Transfer well-screen data to catchment groundwater concentrations.
    GwIngest {
        #[arg(long)]
        screens: Option<PathBuf>,
        #[arg(long)]
        gvf: Option<PathBuf>,
        #[arg(long)]
        links: Option<PathBuf>,
        #[arg(long)]
        intersect: Option<PathBuf>,
        /// Restrict output to these network catchments.
        #[arg(long)]
        network: Option<PathBuf>,
        /// Interpolate a pH field at this cell size for bodies without pH.
        #[arg(long)]
        ph_resolution: Option<f64>,
    },
    /// Summarise a fit, optionally against a second fit.
    Report {
        #[arg(long)]
        fit: Option<PathBuf>,
        #[arg(long)]
        compare: Option<PathBuf>,
    },
}

fn apply_inputs(cfg: &mut RunConfig, m: ModelInputs) {
    set(&mut cfg.network, m.network);
    set(&mut cfg.measurements, m.measurements);
    set(&mut cfg.groundwater, m.groundwater);
    set(&mut cfg.design, m.design);
    if m.inner_tol.is_some() || m.outer_tol.is_some() || m.max_outer.is_some() {
        let fit = cfg.fit.get_or_insert_with(Default::default);
        if let Some(v) = m.inner_tol {
            fit.inner_tol = v;
        }
        if let Some(v) = m.outer_tol {
            fit.outer_tol = v;
        }
        if let Some(v) = m.max_outer {
            fit.max_outer = v;
        }
    }
}

fn set<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

fn run(cli: Cli) -> Result<commands::Outcome> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.out, cli.out);
    set(&mut cfg.seed, cli.seed);
    set(&mut cfg.threads, cli.threads);
    set(&mut cfg.model, cli.model);

    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot configure the thread pool")?;
    }

    let out = cfg.out_dir();
    std::fs::create_dir_all(&out).with_context(|| format!("cannot create output directory {}", out.display()))?;

    match cli.command {
        Command::Fit(m) => {
            apply_inputs(&mut cfg, m);
            commands::fit(&cfg)
        }
        Command::Predict { inputs, fit } => {
            apply_inputs(&mut cfg, inputs);
            set(&mut cfg.fit_result, fit);
            commands::predict(&cfg)
        }
        Command::Cv { inputs, folds } => {
            apply_inputs(&mut cfg, inputs);
            set(&mut cfg.folds, folds);
            commands::cv(&cfg)
        }
        Command::Simulate { spec, n_catchments } => {
            if let Some(p) = spec {
                let text = std::fs::read_to_string(&p).with_context(|| format!("cannot read spec {}", p.display()))?;
                cfg.synth = Some(serde_json::from_str(&text).with_context(|| format!("{}: invalid spec", p.display()))?);
            }
            if let Some(n) = n_catchments {
                cfg.synth.get_or_insert_with(Default::default).n_catchments = n;
            }
            commands::simulate(&cfg)
        }
        Command::GwIngest {
            screens,
            gvf,
            links,
            intersect,
            network,
            ph_resolution,
        } => {
            set(&mut cfg.screens, screens);
            set(&mut cfg.gvf, gvf);
            set(&mut cfg.links, links);
            set(&mut cfg.intersect, intersect);
            set(&mut cfg.network, network);
            set(&mut cfg.ph_resolution, ph_resolution);
            commands::gw_ingest(&cfg)
        }
        Command::Report { fit, compare } => {
            set(&mut cfg.fit_result, fit);
            set(&mut cfg.compare, compare);
            commands::report(&cfg)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(commands::Outcome::Done) => ExitCode::SUCCESS,
        Ok(commands::Outcome::NotConverged) => {
            eprintln!("warning: optimisation did not converge; outputs were written");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
