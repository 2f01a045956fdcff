use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use catchflux::crossval::{make_folds, run_cv};
use catchflux::gwsource::{idw_ph, run_pipeline, GridSpec, Method};
use catchflux::io;
use catchflux::laplace::{fit as fit_model, FitResult};
use catchflux::predict::{mass_budget, predict_all, variance_decomposition, year_effects, KG_PER_DAY};
use catchflux::sourcemodel::{ParameterSet, SourceDesign};
use catchflux::synth::{generate, simulate_measurements, SourceTemplate};
use catchflux::{Measurements, Network};
use serde::Serialize;

use crate::config::{required, ModelKind, RunConfig};
use crate::manifest::Artifacts;

pub enum Outcome {
    Done,
    NotConverged,
}

impl Outcome {
    fn from_converged(ok: bool) -> Self {
        if ok {
            Self::Done
        } else {
            Self::NotConverged
        }
    }
}

struct Model {
    net: Network,
    data: Measurements,
    design: SourceDesign<f64>,
}

fn load_network(cfg: &RunConfig, art: &mut Artifacts) -> Result<Network> {
    let path = required(&cfg.network, "network")?;
    art.input(path);
    let net = io::read_network(path)?;
    let report = net.check_water_balance(1e-6);
    if !report.is_balanced() {
        log::warn!(
            "water balance off by more than 1e-6 (relative) in {} catchments, first `{}`",
            report.flagged.len(),
            report.flagged[0]
        );
    }
    Ok(net)
}

fn load_design(cfg: &RunConfig, net: &Network, art: &mut Artifacts) -> Result<SourceDesign<f64>> {
    Ok(match cfg.model() {
        ModelKind::SingleSource => SourceDesign::single_source(net)?,
        ModelKind::TwoSource => {
            let path = required(&cfg.groundwater, "groundwater")?;
            art.input(path);
            let cg = io::read_groundwater_conc(path, net)?;
            SourceDesign::two_source(net, &cg)?
        }
        ModelKind::Custom => {
            let path = required(&cfg.design, "design")?;
            art.input(path);
            io::read_design(path, net)?
        }
    })
}

fn load_model(cfg: &RunConfig, art: &mut Artifacts) -> Result<Model> {
    let net = load_network(cfg, art)?;
    let path = required(&cfg.measurements, "measurements")?;
    art.input(path);
    let data = io::read_measurements(path, &net)?;
    let design = load_design(cfg, &net, art)?;
    Ok(Model { net, data, design })
}

fn read_fit(path: &Path) -> Result<FitResult<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read fit {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{}: not a fit result", path.display()))
}

#[derive(Serialize)]
struct ParameterTable<'a> {
    parameters: &'a [catchflux::laplace::ParameterEstimate<f64>],
    n_measurements: usize,
    n_sampled: usize,
    marginal_nll: f64,
    converged: bool,
}

fn parameter_table(fit: &FitResult<f64>) -> ParameterTable<'_> {
    ParameterTable {
        parameters: &fit.parameters,
        n_measurements: fit.n_measurements,
        n_sampled: fit.sampled.iter().filter(|&&s| s).count(),
        marginal_nll: fit.marginal_nll,
        converged: fit.converged,
    }
}

fn fit_log(fit: &FitResult<f64>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "converged: {}", fit.converged);
    let _ = writeln!(s, "gradient_norm: {:e}", fit.gradient_norm);
    let _ = writeln!(s, "marginal_nll: {}", fit.marginal_nll);
    let _ = writeln!(
        s,
        "iterations: outer {} inner {} evaluations {}",
        fit.iterations.outer, fit.iterations.inner, fit.iterations.marginal_evaluations
    );
    for w in &fit.warnings {
        let _ = writeln!(s, "warning: {}", serde_json::to_string(w).unwrap_or_default());
    }
    s
}

fn write_fit_outputs(fit: &FitResult<f64>, out: &Path, art: &mut Artifacts) -> Result<()> {
    io::write_json(&art.output(out.join("fit.json")), fit)?;
    io::write_json(&art.output(out.join("parameters.json")), &parameter_table(fit))?;
    let rows: Vec<io::LatentRow> = (0..fit.catchment_ids.len())
        .map(|i| io::LatentRow {
            catchment_id: fit.catchment_ids[i].clone(),
            eps_hat: fit.latent_hat.eps[i],
            eps_sd: fit.latent_sd.eps[i],
            sampled: fit.sampled[i] as u8,
        })
        .collect();
    io::write_latent(&art.output(out.join("latent.csv")), &rows)?;
    io::write_year_effects(&art.output(out.join("year_effects.csv")), &year_effects(fit))?;
    let log_path = art.output(out.join("fit.log"));
    fs::write(&log_path, fit_log(fit)).with_context(|| format!("cannot write {}", log_path.display()))?;
    Ok(())
}

pub fn fit(cfg: &RunConfig) -> Result<Outcome> {
    let mut art = Artifacts::default();
    let m = load_model(cfg, &mut art)?;
    let out = cfg.out_dir();
    let result = fit_model(&m.data, &m.net, &m.design, &cfg.fit_config())?;
    write_fit_outputs(&result, &out, &mut art)?;
    art.write_manifest(&out, "fit", cfg)?;
    Ok(Outcome::from_converged(result.converged))
}

#[derive(Serialize)]
struct BudgetReport {
    #[serde(flatten)]
    budget: catchflux::predict::MassBudget<f64>,
    marine_export_kg_per_day: f64,
    total_retained_kg_per_day: f64,
    total_input_kg_per_day: f64,
}

pub fn predict(cfg: &RunConfig) -> Result<Outcome> {
    let mut art = Artifacts::default();
    let out = cfg.out_dir();
    let (net, design, result) = match &cfg.fit_result {
        Some(path) => {
            if !path.exists() {
                bail!("input file {} (--fit) does not exist", path.display());
            }
            art.input(path);
            let net = load_network(cfg, &mut art)?;
            let design = load_design(cfg, &net, &mut art)?;
            let result = read_fit(path)?;
            (net, design, result)
        }
        None => {
            let m = load_model(cfg, &mut art)?;
            let result = fit_model(&m.data, &m.net, &m.design, &cfg.fit_config())?;
            (m.net, m.design, result)
        }
    };
    if result.factor_names != design.factor_names() {
        bail!(
            "fit was made with source factors {:?} but the design has {:?}",
            result.factor_names,
            design.factor_names()
        );
    }
    let preds = predict_all(&result, &net, &design)?;
    io::write_predictions(&art.output(out.join("predictions.csv")), &preds)?;
    let budget = mass_budget(&result, &net, &design)?;
    let report = BudgetReport {
        marine_export_kg_per_day: budget.marine_export * KG_PER_DAY,
        total_retained_kg_per_day: budget.total_retained * KG_PER_DAY,
        total_input_kg_per_day: budget.total_input * KG_PER_DAY,
        budget,
    };
    io::write_json(&art.output(out.join("budget.json")), &report)?;
    io::write_year_effects(&art.output(out.join("year_effects.csv")), &year_effects(&result))?;
    art.write_manifest(&out, "predict", cfg)?;
    Ok(Outcome::from_converged(result.converged))
}

pub fn cv(cfg: &RunConfig) -> Result<Outcome> {
    let mut art = Artifacts::default();
    let m = load_model(cfg, &mut art)?;
    let out = cfg.out_dir();
    let sampled: Vec<String> = m.data.sampled().iter().map(|&i| m.net.id(i).to_string()).collect();
    let plan = make_folds(&sampled, cfg.folds.unwrap_or(10), cfg.seed())?;
    let result = run_cv(&m.data, &m.net, &m.design, &plan, &cfg.fit_config())?;
    io::write_cv_pairs(&art.output(out.join("cv_pairs.csv")), &result.pairs)?;
    io::write_json(&art.output(out.join("cv_summary.json")), &result)?;
    art.write_manifest(&out, "cv", cfg)?;
    let ok = result.full_fit_converged && result.folds.iter().all(|f| f.converged);
    Ok(Outcome::from_converged(ok))
}

pub fn simulate(cfg: &RunConfig) -> Result<Outcome> {
    let mut cfg = cfg.clone();
    let mut spec = cfg.synth.clone().unwrap_or_default();
    if let Some(seed) = cfg.seed {
        spec.seed = seed;
    }
    match cfg.model() {
        ModelKind::TwoSource => {
            if spec.template == SourceTemplate::SingleSource {
                spec.template = SourceTemplate::TwoSource {
                    cg_median: 3.0,
                    cg_log_sd: 1.0,
                };
            }
            if spec.true_params.n_factors() == 0 {
                spec.true_params = ParameterSet::from_natural(0.5, &[1.0], 30.0, 0.4, 0.3, 0.1);
            }
        }
        ModelKind::SingleSource => {}
        ModelKind::Custom => bail!("simulate supports the single-source and two-source models only"),
    }
    cfg.synth = Some(spec.clone());

    let mut art = Artifacts::default();
    let out = cfg.out_dir();
    let world = generate::<f64>(&spec)?;
    let sim = simulate_measurements(&world, &spec)?;
    io::write_network(&art.output(out.join("network.csv")), &world.net)?;
    io::write_measurements(&art.output(out.join("measurements.csv")), &sim.data)?;
    let truth: Vec<io::TruthRow> = (0..world.net.len())
        .map(|i| io::TruthRow {
            catchment_id: world.net.id(i).to_string(),
            eps: world.eps[i],
            lc_true: world.truth_lc[i],
            cg: world.groundwater_conc.as_ref().and_then(|g| g[i]),
        })
        .collect();
    io::write_truth(&art.output(out.join("truth.csv")), &truth)?;
    if let Some(cg) = &world.groundwater_conc {
        let path = art.output(out.join("groundwater.csv"));
        let mut text = String::from("catchment_id,cg\n");
        for (i, v) in cg.iter().enumerate() {
            match v {
                Some(v) => writeln!(text, "{},{}", world.net.id(i), v)?,
                None => writeln!(text, "{},", world.net.id(i))?,
            }
        }
        fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
    }
    io::write_json(&art.output(out.join("spec.json")), &spec)?;
    art.write_manifest(&out, "simulate", &cfg)?;
    Ok(Outcome::Done)
}

#[derive(Serialize)]
struct GwSummary<'a> {
    n_gvf: usize,
    n_catchments: usize,
    method_counts: &'a std::collections::BTreeMap<Method, usize>,
    aquifer_medians: &'a std::collections::BTreeMap<String, f64>,
    note: &'a str,
}

pub fn gw_ingest(cfg: &RunConfig) -> Result<Outcome> {
    let mut art = Artifacts::default();
    let out = cfg.out_dir();
    let screens_path = required(&cfg.screens, "screens")?;
    let gvf_path = required(&cfg.gvf, "gvf")?;
    let intersect_path = required(&cfg.intersect, "intersect")?;
    art.input(screens_path);
    art.input(gvf_path);
    art.input(intersect_path);
    let screens = io::read_screens(screens_path)?;
    let gvfs = io::read_gvfs(gvf_path)?;
    let intersect = io::read_pairs(intersect_path)?;
    let links = match &cfg.links {
        Some(_) => {
            let p = required(&cfg.links, "links")?;
            art.input(p);
            io::read_pairs(p)?
        }
        None => Vec::new(),
    };
    let catchments: Vec<String> = match &cfg.network {
        Some(_) => load_network(cfg, &mut art)?
            .catchments()
            .iter()
            .map(|c| c.id.clone())
            .collect(),
        None => intersect
            .iter()
            .map(|(c, _)| c.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    let field = match cfg.ph_resolution {
        Some(res) => Some(idw_ph(GridSpec::covering(&screens, res)?, &screens)?),
        None => None,
    };
    let report = run_pipeline(&screens, &gvfs, &links, &intersect, &catchments, field.as_ref())?;
    io::write_gw_catchments(&art.output(out.join("gw_catchment.csv")), &report.catchments)?;
    io::write_gvf_typical(&art.output(out.join("gvf_typical.csv")), &report.gvf)?;
    let summary = GwSummary {
        n_gvf: report.gvf.len(),
        n_catchments: report.catchments.len(),
        method_counts: &report.method_counts,
        aquifer_medians: &report.aquifer_medians,
        note: &report.note,
    };
    io::write_json(&art.output(out.join("gw_summary.json")), &summary)?;
    art.write_manifest(&out, "gw-ingest", cfg)?;
    Ok(Outcome::Done)
}

#[derive(Serialize)]
struct Comparison {
    sigma_p: f64,
    sigma_p_compare: f64,
    /// `sqrt(sigma_p² - sigma_p_compare²)`, absent when negative.
    explained_sd: Option<f64>,
    marginal_nll_difference: f64,
}

#[derive(Serialize)]
struct Report<'a> {
    #[serde(flatten)]
    table: ParameterTable<'a>,
    gradient_norm: f64,
    year_effects: Vec<catchflux::predict::YearEffect<f64>>,
    comparison: Option<Comparison>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

pub fn report(cfg: &RunConfig) -> Result<Outcome> {
    let mut art = Artifacts::default();
    let out = cfg.out_dir();
    let path = required(&cfg.fit_result, "fit")?;
    art.input(path);
    let fit = read_fit(path)?;
    let comparison = match &cfg.compare {
        Some(_) => {
            let p = required(&cfg.compare, "compare")?;
            art.input(p);
            let other = read_fit(p)?;
            let (s1, s2) = (fit.params_hat.sigmap(), other.params_hat.sigmap());
            Some(Comparison {
                sigma_p: s1,
                sigma_p_compare: s2,
                explained_sd: variance_decomposition(s1, s2).ok(),
                marginal_nll_difference: fit.marginal_nll - other.marginal_nll,
            })
        }
        None => None,
    };

    let mut text = String::new();
    writeln!(text, "{:<12} {:>12} {:>12} {:>10}", "parameter", "estimate", "se", "t-factor")?;
    for p in &fit.parameters {
        let flag = match (p.at_bound, p.derived) {
            (true, _) => " (at bound)",
            (_, true) => " (derived)",
            _ => "",
        };
        writeln!(
            text,
            "{:<12} {:>12.4} {:>12} {:>10}{}",
            p.name,
            p.estimate,
            fmt_opt(p.se),
            fmt_opt(p.tfactor),
            flag
        )?;
    }
    writeln!(text)?;
    writeln!(text, "measurements: {}", fit.n_measurements)?;
    writeln!(text, "sampled catchments: {}", fit.sampled.iter().filter(|&&s| s).count())?;
    writeln!(text, "marginal nll: {:.4}", fit.marginal_nll)?;
    writeln!(text, "converged: {}", fit.converged)?;
    if let Some(c) = &comparison {
        writeln!(text, "sigma_p: {:.4} vs {:.4}", c.sigma_p, c.sigma_p_compare)?;
        writeln!(text, "explained sd: {}", fmt_opt(c.explained_sd))?;
    }

    let report = Report {
        table: parameter_table(&fit),
        gradient_norm: fit.gradient_norm,
        year_effects: year_effects(&fit),
        comparison,
    };
    io::write_json(&art.output(out.join("report.json")), &report)?;
    let txt = art.output(out.join("report.txt"));
    fs::write(&txt, text).with_context(|| format!("cannot write {}", txt.display()))?;
    art.write_manifest(&out, "report", cfg)?;
    Ok(Outcome::Done)
}
