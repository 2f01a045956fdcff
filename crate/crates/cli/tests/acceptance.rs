//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to
//! stderr (bypassing the harness capture) and then asserts the outcome.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use catchflux::crossval::{make_folds, run_cv, CvResult};
use catchflux::gwsource::{ph_class, redox_from_nitrate, PhClass, Redox};
use catchflux::laplace::{fit, marginal_nll, tfactor, FitConfig};
use catchflux::likelihood::{obs_loglik, Measurement, MeasurementSet};
use catchflux::network::CatchmentNetwork;
use catchflux::predict::{mass_budget, network_budget, variance_decomposition};
use catchflux::sourcemodel::{LatentState, ParameterSet, SourceDesign};
use catchflux::synth::{
    generate, quadrature_marginal, simulate_measurements, DetectionLimit, Replicates, SourceTemplate, SynthSpec,
    SynthWorld,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(criterion: u32, title: &str, pass: bool, detail: &str) {
    let line = format!(
        "{} criterion {criterion:>2} ({title}): {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut err = std::io::stderr().lock();
    let _ = err.write_all(line.as_bytes());
    let _ = err.flush();
}

fn world_and_data(spec: &SynthSpec) -> (SynthWorld<f64>, MeasurementSet<f64>) {
    let world = generate::<f64>(spec).unwrap();
    let sim = simulate_measurements(&world, spec).unwrap();
    (world, sim.data)
}

// ---------------------------------------------------------------- 1

#[test]
fn c01_laplace_matches_quadrature() {
    const TOL_MIXED: f64 = 1e-3;
    const TOL_GAUSS: f64 = 1e-8;
    const NODES: usize = 40;
    let start = Instant::now();

    // (catchments, years); latent dimension = sum, at most 5.
    let shapes = [(1, 1), (2, 1), (3, 1), (1, 2), (2, 2), (1, 1), (2, 1), (3, 1), (1, 2), (3, 2)];
    let mut mixed = Vec::new();
    let mut seed = 0u64;
    for &(n, years) in &shapes {
        // Take the next seed whose data mix detected and censored values.
        loop {
            seed += 1;
            let spec = SynthSpec {
                n_catchments: n,
                branching: 0.7,
                sampled_fraction: 1.0,
                years: (2015..2015 + years).collect(),
                replicates: Replicates::Fixed { count: 5 },
                detection_limit: DetectionLimit::LogUniform { lo: 0.3, hi: 1.5 },
                seed,
                ..SynthSpec::default()
            };
            let (world, data) = world_and_data(&spec);
            if data.n_censored() == 0 || data.n_censored() == data.len() {
                continue;
            }
            let p = &spec.true_params;
            let lap = marginal_nll(p, &data, &world.net, &world.design).unwrap();
            let quad = quadrature_marginal(p, &data, &world.net, &world.design, NODES).unwrap();
            let desc = format!("{n} catchment(s) x {years} year(s), {}/{} censored", data.n_censored(), data.len());
            mixed.push((((lap - quad) / quad).abs(), desc));
            break;
        }
    }

    let mut gauss = Vec::new();
    for (k, &(n, years)) in [(1, 1), (2, 2), (3, 2)].iter().enumerate() {
        let spec = SynthSpec {
            n_catchments: n,
            branching: 0.0,
            sampled_fraction: 1.0,
            years: (2015..2015 + years).collect(),
            replicates: Replicates::Fixed { count: 2 },
            detection_limit: DetectionLimit::Fixed { value: 1e-9 },
            seed: 500 + k as u64,
            ..SynthSpec::default()
        };
        let (world, data) = world_and_data(&spec);
        assert_eq!(data.n_censored(), 0);
        let p = &spec.true_params;
        let lap = marginal_nll(p, &data, &world.net, &world.design).unwrap();
        let quad = quadrature_marginal(p, &data, &world.net, &world.design, NODES).unwrap();
        gauss.push(((lap - quad) / quad).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    let (worst_mixed, worst_desc) = mixed
        .iter()
        .cloned()
        .fold((0.0, String::new()), |a, b| if b.0 > a.0 { b } else { a });
    let worst_gauss = gauss.iter().copied().fold(0.0, f64::max);
    let pass = mixed.len() >= 10 && worst_mixed <= TOL_MIXED && worst_gauss <= TOL_GAUSS && secs < 10.0;
    report(
        1,
        "Laplace vs Gauss-Hermite",
        pass,
        &format!(
            "{} mixed instances, max rel gap {worst_mixed:.2e} at {worst_desc} (tol {TOL_MIXED:.0e}); {} Gaussian, max {worst_gauss:.2e} (tol {TOL_GAUSS:.0e}); {secs:.1} s (limit 10 s)",
            mixed.len(),
            gauss.len()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 2

#[test]
fn c02_mass_conservation() {
    const TOL: f64 = 1e-10;
    let mut worst: f64 = 0.0;
    let mut source_gap: f64 = 0.0;
    let mut checked = 0;
    let templates = [
        (SourceTemplate::SingleSource, ParameterSet::from_natural(1.5, &[], 30.0, 0.4, 0.5, 0.12)),
        (
            SourceTemplate::TwoSource {
                cg_median: 3.0,
                cg_log_sd: 1.0,
            },
            ParameterSet::from_natural(0.5, &[1.0], 30.0, 0.4, 0.3, 0.1),
        ),
    ];
    for (template, params) in templates {
        for seed in 0..3 {
            let spec = SynthSpec {
                n_catchments: 300,
                branching: 0.95,
                template: template.clone(),
                true_params: params.clone(),
                seed,
                ..SynthSpec::default()
            };
            let (world, data) = world_and_data(&spec);
            let closure = |b: &catchflux::predict::MassBudget<f64>| {
                ((b.total_input - b.marine_export - b.total_retained) / b.total_input).abs()
            };
            // simulated truth
            let truth = LatentState {
                eps: world.eps.clone(),
                delta: vec![],
            };
            let b = network_budget(&world.net, &world.design, &spec.true_params, &truth).unwrap();
            worst = worst.max(closure(&b));
            // no residuals: local inputs are exactly the modelled sources
            let zero = LatentState::zeros(world.net.len(), 0);
            let b = network_budget(&world.net, &world.design, &spec.true_params, &zero).unwrap();
            let p = &spec.true_params;
            let sources: f64 = (0..world.net.len())
                .map(|i| p.beta0() * world.design.scaled_source(p, i))
                .sum();
            worst = worst.max(closure(&b));
            source_gap = source_gap.max(((b.total_input - sources) / sources).abs());
            // fitted
            let r = fit(&data, &world.net, &world.design, &FitConfig::default()).unwrap();
            let b = mass_budget(&r, &world.net, &world.design).unwrap();
            worst = worst.max(closure(&b));
            checked += 3;
        }
    }
    let pass = worst <= TOL && source_gap <= TOL;
    report(
        2,
        "mass conservation",
        pass,
        &format!(
            "{checked} budgets, max |input - export - retained| / input = {worst:.1e}; input vs summed sources {source_gap:.1e} (tol {TOL:.0e})"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 3

#[test]
fn c03_parameter_recovery() {
    const RUNS: u64 = 20;
    const NEED: usize = 17;
    let start = Instant::now();
    let names = ["sigma_0", "sigma_p", "sigma_Y", "theta", "beta_0"];
    let mut covered = [0usize; 5];
    let mut converged = 0;
    for seed in 0..RUNS {
        let spec = SynthSpec {
            seed,
            ..SynthSpec::default()
        };
        let (world, data) = world_and_data(&spec);
        let r = fit(&data, &world.net, &world.design, &FitConfig::default()).unwrap();
        converged += r.converged as usize;
        let truth = spec.true_params.to_natural();
        for (k, name) in names.iter().enumerate() {
            let est = r.parameter(name).unwrap();
            if let Some(se) = est.se {
                if (est.estimate - truth[k]).abs() <= 2.0 * se {
                    covered[k] += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = covered.iter().all(|&c| c >= NEED) && secs < 300.0;
    let detail = names
        .iter()
        .zip(&covered)
        .map(|(n, c)| format!("{n} {c}/{RUNS}"))
        .collect::<Vec<_>>()
        .join(", ");
    report(
        3,
        "parameter recovery",
        pass,
        &format!("covered by estimate +- 2 SE: {detail} (need {NEED}); {converged}/{RUNS} converged; {secs:.1} s (limit 300 s)"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 4

#[test]
fn c04_explained_deviation() {
    let v: f64 = variance_decomposition(0.563, 0.513).unwrap();
    let pass = (v - 0.232).abs() <= 0.0005;
    report(4, "explained deviation", pass, &format!("sqrt(0.563^2 - 0.513^2) = {v:.6} (want 0.232 +- 0.0005)"));
    assert!(pass);
}

// ---------------------------------------------------------------- 5

#[test]
fn c05_tfactor() {
    let t = tfactor(35.6, 9.3).unwrap();
    let pass = format!("{t:.1}") == "3.8";
    report(5, "T-factor", pass, &format!("35.6 / 9.3 = {t:.4}, rounds to {t:.1} (want 3.8)"));
    assert!(pass);
}

// ---------------------------------------------------------------- 6

/// log of the N(mean, sd²) probability below `upper`, by composite Simpson.
fn log_integrated_density(upper: f64, mean: f64, sd: f64) -> f64 {
    let zu = (upper - mean) / sd;
    let lo = zu - 40.0;
    let n = 40_000;
    let h = (zu - lo) / n as f64;
    let f = |z: f64| (-(z * z - zu * zu) / 2.0).exp();
    let mut s = f(lo) + f(zu);
    for k in 1..n {
        s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(lo + k as f64 * h);
    }
    (s * h / 3.0).ln() - zu * zu / 2.0 - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

#[test]
fn c06_censoring() {
    const TOL: f64 = 1e-8;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mean: f64 = rng.random_range(-3.0..3.0);
        let sigma0: f64 = rng.random_range(0.05..2.0);
        let d: f64 = (mean + sigma0 * rng.random_range(-9.0..4.0)).exp();
        let got = obs_loglik(d.ln(), mean, sigma0, true).unwrap();
        let want = log_integrated_density(d.ln(), mean, sigma0);
        worst = worst.max((got - want).abs() / want.abs().max(1.0));
    }

    // Every sample censored at an enormous limit carries no information:
    // the marginal reduces to the prior, whose integral is one.
    let spec = SynthSpec {
        n_catchments: 40,
        seed: 3,
        ..SynthSpec::default()
    };
    let world = generate::<f64>(&spec).unwrap();
    let sim = simulate_measurements(&world, &spec).unwrap();
    let censored: Vec<Measurement<f64>> = sim
        .data
        .measurements()
        .iter()
        .map(|m| Measurement::below_limit(m.catchment.clone(), m.year, 1e6))
        .collect();
    let data = MeasurementSet::new(&world.net, censored).unwrap();
    let p = spec.true_params.clone();
    let nll = marginal_nll(&p, &data, &world.net, &world.design).unwrap();
    let u = p.to_internal();
    let h = 1e-4;
    let grad: Vec<f64> = (0..3)
        .map(|k| {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[k] += h;
            dn[k] -= h;
            let f = |v: &[f64]| marginal_nll(&ParameterSet::from_internal(v), &data, &world.net, &world.design).unwrap();
            (f(&up) - f(&dn)) / (2.0 * h)
        })
        .collect();
    let gmax = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    let pass = worst <= TOL && nll.abs() <= 1e-8 && gmax <= 1e-6;
    report(
        6,
        "censoring",
        pass,
        &format!(
            "20 cases, max rel error vs integrated density {worst:.1e} (tol {TOL:.0e}); all-censored: nll {nll:.1e}, max |d nll / d log sigma| {gmax:.1e}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 7

fn isolated_from_other_sampled(net: &CatchmentNetwork<f64>, sampled: &[bool], i: usize) -> bool {
    net.upstream_closure(i)
        .into_iter()
        .chain(net.downstream_path(i))
        .all(|j| !sampled[j])
}

#[test]
fn c07_upper_bound_of_held_out_predictions() {
    const SLACK: f64 = 1e-6;
    let mut eligible = 0;
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    for seed in [11u64, 12] {
        let spec = SynthSpec {
            seed,
            ..SynthSpec::default()
        };
        let (world, data) = world_and_data(&spec);
        let sampled_mask = data.sampled_mask();
        let ids: Vec<String> = data.sampled().iter().map(|&i| world.net.id(i).to_string()).collect();
        let plan = make_folds(&ids, 10, seed).unwrap();
        let cv: CvResult<f64> = run_cv(&data, &world.net, &world.design, &plan, &FitConfig::default()).unwrap();
        for pair in &cv.pairs {
            let i = world.net.index_of(&pair.catchment).unwrap();
            if !isolated_from_other_sampled(&world.net, &sampled_mask, i) {
                continue;
            }
            let Some(b0) = cv.folds[pair.fold].beta0_hat else { continue };
            eligible += 1;
            let excess = pair.lc_without - b0.ln();
            worst = worst.max(excess);
            if excess > SLACK {
                violations += 1;
            }
        }
    }
    let pass = eligible > 0 && violations == 0;
    report(
        7,
        "held-out upper bound",
        pass,
        &format!("{eligible} eligible held-out catchments, {violations} above log beta0_hat + {SLACK:.0e}; max lc_without - log beta0_hat = {worst:.3}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 8

#[test]
fn c08_two_source_improves_cv() {
    const SEEDS: u64 = 10;
    const NEED: usize = 8;
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..SEEDS {
        let spec = SynthSpec {
            template: SourceTemplate::TwoSource {
                cg_median: 3.0,
                cg_log_sd: 1.0,
            },
            true_params: ParameterSet::from_natural(0.5, &[1.0], 30.0, 0.4, 0.3, 0.1),
            seed: 100 + seed,
            ..SynthSpec::default()
        };
        let (world, data) = world_and_data(&spec);
        let single = SourceDesign::single_source(&world.net).unwrap();
        let ids: Vec<String> = data.sampled().iter().map(|&i| world.net.id(i).to_string()).collect();
        let plan = make_folds(&ids, 10, seed).unwrap();
        let cfg = FitConfig::default();
        let r1 = run_cv(&data, &world.net, &single, &plan, &cfg).unwrap().r2.unwrap_or(0.0);
        let r2 = run_cv(&data, &world.net, &world.design, &plan, &cfg).unwrap().r2.unwrap_or(0.0);
        if r2 > r1 {
            wins += 1;
        }
        rows.push(format!("{r1:.2}->{r2:.2}"));
    }
    let pass = wins >= NEED;
    report(
        8,
        "two-source CV improvement",
        pass,
        &format!("two-source r2 higher in {wins}/{SEEDS} seeds (need {NEED}); single->two: {}", rows.join(" ")),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 9

#[test]
fn c09_runtime_at_full_scale() {
    const LIMIT: f64 = 60.0;
    let spec = SynthSpec {
        n_catchments: 3350,
        branching: 0.9,
        sampled_fraction: 532.0 / 3350.0,
        years: vec![2013, 2014, 2015, 2016],
        replicates: Replicates::Poisson { mean: 6000.0 / (532.0 * 4.0) },
        seed: 1,
        ..SynthSpec::default()
    };
    let (world, data) = world_and_data(&spec);
    let start = Instant::now();
    let r = fit(&data, &world.net, &world.design, &FitConfig::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let shape_ok = data.sampled().len() == 532 && (5700..=6300).contains(&data.len());
    let pass = shape_ok && secs <= LIMIT;
    report(
        9,
        "runtime",
        pass,
        &format!(
            "{} catchments, {} sampled, {} measurements: fit in {secs:.1} s on {} thread(s) (limit {LIMIT} s), converged {}",
            world.net.len(),
            data.sampled().len(),
            data.len(),
            rayon::current_num_threads(),
            r.converged
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 10

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn read_csv(path: &Path) -> Vec<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(str::to_string).collect();
    lines
        .map(|l| header.iter().cloned().zip(l.split(',').map(str::to_string)).collect())
        .collect()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_catchflux"))
}

#[test]
fn c10_groundwater_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // nitrate 2 -> reduced, pH 6 -> low, pH 7 -> neutral; G1 has three
    // linked screens (own median), G2 two (aquifer-type median).
    let screens = write(
        d,
        "screens.csv",
        "id,x,y,mam_ni,nitrate,ph,gvf_id,nbl_unit\n\
         s1,0,0,2,1.0,6.5,G1,u1\n\
         s2,1,0,4,1.0,6.5,G1,u1\n\
         s3,2,0,10,1.0,6.5,,u1\n\
         s4,3,0,3,2.0,6.0,G2,u1\n\
         s5,4,0,5,2.0,6.0,G2,u1\n\
         s8,5,0,9,0.5,5.5,,u1\n\
         s6,6,0,8,10,7.0,,u1\n\
         s7,7,0,20,10,7.5,,u1\n",
    );
    let gvf = write(
        d,
        "gvf.csv",
        "id,ox_percent,ph_median,nbl_unit,surface_contact,xmin,ymin,xmax,ymax\n\
         G1,10,6.5,u1,1,,,,\n\
         G2,50,6.0,u1,1,,,,\n\
         G3,80,7.0,u1,1,,,,\n\
         G4,80,7.2,u2,1,,,,\n\
         G5,10,6.5,u1,0,,,,\n",
    );
    let links = write(d, "links.csv", "screen_id,gvf_id\ns3,G1\n");
    let intersect = write(
        d,
        "intersect.csv",
        "catchment_id,gvf_id\nC1,G1\nC2,G2\nC2,G3\nC3,G1\nC3,G3\nC4,G4\nC5,G1\nC5,G4\nC6,G5\nC7,G9\n",
    );
    let out = d.join("out");
    let status = bin()
        .args(["gw-ingest", "--out"])
        .arg(&out)
        .arg("--screens")
        .arg(&screens)
        .arg("--gvf")
        .arg(&gvf)
        .arg("--links")
        .arg(&links)
        .arg("--intersect")
        .arg(&intersect)
        .status()
        .unwrap();
    assert!(status.success());

    let rows = read_csv(&out.join("gw_catchment.csv"));
    let got: BTreeMap<String, (String, String, String)> = rows
        .iter()
        .map(|r| {
            (
                r["catchment_id"].clone(),
                (r["cg"].clone(), r["method"].clone(), r["uncertainty"].clone()),
            )
        })
        .collect();
    let want = [
        ("C1", "4.0", "Estimated", "High certainty"),
        ("C2", "6.5", "Modelled", "Low certainty"),
        ("C3", "6.0", "Mix", "Moderate certainty"),
        ("C4", "", "NA", "Unknown"),
        ("C5", "4.0", "Estimated", "High certainty"),
        ("C6", "", "NA", "Unknown"),
        ("C7", "", "NA", "Unknown"),
    ];
    let mut mismatches = Vec::new();
    for (c, cg, m, u) in want {
        let expected = (cg.to_string(), m.to_string(), u.to_string());
        if got.get(c) != Some(&expected) {
            mismatches.push(format!("{c}: got {:?}", got.get(c)));
        }
    }
    let gv = read_csv(&out.join("gvf_typical.csv"));
    let g = |id: &str| gv.iter().find(|r| r["gvf_id"] == id).unwrap().clone();
    let gvf_ok = g("G1")["ni"] == "4.0"
        && g("G1")["n_screens"] == "3"
        && g("G2")["ni"] == "5.0"
        && g("G2")["method"] == "Modelled"
        && g("G2")["n_screens"] == "2"
        && g("G4")["method"] == "NA";
    let rules_ok = redox_from_nitrate(2.0) == Redox::Reduced
        && redox_from_nitrate(2.01) == Redox::Oxic
        && ph_class(6.0) == PhClass::Low
        && ph_class(7.0) == PhClass::Neutral
        && ph_class(7.01) == PhClass::High;
    let pass = mismatches.is_empty() && gvf_ok && rules_ok;
    report(
        10,
        "groundwater pipeline",
        pass,
        &format!(
            "{} catchments checked, mismatches {:?}; gvf medians/counts ok {gvf_ok}; boundary rules ok {rules_ok}",
            want.len(),
            mismatches
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 11

fn run_ok(args: &[&str], extra: &[&Path]) -> std::process::Output {
    let mut cmd = bin();
    cmd.args(args);
    for p in extra {
        cmd.arg(p);
    }
    let out = cmd.output().unwrap();
    assert!(
        out.status.code() == Some(0) || out.status.code() == Some(2),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn c11_cli_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let sim_spec = write(
        root,
        "spec.json",
        r#"{"n_catchments": 60, "sampled_fraction": 0.4, "years": [2015, 2016, 2017]}"#,
    );
    let gw_dir = root.join("gw_inputs");
    fs::create_dir_all(&gw_dir).unwrap();
    let screens = write(
        &gw_dir,
        "screens.csv",
        "id,x,y,mam_ni,nitrate,ph,gvf_id,nbl_unit\na,0,0,2,1,6.5,G1,u\nb,10,0,3,1,6.8,G1,u\nc,0,10,5,1,6.6,G1,u\nd,10,10,1,5,7.4,,u\n",
    );
    let gvf = write(
        &gw_dir,
        "gvf.csv",
        "id,ox_percent,ph_median,nbl_unit,surface_contact,xmin,ymin,xmax,ymax\nG1,10,,u,1,0,0,6,6\nG2,90,7.5,u,1,,,,\n",
    );
    let intersect = write(&gw_dir, "intersect.csv", "catchment_id,gvf_id\nA,G1\nB,G2\nB,G1\n");

    let mut mismatched = Vec::new();
    let mut compared = 0;
    let mut rerun_ok = true;
    for threads in ["1", "2"] {
        let base = root.join(format!("t{threads}"));
        let d = |name: &str| base.join(name);
        let sim = d("sim");
        run_ok(&["simulate", "--seed", "7", "--threads", threads, "--spec"], &[&sim_spec, Path::new("--out"), &sim]);
        let net = sim.join("network.csv");
        let meas = sim.join("measurements.csv");
        let fit_dir = d("fit");
        run_ok(
            &["fit", "--seed", "7", "--threads", threads, "--out"],
            &[&fit_dir, Path::new("--network"), &net, Path::new("--measurements"), &meas],
        );
        run_ok(
            &["predict", "--threads", threads, "--out"],
            &[&d("predict"), Path::new("--network"), &net, Path::new("--fit"), &fit_dir.join("fit.json")],
        );
        run_ok(
            &["cv", "--seed", "7", "--folds", "4", "--threads", threads, "--out"],
            &[&d("cv"), Path::new("--network"), &net, Path::new("--measurements"), &meas],
        );
        run_ok(
            &["report", "--threads", threads, "--out"],
            &[&d("report"), Path::new("--fit"), &fit_dir.join("fit.json")],
        );
        run_ok(
            &["gw-ingest", "--threads", threads, "--ph-resolution", "2", "--out"],
            &[&d("gw"), Path::new("--screens"), &screens, Path::new("--gvf"), &gvf, Path::new("--intersect"), &intersect],
        );
        // A rerun from the echoed config reproduces the fit byte for byte.
        let again = d("fit_again");
        run_ok(
            &["fit", "--threads", threads, "--config"],
            &[&fit_dir.join("manifest.json"), Path::new("--out"), &again],
        );
        rerun_ok &= dir_bytes(&fit_dir) == dir_bytes(&again);
    }
    let t1 = root.join("t1");
    let t2 = root.join("t2");
    for sub in ["sim", "fit", "predict", "cv", "report", "gw"] {
        let a = dir_bytes(&t1.join(sub));
        let b = dir_bytes(&t2.join(sub));
        for (name, bytes) in &a {
            compared += 1;
            let Some(other) = b.get(name) else {
                mismatched.push(format!("{sub}/{name} missing"));
                continue;
            };
            // Manifests name their inputs by path, so map the second run
            // directory onto the first before comparing.
            let other = if name == "manifest.json" {
                String::from_utf8(other.clone())
                    .unwrap()
                    .replace(t2.to_str().unwrap(), t1.to_str().unwrap())
                    .into_bytes()
            } else {
                other.clone()
            };
            if &other != bytes {
                mismatched.push(format!("{sub}/{name}"));
            }
        }
        if a.len() != b.len() {
            mismatched.push(format!("{sub}: file sets differ"));
        }
    }
    let pass = mismatched.is_empty() && rerun_ok && compared > 0;
    report(
        11,
        "determinism",
        pass,
        &format!("{compared} artifacts compared across --threads 1/2, differing: {mismatched:?}; rerun from manifest identical: {rerun_ok}"),
    );
    assert!(pass);
}
