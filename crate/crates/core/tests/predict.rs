use catchflux::laplace::{fit, FitConfig};
use catchflux::predict::{mass_budget, network_budget, predict_all, variance_decomposition, year_effects, PredictError};
use catchflux::sourcemodel::{LatentState, ParameterSet};
use catchflux::synth::{generate, simulate_measurements, SourceTemplate, SynthSpec};

#[test]
fn explained_deviation_arithmetic() {
    let v: f64 = variance_decomposition(0.563, 0.513).unwrap();
    assert!((v - 0.231_948_270_094_863_95).abs() < 1e-12);
    assert_eq!(variance_decomposition(0.5, 0.5).unwrap(), 0.0);
    assert!(matches!(
        variance_decomposition(0.4, 0.5),
        Err(PredictError::NegativeExplainedVariance { .. })
    ));
    assert_eq!(variance_decomposition(f64::NAN, 0.1), Err(PredictError::InvalidDeviation));
}

fn two_source_world(seed: u64) -> (SynthSpec, catchflux::synth::SynthWorld<f64>) {
    let spec = SynthSpec {
        n_catchments: 120,
        branching: 0.9,
        template: SourceTemplate::TwoSource {
            cg_median: 3.0,
            cg_log_sd: 1.0,
        },
        true_params: ParameterSet::from_natural(0.5, &[1.0], 30.0, 0.4, 0.3, 0.1),
        seed,
        ..SynthSpec::default()
    };
    let world = generate::<f64>(&spec).unwrap();
    (spec, world)
}

#[test]
fn budget_without_residuals_matches_source_sum() {
    // With every residual at zero, the mass entering each catchment locally
    // is exactly beta0 * S_i, so the network input is the summed sources.
    let (spec, world) = two_source_world(5);
    let p = &spec.true_params;
    let zero = LatentState::zeros(world.net.len(), 0);
    let b = network_budget(&world.net, &world.design, p, &zero).unwrap();
    let sources: f64 = (0..world.net.len())
        .map(|i| p.beta0() * world.design.scaled_source(p, i))
        .sum();
    assert!(((b.total_input - sources) / sources).abs() < 1e-10);
    let split: f64 = b.per_source_input.iter().sum();
    assert!(((split - sources) / sources).abs() < 1e-12);
    assert_eq!(b.source_names.len(), 2);
    assert!(((b.total_input - b.marine_export - b.total_retained) / b.total_input).abs() < 1e-10);
    assert!(b.closure_residual.abs() < 1e-10);
    assert_eq!(b.kg_per_day_factor, 1e-6);

    // With the true residuals the identity still closes.
    let truth = LatentState {
        eps: world.eps.clone(),
        delta: vec![],
    };
    let b = network_budget(&world.net, &world.design, p, &truth).unwrap();
    assert!(((b.total_input - b.marine_export - b.total_retained) / b.total_input).abs() < 1e-10);
}

#[test]
fn predictions_and_year_effects_from_a_fit() {
    let (spec, world) = two_source_world(8);
    let sim = simulate_measurements(&world, &spec).unwrap();
    let r = fit(&sim.data, &world.net, &world.design, &FitConfig::default()).unwrap();
    let preds = predict_all(&r, &world.net, &world.design).unwrap();
    assert_eq!(preds.len(), world.net.len());
    for (i, p) in preds.iter().enumerate() {
        assert_eq!(p.catchment, world.net.id(i));
        assert!((p.c_hat - p.lc_hat.exp()).abs() < 1e-12 * p.c_hat);
        let c = world.net.catchment(i);
        assert!((p.outflow_mass - p.c_hat * c.q_total).abs() < 1e-9 * p.outflow_mass);
        assert!((p.retained_mass - r.params_hat.theta() * c.area * p.c_hat).abs() <= 1e-9 * p.retained_mass.max(1.0));
        assert!(p.sd_lc > 0.0);
    }
    let b = mass_budget(&r, &world.net, &world.design).unwrap();
    assert!(b.closure_residual.abs() < 1e-10);
    let export: f64 = preds
        .iter()
        .enumerate()
        .filter(|(i, _)| world.net.is_marine_outlet(*i))
        .map(|(_, p)| p.outflow_mass)
        .sum();
    assert!(((b.marine_export - export) / export).abs() < 1e-12);

    let ye = year_effects(&r);
    assert_eq!(ye.iter().map(|y| y.year).collect::<Vec<_>>(), spec.years);
    for y in &ye {
        let half = 1.96 * r.params_hat.sigmay();
        assert!((y.upper - y.delta - half).abs() < 1e-12);
        assert!((y.delta - y.lower - half).abs() < 1e-12);
    }
}

#[test]
fn mismatched_network_is_rejected() {
    let (spec, world) = two_source_world(2);
    let sim = simulate_measurements(&world, &spec).unwrap();
    let r = fit(&sim.data, &world.net, &world.design, &FitConfig::default()).unwrap();
    let (_, other) = two_source_world(3);
    let other_small = generate::<f64>(&SynthSpec {
        n_catchments: 10,
        ..spec.clone()
    })
    .unwrap();
    assert!(predict_all(&r, &other_small.net, &other_small.design).is_err());
    // same size, same ids: accepted (ids are positional)
    assert!(predict_all(&r, &other.net, &other.design).is_ok());
}
