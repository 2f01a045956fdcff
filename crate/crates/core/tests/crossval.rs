use catchflux::crossval::{make_folds, run_cv, CvError, CvPlan};
use catchflux::laplace::FitConfig;
use catchflux::synth::{generate, simulate_measurements, SynthSpec};

fn setup(seed: u64) -> (catchflux::synth::SynthWorld<f64>, catchflux::Measurements) {
    let spec = SynthSpec {
        n_catchments: 60,
        sampled_fraction: 0.4,
        years: vec![2015, 2016, 2017],
        seed,
        ..SynthSpec::default()
    };
    let world = generate::<f64>(&spec).unwrap();
    let sim = simulate_measurements(&world, &spec).unwrap();
    (world, sim.data)
}

fn sampled_ids(world: &catchflux::synth::SynthWorld<f64>, data: &catchflux::Measurements) -> Vec<String> {
    data.sampled().iter().map(|&i| world.net.id(i).to_string()).collect()
}

#[test]
fn every_sampled_catchment_is_held_out_once() {
    let (world, data) = setup(1);
    let ids = sampled_ids(&world, &data);
    let plan = make_folds(&ids, 5, 3).unwrap();
    let cv = run_cv(&data, &world.net, &world.design, &plan, &FitConfig::default()).unwrap();
    assert_eq!(cv.pairs.len(), ids.len());
    let mut seen: Vec<&str> = cv.pairs.iter().map(|p| p.catchment.as_str()).collect();
    seen.sort();
    let mut want: Vec<&str> = ids.iter().map(String::as_str).collect();
    want.sort();
    assert_eq!(seen, want);
    assert!(cv.full_fit_converged);
    assert!(cv.folds.iter().all(|f| f.converged && f.error.is_none()));
    for f in &cv.folds {
        assert!(f.n_measurements < data.len());
    }
    let r2 = cv.r2.unwrap();
    assert!((0.0..=1.0).contains(&r2));
}

#[test]
fn cv_is_reproducible_across_thread_counts() {
    let (world, data) = setup(2);
    let plan = make_folds(&sampled_ids(&world, &data), 4, 9).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_cv(&data, &world.net, &world.design, &plan, &FitConfig::default()).unwrap())
    };
    let a = serde_json::to_string(&run(1)).unwrap();
    let b = serde_json::to_string(&run(3)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn bad_plans_are_rejected() {
    let (world, data) = setup(3);
    let ids = sampled_ids(&world, &data);
    let cfg = FitConfig::default();
    let mut plan = make_folds(&ids, 3, 0).unwrap();
    plan.folds[0].pop();
    assert_eq!(
        run_cv(&data, &world.net, &world.design, &plan, &cfg).unwrap_err(),
        CvError::IncompletePlan
    );
    let plan = CvPlan {
        k: 2,
        seed: 0,
        folds: vec![vec!["nope".into()], ids.clone()],
    };
    assert!(matches!(
        run_cv(&data, &world.net, &world.design, &plan, &cfg),
        Err(CvError::UnknownCatchment(_))
    ));
    let mut dup = make_folds(&ids, 2, 0).unwrap();
    let first = dup.folds[0][0].clone();
    dup.folds[1].push(first);
    assert_eq!(
        run_cv(&data, &world.net, &world.design, &dup, &cfg).unwrap_err(),
        CvError::IncompletePlan
    );
}

#[test]
fn fold_assignment_depends_only_on_ids_and_seed() {
    let ids: Vec<String> = (0..23).map(|i| format!("x{i}")).collect();
    let mut shuffled = ids.clone();
    shuffled.reverse();
    assert_eq!(make_folds(&ids, 4, 5).unwrap(), make_folds(&shuffled, 4, 5).unwrap());
    assert_ne!(make_folds(&ids, 4, 5).unwrap(), make_folds(&ids, 4, 6).unwrap());
}
