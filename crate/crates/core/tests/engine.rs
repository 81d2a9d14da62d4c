use fairfed::aggregate::Strategy;
use fairfed::cli::ExperimentSpec;
use fairfed::datagen;
use fairfed::engine::{run_experiment, run_round, RunConfig, RunState};
use fairfed::localtrain::LocalConfig;
use fairfed::models::Arch;
use fairfed::numerics::Rng;
use fairfed::oracles;

const LABEL_SHIFT: &str = r#"
schema = "fairfed.experiment/1"

[data.generator]
kind = "gaussian_mixture"
classes = 2
features = 2
per_class = 500
separation = 1.0

[data.partition]
kind = "label_shift"
clients = 10
alpha = 0.1

[model]
kind = "softmax_regression"

[run]
rounds = 100

[run.local]
batch_size = 64
eta = 0.1

[strategy]
kind = "fedavg"
"#;

fn median3(mut v: [f64; 3]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[1]
}

#[test]
fn semivred_lifts_the_minority_client_under_label_shift() {
    let spec = ExperimentSpec::from_toml(LABEL_SHIFT).unwrap();
    let client1 = |strategy: Strategy| {
        median3([1u64, 2, 3].map(|seed| {
            let fed = spec.build_federation(seed).unwrap();
            let mut cfg = spec.run_config(seed);
            cfg.strategy = strategy.clone();
            run_experiment(&fed, spec.arch(), &cfg).unwrap().accuracies[0]
        }))
    };
    let fedavg = client1(Strategy::FedAvg);
    let semi = client1(Strategy::SemiVRed { beta: 1.0 });
    assert!(semi > fedavg, "client-1 accuracy: fedavg {fedavg}, semivred {semi}");
}

#[test]
fn vred_objective_decreases_with_small_steps() {
    let mut rng = Rng::new(17);
    let pool = datagen::make_gaussian_mixture(&mut rng, 4, 5, 100, 4.0).unwrap();
    let mut fed = datagen::dirichlet_partition(&mut rng, &pool, 8, 0.3, 0.5).unwrap();
    let n = fed.len() as f64;
    for c in &mut fed.clients {
        c.weight = 1.0 / n;
    }
    let arch = Arch::SoftmaxRegression { inputs: 5, classes: 4 };
    let beta = 0.2;
    let strategy = Strategy::VRed { beta };
    let cfg = RunConfig::new(strategy.clone(), LocalConfig { eta: 1e-3, ..LocalConfig::default() }, 10, 5);
    let mut state = RunState::new(&fed, arch, &cfg).unwrap();
    let mut prev = oracles::eval_objective_at(&strategy, &state.params, &fed).unwrap();
    for _ in 0..10 {
        let trace = run_round(&mut state, &fed, &cfg).unwrap();
        let beta_max = trace.beta_max.expect("equal weights report beta_max");
        assert!(beta < beta_max, "round {}: beta_max {beta_max}", trace.round);
        let next = oracles::eval_objective_at(&strategy, &state.params, &fed).unwrap();
        assert!(next < prev, "round {}: objective {prev} -> {next}", trace.round);
        prev = next;
    }
}

#[test]
fn trace_mean_loss_is_the_weighted_mean() {
    let mut rng = Rng::new(3);
    let pool = datagen::make_gaussian_mixture(&mut rng, 3, 4, 60, 2.0).unwrap();
    let fed = datagen::dirichlet_partition(&mut rng, &pool, 6, 0.5, 0.5).unwrap();
    let arch = Arch::Mlp {
        inputs: 4,
        hidden: 5,
        classes: 3,
    };
    let mut cfg = RunConfig::new(Strategy::SemiVRed { beta: 0.5 }, LocalConfig::default(), 8, 2);
    cfg.participation = 0.5;
    let out = run_experiment(&fed, arch, &cfg).unwrap();
    let p = fed.weights();
    for t in &out.traces {
        assert_eq!(t.sampled.len(), 3);
        let total: f64 = t.sampled.iter().map(|&i| p[i]).sum();
        let fbar: f64 = t.sampled.iter().zip(&t.losses).map(|(&i, f)| p[i] / total * f).sum();
        assert!((fbar - t.mean_loss).abs() < 1e-10);
    }
}
