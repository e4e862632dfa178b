use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smartensemble_core::autodiff::{Tape, Tensor};
use smartensemble_core::data::synthetic::{generate_synthetic_task, SyntheticTask, SyntheticTaskSpec};
use smartensemble_core::data::{Dataset, Split};
use smartensemble_core::ensemble::{self, AgentKind, AgentModel, AgentStats, PredictionMatrix};
use smartensemble_core::knapsack::{smoothed_knapsack_layer, KnapsackConfig, NoiseBatch};
use smartensemble_core::nn::{
    init_params, mlp_forward, MlpSpec, OptimizerKind, OutputMode, ParamSet, ParamVars,
};
use smartensemble_core::rng;
use smartensemble_core::training::{
    agent_checksum, evaluate, sweep_k, train_agent, train_selector, DatasetSource,
    ExperimentConfig, Method, SpecializationMode, Splits, TrainSettings,
};
use smartensemble_core::Error;

fn settings(epochs: usize, learning_rate: f64) -> TrainSettings {
    TrainSettings {
        epochs,
        batch_size: 64,
        optimizer: OptimizerKind::Adam,
        learning_rate,
        patience: 10,
    }
}

fn task_spec(seed: u64) -> SyntheticTaskSpec {
    SyntheticTaskSpec::new(5, 16, 0.93, 0.25, (2000, 500, 1000), seed)
}

fn config(seed: u64, k_values: Vec<usize>) -> ExperimentConfig {
    let spec = task_spec(seed);
    ExperimentConfig {
        dataset: DatasetSource::Synthetic(spec),
        classes: 5,
        features: 16,
        agents: 15,
        specialization: SpecializationMode::SinglesAndPairs,
        specialty_fraction: 0.732,
        agent_train_size: 200,
        agent_hidden: vec![32],
        agent_training: settings(1, 1e-3),
        selector_hidden: vec![32],
        selector_training: settings(15, 1e-3),
        knapsack: KnapsackConfig::new(k_values[0]),
        k_values,
        seed,
        output_dir: String::new(),
    }
}

fn splits(task: &SyntheticTask) -> Splits {
    Splits {
        train: task.train.clone(),
        valid: task.valid.clone(),
        test: task.test.clone(),
    }
}

fn no_clock() -> impl FnMut() -> f64 {
    || 0.0
}

#[test]
fn full_subset_selector_scores_exactly_like_the_unweighted_average() {
    let cfg = config(1, vec![15]);
    let task = generate_synthetic_task(&task_spec(1)).unwrap();
    let trained = train_selector(
        &cfg.selector_spec(),
        &settings(2, 1e-3),
        &cfg.knapsack_for(15),
        &task.agents,
        &task.train,
        &task.valid,
        cfg.seed,
    )
    .unwrap();
    let e2e = evaluate(Method::E2eMel, &task.agents, Some(&trained.selector), &task.test, 15, 1).unwrap();
    let ua = evaluate(Method::Ua, &task.agents, None, &task.test, 15, 1).unwrap();
    assert_eq!(e2e, ua);
}

#[test]
fn trained_selector_picks_specialists_of_the_true_class() {
    let task = generate_synthetic_task(&task_spec(2)).unwrap();
    let cfg = config(2, vec![3]);
    for k in [2, 3] {
        let trained = train_selector(
            &cfg.selector_spec(),
            &cfg.selector_training,
            &cfg.knapsack_for(k),
            &task.agents,
            &task.train,
            &task.valid,
            cfg.seed,
        )
        .unwrap();
        let masks = trained.selector.select_dataset(&task.test).unwrap();
        let hits = masks
            .iter()
            .zip(task.test.labels())
            .filter(|(m, &y)| m.selected().any(|j| task.agents[j].specialty.contains(&y)))
            .count();
        let rate = hits as f64 / masks.len() as f64;
        assert!(rate >= 0.8, "k={k}: specialty hit rate {rate}");
    }
}

/// `nll(softmax(Σ 𝕂(ĉ)∘P))` for the selector output `ĉ = g_θ(x)`, on a tape.
fn surrogate(
    spec: &MlpSpec,
    params: &ParamSet,
    x: &Tensor,
    p: &Tensor,
    labels: &[usize],
    cfg: &KnapsackConfig,
    noise: &NoiseBatch,
) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let vars = ParamVars::register(params, &mut tape);
    let xv = tape.constant(x.clone());
    let scores = mlp_forward(spec, &vars, xv, &mut tape).unwrap();
    let b = smoothed_knapsack_layer(&mut tape, scores, cfg, noise).unwrap();
    let pv = tape.constant(p.clone());
    let vote = ensemble::mask_and_vote(&mut tape, pv, b).unwrap();
    let loss = tape.nll_loss(vote.y_hat, labels).unwrap();
    let grads = tape.backward(loss).unwrap();
    (tape.value(loss).item(), vars.gradients(&grads, params).flat())
}

#[test]
fn selector_gradient_matches_common_random_number_differences() {
    let (d, n, c, rows) = (3, 6, 3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = MlpSpec::new(vec![d, n], OutputMode::RawScores).unwrap();
    let params = init_params(&spec, 7).unwrap();
    let x = Tensor::new(vec![rows, d], (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let mats: Vec<PredictionMatrix> = (0..rows)
        .map(|_| {
            let columns: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
                    let t: f64 = raw.iter().sum();
                    raw.into_iter().map(|v| v / t).collect()
                })
                .collect();
            PredictionMatrix::from_columns(&columns).unwrap()
        })
        .collect();
    let p = ensemble::stack(&mats.iter().collect::<Vec<_>>()).unwrap();
    let labels = [0, 1, 2, 1];
    let mut cfg = KnapsackConfig::new(2);
    cfg.samples = 100_000;
    let noise = NoiseBatch::sample(n, cfg.samples, 3, 0);

    let (_, grad) = surrogate(&spec, &params, &x, &p, &labels, &cfg, &noise);
    // The surrogate is piecewise constant at resolution 1/m, so the step
    // must move many noise draws across a selection boundary.
    let h = 1e-1;
    let mut numeric = Vec::with_capacity(grad.len());
    for j in 0..grad.len() {
        let shifted = |delta: f64| {
            let mut flat = params.flat();
            flat[j] += delta;
            let mut q = params.clone();
            q.set_flat(&flat).unwrap();
            surrogate(&spec, &q, &x, &p, &labels, &cfg, &noise).0
        };
        numeric.push((shifted(h) - shifted(-h)) / (2.0 * h));
    }
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = grad.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    let rel = norm(&diff) / norm(&grad);
    assert!(rel < 5e-2, "relative error {rel}\nanalytic {grad:?}\nnumeric {numeric:?}");
}

fn perfect_agent(id: usize, c: usize) -> AgentModel {
    // The single input is the label; logit j is -20·(j - y)² up to a shift.
    let spec = MlpSpec::new(vec![1, c], OutputMode::Softmax).unwrap();
    let mut params = init_params(&spec, 0).unwrap();
    let w: Vec<f64> = (0..c).map(|j| 40.0 * j as f64).collect();
    let b: Vec<f64> = (0..c).map(|j| -20.0 * (j * j) as f64).collect();
    params.layers[0].w = Tensor::new(vec![1, c], w).unwrap();
    params.layers[0].b = Tensor::vector(b);
    AgentModel {
        id,
        specialty: vec![id % c],
        kind: AgentKind::Mlp { spec, params },
        train_stats: AgentStats::default(),
    }
}

fn label_dataset(c: usize, len: usize) -> Dataset {
    let labels: Vec<usize> = (0..len).map(|i| i % c).collect();
    let features = labels.iter().map(|&y| y as f64).collect();
    Dataset::new(features, labels, 1, c, Split::Test).unwrap()
}

#[test]
fn perfect_agents_make_every_method_perfect() {
    let c = 3;
    let agents: Vec<AgentModel> = (0..6).map(|i| perfect_agent(i, c)).collect();
    let data = label_dataset(c, 90);
    for method in [Method::Ua, Method::Mv, Method::Rs] {
        assert_eq!(evaluate(method, &agents, None, &data, 2, 0).unwrap(), 100.0);
    }
    let spec = MlpSpec::new(vec![1, 6], OutputMode::RawScores).unwrap();
    let selector = smartensemble_core::training::Selector {
        params: init_params(&spec, 1).unwrap(),
        spec,
        knapsack: KnapsackConfig::new(2),
    };
    assert_eq!(evaluate(Method::E2eMel, &agents, Some(&selector), &data, 2, 0).unwrap(), 100.0);
    assert!(matches!(
        evaluate(Method::E2eMel, &agents, None, &data, 2, 0),
        Err(Error::Contract(_))
    ));
    assert!(evaluate(Method::Ua, &agents, Some(&selector), &data, 2, 0).is_err());
    assert!(evaluate(Method::E2eMel, &agents, Some(&selector), &data, 3, 0).is_err());
}

#[test]
fn random_selection_at_full_k_equals_unweighted_average() {
    let task = generate_synthetic_task(&task_spec(5)).unwrap();
    let ua = evaluate(Method::Ua, &task.agents, None, &task.test, 15, 0).unwrap();
    for seed in [0, 1, 99] {
        assert_eq!(evaluate(Method::Rs, &task.agents, None, &task.test, 15, seed).unwrap(), ua);
    }
}

#[test]
fn majority_vote_on_a_hand_counted_fixture() {
    // Agent j predicts class `table[j][i]` for sample i.
    let table = [[0, 1, 2, 0], [0, 2, 2, 1], [1, 1, 0, 2]];
    let labels = [0, 1, 0, 2];
    // Votes per sample: {0,0,1} → 0 ✓; {1,2,1} → 1 ✓; {2,2,0} → 2 ✗; {0,1,2} → 0 ✗.
    // Sample i is the one-hot vector e_i.
    let features: Vec<f64> = (0..16).map(|j| if j % 5 == 0 { 1.0 } else { 0.0 }).collect();
    let data = Dataset::new(features, labels.to_vec(), 4, 3, Split::Test).unwrap();
    let agents: Vec<AgentModel> = table
        .iter()
        .enumerate()
        .map(|(id, row)| {
            let spec = MlpSpec::new(vec![4, 3], OutputMode::Softmax).unwrap();
            let mut params = init_params(&spec, 0).unwrap();
            let mut w = vec![0.0; 12];
            for (s, &cls) in row.iter().enumerate() {
                w[s * 3 + cls] = 50.0;
            }
            params.layers[0].w = Tensor::new(vec![4, 3], w).unwrap();
            AgentModel {
                id,
                specialty: vec![id],
                kind: AgentKind::Mlp { spec, params },
                train_stats: AgentStats::default(),
            }
        })
        .collect();
    for (i, _) in labels.iter().enumerate() {
        for (j, row) in table.iter().enumerate() {
            let p = agents[j].predict(&data.batch(&[i])).unwrap();
            assert_eq!(ensemble::predict_class(p.row(0)).unwrap(), row[i], "agent {j} sample {i}");
        }
    }
    assert_eq!(evaluate(Method::Mv, &agents, None, &data, 1, 0).unwrap(), 50.0);
}

#[test]
fn zero_learning_rate_agent_keeps_its_initialisation() {
    let spec = MlpSpec::new(vec![1, 4, 3], OutputMode::Softmax).unwrap();
    let data = label_dataset(3, 60);
    let trained = train_agent(0, vec![0], &spec, &settings(1, 0.0), &data, Some(&data), 5).unwrap();
    let AgentKind::Mlp { params, .. } = &trained.agent.kind else { unreachable!() };
    assert_eq!(params, &init_params(&spec, rng::derive_seed(5, "init")).unwrap());
    assert_eq!(trained.epochs.len(), 1);
}

#[test]
fn sweep_covers_each_k_once_and_is_reproducible() {
    let mut cfg = config(3, vec![1, 3, 15]);
    cfg.selector_training = settings(3, 1e-3);
    let task = generate_synthetic_task(&task_spec(3)).unwrap();
    let s = splits(&task);

    // MLP agents so the checksum guard is meaningful.
    let agents: Vec<AgentModel> = smartensemble_core::training::train_agents(&cfg, &s.train, None).unwrap();
    let before: Vec<u64> = agents.iter().map(agent_checksum).collect();
    let first = sweep_k(&cfg, &s, &agents, &mut no_clock()).unwrap();
    let after: Vec<u64> = agents.iter().map(agent_checksum).collect();
    assert_eq!(before, after);
    assert_eq!(first.iter().map(|e| e.k).collect::<Vec<_>>(), vec![1, 3, 15]);

    let second = sweep_k(&cfg, &s, &agents, &mut no_clock()).unwrap();
    for (a, b) in first.iter().zip(&second) {
        let (sa, ra) = a.outcome.as_ref().unwrap();
        let (sb, rb) = b.outcome.as_ref().unwrap();
        assert_eq!(ra, rb);
        assert_eq!(sa, sb);
    }
    let (_, full) = first[2].outcome.as_ref().unwrap();
    assert_eq!(full.test.rs, full.test.ua);
    for e in &first {
        let (_, r) = e.outcome.as_ref().unwrap();
        for acc in [r.test.e2e_mel, r.test.ua, r.test.mv, r.test.rs] {
            assert!((0.0..=100.0).contains(&acc));
        }
        assert!(r.epochs.iter().all(|l| l.valid_accuracy.is_some_and(|a| (0.0..=100.0).contains(&a))));
    }
}

#[test]
fn divergence_is_reported_and_the_sweep_goes_on() {
    let mut cfg = config(4, vec![2, 4, 6]);
    cfg.selector_training = settings(2, 1e300);
    cfg.selector_training.optimizer = OptimizerKind::Sgd;
    let task = generate_synthetic_task(&task_spec(4)).unwrap();
    let s = splits(&task);

    let err = train_selector(
        &cfg.selector_spec(),
        &cfg.selector_training,
        &cfg.knapsack_for(2),
        &task.agents,
        &task.train,
        &task.valid,
        4,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Diverged(_)), "{err}");

    let entries = sweep_k(&cfg, &s, &task.agents, &mut no_clock()).unwrap();
    assert_eq!(entries.iter().map(|e| e.k).collect::<Vec<_>>(), vec![2, 4, 6]);
    for e in &entries {
        let msg = e.outcome.as_ref().map(|_| ()).unwrap_err();
        assert!(msg.contains("epoch") && msg.contains("step"), "{msg}");
    }
}
