//! Agent pre-training, end-to-end selector training, evaluation and k-sweeps.

mod config;

pub use config::{DatasetSource, ExperimentConfig, SpecializationMode, TrainSettings};

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::{compose_specialized_split, enumerate_specializations, Dataset, Split};
use crate::ensemble::{
    self, baseline_majority_vote, baseline_random_selection, baseline_unweighted_average,
    collect_dataset, AgentKind, AgentModel, AgentStats, PredictionMatrix,
};
use crate::error::{contract, Error, Result};
use crate::knapsack::{self, KnapsackConfig, NoiseBatch, NormalizationOrder, SelectionMask};
use crate::nn::{self, init_params, mlp_forward, MlpSpec, Optimizer, OutputMode, ParamSet, ParamVars};
use crate::rng;

/// Rows per tape-free prediction chunk.
const EVAL_CHUNK: usize = 512;

/// Train / validation / test splits of one experiment.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

impl Splits {
    /// Shuffles `all` once under the `data` stream and cuts train, valid, test.
    /// `train_size = None` gives train everything left over.
    pub fn partition(
        all: &Dataset,
        train_size: Option<usize>,
        valid_size: usize,
        test_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let reserved = valid_size + test_size;
        if reserved >= all.len() {
            return Err(contract!(
                "valid ({valid_size}) + test ({test_size}) leave no training data out of {}",
                all.len()
            ));
        }
        let train_size = train_size.unwrap_or(all.len() - reserved);
        let mut rng = rng::substream(seed, rng::DATA, 0);
        let mut parts = all.partition(
            &[
                (train_size, Split::Train),
                (valid_size, Split::Valid),
                (test_size, Split::Test),
            ],
            &mut rng,
        )?;
        let test = parts.pop().expect("three parts");
        let valid = parts.pop().expect("three parts");
        let train = parts.pop().expect("three parts");
        Ok(Self { train, valid, test })
    }
}

/// Per-epoch progress of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean minibatch loss, measured before each update.
    pub train_loss: f64,
    /// Percent; absent for agent training.
    pub valid_accuracy: Option<f64>,
}

fn check_loss(loss: f64, what: &str, epoch: usize, step: u64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!(
            "{what} loss became {loss} at epoch {epoch}, step {step}"
        )))
    }
}

fn optimizer_step(
    opt: &mut Optimizer,
    params: &mut ParamSet,
    grads: &ParamSet,
    what: &str,
    epoch: usize,
    step: u64,
) -> Result<()> {
    opt.step(params, grads).map_err(|e| match e {
        Error::NonFinite(where_) => {
            Error::Diverged(format!("{what}: non-finite {where_} at epoch {epoch}, step {step}"))
        }
        other => other,
    })
}

fn batch_order(len: usize, batch_size: usize, rng: &mut rng::StreamRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// A freshly trained agent and its loss curve.
#[derive(Debug, Clone)]
pub struct AgentTraining {
    pub agent: AgentModel,
    pub epochs: Vec<EpochLog>,
}

/// Trains one softmax MLP with cross-entropy on `train`.
///
/// `stats_on` is where the specialized / complementary accuracies are measured.
pub fn train_agent(
    id: usize,
    specialty: Vec<usize>,
    spec: &MlpSpec,
    settings: &TrainSettings,
    train: &Dataset,
    stats_on: Option<&Dataset>,
    seed: u64,
) -> Result<AgentTraining> {
    spec.validate()?;
    settings.validate("agent_training")?;
    if spec.output_mode != OutputMode::Softmax
        || spec.input_width() != train.dim()
        || spec.output_width() != train.classes()
    {
        return Err(contract!(
            "agent {id}: spec {:?} does not fit d={}, c={}",
            spec.layer_sizes,
            train.dim(),
            train.classes()
        ));
    }
    if train.is_empty() {
        return Err(contract!("agent {id}: empty training split"));
    }
    let mut params = init_params(spec, rng::derive_seed(seed, "init"))?;
    let mut opt = Optimizer::new(settings.optimizer, settings.learning_rate)?;
    let mut shuffle = rng::substream(seed, "shuffle", 0);
    let what = format!("agent {id}");
    let mut epochs = Vec::with_capacity(settings.epochs);

    for epoch in 0..settings.epochs {
        let mut total = 0.0;
        let batches = batch_order(train.len(), settings.batch_size, &mut shuffle);
        for idx in &batches {
            let mut tape = Tape::new();
            let x = tape.constant(train.batch(idx));
            let vars = ParamVars::register(&params, &mut tape);
            let probs = mlp_forward(spec, &vars, x, &mut tape)?;
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels()[i]).collect();
            let loss = tape.nll_loss(probs, &labels)?;
            let value = tape.value(loss).item();
            let step = opt.steps_taken();
            check_loss(value, &what, epoch, step)?;
            total += value;
            let grads = vars.gradients(&tape.backward(loss)?, &params);
            optimizer_step(&mut opt, &mut params, &grads, &what, epoch, step)?;
        }
        epochs.push(EpochLog {
            epoch,
            train_loss: total / batches.len() as f64,
            valid_accuracy: None,
        });
    }

    let mut agent = AgentModel {
        id,
        specialty,
        kind: AgentKind::Mlp {
            spec: spec.clone(),
            params,
        },
        train_stats: AgentStats::default(),
    };
    if let Some(data) = stats_on {
        agent.train_stats = AgentStats::measure(&agent, data)?;
    }
    Ok(AgentTraining { agent, epochs })
}

/// Trains the full singles-and-pairs ensemble on specialized splits of `master`.
///
/// Agent `i` draws its split from counter stream `i` of the `agents` stream.
pub fn train_agents(
    config: &ExperimentConfig,
    master: &Dataset,
    stats_on: Option<&Dataset>,
) -> Result<Vec<AgentModel>> {
    let spec = config.agent_spec();
    enumerate_specializations(config.classes)?
        .into_iter()
        .enumerate()
        .map(|(id, specialty)| {
            let mut rng = rng::substream(config.seed, rng::AGENTS, id as u64);
            let split = compose_specialized_split(
                master,
                &specialty,
                config.specialty_fraction,
                config.agent_train_size,
                &mut rng,
            )?;
            let seed = rng::mix(rng::derive_seed(config.seed, rng::AGENTS) ^ id as u64);
            let trained = train_agent(
                id,
                specialty,
                &spec,
                &config.agent_training,
                &split,
                stats_on,
                seed,
            )?;
            log::info!(
                "agent {id} {:?}: specialized {:.1}%, complementary {:.1}%",
                trained.agent.specialty,
                trained.agent.train_stats.specialized,
                trained.agent.train_stats.complementary
            );
            Ok(trained.agent)
        })
        .collect()
}

/// Trained selection network plus the knapsack settings it was trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selector {
    pub spec: MlpSpec,
    pub params: ParamSet,
    pub knapsack: KnapsackConfig,
}

impl Selector {
    pub fn k(&self) -> usize {
        self.knapsack.k
    }

    /// Raw scores `[B×n]`.
    pub fn scores(&self, x: &Tensor) -> Result<Tensor> {
        nn::predict(&self.spec, &self.params, x)
    }

    /// Hard top-k sub-ensemble for each row of `x`.
    pub fn select(&self, x: &Tensor) -> Result<Vec<SelectionMask>> {
        let scores = self.scores(x)?;
        (0..scores.rows())
            .map(|r| match self.knapsack.order {
                NormalizationOrder::NormalizeFirst => {
                    knapsack::topk_select(&knapsack::normalize_scores(scores.row(r)), self.k())
                }
                NormalizationOrder::SolveFirst => knapsack::topk_select(scores.row(r), self.k()),
            })
            .collect()
    }

    pub fn select_dataset(&self, data: &Dataset) -> Result<Vec<SelectionMask>> {
        let mut out = Vec::with_capacity(data.len());
        let all: Vec<usize> = (0..data.len()).collect();
        for idx in all.chunks(EVAL_CHUNK) {
            out.extend(self.select(&data.batch(idx))?);
        }
        Ok(out)
    }
}

/// Outcome of [`train_selector`]: the best-on-validation selector.
#[derive(Debug, Clone)]
pub struct SelectorTraining {
    pub selector: Selector,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_valid_accuracy: f64,
    pub steps: u64,
}

/// Agent outputs for every sample of one split, computed once.
#[derive(Debug, Clone)]
pub struct PredictionCache {
    pub predictions: Vec<PredictionMatrix>,
    pub labels: Vec<usize>,
}

impl PredictionCache {
    pub fn new(agents: &[AgentModel], data: &Dataset) -> Result<Self> {
        Ok(Self {
            predictions: collect_dataset(agents, data)?,
            labels: data.labels().to_vec(),
        })
    }

    fn stack(&self, idx: &[usize]) -> Result<Tensor> {
        let mats: Vec<&PredictionMatrix> = idx.iter().map(|&i| &self.predictions[i]).collect();
        ensemble::stack(&mats)
    }
}

fn check_ensemble(agents: &[AgentModel], data: &Dataset) -> Result<()> {
    if agents.is_empty() {
        return Err(contract!("the ensemble has no agents"));
    }
    if let Some(a) = agents
        .iter()
        .find(|a| a.classes() != data.classes() || a.input_width() != data.dim())
    {
        return Err(contract!(
            "agent {} maps d={} to c={}, data has d={}, c={}",
            a.id,
            a.input_width(),
            a.classes(),
            data.dim(),
            data.classes()
        ));
    }
    Ok(())
}

/// End-to-end training of the selection network through the knapsack layer.
///
/// Agents are only read. Each step draws one batch of `m` noise vectors
/// from counter stream `step` and shares it across the minibatch; the
/// parameters with the best validation accuracy are returned.
pub fn train_selector(
    spec: &MlpSpec,
    settings: &TrainSettings,
    knapsack: &KnapsackConfig,
    agents: &[AgentModel],
    train: &Dataset,
    valid: &Dataset,
    seed: u64,
) -> Result<SelectorTraining> {
    check_ensemble(agents, train)?;
    check_ensemble(agents, valid)?;
    let train_cache = PredictionCache::new(agents, train)?;
    let valid_cache = PredictionCache::new(agents, valid)?;
    train_selector_cached(spec, settings, knapsack, train, &train_cache, valid, &valid_cache, seed)
}

#[allow(clippy::too_many_arguments)]
pub fn train_selector_cached(
    spec: &MlpSpec,
    settings: &TrainSettings,
    knapsack: &KnapsackConfig,
    train: &Dataset,
    train_cache: &PredictionCache,
    valid: &Dataset,
    valid_cache: &PredictionCache,
    seed: u64,
) -> Result<SelectorTraining> {
    spec.validate()?;
    settings.validate("selector_training")?;
    let n = train_cache
        .predictions
        .first()
        .map(PredictionMatrix::agents)
        .ok_or_else(|| contract!("empty training split"))?;
    if spec.output_mode != OutputMode::RawScores
        || spec.input_width() != train.dim()
        || spec.output_width() != n
    {
        return Err(contract!(
            "selector spec {:?} does not fit d={}, n={n}",
            spec.layer_sizes,
            train.dim()
        ));
    }
    knapsack.validate(n)?;
    if valid.is_empty() {
        return Err(contract!("validation split is empty"));
    }
    let k = knapsack.k as u64;
    let init_seed = rng::mix(rng::derive_seed(seed, rng::SELECTOR) ^ k);
    let noise_seed = rng::mix(seed ^ rng::mix(knapsack.noise_seed));
    let mut shuffle = rng::substream(seed, rng::SELECTOR, k);

    let mut selector = Selector {
        spec: spec.clone(),
        params: init_params(spec, init_seed)?,
        knapsack: knapsack.clone(),
    };
    let mut opt = Optimizer::new(settings.optimizer, settings.learning_rate)?;
    let mut best = (selector.params.clone(), f64::NEG_INFINITY, 0usize);
    let mut epochs = Vec::new();
    let mut stale = 0;

    for epoch in 0..settings.epochs {
        let mut total = 0.0;
        let batches = batch_order(train.len(), settings.batch_size, &mut shuffle);
        for idx in &batches {
            let step = opt.steps_taken();
            let noise = NoiseBatch::sample(n, knapsack.samples, noise_seed, step);
            let mut tape = Tape::new();
            let x = tape.constant(train.batch(idx));
            let vars = ParamVars::register(&selector.params, &mut tape);
            let scores = mlp_forward(spec, &vars, x, &mut tape)?;
            if !tape.value(scores).all_finite() {
                return Err(Error::Diverged(format!(
                    "selector scores became non-finite at epoch {epoch}, step {step}"
                )));
            }
            let mask = knapsack::knapsack_layer(&mut tape, scores, knapsack, &noise)?;
            let p = tape.constant(train_cache.stack(idx)?);
            let vote = ensemble::mask_and_vote(&mut tape, p, mask)?;
            let labels: Vec<usize> = idx.iter().map(|&i| train_cache.labels[i]).collect();
            let loss = tape.nll_loss(vote.y_hat, &labels)?;
            let value = tape.value(loss).item();
            check_loss(value, "selector", epoch, step)?;
            total += value;
            let grads = vars.gradients(&tape.backward(loss)?, &selector.params);
            optimizer_step(&mut opt, &mut selector.params, &grads, "selector", epoch, step)?;
        }
        let masks = selector.select_dataset(valid)?;
        let accuracy = masked_accuracy(&valid_cache.predictions, &valid_cache.labels, &masks)?;
        epochs.push(EpochLog {
            epoch,
            train_loss: total / batches.len() as f64,
            valid_accuracy: Some(accuracy),
        });
        log::debug!("selector k={k} epoch {epoch}: loss {:.4}, valid {accuracy:.2}%", total / batches.len() as f64);
        if accuracy > best.1 {
            best = (selector.params.clone(), accuracy, epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= settings.patience.max(1) {
                break;
            }
        }
    }

    let steps = opt.steps_taken();
    let (params, best_valid_accuracy, best_epoch) = best;
    selector.params = params;
    Ok(SelectorTraining {
        selector,
        epochs,
        best_epoch,
        best_valid_accuracy,
        steps,
    })
}

/// Consensus rule scored by [`evaluate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Learned per-input sub-ensemble with the smoothed vote.
    E2eMel,
    /// Unweighted average of all agents.
    Ua,
    /// Plurality of hard agent votes.
    Mv,
    /// Unweighted average of a uniformly random k-subset.
    Rs,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::E2eMel, Method::Ua, Method::Mv, Method::Rs];

    pub fn name(self) -> &'static str {
        match self {
            Method::E2eMel => "e2e-mel",
            Method::Ua => "ua",
            Method::Mv => "mv",
            Method::Rs => "rs",
        }
    }
}

impl core::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| contract!("unknown method {s:?}; expected e2e-mel, ua, mv or rs"))
    }
}

fn percent(correct: usize, total: usize) -> f64 {
    100.0 * correct as f64 / total as f64
}

fn masked_accuracy(preds: &[PredictionMatrix], labels: &[usize], masks: &[SelectionMask]) -> Result<f64> {
    let mut correct = 0;
    for ((p, &y), mask) in preds.iter().zip(labels).zip(masks) {
        let votes = p.masked_sum(mask)?;
        correct += usize::from(ensemble::predict_class(&votes)? == y);
    }
    Ok(percent(correct, labels.len()))
}

/// Accuracy in percent of `method` over cached agent outputs.
///
/// `masks` must be given exactly for [`Method::E2eMel`]. Random selection
/// draws one subset per sample, in order, from counter stream `k` of the
/// `rs-baseline` stream.
pub fn accuracy_from_cache(
    method: Method,
    cache: &PredictionCache,
    masks: Option<&[SelectionMask]>,
    k: usize,
    seed: u64,
) -> Result<f64> {
    if cache.labels.is_empty() {
        return Err(contract!("cannot score an empty split"));
    }
    let (preds, labels) = (&cache.predictions, &cache.labels);
    let hits = |f: &mut dyn FnMut(&PredictionMatrix) -> Result<usize>| -> Result<f64> {
        let mut correct = 0;
        for (p, &y) in preds.iter().zip(labels) {
            correct += usize::from(f(p)? == y);
        }
        Ok(percent(correct, labels.len()))
    };
    match (method, masks) {
        (Method::E2eMel, Some(masks)) => {
            if masks.len() != labels.len() {
                return Err(contract!("{} masks for {} samples", masks.len(), labels.len()));
            }
            masked_accuracy(preds, labels, masks)
        }
        (Method::E2eMel, None) => Err(contract!("method e2e-mel requires a trained selector")),
        (_, Some(_)) => Err(contract!("method {} takes no selector", method.name())),
        (Method::Ua, None) => hits(&mut |p| Ok(baseline_unweighted_average(p))),
        (Method::Mv, None) => hits(&mut |p| Ok(baseline_majority_vote(p))),
        (Method::Rs, None) => {
            let mut rng = rng::substream(seed, rng::RS_BASELINE, k as u64);
            hits(&mut |p| baseline_random_selection(p, k, &mut rng))
        }
    }
}

/// Test accuracy in percent of one consensus rule.
///
/// The selector is required for [`Method::E2eMel`] and rejected otherwise;
/// `k` sizes the random subsets of [`Method::Rs`] and must match the
/// selector's `k` for [`Method::E2eMel`].
pub fn evaluate(
    method: Method,
    agents: &[AgentModel],
    selector: Option<&Selector>,
    data: &Dataset,
    k: usize,
    seed: u64,
) -> Result<f64> {
    check_ensemble(agents, data)?;
    if k == 0 || k > agents.len() {
        return Err(contract!(
            "sub-ensemble size must satisfy 1 ≤ k ≤ n, got k={k}, n={}",
            agents.len()
        ));
    }
    let masks = match (method, selector) {
        (Method::E2eMel, Some(s)) => {
            if s.k() != k {
                return Err(contract!("selector was trained for k={}, asked for k={k}", s.k()));
            }
            Some(s.select_dataset(data)?)
        }
        (Method::E2eMel, None) => {
            return Err(contract!("method e2e-mel requires a trained selector"))
        }
        (_, Some(_)) => return Err(contract!("method {} takes no selector", method.name())),
        (_, None) => None,
    };
    let cache = PredictionCache::new(agents, data)?;
    accuracy_from_cache(method, &cache, masks.as_deref(), k, seed)
}

/// Test accuracies of all four rules, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodAccuracies {
    pub e2e_mel: f64,
    pub ua: f64,
    pub mv: f64,
    pub rs: f64,
}

/// Everything recorded for one `(seed, k)` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub k: usize,
    pub seed: u64,
    pub test: MethodAccuracies,
    pub best_epoch: usize,
    pub best_valid_accuracy: f64,
    pub steps: u64,
    pub epochs: Vec<EpochLog>,
    pub wallclock_s: f64,
}

/// One entry of a k-sweep; a diverged k keeps its error and the sweep goes on.
#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub k: usize,
    pub outcome: core::result::Result<(Selector, RunReport), String>,
}

/// Cached agent outputs on all three splits.
#[derive(Debug, Clone)]
pub struct EnsembleCache {
    pub train: PredictionCache,
    pub valid: PredictionCache,
    pub test: PredictionCache,
}

impl EnsembleCache {
    pub fn new(agents: &[AgentModel], splits: &Splits) -> Result<Self> {
        for d in [&splits.train, &splits.valid, &splits.test] {
            check_ensemble(agents, d)?;
        }
        Ok(Self {
            train: PredictionCache::new(agents, &splits.train)?,
            valid: PredictionCache::new(agents, &splits.valid)?,
            test: PredictionCache::new(agents, &splits.test)?,
        })
    }
}

/// Trains and scores the selector for one `k`.
///
/// `clock` returns seconds; only differences between its readings are used.
pub fn run_k(
    config: &ExperimentConfig,
    splits: &Splits,
    cache: &EnsembleCache,
    k: usize,
    clock: &mut dyn FnMut() -> f64,
) -> Result<(Selector, RunReport)> {
    let start = clock();
    let trained = train_selector_cached(
        &config.selector_spec(),
        &config.selector_training,
        &config.knapsack_for(k),
        &splits.train,
        &cache.train,
        &splits.valid,
        &cache.valid,
        config.seed,
    )?;
    let masks = trained.selector.select_dataset(&splits.test)?;
    let score = |m: Method, masks: Option<&[SelectionMask]>| {
        accuracy_from_cache(m, &cache.test, masks, k, config.seed)
    };
    let test = MethodAccuracies {
        e2e_mel: score(Method::E2eMel, Some(&masks))?,
        ua: score(Method::Ua, None)?,
        mv: score(Method::Mv, None)?,
        rs: score(Method::Rs, None)?,
    };
    let report = RunReport {
        k,
        seed: config.seed,
        test,
        best_epoch: trained.best_epoch,
        best_valid_accuracy: trained.best_valid_accuracy,
        steps: trained.steps,
        epochs: trained.epochs,
        wallclock_s: clock() - start,
    };
    Ok((trained.selector, report))
}

/// Runs [`run_k`] for every configured `k`, in order.
pub fn sweep_k(
    config: &ExperimentConfig,
    splits: &Splits,
    agents: &[AgentModel],
    clock: &mut dyn FnMut() -> f64,
) -> Result<Vec<SweepEntry>> {
    config.validate()?;
    let before: Vec<u64> = agents.iter().map(agent_checksum).collect();
    let cache = EnsembleCache::new(agents, splits)?;
    let entries = config
        .k_values
        .iter()
        .map(|&k| SweepEntry {
            k,
            outcome: run_k(config, splits, &cache, k, clock).map_err(|e| e.to_string()),
        })
        .collect();
    let after: Vec<u64> = agents.iter().map(agent_checksum).collect();
    if before != after {
        return Err(contract!("agent parameters changed during selector training"));
    }
    Ok(entries)
}

/// Parameter checksum of an MLP agent; oracle agents hash to zero.
pub fn agent_checksum(agent: &AgentModel) -> u64 {
    match &agent.kind {
        AgentKind::Mlp { params, .. } => params.checksum(),
        AgentKind::Oracle(_) => 0,
    }
}
