//! Round protocol over simulated clients.
//!
//! Each federated round: every participating client draws a fresh adapter
//! (`b = 0`), trains it on its shard starting from the current global weights,
//! and uploads it. The server weights the uploads, aggregates them with the
//! chosen strategy, merges the aggregate delta into the global weights, and
//! every client resumes from the merged weights. Shipping the merged effect
//! instead of the stacked factors gives the same weights; the ledger still
//! charges the factor sizes the real exchange would use.

use rayon::prelude::*;
use rayon::ThreadPool;

use crate::aggregation::{
    aggregate_fedit, aggregate_flora, aggregate_zero_padding, fedit_noise, shuffled_stack, weighted,
    zero_padding_noise, NoiseReport, WeightedUpdate,
};
use crate::comm::{summarize, CommLedger, CommSummary, Protocol};
use crate::config::ExperimentConfig;
use crate::data::{gen_task_with_rank, partition, scaling_factors, shards_digest, ClientShard, Sample, SkewSpec};
use crate::error::{invalid, FieldError, FloraError, Result};
use crate::lora::{init_adapter, merge_into_base, BaseWeights, InitKind, InitPolicy, LoraAdapter};
use crate::rng::{derive_seed, permutation};
use crate::training::{evaluate, local_train, LossKind, ToyModel, TrainConfig};

const TAG_TASK: u64 = 1;
const TAG_PARTITION: u64 = 2;
const TAG_CLIENT: u64 = 3;
const TAG_INIT: u64 = 4;
const TAG_TRAIN: u64 = 5;
const TAG_PARTICIPATION: u64 = 6;
const TAG_SHUFFLE: u64 = 7;
const TAG_CENTRAL: u64 = 8;

/// Env var capping intra-round parallelism; `0` runs clients serially.
pub const THREADS_ENV: &str = "FLORA_SIM_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Flora,
    Fedit,
    ZeroPadding,
    Standalone,
    Centralized,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Flora,
        Strategy::Fedit,
        Strategy::ZeroPadding,
        Strategy::Standalone,
        Strategy::Centralized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Flora => "flora",
            Strategy::Fedit => "fedit",
            Strategy::ZeroPadding => "zero_padding",
            Strategy::Standalone => "standalone",
            Strategy::Centralized => "centralized",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Strategy::ALL.into_iter().find(|st| st.name() == s)
    }

    pub fn protocol(self) -> Protocol {
        match self {
            Strategy::Flora => Protocol::Flora,
            Strategy::Fedit => Protocol::Fedit,
            Strategy::ZeroPadding => Protocol::ZeroPadding,
            Strategy::Standalone | Strategy::Centralized => Protocol::LocalOnly,
        }
    }

    pub fn supports(self, ranks: &[usize]) -> bool {
        self != Strategy::Fedit || ranks.windows(2).all(|w| w[0] == w[1])
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub base: BaseWeights,
    /// Number of completed rounds.
    pub round: usize,
    pub ledger: CommLedger,
}

#[derive(Debug, Clone)]
pub struct ClientRuntime {
    pub client_id: usize,
    pub shard: ClientShard,
    pub rank: usize,
    pub local_base: BaseWeights,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    /// 0 is the pre-training baseline; round `t ≥ 1` is reported after its merge.
    pub round: usize,
    pub strategy: Strategy,
    pub global_eval_loss: f64,
    /// Each client's fine-tuned local model on the evaluation set.
    pub per_client_eval_loss: Vec<f64>,
    pub fedit_relative_noise: Option<f64>,
    pub params_up: u64,
    pub params_down: u64,
}

impl RoundMetrics {
    pub fn mean_client_loss(&self) -> Option<f64> {
        (!self.per_client_eval_loss.is_empty())
            .then(|| self.per_client_eval_loss.iter().sum::<f64>() / self.per_client_eval_loss.len() as f64)
    }
}

/// Everything a round needs besides the server, the clients and the training config.
#[derive(Debug, Clone, Copy)]
pub struct RoundSettings<'a> {
    pub eval: &'a [Sample],
    pub init: InitKind,
    pub scaling_override: Option<f64>,
    pub merge_scale: f64,
    pub participation: f64,
    pub privacy_shuffle: bool,
    pub experiment_seed: u64,
}

impl<'a> RoundSettings<'a> {
    pub fn new(eval: &'a [Sample]) -> Self {
        RoundSettings {
            eval,
            init: InitKind::ZeroDeltaGaussian { std: 0.01 },
            scaling_override: None,
            merge_scale: 1.0,
            participation: 1.0,
            privacy_shuffle: false,
            experiment_seed: 0,
        }
    }
}

/// What a round produced, beyond its metrics.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub metrics: RoundMetrics,
    /// Weighted uploads in client order; empty for standalone rounds.
    pub uploads: Vec<WeightedUpdate>,
    pub aggregate: Option<LoraAdapter>,
    pub noise: Option<NoiseReport>,
}

/// How client work inside a round is scheduled. Results never depend on it.
pub enum Executor {
    Serial,
    Ambient,
    Pool(ThreadPool),
}

impl Executor {
    /// Reads [`THREADS_ENV`]: unset uses rayon's global pool, `0` is serial.
    pub fn from_env() -> Result<Self> {
        match std::env::var(THREADS_ENV) {
            Err(_) => Ok(Executor::Ambient),
            Ok(v) => match v.trim().parse::<usize>() {
                Ok(0) => Ok(Executor::Serial),
                Ok(n) => rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map(Executor::Pool)
                    .map_err(|e| invalid(format!("{THREADS_ENV}: {e}"))),
                Err(_) => Err(FloraError::Config(vec![FieldError {
                    key: THREADS_ENV.to_string(),
                    message: format!("expected a nonnegative integer, found `{v}`"),
                }])),
            },
        }
    }

    fn map<T, F>(&self, clients: &[&ClientRuntime], f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(&ClientRuntime) -> Result<T> + Sync + Send,
    {
        match self {
            Executor::Serial => clients.iter().map(|c| f(c)).collect(),
            Executor::Ambient => clients.par_iter().map(|c| f(c)).collect(),
            Executor::Pool(pool) => pool.install(|| clients.par_iter().map(|c| f(c)).collect()),
        }
    }
}

fn loss_of(weights: &BaseWeights, adapter: Option<&LoraAdapter>, eval: &[Sample], kind: LossKind) -> f64 {
    match adapter {
        Some(ad) => evaluate(&(weights.w() + &ad.delta()), eval, kind),
        None => evaluate(weights.w(), eval, kind),
    }
}

fn participants(clients: &[ClientRuntime], settings: &RoundSettings<'_>, round: usize) -> Vec<usize> {
    let k = clients.len();
    if settings.participation >= 1.0 {
        return (0..k).collect();
    }
    let count = ((settings.participation * k as f64).ceil() as usize).clamp(1, k);
    let mut chosen = permutation(k, derive_seed(&[settings.experiment_seed, TAG_PARTICIPATION, round as u64]))[..count].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Fresh adapter, local training and local evaluation for one client.
fn client_update(
    client: &ClientRuntime,
    round: usize,
    train_cfg: &TrainConfig,
    settings: &RoundSettings<'_>,
) -> Result<(LoraAdapter, f64)> {
    let policy = InitPolicy {
        kind: settings.init,
        seed: derive_seed(&[client.seed, TAG_INIT, round as u64]),
    };
    let fresh = init_adapter(client.local_base.dim(), client.rank, &policy)?;
    let model = ToyModel::new(client.local_base.clone(), fresh)?;
    let cfg = TrainConfig {
        seed: derive_seed(&[client.seed, TAG_TRAIN, round as u64]),
        ..*train_cfg
    };
    let trained = local_train(&model, &client.shard, &cfg)?;
    let loss = loss_of(&client.local_base, Some(&trained), settings.eval, train_cfg.loss);
    Ok((trained, loss))
}

/// Runs one round of a client-based strategy (everything but `centralized`).
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientRuntime],
    strategy: Strategy,
    train_cfg: &TrainConfig,
    settings: &RoundSettings<'_>,
    exec: &Executor,
) -> Result<RoundOutcome> {
    if strategy == Strategy::Centralized {
        return Err(invalid("centralized training is not a client round"));
    }
    if clients.is_empty() {
        return Err(invalid("a round needs at least one client"));
    }
    let ranks: Vec<usize> = clients.iter().map(|c| c.rank).collect();
    if !strategy.supports(&ranks) {
        return Err(FloraError::UnsupportedHeterogeneousRanks { ranks });
    }
    let dim = server.base.dim();
    if clients.iter().any(|c| c.local_base.dim() != dim) {
        return Err(invalid("every client must share the server's weight shape"));
    }
    let round = server.round;
    let k = clients.len();
    let chosen = participants(clients, settings, round);
    let active: Vec<&ClientRuntime> = chosen.iter().map(|&i| &clients[i]).collect();
    let results = exec.map(&active, |c| client_update(c, round, train_cfg, settings))?;
    let (adapters, losses): (Vec<LoraAdapter>, Vec<f64>) = results.into_iter().unzip();

    let participant_ranks: Vec<(usize, usize)> = active.iter().map(|c| (c.client_id, c.rank)).collect();
    server
        .ledger
        .charge_participants(strategy.protocol(), dim, &participant_ranks, k, round)?;

    let mut outcome = RoundOutcome {
        metrics: RoundMetrics {
            round: round + 1,
            strategy,
            global_eval_loss: 0.0,
            per_client_eval_loss: losses,
            fedit_relative_noise: None,
            params_up: 0,
            params_down: 0,
        },
        uploads: Vec::new(),
        aggregate: None,
        noise: None,
    };

    if strategy == Strategy::Standalone {
        for (&i, ad) in chosen.iter().zip(&adapters) {
            clients[i].local_base = merge_into_base(&clients[i].local_base, ad)?;
        }
        let evals: Vec<f64> = clients
            .iter()
            .map(|c| loss_of(&c.local_base, None, settings.eval, train_cfg.loss))
            .collect();
        outcome.metrics.global_eval_loss = evals.iter().sum::<f64>() / evals.len() as f64;
    } else {
        let weights = match settings.scaling_override {
            Some(p) => vec![p; active.len()],
            None => {
                let shards: Vec<ClientShard> = active.iter().map(|c| c.shard.clone()).collect();
                scaling_factors(&shards)?
            }
        };
        let uploads = weighted(adapters, &weights)?;
        let (aggregate, noise) = match strategy {
            Strategy::Flora if settings.privacy_shuffle => (
                shuffled_stack(&uploads, derive_seed(&[settings.experiment_seed, TAG_SHUFFLE, round as u64]))?,
                None,
            ),
            Strategy::Flora => (aggregate_flora(&uploads)?, None),
            Strategy::Fedit => (aggregate_fedit(&uploads)?, Some(fedit_noise(&uploads)?)),
            Strategy::ZeroPadding => (aggregate_zero_padding(&uploads)?, Some(zero_padding_noise(&uploads)?)),
            Strategy::Standalone | Strategy::Centralized => unreachable!(),
        };
        let delta = aggregate.delta() * settings.merge_scale;
        server.base = server.base.add_delta(&delta)?;
        for c in clients.iter_mut() {
            c.local_base = server.base.clone();
        }
        outcome.metrics.global_eval_loss = loss_of(&server.base, None, settings.eval, train_cfg.loss);
        outcome.metrics.fedit_relative_noise = noise.as_ref().map(|n| n.relative_noise);
        outcome.uploads = uploads;
        outcome.aggregate = Some(aggregate);
        outcome.noise = noise;
    }

    let traffic = server.ledger.round_traffic(strategy.protocol(), round);
    outcome.metrics.params_up = traffic.up;
    outcome.metrics.params_down = traffic.down;
    server.round += 1;
    Ok(outcome)
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub strategy: Strategy,
    pub seed: u64,
    pub rounds: Vec<RoundMetrics>,
    pub comm: Option<CommSummary>,
    /// Global weights after the last round (for standalone, the initial weights).
    pub final_base: BaseWeights,
    /// Digest of the client shards this run trained on.
    pub shard_digest: String,
}

impl ExperimentReport {
    pub fn final_global_loss(&self) -> f64 {
        self.rounds.last().map_or(f64::NAN, |r| r.global_eval_loss)
    }
}

pub fn validate_config(cfg: &ExperimentConfig) -> Result<()> {
    let mut errors = Vec::new();
    let mut fail = |key: &str, message: String| {
        errors.push(FieldError {
            key: key.to_string(),
            message,
        })
    };
    if cfg.ranks.len() != cfg.k_clients {
        fail("ranks", format!("{} ranks for {} clients", cfg.ranks.len(), cfg.k_clients));
    }
    if cfg.ranks.contains(&0) {
        fail("ranks", "ranks must be positive".to_string());
    }
    if cfg.strategies.is_empty() {
        fail("strategy", "at least one strategy is required".to_string());
    }
    for s in &cfg.strategies {
        if !s.supports(&cfg.ranks) {
            fail("strategy", format!("{} needs equal ranks, found {:?}", s.name(), cfg.ranks));
        }
    }
    if let Err(e) = cfg.train.validate() {
        fail("train", e.to_string());
    }
    if let Err(e) = cfg.skew.validate() {
        fail("skew", e.to_string());
    }
    if let Some(p) = cfg.scaling_override {
        if !(p.is_finite() && p > 0.0 && p <= 1.0) {
            fail("scaling_override", format!("must lie in (0, 1], found {p}"));
        }
    }
    if !(cfg.participation > 0.0 && cfg.participation <= 1.0) {
        fail("participation", format!("must lie in (0, 1], found {}", cfg.participation));
    }
    if !cfg.merge_scale.is_finite() {
        fail("merge_scale", "must be finite".to_string());
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(FloraError::Config(errors))
    }
}

/// Task, shards and clients shared by every strategy run from one config.
pub struct Setup {
    pub task: crate::data::GlobalTask,
    pub shards: Vec<ClientShard>,
}

pub fn build_setup(cfg: &ExperimentConfig) -> Result<Setup> {
    let task = gen_task_with_rank(
        cfg.dim,
        cfg.samples,
        cfg.noise_std,
        cfg.teacher_rank,
        derive_seed(&[cfg.seed, TAG_TASK]),
    )?;
    let skew = SkewSpec {
        seed: derive_seed(&[cfg.seed, TAG_PARTITION]),
        ..cfg.skew
    };
    let shards = partition(&task, cfg.k_clients, &skew)?;
    Ok(Setup { task, shards })
}

/// Runs the single strategy named in `cfg`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    match cfg.strategies.as_slice() {
        [s] => run_strategy(cfg, *s, &Executor::from_env()?),
        other => Err(FloraError::Config(vec![FieldError {
            key: "strategy".into(),
            message: format!("run takes exactly one strategy, found {}", other.len()),
        }])),
    }
}

pub fn run_strategy(cfg: &ExperimentConfig, strategy: Strategy, exec: &Executor) -> Result<ExperimentReport> {
    validate_config(cfg)?;
    if !strategy.supports(&cfg.ranks) {
        return Err(FloraError::UnsupportedHeterogeneousRanks { ranks: cfg.ranks.clone() });
    }
    let setup = build_setup(cfg)?;
    run_on_setup(cfg, strategy, &setup, exec)
}

fn run_on_setup(cfg: &ExperimentConfig, strategy: Strategy, setup: &Setup, exec: &Executor) -> Result<ExperimentReport> {
    let task = &setup.task;
    let loss = cfg.train.loss;
    let base_loss = loss_of(&task.base, None, &task.eval, loss);
    let baseline = |per_client: Vec<f64>| RoundMetrics {
        round: 0,
        strategy,
        global_eval_loss: base_loss,
        per_client_eval_loss: per_client,
        fedit_relative_noise: None,
        params_up: 0,
        params_down: 0,
    };
    let shard_digest = shards_digest(&setup.shards);

    if strategy == Strategy::Centralized {
        return run_centralized(cfg, setup, baseline(Vec::new()), shard_digest);
    }

    let mut server = ServerState {
        base: task.base.clone(),
        round: 0,
        ledger: CommLedger::new(),
    };
    let mut clients: Vec<ClientRuntime> = setup
        .shards
        .iter()
        .zip(&cfg.ranks)
        .map(|(shard, &rank)| ClientRuntime {
            client_id: shard.client_id,
            shard: shard.clone(),
            rank,
            local_base: task.base.clone(),
            seed: derive_seed(&[cfg.seed, TAG_CLIENT, shard.client_id as u64]),
        })
        .collect();
    let settings = RoundSettings {
        eval: &task.eval,
        init: cfg.init,
        scaling_override: cfg.scaling_override,
        merge_scale: cfg.merge_scale,
        participation: cfg.participation,
        privacy_shuffle: cfg.privacy_shuffle,
        experiment_seed: cfg.seed,
    };

    let mut rounds = vec![baseline(vec![base_loss; cfg.k_clients])];
    if cfg.rounds == 0 {
        server.ledger.charge_broadcast(strategy.protocol(), task.dim(), cfg.k_clients)?;
    }
    for _ in 0..cfg.rounds {
        let outcome = run_round(&mut server, &mut clients, strategy, &cfg.train, &settings, exec)?;
        rounds.push(outcome.metrics);
    }
    let comm = Some(summarize(&server.ledger, cfg.rounds)?);
    Ok(ExperimentReport {
        strategy,
        seed: cfg.seed,
        rounds,
        comm,
        final_base: server.base,
        shard_digest,
    })
}

/// One adapter trained on the pooled shards for `rounds × epochs` epochs,
/// evaluated after every `epochs` epochs and merged at the end.
fn run_centralized(
    cfg: &ExperimentConfig,
    setup: &Setup,
    baseline: RoundMetrics,
    shard_digest: String,
) -> Result<ExperimentReport> {
    let task = &setup.task;
    let pooled = ClientShard {
        client_id: 0,
        samples: setup.shards.iter().flat_map(|s| s.samples.iter().cloned()).collect(),
    };
    let rank = cfg.ranks.iter().copied().max().unwrap_or(1);
    let policy = InitPolicy {
        kind: cfg.init,
        seed: derive_seed(&[cfg.seed, TAG_CENTRAL]),
    };
    let mut model = ToyModel::new(task.base.clone(), init_adapter(task.dim(), rank, &policy)?)?;
    let mut rounds = vec![baseline];
    for t in 0..cfg.rounds {
        let train = TrainConfig {
            seed: derive_seed(&[cfg.seed, TAG_CENTRAL, t as u64]),
            ..cfg.train
        };
        model.adapter = local_train(&model, &pooled, &train)?;
        let merged = task.base.add_delta(&(model.adapter.delta() * cfg.merge_scale))?;
        rounds.push(RoundMetrics {
            round: t + 1,
            strategy: Strategy::Centralized,
            global_eval_loss: loss_of(&merged, None, &task.eval, cfg.train.loss),
            per_client_eval_loss: Vec::new(),
            fedit_relative_noise: None,
            params_up: 0,
            params_down: 0,
        });
    }
    let final_base = task.base.add_delta(&(model.adapter.delta() * cfg.merge_scale))?;
    Ok(ExperimentReport {
        strategy: Strategy::Centralized,
        seed: cfg.seed,
        rounds,
        comm: None,
        final_base,
        shard_digest,
    })
}

#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub seed: u64,
    pub reports: Vec<ExperimentReport>,
}

impl ComparisonReport {
    /// `(strategy, global loss per round)` in the requested order.
    pub fn curves(&self) -> Vec<(Strategy, Vec<f64>)> {
        self.reports
            .iter()
            .map(|r| (r.strategy, r.rounds.iter().map(|m| m.global_eval_loss).collect()))
            .collect()
    }

    pub fn final_losses(&self) -> Vec<(Strategy, f64)> {
        self.reports.iter().map(|r| (r.strategy, r.final_global_loss())).collect()
    }

    pub fn get(&self, strategy: Strategy) -> Option<&ExperimentReport> {
        self.reports.iter().find(|r| r.strategy == strategy)
    }
}

/// Runs every strategy on the same task and partition.
pub fn compare_strategies(cfg: &ExperimentConfig, strategies: &[Strategy], exec: &Executor) -> Result<ComparisonReport> {
    let cfg = ExperimentConfig {
        strategies: strategies.to_vec(),
        ..cfg.clone()
    };
    validate_config(&cfg)?;
    let setup = build_setup(&cfg)?;
    let reports = strategies
        .iter()
        .map(|&s| run_on_setup(&cfg, s, &setup, exec))
        .collect::<Result<Vec<_>>>()?;
    Ok(ComparisonReport { seed: cfg.seed, reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::oracle_delta;
    use crate::lora::{Dim, Matrix};
    use ndarray::array;

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            dim: Dim { m: 6, n: 5 },
            k_clients: 4,
            ranks: vec![2; 4],
            rounds: 2,
            samples: 120,
            train: TrainConfig {
                learning_rate: 0.05,
                batch_size: 8,
                ..TrainConfig::default()
            },
            skew: SkewSpec::default(),
            ..ExperimentConfig::default()
        }
    }

    fn max_abs(m: &Matrix) -> f64 {
        m.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    fn setup_clients(cfg: &ExperimentConfig) -> (Setup, ServerState, Vec<ClientRuntime>) {
        let setup = build_setup(cfg).unwrap();
        let server = ServerState {
            base: setup.task.base.clone(),
            round: 0,
            ledger: CommLedger::new(),
        };
        let clients = setup
            .shards
            .iter()
            .zip(&cfg.ranks)
            .map(|(s, &r)| ClientRuntime {
                client_id: s.client_id,
                shard: s.clone(),
                rank: r,
                local_base: setup.task.base.clone(),
                seed: derive_seed(&[cfg.seed, TAG_CLIENT, s.client_id as u64]),
            })
            .collect();
        (setup, server, clients)
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(Strategy::parse(s.name()), Some(s));
        }
        assert_eq!(Strategy::parse("fedavg"), None);
    }

    #[test]
    fn single_client_strategies_agree() {
        let cfg = ExperimentConfig {
            k_clients: 1,
            ranks: vec![3],
            ..small_cfg()
        };
        let finals: Vec<Matrix> = [Strategy::Flora, Strategy::Fedit, Strategy::ZeroPadding]
            .iter()
            .map(|&s| run_strategy(&cfg, s, &Executor::Serial).unwrap().final_base.w().clone())
            .collect();
        for f in &finals[1..] {
            let scale = max_abs(&finals[0]).max(1.0);
            assert!(max_abs(&(f - &finals[0])) <= 8.0 * f64::EPSILON * scale);
        }
    }

    #[test]
    fn zero_learning_rate_leaves_weights() {
        let mut cfg = small_cfg();
        cfg.train.learning_rate = 0.0;
        for s in [Strategy::Flora, Strategy::Fedit, Strategy::ZeroPadding, Strategy::Standalone, Strategy::Centralized] {
            let rep = run_strategy(&cfg, s, &Executor::Serial).unwrap();
            let setup = build_setup(&cfg).unwrap();
            assert_eq!(rep.final_base, setup.task.base, "{s:?}");
        }
    }

    #[test]
    fn flora_round_matches_oracle_and_syncs_clients() {
        let cfg = small_cfg();
        let (setup, mut server, mut clients) = setup_clients(&cfg);
        let settings = RoundSettings {
            experiment_seed: cfg.seed,
            ..RoundSettings::new(&setup.task.eval)
        };
        let prev = server.base.clone();
        let out = run_round(&mut server, &mut clients, Strategy::Flora, &cfg.train, &settings, &Executor::Serial).unwrap();
        let expect = prev.w() + &oracle_delta(&out.uploads).unwrap();
        let scale = max_abs(&expect).max(1.0);
        assert!(max_abs(&(server.base.w() - &expect)) <= 8.0 * 4.0 * f64::EPSILON * scale);
        let fp = server.base.fingerprint();
        assert!(clients.iter().all(|c| c.local_base.fingerprint() == fp));
        assert_eq!(server.round, 1);
        assert_eq!(out.metrics.round, 1);
    }

    #[test]
    fn fedit_round_is_signal_plus_cross() {
        let cfg = small_cfg();
        let (setup, mut server, mut clients) = setup_clients(&cfg);
        let settings = RoundSettings::new(&setup.task.eval);
        let prev = server.base.clone();
        let out = run_round(&mut server, &mut clients, Strategy::Fedit, &cfg.train, &settings, &Executor::Serial).unwrap();
        let noise = out.noise.unwrap();
        let expect = prev.w() + &(&noise.signal + &noise.cross);
        assert!(max_abs(&(server.base.w() - &expect)) <= 1e-15);
        assert_eq!(out.metrics.fedit_relative_noise, Some(noise.relative_noise));
    }

    #[test]
    fn hand_fixture_round_merges_oracle_delta() {
        // Two clients whose trained adapters are the aggregation fixture.
        let ups = weighted(
            vec![
                LoraAdapter::new(array![[2.0, 0.0]], array![[1.0], [0.0]]).unwrap(),
                LoraAdapter::new(array![[0.0, 4.0]], array![[0.0], [1.0]]).unwrap(),
            ],
            &[0.5, 0.5],
        )
        .unwrap();
        let prev = BaseWeights::new(array![[0.5, -1.0], [2.0, 3.0]]).unwrap();
        let merged = prev.add_delta(&aggregate_flora(&ups).unwrap().delta()).unwrap();
        assert_eq!(merged.w(), &(prev.w() + &array![[1.0, 0.0], [0.0, 2.0]]));
    }

    #[test]
    fn fedit_rejected_on_hetero_before_training() {
        let cfg = ExperimentConfig {
            ranks: vec![1, 2, 3, 4],
            ..small_cfg()
        };
        assert!(matches!(
            run_strategy(&cfg, Strategy::Fedit, &Executor::Serial),
            Err(FloraError::UnsupportedHeterogeneousRanks { .. })
        ));
        let listed = ExperimentConfig { strategies: vec![Strategy::Fedit], ..cfg.clone() };
        assert!(matches!(validate_config(&listed), Err(FloraError::Config(_))));
        let (setup, mut server, mut clients) = setup_clients(&cfg);
        let settings = RoundSettings::new(&setup.task.eval);
        assert!(matches!(
            run_round(&mut server, &mut clients, Strategy::Fedit, &cfg.train, &settings, &Executor::Serial),
            Err(FloraError::UnsupportedHeterogeneousRanks { .. })
        ));
        assert!(server.ledger.is_empty());
        assert!(run_strategy(&cfg, Strategy::ZeroPadding, &Executor::Serial).is_ok());
    }

    #[test]
    fn zero_rounds_is_baseline_only() {
        let cfg = ExperimentConfig { rounds: 0, ..small_cfg() };
        let rep = run_strategy(&cfg, Strategy::Flora, &Executor::Serial).unwrap();
        assert_eq!(rep.rounds.len(), 1);
        assert_eq!(rep.rounds[0].round, 0);
        let setup = build_setup(&cfg).unwrap();
        assert_eq!(rep.final_base, setup.task.base);
        assert_eq!(rep.comm.unwrap().ratio(Protocol::Flora), Some(1.0));
    }

    #[test]
    fn reports_are_deterministic_and_schedule_free() {
        let cfg = small_cfg();
        let serial = run_strategy(&cfg, Strategy::Flora, &Executor::Serial).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let parallel = run_strategy(&cfg, Strategy::Flora, &Executor::Pool(pool)).unwrap();
        assert_eq!(serial.rounds, parallel.rounds);
        assert_eq!(serial.final_base, parallel.final_base);
    }

    #[test]
    fn compare_shares_shards() {
        let cfg = small_cfg();
        let cmp = compare_strategies(&cfg, &[Strategy::Flora, Strategy::Fedit], &Executor::Serial).unwrap();
        assert_eq!(cmp.reports.len(), 2);
        assert_eq!(cmp.reports[0].shard_digest, cmp.reports[1].shard_digest);
        assert_eq!(cmp.curves()[0].1.len(), 3);
        assert_eq!(cmp.reports[0].rounds[0], RoundMetrics { strategy: Strategy::Flora, ..cmp.reports[1].rounds[0].clone() });
    }

    #[test]
    fn standalone_and_centralized_run() {
        let cfg = small_cfg();
        let sa = run_strategy(&cfg, Strategy::Standalone, &Executor::Serial).unwrap();
        assert_eq!(sa.rounds.len(), 3);
        assert!(sa.rounds.iter().skip(1).all(|r| r.params_up == 0));
        let ce = run_strategy(&cfg, Strategy::Centralized, &Executor::Serial).unwrap();
        assert!(ce.comm.is_none());
        assert!(ce.final_global_loss() < ce.rounds[0].global_eval_loss);
    }

    #[test]
    fn partial_participation_charges_only_participants() {
        let cfg = ExperimentConfig {
            participation: 0.5,
            ..small_cfg()
        };
        let rep = run_strategy(&cfg, Strategy::Flora, &Executor::Serial).unwrap();
        let dim = cfg.dim;
        // 2 of 4 clients upload rank 2 each round
        assert_eq!(rep.rounds[2].params_up, 2 * dim.adapter_params(2));
        assert_eq!(rep.rounds[2].per_client_eval_loss.len(), 2);
    }

    #[test]
    fn privacy_shuffle_matches_plain_flora() {
        let cfg = small_cfg();
        let plain = run_strategy(&cfg, Strategy::Flora, &Executor::Serial).unwrap();
        let shuffled = run_strategy(&ExperimentConfig { privacy_shuffle: true, ..cfg }, Strategy::Flora, &Executor::Serial).unwrap();
        let diff = max_abs(&(plain.final_base.w() - shuffled.final_base.w()));
        assert!(diff < 1e-12, "{diff}");
    }
}
