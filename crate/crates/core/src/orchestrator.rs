//! Recursive clustered training: every live cluster runs its own rounds of
//! sampling, local training, aggregation and reward bookkeeping, and splits
//! once its interaction matrix has settled and the clustering engine finds
//! a partition worth keeping.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cluster::{fedgw_cluster, ClusterParams, ClusteringOutcome, KMeansParams};
use crate::datagen::Federation;
use crate::error::{Error, Result};
use crate::interaction::InteractionState;
use crate::metrics::{balanced_accuracy, rand_index_map};
use crate::reward::{average_reward, compute_round_stats, gaussian_rewards, GaussianWeightState, LossTrace};
use crate::rng::{derive_seed, rng_from, tag};
use crate::training::{aggregate, local_train, Aggregator, ModelParams, ModelSpec, ServerState, TrainerConfig};
use crate::{ClientId, Scalar};

/// `max(ceil(ρn), 3)`, capped at `n`. The ceiling tolerates the rounding in
/// products such as `0.1 · 30`.
pub fn cohort_size(rho: f64, n: usize) -> usize {
    let raw = (rho * n as f64 - 1e-9).ceil().max(0.0) as usize;
    raw.max(3).min(n)
}

/// Smallest cluster size that keeps the total cohort size unchanged across
/// splits, `ceil(3/ρ)`.
pub fn default_k_min(rho: f64) -> usize {
    (3.0 / rho - 1e-9).ceil() as usize
}

/// Participation sampler that always draws from the least-sampled members
/// first, shuffling within a stratum of equal counts.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState {
    pub rho: f64,
    pub counts: BTreeMap<ClientId, u64>,
    pub rng_seed: u64,
    draws: u64,
}

impl SamplerState {
    pub fn new(members: &[ClientId], rho: f64, rng_seed: u64) -> Result<Self> {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::config(format!("participation rate {rho} must lie in (0, 1]")));
        }
        Ok(Self { rho, counts: members.iter().map(|&c| (c, 0)).collect(), rng_seed, draws: 0 })
    }

    pub fn cohort_size(&self) -> usize {
        cohort_size(self.rho, self.counts.len())
    }

    /// Draws the next cohort, returned in ascending id order.
    pub fn sample(&mut self) -> Result<Vec<ClientId>> {
        let n = self.counts.len();
        if n < 3 {
            return Err(Error::ClusterTooSmall(n));
        }
        let want = self.cohort_size();
        let mut rng = rng_from(self.rng_seed, &[tag::SAMPLER, self.draws]);
        self.draws += 1;
        let mut strata: BTreeMap<u64, Vec<ClientId>> = BTreeMap::new();
        for (&c, &k) in &self.counts {
            strata.entry(k).or_default().push(c);
        }
        let mut cohort = Vec::with_capacity(want);
        for (_, mut stratum) in strata {
            let room = want - cohort.len();
            if room == 0 {
                break;
            }
            if stratum.len() > room {
                stratum.shuffle(&mut rng);
                stratum.truncate(room);
            }
            cohort.extend(stratum);
        }
        cohort.sort();
        for c in &cohort {
            *self.counts.get_mut(c).expect("member") += 1;
        }
        Ok(cohort)
    }
}

/// Source of local updates; the orchestrator does not care how they are made.
pub trait Trainer<T> {
    /// Trains `client` from `model`, returning its update, loss trace and
    /// training-set size.
    fn train(&self, model: &ModelParams<T>, client: ClientId, round: u64) -> Result<(ModelParams<T>, LossTrace<T>, usize)>;
}

/// Trains real models on a generated federation.
pub struct FederationTrainer<'a, T> {
    pub federation: &'a Federation<T>,
    pub spec: ModelSpec,
    pub config: TrainerConfig,
    pub seed: u64,
}

impl<T: Scalar> Trainer<T> for FederationTrainer<'_, T> {
    fn train(&self, model: &ModelParams<T>, client: ClientId, round: u64) -> Result<(ModelParams<T>, LossTrace<T>, usize)> {
        let data =
            self.federation.client(client).ok_or_else(|| Error::MissingInput(format!("client {client} is not in the federation")))?;
        let seed = derive_seed(self.seed, &[tag::BATCHES, round, client.0 as u64]);
        let (params, trace) = local_train(&self.spec, model, &data.train, &self.config, client, seed)?;
        Ok((params, trace, data.train.len()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterNode<T> {
    pub id: usize,
    /// Sorted ascending.
    pub members: Vec<ClientId>,
    pub model: ModelParams<T>,
    pub interaction: InteractionState<T>,
    pub weights: GaussianWeightState<T>,
    pub sampler: SamplerState,
    pub server: ServerState<T>,
}

impl<T: Scalar> ClusterNode<T> {
    pub fn new(id: usize, mut members: Vec<ClientId>, model: ModelParams<T>, alpha: f64, rho: f64, seed: u64) -> Result<Self> {
        members.sort();
        members.dedup();
        Ok(Self {
            id,
            interaction: InteractionState::new(members.clone(), T::of(alpha))?,
            weights: GaussianWeightState::new(members.iter().copied()),
            sampler: SamplerState::new(&members, rho, derive_seed(seed, &[tag::SAMPLER, id as u64]))?,
            server: ServerState::default(),
            members,
            model,
        })
    }
}

/// Per-round result of one cluster.
#[derive(Debug, Clone, PartialEq)]
pub enum RoundOutcome<T> {
    Completed {
        cohort: Vec<ClientId>,
        omegas: BTreeMap<ClientId, T>,
        mean_loss: T,
    },
    /// A client diverged; the node was left exactly as it was.
    Aborted {
        client: usize,
        detail: String,
    },
}

/// Samples a cohort, trains it, aggregates, and updates rewards, weights and
/// the interaction matrix.
pub fn run_round<T: Scalar>(
    node: &mut ClusterNode<T>,
    trainer: &impl Trainer<T>,
    aggregator: &Aggregator,
    round: u64,
) -> Result<RoundOutcome<T>> {
    let mut sampler = node.sampler.clone();
    let cohort = sampler.sample()?;
    let mut updates = Vec::with_capacity(cohort.len());
    let mut traces = Vec::with_capacity(cohort.len());
    for &c in &cohort {
        match trainer.train(&node.model, c, round) {
            Ok((params, trace, n)) => {
                updates.push((params, n));
                traces.push(trace);
            }
            Err(Error::Divergence { client, detail }) => return Ok(RoundOutcome::Aborted { client, detail }),
            Err(e) => return Err(e),
        }
    }
    let mut server = node.server.clone();
    let model = aggregate(&updates, aggregator, &node.model, &mut server)?;
    if !model.is_finite() {
        return Ok(RoundOutcome::Aborted { client: cohort[0].0, detail: "aggregated model is not finite".into() });
    }
    let stats = compute_round_stats(&traces)?;
    let mut omegas = BTreeMap::new();
    for trace in &traces {
        // a reward can only vanish through underflow of the kernel
        let omega = average_reward(&gaussian_rewards(trace, &stats)?)?.max(T::min_positive_value());
        omegas.insert(trace.client, omega);
    }
    let alpha = node.interaction.alpha;
    let mut weights = node.weights.clone();
    for (&c, &w) in &omegas {
        weights.update_weight(c, w, alpha)?;
    }
    let mut interaction = node.interaction.clone();
    interaction.update_interaction(&cohort, &omegas)?;
    let mean_loss = stats.mean.iter().copied().sum::<T>() / T::of_usize(stats.mean.len());

    node.sampler = sampler;
    node.server = server;
    node.model = model;
    node.weights = weights;
    node.interaction = interaction;
    Ok(RoundOutcome::Completed { cohort, omegas, mean_loss })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitParams {
    pub epsilon: f64,
    pub beta: f64,
    pub n_max: usize,
    pub k_min: usize,
    pub rho: f64,
    pub kmeans: KMeansParams,
}

/// Children of `node` under `labels`: each gets the parent's model, the
/// parent's interaction matrix restricted to its members with the
/// convergence signal reset, its members' weights, and a fresh sampler.
/// Ids run from `first_id` in label order.
pub fn split_node<T: Scalar>(
    node: &ClusterNode<T>,
    labels: &BTreeMap<ClientId, usize>,
    first_id: usize,
    seed: u64,
) -> Result<Vec<ClusterNode<T>>> {
    if labels.len() != node.members.len() || node.members.iter().any(|m| !labels.contains_key(m)) {
        return Err(Error::shape("split labels must cover exactly the cluster's members"));
    }
    let mut groups: BTreeMap<usize, Vec<ClientId>> = BTreeMap::new();
    for (&c, &l) in labels {
        groups.entry(l).or_default().push(c);
    }
    groups
        .into_values()
        .enumerate()
        .map(|(i, members)| {
            let id = first_id + i;
            Ok(ClusterNode {
                id,
                interaction: node.interaction.filter(&members)?,
                weights: node.weights.retain(&members),
                sampler: SamplerState::new(&members, node.sampler.rho, derive_seed(seed, &[tag::SAMPLER, id as u64]))?,
                server: ServerState::default(),
                model: node.model.clone(),
                members,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitDecision<T> {
    /// Interaction matrix not yet converged; clustering was not attempted.
    Unconverged,
    /// Clustering ran and kept the cluster whole.
    Kept(ClusteringOutcome<T>),
    Split {
        outcome: ClusteringOutcome<T>,
        children: Vec<ClusterNode<T>>,
    },
}

pub fn maybe_split<T: Scalar>(
    node: &ClusterNode<T>,
    params: &SplitParams,
    first_id: usize,
    seed: u64,
    round: u64,
) -> Result<SplitDecision<T>> {
    if !node.interaction.converged(T::of(params.epsilon)) {
        return Ok(SplitDecision::Unconverged);
    }
    if node.members.len() < 2 * params.k_min.max(2) {
        // no admissible split exists; avoids a pointless eigendecomposition
        return Ok(SplitDecision::Unconverged);
    }
    let cluster_params = ClusterParams {
        beta: T::of(params.beta),
        n_max: params.n_max,
        k_min: params.k_min,
        seed: derive_seed(seed, &[tag::CLUSTERING, node.id as u64, round]),
        kmeans: params.kmeans,
    };
    let outcome = fedgw_cluster(&node.interaction, &cluster_params)?;
    if outcome.n_cl == 1 {
        return Ok(SplitDecision::Kept(outcome));
    }
    let children = split_node(node, &outcome.labels, first_id, seed)?;
    Ok(SplitDecision::Split { outcome, children })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FedGwcParams {
    pub alpha: f64,
    pub epsilon: f64,
    pub beta: f64,
    pub n_max: usize,
    pub k_min: usize,
    pub rho: f64,
    /// When false no split is ever attempted, giving the single-model baseline.
    pub clustering: bool,
}

impl FedGwcParams {
    pub fn with_rho(rho: f64) -> Self {
        Self { alpha: rho, epsilon: 1e-5, beta: 0.5, n_max: 5, k_min: default_k_min(rho), rho, clustering: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::config(format!("rho = {} must lie in (0, 1]", self.rho)));
        }
        crate::reward::check_alpha(self.alpha)?;
        if !(self.epsilon > 0.0 && self.beta > 0.0) {
            return Err(Error::config("epsilon and beta must be positive"));
        }
        if self.n_max < 2 {
            return Err(Error::config("n_max must be at least 2"));
        }
        if self.k_min < 3 {
            return Err(Error::config("k_min must be at least 3 so every cluster can sample a cohort"));
        }
        Ok(())
    }

    fn split_params(&self) -> SplitParams {
        SplitParams {
            epsilon: self.epsilon,
            beta: self.beta,
            n_max: self.n_max,
            k_min: self.k_min,
            rho: self.rho,
            kmeans: KMeansParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub rounds: u64,
    pub seed: u64,
    pub aggregator: Aggregator,
    pub trainer: TrainerConfig,
    pub model: ModelSpec,
    /// Evaluate every this many rounds; 0 evaluates only at the end.
    pub eval_every: u64,
    pub fedgwc: FedGwcParams,
}

/// One line of the experiment log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Round {
        round: u64,
        cluster: usize,
        cohort: Vec<ClientId>,
        mean_loss: f64,
        #[serde(deserialize_with = "string_keys")]
        omegas: BTreeMap<ClientId, f64>,
        mse_signal: f64,
        n_clusters: usize,
    },
    Aborted {
        round: u64,
        cluster: usize,
        client: usize,
        detail: String,
    },
    /// Clustering ran on a converged cluster but kept it whole.
    Kept {
        round: u64,
        cluster: usize,
        #[serde(deserialize_with = "string_keys")]
        db_scores: BTreeMap<usize, f64>,
        rejected: Vec<usize>,
    },
    Split {
        round: u64,
        parent: usize,
        children: Vec<usize>,
        members: Vec<Vec<ClientId>>,
        #[serde(deserialize_with = "string_keys")]
        db_scores: BTreeMap<usize, f64>,
        rejected: Vec<usize>,
    },
    Eval {
        round: u64,
        cluster: usize,
        balanced_accuracy: f64,
    },
    Summary {
        rounds: u64,
        n_clusters: usize,
        #[serde(deserialize_with = "string_keys")]
        clusters: BTreeMap<usize, Vec<ClientId>>,
        #[serde(deserialize_with = "string_keys")]
        accuracy: BTreeMap<usize, f64>,
        mean_accuracy: f64,
        aborted_rounds: usize,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        rand_index: Option<f64>,
    },
}

// JSON object keys arrive as strings, and serde cannot coerce them to
// integers through the buffering an internally tagged enum needs.
fn string_keys<'de, D, K, V>(d: D) -> std::result::Result<BTreeMap<K, V>, D::Error>
where
    D: serde::Deserializer<'de>,
    K: std::str::FromStr + Ord,
    K::Err: std::fmt::Display,
    V: Deserialize<'de>,
{
    BTreeMap::<String, V>::deserialize(d)?.into_iter().map(|(k, v)| k.parse().map(|k| (k, v)).map_err(serde::de::Error::custom)).collect()
}

fn db_to_f64<T: Scalar>(scores: &BTreeMap<usize, T>) -> BTreeMap<usize, f64> {
    scores.iter().map(|(&n, &v)| (n, v.to_f64_lossy())).collect()
}

/// All live clusters plus the log accumulated so far.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment<T> {
    pub nodes: Vec<ClusterNode<T>>,
    pub log: Vec<LogRecord>,
    pub round: u64,
    next_id: usize,
    seed: u64,
    aggregator: Aggregator,
    fedgwc: FedGwcParams,
}

impl<T: Scalar> Experiment<T> {
    pub fn new(clients: Vec<ClientId>, model: ModelParams<T>, seed: u64, aggregator: Aggregator, fedgwc: FedGwcParams) -> Result<Self> {
        fedgwc.validate()?;
        if clients.len() < 3 {
            return Err(Error::ClusterTooSmall(clients.len()));
        }
        let root = ClusterNode::new(0, clients, model, fedgwc.alpha, fedgwc.rho, seed)?;
        Ok(Self { nodes: vec![root], log: Vec::new(), round: 0, next_id: 1, seed, aggregator, fedgwc })
    }

    /// Client → cluster id for the live clusters.
    pub fn partition(&self) -> BTreeMap<ClientId, usize> {
        self.nodes.iter().flat_map(|n| n.members.iter().map(move |&c| (c, n.id))).collect()
    }

    pub fn aborted_rounds(&self) -> usize {
        self.log.iter().filter(|r| matches!(r, LogRecord::Aborted { .. })).count()
    }

    /// One global round: every live cluster, in id order, trains and then
    /// considers splitting.
    pub fn step(&mut self, trainer: &impl Trainer<T>) -> Result<()> {
        self.round += 1;
        let round = self.round;
        let params = self.fedgwc.split_params();
        let mut next = Vec::with_capacity(self.nodes.len());
        for mut node in std::mem::take(&mut self.nodes) {
            match run_round(&mut node, trainer, &self.aggregator, round)? {
                RoundOutcome::Completed { cohort, omegas, mean_loss } => self.log.push(LogRecord::Round {
                    round,
                    cluster: node.id,
                    cohort,
                    mean_loss: mean_loss.to_f64_lossy(),
                    omegas: omegas.iter().map(|(&c, &w)| (c, w.to_f64_lossy())).collect(),
                    mse_signal: node.interaction.mse_signal.to_f64_lossy(),
                    n_clusters: 0,
                }),
                RoundOutcome::Aborted { client, detail } => {
                    self.log.push(LogRecord::Aborted { round, cluster: node.id, client, detail });
                    next.push(node);
                    continue;
                }
            }
            if !self.fedgwc.clustering {
                next.push(node);
                continue;
            }
            match maybe_split(&node, &params, self.next_id, self.seed, round)? {
                SplitDecision::Unconverged => next.push(node),
                SplitDecision::Kept(outcome) => {
                    self.log.push(LogRecord::Kept {
                        round,
                        cluster: node.id,
                        db_scores: db_to_f64(&outcome.db_scores),
                        rejected: outcome.rejected,
                    });
                    next.push(node);
                }
                SplitDecision::Split { outcome, children } => {
                    self.next_id += children.len();
                    self.log.push(LogRecord::Split {
                        round,
                        parent: node.id,
                        children: children.iter().map(|c| c.id).collect(),
                        members: children.iter().map(|c| c.members.clone()).collect(),
                        db_scores: db_to_f64(&outcome.db_scores),
                        rejected: outcome.rejected,
                    });
                    next.extend(children);
                }
            }
        }
        next.sort_by_key(|n| n.id);
        self.nodes = next;
        // the cluster count is only known once every node has had its turn
        let n = self.nodes.len();
        for rec in self.log.iter_mut().rev() {
            match rec {
                LogRecord::Round { round: r, n_clusters, .. } if *r == round => *n_clusters = n,
                LogRecord::Round { .. } => break,
                _ => {}
            }
        }
        Ok(())
    }
}

/// Final state of a completed run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentLog<T> {
    pub records: Vec<LogRecord>,
    pub clusters: Vec<ClusterNode<T>>,
}

impl<T> ExperimentLog<T> {
    pub fn summary(&self) -> Option<&LogRecord> {
        self.records.iter().rev().find(|r| matches!(r, LogRecord::Summary { .. }))
    }

    pub fn split_rounds(&self) -> Vec<u64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Split { round, .. } => Some(*round),
                _ => None,
            })
            .collect()
    }

    /// Mean balanced accuracy across all clients at each evaluated round,
    /// weighting clusters by size.
    pub fn accuracy_series(&self) -> Vec<(u64, f64)> {
        let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
        let mut out: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
        for r in &self.records {
            match r {
                LogRecord::Round { cluster, .. } => {
                    sizes.entry(*cluster).or_insert(0);
                }
                LogRecord::Eval { round, balanced_accuracy, cluster } => {
                    let e = out.entry(*round).or_insert((0.0, 0));
                    let w = sizes.get(cluster).copied().unwrap_or(1).max(1);
                    e.0 += balanced_accuracy * w as f64;
                    e.1 += w;
                }
                LogRecord::Split { children, members, .. } => {
                    for (c, m) in children.iter().zip(members) {
                        sizes.insert(*c, m.len());
                    }
                }
                _ => {}
            }
        }
        out.into_iter().map(|(r, (s, w))| (r, s / w as f64)).collect()
    }
}

/// Per-client balanced accuracy of `model` on the clients' test sets.
pub fn evaluate_clients<T: Scalar>(
    federation: &Federation<T>,
    spec: &ModelSpec,
    model: &ModelParams<T>,
    members: &[ClientId],
) -> Result<BTreeMap<ClientId, f64>> {
    members
        .iter()
        .map(|&c| {
            let data = &federation.client(c).ok_or_else(|| Error::MissingInput(format!("client {c} is not in the federation")))?.test;
            Ok((c, balanced_accuracy(&spec.predict_all(model, data), &data.labels, data.classes)?))
        })
        .collect()
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n.max(1) as f64
}

/// Runs the full procedure on a federation from a single root cluster with
/// a freshly initialised model.
pub fn run_experiment<T: Scalar>(settings: &RunSettings, federation: &Federation<T>) -> Result<ExperimentLog<T>> {
    settings.trainer.validate()?;
    if settings.model.inputs != federation.spec.dim || settings.model.classes != federation.spec.classes {
        return Err(Error::config(format!(
            "model expects {} features and {} classes, federation has {} and {}",
            settings.model.inputs, settings.model.classes, federation.spec.dim, federation.spec.classes
        )));
    }
    let trainer = FederationTrainer { federation, spec: settings.model, config: settings.trainer, seed: settings.seed };
    let model = settings.model.init(derive_seed(settings.seed, &[tag::MODEL_INIT]));
    let mut exp = Experiment::new(federation.ids(), model, settings.seed, settings.aggregator, settings.fedgwc)?;
    let eval = |exp: &Experiment<T>, log: &mut Vec<LogRecord>| -> Result<BTreeMap<usize, f64>> {
        let mut acc = BTreeMap::new();
        for node in &exp.nodes {
            let per_client = evaluate_clients(federation, &settings.model, &node.model, &node.members)?;
            let a = mean(per_client.values().copied());
            log.push(LogRecord::Eval { round: exp.round, cluster: node.id, balanced_accuracy: a });
            acc.insert(node.id, a);
        }
        Ok(acc)
    };
    for t in 1..=settings.rounds {
        exp.step(&trainer)?;
        if settings.eval_every > 0 && t % settings.eval_every == 0 && t != settings.rounds {
            let mut log = std::mem::take(&mut exp.log);
            eval(&exp, &mut log)?;
            exp.log = log;
        }
    }
    let mut log = std::mem::take(&mut exp.log);
    let accuracy = eval(&exp, &mut log)?;
    let sizes: BTreeMap<usize, usize> = exp.nodes.iter().map(|n| (n.id, n.members.len())).collect();
    let mean_accuracy = accuracy.iter().map(|(id, a)| a * sizes[id] as f64).sum::<f64>() / federation.clients.len() as f64;
    let aborted_rounds = log.iter().filter(|r| matches!(r, LogRecord::Aborted { .. })).count();
    let rand_index = match federation.ground_truth() {
        Some(gt) => Some(rand_index_map(&exp.partition(), &gt)?),
        None => None,
    };
    log.push(LogRecord::Summary {
        rounds: exp.round,
        n_clusters: exp.nodes.len(),
        clusters: exp.nodes.iter().map(|n| (n.id, n.members.clone())).collect(),
        accuracy,
        mean_accuracy,
        aborted_rounds,
        rand_index,
    });
    Ok(ExperimentLog { records: log, clusters: exp.nodes })
}
