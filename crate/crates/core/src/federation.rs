//! Round orchestration: sample clients, broadcast the global adapter and the
//! rank-1 scores, train locally, collect uploads, aggregate, refresh the
//! importance state, evaluate, and account for uploaded parameters.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, AggregationKind, AggregationPolicy, StaleIndexRule};
use crate::data::Dataset;
use crate::error::{HaflError, Result};
use crate::importance::{ImportanceTracker, ScoreList};
use crate::lora::{GlobalLora, LoraAdapter};
use crate::model::{evaluate, local_train, FrozenBase, TrainingConfig};
use crate::schemes::{
    apply_freezing, apply_truncation, extract_upload, make_plan, Capability, ClientCapability,
    ClientId, ClientPlan, PlanMode, UploadPayload,
};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    /// Importance-based truncation, adaptive aggregation.
    ItaLora,
    /// Importance-based freezing, adaptive aggregation.
    IfaLora,
    /// Importance-based freezing, zero-padding aggregation.
    IfzLora,
    /// Every client and the server at one rank, plain FedAvg.
    HomLora(usize),
}

impl Scheme {
    pub fn global_rank(&self, r_max: usize) -> usize {
        match *self {
            Scheme::HomLora(r) => r,
            _ => r_max,
        }
    }

    pub fn aggregation_kind(&self) -> AggregationKind {
        match self {
            Scheme::ItaLora | Scheme::IfaLora => AggregationKind::Adaptive,
            Scheme::IfzLora => AggregationKind::ZeroPadding,
            Scheme::HomLora(_) => AggregationKind::Fedavg,
        }
    }

    /// Filesystem-safe name.
    pub fn slug(&self) -> String {
        self.to_string().replace(':', "-")
    }

    fn accepts(&self, cap: &Capability) -> bool {
        matches!(
            (self, cap),
            (Scheme::ItaLora, Capability::Rank(_))
                | (
                    Scheme::IfaLora | Scheme::IfzLora,
                    Capability::FreezeRatio(_)
                )
                | (Scheme::HomLora(_), Capability::Full)
        )
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::ItaLora => f.write_str("italora"),
            Scheme::IfaLora => f.write_str("ifalora"),
            Scheme::IfzLora => f.write_str("ifzlora"),
            Scheme::HomLora(r) => write!(f, "homlora:{r}"),
        }
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "italora" => Ok(Scheme::ItaLora),
            "ifalora" => Ok(Scheme::IfaLora),
            "ifzlora" => Ok(Scheme::IfzLora),
            other => {
                let rank = other
                    .strip_prefix("homlora:")
                    .or_else(|| other.strip_prefix("homlora-"))
                    .ok_or_else(|| {
                        format!(
                            "unknown scheme `{s}` (expected italora, ifalora, ifzlora or homlora:<rank>)"
                        )
                    })?;
                match rank.parse::<usize>() {
                    Ok(r) if r > 0 => Ok(Scheme::HomLora(r)),
                    _ => Err(format!("bad HomLoRA rank in `{s}`")),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub n_clients: usize,
    pub sample_size: usize,
    pub rounds: usize,
    pub scheme: Scheme,
    /// `(count, capability)` classes; client ids are assigned in order.
    pub capability_mix: Vec<(usize, Capability)>,
    pub r_min: usize,
    pub r_max: usize,
    pub seed: u64,
    pub stale_index_rule: StaleIndexRule,
    pub importance_beta1: f64,
    pub importance_beta2: f64,
    pub lora_scale: f64,
    pub init_std: f64,
    pub bytes_per_param: usize,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(HaflError::config("n_clients", "must be >= 1"));
        }
        if self.sample_size == 0 || self.sample_size > self.n_clients {
            return Err(HaflError::config(
                "sample_size",
                format!("must lie in [1, n_clients = {}]", self.n_clients),
            ));
        }
        if self.r_min == 0 || self.r_min > self.r_max {
            return Err(HaflError::config(
                "r_min",
                "must satisfy 1 <= r_min <= r_max",
            ));
        }
        let total: usize = self.capability_mix.iter().map(|(n, _)| n).sum();
        if total != self.n_clients {
            return Err(HaflError::config(
                "capability_mix",
                format!(
                    "counts sum to {total}, expected n_clients = {}",
                    self.n_clients
                ),
            ));
        }
        for (_, cap) in &self.capability_mix {
            if !self.scheme.accepts(cap) {
                return Err(HaflError::config(
                    "capability_mix",
                    format!("capability {cap} does not fit scheme {}", self.scheme),
                ));
            }
            match *cap {
                Capability::Rank(r) if r < self.r_min || r > self.r_max => {
                    return Err(HaflError::config(
                        "capability_mix",
                        format!(
                            "rank {r} outside [r_min, r_max] = [{}, {}]",
                            self.r_min, self.r_max
                        ),
                    ));
                }
                Capability::FreezeRatio(a) if !(0.0..1.0).contains(&a) => {
                    return Err(HaflError::config(
                        "capability_mix",
                        format!("freeze ratio {a} outside [0, 1)"),
                    ));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn global_rank(&self) -> usize {
        self.scheme.global_rank(self.r_max)
    }

    /// Capability of every client id, `0..n_clients`.
    pub fn capabilities(&self) -> Vec<Capability> {
        self.capability_mix
            .iter()
            .flat_map(|(n, cap)| std::iter::repeat_n(*cap, *n))
            .collect()
    }

    pub fn policy(&self) -> AggregationPolicy {
        AggregationPolicy {
            kind: self.scheme.aggregation_kind(),
            stale_index_rule: self.stale_index_rule,
        }
    }
}

/// Uniform sample of `sample_size` distinct ids from `0..n_clients`,
/// ascending, keyed by `(seed, round)`.
pub fn sample_clients(
    n_clients: usize,
    sample_size: usize,
    seed: u64,
    round: u64,
) -> Result<Vec<ClientId>> {
    if sample_size > n_clients {
        return Err(HaflError::InvalidArgument(format!(
            "cannot sample {sample_size} of {n_clients} clients"
        )));
    }
    let mut rng = seed::rng_for(seed, &[seed::TAG_SAMPLE, round]);
    let mut ids = index::sample(&mut rng, n_clients, sample_size).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapabilityAccuracy {
    pub capability: Capability,
    pub clients: usize,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// Completed rounds after this one (1-based).
    pub round: u64,
    pub sampled: Vec<ClientId>,
    /// Scores broadcast at the start of the round.
    pub scores: ScoreList,
    pub plans: Vec<ClientPlan>,
    /// Sampled clients that produced no upload.
    pub dropped: Vec<ClientId>,
    /// False when no upload arrived and the global model was left unchanged.
    pub aggregated: bool,
    pub global_accuracy: f64,
    pub global_loss: f64,
    /// Population-weighted mean over all clients of the accuracy of the
    /// model each would receive at the next broadcast.
    pub mean_client_accuracy: f64,
    pub client_accuracy: Vec<CapabilityAccuracy>,
    pub uploaded_params: u64,
    pub uploaded_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub global: GlobalLora,
    pub tracker: ImportanceTracker,
}

/// Data a federation runs on. `shards[k]` belongs to client `k`.
#[derive(Debug, Clone)]
pub struct FederationData {
    pub base: FrozenBase,
    pub shards: Vec<Dataset>,
    pub test: Dataset,
}

/// Model client `capability` receives from `global` under broadcast `scores`.
pub fn distributed_model(
    global: &LoraAdapter,
    capability: Capability,
    scores: &ScoreList,
) -> Result<LoraAdapter> {
    let cap = ClientCapability {
        client_id: 0,
        capability,
    };
    let plan = make_plan(&cap, scores, global.rank())?;
    match plan.mode {
        PlanMode::Truncation => apply_truncation(global, &plan),
        PlanMode::Freezing => Ok(apply_freezing(global, &plan)?.0),
        PlanMode::Homogeneous => Ok(global.clone()),
    }
}

/// Test accuracy of the model each capability class would receive.
pub fn evaluate_distributed_clients(
    global: &LoraAdapter,
    scores: &ScoreList,
    capability_mix: &[(usize, Capability)],
    base: &FrozenBase,
    test: &Dataset,
) -> Result<Vec<CapabilityAccuracy>> {
    let mut out: Vec<CapabilityAccuracy> = Vec::new();
    for (count, cap) in capability_mix {
        if let Some(existing) = out.iter_mut().find(|c| c.capability == *cap) {
            existing.clients += count;
            continue;
        }
        let model = distributed_model(global, *cap, scores)?;
        let ev = evaluate(base, &model, test)?;
        out.push(CapabilityAccuracy {
            capability: *cap,
            clients: *count,
            accuracy: ev.accuracy,
            loss: ev.mean_loss,
        });
    }
    Ok(out)
}

pub struct Federation {
    config: FederationConfig,
    training: TrainingConfig,
    data: FederationData,
    capabilities: Vec<Capability>,
    state: ServerState,
}

impl Federation {
    pub fn new(
        config: FederationConfig,
        training: TrainingConfig,
        data: FederationData,
    ) -> Result<Self> {
        config.validate()?;
        training.validate()?;
        if data.shards.len() != config.n_clients {
            return Err(HaflError::shape(
                "client shards",
                config.n_clients,
                data.shards.len(),
            ));
        }
        let (d, l) = (data.base.class_count(), data.base.feature_dim());
        let r_g = config.global_rank();
        if r_g > d.min(l) {
            return Err(HaflError::config(
                "r_max",
                format!(
                    "global rank {r_g} exceeds min(class_count, feature_dim) = {}",
                    d.min(l)
                ),
            ));
        }
        let adapter =
            LoraAdapter::init_with_std(d, l, r_g, config.lora_scale, config.init_std, config.seed)?;
        let tracker = ImportanceTracker::new(
            &adapter,
            config.importance_beta1,
            config.importance_beta2,
            training.eta,
        )?;
        let capabilities = config.capabilities();
        Ok(Federation {
            config,
            training,
            data,
            capabilities,
            state: ServerState {
                global: GlobalLora::new(adapter),
                tracker,
            },
        })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.config
    }

    pub fn state(&self) -> &ServerState {
        &self.state
    }

    pub fn data(&self) -> &FederationData {
        &self.data
    }

    pub fn scores(&self) -> ScoreList {
        self.state.tracker.rank1_scores()
    }

    fn client_update(
        &self,
        id: ClientId,
        round: u64,
        scores: &ScoreList,
    ) -> Result<(ClientPlan, Option<UploadPayload>)> {
        let global = &self.state.global.adapter;
        let cap = ClientCapability {
            client_id: id,
            capability: self.capabilities[id],
        };
        let plan = make_plan(&cap, scores, global.rank())?;
        let shard = &self.data.shards[id];
        if shard.is_empty() {
            return Ok((plan, None));
        }
        let (local, mask) = match plan.mode {
            PlanMode::Truncation => {
                let local = apply_truncation(global, &plan)?;
                let mask = vec![true; local.rank()];
                (local, mask)
            }
            PlanMode::Freezing => apply_freezing(global, &plan)?,
            PlanMode::Homogeneous => (global.clone(), vec![true; global.rank()]),
        };
        let train_seed = seed::derive_seed(self.config.seed, &[seed::TAG_TRAIN, round, id as u64]);
        let trained = local_train(
            &self.data.base,
            &local,
            &mask,
            shard,
            &self.training,
            train_seed,
        )?;
        let payload = extract_upload(&trained, &plan)?;
        Ok((plan, Some(payload)))
    }

    /// One communication round. Client work runs on the current rayon pool;
    /// results are reduced in ascending client id order.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        let round = self.state.global.round;
        let sampled = sample_clients(
            self.config.n_clients,
            self.config.sample_size,
            self.config.seed,
            round,
        )?;
        let scores = self.scores();
        let results: Vec<(ClientPlan, Option<UploadPayload>)> = sampled
            .par_iter()
            .map(|&id| self.client_update(id, round, &scores))
            .collect::<Result<_>>()?;

        let mut plans = Vec::with_capacity(results.len());
        let mut payloads = Vec::with_capacity(results.len());
        let mut dropped = Vec::new();
        for (plan, payload) in results {
            match payload {
                Some(p) => payloads.push(p),
                None => dropped.push(plan.client_id),
            }
            plans.push(plan);
        }

        let uploaded_params: u64 = payloads.iter().map(|p| p.param_count() as u64).sum();
        let uploaded_bytes: u64 = payloads
            .iter()
            .map(|p| p.byte_count(self.config.bytes_per_param))
            .sum();

        let aggregated = !payloads.is_empty();
        if aggregated {
            let weights: Vec<f64> = payloads
                .iter()
                .map(|p| self.data.shards[p.client_id].len() as f64)
                .collect();
            let next = aggregate(
                &self.config.policy(),
                &self.state.global,
                &payloads,
                &weights,
            )?;
            self.state
                .tracker
                .update(next.adapter.b(), next.adapter.a())?;
            self.state.global = next;
        } else {
            // Nothing arrived: the model stays put but the round still counts.
            self.state.global.round += 1;
        }

        let global = &self.state.global.adapter;
        let ev = evaluate(&self.data.base, global, &self.data.test)?;
        let next_scores = self.scores();
        let client_accuracy = evaluate_distributed_clients(
            global,
            &next_scores,
            &self.config.capability_mix,
            &self.data.base,
            &self.data.test,
        )?;
        let population: usize = client_accuracy.iter().map(|c| c.clients).sum();
        let mean_client_accuracy = client_accuracy
            .iter()
            .map(|c| c.accuracy * c.clients as f64)
            .sum::<f64>()
            / population as f64;

        Ok(RoundReport {
            round: self.state.global.round,
            sampled,
            scores,
            plans,
            dropped,
            aggregated,
            global_accuracy: ev.accuracy,
            global_loss: ev.mean_loss,
            mean_client_accuracy,
            client_accuracy,
            uploaded_params,
            uploaded_bytes,
        })
    }

    /// Runs every configured round. `threads == 1` keeps all work on the
    /// calling thread; `0` uses rayon's default pool size.
    pub fn run(&mut self, threads: usize) -> Result<Vec<RoundReport>> {
        let rounds = self.config.rounds;
        let mut run_all =
            || -> Result<Vec<RoundReport>> { (0..rounds).map(|_| self.run_round()).collect() };
        if threads == 0 {
            return run_all();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| HaflError::ThreadPool(e.to_string()))?;
        pool.install(run_all)
    }
}

/// Builds a federation and runs all of its rounds.
pub fn run_experiment(
    config: FederationConfig,
    training: TrainingConfig,
    data: FederationData,
    threads: usize,
) -> Result<Vec<RoundReport>> {
    Federation::new(config, training, data)?.run(threads)
}
