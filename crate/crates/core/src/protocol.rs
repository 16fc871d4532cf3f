//! Federated round orchestration and communication accounting.
//!
//! One round:
//!
//! 1. every participating client uploads `Δᵢ = w_A,i − w_B` (its pending delta);
//! 2. the server moves the consensus model, `w_B ← w_B + η·mean(Δ)`, trains the
//!    aggregator on the uploaded head slices and computes one personalized head
//!    delta per client;
//! 3. each client applies `w_A ← FineTune(w_A + γ·Δᵖᵉʳˢ)` (head coordinates only)
//!    and records its next delta against the new `w_B`.
//!
//! Clients that have not uploaded yet (round 0) first fine-tune from their copy
//! of `w_B` to obtain a delta.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregator::{self, AggregatorConfig, AggregatorState, HeadDeltas};
use crate::data::WindowedDataset;
use crate::error::{Error, Result};
use crate::forecaster::{local_train, ForecasterConfig, ForecasterModel};
use crate::metrics::{evaluate, EvalInput, EvalReport};
use crate::params::{add_scaled, compute_delta, mean_deltas, scatter_head, ClientId, DeltaUpdate, LayerKind, Layout, ParameterVector};

/// Named RNG sub-streams derived from the master seed.
pub mod streams {
    pub const SERVER: u64 = 0;
    pub const DATA: u64 = 1;
    pub const MODEL_INIT: u64 = 2;
    pub const PARTICIPATION: u64 = 3;
    /// Client `i` uses stream `CLIENT_BASE + i`.
    pub const CLIENT_BASE: u64 = 16;
}

/// Independent ChaCha stream `stream` under `master_seed`.
pub fn stream_rng(master_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    /// Graph-attention mixture of experts.
    Game,
    /// Uniform mean over peers in place of learned attention.
    Mean,
    /// One shared scoring expert, no gating.
    SingleAttention,
    /// Plain averaging; clients restart from `w_B` every round.
    Fedavg,
    /// Consensus plus proximal local training, no personalized stream.
    FedproxOnly,
    /// No communication at all.
    LocalOnly,
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 6] = [
        AggregatorKind::Game,
        AggregatorKind::Mean,
        AggregatorKind::SingleAttention,
        AggregatorKind::Fedavg,
        AggregatorKind::FedproxOnly,
        AggregatorKind::LocalOnly,
    ];

    /// Kinds that ship a personalized head delta downstream.
    pub fn is_personalized(self) -> bool {
        matches!(self, AggregatorKind::Game | AggregatorKind::Mean | AggregatorKind::SingleAttention)
    }

    pub fn name(self) -> &'static str {
        match self {
            AggregatorKind::Game => "game",
            AggregatorKind::Mean => "mean",
            AggregatorKind::SingleAttention => "single_attention",
            AggregatorKind::Fedavg => "fedavg",
            AggregatorKind::FedproxOnly => "fedprox_only",
            AggregatorKind::LocalOnly => "local_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl std::fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How a client folds its personalized head delta into its private model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientUpdate {
    /// `w_A + γ·Δᵖᵉʳˢ`.
    #[default]
    Additive,
    /// `w_A + γ·(Δᵖᵉʳˢ − Δᵤ,ᵢ)`: at `γ = 1` the head becomes `w_B + Δᵖᵉʳˢ`, a convex
    /// combination of the clients' heads.
    Anchored,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// Server consensus step `η`.
    pub eta: f64,
    /// Client personalization step `γ`.
    pub gamma: f64,
    pub rounds: u64,
    pub aggregator_kind: AggregatorKind,
    /// Fraction of clients sampled each round.
    pub participation: f64,
    pub client_update: ClientUpdate,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            eta: 1.0,
            gamma: 0.2,
            rounds: 30,
            aggregator_kind: AggregatorKind::Game,
            participation: 1.0,
            client_update: ClientUpdate::Additive,
        }
    }
}

impl HyperParams {
    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            out.push(format!("{prefix}eta must be finite and >= 0"));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            out.push(format!("{prefix}gamma must be finite and >= 0"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            out.push(format!("{prefix}participation must lie in (0, 1]"));
        }
        out
    }
}

/// One client's data as seen by the simulator.
#[derive(Clone, Debug)]
pub struct ClientData {
    pub id: ClientId,
    pub name: String,
    pub cluster: Option<usize>,
    pub train: WindowedDataset,
    pub test: WindowedDataset,
}

#[derive(Clone, Debug)]
pub struct RoundState {
    /// Rounds completed so far.
    pub round: u64,
    /// Consensus model `w_B`.
    pub global: ForecasterModel,
    /// Private models `w_A,i`.
    pub clients: BTreeMap<ClientId, ForecasterModel>,
    /// Each client's current `w_A,i − w_B`; empty before the first upload.
    pub pending: BTreeMap<ClientId, DeltaUpdate>,
    pub aggregator: Option<AggregatorState>,
    client_rngs: BTreeMap<ClientId, ChaCha8Rng>,
    participation_rng: ChaCha8Rng,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// Zero-based index of this round.
    pub round: u64,
    pub aggregator_kind: AggregatorKind,
    pub clients: Vec<ClientId>,
    pub participants: Vec<ClientId>,
    /// Mean local-training loss per client (`None` when it sat the round out).
    pub train_loss: Vec<Option<f64>>,
    /// Mean meta-loss of the shipped personalized deltas.
    pub meta_loss: Option<f64>,
    /// Meta-loss seen by the last aggregator training step (gate noise included).
    pub aggregator_train_loss: Option<f64>,
    /// `attention[i][j] = w_ij` in `clients` order, zero diagonal.
    pub attention: Option<Vec<Vec<f64>>>,
    /// Gate mix `cᵢ` per client.
    pub gate_mix: Option<Vec<Vec<f64>>>,
    pub upstream_bytes: u64,
    pub downstream_bytes: u64,
    /// Excluded from serialized reports so reruns are byte-identical.
    #[serde(skip)]
    pub wall_time: Duration,
}

pub struct Federation {
    pub hyper: HyperParams,
    pub forecaster: ForecasterConfig,
    pub aggregator: AggregatorConfig,
    pub master_seed: u64,
    clients: Vec<ClientData>,
}

impl Federation {
    pub fn new(
        hyper: HyperParams,
        forecaster: ForecasterConfig,
        aggregator: AggregatorConfig,
        master_seed: u64,
        mut clients: Vec<ClientData>,
    ) -> Result<Self> {
        let mut problems = hyper.problems("protocol.");
        problems.extend(forecaster.problems("forecaster."));
        problems.extend(aggregator.problems("aggregator."));
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        if clients.is_empty() {
            return Err(Error::usage("a federation needs at least one client"));
        }
        clients.sort_by_key(|c| c.id);
        if clients.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(Error::usage("duplicate client ids"));
        }
        for c in &clients {
            if c.train.is_empty() {
                return Err(Error::usage(format!("{} ({}) has no training windows", c.id, c.name)));
            }
        }
        Ok(Self {
            hyper,
            forecaster,
            aggregator,
            master_seed,
            clients,
        })
    }

    pub fn clients(&self) -> &[ClientData] {
        &self.clients
    }

    pub fn client_ids(&self) -> Vec<ClientId> {
        self.clients.iter().map(|c| c.id).collect()
    }

    /// Cluster label per client, when every client has one.
    pub fn cluster_labels(&self) -> Option<BTreeMap<ClientId, usize>> {
        self.clients.iter().map(|c| c.cluster.map(|k| (c.id, k))).collect()
    }

    /// Round-0 state: `w_B` drawn from the model-init stream and copied to every client.
    pub fn initial_state(&self) -> Result<RoundState> {
        let mut init_rng = stream_rng(self.master_seed, streams::MODEL_INIT);
        let global = ForecasterModel::init(self.forecaster.clone(), &mut init_rng)?;
        let ids = self.client_ids();
        let aggregator = match self.hyper.aggregator_kind {
            AggregatorKind::Game => Some(self.aggregator.clone()),
            AggregatorKind::SingleAttention => Some(self.aggregator.single_attention()),
            _ => None,
        }
        .map(|cfg| {
            AggregatorState::new(
                cfg,
                global.layout().head_len(),
                &ids,
                stream_rng(self.master_seed, streams::SERVER),
            )
        })
        .transpose()?;
        Ok(RoundState {
            round: 0,
            clients: ids.iter().map(|id| (*id, global.clone())).collect(),
            pending: BTreeMap::new(),
            aggregator,
            client_rngs: ids
                .iter()
                .map(|id| (*id, stream_rng(self.master_seed, streams::CLIENT_BASE + u64::from(id.0))))
                .collect(),
            participation_rng: stream_rng(self.master_seed, streams::PARTICIPATION),
            global,
        })
    }

    /// Runs one round. On error the input state is untouched and the error names the round.
    pub fn run_round(&self, state: &RoundState) -> Result<(RoundState, RoundReport)> {
        self.step(state).map_err(|e| e.in_round(state.round))
    }

    /// Runs `rounds` rounds from `state`, returning the final state and every report.
    pub fn run(&self, mut state: RoundState, rounds: u64) -> Result<(RoundState, Vec<RoundReport>)> {
        let mut reports = Vec::with_capacity(rounds as usize);
        for _ in 0..rounds {
            let (next, report) = self.run_round(&state)?;
            log::info!(
                "round {} done in {:.2?} (meta-loss {:?})",
                report.round,
                report.wall_time,
                report.meta_loss
            );
            state = next;
            reports.push(report);
        }
        Ok((state, reports))
    }

    /// Model each client is scored with: `w_B` under FedAvg, its private model otherwise.
    pub fn deployed_model<'a>(&self, state: &'a RoundState, client: ClientId) -> Result<&'a ForecasterModel> {
        if self.hyper.aggregator_kind == AggregatorKind::Fedavg {
            return Ok(&state.global);
        }
        state
            .clients
            .get(&client)
            .ok_or_else(|| Error::usage(format!("no model for {client}")))
    }

    /// Test-split evaluation of the deployed models.
    pub fn evaluate(&self, state: &RoundState) -> Result<EvalReport> {
        let inputs = self
            .clients
            .iter()
            .map(|c| {
                Ok(EvalInput {
                    client_id: c.id,
                    name: &c.name,
                    model: self.deployed_model(state, c.id)?,
                    data: &c.test,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        evaluate(&inputs)
    }

    fn train_config(&self) -> ForecasterConfig {
        let mut cfg = self.forecaster.clone();
        if matches!(self.hyper.aggregator_kind, AggregatorKind::Fedavg | AggregatorKind::LocalOnly) {
            cfg.prox_mu = 0.0;
        }
        cfg
    }

    fn sample_participants(&self, rng: &mut ChaCha8Rng) -> Vec<ClientId> {
        let ids = self.client_ids();
        if self.hyper.participation >= 1.0 {
            return ids;
        }
        let want = ((self.hyper.participation * ids.len() as f64).ceil() as usize).clamp(1, ids.len());
        let mut picked: Vec<ClientId> = index::sample(rng, ids.len(), want).into_iter().map(|i| ids[i]).collect();
        picked.sort();
        picked
    }

    fn step(&self, state: &RoundState) -> Result<(RoundState, RoundReport)> {
        let started = Instant::now();
        let kind = self.hyper.aggregator_kind;
        let round = state.round;
        let train_cfg = self.train_config();
        let mut next = state.clone();
        let participants = self.sample_participants(&mut next.participation_rng);
        let data_of: BTreeMap<ClientId, &ClientData> = self.clients.iter().map(|c| (c.id, c)).collect();

        // (1) bootstrap uploads for clients that have never trained
        let fresh: Vec<ClientId> = participants.iter().copied().filter(|id| !next.pending.contains_key(id)).collect();
        let global_params = next.global.params().clone();
        let boot = self.train_clients(&fresh, &mut next, &data_of, &train_cfg, |_, model| Ok((model.clone(), global_params.clone())))?;
        for (id, (model, _)) in boot {
            next.pending.insert(id, compute_delta(model.params(), &global_params, round, id)?);
            next.clients.insert(id, model);
        }
        let uploads: Vec<DeltaUpdate> = participants.iter().map(|id| next.pending[id].clone()).collect();

        // (2) consensus, aggregator training, personalization
        if kind != AggregatorKind::LocalOnly {
            let mean = mean_deltas(&uploads)?;
            let moved = add_scaled(next.global.params(), mean.values(), self.hyper.eta)?;
            next.global = next.global.with_params(moved)?;
        }
        let head_deltas: HeadDeltas = uploads.iter().map(|u| (u.client_id, u.head.clone())).collect();
        let mut aggregator_train_loss = None;
        if let Some(agg) = next.aggregator.as_mut() {
            if head_deltas.len() >= 2 {
                for _ in 0..self.aggregator.steps_per_round {
                    aggregator_train_loss = Some(agg.train_step(&head_deltas)?);
                }
            }
        }
        let (personalized, rows) = match kind {
            AggregatorKind::Game => {
                let a = next.aggregator.as_ref().expect("game state").aggregate(&head_deltas)?;
                (Some(a.deltas), Some(a.rows))
            }
            AggregatorKind::SingleAttention => {
                let a = aggregator::aggregate_single_attention(next.aggregator.as_ref().expect("attention state"), &head_deltas)?;
                (Some(a.deltas), Some(a.rows))
            }
            AggregatorKind::Mean => (Some(aggregator::aggregate_mean(&head_deltas, self.aggregator.w_self)?), None),
            _ => (None, None),
        };
        let meta_loss = match &personalized {
            Some(p) if p.len() >= 2 => {
                let mut total = 0.0;
                for (id, d) in p {
                    total += aggregator::meta_loss(d, &head_deltas[id], self.aggregator.alpha, self.aggregator.beta)?;
                }
                Some(total / p.len() as f64)
            }
            _ => None,
        };

        // (3) client fine-tuning from the personalized starting point
        let new_global = next.global.params().clone();
        let zero = ParameterVector::zeros(next.global.layout().clone());
        let gamma = self.hyper.gamma;
        let global_model = next.global.clone();
        let tuned = self.train_clients(&participants, &mut next, &data_of, &train_cfg, |id, model| {
            let start = match kind {
                AggregatorKind::Fedavg => global_model.clone(),
                AggregatorKind::Game | AggregatorKind::Mean | AggregatorKind::SingleAttention => {
                    let pers = &personalized.as_ref().expect("personalized kinds produce deltas")[&id];
                    let step = match self.hyper.client_update {
                        ClientUpdate::Additive => pers.clone(),
                        ClientUpdate::Anchored => pers.iter().zip(&head_deltas[&id]).map(|(p, u)| p - u).collect(),
                    };
                    let lift = scatter_head(&zero, &step)?;
                    model.with_params(add_scaled(model.params(), lift.values(), gamma)?)?
                }
                AggregatorKind::FedproxOnly | AggregatorKind::LocalOnly => model.clone(),
            };
            let anchor = if kind == AggregatorKind::LocalOnly {
                start.params().clone()
            } else {
                new_global.clone()
            };
            Ok((start, anchor))
        })?;
        let mut train_loss: BTreeMap<ClientId, f64> = BTreeMap::new();
        for (id, (model, loss)) in tuned {
            train_loss.insert(id, loss);
            next.clients.insert(id, model);
        }
        let next_round = round + 1;
        for (id, model) in &next.clients {
            next.pending.insert(*id, compute_delta(model.params(), &new_global, next_round, *id)?);
        }
        next.round = next_round;

        let ids = self.client_ids();
        let pos: BTreeMap<ClientId, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let n = ids.len();
        let (attention, gate_mix) = match (&rows, kind) {
            (Some(rows), _) => {
                let mut att = vec![vec![0.0; n]; n];
                let mut mix = vec![Vec::new(); n];
                for row in rows {
                    let i = pos[&row.client_id];
                    for (nb, w) in row.neighbors.iter().zip(&row.weights) {
                        att[i][pos[nb]] = *w;
                    }
                    mix[i] = row.expert_mix.clone();
                }
                (Some(att), Some(mix))
            }
            (None, AggregatorKind::Mean) => {
                let mut att = vec![vec![0.0; n]; n];
                let p = participants.len();
                if p >= 2 {
                    for a in &participants {
                        for b in &participants {
                            if a != b {
                                att[pos[a]][pos[b]] = 1.0 / (p - 1) as f64;
                            }
                        }
                    }
                }
                (Some(att), None)
            }
            _ => (None, None),
        };
        let cost = comm_cost(participants.len(), next.global.layout(), kind);
        let report = RoundReport {
            round,
            aggregator_kind: kind,
            train_loss: ids.iter().map(|id| train_loss.get(id).copied()).collect(),
            clients: ids,
            participants,
            meta_loss,
            aggregator_train_loss,
            attention,
            gate_mix,
            upstream_bytes: cost.upstream_bytes,
            downstream_bytes: cost.downstream_bytes,
            wall_time: started.elapsed(),
        };
        Ok((next, report))
    }

    /// Local training for `ids` in parallel, each on its own RNG stream.
    ///
    /// `prepare` maps a client's current model to its starting point and proximal anchor.
    fn train_clients<F>(
        &self,
        ids: &[ClientId],
        state: &mut RoundState,
        data_of: &BTreeMap<ClientId, &ClientData>,
        cfg: &ForecasterConfig,
        prepare: F,
    ) -> Result<Vec<(ClientId, (ForecasterModel, f64))>>
    where
        F: Fn(ClientId, &ForecasterModel) -> Result<(ForecasterModel, ParameterVector)> + Sync,
    {
        let jobs: Vec<(ClientId, ForecasterModel, ChaCha8Rng)> = ids
            .iter()
            .map(|id| (*id, state.clients[id].clone(), state.client_rngs[id].clone()))
            .collect();
        let done = jobs
            .into_par_iter()
            .map(|(id, model, mut rng)| {
                let (start, anchor) = prepare(id, &model)?;
                let out = local_train(&start, &data_of[&id].train, &anchor, cfg, &mut rng)?;
                Ok((id, out.model, out.mean_loss, rng))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(done
            .into_iter()
            .map(|(id, model, loss, rng)| {
                state.client_rngs.insert(id, rng);
                (id, (model, loss))
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommCost {
    pub clients: usize,
    /// `|θ|`.
    pub total_params: usize,
    pub head_params: usize,
    /// `N·|θ|` parameters.
    pub upstream_params: u64,
    /// `N·|θ| + N·head` for personalized kinds, `N·|θ|` otherwise.
    pub downstream_params: u64,
    pub upstream_bytes: u64,
    pub downstream_bytes: u64,
    /// `(upstream + downstream) / (2·N·|θ|)`.
    pub ratio: f64,
}

pub const BYTES_PER_PARAM: u64 = 8;

impl CommCost {
    /// `r = head / |θ|`.
    pub fn head_fraction(&self) -> f64 {
        self.head_params as f64 / self.total_params as f64
    }

    /// `ratio − 1`, as a percentage.
    pub fn overhead_percent(&self) -> f64 {
        (self.ratio - 1.0) * 100.0
    }
}

/// Per-round parameter traffic for `n_clients` participants.
pub fn comm_cost(n_clients: usize, layout: &Layout, kind: AggregatorKind) -> CommCost {
    let (n, total, head) = (n_clients as u64, layout.total() as u64, layout.head_len() as u64);
    let (up, down) = match kind {
        AggregatorKind::LocalOnly => (0, 0),
        k if k.is_personalized() => (n * total, n * total + n * head),
        _ => (n * total, n * total),
    };
    let ratio = if kind == AggregatorKind::LocalOnly || n == 0 || total == 0 || down == up {
        1.0
    } else {
        1.0 + head as f64 / (2 * total) as f64
    };
    CommCost {
        clients: n_clients,
        total_params: layout.total(),
        head_params: layout.head_len(),
        upstream_params: up,
        downstream_params: down,
        upstream_bytes: up * BYTES_PER_PARAM,
        downstream_bytes: down * BYTES_PER_PARAM,
        ratio,
    }
}

/// Parameter layouts matching the reported large LSTM forecasters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommPreset {
    /// 6-step horizon: 2,322 head parameters of 996,013.
    LstmH6,
    /// 12-step horizon: 4,644 head parameters of 994,852.
    LstmH12,
}

impl CommPreset {
    pub const ALL: [CommPreset; 2] = [CommPreset::LstmH6, CommPreset::LstmH12];

    pub fn name(self) -> &'static str {
        match self {
            CommPreset::LstmH6 => "lstm-h6",
            CommPreset::LstmH12 => "lstm-h12",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    pub fn horizon(self) -> usize {
        match self {
            CommPreset::LstmH6 => 6,
            CommPreset::LstmH12 => 12,
        }
    }

    pub fn total_params(self) -> usize {
        match self {
            CommPreset::LstmH6 => 996_013,
            CommPreset::LstmH12 => 994_852,
        }
    }

    /// Two stacked LSTMs (1→256→128, two bias vectors each), a 128→3·p output head,
    /// and one opaque dense block holding the remaining parameters.
    pub fn layout(self) -> Layout {
        let lstm = |input: usize, hidden: usize| 4 * hidden * (input + hidden) + 2 * 4 * hidden;
        let head_out = 3 * self.horizon();
        let known = lstm(1, 256) + lstm(256, 128) + 128 * head_out + head_out;
        Layout::builder()
            .push("lstm1", lstm(1, 256), LayerKind::Recurrent)
            .push("lstm2", lstm(256, 128), LayerKind::Recurrent)
            .push("dense", self.total_params() - known, LayerKind::Dense)
            .push("head.weight", 128 * head_out, LayerKind::OutputHead)
            .push("head.bias", head_out, LayerKind::OutputHead)
            .build()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundDiagnostics {
    pub round: u64,
    /// Mean over rows of `−Σ_j w_ij ln w_ij`.
    pub entropy: f64,
    /// Mean over rows of the variance of `w_i·`.
    pub variance: f64,
    /// Mean attention mass on same-cluster peers, when labels are known.
    pub intra_cluster_mass: Option<f64>,
}

/// Entropy, spread and cluster affinity of each round's attention matrix.
///
/// Rows of clients that sat the round out (all zero) are skipped.
pub fn attention_diagnostics(reports: &[RoundReport], clusters: Option<&BTreeMap<ClientId, usize>>) -> Vec<RoundDiagnostics> {
    reports
        .iter()
        .filter_map(|r| {
            let att = r.attention.as_ref()?;
            let (mut ent, mut var, mut mass, mut rows) = (0.0, 0.0, 0.0, 0usize);
            for (i, row) in att.iter().enumerate() {
                let w: Vec<f64> = row.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, w)| *w).collect();
                if w.is_empty() || w.iter().all(|x| *x == 0.0) {
                    continue;
                }
                rows += 1;
                ent -= w.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()).sum::<f64>();
                let mean = w.iter().sum::<f64>() / w.len() as f64;
                var += w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / w.len() as f64;
                if let Some(labels) = clusters {
                    let own = labels.get(&r.clients[i]);
                    mass += row
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| *j != i && labels.get(&r.clients[*j]) == own)
                        .map(|(_, w)| w)
                        .sum::<f64>();
                }
            }
            let denom = rows.max(1) as f64;
            Some(RoundDiagnostics {
                round: r.round,
                entropy: ent / denom,
                variance: var / denom,
                intra_cluster_mass: clusters.map(|_| mass / denom),
            })
        })
        .collect()
}
