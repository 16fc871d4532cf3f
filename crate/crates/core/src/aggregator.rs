//! Server-side personalized aggregation.
//!
//! Each uploaded head delta `Δᵤ,ᵢ` becomes a node of a fully connected client
//! graph. A shared linear encoder maps it to an embedding `eᵢ`; `M` shared
//! linear experts score every ordered pair, `s_ijk = E_k([e_j, e_i])`; and a
//! per-client noisy top-k gate mixes the expert scores into one relevance
//! value `v_ij = cᵢᵀ s_ij`. A temperature softmax over neighbors turns these
//! into attention weights, and the personalized update is
//!
//! ```text
//! Δᵢᵖᵉʳˢ = w_self·Δᵤ,ᵢ + (1 − w_self)·Σ_{j≠i} w_ij·Δᵤ,ⱼ
//! ```
//!
//! The encoder, experts and gates are trained with the meta-loss
//! `α‖Δᵖᵉʳˢ − Δᵤ‖² + β(1 − cos(Δᵖᵉʳˢ, Δᵤ))`, averaged over clients, using
//! hand-derived gradients and Adam.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{self, order_invariant_sum, sigmoid, softmax_in_place, softplus, NORM_FLOOR};
use crate::params::{cosine_similarity, ClientId};

pub type HeadDeltas = BTreeMap<ClientId, Vec<f64>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregatorConfig {
    pub embed_dim: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub temperature: f64,
    pub w_self: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Adam step size for the encoder, experts and gates.
    pub server_lr: f64,
    /// Gate noise during server training. Shipped deltas are always noise-free.
    pub noise_enabled: bool,
    /// Meta-loss steps taken per federated round.
    pub steps_per_round: usize,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            num_experts: 4,
            top_k: 2,
            temperature: 1.0,
            w_self: 0.6,
            alpha: 0.5,
            beta: 0.5,
            server_lr: 1e-3,
            noise_enabled: true,
            steps_per_round: 1,
        }
    }
}

impl AggregatorConfig {
    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        if self.embed_dim == 0 {
            out.push(format!("{prefix}embed_dim must be >= 1"));
        }
        if self.num_experts == 0 {
            out.push(format!("{prefix}num_experts must be >= 1"));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            out.push(format!(
                "{prefix}top_k ({}) must satisfy 1 <= {prefix}top_k <= {prefix}num_experts ({})",
                self.top_k, self.num_experts
            ));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            out.push(format!("{prefix}temperature must be finite and > 0"));
        }
        if !(0.0..=1.0).contains(&self.w_self) {
            out.push(format!("{prefix}w_self must lie in [0, 1]"));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            out.push(format!("{prefix}alpha must be finite and >= 0"));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            out.push(format!("{prefix}beta must be finite and >= 0"));
        }
        if !(self.server_lr.is_finite() && self.server_lr >= 0.0) {
            out.push(format!("{prefix}server_lr must be finite and >= 0"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems("");
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::config(p.join("; ")))
        }
    }

    /// One expert, one-of-one gate, no noise: plain single-score attention.
    pub fn single_attention(&self) -> Self {
        Self {
            num_experts: 1,
            top_k: 1,
            noise_enabled: false,
            ..self.clone()
        }
    }
}

/// Scoring expert `E_k`: `[e_j, e_i] ↦ w·[e_j, e_i] + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expert {
    /// `2·d_e` weights, neighbor half first.
    pub w: Vec<f64>,
    pub b: f64,
}

/// Personalized gate, both matrices `d_e × M` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub w_g: Vec<f64>,
    pub w_noise: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatorParams {
    /// `d_e × head_dim` row-major.
    pub encoder_w: Vec<f64>,
    pub encoder_b: Vec<f64>,
    pub experts: Vec<Expert>,
    pub gates: BTreeMap<ClientId, Gate>,
}

impl AggregatorParams {
    fn zeros_like(&self) -> Self {
        Self {
            encoder_w: vec![0.0; self.encoder_w.len()],
            encoder_b: vec![0.0; self.encoder_b.len()],
            experts: self
                .experts
                .iter()
                .map(|e| Expert { w: vec![0.0; e.w.len()], b: 0.0 })
                .collect(),
            gates: self
                .gates
                .iter()
                .map(|(id, g)| (*id, Gate { w_g: vec![0.0; g.w_g.len()], w_noise: vec![0.0; g.w_noise.len()] }))
                .collect(),
        }
    }

    /// Encoder weights, encoder bias, experts (weights then bias), then gates in client order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.encoder_w);
        out.extend_from_slice(&self.encoder_b);
        for e in &self.experts {
            out.extend_from_slice(&e.w);
            out.push(e.b);
        }
        for g in self.gates.values() {
            out.extend_from_slice(&g.w_g);
            out.extend_from_slice(&g.w_noise);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.encoder_w.len()
            + self.encoder_b.len()
            + self.experts.iter().map(|e| e.w.len() + 1).sum::<usize>()
            + self.gates.values().map(|g| g.w_g.len() + g.w_noise.len()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::shape(format!("{} values for {} aggregator parameters", flat.len(), self.len())));
        }
        let mut it = flat.iter().copied();
        let mut fill = |dst: &mut [f64]| dst.iter_mut().for_each(|d| *d = it.next().expect("length checked"));
        fill(&mut self.encoder_w);
        fill(&mut self.encoder_b);
        for e in &mut self.experts {
            fill(&mut e.w);
            fill(std::slice::from_mut(&mut e.b));
        }
        for g in self.gates.values_mut() {
            fill(&mut g.w_g);
            fill(&mut g.w_noise);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub client_id: ClientId,
    pub neighbors: Vec<ClientId>,
    /// `w_ij` for each neighbor, same order as `neighbors`.
    pub weights: Vec<f64>,
    /// Gate output `cᵢ` over experts; zero outside the top-k.
    pub expert_mix: Vec<f64>,
    /// Gate logits `Hᵢ` the mix was computed from.
    pub logits: Vec<f64>,
}

impl AttentionRow {
    pub fn weight_of(&self, neighbor: ClientId) -> Option<f64> {
        self.neighbors.iter().position(|n| *n == neighbor).map(|k| self.weights[k])
    }
}

/// Attention rows plus the personalized head deltas they produce.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregation {
    pub rows: Vec<AttentionRow>,
    pub deltas: HeadDeltas,
}

/// Optional overrides for a batched forward pass.
#[derive(Clone, Debug, Default)]
pub struct PassOptions {
    /// Standard-normal draws `ε_ik`, one row per client in id order.
    pub noise: Option<Vec<Vec<f64>>>,
    /// Frozen top-k selection, one row per client in id order.
    pub mask: Option<Vec<Vec<bool>>>,
}

#[derive(Clone, Debug, Default)]
struct AdamState {
    step: u64,
    m: Option<AggregatorParams>,
    v: Option<AggregatorParams>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct AggregatorState {
    config: AggregatorConfig,
    head_dim: usize,
    params: AggregatorParams,
    rng: ChaCha8Rng,
    adam: AdamState,
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let s = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-s..s)).collect()
}

impl AggregatorState {
    /// Fresh state with uniform(±1/√fan_in) parameters drawn from `rng`, which
    /// the state then keeps for gate noise and late registrations.
    pub fn new(config: AggregatorConfig, head_dim: usize, clients: &[ClientId], mut rng: ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        if head_dim == 0 {
            return Err(Error::config("aggregator input (head) dimension must be >= 1"));
        }
        let d = config.embed_dim;
        let params = AggregatorParams {
            encoder_w: uniform_vec(&mut rng, d * head_dim, head_dim),
            encoder_b: uniform_vec(&mut rng, d, head_dim),
            experts: (0..config.num_experts)
                .map(|_| {
                    let mut w = uniform_vec(&mut rng, 2 * d + 1, 2 * d);
                    let b = w.pop().expect("non-empty");
                    Expert { w, b }
                })
                .collect(),
            gates: BTreeMap::new(),
        };
        let mut state = Self {
            config,
            head_dim,
            params,
            rng,
            adam: AdamState::default(),
        };
        for id in clients {
            state.register_client(*id);
        }
        Ok(state)
    }

    /// Adds a freshly initialized gate for `id`; no-op when already registered.
    pub fn register_client(&mut self, id: ClientId) {
        if self.params.gates.contains_key(&id) {
            return;
        }
        let (d, m) = (self.config.embed_dim, self.config.num_experts);
        let gate = Gate {
            w_g: uniform_vec(&mut self.rng, d * m, d),
            w_noise: uniform_vec(&mut self.rng, d * m, d),
        };
        for moments in [&mut self.adam.m, &mut self.adam.v].into_iter().flatten() {
            moments.gates.insert(id, Gate { w_g: vec![0.0; d * m], w_noise: vec![0.0; d * m] });
        }
        self.params.gates.insert(id, gate);
    }

    pub fn config(&self) -> &AggregatorConfig {
        &self.config
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn params(&self) -> &AggregatorParams {
        &self.params
    }

    /// Direct parameter access, e.g. for hand-set test fixtures.
    pub fn params_mut(&mut self) -> &mut AggregatorParams {
        &mut self.params
    }

    pub fn clients(&self) -> impl Iterator<Item = ClientId> + '_ {
        self.params.gates.keys().copied()
    }

    /// Copy of this state with client ids renamed through `mapping`; gates move with their clients.
    pub fn relabeled(&self, mapping: &BTreeMap<ClientId, ClientId>) -> Result<Self> {
        let mut out = self.clone();
        out.params.gates = self
            .params
            .gates
            .iter()
            .map(|(id, g)| {
                mapping
                    .get(id)
                    .map(|new| (*new, g.clone()))
                    .ok_or_else(|| Error::usage(format!("{id} missing from relabeling")))
            })
            .collect::<Result<_>>()?;
        out.adam = AdamState::default();
        Ok(out)
    }

    /// `W·Δᵤ + b`.
    pub fn encode(&self, head_delta: &[f64]) -> Result<Vec<f64>> {
        if head_delta.len() != self.head_dim {
            return Err(Error::shape(format!(
                "head delta has {} entries, encoder expects {}",
                head_delta.len(),
                self.head_dim
            )));
        }
        Ok(self.encode_unchecked(head_delta))
    }

    fn encode_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let h = self.head_dim;
        (0..self.config.embed_dim)
            .map(|o| self.params.encoder_b[o] + numeric::dot(&self.params.encoder_w[o * h..(o + 1) * h], x))
            .collect()
    }

    /// `s_ijk = E_k([e_j, e_i])` for every expert `k`.
    pub fn expert_scores(&self, e_i: &[f64], e_j: &[f64]) -> Result<Vec<f64>> {
        let d = self.config.embed_dim;
        if e_i.len() != d || e_j.len() != d {
            return Err(Error::shape(format!("embeddings must have {d} entries")));
        }
        Ok(self.scores_unchecked(e_i, e_j))
    }

    fn scores_unchecked(&self, e_i: &[f64], e_j: &[f64]) -> Vec<f64> {
        let d = self.config.embed_dim;
        self.params
            .experts
            .iter()
            .map(|ex| ex.b + numeric::dot(&ex.w[..d], e_j) + numeric::dot(&ex.w[d..], e_i))
            .collect()
    }

    fn gate(&self, client: ClientId) -> Result<&Gate> {
        self.params
            .gates
            .get(&client)
            .ok_or_else(|| Error::usage(format!("{client} has no registered gate")))
    }

    /// Clean logits `e·W_g` and noise pre-activations `e·W_noise`.
    fn gate_terms(&self, gate: &Gate, e: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m = self.config.num_experts;
        let mut clean = vec![0.0; m];
        let mut z = vec![0.0; m];
        for (d, ed) in e.iter().enumerate() {
            for k in 0..m {
                clean[k] += ed * gate.w_g[d * m + k];
                z[k] += ed * gate.w_noise[d * m + k];
            }
        }
        (clean, z)
    }

    /// `Hᵢ(eᵢ) = eᵢ·W_g,i + ε ⊙ softplus(eᵢ·W_noise,i)` with `ε ~ N(0, 1)` drawn from the
    /// state's RNG when `training`; the clean term alone otherwise.
    pub fn gate_logits(&mut self, client: ClientId, e_i: &[f64], training: bool) -> Result<Vec<f64>> {
        if e_i.len() != self.config.embed_dim {
            return Err(Error::shape(format!("embedding must have {} entries", self.config.embed_dim)));
        }
        let noise = if training {
            Some(self.draw_noise_row())
        } else {
            None
        };
        self.gate_logits_with(client, e_i, noise.as_deref())
    }

    /// [`gate_logits`](Self::gate_logits) with caller-supplied noise draws.
    pub fn gate_logits_with(&self, client: ClientId, e_i: &[f64], noise: Option<&[f64]>) -> Result<Vec<f64>> {
        let gate = self.gate(client)?;
        let (mut logits, z) = self.gate_terms(gate, e_i);
        if let Some(eps) = noise {
            for k in 0..logits.len() {
                logits[k] += eps[k] * softplus(z[k]);
            }
        }
        Ok(logits)
    }

    fn draw_noise_row(&mut self) -> Vec<f64> {
        (0..self.config.num_experts).map(|_| self.rng.sample(StandardNormal)).collect()
    }

    /// One attention row for `client` over every other client in `embeddings`.
    pub fn attention_row(
        &mut self,
        client: ClientId,
        embeddings: &BTreeMap<ClientId, Vec<f64>>,
        training: bool,
    ) -> Result<AttentionRow> {
        let e_i = embeddings
            .get(&client)
            .ok_or_else(|| Error::usage(format!("no embedding for {client}")))?;
        let logits = self.gate_logits(client, e_i, training)?;
        let mask = top_k_mask(&logits, self.config.top_k);
        let mix = masked_softmax(&logits, &mask);
        let mut neighbors = Vec::new();
        let mut values = Vec::new();
        for (id, e_j) in embeddings {
            if *id == client {
                continue;
            }
            let scores = self.expert_scores(e_i, e_j)?;
            neighbors.push(*id);
            values.push(mix_scores(&mix, &scores));
        }
        Ok(AttentionRow {
            client_id: client,
            neighbors,
            weights: temperature_softmax(&values, self.config.temperature),
            expert_mix: mix,
            logits,
        })
    }

    /// Noise-free attention rows and personalized deltas for every client in `head_deltas`.
    pub fn aggregate(&self, head_deltas: &HeadDeltas) -> Result<Aggregation> {
        let pass = self.forward_pass(head_deltas, &PassOptions::default())?;
        Ok(pass.into_aggregation())
    }

    /// Mean meta-loss and its gradient w.r.t. [`AggregatorParams::flatten`] order.
    pub fn meta_objective(&self, head_deltas: &HeadDeltas, opts: &PassOptions) -> Result<(f64, Vec<f64>)> {
        let pass = self.forward_pass(head_deltas, opts)?;
        let loss = pass.loss(&self.config)?;
        let grad = self.backward(&pass);
        Ok((loss, grad.flatten()))
    }

    /// Mean meta-loss only.
    pub fn meta_loss_value(&self, head_deltas: &HeadDeltas, opts: &PassOptions) -> Result<f64> {
        self.forward_pass(head_deltas, opts)?.loss(&self.config)
    }

    /// Copy with parameters replaced from a flat vector.
    pub fn with_flat_params(&self, flat: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.params.assign_flat(flat)?;
        Ok(out)
    }

    /// The top-k selection a noise-free pass would make, one row per client.
    pub fn current_mask(&self, head_deltas: &HeadDeltas) -> Result<Vec<Vec<bool>>> {
        Ok(self.forward_pass(head_deltas, &PassOptions::default())?.mask)
    }

    /// One Adam step on the mean meta-loss. Returns the loss before the step.
    ///
    /// Gate noise is drawn from the state's RNG when enabled. The top-k mask is
    /// held fixed within the step and head deltas are treated as constants.
    pub fn train_step(&mut self, head_deltas: &HeadDeltas) -> Result<f64> {
        if head_deltas.len() < 2 {
            return Err(Error::usage("aggregator training needs at least two clients"));
        }
        let noise = if self.config.noise_enabled {
            let rows = head_deltas.len();
            Some((0..rows).map(|_| self.draw_noise_row()).collect())
        } else {
            None
        };
        let pass = self.forward_pass(head_deltas, &PassOptions { noise, mask: None })?;
        let loss = pass.loss(&self.config)?;
        let grad = self.backward(&pass).flatten();
        if !loss.is_finite() || !numeric::all_finite(&grad) {
            return Err(Error::numeric(format!(
                "non-finite meta-loss gradient (loss {loss}); gate logits: {:?}",
                pass.logits
            )));
        }
        self.adam_update(&grad)?;
        Ok(loss)
    }

    fn adam_update(&mut self, grad: &[f64]) -> Result<()> {
        let mut m = self.adam.m.take().unwrap_or_else(|| self.params.zeros_like()).flatten();
        let mut v = self.adam.v.take().unwrap_or_else(|| self.params.zeros_like()).flatten();
        let mut p = self.params.flatten();
        self.adam.step += 1;
        let t = self.adam.step as i32;
        let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
        for k in 0..p.len() {
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * grad[k];
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * grad[k] * grad[k];
            p[k] -= self.config.server_lr * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
        }
        if !numeric::all_finite(&p) {
            return Err(Error::numeric("aggregator parameters diverged"));
        }
        let mut mm = self.params.zeros_like();
        mm.assign_flat(&m)?;
        let mut vv = self.params.zeros_like();
        vv.assign_flat(&v)?;
        self.params.assign_flat(&p)?;
        self.adam.m = Some(mm);
        self.adam.v = Some(vv);
        Ok(())
    }

    fn forward_pass<'a>(&self, head_deltas: &'a HeadDeltas, opts: &PassOptions) -> Result<Pass<'a>> {
        let n = head_deltas.len();
        if n == 0 {
            return Err(Error::usage("no head deltas to aggregate"));
        }
        let m = self.config.num_experts;
        let ids: Vec<ClientId> = head_deltas.keys().copied().collect();
        let deltas: Vec<&'a [f64]> = head_deltas.values().map(Vec::as_slice).collect();
        for (id, d) in ids.iter().zip(&deltas) {
            if d.len() != self.head_dim {
                return Err(Error::shape(format!("{id}: head delta has {} entries, expected {}", d.len(), self.head_dim)));
            }
        }
        for rows in [opts.noise.as_ref().map(Vec::len), opts.mask.as_ref().map(Vec::len)].into_iter().flatten() {
            if rows != n {
                return Err(Error::shape(format!("pass override has {rows} rows for {n} clients")));
            }
        }
        let emb: Vec<Vec<f64>> = deltas.iter().map(|d| self.encode_unchecked(d)).collect();
        let mut logits = Vec::with_capacity(n);
        let mut z_noise = Vec::with_capacity(n);
        let mut eps = Vec::with_capacity(n);
        let mut mask = Vec::with_capacity(n);
        let mut mix = Vec::with_capacity(n);
        for i in 0..n {
            let gate = self.gate(ids[i])?;
            let (_, z) = self.gate_terms(gate, &emb[i]);
            let noise_row = opts.noise.as_ref().map(|rows| rows[i].as_slice());
            if noise_row.is_some_and(|r| r.len() != m) {
                return Err(Error::shape("noise rows must have one entry per expert"));
            }
            let h = self.gate_logits_with(ids[i], &emb[i], noise_row)?;
            let mk = match &opts.mask {
                Some(rows) => rows[i].clone(),
                None => top_k_mask(&h, self.config.top_k),
            };
            mix.push(masked_softmax(&h, &mk));
            eps.push(noise_row.map_or_else(|| vec![0.0; m], <[f64]>::to_vec));
            z_noise.push(z);
            logits.push(h);
            mask.push(mk);
        }
        let mut scores = vec![Vec::new(); n];
        let mut attn = vec![vec![0.0; n]; n];
        for i in 0..n {
            scores[i] = (0..n)
                .map(|j| if i == j { Vec::new() } else { self.scores_unchecked(&emb[i], &emb[j]) })
                .collect();
            let values: Vec<f64> = (0..n)
                .filter(|j| *j != i)
                .map(|j| mix_scores(&mix[i], &scores[i][j]))
                .collect();
            let mut it = temperature_softmax(&values, self.config.temperature).into_iter();
            for (j, slot) in attn[i].iter_mut().enumerate() {
                if j != i {
                    *slot = it.next().expect("one value per neighbor");
                }
            }
        }
        let pers = (0..n)
            .map(|i| blend(self.config.w_self, i, &attn[i], &deltas))
            .collect();
        Ok(Pass {
            ids,
            deltas,
            emb,
            z_noise,
            eps,
            logits,
            mask,
            mix,
            scores,
            attn,
            pers,
        })
    }

    fn backward(&self, pass: &Pass<'_>) -> AggregatorParams {
        let cfg = &self.config;
        let n = pass.ids.len();
        let (d, m, hd) = (cfg.embed_dim, cfg.num_experts, self.head_dim);
        let mut grad = self.params.zeros_like();
        if n < 2 {
            return grad;
        }
        let mut de = vec![vec![0.0; d]; n];
        let inv_n = 1.0 / n as f64;
        for i in 0..n {
            let g_pers = meta_loss_gradient(&pass.pers[i], pass.deltas[i], cfg.alpha, cfg.beta, inv_n);
            // dL/dw_ij, then back through the neighbor softmax.
            let dw: Vec<f64> = (0..n)
                .map(|j| if j == i { 0.0 } else { (1.0 - cfg.w_self) * numeric::dot(&g_pers, pass.deltas[j]) })
                .collect();
            let inner: f64 = (0..n).filter(|j| *j != i).map(|j| pass.attn[i][j] * dw[j]).sum();
            let mut dmix = vec![0.0; m];
            for j in (0..n).filter(|j| *j != i) {
                let dv = pass.attn[i][j] * (dw[j] - inner) / cfg.temperature;
                let s = &pass.scores[i][j];
                for k in 0..m {
                    dmix[k] += dv * s[k];
                    let ds = dv * pass.mix[i][k];
                    if ds == 0.0 {
                        continue;
                    }
                    let ex = &self.params.experts[k];
                    let gx = &mut grad.experts[k];
                    gx.b += ds;
                    for t in 0..d {
                        gx.w[t] += ds * pass.emb[j][t];
                        gx.w[d + t] += ds * pass.emb[i][t];
                        de[j][t] += ds * ex.w[t];
                        de[i][t] += ds * ex.w[d + t];
                    }
                }
            }
            // Gate softmax over the kept experts only.
            let kept_dot: f64 = (0..m).filter(|k| pass.mask[i][*k]).map(|k| pass.mix[i][k] * dmix[k]).sum();
            let gate = &self.params.gates[&pass.ids[i]];
            let ggate = grad.gates.get_mut(&pass.ids[i]).expect("gradient has every gate");
            for k in (0..m).filter(|k| pass.mask[i][*k]) {
                let dh = pass.mix[i][k] * (dmix[k] - kept_dot);
                let dz = dh * pass.eps[i][k] * sigmoid(pass.z_noise[i][k]);
                for t in 0..d {
                    let e = pass.emb[i][t];
                    ggate.w_g[t * m + k] += dh * e;
                    ggate.w_noise[t * m + k] += dz * e;
                    de[i][t] += dh * gate.w_g[t * m + k] + dz * gate.w_noise[t * m + k];
                }
            }
        }
        for i in 0..n {
            for o in 0..d {
                let g = de[i][o];
                grad.encoder_b[o] += g;
                let row = &mut grad.encoder_w[o * hd..(o + 1) * hd];
                for (w, x) in row.iter_mut().zip(pass.deltas[i]) {
                    *w += g * x;
                }
            }
        }
        grad
    }
}

struct Pass<'a> {
    ids: Vec<ClientId>,
    deltas: Vec<&'a [f64]>,
    emb: Vec<Vec<f64>>,
    z_noise: Vec<Vec<f64>>,
    eps: Vec<Vec<f64>>,
    logits: Vec<Vec<f64>>,
    mask: Vec<Vec<bool>>,
    mix: Vec<Vec<f64>>,
    /// `scores[i][j][k]`; empty on the diagonal.
    scores: Vec<Vec<Vec<f64>>>,
    /// `attn[i][j]`, zero on the diagonal.
    attn: Vec<Vec<f64>>,
    pers: Vec<Vec<f64>>,
}

impl Pass<'_> {
    fn loss(&self, cfg: &AggregatorConfig) -> Result<f64> {
        let mut total = 0.0;
        for (p, u) in self.pers.iter().zip(&self.deltas) {
            total += meta_loss(p, u, cfg.alpha, cfg.beta)?;
        }
        Ok(total / self.ids.len() as f64)
    }

    fn into_aggregation(self) -> Aggregation {
        let n = self.ids.len();
        let rows = (0..n)
            .map(|i| AttentionRow {
                client_id: self.ids[i],
                neighbors: (0..n).filter(|j| *j != i).map(|j| self.ids[j]).collect(),
                weights: (0..n).filter(|j| *j != i).map(|j| self.attn[i][j]).collect(),
                expert_mix: self.mix[i].clone(),
                logits: self.logits[i].clone(),
            })
            .collect();
        Aggregation {
            rows,
            deltas: self.ids.iter().copied().zip(self.pers).collect(),
        }
    }
}

/// Indicator of the `k` largest logits; ties go to the lower expert index.
pub fn top_k_mask(logits: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|a, b| logits[*b].total_cmp(&logits[*a]).then(a.cmp(b)));
    let mut mask = vec![false; logits.len()];
    for &i in order.iter().take(k) {
        mask[i] = true;
    }
    mask
}

fn masked_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let mut kept: Vec<f64> = logits.iter().zip(mask).filter(|(_, m)| **m).map(|(l, _)| *l).collect();
    softmax_in_place(&mut kept);
    let mut it = kept.into_iter();
    mask.iter().map(|m| if *m { it.next().expect("kept value") } else { 0.0 }).collect()
}

/// `Softmax(Top-k(logits))` as a dense vector with zeros outside the top-k.
pub fn gate_weights(logits: &[f64], k: usize) -> Vec<f64> {
    masked_softmax(logits, &top_k_mask(logits, k))
}

/// `softmax(v / T)`.
pub fn temperature_softmax(values: &[f64], temperature: f64) -> Vec<f64> {
    let mut out: Vec<f64> = values.iter().map(|v| v / temperature).collect();
    softmax_in_place(&mut out);
    out
}

fn mix_scores(mix: &[f64], scores: &[f64]) -> f64 {
    mix.iter().zip(scores).map(|(c, s)| c * s).sum()
}

/// `w_self·Δᵤ,ᵢ + (1 − w_self)·Σ_{j≠i} w_ij·Δᵤ,ⱼ`, with a lone client keeping its own delta.
///
/// `weights` is indexed like `deltas`; entry `own` is ignored.
fn blend(w_self: f64, own: usize, weights: &[f64], deltas: &[&[f64]]) -> Vec<f64> {
    let n = deltas.len();
    if n == 1 {
        return deltas[own].to_vec();
    }
    let dim = deltas[own].len();
    let mut terms = Vec::with_capacity(n - 1);
    (0..dim)
        .map(|t| {
            terms.clear();
            terms.extend((0..n).filter(|j| *j != own).map(|j| weights[j] * deltas[j][t]));
            w_self * deltas[own][t] + (1.0 - w_self) * order_invariant_sum(&mut terms)
        })
        .collect()
}

/// Applies the personalized blend for `client` given its attention row.
pub fn personalized_delta(w_self: f64, client: ClientId, head_deltas: &HeadDeltas, row: &AttentionRow) -> Result<Vec<f64>> {
    if row.client_id != client {
        return Err(Error::usage(format!("attention row belongs to {}, not {client}", row.client_id)));
    }
    let ids: Vec<ClientId> = head_deltas.keys().copied().collect();
    let own = ids
        .iter()
        .position(|id| *id == client)
        .ok_or_else(|| Error::usage(format!("no head delta for {client}")))?;
    if row.neighbors.len() != ids.len() - 1 {
        return Err(Error::usage("attention row does not cover every other client"));
    }
    let dim = head_deltas[&client].len();
    let mut weights = vec![0.0; ids.len()];
    for (nb, w) in row.neighbors.iter().zip(&row.weights) {
        let j = ids
            .iter()
            .position(|id| id == nb)
            .ok_or_else(|| Error::usage(format!("attention row names unknown {nb}")))?;
        weights[j] = *w;
    }
    let deltas: Vec<&[f64]> = head_deltas.values().map(Vec::as_slice).collect();
    if deltas.iter().any(|d| d.len() != dim) {
        return Err(Error::shape("head deltas differ in length"));
    }
    Ok(blend(w_self, own, &weights, &deltas))
}

/// `α‖Δᵖᵉʳˢ − Δᵤ‖² + β(1 − cos(Δᵖᵉʳˢ, Δᵤ))`.
pub fn meta_loss(delta_pers: &[f64], delta_u: &[f64], alpha: f64, beta: f64) -> Result<f64> {
    let cos = cosine_similarity(delta_pers, delta_u)?;
    let sq: f64 = delta_pers.iter().zip(delta_u).map(|(p, u)| (p - u) * (p - u)).sum();
    Ok(alpha * sq + beta * (1.0 - cos))
}

/// `scale · ∂meta_loss/∂Δᵖᵉʳˢ`; the cosine term contributes nothing below the norm floor.
fn meta_loss_gradient(pers: &[f64], u: &[f64], alpha: f64, beta: f64, scale: f64) -> Vec<f64> {
    let np = numeric::norm_sq(pers).sqrt();
    let nu = numeric::norm_sq(u).sqrt();
    let cos_live = np >= NORM_FLOOR && nu >= NORM_FLOOR;
    let cos = if cos_live { numeric::dot(pers, u) / (np * nu) } else { 0.0 };
    pers.iter()
        .zip(u)
        .map(|(p, uu)| {
            let mut g = 2.0 * alpha * (p - uu);
            if cos_live {
                g -= beta * (uu / (np * nu) - cos * p / (np * np));
            }
            scale * g
        })
        .collect()
}

/// Baseline with a fixed neighbor term: uniform mean over `j ≠ i`.
pub fn aggregate_mean(head_deltas: &HeadDeltas, w_self: f64) -> Result<HeadDeltas> {
    let deltas: Vec<&[f64]> = head_deltas.values().map(Vec::as_slice).collect();
    let n = deltas.len();
    if n == 0 {
        return Err(Error::usage("no head deltas to aggregate"));
    }
    if deltas.iter().any(|d| d.len() != deltas[0].len()) {
        return Err(Error::shape("head deltas differ in length"));
    }
    Ok(head_deltas
        .keys()
        .enumerate()
        .map(|(i, id)| {
            let weights: Vec<f64> = (0..n).map(|j| if j == i { 0.0 } else { 1.0 / (n - 1) as f64 }).collect();
            (*id, blend(w_self, i, &weights, &deltas))
        })
        .collect())
}

/// Baseline with a single shared scorer: expert 0 of `state` scores each pair
/// directly, without gating.
pub fn aggregate_single_attention(state: &AggregatorState, head_deltas: &HeadDeltas) -> Result<Aggregation> {
    let ids: Vec<ClientId> = head_deltas.keys().copied().collect();
    let deltas: Vec<&[f64]> = head_deltas.values().map(Vec::as_slice).collect();
    let emb = deltas.iter().map(|d| state.encode(d)).collect::<Result<Vec<_>>>()?;
    let n = ids.len();
    let d = state.config.embed_dim;
    let expert = &state.params.experts[0];
    let mut rows = Vec::with_capacity(n);
    let mut out = HeadDeltas::new();
    for i in 0..n {
        let scores: Vec<f64> = (0..n)
            .filter(|j| *j != i)
            .map(|j| expert.b + numeric::dot(&expert.w[..d], &emb[j]) + numeric::dot(&expert.w[d..], &emb[i]))
            .collect();
        let values = temperature_softmax(&scores, state.config.temperature);
        let mut full = vec![0.0; n];
        let mut it = values.iter();
        for (j, slot) in full.iter_mut().enumerate() {
            if j != i {
                *slot = *it.next().expect("one value per neighbor");
            }
        }
        out.insert(ids[i], blend(state.config.w_self, i, &full, &deltas));
        rows.push(AttentionRow {
            client_id: ids[i],
            neighbors: (0..n).filter(|j| *j != i).map(|j| ids[j]).collect(),
            weights: values,
            expert_mix: vec![1.0],
            logits: vec![0.0],
        });
    }
    Ok(Aggregation { rows, deltas: out })
}

/// Deterministic RNG for an aggregator from a 64-bit seed.
pub fn aggregator_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
