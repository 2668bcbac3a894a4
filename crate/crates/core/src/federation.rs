//! Round orchestration: client sampling, parallel local training, graph
//! construction, community detection, community-scoped anchor aggregation
//! and regularized head updates, plus FedAvg, uniform-Laplacian, and
//! local-only baselines driven by the same machinery.

use std::collections::BTreeMap;

use ndarray::Array2;
use rayon::prelude::*;

use crate::community::{louvain, Partition};
use crate::data::{ClientData, FederatedDataset};
use crate::error::{Error, Result};
use crate::graph::{build_graph, GraphConfig, SimilarityGraph};
use crate::metrics::{
    accuracy_and_loss, anchor_head_downlink_floats, anchor_head_uplink_floats, flops_estimate,
    BITS_PER_FLOAT,
};
use crate::model::{
    local_train, ClientId, ClientModel, DenseLayer, FeatureAnchorSet, LocalTrainConfig,
};
use crate::rng::stream;

// Tags for deriving independent rng streams from the experiment seed.
const TAG_MODEL_INIT: u64 = 0;
const TAG_ANCHOR_INIT: u64 = 1;
const TAG_TRAIN: u64 = 2;
const TAG_SAMPLE: u64 = 3;
const TAG_LOUVAIN: u64 = 4;

/// Hyperparameters shared by every method.
#[derive(Debug, Clone, Copy)]
pub struct Hyperparams {
    pub eta: f64,
    /// Local epochs R per round.
    pub local_rounds: usize,
    pub batch_size: usize,
    /// Anchor-loss and head-regularization weight λ.
    pub lambda: f64,
    /// Head-vs-representation similarity trade-off α.
    pub alpha: f64,
    pub sample_fraction: f64,
    /// Server-side step τ; defaults to η·R.
    pub tau_override: Option<f64>,
    pub anchors_learnable: bool,
    /// Debug/ablation switch: force an all-zero similarity graph so the
    /// community step degenerates to singletons.
    pub zero_graph_override: bool,
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::Config("eta must be > 0".into()));
        }
        if self.local_rounds == 0 {
            return Err(Error::Config("local_rounds must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "sample_fraction {} outside (0, 1]",
                self.sample_fraction
            )));
        }
        if let Some(tau) = self.tau_override {
            if !(tau >= 0.0) {
                return Err(Error::Config("tau override must be >= 0".into()));
            }
        }
        Ok(())
    }

    /// Server-side learning rate τ = η·R unless overridden.
    pub fn tau(&self) -> f64 {
        self.tau_override
            .unwrap_or(self.eta * self.local_rounds as f64)
    }
}

/// One client's persistent state.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub model: ClientModel,
    pub anchors: FeatureAnchorSet,
    pub data: ClientData,
    /// Floats queued by the server, charged as downlink the next time this
    /// client is sampled.
    pending_downlink_floats: Option<u64>,
}

impl ClientState {
    pub fn sample_count(&self) -> usize {
        self.data.train_len()
    }
}

/// Full simulator state across rounds.
#[derive(Debug, Clone)]
pub struct FederationState {
    pub clients: Vec<ClientState>,
    /// Communication round t (0-based).
    pub round: usize,
    pub params: Hyperparams,
    pub seed: u64,
    pub c_total: usize,
    /// FedAvg's server model, once one exists.
    pub global_model: Option<ClientModel>,
}

impl FederationState {
    /// All clients start from one shared seeded model (common initialization);
    /// anchors are drawn standard normal per client over its local classes.
    pub fn init(
        dataset: FederatedDataset,
        hidden_dims: &[usize],
        d_h: usize,
        params: Hyperparams,
        seed: u64,
    ) -> Result<Self> {
        params.validate()?;
        if dataset.num_clients() < 2 {
            return Err(Error::Config("need at least 2 clients".into()));
        }
        let mut dims = Vec::with_capacity(hidden_dims.len() + 2);
        dims.push(dataset.input_dim);
        dims.extend_from_slice(hidden_dims);
        dims.push(d_h);
        let shared_model = ClientModel::seeded(
            &dims,
            dataset.c_total,
            &mut stream(seed, &[TAG_MODEL_INIT]),
        )?;

        let c_total = dataset.c_total;
        let clients = dataset
            .clients
            .into_iter()
            .enumerate()
            .map(|(k, data)| {
                let anchors = FeatureAnchorSet::seeded(
                    k,
                    data.classes.iter().copied(),
                    d_h,
                    &mut stream(seed, &[TAG_ANCHOR_INIT, k as u64]),
                );
                ClientState {
                    model: shared_model.clone(),
                    anchors,
                    data,
                    pending_downlink_floats: None,
                }
            })
            .collect();
        Ok(Self {
            clients,
            round: 0,
            params,
            seed,
            c_total,
            global_model: None,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    fn d_h(&self) -> usize {
        self.clients[0].model.feature_dim()
    }

    fn train_config(&self, lambda: f64) -> LocalTrainConfig {
        LocalTrainConfig {
            learning_rate: self.params.eta,
            local_rounds: self.params.local_rounds,
            batch_size: self.params.batch_size,
            lambda,
            anchors_learnable: self.params.anchors_learnable,
        }
    }
}

/// Per-client record inside a round outcome.
#[derive(Debug, Clone)]
pub struct ClientRoundRecord {
    pub accuracy: f64,
    pub loss: f64,
    pub bits_up: u64,
    pub bits_down: u64,
    /// Community id for the community-scoped method; absent otherwise.
    pub community: Option<usize>,
    pub flops: f64,
}

/// Everything observable about one completed round.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub round: usize,
    pub sampled: Vec<ClientId>,
    pub partition: Option<Partition>,
    pub graph: Option<SimilarityGraph>,
    pub records: BTreeMap<ClientId, ClientRoundRecord>,
    pub warnings: Vec<String>,
    /// Clients whose local training aborted on a non-finite value; their
    /// state was rolled back and they took no part in the server phase.
    pub failed: Vec<ClientId>,
}

/// Uniform sample without replacement of size max(2, round(fraction·K)).
pub fn sample_clients<R: rand::RngExt>(
    num_clients: usize,
    fraction: f64,
    rng: &mut R,
) -> Result<Vec<ClientId>> {
    if num_clients < 2 {
        return Err(Error::Config(format!(
            "sampling needs at least 2 clients, have {num_clients}"
        )));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} outside (0, 1]")));
    }
    let size = ((fraction * num_clients as f64).round() as usize)
        .max(2)
        .min(num_clients);
    // Partial Fisher-Yates over the index vector.
    let mut pool: Vec<ClientId> = (0..num_clients).collect();
    for i in 0..size {
        let j = rng.random_range(i..num_clients);
        pool.swap(i, j);
    }
    let mut sampled: Vec<ClientId> = pool[..size].to_vec();
    sampled.sort_unstable();
    Ok(sampled)
}

/// Sample-size-weighted per-class average of the members' anchors; the
/// result covers the union of the members' classes.
pub fn aggregate_anchors(
    members: &[(&FeatureAnchorSet, usize)],
    owner: ClientId,
) -> Result<FeatureAnchorSet> {
    if members.is_empty() {
        return Err(Error::Input("cannot aggregate an empty community".into()));
    }
    let mut classes: std::collections::BTreeSet<usize> = std::collections::BTreeSet::new();
    for (set, _) in members {
        classes.extend(set.classes());
    }
    let mut out = FeatureAnchorSet::new(owner);
    for class in classes {
        let total: usize = members
            .iter()
            .filter(|(set, _)| set.get(class).is_some())
            .map(|&(_, n)| n)
            .sum();
        let mut acc: Option<ndarray::Array1<f64>> = None;
        for (set, n) in members {
            if let Some(anchor) = set.get(class) {
                let weighted = anchor * (*n as f64 / total as f64);
                acc = Some(match acc {
                    Some(a) => a + weighted,
                    None => weighted,
                });
            }
        }
        out.insert(class, acc.expect("class came from some member"));
    }
    Ok(out)
}

/// Simultaneous (Jacobi) regularized head update within one community:
/// φ_k ← φ_k − λτ Σ_{ℓ≠k} a_kℓ (φ_k − φ_ℓ), all from pre-update values.
///
/// Returns the updated heads plus the indices of members whose intra-
/// community degree makes λτ·δ ≥ 1 (the update may overshoot; the run
/// proceeds).
pub fn regularize_heads(
    heads: &[DenseLayer],
    weights: &Array2<f64>,
    lambda_tau: f64,
) -> Result<(Vec<DenseLayer>, Vec<usize>)> {
    let n = heads.len();
    if weights.dim() != (n, n) {
        return Err(Error::Config(format!(
            "weight matrix {:?} does not match {n} heads",
            weights.dim()
        )));
    }
    for h in heads.iter().skip(1) {
        if h.weights.dim() != heads[0].weights.dim() {
            return Err(Error::Config("heads must share one shape".into()));
        }
    }
    let mut overshoot = Vec::new();
    let mut updated = Vec::with_capacity(n);
    for k in 0..n {
        let mut dw = Array2::zeros(heads[k].weights.raw_dim());
        let mut db = ndarray::Array1::zeros(heads[k].bias.len());
        let mut degree = 0.0;
        for l in 0..n {
            if l == k {
                continue;
            }
            let a = weights[[k, l]];
            if a == 0.0 {
                continue;
            }
            degree += a;
            dw.scaled_add(a, &(&heads[k].weights - &heads[l].weights));
            db.scaled_add(a, &(&heads[k].bias - &heads[l].bias));
        }
        if lambda_tau * degree >= 1.0 {
            overshoot.push(k);
        }
        let mut head = heads[k].clone();
        head.weights.scaled_add(-lambda_tau, &dw);
        head.bias.scaled_add(-lambda_tau, &db);
        updated.push(head);
    }
    Ok((updated, overshoot))
}

/// Outcome of one client's local phase.
struct Trained {
    id: ClientId,
    model: ClientModel,
    anchors: FeatureAnchorSet,
}

/// Run local training for the sampled clients in parallel. Each client gets
/// its own rng stream derived from (seed, round, client id), so the result
/// does not depend on scheduling or worker count. Numerical aborts roll the
/// client back; other errors propagate.
fn train_sampled(
    state: &FederationState,
    sampled: &[ClientId],
    lambda: f64,
) -> Result<(Vec<Trained>, Vec<ClientId>)> {
    let config = state.train_config(lambda);
    let results: Vec<(ClientId, Result<(ClientModel, FeatureAnchorSet, Vec<f64>)>)> = sampled
        .par_iter()
        .map(|&k| {
            let client = &state.clients[k];
            let mut rng = stream(state.seed, &[TAG_TRAIN, state.round as u64, k as u64]);
            let out = local_train(
                &client.model,
                &client.anchors,
                &client.data.train_inputs,
                &client.data.train_labels,
                &config,
                &mut rng,
            );
            (k, out)
        })
        .collect();

    let mut trained = Vec::with_capacity(results.len());
    let mut failed = Vec::new();
    for (id, result) in results {
        match result {
            Ok((model, anchors, _trace)) => trained.push(Trained { id, model, anchors }),
            Err(Error::Numerical(_)) => failed.push(id),
            Err(e) => return Err(e),
        }
    }
    Ok((trained, failed))
}

/// Consume the pending downlink charge for each sampled client.
fn take_downlink(state: &mut FederationState, sampled: &[ClientId]) -> BTreeMap<ClientId, u64> {
    sampled
        .iter()
        .map(|&k| {
            let floats = state.clients[k].pending_downlink_floats.take().unwrap_or(0);
            (k, floats * BITS_PER_FLOAT)
        })
        .collect()
}

fn model_layer_dims(model: &ClientModel) -> Vec<(usize, usize)> {
    let mut dims: Vec<(usize, usize)> = model
        .extractor
        .iter()
        .map(|l| (l.input_dim(), l.output_dim()))
        .collect();
    dims.push((model.head.input_dim(), model.head.output_dim()));
    dims
}

fn evaluate_record(
    state: &FederationState,
    id: ClientId,
    bits_up: u64,
    bits_down: u64,
    community: Option<usize>,
) -> Result<ClientRoundRecord> {
    let client = &state.clients[id];
    let (accuracy, loss) =
        accuracy_and_loss(&client.model, &client.data.test_inputs, &client.data.test_labels)?;
    let flops = flops_estimate(
        &model_layer_dims(&client.model),
        client.data.train_len(),
        state.params.local_rounds,
    );
    Ok(ClientRoundRecord {
        accuracy,
        loss,
        bits_up,
        bits_down,
        community,
        flops,
    })
}

/// One round of the community-scoped method: sample, train with the anchor
/// loss, build the similarity graph over uplinked heads/anchors, partition
/// via Louvain, aggregate anchors and regularize heads per community, then
/// write the results back to the sampled clients.
pub fn run_round(state: &mut FederationState) -> Result<RoundOutcome> {
    let round = state.round;
    let mut rng = stream(state.seed, &[TAG_SAMPLE, round as u64]);
    let sampled = sample_clients(state.num_clients(), state.params.sample_fraction, &mut rng)?;
    let bits_down = take_downlink(state, &sampled);

    let (trained, failed) = train_sampled(state, &sampled, state.params.lambda)?;

    let d_h = state.d_h();
    let c_total = state.c_total;
    let graph = {
        let participants: Vec<(ClientId, &DenseLayer, &FeatureAnchorSet)> = trained
            .iter()
            .map(|t| (t.id, &t.model.head, &t.anchors))
            .collect();
        if state.params.zero_graph_override {
            let n = participants.len();
            SimilarityGraph::from_adjacency(
                participants.iter().map(|p| p.0).collect(),
                Array2::zeros((n, n)),
            )?
        } else {
            build_graph(&participants, &GraphConfig::new(state.params.alpha)?)?
        }
    };
    let partition = louvain(&graph, &mut stream(state.seed, &[TAG_LOUVAIN, round as u64]));

    let lambda_tau = state.params.lambda * state.params.tau();
    let mut warnings = Vec::new();
    let mut community_of: BTreeMap<ClientId, usize> = BTreeMap::new();

    let by_id: BTreeMap<ClientId, &Trained> = trained.iter().map(|t| (t.id, t)).collect();
    for (comm_id, members) in partition.communities().into_iter().enumerate() {
        // Sample-count weighted anchor aggregation.
        let anchor_inputs: Vec<(&FeatureAnchorSet, usize)> = members
            .iter()
            .map(|&k| (&by_id[&k].anchors, state.clients[k].sample_count()))
            .collect();
        let community_anchor = aggregate_anchors(&anchor_inputs, comm_id)?;

        // Head regularization over the intra-community similarity weights.
        let heads: Vec<DenseLayer> = members.iter().map(|&k| by_id[&k].model.head.clone()).collect();
        let mut weights = Array2::zeros((members.len(), members.len()));
        for (i, &ki) in members.iter().enumerate() {
            for (j, &kj) in members.iter().enumerate() {
                if i != j {
                    let gi = graph.index_of(ki).expect("member in graph");
                    let gj = graph.index_of(kj).expect("member in graph");
                    weights[[i, j]] = graph.adjacency[[gi, gj]];
                }
            }
        }
        let (new_heads, overshoot) = regularize_heads(&heads, &weights, lambda_tau)?;
        for idx in overshoot {
            warnings.push(format!(
                "round {round}: client {} intra-community degree makes the head update \
                 step λτ·δ >= 1; it may overshoot",
                members[idx]
            ));
        }

        let downlink_floats = anchor_head_downlink_floats(community_anchor.len(), d_h, c_total);
        for (idx, &k) in members.iter().enumerate() {
            community_of.insert(k, comm_id);
            let trained_client = by_id[&k];
            let client = &mut state.clients[k];
            client.model = ClientModel {
                extractor: trained_client.model.extractor.clone(),
                head: new_heads[idx].clone(),
            };
            // Adopt the community anchor for owned classes; anything the
            // community lacks keeps the client's own trained anchor.
            let mut anchors = FeatureAnchorSet::new(k);
            for (class, own) in trained_client.anchors.iter() {
                let v = community_anchor.get(class).unwrap_or(own);
                anchors.insert(class, v.clone());
            }
            client.anchors = anchors;
            client.pending_downlink_floats = Some(downlink_floats);
        }
    }

    let mut records = BTreeMap::new();
    for t in &trained {
        let up =
            anchor_head_uplink_floats(t.anchors.len(), d_h, c_total) * BITS_PER_FLOAT;
        let down = bits_down[&t.id];
        records.insert(
            t.id,
            evaluate_record(state, t.id, up, down, community_of.get(&t.id).copied())?,
        );
    }

    state.round += 1;
    Ok(RoundOutcome {
        round,
        sampled,
        partition: Some(partition),
        graph: Some(graph),
        records,
        warnings,
        failed,
    })
}

/// Elementwise Σ coef_i · model_i over models of identical shape.
fn weighted_model_sum(items: &[(f64, &ClientModel)]) -> ClientModel {
    let (first_coef, first) = items[0];
    let mut out = ClientModel {
        extractor: first
            .extractor
            .iter()
            .map(|l| DenseLayer {
                weights: &l.weights * first_coef,
                bias: &l.bias * first_coef,
            })
            .collect(),
        head: DenseLayer {
            weights: &first.head.weights * first_coef,
            bias: &first.head.bias * first_coef,
        },
    };
    for &(coef, model) in &items[1..] {
        for (acc, layer) in out.extractor.iter_mut().zip(&model.extractor) {
            acc.weights.scaled_add(coef, &layer.weights);
            acc.bias.scaled_add(coef, &layer.bias);
        }
        out.head.weights.scaled_add(coef, &model.head.weights);
        out.head.bias.scaled_add(coef, &model.head.bias);
    }
    out
}

/// One FedAvg round: sampled clients train on the supervised loss only,
/// the server replaces the global model with the sample-weighted average,
/// and every client adopts it.
pub fn run_fedavg_round(state: &mut FederationState) -> Result<RoundOutcome> {
    let round = state.round;
    let mut rng = stream(state.seed, &[TAG_SAMPLE, round as u64]);
    let sampled = sample_clients(state.num_clients(), state.params.sample_fraction, &mut rng)?;
    // Sampled clients pull the global model before training (none in round 0).
    let model_floats = state.clients[0].model.param_count() as u64;
    let downlink_each = if state.global_model.is_some() {
        model_floats * BITS_PER_FLOAT
    } else {
        0
    };

    let (trained, failed) = train_sampled(state, &sampled, 0.0)?;
    if !trained.is_empty() {
        let total: usize = trained
            .iter()
            .map(|t| state.clients[t.id].sample_count())
            .sum();
        let items: Vec<(f64, &ClientModel)> = trained
            .iter()
            .map(|t| {
                (
                    state.clients[t.id].sample_count() as f64 / total as f64,
                    &t.model,
                )
            })
            .collect();
        let global = weighted_model_sum(&items);
        for client in state.clients.iter_mut() {
            client.model = global.clone();
        }
        state.global_model = Some(global);
    }

    let mut records = BTreeMap::new();
    for t in &trained {
        let up = model_floats * BITS_PER_FLOAT;
        records.insert(t.id, evaluate_record(state, t.id, up, downlink_each, None)?);
    }

    state.round += 1;
    Ok(RoundOutcome {
        round,
        sampled,
        partition: None,
        graph: None,
        records,
        warnings: Vec::new(),
        failed,
    })
}

/// One uniform-Laplacian round: sampled clients train on the supervised
/// loss, then the server applies the consensus update over full models with
/// fixed weights a_kℓ = 1/(K−1) across the sampled set (no communities).
pub fn run_fedu_round(state: &mut FederationState) -> Result<RoundOutcome> {
    let round = state.round;
    let mut rng = stream(state.seed, &[TAG_SAMPLE, round as u64]);
    let sampled = sample_clients(state.num_clients(), state.params.sample_fraction, &mut rng)?;
    let bits_down = take_downlink(state, &sampled);

    let (trained, failed) = train_sampled(state, &sampled, 0.0)?;
    let model_floats = state.clients[0].model.param_count() as u64;

    if !trained.is_empty() {
        let coef = state.params.lambda * state.params.tau()
            / (state.num_clients() as f64 - 1.0);
        let s = trained.len() as f64;
        let items: Vec<(f64, &ClientModel)> = trained.iter().map(|t| (1.0, &t.model)).collect();
        let sum = weighted_model_sum(&items);
        for t in &trained {
            // Σ_{ℓ≠k}(w_k − w_ℓ) = s·w_k − Σ_ℓ w_ℓ, applied Jacobi-style.
            let new_model = weighted_model_sum(&[(1.0 - coef * s, &t.model), (coef, &sum)]);
            let client = &mut state.clients[t.id];
            client.model = new_model;
            client.anchors = t.anchors.clone();
            client.pending_downlink_floats = Some(model_floats);
        }
    }

    let mut records = BTreeMap::new();
    for t in &trained {
        let up = model_floats * BITS_PER_FLOAT;
        records.insert(t.id, evaluate_record(state, t.id, up, bits_down[&t.id], None)?);
    }

    state.round += 1;
    Ok(RoundOutcome {
        round,
        sampled,
        partition: None,
        graph: None,
        records,
        warnings: Vec::new(),
        failed,
    })
}

/// One local-only round: sampled clients train on the supervised loss;
/// nothing is transmitted.
pub fn run_local_round(state: &mut FederationState) -> Result<RoundOutcome> {
    let round = state.round;
    let mut rng = stream(state.seed, &[TAG_SAMPLE, round as u64]);
    let sampled = sample_clients(state.num_clients(), state.params.sample_fraction, &mut rng)?;

    let (trained, failed) = train_sampled(state, &sampled, 0.0)?;
    for t in &trained {
        let client = &mut state.clients[t.id];
        client.model = t.model.clone();
        client.anchors = t.anchors.clone();
    }

    let mut records = BTreeMap::new();
    for t in &trained {
        records.insert(t.id, evaluate_record(state, t.id, 0, 0, None)?);
    }

    state.round += 1;
    Ok(RoundOutcome {
        round,
        sampled,
        partition: None,
        graph: None,
        records,
        warnings: Vec::new(),
        failed,
    })
}

/// Dispatch one round of the selected method.
pub fn run_method_round(
    state: &mut FederationState,
    method: crate::metrics::Method,
) -> Result<RoundOutcome> {
    match method {
        crate::metrics::Method::Sfmtl => run_round(state),
        crate::metrics::Method::Fedavg => run_fedavg_round(state),
        crate::metrics::Method::Fedu => run_fedu_round(state),
        crate::metrics::Method::Local => run_local_round(state),
    }
}
