//! Model parameters, streaming state, and the per-batch forward context that
//! computes embeddings, edge weights and noise scores on one tape.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamSet, Tape, Tensor, Var};
use crate::config::{Mode, TrainConfig};
use crate::embedding::{
    neighbor_inputs, EmbeddingLayer, MemoryState, MemoryUpdater, Message, TapeMemory, TimeEncoder,
};
use crate::error::{Error, Result};
use crate::events::{EdgeKey, NodeId, TemporalEvent};
use crate::filter::{EdgeFilter, WeightCache};
use crate::neighbors::NeighborStore;
use crate::nn::Mlp;
use crate::noise::{NeighborSide, NoiseFunction, NoiseMode, NoiseVars};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_nodes: usize,
    pub d_e: usize,
    pub d_emb: usize,
    pub d_time: usize,
    pub layers: usize,
    pub neighbors: usize,
    pub mode: Mode,
    pub cross_uses_self: bool,
}

impl ModelConfig {
    pub fn from_train(cfg: &TrainConfig, num_nodes: usize, d_e: usize) -> Self {
        ModelConfig {
            num_nodes,
            d_e,
            d_emb: cfg.d_emb,
            d_time: cfg.d_time,
            layers: cfg.effective_layers(),
            neighbors: cfg.neighbors,
            mode: cfg.mode,
            cross_uses_self: cfg.cross_uses_self,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub time: TimeEncoder,
    pub layers: Vec<EmbeddingLayer>,
    pub updater: MemoryUpdater,
    pub noise: NoiseFunction,
    pub filter: EdgeFilter,
    pub classifier: Mlp,
    /// Two-layer scorer over `z_i ‖ z_j` for link prediction.
    pub link_head: Mlp,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = config.d_emb;
        let time = TimeEncoder::new(&mut params, "time", config.d_time)?;
        let layers = (0..config.layers)
            .map(|l| {
                EmbeddingLayer::new(
                    &mut params,
                    &format!("layer{l}"),
                    d,
                    config.d_e,
                    config.d_time,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let updater = MemoryUpdater::new(&mut params, d, config.d_e, config.d_time, &mut rng)?;
        let mut noise = NoiseFunction::new(&mut params, d, &mut rng)?;
        noise.cross_uses_self = config.cross_uses_self;
        if config.mode == Mode::StaticSim {
            noise.mode = NoiseMode::StaticSimilarity;
        }
        let filter = EdgeFilter::new(&mut params, d, &mut rng)?;
        let classifier = Mlp::new(&mut params, "classifier", &[d, d, 2], &mut rng)?;
        let link_head = Mlp::new(&mut params, "link", &[2 * d, d, 1], &mut rng)?;
        Ok(Model {
            config,
            params,
            time,
            layers,
            updater,
            noise,
            filter,
            classifier,
            link_head,
        })
    }

    pub fn uses_filter(&self) -> bool {
        self.config.mode.uses_filter()
    }
}

/// Everything that evolves while a stream is replayed.
#[derive(Clone, Debug)]
pub struct StreamState {
    pub memory: MemoryState,
    pub neighbors: NeighborStore,
    pub cache: WeightCache,
    /// Events of the previous batch whose memory messages are not yet applied.
    pub pending: Vec<TemporalEvent>,
}

impl StreamState {
    pub fn new(num_nodes: usize, d_emb: usize) -> Self {
        StreamState {
            memory: MemoryState::new(num_nodes, d_emb),
            neighbors: NeighborStore::new(num_nodes),
            cache: WeightCache::new(),
            pending: Vec::new(),
        }
    }

    /// Fresh memory and history; the cache is invalidated but its evaluation
    /// counter is kept.
    pub fn reset(&mut self) {
        let (n, d) = (self.memory.num_nodes(), self.memory.dim());
        self.memory = MemoryState::new(n, d);
        self.neighbors = NeighborStore::new(n);
        self.cache.invalidate_epoch();
        self.pending.clear();
    }
}

/// One batch's computation graph over a frozen [`StreamState`].
pub struct Forward<'a> {
    pub model: &'a Model,
    pub tape: Tape,
    memory: TapeMemory<'a>,
    neighbors: &'a NeighborStore,
    cache: &'a WeightCache,
    fallback_weights: HashMap<EdgeKey, f64>,
    embeddings: HashMap<(NodeId, u64, usize), Var>,
    filter_calls: u64,
}

/// What a finished forward pass hands back to the stream state.
pub struct ForwardOutput {
    pub tape: Tape,
    pub memory_updates: Vec<(NodeId, Vec<f64>, f64)>,
    pub fallback_weights: Vec<(EdgeKey, f64)>,
    pub filter_calls: u64,
}

impl<'a> Forward<'a> {
    pub fn new(model: &'a Model, state: &'a StreamState) -> Self {
        Forward {
            model,
            tape: Tape::new(),
            memory: TapeMemory::new(&state.memory),
            neighbors: &state.neighbors,
            cache: &state.cache,
            fallback_weights: HashMap::new(),
            embeddings: HashMap::new(),
            filter_calls: 0,
        }
    }

    fn params(&self) -> &'a ParamSet {
        &self.model.params
    }

    /// Weight of an edge already in the history: the cached value, or when
    /// absent the filter applied to the endpoints' stored memories.
    pub fn stored_weight(&mut self, key: EdgeKey) -> Result<f64> {
        if !self.model.uses_filter() {
            return Ok(1.0);
        }
        if let Some(w) = self.cache.get(&key) {
            return Ok(w);
        }
        if let Some(&w) = self.fallback_weights.get(&key) {
            return Ok(w);
        }
        let base = self.memory.base();
        let w =
            self.model
                .filter
                .predict_value(self.params(), base.get(key.src), base.get(key.dst))?;
        self.fallback_weights.insert(key, w);
        self.filter_calls += 1;
        Ok(w)
    }

    /// Applies memory messages for `events` on the tape, so the updater is
    /// trained through whatever this batch computes from memory.
    pub fn apply_messages(&mut self, events: &[TemporalEvent]) -> Result<()> {
        let mut messages = Vec::with_capacity(events.len());
        for ev in events {
            messages.push(Message {
                src: ev.src,
                dst: ev.dst,
                t: ev.t,
                features: ev.features.clone(),
                weight: self.stored_weight(ev.key())?,
            });
        }
        let model = self.model;
        model.updater.apply(
            &mut self.tape,
            &model.params,
            &model.time,
            &messages,
            &mut self.memory,
        )
    }

    pub fn memory_var(&mut self, node: NodeId) -> Result<Var> {
        self.memory.var(&mut self.tape, node)
    }

    /// `z_node(t) = h^(L)`.
    pub fn embedding(&mut self, node: NodeId, t: f64) -> Result<Var> {
        self.embedding_at(node, t, self.model.layers.len())
    }

    /// `h^(layer)` of `node` at `t`; layer 0 is the memory.
    pub fn embedding_at(&mut self, node: NodeId, t: f64, layer: usize) -> Result<Var> {
        let key = (node, t.to_bits(), layer);
        if let Some(&v) = self.embeddings.get(&key) {
            return Ok(v);
        }
        let v = if layer == 0 {
            self.memory_var(node)?
        } else {
            let h_prev = self.embedding_at(node, t, layer - 1)?;
            let records = self
                .neighbors
                .most_recent(node, t, self.model.config.neighbors);
            let model = self.model;
            let params = &model.params;
            let lay = &model.layers[layer - 1];
            let h_tilde = if records.is_empty() {
                lay.aggregate_layer(&mut self.tape, params, None, None)?
            } else {
                let mut states = Vec::with_capacity(records.len());
                let mut weights = Vec::with_capacity(records.len());
                for r in &records {
                    states.push(self.embedding_at(r.neighbor, t, layer - 1)?);
                    weights.push(self.stored_weight(r.edge_key)?);
                }
                let feats: Vec<&[f64]> = records.iter().map(|r| &r.features[..]).collect();
                let dts: Vec<f64> = records.iter().map(|r| t - r.t).collect();
                let rows = neighbor_inputs(
                    &mut self.tape,
                    params,
                    &model.time,
                    &states,
                    model.config.d_emb,
                    &feats,
                    &dts,
                )?;
                let w = self.tape.constant(Tensor::vector(weights))?;
                lay.aggregate_layer(&mut self.tape, params, Some(rows), Some(w))?
            };
            lay.combine_layer(&mut self.tape, params, h_prev, h_tilde)?
        };
        self.embeddings.insert(key, v);
        Ok(v)
    }

    /// Differentiable `w_ij(t)`; the constant 1 when the filter is disabled.
    pub fn edge_weight(&mut self, z_i: Var, z_j: Var) -> Result<Var> {
        if !self.model.uses_filter() {
            return self.tape.scalar(1.0);
        }
        self.filter_calls += 1;
        let model = self.model;
        model
            .filter
            .predict_weight(&mut self.tape, &model.params, z_i, z_j)
    }

    /// Recent neighbors of `node` before `t` as seen by the noise function.
    pub fn neighbor_side(&mut self, node: NodeId, t: f64) -> Result<NeighborSide> {
        let records = self
            .neighbors
            .most_recent(node, t, self.model.config.neighbors);
        if records.is_empty() {
            return Ok(NeighborSide::empty());
        }
        let mut states = Vec::with_capacity(records.len());
        for r in &records {
            states.push(self.memory_var(r.neighbor)?);
        }
        let stacked = self.tape.stack_rows(&states, self.model.config.d_emb)?;
        Ok(NeighborSide {
            states: Some(stacked),
            dts: records.iter().map(|r| t - r.t).collect(),
        })
    }

    pub fn noise(
        &mut self,
        (i, z_i): (NodeId, Var),
        (j, z_j): (NodeId, Var),
        t: f64,
    ) -> Result<NoiseVars> {
        let side_i = self.neighbor_side(i, t)?;
        let side_j = self.neighbor_side(j, t)?;
        let model = self.model;
        model.noise.dynamic_noise(
            &mut self.tape,
            &model.params,
            (i, z_i, &side_i),
            (j, z_j, &side_j),
        )
    }

    pub fn logits(&mut self, z: Var) -> Result<Var> {
        let model = self.model;
        model.classifier.forward(&mut self.tape, &model.params, z)
    }

    pub fn link_logit(&mut self, z_i: Var, z_j: Var) -> Result<Var> {
        let model = self.model;
        let x = self.tape.concat(&[z_i, z_j])?;
        let out = model.link_head.forward(&mut self.tape, &model.params, x)?;
        self.tape.sum(out)
    }

    pub fn finish(self) -> ForwardOutput {
        let memory_updates = self.memory.updates(&self.tape);
        let mut fallback_weights: Vec<_> = self.fallback_weights.into_iter().collect();
        fallback_weights.sort_by_key(|(k, _)| *k);
        ForwardOutput {
            tape: self.tape,
            memory_updates,
            fallback_weights,
            filter_calls: self.filter_calls,
        }
    }
}

impl StreamState {
    /// Commits a batch: memory updates, weights of the batch's edges, then
    /// the batch becomes pending and enters the history.
    pub fn commit(
        &mut self,
        out: &ForwardOutput,
        batch: &[TemporalEvent],
        batch_weights: &[(EdgeKey, f64)],
    ) -> Result<()> {
        for (node, value, t) in &out.memory_updates {
            if !value.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("memory update"));
            }
            self.memory.set(*node, value, *t);
        }
        self.cache.add_evaluations(out.filter_calls);
        for &(k, w) in &out.fallback_weights {
            self.cache.record(k, w);
        }
        for &(k, w) in batch_weights {
            self.cache.record(k, w);
        }
        for ev in batch {
            self.neighbors.insert(ev)?;
        }
        self.pending = batch.to_vec();
        Ok(())
    }
}
