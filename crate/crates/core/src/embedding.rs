//! Weighted temporal graph aggregation, time encoding and per-node memory.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::events::NodeId;
use crate::nn::{GruCell, Mlp};

/// `φ(Δt) = cos(Δt·ω + b)` with trainable frequencies `ω` and phases `b`.
#[derive(Clone, Debug)]
pub struct TimeEncoder {
    pub omega: ParamId,
    pub phase: ParamId,
    pub dim: usize,
}

impl TimeEncoder {
    /// Frequencies span `1 .. 1e-9` geometrically; phases start at zero.
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Result<Self> {
        let omega = (0..dim)
            .map(|k| {
                let exponent = if dim > 1 {
                    9.0 * k as f64 / (dim - 1) as f64
                } else {
                    0.0
                };
                10f64.powf(-exponent)
            })
            .collect();
        Ok(TimeEncoder {
            omega: params.add(format!("{name}.omega"), Tensor::vector(omega))?,
            phase: params.add(format!("{name}.phase"), Tensor::zeros(&[dim]))?,
            dim,
        })
    }

    /// Encodes each delta as one row of an `[n, dim]` matrix.
    pub fn encode(&self, tape: &mut Tape, params: &ParamSet, dts: &[f64]) -> Result<Var> {
        let dt = tape.constant(Tensor::vector(dts.to_vec()))?;
        let omega = tape.param(params, self.omega);
        let phase = tape.param(params, self.phase);
        let arg = tape.outer(dt, omega)?;
        let shifted = tape.add_bias(arg, phase)?;
        tape.cos(shifted)
    }

    pub fn encode_one(&self, tape: &mut Tape, params: &ParamSet, dt: f64) -> Result<Var> {
        let dt = tape.constant(Tensor::vector(vec![dt]))?;
        let omega = tape.param(params, self.omega);
        let phase = tape.param(params, self.phase);
        let arg = tape.mul_scalar(omega, dt)?;
        let shifted = tape.add(arg, phase)?;
        tape.cos(shifted)
    }

    /// Plain evaluation without recording.
    pub fn time_encode(&self, params: &ParamSet, dt: f64) -> Vec<f64> {
        let omega = params.get(self.omega).value.data();
        let phase = params.get(self.phase).value.data();
        omega
            .iter()
            .zip(phase)
            .map(|(w, b)| (dt * w + b).cos())
            .collect()
    }
}

/// One aggregation layer: `MLP₁` over neighbor rows and `MLP₂` combining the
/// node's previous-layer vector with the aggregate.
#[derive(Clone, Debug)]
pub struct EmbeddingLayer {
    pub neighbor_mlp: Mlp,
    pub combine_mlp: Mlp,
}

impl EmbeddingLayer {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        d_emb: usize,
        d_e: usize,
        d_time: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(EmbeddingLayer {
            neighbor_mlp: Mlp::new(
                params,
                &format!("{name}.neighbor"),
                &[d_emb + d_e + d_time, d_emb, d_emb],
                rng,
            )?,
            combine_mlp: Mlp::new(
                params,
                &format!("{name}.combine"),
                &[2 * d_emb, d_emb, d_emb],
                rng,
            )?,
        })
    }

    /// `ReLU(Σ_j w_j · MLP₁(h_j ‖ e_j ‖ φ(t − t_j)))`.
    ///
    /// `neighbor_rows` is `[n, d_emb + d_e + d_time]`; `None` or `n = 0` gives
    /// the zero vector.
    pub fn aggregate_layer(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        neighbor_rows: Option<Var>,
        weights: Option<Var>,
    ) -> Result<Var> {
        let d = self.neighbor_mlp.output_dim();
        match (neighbor_rows, weights) {
            (Some(rows), Some(w)) if tape.value(rows).rows() > 0 => {
                if tape.value(w).len() != tape.value(rows).rows() {
                    return Err(Error::shape(
                        "aggregate_layer",
                        tape.value(w).shape(),
                        tape.value(rows).shape(),
                    ));
                }
                let messages = self.neighbor_mlp.forward(tape, params, rows)?;
                let summed = tape.matmul(w, messages)?;
                tape.relu(summed)
            }
            _ => tape.constant(Tensor::zeros(&[d])),
        }
    }

    /// `MLP₂(h_prev ‖ h̃)`.
    pub fn combine_layer(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        h_prev: Var,
        h_tilde: Var,
    ) -> Result<Var> {
        let (a, b) = (
            tape.value(h_prev).shape().to_vec(),
            tape.value(h_tilde).shape().to_vec(),
        );
        if a != b {
            return Err(Error::shape("combine_layer", &a, &b));
        }
        let x = tape.concat(&[h_prev, h_tilde])?;
        self.combine_mlp.forward(tape, params, x)
    }
}

/// Builds the `[n, d_emb + d_e + d_time]` neighbor input matrix.
pub fn neighbor_inputs(
    tape: &mut Tape,
    params: &ParamSet,
    time: &TimeEncoder,
    neighbor_states: &[Var],
    d_emb: usize,
    features: &[&[f64]],
    dts: &[f64],
) -> Result<Var> {
    let n = neighbor_states.len();
    let h = tape.stack_rows(neighbor_states, d_emb)?;
    let d_e = features.first().map_or(0, |f| f.len());
    let flat: Vec<f64> = features.iter().flat_map(|f| f.iter().copied()).collect();
    let phi = time.encode(tape, params, dts)?;
    if d_e == 0 {
        return tape.concat_cols(&[h, phi]);
    }
    let e = tape.constant(Tensor::matrix(n, d_e, flat)?)?;
    tape.concat_cols(&[h, e, phi])
}

/// Per-node memory vectors and last-update times, zero-initialised.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState {
    dim: usize,
    vectors: Vec<f64>,
    last_update: Vec<f64>,
}

impl MemoryState {
    pub fn new(num_nodes: usize, dim: usize) -> Self {
        MemoryState {
            dim,
            vectors: vec![0.0; num_nodes * dim],
            last_update: vec![0.0; num_nodes],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_nodes(&self) -> usize {
        self.last_update.len()
    }

    pub fn get(&self, node: NodeId) -> &[f64] {
        &self.vectors[node * self.dim..(node + 1) * self.dim]
    }

    pub fn last_update(&self, node: NodeId) -> f64 {
        self.last_update[node]
    }

    pub fn set(&mut self, node: NodeId, value: &[f64], t: f64) {
        self.vectors[node * self.dim..(node + 1) * self.dim].copy_from_slice(value);
        self.last_update[node] = t;
    }
}

/// One memory-updating interaction.
#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub src: NodeId,
    pub dst: NodeId,
    pub t: f64,
    pub features: Vec<f64>,
    pub weight: f64,
}

/// Recurrent memory updater consuming `[s_self ‖ s_other ‖ e ‖ φ(Δt) ‖ w]`.
#[derive(Clone, Debug)]
pub struct MemoryUpdater {
    pub cell: GruCell,
}

impl MemoryUpdater {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        d_emb: usize,
        d_e: usize,
        d_time: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(MemoryUpdater {
            cell: GruCell::new(params, "memory", 2 * d_emb + d_e + d_time + 1, d_emb, rng)?,
        })
    }

    /// Applies `messages` in order on top of the vars held by `memory`.
    pub fn apply(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        time: &TimeEncoder,
        messages: &[Message],
        memory: &mut TapeMemory<'_>,
    ) -> Result<()> {
        let mut last_t = f64::NEG_INFINITY;
        for m in messages {
            if m.t < last_t {
                return Err(Error::Order {
                    t: m.t,
                    last: last_t,
                });
            }
            last_t = m.t;
            let (s_src, t_src) = memory.state(tape, m.src)?;
            let (s_dst, t_dst) = memory.state(tape, m.dst)?;
            let e = tape.constant(Tensor::vector(m.features.clone()))?;
            let w = tape.constant(Tensor::vector(vec![m.weight]))?;
            let phi_src = time.encode_one(tape, params, m.t - t_src)?;
            let msg_src = tape.concat(&[s_src, s_dst, e, phi_src, w])?;
            let new_src = self.cell.forward(tape, params, msg_src, s_src)?;
            if m.dst != m.src {
                let phi_dst = time.encode_one(tape, params, m.t - t_dst)?;
                let msg_dst = tape.concat(&[s_dst, s_src, e, phi_dst, w])?;
                let new_dst = self.cell.forward(tape, params, msg_dst, s_dst)?;
                memory.set(m.dst, new_dst, m.t);
            }
            memory.set(m.src, new_src, m.t);
        }
        Ok(())
    }
}

/// Memory as seen from one tape: stored vectors enter as constants, updates
/// made on the tape shadow them until [`TapeMemory::commit`].
pub struct TapeMemory<'m> {
    base: &'m MemoryState,
    leaves: HashMap<NodeId, Var>,
    updated: HashMap<NodeId, (Var, f64)>,
    order: Vec<NodeId>,
}

impl<'m> TapeMemory<'m> {
    pub fn new(base: &'m MemoryState) -> Self {
        TapeMemory {
            base,
            leaves: HashMap::new(),
            updated: HashMap::new(),
            order: Vec::new(),
        }
    }

    pub fn base(&self) -> &MemoryState {
        self.base
    }

    /// Current var and last-update time of `node`.
    pub fn state(&mut self, tape: &mut Tape, node: NodeId) -> Result<(Var, f64)> {
        if let Some(&s) = self.updated.get(&node) {
            return Ok(s);
        }
        if let Some(&v) = self.leaves.get(&node) {
            return Ok((v, self.base.last_update(node)));
        }
        let v = tape.constant(Tensor::vector(self.base.get(node).to_vec()))?;
        self.leaves.insert(node, v);
        Ok((v, self.base.last_update(node)))
    }

    pub fn var(&mut self, tape: &mut Tape, node: NodeId) -> Result<Var> {
        Ok(self.state(tape, node)?.0)
    }

    pub fn set(&mut self, node: NodeId, var: Var, t: f64) {
        if self.updated.insert(node, (var, t)).is_none() {
            self.order.push(node);
        }
    }

    pub fn updated_nodes(&self) -> &[NodeId] {
        &self.order
    }

    /// Values of every updated node, in first-update order.
    pub fn updates(&self, tape: &Tape) -> Vec<(NodeId, Vec<f64>, f64)> {
        self.order
            .iter()
            .map(|n| {
                let (v, t) = self.updated[n];
                (*n, tape.value(v).data().to_vec(), t)
            })
            .collect()
    }
}

/// Updates `memory` in place from `messages` (no gradient is kept).
pub fn memory_update(
    memory: &mut MemoryState,
    messages: &[Message],
    updater: &MemoryUpdater,
    time: &TimeEncoder,
    params: &ParamSet,
) -> Result<()> {
    let mut tape = Tape::new();
    let updates = {
        let mut view = TapeMemory::new(memory);
        updater.apply(&mut tape, params, time, messages, &mut view)?;
        view.updates(&tape)
    };
    for (node, value, t) in updates {
        memory.set(node, &value, t);
    }
    Ok(())
}
