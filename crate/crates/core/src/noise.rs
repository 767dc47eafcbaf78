//! Dynamic noise score of a temporal edge: a squared-distance base term plus
//! attention- and decay-weighted distances to each endpoint's recent
//! neighbors.
//!
//! For an edge `(i, j, t)` with embeddings `z_i, z_j` and neighbor memories
//! `z_p` (neighbors of `i`) and `z_q` (neighbors of `j`):
//!
//! ```text
//! S = ‖z_i − z_j‖² + β_ij Σ_p α_p ‖z_p − z_j‖² κ(t − t_p)
//!                  + (1 − β_ij) Σ_q α_q ‖z_q − z_i‖² κ(t − t_q)
//! α_p  = softmax_p σ(κ(t − t_p) · aᵀ[W z_i ‖ W z_p])
//! β_ij = softmax over {s(κ(Δ̄_i) z̃_i), s(κ(Δ̄_j) z̃_j)},  z̃_i = σ(Σ_p α_p W z_p)
//! κ(Δt) = exp(−δ Δt),  δ = softplus(δ_raw)
//! ```

use rand::Rng;

use crate::autodiff::{ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::events::NodeId;
use crate::nn::Linear;

/// Whether the temporal part of the score is used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NoiseMode {
    #[default]
    Dynamic,
    /// Base distance only.
    StaticSimilarity,
}

/// Numeric result with its parts, for diagnostics and exports.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseScore {
    pub value: f64,
    pub base: f64,
    pub self_i_term: f64,
    pub self_j_term: f64,
    pub beta_ij: f64,
}

/// Recorded result of one evaluation.
#[derive(Clone, Debug)]
pub struct NoiseVars {
    pub value: Var,
    pub base: Var,
    pub self_i_term: Var,
    pub self_j_term: Var,
    pub beta_ij: Var,
    pub alpha_i: Option<Var>,
    pub alpha_j: Option<Var>,
}

impl NoiseVars {
    pub fn score(&self, tape: &Tape) -> NoiseScore {
        NoiseScore {
            value: tape.scalar_value(self.value),
            base: tape.scalar_value(self.base),
            self_i_term: tape.scalar_value(self.self_i_term),
            self_j_term: tape.scalar_value(self.self_j_term),
            beta_ij: tape.scalar_value(self.beta_ij),
        }
    }
}

/// Historical neighbors of one endpoint: their memory rows `[n, d]` and the
/// elapsed time `t − t_p` for each.
#[derive(Clone, Debug)]
pub struct NeighborSide {
    pub states: Option<Var>,
    pub dts: Vec<f64>,
}

impl NeighborSide {
    pub fn empty() -> Self {
        NeighborSide {
            states: None,
            dts: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.dts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dts.is_empty()
    }
}

/// `exp(−δ · dt)`.
pub fn time_decay(dt: f64, delta: f64) -> Result<f64> {
    if dt < 0.0 || dt.is_nan() {
        return Err(Error::Contract(format!(
            "time decay needs dt >= 0, got {dt}"
        )));
    }
    Ok((-delta * dt).exp())
}

/// `softplus⁻¹(δ)`, used to initialise the decay rate.
pub fn inverse_softplus(delta: f64) -> f64 {
    delta.exp_m1().ln()
}

#[derive(Clone, Debug)]
pub struct NoiseFunction {
    /// Projection `W`, `[d, d]`.
    pub projection: ParamId,
    /// Attention vector `a`, `[2d]`.
    pub attention: ParamId,
    /// Unconstrained decay parameter; `δ = softplus(delta_raw)`.
    pub delta_raw: ParamId,
    /// Scalar scorer `s(·)` of the cross-temporal attention.
    pub scorer: Linear,
    pub dim: usize,
    pub mode: NoiseMode,
    /// Use `Σ_p α_p W z_i` (which ignores the neighbors) for the neighbor
    /// summary instead of `Σ_p α_p W z_p`.
    pub cross_uses_self: bool,
}

impl NoiseFunction {
    pub fn new<R: Rng>(params: &mut ParamSet, dim: usize, rng: &mut R) -> Result<Self> {
        let projection = params.add_glorot("noise.projection", dim, dim, rng)?;
        let a = ParamSet::glorot_values(2 * dim, 1, rng);
        let attention = params.add("noise.attention", Tensor::vector(a))?;
        let delta_raw = params.add("noise.delta_raw", Tensor::scalar(inverse_softplus(0.1)))?;
        let scorer = Linear::new(params, "noise.scorer", dim, 1, rng)?;
        Ok(NoiseFunction {
            projection,
            attention,
            delta_raw,
            scorer,
            dim,
            mode: NoiseMode::Dynamic,
            cross_uses_self: false,
        })
    }

    pub fn delta(&self, params: &ParamSet) -> f64 {
        let raw = params.get(self.delta_raw).value.item();
        if raw > 30.0 {
            raw
        } else {
            raw.exp().ln_1p()
        }
    }

    fn delta_var(&self, tape: &mut Tape, params: &ParamSet) -> Result<Var> {
        let raw = tape.param(params, self.delta_raw);
        tape.softplus(raw)
    }

    /// `κ(dt)` for each element of `dts`, as a recorded `[n]` vector.
    fn decay(&self, tape: &mut Tape, delta: Var, dts: &[f64]) -> Result<Var> {
        if let Some(bad) = dts.iter().find(|d| **d < 0.0) {
            return Err(Error::Contract(format!(
                "time decay needs dt >= 0, got {bad}"
            )));
        }
        let dt = tape.constant(Tensor::vector(dts.to_vec()))?;
        let scaled = tape.mul_scalar(dt, delta)?;
        let neg = tape.neg(scaled)?;
        tape.exp(neg)
    }

    /// Self-temporal attention of a center node over its neighbors.
    /// Returns `(α, W z_p rows, κ)`; `None` when there are no neighbors.
    pub fn self_attention(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        z_center: Var,
        side: &NeighborSide,
    ) -> Result<Option<(Var, Var, Var)>> {
        let Some(states) = side.states.filter(|_| !side.is_empty()) else {
            return Ok(None);
        };
        let n = side.len();
        let delta = self.delta_var(tape, params)?;
        let w = tape.param(params, self.projection);
        let a = tape.param(params, self.attention);
        let wz_center = tape.matmul(z_center, w)?;
        let proj = tape.matmul(states, w)?;
        let repeated = tape.stack_rows(&vec![wz_center; n], self.dim)?;
        let pairs = tape.concat_cols(&[repeated, proj])?;
        let raw = tape.matmul(pairs, a)?;
        let kappa = self.decay(tape, delta, &side.dts)?;
        let scaled = tape.mul(kappa, raw)?;
        let gated = tape.sigmoid(scaled)?;
        let alpha = tape.softmax(gated)?;
        Ok(Some((alpha, proj, kappa)))
    }

    /// Unnormalised cross-temporal logit `s(κ(Δ̄) z̃)` of one endpoint.
    fn cross_logit(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        z_center: Var,
        side: &NeighborSide,
        attn: Option<&(Var, Var, Var)>,
    ) -> Result<Var> {
        let Some((alpha, proj, _)) = attn else {
            // κ(0) · s(0)
            let zero = tape.constant(Tensor::zeros(&[self.dim]))?;
            return self.scorer.forward(tape, params, zero);
        };
        let summary_pre = if self.cross_uses_self {
            let w = tape.param(params, self.projection);
            let wz = tape.matmul(z_center, w)?;
            let total = tape.sum(*alpha)?;
            tape.mul_scalar(wz, total)?
        } else {
            tape.matmul(*alpha, *proj)?
        };
        let summary = tape.sigmoid(summary_pre)?;
        let mean_dt = side.dts.iter().sum::<f64>() / side.len() as f64;
        let delta = self.delta_var(tape, params)?;
        let kappa = self.decay(tape, delta, &[mean_dt])?;
        let kappa = tape.sum(kappa)?;
        let scaled = tape.mul_scalar(summary, kappa)?;
        self.scorer.forward(tape, params, scaled)
    }

    /// `β_ij` from both endpoints' logits. The pair is evaluated in a fixed
    /// order so that `β_ij + β_ji = 1` holds exactly.
    pub fn cross_attention(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        (i, z_i, side_i, attn_i): (NodeId, Var, &NeighborSide, Option<&(Var, Var, Var)>),
        (j, z_j, side_j, attn_j): (NodeId, Var, &NeighborSide, Option<&(Var, Var, Var)>),
    ) -> Result<Var> {
        let li = self.cross_logit(tape, params, z_i, side_i, attn_i)?;
        let lj = self.cross_logit(tape, params, z_j, side_j, attn_j)?;
        let li = tape.sum(li)?;
        let lj = tape.sum(lj)?;
        // a self-loop has no node order; order by logit value instead
        let i_first = match i.cmp(&j) {
            std::cmp::Ordering::Less => true,
            std::cmp::Ordering::Greater => false,
            std::cmp::Ordering::Equal => tape
                .scalar_value(li)
                .total_cmp(&tape.scalar_value(lj))
                .is_le(),
        };
        if i_first {
            let d = tape.sub(li, lj)?;
            tape.sigmoid(d)
        } else {
            let d = tape.sub(lj, li)?;
            let beta_ji = tape.sigmoid(d)?;
            tape.affine(beta_ji, -1.0, 1.0)
        }
    }

    /// `Σ_p α_p ‖z_p − z_other‖² κ_p`, or a zero constant without neighbors.
    fn temporal_term(
        &self,
        tape: &mut Tape,
        side: &NeighborSide,
        attn: Option<&(Var, Var, Var)>,
        z_other: Var,
    ) -> Result<Var> {
        match (attn, side.states) {
            (Some((alpha, _, kappa)), Some(states)) => {
                let dist = tape.row_squared_distance(states, z_other)?;
                let coef = tape.mul(*alpha, *kappa)?;
                tape.dot(coef, dist)
            }
            _ => tape.scalar(0.0),
        }
    }

    /// Full score for edge `(i, j, t)`.
    pub fn dynamic_noise(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        (i, z_i, side_i): (NodeId, Var, &NeighborSide),
        (j, z_j, side_j): (NodeId, Var, &NeighborSide),
    ) -> Result<NoiseVars> {
        let base = tape.squared_l2_distance(z_i, z_j)?;
        if self.mode == NoiseMode::StaticSimilarity {
            let zero = tape.scalar(0.0)?;
            let half = tape.scalar(0.5)?;
            return Ok(NoiseVars {
                value: base,
                base,
                self_i_term: zero,
                self_j_term: zero,
                beta_ij: half,
                alpha_i: None,
                alpha_j: None,
            });
        }
        let attn_i = self.self_attention(tape, params, z_i, side_i)?;
        let attn_j = self.self_attention(tape, params, z_j, side_j)?;
        let beta = self.cross_attention(
            tape,
            params,
            (i, z_i, side_i, attn_i.as_ref()),
            (j, z_j, side_j, attn_j.as_ref()),
        )?;
        let term_i = self.temporal_term(tape, side_i, attn_i.as_ref(), z_j)?;
        let term_j = self.temporal_term(tape, side_j, attn_j.as_ref(), z_i)?;
        let weighted_i = tape.mul_scalar(term_i, beta)?;
        let one_minus = tape.affine(beta, -1.0, 1.0)?;
        let weighted_j = tape.mul_scalar(term_j, one_minus)?;
        let hist = tape.add(weighted_i, weighted_j)?;
        let value = tape.add(base, hist)?;
        Ok(NoiseVars {
            value,
            base,
            self_i_term: term_i,
            self_j_term: term_j,
            beta_ij: beta,
            alpha_i: attn_i.map(|a| a.0),
            alpha_j: attn_j.map(|a| a.0),
        })
    }
}
