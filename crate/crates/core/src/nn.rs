//! Small trainable building blocks recorded on a [`Tape`].

use rand::Rng;

use crate::autodiff::{ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = params.add_glorot(format!("{name}.weight"), fan_in, fan_out, rng)?;
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?;
        Ok(Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        tape.linear(x, w, b)
    }
}

/// Feed-forward stack with ReLU between layers and no final activation.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `sizes = [input, hidden..., output]`.
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        sizes: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(k, w)| Linear::new(params, &format!("{name}.{k}"), w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Mlp { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let mut h = x;
        for (k, layer) in self.layers.iter().enumerate() {
            if k > 0 {
                h = tape.relu(h)?;
            }
            h = layer.forward(tape, params, h)?;
        }
        Ok(h)
    }
}

/// Gated recurrent cell: `state' = (1 − u) ⊙ n + u ⊙ state`.
#[derive(Clone, Debug)]
pub struct GruCell {
    reset_in: Linear,
    reset_state: ParamId,
    update_in: Linear,
    update_state: ParamId,
    cand_in: Linear,
    cand_state: ParamId,
    pub input_dim: usize,
    pub state_dim: usize,
}

impl GruCell {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        input_dim: usize,
        state_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(GruCell {
            reset_in: Linear::new(
                params,
                &format!("{name}.reset_in"),
                input_dim,
                state_dim,
                rng,
            )?,
            reset_state: params.add_glorot(
                format!("{name}.reset_state"),
                state_dim,
                state_dim,
                rng,
            )?,
            update_in: Linear::new(
                params,
                &format!("{name}.update_in"),
                input_dim,
                state_dim,
                rng,
            )?,
            update_state: params.add_glorot(
                format!("{name}.update_state"),
                state_dim,
                state_dim,
                rng,
            )?,
            cand_in: Linear::new(
                params,
                &format!("{name}.cand_in"),
                input_dim,
                state_dim,
                rng,
            )?,
            cand_state: params.add_glorot(
                format!("{name}.cand_state"),
                state_dim,
                state_dim,
                rng,
            )?,
            input_dim,
            state_dim,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        input: Var,
        state: Var,
    ) -> Result<Var> {
        let gate = |tape: &mut Tape, lin: &Linear, rec: ParamId| -> Result<Var> {
            let a = lin.forward(tape, params, input)?;
            let u = tape.param(params, rec);
            let b = tape.matmul(state, u)?;
            tape.add(a, b)
        };
        let r_pre = gate(tape, &self.reset_in, self.reset_state)?;
        let r = tape.sigmoid(r_pre)?;
        let u_pre = gate(tape, &self.update_in, self.update_state)?;
        let u = tape.sigmoid(u_pre)?;
        let cand_x = self.cand_in.forward(tape, params, input)?;
        let us = tape.param(params, self.cand_state);
        let cand_h = tape.matmul(state, us)?;
        let gated = tape.mul(r, cand_h)?;
        let n_pre = tape.add(cand_x, gated)?;
        let n = tape.tanh(n_pre)?;
        // (1 − u) ⊙ n + u ⊙ s  =  n + u ⊙ (s − n)
        let diff = tape.sub(state, n)?;
        let keep = tape.mul(u, diff)?;
        tape.add(n, keep)
    }

    /// Every parameter of the cell, for initialisation tests.
    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.reset_in.weight,
            self.reset_in.bias,
            self.reset_state,
            self.update_in.weight,
            self.update_in.bias,
            self.update_state,
            self.cand_in.weight,
            self.cand_in.bias,
            self.cand_state,
        ]
    }
}
