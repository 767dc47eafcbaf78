//! Edge-weight prediction and the per-epoch weight cache.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::autodiff::{ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::events::EdgeKey;
use crate::nn::Mlp;

/// `w = ReLU(MLP(z_i ‖ z_j))` with one hidden layer of width `d`.
#[derive(Clone, Debug)]
pub struct EdgeFilter {
    pub mlp: Mlp,
    pub dim: usize,
}

impl EdgeFilter {
    pub fn new<R: Rng>(params: &mut ParamSet, dim: usize, rng: &mut R) -> Result<Self> {
        let mlp = Mlp::new(params, "filter", &[2 * dim, dim, 1], rng)?;
        // Every fresh weight is exactly 0.5: the positive bias keeps it off the
        // dead side of the ReLU, and zero output weights stop it from tracking
        // the embedding scale. Cached weights feed the next batch's
        // aggregation, so a weight that grows with |z| compounds from batch to
        // batch.
        let last = mlp.layers.last().expect("two layers");
        let (weight, bias) = (last.weight, last.bias);
        params.get_mut(bias).value = Tensor::vector(vec![0.5]);
        let shape = params.get(weight).value.shape().to_vec();
        params.get_mut(weight).value = Tensor::zeros(&shape);
        Ok(EdgeFilter { mlp, dim })
    }

    pub fn predict_weight(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        z_i: Var,
        z_j: Var,
    ) -> Result<Var> {
        let (a, b) = (
            tape.value(z_i).shape().to_vec(),
            tape.value(z_j).shape().to_vec(),
        );
        if a != b || a != [self.dim] {
            return Err(Error::shape("predict_weight", &a, &b));
        }
        let x = tape.concat(&[z_i, z_j])?;
        let out = self.mlp.forward(tape, params, x)?;
        let w = tape.relu(out)?;
        tape.sum(w)
    }

    /// Plain evaluation on raw vectors.
    pub fn predict_value(&self, params: &ParamSet, z_i: &[f64], z_j: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(z_i.to_vec()))?;
        let b = tape.constant(Tensor::vector(z_j.to_vec()))?;
        let w = self.predict_weight(&mut tape, params, a, b)?;
        Ok(tape.scalar_value(w))
    }
}

/// Weights of edges already seen this epoch. Each key is computed at most
/// once until [`WeightCache::invalidate_epoch`].
#[derive(Debug, Default)]
pub struct WeightCache {
    weights: HashMap<EdgeKey, f64>,
    evaluations: AtomicU64,
}

impl Clone for WeightCache {
    fn clone(&self) -> Self {
        WeightCache {
            weights: self.weights.clone(),
            evaluations: AtomicU64::new(self.eval_counter()),
        }
    }
}

impl WeightCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &EdgeKey) -> Option<f64> {
        self.weights.get(key).copied()
    }

    /// Stored weight, or the result of `compute` which is then stored and
    /// counted as one filter evaluation.
    pub fn get_or_compute(
        &mut self,
        key: EdgeKey,
        compute: impl FnOnce() -> Result<f64>,
    ) -> Result<f64> {
        if let Some(&w) = self.weights.get(&key) {
            return Ok(w);
        }
        let w = compute()?;
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        self.weights.insert(key, w);
        Ok(w)
    }

    /// Stores a weight computed elsewhere (on a training tape). Returns false
    /// and keeps the old value if the key exists. The evaluation that
    /// produced it is counted through [`WeightCache::add_evaluations`].
    pub fn record(&mut self, key: EdgeKey, w: f64) -> bool {
        if self.weights.contains_key(&key) {
            return false;
        }
        self.weights.insert(key, w);
        true
    }

    pub fn add_evaluations(&self, n: u64) {
        self.evaluations.fetch_add(n, Ordering::Relaxed);
    }

    pub fn invalidate_epoch(&mut self) {
        self.weights.clear();
    }

    pub fn eval_counter(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&EdgeKey, &f64)> {
        self.weights.iter()
    }
}
