//! Training objectives: label cross-entropy, the structure-learning loss on
//! positive and sampled negative edges, and their weighted combination.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::events::NodeId;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NegativeSample {
    pub anchor: NodeId,
    pub neg_node: NodeId,
    pub neg_time: f64,
}

/// Uniform negative destinations (excluding the anchor) at uniform times in
/// `[t_min, t_upper]`.
#[derive(Clone, Copy, Debug)]
pub struct NegativeSampler {
    pub num_nodes: usize,
    pub t_min: f64,
}

impl NegativeSampler {
    pub fn new(num_nodes: usize, t_min: f64) -> Self {
        NegativeSampler { num_nodes, t_min }
    }

    pub fn sample<R: Rng>(
        &self,
        anchor: NodeId,
        t_upper: f64,
        q: usize,
        rng: &mut R,
    ) -> Vec<NegativeSample> {
        (0..q)
            .map(|_| {
                let neg_node = if self.num_nodes > 1 {
                    let k = rng.gen_range(0..self.num_nodes - 1);
                    if k >= anchor {
                        k + 1
                    } else {
                        k
                    }
                } else {
                    anchor
                };
                let neg_time = if t_upper > self.t_min {
                    rng.gen_range(self.t_min..=t_upper)
                } else {
                    self.t_min
                };
                NegativeSample {
                    anchor,
                    neg_node,
                    neg_time,
                }
            })
            .collect()
    }
}

pub fn sample_negatives<R: Rng>(
    sampler: &NegativeSampler,
    anchor: NodeId,
    t_upper: f64,
    q: usize,
    rng: &mut R,
) -> Result<Vec<NegativeSample>> {
    if q == 0 {
        return Err(Error::Contract("Q must be at least 1".into()));
    }
    Ok(sampler.sample(anchor, t_upper, q, rng))
}

/// Mean cross-entropy over labeled predictions.
pub struct ClassificationLoss {
    pub value: Var,
    pub labeled: usize,
    /// Set when the batch held no labels and the loss is the constant 0.
    pub empty: bool,
}

/// `mean_k CE(logits_k, label_k)`. `positive_weight` scales the loss of
/// label-1 examples when class reweighting is enabled.
pub fn classification_loss(
    tape: &mut Tape,
    logits: &[Var],
    labels: &[u8],
    positive_weight: Option<f64>,
) -> Result<ClassificationLoss> {
    if logits.len() != labels.len() {
        return Err(Error::shape(
            "classification_loss",
            &[logits.len()],
            &[labels.len()],
        ));
    }
    if logits.is_empty() {
        return Ok(ClassificationLoss {
            value: tape.scalar(0.0)?,
            labeled: 0,
            empty: true,
        });
    }
    let mut total: Option<Var> = None;
    for (&l, &y) in logits.iter().zip(labels) {
        let w = match (positive_weight, y) {
            (Some(pw), 1) => pw,
            _ => 1.0,
        };
        let ce = tape.cross_entropy_with_logits(l, usize::from(y), w)?;
        total = Some(match total {
            Some(t) => tape.add(t, ce)?,
            None => ce,
        });
    }
    let value = tape.scalar_mul(total.unwrap(), 1.0 / logits.len() as f64)?;
    Ok(ClassificationLoss {
        value,
        labeled: logits.len(),
        empty: false,
    })
}

/// `−log σ(S/ε) · (w − 1)²` for an observed edge.
pub fn positive_term(tape: &mut Tape, score: Var, weight: Var, epsilon: f64) -> Result<Var> {
    let scaled = tape.scalar_mul(score, 1.0 / epsilon)?;
    let ls = tape.log_sigmoid(scaled)?;
    let coef = tape.neg(ls)?;
    let off = tape.affine(weight, 1.0, -1.0)?;
    let sq = tape.mul(off, off)?;
    tape.mul(coef, sq)
}

/// `−log σ(−S/ε) · w²` for a sampled negative edge.
pub fn negative_term(tape: &mut Tape, score: Var, weight: Var, epsilon: f64) -> Result<Var> {
    let scaled = tape.scalar_mul(score, -1.0 / epsilon)?;
    let ls = tape.log_sigmoid(scaled)?;
    let coef = tape.neg(ls)?;
    let sq = tape.mul(weight, weight)?;
    tape.mul(coef, sq)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Plain sum over every term.
    Sum,
    /// Sum divided by the number of positive edges.
    #[default]
    MeanPerPositive,
}

/// One positive edge with the `(score, weight)` of each of its negatives.
pub struct EdgeTerms {
    pub score: Var,
    pub weight: Var,
    pub negatives: Vec<(Var, Var)>,
}

pub fn dgsl_loss(
    tape: &mut Tape,
    edges: &[EdgeTerms],
    epsilon: f64,
    reduction: Reduction,
) -> Result<Var> {
    if epsilon <= 0.0 {
        return Err(Error::Contract(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let mut total = tape.scalar(0.0)?;
    for e in edges {
        let p = positive_term(tape, e.score, e.weight, epsilon)?;
        total = tape.add(total, p)?;
        for &(s, w) in &e.negatives {
            let n = negative_term(tape, s, w, epsilon)?;
            total = tape.add(total, n)?;
        }
    }
    match reduction {
        Reduction::Sum => Ok(total),
        Reduction::MeanPerPositive if edges.is_empty() => Ok(total),
        Reduction::MeanPerPositive => tape.scalar_mul(total, 1.0 / edges.len() as f64),
    }
}

/// `l_tel + γ · l_dgsl` on the tape.
pub fn total_loss_var(tape: &mut Tape, l_tel: Var, l_dgsl: Var, gamma: f64) -> Result<Var> {
    if gamma < 0.0 {
        return Err(Error::Contract(format!(
            "gamma must be non-negative, got {gamma}"
        )));
    }
    if gamma == 0.0 {
        return Ok(l_tel);
    }
    let scaled = tape.scalar_mul(l_dgsl, gamma)?;
    tape.add(l_tel, scaled)
}

pub fn total_loss(l_tel: f64, l_dgsl: f64, gamma: f64) -> f64 {
    l_tel + gamma * l_dgsl
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_tel: f64,
    pub l_dgsl: f64,
    pub total: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl LossBreakdown {
    pub fn new(l_tel: f64, l_dgsl: f64, gamma: f64, epsilon: f64) -> Self {
        LossBreakdown {
            l_tel,
            l_dgsl,
            total: total_loss(l_tel, l_dgsl, gamma),
            gamma,
            epsilon,
        }
    }
}
