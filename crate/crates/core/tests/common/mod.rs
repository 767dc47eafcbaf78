//! Straight-line f64 transcriptions of the noise score, edge filter, memory
//! cell and aggregation layers, plus a hand-built six-event graph. Shared by
//! the oracle tests and the acceptance run.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tgraph_denoise::autodiff::{ParamSet, Tape, Tensor};
use tgraph_denoise::config::Mode;
use tgraph_denoise::events::TemporalEvent;
use tgraph_denoise::filter::EdgeFilter;
use tgraph_denoise::model::{Forward, Model, ModelConfig, StreamState};
use tgraph_denoise::noise::{NeighborSide, NoiseFunction};

pub struct Oracle<'a> {
    pub p: &'a ParamSet,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl<'a> Oracle<'a> {
    fn v(&self, name: &str) -> &'a [f64] {
        self.p
            .by_name(name)
            .unwrap_or_else(|| panic!("no param {name}"))
            .value
            .data()
    }

    fn cols(&self, name: &str) -> usize {
        *self.p.by_name(name).unwrap().value.shape().last().unwrap()
    }

    /// `x · W` for `W: [len(x), cols]`.
    fn times(&self, x: &[f64], name: &str) -> Vec<f64> {
        let (w, cols) = (self.v(name), self.cols(name));
        assert_eq!(w.len(), x.len() * cols, "{name}");
        let mut out = vec![0.0; cols];
        for (r, xr) in x.iter().enumerate() {
            for c in 0..cols {
                out[c] += xr * w[r * cols + c];
            }
        }
        out
    }

    fn linear(&self, x: &[f64], name: &str) -> Vec<f64> {
        let mut out = self.times(x, &format!("{name}.weight"));
        for (o, b) in out.iter_mut().zip(self.v(&format!("{name}.bias"))) {
            *o += b;
        }
        out
    }

    fn mlp2(&self, x: &[f64], name: &str) -> Vec<f64> {
        let hidden: Vec<f64> = self
            .linear(x, &format!("{name}.0"))
            .into_iter()
            .map(|h| h.max(0.0))
            .collect();
        self.linear(&hidden, &format!("{name}.1"))
    }

    pub fn delta(&self) -> f64 {
        self.v("noise.delta_raw")[0].exp().ln_1p()
    }

    pub fn kappa(&self, dt: f64) -> f64 {
        (-self.delta() * dt).exp()
    }

    pub fn phi(&self, dt: f64) -> Vec<f64> {
        let (w, b) = (self.v("time.omega"), self.v("time.phase"));
        w.iter().zip(b).map(|(w, b)| (dt * w + b).cos()).collect()
    }

    /// `w = max(0, MLP(z_i ‖ z_j))`.
    pub fn weight(&self, z_i: &[f64], z_j: &[f64]) -> f64 {
        let x: Vec<f64> = z_i.iter().chain(z_j).copied().collect();
        self.mlp2(&x, "filter")[0].max(0.0)
    }

    pub fn gru(&self, x: &[f64], s: &[f64]) -> Vec<f64> {
        let gate = |inp: &str, rec: &str| -> Vec<f64> {
            let a = self.linear(x, &format!("memory.{inp}"));
            let b = self.times(s, &format!("memory.{rec}"));
            a.iter().zip(&b).map(|(a, b)| sigmoid(a + b)).collect()
        };
        let r = gate("reset_in", "reset_state");
        let u = gate("update_in", "update_state");
        let cx = self.linear(x, "memory.cand_in");
        let ch = self.times(s, "memory.cand_state");
        (0..s.len())
            .map(|k| {
                let n = (cx[k] + r[k] * ch[k]).tanh();
                (1.0 - u[k]) * n + u[k] * s[k]
            })
            .collect()
    }

    /// Self-attention weights of a center node over `(z_p, t − t_p)` pairs.
    pub fn alpha(&self, z_c: &[f64], nbrs: &[(Vec<f64>, f64)]) -> Vec<f64> {
        let d = z_c.len();
        let a = self.v("noise.attention");
        let wz_c = self.times(z_c, "noise.projection");
        let raw: Vec<f64> = nbrs
            .iter()
            .map(|(z_p, dt)| {
                let wz_p = self.times(z_p, "noise.projection");
                let score: f64 = (0..d).map(|k| a[k] * wz_c[k] + a[d + k] * wz_p[k]).sum();
                sigmoid(self.kappa(*dt) * score)
            })
            .collect();
        let total: f64 = raw.iter().map(|x| x.exp()).sum();
        raw.iter().map(|x| x.exp() / total).collect()
    }

    fn beta_logit(&self, z_c: &[f64], nbrs: &[(Vec<f64>, f64)], literal: bool) -> f64 {
        let d = z_c.len();
        if nbrs.is_empty() {
            return self.linear(&vec![0.0; d], "noise.scorer")[0];
        }
        let alpha = self.alpha(z_c, nbrs);
        let mut pre = vec![0.0; d];
        for (al, (z_p, _)) in alpha.iter().zip(nbrs) {
            let wz = self.times(if literal { z_c } else { z_p }, "noise.projection");
            for k in 0..d {
                pre[k] += al * wz[k];
            }
        }
        let mean_dt = nbrs.iter().map(|(_, dt)| dt).sum::<f64>() / nbrs.len() as f64;
        let kz: Vec<f64> = pre
            .iter()
            .map(|x| self.kappa(mean_dt) * sigmoid(*x))
            .collect();
        self.linear(&kz, "noise.scorer")[0]
    }

    pub fn beta(
        &self,
        z_i: &[f64],
        ni: &[(Vec<f64>, f64)],
        z_j: &[f64],
        nj: &[(Vec<f64>, f64)],
        literal: bool,
    ) -> f64 {
        let (bi, bj) = (
            self.beta_logit(z_i, ni, literal),
            self.beta_logit(z_j, nj, literal),
        );
        bi.exp() / (bi.exp() + bj.exp())
    }

    fn temporal(&self, z_c: &[f64], nbrs: &[(Vec<f64>, f64)], z_other: &[f64]) -> f64 {
        if nbrs.is_empty() {
            return 0.0;
        }
        let alpha = self.alpha(z_c, nbrs);
        alpha
            .iter()
            .zip(nbrs)
            .map(|(al, (z_p, dt))| al * sq_dist(z_p, z_other) * self.kappa(*dt))
            .sum()
    }

    pub fn noise(
        &self,
        z_i: &[f64],
        ni: &[(Vec<f64>, f64)],
        z_j: &[f64],
        nj: &[(Vec<f64>, f64)],
        literal: bool,
        static_only: bool,
    ) -> f64 {
        let base = sq_dist(z_i, z_j);
        if static_only {
            return base;
        }
        let beta = self.beta(z_i, ni, z_j, nj, literal);
        base + beta * self.temporal(z_i, ni, z_j) + (1.0 - beta) * self.temporal(z_j, nj, z_i)
    }
}

/// Memory vectors plus a weighted event history.
pub struct HandGraph {
    pub memory: Vec<Vec<f64>>,
    pub last_update: Vec<f64>,
    pub events: Vec<TemporalEvent>,
    pub weights: Vec<f64>,
}

impl HandGraph {
    /// All edges touching `node` strictly before `t`: `(other, t_e, features, w)`.
    pub fn neighbors(&self, node: usize, t: f64) -> Vec<(usize, f64, Vec<f64>, f64)> {
        self.events
            .iter()
            .zip(&self.weights)
            .filter(|(e, _)| e.t < t && (e.src == node || e.dst == node))
            .map(|(e, w)| {
                let other = if e.src == node { e.dst } else { e.src };
                (other, e.t, e.features.clone(), *w)
            })
            .collect()
    }

    pub fn memory_neighbors(&self, node: usize, t: f64) -> Vec<(Vec<f64>, f64)> {
        self.neighbors(node, t)
            .into_iter()
            .map(|(o, te, _, _)| (self.memory[o].clone(), t - te))
            .collect()
    }
}

impl Oracle<'_> {
    /// `h^(layer)` of `node` at `t`; layer 0 is the memory.
    pub fn embedding(&self, g: &HandGraph, node: usize, t: f64, layer: usize) -> Vec<f64> {
        if layer == 0 {
            return g.memory[node].clone();
        }
        let prev = self.embedding(g, node, t, layer - 1);
        let d = prev.len();
        let nbrs = g.neighbors(node, t);
        let mut h_tilde = vec![0.0; d];
        if !nbrs.is_empty() {
            for (other, te, feat, w) in &nbrs {
                let mut x = self.embedding(g, *other, t, layer - 1);
                x.extend_from_slice(feat);
                x.extend(self.phi(t - te));
                let m = self.mlp2(&x, &format!("layer{}.neighbor", layer - 1));
                for k in 0..d {
                    h_tilde[k] += w * m[k];
                }
            }
            h_tilde.iter_mut().for_each(|x| *x = x.max(0.0));
        }
        let x: Vec<f64> = prev.iter().chain(&h_tilde).copied().collect();
        self.mlp2(&x, &format!("layer{}.combine", layer - 1))
    }
}

pub const NODES: usize = 5;
pub const D_E: usize = 3;
pub const D_EMB: usize = 4;

/// Model with jittered parameters and a six-event history over five nodes,
/// with weights for every history edge held in the cache.
pub fn hand_scenario(
    layers: usize,
    mode: Mode,
    cross_uses_self: bool,
    seed: u64,
) -> (Model, StreamState, HandGraph) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig {
        num_nodes: NODES,
        d_e: D_E,
        d_emb: D_EMB,
        d_time: 3,
        layers,
        neighbors: 10,
        mode,
        cross_uses_self,
    };
    let mut model = Model::new(config, seed).unwrap();
    for p in model.params.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let pairs = [
        (0, 1, 1.0),
        (1, 2, 2.5),
        (0, 2, 3.0),
        (2, 3, 4.25),
        (3, 0, 5.0),
        (1, 3, 6.5),
    ];
    let events: Vec<TemporalEvent> = pairs
        .iter()
        .map(|&(s, d, t)| TemporalEvent {
            src: s,
            dst: d,
            t,
            features: (0..D_E).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            label: Some(0),
        })
        .collect();
    let weights: Vec<f64> = events.iter().map(|_| rng.gen_range(0.1..1.5)).collect();
    let memory: Vec<Vec<f64>> = (0..NODES)
        .map(|_| (0..D_EMB).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let last_update: Vec<f64> = (0..NODES).map(|n| n as f64 * 0.5).collect();

    let mut state = StreamState::new(NODES, D_EMB);
    for (n, m) in memory.iter().enumerate() {
        state.memory.set(n, m, last_update[n]);
    }
    for (e, w) in events.iter().zip(&weights) {
        state.neighbors.insert(e).unwrap();
        state.cache.record(e.key(), *w);
    }
    let graph = HandGraph {
        memory,
        last_update,
        events,
        weights,
    };
    (model, state, graph)
}

/// Query edges at times after the whole history, plus one in the middle.
pub const QUERIES: [(usize, usize, f64); 5] = [
    (0, 1, 7.0),
    (2, 3, 8.0),
    (4, 0, 7.5),
    (1, 4, 9.0),
    (3, 2, 4.5),
];

/// Largest absolute deviation of noise score, edge weight and embedding from
/// the oracle over every query, for `layers ∈ {1, 2}` and both neighbor
/// summaries. Returns `(score, weight, embedding)`.
pub fn max_oracle_deviation(seed: u64) -> (f64, f64, f64) {
    let mut worst = (0.0_f64, 0.0_f64, 0.0_f64);
    for layers in [1, 2] {
        for literal in [false, true] {
            let (model, state, g) = hand_scenario(layers, Mode::Full, literal, seed);
            let oracle = Oracle { p: &model.params };
            let mut fwd = Forward::new(&model, &state);
            for &(i, j, t) in &QUERIES {
                let z_i = fwd.embedding(i, t).unwrap();
                let z_j = fwd.embedding(j, t).unwrap();
                let s = fwd.noise((i, z_i), (j, z_j), t).unwrap();
                let w = fwd.edge_weight(z_i, z_j).unwrap();
                let (zi, zj) = (
                    fwd.tape.value(z_i).data().to_vec(),
                    fwd.tape.value(z_j).data().to_vec(),
                );

                let oi = oracle.embedding(&g, i, t, layers);
                let oj = oracle.embedding(&g, j, t, layers);
                let os = oracle.noise(
                    &oi,
                    &g.memory_neighbors(i, t),
                    &oj,
                    &g.memory_neighbors(j, t),
                    literal,
                    false,
                );
                let ow = oracle.weight(&oi, &oj);

                let dz = zi
                    .iter()
                    .chain(&zj)
                    .zip(oi.iter().chain(&oj))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                worst.0 = worst.0.max((fwd.tape.scalar_value(s.value) - os).abs());
                worst.1 = worst.1.max((fwd.tape.scalar_value(w) - ow).abs());
                worst.2 = worst.2.max(dz);
            }
        }
    }
    worst
}

fn random_side(tape: &mut Tape, d: usize, rng: &mut ChaCha8Rng) -> NeighborSide {
    let n = rng.gen_range(0..=8);
    if n == 0 {
        return NeighborSide::empty();
    }
    let rows: Vec<_> = (0..n)
        .map(|_| {
            let s: Vec<f64> = (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect();
            tape.constant(Tensor::vector(s)).unwrap()
        })
        .collect();
    NeighborSide {
        states: Some(tape.stack_rows(&rows, d).unwrap()),
        dts: (0..n).map(|_| rng.gen_range(0.0..500.0)).collect(),
    }
}

/// One random attention instance: `α` sums to one on every nonempty side,
/// `β_ij + β_ji == 1` exactly, and the filter weight is non-negative.
pub fn attention_case(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.gen_range(1..6);
    let mut params = ParamSet::new();
    let nf = NoiseFunction::new(&mut params, d, &mut rng).unwrap();
    let filter = EdgeFilter::new(&mut params, d, &mut rng).unwrap();
    let (i, j) = (rng.gen_range(0..50), rng.gen_range(0..50));
    let z_i: Vec<f64> = (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let z_j: Vec<f64> = (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect();

    let mut tape = Tape::new();
    let side_i = random_side(&mut tape, d, &mut rng);
    let side_j = random_side(&mut tape, d, &mut rng);
    let vi = tape.constant(Tensor::vector(z_i.clone())).unwrap();
    let vj = tape.constant(Tensor::vector(z_j.clone())).unwrap();
    let ij = nf
        .dynamic_noise(&mut tape, &params, (i, vi, &side_i), (j, vj, &side_j))
        .unwrap();
    let ji = nf
        .dynamic_noise(&mut tape, &params, (j, vj, &side_j), (i, vi, &side_i))
        .unwrap();

    let sum = tape.scalar_value(ij.beta_ij) + tape.scalar_value(ji.beta_ij);
    if sum != 1.0 {
        return Err(format!("beta_ij + beta_ji = {sum:?}"));
    }
    for (alpha, side) in [(ij.alpha_i, &side_i), (ij.alpha_j, &side_j)] {
        match alpha {
            Some(a) => {
                let a = tape.value(a).data();
                if a.len() != side.dts.len() || a.iter().any(|x| *x < 0.0) {
                    return Err(format!("alpha {a:?}"));
                }
                let s: f64 = a.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(format!("alpha sums to {s:?}"));
                }
            }
            None if side.dts.is_empty() => {}
            None => return Err("missing alpha on a nonempty side".into()),
        }
    }
    let w = filter.predict_value(&params, &z_i, &z_j).unwrap();
    if w < 0.0 {
        return Err(format!("negative weight {w}"));
    }
    Ok(())
}
