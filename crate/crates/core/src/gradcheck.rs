//! Central finite-difference audit of the tape's analytic gradients.
//!
//! Primitive checks perturb every input coordinate. End-to-end checks run a
//! small two-layer model over a short stream and compare a random subset of
//! coordinates plus a few random directions through the whole parameter set.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{ParamId, ParamSet, Tape, Tensor, Var};
use crate::config::{Mode, StructureGrad, TrainConfig};
use crate::error::Result;
use crate::events::{EventStream, TemporalEvent};
use crate::model::{Forward, Model, ModelConfig, StreamState};
use crate::objectives::{classification_loss, dgsl_loss, EdgeTerms, NegativeSampler, Reduction};
use crate::train::{process_batch, BatchContext, BatchOptions};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: usize = 50;

const SUBSET: usize = 64;
const DIRECTIONS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub seeds: usize,
    pub worst_seed: u64,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

type Objective<'f> = dyn Fn(&ParamSet) -> Result<(Tape, Var)> + 'f;

fn evaluate(f: &Objective<'_>, params: &ParamSet) -> Result<f64> {
    let (tape, out) = f(params)?;
    Ok(tape.scalar_value(out))
}

fn analytic(f: &Objective<'_>, params: &ParamSet) -> Result<ParamSet> {
    let (tape, out) = f(params)?;
    let mut grads = params.clone();
    grads.zero_grad();
    tape.backward(out, &mut grads)?;
    Ok(grads)
}

fn coordinates(params: &ParamSet) -> Vec<(ParamId, usize)> {
    params
        .iter()
        .flat_map(|(id, p)| (0..p.value.len()).map(move |k| (id, k)))
        .collect()
}

fn nudged(params: &ParamSet, id: ParamId, k: usize, by: f64) -> ParamSet {
    let mut p = params.clone();
    p.get_mut(id).value.data_mut()[k] += by;
    p
}

/// Per-coordinate check of `f` over `coords` (all coordinates when `None`).
pub fn coordinate_error(
    f: &Objective<'_>,
    params: &ParamSet,
    coords: Option<&[(ParamId, usize)]>,
) -> Result<f64> {
    let grads = analytic(f, params)?;
    let all;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = coordinates(params);
            &all
        }
    };
    let mut a = Vec::with_capacity(coords.len());
    let mut n = Vec::with_capacity(coords.len());
    for &(id, k) in coords {
        a.push(grads.get(id).grad.data()[k]);
        let up = evaluate(f, &nudged(params, id, k, STEP))?;
        let down = evaluate(f, &nudged(params, id, k, -STEP))?;
        n.push((up - down) / (2.0 * STEP));
    }
    Ok(relative_error(&a, &n))
}

/// Directional check along unit vectors drawn from `rng`.
pub fn directional_error<R: Rng>(
    f: &Objective<'_>,
    params: &ParamSet,
    directions: usize,
    rng: &mut R,
) -> Result<f64> {
    let grads = analytic(f, params)?;
    let mut a = Vec::with_capacity(directions);
    let mut n = Vec::with_capacity(directions);
    for _ in 0..directions {
        let dirs: Vec<Vec<f64>> = params
            .iter()
            .map(|(_, p)| {
                (0..p.value.len())
                    .map(|_| rng.sample(StandardNormal))
                    .collect()
            })
            .collect();
        let norm = dirs
            .iter()
            .flatten()
            .map(|x: &f64| x * x)
            .sum::<f64>()
            .sqrt();
        let shifted = |sign: f64| {
            let mut p = params.clone();
            for (param, d) in p.iter_mut().zip(&dirs) {
                for (v, dv) in param.value.data_mut().iter_mut().zip(d) {
                    *v += sign * STEP * dv / norm;
                }
            }
            p
        };
        let dot: f64 = grads
            .iter()
            .zip(&dirs)
            .map(|((_, g), d)| g.grad.data().iter().zip(d).map(|(x, y)| x * y).sum::<f64>())
            .sum();
        a.push(dot / norm);
        let up = evaluate(f, &shifted(1.0))?;
        let down = evaluate(f, &shifted(-1.0))?;
        n.push((up - down) / (2.0 * STEP));
    }
    Ok(relative_error(&a, &n))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], away_from_zero: bool) -> Tensor {
    let len = shape.iter().product::<usize>();
    let data = (0..len)
        .map(|_| {
            let x: f64 = rng.sample(StandardNormal);
            if away_from_zero {
                x.signum() * (x.abs() + 0.1)
            } else {
                x
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Reduces `out` to a scalar through a fixed random projection, so that
/// every output element carries a distinct weight.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    if shape.is_empty() {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let c = tape.constant(random_tensor(&mut rng, &shape, false))?;
    let prod = tape.mul(out, c)?;
    tape.sum(prod)
}

type Primitive = fn(&mut Tape, &[Var]) -> Result<Var>;

fn primitives() -> Vec<(&'static str, Vec<Vec<usize>>, bool, Primitive)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], false, |t, v| {
            t.matmul(v[0], v[1])
        }),
        (
            "matmul_vec_mat",
            vec![vec![4], vec![4, 3]],
            false,
            |t, v| t.matmul(v[0], v[1]),
        ),
        (
            "matmul_mat_vec",
            vec![vec![3, 4], vec![4]],
            false,
            |t, v| t.matmul(v[0], v[1]),
        ),
        ("add", vec![vec![5], vec![5]], false, |t, v| {
            t.add(v[0], v[1])
        }),
        ("sub", vec![vec![5], vec![5]], false, |t, v| {
            t.sub(v[0], v[1])
        }),
        ("mul", vec![vec![2, 3], vec![2, 3]], false, |t, v| {
            t.mul(v[0], v[1])
        }),
        ("add_bias", vec![vec![3, 4], vec![4]], false, |t, v| {
            t.add_bias(v[0], v[1])
        }),
        ("affine", vec![vec![5]], false, |t, v| {
            t.affine(v[0], 1.7, -0.3)
        }),
        ("neg", vec![vec![5]], false, |t, v| t.neg(v[0])),
        ("mul_scalar", vec![vec![5], vec![]], false, |t, v| {
            t.mul_scalar(v[0], v[1])
        }),
        ("concat", vec![vec![3], vec![2]], false, |t, v| {
            t.concat(&[v[0], v[1]])
        }),
        (
            "concat_cols",
            vec![vec![3, 2], vec![3, 4]],
            false,
            |t, v| t.concat_cols(&[v[0], v[1]]),
        ),
        (
            "stack_rows",
            vec![vec![4], vec![4], vec![4]],
            false,
            |t, v| t.stack_rows(&[v[0], v[1], v[2]], 4),
        ),
        ("relu", vec![vec![6]], true, |t, v| t.relu(v[0])),
        ("sigmoid", vec![vec![6]], false, |t, v| t.sigmoid(v[0])),
        ("tanh", vec![vec![6]], false, |t, v| t.tanh(v[0])),
        ("exp", vec![vec![6]], false, |t, v| t.exp(v[0])),
        ("cos", vec![vec![6]], false, |t, v| t.cos(v[0])),
        ("softplus", vec![vec![6]], false, |t, v| t.softplus(v[0])),
        ("log_sigmoid", vec![vec![6]], false, |t, v| {
            t.log_sigmoid(v[0])
        }),
        ("sum", vec![vec![2, 3]], false, |t, v| t.sum(v[0])),
        ("mean", vec![vec![2, 3]], false, |t, v| t.mean(v[0])),
        ("dot", vec![vec![5], vec![5]], false, |t, v| {
            t.dot(v[0], v[1])
        }),
        ("softmax", vec![vec![6]], false, |t, v| t.softmax(v[0])),
        (
            "squared_l2_distance",
            vec![vec![5], vec![5]],
            false,
            |t, v| t.squared_l2_distance(v[0], v[1]),
        ),
        (
            "row_squared_distance",
            vec![vec![3, 4], vec![4]],
            false,
            |t, v| t.row_squared_distance(v[0], v[1]),
        ),
        ("outer", vec![vec![3], vec![4]], false, |t, v| {
            t.outer(v[0], v[1])
        }),
        ("index", vec![vec![5]], false, |t, v| t.index(v[0], 2)),
        ("cross_entropy", vec![vec![3]], false, |t, v| {
            t.cross_entropy_with_logits(v[0], 1, 1.3)
        }),
        (
            "linear",
            vec![vec![2, 4], vec![4, 3], vec![3]],
            false,
            |t, v| t.linear(v[0], v[1], v[2]),
        ),
    ]
}

fn primitive_error(seed: u64, shapes: &[Vec<usize>], kinked: bool, op: Primitive) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(k, s)| params.add(format!("x{k}"), random_tensor(&mut rng, s, kinked)))
        .collect::<Result<Vec<_>>>()?;
    let f = move |p: &ParamSet| -> Result<(Tape, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(p, id)).collect();
        let out = op(&mut tape, &vars)?;
        let loss = project(&mut tape, out, seed)?;
        Ok((tape, loss))
    };
    coordinate_error(&f, &params, None)
}

/// The quantity an end-to-end check differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Score,
    Weight,
    Embedding,
    StructureLoss,
    ClassificationLoss,
}

impl Target {
    pub const ALL: [Target; 5] = [
        Target::Score,
        Target::Weight,
        Target::Embedding,
        Target::StructureLoss,
        Target::ClassificationLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Target::Score => "noise_score",
            Target::Weight => "edge_weight",
            Target::Embedding => "embedding",
            Target::StructureLoss => "structure_loss",
            Target::ClassificationLoss => "classification_loss",
        }
    }
}

/// Small model with perturbed parameters and a stream state that has
/// history, cached weights, and pending messages.
pub struct Fixture {
    pub model: Model,
    pub state: StreamState,
    pub check: Vec<TemporalEvent>,
    pub negatives: Vec<(usize, f64)>,
    pub seed: u64,
}

impl Fixture {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x51ed));
        let (num_nodes, d_e) = (6, 3);
        let mut times: Vec<f64> = (0..14).map(|_| rng.gen_range(0.0..10.0)).collect();
        times.sort_by(f64::total_cmp);
        let events: Vec<TemporalEvent> = times
            .into_iter()
            .map(|t| {
                let src = rng.gen_range(0..num_nodes);
                let dst = (src + rng.gen_range(1..num_nodes)) % num_nodes;
                TemporalEvent {
                    src,
                    dst,
                    t,
                    features: (0..d_e).map(|_| rng.sample(StandardNormal)).collect(),
                    label: Some(rng.gen_range(0..2)),
                }
            })
            .collect();
        let stream = EventStream::new(events, num_nodes, d_e)?;
        let cfg = TrainConfig {
            d_emb: 4,
            d_time: 3,
            layers: 2,
            neighbors: 3,
            q: 1,
            mode: Mode::Full,
            seed,
            ..Default::default()
        };
        let mut model = Model::new(ModelConfig::from_train(&cfg, num_nodes, d_e), seed)?;
        for p in model.params.iter_mut() {
            for v in p.value.data_mut() {
                *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let mut state = StreamState::new(num_nodes, cfg.d_emb);
        let sampler = NegativeSampler::new(num_nodes, stream.t_min());
        let mut opts = BatchOptions::inference(&cfg);
        opts.structure_grad = StructureGrad::Full;
        let mut ctx = BatchContext {
            sampler,
            rng: &mut rng.clone(),
            optimizer: None,
        };
        for batch in stream.events[..12].chunks(4) {
            process_batch(&mut model, &mut state, batch, &opts, &mut ctx)?;
        }
        let check = stream.events[12..].to_vec();
        let negatives = check
            .iter()
            .map(|e| {
                let s = sampler.sample(e.src, e.t, 1, &mut rng)[0];
                (s.neg_node, s.neg_time)
            })
            .collect();
        Ok(Fixture {
            model,
            state,
            check,
            negatives,
            seed,
        })
    }

    /// Builds `target` on a fresh tape with `params` in place of the model's.
    pub fn objective(&self, target: Target, params: &ParamSet) -> Result<(Tape, Var)> {
        let mut model = self.model.clone();
        model.params = params.clone();
        let mut fwd = Forward::new(&model, &self.state);
        fwd.apply_messages(&self.state.pending)?;
        let mut parts = Vec::new();
        let mut logits = Vec::new();
        let mut labels = Vec::new();
        let mut edges = Vec::new();
        for (ev, &(neg_node, neg_t)) in self.check.iter().zip(&self.negatives) {
            let z_i = fwd.embedding(ev.src, ev.t)?;
            let z_j = fwd.embedding(ev.dst, ev.t)?;
            match target {
                Target::Score => parts.push(fwd.noise((ev.src, z_i), (ev.dst, z_j), ev.t)?.value),
                Target::Weight => parts.push(fwd.edge_weight(z_i, z_j)?),
                Target::Embedding => {
                    let both = fwd.tape.concat(&[z_i, z_j])?;
                    parts.push(project(&mut fwd.tape, both, self.seed)?);
                }
                Target::ClassificationLoss => {
                    logits.push(fwd.logits(z_i)?);
                    labels.push(ev.label.unwrap_or(0));
                }
                Target::StructureLoss => {
                    let w = fwd.edge_weight(z_i, z_j)?;
                    let s = fwd.noise((ev.src, z_i), (ev.dst, z_j), ev.t)?.value;
                    let z_a = fwd.embedding(ev.src, neg_t)?;
                    let z_n = fwd.embedding(neg_node, neg_t)?;
                    let w_n = fwd.edge_weight(z_a, z_n)?;
                    let s_n = fwd.noise((ev.src, z_a), (neg_node, z_n), neg_t)?.value;
                    edges.push(EdgeTerms {
                        score: s,
                        weight: w,
                        negatives: vec![(s_n, w_n)],
                    });
                }
            }
        }
        let out = match target {
            Target::ClassificationLoss => {
                classification_loss(&mut fwd.tape, &logits, &labels, None)?.value
            }
            Target::StructureLoss => {
                dgsl_loss(&mut fwd.tape, &edges, 0.7, Reduction::MeanPerPositive)?
            }
            _ => {
                let mut acc = parts[0];
                for &p in &parts[1..] {
                    acc = fwd.tape.add(acc, p)?;
                }
                acc
            }
        };
        Ok((fwd.finish().tape, out))
    }
}

fn end_to_end_error(seed: u64, target: Target) -> Result<f64> {
    let fixture = Fixture::new(seed)?;
    let params = fixture.model.params.clone();
    let f = |p: &ParamSet| fixture.objective(target, p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1ec);
    let all = coordinates(&params);
    let picked: Vec<_> = sample(&mut rng, all.len(), SUBSET.min(all.len()))
        .into_iter()
        .map(|k| all[k])
        .collect();
    let coord = coordinate_error(&f, &params, Some(&picked))?;
    let dir = directional_error(&f, &params, DIRECTIONS, &mut rng)?;
    Ok(coord.max(dir))
}

fn summarize(
    name: &str,
    seeds: &[u64],
    mut run: impl FnMut(u64) -> Result<f64>,
) -> Result<CheckOutcome> {
    let mut worst = (seeds[0], 0.0_f64);
    for &s in seeds {
        let e = run(s)?;
        // a NaN error always becomes the worst
        if e.is_nan() || e > worst.1 {
            worst = (s, e);
        }
    }
    Ok(CheckOutcome {
        name: name.to_string(),
        seeds: seeds.len(),
        worst_seed: worst.0,
        max_rel_error: worst.1,
        passed: worst.1 < TOLERANCE,
    })
}

/// Every primitive and end-to-end check over seeds `base..base + seeds`.
pub fn run_all(base: u64, seeds: usize) -> Result<Vec<CheckOutcome>> {
    let seed_list: Vec<u64> = (0..seeds as u64).map(|k| base.wrapping_add(k)).collect();
    let mut out = Vec::new();
    for (name, shapes, kinked, op) in primitives() {
        out.push(summarize(name, &seed_list, |s| {
            primitive_error(s, &shapes, kinked, op)
        })?);
    }
    for target in Target::ALL {
        out.push(summarize(target.name(), &seed_list, |s| {
            end_to_end_error(s, target)
        })?);
    }
    Ok(out)
}

pub fn format_table(outcomes: &[CheckOutcome]) -> String {
    let mut s = String::from("check,seeds,max_rel_error,worst_seed,result\n");
    for o in outcomes {
        let verdict = if o.passed { "pass" } else { "FAIL" };
        let _ = writeln!(
            s,
            "{},{},{:.3e},{},{}",
            o.name, o.seeds, o.max_rel_error, o.worst_seed, verdict
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0], &[0.5]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut params = ParamSet::new();
        let id = params.add("x", Tensor::vector(vec![0.3, -1.2])).unwrap();
        let g = |p: &ParamSet| -> Result<(Tape, Var)> {
            let mut tape = Tape::new();
            let x = tape.param(p, id);
            let sq = tape.mul(x, x)?;
            let detached = tape.detach(sq)?;
            let cube = tape.mul(detached, x)?;
            let out = tape.sum(cube)?;
            Ok((tape, out))
        };
        // analytic treats x² as constant: gradient x² instead of 3x²
        assert!(coordinate_error(&g, &params, None).unwrap() > 0.5);
    }

    #[test]
    fn primitives_pass_on_a_few_seeds() {
        for (name, shapes, kinked, op) in primitives() {
            for seed in 0..3 {
                let e = primitive_error(seed, &shapes, kinked, op).unwrap();
                assert!(e < TOLERANCE, "{name} seed {seed}: {e:e}");
            }
        }
    }

    #[test]
    fn end_to_end_passes_on_one_seed() {
        for target in Target::ALL {
            let e = end_to_end_error(11, target).unwrap();
            assert!(e < TOLERANCE, "{}: {e:e}", target.name());
        }
    }

    #[test]
    fn fixture_has_history_and_pending_messages() {
        let f = Fixture::new(3).unwrap();
        assert_eq!(f.state.pending.len(), 4);
        assert_eq!(f.check.len(), 2);
        assert!(f.state.cache.len() >= 12);
    }
}
