//! Batch processing and the epoch loop.
//!
//! Memory follows a deferred schedule: the messages of batch `b` are applied
//! at the start of batch `b + 1`, on that batch's tape, so the memory updater
//! receives gradients from the losses that read the updated memory. Edges of
//! batch `b` enter the neighbor history once batch `b` is finished.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Adam, AdamConfig, ParamSet, Var};
use crate::config::{StructureGrad, TrainConfig};
use crate::error::{Error, Result};
use crate::events::{batches, EdgeKey, EventStream, TemporalEvent};
use crate::metrics::roc_auc;
use crate::model::{Forward, Model, ModelConfig, StreamState};
use crate::noise::NoiseScore;
use crate::objectives::{
    classification_loss, dgsl_loss, total_loss_var, EdgeTerms, NegativeSampler, Reduction,
};

/// What a batch computes beyond its embeddings.
#[derive(Clone, Debug)]
pub struct BatchOptions {
    /// Backpropagate and step the optimizer.
    pub train: bool,
    /// Evaluate noise scores and the structure loss.
    pub structure: bool,
    /// Keep the noise score of every positive edge.
    pub keep_noise: bool,
    /// Keep `z_src` and `z_dst` of every edge.
    pub keep_embeddings: bool,
    /// Score each edge against one corrupted destination with the link head,
    /// adding the logistic loss when `train` is set.
    pub link: bool,
    pub q: usize,
    pub epsilon: f64,
    pub gamma: f64,
    pub reduction: Reduction,
    pub positive_weight: Option<f64>,
    pub structure_grad: StructureGrad,
}

impl BatchOptions {
    pub fn training(cfg: &TrainConfig) -> Self {
        BatchOptions {
            train: true,
            structure: true,
            keep_noise: false,
            keep_embeddings: false,
            link: cfg.link_joint,
            q: cfg.q,
            epsilon: cfg.epsilon,
            gamma: cfg.effective_gamma(),
            reduction: cfg.reduction,
            positive_weight: cfg.positive_weight,
            structure_grad: cfg.structure_grad,
        }
    }

    pub fn inference(cfg: &TrainConfig) -> Self {
        BatchOptions {
            train: false,
            structure: false,
            link: false,
            ..Self::training(cfg)
        }
    }
}

/// Per-edge results of a processed batch.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeRecord {
    pub key: EdgeKey,
    pub label: Option<u8>,
    /// `logit₁ − logit₀` of the source's label prediction.
    pub score: f64,
    pub weight: f64,
    pub noise: Option<NoiseScore>,
    pub z_src: Option<Vec<f64>>,
    pub z_dst: Option<Vec<f64>>,
    /// Link-head logits of the true and the corrupted destination.
    pub link: Option<(f64, f64)>,
    pub z_corrupt: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchStats {
    pub l_tel: f64,
    pub l_dgsl: f64,
    pub total: f64,
    pub labeled: usize,
    pub records: Vec<EdgeRecord>,
}

pub struct BatchContext<'r> {
    pub sampler: NegativeSampler,
    pub rng: &'r mut ChaCha8Rng,
    pub optimizer: Option<&'r mut Adam>,
}

fn cut(fwd: &mut Forward<'_>, detach: bool, a: Var, b: Var) -> Result<(Var, Var)> {
    if detach {
        Ok((fwd.tape.detach(a)?, fwd.tape.detach(b)?))
    } else {
        Ok((a, b))
    }
}

/// Runs one batch against `state` and commits it.
pub fn process_batch(
    model: &mut Model,
    state: &mut StreamState,
    batch: &[TemporalEvent],
    opts: &BatchOptions,
    ctx: &mut BatchContext<'_>,
) -> Result<BatchStats> {
    let pending = std::mem::take(&mut state.pending);
    let mut fwd = Forward::new(model, state);
    fwd.apply_messages(&pending)?;

    let mut logits = Vec::new();
    let mut labels = Vec::new();
    let mut edges = Vec::new();
    let mut weights: Vec<Var> = Vec::with_capacity(batch.len());
    let mut embeddings = Vec::with_capacity(batch.len());
    let mut noise_vars = Vec::new();
    let mut link_vars = Vec::new();
    let mut corrupt_vars = Vec::new();
    let mut scores = Vec::with_capacity(batch.len());
    for ev in batch {
        let z_i = fwd.embedding(ev.src, ev.t)?;
        let z_j = fwd.embedding(ev.dst, ev.t)?;
        let (zw_i, zw_j) = cut(
            &mut fwd,
            opts.structure_grad == StructureGrad::DetachAll,
            z_i,
            z_j,
        )?;
        let w = fwd.edge_weight(zw_i, zw_j)?;
        weights.push(w);
        embeddings.push((z_i, z_j));
        let l = fwd.logits(z_i)?;
        scores.push(l);
        if let Some(y) = ev.label {
            logits.push(l);
            labels.push(y);
        }
        if opts.structure {
            let detach_score = opts.structure_grad != StructureGrad::Full;
            let (zs_i, zs_j) = cut(&mut fwd, detach_score, z_i, z_j)?;
            let s = fwd.noise((ev.src, zs_i), (ev.dst, zs_j), ev.t)?;
            let mut negatives = Vec::with_capacity(opts.q);
            for neg in ctx.sampler.sample(ev.src, ev.t, opts.q, ctx.rng) {
                let z_a = fwd.embedding(ev.src, neg.neg_time)?;
                let z_n = fwd.embedding(neg.neg_node, neg.neg_time)?;
                let (zw_a, zw_n) = cut(
                    &mut fwd,
                    opts.structure_grad == StructureGrad::DetachAll,
                    z_a,
                    z_n,
                )?;
                let w_n = fwd.edge_weight(zw_a, zw_n)?;
                let (zs_a, zs_n) = cut(&mut fwd, detach_score, z_a, z_n)?;
                let s_n = fwd.noise((ev.src, zs_a), (neg.neg_node, zs_n), neg.neg_time)?;
                negatives.push((s_n.value, w_n));
            }
            edges.push(EdgeTerms {
                score: s.value,
                weight: w,
                negatives,
            });
            noise_vars.push(s);
        }
        if opts.link {
            let corrupt = ctx.sampler.sample(ev.src, ev.t, 1, ctx.rng)[0].neg_node;
            let z_c = fwd.embedding(corrupt, ev.t)?;
            let pos = fwd.link_logit(z_i, z_j)?;
            let neg = fwd.link_logit(z_i, z_c)?;
            link_vars.push((pos, neg));
            corrupt_vars.push(z_c);
        }
    }

    let tape = &mut fwd.tape;
    let cls = classification_loss(tape, &logits, &labels, opts.positive_weight)?;
    let mut l_tel = cls.value;
    if opts.train && opts.link && !link_vars.is_empty() {
        let mut sum = tape.scalar(0.0)?;
        for &(pos, neg) in &link_vars {
            let a = tape.log_sigmoid(pos)?;
            let flipped = tape.neg(neg)?;
            let b = tape.log_sigmoid(flipped)?;
            let both = tape.add(a, b)?;
            sum = tape.sub(sum, both)?;
        }
        let link_loss = tape.scalar_mul(sum, 1.0 / link_vars.len() as f64)?;
        l_tel = tape.add(l_tel, link_loss)?;
    }
    let l_dgsl = if opts.structure {
        dgsl_loss(tape, &edges, opts.epsilon, opts.reduction)?
    } else {
        tape.scalar(0.0)?
    };
    let total = total_loss_var(tape, l_tel, l_dgsl, opts.gamma)?;

    let mut records = Vec::with_capacity(batch.len());
    for (k, ev) in batch.iter().enumerate() {
        let lv = tape.value(scores[k]).data();
        let (z_i, z_j) = embeddings[k];
        records.push(EdgeRecord {
            key: ev.key(),
            label: ev.label,
            score: lv[1] - lv[0],
            weight: tape.scalar_value(weights[k]),
            noise: noise_vars
                .get(k)
                .map(|s| s.score(tape))
                .filter(|_| opts.keep_noise),
            z_src: opts
                .keep_embeddings
                .then(|| tape.value(z_i).data().to_vec()),
            z_dst: opts
                .keep_embeddings
                .then(|| tape.value(z_j).data().to_vec()),
            link: link_vars
                .get(k)
                .map(|&(p, n)| (tape.scalar_value(p), tape.scalar_value(n))),
            z_corrupt: corrupt_vars
                .get(k)
                .filter(|_| opts.keep_embeddings)
                .map(|&v| tape.value(v).data().to_vec()),
        });
    }
    let stats = BatchStats {
        l_tel: tape.scalar_value(l_tel),
        l_dgsl: tape.scalar_value(l_dgsl),
        total: tape.scalar_value(total),
        labeled: cls.labeled,
        records,
    };
    let batch_weights: Vec<(EdgeKey, f64)> = if model.uses_filter() {
        stats.records.iter().map(|r| (r.key, r.weight)).collect()
    } else {
        Vec::new()
    };

    let out = fwd.finish();
    if opts.train {
        model.params.zero_grad();
        out.tape.backward(total, &mut model.params)?;
        if model.params.iter().any(|(_, p)| !p.grad.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        if let Some(opt) = ctx.optimizer.as_deref_mut() {
            opt.step(&mut model.params);
        }
    }
    state.commit(&out, batch, &batch_weights)?;
    Ok(stats)
}

/// Replays `events` from the current state without training and returns one
/// record per edge.
pub fn replay(
    model: &mut Model,
    state: &mut StreamState,
    events: &[TemporalEvent],
    cfg: &TrainConfig,
    opts: &BatchOptions,
    sampler: NegativeSampler,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EdgeRecord>> {
    let mut records = Vec::with_capacity(events.len());
    let mut ctx = BatchContext {
        sampler,
        rng,
        optimizer: None,
    };
    for batch in batches(events, cfg.batch_size) {
        records.extend(process_batch(model, state, batch, opts, &mut ctx)?.records);
    }
    Ok(records)
}

/// AUC of the label scores of labeled records.
pub fn records_auc(records: &[EdgeRecord]) -> Result<f64> {
    let (scores, labels): (Vec<f64>, Vec<bool>) = records
        .iter()
        .filter_map(|r| r.label.map(|y| (r.score, y == 1)))
        .unzip();
    roc_auc(&scores, &labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_tel: f64,
    pub l_dgsl: f64,
    pub total: f64,
    pub val_auc: Option<f64>,
    pub test_auc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub best_params: ParamSet,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
    pub test_auc_at_best: Option<f64>,
    pub filter_evaluations: u64,
}

fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_mul(1 << 20).wrapping_add(epoch as u64));
    rng
}

/// Trains on `train`, selects by AUC on `val` (which is replayed after each
/// epoch from the end-of-epoch state), and reports `test` AUC at the selected
/// epoch when given.
pub fn train(
    cfg: &TrainConfig,
    train_s: &EventStream,
    val_s: &EventStream,
    test_s: Option<&EventStream>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_s.is_empty() {
        return Err(Error::EmptyStream);
    }
    let mcfg = ModelConfig::from_train(cfg, train_s.num_nodes, train_s.d_e);
    let mut model = Model::new(mcfg, cfg.seed)?;
    let mut state = StreamState::new(train_s.num_nodes, cfg.d_emb);
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let t_min = train_s.t_min();
    let sampler = NegativeSampler::new(train_s.num_nodes, t_min);
    let train_opts = BatchOptions::training(cfg);
    let eval_opts = BatchOptions::inference(cfg);

    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ParamSet, Option<f64>)> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        state.reset();
        let mut rng = epoch_rng(cfg.seed, epoch, 1);
        let (mut l_tel, mut l_dgsl, mut total, mut n) = (0.0, 0.0, 0.0, 0usize);
        for (b, batch) in batches(&train_s.events, cfg.batch_size).enumerate() {
            let mut ctx = BatchContext {
                sampler,
                rng: &mut rng,
                optimizer: Some(&mut adam),
            };
            let stats = process_batch(&mut model, &mut state, batch, &train_opts, &mut ctx)
                .map_err(|e| match e {
                    Error::NonFinite(what) => Error::Divergence {
                        epoch,
                        batch: b,
                        detail: format!(
                            "non-finite {what}; running means l_tel={:.6} l_dgsl={:.6}",
                            l_tel / n.max(1) as f64,
                            l_dgsl / n.max(1) as f64
                        ),
                    },
                    other => other,
                })?;
            if !stats.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    detail: format!("loss l_tel={} l_dgsl={}", stats.l_tel, stats.l_dgsl),
                });
            }
            l_tel += stats.l_tel;
            l_dgsl += stats.l_dgsl;
            total += stats.total;
            n += 1;
        }
        let n = n.max(1) as f64;
        let mut eval_rng = epoch_rng(cfg.seed, epoch, 2);
        let mut after_train = state.clone();
        let in_replay = |e: Error| match e {
            Error::NonFinite(what) => Error::Divergence {
                epoch,
                batch: 0,
                detail: format!("non-finite {what} while replaying held-out events after training"),
            },
            other => other,
        };
        let val_records = replay(
            &mut model,
            &mut after_train,
            &val_s.events,
            cfg,
            &eval_opts,
            sampler,
            &mut eval_rng,
        )
        .map_err(in_replay)?;
        let val_auc = records_auc(&val_records).ok();
        let test_auc = match test_s {
            Some(ts) => {
                let recs = replay(
                    &mut model,
                    &mut after_train,
                    &ts.events,
                    cfg,
                    &eval_opts,
                    sampler,
                    &mut eval_rng,
                )
                .map_err(in_replay)?;
                records_auc(&recs).ok()
            }
            None => None,
        };
        log::info!(
            "epoch {epoch}: l_tel={:.5} l_dgsl={:.5} total={:.5} val_auc={val_auc:?}",
            l_tel / n,
            l_dgsl / n,
            total / n
        );
        epochs.push(EpochLog {
            epoch,
            l_tel: l_tel / n,
            l_dgsl: l_dgsl / n,
            total: total / n,
            val_auc,
            test_auc,
        });
        // without a defined validation AUC, fall back to the training loss
        let metric = val_auc.unwrap_or(-total / n);
        if best.as_ref().is_none_or(|(m, ..)| metric > *m) {
            best = Some((metric, epoch, model.params.clone(), test_auc));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    let (_, best_epoch, best_params, test_auc_at_best) =
        best.ok_or_else(|| Error::Config("epochs must be at least 1".into()))?;
    let best_val_auc = epochs[best_epoch].val_auc;
    Ok(TrainOutcome {
        filter_evaluations: state.cache.eval_counter(),
        model,
        best_params,
        epochs,
        best_epoch,
        best_val_auc,
        test_auc_at_best,
    })
}

pub fn write_loss_log(path: &Path, header: &str, epochs: &[EpochLog]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{header}")?;
    writeln!(out, "epoch,l_tel,l_dgsl,total")?;
    for e in epochs {
        writeln!(
            out,
            "{},{:?},{:?},{:?}",
            e.epoch, e.l_tel, e.l_dgsl, e.total
        )?;
    }
    out.flush()?;
    Ok(())
}

/// A model whose parameters are replaced by `params`.
pub fn model_with_params(
    cfg: &TrainConfig,
    num_nodes: usize,
    d_e: usize,
    params: &ParamSet,
) -> Result<Model> {
    let mut model = Model::new(ModelConfig::from_train(cfg, num_nodes, d_e), cfg.seed)?;
    model.params.load_values(params)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Mode;
    use crate::events::{chronological_split, SplitSpec};
    use crate::synth::{generate, SynthConfig};

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 25,
            d_emb: 8,
            d_time: 4,
            neighbors: 4,
            lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    fn data(n: usize) -> (EventStream, EventStream, EventStream) {
        let s = generate(&SynthConfig {
            events: n,
            per_community: 10,
            d_e: 4,
            ..Default::default()
        })
        .unwrap()
        .stream;
        chronological_split(&s, &SplitSpec::default()).unwrap()
    }

    #[test]
    fn smoke_run_is_finite() {
        let (tr, va, te) = data(200);
        let mut cfg = small_cfg();
        cfg.epochs = 1;
        let out = train(&cfg, &tr, &va, Some(&te)).unwrap();
        assert_eq!(out.epochs.len(), 1);
        assert!(out.epochs[0].total.is_finite());
    }

    #[test]
    fn gamma_zero_changes_trajectory_but_still_logs_structure_loss() {
        let (tr, va, _) = data(200);
        let full = train(&small_cfg(), &tr, &va, None).unwrap();
        let mut cfg = small_cfg();
        cfg.mode = Mode::WoDgsl;
        let ablated = train(&cfg, &tr, &va, None).unwrap();
        assert!(ablated.epochs[0].l_dgsl > 0.0);
        assert_eq!(ablated.epochs[0].total, ablated.epochs[0].l_tel);
        let differs = full
            .model
            .params
            .iter()
            .zip(ablated.model.params.iter())
            .any(|((_, a), (_, b))| a.value != b.value);
        assert!(differs);
    }

    #[test]
    fn identical_seeds_reproduce_logs() {
        let (tr, va, _) = data(150);
        let a = train(&small_cfg(), &tr, &va, None).unwrap();
        let b = train(&small_cfg(), &tr, &va, None).unwrap();
        assert_eq!(a.epochs, b.epochs);
    }

    #[test]
    fn cache_evaluations_stay_linear() {
        let (tr, va, _) = data(200);
        let mut cfg = small_cfg();
        cfg.epochs = 1;
        let out = train(&cfg, &tr, &va, None).unwrap();
        // training edges with their negatives, then one evaluation per val edge
        assert!(out.filter_evaluations <= ((1 + cfg.q) * (tr.len() + va.len())) as u64);
        assert!(out.filter_evaluations >= ((1 + cfg.q) * tr.len()) as u64);
    }
}
