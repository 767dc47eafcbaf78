//! Held-out evaluation, weight and embedding exports, and the
//! normal-versus-noisy weight separation report.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Adam, AdamConfig, ParamSet, Tape, Tensor};
use crate::config::{Task, TrainConfig};
use crate::error::{Error, Result};
use crate::events::{EdgeKey, EventStream};
use crate::metrics::{accuracy, histogram, mean, roc_auc};
use crate::model::StreamState;
use crate::nn::Mlp;
use crate::objectives::NegativeSampler;
use crate::perturb::LogEntry;
use crate::train::{model_with_params, records_auc, replay, BatchOptions, EdgeRecord};

/// Replays the whole stream in order with `params` from a fresh state and
/// returns one record per edge.
pub fn run_stream(
    cfg: &TrainConfig,
    params: &ParamSet,
    stream: &EventStream,
    opts: &BatchOptions,
) -> Result<Vec<EdgeRecord>> {
    let mut model = model_with_params(cfg, stream.num_nodes, stream.d_e, params)?;
    let mut state = StreamState::new(stream.num_nodes, cfg.d_emb);
    let sampler = NegativeSampler::new(stream.num_nodes, stream.t_min());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_e7a1);
    replay(
        &mut model,
        &mut state,
        &stream.events,
        cfg,
        opts,
        sampler,
        &mut rng,
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitScores {
    pub train: Option<f64>,
    pub val: Option<f64>,
    pub test: Option<f64>,
}

/// Classification AUC on each chronological slice. Predictions for an event
/// use only the events before it, so replaying the full stream in order does
/// not leak labels.
pub fn evaluate_classification(
    cfg: &TrainConfig,
    params: &ParamSet,
    stream: &EventStream,
) -> Result<SplitScores> {
    let records = run_stream(cfg, params, stream, &BatchOptions::inference(cfg))?;
    let (a, b) = cfg.split.boundaries(stream.len());
    Ok(SplitScores {
        train: records_auc(&records[..a]).ok(),
        val: records_auc(&records[a..b]).ok(),
        test: records_auc(&records[b..]).ok(),
    })
}

/// Test-slice AUC; `UndefinedAuc` when the slice holds a single class.
pub fn test_auc(cfg: &TrainConfig, params: &ParamSet, stream: &EventStream) -> Result<f64> {
    let records = run_stream(cfg, params, stream, &BatchOptions::inference(cfg))?;
    let (_, b) = cfg.split.boundaries(stream.len());
    records_auc(&records[b..])
}

/// Fraction of correct decisions at 0.5 when every positive and every
/// negative score is thresholded.
pub fn pair_accuracy(pos: &[f64], neg: &[f64]) -> f64 {
    let scores: Vec<f64> = pos.iter().chain(neg).copied().collect();
    let labels: Vec<bool> = pos
        .iter()
        .map(|_| true)
        .chain(neg.iter().map(|_| false))
        .collect();
    accuracy(&scores, &labels, 0.5)
}

/// Two-layer logistic scorer over `z_i ‖ z_j`.
pub struct LinkClassifier {
    mlp: Mlp,
    params: ParamSet,
}

impl LinkClassifier {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mlp = Mlp::new(&mut params, "link_probe", &[2 * dim, dim, 1], &mut rng)?;
        Ok(LinkClassifier { mlp, params })
    }

    fn logit(&self, tape: &mut Tape, x: &[f64]) -> Result<crate::autodiff::Var> {
        let v = tape.constant(Tensor::vector(x.to_vec()))?;
        let out = self.mlp.forward(tape, &self.params, v)?;
        tape.sum(out)
    }

    /// Logistic-loss training with Adam on `(input, label)` pairs.
    pub fn fit(
        &mut self,
        data: &[(Vec<f64>, bool)],
        epochs: usize,
        batch: usize,
        lr: f64,
    ) -> Result<()> {
        let mut adam = Adam::new(AdamConfig {
            lr,
            ..AdamConfig::default()
        });
        for _ in 0..epochs {
            for chunk in data.chunks(batch.max(1)) {
                let mut tape = Tape::new();
                let mut sum = tape.scalar(0.0)?;
                for (x, y) in chunk {
                    let l = self.logit(&mut tape, x)?;
                    let signed = if *y { l } else { tape.neg(l)? };
                    let ls = tape.log_sigmoid(signed)?;
                    sum = tape.sub(sum, ls)?;
                }
                let loss = tape.scalar_mul(sum, 1.0 / chunk.len() as f64)?;
                self.params.zero_grad();
                tape.backward(loss, &mut self.params)?;
                adam.step(&mut self.params);
            }
        }
        Ok(())
    }

    pub fn probability(&self, x: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let l = self.logit(&mut tape, x)?;
        Ok(1.0 / (1.0 + (-tape.scalar_value(l)).exp()))
    }
}

fn pair_input(z_i: &[f64], z_j: &[f64]) -> Vec<f64> {
    z_i.iter().chain(z_j).copied().collect()
}

/// Link-prediction accuracy on the test slice. Each test edge is paired with
/// one corrupted edge (same source and time, random destination). With
/// `link_joint` the jointly trained head scores them; otherwise a fresh
/// two-layer classifier is fit on frozen training-slice embeddings.
pub fn evaluate_link_prediction(
    cfg: &TrainConfig,
    params: &ParamSet,
    stream: &EventStream,
) -> Result<f64> {
    let opts = BatchOptions {
        link: true,
        keep_embeddings: !cfg.link_joint,
        ..BatchOptions::inference(cfg)
    };
    let records = run_stream(cfg, params, stream, &opts)?;
    let (a, b) = cfg.split.boundaries(stream.len());
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    if cfg.link_joint {
        let (pos, neg): (Vec<f64>, Vec<f64>) = records[b..]
            .iter()
            .filter_map(|r| r.link)
            .map(|(p, n)| (sigmoid(p), sigmoid(n)))
            .unzip();
        return Ok(pair_accuracy(&pos, &neg));
    }
    let mut data = Vec::with_capacity(2 * a);
    for r in &records[..a] {
        let (Some(zi), Some(zj), Some(zc)) = (&r.z_src, &r.z_dst, &r.z_corrupt) else {
            continue;
        };
        data.push((pair_input(zi, zj), true));
        data.push((pair_input(zi, zc), false));
    }
    let mut probe = LinkClassifier::new(cfg.d_emb, cfg.seed)?;
    probe.fit(&data, cfg.link_epochs, 200, 1e-3)?;
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for r in &records[b..] {
        if let (Some(zi), Some(zj), Some(zc)) = (&r.z_src, &r.z_dst, &r.z_corrupt) {
            pos.push(probe.probability(&pair_input(zi, zj))?);
            neg.push(probe.probability(&pair_input(zi, zc))?);
        }
    }
    Ok(pair_accuracy(&pos, &neg))
}

/// Metric of the configured task on the test slice.
pub fn evaluate(cfg: &TrainConfig, params: &ParamSet, stream: &EventStream) -> Result<f64> {
    match cfg.task {
        Task::Classification => test_auc(cfg, params, stream),
        Task::LinkPrediction => evaluate_link_prediction(cfg, params, stream),
    }
}

/// `(edge, weight)` for every edge, in stream order.
pub fn edge_weights(records: &[EdgeRecord]) -> Vec<(EdgeKey, f64)> {
    records.iter().map(|r| (r.key, r.weight)).collect()
}

/// Perturbation flag per edge key.
fn disturbed_index(log: &[LogEntry]) -> HashMap<EdgeKey, bool> {
    log.iter().map(|e| (e.key(), e.disturbed)).collect()
}

fn join(weights: &[(EdgeKey, f64)], log: &[LogEntry]) -> Result<Vec<(f64, bool)>> {
    let index = disturbed_index(log);
    let mut joined = Vec::with_capacity(weights.len());
    let mut orphans = Vec::new();
    for (k, w) in weights {
        match index.get(k) {
            Some(&d) => joined.push((*w, d)),
            None => orphans.push(*k),
        }
    }
    if !orphans.is_empty() {
        return Err(Error::Join {
            count: orphans.len(),
            first: orphans[0].to_string(),
        });
    }
    Ok(joined)
}

/// Rows `i,j,t,w,is_perturbed`; the last column is empty without a log.
pub fn write_weight_export(
    path: &Path,
    header: &str,
    weights: &[(EdgeKey, f64)],
    log: Option<&[LogEntry]>,
) -> Result<()> {
    let flags = match log {
        Some(l) => Some(join(weights, l)?),
        None => None,
    };
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{header}")?;
    writeln!(out, "i,j,t,w,is_perturbed")?;
    for (k, (key, w)) in weights.iter().enumerate() {
        let flag = flags
            .as_ref()
            .map_or(String::new(), |f| u8::from(f[k].1).to_string());
        writeln!(
            out,
            "{},{},{:?},{:?},{}",
            key.src,
            key.dst,
            key.t(),
            w,
            flag
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_weight_export(path: &Path) -> Result<Vec<(EdgeKey, f64)>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("i,") {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 4 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                line: n + 1,
                msg: format!("expected 5 fields, found {}", f.len()),
            });
        }
        let bad = |field: &str, value: &str| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            field: field.into(),
            value: value.into(),
        };
        let src = f[0].parse().map_err(|_| bad("i", f[0]))?;
        let dst = f[1].parse().map_err(|_| bad("j", f[1]))?;
        let t: f64 = f[2].parse().map_err(|_| bad("t", f[2]))?;
        let w: f64 = f[3].parse().map_err(|_| bad("w", f[3]))?;
        rows.push((EdgeKey::new(src, dst, t), w));
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub normal: usize,
    pub noisy: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeparationReport {
    pub bins: Vec<HistogramBin>,
    pub mean_normal: f64,
    pub mean_noisy: f64,
    pub count_normal: usize,
    pub count_noisy: usize,
    /// AUC of `−w` as a detector of disturbed edges.
    pub auc: Option<f64>,
}

pub const REPORT_BINS: usize = 20;

pub fn weight_separation_report(
    weights: &[(EdgeKey, f64)],
    log: &[LogEntry],
) -> Result<SeparationReport> {
    let joined = join(weights, log)?;
    let normal: Vec<f64> = joined.iter().filter(|(_, d)| !d).map(|(w, _)| *w).collect();
    let noisy: Vec<f64> = joined.iter().filter(|(_, d)| *d).map(|(w, _)| *w).collect();
    let lo = joined.iter().map(|(w, _)| *w).fold(f64::INFINITY, f64::min);
    let hi = joined
        .iter()
        .map(|(w, _)| *w)
        .fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    let hn = histogram(&normal, lo, hi, REPORT_BINS);
    let hd = histogram(&noisy, lo, hi, REPORT_BINS);
    let width = (hi - lo) / REPORT_BINS as f64;
    let bins = (0..REPORT_BINS)
        .map(|k| HistogramBin {
            lo: lo + k as f64 * width,
            hi: if k + 1 == REPORT_BINS {
                hi
            } else {
                lo + (k + 1) as f64 * width
            },
            normal: hn[k],
            noisy: hd[k],
        })
        .collect();
    let scores: Vec<f64> = joined.iter().map(|(w, _)| -w).collect();
    let labels: Vec<bool> = joined.iter().map(|(_, d)| *d).collect();
    Ok(SeparationReport {
        bins,
        mean_normal: mean(&normal),
        mean_noisy: mean(&noisy),
        count_normal: normal.len(),
        count_noisy: noisy.len(),
        auc: roc_auc(&scores, &labels).ok(),
    })
}

pub fn write_histogram(path: &Path, header: &str, report: &SeparationReport) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{header}")?;
    writeln!(out, "bin_lo,bin_hi,count_normal,count_noisy")?;
    for b in &report.bins {
        writeln!(out, "{:?},{:?},{},{}", b.lo, b.hi, b.normal, b.noisy)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_report_summary(path: &Path, header: &str, report: &SeparationReport) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{header}")?;
    writeln!(
        out,
        "count_normal,count_noisy,mean_w_normal,mean_w_noisy,noisy_auc"
    )?;
    let auc = report.auc.map_or(String::new(), |a| format!("{a:?}"));
    writeln!(
        out,
        "{},{},{:?},{:?},{}",
        report.count_normal, report.count_noisy, report.mean_normal, report.mean_noisy, auc
    )?;
    out.flush()?;
    Ok(())
}

/// Rows `node,t,z_1..z_d`, one for each endpoint of each edge.
pub fn write_embeddings(path: &Path, header: &str, records: &[EdgeRecord]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{header}")?;
    let d = records
        .iter()
        .find_map(|r| r.z_src.as_ref().map(Vec::len))
        .unwrap_or(0);
    let cols: Vec<String> = (1..=d).map(|k| format!("z_{k}")).collect();
    writeln!(out, "node,t,{}", cols.join(","))?;
    for r in records {
        for (node, z) in [(r.key.src, &r.z_src), (r.key.dst, &r.z_dst)] {
            if let Some(z) = z {
                let vals: Vec<String> = z.iter().map(|v| format!("{v:?}")).collect();
                writeln!(out, "{node},{:?},{}", r.key.t(), vals.join(","))?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Rows `i,j,t,base,self_i_term,self_j_term,beta,score`.
pub fn write_noise_dump(path: &Path, header: &str, records: &[EdgeRecord]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{header}")?;
    writeln!(out, "i,j,t,base,self_i_term,self_j_term,beta,score")?;
    for r in records {
        if let Some(n) = r.noise {
            writeln!(
                out,
                "{},{},{:?},{:?},{:?},{:?},{:?},{:?}",
                r.key.src,
                r.key.dst,
                r.key.t(),
                n.base,
                n.self_i_term,
                n.self_j_term,
                n.beta_ij,
                n.value
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(src: usize, dst: usize, t: f64, disturbed: bool) -> LogEntry {
        LogEntry {
            src,
            dst,
            t_original: Some(t),
            t_new: t,
            disturbed,
            detail: String::new(),
        }
    }

    #[test]
    fn perfect_separation() {
        let log: Vec<LogEntry> = (0..10)
            .map(|k| entry(k, k + 1, k as f64, k % 2 == 0))
            .collect();
        let weights: Vec<(EdgeKey, f64)> = log
            .iter()
            .map(|e| (e.key(), if e.disturbed { 0.0 } else { 1.0 }))
            .collect();
        let r = weight_separation_report(&weights, &log).unwrap();
        assert_eq!(r.auc, Some(1.0));
        assert_eq!((r.mean_normal, r.mean_noisy), (1.0, 0.0));
        assert_eq!(r.bins.len(), REPORT_BINS);
        assert_eq!(r.bins[0].noisy, 5);
        assert_eq!(r.bins[REPORT_BINS - 1].normal, 5);
    }

    #[test]
    fn identical_distributions_are_near_half() {
        let log: Vec<LogEntry> = (0..2000)
            .map(|k| entry(k, k + 1, k as f64, k % 2 == 0))
            .collect();
        let weights: Vec<(EdgeKey, f64)> = log
            .iter()
            .map(|e| (e.key(), ((e.src / 2) % 17) as f64))
            .collect();
        let r = weight_separation_report(&weights, &log).unwrap();
        assert!((r.auc.unwrap() - 0.5).abs() < 0.05);
    }

    #[test]
    fn orphan_edges_fail_the_join() {
        let log = vec![entry(0, 1, 0.0, false)];
        let weights = vec![
            (EdgeKey::new(0, 1, 0.0), 1.0),
            (EdgeKey::new(2, 3, 1.0), 0.5),
        ];
        match weight_separation_report(&weights, &log) {
            Err(Error::Join { count, first }) => {
                assert_eq!(count, 1);
                assert!(first.contains('2'));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn weight_export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        let log = vec![entry(0, 1, 0.5, false), entry(3, 1, 2.25, true)];
        let weights = vec![(log[0].key(), 0.75), (log[1].key(), 0.125)];
        write_weight_export(&path, "# h", &weights, Some(&log)).unwrap();
        assert_eq!(read_weight_export(&path).unwrap(), weights);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().nth(3).unwrap().ends_with(",1"));
    }

    #[test]
    fn oracle_and_constant_link_scorers() {
        assert_eq!(pair_accuracy(&[1.0, 0.9], &[0.0, 0.1]), 1.0);
        assert_eq!(pair_accuracy(&[0.7, 0.7], &[0.7, 0.7]), 0.5);
    }
}
