//! Acceptance run. Every criterion prints one `PASS`/`FAIL` line; the test
//! fails if any gating criterion fails. Lines go straight to the stderr handle
//! so they show up without `--nocapture`. `TGD_ACCEPTANCE=4,6` runs a subset.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tgraph_denoise::autodiff::{Adam, AdamConfig};
use tgraph_denoise::config::{Mode, TrainConfig};
use tgraph_denoise::eval::{edge_weights, run_stream, weight_separation_report};
use tgraph_denoise::events::{
    batches, chronological_split, ingest_csv, DatasetFormat, EventStream,
};
use tgraph_denoise::gradcheck;
use tgraph_denoise::model::{Model, ModelConfig, StreamState};
use tgraph_denoise::objectives::NegativeSampler;
use tgraph_denoise::perturb::{perturb, Method};
use tgraph_denoise::synth::{generate, SynthConfig};
use tgraph_denoise::train::{process_batch, train, BatchContext, BatchOptions};

const SEEDS: [u64; 3] = [0, 1, 2];

fn line(text: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{text}");
}

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

/// Desk-scale configuration used by the training criteria.
fn desk_cfg(seed: u64, mode: Mode) -> TrainConfig {
    TrainConfig {
        d_emb: 32,
        d_time: 16,
        lr: 1e-3,
        batch_size: 100,
        epochs: 10,
        epsilon: 5.0,
        seed,
        mode,
        ..TrainConfig::default()
    }
}

fn corpus(seed: u64) -> EventStream {
    generate(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
    .stream
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let rows = gradcheck::run_all(7, gradcheck::DEFAULT_SEEDS).unwrap();
    let elapsed = start.elapsed();
    let worst = rows
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    outcome(
        failed.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "{} checks x {} seeds, worst {} at {:.2e}, failed {:?}, {:.1}s",
            rows.len(),
            gradcheck::DEFAULT_SEEDS,
            worst.name,
            worst.max_rel_error,
            failed,
            elapsed.as_secs_f64()
        ),
    )
}

fn oracle() -> Outcome {
    let mut worst = (0.0_f64, 0.0_f64, 0.0_f64);
    for seed in 0..5 {
        let (s, w, z) = common::max_oracle_deviation(seed);
        worst = (worst.0.max(s), worst.1.max(w), worst.2.max(z));
    }
    outcome(
        worst.0 < 1e-9 && worst.1 < 1e-9 && worst.2 < 1e-9,
        format!(
            "max deviation score {:.1e} weight {:.1e} embedding {:.1e}",
            worst.0, worst.1, worst.2
        ),
    )
}

fn attention() -> Outcome {
    let failures: Vec<(u64, String)> = (0..10_000u64)
        .filter_map(|seed| common::attention_case(seed).err().map(|e| (seed, e)))
        .collect();
    outcome(
        failures.is_empty(),
        format!(
            "10000 instances, {} violations {:?}",
            failures.len(),
            failures.first()
        ),
    )
}

/// One training epoch over `stream`; returns filter evaluations and wall time.
fn one_epoch(stream: &EventStream, cfg: &TrainConfig) -> (u64, Duration) {
    let mut model = Model::new(
        ModelConfig::from_train(cfg, stream.num_nodes, stream.d_e),
        cfg.seed,
    )
    .unwrap();
    let mut state = StreamState::new(stream.num_nodes, cfg.d_emb);
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let opts = BatchOptions::training(cfg);
    let sampler = NegativeSampler::new(stream.num_nodes, stream.t_min());
    let start = Instant::now();
    for batch in batches(&stream.events, cfg.batch_size) {
        let mut ctx = BatchContext {
            sampler,
            rng: &mut rng,
            optimizer: Some(&mut adam),
        };
        process_batch(&mut model, &mut state, batch, &opts, &mut ctx).unwrap();
    }
    (state.cache.eval_counter(), start.elapsed())
}

fn complexity() -> Outcome {
    let cfg = desk_cfg(0, Mode::Full);
    let sizes = [5_000, 10_000, 20_000];
    let streams: Vec<EventStream> = sizes
        .iter()
        .map(|&n| {
            generate(&SynthConfig {
                events: n,
                t_max: n as f64 / 2.0,
                ..SynthConfig::default()
            })
            .unwrap()
            .stream
        })
        .collect();
    // rounds cycle through all sizes, so a slow spell on the machine hits
    // every size instead of skewing one; the best round per size is kept
    let mut best = [Duration::MAX; 3];
    let mut evals_10k = 0;
    for _ in 0..3 {
        for (k, stream) in streams.iter().enumerate() {
            let (evals, took) = one_epoch(stream, &cfg);
            if sizes[k] == 10_000 {
                evals_10k = evals;
            }
            best[k] = best[k].min(took);
        }
    }
    let per_edge: Vec<f64> = best
        .iter()
        .zip(&sizes)
        .map(|(d, &n)| d.as_secs_f64() / n as f64)
        .collect();
    let bound = ((1 + cfg.q) * 10_000) as u64;
    let reference = per_edge[1];
    let ratios: Vec<f64> = per_edge.iter().map(|p| p / reference).collect();
    let linear = ratios.iter().all(|r| (0.8..=1.2).contains(r));
    outcome(
        evals_10k <= bound && linear,
        format!(
            "filter evaluations {evals_10k} <= {bound}; per-edge time relative to 10k: {:.3} {:.3} {:.3}",
            ratios[0], ratios[1], ratios[2]
        ),
    )
}

fn separation() -> Outcome {
    let mut passed = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let start = Instant::now();
        let cfg = desk_cfg(seed, Mode::Full);
        let (noisy, log) = perturb(&corpus(seed), Method::Structure, 0.4, 1.0, seed).unwrap();
        let (tr, va, te) = chronological_split(&noisy, &cfg.split).unwrap();
        let out = train(&cfg, &tr, &va, Some(&te)).unwrap();
        // weights of the trained filter; the checkpoint picked by classification
        // AUC is usually from the first epochs, before the filter has learned
        let records = run_stream(
            &cfg,
            &out.model.params,
            &noisy,
            &BatchOptions::inference(&cfg),
        )
        .unwrap();
        let report = weight_separation_report(&edge_weights(&records), &log.entries).unwrap();
        let auc = report.auc.unwrap_or(f64::NAN);
        let elapsed = start.elapsed();
        passed &= report.mean_normal > report.mean_noisy
            && auc > 0.70
            && elapsed < Duration::from_secs(900);
        parts.push(format!(
            "seed {seed}: w normal {:.4} noisy {:.4} auc {auc:.4} ({:.0}s)",
            report.mean_normal,
            report.mean_noisy,
            elapsed.as_secs_f64()
        ));
    }
    outcome(passed, parts.join("; "))
}

fn auc_drop(seed: u64, mode: Mode) -> f64 {
    let data = corpus(seed);
    let cfg = desk_cfg(seed, mode);
    let mut aucs = Vec::new();
    for p in [0.0, 0.4] {
        let (s, _) = perturb(&data, Method::Structure, p, 1.0, seed).unwrap();
        let (tr, va, te) = chronological_split(&s, &cfg.split).unwrap();
        aucs.push(
            train(&cfg, &tr, &va, Some(&te))
                .unwrap()
                .test_auc_at_best
                .unwrap(),
        );
    }
    aucs[0] - aucs[1]
}

fn robustness() -> Outcome {
    let (mut beats_plain, mut beats_static) = (0, 0);
    let mut parts = Vec::new();
    for seed in SEEDS {
        let full = auc_drop(seed, Mode::Full);
        let plain = auc_drop(seed, Mode::WoDgsl);
        let stat = auc_drop(seed, Mode::StaticSim);
        beats_plain += usize::from(full < plain);
        beats_static += usize::from(full < stat);
        parts.push(format!(
            "seed {seed}: full {full:.4} wo_dgsl {plain:.4} static_sim {stat:.4}"
        ));
    }
    outcome(
        beats_plain == 3 && beats_static >= 2,
        format!(
            "drop(full) < drop(wo_dgsl) in {beats_plain}/3, < drop(static_sim) in {beats_static}/3; {}",
            parts.join("; ")
        ),
    )
}

fn loss_discipline() -> Outcome {
    let mut passed = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let cfg = TrainConfig {
            epochs: 5,
            seed,
            ..TrainConfig::default()
        };
        let (tr, va, _) = chronological_split(&corpus(seed), &cfg.split).unwrap();
        let out = train(&cfg, &tr, &va, None).unwrap();
        let totals: Vec<f64> = out.epochs.iter().map(|e| e.total).collect();
        passed &= totals.len() == 5 && totals.windows(2).all(|w| w[1] < w[0]);
        parts.push(format!(
            "seed {seed}: {}",
            totals
                .iter()
                .map(|t| format!("{t:.5}"))
                .collect::<Vec<_>>()
                .join(" > ")
        ));
    }
    outcome(passed, parts.join("; "))
}

/// Permutes who interacts after the cut while keeping every timestamp.
fn shuffle_after(s: &EventStream, cut: usize, seed: u64) -> EventStream {
    let mut events = s.events.clone();
    let mut tail: Vec<_> = events[cut..]
        .iter()
        .map(|e| (e.src, e.dst, e.features.clone(), e.label))
        .collect();
    tail.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for (e, (src, dst, features, label)) in events[cut..].iter_mut().zip(tail) {
        (e.src, e.dst, e.features, e.label) = (src, dst, features, label);
    }
    s.with_events(events)
}

fn determinism_and_causality() -> Outcome {
    let data = generate(&SynthConfig {
        events: 600,
        ..SynthConfig::default()
    })
    .unwrap()
    .stream;
    let mut cfg = desk_cfg(3, Mode::Full);
    cfg.epochs = 3;
    cfg.layers = 2;
    let (tr, va, _) = chronological_split(&data, &cfg.split).unwrap();
    let a = train(&cfg, &tr, &va, None).unwrap();
    let b = train(&cfg, &tr, &va, None).unwrap();
    let bits = |o: &tgraph_denoise::train::TrainOutcome| -> Vec<[u64; 3]> {
        o.epochs
            .iter()
            .map(|e| [e.l_tel.to_bits(), e.l_dgsl.to_bits(), e.total.to_bits()])
            .collect()
    };
    let deterministic = bits(&a) == bits(&b);

    let mut opts = BatchOptions::inference(&cfg);
    opts.keep_embeddings = true;
    let before = run_stream(&cfg, &a.best_params, &data, &opts).unwrap();
    let mut causal = true;
    let mut checked = 0;
    for cut in [137, 250, 401, 555] {
        // cut strictly after the last event at the query time
        let t = data.events[cut - 1].t;
        let cut = data.events.iter().position(|e| e.t > t).unwrap();
        let after = run_stream(
            &cfg,
            &a.best_params,
            &shuffle_after(&data, cut, cut as u64),
            &opts,
        )
        .unwrap();
        for (x, y) in before[..cut].iter().zip(&after[..cut]) {
            let same = |p: &Option<Vec<f64>>, q: &Option<Vec<f64>>| {
                p.as_ref().unwrap().iter().map(|v| v.to_bits()).eq(q
                    .as_ref()
                    .unwrap()
                    .iter()
                    .map(|v| v.to_bits()))
            };
            causal &= same(&x.z_src, &y.z_src) && same(&x.z_dst, &y.z_dst);
            checked += 1;
        }
    }
    outcome(
        deterministic && causal,
        format!("loss logs bit-identical: {deterministic}; embeddings before cut bit-identical over {checked} edges: {causal}"),
    )
}

/// Optional: set `TGD_WIKIPEDIA_CSV` to the public interaction file.
fn real_data() -> Option<Outcome> {
    let path = std::env::var_os("TGD_WIKIPEDIA_CSV")?;
    let stream = ingest_csv(path.as_ref(), DatasetFormat::Bipartite).unwrap();
    let cfg = desk_cfg(0, Mode::Full);
    let (tr, va, te) = chronological_split(&stream, &cfg.split).unwrap();
    let out = train(&cfg, &tr, &va, Some(&te)).unwrap();
    let auc = out
        .epochs
        .iter()
        .filter_map(|e| e.val_auc)
        .fold(f64::NAN, f64::max);
    Some(outcome(
        auc > 0.75,
        format!("best val auc {auc:.4} over {} epochs", out.epochs.len()),
    ))
}

#[test]
fn acceptance_criteria() {
    let criteria: [(u32, &str, fn() -> Outcome); 8] = [
        (1, "gradient correctness", gradients),
        (2, "oracle equivalence", oracle),
        (3, "attention invariants", attention),
        (4, "complexity accounting", complexity),
        (5, "denoising separation", separation),
        (6, "robustness trend", robustness),
        (7, "loss discipline", loss_discipline),
        (8, "determinism and causality", determinism_and_causality),
    ];
    let only: Option<Vec<u32>> = std::env::var("TGD_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let o = run();
        line(&format!(
            "criterion {id} {name}: {} | {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        ));
        if !o.passed {
            failed.push(id);
        }
    }
    match real_data() {
        Some(o) => line(&format!(
            "criterion 9 real-data pathway (non-gating): {} | {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        )),
        None => {
            line("criterion 9 real-data pathway (non-gating): SKIP | TGD_WIKIPEDIA_CSV not set")
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
