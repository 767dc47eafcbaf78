use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use tgraph_denoise::autodiff::checkpoint;
use tgraph_denoise::config::{artifact_header, text_hash, Mode, Task, TrainConfig};
use tgraph_denoise::eval::{
    edge_weights, evaluate_classification, evaluate_link_prediction, read_weight_export,
    run_stream, weight_separation_report, write_embeddings, write_histogram, write_noise_dump,
    write_report_summary, write_weight_export,
};
use tgraph_denoise::events::{
    chronological_split, ingest_csv, read_stream, write_stream, DatasetFormat,
};
use tgraph_denoise::gradcheck;
use tgraph_denoise::perturb::{
    check_consistency, perturb, read_log_entries, timestamp_std, write_log, Method,
};
use tgraph_denoise::sweep::{run_sweep, write_sweep, SweepGrid};
use tgraph_denoise::synth::{generate, SynthConfig};
use tgraph_denoise::train::{train, write_loss_log, BatchOptions};
use tgraph_denoise::{Error, Result};

/// Relative output paths are placed under this directory when it is set.
const OUT_DIR_VAR: &str = "TGD_OUT_DIR";

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_MISSING: u8 = 3;
const EXIT_DIVERGED: u8 = 4;
const EXIT_CHECK_FAILED: u8 = 5;

#[derive(Parser)]
#[command(
    name = "tgd",
    version,
    about = "Denoising representation learning on temporal interaction graphs"
)]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Read a raw interaction CSV into a dataset directory.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        /// generic or bipartite (wikipedia, reddit, mooc).
        #[arg(long, default_value = "generic")]
        format: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic community corpus.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        events: usize,
        #[arg(long, default_value_t = 2)]
        communities: usize,
        #[arg(long, default_value_t = 50)]
        per_community: usize,
        #[arg(long, default_value_t = 16)]
        d_e: usize,
        #[arg(long, default_value_t = 0.5)]
        feature_noise: f64,
        #[arg(long, default_value_t = 0.05)]
        label_flip: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Inject noise into a stream and log every change.
    Perturb {
        #[arg(long)]
        input: PathBuf,
        /// original, time, feature or structure.
        #[arg(long)]
        method: String,
        #[arg(long)]
        p: f64,
        /// Time-shift scale; defaults to the stream's timestamp std.
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the chronological train slice, selecting on the val slice.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trained run on its dataset.
    Eval {
        /// Directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report CSV; defaults to `<run>/eval.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay a stream with a trained run and write every edge's weight.
    ExportWeights {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Perturbation log used to fill the `is_perturbed` column.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-edge embeddings here.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Also write per-edge noise score parts here.
        #[arg(long)]
        noise: Option<PathBuf>,
        /// Use the end-of-training parameters instead of the selected epoch.
        #[arg(long)]
        last: bool,
    },
    /// Normal-versus-noisy weight statistics and a histogram.
    Report {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference audit of every gradient.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = gradcheck::DEFAULT_SEEDS)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid of perturbation rates, modes and seeds.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "structure")]
        method: String,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5")]
        rates: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "full")]
        modes: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn out_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_VAR) {
        Some(dir) if p.is_relative() => Path::new(&dir).join(p),
        _ => p.to_path_buf(),
    }
}

fn require(p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::Io(io::Error::new(
            io::ErrorKind::NotFound,
            format!("{}: no such file", p.display()),
        )))
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p)?;
    Ok(())
}

fn file_sha256(p: &Path) -> Result<String> {
    let bytes = fs::read(p)?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn load_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            require(p)?;
            TrainConfig::from_file(p)?
        }
        None => TrainConfig::default(),
    };
    cfg.apply_overrides(&args.overrides)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

struct Run {
    cfg: TrainConfig,
    params: tgraph_denoise::autodiff::ParamSet,
}

fn load_run(dir: &Path) -> Result<Run> {
    load_checkpoint(dir, "checkpoint.ckpt")
}

fn load_checkpoint(dir: &Path, file: &str) -> Result<Run> {
    let (cfg_path, ckpt_path) = (dir.join("config.cfg"), dir.join(file));
    require(&cfg_path)?;
    require(&ckpt_path)?;
    let cfg = TrainConfig::from_file(&cfg_path)?;
    let (header, params) = checkpoint::load(&ckpt_path)?;
    let expected = format!("config={}", cfg.hash());
    if !header.split_whitespace().any(|tok| tok == expected) {
        return Err(Error::Config(format!(
            "{} was not produced with {}",
            ckpt_path.display(),
            cfg_path.display()
        )));
    }
    Ok(Run { cfg, params })
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Ingest { input, format, out } => {
            require(&input)?;
            let format: DatasetFormat = format.parse()?;
            let stream = ingest_csv(&input, format)?;
            let dir = out_path(&out);
            create_dir(&dir)?;
            let hash = text_hash(&format!(
                "input={}\nformat={format}\n",
                file_sha256(&input)?
            ));
            let path = dir.join("events.csv");
            write_stream(&path, &artifact_header("ingest", &hash, 0), &stream)?;
            println!(
                "{}: {} events, {} nodes, {} features",
                path.display(),
                stream.len(),
                stream.num_nodes,
                stream.d_e
            );
        }
        Command::Synth {
            seed,
            events,
            communities,
            per_community,
            d_e,
            feature_noise,
            label_flip,
            out,
        } => {
            let sc = SynthConfig {
                communities,
                per_community,
                events,
                d_e,
                feature_noise,
                label_flip,
                seed,
                ..Default::default()
            };
            let data = generate(&sc)?;
            let dir = out_path(&out);
            create_dir(&dir)?;
            let header = artifact_header("synth", &text_hash(&format!("{sc:?}")), seed);
            let path = dir.join("events.csv");
            write_stream(&path, &header, &data.stream)?;
            let mut c = io::BufWriter::new(fs::File::create(dir.join("communities.csv"))?);
            writeln!(c, "{header}\nnode,community")?;
            for (v, k) in data.community.iter().enumerate() {
                writeln!(c, "{v},{k}")?;
            }
            c.flush()?;
            println!(
                "{}: {} events, {} nodes",
                path.display(),
                data.stream.len(),
                data.stream.num_nodes
            );
        }
        Command::Perturb {
            input,
            method,
            p,
            sigma,
            seed,
            out,
        } => {
            let method: Method = method.parse()?;
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("p must lie in [0, 1], got {p}")));
            }
            require(&input)?;
            let stream = read_stream(&input)?;
            let sigma = sigma.unwrap_or_else(|| timestamp_std(&stream));
            let (perturbed, log) = perturb(&stream, method, p, sigma, seed)?;
            check_consistency(&stream, &perturbed, &log)?;
            let dir = out_path(&out);
            create_dir(&dir)?;
            let hash = text_hash(&format!(
                "input={}\nmethod={method}\np={p}\nsigma={sigma}\n",
                file_sha256(&input)?
            ));
            let header = artifact_header("perturb", &hash, seed);
            let (events, log_path) = (dir.join("events.csv"), dir.join("perturbation_log.csv"));
            write_stream(&events, &header, &perturbed)?;
            write_log(&log_path, &header, &log)?;
            println!(
                "{} disturbed of {} events",
                log.disturbed_count(),
                perturbed.len()
            );
            for f in [&events, &log_path] {
                println!("{}  {}", file_sha256(f)?, f.display());
            }
        }
        Command::Train { data, cfg, out } => {
            require(&data)?;
            let cfg = load_config(&cfg)?;
            let stream = read_stream(&data)?;
            let (tr, va, te) = chronological_split(&stream, &cfg.split)?;
            let dir = out_path(&out);
            create_dir(&dir)?;
            let header = artifact_header("train", &cfg.hash(), cfg.seed);
            fs::write(
                dir.join("config.cfg"),
                format!("{header}\n{}", cfg.to_text()),
            )?;
            let outcome = match train(&cfg, &tr, &va, Some(&te)) {
                Ok(o) => o,
                Err(e @ Error::Divergence { .. }) => {
                    fs::write(
                        dir.join("divergence.txt"),
                        format!("{header}\n{e}\n\n{}", cfg.to_text()),
                    )?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            checkpoint::save(&dir.join("checkpoint.ckpt"), &header, &outcome.best_params)?;
            checkpoint::save(&dir.join("last.ckpt"), &header, &outcome.model.params)?;
            write_loss_log(&dir.join("losses.csv"), &header, &outcome.epochs)?;
            let fmt = |a: Option<f64>| a.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            println!(
                "best epoch {} of {}: val auc {}, test auc {}, filter evaluations {}",
                outcome.best_epoch,
                outcome.epochs.len(),
                fmt(outcome.best_val_auc),
                fmt(outcome.test_auc_at_best),
                outcome.filter_evaluations
            );
        }
        Command::Eval { run, data, out } => {
            require(&data)?;
            let Run { cfg, params } = load_run(&run)?;
            let stream = read_stream(&data)?;
            let out = out.map_or_else(|| run.join("eval.csv"), |p| out_path(&p));
            let mut rows: Vec<(&str, &str, Option<f64>)> = Vec::new();
            match cfg.task {
                Task::Classification => {
                    let s = evaluate_classification(&cfg, &params, &stream)?;
                    rows.push(("train", "auc", s.train));
                    rows.push(("val", "auc", s.val));
                    rows.push(("test", "auc", s.test));
                }
                Task::LinkPrediction => {
                    rows.push((
                        "test",
                        "accuracy",
                        Some(evaluate_link_prediction(&cfg, &params, &stream)?),
                    ));
                }
            }
            let mut f = io::BufWriter::new(fs::File::create(&out)?);
            writeln!(f, "{}", artifact_header("eval", &cfg.hash(), cfg.seed))?;
            writeln!(f, "mode,task,split,metric,value")?;
            for (split, metric, v) in &rows {
                let v = v.map_or(String::new(), |x| format!("{x:.6}"));
                writeln!(f, "{},{},{split},{metric},{v}", cfg.mode, cfg.task)?;
                println!("{split} {metric} {v}");
            }
            f.flush()?;
        }
        Command::ExportWeights {
            run,
            data,
            log,
            out,
            embeddings,
            noise,
            last,
        } => {
            require(&data)?;
            if let Some(l) = &log {
                require(l)?;
            }
            let Run { cfg, params } =
                load_checkpoint(&run, if last { "last.ckpt" } else { "checkpoint.ckpt" })?;
            let stream = read_stream(&data)?;
            let opts = BatchOptions {
                structure: noise.is_some(),
                keep_noise: noise.is_some(),
                keep_embeddings: embeddings.is_some(),
                ..BatchOptions::inference(&cfg)
            };
            let records = run_stream(&cfg, &params, &stream, &opts)?;
            let entries = log.as_deref().map(read_log_entries).transpose()?;
            let header = artifact_header("export-weights", &cfg.hash(), cfg.seed);
            let out = out_path(&out);
            write_weight_export(&out, &header, &edge_weights(&records), entries.as_deref())?;
            if let Some(p) = embeddings {
                write_embeddings(&out_path(&p), &header, &records)?;
            }
            if let Some(p) = noise {
                write_noise_dump(&out_path(&p), &header, &records)?;
            }
            println!("{}: {} edges", out.display(), records.len());
        }
        Command::Report { weights, log, out } => {
            require(&weights)?;
            require(&log)?;
            let w = read_weight_export(&weights)?;
            let entries = read_log_entries(&log)?;
            let report = weight_separation_report(&w, &entries)?;
            let dir = out_path(&out);
            create_dir(&dir)?;
            let hash = text_hash(&format!(
                "weights={}\nlog={}\n",
                file_sha256(&weights)?,
                file_sha256(&log)?
            ));
            let header = artifact_header("report", &hash, 0);
            write_report_summary(&dir.join("report.csv"), &header, &report)?;
            write_histogram(&dir.join("histogram.csv"), &header, &report)?;
            let auc = report.auc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
            println!(
                "normal {} mean w {:.4}; noisy {} mean w {:.4}; noisy-edge auc {auc}",
                report.count_normal, report.mean_normal, report.count_noisy, report.mean_noisy
            );
        }
        Command::GradCheck { seed, seeds, out } => {
            if seeds == 0 {
                return Err(Error::Config("seeds must be at least 1".into()));
            }
            let outcomes = gradcheck::run_all(seed, seeds)?;
            let table = gradcheck::format_table(&outcomes);
            print!("{table}");
            if let Some(p) = out {
                let hash = text_hash(&format!("seeds={seeds}\nstep={}\n", gradcheck::STEP));
                fs::write(
                    out_path(&p),
                    format!("{}\n{table}", artifact_header("grad-check", &hash, seed)),
                )?;
            }
            if outcomes.iter().any(|o| !o.passed) {
                return Ok(EXIT_CHECK_FAILED);
            }
        }
        Command::Sweep {
            data,
            cfg,
            method,
            rates,
            modes,
            seeds,
            jobs,
            out,
        } => {
            require(&data)?;
            let base = load_config(&cfg)?;
            let modes = modes
                .iter()
                .map(|m| m.parse())
                .collect::<Result<Vec<Mode>>>()?;
            let grid = SweepGrid {
                base,
                modes,
                method: method.parse()?,
                rates,
                seeds,
                sigma: None,
            };
            let stream = read_stream(&data)?;
            let rows = run_sweep(&grid, &stream, jobs)?;
            let hash = text_hash(&format!(
                "{}rates={:?}\nseeds={:?}\n",
                grid.base.to_text(),
                grid.rates,
                grid.seeds
            ));
            let out = out_path(&out);
            write_sweep(
                &out,
                &artifact_header("sweep", &hash, grid.base.seed),
                &rows,
            )?;
            for r in &rows {
                println!(
                    "{} {} p={} {:.4} ± {:.4}",
                    r.mode, r.method, r.p, r.metric_mean, r.metric_std
                );
            }
        }
    }
    Ok(0)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(io) if io.kind() == io::ErrorKind::NotFound => EXIT_MISSING,
        Error::Divergence { .. } | Error::NonFinite(_) => EXIT_DIVERGED,
        Error::Config(_) | Error::Split(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose {
        log::LevelFilter::Info
    } else {
        log::LevelFilter::Warn
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
