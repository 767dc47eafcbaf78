//! Seeded noise injection into event streams, with a per-edge ground-truth
//! log of what was disturbed.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};

use crate::error::{Error, Result};
use crate::events::{EdgeKey, EventStream, TemporalEvent};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Original,
    Time,
    Feature,
    Structure,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Method::Original),
            "time" => Ok(Method::Time),
            "feature" => Ok(Method::Feature),
            "structure" => Ok(Method::Structure),
            other => Err(Error::Config(format!(
                "unknown perturbation method {other:?}"
            ))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Original => "original",
            Method::Time => "time",
            Method::Feature => "feature",
            Method::Structure => "structure",
        })
    }
}

/// One output edge. `t_original` is `None` for injected edges.
#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub src: usize,
    pub dst: usize,
    pub t_original: Option<f64>,
    pub t_new: f64,
    pub disturbed: bool,
    pub detail: String,
}

impl LogEntry {
    pub fn key(&self) -> EdgeKey {
        EdgeKey::new(self.src, self.dst, self.t_new)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationLog {
    pub method: Method,
    pub p: f64,
    pub seed: u64,
    /// Entries in output-stream order.
    pub entries: Vec<LogEntry>,
    /// Original edges dropped by the structure method.
    pub removed: Vec<EdgeKey>,
}

impl PerturbationLog {
    pub fn disturbed_count(&self) -> usize {
        self.entries.iter().filter(|e| e.disturbed).count()
    }
}

fn check_rate(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Contract(format!(
            "perturbation rate must lie in [0, 1], got {p}"
        )));
    }
    Ok(())
}

fn clean_entry(e: &TemporalEvent) -> LogEntry {
    LogEntry {
        src: e.src,
        dst: e.dst,
        t_original: Some(e.t),
        t_new: e.t,
        disturbed: false,
        detail: String::new(),
    }
}

fn sort_pairs(mut pairs: Vec<(TemporalEvent, LogEntry)>) -> (Vec<TemporalEvent>, Vec<LogEntry>) {
    pairs.sort_by(|a, b| a.0.t.total_cmp(&b.0.t));
    pairs.into_iter().unzip()
}

pub fn identity(s: &EventStream, seed: u64) -> (EventStream, PerturbationLog) {
    let log = PerturbationLog {
        method: Method::Original,
        p: 0.0,
        seed,
        entries: s.events.iter().map(clean_entry).collect(),
        removed: Vec::new(),
    };
    (s.clone(), log)
}

/// Population standard deviation of the timestamps.
pub fn timestamp_std(s: &EventStream) -> f64 {
    let n = s.len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let mean = s.events.iter().map(|e| e.t).sum::<f64>() / n;
    (s.events.iter().map(|e| (e.t - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Adds `N(0, (σ·std_t)²)` to the timestamp of each edge selected with
/// probability `p`, clamping at zero, then re-sorts.
pub fn disturb_time(
    s: &EventStream,
    p: f64,
    sigma: f64,
    seed: u64,
) -> Result<(EventStream, PerturbationLog)> {
    check_rate(p)?;
    if sigma <= 0.0 {
        return Err(Error::Contract(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = sigma * timestamp_std(s);
    let noise = Normal::new(0.0, scale).map_err(|e| Error::Contract(e.to_string()))?;
    let pairs = s
        .events
        .iter()
        .map(|e| {
            let mut entry = clean_entry(e);
            let mut ev = e.clone();
            if rng.gen_bool(p) {
                ev.t = (e.t + noise.sample(&mut rng)).max(0.0);
                entry.t_new = ev.t;
                entry.disturbed = true;
                entry.detail = "time".into();
            }
            (ev, entry)
        })
        .collect();
    let (events, entries) = sort_pairs(pairs);
    let log = PerturbationLog {
        method: Method::Time,
        p,
        seed,
        entries,
        removed: Vec::new(),
    };
    Ok((s.with_events(events), log))
}

/// Selects each edge with probability `p`; each feature of a selected edge
/// is then zeroed with probability `p`.
pub fn disturb_feature(
    s: &EventStream,
    p: f64,
    seed: u64,
) -> Result<(EventStream, PerturbationLog)> {
    check_rate(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = Vec::with_capacity(s.len());
    let mut entries = Vec::with_capacity(s.len());
    for e in &s.events {
        let mut entry = clean_entry(e);
        let mut ev = e.clone();
        if rng.gen_bool(p) {
            let zeroed: Vec<String> = ev
                .features
                .iter_mut()
                .enumerate()
                .filter_map(|(k, f)| {
                    rng.gen_bool(p).then(|| {
                        *f = 0.0;
                        k.to_string()
                    })
                })
                .collect();
            entry.disturbed = true;
            entry.detail = format!("zeroed={}", zeroed.join(";"));
        }
        events.push(ev);
        entries.push(entry);
    }
    let log = PerturbationLog {
        method: Method::Feature,
        p,
        seed,
        entries,
        removed: Vec::new(),
    };
    Ok((s.with_events(events), log))
}

/// Drops each edge with probability `p` and injects `Binomial(N, p)` fake
/// edges with uniform endpoints and times and features copied from random
/// real edges. Fake edges are unlabeled.
pub fn disturb_structure(
    s: &EventStream,
    p: f64,
    seed: u64,
) -> Result<(EventStream, PerturbationLog)> {
    check_rate(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(s.len());
    let mut removed = Vec::new();
    for e in &s.events {
        if rng.gen_bool(p) {
            removed.push(e.key());
        } else {
            pairs.push((e.clone(), clean_entry(e)));
        }
    }
    let added = if s.is_empty() || p == 0.0 {
        0
    } else {
        Binomial::new(s.len() as u64, p)
            .map_err(|e| Error::Contract(e.to_string()))?
            .sample(&mut rng) as usize
    };
    let (lo, hi) = (s.t_min(), s.t_max());
    for _ in 0..added {
        let src = rng.gen_range(0..s.num_nodes);
        let dst = if s.num_nodes > 1 {
            let k = rng.gen_range(0..s.num_nodes - 1);
            if k >= src {
                k + 1
            } else {
                k
            }
        } else {
            src
        };
        let t = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let donor = &s.events[rng.gen_range(0..s.len())];
        let ev = TemporalEvent {
            src,
            dst,
            t,
            features: donor.features.clone(),
            label: None,
        };
        let entry = LogEntry {
            src,
            dst,
            t_original: None,
            t_new: t,
            disturbed: true,
            detail: "added".into(),
        };
        pairs.push((ev, entry));
    }
    let (events, entries) = sort_pairs(pairs);
    let log = PerturbationLog {
        method: Method::Structure,
        p,
        seed,
        entries,
        removed,
    };
    Ok((s.with_events(events), log))
}

pub fn perturb(
    s: &EventStream,
    method: Method,
    p: f64,
    sigma: f64,
    seed: u64,
) -> Result<(EventStream, PerturbationLog)> {
    match method {
        Method::Original => Ok(identity(s, seed)),
        Method::Time => disturb_time(s, p, sigma, seed),
        Method::Feature => disturb_feature(s, p, seed),
        Method::Structure => disturb_structure(s, p, seed),
    }
}

/// Replays `log` against `input` and checks it describes `output`.
pub fn check_consistency(
    input: &EventStream,
    output: &EventStream,
    log: &PerturbationLog,
) -> Result<()> {
    let fail = |m: String| Err(Error::Contract(m));
    if log.entries.len() != output.len() {
        return fail(format!(
            "log has {} entries for {} edges",
            log.entries.len(),
            output.len()
        ));
    }
    for (k, (e, ev)) in log.entries.iter().zip(&output.events).enumerate() {
        if (e.src, e.dst) != (ev.src, ev.dst) || e.t_new.to_bits() != ev.t.to_bits() {
            return fail(format!("entry {k} does not match output edge"));
        }
        if !e.disturbed && e.t_original != Some(e.t_new) {
            return fail(format!("entry {k} moved in time but is not flagged"));
        }
    }
    let original = input.len() - log.removed.len();
    let kept = log
        .entries
        .iter()
        .filter(|e| e.t_original.is_some())
        .count();
    if kept != original {
        return fail(format!("{kept} kept edges, expected {original}"));
    }
    Ok(())
}

fn fmt_opt(t: Option<f64>) -> String {
    t.map_or_else(String::new, |t| format!("{t:?}"))
}

pub fn write_log(path: &Path, header: &str, log: &PerturbationLog) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{header}")?;
    writeln!(out, "# method={} p={} seed={}", log.method, log.p, log.seed)?;
    writeln!(out, "i,j,t_original,t_new,disturbed,detail")?;
    for e in &log.entries {
        writeln!(
            out,
            "{},{},{},{:?},{},{}",
            e.src,
            e.dst,
            fmt_opt(e.t_original),
            e.t_new,
            u8::from(e.disturbed),
            e.detail
        )?;
    }
    for k in &log.removed {
        writeln!(out, "# removed {},{},{:?}", k.src, k.dst, k.t())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads the entries of a log file (comment lines are skipped).
pub fn read_log_entries(path: &Path) -> Result<Vec<LogEntry>> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("i,") {
            continue;
        }
        let f: Vec<&str> = line.splitn(6, ',').collect();
        if f.len() < 5 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                line: n + 1,
                msg: format!("expected 6 fields, found {}", f.len()),
            });
        }
        let parse_err = |field: &str, value: &str| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            field: field.into(),
            value: value.into(),
        };
        let num = |field: &str, v: &str| v.parse::<f64>().map_err(|_| parse_err(field, v));
        let id = |field: &str, v: &str| v.parse::<usize>().map_err(|_| parse_err(field, v));
        entries.push(LogEntry {
            src: id("i", f[0])?,
            dst: id("j", f[1])?,
            t_original: if f[2].is_empty() {
                None
            } else {
                Some(num("t_original", f[2])?)
            },
            t_new: num("t_new", f[3])?,
            disturbed: f[4] == "1" || f[4] == "true",
            detail: f.get(5).unwrap_or(&"").to_string(),
        });
    }
    Ok(entries)
}
