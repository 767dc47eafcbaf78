//! Timestamped interaction streams: ingestion, chronological splits and
//! batching.
//!
//! Input rows are `src,dst,t,label,f_1,...,f_d`. An empty label field means
//! the event carries no label. Lines starting with `#` are comments and a
//! leading non-numeric line is treated as a column header, which covers the
//! public JODIE-style interaction files.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};

pub type NodeId = usize;

/// Identity of one temporal edge. Timestamps are compared bit-wise so that
/// `(i, j, t1)` and `(i, j, t2)` are distinct whenever `t1 != t2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EdgeKey {
    pub src: NodeId,
    pub dst: NodeId,
    t_bits: u64,
}

impl EdgeKey {
    pub fn new(src: NodeId, dst: NodeId, t: f64) -> Self {
        // -0.0 and 0.0 must collide
        let t = if t == 0.0 { 0.0 } else { t };
        EdgeKey {
            src,
            dst,
            t_bits: t.to_bits(),
        }
    }

    pub fn t(&self) -> f64 {
        f64::from_bits(self.t_bits)
    }
}

impl fmt::Display for EdgeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.src, self.dst, self.t())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalEvent {
    pub src: NodeId,
    pub dst: NodeId,
    pub t: f64,
    pub features: Vec<f64>,
    /// Dynamic binary label of `src` at `t`.
    pub label: Option<u8>,
}

impl TemporalEvent {
    pub fn key(&self) -> EdgeKey {
        EdgeKey::new(self.src, self.dst, self.t)
    }
}

/// How raw node ids in an input file are interpreted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DatasetFormat {
    /// `src` and `dst` share one id namespace.
    #[default]
    Generic,
    /// User/item interaction files (Wikipedia, Reddit, MOOC) where source and
    /// destination ids are numbered independently.
    Bipartite,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generic" => Ok(DatasetFormat::Generic),
            "bipartite" | "jodie" | "wikipedia" | "reddit" | "mooc" => Ok(DatasetFormat::Bipartite),
            other => Err(Error::Config(format!("unknown dataset format {other:?}"))),
        }
    }
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetFormat::Generic => "generic",
            DatasetFormat::Bipartite => "bipartite",
        })
    }
}

/// Compacted id → raw id as it appeared in the source file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IdMap {
    raw: Vec<String>,
}

impl IdMap {
    pub fn identity(n: usize) -> Self {
        IdMap {
            raw: (0..n).map(|i| i.to_string()).collect(),
        }
    }

    pub fn raw(&self, id: NodeId) -> Option<&str> {
        self.raw.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

/// Immutable, chronologically ordered event sequence.
#[derive(Clone, Debug)]
pub struct EventStream {
    pub events: Vec<TemporalEvent>,
    pub num_nodes: usize,
    pub d_e: usize,
    pub d_label: usize,
    pub ids: Arc<IdMap>,
}

impl EventStream {
    /// Builds a stream, stable-sorting by timestamp and validating invariants.
    pub fn new(mut events: Vec<TemporalEvent>, num_nodes: usize, d_e: usize) -> Result<Self> {
        events.sort_by(|a, b| a.t.total_cmp(&b.t));
        for (k, e) in events.iter().enumerate() {
            if e.features.len() != d_e {
                return Err(Error::Contract(format!(
                    "event {k} has {} features, stream dimension is {d_e}",
                    e.features.len()
                )));
            }
            if e.src >= num_nodes || e.dst >= num_nodes {
                return Err(Error::Contract(format!(
                    "event {k} references node {} but num_nodes = {num_nodes}",
                    e.src.max(e.dst)
                )));
            }
            if !e.t.is_finite() || e.t < 0.0 {
                return Err(Error::Contract(format!(
                    "event {k} has invalid timestamp {}",
                    e.t
                )));
            }
        }
        Ok(EventStream {
            events,
            num_nodes,
            d_e,
            d_label: 2,
            ids: Arc::new(IdMap::identity(num_nodes)),
        })
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn t_min(&self) -> f64 {
        self.events.first().map_or(0.0, |e| e.t)
    }

    pub fn t_max(&self) -> f64 {
        self.events.last().map_or(0.0, |e| e.t)
    }

    /// Same metadata, different events (already sorted).
    pub fn with_events(&self, events: Vec<TemporalEvent>) -> EventStream {
        EventStream {
            events,
            num_nodes: self.num_nodes,
            d_e: self.d_e,
            d_label: self.d_label,
            ids: Arc::clone(&self.ids),
        }
    }

    pub fn labeled_count(&self) -> usize {
        self.events.iter().filter(|e| e.label.is_some()).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.70,
            val_frac: 0.15,
            test_frac: 0.15,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.train_frac, self.val_frac, self.test_frac];
        if fr.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(Error::Split(format!("fractions must lie in (0,1): {fr:?}")));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Split(format!("fractions must sum to 1: {fr:?}")));
        }
        Ok(())
    }

    /// `(train_end, val_end)` event indices for a stream of `n` events.
    pub fn boundaries(&self, n: usize) -> (usize, usize) {
        // the small slack absorbs products like 0.7 * 10 = 6.999...
        let cut = |f: f64| ((f * n as f64) + 1e-9).floor() as usize;
        let train_end = cut(self.train_frac).min(n);
        let val_end = (train_end + cut(self.val_frac)).min(n);
        (train_end, val_end)
    }
}

/// Splits into contiguous train/validation/test slices. The remainder left
/// by flooring goes to the test slice.
pub fn chronological_split(
    s: &EventStream,
    spec: &SplitSpec,
) -> Result<(EventStream, EventStream, EventStream)> {
    spec.validate()?;
    let n = s.len();
    let (a, b) = spec.boundaries(n);
    if a == 0 || b == a || b == n {
        return Err(Error::Split(format!(
            "{n} events give slice sizes {}/{}/{}",
            a,
            b - a,
            n - b
        )));
    }
    Ok((
        s.with_events(s.events[..a].to_vec()),
        s.with_events(s.events[a..b].to_vec()),
        s.with_events(s.events[b..].to_vec()),
    ))
}

/// Contiguous chronological slices of `batch_size` events; the last may be
/// shorter.
pub fn batches(
    events: &[TemporalEvent],
    batch_size: usize,
) -> std::slice::Chunks<'_, TemporalEvent> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    events.chunks(batch_size)
}

// ---- file IO ---------------------------------------------------------------

fn parse_field<T: FromStr>(path: &Path, line: usize, field: &str, value: &str) -> Result<T> {
    value.trim().parse::<T>().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        field: field.to_string(),
        value: value.to_string(),
    })
}

struct RawRow {
    src: String,
    dst: String,
    t: f64,
    label: Option<u8>,
    features: Vec<f64>,
}

fn read_rows(path: &Path) -> Result<Vec<RawRow>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut rows = Vec::new();
    let mut d_e: Option<usize> = None;
    let mut seen_data = false;
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = k + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if !seen_data && fields[0].trim().parse::<f64>().is_err() {
            seen_data = true;
            continue; // column header
        }
        seen_data = true;
        if fields.len() < 4 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("expected at least 4 fields, found {}", fields.len()),
            });
        }
        let nfeat = fields.len() - 4;
        match d_e {
            None => d_e = Some(nfeat),
            Some(d) if d != nfeat => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    line: lineno,
                    msg: format!("row has {nfeat} features, expected {d}"),
                })
            }
            _ => {}
        }
        let src = fields[0].trim().to_string();
        let dst = fields[1].trim().to_string();
        parse_field::<u64>(path, lineno, "src", &src)?;
        parse_field::<u64>(path, lineno, "dst", &dst)?;
        let t: f64 = parse_field(path, lineno, "t", fields[2])?;
        if !t.is_finite() || t < 0.0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                field: "t".into(),
                value: fields[2].to_string(),
            });
        }
        let label = match fields[3].trim() {
            "" => None,
            v => {
                let raw: f64 = parse_field(path, lineno, "label", v)?;
                Some(u8::from(raw != 0.0))
            }
        };
        let features = fields[4..]
            .iter()
            .enumerate()
            .map(|(c, v)| parse_field::<f64>(path, lineno, &format!("f_{}", c + 1), v))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(RawRow {
            src,
            dst,
            t,
            label,
            features,
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyStream);
    }
    Ok(rows)
}

/// Reads a raw interaction file, compacting node ids to `0..num_nodes` in
/// order of first appearance in the time-sorted stream.
pub fn ingest_csv(path: &Path, format: DatasetFormat) -> Result<EventStream> {
    let mut rows = read_rows(path)?;
    let d_e = rows[0].features.len();
    rows.sort_by(|a, b| a.t.total_cmp(&b.t));

    let mut index: HashMap<String, NodeId> = HashMap::new();
    let mut raw = Vec::new();
    let mut intern = |key: String, raw_label: String| -> NodeId {
        *index.entry(key).or_insert_with(|| {
            raw.push(raw_label);
            raw.len() - 1
        })
    };
    let mut events = Vec::with_capacity(rows.len());
    for r in rows {
        let (sk, dk, dl) = match format {
            DatasetFormat::Generic => (r.src.clone(), r.dst.clone(), r.dst.clone()),
            DatasetFormat::Bipartite => (
                format!("s{}", r.src),
                format!("d{}", r.dst),
                format!("dst:{}", r.dst),
            ),
        };
        let src = intern(sk, r.src);
        let dst = intern(dk, dl);
        events.push(TemporalEvent {
            src,
            dst,
            t: r.t,
            features: r.features,
            label: r.label,
        });
    }
    let num_nodes = raw.len();
    let mut stream = EventStream::new(events, num_nodes, d_e)?;
    stream.ids = Arc::new(IdMap { raw });
    Ok(stream)
}

/// Path of the `key = value` sidecar that accompanies a stream file.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Writes `src,dst,t,label,features...` with compacted ids plus the sidecar.
/// Floats use the shortest representation that parses back bit-exactly.
pub fn write_stream(path: &Path, header: &str, s: &EventStream) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{}", header.trim_end())?;
    write!(out, "src,dst,t,label")?;
    for c in 1..=s.d_e {
        write!(out, ",f_{c}")?;
    }
    writeln!(out)?;
    for e in &s.events {
        write!(out, "{},{},{},", e.src, e.dst, e.t)?;
        if let Some(l) = e.label {
            write!(out, "{l}")?;
        }
        for f in &e.features {
            write!(out, ",{f}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;

    let mut meta = BufWriter::new(fs::File::create(meta_path(path))?);
    writeln!(meta, "{}", header.trim_end())?;
    writeln!(meta, "num_nodes = {}", s.num_nodes)?;
    writeln!(meta, "num_events = {}", s.len())?;
    writeln!(meta, "d_e = {}", s.d_e)?;
    writeln!(meta, "d_label = {}", s.d_label)?;
    for (i, r) in s.ids.raw.iter().enumerate() {
        writeln!(meta, "id.{i} = {r}")?;
    }
    meta.flush()?;
    Ok(())
}

/// Parses `key = value` lines, skipping blanks and `#` comments.
pub fn parse_key_values(text: &str) -> Vec<(String, String)> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| {
            let (k, v) = l.split_once('=')?;
            Some((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

/// Reads a stream written by [`write_stream`]. Ids are taken as already
/// compact; `num_nodes` and the id map come from the sidecar when present.
pub fn read_stream(path: &Path) -> Result<EventStream> {
    let rows = read_rows(path)?;
    let d_e = rows[0].features.len();
    let mut events = Vec::with_capacity(rows.len());
    let mut max_id = 0;
    for (k, r) in rows.into_iter().enumerate() {
        let src: NodeId = parse_field(path, k, "src", &r.src)?;
        let dst: NodeId = parse_field(path, k, "dst", &r.dst)?;
        max_id = max_id.max(src).max(dst);
        events.push(TemporalEvent {
            src,
            dst,
            t: r.t,
            features: r.features,
            label: r.label,
        });
    }
    let mut num_nodes = max_id + 1;
    let mut raw: Vec<String> = Vec::new();
    let meta = meta_path(path);
    if meta.exists() {
        let mut ids: Vec<(usize, String)> = Vec::new();
        for (k, v) in parse_key_values(&fs::read_to_string(&meta)?) {
            if k == "num_nodes" {
                num_nodes = parse_field(&meta, 0, "num_nodes", &v)?;
            } else if let Some(idx) = k.strip_prefix("id.") {
                ids.push((parse_field(&meta, 0, "id", idx)?, v));
            }
        }
        ids.sort();
        raw = ids.into_iter().map(|(_, v)| v).collect();
    }
    let mut stream = EventStream::new(events, num_nodes, d_e)?;
    if raw.len() == num_nodes {
        stream.ids = Arc::new(IdMap { raw });
    }
    Ok(stream)
}
