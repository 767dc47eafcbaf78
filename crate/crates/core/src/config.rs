//! Run configuration as plain `key = value` lines with overrides.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::events::{parse_key_values, SplitSpec};
use crate::objectives::Reduction;

/// Model variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Hash)]
pub enum Mode {
    #[default]
    Full,
    /// Structure loss disabled (`γ = 0`); the filter keeps its initial weights.
    WoDgsl,
    /// Noise score reduced to the base distance.
    StaticSim,
    /// Filter and structure loss only: no aggregation layers, the embedding is
    /// the node memory.
    DgfOnly,
    /// Embedding learner only: every edge weight is 1 and there is no
    /// structure loss.
    TelOnly,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Full,
        Mode::WoDgsl,
        Mode::StaticSim,
        Mode::DgfOnly,
        Mode::TelOnly,
    ];

    pub fn uses_filter(self) -> bool {
        self != Mode::TelOnly
    }

    pub fn uses_structure_loss(self) -> bool {
        !matches!(self, Mode::WoDgsl | Mode::TelOnly)
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "wo_dgsl" => Ok(Mode::WoDgsl),
            "static_sim" => Ok(Mode::StaticSim),
            "dgf_only" => Ok(Mode::DgfOnly),
            "tel_only" => Ok(Mode::TelOnly),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected full, wo_dgsl, static_sim, dgf_only or tel_only)"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Full => "full",
            Mode::WoDgsl => "wo_dgsl",
            Mode::StaticSim => "static_sim",
            Mode::DgfOnly => "dgf_only",
            Mode::TelOnly => "tel_only",
        })
    }
}

/// Which embedding inputs of the structure loss are cut from the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Hash)]
pub enum StructureGrad {
    /// Gradients reach the embeddings through both the score and the weight.
    Full,
    /// Embeddings enter the noise score as constants.
    #[default]
    DetachScore,
    /// Embeddings enter the score and the filter as constants; the structure
    /// loss trains only the filter and the noise function.
    DetachAll,
}

impl FromStr for StructureGrad {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(StructureGrad::Full),
            "detach_score" => Ok(StructureGrad::DetachScore),
            "detach_all" => Ok(StructureGrad::DetachAll),
            other => Err(Error::Config(format!(
                "unknown structure_grad {other:?} (expected full, detach_score or detach_all)"
            ))),
        }
    }
}

impl fmt::Display for StructureGrad {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StructureGrad::Full => "full",
            StructureGrad::DetachScore => "detach_score",
            StructureGrad::DetachAll => "detach_all",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Hash)]
pub enum Task {
    #[default]
    Classification,
    LinkPrediction,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(Task::Classification),
            "link_prediction" => Ok(Task::LinkPrediction),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Classification => "classification",
            Task::LinkPrediction => "link_prediction",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Aggregation layers `L`.
    pub layers: usize,
    /// Neighbors sampled per node, `h`.
    pub neighbors: usize,
    pub d_emb: usize,
    pub d_time: usize,
    /// Negatives per positive edge, `Q`.
    pub q: usize,
    pub epsilon: f64,
    pub gamma: f64,
    pub seed: u64,
    pub mode: Mode,
    pub task: Task,
    pub cross_uses_self: bool,
    pub positive_weight: Option<f64>,
    pub reduction: Reduction,
    pub split: SplitSpec,
    /// Train the link head together with the main model instead of afterwards.
    pub link_joint: bool,
    pub link_epochs: usize,
    pub structure_grad: StructureGrad,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            patience: 5,
            batch_size: 200,
            lr: 1e-4,
            layers: 1,
            neighbors: 10,
            d_emb: 100,
            d_time: 100,
            q: 1,
            epsilon: 1.0,
            gamma: 0.5,
            seed: 0,
            mode: Mode::Full,
            task: Task::Classification,
            cross_uses_self: false,
            positive_weight: None,
            reduction: Reduction::MeanPerPositive,
            split: SplitSpec::default(),
            link_joint: false,
            link_epochs: 30,
            structure_grad: StructureGrad::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key} = {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "cannot parse {key} = {value:?} as a boolean"
        ))),
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "epochs" => self.epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "layers" | "L" => self.layers = parse(key, value)?,
            "neighbors" | "h" => self.neighbors = parse(key, value)?,
            "d_emb" => self.d_emb = parse(key, value)?,
            "d_time" => self.d_time = parse(key, value)?,
            "q" | "Q" => self.q = parse(key, value)?,
            "epsilon" => self.epsilon = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "mode" => self.mode = value.parse()?,
            "task" => self.task = value.parse()?,
            "cross_uses_self" => self.cross_uses_self = parse_bool(key, value)?,
            "positive_weight" => {
                self.positive_weight = match value {
                    "" | "none" | "off" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "reduction" => {
                self.reduction = match value {
                    "sum" => Reduction::Sum,
                    "mean" => Reduction::MeanPerPositive,
                    _ => {
                        return Err(Error::Config(format!(
                            "reduction must be sum or mean, got {value:?}"
                        )))
                    }
                }
            }
            "train_frac" => self.split.train_frac = parse(key, value)?,
            "val_frac" => self.split.val_frac = parse(key, value)?,
            "test_frac" => self.split.test_frac = parse(key, value)?,
            "link_joint" => self.link_joint = parse_bool(key, value)?,
            "link_epochs" => self.link_epochs = parse(key, value)?,
            "structure_grad" => self.structure_grad = value.parse()?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (k, v) in parse_key_values(text) {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse_text(&std::fs::read_to_string(path)?)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.neighbors == 0 {
            return fail("neighbors must be at least 1".into());
        }
        if self.q == 0 {
            return fail("q must be at least 1".into());
        }
        if self.d_emb == 0 || self.d_time == 0 {
            return fail("dimensions must be positive".into());
        }
        if self.epsilon <= 0.0 {
            return fail(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.gamma < 0.0 {
            return fail(format!("gamma must be non-negative, got {}", self.gamma));
        }
        if self.lr <= 0.0 {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.layers == 0 && self.mode != Mode::DgfOnly {
            return fail("layers must be at least 1".into());
        }
        self.split.validate()
    }

    /// `γ` actually applied: zero for the variants without a structure loss.
    pub fn effective_gamma(&self) -> f64 {
        if self.mode.uses_structure_loss() {
            self.gamma
        } else {
            0.0
        }
    }

    /// Aggregation layers actually built.
    pub fn effective_layers(&self) -> usize {
        if self.mode == Mode::DgfOnly {
            0
        } else {
            self.layers
        }
    }

    /// Canonical text; parsing it back yields the same config.
    pub fn to_text(&self) -> String {
        let reduction = match self.reduction {
            Reduction::Sum => "sum",
            Reduction::MeanPerPositive => "mean",
        };
        let pw = self
            .positive_weight
            .map_or("none".to_string(), |w| w.to_string());
        format!(
            "epochs = {}\npatience = {}\nbatch_size = {}\nlr = {}\nlayers = {}\nneighbors = {}\nd_emb = {}\n\
             d_time = {}\nq = {}\nepsilon = {}\ngamma = {}\nseed = {}\nmode = {}\ntask = {}\ncross_uses_self = {}\n\
             positive_weight = {}\nreduction = {}\ntrain_frac = {}\nval_frac = {}\ntest_frac = {}\n\
             link_joint = {}\nlink_epochs = {}\nstructure_grad = {}\n",
            self.epochs,
            self.patience,
            self.batch_size,
            self.lr,
            self.layers,
            self.neighbors,
            self.d_emb,
            self.d_time,
            self.q,
            self.epsilon,
            self.gamma,
            self.seed,
            self.mode,
            self.task,
            self.cross_uses_self,
            pw,
            reduction,
            self.split.train_frac,
            self.split.val_frac,
            self.split.test_frac,
            self.link_joint,
            self.link_epochs,
            self.structure_grad,
        )
    }

    /// First 16 hex digits of the SHA-256 of [`TrainConfig::to_text`].
    pub fn hash(&self) -> String {
        text_hash(&self.to_text())
    }
}

pub fn text_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// First line of every artifact file.
pub fn artifact_header(command: &str, config_hash: &str, seed: u64) -> String {
    format!("# command={command} config={config_hash} seed={seed}")
}
