use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Parser, Subcommand, ValueEnum};
use ringseq::{AttentionConfig, Block, Scheme};
use serde::Deserialize;

use crate::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "ringseq",
    version,
    about = "Sequence-parallel attention simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Compare a distributed scheme with the single-device oracle and its
    /// ledger with the closed-form volumes.
    Verify(Options),
    /// Compare ring self-attention gradients with central differences.
    Gradcheck(Options),
    /// Evaluate the memory and communication models over a sweep.
    Cost(Options),
    /// Run a scheme end to end on seeded data and dump its ledger.
    Simulate(Options),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeArg {
    #[default]
    Seq,
    Tp,
    Sparse,
}

impl SchemeArg {
    pub fn as_str(self) -> &'static str {
        match self {
            SchemeArg::Seq => "seq",
            SchemeArg::Tp => "tp",
            SchemeArg::Sparse => "sparse",
        }
    }

    pub fn scheme(self) -> Scheme {
        match self {
            SchemeArg::Seq => Scheme::SequenceParallel,
            SchemeArg::Tp => Scheme::TensorParallel,
            SchemeArg::Sparse => Scheme::SparseSequenceParallel,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockArg {
    Mlp,
    Attention,
}

impl From<BlockArg> for Block {
    fn from(b: BlockArg) -> Self {
        match b {
            BlockArg::Mlp => Block::Mlp,
            BlockArg::Attention => Block::Attention,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

/// A dimension flag value: `8`, `1..8` (inclusive), `1..=8` or `1,2,4`.
#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(try_from = "SweepRepr")]
pub struct Sweep(pub Vec<usize>);

const MAX_SWEEP: usize = 4096;

impl FromStr for Sweep {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let num = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| format!("invalid value {t:?} in {s:?}"))
        };
        let values = if let Some((lo, hi)) = s.split_once("..") {
            let lo = num(lo)?;
            let hi = num(hi.strip_prefix('=').unwrap_or(hi))?;
            if lo > hi {
                return Err(format!("empty range {s:?}"));
            }
            if hi - lo >= MAX_SWEEP {
                return Err(format!("range {s:?} has more than {MAX_SWEEP} points"));
            }
            (lo..=hi).collect()
        } else {
            s.split(',').map(num).collect::<Result<Vec<_>, _>>()?
        };
        Sweep::new(values)
    }
}

impl Sweep {
    fn new(values: Vec<usize>) -> Result<Self, String> {
        if values.is_empty() {
            return Err("empty value list".into());
        }
        if values.contains(&0) {
            return Err("dimensions must be positive".into());
        }
        Ok(Sweep(values))
    }
}

impl fmt::Display for Sweep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SweepRepr {
    One(usize),
    List(Vec<usize>),
    Text(String),
}

impl TryFrom<SweepRepr> for Sweep {
    type Error = String;

    fn try_from(r: SweepRepr) -> Result<Self, String> {
        match r {
            SweepRepr::One(v) => Sweep::new(vec![v]),
            SweepRepr::List(v) => Sweep::new(v),
            SweepRepr::Text(s) => s.parse(),
        }
    }
}

/// Flags shared by every subcommand. The same keys are accepted in a JSON
/// file passed with `--config`; flags on the command line take precedence.
#[derive(clap::Args, Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Options {
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    /// Restricts `cost` to one block; both by default.
    #[arg(long, value_enum)]
    pub block: Option<BlockArg>,
    /// Batch size.
    #[arg(long = "B", value_name = "B")]
    #[serde(rename = "B")]
    pub batch: Option<Sweep>,
    /// Sequence length.
    #[arg(long = "L", value_name = "L")]
    #[serde(rename = "L")]
    pub seq_len: Option<Sweep>,
    /// Hidden size; defaults to Z*A.
    #[arg(long = "H", value_name = "H")]
    #[serde(rename = "H")]
    pub hidden: Option<Sweep>,
    /// Attention heads.
    #[arg(long = "Z", value_name = "Z")]
    #[serde(rename = "Z")]
    pub heads: Option<Sweep>,
    /// Head dimension.
    #[arg(long = "A", value_name = "A")]
    #[serde(rename = "A")]
    pub head_dim: Option<Sweep>,
    /// Devices.
    #[arg(long = "N", value_name = "N")]
    #[serde(rename = "N")]
    pub devices: Option<Sweep>,
    /// Linformer projection dimension.
    #[arg(long = "K", value_name = "K")]
    #[serde(rename = "K")]
    pub k_proj: Option<Sweep>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Pass/fail bound; 1e-9 for verify, 1e-4 for gradcheck.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Use an all-zero output gradient (gradcheck).
    #[arg(long)]
    #[serde(default)]
    pub zero_grad: bool,
    /// JSON file with default values for any of the flags above.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

pub const DEFAULT_B: usize = 1;
pub const DEFAULT_L: usize = 8;
pub const DEFAULT_Z: usize = 2;
pub const DEFAULT_A: usize = 4;
pub const DEFAULT_N: usize = 2;
pub const DEFAULT_K: usize = 4;
pub const DEFAULT_SEED: u64 = 42;
pub const VERIFY_TOL: f64 = 1e-9;
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CommandKind {
    Verify,
    Gradcheck,
    Cost,
    Simulate,
}

impl CommandKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CommandKind::Verify => "verify",
            CommandKind::Gradcheck => "gradcheck",
            CommandKind::Cost => "cost",
            CommandKind::Simulate => "simulate",
        }
    }

    fn default_tol(self) -> f64 {
        match self {
            CommandKind::Gradcheck => GRADCHECK_TOL,
            _ => VERIFY_TOL,
        }
    }
}

/// Resolved settings for a single run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scheme: SchemeArg,
    pub cfg: AttentionConfig,
    pub k_proj: usize,
    pub seed: u64,
    pub tol: f64,
    pub zero_grad: bool,
}

/// Resolved settings for `cost`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostSweep {
    pub schemes: Vec<SchemeArg>,
    pub blocks: Vec<BlockArg>,
    pub batch: Vec<usize>,
    pub seq_len: Vec<usize>,
    /// `None` means `H = Z·A` at every point.
    pub hidden: Option<Vec<usize>>,
    pub heads: Vec<usize>,
    pub head_dim: Vec<usize>,
    pub devices: Vec<usize>,
    pub k_proj: Vec<usize>,
}

impl Options {
    /// Fills unset fields from the `--config` file, if any.
    pub fn merged(self) -> Result<Options, CliError> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", path.display())))?;
        let file: Options = serde_json::from_str(&text)
            .map_err(|e| CliError::Invalid(format!("bad config file {}: {e}", path.display())))?;
        Ok(Options {
            scheme: self.scheme.or(file.scheme),
            block: self.block.or(file.block),
            batch: self.batch.or(file.batch),
            seq_len: self.seq_len.or(file.seq_len),
            hidden: self.hidden.or(file.hidden),
            heads: self.heads.or(file.heads),
            head_dim: self.head_dim.or(file.head_dim),
            devices: self.devices.or(file.devices),
            k_proj: self.k_proj.or(file.k_proj),
            seed: self.seed.or(file.seed),
            tol: self.tol.or(file.tol),
            out: self.out.or(file.out),
            format: self.format.or(file.format),
            zero_grad: self.zero_grad || file.zero_grad,
            config: self.config,
        })
    }

    pub fn format(&self) -> Format {
        self.format.unwrap_or_default()
    }

    pub fn run_config(&self, kind: CommandKind) -> Result<RunConfig, CliError> {
        let single = |name: &str, s: &Option<Sweep>, default: usize| match s {
            None => Ok(default),
            Some(Sweep(v)) if v.len() == 1 => Ok(v[0]),
            Some(_) => Err(CliError::Invalid(format!(
                "--{name} takes a single value for {}",
                kind.as_str()
            ))),
        };
        let batch = single("B", &self.batch, DEFAULT_B)?;
        let seq_len = single("L", &self.seq_len, DEFAULT_L)?;
        let heads = single("Z", &self.heads, DEFAULT_Z)?;
        let head_dim = single("A", &self.head_dim, DEFAULT_A)?;
        let devices = single("N", &self.devices, DEFAULT_N)?;
        let mut cfg = AttentionConfig::new(batch, seq_len, heads, head_dim, devices);
        cfg.hidden = single("H", &self.hidden, heads * head_dim)?;
        let tol = self.tol.unwrap_or(kind.default_tol());
        if !(tol.is_finite() && tol >= 0.0) {
            return Err(CliError::Invalid(format!(
                "--tol must be a non-negative number, got {tol}"
            )));
        }
        Ok(RunConfig {
            scheme: self.scheme.unwrap_or_default(),
            cfg,
            k_proj: single("K", &self.k_proj, DEFAULT_K)?,
            seed: self.seed.unwrap_or(DEFAULT_SEED),
            tol,
            zero_grad: self.zero_grad,
        })
    }

    pub fn cost_sweep(&self) -> CostSweep {
        let list = |s: &Option<Sweep>, d: usize| s.as_ref().map_or(vec![d], |s| s.0.clone());
        CostSweep {
            schemes: self.scheme.map_or_else(
                || vec![SchemeArg::Tp, SchemeArg::Seq, SchemeArg::Sparse],
                |s| vec![s],
            ),
            blocks: self
                .block
                .map_or_else(|| vec![BlockArg::Mlp, BlockArg::Attention], |b| vec![b]),
            batch: list(&self.batch, DEFAULT_B),
            seq_len: list(&self.seq_len, DEFAULT_L),
            hidden: self.hidden.as_ref().map(|s| s.0.clone()),
            heads: list(&self.heads, DEFAULT_Z),
            head_dim: list(&self.head_dim, DEFAULT_A),
            devices: list(&self.devices, DEFAULT_N),
            k_proj: list(&self.k_proj, DEFAULT_K),
        }
    }
}
