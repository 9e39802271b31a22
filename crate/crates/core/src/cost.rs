//! Closed-form memory and communication models for one transformer layer.
//!
//! All quantities are counts of tensor elements. Formulas are generic over
//! [`CostScalar`]; the canonical instantiation is [`Rational`], which makes
//! every comparison exact. Pipeline-parallel effects (one fewer all-gather per
//! stage) are not modelled.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use num_traits::{FromPrimitive, Num, ToPrimitive};
use serde::Serialize;
use serde_json::Value;

use crate::config::AttentionConfig;
use crate::error::{Error, Result};

/// Exact rational element count.
pub type Rational = Ratio<i128>;

/// Number type the cost formulas can be evaluated in.
pub trait CostScalar: Num + Clone + PartialOrd + FromPrimitive {}

impl<T: Num + Clone + PartialOrd + FromPrimitive> CostScalar for T {}

fn c<T: CostScalar>(x: usize) -> T {
    T::from_usize(x).expect("config value fits the cost scalar")
}

/// Integers become JSON numbers; anything else becomes the string `"p/q"`.
pub fn rational_to_json(r: &Rational) -> Value {
    if r.is_integer() {
        match i64::try_from(*r.numer()) {
            Ok(i) => Value::from(i),
            Err(_) => Value::String(r.numer().to_string()),
        }
    } else {
        Value::String(format!("{}/{}", r.numer(), r.denom()))
    }
}

pub fn rational_to_string(r: &Rational) -> String {
    if r.is_integer() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

/// The two dense schemes the layer formulas compare.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Parallelism {
    Tensor,
    Sequence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Scheme {
    #[serde(rename = "tensor-parallel")]
    TensorParallel,
    #[serde(rename = "sequence-parallel")]
    SequenceParallel,
    #[serde(rename = "sparse-sequence-parallel")]
    SparseSequenceParallel,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [
        Scheme::TensorParallel,
        Scheme::SequenceParallel,
        Scheme::SparseSequenceParallel,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::TensorParallel => "tensor-parallel",
            Scheme::SequenceParallel => "sequence-parallel",
            Scheme::SparseSequenceParallel => "sparse-sequence-parallel",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Mlp,
    Attention,
}

impl Block {
    pub fn as_str(&self) -> &'static str {
        match self {
            Block::Mlp => "mlp",
            Block::Attention => "attention",
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pass {
    Forward,
    Backward,
    Total,
}

impl FromStr for Pass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Pass::Forward),
            "backward" => Ok(Pass::Backward),
            "total" => Ok(Pass::Total),
            other => Err(Error::Config(format!("unknown pass {other:?}"))),
        }
    }
}

/// MLP block memory.
///
/// * tensor: `32H²/N + 4BLH/N + BLH`
/// * sequence: `32H² + 5BLH/N`
pub fn mlp_memory<T: CostScalar>(cfg: &AttentionConfig, scheme: Parallelism) -> T {
    let (b, l, h, n) = (
        c::<T>(cfg.batch),
        c::<T>(cfg.seq_len),
        c::<T>(cfg.hidden),
        c::<T>(cfg.devices),
    );
    let params = c::<T>(32) * h.clone() * h.clone();
    let blh = b * l * h;
    match scheme {
        Parallelism::Tensor => params / n.clone() + c::<T>(4) * blh.clone() / n + blh,
        Parallelism::Sequence => params + c::<T>(5) * blh / n,
    }
}

/// Multi-head attention block memory.
///
/// * tensor: `16AZH/N + 4BLZA/N + BZL²/N + BLH`
/// * sequence: `16AZH + 4BZLA/N + BZL²/N + BLH/N`
pub fn attention_memory<T: CostScalar>(cfg: &AttentionConfig, scheme: Parallelism) -> T {
    let (b, l, h, a, z, n) = (
        c::<T>(cfg.batch),
        c::<T>(cfg.seq_len),
        c::<T>(cfg.hidden),
        c::<T>(cfg.head_dim),
        c::<T>(cfg.heads),
        c::<T>(cfg.devices),
    );
    let params = c::<T>(16) * a.clone() * z.clone() * h.clone();
    let qkv = c::<T>(4) * b.clone() * l.clone() * z.clone() * a / n.clone();
    let scores = b.clone() * z * l.clone() * l.clone() / n.clone();
    let blh = b * l * h;
    match scheme {
        Parallelism::Tensor => params / n + qkv + scores + blh,
        Parallelism::Sequence => params + qkv + scores + blh / n,
    }
}

/// Linformer attention block under sequence parallelism:
/// `2AZH + 2BZLA/N + BZLK/N + BLH/N + 2BZKA`.
pub fn sparse_attention_memory<T: CostScalar>(cfg: &AttentionConfig, k_proj: usize) -> T {
    let (b, l, h, a, z, n, k) = (
        c::<T>(cfg.batch),
        c::<T>(cfg.seq_len),
        c::<T>(cfg.hidden),
        c::<T>(cfg.head_dim),
        c::<T>(cfg.heads),
        c::<T>(cfg.devices),
        c::<T>(k_proj),
    );
    let two = c::<T>(2);
    two.clone() * a.clone() * z.clone() * h.clone()
        + two.clone() * b.clone() * z.clone() * l.clone() * a.clone() / n.clone()
        + b.clone() * z.clone() * l.clone() * k.clone() / n.clone()
        + b.clone() * l * h / n
        + two * b * z * k * a
}

/// `(N−1)·B·Z·(L/N)·A`, the unit all layer communication volumes are multiples of.
fn comm_unit<T: CostScalar>(cfg: &AttentionConfig) -> T {
    c::<T>(cfg.devices - 1)
        * c::<T>(cfg.batch)
        * c::<T>(cfg.heads)
        * (c::<T>(cfg.seq_len) / c::<T>(cfg.devices))
        * c::<T>(cfg.head_dim)
}

/// Per-device elements communicated by one transformer layer.
///
/// Sequence parallelism: forward `2u`, backward `6u`, total `8u` where
/// `u = (N−1)·B·Z·(L/N)·A`; all of it happens in the attention block.
///
/// Tensor parallelism: each of the four all-reduces (MLP and attention,
/// forward and backward) moves `2u`, so forward and backward report the
/// per-collective `2u` and the total over the four collectives is `8u`.
pub fn comm_volume<T: CostScalar>(cfg: &AttentionConfig, scheme: Parallelism, pass: Pass) -> T {
    let u = comm_unit::<T>(cfg);
    let factor = match (scheme, pass) {
        (Parallelism::Sequence, Pass::Forward) => 2,
        (Parallelism::Sequence, Pass::Backward) => 6,
        (Parallelism::Tensor, Pass::Forward | Pass::Backward) => 2,
        (_, Pass::Total) => 8,
    };
    c::<T>(factor) * u
}

/// Forward volume of the sparse ring protocol: the projected key and value
/// partials (`B·Z·K·A` each) each make `N−1` ring hops.
pub fn sparse_comm_forward<T: CostScalar>(cfg: &AttentionConfig, k_proj: usize) -> T {
    c::<T>(cfg.devices - 1)
        * c::<T>(2)
        * c::<T>(cfg.batch)
        * c::<T>(cfg.heads)
        * c::<T>(k_proj)
        * c::<T>(cfg.head_dim)
}

/// Threshold on `B·L` above which sequence parallelism needs less memory than
/// tensor parallelism: `32H` for the MLP block, `16AZ` for attention. `None`
/// for a single device, where both schemes coincide.
pub fn crossover<T: CostScalar>(cfg: &AttentionConfig, block: Block) -> Option<T> {
    if cfg.devices < 2 {
        return None;
    }
    Some(match block {
        Block::Mlp => c::<T>(32) * c::<T>(cfg.hidden),
        Block::Attention => c::<T>(16) * c::<T>(cfg.head_dim) * c::<T>(cfg.heads),
    })
}

/// Bytes for an element count at the given element width (8 for f64, 2 for
/// half precision).
pub fn bytes(elements: Rational, element_bytes: usize) -> Rational {
    elements * Rational::from_integer(element_bytes as i128)
}

/// One evaluated (scheme, block, config) point.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub scheme: Scheme,
    pub block: Block,
    pub cfg: AttentionConfig,
    pub k_proj: Option<usize>,
    pub memory_elements: Rational,
    pub comm_forward_elements: Rational,
    /// `None` where no backward protocol is modelled (sparse attention).
    pub comm_backward_elements: Option<Rational>,
    pub comm_total_elements: Option<Rational>,
}

impl CostReport {
    pub const CSV_HEADER: [&'static str; 13] = [
        "scheme",
        "block",
        "B",
        "L",
        "H",
        "A",
        "Z",
        "N",
        "K",
        "memory_elements",
        "comm_fwd",
        "comm_bwd",
        "comm_total",
    ];

    /// Communication columns are per-layer volumes; the memory column is the
    /// named block's.
    pub fn evaluate(
        cfg: &AttentionConfig,
        k_proj: Option<usize>,
        scheme: Scheme,
        block: Block,
    ) -> Result<Self> {
        cfg.validate_shape()?;
        let dense = |p: Parallelism| {
            let memory = match block {
                Block::Mlp => mlp_memory(cfg, p),
                Block::Attention => attention_memory(cfg, p),
            };
            (
                memory,
                comm_volume(cfg, p, Pass::Forward),
                Some(comm_volume(cfg, p, Pass::Backward)),
                Some(comm_volume(cfg, p, Pass::Total)),
            )
        };
        let (memory, fwd, bwd, total) = match scheme {
            Scheme::TensorParallel => dense(Parallelism::Tensor),
            Scheme::SequenceParallel => dense(Parallelism::Sequence),
            Scheme::SparseSequenceParallel => {
                let k = k_proj.ok_or_else(|| {
                    Error::Config("sparse scheme needs the projection dimension K".into())
                })?;
                if k == 0 {
                    return Err(Error::Config("K must be positive".into()));
                }
                match block {
                    Block::Mlp => {
                        let (m, ..) = dense(Parallelism::Sequence);
                        let f = sparse_comm_forward(cfg, k);
                        (m, f, None, None)
                    }
                    Block::Attention => (
                        sparse_attention_memory(cfg, k),
                        sparse_comm_forward(cfg, k),
                        None,
                        None,
                    ),
                }
            }
        };
        Ok(Self {
            scheme,
            block,
            cfg: *cfg,
            k_proj,
            memory_elements: memory,
            comm_forward_elements: fwd,
            comm_backward_elements: bwd,
            comm_total_elements: total,
        })
    }

    pub fn csv_record(&self) -> Vec<String> {
        let opt = |r: &Option<Rational>| r.as_ref().map(rational_to_string).unwrap_or_default();
        vec![
            self.scheme.to_string(),
            self.block.to_string(),
            self.cfg.batch.to_string(),
            self.cfg.seq_len.to_string(),
            self.cfg.hidden.to_string(),
            self.cfg.head_dim.to_string(),
            self.cfg.heads.to_string(),
            self.cfg.devices.to_string(),
            self.k_proj.map(|k| k.to_string()).unwrap_or_default(),
            rational_to_string(&self.memory_elements),
            rational_to_string(&self.comm_forward_elements),
            opt(&self.comm_backward_elements),
            opt(&self.comm_total_elements),
        ]
    }

    pub fn to_json(&self) -> Value {
        let opt = |r: &Option<Rational>| r.as_ref().map(rational_to_json).unwrap_or(Value::Null);
        serde_json::json!({
            "scheme": self.scheme,
            "block": self.block,
            "B": self.cfg.batch,
            "L": self.cfg.seq_len,
            "H": self.cfg.hidden,
            "A": self.cfg.head_dim,
            "Z": self.cfg.heads,
            "N": self.cfg.devices,
            "K": self.k_proj,
            "memory_elements": rational_to_json(&self.memory_elements),
            "comm_fwd": rational_to_json(&self.comm_forward_elements),
            "comm_bwd": opt(&self.comm_backward_elements),
            "comm_total": opt(&self.comm_total_elements),
        })
    }

    /// Memory at the given element width, rounded toward zero for display.
    pub fn memory_bytes(&self, element_bytes: usize) -> Option<u128> {
        bytes(self.memory_elements, element_bytes)
            .to_integer()
            .to_u128()
    }
}
