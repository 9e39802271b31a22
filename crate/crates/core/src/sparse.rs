//! Sequence-parallel Linformer attention.
//!
//! Device `n` holds `Q^n, K^n, V^n` (`[B, Z, L/N, A]`) and the column blocks
//! `e_n, f_n` (`[K, L/N]`) of the projections that act on its own tokens.
//! The projected partials `e_n K^n` and `f_n V^n` (`[B, Z, K, A]`) circulate
//! `N−1` hops and are summed in ascending origin order, giving every device
//! the full `K' = e K` and `V' = f V`. The softmax over `Q^n K'ᵀ / √A` is then
//! local. Nothing held by a device has a sequence axis longer than
//! `max(L/N, K)`.

use crate::config::AttentionConfig;
use crate::error::{Error, Result};
use crate::reference::{self, SparseWeights};
use crate::rsa::{circulate, QkvShard};
use crate::scalar::Scalar;
use crate::sim::{Cluster, CommLedger, DeviceCtx};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SparseShardConfig {
    pub base: AttentionConfig,
    pub k_proj: usize,
}

impl SparseShardConfig {
    pub fn new(base: AttentionConfig, k_proj: usize) -> Self {
        Self { base, k_proj }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.k_proj == 0 || self.k_proj > self.base.seq_len {
            return Err(Error::Config(format!(
                "projection dimension K = {} must be in 1..={}",
                self.k_proj, self.base.seq_len
            )));
        }
        Ok(())
    }

    /// Shape of one projected key or value buffer, `[B, Z, K, A]`.
    pub fn projected_shape(&self) -> [usize; 4] {
        let c = &self.base;
        [c.batch, c.heads, self.k_proj, c.head_dim]
    }
}

/// Column blocks of the projections, one `[K, L/N]` pair per device.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionShards<T> {
    pub e: Vec<Tensor<T>>,
    pub f: Vec<Tensor<T>>,
}

impl<T: Scalar> ProjectionShards<T> {
    pub fn split(sw: &SparseWeights<T>, n: usize) -> Result<Self> {
        sw.validate(sw.e_proj.dim(1))?;
        Ok(Self {
            e: sw.e_proj.chunk(1, n)?,
            f: sw.f_proj.chunk(1, n)?,
        })
    }

    pub fn reconstruct(&self) -> Result<SparseWeights<T>> {
        Ok(SparseWeights {
            e_proj: Tensor::concat(&self.e, 1)?,
            f_proj: Tensor::concat(&self.f, 1)?,
        })
    }
}

/// How a tensor axis relates to the token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeqAxis {
    /// This device's `L/N` tokens.
    Chunk,
    /// The `K` projected positions.
    Projected,
    /// All `L` tokens.
    Full,
}

/// One tensor a device materialised during the sparse forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditEntry {
    pub device: usize,
    pub label: &'static str,
    pub shape: Vec<usize>,
    pub seq_axes: Vec<(usize, SeqAxis)>,
}

impl AuditEntry {
    fn new<T: Scalar>(
        device: usize,
        label: &'static str,
        t: &Tensor<T>,
        seq_axes: &[(usize, SeqAxis)],
    ) -> Self {
        Self {
            device,
            label,
            shape: t.shape().to_vec(),
            seq_axes: seq_axes.to_vec(),
        }
    }

    /// Describes every sequence axis that is full-length or whose size
    /// disagrees with its role.
    pub fn violations(&self, cfg: &SparseShardConfig) -> Vec<String> {
        let mut out = Vec::new();
        for &(axis, role) in &self.seq_axes {
            let Some(&got) = self.shape.get(axis) else {
                out.push(format!("{}: axis {axis} out of range", self.label));
                continue;
            };
            let want = match role {
                SeqAxis::Chunk => cfg.base.chunk_len(),
                SeqAxis::Projected => cfg.k_proj,
                SeqAxis::Full => {
                    out.push(format!(
                        "{} on device {}: full-length axis {axis}",
                        self.label, self.device
                    ));
                    continue;
                }
            };
            if got != want {
                out.push(format!(
                    "{} on device {}: axis {axis} is {got}, expected {want}",
                    self.label, self.device
                ));
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct SparseForward<T> {
    pub outputs: Vec<Tensor<T>>,
    pub ledger: CommLedger,
    pub audit: Vec<AuditEntry>,
}

impl<T> SparseForward<T> {
    pub fn audit_violations(&self, cfg: &SparseShardConfig) -> Vec<String> {
        self.audit.iter().flat_map(|e| e.violations(cfg)).collect()
    }
}

fn sparse_device<T: Scalar>(
    ctx: &DeviceCtx<'_, T>,
    shard: &QkvShard<T>,
    e: &Tensor<T>,
    f: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<AuditEntry>)> {
    use SeqAxis::{Chunk, Projected};
    let me = ctx.rank();
    let mut audit = vec![
        AuditEntry::new(me, "q", &shard.q, &[(2, Chunk)]),
        AuditEntry::new(me, "k", &shard.k, &[(2, Chunk)]),
        AuditEntry::new(me, "v", &shard.v, &[(2, Chunk)]),
        AuditEntry::new(me, "e", e, &[(0, Projected), (1, Chunk)]),
        AuditEntry::new(me, "f", f, &[(0, Projected), (1, Chunk)]),
    ];
    let pk = e.matmul(&shard.k)?;
    let pv = f.matmul(&shard.v)?;
    audit.push(AuditEntry::new(
        me,
        "partial projected k",
        &pk,
        &[(2, Projected)],
    ));
    audit.push(AuditEntry::new(
        me,
        "partial projected v",
        &pv,
        &[(2, Projected)],
    ));

    let keys = circulate(ctx, &pk, |_, t| Ok(t.clone()))?;
    let values = circulate(ctx, &pv, |_, t| Ok(t.clone()))?;
    for t in keys.iter().chain(&values) {
        audit.push(AuditEntry::new(
            me,
            "received partial",
            t,
            &[(2, Projected)],
        ));
    }

    let k_proj = Tensor::sum_ordered(&keys)?;
    let v_proj = Tensor::sum_ordered(&values)?;
    let probs = reference::scaled_scores(&shard.q, &k_proj)?.softmax_rows()?;
    let out = probs.matmul(&v_proj)?;
    audit.push(AuditEntry::new(
        me,
        "projected k",
        &k_proj,
        &[(2, Projected)],
    ));
    audit.push(AuditEntry::new(
        me,
        "projected v",
        &v_proj,
        &[(2, Projected)],
    ));
    audit.push(AuditEntry::new(
        me,
        "scores",
        &probs,
        &[(2, Chunk), (3, Projected)],
    ));
    audit.push(AuditEntry::new(me, "output", &out, &[(2, Chunk)]));
    Ok((out, audit))
}

pub fn sparse_rsa_forward<T: Scalar>(
    cluster: &Cluster,
    shards: &[QkvShard<T>],
    proj: &ProjectionShards<T>,
    cfg: &SparseShardConfig,
) -> Result<SparseForward<T>> {
    cfg.validate()?;
    let n = cfg.base.devices;
    if cluster.size() != n || shards.len() != n || proj.e.len() != n || proj.f.len() != n {
        return Err(Error::Config(format!(
            "config N = {n}, cluster has {} devices, {} shards, {} projection blocks",
            cluster.size(),
            shards.len(),
            proj.e.len()
        )));
    }
    let want_proj = [cfg.k_proj, cfg.base.chunk_len()];
    let want_chunk = cfg.base.chunk_shape();
    for (i, s) in shards.iter().enumerate() {
        for t in [&proj.e[i], &proj.f[i]] {
            if t.shape() != want_proj {
                return Err(Error::Shape(format!(
                    "projection block on device {i} must be {want_proj:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        for t in [&s.q, &s.k, &s.v] {
            if t.shape() != want_chunk {
                return Err(Error::Shape(format!(
                    "chunk on device {i} must be {want_chunk:?}, got {:?}",
                    t.shape()
                )));
            }
        }
    }
    let run = cluster.run(|ctx| {
        let r = ctx.rank();
        sparse_device(ctx, &shards[r], &proj.e[r], &proj.f[r])
    })?;
    let (outputs, audits): (Vec<_>, Vec<_>) = run.results.into_iter().unzip();
    Ok(SparseForward {
        outputs,
        ledger: run.ledger,
        audit: audits.into_iter().flatten().collect(),
    })
}
