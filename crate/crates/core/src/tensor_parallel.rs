//! Tensor-parallel baseline: weights are split across devices and every
//! device holds the full sequence. One all-reduce follows the MLP's second
//! GEMM and one follows the attention output projection.

use crate::config::{divisors, AttentionConfig};
use crate::error::{Error, Result};
use crate::reference::{self, AttentionWeights, MlpWeights};
use crate::scalar::Scalar;
use crate::sim::{Cluster, CommLedger, DeviceCtx};
use crate::tensor::Tensor;

/// MLP weights split column-wise (`a`) and row-wise (`b`).
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnRowSplitWeights<T> {
    /// `[H, 4H/N]` per device.
    pub a_cols: Vec<Tensor<T>>,
    /// `[4H/N, H]` per device.
    pub b_rows: Vec<Tensor<T>>,
}

impl<T: Scalar> ColumnRowSplitWeights<T> {
    pub fn split(w: &MlpWeights<T>, n: usize) -> Result<Self> {
        let inner = 4 * w.hidden()?;
        if n == 0 || inner % n != 0 {
            return Err(Error::Config(format!(
                "MLP inner width 4H = {inner} not divisible by N = {n}"
            )));
        }
        Ok(Self {
            a_cols: w.a.chunk(1, n)?,
            b_rows: w.b.chunk(0, n)?,
        })
    }

    pub fn devices(&self) -> usize {
        self.a_cols.len()
    }

    pub fn reconstruct(&self) -> Result<MlpWeights<T>> {
        MlpWeights::new(
            Tensor::concat(&self.a_cols, 1)?,
            Tensor::concat(&self.b_rows, 0)?,
        )
    }
}

/// Attention weights split by heads: `wq/wk/wv` by column blocks of
/// `(Z/N)·A`, `wo` by the matching row blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadSplitWeights<T> {
    pub shards: Vec<AttentionWeights<T>>,
}

impl<T: Scalar> HeadSplitWeights<T> {
    pub fn split(w: &AttentionWeights<T>, cfg: &AttentionConfig) -> Result<Self> {
        cfg.validate_tensor_parallel()?;
        w.validate(cfg)?;
        let n = cfg.devices;
        let (wq, wk, wv, wo) = (
            w.wq.chunk(1, n)?,
            w.wk.chunk(1, n)?,
            w.wv.chunk(1, n)?,
            w.wo.chunk(0, n)?,
        );
        let shards = (0..n)
            .map(|i| AttentionWeights {
                wq: wq[i].clone(),
                wk: wk[i].clone(),
                wv: wv[i].clone(),
                wo: wo[i].clone(),
            })
            .collect();
        Ok(Self { shards })
    }

    pub fn reconstruct(&self) -> Result<AttentionWeights<T>> {
        let cat = |f: fn(&AttentionWeights<T>) -> &Tensor<T>, axis| {
            Tensor::concat(
                &self.shards.iter().map(|s| f(s).clone()).collect::<Vec<_>>(),
                axis,
            )
        };
        Ok(AttentionWeights {
            wq: cat(|s| &s.wq, 1)?,
            wk: cat(|s| &s.wk, 1)?,
            wv: cat(|s| &s.wv, 1)?,
            wo: cat(|s| &s.wo, 0)?,
        })
    }
}

fn replicated_result<T: Scalar>(results: Vec<Tensor<T>>) -> Result<Tensor<T>> {
    let mut it = results.into_iter();
    let first = it.next().ok_or_else(|| Error::State("no devices".into()))?;
    if it.any(|t| t != first) {
        return Err(Error::State("devices disagree after all-reduce".into()));
    }
    Ok(first)
}

/// `Σ_i gelu(x·A_i)·B_i` with the sum done by an all-reduce.
pub fn tp_mlp_forward<T: Scalar>(
    cluster: &Cluster,
    x: &Tensor<T>,
    w: &ColumnRowSplitWeights<T>,
) -> Result<(Tensor<T>, CommLedger)> {
    if w.devices() != cluster.size() || w.b_rows.len() != cluster.size() {
        return Err(Error::Config(format!(
            "weights split {} ways for {} devices",
            w.devices(),
            cluster.size()
        )));
    }
    let hidden = w.b_rows[0].dim(1);
    if x.shape().last() != Some(&hidden) {
        return Err(Error::dim("tp_mlp_forward", x.shape(), w.a_cols[0].shape()));
    }
    let run = cluster.run(|ctx: &DeviceCtx<T>| {
        let r = ctx.rank();
        let partial = x.matmul(&w.a_cols[r])?.gelu().matmul(&w.b_rows[r])?;
        ctx.all_reduce(partial)
    })?;
    Ok((replicated_result(run.results)?, run.ledger))
}

/// Each device runs `Z/N` heads over the full sequence and applies its row
/// block of `wo`; partial outputs are summed by an all-reduce.
pub fn tp_attention_forward<T: Scalar>(
    cluster: &Cluster,
    x: &Tensor<T>,
    w: &HeadSplitWeights<T>,
    cfg: &AttentionConfig,
) -> Result<(Tensor<T>, CommLedger)> {
    cfg.validate_tensor_parallel()?;
    if cluster.size() != cfg.devices || w.shards.len() != cfg.devices {
        return Err(Error::Config(format!(
            "config N = {}, cluster has {} devices, weights split {} ways",
            cfg.devices,
            cluster.size(),
            w.shards.len()
        )));
    }
    if x.shape() != cfg.hidden_shape() {
        return Err(Error::dim(
            "tp_attention_forward",
            &cfg.hidden_shape(),
            x.shape(),
        ));
    }
    let local_heads = cfg.heads / cfg.devices;
    let run = cluster.run(|ctx: &DeviceCtx<T>| {
        let shard = &w.shards[ctx.rank()];
        let (q, k, v) = reference::project_heads(x, shard, local_heads)?;
        let partial = reference::attention_forward(&q, &k, &v)?
            .merge_heads()?
            .matmul(&shard.wo)?;
        ctx.all_reduce(partial)
    })?;
    Ok((replicated_result(run.results)?, run.ledger))
}

/// Device counts usable for tensor parallelism: the divisors of `Z`.
pub fn valid_tp_sizes(heads: usize) -> Vec<usize> {
    divisors(heads)
}

/// Device counts usable for sequence parallelism: the divisors of `L`.
pub fn valid_sp_sizes(seq_len: usize) -> Vec<usize> {
    divisors(seq_len)
}
