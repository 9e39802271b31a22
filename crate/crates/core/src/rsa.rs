//! Ring self-attention.
//!
//! Device `n` owns query, key and value chunks `Q^n, K^n, V^n` of shape
//! `[B, Z, L/N, A]`. The forward pass has two ring stages:
//!
//! 1. Key chunks circulate `N−1` hops. On each hop device `n` fills the score
//!    columns belonging to the chunk's origin device with `Q^n (K^i)ᵀ / √A`.
//!    Once all `L` columns are present the row softmax is purely local.
//! 2. Value chunks circulate `N−1` hops and `O^n = Σ_i S^n_i V^i`, summed in
//!    ascending origin index regardless of arrival order.
//!
//! The backward pass re-circulates values (for `dS^n = dO^n Vᵀ`) and keys (for
//! `dQ^n`), then builds full-length partial `dK` and `dV` buffers locally and
//! sums them with two all-reduces. Per device this costs `2(N−1)·c` elements
//! forward and `6(N−1)·c` backward with `c = B·Z·(L/N)·A`.

use crate::config::AttentionConfig;
use crate::error::{Error, Result};
use crate::reference::{self, AttentionGrads, AttentionWeights, MlpWeights};
use crate::scalar::Scalar;
use crate::sim::{scatter_axis, Cluster, CommLedger, DeviceCtx, ShardedSequence};
use crate::tensor::Tensor;

/// One device's per-head query/key/value chunks, each `[B, Z, L/N, A]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QkvShard<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
}

/// Splits full `[B, Z, L, A]` tensors along the token axis.
pub fn shard_qkv<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    n: usize,
) -> Result<Vec<QkvShard<T>>> {
    let qs = scatter_axis(q, 2, n)?;
    let ks = scatter_axis(k, 2, n)?;
    let vs = scatter_axis(v, 2, n)?;
    Ok(qs
        .into_iter()
        .zip(ks)
        .zip(vs)
        .map(|((q, k), v)| QkvShard {
            q: q.chunk,
            k: k.chunk,
            v: v.chunk,
        })
        .collect())
}

/// Concatenates per-device `[B, Z, L/N, A]` outputs back into `[B, Z, L, A]`.
pub fn gather_heads<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    Tensor::concat(parts, 2)
}

/// Stage-one state: the score rows of one device being filled column block
/// by column block as key chunks arrive.
#[derive(Clone, Debug)]
pub struct RsaPartials<T> {
    /// `S^n` before the softmax, `[B, Z, L/N, L]`.
    pub local_scores: Tensor<T>,
    /// Key chunk currently held.
    pub received: Tensor<T>,
    /// Hops completed, in `[0, N)`.
    pub hop: usize,
    /// `filled[i]` is the hop at which column block `i` was written.
    pub filled: Vec<Option<usize>>,
}

impl<T: Scalar> RsaPartials<T> {
    fn new(cfg: &AttentionConfig, own_keys: Tensor<T>) -> Result<Self> {
        let [b, z, c, _] = cfg.chunk_shape();
        Ok(Self {
            local_scores: Tensor::zeros(&[b, z, c, cfg.seq_len])?,
            received: own_keys,
            hop: 0,
            filled: vec![None; cfg.devices],
        })
    }

    fn fill(&mut self, origin: usize, block: &Tensor<T>) -> Result<()> {
        if self.filled[origin].is_some() {
            return Err(Error::State(format!("score block {origin} written twice")));
        }
        let n = self.filled.len();
        let mut blocks = self.local_scores.chunk(3, n)?;
        blocks[origin] = block.clone();
        self.local_scores = Tensor::concat(&blocks, 3)?;
        self.filled[origin] = Some(self.hop);
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.filled.iter().all(Option::is_some)
    }
}

/// Activations saved by the forward pass for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RsaSaved<T> {
    /// Post-softmax `S^n`, `[B, Z, L/N, L]`.
    pub probs: Tensor<T>,
    /// Origin device of the key chunk held at each stage-one hop.
    pub arrival_order: Vec<usize>,
}

fn check_shard<T: Scalar>(s: &QkvShard<T>, cfg: &AttentionConfig) -> Result<()> {
    let want = cfg.chunk_shape();
    for (name, t) in [("q", &s.q), ("k", &s.k), ("v", &s.v)] {
        if t.shape() != want {
            return Err(Error::Shape(format!(
                "{name} chunk must be {want:?}, got {:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

fn check_ring(cluster: &Cluster, cfg: &AttentionConfig, shards: usize) -> Result<()> {
    cfg.validate()?;
    if cluster.size() != cfg.devices || shards != cfg.devices {
        return Err(Error::Config(format!(
            "config N = {}, cluster has {} devices, {} shards supplied",
            cfg.devices,
            cluster.size(),
            shards
        )));
    }
    Ok(())
}

fn sqrt_head_dim<T: Scalar>(cfg: &AttentionConfig) -> T {
    T::from_usize(cfg.head_dim).expect("head dim fits").sqrt()
}

/// Stage one on one device: circulate keys and assemble the complete score
/// rows `Q^n Kᵀ / √A`.
pub fn rsa_score_stage<T: Scalar>(
    ctx: &DeviceCtx<'_, T>,
    q: &Tensor<T>,
    k: &Tensor<T>,
    cfg: &AttentionConfig,
) -> Result<RsaPartials<T>> {
    let topo = ctx.topology();
    let mut partials = RsaPartials::new(cfg, k.clone())?;
    let mut origin = ctx.rank();
    loop {
        let block = reference::scaled_scores(q, &partials.received)?;
        partials.fill(origin, &block)?;
        if partials.hop + 1 == cfg.devices {
            break;
        }
        let held = std::mem::replace(&mut partials.received, Tensor::zeros(&[1])?);
        partials.received = ctx.ring_pass(held)?;
        partials.hop += 1;
        origin = topo.prev(origin);
    }
    Ok(partials)
}

/// Circulates `chunk` around the ring and returns `f(origin, chunk_of_origin)`
/// for every origin, indexed by origin.
pub(crate) fn circulate<T: Scalar, R>(
    ctx: &DeviceCtx<'_, T>,
    chunk: &Tensor<T>,
    mut f: impl FnMut(usize, &Tensor<T>) -> Result<R>,
) -> Result<Vec<R>> {
    let n = ctx.num_devices();
    let topo = ctx.topology();
    let mut out: Vec<Option<R>> = (0..n).map(|_| None).collect();
    let mut held = chunk.clone();
    let mut origin = ctx.rank();
    for hop in 0..n {
        out[origin] = Some(f(origin, &held)?);
        if hop + 1 < n {
            held = ctx.ring_pass(held)?;
            origin = topo.prev(origin);
        }
    }
    Ok(out
        .into_iter()
        .map(|r| r.expect("every origin visited once"))
        .collect())
}

/// Forward pass on one device. Returns `O^n` and the saved activations.
pub fn rsa_forward_device<T: Scalar>(
    ctx: &DeviceCtx<'_, T>,
    shard: &QkvShard<T>,
    cfg: &AttentionConfig,
) -> Result<(Tensor<T>, RsaSaved<T>)> {
    let topo = ctx.topology();
    let partials = rsa_score_stage(ctx, &shard.q, &shard.k, cfg)?;
    if !partials.is_complete() {
        return Err(Error::State("score rows incomplete after stage one".into()));
    }
    let probs = partials.local_scores.softmax_rows()?;
    let c = cfg.chunk_len();
    let terms = circulate(ctx, &shard.v, |origin, v| {
        probs.narrow(3, origin * c, c)?.matmul(v)
    })?;
    let out = Tensor::sum_ordered(&terms)?;
    let arrival_order = (0..cfg.devices)
        .scan(ctx.rank(), |o, _| {
            let cur = *o;
            *o = topo.prev(cur);
            Some(cur)
        })
        .collect();
    Ok((
        out,
        RsaSaved {
            probs,
            arrival_order,
        },
    ))
}

/// Backward pass on one device. Returns `(dQ^n, dK^n, dV^n)`.
pub fn rsa_backward_device<T: Scalar>(
    ctx: &DeviceCtx<'_, T>,
    shard: &QkvShard<T>,
    saved: &RsaSaved<T>,
    grad_out: &Tensor<T>,
    cfg: &AttentionConfig,
) -> Result<AttentionGrads<T>> {
    let c = cfg.chunk_len();
    let me = ctx.rank();
    let scale = sqrt_head_dim::<T>(cfg);
    let probs = &saved.probs;

    let dp_blocks = circulate(ctx, &shard.v, |_, v| grad_out.matmul(&v.transpose_last2()?))?;
    let d_probs = Tensor::concat(&dp_blocks, 3)?;
    let d_scores = reference::softmax_backward(probs, &d_probs)?;
    let ds_blocks = d_scores.chunk(3, cfg.devices)?;

    let dq_terms = circulate(ctx, &shard.k, |origin, k| ds_blocks[origin].matmul(k))?;
    let dq = Tensor::sum_ordered(&dq_terms)?.div_scalar(scale);

    let dk_partial = ds_blocks
        .iter()
        .map(|ds| ds.transpose_last2()?.matmul(&shard.q))
        .collect::<Result<Vec<_>>>()?;
    let dv_partial = probs
        .chunk(3, cfg.devices)?
        .iter()
        .map(|p| p.transpose_last2()?.matmul(grad_out))
        .collect::<Result<Vec<_>>>()?;
    let dk_full = ctx.all_reduce(Tensor::concat(&dk_partial, 2)?)?;
    let dv_full = ctx.all_reduce(Tensor::concat(&dv_partial, 2)?)?;

    Ok(AttentionGrads {
        dq,
        dk: dk_full.narrow(2, me * c, c)?.div_scalar(scale),
        dv: dv_full.narrow(2, me * c, c)?,
    })
}

#[derive(Clone, Debug)]
pub struct RsaForward<T> {
    /// `O^n` per device, `[B, Z, L/N, A]`.
    pub outputs: Vec<Tensor<T>>,
    pub saved: Vec<RsaSaved<T>>,
    pub ledger: CommLedger,
}

#[derive(Clone, Debug)]
pub struct RsaBackward<T> {
    pub grads: Vec<AttentionGrads<T>>,
    pub ledger: CommLedger,
}

impl<T: Scalar> RsaBackward<T> {
    /// Gathered `[B, Z, L, A]` gradients.
    pub fn gathered(&self) -> Result<AttentionGrads<T>> {
        let pick = |f: fn(&AttentionGrads<T>) -> &Tensor<T>| {
            gather_heads(&self.grads.iter().map(|g| f(g).clone()).collect::<Vec<_>>())
        };
        Ok(AttentionGrads {
            dq: pick(|g| &g.dq)?,
            dk: pick(|g| &g.dk)?,
            dv: pick(|g| &g.dv)?,
        })
    }
}

pub fn rsa_forward<T: Scalar>(
    cluster: &Cluster,
    shards: &[QkvShard<T>],
    cfg: &AttentionConfig,
) -> Result<RsaForward<T>> {
    check_ring(cluster, cfg, shards.len())?;
    for s in shards {
        check_shard(s, cfg)?;
    }
    let run = cluster.run(|ctx| rsa_forward_device(ctx, &shards[ctx.rank()], cfg))?;
    let (outputs, saved) = run.results.into_iter().unzip();
    Ok(RsaForward {
        outputs,
        saved,
        ledger: run.ledger,
    })
}

pub fn rsa_backward<T: Scalar>(
    cluster: &Cluster,
    shards: &[QkvShard<T>],
    saved: &[RsaSaved<T>],
    grad_out: &[Tensor<T>],
    cfg: &AttentionConfig,
) -> Result<RsaBackward<T>> {
    check_ring(cluster, cfg, shards.len())?;
    if saved.len() != cfg.devices {
        return Err(Error::State(format!(
            "missing saved activations: expected {} devices, have {}",
            cfg.devices,
            saved.len()
        )));
    }
    if grad_out.len() != cfg.devices {
        return Err(Error::Shape(format!(
            "expected {} output-gradient chunks, got {}",
            cfg.devices,
            grad_out.len()
        )));
    }
    let [b, z, c, _] = cfg.chunk_shape();
    for ((s, sv), g) in shards.iter().zip(saved).zip(grad_out) {
        check_shard(s, cfg)?;
        if sv.probs.shape() != [b, z, c, cfg.seq_len] {
            return Err(Error::State(format!(
                "saved scores have shape {:?}, expected {:?}",
                sv.probs.shape(),
                [b, z, c, cfg.seq_len]
            )));
        }
        if g.shape() != cfg.chunk_shape() {
            return Err(Error::dim("rsa_backward", &cfg.chunk_shape(), g.shape()));
        }
    }
    let run = cluster.run(|ctx| {
        let r = ctx.rank();
        rsa_backward_device(ctx, &shards[r], &saved[r], &grad_out[r], cfg)
    })?;
    Ok(RsaBackward {
        grads: run.results,
        ledger: run.ledger,
    })
}

fn check_hidden_shards<T: Scalar>(x: &[ShardedSequence<T>], cfg: &AttentionConfig) -> Result<()> {
    for (i, s) in x.iter().enumerate() {
        if s.device_index != i {
            return Err(Error::Shape(
                "shards must be ordered by device index".into(),
            ));
        }
        let want = [cfg.batch, cfg.chunk_len(), cfg.hidden];
        if s.chunk.shape() != want {
            return Err(Error::Shape(format!(
                "hidden chunk must be {want:?}, got {:?}",
                s.chunk.shape()
            )));
        }
    }
    Ok(())
}

fn wrap<T>(chunks: Vec<Tensor<T>>) -> Vec<ShardedSequence<T>> {
    chunks
        .into_iter()
        .enumerate()
        .map(|(device_index, chunk)| ShardedSequence {
            device_index,
            chunk,
        })
        .collect()
}

/// Full attention layer under sequence parallelism. Projections use the
/// replicated weights locally; the only communication is inside ring
/// self-attention.
pub fn sp_attention_layer_forward<T: Scalar>(
    cluster: &Cluster,
    x: &[ShardedSequence<T>],
    w: &AttentionWeights<T>,
    cfg: &AttentionConfig,
) -> Result<(Vec<ShardedSequence<T>>, CommLedger)> {
    check_ring(cluster, cfg, x.len())?;
    w.validate(cfg)?;
    check_hidden_shards(x, cfg)?;
    let run = cluster.run(|ctx| {
        let chunk = &x[ctx.rank()].chunk;
        let (q, k, v) = reference::project_heads(chunk, w, cfg.heads)?;
        let (o, _) = rsa_forward_device(ctx, &QkvShard { q, k, v }, cfg)?;
        o.merge_heads()?.matmul(&w.wo)
    })?;
    Ok((wrap(run.results), run.ledger))
}

/// MLP block under sequence parallelism: every chunk is processed locally.
pub fn sp_mlp_forward<T: Scalar>(
    cluster: &Cluster,
    x: &[ShardedSequence<T>],
    w: &MlpWeights<T>,
) -> Result<(Vec<ShardedSequence<T>>, CommLedger)> {
    if x.len() != cluster.size() {
        return Err(Error::Config(format!(
            "{} shards for {} devices",
            x.len(),
            cluster.size()
        )));
    }
    let run = cluster.run(|ctx: &DeviceCtx<T>| reference::mlp_forward(&x[ctx.rank()].chunk, w))?;
    Ok((wrap(run.results), run.ledger))
}
