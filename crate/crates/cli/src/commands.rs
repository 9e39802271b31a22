use std::time::Instant;

use ringseq::cost::{comm_volume, crossover, rational_to_json, sparse_comm_forward};
use ringseq::reference::{
    attention_backward, attention_forward, linformer_forward, mlp_forward, multi_head_forward,
};
use ringseq::rsa::{
    gather_heads, rsa_backward, rsa_forward, shard_qkv, sp_attention_layer_forward, sp_mlp_forward,
};
use ringseq::sim::{gather_sequence, scatter_sequence};
use ringseq::sparse::{sparse_rsa_forward, ProjectionShards};
use ringseq::tensor_parallel::{
    tp_attention_forward, tp_mlp_forward, ColumnRowSplitWeights, HeadSplitWeights,
};
use ringseq::{
    AttentionConfig, AttentionWeights64, Block, Cluster, CommLedger, CostReport, Executor,
    MlpWeights64, Parallelism, Pass, QkvShard64, Rational, Rng, SparseShardConfig, SparseWeights64,
    Tensor64,
};
use serde_json::{json, Value};

use crate::args::{CostSweep, RunConfig, SchemeArg};
use crate::report::{ledger_csv, ledger_delta, Check, Report};
use crate::CliError;

/// Finite-difference step for `gradcheck`.
pub const FD_STEP: f64 = 1e-5;
/// Floor on the denominator of the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-6;
/// Bound on `|rsa_backward - oracle|` reported by `gradcheck`.
pub const GRAD_ORACLE_TOL: f64 = 1e-9;
const GRADCHECK_WARN_L: usize = 32;

/// A finished command: the report plus lines meant for stderr.
#[derive(Debug)]
pub struct Outcome {
    pub report: Report,
    pub notes: Vec<String>,
}

fn config_echo(run: &RunConfig) -> Value {
    let c = &run.cfg;
    json!({
        "scheme": run.scheme.as_str(),
        "B": c.batch,
        "L": c.seq_len,
        "H": c.hidden,
        "Z": c.heads,
        "A": c.head_dim,
        "N": c.devices,
        "K": run.k_proj,
        "seed": run.seed,
        "tol": run.tol,
    })
}

fn validate(run: &RunConfig) -> Result<(), CliError> {
    match run.scheme {
        SchemeArg::Seq => run.cfg.validate()?,
        SchemeArg::Tp => run.cfg.validate_tensor_parallel()?,
        SchemeArg::Sparse => SparseShardConfig::new(run.cfg, run.k_proj).validate()?,
    }
    Ok(())
}

struct Qkv {
    q: Tensor64,
    k: Tensor64,
    v: Tensor64,
}

impl Qkv {
    fn draw(cfg: &AttentionConfig, rng: &mut Rng) -> Result<Self, CliError> {
        let shape = cfg.full_head_shape();
        Ok(Qkv {
            q: rng.tensor(&shape)?,
            k: rng.tensor(&shape)?,
            v: rng.tensor(&shape)?,
        })
    }

    fn shards(&self, n: usize) -> Result<Vec<QkvShard64>, CliError> {
        Ok(shard_qkv(&self.q, &self.k, &self.v, n)?)
    }
}

pub fn verify(run: &RunConfig, executor: Executor) -> Result<Outcome, CliError> {
    validate(run)?;
    let cfg = run.cfg;
    let cluster = Cluster::new(cfg.devices, executor)?;
    let mut rng = Rng::new(run.seed);
    let mut report = Report::new("verify");
    report.field("config", config_echo(run));
    let checks = &mut report.checks;
    match run.scheme {
        SchemeArg::Seq => {
            let data = Qkv::draw(&cfg, &mut rng)?;
            let grad_out: Tensor64 = rng.tensor(&cfg.full_head_shape())?;
            let shards = data.shards(cfg.devices)?;
            let fwd = rsa_forward(&cluster, &shards, &cfg)?;
            let want = attention_forward(&data.q, &data.k, &data.v)?;
            let diff = gather_heads(&fwd.outputs)?.max_abs_diff(&want)?;
            checks.push(Check::at_most("forward_max_abs_diff", diff, run.tol));

            let bwd = rsa_backward(
                &cluster,
                &shards,
                &fwd.saved,
                &grad_out.chunk(2, cfg.devices)?,
                &cfg,
            )?;
            let got = bwd.gathered()?;
            let want = attention_backward(&data.q, &data.k, &data.v, &grad_out)?;
            let diff = got
                .dq
                .max_abs_diff(&want.dq)?
                .max(got.dk.max_abs_diff(&want.dk)?)
                .max(got.dv.max_abs_diff(&want.dv)?);
            checks.push(Check::at_most("backward_max_abs_diff", diff, run.tol));
            checks.push(Check::exact(
                "forward_ledger_delta",
                ledger_delta(
                    &fwd.ledger,
                    comm_volume(&cfg, Parallelism::Sequence, Pass::Forward),
                ),
            ));
            checks.push(Check::exact(
                "backward_ledger_delta",
                ledger_delta(
                    &bwd.ledger,
                    comm_volume(&cfg, Parallelism::Sequence, Pass::Backward),
                ),
            ));

            let x: Tensor64 = rng.tensor(&cfg.hidden_shape())?;
            let w = AttentionWeights64::random(&cfg, &mut rng)?;
            let xs = scatter_sequence(&x, cfg.devices)?;
            let (out, layer_ledger) = sp_attention_layer_forward(&cluster, &xs, &w, &cfg)?;
            let diff = gather_sequence(&out)?.max_abs_diff(&multi_head_forward(&x, &w, &cfg)?)?;
            checks.push(Check::at_most("layer_max_abs_diff", diff, run.tol));
            checks.push(Check::exact(
                "layer_ledger_delta",
                ledger_delta(
                    &layer_ledger,
                    comm_volume(&cfg, Parallelism::Sequence, Pass::Forward),
                ),
            ));

            let mlp = MlpWeights64::random(cfg.hidden, &mut rng)?;
            let (out, mlp_ledger) = sp_mlp_forward(&cluster, &xs, &mlp)?;
            let diff = gather_sequence(&out)?.max_abs_diff(&mlp_forward(&x, &mlp)?)?;
            checks.push(Check::at_most("mlp_max_abs_diff", diff, run.tol));
            checks.push(Check::exact(
                "mlp_ledger_delta",
                ledger_delta(&mlp_ledger, Rational::from_integer(0)),
            ));
        }
        SchemeArg::Tp => {
            let expected = comm_volume(&cfg, Parallelism::Tensor, Pass::Forward);
            let x: Tensor64 = rng.tensor(&cfg.hidden_shape())?;
            let w = AttentionWeights64::random(&cfg, &mut rng)?;
            let (y, ledger) =
                tp_attention_forward(&cluster, &x, &HeadSplitWeights::split(&w, &cfg)?, &cfg)?;
            let diff = y.max_abs_diff(&multi_head_forward(&x, &w, &cfg)?)?;
            checks.push(Check::at_most("attention_max_abs_diff", diff, run.tol));
            checks.push(Check::exact(
                "attention_ledger_delta",
                ledger_delta(&ledger, expected),
            ));

            let mlp = MlpWeights64::random(cfg.hidden, &mut rng)?;
            let split = ColumnRowSplitWeights::split(&mlp, cfg.devices)?;
            let (y, ledger) = tp_mlp_forward(&cluster, &x, &split)?;
            let diff = y.max_abs_diff(&mlp_forward(&x, &mlp)?)?;
            checks.push(Check::at_most("mlp_max_abs_diff", diff, run.tol));
            checks.push(Check::exact(
                "mlp_ledger_delta",
                ledger_delta(&ledger, expected),
            ));
        }
        SchemeArg::Sparse => {
            let scfg = SparseShardConfig::new(cfg, run.k_proj);
            let data = Qkv::draw(&cfg, &mut rng)?;
            let sw = SparseWeights64::random(run.k_proj, cfg.seq_len, &mut rng)?;
            let proj = ProjectionShards::split(&sw, cfg.devices)?;
            let out = sparse_rsa_forward(&cluster, &data.shards(cfg.devices)?, &proj, &scfg)?;
            let want = linformer_forward(&data.q, &data.k, &data.v, &sw)?;
            let diff = gather_heads(&out.outputs)?.max_abs_diff(&want)?;
            checks.push(Check::at_most("forward_max_abs_diff", diff, run.tol));
            checks.push(Check::exact(
                "ledger_delta",
                ledger_delta(&out.ledger, sparse_comm_forward(&cfg, run.k_proj)),
            ));
            checks.push(Check::none(
                "audit_violations",
                out.audit_violations(&scfg).len(),
            ));
        }
    }
    Ok(Outcome {
        report,
        notes: Vec::new(),
    })
}

fn dot(a: &Tensor64, b: &Tensor64) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

pub fn gradcheck(run: &RunConfig, executor: Executor) -> Result<Outcome, CliError> {
    if run.scheme != SchemeArg::Seq {
        return Err(CliError::Invalid(format!(
            "gradcheck covers the seq scheme only, got {}",
            run.scheme.as_str()
        )));
    }
    validate(run)?;
    let cfg = run.cfg;
    let n = cfg.devices;
    let mut notes = Vec::new();
    if cfg.seq_len > GRADCHECK_WARN_L {
        notes.push(format!(
            "warning: gradcheck with L = {} needs {} forward passes",
            cfg.seq_len,
            6 * cfg.batch * cfg.heads * cfg.seq_len * cfg.head_dim
        ));
    }
    let cluster = Cluster::new(n, executor)?;
    let mut rng = Rng::new(run.seed);
    let data = Qkv::draw(&cfg, &mut rng)?;
    let mut grad_out: Tensor64 = rng.tensor(&cfg.full_head_shape())?;
    if run.zero_grad {
        grad_out = grad_out.scale(0.0);
    }

    let shards = data.shards(n)?;
    let fwd = rsa_forward(&cluster, &shards, &cfg)?;
    let bwd = rsa_backward(&cluster, &shards, &fwd.saved, &grad_out.chunk(2, n)?, &cfg)?;
    let analytic = bwd.gathered()?;

    let base = [data.q.clone(), data.k.clone(), data.v.clone()];
    let loss_at = |which: usize, i: usize, delta: f64| -> Result<f64, CliError> {
        let mut t = base.clone();
        let mut raw = t[which].data().to_vec();
        raw[i] += delta;
        t[which] = Tensor64::new(cfg.full_head_shape().to_vec(), raw)?;
        let out = rsa_forward(&cluster, &shard_qkv(&t[0], &t[1], &t[2], n)?, &cfg)?;
        Ok(dot(&gather_heads(&out.outputs)?, &grad_out))
    };
    let mut worst = 0.0f64;
    let mut evaluations = 0usize;
    for (which, grad) in [&analytic.dq, &analytic.dk, &analytic.dv]
        .into_iter()
        .enumerate()
    {
        for (i, &g) in grad.data().iter().enumerate() {
            let fd = (loss_at(which, i, FD_STEP)? - loss_at(which, i, -FD_STEP)?) / (2.0 * FD_STEP);
            evaluations += 2;
            worst = worst.max(rel_err(fd, g));
        }
    }
    let oracle = attention_backward(&data.q, &data.k, &data.v, &grad_out)?;
    let oracle_diff = analytic
        .dq
        .max_abs_diff(&oracle.dq)?
        .max(analytic.dk.max_abs_diff(&oracle.dk)?)
        .max(analytic.dv.max_abs_diff(&oracle.dv)?);
    let grad_max_abs = analytic
        .dq
        .max_abs()
        .max(analytic.dk.max_abs())
        .max(analytic.dv.max_abs());

    let mut report = Report::new("gradcheck");
    report.field("config", config_echo(run));
    report.field("zero_grad", run.zero_grad);
    report.field("fd_step", FD_STEP);
    report.field("rel_err_floor", REL_ERR_FLOOR);
    report.field("evaluations", evaluations);
    report.field("grad_max_abs", crate::report::float(grad_max_abs));
    report
        .checks
        .push(Check::at_most("worst_rel_err", worst, run.tol));
    report.checks.push(Check::at_most(
        "oracle_max_abs_diff",
        oracle_diff,
        GRAD_ORACLE_TOL,
    ));
    report.checks.push(Check::exact(
        "backward_ledger_delta",
        ledger_delta(
            &bwd.ledger,
            comm_volume(&cfg, Parallelism::Sequence, Pass::Backward),
        ),
    ));
    Ok(Outcome { report, notes })
}

pub const COST_EXTRA_COLUMNS: [&str; 2] = ["crossover_BL", "seq_memory_lower"];

pub fn cost(sweep: &CostSweep) -> Result<Outcome, CliError> {
    let mut rows = Vec::new();
    let mut csv_rows = Vec::new();
    for &scheme in &sweep.schemes {
        for &block in &sweep.blocks {
            let block = Block::from(block);
            for &b in &sweep.batch {
                for &l in &sweep.seq_len {
                    for &z in &sweep.heads {
                        for &a in &sweep.head_dim {
                            let hs = sweep.hidden.clone().unwrap_or_else(|| vec![z * a]);
                            for &h in &hs {
                                for &n in &sweep.devices {
                                    let mut cfg = AttentionConfig::new(b, l, z, a, n);
                                    cfg.hidden = h;
                                    let ks: Vec<Option<usize>> = if scheme == SchemeArg::Sparse {
                                        sweep.k_proj.iter().map(|&k| Some(k)).collect()
                                    } else {
                                        vec![None]
                                    };
                                    for k in ks {
                                        let r =
                                            CostReport::evaluate(&cfg, k, scheme.scheme(), block)?;
                                        let threshold: Option<Rational> = crossover(&cfg, block);
                                        let bl = Rational::from_integer((b * l) as i128);
                                        let lower = threshold.map(|t| bl > t);
                                        let mut row = r.to_json();
                                        row["crossover_BL"] = threshold
                                            .as_ref()
                                            .map_or(Value::Null, rational_to_json);
                                        row["seq_memory_lower"] =
                                            lower.map_or(Value::Null, Value::Bool);
                                        rows.push(row);
                                        let mut rec = r.csv_record();
                                        rec.push(
                                            threshold.map(|t| t.to_string()).unwrap_or_default(),
                                        );
                                        rec.push(lower.map(|x| x.to_string()).unwrap_or_default());
                                        csv_rows.push(rec);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let mut report = Report::new("cost");
    let list = |v: &[usize]| Value::from(v.to_vec());
    report.field(
        "config",
        json!({
            "scheme": sweep.schemes.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
            "block": sweep.blocks.iter().map(|&b| Block::from(b).as_str()).collect::<Vec<_>>(),
            "B": list(&sweep.batch),
            "L": list(&sweep.seq_len),
            "H": sweep.hidden.as_deref().map_or(Value::from("Z*A"), list),
            "Z": list(&sweep.heads),
            "A": list(&sweep.head_dim),
            "N": list(&sweep.devices),
            "K": list(&sweep.k_proj),
        }),
    );
    report.field("rows", Value::Array(rows));
    report.csv_header = CostReport::CSV_HEADER
        .iter()
        .chain(COST_EXTRA_COLUMNS.iter())
        .map(|s| s.to_string())
        .collect();
    report.csv_rows = csv_rows;
    Ok(Outcome {
        report,
        notes: Vec::new(),
    })
}

pub fn simulate(run: &RunConfig, executor: Executor) -> Result<Outcome, CliError> {
    validate(run)?;
    let cfg = run.cfg;
    let cluster = Cluster::new(cfg.devices, executor)?;
    let mut rng = Rng::new(run.seed);
    let mut report = Report::new("simulate");
    report.field("config", config_echo(run));
    let started = Instant::now();
    let mut total = CommLedger::new(cfg.devices, std::mem::size_of::<f64>());
    let mut phases = Vec::new();
    let expected_total: Rational;
    match run.scheme {
        SchemeArg::Seq => {
            let data = Qkv::draw(&cfg, &mut rng)?;
            let grad_out: Tensor64 = rng.tensor(&cfg.full_head_shape())?;
            let shards = data.shards(cfg.devices)?;
            let fwd = rsa_forward(&cluster, &shards, &cfg)?;
            let bwd = rsa_backward(
                &cluster,
                &shards,
                &fwd.saved,
                &grad_out.chunk(2, cfg.devices)?,
                &cfg,
            )?;
            phases.push((
                "forward",
                fwd.ledger,
                comm_volume(&cfg, Parallelism::Sequence, Pass::Forward),
            ));
            phases.push((
                "backward",
                bwd.ledger,
                comm_volume(&cfg, Parallelism::Sequence, Pass::Backward),
            ));
            expected_total = comm_volume(&cfg, Parallelism::Sequence, Pass::Total);
        }
        SchemeArg::Tp => {
            let per = comm_volume(&cfg, Parallelism::Tensor, Pass::Forward);
            let x: Tensor64 = rng.tensor(&cfg.hidden_shape())?;
            let w = AttentionWeights64::random(&cfg, &mut rng)?;
            let (_, attn) =
                tp_attention_forward(&cluster, &x, &HeadSplitWeights::split(&w, &cfg)?, &cfg)?;
            let mlp = MlpWeights64::random(cfg.hidden, &mut rng)?;
            let (_, mlp_ledger) = tp_mlp_forward(
                &cluster,
                &x,
                &ColumnRowSplitWeights::split(&mlp, cfg.devices)?,
            )?;
            phases.push(("attention_forward", attn, per));
            phases.push(("mlp_forward", mlp_ledger, per));
            expected_total = per + per;
        }
        SchemeArg::Sparse => {
            let scfg = SparseShardConfig::new(cfg, run.k_proj);
            let data = Qkv::draw(&cfg, &mut rng)?;
            let sw = SparseWeights64::random(run.k_proj, cfg.seq_len, &mut rng)?;
            let proj = ProjectionShards::split(&sw, cfg.devices)?;
            let out = sparse_rsa_forward(&cluster, &data.shards(cfg.devices)?, &proj, &scfg)?;
            report.checks.push(Check::none(
                "audit_violations",
                out.audit_violations(&scfg).len(),
            ));
            expected_total = sparse_comm_forward(&cfg, run.k_proj);
            phases.push(("forward", out.ledger, expected_total));
        }
    }
    let elapsed = started.elapsed();
    let mut expected = serde_json::Map::new();
    for (name, ledger, want) in &phases {
        report.checks.push(Check::exact(
            format!("{name}_ledger_delta"),
            ledger_delta(ledger, *want),
        ));
        expected.insert(name.to_string(), rational_to_json(want));
        total.absorb(ledger);
    }
    expected.insert("total".into(), rational_to_json(&expected_total));
    report.checks.push(Check::exact(
        "total_ledger_delta",
        ledger_delta(&total, expected_total),
    ));
    report.field("expected_elements_per_device", Value::Object(expected));
    report.field("ledger", total.to_json());
    ledger_csv(&mut report, &total);
    let executor_name = match executor {
        Executor::Sequential => "sequential",
        Executor::Concurrent => "concurrent",
    };
    Ok(Outcome {
        report,
        notes: vec![format!(
            "simulate: {:.3} s with the {executor_name} executor",
            elapsed.as_secs_f64()
        )],
    })
}
