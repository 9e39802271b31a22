use std::process::{Command, Output};

use serde_json::Value;

fn ringseq(args: &[&str], executor: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ringseq"));
    cmd.args(args).env_remove("RINGSEQ_EXECUTOR");
    if let Some(e) = executor {
        cmd.env("RINGSEQ_EXECUTOR", e);
    }
    cmd.output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("JSON report")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn check<'a>(report: &'a Value, name: &str) -> &'a Value {
    report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == name)
        .unwrap_or_else(|| panic!("no check {name}"))
}

#[test]
fn verify_seq_example_passes() {
    let out = ringseq(
        &[
            "verify", "--scheme", "seq", "--B", "1", "--L", "8", "--H", "8", "--Z", "2", "--A",
            "4", "--N", "2", "--seed", "42",
        ],
        None,
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let r = json(&out);
    assert_eq!(r["pass"], true);
    assert!(check(&r, "forward_max_abs_diff")["value"].as_f64().unwrap() <= 1e-9);
    assert_eq!(r["config"]["seed"], 42);
    assert_eq!(r["config"]["tol"], 1e-9);
}

#[test]
fn invalid_input_exits_2() {
    let out = ringseq(
        &["verify", "--scheme", "seq", "--L", "10", "--N", "4"],
        None,
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("L not divisible by N"),
        "{}",
        stderr(&out)
    );

    let out = ringseq(
        &[
            "verify", "--scheme", "tp", "--Z", "12", "--A", "2", "--L", "8", "--N", "8",
        ],
        None,
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("heads not divisible by N"),
        "{}",
        stderr(&out)
    );

    let out = ringseq(&["verify", "--H", "9"], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("H must equal Z*A"));

    for args in [
        &["cost", "--N", "4..1"][..],
        &["verify", "--scheme", "ring"],
        &["simulate", "--N", "1..4"],
        &["verify", "--N", "0"],
        &["gradcheck", "--scheme", "sparse"],
        &["verify", "--config", "/nonexistent/ringseq.json"],
        &["frobnicate"],
    ] {
        assert_eq!(ringseq(args, None).status.code(), Some(2), "{args:?}");
    }
    assert_eq!(ringseq(&["cost"], Some("parallel")).status.code(), Some(2));
}

#[test]
fn check_failure_exits_1() {
    let out = ringseq(&["verify", "--N", "4", "--tol", "0"], None);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&out)["pass"], false);
    assert!(stderr(&out).contains("forward_max_abs_diff"));
}

#[test]
fn help_exits_0() {
    let out = ringseq(&["--help"], None);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["verify", "gradcheck", "cost", "simulate"] {
        assert!(text.contains(cmd));
    }
}

#[test]
fn gradcheck_examples() {
    let base = [
        "gradcheck",
        "--B",
        "1",
        "--Z",
        "1",
        "--L",
        "8",
        "--A",
        "2",
        "--seed",
        "9",
    ];
    let out = ringseq(&[&base[..], &["--N", "4"]].concat(), None);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let r = json(&out);
    assert!(check(&r, "worst_rel_err")["value"].as_f64().unwrap() <= 1e-4);
    assert_eq!(r["config"]["tol"], 1e-4);

    let out = ringseq(&[&base[..], &["--N", "2", "--zero-grad"]].concat(), None);
    assert_eq!(out.status.code(), Some(0));
    let r = json(&out);
    assert_eq!(r["grad_max_abs"], 0.0);
    assert_eq!(check(&r, "worst_rel_err")["value"], 0.0);

    let out = ringseq(&[&base[..], &["--N", "1"]].concat(), None);
    let r = json(&out);
    assert!(check(&r, "oracle_max_abs_diff")["value"].as_f64().unwrap() <= 1e-12);

    let out = ringseq(
        &["gradcheck", "--Z", "1", "--A", "1", "--L", "40", "--N", "4"],
        None,
    );
    assert!(stderr(&out).contains("warning"));
}

#[test]
fn cost_sweep_bert_base() {
    let out = ringseq(
        &[
            "cost", "--H", "768", "--Z", "12", "--A", "64", "--B", "64", "--L", "512", "--N",
            "1..8", "--K", "256",
        ],
        None,
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let r = json(&out);
    let rows = r["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3 * 2 * 8);
    let select = |scheme: &str, block: &str| -> Vec<&Value> {
        rows.iter()
            .filter(|x| x["scheme"] == scheme && x["block"] == block)
            .collect()
    };
    for scheme in [
        "tensor-parallel",
        "sequence-parallel",
        "sparse-sequence-parallel",
    ] {
        for block in ["mlp", "attention"] {
            assert_eq!(select(scheme, block).len(), 8);
        }
    }
    let seq_mlp = select("sequence-parallel", "mlp");
    let mem: Vec<f64> = seq_mlp
        .iter()
        .map(|x| match &x["memory_elements"] {
            Value::Number(n) => n.as_f64().unwrap(),
            Value::String(s) => {
                let (p, q) = s.split_once('/').unwrap();
                p.parse::<f64>().unwrap() / q.parse::<f64>().unwrap()
            }
            _ => unreachable!(),
        })
        .collect();
    let const_term = 32.0 * 768.0 * 768.0;
    assert!(mem.windows(2).all(|w| w[1] < w[0]));
    assert!(mem.iter().all(|&m| m > const_term));
    for row in rows {
        if row["N"] == 1 && row["comm_total"] != Value::Null {
            assert_eq!(row["comm_total"], 0);
        }
    }
    for (tp, seq) in select("tensor-parallel", "attention")
        .iter()
        .zip(select("sequence-parallel", "attention"))
    {
        assert_eq!(tp["N"], seq["N"]);
        assert_eq!(tp["comm_total"], seq["comm_total"]);
    }
}

#[test]
fn cost_csv_columns() {
    let out = ringseq(
        &[
            "cost",
            "--format",
            "csv",
            "--scheme",
            "seq",
            "--block",
            "attention",
        ],
        None,
    );
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "scheme,block,B,L,H,A,Z,N,K,memory_elements,comm_fwd,comm_bwd,comm_total,crossover_BL,seq_memory_lower"
    );
    assert_eq!(lines.count(), 1);
}

#[test]
fn simulate_examples() {
    let out = ringseq(
        &[
            "simulate", "--scheme", "seq", "--B", "2", "--Z", "12", "--L", "512", "--A", "64",
            "--N", "4",
        ],
        None,
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let r = json(&out);
    assert_eq!(r["expected_elements_per_device"]["total"], 4_718_592);
    for d in r["ledger"].as_array().unwrap() {
        let total =
            d["ring_p2p_elements"].as_u64().unwrap() + d["allreduce_elements"].as_u64().unwrap();
        assert_eq!(total, 4_718_592);
        assert_eq!(d["total_bytes"], 8 * 4_718_592u64);
    }
    assert!(stderr(&out).contains("simulate:"));

    let out = ringseq(&["simulate", "--N", "1", "--format", "csv"], None);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(
        text,
        "device_id,ring_p2p_elements,allreduce_elements,total_bytes\n0,0,0,0\n"
    );

    let out = ringseq(
        &[
            "simulate", "--scheme", "sparse", "--L", "8", "--K", "4", "--N", "4",
        ],
        None,
    );
    assert_eq!(out.status.code(), Some(0));
    // (N−1) · 2 · B·Z·K·A with the default B = 1, Z = 2, A = 4
    for d in json(&out)["ledger"].as_array().unwrap() {
        assert_eq!(d["ring_p2p_elements"], 3 * 2 * 2 * 4 * 4);
    }

    let out = ringseq(
        &[
            "simulate", "--scheme", "tp", "--Z", "4", "--A", "2", "--N", "4",
        ],
        None,
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
}

#[test]
fn out_path_and_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(
        &cfg,
        r#"{"scheme": "sparse", "L": 16, "N": 4, "K": 3, "seed": 5, "format": "json"}"#,
    )
    .unwrap();
    let report = dir.path().join("report.json");
    let out = ringseq(
        &[
            "verify",
            "--config",
            cfg.to_str().unwrap(),
            "--N",
            "2",
            "--out",
            report.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(out.stdout.is_empty());
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["config"]["scheme"], "sparse");
    assert_eq!(r["config"]["L"], 16);
    assert_eq!(r["config"]["N"], 2);
    assert_eq!(r["config"]["K"], 3);
    assert_eq!(r["config"]["seed"], 5);

    std::fs::write(&cfg, r#"{"L": 16, "typo": 1}"#).unwrap();
    assert_eq!(
        ringseq(&["verify", "--config", cfg.to_str().unwrap()], None)
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn executors_give_identical_bytes() {
    for args in [
        &["verify", "--scheme", "seq", "--N", "4", "--seed", "3"][..],
        &["simulate", "--scheme", "tp", "--N", "2", "--format", "csv"],
        &["gradcheck", "--N", "2", "--L", "4", "--Z", "1", "--A", "2"],
        &["cost", "--N", "1..3"],
    ] {
        let a = ringseq(args, Some("sequential"));
        let b = ringseq(args, Some("concurrent"));
        let c = ringseq(args, None);
        assert_eq!(a.status.code(), Some(0), "{args:?}: {}", stderr(&a));
        assert_eq!(a.stdout, b.stdout, "{args:?}");
        assert_eq!(a.stdout, c.stdout, "{args:?}");
    }
}
