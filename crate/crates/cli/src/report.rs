use ringseq::cost::{rational_to_json, rational_to_string};
use ringseq::{CommLedger, Rational};
use serde_json::{Map, Value};

use crate::args::Format;
use crate::CliError;

/// One pass/fail line of a report.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: Value,
    pub limit: Value,
    pub pass: bool,
}

impl Check {
    /// Passes when `value <= limit`; NaN fails.
    pub fn at_most(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value: float(value),
            limit: float(limit),
            pass: value <= limit,
        }
    }

    /// Passes when the exact delta is zero.
    pub fn exact(name: impl Into<String>, delta: Rational) -> Self {
        Self {
            name: name.into(),
            value: rational_to_json(&delta),
            limit: Value::from(0),
            pass: delta == Rational::from_integer(0),
        }
    }

    pub fn none(name: impl Into<String>, count: usize) -> Self {
        Self {
            name: name.into(),
            value: Value::from(count),
            limit: Value::from(0),
            pass: count == 0,
        }
    }

    pub fn summary(&self) -> String {
        format!(
            "{} = {} (limit {})",
            self.name,
            cell(&self.value),
            cell(&self.limit)
        )
    }
}

/// JSON has no NaN or infinity; those become strings.
pub fn float(x: f64) -> Value {
    serde_json::Number::from_f64(x).map_or_else(|| Value::String(x.to_string()), Value::Number)
}

fn cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

/// Largest per-device gap between the ledger total and `expected`.
pub fn ledger_delta(ledger: &CommLedger, expected: Rational) -> Rational {
    (0..ledger.devices().len())
        .map(|i| {
            let d = ledger.total(i) - expected;
            if d < Rational::from_integer(0) {
                -d
            } else {
                d
            }
        })
        .max()
        .unwrap_or_default()
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    /// Top-level JSON fields, in insertion order.
    pub fields: Vec<(String, Value)>,
    pub checks: Vec<Check>,
    /// CSV form; when empty the checks are written instead.
    pub csv_header: Vec<String>,
    pub csv_rows: Vec<Vec<String>>,
}

impl Report {
    pub fn new(command: &str) -> Self {
        let mut r = Report::default();
        r.field("command", command);
        r
    }

    pub fn field(&mut self, key: &str, value: impl Into<Value>) {
        self.fields.push((key.to_string(), value.into()));
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }

    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        for (k, v) in &self.fields {
            m.insert(k.clone(), v.clone());
        }
        if !self.checks.is_empty() {
            let checks = self
                .checks
                .iter()
                .map(|c| {
                    serde_json::json!({
                        "name": c.name,
                        "value": c.value,
                        "limit": c.limit,
                        "pass": c.pass,
                    })
                })
                .collect();
            m.insert("checks".into(), Value::Array(checks));
            m.insert("pass".into(), Value::Bool(self.passed()));
        }
        Value::Object(m)
    }

    pub fn render(&self, format: Format) -> Result<String, CliError> {
        match format {
            Format::Json => {
                let mut s = serde_json::to_string_pretty(&self.to_json())
                    .map_err(|e| CliError::Failed(format!("serialising report: {e}")))?;
                s.push('\n');
                Ok(s)
            }
            Format::Csv => self.render_csv(),
        }
    }

    fn render_csv(&self) -> Result<String, CliError> {
        let io = |e: csv::Error| CliError::Failed(format!("writing CSV: {e}"));
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.csv_header.is_empty() {
            w.write_record(["check", "value", "limit", "pass"])
                .map_err(io)?;
            for c in &self.checks {
                w.write_record([
                    c.name.clone(),
                    cell(&c.value),
                    cell(&c.limit),
                    c.pass.to_string(),
                ])
                .map_err(io)?;
            }
        } else {
            w.write_record(&self.csv_header).map_err(io)?;
            for row in &self.csv_rows {
                w.write_record(row).map_err(io)?;
            }
        }
        let bytes = w
            .into_inner()
            .map_err(|e| CliError::Failed(format!("writing CSV: {e}")))?;
        String::from_utf8(bytes).map_err(|e| CliError::Failed(e.to_string()))
    }
}

/// Ledger rows for CSV: `device_id, ring_p2p_elements, allreduce_elements, total_bytes`.
pub fn ledger_csv(report: &mut Report, ledger: &CommLedger) {
    report.csv_header = [
        "device_id",
        "ring_p2p_elements",
        "allreduce_elements",
        "total_bytes",
    ]
    .map(String::from)
    .to_vec();
    report.csv_rows = (0..ledger.devices().len())
        .map(|i| {
            vec![
                i.to_string(),
                rational_to_string(&ledger.ring_p2p(i)),
                rational_to_string(&ledger.allreduce(i)),
                rational_to_string(&ledger.total_bytes(i)),
            ]
        })
        .collect();
}
