use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// What a blocked device was doing when the executor declared a deadlock.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WaitState {
    pub device: usize,
    /// Peer the device is blocked on, `None` if it already finished.
    pub waiting_on: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeadlockReport(pub Vec<WaitState>);

impl fmt::Display for DeadlockReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for w in &self.0 {
            if !first {
                f.write_str(", ")?;
            }
            first = false;
            match w.waiting_on {
                Some(peer) => write!(f, "device {} waiting on device {}", w.device, peer)?,
                None => write!(f, "device {} finished", w.device)?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("L not divisible by N (L = {seq_len}, N = {devices})")]
    SequenceDivisibility { seq_len: usize, devices: usize },

    #[error("number of attention heads not divisible by N (Z = {heads}, N = {devices})")]
    HeadDivisibility { heads: usize, devices: usize },

    #[error("protocol error on device {device}: {detail}")]
    Protocol { device: usize, detail: String },

    #[error("deadlock: {0}")]
    Deadlock(DeadlockReport),

    #[error("state error: {0}")]
    State(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
