use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of one attention layer and the size of the device ring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// `B`
    pub batch: usize,
    /// `L`, tokens per sequence.
    pub seq_len: usize,
    /// `H`
    pub hidden: usize,
    /// `A`, per-head dimension.
    pub head_dim: usize,
    /// `Z`
    pub heads: usize,
    /// `N`
    pub devices: usize,
}

impl AttentionConfig {
    /// Config with `H = Z * A`.
    pub fn new(
        batch: usize,
        seq_len: usize,
        heads: usize,
        head_dim: usize,
        devices: usize,
    ) -> Self {
        Self {
            batch,
            seq_len,
            hidden: heads * head_dim,
            head_dim,
            heads,
            devices,
        }
    }

    pub fn with_devices(self, devices: usize) -> Self {
        Self { devices, ..self }
    }

    /// Positivity and `H == Z * A`.
    pub fn validate_shape(&self) -> Result<()> {
        let fields = [
            ("B", self.batch),
            ("L", self.seq_len),
            ("H", self.hidden),
            ("A", self.head_dim),
            ("Z", self.heads),
            ("N", self.devices),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.hidden != self.heads * self.head_dim {
            return Err(Error::Config(format!(
                "H must equal Z*A (H = {}, Z*A = {})",
                self.hidden,
                self.heads * self.head_dim
            )));
        }
        Ok(())
    }

    /// Requirements for sequence parallelism: the shape checks plus `L % N == 0`.
    pub fn validate(&self) -> Result<()> {
        self.validate_shape()?;
        if !self.seq_len.is_multiple_of(self.devices) {
            return Err(Error::SequenceDivisibility {
                seq_len: self.seq_len,
                devices: self.devices,
            });
        }
        Ok(())
    }

    /// Requirements for head-split tensor parallelism: `Z % N == 0`.
    pub fn validate_tensor_parallel(&self) -> Result<()> {
        self.validate_shape()?;
        if !self.heads.is_multiple_of(self.devices) {
            return Err(Error::HeadDivisibility {
                heads: self.heads,
                devices: self.devices,
            });
        }
        Ok(())
    }

    /// `L / N`
    pub fn chunk_len(&self) -> usize {
        self.seq_len / self.devices
    }

    /// Elements in one device's per-head Q, K or V chunk: `B * Z * (L/N) * A`.
    pub fn chunk_elements(&self) -> usize {
        self.batch * self.heads * self.chunk_len() * self.head_dim
    }

    pub fn chunk_shape(&self) -> [usize; 4] {
        [self.batch, self.heads, self.chunk_len(), self.head_dim]
    }

    pub fn full_head_shape(&self) -> [usize; 4] {
        [self.batch, self.heads, self.seq_len, self.head_dim]
    }

    pub fn hidden_shape(&self) -> [usize; 3] {
        [self.batch, self.seq_len, self.hidden]
    }
}

/// Divisors of `x`, ascending.
pub fn divisors(x: usize) -> Vec<usize> {
    (1..=x).filter(|d| x.is_multiple_of(*d)).collect()
}
