use crate::ModelError;
use pulsebp_core::features::{N_FEATURES, SEQ_LEN};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub l_in: usize,
    pub d_model: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub n_blocks: usize,
    pub d_ff: usize,
    pub dropout_p: f64,
    pub pool_factor: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            l_in: N_FEATURES,
            d_model: 128,
            t: SEQ_LEN,
            n_heads: 14,
            d_head: 10,
            n_blocks: 1,
            d_ff: 256,
            dropout_p: 0.15,
            pool_factor: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [self.l_in, self.d_model, self.t, self.n_heads, self.d_head, self.n_blocks, self.d_ff, self.pool_factor];
        if dims.contains(&0) {
            return Err(ModelError::InvalidConfig("all dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(ModelError::InvalidConfig(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        if self.d_model % 2 != 0 {
            return Err(ModelError::OddDimension(self.d_model));
        }
        if self.t % self.pool_factor != 0 {
            return Err(ModelError::IndivisibleLength { len: self.t, factor: self.pool_factor });
        }
        Ok(())
    }

    pub fn pooled_len(&self) -> usize {
        self.t / self.pool_factor
    }

    pub fn keep_prob(&self) -> f64 {
        1.0 - self.dropout_p
    }
}
