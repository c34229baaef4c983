use serde::{Deserialize, Serialize};

use crate::data::vocab::vocab_size;
use crate::error::{Error, Result};
use crate::lora::LoraConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub patch: usize,
    pub image_edge: usize,
    pub cond_edge: usize,
    pub vocab: usize,
    pub max_m: usize,
    pub m_prime: usize,
    /// Feed-forward hidden width as a multiple of `d`.
    pub ffn_mult: usize,
    pub lora: LoraConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            layers: 4,
            patch: 4,
            image_edge: 32,
            cond_edge: 16,
            vocab: vocab_size(),
            max_m: 16,
            m_prime: 4,
            ffn_mult: 2,
            lora: LoraConfig::default(),
        }
    }
}

impl ModelConfig {
    /// 2 layers, width 8, 8×8 targets and 4×4 conditions.
    pub fn tiny() -> Self {
        Self {
            d: 8,
            heads: 2,
            layers: 2,
            patch: 2,
            image_edge: 8,
            cond_edge: 4,
            lora: LoraConfig {
                subject_rank: 2,
                image_rank: 1,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("width {} not divisible by {} heads", self.d, self.heads));
        }
        if self.patch == 0 || !self.image_edge.is_multiple_of(self.patch) || !self.cond_edge.is_multiple_of(self.patch) {
            return bad(format!(
                "patch {} must divide image edge {} and condition edge {}",
                self.patch, self.image_edge, self.cond_edge
            ));
        }
        if self.layers == 0 || self.ffn_mult == 0 || self.vocab == 0 {
            return bad("layers, ffn_mult and vocab must be positive".into());
        }
        self.lora.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn grid(&self) -> usize {
        self.image_edge / self.patch
    }

    pub fn cond_grid(&self) -> usize {
        self.cond_edge / self.patch
    }

    /// Noise tokens, `(image_edge/patch)²`.
    pub fn n(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Image tokens per condition, `(cond_edge/patch)²`.
    pub fn n_prime(&self) -> usize {
        self.cond_grid() * self.cond_grid()
    }

    /// Raw values per patch token.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn ffn_width(&self) -> usize {
        self.d * self.ffn_mult
    }
}
