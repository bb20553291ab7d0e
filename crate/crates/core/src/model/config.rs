use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Total transformer blocks, split evenly between the prefix stack and
    /// the conditioning stack.
    pub n_layers: usize,
    pub width: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub diff_width: usize,
    pub diff_blocks: usize,
    /// Fourier channels per coordinate at the transformer input.
    pub n_fourier_coord: usize,
    pub fourier_bandwidth_coord: f64,
    /// Fourier channels per coordinate at the DiffMLP input.
    pub n_fourier_diff: usize,
    pub fourier_bandwidth_diff: f64,
    pub fourier_bandwidth_time: f64,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub init_std: f64,
}

impl ModelConfig {
    /// Small configuration that trains on a laptop CPU.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 4,
            width: 128,
            n_heads: 4,
            mlp_ratio: 4,
            diff_width: 256,
            diff_blocks: 3,
            n_fourier_coord: 256,
            // The paper's bandwidth of 20 makes coordinate features close to
            // a hash at this width; 1 trains several times faster.
            fourier_bandwidth_coord: 1.0,
            n_fourier_diff: 512,
            fourier_bandwidth_diff: 1.0,
            fourier_bandwidth_time: 1.0,
            vocab_size,
            max_positions: 64,
            init_std: 0.02,
        }
    }

    /// The 165M-parameter QM9 configuration.
    pub fn paper(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 12,
            width: 768,
            n_heads: 12,
            diff_width: 1536,
            diff_blocks: 6,
            fourier_bandwidth_coord: 20.0,
            fourier_bandwidth_diff: 20.0,
            max_positions: 128,
            ..Self::desk(vocab_size)
        }
    }

    /// Tiny configuration for gradient checks and unit tests.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 2,
            width: 8,
            n_heads: 2,
            mlp_ratio: 2,
            diff_width: 8,
            diff_blocks: 2,
            n_fourier_coord: 3,
            fourier_bandwidth_coord: 2.0,
            n_fourier_diff: 3,
            fourier_bandwidth_diff: 2.0,
            fourier_bandwidth_time: 1.0,
            vocab_size,
            max_positions: 16,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_layers == 0 || !self.n_layers.is_multiple_of(2) {
            return fail("n_layers must be even and positive");
        }
        if self.n_heads == 0 || !self.width.is_multiple_of(self.n_heads) {
            return fail("width must be divisible by n_heads");
        }
        if self.diff_width == 0 || self.diff_blocks == 0 || self.width == 0 {
            return fail("widths and block counts must be positive");
        }
        if self.vocab_size < 3 {
            return fail("vocabulary needs at least one element plus BOS and STOP");
        }
        if self.max_positions == 0 || self.mlp_ratio == 0 {
            return fail("max_positions and mlp_ratio must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.n_heads
    }

    pub fn blocks_per_stack(&self) -> usize {
        self.n_layers / 2
    }

    /// Parameter count implied by the configuration.
    pub fn param_count(&self) -> usize {
        let (w, v, dw) = (self.width, self.vocab_size, self.diff_width);
        let hidden = self.mlp_ratio * w;
        let embed = v * w + self.max_positions * w + 3 * w + 3 * self.n_fourier_coord * w;
        let block = 2 * w + 4 * w * w + 2 * self.head_dim() + 2 * w * hidden;
        let type_head = w * w + w * v;
        let diff_in = 3 * dw + 3 * self.n_fourier_diff * dw + w * dw;
        let diff_block = 3 * dw * dw + 2 * dw * dw;
        let diff_final = 2 * dw * dw + 3 * dw;
        embed
            + self.n_layers * block
            + type_head
            + diff_in
            + self.diff_blocks * diff_block
            + diff_final
    }
}
