// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Full-size channel plan C0..C13.
pub const FULL_CHANNELS: [usize; 14] = [5, 24, 32, 48, 96, 192, 320, 720, 1280, 1744, 842, 448, 192, 64];

/// Per-channel standardisation of (x, y, z, rem, r), measured on the
/// SemanticKITTI training split.
pub const INPUT_MEAN: [f64; 5] = [10.88, 0.23, -1.04, 0.21, 12.12];
pub const INPUT_STD: [f64; 5] = [11.47, 6.91, 0.86, 0.16, 12.32];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kernel: usize,
    pub dilation: usize,
}

impl KernelSpec {
    pub const fn new(kernel: usize, dilation: usize) -> Self {
        KernelSpec { kernel, dilation }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Max,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderStage {
    /// Number of convolution layers in the block.
    pub depth: usize,
    /// Base layer width `g`.
    pub growth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// C0..C13. C0 is the input width (5); C3 is the context module output;
    /// C4..C8 are the encoder stages; C9 is the bottleneck; C10..C13 are
    /// the decoder stages Dec4..Dec1.
    pub channels: [usize; 14],
    pub class_count: usize,
    pub dropout: f64,
    pub use_icm: bool,
    pub use_cam: bool,
    pub use_mcspn: bool,
    pub icm_branches: Vec<KernelSpec>,
    /// Convolutions of the decoder residual ladder, in order.
    pub decoder_ladder: Vec<KernelSpec>,
    pub encoder: [EncoderStage; 5],
    pub growth_multiplier: f64,
    pub cam_pool: usize,
    pub cam_reduction: usize,
    pub mcspn_fusion: Fusion,
    pub mcspn_sweeps: usize,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    pub input_mean: [f64; 5],
    pub input_std: [f64; 5],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: FULL_CHANNELS,
            class_count: 20,
            dropout: 0.2,
            use_icm: true,
            use_cam: true,
            use_mcspn: true,
            icm_branches: vec![KernelSpec::new(3, 1), KernelSpec::new(5, 2), KernelSpec::new(7, 4)],
            decoder_ladder: vec![KernelSpec::new(3, 1), KernelSpec::new(5, 1)],
            encoder: [
                EncoderStage { depth: 4, growth: 16 },
                EncoderStage { depth: 4, growth: 24 },
                EncoderStage { depth: 6, growth: 32 },
                EncoderStage { depth: 6, growth: 48 },
                EncoderStage { depth: 8, growth: 64 },
            ],
            growth_multiplier: 1.6,
            cam_pool: 7,
            cam_reduction: 4,
            mcspn_fusion: Fusion::Max,
            mcspn_sweeps: 1,
            leaky_slope: 0.01,
            bn_momentum: 0.9,
            input_mean: INPUT_MEAN,
            input_std: INPUT_STD,
        }
    }
}

impl ModelConfig {
    /// Full-size channels divided by `divisor` (rounded, at least 2), with
    /// growth rates scaled alike.
    pub fn scaled(divisor: usize, class_count: usize) -> Self {
        let base = ModelConfig::default();
        let div = |c: usize| ((c as f64 / divisor as f64).round() as usize).max(2);
        let mut channels = base.channels.map(div);
        channels[0] = 5;
        let encoder = base.encoder.map(|s| EncoderStage {
            depth: s.depth,
            growth: div(s.growth),
        });
        ModelConfig {
            channels,
            class_count,
            encoder,
            ..base
        }
    }

    /// Channels ÷8, shallower blocks.
    pub fn toy(class_count: usize) -> Self {
        let mut cfg = Self::scaled(8, class_count);
        for (s, d) in cfg.encoder.iter_mut().zip([2, 2, 3, 3, 4]) {
            s.depth = d;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels[0] != 5 {
            return bad(format!("C0 must be 5 (x, y, z, rem, r), got {}", self.channels[0]));
        }
        if self.channels.contains(&0) {
            return bad("all channel counts must be >= 1".into());
        }
        if self.class_count < 2 {
            return bad(format!("class_count {} < 2", self.class_count));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if self.icm_branches.is_empty() || self.decoder_ladder.is_empty() {
            return bad("context branches and decoder ladder must be non-empty".into());
        }
        let kernels = self.icm_branches.iter().chain(&self.decoder_ladder);
        for k in kernels {
            if k.kernel % 2 == 0 || k.dilation == 0 {
                return bad(format!("kernel {k:?} must be odd with dilation >= 1"));
            }
        }
        if self.encoder.iter().any(|s| s.depth == 0 || s.growth == 0) {
            return bad("encoder depths and growth rates must be >= 1".into());
        }
        if !(self.growth_multiplier > 0.0) {
            return bad("growth multiplier must be positive".into());
        }
        if self.cam_pool.is_multiple_of(2) || self.cam_reduction == 0 {
            return bad("CAM pool must be odd and reduction >= 1".into());
        }
        if self.mcspn_sweeps == 0 {
            return bad("mcspn_sweeps must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_momentum must lie in [0, 1]".into());
        }
        if self.input_std.iter().any(|s| !(*s > 0.0)) {
            return bad("input_std entries must be positive".into());
        }
        Ok(())
    }
}
