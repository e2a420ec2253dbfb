use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{ELECTRODES, N_BANDS};

/// Architecture of the feature generator. Defaults are the full-size
/// model; [`GeneratorConfig::desk`] is a reduced variant for CPU experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// `[bands, electrodes, window seconds]`.
    pub input_shape: [usize; 3],
    pub c1_filters: Vec<usize>,
    pub c2_filters: Vec<usize>,
    pub kernel_size: usize,
    pub conv_padding: usize,
    /// Dropout after the C1 and C2 blocks.
    pub dropout: [f64; 2],
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Hidden widths of each encoder block's feed-forward network.
    pub mlp_units: Vec<usize>,
    pub positional_embedding: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            input_shape: [N_BANDS, ELECTRODES, 9],
            c1_filters: vec![64, 64, 128],
            c2_filters: vec![128, 256, 512],
            kernel_size: 3,
            conv_padding: 1,
            dropout: [0.30, 0.20],
            patch_size: 3,
            embed_dim: 64,
            depth: 8,
            heads: 8,
            mlp_units: vec![2048, 1024],
            positional_embedding: true,
        }
    }
}

impl GeneratorConfig {
    /// Reduced model for desk-scale training: same topology, narrower
    /// layers, two encoder blocks.
    pub fn desk() -> Self {
        Self {
            c1_filters: vec![8, 8, 16],
            c2_filters: vec![16, 32, 32],
            embed_dim: 32,
            depth: 2,
            heads: 4,
            mlp_units: vec![64, 64],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.input_shape.contains(&0) {
            return err(format!("input shape {:?} has a zero dimension", self.input_shape));
        }
        if self.c1_filters.is_empty() || self.c2_filters.is_empty() || self.c1_filters.iter().chain(&self.c2_filters).any(|&f| f == 0) {
            return err("each conv block needs at least one layer with ≥ 1 filter".into());
        }
        if self.kernel_size == 0 || self.patch_size == 0 || self.embed_dim == 0 {
            return err("kernel size, patch size and embed dim must be positive".into());
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return err(format!("embed dim {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.mlp_units.contains(&0) {
            return err("feed-forward widths must be positive".into());
        }
        if self.dropout.iter().any(|r| !(0.0..1.0).contains(r)) {
            return err(format!("dropout rates {:?} outside [0, 1)", self.dropout));
        }
        self.cnn_output_shape().map(|_| ())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// `[C, H, W]` after both conv blocks.
    pub fn cnn_output_shape(&self) -> Result<[usize; 3]> {
        let conv = |d: usize| -> Result<usize> {
            (d + 2 * self.conv_padding)
                .checked_sub(self.kernel_size)
                .map(|v| v + 1)
                .ok_or_else(|| Error::Config(format!("dimension {d} too small for kernel {}", self.kernel_size)))
        };
        let [_, mut h, mut w] = self.input_shape;
        for filters in [&self.c1_filters, &self.c2_filters] {
            for _ in filters {
                h = conv(h)?;
                w = conv(w)?;
            }
            if h < 2 || w < 2 {
                return Err(Error::Config(format!("spatial dims {h}x{w} too small for 2x2 pooling")));
            }
            h /= 2;
            w /= 2;
        }
        Ok([*self.c2_filters.last().expect("validated non-empty"), h, w])
    }

    pub fn n_patches(&self) -> usize {
        let [_, h, w] = self.cnn_output_shape().expect("validated config");
        h.div_ceil(self.patch_size) * w.div_ceil(self.patch_size)
    }

    pub fn patch_len(&self) -> usize {
        let [c, _, _] = self.cnn_output_shape().expect("validated config");
        self.patch_size * self.patch_size * c
    }
}
