use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrad::kernels::{window_out_extent, DEFAULT_NEGATIVE_SLOPE};

/// How a convolutional block halves the spatial extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// 2x2x2 max pooling with stride 2 after the sub-blocks.
    MaxPool,
    /// Stride 2 on the last convolution of the block.
    StridedConv,
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maxpool" | "max_pool" => Ok(Reduction::MaxPool),
            "strided_conv" | "strided" => Ok(Reduction::StridedConv),
            other => Err(Error::InvalidArgument(format!("unknown reduction {other:?}"))),
        }
    }
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Reduction::MaxPool => "maxpool",
            Reduction::StridedConv => "strided_conv",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    /// conv(k=3, pad=1) -> batch norm -> leaky ReLU, repeated 1..=3 times.
    pub sub_blocks: usize,
    pub out_channels: usize,
    pub reduction: Reduction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    /// (D, H, W) of the single-channel input.
    pub input_shape: [usize; 3],
    pub conv_blocks: Vec<ConvBlockSpec>,
    pub n_fc_layers: usize,
    /// Width of hidden fully-connected layers when `n_fc_layers > 1`.
    pub fc_hidden: usize,
    pub dropout_rate: f64,
    pub negative_slope: f64,
    pub n_classes: usize,
}

pub const KERNEL: usize = 3;
pub const PADDING: usize = 1;
pub const MAX_CHANNELS_FACTOR: usize = 16;

impl ArchitectureSpec {
    /// `n_blocks` max-pool blocks of one sub-block each; channels double per block
    /// from `first_filters`, capped at `16 * first_filters`.
    pub fn with_blocks(input_shape: [usize; 3], n_blocks: usize, first_filters: usize) -> Self {
        let conv_blocks = (0..n_blocks)
            .map(|i| ConvBlockSpec {
                sub_blocks: 1,
                out_channels: (first_filters << i.min(31)).min(first_filters * MAX_CHANNELS_FACTOR),
                reduction: Reduction::MaxPool,
            })
            .collect();
        Self {
            input_shape,
            conv_blocks,
            n_fc_layers: 1,
            fc_hidden: 64,
            dropout_rate: 0.5,
            negative_slope: DEFAULT_NEGATIVE_SLOPE,
            n_classes: 2,
        }
    }

    /// Seven blocks starting at 8 filters: 8, 16, 32, 64, 128, 128, 128.
    pub fn seven_block(input_shape: [usize; 3]) -> Self {
        Self::with_blocks(input_shape, 7, 8)
    }

    /// Spatial extent after each block, validating the whole spec.
    pub fn block_extents(&self) -> Result<Vec<[usize; 3]>> {
        if self.conv_blocks.is_empty() {
            return Err(Error::Architecture("at least one convolutional block is required".into()));
        }
        if self.n_classes != 2 {
            return Err(Error::Architecture(format!("{} classes requested; only 2 are supported", self.n_classes)));
        }
        if self.n_fc_layers == 0 || (self.n_fc_layers > 1 && self.fc_hidden == 0) {
            return Err(Error::Architecture("fully-connected layer configuration is empty".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Architecture(format!("dropout rate {} not in [0, 1)", self.dropout_rate)));
        }
        let mut extent = self.input_shape;
        if extent.iter().any(|&e| e == 0) {
            return Err(Error::Architecture(format!("input shape {:?} has an empty axis", extent)));
        }
        let mut out = Vec::with_capacity(self.conv_blocks.len());
        for (b, block) in self.conv_blocks.iter().enumerate() {
            if !(1..=3).contains(&block.sub_blocks) || block.out_channels == 0 {
                return Err(Error::Architecture(format!(
                    "block {b}: {} sub-blocks / {} channels",
                    block.sub_blocks, block.out_channels
                )));
            }
            for a in 0..3 {
                let next = match block.reduction {
                    Reduction::MaxPool => window_out_extent(extent[a], 2, 2, 0),
                    Reduction::StridedConv => window_out_extent(extent[a], KERNEL, 2, PADDING),
                };
                extent[a] = match next {
                    Some(e) if e >= 1 && extent[a] >= 2 => e,
                    _ => {
                        return Err(Error::Architecture(format!(
                            "block {b} reduces axis {a} of {:?} below 1 voxel",
                            self.input_shape
                        )))
                    }
                };
            }
            out.push(extent);
        }
        Ok(out)
    }

    pub fn output_extent(&self) -> Result<[usize; 3]> {
        Ok(*self.block_extents()?.last().expect("non-empty"))
    }

    /// Length of the flattened (C, D, H, W) feature vector entering the first FC layer.
    pub fn flat_features(&self) -> Result<usize> {
        let e = self.output_extent()?;
        let c = self.conv_blocks.last().expect("non-empty").out_channels;
        Ok(c * e.iter().product::<usize>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seven_blocks_on_24_cubed_fail() {
        let spec = ArchitectureSpec::seven_block([24, 24, 24]);
        assert!(matches!(spec.block_extents(), Err(Error::Architecture(_))));
    }

    #[test]
    fn three_blocks_on_24_cubed_end_at_3() {
        let spec = ArchitectureSpec::with_blocks([24, 24, 24], 3, 8);
        assert_eq!(spec.block_extents().unwrap(), vec![[12; 3], [6; 3], [3; 3]]);
        assert_eq!(spec.flat_features().unwrap(), 32 * 27);
    }

    #[test]
    fn default_channel_progression() {
        let spec = ArchitectureSpec::seven_block([121, 145, 121]);
        let ch: Vec<_> = spec.conv_blocks.iter().map(|b| b.out_channels).collect();
        assert_eq!(ch, vec![8, 16, 32, 64, 128, 128, 128]);
        // floor halving takes 121 to zero at the seventh block: 60, 30, 15, 7, 3, 1, 0
        assert!(spec.output_extent().is_err());
        let six = ArchitectureSpec::with_blocks([121, 145, 121], 6, 8);
        assert_eq!(six.output_extent().unwrap(), [1, 2, 1]);
    }

    #[test]
    fn strided_conv_rounds_odd_extents_up() {
        let mut spec = ArchitectureSpec::with_blocks([7, 8, 9], 1, 4);
        spec.conv_blocks[0].reduction = Reduction::StridedConv;
        assert_eq!(spec.output_extent().unwrap(), [4, 4, 5]);
    }
}
