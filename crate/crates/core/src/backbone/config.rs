use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One stage of a branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    /// 3×3 convolution, stride 1, "same" zero padding.
    Conv { out_channels: usize, relu: bool },
    /// Ceil-mode max pooling; window and stride are `rows × cols`.
    MaxPool { rows: usize, cols: usize },
    /// Inverted dropout, active only during training.
    Dropout { rate: f64 },
}

/// Layer stack of one feature branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_height: usize,
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
    /// Number of leading convolutions whose tensors never change in training.
    pub frozen_convs: usize,
}

/// Shape of one convolution's parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvShape {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvShape {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// `[3, 3, C_in, C_out]`.
    pub fn weight_dims(&self) -> Vec<usize> {
        vec![3, 3, self.in_channels, self.out_channels]
    }
}

/// Convolution widths of the VGG16 feature stack.
pub const VGG16_WIDTHS: [usize; 13] = [64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512];

/// Dropout rate of the default stack.
pub const DEFAULT_DROPOUT: f64 = 0.2;

/// Leading convolutions frozen by default.
pub const DEFAULT_FROZEN: usize = 7;

/// Leading convolutions that come from ImageNet-pretrained VGG16.
pub const PRETRAINED_CONVS: usize = 10;

impl BackboneConfig {
    /// Truncated VGG16 producing `4 × W/8 × out_channels` from `128 × W × 3`.
    pub fn vgg16(out_channels: usize) -> Self {
        Self::vgg16_scaled(out_channels, 1, 128)
    }

    /// VGG16 layout with every hidden width divided by `width_divisor`.
    ///
    /// Three symmetric 2×2 pools follow the first three blocks and two
    /// height-only 2×1 pools follow the last two, so height shrinks by 32 and
    /// width by 8. Dropout follows each of the last three convolutions, and the
    /// final convolution is linear.
    pub fn vgg16_scaled(out_channels: usize, width_divisor: usize, input_height: usize) -> Self {
        let div = width_divisor.max(1);
        let mut layers = Vec::new();
        let conv = |c: usize| LayerSpec::Conv {
            out_channels: (c / div).max(1),
            relu: true,
        };
        let pool = |rows, cols| LayerSpec::MaxPool { rows, cols };
        let dropout = LayerSpec::Dropout {
            rate: DEFAULT_DROPOUT,
        };
        for (i, &w) in VGG16_WIDTHS.iter().enumerate() {
            let idx = i + 1;
            if idx == 13 {
                layers.push(LayerSpec::Conv {
                    out_channels,
                    relu: false,
                });
            } else {
                layers.push(conv(w));
            }
            if idx >= 11 {
                layers.push(dropout.clone());
            }
            match idx {
                2 | 4 | 7 => layers.push(pool(2, 2)),
                10 | 13 => layers.push(pool(2, 1)),
                _ => {}
            }
        }
        BackboneConfig {
            input_height,
            input_channels: 3,
            layers,
            frozen_convs: DEFAULT_FROZEN,
        }
    }

    /// Two convolutions around one symmetric pool; used for desk-scale runs.
    pub fn reduced(input_height: usize, hidden: usize, out_channels: usize) -> Self {
        BackboneConfig {
            input_height,
            input_channels: 3,
            layers: vec![
                LayerSpec::Conv {
                    out_channels: hidden,
                    relu: true,
                },
                LayerSpec::MaxPool { rows: 2, cols: 2 },
                LayerSpec::Conv {
                    out_channels,
                    relu: false,
                },
            ],
            frozen_convs: 0,
        }
    }

    pub fn with_frozen(mut self, frozen_convs: usize) -> Self {
        self.frozen_convs = frozen_convs;
        self
    }

    pub fn without_dropout(mut self) -> Self {
        self.layers.retain(|l| !matches!(l, LayerSpec::Dropout { .. }));
        self
    }

    pub fn conv_shapes(&self) -> Vec<ConvShape> {
        let mut c = self.input_channels;
        let mut out = Vec::new();
        for l in &self.layers {
            if let LayerSpec::Conv { out_channels, .. } = l {
                out.push(ConvShape {
                    name: format!("conv{}", out.len() + 1),
                    in_channels: c,
                    out_channels: *out_channels,
                });
                c = *out_channels;
            }
        }
        out
    }

    pub fn conv_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv { .. }))
            .count()
    }

    pub fn out_channels(&self) -> usize {
        self.conv_shapes()
            .last()
            .map_or(self.input_channels, |s| s.out_channels)
    }

    /// Output `(height, width, channels)` for an input of `height × width`.
    pub fn output_shape(&self, height: usize, width: usize) -> (usize, usize, usize) {
        let (mut h, mut w) = (height, width);
        for l in &self.layers {
            if let LayerSpec::MaxPool { rows, cols } = l {
                h = h.div_ceil(*rows);
                w = w.div_ceil(*cols);
            }
        }
        (h, w, self.out_channels())
    }

    /// Product of the width strides of all pools.
    pub fn width_stride(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerSpec::MaxPool { cols, .. } => *cols,
                _ => 1,
            })
            .product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_height == 0 || self.input_channels == 0 {
            return Err(Error::InvalidConfig(
                "backbone input height and channels must be positive".into(),
            ));
        }
        let convs = self.conv_count();
        if convs == 0 {
            return Err(Error::InvalidConfig("backbone needs at least one convolution".into()));
        }
        if self.frozen_convs > convs {
            return Err(Error::InvalidConfig(format!(
                "{} frozen convolutions requested but only {convs} exist",
                self.frozen_convs
            )));
        }
        for l in &self.layers {
            match l {
                LayerSpec::Conv { out_channels, .. } if *out_channels == 0 => {
                    return Err(Error::InvalidConfig("convolution with zero output channels".into()))
                }
                LayerSpec::MaxPool { rows, cols } if *rows == 0 || *cols == 0 => {
                    return Err(Error::InvalidConfig("pooling window must be positive".into()))
                }
                LayerSpec::Dropout { rate } if !(0.0..1.0).contains(rate) => {
                    return Err(Error::InvalidConfig(format!("dropout rate {rate} outside [0, 1)")))
                }
                _ => {}
            }
        }
        Ok(())
    }
}
