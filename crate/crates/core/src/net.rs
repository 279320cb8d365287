//! Layer-level description of the convolutional detectors.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::conv_out_extent;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Hard clip to `[0, 1]`.
    Clip01,
    /// No activation (detection head logits).
    Linear,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub activation: Activation,
    /// Detection-head convolution.
    #[serde(default)]
    pub head: bool,
    /// Always kept at full precision, independent of the head/first-layer rules.
    #[serde(default)]
    pub exempt: bool,
}

impl LayerSpec {
    pub fn conv(name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        Self {
            name: name.to_string(),
            in_channels: c_in,
            out_channels: c_out,
            kernel,
            stride,
            pad: kernel / 2,
            activation: Activation::Clip01,
            head: false,
            exempt: false,
        }
    }

    pub fn head(name: &str, c_in: usize, c_out: usize) -> Self {
        Self {
            activation: Activation::Linear,
            head: true,
            ..Self::conv(name, c_in, c_out, 1, 1)
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    /// Number of kernel weights, `C_in·C_out·K·K`.
    pub fn weight_count(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel * self.kernel
    }
}

/// Ordered convolution stack shared by teacher and student.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub input_size: usize,
    /// Precision of the input images as seen by the first layer's cost.
    pub input_bits: u8,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    /// Layer indices whose outputs feed the distillation gate.
    pub scale_taps: Vec<usize>,
}

/// Per-cell head channels: objectness, four box offsets, then class logits.
pub const HEAD_BOX_CHANNELS: usize = 5;

impl NetworkSpec {
    /// The desk-scale single-scale detector: a seven-layer backbone on
    /// 32×32 RGB input with an 8×8 dense head and three distillation taps.
    pub fn tiny_detector(num_classes: usize) -> Self {
        let layers = vec![
            LayerSpec::conv("conv0", 3, 8, 3, 1),
            LayerSpec::conv("conv1", 8, 16, 3, 2),
            LayerSpec::conv("conv2", 16, 16, 3, 1),
            LayerSpec::conv("conv3", 16, 24, 3, 2),
            LayerSpec::conv("conv4", 24, 24, 3, 1),
            LayerSpec::conv("conv5", 24, 24, 3, 1),
            LayerSpec::head("head", 24, HEAD_BOX_CHANNELS + num_classes),
        ];
        Self {
            input_channels: 3,
            input_size: 32,
            input_bits: 8,
            num_classes,
            layers,
            scale_taps: vec![1, 3, 5],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return invalid("network has no layers");
        }
        if self.input_bits == 0 || self.input_bits > 32 {
            return invalid(format!("input_bits {} outside [1, 32]", self.input_bits));
        }
        let mut channels = self.input_channels;
        for layer in &self.layers {
            if layer.in_channels != channels {
                return invalid(format!(
                    "layer {} expects {} input channels but receives {channels}",
                    layer.name, layer.in_channels
                ));
            }
            if layer.out_channels == 0 || layer.kernel == 0 || layer.stride == 0 {
                return invalid(format!("layer {} has a zero extent", layer.name));
            }
            channels = layer.out_channels;
        }
        self.output_extents()?;
        let mut seen = Vec::new();
        for &t in &self.scale_taps {
            if t >= self.layers.len() || self.layers[t].head {
                return invalid(format!("scale tap {t} is not a backbone layer"));
            }
            if seen.contains(&t) {
                return invalid(format!("scale tap {t} listed twice"));
            }
            seen.push(t);
        }
        let last = self.layers.last().expect("non-empty");
        if !last.head {
            return invalid("last layer must be a detection head");
        }
        if last.out_channels != HEAD_BOX_CHANNELS + self.num_classes {
            return invalid(format!(
                "head emits {} channels, expected {}",
                last.out_channels,
                HEAD_BOX_CHANNELS + self.num_classes
            ));
        }
        Ok(())
    }

    /// Spatial size `(h, w)` of every layer's output.
    pub fn output_extents(&self) -> Result<Vec<(usize, usize)>> {
        let mut size = self.input_size;
        self.layers
            .iter()
            .map(|l| {
                size = conv_out_extent(size, l.kernel, l.stride, l.pad)?;
                Ok((size, size))
            })
            .collect()
    }

    pub fn grid_size(&self) -> Result<usize> {
        Ok(self.output_extents()?.last().expect("non-empty").0)
    }

    /// Which layers stay at full precision: explicit exemptions, every
    /// detection head and, optionally, the first convolution.
    pub fn exempt_mask(&self, exempt_first_layer: bool) -> Vec<bool> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.exempt || l.head || (i == 0 && exempt_first_layer))
            .collect()
    }

    pub fn tap_channels(&self) -> Vec<usize> {
        self.scale_taps
            .iter()
            .map(|&t| self.layers[t].out_channels)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_detector_is_valid() {
        let spec = NetworkSpec::tiny_detector(3);
        spec.validate().unwrap();
        assert_eq!(spec.grid_size().unwrap(), 8);
        assert_eq!(spec.tap_channels(), vec![16, 24, 24]);
        let mask = spec.exempt_mask(true);
        assert!(mask[0] && mask[6]);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 2);
        assert_eq!(spec.exempt_mask(false).iter().filter(|&&m| m).count(), 1);
    }

    #[test]
    fn rejects_channel_gap() {
        let mut spec = NetworkSpec::tiny_detector(2);
        spec.layers[2].in_channels = 4;
        assert!(spec.validate().is_err());
        let mut spec = NetworkSpec::tiny_detector(2);
        spec.scale_taps = vec![6];
        assert!(spec.validate().is_err());
    }
}
