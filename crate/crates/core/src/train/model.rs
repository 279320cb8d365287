//! Detector parameters and the plan-driven forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cost::{BBox, Detection};
use crate::error::{invalid, Result};
use crate::net::{Activation, NetworkSpec, HEAD_BOX_CHANNELS};
use crate::quant::{tanh_argmax, BitWidth};
use crate::tensor::{Graph, Rounding, Tensor, Var};

/// Convolution weights and biases, one entry per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl ModelParams {
    /// Uniform fan-in initialization; the head starts with a low objectness prior
    /// and mid-sized boxes.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = spec.grid_size()? as f32;
        let mut weights = Vec::with_capacity(spec.layers.len());
        let mut biases = Vec::with_capacity(spec.layers.len());
        for l in &spec.layers {
            let fan_in = (l.in_channels * l.kernel * l.kernel) as f32;
            let bound = if l.head { 1.0 / fan_in.sqrt() } else { (6.0 / fan_in).sqrt() };
            weights.push(Tensor::from_fn(&l.weight_shape(), |_| rng.random_range(-bound..bound)));
            let mut b = Tensor::zeros(&[l.out_channels]);
            if l.head {
                let d = b.data_mut();
                d[0] = -(grid * grid - 1.0).ln();
                d[1] = 0.5;
                d[2] = 0.5;
                d[3] = 2.0;
                d[4] = 2.0;
            }
            biases.push(b);
        }
        Ok(Self { weights, biases })
    }

    pub fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        if self.weights.len() != spec.layers.len() || self.biases.len() != spec.layers.len() {
            return invalid("parameter count does not match the network");
        }
        for ((l, w), b) in spec.layers.iter().zip(&self.weights).zip(&self.biases) {
            if w.shape() != l.weight_shape() || b.shape() != [l.out_channels] {
                return invalid(format!("parameter shapes of layer {} do not match", l.name));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().chain(&self.biases).all(Tensor::all_finite)
    }

    /// Tensors in storage order, named `<layer>.weight` / `<layer>.bias`.
    pub fn named(&self, spec: &NetworkSpec) -> Vec<(String, &Tensor)> {
        spec.layers
            .iter()
            .zip(self.weights.iter().zip(&self.biases))
            .flat_map(|(l, (w, b))| [(format!("{}.weight", l.name), w), (format!("{}.bias", l.name), b)])
            .collect()
    }
}

/// Graph handles of one model's parameters.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl ParamVars {
    pub fn trainable(g: &mut Graph, p: &ModelParams) -> Self {
        Self {
            weights: p.weights.iter().map(|t| g.param(t.clone())).collect(),
            biases: p.biases.iter().map(|t| g.param(t.clone())).collect(),
        }
    }

    pub fn frozen(g: &mut Graph, p: &ModelParams) -> Self {
        Self {
            weights: p.weights.iter().map(|t| g.constant(t.clone())).collect(),
            biases: p.biases.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOut {
    /// `[N, 5 + K, G, G]` head output.
    pub head: Var,
    /// Outputs of the distillation tap layers, in tap order.
    pub taps: Vec<Var>,
}

/// Weight tensor fed to the convolution. Quantized weights are rescaled by the
/// layer's `max|tanh w|` (held constant) so their magnitude tracks the latent
/// weights; the detector has no normalization layers to absorb the `[-1, 1]` range.
pub fn forward_weight(g: &mut Graph, w: Var, bits: BitWidth) -> Result<Var> {
    match bits {
        BitWidth::Full => Ok(w),
        BitWidth::Bits(b) => {
            let (_, scale) = tanh_argmax(g.value(w).data());
            let q = g.quantize_weights(w, Rounding::Grid(b))?;
            if scale == 0.0 {
                return Ok(q);
            }
            Ok(g.scale(q, f64::from(scale)))
        }
    }
}

/// Records the forward pass. `bits[i]` sets layer `i`'s weight and output
/// activation precision; full-precision layers use their weights directly.
pub fn forward_graph(g: &mut Graph, spec: &NetworkSpec, vars: &ParamVars, bits: &[BitWidth], input: Var) -> Result<ForwardOut> {
    if bits.len() != spec.layers.len() {
        return invalid("one bit width per layer is required");
    }
    let mut x = input;
    let mut taps = Vec::with_capacity(spec.scale_taps.len());
    for (i, l) in spec.layers.iter().enumerate() {
        let w = forward_weight(g, vars.weights[i], bits[i])?;
        x = g.conv2d(x, w, l.stride, l.pad)?;
        x = g.add_bias(x, vars.biases[i])?;
        x = match (l.activation, bits[i]) {
            (Activation::Linear, _) => x,
            (Activation::Clip01, BitWidth::Full) => g.clamp01(x),
            (Activation::Clip01, BitWidth::Bits(b)) => g.quantize_activations(x, Rounding::Grid(b))?,
        };
        if spec.scale_taps.contains(&i) {
            taps.push(x);
        }
    }
    // Taps in `scale_taps` order, not layer order.
    let order: Vec<usize> = {
        let mut sorted = spec.scale_taps.clone();
        sorted.sort_unstable();
        spec.scale_taps
            .iter()
            .map(|t| sorted.iter().position(|s| s == t).expect("tap present"))
            .collect()
    };
    let taps = order.into_iter().map(|k| taps[k]).collect();
    Ok(ForwardOut { head: x, taps })
}

/// Inference-only forward; returns the head output and tap activations.
pub fn infer(spec: &NetworkSpec, params: &ModelParams, bits: &[BitWidth], images: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars = ParamVars::frozen(&mut g, params);
    let x = g.constant(images.clone());
    let out = forward_graph(&mut g, spec, &vars, bits, x)?;
    let taps = out.taps.iter().map(|&t| g.value(t).clone()).collect();
    Ok((g.value(out.head).clone(), taps))
}

/// Detection decoding and suppression settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeSettings {
    pub min_confidence: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self {
            min_confidence: 0.01,
            nms_iou: 0.45,
            max_detections: 100,
        }
    }
}

/// Turns head outputs into per-class boxes in normalized coordinates, with
/// confidence `σ(obj)·softmax(cls)`, per-class NMS and a per-image cap.
/// `first_image` offsets the image index of the batch.
pub fn decode(head: &Tensor, first_image: usize, settings: DecodeSettings) -> Result<Vec<Detection>> {
    let [n, ch, g, _] = head.shape() else {
        return invalid("head output must be 4-D");
    };
    let (n, ch, g) = (*n, *ch, *g);
    let classes = ch - HEAD_BOX_CHANNELS;
    let cells = g * g;
    let x = head.data();
    let mut out = Vec::new();
    for b in 0..n {
        let at = |c: usize, cell: usize| f64::from(x[(b * ch + c) * cells + cell]);
        let mut cands = Vec::new();
        for cell in 0..cells {
            let (gy, gx) = ((cell / g) as f64, (cell % g) as f64);
            let w = at(3, cell) / g as f64;
            let h = at(4, cell) / g as f64;
            if !(w > 1e-6 && h > 1e-6) {
                continue;
            }
            let bbox = BBox::from_center((gx + at(1, cell)) / g as f64, (gy + at(2, cell)) / g as f64, w, h);
            let obj = 1.0 / (1.0 + (-at(0, cell)).exp());
            let logits: Vec<f64> = (0..classes).map(|k| at(HEAD_BOX_CHANNELS + k, cell)).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for (k, l) in logits.iter().enumerate() {
                let conf = obj * (l - max).exp() / z;
                if conf >= settings.min_confidence {
                    cands.push(Detection {
                        image: first_image + b,
                        class: k,
                        confidence: conf,
                        bbox,
                    });
                }
            }
        }
        cands.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        let mut kept: Vec<Detection> = Vec::new();
        for c in cands {
            let suppressed = kept.iter().any(|k| {
                k.class == c.class && crate::cost::iou(&k.bbox, &c.bbox).is_ok_and(|o| o > settings.nms_iou)
            });
            if !suppressed {
                kept.push(c);
                if kept.len() == settings.max_detections {
                    break;
                }
            }
        }
        out.extend(kept);
    }
    Ok(out)
}
