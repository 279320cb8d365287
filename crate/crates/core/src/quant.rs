//! Uniform k-bit fake quantization of weights and activations.
//!
//! Quantized values stay real-valued but lie exactly on the uniform grid
//! `{0, 1/(2^k-1), …, 1}` (activations) or its affine image in `[-1, 1]`
//! (weights). Rounding is half away from zero. Gradients of the rounding
//! step are straight-through; see [`crate::tensor::Graph::quantize_weights`].

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Result};
use crate::tensor::{Real, Tensor};

pub const MIN_BITS: u8 = 1;
pub const MAX_BITS: u8 = 8;
/// Bit width reported for layers that are not quantized.
pub const FULL_PRECISION_BITS: u8 = 32;

/// Per-layer precision: a quantized width in `[1, 8]` or full precision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BitWidth {
    Bits(u8),
    Full,
}

impl BitWidth {
    /// Width used by the cost model (`32` for full precision).
    pub fn cost_bits(self) -> u64 {
        match self {
            BitWidth::Bits(b) => u64::from(b),
            BitWidth::Full => u64::from(FULL_PRECISION_BITS),
        }
    }

    pub fn is_full(self) -> bool {
        matches!(self, BitWidth::Full)
    }

    pub fn quantized(self) -> Option<u8> {
        match self {
            BitWidth::Bits(b) => Some(b),
            BitWidth::Full => None,
        }
    }
}

impl Serialize for BitWidth {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.cost_bits() as u8)
    }
}

impl<'de> Deserialize<'de> for BitWidth {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match u8::deserialize(d)? {
            FULL_PRECISION_BITS => Ok(BitWidth::Full),
            b @ MIN_BITS..=MAX_BITS => Ok(BitWidth::Bits(b)),
            b => Err(serde::de::Error::custom(format!(
                "bit width {b} is neither in [1, 8] nor 32"
            ))),
        }
    }
}

/// Trainable shadow weights of one convolution plus their assigned precision.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLayerState {
    pub bit_width: BitWidth,
    pub latent_weight: Tensor,
    pub exempt: bool,
}

impl QuantizedLayerState {
    pub fn new(latent_weight: Tensor, bit_width: BitWidth, exempt: bool) -> Result<Self> {
        if exempt && !bit_width.is_full() {
            return invalid("exempt layers must stay at full precision");
        }
        if let BitWidth::Bits(b) = bit_width {
            check_bits(b)?;
        }
        Ok(Self {
            bit_width,
            latent_weight,
            exempt,
        })
    }

    /// Weight tensor the forward pass actually uses.
    pub fn forward_weight(&self) -> Result<Tensor> {
        match self.bit_width {
            BitWidth::Full => Ok(self.latent_weight.clone()),
            BitWidth::Bits(b) => quantize_weights(&self.latent_weight, b),
        }
    }
}

pub(crate) fn check_bits(k: u8) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&k) {
        return invalid(format!("bit width {k} outside [{MIN_BITS}, {MAX_BITS}]"));
    }
    Ok(())
}

#[inline]
pub(crate) fn q_grid<T: Real>(v: T, k: u8) -> T {
    let levels = T::lit(((1u32 << k) - 1) as f64);
    (levels * v).round() / levels
}

/// Index and value of `max |tanh(w)|`; the first maximizer wins ties.
pub(crate) fn tanh_argmax<T: Real>(w: &[T]) -> (usize, T) {
    let mut best = (0, T::zero());
    for (i, &x) in w.iter().enumerate() {
        let t = x.tanh().abs();
        if t > best.1 {
            best = (i, t);
        }
    }
    best
}

/// Derivative of the `[0, 1]` clamp: 1 inside the closed interval, 0 outside.
#[inline]
pub(crate) fn saturation_pass<T: Real>(x: T) -> T {
    if x >= T::zero() && x <= T::one() {
        T::one()
    } else {
        T::zero()
    }
}

/// `round((2^k - 1)·v) / (2^k - 1)` for `v ∈ [0, 1]`.
pub fn quantize_uniform(v: f64, k: u8) -> Result<f64> {
    check_bits(k)?;
    if !(0.0..=1.0).contains(&v) {
        return invalid(format!("value {v} outside [0, 1]; clamp before quantizing"));
    }
    Ok(q_grid(v, k))
}

/// Layer-wise tanh-normalized weight quantization onto `[-1, 1]`.
///
/// An all-zero tensor has no scale; it is returned unchanged with a warning.
pub fn quantize_weights(w: &Tensor, bits: u8) -> Result<Tensor> {
    check_bits(bits)?;
    let (_, m) = tanh_argmax(w.data());
    if m == 0.0 {
        log::warn!("degenerate all-zero weight tensor left unquantized");
        return Ok(w.clone().with_requires_grad(false));
    }
    Ok(w.map(|x| 2.0 * q_grid(x.tanh() / (2.0 * m) + 0.5, bits) - 1.0))
}

/// Clamp to `[0, 1]` then quantize onto the `2^bits`-level grid.
pub fn quantize_activations(a: &Tensor, bits: u8) -> Result<Tensor> {
    check_bits(bits)?;
    Ok(a.map(|x| q_grid(x.clamp(0.0, 1.0), bits)))
}

/// `1` where the clamp passes its input through, `0` where it saturates.
pub fn saturation_mask(pre_activation: &Tensor) -> Tensor {
    pre_activation.map(saturation_pass)
}

/// Straight-through backward rule of activation quantization: rounding is
/// the identity, the clamp blocks gradients in its saturated region.
pub fn ste_gradient(upstream: &Tensor, saturation_mask: &Tensor) -> Result<Tensor> {
    if upstream.shape() != saturation_mask.shape() {
        return invalid(format!(
            "ste_gradient: {:?} vs mask {:?}",
            upstream.shape(),
            saturation_mask.shape()
        ));
    }
    let data = upstream
        .data()
        .iter()
        .zip(saturation_mask.data())
        .map(|(&g, &m)| g * m)
        .collect();
    Tensor::new(upstream.shape(), data)
}
