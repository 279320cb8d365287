//! Per-layer bit-width search by clustering full-precision weights.
//!
//! For every quantizable convolution the weights are clustered into `2^n`
//! groups for increasing `n`; the first `n ≥ b_min` whose mean squared
//! distance to the cluster centers drops below the threshold `T` becomes the
//! layer's bit width. Layers for which no `n ≤ 8` qualifies keep 8 bits.

mod kmeans;

pub use kmeans::{kmeanspp_cluster, ClusterResult, MAX_LLOYD_ITERS};

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::net::NetworkSpec;
use crate::quant::{BitWidth, MAX_BITS, MIN_BITS};
use crate::tensor::Tensor;

pub const DEFAULT_RESTARTS: usize = 8;

/// Mean squared distance of `weights` to their best `2^n`-center clustering.
pub fn distribution_distance(weights: &[f32], n: u8, restarts: usize, seed: u64) -> Result<f64> {
    if !(MIN_BITS..=MAX_BITS).contains(&n) {
        return invalid(format!("n = {n} outside [1, 8]"));
    }
    let samples: Vec<f64> = weights.iter().map(|&w| f64::from(w)).collect();
    let result = kmeanspp_cluster(&samples, 1usize << n, restarts, seed)?;
    Ok(result.sse / samples.len() as f64)
}

/// Result of scanning one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BitSelection {
    pub bits: u8,
    /// `d(n)` for every scanned `n`; the scan stops at the first success.
    pub distances: BTreeMap<u8, f64>,
    /// No scanned width met the threshold, so the layer kept 8 bits.
    pub fallback: bool,
}

fn check_search_args(threshold: f64, b_min: u8) -> Result<()> {
    if !(threshold > 0.0 && threshold.is_finite()) {
        return invalid(format!("threshold must be finite and positive, got {threshold}"));
    }
    if !(MIN_BITS..=MAX_BITS).contains(&b_min) {
        return invalid(format!("b_min {b_min} outside [1, 8]"));
    }
    Ok(())
}

/// Smallest `n ∈ [b_min, 8]` with `d(n) < threshold`, or 8 if none qualifies.
pub fn select_bit_width(
    weights: &[f32],
    threshold: f64,
    b_min: u8,
    restarts: usize,
    seed: u64,
) -> Result<BitSelection> {
    check_search_args(threshold, b_min)?;
    let mut distances = BTreeMap::new();
    for n in b_min..=MAX_BITS {
        let d = distribution_distance(weights, n, restarts, seed)?;
        distances.insert(n, d);
        if d < threshold {
            return Ok(BitSelection {
                bits: n,
                distances,
                fallback: false,
            });
        }
    }
    Ok(BitSelection {
        bits: MAX_BITS,
        distances,
        fallback: true,
    })
}

/// One layer's entry in a [`BitPlan`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerBits {
    pub name: String,
    /// Weight and output-activation width (`32` in JSON for full precision).
    pub bits: BitWidth,
    pub exempt: bool,
    #[serde(default)]
    pub fallback: bool,
    /// Measured `d(n)` keyed by `n`.
    #[serde(default)]
    pub distances: BTreeMap<u8, f64>,
}

/// Per-layer bit widths plus the search settings that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitPlan {
    pub threshold: f64,
    pub b_min: u8,
    pub layers: Vec<LayerBits>,
}

impl BitPlan {
    /// Plan with every non-exempt layer at `bits`; no search is involved.
    pub fn uniform(spec: &NetworkSpec, bits: u8, exempt_first_layer: bool) -> Result<Self> {
        crate::quant::check_bits(bits)?;
        let layers = spec
            .layers
            .iter()
            .zip(spec.exempt_mask(exempt_first_layer))
            .map(|(l, exempt)| LayerBits {
                name: l.name.clone(),
                bits: if exempt { BitWidth::Full } else { BitWidth::Bits(bits) },
                exempt,
                fallback: false,
                distances: BTreeMap::new(),
            })
            .collect();
        Ok(Self {
            threshold: 0.0,
            b_min: bits,
            layers,
        })
    }

    /// Plan with every layer at full precision.
    pub fn full_precision(spec: &NetworkSpec) -> Self {
        let layers = spec
            .layers
            .iter()
            .map(|l| LayerBits {
                name: l.name.clone(),
                bits: BitWidth::Full,
                exempt: true,
                fallback: false,
                distances: BTreeMap::new(),
            })
            .collect();
        Self {
            threshold: 0.0,
            b_min: MAX_BITS,
            layers,
        }
    }

    pub fn bits(&self) -> Vec<BitWidth> {
        self.layers.iter().map(|l| l.bits).collect()
    }

    /// Mean width over quantized layers.
    pub fn average_quantized_bits(&self) -> f64 {
        let q: Vec<f64> = self
            .layers
            .iter()
            .filter_map(|l| l.bits.quantized())
            .map(f64::from)
            .collect();
        if q.is_empty() {
            0.0
        } else {
            q.iter().sum::<f64>() / q.len() as f64
        }
    }

    /// Checks the plan against a network: same layer count and names, exempt layers full precision.
    pub fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        if self.layers.len() != spec.layers.len() {
            return invalid(format!(
                "bit plan covers {} layers but the network has {}",
                self.layers.len(),
                spec.layers.len()
            ));
        }
        for (p, l) in self.layers.iter().zip(&spec.layers) {
            if p.name != l.name {
                return invalid(format!("bit plan layer {} does not match {}", p.name, l.name));
            }
            if (l.head || l.exempt) && !p.bits.is_full() {
                return invalid(format!("layer {} must stay at full precision", l.name));
            }
        }
        Ok(())
    }
}

/// Seed of layer `index`, identical for serial and parallel evaluation.
pub fn layer_seed(seed: u64, index: usize) -> u64 {
    seed ^ index as u64
}

fn check_layers(network: &NetworkSpec, weights: &[Tensor]) -> Result<()> {
    if network.layers.len() != weights.len() {
        return invalid(format!(
            "network has {} layers but {} weight tensors were given",
            network.layers.len(),
            weights.len()
        ));
    }
    for (l, w) in network.layers.iter().zip(weights) {
        if w.shape() != l.weight_shape() {
            return invalid(format!(
                "layer {} weight shape {:?} != {:?}",
                l.name,
                w.shape(),
                l.weight_shape()
            ));
        }
    }
    Ok(())
}

/// Search settings shared by the plan builders.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchSettings {
    pub b_min: u8,
    pub restarts: usize,
    pub seed: u64,
    pub exempt_first_layer: bool,
}

/// Runs the threshold search on every non-exempt layer of a trained network.
pub fn build_bit_plan(
    network: &NetworkSpec,
    weights: &[Tensor],
    threshold: f64,
    settings: SearchSettings,
) -> Result<BitPlan> {
    check_search_args(threshold, settings.b_min)?;
    check_layers(network, weights)?;
    let exempt = network.exempt_mask(settings.exempt_first_layer);
    let layers = network
        .layers
        .par_iter()
        .zip(weights.par_iter())
        .zip(exempt.par_iter())
        .enumerate()
        .map(|(i, ((layer, w), &exempt))| {
            if exempt {
                return Ok(LayerBits {
                    name: layer.name.clone(),
                    bits: BitWidth::Full,
                    exempt: true,
                    fallback: false,
                    distances: BTreeMap::new(),
                });
            }
            let sel = select_bit_width(
                w.data(),
                threshold,
                settings.b_min,
                settings.restarts,
                layer_seed(settings.seed, i),
            )?;
            log::debug!(
                "{}: {} bits after {} clusterings",
                layer.name,
                sel.bits,
                sel.distances.len()
            );
            Ok(LayerBits {
                name: layer.name.clone(),
                bits: BitWidth::Bits(sel.bits),
                exempt: false,
                fallback: sel.fallback,
                distances: sel.distances,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BitPlan {
        threshold,
        b_min: settings.b_min,
        layers,
    })
}

/// Full `d(n)` tables (`n ∈ [b_min, 8]`) for every non-exempt layer; `None` for exempt ones.
pub fn measure_distances(
    network: &NetworkSpec,
    weights: &[Tensor],
    settings: SearchSettings,
) -> Result<Vec<Option<BTreeMap<u8, f64>>>> {
    check_layers(network, weights)?;
    let exempt = network.exempt_mask(settings.exempt_first_layer);
    weights
        .par_iter()
        .zip(exempt.par_iter())
        .enumerate()
        .map(|(i, (w, &exempt))| {
            if exempt {
                return Ok(None);
            }
            (settings.b_min..=MAX_BITS)
                .map(|n| {
                    distribution_distance(w.data(), n, settings.restarts, layer_seed(settings.seed, i))
                        .map(|d| (n, d))
                })
                .collect::<Result<BTreeMap<_, _>>>()
                .map(Some)
        })
        .collect()
}

/// Bits each layer would get under `threshold`, read off precomputed tables.
/// Agrees with [`build_bit_plan`] for the same seed and restarts.
pub fn bits_from_tables(tables: &[Option<BTreeMap<u8, f64>>], threshold: f64) -> Vec<BitWidth> {
    tables
        .iter()
        .map(|t| match t {
            None => BitWidth::Full,
            Some(t) => BitWidth::Bits(
                t.iter()
                    .find(|(_, &d)| d < threshold)
                    .map_or(MAX_BITS, |(&n, _)| n),
            ),
        })
        .collect()
}

/// Smallest threshold whose plan satisfies `accept`, scanning the points
/// where some layer's width changes. Plans only shrink as `T` grows, so the
/// smallest accepted `T` keeps the most bits.
pub fn threshold_for_budget(
    tables: &[Option<BTreeMap<u8, f64>>],
    accept: impl Fn(&[BitWidth]) -> bool,
) -> Option<f64> {
    let mut candidates: Vec<f64> = tables
        .iter()
        .flatten()
        .flat_map(|t| t.values().copied())
        .map(|d| d + (d * 1e-9).max(f64::MIN_POSITIVE))
        .collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    candidates
        .into_iter()
        .find(|&t| accept(&bits_from_tables(tables, t)))
}
