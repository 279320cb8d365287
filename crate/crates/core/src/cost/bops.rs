use serde::{Deserialize, Serialize};

use crate::bitsearch::BitPlan;
use crate::error::{invalid, Error, Result};
use crate::net::NetworkSpec;
use crate::quant::FULL_PRECISION_BITS;

/// `c_prev·c_out·w_out·h_out·k_w·k_h·b_w·b_a_prev`, exact.
#[allow(clippy::too_many_arguments)]
pub fn layer_bops(
    c_prev: u64,
    c_out: u64,
    h_out: u64,
    w_out: u64,
    k_h: u64,
    k_w: u64,
    b_w: u64,
    b_a_prev: u64,
) -> Result<u64> {
    let dims = [c_prev, c_out, h_out, w_out, k_h, k_w];
    if dims.contains(&0) {
        return invalid("layer dimensions must be positive");
    }
    for b in [b_w, b_a_prev] {
        if !(1..=32).contains(&b) {
            return invalid(format!("bit width {b} outside [1, 32]"));
        }
    }
    dims.iter()
        .chain([b_w, b_a_prev].iter())
        .try_fold(1u64, |acc, &x| acc.checked_mul(x))
        .ok_or(Error::Overflow("layer_bops"))
}

fn check_plan(network: &NetworkSpec, plan: &BitPlan) -> Result<()> {
    if plan.layers.len() != network.layers.len() {
        return invalid(format!(
            "plan covers {} layers, network has {}",
            plan.layers.len(),
            network.layers.len()
        ));
    }
    Ok(())
}

/// Storage of all kernel weights in bits, `Σ c_{l-1}·c_l·k_h·k_w·b_{w,l}`.
pub fn model_params_bits(network: &NetworkSpec, plan: &BitPlan) -> Result<u64> {
    check_plan(network, plan)?;
    network
        .layers
        .iter()
        .zip(&plan.layers)
        .try_fold(0u64, |acc, (l, p)| {
            (l.weight_count() as u64)
                .checked_mul(p.bits.cost_bits())
                .and_then(|b| acc.checked_add(b))
                .ok_or(Error::Overflow("model_params_bits"))
        })
}

/// Parameter bytes; sub-byte widths are summed in bits and divided once.
pub fn model_params_bytes(network: &NetworkSpec, plan: &BitPlan) -> Result<f64> {
    Ok(model_params_bits(network, plan)? as f64 / 8.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub bops: u64,
    /// BOPs of the same layer at 32-bit weights and activations.
    pub fp32_bops: u64,
    pub param_bits: u64,
    pub param_bytes: f64,
    pub b_w: u64,
    pub b_a_prev: u64,
    pub exempt: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Compression {
    /// Total BOPs over the 32-bit reference.
    pub bops_ratio: f64,
    /// Same ratio restricted to non-exempt layers.
    pub bops_ratio_non_exempt: f64,
    pub params_ratio: f64,
    pub params_ratio_non_exempt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub per_layer: Vec<LayerCost>,
    pub total_bops: u64,
    pub total_fp32_bops: u64,
    pub non_exempt_bops: u64,
    pub non_exempt_fp32_bops: u64,
    pub total_param_bits: u64,
    pub total_param_bytes: f64,
    /// Parameter size in 10^6 bytes.
    pub params_mb: f64,
    /// Parameter size in 2^20 bytes.
    pub params_mib: f64,
    /// `total_bops / 10^9`.
    pub gbops: f64,
    pub compression_vs_fp32: Compression,
}

/// Activation width feeding layer `i`: the previous layer's output width
/// (32 after a full-precision layer). The first layer reads the image at its
/// stored `input_bits` when quantized and as 32-bit reals otherwise.
fn input_activation_bits(network: &NetworkSpec, plan: &BitPlan, i: usize) -> u64 {
    match i {
        0 if plan.layers[0].bits.is_full() => u64::from(FULL_PRECISION_BITS),
        0 => u64::from(network.input_bits),
        _ => plan.layers[i - 1].bits.cost_bits(),
    }
}

/// Exact BOPs and parameter accounting of `network` under `plan`.
pub fn cost_report(network: &NetworkSpec, plan: &BitPlan) -> Result<CostReport> {
    check_plan(network, plan)?;
    let extents = network.output_extents()?;
    let fp = u64::from(FULL_PRECISION_BITS);
    let mut per_layer = Vec::with_capacity(network.layers.len());
    for (i, (l, p)) in network.layers.iter().zip(&plan.layers).enumerate() {
        let (h, w) = extents[i];
        let dims = (
            l.in_channels as u64,
            l.out_channels as u64,
            h as u64,
            w as u64,
            l.kernel as u64,
        );
        let b_w = p.bits.cost_bits();
        let b_a_prev = input_activation_bits(network, plan, i);
        let bops = layer_bops(dims.0, dims.1, dims.2, dims.3, dims.4, dims.4, b_w, b_a_prev)?;
        let fp32_bops = layer_bops(dims.0, dims.1, dims.2, dims.3, dims.4, dims.4, fp, fp)?;
        let param_bits = l.weight_count() as u64 * b_w;
        per_layer.push(LayerCost {
            name: l.name.clone(),
            bops,
            fp32_bops,
            param_bits,
            param_bytes: param_bits as f64 / 8.0,
            b_w,
            b_a_prev,
            exempt: p.exempt,
        });
    }
    let sum = |f: &dyn Fn(&LayerCost) -> u64, only_quantized: bool| -> Result<u64> {
        per_layer
            .iter()
            .filter(|c| !only_quantized || !c.exempt)
            .try_fold(0u64, |acc, c| acc.checked_add(f(c)))
            .ok_or(Error::Overflow("cost_report"))
    };
    let total_bops = sum(&|c| c.bops, false)?;
    let total_fp32_bops = sum(&|c| c.fp32_bops, false)?;
    let non_exempt_bops = sum(&|c| c.bops, true)?;
    let non_exempt_fp32_bops = sum(&|c| c.fp32_bops, true)?;
    let total_param_bits = sum(&|c| c.param_bits, false)?;
    let non_exempt_param_bits = sum(&|c| c.param_bits, true)?;
    let non_exempt_fp32_param_bits: u64 = per_layer
        .iter()
        .zip(&network.layers)
        .filter(|(c, _)| !c.exempt)
        .map(|(_, l)| l.weight_count() as u64 * fp)
        .sum();
    let fp32_param_bits: u64 = network.layers.iter().map(|l| l.weight_count() as u64 * fp).sum();
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let total_param_bytes = total_param_bits as f64 / 8.0;
    Ok(CostReport {
        compression_vs_fp32: Compression {
            bops_ratio: ratio(total_bops, total_fp32_bops),
            bops_ratio_non_exempt: ratio(non_exempt_bops, non_exempt_fp32_bops),
            params_ratio: ratio(total_param_bits, fp32_param_bits),
            params_ratio_non_exempt: ratio(non_exempt_param_bits, non_exempt_fp32_param_bits),
        },
        per_layer,
        total_bops,
        total_fp32_bops,
        non_exempt_bops,
        non_exempt_fp32_bops,
        total_param_bits,
        total_param_bytes,
        params_mb: total_param_bytes / 1e6,
        params_mib: total_param_bytes / (1u64 << 20) as f64,
        gbops: total_bops as f64 / 1e9,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::LayerSpec;

    #[test]
    fn hand_worked_bops() {
        assert_eq!(layer_bops(3, 16, 32, 32, 3, 3, 4, 8).unwrap(), 14_155_776);
        assert_eq!(layer_bops(3, 16, 32, 32, 3, 3, 32, 32).unwrap(), 452_984_832);
        assert!(layer_bops(0, 16, 32, 32, 3, 3, 4, 8).is_err());
        assert!(layer_bops(3, 16, 32, 32, 3, 3, 33, 8).is_err());
        assert!(matches!(
            layer_bops(u64::MAX / 2, 16, 32, 32, 3, 3, 4, 8),
            Err(Error::Overflow(_))
        ));
    }

    fn single_layer() -> NetworkSpec {
        NetworkSpec {
            input_channels: 3,
            input_size: 32,
            input_bits: 8,
            num_classes: 11,
            layers: vec![LayerSpec {
                head: true,
                ..LayerSpec::conv("only", 3, 16, 3, 1)
            }],
            scale_taps: vec![],
        }
    }

    #[test]
    fn params_of_one_layer() {
        let net = single_layer();
        let fp = BitPlan::full_precision(&net);
        assert_eq!(model_params_bytes(&net, &fp).unwrap(), 1728.0);
        let mut q = fp.clone();
        q.layers[0].bits = crate::quant::BitWidth::Bits(4);
        assert_eq!(model_params_bytes(&net, &q).unwrap(), 216.0);
    }

    #[test]
    fn empty_network_has_no_params() {
        let mut net = single_layer();
        net.layers.clear();
        let plan = BitPlan {
            threshold: 1.0,
            b_min: 2,
            layers: vec![],
        };
        assert_eq!(model_params_bytes(&net, &plan).unwrap(), 0.0);
    }

    #[test]
    fn uniform_eight_bit_is_one_sixteenth() {
        let net = NetworkSpec::tiny_detector(3);
        let plan = BitPlan::uniform(&net, 8, false).unwrap();
        let r = cost_report(&net, &plan).unwrap();
        for c in r.per_layer.iter().filter(|c| !c.exempt) {
            assert_eq!(c.bops * 16, c.fp32_bops);
        }
        assert_eq!(r.non_exempt_bops * 16, r.non_exempt_fp32_bops);
        assert_eq!(r.compression_vs_fp32.bops_ratio_non_exempt, 1.0 / 16.0);
        assert_eq!(r.compression_vs_fp32.params_ratio_non_exempt, 0.25);
    }

    #[test]
    fn quantized_layer_after_full_precision_reads_32_bits() {
        let net = NetworkSpec::tiny_detector(3);
        let plan = BitPlan::uniform(&net, 4, true).unwrap();
        let r = cost_report(&net, &plan).unwrap();
        assert_eq!(r.per_layer[0].b_a_prev, 32);
        assert_eq!(r.per_layer[1].b_a_prev, 32);
        assert_eq!(r.per_layer[2].b_a_prev, 4);
        assert_eq!(r.per_layer[6].b_a_prev, 4);
        let sum: u64 = r.per_layer.iter().map(|c| c.bops).sum();
        assert_eq!(sum, r.total_bops);
    }
}
