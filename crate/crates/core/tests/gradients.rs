//! Reverse-mode gradients of every differentiable tape op against central differences.

use ghost::tensor::{finite_diff_check, Graph, Real, Rounding, ScalarFn, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-3;
const EPS: f64 = 1e-3;

#[derive(Clone, Copy, Debug)]
enum Probe {
    ConvInput,
    ConvWeight,
    AddBiasInput,
    AddBiasBias,
    SubChannelMeanInput,
    SubChannelMeanMean,
    LinearInput,
    LinearWeight,
    RowDot,
    RowNorm,
    Sigmoid,
    Gap,
    Cap,
    Mul,
    Sub,
    Mean,
    Scale,
    Clamp01,
    Bce,
    QuantizeActivations,
    QuantizeWeights,
}

fn fixed<T: Real>(shape: &[usize], salt: usize) -> Tensor<T> {
    Tensor::from_fn(shape, |i| T::lit(((i * 7 + salt) % 11) as f64 / 5.0 - 1.0))
}

/// Weighted sum with fixed, uneven coefficients so every output element matters.
fn readout<T: Real>(g: &mut Graph<T>, v: Var) -> ghost::Result<Var> {
    let c = g.constant(fixed(g.shape(v), 3));
    let p = g.mul(v, c)?;
    Ok(g.sum(p))
}

impl ScalarFn for Probe {
    fn build<T: Real>(&self, g: &mut Graph<T>, x: Var) -> ghost::Result<Var> {
        let out = match self {
            Probe::ConvInput => {
                let w = g.constant(fixed(&[4, 3, 3, 3], 1));
                g.conv2d(x, w, 2, 1)?
            }
            Probe::ConvWeight => {
                let input = g.constant(fixed(&[2, 3, 5, 5], 2));
                g.conv2d(input, x, 1, 1)?
            }
            Probe::AddBiasInput => {
                let b = g.constant(fixed(&[3], 4));
                g.add_bias(x, b)?
            }
            Probe::AddBiasBias => {
                let input = g.constant(fixed(&[2, 3, 4, 4], 5));
                g.add_bias(input, x)?
            }
            Probe::SubChannelMeanInput => {
                let m = g.constant(fixed(&[2, 3], 6));
                g.sub_channel_mean(x, m)?
            }
            Probe::SubChannelMeanMean => {
                let input = g.constant(fixed(&[2, 3, 4, 4], 7));
                g.sub_channel_mean(input, x)?
            }
            Probe::LinearInput => {
                let w = g.constant(fixed(&[2, 4], 8));
                g.linear(x, w)?
            }
            Probe::LinearWeight => {
                let input = g.constant(fixed(&[3, 4], 9));
                g.linear(input, x)?
            }
            Probe::RowDot => {
                let other = g.constant(fixed(&[3, 4], 10));
                g.row_dot(x, other)?
            }
            Probe::RowNorm => g.row_norm(x),
            Probe::Sigmoid => g.sigmoid(x),
            Probe::Gap => g.gap(x)?,
            Probe::Cap => g.cap(x)?,
            Probe::Mul => {
                let c = g.constant(fixed(g.shape(x), 1));
                g.mul(x, c)?
            }
            Probe::Sub => {
                let c = g.constant(fixed(g.shape(x), 2));
                let d = g.sub(c, x)?;
                g.mul(d, d)?
            }
            Probe::Mean => {
                let sq = g.mul(x, x)?;
                return Ok(g.mean(sq));
            }
            Probe::Scale => g.scale(x, -2.5),
            Probe::Clamp01 => g.clamp01(x),
            Probe::Bce => {
                let n = g.value(x).numel();
                let targets: Vec<T> = (0..n).map(|i| T::lit((i % 3) as f64 / 2.0)).collect();
                return g.bce_with_logits(x, &targets);
            }
            Probe::QuantizeActivations => g.quantize_activations(x, Rounding::Identity)?,
            Probe::QuantizeWeights => g.quantize_weights(x, Rounding::Identity)?,
        };
        readout(g, out)
    }
}

/// Seeded input whose entries avoid the clamp kinks at 0 and 1 and have
/// distinct magnitudes, so every probe is differentiable at it.
fn input(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: Vec<f32> = Vec::new();
    Tensor::from_fn(shape, |_| loop {
        let v = rng.random_range(-1.5f32..1.5);
        let clear = [0.0f32, 1.0, -1.0].iter().all(|k| (v.abs() - k).abs() > 0.05);
        if clear && seen.iter().all(|s| (s.abs() - v.abs()).abs() > 1e-3) {
            seen.push(v);
            break v;
        }
    })
}

fn check(probe: Probe, shape: &[usize]) {
    for seed in 0..3 {
        let x = input(shape, seed);
        let r = finite_diff_check(&probe, &x, EPS).unwrap();
        assert!(
            r.passes(TOL),
            "{probe:?} seed {seed}: max rel err {}\nanalytic {:?}\nnumeric {:?}",
            r.max_rel_err,
            r.analytic,
            r.numeric
        );
    }
}

#[test]
fn conv2d_input() {
    check(Probe::ConvInput, &[2, 3, 5, 5]);
}

#[test]
fn conv2d_weight() {
    check(Probe::ConvWeight, &[4, 3, 3, 3]);
}

#[test]
fn add_bias() {
    check(Probe::AddBiasInput, &[2, 3, 4, 4]);
    check(Probe::AddBiasBias, &[3]);
}

#[test]
fn sub_channel_mean() {
    check(Probe::SubChannelMeanInput, &[2, 3, 4, 4]);
    check(Probe::SubChannelMeanMean, &[2, 3]);
}

#[test]
fn linear() {
    check(Probe::LinearInput, &[3, 4]);
    check(Probe::LinearWeight, &[2, 4]);
}

#[test]
fn row_dot_and_norm() {
    check(Probe::RowDot, &[3, 4]);
    check(Probe::RowNorm, &[3, 4]);
}

#[test]
fn sigmoid() {
    check(Probe::Sigmoid, &[10]);
}

#[test]
fn pooling() {
    check(Probe::Gap, &[2, 3, 4, 4]);
    check(Probe::Cap, &[2, 3, 4, 4]);
}

#[test]
fn elementwise() {
    check(Probe::Mul, &[12]);
    check(Probe::Sub, &[12]);
    check(Probe::Mean, &[12]);
    check(Probe::Scale, &[12]);
}

#[test]
fn clamp_away_from_kinks() {
    check(Probe::Clamp01, &[16]);
}

#[test]
fn bce_with_logits() {
    check(Probe::Bce, &[9]);
}

#[test]
fn quantizer_surrogates() {
    check(Probe::QuantizeActivations, &[16]);
    check(Probe::QuantizeWeights, &[16]);
}
