//! Dense single-scale detection loss.

use crate::error::{shape_err, Result};
use crate::net::HEAD_BOX_CHANNELS;
use crate::tensor::{Graph, Tensor, Var};

use super::data::GridTargets;

/// Batch-mean loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub objectness: f64,
    pub boxes: f64,
    pub class: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.objectness + self.boxes + self.class
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Smooth-L1 with unit transition point, and its derivative.
fn smooth_l1(d: f64) -> (f64, f64) {
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

/// Per image: objectness BCE summed over all cells, smooth-L1 on the four box
/// offsets and cross-entropy on the class logits of positive cells; the three
/// terms are added with unit weights and averaged over the batch.
///
/// `head` is `[N, 5 + K, G, G]` with channels `[obj, tx, ty, tw, th, cls…]`.
/// Returns the components and the gradient of their sum w.r.t. `head`.
pub fn detection_loss(head: &Tensor, targets: &[GridTargets]) -> Result<(LossParts, Vec<f32>)> {
    let [n, ch, gh, gw] = head.shape() else {
        return shape_err(format!("head output must be [N,C,G,G], got {:?}", head.shape()));
    };
    let (n, ch, g) = (*n, *ch, *gh);
    if gh != gw || targets.len() != n || ch <= HEAD_BOX_CHANNELS {
        return shape_err(format!(
            "head {:?} does not fit {} targets",
            head.shape(),
            targets.len()
        ));
    }
    if targets.iter().any(|t| t.grid != g) {
        return shape_err("target grid differs from head grid");
    }
    let classes = ch - HEAD_BOX_CHANNELS;
    let cells = g * g;
    let x = head.data();
    let at = |b: usize, c: usize, cell: usize| (b * ch + c) * cells + cell;
    let inv_n = 1.0 / n as f64;
    let mut parts = LossParts::default();
    let mut grad = vec![0.0f32; x.len()];
    for (b, t) in targets.iter().enumerate() {
        for cell in 0..cells {
            let z = f64::from(x[at(b, 0, cell)]);
            let y = f64::from(t.objectness[cell]);
            parts.objectness += (softplus(z) - y * z) * inv_n;
            grad[at(b, 0, cell)] = ((sigmoid(z) - y) * inv_n) as f32;

            let Some(class) = t.class[cell] else { continue };
            for k in 0..4 {
                let i = at(b, 1 + k, cell);
                let (l, d) = smooth_l1(f64::from(x[i]) - f64::from(t.boxes[cell][k]));
                parts.boxes += l * inv_n;
                grad[i] = (d * inv_n) as f32;
            }
            let logits: Vec<f64> = (0..classes)
                .map(|k| f64::from(x[at(b, HEAD_BOX_CHANNELS + k, cell)]))
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
            parts.class += (lse - logits[class]) * inv_n;
            for (k, &l) in logits.iter().enumerate() {
                let p = (l - lse).exp();
                let onehot = if k == class { 1.0 } else { 0.0 };
                grad[at(b, HEAD_BOX_CHANNELS + k, cell)] = ((p - onehot) * inv_n) as f32;
            }
        }
    }
    Ok((parts, grad))
}

/// Records [`detection_loss`] on the tape as a scalar node over `head`.
pub fn detection_loss_graph(g: &mut Graph, head: Var, targets: &[GridTargets]) -> Result<(Var, LossParts)> {
    let (parts, grad) = detection_loss(g.value(head), targets)?;
    let v = g.fused_scalar(head, parts.total() as f32, grad)?;
    Ok((v, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::data::BoxLabel;

    const CLASSES: usize = 3;
    const G: usize = 4;

    fn head_from(t: &GridTargets, confidence: f32) -> Tensor {
        let ch = HEAD_BOX_CHANNELS + CLASSES;
        let cells = G * G;
        let mut data = vec![0.0; ch * cells];
        for cell in 0..cells {
            data[cell] = if t.objectness[cell] > 0.5 { confidence } else { -confidence };
            for k in 0..4 {
                data[(1 + k) * cells + cell] = t.boxes[cell][k];
            }
            if let Some(c) = t.class[cell] {
                data[(HEAD_BOX_CHANNELS + c) * cells + cell] = confidence;
            }
        }
        Tensor::new(&[1, ch, G, G], data).unwrap()
    }

    fn one_object() -> GridTargets {
        GridTargets::encode(
            &[BoxLabel {
                class: 2,
                cx: 0.3,
                cy: 0.6,
                w: 0.4,
                h: 0.2,
            }],
            G,
        )
    }

    #[test]
    fn perfect_predictions_have_near_zero_loss() {
        let t = one_object();
        let (parts, _) = detection_loss(&head_from(&t, 20.0), &[t]).unwrap();
        assert!(parts.total() < 1e-3, "{parts:?}");
    }

    #[test]
    fn empty_scene_with_confident_background() {
        let t = GridTargets::encode(&[], G);
        let (parts, grad) = detection_loss(&head_from(&t, 20.0), &[t]).unwrap();
        assert!(parts.total() < 1e-3);
        assert_eq!(parts.boxes, 0.0);
        assert_eq!(parts.class, 0.0);
        let cells = G * G;
        assert!(grad[cells..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_offset_error_costs_half_per_coordinate() {
        let t = one_object();
        let mut head = head_from(&t, 20.0);
        let cell = t.objectness.iter().position(|&o| o > 0.5).unwrap();
        head.data_mut()[G * G + cell] += 1.0;
        let (parts, _) = detection_loss(&head, &[t.clone()]).unwrap();
        assert!((parts.boxes - 0.5).abs() < 1e-6);
        for k in 1..4 {
            head.data_mut()[(1 + k) * G * G + cell] += 1.0;
        }
        let (parts, _) = detection_loss(&head, &[t]).unwrap();
        assert!((parts.boxes - 2.0).abs() < 1e-6);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let t = one_object();
        let ch = HEAD_BOX_CHANNELS + CLASSES;
        let head = Tensor::from_fn(&[1, ch, G, G], |i| ((i * 37 % 23) as f32 - 11.0) / 7.0);
        let (_, grad) = detection_loss(&head, &[t.clone()]).unwrap();
        let eps = 1e-3;
        for i in (0..head.numel()).step_by(5) {
            let mut hp = head.clone();
            hp.data_mut()[i] += eps;
            let mut hm = head.clone();
            hm.data_mut()[i] -= eps;
            let lp = detection_loss(&hp, &[t.clone()]).unwrap().0.total();
            let lm = detection_loss(&hm, &[t.clone()]).unwrap().0.total();
            let num = (lp - lm) / (2.0 * f64::from(eps));
            assert!((num - f64::from(grad[i])).abs() < 2e-3, "index {i}: {num} vs {}", grad[i]);
        }
    }

    #[test]
    fn batch_mean_is_size_independent() {
        let t = one_object();
        let h = head_from(&t, 1.0);
        let (one, _) = detection_loss(&h, &[t.clone()]).unwrap();
        let mut two = h.data().to_vec();
        two.extend_from_slice(h.data());
        let h2 = Tensor::new(&[2, HEAD_BOX_CHANNELS + CLASSES, G, G], two).unwrap();
        let (both, _) = detection_loss(&h2, &[t.clone(), t]).unwrap();
        assert!((one.total() - both.total()).abs() < 1e-12);
    }
}
