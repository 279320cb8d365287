use super::conv::{conv2d_backward, conv2d_forward};
use super::{Real, Tensor};
use crate::error::{invalid, shape_err, Result};
use crate::quant;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a fake-quantization op treats the rounding step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rounding {
    /// Snap to the `2^bits - 1` step uniform grid; backward is straight-through.
    Grid(u8),
    /// Smooth surrogate with the rounding removed. Used by gradient checks.
    Identity,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Linear { x: Var, w: Var },
    RowDot(Var, Var),
    RowNorm(Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    AddBias { x: Var, b: Var },
    SubChannelMean { x: Var, m: Var },
    Clamp01(Var),
    QuantAct(Var),
    QuantWeights { w: Var, argmax: usize, max_tanh: T },
    Round(Var),
    HardThreshold(Var),
    Gap(Var),
    Cap(Var),
    /// Scalar with a gradient w.r.t. `input` computed at forward time.
    Fused { input: Var, grad: Vec<T> },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Append-only tape of tensor ops. Nodes are stored in creation order, so
/// every input precedes its consumer and the tape is acyclic by construction.
#[derive(Clone, Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

fn nchw(t: &[usize], op: &str) -> Result<(usize, usize, usize, usize)> {
    match t {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        _ => shape_err(format!("{op} expects an [N,C,H,W] tensor, got {t:?}")),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Its `requires_grad` flag decides whether backward fills its slot.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// Leaf that will receive a gradient.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated in a leaf by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let out = self.value(a).map(f);
        self.push(out, op)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<T>, name: &str, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, name)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let k = T::lit(c);
        self.unary(a, Op::Scale(a, c), |x| x * k)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: T = t.data().iter().copied().sum();
        let m = s / T::lit(t.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    /// `x · wᵀ` for `x: [N, C]` and `w: [D, C]`, giving `[N, D]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (n, c, d) = match (tx.shape(), tw.shape()) {
            ([n, c], [d, c2]) if c == c2 => (*n, *c, *d),
            (a, b) => return shape_err(format!("linear: incompatible shapes {a:?} and {b:?}")),
        };
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            let row = &tx.data()[i * c..(i + 1) * c];
            for j in 0..d {
                let wr = &tw.data()[j * c..(j + 1) * c];
                out[i * d + j] = row.iter().zip(wr).map(|(&a, &b)| a * b).sum();
            }
        }
        let out = Tensor::new(&[n, d], out)?;
        Ok(self.push(out, Op::Linear { x, w }))
    }

    /// Per-row dot product of two `[N, D]` tensors, giving `[N]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "row_dot")?;
        let n = ta.shape()[0];
        let d = ta.numel() / n;
        let out: Vec<T> = (0..n)
            .map(|i| {
                ta.data()[i * d..(i + 1) * d]
                    .iter()
                    .zip(&tb.data()[i * d..(i + 1) * d])
                    .map(|(&x, &y)| x * y)
                    .sum()
            })
            .collect();
        let out = Tensor::new(&[n], out)?;
        Ok(self.push(out, Op::RowDot(a, b)))
    }

    /// Euclidean norm of each leading-axis slice, giving `[N]`.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = ta.shape()[0];
        let d = ta.numel() / n;
        let out: Vec<T> = (0..n)
            .map(|i| ta.data()[i * d..(i + 1) * d].iter().map(|&x| x * x).sum::<T>().sqrt())
            .collect();
        let out = Tensor::new(&[n], out).expect("positive leading extent");
        self.push(out, Op::RowNorm(a))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (out, shape) = conv2d_forward(tx.data(), tx.shape(), tw.data(), tw.shape(), stride, pad)?;
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::Conv2d { x, w, stride, pad }))
    }

    /// Adds a per-channel bias `b: [C]` to `x: [N, C, H, W]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (n, c, h, w) = nchw(tx.shape(), "add_bias")?;
        if tb.shape() != [c] {
            return shape_err(format!("add_bias: bias {:?} for {c} channels", tb.shape()));
        }
        let plane = h * w;
        let mut out = tx.data().to_vec();
        for i in 0..n * c {
            let bv = tb.data()[i % c];
            out[i * plane..(i + 1) * plane].iter_mut().for_each(|v| *v = *v + bv);
        }
        let out = Tensor::new(tx.shape(), out)?;
        Ok(self.push(out, Op::AddBias { x, b }))
    }

    /// `x[n,c,h,w] - m[n,c]`, broadcasting over space.
    pub fn sub_channel_mean(&mut self, x: Var, m: Var) -> Result<Var> {
        let (tx, tm) = (self.value(x), self.value(m));
        let (n, c, h, w) = nchw(tx.shape(), "sub_channel_mean")?;
        if tm.shape() != [n, c] {
            return shape_err(format!("sub_channel_mean: {:?} vs [{n},{c}]", tm.shape()));
        }
        let plane = h * w;
        let mut out = tx.data().to_vec();
        for i in 0..n * c {
            let mv = tm.data()[i];
            out[i * plane..(i + 1) * plane].iter_mut().for_each(|v| *v = *v - mv);
        }
        let out = Tensor::new(tx.shape(), out)?;
        Ok(self.push(out, Op::SubChannelMean { x, m }))
    }

    /// Bounded activation: hard clip to `[0, 1]`.
    pub fn clamp01(&mut self, a: Var) -> Var {
        self.unary(a, Op::Clamp01(a), |x| x.max(T::zero()).min(T::one()))
    }

    /// Clamps to `[0, 1]` then fake-quantizes onto the activation grid.
    pub fn quantize_activations(&mut self, a: Var, rounding: Rounding) -> Result<Var> {
        let out = match rounding {
            Rounding::Grid(bits) => {
                quant::check_bits(bits)?;
                self.value(a).map(|x| quant::q_grid(x.max(T::zero()).min(T::one()), bits))
            }
            Rounding::Identity => self.value(a).map(|x| x.max(T::zero()).min(T::one())),
        };
        Ok(self.push(out, Op::QuantAct(a)))
    }

    /// Weight fake quantization `2·q(tanh(w)/(2·max|tanh w|) + ½) − 1` over the whole tensor.
    pub fn quantize_weights(&mut self, w: Var, rounding: Rounding) -> Result<Var> {
        if let Rounding::Grid(bits) = rounding {
            quant::check_bits(bits)?;
        }
        let tw = self.value(w);
        let (argmax, max_tanh) = quant::tanh_argmax(tw.data());
        let out = if max_tanh == T::zero() {
            log::warn!("degenerate all-zero weight tensor left unquantized");
            tw.clone().with_requires_grad(false)
        } else {
            tw.map(|x| {
                let u = x.tanh() / (T::lit(2.0) * max_tanh) + T::lit(0.5);
                let u = match rounding {
                    Rounding::Grid(bits) => quant::q_grid(u, bits),
                    Rounding::Identity => u,
                };
                T::lit(2.0) * u - T::one()
            })
        };
        Ok(self.push(out, Op::QuantWeights { w, argmax, max_tanh }))
    }

    /// Round half away from zero with a zero gradient (no straight-through).
    pub fn round(&mut self, a: Var) -> Var {
        self.unary(a, Op::Round(a), |x| x.round())
    }

    /// Forward emits `1` where `a >= 0.5` and `0` elsewhere; backward is the identity.
    pub fn hard_threshold(&mut self, a: Var) -> Var {
        self.unary(a, Op::HardThreshold(a), |x| {
            if x >= T::lit(0.5) {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Global average pooling `[N,C,H,W] -> [N,C]`.
    pub fn gap(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (n, c, h, w) = nchw(ta.shape(), "gap")?;
        let plane = h * w;
        let inv = T::lit(1.0 / plane as f64);
        let out = (0..n * c)
            .map(|i| ta.data()[i * plane..(i + 1) * plane].iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(&[n, c], out)?;
        Ok(self.push(out, Op::Gap(a)))
    }

    /// Channel-wise average pooling `[N,C,H,W] -> [N,H,W]`.
    pub fn cap(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (n, c, h, w) = nchw(ta.shape(), "cap")?;
        let plane = h * w;
        let inv = T::lit(1.0 / c as f64);
        let mut out = vec![T::zero(); n * plane];
        for b in 0..n {
            let dst = &mut out[b * plane..(b + 1) * plane];
            for ch in 0..c {
                let src = &ta.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
            }
            dst.iter_mut().for_each(|d| *d = *d * inv);
        }
        let out = Tensor::new(&[n, h, w], out)?;
        Ok(self.push(out, Op::Cap(a)))
    }

    /// Records a scalar whose gradient w.r.t. `input` was computed alongside its value.
    pub fn fused_scalar(&mut self, input: Var, value: T, grad: Vec<T>) -> Result<Var> {
        if grad.len() != self.value(input).numel() {
            return shape_err("fused_scalar: gradient length differs from input");
        }
        Ok(self.push(Tensor::scalar(value), Op::Fused { input, grad }))
    }

    /// Mean binary cross-entropy between `logits` and constant `targets` in `[0,1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let tl = self.value(logits);
        if targets.len() != tl.numel() {
            return shape_err("bce_with_logits: target count differs from logits");
        }
        let inv = T::lit(1.0 / targets.len() as f64);
        let mut loss = T::zero();
        let mut grad = Vec::with_capacity(targets.len());
        for (&z, &y) in tl.data().iter().zip(targets) {
            loss = loss + bce_logit(z, y);
            grad.push((sigmoid(z) - y) * inv);
        }
        self.fused_scalar(logits, loss * inv, grad)
    }

    /// Reverse sweep from a scalar `loss`. Gradients are added into the
    /// slots of every `requires_grad` leaf; leaves off the path get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                adj[i] = Some(g);
                continue;
            }
            for (input, delta) in self.vjp(i, &g)? {
                match &mut adj[input.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, &d)| *a = *a + d),
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                match adj.get_mut(i).and_then(Option::take) {
                    Some(g) => node.value.accumulate_grad(&g),
                    None => node.value.accumulate_grad(&vec![T::zero(); node.value.numel()]),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn vjp(&self, i: usize, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = self.nodes[i].value.data();
        let ew = |a: Var, f: &dyn Fn(usize) -> T| -> Vec<(Var, Vec<T>)> {
            vec![(a, (0..g.len()).map(|j| g[j] * f(j)).collect())]
        };
        let res = match self.nodes[i].op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(a, g.to_vec()), (b, g.to_vec())],
            Op::Sub(a, b) => vec![(a, g.to_vec()), (b, g.iter().map(|&x| -x).collect())],
            Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                vec![
                    (a, g.iter().zip(vb).map(|(&u, &y)| u * y).collect()),
                    (b, g.iter().zip(va).map(|(&u, &x)| u * x).collect()),
                ]
            }
            Op::Scale(a, c) => {
                let k = T::lit(c);
                vec![(a, g.iter().map(|&u| u * k).collect())]
            }
            Op::Sigmoid(a) => ew(a, &|j| out[j] * (T::one() - out[j])),
            Op::Sum(a) => vec![(a, vec![g[0]; val(a).len()])],
            Op::Mean(a) => {
                let n = val(a).len();
                vec![(a, vec![g[0] / T::lit(n as f64); n])]
            }
            Op::Linear { x, w } => {
                let (vx, vw) = (val(x), val(w));
                let sx = self.shape(x);
                let (n, c) = (sx[0], sx[1]);
                let d = self.shape(w)[0];
                let mut dx = vec![T::zero(); n * c];
                let mut dw = vec![T::zero(); d * c];
                for r in 0..n {
                    for j in 0..d {
                        let u = g[r * d + j];
                        for k in 0..c {
                            dx[r * c + k] = dx[r * c + k] + u * vw[j * c + k];
                            dw[j * c + k] = dw[j * c + k] + u * vx[r * c + k];
                        }
                    }
                }
                vec![(x, dx), (w, dw)]
            }
            Op::RowDot(a, b) => {
                let (va, vb) = (val(a), val(b));
                let d = va.len() / g.len();
                vec![
                    (a, (0..va.len()).map(|j| g[j / d] * vb[j]).collect()),
                    (b, (0..vb.len()).map(|j| g[j / d] * va[j]).collect()),
                ]
            }
            Op::RowNorm(a) => {
                let va = val(a);
                let d = va.len() / g.len();
                let grad = (0..va.len())
                    .map(|j| {
                        let norm = out[j / d];
                        if norm > T::zero() {
                            g[j / d] * va[j] / norm
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                vec![(a, grad)]
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let (dx, dw) =
                    conv2d_backward(tx.data(), tx.shape(), tw.data(), tw.shape(), stride, pad, g)?;
                vec![(x, dx), (w, dw)]
            }
            Op::AddBias { x, b } => {
                let (n, c, h, w) = nchw(self.shape(x), "add_bias")?;
                let plane = h * w;
                let mut db = vec![T::zero(); c];
                for k in 0..n * c {
                    db[k % c] = db[k % c] + g[k * plane..(k + 1) * plane].iter().copied().sum();
                }
                let _ = n;
                vec![(x, g.to_vec()), (b, db)]
            }
            Op::SubChannelMean { x, m } => {
                let plane = {
                    let (_, _, h, w) = nchw(self.shape(x), "sub_channel_mean")?;
                    h * w
                };
                let dm = (0..val(m).len())
                    .map(|k| -g[k * plane..(k + 1) * plane].iter().copied().sum::<T>())
                    .collect();
                vec![(x, g.to_vec()), (m, dm)]
            }
            Op::Clamp01(a) | Op::QuantAct(a) => {
                let va = val(a);
                ew(a, &|j| quant::saturation_pass(va[j]))
            }
            Op::QuantWeights { w, argmax, max_tanh } => {
                let vw = val(w);
                if max_tanh == T::zero() {
                    vec![(w, g.to_vec())]
                } else {
                    let two = T::lit(2.0);
                    let sech2 = |x: T| T::one() - x.tanh() * x.tanh();
                    // d out_i / d w_i through tanh(w_i)/(2M), with STE on the rounding.
                    let mut dw: Vec<T> = (0..vw.len())
                        .map(|j| g[j] * two * sech2(vw[j]) / (two * max_tanh))
                        .collect();
                    // M = |tanh(w_argmax)| also depends on w.
                    let dm: T = (0..vw.len())
                        .map(|j| g[j] * two * (-vw[j].tanh()) / (two * max_tanh * max_tanh))
                        .sum();
                    let wm = vw[argmax];
                    dw[argmax] = dw[argmax] + dm * wm.tanh().signum() * sech2(wm);
                    vec![(w, dw)]
                }
            }
            Op::Round(a) => vec![(a, vec![T::zero(); g.len()])],
            Op::HardThreshold(a) => vec![(a, g.to_vec())],
            Op::Gap(a) => {
                let (_, _, h, w) = nchw(self.shape(a), "gap")?;
                let plane = h * w;
                let inv = T::lit(1.0 / plane as f64);
                vec![(a, (0..g.len() * plane).map(|j| g[j / plane] * inv).collect())]
            }
            Op::Cap(a) => {
                let (n, c, h, w) = nchw(self.shape(a), "cap")?;
                let plane = h * w;
                let inv = T::lit(1.0 / c as f64);
                let mut da = vec![T::zero(); n * c * plane];
                for b in 0..n {
                    for ch in 0..c {
                        let dst = &mut da[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                        let src = &g[b * plane..(b + 1) * plane];
                        dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s * inv);
                    }
                }
                vec![(a, da)]
            }
            Op::Fused { input, ref grad } => {
                vec![(input, grad.iter().map(|&d| d * g[0]).collect())]
            }
        };
        Ok(res)
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable `-(y·ln σ(z) + (1-y)·ln(1-σ(z)))`.
pub(crate) fn bce_logit<T: Real>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_all_ones_sums_to_nine() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).item(), 9.0);
    }

    #[test]
    fn conv_zero_weight_gives_zeros() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::iota(&[2, 3, 5, 5]));
        let w = g.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let y = g.conv2d(x, w, 2, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_strided_diagonal_kernel() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::iota(&[1, 1, 4, 4]));
        let w = g.constant(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = g.conv2d(x, w, 2, 0).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 9.0, 21.0, 25.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(g.conv2d(x, w, 1, 0), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn gap_examples() {
        let mut g = Graph::<f32>::new();
        let c = g.constant(Tensor::full(&[2, 3, 4, 5], 3.5));
        let p = g.gap(c).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 3.5));
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.gap(x).unwrap();
        assert_eq!(g.value(p).data(), &[2.5]);
        let z = g.constant(Tensor::zeros(&[1, 4, 2, 2]));
        let p = g.gap(z).unwrap();
        assert_eq!(g.value(p).data(), &[0.0; 4]);
    }

    #[test]
    fn cap_examples() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::iota(&[1, 1, 3, 2]));
        let p = g.cap(x).unwrap();
        assert_eq!(g.value(p).data(), g.value(x).data());
        let x = g.constant(t(&[1, 2, 1, 1], &[2.0, 4.0]));
        let p = g.cap(x).unwrap();
        assert_eq!(g.value(p).data(), &[3.0]);
        let x = g.constant(Tensor::full(&[2, 3, 2, 2], -1.0));
        let p = g.cap(x).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::<f32>::new();
        let w = g.param(Tensor::iota(&[2, 3]));
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_square() {
        let mut g = Graph::<f32>::new();
        let w = g.param(t(&[2], &[1.0, -2.0]));
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut g = Graph::<f32>::new();
        let w = g.param(t(&[2], &[1.0, 2.0]));
        let other = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(other).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::<f32>::new();
        let w = g.param(t(&[2], &[1.0, -2.0]));
        let s = g.sum(w);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 2.0]);
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f32>::new();
        let w = g.param(t(&[2], &[1.0, -2.0]));
        let y = g.scale(w, 2.0);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn constants_do_not_receive_grad() {
        let mut g = Graph::<f32>::new();
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let w = g.param(t(&[2], &[3.0, 4.0]));
        let y = g.mul(c, w).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(w).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn gap_broadcast_subtract_is_zero_mean() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4, 5], |i| ((i * 7919) % 101) as f32 / 10.0));
        let m = g.gap(x).unwrap();
        let centered = g.sub_channel_mean(x, m).unwrap();
        let back = g.gap(centered).unwrap();
        assert!(g.value(back).data().iter().all(|v| v.abs() < 1e-6));
    }
}
