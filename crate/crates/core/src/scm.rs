//! Switch control machine: gated one-to-one feature distillation from a
//! full-precision teacher into its quantized copy.
//!
//! Each distillation scale contributes a query (student side) and a key
//! (teacher side) built from globally pooled features. Their scaled dot
//! products are turned into binary on/off decisions with a two-logit
//! Gumbel-softmax, whose second logit is the constant `off_logit`. Only the
//! diagonal decisions gate the loss: scale `i` of the teacher teaches scale
//! `i` of the student.
//!
//! The plain functions here work on finished tensors and are used for
//! reporting; the `*_graph` functions record the same math on a [`Graph`]
//! for training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_D_EMBED: usize = 64;
pub const DEFAULT_TAU: f64 = 1.0;
pub const DEFAULT_OFF_LOGIT: f64 = 0.0;
/// Distillation weight; best-performing setting of the original β sweep.
pub const DEFAULT_BETA: f64 = 400.0;

/// Trainable projections and gate hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    /// One `[d_embed, C_j]` map per scale, applied to teacher features.
    pub proj_teacher: Vec<Tensor>,
    /// One `[d_embed, C_i]` map per scale, applied to student features.
    pub proj_student: Vec<Tensor>,
    pub d_embed: usize,
    pub tau: f64,
    pub off_logit: f64,
}

impl GateParams {
    /// Uniform `±1/√C` initialization, seeded.
    pub fn init(tap_channels: &[usize], d_embed: usize, tau: f64, off_logit: f64, seed: u64) -> Result<Self> {
        if !(tau > 0.0) {
            return invalid(format!("tau must be positive, got {tau}"));
        }
        if d_embed == 0 {
            return invalid("d_embed must be positive");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut proj = |c: usize| {
            let bound = 1.0 / (c as f32).sqrt();
            Tensor::from_fn(&[d_embed, c], |_| rng.random_range(-bound..bound))
        };
        let proj_teacher = tap_channels.iter().map(|&c| proj(c)).collect();
        let proj_student = tap_channels.iter().map(|&c| proj(c)).collect();
        Ok(Self {
            proj_teacher,
            proj_student,
            d_embed,
            tau,
            off_logit,
        })
    }

    pub fn scales(&self) -> usize {
        self.proj_student.len()
    }
}

/// Gumbel noise source for the gate.
#[derive(Clone, Copy, Debug)]
pub enum Noise {
    Seeded(u64),
    /// `G = 0`: deterministic softmax of the raw logits.
    Suppressed,
}

/// Draws a standard Gumbel variate `-ln(-ln U)` with `U ∈ (0, 1)`.
pub fn sample_gumbel<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return -(-u.ln()).ln();
        }
    }
}

/// Soft on-probabilities (`m×m`) and the diagonal gate vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub m: usize,
    /// Row-major `m×m` matrix of on-probabilities.
    pub soft: Vec<f64>,
    /// Row-major `m×m` argmax decisions in `{0, 1}`.
    pub hard: Vec<f64>,
    /// Diagonal of `hard` when the decision was made in hard mode, else of `soft`.
    pub alpha: Vec<f64>,
}

fn pooled(feature: &Tensor, sample: usize) -> Result<Vec<f32>> {
    let [n, c, h, w] = feature.shape() else {
        return shape_err(format!("expected [N,C,H,W] features, got {:?}", feature.shape()));
    };
    if sample >= *n {
        return shape_err(format!("sample {sample} out of batch {n}"));
    }
    let plane = h * w;
    Ok((0..*c)
        .map(|ch| {
            let start = (sample * c + ch) * plane;
            feature.data()[start..start + plane].iter().sum::<f32>() / plane as f32
        })
        .collect())
}

fn project(p: &Tensor, v: &[f32]) -> Result<Vec<f32>> {
    let [d, c] = p.shape() else {
        return shape_err("projection must be 2-D");
    };
    if *c != v.len() {
        return shape_err(format!("projection expects {c} channels, feature has {}", v.len()));
    }
    Ok((0..*d)
        .map(|j| p.data()[j * c..(j + 1) * c].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect())
}

fn check_scales(student: &[Tensor], teacher: &[Tensor], params: Option<&GateParams>) -> Result<()> {
    if student.len() != teacher.len() {
        return invalid(format!(
            "student has {} scales, teacher has {}",
            student.len(),
            teacher.len()
        ));
    }
    if let Some(p) = params {
        if p.scales() != student.len() || p.proj_teacher.len() != student.len() {
            return invalid(format!(
                "gate has {} projections for {} scales",
                p.scales(),
                student.len()
            ));
        }
    }
    for (s, t) in student.iter().zip(teacher) {
        if s.shape().len() != 4 || t.shape().len() != 4 {
            return shape_err("features must be [N,C,H,W]");
        }
        if s.shape()[0] != t.shape()[0] || s.shape()[2..] != t.shape()[2..] {
            return shape_err(format!(
                "teacher {:?} and student {:?} features do not align",
                t.shape(),
                s.shape()
            ));
        }
    }
    Ok(())
}

/// Queries `q_i = W_i·GAP(s_i)` and keys `k_j = W_j·GAP(t_j)` for one batch
/// sample, each returned as an `[m, d_embed]` matrix.
pub fn project_features(
    student_feats: &[Tensor],
    teacher_feats: &[Tensor],
    params: &GateParams,
    sample: usize,
) -> Result<(Tensor, Tensor)> {
    check_scales(student_feats, teacher_feats, Some(params))?;
    let m = student_feats.len();
    let mut q = Vec::with_capacity(m * params.d_embed);
    let mut k = Vec::with_capacity(m * params.d_embed);
    for i in 0..m {
        q.extend(project(&params.proj_student[i], &pooled(&student_feats[i], sample)?)?);
        k.extend(project(&params.proj_teacher[i], &pooled(&teacher_feats[i], sample)?)?);
    }
    Ok((
        Tensor::new(&[m, params.d_embed], q)?,
        Tensor::new(&[m, params.d_embed], k)?,
    ))
}

/// `a = q·kᵀ / √d` for `[m, d]` queries and keys.
pub fn attention_scores(queries: &Tensor, keys: &Tensor) -> Result<Tensor> {
    let ([m, d], [m2, d2]) = (queries.shape(), keys.shape()) else {
        return shape_err("queries and keys must be 2-D");
    };
    if d != d2 || m != m2 {
        return shape_err(format!(
            "queries {:?} and keys {:?} differ",
            queries.shape(),
            keys.shape()
        ));
    }
    let (m, d) = (*m, *d);
    let inv = 1.0 / (d as f32).sqrt();
    let q = queries.data();
    let k = keys.data();
    let a = Tensor::from_fn(&[m, m], |idx| {
        let (i, j) = (idx / m, idx % m);
        q[i * d..(i + 1) * d]
            .iter()
            .zip(&k[j * d..(j + 1) * d])
            .map(|(x, y)| x * y)
            .sum::<f32>()
            * inv
    });
    Ok(a)
}

/// Two-logit Gumbel-softmax on every entry of `a`: logits `(a_ij, off_logit)`,
/// independent Gumbel noise per logit, temperature `tau`. Returns the "on"
/// probabilities and their argmax decisions.
pub fn gumbel_binarize(a: &Tensor, tau: f64, off_logit: f64, noise: Noise, hard: bool) -> Result<GateDecision> {
    if !(tau > 0.0) {
        return invalid(format!("tau must be positive, got {tau}"));
    }
    let [m, m2] = a.shape() else {
        return shape_err("attention map must be square");
    };
    if m != m2 {
        return shape_err("attention map must be square");
    }
    let mut rng = match noise {
        Noise::Seeded(s) => Some(ChaCha8Rng::seed_from_u64(s)),
        Noise::Suppressed => None,
    };
    let mut soft = Vec::with_capacity(a.numel());
    for &logit in a.data() {
        let (g_on, g_off) = match rng.as_mut() {
            Some(r) => (sample_gumbel(r), sample_gumbel(r)),
            None => (0.0, 0.0),
        };
        soft.push(two_logit_on(f64::from(logit) + g_on, off_logit + g_off, tau));
    }
    let hard_m: Vec<f64> = soft.iter().map(|&p| if p >= 0.5 { 1.0 } else { 0.0 }).collect();
    let src = if hard { &hard_m } else { &soft };
    let alpha = (0..*m).map(|i| src[i * m + i]).collect();
    Ok(GateDecision {
        m: *m,
        soft,
        hard: hard_m,
        alpha,
    })
}

/// Softmax probability of the first of two logits at temperature `tau`.
pub fn two_logit_on(on: f64, off: f64, tau: f64) -> f64 {
    let z = (on - off) / tau;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Diagonal of the decision matrix: the per-scale distillation switches.
pub fn distill_mask(decision: &GateDecision) -> Vec<f64> {
    decision.alpha.clone()
}

/// `Σ_i α_i ‖CAP(t_i) − CAP(s_i)‖₂`, averaged over the batch.
pub fn feature_distill_loss(teacher_feats: &[Tensor], student_feats: &[Tensor], alpha: &[f64]) -> Result<f64> {
    check_scales(student_feats, teacher_feats, None)?;
    if alpha.len() != teacher_feats.len() {
        return invalid(format!("{} gates for {} scales", alpha.len(), teacher_feats.len()));
    }
    let n = teacher_feats.first().map_or(1, |t| t.shape()[0]);
    let mut total = 0.0;
    for ((t, s), &a) in teacher_feats.iter().zip(student_feats).zip(alpha) {
        let (c_t, c_s) = (t.shape()[1], s.shape()[1]);
        let plane = t.shape()[2] * t.shape()[3];
        for b in 0..n {
            let mut sq = 0.0f64;
            for p in 0..plane {
                let mean = |f: &Tensor, c: usize| -> f64 {
                    (0..c).map(|ch| f64::from(f.data()[(b * c + ch) * plane + p])).sum::<f64>() / c as f64
                };
                sq += (mean(t, c_t) - mean(s, c_s)).powi(2);
            }
            total += a * sq.sqrt();
        }
    }
    Ok(total / n as f64)
}

/// `β·L_F + L_dec`.
pub fn total_loss(l_f: f64, l_dec: f64, beta: f64) -> Result<f64> {
    if !(beta >= 0.0) {
        return invalid(format!("beta must be non-negative, got {beta}"));
    }
    Ok(beta * l_f + l_dec)
}

/// Graph handles of the gate projections.
#[derive(Clone, Debug)]
pub struct GateVars {
    pub proj_teacher: Vec<Var>,
    pub proj_student: Vec<Var>,
}

impl GateVars {
    pub fn register(g: &mut Graph, params: &GateParams) -> Self {
        Self {
            proj_teacher: params.proj_teacher.iter().map(|t| g.param(t.clone())).collect(),
            proj_student: params.proj_student.iter().map(|t| g.param(t.clone())).collect(),
        }
    }
}

/// Per-sample diagonal attention logits `a_ii`, one `[N]` node per scale.
pub fn diagonal_logits_graph(
    g: &mut Graph,
    student_taps: &[Var],
    teacher_taps: &[Var],
    vars: &GateVars,
    d_embed: usize,
) -> Result<Vec<Var>> {
    if student_taps.len() != teacher_taps.len() || vars.proj_student.len() != student_taps.len() {
        return invalid("scale count mismatch between taps and gate projections");
    }
    let inv = 1.0 / (d_embed as f64).sqrt();
    let mut out = Vec::with_capacity(student_taps.len());
    for i in 0..student_taps.len() {
        let ps = g.gap(student_taps[i])?;
        let q = g.linear(ps, vars.proj_student[i])?;
        let pt = g.gap(teacher_taps[i])?;
        let k = g.linear(pt, vars.proj_teacher[i])?;
        let dot = g.row_dot(q, k)?;
        out.push(g.scale(dot, inv));
    }
    Ok(out)
}

/// Soft gate `σ(((a + G_on) − (off + G_off)) / τ)` for `[N]` logits.
/// `noise` holds one `(G_on, G_off)` pair per sample.
pub fn soft_gate_graph(g: &mut Graph, logits: Var, noise: &[(f64, f64)], off_logit: f64, tau: f64) -> Result<Var> {
    if noise.len() != g.value(logits).numel() {
        return shape_err("one noise pair per gate logit is required");
    }
    let shift = Tensor::new(
        g.shape(logits),
        noise.iter().map(|(on, off)| (on - off - off_logit) as f32).collect(),
    )?;
    let shift = g.constant(shift);
    let z = g.add(logits, shift)?;
    let z = g.scale(z, 1.0 / tau);
    Ok(g.sigmoid(z))
}

/// Batch-mean of `Σ_i α_i ‖CAP(t_i) − CAP(s_i)‖₂` with per-sample gates `α_i: [N]`.
pub fn feature_distill_loss_graph(g: &mut Graph, teacher_taps: &[Var], student_taps: &[Var], alphas: &[Var]) -> Result<Var> {
    if teacher_taps.len() != student_taps.len() || alphas.len() != teacher_taps.len() || alphas.is_empty() {
        return invalid("scale count mismatch in distillation loss");
    }
    let mut acc: Option<Var> = None;
    for i in 0..teacher_taps.len() {
        if g.shape(teacher_taps[i])[0] != g.shape(student_taps[i])[0]
            || g.shape(teacher_taps[i])[2..] != g.shape(student_taps[i])[2..]
        {
            return shape_err("teacher and student taps do not align");
        }
        let ct = g.cap(teacher_taps[i])?;
        let cs = g.cap(student_taps[i])?;
        let diff = g.sub(ct, cs)?;
        let norm = g.row_norm(diff);
        let term = g.mul(alphas[i], norm)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(g.mean(acc.expect("at least one scale")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feat(c: usize, values: &[f32], h: usize) -> Tensor {
        Tensor::from_fn(&[1, c, h, h], |i| values[i / (h * h)])
    }

    #[test]
    fn zero_features_project_to_zero() {
        let p = GateParams::init(&[3], 8, 1.0, 0.0, 1).unwrap();
        let z = vec![Tensor::zeros(&[1, 3, 2, 2])];
        let (q, k) = project_features(&z, &z, &p, 0).unwrap();
        assert!(q.data().iter().chain(k.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn identity_padded_projection() {
        let mut p = GateParams::init(&[2], 4, 1.0, 0.0, 1).unwrap();
        let eye = Tensor::new(&[4, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        p.proj_student = vec![eye.clone()];
        p.proj_teacher = vec![eye];
        let s = vec![feat(2, &[1.5, -2.0], 3)];
        let (q, _) = project_features(&s, &s, &p, 0).unwrap();
        assert_eq!(q.data(), &[1.5, -2.0, 0.0, 0.0]);
    }

    #[test]
    fn projection_is_homogeneous() {
        let p = GateParams::init(&[2], 5, 1.0, 0.0, 3).unwrap();
        let s = vec![feat(2, &[0.3, 0.7], 2)];
        let s2 = vec![feat(2, &[0.6, 1.4], 2)];
        let (q1, _) = project_features(&s, &s, &p, 0).unwrap();
        let (q2, _) = project_features(&s2, &s2, &p, 0).unwrap();
        for (a, b) in q1.data().iter().zip(q2.data()) {
            assert!((2.0 * a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn scale_mismatch_rejected() {
        let p = GateParams::init(&[2, 2], 4, 1.0, 0.0, 1).unwrap();
        let s = vec![feat(2, &[0.0, 0.0], 2)];
        assert!(project_features(&s, &[], &p, 0).is_err());
        assert!(project_features(&s, &s, &p, 0).is_err());
    }

    #[test]
    fn attention_examples() {
        let q = Tensor::new(&[1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(attention_scores(&q, &q).unwrap().data(), &[0.5]);
        let z = Tensor::zeros(&[2, 4]);
        assert!(attention_scores(&z, &z).unwrap().data().iter().all(|&v| v == 0.0));
        let a = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let s = attention_scores(&a, &b).unwrap();
        assert_eq!(s.data()[0], 0.0);
        assert_eq!(s.data()[3], 0.0);
    }

    #[test]
    fn gumbel_examples() {
        let a = Tensor::new(&[1, 1], vec![0.7]).unwrap();
        for tau in [0.1, 1.0, 5.0] {
            let d = gumbel_binarize(&a, tau, 0.7, Noise::Suppressed, false).unwrap();
            assert!((d.soft[0] - 0.5).abs() < 1e-7);
        }
        let a = Tensor::new(&[1, 1], vec![10.0]).unwrap();
        let d = gumbel_binarize(&a, 0.1, 0.0, Noise::Suppressed, false).unwrap();
        assert!((d.soft[0] - 1.0).abs() < 1e-6);
        let a = Tensor::from_fn(&[3, 3], |i| i as f32 * 0.3 - 1.0);
        let d = gumbel_binarize(&a, 1.0, 0.0, Noise::Seeded(5), true).unwrap();
        assert!(d.alpha.iter().all(|&x| x == 0.0 || x == 1.0));
    }

    #[test]
    fn mask_is_diagonal() {
        let d = GateDecision {
            m: 2,
            soft: vec![1.0, 0.3, 0.8, 0.0],
            hard: vec![1.0, 0.0, 1.0, 0.0],
            alpha: vec![1.0, 0.0],
        };
        assert_eq!(distill_mask(&d), vec![1.0, 0.0]);
        let a = Tensor::zeros(&[4, 4]);
        let d = gumbel_binarize(&a, 1.0, 0.0, Noise::Suppressed, false).unwrap();
        assert_eq!(distill_mask(&d), vec![0.5; 4]);
        let logits = [2.0f32, -1.0, 0.5];
        let a = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { logits[i / 4] } else { 9.0 });
        let d = gumbel_binarize(&a, 0.5, 0.25, Noise::Suppressed, false).unwrap();
        for (i, &l) in logits.iter().enumerate() {
            let expected = 1.0 / (1.0 + (-(f64::from(l) - 0.25) / 0.5).exp());
            assert!((d.alpha[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn distill_loss_examples() {
        let t = vec![Tensor::full(&[1, 2, 2, 2], 4.0)];
        let s = vec![Tensor::full(&[1, 2, 2, 2], 1.0)];
        assert_eq!(feature_distill_loss(&t, &s, &[1.0]).unwrap(), 6.0);
        assert_eq!(feature_distill_loss(&t, &t, &[1.0]).unwrap(), 0.0);
        assert_eq!(feature_distill_loss(&t, &s, &[0.0]).unwrap(), 0.0);
        assert!(feature_distill_loss(&t, &[Tensor::zeros(&[1, 2, 3, 3])], &[1.0]).is_err());
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(3.0, 1.25, 0.0).unwrap(), 1.25);
        assert_eq!(total_loss(0.0, 1.25, 400.0).unwrap(), 1.25);
        assert!((total_loss(0.01, 1.0, 400.0).unwrap() - 5.0).abs() < 1e-12);
        assert!(total_loss(1.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn graph_path_matches_plain_path() {
        let p = GateParams::init(&[2, 3], 6, 0.7, 0.1, 9).unwrap();
        let s: Vec<Tensor> = [2usize, 3]
            .iter()
            .map(|&c| Tensor::from_fn(&[2, c, 3, 3], |i| ((i * 37) % 11) as f32 / 11.0))
            .collect();
        let t: Vec<Tensor> = [2usize, 3]
            .iter()
            .map(|&c| Tensor::from_fn(&[2, c, 3, 3], |i| ((i * 13) % 7) as f32 / 7.0))
            .collect();
        let mut g = Graph::new();
        let vars = GateVars::register(&mut g, &p);
        let sv: Vec<Var> = s.iter().map(|x| g.constant(x.clone())).collect();
        let tv: Vec<Var> = t.iter().map(|x| g.constant(x.clone())).collect();
        let logits = diagonal_logits_graph(&mut g, &sv, &tv, &vars, p.d_embed).unwrap();
        for sample in 0..2 {
            let (q, k) = project_features(&s, &t, &p, sample).unwrap();
            let a = attention_scores(&q, &k).unwrap();
            let d = gumbel_binarize(&a, p.tau, p.off_logit, Noise::Suppressed, false).unwrap();
            for (i, &l) in logits.iter().enumerate() {
                let gate = soft_gate_graph(&mut g, l, &[(0.0, 0.0), (0.0, 0.0)], p.off_logit, p.tau).unwrap();
                let got = f64::from(g.value(gate).data()[sample]);
                assert!((got - d.alpha[i]).abs() < 1e-6, "scale {i} sample {sample}");
            }
        }
    }
}
