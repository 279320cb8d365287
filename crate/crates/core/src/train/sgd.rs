use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdSettings {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One momentum-SGD update: `v ← μ·v + g + λ·p`, `p ← p − lr·v`.
pub fn sgd_step(param: &mut [f32], velocity: &mut [f32], grad: &[f32], s: SgdSettings) -> Result<()> {
    if param.len() != velocity.len() || param.len() != grad.len() {
        return shape_err(format!(
            "sgd_step: param {}, velocity {}, grad {}",
            param.len(),
            velocity.len(),
            grad.len()
        ));
    }
    let (lr, mu, wd) = (s.lr as f32, s.momentum as f32, s.weight_decay as f32);
    for ((p, v), &g) in param.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum buffers for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub settings: SgdSettings,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(settings: SgdSettings, sizes: impl IntoIterator<Item = usize>) -> Self {
        Self {
            settings,
            velocity: sizes.into_iter().map(|n| vec![0.0; n]).collect(),
        }
    }

    /// Applies one update to every parameter, in the order the buffers were created.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (&'a mut [f32], &'a [f32])>) -> Result<()> {
        let mut count = 0;
        for ((p, g), v) in params.into_iter().zip(self.velocity.iter_mut()) {
            sgd_step(p, v, g, self.settings)?;
            count += 1;
        }
        if count != self.velocity.len() {
            return shape_err(format!(
                "optimizer tracks {} tensors, got {count}",
                self.velocity.len()
            ));
        }
        Ok(())
    }
}
