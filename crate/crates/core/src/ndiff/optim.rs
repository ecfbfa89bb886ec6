use super::Tensor;
use crate::error::{Error, Result};

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_stab: f64,
}

impl AdamState {
    pub fn new<'a>(lr: f64, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let lens: Vec<usize> = params.into_iter().map(Tensor::len).collect();
        Self {
            step_count: 0,
            first_moment: lens.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: lens.iter().map(|&n| vec![0.0; n]).collect(),
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps_stab: 1e-8,
        }
    }

    /// Applies one update from the tensors' accumulated gradients, then
    /// zeroes them.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>) -> Result<()> {
        let mut params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != self.first_moment.len()
            || params
                .iter()
                .zip(&self.first_moment)
                .any(|(p, m)| p.len() != m.len())
        {
            return Err(Error::StaleState);
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in params
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            if !p.requires_grad() {
                continue;
            }
            let grad = p.grad().to_vec();
            for (i, g) in grad.into_iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p.value_mut()[i] -= self.lr * mhat / (vhat.sqrt() + self.eps_stab);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<'a>(params: impl IntoIterator<Item = &'a mut Tensor>, max_norm: f64) -> f64 {
    let mut params: Vec<&mut Tensor> = params.into_iter().collect();
    let norm = params
        .iter()
        .flat_map(|p| p.grad().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for p in &mut params {
            p.grad_mut().iter_mut().for_each(|g| *g *= k);
        }
    }
    norm
}

/// `dst <- (1 - tau) * dst + tau * src`.
pub fn polyak_update(src: &[Tensor], dst: &mut [Tensor], tau: f64) -> Result<()> {
    if src.len() != dst.len() {
        return Err(Error::ShapeMismatch {
            op: "polyak_update",
            lhs: vec![src.len()],
            rhs: vec![dst.len()],
        });
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidConfig(format!("tau {tau} outside [0, 1]")));
    }
    for (s, d) in src.iter().zip(dst.iter()) {
        if s.shape() != d.shape() {
            return Err(Error::ShapeMismatch {
                op: "polyak_update",
                lhs: s.shape().to_vec(),
                rhs: d.shape().to_vec(),
            });
        }
    }
    for (s, d) in src.iter().zip(dst.iter_mut()) {
        for (x, y) in s.value().iter().zip(d.value_mut()) {
            *y = (1.0 - tau) * *y + tau * x;
        }
    }
    Ok(())
}

/// Hard target-network copy.
pub fn copy_params(src: &[Tensor], dst: &mut [Tensor]) -> Result<()> {
    polyak_update(src, dst, 1.0)
}
