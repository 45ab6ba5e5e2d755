use msved_tensor::Tensor;

use crate::error::{MsvedError, Result};

/// Adadelta with per-coordinate running averages of squared gradients and
/// squared updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adadelta {
    pub rho: f64,
    pub epsilon: f64,
    /// Running average of squared gradients, one buffer per tensor.
    pub sq_grad: Vec<Vec<f64>>,
    /// Running average of squared updates.
    pub sq_update: Vec<Vec<f64>>,
}

impl Adadelta {
    pub fn new(rho: f64, epsilon: f64, params: &[Tensor]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|t| vec![0.0; t.numel()]).collect();
        Adadelta {
            rho,
            epsilon,
            sq_grad: zeros.clone(),
            sq_update: zeros,
        }
    }

    /// Applies one update in place (`params += delta`) from gradients of a
    /// loss to minimize.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.sq_grad.len() {
            return Err(MsvedError::Contract("optimizer state does not match parameters".into()));
        }
        let (rho, eps) = (self.rho, self.epsilon);
        for (((p, g), eg), ed) in params.iter_mut().zip(grads).zip(&mut self.sq_grad).zip(&mut self.sq_update) {
            if g.len() != p.numel() {
                return Err(MsvedError::Contract("gradient length does not match parameter".into()));
            }
            for (((x, &gi), egi), edi) in p.data_mut().iter_mut().zip(g).zip(eg.iter_mut()).zip(ed.iter_mut()) {
                *egi = rho * *egi + (1.0 - rho) * gi * gi;
                let delta = -((*edi + eps).sqrt() / (*egi + eps).sqrt()) * gi;
                *edi = rho * *edi + (1.0 - rho) * delta * delta;
                *x += delta;
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping. Non-finite gradients are an error.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(MsvedError::Tensor(msved_tensor::TensorError::NonFinite { op: "gradient" }));
    }
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    Ok(norm)
}
