//! Reparameterized sampling, divergences and annealing schedules.

use msved_tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{MsvedError, Result};

/// Diagonal Gaussian over the continuous latent, one row per example.
#[derive(Debug, Clone, Copy)]
pub struct GaussianPosterior {
    pub mu: Var,
    pub log_var: Var,
}

/// `z = mu + exp(log_var / 2) * eps`. `eps` is a constant, so gradients
/// reach only `mu` and `log_var`.
pub fn gaussian_reparam(tape: &mut Tape<'_>, post: GaussianPosterior, eps: &Tensor) -> Result<Var> {
    let dims = tape.value(post.mu).dims2()?;
    if eps.dims2()? != dims {
        return Err(MsvedError::Contract(format!(
            "noise shape {:?} does not match latent shape {:?}",
            eps.shape(),
            tape.value(post.mu).shape()
        )));
    }
    let half = tape.scale(post.log_var, 0.5)?;
    let sigma = tape.exp(half)?;
    let e = tape.constant(eps.clone());
    let spread = tape.mul(sigma, e)?;
    Ok(tape.add(post.mu, spread)?)
}

/// Per-row `KL(q || N(0, I))` as an `r x 1` column.
pub fn kl_to_standard_normal(tape: &mut Tape<'_>, post: GaussianPosterior) -> Result<Var> {
    let d = tape.value(post.mu).cols() as f64;
    let mu2 = tape.square(post.mu)?;
    let var = tape.exp(post.log_var)?;
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, post.log_var)?;
    let s = tape.sum_rows(b)?;
    Ok(tape.scale_shift(s, 0.5, -0.5 * d)?)
}

const U_MIN: f64 = 1e-12;
const U_MAX: f64 = 1.0 - 1e-12;

/// `-log(-log(u))` with `u` clamped to `[1e-12, 1 - 1e-12]`.
pub fn sample_gumbel(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(MsvedError::Contract(format!("uniform draw {u} outside (0, 1)")));
    }
    let u = u.clamp(U_MIN, U_MAX);
    Ok(-(-u.ln()).ln())
}

pub fn draw_gumbel(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.random::<f64>().clamp(U_MIN, U_MAX);
    -(-u.ln()).ln()
}

pub fn gumbel_noise(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| draw_gumbel(rng)).collect())
}

pub fn normal_noise(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

/// `argmax_i (log_probs[i] + gumbel[i])`, lowest index on ties.
pub fn gumbel_max_with_noise(log_probs: &[f64], gumbel: &[f64]) -> Result<usize> {
    if log_probs.len() != gumbel.len() || log_probs.is_empty() {
        return Err(MsvedError::Contract("log-probabilities and noise must be nonempty and equal length".into()));
    }
    if log_probs.iter().all(|&l| l == f64::NEG_INFINITY) {
        return Err(MsvedError::Contract("every class has zero probability".into()));
    }
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, (&l, &g)) in log_probs.iter().zip(gumbel).enumerate() {
        let v = l + g;
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    Ok(best)
}

pub fn gumbel_max_sample(log_probs: &[f64], rng: &mut impl Rng) -> Result<usize> {
    let g: Vec<f64> = (0..log_probs.len()).map(|_| draw_gumbel(rng)).collect();
    gumbel_max_with_noise(log_probs, &g)
}

/// Relaxed one-hot sample `softmax((log_probs + gumbel) / tau)`, row-wise.
pub fn gumbel_softmax(tape: &mut Tape<'_>, log_probs: Var, tau: f64, gumbel: &Tensor) -> Result<Var> {
    let g = tape.constant(gumbel.clone());
    let noisy = tape.add(log_probs, g)?;
    Ok(tape.softmax(noisy, tau)?)
}

/// `sum_k log(1 / N_k)` for a uniform prior over each category.
pub fn uniform_tag_log_prior(sizes: &[usize]) -> Result<f64> {
    if sizes.is_empty() {
        return Err(MsvedError::Schema("no tag categories".into()));
    }
    if sizes.contains(&0) {
        return Err(MsvedError::Schema("tag category with no labels".into()));
    }
    Ok(-sizes.iter().map(|&n| (n as f64).ln()).sum::<f64>())
}

/// Drop mask for decoder inputs: 0.0 where the token is replaced by a zero
/// vector, 1.0 where it is kept.
pub fn dropout_keep_mask(rng: &mut impl Rng, n: usize, beta: f64) -> Vec<f64> {
    (0..n)
        .map(|_| if beta > 0.0 && rng.random::<f64>() < beta { 0.0 } else { 1.0 })
        .collect()
}

/// Applies a keep mask (`r x 1`) to embeddings: kept rows pass unchanged,
/// dropped rows become zero. No rescaling.
pub fn decoder_input_dropout(tape: &mut Tape<'_>, embeddings: Var, keep: &[f64]) -> Result<Var> {
    if keep.iter().all(|&k| k == 1.0) {
        return Ok(embeddings);
    }
    let mask = tape.constant(Tensor::matrix(keep.len(), 1, keep.to_vec()));
    Ok(tape.scale_rows(embeddings, mask)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealConfig {
    pub lambda_max: f64,
    pub ramp_steps: u64,
    pub tau_start: f64,
    pub tau_min: f64,
    pub tau_rate: f64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        AnnealConfig {
            lambda_max: 0.2,
            ramp_steps: 1000,
            tau_start: 1.0,
            tau_min: 0.5,
            tau_rate: 1e-4,
        }
    }
}

impl AnnealConfig {
    /// Rate at which the temperature reaches `tau_min` after `steps` updates.
    pub fn rate_reaching_floor_at(tau_start: f64, tau_min: f64, steps: u64) -> f64 {
        if steps == 0 || tau_min >= tau_start {
            return 0.0;
        }
        (tau_start / tau_min).ln() / steps as f64
    }

    pub fn lambda_at(&self, step: u64) -> f64 {
        if self.ramp_steps == 0 || step >= self.ramp_steps {
            self.lambda_max
        } else {
            self.lambda_max * (step as f64 / self.ramp_steps as f64)
        }
    }

    pub fn tau_at(&self, step: u64) -> f64 {
        (self.tau_start * (-self.tau_rate * step as f64).exp()).max(self.tau_min)
    }

    pub fn state_at(&self, step: u64) -> AnnealState {
        AnnealState {
            step,
            lambda: self.lambda_at(step),
            tau: self.tau_at(step),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealState {
    pub step: u64,
    pub lambda: f64,
    pub tau: f64,
}

impl AnnealState {
    /// Fixed coefficients, e.g. for evaluation.
    pub fn fixed(lambda: f64, tau: f64) -> Self {
        AnnealState { step: 0, lambda, tau }
    }
}

pub fn anneal_step(state: AnnealState, config: &AnnealConfig) -> AnnealState {
    config.state_at(state.step + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn post(tape: &mut Tape<'_>, mu: Vec<f64>, log_var: Vec<f64>) -> GaussianPosterior {
        GaussianPosterior {
            mu: tape.constant(Tensor::row(mu)),
            log_var: tape.constant(Tensor::row(log_var)),
        }
    }

    #[test]
    fn reparam_examples() {
        let mut tape = Tape::new();
        let p = post(&mut tape, vec![0.0; 3], vec![0.0; 3]);
        let z = gaussian_reparam(&mut tape, p, &Tensor::row(vec![0.3, -1.0, 2.0])).unwrap();
        assert_eq!(tape.value(z).data(), &[0.3, -1.0, 2.0]);

        let lv = vec![2.0 * 0.5f64.ln(), 2.0 * 0.1f64.ln()];
        let p = post(&mut tape, vec![1.0, 2.0], lv);
        let z = gaussian_reparam(&mut tape, p, &Tensor::row(vec![2.0, -1.0])).unwrap();
        let v = tape.value(z).data();
        assert!((v[0] - 2.0).abs() < 1e-12 && (v[1] - 1.9).abs() < 1e-12);
        assert!(gaussian_reparam(&mut tape, p, &Tensor::row(vec![1.0])).is_err());
    }

    #[test]
    fn reparam_gradient_skips_noise() {
        let mut tape = Tape::new();
        let mu = tape.leaf(Tensor::row(vec![0.5]), true);
        let lv = tape.leaf(Tensor::row(vec![0.2]), true);
        let z = gaussian_reparam(&mut tape, GaussianPosterior { mu, log_var: lv }, &Tensor::row(vec![1.5])).unwrap();
        let s = tape.sum_all(z).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(mu).unwrap(), &[1.0]);
        let want = 0.5 * (0.1f64).exp() * 1.5;
        assert!((g.get(lv).unwrap()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn kl_examples() {
        let mut tape = Tape::new();
        let p = post(&mut tape, vec![0.0; 4], vec![0.0; 4]);
        let k = kl_to_standard_normal(&mut tape, p).unwrap();
        assert_eq!(tape.scalar(k), 0.0);
        let p = post(&mut tape, vec![1.0], vec![0.0]);
        let k = kl_to_standard_normal(&mut tape, p).unwrap();
        assert_eq!(tape.scalar(k), 0.5);
    }

    #[test]
    fn gumbel_examples() {
        assert!(sample_gumbel((-1.0f64).exp()).unwrap().abs() < 1e-15);
        let u = (-std::f64::consts::E).exp();
        assert!((sample_gumbel(u).unwrap() + 1.0).abs() < 1e-12);
        assert!(sample_gumbel(0.0).is_err());
        assert!(sample_gumbel(1.0).is_err());
    }

    #[test]
    fn gumbel_max_degenerate_and_ties() {
        let mut rng = stream(0, Purpose::StepNoise, 0);
        let lp = [0.0, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for _ in 0..100 {
            assert_eq!(gumbel_max_sample(&lp, &mut rng).unwrap(), 0);
        }
        assert_eq!(gumbel_max_with_noise(&[0.0, 0.0, 0.0], &[1.0, 1.0, 0.5]).unwrap(), 0);
        assert!(gumbel_max_with_noise(&[f64::NEG_INFINITY; 2], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn high_temperature_is_uniform() {
        let mut tape = Tape::new();
        let lp = tape.constant(Tensor::row(vec![-0.1, -3.0, -7.0, -0.5]));
        let g = Tensor::row(vec![0.3, -0.2, 1.1, 0.0]);
        let y = gumbel_softmax(&mut tape, lp, 1e6, &g).unwrap();
        assert!(tape.value(y).data().iter().all(|&p| (p - 0.25).abs() < 1e-3));
    }

    #[test]
    fn uniform_prior_examples() {
        assert!((uniform_tag_log_prior(&[2]).unwrap() + 2f64.ln()).abs() < 1e-15);
        assert!((uniform_tag_log_prior(&[2, 3, 4]).unwrap() + 24f64.ln()).abs() < 1e-12);
        assert!(uniform_tag_log_prior(&[2, 0]).is_err());
        assert!(uniform_tag_log_prior(&[]).is_err());
    }

    #[test]
    fn schedules() {
        let c = AnnealConfig {
            ramp_steps: 100,
            tau_rate: AnnealConfig::rate_reaching_floor_at(1.0, 0.5, 300),
            ..AnnealConfig::default()
        };
        assert_eq!(c.lambda_at(0), 0.0);
        assert_eq!(c.lambda_at(50), 0.1);
        assert_eq!(c.lambda_at(100), 0.2);
        assert_eq!(c.lambda_at(10_000), 0.2);
        assert_eq!(c.tau_at(0), 1.0);
        assert!((c.tau_at(300) - 0.5).abs() < 1e-12);
        assert_eq!(c.tau_at(100_000), 0.5);
        let s = anneal_step(c.state_at(49), &c);
        assert_eq!(s, c.state_at(50));
    }

    #[test]
    fn dropout_identity_at_zero() {
        let mut rng = stream(1, Purpose::StepNoise, 0);
        assert!(dropout_keep_mask(&mut rng, 100, 0.0).iter().all(|&k| k == 1.0));
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let same = decoder_input_dropout(&mut tape, e, &[1.0, 1.0]).unwrap();
        assert_eq!(same, e);
        let d = decoder_input_dropout(&mut tape, e, &[0.0, 1.0]).unwrap();
        assert_eq!(tape.value(d).data(), &[0.0, 0.0, 3.0, 4.0]);
    }
}
