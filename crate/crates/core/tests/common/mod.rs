#![allow(dead_code)]

use msved::seq_model::{ModelConfig, ModelParams, Net};
use msved_tensor::{Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn mini_config() -> ModelConfig {
    ModelConfig {
        char_dim: 4,
        tag_dim: 3,
        hidden: 8,
        latent: 4,
        mlp_hidden: 6,
        attention_dim: 5,
    }
}

/// Six symbols: the four specials plus two characters.
pub const MINI_VOCAB: usize = 6;
pub const MINI_TAGS: &[usize] = &[3, 2];

/// Every tensor drawn uniformly from [-0.5, 0.5], zero-initialized layers
/// included.
pub fn mini_params(seed: u64) -> ModelParams {
    let mut p = ModelParams::new(mini_config(), MINI_VOCAB, MINI_TAGS, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in p.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
    }
    p
}

pub fn evaluate<F>(params: &ModelParams, f: &F) -> f64
where
    F: for<'p> Fn(&mut Tape<'p>, &Net<'p>) -> msved::Result<Var>,
{
    let mut tape = Tape::inference();
    let net = params.bind(&mut tape);
    let v = f(&mut tape, &net).unwrap();
    tape.scalar(v)
}

/// Norm-wise relative error per parameter tensor between tape gradients
/// and central differences: `|g - n| / (|g| + |n|)` over the whole tensor.
/// Exact zeros on both sides count as agreement.
pub fn model_gradient_errors<F>(params: &ModelParams, f: F) -> Vec<(String, f64)>
where
    F: for<'p> Fn(&mut Tape<'p>, &Net<'p>) -> msved::Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let net = params.bind(&mut tape);
        let out = f(&mut tape, &net).unwrap();
        let g = tape.backward(out).unwrap();
        net.collect_grads(&g)
    };
    let base = evaluate(params, &f);
    assert_eq!(base.to_bits(), evaluate(params, &f).to_bits(), "objective is not deterministic");
    let mut probe = params.clone();
    let mut out = Vec::new();
    for (i, name) in params.names().iter().enumerate() {
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for (j, &a) in analytic[i].iter().enumerate() {
            let x = params.tensors()[i].data()[j];
            probe.tensors_mut()[i].data_mut()[j] = x + H;
            let up = evaluate(&probe, &f);
            probe.tensors_mut()[i].data_mut()[j] = x - H;
            let down = evaluate(&probe, &f);
            probe.tensors_mut()[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * H);
            diff += (a - numeric) * (a - numeric);
            na += a * a;
            nn += numeric * numeric;
        }
        let denom = na.sqrt() + nn.sqrt();
        let err = if denom == 0.0 { 0.0 } else { diff.sqrt() / denom };
        out.push((name.clone(), err));
    }
    out
}

pub fn assert_gradients(label: &str, errors: &[(String, f64)]) {
    for (name, err) in errors {
        assert!(*err < TOL, "{label}: `{name}` relative error {err}");
    }
}
