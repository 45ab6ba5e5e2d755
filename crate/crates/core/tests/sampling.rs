//! Moment and frequency checks of the samplers against closed forms.

use msved::rng::{stream, Purpose};
use msved::stochastic::{
    gaussian_reparam, gumbel_max_sample, gumbel_noise, gumbel_softmax, normal_noise, uniform_tag_log_prior,
    GaussianPosterior,
};
use msved_tensor::{Tape, Tensor};

#[test]
fn reparameterized_draws_have_the_posterior_moments() {
    let n = 100_000;
    let mu = [0.7, -1.2];
    let log_var = [0.0, -1.0];
    let mut rng = stream(21, Purpose::StepNoise, 0);
    let eps = normal_noise(&mut rng, n, 2);
    let mut tape = Tape::inference();
    let rows = |v: &[f64]| Tensor::matrix(n, 2, (0..n).flat_map(|_| v.iter().copied()).collect());
    let post = GaussianPosterior {
        mu: tape.constant(rows(&mu)),
        log_var: tape.constant(rows(&log_var)),
    };
    let z = gaussian_reparam(&mut tape, post, &eps).unwrap();
    let z = tape.value(z);
    for d in 0..2 {
        let xs: Vec<f64> = (0..n).map(|r| z.at(r, d)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = log_var[d].exp().sqrt();
        assert!((mean - mu[d]).abs() < 4.0 * sd / (n as f64).sqrt(), "mean {mean}");
        assert!((var / log_var[d].exp() - 1.0).abs() < 0.02, "var {var}");
    }
}

#[test]
fn fair_coin_frequencies() {
    let n = 100_000;
    let lp = [0.5f64.ln(), 0.5f64.ln()];
    let mut rng = stream(22, Purpose::StepNoise, 0);
    let heads = (0..n).filter(|_| gumbel_max_sample(&lp, &mut rng).unwrap() == 0).count();
    let freq = heads as f64 / n as f64;
    assert!((freq - 0.5).abs() < 0.01, "{freq}");
}

#[test]
fn low_temperature_samples_are_nearly_one_hot() {
    let n = 10_000;
    let cols = 4;
    let logits = [0.1, -0.4, 0.3, 0.0];
    let mut rng = stream(23, Purpose::StepNoise, 0);
    let g = gumbel_noise(&mut rng, n, cols);
    let mut tape = Tape::inference();
    let x = tape.constant(Tensor::matrix(n, cols, (0..n).flat_map(|_| logits).collect()));
    let lp = tape.log_softmax(x).unwrap();
    let y = gumbel_softmax(&mut tape, lp, 0.01, &g).unwrap();
    let y = tape.value(y);
    let mut mean_peak = 0.0;
    for r in 0..n {
        let row = y.row_slice(r);
        let noisy: Vec<f64> = (0..cols).map(|c| tape.value(lp).at(r, c) + g.at(r, c)).collect();
        let hard = msved::stochastic::gumbel_max_with_noise(tape.value(lp).row_slice(r), g.row_slice(r)).unwrap();
        let soft = (0..cols).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(soft, hard, "{noisy:?}");
        mean_peak += row[soft] / n as f64;
    }
    assert!(mean_peak > 0.97, "{mean_peak}");
}

#[test]
fn uniform_prior_matches_brute_force_count() {
    for sizes in [vec![2], vec![2, 3], vec![4, 1, 3], vec![5, 2, 2, 3]] {
        let mut joint = 1usize;
        let mut counter = vec![0usize; sizes.len()];
        'count: loop {
            let mut k = 0;
            loop {
                if k == sizes.len() {
                    break 'count;
                }
                counter[k] += 1;
                if counter[k] < sizes[k] {
                    joint += 1;
                    break;
                }
                counter[k] = 0;
                k += 1;
            }
        }
        let want = (1.0 / joint as f64).ln();
        assert!((uniform_tag_log_prior(&sizes).unwrap() - want).abs() < 1e-12, "{sizes:?}");
    }
    assert!(uniform_tag_log_prior(&[]).is_err());
    assert!(uniform_tag_log_prior(&[3, 0]).is_err());
}
