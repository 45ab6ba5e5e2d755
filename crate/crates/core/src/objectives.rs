//! Variational bounds and the combined training objective.
//!
//! Every bound is computed for a batch and reported as a mean per example.
//! Signs follow the bounds: reconstruction is a log-likelihood (higher is
//! better) and the objective is maximized.

use msved_tensor::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MsvedError, Result};
use crate::seq_model::{decode_steps, ModelParams, Net};
use crate::stochastic::{
    dropout_keep_mask, gaussian_reparam, gumbel_noise, gumbel_softmax, kl_to_standard_normal, normal_noise,
    uniform_tag_log_prior, AnnealState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "sd-sup")]
    SdSup,
    #[serde(rename = "bd-sup")]
    BdSup,
    #[serde(rename = "semi-sup")]
    SemiSup,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::SdSup => "sd-sup",
            Mode::BdSup => "bd-sup",
            Mode::SemiSup => "semi-sup",
        }
    }

    pub fn uses_unlabeled(self) -> bool {
        self == Mode::SemiSup
    }
}

impl std::str::FromStr for Mode {
    type Err = MsvedError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "sd-sup" | "sdsup" => Ok(Mode::SdSup),
            "bd-sup" | "bdsup" => Ok(Mode::BdSup),
            "semi-sup" | "semisup" | "semi" => Ok(Mode::SemiSup),
            _ => Err(MsvedError::Config(format!(
                "unknown mode `{s}` (expected sd-sup, bd-sup or semi-sup)"
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Batch-mean values of one bound.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub kl_term: f64,
    pub prior_term: f64,
    pub entropy_term: f64,
    pub lambda_used: f64,
    pub alpha_used: f64,
    pub total: f64,
}

/// A bound still on the tape.
#[derive(Debug, Clone, Copy)]
pub struct Bound {
    pub total: Var,
    pub reconstruction: Var,
    pub kl: Var,
    pub entropy: Option<Var>,
    pub prior: f64,
    pub lambda: f64,
}

impl Bound {
    pub fn breakdown(&self, tape: &Tape<'_>) -> LossBreakdown {
        LossBreakdown {
            reconstruction: tape.scalar(self.reconstruction),
            kl_term: tape.scalar(self.kl),
            prior_term: self.prior,
            entropy_term: self.entropy.map_or(0.0, |e| tape.scalar(e)),
            lambda_used: self.lambda,
            alpha_used: 0.0,
            total: tape.scalar(self.total),
        }
    }
}

/// Frozen noise for one bound over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundNoise {
    /// `B x latent` standard-normal draws.
    pub eps: Tensor,
    /// `B x N_k` Gumbel draws per category; empty when labels are observed.
    pub gumbel: Vec<Tensor>,
    /// Decoder-input keep mask, time-major, `None` for no dropout.
    pub keep: Option<Vec<f64>>,
}

impl BoundNoise {
    /// Draws noise for decoding `outputs`; `with_tags` adds Gumbel draws.
    pub fn sample(
        rng: &mut impl Rng,
        params: &ModelParams,
        outputs: &[&[usize]],
        with_tags: bool,
        beta: f64,
    ) -> Self {
        let b = outputs.len();
        let eps = normal_noise(rng, b, params.config().latent);
        let gumbel = if with_tags {
            params.tag_sizes().iter().map(|&n| gumbel_noise(rng, b, n)).collect()
        } else {
            Vec::new()
        };
        let keep = (beta > 0.0).then(|| dropout_keep_mask(rng, decode_steps(outputs) * b, beta));
        BoundNoise { eps, gumbel, keep }
    }

    /// Zero latent noise and no dropout; Gumbel draws still required for
    /// unlabeled bounds.
    pub fn zero(params: &ModelParams, batch: usize, with_tags: bool) -> Self {
        BoundNoise {
            eps: Tensor::zeros(batch, params.config().latent),
            gumbel: if with_tags {
                params.tag_sizes().iter().map(|&n| Tensor::zeros(batch, n)).collect()
            } else {
                Vec::new()
            },
            keep: None,
        }
    }
}

fn batch_mean(tape: &mut Tape<'_>, rows: Var, batch: usize) -> Result<Var> {
    let s = tape.sum_all(rows)?;
    Ok(tape.scale(s, 1.0 / batch as f64)?)
}

/// Reconstruction and KL shared by every bound: z from `cond_summary`,
/// `tags` as conditioning, `outputs` teacher-forced.
#[allow(clippy::too_many_arguments)]
fn reconstruct<'p>(
    tape: &mut Tape<'p>,
    net: &Net<'p>,
    cond_summary: Var,
    tags: Vec<Var>,
    outputs: &[&[usize]],
    noise: &BoundNoise,
) -> Result<(Var, Var)> {
    let b = outputs.len();
    let post = net.infer_z(tape, cond_summary)?;
    let z = gaussian_reparam(tape, post, &noise.eps)?;
    let kl_rows = kl_to_standard_normal(tape, post)?;
    let kl = batch_mean(tape, kl_rows, b)?;
    let (cx, h0) = net.decoder_context(tape, z, tags)?;
    let nll = net.reconstruction_nll(tape, &cx, h0, outputs, noise.keep.as_deref())?;
    let reconstruction = tape.scale(nll, -1.0 / b as f64)?;
    Ok((reconstruction, kl))
}

fn check_batch(a: usize, b: usize, what: &str) -> Result<()> {
    if a == 0 || a != b {
        return Err(MsvedError::Contract(format!("{what}: batch sizes {a} and {b} must match and be positive")));
    }
    Ok(())
}

/// Labeled bound from precomputed source summaries.
pub fn labeled_bound_from<'p>(
    tape: &mut Tape<'p>,
    net: &Net<'p>,
    src_summary: Var,
    tgt: &[&[usize]],
    labels: &[&[usize]],
    anneal: &AnnealState,
    noise: &BoundNoise,
) -> Result<Bound> {
    check_batch(tgt.len(), labels.len(), "labeled bound")?;
    let prior = uniform_tag_log_prior(net.params().tag_sizes())?;
    let tags = net.hard_tags(tape, labels)?;
    let (reconstruction, kl) = reconstruct(tape, net, src_summary, tags, tgt, noise)?;
    let total = tape.scale_shift(kl, -anneal.lambda, prior)?;
    let total = tape.add(reconstruction, total)?;
    Ok(Bound {
        total,
        reconstruction,
        kl,
        entropy: None,
        prior,
        lambda: anneal.lambda,
    })
}

/// Labeled bound: z from the source word, observed target labels, target
/// word reconstructed.
pub fn labeled_bound<'p>(
    tape: &mut Tape<'p>,
    net: &Net<'p>,
    src: &[&[usize]],
    tgt: &[&[usize]],
    labels: &[&[usize]],
    anneal: &AnnealState,
    noise: &BoundNoise,
) -> Result<Bound> {
    check_batch(src.len(), tgt.len(), "labeled bound")?;
    let enc = net.encode(tape, src)?;
    labeled_bound_from(tape, net, enc.summary, tgt, labels, anneal, noise)
}

/// Unlabeled bound from precomputed summaries of the conditioning words
/// (for z) and the output words (for the tag classifier).
pub fn unlabeled_bound_from<'p>(
    tape: &mut Tape<'p>,
    net: &Net<'p>,
    cond_summary: Var,
    out_summary: Var,
    outputs: &[&[usize]],
    anneal: &AnnealState,
    noise: &BoundNoise,
) -> Result<Bound> {
    let sizes = net.params().tag_sizes();
    if noise.gumbel.len() != sizes.len() {
        return Err(MsvedError::Contract("unlabeled bound needs Gumbel noise for every category".into()));
    }
    let b = outputs.len();
    let prior = uniform_tag_log_prior(sizes)?;
    let log_q = net.classify_tags(tape, out_summary)?;
    let mut relaxed = Vec::with_capacity(log_q.len());
    let mut cross = None;
    for (&lq, g) in log_q.iter().zip(&noise.gumbel) {
        let y = gumbel_softmax(tape, lq, anneal.tau, g)?;
        let d = tape.dot_rows(y, lq)?;
        cross = Some(match cross {
            None => d,
            Some(acc) => tape.add(acc, d)?,
        });
        relaxed.push(y);
    }
    let cross = cross.ok_or_else(|| MsvedError::Schema("no tag categories".into()))?;
    let mean_cross = batch_mean(tape, cross, b)?;
    let entropy = tape.neg(mean_cross)?;
    let tags = net.soft_tags(tape, &relaxed)?;
    let (reconstruction, kl) = reconstruct(tape, net, cond_summary, tags, outputs, noise)?;
    let total = tape.scale_shift(kl, -anneal.lambda, prior)?;
    let total = tape.add(reconstruction, total)?;
    let total = tape.add(total, entropy)?;
    Ok(Bound {
        total,
        reconstruction,
        kl,
        entropy: Some(entropy),
        prior,
        lambda: anneal.lambda,
    })
}

/// Unlabeled transduction bound: z from `cond`, tags inferred from `outputs`
/// by relaxed sampling, `outputs` reconstructed.
pub fn unlabeled_transduction_bound<'p>(
    tape: &mut Tape<'p>,
    net: &Net<'p>,
    cond: &[&[usize]],
    outputs: &[&[usize]],
    anneal: &AnnealState,
    noise: &BoundNoise,
) -> Result<Bound> {
    check_batch(cond.len(), outputs.len(), "unlabeled bound")?;
    let c = net.encode(tape, cond)?;
    let o = net.encode(tape, outputs)?;
    unlabeled_bound_from(tape, net, c.summary, o.summary, outputs, anneal, noise)
}

/// Autoencoding bound: the transduction bound of each word onto itself,
/// sharing a single encoder pass.
pub fn autoencoding_bound<'p>(
    tape: &mut Tape<'p>,
    net: &Net<'p>,
    words: &[&[usize]],
    anneal: &AnnealState,
    noise: &BoundNoise,
) -> Result<Bound> {
    let enc = net.encode(tape, words)?;
    unlabeled_bound_from(tape, net, enc.summary, enc.summary, words, anneal, noise)
}

/// Mean over the batch of `sum_k -log q(y_k | word)`.
pub fn classification_loss_from<'p>(
    tape: &mut Tape<'p>,
    net: &Net<'p>,
    summary: Var,
    labels: &[&[usize]],
) -> Result<Var> {
    let sizes = net.params().tag_sizes();
    let log_q = net.classify_tags(tape, summary)?;
    let mut acc = None;
    for (k, &lq) in log_q.iter().enumerate() {
        let mut idx = Vec::with_capacity(labels.len());
        for l in labels {
            if l.len() != sizes.len() || l[k] >= sizes[k] {
                return Err(MsvedError::Contract(format!("label vector {l:?} does not fit sizes {sizes:?}")));
            }
            idx.push(Some(l[k]));
        }
        let picked = tape.pick(lq, &idx)?;
        acc = Some(match acc {
            None => picked,
            Some(a) => tape.add(a, picked)?,
        });
    }
    let acc = acc.ok_or_else(|| MsvedError::Schema("no tag categories".into()))?;
    let mean = batch_mean(tape, acc, labels.len())?;
    Ok(tape.neg(mean)?)
}

pub fn classification_loss<'p>(
    tape: &mut Tape<'p>,
    net: &Net<'p>,
    words: &[&[usize]],
    labels: &[&[usize]],
) -> Result<Var> {
    check_batch(words.len(), labels.len(), "classification loss")?;
    let enc = net.encode(tape, words)?;
    classification_loss_from(tape, net, enc.summary, labels)
}

/// Labeled triples as index sequences.
#[derive(Debug, Clone, Copy)]
pub struct LabeledBatch<'a> {
    pub sources: &'a [&'a [usize]],
    pub targets: &'a [&'a [usize]],
    pub labels: &'a [&'a [usize]],
}

impl LabeledBatch<'_> {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub alpha: f64,
    pub classification: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        ObjectiveWeights {
            alpha: 0.8,
            classification: 1.0,
        }
    }
}

/// Frozen noise for every bound a step evaluates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CombinedNoise {
    pub labeled: Option<BoundNoise>,
    pub reverse: Option<BoundNoise>,
    pub unlabeled: Option<BoundNoise>,
}

impl CombinedNoise {
    pub fn sample(
        rng: &mut impl Rng,
        params: &ModelParams,
        mode: Mode,
        labeled: Option<&LabeledBatch<'_>>,
        unlabeled: Option<&[&[usize]]>,
        beta: f64,
    ) -> Self {
        let mut noise = CombinedNoise::default();
        if let Some(l) = labeled {
            noise.labeled = Some(BoundNoise::sample(rng, params, l.targets, false, beta));
            if mode != Mode::SdSup {
                noise.reverse = Some(BoundNoise::sample(rng, params, l.sources, true, beta));
            }
        }
        if let (Some(u), Mode::SemiSup) = (unlabeled, mode) {
            noise.unlabeled = Some(BoundNoise::sample(rng, params, u, true, beta));
        }
        noise
    }
}

/// Per-term values of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub labeled: Option<LossBreakdown>,
    pub reverse: Option<LossBreakdown>,
    pub autoencoding: Option<LossBreakdown>,
    pub classification: Option<f64>,
    pub objective: f64,
}

pub struct Combined {
    /// Scalar to maximize.
    pub objective: Var,
    pub terms: ObjectiveTerms,
}

/// Mode-dependent objective over an optional labeled and an optional
/// unlabeled batch:
///
/// * SD-Sup: labeled bound.
/// * BD-Sup: labeled bound plus the reverse-direction unlabeled bound.
/// * Semi-sup: both of those, minus the weighted classification loss, plus
///   `alpha` times the autoencoding bound of the unlabeled batch.
#[allow(clippy::too_many_arguments)]
pub fn combined_objective<'p>(
    tape: &mut Tape<'p>,
    net: &Net<'p>,
    mode: Mode,
    labeled: Option<&LabeledBatch<'_>>,
    unlabeled: Option<&[&[usize]]>,
    anneal: &AnnealState,
    weights: &ObjectiveWeights,
    noise: &CombinedNoise,
) -> Result<Combined> {
    let missing = |what: &str| MsvedError::Contract(format!("no frozen noise for the {what} bound"));
    let mut terms = ObjectiveTerms::default();
    let mut parts = Vec::new();
    if let Some(l) = labeled.filter(|l| !l.is_empty()) {
        check_batch(l.sources.len(), l.targets.len(), "labeled batch")?;
        check_batch(l.sources.len(), l.labels.len(), "labeled batch")?;
        let b = l.len();
        let (src_summary, tgt_summary) = if mode == Mode::SdSup {
            (net.encode(tape, l.sources)?.summary, None)
        } else {
            let both: Vec<&[usize]> = l.sources.iter().chain(l.targets).copied().collect();
            let enc = net.encode(tape, &both)?;
            (tape.slice_rows(enc.summary, 0, b)?, Some(tape.slice_rows(enc.summary, b, b)?))
        };
        let n = noise.labeled.as_ref().ok_or_else(|| missing("labeled"))?;
        let fwd = labeled_bound_from(tape, net, src_summary, l.targets, l.labels, anneal, n)?;
        terms.labeled = Some(fwd.breakdown(tape));
        parts.push(fwd.total);
        if let Some(tgt_summary) = tgt_summary {
            let n = noise.reverse.as_ref().ok_or_else(|| missing("reverse"))?;
            let rev = unlabeled_bound_from(tape, net, tgt_summary, src_summary, l.sources, anneal, n)?;
            terms.reverse = Some(rev.breakdown(tape));
            parts.push(rev.total);
            if mode == Mode::SemiSup {
                let d = classification_loss_from(tape, net, tgt_summary, l.labels)?;
                terms.classification = Some(tape.scalar(d));
                parts.push(tape.scale(d, -weights.classification)?);
            }
        }
    }
    if mode == Mode::SemiSup {
        if let Some(u) = unlabeled {
            if u.is_empty() {
                return Err(MsvedError::Config("semi-supervised objective with an empty unlabeled batch".into()));
            }
            let n = noise.unlabeled.as_ref().ok_or_else(|| missing("autoencoding"))?;
            let ae = autoencoding_bound(tape, net, u, anneal, n)?;
            let mut bd = ae.breakdown(tape);
            bd.alpha_used = weights.alpha;
            terms.autoencoding = Some(bd);
            parts.push(tape.scale(ae.total, weights.alpha)?);
        }
    }
    let mut objective = *parts
        .first()
        .ok_or_else(|| MsvedError::Contract("objective over an empty batch".into()))?;
    for &p in &parts[1..] {
        objective = tape.add(objective, p)?;
    }
    terms.objective = tape.scalar(objective);
    Ok(Combined { objective, terms })
}
