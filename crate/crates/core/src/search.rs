//! Beam search over characters and test-time reinflection.

use std::cmp::Ordering;

use msved_tensor::{Tape, Tensor};

use crate::corpus::{BOS, EOS, PAD, UNK};
use crate::error::{MsvedError, Result};
use crate::seq_model::{DecoderContext, ModelParams};

/// Next-symbol scorer driven by the search.
pub trait StepScorer {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    fn initial_state(&mut self) -> Result<Self::State>;

    /// For each `(previous symbol, state)` pair, log-probabilities over the
    /// vocabulary and the successor state.
    fn score(&mut self, items: &[(usize, &Self::State)]) -> Result<Vec<(Vec<f64>, Self::State)>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub beam_size: usize,
    /// Maximum decode steps, the end symbol included.
    pub max_len: usize,
    pub start: usize,
    pub end: usize,
    /// Symbols never emitted.
    pub banned: Vec<usize>,
}

impl SearchConfig {
    /// Model vocabulary conventions: start from BOS, stop at EOS, never emit
    /// PAD, BOS or UNK.
    pub fn for_model(beam_size: usize, max_len: usize) -> Self {
        SearchConfig {
            beam_size,
            max_len,
            start: BOS,
            end: EOS,
            banned: vec![PAD, BOS, UNK],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis<S> {
    /// Emitted symbols, the end symbol excluded.
    pub tokens: Vec<usize>,
    pub score: f64,
    pub state: S,
    pub finished: bool,
}

impl<S> Hypothesis<S> {
    fn can_extend(&self, max_len: usize) -> bool {
        !self.finished && self.tokens.len() < max_len
    }
}

/// Ordering key: the full emitted sequence including the end symbol.
fn sequence_key(tokens: &[usize], finished: bool, end: usize) -> impl Iterator<Item = usize> + '_ {
    tokens.iter().copied().chain(finished.then_some(end))
}

/// Higher score first; ties by lexicographic symbol order.
fn rank(a: (f64, &[usize], bool), b: (f64, &[usize], bool), end: usize) -> Ordering {
    b.0.total_cmp(&a.0)
        .then_with(|| sequence_key(a.1, a.2, end).cmp(sequence_key(b.1, b.2, end)))
}

struct Candidate {
    parent: usize,
    symbol: Option<usize>,
    score: f64,
    tokens: Vec<usize>,
    finished: bool,
}

/// Expands every extendable hypothesis over the vocabulary and keeps the
/// best `beam_size` of the expansions and the carried-over hypotheses.
pub fn beam_step<S: StepScorer>(
    frontier: Vec<Hypothesis<S::State>>,
    scorer: &mut S,
    config: &SearchConfig,
) -> Result<Vec<Hypothesis<S::State>>> {
    if frontier.is_empty() {
        return Err(MsvedError::Contract("beam step on an empty frontier".into()));
    }
    if config.beam_size == 0 {
        return Err(MsvedError::Config("beam size must be positive".into()));
    }
    let open: Vec<usize> = (0..frontier.len()).filter(|&i| frontier[i].can_extend(config.max_len)).collect();
    if open.is_empty() {
        return Ok(frontier);
    }
    let items: Vec<(usize, &S::State)> = open
        .iter()
        .map(|&i| {
            let h = &frontier[i];
            (h.tokens.last().copied().unwrap_or(config.start), &h.state)
        })
        .collect();
    let scored = scorer.score(&items)?;
    if scored.len() != open.len() {
        return Err(MsvedError::Contract("scorer returned the wrong number of rows".into()));
    }
    let v = scorer.vocab_size();
    let mut candidates = Vec::new();
    for (i, h) in frontier.iter().enumerate() {
        if !h.can_extend(config.max_len) {
            candidates.push(Candidate {
                parent: i,
                symbol: None,
                score: h.score,
                tokens: h.tokens.clone(),
                finished: h.finished,
            });
        }
    }
    for (&i, (log_probs, _)) in open.iter().zip(&scored) {
        if log_probs.len() != v {
            return Err(MsvedError::Contract("scorer returned a row of the wrong width".into()));
        }
        let h = &frontier[i];
        for (s, &lp) in log_probs.iter().enumerate() {
            if config.banned.contains(&s) || lp == f64::NEG_INFINITY {
                continue;
            }
            if lp.is_nan() || lp > 1e-9 {
                return Err(MsvedError::Contract(format!("invalid log-probability {lp}")));
            }
            let finished = s == config.end;
            let mut tokens = h.tokens.clone();
            if !finished {
                tokens.push(s);
            }
            candidates.push(Candidate {
                parent: i,
                symbol: Some(s),
                score: h.score + lp.min(0.0),
                tokens,
                finished,
            });
        }
    }
    candidates.sort_by(|a, b| {
        rank(
            (a.score, &a.tokens, a.finished),
            (b.score, &b.tokens, b.finished),
            config.end,
        )
    });
    candidates.truncate(config.beam_size);

    let mut successor: Vec<Option<S::State>> = vec![None; frontier.len()];
    for (&i, (_, state)) in open.iter().zip(scored) {
        successor[i] = Some(state);
    }
    let mut frontier: Vec<Option<Hypothesis<S::State>>> = frontier.into_iter().map(Some).collect();
    let mut next = Vec::with_capacity(candidates.len());
    for c in candidates {
        let state = match c.symbol {
            None => frontier[c.parent].take().map(|h| h.state),
            Some(_) => successor[c.parent].clone(),
        }
        .ok_or_else(|| MsvedError::Contract("beam bookkeeping lost a state".into()))?;
        next.push(Hypothesis {
            tokens: c.tokens,
            score: c.score,
            state,
            finished: c.finished,
        });
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult<S> {
    pub best: Hypothesis<S>,
    /// No hypothesis reached the end symbol within the length cap.
    pub truncated: bool,
}

pub fn beam_search<S: StepScorer>(scorer: &mut S, config: &SearchConfig) -> Result<SearchResult<S::State>> {
    let mut frontier = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        state: scorer.initial_state()?,
        finished: false,
    }];
    for _ in 0..config.max_len {
        if !frontier.iter().any(|h| h.can_extend(config.max_len)) {
            break;
        }
        frontier = beam_step(frontier, scorer, config)?;
    }
    let end = config.end;
    let pick = |finished: bool, frontier: &[Hypothesis<S::State>]| {
        frontier
            .iter()
            .filter(|h| h.finished == finished)
            .min_by(|a, b| rank((a.score, &a.tokens, a.finished), (b.score, &b.tokens, b.finished), end))
            .cloned()
    };
    if let Some(best) = pick(true, &frontier) {
        return Ok(SearchResult { best, truncated: false });
    }
    let best = pick(false, &frontier).ok_or_else(|| MsvedError::Contract("search produced no hypotheses".into()))?;
    Ok(SearchResult { best, truncated: true })
}

/// Decoder state carried per hypothesis: the hidden row and the attention
/// weights of every step taken so far.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub hidden: Vec<f64>,
    pub attention: Vec<Vec<f64>>,
}

/// Scores next characters with a trained model for one source word and
/// label vector, using the posterior mean of z.
pub struct ModelScorer<'p> {
    params: &'p ModelParams,
    latent_input: Vec<f64>,
    tags: Vec<Vec<f64>>,
    tag_keys: Vec<Vec<f64>>,
    h0: Vec<f64>,
}

fn repeat_row(row: &[f64], n: usize) -> Tensor {
    let mut data = Vec::with_capacity(row.len() * n);
    for _ in 0..n {
        data.extend_from_slice(row);
    }
    Tensor::matrix(n, row.len(), data)
}

impl<'p> ModelScorer<'p> {
    pub fn new(params: &'p ModelParams, source: &[usize], labels: &[usize]) -> Result<Self> {
        let mut tape = Tape::inference();
        let net = params.bind(&mut tape);
        let enc = net.encode(&mut tape, &[source])?;
        let post = net.infer_z(&mut tape, enc.summary)?;
        let tags = net.hard_tags(&mut tape, &[labels])?;
        let (cx, h0) = net.decoder_context(&mut tape, post.mu, tags)?;
        let row = |v| tape.value(v).data().to_vec();
        Ok(ModelScorer {
            params,
            latent_input: row(cx.latent_input),
            tags: cx.tags.iter().map(|&v| row(v)).collect(),
            tag_keys: cx.tag_keys.iter().map(|&v| row(v)).collect(),
            h0: row(h0),
        })
    }
}

impl StepScorer for ModelScorer<'_> {
    type State = DecoderState;

    fn vocab_size(&self) -> usize {
        self.params.vocab_size()
    }

    fn initial_state(&mut self) -> Result<DecoderState> {
        Ok(DecoderState {
            hidden: self.h0.clone(),
            attention: Vec::new(),
        })
    }

    fn score(&mut self, items: &[(usize, &DecoderState)]) -> Result<Vec<(Vec<f64>, DecoderState)>> {
        let n = items.len();
        let hd = self.params.config().hidden;
        let mut tape = Tape::inference();
        let net = self.params.bind(&mut tape);
        let cx = DecoderContext {
            latent_input: tape.constant(repeat_row(&self.latent_input, n)),
            tags: self.tags.iter().map(|t| tape.constant(repeat_row(t, n))).collect(),
            tag_keys: self.tag_keys.iter().map(|t| tape.constant(repeat_row(t, n))).collect(),
        };
        let mut hidden = Vec::with_capacity(n * hd);
        for (_, s) in items {
            hidden.extend_from_slice(&s.hidden);
        }
        let state = tape.constant(Tensor::matrix(n, hd, hidden));
        let prev: Vec<usize> = items.iter().map(|(p, _)| *p).collect();
        let emb = net.embed(&mut tape, &prev)?;
        let out = net.decode_step(&mut tape, emb, state, &cx)?;
        let lp = tape.log_softmax(out.logits)?;
        let v = self.params.vocab_size();
        let k = self.tags.len();
        let lp = tape.value(lp).data();
        let hs = tape.value(out.state).data();
        let att = tape.value(out.attention).data();
        Ok(items
            .iter()
            .enumerate()
            .map(|(i, (_, s))| {
                let mut attention = s.attention.clone();
                attention.push(att[i * k..(i + 1) * k].to_vec());
                (
                    lp[i * v..(i + 1) * v].to_vec(),
                    DecoderState {
                        hidden: hs[i * hd..(i + 1) * hd].to_vec(),
                        attention,
                    },
                )
            })
            .collect())
    }
}

/// Length cap for a source of `source_len` symbols.
pub fn max_decode_len(source_len: usize, factor: usize) -> usize {
    factor * source_len + 5
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reinflection {
    pub symbols: Vec<usize>,
    pub score: f64,
    pub truncated: bool,
    /// Per decode step (end symbol included), weights over tag categories.
    pub attention: Vec<Vec<f64>>,
}

/// Most probable target under beam search with z at its posterior mean.
pub fn reinflect(
    params: &ModelParams,
    source: &[usize],
    labels: &[usize],
    beam_size: usize,
    max_len: usize,
) -> Result<Reinflection> {
    let mut scorer = ModelScorer::new(params, source, labels)?;
    let result = beam_search(&mut scorer, &SearchConfig::for_model(beam_size, max_len))?;
    Ok(Reinflection {
        symbols: result.best.tokens,
        score: result.best.score,
        truncated: result.truncated,
        attention: result.best.state.attention,
    })
}
