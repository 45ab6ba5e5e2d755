//! Evaluation and latent-space analysis: accuracy, pseudo-lemma groups,
//! μ export, attention export and the unlabeled-data scaling harness.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use msved_tensor::Tape;
use serde::{Deserialize, Serialize};

use crate::corpus::{normalize, LabeledExample, UnlabeledWord, Vocab};
use crate::error::{MsvedError, Result};
use crate::objectives::Mode;
use crate::search::Reinflection;
use crate::seq_model::ModelParams;
use crate::trainer::{encode_examples, predict, train, Dataset, TrainOutcome, TrainingConfig};

/// Fraction of predictions equal to their gold form after NFC normalization.
pub fn exact_match_accuracy<P: AsRef<str>, G: AsRef<str>>(predictions: &[P], golds: &[G]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(MsvedError::Contract(format!(
            "{} predictions for {} gold forms",
            predictions.len(),
            golds.len()
        )));
    }
    if golds.is_empty() {
        return Err(MsvedError::Contract("accuracy of an empty list".into()));
    }
    let hits = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| normalize(p.as_ref()) == normalize(g.as_ref()))
        .count();
    Ok(hits as f64 / golds.len() as f64)
}

/// Partition of word forms into connected components of the pair graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLemmaGroups {
    /// Words in first-seen order.
    pub words: Vec<String>,
    /// Group id per entry of `words`; ids are dense and ordered by first
    /// appearance.
    pub group_ids: Vec<usize>,
}

impl PseudoLemmaGroups {
    pub fn num_groups(&self) -> usize {
        self.group_ids.iter().max().map_or(0, |m| m + 1)
    }

    pub fn group_of(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word).map(|i| self.group_ids[i])
    }

    pub fn groups(&self) -> Vec<Vec<String>> {
        let mut out = vec![Vec::new(); self.num_groups()];
        for (w, &g) in self.words.iter().zip(&self.group_ids) {
            out[g].push(w.clone());
        }
        out
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

pub fn pseudo_lemma_grouping<S: AsRef<str>>(pairs: &[(S, S)]) -> PseudoLemmaGroups {
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut words = Vec::new();
    let mut id = |w: &str, words: &mut Vec<String>| {
        *index.entry(w.to_string()).or_insert_with(|| {
            words.push(w.to_string());
            words.len() - 1
        })
    };
    let edges: Vec<(usize, usize)> = pairs
        .iter()
        .map(|(a, b)| (id(a.as_ref(), &mut words), id(b.as_ref(), &mut words)))
        .collect();
    let mut parent: Vec<usize> = (0..words.len()).collect();
    for (a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut dense: HashMap<usize, usize> = HashMap::new();
    let group_ids = (0..words.len())
        .map(|i| {
            let root = find(&mut parent, i);
            let next = dense.len();
            *dense.entry(root).or_insert(next)
        })
        .collect();
    PseudoLemmaGroups { words, group_ids }
}

/// Source/target pairs of labeled triples.
pub fn example_pairs(examples: &[LabeledExample]) -> Vec<(String, String)> {
    examples.iter().map(|e| (e.source.clone(), e.target.clone())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentRow {
    pub word: String,
    pub group: usize,
    pub mu: Vec<f64>,
}

/// Posterior means of z for every grouped word.
pub fn export_latents(params: &ModelParams, vocab: &Vocab, groups: &PseudoLemmaGroups) -> Result<Vec<LatentRow>> {
    const CHUNK: usize = 64;
    let encoded: Vec<Vec<usize>> = groups.words.iter().map(|w| vocab.encode(w)).collect();
    let mut rows = Vec::with_capacity(encoded.len());
    for (c, chunk) in encoded.chunks(CHUNK).enumerate() {
        let batch: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
        let mut tape = Tape::inference();
        let net = params.bind(&mut tape);
        let enc = net.encode(&mut tape, &batch)?;
        let post = net.infer_z(&mut tape, enc.summary)?;
        let mu = tape.value(post.mu);
        for r in 0..batch.len() {
            let i = c * CHUNK + r;
            rows.push(LatentRow {
                word: groups.words[i].clone(),
                group: groups.group_ids[i],
                mu: mu.row_slice(r).to_vec(),
            });
        }
    }
    Ok(rows)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean cosine similarity of μ vectors within and across pseudo-lemmas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterProbe {
    pub intra: f64,
    pub inter: f64,
    pub intra_pairs: usize,
    pub inter_pairs: usize,
}

impl ClusterProbe {
    pub fn margin(&self) -> f64 {
        self.intra - self.inter
    }
}

pub fn cluster_probe(rows: &[LatentRow]) -> Result<ClusterProbe> {
    let (mut intra, mut inter) = (0.0, 0.0);
    let (mut ni, mut no) = (0usize, 0usize);
    for (i, a) in rows.iter().enumerate() {
        for b in &rows[i + 1..] {
            let s = cosine(&a.mu, &b.mu);
            if a.group == b.group {
                intra += s;
                ni += 1;
            } else {
                inter += s;
                no += 1;
            }
        }
    }
    if ni == 0 || no == 0 {
        return Err(MsvedError::Contract(
            "probe needs at least one intra-group and one inter-group pair".into(),
        ));
    }
    Ok(ClusterProbe {
        intra: intra / ni as f64,
        inter: inter / no as f64,
        intra_pairs: ni,
        inter_pairs: no,
    })
}

/// Attention weights of one decode position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub example: usize,
    pub position: usize,
    pub weights: BTreeMap<String, f64>,
}

pub fn attention_records(categories: &[String], predictions: &[Reinflection]) -> Vec<AttentionRecord> {
    predictions
        .iter()
        .enumerate()
        .flat_map(|(example, p)| {
            p.attention.iter().enumerate().map(move |(position, w)| AttentionRecord {
                example,
                position,
                weights: categories.iter().cloned().zip(w.iter().copied()).collect(),
            })
        })
        .collect()
}

pub fn write_attention_jsonl(out: &mut dyn Write, records: &[AttentionRecord]) -> Result<()> {
    for r in records {
        let mut line = serde_json::to_vec(r)?;
        line.push(b'\n');
        out.write_all(&line).map_err(|e| MsvedError::io("writing attention", e))?;
    }
    Ok(())
}

pub fn write_latents_tsv(out: &mut dyn Write, rows: &[LatentRow]) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.mu.len());
    let mut text = String::from("word\tgroup");
    for d in 0..dim {
        text.push_str(&format!("\tmu{d}"));
    }
    text.push('\n');
    for r in rows {
        text.push_str(&format!("{}\t{}", r.word, r.group));
        for x in &r.mu {
            text.push_str(&format!("\t{x}"));
        }
        text.push('\n');
    }
    out.write_all(text.as_bytes()).map_err(|e| MsvedError::io("writing latents", e))
}

pub fn write_predictions_tsv(out: &mut dyn Write, examples: &[LabeledExample], predictions: &[String]) -> Result<()> {
    let mut text = String::from("source\tlabels\tgold\tprediction\tcorrect\n");
    for (e, p) in examples.iter().zip(predictions) {
        let ok = normalize(p) == normalize(&e.target);
        text.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", e.source, e.label_string(), e.target, p, ok));
    }
    out.write_all(text.as_bytes()).map_err(|e| MsvedError::io("writing predictions", e))
}

/// Accuracy of one model trained with a given number of unlabeled words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub size: usize,
    pub mode: Mode,
    pub seed: u64,
    pub epochs: u64,
    pub dev_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct ScalingRun {
    pub row: ScalingRow,
    pub outcome: TrainOutcome,
}

pub fn write_scaling_tsv(out: &mut dyn Write, rows: &[ScalingRow]) -> Result<()> {
    let mut text = String::from("size\tmode\tseed\tepochs\tdev_accuracy\ttest_accuracy\n");
    for r in rows {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.size, r.mode, r.seed, r.epochs, r.dev_accuracy, r.test_accuracy
        ));
    }
    out.write_all(text.as_bytes()).map_err(|e| MsvedError::io("writing scaling table", e))
}

/// Test accuracy of a trained model on raw examples.
pub fn test_accuracy(
    outcome: &TrainOutcome,
    examples: &[LabeledExample],
    beam_size: usize,
    max_decode_factor: usize,
) -> Result<f64> {
    let h = &outcome.checkpoint.header;
    let encoded = encode_examples(&h.schema, &h.vocab, examples)?;
    let preds = predict(outcome.best_params(), &encoded, beam_size, max_decode_factor)?;
    let strings: Vec<String> = preds.iter().map(|p| h.vocab.decode(&p.symbols)).collect();
    let gold: Vec<&str> = examples.iter().map(|e| e.target.as_str()).collect();
    exact_match_accuracy(&strings, &gold)
}

/// Trains one model on the first `size` unlabeled words; size 0 trains
/// BD-Sup.
#[allow(clippy::too_many_arguments)]
pub fn scaling_run(
    config: &TrainingConfig,
    train_set: &[LabeledExample],
    dev: &[LabeledExample],
    test: &[LabeledExample],
    unlabeled: &[UnlabeledWord],
    size: usize,
    metrics: &mut dyn Write,
) -> Result<ScalingRun> {
    if size > unlabeled.len() {
        return Err(MsvedError::Config(format!(
            "{size} unlabeled words requested but only {} available",
            unlabeled.len()
        )));
    }
    let mut config = config.clone();
    config.mode = if size == 0 { Mode::BdSup } else { Mode::SemiSup };
    let data = Dataset::build(train_set, dev, &unlabeled[..size])?;
    let outcome = train(config.clone(), &data, metrics)?;
    let test_accuracy = test_accuracy(&outcome, test, config.beam_size, config.max_decode_factor)?;
    Ok(ScalingRun {
        row: ScalingRow {
            size,
            mode: config.mode,
            seed: config.seed,
            epochs: outcome.epochs,
            dev_accuracy: outcome.best_dev_accuracy,
            test_accuracy,
        },
        outcome,
    })
}

/// One training per unlabeled-prefix size, in increasing size order.
pub fn scaling_harness(
    config: &TrainingConfig,
    train_set: &[LabeledExample],
    dev: &[LabeledExample],
    test: &[LabeledExample],
    unlabeled: &[UnlabeledWord],
    sizes: &[usize],
    mut on_run: impl FnMut(&ScalingRun) -> Result<()>,
) -> Result<Vec<ScalingRow>> {
    if sizes.is_empty() {
        return Err(MsvedError::Config("no unlabeled sizes requested".into()));
    }
    let mut sizes = sizes.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    if let Some(&first) = sizes.iter().find(|&&s| s > 0) {
        if unlabeled.len() < first {
            return Err(MsvedError::Config(format!(
                "{} unlabeled words is fewer than the first step of {first}",
                unlabeled.len()
            )));
        }
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for size in sizes {
        let run = scaling_run(config, train_set, dev, test, unlabeled, size, &mut std::io::sink())?;
        on_run(&run)?;
        rows.push(run.row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_basics() {
        assert_eq!(exact_match_accuracy(&["a", "b"], &["a", "b"]).unwrap(), 1.0);
        assert_eq!(exact_match_accuracy(&["a", "c"], &["a", "b"]).unwrap(), 0.5);
        assert!(exact_match_accuracy::<&str, &str>(&[], &[]).is_err());
        assert!(exact_match_accuracy(&["a"], &["a", "b"]).is_err());
        // Composed vs decomposed e-acute.
        assert_eq!(exact_match_accuracy(&["\u{e9}"], &["e\u{301}"]).unwrap(), 1.0);
    }

    #[test]
    fn grouping_is_transitive() {
        let g = pseudo_lemma_grouping(&[("a", "b"), ("b", "c"), ("d", "e")]);
        assert_eq!(g.num_groups(), 2);
        assert_eq!(g.group_of("a"), g.group_of("c"));
        assert_ne!(g.group_of("a"), g.group_of("d"));
        assert_eq!(g.groups(), vec![vec!["a", "b", "c"], vec!["d", "e"]]);
    }

    #[test]
    fn probe_separates_clusters() {
        let row = |g, mu: Vec<f64>| LatentRow {
            word: String::new(),
            group: g,
            mu,
        };
        let rows = vec![
            row(0, vec![1.0, 0.0]),
            row(0, vec![1.0, 0.1]),
            row(1, vec![0.0, 1.0]),
            row(1, vec![0.1, 1.0]),
        ];
        let p = cluster_probe(&rows).unwrap();
        assert!(p.margin() > 0.5);
        assert_eq!((p.intra_pairs, p.inter_pairs), (2, 4));
    }

    #[test]
    fn harness_rejects_short_unlabeled_list() {
        let cfg = TrainingConfig::default();
        let err = scaling_harness(&cfg, &[], &[], &[], &[], &[0, 10], |_| Ok(())).unwrap_err();
        assert!(matches!(err, MsvedError::Config(_)));
    }
}
