//! A generated suffixing language with vowel harmony, used for end-to-end
//! tests and benchmarks.
//!
//! Lemmas are CV syllable strings. Each word form is
//! `lemma + number + possessor + case` where every suffix is chosen by
//! deterministic rules from the preceding segment.

use std::collections::{BTreeSet, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{LabeledExample, Provenance, UnlabeledWord};
use crate::objectives::Mode;
use crate::trainer::TrainingConfig;

const CONSONANTS: &[char] = &['p', 't', 'k', 'm', 'n', 'l', 's', 'r', 'v', 'd'];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];

pub const NUMBERS: [&str; 2] = ["SG", "PL"];
pub const POSSESSORS: [&str; 3] = ["NONE", "P1", "P2"];
pub const CASES: [&str; 4] = ["NOM", "ACC", "DAT", "LOC"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ToyTags {
    pub number: usize,
    pub possessor: usize,
    pub case: usize,
}

impl ToyTags {
    pub fn all() -> Vec<ToyTags> {
        let mut out = Vec::new();
        for number in 0..NUMBERS.len() {
            for possessor in 0..POSSESSORS.len() {
                for case in 0..CASES.len() {
                    out.push(ToyTags { number, possessor, case });
                }
            }
        }
        out
    }

    /// Explicit labels; an absent possessor is omitted.
    pub fn labels(&self) -> Vec<(String, String)> {
        let mut l = vec![("num".to_string(), NUMBERS[self.number].to_string())];
        if self.possessor != 0 {
            l.push(("poss".to_string(), POSSESSORS[self.possessor].to_string()));
        }
        l.push(("case".to_string(), CASES[self.case].to_string()));
        l
    }
}

fn is_vowel(c: char) -> bool {
    VOWELS.contains(&c)
}

fn front(word: &str) -> bool {
    matches!(word.chars().rev().find(|&c| is_vowel(c)), Some('e' | 'i'))
}

fn ends_in_vowel(word: &str) -> bool {
    word.chars().last().is_some_and(is_vowel)
}

pub fn inflect(lemma: &str, tags: ToyTags) -> String {
    let mut w = lemma.to_string();
    if tags.number == 1 {
        w.push_str(if front(&w) { "ler" } else { "lar" });
    }
    if tags.possessor != 0 {
        if !ends_in_vowel(&w) {
            w.push(if front(&w) { 'i' } else { 'u' });
        }
        w.push(if tags.possessor == 1 { 'm' } else { 'n' });
    }
    let v = ends_in_vowel(&w);
    let f = front(&w);
    match tags.case {
        1 => w.push_str(if v { "yi" } else { "i" }),
        2 => w.push_str(match (v, f) {
            (true, true) => "ye",
            (true, false) => "ya",
            (false, true) => "e",
            (false, false) => "a",
        }),
        3 => w.push_str(if f { "de" } else { "da" }),
        _ => {}
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyConfig {
    pub lemmas: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub unlabeled: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            lemmas: 300,
            train: 2000,
            dev: 500,
            test: 500,
            unlabeled: 5000,
            seed: 2016,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpus {
    pub lemmas: Vec<String>,
    pub train: Vec<LabeledExample>,
    pub dev: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub unlabeled: Vec<String>,
}

impl ToyCorpus {
    pub fn unlabeled_words(&self) -> Vec<UnlabeledWord> {
        self.unlabeled
            .iter()
            .map(|w| UnlabeledWord {
                form: w.clone(),
                provenance: Provenance::ExternalList,
            })
            .collect()
    }
}

/// Small-model settings sized for the toy language on a single core.
pub fn training_config(mode: Mode, seed: u64) -> TrainingConfig {
    TrainingConfig {
        mode,
        seed,
        char_dim: 32,
        tag_dim: 16,
        hidden: 64,
        latent: 32,
        mlp_hidden: 64,
        attention_dim: 32,
        max_epochs: 50,
        ..TrainingConfig::default()
    }
}

fn make_lemmas(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(*CONSONANTS.choose(rng).expect("nonempty"));
            w.push(*VOWELS.choose(rng).expect("nonempty"));
        }
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Generates disjoint train, dev and test triples plus an unlabeled list.
///
/// Panics if the requested sizes exceed the number of distinct triples.
pub fn generate(config: &ToyConfig) -> ToyCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let lemmas = make_lemmas(&mut rng, config.lemmas);
    let combos = ToyTags::all();
    let needed = config.train + config.dev + config.test;
    assert!(
        needed <= config.lemmas * combos.len() * (combos.len() - 1),
        "toy corpus too small for {needed} triples"
    );
    let mut seen = HashSet::new();
    let mut triples = Vec::with_capacity(needed);
    while triples.len() < needed {
        let lemma = lemmas.choose(&mut rng).expect("nonempty");
        let s = *combos.choose(&mut rng).expect("nonempty");
        let t = *combos.choose(&mut rng).expect("nonempty");
        if s == t || !seen.insert((lemma.clone(), s, t)) {
            continue;
        }
        triples.push(LabeledExample {
            source: inflect(lemma, s),
            labels: t.labels(),
            target: inflect(lemma, t),
        });
    }
    let test = triples.split_off(config.train + config.dev);
    let dev = triples.split_off(config.train);
    let train = triples;

    let mut forms: Vec<String> = lemmas
        .iter()
        .flat_map(|l| combos.iter().map(move |&t| inflect(l, t)))
        .collect();
    forms.shuffle(&mut rng);
    forms.truncate(config.unlabeled);
    ToyCorpus {
        lemmas,
        train,
        dev,
        test,
        unlabeled: forms,
    }
}
