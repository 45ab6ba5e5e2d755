//! Randomized invariants of the stateless building blocks.

use std::collections::{HashMap, HashSet, VecDeque};

use msved::analysis::{exact_match_accuracy, pseudo_lemma_grouping};
use msved::corpus::{
    normalize, parse_label_string, parse_task3_str, parse_unlabeled_str, write_task3, LabeledExample, Provenance,
    TagSchema,
};
use msved::stochastic::{anneal_step, gumbel_softmax, kl_to_standard_normal, AnnealConfig, GaussianPosterior};
use msved::trainer::{clip_global_norm, global_norm};
use msved_tensor::{Tape, Tensor};
use proptest::prelude::*;

fn kl_of(mu: &[f64], log_var: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let post = GaussianPosterior {
        mu: tape.constant(Tensor::row(mu.to_vec())),
        log_var: tape.constant(Tensor::row(log_var.to_vec())),
    };
    let kl = kl_to_standard_normal(&mut tape, post).unwrap();
    tape.scalar(kl)
}

fn components_oracle(pairs: &[(String, String)]) -> Vec<Vec<String>> {
    let mut adj: HashMap<&str, Vec<&str>> = HashMap::new();
    let mut order = Vec::new();
    for (a, b) in pairs {
        for w in [a, b] {
            if !adj.contains_key(w.as_str()) {
                order.push(w.as_str());
                adj.insert(w, Vec::new());
            }
        }
        adj.get_mut(a.as_str()).unwrap().push(b);
        adj.get_mut(b.as_str()).unwrap().push(a);
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for &start in &order {
        if !seen.insert(start) {
            continue;
        }
        let mut comp = vec![start.to_string()];
        let mut queue = VecDeque::from([start]);
        while let Some(w) = queue.pop_front() {
            for &n in &adj[w] {
                if seen.insert(n) {
                    comp.push(n.to_string());
                    queue.push_back(n);
                }
            }
        }
        comp.sort();
        out.push(comp);
    }
    out.sort();
    out
}

fn sorted_groups(pairs: &[(String, String)]) -> Vec<Vec<String>> {
    let mut groups: Vec<Vec<String>> = pseudo_lemma_grouping(pairs)
        .groups()
        .into_iter()
        .map(|mut g| {
            g.sort();
            g
        })
        .collect();
    groups.sort();
    groups
}

fn word() -> impl Strategy<Value = String> {
    "[a-e]{1,3}"
}

fn composed_or_decomposed() -> impl Strategy<Value = (String, String)> {
    prop::collection::vec(prop_oneof![Just(("ä", "a\u{308}")), Just(("é", "e\u{301}")), Just(("k", "k"))], 1..6)
        .prop_map(|parts| {
            let a = parts.iter().map(|p| p.0).collect();
            let b = parts.iter().map(|p| p.1).collect();
            (a, b)
        })
}

proptest! {
    #[test]
    fn kl_is_nonnegative(
        cols in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..8),
    ) {
        let (mu, lv): (Vec<f64>, Vec<f64>) = cols.into_iter().unzip();
        prop_assert!(kl_of(&mu, &lv) >= -1e-12);
    }

    #[test]
    fn kl_vanishes_only_at_standard_normal(d in 1usize..8, which in 0usize..8, off in 0.05f64..2.0, on_mean in any::<bool>()) {
        let zeros = vec![0.0; d];
        prop_assert!(kl_of(&zeros, &zeros).abs() < 1e-12);
        let mut moved = zeros.clone();
        moved[which % d] = off;
        let kl = if on_mean { kl_of(&moved, &zeros) } else { kl_of(&zeros, &moved) };
        prop_assert!(kl > 1e-6);
    }

    #[test]
    fn relaxed_samples_are_distributions(
        rows in 1usize..4,
        cols in 1usize..7,
        tau in 0.05f64..3.0,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-4.0..4.0)).collect();
        let g: Vec<f64> = (0..rows * cols).map(|_| msved::stochastic::draw_gumbel(&mut rng)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(rows, cols, logits));
        let lp = tape.log_softmax(x).unwrap();
        let y = gumbel_softmax(&mut tape, lp, tau, &Tensor::matrix(rows, cols, g)).unwrap();
        let y = tape.value(y);
        for r in 0..rows {
            let row = y.row_slice(r);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn schedules_respect_their_bounds(
        lambda_max in 0.0f64..1.0,
        ramp in 0u64..500,
        tau_start in 0.5f64..2.0,
        tau_min in 0.05f64..0.5,
        rate in 0.0f64..0.05,
        steps in 0u64..400,
    ) {
        let cfg = AnnealConfig { lambda_max, ramp_steps: ramp, tau_start, tau_min, tau_rate: rate };
        let mut state = cfg.state_at(0);
        for _ in 0..steps {
            let next = anneal_step(state, &cfg);
            prop_assert!(next.lambda >= state.lambda);
            prop_assert!(next.tau <= state.tau);
            state = next;
            prop_assert!(state.lambda <= lambda_max + 1e-15);
            prop_assert!(state.tau >= tau_min);
        }
        prop_assert_eq!(state, cfg.state_at(steps));
    }

    #[test]
    fn grouping_matches_breadth_first_components(
        edges in prop::collection::vec((word(), word()), 1..40),
    ) {
        prop_assert_eq!(sorted_groups(&edges), components_oracle(&edges));
        let g = pseudo_lemma_grouping(&edges);
        for (a, b) in &edges {
            prop_assert_eq!(g.group_of(a), g.group_of(b));
        }
    }

    #[test]
    fn accuracy_matches_counting_loop(
        pairs in prop::collection::vec((word(), word()), 1..60),
    ) {
        let (p, g): (Vec<String>, Vec<String>) = pairs.iter().cloned().unzip();
        let mut hits = 0;
        for (a, b) in &pairs {
            if a == b {
                hits += 1;
            }
        }
        let acc = exact_match_accuracy(&p, &g).unwrap();
        prop_assert_eq!(acc, hits as f64 / pairs.len() as f64);
    }

    #[test]
    fn accuracy_ignores_normalization_form(pair in composed_or_decomposed()) {
        let (nfc, nfd) = pair;
        prop_assert_eq!(normalize(&nfd), normalize(&nfc));
        prop_assert_eq!(exact_match_accuracy(&[nfd], &[nfc]).unwrap(), 1.0);
    }

    #[test]
    fn clipping_bounds_the_norm(
        grads in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 0..10), 1..5),
        max_norm in 0.1f64..20.0,
    ) {
        let before = global_norm(&grads);
        let mut clipped = grads.clone();
        let reported = clip_global_norm(&mut clipped, max_norm).unwrap();
        prop_assert!((reported - before).abs() < 1e-12);
        let after = global_norm(&clipped);
        prop_assert!(after <= max_norm * (1.0 + 1e-12));
        if before <= max_norm {
            prop_assert_eq!(clipped, grads);
        } else {
            prop_assert!((after - max_norm).abs() < 1e-9 * max_norm);
        }
    }

    #[test]
    fn unlabeled_limit_takes_a_prefix(
        words in prop::collection::vec("[a-d]{0,3}", 0..40),
        small in 0usize..20,
        extra in 0usize..20,
    ) {
        let text = words.join("\n");
        let short = parse_unlabeled_str(&text, small, Provenance::ExternalList);
        let long = parse_unlabeled_str(&text, small + extra, Provenance::ExternalList);
        prop_assert!(short.len() <= small);
        prop_assert_eq!(&long[..short.len()], &short[..]);
        let distinct: HashSet<_> = long.iter().map(|w| &w.form).collect();
        prop_assert_eq!(distinct.len(), long.len());
    }

    #[test]
    fn label_strings_round_trip(
        labels in prop::collection::btree_map("[a-z]{1,4}", "[A-Z0-9]{1,4}", 1..5),
    ) {
        let labels: Vec<(String, String)> = labels.into_iter().collect();
        let ex = LabeledExample { source: "ab".into(), labels: labels.clone(), target: "ba".into() };
        prop_assert_eq!(parse_label_string(&ex.label_string()).unwrap(), labels);
        let back = parse_task3_str(&write_task3(std::slice::from_ref(&ex))).unwrap();
        prop_assert_eq!(back, vec![ex]);
    }

    #[test]
    fn schema_is_deterministic_and_none_first(
        rows in prop::collection::vec(prop::collection::btree_map("[p-t]", "[A-C]", 1..4), 1..12),
    ) {
        let examples: Vec<LabeledExample> = rows
            .into_iter()
            .map(|m| LabeledExample { source: "a".into(), labels: m.into_iter().collect(), target: "b".into() })
            .collect();
        let a = TagSchema::from_examples(&examples).unwrap();
        let b = TagSchema::from_examples(&examples).unwrap();
        prop_assert_eq!(a.hash(), b.hash());
        prop_assert_eq!(&a, &b);
        for cat in &a.categories {
            prop_assert_eq!(cat.labels[0].as_str(), msved::corpus::NONE_LABEL);
        }
        for ex in &examples {
            let v = a.label_vector(&ex.labels).unwrap();
            prop_assert_eq!(v.len(), a.num_categories());
            let mut explicit: Vec<_> = ex.labels.clone();
            explicit.sort();
            let mut shown: Vec<_> = a
                .label_pairs(&v)
                .into_iter()
                .filter(|(_, l)| l != msved::corpus::NONE_LABEL)
                .collect();
            shown.sort();
            prop_assert_eq!(shown, explicit);
        }
    }
}

#[test]
fn grouping_of_a_large_random_graph() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let edges: Vec<(String, String)> = (0..500)
        .map(|_| (format!("w{}", rng.random_range(0..700)), format!("w{}", rng.random_range(0..700))))
        .collect();
    assert_eq!(sorted_groups(&edges), components_oracle(&edges));
    let g = pseudo_lemma_grouping(&edges);
    let mut firsts = Vec::new();
    for &id in &g.group_ids {
        if !firsts.contains(&id) {
            firsts.push(id);
        }
    }
    assert_eq!(firsts, (0..g.num_groups()).collect::<Vec<_>>());
}

#[test]
fn accuracy_over_a_thousand_pairs() {
    let golds: Vec<String> = (0..1000).map(|i| format!("w{i}")).collect();
    let preds: Vec<String> = golds
        .iter()
        .enumerate()
        .map(|(i, g)| if i % 7 == 0 { format!("{g}x") } else { g.clone() })
        .collect();
    let misses = (0..1000).filter(|i| i % 7 == 0).count();
    let acc = exact_match_accuracy(&preds, &golds).unwrap();
    assert_eq!(acc, (1000 - misses) as f64 / 1000.0);
    assert!(exact_match_accuracy::<String, String>(&[], &[]).is_err());
    assert!(exact_match_accuracy(&preds[..3], &golds).is_err());
}
