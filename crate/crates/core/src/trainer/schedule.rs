use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::Interleave;
use crate::rng::{stream, Purpose};

/// Example indices for one optimizer update.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledBatch {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

impl ScheduledBatch {
    pub fn kind(&self) -> &'static str {
        match (self.labeled.is_empty(), self.unlabeled.is_empty()) {
            (false, true) => "labeled",
            (true, false) => "unlabeled",
            _ => "joint",
        }
    }
}

/// Unlabeled batches per epoch, proportional to corpus sizes.
pub fn unlabeled_batch_count(labeled_batches: usize, n_labeled: usize, n_unlabeled: usize) -> usize {
    if n_labeled == 0 || n_unlabeled == 0 {
        return 0;
    }
    ((labeled_batches * n_unlabeled) as f64 / n_labeled as f64).round() as usize
}

/// Spreads the labeled batches evenly among the unlabeled ones. Every
/// labeled index appears exactly once.
pub fn interleave_batches(
    labeled: &[usize],
    unlabeled: &[usize],
    batch_size: usize,
    style: Interleave,
) -> Vec<ScheduledBatch> {
    let lab: Vec<&[usize]> = labeled.chunks(batch_size.max(1)).collect();
    let unl: Vec<&[usize]> = unlabeled.chunks(batch_size.max(1)).collect();
    let total = lab.len() + unl.len();
    let (mut li, mut ui) = (0, 0);
    let mut alternating = Vec::with_capacity(total);
    for pos in 0..total {
        let take_labeled = !lab.is_empty() && (pos + 1) * lab.len() / total > pos * lab.len() / total;
        if take_labeled {
            alternating.push(ScheduledBatch {
                labeled: lab[li].to_vec(),
                unlabeled: Vec::new(),
            });
            li += 1;
        } else {
            alternating.push(ScheduledBatch {
                labeled: Vec::new(),
                unlabeled: unl[ui].to_vec(),
            });
            ui += 1;
        }
    }
    match style {
        Interleave::Alternate => alternating,
        Interleave::Joint => {
            let mut joint: Vec<ScheduledBatch> = Vec::with_capacity(lab.len());
            let mut pending = Vec::new();
            for b in alternating {
                if b.labeled.is_empty() {
                    pending.extend(b.unlabeled);
                } else {
                    joint.push(ScheduledBatch {
                        labeled: b.labeled,
                        unlabeled: std::mem::take(&mut pending),
                    });
                }
            }
            match joint.last_mut() {
                Some(last) => last.unlabeled.extend(pending),
                None if !pending.is_empty() => joint.push(ScheduledBatch {
                    labeled: Vec::new(),
                    unlabeled: pending,
                }),
                None => {}
            }
            joint
        }
    }
}

/// Labeled example order for an epoch.
pub fn labeled_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, Purpose::LabeledShuffle, epoch));
    idx
}

/// Positions `start..start + len` of the endless unlabeled stream: a fresh
/// permutation of the corpus for every pass.
pub fn unlabeled_window(seed: u64, n: usize, start: usize, len: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(len);
    let mut pass = start / n;
    let mut offset = start % n;
    while out.len() < len {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut stream(seed, Purpose::UnlabeledShuffle, pass as u64));
        let take = (len - out.len()).min(n - offset);
        out.extend_from_slice(&perm[offset..offset + take]);
        pass += 1;
        offset = 0;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labeled_only_schedule() {
        let s = interleave_batches(&(0..10).collect::<Vec<_>>(), &[], 4, Interleave::Alternate);
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|b| b.unlabeled.is_empty()));
    }

    #[test]
    fn ratio_one_to_three() {
        let lab: Vec<usize> = (0..100).collect();
        let n_unl = unlabeled_batch_count(10, 100, 300);
        assert_eq!(n_unl, 30);
        let unl = unlabeled_window(1, 300, 0, n_unl * 10);
        let s = interleave_batches(&lab, &unl, 10, Interleave::Alternate);
        let l = s.iter().filter(|b| b.kind() == "labeled").count();
        let u = s.iter().filter(|b| b.kind() == "unlabeled").count();
        assert_eq!((l, u), (10, 30));
        // No run of more than three unlabeled batches.
        let mut run = 0;
        for b in &s {
            run = if b.kind() == "unlabeled" { run + 1 } else { 0 };
            assert!(run <= 3);
        }
    }

    #[test]
    fn every_labeled_example_once_per_epoch() {
        for style in [Interleave::Alternate, Interleave::Joint] {
            let lab = labeled_order(5, 2, 37);
            let unl = unlabeled_window(5, 50, 120, 64);
            let s = interleave_batches(&lab, &unl, 8, style);
            let mut seen: Vec<usize> = s.iter().flat_map(|b| b.labeled.clone()).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..37).collect::<Vec<_>>());
            let unl_total: usize = s.iter().map(|b| b.unlabeled.len()).sum();
            assert_eq!(unl_total, 64);
        }
    }

    #[test]
    fn unlabeled_stream_is_consistent_across_windows() {
        let whole = unlabeled_window(3, 7, 0, 30);
        assert_eq!(unlabeled_window(3, 7, 10, 12), whole[10..22]);
        let mut first_pass = whole[..7].to_vec();
        first_pass.sort_unstable();
        assert_eq!(first_pass, (0..7).collect::<Vec<_>>());
    }
}
