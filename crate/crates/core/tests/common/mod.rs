//! Independent metric oracle shared by the metric tests and the acceptance run.

#![allow(dead_code)]

use rand::Rng;
use sgg_core::eval::GtTriplet;
use sgg_core::pipeline::{Task, Triplet};

fn same(p: &Triplet, g: &GtTriplet, task: Task) -> bool {
    let base = (p.subject, p.object, p.predicate) == (g.subject, g.object, g.predicate);
    base && (task == Task::PredCls || (p.subject_label, p.object_label) == (g.subject_label, g.object_label))
}

/// Kuhn's augmenting-path search.
fn augment(g: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
    for &p in &adj[g] {
        if seen[p] {
            continue;
        }
        seen[p] = true;
        if owner[p].is_none() || augment(owner[p].unwrap(), adj, seen, owner) {
            owner[p] = Some(g);
            return true;
        }
    }
    false
}

/// Maximum one-to-one matching between the ground truth and the top `k`
/// predictions; returns which ground-truth triplets are matched.
pub fn max_matching(pred: &[Triplet], gt: &[GtTriplet], task: Task, k: usize) -> Vec<bool> {
    let top = &pred[..k.min(pred.len())];
    let adj: Vec<Vec<usize>> = gt
        .iter()
        .map(|g| (0..top.len()).filter(|&p| same(&top[p], g, task)).collect())
        .collect();
    let mut owner = vec![None; top.len()];
    for g in 0..gt.len() {
        let mut seen = vec![false; top.len()];
        augment(g, &adj, &mut seen, &mut owner);
    }
    let mut matched = vec![false; gt.len()];
    for g in owner.into_iter().flatten() {
        matched[g] = true;
    }
    matched
}

/// `(R@K, mR@K)` by exhaustive matching and per-class pooling; `None` when
/// the split has no ground truth.
pub fn oracle_metrics(
    scenes: &[(Vec<Triplet>, Vec<GtTriplet>)],
    k: usize,
    n_classes: usize,
    task: Task,
) -> Option<(f64, f64)> {
    let mut recall_sum = 0.0;
    let mut scenes_with_gt = 0;
    let mut hits = vec![0usize; n_classes];
    let mut total = vec![0usize; n_classes];
    for (pred, gt) in scenes {
        let matched = max_matching(pred, gt, task, k);
        for (g, &m) in gt.iter().zip(&matched) {
            total[g.predicate] += 1;
            hits[g.predicate] += usize::from(m);
        }
        if !gt.is_empty() {
            recall_sum += matched.iter().filter(|&&m| m).count() as f64 / gt.len() as f64;
            scenes_with_gt += 1;
        }
    }
    if scenes_with_gt == 0 {
        return None;
    }
    let per_class: Vec<f64> = (0..n_classes)
        .filter(|&c| total[c] > 0)
        .map(|c| hits[c] as f64 / total[c] as f64)
        .collect();
    Some((
        recall_sum / scenes_with_gt as f64,
        per_class.iter().sum::<f64>() / per_class.len() as f64,
    ))
}

/// Random split of at most 4 scenes with at most 6 objects, duplicate-heavy
/// on purpose.
pub fn random_fixture(rng: &mut impl Rng, n_classes: usize) -> Vec<(Vec<Triplet>, Vec<GtTriplet>)> {
    let n_scenes = rng.random_range(1..=4);
    (0..n_scenes)
        .map(|_| {
            let n_obj = rng.random_range(2..=6);
            let labels: Vec<usize> = (0..n_obj).map(|_| rng.random_range(0..3)).collect();
            let pair = |rng: &mut dyn rand::RngCore| {
                let s = rng.random_range(0..n_obj);
                let o = (s + rng.random_range(1..n_obj)) % n_obj;
                (s, o)
            };
            let gt: Vec<GtTriplet> = (0..rng.random_range(0..=8))
                .map(|_| {
                    let (s, o) = pair(rng);
                    GtTriplet {
                        subject: s,
                        object: o,
                        subject_label: labels[s],
                        object_label: labels[o],
                        predicate: rng.random_range(0..n_classes),
                    }
                })
                .collect();
            let pred: Vec<Triplet> = (0..rng.random_range(0..=16))
                .map(|i| {
                    // half of the predictions copy a ground-truth triplet
                    let (s, o, p) = match gt.get(rng.random_range(0..gt.len().max(1) * 2)) {
                        Some(g) => (g.subject, g.object, g.predicate),
                        None => {
                            let (s, o) = pair(rng);
                            (s, o, rng.random_range(0..n_classes))
                        }
                    };
                    let flip = rng.random_bool(0.2);
                    Triplet {
                        pair: i,
                        subject: s,
                        object: o,
                        subject_label: if flip { (labels[s] + 1) % 3 } else { labels[s] },
                        object_label: labels[o],
                        predicate: p,
                        score: 1.0 - i as f64 / 32.0,
                    }
                })
                .collect();
            (pred, gt)
        })
        .collect()
}
