//! Triplet matching, recall and class-balanced mean recall.

use crate::error::{Error, Result};
use crate::pipeline::{Task, Triplet};
use crate::synth::SceneRecord;

/// Ground-truth triplet with the object labels it requires.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GtTriplet {
    pub subject: usize,
    pub object: usize,
    pub subject_label: usize,
    pub object_label: usize,
    pub predicate: usize,
}

pub fn gt_triplets(scene: &SceneRecord) -> Vec<GtTriplet> {
    scene
        .relations
        .iter()
        .map(|r| GtTriplet {
            subject: r.subject,
            object: r.object,
            subject_label: scene.objects[r.subject].category,
            object_label: scene.objects[r.object].category,
            predicate: r.predicate,
        })
        .collect()
}

fn matches(p: &Triplet, g: &GtTriplet, task: Task) -> bool {
    let same = p.subject == g.subject && p.object == g.object && p.predicate == g.predicate;
    match task {
        Task::PredCls => same,
        Task::SgCls => same && p.subject_label == g.subject_label && p.object_label == g.object_label,
    }
}

/// 1-based rank at which each ground-truth triplet is first hit.
///
/// Predictions are consumed best-first; each one claims the lowest-indexed
/// unmatched ground-truth triplet it matches, so a prediction hits at most
/// one triplet and duplicates in the ground truth need duplicate predictions.
pub fn match_triplets(pred: &[Triplet], gt: &[GtTriplet], task: Task) -> Vec<Option<usize>> {
    let mut hit = vec![None; gt.len()];
    let mut open = gt.len();
    for (r, p) in pred.iter().enumerate() {
        if open == 0 {
            break;
        }
        if let Some(g) = (0..gt.len()).find(|&g| hit[g].is_none() && matches(p, &gt[g], task)) {
            hit[g] = Some(r + 1);
            open -= 1;
        }
    }
    hit
}

/// Match outcome for one scene.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SceneHits {
    pub predicates: Vec<usize>,
    pub hit_rank: Vec<Option<usize>>,
}

impl SceneHits {
    pub fn new(pred: &[Triplet], gt: &[GtTriplet], task: Task) -> Self {
        SceneHits {
            predicates: gt.iter().map(|g| g.predicate).collect(),
            hit_rank: match_triplets(pred, gt, task),
        }
    }

    fn hit_within(&self, i: usize, k: usize) -> bool {
        self.hit_rank[i].is_some_and(|r| r <= k)
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidConfig("K must be at least 1".into()));
    }
    Ok(())
}

/// Per-scene recall within the top `k`, averaged over scenes that have
/// ground truth.
pub fn recall_at_k(scenes: &[SceneHits], k: usize) -> Result<f64> {
    check_k(k)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in scenes.iter().filter(|s| !s.predicates.is_empty()) {
        let hits = (0..s.predicates.len()).filter(|&i| s.hit_within(i, k)).count();
        sum += hits as f64 / s.predicates.len() as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoGroundTruth);
    }
    Ok(sum / n as f64)
}

/// Per-class `(hits, instances)` pooled over the split.
pub fn class_hits(scenes: &[SceneHits], k: usize, n_classes: usize) -> Result<Vec<(usize, usize)>> {
    check_k(k)?;
    let mut table = vec![(0usize, 0usize); n_classes];
    for s in scenes {
        for (i, &c) in s.predicates.iter().enumerate() {
            let slot = table.get_mut(c).ok_or(Error::LabelOutOfRange {
                label: c,
                classes: n_classes,
            })?;
            slot.1 += 1;
            if s.hit_within(i, k) {
                slot.0 += 1;
            }
        }
    }
    Ok(table)
}

/// Mean over predicate classes of the pooled per-class recall; classes with
/// no instances in the split are left out.
pub fn mean_recall_at_k(scenes: &[SceneHits], k: usize, n_classes: usize) -> Result<f64> {
    let table = class_hits(scenes, k, n_classes)?;
    let present: Vec<f64> = table
        .iter()
        .filter(|(_, n)| *n > 0)
        .map(|&(h, n)| h as f64 / n as f64)
        .collect();
    if present.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}
