use rand::Rng;

use super::{rng_for, BBox, SceneRecord};
use crate::error::{Error, Result};

const MIN_SIDE: f64 = 2.0;
const PERTURB_STREAM: u64 = 0xB0_0000;

/// Jitters every box corner uniformly within `+-magnitude` times the box's own
/// width (x) or height (y). Relations are kept as they were: the ground truth
/// stays fixed while the model sees noisy boxes.
pub fn perturb_boxes(scene: &SceneRecord, magnitude: f64, seed: u64) -> Result<SceneRecord> {
    if !(0.0..=1.0).contains(&magnitude) {
        return Err(Error::InvalidConfig(format!(
            "perturbation magnitude {magnitude} outside [0, 1]"
        )));
    }
    let mut out = scene.clone();
    if magnitude == 0.0 {
        return Ok(out);
    }
    let (cw, ch) = (f64::from(scene.width), f64::from(scene.height));
    let mut rng = rng_for(seed, PERTURB_STREAM ^ scene.id);
    for obj in &mut out.objects {
        let b = obj.bbox;
        let (dx, dy) = (magnitude * b.width(), magnitude * b.height());
        let mut jitter = |v: f64, d: f64, hi: f64| (v + rng.random_range(-d..=d)).clamp(0.0, hi);
        let x1 = jitter(b.x1, dx, cw);
        let y1 = jitter(b.y1, dy, ch);
        let x2 = jitter(b.x2, dx, cw);
        let y2 = jitter(b.y2, dy, ch);
        let (x1, x2) = repair(x1, x2, cw);
        let (y1, y2) = repair(y1, y2, ch);
        obj.bbox = BBox::new(x1, y1, x2, y2);
    }
    Ok(out)
}

/// Restores `lo < hi` with at least `MIN_SIDE` extent inside `[0, limit]`.
fn repair(a: f64, b: f64, limit: f64) -> (f64, f64) {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    if hi - lo >= MIN_SIDE {
        return (lo, hi);
    }
    let mid = ((lo + hi) / 2.0).clamp(MIN_SIDE / 2.0, limit - MIN_SIDE / 2.0);
    (mid - MIN_SIDE / 2.0, mid + MIN_SIDE / 2.0)
}
