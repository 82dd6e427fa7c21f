//! Procedural scenes with exact, rule-defined relation ground truth.
//!
//! A scene is a handful of coloured shapes on a grey canvas. Relations between
//! ordered object pairs are a pure function of the boxes (see
//! [`relations_from_geometry`]), so the record alone is the source of truth and
//! images are rasterized on demand.

mod corrupt;
mod perturb;
mod raster;

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use corrupt::{corrupt, psnr, severity_parameter, CorruptionKind, CorruptionSpec, MAX_SEVERITY};
pub use perturb::perturb_boxes;
pub use raster::rasterize;

/// IoU above which two boxes are `overlapping`.
pub const OVERLAP_IOU: f64 = 0.15;
/// Centre distance (fraction of canvas width) below which boxes are `near`.
pub const NEAR_FRACTION: f64 = 0.25;
/// Minimum centre offset (fraction of canvas size) for `left_of` / `above`.
pub const DIRECTION_MARGIN_FRACTION: f64 = 0.08;
/// Area ratio for `larger_than`.
pub const LARGER_RATIO: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    LeftOf,
    Above,
    Near,
    Overlapping,
    Inside,
    LargerThan,
}

impl Predicate {
    pub const ALL: [Predicate; 6] = [
        Predicate::LeftOf,
        Predicate::Above,
        Predicate::Near,
        Predicate::Overlapping,
        Predicate::Inside,
        Predicate::LargerThan,
    ];

    /// Rule evaluation order; the first rule that fires labels the pair.
    pub const PRIORITY: [Predicate; 6] = [
        Predicate::Inside,
        Predicate::Overlapping,
        Predicate::LargerThan,
        Predicate::Near,
        Predicate::LeftOf,
        Predicate::Above,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Predicate::LeftOf => "left_of",
            Predicate::Above => "above",
            Predicate::Near => "near",
            Predicate::Overlapping => "overlapping",
            Predicate::Inside => "inside",
            Predicate::LargerThan => "larger_than",
        }
    }

    /// Does the rule for this predicate fire for `subject -> object`?
    pub fn holds(self, subject: &BBox, object: &BBox, width: f64, height: f64) -> bool {
        let (sx, sy) = subject.center();
        let (ox, oy) = object.center();
        match self {
            Predicate::Inside => subject.within(object) && subject.area() < object.area(),
            Predicate::Overlapping => subject.iou(object) > OVERLAP_IOU,
            Predicate::LargerThan => {
                subject.area() >= LARGER_RATIO * object.area()
                    && (sx - ox).hypot(sy - oy) < 2.0 * NEAR_FRACTION * width
            }
            Predicate::Near => (sx - ox).hypot(sy - oy) < NEAR_FRACTION * width,
            Predicate::LeftOf => sx < ox - DIRECTION_MARGIN_FRACTION * width,
            Predicate::Above => sy < oy - DIRECTION_MARGIN_FRACTION * height,
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Predicate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Predicate::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown predicate `{s}`")))
    }
}

/// Pixel-space box `(x1, y1, x2, y2)` with `x1 < x2`, `y1 < y2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn within(&self, other: &BBox) -> bool {
        self.x1 >= other.x1 && self.y1 >= other.y1 && self.x2 <= other.x2 && self.y2 <= other.y2
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    /// Divides by the canvas size, giving coordinates in `[0, 1]`.
    pub fn normalized(&self, width: f64, height: f64) -> [f64; 4] {
        [
            self.x1 / width,
            self.y1 / height,
            self.x2 / width,
            self.y2 / height,
        ]
    }

    pub fn is_valid_in(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0
            && self.y1 >= 0.0
            && self.x2 <= width
            && self.y2 <= height
            && self.x1 < self.x2
            && self.y1 < self.y2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Rectangle,
    Ellipse,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub category: usize,
    pub shape: Shape,
    pub color: [f64; 3],
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Relation {
    pub subject: usize,
    pub object: usize,
    pub predicate: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<ObjectSpec>,
    pub relations: Vec<Relation>,
}

impl SceneRecord {
    pub fn object_labels(&self) -> Vec<usize> {
        self.objects.iter().map(|o| o.category).collect()
    }

    pub fn normalized_boxes(&self) -> Vec<[f64; 4]> {
        let (w, h) = (f64::from(self.width), f64::from(self.height));
        self.objects.iter().map(|o| o.bbox.normalized(w, h)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub width: u32,
    pub height: u32,
    pub min_objects: usize,
    pub max_objects: usize,
    pub n_categories: usize,
    /// Predicate vocabulary; a predicate's id is its position here.
    pub predicates: Vec<Predicate>,
    pub min_side: u32,
    pub max_side: u32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            width: 64,
            height: 64,
            min_objects: 2,
            max_objects: 6,
            n_categories: 8,
            predicates: Predicate::ALL.to_vec(),
            min_side: 8,
            max_side: 28,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_categories < 2 {
            return bad("need at least 2 categories");
        }
        if self.predicates.len() < 2 {
            return bad("need at least 2 predicates");
        }
        let mut seen = self.predicates.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.predicates.len() {
            return bad("duplicate predicate in vocabulary");
        }
        if self.min_objects < 2 || self.min_objects > self.max_objects {
            return bad("object range must satisfy 2 <= min <= max");
        }
        if self.min_side < 4 || self.min_side > self.max_side {
            return bad("side range must satisfy 4 <= min_side <= max_side");
        }
        if self.max_side > self.width || self.max_side > self.height {
            return bad("max_side exceeds the canvas");
        }
        if !self.width.is_multiple_of(8) || !self.height.is_multiple_of(8) {
            return bad("canvas sides must be multiples of 8");
        }
        Ok(())
    }

    pub fn predicate_id(&self, p: Predicate) -> Option<usize> {
        self.predicates.iter().position(|&q| q == p)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let cfg: GeneratorConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Labels every ordered pair by the first rule (in [`Predicate::PRIORITY`]
/// order, restricted to the vocabulary) that fires. Pairs where nothing fires
/// have no relation.
pub fn relations_from_geometry(
    objects: &[ObjectSpec],
    vocabulary: &[Predicate],
    width: f64,
    height: f64,
) -> Vec<Relation> {
    let mut out = Vec::new();
    for (i, a) in objects.iter().enumerate() {
        for (j, b) in objects.iter().enumerate() {
            if i == j {
                continue;
            }
            let hit = Predicate::PRIORITY
                .iter()
                .filter_map(|&p| vocabulary.iter().position(|&q| q == p).map(|id| (p, id)))
                .find(|(p, _)| p.holds(&a.bbox, &b.bbox, width, height));
            if let Some((_, id)) = hit {
                out.push(Relation {
                    subject: i,
                    object: j,
                    predicate: id,
                });
            }
        }
    }
    out
}

const PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.15, 0.25, 0.90],
    [0.95, 0.85, 0.10],
    [0.80, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.10, 0.10, 0.10],
];

/// Shape and base colour of a category.
pub fn category_appearance(category: usize) -> (Shape, [f64; 3]) {
    let shape = [Shape::Rectangle, Shape::Ellipse, Shape::Triangle][category % 3];
    let mut color = PALETTE[category % PALETTE.len()];
    // categories beyond the palette get a darker shade
    let shade = 1.0 - 0.3 * (category / PALETTE.len()) as f64;
    for c in &mut color {
        *c = (*c * shade).clamp(0.0, 1.0);
    }
    (shape, color)
}

/// Mixes a base seed with a stream index into an independent RNG seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

pub fn generate_scene(id: u64, seed: u64, config: &GeneratorConfig) -> SceneRecord {
    let mut rng = rng_for(seed, id);
    let n = rng.random_range(config.min_objects..=config.max_objects);
    let objects = (0..n)
        .map(|_| {
            let category = rng.random_range(0..config.n_categories);
            let (shape, base) = category_appearance(category);
            let mut color = base;
            for c in &mut color {
                *c = (*c + rng.random_range(-0.05..=0.05)).clamp(0.0, 1.0);
            }
            let w = rng.random_range(config.min_side..=config.max_side);
            let h = rng.random_range(config.min_side..=config.max_side);
            let x1 = rng.random_range(0..=config.width - w);
            let y1 = rng.random_range(0..=config.height - h);
            ObjectSpec {
                category,
                shape,
                color,
                bbox: BBox::new(
                    f64::from(x1),
                    f64::from(y1),
                    f64::from(x1 + w),
                    f64::from(y1 + h),
                ),
            }
        })
        .collect::<Vec<_>>();
    let relations = relations_from_geometry(
        &objects,
        &config.predicates,
        f64::from(config.width),
        f64::from(config.height),
    );
    SceneRecord {
        id,
        width: config.width,
        height: config.height,
        objects,
        relations,
    }
}

/// `n_scenes` scenes with ids `0..n_scenes`, fully determined by `(seed, config)`.
pub fn generate_dataset(seed: u64, n_scenes: usize, config: &GeneratorConfig) -> Result<Vec<SceneRecord>> {
    config.validate()?;
    if n_scenes == 0 {
        return Err(Error::InvalidConfig("n_scenes must be at least 1".into()));
    }
    Ok((0..n_scenes as u64)
        .map(|id| generate_scene(id, seed, config))
        .collect())
}

/// GT relation counts per predicate id.
pub fn predicate_histogram(scenes: &[SceneRecord], n_predicates: usize) -> Vec<usize> {
    let mut hist = vec![0; n_predicates];
    for r in scenes.iter().flat_map(|s| &s.relations) {
        if r.predicate < n_predicates {
            hist[r.predicate] += 1;
        }
    }
    hist
}

pub fn write_dataset(path: &Path, scenes: &[SceneRecord]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for s in scenes {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<SceneRecord>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: SceneRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        validate_scene(&scene)
            .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(scene);
    }
    if out.is_empty() {
        return Err(Error::Parse(format!("{}: no scenes", path.display())));
    }
    Ok(out)
}

/// Structural checks on a record read from disk.
pub fn validate_scene(scene: &SceneRecord) -> Result<()> {
    let (w, h) = (f64::from(scene.width), f64::from(scene.height));
    for (i, o) in scene.objects.iter().enumerate() {
        if !o.bbox.is_valid_in(w, h) {
            return Err(Error::Parse(format!("object {i} has an invalid box")));
        }
    }
    for r in &scene.relations {
        if r.subject == r.object || r.subject >= scene.objects.len() || r.object >= scene.objects.len() {
            return Err(Error::Parse(format!("bad relation {r:?}")));
        }
    }
    Ok(())
}
