//! Evaluation over a grid of corruption kinds and severities.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{gt_triplets, mean_recall_at_k, recall_at_k, SceneHits};
use crate::error::{Error, Result};
use crate::pipeline::{Model, Prediction, Task};
use crate::synth::{corrupt, derive_seed, perturb_boxes, rasterize, CorruptionKind, CorruptionSpec, SceneRecord};

pub const CSV_HEADER: &str = "task,method,corruption,severity,k,recall,mean_recall,n_scenes";
pub const CLEAN: &str = "clean";
pub const CORRUPTION_AVG: &str = "corruption_avg";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub task: Task,
    pub ks: Vec<usize>,
    /// Box jitter applied to the model's input boxes (not to the ground truth).
    pub perturb_bbox: Option<f64>,
    /// Seeds corruption noise and box jitter.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            task: Task::PredCls,
            ks: vec![20, 50, 100],
            perturb_bbox: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchGrid {
    pub kinds: Vec<CorruptionKind>,
    /// `0` is the clean column.
    pub severities: Vec<u8>,
}

impl Default for BenchGrid {
    fn default() -> Self {
        BenchGrid {
            kinds: CorruptionKind::ALL.to_vec(),
            severities: (0..=5).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub task: Task,
    pub method: String,
    pub corruption: String,
    pub severity: u8,
    pub k: usize,
    pub recall: f64,
    pub mean_recall: f64,
    pub n_scenes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{:.6},{:.6},{}",
                r.task, r.method, r.corruption, r.severity, r.k, r.recall, r.mean_recall, r.n_scenes
            )
            .expect("writing to a String");
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn find(&self, method: &str, corruption: &str, severity: u8, k: usize) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.corruption == corruption && r.severity == severity && r.k == k)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == CSV_HEADER => {}
            _ => return Err(Error::Parse(format!("report must start with `{CSV_HEADER}`"))),
        }
        let mut rows = Vec::new();
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Parse(format!("line {}: {what}", n + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad("expected 8 fields"));
            }
            let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| bad(what));
            rows.push(MetricsRow {
                task: f[0].parse().map_err(|_| bad("task"))?,
                method: f[1].to_string(),
                corruption: f[2].to_string(),
                severity: f[3].parse().map_err(|_| bad("severity"))?,
                k: f[4].parse().map_err(|_| bad("k"))?,
                recall: num(f[5], "recall")?,
                mean_recall: num(f[6], "mean_recall")?,
                n_scenes: f[7].parse().map_err(|_| bad("n_scenes"))?,
            });
        }
        Ok(MetricsReport { rows })
    }
}

/// Metrics of one model on one (corruption, severity) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    /// `(k, recall, mean_recall)` in the order of [`EvalOptions::ks`].
    pub metrics: Vec<(usize, f64, f64)>,
    pub n_scenes: usize,
    /// Mean gate value over all objects and pairs, if the model gates.
    pub mean_gate: Option<f64>,
}

/// The image and input boxes the model sees for `scene` in a cell.
pub fn prepare_input(
    scene: &SceneRecord,
    corruption: Option<CorruptionSpec>,
    opts: &EvalOptions,
) -> Result<(crate::tensor::Tensor, SceneRecord)> {
    let clean = rasterize(scene);
    let image = match corruption {
        Some(spec) => corrupt(&clean, spec, derive_seed(opts.seed, scene.id))?,
        None => clean,
    };
    let input = match opts.perturb_bbox {
        Some(m) => perturb_boxes(scene, m, opts.seed)?,
        None => scene.clone(),
    };
    Ok((image, input))
}

fn predict(model: &Model, scene: &SceneRecord, corruption: Option<CorruptionSpec>, opts: &EvalOptions) -> Result<Prediction> {
    let (image, input) = prepare_input(scene, corruption, opts)?;
    let labels = scene.object_labels();
    Ok(model
        .forward_with_cache(&image, &input.normalized_boxes(), Some(&labels), opts.task)?
        .0)
}

pub fn evaluate(
    model: &Model,
    scenes: &[SceneRecord],
    corruption: Option<CorruptionSpec>,
    opts: &EvalOptions,
) -> Result<CellResult> {
    let mut hits = Vec::with_capacity(scenes.len());
    let (mut gate_sum, mut gate_n) = (0.0, 0usize);
    for scene in scenes {
        let pred = predict(model, scene, corruption, opts)?;
        hits.push(SceneHits::new(&pred.triplets, &gt_triplets(scene), opts.task));
        gate_sum += pred.gate_values.iter().sum::<f64>();
        gate_n += pred.gate_values.len();
    }
    let n_classes = model.config().n_predicates;
    let metrics = opts
        .ks
        .iter()
        .map(|&k| Ok((k, recall_at_k(&hits, k)?, mean_recall_at_k(&hits, k, n_classes)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(CellResult {
        metrics,
        n_scenes: scenes.len(),
        mean_gate: (gate_n > 0).then(|| gate_sum / gate_n as f64),
    })
}

fn check_method(label: &str) -> Result<()> {
    if label.is_empty() || label.contains([',', '\n', '\r']) {
        return Err(Error::InvalidConfig(format!("method label `{label}` is not CSV-safe")));
    }
    Ok(())
}

fn check_grid(grid: &BenchGrid) -> Result<()> {
    if grid.severities.is_empty() {
        return Err(Error::InvalidConfig("grid has no severities".into()));
    }
    if grid.kinds.is_empty() && grid.severities.iter().any(|&s| s > 0) {
        return Err(Error::InvalidConfig("grid has corrupted severities but no kinds".into()));
    }
    for &s in &grid.severities {
        CorruptionSpec::new(CorruptionKind::GaussianNoise, s)?;
    }
    Ok(())
}

/// Evaluates every `(method, model)` over every grid cell. Severity 0 yields
/// one `clean` row per K; each corrupted severity yields one row per kind plus
/// a `corruption_avg` row holding the mean over kinds.
pub fn bench_run(models: &[(String, &Model)], scenes: &[SceneRecord], grid: &BenchGrid, opts: &EvalOptions) -> Result<MetricsReport> {
    check_grid(grid)?;
    let mut rows = Vec::new();
    for (method, model) in models {
        check_method(method)?;
        let row = |corruption: &str, severity: u8, (k, recall, mean_recall): (usize, f64, f64)| MetricsRow {
            task: opts.task,
            method: method.clone(),
            corruption: corruption.to_string(),
            severity,
            k,
            recall,
            mean_recall,
            n_scenes: scenes.len(),
        };
        for &severity in &grid.severities {
            if severity == 0 {
                let cell = evaluate(model, scenes, None, opts)?;
                rows.extend(cell.metrics.into_iter().map(|m| row(CLEAN, 0, m)));
                continue;
            }
            let mut sums = vec![(0.0, 0.0); opts.ks.len()];
            for &kind in &grid.kinds {
                let cell = evaluate(model, scenes, Some(CorruptionSpec::new(kind, severity)?), opts)?;
                for (s, &(_, r, m)) in sums.iter_mut().zip(&cell.metrics) {
                    s.0 += r;
                    s.1 += m;
                }
                rows.extend(cell.metrics.into_iter().map(|m| row(kind.name(), severity, m)));
            }
            let n = grid.kinds.len() as f64;
            for (&k, &(r, m)) in opts.ks.iter().zip(&sums) {
                rows.push(row(CORRUPTION_AVG, severity, (k, r / n, m / n)));
            }
        }
    }
    Ok(MetricsReport { rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateRow {
    pub corruption: String,
    pub severity: u8,
    pub mean_gate: f64,
}

/// Mean gate value per grid cell. Needs a model with gated layout fusion.
pub fn gate_stats(model: &Model, scenes: &[SceneRecord], grid: &BenchGrid, opts: &EvalOptions) -> Result<Vec<GateRow>> {
    let c = model.config();
    if !c.enable_lee || c.fusion != crate::lee::FusionMode::Gate {
        return Err(Error::GateModeAbsent);
    }
    check_grid(grid)?;
    let mut out = Vec::new();
    let cell = |corruption: Option<CorruptionSpec>| -> Result<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        for scene in scenes {
            let pred = predict(model, scene, corruption, opts)?;
            sum += pred.gate_values.iter().sum::<f64>();
            n += pred.gate_values.len();
        }
        Ok(sum / n.max(1) as f64)
    };
    for &severity in &grid.severities {
        if severity == 0 {
            out.push(GateRow {
                corruption: CLEAN.into(),
                severity,
                mean_gate: cell(None)?,
            });
            continue;
        }
        for &kind in &grid.kinds {
            out.push(GateRow {
                corruption: kind.name().into(),
                severity,
                mean_gate: cell(Some(CorruptionSpec::new(kind, severity)?))?,
            });
        }
    }
    Ok(out)
}

pub const IMPROVEMENT_HEADER: &str =
    "task,corruption,severity,k,base_recall,ours_recall,recall_imp,base_mean_recall,ours_mean_recall,mean_recall_imp";

fn relative(base: f64, ours: f64) -> String {
    if base > 0.0 {
        format!("{:.6}", (ours - base) / base)
    } else {
        String::new()
    }
}

/// Joins two single-method reports on `(task, corruption, severity, k)` and
/// adds relative improvements `(ours - base) / base`, left empty when the
/// base value is 0.
pub fn improvement_table(base: &MetricsReport, ours: &MetricsReport) -> Result<String> {
    type Key = (Task, String, u8, usize);
    let index = |rep: &MetricsReport, which: &str| -> Result<BTreeMap<Key, (f64, f64)>> {
        let mut map = BTreeMap::new();
        for r in &rep.rows {
            let key = (r.task, r.corruption.clone(), r.severity, r.k);
            if map.insert(key, (r.recall, r.mean_recall)).is_some() {
                return Err(Error::Parse(format!(
                    "{which} report has several rows for {} {} severity {} k {}",
                    r.task, r.corruption, r.severity, r.k
                )));
            }
        }
        Ok(map)
    };
    let ours_rows = index(ours, "ours")?;
    index(base, "base")?;
    let mut out = String::from(IMPROVEMENT_HEADER);
    out.push('\n');
    for r in &base.rows {
        let key = (r.task, r.corruption.clone(), r.severity, r.k);
        let &(or, om) = ours_rows.get(&key).ok_or_else(|| {
            Error::Parse(format!(
                "ours report lacks {} {} severity {} k {}",
                r.task, r.corruption, r.severity, r.k
            ))
        })?;
        writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{},{:.6},{:.6},{}",
            r.task,
            r.corruption,
            r.severity,
            r.k,
            r.recall,
            or,
            relative(r.recall, or),
            r.mean_recall,
            om,
            relative(r.mean_recall, om)
        )
        .expect("writing to a String");
    }
    Ok(out)
}
