//! Acceptance run: one `[PASS]`/`[FAIL]` line per criterion, non-zero exit
//! status if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgg_core::eval::{
    bench_run, evaluate, gate_stats, mean_recall_at_k, recall_at_k, BenchGrid, EvalOptions, MetricsReport, SceneHits,
    CLEAN, CORRUPTION_AVG, CSV_HEADER,
};
use sgg_core::grad_suite::run_suite;
use sgg_core::lee::{gate_fuse, EncoderDims, FusionMode, ObjectEncoder};
use sgg_core::nrm::{instance_normalize, layout_attention, nrm_forward, AttentionMode, Layout, DEFAULT_EPS};
use sgg_core::param::ParamSet;
use sgg_core::pipeline::{read_model, train, write_model, Model, ModelConfig, Task, TrainConfig};
use sgg_core::synth::{
    generate_dataset, perturb_boxes, write_dataset, CorruptionKind, CorruptionSpec, GeneratorConfig, SceneRecord,
};
use sgg_core::Tensor;

type Outcome = Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

// ---------------------------------------------------------------- C1

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let (mut worst_op, mut worst_model, mut failed) = (0.0f64, 0.0f64, Vec::new());
    let mut n = 0;
    for seed in 0..5 {
        for check in run_suite(seed).map_err(err)? {
            n += 1;
            if check.name.starts_with("model to loss") {
                worst_model = worst_model.max(check.max_rel_err);
            } else {
                worst_op = worst_op.max(check.max_rel_err);
            }
            if !check.passed() {
                failed.push(format!("seed {seed} {}: {:.2e}", check.name, check.max_rel_err));
            }
        }
    }
    let elapsed = start.elapsed();
    let ok = failed.is_empty() && elapsed < Duration::from_secs(120);
    Ok((
        ok,
        format!(
            "{n} checks over 5 seeds, worst op {worst_op:.2e} (< 1e-5), worst model {worst_model:.2e} (< 1e-4), {:.1}s{}",
            elapsed.as_secs_f64(),
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    ))
}

// ---------------------------------------------------------------- C2

fn random_layout(rng: &mut ChaCha8Rng, n: usize) -> Layout {
    let boxes = (0..n)
        .map(|_| {
            let (x1, y1) = (rng.random_range(0.0..0.8), rng.random_range(0.0..0.8));
            [x1, y1, x1 + rng.random_range(0.05..0.2), y1 + rng.random_range(0.05..0.2)]
        })
        .collect();
    Layout::new(boxes).expect("valid boxes")
}

fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, scale: f64) -> Tensor {
    let offsets: Vec<f64> = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
    let data = (0..c * h * w)
        .map(|i| offsets[i / (h * w)] + scale * rng.random_range(-1.0..1.0))
        .collect();
    Tensor::new(vec![c, h, w], data).expect("finite")
}

fn nrm_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut recon, mut affine, mut identity_bad, mut rowsum, mut mask_bad) = (0.0f64, 0.0f64, 0, 0.0f64, 0);
    for _ in 0..200 {
        let (c, h, w) = (rng.random_range(1..6), rng.random_range(2..9), rng.random_range(2..9));
        // (a) normalized + residual == f
        let scale = rng.random_range(0.1..10.0);
        let f = random_map(&mut rng, c, h, w, scale);
        let n = instance_normalize(&f, DEFAULT_EPS).map_err(err)?;
        for ((a, b), x) in n.normalized.data().iter().zip(n.residual.data()).zip(f.data()) {
            recon = recon.max((a + b - x).abs());
        }
        // (b) per-channel affine corruption on feature-scale channels
        let scale = rng.random_range(10.0..40.0);
        let f = random_map(&mut rng, c, h, w, scale);
        let (alpha, beta): (Vec<f64>, Vec<f64>) =
            (0..c).map(|_| (rng.random_range(0.5..2.0), rng.random_range(-5.0..5.0))).unzip();
        let g: Vec<f64> = f
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| alpha[i / (h * w)] * v + beta[i / (h * w)])
            .collect();
        let g = Tensor::new(vec![c, h, w], g).map_err(err)?;
        let (nf, ng) = (
            instance_normalize(&f, DEFAULT_EPS).map_err(err)?,
            instance_normalize(&g, DEFAULT_EPS).map_err(err)?,
        );
        affine = affine.max(nf.normalized.max_abs_diff(&ng.normalized));
        // (c) single object: exact identity
        let layout = random_layout(&mut rng, 1);
        for mode in [AttentionMode::Centroid, AttentionMode::Bbox] {
            let out = nrm_forward(&f, &layout, DEFAULT_EPS, mode).map_err(err)?;
            if out.output != f {
                identity_bad += 1;
            }
        }
        // (d) attention rows and mask range
        let n_obj = rng.random_range(1..8);
        let layout = random_layout(&mut rng, n_obj);
        for mode in [AttentionMode::Centroid, AttentionMode::Bbox] {
            let a = layout_attention(&layout, (h, w), mode).map_err(err)?;
            for r in 0..h * w {
                rowsum = rowsum.max((a.weights.row_slice(r).iter().sum::<f64>() - 1.0).abs());
            }
            let lo = 1.0 / n_obj as f64;
            mask_bad += a.mask.data().iter().filter(|&&m| !(lo <= m && m <= 1.0)).count();
        }
    }
    let ok = recon <= 1e-12 && affine <= 1e-6 && identity_bad == 0 && rowsum <= 1e-9 && mask_bad == 0;
    Ok((
        ok,
        format!(
            "200 cases each: reconstruction {recon:.1e}, affine {affine:.1e}, identity failures {identity_bad}, \
             row-sum {rowsum:.1e}, mask outside [1/N, 1] {mask_bad}"
        ),
    ))
}

// ---------------------------------------------------------------- C3

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::new(vec![r, c], (0..r * c).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).expect("finite")
}

fn lee_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut convex_bad, mut z_bad, mut half_bad, mut bypass_bad) = (0, 0, 0, 0);
    for case in 0..200u64 {
        let (n, d) = (rng.random_range(1..5), rng.random_range(1..9));
        let scale = rng.random_range(0.1..20.0);
        let f = random_matrix(&mut rng, n, d, scale);
        let fc = random_matrix(&mut rng, n, d, scale);
        let w_scale = rng.random_range(0.1..5.0);
        let w = random_matrix(&mut rng, d, d, w_scale);
        let fused = gate_fuse(&f, &fc, FusionMode::Gate, Some(&w)).map_err(err)?;
        for ((o, a), c) in fused.out.data().iter().zip(f.data()).zip(fc.data()) {
            let slack = 1e-12 * a.abs().max(c.abs());
            if *o < a.min(*c) - slack || *o > a.max(*c) + slack {
                convex_bad += 1;
            }
        }
        z_bad += fused.z.as_ref().expect("gate").data().iter().filter(|&&z| !(z > 0.0 && z < 1.0)).count();
        let zero = gate_fuse(&f, &fc, FusionMode::Gate, Some(&Tensor::zeros(&[d, d]))).map_err(err)?;
        for ((o, a), c) in zero.out.data().iter().zip(f.data()).zip(fc.data()) {
            if *o != 0.5 * a + 0.5 * c {
                half_bad += 1;
            }
        }
        // bypass: same seed, with and without the layout branch
        let dims = EncoderDims {
            visual: rng.random_range(1..6),
            category: rng.random_range(1..4),
            bbox: rng.random_range(1..4),
            hidden: d,
        };
        let mode = [FusionMode::Gate, FusionMode::ConcatProj, FusionMode::Add][case as usize % 3];
        let (mut pa, mut pb) = (ParamSet::new(), ParamSet::new());
        let plain = ObjectEncoder::new(&mut pa, case, 4, dims, None).map_err(err)?;
        let with = ObjectEncoder::new(&mut pb, case, 4, dims, Some(mode)).map_err(err)?;
        let v = random_matrix(&mut rng, n, dims.visual, 1.0);
        let labels: Vec<Option<usize>> = (0..n).map(|i| (i % 2 == 0).then_some(i % 4)).collect();
        let boxes: Vec<[f64; 4]> = (0..n)
            .map(|_| {
                let x = rng.random_range(0.0..0.5);
                [x, x, x + 0.3, x + 0.4]
            })
            .collect();
        let (a, _) = plain.forward(&pa, &v, &labels, &boxes).map_err(err)?;
        let (b, _) = with.without_lee().forward(&pb, &v, &labels, &boxes).map_err(err)?;
        let (c, _) = with.forward(&pb, &v, &labels, &boxes).map_err(err)?;
        if a.f_prime != b.f_prime || a.f_prime != c.f || a.f_prime != a.f {
            bypass_bad += 1;
        }
    }
    let ok = convex_bad + z_bad + half_bad + bypass_bad == 0;
    Ok((
        ok,
        format!(
            "200 cases: non-convex entries {convex_bad}, z outside (0,1) {z_bad}, W=0 not 0.5-mix {half_bad}, \
             bypass mismatches {bypass_bad}"
        ),
    ))
}

// ---------------------------------------------------------------- C4

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n_classes = 4;
    let mut mismatches = 0;
    let mut compared = 0;
    for case in 0..50 {
        let task = if case % 2 == 0 { Task::PredCls } else { Task::SgCls };
        let fixture = common::random_fixture(&mut rng, n_classes);
        let hits: Vec<SceneHits> = fixture.iter().map(|(p, g)| SceneHits::new(p, g, task)).collect();
        for k in [1, 2, 3, 5, 8, 20] {
            let oracle = common::oracle_metrics(&fixture, k, n_classes, task);
            let ours = recall_at_k(&hits, k).ok().zip(mean_recall_at_k(&hits, k, n_classes).ok());
            compared += 1;
            if oracle != ours {
                mismatches += 1;
            }
        }
    }
    let two_class = SceneHits {
        predicates: [vec![0; 10], vec![1]].concat(),
        hit_rank: [vec![Some(1); 10], vec![None]].concat(),
    };
    let r = recall_at_k(std::slice::from_ref(&two_class), 50).map_err(err)?;
    let mr = mean_recall_at_k(std::slice::from_ref(&two_class), 50, 2).map_err(err)?;
    let hand = r == 10.0 / 11.0 && mr == 0.5;
    Ok((
        mismatches == 0 && hand,
        format!("50 fixtures, {compared} (fixture, K) pairs, {mismatches} mismatches; two-class example R={r:.4} mR={mr}"),
    ))
}

// ---------------------------------------------------------------- C5, C6, C8

const SEEDS: [u64; 3] = [0, 1, 2];
const PROTOCOL_KINDS: [CorruptionKind; 4] = [
    CorruptionKind::GaussianNoise,
    CorruptionKind::ImpulseNoise,
    CorruptionKind::DefocusBlur,
    CorruptionKind::Contrast,
];

struct Trained {
    baseline: Vec<Model>,
    full: Vec<Model>,
    test: Vec<SceneRecord>,
    train_time: Duration,
}

fn protocol_config(seed: u64, extensions: bool) -> ModelConfig {
    ModelConfig {
        seed,
        enable_nrm: extensions,
        enable_lee: extensions,
        ..ModelConfig::default()
    }
}

fn train_protocol_models() -> Result<Trained, String> {
    let start = Instant::now();
    let gen = GeneratorConfig::default();
    let train_set = generate_dataset(500, 500, &gen).map_err(err)?;
    let test = generate_dataset(200, 200, &gen).map_err(err)?;
    let (mut baseline, mut full) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        for (ext, out) in [(false, &mut baseline), (true, &mut full)] {
            let mut m = Model::new(protocol_config(seed, ext)).map_err(err)?;
            let cfg = TrainConfig {
                seed,
                ..TrainConfig::default()
            };
            train(&mut m, &train_set, &cfg).map_err(err)?;
            out.push(m);
        }
    }
    Ok(Trained {
        baseline,
        full,
        test,
        train_time: start.elapsed(),
    })
}

struct ProtocolNumbers {
    clean: f64,
    corrupted: f64,
    /// Gaussian noise mR@100 at severities 1..=5.
    gaussian: Vec<f64>,
}

fn protocol_numbers(model: &Model, test: &[SceneRecord]) -> Result<ProtocolNumbers, String> {
    let opts = EvalOptions {
        task: Task::PredCls,
        ks: vec![50, 100],
        seed: 0,
        perturb_bbox: None,
    };
    let grid = BenchGrid {
        kinds: PROTOCOL_KINDS.to_vec(),
        severities: vec![0, 3, 4, 5],
    };
    let method = model.config().method_label();
    let report = bench_run(&[(method.clone(), model)], test, &grid, &opts).map_err(err)?;
    let get = |c: &str, s: u8, k: usize| report.find(&method, c, s, k).map(|r| r.mean_recall).ok_or("missing row");
    let clean = get(CLEAN, 0, 50)?;
    let corrupted = [3, 4, 5].iter().map(|&s| get(CORRUPTION_AVG, s, 50)).sum::<Result<f64, _>>()? / 3.0;
    let mut gaussian = Vec::new();
    for s in 1..=5u8 {
        gaussian.push(if s >= 3 {
            get(CorruptionKind::GaussianNoise.name(), s, 100)?
        } else {
            let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, s).map_err(err)?;
            evaluate(model, test, Some(spec), &opts).map_err(err)?.metrics[1].2
        });
    }
    Ok(ProtocolNumbers {
        clean,
        corrupted,
        gaussian,
    })
}

fn robustness(trained: &Trained) -> Result<((bool, String), Vec<Vec<f64>>), String> {
    let start = Instant::now();
    let mut rows = Vec::new();
    for models in [&trained.baseline, &trained.full] {
        rows.push(
            models
                .iter()
                .map(|m| protocol_numbers(m, &trained.test))
                .collect::<Result<Vec<_>, _>>()?,
        );
    }
    let med = |i: usize, f: &dyn Fn(&ProtocolNumbers) -> f64| median(rows[i].iter().map(f).collect());
    let (base_clean, base_corr) = (med(0, &|p| p.clean), med(0, &|p| p.corrupted));
    let (ours_clean, ours_corr) = (med(1, &|p| p.clean), med(1, &|p| p.corrupted));
    let gaussian: Vec<Vec<f64>> = (0..2)
        .map(|i| (0..5).map(|s| med(i, &|p| p.gaussian[s])).collect())
        .collect();
    let total = trained.train_time + start.elapsed();
    for (i, name) in ["baseline", "+nrm+lee"].iter().enumerate() {
        for (seed, p) in SEEDS.iter().zip(&rows[i]) {
            println!(
                "    {name:>9} seed {seed}: clean mR@50 {:.4}, corrupted mR@50 {:.4}",
                p.clean, p.corrupted
            );
        }
    }
    let ok = ours_corr > base_corr && ours_clean >= 0.98 * base_clean && total < Duration::from_secs(15 * 60);
    Ok((
        (
            ok,
            format!(
                "median over 3 seeds: corrupted mR@50 {ours_corr:.4} vs baseline {base_corr:.4}; clean {ours_clean:.4} vs \
                 0.98 x {base_clean:.4}; {:.0}s total",
                total.as_secs_f64()
            ),
        ),
        gaussian,
    ))
}

/// At most one increase between consecutive severities, and that increase at
/// most `tol`.
fn near_monotone(values: &[f64], tol: f64) -> bool {
    let rises: Vec<f64> = values.windows(2).map(|w| w[1] - w[0]).filter(|&d| d > 0.0).collect();
    rises.len() <= 1 && rises.iter().all(|&d| d <= tol)
}

fn severity_trend(gaussian: &[Vec<f64>]) -> Outcome {
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    let ok = gaussian.iter().all(|v| near_monotone(v, 0.005));
    Ok((
        ok,
        format!(
            "gaussian_noise mR@100, severity 1..5 (median over seeds): baseline [{}], +nrm+lee [{}]",
            fmt(&gaussian[0]),
            fmt(&gaussian[1])
        ),
    ))
}

fn perturbed_boxes(trained: &Trained) -> Outcome {
    let magnitude = 0.3;
    let opts = EvalOptions {
        perturb_bbox: Some(magnitude),
        ks: vec![50],
        ..EvalOptions::default()
    };
    let grid = BenchGrid {
        kinds: vec![CorruptionKind::GaussianNoise],
        severities: vec![0, 3],
    };
    let model = &trained.full[0];
    let report = bench_run(&[("perturbed".into(), model)], &trained.test, &grid, &opts).map_err(err)?;
    let mut violations = 0;
    let mut boxes = 0;
    for scene in &trained.test {
        let p = perturb_boxes(scene, magnitude, opts.seed).map_err(err)?;
        for (a, b) in scene.objects.iter().zip(&p.objects) {
            let (w, h) = (a.bbox.width(), a.bbox.height());
            boxes += 1;
            let moved_x = (a.bbox.x1 - b.bbox.x1).abs().max((a.bbox.x2 - b.bbox.x2).abs());
            let moved_y = (a.bbox.y1 - b.bbox.y1).abs().max((a.bbox.y2 - b.bbox.y2).abs());
            if moved_x > magnitude * w + 1e-9 || moved_y > magnitude * h + 1e-9 {
                violations += 1;
            }
        }
    }
    let clean = report.find("perturbed", CLEAN, 0, 50).map(|r| r.mean_recall).ok_or("missing row")?;
    Ok((
        violations == 0 && report.rows.len() == 3,
        format!("{boxes} boxes, {violations} outside 0.3 x side; perturbed clean mR@50 {clean:.4}"),
    ))
}

// ---------------------------------------------------------------- C7

fn ablation_grid() -> Outcome {
    let gen = GeneratorConfig::default();
    let train_set = generate_dataset(70, 120, &gen).map_err(err)?;
    let test = generate_dataset(71, 60, &gen).map_err(err)?;
    let grid = BenchGrid {
        kinds: vec![CorruptionKind::GaussianNoise, CorruptionKind::Contrast],
        severities: vec![0, 3, 5],
    };
    let opts = EvalOptions::default();
    let mut models = Vec::new();
    for fusion in [FusionMode::Gate, FusionMode::ConcatProj, FusionMode::Add] {
        for attention in [AttentionMode::Centroid, AttentionMode::Bbox] {
            let mut m = Model::new(ModelConfig {
                enable_nrm: true,
                enable_lee: true,
                fusion,
                attention,
                ..ModelConfig::default()
            })
            .map_err(err)?;
            let cfg = TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            };
            train(&mut m, &train_set, &cfg).map_err(err)?;
            models.push((m.config().method_label(), m));
        }
    }
    let refs: Vec<(String, &Model)> = models.iter().map(|(l, m)| (l.clone(), m)).collect();
    let report = bench_run(&refs, &test, &grid, &opts).map_err(err)?;
    let csv = report.to_csv();
    let parsed = MetricsReport::from_csv(&csv).map_err(err)?;

    let mut missing = 0;
    for (label, _) in &models {
        for k in &opts.ks {
            missing += usize::from(parsed.find(label, CLEAN, 0, *k).is_none());
            for s in [3, 5] {
                for c in ["gaussian_noise", "contrast", CORRUPTION_AVG] {
                    missing += usize::from(parsed.find(label, c, s, *k).is_none());
                }
            }
        }
    }
    let expected = models.len() * opts.ks.len() * (1 + 2 * 3);
    let well_formed = csv.starts_with(CSV_HEADER)
        && parsed.rows.len() == expected
        && parsed
            .rows
            .iter()
            .all(|r| (0.0..=1.0).contains(&r.recall) && (0.0..=1.0).contains(&r.mean_recall) && r.n_scenes == test.len());
    let gate_rows = parsed.rows.iter().filter(|r| r.method == "baseline+nrm+lee").count();
    let centroid_rows = parsed.rows.iter().filter(|r| !r.method.contains("nrm_bbox")).count();
    for (label, m) in &models {
        let r = parsed.find(label, CORRUPTION_AVG, 5, 50).expect("checked");
        print!("    {label}: corrupted (severity 5) mR@50 {:.4}", r.mean_recall);
        if m.config().fusion == FusionMode::Gate {
            let g = gate_stats(m, &test, &BenchGrid { kinds: vec![CorruptionKind::GaussianNoise], severities: vec![0, 1, 5] }, &opts)
                .map_err(err)?;
            print!(", E[z] clean/1/5: {}", g.iter().map(|r| format!("{:.3}", r.mean_gate)).collect::<Vec<_>>().join("/"));
        }
        println!();
    }
    Ok((
        missing == 0 && well_formed && gate_rows > 0 && centroid_rows > 0,
        format!(
            "{} configurations, {} rows (expected {expected}), {missing} missing cells, gate rows {gate_rows}, \
             centroid rows {centroid_rows}",
            models.len(),
            parsed.rows.len()
        ),
    ))
}

// ---------------------------------------------------------------- C9

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let gen = GeneratorConfig::default();
    let mut files = Vec::new();
    for i in 0..2 {
        let p = dir.path().join(format!("d{i}.jsonl"));
        write_dataset(&p, &generate_dataset(9, 40, &gen).map_err(err)?).map_err(err)?;
        files.push(std::fs::read(&p).map_err(err)?);
    }
    let dataset_same = files[0] == files[1];

    let scenes = generate_dataset(9, 40, &gen).map_err(err)?;
    let config = ModelConfig {
        enable_nrm: true,
        enable_lee: true,
        seed: 5,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 2,
        seed: 5,
        ..TrainConfig::default()
    };
    let mut runs = Vec::new();
    for _ in 0..2 {
        let mut m = Model::new(config.clone()).map_err(err)?;
        let report = train(&mut m, &scenes, &cfg).map_err(err)?;
        let mut bytes = Vec::new();
        write_model(&m, &mut bytes).map_err(err)?;
        let grid = BenchGrid {
            kinds: vec![CorruptionKind::ImpulseNoise],
            severities: vec![0, 2],
        };
        let csv = bench_run(&[("m".into(), &m)], &scenes, &grid, &EvalOptions::default())
            .map_err(err)?
            .to_csv();
        runs.push((report.loss_curve, bytes, csv));
    }
    let curve_same = runs[0].0 == runs[1].0;
    let model_same = runs[0].1 == runs[1].1;
    let csv_same = runs[0].2 == runs[1].2;

    let loaded = read_model(runs[0].1.as_slice()).map_err(err)?;
    let mut again = Vec::new();
    write_model(&loaded, &mut again).map_err(err)?;
    let original = {
        let mut m = Model::new(config).map_err(err)?;
        train(&mut m, &scenes, &cfg).map_err(err)?;
        m
    };
    let bits_same = original
        .params
        .iter()
        .zip(loaded.params.iter())
        .all(|(a, b)| a.name == b.name && a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let roundtrip = again == runs[0].1 && bits_same;
    Ok((
        dataset_same && curve_same && model_same && csv_same && roundtrip,
        format!(
            "dataset {dataset_same}, loss curve {curve_same}, model file {model_same}, bench CSV {csv_same}, \
             save/load bit-exact {roundtrip}"
        ),
    ))
}

fn report(results: &mut Vec<(String, bool, String)>, id: &str, title: &str, outcome: Outcome) {
    let (ok, detail) = match outcome {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    println!("  {id} {title}: {}", if ok { "pass" } else { "FAIL" });
    results.push((format!("{id} {title}"), ok, detail));
}

fn main() {
    let start = Instant::now();
    let mut results = Vec::new();
    report(&mut results, "C1", "gradient suite", gradient_suite());
    report(&mut results, "C2", "NRM invariants", nrm_invariants());
    report(&mut results, "C3", "LEE invariants", lee_invariants());
    report(&mut results, "C4", "metric oracle", metric_oracle());
    match train_protocol_models() {
        Ok(trained) => {
            let (c5, gaussian) = match robustness(&trained) {
                Ok((r, g)) => (Ok(r), Some(g)),
                Err(e) => (Err(e), None),
            };
            report(&mut results, "C5", "desk-scale robustness", c5);
            let c6 = gaussian.map_or(Err("no protocol numbers".to_string()), |g| severity_trend(&g));
            report(&mut results, "C6", "severity trend", c6);
            report(&mut results, "C8", "perturbed boxes", perturbed_boxes(&trained));
        }
        Err(e) => {
            for (id, t) in [("C5", "desk-scale robustness"), ("C6", "severity trend"), ("C8", "perturbed boxes")] {
                report(&mut results, id, t, Err(e.clone()));
            }
        }
    }
    report(&mut results, "C7", "ablation grid", ablation_grid());
    report(&mut results, "C9", "determinism and persistence", determinism());

    results.sort_by(|a, b| a.0.cmp(&b.0));
    println!();
    for (name, ok, detail) in &results {
        println!("[{}] {name}: {detail}", if *ok { "PASS" } else { "FAIL" });
    }
    let failed = results.iter().filter(|r| !r.1).count();
    println!(
        "\n{} of {} criteria passed in {:.0}s",
        results.len() - failed,
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
