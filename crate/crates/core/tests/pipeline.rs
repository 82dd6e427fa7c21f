use sgg_core::eval::{bench_run, BenchGrid, EvalOptions};
use sgg_core::pipeline::{load_model, save_model, train, Model, ModelConfig, Task, TrainConfig};
use sgg_core::synth::{generate_dataset, rasterize, CorruptionKind, GeneratorConfig};

fn small(enable: bool) -> ModelConfig {
    ModelConfig {
        channels: vec![8, 16, 16],
        hidden: 32,
        category_dim: 8,
        box_dim: 8,
        enable_nrm: enable,
        enable_lee: enable,
        ..ModelConfig::default()
    }
}

#[test]
fn loss_mostly_decreases() {
    let scenes = generate_dataset(21, 50, &GeneratorConfig::default()).unwrap();
    for enable in [false, true] {
        for task in [Task::PredCls, Task::SgCls] {
            let mut model = Model::new(small(enable)).unwrap();
            let cfg = TrainConfig {
                epochs: 5,
                task,
                ..TrainConfig::default()
            };
            let curve = train(&mut model, &scenes, &cfg).unwrap().loss_curve;
            let drops = curve.windows(2).filter(|w| w[1] < w[0]).count();
            assert!(drops >= 3, "{enable} {task}: {curve:?}");
            assert!(curve[4] < curve[0]);
        }
    }
}

#[test]
fn seed_config_and_data_fix_everything() {
    let scenes = generate_dataset(22, 20, &GeneratorConfig::default()).unwrap();
    let run = || {
        let mut m = Model::new(small(true)).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            seed: 5,
            ..TrainConfig::default()
        };
        let curve = train(&mut m, &scenes, &cfg).unwrap().loss_curve;
        let preds: Vec<_> = scenes
            .iter()
            .map(|s| m.forward(&rasterize(s), s, Task::SgCls).unwrap().triplets)
            .collect();
        (curve, m.params, preds)
    };
    assert_eq!(run(), run());
}

#[test]
fn saved_model_evaluates_identically() {
    let scenes = generate_dataset(23, 12, &GeneratorConfig::default()).unwrap();
    let mut model = Model::new(small(true)).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    train(&mut model, &scenes, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    save_model(&model, &path).unwrap();
    let loaded = load_model(&path).unwrap();
    assert_eq!(loaded.config(), model.config());
    assert_eq!(loaded.params, model.params);
    let grid = BenchGrid {
        kinds: vec![CorruptionKind::Contrast],
        severities: vec![0, 3],
    };
    let opts = EvalOptions::default();
    let a = bench_run(&[("m".into(), &model)], &scenes, &grid, &opts).unwrap();
    let b = bench_run(&[("m".into(), &loaded)], &scenes, &grid, &opts).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
}

#[test]
fn flags_off_is_the_plain_pipeline() {
    let scenes = generate_dataset(24, 6, &GeneratorConfig::default()).unwrap();
    let full = Model::new(small(true)).unwrap();
    let stripped = full.without_extensions();
    let plain = Model::new(small(false)).unwrap();
    for p in plain.params.iter() {
        let id = stripped.params.id(&p.name).unwrap();
        assert_eq!(stripped.params.get(id).value, p.value, "{}", p.name);
    }
    for s in &scenes {
        let img = rasterize(s);
        let a = stripped.forward(&img, s, Task::SgCls).unwrap();
        let b = plain.forward(&img, s, Task::SgCls).unwrap();
        assert_eq!(a.triplets, b.triplets);
        assert_eq!(a.predicate_logits, b.predicate_logits);
    }
}
