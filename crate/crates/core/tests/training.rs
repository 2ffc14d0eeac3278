use seaice_core::experiment::{run_experiment, training_patches, REPORT_JSON};
use seaice_core::grid::Window;
use seaice_core::losses::{LossKind, LossSpec};
use seaice_core::model::{ModelConfig, SegmentationModel};
use seaice_core::trainer::{load_checkpoint, train, Dataset, LabeledScene, Region, TrainingConfig, CHECKPOINT_JSON, CHECKPOINT_WEIGHTS, HISTORY_CSV};
use seaice_core::{build_split, generate, normalize, predict_scene, InferenceMode, SynthSpec};

fn scene(id: &str, size: usize, seed: u64) -> LabeledScene {
    let s = generate(&SynthSpec::strips(id, size, size, seed)).unwrap();
    LabeledScene::new(normalize(&s.stack), s.truth).unwrap()
}

fn small_model() -> ModelConfig {
    ModelConfig {
        aspp_channels: 16,
        encoder_stages: 2,
        aspp_rates: vec![1, 2, 3],
        ..ModelConfig::default()
    }
}

fn overfit_config(kind: LossKind) -> TrainingConfig {
    TrainingConfig {
        batch_size: 4,
        lr_init: 2e-3,
        max_epochs: 50,
        early_stop_patience_epochs: 50,
        lr_patience_epochs: 50,
        seeds: vec![0],
        loss: LossSpec::new(kind),
        ..TrainingConfig::default()
    }
}

#[test]
fn every_loss_overfits_a_small_synthetic_set() {
    let data = Dataset::new(vec![scene("2018-03", 256, 5)]).unwrap();
    let patches: Vec<Region> = [(0, 0), (0, 128), (128, 0), (128, 128)]
        .iter()
        .map(|&(r, c)| Region { scene: "2018-03".into(), window: Window::new(r, c, 128, 128) })
        .collect();
    let val = vec![Region { scene: "2018-03".into(), window: Window::new(0, 0, 256, 256) }];
    let config = ModelConfig { aspp_channels: 32, ..ModelConfig::default() };
    for kind in LossKind::ALL {
        let mut model = SegmentationModel::build(&config, 1).unwrap();
        let out = train(&mut model, &data, &patches, &val, &overfit_config(kind), 0, None).unwrap();
        let first = out.history[0].train_loss;
        let last = out.history.last().unwrap().train_loss;
        assert!(last < 0.1 * first, "{kind}: train loss {first} -> {last}");
        let best = out.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_val_loss, best);
        assert_eq!(out.history[out.best_epoch - 1].val_loss, best);
    }
}

#[test]
fn training_is_deterministic_and_updates_the_encoder() {
    let data = Dataset::new(vec![scene("2018-03", 48, 2)]).unwrap();
    let patches = vec![
        Region { scene: "2018-03".into(), window: Window::new(0, 0, 32, 32) },
        Region { scene: "2018-03".into(), window: Window::new(16, 16, 32, 32) },
    ];
    let config = TrainingConfig { max_epochs: 3, batch_size: 2, lr_init: 1e-3, ..overfit_config(LossKind::Focal) };
    let initial = SegmentationModel::build(&small_model(), 4).unwrap();
    let run = || {
        let mut m = initial.clone();
        let out = train(&mut m, &data, &patches, &patches, &config, 9, None).unwrap();
        (m, out.history)
    };
    let (a, ha) = run();
    let (_, hb) = run();
    assert_eq!(ha, hb);

    let before = initial.named_params();
    let after = a.named_params();
    let changed = before
        .iter()
        .zip(&after)
        .filter(|((n, p), (_, q))| n.starts_with("encoder.") && p.trainable && p.value != q.value)
        .count();
    assert!(changed > 0);
}

#[test]
fn three_seed_experiment_emits_three_checkpoints_and_a_summary() {
    let ids: Vec<String> = (1..=12).map(|m| format!("2018-{m:02}")).collect();
    let data = Dataset::new(ids.iter().enumerate().map(|(i, id)| scene(id, 64, i as u64)).collect()).unwrap();
    let manifest = build_split(&ids).unwrap().with_sampling(0, 32, 1);
    assert_eq!(training_patches(&manifest, &data).unwrap().len(), 10);
    let config = TrainingConfig { seeds: vec![0, 1, 2], max_epochs: 2, lr_init: 1e-3, ..overfit_config(LossKind::Ce) };
    let out = tempfile::tempdir().unwrap();
    let report = run_experiment(&small_model(), &config, &manifest, &data, out.path(), InferenceMode::default()).unwrap();

    assert_eq!(report.seeds.len(), 3);
    for seed in 0..3 {
        let dir = out.path().join(seed.to_string());
        for f in [CHECKPOINT_WEIGHTS, CHECKPOINT_JSON, HISTORY_CSV] {
            assert!(dir.join(f).is_file(), "{f}");
        }
    }
    let f1: Vec<f64> = report.seeds.iter().map(|s| s.weighted_f1).collect();
    let mean = f1.iter().sum::<f64>() / 3.0;
    assert!((report.weighted_f1.mean - mean).abs() < 1e-12);
    assert_eq!(report.weighted_f1.min, f1.iter().copied().fold(1.0, f64::min));
    assert_eq!(report.weighted_f1.max, f1.iter().copied().fold(0.0, f64::max));
    assert!(out.path().join(REPORT_JSON).is_file());
    assert!(report.summary_line().contains("minimum"));

    // the stored checkpoint reproduces the evaluated predictions
    let (model, meta) = load_checkpoint(&out.path().join("1")).unwrap();
    assert_eq!(meta.seed, 1);
    assert!(meta.batch_norm_stats_updated);
    let test = data.get("2018-01").unwrap();
    let pred = predict_scene(&model, &test.stack, InferenceMode::default()).unwrap();
    let f1 = seaice_core::weighted_f1(&pred, &test.labels).unwrap().weighted_f1;
    assert_eq!(f1, report.seeds[1].per_scene["2018-01"]);
}

#[test]
fn single_seed_report_degenerates() {
    let ids: Vec<String> = (1..=12).map(|m| format!("2019-{m:02}")).collect();
    let data = Dataset::new(ids.iter().enumerate().map(|(i, id)| scene(id, 64, 100 + i as u64)).collect()).unwrap();
    let manifest = build_split(&ids).unwrap().with_sampling(3, 32, 1);
    let config = TrainingConfig { seeds: vec![7], max_epochs: 1, ..overfit_config(LossKind::Dice) };
    let out = tempfile::tempdir().unwrap();
    let r = run_experiment(&small_model(), &config, &manifest, &data, out.path(), InferenceMode::default()).unwrap();
    assert_eq!(r.seeds.len(), 1);
    assert_eq!(r.weighted_f1.mean, r.weighted_f1.min);
    assert_eq!(r.weighted_f1.mean, r.weighted_f1.max);
}
