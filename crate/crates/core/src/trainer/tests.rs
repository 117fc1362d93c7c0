use super::*;
use crate::features::{compute_gmv_stats, NormalizationStats};
use crate::signal_sim::{
    synthesize_utterance, ArrayGeometry, SourceKind, SourceSpec, SynthesisConfig,
};
use crate::unified_model::{ModelConfig, ModelMode};
use std::f64::consts::FRAC_PI_2;

fn synth_cfg() -> SynthesisConfig {
    SynthesisConfig {
        sample_rate: 16_000,
        fft_size: 512,
        num_bins: 64,
        window_samples: 400,
        hop_samples: 160,
        stack: 3,
        num_classes: 8,
    }
}

fn mc_utterance(frames: usize, seed: u64, id: &str) -> MultiChannelUtterance {
    let cfg = synth_cfg();
    let geometry = ArrayGeometry::two_mic(0.1, 343.0);
    let target = SourceSpec {
        class_sequence: (0..frames).map(|i| (i / 3 + seed as usize) % 8).collect(),
        azimuth: FRAC_PI_2,
        level_db: 0.0,
        kind: SourceKind::Target,
    };
    let interferer = SourceSpec {
        class_sequence: (0..frames).map(|i| (1 + i / 2) % 8).collect(),
        azimuth: 0.0,
        level_db: 0.0,
        kind: SourceKind::DirectionalInterferer,
    };
    synthesize_utterance(&target, &[interferer], &geometry, &cfg, 5.0, seed, id).unwrap()
}

fn small_dataset(n_sc: usize, n_mc: usize) -> (Vec<Arc<MultiChannelUtterance>>, Vec<Arc<MultiChannelUtterance>>) {
    let mc: Vec<Arc<MultiChannelUtterance>> = (0..n_mc)
        .map(|i| Arc::new(mc_utterance(4, 100 + i as u64, &format!("mc-{i}"))))
        .collect();
    let sc: Vec<Arc<MultiChannelUtterance>> = (0..n_sc)
        .map(|i| {
            let mut u = mc_utterance(4, 200 + i as u64, &format!("sc-{i}"));
            u.auxiliary.clear();
            Arc::new(u)
        })
        .collect();
    (sc, mc)
}

fn stats_for(
    sc: &[Arc<MultiChannelUtterance>],
    mc: &[Arc<MultiChannelUtterance>],
) -> NormalizationStats {
    compute_gmv_stats(sc.iter().chain(mc.iter()).map(|a| a.as_ref())).unwrap()
}

fn desk_model(mode: ModelMode, stats: NormalizationStats, seed: u64) -> Model {
    Model::new(ModelConfig::desk(mode), stats, seed).unwrap()
}

#[test]
fn derived_sc_keeps_primary_labels_and_snr() {
    let mc = mc_utterance(5, 1, "m");
    let sc = derive_sc_from_mc(&mc).unwrap();
    assert_eq!(sc.primary, mc.primary);
    assert_eq!(sc.labels, mc.labels);
    assert_eq!(sc.snr_db, mc.snr_db);
    assert!(sc.auxiliary.is_empty());
    assert_eq!(sc.utterance_id, "m-scderived");
    sc.validate().unwrap();
}

#[test]
fn derive_rejects_single_channel_input() {
    let mut sc = mc_utterance(5, 2, "s");
    sc.auxiliary.clear();
    assert!(matches!(
        derive_sc_from_mc(&sc),
        Err(Error::InvalidInput(_))
    ));
}

#[test]
fn derived_sc_takes_the_sc_path() {
    let (sc, mc) = small_dataset(0, 1);
    let model = desk_model(ModelMode::Unified, stats_for(&sc, &mc), 1);
    let derived = derive_sc_from_mc(&mc[0]).unwrap();
    assert_eq!(model.route(&derived).unwrap(), Route::ScPath);
}

#[test]
fn proportional_epoch_with_derivation_counts_all_items() {
    let (sc, mc) = small_dataset(4, 4);
    let config = TrainingConfig {
        batch_size: 5,
        ..TrainingConfig::default()
    };
    let batches = build_batches(&sc, &mc, &config, 9).unwrap();
    let total: usize = batches.iter().map(|b| b.items.len()).sum();
    assert_eq!(total, 12); // 4 sc + 4 mc + 4 derived
    let derived = batches
        .iter()
        .flat_map(|b| &b.items)
        .filter(|i| i.utterance.utterance_id.ends_with("-scderived"))
        .count();
    assert_eq!(derived, 4);
}

#[test]
fn fixed_ratio_extremes_give_pure_batches() {
    let (sc, mc) = small_dataset(3, 3);
    let mut config = TrainingConfig {
        batch_size: 4,
        derive_sc_from_mc: false,
        ..TrainingConfig::default()
    };
    config.mix = MixPolicy::FixedRatio(1.0);
    let batches = build_batches(&sc, &mc, &config, 3).unwrap();
    assert!(batches
        .iter()
        .all(|b| b.items.iter().all(|i| i.input_type == InputType::Sc)));
    config.mix = MixPolicy::FixedRatio(0.0);
    let batches = build_batches(&sc, &mc, &config, 3).unwrap();
    assert!(batches
        .iter()
        .all(|b| b.items.iter().all(|i| i.input_type == InputType::Mc)));
}

#[test]
fn fixed_ratio_with_missing_source_is_a_config_error() {
    let (sc, _) = small_dataset(3, 0);
    let config = TrainingConfig {
        batch_size: 4,
        mix: MixPolicy::FixedRatio(0.5),
        derive_sc_from_mc: false,
        ..TrainingConfig::default()
    };
    assert!(matches!(
        build_batches(&sc, &[], &config, 3),
        Err(Error::Config(_))
    ));
}

#[test]
fn batch_streams_are_deterministic_and_mode_independent() {
    let (sc, mc) = small_dataset(3, 3);
    let config = TrainingConfig::default();
    let ids = |batches: &[TrainingBatch]| -> Vec<String> {
        batches
            .iter()
            .flat_map(|b| b.items.iter().map(|i| i.utterance.utterance_id.clone()))
            .collect()
    };
    let a = build_batches(&sc, &mc, &config, 42).unwrap();
    let b = build_batches(&sc, &mc, &config, 42).unwrap();
    assert_eq!(ids(&a), ids(&b));
    let c = build_batches(&sc, &mc, &config, 43).unwrap();
    assert_ne!(ids(&a), ids(&c));
}

fn tensors_of(model: &Model, partition: Partition) -> Vec<(String, Vec<f64>)> {
    model
        .store
        .iter()
        .filter(|(_, t)| t.partition == partition)
        .map(|(n, t)| (n.clone(), t.data.clone()))
        .collect()
}

#[test]
fn sc_only_batches_leave_mc_frontend_bitwise_unchanged() {
    let (sc, mc) = small_dataset(4, 2);
    let stats = stats_for(&sc, &mc);
    let mut model = desk_model(ModelMode::Unified, stats, 5);
    let before = tensors_of(&model, Partition::McFe);
    let config = TrainingConfig::default();
    let batch = TrainingBatch {
        items: sc
            .iter()
            .map(|u| BatchItem {
                utterance: Arc::clone(u),
                input_type: InputType::Sc,
            })
            .collect(),
    };
    let mut opt = OptimizerState::new();
    let stats = train_step(&mut model, &mut opt, &batch, &config).unwrap();
    assert!(stats.loss.is_finite());
    assert_eq!(stats.grad_norm_mc_fe, 0.0);
    assert!(stats.grad_norm_sc_fe > 0.0);
    assert_eq!(before, tensors_of(&model, Partition::McFe));
    // something else moved
    assert!(stats.grad_norm_backend > 0.0);
}

#[test]
fn mc_only_batches_leave_sc_frontend_bitwise_unchanged() {
    let (sc, mc) = small_dataset(2, 4);
    let stats = stats_for(&sc, &mc);
    let mut model = desk_model(ModelMode::Unified, stats, 6);
    let before = tensors_of(&model, Partition::ScFe);
    let config = TrainingConfig::default();
    let batch = TrainingBatch {
        items: mc
            .iter()
            .map(|u| BatchItem {
                utterance: Arc::clone(u),
                input_type: InputType::Mc,
            })
            .collect(),
    };
    let mut opt = OptimizerState::new();
    let stats = train_step(&mut model, &mut opt, &batch, &config).unwrap();
    assert_eq!(stats.grad_norm_sc_fe, 0.0);
    assert!(stats.grad_norm_mc_fe > 0.0);
    assert_eq!(before, tensors_of(&model, Partition::ScFe));
}

#[test]
fn mixed_batches_update_the_backend_across_seeds() {
    for seed in 0..5 {
        let (sc, mc) = small_dataset(2, 2);
        let stats = stats_for(&sc, &mc);
        let mut model = desk_model(ModelMode::Unified, stats, seed);
        let before = tensors_of(&model, Partition::Backend);
        let config = TrainingConfig::default();
        let mut items: Vec<BatchItem> = sc
            .iter()
            .map(|u| BatchItem {
                utterance: Arc::clone(u),
                input_type: InputType::Sc,
            })
            .collect();
        items.extend(mc.iter().map(|u| BatchItem {
            utterance: Arc::clone(u),
            input_type: InputType::Mc,
        }));
        let batch = TrainingBatch { items };
        let mut opt = OptimizerState::new();
        train_step(&mut model, &mut opt, &batch, &config).unwrap();
        assert_ne!(before, tensors_of(&model, Partition::Backend), "seed {seed}");
    }
}

#[test]
fn zero_learning_rate_leaves_all_tensors_bitwise_unchanged() {
    let (sc, mc) = small_dataset(2, 2);
    let stats = stats_for(&sc, &mc);
    let model = desk_model(ModelMode::Unified, stats, 7);
    let initial_store = model.store.clone();
    let config = TrainingConfig {
        learning_rate: 0.0,
        epochs: 2,
        ..TrainingConfig::default()
    };
    let (trained, _) = train(model, &sc, &mc, &config).unwrap();
    assert_eq!(trained.store, initial_store);
}

#[test]
fn non_finite_loss_aborts_naming_the_item() {
    let (sc, mc) = small_dataset(1, 0);
    let stats = stats_for(&sc, &mc);
    let mut model = desk_model(ModelMode::Unified, stats, 8);
    // a poisoned classifier weight drives the loss non-finite
    model.store.get_mut("backend.cls.w").unwrap().data[0] = f64::NAN;
    let config = TrainingConfig::default();
    let batch = TrainingBatch {
        items: vec![BatchItem {
            utterance: Arc::clone(&sc[0]),
            input_type: InputType::Sc,
        }],
    };
    let mut opt = OptimizerState::new();
    match train_step(&mut model, &mut opt, &batch, &config) {
        Err(Error::Numerical(msg)) => assert!(msg.contains("sc-0"), "message: {msg}"),
        other => panic!("expected numerical error, got {other:?}"),
    }
}

#[test]
fn fixed_batch_loss_descends_under_small_sgd_steps() {
    // median loss curve over 5 seeds decreases at every one of the first
    // 10 steps
    let mut curves: Vec<Vec<f64>> = Vec::new();
    for seed in 0..5 {
        let (sc, mc) = small_dataset(2, 2);
        let stats = stats_for(&sc, &mc);
        let mut model = desk_model(ModelMode::Unified, stats, 50 + seed);
        let config = TrainingConfig {
            optimizer: Optimizer::Sgd,
            learning_rate: 1e-3,
            ..TrainingConfig::default()
        };
        let mut items: Vec<BatchItem> = sc
            .iter()
            .map(|u| BatchItem {
                utterance: Arc::clone(u),
                input_type: InputType::Sc,
            })
            .collect();
        items.extend(mc.iter().map(|u| BatchItem {
            utterance: Arc::clone(u),
            input_type: InputType::Mc,
        }));
        let batch = TrainingBatch { items };
        let mut opt = OptimizerState::new();
        let mut losses = Vec::new();
        for _ in 0..10 {
            losses.push(train_step(&mut model, &mut opt, &batch, &config).unwrap().loss);
        }
        curves.push(losses);
    }
    let median_at = |step: usize| -> f64 {
        let mut v: Vec<f64> = curves.iter().map(|c| c[step]).collect();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    for step in 1..10 {
        assert!(
            median_at(step) < median_at(step - 1),
            "median loss rose at step {step}"
        );
    }
}

#[test]
fn training_is_deterministic_in_the_seed() {
    let (sc, mc) = small_dataset(3, 3);
    let stats = stats_for(&sc, &mc);
    let config = TrainingConfig {
        epochs: 2,
        batch_size: 4,
        ..TrainingConfig::default()
    };
    let run = || {
        let model = desk_model(ModelMode::Unified, stats.clone(), 12);
        train(model, &sc, &mc, &config).unwrap()
    };
    let (m1, log1) = run();
    let (m2, log2) = run();
    assert_eq!(m1.store, m2.store);
    assert_eq!(log1.text(), log2.text());
    assert!(final_epoch_mean_loss(&log1).unwrap().is_finite());
}
