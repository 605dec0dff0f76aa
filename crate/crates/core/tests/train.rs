use ttsnn::train::{
    compare_on_probe, evaluate, finalize_merge, init_ttsnn, predict, synthetic_blobs, train, Dataset, ModelMode,
    ModelSpec, TrainConfig,
};
use ttsnn::vbmf::{RankPolicy, Unfolding};

fn small_tiny6(mode: ModelMode, classes: usize) -> ModelSpec {
    ModelSpec { input_shape: [1, 8, 8], num_classes: classes, ..ModelSpec::tiny6(mode, 4) }
}

fn ranks() -> RankPolicy {
    RankPolicy::FixedList { ranks: vec![4, 4, 6, 6] }
}

fn blobs(n: usize, classes: usize, seed: u64) -> Dataset {
    synthetic_blobs(n, classes, [1, 8, 8], 0.2, seed).unwrap()
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let mut model = init_ttsnn(&small_tiny6(ModelMode::Ptt, 2), &ranks(), 0).unwrap();
    let before: Vec<_> = model.network.params().into_iter().cloned().collect();
    let cfg = TrainConfig { epochs: 1, batch_size: 8, lr: 0.0, ..Default::default() };
    train(&mut model, &blobs(32, 2, 1), &cfg, None).unwrap();
    let after: Vec<_> = model.network.params().into_iter().cloned().collect();
    assert_eq!(before, after);
}

#[test]
fn ptt_fits_two_class_blobs() {
    let mut model = init_ttsnn(&small_tiny6(ModelMode::Ptt, 2), &ranks(), 0).unwrap();
    let cfg = TrainConfig { epochs: 20, batch_size: 16, lr: 0.05, grad_clip: Some(2.0), ..Default::default() };
    let logs = train(&mut model, &blobs(128, 2, 2), &cfg, None).unwrap();
    let last = logs.last().unwrap();
    assert!(last.train_accuracy >= 0.95, "train accuracy {}", last.train_accuracy);
}

#[test]
fn loss_decreases_for_every_mode_and_seed() {
    let data = blobs(64, 3, 3);
    for mode in ModelMode::ALL {
        for seed in 0..3 {
            let mut model = init_ttsnn(&small_tiny6(mode, 3), &ranks(), seed).unwrap();
            let cfg =
                TrainConfig { epochs: 10, batch_size: 16, lr: 0.05, seed, grad_clip: Some(2.0), ..Default::default() };
            let logs = train(&mut model, &data, &cfg, None).unwrap();
            assert!(logs[9].loss < logs[0].loss, "{mode} seed {seed}: {} -> {}", logs[0].loss, logs[9].loss);
        }
    }
}

#[test]
fn same_seed_gives_identical_loss_sequence() {
    let data = blobs(48, 3, 4);
    let run = || {
        let mut model = init_ttsnn(&small_tiny6(ModelMode::Htt, 3), &ranks(), 7).unwrap();
        let cfg = TrainConfig { epochs: 3, batch_size: 12, lr: 0.05, seed: 7, ..Default::default() };
        let losses: Vec<f64> = train(&mut model, &data, &cfg, None).unwrap().iter().map(|l| l.loss).collect();
        (losses, model.network)
    };
    let (a, na) = run();
    let (b, nb) = run();
    assert_eq!(a, b);
    assert_eq!(na, nb);
}

#[test]
fn energy_threshold_keeps_requested_energy_per_layer() {
    let policy = RankPolicy::EnergyThreshold { energy: 0.95, unfolding: Unfolding::Middle };
    let model = init_ttsnn(&ModelSpec::tiny6(ModelMode::Ptt, 4), &policy, 0).unwrap();
    assert_eq!(model.ranks.len(), 4);
    for rec in &model.ranks {
        if rec.rank == rec.requested {
            assert!(rec.unfolding_energy.unwrap() >= 0.95 - 1e-9, "{rec:?}");
        }
    }
}

#[test]
fn merged_model_predicts_like_unmerged() {
    for mode in [ModelMode::Stt, ModelMode::Ptt] {
        let mut model = init_ttsnn(&small_tiny6(mode, 3), &ranks(), 5).unwrap();
        let data = blobs(60, 3, 5);
        let cfg = TrainConfig { epochs: 2, batch_size: 12, lr: 0.05, ..Default::default() };
        train(&mut model, &data, &cfg, None).unwrap();
        let merged = finalize_merge(&model).unwrap();
        assert!(merged.merged);
        let cmp = compare_on_probe(&model.network, &merged.network, &data.images).unwrap();
        assert_eq!(cmp.argmax_agreement, 1.0, "{mode}: {cmp:?}");
        assert!(cmp.max_abs_logit_diff <= 1e-4, "{mode}: {cmp:?}");
        assert_eq!(predict(&model.network, &data, 7).unwrap(), predict(&merged.network, &data, 13).unwrap());
    }
}

#[test]
fn htt_merge_uses_full_kernel_and_only_reports_the_gap() {
    let model = init_ttsnn(&small_tiny6(ModelMode::Htt, 3), &ranks(), 5).unwrap();
    let merged = finalize_merge(&model).unwrap();
    let ptt = finalize_merge(&init_ttsnn(&small_tiny6(ModelMode::Ptt, 3), &ranks(), 5).unwrap()).unwrap();
    let data = blobs(30, 3, 5);
    let cmp = compare_on_probe(&merged.network, &ptt.network, &data.images).unwrap();
    assert_eq!(cmp.max_abs_logit_diff, 0.0);
    let gap = compare_on_probe(&model.network, &merged.network, &data.images).unwrap();
    assert!(gap.max_abs_logit_diff.is_finite());
}

#[test]
fn evaluate_single_correct_sample_is_one() {
    let model = init_ttsnn(&small_tiny6(ModelMode::Ptt, 3), &ranks(), 0).unwrap();
    let one = blobs(3, 3, 6).take(1);
    let guess = predict(&model.network, &one, 1).unwrap()[0];
    let labelled = Dataset::new(one.images.clone(), vec![guess], 3).unwrap();
    assert_eq!(evaluate(&model.network, &labelled, 1).unwrap(), 1.0);
}

#[test]
fn untrained_model_is_near_chance() {
    let model = init_ttsnn(&small_tiny6(ModelMode::Ptt, 10), &ranks(), 0).unwrap();
    let acc = evaluate(&model.network, &blobs(1000, 10, 8), 250).unwrap();
    assert!((acc - 0.1).abs() <= 0.05, "accuracy {acc}");
}
