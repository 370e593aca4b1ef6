mod support;

use everadapt_core::config::{ExperimentConfig, Preset};
use everadapt_core::data::{generate_domain_split, DomainDataset, DomainSplit};
use everadapt_core::evaluation::accuracy;
use everadapt_core::trainer::{run_sequence, update_buffer, ContinualTrainer, ReplayBuffer, TrainConfig};
use everadapt_core::{build_model, Model, ModelSpec, NormKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn desk() -> (ExperimentConfig, Vec<DomainSplit>) {
    let cfg = ExperimentConfig::preset(Preset::Desk);
    let splits = cfg.generate().unwrap();
    (cfg, splits)
}

/// Two classes separated by the sign of a constant offset.
fn separable(n: usize, seed: u64) -> DomainDataset {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut seg = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let y = i % 2;
        let offset = if y == 0 { 1.0 } else { -1.0 };
        seg.extend((0..128).map(|_| offset + r.random_range(-0.5..0.5)));
        labels.push(y);
    }
    DomainDataset::new("sep", 128, 2, seg, Some(labels)).unwrap()
}

fn params(m: &Model) -> Vec<u64> {
    m.parameters().iter().flat_map(|p| p.data().iter().map(|v| v.to_bits())).collect()
}

fn stats(m: &Model) -> Vec<u64> {
    m.norm_states()
        .flat_map(|s| s.running_mean().iter().chain(s.running_var()).map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}

#[test]
fn separable_source_is_learned() {
    let data = separable(200, 1);
    let mut model = build_model(&ModelSpec::desk_default(2), 0).unwrap();
    let cfg = TrainConfig { epochs: 40, ..Default::default() };
    ContinualTrainer::new(cfg).unwrap().pretrain_source(&mut model, &data).unwrap();
    assert!(accuracy(&mut model, &data).unwrap() > 95.0);
}

#[test]
fn zero_pretraining_epochs_leave_the_model_alone() {
    let data = separable(20, 2);
    let mut model = build_model(&ModelSpec::desk_default(2), 0).unwrap();
    let before = (params(&model), stats(&model));
    let cfg = TrainConfig { pretrain_epochs: Some(0), ..Default::default() };
    let rep = ContinualTrainer::new(cfg).unwrap().pretrain_source(&mut model, &data).unwrap();
    assert_eq!(rep.steps, 0);
    assert_eq!(before, (params(&model), stats(&model)));
}

#[test]
fn pretraining_is_deterministic() {
    let data = separable(64, 3);
    let run = || {
        let mut model = build_model(&ModelSpec::desk_default(2), 5).unwrap();
        let cfg = TrainConfig { epochs: 2, seed: 5, ..Default::default() };
        ContinualTrainer::new(cfg).unwrap().pretrain_source(&mut model, &data).unwrap();
        (params(&model), stats(&model))
    };
    assert_eq!(run(), run());
}

#[test]
fn unlabeled_source_is_rejected() {
    let data = separable(8, 4).without_labels();
    let mut model = build_model(&ModelSpec::desk_default(2), 0).unwrap();
    let err = ContinualTrainer::new(TrainConfig::default()).unwrap().pretrain_source(&mut model, &data);
    assert!(matches!(err, Err(everadapt_core::Error::Dataset(_))));
}

#[test]
fn buffer_counts() {
    let mut model = build_model(&ModelSpec::desk_default(2), 0).unwrap();
    model.eval();
    let mut r = ChaCha8Rng::seed_from_u64(0);

    let small = separable(40, 5);
    let mut full = ReplayBuffer::new(1.0).unwrap();
    assert_eq!(update_buffer(&mut full, &mut model, &small, 0, &mut r).unwrap(), 40);
    let mut segs: Vec<&[f64]> = full.entries().iter().map(|e| e.segment.as_slice()).collect();
    let mut all: Vec<&[f64]> = (0..small.len()).map(|i| small.segment(i)).collect();
    segs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(segs, all);

    let big = separable(1000, 6);
    let mut buf = ReplayBuffer::new(0.01).unwrap();
    assert_eq!(update_buffer(&mut buf, &mut model, &big, 0, &mut r).unwrap(), 10);
    let frozen: Vec<_> = buf.entries().to_vec();
    let other = separable(500, 7);
    update_buffer(&mut buf, &mut model, &other, 1, &mut r).unwrap();
    assert_eq!((buf.count_for(0), buf.count_for(1), buf.len()), (10, 5, 15));
    assert_eq!(&buf.entries()[..10], frozen.as_slice());
    assert!(update_buffer(&mut buf, &mut model, &other, 1, &mut r).is_err());
}

#[test]
fn identical_target_does_not_degrade() {
    let (cfg, splits) = desk();
    let (source, _) = cfg.arrange(&splits).unwrap();
    let run = run_sequence(source, std::slice::from_ref(source), &cfg.model_spec(NormKind::Cbn), &cfg.train_config(0), None)
        .unwrap();
    let adapted = run.result_matrix.get(0, 0).unwrap();
    assert!((adapted - run.source_accuracy).abs() <= 2.0, "{adapted} vs {}", run.source_accuracy);
    assert_eq!(run.metrics.bwt, None);
}

#[test]
fn shifted_target_gains_over_source_only() {
    // fault impulses 1.5x stronger and sensor noise 1.5x higher than the source
    let (cfg, splits) = desk();
    let (source, _) = cfg.arrange(&splits).unwrap();
    let shift = |per_class| {
        let mut s = cfg.domain_specs(per_class).remove(0);
        s.domain_id = "D0-shifted".into();
        s.noise_sigma *= 1.5;
        for c in &mut s.classes {
            c.impulse_amplitude *= 1.5;
        }
        s
    };
    let d = &cfg.data;
    let target = DomainSplit {
        train: generate_domain_split(&shift(d.train_per_class), d.window_len, d.seed + 1, "train")
            .unwrap()
            .standardized(),
        test: generate_domain_split(&shift(d.test_per_class), d.window_len, d.seed + 1, "test")
            .unwrap()
            .standardized(),
    };
    let mut gains = Vec::new();
    for seed in 0..3 {
        let run = run_sequence(
            source,
            std::slice::from_ref(&target),
            &cfg.model_spec(NormKind::Cbn),
            &cfg.train_config(seed),
            None,
        )
        .unwrap();
        gains.push(run.result_matrix.get(0, 0).unwrap() - run.source_only[0]);
    }
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    assert!(mean >= 5.0, "gains {gains:?}");
}

#[test]
fn full_scenario_runs_and_freezes_statistics() {
    let (cfg, splits) = desk();
    let (source, targets) = cfg.arrange(&splits).unwrap();
    let targets: Vec<DomainSplit> = targets.into_iter().cloned().collect();
    let dir = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let run = run_sequence(source, &targets, &cfg.model_spec(NormKind::Cbn), &cfg.train_config(0), Some(dir.path()))
        .unwrap();
    assert!(started.elapsed().as_secs() < 300);
    assert!(run.result_matrix.is_complete());
    assert_eq!(run.checkpoints.len(), 4);
    assert!(run.metrics.bwt.is_some());

    // stage 0 is the pretrained model; every later stage keeps its statistics
    let pretrained = Model::load(&run.checkpoints[0]).unwrap();
    for ck in &run.checkpoints[1..] {
        assert_eq!(stats(&pretrained), stats(&Model::load(ck).unwrap()));
    }

    let again = run_sequence(source, &targets, &cfg.model_spec(NormKind::Cbn), &cfg.train_config(0), None).unwrap();
    assert_eq!(run.result_matrix, again.result_matrix);
}

#[test]
fn buffer_never_holds_the_current_domain() {
    let (cfg, splits) = desk();
    let (source, targets) = cfg.arrange(&splits).unwrap();
    let mut tc = cfg.train_config(1);
    tc.epochs = 1;
    let mut model = build_model(&cfg.model_spec(NormKind::Cbn), 1).unwrap();
    let mut trainer = ContinualTrainer::new(tc).unwrap();
    trainer.pretrain_source(&mut model, &source.train).unwrap();
    for (i, t) in targets.iter().enumerate() {
        let unlabeled = t.train.without_labels();
        assert!(trainer.buffer().domains().iter().all(|&d| d < i));
        trainer.adapt_to_domain(&mut model, &source.train, &unlabeled).unwrap();
        trainer.update_buffer(&mut model, &unlabeled, i).unwrap();
        assert_eq!(trainer.buffer().count_for(i), (0.01 * unlabeled.len() as f64).round() as usize);
    }
}
