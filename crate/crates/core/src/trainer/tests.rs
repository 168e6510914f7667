use super::*;
use crate::dataset::generate_synthetic;
use crate::dataset::SparseVector;

fn small() -> (SparseDataset, SparseDataset) {
    generate_synthetic(400, 300, 40, 2, 0.05, 11).unwrap()
}

fn cfg(strategy: SamplerStrategy, epochs: usize) -> TrainConfig {
    TrainConfig {
        strategy,
        epochs,
        batch_size: 16,
        k_r: 8,
        k_h: 4,
        k_p: 2,
        tau_s: 2,
        tau_r: 2,
        curriculum_ramp: 2,
        embed_dim: 16,
        warmup_steps: 5,
        probe_rows: 50,
        max_degree: 8,
        build_beam: 16,
        query_beam: 32,
        ..Default::default()
    }
}

#[test]
fn zero_epochs_returns_initial_parameters() {
    let (tr, _) = small();
    let c = cfg(SamplerStrategy::Mixture, 0);
    let (model, log) = train(&tr, None, &c, None).unwrap();
    let init = TrainState::init(&c, tr.n_features(), tr.n_labels()).unwrap();
    assert_eq!(model.encoder, init.encoder);
    assert_eq!(model.bank, init.bank);
    assert!(log.records.is_empty());
}

#[test]
fn same_seed_same_bytes() {
    let (tr, te) = small();
    let c = cfg(SamplerStrategy::Mixture, 5);
    let (a, la) = train(&tr, Some(&te), &c, None).unwrap();
    let (b, lb) = train(&tr, Some(&te), &c, None).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    let losses = |l: &TrainLog| l.records.iter().map(|r| r.mean_slate_loss).collect::<Vec<_>>();
    assert_eq!(losses(&la), losses(&lb));
    let (c2, _) = train(&tr, Some(&te), &TrainConfig { seed: 1, ..c }, None).unwrap();
    assert_ne!(a.to_bytes(), c2.to_bytes());
}

#[test]
fn refresh_stamps_follow_the_schedule() {
    let (tr, _) = small();
    for (tau_s, tau_r) in [(2, 2), (1, 1), (3, 4), (1, 3)] {
        let c = TrainConfig {
            tau_s,
            tau_r,
            ..cfg(SamplerStrategy::StaleHard, 10)
        };
        let (_, log) = train(&tr, None, &c, None).unwrap();
        let mut current: Option<u32> = None;
        for r in &log.records {
            if r.epoch >= tau_s && (r.epoch - tau_s) % tau_r == 0 {
                current = Some(expected_snapshot_epoch(r.epoch));
            }
            let want = if r.epoch < tau_s { None } else { current };
            assert_eq!(r.snapshot_epoch, want, "tau_s {tau_s} tau_r {tau_r} epoch {}", r.epoch);
        }
        let consumes = log.events.iter().filter(|e| e.kind == EventKind::ConsumeNew).count();
        assert_eq!(consumes, (10 - tau_s).div_ceil(tau_r));
    }
}

#[test]
fn training_reduces_loss_and_learns() {
    let (tr, te) = small();
    for strategy in [SamplerStrategy::RandomOnly, SamplerStrategy::Mixture] {
        let c = TrainConfig {
            lr_encoder: 0.01,
            ..cfg(strategy, 8)
        };
        let (_, log) = train(&tr, Some(&te), &c, None).unwrap();
        let probe: Vec<f64> = log.records.iter().filter_map(|r| r.probe_full_loss).collect();
        assert!(probe.last().unwrap() < &probe[0], "{strategy}: {probe:?}");
        assert!(
            log.final_p_at_1().unwrap() > 0.3,
            "{strategy}: {:?}",
            log.final_p_at_1()
        );
    }
}

#[test]
fn full_baseline_trains_and_respects_cap() {
    let (tr, te) = small();
    let (_, log) = train_full_loss_baseline(&tr, Some(&te), &cfg(SamplerStrategy::RandomOnly, 8), None).unwrap();
    assert!(log.final_p_at_1().unwrap() > 0.3, "{:?}", log.final_p_at_1());
    let big = SparseDataset::new(
        2,
        FULL_LOSS_MAX_LABELS + 1,
        vec![SparseVector::new(vec![0], vec![1.0]).unwrap()],
        vec![vec![0]],
        None,
    )
    .unwrap();
    assert!(train_full_loss_baseline(&big, None, &cfg(SamplerStrategy::RandomOnly, 1), None).is_err());
}

#[test]
fn label_embedding_strategies_need_label_features() {
    let (tr, _) = small();
    let bare = SparseDataset::new(
        tr.n_features(),
        tr.n_labels(),
        tr.rows().to_vec(),
        tr.all_positives().to_vec(),
        None,
    )
    .unwrap();
    assert!(matches!(
        train(&bare, None, &cfg(SamplerStrategy::LabelEmbMixture, 3), None),
        Err(Error::Missing(_))
    ));
    assert!(train(&tr, None, &cfg(SamplerStrategy::LabelEmbMixture, 4), None).is_ok());
}

#[test]
fn up_to_date_queries_every_step_after_warmup() {
    let (tr, _) = small();
    let c = cfg(SamplerStrategy::UpToDateHard, 4);
    let (_, log) = train(&tr, None, &c, None).unwrap();
    let rows = trainable_rows(&tr) as u64;
    assert_eq!(log.trainer_index_queries, rows * 2);
    assert_eq!(log.hard_slots, rows * 2 * (c.k_h + c.k_r) as u64);
    assert!(log.records.iter().all(|r| r.snapshot_epoch.is_none()));
}

#[test]
fn empty_positive_rows_are_skipped() {
    let (tr, _) = small();
    let mut pos = tr.all_positives().to_vec();
    pos[0].clear();
    pos[5].clear();
    let ds = SparseDataset::new(tr.n_features(), tr.n_labels(), tr.rows().to_vec(), pos, None).unwrap();
    assert_eq!(trainable_rows(&ds), tr.n_points() - 2);
    assert!(!epoch_order(&ds, 0, 0).contains(&5));
    assert!(train(&ds, None, &cfg(SamplerStrategy::RandomOnly, 2), None).is_ok());
}

#[test]
fn checkpoint_and_invalid_config() {
    let (tr, _) = small();
    let dir = tempfile::tempdir().unwrap();
    let c = cfg(SamplerStrategy::RandomOnly, 2);
    let (model, _) = train(&tr, None, &c, Some(dir.path())).unwrap();
    assert_eq!(TrainedModel::load(dir.path().join("model.xast")).unwrap(), model);
    assert_eq!(model.config_digest, c.digest());
    assert!(train(&tr, None, &TrainConfig { batch_size: 0, ..c }, None).is_err());
}

#[test]
fn breakdown_reports_every_phase() {
    let (tr, _) = small();
    let c = cfg(SamplerStrategy::Mixture, 1);
    let mut st = TrainState::init(&c, tr.n_features(), tr.n_labels()).unwrap();
    assert!(measure_iteration_breakdown(&mut st, &tr, &c, Objective::Full, 10, None).is_err());
    for obj in [
        Objective::Full,
        Objective::Sampled(SamplerStrategy::Mixture),
        Objective::Sampled(SamplerStrategy::UpToDateHard),
    ] {
        let b = measure_iteration_breakdown(&mut st, &tr, &c, obj, 100, None).unwrap();
        for v in [b.data_prep, b.embed_fwd, b.clf_fwd, b.loss, b.backward] {
            assert!(v.is_finite() && v >= 0.0);
        }
    }
}

#[test]
fn zero_learning_rates_leave_parameters_unchanged() {
    let (tr, _) = small();
    let one_batch = tr.select_rows(&(0..16).collect::<Vec<_>>()).unwrap();
    let c = TrainConfig {
        lr_encoder: 0.0,
        lr_classifier: 0.0,
        weight_decay_classifier: 0.0,
        batch_size: 16,
        ..cfg(SamplerStrategy::Mixture, 1)
    };
    let (model, log) = train(&one_batch, None, &c, None).unwrap();
    let init = TrainState::init(&c, tr.n_features(), tr.n_labels()).unwrap();
    assert_eq!(model.encoder, init.encoder);
    assert_eq!(model.bank, init.bank);
    assert_eq!(log.records.len(), 1);
}
