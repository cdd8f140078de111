use dial::checkpoint::save_checkpoint;
use dial::config::{train_stage_weights, TrainConfig, Variant};
use dial::data::{gen_blobs, BlobsSpec, DomainDataset, LabeledSplit, UnlabeledSplit};
use dial::rng::SeededRng;
use dial::trainer::{resume, train};
use dial::Error;

fn dataset(n: usize) -> DomainDataset {
    gen_blobs(&BlobsSpec { n_per_class: n, ..BlobsSpec::default() }).unwrap().standardized().unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::digits();
    cfg.max_epochs = epochs;
    cfg.model.discriminator_hidden = vec![16, 16];
    cfg
}

#[test]
fn target_training_labels_are_never_read() {
    let data = dataset(40);
    let mut shuffled_labels = data.target_train.labels_for_evaluation().to_vec();
    SeededRng::new(9).shuffle(&mut shuffled_labels);
    shuffled_labels.iter_mut().for_each(|l| *l = (*l + 1) % 3);
    let scrambled = DomainDataset::new(
        data.source_train.clone(),
        data.source_test.clone(),
        UnlabeledSplit::new(data.target_train.features().clone(), shuffled_labels).unwrap(),
        data.target_test.clone(),
        3,
    )
    .unwrap();
    let mut cfg = quick(40);
    cfg.schedule[1].epoch = 5;
    cfg.schedule[2].epoch = 10;
    let a = train(&data, &cfg).unwrap();
    let b = train(&scrambled, &cfg).unwrap();
    assert!(a.report.records.iter().any(|r| r.kept_fraction.is_some()), "pseudo-labelling never ran");
    assert_eq!(a.report.to_jsonl(), b.report.to_jsonl());
    assert_eq!(a.params, b.params);
    assert_eq!(a.centers, b.centers);
}

#[test]
fn source_loss_falls_over_first_epochs() {
    let data = dataset(300);
    let out = train(&data, &quick(5)).unwrap();
    let losses: Vec<f64> = out.report.records.iter().map(|r| r.source_cls_loss).collect();
    assert_eq!(losses.len(), 5);
    assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
}

#[test]
fn centers_stay_finite_and_move() {
    let data = dataset(60);
    let out = train(&data, &quick(4)).unwrap();
    assert!(out.centers.centers().all_finite());
    assert!(out.report.records.iter().all(|r| r.center_drift.is_finite()));
    assert!(out.report.records.iter().any(|r| r.center_drift > 0.0));
}

#[test]
fn resume_continues_with_schedule_at_start_epoch() {
    let data = dataset(40);
    let mut cfg = quick(62);
    cfg.patience = 0;
    let first = train(&data, &{
        let mut c = cfg.clone();
        c.max_epochs = 2;
        c
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&first.params, &first.centers, &path).unwrap();

    let resumed = resume(&data, &cfg, &path, 60).unwrap();
    let epochs: Vec<usize> = resumed.report.records.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, vec![60, 61]);
    let r = &resumed.report.records[0];
    assert_eq!((r.stage, r.alpha, r.beta1, r.beta2), (2, 10.0, 0.02, 0.02));
    assert!((r.lr - 0.0005).abs() < 1e-15);
    let w = train_stage_weights(&cfg, 60);
    assert_eq!((w.beta1, w.beta2), (0.02, 0.02));

    let again = resume(&data, &cfg, &path, 60).unwrap();
    assert_eq!(again.report.to_jsonl(), resumed.report.to_jsonl());
}

#[test]
fn resume_rejects_incompatible_checkpoint() {
    let data = dataset(20);
    let cfg = quick(1);
    let out = train(&data, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&out.params, &out.centers, &path).unwrap();
    let mut wider = cfg.clone();
    wider.model.feature_dim = 8;
    assert!(matches!(resume(&data, &wider, &path, 1), Err(Error::Compatibility(_))));
    let mut no_disc = cfg;
    no_disc.variant = Variant::SourceOnly;
    assert!(matches!(resume(&data, &no_disc, &path, 1), Err(Error::Compatibility(_))));
}

#[test]
fn diverging_data_aborts_with_named_term() {
    let data = dataset(20);
    let mut x = data.source_train.features.clone();
    x.values_mut()[3] = f64::INFINITY;
    let broken = DomainDataset::new(
        LabeledSplit::new(x, data.source_train.labels.clone()).unwrap(),
        data.source_test.clone(),
        data.target_train.clone(),
        data.target_test.clone(),
        3,
    )
    .unwrap();
    let err = train(&broken, &quick(2)).unwrap_err();
    match err {
        Error::NonFinite { term, epoch, .. } => {
            assert_eq!(epoch, 0);
            assert!(!term.is_empty());
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn variants_build_the_right_networks() {
    let data = dataset(20);
    for v in [Variant::SourceOnly, Variant::SourceCenter, Variant::GanOnly, Variant::GanCenter, Variant::Full] {
        let mut cfg = quick(1);
        cfg.variant = v;
        let out = train(&data, &cfg).unwrap();
        assert_eq!(out.params.discriminator.is_some(), v.adversarial(), "{}", v.name());
        let r = &out.report.records[0];
        assert_eq!(r.source_center_loss.is_some(), v.source_center());
        assert_eq!(r.disc_loss.is_some(), v.adversarial());
    }
}
