use mpseg_core::phantom::{augment, case_id, generate_phantom_case, make_slabs, AugmentLimits, PhantomParams};
use mpseg_core::train::{
    crossval_split, evaluate_cases, lr_at, run_ablation, slabs_of, train_loop, Segmenter, Variant, SURFACE_MODE,
};
use mpseg_core::{MetricsReport, Network, NetworkConfig, PhantomCase, PhaseCaseSample, Result, Rng, TrainConfig};
use proptest::prelude::*;

fn cases(n: usize, seed: u64, visibility: f64) -> Vec<PhantomCase> {
    let params = PhantomParams { visibility, ..PhantomParams::default() };
    (0..n).map(|i| generate_phantom_case(seed ^ i as u64, [6, 32, 32], &params, &case_id(i)).unwrap()).collect()
}

fn quick_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 2,
        seed,
        network: NetworkConfig::micro(),
        augmentation: AugmentLimits::none(),
        ..TrainConfig::default()
    }
}

/// Slab with the most tumour pixels, so the loss has something to fit.
fn busiest_slab(cases: &[PhantomCase]) -> PhaseCaseSample {
    slabs_of(cases).into_iter().max_by_key(|s| s.tumor.iter().filter(|&&v| v == 1).count()).unwrap()
}

#[test]
fn single_sample_loss_keeps_falling() {
    let sample = busiest_slab(&cases(2, 5, 0.55));
    let cfg = TrainConfig { epochs: 50, batch_size: 1, initial_lr: 1e-2, ..quick_config(7) };
    let (_, record) = train_loop::<f64>(std::slice::from_ref(&sample), &[], &cfg, None).unwrap();
    let losses = record.losses();
    assert_eq!(losses.len(), 50);
    let falling = losses.windows(2).filter(|w| w[1] < w[0]).count() + usize::from(losses[0] > losses[1]);
    assert!(falling >= 45, "only {falling} of 50 steps decreased: {losses:?}");
    assert!(losses[49] < losses[0]);
}

#[test]
fn same_seed_reproduces_losses_bit_for_bit() {
    let slabs = slabs_of(&cases(3, 11, 0.55));
    let cfg = TrainConfig { epochs: 2, augmentation: AugmentLimits::default(), momentum: 0.9, grad_clip: Some(1.0), ..quick_config(3) };
    let first = |cfg: &TrainConfig| {
        let (_, r) = train_loop::<f64>(&slabs, &[], cfg, None).unwrap();
        r.losses().into_iter().take(10).map(f64::to_bits).collect::<Vec<_>>()
    };
    let a = first(&cfg);
    assert_eq!(a.len(), 10);
    assert_eq!(a, first(&cfg));
    assert_ne!(a, first(&TrainConfig { seed: 4, ..cfg.clone() }));
}

#[test]
fn recorded_rates_follow_the_schedule() {
    let slabs: Vec<_> = slabs_of(&cases(1, 2, 0.55)).into_iter().take(2).collect();
    let cfg = TrainConfig { epochs: 4, batch_size: 2, schedule_scale: 0.04, ..quick_config(1) };
    let (_, record) = train_loop::<f32>(&slabs, &[], &cfg, None).unwrap();
    let rates: Vec<f64> = record.steps.iter().map(|s| s.lr).collect();
    assert_eq!(rates, (0..4).map(|e| lr_at(e, &cfg)).collect::<Vec<_>>());
    assert!((rates[2] - 5e-5).abs() < 1e-18);
}

#[test]
fn run_directory_and_checkpoint_round_trip() {
    let data = cases(4, 21, 0.55);
    let (train, val) = data.split_at(3);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { epochs: 2, ..quick_config(9) };
    let (net, record) = train_loop::<f32>(&slabs_of(train), val, &cfg, Some(dir.path())).unwrap();
    for f in ["best.ckpt", "last.ckpt", "run.json"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    assert!(record.best_epoch.is_some());
    assert!(record.epochs.iter().all(|e| e.validation.is_some()));
    let saved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(saved["steps"].as_array().unwrap().len(), record.steps.len());

    let loaded = Network::<f32>::load_checkpoint(&dir.path().join("last.ckpt")).unwrap();
    assert_eq!(evaluate_cases(&loaded, val).unwrap(), evaluate_cases(&net, val).unwrap());
}

#[test]
fn diverging_run_stops_with_last_good_checkpoint() {
    let mut slabs: Vec<_> = slabs_of(&cases(1, 13, 0.55)).into_iter().take(2).collect();
    slabs[1].art.data_mut()[100] = f32::NAN;
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { epochs: 2, batch_size: 1, ..quick_config(2) };
    let err = train_loop::<f32>(&slabs, &[], &cfg, Some(dir.path())).unwrap_err();
    assert!(matches!(err, mpseg_core::Error::NonFinite(_)), "{err}");
    let good = Network::<f32>::load_checkpoint(&dir.path().join("last_good.ckpt")).unwrap();
    assert!(good.params().iter().all(|(_, t)| t.all_finite()));
}

#[test]
fn empty_training_set_rejected() {
    assert!(train_loop::<f32>(&[], &[], &quick_config(0), None).is_err());
}

struct Oracle;

impl Segmenter for Oracle {
    fn segment(&self, batch: &[&PhaseCaseSample]) -> Result<Vec<Vec<u8>>> {
        Ok(batch.iter().map(|s| s.tumor.clone()).collect())
    }
}

struct Background;

impl Segmenter for Background {
    fn segment(&self, batch: &[&PhaseCaseSample]) -> Result<Vec<Vec<u8>>> {
        Ok(batch.iter().map(|s| vec![0; s.tumor.len()]).collect())
    }
}

#[test]
fn oracle_and_background_models() {
    let data = cases(3, 31, 0.55);
    let perfect = evaluate_cases(&Oracle, &data).unwrap();
    assert_eq!(perfect.surface, SURFACE_MODE);
    for c in &perfect.cases {
        assert_eq!((c.dpc, c.voe, c.assd, c.rmsd, c.rvd), (1.0, 0.0, Some(0.0), Some(0.0), Some(0.0)));
    }
    assert_eq!(perfect.aggregate.dice_global, 1.0);

    let empty = evaluate_cases(&Background, &data).unwrap();
    assert!(empty.cases.iter().all(|c| c.dpc == 0.0 && c.assd.is_none()));
    assert_eq!(empty.aggregate.undefined_surface_count, data.len());

    let text = serde_json::to_string(&perfect).unwrap();
    assert_eq!(serde_json::from_str::<MetricsReport>(&text).unwrap(), perfect);
}

#[test]
fn ablation_table_shape_and_control_semantics() {
    let data = cases(6, 41, 1.0);
    let cfg = TrainConfig { fold_count: 3, ..quick_config(0) };
    let report = run_ablation(&data, &cfg, &[1, 2, 3], &Variant::ALL).unwrap();
    assert!(report.control);
    assert_eq!(report.rows.len(), 12);
    for seed in [1, 2, 3] {
        let variants: Vec<Variant> = report.rows.iter().filter(|r| r.seed == seed).map(|r| r.variant).collect();
        assert_eq!(variants, Variant::ALL);
    }
    assert_eq!(report.test_ids.len(), 2);
    assert!(report.criteria.iter().all(|c| c.name.contains("sam >= sp - 0.02")));
    let table = report.table();
    let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["seed", "variant", "DPC", "DG", "VOE", "RVD", "ASSD", "RMSD"]);
    assert_eq!(table.lines().skip(1).take_while(|l| !l.starts_with("PASS") && !l.starts_with("FAIL")).count(), 12);
}

#[test]
fn augmentation_keeps_masks_binary_and_slabs_aligned() {
    let data = cases(1, 51, 0.55);
    let mut rng = Rng::new(4);
    for s in make_slabs(&data[0]) {
        let a = augment(&s, &mut rng, &AugmentLimits::default());
        assert_eq!(a.pv.shape(), s.pv.shape());
        assert!(a.tumor.iter().chain(&a.liver).all(|&v| v <= 1));
        assert!(a.tumor.iter().zip(&a.liver).all(|(&t, &l)| t <= l));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn folds_partition_the_ids(n in 1usize..200, k in 1usize..12, seed: u64) {
        prop_assume!(k <= n);
        let ids: Vec<usize> = (0..n).collect();
        let folds = crossval_split(&ids, k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut all = folds.concat();
        all.sort_unstable();
        prop_assert_eq!(all, ids);
    }
}
