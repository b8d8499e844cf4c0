mod common;

use common::{ablation_nullity, tiny_run};
use dualdist::dtrans::{exact_signed, TransformConfig};
use dualdist::engine::{
    make_regression_target, run_experiment, run_experiment_on, window_counts, window_starts, Ablation, BatchSampler,
    LabelMode, TargetSource,
};
use dualdist::synth::{crop, Dataset};
use dualdist::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_flag_removes_exactly_its_terms() {
    for o in ablation_nullity() {
        assert!(o.ok, "{}: {}", o.flag, o.detail);
    }
}

#[test]
fn resolved_flags_compose() {
    let f = Ablation {
        all_con: false,
        ..Ablation::default()
    }
    .resolved();
    assert!(!f.ct_con && !f.it_con && f.pse_sup);
    let f = Ablation {
        reg_task: false,
        ..Ablation::default()
    }
    .resolved();
    assert!(!f.ct_sup && !f.ct_con && f.it_con);
    assert!(!Ablation::supervised().any_unsupervised());
}

#[test]
fn baseline_drops_unlabeled_data() {
    let b = tiny_run().baseline();
    assert_eq!(b.dataset.n_unlabeled, 0);
    assert_eq!(b.train.unlabeled_per_batch, 0);
    assert!(!b.train.flags.any_unsupervised());
    b.validate().unwrap();
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = tiny_run();
    c.train.unlabeled_per_batch = 0;
    assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
    let mut c = tiny_run();
    c.train.patch_size = 15;
    assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
    let mut c = tiny_run();
    c.train.patch_size = 32;
    assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
    let mut c = tiny_run();
    c.optimizer.clip_norm = Some(0.0);
    assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
}

#[test]
fn batches_put_labeled_samples_first() {
    let run = tiny_run();
    let data = Dataset::generate(&run.dataset).unwrap();
    let mut s = BatchSampler::new(&data, &run.train, &run.transform, ChaCha8Rng::seed_from_u64(0)).unwrap();
    let b = s.next_batch().unwrap();
    assert_eq!(b.labeled_mask, vec![true, false]);
    assert_eq!(b.x.shape(), &[2, 1, 16, 16, 16]);
    assert_eq!(b.y.shape(), &[1, 1, 16, 16, 16]);
    assert_eq!(b.r.shape(), &[1, 1, 16, 16, 16]);
}

#[test]
fn targets_agree_on_full_volume_patches_only() {
    let data = Dataset::generate(&tiny_run().dataset).unwrap();
    let tcfg = TransformConfig::default();
    let mask = &data.volumes[0].mask;
    let full = [24; 3];
    let a = make_regression_target(mask, [0; 3], full, LabelMode::OnTheFly, TargetSource::Exact, &tcfg).unwrap();
    let b = make_regression_target(mask, [0; 3], full, LabelMode::PreGenerated, TargetSource::Exact, &tcfg).unwrap();
    assert_eq!(a, b);
    let corner = [4, 6, 5];
    let p = [12; 3];
    let a = make_regression_target(mask, corner, p, LabelMode::OnTheFly, TargetSource::Exact, &tcfg).unwrap();
    let b = make_regression_target(mask, corner, p, LabelMode::PreGenerated, TargetSource::Exact, &tcfg).unwrap();
    assert_eq!(a, exact_signed(&crop(mask, corner, p).unwrap()).unwrap());
    assert_ne!(a, b);
}

#[test]
fn window_starts_cover_the_axis() {
    assert_eq!(window_starts(48, 32, 16).unwrap(), vec![0, 16]);
    assert_eq!(window_starts(40, 32, 16).unwrap(), vec![0, 8]);
    assert_eq!(window_starts(32, 32, 16).unwrap(), vec![0]);
    assert!(window_starts(16, 32, 16).is_err());
}

proptest! {
    #[test]
    fn windows_cover_every_voxel(dim in 8usize..40, patch in 4usize..9, stride in 1usize..9) {
        prop_assume!(stride <= patch && patch <= dim);
        let s = window_starts(dim, patch, stride).unwrap();
        prop_assert_eq!(s[0], 0);
        prop_assert_eq!(*s.last().unwrap() + patch, dim);
        prop_assert!(s.windows(2).all(|w| w[1] > w[0] && w[1] - w[0] <= stride));
        let counts = window_counts([dim, patch, patch], [patch; 3], stride).unwrap();
        prop_assert!(counts.data().iter().all(|&c| c >= 1));
    }
}

#[test]
fn identical_runs_are_bit_identical() {
    let mut cfg = tiny_run();
    cfg.train.max_iterations = 4;
    let a = run_experiment(&cfg, |_| {}).unwrap();
    let b = run_experiment(&cfg, |_| {}).unwrap();
    assert!(a.net == b.net);
    assert_eq!(
        serde_json::to_string(&a.report).unwrap(),
        serde_json::to_string(&b.report).unwrap()
    );
}

#[test]
fn losses_are_reported_every_step() {
    let mut cfg = tiny_run();
    cfg.train.max_iterations = 3;
    let data = Dataset::generate(&cfg.dataset).unwrap();
    let mut seen = Vec::new();
    let e = run_experiment_on(&cfg, &data, |r| seen.push(r.clone())).unwrap();
    assert_eq!(seen.len(), 3);
    for (i, r) in seen.iter().enumerate() {
        assert_eq!(r.iteration, i);
        assert!((r.total - r.recomputed_total()).abs() <= 1e-5 * r.total.abs().max(1.0));
    }
    assert_eq!(e.report.iterations, 3);
    assert_eq!(e.report.eval.test.len(), 1);
}
