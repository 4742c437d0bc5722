use proptest::prelude::*;

use selcal::basemodel::BaseModel;
use selcal::calmetrics::{binned_calibration_error_with_bins, CalibrationNorm};
use selcal::eval_harness::{
    prepare, run_trials, TaskConfig, TestShift, TrialPlan, FULL_METHOD, SMMCE_METHOD,
};
use selcal::kernelstats::{empirical_smmce_u, KernelSpec, ScoredBatch};
use selcal::metafeatures::FeatureExtractor;
use selcal::robust_trainer::{hard_selection, train, ScoredDataset};
use selcal::selector::{coverage_at, threshold_rule, HardSelector};
use selcal::synthdata::{MixtureSpec, PerturbationKind, PerturbationSpec};

fn small_mixture() -> TaskConfig {
    let mut task = TaskConfig::mixture(MixtureSpec::symmetric(3, 4, 2.5, 1.0));
    task.n_fit = 600;
    task.n_val = 300;
    task.n_train = 1500;
    task.n_tune = 800;
    task.n_test = 1200;
    task.arch.epochs = 5;
    task.features.iforest_trees = 20;
    task.features.max_reference = 200;
    task.train.m = 6;
    task.train.kappa = 2;
    task.train.sample_size = 300;
    task.train.epochs = 1;
    task.train.steps_per_epoch = 3;
    task.seed = 11;
    task
}

#[test]
fn mixture_trials_cover_every_method_and_shift() {
    let task = small_mixture();
    let plan = TrialPlan {
        num_retrains: 2,
        num_test_resamples: 2,
        shifts: vec![
            TestShift::clean(),
            TestShift::perturbed(PerturbationSpec::new(PerturbationKind::MeanShift, 0.5, 3)),
        ],
        grid: vec![0.5, 0.75, 1.0],
        seed: 4,
    };
    let table = run_trials(&plan, &task).unwrap();
    assert_eq!(table.selectors.len(), 2);
    assert!(table.flagged.is_empty(), "{:?}", table.flagged);
    for method in &table.methods {
        for shift in &table.shifts {
            let aucs = table.trial_aucs(method, shift, "s_bce2");
            assert_eq!(aucs.len(), 4, "{method} on {shift}");
            assert!(aucs.iter().all(|(_, v)| v.is_finite() && *v >= 0.0));
        }
    }
    // Full coverage is the same rows for every method.
    let at_full = |m: &str| {
        table
            .curves
            .iter()
            .find(|c| c.curve.method == m && c.trial == 0 && c.perturbation == "clean")
            .map(|c| c.curve.rows.last().unwrap().s_bce2)
            .unwrap()
    };
    assert_eq!(at_full(SMMCE_METHOD), at_full(FULL_METHOD));
    assert_eq!(at_full("confidence"), at_full(FULL_METHOD));
    assert!(table.aggregate_csv().lines().count() > 1);
}

#[test]
fn trained_components_survive_a_text_round_trip() {
    let task = small_mixture();
    let prep = prepare(&task, None).unwrap();
    let (selector, report) =
        train(&prep.model, &prep.extractor, &prep.train, &prep.tune, &task.family, &task.train).unwrap();
    assert_eq!(report.records.len(), 3);

    let dir = tempfile::tempdir().unwrap();
    let (sp, ep, bp) = (dir.path().join("s.txt"), dir.path().join("e.txt"), dir.path().join("b.txt"));
    selector.save(&sp).unwrap();
    prep.extractor.save(&ep).unwrap();
    prep.model.save(&bp).unwrap();
    let selector2 = HardSelector::<f64>::load(&sp).unwrap();
    let extractor2 = FeatureExtractor::load(&ep).unwrap();
    let model2 = BaseModel::load(&bp).unwrap();

    let a = ScoredDataset::build(&prep.model, &prep.extractor, &prep.test).unwrap();
    let b = ScoredDataset::build(&model2, &extractor2, &prep.test).unwrap();
    assert_eq!(a.metas, b.metas);
    assert_eq!(a.preds, b.preds);
    assert_eq!(
        hard_selection(&selector, &a.metas).unwrap(),
        hard_selection(&selector2, &b.metas).unwrap()
    );
}

#[test]
fn tuned_threshold_hits_target_coverage_on_tune_split() {
    let task = small_mixture();
    let prep = prepare(&task, None).unwrap();
    let (selector, _) =
        train(&prep.model, &prep.extractor, &prep.train, &prep.tune, &task.family, &task.train).unwrap();
    let tune = ScoredDataset::build(&prep.model, &prep.extractor, &prep.tune).unwrap();
    let scores = selector.soft.scores(&tune.metas).unwrap();
    assert!(coverage_at(selector.tau, &scores) >= task.train.xi);
}

proptest! {
    #[test]
    fn binned_error_ignores_row_order(
        rows in prop::collection::vec((0.0f64..1.0, any::<bool>()), 10..120),
        m in 1usize..10,
        rot in 0usize..1000,
    ) {
        prop_assume!(m <= rows.len());
        // Distinct confidences so that reordering cannot change bin membership.
        let mut rows = rows;
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        rows.dedup_by(|a, b| a.0 == b.0);
        prop_assume!(m <= rows.len());
        let build = |rs: &[(f64, bool)]| {
            let r = rs.iter().map(|v| v.0).collect();
            let y: Vec<bool> = rs.iter().map(|v| v.1).collect();
            ScoredBatch::from_bits(r, &y, &vec![true; rs.len()]).unwrap()
        };
        let mut shuffled = rows.clone();
        let k = rot % rows.len();
        shuffled.rotate_left(k);
        for norm in [CalibrationNorm::L2, CalibrationNorm::Max] {
            let a = binned_calibration_error_with_bins(&build(&rows), norm, m).unwrap();
            let b = binned_calibration_error_with_bins(&build(&shuffled), norm, m).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn threshold_keeps_at_least_target_fraction(
        scores in prop::collection::vec(0.0f64..1.0, 1..300),
        xi in 0.01f64..1.0,
    ) {
        let tau = threshold_rule(xi, &scores).unwrap();
        prop_assert!(coverage_at(tau, &scores) >= xi - 1e-12);
    }

    #[test]
    fn smmce_upper_bound_is_zero_only_for_perfect_predictions(
        rows in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..60),
    ) {
        let kernel = KernelSpec::laplace(0.2).unwrap();
        let r: Vec<f64> = rows.iter().map(|v| v.0).collect();
        let y: Vec<bool> = rows.iter().map(|v| v.1).collect();
        let batch = ScoredBatch::from_bits(r, &y, &vec![true; rows.len()]).unwrap();
        let v = empirical_smmce_u(&batch, 2.0, &kernel).unwrap();
        prop_assert!(v > 0.0 && v <= 1.0);
        let exact: Vec<f64> = y.iter().map(|b| f64::from(u8::from(*b))).collect();
        let perfect = ScoredBatch::from_bits(exact, &y, &vec![true; rows.len()]).unwrap();
        prop_assert_eq!(empirical_smmce_u(&perfect, 2.0, &kernel).unwrap(), 0.0);
    }
}
