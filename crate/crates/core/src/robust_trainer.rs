//! Worst-case perturbation training of the soft selector.
//!
//! Every step draws `m` perturbations from the training family, applies each
//! to a fresh sub-draw of the training split, ranks the perturbed datasets by
//! their binned selective calibration error at the selector's own threshold,
//! and takes one SGD step on the regularized kernel loss averaged over the
//! `κ` worst. The final threshold is set on the tuning split.

use rayon::prelude::*;

use crate::basemodel::BaseModel;
use crate::calmetrics::{binned_calibration_error, normalized_auc, validate_grid, BinningPolicy, CalibrationNorm, Predictions};
use crate::error::{Error, Result};
use crate::metafeatures::{FeatureExtractor, MetaVector};
use crate::selector::{binarize, threshold_rule, HardSelector, Standardizer, SoftSelector};
use crate::smmce_loss::{LossConfig, PairCoefficients};
use crate::synthdata::{
    apply_perturbation, derive_seed, draw_indices, resample_indices, rng_for, sample_perturbation_batch, LabeledDataset,
    PerturbationFamily,
};

/// Error assigned to a perturbed dataset whose selection is too small to
/// bin; the largest value a calibration error can take.
pub const SENTINEL_ERROR: f64 = 1.0;

/// How perturbed datasets are ranked.
#[derive(Debug, Clone, PartialEq)]
pub enum RankingMode {
    /// Binned S-BCE₂ at the training coverage.
    Binned,
    /// Normalized AUC of binned S-BCE₂ across a coverage grid.
    GridAuc(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub xi: f64,
    pub m: usize,
    pub kappa: usize,
    pub sample_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub use_kappa_worst: bool,
    pub ranking: RankingMode,
    pub loss: LossConfig<f64>,
    pub policy: BinningPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            xi: 0.5,
            m: 32,
            kappa: 4,
            sample_size: 1024,
            epochs: 5,
            steps_per_epoch: 20,
            learning_rate: 0.05,
            seed: 0,
            use_kappa_worst: true,
            ranking: RankingMode::Binned,
            loss: LossConfig::default(),
            policy: BinningPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.xi > 0.0 && self.xi <= 1.0) {
            return Err(Error::param(format!("xi must lie in (0, 1], got {}", self.xi)));
        }
        if self.m == 0 || self.kappa == 0 || self.kappa > self.m {
            return Err(Error::param(format!(
                "need 1 <= kappa <= m, got kappa={} m={}",
                self.kappa, self.m
            )));
        }
        if self.sample_size < 2 {
            return Err(Error::param("sample_size must be at least 2"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning rate must be positive and finite"));
        }
        if let RankingMode::GridAuc(grid) = &self.ranking {
            validate_grid(grid)?;
        }
        self.loss.validate()
    }
}

/// One optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Mean ranking error over all `m` perturbed datasets.
    pub mean_error: f64,
    /// Mean ranking error over the datasets that entered the loss.
    pub topk_error: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub selector: HardSelector<f64>,
}

pub const REPORT_HEADER: &str = "step,mean_error,topk_error,loss";

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!("{},{},{},{}\n", r.step, r.mean_error, r.topk_error, r.loss));
        }
        out
    }
}

/// A perturbed dataset after passing through the base model and extractor.
#[derive(Debug, Clone)]
pub struct ScoredDataset {
    pub metas: Vec<MetaVector>,
    pub preds: Predictions<f64>,
}

impl ScoredDataset {
    pub fn build(model: &BaseModel, extractor: &FeatureExtractor, data: &LabeledDataset) -> Result<Self> {
        let (probs, metas) = extractor.extract_dataset(model, data)?;
        let preds = Predictions::from_probabilities(&probs, data.labels())?;
        Ok(ScoredDataset { metas, preds })
    }

    /// Rows `indices` of an already scored dataset.
    pub fn select(&self, indices: &[usize]) -> Self {
        ScoredDataset {
            metas: indices.iter().map(|&i| self.metas[i].clone()).collect(),
            preds: Predictions {
                r: indices.iter().map(|&i| self.preds.r[i]).collect(),
                y: indices.iter().map(|&i| self.preds.y[i]).collect(),
                correct: indices.iter().map(|&i| self.preds.correct[i]).collect(),
            },
        }
    }

    pub fn len(&self) -> usize {
        self.metas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.metas.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ranked {
    pub index: usize,
    pub error: f64,
    /// The dataset could not be scored and carries [`SENTINEL_ERROR`].
    pub flagged: bool,
}

fn selection_error(preds: &Predictions<f64>, scores: &[f64], xi: f64, policy: &BinningPolicy) -> Result<Option<f64>> {
    let tau = threshold_rule(xi, scores)?;
    let selected: Vec<bool> = scores.iter().map(|s| *s >= tau).collect();
    let batch = preds.calibration_batch(&selected)?;
    match binned_calibration_error(&batch, CalibrationNorm::L2, policy) {
        Ok(e) => Ok(Some(e)),
        Err(Error::InsufficientData { .. }) | Err(Error::DegenerateSelection(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn dataset_error(preds: &Predictions<f64>, scores: &[f64], xi: f64, mode: &RankingMode, policy: &BinningPolicy) -> Result<Option<f64>> {
    match mode {
        RankingMode::Binned => selection_error(preds, scores, xi, policy),
        RankingMode::GridAuc(grid) => {
            let mut vals = Vec::with_capacity(grid.len());
            for &c in grid {
                match selection_error(preds, scores, c, policy)? {
                    Some(e) => vals.push(e),
                    None => return Ok(None),
                }
            }
            normalized_auc(grid, &vals).map(Some)
        }
    }
}

/// Sorts `(error, flagged)` pairs by error, largest first; equal errors keep
/// ascending index order.
pub fn order_by_error(errors: &[(f64, bool)]) -> Vec<Ranked> {
    let mut ranked: Vec<Ranked> = errors
        .iter()
        .enumerate()
        .map(|(index, &(error, flagged))| Ranked { index, error, flagged })
        .collect();
    ranked.sort_by(|a, b| b.error.total_cmp(&a.error));
    ranked
}

fn rank_scored(
    batchset: &[ScoredDataset],
    scores: &[Vec<f64>],
    xi: f64,
    mode: &RankingMode,
    policy: &BinningPolicy,
) -> Result<Vec<Ranked>> {
    let errors = batchset
        .iter()
        .zip(scores)
        .map(|(d, s)| {
            Ok(match dataset_error(&d.preds, s, xi, mode, policy)? {
                Some(e) => (e, false),
                None => (SENTINEL_ERROR, true),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(order_by_error(&errors))
}

/// Ranks perturbed datasets by binned S-BCE₂ (top-label for more than two
/// classes) of the examples `soft` selects at coverage `xi` within each.
pub fn rank_perturbed(
    batchset: &[ScoredDataset],
    soft: &SoftSelector<f64>,
    xi: f64,
    policy: &BinningPolicy,
) -> Result<Vec<Ranked>> {
    let scores = batchset
        .iter()
        .map(|d| soft.scores(&d.metas))
        .collect::<Result<Vec<_>>>()?;
    rank_scored(batchset, &scores, xi, &RankingMode::Binned, policy)
}

/// The untrained selector: seeded weights plus a standardizer fitted to the
/// meta features of the clean training split.
pub fn initial_selector(
    model: &BaseModel,
    extractor: &FeatureExtractor,
    train_data: &LabeledDataset,
    seed: u64,
) -> Result<SoftSelector<f64>> {
    let (_, metas) = extractor.extract_dataset(model, train_data)?;
    selector_for(&metas, seed)
}

fn selector_for(train_metas: &[MetaVector], seed: u64) -> Result<SoftSelector<f64>> {
    let dim = train_metas.first().map_or(0, Vec::len);
    let mut soft = SoftSelector::new(dim, derive_seed(seed, 0))?;
    soft.set_standardizer(Standardizer::fit(train_metas)?)?;
    Ok(soft)
}

/// Runs the training loop. `train_data` should be disjoint from the data the
/// base model was fitted on; this is not checked.
pub fn train(
    model: &BaseModel,
    extractor: &FeatureExtractor,
    train_data: &LabeledDataset,
    tune_data: &LabeledDataset,
    family: &PerturbationFamily,
    cfg: &TrainConfig,
) -> Result<(HardSelector<f64>, TrainReport)> {
    cfg.validate()?;
    family.validate()?;
    // Row-selecting perturbations reuse these instead of re-extracting.
    let clean = ScoredDataset::build(model, extractor, train_data)?;
    let mut soft = selector_for(&clean.metas, cfg.seed)?;
    let mut records = Vec::with_capacity(cfg.total_steps());
    let kappa = if cfg.use_kappa_worst { cfg.kappa } else { cfg.m };

    for step in 0..cfg.total_steps() {
        let step_seed = derive_seed(cfg.seed, 1 + step as u64);
        let specs = sample_perturbation_batch(family, cfg.m, derive_seed(step_seed, 0))?;
        let batchset = specs
            .par_iter()
            .enumerate()
            .map(|(i, spec)| {
                let mut rng = rng_for(derive_seed(step_seed, 1 + i as u64));
                let rows = draw_indices(train_data.len(), cfg.sample_size, &mut rng);
                let draw = train_data.select(&rows)?;
                match resample_indices(&draw, spec)? {
                    Some(picked) => Ok(clean.select(&picked.iter().map(|&j| rows[j]).collect::<Vec<_>>())),
                    None => ScoredDataset::build(model, extractor, &apply_perturbation(&draw, spec)?),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let scores = batchset
            .par_iter()
            .map(|d| soft.scores(&d.metas))
            .collect::<Result<Vec<_>>>()?;
        let ranked = rank_scored(&batchset, &scores, cfg.xi, &cfg.ranking, &cfg.policy)?;

        let mut chosen: Vec<usize> = ranked[..kappa].iter().map(|r| r.index).collect();
        // Accumulate in dataset order so the result does not depend on ties.
        chosen.sort_unstable();
        let mean_error = ranked.iter().map(|r| r.error).sum::<f64>() / ranked.len() as f64;
        let topk_error = ranked[..kappa].iter().map(|r| r.error).sum::<f64>() / kappa as f64;

        let parts = chosen
            .par_iter()
            .map(|&i| {
                let d = &batchset[i];
                let traces = d
                    .metas
                    .iter()
                    .map(|m| soft.forward_traced(m))
                    .collect::<Result<Vec<_>>>()?;
                let g: Vec<f64> = traces.iter().map(|t| t.score()).collect();
                let coeff = PairCoefficients::new(&d.preds.r, &d.preds.y, &cfg.loss);
                let (value, dg) = coeff.value_and_grad(&g, &cfg.loss)?;
                Ok((value, soft.backward(&traces, &dg)?))
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e: Error| Error::Training {
                step,
                message: e.to_string(),
            })?;
        let mut grads = soft.net().zero_gradients();
        let mut loss = 0.0;
        for (value, g) in &parts {
            loss += value;
            grads.add_assign(g);
        }
        loss /= kappa as f64;
        grads.scale(1.0 / kappa as f64);
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Training {
                step,
                message: format!("non-finite loss or gradient (loss = {loss})"),
            });
        }
        soft.net_mut().sgd_step(&grads, cfg.learning_rate);
        records.push(StepRecord {
            step,
            mean_error,
            topk_error,
            loss,
        });
    }

    let (_, tune_metas) = extractor.extract_dataset(model, tune_data)?;
    let tune_scores = soft.scores(&tune_metas)?;
    let hard = binarize(&soft, &tune_scores, cfg.xi)?;
    Ok((
        hard.clone(),
        TrainReport {
            records,
            selector: hard,
        },
    ))
}

/// Hard selection of the examples whose true calibration gap
/// `h(x) = |P(Y=1 | X=x) − f(x)|` is among the `⌈ξn⌉` smallest (ties at the
/// cutoff included). `cond` is the true conditional of class 1.
pub fn oracle_selector<F>(cond: F, model: &BaseModel, xi: f64, data: &LabeledDataset) -> Result<Vec<bool>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(xi > 0.0 && xi <= 1.0) {
        return Err(Error::param(format!("xi must lie in (0, 1], got {xi}")));
    }
    if model.num_classes() != 2 {
        return Err(Error::param("oracle selection needs a binary model"));
    }
    let h = data
        .rows()
        .map(|x| Ok((cond(x) - model.predict(x)?[1]).abs()))
        .collect::<Result<Vec<f64>>>()?;
    if h.is_empty() {
        return Ok(Vec::new());
    }
    let n = h.len();
    let k = ((xi * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut sorted = h.clone();
    sorted.sort_by(f64::total_cmp);
    let lambda = sorted[k - 1];
    Ok(h.iter().map(|v| *v <= lambda).collect())
}

/// Selection mask of `selector` over precomputed meta vectors.
pub fn hard_selection(selector: &HardSelector<f64>, metas: &[MetaVector]) -> Result<Vec<bool>> {
    metas.iter().map(|m| selector.accepts(m)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metafeatures::{fit_extractor, FeatureConfig};
    use crate::synthdata::{sample_toy, KindRange, PerturbationKind, ToySpec};

    fn toy() -> ToySpec {
        ToySpec::new(0.5, 0.3).unwrap()
    }

    fn setup(seed: u64) -> (BaseModel, FeatureExtractor, LabeledDataset, LabeledDataset) {
        let model = BaseModel::analytic_toy();
        let fit = sample_toy(&toy(), 500, seed).unwrap();
        let reps: Vec<Vec<f64>> = fit.rows().map(|r| model.hidden(r).unwrap()).collect();
        let mut fc = FeatureConfig::default();
        fc.flags.representation = true;
        fc.iforest_trees = 20;
        fc.max_reference = 200;
        let ex = fit_extractor(&reps, 2, fc, seed).unwrap();
        let train = sample_toy(&toy(), 2000, seed + 1).unwrap();
        let tune = sample_toy(&toy(), 1000, seed + 2).unwrap();
        (model, ex, train, tune)
    }

    fn small_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            m: 4,
            kappa: 2,
            sample_size: 200,
            epochs: 1,
            steps_per_epoch: steps,
            ..Default::default()
        }
    }

    fn family() -> PerturbationFamily {
        PerturbationFamily {
            ranges: vec![
                KindRange::new(PerturbationKind::FeatureNoise, 0.0, 0.1),
                KindRange::new(PerturbationKind::GroupResample, 0.0, 1.0),
            ],
            num_groups: 2,
        }
    }

    #[test]
    fn ordering_rules() {
        let r = order_by_error(&[(0.1, false), (0.4, false), (0.2, false), (0.3, false)]);
        assert_eq!(r[0].index, 1);
        assert_eq!(r[1].index, 3);
        let r = order_by_error(&[(0.2, false); 5]);
        assert_eq!(r.iter().map(|x| x.index).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.kappa = 33;
        assert!(c.validate().is_err());
        c.kappa = 0;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            sample_size: 1,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn too_small_datasets_get_sentinel() {
        let (model, ex, train, _) = setup(0);
        let small = ScoredDataset::build(&model, &ex, &train.select(&(0..20).collect::<Vec<_>>()).unwrap()).unwrap();
        let big = ScoredDataset::build(&model, &ex, &train).unwrap();
        let soft = initial_selector(&model, &ex, &train, 0).unwrap();
        let r = rank_perturbed(&[big, small], &soft, 0.5, &BinningPolicy::default()).unwrap();
        assert_eq!(r[0].index, 1);
        assert!(r[0].flagged && r[0].error == SENTINEL_ERROR);
        assert!(!r[1].flagged);
    }

    #[test]
    fn zero_steps_binarizes_initialization() {
        let (model, ex, train, tune) = setup(1);
        let (hard, report) = train_selector(&model, &ex, &train, &tune, &small_cfg(0));
        assert!(report.records.is_empty());
        let init = initial_selector(&model, &ex, &train, 0).unwrap();
        assert_eq!(hard.soft, init);
        let (_, metas) = ex.extract_dataset(&model, &tune).unwrap();
        assert_eq!(hard.tau, threshold_rule(0.5, &init.scores(&metas).unwrap()).unwrap());
    }

    fn train_selector(
        model: &BaseModel,
        ex: &FeatureExtractor,
        train_d: &LabeledDataset,
        tune: &LabeledDataset,
        cfg: &TrainConfig,
    ) -> (HardSelector<f64>, TrainReport) {
        train(model, ex, train_d, tune, &family(), cfg).unwrap()
    }

    #[test]
    fn deterministic_and_topk_dominates_mean() {
        let (model, ex, train_d, tune) = setup(2);
        let cfg = small_cfg(3);
        let (a, ra) = train_selector(&model, &ex, &train_d, &tune, &cfg);
        let (b, rb) = train_selector(&model, &ex, &train_d, &tune, &cfg);
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(ra.records.len(), 3);
        for r in &ra.records {
            assert!(r.topk_error >= r.mean_error - 1e-15);
            assert!(r.loss.is_finite());
        }
        assert!(ra.to_csv().starts_with("step,mean_error,topk_error,loss\n0,"));
    }

    #[test]
    fn all_worst_equals_disabled_ranking() {
        let (model, ex, train_d, tune) = setup(3);
        let on = TrainConfig {
            kappa: 4,
            ..small_cfg(2)
        };
        let off = TrainConfig {
            use_kappa_worst: false,
            ..on.clone()
        };
        let (a, ra) = train_selector(&model, &ex, &train_d, &tune, &on);
        let (b, rb) = train_selector(&model, &ex, &train_d, &tune, &off);
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn grid_auc_ranking_runs() {
        let (model, ex, train_d, tune) = setup(4);
        let cfg = TrainConfig {
            ranking: RankingMode::GridAuc(vec![0.5, 0.75, 1.0]),
            ..small_cfg(1)
        };
        let (_, r) = train_selector(&model, &ex, &train_d, &tune, &cfg);
        assert_eq!(r.records.len(), 1);
    }

    #[test]
    fn oracle_selects_calibrated_branch() {
        let spec = toy();
        let data = sample_toy(&spec, 4000, 5).unwrap();
        let model = BaseModel::analytic_toy();
        let sel = oracle_selector(|x| spec.conditional(x[0], x[1]), &model, 0.5, &data).unwrap();
        let n = data.len();
        let chosen = sel.iter().filter(|b| **b).count();
        assert!(chosen as f64 >= 0.5 * n as f64 - 1.0);
        // Every X₂ = 1 row has zero gap; any X₂ = 0 row selected lies in the
        // boundary region X₁ > 1 − Δ.
        for (x, s) in data.rows().zip(&sel) {
            if x[1] == 1.0 {
                assert!(*s);
            } else if *s {
                assert!(x[0] > 0.7);
            }
        }
        // Without the offset the model is exactly calibrated everywhere.
        let all = oracle_selector(|x| x[0], &model, 0.3, &data).unwrap();
        assert!(all.iter().all(|b| *b));
    }
}
