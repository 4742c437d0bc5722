//! Repeated-trial evaluation: several selector retrainings crossed with
//! bootstrap resamples of shifted test sets, compared against score-based
//! baselines through coverage sweeps.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::basemodel::{fit_temperature, train_base, BaseArchConfig, BaseModel};
use crate::calmetrics::{default_grid, validate_grid, BinningPolicy, CoverageCurve, CurveRow, METRICS};
use crate::calmetrics::sweep_curve;
use crate::error::{Error, Result};
use crate::metafeatures::{baseline_scores, fit_extractor, FeatureConfig, FeatureExtractor, BASELINES};
use crate::robust_trainer::{train, ScoredDataset, TrainConfig};
use crate::selector::HardSelector;
use crate::synthdata::{
    apply_perturbation, bootstrap_indices, derive_seed, sample_mixture, sample_toy, KindRange, LabeledDataset,
    MixtureSpec, PerturbationFamily, PerturbationKind, PerturbationSpec, ToySpec,
};

pub const SMMCE_METHOD: &str = "smmce";
pub const FULL_METHOD: &str = "full";

#[derive(Debug, Clone, PartialEq)]
pub enum Task {
    Toy(ToySpec),
    Mixture(MixtureSpec),
}

impl Task {
    pub fn sample(&self, n: usize, seed: u64) -> Result<LabeledDataset> {
        match self {
            Task::Toy(s) => sample_toy(s, n, seed),
            Task::Mixture(s) => sample_mixture(s, n, seed),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Task::Toy(_) => 2,
            Task::Mixture(s) => s.num_classes,
        }
    }

    /// Groups seen by group resampling: the X₂ strata for the toy task, the
    /// labels for mixtures.
    pub fn num_groups(&self) -> usize {
        self.num_classes()
    }
}

/// Everything needed to build the data, base model and extractor of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub task: Task,
    /// Rows used to fit the base model and the meta-feature extractor.
    pub n_fit: usize,
    /// Rows for temperature scaling of a trained base model.
    pub n_val: usize,
    pub n_train: usize,
    pub n_tune: usize,
    pub n_test: usize,
    pub arch: BaseArchConfig,
    pub features: FeatureConfig,
    pub family: PerturbationFamily,
    pub train: TrainConfig,
    pub policy: BinningPolicy,
    pub seed: u64,
}

/// Training family for the synthetic tasks: mild feature noise plus
/// group-proportion shifts.
pub fn default_family(num_groups: usize) -> PerturbationFamily {
    PerturbationFamily {
        ranges: vec![
            KindRange::new(PerturbationKind::FeatureNoise, 0.0, 0.1),
            KindRange::new(PerturbationKind::GroupResample, 0.0, 1.0),
        ],
        num_groups,
    }
}

impl TaskConfig {
    pub fn toy(spec: ToySpec) -> Self {
        let mut features = FeatureConfig::default();
        // The toy's meta scores cannot tell the X₂ strata apart on their own.
        features.flags.representation = true;
        features.max_reference = 500;
        TaskConfig {
            task: Task::Toy(spec),
            n_fit: 2000,
            n_val: 1000,
            n_train: 10_000,
            n_tune: 5000,
            n_test: 10_000,
            arch: BaseArchConfig::default(),
            features,
            family: default_family(2),
            train: TrainConfig::default(),
            policy: BinningPolicy::default(),
            seed: 0,
        }
    }

    pub fn mixture(spec: MixtureSpec) -> Self {
        let groups = spec.num_classes;
        TaskConfig {
            task: Task::Mixture(spec),
            features: FeatureConfig {
                max_reference: 500,
                ..FeatureConfig::default()
            },
            family: default_family(groups),
            ..Self::toy(ToySpec { mix: 0.5, delta: 0.3 })
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_fit < crate::metafeatures::MIN_FIT_POINTS {
            return Err(Error::param("n_fit is too small to fit the extractor"));
        }
        if self.n_train < 2 || self.n_tune < 1 || self.n_test < 1 || self.n_val < 1 {
            return Err(Error::param("every data split needs rows"));
        }
        if self.family.num_groups != self.task.num_groups() {
            return Err(Error::param(format!(
                "family has {} groups, task has {}",
                self.family.num_groups,
                self.task.num_groups()
            )));
        }
        self.family.validate()?;
        self.train.validate()
    }
}

/// Data splits and fitted components shared by all trials of a run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub model: BaseModel,
    pub extractor: FeatureExtractor,
    pub fit: LabeledDataset,
    pub train: LabeledDataset,
    pub tune: LabeledDataset,
    pub test: LabeledDataset,
}

/// Samples every split and fits the base model (unless `model` is given)
/// and the extractor. Deterministic in `task.seed`.
pub fn prepare(task: &TaskConfig, model: Option<BaseModel>) -> Result<Prepared> {
    task.validate()?;
    let s = |k| derive_seed(task.seed, k);
    let fit = task.task.sample(task.n_fit, s(1))?;
    let model = match (model, &task.task) {
        (Some(m), _) => m,
        (None, Task::Toy(_)) => BaseModel::analytic_toy(),
        (None, Task::Mixture(_)) => {
            let net = train_base(&fit, &task.arch, s(6)).map_err(|e| e.in_module("basemodel"))?;
            let val = task.task.sample(task.n_val, s(2))?;
            fit_temperature(&net, &val).map_err(|e| e.in_module("basemodel"))?.model
        }
    };
    if model.num_classes() != task.task.num_classes() {
        return Err(Error::param("base model and task disagree on the number of classes"));
    }
    let reps = fit.rows().map(|x| model.hidden(x)).collect::<Result<Vec<_>>>()?;
    let extractor = fit_extractor(&reps, model.num_classes(), task.features, s(7))
        .map_err(|e| e.in_module("metafeatures"))?;
    Ok(Prepared {
        model,
        extractor,
        train: task.task.sample(task.n_train, s(3))?,
        tune: task.task.sample(task.n_tune, s(4))?,
        test: task.task.sample(task.n_test, s(5))?,
        fit,
    })
}

/// A held-out test shift and the label it is reported under.
#[derive(Debug, Clone, PartialEq)]
pub struct TestShift {
    pub name: String,
    /// `None` evaluates the unshifted test split.
    pub spec: Option<PerturbationSpec>,
}

impl TestShift {
    pub fn clean() -> Self {
        TestShift {
            name: "clean".into(),
            spec: None,
        }
    }

    pub fn perturbed(spec: PerturbationSpec) -> Self {
        TestShift {
            name: format!("{}:{}", spec.kind, spec.intensity),
            spec: Some(spec),
        }
    }
}

/// Held-out shifts for the synthetic tasks: kinds absent from
/// [`default_family`] plus noise well beyond its training range.
pub fn default_test_shifts(seed: u64) -> Vec<TestShift> {
    use std::f64::consts::PI;
    use PerturbationKind::*;
    [
        (Rotation, PI / 8.0),
        (Rotation, PI / 4.0),
        (MeanShift, 0.25),
        (MeanShift, 0.5),
        (FeatureScale, 0.8),
        (FeatureScale, 1.25),
        (FeatureNoise, 0.3),
    ]
    .iter()
    .enumerate()
    .map(|(i, &(kind, intensity))| TestShift::perturbed(PerturbationSpec::new(kind, intensity, derive_seed(seed, 100 + i as u64))))
    .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialPlan {
    pub num_retrains: usize,
    pub num_test_resamples: usize,
    pub shifts: Vec<TestShift>,
    pub grid: Vec<f64>,
    pub seed: u64,
}

impl Default for TrialPlan {
    fn default() -> Self {
        TrialPlan {
            num_retrains: 5,
            num_test_resamples: 5,
            shifts: default_test_shifts(0),
            grid: default_grid(),
            seed: 0,
        }
    }
}

impl TrialPlan {
    /// Checks counts and grid, and that no held-out shift could have been
    /// drawn from the training `family`.
    pub fn validate(&self, family: &PerturbationFamily) -> Result<()> {
        if self.num_retrains == 0 || self.num_test_resamples == 0 {
            return Err(Error::param("need at least one retrain and one resample"));
        }
        if self.shifts.is_empty() {
            return Err(Error::param("no test shifts configured"));
        }
        validate_grid(&self.grid)?;
        for shift in &self.shifts {
            let Some(spec) = &shift.spec else { continue };
            spec.validate()?;
            if let Some(r) = family
                .ranges
                .iter()
                .find(|r| r.kind == spec.kind && spec.intensity >= r.lo && spec.intensity <= r.hi)
            {
                return Err(Error::param(format!(
                    "test shift {} overlaps the training range [{}, {}]",
                    shift.name, r.lo, r.hi
                )));
            }
        }
        Ok(())
    }
}

/// One coverage sweep: a method on one resampled, shifted test set.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialCurve {
    pub trial: usize,
    pub retrain: usize,
    pub resample: usize,
    pub perturbation: String,
    pub curve: CoverageCurve<f64>,
}

/// Cell that could not be evaluated (too few selected rows at the smallest
/// coverage); left out of every aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct FlaggedCell {
    pub trial: usize,
    pub method: String,
    pub perturbation: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub trial: usize,
    pub method: String,
    pub perturbation: String,
    pub metric: &'static str,
    pub coverage: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub method: String,
    /// A shift name, or `all` for the per-trial mean across shifts.
    pub perturbation: String,
    pub metric: &'static str,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub methods: Vec<String>,
    pub shifts: Vec<String>,
    pub grid: Vec<f64>,
    pub curves: Vec<TrialCurve>,
    pub flagged: Vec<FlaggedCell>,
    pub selectors: Vec<HardSelector<f64>>,
}

pub const ROWS_HEADER: &str = "trial,method,perturbation,metric,coverage,value";
pub const AGGREGATE_HEADER: &str = "method,perturbation,metric,mean_auc,std_auc,trials";

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    // Population spread, so a single trial reports zero.
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl ResultTable {
    /// Long-form rows, one per (trial, method, shift, metric, coverage).
    pub fn rows(&self) -> Vec<ResultRow> {
        let mut out = Vec::new();
        for c in &self.curves {
            for row in &c.curve.rows {
                for m in METRICS {
                    out.push(ResultRow {
                        trial: c.trial,
                        method: c.curve.method.clone(),
                        perturbation: c.perturbation.clone(),
                        metric: m,
                        coverage: row.coverage,
                        value: row.metric(m).unwrap_or(f64::NAN),
                    });
                }
            }
        }
        out
    }

    fn curves_of<'a>(&'a self, method: &'a str) -> impl Iterator<Item = &'a TrialCurve> + 'a {
        self.curves.iter().filter(move |c| c.curve.method == method)
    }

    /// Per-trial AUC of `metric` for `method` on one shift.
    pub fn trial_aucs(&self, method: &str, shift: &str, metric: &str) -> Vec<(usize, f64)> {
        self.curves_of(method)
            .filter(|c| c.perturbation == shift)
            .filter_map(|c| c.curve.aucs.get(metric).map(|v| (c.trial, *v)))
            .collect()
    }

    /// Per-trial AUC averaged over the shifts evaluated in that trial.
    pub fn trial_mean_aucs(&self, method: &str, metric: &str) -> Vec<(usize, f64)> {
        let mut by_trial: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for c in self.curves_of(method) {
            if let Some(v) = c.curve.aucs.get(metric) {
                by_trial.entry(c.trial).or_default().push(*v);
            }
        }
        by_trial
            .into_iter()
            .map(|(t, v)| (t, v.iter().sum::<f64>() / v.len() as f64))
            .collect()
    }

    /// Mean and spread of per-trial AUCs per (method, shift, metric), plus
    /// an `all` row per (method, metric).
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut out = Vec::new();
        for method in &self.methods {
            for metric in METRICS {
                let mut push = |shift: &str, vals: Vec<f64>| {
                    if vals.is_empty() {
                        return;
                    }
                    let (mean_auc, std_auc) = mean_std(&vals);
                    out.push(AggregateRow {
                        method: method.clone(),
                        perturbation: shift.to_string(),
                        metric,
                        mean_auc,
                        std_auc,
                        trials: vals.len(),
                    });
                };
                for shift in &self.shifts {
                    push(shift, self.trial_aucs(method, shift, metric).into_iter().map(|p| p.1).collect());
                }
                push("all", self.trial_mean_aucs(method, metric).into_iter().map(|p| p.1).collect());
            }
        }
        out
    }

    /// Per method, the curve averaged over every unflagged trial and shift
    /// at each coverage level, with AUCs of that mean curve.
    pub fn mean_curves(&self) -> Result<Vec<CoverageCurve<f64>>> {
        let mut out = Vec::new();
        for method in &self.methods {
            let curves: Vec<&TrialCurve> = self.curves_of(method).collect();
            if curves.is_empty() {
                continue;
            }
            let k = curves.len() as f64;
            let rows = self
                .grid
                .iter()
                .enumerate()
                .map(|(i, &coverage)| {
                    let avg = |f: &dyn Fn(&CurveRow<f64>) -> f64| curves.iter().map(|c| f(&c.curve.rows[i])).sum::<f64>() / k;
                    CurveRow {
                        coverage,
                        achieved: avg(&|r| r.achieved),
                        s_bce2: avg(&|r| r.s_bce2),
                        s_bce_inf: avg(&|r| r.s_bce_inf),
                        s_brier: avg(&|r| r.s_brier),
                        s_risk: avg(&|r| r.s_risk),
                    }
                })
                .collect();
            out.push(CoverageCurve::summarize(method, rows)?);
        }
        Ok(out)
    }

    pub fn rows_csv(&self) -> String {
        let mut s = format!("{ROWS_HEADER}\n");
        for r in self.rows() {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.trial, r.method, r.perturbation, r.metric, r.coverage, r.value
            ));
        }
        s
    }

    pub fn aggregate_csv(&self) -> String {
        let mut s = format!("{AGGREGATE_HEADER}\n");
        for r in self.aggregate() {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.method, r.perturbation, r.metric, r.mean_auc, r.std_auc, r.trials
            ));
        }
        s
    }
}

/// A shifted test set scored by every method, before resampling.
struct ShiftScores {
    name: String,
    data: ScoredDataset,
    /// Method name → per-row selection score (higher is kept first).
    scores: Vec<(String, Vec<f64>)>,
}

fn shift_scores(
    prep: &Prepared,
    shift: &TestShift,
    selectors: &[HardSelector<f64>],
) -> Result<Vec<ShiftScores>> {
    let data = match &shift.spec {
        Some(spec) => apply_perturbation(&prep.test, spec)?,
        None => prep.test.clone(),
    };
    let scored = ScoredDataset::build(&prep.model, &prep.extractor, &data)?;
    let baselines = baseline_scores(&prep.extractor, &prep.model, &data)?;
    // One entry per retrain; baselines are repeated so every trial sees the
    // same method set.
    selectors
        .iter()
        .map(|sel| {
            let mut scores = vec![
                (SMMCE_METHOD.to_string(), sel.soft.scores(&scored.metas)?),
                (FULL_METHOD.to_string(), vec![1.0; data.len()]),
            ];
            for b in BASELINES {
                scores.push((b.to_string(), baselines[b].clone()));
            }
            Ok(ShiftScores {
                name: shift.name.clone(),
                data: scored.clone(),
                scores,
            })
        })
        .collect()
}

/// Trains `num_retrains` selectors with distinct seeds on the prepared
/// splits.
pub fn train_selectors(prep: &Prepared, task: &TaskConfig, plan: &TrialPlan) -> Result<Vec<HardSelector<f64>>> {
    (0..plan.num_retrains)
        .into_par_iter()
        .map(|r| {
            let cfg = TrainConfig {
                seed: derive_seed(plan.seed, r as u64),
                ..task.train.clone()
            };
            train(&prep.model, &prep.extractor, &prep.train, &prep.tune, &task.family, &cfg)
                .map(|(sel, _)| sel)
                .map_err(|e| e.in_module("robust_trainer"))
        })
        .collect()
}

/// Runs every retrain × resample trial. Trials are numbered
/// `retrain * num_test_resamples + resample`; resample `s` uses the same
/// bootstrap rows for every retrain.
pub fn run_trials(plan: &TrialPlan, task: &TaskConfig) -> Result<ResultTable> {
    plan.validate(&task.family)?;
    let prep = prepare(task, None)?;
    let selectors = train_selectors(&prep, task, plan)?;
    evaluate_selectors(plan, task, &prep, selectors)
}

/// The evaluation half of [`run_trials`] for already trained selectors.
pub fn evaluate_selectors(
    plan: &TrialPlan,
    task: &TaskConfig,
    prep: &Prepared,
    selectors: Vec<HardSelector<f64>>,
) -> Result<ResultTable> {
    plan.validate(&task.family)?;
    if selectors.is_empty() {
        return Err(Error::param("no selectors to evaluate"));
    }
    let per_shift = plan
        .shifts
        .par_iter()
        .map(|s| shift_scores(prep, s, &selectors))
        .collect::<Result<Vec<_>>>()?;
    let resamples: Vec<Vec<usize>> = (0..plan.num_test_resamples)
        .map(|s| bootstrap_indices(prep.test.len(), derive_seed(plan.seed, 1000 + s as u64)))
        .collect();

    let mut jobs = Vec::new();
    for (r, _) in selectors.iter().enumerate() {
        for (s, idx) in resamples.iter().enumerate() {
            for shift in &per_shift {
                jobs.push((r, s, idx, &shift[r]));
            }
        }
    }
    let results: Vec<Vec<std::result::Result<TrialCurve, FlaggedCell>>> = jobs
        .par_iter()
        .map(|&(r, s, idx, sh)| {
            let trial = r * plan.num_test_resamples + s;
            let boot = sh.data.select(idx);
            sh.scores
                .iter()
                .map(|(method, scores)| {
                    let picked: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
                    match sweep_curve(method, &picked, &boot.preds, &plan.grid, &task.policy) {
                        Ok(curve) => Ok(Ok(TrialCurve {
                            trial,
                            retrain: r,
                            resample: s,
                            perturbation: sh.name.clone(),
                            curve,
                        })),
                        Err(e @ Error::InsufficientData { .. }) | Err(e @ Error::DegenerateSelection(_)) => {
                            Ok(Err(FlaggedCell {
                                trial,
                                method: method.clone(),
                                perturbation: sh.name.clone(),
                                reason: e.to_string(),
                            }))
                        }
                        Err(e) => Err(e),
                    }
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut curves = Vec::new();
    let mut flagged = Vec::new();
    for r in results.into_iter().flatten() {
        match r {
            Ok(c) => curves.push(c),
            Err(f) => flagged.push(f),
        }
    }
    let mut methods = vec![SMMCE_METHOD.to_string(), FULL_METHOD.to_string()];
    methods.extend(BASELINES.iter().map(|s| s.to_string()));
    Ok(ResultTable {
        methods,
        shifts: plan.shifts.iter().map(|s| s.name.clone()).collect(),
        grid: plan.grid.clone(),
        curves,
        flagged,
        selectors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelComposition {
    pub label: usize,
    pub accepted: usize,
    pub rejected: usize,
}

/// Accepted and rejected counts per true label.
pub fn rejection_composition(accepted: &[bool], data: &LabeledDataset) -> Result<Vec<LabelComposition>> {
    if accepted.len() != data.len() {
        return Err(Error::param("one selection bit per row required"));
    }
    let mut out: Vec<LabelComposition> = (0..data.num_classes())
        .map(|label| LabelComposition {
            label,
            accepted: 0,
            rejected: 0,
        })
        .collect();
    for (&y, &a) in data.labels().iter().zip(accepted) {
        if a {
            out[y].accepted += 1;
        } else {
            out[y].rejected += 1;
        }
    }
    Ok(out)
}
