//! Config-file driven commands behind the `selcal` binary.
//!
//! Config files are flat `key = value` lines; `#` starts a comment. Keys not
//! listed in [`KEYS`] are rejected. Relative paths resolve against the
//! directory holding the config file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::basemodel::BaseModel;
use crate::calmetrics::{aucs_to_csv, curves_to_csv, default_grid};
use crate::error::{Error, Result};
use crate::eval_harness::{evaluate_selectors, prepare, run_trials, TaskConfig, TestShift, TrialPlan};
use crate::kernelstats::KernelSpec;
use crate::metafeatures::{FeatureExtractor, FeatureFlags};
use crate::robust_trainer::{train, RankingMode, TrainConfig};
use crate::selector::HardSelector;
use crate::synthdata::{derive_seed, KindRange, MixtureSpec, PerturbationKind, PerturbationSpec, ToySpec};

/// Every accepted config key.
pub const KEYS: &[&str] = &[
    "task",
    "toy.mix",
    "toy.delta",
    "mixture.classes",
    "mixture.dim",
    "mixture.separation",
    "mixture.scale",
    "n_fit",
    "n_val",
    "n_train",
    "n_tune",
    "n_test",
    "base.hidden",
    "base.epochs",
    "base.batch_size",
    "base.learning_rate",
    "base_model",
    "features",
    "knn_k",
    "iforest_trees",
    "iforest_subsample",
    "max_dim",
    "max_reference",
    "sigma",
    "q",
    "lambda1",
    "lambda2",
    "xi",
    "m",
    "kappa",
    "sample_size",
    "epochs",
    "steps_per_epoch",
    "learning_rate",
    "use_kappa_worst",
    "ranking",
    "max_bins",
    "min_per_bin",
    "train_family",
    "test_shifts",
    "grid",
    "num_retrains",
    "num_test_resamples",
    "seed",
    "out_dir",
    "selector",
    "extractor",
    "threads",
];

pub const FEATURE_NAMES: [&str; 7] = [
    "confidence",
    "one_hot",
    "distribution",
    "kde",
    "iforest",
    "knn",
    "representation",
];

/// A held-out shift before its seed is fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftDef {
    /// `None` is the unshifted test split.
    pub kind: Option<PerturbationKind>,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: TaskConfig,
    pub num_retrains: usize,
    pub num_test_resamples: usize,
    pub grid: Vec<f64>,
    pub shifts: Vec<ShiftDef>,
    pub seed: u64,
    /// Base model to load instead of fitting one.
    pub base_model: Option<PathBuf>,
    /// Trained selector to evaluate instead of retraining.
    pub selector: Option<PathBuf>,
    /// Extractor saved alongside `selector`.
    pub extractor: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub threads: Option<usize>,
}

fn default_shifts() -> Vec<ShiftDef> {
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
    .map(|&(k, intensity)| ShiftDef {
        kind: Some(k),
        intensity,
    })
    .collect()
}

fn bad(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, format!("cannot parse `{v}`")))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(bad(key, format!("expected a boolean, got `{v}`"))),
    }
}

fn kind(key: &str, v: &str) -> Result<PerturbationKind> {
    v.parse().map_err(|e: Error| bad(key, e.to_string()))
}

impl RunConfig {
    /// Defaults for the named task (`toy` or `mixture`).
    pub fn defaults(task: &str) -> Result<Self> {
        let task = match task {
            "toy" => TaskConfig::toy(ToySpec::new(0.5, 0.3)?),
            "mixture" => TaskConfig::mixture(MixtureSpec::symmetric(3, 8, 2.0, 1.0)),
            other => return Err(bad("task", format!("unknown task `{other}` (toy or mixture)"))),
        };
        Ok(RunConfig {
            task,
            num_retrains: 5,
            num_test_resamples: 5,
            grid: default_grid(),
            shifts: default_shifts(),
            seed: 0,
            base_model: None,
            selector: None,
            extractor: None,
            out_dir: PathBuf::from("out"),
            threads: None,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut pairs: BTreeMap<String, String> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(i + 1, format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(bad(k, "unknown key"));
            }
            if pairs.insert(k.to_string(), v.to_string()).is_some() {
                return Err(bad(k, "given more than once"));
            }
        }
        let mut cfg = Self::defaults(pairs.get("task").map_or("toy", String::as_str))?;
        let mut toy = match &cfg.task.task {
            crate::eval_harness::Task::Toy(s) => *s,
            _ => ToySpec::new(0.5, 0.3)?,
        };
        let (mut classes, mut dim, mut sep, mut scale) = (3usize, 8usize, 2.0f64, 1.0f64);
        let path = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };
        let t = &mut cfg.task;
        for (k, v) in &pairs {
            let (k, v) = (k.as_str(), v.as_str());
            match k {
                "task" => {}
                "toy.mix" => toy.mix = num(k, v)?,
                "toy.delta" => toy.delta = num(k, v)?,
                "mixture.classes" => classes = num(k, v)?,
                "mixture.dim" => dim = num(k, v)?,
                "mixture.separation" => sep = num(k, v)?,
                "mixture.scale" => scale = num(k, v)?,
                "n_fit" => t.n_fit = num(k, v)?,
                "n_val" => t.n_val = num(k, v)?,
                "n_train" => t.n_train = num(k, v)?,
                "n_tune" => t.n_tune = num(k, v)?,
                "n_test" => t.n_test = num(k, v)?,
                "base.hidden" => t.arch.hidden = list(k, v)?,
                "base.epochs" => t.arch.epochs = num(k, v)?,
                "base.batch_size" => t.arch.batch_size = num(k, v)?,
                "base.learning_rate" => t.arch.learning_rate = num(k, v)?,
                "base_model" => cfg.base_model = Some(path(v)),
                "features" => {
                    let names: Vec<&str> = v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
                    if let Some(n) = names.iter().find(|n| !FEATURE_NAMES.contains(n)) {
                        return Err(bad(k, format!("unknown feature block `{n}`")));
                    }
                    let on = |n: &str| names.contains(&n);
                    t.features.flags = FeatureFlags {
                        confidence: on("confidence"),
                        one_hot: on("one_hot"),
                        distribution: on("distribution"),
                        kde: on("kde"),
                        iforest: on("iforest"),
                        knn: on("knn"),
                        representation: on("representation"),
                    };
                }
                "knn_k" => t.features.knn_k = num(k, v)?,
                "iforest_trees" => t.features.iforest_trees = num(k, v)?,
                "iforest_subsample" => t.features.iforest_subsample = num(k, v)?,
                "max_dim" => t.features.max_dim = num(k, v)?,
                "max_reference" => t.features.max_reference = num(k, v)?,
                "sigma" => {
                    t.train.loss.kernel = KernelSpec::laplace(num(k, v)?).map_err(|e| bad(k, e.to_string()))?
                }
                "q" => t.train.loss.q = num(k, v)?,
                "lambda1" => t.train.loss.lambda1 = num(k, v)?,
                "lambda2" => t.train.loss.lambda2 = num(k, v)?,
                "xi" => t.train.xi = num(k, v)?,
                "m" => t.train.m = num(k, v)?,
                "kappa" => t.train.kappa = num(k, v)?,
                "sample_size" => t.train.sample_size = num(k, v)?,
                "epochs" => t.train.epochs = num(k, v)?,
                "steps_per_epoch" => t.train.steps_per_epoch = num(k, v)?,
                "learning_rate" => t.train.learning_rate = num(k, v)?,
                "use_kappa_worst" => t.train.use_kappa_worst = flag(k, v)?,
                "ranking" => {
                    t.train.ranking = match v {
                        "binned" => RankingMode::Binned,
                        "auc" => RankingMode::GridAuc(Vec::new()),
                        _ => return Err(bad(k, format!("expected `binned` or `auc`, got `{v}`"))),
                    }
                }
                "max_bins" => t.policy.max_bins = num(k, v)?,
                "min_per_bin" => t.policy.min_per_bin = num(k, v)?,
                "train_family" => {
                    let ranges = v
                        .split(',')
                        .map(|item| {
                            let parts: Vec<&str> = item.trim().split(':').collect();
                            if parts.len() != 3 {
                                return Err(bad(k, format!("expected kind:lo:hi, got `{item}`")));
                            }
                            Ok(KindRange::new(kind(k, parts[0])?, num(k, parts[1])?, num(k, parts[2])?))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    t.family.ranges = ranges;
                }
                "test_shifts" => {
                    cfg.shifts = v
                        .split(',')
                        .map(|item| {
                            let item = item.trim();
                            if item == "clean" {
                                return Ok(ShiftDef {
                                    kind: None,
                                    intensity: 0.0,
                                });
                            }
                            let (kd, x) = item
                                .split_once(':')
                                .ok_or_else(|| bad(k, format!("expected kind:intensity or clean, got `{item}`")))?;
                            Ok(ShiftDef {
                                kind: Some(kind(k, kd)?),
                                intensity: num(k, x)?,
                            })
                        })
                        .collect::<Result<_>>()?;
                }
                "grid" => cfg.grid = list(k, v)?,
                "num_retrains" => cfg.num_retrains = num(k, v)?,
                "num_test_resamples" => cfg.num_test_resamples = num(k, v)?,
                "seed" => cfg.seed = num(k, v)?,
                "out_dir" => cfg.out_dir = path(v),
                "selector" => cfg.selector = Some(path(v)),
                "extractor" => cfg.extractor = Some(path(v)),
                "threads" => cfg.threads = Some(num(k, v)?),
                _ => unreachable!("key list and match arms disagree: {k}"),
            }
        }
        if let RankingMode::GridAuc(g) = &mut t.train.ranking {
            *g = cfg.grid.clone();
        }
        match &mut t.task {
            crate::eval_harness::Task::Toy(s) => {
                toy.validate().map_err(|e| bad("toy.delta", e.to_string()))?;
                *s = toy;
            }
            crate::eval_harness::Task::Mixture(s) => {
                *s = MixtureSpec::symmetric(classes, dim, sep, scale);
                s.validate().map_err(|e| bad("mixture.classes", e.to_string()))?;
                t.family.num_groups = classes;
            }
        }
        cfg.task_config().validate().map_err(|e| bad("config", e.to_string()))?;
        cfg.trial_plan().validate(&cfg.task.family).map_err(|e| bad("test_shifts", e.to_string()))?;
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Replaces the step budget with exactly `steps` optimizer steps.
    pub fn with_steps(mut self, steps: usize) -> Self {
        self.task.train.epochs = 1;
        self.task.train.steps_per_epoch = steps;
        self
    }

    pub fn task_config(&self) -> TaskConfig {
        TaskConfig {
            seed: self.seed,
            ..self.task.clone()
        }
    }

    pub fn trial_plan(&self) -> TrialPlan {
        let shifts = self
            .shifts
            .iter()
            .enumerate()
            .map(|(i, d)| match d.kind {
                None => TestShift::clean(),
                Some(k) => TestShift::perturbed(PerturbationSpec::new(k, d.intensity, derive_seed(self.seed, 100 + i as u64))),
            })
            .collect();
        TrialPlan {
            num_retrains: self.num_retrains,
            num_test_resamples: self.num_test_resamples,
            shifts,
            grid: self.grid.clone(),
            seed: self.seed,
        }
    }

    /// Training configuration of the selector `cmd_train` produces; the same
    /// one the first retrain of `cmd_eval` uses.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, 0),
            ..self.task.train.clone()
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_base_model(path: &Path) -> Result<BaseModel> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "base model file not found"),
        ));
    }
    BaseModel::load(path).map_err(|e| e.in_module("basemodel"))
}

/// Writes `train.csv`, `tune.csv` and `test.csv` and returns each path with
/// its row count.
pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<Vec<(PathBuf, usize)>> {
    ensure_dir(out)?;
    let task = cfg.task_config();
    task.validate()?;
    let splits = [
        ("train.csv", task.n_train, 3),
        ("tune.csv", task.n_tune, 4),
        ("test.csv", task.n_test, 5),
    ];
    let mut written = Vec::new();
    for (name, n, stream) in splits {
        let data = task
            .task
            .sample(n, derive_seed(task.seed, stream))
            .map_err(|e| e.in_module("synthdata"))?;
        let path = out.join(name);
        data.write_csv(&path)?;
        written.push((path, data.len()));
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub selector_path: PathBuf,
    pub report_path: PathBuf,
    pub steps: usize,
    pub final_loss: Option<f64>,
}

/// Fits (or loads) the base model and the extractor, trains one selector,
/// and writes `selector.txt`, `extractor.txt`, `base_model.txt` and
/// `train_report.csv`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    let model = cfg.base_model.as_deref().map(load_base_model).transpose()?;
    ensure_dir(out)?;
    let task = cfg.task_config();
    let prep = prepare(&task, model)?;
    let (selector, report) = train(
        &prep.model,
        &prep.extractor,
        &prep.train,
        &prep.tune,
        &task.family,
        &cfg.train_config(),
    )
    .map_err(|e| e.in_module("robust_trainer"))?;
    let selector_path = out.join("selector.txt");
    let report_path = out.join("train_report.csv");
    selector.save(&selector_path)?;
    prep.extractor.save(&out.join("extractor.txt"))?;
    prep.model.save(&out.join("base_model.txt"))?;
    write(&report_path, &report.to_csv())?;
    Ok(TrainOutcome {
        selector_path,
        report_path,
        steps: report.records.len(),
        final_loss: report.records.last().map(|r| r.loss),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub curves_path: PathBuf,
    pub aucs_path: PathBuf,
    pub trials_path: PathBuf,
    pub aggregate_path: PathBuf,
    pub flagged: usize,
}

/// Runs the trial protocol and writes `curves.csv`
/// (`method,coverage,s_bce2,s_bce_inf,s_brier,s_risk`, the mean over trials
/// and shifts), `aucs.csv` (`method,metric,auc` of those mean curves),
/// `trials.csv` (long form) and `aggregate.csv` (per-trial AUC mean and
/// spread).
///
/// With `selector` set, that selector (plus the extractor and base model
/// saved next to it) is evaluated instead of training new ones.
pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<EvalOutcome> {
    let task = cfg.task_config();
    let plan = cfg.trial_plan();
    let table = match &cfg.selector {
        Some(sel_path) => {
            let dir = sel_path.parent().map(Path::to_path_buf).unwrap_or_default();
            let selector = HardSelector::load(sel_path).map_err(|e| e.in_module("selector"))?;
            let ex_path = cfg.extractor.clone().unwrap_or_else(|| dir.join("extractor.txt"));
            let extractor = FeatureExtractor::load(&ex_path).map_err(|e| e.in_module("metafeatures"))?;
            let model_path = cfg.base_model.clone().unwrap_or_else(|| dir.join("base_model.txt"));
            let model = load_base_model(&model_path)?;
            if selector.soft.input_dim() != extractor.output_dim() {
                return Err(Error::param("selector input does not match the extractor output").in_module("selector"));
            }
            let mut prep = prepare(&task, Some(model))?;
            prep.extractor = extractor;
            evaluate_selectors(&plan, &task, &prep, vec![selector])
        }
        None => run_trials(&plan, &task),
    }
    .map_err(|e| e.in_module("eval_harness"))?;
    ensure_dir(out)?;
    let mean = table.mean_curves()?;
    let outcome = EvalOutcome {
        curves_path: out.join("curves.csv"),
        aucs_path: out.join("aucs.csv"),
        trials_path: out.join("trials.csv"),
        aggregate_path: out.join("aggregate.csv"),
        flagged: table.flagged.len(),
    };
    write(&outcome.curves_path, &curves_to_csv(&mean))?;
    write(&outcome.aucs_path, &aucs_to_csv(&mean))?;
    write(&outcome.trials_path, &table.rows_csv())?;
    write(&outcome.aggregate_path, &table.aggregate_csv())?;
    Ok(outcome)
}
