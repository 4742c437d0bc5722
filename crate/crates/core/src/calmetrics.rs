//! Binned calibration error, Brier score, selective risk and coverage
//! sweeps with normalized AUC summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::kernelstats::ScoredBatch;
use crate::scalar::Scalar;
use crate::selector::threshold_rule;

/// Equal-mass binning: `m = min(max_bins, floor(n / min_per_bin))` bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinningPolicy {
    pub max_bins: usize,
    pub min_per_bin: usize,
}

impl Default for BinningPolicy {
    fn default() -> Self {
        BinningPolicy {
            max_bins: 15,
            min_per_bin: 25,
        }
    }
}

impl BinningPolicy {
    pub fn bins_for(&self, n: usize) -> Result<usize> {
        let m = self.max_bins.min(n / self.min_per_bin.max(1));
        if m == 0 {
            return Err(Error::InsufficientData {
                context: "equal-mass binning".into(),
                needed: self.min_per_bin,
                got: n,
            });
        }
        Ok(m)
    }
}

/// Aggregation of per-bin gaps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CalibrationNorm {
    /// `(mean gap^q)^(1/q)`.
    Lq(f64),
    /// Largest gap.
    Max,
}

impl CalibrationNorm {
    pub const L2: CalibrationNorm = CalibrationNorm::Lq(2.0);
}

/// Sizes of `m` equal-mass bins over `n` items; the first `n % m` bins hold
/// one extra item.
pub fn equal_mass_bin_sizes(n: usize, m: usize) -> Vec<usize> {
    let base = n / m;
    let extra = n % m;
    (0..m).map(|b| base + usize::from(b < extra)).collect()
}

/// Equal-mass binned calibration error over the selected rows of a hard
/// batch, with the bin count taken from `policy`.
pub fn binned_calibration_error<T: Scalar>(
    batch: &ScoredBatch<T>,
    norm: CalibrationNorm,
    policy: &BinningPolicy,
) -> Result<T> {
    batch.require_hard()?;
    let n = batch.selected_count();
    if n < policy.min_per_bin {
        return Err(Error::InsufficientData {
            context: "selective calibration error".into(),
            needed: policy.min_per_bin,
            got: n,
        });
    }
    binned_calibration_error_with_bins(batch, norm, policy.bins_for(n)?)
}

/// As [`binned_calibration_error`] with an explicit bin count.
pub fn binned_calibration_error_with_bins<T: Scalar>(
    batch: &ScoredBatch<T>,
    norm: CalibrationNorm,
    m: usize,
) -> Result<T> {
    batch.require_hard()?;
    let mut idx: Vec<usize> = (0..batch.len()).filter(|&i| batch.g()[i] == T::one()).collect();
    let n = idx.len();
    if m == 0 || n < m {
        return Err(Error::InsufficientData {
            context: "equal-mass binning".into(),
            needed: m.max(1),
            got: n,
        });
    }
    let r = batch.r();
    let y = batch.y();
    // Stable: ties keep index order.
    idx.sort_by(|a, b| r[*a].partial_cmp(&r[*b]).expect("confidences are not NaN"));
    let mut gaps = Vec::with_capacity(m);
    let mut start = 0;
    for size in equal_mass_bin_sizes(n, m) {
        let bin = &idx[start..start + size];
        start += size;
        let cnt = T::count(size);
        let mean_y = bin.iter().map(|&i| y[i]).sum::<T>() / cnt;
        let mean_r = bin.iter().map(|&i| r[i]).sum::<T>() / cnt;
        gaps.push((mean_y - mean_r).abs());
    }
    Ok(match norm {
        CalibrationNorm::Max => gaps.into_iter().fold(T::zero(), T::max),
        CalibrationNorm::Lq(q) => {
            if !(q >= 1.0) {
                return Err(Error::param(format!("q must be >= 1, got {q}")));
            }
            if q == 2.0 {
                let mean = gaps.iter().map(|g| *g * *g).sum::<T>() / T::count(m);
                return Ok(mean.sqrt());
            }
            let q = T::lit(q);
            let mean = gaps.iter().map(|g| g.powf(q)).sum::<T>() / T::count(m);
            mean.powf(T::one() / q)
        }
    })
}

/// Mean squared error between confidence and label over selected rows
/// (or all rows when `selective` is false).
pub fn brier<T: Scalar>(batch: &ScoredBatch<T>, selective: bool) -> Result<T> {
    if selective {
        batch.require_hard()?;
    }
    let mut total = T::zero();
    let mut count = 0usize;
    for i in 0..batch.len() {
        if !selective || batch.g()[i] == T::one() {
            let d = batch.r()[i] - batch.y()[i];
            total += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::DegenerateSelection("Brier score over an empty selection".into()));
    }
    Ok(total / T::count(count))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskCoverage<T> {
    /// Mean 0/1 error over selected rows; `None` when nothing is selected.
    pub risk: Option<T>,
    pub coverage: T,
}

/// Coverage and selective risk for a hard batch whose `y` is top-label
/// correctness.
pub fn selective_risk_and_coverage<T: Scalar>(batch: &ScoredBatch<T>) -> Result<RiskCoverage<T>> {
    batch.require_hard()?;
    if batch.is_empty() {
        return Err(Error::param("empty batch"));
    }
    let selected = batch.selected_count();
    let coverage = T::count(selected) / T::count(batch.len());
    let risk = (selected > 0).then(|| {
        let errors = (0..batch.len())
            .filter(|&i| batch.g()[i] == T::one() && batch.y()[i] == T::zero())
            .count();
        T::count(errors) / T::count(selected)
    });
    Ok(RiskCoverage { risk, coverage })
}

/// Per-example confidence reductions for evaluation.
///
/// Two-class outputs use the binary view (`r = p₁`, `y` the label), larger
/// label spaces the top-label view (`r = max p`, `y` = correctness).
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions<T> {
    pub r: Vec<T>,
    pub y: Vec<T>,
    pub correct: Vec<bool>,
}

/// Index of the largest probability; the first one on ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

impl<T: Scalar> Predictions<T> {
    pub fn from_probabilities(probs: &[Vec<f64>], labels: &[usize]) -> Result<Self> {
        if probs.len() != labels.len() {
            return Err(Error::param("one label per prediction required"));
        }
        let mut r = Vec::with_capacity(probs.len());
        let mut y = Vec::with_capacity(probs.len());
        let mut correct = Vec::with_capacity(probs.len());
        for (p, &label) in probs.iter().zip(labels) {
            let top = argmax(p);
            let ok = top == label;
            if p.len() == 2 {
                r.push(T::lit(p[1]));
                y.push(if label == 1 { T::one() } else { T::zero() });
            } else {
                r.push(T::lit(p[top]));
                y.push(if ok { T::one() } else { T::zero() });
            }
            correct.push(ok);
        }
        Ok(Predictions { r, y, correct })
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn calibration_batch(&self, selected: &[bool]) -> Result<ScoredBatch<T>> {
        ScoredBatch::from_bits(self.r.clone(), &self.y.iter().map(|v| *v == T::one()).collect::<Vec<_>>(), selected)
    }

    pub fn correctness_batch(&self, selected: &[bool]) -> Result<ScoredBatch<T>> {
        let r = self.r.clone();
        ScoredBatch::from_bits(r, &self.correct, selected)
    }
}

pub const METRICS: [&str; 4] = ["s_bce2", "s_bce_inf", "s_brier", "s_risk"];

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow<T> {
    /// Target coverage ξ.
    pub coverage: f64,
    /// Fraction actually selected at the tuned threshold.
    pub achieved: f64,
    pub s_bce2: T,
    pub s_bce_inf: T,
    pub s_brier: T,
    pub s_risk: T,
}

impl<T: Scalar> CurveRow<T> {
    pub fn metric(&self, name: &str) -> Option<T> {
        match name {
            "s_bce2" => Some(self.s_bce2),
            "s_bce_inf" => Some(self.s_bce_inf),
            "s_brier" => Some(self.s_brier),
            "s_risk" => Some(self.s_risk),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageCurve<T> {
    pub method: String,
    pub rows: Vec<CurveRow<T>>,
    pub aucs: BTreeMap<String, T>,
}

/// Trapezoid area under `values` over `grid`, divided by the grid span so a
/// constant metric has AUC equal to that constant.
pub fn normalized_auc<T: Scalar>(grid: &[f64], values: &[T]) -> Result<T> {
    if grid.len() != values.len() || grid.is_empty() {
        return Err(Error::param("AUC needs one value per grid point"));
    }
    if grid.len() == 1 {
        return Ok(values[0]);
    }
    let mut area = T::zero();
    for i in 1..grid.len() {
        let w = T::lit(grid[i] - grid[i - 1]);
        area += w * (values[i] + values[i - 1]) / T::lit(2.0);
    }
    Ok(area / T::lit(grid[grid.len() - 1] - grid[0]))
}

/// Default coverage grid {0.05, 0.10, ..., 1.00}.
pub fn default_grid() -> Vec<f64> {
    (1..=20).map(|i| i as f64 * 0.05).collect()
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::param("coverage grid is empty"));
    }
    if grid.iter().any(|x| !(*x >= 0.05 - 1e-12 && *x <= 1.0)) {
        return Err(Error::param("coverage grid must lie within [0.05, 1]"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::param("coverage grid must be strictly increasing"));
    }
    Ok(())
}

impl<T: Scalar> CoverageCurve<T> {
    /// Rebuilds the AUC map from `rows`.
    pub fn summarize(method: &str, rows: Vec<CurveRow<T>>) -> Result<Self> {
        let grid: Vec<f64> = rows.iter().map(|r| r.coverage).collect();
        let mut aucs = BTreeMap::new();
        for m in METRICS {
            let vals: Vec<T> = rows.iter().map(|r| r.metric(m).unwrap()).collect();
            aucs.insert(m.to_string(), normalized_auc(&grid, &vals)?);
        }
        Ok(CoverageCurve {
            method: method.to_string(),
            rows,
            aucs,
        })
    }
}

/// Selective metrics at one selection mask.
pub fn selective_metrics<T: Scalar>(
    preds: &Predictions<T>,
    selected: &[bool],
    policy: &BinningPolicy,
) -> Result<[T; 4]> {
    let calib = preds.calibration_batch(selected)?;
    let bce2 = binned_calibration_error(&calib, CalibrationNorm::L2, policy)?;
    let bce_inf = binned_calibration_error(&calib, CalibrationNorm::Max, policy)?;
    let s_brier = brier(&calib, true)?;
    let rc = selective_risk_and_coverage(&preds.correctness_batch(selected)?)?;
    let s_risk = rc
        .risk
        .ok_or_else(|| Error::DegenerateSelection("nothing selected".into()))?;
    Ok([bce2, bce_inf, s_brier, s_risk])
}

/// Thresholds `scores` at every coverage level of `grid` (higher scores are
/// kept first) and records the selective metrics.
pub fn sweep_curve<T: Scalar>(
    method: &str,
    scores: &[T],
    preds: &Predictions<T>,
    grid: &[f64],
    policy: &BinningPolicy,
) -> Result<CoverageCurve<T>> {
    validate_grid(grid)?;
    if scores.len() != preds.len() {
        return Err(Error::param("one score per prediction required"));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &xi in grid {
        let tau = threshold_rule(xi, scores)?;
        let selected: Vec<bool> = scores.iter().map(|s| *s >= tau).collect();
        let achieved = selected.iter().filter(|b| **b).count() as f64 / selected.len() as f64;
        let [s_bce2, s_bce_inf, s_brier, s_risk] =
            selective_metrics(preds, &selected, policy).map_err(|e| match e {
                Error::InsufficientData { needed, got, .. } => Error::InsufficientData {
                    context: format!("coverage {xi}"),
                    needed,
                    got,
                },
                other => other,
            })?;
        rows.push(CurveRow {
            coverage: xi,
            achieved,
            s_bce2,
            s_bce_inf,
            s_brier,
            s_risk,
        });
    }
    CoverageCurve::summarize(method, rows)
}

pub const CURVE_HEADER: &str = "method,coverage,s_bce2,s_bce_inf,s_brier,s_risk";
pub const AUC_HEADER: &str = "method,metric,auc";

pub fn curves_to_csv<T: Scalar>(curves: &[CoverageCurve<T>]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for c in curves {
        for r in &c.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                c.method, r.coverage, r.s_bce2, r.s_bce_inf, r.s_brier, r.s_risk
            );
        }
    }
    out
}

pub fn aucs_to_csv<T: Scalar>(curves: &[CoverageCurve<T>]) -> String {
    let mut out = String::from(AUC_HEADER);
    out.push('\n');
    for c in curves {
        for m in METRICS {
            if let Some(v) = c.aucs.get(m) {
                let _ = writeln!(out, "{},{},{}", c.method, m, v);
            }
        }
    }
    out
}
