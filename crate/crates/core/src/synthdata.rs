//! Synthetic labeled distributions and the dataset-level perturbation family.
//!
//! Two tasks are provided: the two-feature toy whose second coordinate
//! switches the label model between calibrated and shifted-by-`delta`, and a
//! Gaussian class mixture. Perturbations act on a whole dataset at once.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub(crate) fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Child seed for stream `stream` of `seed` (splitmix64 finalizer), so that
/// nested loops get independent, reproducible generators.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n` row indices out of `len`: without replacement when `n <= len`, with
/// replacement otherwise.
pub fn draw_indices<R: Rng + ?Sized>(len: usize, n: usize, rng: &mut R) -> Vec<usize> {
    if n <= len {
        rand::seq::index::sample(rng, len, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..len)).collect()
    }
}

/// Indices of a seeded with-replacement resample of size `len`.
pub fn bootstrap_indices(len: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_for(seed);
    (0..len).map(|_| rng.random_range(0..len)).collect()
}

/// Parameters of the toy task. `mix` is P(X₂ = 1), `delta` the label offset
/// applied on the X₂ = 0 branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToySpec {
    pub mix: f64,
    pub delta: f64,
}

impl ToySpec {
    pub fn new(mix: f64, delta: f64) -> Result<Self> {
        let spec = ToySpec { mix, delta };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mix > 0.0 && self.mix < 1.0) {
            return Err(Error::param(format!("toy mix must lie in (0,1), got {}", self.mix)));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::param(format!(
                "toy delta must lie in (0,1], got {}",
                self.delta
            )));
        }
        Ok(())
    }

    /// P(Y = 1 | X₁ = x1, X₂ = x2).
    pub fn conditional(&self, x1: f64, x2: f64) -> f64 {
        if x2 >= 0.5 {
            x1
        } else {
            (x1 + self.delta).min(1.0)
        }
    }

    /// Marginal P(Y = 1 | X₁ = x1), averaging over X₂.
    pub fn marginal_conditional(&self, x1: f64) -> f64 {
        self.mix * self.conditional(x1, 1.0) + (1.0 - self.mix) * self.conditional(x1, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub class_means: Vec<Vec<f64>>,
    /// Isotropic covariance multiplier; per-coordinate std is its square root.
    pub class_covariance_scale: f64,
    pub class_priors: Vec<f64>,
}

impl MixtureSpec {
    /// Class means at `separation` along alternating signed axes, equal priors.
    pub fn symmetric(num_classes: usize, dim: usize, separation: f64, covariance_scale: f64) -> Self {
        let class_means = (0..num_classes)
            .map(|c| {
                let mut m = vec![0.0; dim];
                let axis = (c / 2) % dim.max(1);
                let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
                if dim > 0 {
                    m[axis] = sign * separation;
                }
                m
            })
            .collect();
        MixtureSpec {
            num_classes,
            dim,
            class_means,
            class_covariance_scale: covariance_scale,
            class_priors: vec![1.0 / num_classes as f64; num_classes],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::param("mixture needs at least two classes"));
        }
        if self.dim < 1 {
            return Err(Error::param("mixture dimension must be at least 1"));
        }
        if self.class_means.len() != self.num_classes {
            return Err(Error::param(format!(
                "{} class means for {} classes",
                self.class_means.len(),
                self.num_classes
            )));
        }
        if let Some((c, m)) = self
            .class_means
            .iter()
            .enumerate()
            .find(|(_, m)| m.len() != self.dim)
        {
            return Err(Error::param(format!(
                "mean of class {c} has dimension {}, expected {}",
                m.len(),
                self.dim
            )));
        }
        if !(self.class_covariance_scale >= 0.0 && self.class_covariance_scale.is_finite()) {
            return Err(Error::param("covariance scale must be finite and non-negative"));
        }
        check_probability_vector(&self.class_priors, "class priors")?;
        if self.class_priors.len() != self.num_classes {
            return Err(Error::param("one prior per class required"));
        }
        Ok(())
    }
}

fn check_probability_vector(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() || p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::param(format!("{what} must be non-negative and finite")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::param(format!("{what} sum to {total}, expected 1")));
    }
    Ok(())
}

/// How rows are assigned to groups for group resampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    /// Group = rounded value of a feature column, clamped to `0..groups`.
    Column { index: usize, groups: usize },
    /// Group = class label.
    Label,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Clean,
    Perturbed(PerturbationSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    dim: usize,
    num_classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    grouping: Grouping,
    provenance: Provenance,
}

impl LabeledDataset {
    pub fn new(
        dim: usize,
        num_classes: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
        grouping: Grouping,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::param("dataset must contain at least one row"));
        }
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::param(format!(
                "{} feature values do not form {} rows of dimension {}",
                features.len(),
                labels.len(),
                dim
            )));
        }
        if let Some(l) = labels.iter().find(|l| **l >= num_classes) {
            return Err(Error::param(format!("label {l} outside 0..{num_classes}")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("feature values must be finite"));
        }
        if let Grouping::Column { index, groups } = grouping {
            if index >= dim || groups == 0 {
                return Err(Error::param("grouping column out of range"));
            }
        }
        Ok(LabeledDataset {
            dim,
            num_classes,
            features,
            labels,
            grouping,
            provenance: Provenance::Clean,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.features.chunks_exact(self.dim)
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn grouping(&self) -> Grouping {
        self.grouping
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn num_groups(&self) -> usize {
        match self.grouping {
            Grouping::Column { groups, .. } => groups,
            Grouping::Label => self.num_classes,
        }
    }

    pub fn group_of(&self, i: usize) -> usize {
        match self.grouping {
            Grouping::Column { index, groups } => {
                let v = self.row(i)[index].round();
                if v <= 0.0 {
                    0
                } else {
                    (v as usize).min(groups - 1)
                }
            }
            Grouping::Label => self.labels[i],
        }
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut means = vec![0.0; self.dim];
        for row in self.rows() {
            for (m, v) in means.iter_mut().zip(row) {
                *m += v;
            }
        }
        let n = self.len() as f64;
        means.iter_mut().for_each(|m| *m /= n);
        means
    }

    /// Rows at `indices`, in order; provenance is kept.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::param("selection must be non-empty"));
        }
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::param(format!("row index {i} out of range")));
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Ok(LabeledDataset {
            features,
            labels,
            provenance: self.provenance.clone(),
            ..*self
        })
    }

    /// `n` rows drawn without replacement when possible, with replacement otherwise.
    pub fn subsample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Self> {
        self.select(&draw_indices(self.len(), n, rng))
    }

    /// Bootstrap resample at the original size.
    pub fn bootstrap(&self, seed: u64) -> Result<Self> {
        self.select(&bootstrap_indices(self.len(), seed))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.len() * (self.dim + 1) * 12);
        for j in 0..self.dim {
            out.push_str(&format!("x{j},"));
        }
        out.push_str("y\n");
        for (row, label) in self.rows().zip(&self.labels) {
            for v in row {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{label}\n"));
        }
        out
    }

    /// Parses the CSV layout written by [`LabeledDataset::to_csv`]. The
    /// number of classes is taken as `max(label) + 1`, at least 2.
    pub fn from_csv(text: &str, grouping: Grouping) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "empty file"))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let dim = cols.len().saturating_sub(1);
        let expected: Vec<String> = (0..dim).map(|j| format!("x{j}")).chain(["y".into()]).collect();
        if dim == 0 || cols != expected {
            return Err(Error::parse(1, format!("unexpected header `{header}`")));
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (ln, line) in lines {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != dim + 1 {
                return Err(Error::parse(ln + 1, format!("expected {} fields", dim + 1)));
            }
            for f in &fields[..dim] {
                let v: f64 = f
                    .parse()
                    .map_err(|_| Error::parse(ln + 1, format!("bad number `{f}`")))?;
                features.push(v);
            }
            let y: usize = fields[dim]
                .parse()
                .map_err(|_| Error::parse(ln + 1, format!("bad label `{}`", fields[dim])))?;
            labels.push(y);
        }
        let k = labels.iter().max().map_or(2, |m| (m + 1).max(2));
        LabeledDataset::new(dim, k, features, labels, grouping)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, grouping: Grouping) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, grouping)
    }
}

/// Draws `n` rows of the toy task. Features are `(X₁, X₂)` with
/// X₁ ~ Unif(0,1) and X₂ ~ Bern(mix).
pub fn sample_toy(spec: &ToySpec, n: usize, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::param("sample size must be at least 1"));
    }
    let mut rng = rng_for(seed);
    let mut features = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x1: f64 = rng.random();
        let x2 = if rng.random::<f64>() < spec.mix { 1.0 } else { 0.0 };
        let p = spec.conditional(x1, x2);
        let y = usize::from(rng.random::<f64>() < p);
        features.extend_from_slice(&[x1, x2]);
        labels.push(y);
    }
    LabeledDataset::new(2, 2, features, labels, Grouping::Column { index: 1, groups: 2 })
}

pub fn sample_mixture(spec: &MixtureSpec, n: usize, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::param("sample size must be at least 1"));
    }
    let mut rng = rng_for(seed);
    let classes = WeightedIndex::new(&spec.class_priors)
        .map_err(|e| Error::param(format!("class priors: {e}")))?;
    let std = spec.class_covariance_scale.sqrt();
    let mut features = Vec::with_capacity(spec.dim * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = classes.sample(&mut rng);
        for m in &spec.class_means[c] {
            let z: f64 = rng.sample(StandardNormal);
            features.push(m + std * z);
        }
        labels.push(c);
    }
    LabeledDataset::new(spec.dim, spec.num_classes, features, labels, Grouping::Label)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PerturbationKind {
    FeatureNoise,
    FeatureScale,
    Rotation,
    MeanShift,
    GroupResample,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 5] = [
        PerturbationKind::FeatureNoise,
        PerturbationKind::FeatureScale,
        PerturbationKind::Rotation,
        PerturbationKind::MeanShift,
        PerturbationKind::GroupResample,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::FeatureNoise => "feature_noise",
            PerturbationKind::FeatureScale => "feature_scale",
            PerturbationKind::Rotation => "rotation",
            PerturbationKind::MeanShift => "mean_shift",
            PerturbationKind::GroupResample => "group_resample",
        }
    }

    /// Inclusive range of intensities the kind accepts at all. Noise is a
    /// standard deviation, scale a multiplier, rotation an angle in radians,
    /// mean shift a distance, and group resampling a mixing weight between
    /// uniform and random group weights.
    pub fn legal_range(self) -> (f64, f64) {
        match self {
            PerturbationKind::FeatureNoise => (0.0, f64::INFINITY),
            PerturbationKind::FeatureScale => (f64::MIN_POSITIVE, f64::INFINITY),
            PerturbationKind::Rotation => (0.0, std::f64::consts::PI),
            PerturbationKind::MeanShift => (0.0, f64::INFINITY),
            PerturbationKind::GroupResample => (0.0, 1.0),
        }
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PerturbationKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::param(format!("unknown perturbation kind `{s}`")))
    }
}

/// One dataset-level shift function.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub intensity: f64,
    pub seed: u64,
    pub group_weights: Option<Vec<f64>>,
}

impl PerturbationSpec {
    pub fn new(kind: PerturbationKind, intensity: f64, seed: u64) -> Self {
        PerturbationSpec {
            kind,
            intensity,
            seed,
            group_weights: None,
        }
    }

    pub fn with_group_weights(mut self, weights: Vec<f64>) -> Self {
        self.group_weights = Some(weights);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.kind.legal_range();
        if !(self.intensity >= lo && self.intensity <= hi) || self.intensity.is_nan() {
            return Err(Error::param(format!(
                "{} intensity {} outside [{lo}, {hi}]",
                self.kind, self.intensity
            )));
        }
        if let Some(w) = &self.group_weights {
            check_probability_vector(w, "group weights")?;
        }
        if self.kind == PerturbationKind::GroupResample && self.group_weights.is_none() {
            return Err(Error::param("group_resample requires group weights"));
        }
        Ok(())
    }
}

impl fmt::Display for PerturbationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "kind={};intensity={};seed={}", self.kind, self.intensity, self.seed)?;
        if let Some(w) = &self.group_weights {
            let parts: Vec<String> = w.iter().map(|v| v.to_string()).collect();
            write!(f, ";group_weights={}", parts.join(","))?;
        }
        Ok(())
    }
}

impl FromStr for PerturbationSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut kind = None;
        let mut intensity = None;
        let mut seed = None;
        let mut group_weights = None;
        for part in s.trim().split(';').filter(|p| !p.trim().is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::param(format!("expected key=value, got `{part}`")))?;
            let value = value.trim();
            match key.trim() {
                "kind" => kind = Some(value.parse()?),
                "intensity" => {
                    intensity = Some(
                        value
                            .parse::<f64>()
                            .map_err(|_| Error::param(format!("bad intensity `{value}`")))?,
                    )
                }
                "seed" => {
                    seed = Some(
                        value
                            .parse::<u64>()
                            .map_err(|_| Error::param(format!("bad seed `{value}`")))?,
                    )
                }
                "group_weights" => {
                    let w = value
                        .split(',')
                        .map(|v| v.trim().parse::<f64>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| Error::param(format!("bad group weights `{value}`")))?;
                    group_weights = Some(w);
                }
                other => return Err(Error::param(format!("unknown perturbation field `{other}`"))),
            }
        }
        let spec = PerturbationSpec {
            kind: kind.ok_or_else(|| Error::param("perturbation missing `kind`"))?,
            intensity: intensity.ok_or_else(|| Error::param("perturbation missing `intensity`"))?,
            seed: seed.ok_or_else(|| Error::param("perturbation missing `seed`"))?,
            group_weights,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Applies `t` to every row of `data`, returning a new dataset.
///
/// Rotation turns a seeded coordinate plane about the column means; mean
/// shift translates along a seeded unit direction.
pub fn apply_perturbation(data: &LabeledDataset, t: &PerturbationSpec) -> Result<LabeledDataset> {
    t.validate()?;
    let mut rng = rng_for(t.seed);
    let d = data.dim();
    let mut out = match t.kind {
        PerturbationKind::FeatureNoise => {
            let mut out = data.clone();
            if t.intensity > 0.0 {
                for v in &mut out.features {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += t.intensity * z;
                }
            }
            out
        }
        PerturbationKind::FeatureScale => {
            let mut out = data.clone();
            out.features.iter_mut().for_each(|v| *v *= t.intensity);
            out
        }
        PerturbationKind::Rotation => {
            if d < 2 {
                return Err(Error::param("rotation needs at least two feature dimensions"));
            }
            let a = rng.random_range(0..d);
            let b = (a + 1 + rng.random_range(0..d - 1)) % d;
            let means = data.column_means();
            let (sin, cos) = t.intensity.sin_cos();
            let mut out = data.clone();
            for row in out.features.chunks_exact_mut(d) {
                let u = row[a] - means[a];
                let v = row[b] - means[b];
                row[a] = means[a] + cos * u - sin * v;
                row[b] = means[b] + sin * u + cos * v;
            }
            out
        }
        PerturbationKind::MeanShift => {
            let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                dir.iter_mut().for_each(|v| *v /= norm);
            } else {
                dir[0] = 1.0;
            }
            let mut out = data.clone();
            for row in out.features.chunks_exact_mut(d) {
                for (x, u) in row.iter_mut().zip(&dir) {
                    *x += t.intensity * u;
                }
            }
            out
        }
        PerturbationKind::GroupResample => {
            let idx = group_resample_indices(data, t, &mut rng)?;
            data.select(&idx)?
        }
    };
    out.provenance = Provenance::Perturbed(t.clone());
    Ok(out)
}

/// Row indices drawn by a group-resampling perturbation: the same rows
/// [`apply_perturbation`] would select. `None` for kinds that transform
/// features instead of selecting rows.
pub fn resample_indices(data: &LabeledDataset, t: &PerturbationSpec) -> Result<Option<Vec<usize>>> {
    t.validate()?;
    if t.kind != PerturbationKind::GroupResample {
        return Ok(None);
    }
    group_resample_indices(data, t, &mut rng_for(t.seed)).map(Some)
}

fn group_resample_indices<R: Rng>(data: &LabeledDataset, t: &PerturbationSpec, rng: &mut R) -> Result<Vec<usize>> {
    let weights = t
        .group_weights
        .as_ref()
        .ok_or_else(|| Error::param("group_resample requires group weights"))?;
    let groups = data.num_groups();
    if weights.len() != groups {
        return Err(Error::param(format!(
            "{} group weights for {} groups",
            weights.len(),
            groups
        )));
    }
    let mut members = vec![Vec::new(); groups];
    for i in 0..data.len() {
        members[data.group_of(i)].push(i);
    }
    // Empty groups cannot be drawn from; their weight is dropped.
    let effective: Vec<f64> = weights
        .iter()
        .zip(&members)
        .map(|(w, m)| if m.is_empty() { 0.0 } else { *w })
        .collect();
    let picker = WeightedIndex::new(&effective)
        .map_err(|_| Error::param("group weights put no mass on any non-empty group"))?;
    Ok((0..data.len())
        .map(|_| {
            let g = picker.sample(rng);
            members[g][rng.random_range(0..members[g].len())]
        })
        .collect())
}

/// Sampling range for one perturbation kind.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KindRange {
    pub kind: PerturbationKind,
    pub lo: f64,
    pub hi: f64,
}

impl KindRange {
    pub fn new(kind: PerturbationKind, lo: f64, hi: f64) -> Self {
        KindRange { kind, lo, hi }
    }
}

/// The family of perturbations sampled during training or held out for
/// evaluation. Intensities are drawn uniformly within each kind's range.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationFamily {
    pub ranges: Vec<KindRange>,
    /// Number of groups used when drawing group-resampling weights.
    pub num_groups: usize,
}

impl PerturbationFamily {
    /// Default ranges for every kind.
    pub fn full(num_groups: usize) -> Self {
        use PerturbationKind::*;
        PerturbationFamily {
            ranges: vec![
                KindRange::new(FeatureNoise, 0.0, 1.0),
                KindRange::new(FeatureScale, 0.5, 2.0),
                KindRange::new(Rotation, 0.0, std::f64::consts::FRAC_PI_4),
                KindRange::new(MeanShift, 0.0, 2.0),
                KindRange::new(GroupResample, 0.0, 1.0),
            ],
            num_groups,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ranges.is_empty() {
            return Err(Error::param("perturbation family has no kinds"));
        }
        for r in &self.ranges {
            let (lo, hi) = r.kind.legal_range();
            if !(r.lo <= r.hi && r.lo >= lo && r.hi <= hi) {
                return Err(Error::param(format!(
                    "{} range [{}, {}] outside legal [{lo}, {hi}]",
                    r.kind, r.lo, r.hi
                )));
            }
        }
        if self.num_groups == 0 {
            return Err(Error::param("num_groups must be at least 1"));
        }
        Ok(())
    }

    pub fn kinds(&self) -> impl Iterator<Item = PerturbationKind> + '_ {
        self.ranges.iter().map(|r| r.kind)
    }
}

/// Draws `m` independent perturbations from `family`.
pub fn sample_perturbation_batch(
    family: &PerturbationFamily,
    m: usize,
    seed: u64,
) -> Result<Vec<PerturbationSpec>> {
    family.validate()?;
    if m == 0 {
        return Err(Error::param("perturbation batch size must be at least 1"));
    }
    let mut rng = rng_for(seed);
    let g = family.num_groups;
    Ok((0..m)
        .map(|_| {
            let range = family.ranges[rng.random_range(0..family.ranges.len())];
            let intensity = if range.hi > range.lo {
                rng.random_range(range.lo..=range.hi)
            } else {
                range.lo
            };
            let mut spec = PerturbationSpec::new(range.kind, intensity, rng.next_u64());
            if range.kind == PerturbationKind::GroupResample {
                let raw: Vec<f64> = (0..g).map(|_| rng.random::<f64>() + 1e-9).collect();
                let total: f64 = raw.iter().sum();
                let mut w: Vec<f64> = raw
                    .iter()
                    .map(|u| (1.0 - intensity) / g as f64 + intensity * u / total)
                    .collect();
                // Exact normalization so the vector passes the sum check.
                let s: f64 = w.iter().sum();
                w.iter_mut().for_each(|v| *v /= s);
                let head: f64 = w[..g - 1].iter().sum();
                w[g - 1] = (1.0 - head).max(0.0);
                spec.group_weights = Some(w);
            }
            spec
        })
        .collect())
}
