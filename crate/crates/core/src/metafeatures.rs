//! Per-example meta features fed to the selector, and the outlier scores
//! that double as selection baselines.
//!
//! Vector layout, inactive blocks omitted:
//!
//! ```text
//! [confidence(1) | one-hot(K) | distribution(K) | kde(1) | iforest(1) | knn(1) | representation(D)]
//! ```
//!
//! The outlier components (Gaussian KDE, isolation forest, kNN distance) are
//! fitted on the base model's hidden representations of a training split.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::basemodel::BaseModel;
use crate::calmetrics::argmax;
use crate::error::{Error, Result};
use crate::synthdata::LabeledDataset;
use crate::textfmt::{parse_arg, parse_floats, ModelText};

pub type MetaVector = Vec<f64>;

pub const MIN_FIT_POINTS: usize = 50;

/// Which blocks of the meta vector are emitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureFlags {
    pub confidence: bool,
    pub one_hot: bool,
    pub distribution: bool,
    pub kde: bool,
    pub iforest: bool,
    pub knn: bool,
    /// Appends the (projected) hidden representation itself.
    pub representation: bool,
}

impl Default for FeatureFlags {
    fn default() -> Self {
        FeatureFlags {
            confidence: true,
            one_hot: true,
            distribution: true,
            kde: true,
            iforest: true,
            knn: true,
            representation: false,
        }
    }
}

impl FeatureFlags {
    fn bits(&self) -> [bool; 7] {
        [
            self.confidence,
            self.one_hot,
            self.distribution,
            self.kde,
            self.iforest,
            self.knn,
            self.representation,
        ]
    }

    fn from_bits(b: [bool; 7]) -> Self {
        FeatureFlags {
            confidence: b[0],
            one_hot: b[1],
            distribution: b[2],
            kde: b[3],
            iforest: b[4],
            knn: b[5],
            representation: b[6],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    pub flags: FeatureFlags,
    pub knn_k: usize,
    pub iforest_trees: usize,
    pub iforest_subsample: usize,
    /// Representations wider than this are projected down before fitting.
    pub max_dim: usize,
    /// Cap on stored reference points for KDE and kNN.
    pub max_reference: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            flags: FeatureFlags::default(),
            knn_k: 10,
            iforest_trees: 100,
            iforest_subsample: 256,
            max_dim: 128,
            max_reference: 1000,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Product Gaussian kernel density estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct Kde {
    dim: usize,
    refs: Vec<f64>,
    bandwidths: Vec<f64>,
}

impl Kde {
    pub fn with_bandwidths(refs: Vec<f64>, dim: usize, bandwidths: Vec<f64>) -> Result<Self> {
        if dim == 0 || refs.is_empty() || refs.len() % dim != 0 {
            return Err(Error::param("KDE reference set is empty or ragged"));
        }
        if bandwidths.len() != dim || bandwidths.iter().any(|h| !(*h > 0.0)) {
            return Err(Error::param("KDE needs one positive bandwidth per dimension"));
        }
        Ok(Kde {
            dim,
            refs,
            bandwidths,
        })
    }

    /// Scott-style bandwidths `std_j · n^(-1/(d+4))`; constant columns use
    /// unit spread.
    pub fn scott(refs: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || refs.is_empty() || refs.len() % dim != 0 {
            return Err(Error::param("KDE reference set is empty or ragged"));
        }
        let n = refs.len() / dim;
        let factor = (n as f64).powf(-1.0 / (dim as f64 + 4.0));
        let bandwidths = (0..dim)
            .map(|j| {
                let col = refs.iter().skip(j).step_by(dim);
                let mean = col.clone().sum::<f64>() / n as f64;
                let var = col.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let sd = var.sqrt();
                factor * if sd > 1e-12 { sd } else { 1.0 }
            })
            .collect();
        Self::with_bandwidths(refs, dim, bandwidths)
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let n = self.refs.len() / self.dim;
        let inv: Vec<f64> = self.bandwidths.iter().map(|h| 1.0 / h).collect();
        // Streaming log-sum-exp of the per-reference exponents.
        let mut max = f64::NEG_INFINITY;
        let mut acc = 0.0;
        for r in self.refs.chunks_exact(self.dim) {
            let mut s = 0.0;
            for ((xv, rv), ih) in x.iter().zip(r).zip(&inv) {
                let u = (xv - rv) * ih;
                s += u * u;
            }
            let e = -0.5 * s;
            if e > max {
                acc = acc * (max - e).exp() + 1.0;
                max = e;
            } else {
                acc += (e - max).exp();
            }
        }
        let norm: f64 = self
            .bandwidths
            .iter()
            .map(|h| (h * (2.0 * std::f64::consts::PI).sqrt()).ln())
            .sum();
        max + acc.ln() - (n as f64).ln() - norm
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.log_density(x).exp()
    }
}

/// Mean Euclidean distance to the `k` nearest stored points.
#[derive(Debug, Clone, PartialEq)]
pub struct Knn {
    dim: usize,
    refs: Vec<f64>,
    k: usize,
}

impl Knn {
    pub fn new(refs: Vec<f64>, dim: usize, k: usize) -> Result<Self> {
        if dim == 0 || refs.is_empty() || refs.len() % dim != 0 || k == 0 {
            return Err(Error::param("kNN needs a non-empty reference set and k >= 1"));
        }
        Ok(Knn { dim, refs, k })
    }

    pub fn mean_distance(&self, x: &[f64]) -> f64 {
        let k = self.k.min(self.refs.len() / self.dim);
        // Ascending buffer of the k smallest squared distances.
        let mut best: Vec<f64> = Vec::with_capacity(k + 1);
        for r in self.refs.chunks_exact(self.dim) {
            let d = sq_dist(x, r);
            if best.len() == k && d >= best[k - 1] {
                continue;
            }
            let pos = best.partition_point(|b| *b <= d);
            best.insert(pos, d);
            best.truncate(k);
        }
        best.iter().map(|d| d.sqrt()).sum::<f64>() / k as f64
    }
}

/// Expected path length of an unsuccessful search in a binary search tree
/// of `n` points: `c(n) = 2H(n-1) - 2(n-1)/n`, `c(1) = 0`.
pub fn average_path_length(n: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let harmonic: f64 = (1..n).map(|i| 1.0 / i as f64).sum();
    2.0 * harmonic - 2.0 * (n - 1) as f64 / n as f64
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        size: usize,
        /// `c(size)`, cached because it is needed on every lookup.
        adjust: f64,
    },
}

fn leaf(size: usize) -> Node {
    Node::Leaf {
        size,
        adjust: average_path_length(size),
    }
}

#[derive(Debug, Clone, PartialEq)]
struct IsolationTree {
    nodes: Vec<Node>,
}

impl IsolationTree {
    fn grow<R: Rng>(points: &[&[f64]], dim: usize, limit: usize, rng: &mut R) -> Self {
        let mut tree = IsolationTree { nodes: Vec::new() };
        tree.build(points.to_vec(), dim, 0, limit, rng);
        tree
    }

    fn build<R: Rng>(&mut self, pts: Vec<&[f64]>, dim: usize, depth: usize, limit: usize, rng: &mut R) -> usize {
        let id = self.nodes.len();
        if pts.len() <= 1 || depth >= limit {
            self.nodes.push(leaf(pts.len()));
            return id;
        }
        let feature = rng.random_range(0..dim);
        let (lo, hi) = pts
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p[feature]), b.max(p[feature])));
        if !(hi > lo) {
            self.nodes.push(leaf(pts.len()));
            return id;
        }
        let threshold = rng.random_range(lo..hi);
        let (l, r): (Vec<&[f64]>, Vec<&[f64]>) = pts.into_iter().partition(|p| p[feature] < threshold);
        self.nodes.push(leaf(0));
        let left = self.build(l, dim, depth + 1, limit, rng);
        let right = self.build(r, dim, depth + 1, limit, rng);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }

    fn path_length(&self, x: &[f64]) -> f64 {
        let mut node = 0;
        let mut depth = 0.0;
        loop {
            match self.nodes[node] {
                Node::Leaf { adjust, .. } => return depth + adjust,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if x[feature] < threshold { left } else { right };
                    depth += 1.0;
                }
            }
        }
    }

    fn tokens(&self) -> Vec<String> {
        fn walk(t: &IsolationTree, id: usize, out: &mut Vec<String>) {
            match &t.nodes[id] {
                Node::Leaf { size, .. } => {
                    out.push("l".into());
                    out.push(size.to_string());
                }
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    out.push("s".into());
                    out.push(feature.to_string());
                    out.push(threshold.to_string());
                    walk(t, *left, out);
                    walk(t, *right, out);
                }
            }
        }
        let mut out = Vec::new();
        walk(self, 0, &mut out);
        out
    }

    fn from_tokens(tokens: &[String], dim: usize) -> Result<Self> {
        fn read(t: &mut IsolationTree, toks: &[String], pos: &mut usize, dim: usize) -> Result<usize> {
            let bad = || Error::param("malformed isolation tree");
            let id = t.nodes.len();
            match toks.get(*pos).map(String::as_str) {
                Some("l") => {
                    let size = toks.get(*pos + 1).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
                    *pos += 2;
                    t.nodes.push(leaf(size));
                }
                Some("s") => {
                    let feature: usize = toks.get(*pos + 1).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
                    let threshold: f64 = toks.get(*pos + 2).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
                    if feature >= dim {
                        return Err(bad());
                    }
                    *pos += 3;
                    t.nodes.push(leaf(0));
                    let left = read(t, toks, pos, dim)?;
                    let right = read(t, toks, pos, dim)?;
                    t.nodes[id] = Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    };
                }
                _ => return Err(bad()),
            }
            Ok(id)
        }
        let mut t = IsolationTree { nodes: Vec::new() };
        let mut pos = 0;
        read(&mut t, tokens, &mut pos, dim)?;
        if pos != tokens.len() {
            return Err(Error::param("trailing tokens in isolation tree"));
        }
        Ok(t)
    }
}

/// Isolation forest with anomaly score `2^(-E[h(x)] / c(ψ))` in (0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct IsolationForest {
    trees: Vec<IsolationTree>,
    subsample: usize,
}

impl IsolationForest {
    pub fn fit<R: Rng>(points: &[f64], dim: usize, trees: usize, subsample: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 || trees == 0 || subsample < 2 {
            return Err(Error::param("isolation forest needs points, trees >= 1 and subsample >= 2"));
        }
        let rows: Vec<&[f64]> = points.chunks_exact(dim).collect();
        let psi = subsample.min(rows.len());
        let limit = (psi as f64).log2().ceil() as usize;
        let trees = (0..trees)
            .map(|_| {
                let idx = rand::seq::index::sample(rng, rows.len(), psi);
                let sample: Vec<&[f64]> = idx.iter().map(|i| rows[i]).collect();
                IsolationTree::grow(&sample, dim, limit, rng)
            })
            .collect();
        Ok(IsolationForest { trees, subsample: psi })
    }

    pub fn mean_path_length(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.path_length(x)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        let c = average_path_length(self.subsample).max(f64::MIN_POSITIVE);
        2f64.powf(-self.mean_path_length(x) / c)
    }
}

/// Fitted meta-feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    config: FeatureConfig,
    num_classes: usize,
    rep_dim: usize,
    /// Row-major `out × rep_dim` orthonormal projection, when one is used.
    projection: Option<(usize, Vec<f64>)>,
    kde: Option<Kde>,
    iforest: Option<IsolationForest>,
    knn: Option<Knn>,
}

impl FeatureExtractor {
    pub fn unfitted(config: FeatureConfig, num_classes: usize) -> Self {
        FeatureExtractor {
            config,
            num_classes,
            rep_dim: 0,
            projection: None,
            kde: None,
            iforest: None,
            knn: None,
        }
    }

    pub fn is_fitted(&self) -> bool {
        self.kde.is_some() && self.iforest.is_some() && self.knn.is_some()
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn projected_dim(&self) -> usize {
        self.projection.as_ref().map_or(self.rep_dim, |(k, _)| *k)
    }

    /// Positions of each active block in the meta vector.
    pub fn layout(&self) -> Vec<(&'static str, Range<usize>)> {
        let f = &self.config.flags;
        let k = self.num_classes;
        let blocks = [
            ("confidence", f.confidence, 1),
            ("one_hot", f.one_hot, k),
            ("distribution", f.distribution, k),
            ("kde", f.kde, 1),
            ("iforest", f.iforest, 1),
            ("knn", f.knn, 1),
            ("representation", f.representation, self.projected_dim()),
        ];
        let mut at = 0;
        blocks
            .into_iter()
            .filter(|b| b.1)
            .map(|(name, _, w)| {
                let r = at..at + w;
                at += w;
                (name, r)
            })
            .collect()
    }

    pub fn output_dim(&self) -> usize {
        self.layout().last().map_or(0, |(_, r)| r.end)
    }

    pub fn fit(&mut self, train_reps: &[Vec<f64>], seed: u64) -> Result<()> {
        if train_reps.len() < MIN_FIT_POINTS {
            return Err(Error::InsufficientData {
                context: "meta-feature fitting".into(),
                needed: MIN_FIT_POINTS,
                got: train_reps.len(),
            });
        }
        let dim = train_reps[0].len();
        if dim == 0 || train_reps.iter().any(|r| r.len() != dim) {
            return Err(Error::param("training representations must share a positive dimension"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.rep_dim = dim;
        self.projection = if dim > self.config.max_dim {
            Some((self.config.max_dim, random_orthonormal_rows(self.config.max_dim, dim, &mut rng)))
        } else {
            None
        };
        let projected: Vec<f64> = train_reps.iter().flat_map(|r| self.project(r)).collect();
        let pd = self.projected_dim();
        let n = train_reps.len();
        let refs: Vec<f64> = if n > self.config.max_reference {
            let idx = rand::seq::index::sample(&mut rng, n, self.config.max_reference).into_vec();
            idx.iter()
                .flat_map(|&i| projected[i * pd..(i + 1) * pd].iter().copied())
                .collect()
        } else {
            projected.clone()
        };
        self.kde = Some(Kde::scott(refs.clone(), pd)?);
        self.knn = Some(Knn::new(refs, pd, self.config.knn_k)?);
        self.iforest = Some(IsolationForest::fit(
            &projected,
            pd,
            self.config.iforest_trees,
            self.config.iforest_subsample,
            &mut rng,
        )?);
        Ok(())
    }

    fn project(&self, rep: &[f64]) -> Vec<f64> {
        match &self.projection {
            None => rep.to_vec(),
            Some((_, m)) => m
                .chunks_exact(self.rep_dim)
                .map(|row| row.iter().zip(rep).map(|(a, b)| a * b).sum())
                .collect(),
        }
    }

    fn components(&self) -> Result<(&Kde, &IsolationForest, &Knn)> {
        match (&self.kde, &self.iforest, &self.knn) {
            (Some(a), Some(b), Some(c)) => Ok((a, b, c)),
            _ => Err(Error::State("meta-feature extractor is not fitted".into())),
        }
    }

    /// Assembles the meta vector from a model output and hidden representation.
    pub fn assemble(&self, probs: &[f64], rep: &[f64]) -> Result<MetaVector> {
        let (kde, forest, knn) = self.components()?;
        if probs.len() != self.num_classes {
            return Err(Error::param("probability vector has the wrong number of classes"));
        }
        if rep.len() != self.rep_dim {
            return Err(Error::param("representation has the wrong dimension"));
        }
        let f = &self.config.flags;
        let top = argmax(probs);
        let mut out = Vec::with_capacity(self.output_dim());
        if f.confidence {
            out.push(probs[top]);
        }
        if f.one_hot {
            out.extend((0..self.num_classes).map(|c| if c == top { 1.0 } else { 0.0 }));
        }
        if f.distribution {
            out.extend_from_slice(probs);
        }
        let needs_rep = f.kde || f.iforest || f.knn || f.representation;
        if needs_rep {
            let z = self.project(rep);
            if f.kde {
                out.push(kde.log_density(&z));
            }
            if f.iforest {
                out.push(forest.score(&z));
            }
            if f.knn {
                out.push(knn.mean_distance(&z));
            }
            if f.representation {
                out.extend(z);
            }
        }
        Ok(out)
    }

    pub fn extract(&self, model: &BaseModel, x: &[f64]) -> Result<MetaVector> {
        self.components()?;
        self.assemble(&model.predict(x)?, &model.hidden(x)?)
    }

    /// Model probabilities and meta vectors for every row.
    pub fn extract_dataset(&self, model: &BaseModel, data: &LabeledDataset) -> Result<(Vec<Vec<f64>>, Vec<MetaVector>)> {
        self.components()?;
        let mut probs = Vec::with_capacity(data.len());
        let mut metas = Vec::with_capacity(data.len());
        for x in data.rows() {
            let p = model.predict(x)?;
            metas.push(self.assemble(&p, &model.hidden(x)?)?);
            probs.push(p);
        }
        Ok((probs, metas))
    }

    /// Outlier scores of one representation: (log density, anomaly score, kNN distance).
    pub fn outlier_scores(&self, rep: &[f64]) -> Result<(f64, f64, f64)> {
        let (kde, forest, knn) = self.components()?;
        if rep.len() != self.rep_dim {
            return Err(Error::param("representation has the wrong dimension"));
        }
        let z = self.project(rep);
        Ok((kde.log_density(&z), forest.score(&z), knn.mean_distance(&z)))
    }

    pub fn to_text(&self) -> Result<ModelText> {
        let (kde, forest, knn) = self.components()?;
        let mut t = ModelText::new(
            "extractor",
            &[self.num_classes.to_string(), self.rep_dim.to_string()],
        );
        let flags = self.config.flags.bits().iter().map(|b| u8::from(*b).to_string()).collect();
        t.push_entry("flags", flags);
        let c = &self.config;
        t.push_entry(
            "config",
            [c.knn_k, c.iforest_trees, c.iforest_subsample, c.max_dim, c.max_reference]
                .iter()
                .map(|v| v.to_string())
                .collect(),
        );
        if let Some((rows, m)) = &self.projection {
            let mut v = vec![rows.to_string()];
            v.extend(m.iter().map(|x| x.to_string()));
            t.push_entry("projection", v);
        }
        t.push_values("kde_bandwidth", kde.bandwidths());
        for r in knn.refs.chunks_exact(knn.dim) {
            t.push_values("ref", r);
        }
        t.push_entry("iforest_subsample", vec![forest.subsample.to_string()]);
        for tree in &forest.trees {
            t.push_entry("tree", tree.tokens());
        }
        Ok(t)
    }

    pub fn from_text(t: &ModelText) -> Result<Self> {
        t.expect_kind("extractor")?;
        let num_classes: usize = parse_arg(&t.args, 0, "class count")?;
        let rep_dim: usize = parse_arg(&t.args, 1, "representation dimension")?;
        let bad = |what: &str| Error::parse(1, format!("extractor file: bad `{what}`"));
        let flags = t.entry("flags").ok_or_else(|| bad("flags"))?;
        if flags.len() != 7 {
            return Err(bad("flags"));
        }
        let mut bits = [false; 7];
        for (b, s) in bits.iter_mut().zip(flags) {
            *b = s == "1";
        }
        let cfg: Vec<usize> = t
            .entry("config")
            .ok_or_else(|| bad("config"))?
            .iter()
            .map(|s| s.parse().map_err(|_| bad("config")))
            .collect::<Result<_>>()?;
        if cfg.len() != 5 {
            return Err(bad("config"));
        }
        let config = FeatureConfig {
            flags: FeatureFlags::from_bits(bits),
            knn_k: cfg[0],
            iforest_trees: cfg[1],
            iforest_subsample: cfg[2],
            max_dim: cfg[3],
            max_reference: cfg[4],
        };
        let projection = match t.entry("projection") {
            Some(v) => {
                let rows: usize = v.first().and_then(|s| s.parse().ok()).ok_or_else(|| bad("projection"))?;
                let m = parse_floats(&v[1..], "projection")?;
                if m.len() != rows * rep_dim {
                    return Err(bad("projection"));
                }
                Some((rows, m))
            }
            None => None,
        };
        let pd = projection.as_ref().map_or(rep_dim, |(k, _)| *k);
        let bandwidths = t.floats("kde_bandwidth")?.ok_or_else(|| bad("kde_bandwidth"))?;
        let mut refs = Vec::new();
        for r in t.entries_named("ref") {
            let v = parse_floats(r, "ref")?;
            if v.len() != pd {
                return Err(bad("ref"));
            }
            refs.extend(v);
        }
        let subsample: usize = t
            .entry("iforest_subsample")
            .and_then(|v| v.first())
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("iforest_subsample"))?;
        let trees = t
            .entries_named("tree")
            .map(|toks| IsolationTree::from_tokens(toks, pd))
            .collect::<Result<Vec<_>>>()?;
        if trees.is_empty() {
            return Err(bad("tree"));
        }
        Ok(FeatureExtractor {
            config,
            num_classes,
            rep_dim,
            projection,
            kde: Some(Kde::with_bandwidths(refs.clone(), pd, bandwidths)?),
            knn: Some(Knn::new(refs, pd, config.knn_k)?),
            iforest: Some(IsolationForest { trees, subsample }),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_text()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&ModelText::read(path)?)
    }
}

/// `k × d` matrix with orthonormal rows from the QR factor of a Gaussian draw.
fn random_orthonormal_rows<R: Rng>(k: usize, d: usize, rng: &mut R) -> Vec<f64> {
    let g = DMatrix::<f64>::from_fn(d, k, |_, _| rng.sample(StandardNormal));
    let q = g.qr().q();
    let mut out = Vec::with_capacity(k * d);
    for c in 0..k {
        out.extend(q.column(c).iter().copied());
    }
    out
}

pub fn fit_extractor(
    train_reps: &[Vec<f64>],
    num_classes: usize,
    config: FeatureConfig,
    seed: u64,
) -> Result<FeatureExtractor> {
    let mut ex = FeatureExtractor::unfitted(config, num_classes);
    ex.fit(train_reps, seed)?;
    Ok(ex)
}

pub const BASELINES: [&str; 4] = ["confidence", "neg_kde", "neg_iforest", "neg_knn"];

/// Baseline selection scores for every row, oriented so that larger means
/// preferred: confidence, log density, negated anomaly score, negated kNN
/// distance.
pub fn baseline_scores(
    ex: &FeatureExtractor,
    model: &BaseModel,
    data: &LabeledDataset,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let n = data.len();
    let mut cols: [Vec<f64>; 4] = std::array::from_fn(|_| Vec::with_capacity(n));
    for x in data.rows() {
        let p = model.predict(x)?;
        let (kde, forest, knn) = ex.outlier_scores(&model.hidden(x)?)?;
        cols[0].push(p[argmax(&p)]);
        cols[1].push(kde);
        cols[2].push(-forest);
        cols[3].push(-knn);
    }
    Ok(BASELINES.iter().map(|s| s.to_string()).zip(cols).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{rng_for, sample_toy, ToySpec};

    fn toy_reps(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let d = sample_toy(&ToySpec::new(0.5, 0.3).unwrap(), n, seed).unwrap();
        d.rows().map(|r| r.to_vec()).collect()
    }

    #[test]
    fn path_length_normalizer() {
        assert_eq!(average_path_length(1), 0.0);
        assert_eq!(average_path_length(2), 1.0);
        let h2 = 1.5;
        assert!((average_path_length(3) - (2.0 * h2 - 4.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn kde_hand_value() {
        let kde = Kde::with_bandwidths(vec![0.0], 1, vec![1.0]).unwrap();
        assert!((kde.density(&[0.0]) - 0.398_942_280_401_432_7).abs() < 1e-12);
        assert!((kde.density(&[0.0]) - 0.39894).abs() < 1e-5);
    }

    #[test]
    fn knn_hand_value() {
        let knn = Knn::new(vec![0.0, 1.0], 1, 2).unwrap();
        assert_eq!(knn.mean_distance(&[0.5]), 0.5);
        let knn = Knn::new(vec![0.0, 1.0, 5.0], 1, 1).unwrap();
        assert_eq!(knn.mean_distance(&[4.0]), 1.0);
    }

    #[test]
    fn flags_control_layout_only() {
        let reps = toy_reps(200, 1);
        let model = BaseModel::analytic_toy();
        let full = fit_extractor(&reps, 2, FeatureConfig::default(), 3).unwrap();
        let mut cfg = FeatureConfig::default();
        cfg.flags.kde = false;
        cfg.flags.iforest = false;
        cfg.flags.knn = false;
        let slim = fit_extractor(&reps, 2, cfg, 3).unwrap();
        let x = [0.3, 1.0];
        let a = full.extract(&model, &x).unwrap();
        let b = slim.extract(&model, &x).unwrap();
        let expected = [0.7, 1.0, 0.0, 0.7, 0.3];
        assert_eq!(b.len(), expected.len());
        for (got, want) in b.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(&a[..5], &b[..]);
        assert_eq!(slim.output_dim(), 5);
        assert_eq!(full.output_dim(), 8);
        // Dropping the distribution block leaves the others untouched.
        let mut cfg = FeatureConfig::default();
        cfg.flags.distribution = false;
        let nodist = fit_extractor(&reps, 2, cfg, 3).unwrap();
        let c = nodist.extract(&model, &x).unwrap();
        assert_eq!(&c[..3], &a[..3]);
        assert_eq!(&c[3..], &a[5..]);
    }

    #[test]
    fn extract_blocks_for_binary_model() {
        let reps = toy_reps(100, 2);
        let ex = fit_extractor(&reps, 2, FeatureConfig::default(), 0).unwrap();
        let v = ex.extract(&BaseModel::analytic_toy(), &[0.7, 0.0]).unwrap();
        assert!((v[0] - 0.7).abs() < 1e-15);
        assert_eq!(&v[1..3], &[0.0, 1.0]);
        assert!((v[3] - 0.3).abs() < 1e-15 && v[4] == 0.7);
        assert!(v[6] > 0.0 && v[6] < 1.0);
    }

    #[test]
    fn unfitted_and_small_fits_fail() {
        let ex = FeatureExtractor::unfitted(FeatureConfig::default(), 2);
        assert!(matches!(
            ex.extract(&BaseModel::analytic_toy(), &[0.1, 0.0]),
            Err(Error::State(_))
        ));
        assert!(fit_extractor(&toy_reps(49, 0), 2, FeatureConfig::default(), 0).is_err());
    }

    #[test]
    fn fitting_is_deterministic() {
        let reps = toy_reps(300, 4);
        let a = fit_extractor(&reps, 2, FeatureConfig::default(), 9).unwrap();
        let b = fit_extractor(&reps, 2, FeatureConfig::default(), 9).unwrap();
        assert_eq!(a.outlier_scores(&[0.2, 0.5]).unwrap(), b.outlier_scores(&[0.2, 0.5]).unwrap());
    }

    #[test]
    fn duplicated_point_is_more_inlying_than_distant_point() {
        let mut reps = vec![vec![0.0, 0.0]; 100];
        let mut rng = rng_for(0);
        for _ in 0..100 {
            reps.push(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
        }
        let ex = fit_extractor(&reps, 2, FeatureConfig::default(), 1).unwrap();
        let h = ex.kde.as_ref().unwrap().bandwidths()[0];
        let (kde_in, _, knn_in) = ex.outlier_scores(&[0.0, 0.0]).unwrap();
        let (kde_out, _, knn_out) = ex.outlier_scores(&[10.0 * h + 1.0, 0.0]).unwrap();
        assert!(kde_in > kde_out);
        assert!(-knn_in > -knn_out);
    }

    #[test]
    fn far_outlier_gets_lowest_forest_baseline() {
        let mut rng = rng_for(5);
        let mut feats = Vec::new();
        for _ in 0..300 {
            feats.extend([rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]);
        }
        feats.extend([8.0, 8.0]);
        let n = feats.len() / 2;
        let forest = IsolationForest::fit(&feats, 2, 100, 256, &mut rng).unwrap();
        let scores: Vec<f64> = feats.chunks(2).map(|x| -forest.score(x)).collect();
        let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(scores[n - 1], min);
        for s in &scores {
            assert!(-s > 0.0 && -s < 1.0);
        }
    }

    #[test]
    fn anomaly_score_decreases_with_path_length() {
        let mut rng = rng_for(6);
        let feats: Vec<f64> = (0..400).map(|_| rng.random_range(-1.0..1.0)).collect();
        let forest = IsolationForest::fit(&feats, 2, 50, 128, &mut rng).unwrap();
        let mut pts: Vec<(f64, f64)> = feats
            .chunks(2)
            .map(|x| (forest.mean_path_length(x), forest.score(x)))
            .collect();
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in pts.windows(2) {
            assert!(w[1].1 <= w[0].1);
        }
    }

    #[test]
    fn projection_caps_dimension() {
        let mut rng = rng_for(8);
        let reps: Vec<Vec<f64>> = (0..80)
            .map(|_| (0..10).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let cfg = FeatureConfig {
            max_dim: 4,
            ..Default::default()
        };
        let ex = fit_extractor(&reps, 3, cfg, 2).unwrap();
        assert_eq!(ex.projected_dim(), 4);
        let (_, m) = ex.projection.as_ref().unwrap();
        for a in 0..4 {
            for b in 0..4 {
                let dot: f64 = (0..10).map(|j| m[a * 10 + j] * m[b * 10 + j]).sum();
                assert!((dot - f64::from(u8::from(a == b))).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn baselines_are_oriented_and_extractor_round_trips() {
        let data = sample_toy(&ToySpec::new(0.5, 0.3).unwrap(), 300, 1).unwrap();
        let reps: Vec<Vec<f64>> = data.rows().map(|r| r.to_vec()).collect();
        let ex = fit_extractor(&reps, 2, FeatureConfig::default(), 3).unwrap();
        let model = BaseModel::analytic_toy();
        let b = baseline_scores(&ex, &model, &data).unwrap();
        assert_eq!(b.len(), 4);
        for (x, c) in data.rows().zip(&b["confidence"]) {
            assert_eq!(*c, x[0].max(1.0 - x[0]));
        }
        let text = ex.to_text().unwrap().render();
        let back = FeatureExtractor::from_text(&ModelText::parse(&text).unwrap()).unwrap();
        assert_eq!(back, ex);
    }
}
