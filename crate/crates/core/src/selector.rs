//! Soft selector network and its binarization by coverage threshold.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Gradients, Mlp, Trace};
use crate::scalar::Scalar;
use crate::textfmt::{parse_arg, ModelText};

pub const HIDDEN_WIDTH: usize = 64;
/// Initial output bias; sigmoid(2) ≈ 0.88.
pub const INITIAL_OUTPUT_BIAS: f64 = 2.0;

/// Per-feature affine standardization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

impl<T: Scalar> Standardizer<T> {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![T::zero(); dim],
            std: vec![T::one(); dim],
        }
    }

    /// Column statistics of `rows`; near-constant columns keep unit scale.
    pub fn fit(rows: &[Vec<T>]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::param("cannot standardize an empty set"))?;
        let d = first.len();
        let n = T::count(rows.len());
        let mut mean = vec![T::zero(); d];
        for r in rows {
            if r.len() != d {
                return Err(Error::param("rows have differing dimensions"));
            }
            for (m, v) in mean.iter_mut().zip(r) {
                *m += *v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![T::zero(); d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (*v - *m) * (*v - *m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > T::lit(1e-12) {
                    sd
                } else {
                    T::one()
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (*v - *m) / *s)
            .collect()
    }
}

/// `sigmoid(FFNN(standardize(m)))`: three affine maps with ReLU between them,
/// hidden width 64.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftSelector<T> {
    net: Mlp<T>,
    standardizer: Standardizer<T>,
}

/// Forward record for one example.
#[derive(Debug, Clone)]
pub struct SelectorTrace<T> {
    trace: Trace<T>,
    score: T,
}

impl<T> SelectorTrace<T> {
    pub fn score(&self) -> T
    where
        T: Copy,
    {
        self.score
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> SoftSelector<T> {
    /// Seeded Xavier-uniform weights, zero biases except the output bias.
    pub fn new(input_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::param("selector input dimension must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Mlp::xavier(&[input_dim, HIDDEN_WIDTH, HIDDEN_WIDTH, 1], &mut rng);
        net.layers[2].bias[0] = T::lit(INITIAL_OUTPUT_BIAS);
        Ok(SoftSelector {
            net,
            standardizer: Standardizer::identity(input_dim),
        })
    }

    pub fn from_parts(net: Mlp<T>, standardizer: Standardizer<T>) -> Result<Self> {
        if net.layers.len() != 3 || net.output_dim() != 1 {
            return Err(Error::param("selector network must have three layers and one output"));
        }
        if standardizer.mean.len() != net.input_dim() || standardizer.std.len() != net.input_dim() {
            return Err(Error::param("standardizer does not match selector input"));
        }
        Ok(SoftSelector { net, standardizer })
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn net(&self) -> &Mlp<T> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp<T> {
        &mut self.net
    }

    pub fn standardizer(&self) -> &Standardizer<T> {
        &self.standardizer
    }

    pub fn set_standardizer(&mut self, s: Standardizer<T>) -> Result<()> {
        if s.mean.len() != self.input_dim() || s.std.len() != self.input_dim() {
            return Err(Error::param("standardizer does not match selector input"));
        }
        self.standardizer = s;
        Ok(())
    }

    fn check(&self, m: &[T]) -> Result<()> {
        if m.len() != self.input_dim() {
            return Err(Error::param(format!(
                "meta vector has dimension {}, selector expects {}",
                m.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, m: &[T]) -> Result<T> {
        self.check(m)?;
        let z = self.net.forward(&self.standardizer.apply(m))?;
        Ok(sigmoid(z[0]))
    }

    pub fn forward_traced(&self, m: &[T]) -> Result<SelectorTrace<T>> {
        self.check(m)?;
        let trace = self.net.forward_traced(&self.standardizer.apply(m))?;
        let score = sigmoid(trace.output()[0]);
        Ok(SelectorTrace { trace, score })
    }

    pub fn scores(&self, rows: &[Vec<T>]) -> Result<Vec<T>> {
        rows.iter().map(|m| self.forward(m)).collect()
    }

    /// Parameter gradient of a loss given `d loss / d score` per example.
    pub fn backward(&self, traces: &[SelectorTrace<T>], upstream: &[T]) -> Result<Gradients<T>> {
        if traces.len() != upstream.len() {
            return Err(Error::State(format!(
                "{} cached forward passes for {} upstream gradients",
                traces.len(),
                upstream.len()
            )));
        }
        let mut grads = self.net.zero_gradients();
        for (t, u) in traces.iter().zip(upstream) {
            let s = t.score;
            let d = *u * s * (T::one() - s);
            self.net.backward(&t.trace, &[d], &mut grads)?;
        }
        Ok(grads)
    }

    pub fn to_text(&self) -> ModelText {
        let mut t = ModelText::new(
            "selector",
            &[self.input_dim().to_string(), HIDDEN_WIDTH.to_string()],
        );
        for l in &self.net.layers {
            t.push_layer(l);
        }
        t.push_values("mean", &self.standardizer.mean);
        t.push_values("std", &self.standardizer.std);
        t
    }

    pub fn from_text(t: &ModelText) -> Result<Self> {
        t.expect_kind("selector")?;
        let net = Mlp::from_layers(t.layers_as::<T>())?;
        let d: usize = parse_arg(&t.args, 0, "selector input dimension")?;
        if net.input_dim() != d {
            return Err(Error::parse(1, "input dimension disagrees with first layer"));
        }
        let mean = t
            .floats("mean")?
            .ok_or_else(|| Error::parse(1, "selector file lacks `mean`"))?;
        let std = t
            .floats("std")?
            .ok_or_else(|| Error::parse(1, "selector file lacks `std`"))?;
        let standardizer = Standardizer {
            mean: mean.into_iter().map(T::lit).collect(),
            std: std.into_iter().map(T::lit).collect(),
        };
        Self::from_parts(net, standardizer)
    }
}

/// `g(x) = 1{g̃(x) ≥ τ}`.
#[derive(Debug, Clone, PartialEq)]
pub struct HardSelector<T> {
    pub soft: SoftSelector<T>,
    pub tau: T,
}

impl<T: Scalar> HardSelector<T> {
    pub fn accepts(&self, m: &[T]) -> Result<bool> {
        Ok(self.soft.forward(m)? >= self.tau)
    }

    pub fn to_text(&self) -> ModelText {
        let mut t = self.soft.to_text();
        t.push_values("tau", &[self.tau]);
        t
    }

    pub fn from_text(t: &ModelText) -> Result<Self> {
        let soft = SoftSelector::from_text(t)?;
        let tau = t
            .floats("tau")?
            .and_then(|v| v.first().copied())
            .ok_or_else(|| Error::parse(1, "selector file lacks `tau`"))?;
        Ok(HardSelector {
            soft,
            tau: T::lit(tau),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_text().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&ModelText::read(path)?)
    }
}

/// Largest τ such that at least a `xi` fraction of `scores` is ≥ τ: the
/// ⌈xi·n⌉-th largest score.
pub fn threshold_rule<T: Scalar>(xi: f64, scores: &[T]) -> Result<T> {
    if !(xi > 0.0 && xi <= 1.0) {
        return Err(Error::param(format!("coverage must lie in (0, 1], got {xi}")));
    }
    if scores.is_empty() {
        return Err(Error::param("threshold needs at least one score"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN selector score".into()));
    }
    let n = scores.len();
    // Guard against xi·n landing a hair above an integer.
    let k = ((xi * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut sorted = scores.to_vec();
    let idx = n - k;
    let (_, kth, _) = sorted.select_nth_unstable_by(idx, |a, b| a.partial_cmp(b).unwrap());
    Ok(*kth)
}

/// Empirical fraction of `scores` at or above `tau`.
pub fn coverage_at<T: Scalar>(tau: T, scores: &[T]) -> f64 {
    scores.iter().filter(|s| **s >= tau).count() as f64 / scores.len() as f64
}

pub fn binarize<T: Scalar>(soft: &SoftSelector<T>, tune_scores: &[T], xi: f64) -> Result<HardSelector<T>> {
    Ok(HardSelector {
        soft: soft.clone(),
        tau: threshold_rule(xi, tune_scores)?,
    })
}
