//! The fixed confidence model `f` whose outputs the selector learns to trust
//! or reject.
//!
//! Binary tasks are kept as two-class probability vectors; the scalar
//! confidence of the binary view is the second component.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::nn::{Gradients, Mlp};
use crate::synthdata::{rng_for, LabeledDataset};
use crate::textfmt::{parse_arg, ModelText};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseModelKind {
    /// `f(x) = (1 - x₁, x₁)` with x₁ clamped to [0, 1].
    AnalyticToy,
    TrainedNet,
}

impl BaseModelKind {
    fn tag(self) -> &'static str {
        match self {
            BaseModelKind::AnalyticToy => "analytic_toy",
            BaseModelKind::TrainedNet => "trained_net",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    kind: BaseModelKind,
    net: Option<Mlp<f64>>,
    temperature: f64,
    num_classes: usize,
}

/// Feed-forward classifier shape and its SGD schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseArchConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for BaseArchConfig {
    fn default() -> Self {
        BaseArchConfig {
            hidden: vec![32, 32],
            epochs: 20,
            batch_size: 64,
            learning_rate: 0.05,
        }
    }
}

/// Result of temperature fitting.
#[derive(Debug, Clone)]
pub struct TemperatureFit {
    pub model: BaseModel,
    /// Validation NLL at the chosen temperature.
    pub nll: f64,
    /// Set when validation holds a single class; the temperature is left as is.
    pub degenerate: bool,
}

impl BaseModel {
    pub fn analytic_toy() -> Self {
        BaseModel {
            kind: BaseModelKind::AnalyticToy,
            net: None,
            temperature: 1.0,
            num_classes: 2,
        }
    }

    pub fn from_net(net: Mlp<f64>, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::param(format!("temperature must be positive, got {temperature}")));
        }
        let k = net.output_dim();
        if k < 2 {
            return Err(Error::param("classifier needs at least two outputs"));
        }
        Ok(BaseModel {
            kind: BaseModelKind::TrainedNet,
            net: Some(net),
            temperature,
            num_classes: k,
        })
    }

    pub fn kind(&self) -> BaseModelKind {
        self.kind
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn net(&self) -> Option<&Mlp<f64>> {
        self.net.as_ref()
    }

    pub fn input_dim(&self) -> usize {
        match &self.net {
            Some(n) => n.input_dim(),
            None => 2,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        match &self.net {
            Some(n) if n.layers.len() > 1 => n.layers[n.layers.len() - 2].rows,
            Some(n) => n.input_dim(),
            None => 2,
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::param(format!(
                "input has dimension {}, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Raw (untempered) logits of the trained network.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        match &self.net {
            Some(net) => net.forward(x),
            None => Err(Error::State("analytic model has no logits".into())),
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        match &self.net {
            None => {
                let p = x[0].clamp(0.0, 1.0);
                Ok(vec![1.0 - p, p])
            }
            Some(net) => {
                let z = net.forward(x)?;
                Ok(softmax_scaled(&z, self.temperature))
            }
        }
    }

    /// Last hidden-layer activation; the raw features for the analytic model.
    pub fn hidden(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        match &self.net {
            None => Ok(x.to_vec()),
            Some(net) => net.hidden(x),
        }
    }

    pub fn with_temperature(&self, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::param(format!("temperature must be positive, got {temperature}")));
        }
        let mut m = self.clone();
        m.temperature = temperature;
        Ok(m)
    }

    pub fn to_text(&self) -> ModelText {
        let mut t = ModelText::new(
            self.kind.tag(),
            &[self.num_classes.to_string(), self.temperature.to_string()],
        );
        if let Some(net) = &self.net {
            for l in &net.layers {
                t.push_layer(l);
            }
        }
        t
    }

    pub fn from_text(t: &ModelText) -> Result<Self> {
        let k: usize = parse_arg(&t.args, 0, "class count")?;
        let temperature: f64 = parse_arg(&t.args, 1, "temperature")?;
        match t.kind.as_str() {
            "analytic_toy" => {
                if k != 2 {
                    return Err(Error::parse(1, "analytic_toy model is binary"));
                }
                Ok(BaseModel::analytic_toy().with_temperature(temperature)?)
            }
            "trained_net" => {
                let net = Mlp::from_layers(t.layers_as())?;
                if net.output_dim() != k {
                    return Err(Error::parse(1, "class count disagrees with output layer"));
                }
                BaseModel::from_net(net, temperature)
            }
            other => Err(Error::parse(1, format!("unknown base model kind `{other}`"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_text().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&ModelText::read(path)?)
    }
}

/// softmax(z / temperature), max-shifted.
pub fn softmax_scaled(z: &[f64], temperature: f64) -> Vec<f64> {
    let max = z.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
    let exps: Vec<f64> = z.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax_at(z: &[f64], temperature: f64, y: usize) -> f64 {
    let max = z.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
    let lse = z.iter().map(|v| ((v - max) / temperature).exp()).sum::<f64>().ln();
    (z[y] - max) / temperature - lse
}

fn mean_cross_entropy(net: &Mlp<f64>, data: &LabeledDataset) -> Result<f64> {
    let mut total = 0.0;
    for (x, &y) in data.rows().zip(data.labels()) {
        total -= log_softmax_at(&net.forward(x)?, 1.0, y);
    }
    Ok(total / data.len() as f64)
}

/// Fits a feed-forward classifier by mini-batch SGD on cross-entropy.
pub fn train_base(data: &LabeledDataset, arch: &BaseArchConfig, seed: u64) -> Result<BaseModel> {
    train_base_with_history(data, arch, seed).map(|(m, _)| m)
}

/// Like [`train_base`], also returning the full-data mean cross-entropy
/// before training and after each epoch.
pub fn train_base_with_history(
    data: &LabeledDataset,
    arch: &BaseArchConfig,
    seed: u64,
) -> Result<(BaseModel, Vec<f64>)> {
    let k = data.num_classes();
    let mut present = vec![false; k];
    data.labels().iter().for_each(|y| present[*y] = true);
    if present.iter().filter(|p| **p).count() < 2 {
        return Err(Error::Training {
            step: 0,
            message: "training data contains a single class".into(),
        });
    }
    if arch.batch_size == 0 {
        return Err(Error::param("batch size must be at least 1"));
    }
    let mut rng = rng_for(seed);
    let mut sizes = vec![data.dim()];
    sizes.extend(&arch.hidden);
    sizes.push(k);
    let mut net: Mlp<f64> = Mlp::xavier(&sizes, &mut rng);
    let mut history = vec![mean_cross_entropy(&net, data)?];
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..arch.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(arch.batch_size) {
            let mut grads: Gradients<f64> = net.zero_gradients();
            for &i in batch {
                let trace = net.forward_traced(data.row(i))?;
                let mut d = softmax_scaled(trace.output(), 1.0);
                d[data.labels()[i]] -= 1.0;
                net.backward(&trace, &d, &mut grads)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.is_finite() {
                return Err(Error::Training {
                    step: epoch,
                    message: "non-finite gradient in base model".into(),
                });
            }
            net.sgd_step(&grads, arch.learning_rate);
        }
        history.push(mean_cross_entropy(&net, data)?);
    }
    Ok((BaseModel::from_net(net, 1.0)?, history))
}

/// Chooses the temperature minimizing validation NLL over [0.05, 20]:
/// a 50-point log grid followed by three rounds of local refinement.
pub fn fit_temperature(model: &BaseModel, validation: &LabeledDataset) -> Result<TemperatureFit> {
    let net = model
        .net()
        .ok_or_else(|| Error::State("temperature scaling needs a trained network".into()))?;
    let logits: Vec<Vec<f64>> = validation
        .rows()
        .map(|x| net.forward(x))
        .collect::<Result<_>>()?;
    let labels = validation.labels();
    let nll = |t: f64| -> f64 {
        logits
            .iter()
            .zip(labels)
            .map(|(z, &y)| -log_softmax_at(z, t, y))
            .sum::<f64>()
            / labels.len() as f64
    };
    let first = labels[0];
    if labels.iter().all(|y| *y == first) {
        return Ok(TemperatureFit {
            nll: nll(model.temperature),
            model: model.clone(),
            degenerate: true,
        });
    }
    let (lo, hi) = (0.05f64.ln(), 20f64.ln());
    let grid = |a: f64, b: f64, n: usize| -> Vec<f64> {
        (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
    };
    let mut points = grid(lo, hi, 50);
    let mut step = (hi - lo) / 49.0;
    let mut best = lo;
    let mut best_val = f64::INFINITY;
    for round in 0..4 {
        for &p in &points {
            let v = nll(p.exp());
            if v < best_val {
                best_val = v;
                best = p;
            }
        }
        if round == 3 {
            break;
        }
        let a = (best - step).max(lo);
        let b = (best + step).min(hi);
        points = grid(a, b, 21);
        step = (b - a) / 20.0;
    }
    Ok(TemperatureFit {
        model: model.with_temperature(best.exp())?,
        nll: best_val,
        degenerate: false,
    })
}
