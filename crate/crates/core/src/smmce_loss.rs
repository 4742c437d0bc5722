//! Regularized selector training loss and its gradient with respect to the
//! soft selector scores.
//!
//! ```text
//! L = ( (λ₁/n²) Σ_ij c_ij g_i g_j )^(1/q) − (λ₂/n) Σ_i log g_i
//! c_ij = |y_i − r_i|^q |y_j − r_j|^q k(r_i, r_j)
//! ```

use crate::error::{Error, Result};
use crate::kernelstats::{KernelSpec, ScoredBatch};
use crate::scalar::Scalar;

/// Floor on the inner sum before raising it to `1/q - 1` in the gradient.
pub const INNER_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig<T> {
    pub q: T,
    pub lambda1: T,
    pub lambda2: T,
    pub kernel: KernelSpec<T>,
}

impl<T: Scalar> Default for LossConfig<T> {
    fn default() -> Self {
        LossConfig {
            q: T::lit(2.0),
            lambda1: T::lit(1024.0),
            lambda2: T::lit(1e-3),
            kernel: KernelSpec::default(),
        }
    }
}

impl<T: Scalar> LossConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.q >= T::one() && self.q.is_finite()) {
            return Err(Error::param("q must be a finite real >= 1"));
        }
        if !(self.lambda1 >= T::zero() && self.lambda2 >= T::zero()) {
            return Err(Error::param("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// The `c_ij` matrix for fixed `(r, y)`; reused across selector updates
/// within one step.
#[derive(Debug, Clone)]
pub struct PairCoefficients<T> {
    n: usize,
    c: Vec<T>,
}

impl<T: Scalar> PairCoefficients<T> {
    pub fn new(r: &[T], y: &[T], cfg: &LossConfig<T>) -> Self {
        let n = r.len();
        let e: Vec<T> = r.iter().zip(y).map(|(r, y)| (*y - *r).abs().powf(cfg.q)).collect();
        let mut c = vec![T::zero(); n * n];
        for i in 0..n {
            c[i * n + i] = e[i] * e[i];
            if e[i].is_zero() {
                continue;
            }
            for j in i + 1..n {
                let v = e[i] * e[j] * cfg.kernel.eval(r[i], r[j]);
                c[i * n + j] = v;
                c[j * n + i] = v;
            }
        }
        PairCoefficients { n, c }
    }

    pub fn from_batch(batch: &ScoredBatch<T>, cfg: &LossConfig<T>) -> Self {
        Self::new(batch.r(), batch.y(), cfg)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// `(Σ_j c_ij g_j)_i`.
    fn row_products(&self, g: &[T]) -> Vec<T> {
        self.c
            .chunks_exact(self.n)
            .map(|row| row.iter().zip(g).map(|(c, g)| *c * *g).sum())
            .collect()
    }

    /// The inner sum `A = (λ₁/n²) Σ_ij c_ij g_i g_j` together with the row
    /// products it was built from.
    fn inner(&self, g: &[T], cfg: &LossConfig<T>) -> (T, Vec<T>) {
        let rows = self.row_products(g);
        let quad: T = rows.iter().zip(g).map(|(s, g)| *s * *g).sum();
        let nn = T::count(self.n);
        ((cfg.lambda1 / (nn * nn) * quad).max(T::zero()), rows)
    }

    fn check(&self, g: &[T]) -> Result<()> {
        if g.len() != self.n {
            return Err(Error::param("one selector score per example required"));
        }
        if self.n < 2 {
            return Err(Error::InsufficientData {
                context: "regularized loss".into(),
                needed: 2,
                got: self.n,
            });
        }
        if g.iter().any(|v| !v.is_finite() || *v <= T::zero()) {
            return Err(Error::Numeric("selector scores must be finite and positive".into()));
        }
        Ok(())
    }

    pub fn value(&self, g: &[T], cfg: &LossConfig<T>) -> Result<T> {
        self.check(g)?;
        let (a, _) = self.inner(g, cfg);
        let n = T::count(self.n);
        let barrier: T = g.iter().map(|v| v.ln()).sum::<T>() * cfg.lambda2 / n;
        Ok(a.powf(T::one() / cfg.q) - barrier)
    }

    /// Loss value and `d L / d g_i` for every example.
    pub fn value_and_grad(&self, g: &[T], cfg: &LossConfig<T>) -> Result<(T, Vec<T>)> {
        self.check(g)?;
        let (a, rows) = self.inner(g, cfg);
        let n = T::count(self.n);
        let inv_q = T::one() / cfg.q;
        let barrier: T = g.iter().map(|v| v.ln()).sum::<T>() * cfg.lambda2 / n;
        let value = a.powf(inv_q) - barrier;
        let scale = if a.is_zero() && cfg.q > T::one() {
            T::zero()
        } else {
            inv_q * a.max(T::lit(INNER_FLOOR)).powf(inv_q - T::one()) * cfg.lambda1 / (n * n) * T::lit(2.0)
        };
        let grad = rows
            .iter()
            .zip(g)
            .map(|(s, gi)| scale * *s - cfg.lambda2 / (n * *gi))
            .collect();
        Ok((value, grad))
    }
}

fn finite_batch<T: Scalar>(batch: &ScoredBatch<T>) -> Result<()> {
    if batch
        .r()
        .iter()
        .chain(batch.y())
        .chain(batch.g())
        .any(|v| !v.is_finite())
    {
        return Err(Error::Numeric("non-finite batch entry".into()));
    }
    Ok(())
}

/// Loss on a batch whose `g` holds soft selector scores.
pub fn loss_value<T: Scalar>(batch: &ScoredBatch<T>, cfg: &LossConfig<T>) -> Result<T> {
    cfg.validate()?;
    finite_batch(batch)?;
    PairCoefficients::from_batch(batch, cfg).value(batch.g(), cfg)
}

/// `d L / d g_i` for every example of the batch.
pub fn loss_grad_scores<T: Scalar>(batch: &ScoredBatch<T>, cfg: &LossConfig<T>) -> Result<Vec<T>> {
    cfg.validate()?;
    finite_batch(batch)?;
    PairCoefficients::from_batch(batch, cfg)
        .value_and_grad(batch.g(), cfg)
        .map(|(_, g)| g)
}
