//! Kernel-embedding calibration statistics over confidences in [0, 1].
//!
//! Everything is evaluated through the kernel trick; feature maps are never
//! formed. Pair sums run over rows in index order so that identical inputs
//! give bit-identical results.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Laplace kernel `k(a, b) = exp(-|a - b| / sigma)`; `k(a, a) = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec<T> {
    sigma: T,
}

impl<T: Scalar> KernelSpec<T> {
    pub fn laplace(sigma: T) -> Result<Self> {
        if !(sigma > T::zero() && sigma.is_finite()) {
            return Err(Error::param(format!("kernel bandwidth must be positive, got {sigma}")));
        }
        Ok(KernelSpec { sigma })
    }

    pub fn sigma(&self) -> T {
        self.sigma
    }

    #[inline]
    pub fn eval(&self, a: T, b: T) -> T {
        (-(a - b).abs() / self.sigma).exp()
    }

    /// `max_a k(a, a)`, which is 1 for the Laplace kernel.
    pub fn diagonal_bound(&self) -> T {
        T::one()
    }
}

impl<T: Scalar> Default for KernelSpec<T> {
    fn default() -> Self {
        KernelSpec { sigma: T::lit(0.2) }
    }
}

pub fn kernel_eval<T: Scalar>(spec: &KernelSpec<T>, r1: T, r2: T) -> T {
    spec.eval(r1, r2)
}

/// Confidences `r`, label bits `y` and selector weights `g`, one entry per
/// example. For binary tasks `y` is the raw label and `r = f(x)`; for
/// multi-class tasks they are the top-label correctness and confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredBatch<T> {
    r: Vec<T>,
    y: Vec<T>,
    g: Vec<T>,
}

impl<T: Scalar> ScoredBatch<T> {
    pub fn new(r: Vec<T>, y: Vec<T>, g: Vec<T>) -> Result<Self> {
        if r.len() != y.len() || r.len() != g.len() {
            return Err(Error::param(format!(
                "batch columns have lengths {}, {}, {}",
                r.len(),
                y.len(),
                g.len()
            )));
        }
        let unit = |v: &T| *v >= T::zero() && *v <= T::one();
        if !r.iter().all(unit) {
            return Err(Error::param("confidences must lie in [0, 1]"));
        }
        if !y.iter().all(|v| *v == T::zero() || *v == T::one()) {
            return Err(Error::param("labels must be 0 or 1"));
        }
        if !g.iter().all(unit) {
            return Err(Error::param("selector scores must lie in [0, 1]"));
        }
        Ok(ScoredBatch { r, y, g })
    }

    /// Batch with every example selected.
    pub fn unselected(r: Vec<T>, y: Vec<T>) -> Result<Self> {
        let g = vec![T::one(); r.len()];
        Self::new(r, y, g)
    }

    pub fn from_bits(r: Vec<T>, y: &[bool], g: &[bool]) -> Result<Self> {
        let bit = |b: &bool| if *b { T::one() } else { T::zero() };
        Self::new(r, y.iter().map(bit).collect(), g.iter().map(bit).collect())
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn r(&self) -> &[T] {
        &self.r
    }

    pub fn y(&self) -> &[T] {
        &self.y
    }

    pub fn g(&self) -> &[T] {
        &self.g
    }

    pub fn with_selection(&self, g: Vec<T>) -> Result<Self> {
        Self::new(self.r.clone(), self.y.clone(), g)
    }

    /// True when every `g` is exactly 0 or 1.
    pub fn is_hard(&self) -> bool {
        self.g.iter().all(|v| *v == T::zero() || *v == T::one())
    }

    pub fn selected_count(&self) -> usize {
        self.g.iter().filter(|v| **v == T::one()).count()
    }

    /// Rows at `indices` with their selection weights.
    pub fn sub_batch(&self, indices: &[usize]) -> Self {
        ScoredBatch {
            r: indices.iter().map(|&i| self.r[i]).collect(),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            g: indices.iter().map(|&i| self.g[i]).collect(),
        }
    }

    /// The selected rows of a hard batch, with `g ≡ 1`.
    pub fn selected(&self) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.g[i] == T::one()).collect();
        self.sub_batch(&idx)
    }

    pub(crate) fn require_hard(&self) -> Result<()> {
        if !self.is_hard() {
            return Err(Error::param("operation needs a hard (0/1) selection"));
        }
        Ok(())
    }
}

fn check_q<T: Scalar>(q: T) -> Result<()> {
    if !(q >= T::one() && q.is_finite()) {
        return Err(Error::param(format!("q must be a finite real >= 1, got {q}")));
    }
    Ok(())
}

/// Row-major Gram matrix `[k(r_i, r_j)]`.
pub fn gram_matrix<T: Scalar>(r: &[T], kernel: &KernelSpec<T>) -> Vec<T> {
    let n = r.len();
    let mut out = vec![T::zero(); n * n];
    for i in 0..n {
        out[i * n + i] = T::one();
        for j in i + 1..n {
            let k = kernel.eval(r[i], r[j]);
            out[i * n + j] = k;
            out[j * n + i] = k;
        }
    }
    out
}

/// Symmetric pair sum `Σ_ij w_i w_j k(r_i, r_j)` over the upper triangle,
/// rows in index order.
fn weighted_pair_sum<T: Scalar>(r: &[T], w: &[T], kernel: &KernelSpec<T>) -> T {
    let n = r.len();
    let two = T::lit(2.0);
    let mut total = T::zero();
    for i in 0..n {
        let wi = w[i];
        if wi.is_zero() {
            continue;
        }
        let mut row = T::zero();
        for j in i + 1..n {
            if !w[j].is_zero() {
                row += w[j] * kernel.eval(r[i], r[j]);
            }
        }
        total += wi * (wi + two * row);
    }
    total
}

/// Squared empirical MMCE, `(1/n²) Σ_ij (y_i - r_i)(y_j - r_j) k(r_i, r_j)`,
/// over the whole batch with signed residuals. Selector weights are ignored.
pub fn empirical_mmce_sq<T: Scalar>(batch: &ScoredBatch<T>, kernel: &KernelSpec<T>) -> Result<T> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::InsufficientData {
            context: "MMCE".into(),
            needed: 2,
            got: n,
        });
    }
    let resid: Vec<T> = batch.y.iter().zip(&batch.r).map(|(y, r)| *y - *r).collect();
    let nn = T::count(n);
    Ok(weighted_pair_sum(&batch.r, &resid, kernel) / (nn * nn))
}

/// Kernel-trick estimate of the selective upper-bound statistic:
///
/// `( Σ_ij |y_i-r_i|^q |y_j-r_j|^q g_i g_j k(r_i,r_j) / Σ_ij g_i g_j )^(1/q)`.
pub fn empirical_smmce_u<T: Scalar>(batch: &ScoredBatch<T>, q: T, kernel: &KernelSpec<T>) -> Result<T> {
    check_q(q)?;
    let gsum: T = batch.g.iter().copied().sum();
    if !(gsum > T::zero()) {
        return Err(Error::DegenerateSelection("all selector weights are zero".into()));
    }
    let w: Vec<T> = batch
        .y
        .iter()
        .zip(&batch.r)
        .zip(&batch.g)
        .map(|((y, r), g)| (*y - *r).abs().powf(q) * *g)
        .collect();
    let num = weighted_pair_sum(&batch.r, &w, kernel).max(T::zero());
    Ok((num / (gsum * gsum)).powf(T::one() / q))
}

/// The same statistic as [`empirical_smmce_u`], written as a literal double
/// loop over all ordered pairs for both sums. Used as a reference.
pub fn naive_smmce_u<T: Scalar>(batch: &ScoredBatch<T>, q: T, kernel: &KernelSpec<T>) -> Result<T> {
    check_q(q)?;
    let n = batch.len();
    let mut num = T::zero();
    let mut den = T::zero();
    for i in 0..n {
        for j in 0..n {
            let ei = (batch.y[i] - batch.r[i]).abs().powf(q);
            let ej = (batch.y[j] - batch.r[j]).abs().powf(q);
            let gg = batch.g[i] * batch.g[j];
            num += ei * ej * gg * kernel.eval(batch.r[i], batch.r[j]);
            den += gg;
        }
    }
    if !(den > T::zero()) {
        return Err(Error::DegenerateSelection("all selector weights are zero".into()));
    }
    Ok((num / den).powf(T::one() / q))
}

/// Plug-in selective statistic with a known conditional `cond(r) = E[Y | V = r]`
/// over the selected rows of a hard batch:
/// `( Σ_ij e_i e_j k(r_i, r_j) / (Σ g)² )^(1/q)` with `e_i = |cond(r_i) - r_i|^q`.
pub fn plug_in_smmce<T, F>(batch: &ScoredBatch<T>, cond: F, q: T, kernel: &KernelSpec<T>) -> Result<T>
where
    T: Scalar,
    F: Fn(T) -> T,
{
    check_q(q)?;
    batch.require_hard()?;
    let sel = batch.selected();
    if sel.is_empty() {
        return Err(Error::DegenerateSelection("no selected examples".into()));
    }
    let e: Vec<T> = sel.r.iter().map(|r| (cond(*r) - *r).abs().powf(q)).collect();
    let m = T::count(sel.len());
    let num = weighted_pair_sum(&sel.r, &e, kernel).max(T::zero());
    Ok((num / (m * m)).powf(T::one() / q))
}

/// Selective calibration error computed from a known conditional,
/// `( mean_selected |cond(r) - r|^q )^(1/q)`.
pub fn plug_in_sbce<T, F>(batch: &ScoredBatch<T>, cond: F, q: T) -> Result<T>
where
    T: Scalar,
    F: Fn(T) -> T,
{
    check_q(q)?;
    batch.require_hard()?;
    let sel = batch.selected();
    if sel.is_empty() {
        return Err(Error::DegenerateSelection("no selected examples".into()));
    }
    let total: T = sel.r.iter().map(|r| (cond(*r) - *r).abs().powf(q)).sum();
    Ok((total / T::count(sel.len())).powf(T::one() / q))
}
