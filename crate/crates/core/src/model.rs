//! Finite-sum smooth losses and the l1-regularized composite objective.
//!
//! Hessians are only available as operators. Batch sums are reduced in fixed
//! chunks, so results do not depend on the number of worker threads.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datakit::SparseDataset;
use crate::error::{Error, Result};
use crate::linalg::{norm1, LinearOperator};

/// Default l1 weight used throughout the experiments.
pub const DEFAULT_REG_WEIGHT: f64 = 0.01;

const CHUNK: usize = 512;

/// A set of component indices: the whole sample or an explicit subset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Batch {
    All,
    Indices(Vec<usize>),
}

impl Batch {
    pub fn len(&self, n_points: usize) -> usize {
        match self {
            Batch::All => n_points,
            Batch::Indices(idx) => idx.len(),
        }
    }

    pub fn is_empty(&self, n_points: usize) -> bool {
        self.len(n_points) == 0
    }

    #[inline]
    fn at(&self, j: usize) -> usize {
        match self {
            Batch::All => j,
            Batch::Indices(idx) => idx[j],
        }
    }

    /// Rejects empty subsets and out-of-range indices; returns the batch size.
    pub fn validate(&self, n_points: usize) -> Result<usize> {
        match self {
            Batch::All if n_points == 0 => Err(Error::EmptySubset),
            Batch::All => Ok(n_points),
            Batch::Indices(idx) => {
                if idx.is_empty() {
                    return Err(Error::EmptySubset);
                }
                if let Some(&index) = idx.iter().find(|&&i| i >= n_points) {
                    return Err(Error::IndexOutOfRange {
                        index,
                        len: n_points,
                    });
                }
                Ok(idx.len())
            }
        }
    }
}

/// Sum over `0..len` of vector contributions, chunked for a thread-count
/// independent reduction order.
fn chunked_vec_sum<F>(len: usize, dim: usize, item: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let partial = |lo: usize| {
        let mut acc = vec![0.0; dim];
        for j in lo..(lo + CHUNK).min(len) {
            item(j, &mut acc);
        }
        acc
    };
    if len <= CHUNK {
        return partial(0);
    }
    let parts: Vec<Vec<f64>> = (0..len.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| partial(c * CHUNK))
        .collect();
    let mut out = vec![0.0; dim];
    for p in parts {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

fn chunked_sum<F>(len: usize, item: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let partial = |lo: usize| (lo..(lo + CHUNK).min(len)).map(&item).sum::<f64>();
    if len <= CHUNK {
        return partial(0);
    }
    let parts: Vec<f64> = (0..len.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| partial(c * CHUNK))
        .collect();
    parts.into_iter().sum()
}

/// A smooth function `f = (1/N) sum_i f_i` evaluated on index batches.
pub trait SmoothLoss: Sync {
    fn n_points(&self) -> usize;
    fn dim(&self) -> usize;

    fn loss_value(&self, x: &[f64], batch: &Batch) -> Result<f64>;
    fn loss_grad(&self, x: &[f64], batch: &Batch) -> Result<Vec<f64>>;
    fn loss_hess_vec(&self, x: &[f64], batch: &Batch, v: &[f64]) -> Result<Vec<f64>>;

    /// The batch Hessian at `x` as an operator with the batch frozen.
    fn hess_operator<'a>(
        &'a self,
        x: &[f64],
        batch: &Batch,
    ) -> Result<Box<dyn LinearOperator + Send + Sync + 'a>>;

    /// A certified upper bound on the Lipschitz constant of every `grad f_i`
    /// averaged over the sample, i.e. of `grad f`.
    fn lipschitz_bound(&self) -> f64;
}

/// `psi = f + mu * ||x||_1`.
pub trait Composite: SmoothLoss {
    fn reg_weight(&self) -> f64;

    fn objective(&self, x: &[f64]) -> f64 {
        self.loss_value(x, &Batch::All)
            .expect("full batch over a nonempty sample")
            + self.reg_weight() * norm1(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `log(1 + exp(-z))`
    Logistic,
    /// `1 - tanh(z)`
    Sigmoid,
}

impl LossKind {
    #[inline]
    pub fn value(self, z: f64) -> f64 {
        match self {
            LossKind::Logistic => softplus(-z),
            LossKind::Sigmoid => 1.0 - z.tanh(),
        }
    }

    /// Derivative in `z`.
    #[inline]
    pub fn slope(self, z: f64) -> f64 {
        match self {
            LossKind::Logistic => -sigmoid(-z),
            LossKind::Sigmoid => {
                let t = z.tanh();
                -(1.0 - t * t)
            }
        }
    }

    /// Second derivative in `z`.
    #[inline]
    pub fn curvature(self, z: f64) -> f64 {
        match self {
            LossKind::Logistic => sigmoid(z) * sigmoid(-z),
            LossKind::Sigmoid => {
                let t = z.tanh();
                2.0 * t * (1.0 - t * t)
            }
        }
    }

    /// `sup_z |curvature(z)|`
    pub fn curvature_bound(self) -> f64 {
        match self {
            LossKind::Logistic => 0.25,
            LossKind::Sigmoid => 4.0 / (3.0 * 3f64.sqrt()),
        }
    }
}

#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^t)` without overflow.
#[inline]
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Linear-model loss over a sparse dataset with an l1 regularizer.
#[derive(Debug, Clone)]
pub struct CompositeProblem {
    pub dataset: Arc<SparseDataset>,
    pub loss: LossKind,
    pub reg_weight: f64,
    lipschitz: f64,
}

impl CompositeProblem {
    pub fn new(dataset: Arc<SparseDataset>, loss: LossKind, reg_weight: f64) -> Result<Self> {
        if !(reg_weight >= 0.0 && reg_weight.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "reg_weight must be a finite nonnegative number, got {reg_weight}"
            )));
        }
        if dataset.n_points() == 0 {
            return Err(Error::EmptySubset);
        }
        let n = dataset.n_points();
        let mean_sq = (0..n).map(|i| dataset.row_norm_sq(i)).sum::<f64>() / n as f64;
        let lipschitz = loss.curvature_bound() * mean_sq;
        Ok(Self {
            dataset,
            loss,
            reg_weight,
            lipschitz,
        })
    }

    #[inline]
    fn margin(&self, i: usize, x: &[f64]) -> f64 {
        self.dataset.label(i) * self.dataset.row_dot(i, x)
    }

    /// `sum_{i in batch} grad f_i(x)` (not averaged).
    pub fn grad_sum(&self, x: &[f64], batch: &Batch) -> Vec<f64> {
        let len = batch.len(self.n_points());
        chunked_vec_sum(len, self.dim(), |j, acc| {
            let i = batch.at(j);
            let z = self.margin(i, x);
            self.dataset
                .row_axpy(i, self.dataset.label(i) * self.loss.slope(z), acc);
        })
    }
}

impl SmoothLoss for CompositeProblem {
    fn n_points(&self) -> usize {
        self.dataset.n_points()
    }

    fn dim(&self) -> usize {
        self.dataset.n_features()
    }

    fn loss_value(&self, x: &[f64], batch: &Batch) -> Result<f64> {
        let len = batch.validate(self.n_points())?;
        let s = chunked_sum(len, |j| self.loss.value(self.margin(batch.at(j), x)));
        Ok(s / len as f64)
    }

    fn loss_grad(&self, x: &[f64], batch: &Batch) -> Result<Vec<f64>> {
        let len = batch.validate(self.n_points())?;
        let mut g = self.grad_sum(x, batch);
        let inv = 1.0 / len as f64;
        g.iter_mut().for_each(|v| *v *= inv);
        Ok(g)
    }

    fn loss_hess_vec(&self, x: &[f64], batch: &Batch, v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.hess_operator(x, batch)?.apply_vec(v))
    }

    fn hess_operator<'a>(
        &'a self,
        x: &[f64],
        batch: &Batch,
    ) -> Result<Box<dyn LinearOperator + Send + Sync + 'a>> {
        let len = batch.validate(self.n_points())?;
        let inv = 1.0 / len as f64;
        let (rows, weights) = (0..len)
            .map(|j| {
                let i = batch.at(j);
                (i, inv * self.loss.curvature(self.margin(i, x)))
            })
            .unzip();
        Ok(Box::new(SampledHessian {
            dataset: &self.dataset,
            rows,
            weights,
        }))
    }

    fn lipschitz_bound(&self) -> f64 {
        self.lipschitz
    }
}

impl Composite for CompositeProblem {
    fn reg_weight(&self) -> f64 {
        self.reg_weight
    }
}

/// `v -> sum_j w_j <a_j, v> a_j` over a frozen batch.
struct SampledHessian<'a> {
    dataset: &'a SparseDataset,
    rows: Vec<usize>,
    weights: Vec<f64>,
}

impl LinearOperator for SampledHessian<'_> {
    fn dim(&self) -> usize {
        self.dataset.n_features()
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let acc = chunked_vec_sum(self.rows.len(), self.dim(), |j, acc| {
            let i = self.rows[j];
            let c = self.weights[j] * self.dataset.row_dot(i, v);
            if c != 0.0 {
                self.dataset.row_axpy(i, c, acc);
            }
        });
        out.copy_from_slice(&acc);
    }
}

/// Adds `(c/2) ||x||^2` to every component of an inner loss, which makes the
/// loss `c`-strongly convex whenever the inner loss is convex.
#[derive(Debug, Clone)]
pub struct L2Augmented<P> {
    pub inner: P,
    pub l2: f64,
}

impl<P> L2Augmented<P> {
    pub fn new(inner: P, l2: f64) -> Self {
        Self { inner, l2 }
    }
}

struct ShiftedOperator<'a> {
    inner: Box<dyn LinearOperator + Send + Sync + 'a>,
    shift: f64,
}

impl LinearOperator for ShiftedOperator<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        self.inner.apply(v, out);
        for (o, vi) in out.iter_mut().zip(v) {
            *o += self.shift * vi;
        }
    }
}

impl<P: SmoothLoss> SmoothLoss for L2Augmented<P> {
    fn n_points(&self) -> usize {
        self.inner.n_points()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn loss_value(&self, x: &[f64], batch: &Batch) -> Result<f64> {
        Ok(self.inner.loss_value(x, batch)? + 0.5 * self.l2 * crate::linalg::dot(x, x))
    }

    fn loss_grad(&self, x: &[f64], batch: &Batch) -> Result<Vec<f64>> {
        let mut g = self.inner.loss_grad(x, batch)?;
        crate::linalg::axpy(self.l2, x, &mut g);
        Ok(g)
    }

    fn loss_hess_vec(&self, x: &[f64], batch: &Batch, v: &[f64]) -> Result<Vec<f64>> {
        let mut h = self.inner.loss_hess_vec(x, batch, v)?;
        crate::linalg::axpy(self.l2, v, &mut h);
        Ok(h)
    }

    fn hess_operator<'a>(
        &'a self,
        x: &[f64],
        batch: &Batch,
    ) -> Result<Box<dyn LinearOperator + Send + Sync + 'a>> {
        Ok(Box::new(ShiftedOperator {
            inner: self.inner.hess_operator(x, batch)?,
            shift: self.l2,
        }))
    }

    fn lipschitz_bound(&self) -> f64 {
        self.inner.lipschitz_bound() + self.l2
    }
}

impl<P: Composite> Composite for L2Augmented<P> {
    fn reg_weight(&self) -> f64 {
        self.inner.reg_weight()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::{synth_binary, SynthSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(loss: LossKind, n_points: usize, seed: u64) -> CompositeProblem {
        let ds = synth_binary(&SynthSpec {
            n_points,
            n_features: 12,
            density: 0.5,
            seed,
            noise: 0.1,
        })
        .unwrap();
        CompositeProblem::new(Arc::new(ds), loss, 0.01).unwrap()
    }

    fn one_point(a: f64, b: f64) -> CompositeProblem {
        let ds = SparseDataset::from_rows(vec![vec![(0, a)]], vec![b], 1).unwrap();
        CompositeProblem::new(Arc::new(ds), LossKind::Logistic, 0.01).unwrap()
    }

    #[test]
    fn values_at_origin() {
        for n in [1, 7, 600, 1500] {
            let p = small(LossKind::Logistic, n, 1);
            let x = vec![0.0; 12];
            assert!((p.loss_value(&x, &Batch::All).unwrap() - 2f64.ln()).abs() < 1e-14);
            assert!((p.objective(&x) - 2f64.ln()).abs() < 1e-14);
            let q = small(LossKind::Sigmoid, n, 1);
            assert_eq!(q.loss_value(&x, &Batch::Indices(vec![0])).unwrap(), 1.0);
        }
    }

    #[test]
    fn logistic_matches_high_precision_value() {
        let p = one_point(1.0, 1.0);
        let v = p.loss_value(&[35.0], &Batch::All).unwrap();
        let oracle = 6.305_116_760_146_987e-16;
        assert!(((v - oracle) / oracle).abs() < 1e-12, "{v}");
        let v = p.loss_value(&[-35.0], &Batch::All).unwrap();
        let oracle = 35.000_000_000_000_000_630_511_676;
        assert!(((v - oracle) / oracle).abs() < 1e-12, "{v}");
        assert!(p.loss_value(&[-1e4], &Batch::All).unwrap().is_finite());
    }

    #[test]
    fn logistic_gradient_at_origin() {
        let p = small(LossKind::Logistic, 30, 2);
        let batch = Batch::Indices(vec![3, 5, 8]);
        let g = p.loss_grad(&[0.0; 12], &batch).unwrap();
        let mut expect = vec![0.0; 12];
        for &i in &[3, 5, 8] {
            p.dataset.row_axpy(i, -p.dataset.label(i) / 6.0, &mut expect);
        }
        for (a, b) in g.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn one_zero_row_objective() {
        let ds = SparseDataset::from_rows(vec![vec![]], vec![1.0], 1).unwrap();
        let p = CompositeProblem::new(Arc::new(ds), LossKind::Logistic, 0.01).unwrap();
        assert!((p.objective(&[2.0]) - (2f64.ln() + 0.02)).abs() < 1e-15);
    }

    #[test]
    fn empty_and_out_of_range_batches_are_rejected() {
        let p = small(LossKind::Logistic, 10, 3);
        let x = vec![0.0; 12];
        assert!(matches!(
            p.loss_value(&x, &Batch::Indices(vec![])),
            Err(Error::EmptySubset)
        ));
        assert!(matches!(
            p.loss_grad(&x, &Batch::Indices(vec![10])),
            Err(Error::IndexOutOfRange { index: 10, len: 10 })
        ));
        assert!(p.hess_operator(&x, &Batch::Indices(vec![])).is_err());
    }

    #[test]
    fn negative_reg_weight_is_rejected() {
        let ds = SparseDataset::from_rows(vec![vec![]], vec![1.0], 1).unwrap();
        assert!(CompositeProblem::new(Arc::new(ds), LossKind::Logistic, -1.0).is_err());
    }

    #[test]
    fn full_gradient_is_mean_of_components() {
        for loss in [LossKind::Logistic, LossKind::Sigmoid] {
            let p = small(loss, 1300, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let full = p.loss_grad(&x, &Batch::All).unwrap();
            let mut mean = vec![0.0; 12];
            for i in 0..p.n_points() {
                let gi = p.loss_grad(&x, &Batch::Indices(vec![i])).unwrap();
                crate::linalg::axpy(1.0 / p.n_points() as f64, &gi, &mut mean);
            }
            for (a, b) in full.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-14, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn sigmoid_curvature_is_second_derivative() {
        for &z in &[-2.0, -0.3, 0.0, 0.7, 3.0] {
            let h = 1e-5;
            let fd = (LossKind::Sigmoid.slope(z + h) - LossKind::Sigmoid.slope(z - h)) / (2.0 * h);
            assert!((fd - LossKind::Sigmoid.curvature(z)).abs() < 1e-8);
            let fd = (LossKind::Logistic.slope(z + h) - LossKind::Logistic.slope(z - h)) / (2.0 * h);
            assert!((fd - LossKind::Logistic.curvature(z)).abs() < 1e-8);
        }
    }

    #[test]
    fn hess_vec_of_zero_is_zero() {
        let p = small(LossKind::Sigmoid, 20, 5);
        let x = vec![0.3; 12];
        let h = p.loss_hess_vec(&x, &Batch::All, &[0.0; 12]).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lipschitz_bound_dominates_hessian() {
        let p = small(LossKind::Logistic, 50, 6);
        let op = p.hess_operator(&[0.0; 12], &Batch::All).unwrap();
        // power iteration estimate of the spectral norm stays below the bound
        let mut v = vec![1.0; 12];
        for _ in 0..200 {
            let w = op.apply_vec(&v);
            let nw = crate::linalg::norm(&w);
            v = w.iter().map(|x| x / nw).collect();
        }
        let est = crate::linalg::dot(&v, &op.apply_vec(&v));
        assert!(est <= p.lipschitz_bound() * (1.0 + 1e-12));
    }

    #[test]
    fn l2_augmentation_shifts_everything() {
        let p = small(LossKind::Logistic, 20, 7);
        let q = L2Augmented::new(p.clone(), 0.5);
        let x = vec![1.0; 12];
        let v: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let dv = q.loss_value(&x, &Batch::All).unwrap() - p.loss_value(&x, &Batch::All).unwrap();
        assert!((dv - 3.0).abs() < 1e-12);
        let h1 = q.loss_hess_vec(&x, &Batch::All, &v).unwrap();
        let h2 = q.hess_operator(&x, &Batch::All).unwrap().apply_vec(&v);
        let h0 = p.loss_hess_vec(&x, &Batch::All, &v).unwrap();
        for i in 0..12 {
            assert!((h1[i] - h0[i] - 0.5 * v[i]).abs() < 1e-14);
            assert_eq!(h1[i], h2[i]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn subset_additivity(seed in 0u64..1000, split in 1usize..39) {
            for loss in [LossKind::Logistic, LossKind::Sigmoid] {
                let p = small(loss, 40, seed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
                let a: Vec<usize> = (0..split).collect();
                let b: Vec<usize> = (split..40).collect();
                let va = p.loss_value(&x, &Batch::Indices(a)).unwrap();
                let vb = p.loss_value(&x, &Batch::Indices(b)).unwrap();
                let all = p.loss_value(&x, &Batch::All).unwrap();
                let mix = (split as f64 * va + (40 - split) as f64 * vb) / 40.0;
                prop_assert!((all - mix).abs() <= 1e-14 * all.abs().max(1.0));
            }
        }

        #[test]
        fn loss_ranges(z in -50.0f64..50.0) {
            let s = LossKind::Sigmoid.value(z);
            prop_assert!((0.0..=2.0).contains(&s));
            prop_assert!(LossKind::Logistic.value(z) > 0.0);
        }

        #[test]
        fn logistic_hessian_is_psd(seed in 0u64..10_000) {
            let p = small(LossKind::Logistic, 25, seed % 7);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..12).map(|_| rng.random_range(-5.0..5.0)).collect();
            let v: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let hv = p.loss_hess_vec(&x, &Batch::All, &v).unwrap();
            prop_assert!(crate::linalg::dot(&v, &hv) >= 0.0);
        }
    }
}
