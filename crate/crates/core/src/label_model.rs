//! Community priors, the whitened label embedding, and sampling of labels
//! and covariates.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;
use crate::scalar::Real;

/// Prior over `k` communities together with its whitened embedding.
///
/// Row `a` of `mu` is the label vector `μ_a ∈ R^{k-1}`; under the prior the
/// vectors have zero mean and identity second moment.
#[derive(Debug, Clone, PartialEq)]
pub struct CommunityModel<T: Real = f64> {
    k: usize,
    p: Vec<T>,
    mu: DMatrix<T>,
}

impl<T: Real> CommunityModel<T> {
    /// Build the whitened embedding for prior `p`.
    ///
    /// Community `a` starts as `e_a − p` in `R^k`. The centered second moment
    /// `C = diag(p) − ppᵀ` has rank `k−1` with null vector `1`; its top `k−1`
    /// eigenvectors `Q` (descending eigenvalue, canonical basis inside
    /// degenerate eigenspaces, first nonzero coordinate positive) give
    /// `μ_a = Λ^{-1/2} Qᵀ (e_a − p)`.
    pub fn whiten(p: &[T]) -> Result<Self> {
        let k = p.len();
        if k < 2 {
            return Err(Error::InvalidPrior(format!("need k >= 2 communities, got {k}")));
        }
        for (a, &pa) in p.iter().enumerate() {
            if !(pa > T::zero()) || !pa.is_finite() {
                return Err(Error::InvalidPrior(format!("p[{a}] = {pa} must be positive")));
            }
        }
        let total = p.iter().fold(T::zero(), |s, &x| s + x);
        if (total - T::one()).abs() > T::lit(1e-9).max(T::check_tol()) {
            return Err(Error::InvalidPrior(format!("probabilities sum to {total}, not 1")));
        }
        let p: Vec<T> = p.iter().map(|&x| x / total).collect();
        let pv = DVector::from_column_slice(&p);
        let second = DMatrix::from_diagonal(&pv) - &pv * pv.transpose();
        let (vals, vecs) = linalg::sorted_eigen(&second);
        let basis = canonical_basis(&vals, &vecs, k - 1);

        let mut mu = DMatrix::zeros(k, k - 1);
        for a in 0..k {
            let mut centered = -pv.clone();
            centered[a] += T::one();
            for j in 0..k - 1 {
                let q = basis.column(j);
                let lambda = q.dot(&(&second * q));
                mu[(a, j)] = q.dot(&centered) / lambda.sqrt();
            }
        }
        Ok(Self { k, p, mu })
    }

    /// Uniform prior on `k` communities.
    pub fn uniform(k: usize) -> Result<Self> {
        let pa = T::one() / T::of_usize(k.max(1));
        Self::whiten(&vec![pa; k])
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Embedding dimension `k − 1`.
    pub fn dim(&self) -> usize {
        self.k - 1
    }

    pub fn p(&self) -> &[T] {
        &self.p
    }

    /// `k × (k−1)` matrix whose rows are the label vectors.
    pub fn mu(&self) -> &DMatrix<T> {
        &self.mu
    }

    pub fn mu_row(&self, a: usize) -> DVector<T> {
        self.mu.row(a).transpose()
    }

    /// Label entropy `H(p)` in nats.
    pub fn entropy(&self) -> T {
        self.p.iter().fold(T::zero(), |h, &pa| h - pa * pa.ln())
    }

    pub fn mean(&self) -> DVector<T> {
        let mut m = DVector::zeros(self.dim());
        for a in 0..self.k {
            m += self.mu_row(a) * self.p[a];
        }
        m
    }

    pub fn second_moment(&self) -> DMatrix<T> {
        let mut c = DMatrix::zeros(self.dim(), self.dim());
        for a in 0..self.k {
            let v = self.mu_row(a);
            c += &v * v.transpose() * self.p[a];
        }
        c
    }

    /// Largest deviation from the two whitening constraints.
    pub fn whitening_error(&self) -> T {
        let mean_err = self.mean().amax();
        let eye = DMatrix::<T>::identity(self.dim(), self.dim());
        let cov_err = (self.second_moment() - eye).amax();
        mean_err.max(cov_err)
    }

    /// Posterior mean `Σ_a w_a μ_a` for community weights `w`.
    pub fn weighted_mean(&self, w: &[T]) -> DVector<T> {
        let mut m = DVector::zeros(self.dim());
        for (a, &wa) in w.iter().enumerate() {
            m += self.mu_row(a) * wa;
        }
        m
    }

    /// Posterior covariance `Σ_a w_a μ_a μ_aᵀ − m mᵀ`.
    pub fn weighted_cov(&self, w: &[T]) -> DMatrix<T> {
        let m = self.weighted_mean(w);
        let mut c = DMatrix::zeros(self.dim(), self.dim());
        for (a, &wa) in w.iter().enumerate() {
            let v = self.mu_row(a);
            c += &v * v.transpose() * wa;
        }
        c - &m * m.transpose()
    }

    pub fn to_f64(&self) -> CommunityModel<f64> {
        CommunityModel {
            k: self.k,
            p: self.p.iter().map(|x| x.as_f64()).collect(),
            mu: linalg::to_f64(&self.mu),
        }
    }
}

/// Orthonormal basis for the span of the leading `m` eigenvectors. Inside a
/// group of (numerically) equal eigenvalues the eigenvectors are not unique,
/// so the group is re-spanned by Gram–Schmidt on the projections of `e_1, e_2, …`.
fn canonical_basis<T: Real>(vals: &DVector<T>, vecs: &DMatrix<T>, m: usize) -> DMatrix<T> {
    let n = vecs.nrows();
    let mut out = DMatrix::zeros(n, m);
    let scale = vals[0].abs().max(T::lit(1e-300));
    let group_tol = scale * T::lit(1e-9).max(T::check_tol() * T::lit(10.0));
    let mut start = 0;
    while start < m {
        let mut end = start + 1;
        while end < m && (vals[start] - vals[end]).abs() <= group_tol {
            end += 1;
        }
        if end - start == 1 {
            out.set_column(start, &vecs.column(start));
        } else {
            let group = vecs.columns(start, end - start).into_owned();
            let proj = &group * group.transpose();
            let mut picked: Vec<DVector<T>> = Vec::new();
            for e in 0..n {
                if picked.len() == end - start {
                    break;
                }
                let mut v = proj.column(e).into_owned();
                for q in &picked {
                    let c = q.dot(&v);
                    v -= q * c;
                }
                let norm = v.norm();
                if norm > T::lit(1e-6) {
                    v /= norm;
                    linalg::orient(&mut v);
                    picked.push(v);
                }
            }
            for (off, v) in picked.into_iter().enumerate() {
                out.set_column(start + off, &v);
            }
        }
        start = end;
    }
    out
}

/// Erasure-plus-Gaussian side-information channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSpec<T: Real = f64> {
    alpha: T,
    snr: DMatrix<T>,
}

impl<T: Real> ChannelSpec<T> {
    /// Validates `0 ≤ α ≤ 1`, symmetry of `S`, and PSD-ness up to `-1e-10`
    /// (small negative eigenvalues are clipped).
    pub fn new(alpha: T, snr: DMatrix<T>) -> Result<Self> {
        if !(alpha >= T::zero() && alpha <= T::one()) {
            return Err(Error::InvalidChannel(format!("alpha = {alpha} outside [0, 1]")));
        }
        if snr.nrows() != snr.ncols() {
            return Err(Error::InvalidChannel("S must be square".into()));
        }
        if snr.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidChannel("S has non-finite entries".into()));
        }
        let asym = (&snr - snr.transpose()).amax();
        let scale = snr.amax().max(T::one());
        if asym > T::check_tol() * scale {
            return Err(Error::InvalidChannel(format!("S is not symmetric (max |S - Sᵀ| = {asym})")));
        }
        let tol = T::check_tol() * scale;
        let snr = linalg::clip_psd(&snr, tol)
            .map_err(|_| Error::InvalidChannel("S has a negative eigenvalue".into()))?;
        Ok(Self { alpha, snr })
    }

    /// No side information: `α = 0`, `S = 0`.
    pub fn none(dim: usize) -> Self {
        Self { alpha: T::zero(), snr: DMatrix::zeros(dim, dim) }
    }

    pub fn erasure(alpha: T, dim: usize) -> Result<Self> {
        Self::new(alpha, DMatrix::zeros(dim, dim))
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn snr(&self) -> &DMatrix<T> {
        &self.snr
    }

    pub fn dim(&self) -> usize {
        self.snr.nrows()
    }

    pub fn with_snr(&self, snr: DMatrix<T>) -> Result<Self> {
        Self::new(self.alpha, snr)
    }

    pub fn with_alpha(&self, alpha: T) -> Result<Self> {
        Self::new(alpha, self.snr.clone())
    }

    pub fn to_f64(&self) -> ChannelSpec<f64> {
        ChannelSpec { alpha: self.alpha.as_f64(), snr: linalg::to_f64(&self.snr) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSample {
    pub n: usize,
    pub assignments: Vec<usize>,
    /// `n × (k−1)`; row `i` is `μ_{assignments[i]}`.
    pub vectors: DMatrix<f64>,
    pub seed: u64,
}

impl LabelSample {
    /// Build a sample from explicit assignments.
    pub fn from_assignments<T: Real>(model: &CommunityModel<T>, assignments: Vec<usize>, seed: u64) -> Result<Self> {
        let n = assignments.len();
        let mut vectors = DMatrix::zeros(n, model.dim());
        for (i, &a) in assignments.iter().enumerate() {
            if a >= model.k() {
                return Err(Error::Shape(format!("node {i} assigned to community {a} >= k")));
            }
            for j in 0..model.dim() {
                vectors[(i, j)] = model.mu()[(a, j)].as_f64();
            }
        }
        Ok(Self { n, assignments, vectors, seed })
    }

    pub fn community_counts(&self, k: usize) -> Vec<usize> {
        let mut counts = vec![0; k];
        for &a in &self.assignments {
            counts[a] += 1;
        }
        counts
    }
}

/// Draw `n` i.i.d. labels from the prior.
pub fn sample_labels<T: Real>(model: &CommunityModel<T>, n: usize, seed: u64) -> Result<LabelSample> {
    if n == 0 {
        return Err(Error::InvalidParameter("need at least one node".into()));
    }
    let mut rng = rng::child(seed, &[rng::stream::LABELS]);
    let weights: Vec<f64> = model.p().iter().map(|x| x.as_f64()).collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::InvalidPrior(e.to_string()))?;
    let assignments = (0..n).map(|_| dist.sample(&mut rng)).collect();
    LabelSample::from_assignments(model, assignments, seed)
}

/// Per-node side information.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateSample {
    /// `Some(a)` when the erasure channel revealed community `a`.
    pub revealed: Vec<Option<usize>>,
    /// Gaussian observations `Ỹ = S^{1/2} X + N`, `n × (k−1)`.
    pub gaussian: Option<DMatrix<f64>>,
}

impl CovariateSample {
    /// No side information at all for `n` nodes.
    pub fn empty(n: usize) -> Self {
        Self { revealed: vec![None; n], gaussian: None }
    }

    pub fn n(&self) -> usize {
        self.revealed.len()
    }

    pub fn revealed_count(&self) -> usize {
        self.revealed.iter().filter(|r| r.is_some()).count()
    }
}

/// Pass each label through the erasure channel (reveal with probability `α`)
/// and the Gaussian channel.
pub fn sample_covariates<T: Real>(labels: &LabelSample, spec: &ChannelSpec<T>, seed: u64) -> Result<CovariateSample> {
    let dim = labels.vectors.ncols();
    if spec.dim() != dim {
        return Err(Error::Shape(format!("S is {}x{}, labels live in R^{dim}", spec.dim(), spec.dim())));
    }
    let mut rng = rng::child(seed, &[rng::stream::COVARIATES]);
    let alpha = spec.alpha().as_f64();
    let revealed = labels
        .assignments
        .iter()
        .map(|&a| if rng.random::<f64>() < alpha { Some(a) } else { None })
        .collect();
    let root = linalg::to_f64(&linalg::psd_sqrt(spec.snr(), T::check_tol())?);
    let mut gaussian = &labels.vectors * root.transpose();
    for x in gaussian.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *x += z;
    }
    Ok(CovariateSample { revealed, gaussian: Some(gaussian) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn two_community_closed_form() {
        let m = CommunityModel::whiten(&[0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(m.mu()[(0, 0)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.mu()[(1, 0)], -1.0, epsilon = 1e-12);

        let m = CommunityModel::whiten(&[0.1, 0.9]).unwrap();
        assert_abs_diff_eq!(m.mu()[(0, 0)], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.mu()[(1, 0)], -1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn uniform_three_is_equilateral() {
        let m = CommunityModel::whiten(&[1.0 / 3.0; 3]).unwrap();
        assert!(m.whitening_error() < 1e-10);
        let d01 = (m.mu_row(0) - m.mu_row(1)).norm();
        let d12 = (m.mu_row(1) - m.mu_row(2)).norm();
        let d02 = (m.mu_row(0) - m.mu_row(2)).norm();
        assert_abs_diff_eq!(d01, d12, epsilon = 1e-10);
        assert_abs_diff_eq!(d01, d02, epsilon = 1e-10);
        // deterministic construction
        assert_eq!(m, CommunityModel::whiten(&[1.0 / 3.0; 3]).unwrap());
    }

    #[test]
    fn rejects_bad_priors() {
        assert!(matches!(CommunityModel::<f64>::whiten(&[0.0, 1.0]), Err(Error::InvalidPrior(_))));
        assert!(matches!(CommunityModel::<f64>::whiten(&[-0.1, 1.1]), Err(Error::InvalidPrior(_))));
        assert!(matches!(CommunityModel::<f64>::whiten(&[1.0]), Err(Error::InvalidPrior(_))));
        assert!(matches!(CommunityModel::<f64>::whiten(&[0.3, 0.3]), Err(Error::InvalidPrior(_))));
    }

    #[test]
    fn single_precision_whitening() {
        let m = CommunityModel::<f32>::whiten(&[0.1, 0.3, 0.6]).unwrap();
        assert!(m.whitening_error() < 1e-4);
    }

    #[test]
    fn single_node_sample() {
        let m = CommunityModel::whiten(&[0.5, 0.5]).unwrap();
        let s = sample_labels(&m, 1, 3).unwrap();
        assert_eq!(s.vectors.nrows(), 1);
        let a = s.assignments[0];
        assert_eq!(s.vectors[(0, 0)], m.mu()[(a, 0)]);
        assert!(sample_labels(&m, 0, 3).is_err());
    }

    #[test]
    fn seeded_sequences_repeat() {
        let m = CommunityModel::whiten(&[0.5, 0.5]).unwrap();
        let a = sample_labels(&m, 4, 99).unwrap();
        let b = sample_labels(&m, 4, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_reveal_and_no_information() {
        let m = CommunityModel::whiten(&[0.2, 0.8]).unwrap();
        let labels = sample_labels(&m, 200, 1).unwrap();
        let all = sample_covariates(&labels, &ChannelSpec::erasure(1.0, 1).unwrap(), 2).unwrap();
        assert!(all.revealed.iter().zip(&labels.assignments).all(|(r, &a)| *r == Some(a)));

        let none = sample_covariates(&labels, &ChannelSpec::<f64>::none(1), 2).unwrap();
        assert_eq!(none.revealed_count(), 0);
        let g = none.gaussian.unwrap();
        let mean = g.sum() / 200.0;
        let var = g.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 199.0;
        assert!(mean.abs() < 0.25 && (var - 1.0).abs() < 0.3);
    }

    #[test]
    fn channel_spec_validation() {
        assert!(ChannelSpec::new(1.5, DMatrix::zeros(1, 1)).is_err());
        assert!(ChannelSpec::new(0.5, DMatrix::from_row_slice(1, 1, &[-1.0])).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(ChannelSpec::new(0.0, asym).is_err());
        let tiny_neg = DMatrix::from_row_slice(1, 1, &[-1e-12]);
        assert_eq!(ChannelSpec::new(0.0, tiny_neg).unwrap().snr()[(0, 0)], 0.0);
    }
}
