//! Information function `ℐ(S)` and MMSE matrix `M(S)` of the per-node side
//! information channel: an erasure channel revealing the label with
//! probability `α`, in parallel with `Ỹ = S^{1/2} X + N`.
//!
//! Both quantities are expectations over `(X, N)` of a pointwise integrand.
//! Writing `s_a = S^{1/2} μ_a` and `y = s_a + z`, the log-likelihood ratio
//! against the mixture is
//!
//! ```text
//! log p(y | a) − log p(y) = −log Σ_b p_b exp(−½‖s_a − s_b‖² − ⟨z, s_a − s_b⟩)
//! ```
//!
//! and the posterior covariance follows from the same exponents. The Monte
//! Carlo estimator here and the Gauss–Hermite rule in [`crate::quadrature`]
//! only differ in how they pick `(a, z)`.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::label_model::CommunityModel;
use crate::linalg;
use crate::rng;
use crate::scalar::Real;

/// Default Monte Carlo sample count for `k − 1 ≤ 2`.
pub const DEFAULT_MC_SAMPLES: usize = 200_000;

const BLOCK: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMoments<T: Real = f64> {
    /// Mutual information in nats.
    pub info: T,
    pub mmse: DMatrix<T>,
    /// Monte Carlo standard error of `info` (zero for deterministic rules).
    pub info_stderr: T,
    pub samples: usize,
}

impl<T: Real> ChannelMoments<T> {
    /// Everything revealed: `ℐ = H(p)`, `M = 0`.
    pub fn revealed(model: &CommunityModel<T>) -> Self {
        Self {
            info: model.entropy(),
            mmse: DMatrix::zeros(model.dim(), model.dim()),
            info_stderr: T::zero(),
            samples: 0,
        }
    }

    pub fn mmse_trace(&self) -> T {
        self.mmse.trace()
    }
}

/// Gaussian part of the channel with the signal points `S^{1/2} μ_a`
/// precomputed.
#[derive(Debug, Clone)]
pub struct GaussianChannel<T: Real = f64> {
    log_p: Vec<T>,
    /// Row `a` is `S^{1/2} μ_a`.
    signals: DMatrix<T>,
    mu: DMatrix<T>,
}

impl<T: Real> GaussianChannel<T> {
    pub fn new(snr: &DMatrix<T>, model: &CommunityModel<T>) -> Result<Self> {
        if snr.nrows() != model.dim() || snr.ncols() != model.dim() {
            return Err(Error::Shape(format!(
                "SNR matrix is {}x{}, model dimension is {}",
                snr.nrows(),
                snr.ncols(),
                model.dim()
            )));
        }
        let root = linalg::psd_sqrt(snr, T::lit(1e-6))?;
        let signals = model.mu() * root.transpose();
        Ok(Self {
            log_p: model.p().iter().map(|&p| p.ln()).collect(),
            signals,
            mu: model.mu().clone(),
        })
    }

    pub fn k(&self) -> usize {
        self.log_p.len()
    }

    pub fn dim(&self) -> usize {
        self.signals.ncols()
    }

    pub fn signal(&self, a: usize) -> DVector<T> {
        self.signals.row(a).transpose()
    }

    /// Log-likelihood `log p(y | a)` up to the constant `−(k−1)/2 · log 2π`.
    pub fn log_likelihood(&self, y: &DVector<T>, a: usize) -> T {
        let mut d2 = T::zero();
        for j in 0..self.dim() {
            let r = y[j] - self.signals[(a, j)];
            d2 += r * r;
        }
        -d2 * T::lit(0.5)
    }

    /// Posterior over communities for an observed `y`, written into `out`.
    pub fn posterior_into(&self, y: &DVector<T>, out: &mut [T]) {
        for (a, o) in out.iter_mut().enumerate() {
            *o = self.log_p[a] + self.log_likelihood(y, a);
        }
        normalize_log(out);
    }

    /// Pointwise integrand at `y = s_a + z`: returns the log-likelihood ratio
    /// and fills `weights` with the posterior.
    pub fn pointwise(&self, a: usize, z: &[T], weights: &mut [T]) -> T {
        let k = self.k();
        let dim = self.dim();
        for b in 0..k {
            // exponent: log p_b − ½‖s_a − s_b‖² − ⟨z, s_a − s_b⟩
            let mut e = self.log_p[b];
            for j in 0..dim {
                let diff = self.signals[(a, j)] - self.signals[(b, j)];
                e -= diff * diff * T::lit(0.5) + z[j] * diff;
            }
            weights[b] = e;
        }
        let lse = log_sum_exp(weights);
        for w in weights.iter_mut() {
            *w = (*w - lse).exp();
        }
        -lse
    }

    /// Posterior covariance `Σ w_b μ_b μ_bᵀ − m mᵀ` accumulated into `acc` with weight `scale`.
    pub fn accumulate_cov(&self, weights: &[T], scale: T, acc: &mut DMatrix<T>) {
        let dim = self.dim();
        let mut m = vec![T::zero(); dim];
        for (b, &w) in weights.iter().enumerate() {
            for j in 0..dim {
                m[j] += w * self.mu[(b, j)];
            }
        }
        for r in 0..dim {
            for c in 0..dim {
                let mut second = T::zero();
                for (b, &w) in weights.iter().enumerate() {
                    second += w * self.mu[(b, r)] * self.mu[(b, c)];
                }
                acc[(r, c)] += scale * (second - m[r] * m[c]);
            }
        }
    }
}

pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::min_value().unwrap(), |m, x| if x > m { x } else { m });
    if !max.is_finite() {
        return max;
    }
    let s = xs.iter().fold(T::zero(), |acc, &x| acc + (x - max).exp());
    max + s.ln()
}

/// Turn log-weights into a probability vector in place (max-subtracted).
pub fn normalize_log<T: Real>(xs: &mut [T]) {
    let lse = log_sum_exp(xs);
    for x in xs.iter_mut() {
        *x = (*x - lse).exp();
    }
}

/// Exact posterior over communities for one node's side information.
///
/// `revealed` overrides everything with a point mass.
pub fn posterior_weights<T: Real>(
    y: &DVector<T>,
    revealed: Option<usize>,
    snr: &DMatrix<T>,
    model: &CommunityModel<T>,
) -> Result<Vec<T>> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("observation vector".into()));
    }
    if y.len() != model.dim() {
        return Err(Error::Shape(format!("observation has length {}, expected {}", y.len(), model.dim())));
    }
    let mut w = vec![T::zero(); model.k()];
    if let Some(a) = revealed {
        if a >= model.k() {
            return Err(Error::Shape(format!("revealed community {a} >= k")));
        }
        w[a] = T::one();
        return Ok(w);
    }
    GaussianChannel::new(snr, model)?.posterior_into(y, &mut w);
    Ok(w)
}

/// Fixed Monte Carlo draws `(a, z)` reused across SNR values (common random numbers).
#[derive(Debug, Clone)]
pub struct McDraws<T: Real = f64> {
    blocks: Vec<Vec<(usize, Vec<T>)>>,
    dim: usize,
}

impl<T: Real> McDraws<T> {
    pub fn new(model: &CommunityModel<T>, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("n_mc must be at least 1".into()));
        }
        let dim = model.dim();
        let weights: Vec<f64> = model.p().iter().map(|x| x.as_f64()).collect();
        let labels = WeightedIndex::new(&weights).map_err(|e| Error::InvalidPrior(e.to_string()))?;
        let n_blocks = n.div_ceil(BLOCK);
        let blocks = (0..n_blocks)
            .map(|b| {
                let len = BLOCK.min(n - b * BLOCK);
                let mut rng = rng::child(seed, &[rng::stream::MONTE_CARLO, b as u64]);
                (0..len)
                    .map(|_| {
                        let a = labels.sample(&mut rng);
                        let z = (0..dim)
                            .map(|_| {
                                let v: f64 = StandardNormal.sample(&mut rng);
                                T::lit(v)
                            })
                            .collect();
                        (a, z)
                    })
                    .collect()
            })
            .collect();
        Ok(Self { blocks, dim })
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-draw log-likelihood ratios and posterior covariances at `snr`.
    pub fn per_sample(&self, snr: &DMatrix<T>, model: &CommunityModel<T>) -> Result<Vec<(T, DMatrix<T>)>> {
        let ch = GaussianChannel::new(snr, model)?;
        let dim = self.dim;
        let out: Vec<Vec<(T, DMatrix<T>)>> = self
            .blocks
            .par_iter()
            .map(|block| {
                let mut w = vec![T::zero(); ch.k()];
                block
                    .iter()
                    .map(|(a, z)| {
                        let info = ch.pointwise(*a, z, &mut w);
                        let mut cov = DMatrix::zeros(dim, dim);
                        ch.accumulate_cov(&w, T::one(), &mut cov);
                        (info, cov)
                    })
                    .collect()
            })
            .collect();
        Ok(out.into_iter().flatten().collect())
    }

    /// Channel moments with erasure probability `alpha` folded in analytically.
    pub fn moments(&self, snr: &DMatrix<T>, alpha: T, model: &CommunityModel<T>) -> Result<ChannelMoments<T>> {
        if alpha >= T::one() {
            return Ok(ChannelMoments { samples: self.len(), ..ChannelMoments::revealed(model) });
        }
        let ch = GaussianChannel::new(snr, model)?;
        let dim = self.dim;
        // per block: (sum, sum of squares, covariance sum), merged in block order
        let partial: Vec<(T, T, DMatrix<T>)> = self
            .blocks
            .par_iter()
            .map(|block| {
                let mut w = vec![T::zero(); ch.k()];
                let mut sum = T::zero();
                let mut sq = T::zero();
                let mut cov = DMatrix::zeros(dim, dim);
                for (a, z) in block {
                    let info = ch.pointwise(*a, z, &mut w);
                    sum += info;
                    sq += info * info;
                    ch.accumulate_cov(&w, T::one(), &mut cov);
                }
                (sum, sq, cov)
            })
            .collect();
        let n = self.len();
        let nt = T::of_usize(n);
        let (sum, sq, cov) = partial.into_iter().fold(
            (T::zero(), T::zero(), DMatrix::zeros(dim, dim)),
            |(s, q, c), (s2, q2, c2)| (s + s2, q + q2, c + c2),
        );
        let mean = sum / nt;
        let var = if n > 1 {
            ((sq - nt * mean * mean) / T::of_usize(n - 1)).max(T::zero())
        } else {
            T::zero()
        };
        let gauss = mean.max(T::zero());
        let keep = T::one() - alpha;
        Ok(ChannelMoments {
            info: alpha * model.entropy() + keep * gauss,
            mmse: linalg::project_unit_interval(&(cov / nt)) * keep,
            info_stderr: keep * (var / nt).sqrt(),
            samples: n,
        })
    }
}

/// Monte Carlo estimate of `ℐ(S)` and `M(S)` with erasure probability `alpha`.
pub fn channel_moments<T: Real>(
    snr: &DMatrix<T>,
    alpha: T,
    model: &CommunityModel<T>,
    n_mc: usize,
    seed: u64,
) -> Result<ChannelMoments<T>> {
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(Error::InvalidChannel(format!("alpha = {alpha} outside [0, 1]")));
    }
    McDraws::new(model, n_mc, seed)?.moments(snr, alpha, model)
}
