//! Deterministic Gauss–Hermite evaluation of the channel moments for
//! embedding dimension `k − 1 ≤ 2`.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::channel::{ChannelMoments, GaussianChannel};
use crate::error::{Error, Result};
use crate::label_model::CommunityModel;
use crate::linalg;
use crate::scalar::Real;

/// Default node count for one-dimensional rules.
pub const NODES_1D: usize = 128;
/// Default node count per axis for two-dimensional tensor rules.
pub const NODES_2D: usize = 64;

/// Gauss–Hermite rule for the standard normal weight `φ(z)`, so that
/// `Σ w_i f(z_i) ≈ E[f(Z)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Nodes from the Golub–Welsch eigenproblem, polished by Newton steps on
    /// the orthonormal Hermite recurrence; weights from the Christoffel function.
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || n > 200 {
            return Err(Error::Unsupported(format!("Gauss-Hermite rule with {n} nodes")));
        }
        let mut jacobi = DMatrix::<f64>::zeros(n, n);
        for i in 1..n {
            let b = (i as f64).sqrt();
            jacobi[(i - 1, i)] = b;
            jacobi[(i, i - 1)] = b;
        }
        let mut nodes: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
        nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut weights = Vec::with_capacity(n);
        for x in nodes.iter_mut() {
            for _ in 0..3 {
                let (pn, pn1, _) = orthonormal_hermite(n, *x);
                let deriv = (n as f64).sqrt() * pn1;
                if deriv != 0.0 {
                    *x -= pn / deriv;
                }
            }
            let (_, _, christoffel) = orthonormal_hermite(n, *x);
            weights.push(1.0 / christoffel);
        }
        let total: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= total;
        }
        Ok(Self { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&z, &w)| w * f(z)).sum()
    }
}

/// Returns `(φ_n(x), φ_{n−1}(x), Σ_{j<n} φ_j(x)²)` for the orthonormal
/// probabilists' Hermite polynomials.
fn orthonormal_hermite(n: usize, x: f64) -> (f64, f64, f64) {
    let mut prev = 0.0;
    let mut cur = 1.0;
    let mut sum_sq = 0.0;
    for j in 0..n {
        sum_sq += cur * cur;
        let next = (x * cur - (j as f64).sqrt() * prev) / ((j + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    (cur, prev, sum_sq)
}

/// Tensor-product rule over `R^dim` with precomputed node vectors.
#[derive(Debug, Clone)]
pub struct TensorRule<T: Real = f64> {
    points: Vec<(Vec<T>, T)>,
    dim: usize,
}

impl<T: Real> TensorRule<T> {
    pub fn new(dim: usize, nodes_per_axis: usize) -> Result<Self> {
        if dim == 0 || dim > 2 {
            return Err(Error::Unsupported(format!(
                "quadrature in dimension {dim}; only k - 1 <= 2 is supported"
            )));
        }
        let rule = GaussHermite::new(nodes_per_axis)?;
        let mut points = Vec::with_capacity(rule.len().pow(dim as u32));
        if dim == 1 {
            for (&z, &w) in rule.nodes.iter().zip(&rule.weights) {
                points.push((vec![T::lit(z)], T::lit(w)));
            }
        } else {
            for (&z1, &w1) in rule.nodes.iter().zip(&rule.weights) {
                for (&z2, &w2) in rule.nodes.iter().zip(&rule.weights) {
                    let w = w1 * w2;
                    if w > 1e-300 {
                        points.push((vec![T::lit(z1), T::lit(z2)], T::lit(w)));
                    }
                }
            }
        }
        Ok(Self { points, dim })
    }

    /// Default rule for the given dimension.
    pub fn for_dim(dim: usize) -> Result<Self> {
        Self::new(dim, if dim == 1 { NODES_1D } else { NODES_2D })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `ℐ(S)` and `M(S)` with erasure folded in.
    pub fn moments(&self, snr: &DMatrix<T>, alpha: T, model: &CommunityModel<T>) -> Result<ChannelMoments<T>> {
        if model.dim() != self.dim {
            return Err(Error::Shape(format!("rule is {}-dimensional, model is {}", self.dim, model.dim())));
        }
        if alpha >= T::one() {
            return Ok(ChannelMoments::revealed(model));
        }
        let ch = GaussianChannel::new(snr, model)?;
        let dim = self.dim;
        let mut info = T::zero();
        let mut cov = DMatrix::zeros(dim, dim);
        let mut w = vec![T::zero(); model.k()];
        for (a, &pa) in model.p().iter().enumerate() {
            for (z, wz) in &self.points {
                let scale = pa * *wz;
                info += scale * ch.pointwise(a, z, &mut w);
                ch.accumulate_cov(&w, scale, &mut cov);
            }
        }
        let keep = T::one() - alpha;
        Ok(ChannelMoments {
            info: alpha * model.entropy() + keep * info.max(T::zero()),
            mmse: linalg::project_unit_interval(&cov) * keep,
            info_stderr: T::zero(),
            samples: self.points.len() * model.k(),
        })
    }
}

/// Quadrature evaluation of the channel moments for `k − 1 ≤ 2`.
///
/// Unlike a product rule on `y`, each mixture component is integrated in its
/// own noise coordinates `y = S^{1/2} μ_a + z`, so any PSD `S` (diagonal or
/// not) is handled.
pub fn channel_moments_quadrature<T: Real>(
    snr: &DMatrix<T>,
    alpha: T,
    model: &CommunityModel<T>,
) -> Result<ChannelMoments<T>> {
    TensorRule::for_dim(model.dim())?.moments(snr, alpha, model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rule_integrates_moments() {
        let r = GaussHermite::new(64).unwrap();
        assert_abs_diff_eq!(r.expect(|_| 1.0), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(r.expect(|z| z * z), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.expect(|z| z.powi(4)), 3.0, epsilon = 1e-11);
        assert_abs_diff_eq!(r.expect(|z| z.cos()), (-0.5f64).exp(), epsilon = 1e-13);
    }

    #[test]
    fn zero_snr_limit() {
        let m = CommunityModel::whiten(&[0.5, 0.5]).unwrap();
        let mom = channel_moments_quadrature(&DMatrix::zeros(1, 1), 0.0, &m).unwrap();
        assert_abs_diff_eq!(mom.info, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mom.mmse[(0, 0)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn high_snr_limit() {
        let m = CommunityModel::whiten(&[0.5, 0.5]).unwrap();
        let mom = channel_moments_quadrature(&DMatrix::from_element(1, 1, 100.0f64), 0.0, &m).unwrap();
        assert!((mom.info - 2f64.ln()).abs() < 1e-3, "{}", mom.info);
        assert!(mom.mmse[(0, 0)] < 1e-3);
    }

    #[test]
    fn unsupported_dimension() {
        let m = CommunityModel::whiten(&[0.25; 4]).unwrap();
        assert!(matches!(
            channel_moments_quadrature(&DMatrix::zeros(3, 3), 0.0, &m),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn non_diagonal_snr_agrees_with_monte_carlo() {
        let m = CommunityModel::<f64>::whiten(&[0.1, 0.3, 0.6]).unwrap();
        let s = DMatrix::from_row_slice(2, 2, &[1.5f64, 0.4, 0.4, 0.7]);
        let a = channel_moments_quadrature(&s, 0.0, &m).unwrap();
        let mc = crate::channel::channel_moments(&s, 0.0, &m, 100_000, 4).unwrap();
        assert!((a.info - mc.info).abs() < 4.0 * mc.info_stderr);
        assert!((a.mmse.clone() - mc.mmse).amax() < 0.01);
    }
}
