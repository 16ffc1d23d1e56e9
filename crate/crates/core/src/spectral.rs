//! Spectral pipeline: average the layers, embed nodes with the informative
//! eigenvectors of the average, then label them with a Gaussian mixture
//! fitted by EM from centers predicted by the spiked-matrix overlap.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bp::NodeEstimates;
use crate::channel::log_sum_exp;
use crate::error::{Error, Result};
use crate::label_model::{CommunityModel, LabelSample};
use crate::linalg;
use crate::netgen::{AdjacencyList, DENSE_LIMIT};
use crate::potential::NetworkSpec;
use crate::rng;

/// Operators up to this size are eigendecomposed densely.
pub const DENSE_EIGEN_LIMIT: usize = 600;
/// Largest Lanczos basis before giving up.
pub const MAX_LANCZOS_BASIS: usize = 800;

/// A symmetric linear operator on `R^n`.
pub trait SymOp {
    fn dim(&self) -> usize;
    /// `y = A x`.
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

impl SymOp for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.fill(0.0);
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                for (yi, a) in y.iter_mut().zip(self.column(j).iter()) {
                    *yi += a * xj;
                }
            }
        }
    }
}

/// Symmetric sparse matrix in compressed-row form, both triangles stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSym {
    n: usize,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseSym {
    /// Sum of `w (e_i e_jᵀ + e_j e_iᵀ)` over the given off-diagonal entries;
    /// repeated pairs accumulate.
    pub fn from_weighted_pairs(n: usize, pairs: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut entries: Vec<(usize, usize, f64)> = Vec::new();
        for (i, j, w) in pairs {
            if i >= n || j >= n || i == j {
                return Err(Error::Shape(format!("entry ({i}, {j}) invalid for n = {n}")));
            }
            entries.push((i, j, w));
            entries.push((j, i, w));
        }
        entries.sort_unstable_by_key(|&(i, j, _)| (i, j));
        let mut offsets = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(entries.len());
        let mut vals: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, w) in entries {
            if last == Some((i, j)) {
                *vals.last_mut().expect("entry present") += w;
                continue;
            }
            last = Some((i, j));
            cols.push(j);
            vals.push(w);
            offsets[i + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        Ok(Self { n, offsets, cols, vals })
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let row = &self.cols[self.offsets[i]..self.offsets[i + 1]];
        match row.binary_search(&j) {
            Ok(p) => self.vals[self.offsets[i] + p],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for p in self.offsets[i]..self.offsets[i + 1] {
                out[(i, self.cols[p])] = self.vals[p];
            }
        }
        out
    }
}

impl SymOp for SparseSym {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for p in self.offsets[i]..self.offsets[i + 1] {
                s += self.vals[p] * x[self.cols[p]];
            }
            *yi = s;
        }
    }
}

/// `Σ_ℓ G_ℓ / √L` with the parameters of the equivalent single layer.
#[derive(Debug, Clone)]
pub struct AveragedNetwork {
    pub matrix: SparseSym,
    pub layers: usize,
    /// `R̃ = Σ_ℓ √v_ℓ R_ℓ / √(Σ_ℓ v_ℓ)` with `v_ℓ = d_ℓ (1 − d_ℓ/n)`; equals
    /// `√L · r I` when all layers share `d` and `R = r I`.
    pub effective_r: DMatrix<f64>,
    /// Entry noise standard deviation times `√n`.
    pub noise_scale: f64,
}

impl AveragedNetwork {
    pub fn n(&self) -> usize {
        self.matrix.n
    }
}

/// Weighted average of the layers with weights `1/√L`, which keeps the
/// noise variance of a single layer.
pub fn average_networks(networks: &[AdjacencyList]) -> Result<AveragedNetwork> {
    let first = networks.first().ok_or_else(|| Error::Config("no networks to average".into()))?;
    let n = first.n;
    let dim = first.r.nrows();
    for (l, g) in networks.iter().enumerate() {
        if g.n != n {
            return Err(Error::Shape(format!("layer {l} has n = {}, layer 0 has n = {n}", g.n)));
        }
        if g.r.nrows() != dim {
            return Err(Error::Shape(format!("layer {l} has a different R dimension")));
        }
    }
    let layers = networks.len();
    let w = 1.0 / (layers as f64).sqrt();
    let pairs = networks.iter().flat_map(|g| g.edges.iter().map(move |&(i, j)| (i, j, w)));
    let matrix = SparseSym::from_weighted_pairs(n, pairs)?;
    let (effective_r, noise_scale) =
        effective_layer(networks.iter().map(|g| (g.d, &g.r)), n, dim);
    Ok(AveragedNetwork { matrix, layers, effective_r, noise_scale })
}

fn effective_layer<'a>(
    layers: impl Iterator<Item = (f64, &'a DMatrix<f64>)> + Clone,
    n: usize,
    dim: usize,
) -> (DMatrix<f64>, f64) {
    let nf = n as f64;
    let count = layers.clone().count() as f64;
    let total_var: f64 = layers.clone().map(|(d, _)| d * (1.0 - d / nf)).sum();
    let mut r = DMatrix::zeros(dim, dim);
    for (d, rl) in layers {
        r += rl * (d * (1.0 - d / nf)).sqrt();
    }
    (r / total_var.sqrt(), (total_var / count).sqrt())
}

/// Conditional expectation `E[Σ_ℓ G_ℓ/√L | X]`, with the diagonal filled by
/// the same formula so the result has rank at most `k`.
pub fn expected_average(labels: &LabelSample, spec: &NetworkSpec) -> Result<DMatrix<f64>> {
    let n = labels.n;
    if n > DENSE_LIMIT {
        return Err(Error::SizeGuard(format!("dense expectation with n = {n} > {DENSE_LIMIT}")));
    }
    if spec.is_empty() {
        return Err(Error::Config("no layers".into()));
    }
    let nf = n as f64;
    let w = 1.0 / (spec.len() as f64).sqrt();
    let x = &labels.vectors;
    let mut out = DMatrix::zeros(n, n);
    for layer in &spec.layers {
        if layer.r.nrows() != x.ncols() {
            return Err(Error::Shape("R does not match label dimension".into()));
        }
        let c = (layer.d * (1.0 - layer.d / nf)).sqrt() / nf;
        let xr = x * &layer.r;
        out += (&xr * x.transpose()) * (w * c);
        out.add_scalar_mut(w * layer.d / nf);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralEmbedding {
    /// `n × (k−1)`, eigenvectors scaled by `√n`.
    pub coords: DMatrix<f64>,
    /// Eigenvalues of the informative eigenvectors, descending.
    pub eigenvalues: Vec<f64>,
    /// Leading (degree) eigenvalue, discarded from the embedding.
    pub perron: f64,
    pub effective_r: DMatrix<f64>,
    pub noise_scale: f64,
}

pub fn spectral_embed(avg: &AveragedNetwork, k: usize, seed: u64) -> Result<SpectralEmbedding> {
    embed_operator(&avg.matrix, k, &avg.effective_r, avg.noise_scale, seed)
}

/// Embed with the eigenvectors of `op` that carry the planted signal: after
/// the leading one, the largest eigenvalues for each positive eigenvalue of
/// `R̃` and the smallest for each negative one.
pub fn embed_operator(
    op: &impl SymOp,
    k: usize,
    effective_r: &DMatrix<f64>,
    noise_scale: f64,
    seed: u64,
) -> Result<SpectralEmbedding> {
    let n = op.dim();
    if k < 2 || k > n {
        return Err(Error::Shape(format!("need 2 <= k <= n, got k = {k}, n = {n}")));
    }
    let dim = k - 1;
    if effective_r.nrows() != dim {
        return Err(Error::Shape(format!("R is {0}x{0}, embedding needs {dim}", effective_r.nrows())));
    }
    let (theta, _) = linalg::sorted_eigen(effective_r);
    let positive = theta.iter().filter(|&&t| t >= 0.0).count();
    let negative = dim - positive;
    let (values, vectors) = extreme_eigenpairs(op, positive + 1, negative, seed)?;
    let scale = (n as f64).sqrt();
    let mut coords = DMatrix::zeros(n, dim);
    for (c, v) in vectors.iter().skip(1).enumerate() {
        let mut v = v.clone();
        linalg::orient(&mut v);
        coords.set_column(c, &(v * scale));
    }
    Ok(SpectralEmbedding {
        coords,
        eigenvalues: values[1..].to_vec(),
        perron: values[0],
        effective_r: effective_r.clone(),
        noise_scale,
    })
}

/// The `top` largest and `bottom` smallest eigenpairs, each group sorted by
/// descending eigenvalue, largest group first.
pub fn extreme_eigenpairs(op: &impl SymOp, top: usize, bottom: usize, seed: u64) -> Result<(Vec<f64>, Vec<DVector<f64>>)> {
    let n = op.dim();
    if top + bottom > n {
        return Err(Error::Shape(format!("{} eigenpairs requested from an {n}-dimensional operator", top + bottom)));
    }
    if n <= DENSE_EIGEN_LIMIT {
        let mut dense = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            op.apply(&e, &mut col);
            dense.set_column(j, &DVector::from_column_slice(&col));
            e[j] = 0.0;
        }
        let (vals, vecs) = linalg::sorted_eigen(&dense);
        let pick: Vec<usize> = (0..top).chain(n - bottom..n).collect();
        return Ok((pick.iter().map(|&i| vals[i]).collect(), pick.iter().map(|&i| vecs.column(i).into_owned()).collect()));
    }
    lanczos(op, top, bottom, seed)
}

/// Lanczos with full reorthogonalization, growing the basis until the wanted
/// Ritz pairs have small residuals.
fn lanczos(op: &impl SymOp, top: usize, bottom: usize, seed: u64) -> Result<(Vec<f64>, Vec<DVector<f64>>)> {
    let n = op.dim();
    let want = top + bottom;
    let cap = n.min(MAX_LANCZOS_BASIS);
    let mut rng = rng::child(seed, &[rng::stream::SPECTRAL]);
    let mut random_unit = |basis: &[DVector<f64>]| -> Option<DVector<f64>> {
        for _ in 0..4 {
            let mut v = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            reorthogonalize(&mut v, basis);
            let norm = v.norm();
            if norm > 1e-8 {
                return Some(v / norm);
            }
        }
        None
    };

    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut q = random_unit(&basis).ok_or_else(|| Error::Eigen("could not draw a start vector".into()))?;
    let mut w = vec![0.0; n];
    let mut checkpoint = (4 * want + 40).max(120).min(cap);
    let mut scale: f64 = 0.0;
    loop {
        op.apply(q.as_slice(), &mut w);
        let mut r = DVector::from_column_slice(&w);
        let a = q.dot(&r);
        alpha.push(a);
        basis.push(q.clone());
        reorthogonalize(&mut r, &basis);
        reorthogonalize(&mut r, &basis);
        let b = r.norm();
        scale = scale.max(a.abs() + b);
        let m = basis.len();
        let exhausted = m == n;
        let breakdown = b <= 1e-10 * scale.max(1e-300);
        if m >= checkpoint || exhausted || (breakdown && m >= want) {
            let (vals, vecs, residual) = ritz(&basis, &alpha, &beta, b, top, bottom);
            let tol = 1e-8 * scale;
            if residual <= tol || exhausted || breakdown {
                return Ok((vals, vecs));
            }
            if m >= cap {
                if residual <= 1e-4 * scale {
                    log::warn!("Lanczos stopped at basis {m} with relative residual {:.2e}", residual / scale);
                    return Ok((vals, vecs));
                }
                return Err(Error::Eigen(format!("no convergence with basis {m}, relative residual {:.2e}", residual / scale)));
            }
            checkpoint = (checkpoint * 3 / 2).min(cap);
        }
        if breakdown {
            // invariant subspace found; continue in its complement
            beta.push(0.0);
            q = random_unit(&basis).ok_or_else(|| Error::Eigen("Krylov space exhausted".into()))?;
        } else {
            beta.push(b);
            q = r / b;
        }
    }
}

fn reorthogonalize(v: &mut DVector<f64>, basis: &[DVector<f64>]) {
    for u in basis {
        let c = u.dot(v);
        v.axpy(-c, u, 1.0);
    }
}

/// Ritz pairs for the wanted ends and the largest residual among them.
fn ritz(
    basis: &[DVector<f64>],
    alpha: &[f64],
    beta: &[f64],
    last_beta: f64,
    top: usize,
    bottom: usize,
) -> (Vec<f64>, Vec<DVector<f64>>, f64) {
    let m = basis.len();
    let mut t = DMatrix::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alpha[i];
        if i + 1 < m {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let pick: Vec<usize> = order[..top].iter().chain(order[m - bottom..].iter()).copied().collect();
    let mut residual: f64 = 0.0;
    let mut vals = Vec::with_capacity(pick.len());
    let mut vecs = Vec::with_capacity(pick.len());
    for &i in &pick {
        let s = eig.eigenvectors.column(i);
        residual = residual.max((last_beta * s[m - 1]).abs());
        let mut v = DVector::zeros(basis[0].len());
        for (j, u) in basis.iter().enumerate() {
            v.axpy(s[j], u, 1.0);
        }
        let norm = v.norm();
        vals.push(eig.eigenvalues[i]);
        vecs.push(v / norm);
    }
    (vals, vecs, residual)
}

/// How the mixture was initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GmmPath {
    /// Every informative eigenvalue of `R̃` is at or below 1 in magnitude:
    /// the embedding carries no signal and the prior is returned.
    Prior,
    /// Centers predicted from the overlap factors.
    Predicted,
    /// Some eigenvalue lies in the uncertainty band just above 1, where the
    /// predicted spike is within finite-size fluctuations of the bulk edge;
    /// k-means supplies the centers.
    KMeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmOptions {
    pub max_iters: usize,
    /// Stop when the mean per-node log-likelihood changes by less than this.
    pub tol: f64,
    pub max_restarts: usize,
    /// An eigenvalue `|θ| > 1` of `R̃` is uncertain when its predicted gap
    /// above the bulk edge, `(|θ| − 1)²/|θ|`, is below `edge_band · n^{-2/3}`.
    pub edge_band: f64,
    /// Refit means, covariances and weights by EM; when false the oriented
    /// predicted mixture is used as is.
    pub refit: bool,
    /// Re-estimate the mixture weights; when false they stay at the prior.
    pub fit_weights: bool,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self { max_iters: 300, tol: 1e-8, max_restarts: 5, edge_band: 10.0, refit: true, fit_weights: false }
    }
}

/// Mixture parameters; `means` has one row per component.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    pub means: DMatrix<f64>,
    pub covs: Vec<DMatrix<f64>>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub params: GmmParams,
    /// `n × k`.
    pub responsibilities: DMatrix<f64>,
    /// Mean per-node log-likelihood.
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralEstimate {
    pub estimates: NodeEstimates,
    pub path: GmmPath,
    /// The fitted mixture lost to a single Gaussian by BIC, so the prior was
    /// returned instead of its responsibilities.
    pub rejected: bool,
    pub restarts: usize,
    pub fit: Option<GmmFit>,
}

/// Overlap factor `1 − 1/θ²` for `|θ| > 1`, else 0.
pub fn overlap_factor(theta: f64) -> f64 {
    if theta.abs() > 1.0 {
        1.0 - 1.0 / (theta * theta)
    } else {
        0.0
    }
}

/// Predicted centers before orientation, `diag(√D) Oᵀ μ_a` as rows, with `O`
/// the eigenvectors of `R̃` in embedding order, and the per-coordinate noise
/// variances `1 − D`.
pub fn predicted_centers(embedding: &SpectralEmbedding, model: &CommunityModel) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let dim = model.dim();
    if embedding.coords.ncols() != dim {
        return Err(Error::Shape("embedding and model dimensions differ".into()));
    }
    let (theta, o) = linalg::sorted_eigen(&embedding.effective_r);
    let factors = DVector::from_iterator(dim, theta.iter().map(|&t| overlap_factor(t)));
    let base = model.mu() * &o;
    let centers = DMatrix::from_fn(model.k(), dim, |a, j| base[(a, j)] * factors[j].sqrt());
    Ok((centers, factors.map(|f| 1.0 - f)))
}

/// Label nodes from the embedding with a `k`-component mixture.
pub fn gmm_label(embedding: &SpectralEmbedding, model: &CommunityModel, options: &GmmOptions, seed: u64) -> Result<SpectralEstimate> {
    let n = embedding.coords.nrows();
    let (theta, _) = linalg::sorted_eigen(&embedding.effective_r);
    if theta.iter().all(|t| t.abs() <= 1.0) {
        return Ok(SpectralEstimate { estimates: NodeEstimates::prior(n, model), path: GmmPath::Prior, rejected: false, restarts: 0, fit: None });
    }
    let band = options.edge_band * (n as f64).powf(-2.0 / 3.0);
    let uncertain = theta.iter().any(|t| t.abs() > 1.0 && (t.abs() - 1.0).powi(2) / t.abs() < band);
    let (base, noise) = predicted_centers(embedding, model)?;
    let sigma = DMatrix::from_diagonal(&noise.map(|v| v.max(1e-6)));
    let mut rng = rng::child(seed, &[rng::stream::SPECTRAL, 1]);
    if uncertain && !spike_detected(embedding, band) {
        log::info!("no informative eigenvalue clears the bulk edge; returning the prior");
        return Ok(SpectralEstimate { estimates: NodeEstimates::prior(n, model), path: GmmPath::KMeans, rejected: true, restarts: 0, fit: None });
    }
    let (init, path) = if uncertain {
        (kmeans_init(&embedding.coords, &base, model, &sigma, &mut rng)?, GmmPath::KMeans)
    } else {
        let means = align_orientation(&embedding.coords, &base, &noise, model.p(), &mut rng);
        (GmmParams { means, covs: vec![sigma.clone(); model.k()], weights: model.p().to_vec() }, GmmPath::Predicted)
    };
    let (fit, restarts) = if options.refit {
        fit_with_restarts(&embedding.coords, &init, options, &mut rng)?
    } else {
        (mixture_posterior(&embedding.coords, &init)?, 0)
    };
    if !mixture_beats_single_gaussian(&embedding.coords, &fit) {
        log::info!("mixture not supported by BIC against one Gaussian; returning the prior");
        let estimates = NodeEstimates { iterations: fit.iterations, converged: fit.converged, ..NodeEstimates::prior(n, model) };
        return Ok(SpectralEstimate { estimates, path, rejected: true, restarts, fit: Some(fit) });
    }
    let estimates = NodeEstimates::from_marginals(fit.responsibilities.clone(), model, fit.iterations, fit.converged);
    Ok(SpectralEstimate { estimates, path, rejected: false, restarts, fit: Some(fit) })
}

/// Whether some informative eigenvalue, in units of the noise scale, lies
/// more than `band` beyond the bulk edge at 2.
pub fn spike_detected(embedding: &SpectralEmbedding, band: f64) -> bool {
    embedding.eigenvalues.iter().any(|&v| (v / embedding.noise_scale).abs() - 2.0 > band)
}

/// BIC comparison of a `k`-component full-covariance mixture against a
/// single Gaussian fitted by maximum likelihood.
pub fn mixture_beats_single_gaussian(coords: &DMatrix<f64>, fit: &GmmFit) -> bool {
    let (n, dim) = coords.shape();
    let k = fit.params.means.nrows();
    let nf = n as f64;
    let mean = coords.row_mean();
    let mut cov = DMatrix::zeros(dim, dim);
    for i in 0..n {
        let r = coords.row(i) - &mean;
        cov += r.transpose() * r;
    }
    cov /= nf;
    let log_det = match Cholesky::new(cov) {
        Some(c) => 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>(),
        None => return true,
    };
    let single = -0.5 * (dim as f64 * (1.0 + (2.0 * std::f64::consts::PI).ln()) + log_det);
    let per_component = dim + dim * (dim + 1) / 2;
    let extra = (k * per_component + k - 1 - per_component) as f64;
    nf * (fit.log_likelihood - single) > 0.5 * extra * nf.ln()
}

/// Average, embed and label in one call.
pub fn spectral_pipeline(networks: &[AdjacencyList], model: &CommunityModel, options: &GmmOptions, seed: u64) -> Result<SpectralEstimate> {
    let avg = average_networks(networks)?;
    let embedding = spectral_embed(&avg, model.k(), seed)?;
    gmm_label(&embedding, model, options, seed)
}

/// Candidate orthogonal transforms of the center space: sign flips in 1-D,
/// a 1° rotation grid with reflections in 2-D, sign flips plus random
/// rotations above.
fn orientation_candidates(dim: usize, rng: &mut rng::Rng) -> Vec<DMatrix<f64>> {
    match dim {
        1 => vec![DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, -1.0)],
        2 => (0..360)
            .flat_map(|deg| {
                let t = (deg as f64).to_radians();
                [rotation(t, false), rotation(t, true)]
            })
            .collect(),
        _ => {
            let mut out: Vec<DMatrix<f64>> = (0..1usize << dim)
                .map(|mask| DMatrix::from_fn(dim, dim, |i, j| if i != j { 0.0 } else if mask >> i & 1 == 1 { -1.0 } else { 1.0 }))
                .collect();
            for _ in 0..64 {
                let g = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(rng));
                out.push(g.qr().q());
            }
            out
        }
    }
}

fn rotation(t: f64, reflect: bool) -> DMatrix<f64> {
    let (s, c) = t.sin_cos();
    let f = if reflect { -1.0 } else { 1.0 };
    DMatrix::from_row_slice(2, 2, &[c, -s * f, s, c * f])
}

/// Mixture log-likelihood of `coords` up to a constant, with diagonal noise.
fn orientation_score(coords: &DMatrix<f64>, centers: &DMatrix<f64>, noise: &DVector<f64>, weights: &[f64]) -> f64 {
    let (n, dim) = coords.shape();
    let k = centers.nrows();
    let inv: Vec<f64> = noise.iter().map(|v| 1.0 / v.max(1e-6)).collect();
    let logw: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    let mut terms = vec![0.0; k];
    let mut total = 0.0;
    for i in 0..n {
        for a in 0..k {
            let mut d2 = 0.0;
            for j in 0..dim {
                let r = coords[(i, j)] - centers[(a, j)];
                d2 += r * r * inv[j];
            }
            terms[a] = logw[a] - 0.5 * d2;
        }
        total += log_sum_exp(&terms);
    }
    total
}

/// Centers `diag(√D) Q Oᵀ μ_a` from `base` rows `diag(√D) Oᵀ μ_a`.
fn oriented_centers(base: &DMatrix<f64>, factors_sqrt: &DVector<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let k = base.nrows();
    let dim = base.ncols();
    let mut raw = base.clone();
    for a in 0..k {
        for j in 0..dim {
            raw[(a, j)] = if factors_sqrt[j] > 0.0 { base[(a, j)] / factors_sqrt[j] } else { 0.0 };
        }
    }
    let mut rotated = &raw * q.transpose();
    for a in 0..k {
        for j in 0..dim {
            rotated[(a, j)] *= factors_sqrt[j];
        }
    }
    rotated
}

/// Oriented centers maximizing the mixture likelihood over the candidate
/// set, refined on a 0.02° grid in 2-D.
fn align_orientation(coords: &DMatrix<f64>, base: &DMatrix<f64>, noise: &DVector<f64>, weights: &[f64], rng: &mut rng::Rng) -> DMatrix<f64> {
    let dim = base.ncols();
    let sqrt_f = noise.map(|v| (1.0 - v).max(0.0).sqrt());
    let score = |q: &DMatrix<f64>| orientation_score(coords, &oriented_centers(base, &sqrt_f, q), noise, weights);
    let mut best = DMatrix::identity(dim, dim);
    let mut best_score = f64::NEG_INFINITY;
    for q in orientation_candidates(dim, rng) {
        let s = score(&q);
        if s > best_score {
            best_score = s;
            best = q;
        }
    }
    if dim == 2 {
        let reflect = best.determinant() < 0.0;
        let t0 = best[(1, 0)].atan2(best[(0, 0)]);
        for step in -50..=50 {
            let q = rotation(t0 + (step as f64 * 0.02).to_radians(), reflect);
            let s = score(&q);
            if s > best_score {
                best_score = s;
                best = q;
            }
        }
    }
    oriented_centers(base, &sqrt_f, &best)
}

fn kmeans_init(
    coords: &DMatrix<f64>,
    base: &DMatrix<f64>,
    model: &CommunityModel,
    sigma: &DMatrix<f64>,
    rng: &mut rng::Rng,
) -> Result<GmmParams> {
    let k = model.k();
    let dim = coords.ncols();
    let (centers, assign) = kmeans(coords, k, 4, rng);
    let n = coords.nrows();
    // match clusters to communities by the cheapest permutation after
    // orienting the predicted centers onto the cluster centers
    let sqrt_f = DVector::from_fn(dim, |j, _| (1.0 - sigma[(j, j)]).max(0.0).sqrt());
    let candidates = orientation_candidates(dim, rng);
    let mut best = (f64::INFINITY, (0..k).collect::<Vec<_>>());
    for perm in permutations(k) {
        for q in &candidates {
            let pred = oriented_centers(base, &sqrt_f, q);
            let cost: f64 = (0..k)
                .map(|a| model.p()[a] * (centers.row(perm[a]) - pred.row(a)).norm_squared())
                .sum();
            if cost < best.0 {
                best = (cost, perm.clone());
            }
        }
    }
    let perm = best.1;
    let means = DMatrix::from_fn(k, dim, |a, j| centers[(perm[a], j)]);
    let mut covs = Vec::with_capacity(k);
    for a in 0..k {
        let c = perm[a];
        let members: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
        if members.len() > dim + 1 {
            let mut cov = DMatrix::zeros(dim, dim);
            for &i in &members {
                let r = coords.row(i) - centers.row(c);
                cov += r.transpose() * r;
            }
            cov /= members.len() as f64;
            for j in 0..dim {
                cov[(j, j)] += 1e-6;
            }
            covs.push(cov);
        } else {
            covs.push(sigma.clone());
        }
    }
    let weights = model.p().to_vec();
    Ok(GmmParams { means, covs, weights })
}

/// Lloyd's algorithm with k-means++ seeding; best of `restarts` runs.
pub fn kmeans(coords: &DMatrix<f64>, k: usize, restarts: usize, rng: &mut rng::Rng) -> (DMatrix<f64>, Vec<usize>) {
    let (n, dim) = coords.shape();
    let mut best: Option<(f64, DMatrix<f64>, Vec<usize>)> = None;
    for _ in 0..restarts.max(1) {
        let mut centers = DMatrix::zeros(k, dim);
        let first = rng.random_range(0..n);
        centers.set_row(0, &coords.row(first));
        let mut d2: Vec<f64> = (0..n).map(|i| (coords.row(i) - centers.row(0)).norm_squared()).collect();
        for c in 1..k {
            let total: f64 = d2.iter().sum();
            let pick = if total > 0.0 {
                let mut u = rng.random::<f64>() * total;
                let mut idx = n - 1;
                for (i, &v) in d2.iter().enumerate() {
                    if u < v {
                        idx = i;
                        break;
                    }
                    u -= v;
                }
                idx
            } else {
                rng.random_range(0..n)
            };
            centers.set_row(c, &coords.row(pick));
            for (i, v) in d2.iter_mut().enumerate() {
                *v = v.min((coords.row(i) - centers.row(c)).norm_squared());
            }
        }
        let mut assign = vec![0usize; n];
        for _ in 0..100 {
            let mut changed = false;
            for (i, slot) in assign.iter_mut().enumerate() {
                let c = (0..k)
                    .min_by(|&a, &b| {
                        (coords.row(i) - centers.row(a)).norm_squared().total_cmp(&(coords.row(i) - centers.row(b)).norm_squared())
                    })
                    .expect("k > 0");
                if c != *slot {
                    *slot = c;
                    changed = true;
                }
            }
            let mut sums = DMatrix::zeros(k, dim);
            let mut counts = vec![0usize; k];
            for (i, &c) in assign.iter().enumerate() {
                counts[c] += 1;
                let row = sums.row(c) + coords.row(i);
                sums.set_row(c, &row);
            }
            for c in 0..k {
                if counts[c] > 0 {
                    let row = sums.row(c) / counts[c] as f64;
                    centers.set_row(c, &row);
                }
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = (0..n).map(|i| (coords.row(i) - centers.row(assign[i])).norm_squared()).sum();
        if best.as_ref().is_none_or(|b| inertia < b.0) {
            best = Some((inertia, centers, assign));
        }
    }
    let (_, centers, assign) = best.expect("at least one run");
    (centers, assign)
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for rest in permutations(k - 1) {
        for pos in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(pos, k - 1);
            out.push(p);
        }
    }
    out
}

fn fit_with_restarts(coords: &DMatrix<f64>, init: &GmmParams, options: &GmmOptions, rng: &mut rng::Rng) -> Result<(GmmFit, usize)> {
    let mut start = init.clone();
    for attempt in 0..=options.max_restarts {
        match em_fit(coords, &start, options) {
            Ok(fit) => return Ok((fit, attempt)),
            Err(Error::DegenerateMixture(_)) => {
                log::warn!("EM degenerate on attempt {attempt}; restarting with jitter");
                start = init.clone();
                for a in 0..start.means.nrows() {
                    for j in 0..start.means.ncols() {
                        let s = init.covs[a][(j, j)].max(1e-6).sqrt();
                        let z: f64 = StandardNormal.sample(rng);
                        start.means[(a, j)] += 0.1 * s * z;
                    }
                }
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::DegenerateMixture(options.max_restarts))
}

/// EM for a full-covariance Gaussian mixture from the given start. Equivariant
/// under orthogonal transforms applied to both data and start.
pub fn em_fit(coords: &DMatrix<f64>, init: &GmmParams, options: &GmmOptions) -> Result<GmmFit> {
    let (n, dim) = coords.shape();
    let k = init.means.nrows();
    if init.means.ncols() != dim || init.covs.len() != k || init.weights.len() != k {
        return Err(Error::Shape("mixture start does not match the data".into()));
    }
    let mut params = init.clone();
    let mut resp = DMatrix::zeros(n, k);
    let mut prev = f64::NEG_INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    let mut ll = prev;
    for it in 1..=options.max_iters.max(1) {
        iterations = it;
        ll = e_step(coords, &params, &mut resp)?;
        if (ll - prev).abs() < options.tol {
            converged = true;
            break;
        }
        prev = ll;
        m_step(coords, &resp, &mut params, options.fit_weights)?;
    }
    if !converged {
        ll = e_step(coords, &params, &mut resp)?;
    }
    Ok(GmmFit { params, responsibilities: resp, log_likelihood: ll, iterations, converged })
}

/// Responsibilities under fixed mixture parameters.
pub fn mixture_posterior(coords: &DMatrix<f64>, params: &GmmParams) -> Result<GmmFit> {
    let mut resp = DMatrix::zeros(coords.nrows(), params.means.nrows());
    let ll = e_step(coords, params, &mut resp)?;
    Ok(GmmFit { params: params.clone(), responsibilities: resp, log_likelihood: ll, iterations: 0, converged: true })
}

fn e_step(coords: &DMatrix<f64>, params: &GmmParams, resp: &mut DMatrix<f64>) -> Result<f64> {
    let (n, dim) = coords.shape();
    let k = params.means.nrows();
    let mut chol = Vec::with_capacity(k);
    for (a, cov) in params.covs.iter().enumerate() {
        let c = Cholesky::new(cov.clone()).ok_or(Error::DegenerateMixture(0))?;
        let log_det: f64 = 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        if !log_det.is_finite() || params.weights[a] <= 0.0 {
            return Err(Error::DegenerateMixture(0));
        }
        chol.push((c, params.weights[a].ln() - 0.5 * log_det));
    }
    let mut total = 0.0;
    let mut terms = vec![0.0; k];
    for i in 0..n {
        for (a, (c, offset)) in chol.iter().enumerate() {
            let r = (coords.row(i) - params.means.row(a)).transpose();
            let z = c.l().solve_lower_triangular(&r).expect("triangular solve");
            terms[a] = offset - 0.5 * z.norm_squared();
        }
        let lse = log_sum_exp(&terms);
        total += lse;
        for a in 0..k {
            resp[(i, a)] = (terms[a] - lse).exp();
        }
    }
    let ll = total / n as f64 - 0.5 * dim as f64 * (2.0 * std::f64::consts::PI).ln();
    if !ll.is_finite() {
        return Err(Error::DegenerateMixture(0));
    }
    Ok(ll)
}

fn m_step(coords: &DMatrix<f64>, resp: &DMatrix<f64>, params: &mut GmmParams, fit_weights: bool) -> Result<()> {
    let (n, dim) = coords.shape();
    let k = resp.ncols();
    for a in 0..k {
        let mass: f64 = resp.column(a).sum();
        if mass < (dim as f64 + 1.0).max(1e-8 * n as f64) {
            return Err(Error::DegenerateMixture(0));
        }
        let mean = (resp.column(a).transpose() * coords) / mass;
        let mut cov = DMatrix::zeros(dim, dim);
        for i in 0..n {
            let r = coords.row(i) - &mean;
            cov += r.transpose() * r * resp[(i, a)];
        }
        cov /= mass;
        let cov = linalg::symmetrize(&cov);
        if linalg::min_eigenvalue(&cov) <= 1e-10 * cov.trace().max(1e-300) {
            return Err(Error::DegenerateMixture(0));
        }
        params.means.set_row(a, &mean);
        params.covs[a] = cov;
        if fit_weights {
            params.weights[a] = mass / n as f64;
        }
    }
    Ok(())
}
