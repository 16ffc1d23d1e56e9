//! Sampling of degree-balanced SBM layers and of the Gaussian-equivalent
//! matrix observation.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::label_model::{CommunityModel, LabelSample};
use crate::potential::Layer;
use crate::rng;

/// Largest `n` for which the dense Gaussian-equivalent matrix is built.
pub const DENSE_LIMIT: usize = 5000;

/// Below this expected degree the diverging-degree regime is a poor approximation.
pub const LOW_DEGREE_WARNING: f64 = 10.0;

/// Undirected simple graph stored as a sorted `(i, j)` list with `i < j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyList {
    pub n: usize,
    pub k: usize,
    pub layer: usize,
    pub d: f64,
    pub r: DMatrix<f64>,
    pub edges: Vec<(usize, usize)>,
}

impl AdjacencyList {
    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    /// Neighbor lists, each sorted.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        for list in adj.iter_mut() {
            list.sort_unstable();
        }
        adj
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        let key = if i < j { (i, j) } else { (j, i) };
        self.edges.binary_search(&key).is_ok()
    }

    /// Check the structural invariants: `i < j`, in range, sorted, no duplicates.
    pub fn validate(&self) -> Result<()> {
        for w in self.edges.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Parse(format!("edges not strictly sorted near {:?}", w[1])));
            }
        }
        for &(i, j) in &self.edges {
            if i >= j || j >= self.n {
                return Err(Error::Parse(format!("invalid edge ({i}, {j}) for n = {}", self.n)));
            }
        }
        Ok(())
    }

    /// Build from an arbitrary edge iterator; orients, sorts and deduplicates.
    pub fn from_edges(n: usize, k: usize, layer: usize, d: f64, r: DMatrix<f64>, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut list: Vec<(usize, usize)> = Vec::new();
        for (i, j) in edges {
            if i == j {
                return Err(Error::InvalidParameter(format!("self-loop at node {i}")));
            }
            if i >= n || j >= n {
                return Err(Error::InvalidParameter(format!("edge ({i}, {j}) out of range for n = {n}")));
            }
            list.push(if i < j { (i, j) } else { (j, i) });
        }
        list.sort_unstable();
        list.dedup();
        Ok(Self { n, k, layer, d, r, edges: list })
    }
}

/// `d/n + √(d(1 − d/n))/n · x_iᵀ R x_j`, rejected if it leaves `[0, 1]`.
pub fn edge_probability(x_i: &DVector<f64>, x_j: &DVector<f64>, d: f64, r: &DMatrix<f64>, n: usize) -> Result<f64> {
    let nf = n as f64;
    if !(d > 0.0 && d < nf) {
        return Err(Error::InvalidParameter(format!("need 0 < d < n, got d = {d}, n = {n}")));
    }
    let prob = d / nf + (d * (1.0 - d / nf)).sqrt() / nf * x_i.dot(&(r * x_j));
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::InvalidParameter(format!("edge probability {prob} outside [0, 1]")));
    }
    Ok(prob)
}

/// The `k × k` table of edge probabilities between communities, scanning all
/// pairs so an invalid `(d, R, n)` is caught before any sampling.
pub fn block_probabilities(model: &CommunityModel, d: f64, r: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>> {
    let k = model.k();
    if r.nrows() != model.dim() {
        return Err(Error::Shape(format!("R is {0}x{0}, model dimension is {1}", r.nrows(), model.dim())));
    }
    let mut out = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            let (xa, xb) = (model.mu_row(a), model.mu_row(b));
            out[(a, b)] = edge_probability(&xa, &xb, d, r, n).map_err(|e| match e {
                Error::InvalidParameter(_) if d > 0.0 && d < n as f64 => {
                    let nf = n as f64;
                    let prob = d / nf + (d * (1.0 - d / nf)).sqrt() / nf * xa.dot(&(r * &xb));
                    Error::EdgeProbability { a, b, prob }
                }
                other => other,
            })?;
        }
    }
    Ok(out)
}

/// Degree guard: `1 ≤ d ≤ n/2`. Returns `true` when `d` is below the
/// low-degree warning level.
pub fn check_degree(d: f64, n: usize) -> Result<bool> {
    let nf = n as f64;
    if !(d >= 1.0 && d <= nf / 2.0) {
        return Err(Error::InvalidParameter(format!(
            "expected degree d = {d} must satisfy 1 <= d <= n/2 = {}",
            nf / 2.0
        )));
    }
    let low = d < LOW_DEGREE_WARNING;
    if low {
        log::warn!("d = {d} < {LOW_DEGREE_WARNING}: the diverging-degree approximation is poor");
    }
    Ok(low)
}

/// Sample one layer. Pairs are independent Bernoulli draws; since the edge
/// probability only depends on the community pair, each community block is
/// sampled by geometric skipping over its pair index, which is exact.
pub fn generate_network(labels: &LabelSample, model: &CommunityModel, layer: &Layer, layer_index: usize, seed: u64) -> Result<AdjacencyList> {
    let n = labels.n;
    check_degree(layer.d, n)?;
    let probs = block_probabilities(model, layer.d, &layer.r, n)?;
    let k = model.k();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &a) in labels.assignments.iter().enumerate() {
        members[a].push(i);
    }
    let mut edges = Vec::new();
    for a in 0..k {
        for b in a..k {
            let q = probs[(a, b)];
            let mut rng = rng::child(seed, &[rng::stream::NETWORK, layer_index as u64, a as u64, b as u64]);
            let (ma, mb) = (&members[a], &members[b]);
            if a == b {
                let m = ma.len();
                let picked = skip_indices(m * m.saturating_sub(1) / 2, q, &mut rng);
                for (row, col) in upper_pairs(m, &picked) {
                    edges.push(order(ma[row], ma[col]));
                }
            } else {
                let cols = mb.len();
                for idx in skip_indices(ma.len() * cols, q, &mut rng) {
                    edges.push(order(ma[idx / cols], mb[idx % cols]));
                }
            }
        }
    }
    edges.sort_unstable();
    Ok(AdjacencyList { n, k, layer: layer_index, d: layer.d, r: layer.r.clone(), edges })
}

/// Map increasing linear indices over the strict upper triangle of an
/// `m × m` matrix (row-major: row `r` holds `(r, r+1..m)`) to `(row, col)`.
fn upper_pairs(m: usize, sorted_indices: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(sorted_indices.len());
    let mut row = 0usize;
    let mut row_start = 0usize;
    for &idx in sorted_indices {
        while idx >= row_start + (m - 1 - row) {
            row_start += m - 1 - row;
            row += 1;
        }
        out.push((row, row + 1 + (idx - row_start)));
    }
    out
}

fn order(i: usize, j: usize) -> (usize, usize) {
    if i < j {
        (i, j)
    } else {
        (j, i)
    }
}

/// Indices in `0..total` selected independently with probability `q`, in order.
fn skip_indices(total: usize, q: f64, rng: &mut rng::Rng) -> Vec<usize> {
    let mut out = Vec::new();
    if total == 0 || q <= 0.0 {
        return out;
    }
    if q >= 1.0 {
        return (0..total).collect();
    }
    let log_fail = (-q).ln_1p();
    let mut pos: usize = 0;
    loop {
        let u: f64 = 1.0 - rng.random::<f64>();
        let skip = (u.ln() / log_fail).floor();
        if !skip.is_finite() || skip >= (total - pos) as f64 {
            break;
        }
        pos += skip as usize;
        out.push(pos);
        pos += 1;
        if pos >= total {
            break;
        }
    }
    out
}

/// `Z = √t · X R Xᵀ / √n + ξ` with `ξ_ij ~ N(0,1)` (i<j) and `ξ_ii ~ N(0,2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEquivObservation {
    pub n: usize,
    pub z: DMatrix<f64>,
    pub t: f64,
    pub r: DMatrix<f64>,
}

impl GaussianEquivObservation {
    /// Assemble from an explicit symmetric noise matrix.
    pub fn from_noise(labels: &LabelSample, r: &DMatrix<f64>, t: f64, noise: &DMatrix<f64>) -> Result<Self> {
        let n = labels.n;
        if n > DENSE_LIMIT {
            return Err(Error::SizeGuard(format!("n = {n} exceeds dense limit {DENSE_LIMIT}")));
        }
        if noise.nrows() != n || noise.ncols() != n {
            return Err(Error::Shape("noise must be n x n".into()));
        }
        if t < 0.0 {
            return Err(Error::InvalidParameter(format!("signal strength t = {t} must be >= 0")));
        }
        let x = &labels.vectors;
        let w = x * r * x.transpose() / (n as f64).sqrt();
        let z = w * t.sqrt() + noise;
        Ok(Self { n, z: crate::linalg::symmetrize(&z), t, r: r.clone() })
    }

    /// Noise variance of entry `(i, j)`.
    pub fn noise_variance(i: usize, j: usize) -> f64 {
        if i == j {
            2.0
        } else {
            1.0
        }
    }
}

pub fn generate_gaussian_equiv(labels: &LabelSample, r: &DMatrix<f64>, t: f64, seed: u64) -> Result<GaussianEquivObservation> {
    let n = labels.n;
    if n > DENSE_LIMIT {
        return Err(Error::SizeGuard(format!("n = {n} exceeds dense limit {DENSE_LIMIT}")));
    }
    let mut rng = rng::child(seed, &[rng::stream::GAUSS_EQUIV]);
    let mut noise = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let g: f64 = StandardNormal.sample(&mut rng);
            let v = g * GaussianEquivObservation::noise_variance(i, j).sqrt();
            noise[(i, j)] = v;
            noise[(j, i)] = v;
        }
    }
    GaussianEquivObservation::from_noise(labels, r, t, &noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label_model::sample_labels;
    use approx::assert_abs_diff_eq;

    fn sym2() -> CommunityModel {
        CommunityModel::whiten(&[0.5, 0.5]).unwrap()
    }

    #[test]
    fn zero_coupling_gives_base_rate() {
        let x = DVector::from_vec(vec![1.0]);
        let y = DVector::from_vec(vec![-1.0]);
        assert_eq!(edge_probability(&x, &y, 30.0, &DMatrix::zeros(1, 1), 100).unwrap(), 0.3);
    }

    #[test]
    fn same_community_probability_by_hand() {
        let x = DVector::from_vec(vec![1.0]);
        let p = edge_probability(&x, &x, 30.0, &DMatrix::from_element(1, 1, 0.5), 100).unwrap();
        // 0.3 + sqrt(30 * 0.7) / 100 * 0.5
        assert_abs_diff_eq!(p, 0.3 + 21f64.sqrt() / 200.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p, 0.322_912_878_474_779_2, epsilon = 1e-12);
    }

    #[test]
    fn out_of_range_probability_names_the_pair() {
        let err = block_probabilities(&sym2(), 30.0, &DMatrix::from_element(1, 1, 10.0), 100).unwrap_err();
        match err {
            Error::EdgeProbability { a, b, prob } => {
                assert_ne!(a, b);
                assert!(prob < 0.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn degree_guard() {
        let m = sym2();
        let labels = LabelSample::from_assignments(&m, vec![0, 1], 0).unwrap();
        let layer = Layer::isotropic(1.9, 0.0, 1).unwrap();
        assert!(generate_network(&labels, &m, &layer, 0, 1).is_err());
        assert!(check_degree(0.5, 100).is_err());
        assert!(check_degree(5.0, 100).unwrap());
        assert!(!check_degree(30.0, 100).unwrap());
    }

    #[test]
    fn skip_sampler_extremes() {
        let mut r = rng::rng(1);
        assert!(skip_indices(100, 0.0, &mut r).is_empty());
        assert_eq!(skip_indices(5, 1.0, &mut r), vec![0, 1, 2, 3, 4]);
        let picked = skip_indices(1_000_000, 0.01, &mut r);
        assert!(picked.windows(2).all(|w| w[0] < w[1]));
        assert!((picked.len() as f64 - 10_000.0).abs() < 400.0);
    }

    #[test]
    fn generated_graph_is_simple_and_reproducible() {
        let m = CommunityModel::whiten(&[0.2, 0.3, 0.5]).unwrap();
        let labels = sample_labels(&m, 300, 4).unwrap();
        let layer = Layer::diagonal(20.0, &[1.0, 0.5]).unwrap();
        let g = generate_network(&labels, &m, &layer, 0, 9).unwrap();
        g.validate().unwrap();
        assert_eq!(g, generate_network(&labels, &m, &layer, 0, 9).unwrap());
        assert_ne!(g.edges, generate_network(&labels, &m, &layer, 1, 9).unwrap().edges);
    }

    #[test]
    fn upper_triangle_indexing() {
        let all: Vec<usize> = (0..21).collect();
        let pairs = upper_pairs(7, &all);
        let expected: Vec<(usize, usize)> = (0..7).flat_map(|i| (i + 1..7).map(move |j| (i, j))).collect();
        assert_eq!(pairs, expected);
        assert_eq!(upper_pairs(4, &[2, 5]), vec![(0, 3), (2, 3)]);
    }

    #[test]
    fn from_edges_normalizes() {
        let g = AdjacencyList::from_edges(4, 2, 0, 2.0, DMatrix::zeros(1, 1), vec![(1, 0), (0, 1), (3, 2)]).unwrap();
        assert_eq!(g.edges, vec![(0, 1), (2, 3)]);
        assert!(g.has_edge(1, 0));
        assert!(AdjacencyList::from_edges(4, 2, 0, 2.0, DMatrix::zeros(1, 1), vec![(1, 1)]).is_err());
    }

    #[test]
    fn gaussian_equivalent_by_hand() {
        let m = sym2();
        let labels = LabelSample::from_assignments(&m, vec![0, 1], 0).unwrap();
        let r = DMatrix::from_element(1, 1, 0.8);
        let obs = GaussianEquivObservation::from_noise(&labels, &r, 1.0, &DMatrix::zeros(2, 2)).unwrap();
        // X = (1, -1)ᵀ, W = 0.8 X Xᵀ / √2
        let c = 0.8 / 2f64.sqrt();
        assert_abs_diff_eq!(obs.z, DMatrix::from_row_slice(2, 2, &[c, -c, -c, c]), epsilon = 1e-15);
    }

    #[test]
    fn gaussian_equivalent_noise_variances() {
        let m = sym2();
        let labels = sample_labels(&m, 400, 2).unwrap();
        let obs = generate_gaussian_equiv(&labels, &DMatrix::from_element(1, 1, 1.0), 0.0, 3).unwrap();
        assert_eq!(obs.z, obs.z.transpose());
        let diag_var = (0..400).map(|i| obs.z[(i, i)].powi(2)).sum::<f64>() / 400.0;
        let mut off = 0.0;
        let mut cnt = 0.0;
        for i in 0..400 {
            for j in i + 1..400 {
                off += obs.z[(i, j)].powi(2);
                cnt += 1.0;
            }
        }
        assert!((diag_var - 2.0).abs() < 0.4);
        assert!((off / cnt - 1.0).abs() < 0.02);
        let big = LabelSample::from_assignments(&m, vec![0; DENSE_LIMIT + 1], 0).unwrap();
        assert!(matches!(
            generate_gaussian_equiv(&big, &DMatrix::zeros(1, 1), 1.0, 0),
            Err(Error::SizeGuard(_))
        ));
    }
}
