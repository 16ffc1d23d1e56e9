//! Exact Bayes posterior by enumeration of all `k^n` labelings, for tiny
//! instances used as ground truth.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::bp::NodeEstimates;
use crate::channel::{log_sum_exp, GaussianChannel};
use crate::error::{Error, Result};
use crate::label_model::{sample_covariates, sample_labels, ChannelSpec, CommunityModel, CovariateSample, LabelSample};
use crate::netgen::{block_probabilities, generate_gaussian_equiv, generate_network, AdjacencyList, GaussianEquivObservation};
use crate::potential::NetworkSpec;
use crate::rng;

/// Largest enumeration allowed (`3^12`).
pub const MAX_CONFIGS: usize = 531_441;
const CHUNKS_TARGET: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct ExactPosterior {
    /// Normalized log posterior of every labeling; labeling `σ` sits at index
    /// `Σ_i σ_i k^i`.
    pub config_log_weights: Vec<f64>,
    /// `n × k`.
    pub marginals: DMatrix<f64>,
    /// `(1/n) Σ_i Cov(X_i | observations)`.
    pub mmse_matrix: DMatrix<f64>,
    /// `log p(observations)`, with all normalizing constants.
    pub log_evidence: f64,
}

impl ExactPosterior {
    pub fn estimates(&self, model: &CommunityModel) -> NodeEstimates {
        NodeEstimates::from_marginals(self.marginals.clone(), model, 0, true)
    }

    pub fn n(&self) -> usize {
        self.marginals.nrows()
    }
}

/// Which network observation the mutual-information estimator simulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObservationKind {
    /// Bernoulli adjacency per layer.
    Bernoulli,
    /// `Z = X R Xᵀ/√n + ξ` per layer with `t = 1`.
    GaussianEquivalent,
}

/// Per-node and per-pair log-likelihood tables for one instance.
struct Tables {
    n: usize,
    k: usize,
    /// `node[i*k + a]`: prior, covariates and diagonal Gaussian terms.
    node: Vec<f64>,
    /// `pair[((i*n + j)*k + a)*k + b]`, stored for both orders of each pair.
    pair: Vec<f64>,
    /// Log prior per node and community, to separate out `log p(σ)`.
    prior: Vec<f64>,
}

impl Tables {
    fn pair(&self, i: usize, j: usize, a: usize, b: usize) -> f64 {
        self.pair[((i * self.n + j) * self.k + a) * self.k + b]
    }

    fn build(
        networks: &[AdjacencyList],
        gaussian_obs: &[GaussianEquivObservation],
        covariates: &CovariateSample,
        channel: &ChannelSpec,
        model: &CommunityModel,
        specs: &NetworkSpec,
    ) -> Result<Self> {
        let n = covariates.n();
        let k = model.k();
        if networks.len() != specs.len() {
            return Err(Error::Shape(format!("{} networks but {} layer specs", networks.len(), specs.len())));
        }
        let mut node = vec![0.0; n * k];
        let mut prior = vec![0.0; n * k];
        let mut pair = vec![0.0; n * n * k * k];

        for i in 0..n {
            for a in 0..k {
                prior[i * k + a] = model.p()[a].ln();
            }
        }
        let alpha = channel.alpha();
        for (i, rev) in covariates.revealed.iter().enumerate() {
            for a in 0..k {
                node[i * k + a] += match rev {
                    Some(r) if *r == a => alpha.ln(),
                    Some(_) => f64::NEG_INFINITY,
                    None => (1.0 - alpha).ln(),
                };
            }
        }
        if let Some(y) = &covariates.gaussian {
            if y.shape() != (n, model.dim()) {
                return Err(Error::Shape("gaussian covariates must be n x (k-1)".into()));
            }
            let ch = GaussianChannel::new(channel.snr(), model)?;
            let constant = -0.5 * model.dim() as f64 * (2.0 * std::f64::consts::PI).ln();
            for i in 0..n {
                let yi = y.row(i).transpose();
                for a in 0..k {
                    node[i * k + a] += ch.log_likelihood(&yi, a) + constant;
                }
            }
        }

        for (layer, (g, spec)) in networks.iter().zip(&specs.layers).enumerate() {
            if g.n != n {
                return Err(Error::Shape(format!("layer {layer} has n = {}, expected {n}", g.n)));
            }
            let p = block_probabilities(model, spec.d, &spec.r, n)?;
            for i in 0..n {
                for j in i + 1..n {
                    let edge = g.has_edge(i, j);
                    for a in 0..k {
                        for b in 0..k {
                            let q = p[(a, b)];
                            let v = if edge { q.ln() } else { (1.0 - q).ln() };
                            pair[((i * n + j) * k + a) * k + b] += v;
                            pair[((j * n + i) * k + b) * k + a] += v;
                        }
                    }
                }
            }
        }

        let log_norm = |var: f64| -0.5 * (2.0 * std::f64::consts::PI * var).ln();
        for obs in gaussian_obs {
            if obs.n != n || obs.r.nrows() != model.dim() {
                return Err(Error::Shape("gaussian-equivalent observation does not match the instance".into()));
            }
            let scale = obs.t.sqrt() / (n as f64).sqrt();
            let mu = model.mu();
            let signal = mu * &obs.r * mu.transpose() * scale;
            for i in 0..n {
                let var = GaussianEquivObservation::noise_variance(i, i);
                for a in 0..k {
                    let r = obs.z[(i, i)] - signal[(a, a)];
                    node[i * k + a] += log_norm(var) - 0.5 * r * r / var;
                }
                for j in i + 1..n {
                    for a in 0..k {
                        for b in 0..k {
                            let r = obs.z[(i, j)] - signal[(a, b)];
                            let v = log_norm(1.0) - 0.5 * r * r;
                            pair[((i * n + j) * k + a) * k + b] += v;
                            pair[((j * n + i) * k + b) * k + a] += v;
                        }
                    }
                }
            }
        }
        for i in 0..n {
            for a in 0..k {
                node[i * k + a] += prior[i * k + a];
            }
        }
        Ok(Self { n, k, node, pair, prior })
    }

    /// Full log joint `log p(σ, observations)`.
    fn log_joint(&self, sigma: &[usize]) -> f64 {
        let mut total = 0.0;
        for i in 0..self.n {
            total += self.node[i * self.k + sigma[i]];
            for j in i + 1..self.n {
                total += self.pair(i, j, sigma[i], sigma[j]);
            }
        }
        total
    }

    fn log_prior(&self, sigma: &[usize]) -> f64 {
        sigma.iter().enumerate().map(|(i, &a)| self.prior[i * self.k + a]).sum()
    }

    /// Change in `log_joint` when node `i` moves from `from` to `to`.
    fn delta(&self, sigma: &[usize], i: usize, from: usize, to: usize) -> f64 {
        let k = self.k;
        let mut d = self.node[i * k + to] - self.node[i * k + from];
        for j in 0..self.n {
            if j != i {
                let b = sigma[j];
                d += self.pair(i, j, to, b) - self.pair(i, j, from, b);
            }
        }
        d
    }
}

/// Partial result over one block of labelings.
struct Chunk {
    max: f64,
    /// `Σ exp(ll − max)`.
    sum: f64,
    /// `n × k` marginal mass scaled by `exp(−max)`.
    mass: Vec<f64>,
    logs: Vec<(usize, f64)>,
}

impl Chunk {
    fn merge(mut self, other: Chunk) -> Chunk {
        if other.max == f64::NEG_INFINITY {
            self.logs.extend(other.logs);
            return self;
        }
        if self.max == f64::NEG_INFINITY {
            let mut other = other;
            let mut logs = self.logs;
            logs.extend(other.logs);
            other.logs = logs;
            return other;
        }
        let m = self.max.max(other.max);
        let (sa, sb) = ((self.max - m).exp(), (other.max - m).exp());
        self.sum = self.sum * sa + other.sum * sb;
        for (x, y) in self.mass.iter_mut().zip(&other.mass) {
            *x = *x * sa + y * sb;
        }
        self.max = m;
        self.logs.extend(other.logs);
        self
    }
}

/// Enumerate all labelings in reflected k-ary Gray-code order within fixed
/// chunks, updating the log joint incrementally.
fn enumerate(tables: &Tables) -> Chunk {
    let (n, k) = (tables.n, tables.k);
    // the top `fixed` digits select the chunk; the count does not depend on
    // the thread pool, so results are identical for any parallelism
    let mut fixed = 0;
    while fixed < n && k.pow(fixed as u32) < CHUNKS_TARGET {
        fixed += 1;
    }
    let free = n - fixed;
    let chunks = k.pow(fixed as u32);
    let parts: Vec<Chunk> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut sigma = vec![0usize; n];
            let mut rest = c;
            for digit in sigma[free..].iter_mut() {
                *digit = rest % k;
                rest /= k;
            }
            let mut index: usize = sigma.iter().rev().fold(0, |acc, &d| acc * k + d);
            let mut dirs = vec![1isize; free];
            let mut ll = tables.log_joint(&sigma);
            let mut chunk = Chunk { max: f64::NEG_INFINITY, sum: 0.0, mass: vec![0.0; n * k], logs: Vec::with_capacity(k.pow(free as u32)) };
            loop {
                chunk.logs.push((index, ll));
                if ll > f64::NEG_INFINITY {
                    if ll > chunk.max {
                        let s = (chunk.max - ll).exp();
                        chunk.sum *= s;
                        chunk.mass.iter_mut().for_each(|m| *m *= s);
                        chunk.max = ll;
                    }
                    let w = (ll - chunk.max).exp();
                    chunk.sum += w;
                    for (i, &a) in sigma.iter().enumerate() {
                        chunk.mass[i * k + a] += w;
                    }
                }
                // next Gray-code step
                let mut moved = None;
                for i in 0..free {
                    let nd = sigma[i] as isize + dirs[i];
                    if nd >= 0 && (nd as usize) < k {
                        moved = Some((i, nd as usize));
                        break;
                    }
                    dirs[i] = -dirs[i];
                }
                let Some((i, to)) = moved else { break };
                let from = sigma[i];
                let step = k.pow(i as u32);
                if ll.is_finite() {
                    ll += tables.delta(&sigma, i, from, to);
                    sigma[i] = to;
                } else {
                    sigma[i] = to;
                    ll = tables.log_joint(&sigma);
                }
                index = if to > from { index + step } else { index - step };
            }
            chunk
        })
        .collect();
    // fixed-order pairwise merge
    let mut level = parts;
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        let mut it = level.into_iter();
        while let Some(a) = it.next() {
            next.push(match it.next() {
                Some(b) => a.merge(b),
                None => a,
            });
        }
        level = next;
    }
    level.pop().expect("at least one chunk")
}

fn check_size(n: usize, k: usize) -> Result<()> {
    let configs = (k as f64).powi(n as i32);
    if n == 0 || configs > MAX_CONFIGS as f64 {
        return Err(Error::SizeGuard(format!("k^n = {k}^{n} labelings exceeds {MAX_CONFIGS}")));
    }
    Ok(())
}

/// Exact posterior over all labelings given networks, optional
/// Gaussian-equivalent observations and covariates.
pub fn exact_posterior(
    networks: &[AdjacencyList],
    gaussian_obs: &[GaussianEquivObservation],
    covariates: &CovariateSample,
    channel: &ChannelSpec,
    model: &CommunityModel,
    specs: &NetworkSpec,
) -> Result<ExactPosterior> {
    let n = covariates.n();
    let k = model.k();
    check_size(n, k)?;
    let tables = Tables::build(networks, gaussian_obs, covariates, channel, model, specs)?;
    let chunk = enumerate(&tables);
    if !(chunk.max > f64::NEG_INFINITY) {
        return Err(Error::Numerical("every labeling has zero likelihood".into()));
    }
    let log_evidence = chunk.max + chunk.sum.ln();
    let mut config_log_weights = vec![f64::NEG_INFINITY; k.pow(n as u32)];
    for (idx, ll) in chunk.logs {
        config_log_weights[idx] = ll - log_evidence;
    }
    let marginals = DMatrix::from_fn(n, k, |i, a| chunk.mass[i * k + a] / chunk.sum);
    let mu = model.mu();
    let dim = model.dim();
    let mut mmse = DMatrix::zeros(dim, dim);
    for i in 0..n {
        let q = marginals.row(i);
        let mean = q * mu;
        let mut second = DMatrix::zeros(dim, dim);
        for a in 0..k {
            let m = mu.row(a);
            second += m.transpose() * m * q[a];
        }
        mmse += second - mean.transpose() * mean;
    }
    mmse /= n as f64;
    Ok(ExactPosterior { config_log_weights, marginals, mmse_matrix: crate::linalg::symmetrize(&mmse), log_evidence })
}

/// Monte Carlo estimate of `I(X; observations)/n` on instances of size `n`:
/// the mean over draws of `(log p(obs | X) − log p(obs)) / n`. Returns the
/// estimate and its standard error.
pub fn exact_mutual_information_mc(
    specs: &NetworkSpec,
    channel: &ChannelSpec,
    model: &CommunityModel,
    n: usize,
    n_outer_mc: usize,
    kind: ObservationKind,
    seed: u64,
) -> Result<(f64, f64)> {
    check_size(n, model.k())?;
    if n_outer_mc == 0 {
        return Err(Error::InvalidParameter("need at least one outer sample".into()));
    }
    let mut values = Vec::with_capacity(n_outer_mc);
    for draw in 0..n_outer_mc {
        let s = rng::derive(seed, &[rng::stream::MONTE_CARLO, draw as u64]);
        let labels = sample_labels(model, n, rng::derive(s, &[0]))?;
        let covariates = sample_covariates(&labels, channel, rng::derive(s, &[1]))?;
        let (networks, gaussian, net_specs) = match kind {
            ObservationKind::Bernoulli => {
                let nets = specs
                    .layers
                    .iter()
                    .enumerate()
                    .map(|(l, layer)| generate_network(&labels, model, layer, l, rng::derive(s, &[2, l as u64])))
                    .collect::<Result<Vec<_>>>()?;
                (nets, Vec::new(), specs.clone())
            }
            ObservationKind::GaussianEquivalent => {
                let obs = specs
                    .layers
                    .iter()
                    .enumerate()
                    .map(|(l, layer)| generate_gaussian_equiv(&labels, &layer.r, 1.0, rng::derive(s, &[3, l as u64])))
                    .collect::<Result<Vec<_>>>()?;
                (Vec::new(), obs, NetworkSpec::empty())
            }
        };
        values.push(information_sample(&labels, &networks, &gaussian, &covariates, channel, model, &net_specs)?);
    }
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0) } else { 0.0 };
    Ok((mean, (var / m).sqrt()))
}

/// `(log p(obs | σ_true) − log p(obs)) / n` for one simulated instance.
pub fn information_sample(
    labels: &LabelSample,
    networks: &[AdjacencyList],
    gaussian_obs: &[GaussianEquivObservation],
    covariates: &CovariateSample,
    channel: &ChannelSpec,
    model: &CommunityModel,
    specs: &NetworkSpec,
) -> Result<f64> {
    let n = labels.n;
    check_size(n, model.k())?;
    let tables = Tables::build(networks, gaussian_obs, covariates, channel, model, specs)?;
    let chunk = enumerate(&tables);
    let log_evidence = chunk.max + chunk.sum.ln();
    let sigma = &labels.assignments;
    let log_lik = tables.log_joint(sigma) - tables.log_prior(sigma);
    Ok((log_lik - log_evidence) / n as f64)
}

/// Sum of per-community log weights over all labelings; used to cross-check
/// marginals against the stored configuration weights.
pub fn marginals_from_weights(post: &ExactPosterior, k: usize) -> DMatrix<f64> {
    let n = post.n();
    let mut out = DMatrix::zeros(n, k);
    for (idx, &lw) in post.config_log_weights.iter().enumerate() {
        let w = lw.exp();
        let mut rest = idx;
        for i in 0..n {
            out[(i, rest % k)] += w;
            rest /= k;
        }
    }
    out
}

/// Log-sum-exp of the stored configuration weights (0 when normalized).
pub fn total_log_weight(post: &ExactPosterior) -> f64 {
    log_sum_exp(&post.config_log_weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::Layer;
    use approx::assert_abs_diff_eq;

    #[test]
    fn revealed_single_node() {
        let m = CommunityModel::whiten(&[0.3, 0.7]).unwrap();
        let labels = LabelSample::from_assignments(&m, vec![1], 0).unwrap();
        let ch = ChannelSpec::erasure(1.0, 1).unwrap();
        let cov = sample_covariates(&labels, &ch, 1).unwrap();
        let post = exact_posterior(&[], &[], &cov, &ch, &m, &NetworkSpec::empty()).unwrap();
        assert_abs_diff_eq!(post.marginals[(0, 1)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(post.mmse_matrix[(0, 0)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn no_observations_give_prior() {
        let m = CommunityModel::whiten(&[0.2, 0.3, 0.5]).unwrap();
        let ch = ChannelSpec::none(2);
        let cov = CovariateSample::empty(2);
        let post = exact_posterior(&[], &[], &cov, &ch, &m, &NetworkSpec::empty()).unwrap();
        for i in 0..2 {
            for a in 0..3 {
                assert_abs_diff_eq!(post.marginals[(i, a)], m.p()[a], epsilon = 1e-14);
            }
        }
        assert!((&post.mmse_matrix - DMatrix::<f64>::identity(2, 2)).amax() < 1e-12);
        assert_abs_diff_eq!(post.log_evidence, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn weights_are_consistent_with_marginals() {
        let m = CommunityModel::whiten(&[0.4, 0.6]).unwrap();
        let labels = sample_labels(&m, 9, 3).unwrap();
        let layer = Layer::isotropic(3.0, 1.5, 1).unwrap();
        let g = generate_network(&labels, &m, &layer, 0, 4).unwrap();
        let ch = ChannelSpec::new(0.2, DMatrix::from_element(1, 1, 0.5)).unwrap();
        let cov = sample_covariates(&labels, &ch, 5).unwrap();
        let post = exact_posterior(&[g], &[], &cov, &ch, &m, &NetworkSpec::single(layer)).unwrap();
        assert_abs_diff_eq!(total_log_weight(&post), 0.0, epsilon = 1e-12);
        assert!((marginals_from_weights(&post, 2) - &post.marginals).amax() < 1e-12);
    }

    #[test]
    fn size_guard() {
        let m = CommunityModel::whiten(&[0.2, 0.3, 0.5]).unwrap();
        let cov = CovariateSample::empty(13);
        assert!(matches!(
            exact_posterior(&[], &[], &cov, &ChannelSpec::none(2), &m, &NetworkSpec::empty()),
            Err(Error::SizeGuard(_))
        ));
    }

    #[test]
    fn three_node_hand_enumeration() {
        let m = CommunityModel::whiten(&[0.5, 0.5]).unwrap();
        let layer = Layer::isotropic(1.0, 1.0, 1).unwrap();
        let g = AdjacencyList::from_edges(3, 2, 0, 1.0, layer.r.clone(), [(1, 2)]).unwrap();
        let cov = CovariateSample::empty(3);
        let post = exact_posterior(&[g], &[], &cov, &ChannelSpec::none(1), &m, &NetworkSpec::single(layer)).unwrap();
        let x = |a: usize| m.mu()[(a, 0)];
        let prob = |a: usize, b: usize| 1.0 / 3.0 + (2.0f64 / 3.0).sqrt() / 3.0 * x(a) * x(b);
        let mut weights = [0.0; 8];
        for (c, w) in weights.iter_mut().enumerate() {
            let s = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
            *w = 0.125 * (1.0 - prob(s[0], s[1])) * (1.0 - prob(s[0], s[2])) * prob(s[1], s[2]);
        }
        let z: f64 = weights.iter().sum();
        assert_abs_diff_eq!(post.log_evidence, z.ln(), epsilon = 1e-12);
        for i in 0..3 {
            let q1: f64 = weights.iter().enumerate().filter(|(c, _)| (c >> i) & 1 == 1).map(|(_, w)| w).sum::<f64>() / z;
            assert_abs_diff_eq!(post.marginals[(i, 1)], q1, epsilon = 1e-12);
        }
        for (c, w) in weights.iter().enumerate() {
            assert_abs_diff_eq!(post.config_log_weights[c], (w / z).ln(), epsilon = 1e-10);
        }
    }

    #[test]
    fn incremental_updates_match_direct_evaluation() {
        let m = CommunityModel::whiten(&[0.2, 0.3, 0.5]).unwrap();
        let labels = sample_labels(&m, 6, 11).unwrap();
        let layer = Layer::diagonal(2.0, &[1.0, 0.5]).unwrap();
        let g = generate_network(&labels, &m, &layer, 0, 12).unwrap();
        let z = generate_gaussian_equiv(&labels, &DMatrix::identity(2, 2), 0.7, 13).unwrap();
        let ch = ChannelSpec::new(0.1, DMatrix::identity(2, 2) * 0.3).unwrap();
        let cov = sample_covariates(&labels, &ch, 14).unwrap();
        let specs = NetworkSpec::single(layer);
        let post = exact_posterior(&[g.clone()], &[z.clone()], &cov, &ch, &m, &specs).unwrap();
        let tables = Tables::build(&[g], &[z], &cov, &ch, &m, &specs).unwrap();
        let direct: Vec<f64> = (0..3usize.pow(6))
            .map(|c| {
                let sigma: Vec<usize> = (0..6).map(|i| (c / 3usize.pow(i)) % 3).collect();
                tables.log_joint(&sigma)
            })
            .collect();
        let evidence = log_sum_exp(&direct);
        assert_abs_diff_eq!(post.log_evidence, evidence, epsilon = 1e-9);
        for (a, b) in post.config_log_weights.iter().zip(&direct) {
            if b.is_finite() {
                assert_abs_diff_eq!(*a, b - evidence, epsilon = 1e-9);
            } else {
                assert_eq!(*a, f64::NEG_INFINITY);
            }
        }
    }

    #[test]
    fn matches_single_node_posterior_without_networks() {
        let m = CommunityModel::whiten(&[0.1, 0.3, 0.6]).unwrap();
        let labels = sample_labels(&m, 5, 21).unwrap();
        let ch = ChannelSpec::new(0.3, DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.6])).unwrap();
        let cov = sample_covariates(&labels, &ch, 22).unwrap();
        let post = exact_posterior(&[], &[], &cov, &ch, &m, &NetworkSpec::empty()).unwrap();
        let y = cov.gaussian.as_ref().unwrap();
        for i in 0..5 {
            let w = crate::channel::posterior_weights(&y.row(i).transpose(), cov.revealed[i], ch.snr(), &m).unwrap();
            for a in 0..3 {
                assert_abs_diff_eq!(post.marginals[(i, a)], w[a], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn information_without_observations_is_zero() {
        let m = CommunityModel::whiten(&[0.3, 0.7]).unwrap();
        let (mi, se) = exact_mutual_information_mc(&NetworkSpec::empty(), &ChannelSpec::none(1), &m, 6, 10, ObservationKind::Bernoulli, 1).unwrap();
        assert_abs_diff_eq!(mi, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(se, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn full_reveal_gives_entropy() {
        let m = CommunityModel::whiten(&[0.2, 0.3, 0.5]).unwrap();
        let ch = ChannelSpec::erasure(1.0, 2).unwrap();
        let (mi, se) = exact_mutual_information_mc(&NetworkSpec::empty(), &ch, &m, 6, 200, ObservationKind::Bernoulli, 2).unwrap();
        assert!((mi - m.entropy()).abs() <= 3.0 * se, "{mi} ± {se} vs {}", m.entropy());
    }
}
