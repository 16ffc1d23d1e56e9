//! Sum-product belief propagation for labels observed through one or more
//! SBM layers plus per-node side information.
//!
//! Pairs joined by an edge in any layer exchange messages; their pair factor
//! is the product over layers of `P_ab` (edge present) or `1 − P_ab`
//! (absent), with `P` the exact block probabilities. Every other pair only
//! contributes `Π_ℓ (1 − P^ℓ_ab)`, which is folded into a per-node external
//! field computed from the current marginals. One sweep costs
//! `O((n + Σ_ℓ m_ℓ) k²)`.
//!
//! Updates are synchronous (Jacobi), so results depend only on the seed.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::channel::{log_sum_exp, GaussianChannel};
use crate::error::{Error, Result};
use crate::label_model::{ChannelSpec, CommunityModel, CovariateSample, LabelSample};
use crate::netgen::{block_probabilities, AdjacencyList};
use crate::potential::NetworkSpec;
use crate::rng;

const PROB_FLOOR: f64 = 1e-300;
/// Largest supported community count.
pub const MAX_K: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BpInit {
    /// Prior with 1% relative uniform noise.
    UninformativePlusNoise,
    /// Prior times covariate likelihood, with the same noise.
    SideInfoSeeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BpConfig {
    pub max_iters: usize,
    /// Weight kept on the previous message, in `[0, 1)`.
    pub damping: f64,
    /// Convergence threshold on the largest message change.
    pub tol: f64,
    pub init: BpInit,
    pub schedule: BpSchedule,
}

/// Message update order within a sweep. Both are deterministic given the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BpSchedule {
    /// Nodes visited one at a time in a seeded random order per sweep, each
    /// update seeing the latest messages and external field.
    Sequential,
    /// All messages updated from the previous sweep's values.
    Jacobi,
}

impl Default for BpConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            damping: 0.3,
            tol: 1e-6,
            init: BpInit::UninformativePlusNoise,
            schedule: BpSchedule::Sequential,
        }
    }
}

impl BpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::Config(format!("damping {} outside [0, 1)", self.damping)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("tol must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-node posterior summaries from any estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEstimates {
    /// `n × k`, rows on the simplex.
    pub marginals: DMatrix<f64>,
    /// `n × (k−1)`, row `i` is `Σ_a marginals[i,a] μ_a`.
    pub means: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl NodeEstimates {
    pub fn from_marginals(marginals: DMatrix<f64>, model: &CommunityModel, iterations: usize, converged: bool) -> Self {
        let means = &marginals * model.mu();
        Self { marginals, means, iterations, converged }
    }

    /// Prior marginals for every node.
    pub fn prior(n: usize, model: &CommunityModel) -> Self {
        let row = nalgebra::RowDVector::from_row_slice(model.p());
        let marginals = DMatrix::from_fn(n, model.k(), |_, a| row[a]);
        Self::from_marginals(marginals, model, 0, true)
    }

    pub fn n(&self) -> usize {
        self.marginals.nrows()
    }
}

/// `(1/n) Σ_i ‖X_i − X̂_i‖²`, with no search over label permutations.
pub fn compute_mse(means: &DMatrix<f64>, truth: &LabelSample) -> Result<f64> {
    if means.shape() != truth.vectors.shape() {
        return Err(Error::Shape(format!(
            "estimates are {:?}, labels are {:?}",
            means.shape(),
            truth.vectors.shape()
        )));
    }
    Ok((means - &truth.vectors).norm_squared() / truth.n as f64)
}

/// Log node potentials: `log p_a` plus the covariate log-likelihood. Revealed
/// nodes get `−∞` outside the revealed community.
pub fn node_log_potentials(covariates: &CovariateSample, channel: &ChannelSpec, model: &CommunityModel) -> Result<DMatrix<f64>> {
    let n = covariates.n();
    let k = model.k();
    let mut out = DMatrix::zeros(n, k);
    let gauss = match &covariates.gaussian {
        Some(y) => {
            if y.nrows() != n || y.ncols() != model.dim() {
                return Err(Error::Shape("gaussian covariates must be n x (k-1)".into()));
            }
            Some((y, GaussianChannel::new(channel.snr(), model)?))
        }
        None => None,
    };
    for i in 0..n {
        for a in 0..k {
            let mut v = model.p()[a].ln();
            if let Some((y, ch)) = &gauss {
                let yi = y.row(i).transpose();
                v += ch.log_likelihood(&yi, a);
            }
            out[(i, a)] = v;
        }
        if let Some(r) = covariates.revealed[i] {
            if r >= k {
                return Err(Error::Shape(format!("revealed community {r} >= k at node {i}")));
            }
            for a in 0..k {
                if a != r {
                    out[(i, a)] = f64::NEG_INFINITY;
                }
            }
        }
    }
    Ok(out)
}

/// Union graph in CSR form with a per-pair layer mask.
struct PairGraph {
    offsets: Vec<usize>,
    targets: Vec<usize>,
    masks: Vec<u32>,
    /// `reverse[pos]` is the slot of the opposite direction.
    reverse: Vec<usize>,
}

impl PairGraph {
    fn build(n: usize, networks: &[AdjacencyList]) -> Result<Self> {
        if networks.len() > 32 {
            return Err(Error::Unsupported("more than 32 layers".into()));
        }
        let mut pairs: Vec<(usize, usize, u32)> = Vec::new();
        for (l, g) in networks.iter().enumerate() {
            if g.n != n {
                return Err(Error::Shape(format!("layer {l} has n = {}, expected {n}", g.n)));
            }
            pairs.extend(g.edges.iter().map(|&(i, j)| (i, j, 1u32 << l)));
        }
        pairs.sort_unstable_by_key(|&(i, j, _)| (i, j));
        let mut merged: Vec<(usize, usize, u32)> = Vec::with_capacity(pairs.len());
        for (i, j, m) in pairs {
            match merged.last_mut() {
                Some(last) if last.0 == i && last.1 == j => last.2 |= m,
                _ => merged.push((i, j, m)),
            }
        }
        let mut degree = vec![0usize; n];
        for &(i, j, _) in &merged {
            degree[i] += 1;
            degree[j] += 1;
        }
        let mut offsets = vec![0usize; n + 1];
        for i in 0..n {
            offsets[i + 1] = offsets[i] + degree[i];
        }
        let total = offsets[n];
        let mut targets = vec![0usize; total];
        let mut masks = vec![0u32; total];
        let mut reverse = vec![0usize; total];
        let mut fill = offsets.clone();
        for &(i, j, m) in &merged {
            let (pi, pj) = (fill[i], fill[j]);
            targets[pi] = j;
            masks[pi] = m;
            targets[pj] = i;
            masks[pj] = m;
            reverse[pi] = pj;
            reverse[pj] = pi;
            fill[i] += 1;
            fill[j] += 1;
        }
        Ok(Self { offsets, targets, masks, reverse })
    }

    fn slots(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }
}

/// Run BP and return marginals and posterior means.
#[allow(clippy::too_many_arguments)]
pub fn run_bp(
    networks: &[AdjacencyList],
    covariates: &CovariateSample,
    channel: &ChannelSpec,
    model: &CommunityModel,
    specs: &NetworkSpec,
    config: &BpConfig,
    seed: u64,
) -> Result<NodeEstimates> {
    config.validate()?;
    let n = covariates.n();
    let k = model.k();
    if k > MAX_K {
        return Err(Error::Unsupported(format!("BP with k = {k} > {MAX_K} communities")));
    }
    if networks.len() != specs.len() {
        return Err(Error::Shape(format!("{} networks but {} layer specs", networks.len(), specs.len())));
    }
    if networks.is_empty() && covariates.revealed_count() == 0 && covariates.gaussian.is_none() {
        log::warn!("no networks and no side information: BP returns the prior");
    }

    let log_phi = node_log_potentials(covariates, channel, model)?;
    let graph = PairGraph::build(n, networks)?;

    // pair factors per layer mask, and the all-absent factor for the field
    let block: Vec<DMatrix<f64>> = specs
        .layers
        .iter()
        .map(|l| block_probabilities(model, l.d, &l.r, n))
        .collect::<Result<_>>()?;
    let factor_for = |mask: u32| -> DMatrix<f64> {
        DMatrix::from_fn(k, k, |a, b| {
            let mut f = 1.0;
            for (l, p) in block.iter().enumerate() {
                f *= if mask & (1 << l) != 0 { p[(a, b)] } else { 1.0 - p[(a, b)] };
            }
            f.max(PROB_FLOOR)
        })
    };
    let mut mask_ids: Vec<u32> = graph.masks.clone();
    mask_ids.sort_unstable();
    mask_ids.dedup();
    // edge factors are rescaled to unit maximum; only ratios matter
    let factors: Vec<f64> = mask_ids
        .iter()
        .flat_map(|&m| {
            let f = factor_for(m);
            let top = f.max();
            let k = f.nrows();
            (0..k * k).map(move |idx| f[(idx / k, idx % k)] / top)
        })
        .collect();
    let factor_index: Vec<usize> =
        graph.masks.iter().map(|m| mask_ids.binary_search(m).expect("mask present")).collect();
    let absent = factor_for(0);

    // initial beliefs and messages
    let mut rng = rng::child(seed, &[rng::stream::BP_INIT]);
    let mut beliefs = DMatrix::zeros(n, k);
    let mut row = vec![0.0; k];
    for i in 0..n {
        for a in 0..k {
            let base = match config.init {
                BpInit::UninformativePlusNoise => {
                    if log_phi[(i, a)].is_finite() {
                        model.p()[a].ln()
                    } else {
                        f64::NEG_INFINITY
                    }
                }
                BpInit::SideInfoSeeded => log_phi[(i, a)],
            };
            let noise = 1.0 + 0.01 * (2.0 * rng.random::<f64>() - 1.0);
            row[a] = base + noise.ln();
        }
        softmax_in_place(&mut row);
        for a in 0..k {
            beliefs[(i, a)] = row[a];
        }
    }
    let total_slots = graph.targets.len();
    let mut msgs = vec![0.0; total_slots * k];
    for i in 0..n {
        for pos in graph.slots(i) {
            for a in 0..k {
                msgs[pos * k + a] = beliefs[(i, a)];
            }
        }
    }
    let sweep = Sweep { k, graph: &graph, factors: &factors, factor_index: &factor_index, log_phi: &log_phi };
    let mut field = NonEdgeField::new(&absent, &beliefs);
    let mut next = match config.schedule {
        BpSchedule::Jacobi => msgs.clone(),
        BpSchedule::Sequential => Vec::new(),
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    let mut belief = vec![0.0; k];
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=config.max_iters {
        iterations = it;
        let mut max_change: f64 = 0.0;
        match config.schedule {
            BpSchedule::Jacobi => {
                let mut new_beliefs = DMatrix::zeros(n, k);
                for i in 0..n {
                    sweep.update(i, &msgs, &field, &mut out, &mut belief);
                    let change = damp_into(&mut next, &msgs, sweep.graph.slots(i), &out, k, config.damping, it)?;
                    max_change = max_change.max(change);
                    for a in 0..k {
                        max_change = max_change.max((belief[a] - beliefs[(i, a)]).abs());
                        new_beliefs[(i, a)] = belief[a];
                    }
                }
                std::mem::swap(&mut msgs, &mut next);
                beliefs = new_beliefs;
                field = NonEdgeField::new(&absent, &beliefs);
            }
            BpSchedule::Sequential => {
                order.shuffle(&mut rng);
                for &i in &order {
                    sweep.update(i, &msgs, &field, &mut out, &mut belief);
                    let range = sweep.graph.slots(i);
                    let change = damp_in_place(&mut msgs, range, &out, k, config.damping, it)?;
                    max_change = max_change.max(change);
                    for a in 0..k {
                        max_change = max_change.max((belief[a] - beliefs[(i, a)]).abs());
                        beliefs[(i, a)] = belief[a];
                    }
                    field.refresh(i, &absent, &belief);
                }
            }
        }
        if beliefs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { iteration: it });
        }
        if max_change < config.tol {
            converged = true;
            break;
        }
    }
    Ok(NodeEstimates::from_marginals(beliefs, model, iterations, converged))
}

/// Sum over nodes of `g_m(a) = log Σ_b N_ab q_m(b)`, the contribution of a
/// non-adjacent node `m` with marginal `q_m`.
struct NonEdgeField {
    /// Row-major `n × k`.
    terms: Vec<f64>,
    sum: Vec<f64>,
    k: usize,
}

impl NonEdgeField {
    fn new(absent: &DMatrix<f64>, beliefs: &DMatrix<f64>) -> Self {
        let (n, k) = beliefs.shape();
        let mut field = Self { terms: vec![0.0; n * k], sum: vec![0.0; k], k };
        let mut row = vec![0.0; k];
        for m in 0..n {
            for (b, v) in row.iter_mut().enumerate() {
                *v = beliefs[(m, b)];
            }
            for a in 0..k {
                let g = Self::term(absent, a, &row);
                field.terms[m * k + a] = g;
                field.sum[a] += g;
            }
        }
        field
    }

    fn term(absent: &DMatrix<f64>, a: usize, q: &[f64]) -> f64 {
        let s: f64 = q.iter().enumerate().map(|(b, &qb)| absent[(a, b)] * qb).sum();
        s.max(PROB_FLOOR).ln()
    }

    fn row(&self, m: usize) -> &[f64] {
        &self.terms[m * self.k..(m + 1) * self.k]
    }

    fn refresh(&mut self, m: usize, absent: &DMatrix<f64>, q: &[f64]) {
        let k = self.k;
        for a in 0..k {
            let g = Self::term(absent, a, q);
            self.sum[a] += g - self.terms[m * k + a];
            self.terms[m * k + a] = g;
        }
    }
}

struct Sweep<'a> {
    k: usize,
    graph: &'a PairGraph,
    /// Row-major `k × k` factor per layer mask, concatenated.
    factors: &'a [f64],
    factor_index: &'a [usize],
    log_phi: &'a DMatrix<f64>,
}

impl Sweep<'_> {
    /// Marginal of node `i` into `belief` and undamped outgoing messages, one
    /// block of `k` per neighbor slot, into `out`.
    fn update(&self, i: usize, msgs: &[f64], field: &NonEdgeField, out: &mut Vec<f64>, belief: &mut [f64]) {
        let k = self.k;
        let kk = k * k;
        let range = self.graph.slots(i);
        out.clear();
        let mut lin = [1.0f64; MAX_K];
        let mut log_part = [0.0f64; MAX_K];
        let own = field.row(i);
        for a in 0..k {
            log_part[a] = self.log_phi[(i, a)] + field.sum[a] - own[a];
        }
        for pos in range.clone() {
            let j = self.graph.targets[pos];
            let fi = self.factor_index[pos];
            let f = &self.factors[fi * kk..(fi + 1) * kk];
            let src = self.graph.reverse[pos] * k;
            let psi = &msgs[src..src + k];
            let g = field.row(j);
            let mut top: f64 = 0.0;
            for a in 0..k {
                let s: f64 = f[a * k..(a + 1) * k].iter().zip(psi).map(|(x, y)| x * y).sum();
                let s = s.max(PROB_FLOOR);
                out.push(s);
                lin[a] *= s;
                top = top.max(lin[a]);
                log_part[a] -= g[a];
            }
            let inv = 1.0 / top;
            for v in lin[..k].iter_mut() {
                *v *= inv;
            }
        }
        for a in 0..k {
            belief[a] = log_part[a] + lin[a].ln();
        }
        softmax_in_place(belief);
        // the cavity message to j divides out j's incoming factor
        for block in out.chunks_exact_mut(k) {
            let mut norm = 0.0;
            for a in 0..k {
                block[a] = belief[a] / block[a];
                norm += block[a];
            }
            let inv = 1.0 / norm;
            for v in block.iter_mut() {
                *v *= inv;
            }
        }
    }
}

fn damp_into(
    next: &mut [f64],
    msgs: &[f64],
    range: std::ops::Range<usize>,
    out: &[f64],
    k: usize,
    damping: f64,
    iteration: usize,
) -> Result<f64> {
    let mut change: f64 = 0.0;
    for (slot, pos) in range.enumerate() {
        for a in 0..k {
            let old = msgs[pos * k + a];
            let v = (1.0 - damping) * out[slot * k + a] + damping * old;
            if !v.is_finite() {
                return Err(Error::Divergence { iteration });
            }
            change = change.max((v - old).abs());
            next[pos * k + a] = v;
        }
    }
    Ok(change)
}

fn damp_in_place(
    msgs: &mut [f64],
    range: std::ops::Range<usize>,
    out: &[f64],
    k: usize,
    damping: f64,
    iteration: usize,
) -> Result<f64> {
    let mut change: f64 = 0.0;
    for (slot, pos) in range.enumerate() {
        for a in 0..k {
            let old = msgs[pos * k + a];
            let v = (1.0 - damping) * out[slot * k + a] + damping * old;
            if !v.is_finite() {
                return Err(Error::Divergence { iteration });
            }
            change = change.max((v - old).abs());
            msgs[pos * k + a] = v;
        }
    }
    Ok(change)
}

/// Exponentiate and normalize log-weights in place; entries at `−∞` become 0.
fn softmax_in_place(xs: &mut [f64]) {
    let lse = log_sum_exp(xs);
    let mut s = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - lse).exp();
        s += *x;
    }
    for x in xs.iter_mut() {
        *x /= s;
    }
}
