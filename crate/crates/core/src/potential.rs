//! The potential `ℱ(U) = ℐ(S + Σ_ℓ R_ℓ(I−U)R_ℓ) + ¼ Σ_ℓ tr((R_ℓ U)²)` over
//! `𝒰 = {0 ⪯ U ⪯ I}`, its minimum (upper bound on the per-node mutual
//! information) and minimizer (heuristic bound on the MMSE matrix).
//!
//! Stationary points satisfy `U = M(S_eff(U))` because `∇_S ℐ = ½ M`. The
//! minimizer combines a damped fixed-point iteration on that map from several
//! starts with an exhaustive grid for `k ≤ 3`; every candidate is scored by
//! `ℱ` and the lowest wins.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelMoments, McDraws, DEFAULT_MC_SAMPLES};
use crate::error::{Error, Result};
use crate::label_model::{ChannelSpec, CommunityModel};
use crate::linalg;
use crate::quadrature::TensorRule;
use crate::scalar::Real;

/// Symmetric matrix in `{0 ⪯ U ⪯ I}`.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapMatrix<T: Real = f64>(DMatrix<T>);

impl<T: Real> OverlapMatrix<T> {
    pub fn new(u: DMatrix<T>) -> Result<Self> {
        if u.nrows() != u.ncols() {
            return Err(Error::Shape("overlap matrix must be square".into()));
        }
        if (&u - u.transpose()).amax() > T::check_tol() {
            return Err(Error::InvalidParameter("overlap matrix must be symmetric".into()));
        }
        let u = linalg::symmetrize(&u);
        let tol = T::check_tol();
        if linalg::min_eigenvalue(&u) < -tol || linalg::max_eigenvalue(&u) > T::one() + tol {
            return Err(Error::InvalidParameter("overlap matrix outside 0 <= U <= I".into()));
        }
        Ok(Self(u))
    }

    /// Project an arbitrary symmetric matrix onto the feasible set.
    pub fn projected(u: &DMatrix<T>) -> Self {
        Self(linalg::project_unit_interval(u))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(DMatrix::zeros(dim, dim))
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<T> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn trace(&self) -> T {
        self.0.trace()
    }
}

/// One network layer: expected degree `d` and coupling matrix `R`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T: Real = f64> {
    pub d: T,
    pub r: DMatrix<T>,
}

impl<T: Real> Layer<T> {
    pub fn new(d: T, r: DMatrix<T>) -> Result<Self> {
        if !(d > T::zero()) || !d.is_finite() {
            return Err(Error::InvalidParameter(format!("expected degree d = {d} must be positive")));
        }
        if r.nrows() != r.ncols() {
            return Err(Error::Shape("R must be square".into()));
        }
        if r.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("R has non-finite entries".into()));
        }
        if (&r - r.transpose()).amax() > T::check_tol() * r.amax().max(T::one()) {
            return Err(Error::InvalidParameter("R must be symmetric".into()));
        }
        Ok(Self { d, r: linalg::symmetrize(&r) })
    }

    /// `R = λ I`.
    pub fn isotropic(d: T, lambda: T, dim: usize) -> Result<Self> {
        Self::new(d, DMatrix::identity(dim, dim) * lambda)
    }

    pub fn diagonal(d: T, lambdas: &[T]) -> Result<Self> {
        Self::new(d, DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(lambdas)))
    }

    /// Sign of definiteness: `Some(true)` positive, `Some(false)` negative,
    /// `None` when `R` is indefinite or singular.
    pub fn definiteness(&self) -> Option<bool> {
        let lo = linalg::min_eigenvalue(&self.r);
        let hi = linalg::max_eigenvalue(&self.r);
        if lo > T::zero() {
            Some(true)
        } else if hi < T::zero() {
            Some(false)
        } else {
            None
        }
    }
}

/// The `L` network layers.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec<T: Real = f64> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> NetworkSpec<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Result<Self> {
        if let Some(first) = layers.first() {
            let dim = first.r.nrows();
            if layers.iter().any(|l| l.r.nrows() != dim) {
                return Err(Error::Shape("all layers must share the embedding dimension".into()));
            }
        }
        Ok(Self { layers })
    }

    pub fn empty() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn single(layer: Layer<T>) -> Self {
        Self { layers: vec![layer] }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Layers whose `R` is neither positive nor negative definite.
    pub fn indefinite_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.definiteness().is_none())
            .map(|(i, _)| i)
            .collect()
    }

    /// `S + Σ_ℓ R_ℓ(I − U)R_ℓ`, symmetrized and PSD-clipped.
    pub fn effective_snr(&self, snr: &DMatrix<T>, u: &DMatrix<T>) -> Result<DMatrix<T>> {
        let dim = snr.nrows();
        let rest = DMatrix::<T>::identity(dim, dim) - u;
        let mut total = snr.clone();
        for l in &self.layers {
            total += &l.r * &rest * &l.r;
        }
        linalg::clip_psd(&total, T::lit(1e-6))
    }

    /// `¼ Σ_ℓ tr((R_ℓ U)²)`.
    pub fn trace_term(&self, u: &DMatrix<T>) -> T {
        let mut acc = T::zero();
        for l in &self.layers {
            let ru = &l.r * u;
            acc += (&ru * &ru).trace();
        }
        acc * T::lit(0.25)
    }
}

/// How `ℐ` and `M` are evaluated inside the potential.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Evaluator {
    /// Quadrature when `k − 1 ≤ 2`, otherwise Monte Carlo with the defaults.
    Auto,
    Quadrature { nodes_per_axis: usize },
    /// Monte Carlo with fixed draws shared by every evaluation.
    MonteCarlo { samples: usize, seed: u64 },
}

/// Evaluates channel moments at arbitrary SNR with a fixed rule or fixed draws.
#[derive(Debug, Clone)]
pub enum MomentEngine<T: Real = f64> {
    Quadrature(TensorRule<T>),
    MonteCarlo(McDraws<T>),
}

impl<T: Real> MomentEngine<T> {
    pub fn new(evaluator: Evaluator, model: &CommunityModel<T>) -> Result<Self> {
        let dim = model.dim();
        match evaluator {
            Evaluator::Auto if dim <= 2 => Ok(Self::Quadrature(TensorRule::for_dim(dim)?)),
            Evaluator::Auto => Ok(Self::MonteCarlo(McDraws::new(model, DEFAULT_MC_SAMPLES, 0x5eed)?)),
            Evaluator::Quadrature { nodes_per_axis } => Ok(Self::Quadrature(TensorRule::new(dim, nodes_per_axis)?)),
            Evaluator::MonteCarlo { samples, seed } => Ok(Self::MonteCarlo(McDraws::new(model, samples, seed)?)),
        }
    }

    pub fn moments(&self, snr: &DMatrix<T>, alpha: T, model: &CommunityModel<T>) -> Result<ChannelMoments<T>> {
        match self {
            Self::Quadrature(rule) => rule.moments(snr, alpha, model),
            Self::MonteCarlo(draws) => draws.moments(snr, alpha, model),
        }
    }
}

/// Everything the potential depends on, bundled with a moment engine.
#[derive(Debug, Clone)]
pub struct Potential<'a, T: Real = f64> {
    pub spec: &'a NetworkSpec<T>,
    pub channel: &'a ChannelSpec<T>,
    pub model: &'a CommunityModel<T>,
    engine: MomentEngine<T>,
}

impl<'a, T: Real> Potential<'a, T> {
    pub fn new(
        spec: &'a NetworkSpec<T>,
        channel: &'a ChannelSpec<T>,
        model: &'a CommunityModel<T>,
        evaluator: Evaluator,
    ) -> Result<Self> {
        let dim = model.dim();
        if channel.dim() != dim {
            return Err(Error::Shape(format!("S is {0}x{0}, model dimension is {dim}", channel.dim())));
        }
        if spec.layers.iter().any(|l| l.r.nrows() != dim) {
            return Err(Error::Shape(format!("layer R must be {dim}x{dim}")));
        }
        Ok(Self { spec, channel, model, engine: MomentEngine::new(evaluator, model)? })
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    /// Channel moments at the effective SNR for `u`.
    pub fn moments_at(&self, u: &DMatrix<T>) -> Result<ChannelMoments<T>> {
        let s_eff = self.spec.effective_snr(self.channel.snr(), u)?;
        self.engine.moments(&s_eff, self.channel.alpha(), self.model)
    }

    /// `ℱ(U)`.
    pub fn value(&self, u: &DMatrix<T>) -> Result<T> {
        Ok(self.moments_at(u)?.info + self.spec.trace_term(u))
    }

    /// One undamped application of the stationarity map `U ↦ M(S_eff(U))`.
    pub fn fixed_point_map(&self, u: &DMatrix<T>) -> Result<DMatrix<T>> {
        Ok(self.moments_at(u)?.mmse)
    }
}

/// `ℱ(U)` for a single overlap matrix.
pub fn evaluate_potential<T: Real>(
    u: &OverlapMatrix<T>,
    spec: &NetworkSpec<T>,
    channel: &ChannelSpec<T>,
    model: &CommunityModel<T>,
) -> Result<T> {
    Potential::new(spec, channel, model, Evaluator::Auto)?.value(u.matrix())
}

/// When to run the exhaustive grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMode {
    /// `k = 2` only; the `k = 3` grid is hundreds of thousands of evaluations.
    Auto,
    Always,
    Never,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinimizeOptions {
    pub damping: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub grid: GridMode,
    /// Step of the scalar grid for `k = 2`.
    pub grid_step_1d: f64,
    /// Step of the eigenvalue/angle grid for `k = 3`.
    pub grid_step_2d: f64,
    pub evaluator: Evaluator,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tol: 1e-5,
            max_iters: 500,
            grid: GridMode::Auto,
            grid_step_1d: 1e-3,
            grid_step_2d: 0.02,
            evaluator: Evaluator::Auto,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    FixedPoint,
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Start {
    Zero,
    Half,
    Identity,
    SideInfoMmse,
}

/// One fixed-point step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub start: Start,
    pub iteration: usize,
    pub trace_u: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate<T: Real = f64> {
    pub u: OverlapMatrix<T>,
    pub f: T,
    pub method: Method,
    pub start: Option<Start>,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundResult<T: Real = f64> {
    pub u_star: OverlapMatrix<T>,
    pub f_star: T,
    pub method: Method,
    /// Bound on the MMSE matrix; equals `u_star`.
    pub mmse_bound: DMatrix<T>,
    /// Every scored candidate (fixed points from each start, grid argmin).
    pub candidates: Vec<Candidate<T>>,
    pub trajectory: Vec<IterationRecord>,
    /// Layers violating the definiteness assumption (bound still computed).
    pub indefinite_layers: Vec<usize>,
}

impl<T: Real> BoundResult<T> {
    /// Best converged fixed-point candidate.
    pub fn best_fixed_point(&self) -> Option<&Candidate<T>> {
        best(self.candidates.iter().filter(|c| c.method == Method::FixedPoint && c.converged))
    }

    pub fn grid_candidate(&self) -> Option<&Candidate<T>> {
        self.candidates.iter().find(|c| c.method == Method::Grid)
    }

    pub fn to_record(&self) -> BoundRecord {
        BoundRecord {
            dim: self.u_star.dim(),
            u_star: linalg::to_row_major(self.u_star.matrix()),
            f_star: self.f_star.as_f64(),
            trace_u_star: self.u_star.trace().as_f64(),
            method: self.method,
            mmse_bound: linalg::to_row_major(&self.mmse_bound),
            mmse_bound_kind: "heuristic".into(),
            candidates: self
                .candidates
                .iter()
                .map(|c| CandidateRecord {
                    method: c.method,
                    start: c.start,
                    f: c.f.as_f64(),
                    trace_u: c.u.trace().as_f64(),
                    converged: c.converged,
                    iterations: c.iterations,
                })
                .collect(),
            trajectory: self.trajectory.clone(),
            indefinite_layers: self.indefinite_layers.clone(),
        }
    }
}

/// Serializable form of [`BoundResult`]; matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub dim: usize,
    pub u_star: Vec<f64>,
    pub f_star: f64,
    pub trace_u_star: f64,
    pub method: Method,
    pub mmse_bound: Vec<f64>,
    /// Always `"heuristic"`: the MMSE bound rests on an unproven tightness hypothesis.
    pub mmse_bound_kind: String,
    pub candidates: Vec<CandidateRecord>,
    pub trajectory: Vec<IterationRecord>,
    pub indefinite_layers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub method: Method,
    pub start: Option<Start>,
    pub f: f64,
    pub trace_u: f64,
    pub converged: bool,
    pub iterations: usize,
}

const TIE_TOL: f64 = 1e-8;

/// Lowest `ℱ`; among values within `1e-8` of it, smallest `tr(U)`.
fn best<'c, T: Real>(cands: impl Iterator<Item = &'c Candidate<T>> + Clone) -> Option<&'c Candidate<T>> {
    let fmin = cands.clone().map(|c| c.f).fold(None, |m: Option<T>, f| Some(m.map_or(f, |m| if f < m { f } else { m })))?;
    cands
        .filter(|c| c.f <= fmin + T::lit(TIE_TOL))
        .min_by(|a, b| a.u.trace().partial_cmp(&b.u.trace()).unwrap_or(std::cmp::Ordering::Equal))
}

/// Minimize `ℱ` over `𝒰`.
pub fn minimize_potential<T: Real>(
    spec: &NetworkSpec<T>,
    channel: &ChannelSpec<T>,
    model: &CommunityModel<T>,
    options: &MinimizeOptions,
) -> Result<BoundResult<T>> {
    let pot = Potential::new(spec, channel, model, options.evaluator)?;
    let dim = pot.dim();
    let indefinite_layers = spec.indefinite_layers();
    if !indefinite_layers.is_empty() {
        log::warn!("layers {indefinite_layers:?} are not definite; the bound is outside its stated assumptions");
    }

    if spec.is_empty() {
        // ℱ is constant; report the no-network MMSE M(S) as the minimizer.
        let mom = pot.moments_at(&DMatrix::identity(dim, dim))?;
        let u = OverlapMatrix::projected(&mom.mmse);
        let cand = Candidate {
            u: u.clone(),
            f: mom.info,
            method: Method::FixedPoint,
            start: Some(Start::SideInfoMmse),
            converged: true,
            iterations: 0,
        };
        return Ok(BoundResult {
            mmse_bound: u.matrix().clone(),
            u_star: u,
            f_star: mom.info,
            method: Method::FixedPoint,
            candidates: vec![cand],
            trajectory: Vec::new(),
            indefinite_layers,
        });
    }

    let mut candidates = Vec::new();
    let mut trajectory = Vec::new();
    let side_info_mmse = pot.engine.moments(channel.snr(), channel.alpha(), model)?.mmse;
    let eye = DMatrix::<T>::identity(dim, dim);
    let starts = [
        (Start::Zero, DMatrix::zeros(dim, dim)),
        (Start::Half, &eye * T::lit(0.5)),
        (Start::Identity, eye.clone()),
        (Start::SideInfoMmse, side_info_mmse),
    ];
    for (start, u0) in starts {
        let (cand, log) = fixed_point(&pot, start, u0, options)?;
        trajectory.extend(log);
        candidates.push(cand);
    }

    let run_grid = match options.grid {
        GridMode::Always => dim <= 2,
        GridMode::Auto => dim == 1,
        GridMode::Never => false,
    };
    if run_grid {
        candidates.push(grid_search(&pot, options)?);
    }

    let chosen = best(candidates.iter().filter(|c| c.converged || c.method == Method::Grid)).cloned();
    let Some(chosen) = chosen else {
        return Err(Error::NonConvergence { trajectory: trajectory.iter().map(|r| r.step).collect() });
    };
    Ok(BoundResult {
        mmse_bound: chosen.u.matrix().clone(),
        u_star: chosen.u,
        f_star: chosen.f,
        method: chosen.method,
        candidates,
        trajectory,
        indefinite_layers,
    })
}

fn fixed_point<T: Real>(
    pot: &Potential<'_, T>,
    start: Start,
    u0: DMatrix<T>,
    options: &MinimizeOptions,
) -> Result<(Candidate<T>, Vec<IterationRecord>)> {
    let gamma = T::lit(options.damping);
    let tol = T::lit(options.tol);
    let mut u = linalg::project_unit_interval(&u0);
    let mut log = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=options.max_iters {
        let target = pot.fixed_point_map(&u)?;
        let next = linalg::project_unit_interval(&(&u * (T::one() - gamma) + target * gamma));
        let step = linalg::frobenius(&(&next - &u));
        u = next;
        iterations = it;
        log.push(IterationRecord { start, iteration: it, trace_u: u.trace().as_f64(), step: step.as_f64() });
        if step < tol {
            converged = true;
            break;
        }
    }
    let f = pot.value(&u)?;
    Ok((
        Candidate { u: OverlapMatrix(u), f, method: Method::FixedPoint, start: Some(start), converged, iterations },
        log,
    ))
}

fn grid_points(step: f64) -> Vec<f64> {
    let n = (1.0 / step).round() as usize;
    (0..=n).map(|i| (i as f64 / n as f64).min(1.0)).collect()
}

fn grid_search<T: Real>(pot: &Potential<'_, T>, options: &MinimizeOptions) -> Result<Candidate<T>> {
    let dim = pot.dim();
    let mut cands: Vec<Candidate<T>> = Vec::new();
    let mut push = |u: DMatrix<T>| -> Result<()> {
        let f = pot.value(&u)?;
        cands.push(Candidate { u: OverlapMatrix(u), f, method: Method::Grid, start: None, converged: true, iterations: 0 });
        Ok(())
    };
    match dim {
        1 => {
            for x in grid_points(options.grid_step_1d) {
                push(DMatrix::from_element(1, 1, T::lit(x)))?;
            }
        }
        2 => {
            let levels = grid_points(options.grid_step_2d);
            let n_angles = (std::f64::consts::PI / options.grid_step_2d).round().max(1.0) as usize;
            for (i, &a) in levels.iter().enumerate() {
                for &b in &levels[..=i] {
                    // a == b is rotation invariant; one angle suffices
                    let angles = if a == b { 1 } else { n_angles };
                    for t in 0..angles {
                        let theta = std::f64::consts::PI * t as f64 / n_angles as f64;
                        let (s, c) = theta.sin_cos();
                        let rot = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]).map(T::lit);
                        let diag = DMatrix::from_row_slice(2, 2, &[a, 0.0, 0.0, b]).map(T::lit);
                        push(linalg::symmetrize(&(&rot * diag * rot.transpose())))?;
                    }
                }
            }
        }
        _ => return Err(Error::Unsupported(format!("grid search for k - 1 = {dim}"))),
    }
    Ok(best(cands.iter()).cloned().expect("grid is nonempty"))
}

/// Heuristic MMSE-matrix bound `U*`.
pub fn mmse_bound<T: Real>(result: &BoundResult<T>) -> DMatrix<T> {
    result.mmse_bound.clone()
}
