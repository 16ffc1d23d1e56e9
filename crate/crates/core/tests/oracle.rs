use nalgebra::DMatrix;
use proptest::prelude::*;
use sbm_limits::label_model::{sample_covariates, sample_labels, ChannelSpec, CommunityModel, CovariateSample};
use sbm_limits::netgen::generate_network;
use sbm_limits::oracle::{exact_mutual_information_mc, exact_posterior, ObservationKind};
use sbm_limits::potential::{minimize_potential, Layer, MinimizeOptions, NetworkSpec};
use sbm_limits::quadrature::channel_moments_quadrature;

#[test]
fn averaged_mmse_matches_the_scalar_channel() {
    let m = CommunityModel::whiten(&[0.2, 0.3, 0.5]).unwrap();
    let s = DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.2, 0.5]);
    let ch = ChannelSpec::new(0.2, s.clone()).unwrap();
    let draws = 200;
    let mats: Vec<DMatrix<f64>> = (0..draws)
        .map(|t| {
            let labels = sample_labels(&m, 5, t).unwrap();
            let cov = sample_covariates(&labels, &ch, 1000 + t).unwrap();
            exact_posterior(&[], &[], &cov, &ch, &m, &NetworkSpec::empty()).unwrap().mmse_matrix
        })
        .collect();
    let target = channel_moments_quadrature(&s, 0.2, &m).unwrap().mmse;
    for r in 0..2 {
        for c in 0..2 {
            let xs: Vec<f64> = mats.iter().map(|x| x[(r, c)]).collect();
            let mean = xs.iter().sum::<f64>() / draws as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (draws as f64 - 1.0);
            let se = (var / draws as f64).sqrt();
            assert!((mean - target[(r, c)]).abs() <= 3.0 * se, "({r},{c}): {mean} vs {} (se {se})", target[(r, c)]);
        }
    }
}

#[test]
fn full_reveal_information_is_the_entropy() {
    let m = CommunityModel::whiten(&[0.1, 0.3, 0.6]).unwrap();
    let ch = ChannelSpec::erasure(1.0, 2).unwrap();
    let (mi, se) = exact_mutual_information_mc(&NetworkSpec::empty(), &ch, &m, 6, 300, ObservationKind::Bernoulli, 1).unwrap();
    assert!((mi - m.entropy()).abs() <= 3.0 * se, "{mi} ± {se} vs {}", m.entropy());
}

#[test]
fn finite_size_information_stays_below_the_limit() {
    let m = CommunityModel::whiten(&[0.4, 0.6]).unwrap();
    let specs = NetworkSpec::single(Layer::isotropic(3.0, 1.5, 1).unwrap());
    let ch = ChannelSpec::none(1);
    let (mi, se) = exact_mutual_information_mc(&specs, &ch, &m, 8, 400, ObservationKind::Bernoulli, 1).unwrap();
    let bound = minimize_potential(&specs, &ch, &m, &MinimizeOptions::default()).unwrap();
    assert!(mi > 0.0 && se < 0.05);
    assert!(mi <= bound.f_star + 0.15, "{mi} vs {}", bound.f_star);
}

#[test]
fn bernoulli_and_gaussian_equivalent_information_agree() {
    let m = CommunityModel::whiten(&[0.4, 0.6]).unwrap();
    let specs = NetworkSpec::single(Layer::isotropic(6.0, 1.5, 1).unwrap());
    let ch = ChannelSpec::none(1);
    let (a, _) = exact_mutual_information_mc(&specs, &ch, &m, 12, 100, ObservationKind::Bernoulli, 1).unwrap();
    let (g, _) = exact_mutual_information_mc(&specs, &ch, &m, 12, 100, ObservationKind::GaussianEquivalent, 1).unwrap();
    assert!((a - g).abs() < 0.1, "{a} vs {g}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mmse_matrix_is_positive_and_bounded(seed in any::<u64>(), n in 2usize..7, r in -0.5..1.5f64, alpha in 0.0..1.0f64, s in 0.0..2.0f64) {
        let m = CommunityModel::whiten(&[0.25, 0.35, 0.4]).unwrap();
        let layer = Layer::isotropic(2.0, r, 2).unwrap();
        let labels = sample_labels(&m, n, seed).unwrap();
        let g = generate_network(&labels, &m, &layer, 0, seed);
        prop_assume!(g.is_ok());
        let ch = ChannelSpec::new(alpha, DMatrix::identity(2, 2) * s).unwrap();
        let cov = sample_covariates(&labels, &ch, seed).unwrap();
        let post = exact_posterior(&[g.unwrap()], &[], &cov, &ch, &m, &NetworkSpec::single(layer)).unwrap();
        // only the expectation over observations is below I
        let cap = (0..3).map(|a| m.mu_row(a).norm_squared()).fold(0.0, f64::max);
        let eig = post.mmse_matrix.symmetric_eigenvalues();
        prop_assert!(eig.iter().all(|&e| e >= -1e-10 && e <= cap + 1e-10), "{:?}", eig);
        let total: f64 = post.config_log_weights.iter().map(|w| w.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        let empty = exact_posterior(&[], &[], &CovariateSample::empty(n), &ch, &m, &NetworkSpec::empty()).unwrap();
        prop_assert!((empty.mmse_matrix - DMatrix::identity(2, 2)).amax() < 1e-10);
    }
}
