use approx::assert_abs_diff_eq;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};
use sbm_limits::bp::compute_mse;
use sbm_limits::label_model::{sample_labels, CommunityModel, LabelSample};
use sbm_limits::netgen::generate_network;
use sbm_limits::potential::{Layer, NetworkSpec};
use sbm_limits::rng;
use sbm_limits::spectral::*;

fn projector(m: &DMatrix<f64>) -> DMatrix<f64> {
    let q = m.clone().qr().q();
    &q * q.transpose()
}

#[test]
fn averaging_edge_disjoint_layers() {
    let m = CommunityModel::whiten(&[0.5, 0.5]).unwrap();
    let labels = sample_labels(&m, 100, 1).unwrap();
    let layer = Layer::isotropic(5.0, 0.5, 1).unwrap();
    let a = generate_network(&labels, &m, &layer, 0, 2).unwrap();
    let mut b = generate_network(&labels, &m, &layer, 1, 2).unwrap();
    b.edges.retain(|e| !a.edges.contains(e));
    let avg = average_networks(&[a, b]).unwrap();
    let dense = avg.matrix.to_dense();
    assert!(dense.iter().all(|&v| v == 0.0 || (v - 0.5f64.sqrt()).abs() < 1e-15));
    assert_abs_diff_eq!(avg.effective_r[(0, 0)], 2f64.sqrt() * 0.5, epsilon = 1e-12);
}

#[test]
fn averaging_rejects_size_mismatch() {
    let m = CommunityModel::whiten(&[0.5, 0.5]).unwrap();
    let layer = Layer::isotropic(5.0, 0.5, 1).unwrap();
    let a = generate_network(&sample_labels(&m, 100, 1).unwrap(), &m, &layer, 0, 2).unwrap();
    let b = generate_network(&sample_labels(&m, 120, 1).unwrap(), &m, &layer, 0, 2).unwrap();
    assert!(average_networks(&[a, b]).is_err());
}

#[test]
fn two_layer_expectation_is_single_layer_at_scaled_coupling() {
    let m = CommunityModel::whiten(&[0.1, 0.3, 0.6]).unwrap();
    let n = 300;
    let labels = sample_labels(&m, n, 3).unwrap();
    let (d, r) = (30.0, 0.8);
    let two = NetworkSpec::new(vec![Layer::isotropic(d, r, 2).unwrap(), Layer::isotropic(d, r, 2).unwrap()]).unwrap();
    let one = NetworkSpec::single(Layer::isotropic(d, 2f64.sqrt() * r, 2).unwrap());
    let diff = expected_average(&labels, &two).unwrap() - expected_average(&labels, &one).unwrap();
    // only the degree offset differs: √2·d/n against d/n
    let offset = (2f64.sqrt() - 1.0) * d / n as f64;
    assert!(diff.iter().all(|v| (v - offset).abs() < 1e-14));
    assert!(offset < 2.0 / n as f64 * d);
}

#[test]
fn noise_free_expectation_recovers_the_label_subspace() {
    let m: CommunityModel = CommunityModel::uniform(3).unwrap();
    let n = 300;
    let assignments: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let labels = LabelSample::from_assignments(&m, assignments, 0).unwrap();
    let spec = NetworkSpec::single(Layer::diagonal(30.0, &[1.5, 1.2]).unwrap());
    let expected = expected_average(&labels, &spec).unwrap();
    let emb = embed_operator(&expected, 3, &spec.layers[0].r, 1.0, 1).unwrap();
    assert_eq!(emb.coords.ncols(), 2);
    let err = (projector(&emb.coords) - projector(&labels.vectors)).amax();
    assert!(err < 1e-6, "alignment error {err}");
    assert!(emb.eigenvalues[0] >= emb.eigenvalues[1]);
    let gram = emb.coords.transpose() * &emb.coords / n as f64;
    assert!((gram - DMatrix::identity(2, 2)).amax() < 1e-8);
}

#[test]
fn no_signal_embedding_is_uninformative() {
    let m = CommunityModel::whiten(&[0.1, 0.3, 0.6]).unwrap();
    let n = 10_000;
    let labels = sample_labels(&m, n, 5).unwrap();
    let g = generate_network(&labels, &m, &Layer::isotropic(30.0, 0.0, 2).unwrap(), 0, 6).unwrap();
    let avg = average_networks(&[g]).unwrap();
    let emb = spectral_embed(&avg, 3, 7).unwrap();
    let cross = emb.coords.transpose() * &labels.vectors / n as f64;
    assert!(cross.amax() < 0.05, "{cross}");
    let est = gmm_label(&emb, &m, &GmmOptions::default(), 8).unwrap();
    assert_eq!(est.path, GmmPath::Prior);
    let mse = compute_mse(&est.estimates.means, &labels).unwrap();
    assert!((mse - 2.0).abs() < 0.1);
}

fn synthetic_embedding(labels: &LabelSample, theta: f64, seed: u64) -> SpectralEmbedding {
    let dim = labels.vectors.ncols();
    let d = overlap_factor(theta);
    let mut r = rng::rng(seed);
    let coords = labels.vectors.map(|x| x * d.sqrt()) + DMatrix::from_fn(labels.n, dim, |_, _| (1.0 - d).sqrt() * Distribution::<f64>::sample(&StandardNormal, &mut r));
    SpectralEmbedding {
        coords,
        eigenvalues: vec![theta + 1.0 / theta; dim],
        perron: 30.0,
        effective_r: DMatrix::identity(dim, dim) * theta,
        noise_scale: 1.0,
    }
}

#[test]
fn separated_clusters_are_labelled() {
    let m = CommunityModel::whiten(&[0.2, 0.3, 0.5]).unwrap();
    let labels = sample_labels(&m, 3000, 1).unwrap();
    let emb = synthetic_embedding(&labels, 10.0, 2);
    let est = gmm_label(&emb, &m, &GmmOptions::default(), 3).unwrap();
    assert_eq!(est.path, GmmPath::Predicted);
    let mse = compute_mse(&est.estimates.means, &labels).unwrap();
    assert!(mse < 0.01, "mse {mse}");
}

#[test]
fn em_is_invariant_to_joint_rotation() {
    let m = CommunityModel::whiten(&[0.2, 0.3, 0.5]).unwrap();
    let labels = sample_labels(&m, 2000, 4).unwrap();
    let emb = synthetic_embedding(&labels, 2.0, 5);
    let (centers, noise) = predicted_centers(&emb, &m).unwrap();
    let init = GmmParams { means: centers.clone(), covs: vec![DMatrix::from_diagonal(&noise); 3], weights: m.p().to_vec() };
    let (c, s) = (0.4f64.cos(), 0.4f64.sin());
    let q = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
    let rotated = GmmParams { means: &centers * q.transpose(), covs: init.covs.iter().map(|v| &q * v * q.transpose()).collect(), weights: init.weights.clone() };
    let a = em_fit(&emb.coords, &init, &GmmOptions::default()).unwrap();
    let b = em_fit(&(&emb.coords * q.transpose()), &rotated, &GmmOptions::default()).unwrap();
    let mse = |f: &GmmFit| {
        let means = &f.responsibilities * m.mu();
        compute_mse(&means, &labels).unwrap()
    };
    assert!((mse(&a) - mse(&b)).abs() < 1e-8);
}

#[test]
fn observed_spikes_follow_the_predicted_location() {
    let m = CommunityModel::whiten(&[0.1, 0.3, 0.6]).unwrap();
    let n = 10_000;
    let labels = sample_labels(&m, n, 9).unwrap();
    let layer = Layer::isotropic(30.0, 2.0, 2).unwrap();
    let g = generate_network(&labels, &m, &layer, 0, 10).unwrap();
    let emb = spectral_embed(&average_networks(&[g]).unwrap(), 3, 11).unwrap();
    for &v in &emb.eigenvalues {
        let predicted = emb.noise_scale * (2.0 + 0.5);
        assert!((v - predicted).abs() / predicted < 0.03, "{v} vs {predicted}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn error_never_exceeds_random_guessing(seed in any::<u64>(), r in 0.0..2.5f64, a in 0.05..0.2f64) {
        // distinct weights; equal ones make communities unidentifiable
        let m = CommunityModel::whiten(&[a, 0.3, 0.7 - a]).unwrap();
        let labels = sample_labels(&m, 400, seed).unwrap();
        let layer = Layer::isotropic(20.0, r, 2).unwrap();
        prop_assume!(generate_network(&labels, &m, &layer, 0, seed).is_ok());
        let g = generate_network(&labels, &m, &layer, 0, seed).unwrap();
        let est = spectral_pipeline(&[g], &m, &GmmOptions::default(), seed).unwrap();
        let mse = compute_mse(&est.estimates.means, &labels).unwrap();
        let prior_mse = compute_mse(&DMatrix::zeros(400, 2), &labels).unwrap();
        prop_assert!(mse <= prior_mse + 0.1, "mse {} prior {}", mse, prior_mse);
        let rows = est.estimates.marginals.column_sum();
        prop_assert!(rows.iter().all(|s| (s - 1.0).abs() < 1e-9));
    }
}
