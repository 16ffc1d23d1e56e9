#![allow(dead_code)]

use std::path::PathBuf;

/// Binary symmetric input `x = ±1` through `y = √s·x + z`:
/// `I(s) = s − E log cosh(s + √s z)`, `mmse(s) = 1 − E tanh(s + √s z)`,
/// integrated by the trapezoid rule on `z ∈ [−12, 12]`.
pub fn binary_oracle(s: f64) -> (f64, f64) {
    let steps = 48_000;
    let h = 24.0 / steps as f64;
    let (mut info, mut mmse) = (0.0, 0.0);
    for i in 0..=steps {
        let z = -12.0 + i as f64 * h;
        let w = if i == 0 || i == steps { 0.5 } else { 1.0 } * h * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let a = s + s.sqrt() * z;
        // log cosh without overflow
        let lc = a.abs() + (-2.0 * a.abs()).exp().ln_1p() - std::f64::consts::LN_2;
        info += w * lc;
        mmse += w * a.tanh();
    }
    (s - info, 1.0 - mmse)
}

#[derive(Debug, Clone)]
pub struct Golden {
    pub name: String,
    pub k: usize,
    pub p: Vec<f64>,
    pub snr: f64,
    pub lambda: Option<f64>,
    pub alpha: f64,
    pub info: Option<f64>,
    pub mmse: Option<f64>,
    pub u_star: Option<f64>,
    pub f_star: Option<f64>,
}

fn opt(s: &str) -> Option<f64> {
    (!s.is_empty()).then(|| s.parse().unwrap())
}

pub fn golden() -> Vec<Golden> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden.csv");
    let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).unwrap();
    rd.records()
        .map(|r| {
            let r = r.unwrap();
            Golden {
                name: r[0].to_string(),
                k: r[1].parse().unwrap(),
                p: r[2].split(';').map(|x| x.parse().unwrap()).collect(),
                snr: r[3].parse().unwrap(),
                lambda: opt(&r[4]),
                alpha: r[5].parse().unwrap(),
                info: opt(&r[6]),
                mmse: opt(&r[7]),
                u_star: opt(&r[8]),
                f_star: opt(&r[9]),
            }
        })
        .collect()
}

pub fn golden_row(name: &str) -> Golden {
    golden().into_iter().find(|g| g.name == name).unwrap()
}

/// BP against exact enumeration on tiny two-community instances.
#[derive(Debug, Clone, Copy, Default)]
pub struct TinyComparison {
    pub instances: usize,
    pub bp_mse: f64,
    pub exact_mse: f64,
    pub exact_mmse: f64,
    pub converged: usize,
    /// Worst per-instance mean over nodes of the total-variation distance.
    pub tv_mean_worst: f64,
    /// Largest single-node total-variation distance.
    pub tv_max: f64,
}

pub fn tiny_comparison(instances: u64) -> TinyComparison {
    use nalgebra::DMatrix;
    use sbm_limits::bp::{compute_mse, run_bp, BpConfig};
    use sbm_limits::label_model::{sample_covariates, sample_labels, ChannelSpec, CommunityModel};
    use sbm_limits::netgen::generate_network;
    use sbm_limits::oracle::exact_posterior;
    use sbm_limits::potential::{Layer, NetworkSpec};

    let m: CommunityModel = CommunityModel::whiten(&[0.4, 0.6]).unwrap();
    let layer = Layer::isotropic(1.0, 1.0, 1).unwrap();
    let specs = NetworkSpec::single(layer.clone());
    let ch = ChannelSpec::new(0.1, DMatrix::from_element(1, 1, 0.5)).unwrap();
    let mut out = TinyComparison { instances: instances as usize, ..Default::default() };
    for s in 0..instances {
        let n = 6 + (s % 5) as usize;
        let labels = sample_labels(&m, n, s).unwrap();
        let g = generate_network(&labels, &m, &layer, 0, 100 + s).unwrap();
        let cov = sample_covariates(&labels, &ch, 200 + s).unwrap();
        let post = exact_posterior(std::slice::from_ref(&g), &[], &cov, &ch, &m, &specs).unwrap();
        let bp = run_bp(&[g], &cov, &ch, &m, &specs, &BpConfig::default(), s).unwrap();
        out.bp_mse += compute_mse(&bp.means, &labels).unwrap();
        out.exact_mse += compute_mse(&post.estimates(&m).means, &labels).unwrap();
        out.exact_mmse += post.mmse_matrix.trace();
        if bp.converged {
            out.converged += 1;
            let tv: Vec<f64> = (0..n).map(|i| 0.5 * (0..2).map(|a| (bp.marginals[(i, a)] - post.marginals[(i, a)]).abs()).sum::<f64>()).collect();
            out.tv_max = tv.iter().copied().fold(out.tv_max, f64::max);
            out.tv_mean_worst = out.tv_mean_worst.max(tv.iter().sum::<f64>() / n as f64);
        }
    }
    let k = instances as f64;
    out.bp_mse /= k;
    out.exact_mse /= k;
    out.exact_mmse /= k;
    out
}
