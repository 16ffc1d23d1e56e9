//! JSON experiment configuration.
//!
//! ```json
//! {
//!   "k": 3, "p": [0.1, 0.3, 0.6], "alpha": 0.01, "S": [0, 0, 0, 0],
//!   "n": 10000,
//!   "networks": [{ "d": 30, "R": [1.5, 0, 0, 1.5] }],
//!   "sweep": { "axes": [{ "name": "lambda1", "values": [0.5, 1.0] }], "trials": 8, "methods": ["bound", "bp"] }
//! }
//! ```
//!
//! Matrices are row-major. A layer may give `lambda` (diagonal of `R`)
//! instead of `R`.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bp::BpConfig;
use crate::error::{Error, Result};
use crate::label_model::{ChannelSpec, CommunityModel};
use crate::linalg;
use crate::potential::{Layer, MinimizeOptions, NetworkSpec};
use crate::spectral::GmmOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub d: f64,
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<f64>>,
}

impl LayerConfig {
    pub fn to_layer(&self, dim: usize) -> Result<Layer> {
        let r = match (&self.r, &self.lambda) {
            (Some(r), None) => linalg::from_row_major(dim, r).map_err(|e| Error::Config(format!("R: {e}")))?,
            (None, Some(l)) if l.len() == dim => DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(l)),
            (None, Some(l)) => return Err(Error::Config(format!("lambda has {} entries, expected {dim}", l.len()))),
            _ => return Err(Error::Config("each network needs exactly one of R or lambda".into())),
        };
        Layer::new(self.d, r).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Methods a sweep can run at each point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Bound,
    Bp,
    Spectral,
    Oracle,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Bound => "bound",
            MethodKind::Bp => "bp",
            MethodKind::Spectral => "spectral",
            MethodKind::Oracle => "oracle",
        }
    }
}

/// A swept parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AxisParam {
    /// `R = r·I` on every layer.
    R,
    /// Diagonal entry `i` (1-based) of `R` on every layer; `R` becomes diagonal.
    Lambda(usize),
    Alpha,
    /// `S = s·I`.
    Snr,
    /// Degree `d` of every layer.
    D,
    N,
    /// Use only the first `L` configured networks.
    Layers,
}

impl AxisParam {
    /// Axes that change what is observed about one instance rather than the
    /// instance itself; points differing only in these share sampled data.
    pub fn is_paired(self) -> bool {
        matches!(self, AxisParam::Alpha | AxisParam::Layers | AxisParam::Snr)
    }
}

impl TryFrom<String> for AxisParam {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        Ok(match s.as_str() {
            "r" => AxisParam::R,
            "alpha" => AxisParam::Alpha,
            "snr" => AxisParam::Snr,
            "d" => AxisParam::D,
            "n" => AxisParam::N,
            "layers" => AxisParam::Layers,
            other => match other.strip_prefix("lambda").and_then(|i| i.parse::<usize>().ok()) {
                Some(i) if i >= 1 => AxisParam::Lambda(i),
                _ => return Err(format!("unknown sweep axis '{other}'")),
            },
        })
    }
}

impl From<AxisParam> for String {
    fn from(a: AxisParam) -> String {
        match a {
            AxisParam::R => "r".into(),
            AxisParam::Lambda(i) => format!("lambda{i}"),
            AxisParam::Alpha => "alpha".into(),
            AxisParam::Snr => "snr".into(),
            AxisParam::D => "d".into(),
            AxisParam::N => "n".into(),
            AxisParam::Layers => "layers".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub name: AxisParam,
    pub values: Vec<f64>,
}

fn default_trials() -> usize {
    8
}

fn default_methods() -> Vec<MethodKind> {
    vec![MethodKind::Bound]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Cartesian product; the last axis varies fastest.
    pub axes: Vec<Axis>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodKind>,
}

/// Optional input files for the `bp`, `spectral` and `oracle` commands,
/// relative to the config file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputFiles {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariates: Option<PathBuf>,
    #[serde(default)]
    pub edges: Vec<PathBuf>,
}

fn default_n() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub k: usize,
    /// Defaults to uniform.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<f64>>,
    #[serde(default)]
    pub alpha: f64,
    /// Row-major `(k−1)×(k−1)` SNR matrix; zero when absent.
    #[serde(rename = "S", default, skip_serializing_if = "Option::is_none")]
    pub s: Option<Vec<f64>>,
    #[serde(default)]
    pub networks: Vec<LayerConfig>,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub bp: BpConfig,
    #[serde(default)]
    pub gmm: GmmOptions,
    #[serde(default)]
    pub minimize: MinimizeOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<InputFiles>,
}

/// Fully resolved model for one sweep point.
#[derive(Debug, Clone)]
pub struct Instance {
    pub model: CommunityModel,
    pub channel: ChannelSpec,
    pub specs: NetworkSpec,
    pub n: usize,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn dim(&self) -> usize {
        self.k.saturating_sub(1)
    }

    pub fn model(&self) -> Result<CommunityModel> {
        if self.k < 2 {
            return Err(Error::Config(format!("k = {} must be at least 2", self.k)));
        }
        let p = match &self.p {
            Some(p) if p.len() != self.k => return Err(Error::Config(format!("p has {} entries, k = {}", p.len(), self.k))),
            Some(p) => p.clone(),
            None => vec![1.0 / self.k as f64; self.k],
        };
        CommunityModel::whiten(&p).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn channel(&self) -> Result<ChannelSpec> {
        let dim = self.dim();
        let s = match &self.s {
            Some(s) => linalg::from_row_major(dim, s).map_err(|e| Error::Config(format!("S: {e}")))?,
            None => DMatrix::zeros(dim, dim),
        };
        ChannelSpec::new(self.alpha, s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn specs(&self) -> Result<NetworkSpec> {
        let layers = self.networks.iter().map(|l| l.to_layer(self.dim())).collect::<Result<Vec<_>>>()?;
        NetworkSpec::new(layers).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn instance(&self) -> Result<Instance> {
        Ok(Instance { model: self.model()?, channel: self.channel()?, specs: self.specs()?, n: self.n })
    }

    pub fn validate(&self) -> Result<()> {
        self.instance()?;
        self.bp.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if let Some(sweep) = &self.sweep {
            if sweep.trials == 0 {
                return Err(Error::Config("trials must be at least 1".into()));
            }
            if sweep.methods.is_empty() {
                return Err(Error::Config("sweep needs at least one method".into()));
            }
            for axis in &sweep.axes {
                if axis.values.is_empty() {
                    return Err(Error::Config(format!("axis {} has no values", String::from(axis.name))));
                }
                match axis.name {
                    AxisParam::Lambda(i) if i > self.dim() => {
                        return Err(Error::Config(format!("lambda{i} exceeds k-1 = {}", self.dim())))
                    }
                    AxisParam::Layers if axis.values.iter().any(|&l| l.fract() != 0.0 || l < 0.0 || l as usize > self.networks.len()) => {
                        return Err(Error::Config("layers values must be integers in 0..=networks".into()))
                    }
                    AxisParam::N if axis.values.iter().any(|&v| v.fract() != 0.0 || v < 1.0) => {
                        return Err(Error::Config("n values must be positive integers".into()))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Hex SHA-256 prefix of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Copy with the given axis values applied.
    pub fn at(&self, assignment: &[(AxisParam, f64)]) -> Result<Self> {
        let mut cfg = self.clone();
        let dim = self.dim();
        for &(axis, v) in assignment {
            match axis {
                AxisParam::R => {
                    for l in &mut cfg.networks {
                        l.r = None;
                        l.lambda = Some(vec![v; dim]);
                    }
                }
                AxisParam::Lambda(i) => {
                    for l in &mut cfg.networks {
                        let mut diag = match (&l.lambda, &l.r) {
                            (Some(d), _) => d.clone(),
                            (None, Some(r)) => (0..dim).map(|j| r[j * dim + j]).collect(),
                            (None, None) => vec![0.0; dim],
                        };
                        diag[i - 1] = v;
                        l.r = None;
                        l.lambda = Some(diag);
                    }
                }
                AxisParam::Alpha => cfg.alpha = v,
                AxisParam::Snr => {
                    cfg.s = Some(linalg::to_row_major(&(DMatrix::<f64>::identity(dim, dim) * v)));
                }
                AxisParam::D => cfg.networks.iter_mut().for_each(|l| l.d = v),
                AxisParam::N => cfg.n = v as usize,
                AxisParam::Layers => cfg.networks.truncate(v as usize),
            }
        }
        cfg.sweep = None;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIG: &str = r#"{
        "k": 3, "p": [0.1, 0.3, 0.6], "alpha": 0.01,
        "networks": [{ "d": 30, "lambda": [1.0, 1.0] }, { "d": 30, "R": [1, 0, 0, 1] }],
        "n": 10000,
        "sweep": { "axes": [{ "name": "r", "values": [0.5, 1.5] }, { "name": "layers", "values": [1, 2] }], "methods": ["bound", "spectral"] }
    }"#;

    #[test]
    fn parses_and_applies_axes() {
        let cfg = ExperimentConfig::from_json(FIG).unwrap();
        assert_eq!(cfg.sweep.as_ref().unwrap().trials, 8);
        let point = cfg.at(&[(AxisParam::R, 1.5), (AxisParam::Layers, 1.0)]).unwrap();
        let specs = point.specs().unwrap();
        assert_eq!(specs.len(), 1);
        assert_eq!(specs.layers[0].r, DMatrix::identity(2, 2) * 1.5);
        let point = cfg.at(&[(AxisParam::Lambda(2), 0.25)]).unwrap();
        assert_eq!(point.specs().unwrap().layers[1].r[(1, 1)], 0.25);
        assert_eq!(point.specs().unwrap().layers[1].r[(0, 0)], 1.0);
    }

    #[test]
    fn rejects_bad_configs() {
        for bad in [
            r#"{"k": 1}"#,
            r#"{"k": 3, "p": [0.5, 0.5]}"#,
            r#"{"k": 2, "bogus": 1}"#,
            r#"{"k": 2, "alpha": 2}"#,
            r#"{"k": 2, "S": [1, 2]}"#,
            r#"{"k": 2, "networks": [{"d": 3}]}"#,
            r#"{"k": 2, "sweep": {"axes": [{"name": "lambda2", "values": [1]}]}}"#,
            r#"{"k": 2, "sweep": {"axes": [{"name": "r", "values": []}]}}"#,
            r#"{"k": 2, "sweep": {"axes": [], "trials": 0}}"#,
            r#"{"k": 2, "sweep": {"axes": [{"name": "speed", "values": [1]}]}}"#,
        ] {
            assert!(matches!(ExperimentConfig::from_json(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::from_json(FIG).unwrap();
        let b = ExperimentConfig::from_json(FIG).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        let mut c = a.clone();
        c.seed = 1;
        assert_ne!(a.hash(), c.hash());
    }
}
