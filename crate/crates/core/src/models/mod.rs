//! Candidate learners behind one fit/predict contract.
//!
//! Hyperparameters per family (defaults in parentheses):
//!
//! | family | parameters |
//! |---|---|
//! | `ols`, `bayesian_ridge` | none |
//! | `ridge` | `lambda` ≥ 0 (1) |
//! | `ridge_cv` | `folds` ≥ 2 (5) |
//! | `lasso` | `alpha` ≥ 0 (σ_y·√(2 ln p / n)) |
//! | `kernel_svr_*`, `linear_svm_class`, `rbf_svm_class` | `lambda` > 0 (1), `gamma` > 0 (1/p), `degree` 1..=5 (2), `coef0` (1) |
//! | `cart`, `cart_class` | `min_leaf` ≥ 1 (5), `max_depth` ≥ 0, 0 = unlimited (0) |
//! | `random_forest`, `rf_class` | `trees` ≥ 1 (100), `min_leaf` (5), `max_depth` (0), `max_features` ≥ 1 (√p), `bootstrap` 0/1 (1) |
//! | `knn_class` | `k` ≥ 1 (5) |

pub mod kernel;
pub mod knn;
pub mod linear;
pub mod tree;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::derive_seed;
use crate::error::{Error, Result};
use kernel::{Kernel, KernelFit};
use knn::KnnFit;
use linear::LinearFit;
use tree::{Criterion, Forest, Tree, TreeParams};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Ols,
    Ridge,
    RidgeCv,
    Lasso,
    BayesianRidge,
    KernelSvrLinear,
    KernelSvrRbf,
    KernelSvrPoly,
    Cart,
    RandomForest,
    KnnClass,
    LinearSvmClass,
    RbfSvmClass,
    CartClass,
    RfClass,
}

impl Family {
    pub const ALL: [Family; 15] = [
        Family::Ols,
        Family::Ridge,
        Family::RidgeCv,
        Family::Lasso,
        Family::BayesianRidge,
        Family::KernelSvrLinear,
        Family::KernelSvrRbf,
        Family::KernelSvrPoly,
        Family::Cart,
        Family::RandomForest,
        Family::KnnClass,
        Family::LinearSvmClass,
        Family::RbfSvmClass,
        Family::CartClass,
        Family::RfClass,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Ols => "ols",
            Family::Ridge => "ridge",
            Family::RidgeCv => "ridge_cv",
            Family::Lasso => "lasso",
            Family::BayesianRidge => "bayesian_ridge",
            Family::KernelSvrLinear => "kernel_svr_linear",
            Family::KernelSvrRbf => "kernel_svr_rbf",
            Family::KernelSvrPoly => "kernel_svr_poly",
            Family::Cart => "cart",
            Family::RandomForest => "random_forest",
            Family::KnnClass => "knn_class",
            Family::LinearSvmClass => "linear_svm_class",
            Family::RbfSvmClass => "rbf_svm_class",
            Family::CartClass => "cart_class",
            Family::RfClass => "rf_class",
        }
    }

    pub fn is_classifier(self) -> bool {
        matches!(
            self,
            Family::KnnClass
                | Family::LinearSvmClass
                | Family::RbfSvmClass
                | Family::CartClass
                | Family::RfClass
        )
    }

    fn allowed_params(self) -> &'static [&'static str] {
        match self {
            Family::Ols | Family::BayesianRidge => &[],
            Family::Ridge => &["lambda"],
            Family::RidgeCv => &["folds"],
            Family::Lasso => &["alpha"],
            Family::KernelSvrLinear | Family::LinearSvmClass => &["lambda"],
            Family::KernelSvrRbf | Family::RbfSvmClass => &["lambda", "gamma"],
            Family::KernelSvrPoly => &["lambda", "gamma", "degree", "coef0"],
            Family::Cart | Family::CartClass => &["min_leaf", "max_depth"],
            Family::RandomForest | Family::RfClass => {
                &["trees", "min_leaf", "max_depth", "max_features", "bootstrap"]
            }
            Family::KnnClass => &["k"],
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Family> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::config("family", format!("unknown family `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateSpec {
    pub family: Family,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

fn bad(name: &str, reason: impl Into<String>) -> Error {
    Error::InvalidHyperparameter {
        name: name.to_string(),
        reason: reason.into(),
    }
}

impl CandidateSpec {
    pub fn new(family: Family) -> CandidateSpec {
        CandidateSpec {
            family,
            params: BTreeMap::new(),
        }
    }

    pub fn with(mut self, name: &str, value: f64) -> CandidateSpec {
        self.params.insert(name.to_string(), value);
        self
    }

    fn param(&self, name: &str) -> Option<f64> {
        self.params.get(name).copied()
    }

    fn count(&self, name: &str, default: usize) -> usize {
        self.param(name).map_or(default, |v| v as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let allowed = self.family.allowed_params();
        for (name, &v) in &self.params {
            if !allowed.contains(&name.as_str()) {
                return Err(bad(name, format!("not a parameter of {}", self.family)));
            }
            if !v.is_finite() {
                return Err(bad(name, "must be finite"));
            }
            let integral = v.fract() == 0.0;
            let ok = match name.as_str() {
                "lambda" if self.family == Family::Ridge => v >= 0.0,
                "lambda" | "gamma" => v > 0.0,
                "alpha" => v >= 0.0,
                "coef0" => true,
                "degree" => integral && (1.0..=5.0).contains(&v),
                "folds" => integral && v >= 2.0,
                "max_depth" => integral && v >= 0.0,
                "bootstrap" => v == 0.0 || v == 1.0,
                _ => integral && v >= 1.0,
            };
            if !ok {
                return Err(bad(name, format!("value {v} out of bounds")));
            }
        }
        Ok(())
    }

    /// Stable display name, e.g. `ridge(lambda=10)`.
    pub fn label(&self) -> String {
        if self.params.is_empty() {
            return self.family.to_string();
        }
        let ps: Vec<String> = self.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("{}({})", self.family, ps.join(","))
    }

    pub fn default_regression_set() -> Vec<CandidateSpec> {
        vec![
            CandidateSpec::new(Family::Ols),
            CandidateSpec::new(Family::Ridge).with("lambda", 1.0),
            CandidateSpec::new(Family::Ridge).with("lambda", 100.0),
            CandidateSpec::new(Family::RidgeCv),
            CandidateSpec::new(Family::Lasso),
            CandidateSpec::new(Family::BayesianRidge),
            CandidateSpec::new(Family::KernelSvrLinear),
            CandidateSpec::new(Family::KernelSvrRbf),
            CandidateSpec::new(Family::KernelSvrPoly),
            CandidateSpec::new(Family::Cart),
            CandidateSpec::new(Family::RandomForest),
        ]
    }

    pub fn default_classification_set() -> Vec<CandidateSpec> {
        vec![
            CandidateSpec::new(Family::KnnClass),
            CandidateSpec::new(Family::LinearSvmClass),
            CandidateSpec::new(Family::RbfSvmClass),
            CandidateSpec::new(Family::CartClass),
            CandidateSpec::new(Family::RfClass),
        ]
    }

    fn kernel(&self, p: usize) -> Kernel {
        let gamma = self.param("gamma").unwrap_or(1.0 / p.max(1) as f64);
        match self.family {
            Family::KernelSvrRbf | Family::RbfSvmClass => Kernel::Rbf { gamma },
            Family::KernelSvrPoly => Kernel::Poly {
                gamma,
                degree: self.count("degree", 2) as u32,
                coef0: self.param("coef0").unwrap_or(1.0),
            },
            _ => Kernel::Linear,
        }
    }

    fn tree_params(&self, p: usize, criterion: Criterion) -> TreeParams {
        let forest = matches!(self.family, Family::RandomForest | Family::RfClass);
        let default_features = ((p as f64).sqrt().round() as usize).max(1);
        TreeParams {
            min_leaf: self.count("min_leaf", 5),
            max_depth: self.count("max_depth", 0),
            max_features: if forest {
                Some(self.count("max_features", default_features).min(p))
            } else {
                None
            },
            criterion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Fitted {
    Linear(LinearFit),
    Kernel(KernelFit),
    Tree(Tree),
    Forest(Forest),
    Knn(KnnFit),
    /// A classifier trained on a single class.
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedComponent {
    pub format_version: u32,
    pub spec: CandidateSpec,
    pub fitted: Fitted,
    /// Sorted class labels for classifiers; empty for regressors.
    pub classes: Vec<f64>,
    pub features: Vec<String>,
    /// SHA-256 over the training matrix, targets and seed.
    pub fingerprint: String,
}

fn fingerprint(x: &DMatrix<f64>, y: &[f64], seed: u64) -> String {
    let mut h = Sha256::new();
    h.update((x.nrows() as u64).to_le_bytes());
    h.update((x.ncols() as u64).to_le_bytes());
    for v in x.iter().chain(y) {
        h.update(v.to_bits().to_le_bytes());
    }
    h.update(seed.to_le_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn check_finite(x: &DMatrix<f64>) -> Result<()> {
    match x.iter().find(|v| !v.is_finite()) {
        Some(&v) => Err(Error::NonFiniteValue(v)),
        None => Ok(()),
    }
}

/// Fit `spec` on a complete matrix. Classifiers treat each distinct target
/// value as a class.
pub fn fit(
    spec: &CandidateSpec,
    x: &DMatrix<f64>,
    columns: &[String],
    y: &[f64],
    seed: u64,
) -> Result<TrainedComponent> {
    spec.validate()?;
    if x.ncols() != columns.len() {
        return Err(Error::SchemaMismatch(format!(
            "{} columns named for a {}-column matrix",
            columns.len(),
            x.ncols()
        )));
    }
    if x.nrows() != y.len() {
        return Err(Error::LengthMismatch(x.nrows(), y.len()));
    }
    check_finite(x)?;
    if let Some(&v) = y.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue(v));
    }
    let (n, p) = x.shape();
    if n < 2 {
        return Err(Error::NotEnoughRows {
            needed: 2,
            available: n,
        });
    }
    let seed = derive_seed(seed, &[spec.family as u64]);
    let mut classes: Vec<f64> = Vec::new();
    let fitted = if spec.family.is_classifier() {
        classes = y.to_vec();
        classes.sort_by(f64::total_cmp);
        classes.dedup();
        let labels: Vec<usize> = y
            .iter()
            .map(|v| classes.partition_point(|c| c < v))
            .collect();
        let k = classes.len();
        if k == 1 {
            Fitted::Constant(classes[0])
        } else {
            match spec.family {
                Family::KnnClass => Fitted::Knn(KnnFit::fit(x, &labels, k, spec.count("k", 5))),
                Family::LinearSvmClass | Family::RbfSvmClass => {
                    let targets: Vec<Vec<f64>> = (0..k)
                        .map(|c| labels.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect())
                        .collect();
                    let lambda = spec.param("lambda").unwrap_or(1.0);
                    Fitted::Kernel(KernelFit::fit(x, &targets, spec.kernel(p), lambda)?)
                }
                Family::CartClass | Family::RfClass => {
                    let yl: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
                    let params = spec.tree_params(p, Criterion::Gini { n_classes: k });
                    tree_fit(spec, x, &yl, &params, seed)
                }
                _ => unreachable!("regressor routed to classifier branch"),
            }
        }
    } else {
        match spec.family {
            Family::Ols => Fitted::Linear(linear::ols(x, y)?),
            Family::Ridge => Fitted::Linear(linear::ridge(x, y, spec.param("lambda").unwrap_or(1.0))?),
            Family::RidgeCv => Fitted::Linear(linear::ridge_cv(x, y, spec.count("folds", 5), seed)?),
            Family::Lasso => {
                let alpha = spec.param("alpha").unwrap_or_else(|| {
                    let m = y.iter().sum::<f64>() / n as f64;
                    let sd = (y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
                    sd * (2.0 * (p.max(2) as f64).ln() / n as f64).sqrt()
                });
                Fitted::Linear(linear::lasso(x, y, alpha)?)
            }
            Family::BayesianRidge => Fitted::Linear(linear::bayesian_ridge(x, y)?),
            Family::KernelSvrLinear | Family::KernelSvrRbf | Family::KernelSvrPoly => {
                let lambda = spec.param("lambda").unwrap_or(1.0);
                Fitted::Kernel(KernelFit::fit(x, &[y.to_vec()], spec.kernel(p), lambda)?)
            }
            Family::Cart | Family::RandomForest => {
                let params = spec.tree_params(p, Criterion::Variance);
                tree_fit(spec, x, y, &params, seed)
            }
            _ => unreachable!("classifier routed to regressor branch"),
        }
    };
    Ok(TrainedComponent {
        format_version: FORMAT_VERSION,
        spec: spec.clone(),
        fitted,
        classes,
        features: columns.to_vec(),
        fingerprint: fingerprint(x, y, seed),
    })
}

fn tree_fit(spec: &CandidateSpec, x: &DMatrix<f64>, y: &[f64], params: &TreeParams, seed: u64) -> Fitted {
    match spec.family {
        Family::RandomForest | Family::RfClass => Fitted::Forest(Forest::fit(
            x,
            y,
            spec.count("trees", 100),
            spec.param("bootstrap").unwrap_or(1.0) == 1.0,
            params,
            seed,
        )),
        _ => Fitted::Tree(tree::grow(x, y, (0..x.nrows()).collect(), params, seed)),
    }
}

/// Predict rows of `x`, whose columns must match the training schema.
pub fn predict(component: &TrainedComponent, x: &DMatrix<f64>, columns: &[String]) -> Result<Vec<f64>> {
    if columns != component.features.as_slice() || x.ncols() != columns.len() {
        return Err(Error::SchemaMismatch(format!(
            "expected {} trained features, got {}",
            component.features.len(),
            columns.len()
        )));
    }
    check_finite(x)?;
    let class = |i: usize| component.classes[i];
    let out: Vec<f64> = match &component.fitted {
        Fitted::Linear(f) => f.predict(x),
        Fitted::Kernel(f) => {
            let scores = f.scores(x);
            if component.classes.is_empty() {
                scores.iter().map(|s| s[0]).collect()
            } else {
                scores
                    .iter()
                    .map(|s| {
                        let mut best = 0;
                        for (i, v) in s.iter().enumerate() {
                            if *v > s[best] {
                                best = i;
                            }
                        }
                        class(best)
                    })
                    .collect()
            }
        }
        Fitted::Tree(t) => (0..x.nrows()).map(|r| t.predict_row(x, r)).collect(),
        Fitted::Forest(f) => (0..x.nrows()).map(|r| f.predict_row(x, r)).collect(),
        Fitted::Knn(f) => f.predict(x).into_iter().map(class).collect(),
        Fitted::Constant(c) => vec![*c; x.nrows()],
    };
    let out = match (&component.fitted, component.classes.is_empty()) {
        (Fitted::Tree(_) | Fitted::Forest(_), false) => out.into_iter().map(|l| class(l as usize)).collect(),
        _ => out,
    };
    if let Some(&v) = out.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue(v));
    }
    Ok(out)
}

/// Normalized importance per feature. Linear models score |coef|·std;
/// trees score total impurity decrease. All-zero scores give an empty map.
pub fn feature_importance(component: &TrainedComponent) -> Result<BTreeMap<String, f64>> {
    let raw: Vec<f64> = match &component.fitted {
        Fitted::Linear(f) => f.coef.iter().zip(&f.col_std).map(|(b, s)| (b * s).abs()).collect(),
        Fitted::Tree(t) => t.importance.clone(),
        Fitted::Forest(f) => f.importance(),
        Fitted::Kernel(_) | Fitted::Knn(_) | Fitted::Constant(_) => {
            return Err(Error::Unsupported(component.spec.family.to_string()))
        }
    };
    let total: f64 = raw.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        log::warn!(
            "{} has no nonzero importances; returning an empty map",
            component.spec.label()
        );
        return Ok(BTreeMap::new());
    }
    Ok(component
        .features
        .iter()
        .zip(&raw)
        .map(|(f, v)| (f.clone(), v / total))
        .collect())
}

impl TrainedComponent {
    pub fn to_writer<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn from_reader<R: Read>(r: R) -> Result<TrainedComponent> {
        let c: TrainedComponent = serde_json::from_reader(r)?;
        if c.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: c.format_version,
                expected: FORMAT_VERSION,
            });
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.to_writer(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<TrainedComponent> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        TrainedComponent::from_reader(std::io::BufReader::new(f))
    }
}
