//! Vector preprocessing: centering, whitening (full or diagonal), optional
//! PCA, and length normalization — fitted on training data only and applied
//! unchanged to dev/test vectors.
//!
//! Application order is fixed: center → whiten → PCA → length-norm.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::linalg::{eigh, outer, vecmat};

/// Whitening transform storage.
#[derive(Debug, Clone, PartialEq)]
pub enum Whitening {
    /// Per-dimension scale 1/σ_j.
    Diag(Array1<f64>),
    /// Symmetric inverse square root of the sample covariance.
    Full(Array2<f64>),
}

/// Whitening flavor requested at fit time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WhitenMode {
    Full,
    Diag,
}

impl WhitenMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            WhitenMode::Full => "full",
            WhitenMode::Diag => "diag",
        }
    }

    pub fn parse(s: &str) -> Option<WhitenMode> {
        match s {
            "full" => Some(WhitenMode::Full),
            "diag" => Some(WhitenMode::Diag),
            _ => None,
        }
    }
}

/// A fitted preprocessing pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub mean: Array1<f64>,
    pub whiten: Whitening,
    /// Orthonormal projection columns (d × p), if PCA was requested.
    pub pca: Option<Array2<f64>>,
    pub length_norm: bool,
}

impl Pipeline {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        match &self.pca {
            Some(p) => p.ncols(),
            None => self.mean.len(),
        }
    }

    /// Applies the pipeline to one vector.
    pub fn apply(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "pipeline expects dimension {}, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let centered = &x.to_owned() - &self.mean;
        let whitened = match &self.whiten {
            Whitening::Diag(scale) => &centered * scale,
            Whitening::Full(u) => vecmat(centered.view(), u.view()),
        };
        let projected = match &self.pca {
            Some(p) => vecmat(whitened.view(), p.view()),
            None => whitened,
        };
        if self.length_norm {
            let norm = projected.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::domain("zero-norm vector cannot be length-normalized"));
            }
            Ok(projected.mapv(|v| v / norm))
        } else {
            Ok(projected)
        }
    }

    pub fn apply_all(&self, xs: &[Array1<f64>]) -> Result<Vec<Array1<f64>>> {
        xs.iter().map(|x| self.apply(x.view())).collect()
    }
}

fn sample_mean(train: &[Array1<f64>]) -> Array1<f64> {
    let d = train[0].len();
    let mut mean = Array1::zeros(d);
    for x in train {
        mean += x;
    }
    mean / train.len() as f64
}

/// Fits the pipeline on training vectors.
///
/// Full mode whitens with C^(−1/2) from the symmetric eigendecomposition of
/// the sample covariance (eigenvalues floored at 1e−10·λ_max); diagonal mode
/// scales each dimension by 1/σ_j. PCA, when requested, is fitted on the
/// centered-whitened data, keeping the top-`p` eigenvectors with the
/// deterministic sign convention that each column's largest-magnitude entry
/// is positive.
pub fn fit_pipeline(
    train: &[Array1<f64>],
    mode: WhitenMode,
    pca_dim: Option<usize>,
    length_norm: bool,
) -> Result<Pipeline> {
    if train.is_empty() {
        return Err(Error::InsufficientData("no training vectors".into()));
    }
    let d = train[0].len();
    for (i, x) in train.iter().enumerate() {
        if x.len() != d {
            return Err(Error::shape(format!(
                "training vector {i} has length {}, expected {d}",
                x.len()
            )));
        }
    }
    let min_needed = match mode {
        WhitenMode::Full => d + 1,
        WhitenMode::Diag => 2,
    };
    if train.len() < min_needed {
        return Err(Error::InsufficientData(format!(
            "{} mode needs at least {min_needed} vectors, got {}",
            mode.as_str(),
            train.len()
        )));
    }
    if let Some(p) = pca_dim {
        if p == 0 || p > d {
            return Err(Error::Config(format!(
                "pca dimension must lie in 1..={d}, got {p}"
            )));
        }
    }

    let mean = sample_mean(train);
    let denom = (train.len() - 1) as f64;
    let whiten = match mode {
        WhitenMode::Diag => {
            let mut var = Array1::<f64>::zeros(d);
            for x in train {
                let c = x - &mean;
                var += &c.mapv(|v| v * v);
            }
            var /= denom;
            if var.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::InsufficientData(
                    "a dimension has zero sample variance".into(),
                ));
            }
            Whitening::Diag(var.mapv(|v| 1.0 / v.sqrt()))
        }
        WhitenMode::Full => {
            let mut cov = Array2::<f64>::zeros((d, d));
            for x in train {
                let c = x - &mean;
                cov += &outer(c.view(), c.view());
            }
            cov /= denom;
            let (vals, vecs) = eigh(&cov)?;
            let lambda_max = vals[0];
            if !(lambda_max > 0.0) {
                return Err(Error::numeric(
                    "whitening",
                    "sample covariance is rank deficient (no positive eigenvalue)",
                ));
            }
            let floor = 1e-10 * lambda_max;
            // U = Q Λ^(−1/2) Qᵀ with floored eigenvalues.
            let mut u = Array2::<f64>::zeros((d, d));
            for i in 0..d {
                for j in 0..d {
                    let mut acc = 0.0;
                    for k in 0..d {
                        let lam = vals[k].max(floor);
                        acc += vecs[(i, k)] * vecs[(j, k)] / lam.sqrt();
                    }
                    u[(i, j)] = acc;
                }
            }
            Whitening::Full(u)
        }
    };

    let mut pipeline = Pipeline {
        mean,
        whiten,
        pca: None,
        length_norm: false,
    };

    if let Some(p) = pca_dim {
        let whitened: Vec<Array1<f64>> = train
            .iter()
            .map(|x| pipeline.apply(x.view()))
            .collect::<Result<_>>()?;
        let wmean = sample_mean(&whitened);
        let mut cov = Array2::<f64>::zeros((d, d));
        for x in &whitened {
            let c = x - &wmean;
            cov += &outer(c.view(), c.view());
        }
        cov /= denom;
        let (_, vecs) = eigh(&cov)?;
        let mut proj = Array2::<f64>::zeros((d, p));
        for col in 0..p {
            // Sign convention: largest-magnitude entry positive.
            let mut arg = 0;
            for i in 1..d {
                if vecs[(i, col)].abs() > vecs[(arg, col)].abs() {
                    arg = i;
                }
            }
            let sign = if vecs[(arg, col)] < 0.0 { -1.0 } else { 1.0 };
            for i in 0..d {
                proj[(i, col)] = sign * vecs[(i, col)];
            }
        }
        pipeline.pca = Some(proj);
    }

    pipeline.length_norm = length_norm;
    Ok(pipeline)
}
