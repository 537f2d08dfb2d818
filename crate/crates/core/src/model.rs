//! VAE parameterization and deterministic forward computations.
//!
//! Both nets share one structure: a tanh-activated deterministic layer
//! followed by two linear heads producing the mean and the (diagonal, stored
//! as a vector) precision of a Gaussian. All vectors are row vectors, and
//! every layer keeps its parameters in augmented form `W̃ = [Wᵀ bᵀ]ᵀ` so that
//! `x̃ W̃ = x W + b` with `x̃ = [x 1]`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::linalg::LN_2PI;

/// Precision pre-activations are clamped to this band before `exp` so the
/// exponential can neither overflow nor underflow to zero.
pub const TAU_CLAMP: f64 = 30.0;

/// Clamp applied to precision pre-activations. Idempotent and monotone.
#[inline]
pub fn clamp_tau_preact(t: f64) -> f64 {
    t.clamp(-TAU_CLAMP, TAU_CLAMP)
}

/// Model and training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeConfig {
    /// Input (observed vector) dimension.
    pub d_x: usize,
    /// Deterministic layer dimension.
    pub d_d: usize,
    /// Stochastic (latent) layer dimension.
    pub d_h: usize,
    /// KL weight of the lower bound.
    pub beta: f64,
    /// Monte-Carlo draws per training example.
    pub k_train: usize,
    /// Monte-Carlo draws per scoring marginal.
    pub k_score: usize,
    /// Examples per gradient step.
    pub minibatch: usize,
    /// RMS-prop smoothing factor; `gamma = 1` disables the accumulator.
    pub gamma: f64,
    /// Learning rate.
    pub eta: f64,
    /// RNG seed for initialization and training.
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            d_x: 1,
            d_d: 1,
            d_h: 1,
            beta: 1.0,
            k_train: 1,
            k_score: 100,
            minibatch: 100,
            gamma: 0.9,
            eta: 1e-6,
            seed: 0,
        }
    }
}

impl VaeConfig {
    pub fn with_dims(d_x: usize, d_d: usize, d_h: usize) -> Self {
        VaeConfig {
            d_x,
            d_d,
            d_h,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_x < 1 || self.d_d < 1 || self.d_h < 1 {
            return Err(Error::Config("all dimensions must be >= 1".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if self.k_train < 1 || self.k_score < 1 {
            return Err(Error::Config("k_train and k_score must be >= 1".into()));
        }
        if self.minibatch < 1 {
            return Err(Error::Config("minibatch must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "gamma must lie in [0,1], got {}",
                self.gamma
            )));
        }
        if !(self.eta > 0.0) {
            return Err(Error::Config(format!("eta must be > 0, got {}", self.eta)));
        }
        Ok(())
    }
}

/// A dense affine map stored in augmented form: rows `0..in_dim` hold the
/// weight matrix, the last row holds the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    wt: Array2<f64>,
}

impl AffineLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        AffineLayer {
            wt: Array2::zeros((in_dim + 1, out_dim)),
        }
    }

    pub fn from_parts(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.ncols() != bias.len() {
            return Err(Error::shape(format!(
                "weights {}x{} incompatible with bias of length {}",
                weights.nrows(),
                weights.ncols(),
                bias.len()
            )));
        }
        let (r, c) = (weights.nrows(), weights.ncols());
        let mut wt = Array2::zeros((r + 1, c));
        wt.slice_mut(s![..r, ..]).assign(&weights);
        wt.row_mut(r).assign(&bias);
        Ok(AffineLayer { wt })
    }

    pub fn from_augmented(wt: Array2<f64>) -> Result<Self> {
        if wt.nrows() < 2 {
            return Err(Error::shape(
                "augmented matrix needs at least one weight row plus the bias row",
            ));
        }
        Ok(AffineLayer { wt })
    }

    pub fn in_dim(&self) -> usize {
        self.wt.nrows() - 1
    }

    pub fn out_dim(&self) -> usize {
        self.wt.ncols()
    }

    /// Augmented parameter matrix `W̃`.
    pub fn augmented(&self) -> &Array2<f64> {
        &self.wt
    }

    pub fn augmented_mut(&mut self) -> &mut Array2<f64> {
        &mut self.wt
    }

    /// Weight rows (without the bias row).
    pub fn weights(&self) -> ArrayView2<'_, f64> {
        self.wt.slice(s![..self.in_dim(), ..])
    }

    pub fn bias(&self) -> ArrayView1<'_, f64> {
        self.wt.row(self.in_dim())
    }

    /// `x W + b`, accumulated in ascending index order with the bias last,
    /// which is exactly the augmented product `x̃ W̃`.
    pub fn apply(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let n = self.in_dim();
        if x.len() != n {
            return Err(Error::shape(format!(
                "affine layer expects input of length {n}, got {}",
                x.len()
            )));
        }
        let mut out = Array1::zeros(self.out_dim());
        for j in 0..self.out_dim() {
            let mut acc = 0.0;
            for i in 0..n {
                acc += x[i] * self.wt[(i, j)];
            }
            acc += self.wt[(n, j)];
            out[j] = acc;
        }
        Ok(out)
    }
}

/// Generative net parameters θ: latent h → deterministic z → (μ_g, τ_g).
#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeNet {
    pub v: AffineLayer,
    pub mu: AffineLayer,
    pub tau: AffineLayer,
}

/// Inference net parameters φ: observed x → deterministic y → (μ_r, τ_r).
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceNet {
    pub v: AffineLayer,
    pub mu: AffineLayer,
    pub tau: AffineLayer,
}

/// The full model: configuration plus both nets.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub config: VaeConfig,
    pub gen: GenerativeNet,
    pub inf: InferenceNet,
}

/// A diagonal Gaussian given by its mean and precision vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Array1<f64>,
    pub precision: Array1<f64>,
}

impl DiagGaussian {
    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: Array1::zeros(dim),
            precision: Array1::ones(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.precision.len() {
            return Err(Error::shape(format!(
                "mean length {} != precision length {}",
                self.mean.len(),
                self.precision.len()
            )));
        }
        for (j, &p) in self.precision.iter().enumerate() {
            if !(p > 0.0) || !p.is_finite() {
                return Err(Error::domain(format!(
                    "precision[{j}] = {p} is not strictly positive"
                )));
            }
        }
        Ok(())
    }
}

fn head_forward(
    x: ArrayView1<f64>,
    v: &AffineLayer,
    mu: &AffineLayer,
    tau: &AffineLayer,
) -> Result<(Array1<f64>, DiagGaussian)> {
    let hidden = v.apply(x)?.mapv(f64::tanh);
    let mean = mu.apply(hidden.view())?;
    let precision = tau
        .apply(hidden.view())?
        .mapv(|t| clamp_tau_preact(t).exp());
    Ok((hidden, DiagGaussian { mean, precision }))
}

/// Inference pass: x → (y, q(h|x)).
pub fn infer_forward(x: ArrayView1<f64>, inf: &InferenceNet) -> Result<(Array1<f64>, DiagGaussian)> {
    head_forward(x, &inf.v, &inf.mu, &inf.tau)
}

/// Generative pass: h → (z, p(x|h)).
pub fn gen_forward(h: ArrayView1<f64>, gen: &GenerativeNet) -> Result<(Array1<f64>, DiagGaussian)> {
    head_forward(h, &gen.v, &gen.mu, &gen.tau)
}

/// Reparametrized draw `h = μ + τ^(−1/2) ⊙ ε`.
pub fn reparam_sample(q: &DiagGaussian, eps: ArrayView1<f64>) -> Result<Array1<f64>> {
    if eps.len() != q.dim() {
        return Err(Error::shape(format!(
            "eps length {} != gaussian dim {}",
            eps.len(),
            q.dim()
        )));
    }
    q.validate()?;
    let mut h = Array1::zeros(q.dim());
    for j in 0..q.dim() {
        h[j] = q.mean[j] + q.precision[j].powf(-0.5) * eps[j];
    }
    Ok(h)
}

/// Diagonal-Gaussian log density
/// `½ Σ_j [ln τ_j − ln 2π − τ_j (x_j − μ_j)²]`.
pub fn log_density_diag(x: ArrayView1<f64>, p: &DiagGaussian) -> Result<f64> {
    if x.len() != p.dim() {
        return Err(Error::shape(format!(
            "x length {} != gaussian dim {}",
            x.len(),
            p.dim()
        )));
    }
    p.validate()?;
    let mut acc = 0.0;
    for j in 0..x.len() {
        let d = x[j] - p.mean[j];
        acc += p.precision[j].ln() - LN_2PI - p.precision[j] * d * d;
    }
    Ok(0.5 * acc)
}

/// `D_KL[q ∥ N(0, I)] = ½ Σ_j [μ_j² + 1/τ_j − 1 + ln τ_j]`, always ≥ 0.
pub fn kl_to_standard_normal(q: &DiagGaussian) -> Result<f64> {
    q.validate()?;
    let mut acc = 0.0;
    for j in 0..q.dim() {
        let t = q.precision[j];
        acc += q.mean[j] * q.mean[j] + 1.0 / t - 1.0 + t.ln();
    }
    Ok(0.5 * acc)
}

/// Initializes a model: weights i.i.d. uniform on `[−a, a]` with
/// `a = sqrt(6 / (fan_in + fan_out))`, biases zero, and τ-head weights scaled
/// by 0.01 so initial precisions start near one. Deterministic given the seed.
pub fn init_params(config: &VaeConfig) -> Result<VaeModel> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut layer = |fan_in: usize, fan_out: usize, scale: f64| -> AffineLayer {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut l = AffineLayer::zeros(fan_in, fan_out);
        for i in 0..fan_in {
            for j in 0..fan_out {
                l.augmented_mut()[(i, j)] = rng.random_range(-a..a) * scale;
            }
        }
        l
    };
    let gen = GenerativeNet {
        v: layer(config.d_h, config.d_d, 1.0),
        mu: layer(config.d_d, config.d_x, 1.0),
        tau: layer(config.d_d, config.d_x, 0.01),
    };
    let inf = InferenceNet {
        v: layer(config.d_x, config.d_d, 1.0),
        mu: layer(config.d_d, config.d_h, 1.0),
        tau: layer(config.d_d, config.d_h, 0.01),
    };
    Ok(VaeModel {
        config: config.clone(),
        gen,
        inf,
    })
}

impl VaeModel {
    /// A model with all parameters zero: q = prior and p(x|h) = N(0, I).
    pub fn zeros(config: VaeConfig) -> Result<VaeModel> {
        config.validate()?;
        Ok(VaeModel {
            gen: GenerativeNet {
                v: AffineLayer::zeros(config.d_h, config.d_d),
                mu: AffineLayer::zeros(config.d_d, config.d_x),
                tau: AffineLayer::zeros(config.d_d, config.d_x),
            },
            inf: InferenceNet {
                v: AffineLayer::zeros(config.d_x, config.d_d),
                mu: AffineLayer::zeros(config.d_d, config.d_h),
                tau: AffineLayer::zeros(config.d_d, config.d_h),
            },
            config,
        })
    }

    pub fn validate_shapes(&self) -> Result<()> {
        let c = &self.config;
        let checks = [
            (self.gen.v.in_dim(), c.d_h, self.gen.v.out_dim(), c.d_d, "gen.v"),
            (self.gen.mu.in_dim(), c.d_d, self.gen.mu.out_dim(), c.d_x, "gen.mu"),
            (self.gen.tau.in_dim(), c.d_d, self.gen.tau.out_dim(), c.d_x, "gen.tau"),
            (self.inf.v.in_dim(), c.d_x, self.inf.v.out_dim(), c.d_d, "inf.v"),
            (self.inf.mu.in_dim(), c.d_d, self.inf.mu.out_dim(), c.d_h, "inf.mu"),
            (self.inf.tau.in_dim(), c.d_d, self.inf.tau.out_dim(), c.d_h, "inf.tau"),
        ];
        for (got_in, want_in, got_out, want_out, name) in checks {
            if got_in != want_in || got_out != want_out {
                return Err(Error::shape(format!(
                    "{name}: expected {want_in}->{want_out}, got {got_in}->{got_out}"
                )));
            }
        }
        Ok(())
    }
}

/// `[v 1]` — append the augmentation constant.
pub fn augment(v: ArrayView1<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(v.len() + 1);
    for i in 0..v.len() {
        out[i] = v[i];
    }
    out[v.len()] = 1.0;
    out
}

/// Draws a standard-normal row vector.
pub fn standard_normal_vec<R: Rng>(rng: &mut R, dim: usize) -> Array1<f64> {
    let mut v = Array1::zeros(dim);
    for j in 0..dim {
        v[j] = rng.sample::<f64, _>(rand_distr::StandardNormal);
    }
    v
}
