//! Lower-bound estimation, hand-derived analytic gradients for all six
//! parameter blocks, RMS-prop updates, and the training loop.
//!
//! The gradient listing (single reparametrized draw ε, ascent direction on
//! the β-weighted lower bound):
//!
//! ```text
//! A = (x − μ_g) ⊙ τ_g                      ∂L/∂W̃_μ^(θ) = z̃ᵀ A
//! B = ½ [E_x − (x − μ_g) ⊙ A]              ∂L/∂W̃_τ^(θ) = z̃ᵀ B
//! C = 1 − z ⊙ z,  T = 1 − y ⊙ y            ∂L/∂W̃_v^(θ) = h̃ᵀ G
//! G = C ⊙ (B W_τ^(θ)ᵀ + A W_μ^(θ)ᵀ)        ∂L/∂W̃_μ^(φ) = ỹᵀ (S − β μ_r)
//! S = G W_v^(θ)ᵀ                           ∂L/∂W̃_τ^(φ) = ỹᵀ (S ⊙ F + R)
//! R = β ½ [τ_r^(−1) − E_h]                 ∂L/∂W̃_v^(φ) = x̃ᵀ {((S⊙F+R) W_τ^(φ)ᵀ
//! F = −½ [τ_r^(−1/2) ⊙ ε]                        + (S − β μ_r) W_μ^(φ)ᵀ) ⊙ T}
//! ```
//!
//! The KL-originating terms (R and the μ_r terms) carry the factor β; with
//! β = 1 they reduce to the unweighted bound's gradients.

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::eval::{compute_eer, compute_min_dcf, labeled_scores, CostParams};
use crate::linalg::{matvec, outer};
use crate::model::{
    augment, gen_forward, infer_forward, init_params, kl_to_standard_normal, log_density_diag,
    reparam_sample, standard_normal_vec, VaeConfig, VaeModel,
};
use crate::scoring::{score_trials, TrialSet};
use crate::seeds;

/// One gradient (or accumulator) per parameter block, each in the augmented
/// shape of its layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads {
    pub gen_v: Array2<f64>,
    pub gen_mu: Array2<f64>,
    pub gen_tau: Array2<f64>,
    pub inf_v: Array2<f64>,
    pub inf_mu: Array2<f64>,
    pub inf_tau: Array2<f64>,
}

impl BlockGrads {
    pub fn zeros_like(model: &VaeModel) -> Self {
        BlockGrads {
            gen_v: Array2::zeros(model.gen.v.augmented().dim()),
            gen_mu: Array2::zeros(model.gen.mu.augmented().dim()),
            gen_tau: Array2::zeros(model.gen.tau.augmented().dim()),
            inf_v: Array2::zeros(model.inf.v.augmented().dim()),
            inf_mu: Array2::zeros(model.inf.mu.augmented().dim()),
            inf_tau: Array2::zeros(model.inf.tau.augmented().dim()),
        }
    }

    pub fn ones_like(model: &VaeModel) -> Self {
        let mut g = Self::zeros_like(model);
        g.for_each_mut(|m| m.fill(1.0));
        g
    }

    pub fn blocks(&self) -> [(&'static str, &Array2<f64>); 6] {
        [
            ("gen.v", &self.gen_v),
            ("gen.mu", &self.gen_mu),
            ("gen.tau", &self.gen_tau),
            ("inf.v", &self.inf_v),
            ("inf.mu", &self.inf_mu),
            ("inf.tau", &self.inf_tau),
        ]
    }

    fn for_each_mut(&mut self, mut f: impl FnMut(&mut Array2<f64>)) {
        f(&mut self.gen_v);
        f(&mut self.gen_mu);
        f(&mut self.gen_tau);
        f(&mut self.inf_v);
        f(&mut self.inf_mu);
        f(&mut self.inf_tau);
    }

    pub fn add_assign(&mut self, other: &BlockGrads) {
        self.gen_v += &other.gen_v;
        self.gen_mu += &other.gen_mu;
        self.gen_tau += &other.gen_tau;
        self.inf_v += &other.inf_v;
        self.inf_mu += &other.inf_mu;
        self.inf_tau += &other.inf_tau;
    }

    pub fn scale(&mut self, c: f64) {
        self.for_each_mut(|m| *m *= c);
    }
}

/// Monte-Carlo estimate of the β-weighted lower bound.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboEstimate {
    /// `recon − beta · kl`, in nats.
    pub total: f64,
    /// Monte-Carlo estimate of E_q[log p(x|h)].
    pub recon: f64,
    /// Analytic KL to the standard-normal prior.
    pub kl: f64,
}

/// Per-sample gradient workspace: the named intermediates from the gradient
/// listing plus the six block gradients and the ELBO parts for this draw.
#[derive(Debug, Clone)]
pub struct GradientWorkspace {
    pub a: Array1<f64>,
    pub b: Array1<f64>,
    pub c: Array1<f64>,
    pub t: Array1<f64>,
    pub g: Array1<f64>,
    pub s: Array1<f64>,
    pub r: Array1<f64>,
    pub f: Array1<f64>,
    pub grads: BlockGrads,
    pub elbo: ElboEstimate,
}

/// Estimates the β-weighted lower bound for one example using the provided
/// ε draws: `recon` is the K-sample average of log p(x|h_k), `kl` is analytic.
pub fn elbo_estimate(
    model: &VaeModel,
    x: ArrayView1<f64>,
    eps_samples: &[Array1<f64>],
    beta: f64,
) -> Result<ElboEstimate> {
    if eps_samples.is_empty() {
        return Err(Error::Config("need at least one eps sample".into()));
    }
    let (_, q) = infer_forward(x, &model.inf)?;
    let kl = kl_to_standard_normal(&q)?;
    let mut recon_sum = 0.0;
    for eps in eps_samples {
        let h = reparam_sample(&q, eps.view())?;
        let (_, p) = gen_forward(h.view(), &model.gen)?;
        recon_sum += log_density_diag(x, &p)?;
    }
    let recon = recon_sum / eps_samples.len() as f64;
    Ok(ElboEstimate {
        total: recon - beta * kl,
        recon,
        kl,
    })
}

/// Computes the analytic ascent gradients of the β-weighted lower bound for
/// one example and one reparametrized draw.
pub fn analytic_gradients(
    model: &VaeModel,
    x: ArrayView1<f64>,
    eps: ArrayView1<f64>,
    beta: f64,
) -> Result<GradientWorkspace> {
    let (y, q) = infer_forward(x, &model.inf)?;
    let h = reparam_sample(&q, eps.view())?;
    let (z, p) = gen_forward(h.view(), &model.gen)?;

    let mu_g = &p.mean;
    let tau_g = &p.precision;
    let mu_r = &q.mean;
    let tau_r = &q.precision;

    let resid = &x.to_owned() - mu_g;
    let a = &resid * tau_g;
    let b = (1.0 - &resid * &a) * 0.5;
    let c = 1.0 - &z * &z;
    let t = 1.0 - &y * &y;
    let g = &c * &(matvec(model.gen.tau.weights(), b.view()) + matvec(model.gen.mu.weights(), a.view()));
    let s = matvec(model.gen.v.weights(), g.view());
    let r = tau_r.mapv(|v| beta * 0.5 * (1.0 / v - 1.0));
    let f = tau_r
        .iter()
        .zip(eps.iter())
        .map(|(&tv, &ev)| -0.5 * tv.powf(-0.5) * ev)
        .collect::<Array1<f64>>();

    let z_aug = augment(z.view());
    let h_aug = augment(h.view());
    let y_aug = augment(y.view());
    let x_aug = augment(x);

    let s_mu = &s - &mu_r.mapv(|v| beta * v);
    let s_tau = &(&s * &f) + &r;
    let back_v = (matvec(model.inf.tau.weights(), s_tau.view())
        + matvec(model.inf.mu.weights(), s_mu.view()))
        * &t;

    let grads = BlockGrads {
        gen_mu: outer(z_aug.view(), a.view()),
        gen_tau: outer(z_aug.view(), b.view()),
        gen_v: outer(h_aug.view(), g.view()),
        inf_mu: outer(y_aug.view(), s_mu.view()),
        inf_tau: outer(y_aug.view(), s_tau.view()),
        inf_v: outer(x_aug.view(), back_v.view()),
    };
    for (name, block) in grads.blocks() {
        if block.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(
                "analytic_gradients",
                format!("non-finite gradient in block {name}"),
            ));
        }
    }

    let kl = kl_to_standard_normal(&q)?;
    let recon = log_density_diag(x, &p)?;
    Ok(GradientWorkspace {
        a,
        b,
        c,
        t,
        g,
        s,
        r,
        f,
        grads,
        elbo: ElboEstimate {
            total: recon - beta * kl,
            recon,
            kl,
        },
    })
}

/// RMS-prop accumulator state.
#[derive(Debug, Clone)]
pub struct RmsPropState {
    /// Smoothed squared gradients, initialized to all-ones so that γ = 1
    /// degenerates to plain SGD.
    pub ms: BlockGrads,
    pub gamma: f64,
    pub eta: f64,
    pub epsilon_stab: f64,
}

impl RmsPropState {
    pub fn new(model: &VaeModel, gamma: f64, eta: f64) -> Self {
        RmsPropState {
            ms: BlockGrads::ones_like(model),
            gamma,
            eta,
            epsilon_stab: 1e-8,
        }
    }
}

fn rmsprop_block(
    param: &mut Array2<f64>,
    grad: &Array2<f64>,
    ms: &mut Array2<f64>,
    gamma: f64,
    eta: f64,
    eps: f64,
) {
    if gamma < 1.0 {
        for (m, g) in ms.iter_mut().zip(grad.iter()) {
            *m = gamma * *m + (1.0 - gamma) * g * g;
        }
    }
    for ((p, g), m) in param.iter_mut().zip(grad.iter()).zip(ms.iter()) {
        *p += eta * g / (m + eps).sqrt();
    }
}

/// One ascent step: `ms' = γ ms + (1−γ) g²`, `Ψ' = Ψ + η g / √(ms' + ε)`.
/// With γ = 1 the accumulator is left untouched (plain SGD on the all-ones
/// initialization).
pub fn rmsprop_step(
    model: &VaeModel,
    grads: &BlockGrads,
    state: &RmsPropState,
) -> Result<(VaeModel, RmsPropState)> {
    let mut model = model.clone();
    let mut state = state.clone();
    step_blocks(&mut model, grads, &mut state);
    Ok((model, state))
}

fn step_blocks(model: &mut VaeModel, grads: &BlockGrads, state: &mut RmsPropState) {
    let gamma = state.gamma;
    let eta = state.eta;
    let eps = state.epsilon_stab;
    rmsprop_block(model.gen.v.augmented_mut(), &grads.gen_v, &mut state.ms.gen_v, gamma, eta, eps);
    rmsprop_block(model.gen.mu.augmented_mut(), &grads.gen_mu, &mut state.ms.gen_mu, gamma, eta, eps);
    rmsprop_block(model.gen.tau.augmented_mut(), &grads.gen_tau, &mut state.ms.gen_tau, gamma, eta, eps);
    rmsprop_block(model.inf.v.augmented_mut(), &grads.inf_v, &mut state.ms.inf_v, gamma, eta, eps);
    rmsprop_block(model.inf.mu.augmented_mut(), &grads.inf_mu, &mut state.ms.inf_mu, gamma, eta, eps);
    rmsprop_block(model.inf.tau.augmented_mut(), &grads.inf_tau, &mut state.ms.inf_tau, gamma, eta, eps);
}

/// Why the training loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Ran the configured number of epochs.
    MaxIters,
    /// Dev EER failed to improve for `patience` consecutive checkpoints.
    NoImprovement,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::MaxIters => "max-iters",
            StopReason::NoImprovement => "no-improvement",
        }
    }
}

/// Mean minibatch ELBO for one iteration (one parameter update).
#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub elbo: f64,
}

/// Dev-set evaluation at a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub index: usize,
    pub iter: usize,
    pub eer: f64,
    pub min_dcf: f64,
}

/// Full training history.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub iters: Vec<IterRecord>,
    pub checkpoints: Vec<Checkpoint>,
    pub stop_reason: StopReason,
    pub iterations: usize,
    /// Index into `checkpoints` of the best (lowest-EER) checkpoint, if a dev
    /// set was used.
    pub best_checkpoint: Option<usize>,
}

/// Dev data for early stopping: vectors by id plus labeled trials.
#[derive(Debug, Clone)]
pub struct DevSet {
    pub vectors: std::collections::HashMap<String, Array1<f64>>,
    pub trials: TrialSet,
}

/// Loop controls that sit outside the model configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    /// Number of epochs; 0 returns the freshly initialized model.
    pub max_iters: usize,
    /// Dev-evaluation period in iterations (minibatch updates);
    /// 0 means once per epoch.
    pub eval_every: usize,
    /// Consecutive non-improving checkpoints tolerated before stopping.
    pub patience: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            max_iters: 50,
            eval_every: 0,
            patience: 3,
        }
    }
}

/// Trains a model with seeded minibatch RMS-prop ascent.
///
/// Shuffles per epoch, accumulates per-sample mean gradients (k_train draws
/// each) in fixed left-to-right order, and applies one update per minibatch.
/// With a dev set, trials are scored every `eval_every` iterations (K =
/// k_score) and training stops once dev EER has not improved for `patience`
/// consecutive checkpoints, returning the best-checkpoint model. The learning
/// rate is halved once at the mid-point epoch.
pub fn fit(
    train_x: &[Array1<f64>],
    dev: Option<&DevSet>,
    config: &VaeConfig,
    opts: &TrainOptions,
) -> Result<(VaeModel, TrainReport)> {
    config.validate()?;
    if train_x.is_empty() {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    for (i, x) in train_x.iter().enumerate() {
        if x.len() != config.d_x {
            return Err(Error::shape(format!(
                "training vector {i} has length {}, expected {}",
                x.len(),
                config.d_x
            )));
        }
    }

    let mut model = init_params(config)?;
    let mut state = RmsPropState::new(&model, config.gamma, config.eta);
    let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(config.seed, "train-loop"));
    let iters_per_epoch = train_x.len().div_ceil(config.minibatch);
    let eval_every = if opts.eval_every == 0 {
        iters_per_epoch
    } else {
        opts.eval_every
    };
    let patience = opts.patience.max(1);
    let dev_seed = seeds::derive(config.seed, "dev-score");

    let mut report = TrainReport {
        iters: Vec::new(),
        checkpoints: Vec::new(),
        stop_reason: StopReason::MaxIters,
        iterations: 0,
        best_checkpoint: None,
    };
    let mut best_model: Option<VaeModel> = None;
    let mut best_eer = f64::INFINITY;
    let mut stale = 0usize;
    let mut iter = 0usize;
    let mut indices: Vec<usize> = (0..train_x.len()).collect();

    'training: for epoch in 0..opts.max_iters {
        // Piecewise-constant schedule: halve once at mid-training.
        state.eta = if opts.max_iters >= 2 && epoch >= opts.max_iters / 2 {
            config.eta * 0.5
        } else {
            config.eta
        };
        indices.shuffle(&mut rng);
        for batch in indices.chunks(config.minibatch) {
            let mut batch_grads = BlockGrads::zeros_like(&model);
            let mut batch_elbo = 0.0;
            for &idx in batch {
                let x = &train_x[idx];
                let mut sample_grads = BlockGrads::zeros_like(&model);
                let mut sample_elbo = 0.0;
                for _ in 0..config.k_train {
                    let eps = standard_normal_vec(&mut rng, config.d_h);
                    let ws = analytic_gradients(&model, x.view(), eps.view(), config.beta)?;
                    sample_grads.add_assign(&ws.grads);
                    sample_elbo += ws.elbo.total;
                }
                sample_grads.scale(1.0 / config.k_train as f64);
                batch_grads.add_assign(&sample_grads);
                batch_elbo += sample_elbo / config.k_train as f64;
            }
            batch_grads.scale(1.0 / batch.len() as f64);
            step_blocks(&mut model, &batch_grads, &mut state);
            iter += 1;
            report.iters.push(IterRecord {
                iter,
                elbo: batch_elbo / batch.len() as f64,
            });

            if let Some(dev) = dev {
                if iter % eval_every == 0 {
                    let scores = score_trials(
                        &model,
                        &dev.trials,
                        &dev.vectors,
                        config.k_score,
                        dev_seed,
                        false,
                    )?;
                    let (s, l) = labeled_scores(&scores);
                    let (eer, _) = compute_eer(&s, &l)?;
                    let (min_dcf, _) = compute_min_dcf(&s, &l, &CostParams::default())?;
                    let index = report.checkpoints.len() + 1;
                    report.checkpoints.push(Checkpoint {
                        index,
                        iter,
                        eer,
                        min_dcf,
                    });
                    if eer < best_eer {
                        best_eer = eer;
                        best_model = Some(model.clone());
                        report.best_checkpoint = Some(index - 1);
                        stale = 0;
                    } else {
                        stale += 1;
                        if stale >= patience {
                            report.stop_reason = StopReason::NoImprovement;
                            break 'training;
                        }
                    }
                }
            }
        }
    }

    report.iterations = iter;
    let final_model = match best_model {
        Some(m) => m,
        None => model,
    };
    Ok((final_model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AffineLayer;
    use ndarray::array;
    use rand::Rng;

    fn random_model(rng: &mut ChaCha12Rng, d_x: usize, d_d: usize, d_h: usize) -> VaeModel {
        let config = VaeConfig {
            seed: rng.random(),
            ..VaeConfig::with_dims(d_x, d_d, d_h)
        };
        let mut model = init_params(&config).unwrap();
        // Perturb all parameters (including biases) so nothing is at a
        // special point.
        for layer in [
            &mut model.gen.v,
            &mut model.gen.mu,
            &mut model.gen.tau,
            &mut model.inf.v,
            &mut model.inf.mu,
            &mut model.inf.tau,
        ] {
            for v in layer.augmented_mut().iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        model
    }

    /// Central finite differences of the fixed-ε ELBO with respect to every
    /// entry of every block.
    fn finite_diff_grads(
        model: &VaeModel,
        x: ArrayView1<f64>,
        eps: &Array1<f64>,
        beta: f64,
        step: f64,
    ) -> BlockGrads {
        let mut out = BlockGrads::zeros_like(model);
        let eps_samples = vec![eps.clone()];
        let block_list: [(fn(&mut VaeModel) -> &mut AffineLayer, fn(&mut BlockGrads) -> &mut Array2<f64>); 6] = [
            (|m| &mut m.gen.v, |g| &mut g.gen_v),
            (|m| &mut m.gen.mu, |g| &mut g.gen_mu),
            (|m| &mut m.gen.tau, |g| &mut g.gen_tau),
            (|m| &mut m.inf.v, |g| &mut g.inf_v),
            (|m| &mut m.inf.mu, |g| &mut g.inf_mu),
            (|m| &mut m.inf.tau, |g| &mut g.inf_tau),
        ];
        for (layer_of, grad_of) in block_list {
            let shape = layer_of(&mut model.clone()).augmented().dim();
            for i in 0..shape.0 {
                for j in 0..shape.1 {
                    let mut mp = model.clone();
                    layer_of(&mut mp).augmented_mut()[(i, j)] += step;
                    let lp = elbo_estimate(&mp, x, &eps_samples, beta).unwrap().total;
                    let mut mm = model.clone();
                    layer_of(&mut mm).augmented_mut()[(i, j)] -= step;
                    let lm = elbo_estimate(&mm, x, &eps_samples, beta).unwrap().total;
                    grad_of(&mut out)[(i, j)] = (lp - lm) / (2.0 * step);
                }
            }
        }
        out
    }

    fn assert_grads_close(analytic: &BlockGrads, fd: &BlockGrads, tag: &str) {
        for ((name, a), (_, f)) in analytic.blocks().iter().zip(fd.blocks().iter()) {
            for (idx, (&av, &fv)) in a.iter().zip(f.iter()).enumerate() {
                let tol = 1e-4 * av.abs().max(fv.abs());
                let tol = tol.max(1e-8);
                assert!(
                    (av - fv).abs() <= tol,
                    "{tag}: block {name} entry {idx}: analytic {av} vs fd {fv}"
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(2024);
        // Smaller sweep here; the acceptance suite runs the full 20-config
        // version.
        for (i, &beta) in [1.0, 1e-3, 4.0, 1.0, 4.0].iter().enumerate() {
            let model = random_model(&mut rng, 3, 4, 5);
            let x = standard_normal_vec(&mut rng, 3);
            let eps = standard_normal_vec(&mut rng, 5);
            let ws = analytic_gradients(&model, x.view(), eps.view(), beta).unwrap();
            let fd = finite_diff_grads(&model, x.view(), &eps, beta, 1e-5);
            assert_grads_close(&ws.grads, &fd, &format!("config {i} beta {beta}"));
        }
    }

    #[test]
    fn zero_residual_kills_gen_mu_gradient() {
        // h = 0 makes z = tanh(0) = 0, so μ_g is the bias row of the μ head;
        // set that bias to x itself.
        let x = array![0.7, -0.4];
        let mut model = VaeModel::zeros(VaeConfig::with_dims(2, 3, 2)).unwrap();
        model.gen.mu = AffineLayer::from_parts(Array2::zeros((3, 2)), x.clone()).unwrap();
        // Zero inference net => q = prior, and eps = 0 puts h exactly at 0.
        let eps = array![0.0, 0.0];
        let ws = analytic_gradients(&model, x.view(), eps.view(), 1.0).unwrap();
        assert_eq!(ws.a, Array1::zeros(2));
        assert_eq!(ws.grads.gen_mu, Array2::zeros((4, 2)));
    }

    #[test]
    fn prior_posterior_zeroes_kl_terms() {
        // Zero inference net: μ_r = 0, τ_r = 1 => R = 0 and the β μ_r term in
        // the inf.mu gradient vanishes.
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut model = random_model(&mut rng, 2, 3, 2);
        model.inf = crate::model::InferenceNet {
            v: AffineLayer::zeros(2, 3),
            mu: AffineLayer::zeros(3, 2),
            tau: AffineLayer::zeros(3, 2),
        };
        let x = array![0.5, 0.5];
        let eps = array![0.3, -0.8];
        let ws = analytic_gradients(&model, x.view(), eps.view(), 1.0).unwrap();
        assert_eq!(ws.r, Array1::zeros(2));
        // With μ_r = 0 the inf.mu gradient is ỹᵀ S exactly.
        let y_aug = augment(Array1::zeros(3).view());
        let expect = outer(y_aug.view(), ws.s.view());
        assert_eq!(ws.grads.inf_mu, expect);
    }

    #[test]
    fn kl_terms_scale_linearly_in_beta() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let model = random_model(&mut rng, 3, 3, 3);
        let x = standard_normal_vec(&mut rng, 3);
        let eps = standard_normal_vec(&mut rng, 3);
        let g0 = analytic_gradients(&model, x.view(), eps.view(), 0.0 + f64::MIN_POSITIVE).unwrap();
        let g1 = analytic_gradients(&model, x.view(), eps.view(), 1.0).unwrap();
        let g2 = analytic_gradients(&model, x.view(), eps.view(), 2.0).unwrap();
        for (((_, a0), (_, a1)), (_, a2)) in g0
            .grads
            .blocks()
            .iter()
            .zip(g1.grads.blocks().iter())
            .zip(g2.grads.blocks().iter())
        {
            for ((&v0, &v1), &v2) in a0.iter().zip(a1.iter()).zip(a2.iter()) {
                let lhs = v2 - v0;
                let rhs = 2.0 * (v1 - v0);
                assert!(
                    (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1.0),
                    "beta linearity violated: {lhs} vs {rhs}"
                );
            }
        }
    }

    #[test]
    fn elbo_kl_vanishes_when_posterior_is_prior() {
        let mut model = VaeModel::zeros(VaeConfig::with_dims(2, 2, 2)).unwrap();
        // Give the generative side some structure; inference stays zero.
        model.gen.mu = AffineLayer::from_parts(array![[0.5, 0.0], [0.0, 0.5]], array![0.1, -0.1])
            .unwrap();
        let x = array![0.2, -0.4];
        let eps = vec![array![0.5, -0.5], array![-1.0, 0.3]];
        let e = elbo_estimate(&model, x.view(), &eps, 1.0).unwrap();
        assert_eq!(e.kl, 0.0);
        assert_eq!(e.total, e.recon);
    }

    #[test]
    fn elbo_beta_zero_drops_kl() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let model = random_model(&mut rng, 2, 3, 2);
        let x = standard_normal_vec(&mut rng, 2);
        let eps = vec![standard_normal_vec(&mut rng, 2)];
        let e = elbo_estimate(&model, x.view(), &eps, 0.0).unwrap();
        assert!(e.kl > 0.0);
        assert_eq!(e.total, e.recon);
    }

    #[test]
    fn elbo_recon_matches_quadrature() {
        // 1-D model: E_q[log p(x|h)] by trapezoid quadrature over ±8 posterior
        // std vs the K-sample Monte-Carlo estimate.
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let model = random_model(&mut rng, 1, 2, 1);
        let x = array![0.8];
        let k = 10_000usize;
        let mut eps = Vec::with_capacity(k);
        let mut draws = Vec::with_capacity(k);
        let (_, q) = infer_forward(x.view(), &model.inf).unwrap();
        for _ in 0..k {
            let e = standard_normal_vec(&mut rng, 1);
            let h = reparam_sample(&q, e.view()).unwrap();
            let (_, p) = gen_forward(h.view(), &model.gen).unwrap();
            draws.push(log_density_diag(x.view(), &p).unwrap());
            eps.push(e);
        }
        let est = elbo_estimate(&model, x.view(), &eps, 1.0).unwrap();
        let mean = draws.iter().sum::<f64>() / k as f64;
        assert!((est.recon - mean).abs() < 1e-12);
        let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (k as f64 - 1.0);
        let se = (var / k as f64).sqrt();

        let sigma = q.precision[0].powf(-0.5);
        let n_grid = 2000usize;
        let lo = q.mean[0] - 8.0 * sigma;
        let hi = q.mean[0] + 8.0 * sigma;
        let dh = (hi - lo) / (n_grid - 1) as f64;
        let mut quad = 0.0;
        for i in 0..n_grid {
            let hv = lo + i as f64 * dh;
            let h = array![hv];
            let (_, p) = gen_forward(h.view(), &model.gen).unwrap();
            let lp = log_density_diag(x.view(), &p).unwrap();
            let qdens = log_density_diag(h.view(), &q).unwrap().exp();
            let w = if i == 0 || i == n_grid - 1 { 0.5 } else { 1.0 };
            quad += w * qdens * lp * dh;
        }
        assert!(
            (est.recon - quad).abs() < 3.0 * se,
            "recon {} vs quadrature {} (se {se})",
            est.recon,
            quad
        );
    }

    #[test]
    fn rmsprop_gamma_one_is_sgd() {
        // Zero parameters make `after - before` exact.
        let model = VaeModel::zeros(VaeConfig::with_dims(2, 2, 2)).unwrap();
        let mut grads = BlockGrads::zeros_like(&model);
        grads.gen_mu.fill(0.25);
        grads.inf_v.fill(-2.0);
        let state = RmsPropState {
            gamma: 1.0,
            eta: 0.1,
            ..RmsPropState::new(&model, 1.0, 0.1)
        };
        let (m2, s2) = rmsprop_step(&model, &grads, &state).unwrap();
        assert_eq!(s2.ms.gen_mu, state.ms.gen_mu);
        let scale = 0.1 / (1.0f64 + 1e-8).sqrt();
        for (after, before) in m2
            .gen
            .mu
            .augmented()
            .iter()
            .zip(model.gen.mu.augmented().iter())
        {
            assert_eq!(after - before, scale * 0.25);
        }
        for (after, before) in m2
            .inf
            .v
            .augmented()
            .iter()
            .zip(model.inf.v.augmented().iter())
        {
            assert_eq!(after - before, scale * -2.0);
        }
    }

    #[test]
    fn rmsprop_gamma_zero_self_normalizes() {
        let model = VaeModel::zeros(VaeConfig::with_dims(1, 1, 1)).unwrap();
        let mut grads = BlockGrads::zeros_like(&model);
        grads.gen_mu.fill(3.0);
        let state = RmsPropState::new(&model, 0.0, 0.01);
        let (m2, s2) = rmsprop_step(&model, &grads, &state).unwrap();
        // ms' = g², step = η g / sqrt(g² + ε) ≈ η.
        assert_eq!(s2.ms.gen_mu[(0, 0)], 9.0);
        let delta = m2.gen.mu.augmented()[(0, 0)] - model.gen.mu.augmented()[(0, 0)];
        assert!((delta - 0.01).abs() < 1e-8);
    }

    #[test]
    fn rmsprop_hand_worked_update() {
        let model = VaeModel::zeros(VaeConfig::with_dims(1, 1, 1)).unwrap();
        let mut grads = BlockGrads::zeros_like(&model);
        grads.gen_mu.fill(2.0);
        let state = RmsPropState::new(&model, 0.9, 0.01);
        let (m2, s2) = rmsprop_step(&model, &grads, &state).unwrap();
        // ms' = 0.9·1 + 0.1·4 = 1.3; step = 0.01·2/sqrt(1.3 + 1e-8).
        assert!((s2.ms.gen_mu[(0, 0)] - 1.3).abs() < 1e-15);
        let delta = m2.gen.mu.augmented()[(0, 0)] - model.gen.mu.augmented()[(0, 0)];
        assert!((delta - 0.01 * 2.0 / (1.3f64 + 1e-8).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn minibatch_gradient_is_mean_of_per_sample_gradients() {
        let mut rng = ChaCha12Rng::seed_from_u64(100);
        let model = random_model(&mut rng, 2, 2, 2);
        let xs: Vec<Array1<f64>> = (0..5).map(|_| standard_normal_vec(&mut rng, 2)).collect();
        let eps: Vec<Array1<f64>> = (0..5).map(|_| standard_normal_vec(&mut rng, 2)).collect();
        let mut acc = BlockGrads::zeros_like(&model);
        for (x, e) in xs.iter().zip(eps.iter()) {
            let ws = analytic_gradients(&model, x.view(), e.view(), 1.0).unwrap();
            acc.add_assign(&ws.grads);
        }
        acc.scale(1.0 / 5.0);
        // Summing per-sample gradients left-to-right then dividing is exactly
        // what fit() does; verify that equals the mean computed independently
        // entry by entry.
        let mut manual = BlockGrads::zeros_like(&model);
        let all: Vec<GradientWorkspace> = xs
            .iter()
            .zip(eps.iter())
            .map(|(x, e)| analytic_gradients(&model, x.view(), e.view(), 1.0).unwrap())
            .collect();
        for ws in &all {
            manual.add_assign(&ws.grads);
        }
        manual.scale(0.2);
        assert_eq!(acc.gen_v, manual.gen_v);
        assert_eq!(acc.inf_tau, manual.inf_tau);
    }

    #[test]
    fn fit_improves_elbo_on_toy_gaussian() {
        let mut rng = ChaCha12Rng::seed_from_u64(404);
        let train: Vec<Array1<f64>> = (0..500).map(|_| standard_normal_vec(&mut rng, 2)).collect();
        let config = VaeConfig {
            beta: 1.0,
            k_train: 1,
            minibatch: 50,
            gamma: 0.9,
            eta: 5e-3,
            seed: 2,
            ..VaeConfig::with_dims(2, 4, 2)
        };
        let opts = TrainOptions {
            max_iters: 50,
            eval_every: 0,
            patience: 3,
        };
        let (_, report) = fit(&train, None, &config, &opts).unwrap();
        let per_epoch = 500usize.div_ceil(50);
        let first: f64 = report.iters[..5 * per_epoch]
            .iter()
            .map(|r| r.elbo)
            .sum::<f64>()
            / (5 * per_epoch) as f64;
        let n = report.iters.len();
        let last: f64 = report.iters[n - 5 * per_epoch..]
            .iter()
            .map(|r| r.elbo)
            .sum::<f64>()
            / (5 * per_epoch) as f64;
        assert!(
            last > first,
            "ELBO failed to improve: first {first}, last {last}"
        );
    }

    #[test]
    fn fit_zero_epochs_returns_init() {
        let train = vec![array![0.0, 0.0], array![1.0, 1.0]];
        let config = VaeConfig {
            seed: 7,
            ..VaeConfig::with_dims(2, 2, 2)
        };
        let opts = TrainOptions {
            max_iters: 0,
            ..Default::default()
        };
        let (model, report) = fit(&train, None, &config, &opts).unwrap();
        assert_eq!(model, init_params(&config).unwrap());
        assert!(report.iters.is_empty());
        assert_eq!(report.iterations, 0);
    }

    #[test]
    fn fit_is_deterministic() {
        let mut rng = ChaCha12Rng::seed_from_u64(88);
        let train: Vec<Array1<f64>> = (0..80).map(|_| standard_normal_vec(&mut rng, 2)).collect();
        let config = VaeConfig {
            minibatch: 16,
            eta: 1e-3,
            seed: 31,
            ..VaeConfig::with_dims(2, 3, 2)
        };
        let opts = TrainOptions {
            max_iters: 5,
            ..Default::default()
        };
        let (m1, r1) = fit(&train, None, &config, &opts).unwrap();
        let (m2, r2) = fit(&train, None, &config, &opts).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(r1.iters, r2.iters);
    }

    #[test]
    fn fit_rejects_empty_and_mismatched_input() {
        let config = VaeConfig::with_dims(2, 2, 2);
        let opts = TrainOptions::default();
        assert!(fit(&[], None, &config, &opts).is_err());
        let bad = vec![array![1.0, 2.0, 3.0]];
        assert!(fit(&bad, None, &config, &opts).is_err());
    }

    #[test]
    fn single_draw_gradient_is_unbiased() {
        // Mean of analytic per-draw gradients over fresh ε equals the
        // ε-averaged finite-difference gradient (estimated with an
        // independent fixed draw set), within Monte-Carlo error.
        let mut rng = ChaCha12Rng::seed_from_u64(60);
        let model = random_model(&mut rng, 2, 2, 2);
        let x = standard_normal_vec(&mut rng, 2);
        let n = 10_000usize;

        let mut mean = BlockGrads::zeros_like(&model);
        let mut sq = BlockGrads::zeros_like(&model);
        for _ in 0..n {
            let eps = standard_normal_vec(&mut rng, 2);
            let ws = analytic_gradients(&model, x.view(), eps.view(), 1.0).unwrap();
            for (dst, src) in [
                (&mut mean.gen_v, &ws.grads.gen_v),
                (&mut mean.gen_mu, &ws.grads.gen_mu),
                (&mut mean.gen_tau, &ws.grads.gen_tau),
                (&mut mean.inf_v, &ws.grads.inf_v),
                (&mut mean.inf_mu, &ws.grads.inf_mu),
                (&mut mean.inf_tau, &ws.grads.inf_tau),
            ] {
                *dst += src;
            }
            for (dst, src) in [
                (&mut sq.gen_v, &ws.grads.gen_v),
                (&mut sq.gen_mu, &ws.grads.gen_mu),
                (&mut sq.gen_tau, &ws.grads.gen_tau),
                (&mut sq.inf_v, &ws.grads.inf_v),
                (&mut sq.inf_mu, &ws.grads.inf_mu),
                (&mut sq.inf_tau, &ws.grads.inf_tau),
            ] {
                *dst += &src.mapv(|v| v * v);
            }
        }
        mean.scale(1.0 / n as f64);
        sq.scale(1.0 / n as f64);

        // Independent ε set for the finite-difference side.
        let eps_fd: Vec<Array1<f64>> = (0..n).map(|_| standard_normal_vec(&mut rng, 2)).collect();
        let step = 1e-4;
        let mut fd_mean = BlockGrads::zeros_like(&model);
        for eps in &eps_fd {
            let fd = finite_diff_grads(&model, x.view(), eps, 1.0, step);
            fd_mean.add_assign(&fd);
        }
        fd_mean.scale(1.0 / n as f64);

        for (((name, m), (_, s2)), (_, f)) in mean
            .blocks()
            .iter()
            .zip(sq.blocks().iter())
            .zip(fd_mean.blocks().iter())
        {
            for ((&mv, &sv), &fv) in m.iter().zip(s2.iter()).zip(f.iter()) {
                let var = (sv - mv * mv).max(0.0);
                // Both sides are n-sample means; allow 3 combined standard
                // errors plus FD truncation slack.
                let se = (2.0 * var / n as f64).sqrt();
                assert!(
                    (mv - fv).abs() <= 3.0 * se + 1e-6,
                    "block {name}: mc {mv} vs fd {fv} (se {se})"
                );
            }
        }
    }

    #[test]
    fn gradient_error_names_offending_block() {
        let mut model = VaeModel::zeros(VaeConfig::with_dims(1, 1, 1)).unwrap();
        model.gen.mu = AffineLayer::from_parts(array![[0.0]], array![1e308]).unwrap();
        let err =
            analytic_gradients(&model, array![0.0].view(), array![0.1].view(), 1.0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("block gen.") || msg.contains("block inf."), "{msg}");
    }
}
