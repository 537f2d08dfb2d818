//! Two-covariance PLDA baseline: EM training on speaker-labeled vectors and
//! the closed-form verification log-likelihood ratio.
//!
//! Model: speaker mean `y_s ~ N(mu, B)`, session `x ~ N(y_s, W)`. The global
//! mean is fixed to the sample mean; EM re-estimates B from the posterior
//! speaker-mean scatter and W from the residual scatter. In diagonal mode
//! both covariances are constrained diagonal at every M-step.
//!
//! Scoring uses the exchangeable-pair identity: with `a = x1 − mu`,
//! `c = x2 − mu`, `u = a + c`, `v = a − c`,
//!
//! ```text
//! log N([x1,x2]; [mu,mu], [[B+W, B], [B, B+W]])
//!   = −d ln 2π − ½ ln|2B+W| − ½ ln|W| − ¼ [uᵀ(2B+W)⁻¹u + vᵀW⁻¹v]
//! ```
//!
//! which makes `plda_llr(x1,x2) = plda_llr(x2,x1)` hold bit-exactly (u is
//! symmetric in the pair and v only flips sign).

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::eval::{compute_eer, compute_min_dcf, labeled_scores, CostParams};
use crate::linalg::{dot, matvec, outer, Cholesky, LN_2PI};
use crate::scoring::{ScoreSet, ScoredTrial, TrialSet};

/// Covariance storage: a variance vector in diagonal mode, a full symmetric
/// matrix otherwise.
#[derive(Debug, Clone, PartialEq)]
pub enum PldaCov {
    Diag(Array1<f64>),
    Full(Array2<f64>),
}

impl PldaCov {
    pub fn dim(&self) -> usize {
        match self {
            PldaCov::Diag(v) => v.len(),
            PldaCov::Full(m) => m.nrows(),
        }
    }
}

/// Covariance constraint used when fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovMode {
    Diag,
    Full,
}

impl CovMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            CovMode::Diag => "diag",
            CovMode::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<CovMode> {
        match s {
            "diag" => Some(CovMode::Diag),
            "full" => Some(CovMode::Full),
            _ => None,
        }
    }
}

/// Fitted two-covariance model.
#[derive(Debug, Clone, PartialEq)]
pub struct PldaTwoCov {
    pub mu: Array1<f64>,
    pub b_cov: PldaCov,
    pub w_cov: PldaCov,
}

impl PldaTwoCov {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mode(&self) -> CovMode {
        match self.b_cov {
            PldaCov::Diag(_) => CovMode::Diag,
            PldaCov::Full(_) => CovMode::Full,
        }
    }

    /// Between-cov must be positive semidefinite and within-cov positive
    /// definite (diagonal entries checked in diag mode; full-mode scoring
    /// surfaces indefiniteness through the Cholesky factorizations).
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.b_cov.dim() != d || self.w_cov.dim() != d {
            return Err(Error::shape(format!(
                "plda covariances must be {d}-dimensional"
            )));
        }
        match (&self.b_cov, &self.w_cov) {
            (PldaCov::Diag(b), PldaCov::Diag(w)) => {
                if b.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                    return Err(Error::domain("between-speaker variance must be >= 0"));
                }
                if w.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                    return Err(Error::domain("within-speaker variance must be > 0"));
                }
                Ok(())
            }
            (PldaCov::Full(_), PldaCov::Full(_)) => Ok(()),
            _ => Err(Error::shape(
                "between and within covariances must share storage mode",
            )),
        }
    }
}

/// Speaker-labeled vectors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledCorpus {
    pub ids: Vec<String>,
    pub speakers: Vec<String>,
    pub vectors: Vec<Array1<f64>>,
}

impl LabeledCorpus {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map(|v| v.len()).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ids.len() != self.vectors.len() || self.speakers.len() != self.vectors.len() {
            return Err(Error::shape("ids/speakers/vectors lengths differ"));
        }
        let d = self.dim();
        for (i, v) in self.vectors.iter().enumerate() {
            if v.len() != d {
                return Err(Error::shape(format!(
                    "vector {i} has length {}, expected {d}",
                    v.len()
                )));
            }
        }
        Ok(())
    }

    /// Indices grouped by speaker, in order of first appearance.
    pub fn by_speaker(&self) -> Vec<(String, Vec<usize>)> {
        let mut order: Vec<String> = Vec::new();
        let mut groups: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, spk) in self.speakers.iter().enumerate() {
            if !groups.contains_key(spk) {
                order.push(spk.clone());
            }
            groups.entry(spk.clone()).or_default().push(i);
        }
        order
            .into_iter()
            .map(|spk| {
                let idx = groups.remove(&spk).unwrap();
                (spk, idx)
            })
            .collect()
    }

    /// Lookup map from vector id to vector.
    pub fn vector_map(&self) -> HashMap<String, Array1<f64>> {
        self.ids
            .iter()
            .cloned()
            .zip(self.vectors.iter().cloned())
            .collect()
    }
}

fn global_mean(corpus: &LabeledCorpus) -> Array1<f64> {
    let d = corpus.dim();
    let mut mu = Array1::zeros(d);
    for v in &corpus.vectors {
        mu += v;
    }
    mu / corpus.len() as f64
}

struct Grouped {
    /// Per speaker: session count and session sum.
    sizes: Vec<usize>,
    sums: Vec<Array1<f64>>,
    members: Vec<Vec<usize>>,
}

fn group(corpus: &LabeledCorpus) -> Grouped {
    let by = corpus.by_speaker();
    let mut sizes = Vec::with_capacity(by.len());
    let mut sums = Vec::with_capacity(by.len());
    let mut members = Vec::with_capacity(by.len());
    for (_, idx) in by {
        let mut sum = Array1::zeros(corpus.dim());
        for &i in &idx {
            sum += &corpus.vectors[i];
        }
        sizes.push(idx.len());
        sums.push(sum);
        members.push(idx);
    }
    Grouped {
        sizes,
        sums,
        members,
    }
}

fn check_preconditions(corpus: &LabeledCorpus, mode: CovMode) -> Result<Grouped> {
    corpus.validate()?;
    if corpus.is_empty() {
        return Err(Error::InsufficientData("empty corpus".into()));
    }
    let g = group(corpus);
    if g.sizes.len() < 2 {
        return Err(Error::InsufficientData(
            "need at least two speakers to separate between/within variability".into(),
        ));
    }
    if !g.sizes.iter().any(|&n| n >= 2) {
        return Err(Error::InsufficientData(
            "insufficient within-speaker data: every speaker has a single session".into(),
        ));
    }
    if mode == CovMode::Full && corpus.len() <= corpus.dim() {
        return Err(Error::InsufficientData(format!(
            "full-covariance fit needs more than {} vectors",
            corpus.dim()
        )));
    }
    Ok(g)
}

/// Fits the two-covariance model by EM. See the module docs for the E/M
/// formulas; `iters` EM iterations are run from the total-covariance split
/// initialization B₀ = W₀ = ½·total.
pub fn fit_two_cov(corpus: &LabeledCorpus, mode: CovMode, iters: usize) -> Result<PldaTwoCov> {
    Ok(fit_two_cov_traced(corpus, mode, iters)?.0)
}

/// As [`fit_two_cov`], additionally returning the observed-data log-likelihood
/// evaluated after each EM iteration (non-decreasing).
pub fn fit_two_cov_traced(
    corpus: &LabeledCorpus,
    mode: CovMode,
    iters: usize,
) -> Result<(PldaTwoCov, Vec<f64>)> {
    let g = check_preconditions(corpus, mode)?;
    let d = corpus.dim();
    let n_total = corpus.len();
    let mu = global_mean(corpus);

    // Total scatter about the global mean.
    let mut total = Array2::<f64>::zeros((d, d));
    for v in &corpus.vectors {
        let c = v - &mu;
        total += &outer(c.view(), c.view());
    }
    total /= n_total as f64;

    let mut model = match mode {
        CovMode::Diag => {
            let diag = total.diag().to_owned();
            PldaTwoCov {
                mu: mu.clone(),
                b_cov: PldaCov::Diag(diag.mapv(|v| 0.5 * v)),
                w_cov: PldaCov::Diag(diag.mapv(|v| 0.5 * v)),
            }
        }
        CovMode::Full => PldaTwoCov {
            mu: mu.clone(),
            b_cov: PldaCov::Full(total.mapv(|v| 0.5 * v)),
            w_cov: PldaCov::Full(total.mapv(|v| 0.5 * v)),
        },
    };

    let mut history = Vec::with_capacity(iters);
    for _ in 0..iters {
        model = em_iteration(corpus, &g, &model)?;
        history.push(log_likelihood_grouped(corpus, &g, &model)?);
    }
    Ok((model, history))
}

fn em_iteration(corpus: &LabeledCorpus, g: &Grouped, model: &PldaTwoCov) -> Result<PldaTwoCov> {
    let d = corpus.dim();
    let n_total = corpus.len() as f64;
    let n_spk = g.sizes.len() as f64;
    let mu = &model.mu;

    match (&model.b_cov, &model.w_cov) {
        (PldaCov::Diag(b), PldaCov::Diag(w)) => {
            for (j, (&bj, &wj)) in b.iter().zip(w.iter()).enumerate() {
                if !(bj > 0.0) || !(wj > 0.0) {
                    return Err(Error::numeric(
                        "plda EM",
                        format!("singular covariance at dimension {j} (b={bj:e}, w={wj:e})"),
                    ));
                }
            }
            let mut b_new = Array1::<f64>::zeros(d);
            let mut w_new = Array1::<f64>::zeros(d);
            for (s, &n_s) in g.sizes.iter().enumerate() {
                let n_f = n_s as f64;
                for j in 0..d {
                    let lambda = 1.0 / b[j] + n_f / w[j];
                    let c_post = 1.0 / lambda;
                    let m = c_post * (mu[j] / b[j] + g.sums[s][j] / w[j]);
                    let dm = m - mu[j];
                    b_new[j] += c_post + dm * dm;
                    let mut resid = 0.0;
                    for &i in &g.members[s] {
                        let r = corpus.vectors[i][j] - m;
                        resid += r * r;
                    }
                    w_new[j] += resid + n_f * c_post;
                }
            }
            Ok(PldaTwoCov {
                mu: mu.clone(),
                b_cov: PldaCov::Diag(b_new.mapv(|v| v / n_spk)),
                w_cov: PldaCov::Diag(w_new.mapv(|v| v / n_total)),
            })
        }
        (PldaCov::Full(b), PldaCov::Full(w)) => {
            let b_inv = Cholesky::factor(b)?.inverse();
            let w_chol = Cholesky::factor(w)?;
            let w_inv = w_chol.inverse();
            // Posterior precision depends only on the session count.
            let mut cache: HashMap<usize, (Cholesky, Array2<f64>)> = HashMap::new();
            let mut b_new = Array2::<f64>::zeros((d, d));
            let mut w_new = Array2::<f64>::zeros((d, d));
            for (s, &n_s) in g.sizes.iter().enumerate() {
                if !cache.contains_key(&n_s) {
                    let lambda = &b_inv + &w_inv.mapv(|v| v * n_s as f64);
                    let chol = Cholesky::factor(&lambda)?;
                    let inv = chol.inverse();
                    cache.insert(n_s, (chol, inv));
                }
                let (chol, c_post) = &cache[&n_s];
                let rhs = matvec(b_inv.view(), mu.view()) + matvec(w_inv.view(), g.sums[s].view());
                let m = chol.solve(rhs.view());
                let dm = &m - mu;
                b_new += c_post;
                b_new += &outer(dm.view(), dm.view());
                for &i in &g.members[s] {
                    let r = &corpus.vectors[i] - &m;
                    w_new += &outer(r.view(), r.view());
                }
                w_new += &c_post.mapv(|v| v * n_s as f64);
            }
            Ok(PldaTwoCov {
                mu: mu.clone(),
                b_cov: PldaCov::Full(b_new.mapv(|v| v / n_spk)),
                w_cov: PldaCov::Full(w_new.mapv(|v| v / n_total)),
            })
        }
        _ => Err(Error::shape(
            "between and within covariances must share storage mode",
        )),
    }
}

/// Observed-data log-likelihood of the corpus under the model, integrating
/// the speaker means out analytically.
pub fn two_cov_log_likelihood(corpus: &LabeledCorpus, model: &PldaTwoCov) -> Result<f64> {
    let g = group(corpus);
    log_likelihood_grouped(corpus, &g, model)
}

fn log_likelihood_grouped(
    corpus: &LabeledCorpus,
    g: &Grouped,
    model: &PldaTwoCov,
) -> Result<f64> {
    let d = corpus.dim();
    let mu = &model.mu;
    let mut ll = 0.0;
    match (&model.b_cov, &model.w_cov) {
        (PldaCov::Diag(b), PldaCov::Diag(w)) => {
            for (s, &n_s) in g.sizes.iter().enumerate() {
                let n_f = n_s as f64;
                for j in 0..d {
                    let lambda = 1.0 / b[j] + n_f / w[j];
                    let rhs = mu[j] / b[j] + g.sums[s][j] / w[j];
                    let m = rhs / lambda;
                    let mut xx = 0.0;
                    for &i in &g.members[s] {
                        xx += corpus.vectors[i][j] * corpus.vectors[i][j];
                    }
                    ll += -0.5
                        * (n_f * LN_2PI
                            + b[j].ln()
                            + n_f * w[j].ln()
                            + lambda.ln()
                            + mu[j] * mu[j] / b[j]
                            + xx / w[j]
                            - m * rhs);
                }
            }
        }
        (PldaCov::Full(b), PldaCov::Full(w)) => {
            let b_chol = Cholesky::factor(b)?;
            let b_inv = b_chol.inverse();
            let w_chol = Cholesky::factor(w)?;
            let w_inv = w_chol.inverse();
            let mu_b_mu = dot(mu.view(), matvec(b_inv.view(), mu.view()).view());
            let mut cache: HashMap<usize, (Cholesky, f64)> = HashMap::new();
            for (s, &n_s) in g.sizes.iter().enumerate() {
                if !cache.contains_key(&n_s) {
                    let lambda = &b_inv + &w_inv.mapv(|v| v * n_s as f64);
                    let chol = Cholesky::factor(&lambda)?;
                    let logdet = chol.log_det();
                    cache.insert(n_s, (chol, logdet));
                }
                let (chol, lambda_logdet) = &cache[&n_s];
                let n_f = n_s as f64;
                let rhs = matvec(b_inv.view(), mu.view()) + matvec(w_inv.view(), g.sums[s].view());
                let m = chol.solve(rhs.view());
                let mut xwx = 0.0;
                for &i in &g.members[s] {
                    let x = &corpus.vectors[i];
                    xwx += dot(x.view(), matvec(w_inv.view(), x.view()).view());
                }
                ll += -0.5
                    * (n_f * d as f64 * LN_2PI
                        + b_chol.log_det()
                        + n_f * w_chol.log_det()
                        + lambda_logdet
                        + mu_b_mu
                        + xwx
                        - dot(m.view(), rhs.view()));
            }
        }
        _ => {
            return Err(Error::shape(
                "between and within covariances must share storage mode",
            ))
        }
    }
    Ok(ll)
}

fn llr_diag_dim(b: f64, w: f64, u: f64, v: f64, a: f64, c: f64) -> f64 {
    // 2x2 exchangeable block per dimension.
    let s = 2.0 * b + w;
    let t = b + w;
    let log_joint = -LN_2PI - 0.5 * (s.ln() + w.ln()) - 0.25 * (u * u / s + v * v / w);
    let log_m1 = -0.5 * (LN_2PI + t.ln() + a * a / t);
    let log_m2 = -0.5 * (LN_2PI + t.ln() + c * c / t);
    log_joint - (log_m1 + log_m2)
}

/// Closed-form verification LLR
/// `log N([x1,x2]; joint) − log N(x1) − log N(x2)`, symmetric in the pair.
pub fn plda_llr(model: &PldaTwoCov, x1: ArrayView1<f64>, x2: ArrayView1<f64>) -> Result<f64> {
    model.validate()?;
    let d = model.dim();
    if x1.len() != d || x2.len() != d {
        return Err(Error::shape(format!(
            "expected {d}-dimensional vectors, got {} and {}",
            x1.len(),
            x2.len()
        )));
    }
    match (&model.b_cov, &model.w_cov) {
        (PldaCov::Diag(b), PldaCov::Diag(w)) => {
            let mut llr = 0.0;
            for j in 0..d {
                let a = x1[j] - model.mu[j];
                let c = x2[j] - model.mu[j];
                llr += llr_diag_dim(b[j], w[j], a + c, a - c, a, c);
            }
            if !llr.is_finite() {
                return Err(Error::numeric("plda_llr", format!("score is {llr}")));
            }
            Ok(llr)
        }
        (PldaCov::Full(b), PldaCov::Full(w)) => {
            let a = &x1.to_owned() - &model.mu;
            let c = &x2.to_owned() - &model.mu;
            let u = &a + &c;
            let v = &a - &c;
            let sum_cov = &b.mapv(|x| 2.0 * x) + w;
            let tot_cov = b + w;
            let chol_sum = Cholesky::factor(&sum_cov)?;
            let chol_w = Cholesky::factor(w)?;
            let chol_tot = Cholesky::factor(&tot_cov)?;
            let log_joint = -(d as f64) * LN_2PI
                - 0.5 * (chol_sum.log_det() + chol_w.log_det())
                - 0.25 * (chol_sum.quad_form(u.view()) + chol_w.quad_form(v.view()));
            let log_m1 =
                -0.5 * (d as f64 * LN_2PI + chol_tot.log_det() + chol_tot.quad_form(a.view()));
            let log_m2 =
                -0.5 * (d as f64 * LN_2PI + chol_tot.log_det() + chol_tot.quad_form(c.view()));
            let llr = log_joint - (log_m1 + log_m2);
            if !llr.is_finite() {
                return Err(Error::numeric("plda_llr", format!("score is {llr}")));
            }
            Ok(llr)
        }
        _ => Err(Error::shape(
            "between and within covariances must share storage mode",
        )),
    }
}

/// Scores every trial with the closed-form PLDA LLR.
pub fn score_trials_plda(
    model: &PldaTwoCov,
    trials: &TrialSet,
    vectors: &HashMap<String, Array1<f64>>,
) -> Result<ScoreSet> {
    let mut scores = Vec::with_capacity(trials.len());
    for trial in &trials.trials {
        let enroll = vectors
            .get(&trial.enroll_id)
            .ok_or_else(|| Error::MissingId(trial.enroll_id.clone()))?;
        let test = vectors
            .get(&trial.test_id)
            .ok_or_else(|| Error::MissingId(trial.test_id.clone()))?;
        let score = plda_llr(model, test.view(), enroll.view())?;
        scores.push(ScoredTrial {
            trial: trial.clone(),
            score,
            k_used: 0,
        });
    }
    Ok(ScoreSet { scores })
}

/// Per-mode metrics from [`full_vs_diag_report`]. `None` when the trial list
/// was empty (EER undefined).
#[derive(Debug, Clone, PartialEq)]
pub struct ModeMetrics {
    pub eer: Option<f64>,
    pub min_dcf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullVsDiagReport {
    pub diag: ModeMetrics,
    pub full: ModeMetrics,
}

/// Fits both covariance modes on the training corpus and evaluates both on
/// the same trials.
pub fn full_vs_diag_report(
    train: &LabeledCorpus,
    eval_vectors: &HashMap<String, Array1<f64>>,
    trials: &TrialSet,
    iters: usize,
) -> Result<FullVsDiagReport> {
    let costs = CostParams::default();
    let mut metrics = Vec::with_capacity(2);
    for mode in [CovMode::Diag, CovMode::Full] {
        let model = fit_two_cov(train, mode, iters)?;
        if trials.is_empty() {
            metrics.push(ModeMetrics {
                eer: None,
                min_dcf: None,
            });
            continue;
        }
        let scores = score_trials_plda(&model, trials, eval_vectors)?;
        let (s, l) = labeled_scores(&scores);
        let (eer, _) = compute_eer(&s, &l)?;
        let (min_dcf, _) = compute_min_dcf(&s, &l, &costs)?;
        metrics.push(ModeMetrics {
            eer: Some(eer),
            min_dcf: Some(min_dcf),
        });
    }
    let full = metrics.pop().unwrap();
    let diag = metrics.pop().unwrap();
    Ok(FullVsDiagReport { diag, full })
}
