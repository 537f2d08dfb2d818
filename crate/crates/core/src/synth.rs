//! Seeded synthetic corpora: a two-covariance Gaussian speaker corpus for
//! verification experiments and 2-D multi-cluster data for the capture study.
//! Everything regenerates bitwise-identically from its seed.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::model::{gen_forward, reparam_sample, standard_normal_vec, VaeModel};
use crate::plda::LabeledCorpus;
use crate::scoring::{Trial, TrialLabel, TrialSet};
use crate::seeds;

/// Covariance specification for the generators.
#[derive(Debug, Clone, PartialEq)]
pub enum CovSpec {
    /// Diagonal with the given variances.
    Diag(Array1<f64>),
    /// Full symmetric positive-definite matrix.
    Full(Array2<f64>),
}

impl CovSpec {
    /// `v · I` in `dim` dimensions.
    pub fn iso(dim: usize, v: f64) -> CovSpec {
        CovSpec::Diag(Array1::from_elem(dim, v))
    }

    /// Uniform-correlation matrix: variance `v` on the diagonal and
    /// correlation `rho` everywhere else.
    pub fn correlated(dim: usize, v: f64, rho: f64) -> CovSpec {
        let mut m = Array2::from_elem((dim, dim), v * rho);
        for i in 0..dim {
            m[(i, i)] = v;
        }
        CovSpec::Full(m)
    }

    /// `Q diag(spectrum) Qᵀ` with a seeded random orthogonal `Q`, giving a
    /// covariance whose eigenvalues are prescribed but whose eigendirections
    /// are not axis-aligned.
    pub fn rotated_spectrum(spectrum: &Array1<f64>, seed: u64) -> Result<CovSpec> {
        let d = spectrum.len();
        if spectrum.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::domain("spectrum entries must be > 0"));
        }
        // Eigenvectors of a seeded random symmetric matrix form the rotation.
        let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(seed, "rotation"));
        let mut sym = Array2::zeros((d, d));
        for i in 0..d {
            for j in 0..=i {
                let v: f64 = standard_normal_vec(&mut rng, 1)[0];
                sym[(i, j)] = v;
                sym[(j, i)] = v;
            }
        }
        let (_, q) = crate::linalg::eigh(&sym)?;
        let mut cov = Array2::zeros((d, d));
        for i in 0..d {
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += q[(i, k)] * spectrum[k] * q[(j, k)];
                }
                cov[(i, j)] = acc;
            }
        }
        Ok(CovSpec::Full(cov))
    }

    pub fn dim(&self) -> usize {
        match self {
            CovSpec::Diag(v) => v.len(),
            CovSpec::Full(m) => m.nrows(),
        }
    }

    fn validate(&self, dim: usize, allow_zero: bool) -> Result<()> {
        if self.dim() != dim {
            return Err(Error::shape(format!(
                "covariance is {}-dimensional, expected {dim}",
                self.dim()
            )));
        }
        if let CovSpec::Diag(v) = self {
            let bad = v
                .iter()
                .any(|&x| !x.is_finite() || x < 0.0 || (!allow_zero && x == 0.0));
            if bad {
                return Err(Error::domain("diagonal covariance entries must be positive"));
            }
        }
        Ok(())
    }
}

/// Draws from N(0, cov).
struct CovSampler {
    kind: SamplerKind,
}

enum SamplerKind {
    Diag(Array1<f64>),
    Full(Array2<f64>),
}

impl CovSampler {
    fn new(cov: &CovSpec) -> Result<CovSampler> {
        let kind = match cov {
            CovSpec::Diag(v) => SamplerKind::Diag(v.mapv(f64::sqrt)),
            CovSpec::Full(m) => SamplerKind::Full(Cholesky::factor(m)?.l().to_owned()),
        };
        Ok(CovSampler { kind })
    }

    fn draw(&self, rng: &mut ChaCha12Rng) -> Array1<f64> {
        match &self.kind {
            SamplerKind::Diag(sd) => {
                let mut x = standard_normal_vec(rng, sd.len());
                for (v, &s) in x.iter_mut().zip(sd) {
                    *v *= s;
                }
                x
            }
            SamplerKind::Full(l) => {
                let eps = standard_normal_vec(rng, l.nrows());
                let mut x = Array1::zeros(l.nrows());
                for i in 0..l.nrows() {
                    let mut acc = 0.0;
                    for j in 0..=i {
                        acc += l[(i, j)] * eps[j];
                    }
                    x[i] = acc;
                }
                x
            }
        }
    }
}

/// Shape of a two-covariance speaker corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub n_speakers: usize,
    pub sessions_per_speaker: usize,
    pub dim: usize,
    pub b_cov: CovSpec,
    pub w_cov: CovSpec,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers == 0 || self.sessions_per_speaker == 0 || self.dim == 0 {
            return Err(Error::Config("corpus counts must be positive".into()));
        }
        self.b_cov.validate(self.dim, true)?;
        self.w_cov.validate(self.dim, false)?;
        Ok(())
    }
}

/// Generates speaker means `y_s ~ N(0, B)` and sessions `x ~ N(y_s, W)`.
/// Speaker ids carry the given prefix so corpora drawn for different splits
/// cannot collide.
pub fn gen_two_cov_corpus(spec: &CorpusSpec, id_prefix: &str) -> Result<LabeledCorpus> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(spec.seed, id_prefix));
    let b = CovSampler::new(&spec.b_cov)?;
    let w = CovSampler::new(&spec.w_cov)?;
    let mut corpus = LabeledCorpus::default();
    for s in 0..spec.n_speakers {
        let speaker = format!("{id_prefix}s{s:05}");
        let y = b.draw(&mut rng);
        for u in 0..spec.sessions_per_speaker {
            let x = &y + &w.draw(&mut rng);
            corpus.ids.push(format!("{speaker}-u{u:03}"));
            corpus.speakers.push(speaker.clone());
            corpus.vectors.push(x);
        }
    }
    Ok(corpus)
}

/// Partitions a corpus into disjoint-by-speaker pieces of the given sizes
/// (in speakers), assigned by a seeded shuffle of the speaker list.
pub fn split_by_speaker(
    corpus: &LabeledCorpus,
    counts: &[usize],
    seed: u64,
) -> Result<Vec<LabeledCorpus>> {
    let by = corpus.by_speaker();
    let total: usize = counts.iter().sum();
    if total > by.len() {
        return Err(Error::InsufficientData(format!(
            "split wants {total} speakers, corpus has {}",
            by.len()
        )));
    }
    let mut order: Vec<usize> = (0..by.len()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(seed, "speaker-split"));
    order.shuffle(&mut rng);
    let mut out = Vec::with_capacity(counts.len());
    let mut cursor = 0;
    for &want in counts {
        let mut part = LabeledCorpus::default();
        for &spk_idx in &order[cursor..cursor + want] {
            for &i in &by[spk_idx].1 {
                part.ids.push(corpus.ids[i].clone());
                part.speakers.push(corpus.speakers[i].clone());
                part.vectors.push(corpus.vectors[i].clone());
            }
        }
        cursor += want;
        out.push(part);
    }
    Ok(out)
}

/// Builds a balanced trial set: `n_trials/2` same-speaker pairs and
/// `n_trials/2` cross-speaker pairs, drawn by seeded shuffles.
pub fn make_balanced_trials(
    corpus: &LabeledCorpus,
    n_trials: usize,
    seed: u64,
) -> Result<TrialSet> {
    let by = corpus.by_speaker();
    let multi: Vec<usize> = (0..by.len()).filter(|&s| by[s].1.len() >= 2).collect();
    if multi.is_empty() {
        return Err(Error::InsufficientData(
            "no target pairs: every speaker has a single session".into(),
        ));
    }
    if by.len() < 2 {
        return Err(Error::InsufficientData(
            "need at least two speakers for impostor pairs".into(),
        ));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(seed, "trials"));
    let n_target = n_trials / 2;
    let n_impostor = n_trials - n_target;
    let mut trials = Vec::with_capacity(n_trials);

    let mut speaker_order = multi.clone();
    speaker_order.shuffle(&mut rng);
    for t in 0..n_target {
        let s = speaker_order[t % speaker_order.len()];
        let sessions = &by[s].1;
        let i = rng.random_range(0..sessions.len());
        let j = {
            let mut j = rng.random_range(0..sessions.len() - 1);
            if j >= i {
                j += 1;
            }
            j
        };
        trials.push(Trial::new(
            corpus.ids[sessions[i]].clone(),
            corpus.ids[sessions[j]].clone(),
            TrialLabel::Target,
        ));
    }
    for _ in 0..n_impostor {
        let a = rng.random_range(0..by.len());
        let b = {
            let mut b = rng.random_range(0..by.len() - 1);
            if b >= a {
                b += 1;
            }
            b
        };
        let ia = by[a].1[rng.random_range(0..by[a].1.len())];
        let ib = by[b].1[rng.random_range(0..by[b].1.len())];
        trials.push(Trial::new(
            corpus.ids[ia].clone(),
            corpus.ids[ib].clone(),
            TrialLabel::Impostor,
        ));
    }
    Ok(TrialSet { trials })
}

/// Shape of the 2-D cluster corpus used for the capture study.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub n_clusters: usize,
    pub points_per_cluster: usize,
    /// Standard deviation of the cluster-center distribution N(0, spread²·I).
    pub cluster_spread: f64,
    /// Within-cluster covariance (2×2, possibly correlated).
    pub within_cov: Array2<f64>,
    pub seed: u64,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 {
            return Err(Error::Config("need at least one cluster".into()));
        }
        if self.within_cov.dim() != (2, 2) {
            return Err(Error::shape("within_cov must be 2x2"));
        }
        if !(self.cluster_spread > 0.0) {
            return Err(Error::Config("cluster_spread must be > 0".into()));
        }
        Ok(())
    }

    /// Default capture radius: twice the largest within-cluster standard
    /// deviation (2·√λ_max).
    pub fn default_capture_radius(&self) -> f64 {
        let a = self.within_cov[(0, 0)];
        let b = self.within_cov[(0, 1)];
        let d = self.within_cov[(1, 1)];
        let tr = a + d;
        let det = a * d - b * b;
        let lam_max = 0.5 * (tr + (tr * tr - 4.0 * det).max(0.0).sqrt());
        2.0 * lam_max.sqrt()
    }
}

/// Generated 2-D cluster data with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster2d {
    pub points: Vec<Array1<f64>>,
    /// Cluster index of each point.
    pub labels: Vec<usize>,
    pub centers: Vec<Array1<f64>>,
}

/// Draws cluster centers from N(0, spread²·I₂) and points from
/// N(center, within_cov).
pub fn gen_cluster_2d(spec: &ClusterSpec) -> Result<Cluster2d> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(spec.seed, "cluster2d"));
    let within = CovSampler::new(&CovSpec::Full(spec.within_cov.clone()))?;
    let mut out = Cluster2d {
        points: Vec::with_capacity(spec.n_clusters * spec.points_per_cluster),
        labels: Vec::new(),
        centers: Vec::with_capacity(spec.n_clusters),
    };
    for c in 0..spec.n_clusters {
        let center = standard_normal_vec(&mut rng, 2).mapv(|v| v * spec.cluster_spread);
        for _ in 0..spec.points_per_cluster {
            let x = &center + &within.draw(&mut rng);
            out.points.push(x);
            out.labels.push(c);
        }
        out.centers.push(center);
    }
    Ok(out)
}

/// Fraction of cluster centers that receive at least one generated sample
/// within `radius` (ancestral sampling: h ~ N(0,I), then x ~ p(x|h)).
pub fn capture_score(
    clusters: &Cluster2d,
    model: &VaeModel,
    n_gen: usize,
    radius: f64,
    seed: u64,
) -> Result<f64> {
    if model.config.d_x != 2 {
        return Err(Error::shape(format!(
            "capture study expects a 2-D model, got d_x = {}",
            model.config.d_x
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(seed, "capture"));
    let mut samples = Vec::with_capacity(n_gen);
    for _ in 0..n_gen {
        let h = standard_normal_vec(&mut rng, model.config.d_h);
        let (_, p) = gen_forward(h.view(), &model.gen)?;
        let eps = standard_normal_vec(&mut rng, 2);
        samples.push(reparam_sample(&p, eps.view())?);
    }
    Ok(capture_fraction(&clusters.centers, &samples, radius))
}

/// Fraction of centers with at least one sample within `radius`.
pub fn capture_fraction(centers: &[Array1<f64>], samples: &[Array1<f64>], radius: f64) -> f64 {
    if centers.is_empty() {
        return 0.0;
    }
    let r2 = radius * radius;
    let mut hit = 0usize;
    for c in centers {
        let captured = samples.iter().any(|s| {
            let dx = s[0] - c[0];
            let dy = s[1] - c[1];
            dx * dx + dy * dy <= r2
        });
        if captured {
            hit += 1;
        }
    }
    hit as f64 / centers.len() as f64
}
