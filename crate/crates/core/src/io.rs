//! Text file formats: models, PLDA models, pipelines, vectors, trials,
//! scores, training configs, and the CSV reports.
//!
//! Matrix-bearing formats share one block layout — a `name rows cols` header
//! line followed by `rows` lines of floats printed with 17 significant
//! digits, which round-trips f64 bit-exactly. Writers emit `\n` newlines and
//! fixed formatting so identical inputs produce identical bytes.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::eval::DetCurve;
use crate::model::{AffineLayer, GenerativeNet, InferenceNet, VaeConfig, VaeModel};
use crate::plda::{LabeledCorpus, PldaCov, PldaTwoCov};
use crate::preprocess::{Pipeline, Whitening};
use crate::scoring::{ScoreSet, Trial, TrialLabel, TrialSet};
use crate::seeds;
use crate::training::{TrainOptions, TrainReport};

const MODEL_HEADER: &str = "vaeverif-model v1";
const PLDA_HEADER: &str = "vaeverif-plda v1";
const PIPELINE_HEADER: &str = "vaeverif-pipeline v1";
const VECTORS_HEADER: &str = "vaeverif-vectors v1";

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_err(file: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.display().to_string(),
        line,
        msg: msg.into(),
    }
}

struct LineParser<'a> {
    file: &'a Path,
    lines: Vec<&'a str>,
    pos: usize,
}

impl<'a> LineParser<'a> {
    fn new(file: &'a Path, text: &'a str) -> Self {
        LineParser {
            file,
            lines: text.lines().collect(),
            pos: 0,
        }
    }

    fn line_no(&self) -> usize {
        self.pos
    }

    fn next_line(&mut self) -> Result<&'a str> {
        while self.pos < self.lines.len() {
            let line = self.lines[self.pos];
            self.pos += 1;
            if !line.trim().is_empty() {
                return Ok(line.trim());
            }
        }
        Err(parse_err(self.file, self.pos, "unexpected end of file"))
    }

    fn at_end(&mut self) -> bool {
        while self.pos < self.lines.len() {
            if !self.lines[self.pos].trim().is_empty() {
                return false;
            }
            self.pos += 1;
        }
        true
    }

    fn expect(&mut self, want: &str) -> Result<()> {
        let line = self.next_line()?;
        if line != want {
            return Err(parse_err(
                self.file,
                self.line_no(),
                format!("expected '{want}', got '{line}'"),
            ));
        }
        Ok(())
    }

    fn parse_f64(&self, tok: &str) -> Result<f64> {
        tok.parse::<f64>()
            .map_err(|_| parse_err(self.file, self.line_no(), format!("bad float '{tok}'")))
    }

    fn read_block(&mut self, want_name: &str) -> Result<Array2<f64>> {
        let header = self.next_line()?;
        let mut it = header.split_whitespace();
        let name = it
            .next()
            .ok_or_else(|| parse_err(self.file, self.line_no(), "empty block header"))?;
        if name != want_name {
            return Err(parse_err(
                self.file,
                self.line_no(),
                format!("expected block '{want_name}', got '{name}'"),
            ));
        }
        let rows: usize = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| parse_err(self.file, self.line_no(), "bad block row count"))?;
        let cols: usize = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| parse_err(self.file, self.line_no(), "bad block column count"))?;
        let mut m = Array2::zeros((rows, cols));
        for i in 0..rows {
            let line = self.next_line()?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != cols {
                return Err(parse_err(
                    self.file,
                    self.line_no(),
                    format!("block '{want_name}' row has {} values, expected {cols}", toks.len()),
                ));
            }
            for (j, tok) in toks.iter().enumerate() {
                m[(i, j)] = self.parse_f64(tok)?;
            }
        }
        Ok(m)
    }
}

fn write_block(out: &mut String, name: &str, m: &Array2<f64>) {
    let _ = writeln!(out, "{name} {} {}", m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| fmt_f64(m[(i, j)])).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
}

fn row_vector(v: &Array1<f64>) -> Array2<f64> {
    let mut m = Array2::zeros((1, v.len()));
    for (j, &x) in v.iter().enumerate() {
        m[(0, j)] = x;
    }
    m
}

// --- VAE model -------------------------------------------------------------

const MODEL_BLOCKS: [&str; 6] = [
    "gen.v.Wtilde",
    "gen.mu.Wtilde",
    "gen.tau.Wtilde",
    "inf.v.Wtilde",
    "inf.mu.Wtilde",
    "inf.tau.Wtilde",
];

pub fn model_to_string(model: &VaeModel) -> String {
    let c = &model.config;
    let mut out = String::new();
    let _ = writeln!(out, "{MODEL_HEADER}");
    let _ = writeln!(out, "dims {} {} {}", c.d_x, c.d_d, c.d_h);
    let blocks = [
        model.gen.v.augmented(),
        model.gen.mu.augmented(),
        model.gen.tau.augmented(),
        model.inf.v.augmented(),
        model.inf.mu.augmented(),
        model.inf.tau.augmented(),
    ];
    for (name, block) in MODEL_BLOCKS.iter().zip(blocks) {
        write_block(&mut out, name, block);
    }
    out
}

pub fn write_model(path: &Path, model: &VaeModel) -> Result<()> {
    std::fs::write(path, model_to_string(model))?;
    Ok(())
}

pub fn model_from_str(path: &Path, text: &str) -> Result<VaeModel> {
    let mut p = LineParser::new(path, text);
    p.expect(MODEL_HEADER)?;
    let dims_line = p.next_line()?;
    let toks: Vec<&str> = dims_line.split_whitespace().collect();
    if toks.len() != 4 || toks[0] != "dims" {
        return Err(parse_err(path, p.line_no(), "expected 'dims d_x d_d d_h'"));
    }
    let parse_dim = |t: &str| -> Result<usize> {
        t.parse()
            .map_err(|_| parse_err(path, p.line_no(), format!("bad dimension '{t}'")))
    };
    let d_x = parse_dim(toks[1])?;
    let d_d = parse_dim(toks[2])?;
    let d_h = parse_dim(toks[3])?;
    let mut blocks = Vec::with_capacity(6);
    for name in MODEL_BLOCKS {
        blocks.push(p.read_block(name)?);
    }
    let model = VaeModel {
        config: VaeConfig::with_dims(d_x, d_d, d_h),
        gen: GenerativeNet {
            v: AffineLayer::from_augmented(blocks[0].clone())?,
            mu: AffineLayer::from_augmented(blocks[1].clone())?,
            tau: AffineLayer::from_augmented(blocks[2].clone())?,
        },
        inf: InferenceNet {
            v: AffineLayer::from_augmented(blocks[3].clone())?,
            mu: AffineLayer::from_augmented(blocks[4].clone())?,
            tau: AffineLayer::from_augmented(blocks[5].clone())?,
        },
    };
    model.validate_shapes()?;
    Ok(model)
}

pub fn read_model(path: &Path) -> Result<VaeModel> {
    let text = std::fs::read_to_string(path)?;
    model_from_str(path, &text)
}

// --- PLDA model ------------------------------------------------------------

pub fn plda_to_string(model: &PldaTwoCov) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{PLDA_HEADER}");
    let _ = writeln!(out, "mode {}", model.mode().as_str());
    write_block(&mut out, "mu", &row_vector(&model.mu));
    match (&model.b_cov, &model.w_cov) {
        (PldaCov::Diag(b), PldaCov::Diag(w)) => {
            write_block(&mut out, "b", &row_vector(b));
            write_block(&mut out, "w", &row_vector(w));
        }
        (PldaCov::Full(b), PldaCov::Full(w)) => {
            write_block(&mut out, "b", b);
            write_block(&mut out, "w", w);
        }
        _ => unreachable!("validated at construction"),
    }
    out
}

pub fn write_plda(path: &Path, model: &PldaTwoCov) -> Result<()> {
    std::fs::write(path, plda_to_string(model))?;
    Ok(())
}

pub fn read_plda(path: &Path) -> Result<PldaTwoCov> {
    let text = std::fs::read_to_string(path)?;
    let mut p = LineParser::new(path, &text);
    p.expect(PLDA_HEADER)?;
    let mode_line = p.next_line()?;
    let mode = mode_line
        .strip_prefix("mode ")
        .ok_or_else(|| parse_err(path, p.line_no(), "expected 'mode diag|full'"))?;
    let mu = p.read_block("mu")?.row(0).to_owned();
    let (b_cov, w_cov) = match mode {
        "diag" => (
            PldaCov::Diag(p.read_block("b")?.row(0).to_owned()),
            PldaCov::Diag(p.read_block("w")?.row(0).to_owned()),
        ),
        "full" => (
            PldaCov::Full(p.read_block("b")?),
            PldaCov::Full(p.read_block("w")?),
        ),
        other => {
            return Err(parse_err(
                path,
                p.line_no(),
                format!("unknown plda mode '{other}'"),
            ))
        }
    };
    let model = PldaTwoCov { mu, b_cov, w_cov };
    model.validate()?;
    Ok(model)
}

// --- Preprocessing pipeline --------------------------------------------------

pub fn pipeline_to_string(pipe: &Pipeline) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{PIPELINE_HEADER}");
    let mode = match pipe.whiten {
        Whitening::Diag(_) => "diag",
        Whitening::Full(_) => "full",
    };
    let _ = writeln!(out, "mode {mode}");
    let _ = writeln!(out, "length_norm {}", u8::from(pipe.length_norm));
    write_block(&mut out, "mean", &row_vector(&pipe.mean));
    match &pipe.whiten {
        Whitening::Diag(s) => write_block(&mut out, "whiten", &row_vector(s)),
        Whitening::Full(u) => write_block(&mut out, "whiten", u),
    }
    if let Some(pca) = &pipe.pca {
        write_block(&mut out, "pca", pca);
    }
    out
}

pub fn write_pipeline(path: &Path, pipe: &Pipeline) -> Result<()> {
    std::fs::write(path, pipeline_to_string(pipe))?;
    Ok(())
}

pub fn read_pipeline(path: &Path) -> Result<Pipeline> {
    let text = std::fs::read_to_string(path)?;
    let mut p = LineParser::new(path, &text);
    p.expect(PIPELINE_HEADER)?;
    let mode_line = p.next_line()?;
    let mode = mode_line
        .strip_prefix("mode ")
        .ok_or_else(|| parse_err(path, p.line_no(), "expected 'mode diag|full'"))?
        .to_string();
    let ln_line = p.next_line()?;
    let length_norm = match ln_line {
        "length_norm 0" => false,
        "length_norm 1" => true,
        _ => return Err(parse_err(path, p.line_no(), "expected 'length_norm 0|1'")),
    };
    let mean = p.read_block("mean")?.row(0).to_owned();
    let whiten = match mode.as_str() {
        "diag" => Whitening::Diag(p.read_block("whiten")?.row(0).to_owned()),
        "full" => Whitening::Full(p.read_block("whiten")?),
        other => {
            return Err(parse_err(
                path,
                p.line_no(),
                format!("unknown whitening mode '{other}'"),
            ))
        }
    };
    let pca = if p.at_end() {
        None
    } else {
        Some(p.read_block("pca")?)
    };
    Ok(Pipeline {
        mean,
        whiten,
        pca,
        length_norm,
    })
}

// --- Vectors -----------------------------------------------------------------

/// One vector file entry; `speaker` is `None` for unlabeled (`-`) rows.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorEntry {
    pub id: String,
    pub speaker: Option<String>,
    pub vector: Array1<f64>,
}

/// In-memory form of a vector file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VectorData {
    pub dim: usize,
    pub entries: Vec<VectorEntry>,
}

impl VectorData {
    pub fn from_corpus(corpus: &LabeledCorpus) -> VectorData {
        VectorData {
            dim: corpus.dim(),
            entries: corpus
                .ids
                .iter()
                .zip(corpus.speakers.iter())
                .zip(corpus.vectors.iter())
                .map(|((id, spk), v)| VectorEntry {
                    id: id.clone(),
                    speaker: Some(spk.clone()),
                    vector: v.clone(),
                })
                .collect(),
        }
    }

    /// Requires every entry to carry a speaker label.
    pub fn to_corpus(&self) -> Result<LabeledCorpus> {
        let mut corpus = LabeledCorpus::default();
        for e in &self.entries {
            let spk = e.speaker.as_ref().ok_or_else(|| {
                Error::InsufficientData(format!("vector '{}' has no speaker label", e.id))
            })?;
            corpus.ids.push(e.id.clone());
            corpus.speakers.push(spk.clone());
            corpus.vectors.push(e.vector.clone());
        }
        Ok(corpus)
    }

    pub fn vector_map(&self) -> HashMap<String, Array1<f64>> {
        self.entries
            .iter()
            .map(|e| (e.id.clone(), e.vector.clone()))
            .collect()
    }

    pub fn vectors(&self) -> Vec<Array1<f64>> {
        self.entries.iter().map(|e| e.vector.clone()).collect()
    }
}

pub fn vectors_to_string(data: &VectorData) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{VECTORS_HEADER}");
    let _ = writeln!(out, "dim {} count {}", data.dim, data.entries.len());
    for e in &data.entries {
        let spk = e.speaker.as_deref().unwrap_or("-");
        let vals: Vec<String> = e.vector.iter().map(|&v| fmt_f64(v)).collect();
        let _ = writeln!(out, "{} {} {}", e.id, spk, vals.join(" "));
    }
    out
}

pub fn write_vectors(path: &Path, data: &VectorData) -> Result<()> {
    std::fs::write(path, vectors_to_string(data))?;
    Ok(())
}

pub fn read_vectors(path: &Path) -> Result<VectorData> {
    let text = std::fs::read_to_string(path)?;
    let mut p = LineParser::new(path, &text);
    p.expect(VECTORS_HEADER)?;
    let line = p.next_line()?;
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() != 4 || toks[0] != "dim" || toks[2] != "count" {
        return Err(parse_err(path, p.line_no(), "expected 'dim D count N'"));
    }
    let dim: usize = toks[1]
        .parse()
        .map_err(|_| parse_err(path, p.line_no(), "bad dimension"))?;
    let count: usize = toks[3]
        .parse()
        .map_err(|_| parse_err(path, p.line_no(), "bad count"))?;
    let mut data = VectorData {
        dim,
        entries: Vec::with_capacity(count),
    };
    for _ in 0..count {
        let line = p.next_line()?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != dim + 2 {
            return Err(parse_err(
                path,
                p.line_no(),
                format!("expected id, speaker and {dim} values, got {} fields", toks.len()),
            ));
        }
        let mut v = Array1::zeros(dim);
        for j in 0..dim {
            v[j] = p.parse_f64(toks[j + 2])?;
        }
        data.entries.push(VectorEntry {
            id: toks[0].to_string(),
            speaker: if toks[1] == "-" {
                None
            } else {
                Some(toks[1].to_string())
            },
            vector: v,
        });
    }
    Ok(data)
}

// --- Trials and scores -------------------------------------------------------

pub fn trials_to_string(trials: &TrialSet) -> String {
    let mut out = String::new();
    for t in &trials.trials {
        let _ = writeln!(out, "{} {} {}", t.enroll_id, t.test_id, t.label.as_str());
    }
    out
}

pub fn write_trials(path: &Path, trials: &TrialSet) -> Result<()> {
    std::fs::write(path, trials_to_string(trials))?;
    Ok(())
}

pub fn read_trials(path: &Path) -> Result<TrialSet> {
    let text = std::fs::read_to_string(path)?;
    let mut trials = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(parse_err(path, i + 1, "expected 'enroll_id test_id tar|non|unk'"));
        }
        let label = TrialLabel::parse(toks[2])
            .ok_or_else(|| parse_err(path, i + 1, format!("unknown label '{}'", toks[2])))?;
        trials.push(Trial::new(toks[0], toks[1], label));
    }
    Ok(TrialSet { trials })
}

/// Scores serialize with 9 significant digits.
pub fn scores_to_string(scores: &ScoreSet) -> String {
    let mut out = String::new();
    for s in &scores.scores {
        let _ = writeln!(
            out,
            "{} {} {:.8e}",
            s.trial.enroll_id, s.trial.test_id, s.score
        );
    }
    out
}

pub fn write_scores(path: &Path, scores: &ScoreSet) -> Result<()> {
    std::fs::write(path, scores_to_string(scores))?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<Vec<(String, String, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(parse_err(path, i + 1, "expected 'enroll_id test_id score'"));
        }
        let score: f64 = toks[2]
            .parse()
            .map_err(|_| parse_err(path, i + 1, format!("bad score '{}'", toks[2])))?;
        out.push((toks[0].to_string(), toks[1].to_string(), score));
    }
    Ok(out)
}

/// Joins scores onto labeled trials, returning `(scores, labels)` for the
/// metric functions. Unknown-label trials are skipped; a trial without a
/// score is an error.
pub fn join_scores(
    trials: &TrialSet,
    scores: &[(String, String, f64)],
) -> Result<(Vec<f64>, Vec<bool>)> {
    let map: HashMap<(&str, &str), f64> = scores
        .iter()
        .map(|(e, t, s)| ((e.as_str(), t.as_str()), *s))
        .collect();
    let mut out_scores = Vec::new();
    let mut out_labels = Vec::new();
    for t in &trials.trials {
        let is_target = match t.label {
            TrialLabel::Target => true,
            TrialLabel::Impostor => false,
            TrialLabel::Unknown => continue,
        };
        let s = map
            .get(&(t.enroll_id.as_str(), t.test_id.as_str()))
            .ok_or_else(|| {
                Error::MissingId(format!("{} {} (no score for trial)", t.enroll_id, t.test_id))
            })?;
        out_scores.push(*s);
        out_labels.push(is_target);
    }
    Ok((out_scores, out_labels))
}

// --- Training config ----------------------------------------------------------

/// Model configuration plus loop options, as stored in the flat
/// `key=value` training config file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainFileConfig {
    pub vae: VaeConfig,
    pub opts: TrainOptions,
}

pub fn train_config_to_string(c: &TrainFileConfig) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "d_x={}", c.vae.d_x);
    let _ = writeln!(out, "d_d={}", c.vae.d_d);
    let _ = writeln!(out, "d_h={}", c.vae.d_h);
    let _ = writeln!(out, "beta={}", c.vae.beta);
    let _ = writeln!(out, "k_train={}", c.vae.k_train);
    let _ = writeln!(out, "k_score={}", c.vae.k_score);
    let _ = writeln!(out, "minibatch={}", c.vae.minibatch);
    let _ = writeln!(out, "gamma={}", c.vae.gamma);
    let _ = writeln!(out, "eta={}", c.vae.eta);
    let _ = writeln!(out, "seed={}", c.vae.seed);
    let _ = writeln!(out, "max_iters={}", c.opts.max_iters);
    let _ = writeln!(out, "eval_every={}", c.opts.eval_every);
    let _ = writeln!(out, "patience={}", c.opts.patience);
    out
}

pub fn write_train_config(path: &Path, c: &TrainFileConfig) -> Result<()> {
    std::fs::write(path, train_config_to_string(c))?;
    Ok(())
}

/// Parses `key=value` lines. `d_x`, `d_d` and `d_h` are required; every other
/// key falls back to its default.
pub fn read_train_config(path: &Path) -> Result<TrainFileConfig> {
    let text = std::fs::read_to_string(path)?;
    let map = parse_kv(path, &text)?;
    let mut vae = VaeConfig::with_dims(
        req_usize(path, &map, "d_x")?,
        req_usize(path, &map, "d_d")?,
        req_usize(path, &map, "d_h")?,
    );
    let mut opts = TrainOptions::default();
    for (key, (line, value)) in &map {
        match key.as_str() {
            "d_x" | "d_d" | "d_h" => {}
            "beta" => vae.beta = kv_f64(path, *line, value)?,
            "k_train" => vae.k_train = kv_usize(path, *line, value)?,
            "k_score" => vae.k_score = kv_usize(path, *line, value)?,
            "minibatch" => vae.minibatch = kv_usize(path, *line, value)?,
            "gamma" => vae.gamma = kv_f64(path, *line, value)?,
            "eta" => vae.eta = kv_f64(path, *line, value)?,
            "seed" => {
                vae.seed = value
                    .parse()
                    .map_err(|_| parse_err(path, *line, format!("bad seed '{value}'")))?
            }
            "max_iters" => opts.max_iters = kv_usize(path, *line, value)?,
            "eval_every" => opts.eval_every = kv_usize(path, *line, value)?,
            "patience" => opts.patience = kv_usize(path, *line, value)?,
            other => {
                return Err(parse_err(path, *line, format!("unknown key '{other}'")));
            }
        }
    }
    vae.validate()?;
    Ok(TrainFileConfig { vae, opts })
}

type KvMap = HashMap<String, (usize, String)>;

fn parse_kv(path: &Path, text: &str) -> Result<KvMap> {
    let mut map = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(path, i + 1, format!("expected key=value, got '{line}'")))?;
        let key = key.trim().to_string();
        if map.contains_key(&key) {
            return Err(parse_err(path, i + 1, format!("duplicate key '{key}'")));
        }
        map.insert(key, (i + 1, value.trim().to_string()));
    }
    Ok(map)
}

fn req_usize(path: &Path, map: &KvMap, key: &str) -> Result<usize> {
    let (line, value) = map
        .get(key)
        .ok_or_else(|| parse_err(path, 0, format!("missing required key '{key}'")))?;
    kv_usize(path, *line, value)
}

fn kv_usize(path: &Path, line: usize, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| parse_err(path, line, format!("bad integer '{value}'")))
}

fn kv_f64(path: &Path, line: usize, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| parse_err(path, line, format!("bad float '{value}'")))
}

// --- Synthesis spec -------------------------------------------------------------

/// Parsed contents of a `synth` spec file (flat `key=value`, selected by the
/// `kind` key).
#[derive(Debug, Clone, PartialEq)]
pub enum SynthFileSpec {
    TwoCov {
        /// Corpus shape; `n_speakers` covers train + dev + test.
        corpus: crate::synth::CorpusSpec,
        train_speakers: usize,
        dev_speakers: usize,
        test_speakers: usize,
        dev_trials: usize,
        test_trials: usize,
    },
    Cluster2d(crate::synth::ClusterSpec),
}

fn parse_cov(
    path: &Path,
    dim: usize,
    var_entry: Option<&(usize, String)>,
    corr_entry: Option<&(usize, String)>,
    spectrum_entry: Option<&(usize, String)>,
    seed: u64,
    key: &str,
) -> Result<crate::synth::CovSpec> {
    use crate::synth::CovSpec;
    if let Some((line, raw)) = spectrum_entry {
        let spectrum: Vec<f64> = raw
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(path, *line, format!("bad spectrum value '{t}'")))
            })
            .collect::<Result<_>>()?;
        if spectrum.len() != dim {
            return Err(parse_err(
                path,
                *line,
                format!("spectrum has {} entries, expected {dim}", spectrum.len()),
            ));
        }
        return CovSpec::rotated_spectrum(&Array1::from(spectrum), seed);
    }
    let (line, raw) = var_entry
        .ok_or_else(|| parse_err(path, 0, format!("missing required key '{key}'")))?;
    let parts: Vec<&str> = raw.split(',').map(str::trim).collect();
    let vars: Vec<f64> = parts
        .iter()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| parse_err(path, *line, format!("bad variance '{t}'")))
        })
        .collect::<Result<_>>()?;
    if let Some((cline, corr)) = corr_entry {
        let rho: f64 = corr
            .parse()
            .map_err(|_| parse_err(path, *cline, format!("bad correlation '{corr}'")))?;
        if vars.len() != 1 {
            return Err(parse_err(
                path,
                *cline,
                "uniform correlation needs a scalar variance",
            ));
        }
        return Ok(CovSpec::correlated(dim, vars[0], rho));
    }
    match vars.len() {
        1 => Ok(CovSpec::iso(dim, vars[0])),
        n if n == dim => Ok(CovSpec::Diag(Array1::from(vars))),
        n => Err(parse_err(
            path,
            *line,
            format!("{key} has {n} entries, expected 1 or {dim}"),
        )),
    }
}

pub fn read_synth_spec(path: &Path) -> Result<SynthFileSpec> {
    use crate::synth::{ClusterSpec, CorpusSpec};
    let text = std::fs::read_to_string(path)?;
    let map = parse_kv(path, &text)?;
    let get_usize = |key: &str, default: usize| -> Result<usize> {
        match map.get(key) {
            Some((line, v)) => kv_usize(path, *line, v),
            None => Ok(default),
        }
    };
    let get_f64 = |key: &str, default: f64| -> Result<f64> {
        match map.get(key) {
            Some((line, v)) => kv_f64(path, *line, v),
            None => Ok(default),
        }
    };
    let kind = map
        .get("kind")
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| parse_err(path, 0, "missing required key 'kind'"))?;
    let seed: u64 = match map.get("seed") {
        Some((line, v)) => v
            .parse()
            .map_err(|_| parse_err(path, *line, format!("bad seed '{v}'")))?,
        None => 0,
    };
    match kind {
        "two_cov" => {
            let dim = req_usize(path, &map, "dim")?;
            let train_speakers = req_usize(path, &map, "train_speakers")?;
            let dev_speakers = get_usize("dev_speakers", 0)?;
            let test_speakers = get_usize("test_speakers", 0)?;
            let sessions = req_usize(path, &map, "sessions_per_speaker")?;
            let b_cov = parse_cov(
                path,
                dim,
                map.get("b_var"),
                map.get("b_corr"),
                map.get("b_spectrum"),
                seeds::derive(seed, "b-spectrum"),
                "b_var",
            )?;
            let w_cov = parse_cov(
                path,
                dim,
                map.get("w_var"),
                map.get("w_corr"),
                map.get("w_spectrum"),
                seeds::derive(seed, "w-spectrum"),
                "w_var",
            )?;
            let corpus = CorpusSpec {
                n_speakers: train_speakers + dev_speakers + test_speakers,
                sessions_per_speaker: sessions,
                dim,
                b_cov,
                w_cov,
                seed,
            };
            corpus.validate()?;
            Ok(SynthFileSpec::TwoCov {
                corpus,
                train_speakers,
                dev_speakers,
                test_speakers,
                dev_trials: get_usize("dev_trials", 1000)?,
                test_trials: get_usize("test_trials", 1000)?,
            })
        }
        "cluster_2d" => {
            let v = get_f64("w_var", 1.0)?;
            let rho = get_f64("w_corr", 0.0)?;
            let spec = ClusterSpec {
                n_clusters: req_usize(path, &map, "n_clusters")?,
                points_per_cluster: req_usize(path, &map, "points_per_cluster")?,
                cluster_spread: get_f64("cluster_spread", 1.0)?,
                within_cov: ndarray::array![[v, rho * v], [rho * v, v]],
                seed,
            };
            spec.validate()?;
            Ok(SynthFileSpec::Cluster2d(spec))
        }
        other => Err(parse_err(path, 0, format!("unknown kind '{other}'"))),
    }
}

// --- CSV reports ---------------------------------------------------------------

/// `iter,elbo,dev_eer,dev_mindcf`; the dev columns are empty on iterations
/// without a checkpoint.
pub fn train_report_to_csv(report: &TrainReport) -> String {
    let mut by_iter: HashMap<usize, (f64, f64)> = HashMap::new();
    for c in &report.checkpoints {
        by_iter.insert(c.iter, (c.eer, c.min_dcf));
    }
    let mut out = String::from("iter,elbo,dev_eer,dev_mindcf\n");
    for rec in &report.iters {
        match by_iter.get(&rec.iter) {
            Some((eer, dcf)) => {
                let _ = writeln!(out, "{},{:.8e},{:.8e},{:.8e}", rec.iter, rec.elbo, eer, dcf);
            }
            None => {
                let _ = writeln!(out, "{},{:.8e},,", rec.iter, rec.elbo);
            }
        }
    }
    out
}

pub fn write_train_report(path: &Path, report: &TrainReport) -> Result<()> {
    std::fs::write(path, train_report_to_csv(report))?;
    Ok(())
}

/// `metric,value,threshold` rows.
pub fn metrics_to_csv(rows: &[(&str, f64, f64)]) -> String {
    let mut out = String::from("metric,value,threshold\n");
    for (name, value, thr) in rows {
        let _ = writeln!(out, "{name},{value:.8e},{thr:.8e}");
    }
    out
}

/// `threshold,p_miss,p_fa` rows.
pub fn det_to_csv(det: &DetCurve) -> String {
    let mut out = String::from("threshold,p_miss,p_fa\n");
    for p in &det.points {
        let _ = writeln!(out, "{:.8e},{:.8e},{:.8e}", p.threshold, p.p_miss, p.p_fa);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::preprocess::{fit_pipeline, WhitenMode};
    use crate::scoring::ScoredTrial;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn model_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.model");
        let config = VaeConfig {
            seed: 42,
            ..VaeConfig::with_dims(4, 3, 2)
        };
        let mut model = init_params(&config).unwrap();
        // Exercise awkward values.
        model.gen.mu.augmented_mut()[(0, 0)] = f64::MIN_POSITIVE;
        model.inf.tau.augmented_mut()[(1, 1)] = -1.234567890123456e-300;
        write_model(&path, &model).unwrap();
        let back = read_model(&path).unwrap();
        assert_eq!(model.gen.v.augmented(), back.gen.v.augmented());
        assert_eq!(model.gen.mu.augmented(), back.gen.mu.augmented());
        assert_eq!(model.gen.tau.augmented(), back.gen.tau.augmented());
        assert_eq!(model.inf.v.augmented(), back.inf.v.augmented());
        assert_eq!(model.inf.mu.augmented(), back.inf.mu.augmented());
        assert_eq!(model.inf.tau.augmented(), back.inf.tau.augmented());
        // Rewriting produces identical bytes.
        let again = dir.path().join("m2.model");
        write_model(&again, &back).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&again).unwrap()
        );
    }

    #[test]
    fn vectors_roundtrip_with_unlabeled_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vec");
        let data = VectorData {
            dim: 2,
            entries: vec![
                VectorEntry {
                    id: "a1".into(),
                    speaker: Some("spkA".into()),
                    vector: array![0.25, -1.5],
                },
                VectorEntry {
                    id: "b1".into(),
                    speaker: None,
                    vector: array![1.0 / 3.0, 2e-17],
                },
            ],
        };
        write_vectors(&path, &data).unwrap();
        let back = read_vectors(&path).unwrap();
        assert_eq!(data, back);
        assert!(back.to_corpus().is_err(), "unlabeled row cannot be a corpus");
    }

    #[test]
    fn plda_and_pipeline_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let plda = PldaTwoCov {
            mu: array![0.5, -0.25],
            b_cov: PldaCov::Full(array![[1.0, 0.2], [0.2, 0.9]]),
            w_cov: PldaCov::Full(array![[0.7, -0.1], [-0.1, 0.8]]),
        };
        let path = dir.path().join("p.plda");
        write_plda(&path, &plda).unwrap();
        assert_eq!(read_plda(&path).unwrap(), plda);

        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let train: Vec<Array1<f64>> = (0..40)
            .map(|_| crate::model::standard_normal_vec(&mut rng, 3))
            .collect();
        let pipe = fit_pipeline(&train, WhitenMode::Full, Some(2), true).unwrap();
        let path = dir.path().join("p.pipe");
        write_pipeline(&path, &pipe).unwrap();
        assert_eq!(read_pipeline(&path).unwrap(), pipe);
    }

    #[test]
    fn trials_and_scores_roundtrip_and_join() {
        let dir = tempfile::tempdir().unwrap();
        let trials = TrialSet {
            trials: vec![
                Trial::new("e1", "t1", TrialLabel::Target),
                Trial::new("e1", "t2", TrialLabel::Impostor),
                Trial::new("e2", "t1", TrialLabel::Unknown),
            ],
        };
        let tpath = dir.path().join("t.trl");
        write_trials(&tpath, &trials).unwrap();
        assert_eq!(read_trials(&tpath).unwrap(), trials);

        let scores = ScoreSet {
            scores: trials
                .trials
                .iter()
                .enumerate()
                .map(|(i, t)| ScoredTrial {
                    trial: t.clone(),
                    score: i as f64 - 0.5,
                    k_used: 10,
                })
                .collect(),
        };
        let spath = dir.path().join("s.scr");
        write_scores(&spath, &scores).unwrap();
        let raw = read_scores(&spath).unwrap();
        assert_eq!(raw.len(), 3);
        let (s, l) = join_scores(&trials, &raw).unwrap();
        assert_eq!(s.len(), 2, "unknown-label trial is skipped");
        assert_eq!(l, vec![true, false]);

        let missing = join_scores(
            &TrialSet {
                trials: vec![Trial::new("nope", "t1", TrialLabel::Target)],
            },
            &raw,
        );
        assert!(missing.is_err());
    }

    #[test]
    fn parse_errors_carry_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.vec");
        std::fs::write(&path, "vaeverif-vectors v1\ndim 2 count 1\nid spk 0.5\n").unwrap();
        let err = read_vectors(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad.vec:3"), "{msg}");
    }

    #[test]
    fn train_config_roundtrip_and_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.cfg");
        let config = TrainFileConfig {
            vae: VaeConfig {
                beta: 0.001,
                k_train: 2,
                k_score: 25,
                minibatch: 64,
                gamma: 0.95,
                eta: 3e-4,
                seed: 17,
                ..VaeConfig::with_dims(10, 20, 10)
            },
            opts: TrainOptions {
                max_iters: 80,
                eval_every: 40,
                patience: 5,
            },
        };
        write_train_config(&path, &config).unwrap();
        assert_eq!(read_train_config(&path).unwrap(), config);

        let minimal = dir.path().join("min.cfg");
        std::fs::write(&minimal, "d_x=3\nd_d=4\nd_h=5\n").unwrap();
        let got = read_train_config(&minimal).unwrap();
        assert_eq!(got.vae.d_x, 3);
        assert_eq!(got.vae.minibatch, 100);
        assert_eq!(got.opts.patience, 3);

        let bad = dir.path().join("bad.cfg");
        std::fs::write(&bad, "d_x=3\nd_d=4\nd_h=5\nwat=1\n").unwrap();
        assert!(read_train_config(&bad).unwrap_err().to_string().contains("wat"));
    }

    #[test]
    fn score_file_has_nine_significant_digits() {
        let scores = ScoreSet {
            scores: vec![ScoredTrial {
                trial: Trial::new("e", "t", TrialLabel::Target),
                score: std::f64::consts::PI,
                k_used: 1,
            }],
        };
        let text = scores_to_string(&scores);
        assert_eq!(text, "e t 3.14159265e0\n");
    }

    #[test]
    fn synth_spec_parsing() {
        use crate::synth::CovSpec;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.cfg");
        std::fs::write(
            &path,
            "kind=two_cov\ndim=3\ntrain_speakers=10\ntest_speakers=4\n\
             sessions_per_speaker=5\nb_var=1.0\nw_var=2.0\nw_corr=0.5\nseed=9\n",
        )
        .unwrap();
        match read_synth_spec(&path).unwrap() {
            SynthFileSpec::TwoCov {
                corpus,
                train_speakers,
                test_speakers,
                ..
            } => {
                assert_eq!(corpus.n_speakers, 14);
                assert_eq!(train_speakers, 10);
                assert_eq!(test_speakers, 4);
                assert_eq!(corpus.b_cov, CovSpec::iso(3, 1.0));
                match corpus.w_cov {
                    CovSpec::Full(m) => {
                        assert_eq!(m[(0, 0)], 2.0);
                        assert_eq!(m[(0, 1)], 1.0);
                    }
                    _ => panic!("expected correlated full covariance"),
                }
            }
            _ => panic!("expected two_cov"),
        }

        let cpath = dir.path().join("c.cfg");
        std::fs::write(
            &cpath,
            "kind=cluster_2d\nn_clusters=10\npoints_per_cluster=200\n\
             cluster_spread=2.0\nw_var=0.04\nw_corr=0.8\nseed=3\n",
        )
        .unwrap();
        match read_synth_spec(&cpath).unwrap() {
            SynthFileSpec::Cluster2d(spec) => {
                assert_eq!(spec.n_clusters, 10);
                assert!((spec.within_cov[(0, 1)] - 0.032).abs() < 1e-15);
            }
            _ => panic!("expected cluster_2d"),
        }

        let bad = dir.path().join("b.cfg");
        std::fs::write(&bad, "kind=nope\n").unwrap();
        assert!(read_synth_spec(&bad).is_err());
    }

    #[test]
    fn float_format_roundtrips_random_values() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for _ in 0..2000 {
            let v = f64::from_bits(rng.random::<u64>());
            if !v.is_finite() {
                continue;
            }
            let s = fmt_f64(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(v.to_bits(), back.to_bits(), "{v:?} -> {s} -> {back:?}");
        }
    }
}
