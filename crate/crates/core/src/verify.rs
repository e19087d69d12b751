//! Enrollment, cosine scoring and trial execution.
//!
//! Each enrolled speaker keeps one mean embedding per digit. A test passphrase
//! is scored digit by digit against those means and the passphrase score is
//! the plain mean of the per-digit cosines. No score normalization is applied.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sessions per digit in the canonical enrollment protocol.
pub const CANONICAL_SESSIONS: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum VerifyError {
    #[error("zero-norm embedding")]
    ZeroVector,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("digit {0} out of range")]
    DigitOutOfRange(u32),
    #[error("incomplete enrollment: model {model_id} has no digit {digit}")]
    IncompleteEnrollment { model_id: String, digit: u32 },
    #[error("empty passphrase")]
    EmptyPassphrase,
    #[error("unknown enrollment model {0}")]
    UnknownModel(String),
    #[error("no embedding for utterance {0}")]
    DanglingUtterance(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for VerifyError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrialLabel {
    Target,
    Nontarget,
    Unknown,
}

impl FromStr for TrialLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "target" => Ok(Self::Target),
            "nontarget" => Ok(Self::Nontarget),
            "unknown" => Ok(Self::Unknown),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

impl fmt::Display for TrialLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Target => "target",
            Self::Nontarget => "nontarget",
            Self::Unknown => "unknown",
        })
    }
}

/// One claimed identity tested against an ordered digit passphrase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialRecord {
    pub model_id: String,
    /// `(digit, utt_id)` in spoken order.
    pub passphrase: Vec<(u32, String)>,
    pub label: TrialLabel,
}

/// The utterances a speaker enrolls with, as `(digit, utt_id)` pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnrollmentList {
    pub model_id: String,
    pub items: Vec<(u32, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub trial_index: usize,
    pub model_id: String,
    pub score: f64,
    pub sub_scores: Vec<f64>,
    pub label: TrialLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DigitModel {
    pub digit: u32,
    pub sessions: usize,
    pub mean: Vec<f64>,
}

impl DigitModel {
    /// Enrolled from fewer sessions than the canonical protocol uses.
    pub fn is_short(&self) -> bool {
        self.sessions < CANONICAL_SESSIONS
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrollmentModel {
    pub model_id: String,
    pub digits: BTreeMap<u32, DigitModel>,
}

impl EnrollmentModel {
    /// Digits enrolled from fewer than [`CANONICAL_SESSIONS`] sessions.
    pub fn short_digits(&self) -> Vec<u32> {
        self.digits.values().filter(|d| d.is_short()).map(|d| d.digit).collect()
    }
}

/// Averages the session embeddings of each digit (no renormalization).
pub fn build_enrollment(
    model_id: &str,
    samples: &[(u32, &[f32])],
) -> Result<EnrollmentModel, VerifyError> {
    let mut sums: BTreeMap<u32, (usize, Vec<f64>)> = BTreeMap::new();
    let dim = samples.first().map_or(0, |(_, v)| v.len());
    for &(digit, v) in samples {
        if digit > 9 {
            return Err(VerifyError::DigitOutOfRange(digit));
        }
        if v.len() != dim {
            return Err(VerifyError::DimensionMismatch(dim, v.len()));
        }
        let (n, acc) = sums.entry(digit).or_insert_with(|| (0, vec![0.0; dim]));
        *n += 1;
        acc.iter_mut().zip(v).for_each(|(a, &x)| *a += x as f64);
    }
    let digits = sums
        .into_iter()
        .map(|(digit, (n, acc))| {
            let mean = acc.into_iter().map(|s| s / n as f64).collect();
            (digit, DigitModel { digit, sessions: n, mean })
        })
        .collect();
    Ok(EnrollmentModel {
        model_id: model_id.to_string(),
        digits,
    })
}

/// `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64, VerifyError> {
    if a.len() != b.len() {
        return Err(VerifyError::DimensionMismatch(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(VerifyError::ZeroVector);
    }
    // sqrt(na·nb) rather than sqrt(na)·sqrt(nb): for a == b this is exactly dot.
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Scores each `(digit, embedding)` against that digit's enrollment mean and
/// averages. Repeated digits are scored and counted once per occurrence.
pub fn score_passphrase(
    enr: &EnrollmentModel,
    test: &[(u32, &[f32])],
) -> Result<(f64, Vec<f64>), VerifyError> {
    if test.is_empty() {
        return Err(VerifyError::EmptyPassphrase);
    }
    let mut subs = Vec::with_capacity(test.len());
    for &(digit, emb) in test {
        let model = enr.digits.get(&digit).ok_or_else(|| VerifyError::IncompleteEnrollment {
            model_id: enr.model_id.clone(),
            digit,
        })?;
        let e: Vec<f64> = emb.iter().map(|&x| x as f64).collect();
        subs.push(cosine_score(&model.mean, &e)?);
    }
    // Summed in sorted order so the score is exactly independent of the
    // order in which digits were spoken.
    let mut sorted = subs.clone();
    sorted.sort_by(f64::total_cmp);
    let score = sorted.iter().sum::<f64>() / subs.len() as f64;
    Ok((score, subs))
}

/// Builds one enrollment model per list entry from an embedding table.
pub fn enroll_all(
    lists: &[EnrollmentList],
    embeddings: &BTreeMap<String, Vec<f32>>,
) -> Result<BTreeMap<String, EnrollmentModel>, VerifyError> {
    let mut models = BTreeMap::new();
    for list in lists {
        let samples = lookup(&list.items, embeddings)?;
        models.insert(list.model_id.clone(), build_enrollment(&list.model_id, &samples)?);
    }
    Ok(models)
}

fn lookup<'a>(
    items: &[(u32, String)],
    embeddings: &'a BTreeMap<String, Vec<f32>>,
) -> Result<Vec<(u32, &'a [f32])>, VerifyError> {
    items
        .iter()
        .map(|(d, utt)| {
            embeddings
                .get(utt)
                .map(|v| (*d, v.as_slice()))
                .ok_or_else(|| VerifyError::DanglingUtterance(utt.clone()))
        })
        .collect()
}

fn score_trial(
    index: usize,
    trial: &TrialRecord,
    models: &BTreeMap<String, EnrollmentModel>,
    embeddings: &BTreeMap<String, Vec<f32>>,
) -> Result<ScoreRecord, VerifyError> {
    let enr = models
        .get(&trial.model_id)
        .ok_or_else(|| VerifyError::UnknownModel(trial.model_id.clone()))?;
    let test = lookup(&trial.passphrase, embeddings)?;
    let (score, sub_scores) = score_passphrase(enr, &test)?;
    Ok(ScoreRecord {
        trial_index: index,
        model_id: trial.model_id.clone(),
        score,
        sub_scores,
        label: trial.label,
    })
}

/// Scores every trial, preserving order.
pub fn run_protocol(
    trials: &[TrialRecord],
    models: &BTreeMap<String, EnrollmentModel>,
    embeddings: &BTreeMap<String, Vec<f32>>,
) -> Result<Vec<ScoreRecord>, VerifyError> {
    trials
        .iter()
        .enumerate()
        .map(|(i, t)| score_trial(i, t, models, embeddings))
        .collect()
}

/// [`run_protocol`] spread over `workers` threads. Trials are independent,
/// so the output is identical to the serial run.
pub fn run_protocol_parallel(
    trials: &[TrialRecord],
    models: &BTreeMap<String, EnrollmentModel>,
    embeddings: &BTreeMap<String, Vec<f32>>,
    workers: usize,
) -> Result<Vec<ScoreRecord>, VerifyError> {
    if workers <= 1 {
        return run_protocol(trials, models, embeddings);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| VerifyError::Io(format!("thread pool: {e}")))?;
    pool.install(|| {
        trials
            .par_iter()
            .enumerate()
            .map(|(i, t)| score_trial(i, t, models, embeddings))
            .collect()
    })
}

/// Tab-separated: model_id, trial index, score (9 decimals), label.
pub fn write_scores<W: Write>(mut w: W, scores: &[ScoreRecord]) -> Result<(), VerifyError> {
    for s in scores {
        writeln!(w, "{}\t{}\t{:.9}\t{}", s.model_id, s.trial_index, s.score, s.label)?;
    }
    Ok(())
}

/// Reads a score file back. Sub-scores are not stored and come back empty.
pub fn read_scores<R: BufRead>(r: R) -> Result<Vec<ScoreRecord>, VerifyError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| VerifyError::Parse { line: lineno, msg };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, got {}", fields.len())));
        }
        let trial_index = fields[1].parse().map_err(|_| err(format!("bad trial index {:?}", fields[1])))?;
        let score: f64 = fields[2].parse().map_err(|_| err(format!("bad score {:?}", fields[2])))?;
        if !score.is_finite() {
            return Err(err("non-finite score".into()));
        }
        let label = fields[3].trim().parse().map_err(err)?;
        out.push(ScoreRecord {
            trial_index,
            model_id: fields[0].to_string(),
            score,
            sub_scores: Vec::new(),
            label,
        });
    }
    Ok(out)
}

/// One line per digit model, tab-separated: model_id, digit, session count,
/// comma-joined mean. Values use the shortest exact decimal form, so a
/// round trip reproduces every bit.
pub fn write_models<W: Write>(mut w: W, models: &BTreeMap<String, EnrollmentModel>) -> Result<(), VerifyError> {
    for m in models.values() {
        for d in m.digits.values() {
            let mean: Vec<String> = d.mean.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}\t{}\t{}\t{}", m.model_id, d.digit, d.sessions, mean.join(","))?;
        }
    }
    Ok(())
}

pub fn read_models<R: BufRead>(r: R) -> Result<BTreeMap<String, EnrollmentModel>, VerifyError> {
    let mut models: BTreeMap<String, EnrollmentModel> = BTreeMap::new();
    let mut dim = None;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| VerifyError::Parse { line: lineno, msg };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, got {}", fields.len())));
        }
        let digit: u32 = fields[1].parse().map_err(|_| err(format!("bad digit {:?}", fields[1])))?;
        if digit > 9 {
            return Err(err(format!("digit {digit} out of range")));
        }
        let sessions: usize = fields[2].parse().map_err(|_| err(format!("bad session count {:?}", fields[2])))?;
        let mean = fields[3]
            .split(',')
            .map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| err("bad mean vector".into()))?;
        if *dim.get_or_insert(mean.len()) != mean.len() {
            return Err(err(format!("mean has {} values, expected {}", mean.len(), dim.unwrap_or(0))));
        }
        let model = models.entry(fields[0].to_string()).or_insert_with(|| EnrollmentModel {
            model_id: fields[0].to_string(),
            digits: BTreeMap::new(),
        });
        if model.digits.insert(digit, DigitModel { digit, sessions, mean }).is_some() {
            return Err(err(format!("duplicate digit {digit} for model {}", fields[0])));
        }
    }
    Ok(models)
}
