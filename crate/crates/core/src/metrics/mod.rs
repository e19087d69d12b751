//! Detection metrics (EER, minDCF, DET), linear logistic score fusion and
//! exact t-SNE.
//!
//! All threshold sweeps use the same convention: a trial is accepted when its
//! score is `>= t`. Thresholds are every distinct score plus `+inf`, so the
//! sweep runs from "accept everything" to "reject everything".

mod fusion;
mod tsne;

use std::fmt;
use std::io::Write;

use thiserror::Error;

use crate::verify::{ScoreRecord, TrialLabel};

pub use fusion::{fusion_apply, fusion_train, FusionModel};
pub use tsne::{
    joint_probabilities, kl_divergence, student_q, tsne_project, tsne_svg, write_tsne_tsv, TsneConfig, TsnePoint,
    TsneResult,
};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no target trials")]
    NoTargets,
    #[error("no nontarget trials")]
    NoNontargets,
    #[error("non-finite score")]
    NonFinite,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("perplexity {perplexity} infeasible for {n} points (needs perplexity < (n-1)/3)")]
    InfeasiblePerplexity { perplexity: f64, n: usize },
}

/// Target and nontarget scores of one system.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub target: Vec<f64>,
    pub nontarget: Vec<f64>,
}

impl ScoreSet {
    pub fn new(target: Vec<f64>, nontarget: Vec<f64>) -> Self {
        Self { target, nontarget }
    }

    /// Splits labeled records; `unknown` trials are skipped.
    pub fn from_records(records: &[ScoreRecord]) -> Self {
        let mut set = Self::default();
        for r in records {
            match r.label {
                TrialLabel::Target => set.target.push(r.score),
                TrialLabel::Nontarget => set.nontarget.push(r.score),
                TrialLabel::Unknown => {}
            }
        }
        set
    }

    pub fn check(&self) -> Result<(), MetricsError> {
        if self.target.is_empty() {
            return Err(MetricsError::NoTargets);
        }
        if self.nontarget.is_empty() {
            return Err(MetricsError::NoNontargets);
        }
        if self.target.iter().chain(&self.nontarget).any(|s| !s.is_finite()) {
            return Err(MetricsError::NonFinite);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfParams {
    pub p_tar: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            p_tar: 0.01,
            c_miss: 10.0,
            c_fa: 1.0,
        }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if !(self.p_tar > 0.0 && self.p_tar < 1.0) {
            return Err(MetricsError::InvalidParameter(format!("p_tar {} not in (0, 1)", self.p_tar)));
        }
        if !(self.c_miss > 0.0 && self.c_fa > 0.0 && self.c_miss.is_finite() && self.c_fa.is_finite()) {
            return Err(MetricsError::InvalidParameter("costs must be positive".into()));
        }
        Ok(())
    }

    /// Cost of the better of "accept all" and "reject all".
    pub fn default_cost(&self) -> f64 {
        (self.c_miss * self.p_tar).min(self.c_fa * (1.0 - self.p_tar))
    }

    /// Normalized detection cost at one operating point.
    pub fn normalized_cost(&self, p_miss: f64, p_fa: f64) -> f64 {
        (self.c_miss * self.p_tar * p_miss + self.c_fa * (1.0 - self.p_tar) * p_fa) / self.default_cost()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// Miss and false-alarm rates at every distinct score and at `+inf`, in
/// increasing threshold order.
pub fn operating_points(s: &ScoreSet) -> Result<Vec<OperatingPoint>, MetricsError> {
    s.check()?;
    let mut tar = s.target.clone();
    let mut non = s.nontarget.clone();
    tar.sort_by(f64::total_cmp);
    non.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = tar.iter().chain(&non).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);

    let (nt, nn) = (tar.len() as f64, non.len() as f64);
    let (mut below_t, mut below_n) = (0usize, 0usize);
    Ok(thresholds
        .into_iter()
        .map(|t| {
            while below_t < tar.len() && tar[below_t] < t {
                below_t += 1;
            }
            while below_n < non.len() && non[below_n] < t {
                below_n += 1;
            }
            OperatingPoint {
                threshold: t,
                p_miss: below_t as f64 / nt,
                p_fa: (non.len() - below_n) as f64 / nn,
            }
        })
        .collect())
}

/// Index of the first operating point with `p_miss >= p_fa` and the
/// interpolation weight toward it from its predecessor.
fn eer_crossing(points: &[OperatingPoint]) -> (usize, f64) {
    // The first point always has p_miss = 0, p_fa = 1 and the last p_miss = 1,
    // p_fa = 0, so the crossing exists and has a predecessor.
    let i = points
        .iter()
        .position(|p| p.p_miss - p.p_fa >= 0.0)
        .expect("sweep ends at p_miss = 1");
    let d1 = points[i].p_miss - points[i].p_fa;
    if d1 == 0.0 {
        return (i, 1.0);
    }
    let d0 = points[i - 1].p_miss - points[i - 1].p_fa;
    (i, -d0 / (d1 - d0))
}

/// Equal error rate, linearly interpolated between the two operating points
/// where `p_miss - p_fa` changes sign. It exceeds 0.5 only for systems that
/// rank nontargets above targets.
pub fn compute_eer(s: &ScoreSet) -> Result<f64, MetricsError> {
    let pts = operating_points(s)?;
    let (i, alpha) = eer_crossing(&pts);
    if alpha == 1.0 {
        return Ok(pts[i].p_miss);
    }
    let (a, b) = (pts[i - 1], pts[i]);
    let p_miss = a.p_miss + alpha * (b.p_miss - a.p_miss);
    let p_fa = a.p_fa + alpha * (b.p_fa - a.p_fa);
    Ok(0.5 * (p_miss + p_fa))
}

/// Normalized cost at the interpolated EER point.
pub fn dcf_at_eer(s: &ScoreSet, p: &DcfParams) -> Result<f64, MetricsError> {
    p.validate()?;
    let eer = compute_eer(s)?;
    Ok(p.normalized_cost(eer, eer))
}

/// Minimum normalized detection cost over the threshold sweep.
pub fn compute_min_dcf(s: &ScoreSet, p: &DcfParams) -> Result<f64, MetricsError> {
    p.validate()?;
    Ok(operating_points(s)?
        .iter()
        .map(|o| p.normalized_cost(o.p_miss, o.p_fa))
        .fold(f64::INFINITY, f64::min))
}

/// DET staircase as `(p_fa, p_miss)`, from `(1, 0)` to `(0, 1)`.
pub fn det_curve(s: &ScoreSet) -> Result<Vec<(f64, f64)>, MetricsError> {
    let mut curve: Vec<(f64, f64)> = operating_points(s)?.iter().map(|o| (o.p_fa, o.p_miss)).collect();
    curve.dedup();
    Ok(curve)
}

pub fn write_det<W: Write>(mut w: W, curve: &[(f64, f64)]) -> std::io::Result<()> {
    writeln!(w, "p_fa\tp_miss")?;
    for (fa, miss) in curve {
        writeln!(w, "{fa:.9}\t{miss:.9}")?;
    }
    Ok(())
}

/// Summary of one evaluated system.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub system: String,
    pub eer: f64,
    pub min_dcf: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

impl EvalReport {
    pub fn evaluate(system: &str, s: &ScoreSet, p: &DcfParams) -> Result<Self, MetricsError> {
        Ok(Self {
            system: system.to_string(),
            eer: compute_eer(s)?,
            min_dcf: compute_min_dcf(s, p)?,
            n_target: s.target.len(),
            n_nontarget: s.nontarget.len(),
        })
    }

    pub const TSV_HEADER: &'static str = "system\tEER%\tminDCF\t#target\t#nontarget";

    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{:.4}\t{:.6}\t{}\t{}",
            self.system,
            100.0 * self.eer,
            self.min_dcf,
            self.n_target,
            self.n_nontarget
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "system:      {}", self.system)?;
        writeln!(f, "trials:      {} target, {} nontarget", self.n_target, self.n_nontarget)?;
        writeln!(f, "EER:         {:.4}%", 100.0 * self.eer)?;
        write!(f, "minDCF:      {:.6}", self.min_dcf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(t: &[f64], n: &[f64]) -> ScoreSet {
        ScoreSet::new(t.to_vec(), n.to_vec())
    }

    #[test]
    fn eer_examples() {
        assert_eq!(compute_eer(&set(&[0.9, 0.8, 0.3], &[0.7, 0.2, 0.1])).unwrap(), 1.0 / 3.0);
        assert_eq!(compute_eer(&set(&[3.0, 4.0], &[1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(compute_eer(&set(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0])).unwrap(), 0.5);
        assert_eq!(compute_eer(&set(&[1.0, 2.0], &[2.0, 1.0])).unwrap(), 0.5);
        assert_eq!(compute_eer(&set(&[5.0], &[5.0])).unwrap(), 0.5);
    }

    #[test]
    fn empty_sets_are_errors() {
        assert_eq!(compute_eer(&set(&[], &[1.0])), Err(MetricsError::NoTargets));
        assert_eq!(compute_min_dcf(&set(&[1.0], &[]), &DcfParams::default()), Err(MetricsError::NoNontargets));
        assert_eq!(det_curve(&set(&[f64::NAN], &[1.0])), Err(MetricsError::NonFinite));
    }

    #[test]
    fn min_dcf_examples() {
        let p = DcfParams::default();
        assert!((p.default_cost() - 0.1).abs() < 1e-15);
        assert_eq!(compute_min_dcf(&set(&[3.0, 4.0], &[1.0, 2.0]), &p).unwrap(), 0.0);
        assert_eq!(compute_min_dcf(&set(&[1.0; 4], &[1.0; 9]), &p).unwrap(), 1.0);
        // tar [0.9, 0.8, 0.3], non [0.7, 0.2, 0.1]: best is t = 0.8 (one false
        // alarm removed, no misses up to 0.8): p_miss 1/3, p_fa 0.
        let v = compute_min_dcf(&set(&[0.9, 0.8, 0.3], &[0.7, 0.2, 0.1]), &p).unwrap();
        let at_08 = (10.0 * 0.01 / 3.0) / 0.1;
        assert!((v - at_08).abs() < 1e-15, "{v}");
    }

    #[test]
    fn det_examples() {
        let c = det_curve(&set(&[3.0, 4.0], &[1.0, 2.0])).unwrap();
        assert_eq!(c.first(), Some(&(1.0, 0.0)));
        assert_eq!(c.last(), Some(&(0.0, 1.0)));
        assert!(c.contains(&(0.0, 0.0)));
        for w in c.windows(2) {
            assert!(w[1].0 <= w[0].0 && w[1].1 >= w[0].1);
        }
    }

    #[test]
    fn report_formats() {
        let r = EvalReport::evaluate("sys", &set(&[0.9, 0.8, 0.3], &[0.7, 0.2, 0.1]), &DcfParams::default()).unwrap();
        assert_eq!(r.tsv_row(), "sys\t33.3333\t0.333333\t3\t3");
        assert!(r.to_string().contains("EER:         33.3333%"));
    }
}
