//! Prior-weighted linear logistic regression over system scores.

use serde::{Deserialize, Serialize};

use super::MetricsError;

const MAX_ITERS: usize = 10_000;
const GRAD_TOL: f64 = 1e-8;

/// `fused = offset + Σ weights[i] · score_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub weights: Vec<f64>,
    pub offset: f64,
    /// Effective target prior used in training.
    pub prior: f64,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct Problem<'a> {
    /// One row of `k` system scores per trial.
    rows: Vec<Vec<f64>>,
    labels: &'a [bool],
    weight_tar: f64,
    weight_non: f64,
    logit_prior: f64,
}

impl Problem<'_> {
    /// Parameters are `[w_1 .. w_k, w_0]`.
    fn margin(&self, theta: &[f64], row: &[f64]) -> f64 {
        let k = row.len();
        row.iter().zip(theta).map(|(s, w)| s * w).sum::<f64>() + theta[k] + self.logit_prior
    }

    fn loss(&self, theta: &[f64]) -> f64 {
        self.rows
            .iter()
            .zip(self.labels)
            .map(|(row, &is_tar)| {
                let z = self.margin(theta, row);
                if is_tar {
                    self.weight_tar * softplus(-z)
                } else {
                    self.weight_non * softplus(z)
                }
            })
            .sum()
    }

    fn grad_hess(&self, theta: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let d = theta.len();
        let mut g = vec![0.0; d];
        let mut h = vec![vec![0.0; d]; d];
        let mut x = vec![1.0; d];
        for (row, &is_tar) in self.rows.iter().zip(self.labels) {
            x[..d - 1].copy_from_slice(row);
            let z = self.margin(theta, row);
            let p = sigmoid(z);
            let (c, r) = if is_tar {
                (-self.weight_tar * (1.0 - p), self.weight_tar)
            } else {
                (self.weight_non * p, self.weight_non)
            };
            let curv = r * p * (1.0 - p);
            for i in 0..d {
                g[i] += c * x[i];
                for j in 0..d {
                    h[i][j] += curv * x[i] * x[j];
                }
            }
        }
        (g, h)
    }
}

/// Solves `a·x = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Fits fusion weights on labeled scores.
///
/// `systems[i][j]` is system `i`'s score for trial `j`. The objective is the
/// prior-weighted mean logistic loss; it is minimized by damped Newton steps
/// with a backtracking line search until the gradient norm drops below 1e-8
/// or the iteration cap is reached.
pub fn fusion_train(systems: &[&[f64]], labels: &[bool], prior: f64) -> Result<FusionModel, MetricsError> {
    if systems.is_empty() {
        return Err(MetricsError::InvalidParameter("no systems to fuse".into()));
    }
    if !(prior > 0.0 && prior < 1.0) {
        return Err(MetricsError::InvalidParameter(format!("prior {prior} not in (0, 1)")));
    }
    for (i, s) in systems.iter().enumerate() {
        if s.len() != labels.len() {
            return Err(MetricsError::LengthMismatch(format!(
                "system {i} has {} scores for {} labels",
                s.len(),
                labels.len()
            )));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::NonFinite);
        }
    }
    let n_tar = labels.iter().filter(|&&l| l).count();
    let n_non = labels.len() - n_tar;
    if n_tar == 0 {
        return Err(MetricsError::NoTargets);
    }
    if n_non == 0 {
        return Err(MetricsError::NoNontargets);
    }
    let k = systems.len();
    let problem = Problem {
        rows: (0..labels.len()).map(|j| systems.iter().map(|s| s[j]).collect()).collect(),
        labels,
        weight_tar: prior / n_tar as f64,
        weight_non: (1.0 - prior) / n_non as f64,
        logit_prior: (prior / (1.0 - prior)).ln(),
    };

    let mut theta = vec![0.0; k + 1];
    theta[k] = -problem.logit_prior;
    let mut loss = problem.loss(&theta);
    for _ in 0..MAX_ITERS {
        let (g, h) = problem.grad_hess(&theta);
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm < GRAD_TOL {
            break;
        }
        let neg_g: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut dir = solve(h, neg_g.clone()).unwrap_or_else(|| neg_g.clone());
        let mut slope: f64 = dir.iter().zip(&g).map(|(d, g)| d * g).sum();
        if slope >= 0.0 {
            dir = neg_g;
            slope = -gnorm * gnorm;
        }
        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..60 {
            let cand: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + step * d).collect();
            let l = problem.loss(&cand);
            if l <= loss + 1e-4 * step * slope {
                theta = cand;
                loss = l;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    Ok(FusionModel {
        weights: theta[..k].to_vec(),
        offset: theta[k],
        prior,
    })
}

/// `fused_j = offset + Σ_i weights[i] · systems[i][j]`.
pub fn fusion_apply(model: &FusionModel, systems: &[&[f64]]) -> Result<Vec<f64>, MetricsError> {
    if systems.len() != model.weights.len() {
        return Err(MetricsError::LengthMismatch(format!(
            "model fuses {} systems, got {}",
            model.weights.len(),
            systems.len()
        )));
    }
    let n = systems.first().map_or(0, |s| s.len());
    if let Some(s) = systems.iter().find(|s| s.len() != n) {
        return Err(MetricsError::LengthMismatch(format!(
            "score vectors of length {n} and {}",
            s.len()
        )));
    }
    Ok((0..n)
        .map(|j| {
            model
                .weights
                .iter()
                .zip(systems)
                .fold(model.offset, |acc, (w, s)| acc + w * s[j])
        })
        .collect())
}
