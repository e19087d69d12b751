//! Exact t-SNE with plain-text and SVG export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::MetricsError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    /// Iteration at which momentum rises from 0.5 to 0.8.
    pub momentum_switch: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            exaggeration: 4.0,
            exaggeration_iters: 100,
            momentum_switch: 250,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneResult {
    pub coords: Vec<[f64; 2]>,
    /// KL(P || Q) against the unexaggerated P after every iteration.
    pub kl: Vec<f64>,
}

const PERPLEXITY_TOL: f64 = 1e-5;
const MAX_RETRIES: usize = 30;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Symmetrized joint probabilities `P` (row-major `n × n`, zero diagonal).
/// Each conditional distribution is calibrated by bisection on the Gaussian
/// precision until its perplexity is within 1e-5 of the target.
pub fn joint_probabilities(x: &[Vec<f64>], perplexity: f64) -> Result<Vec<f64>, MetricsError> {
    let n = x.len();
    if n < 4 {
        return Err(MetricsError::InvalidParameter(format!("t-SNE needs at least 4 points, got {n}")));
    }
    if !(perplexity > 0.0 && perplexity < (n as f64 - 1.0) / 3.0) {
        return Err(MetricsError::InfeasiblePerplexity { perplexity, n });
    }
    let dim = x[0].len();
    if x.iter().any(|r| r.len() != dim) {
        return Err(MetricsError::LengthMismatch("rows of different dimension".into()));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let target_h = perplexity.ln();
    let mut cond = vec![0.0; n * n];
    for i in 0..n {
        let d: Vec<f64> = (0..n).map(|j| if i == j { 0.0 } else { sq_dist(&x[i], &x[j]) }).collect();
        let dmin = (0..n).filter(|&j| j != i).map(|j| d[j]).fold(f64::INFINITY, f64::min);
        let (mut lo, mut hi, mut beta) = (0.0, f64::INFINITY, 1.0);
        let row = &mut cond[i * n..(i + 1) * n];
        for _ in 0..200 {
            // Shifting by the nearest distance leaves the normalized row unchanged.
            let mut sum = 0.0;
            for j in 0..n {
                row[j] = if j == i { 0.0 } else { (-beta * (d[j] - dmin)).exp() };
                sum += row[j];
            }
            let mut h = 0.0;
            for j in 0..n {
                row[j] /= sum;
                if row[j] > 0.0 {
                    h -= row[j] * row[j].ln();
                }
            }
            let diff = h - target_h;
            if diff.abs() < PERPLEXITY_TOL {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
        }
    }
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64);
        }
    }
    Ok(p)
}

/// Student-t similarities `Q` of a 2-D layout and their unnormalized kernel.
fn q_kernel(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut z = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let v = 1.0 / (1.0 + sq_dist(&y[i], &y[j]));
            num[i * n + j] = v;
            num[j * n + i] = v;
            z += 2.0 * v;
        }
    }
    (num, z)
}

pub fn student_q(y: &[[f64; 2]]) -> Vec<f64> {
    let (mut num, z) = q_kernel(y);
    num.iter_mut().for_each(|v| *v /= z);
    num
}

pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(f64::MIN_POSITIVE)).ln())
        .sum()
}

fn kl_of(p: &[f64], y: &[[f64; 2]]) -> f64 {
    kl_divergence(p, &student_q(y))
}

fn gradient(p: &[f64], y: &[[f64; 2]], exaggeration: f64) -> Vec<[f64; 2]> {
    let n = y.len();
    let (num, z) = q_kernel(y);
    let mut g = vec![[0.0; 2]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let k = num[i * n + j];
            let m = 4.0 * (exaggeration * p[i * n + j] - k / z) * k;
            g[i][0] += m * (y[i][0] - y[j][0]);
            g[i][1] += m * (y[i][1] - y[j][1]);
        }
    }
    g
}

/// Projects rows of `x` to 2-D.
///
/// Plain gradient descent with momentum (0.5, then 0.8) and early
/// exaggeration. After the exaggeration phase every step is checked: a step
/// that would raise the KL divergence is retried with zero momentum and a
/// halved step size, so the recorded KL never increases from then on.
pub fn tsne_project(x: &[Vec<f64>], cfg: &TsneConfig) -> Result<TsneResult, MetricsError> {
    let p = joint_probabilities(x, cfg.perplexity)?;
    let n = x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0, 1e-4).expect("valid sigma");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [init.sample(&mut rng), init.sample(&mut rng)]).collect();
    let mut vel = vec![[0.0; 2]; n];
    let mut kl = Vec::with_capacity(cfg.iterations);
    let mut current_kl = kl_of(&p, &y);
    let mut scale = 1.0;

    for it in 0..cfg.iterations {
        let momentum = if it < cfg.momentum_switch { 0.5 } else { 0.8 };
        let exaggerating = it < cfg.exaggeration_iters;
        let g = gradient(&p, &y, if exaggerating { cfg.exaggeration } else { 1.0 });
        let step = |vel: &[[f64; 2]], mom: f64, lr: f64| -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
            let v: Vec<[f64; 2]> = vel
                .iter()
                .zip(&g)
                .map(|(v, g)| [mom * v[0] - lr * g[0], mom * v[1] - lr * g[1]])
                .collect();
            let mut ny: Vec<[f64; 2]> = y.iter().zip(&v).map(|(y, v)| [y[0] + v[0], y[1] + v[1]]).collect();
            let cx = ny.iter().map(|p| p[0]).sum::<f64>() / n as f64;
            let cy = ny.iter().map(|p| p[1]).sum::<f64>() / n as f64;
            ny.iter_mut().for_each(|p| {
                p[0] -= cx;
                p[1] -= cy;
            });
            (ny, v)
        };
        if exaggerating {
            let (ny, v) = step(&vel, momentum, cfg.learning_rate);
            y = ny;
            vel = v;
            current_kl = kl_of(&p, &y);
        } else {
            let (mut ny, mut v) = step(&vel, momentum, cfg.learning_rate * scale);
            let mut new_kl = kl_of(&p, &ny);
            let mut tries = 0;
            while (new_kl > current_kl || new_kl.is_nan()) && tries < MAX_RETRIES {
                scale *= 0.5;
                (ny, v) = step(&vec![[0.0; 2]; n], 0.0, cfg.learning_rate * scale);
                new_kl = kl_of(&p, &ny);
                tries += 1;
            }
            if new_kl <= current_kl {
                y = ny;
                vel = v;
                current_kl = new_kl;
                scale = (scale * 1.2).min(1.0);
            } else {
                vel = vec![[0.0; 2]; n];
            }
        }
        kl.push(current_kl);
    }
    if y.iter().flatten().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    Ok(TsneResult { coords: y, kl })
}

/// One projected utterance with the labels used for display.
#[derive(Debug, Clone, PartialEq)]
pub struct TsnePoint {
    pub utt_id: String,
    pub x: f64,
    pub y: f64,
    pub speaker_id: String,
    pub digit: u32,
}

pub fn write_tsne_tsv<W: Write>(mut w: W, points: &[TsnePoint]) -> std::io::Result<()> {
    writeln!(w, "utt_id\tx\ty\tspeaker_id\tdigit")?;
    for p in points {
        writeln!(w, "{}\t{:.6}\t{:.6}\t{}\t{}", p.utt_id, p.x, p.y, p.speaker_id, p.digit)?;
    }
    Ok(())
}

/// Scatter plot: one color per speaker, each point drawn as its digit.
pub fn tsne_svg(points: &[TsnePoint]) -> String {
    const SIZE: f64 = 800.0;
    const MARGIN: f64 = 40.0;
    let speakers: BTreeMap<&str, usize> = {
        let mut ids: Vec<&str> = points.iter().map(|p| p.speaker_id.as_str()).collect();
        ids.sort();
        ids.dedup();
        ids.into_iter().enumerate().map(|(i, s)| (s, i)).collect()
    };
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-12);
    let map = |v: f64, lo: f64| MARGIN + (v - lo) / span * (SIZE - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for p in points {
        let hue = 360.0 * speakers[p.speaker_id.as_str()] as f64 / speakers.len().max(1) as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" fill="hsl({hue:.0},70%,40%)" font-size="12" font-family="monospace" text-anchor="middle">{}</text>"#,
            map(p.x, x0),
            SIZE - map(p.y, y0),
            p.digit
        );
    }
    let _ = writeln!(svg, "</svg>");
    svg
}
