use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, TensorError, Var};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// `n` values in `(-1, 1)` drawn from a shuffled uniform grid, so any two
/// differ by at least `2/n`. Keeps max-type ops away from ties.
pub fn separated_values<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut slots: Vec<usize> = (0..n).collect();
    slots.shuffle(rng);
    let step = 2.0 / n as f64;
    slots
        .into_iter()
        .map(|s| -1.0 + (s as f64 + 0.25 + 0.5 * rng.gen::<f64>()) * step)
        .collect()
}

/// Compares the tape's analytic gradient of `Σ rᵢ·opᵢ(inputs)` (random fixed
/// `r`) against central differences, over every input coordinate.
///
/// Relative error per coordinate is
/// `|a − n| / max(|a|, |n|, 1e-8)`; the report holds the maximum.
pub fn grad_check<F>(op: F, shapes: &[Vec<usize>], seed: u64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs: Vec<Tensor<f64>> = shapes
        .iter()
        .map(|s| {
            let n = s.iter().product();
            Tensor::new(s.clone(), separated_values(n, &mut rng))
        })
        .collect::<Result<_, _>>()?;

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = op(&mut tape, &vars)?;
    let n_out = tape.value(out)?.len();
    let probe: Vec<f64> = (0..n_out).map(|_| rng.gen_range(0.5..1.5)).collect();
    let loss = tape.weighted_sum(out, probe.clone())?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| Ok(tape.grad(v)?.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()])))
        .collect::<Result<_, TensorError>>()?;

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = op(&mut tape, &vars)?;
        let loss = tape.weighted_sum(out, probe.clone())?;
        Ok(tape.value(loss)?.data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    for i in 0..inputs.len() {
        for c in 0..inputs[i].len() {
            let orig = inputs[i].data()[c];
            inputs[i].data_mut()[c] = orig + FD_STEP;
            let plus = eval(&inputs)?;
            inputs[i].data_mut()[c] = orig - FD_STEP;
            let minus = eval(&inputs)?;
            inputs[i].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let rel = relative_error(analytic[i][c], numeric);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (i, c);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

pub(crate) fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_values_are_separated() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut v = separated_values(500, &mut rng);
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let min_gap = v.windows(2).map(|w| w[1] - w[0]).fold(f64::MAX, f64::min);
        assert!(min_gap >= 2.0 / 500.0 * 0.5 - 1e-15);
        assert!(v.iter().all(|x| x.abs() < 1.0));
    }

    #[test]
    fn dense_8_to_4() {
        let r = grad_check(
            |t, v| t.dense(v[0], v[1], Some(v[2])),
            &[vec![8], vec![4, 8], vec![4]],
            11,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn conv_5x5_4_to_6() {
        let r = grad_check(
            |t, v| t.conv2d_same(v[0], v[1], v[2]),
            &[vec![1, 8, 8, 4], vec![6, 5, 5, 4], vec![6]],
            12,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn mfm_4x4x8() {
        let r = grad_check(|t, v| t.mfm(v[0]), &[vec![1, 4, 4, 8]], 13).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn softmax_xent_k5() {
        let r = grad_check(|t, v| t.softmax_xent(v[0], &[2]), &[vec![5]], 14).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
