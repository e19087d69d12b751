//! Fixtures shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Two systems observing one latent per trial through independent noise.
pub struct SharedLatent {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub labels: Vec<bool>,
}

/// Latent is N(+1, 1) for targets and N(-1, 1) for nontargets; system `a`
/// adds N(0, 1) noise and system `b` adds N(0, 1.3²) noise plus an affine
/// miscalibration.
pub fn shared_latent(seed: u64, n_target: usize, n_nontarget: usize) -> SharedLatent {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let mut out = SharedLatent {
        a: Vec::new(),
        b: Vec::new(),
        labels: Vec::new(),
    };
    for i in 0..n_target + n_nontarget {
        let is_target = i < n_target;
        let z = if is_target { 1.0 } else { -1.0 } + unit.sample(&mut rng);
        out.a.push(z + unit.sample(&mut rng));
        out.b.push(3.0 * (z + 1.3 * unit.sample(&mut rng)) - 2.0);
        out.labels.push(is_target);
    }
    out
}

pub fn split(scores: &[f64], labels: &[bool]) -> digitvox::metrics::ScoreSet {
    let mut s = digitvox::metrics::ScoreSet::default();
    for (&v, &l) in scores.iter().zip(labels) {
        if l {
            s.target.push(v);
        } else {
            s.nontarget.push(v);
        }
    }
    s
}
