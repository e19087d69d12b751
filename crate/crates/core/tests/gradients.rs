//! Finite-difference checks of every differentiable layer at f64, three
//! seeds each.

use digitvox::tensor::{grad_check, GradCheckReport};

const SEEDS: [u64; 3] = [1, 2, 3];

fn check_all(tol: f64, run: impl Fn(u64) -> GradCheckReport) {
    for seed in SEEDS {
        let r = run(seed);
        assert!(r.coordinates > 0);
        assert!(r.max_rel_error < tol, "seed {seed}: {r:?}");
    }
}

#[test]
fn conv2d_same_matches_central_differences() {
    check_all(1e-4, |seed| {
        grad_check(
            |t, v| t.conv2d_same(v[0], v[1], v[2]),
            &[vec![2, 6, 7, 3], vec![4, 3, 3, 3], vec![4]],
            seed,
        )
        .unwrap()
    });
    check_all(1e-4, |seed| {
        grad_check(
            |t, v| t.conv2d_same(v[0], v[1], v[2]),
            &[vec![1, 7, 5, 2], vec![3, 5, 5, 2], vec![3]],
            seed,
        )
        .unwrap()
    });
}

#[test]
fn maxpool2x2_matches_central_differences() {
    check_all(1e-4, |seed| {
        grad_check(|t, v| t.maxpool2x2(v[0]), &[vec![2, 6, 8, 3]], seed).unwrap()
    });
}

#[test]
fn mfm_matches_central_differences() {
    check_all(1e-6, |seed| grad_check(|t, v| t.mfm(v[0]), &[vec![2, 3, 4, 6]], seed).unwrap());
    check_all(1e-6, |seed| grad_check(|t, v| t.mfm(v[0]), &[vec![3, 10]], seed).unwrap());
}

#[test]
fn dense_matches_central_differences() {
    check_all(1e-6, |seed| {
        grad_check(
            |t, v| t.dense(v[0], v[1], Some(v[2])),
            &[vec![3, 7], vec![5, 7], vec![5]],
            seed,
        )
        .unwrap()
    });
    check_all(1e-6, |seed| {
        grad_check(|t, v| t.dense(v[0], v[1], None), &[vec![2, 4], vec![6, 4]], seed).unwrap()
    });
}

#[test]
fn softmax_xent_matches_central_differences() {
    check_all(1e-6, |seed| {
        grad_check(|t, v| t.softmax_xent(v[0], &[2, 0, 5, 5]), &[vec![4, 6]], seed).unwrap()
    });
}
