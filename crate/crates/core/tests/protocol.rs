use std::collections::BTreeMap;

use digitvox::verify::*;
use proptest::prelude::*;

fn embedding(dim: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-2.0f32..2.0, dim).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

/// Enrollment over digits 0..n with three sessions each, plus one test
/// embedding per digit.
fn setup(n: usize, dim: usize) -> impl Strategy<Value = (Vec<[Vec<f32>; 3]>, Vec<Vec<f32>>)> {
    (
        prop::collection::vec([embedding(dim), embedding(dim), embedding(dim)], n),
        prop::collection::vec(embedding(dim), n),
    )
}

fn enroll(sessions: &[[Vec<f32>; 3]]) -> EnrollmentModel {
    let samples: Vec<(u32, &[f32])> = sessions
        .iter()
        .enumerate()
        .flat_map(|(d, s)| s.iter().map(move |v| (d as u32, v.as_slice())))
        .collect();
    build_enrollment("m", &samples).unwrap()
}

proptest! {
    #[test]
    fn cosine_is_scale_invariant(
        (enr, test) in setup(4, 16),
        scale in prop::collection::vec(1e-3f32..1e3, 4),
    ) {
        let model = enroll(&enr);
        let plain: Vec<(u32, &[f32])> = test.iter().enumerate().map(|(d, v)| (d as u32, v.as_slice())).collect();
        let scaled_vecs: Vec<Vec<f32>> = test.iter().zip(&scale).map(|(v, s)| v.iter().map(|x| x * s).collect()).collect();
        let scaled: Vec<(u32, &[f32])> = scaled_vecs.iter().enumerate().map(|(d, v)| (d as u32, v.as_slice())).collect();
        let (a, _) = score_passphrase(&model, &plain).unwrap();
        let (b, _) = score_passphrase(&model, &scaled).unwrap();
        prop_assert!((a - b).abs() < 1e-6, "{} {}", a, b);
        prop_assert!((-1.0..=1.0).contains(&a));
    }

    #[test]
    fn passphrase_score_ignores_digit_order(
        (enr, test) in setup(5, 8),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let model = enroll(&enr);
        let items: Vec<(u32, &[f32])> = test.iter().enumerate().map(|(d, v)| (d as u32, v.as_slice())).collect();
        let mut shuffled = items.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(score_passphrase(&model, &items).unwrap().0, score_passphrase(&model, &shuffled).unwrap().0);
    }

    #[test]
    fn test_equal_to_enrollment_mean_scores_one(
        (enr, _) in setup(5, 8),
    ) {
        // Three identical sessions make the mean exactly representable in f32.
        let same: Vec<[Vec<f32>; 3]> = enr.iter().map(|s| [s[0].clone(), s[0].clone(), s[0].clone()]).collect();
        let model = enroll(&same);
        let items: Vec<(u32, &[f32])> = same.iter().enumerate().map(|(d, s)| (d as u32, s[0].as_slice())).collect();
        let (score, subs) = score_passphrase(&model, &items).unwrap();
        prop_assert_eq!(score, 1.0);
        prop_assert!(subs.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn dropping_a_digit_leaves_the_other_sub_scores(
        (enr, test) in setup(5, 8),
        drop in 0usize..5,
    ) {
        let model = enroll(&enr);
        let items: Vec<(u32, &[f32])> = test.iter().enumerate().map(|(d, v)| (d as u32, v.as_slice())).collect();
        let (_, subs) = score_passphrase(&model, &items).unwrap();
        let fewer_enr: Vec<(u32, &[f32])> = enr
            .iter()
            .enumerate()
            .filter(|(d, _)| *d != drop)
            .flat_map(|(d, s)| s.iter().map(move |v| (d as u32, v.as_slice())))
            .collect();
        let fewer_model = build_enrollment("m", &fewer_enr).unwrap();
        let fewer: Vec<(u32, &[f32])> = items.iter().copied().filter(|(d, _)| *d as usize != drop).collect();
        let (score, _) = score_passphrase(&fewer_model, &fewer).unwrap();
        let mut rest: Vec<f64> = subs.iter().enumerate().filter(|(d, _)| *d != drop).map(|(_, s)| *s).collect();
        rest.sort_by(f64::total_cmp);
        prop_assert_eq!(score, rest.iter().sum::<f64>() / rest.len() as f64);
    }
}

#[test]
fn protocol_scores_match_manual_computation() {
    let mut emb: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    for (i, name) in ["e0", "e1", "e2", "t0", "t1"].iter().enumerate() {
        emb.insert(name.to_string(), vec![1.0 + i as f32, 0.5, -(i as f32)]);
    }
    let lists = vec![EnrollmentList {
        model_id: "spk".into(),
        items: vec![(1, "e0".into()), (1, "e1".into()), (2, "e2".into())],
    }];
    let models = enroll_all(&lists, &emb).unwrap();
    let trials = vec![TrialRecord {
        model_id: "spk".into(),
        passphrase: vec![(1, "t0".into()), (2, "t1".into())],
        label: TrialLabel::Target,
    }];
    let scores = run_protocol(&trials, &models, &emb).unwrap();
    let mean1: Vec<f64> = (0..3).map(|k| 0.5 * (emb["e0"][k] as f64 + emb["e1"][k] as f64)).collect();
    let as64 = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let s1 = cosine_score(&mean1, &as64(&emb["t0"])).unwrap();
    let s2 = cosine_score(&as64(&emb["e2"]), &as64(&emb["t1"])).unwrap();
    assert_eq!(scores[0].sub_scores, vec![s1, s2]);
    assert!((scores[0].score - 0.5 * (s1 + s2)).abs() < 1e-15);

    let dangling = vec![TrialRecord {
        model_id: "spk".into(),
        passphrase: vec![(1, "missing".into())],
        label: TrialLabel::Unknown,
    }];
    assert!(matches!(run_protocol(&dangling, &models, &emb), Err(VerifyError::DanglingUtterance(_))));
}
