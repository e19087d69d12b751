use std::collections::HashSet;

use digitvox::corpus::{
    compute_features, parse_enrollment_lists, parse_manifest, parse_trials, synth_corpus, FeatureSource, SynthSpec,
    Synthesizer, N_DIGITS,
};
use digitvox::dsp::{extract_logmel, AudioBuffer, LogMelConfig};
use digitvox::verify::TrialLabel;

/// Pitch from the autocorrelation over 60–300 Hz on a central 40 ms window.
fn autocorr_pitch(audio: &AudioBuffer) -> f64 {
    let sr = audio.sample_rate as f64;
    let win = (0.04 * sr) as usize;
    let mid = audio.samples.len() / 2;
    let x: Vec<f64> = audio.samples[mid - win / 2..mid + win / 2].iter().map(|&v| v as f64).collect();
    let lag_min = (sr / 300.0) as usize;
    let lag_max = (sr / 60.0) as usize;
    let r = |lag: usize| -> f64 { x.iter().zip(&x[lag..]).map(|(a, b)| a * b).sum::<f64>() / (x.len() - lag) as f64 };
    let peak = (lag_min..=lag_max).map(r).fold(f64::MIN, f64::max);
    // The shortest lag with a near-maximal local peak; longer lags repeat
    // the period and would report a subharmonic.
    let best = (lag_min + 1..lag_max)
        .find(|&lag| r(lag) >= 0.9 * peak && r(lag) >= r(lag - 1) && r(lag) >= r(lag + 1))
        .unwrap();
    // Parabolic refinement around the peak.
    let (l, c, h) = (r(best - 1), r(best), r(best + 1));
    let denom = l - 2.0 * c + h;
    let shift = if denom.abs() > 0.0 { 0.5 * (l - h) / denom } else { 0.0 };
    sr / (best as f64 + shift)
}

#[test]
fn speakers_have_distinct_measurable_pitch() {
    let synth = Synthesizer::new(SynthSpec::default()).unwrap();
    let mut measured: Vec<(f64, f64)> = (0..synth.spec().n_speakers)
        .map(|s| {
            let audio = synth.render(s, 0, 0);
            (autocorr_pitch(&audio), synth.session_f0(s, 0))
        })
        .collect();
    for &(est, truth) in &measured {
        assert!((est - truth).abs() < 0.03 * truth, "estimated {est} Hz, generated {truth} Hz");
    }
    measured.sort_by(|a, b| a.0.total_cmp(&b.0));
    for w in measured.windows(2) {
        assert!(w[1].0 - w[0].0 >= 5.0, "{w:?}");
    }
}

#[test]
fn digits_are_separable_from_raw_spectra() {
    // Nearest class mean on the utterance-average log-mel spectrum. Means
    // come from sessions 0..3, tests from sessions 3..8.
    let synth = Synthesizer::new(SynthSpec { n_speakers: 8, ..SynthSpec::default() }).unwrap();
    let cfg = LogMelConfig::default();
    let profile = |s: usize, session: u32, d: u32| -> Vec<f64> {
        let feat = extract_logmel(&synth.render(s, session, d), &cfg).unwrap();
        let mut m: Vec<f64> = (0..feat.n_bands)
            .map(|b| feat.band(b).iter().map(|&v| v as f64).sum::<f64>() / feat.n_frames as f64)
            .collect();
        let mean = m.iter().sum::<f64>() / m.len() as f64;
        m.iter_mut().for_each(|v| *v -= mean);
        m
    };
    let n_bands = cfg.n_bands;
    let mut means = vec![vec![0.0; n_bands]; N_DIGITS as usize];
    let mut count = 0.0;
    for s in 0..8 {
        for session in 0..3 {
            count += 1.0;
            for d in 0..N_DIGITS {
                for (m, v) in means[d as usize].iter_mut().zip(profile(s, session, d)) {
                    *m += v;
                }
            }
        }
    }
    means.iter_mut().flatten().for_each(|v| *v /= count);
    let (mut correct, mut total) = (0, 0);
    for s in 0..8 {
        for session in 3..8 {
            for d in 0..N_DIGITS {
                let p = profile(s, session, d);
                let dist = |m: &Vec<f64>| m.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let guess = (0..N_DIGITS as usize).min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b]))).unwrap();
                correct += usize::from(guess == d as usize);
                total += 1;
            }
        }
    }
    let acc = correct as f64 / total as f64;
    assert!(acc > 0.8, "digit accuracy {acc}");
}

#[test]
fn synthesis_is_byte_identical_across_runs_and_workers() {
    let spec = SynthSpec {
        n_speakers: 3,
        sessions: 4,
        enroll_sessions: 2,
        passphrase_len: 3,
        nontarget_ratio: 2,
        ..SynthSpec::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let out_a = synth_corpus(&spec, a.path(), 1).unwrap();
    let out_b = synth_corpus(&spec, b.path(), 3).unwrap();
    assert_eq!(out_a.n_utterances, 3 * 4 * 10);
    assert_eq!(out_b.n_trials, out_a.n_trials);
    let mut files: Vec<_> = walk(a.path());
    files.sort();
    assert_eq!(files.len(), 120 + 4);
    for rel in &files {
        let x = std::fs::read(a.path().join(rel)).unwrap();
        let y = std::fs::read(b.path().join(rel)).unwrap();
        assert!(x == y, "{} differs", rel.display());
    }

    // The written lists parse back and point at real audio.
    let manifest = parse_manifest(&out_a.manifest).unwrap();
    let train = parse_manifest(&out_a.train_manifest).unwrap();
    assert_eq!(train.len(), 3 * 2 * 10);
    assert!(train.iter().all(|e| e.session < 2));
    let source = FeatureSource::audio(a.path());
    let feat = compute_features(&manifest[17], &source).unwrap();
    assert!(feat.is_network_input());
    let lists = parse_enrollment_lists(&out_a.enrollment).unwrap();
    assert_eq!(lists.len(), 3);
    let trials = parse_trials(&out_a.trials).unwrap();
    assert_eq!(trials.len(), out_a.n_trials);
    let ids: HashSet<&str> = manifest.iter().map(|e| e.utt_id.as_str()).collect();
    for t in &trials {
        assert!(t.passphrase.iter().all(|(_, u)| ids.contains(u.as_str())));
    }
}

#[test]
fn default_corpus_shape() {
    let synth = Synthesizer::new(SynthSpec::default()).unwrap();
    let manifest = synth.manifest();
    assert_eq!(manifest.len(), 1600);
    let trials = synth.trials();
    let targets = trials.iter().filter(|t| t.label == TrialLabel::Target).count();
    assert_eq!(targets, 20 * 5);
    assert_eq!(trials.len() - targets, 10 * targets);
    for e in manifest.iter().step_by(53) {
        let speaker: usize = e.speaker_id[3..].parse().unwrap();
        let d = synth.render(speaker, e.session, e.digit).duration_s();
        assert!((e.end_s - d).abs() < 1e-12, "{}", e.utt_id);
    }
}

fn walk(root: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out
}
