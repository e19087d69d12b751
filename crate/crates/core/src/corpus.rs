//! Manifests, protocol files and the synthetic digit corpus.
//!
//! The synthetic generator gives every speaker a fixed voice (pitch, vocal
//! tract scale, spectral tilt and an extra high resonance) and every digit a
//! fixed three-part formant pattern. Utterances are harmonic tones shaped by
//! both, with small per-session variation and additive noise.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{self, AudioBuffer, DspError, FeatureMatrix, LogMelConfig};
use crate::verify::{EnrollmentList, TrialLabel, TrialRecord};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: line {line}: {msg}")]
    Line { path: String, line: usize, msg: String },
    #[error("invalid synth spec: {0}")]
    Spec(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{utt_id}: {source}")]
    Audio {
        utt_id: String,
        #[source]
        source: DspError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One digit segment of one recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub speaker_id: String,
    pub digit: u32,
    pub session: u32,
    /// Audio path, relative paths resolve against the manifest's directory.
    pub path: String,
    pub start_s: f64,
    pub end_s: f64,
}

impl ManifestEntry {
    pub fn validate(&self) -> Result<(), String> {
        check_id("utt_id", &self.utt_id)?;
        check_id("speaker_id", &self.speaker_id)?;
        if self.digit > 9 {
            return Err(format!("digit {} out of range 0..9", self.digit));
        }
        if self.path.is_empty() {
            return Err("empty path".into());
        }
        if !(self.start_s >= 0.0 && self.end_s > self.start_s && self.end_s.is_finite()) {
            return Err(format!("bad segment [{}, {}]", self.start_s, self.end_s));
        }
        Ok(())
    }
}

/// Ids appear in tab/comma/colon separated files and as cache file names.
fn check_id(field: &str, id: &str) -> Result<(), String> {
    if id.is_empty() {
        return Err(format!("empty {field}"));
    }
    if let Some(c) = id
        .chars()
        .find(|c| c.is_whitespace() || matches!(c, ',' | ':' | '/' | '\\'))
    {
        return Err(format!("{field} {id:?} contains {c:?}"));
    }
    Ok(())
}

pub fn parse_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_manifest_str(&text, &path.display().to_string())
}

/// Parses JSON-lines text; `origin` names the source in diagnostics.
pub fn parse_manifest_str(text: &str, origin: &str) -> Result<Vec<ManifestEntry>, CorpusError> {
    let mut seen = std::collections::HashMap::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| CorpusError::Line {
            path: origin.to_string(),
            line: lineno,
            msg,
        };
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        entry.validate().map_err(err)?;
        if let Some(first) = seen.insert(entry.utt_id.clone(), lineno) {
            return Err(err(format!("duplicate utt_id {} (first on line {first})", entry.utt_id)));
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn write_manifest<W: Write>(mut w: W, entries: &[ManifestEntry]) -> std::io::Result<()> {
    for e in entries {
        let line = serde_json::to_string(e).map_err(std::io::Error::other)?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

fn parse_pairs(field: &str) -> Result<Vec<(u32, String)>, String> {
    if field.trim().is_empty() {
        return Err("empty passphrase".into());
    }
    field
        .split(',')
        .map(|pair| {
            let (d, utt) = pair
                .split_once(':')
                .ok_or_else(|| format!("malformed digit:utt pair {pair:?}"))?;
            let digit: u32 = d
                .trim()
                .parse()
                .map_err(|_| format!("malformed digit in pair {pair:?}"))?;
            if digit > 9 {
                return Err(format!("digit {digit} out of range 0..9"));
            }
            let utt = utt.trim();
            check_id("utt_id", utt)?;
            Ok((digit, utt.to_string()))
        })
        .collect()
}

fn join_pairs(items: &[(u32, String)]) -> String {
    items
        .iter()
        .map(|(d, u)| format!("{d}:{u}"))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn parse_trials(path: impl AsRef<Path>) -> Result<Vec<TrialRecord>, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_trials_str(&text, &path.display().to_string())
}

/// Lines of `model_id \t digit:utt,... \t label`.
pub fn parse_trials_str(text: &str, origin: &str) -> Result<Vec<TrialRecord>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| CorpusError::Line {
            path: origin.to_string(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, got {}", fields.len())));
        }
        let model_id = fields[0].trim();
        check_id("model_id", model_id).map_err(err)?;
        let passphrase = parse_pairs(fields[1]).map_err(err)?;
        let label: TrialLabel = fields[2].trim().parse().map_err(err)?;
        out.push(TrialRecord {
            model_id: model_id.to_string(),
            passphrase,
            label,
        });
    }
    Ok(out)
}

pub fn write_trials<W: Write>(mut w: W, trials: &[TrialRecord]) -> std::io::Result<()> {
    for t in trials {
        writeln!(w, "{}\t{}\t{}", t.model_id, join_pairs(&t.passphrase), t.label)?;
    }
    Ok(())
}

pub fn parse_enrollment_lists(path: impl AsRef<Path>) -> Result<Vec<EnrollmentList>, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_enrollment_lists_str(&text, &path.display().to_string())
}

/// Lines of `model_id \t digit:utt,...`.
pub fn parse_enrollment_lists_str(text: &str, origin: &str) -> Result<Vec<EnrollmentList>, CorpusError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| CorpusError::Line {
            path: origin.to_string(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(err(format!("expected 2 tab-separated fields, got {}", fields.len())));
        }
        let model_id = fields[0].trim();
        check_id("model_id", model_id).map_err(err)?;
        if !seen.insert(model_id.to_string()) {
            return Err(err(format!("duplicate model {model_id}")));
        }
        out.push(EnrollmentList {
            model_id: model_id.to_string(),
            items: parse_pairs(fields[1]).map_err(err)?,
        });
    }
    Ok(out)
}

pub fn write_enrollment_lists<W: Write>(mut w: W, lists: &[EnrollmentList]) -> std::io::Result<()> {
    for l in lists {
        writeln!(w, "{}\t{}", l.model_id, join_pairs(&l.items))?;
    }
    Ok(())
}

/// Equal-length `(start_s, end_s)` segments covering a passphrase.
pub fn uniform_split(duration_s: f64, n_digits: usize) -> Vec<(f64, f64)> {
    let step = duration_s / n_digits as f64;
    (0..n_digits)
        .map(|i| (i as f64 * step, if i + 1 == n_digits { duration_s } else { (i + 1) as f64 * step }))
        .collect()
}

/// Where per-digit features come from.
#[derive(Debug, Clone)]
pub struct FeatureSource {
    /// Directory that relative manifest paths resolve against.
    pub audio_root: PathBuf,
    /// Optional directory of `<utt_id>.vdft` feature caches, used when present.
    pub cache_dir: Option<PathBuf>,
    pub logmel: LogMelConfig,
}

impl FeatureSource {
    pub fn audio(root: impl Into<PathBuf>) -> Self {
        Self {
            audio_root: root.into(),
            cache_dir: None,
            logmel: LogMelConfig::default(),
        }
    }

    pub fn with_cache(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    pub fn cache_path(&self, utt_id: &str) -> Option<PathBuf> {
        self.cache_dir.as_ref().map(|d| d.join(format!("{utt_id}.vdft")))
    }

    pub fn audio_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.audio_root.join(&entry.path)
    }
}

/// Features computed from the entry's audio segment, ignoring any cache.
pub fn compute_features(entry: &ManifestEntry, source: &FeatureSource) -> Result<FeatureMatrix, CorpusError> {
    let audio_err = |source| CorpusError::Audio {
        utt_id: entry.utt_id.clone(),
        source,
    };
    let audio = dsp::read_wav(source.audio_path(entry)).map_err(audio_err)?;
    let end = entry.end_s.min(audio.duration_s());
    let seg = audio.segment(entry.start_s, end).map_err(audio_err)?;
    dsp::digit_features(&seg, &source.logmel).map_err(audio_err)
}

/// Cached features when available, otherwise computed from audio.
pub fn load_features(entry: &ManifestEntry, source: &FeatureSource) -> Result<FeatureMatrix, CorpusError> {
    if let Some(path) = source.cache_path(&entry.utt_id) {
        if path.exists() {
            let file = File::open(&path).map_err(io_err(&path))?;
            return dsp::read_feature_cache(BufReader::new(file)).map_err(|source| CorpusError::Audio {
                utt_id: entry.utt_id.clone(),
                source,
            });
        }
    }
    compute_features(entry, source)
}

/// Parameters of the synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_speakers: usize,
    /// Sessions per speaker; the first `enroll_sessions` are for enrollment.
    pub sessions: u32,
    pub enroll_sessions: u32,
    pub seed: u64,
    pub sample_rate: u32,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub snr_db: f64,
    pub passphrase_len: usize,
    /// Nontarget trials per target trial.
    pub nontarget_ratio: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_speakers: 20,
            sessions: 8,
            enroll_sessions: 3,
            seed: 7,
            sample_rate: 16000,
            min_duration_s: 0.3,
            max_duration_s: 0.8,
            snr_db: 20.0,
            passphrase_len: 5,
            nontarget_ratio: 10,
        }
    }
}

pub const N_DIGITS: u32 = 10;

impl SynthSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::Spec(m));
        if self.n_speakers < 2 {
            return bad(format!("need at least 2 speakers, got {}", self.n_speakers));
        }
        if self.enroll_sessions < 1 || self.sessions <= self.enroll_sessions {
            return bad(format!(
                "need at least one test session after {} enrollment sessions, got {} sessions",
                self.enroll_sessions, self.sessions
            ));
        }
        if self.sample_rate < 8000 {
            return bad(format!("sample rate {} too low", self.sample_rate));
        }
        if !(self.min_duration_s >= 0.05 && self.max_duration_s >= self.min_duration_s) {
            return bad("bad duration range".into());
        }
        if !(1..=N_DIGITS as usize).contains(&self.passphrase_len) {
            return bad(format!("passphrase length {} not in 1..10", self.passphrase_len));
        }
        if !self.snr_db.is_finite() {
            return bad("snr must be finite".into());
        }
        Ok(())
    }

    pub fn speaker_id(&self, speaker: usize) -> String {
        format!("spk{speaker:02}")
    }

    pub fn utt_id(&self, speaker: usize, session: u32, digit: u32) -> String {
        format!("{}_s{session}_d{digit}", self.speaker_id(speaker))
    }

    pub fn is_enrollment(&self, session: u32) -> bool {
        session < self.enroll_sessions
    }
}

/// A synthetic speaker's fixed vocal characteristics.
#[derive(Debug, Clone, PartialEq)]
pub struct Voice {
    pub f0_hz: f64,
    /// Multiplies every digit formant (vocal-tract length).
    pub formant_scale: f64,
    /// Spectral slope in dB per octave.
    pub tilt_db: f64,
    pub resonance_hz: f64,
    pub resonance_gain: f64,
    /// Linear and quadratic pitch contour coefficients over normalized time,
    /// centred on the utterance midpoint.
    pub pitch_slope: f64,
    pub pitch_curve: f64,
    pub vibrato_hz: f64,
    /// Relative vibrato depth.
    pub vibrato_depth: f64,
    /// Normalized times of the three formant targets.
    pub targets: [f64; 3],
    /// Typical utterance duration in seconds.
    pub duration_s: f64,
    /// Per-digit articulation: relative offsets of each formant target,
    /// indexed by digit, part and formant.
    pub accent: [[[f64; 3]; 3]; 10],
}

/// Pitch grid spacing and per-speaker jitter; together with the session
/// offset they keep any two speakers at least 6 Hz apart.
const F0_BASE_HZ: f64 = 95.0;
const F0_STEP_HZ: f64 = 9.0;
const F0_JITTER_HZ: f64 = 1.0;
const F0_SESSION_HZ: f64 = 0.5;

/// Per-digit formant targets `(F1, F2, F3)` for the three parts of a digit.
fn digit_patterns() -> [[[f64; 3]; 3]; 10] {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0d19_17a1);
    let mut table = [[[0.0; 3]; 3]; 10];
    for digit in table.iter_mut() {
        for part in digit.iter_mut() {
            *part = [
                rng.gen_range(280.0..900.0),
                rng.gen_range(950.0..2400.0),
                rng.gen_range(2450.0..3300.0),
            ];
        }
    }
    table
}

/// Largest relative per-digit formant deviation of a speaker.
const ACCENT: f64 = 0.1;
const FORMANT_BW: [f64; 3] = [90.0, 130.0, 180.0];
const FORMANT_GAIN: [f64; 3] = [1.0, 0.6, 0.3];
/// Harmonic amplitudes are recomputed every block and interpolated between.
const BLOCK: usize = 160;

pub struct Synthesizer {
    spec: SynthSpec,
    voices: Vec<Voice>,
    patterns: [[[f64; 3]; 3]; 10],
}

impl Synthesizer {
    pub fn new(spec: SynthSpec) -> Result<Self, CorpusError> {
        spec.validate()?;
        let mut grid: Vec<usize> = (0..spec.n_speakers).collect();
        let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
        master.set_stream(1);
        grid.shuffle(&mut master);
        let span = spec.max_duration_s - spec.min_duration_s;
        let voices = (0..spec.n_speakers)
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ s as u64);
                Voice {
                    f0_hz: F0_BASE_HZ + F0_STEP_HZ * grid[s] as f64 + rng.gen_range(-F0_JITTER_HZ..F0_JITTER_HZ),
                    formant_scale: rng.gen_range(0.88..1.12),
                    tilt_db: rng.gen_range(-9.0..-3.0),
                    resonance_hz: rng.gen_range(2500.0..3800.0),
                    resonance_gain: rng.gen_range(0.1..0.5),
                    pitch_slope: rng.gen_range(-0.12..0.12),
                    pitch_curve: rng.gen_range(-0.3..0.3),
                    vibrato_hz: rng.gen_range(4.0..7.0),
                    vibrato_depth: rng.gen_range(0.0..0.01),
                    targets: [rng.gen_range(0.1..0.25), rng.gen_range(0.4..0.6), rng.gen_range(0.75..0.9)],
                    duration_s: rng.gen_range(
                        spec.min_duration_s + 0.25 * span..=spec.max_duration_s - 0.25 * span,
                    ),
                    accent: std::array::from_fn(|_| {
                        std::array::from_fn(|_| std::array::from_fn(|_| rng.gen_range(-ACCENT..ACCENT)))
                    }),
                }
            })
            .collect();
        Ok(Self {
            spec,
            voices,
            patterns: digit_patterns(),
        })
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    pub fn voices(&self) -> &[Voice] {
        &self.voices
    }

    /// Pitch used for one session of a speaker.
    pub fn session_f0(&self, speaker: usize, session: u32) -> f64 {
        let mut rng = self.utterance_rng(speaker, session, N_DIGITS);
        self.voices[speaker].f0_hz + rng.gen_range(-F0_SESSION_HZ..F0_SESSION_HZ)
    }

    /// Independent stream per utterance so any subset can be rendered alone.
    fn utterance_rng(&self, speaker: usize, session: u32, slot: u32) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ speaker as u64);
        rng.set_stream(1 + session as u64 * (N_DIGITS as u64 + 2) + slot as u64);
        rng
    }

    pub fn render(&self, speaker: usize, session: u32, digit: u32) -> AudioBuffer {
        let spec = &self.spec;
        let voice = &self.voices[speaker];
        let sr = spec.sample_rate as f64;
        let f0 = self.session_f0(speaker, session);
        // Session-level channel and effort variation, shared by all digits.
        let mut srng = self.utterance_rng(speaker, session, N_DIGITS + 1);
        let scale = voice.formant_scale * (1.0 + srng.gen_range(-0.015..0.015));
        let tilt = voice.tilt_db + srng.gen_range(-1.0..1.0);
        let slope = voice.pitch_slope + srng.gen_range(-0.02..0.02);
        let mut rng = self.utterance_rng(speaker, session, digit);
        let n = self.draw_samples(&mut rng, speaker);
        let gain = rng.gen_range(0.3..0.9);
        let cutoff = sr / 2.0 * 0.95;
        let base = &self.patterns[digit as usize];
        let accent = &voice.accent[digit as usize];
        let pattern: [[f64; 3]; 3] =
            std::array::from_fn(|i| std::array::from_fn(|k| base[i][k] * (1.0 + accent[i][k])));
        let targets = voice.targets;

        // Pitch contour; every term vanishes at the midpoint, so the centre
        // of the utterance sounds at the session pitch.
        let pitch = |sample: f64| -> f64 {
            let t = sample / n as f64 - 0.5;
            let vib = (2.0 * PI * voice.vibrato_hz * (sample - n as f64 / 2.0) / sr).sin();
            f0 * (1.0 + slope * t + voice.pitch_curve * t * t + voice.vibrato_depth * vib)
        };
        let envelope = |t: f64, f: f64| -> f64 {
            if f > cutoff {
                return 0.0;
            }
            let (i, w) = if t <= targets[0] {
                (0, 0.0)
            } else if t <= targets[1] {
                (0, (t - targets[0]) / (targets[1] - targets[0]))
            } else if t <= targets[2] {
                (1, (t - targets[1]) / (targets[2] - targets[1]))
            } else {
                (1, 1.0)
            };
            let mut amp = 0.0;
            for k in 0..3 {
                let fk = scale * (pattern[i][k] * (1.0 - w) + pattern[i + 1][k] * w);
                let bw = FORMANT_BW[k] * scale;
                amp += FORMANT_GAIN[k] / (1.0 + ((f - fk) / bw).powi(2));
            }
            amp += voice.resonance_gain / (1.0 + ((f - voice.resonance_hz) / 220.0).powi(2));
            amp * 10f64.powf(tilt * (f / 100.0).log2() / 20.0)
        };

        let lowest = (0..=n / BLOCK + 1)
            .map(|b| pitch((b * BLOCK).min(n) as f64))
            .fold(f64::INFINITY, f64::min);
        let n_harm = (cutoff / lowest).floor() as usize;
        let mut phasors: Vec<(f64, f64)> = (0..n_harm)
            .map(|_| {
                let p = rng.gen_range(0.0..2.0 * PI);
                (p.cos(), p.sin())
            })
            .collect();
        let amps_at = |sample: usize| -> Vec<f64> {
            let t = sample as f64 / n as f64;
            let f = pitch(sample as f64);
            (1..=n_harm).map(|h| envelope(t, h as f64 * f)).collect()
        };

        let mut out = vec![0.0f64; n];
        let mut start = 0;
        let mut a0 = amps_at(0);
        while start < n {
            let end = (start + BLOCK).min(n);
            let a1 = amps_at(end);
            // Pitch is held constant within a block.
            let f = pitch((start + end) as f64 / 2.0);
            for (h, z) in phasors.iter_mut().enumerate() {
                let w = 2.0 * PI * (h + 1) as f64 * f / sr;
                let r = (w.cos(), w.sin());
                let (mut re, mut im) = *z;
                let da = (a1[h] - a0[h]) / BLOCK as f64;
                let mut a = a0[h];
                for o in &mut out[start..end] {
                    *o += a * im;
                    (re, im) = (re * r.0 - im * r.1, re * r.1 + im * r.0);
                    a += da;
                }
                let norm = (re * re + im * im).sqrt();
                *z = (re / norm, im / norm);
            }
            a0 = a1;
            start = end;
        }

        // Raised-cosine onset and offset.
        let ramp = ((0.03 * sr) as usize).min(n / 2);
        for i in 0..ramp {
            let g = 0.5 - 0.5 * (PI * i as f64 / ramp as f64).cos();
            out[i] *= g;
            out[n - 1 - i] *= g;
        }
        let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        out.iter_mut().for_each(|v| *v *= gain / peak);
        let power = out.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64;
        let sigma = (power / 10f64.powf(spec.snr_db / 10.0)).sqrt();
        let noise = Normal::new(0.0, sigma).expect("finite sigma");
        let samples = out
            .into_iter()
            .map(|v| (v + noise.sample(&mut rng)).clamp(-1.0, 1.0) as f32)
            .collect();
        AudioBuffer::new(samples, spec.sample_rate)
    }

    /// Manifest rows in speaker, session, digit order. Paths are relative to
    /// the corpus directory.
    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let mut rows = Vec::new();
        for s in 0..self.spec.n_speakers {
            for session in 0..self.spec.sessions {
                for digit in 0..N_DIGITS {
                    let utt_id = self.spec.utt_id(s, session, digit);
                    rows.push(ManifestEntry {
                        path: format!("wav/{utt_id}.wav"),
                        utt_id,
                        speaker_id: self.spec.speaker_id(s),
                        digit,
                        session,
                        start_s: 0.0,
                        end_s: self.duration_of(s, session, digit),
                    });
                }
            }
        }
        rows
    }

    /// Sample count of one utterance; the first draw from its stream.
    fn draw_samples(&self, rng: &mut ChaCha8Rng, speaker: usize) -> usize {
        let spec = &self.spec;
        let half = 0.25 * (spec.max_duration_s - spec.min_duration_s);
        let duration = (self.voices[speaker].duration_s + rng.gen_range(-half..=half))
            .clamp(spec.min_duration_s, spec.max_duration_s);
        (duration * spec.sample_rate as f64).round() as usize
    }

    fn duration_of(&self, speaker: usize, session: u32, digit: u32) -> f64 {
        let mut rng = self.utterance_rng(speaker, session, digit);
        self.draw_samples(&mut rng, speaker) as f64 / self.spec.sample_rate as f64
    }

    /// One list per speaker over all enrollment sessions.
    pub fn enrollment_lists(&self) -> Vec<EnrollmentList> {
        (0..self.spec.n_speakers)
            .map(|s| EnrollmentList {
                model_id: self.spec.speaker_id(s),
                items: (0..self.spec.enroll_sessions)
                    .flat_map(|session| (0..N_DIGITS).map(move |d| (d, session)))
                    .map(|(d, session)| (d, self.spec.utt_id(s, session, d)))
                    .collect(),
            })
            .collect()
    }

    /// One target trial per speaker and test session, each followed by its
    /// nontarget trials: another speaker saying the same digits.
    pub fn trials(&self) -> Vec<TrialRecord> {
        let spec = &self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(2);
        let test_sessions: Vec<u32> = (spec.enroll_sessions..spec.sessions).collect();
        let mut trials = Vec::new();
        for s in 0..spec.n_speakers {
            for &session in &test_sessions {
                let mut digits: Vec<u32> = (0..N_DIGITS).collect();
                digits.shuffle(&mut rng);
                digits.truncate(spec.passphrase_len);
                let phrase = |spk: usize, sess: u32| -> Vec<(u32, String)> {
                    digits.iter().map(|&d| (d, spec.utt_id(spk, sess, d))).collect()
                };
                trials.push(TrialRecord {
                    model_id: spec.speaker_id(s),
                    passphrase: phrase(s, session),
                    label: TrialLabel::Target,
                });
                for _ in 0..spec.nontarget_ratio {
                    let mut imp = rng.gen_range(0..spec.n_speakers - 1);
                    if imp >= s {
                        imp += 1;
                    }
                    let sess = *test_sessions.choose(&mut rng).expect("at least one test session");
                    trials.push(TrialRecord {
                        model_id: spec.speaker_id(s),
                        passphrase: phrase(imp, sess),
                        label: TrialLabel::Nontarget,
                    });
                }
            }
        }
        trials
    }
}

/// Files written by [`synth_corpus`].
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub manifest: PathBuf,
    pub train_manifest: PathBuf,
    pub enrollment: PathBuf,
    pub trials: PathBuf,
    pub n_utterances: usize,
    pub n_trials: usize,
}

/// Writes `wav/`, `manifest.jsonl` (every utterance), `train.jsonl`
/// (enrollment sessions), `enroll.tsv` and `trials.tsv` under `out_dir`.
/// `workers` > 1 renders speakers in parallel; the output is identical.
pub fn synth_corpus(spec: &SynthSpec, out_dir: &Path, workers: usize) -> Result<SynthOutput, CorpusError> {
    let synth = Synthesizer::new(spec.clone())?;
    let wav_dir = out_dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(io_err(&wav_dir))?;
    let manifest = synth.manifest();

    let render_one = |e: &ManifestEntry| -> Result<(), CorpusError> {
        let speaker: usize = e.speaker_id[3..].parse().expect("generated speaker id");
        let audio = synth.render(speaker, e.session, e.digit);
        dsp::write_wav(out_dir.join(&e.path), &audio).map_err(|source| CorpusError::Audio {
            utt_id: e.utt_id.clone(),
            source,
        })
    };
    if workers <= 1 {
        manifest.iter().try_for_each(render_one)?;
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| CorpusError::Spec(format!("thread pool: {e}")))?;
        pool.install(|| manifest.par_iter().try_for_each(render_one))?;
    }

    let write = |name: &str, f: &dyn Fn(&mut BufWriter<File>) -> std::io::Result<()>| -> Result<PathBuf, CorpusError> {
        let path = out_dir.join(name);
        let file = File::create(&path).map_err(io_err(&path))?;
        let mut w = BufWriter::new(file);
        f(&mut w).and_then(|_| w.flush()).map_err(io_err(&path))?;
        Ok(path)
    };
    let train: Vec<ManifestEntry> = manifest
        .iter()
        .filter(|e| spec.is_enrollment(e.session))
        .cloned()
        .collect();
    let trials = synth.trials();
    let enroll = synth.enrollment_lists();
    Ok(SynthOutput {
        manifest: write("manifest.jsonl", &|w| write_manifest(w, &manifest))?,
        train_manifest: write("train.jsonl", &|w| write_manifest(w, &train))?,
        enrollment: write("enroll.tsv", &|w| write_enrollment_lists(w, &enroll))?,
        trials: write("trials.tsv", &|w| write_trials(w, &trials))?,
        n_utterances: manifest.len(),
        n_trials: trials.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            n_speakers: 3,
            sessions: 4,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn manifest_parsing_cases() {
        assert!(parse_manifest_str("", "m").unwrap().is_empty());
        let row = r#"{"utt_id":"a","speaker_id":"s","digit":3,"session":0,"path":"a.wav","start_s":0.0,"end_s":0.5}"#;
        let parsed = parse_manifest_str(&format!("{row}\n\n"), "m").unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].digit, 3);

        let dup = format!("{row}\n{row}\n");
        let e = parse_manifest_str(&dup, "m").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("duplicate"), "{e}");

        let ten = row.replace("\"digit\":3", "\"digit\":10");
        let e = parse_manifest_str(&ten, "m").unwrap_err().to_string();
        assert!(e.contains("line 1") && e.contains("out of range"), "{e}");

        let inverted = row.replace("\"end_s\":0.5", "\"end_s\":0.0");
        assert!(parse_manifest_str(&inverted, "m").is_err());
        let extra = row.replace("}", ",\"x\":1}");
        assert!(parse_manifest_str(&extra, "m").is_err());
        let bad_id = row.replace("\"a\"", "\"a b\"");
        assert!(parse_manifest_str(&bad_id, "m").is_err());
    }

    #[test]
    fn trial_parsing_cases() {
        let t = parse_trials_str("spk01\t3:u1,1:u2,4:u3,1:u4,5:u5\ttarget\n", "t").unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].model_id, "spk01");
        assert_eq!(t[0].label, TrialLabel::Target);
        let digits: Vec<u32> = t[0].passphrase.iter().map(|p| p.0).collect();
        assert_eq!(digits, vec![3, 1, 4, 1, 5]);

        let e = parse_trials_str("spk01\t3:u1\ttgt\n", "t").unwrap_err().to_string();
        assert!(e.contains("tgt"), "{e}");
        assert!(parse_trials_str("spk01\t\ttarget\n", "t").is_err());
        assert!(parse_trials_str("spk01\t3-u1\ttarget\n", "t").is_err());
        assert!(parse_trials_str("spk01\t12:u1\ttarget\n", "t").is_err());
        assert!(parse_trials_str("spk01\t3:u1\n", "t").is_err());
    }

    #[test]
    fn protocol_files_roundtrip() {
        let text = "a\t3:u1,1:u2\ttarget\nb\t0:u9\tunknown\n";
        let t = parse_trials_str(text, "t").unwrap();
        let mut buf = Vec::new();
        write_trials(&mut buf, &t).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), text);

        let text = "a\t0:x,1:y\nb\t0:z\n";
        let l = parse_enrollment_lists_str(text, "e").unwrap();
        let mut buf = Vec::new();
        write_enrollment_lists(&mut buf, &l).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), text);
        assert!(parse_enrollment_lists_str("a\t0:x\na\t1:y\n", "e").is_err());
    }

    #[test]
    fn uniform_split_covers_duration() {
        let segs = uniform_split(2.5, 5);
        assert_eq!(segs.len(), 5);
        assert_eq!(segs[0].0, 0.0);
        assert_eq!(segs[4].1, 2.5);
        for w in segs.windows(2) {
            assert_eq!(w[0].1, w[1].0);
            assert!((w[0].1 - w[0].0 - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(SynthSpec { n_speakers: 1, ..small_spec() }.validate().is_err());
        assert!(SynthSpec { sessions: 3, ..small_spec() }.validate().is_err());
        assert!(small_spec().validate().is_ok());
    }

    #[test]
    fn generator_is_deterministic_and_random_access() {
        let a = Synthesizer::new(small_spec()).unwrap();
        let b = Synthesizer::new(small_spec()).unwrap();
        assert_eq!(a.voices(), b.voices());
        let x = a.render(1, 2, 7);
        assert_eq!(x.samples, b.render(1, 2, 7).samples);
        let d = x.duration_s();
        assert!((0.3..=0.8).contains(&d), "{d}");
        let row = a.manifest().into_iter().find(|e| e.utt_id == "spk01_s2_d7").unwrap();
        assert!((row.end_s - d).abs() < 1e-9);
        assert_ne!(x.samples, a.render(1, 3, 7).samples);
    }

    #[test]
    fn trial_protocol_shape() {
        let synth = Synthesizer::new(small_spec()).unwrap();
        let trials = synth.trials();
        let targets = trials.iter().filter(|t| t.label == TrialLabel::Target).count();
        assert_eq!(targets, 3);
        assert_eq!(trials.len(), targets * 11);
        for t in &trials {
            assert_eq!(t.passphrase.len(), 5);
            let distinct: HashSet<u32> = t.passphrase.iter().map(|p| p.0).collect();
            assert_eq!(distinct.len(), 5);
            let owner = &t.passphrase[0].1[..5];
            assert_eq!(owner == t.model_id, t.label == TrialLabel::Target);
            assert!(t.passphrase.iter().all(|p| !p.1.contains("_s0_") && !p.1.contains("_s1_") && !p.1.contains("_s2_")));
        }
        let lists = synth.enrollment_lists();
        assert_eq!(lists.len(), 3);
        assert!(lists.iter().all(|l| l.items.len() == 30));
    }
}
