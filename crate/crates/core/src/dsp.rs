//! Audio front end: WAV ingestion, log-mel extraction, fixed-length framing,
//! per-utterance band normalization and a simple energy VAD.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

/// Number of mel bands fed to the network.
pub const N_BANDS: usize = 64;
/// Fixed number of frames per digit utterance.
pub const N_FRAMES: usize = 96;
/// Floor applied before taking the natural log of band energies.
pub const LOG_FLOOR: f64 = 1e-10;
/// Variance guard used by [`mvn`].
pub const MVN_EPS: f64 = 1e-8;

const FEATURE_MAGIC: &[u8; 4] = b"VDFT";
const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed wav header: {0}")]
    MalformedHeader(String),
    #[error("unsupported channel count: {0}")]
    UnsupportedChannels(u16),
    #[error("unsupported sample encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("empty audio payload")]
    EmptyPayload,
    #[error("audio has {len} samples, shorter than one {win}-sample window")]
    TooShort { len: usize, win: usize },
    #[error("feature matrix has no frames")]
    NoFrames,
    #[error("expected a {expected_rows}x{expected_cols} feature matrix, got {rows}x{cols}")]
    Shape {
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("invalid feature cache: {0}")]
    BadCache(String),
    #[error("invalid segment {start_s}..{end_s} s for {len} samples")]
    BadSegment { start_s: f64, end_s: f64, len: usize },
}

/// Mono audio in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        assert!(sample_rate > 0, "sample rate must be positive");
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Cut `[start_s, end_s)` out of the buffer. Sample indices are rounded
    /// to nearest and clamped to the buffer.
    pub fn segment(&self, start_s: f64, end_s: f64) -> Result<AudioBuffer, DspError> {
        let sr = self.sample_rate as f64;
        let len = self.samples.len();
        let a = ((start_s * sr).round().max(0.0) as usize).min(len);
        let b = ((end_s * sr).round().max(0.0) as usize).min(len);
        if !(end_s > start_s) || a >= b {
            return Err(DspError::BadSegment { start_s, end_s, len });
        }
        Ok(AudioBuffer::new(self.samples[a..b].to_vec(), self.sample_rate))
    }
}

/// Band × frame matrix stored band-major (`values[band * n_frames + frame]`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Vec<f32>,
    pub n_bands: usize,
    pub n_frames: usize,
    pub normalized: bool,
}

impl FeatureMatrix {
    pub fn zeros(n_bands: usize, n_frames: usize) -> Self {
        Self {
            values: vec![0.0; n_bands * n_frames],
            n_bands,
            n_frames,
            normalized: false,
        }
    }

    #[inline]
    pub fn get(&self, band: usize, frame: usize) -> f32 {
        self.values[band * self.n_frames + frame]
    }

    #[inline]
    pub fn set(&mut self, band: usize, frame: usize, v: f32) {
        self.values[band * self.n_frames + frame] = v;
    }

    pub fn band(&self, band: usize) -> &[f32] {
        &self.values[band * self.n_frames..(band + 1) * self.n_frames]
    }

    /// Column `frame` as a vector over bands.
    pub fn frame(&self, frame: usize) -> Vec<f32> {
        (0..self.n_bands).map(|b| self.get(b, frame)).collect()
    }

    pub fn is_network_input(&self) -> bool {
        self.n_bands == N_BANDS && self.n_frames == N_FRAMES
    }
}

/// Reads a 16-bit PCM mono RIFF/WAVE file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer, DspError> {
    let file = File::open(path.as_ref())?;
    read_wav_from(BufReader::new(file))
}

pub fn read_wav_from<R: Read>(reader: R) -> Result<AudioBuffer, DspError> {
    let mut wav = hound::WavReader::new(reader).map_err(map_hound)?;
    let spec = wav.spec();
    if spec.channels != 1 {
        return Err(DspError::UnsupportedChannels(spec.channels));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(DspError::UnsupportedEncoding(format!(
            "{:?} {}-bit",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    if spec.sample_rate == 0 {
        return Err(DspError::MalformedHeader("zero sample rate".into()));
    }
    let samples = wav
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(map_hound)?;
    if samples.is_empty() {
        return Err(DspError::EmptyPayload);
    }
    Ok(AudioBuffer::new(samples, spec.sample_rate))
}

fn map_hound(e: hound::Error) -> DspError {
    match e {
        hound::Error::IoError(io) => DspError::Io(io),
        hound::Error::Unsupported => DspError::UnsupportedEncoding("unsupported wav format".into()),
        other => DspError::MalformedHeader(other.to_string()),
    }
}

/// Writes 16-bit PCM mono. Samples are clipped to `[-1, 1]`.
pub fn write_wav(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<(), DspError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path.as_ref(), spec).map_err(map_hound)?;
    for &s in &audio.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(map_hound)?;
    }
    w.finalize().map_err(map_hound)?;
    Ok(())
}

/// Framing and filterbank parameters for [`extract_logmel`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogMelConfig {
    pub win_ms: f64,
    pub hop_ms: f64,
    pub n_bands: usize,
}

impl Default for LogMelConfig {
    fn default() -> Self {
        Self {
            win_ms: 16.0,
            hop_ms: 8.0,
            n_bands: N_BANDS,
        }
    }
}

impl LogMelConfig {
    pub fn win_samples(&self, sample_rate: u32) -> usize {
        (self.win_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        ((self.hop_ms * sample_rate as f64 / 1000.0).round() as usize).max(1)
    }
}

/// Number of frames produced for `len` samples.
pub fn frame_count(len: usize, win: usize, hop: usize) -> usize {
    if len < win {
        0
    } else {
        (len - win) / hop + 1
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-style mel filterbank.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `n_bands` rows of `n_fft / 2 + 1` weights.
    weights: Vec<Vec<f64>>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    /// Filters with edges equally spaced on the mel scale from 0 Hz to Nyquist.
    pub fn new(n_bands: usize, n_fft: usize, sample_rate: u32) -> Self {
        let nyquist = sample_rate as f64 / 2.0;
        let mel_max = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..n_bands + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (n_bands + 1) as f64))
            .collect();
        let n_bins = n_fft / 2 + 1;
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let weights = (0..n_bands)
            .map(|b| {
                let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f > lo && f <= mid {
                            (f - lo) / (mid - lo)
                        } else if f > mid && f < hi {
                            (hi - f) / (hi - mid)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            weights,
            centers_hz: edges[1..=n_bands].to_vec(),
        }
    }

    pub fn n_bands(&self) -> usize {
        self.weights.len()
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn weights(&self, band: usize) -> &[f64] {
        &self.weights[band]
    }

    fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (o, w) in out.iter_mut().zip(&self.weights) {
            *o = w.iter().zip(power).map(|(a, b)| a * b).sum();
        }
    }
}

fn hann(n: usize) -> Vec<f64> {
    // Periodic Hann, the usual choice for spectral analysis.
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Log-mel power spectrogram, `n_bands × T`, unnormalized.
pub fn extract_logmel(audio: &AudioBuffer, cfg: &LogMelConfig) -> Result<FeatureMatrix, DspError> {
    let win = cfg.win_samples(audio.sample_rate);
    let hop = cfg.hop_samples(audio.sample_rate);
    let n_frames = frame_count(audio.samples.len(), win, hop);
    if win == 0 || n_frames == 0 {
        return Err(DspError::TooShort {
            len: audio.samples.len(),
            win,
        });
    }
    let window = hann(win);
    let bank = MelFilterbank::new(cfg.n_bands, win, audio.sample_rate);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(win);
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut power = vec![0.0; win / 2 + 1];
    let mut bands = vec![0.0; cfg.n_bands];
    let mut out = FeatureMatrix::zeros(cfg.n_bands, n_frames);

    for t in 0..n_frames {
        let frame = &audio.samples[t * hop..t * hop + win];
        for ((c, &s), &w) in buf.iter_mut().zip(frame).zip(&window) {
            *c = Complex::new(s as f64 * w, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        bank.apply(&power, &mut bands);
        for (b, &e) in bands.iter().enumerate() {
            out.set(b, t, e.max(LOG_FLOOR).ln() as f32);
        }
    }
    Ok(out)
}

/// Crops or wrap-pads along time to exactly `target` frames.
pub fn fix_length(feat: &FeatureMatrix, target: usize) -> Result<FeatureMatrix, DspError> {
    if feat.n_frames == 0 {
        return Err(DspError::NoFrames);
    }
    let mut out = FeatureMatrix::zeros(feat.n_bands, target);
    out.normalized = feat.normalized && feat.n_frames == target;
    for b in 0..feat.n_bands {
        for t in 0..target {
            out.set(b, t, feat.get(b, t % feat.n_frames));
        }
    }
    Ok(out)
}

/// Per-band mean and variance normalization over the time axis.
pub fn mvn(feat: &FeatureMatrix) -> Result<FeatureMatrix, DspError> {
    if !feat.is_network_input() {
        return Err(DspError::Shape {
            expected_rows: N_BANDS,
            expected_cols: N_FRAMES,
            rows: feat.n_bands,
            cols: feat.n_frames,
        });
    }
    Ok(mvn_any(feat))
}

/// [`mvn`] without the shape precondition.
pub fn mvn_any(feat: &FeatureMatrix) -> FeatureMatrix {
    let mut out = feat.clone();
    let n = feat.n_frames as f64;
    for b in 0..feat.n_bands {
        let band = feat.band(b);
        let mean = band.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = band.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let scale = 1.0 / (var + MVN_EPS).sqrt();
        for t in 0..feat.n_frames {
            out.set(b, t, ((band[t] as f64 - mean) * scale) as f32);
        }
    }
    out.normalized = true;
    out
}

/// The full per-digit pipeline: log-mel, fix to 96 frames, normalize.
pub fn digit_features(audio: &AudioBuffer, cfg: &LogMelConfig) -> Result<FeatureMatrix, DspError> {
    let raw = extract_logmel(audio, cfg)?;
    let fixed = fix_length(&raw, N_FRAMES)?;
    mvn(&fixed)
}

/// Parameters for [`energy_vad`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VadConfig {
    pub frame_ms: f64,
    pub threshold_db: f64,
    pub merge_gap_ms: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            frame_ms: 16.0,
            threshold_db: -40.0,
            merge_gap_ms: 100.0,
        }
    }
}

/// Speech segments `(start_s, end_s)` from non-overlapping frame energies
/// relative to the loudest frame.
pub fn energy_vad(audio: &AudioBuffer, cfg: &VadConfig) -> Vec<(f64, f64)> {
    let sr = audio.sample_rate as f64;
    let frame = ((cfg.frame_ms * sr / 1000.0).round() as usize).max(1);
    let energies: Vec<f64> = audio
        .samples
        .chunks(frame)
        .map(|c| c.iter().map(|&s| (s as f64) * (s as f64)).sum())
        .collect();
    let peak = energies.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Vec::new();
    }
    let thresh = peak * 10f64.powf(cfg.threshold_db / 10.0);

    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut start = None;
    for (i, &e) in energies.iter().enumerate() {
        match (e >= thresh, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, energies.len()));
    }

    let max_gap = (cfg.merge_gap_ms * sr / 1000.0) as usize;
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for (s, e) in runs {
        match merged.last_mut() {
            Some(last) if (s - last.1) * frame < max_gap => last.1 = e,
            _ => merged.push((s, e)),
        }
    }
    let len = audio.samples.len();
    merged
        .into_iter()
        .map(|(s, e)| ((s * frame) as f64 / sr, ((e * frame).min(len)) as f64 / sr))
        .collect()
}

/// Serializes a feature matrix in the `VDFT` cache layout.
pub fn write_feature_cache<W: Write>(mut w: W, feat: &FeatureMatrix) -> Result<(), DspError> {
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&(feat.n_bands as u32).to_le_bytes())?;
    w.write_all(&(feat.n_frames as u32).to_le_bytes())?;
    for v in &feat.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a `VDFT` record. Cached matrices are always normalized network input.
pub fn read_feature_cache<R: Read>(mut r: R) -> Result<FeatureMatrix, DspError> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head)
        .map_err(|_| DspError::BadCache("truncated header".into()))?;
    if &head[0..4] != FEATURE_MAGIC {
        return Err(DspError::BadCache("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().unwrap());
    if word(4) != FEATURE_VERSION {
        return Err(DspError::BadCache(format!("unsupported version {}", word(4))));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    if rows != N_BANDS || cols != N_FRAMES {
        return Err(DspError::Shape {
            expected_rows: N_BANDS,
            expected_cols: N_FRAMES,
            rows,
            cols,
        });
    }
    let mut bytes = vec![0u8; rows * cols * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| DspError::BadCache("truncated payload".into()))?;
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(FeatureMatrix {
        values,
        n_bands: rows,
        n_frames: cols,
        normalized: true,
    })
}
