//! Class construction, the mini-batch training loop and bulk embedding
//! extraction.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{load_features, CorpusError, FeatureSource, ManifestEntry};
use crate::dsp::FeatureMatrix;
use crate::model::{LightCnn, ModelError};
use crate::tensor::{clip_grad_norm, lr_at_epoch, sgd_step, Tape, TensorError};

pub const N_DIGITS: usize = 10;

const EMB_MAGIC: &[u8; 4] = b"VDEM";
const EMB_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty manifest")]
    EmptyManifest,
    #[error("digit {digit} out of range for {utt_id}")]
    DigitOutOfRange { utt_id: String, digit: u32 },
    #[error("unknown speaker {0}")]
    UnknownSpeaker(String),
    #[error("class {class} out of range for a model with {n_out} outputs")]
    ClassOutOfRange { class: usize, n_out: usize },
    #[error("label map has {classes} classes but the model has {n_out} outputs")]
    ClassCountMismatch { classes: usize, n_out: usize },
    #[error("empty training set")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("loss became non-finite at epoch {epoch}, batch {batch} (lr {lr}); lower the learning rate")]
    Diverged { epoch: usize, batch: usize, lr: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid embedding cache: {0}")]
    BadCache(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskMode {
    /// One class per speaker.
    SingleTask,
    /// One class per (speaker, digit) pair.
    Multitask,
}

impl FromStr for TaskMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" | "single-task" | "singletask" => Ok(Self::SingleTask),
            "multi" | "multitask" | "multi-task" => Ok(Self::Multitask),
            other => Err(format!("unknown mode {other:?} (expected single-task or multitask)")),
        }
    }
}

impl fmt::Display for TaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SingleTask => "single-task",
            Self::Multitask => "multitask",
        })
    }
}

/// Bijection between training targets and class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub mode: TaskMode,
    /// Sorted speaker ids; the position is the speaker index.
    pub speakers: Vec<String>,
    pub n_digits: usize,
}

impl LabelMap {
    pub fn build(entries: &[ManifestEntry], mode: TaskMode) -> Result<Self, TrainError> {
        if entries.is_empty() {
            return Err(TrainError::EmptyManifest);
        }
        if let Some(e) = entries.iter().find(|e| e.digit as usize >= N_DIGITS) {
            return Err(TrainError::DigitOutOfRange {
                utt_id: e.utt_id.clone(),
                digit: e.digit,
            });
        }
        let mut speakers: Vec<String> = entries.iter().map(|e| e.speaker_id.clone()).collect();
        speakers.sort();
        speakers.dedup();
        Ok(Self {
            mode,
            speakers,
            n_digits: N_DIGITS,
        })
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn n_classes(&self) -> usize {
        match self.mode {
            TaskMode::SingleTask => self.speakers.len(),
            TaskMode::Multitask => self.speakers.len() * self.n_digits,
        }
    }

    pub fn speaker_index(&self, speaker: &str) -> Option<usize> {
        self.speakers.binary_search_by(|s| s.as_str().cmp(speaker)).ok()
    }

    pub fn class_for_index(&self, speaker_index: usize, digit: usize) -> usize {
        match self.mode {
            TaskMode::SingleTask => speaker_index,
            TaskMode::Multitask => speaker_index * self.n_digits + digit,
        }
    }

    pub fn class_of(&self, speaker: &str, digit: u32) -> Result<usize, TrainError> {
        let idx = self
            .speaker_index(speaker)
            .ok_or_else(|| TrainError::UnknownSpeaker(speaker.to_string()))?;
        if digit as usize >= self.n_digits {
            return Err(TrainError::DigitOutOfRange {
                utt_id: speaker.to_string(),
                digit,
            });
        }
        Ok(self.class_for_index(idx, digit as usize))
    }

    /// `(speaker index, digit)`; the digit is unknown in single-task mode.
    pub fn decode(&self, class: usize) -> (usize, Option<usize>) {
        match self.mode {
            TaskMode::SingleTask => (class, None),
            TaskMode::Multitask => (class / self.n_digits, Some(class % self.n_digits)),
        }
    }

    /// FNV-1a over the mode and speaker table, stored in checkpoints.
    pub fn digest(&self) -> u64 {
        let mut h = Fnv::default();
        h.write(self.mode.to_string().as_bytes());
        h.write(&(self.n_digits as u64).to_le_bytes());
        for s in &self.speakers {
            h.write(s.as_bytes());
            h.write(&[0]);
        }
        h.0
    }
}

/// FNV-1a over feature shapes and values in order. Runs that differ only in
/// task mode must report the same digest for the same manifest.
pub fn feature_digest<'a>(feats: impl IntoIterator<Item = &'a FeatureMatrix>) -> u64 {
    let mut h = Fnv::default();
    for f in feats {
        h.write(&(f.n_bands as u64).to_le_bytes());
        h.write(&(f.n_frames as u64).to_le_bytes());
        for v in &f.values {
            h.write(&v.to_le_bytes());
        }
    }
    h.0
}

struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub gamma: f64,
    pub period: usize,
    pub momentum: f64,
    /// Joint gradient-norm ceiling per step; zero disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr0: 0.01,
            gamma: 0.5,
            period: 10,
            momentum: 0.9,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if self.period == 0 {
            return bad("period must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return bad("clip_norm must be finite and non-negative");
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at_epoch(epoch, self.lr0, self.gamma, self.period)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub accuracy: f64,
    pub seconds: f64,
}

impl EpochStats {
    /// One training-log line: epoch, lr, mean loss, accuracy, seconds.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{}\t{:.6}\t{:.4}\t{:.2}",
            self.epoch, self.lr, self.mean_loss, self.accuracy, self.seconds
        )
    }
}

/// Mini-batch momentum SGD on mean softmax cross-entropy.
///
/// Each epoch reshuffles with a generator seeded once from `cfg.seed`; the
/// last partial batch is kept. `on_epoch` sees the stats as they are produced.
pub fn train(
    model: &mut LightCnn<f32>,
    data: &[(FeatureMatrix, usize)],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let n_out = model.config().n_out;
    if let Some(&(_, c)) = data.iter().find(|(_, c)| *c >= n_out) {
        return Err(TrainError::ClassOutOfRange { class: c, n_out });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let feats: Vec<&FeatureMatrix> = batch.iter().map(|&i| &data[i].0).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| data[i].1).collect();
            let mut tape = Tape::new();
            let x = tape.leaf(LightCnn::<f32>::input_tensor(&feats)?, false);
            let fwd = model.forward(&mut tape, x, true, true)?;
            let logits = fwd.logits.expect("classifier requested");
            let loss = tape.softmax_xent(logits, &labels)?;
            let loss_value = tape.value(loss)?.data()[0] as f64;
            if !loss_value.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: b, lr });
            }
            loss_sum += loss_value * batch.len() as f64;
            correct += argmax_hits(tape.value(logits)?.data(), n_out, &labels);
            tape.backward(loss)?;
            model.collect_grads(&tape, &fwd.params)?;
            clip_grad_norm(model.params_mut(), cfg.clip_norm)?;
            sgd_step(model.params_mut(), lr, cfg.momentum)?;
        }
        let stats = EpochStats {
            epoch,
            lr,
            mean_loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(history)
}

fn argmax_hits(logits: &[f32], k: usize, labels: &[usize]) -> usize {
    logits
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                .0;
            best == l
        })
        .count()
}

/// Inputs are embedded in fixed chunks of this size, independent of the
/// worker count, so results do not depend on parallelism.
const EMBED_CHUNK: usize = 16;

/// Embeds every manifest row. `workers` > 1 spreads chunks over a thread pool.
pub fn extract_all_embeddings(
    model: &LightCnn<f32>,
    entries: &[ManifestEntry],
    source: &FeatureSource,
    workers: usize,
) -> Result<BTreeMap<String, Vec<f32>>, TrainError> {
    let run = |chunk: &[ManifestEntry]| -> Result<Vec<(String, Vec<f32>)>, TrainError> {
        let feats = chunk
            .iter()
            .map(|e| load_features(e, source))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&FeatureMatrix> = feats.iter().collect();
        let embs = model.forward_embedding(&refs)?;
        Ok(chunk.iter().map(|e| e.utt_id.clone()).zip(embs).collect())
    };
    let chunks: Vec<&[ManifestEntry]> = entries.chunks(EMBED_CHUNK).collect();
    let results: Vec<Result<Vec<(String, Vec<f32>)>, TrainError>> = if workers <= 1 {
        chunks.into_iter().map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| TrainError::Config(format!("thread pool: {e}")))?;
        pool.install(|| chunks.into_par_iter().map(run).collect())
    };
    let mut table = BTreeMap::new();
    for r in results {
        table.extend(r?);
    }
    Ok(table)
}

/// Writes embeddings in the `VDEM` cache layout, in key order.
pub fn write_embedding_cache<W: Write>(mut w: W, table: &BTreeMap<String, Vec<f32>>) -> Result<(), TrainError> {
    let dim = table.values().next().map_or(0, Vec::len);
    if let Some((k, _)) = table.iter().find(|(_, v)| v.len() != dim) {
        return Err(TrainError::BadCache(format!("embedding {k} has a different dimension")));
    }
    w.write_all(EMB_MAGIC)?;
    w.write_all(&EMB_VERSION.to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    for (id, v) in table {
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id.as_bytes())?;
        for x in v {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_embedding_cache<R: Read>(mut r: R) -> Result<BTreeMap<String, Vec<f32>>, TrainError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let bad = |m: &str| TrainError::BadCache(m.to_string());
    if bytes.len() < 12 || &bytes[..4] != EMB_MAGIC {
        return Err(bad("bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    if word(4) != EMB_VERSION {
        return Err(bad("unsupported version"));
    }
    let dim = word(8) as usize;
    let mut pos = 12;
    let mut table = BTreeMap::new();
    while pos < bytes.len() {
        if pos + 4 > bytes.len() {
            return Err(bad("truncated record"));
        }
        let len = word(pos) as usize;
        pos += 4;
        let end = pos + len + 4 * dim;
        if end > bytes.len() {
            return Err(bad("truncated record"));
        }
        let id = String::from_utf8(bytes[pos..pos + len].to_vec()).map_err(|_| bad("non-utf8 id"))?;
        let v = bytes[pos + len..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if table.insert(id.clone(), v).is_some() {
            return Err(TrainError::BadCache(format!("duplicate id {id}")));
        }
        pos = end;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Width};
    use rand::Rng;

    fn entry(utt: &str, spk: &str, digit: u32) -> ManifestEntry {
        ManifestEntry {
            utt_id: utt.into(),
            speaker_id: spk.into(),
            digit,
            session: 0,
            path: format!("{utt}.wav"),
            start_s: 0.0,
            end_s: 0.5,
        }
    }

    fn speakers(n: usize) -> Vec<ManifestEntry> {
        (0..n)
            .flat_map(|s| (0..10).map(move |d| entry(&format!("u{s}_{d}"), &format!("spk{s:02}"), d)))
            .collect()
    }

    #[test]
    fn class_formulas() {
        let es = speakers(5);
        let mt = LabelMap::build(&es, TaskMode::Multitask).unwrap();
        assert_eq!(mt.n_classes(), 50);
        assert_eq!(mt.class_of("spk00", 0).unwrap(), 0);
        assert_eq!(mt.class_of("spk03", 7).unwrap(), 37);
        let st = LabelMap::build(&es, TaskMode::SingleTask).unwrap();
        assert_eq!(st.n_classes(), 5);
        for d in 0..10 {
            assert_eq!(st.class_of("spk03", d).unwrap(), 3);
        }
        assert_ne!(mt.digest(), st.digest());
    }

    #[test]
    fn speaker_order_is_sorted_not_first_seen() {
        let es = vec![entry("a", "zed", 1), entry("b", "amy", 2), entry("c", "max", 3)];
        let m = LabelMap::build(&es, TaskMode::SingleTask).unwrap();
        assert_eq!(m.speakers, vec!["amy", "max", "zed"]);
    }

    #[test]
    fn label_map_errors() {
        assert!(matches!(LabelMap::build(&[], TaskMode::Multitask), Err(TrainError::EmptyManifest)));
        let bad = vec![entry("a", "s", 10)];
        assert!(matches!(
            LabelMap::build(&bad, TaskMode::Multitask),
            Err(TrainError::DigitOutOfRange { digit: 10, .. })
        ));
    }

    #[test]
    fn multitask_decode_is_bijective() {
        let m = LabelMap::build(&speakers(7), TaskMode::Multitask).unwrap();
        let mut seen = std::collections::HashSet::new();
        for s in 0..7 {
            for d in 0..10 {
                let c = m.class_for_index(s, d);
                assert!(c < m.n_classes());
                assert!(seen.insert(c));
                assert_eq!(m.decode(c), (s, Some(d)));
            }
        }
    }

    fn toy_sample(seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = FeatureMatrix {
            values: (0..64 * 96).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            n_bands: 64,
            n_frames: 96,
            normalized: false,
        };
        crate::dsp::mvn(&raw).unwrap()
    }

    fn toy_model(n_out: usize) -> LightCnn<f32> {
        LightCnn::new(ModelConfig::new(Width::new(1, 16).unwrap(), n_out).unwrap(), 5)
    }

    #[test]
    fn memorizes_a_single_sample() {
        let mut m = toy_model(4);
        let data = vec![(toy_sample(1), 2)];
        let cfg = TrainConfig {
            epochs: 200,
            ..TrainConfig::default()
        };
        let stats = train(&mut m, &data, &cfg, |_| {}).unwrap();
        assert!(stats.last().unwrap().mean_loss < 0.01, "{:?}", stats.last());
        assert!(stats.iter().all(|s| s.mean_loss.is_finite()));
    }

    #[test]
    fn training_is_deterministic_and_follows_schedule() {
        let data: Vec<_> = (0..40).map(|i| (toy_sample(i), (i % 3) as usize)).collect();
        let cfg = TrainConfig {
            epochs: 12,
            seed: 3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = toy_model(3);
            let s = train(&mut m, &data, &cfg, |_| {}).unwrap();
            (m, s)
        };
        let (m1, s1) = run();
        let (m2, s2) = run();
        assert_eq!(m1, m2);
        for (a, b) in s1.iter().zip(&s2) {
            assert_eq!((a.epoch, a.lr.to_bits(), a.mean_loss.to_bits(), a.accuracy.to_bits()),
                       (b.epoch, b.lr.to_bits(), b.mean_loss.to_bits(), b.accuracy.to_bits()));
        }
        for s in &s1 {
            assert_eq!(s.lr, lr_at_epoch(s.epoch, 0.01, 0.5, 10));
        }
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut order: Vec<usize> = (0..37).collect();
        for _ in 0..5 {
            order.shuffle(&mut rng);
            let mut sorted = order.clone();
            sorted.sort();
            assert_eq!(sorted, (0..37).collect::<Vec<_>>());
        }
    }

    #[test]
    fn rejects_bad_classes_and_diverges_loudly() {
        let mut m = toy_model(3);
        let data = vec![(toy_sample(0), 3)];
        assert!(matches!(
            train(&mut m, &data, &TrainConfig::default(), |_| {}),
            Err(TrainError::ClassOutOfRange { class: 3, n_out: 3 })
        ));
        let data: Vec<_> = (0..8).map(|i| (toy_sample(i), (i % 3) as usize)).collect();
        let cfg = TrainConfig {
            lr0: 1e6,
            momentum: 0.0,
            clip_norm: 0.0,
            epochs: 5,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&mut m, &data, &cfg, |_| {}),
            Err(TrainError::Diverged { .. })
        ));
    }

    #[test]
    fn embedding_cache_roundtrip() {
        let mut t = BTreeMap::new();
        t.insert("u1".to_string(), vec![1.0f32, -2.0, 0.5]);
        t.insert("u2".to_string(), vec![0.0f32, 3.0, 4.0]);
        let mut buf = Vec::new();
        write_embedding_cache(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"VDEM");
        assert_eq!(read_embedding_cache(&buf[..]).unwrap(), t);
        assert!(read_embedding_cache(&buf[..buf.len() - 2]).is_err());
    }
}
