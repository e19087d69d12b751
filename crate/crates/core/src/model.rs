//! The Light-CNN feature extractor: nine convolution groups with
//! Max-Feature-Map activations and four 2×2 poolings, then FC1 → MFM6 (the
//! embedding) → FC2 (the classifier, used only during training).
//!
//! Channel counts are scaled by a rational width multiplier so that the same
//! topology can be trained at desk scale; width 1 is the reference size.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dsp::{FeatureMatrix, N_BANDS, N_FRAMES};
use crate::tensor::{Parameter, Real, Tape, Tensor, TensorError, Var};

const CKPT_MAGIC: &[u8; 4] = b"VDCK";
const CKPT_VERSION: u32 = 1;

/// `(name, kernel, output channels before MFM, pool after MFM)`.
const CONV_STACK: [(&str, usize, usize, bool); 9] = [
    ("conv1", 7, 128, true),
    ("conv2a", 1, 128, false),
    ("conv2b", 5, 192, true),
    ("conv3a", 1, 192, false),
    ("conv3b", 5, 256, true),
    ("conv4a", 1, 256, false),
    ("conv4b", 3, 128, false),
    ("conv5a", 1, 128, false),
    ("conv5b", 3, 128, true),
];
const FC1_WIDTH: usize = 2048;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid width {0}: must be a fraction in (0, 1]")]
    InvalidWidth(String),
    #[error("n_out must be at least 2, got {0}")]
    TooFewClasses(usize),
    #[error("input must be a normalized {N_BANDS}x{N_FRAMES} feature matrix ({0})")]
    BadInput(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Width multiplier stored as an exact fraction so checkpoints round-trip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Width {
    num: u32,
    den: u32,
}

impl Width {
    pub const FULL: Width = Width { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self, ModelError> {
        if num == 0 || den == 0 || num > den {
            return Err(ModelError::InvalidWidth(format!("{num}/{den}")));
        }
        let g = gcd(num, den);
        Ok(Self {
            num: num / g,
            den: den / g,
        })
    }

    pub fn num(&self) -> u32 {
        self.num
    }

    pub fn den(&self) -> u32 {
        self.den
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Scales a channel count, rounding to the nearest even number ≥ 2.
    pub fn scale(&self, channels: usize) -> usize {
        let x = channels as f64 * self.as_f64();
        ((x / 2.0).round() as usize).max(1) * 2
    }
}

impl std::str::FromStr for Width {
    type Err = ModelError;

    /// Accepts `"1"`, `"0.25"` or `"1/4"`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ModelError::InvalidWidth(s.to_string());
        let s = s.trim();
        if let Some((a, b)) = s.split_once('/') {
            let a = a.trim().parse().map_err(|_| bad())?;
            let b = b.trim().parse().map_err(|_| bad())?;
            return Width::new(a, b).map_err(|_| bad());
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 6 || !frac.chars().all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let int: u32 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let den = 10u32.pow(frac.len() as u32);
        let f: u32 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        Width::new(int * den + f, den).map_err(|_| bad())
    }
}

impl fmt::Display for Width {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub width: Width,
    pub n_out: usize,
}

impl ModelConfig {
    pub fn new(width: Width, n_out: usize) -> Result<Self, ModelError> {
        if n_out < 2 {
            return Err(ModelError::TooFewClasses(n_out));
        }
        Ok(Self { width, n_out })
    }

    /// Dimension of the MFM6 output.
    pub fn embedding_dim(&self) -> usize {
        self.width.scale(FC1_WIDTH) / 2
    }

    /// Names and shapes of every parameter, in checkpoint order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = 1;
        for &(name, k, cout, _) in &CONV_STACK {
            let cout = self.width.scale(cout);
            out.push((format!("{name}.weight"), vec![cout, k, k, cin]));
            out.push((format!("{name}.bias"), vec![cout]));
            cin = cout / 2;
        }
        let flat = (N_BANDS / 16) * (N_FRAMES / 16) * cin;
        let fc1 = self.width.scale(FC1_WIDTH);
        out.push(("fc1.weight".into(), vec![fc1, flat]));
        out.push(("fc1.bias".into(), vec![fc1]));
        out.push(("fc2.weight".into(), vec![self.n_out, fc1 / 2]));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    /// `(layer, count)` per weighted layer.
    pub per_layer: Vec<(String, usize)>,
    pub total: usize,
}

impl ParamCount {
    pub fn layer(&self, name: &str) -> Option<usize> {
        self.per_layer.iter().find(|(n, _)| n == name).map(|(_, c)| *c)
    }

    pub fn without(&self, name: &str) -> usize {
        self.total - self.layer(name).unwrap_or(0)
    }
}

/// Output of one recorded forward pass.
pub struct Forward {
    pub embedding: Var,
    pub logits: Option<Var>,
    /// One variable per parameter, in [`LightCnn::params`] order.
    pub params: Vec<Var>,
    /// `(layer, output shape)` in execution order.
    pub trace: Vec<(String, Vec<usize>)>,
}

/// Zero-mean rows of length `fan_in` with the original sampling variance.
fn center_rows<T: Real>(data: &mut [T], fan_in: usize) {
    if fan_in < 2 {
        return;
    }
    let gain = T::from_f64((fan_in as f64 / (fan_in - 1) as f64).sqrt());
    let n = T::from_f64(fan_in as f64);
    for row in data.chunks_mut(fan_in) {
        let mean = row.iter().copied().sum::<T>() / n;
        row.iter_mut().for_each(|v| *v = (*v - mean) * gain);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LightCnn<T> {
    config: ModelConfig,
    params: Vec<Parameter<T>>,
}

impl<T: Real> LightCnn<T> {
    /// Fan-in scaled uniform weights and zero biases from a seeded generator.
    ///
    /// Each unit's incoming weights are then shifted to sum to zero and
    /// rescaled to keep variance `1 / fan_in`. MFM and max pooling give every
    /// hidden activation a positive mean; uncentred filters turn that mean
    /// into an input-independent offset that compounds with depth until all
    /// inputs embed almost identically.
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .parameter_shapes()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with(".bias") {
                    Parameter::new(name, Tensor::zeros(shape))
                } else {
                    let fan_in = shape[1..].iter().product();
                    let mut p = Parameter::fan_in_uniform(name, shape, fan_in, &mut rng);
                    center_rows(p.tensor.data_mut(), fan_in);
                    p
                }
            })
            .collect();
        Self { config, params }
    }

    pub fn from_parameters(config: ModelConfig, params: Vec<Parameter<T>>) -> Result<Self, ModelError> {
        let want = config.parameter_shapes();
        if want.len() != params.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                want.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in want.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.tensor.shape() {
                return Err(ModelError::ShapeMismatch(format!(
                    "{name} {shape:?} vs stored {} {:?}",
                    p.name,
                    p.tensor.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn cast<U: Real>(&self) -> LightCnn<U> {
        LightCnn {
            config: self.config,
            params: self.params.iter().map(Parameter::cast).collect(),
        }
    }

    /// Conv layers count `k·k·Cin·Cout + Cout`, FC1 `n·m + m`, FC2 `d·n_out`.
    pub fn count_params(&self) -> ParamCount {
        let mut per_layer: Vec<(String, usize)> = Vec::new();
        for p in &self.params {
            let layer = p.name.split('.').next().unwrap().to_string();
            match per_layer.last_mut() {
                Some((l, c)) if *l == layer => *c += p.len(),
                _ => per_layer.push((layer, p.len())),
            }
        }
        let total = per_layer.iter().map(|(_, c)| c).sum();
        ParamCount { per_layer, total }
    }

    /// Stacks normalized 64×96 matrices into a `[B, 64, 96, 1]` tensor.
    pub fn input_tensor(feats: &[&FeatureMatrix]) -> Result<Tensor<T>, ModelError> {
        let mut data = Vec::with_capacity(feats.len() * N_BANDS * N_FRAMES);
        for f in feats {
            if !f.is_network_input() {
                return Err(ModelError::BadInput(format!("got {}x{}", f.n_bands, f.n_frames)));
            }
            if !f.normalized {
                return Err(ModelError::BadInput("not normalized".into()));
            }
            data.extend(f.values.iter().map(|&v| T::from_f64(v as f64)));
        }
        Ok(Tensor::new(vec![feats.len(), N_BANDS, N_FRAMES, 1], data)?)
    }

    /// Records the network on `tape`. With `trainable`, parameters are
    /// gradient-tracking leaves; `with_classifier` adds FC2.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        trainable: bool,
        with_classifier: bool,
    ) -> Result<Forward, ModelError> {
        let in_shape = tape.value(input)?.shape().to_vec();
        if in_shape.len() != 4 || in_shape[1..] != [N_BANDS, N_FRAMES, 1] {
            return Err(ModelError::BadInput(format!("input tensor shape {in_shape:?}")));
        }
        let n_params = if with_classifier {
            self.params.len()
        } else {
            self.params.len() - 1
        };
        let params: Vec<Var> = self.params[..n_params]
            .iter()
            .map(|p| if trainable { tape.param(p) } else { tape.constant(p) })
            .collect();
        let mut trace = Vec::new();
        let mut record = |tape: &Tape<T>, name: String, v: Var| -> Result<Var, ModelError> {
            let shape = tape.value(v)?.shape()[1..].to_vec();
            trace.push((name, shape));
            Ok(v)
        };

        let mut x = input;
        let mut pool = 0;
        for (i, &(name, _, _, pool_after)) in CONV_STACK.iter().enumerate() {
            let suffix = &name[4..];
            x = tape.conv2d_same(x, params[2 * i], params[2 * i + 1])?;
            x = record(tape, format!("Conv{suffix}"), x)?;
            x = tape.mfm(x)?;
            x = record(tape, format!("MFM{suffix}"), x)?;
            if pool_after {
                pool += 1;
                x = tape.maxpool2x2(x)?;
                x = record(tape, format!("MaxPool{pool}"), x)?;
            }
        }
        let shape = tape.value(x)?.shape().to_vec();
        let flat: usize = shape[1..].iter().product();
        // [B, freq, time, channel] row-major: frequency-major, then time, then channel.
        x = tape.reshape(x, vec![shape[0], flat])?;
        let fc = 2 * CONV_STACK.len();
        x = tape.dense(x, params[fc], Some(params[fc + 1]))?;
        x = record(tape, "FC1".into(), x)?;
        let embedding = tape.mfm(x)?;
        record(tape, "MFM6".into(), embedding)?;
        let logits = if with_classifier {
            let l = tape.dense(embedding, params[fc + 2], None)?;
            record(tape, "FC2".into(), l)?;
            Some(l)
        } else {
            None
        };
        Ok(Forward {
            embedding,
            logits,
            params,
            trace,
        })
    }

    /// Layer output shapes (without the batch axis) for one zero input.
    pub fn trace_shapes(&self) -> Result<Vec<(String, Vec<usize>)>, ModelError> {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, N_BANDS, N_FRAMES, 1]), false);
        Ok(self.forward(&mut tape, x, false, true)?.trace)
    }

    /// Classifier logits, one row per input.
    pub fn forward_logits(&self, feats: &[&FeatureMatrix]) -> Result<Vec<Vec<T>>, ModelError> {
        self.infer(feats, true)
    }

    /// MFM6 outputs, one row per input. FC2 is never evaluated.
    pub fn forward_embedding(&self, feats: &[&FeatureMatrix]) -> Result<Vec<Vec<T>>, ModelError> {
        self.infer(feats, false)
    }

    fn infer(&self, feats: &[&FeatureMatrix], logits: bool) -> Result<Vec<Vec<T>>, ModelError> {
        if feats.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let x = tape.leaf(Self::input_tensor(feats)?, false);
        let fwd = self.forward(&mut tape, x, false, logits)?;
        let out = tape.value(if logits { fwd.logits.unwrap() } else { fwd.embedding })?;
        let dim = out.shape()[1];
        Ok(out.data().chunks_exact(dim).map(<[T]>::to_vec).collect())
    }

    /// Copies tape gradients for `vars` (from [`Forward::params`]) onto the
    /// parameters, accumulating into any existing gradient.
    pub fn collect_grads(&mut self, tape: &Tape<T>, vars: &[Var]) -> Result<(), ModelError> {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            let g = tape
                .grad(v)?
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); p.len()]);
            match &mut p.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
                None => p.grad = Some(g),
            }
        }
        Ok(())
    }
}

/// Provenance stored alongside the weights.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: u32,
    pub final_loss: f64,
    pub label_digest: u64,
}

/// A saved extractor: weights plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: LightCnn<f32>,
    pub meta: TrainingMeta,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.model.config();
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        buf.extend_from_slice(&cfg.width.num().to_le_bytes());
        buf.extend_from_slice(&cfg.width.den().to_le_bytes());
        buf.extend_from_slice(&(cfg.n_out as u32).to_le_bytes());
        buf.extend_from_slice(&self.meta.seed.to_le_bytes());
        buf.extend_from_slice(&self.meta.epochs.to_le_bytes());
        buf.extend_from_slice(&self.meta.final_loss.to_le_bytes());
        buf.extend_from_slice(&self.meta.label_digest.to_le_bytes());
        buf.extend_from_slice(&(self.model.params().len() as u32).to_le_bytes());
        for p in self.model.params() {
            buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(p.name.as_bytes());
            let shape = p.tensor.shape();
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < 8 {
            return Err(ModelError::Truncated);
        }
        if &bytes[..4] != CKPT_MAGIC {
            return Err(ModelError::BadMagic);
        }
        let mut r = Reader { buf: bytes, pos: 4 };
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(ModelError::Version(version));
        }
        if bytes.len() < 12 {
            return Err(ModelError::Truncated);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        let mut r = Reader { buf: body, pos: 8 };
        let width = Width::new(r.u32()?, r.u32()?)?;
        let n_out = r.u32()? as usize;
        let meta = TrainingMeta {
            seed: r.u64()?,
            epochs: r.u32()?,
            final_loss: f64::from_bits(r.u64()?),
            label_digest: r.u64()?,
        };
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| ModelError::ShapeMismatch("non-utf8 parameter name".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(n.checked_mul(4).ok_or(ModelError::Truncated)?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push(Parameter::new(name, Tensor::new(shape, data)?));
        }
        if stored != computed {
            return Err(ModelError::Checksum { stored, computed });
        }
        if r.pos != body.len() {
            return Err(ModelError::ShapeMismatch("trailing bytes after parameters".into()));
        }
        let config = ModelConfig::new(width, n_out)?;
        Ok(Self {
            model: LightCnn::from_parameters(config, params)?,
            meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Loads and checks that the stored architecture matches `config`.
    pub fn load_expecting(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Self, ModelError> {
        let ck = Self::load(path)?;
        let want = config.parameter_shapes();
        let got: Vec<_> = ck
            .model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.tensor.shape().to_vec()))
            .collect();
        if want != got {
            let (n, s) = want
                .iter()
                .zip(&got)
                .find(|(a, b)| a != b)
                .map(|(a, b)| (a.0.clone(), format!("{:?} expected, {:?} stored", a.1, b.1)))
                .unwrap_or_else(|| ("parameters".into(), "count differs".into()));
            return Err(ModelError::ShapeMismatch(format!("{n}: {s}")));
        }
        Ok(ck)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).ok_or(ModelError::Truncated)?;
        if end > self.buf.len() {
            return Err(ModelError::Truncated);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
