//! A small reverse-mode autodiff engine with exactly the layers the Light-CNN
//! needs: same-padded convolution, 2×2 max pooling, Max-Feature-Map, dense
//! layers and softmax cross-entropy.
//!
//! Tensors are row-major with the batch on the leading axis. Feature maps are
//! laid out `[batch, freq, time, channel]`, so the channel axis is innermost.

mod gradcheck;
mod optim;
mod tape;

use std::fmt::Debug;

use num_traits::Float;
use rand::Rng;
use thiserror::Error;

pub use gradcheck::{grad_check, separated_values, GradCheckReport};
pub use optim::{clip_grad_norm, lr_at_epoch, sgd_step};
pub use tape::{Tape, Var};

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("channel mismatch: input has {input} channels, filters expect {filters}")]
    ChannelMismatch { input: usize, filters: usize },
    #[error("maxpool2x2 needs even spatial dims, got {0:?}")]
    OddSpatial(Vec<usize>),
    #[error("mfm needs an even channel count, got {0}")]
    OddChannels(usize),
    #[error("kernel size must be odd, got {0}")]
    EvenKernel(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter {0} has no gradient")]
    MissingGradient(String),
}

/// Floating-point element type: `f32` for training, `f64` for gradient checks.
pub trait Real: Float + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    /// `C ← alpha·A·B + beta·C` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self;
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let span = |r: isize, c: isize, rows: usize, cols: usize| {
                    (rows.saturating_sub(1) as isize * r + cols.saturating_sub(1) as isize * c) as usize
                };
                assert!(k == 0 || span(rsa, csa, m, k) < a.len());
                assert!(k == 0 || span(rsb, csb, k, n) < b.len());
                assert!(span(rsc, csc, m, n) < c.len());
                // SAFETY: the assertions above bound every strided access
                // within the borrowed slices; strides are non-negative.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }

            fn from_f64(v: f64) -> Self {
                v as $t
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()))
                .collect(),
        }
    }
}

/// A named trainable tensor with its gradient and momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub grad: Option<Vec<T>>,
    pub velocity: Vec<T>,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        let velocity = vec![T::zero(); tensor.len()];
        Self {
            name: name.into(),
            tensor,
            grad: None,
            velocity,
        }
    }

    /// Uniform in `±sqrt(3 / fan_in)`, i.e. weight variance `1 / fan_in`.
    /// MFM keeps the second moment of its input (unlike ReLU, which halves
    /// it), so this keeps activation scale constant through the network.
    pub fn fan_in_uniform<R: Rng>(name: impl Into<String>, shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Self {
        let bound = (3.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        Self::new(name, Tensor { shape, data })
    }

    pub fn len(&self) -> usize {
        self.tensor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensor.is_empty()
    }

    pub fn cast<U: Real>(&self) -> Parameter<U> {
        Parameter::new(self.name.clone(), self.tensor.cast())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_invariant() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn parameter_velocity_starts_at_zero() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let p = Parameter::<f32>::fan_in_uniform("w", vec![4, 3], 3, &mut rng);
        assert_eq!(p.velocity, vec![0.0; 12]);
        let bound = 1.0;
        assert!(p.tensor.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn gemm_matches_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        f64::gemm(2, 3, 4, 1.0, &a, 3, 1, &b, 4, 1, 0.0, &mut c, 4, 1);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
    }
}
