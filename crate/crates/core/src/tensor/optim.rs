use super::{Parameter, Real, TensorError};

/// Momentum SGD: `v ← μ·v − lr·g; w ← w + v`, then clears the gradients.
pub fn sgd_step<T: Real>(params: &mut [Parameter<T>], lr: f64, momentum: f64) -> Result<(), TensorError> {
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(TensorError::MissingGradient(p.name.clone()));
    }
    let (lr, mu) = (T::from_f64(lr), T::from_f64(momentum));
    for p in params.iter_mut() {
        let grad = p.grad.take().expect("checked above");
        for ((w, v), g) in p.tensor.data_mut().iter_mut().zip(p.velocity.iter_mut()).zip(grad) {
            *v = mu * *v - lr * g;
            *w = *w + *v;
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
///
/// Returns the norm before rescaling. A `max_norm` of zero only measures.
pub fn clip_grad_norm<T: Real>(params: &mut [Parameter<T>], max_norm: f64) -> Result<f64, TensorError> {
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(TensorError::MissingGradient(p.name.clone()));
    }
    let norm = params
        .iter()
        .flat_map(|p| p.grad.iter().flatten())
        .map(|g| {
            let g = g.to_f64().unwrap_or(f64::NAN);
            g * g
        })
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = T::from_f64(max_norm / norm);
        for g in params.iter_mut().flat_map(|p| p.grad.iter_mut().flatten()) {
            *g = *g * scale;
        }
    }
    Ok(norm)
}

/// Step decay: `lr0 · gamma^floor(epoch / period)`.
pub fn lr_at_epoch(epoch: usize, lr0: f64, gamma: f64, period: usize) -> f64 {
    lr0 * gamma.powi((epoch / period.max(1)) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_param(w: f64, g: Option<f64>) -> Parameter<f64> {
        let mut p = Parameter::new("w", Tensor::scalar(w));
        p.grad = g.map(|g| vec![g]);
        p
    }

    #[test]
    fn plain_step() {
        let mut ps = vec![scalar_param(0.0, Some(1.0))];
        sgd_step(&mut ps, 0.1, 0.0).unwrap();
        assert!((ps[0].tensor.data()[0] + 0.1).abs() < 1e-15);
        assert!(ps[0].grad.is_none());
    }

    #[test]
    fn momentum_recurrence() {
        let mut ps = vec![scalar_param(0.0, Some(1.0))];
        sgd_step(&mut ps, 0.1, 0.9).unwrap();
        ps[0].grad = Some(vec![1.0]);
        sgd_step(&mut ps, 0.1, 0.9).unwrap();
        assert!((ps[0].tensor.data()[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_and_missing_gradient() {
        let mut ps = vec![scalar_param(0.7, Some(0.0))];
        sgd_step(&mut ps, 0.1, 0.9).unwrap();
        assert_eq!(ps[0].tensor.data()[0], 0.7);
        assert_eq!(
            sgd_step(&mut ps, 0.1, 0.9),
            Err(TensorError::MissingGradient("w".into()))
        );
    }

    #[test]
    fn clipping_bounds_the_joint_norm() {
        let mut ps = vec![scalar_param(0.0, Some(3.0)), scalar_param(0.0, Some(-4.0))];
        assert_eq!(clip_grad_norm(&mut ps, 10.0).unwrap(), 5.0);
        assert_eq!(ps[1].grad, Some(vec![-4.0]));
        assert_eq!(clip_grad_norm(&mut ps, 1.0).unwrap(), 5.0);
        assert!((ps[0].grad.as_ref().unwrap()[0] - 0.6).abs() < 1e-15);
        assert!((ps[1].grad.as_ref().unwrap()[0] + 0.8).abs() < 1e-15);
        assert_eq!(clip_grad_norm(&mut ps, 0.0).unwrap(), 1.0);
        ps[0].grad = None;
        assert!(clip_grad_norm(&mut ps, 1.0).is_err());
    }

    #[test]
    fn step_decay() {
        assert_eq!(lr_at_epoch(0, 0.01, 0.5, 10), 0.01);
        assert_eq!(lr_at_epoch(9, 0.01, 0.5, 10), 0.01);
        assert_eq!(lr_at_epoch(10, 0.01, 0.5, 10), 0.005);
        assert_eq!(lr_at_epoch(25, 0.01, 0.5, 10), 0.0025);
    }
}
