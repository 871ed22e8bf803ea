use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Forward, ParamId, ParamStore};
use crate::scalar::{cast, count, Scalar};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over the row (point) axis.
///
/// Training mode normalizes with batch statistics and queues an update of
/// the running statistics; evaluation mode uses the running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    width: usize,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, width: usize) -> Self {
        Self {
            width,
            gamma: store.add_param(format!("{prefix}.gamma"), Tensor::full(&[width], T::one())),
            beta: store.add_param(format!("{prefix}.beta"), Tensor::zeros(&[width])),
            running_mean: store.add_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[width])),
            running_var: store.add_buffer(format!("{prefix}.running_var"), Tensor::full(&[width], T::one())),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn gamma(&self) -> ParamId {
        self.gamma
    }

    pub fn beta(&self) -> ParamId {
        self.beta
    }

    pub fn running_mean(&self) -> ParamId {
        self.running_mean
    }

    pub fn running_var(&self) -> ParamId {
        self.running_var
    }

    pub fn num_params(&self) -> usize {
        2 * self.width
    }

    /// Evaluation-mode map as per-channel `(scale, shift)`: `y = x·scale + shift`.
    pub fn eval_affine<T: Scalar>(&self, store: &ParamStore<T>) -> (Vec<T>, Vec<T>) {
        let eps: T = cast(BN_EPS);
        let (mean, var) = (store.value(self.running_mean).data(), store.value(self.running_var).data());
        let (gamma, beta) = (store.value(self.gamma).data(), store.value(self.beta).data());
        let scale: Vec<T> = (0..self.width).map(|c| gamma[c] / (var[c] + eps).sqrt()).collect();
        let shift = (0..self.width).map(|c| beta[c] - mean[c] * scale[c]).collect();
        (scale, shift)
    }

    pub fn forward<'a, T: Scalar>(&self, f: &Forward<'a, T>, x: Var<'a, T>) -> Result<Var<'a, T>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.width {
            return Err(Error::Shape {
                op: "batch_norm",
                left: shape,
                right: vec![self.width],
            });
        }
        let normalized = if f.training() {
            let (xhat, stats) = x.batch_normalize(cast(BN_EPS))?;
            let n = shape[0];
            let m: T = cast(BN_MOMENTUM);
            let unbias = count::<T>(n) / count::<T>(n - 1);
            let store = f.store();
            let rm: Vec<T> = store
                .value(self.running_mean)
                .data()
                .iter()
                .zip(&stats.mean)
                .map(|(&r, &b)| (T::one() - m) * r + m * b)
                .collect();
            let rv: Vec<T> = store
                .value(self.running_var)
                .data()
                .iter()
                .zip(&stats.var)
                .map(|(&r, &b)| (T::one() - m) * r + m * b * unbias)
                .collect();
            f.update_buffer(self.running_mean, Tensor::new(vec![self.width], rm)?);
            f.update_buffer(self.running_var, Tensor::new(vec![self.width], rv)?);
            xhat
        } else {
            // parameters are constants here, so the whole map folds into one scale and shift
            let (scale, shift) = self.eval_affine(f.store());
            return x
                .mul_row(f.constant(Tensor::new(vec![self.width], scale)?))?
                .add_row(f.constant(Tensor::new(vec![self.width], shift)?));
        };
        normalized.mul_row(f.param(self.gamma))?.add_row(f.param(self.beta))
    }
}
