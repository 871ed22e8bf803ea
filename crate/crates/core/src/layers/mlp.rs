use rand::Rng;

use super::{uniform, BatchNorm};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Forward, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pointwise affine map `x W (+ b)` shared across rows.
#[derive(Clone, Debug)]
pub struct Linear {
    d_in: usize,
    d_out: usize,
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (d_in.max(1) as f64).sqrt();
        Self {
            d_in,
            d_out,
            weight: store.add_param(format!("{prefix}.weight"), uniform(rng, &[d_in, d_out], bound)),
            bias: bias.then(|| store.add_param(format!("{prefix}.bias"), Tensor::zeros(&[d_out]))),
        }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn num_params(&self) -> usize {
        self.d_in * self.d_out + if self.bias.is_some() { self.d_out } else { 0 }
    }

    pub fn forward<'a, T: Scalar>(&self, f: &Forward<'a, T>, x: Var<'a, T>) -> Result<Var<'a, T>> {
        let y = x.matmul(f.param(self.weight))?;
        match self.bias {
            Some(b) => y.add_row(f.param(b)),
            None => Ok(y),
        }
    }
}

/// Chain of `linear -> batch norm -> ReLU`, one stage per width.
///
/// Linears carry no bias since the following normalization absorbs it. The
/// last stage's ReLU is optional.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<(Linear, BatchNorm)>,
    final_relu: bool,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_in: usize,
        widths: &[usize],
        final_relu: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut d = d_in;
        for (i, &w) in widths.iter().enumerate() {
            let lin = Linear::new(store, &format!("{prefix}.{i}.linear"), d, w, false, rng);
            let bn = BatchNorm::new(store, &format!("{prefix}.{i}.bn"), w);
            layers.push((lin, bn));
            d = w;
        }
        Self { layers, final_relu }
    }

    pub fn layers(&self) -> &[(Linear, BatchNorm)] {
        &self.layers
    }

    pub fn d_out(&self) -> Option<usize> {
        self.layers.last().map(|(l, _)| l.d_out())
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|(l, b)| l.num_params() + b.num_params())
            .sum()
    }

    pub fn forward<'a, T: Scalar>(&self, f: &Forward<'a, T>, x: Var<'a, T>) -> Result<Var<'a, T>> {
        if let Some((first, _)) = self.layers.first() {
            let w = x.shape().get(1).copied().unwrap_or(0);
            if w != first.d_in() {
                return Err(Error::Shape {
                    op: "mlp",
                    left: x.shape(),
                    right: vec![first.d_in()],
                });
            }
        }
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (i, (lin, bn)) in self.layers.iter().enumerate() {
            h = bn.forward(f, lin.forward(f, h)?)?;
            if i < last || self.final_relu {
                h = h.relu();
            }
        }
        Ok(h)
    }
}
