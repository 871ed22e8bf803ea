use rand::Rng;

use super::kpconv::PairGeometry;
use super::{BatchNorm, KernelPoints, KpConvDs, Linear, Mlp};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Forward, ParamStore};
use crate::scalar::Scalar;

/// Residual block: reduce → KPConv-DS → BN/ReLU → restore → add input → ReLU.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    d: usize,
    reduce: Mlp,
    conv: KpConvDs,
    conv_bn: BatchNorm,
    restore: Linear,
    restore_bn: BatchNorm,
}

impl Bottleneck {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        ratio: usize,
        kernel: &KernelPoints,
        mlp_depth: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if ratio == 0 || d % ratio != 0 || d / ratio == 0 {
            return Err(Error::Config(format!(
                "bottleneck width {d} is not divisible by reduction ratio {ratio}"
            )));
        }
        let c = d / ratio;
        Ok(Self {
            d,
            reduce: Mlp::new(store, &format!("{prefix}.reduce"), d, &[c], true, rng),
            conv: KpConvDs::new(store, &format!("{prefix}.conv"), c, c, kernel, mlp_depth, rng)?,
            conv_bn: BatchNorm::new(store, &format!("{prefix}.conv_bn"), c),
            restore: Linear::new(store, &format!("{prefix}.restore.linear"), c, d, false, rng),
            restore_bn: BatchNorm::new(store, &format!("{prefix}.restore.bn"), d),
        })
    }

    pub fn width(&self) -> usize {
        self.d
    }

    pub fn conv(&self) -> &KpConvDs {
        &self.conv
    }

    pub fn num_params<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        self.reduce.num_params()
            + self.conv.num_params(store)
            + self.conv_bn.num_params()
            + self.restore.num_params()
            + self.restore_bn.num_params()
    }

    /// `geom` must be a self-neighborhood (queries equal sources).
    pub fn forward<'a, T: Scalar>(
        &self,
        f: &Forward<'a, T>,
        x: Var<'a, T>,
        geom: &PairGeometry<T>,
    ) -> Result<Var<'a, T>> {
        let h = self.reduce.forward(f, x)?;
        let h = self.conv_bn.forward(f, self.conv.forward(f, h, geom)?)?.relu();
        let h = self.restore_bn.forward(f, self.restore.forward(f, h)?)?;
        Ok(x.add(h)?.relu())
    }
}
