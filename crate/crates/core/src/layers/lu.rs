//! The Laplacian Unit.
//!
//! `x_i' = fuse(x_i, Δx_i)` with `Δx_i = T((1/|N(i)|) Σ_j M(x_j - x_i))`,
//! where `M` is a bias-free linear map and `T = ReLU ∘ BatchNorm`. Because `M`
//! is linear the umbrella vector is formed first and mapped once per point.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{uniform, BatchNorm};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::geometry::NeighborIndex;
use crate::params::{Forward, ParamId, ParamStore};
use crate::scalar::Scalar;

/// How the input feature and the local branch are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// `x + Δx`
    Add,
    /// `[x ; Δx] R` with a learned restoring map `R`
    Concat,
    /// `x ⊙ Δx`
    Mul,
    /// `Δx` alone
    None,
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Add => "add",
            Fusion::Concat => "concat",
            Fusion::Mul => "mul",
            Fusion::None => "none",
        })
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "add" => Ok(Fusion::Add),
            "concat" => Ok(Fusion::Concat),
            "mul" => Ok(Fusion::Mul),
            "none" => Ok(Fusion::None),
            other => Err(Error::Config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

/// Hyperparameters of one Laplacian Unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LuConfig {
    pub k: usize,
    pub use_m: bool,
    pub use_t: bool,
    pub fusion: Fusion,
    pub d_in: usize,
    pub d_out: usize,
}

impl LuConfig {
    /// Full unit (M and T on, additive fusion, 16 neighbors) at width `d`.
    pub fn new(d: usize) -> Self {
        Self {
            k: 16,
            use_m: true,
            use_t: true,
            fusion: Fusion::Add,
            d_in: d,
            d_out: d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("LU needs k >= 1".into()));
        }
        if !self.use_m && self.d_in != self.d_out {
            return Err(Error::Config(format!(
                "LU without M needs d_in == d_out, got {} and {}",
                self.d_in, self.d_out
            )));
        }
        if matches!(self.fusion, Fusion::Add | Fusion::Mul) && self.d_in != self.d_out {
            return Err(Error::Config(format!(
                "{} fusion needs d_in == d_out, got {} and {}",
                self.fusion, self.d_in, self.d_out
            )));
        }
        Ok(())
    }
}

/// Scale of the initial `M` relative to the usual `1/sqrt(d_in)` bound.
const M_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct LaplacianUnit {
    name: String,
    cfg: LuConfig,
    m: Option<ParamId>,
    t_bn: Option<BatchNorm>,
    restore: Option<ParamId>,
}

impl LaplacianUnit {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: LuConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let m = cfg.use_m.then(|| {
            let bound = M_INIT_SCALE / (cfg.d_in as f64).sqrt();
            store.add_param(format!("{name}.m"), uniform(rng, &[cfg.d_in, cfg.d_out], bound))
        });
        let t_bn = cfg
            .use_t
            .then(|| BatchNorm::new(store, &format!("{name}.t_bn"), cfg.d_out));
        let restore = (cfg.fusion == Fusion::Concat).then(|| {
            let d = cfg.d_in + cfg.d_out;
            store.add_param(
                format!("{name}.restore"),
                uniform(rng, &[d, cfg.d_out], 1.0 / (d as f64).sqrt()),
            )
        });
        Ok(Self {
            name: name.to_string(),
            cfg,
            m,
            t_bn,
            restore,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn config(&self) -> &LuConfig {
        &self.cfg
    }

    pub fn m(&self) -> Option<ParamId> {
        self.m
    }

    pub fn t_bn(&self) -> Option<&BatchNorm> {
        self.t_bn.as_ref()
    }

    pub fn restore(&self) -> Option<ParamId> {
        self.restore
    }

    pub fn num_params(&self) -> usize {
        let c = &self.cfg;
        let m = if c.use_m { c.d_in * c.d_out } else { 0 };
        let t = self.t_bn.as_ref().map_or(0, BatchNorm::num_params);
        let r = if self.restore.is_some() {
            (c.d_in + c.d_out) * c.d_out
        } else {
            0
        };
        m + t + r
    }

    /// Applies the unit to `x` (`n×d_in`) over the self-aligned neighborhoods `nbr`.
    ///
    /// With taps enabled records `<name>.in`, `<name>.delta` and `<name>.out`.
    /// Gradient-free evaluation: T, ReLU and the fusion in a single pass.
    fn fused_eval<'a, T: Scalar>(&self, f: &Forward<'a, T>, x: Var<'a, T>, mapped: Var<'a, T>) -> Result<Var<'a, T>> {
        let d = self.cfg.d_out;
        let mut delta = mapped.to_tensor();
        if let Some(bn) = &self.t_bn {
            let (scale, shift) = bn.eval_affine(f.store());
            for row in delta.data_mut().chunks_exact_mut(d) {
                for ((v, &a), &b) in row.iter_mut().zip(&scale).zip(&shift) {
                    *v = (*v * a + b).max(T::zero());
                }
            }
        }
        let out = match self.cfg.fusion {
            Fusion::Add | Fusion::Mul => {
                let add = self.cfg.fusion == Fusion::Add;
                let mut out = x.to_tensor();
                for (o, &v) in out.data_mut().iter_mut().zip(delta.data()) {
                    *o = if add { *o + v } else { *o * v };
                }
                Some(out)
            }
            _ => None,
        };
        let delta = f.constant(delta);
        let out = out.map_or(delta, |t| f.constant(t));
        if f.taps_enabled() {
            f.tap(&format!("{}.in", self.name), &x);
            f.tap(&format!("{}.delta", self.name), &delta);
            f.tap(&format!("{}.out", self.name), &out);
        }
        Ok(out)
    }

    pub fn forward<'a, T: Scalar>(
        &self,
        f: &Forward<'a, T>,
        x: Var<'a, T>,
        nbr: &NeighborIndex,
    ) -> Result<Var<'a, T>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.cfg.d_in {
            return Err(Error::Shape {
                op: "laplacian unit",
                left: shape,
                right: vec![self.cfg.d_in, self.cfg.d_out],
            });
        }
        if nbr.len() != shape[0] || nbr.n_source() != shape[0] {
            return Err(Error::Shape {
                op: "laplacian unit neighbors",
                left: shape,
                right: vec![nbr.len(), nbr.k()],
            });
        }
        let local = x.umbrella(nbr.shared(), nbr.k())?;
        let mapped = match self.m {
            Some(m) => local.matmul(f.param(m))?,
            None => local,
        };
        if !f.training() && !x.requires_grad() && !mapped.requires_grad() && self.cfg.fusion != Fusion::Concat {
            return self.fused_eval(f, x, mapped);
        }
        let delta = match &self.t_bn {
            Some(bn) => bn.forward(f, mapped)?.relu(),
            None => mapped,
        };
        let out = match self.cfg.fusion {
            Fusion::Add => x.add(delta)?,
            Fusion::Mul => x.mul(delta)?,
            Fusion::None => delta,
            Fusion::Concat => {
                let r = self.restore.expect("concat fusion owns a restore map");
                f.tape().concat_cols(&[x, delta])?.matmul(f.param(r))?
            }
        };
        if f.taps_enabled() {
            f.tap(&format!("{}.in", self.name), &x);
            f.tap(&format!("{}.delta", self.name), &delta);
            f.tap(&format!("{}.out", self.name), &out);
        }
        Ok(out)
    }
}
