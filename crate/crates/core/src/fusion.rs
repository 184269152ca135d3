//! Local–global feature fusion and its three submodules.

use hiper_tensor::{ConvSpec, PoolKind, Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, ParamBuilder};

/// Channel-affinity attention with a residual: `x + R(softmax(R·Rᵀ)·R)` where
/// `R` flattens each channel to a row. Parameter-free.
pub fn aci<'t, T: Scalar>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Config(format!(
            "aci expects [N, C, H, W], got {s:?}"
        )));
    }
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let r = x.reshape(&[n, c, hw])?;
    let affinity = r.matmul(r.transpose_last()?)?.softmax(2)?;
    let mixed = affinity.matmul(r)?.reshape(&s)?;
    Ok(x.add(mixed)?)
}

/// Spatial gate `x ⊙ σ(conv7(conv7(x)))` with a `C → C/r → C` channel plan.
#[derive(Clone, Debug)]
pub struct Spe {
    pub reduce: Conv2d,
    pub expand: Conv2d,
}

impl Spe {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Self {
        let mut b = b.sub(name);
        let mid = (channels / reduction).max(1);
        let spec = ConvSpec::same(7, 1);
        Self {
            reduce: Conv2d::new(&mut b, "reduce", channels, mid, 7, spec, true),
            expand: Conv2d::new(&mut b, "expand", mid, channels, 7, spec, true),
        }
    }

    pub fn gate<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self
            .expand
            .forward(ctx, self.reduce.forward(ctx, x)?)?
            .sigmoid()?)
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        Ok(x.mul(self.gate(ctx, x)?)?)
    }
}

/// Inverted-residual MLP: depthwise 3×3 with a residual, pointwise expansion,
/// GELU, pointwise projection.
#[derive(Clone, Debug)]
pub struct Irmlp {
    pub dw: Conv2d,
    pub expand: Conv2d,
    pub project: Conv2d,
}

impl Irmlp {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        expansion: usize,
    ) -> Self {
        let mut b = b.sub(name);
        let one = ConvSpec::same(1, 1);
        Self {
            dw: Conv2d::new(
                &mut b,
                "dw",
                c_in,
                c_in,
                3,
                ConvSpec::same(3, 1).with_groups(c_in),
                true,
            ),
            expand: Conv2d::new(&mut b, "expand", c_in, expansion * c_in, 1, one, true),
            project: Conv2d::new(&mut b, "project", expansion * c_in, c_out, 1, one, true),
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let inner = self.dw.forward(ctx, x)?.add(x)?;
        let hidden = self.expand.forward(ctx, inner)?.gelu()?;
        self.project.forward(ctx, hidden)
    }
}

/// Fuses a local map, a global map and the previous fused stage.
#[derive(Clone, Debug)]
pub struct Lgff {
    pub channels: usize,
    pub prev: Option<Conv2d>,
    pub mid: Conv2d,
    pub spe: Spe,
    pub irmlp: Irmlp,
}

impl Lgff {
    /// `prev_channels` is `None` at the first stage, which has no predecessor.
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
        prev_channels: Option<usize>,
        reduction: usize,
        expansion: usize,
    ) -> Self {
        let mut b = b.sub(name);
        let one = ConvSpec::same(1, 1);
        Self {
            channels,
            prev: prev_channels.map(|p| Conv2d::new(&mut b, "prev", p, channels, 1, one, true)),
            mid: Conv2d::new(&mut b, "mid", 3 * channels, channels, 1, one, true),
            spe: Spe::new(&mut b, "spe", channels, reduction),
            irmlp: Irmlp::new(&mut b, "irmlp", 3 * channels, channels, expansion),
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        local: Var<'t, T>,
        global: Var<'t, T>,
        prev: Option<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        let ls = local.shape();
        if global.shape() != ls || ls[1] != self.channels {
            return Err(Error::Config(format!(
                "fusion inputs misaligned: local {ls:?}, global {:?}, width {}",
                global.shape(),
                self.channels
            )));
        }
        let mid1 = match (prev, &self.prev) {
            (Some(p), Some(conv)) => {
                let ps = p.shape();
                if ps[2] != 2 * ls[2] || ps[3] != 2 * ls[3] {
                    return Err(Error::Config(format!(
                        "previous fused map {ps:?} is not twice {ls:?}"
                    )));
                }
                conv.forward(ctx, p)?.pool2d(PoolKind::Avg, 2, 2)?
            }
            (None, None) => ctx.constant(Tensor::zeros(ls.clone())),
            _ => {
                return Err(Error::Config(
                    "previous fused map given to the wrong stage".into(),
                ))
            }
        };
        let mid2 = self
            .mid
            .forward(ctx, Var::concat(&[local, mid1, global], 1)?)?;
        let cat = Var::concat(&[aci(local)?, mid2, self.spe.forward(ctx, global)?], 1)?;
        Ok(self.irmlp.forward(ctx, cat)?.add(mid1)?)
    }
}
