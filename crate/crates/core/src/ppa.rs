//! Bridge between encoder and decoder: cascaded multiplicative integration
//! down the pyramid, and the gated pyramid attention applied per decoder level.

use hiper_tensor::{Activation, ConvSpec, ResizeMode, Scalar, Var};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBnAct, Ctx, ParamBuilder};

/// 3×3 conv + BN + ReLU followed by a 1×1 conv.
#[derive(Clone, Debug)]
pub struct Refine {
    pub conv3: ConvBnAct,
    pub conv1: Conv2d,
}

impl Refine {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        let mut b = b.sub(name);
        Self {
            conv3: ConvBnAct::new(
                &mut b,
                "conv3",
                c_in,
                c_out,
                3,
                ConvSpec::same(3, 1),
                Some(Activation::Relu),
            ),
            conv1: Conv2d::new(&mut b, "conv1", c_out, c_out, 1, ConvSpec::same(1, 1), true),
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        self.conv1.forward(ctx, self.conv3.forward(ctx, x)?)
    }
}

/// `y₄ = x₄`, `yᵢ = f(xᵢ) ⊙ g(Up(yᵢ₊₁))` for `i = 3, 2, 1`.
#[derive(Clone, Debug)]
pub struct Pmi {
    /// Indexed by level 1..3 as 0..2.
    pub fx: Vec<Refine>,
    pub fy: Vec<Refine>,
}

impl Pmi {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, widths: &[usize; 4]) -> Self {
        let mut b = b.sub("pmi");
        let fx = (0..3)
            .map(|i| Refine::new(&mut b, &format!("fx{}", i + 1), widths[i], widths[i]))
            .collect();
        let fy = (0..3)
            .map(|i| Refine::new(&mut b, &format!("fy{}", i + 1), widths[i + 1], widths[i]))
            .collect();
        Self { fx, fy }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        xs: &[Var<'t, T>],
    ) -> Result<Vec<Var<'t, T>>> {
        if xs.len() != 4 {
            return Err(Error::Config(format!(
                "pyramid needs 4 levels, got {}",
                xs.len()
            )));
        }
        for i in 0..3 {
            let (a, b) = (xs[i].shape(), xs[i + 1].shape());
            if a[2] != 2 * b[2] || a[3] != 2 * b[3] {
                return Err(Error::Config(format!(
                    "pyramid level {} {a:?} is not twice level {} {b:?}",
                    i + 1,
                    i + 2
                )));
            }
        }
        let mut ys = vec![xs[3]];
        for i in (0..3).rev() {
            let up = ys.last().unwrap().resize2d(2, ResizeMode::Bilinear)?;
            let y = self.fx[i]
                .forward(ctx, xs[i])?
                .mul(self.fy[i].forward(ctx, up)?)?;
            ys.push(y);
        }
        ys.reverse();
        Ok(ys)
    }
}

/// Residual attention gate `d + d ⊙ σ(ψ(ReLU(F_e + F_d)))` with a single-channel gate.
#[derive(Clone, Debug)]
pub struct Eag {
    pub we: ConvBnAct,
    pub wd: ConvBnAct,
    pub psi: Conv2d,
}

impl Eag {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        c_e: usize,
        c_d: usize,
        groups: usize,
    ) -> Self {
        let mut b = b.sub(name);
        let spec = ConvSpec::same(1, 1).with_groups(groups);
        let relu = Some(Activation::Relu);
        Self {
            we: ConvBnAct::new(&mut b, "we", c_e, c_e, 1, spec, relu),
            wd: ConvBnAct::new(&mut b, "wd", c_d, c_e, 1, spec, relu),
            psi: Conv2d::new(&mut b, "psi", c_e, 1, 1, ConvSpec::same(1, 1), true),
        }
    }

    pub fn gate<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        e: Var<'t, T>,
        d: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let (es, ds) = (e.shape(), d.shape());
        if es[0] != ds[0] || es[2..] != ds[2..] {
            return Err(Error::Config(format!(
                "gate inputs misaligned: {es:?} vs {ds:?}"
            )));
        }
        let fused = self
            .we
            .forward(ctx, e)?
            .add(self.wd.forward(ctx, d)?)?
            .relu()?;
        Ok(self.psi.forward(ctx, fused)?.sigmoid()?)
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        e: Var<'t, T>,
        d: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        Ok(d.add(d.mul(self.gate(ctx, e, d)?)?)?)
    }
}

/// Squeeze-excitation weights `σ(W₂ ReLU(W₁ avg(x)))`, one per channel.
#[derive(Clone, Debug)]
pub struct SeWeight {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

impl SeWeight {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Self {
        let mut b = b.sub(name);
        let hidden = (channels / reduction).max(1);
        let one = ConvSpec::same(1, 1);
        Self {
            fc1: Conv2d::new(&mut b, "fc1", channels, hidden, 1, one, true),
            fc2: Conv2d::new(&mut b, "fc2", hidden, channels, 1, one, true),
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let pooled = x.mean_axis(3)?.mean_axis(2)?;
        let h = self.fc1.forward(ctx, pooled)?.relu()?;
        Ok(self.fc2.forward(ctx, h)?.sigmoid()?)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Pyramid split attention: four kernel sizes each produce a quarter of the
/// channels, a shared SE module scores them, and a softmax across the four
/// scales re-weights every channel slot.
#[derive(Clone, Debug)]
pub struct Psa {
    pub channels: usize,
    pub convs: Vec<Conv2d>,
    pub se: SeWeight,
}

impl Psa {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
        kernels: &[usize; 4],
        groups: &[usize; 4],
        se_reduction: usize,
    ) -> Self {
        let mut b = b.sub(name);
        let split = channels / 4;
        let convs = kernels
            .iter()
            .zip(groups)
            .enumerate()
            .map(|(i, (&k, &g))| {
                let g = gcd(g, split);
                Conv2d::new(
                    &mut b,
                    &format!("conv{}", i + 1),
                    channels,
                    split,
                    k,
                    ConvSpec::same(k, 1).with_groups(g),
                    true,
                )
            })
            .collect();
        Self {
            channels,
            convs,
            se: SeWeight::new(&mut b, "se", split, se_reduction),
        }
    }

    /// Output and the `[N, 4, C/4]` cross-scale weights.
    pub fn forward_with_weights<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.channels || s[1] % 4 != 0 {
            return Err(Error::Config(format!(
                "split attention expects {} channels (divisible by 4), got {s:?}",
                self.channels
            )));
        }
        let (n, q, h, w) = (s[0], s[1] / 4, s[2], s[3]);
        let feats = self
            .convs
            .iter()
            .map(|c| c.forward(ctx, x))
            .collect::<Result<Vec<_>>>()?;
        let logits = feats
            .iter()
            .map(|f| {
                self.se
                    .forward(ctx, *f)?
                    .reshape(&[n, 1, q])
                    .map_err(Into::into)
            })
            .collect::<Result<Vec<_>>>()?;
        let weights = Var::concat(&logits, 1)?.softmax(1)?;
        let stacked = Var::concat(&feats, 1)?.reshape(&[n, 4, q, h, w])?;
        let out = stacked
            .mul(weights.reshape(&[n, 4, q, 1, 1])?)?
            .reshape(&[n, 4 * q, h, w])?;
        Ok((out, weights))
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        Ok(self.forward_with_weights(ctx, x)?.0)
    }
}

/// `PSA(EAG(e, d))`.
#[derive(Clone, Debug)]
pub struct Pga {
    pub eag: Eag,
    pub psa: Psa,
}

impl Pga {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        c_e: usize,
        c_d: usize,
        groups: usize,
        kernels: &[usize; 4],
        psa_groups: &[usize; 4],
        se_reduction: usize,
    ) -> Self {
        let mut b = b.sub(name);
        Self {
            eag: Eag::new(&mut b, "eag", c_e, c_d, groups),
            psa: Psa::new(&mut b, "psa", c_d, kernels, psa_groups, se_reduction),
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        e: Var<'t, T>,
        d: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        self.psa.forward(ctx, self.eag.forward(ctx, e, d)?)
    }
}
