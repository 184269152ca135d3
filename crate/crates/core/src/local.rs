//! Convolutional encoder branch: stem, then four stages of max-pool and a
//! dual-channel residual block.

use hiper_tensor::{Activation, ConvSpec, PoolKind, Scalar, Var};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBnAct, Ctx, ParamBuilder};

/// Two residual paths over the same input, one with standard 3×3 convolutions
/// and one dilated, merged by a 1×1 convolution over their concatenation.
#[derive(Clone, Debug)]
pub struct DuChResBlock {
    pub channels: usize,
    pub std: [ConvBnAct; 2],
    pub dil: [ConvBnAct; 2],
    pub merge: Conv2d,
}

impl DuChResBlock {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
        dilation: usize,
    ) -> Self {
        let mut b = b.sub(name);
        let relu = Some(Activation::Relu);
        let std_spec = ConvSpec::same(3, 1);
        let dil_spec = ConvSpec::same(3, dilation);
        Self {
            channels,
            std: [
                ConvBnAct::new(&mut b, "std0", channels, channels, 3, std_spec, relu),
                ConvBnAct::new(&mut b, "std1", channels, channels, 3, std_spec, relu),
            ],
            dil: [
                ConvBnAct::new(&mut b, "dil0", channels, channels, 3, dil_spec, relu),
                ConvBnAct::new(&mut b, "dil1", channels, channels, 3, dil_spec, relu),
            ],
            merge: Conv2d::new(
                &mut b,
                "merge",
                2 * channels,
                channels,
                1,
                ConvSpec::same(1, 1),
                true,
            ),
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let c = x.shape()[1];
        if c != self.channels {
            return Err(Error::Config(format!(
                "block expects {} channels, got {c}",
                self.channels
            )));
        }
        let t = x.add(self.std[1].forward(ctx, self.std[0].forward(ctx, x)?)?)?;
        let d = x.add(self.dil[1].forward(ctx, self.dil[0].forward(ctx, x)?)?)?;
        self.merge.forward(ctx, Var::concat(&[t, d], 1)?)
    }
}

#[derive(Clone, Debug)]
pub struct LocalStage {
    pub proj: Option<ConvBnAct>,
    pub block: DuChResBlock,
}

#[derive(Clone, Debug)]
pub struct LocalBranch {
    pub stem: ConvBnAct,
    pub stages: Vec<LocalStage>,
}

impl LocalBranch {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Self {
        let mut b = b.sub("local");
        let stem = ConvBnAct::new(
            &mut b,
            "stem",
            cfg.in_channels,
            cfg.stem_channels,
            7,
            ConvSpec::new(2, 3, 1, 1),
            Some(Activation::Relu),
        );
        let mut prev = cfg.stem_channels;
        let stages = cfg
            .widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let mut sb = b.sub(&format!("stage{}", i + 1));
                let proj = (prev != w).then(|| {
                    ConvBnAct::new(
                        &mut sb,
                        "proj",
                        prev,
                        w,
                        1,
                        ConvSpec::same(1, 1),
                        Some(Activation::Relu),
                    )
                });
                prev = w;
                LocalStage {
                    proj,
                    block: DuChResBlock::new(&mut sb, "block", w, cfg.dilation),
                }
            })
            .collect();
        Self { stem, stages }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        image: Var<'t, T>,
    ) -> Result<Vec<Var<'t, T>>> {
        let shape = image.shape();
        if shape.len() != 4 || shape[2] % 32 != 0 || shape[3] % 32 != 0 {
            return Err(Error::Config(format!(
                "input extent {shape:?} must be [N, C, 32k, 32k]"
            )));
        }
        let mut x = self.stem.forward(ctx, image)?;
        let mut out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            x = x.pool2d(PoolKind::Max, 2, 2)?;
            if let Some(p) = &stage.proj {
                x = p.forward(ctx, x)?;
            }
            x = stage.block.forward(ctx, x)?;
            out.push(x);
        }
        Ok(out)
    }
}
