//! Full network: two encoder branches, per-stage fusion, the bridge, and a
//! decoder whose four scales are summed into the output logits.

use hiper_tensor::{Activation, ConvSpec, ResizeMode, Scalar, Var};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fusion::Lgff;
use crate::global::GlobalBranch;
use crate::local::LocalBranch;
use crate::nn::{Conv2d, ConvBnAct, Ctx, InitRng, ParamBuilder, ParamStore};
use crate::ppa::{Pga, Pmi};

/// Two 3×3 conv + BN + ReLU layers.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub a: ConvBnAct,
    pub b: ConvBnAct,
}

impl ConvBlock {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        let mut b = b.sub(name);
        let spec = ConvSpec::same(3, 1);
        let relu = Some(Activation::Relu);
        Self {
            a: ConvBnAct::new(&mut b, "a", c_in, c_out, 3, spec, relu),
            b: ConvBnAct::new(&mut b, "b", c_out, c_out, 3, spec, relu),
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        self.b.forward(ctx, self.a.forward(ctx, x)?)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLevel {
    pub pga: Option<Pga>,
    pub reduce: Conv2d,
    pub block: ConvBlock,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub seed: ConvBlock,
    /// Levels 1..3 as indices 0..2.
    pub levels: Vec<DecoderLevel>,
    /// Per-scale class projections, levels 1..4.
    pub heads: Vec<Conv2d>,
}

impl Decoder {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Self {
        let mut b = b.sub("decoder");
        let w = cfg.widths;
        let one = ConvSpec::same(1, 1);
        let seed = ConvBlock::new(&mut b, "level4", w[3], w[3]);
        let levels = (0..3)
            .map(|i| {
                let mut lb = b.sub(&format!("level{}", i + 1));
                let pga = cfg.switches.use_pga.then(|| {
                    Pga::new(
                        &mut lb,
                        "pga",
                        w[i],
                        w[i + 1],
                        cfg.eag_groups,
                        &cfg.psa_kernels,
                        &cfg.psa_groups,
                        cfg.psa_se_reduction,
                    )
                });
                DecoderLevel {
                    pga,
                    reduce: Conv2d::new(&mut lb, "reduce", w[i] + w[i + 1], w[i], 1, one, true),
                    block: ConvBlock::new(&mut lb, "block", w[i], w[i]),
                }
            })
            .collect();
        let heads = (0..4)
            .map(|i| {
                Conv2d::new(
                    &mut b,
                    &format!("head{}", i + 1),
                    w[i],
                    cfg.num_classes,
                    1,
                    one,
                    true,
                )
            })
            .collect();
        Self {
            seed,
            levels,
            heads,
        }
    }

    /// `ys` are the bridge outputs, finest first. Returns logits at `out_size`.
    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        ys: &[Var<'t, T>],
        out_size: usize,
    ) -> Result<Var<'t, T>> {
        let mut outs = vec![None; 4];
        let mut d = self
            .seed
            .forward(ctx, ys[3])?
            .resize2d(2, ResizeMode::Bilinear)?;
        outs[3] = Some(d);
        for i in (0..3).rev() {
            let lvl = &self.levels[i];
            let gated = match &lvl.pga {
                Some(p) => p.forward(ctx, ys[i], d)?,
                None => d,
            };
            let x = lvl.reduce.forward(ctx, Var::concat(&[ys[i], gated], 1)?)?;
            d = lvl
                .block
                .forward(ctx, x)?
                .resize2d(2, ResizeMode::Bilinear)?;
            outs[i] = Some(d);
        }
        let mut logits: Option<Var<'t, T>> = None;
        for (head, o) in self.heads.iter().zip(outs) {
            let o = o.expect("all levels decoded");
            let scale = out_size / o.shape()[2];
            let mut l = head.forward(ctx, o)?;
            if scale > 1 {
                l = l.resize2d(scale, ResizeMode::Bilinear)?;
            }
            logits = Some(match logits {
                Some(acc) => acc.add(l)?,
                None => l,
            });
        }
        Ok(logits.expect("four heads"))
    }
}

/// Per-stage encoder features.
#[derive(Clone, Debug)]
pub struct StageFeatures<'t, T: Scalar> {
    pub local: Option<Vec<Var<'t, T>>>,
    pub global: Option<Vec<Var<'t, T>>>,
    pub fused: Vec<Var<'t, T>>,
}

#[derive(Clone, Debug)]
pub struct HiPerformer {
    pub cfg: ModelConfig,
    pub local: Option<LocalBranch>,
    pub global: Option<GlobalBranch>,
    pub lgff: Vec<Lgff>,
    pub pmi: Option<Pmi>,
    pub decoder: Decoder,
}

impl HiPerformer {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.switches;
        let local = s.use_local.then(|| LocalBranch::new(b, cfg));
        let global = s.use_global.then(|| GlobalBranch::new(b, cfg));
        let lgff = if s.use_lgff {
            let mut fb = b.sub("lgff");
            (0..4)
                .map(|i| {
                    let prev = (i > 0).then(|| cfg.widths[i - 1]);
                    Lgff::new(
                        &mut fb,
                        &format!("stage{}", i + 1),
                        cfg.widths[i],
                        prev,
                        cfg.spe_reduction,
                        cfg.irmlp_expansion,
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        let pmi = s.use_pmi.then(|| Pmi::new(b, &cfg.widths));
        let decoder = Decoder::new(b, cfg);
        Ok(Self {
            cfg: cfg.clone(),
            local,
            global,
            lgff,
            pmi,
            decoder,
        })
    }

    /// Builds the model and a freshly initialised parameter store.
    pub fn init<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = InitRng::new(seed);
        let model = Self::new(&mut ParamBuilder::new(&mut store, &mut rng), cfg)?;
        Ok((model, store))
    }

    pub fn encode<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        image: Var<'t, T>,
    ) -> Result<StageFeatures<'t, T>> {
        let s = image.shape();
        let n = self.cfg.input_size;
        if s.len() != 4 || s[1] != self.cfg.in_channels || s[2] != n || s[3] != n {
            return Err(Error::Config(format!(
                "expected input [N, {}, {n}, {n}], got {s:?}",
                self.cfg.in_channels
            )));
        }
        let local = self
            .local
            .as_ref()
            .map(|l| l.forward(ctx, image))
            .transpose()?;
        let global = self
            .global
            .as_ref()
            .map(|g| g.forward(ctx, image))
            .transpose()?;
        let fused = match (&local, &global) {
            (Some(l), Some(g)) if !self.lgff.is_empty() => {
                let mut out: Vec<Var<'t, T>> = Vec::with_capacity(4);
                for (i, f) in self.lgff.iter().enumerate() {
                    let prev = out.last().copied();
                    out.push(f.forward(ctx, l[i], g[i], prev)?);
                }
                out
            }
            (Some(l), Some(g)) => l
                .iter()
                .zip(g)
                .map(|(a, b)| a.add(*b))
                .collect::<hiper_tensor::Result<_>>()?,
            (Some(l), None) => l.clone(),
            (None, Some(g)) => g.clone(),
            (None, None) => unreachable!("validated config has a branch"),
        };
        Ok(StageFeatures {
            local,
            global,
            fused,
        })
    }

    /// Logits `[N, classes, H, W]`; no softmax applied.
    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        image: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let feats = self.encode(ctx, image)?;
        let ys = match &self.pmi {
            Some(p) => p.forward(ctx, &feats.fused)?,
            None => feats.fused,
        };
        self.decoder.forward(ctx, &ys, self.cfg.input_size)
    }
}

/// Exact number of learnable scalars for `cfg`.
pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    let mut store = ParamStore::<f32>::shape_only();
    let mut rng = InitRng::new(0);
    HiPerformer::new(&mut ParamBuilder::new(&mut store, &mut rng), cfg)?;
    Ok(store.learnable_count())
}
