//! Shifted-window attention encoder branch.
//!
//! Inside a stage, tokens are kept channel-last as `[N, H, W, C]`. Window
//! partitioning is a single gather whose index map also performs the cyclic
//! shift, so partition and reverse are exact permutations.

use std::rc::Rc;

use hiper_tensor::{ConvSpec, Scalar, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Init, LayerNorm, Linear, ParamBuilder, ParamId};

/// Additive bias on masked attention logits.
pub const MASK_NEG: f64 = -1e9;

/// For every slot of the `[n·nW, m·m, c]` window layout, the flat index of the
/// source element in `[n, h, w, c]`, after rolling the grid by `-shift`.
pub fn window_index_map(
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    m: usize,
    shift: usize,
) -> Vec<usize> {
    let (nh, nw) = (h / m, w / m);
    let mut idx = Vec::with_capacity(n * h * w * c);
    for b in 0..n {
        for wy in 0..nh {
            for wx in 0..nw {
                for ty in 0..m {
                    for tx in 0..m {
                        let y = (wy * m + ty + shift) % h;
                        let x = (wx * m + tx + shift) % w;
                        let base = ((b * h + y) * w + x) * c;
                        idx.extend(base..base + c);
                    }
                }
            }
        }
    }
    idx
}

/// Inverse permutation of `map`.
pub fn invert_permutation(map: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; map.len()];
    for (i, &j) in map.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

fn check_windows(op: &str, h: usize, w: usize, m: usize) -> Result<()> {
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::Config(format!(
            "{op}: {h}x{w} grid is not divisible by window {m}"
        )));
    }
    Ok(())
}

/// `[N, C, H, W]` → `[N·(H/M)·(W/M), C, M, M]`, windows in row-major order.
pub fn window_partition<'t, T: Scalar>(x: Var<'t, T>, m: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    check_windows("window_partition", h, w, m)?;
    let nhwc = x.permute(&[0, 2, 3, 1])?;
    let win = nhwc.take(
        Rc::new(window_index_map(n, h, w, c, m, 0)),
        &[n * (h / m) * (w / m), m, m, c],
    )?;
    Ok(win.permute(&[0, 3, 1, 2])?)
}

/// Inverse of [`window_partition`] for an `h × w` grid.
pub fn window_reverse<'t, T: Scalar>(
    windows: Var<'t, T>,
    m: usize,
    h: usize,
    w: usize,
) -> Result<Var<'t, T>> {
    check_windows("window_reverse", h, w, m)?;
    let s = windows.shape();
    let per_image = (h / m) * (w / m);
    if s.len() != 4 || s[2] != m || s[3] != m || s[0] % per_image != 0 {
        return Err(Error::Config(format!(
            "window_reverse: bad window tensor {s:?}"
        )));
    }
    let (n, c) = (s[0] / per_image, s[1]);
    let tokens = windows.permute(&[0, 2, 3, 1])?;
    let inv = invert_permutation(&window_index_map(n, h, w, c, m, 0));
    let nhwc = tokens.take(Rc::new(inv), &[n, h, w, c])?;
    Ok(nhwc.permute(&[0, 3, 1, 2])?)
}

/// Region id of each token of the rolled grid: tokens that wrapped around an
/// edge belong to a different region than those that did not.
fn region_ids(h: usize, w: usize, m: usize, shift: usize) -> Vec<usize> {
    let band = |i: usize, e: usize| {
        if i < e - m {
            0
        } else if i < e - shift {
            1
        } else {
            2
        }
    };
    (0..h)
        .flat_map(|y| (0..w).map(move |x| band(y, h) * 3 + band(x, w)))
        .collect()
}

/// `[nW, M², M²]` additive mask for shifted windows; zero where two tokens
/// share a region, [`MASK_NEG`] otherwise.
pub fn shift_mask(h: usize, w: usize, m: usize, shift: usize) -> Tensor<f64> {
    let ids = region_ids(h, w, m, shift);
    let (nh, nw, mm) = (h / m, w / m, m * m);
    let mut data = Vec::with_capacity(nh * nw * mm * mm);
    for wy in 0..nh {
        for wx in 0..nw {
            let tok: Vec<usize> = (0..mm)
                .map(|t| ids[(wy * m + t / m) * w + wx * m + t % m])
                .collect();
            for &a in &tok {
                for &b in &tok {
                    data.push(if a == b { 0.0 } else { MASK_NEG });
                }
            }
        }
    }
    Tensor::new(vec![nh * nw, mm, mm], data).expect("mask shape")
}

/// Index into the `(2M−1)²` relative-position table for every query/key pair.
pub fn relative_position_index(m: usize) -> Vec<usize> {
    let mm = m * m;
    let mut idx = Vec::with_capacity(mm * mm);
    for a in 0..mm {
        for b in 0..mm {
            let dy = (a / m) as isize - (b / m) as isize + m as isize - 1;
            let dx = (a % m) as isize - (b % m) as isize + m as isize - 1;
            idx.push((dy * (2 * m as isize - 1) + dx) as usize);
        }
    }
    idx
}

#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub qkv: Linear,
    pub proj: Linear,
    pub rel_table: Option<ParamId>,
}

impl WindowAttention {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        dim: usize,
        heads: usize,
        window: usize,
        cfg: &ModelConfig,
    ) -> Self {
        let side = 2 * window - 1;
        Self {
            dim,
            heads,
            window,
            qkv: Linear::new(b, "qkv", dim, 3 * dim, cfg.qkv_bias),
            proj: Linear::new(b, "proj", dim, dim, true),
            rel_table: cfg.rel_pos_bias.then(|| {
                b.param(
                    "rel_pos_table",
                    &[side * side, heads],
                    Init::TruncNormal { std: 0.02 },
                )
            }),
        }
    }

    /// Attention over `[B, M², C]` windows. `mask` is `[nW, M², M²]` where
    /// `B = N·nW`. Returns the output and the `[B, heads, M², M²]` probabilities.
    pub fn forward_with_probs<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
        mask: Option<&Tensor<T>>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let s = x.shape();
        let (bw, mm, c) = (s[0], s[1], s[2]);
        if c != self.dim || mm != self.window * self.window {
            return Err(Error::Config(format!(
                "window attention expects [B, {}, {}], got {s:?}",
                self.window * self.window,
                self.dim
            )));
        }
        let (h, d) = (self.heads, c / self.heads);
        let qkv = self
            .qkv
            .forward(ctx, x)?
            .reshape(&[bw, mm, 3, h, d])?
            .permute(&[2, 0, 3, 1, 4])?;
        let q = qkv.narrow(0, 0, 1)?.reshape(&[bw, h, mm, d])?;
        let k = qkv.narrow(0, 1, 1)?.reshape(&[bw, h, mm, d])?;
        let v = qkv.narrow(0, 2, 1)?.reshape(&[bw, h, mm, d])?;
        let mut scores = q
            .matmul(k.transpose_last()?)?
            .scale(1.0 / (d as f64).sqrt())?;
        if let Some(table) = self.rel_table {
            let idx: Vec<usize> = relative_position_index(self.window)
                .into_iter()
                .flat_map(|r| (0..h).map(move |head| r * h + head))
                .collect();
            let bias = ctx
                .param(table)
                .take(Rc::new(idx), &[mm, mm, h])?
                .permute(&[2, 0, 1])?;
            scores = scores.add(bias)?;
        }
        if let Some(mask) = mask {
            let nw = mask.dim(0);
            let m = ctx.constant(mask.clone().reshape(vec![nw, 1, mm, mm])?);
            scores = scores
                .reshape(&[bw / nw, nw, h, mm, mm])?
                .add(m)?
                .reshape(&[bw, h, mm, mm])?;
        }
        let probs = scores.softmax(3)?;
        let out = probs
            .matmul(v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[bw, mm, c])?;
        Ok((self.proj.forward(ctx, out)?, probs))
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(b, "fc1", dim, hidden, true),
            fc2: Linear::new(b, "fc2", hidden, dim, true),
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        self.fc2.forward(ctx, self.fc1.forward(ctx, x)?.gelu()?)
    }
}

/// One transformer block: windowed attention (optionally shifted) and MLP,
/// each pre-normed with a residual.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub shift: usize,
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl SwinBlock {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        shift: usize,
        cfg: &ModelConfig,
    ) -> Self {
        let mut b = b.sub(name);
        Self {
            shift,
            norm1: LayerNorm::new(&mut b, "norm1", dim),
            attn: WindowAttention::new(&mut b.sub("attn"), dim, heads, window, cfg),
            norm2: LayerNorm::new(&mut b, "norm2", dim),
            mlp: Mlp::new(&mut b.sub("mlp"), dim, cfg.mlp_ratio * dim),
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        Ok(self.forward_with_probs(ctx, x)?.0)
    }

    /// `x` is `[N, H, W, C]`.
    pub fn forward_with_probs<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let s = x.shape();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let m = self.attn.window;
        check_windows("swin block", h, w, m)?;
        let map = window_index_map(n, h, w, c, m, self.shift);
        let inv = Rc::new(invert_permutation(&map));
        let mask = (self.shift > 0).then(|| shift_mask(h, w, m, self.shift).cast::<T>());
        let windows = self
            .norm1
            .forward(ctx, x)?
            .take(Rc::new(map), &[n * (h / m) * (w / m), m * m, c])?;
        let (attn, probs) = self.attn.forward_with_probs(ctx, windows, mask.as_ref())?;
        let x = x.add(attn.take(inv, &[n, h, w, c])?)?;
        let x = x.add(self.mlp.forward(ctx, self.norm2.forward(ctx, x)?)?)?;
        Ok((x, probs))
    }
}

/// 2×2 neighbourhood concatenation, layer norm and linear reduction.
#[derive(Clone, Debug)]
pub struct PatchMerging {
    pub norm: LayerNorm,
    pub reduce: Linear,
}

impl PatchMerging {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, dim: usize, out: usize) -> Self {
        let mut b = b.sub(name);
        Self {
            norm: LayerNorm::new(&mut b, "norm", 4 * dim),
            reduce: Linear::new(&mut b, "reduction", 4 * dim, out, false),
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let s = x.shape();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!(
                "patch merging needs even extents, got {h}x{w}"
            )));
        }
        let mut idx = Vec::with_capacity(n * h * w * c);
        for b in 0..n {
            for y in 0..h / 2 {
                for x in 0..w / 2 {
                    for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                        let base = ((b * h + 2 * y + dy) * w + 2 * x + dx) * c;
                        idx.extend(base..base + c);
                    }
                }
            }
        }
        let merged = x.take(Rc::new(idx), &[n, h / 2, w / 2, 4 * c])?;
        self.reduce.forward(ctx, self.norm.forward(ctx, merged)?)
    }
}

#[derive(Clone, Debug)]
pub struct GlobalStage {
    pub merge: Option<PatchMerging>,
    pub blocks: Vec<SwinBlock>,
}

#[derive(Clone, Debug)]
pub struct GlobalBranch {
    pub embed: Conv2d,
    pub embed_norm: LayerNorm,
    pub stages: Vec<GlobalStage>,
}

impl GlobalBranch {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Self {
        let mut b = b.sub("global");
        let p = cfg.patch_size;
        let embed = Conv2d::new(
            &mut b,
            "patch_embed",
            cfg.in_channels,
            cfg.widths[0],
            p,
            ConvSpec::new(p, 0, 1, 1),
            true,
        );
        let embed_norm = LayerNorm::new(&mut b, "patch_norm", cfg.widths[0]);
        let stages = (0..4)
            .map(|s| {
                let mut sb = b.sub(&format!("stage{}", s + 1));
                let dim = cfg.widths[s];
                let merge =
                    (s > 0).then(|| PatchMerging::new(&mut sb, "merge", cfg.widths[s - 1], dim));
                let (m, shift) = (cfg.window_at(s), cfg.shift_at(s));
                let blocks = (0..cfg.depths[s])
                    .map(|i| {
                        let shift = if i % 2 == 1 { shift } else { 0 };
                        SwinBlock::new(
                            &mut sb,
                            &format!("block{i}"),
                            dim,
                            cfg.heads_at(s),
                            m,
                            shift,
                            cfg,
                        )
                    })
                    .collect();
                GlobalStage { merge, blocks }
            })
            .collect();
        Self {
            embed,
            embed_norm,
            stages,
        }
    }

    /// Stage features as `[N, C, H, W]` maps at 1/4, 1/8, 1/16 and 1/32 resolution.
    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        image: Var<'t, T>,
    ) -> Result<Vec<Var<'t, T>>> {
        let s = image.shape();
        if s.len() != 4 || s[2] % 32 != 0 || s[3] % 32 != 0 {
            return Err(Error::Config(format!(
                "input extent {s:?} must be [N, C, 32k, 32k]"
            )));
        }
        let tokens = self.embed.forward(ctx, image)?.permute(&[0, 2, 3, 1])?;
        let mut x = self.embed_norm.forward(ctx, tokens)?;
        let mut out = Vec::with_capacity(4);
        for stage in &self.stages {
            if let Some(m) = &stage.merge {
                x = m.forward(ctx, x)?;
            }
            for blk in &stage.blocks {
                x = blk.forward(ctx, x)?;
            }
            out.push(x.permute(&[0, 3, 1, 2])?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hiper_tensor::Tape;

    #[test]
    fn partition_of_4x4_into_2x2_windows() {
        let tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..16).map(f64::from).collect();
        let x = tape.constant(Tensor::from_f64([1, 1, 4, 4], &data).unwrap());
        let w = window_partition(x, 2).unwrap().value();
        assert_eq!(w.shape(), &[4, 1, 2, 2]);
        let expect = [
            0., 1., 4., 5., 2., 3., 6., 7., 8., 9., 12., 13., 10., 11., 14., 15.,
        ];
        assert_eq!(w.data(), &expect);
    }

    #[test]
    fn single_window_is_identity() {
        let tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..18).map(f64::from).collect();
        let x = tape.constant(Tensor::from_f64([1, 2, 3, 3], &data).unwrap());
        assert_eq!(window_partition(x, 3).unwrap().value().data(), &data[..]);
    }

    #[test]
    fn relative_index_is_symmetric_in_range() {
        let m = 3;
        let idx = relative_position_index(m);
        let mm = m * m;
        assert!(idx.iter().all(|&i| i < (2 * m - 1) * (2 * m - 1)));
        for a in 0..mm {
            assert_eq!(idx[a * mm + a], (m - 1) * (2 * m - 1) + m - 1);
        }
    }

    #[test]
    fn unshifted_mask_is_all_open() {
        let mask = shift_mask(8, 8, 4, 0);
        assert!(mask.data().iter().all(|&v| v == 0.0));
    }
}
