//! 2-D cross-correlation via im2col + GEMM.
//!
//! Standard, grouped, depthwise and dilated convolutions share one path:
//! each (image, group) pair is unfolded into a `[Cg·kh·kw, OH·OW]` column
//! matrix and multiplied by the group's `[Og, Cg·kh·kw]` kernel matrix.

use rayon::prelude::*;

use crate::error::{invalid, shape_err, Result};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
            groups,
        }
    }

    /// Stride 1 with size-preserving padding for an odd `kernel`.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    cg: usize,
    og: usize,
    spec: ConvSpec,
}

impl Geometry {
    fn new(x: &[usize], w: &[usize], bias: Option<&[usize]>, spec: ConvSpec) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return shape_err(
                "conv2d",
                format!("need 4-D input and kernel, got {x:?}, {w:?}"),
            );
        }
        if spec.groups == 0 || spec.dilation == 0 || spec.stride == 0 {
            return invalid("conv2d", format!("{spec:?}"));
        }
        let (n, c, h, wd) = (x[0], x[1], x[2], x[3]);
        let (o, cg, kh, kw) = (w[0], w[1], w[2], w[3]);
        if c % spec.groups != 0 || o % spec.groups != 0 {
            return shape_err(
                "conv2d",
                format!("channels {c}->{o} not divisible by {} groups", spec.groups),
            );
        }
        if cg != c / spec.groups {
            return shape_err(
                "conv2d",
                format!(
                    "kernel expects {cg} channels per group, input gives {}",
                    c / spec.groups
                ),
            );
        }
        if let Some(b) = bias {
            if b != [o] {
                return shape_err("conv2d", format!("bias {b:?} for {o} output channels"));
            }
        }
        let (Some(oh), Some(ow)) = (spec.out_extent(h, kh), spec.out_extent(wd, kw)) else {
            return shape_err(
                "conv2d",
                format!("non-positive output extent for {x:?} with kernel {w:?}, {spec:?}"),
            );
        };
        Ok(Self {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            oh,
            ow,
            cg,
            og: o / spec.groups,
            spec,
        })
    }

    fn k(&self) -> usize {
        self.cg * self.kh * self.kw
    }

    fn ohw(&self) -> usize {
        self.oh * self.ow
    }

    /// 1×1, stride 1, no padding: the input slice already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.oh, self.ow]
    }
}

/// Output columns `[lo, hi)` whose input column `ox·s + off − p` is in bounds.
fn valid_range(g: &Geometry, off: usize) -> (usize, usize) {
    let ConvSpec {
        stride, padding, ..
    } = g.spec;
    let lo = if padding > off {
        (padding - off).div_ceil(stride)
    } else {
        0
    };
    let hi = if g.w + padding > off {
        ((g.w + padding - off - 1) / stride + 1).min(g.ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds the `cg` channels of one image starting at `x` into `cols`.
fn im2col<T: Scalar>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let ConvSpec {
        stride,
        padding,
        dilation,
        ..
    } = g.spec;
    let ohw = g.ohw();
    let mut row = 0;
    for c in 0..g.cg {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = valid_range(g, kj * dilation);
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * stride + ki * dilation) as isize - padding as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(T::ZERO);
                    line[hi..].fill(T::ZERO);
                    if lo < hi {
                        let start = lo * stride + kj * dilation - padding;
                        if stride == 1 {
                            line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (v, &s) in line[lo..hi]
                                .iter_mut()
                                .zip(src[start..].iter().step_by(stride))
                            {
                                *v = s;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into the image slice.
fn col2im<T: Scalar>(cols: &[T], g: &Geometry, x: &mut [T]) {
    let ConvSpec {
        stride,
        padding,
        dilation,
        ..
    } = g.spec;
    let ohw = g.ohw();
    let mut row = 0;
    for c in 0..g.cg {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = valid_range(g, kj * dilation);
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * stride + ki * dilation) as isize - padding as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let start = lo * stride + kj * dilation - padding;
                    let line = &src[oy * g.ow + lo..oy * g.ow + hi];
                    if stride == 1 {
                        for (d, &s) in dst[start..start + hi - lo].iter_mut().zip(line) {
                            *d += s;
                        }
                    } else {
                        for (d, &s) in dst[start..].iter_mut().step_by(stride).zip(line) {
                            *d += s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &Geometry) -> Vec<T> {
    let (chw, ohw, k) = (g.c * g.h * g.w, g.ohw(), g.k());
    let mut out = vec![T::ZERO; g.n * g.o * ohw];
    out.par_chunks_mut(g.o * ohw)
        .enumerate()
        .for_each(|(i, out_n)| {
            let x_n = &x[i * chw..(i + 1) * chw];
            let mut cols = if g.is_pointwise() {
                Vec::new()
            } else {
                vec![T::ZERO; k * ohw]
            };
            for grp in 0..g.spec.groups {
                let x_g = &x_n[grp * g.cg * g.h * g.w..(grp + 1) * g.cg * g.h * g.w];
                let cols_ref: &[T] = if g.is_pointwise() {
                    x_g
                } else {
                    im2col(x_g, g, &mut cols);
                    &cols
                };
                let w_g = &w[grp * g.og * k..(grp + 1) * g.og * k];
                gemm(
                    MatRef::new(w_g, g.og, k),
                    MatRef::new(cols_ref, k, ohw),
                    &mut out_n[grp * g.og * ohw..(grp + 1) * g.og * ohw],
                    T::ONE,
                    T::ZERO,
                );
            }
            if let Some(b) = bias {
                for (oc, &bv) in b.iter().enumerate() {
                    for v in &mut out_n[oc * ohw..(oc + 1) * ohw] {
                        *v += bv;
                    }
                }
            }
        });
    out
}

/// Convolution of plain tensors. `x: [N, C, H, W]`, `w: [O, C/groups, kh, kw]`.
pub fn conv2d_tensor<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let g = Geometry::new(x.shape(), w.shape(), bias.map(|b| b.shape()), spec)?;
    Tensor::new(
        g.out_shape(),
        forward(x.data(), w.data(), bias.map(|b| b.data()), &g),
    )
}

/// Direct seven-loop convolution, kept as an independent oracle for the
/// im2col path.
pub fn conv2d_reference<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let g = Geometry::new(x.shape(), w.shape(), bias.map(|b| b.shape()), spec)?;
    let mut out = Tensor::zeros(g.out_shape());
    let od = out.data_mut();
    for n in 0..g.n {
        for o in 0..g.o {
            let grp = o / g.og;
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = bias.map_or(T::ZERO, |b| b.data()[o]);
                    for ci in 0..g.cg {
                        let c = grp * g.cg + ci;
                        for ki in 0..g.kh {
                            for kj in 0..g.kw {
                                let iy = (oy * spec.stride + ki * spec.dilation) as isize
                                    - spec.padding as isize;
                                let ix = (ox * spec.stride + kj * spec.dilation) as isize
                                    - spec.padding as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                acc += x.get(&[n, c, iy as usize, ix as usize])
                                    * w.get(&[o, ci, ki, kj]);
                            }
                        }
                    }
                    od[((n * g.o + o) * g.oh + oy) * g.ow + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn conv2d(
        self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        spec: ConvSpec,
    ) -> Result<Var<'t, T>> {
        let (x, w) = (self.value(), weight.value());
        let b = bias.map(|b| b.value());
        let g = Geometry::new(x.shape(), w.shape(), b.as_ref().map(|b| b.shape()), spec)?;
        let out = Tensor::new(
            g.out_shape(),
            forward(x.data(), w.data(), b.as_ref().map(|b| b.data()), &g),
        )?;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.record(
            "conv2d",
            out,
            &parents,
            Box::new(move |args| {
                let (x, w) = (args.inputs[0].data(), args.inputs[1].data());
                let gout = args.grad.data();
                let (chw, ohw, k) = (g.c * g.h * g.w, g.ohw(), g.k());
                let (need_x, need_w) = (args.needs[0], args.needs[1]);
                let per_image: Vec<(Vec<T>, Vec<T>)> = (0..g.n)
                    .into_par_iter()
                    .map(|i| {
                        let x_n = &x[i * chw..(i + 1) * chw];
                        let g_n = &gout[i * g.o * ohw..(i + 1) * g.o * ohw];
                        let mut dx = if need_x {
                            vec![T::ZERO; chw]
                        } else {
                            Vec::new()
                        };
                        let mut dw = if need_w {
                            vec![T::ZERO; g.o * k]
                        } else {
                            Vec::new()
                        };
                        let mut cols = vec![T::ZERO; k * ohw];
                        for grp in 0..g.spec.groups {
                            let in_range = grp * g.cg * g.h * g.w..(grp + 1) * g.cg * g.h * g.w;
                            let g_g = MatRef::new(
                                &g_n[grp * g.og * ohw..(grp + 1) * g.og * ohw],
                                g.og,
                                ohw,
                            );
                            let w_range = grp * g.og * k..(grp + 1) * g.og * k;
                            if need_w {
                                let cols_ref: &[T] = if g.is_pointwise() {
                                    &x_n[in_range.clone()]
                                } else {
                                    im2col(&x_n[in_range.clone()], &g, &mut cols);
                                    &cols
                                };
                                gemm(
                                    g_g,
                                    MatRef::new(cols_ref, k, ohw).t(),
                                    &mut dw[w_range.clone()],
                                    T::ONE,
                                    T::ZERO,
                                );
                            }
                            if need_x {
                                let w_t = MatRef::new(&w[w_range], g.og, k).t();
                                if g.is_pointwise() {
                                    gemm(w_t, g_g, &mut dx[in_range], T::ONE, T::ZERO);
                                } else {
                                    gemm(w_t, g_g, &mut cols, T::ONE, T::ZERO);
                                    col2im(&cols, &g, &mut dx[in_range]);
                                }
                            }
                        }
                        (dx, dw)
                    })
                    .collect();
                let mut grads = Vec::with_capacity(3);
                if need_x {
                    let mut dx = Vec::with_capacity(g.n * chw);
                    for (d, _) in &per_image {
                        dx.extend_from_slice(d);
                    }
                    grads.push(Some(Tensor::new(args.inputs[0].shape().to_vec(), dx)?));
                } else {
                    grads.push(None);
                }
                if need_w {
                    let mut dw = vec![T::ZERO; g.o * k];
                    for (_, d) in &per_image {
                        for (a, &b) in dw.iter_mut().zip(d) {
                            *a += b;
                        }
                    }
                    grads.push(Some(Tensor::new(args.inputs[1].shape().to_vec(), dw)?));
                } else {
                    grads.push(None);
                }
                if args.inputs.len() == 3 {
                    let db = args.needs[2].then(|| {
                        let mut db = vec![T::ZERO; g.o];
                        for i in 0..g.n {
                            for (oc, acc) in db.iter_mut().enumerate() {
                                let base = (i * g.o + oc) * ohw;
                                *acc += gout[base..base + ohw].iter().copied().sum::<T>();
                            }
                        }
                        Tensor::new([g.o], db)
                    });
                    grads.push(db.transpose()?);
                }
                Ok(grads)
            }),
        )
    }
}
