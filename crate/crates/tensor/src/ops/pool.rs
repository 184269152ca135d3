use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeMode {
    Nearest,
    /// Half-pixel centres (`align_corners = false`), edge-clamped.
    Bilinear,
}

fn dims4(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *s {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => shape_err(op, format!("need [N, C, H, W], got {s:?}")),
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn pool2d(self, kind: PoolKind, kernel: usize, stride: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, h, w) = dims4("pool2d", x.shape())?;
        if kernel == 0 || stride == 0 {
            return invalid("pool2d", "kernel and stride must be positive");
        }
        if kernel > h || kernel > w {
            return shape_err(
                "pool2d",
                format!("window {kernel} larger than input {h}x{w}"),
            );
        }
        let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
        let src = x.data();
        let planes = n * c;
        let mut out = vec![T::ZERO; planes * oh * ow];
        let mut argmax = if kind == PoolKind::Max {
            vec![0usize; out.len()]
        } else {
            Vec::new()
        };
        let inv_area = T::from_f64(1.0 / (kernel * kernel) as f64);
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = (p * oh + oy) * ow + ox;
                    let (y0, x0) = (oy * stride, ox * stride);
                    match kind {
                        PoolKind::Max => {
                            let mut best = y0 * w + x0;
                            for dy in 0..kernel {
                                for dx in 0..kernel {
                                    let i = (y0 + dy) * w + x0 + dx;
                                    if plane[i] > plane[best] {
                                        best = i;
                                    }
                                }
                            }
                            out[o] = plane[best];
                            argmax[o] = p * h * w + best;
                        }
                        PoolKind::Avg => {
                            let mut acc = T::ZERO;
                            for dy in 0..kernel {
                                for dx in 0..kernel {
                                    acc += plane[(y0 + dy) * w + x0 + dx];
                                }
                            }
                            out[o] = acc * inv_area;
                        }
                    }
                }
            }
        }
        self.record(
            "pool2d",
            Tensor::new([n, c, oh, ow], out)?,
            &[self],
            Box::new(move |args| {
                let g = args.grad.data();
                let mut dx = vec![T::ZERO; n * c * h * w];
                match kind {
                    PoolKind::Max => {
                        for (o, &src) in argmax.iter().enumerate() {
                            dx[src] += g[o];
                        }
                    }
                    PoolKind::Avg => {
                        for p in 0..planes {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let share = g[(p * oh + oy) * ow + ox] * inv_area;
                                    for dy in 0..kernel {
                                        for dxx in 0..kernel {
                                            dx[p * h * w
                                                + (oy * stride + dy) * w
                                                + ox * stride
                                                + dxx] += share;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Ok(vec![Some(Tensor::new([n, c, h, w], dx)?)])
            }),
        )
    }

    /// Spatial upsampling by an integer factor.
    pub fn resize2d(self, scale: usize, mode: ResizeMode) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, h, w) = dims4("resize2d", x.shape())?;
        if scale == 0 {
            return invalid("resize2d", "scale must be >= 1");
        }
        let (oh, ow) = (h * scale, w * scale);
        let ty = axis_taps::<T>(h, scale, mode);
        let tx = axis_taps::<T>(w, scale, mode);
        let src = x.data();
        let planes = n * c;
        let mut out = vec![T::ZERO; planes * oh * ow];
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = plane[y0 * w + x0] * (T::ONE - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (T::ONE - fx) + plane[y1 * w + x1] * fx;
                    dst[oy * ow + ox] = top * (T::ONE - fy) + bot * fy;
                }
            }
        }
        self.record(
            "resize2d",
            Tensor::new([n, c, oh, ow], out)?,
            &[self],
            Box::new(move |args| {
                let g = args.grad.data();
                let mut dx = vec![T::ZERO; planes * h * w];
                for p in 0..planes {
                    let gp = &g[p * oh * ow..(p + 1) * oh * ow];
                    let dp = &mut dx[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let v = gp[oy * ow + ox];
                            dp[y0 * w + x0] += v * (T::ONE - fy) * (T::ONE - fx);
                            dp[y0 * w + x1] += v * (T::ONE - fy) * fx;
                            dp[y1 * w + x0] += v * fy * (T::ONE - fx);
                            dp[y1 * w + x1] += v * fy * fx;
                        }
                    }
                }
                Ok(vec![Some(Tensor::new([n, c, h, w], dx)?)])
            }),
        )
    }
}

/// Per output coordinate: (lower source index, upper source index, upper weight).
fn axis_taps<T: Scalar>(len: usize, scale: usize, mode: ResizeMode) -> Vec<(usize, usize, T)> {
    (0..len * scale)
        .map(|o| match mode {
            ResizeMode::Nearest => (o / scale, o / scale, T::ZERO),
            ResizeMode::Bilinear => {
                let src = ((o as f64 + 0.5) / scale as f64 - 0.5).max(0.0);
                let lo = (src.floor() as usize).min(len - 1);
                let hi = (lo + 1).min(len - 1);
                (lo, hi, T::from_f64(src - lo as f64))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    #[test]
    fn max_and_avg_of_two_by_two() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64([1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap());
        assert_eq!(
            x.pool2d(PoolKind::Max, 2, 2).unwrap().value().data(),
            &[4.0]
        );
        assert_eq!(
            x.pool2d(PoolKind::Avg, 2, 2).unwrap().value().data(),
            &[2.5]
        );
        assert!(x.pool2d(PoolKind::Max, 3, 1).is_err());
    }

    #[test]
    fn ramp_max_pool() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new([1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap());
        let y = x.pool2d(PoolKind::Max, 2, 2).unwrap();
        assert_eq!(y.value().data(), &[5., 7., 13., 15.]);
    }

    #[test]
    fn constant_input_pools_to_constant() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([2, 3, 4, 4], 1.25));
        for kind in [PoolKind::Max, PoolKind::Avg] {
            assert!(x
                .pool2d(kind, 2, 2)
                .unwrap()
                .value()
                .data()
                .iter()
                .all(|&v| v == 1.25));
        }
    }

    #[test]
    fn resize_modes() {
        let tape = Tape::<f64>::new();
        let px = tape.constant(Tensor::full([1, 1, 1, 1], 7.0));
        assert_eq!(
            px.resize2d(2, ResizeMode::Nearest).unwrap().value().data(),
            &[7.0; 4]
        );
        let row = tape.constant(Tensor::from_f64([1, 1, 1, 2], &[0.0, 1.0]).unwrap());
        let y = row.resize2d(2, ResizeMode::Bilinear).unwrap().value();
        assert_eq!(y.shape(), &[1, 1, 2, 4]);
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]);
        let same = row.resize2d(1, ResizeMode::Bilinear).unwrap().value();
        assert_eq!(*same, *row.value());
    }
}
