use super::element::gemm;
use super::{invalid, shape_err, Element, Result, Tensor};

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

/// Output extent of a convolution along one axis, or `None` when the
/// kernel does not fit.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

// Column layout: rows (c, ki, kj), columns (n, oy, ox).
fn im2col<T: Element>(x: &[T], g: &Geometry) -> Vec<T> {
    let cols = g.cols();
    let mut out = vec![T::zero(); g.rows() * cols];
    let plane = g.oh * g.ow;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        let base = n * plane + oy * g.ow;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Element>(cols_data: &[T], g: &Geometry) -> Vec<T> {
    let cols = g.cols();
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    let plane = g.oh * g.ow;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols_data[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let dst = &mut x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = n * plane + oy * g.ow;
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[iy as usize * g.w + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

impl<T: Element> Tensor<T> {
    /// 2-D cross-correlation of an `(n, c, h, w)` input with an
    /// `(o, c, kh, kw)` kernel, symmetric zero padding, optional `(o)` bias.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        if self.rank() != 4 || weight.rank() != 4 || self.shape()[1] != weight.shape()[1] {
            return Err(shape_err("conv2d", self, weight));
        }
        let [n, c, h, w] = [self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]];
        let [o, _, kh, kw] = [
            weight.shape()[0],
            weight.shape()[1],
            weight.shape()[2],
            weight.shape()[3],
        ];
        if let Some(b) = bias {
            if b.shape() != [o] {
                return Err(shape_err("conv2d", weight, b));
            }
        }
        let (oh, ow) = match (
            conv_out_extent(h, kh, stride, padding),
            conv_out_extent(w, kw, stride, padding),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(invalid(
                    "conv2d",
                    format!(
                        "kernel {kh}x{kw} (stride {stride}, padding {padding}) does not fit input {h}x{w}"
                    ),
                ))
            }
        };
        let g = Geometry { n, c, h, w, kh, kw, stride, pad: padding, oh, ow };
        let cols = im2col(self.data(), &g);
        let ncols = g.cols();
        let mut y = vec![T::zero(); o * ncols];
        gemm(false, false, o, g.rows(), ncols, weight.data(), &cols, T::zero(), &mut y);

        // (o, n, oh*ow) -> (n, o, oh*ow)
        let plane = oh * ow;
        let mut data = vec![T::zero(); n * o * plane];
        for oc in 0..o {
            let b = bias.map_or(T::zero(), |b| b.data()[oc]);
            for ni in 0..n {
                let src = &y[oc * ncols + ni * plane..oc * ncols + (ni + 1) * plane];
                let dst = &mut data[(ni * o + oc) * plane..(ni * o + oc + 1) * plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }

        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Tensor::from_op("conv2d", data, vec![n, o, oh, ow], &inputs, move |ctx| {
            let (x, wt) = (&ctx.inputs[0], &ctx.inputs[1]);
            let gout = ctx.grad_out;
            let mut dy = vec![T::zero(); o * ncols];
            for oc in 0..o {
                for ni in 0..n {
                    dy[oc * ncols + ni * plane..oc * ncols + (ni + 1) * plane]
                        .copy_from_slice(&gout[(ni * o + oc) * plane..(ni * o + oc + 1) * plane]);
                }
            }
            let mut grads = Vec::with_capacity(3);
            grads.push(x.is_tracked().then(|| {
                let mut dcols = vec![T::zero(); g.rows() * ncols];
                gemm(true, false, g.rows(), o, ncols, wt.data(), &dy, T::zero(), &mut dcols);
                col2im(&dcols, &g)
            }));
            grads.push(wt.is_tracked().then(|| {
                let mut dw = vec![T::zero(); o * g.rows()];
                gemm(false, true, o, ncols, g.rows(), &dy, &cols, T::zero(), &mut dw);
                dw
            }));
            if let Some(b) = ctx.inputs.get(2) {
                grads.push(b.is_tracked().then(|| {
                    (0..o)
                        .map(|oc| dy[oc * ncols..(oc + 1) * ncols].iter().copied().sum())
                        .collect()
                }));
            }
            grads
        })
    }
}
