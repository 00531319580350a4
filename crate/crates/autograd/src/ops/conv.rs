use crate::error::{Result, TensorError};
use crate::ops::linalg::{gemm, MatRef};
use crate::par;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Per-sample (input, weight) gradient buffers.
type SampleGrads = (Option<Vec<f64>>, Option<Vec<f64>>);
impl Conv2dGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kh) / self.stride + 1,
            (self.width + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one `[C, H, W]` image into `[C*kh*kw, Ho*Wo]` patch columns.
pub fn im2col(x: &[f64], g: &Conv2dGeom, cols: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let hw = ho * wo;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oh in 0..ho {
                    let ih = (oh * g.stride + i) as isize - g.pad as isize;
                    let line = &mut dst[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + j) as isize - g.pad as isize;
                        *v = if iw < 0 || iw >= g.width as isize { 0.0 } else { src[iw as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch columns back into `[C, H, W]`.
pub fn col2im(cols: &[f64], g: &Conv2dGeom, x: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let hw = ho * wo;
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * hw..(row + 1) * hw];
                for oh in 0..ho {
                    let ih = (oh * g.stride + i) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let line = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for ow in 0..wo {
                        let iw = (ow * g.stride + j) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.width as isize {
                            line[iw as usize] += src[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    /// 2-D cross-correlation: `x: [N, C, H, W]`, `weight: [O, C, kh, kw]`, optional `bias: [O]`,
    /// symmetric zero padding.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        if x.ndim() != 4 || w.ndim() != 4 || x.dim(1) != w.dim(1) || stride == 0 {
            return Err(TensorError::shape_mismatch("conv2d", x.shape(), w.shape()));
        }
        let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (o, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                detail: format!("kernel {}x{} larger than padded input {}x{}", kh, kw, h + 2 * pad, wd + 2 * pad),
            });
        }
        if let Some(b) = bias {
            if b.shape() != [o] {
                return Err(TensorError::shape_mismatch("conv2d bias", &[o], &b.shape()));
            }
        }
        let geom = Conv2dGeom { channels: c, height: h, width: wd, kh, kw, stride, pad };
        let (ho, wo) = geom.out_hw();
        let ckk = c * kh * kw;
        let howo = ho * wo;
        let in_len = c * h * wd;
        let bias_v = bias.map(|b| b.value());
        let mut out = vec![0.0; n * o * howo];
        {
            let (xd, wdat) = (x.data(), w.data());
            let bias_d: Option<&[f64]> = bias_v.as_ref().map(|b| b.data());
            par::for_each_chunk(&mut out, o * howo, |i, y| {
                let xs = &xd[i * in_len..(i + 1) * in_len];
                if let Some(b) = bias_d {
                    for (oc, bv) in b.iter().enumerate() {
                        y[oc * howo..(oc + 1) * howo].iter_mut().for_each(|v| *v = *bv);
                    }
                }
                if geom.is_pointwise() {
                    gemm(MatRef::new(wdat, o, ckk), MatRef::new(xs, ckk, howo), 1.0, y);
                } else {
                    let mut cols = vec![0.0; ckk * howo];
                    im2col(xs, &geom, &mut cols);
                    gemm(MatRef::new(wdat, o, ckk), MatRef::new(&cols, ckk, howo), 1.0, y);
                }
            });
        }
        let value = Tensor::new([n, o, ho, wo], out)?;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self.tape().op(value, &parents, move |g, need| {
            let (xd, wdat, gd) = (x.data(), w.data(), g.data());
            let need_x = need[0];
            let need_w = need[1];
            let per_sample: Vec<SampleGrads> = par::map_indexed(n, |i| {
                let xs = &xd[i * in_len..(i + 1) * in_len];
                let gy = &gd[i * o * howo..(i + 1) * o * howo];
                let gw = need_w.then(|| {
                    let mut dw = vec![0.0; o * ckk];
                    if geom.is_pointwise() {
                        gemm(MatRef::new(gy, o, howo), MatRef::new(xs, ckk, howo).t(), 0.0, &mut dw);
                    } else {
                        let mut cols = vec![0.0; ckk * howo];
                        im2col(xs, &geom, &mut cols);
                        gemm(MatRef::new(gy, o, howo), MatRef::new(&cols, ckk, howo).t(), 0.0, &mut dw);
                    }
                    dw
                });
                let gx = need_x.then(|| {
                    let mut dcols = vec![0.0; ckk * howo];
                    gemm(MatRef::new(wdat, o, ckk).t(), MatRef::new(gy, o, howo), 0.0, &mut dcols);
                    if geom.is_pointwise() {
                        dcols
                    } else {
                        let mut dx = vec![0.0; in_len];
                        col2im(&dcols, &geom, &mut dx);
                        dx
                    }
                });
                (gx, gw)
            });
            let mut gx_all = need_x.then(|| Vec::with_capacity(n * in_len));
            let mut gw_parts = Vec::with_capacity(n);
            for (gx, gw) in per_sample {
                if let (Some(all), Some(gx)) = (gx_all.as_mut(), gx) {
                    all.extend(gx);
                }
                gw_parts.extend(gw);
            }
            let gx = gx_all.map(|d| Tensor::new(x.shape().to_vec(), d).expect("conv gx"));
            let gw =
                need_w.then(|| Tensor::new(w.shape().to_vec(), par::ordered_sum(gw_parts, o * ckk)).expect("conv gw"));
            let mut grads = vec![gx, gw];
            if need.len() == 3 {
                grads.push(need[2].then(|| {
                    let mut db = vec![0.0; o];
                    for i in 0..n {
                        for (oc, acc) in db.iter_mut().enumerate() {
                            let base = (i * o + oc) * howo;
                            *acc += gd[base..base + howo].iter().sum::<f64>();
                        }
                    }
                    Tensor::new([o], db).expect("conv gb")
                }));
            }
            grads
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::tape::Tape;

    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (o, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros([n, o, ho, wo]);
        let mut k = 0;
        for ni in 0..n {
            for oc in 0..o {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = b.data()[oc];
                        for ci in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let ih = (oh * stride + i) as isize - pad as isize;
                                    let iw = (ow * stride + j) as isize - pad as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd {
                                        acc += x.at(&[ni, ci, ih as usize, iw as usize]) * w.at(&[oc, ci, i, j]);
                                    }
                                }
                            }
                        }
                        out.data_mut()[k] = acc;
                        k += 1;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let x = Tensor::from_fn([2, 3, 7, 6], |i| ((i * 37 % 101) as f64) / 50.0 - 1.0);
        let w = Tensor::from_fn([4, 3, 3, 3], |i| ((i * 13 % 29) as f64) / 14.0 - 1.0);
        let b = Tensor::from_fn([4], |i| i as f64 * 0.25);
        for (stride, pad) in [(1, 1), (2, 1), (2, 0), (1, 0)] {
            let tape = Tape::inference();
            let y = tape
                .constant(x.clone())
                .conv2d(tape.constant(w.clone()), Some(tape.constant(b.clone())), stride, pad)
                .unwrap();
            let want = naive_conv(&x, &w, &b, stride, pad);
            assert_eq!(y.shape(), want.shape());
            assert!(y.value().max_abs_diff(&want) < 1e-12, "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn conv_gradients() {
        let x = Tensor::from_fn([2, 2, 5, 4], |i| (i as f64 * 0.31).sin());
        let w = Tensor::from_fn([3, 2, 3, 3], |i| (i as f64 * 0.17).cos() * 0.5);
        let b = Tensor::from_fn([3], |i| i as f64 * 0.1);
        for (stride, pad) in [(1, 1), (2, 1)] {
            let r = check_gradients::<_, crate::TensorError>(&[x.clone(), w.clone(), b.clone()], 1e-6, |_, v| {
                Ok(v[0].conv2d(v[1], Some(v[2]), stride, pad)?.square().sum())
            })
            .unwrap();
            assert!(r.max_rel_error < 1e-6, "{r:?}");
        }
        let w1 = Tensor::from_fn([3, 2, 1, 1], |i| i as f64 * 0.3 - 0.4);
        let r = check_gradients::<_, crate::TensorError>(&[x, w1], 1e-6, |_, v| {
            Ok(v[0].conv2d(v[1], None, 1, 0)?.square().sum())
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
