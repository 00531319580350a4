use crate::error::{Result, TensorError};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Source taps for one output coordinate of a half-pixel-centered bilinear resize.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            Tap { lo, hi, frac: src - lo as f64 }
        })
        .collect()
}

fn check4(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    if x.ndim() != 4 {
        return Err(TensorError::InvalidShape { op, detail: format!("expected [N,C,H,W], got {:?}", x.shape()) });
    }
    Ok((x.dim(0), x.dim(1), x.dim(2), x.dim(3)))
}

impl<'t> Var<'t> {
    /// Nearest-neighbour upsampling by an integer factor on `[N, C, H, W]`.
    pub fn upsample_nearest(self, factor: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c, h, w) = check4(&x, "upsample_nearest")?;
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    dst[i * ow + j] = src[(i / factor) * w + j / factor];
                }
            }
        }
        let value = Tensor::new([n, c, oh, ow], out)?;
        Ok(self.tape().op(value, &[self], move |g, _| {
            let mut d = vec![0.0; n * c * h * w];
            for p in 0..n * c {
                let src = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                let dst = &mut d[p * h * w..(p + 1) * h * w];
                for i in 0..oh {
                    for j in 0..ow {
                        dst[(i / factor) * w + j / factor] += src[i * ow + j];
                    }
                }
            }
            vec![Some(Tensor::new([n, c, h, w], d).expect("upsample grad"))]
        }))
    }

    /// Bilinear resize of `[N, C, H, W]` to `out_h x out_w` with half-pixel centers
    /// (the `align_corners = false` convention).
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c, h, w) = check4(&x, "resize_bilinear")?;
        if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
            return Err(TensorError::InvalidShape { op: "resize_bilinear", detail: "empty extent".into() });
        }
        let (ty, tx) = (taps(h, out_h), taps(w, out_w));
        let mut out = vec![0.0; n * c * out_h * out_w];
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (i, a) in ty.iter().enumerate() {
                for (j, b) in tx.iter().enumerate() {
                    let top = src[a.lo * w + b.lo] * (1.0 - b.frac) + src[a.lo * w + b.hi] * b.frac;
                    let bot = src[a.hi * w + b.lo] * (1.0 - b.frac) + src[a.hi * w + b.hi] * b.frac;
                    dst[i * out_w + j] = top * (1.0 - a.frac) + bot * a.frac;
                }
            }
        }
        let value = Tensor::new([n, c, out_h, out_w], out)?;
        Ok(self.tape().op(value, &[self], move |g, _| {
            let mut d = vec![0.0; n * c * h * w];
            for p in 0..n * c {
                let src = &g.data()[p * out_h * out_w..(p + 1) * out_h * out_w];
                let dst = &mut d[p * h * w..(p + 1) * h * w];
                for (i, a) in ty.iter().enumerate() {
                    for (j, b) in tx.iter().enumerate() {
                        let gv = src[i * out_w + j];
                        dst[a.lo * w + b.lo] += gv * (1.0 - a.frac) * (1.0 - b.frac);
                        dst[a.lo * w + b.hi] += gv * (1.0 - a.frac) * b.frac;
                        dst[a.hi * w + b.lo] += gv * a.frac * (1.0 - b.frac);
                        dst[a.hi * w + b.hi] += gv * a.frac * b.frac;
                    }
                }
            }
            vec![Some(Tensor::new([n, c, h, w], d).expect("bilinear grad"))]
        }))
    }
}
