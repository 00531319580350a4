use crate::error::{Result, TensorError};
use crate::par;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Row-major matrix view description for [`gemm`].
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    /// Treat the stored `rows x cols` matrix as its transpose.
    pub trans: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Self { data, rows, cols, trans: false }
    }

    pub fn t(self) -> Self {
        Self { trans: !self.trans, ..self }
    }

    fn logical(&self) -> (usize, usize) {
        if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a · b + beta · out` with `out` row-major `m x n`.
pub fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, out: &mut [f64]) {
    let (m, k) = a.logical();
    let (kb, n) = b.logical();
    assert_eq!(k, kb, "gemm inner dimension");
    assert!(out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the slices cover the strided extents checked above and `out` is
    // an exclusive borrow of at least m*n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn split_matrix(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(TensorError::InvalidShape { op, detail: format!("need at least 2 dims, got {:?}", shape) });
    }
    let nd = shape.len();
    Ok((shape[..nd - 2].iter().product(), shape[nd - 2], shape[nd - 1]))
}

/// Batched `op(a) · op(b)` over leading dims of equal extent.
fn bmm(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (ba, ar, ac) = split_matrix(a.shape(), "bmm").expect("bmm a");
    let (bb, br, bc) = split_matrix(b.shape(), "bmm").expect("bmm b");
    debug_assert_eq!(ba, bb);
    let m = if ta { ac } else { ar };
    let n = if tb { br } else { bc };
    let mut out = vec![0.0; ba * m * n];
    let (ad, bd) = (a.data(), b.data());
    par::for_each_chunk(&mut out, m * n, |i, chunk| {
        let mut ma = MatRef::new(&ad[i * ar * ac..(i + 1) * ar * ac], ar, ac);
        let mut mb = MatRef::new(&bd[i * br * bc..(i + 1) * br * bc], br, bc);
        if ta {
            ma = ma.t();
        }
        if tb {
            mb = mb.t();
        }
        gemm(ma, mb, 0.0, chunk);
    });
    let mut shape = a.shape()[..a.ndim() - 2].to_vec();
    shape.extend([m, n]);
    Tensor::new(shape, out).expect("bmm shape")
}

impl<'t> Var<'t> {
    /// Batched matrix product `[.., m, k] x [.., k, n]`. Leading dims must be equal,
    /// or `other` may be a plain 2-D matrix shared across the batch.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_ex(other, false)
    }

    /// `self · otherᵀ` on the last two axes.
    pub fn matmul_t(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_ex(other, true)
    }

    fn matmul_ex(self, other: Var<'t>, tb: bool) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (ba, m, k) = split_matrix(a.shape(), "matmul")?;
        let (bb, br, bc) = split_matrix(b.shape(), "matmul")?;
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        if k != kb || !(ba == bb && a.ndim() == b.ndim() || b.ndim() == 2) {
            return Err(TensorError::shape_mismatch("matmul", a.shape(), b.shape()));
        }
        let shared = b.ndim() == 2 && a.ndim() != 2;
        let mut out_shape = a.shape()[..a.ndim() - 2].to_vec();
        out_shape.extend([m, n]);
        let value = if shared {
            let mut out = vec![0.0; ba * m * n];
            let mut mb = MatRef::new(b.data(), br, bc);
            if tb {
                mb = mb.t();
            }
            gemm(MatRef::new(a.data(), ba * m, k), mb, 0.0, &mut out);
            Tensor::new(out_shape, out)?
        } else {
            bmm(&a, &b, false, tb).into_reshape(out_shape)?
        };
        Ok(self.tape().op(value, &[self, other], move |g, need| {
            let ga = need[0].then(|| {
                if shared {
                    let mut out = vec![0.0; ba * m * k];
                    let mut mb = MatRef::new(b.data(), br, bc);
                    if !tb {
                        mb = mb.t();
                    }
                    gemm(MatRef::new(g.data(), ba * m, n), mb, 0.0, &mut out);
                    Tensor::new(a.shape().to_vec(), out).expect("matmul ga")
                } else {
                    // dA = dC · op(B)ᵀ
                    bmm(g, &b, false, !tb).into_reshape(a.shape().to_vec()).expect("matmul ga")
                }
            });
            let gb = need[1].then(|| {
                if shared {
                    let mut out = vec![0.0; br * bc];
                    let am = MatRef::new(a.data(), ba * m, k);
                    let gm = MatRef::new(g.data(), ba * m, n);
                    if tb {
                        gemm(gm.t(), am, 0.0, &mut out);
                    } else {
                        gemm(am.t(), gm, 0.0, &mut out);
                    }
                    Tensor::new(b.shape().to_vec(), out).expect("matmul gb")
                } else if tb {
                    // C = A Bᵀ  =>  dB = dCᵀ A
                    bmm(g, &a, true, false).into_reshape(b.shape().to_vec()).expect("matmul gb")
                } else {
                    bmm(&a, g, true, false).into_reshape(b.shape().to_vec()).expect("matmul gb")
                }
            });
            vec![ga, gb]
        }))
    }

    /// Affine map over the last axis: `x · wᵀ + bias` with `w: [out, in]`.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        let k = *x.shape().last().unwrap_or(&0);
        if w.ndim() != 2 || w.dim(1) != k || x.ndim() == 0 {
            return Err(TensorError::shape_mismatch("linear", x.shape(), w.shape()));
        }
        let o = w.dim(0);
        if let Some(b) = bias {
            if b.shape() != [o] {
                return Err(TensorError::shape_mismatch("linear bias", &[o], &b.shape()));
            }
        }
        let rows = x.numel() / k.max(1);
        let mut out = vec![0.0; rows * o];
        if let Some(b) = bias {
            let bv = b.value();
            for r in 0..rows {
                out[r * o..(r + 1) * o].copy_from_slice(bv.data());
            }
        }
        gemm(MatRef::new(x.data(), rows, k), MatRef::new(w.data(), o, k).t(), 1.0, &mut out);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = o;
        let value = Tensor::new(shape, out)?;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self.tape().op(value, &parents, move |g, need| {
            let gm = MatRef::new(g.data(), rows, o);
            let gx = need[0].then(|| {
                let mut d = vec![0.0; rows * k];
                gemm(gm, MatRef::new(w.data(), o, k), 0.0, &mut d);
                Tensor::new(x.shape().to_vec(), d).expect("linear gx")
            });
            let gw = need[1].then(|| {
                let mut d = vec![0.0; o * k];
                gemm(gm.t(), MatRef::new(x.data(), rows, k), 0.0, &mut d);
                Tensor::new([o, k], d).expect("linear gw")
            });
            let mut grads = vec![gx, gw];
            if need.len() == 3 {
                grads.push(need[2].then(|| {
                    let mut d = vec![0.0; o];
                    for r in 0..rows {
                        for (acc, v) in d.iter_mut().zip(&g.data()[r * o..(r + 1) * o]) {
                            *acc += v;
                        }
                    }
                    Tensor::new([o], d).expect("linear gb")
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

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_triple_loop() {
        let a: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..20).map(|i| (i as f64).cos()).collect();
        let mut c = vec![0.0; 15];
        gemm(MatRef::new(&a, 3, 4), MatRef::new(&b, 4, 5), 0.0, &mut c);
        let want = naive(&a, &b, 3, 4, 5);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_variants_gradients() {
        let a = Tensor::from_fn([2, 3, 4], |i| (i as f64 * 0.3).sin());
        let b = Tensor::from_fn([2, 4, 2], |i| (i as f64 * 0.7).cos());
        let bt = Tensor::from_fn([2, 2, 4], |i| (i as f64 * 0.7).cos());
        let w = Tensor::from_fn([4, 5], |i| (i as f64 * 0.11).sin());
        let r = check_gradients::<_, crate::TensorError>(&[a.clone(), b], 1e-6, |_, v| {
            Ok(v[0].matmul(v[1])?.square().sum())
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        let r = check_gradients::<_, crate::TensorError>(&[a.clone(), bt], 1e-6, |_, v| {
            Ok(v[0].matmul_t(v[1])?.square().sum())
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        let r = check_gradients::<_, crate::TensorError>(&[a, w], 1e-6, |_, v| Ok(v[0].matmul(v[1])?.square().sum()))
            .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn linear_gradients_and_value() {
        let x = Tensor::from_fn([2, 3, 4], |i| (i as f64 * 0.3).sin());
        let w = Tensor::from_fn([5, 4], |i| (i as f64 * 0.2).cos());
        let b = Tensor::from_fn([5], |i| i as f64 * 0.1);
        let r = check_gradients::<_, crate::TensorError>(&[x.clone(), w.clone(), b.clone()], 1e-6, |_, v| {
            Ok(v[0].linear(v[1], Some(v[2]))?.tanh().sum())
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        let tape = Tape::new();
        let y = tape.constant(x.clone()).linear(tape.constant(w.clone()), Some(tape.constant(b.clone()))).unwrap();
        let y = y.value();
        let expect = (0..4).map(|p| x.at(&[1, 2, p]) * w.at(&[3, p])).sum::<f64>() + b.data()[3];
        assert!((y.at(&[1, 2, 3]) - expect).abs() < 1e-12);
    }
}
