use crate::error::{Result, TensorError};
use crate::par;
use crate::tape::Var;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

/// Normalizes each contiguous row of length `len` in place; returns per-row inverse std.
fn normalize_rows(data: &mut [f64], len: usize) -> Vec<f64> {
    data.chunks_mut(len)
        .map(|row| {
            let m = row.iter().sum::<f64>() / len as f64;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / len as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - m) * inv);
            inv
        })
        .collect()
}

/// Backward through row normalization given `dxhat`, writes `dx` over it.
fn normalize_rows_backward(dxhat: &mut [f64], xhat: &[f64], inv: &[f64], len: usize) {
    for ((d, xh), &s) in dxhat.chunks_mut(len).zip(xhat.chunks(len)).zip(inv) {
        let mean_d = d.iter().sum::<f64>() / len as f64;
        let mean_dx = d.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / len as f64;
        for (dv, &xv) in d.iter_mut().zip(xh) {
            *dv = s * (*dv - mean_d - xv * mean_dx);
        }
    }
}

impl<'t> Var<'t> {
    /// Group normalization of `[N, C, ...]` with per-channel affine `gamma`, `beta: [C]`.
    pub fn group_norm(self, groups: usize, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        if x.ndim() < 2 || groups == 0 || !x.dim(1).is_multiple_of(groups) {
            return Err(TensorError::InvalidShape {
                op: "group_norm",
                detail: format!("{} groups for shape {:?}", groups, x.shape()),
            });
        }
        let (n, c) = (x.dim(0), x.dim(1));
        let spatial = x.numel() / (n * c).max(1);
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(TensorError::shape_mismatch("group_norm affine", &[c], &gamma.shape()));
        }
        let group_len = c / groups * spatial;
        let mut xhat = x.data().to_vec();
        let inv = normalize_rows(&mut xhat, group_len);
        let (gv, bv) = (gamma.value(), beta.value());
        let mut out = xhat.clone();
        let (gd, bd) = (gv.data(), bv.data());
        par::for_each_chunk(&mut out, c * spatial, |_, sample| {
            for (ch, plane) in sample.chunks_mut(spatial).enumerate() {
                let (gm, bt) = (gd[ch], bd[ch]);
                plane.iter_mut().for_each(|v| *v = *v * gm + bt);
            }
        });
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let shape = x.shape().to_vec();
        Ok(self.tape().op(value, &[self, gamma, beta], move |g, need| {
            let gd = g.data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            if need[1] || need[2] {
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * spatial;
                        for k in base..base + spatial {
                            dgamma[ch] += gd[k] * xhat[k];
                            dbeta[ch] += gd[k];
                        }
                    }
                }
            }
            let dx = need[0].then(|| {
                let mut d = gd.to_vec();
                for (k, v) in d.iter_mut().enumerate() {
                    *v *= gv.data()[(k / spatial) % c];
                }
                normalize_rows_backward(&mut d, &xhat, &inv, group_len);
                Tensor::new(shape.clone(), d).expect("gn dx")
            });
            vec![
                dx,
                need[1].then(|| Tensor::new([c], dgamma.clone()).expect("gn dgamma")),
                need[2].then(|| Tensor::new([c], dbeta.clone()).expect("gn dbeta")),
            ]
        }))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta: [D]`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let d = *x
            .shape()
            .last()
            .ok_or_else(|| TensorError::InvalidShape { op: "layer_norm", detail: "scalar input".into() })?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(TensorError::shape_mismatch("layer_norm affine", &[d], &gamma.shape()));
        }
        let mut xhat = x.data().to_vec();
        let inv = normalize_rows(&mut xhat, d);
        let (gv, bv) = (gamma.value(), beta.value());
        let out: Vec<f64> = xhat.iter().enumerate().map(|(k, &v)| v * gv.data()[k % d] + bv.data()[k % d]).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let shape = x.shape().to_vec();
        Ok(self.tape().op(value, &[self, gamma, beta], move |g, need| {
            let gd = g.data();
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            for (k, &gk) in gd.iter().enumerate() {
                dgamma[k % d] += gk * xhat[k];
                dbeta[k % d] += gk;
            }
            let dx = need[0].then(|| {
                let mut dd: Vec<f64> = gd.iter().enumerate().map(|(k, &gk)| gk * gv.data()[k % d]).collect();
                normalize_rows_backward(&mut dd, &xhat, &inv, d);
                Tensor::new(shape.clone(), dd).expect("ln dx")
            });
            vec![
                dx,
                need[1].then(|| Tensor::new([d], dgamma.clone()).expect("ln dgamma")),
                need[2].then(|| Tensor::new([d], dbeta.clone()).expect("ln dbeta")),
            ]
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::gradcheck::check_gradients;
    use crate::tensor::Tensor;

    #[test]
    fn group_norm_gradients() {
        let x = Tensor::from_fn([2, 4, 3, 2], |i| (i as f64 * 0.77).sin() * 2.0);
        let g = Tensor::from_fn([4], |i| 1.0 + i as f64 * 0.2);
        let b = Tensor::from_fn([4], |i| i as f64 * 0.1);
        let w = Tensor::from_fn([2, 4, 3, 2], |i| (i as f64 * 0.13).cos());
        let r = check_gradients::<_, crate::TensorError>(&[x, g, b], 1e-6, |tape, v| {
            let w = tape.constant(w.clone());
            Ok(v[0].group_norm(2, v[1], v[2])?.mul(w)?.sum())
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn layer_norm_gradients() {
        let x = Tensor::from_fn([3, 5], |i| (i as f64 * 0.91).cos() * 3.0);
        let g = Tensor::from_fn([5], |i| 0.5 + i as f64 * 0.3);
        let b = Tensor::from_fn([5], |i| i as f64 * -0.1);
        let w = Tensor::from_fn([3, 5], |i| (i as f64 * 0.41).sin());
        let r = check_gradients::<_, crate::TensorError>(&[x, g, b], 1e-6, |tape, v| {
            let w = tape.constant(w.clone());
            Ok(v[0].layer_norm(v[1], v[2])?.mul(w)?.sum())
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn group_norm_of_zero_input_is_finite() {
        let tape = crate::tape::Tape::inference();
        let x = tape.constant(Tensor::zeros([1, 4, 2, 2]));
        let y = x.group_norm(2, tape.constant(Tensor::ones([4])), tape.constant(Tensor::zeros([4]))).unwrap();
        assert!(y.value().all_finite());
        assert_eq!(y.value().max_abs(), 0.0);
    }
}
