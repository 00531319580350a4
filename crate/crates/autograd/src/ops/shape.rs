use crate::error::{Result, TensorError};
use crate::tape::Var;
use crate::tensor::{numel, Tensor};

impl<'t> Var<'t> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let value = x.reshape(shape.to_vec())?;
        let orig = x.shape().to_vec();
        Ok(self.tape().op(value, &[self], move |g, _| vec![Some(g.reshape(orig.clone()).expect("reshape grad"))]))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let value = self.value().permute(perm)?;
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.tape().op(value, &[self], move |g, _| vec![Some(g.permute(&inverse).expect("permute grad"))]))
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let value = x.narrow(axis, start, len)?;
        let shape = x.shape().to_vec();
        Ok(self.tape().op(value, &[self], move |g, _| {
            let outer = numel(&shape[..axis]);
            let inner = numel(&shape[axis + 1..]);
            let dim = shape[axis];
            let mut d = vec![0.0; numel(&shape)];
            for o in 0..outer {
                let dst = (o * dim + start) * inner;
                let src = o * len * inner;
                d[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            vec![Some(Tensor::new(shape.clone(), d).expect("narrow grad"))]
        }))
    }

    /// Splits into `parts` equal pieces along `axis`.
    pub fn chunk(self, parts: usize, axis: usize) -> Result<Vec<Var<'t>>> {
        let dim = *self
            .shape()
            .get(axis)
            .ok_or_else(|| TensorError::InvalidShape { op: "chunk", detail: format!("axis {} out of range", axis) })?;
        if parts == 0 || dim % parts != 0 {
            return Err(TensorError::InvalidShape {
                op: "chunk",
                detail: format!("{} does not split into {}", dim, parts),
            });
        }
        let len = dim / parts;
        (0..parts).map(|p| self.narrow(axis, p * len, len)).collect()
    }

    /// Mean over `axes`, keeping them as size-1 dims.
    pub fn mean_keep(self, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let mut target = x.shape().to_vec();
        for &a in axes {
            if a >= target.len() {
                return Err(TensorError::InvalidShape { op: "mean_keep", detail: format!("axis {}", a) });
            }
            target[a] = 1;
        }
        let count = (x.numel() / numel(&target).max(1)) as f64;
        let mut value = x.sum_to_shape(&target)?;
        value.scale_in_place(1.0 / count);
        let shape = x.shape().to_vec();
        Ok(self.tape().op(value, &[self], move |g, _| {
            let zeros = Tensor::zeros(shape.clone());
            let d = crate::tensor::broadcast_zip(&zeros, g, |_, gv| gv / count).expect("mean grad");
            vec![Some(d)]
        }))
    }

    /// Max over one axis, kept as a size-1 dim. Gradient goes to the first maximal entry.
    pub fn max_keep(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.ndim() {
            return Err(TensorError::InvalidShape { op: "max_keep", detail: format!("axis {}", axis) });
        }
        let outer = numel(&x.shape()[..axis]);
        let dim = x.dim(axis);
        let inner = numel(&x.shape()[axis + 1..]);
        let mut vals = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = f64::NEG_INFINITY;
                let mut best_k = 0;
                for k in 0..dim {
                    let v = x.data()[(o * dim + k) * inner + i];
                    if v > best {
                        best = v;
                        best_k = k;
                    }
                }
                vals.push(best);
                arg.push((o * dim + best_k) * inner + i);
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        let value = Tensor::new(shape, vals)?;
        let in_shape = x.shape().to_vec();
        Ok(self.tape().op(value, &[self], move |g, _| {
            let mut d = vec![0.0; numel(&in_shape)];
            for (k, &src) in arg.iter().enumerate() {
                d[src] += g.data()[k];
            }
            vec![Some(Tensor::new(in_shape.clone(), d).expect("max grad"))]
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let x = self.value();
        let d = *x.shape().last().expect("softmax on scalar");
        let mut y = x.data().to_vec();
        for row in y.chunks_mut(d) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let value = Tensor::new(x.shape().to_vec(), y).expect("softmax");
        let yk = value.clone();
        self.tape().op(value, &[self], move |g, _| {
            let mut dx = g.data().to_vec();
            for (dr, yr) in dx.chunks_mut(d).zip(yk.data().chunks(d)) {
                let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for (dv, &yv) in dr.iter_mut().zip(yr) {
                    *dv = yv * (*dv - dot);
                }
            }
            vec![Some(Tensor::new(yk.shape().to_vec(), dx).expect("softmax grad"))]
        })
    }
}

/// Concatenation of several vars along `axis`.
pub fn cat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| TensorError::InvalidShape { op: "cat", detail: "no inputs".into() })?;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
    let value = Tensor::cat(&refs, axis)?;
    let sizes: Vec<usize> = values.iter().map(|v| v.dim(axis)).collect();
    Ok(first.tape().op(value, parts, move |g, need| {
        let mut start = 0;
        sizes
            .iter()
            .zip(need)
            .map(|(&len, &nd)| {
                let piece = nd.then(|| g.narrow(axis, start, len).expect("cat grad"));
                start += len;
                piece
            })
            .collect()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = crate::tape::Tape::inference();
        let y = tape.constant(Tensor::from_fn([3, 4], |i| i as f64 * 1.7 - 5.0)).softmax().value();
        for row in y.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_op_gradients() {
        let x = Tensor::from_fn([2, 3, 4], |i| (i as f64 * 0.37).sin());
        let w = Tensor::from_fn([4, 3, 2], |i| (i as f64 * 0.53).cos());
        let r = check_gradients::<_, crate::TensorError>(std::slice::from_ref(&x), 1e-6, |tape, v| {
            let p = v[0].permute(&[2, 1, 0])?.mul(tape.constant(w.clone()))?;
            let parts = p.chunk(2, 0)?;
            let c = cat(&[parts[1], parts[0], v[0].reshape(&[4, 3, 2])?], 0)?;
            let m = c.mean_keep(&[1])?.square();
            let mx = v[0].max_keep(1)?;
            m.sum().add(mx.sum())?.add(v[0].softmax().square().sum())
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
