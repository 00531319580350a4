//! Kolmogorov-Arnold layers: every input-output edge carries its own
//! univariate function `w_base * silu(x) + Σ_b c_b B_b(x)` where `B_b` are
//! cubic B-splines on a uniform grid over `[-1, 1]`.

use std::sync::atomic::{AtomicU64, Ordering};

use ehct_autograd::{Binding, ParamId, ParamStore, Tensor, Var};

use crate::error::Result;
use crate::nn::Init;

pub const GRID_LO: f64 = -1.0;
pub const GRID_HI: f64 = 1.0;

/// Uniform knot vector over `[GRID_LO, GRID_HI]`, extended by `order` knots on each side.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineGrid {
    pub grid_size: usize,
    pub order: usize,
    pub knots: Vec<f64>,
}

impl SplineGrid {
    pub fn new(grid_size: usize, order: usize) -> Self {
        assert!(grid_size > 0, "empty spline grid");
        let h = (GRID_HI - GRID_LO) / grid_size as f64;
        let knots = (0..grid_size + 2 * order + 1).map(|j| GRID_LO + (j as f64 - order as f64) * h).collect();
        Self { grid_size, order, knots }
    }

    pub fn num_basis(&self) -> usize {
        self.grid_size + self.order
    }

    /// Values and x-derivatives of all basis functions at `x`, which must lie in the grid range.
    pub fn basis(&self, x: f64, values: &mut [f64], derivs: &mut [f64]) {
        let t = &self.knots;
        let k = self.order;
        let nb = self.num_basis();
        // the right end belongs to the last interior interval
        let last = self.grid_size + k - 1;
        let span = (k..=last).find(|&i| x < t[i + 1]).unwrap_or(last);
        let mut b = vec![0.0; t.len() - 1];
        b[span] = 1.0;
        let mut prev = b.clone();
        for d in 1..=k {
            prev.copy_from_slice(&b);
            for j in 0..t.len() - 1 - d {
                let left = (x - t[j]) / (t[j + d] - t[j]) * prev[j];
                let right = (t[j + d + 1] - x) / (t[j + d + 1] - t[j + 1]) * prev[j + 1];
                b[j] = left + right;
            }
            for v in b.iter_mut().skip(t.len() - 1 - d) {
                *v = 0.0;
            }
        }
        values[..nb].copy_from_slice(&b[..nb]);
        // `prev` holds order k-1
        for j in 0..nb {
            let a = if k == 0 { 0.0 } else { k as f64 / (t[j + k] - t[j]) * prev[j] };
            let c = if k == 0 { 0.0 } else { k as f64 / (t[j + k + 1] - t[j + 1]) * prev[j + 1] };
            derivs[j] = a - c;
        }
    }
}

#[derive(Debug)]
pub struct KanLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub grid: SplineGrid,
    pub spline_coeffs: ParamId,
    pub base_weight: ParamId,
    clamped: AtomicU64,
}

impl KanLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        grid_size: usize,
        order: usize,
    ) -> Self {
        let grid = SplineGrid::new(grid_size, order);
        let nb = grid.num_basis();
        let scale = (1.0 / in_dim as f64).sqrt();
        let spline_coeffs = store.add(format!("{name}.spline_coeffs"), init.normal([out_dim, in_dim, nb], 0.1 * scale));
        let base_weight = store.add(format!("{name}.base_weight"), init.normal([out_dim, in_dim], scale));
        Self { in_dim, out_dim, grid, spline_coeffs, base_weight, clamped: AtomicU64::new(0) }
    }

    /// Number of inputs seen outside the grid range (and clamped onto it) so far.
    pub fn clamped_count(&self) -> u64 {
        self.clamped.load(Ordering::Relaxed)
    }

    /// `x: [.., in_dim]` to `[.., out_dim]`.
    pub fn forward<'t>(&self, b: &Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.apply(x, b.param(self.spline_coeffs), b.param(self.base_weight))
    }

    /// Forward with explicitly supplied `coeffs: [out, in, nb]` and `base: [out, in]`.
    pub fn apply<'t>(&self, x: Var<'t>, coeffs: Var<'t>, base: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let rows = x.value().numel() / self.in_dim.max(1);
        let basis = self.basis_op(x)?;
        let nb = self.grid.num_basis();
        let coeffs = coeffs.reshape(&[self.out_dim, self.in_dim * nb])?;
        let spline = basis.reshape(&[rows, self.in_dim * nb])?.linear(coeffs, None)?;
        let base = x.reshape(&[rows, self.in_dim])?.silu().linear(base, None)?;
        let mut out_shape = shape;
        *out_shape.last_mut().expect("kan input rank") = self.out_dim;
        Ok(spline.add(base)?.reshape(&out_shape)?)
    }

    /// B-spline features `[.., in_dim, num_basis]` of clamped inputs.
    fn basis_op<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let xv = x.value();
        if xv.shape().last() != Some(&self.in_dim) {
            return Err(crate::EhctError::Dimension(format!(
                "KAN layer expects last axis {}, got {:?}",
                self.in_dim,
                xv.shape()
            )));
        }
        let nb = self.grid.num_basis();
        let mut values = vec![0.0; xv.numel() * nb];
        let mut derivs = vec![0.0; xv.numel() * nb];
        let mut inside = vec![true; xv.numel()];
        let mut clamped = 0;
        for (i, &v) in xv.data().iter().enumerate() {
            let c = v.clamp(GRID_LO, GRID_HI);
            if c != v || v.is_nan() {
                clamped += 1;
                inside[i] = false;
            }
            let c = if c.is_nan() { 0.0 } else { c };
            self.grid.basis(c, &mut values[i * nb..(i + 1) * nb], &mut derivs[i * nb..(i + 1) * nb]);
        }
        if clamped > 0 {
            self.clamped.fetch_add(clamped, Ordering::Relaxed);
        }
        let mut shape = xv.shape().to_vec();
        shape.push(nb);
        let value = Tensor::new(shape, values)?;
        let in_shape = xv.shape().to_vec();
        Ok(x.tape().op(value, &[x], move |g, _| {
            let d = g
                .data()
                .chunks(nb)
                .zip(derivs.chunks(nb))
                .zip(&inside)
                .map(|((gr, dr), &ok)| if ok { gr.iter().zip(dr).map(|(a, b)| a * b).sum() } else { 0.0 })
                .collect();
            vec![Some(Tensor::new(in_shape.clone(), d).expect("basis grad"))]
        }))
    }
}
