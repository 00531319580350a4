//! Frequency-gated residual blocks: `x + irfft2(G ⊙ rfft2(x))` per channel,
//! with a learnable complex gate over the non-redundant half spectrum.
//!
//! On the columns that are their own mirror in a real transform (`k = 0` and,
//! for even widths, `k = W/2`) the effective gate is the Hermitian part
//! `(G[h,k] + conj G[-h,k]) / 2`, which is what a complex-to-real inverse
//! implicitly applies. The output is therefore exactly real. A consequence is
//! that the imaginary gate entries at the self-conjugate bins
//! `(0,0), (H/2,0), (0,W/2), (H/2,W/2)` never influence the output and always
//! receive a zero gradient.

use std::sync::Arc;

use ehct_autograd::{par, Binding, ParamId, ParamStore, Tensor, Var};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{EhctError, Result};

pub fn rfft_width(w: usize) -> usize {
    w / 2 + 1
}

/// Planned transforms for one `H x W` plane size.
#[derive(Clone)]
pub struct Plans {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Plans {
    pub fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            h,
            w,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    fn wr(&self) -> usize {
        rfft_width(self.w)
    }

    /// Half spectrum `[H, W/2+1]` (unnormalized) of a real plane.
    pub fn rfft2(&self, plane: &[f64]) -> Vec<Complex64> {
        let (h, w, wr) = (self.h, self.w, self.wr());
        let mut spectrum = vec![Complex64::new(0.0, 0.0); h * wr];
        let mut row = vec![Complex64::new(0.0, 0.0); w];
        for r in 0..h {
            for (c, v) in row.iter_mut().zip(&plane[r * w..(r + 1) * w]) {
                *c = Complex64::new(*v, 0.0);
            }
            self.row_fwd.process(&mut row);
            spectrum[r * wr..(r + 1) * wr].copy_from_slice(&row[..wr]);
        }
        let mut col = vec![Complex64::new(0.0, 0.0); h];
        for k in 0..wr {
            for r in 0..h {
                col[r] = spectrum[r * wr + k];
            }
            self.col_fwd.process(&mut col);
            for r in 0..h {
                spectrum[r * wr + k] = col[r];
            }
        }
        spectrum
    }

    /// Real inverse of a half spectrum, normalized by `1/(H*W)`. The
    /// self-mirrored columns are projected onto their Hermitian part first.
    /// Also returns the largest imaginary magnitude left by the inverse.
    pub fn irfft2(&self, spectrum: &[Complex64]) -> (Vec<f64>, f64) {
        let (h, w, wr) = (self.h, self.w, self.wr());
        let mut half = spectrum.to_vec();
        for k in self_mirrored_columns(w) {
            for r in 0..=h / 2 {
                let m = (h - r) % h;
                let a = half[r * wr + k];
                let b = half[m * wr + k];
                let s = (a + b.conj()) * 0.5;
                half[r * wr + k] = s;
                half[m * wr + k] = s.conj();
            }
        }
        let mut col = vec![Complex64::new(0.0, 0.0); h];
        for k in 0..wr {
            for r in 0..h {
                col[r] = half[r * wr + k];
            }
            self.col_inv.process(&mut col);
            for r in 0..h {
                half[r * wr + k] = col[r];
            }
        }
        let norm = 1.0 / (h * w) as f64;
        let mut out = vec![0.0; h * w];
        let mut residue: f64 = 0.0;
        let mut row = vec![Complex64::new(0.0, 0.0); w];
        for r in 0..h {
            let src = &half[r * wr..(r + 1) * wr];
            row[..wr].copy_from_slice(src);
            for k in wr..w {
                row[k] = src[w - k].conj();
            }
            self.row_inv.process(&mut row);
            for (o, v) in out[r * w..(r + 1) * w].iter_mut().zip(&row) {
                *o = v.re * norm;
                residue = residue.max((v.im * norm).abs());
            }
        }
        (out, residue)
    }
}

fn self_mirrored_columns(w: usize) -> Vec<usize> {
    if w.is_multiple_of(2) && w > 1 {
        vec![0, w / 2]
    } else {
        vec![0]
    }
}

/// Weight of a half-spectrum column in the real inverse: its mirror is implicit
/// unless the column is self-mirrored.
fn column_multiplicity(k: usize, w: usize) -> f64 {
    if self_mirrored_columns(w).contains(&k) {
        1.0
    } else {
        2.0
    }
}

fn check_gate(x: &Tensor, re: &Tensor, im: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if x.ndim() != 4 {
        return Err(EhctError::Dimension(format!("spectral block expects [N,C,H,W], got {:?}", x.shape())));
    }
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let want = [c, h, rfft_width(w)];
    if re.shape() != want || im.shape() != want {
        return Err(EhctError::Dimension(format!(
            "gate shape {:?}/{:?} does not match transform shape {:?} of input {:?}",
            re.shape(),
            im.shape(),
            want,
            x.shape()
        )));
    }
    if !re.all_finite() || !im.all_finite() {
        return Err(EhctError::Numeric("spectral gate contains non-finite values".into()));
    }
    Ok((n, c, h, w))
}

/// `irfft2(G ⊙ rfft2(x))` on every plane of `[N, C, H, W]`, without the residual.
/// With `conjugate` the gate is conjugated, which gives the adjoint map.
fn filter(x: &Tensor, re: &Tensor, im: &Tensor, conjugate: bool, plans: &Plans) -> (Tensor, f64) {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let wr = rfft_width(w);
    let sign = if conjugate { -1.0 } else { 1.0 };
    let planes = par::map_indexed(n * c, |p| {
        let ch = p % c;
        let gre = &re.data()[ch * h * wr..(ch + 1) * h * wr];
        let gim = &im.data()[ch * h * wr..(ch + 1) * h * wr];
        let mut spectrum = plans.rfft2(&x.data()[p * h * w..(p + 1) * h * w]);
        for ((s, &a), &b) in spectrum.iter_mut().zip(gre).zip(gim) {
            *s *= Complex64::new(a, sign * b);
        }
        plans.irfft2(&spectrum)
    });
    let residue = planes.iter().map(|(_, r)| *r).fold(0.0, f64::max);
    let data: Vec<f64> = planes.into_iter().flat_map(|(v, _)| v).collect();
    (Tensor::new(x.shape().to_vec(), data).expect("filter shape"), residue)
}

/// Non-differentiable evaluation of the gated reconstruction `irfft2(G ⊙ rfft2(x))`
/// together with the imaginary residue of the inverse transform.
pub fn gated_reconstruction(x: &Tensor, re: &Tensor, im: &Tensor) -> Result<(Tensor, f64)> {
    let (_, _, h, w) = check_gate(x, re, im)?;
    Ok(filter(x, re, im, false, &Plans::new(h, w)))
}

/// `x + irfft2(G ⊙ rfft2(x))` with gradients for `x` and both gate parts.
pub fn apply_spectral_block<'t>(x: Var<'t>, re: Var<'t>, im: Var<'t>) -> Result<Var<'t>> {
    let (xv, rv, iv) = (x.value(), re.value(), im.value());
    let (n, c, h, w) = check_gate(&xv, &rv, &iv)?;
    let plans = Plans::new(h, w);
    let (fx, _) = filter(&xv, &rv, &iv, false, &plans);
    let wr = rfft_width(w);
    let filtered = x.tape().op(fx, &[x, re, im], move |g, need| {
        let dx = need[0].then(|| filter(g, &rv, &iv, true, &plans).0);
        let (dre, dim) = if need[1] || need[2] {
            let norm = 1.0 / (h * w) as f64;
            let xd: &Tensor = &xv;
            let per_plane = par::map_indexed(n * c, |p| {
                let gs = plans.rfft2(&g.data()[p * h * w..(p + 1) * h * w]);
                let xs = plans.rfft2(&xd.data()[p * h * w..(p + 1) * h * w]);
                gs.iter()
                    .zip(&xs)
                    .enumerate()
                    .map(|(i, (a, b))| a * b.conj() * (column_multiplicity(i % wr, w) * norm))
                    .collect::<Vec<_>>()
            });
            let mut dre = vec![0.0; c * h * wr];
            let mut dim = vec![0.0; c * h * wr];
            for (p, gamma) in per_plane.iter().enumerate() {
                let base = (p % c) * h * wr;
                for (i, v) in gamma.iter().enumerate() {
                    dre[base + i] += v.re;
                    dim[base + i] += v.im;
                }
            }
            (dre, dim)
        } else {
            (Vec::new(), Vec::new())
        };
        vec![
            dx,
            need[1].then(|| Tensor::new([c, h, wr], dre.clone()).expect("gate grad")),
            need[2].then(|| Tensor::new([c, h, wr], dim.clone()).expect("gate grad")),
        ]
    });
    Ok(filtered.add(x)?)
}

/// A learnable complex gate over `[C, H, W/2+1]` bins, zero at initialization
/// so the block starts as the identity.
#[derive(Debug, Clone)]
pub struct SpectralGate {
    pub re: ParamId,
    pub im: ParamId,
}

impl SpectralGate {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, h: usize, w: usize) -> Self {
        let shape = [channels, h, rfft_width(w)];
        Self {
            re: store.add(format!("{name}.gate.re"), Tensor::zeros(shape)),
            im: store.add(format!("{name}.gate.im"), Tensor::zeros(shape)),
        }
    }

    pub fn forward<'t>(&self, b: &Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        apply_spectral_block(x, b.param(self.re), b.param(self.im))
    }
}
