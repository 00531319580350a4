//! Grayscale renderings of the pipeline intermediates and color-coded error maps.

use std::path::{Path, PathBuf};

use ehct_autograd::{Binding, ParamStore, Tape, Tensor};

use crate::data::{save_gray, save_rgb, to_u8, ChangeMask, ImagePair};
use crate::error::{EhctError, Result};
use crate::head::change_probability;
use crate::model::EhctNet;

/// An 8-bit single-channel image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Render {
    pub name: &'static str,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Render {
    pub fn is_black(&self) -> bool {
        self.pixels.iter().all(|&p| p == 0)
    }
}

/// Mean over channels of a `[1, C, H, W]` map, nearest-upsampled to `size x size`.
fn channel_mean(t: &Tensor, size: usize) -> Vec<f64> {
    let (c, h, w) = (t.dim(1), t.dim(2), t.dim(3));
    let mut mean = vec![0.0; h * w];
    for ch in 0..c {
        for (m, v) in mean.iter_mut().zip(&t.data()[ch * h * w..(ch + 1) * h * w]) {
            *m += v / c as f64;
        }
    }
    (0..size * size).map(|k| mean[(k / size) * h / size * w + (k % size) * w / size]).collect()
}

fn min_max(v: &[f64]) -> Vec<u8> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    v.iter().map(|&x| if span > 0.0 { to_u8((x - lo) / span) } else { 0 }).collect()
}

/// `|x| / max |x|`, so an all-zero map stays black.
fn magnitude(v: &[f64]) -> Vec<u8> {
    let hi = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    v.iter().map(|&x| if hi > 0.0 { to_u8(x.abs() / hi) } else { 0 }).collect()
}

/// Forward pass on one pair and renders of every intermediate at the input size:
/// `b_raw_*`, `c_first_order_*`, `d_semantic_pixel_*` (min-max scaled),
/// `e_semantic_diff`, `f_second_order` (scaled by the peak magnitude) and
/// `g_heatmap` (changed-class probability times 255).
pub fn render_pair(net: &EhctNet, store: &ParamStore, pair: &ImagePair) -> Result<Vec<Render>> {
    let (h, w) = (pair.height(), pair.width());
    if h != w {
        return Err(EhctError::Dimension(format!("pair is {h}x{w}; square inputs are required")));
    }
    let tape = Tape::inference();
    let b = Binding::new(&tape, store);
    let a = b.constant(pair.a.reshape([1, 3, h, w])?);
    let bb = b.constant(pair.b.reshape([1, 3, h, w])?);
    let t = net.forward(&b, a, bb)?;
    let render = |name, pixels| Render { name, height: h, width: w, pixels };
    let mm = |v: ehct_autograd::Var<'_>| min_max(&channel_mean(&v.value(), h));
    let mag = |v: ehct_autograd::Var<'_>| magnitude(&channel_mean(&v.value(), h));
    let heat = change_probability(&t.logits.value())?.into_iter().map(to_u8).collect();
    Ok(vec![
        render("b_raw_a", mm(t.raw.0)),
        render("b_raw_b", mm(t.raw.1)),
        render("c_first_order_a", mm(t.first_order.0)),
        render("c_first_order_b", mm(t.first_order.1)),
        render("d_semantic_pixel_a", mm(t.semantic.0)),
        render("d_semantic_pixel_b", mm(t.semantic.1)),
        render("e_semantic_diff", mag(t.diff)),
        render("f_second_order", mag(t.second_order)),
        render("g_heatmap", heat),
    ])
}

/// Writes [`render_pair`] output as `<out>/<name>.png`.
pub fn visualize(net: &EhctNet, store: &ParamStore, pair: &ImagePair, out: &Path) -> Result<Vec<PathBuf>> {
    render_pair(net, store, pair)?
        .into_iter()
        .map(|r| {
            let path = out.join(format!("{}.png", r.name));
            save_gray(&path, r.height, r.width, r.pixels)?;
            Ok(path)
        })
        .collect()
}

pub const TP_COLOR: [u8; 3] = [255, 255, 255];
pub const TN_COLOR: [u8; 3] = [0, 0, 0];
pub const FP_COLOR: [u8; 3] = [255, 0, 0];
pub const FN_COLOR: [u8; 3] = [0, 255, 0];

/// Interleaved RGB error map of `pred` against `gt`.
pub fn diffmap(pred: &ChangeMask, gt: &ChangeMask) -> Result<Vec<u8>> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(EhctError::Validation(format!(
            "prediction {}x{} does not match ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    Ok(pred
        .data
        .iter()
        .zip(&gt.data)
        .flat_map(|(p, g)| match (p, g) {
            (1, 1) => TP_COLOR,
            (1, _) => FP_COLOR,
            (_, 1) => FN_COLOR,
            _ => TN_COLOR,
        })
        .collect())
}

pub fn save_diffmap(path: &Path, pred: &ChangeMask, gt: &ChangeMask) -> Result<()> {
    save_rgb(path, pred.height, pred.width, diffmap(pred, gt)?)
}
