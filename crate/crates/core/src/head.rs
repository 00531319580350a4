//! Fully convolutional change head, pixelwise two-class cross-entropy and the
//! argmax decision rule.

use ehct_autograd::{Binding, ParamStore, Tensor, Var};

use crate::error::{EhctError, Result};
use crate::nn::{Conv2d, Init};

/// 3x3 conv + ReLU, then a 1x1 conv to the two class logits.
#[derive(Debug, Clone)]
pub struct DetectionHead {
    pub hidden: Conv2d,
    pub classify: Conv2d,
}

impl DetectionHead {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, channels: usize, hidden: usize) -> Self {
        Self {
            hidden: Conv2d::new(store, init, &format!("{name}.conv1"), channels, hidden, 3, 1, true),
            classify: Conv2d::new(store, init, &format!("{name}.conv2"), hidden, 2, 1, 1, true),
        }
    }

    /// `[N, C, H, W]` to logits `[N, 2, H, W]`.
    pub fn forward<'t>(&self, b: &Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.classify.forward(b, self.hidden.forward(b, x)?.relu())
    }
}

fn check_logits(logits: &Tensor, mask: &[u8]) -> Result<(usize, usize)> {
    if logits.ndim() != 4 || logits.dim(1) != 2 {
        return Err(EhctError::Dimension(format!("logits must be [N,2,H,W], got {:?}", logits.shape())));
    }
    let (n, hw) = (logits.dim(0), logits.dim(2) * logits.dim(3));
    if mask.len() != n * hw {
        return Err(EhctError::Dimension(format!(
            "mask has {} pixels but logits {:?} have {}",
            mask.len(),
            logits.shape(),
            n * hw
        )));
    }
    if let Some(v) = mask.iter().find(|&&v| v > 1) {
        return Err(EhctError::Validation(format!("mask value {v} is not binary")));
    }
    Ok((n, hw))
}

/// Mean negative log-likelihood of the true class over all pixels of the batch.
/// `mask` is `[N, H, W]` flattened with values in {0, 1}. With `class_weights`
/// each pixel is weighted by its true class and the mean is over the total weight.
pub fn cross_entropy<'t>(logits: Var<'t>, mask: &[u8], class_weights: Option<[f64; 2]>) -> Result<Var<'t>> {
    let lv = logits.value();
    let (n, hw) = check_logits(&lv, mask)?;
    let weights = class_weights.unwrap_or([1.0, 1.0]);
    let mut probs = vec![0.0; n * 2 * hw];
    let mut total = 0.0;
    let mut denom = 0.0;
    for i in 0..n {
        for p in 0..hw {
            let (k0, k1) = ((i * 2) * hw + p, (i * 2 + 1) * hw + p);
            let (a, c) = (lv.data()[k0], lv.data()[k1]);
            let m = a.max(c);
            let lse = m + ((a - m).exp() + (c - m).exp()).ln();
            let y = mask[i * hw + p] as usize;
            let w = weights[y];
            total += w * (lse - if y == 1 { c } else { a });
            denom += w;
            probs[k0] = (a - lse).exp();
            probs[k1] = (c - lse).exp();
        }
    }
    if denom <= 0.0 {
        return Err(EhctError::Validation("cross-entropy over zero total weight".into()));
    }
    let mask = mask.to_vec();
    let shape = lv.shape().to_vec();
    Ok(logits.tape().op(Tensor::scalar(total / denom), &[logits], move |g, _| {
        let s = g.item() / denom;
        let mut d = probs.clone();
        for i in 0..n {
            for p in 0..hw {
                let y = mask[i * hw + p] as usize;
                let w = weights[y] * s;
                let k = (i * 2 + y) * hw + p;
                d[k] -= 1.0;
                d[(i * 2) * hw + p] *= w;
                d[(i * 2 + 1) * hw + p] *= w;
            }
        }
        vec![Some(Tensor::new(shape.clone(), d).expect("ce grad"))]
    }))
}

/// Per-pixel argmax of `[N, 2, H, W]` logits as a flat `[N, H, W]` mask; ties go to background.
pub fn predict_mask(logits: &Tensor) -> Result<Vec<u8>> {
    if logits.ndim() != 4 || logits.dim(1) != 2 {
        return Err(EhctError::Dimension(format!("logits must be [N,2,H,W], got {:?}", logits.shape())));
    }
    let (n, hw) = (logits.dim(0), logits.dim(2) * logits.dim(3));
    let d = logits.data();
    Ok((0..n * hw)
        .map(|k| {
            let (i, p) = (k / hw, k % hw);
            u8::from(d[(i * 2 + 1) * hw + p] > d[(i * 2) * hw + p])
        })
        .collect())
}

/// Softmax probability of the changed class, `[N, H, W]` flattened.
pub fn change_probability(logits: &Tensor) -> Result<Vec<f64>> {
    if logits.ndim() != 4 || logits.dim(1) != 2 {
        return Err(EhctError::Dimension(format!("logits must be [N,2,H,W], got {:?}", logits.shape())));
    }
    let (n, hw) = (logits.dim(0), logits.dim(2) * logits.dim(3));
    let d = logits.data();
    Ok((0..n * hw)
        .map(|k| {
            let (i, p) = (k / hw, k % hw);
            ehct_autograd::ops::sigmoid(d[(i * 2 + 1) * hw + p] - d[(i * 2) * hw + p])
        })
        .collect())
}
