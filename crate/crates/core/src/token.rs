//! Token mining: KAN channel attention and spatial attention, a softmax
//! pooling tokenizer, a Transformer over both branches' tokens together, a
//! cross-attention decoder back to pixel maps, and the absolute difference.

use ehct_autograd::{cat, Binding, ParamId, ParamStore, Var};

use crate::error::{EhctError, Result};
use crate::kan::KanLayer;
use crate::nn::{from_tokens, to_tokens, Conv2d, Init, LayerNorm, MultiHeadAttention, TransformerBlock};

pub const KAN_GRID_SIZE: usize = 5;
pub const KAN_SPLINE_ORDER: usize = 3;
pub const CHANNEL_REDUCTION: usize = 4;
pub const SPATIAL_KERNEL: usize = 7;

/// Global pooling, two tanh-squashed KAN layers, sigmoid, channel rescale.
#[derive(Debug)]
pub struct ChannelAttentionKan {
    pub reduce: KanLayer,
    pub expand: KanLayer,
}

pub struct Gated<'t> {
    pub output: Var<'t>,
    /// Channel weights `[N, C]` or the spatial map `[N, 1, H, W]`.
    pub weights: Var<'t>,
}

impl ChannelAttentionKan {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, channels: usize) -> Self {
        let hidden = (channels / CHANNEL_REDUCTION).max(1);
        Self {
            reduce: KanLayer::new(
                store,
                init,
                &format!("{name}.kan1"),
                channels,
                hidden,
                KAN_GRID_SIZE,
                KAN_SPLINE_ORDER,
            ),
            expand: KanLayer::new(
                store,
                init,
                &format!("{name}.kan2"),
                hidden,
                channels,
                KAN_GRID_SIZE,
                KAN_SPLINE_ORDER,
            ),
        }
    }

    pub fn forward<'t>(&self, b: &Binding<'t>, x: Var<'t>) -> Result<Gated<'t>> {
        let s = x.shape();
        let (n, c) = (s[0], s[1]);
        let pooled = x.mean_keep(&[2, 3])?.reshape(&[n, c])?;
        let hidden = self.reduce.forward(b, pooled.tanh())?;
        let weights = self.expand.forward(b, hidden.tanh())?.sigmoid();
        let output = x.mul(weights.reshape(&[n, c, 1, 1])?)?;
        Ok(Gated { output, weights })
    }
}

/// Channel max and mean, a 7x7 convolution, sigmoid, pixel rescale.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

impl SpatialAttention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str) -> Self {
        Self { conv: Conv2d::new(store, init, &format!("{name}.conv"), 2, 1, SPATIAL_KERNEL, 1, true) }
    }

    pub fn forward<'t>(&self, b: &Binding<'t>, x: Var<'t>) -> Result<Gated<'t>> {
        let pooled = cat(&[x.max_keep(1)?, x.mean_keep(&[1])?], 1)?;
        let weights = self.conv.forward(b, pooled)?.sigmoid();
        Ok(Gated { output: x.mul(weights)?, weights })
    }
}

/// Tokens of one branch `[N, L, C]` plus the pooling maps `[N, L, H*W]`.
pub struct TokenSet<'t> {
    pub tokens: Var<'t>,
    pub attention: Var<'t>,
}

/// CKA, then SA, then softmax pooling into `L` tokens.
#[derive(Debug)]
pub struct Cksa {
    pub cka: ChannelAttentionKan,
    pub sa: SpatialAttention,
    pub tokenizer: Conv2d,
    pub tokens: usize,
}

impl Cksa {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, channels: usize, tokens: usize) -> Self {
        Self {
            cka: ChannelAttentionKan::new(store, init, &format!("{name}.cka"), channels),
            sa: SpatialAttention::new(store, init, &format!("{name}.sa")),
            tokenizer: Conv2d::new(store, init, &format!("{name}.tokenizer"), channels, tokens, 1, 1, true),
            tokens,
        }
    }

    pub fn forward<'t>(&self, b: &Binding<'t>, x: Var<'t>) -> Result<TokenSet<'t>> {
        let attended = self.sa.forward(b, self.cka.forward(b, x)?.output)?.output;
        tokenize(self.tokenizer.forward(b, attended)?, attended)
    }
}

/// Pools `features: [N, C, H, W]` with per-token logits `[N, L, H, W]` softmaxed over pixels.
pub fn tokenize<'t>(logits: Var<'t>, features: Var<'t>) -> Result<TokenSet<'t>> {
    let (sl, sf) = (logits.shape(), features.shape());
    if sl[0] != sf[0] || sl[2..] != sf[2..] {
        return Err(EhctError::Dimension(format!("tokenizer maps {sl:?} do not match features {sf:?}")));
    }
    let hw = sf[2] * sf[3];
    let attention = logits.reshape(&[sl[0], sl[1], hw])?.softmax();
    let tokens = attention.matmul_t(features.reshape(&[sf[0], sf[1], hw])?)?;
    Ok(TokenSet { tokens, attention })
}

/// Self-attention over the `2L` concatenated tokens of both branches.
#[derive(Debug, Clone)]
pub struct TokenEncoder {
    pub layers: Vec<TransformerBlock>,
}

pub struct EncodedTokens<'t> {
    pub first: Var<'t>,
    pub second: Var<'t>,
    /// Attention probabilities of every layer, `[N * heads, 2L, 2L]`.
    pub probs: Vec<Var<'t>>,
}

impl TokenEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, heads: usize, layers: usize) -> Self {
        Self {
            layers: (0..layers)
                .map(|i| TransformerBlock::new(store, init, &format!("{name}.layer{i}"), dim, heads, 2))
                .collect(),
        }
    }

    pub fn forward<'t>(&self, b: &Binding<'t>, t1: Var<'t>, t2: Var<'t>) -> Result<EncodedTokens<'t>> {
        if t1.shape() != t2.shape() {
            return Err(EhctError::Dimension(format!("token sets differ: {:?} vs {:?}", t1.shape(), t2.shape())));
        }
        let mut x = cat(&[t1, t2], 1)?;
        let mut probs = Vec::new();
        for layer in &self.layers {
            let out = layer.forward(b, x)?;
            probs.push(out.probs);
            x = out.output;
        }
        let parts = x.chunk(2, 1)?;
        Ok(EncodedTokens { first: parts[0], second: parts[1], probs })
    }
}

/// Pixels (with learned positions) query the context tokens; residual on the features.
#[derive(Debug, Clone)]
pub struct PixelDecoder {
    pub pos: ParamId,
    pub norm: LayerNorm,
    pub attn: MultiHeadAttention,
}

pub struct PixelMap<'t> {
    pub map: Var<'t>,
    pub probs: Var<'t>,
}

impl PixelDecoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, heads: usize, pixels: usize) -> Self {
        Self {
            pos: store.add(format!("{name}.pos"), init.normal([pixels, dim], 0.02)),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            // the map feeds a difference of the two dates, where an output bias cancels
            attn: MultiHeadAttention::with_output_bias(store, init, &format!("{name}.attn"), dim, heads, false),
        }
    }

    pub fn forward<'t>(&self, b: &Binding<'t>, context: Var<'t>, features: Var<'t>) -> Result<PixelMap<'t>> {
        let s = features.shape();
        let (h, w) = (s[2], s[3]);
        let pos = b.param(self.pos);
        if pos.shape()[0] != h * w {
            return Err(EhctError::Dimension(format!(
                "pixel decoder was built for {} pixels but sees {h}x{w}",
                pos.shape()[0]
            )));
        }
        if context.shape().last() != Some(&s[1]) {
            return Err(EhctError::Dimension(format!("context {:?} does not match features {s:?}", context.shape())));
        }
        let f = to_tokens(features)?;
        let q = self.norm.forward(b, f.add(pos)?)?;
        let att = self.attn.forward(b, q, context)?;
        Ok(PixelMap { map: from_tokens(f.add(att.output)?, h, w)?, probs: att.probs })
    }
}

/// `|m1 − m2|`.
pub fn semantic_difference<'t>(m1: Var<'t>, m2: Var<'t>) -> Result<Var<'t>> {
    if m1.shape() != m2.shape() {
        return Err(EhctError::Dimension(format!("semantic maps differ: {:?} vs {:?}", m1.shape(), m2.shape())));
    }
    Ok(m1.sub(m2)?.abs())
}
