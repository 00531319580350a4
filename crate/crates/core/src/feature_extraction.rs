//! One HCT branch: a four-stage residual CNN encoder, then three Transformer
//! blocks that walk back up the pyramid, each followed by a ×2 upsample and a
//! learnable convex blend with the matching encoder level.

use ehct_autograd::ops::sigmoid;
use ehct_autograd::{Binding, ParamId, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{EhctError, Result};
use crate::nn::{from_tokens, to_tokens, Conv2d, GroupNorm, Init, TransformerBlock};

/// Total downsampling of the deepest encoder level.
pub const ENCODER_STRIDE: usize = 32;
/// Raw fusion parameters are clamped to this magnitude before the sigmoid;
/// at the clamp the blend weight is exactly 1 (or 0) in `f64`.
pub const ALPHA_CLAMP: f64 = 40.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HctConfig {
    pub stage_channels: Vec<usize>,
    pub decoder_blocks: usize,
    pub attention_heads: usize,
    pub input_size: usize,
    /// Token width inside the decoder and of the branch output.
    pub decoder_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for HctConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![32, 64, 128, 256],
            decoder_blocks: 3,
            attention_heads: 4,
            input_size: 256,
            decoder_dim: 32,
            mlp_ratio: 2,
        }
    }
}

impl HctConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EhctError::Config(m));
        if self.stage_channels.len() != 4 {
            return bad(format!("stage_channels needs 4 entries, got {}", self.stage_channels.len()));
        }
        if self.stage_channels[0] == 0 || self.stage_channels.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("stage_channels must be positive and strictly increasing: {:?}", self.stage_channels));
        }
        if self.decoder_blocks != 3 {
            return bad(format!("decoder_blocks is fixed at 3, got {}", self.decoder_blocks));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(ENCODER_STRIDE) {
            return bad(format!("input_size {} is not a positive multiple of {}", self.input_size, ENCODER_STRIDE));
        }
        if self.attention_heads == 0 || !self.decoder_dim.is_multiple_of(self.attention_heads) {
            return bad(format!("decoder_dim {} does not split into {} heads", self.decoder_dim, self.attention_heads));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        Ok(())
    }

    /// Spatial side of each pyramid level for the configured input size.
    pub fn level_sizes(&self) -> [usize; 4] {
        [4, 8, 16, 32].map(|s| self.input_size / s)
    }
}

pub fn check_spatial(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(ENCODER_STRIDE) || !w.is_multiple_of(ENCODER_STRIDE) {
        return Err(EhctError::Dimension(format!(
            "spatial size {h}x{w} is not a positive multiple of {ENCODER_STRIDE}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct ConvNorm {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvNorm {
    fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        Self {
            conv: Conv2d::new(store, init, &format!("{name}.conv"), cin, cout, k, stride, false),
            norm: GroupNorm::new(store, &format!("{name}.norm"), cout),
        }
    }

    fn forward<'t>(&self, b: &Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.norm.forward(b, self.conv.forward(b, x)?)
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    a: ConvNorm,
    b: ConvNorm,
    shortcut: Option<ConvNorm>,
}

impl BasicBlock {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            a: ConvNorm::new(store, init, &format!("{name}.a"), cin, cout, 3, stride),
            b: ConvNorm::new(store, init, &format!("{name}.b"), cout, cout, 3, 1),
            shortcut: (stride != 1 || cin != cout)
                .then(|| ConvNorm::new(store, init, &format!("{name}.shortcut"), cin, cout, 1, stride)),
        }
    }

    fn forward<'t>(&self, b: &Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let main = self.b.forward(b, self.a.forward(b, x)?.relu())?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(b, x)?,
            None => x,
        };
        Ok(main.add(skip)?.relu())
    }
}

/// Residual CNN producing levels at strides 4, 8, 16, 32.
#[derive(Debug, Clone)]
pub struct Encoder {
    stem: [ConvNorm; 2],
    stages: Vec<BasicBlock>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, channels: &[usize]) -> Self {
        let c0 = channels[0];
        let stem = [
            ConvNorm::new(store, init, &format!("{name}.stem0"), 3, c0, 3, 2),
            ConvNorm::new(store, init, &format!("{name}.stem1"), c0, c0, 3, 2),
        ];
        let stages = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let (cin, stride) = if i == 0 { (c0, 1) } else { (channels[i - 1], 2) };
                BasicBlock::new(store, init, &format!("{name}.stage{i}"), cin, c, stride)
            })
            .collect();
        Self { stem, stages }
    }

    /// `[N, 3, H, W]` to four levels `[N, C_i, H / 2^(i+2), W / 2^(i+2)]`.
    pub fn forward<'t>(&self, b: &Binding<'t>, x: Var<'t>) -> Result<Vec<Var<'t>>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(EhctError::Dimension(format!("encoder expects [N,3,H,W], got {s:?}")));
        }
        check_spatial(s[2], s[3])?;
        let mut h = x;
        for conv in &self.stem {
            h = conv.forward(b, h)?.relu();
        }
        let mut levels = Vec::with_capacity(4);
        for stage in &self.stages {
            h = stage.forward(b, h)?;
            levels.push(h);
        }
        Ok(levels)
    }

    /// Final normalization layers of every stage, for initialization probes.
    pub fn final_norms(&self) -> Vec<&GroupNorm> {
        self.stages.iter().map(|s| &s.b.norm).collect()
    }
}

/// Unconstrained scalar squashed to the blend weight `α = sigmoid(raw)`.
#[derive(Debug, Clone)]
pub struct FusionWeight {
    pub raw: ParamId,
}

impl FusionWeight {
    /// Starts at `α = 0.5`.
    pub fn new(store: &mut ParamStore, name: &str) -> Self {
        Self { raw: store.add(name.to_string(), Tensor::zeros([1])) }
    }

    pub fn alpha(&self, store: &ParamStore) -> f64 {
        alpha_of(store.get(self.raw).item())
    }
}

pub fn alpha_of(raw: f64) -> f64 {
    sigmoid(raw.clamp(-ALPHA_CLAMP, ALPHA_CLAMP))
}

/// `α · o_e + (1 − α) · o_d` with `α = sigmoid(clamp(raw))`; `raw` has one element.
pub fn fuse<'t>(o_e: Var<'t>, o_d: Var<'t>, raw: Var<'t>) -> Result<Var<'t>> {
    let (e, d, r) = (o_e.value(), o_d.value(), raw.value());
    if e.shape() != d.shape() {
        return Err(EhctError::Dimension(format!("fuse inputs differ: {:?} vs {:?}", e.shape(), d.shape())));
    }
    if r.numel() != 1 {
        return Err(EhctError::Dimension(format!("fusion weight must be a scalar, got {:?}", r.shape())));
    }
    let rv = r.item();
    let a = alpha_of(rv);
    let one_minus = 1.0 - a;
    let data = e.data().iter().zip(d.data()).map(|(x, y)| a * x + one_minus * y).collect();
    let value = Tensor::new(e.shape().to_vec(), data)?;
    let live = rv.abs() < ALPHA_CLAMP;
    Ok(o_e.tape().op(value, &[o_e, o_d, raw], move |g, need| {
        vec![
            need[0].then(|| g.map(|v| v * a)),
            need[1].then(|| g.map(|v| v * one_minus)),
            need[2].then(|| {
                let s: f64 = if live {
                    g.data().iter().zip(e.data().iter().zip(d.data())).map(|(gv, (x, y))| gv * (x - y)).sum::<f64>()
                        * a
                        * one_minus
                } else {
                    0.0
                };
                Tensor::new(r.shape().to_vec(), vec![s]).expect("fuse grad")
            }),
        ]
    }))
}

/// Bottom-up Transformer decoder with fusion after each block.
#[derive(Debug, Clone)]
pub struct Decoder {
    proj: Conv2d,
    laterals: Vec<Conv2d>,
    blocks: Vec<TransformerBlock>,
    pos: Vec<ParamId>,
    pub alphas: Vec<FusionWeight>,
}

/// Values at one fusion site, for probes.
pub struct FusionSite<'t> {
    pub encoder: Var<'t>,
    pub decoder: Var<'t>,
    pub fused: Var<'t>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &HctConfig) -> Self {
        let d = cfg.decoder_dim;
        let sides = cfg.level_sizes();
        let proj = Conv2d::new(store, init, &format!("{name}.proj"), cfg.stage_channels[3], d, 1, 1, true);
        let mut laterals = Vec::new();
        let mut blocks = Vec::new();
        let mut pos = Vec::new();
        let mut alphas = Vec::new();
        for k in 0..cfg.decoder_blocks {
            let side = sides[3 - k];
            pos.push(store.add(format!("{name}.pos{k}"), init.normal([side * side, d], 0.02)));
            // a constant offset added after the last block reaches both dates unchanged
            // and cancels in their difference, so the last stage carries no output biases
            let bias = k + 1 < cfg.decoder_blocks;
            let block = format!("{name}.block{k}");
            blocks.push(TransformerBlock::with_output_bias(
                store,
                init,
                &block,
                d,
                cfg.attention_heads,
                cfg.mlp_ratio,
                bias,
            ));
            laterals.push(Conv2d::new(
                store,
                init,
                &format!("{name}.lateral{k}"),
                cfg.stage_channels[2 - k],
                d,
                1,
                1,
                bias,
            ));
            alphas.push(FusionWeight::new(store, &format!("{name}.alpha{k}")));
        }
        Self { proj, laterals, blocks, pos, alphas }
    }

    /// Decoder parameters that do not sit on an encoder-to-output path once every α is 1.
    pub fn decoder_only_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.proj.weight];
        ids.extend(self.proj.bias);
        ids.extend(&self.pos);
        for blk in &self.blocks {
            for lin in [&blk.attn.q, &blk.attn.k, &blk.attn.v, &blk.attn.out, &blk.mlp.fc1, &blk.mlp.fc2] {
                ids.push(lin.weight);
                ids.extend(lin.bias);
            }
            ids.extend([blk.norm1.gamma, blk.norm1.beta, blk.norm2.gamma, blk.norm2.beta]);
        }
        ids
    }

    pub fn forward<'t>(&self, b: &Binding<'t>, levels: &[Var<'t>]) -> Result<Var<'t>> {
        Ok(self.forward_sites(b, levels)?.pop().expect("three fusion sites").fused)
    }

    /// Runs the decoder and returns every fusion site in order; the last `fused` is the output.
    pub fn forward_sites<'t>(&self, b: &Binding<'t>, levels: &[Var<'t>]) -> Result<Vec<FusionSite<'t>>> {
        if levels.len() != 4 {
            return Err(EhctError::Dimension(format!("pyramid needs 4 levels, got {}", levels.len())));
        }
        let mut x = self.proj.forward(b, levels[3])?;
        let mut sites = Vec::with_capacity(self.blocks.len());
        for (k, blk) in self.blocks.iter().enumerate() {
            let s = x.shape();
            let (h, w) = (s[2], s[3]);
            let pos = b.param(self.pos[k]);
            if pos.shape()[0] != h * w {
                return Err(EhctError::Dimension(format!(
                    "decoder block {k} was built for {} tokens but sees {h}x{w}; input size differs from the configured one",
                    pos.shape()[0]
                )));
            }
            let tokens = to_tokens(x)?.add(pos)?;
            let decoded = from_tokens(blk.forward(b, tokens)?.output, h, w)?.upsample_nearest(2)?;
            let lateral = self.laterals[k].forward(b, levels[2 - k])?;
            let fused = fuse(lateral, decoded, b.param(self.alphas[k].raw))?;
            sites.push(FusionSite { encoder: lateral, decoder: decoded, fused });
            x = fused;
        }
        Ok(sites)
    }
}

/// Shared-weight branch: encoder plus decoder.
#[derive(Debug, Clone)]
pub struct Hct {
    pub config: HctConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Hct {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, config: &HctConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            encoder: Encoder::new(store, init, &format!("{name}.enc"), &config.stage_channels),
            decoder: Decoder::new(store, init, &format!("{name}.dec"), config),
        })
    }

    /// `[N, 3, H, W]` to `[N, decoder_dim, H/4, W/4]`.
    pub fn forward<'t>(&self, b: &Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let levels = self.encoder.forward(b, x)?;
        self.decoder.forward(b, &levels)
    }

    /// Applies the one branch to both images.
    pub fn extract_bitemporal<'t>(&self, b: &Binding<'t>, a: Var<'t>, bb: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        if a.shape() != bb.shape() {
            return Err(EhctError::Dimension(format!("pair shapes differ: {:?} vs {:?}", a.shape(), bb.shape())));
        }
        Ok((self.forward(b, a)?, self.forward(b, bb)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ehct_autograd::gradcheck::check_gradients;
    use ehct_autograd::Tape;

    fn small(input: usize) -> HctConfig {
        HctConfig {
            stage_channels: vec![4, 8, 12, 16],
            attention_heads: 2,
            input_size: input,
            decoder_dim: 8,
            ..HctConfig::default()
        }
    }

    fn build(cfg: &HctConfig, seed: u64) -> (ParamStore, Hct) {
        let mut store = ParamStore::new();
        let hct = Hct::new(&mut store, &mut Init::new(seed), "hct", cfg).unwrap();
        (store, hct)
    }

    #[test]
    fn config_validation() {
        assert!(HctConfig::default().validate().is_ok());
        let c = HctConfig { stage_channels: vec![32, 32, 64, 128], ..HctConfig::default() };
        assert!(matches!(c.validate(), Err(EhctError::Config(_))));
        assert!(HctConfig { decoder_blocks: 2, ..HctConfig::default() }.validate().is_err());
        assert!(HctConfig { input_size: 100, ..HctConfig::default() }.validate().is_err());
    }

    #[test]
    fn level_sizes_follow_strides() {
        let cfg = HctConfig::default();
        assert_eq!(cfg.level_sizes(), [64, 32, 16, 8]);
        let (store, hct) = build(&small(64), 0);
        let tape = Tape::inference();
        let b = Binding::new(&tape, &store);
        let x = tape.constant(Init::new(1).uniform([1, 3, 64, 64], 1.0));
        let levels = hct.encoder.forward(&b, x).unwrap();
        let shapes: Vec<_> = levels.iter().map(|l| l.shape()).collect();
        assert_eq!(shapes, vec![vec![1, 4, 16, 16], vec![1, 8, 8, 8], vec![1, 12, 4, 4], vec![1, 16, 2, 2]]);
        assert_eq!(hct.forward(&b, x).unwrap().shape(), vec![1, 8, 16, 16]);
    }

    #[test]
    fn rejects_bad_spatial_size() {
        let (store, hct) = build(&small(64), 0);
        let tape = Tape::inference();
        let b = Binding::new(&tape, &store);
        let x = tape.constant(Tensor::zeros([1, 3, 48, 64]));
        assert!(matches!(hct.forward(&b, x), Err(EhctError::Dimension(_))));
    }

    #[test]
    fn zero_input_with_zeroed_final_norms_is_finite() {
        let (mut store, hct) = build(&small(32), 2);
        for n in hct.encoder.final_norms() {
            store.get_mut(n.gamma).data_mut().fill(0.0);
        }
        let tape = Tape::inference();
        let b = Binding::new(&tape, &store);
        let y = hct.forward(&b, tape.constant(Tensor::zeros([1, 3, 32, 32]))).unwrap();
        assert!(y.value().all_finite());
    }

    #[test]
    fn fuse_scalar_case_and_loop_oracle() {
        let tape = Tape::inference();
        let y = fuse(
            tape.constant(Tensor::scalar(2.0)),
            tape.constant(Tensor::scalar(4.0)),
            tape.constant(Tensor::zeros([1])),
        );
        assert_eq!(y.unwrap().value().item(), 3.0);

        let mut init = Init::new(3);
        let (e, d) = (init.normal([2, 3, 4], 1.0), init.normal([2, 3, 4], 1.0));
        let raw = 0.7;
        let y = fuse(
            tape.constant(e.clone()),
            tape.constant(d.clone()),
            tape.constant(Tensor::new([1], vec![raw]).unwrap()),
        )
        .unwrap()
        .value();
        let a = 1.0 / (1.0 + (-raw).exp());
        for i in 0..e.numel() {
            let want = a * e.data()[i] + (1.0 - a) * d.data()[i];
            assert!((y.data()[i] - want).abs() <= 1e-15);
        }
    }

    #[test]
    fn fuse_at_clamp_returns_encoder_side() {
        let tape = Tape::inference();
        let mut init = Init::new(4);
        let (e, d) = (init.normal([3, 3], 1.0), init.normal([3, 3], 1.0));
        let y = fuse(tape.constant(e.clone()), tape.constant(d), tape.constant(Tensor::new([1], vec![1e9]).unwrap()))
            .unwrap();
        assert!(y.value().max_abs_diff(&e) <= 1e-5);
        assert_eq!(alpha_of(ALPHA_CLAMP), 1.0);
    }

    #[test]
    fn fuse_rejects_mismatch() {
        let tape = Tape::inference();
        let r = fuse(
            tape.constant(Tensor::zeros([2])),
            tape.constant(Tensor::zeros([3])),
            tape.constant(Tensor::zeros([1])),
        );
        assert!(matches!(r, Err(EhctError::Dimension(_))));
    }

    #[test]
    fn fuse_gradients() {
        let mut init = Init::new(5);
        let inputs = [init.normal([2, 2], 1.0), init.normal([2, 2], 1.0), Tensor::new([1], vec![0.3]).unwrap()];
        let w = init.normal([2, 2], 1.0);
        let r = check_gradients(&inputs, 1e-5, |tape, v| {
            Ok::<_, EhctError>(fuse(v[0], v[1], v[2])?.mul(tape.constant(w.clone()))?.sum())
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn shared_branch_is_symmetric() {
        let (store, hct) = build(&small(32), 6);
        let tape = Tape::inference();
        let b = Binding::new(&tape, &store);
        let mut init = Init::new(7);
        let x = tape.constant(init.uniform([1, 3, 32, 32], 1.0));
        let y = tape.constant(init.uniform([1, 3, 32, 32], 1.0));
        let (p, q) = hct.extract_bitemporal(&b, x, x).unwrap();
        assert_eq!(*p.value(), *q.value());
        let (p, q) = hct.extract_bitemporal(&b, x, y).unwrap();
        let (q2, p2) = hct.extract_bitemporal(&b, y, x).unwrap();
        assert_eq!(*p.value(), *p2.value());
        assert_eq!(*q.value(), *q2.value());
        assert!(p.value().max_abs_diff(&q.value()) > 0.0);
    }
}
