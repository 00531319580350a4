//! Full network assembly and the ablation ladder.

use std::fmt;
use std::str::FromStr;

use ehct_autograd::{Binding, ParamStore, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{EhctError, Result};
use crate::feature_extraction::{Hct, HctConfig};
use crate::head::DetectionHead;
use crate::nn::Init;
use crate::spectral::SpectralGate;
use crate::token::{semantic_difference, Cksa, PixelDecoder, TokenEncoder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "+ETMT")]
    Etmt,
    #[serde(rename = "+RMI+ETMT")]
    RmiEtmt,
    #[serde(rename = "+ETMT+RMII")]
    EtmtRmii,
    #[serde(rename = "full")]
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 5] =
        [Ablation::Baseline, Ablation::Etmt, Ablation::RmiEtmt, Ablation::EtmtRmii, Ablation::Full];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::Etmt => "+ETMT",
            Ablation::RmiEtmt => "+RMI+ETMT",
            Ablation::EtmtRmii => "+ETMT+RMII",
            Ablation::Full => "full",
        }
    }

    /// Token transformer present.
    pub fn etmt(self) -> bool {
        self != Ablation::Baseline
    }

    /// Spectral refinement of the branch features.
    pub fn rmi(self) -> bool {
        matches!(self, Ablation::RmiEtmt | Ablation::Full)
    }

    /// Spectral refinement of the upsampled difference map.
    pub fn rmii(self) -> bool {
        matches!(self, Ablation::EtmtRmii | Ablation::Full)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = EhctError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            EhctError::Config(format!(
                "unknown ablation {s:?}; expected one of {}",
                Ablation::ALL.map(|a| a.name()).join(", ")
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hct: HctConfig,
    /// Tokens per branch.
    pub tokens: usize,
    pub token_heads: usize,
    pub token_layers: usize,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hct: HctConfig::default(), tokens: 4, token_heads: 4, token_layers: 1, head_hidden: 16 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.hct.validate()?;
        let d = self.hct.decoder_dim;
        if self.tokens == 0 || self.token_layers == 0 || self.head_hidden == 0 {
            return Err(EhctError::Config("tokens, token_layers and head_hidden must be positive".into()));
        }
        if self.token_heads == 0 || !d.is_multiple_of(self.token_heads) {
            return Err(EhctError::Config(format!(
                "decoder_dim {d} does not split into {} token heads",
                self.token_heads
            )));
        }
        Ok(())
    }
}

/// Hex SHA-256 of the architecture description; any change makes old checkpoints incompatible.
pub fn config_hash(config: &ModelConfig, ablation: Ablation) -> String {
    let doc = serde_json::json!({ "ablation": ablation.name(), "model": config });
    hex_digest(doc.to_string().as_bytes())
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug)]
pub struct TokenModule {
    pub cksa: Cksa,
    pub encoder: TokenEncoder,
    pub decoder: PixelDecoder,
}

#[derive(Debug)]
pub struct EhctNet {
    pub ablation: Ablation,
    pub config: ModelConfig,
    pub hct: Hct,
    pub hfft: Option<SpectralGate>,
    pub etmt: Option<TokenModule>,
    pub bfft: Option<SpectralGate>,
    pub head: DetectionHead,
}

/// Every intermediate of one forward pass, in pipeline order. Stages that an
/// ablation leaves out repeat their input.
pub struct Trace<'t> {
    /// Branch outputs of the hybrid feature extractor, `[N, d, H/4, W/4]`.
    pub raw: (Var<'t>, Var<'t>),
    /// After spectral refinement I.
    pub first_order: (Var<'t>, Var<'t>),
    /// Semantic pixel maps from the token decoder.
    pub semantic: (Var<'t>, Var<'t>),
    /// Absolute difference of the semantic maps at `H/4`.
    pub diff: Var<'t>,
    /// Difference map rescaled to the input size, then spectral refinement II.
    pub second_order: Var<'t>,
    pub logits: Var<'t>,
    /// Attention probabilities of the token encoder layers.
    pub encoder_probs: Vec<Var<'t>>,
}

impl EhctNet {
    pub fn new(store: &mut ParamStore, config: &ModelConfig, ablation: Ablation, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let d = config.hct.decoder_dim;
        let s = config.hct.input_size;
        let q = s / 4;
        let hct = Hct::new(store, &mut init, "hct", &config.hct)?;
        let hfft = ablation.rmi().then(|| SpectralGate::new(store, "hfft", d, q, q));
        let etmt = ablation.etmt().then(|| TokenModule {
            cksa: Cksa::new(store, &mut init, "etmt.cksa", d, config.tokens),
            encoder: TokenEncoder::new(store, &mut init, "etmt.encoder", d, config.token_heads, config.token_layers),
            decoder: PixelDecoder::new(store, &mut init, "etmt.decoder", d, config.token_heads, q * q),
        });
        let bfft = ablation.rmii().then(|| SpectralGate::new(store, "bfft", d, s, s));
        let head = DetectionHead::new(store, &mut init, "head", d, config.head_hidden);
        Ok(Self { ablation, config: config.clone(), hct, hfft, etmt, bfft, head })
    }

    /// Convenience constructor returning a fresh parameter store.
    pub fn build(config: &ModelConfig, ablation: Ablation, seed: u64) -> Result<(ParamStore, Self)> {
        let mut store = ParamStore::new();
        let net = Self::new(&mut store, config, ablation, seed)?;
        Ok((store, net))
    }

    pub fn config_hash(&self) -> String {
        config_hash(&self.config, self.ablation)
    }

    fn check_input(&self, a: &[usize], b: &[usize]) -> Result<()> {
        let s = self.config.hct.input_size;
        if a != b {
            return Err(EhctError::Dimension(format!("pair shapes differ: {a:?} vs {b:?}")));
        }
        if a.len() != 4 || a[1] != 3 || a[2] != s || a[3] != s {
            return Err(EhctError::Dimension(format!("model built for [N,3,{s},{s}] inputs, got {a:?}")));
        }
        Ok(())
    }

    pub fn forward<'t>(&self, b: &Binding<'t>, img_a: Var<'t>, img_b: Var<'t>) -> Result<Trace<'t>> {
        self.check_input(&img_a.shape(), &img_b.shape())?;
        let raw = self.hct.extract_bitemporal(b, img_a, img_b)?;
        let first_order = match &self.hfft {
            Some(g) => (g.forward(b, raw.0)?, g.forward(b, raw.1)?),
            None => raw,
        };
        let (semantic, encoder_probs) = match &self.etmt {
            Some(m) => {
                let t1 = m.cksa.forward(b, first_order.0)?;
                let t2 = m.cksa.forward(b, first_order.1)?;
                let ctx = m.encoder.forward(b, t1.tokens, t2.tokens)?;
                let m1 = m.decoder.forward(b, ctx.first, first_order.0)?.map;
                let m2 = m.decoder.forward(b, ctx.second, first_order.1)?.map;
                ((m1, m2), ctx.probs)
            }
            None => (first_order, Vec::new()),
        };
        let diff = semantic_difference(semantic.0, semantic.1)?;
        let s = self.config.hct.input_size;
        let up = diff.resize_bilinear(s, s)?;
        let second_order = match &self.bfft {
            Some(g) => g.forward(b, up)?,
            None => up,
        };
        let logits = self.head.forward(b, second_order)?;
        Ok(Trace { raw, first_order, semantic, diff, second_order, logits, encoder_probs })
    }
}
