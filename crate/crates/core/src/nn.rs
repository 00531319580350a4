//! Parameterized building blocks shared by the network stages. Each layer only
//! holds [`ParamId`]s into a [`ParamStore`]; forwards run against a [`Binding`].

use ehct_autograd::{Binding, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn normal(&mut self, shape: impl Into<Vec<usize>>, std: f64) -> Tensor {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
    }

    /// He-normal for layers followed by a ReLU.
    pub fn kaiming(&mut self, shape: impl Into<Vec<usize>>, fan_in: usize) -> Tensor {
        self.normal(shape, (2.0 / fan_in as f64).sqrt())
    }

    pub fn uniform(&mut self, shape: impl Into<Vec<usize>>, bound: f64) -> Tensor {
        use rand::Rng;
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
    }
}

/// Largest group count not above 8 that divides `channels`.
pub fn group_count(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, din: usize, dout: usize) -> Self {
        Self::with_bias(store, init, name, din, dout, true)
    }

    pub fn with_bias(store: &mut ParamStore, init: &mut Init, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        let weight = store.add(format!("{name}.weight"), init.normal([dout, din], (1.0 / din as f64).sqrt()));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([dout])));
        Self { weight, bias }
    }

    pub fn forward<'t>(&self, b: &Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.linear(b.param(self.weight), self.bias.map(|p| b.param(p)))?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.kaiming([cout, cin, k, k], cin * k * k));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([cout])));
        Self { weight, bias, stride, pad: k / 2 }
    }

    pub fn forward<'t>(&self, b: &Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.conv2d(b.param(self.weight), self.bias.map(|p| b.param(p)), self.stride, self.pad)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            groups: group_count(channels),
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels])),
        }
    }

    pub fn forward<'t>(&self, b: &Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.group_norm(self.groups, b.param(self.gamma), b.param(self.beta))?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim])),
        }
    }

    pub fn forward<'t>(&self, b: &Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.layer_norm(b.param(self.gamma), b.param(self.beta))?)
    }
}

/// Multi-head scaled dot-product attention over `[N, T, D]` token tensors.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub dim: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

/// Attention output together with its probability matrix `[N * heads, Tq, Tk]`.
pub struct Attended<'t> {
    pub output: Var<'t>,
    pub probs: Var<'t>,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, heads: usize) -> Self {
        Self::with_output_bias(store, init, name, dim, heads, true)
    }

    /// `output_bias: false` drops the bias of the output projection.
    pub fn with_output_bias(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        output_bias: bool,
    ) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "{dim} channels do not split into {heads} heads");
        Self {
            heads,
            dim,
            q: Linear::new(store, init, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, init, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, init, &format!("{name}.v"), dim, dim),
            out: Linear::with_bias(store, init, &format!("{name}.out"), dim, dim, output_bias),
        }
    }

    fn split_heads<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let (n, t) = (s[0], s[1]);
        let dh = self.dim / self.heads;
        Ok(x.reshape(&[n, t, self.heads, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[n * self.heads, t, dh])?)
    }

    pub fn forward<'t>(&self, b: &Binding<'t>, query: Var<'t>, context: Var<'t>) -> Result<Attended<'t>> {
        let qs = query.shape();
        let (n, tq) = (qs[0], qs[1]);
        let dh = self.dim / self.heads;
        let q = self.split_heads(self.q.forward(b, query)?)?;
        let k = self.split_heads(self.k.forward(b, context)?)?;
        let v = self.split_heads(self.v.forward(b, context)?)?;
        let probs = q.matmul_t(k)?.scale(1.0 / (dh as f64).sqrt()).softmax();
        let mixed =
            probs.matmul(v)?.reshape(&[n, self.heads, tq, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[n, tq, self.dim])?;
        Ok(Attended { output: self.out.forward(b, mixed)?, probs })
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        dim: usize,
        hidden: usize,
        output_bias: bool,
    ) -> Self {
        Self {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::with_bias(store, init, &format!("{name}.fc2"), hidden, dim, output_bias),
        }
    }

    pub fn forward<'t>(&self, b: &Binding<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.fc2.forward(b, self.fc1.forward(b, x)?.gelu())
    }
}

/// Pre-norm Transformer block: `x + MHSA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        Self::with_output_bias(store, init, name, dim, heads, mlp_ratio, true)
    }

    /// `output_bias: false` drops the bias of the last MLP layer.
    pub fn with_output_bias(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        output_bias: bool,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), dim, heads),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, init, &format!("{name}.mlp"), dim, dim * mlp_ratio, output_bias),
        }
    }

    pub fn forward<'t>(&self, b: &Binding<'t>, x: Var<'t>) -> Result<Attended<'t>> {
        let h = self.norm1.forward(b, x)?;
        let att = self.attn.forward(b, h, h)?;
        let x = x.add(att.output)?;
        let y = x.add(self.mlp.forward(b, self.norm2.forward(b, x)?)?)?;
        Ok(Attended { output: y, probs: att.probs })
    }
}

/// `[N, C, H, W]` to `[N, H*W, C]`.
pub fn to_tokens(x: Var<'_>) -> Result<Var<'_>> {
    let s = x.shape();
    Ok(x.reshape(&[s[0], s[1], s[2] * s[3]])?.permute(&[0, 2, 1])?)
}

/// `[N, H*W, C]` back to `[N, C, H, W]`.
pub fn from_tokens(x: Var<'_>, h: usize, w: usize) -> Result<Var<'_>> {
    let s = x.shape();
    Ok(x.permute(&[0, 2, 1])?.reshape(&[s[0], s[2], h, w])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ehct_autograd::Tape;

    #[test]
    fn group_count_divides() {
        assert_eq!(group_count(32), 8);
        assert_eq!(group_count(12), 6);
        assert_eq!(group_count(7), 7);
        assert_eq!(group_count(11), 1);
    }

    #[test]
    fn init_is_seeded() {
        let a = Init::new(3).normal([16], 1.0);
        let b = Init::new(3).normal([16], 1.0);
        let c = Init::new(4).normal([16], 1.0);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn attention_matches_explicit_loops() {
        let mut store = ParamStore::new();
        let mut init = Init::new(11);
        let mha = MultiHeadAttention::new(&mut store, &mut init, "mha", 4, 2);
        let q_in = Init::new(1).normal([1, 3, 4], 1.0);
        let kv_in = Init::new(2).normal([1, 5, 4], 1.0);
        let tape = Tape::inference();
        let b = Binding::new(&tape, &store);
        let att = mha.forward(&b, tape.constant(q_in.clone()), tape.constant(kv_in.clone())).unwrap();

        let proj = |lin: &Linear, x: &Tensor, rows: usize| -> Vec<Vec<f64>> {
            let w = store.get(lin.weight);
            let bias = store.get(lin.bias.unwrap());
            (0..rows)
                .map(|r| {
                    (0..4)
                        .map(|o| bias.data()[o] + (0..4).map(|i| w.at(&[o, i]) * x.at(&[0, r, i])).sum::<f64>())
                        .collect()
                })
                .collect()
        };
        let (q, k, v) = (proj(&mha.q, &q_in, 3), proj(&mha.k, &kv_in, 5), proj(&mha.v, &kv_in, 5));
        let mut mixed = vec![vec![0.0; 4]; 3];
        for h in 0..2 {
            for i in 0..3 {
                let s: Vec<f64> = (0..5)
                    .map(|j| (0..2).map(|d| q[i][h * 2 + d] * k[j][h * 2 + d]).sum::<f64>() / 2f64.sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
                for j in 0..5 {
                    let p = (s[j] - m).exp() / z;
                    assert!((att.probs.value().at(&[h, i, j]) - p).abs() < 1e-12);
                    for d in 0..2 {
                        mixed[i][h * 2 + d] += p * v[j][h * 2 + d];
                    }
                }
            }
        }
        let mixed = Tensor::new([1, 3, 4], mixed.concat()).unwrap();
        let expect = proj(&mha.out, &mixed, 3).concat();
        let got = att.output.value();
        for (a, e) in got.data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn token_layout_round_trips() {
        let tape = Tape::inference();
        let x = tape.constant(Tensor::from_fn([2, 3, 4, 5], |i| i as f64));
        let t = to_tokens(x).unwrap();
        assert_eq!(t.shape(), vec![2, 20, 3]);
        assert_eq!(t.value().at(&[1, 7, 2]), x.value().at(&[1, 2, 1, 2]));
        let back = from_tokens(t, 4, 5).unwrap();
        assert_eq!(*back.value(), *x.value());
    }
}
