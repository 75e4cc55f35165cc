//! Layers shared by both branches, expressed as parameter handles plus a
//! forward pass over a [`Graph`].

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{normal_tensor, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Affine map `x·W + b` applied row-wise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights drawn from `N(0, 1/in_dim)`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let std = 1.0 / libm::sqrt(in_dim as f64);
        Self::with_std(store, rng, name, in_dim, out_dim, std)
    }

    pub fn with_std<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
    ) -> Result<Self> {
        let weight = store.add(
            &format!("{name}.weight"),
            normal_tensor(rng, &[in_dim, out_dim], std),
        )?;
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[out_dim]))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, rng, &format!("{name}.fc1"), in_dim, hidden_dim)?,
            output: Linear::new(store, rng, &format!("{name}.fc2"), hidden_dim, out_dim)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.output.forward(g, store, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(&format!("{name}.gain"), Tensor::ones(&[dim]))?,
            bias: store.add(&format!("{name}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }

    /// Post-norm residual connection: `norm(x + sublayer)`.
    pub fn residual(&self, g: &mut Graph, store: &ParamStore, x: Var, sub: Var) -> Result<Var> {
        let s = g.add(x, sub)?;
        self.forward(g, store, s)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "model width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, rng, &format!("{name}.q"), dim, dim)?,
            key: Linear::new(store, rng, &format!("{name}.k"), kv_dim, dim)?,
            value: Linear::new(store, rng, &format!("{name}.v"), kv_dim, dim)?,
            out: Linear::new(store, rng, &format!("{name}.o"), dim, dim)?,
            heads,
        })
    }

    /// Attends from the rows of `queries` to the rows of `context`. `mask`,
    /// when given, is added to the `[queries × context]` score matrix of
    /// every head (use large negative entries to block positions).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        context: Var,
        mask: Option<Var>,
    ) -> Result<Var> {
        let q = self.query.forward(g, store, queries)?;
        let k = self.key.forward(g, store, context)?;
        let v = self.value.forward(g, store, context)?;
        let dim = self.query.out_dim;
        let dh = dim / self.heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh)?,
                    g.slice_cols(k, h * dh, dh)?,
                    g.slice_cols(v, h * dh, dh)?,
                )
            };
            let scores = g.matmul_nt(qh, kh)?;
            let mut scores = g.scale(scores, scale)?;
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let attn = g.softmax(scores)?;
            outs.push(g.matmul(attn, vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat(&outs, 1)?
        };
        self.out.forward(g, store, merged)
    }
}

/// Fixed sinusoidal position table `[len × dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim {
            let rate = libm::pow(10_000.0, -((i / 2 * 2) as f64) / dim as f64);
            let angle = pos as f64 * rate;
            data.push(if i % 2 == 0 {
                libm::sin(angle)
            } else {
                libm::cos(angle)
            });
        }
    }
    Tensor::new(&[len, dim], data).expect("positive extents")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::testutil::max_grad_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Attention::new(&mut store, &mut rng, "a", 6, 6, 4).is_err());
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let att = Attention::new(&mut store, &mut rng, "a", 4, 3, 2).unwrap();
        let x = normal_tensor(&mut rng, &[3, 4], 1.0);
        let ctx = normal_tensor(&mut rng, &[5, 3], 1.0);
        let err = max_grad_error(
            |g, v| {
                let y = att.forward(g, &store, v[0], v[1], None)?;
                let y = g.tanh(y)?;
                g.sum(y)
            },
            &[x, ctx],
        );
        assert!(err < 1e-4, "{err}");
    }
}
