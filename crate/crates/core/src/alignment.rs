//! The two alignment objectives.
//!
//! Text alignment pulls intermediate query-transformer states toward frozen
//! text embeddings of the ground-truth captions. Detection-caption alignment
//! pools detection outputs and caption logits onto a learnable prompt bank
//! and contrasts the two pooled views.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{normal_tensor, standard_normal, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_positions, Attention, LayerNorm, Linear, Mlp};
use crate::scenegen::PAD;

/// Seed of the frozen text encoder's weights.
pub const TEXT_ENCODER_SEED: u64 = 0x7e57_c0de;

/// Distance between paired embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    /// Mean squared difference.
    #[default]
    Mse,
    /// `1 − cos`, averaged over pairs.
    Cosine,
    /// Symmetric InfoNCE on cosine similarity, the other pairs of the batch
    /// serving as negatives.
    Clip,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Self::Mse => "mse",
            Self::Cosine => "cosine",
            Self::Clip => "clip",
        }
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Self::Mse),
            "cosine" => Ok(Self::Cosine),
            "clip" => Ok(Self::Clip),
            _ => Err(Error::InvalidArgument(format!("unknown objective {s:?}"))),
        }
    }
}

/// Fixed surrogate text encoder: a seeded embedding table, one transformer
/// block, mean pooling and an orthogonal output map. Never trained.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    store: ParamStore,
    embed: ParamId,
    attn: Attention,
    norm1: LayerNorm,
    ffn: Mlp,
    norm2: LayerNorm,
    projection: Tensor,
    vocab: usize,
    dim: usize,
}

/// Orthonormal columns by Gram–Schmidt on a Gaussian matrix.
fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Tensor {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| standard_normal(rng)).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(c) {
                *x -= dot * y;
            }
        }
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if norm > 1e-6 {
            cols.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        for c in &cols {
            data.push(c[i]);
        }
    }
    Tensor::new(&[n, n], data).expect("square")
}

impl TextEncoder {
    pub fn new(vocab: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embed = store.add("text.embed", normal_tensor(&mut rng, &[vocab, dim], 1.0))?;
        let attn = Attention::new(&mut store, &mut rng, "text.attn", dim, dim, 4)?;
        let norm1 = LayerNorm::new(&mut store, "text.norm1", dim)?;
        let ffn = Mlp::new(&mut store, &mut rng, "text.ffn", dim, 2 * dim, dim)?;
        let norm2 = LayerNorm::new(&mut store, "text.norm2", dim)?;
        let projection = random_orthogonal(&mut rng, dim);
        Ok(Self {
            store,
            embed,
            attn,
            norm1,
            ffn,
            norm2,
            projection,
            vocab,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Embedding of one caption (token ids without sequence markers).
    pub fn encode(&self, tokens: &[u32]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::Empty("caption to encode"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.vocab) {
            return Err(Error::UnknownToken(format!("id {bad}")));
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let mut g = Graph::new();
        let table = g.param(&self.store, self.embed);
        let x = g.embedding_lookup(table, &ids)?;
        let pos = g.constant(sinusoidal_positions(ids.len(), self.dim));
        let x = g.add(x, pos)?;
        let a = self.attn.forward(&mut g, &self.store, x, x, None)?;
        let x = self.norm1.residual(&mut g, &self.store, x, a)?;
        let f = self.ffn.forward(&mut g, &self.store, x)?;
        let x = self.norm2.residual(&mut g, &self.store, x, f)?;
        let pooled = g.mean_rows(x)?;
        let p = g.constant(self.projection.clone());
        let out = g.matmul(pooled, p)?;
        g.value(out).clone().reshape(&[self.dim])
    }

    /// Stacked embeddings, one row per caption.
    pub fn encode_all(&self, captions: &[Vec<u32>]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(captions.len() * self.dim);
        for c in captions {
            data.extend_from_slice(self.encode(c)?.data());
        }
        Tensor::new(&[captions.len(), self.dim], data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentConfig {
    /// Prompt bank rows.
    pub prompts: usize,
    /// Shared embedding width of the prompt bank and the text encoder.
    pub dim: usize,
    pub tau: f64,
    pub bla_objective: Objective,
    pub dca_objective: Objective,
    pub cls_hidden: usize,
    pub box_hidden: usize,
    pub cap_hidden: usize,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            prompts: 16,
            dim: 64,
            tau: 0.07,
            bla_objective: Objective::Mse,
            dca_objective: Objective::Clip,
            cls_hidden: 32,
            box_hidden: 32,
            cap_hidden: 64,
        }
    }
}

/// Trainable projection heads and prompt bank.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentHeads {
    pub phi_q: Mlp,
    pub phi_cls: Mlp,
    pub phi_box: Mlp,
    pub det_merge: Linear,
    pub phi_cap: Mlp,
    pub bank: ParamId,
}

impl AlignmentHeads {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &AlignmentConfig,
        query_dim: usize,
        class_logits: usize,
        box_dim: usize,
        vocab: usize,
    ) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            phi_q: Mlp::new(store, rng, "align.phi_q", query_dim, d, d)?,
            phi_cls: Mlp::new(store, rng, "align.phi_cls", class_logits, cfg.cls_hidden, cfg.cls_hidden)?,
            phi_box: Mlp::new(store, rng, "align.phi_box", box_dim, cfg.box_hidden, cfg.box_hidden)?,
            det_merge: Linear::new(store, rng, "align.det_merge", cfg.cls_hidden + cfg.box_hidden, d)?,
            phi_cap: Mlp::new(store, rng, "align.phi_cap", vocab, cfg.cap_hidden, d)?,
            bank: store.add(
                "align.prompts",
                normal_tensor(rng, &[cfg.prompts, d], 1.0 / libm::sqrt(d as f64)),
            )?,
        })
    }

    /// `x_det = W [Φcls(ĉ), Φbox(b̂)]`, one row per query.
    pub fn project_detection(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        class_logits: Var,
        boxes: Var,
    ) -> Result<Var> {
        let c = self.phi_cls.forward(g, store, class_logits)?;
        let b = self.phi_box.forward(g, store, boxes)?;
        let x = g.concat(&[c, b], 1)?;
        self.det_merge.forward(g, store, x)
    }

    /// Mean over caption positions of the per-position projection of the
    /// logits. Rows whose target is `PAD` are skipped.
    pub fn project_caption(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        logits: Var,
        targets: &[u32],
    ) -> Result<Var> {
        if g.value(logits).rows() != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "project_caption",
                lhs: g.shape(logits).to_vec(),
                rhs: alloc::vec![targets.len()],
            });
        }
        let rows: Vec<usize> = (0..targets.len()).filter(|&r| targets[r] != PAD).collect();
        if rows.is_empty() {
            return Err(Error::Empty("caption logits"));
        }
        let x = if rows.len() == targets.len() {
            logits
        } else {
            g.gather_rows(logits, &rows)?
        };
        let y = self.phi_cap.forward(g, store, x)?;
        g.mean_rows(y)
    }

    /// [`Self::project_caption`] for several captions packed in one logits
    /// matrix, one output row per span.
    pub fn project_caption_spans(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        logits: Var,
        targets: &[u32],
        spans: &[Range<usize>],
    ) -> Result<Var> {
        let mut rows = Vec::new();
        let mut counts = Vec::with_capacity(spans.len());
        for s in spans {
            let before = rows.len();
            rows.extend(s.clone().filter(|&r| targets.get(r).is_some_and(|&t| t != PAD)));
            if rows.len() == before {
                return Err(Error::Empty("caption logits"));
            }
            counts.push(rows.len() - before);
        }
        let x = g.gather_rows(logits, &rows)?;
        let y = self.phi_cap.forward(g, store, x)?;
        let mut avg = alloc::vec![0.0; spans.len() * rows.len()];
        let mut start = 0;
        for (i, &n) in counts.iter().enumerate() {
            for c in start..start + n {
                avg[i * rows.len() + c] = 1.0 / n as f64;
            }
            start += n;
        }
        let avg = g.constant(Tensor::new(&[spans.len(), rows.len()], avg)?);
        g.matmul(avg, y)
    }
}

/// Softmax-weighted average of the bank rows, weights `softmax(x · pᵢ)`.
/// Returns the pooled rows and the weights.
pub fn pool_to_prompt_space(g: &mut Graph, x: Var, bank: Var) -> Result<(Var, Var)> {
    let (dx, db) = (g.value(x).last_dim(), g.value(bank).last_dim());
    if dx != db {
        return Err(Error::ShapeMismatch {
            op: "pool_to_prompt_space",
            lhs: g.shape(x).to_vec(),
            rhs: g.shape(bank).to_vec(),
        });
    }
    let scores = g.matmul_nt(x, bank)?;
    let w = g.softmax(scores)?;
    Ok((g.matmul(w, bank)?, w))
}

/// Symmetric InfoNCE between the rows of `a` and `b` at temperature `tau`.
pub fn info_nce(g: &mut Graph, a: Var, b: Var, tau: f64) -> Result<Var> {
    let an = g.normalize_rows(a)?;
    let bn = g.normalize_rows(b)?;
    let s = g.matmul_nt(an, bn)?;
    let s = g.scale(s, 1.0 / tau)?;
    g.diagonal_contrastive(s)
}

/// `1 − cos(aᵢ, bᵢ)` averaged over rows.
pub fn cosine_distance(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let n = g.value(a).rows();
    let an = g.normalize_rows(a)?;
    let bn = g.normalize_rows(b)?;
    let p = g.mul(an, bn)?;
    let s = g.sum(p)?;
    let s = g.scale(s, -1.0 / n as f64)?;
    let one = g.constant(Tensor::scalar(1.0));
    g.add(one, s)
}

/// Paired-row distance under `objective`.
pub fn objective_loss(g: &mut Graph, a: Var, b: Var, objective: Objective, tau: f64) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::ShapeMismatch {
            op: "objective_loss",
            lhs: g.shape(a).to_vec(),
            rhs: g.shape(b).to_vec(),
        });
    }
    match objective {
        Objective::Mse => g.mse(a, b),
        Objective::Cosine => cosine_distance(g, a, b),
        Objective::Clip => info_nce(g, a, b, tau),
    }
}

/// Text alignment: projected layer states `Φ(d_ℓ)` against the frozen
/// caption embeddings, one row per matched object.
pub fn bla_loss(
    g: &mut Graph,
    store: &ParamStore,
    heads: &AlignmentHeads,
    layer_states: Var,
    text_targets: Var,
    objective: Objective,
    tau: f64,
) -> Result<Var> {
    let pred = heads.phi_q.forward(g, store, layer_states)?;
    objective_loss(g, pred, text_targets, objective, tau)
}

/// Detection-caption alignment over a batch of pooled pairs.
pub fn dca_loss(g: &mut Graph, p_det: Var, p_cap: Var, objective: Objective, tau: f64) -> Result<Var> {
    objective_loss(g, p_det, p_cap, objective, tau)
}

/// Human-readable objective list for logs.
pub fn objective_names() -> String {
    [Objective::Mse, Objective::Cosine, Objective::Clip]
        .iter()
        .map(|o| o.name())
        .collect::<Vec<_>>()
        .join(", ")
}
