//! Captioning branch: the query transformer that refines detection queries
//! against the BEV features, the projection into the token model's space,
//! and a small prefix language model that writes one caption per query.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;

use crate::autograd::{normal_tensor, softmax_rows, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_positions, Attention, LayerNorm, Linear, Mlp};
use crate::perception::{argmax, CrossBlock};
use crate::scenegen::{BOS, EOS, PAD};

/// Additive mask value for blocked attention entries.
pub const MASKED: f64 = -1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct QFormerConfig {
    pub blocks: usize,
    /// Block whose output the text alignment attaches to (1-based).
    pub bla_layer: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

impl Default for QFormerConfig {
    fn default() -> Self {
        Self {
            blocks: 8,
            bla_layer: 4,
            d_model: 64,
            heads: 4,
            ffn_dim: 128,
        }
    }
}

impl QFormerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.bla_layer == 0 || self.bla_layer > self.blocks {
            return Err(Error::InvalidArgument(format!(
                "alignment layer {} outside 1..={}",
                self.bla_layer, self.blocks
            )));
        }
        Ok(())
    }
}

/// `d₀ … d_L`: input and every block output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QFormerState {
    pub states: Vec<Var>,
}

impl QFormerState {
    pub fn layer(&self, i: usize) -> Var {
        self.states[i]
    }

    pub fn last(&self) -> Var {
        *self.states.last().expect("at least the input state")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QFormer {
    pub blocks: Vec<CrossBlock>,
}

impl QFormer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &QFormerConfig,
        bev_dim: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.blocks)
            .map(|i| {
                CrossBlock::new(
                    store,
                    rng,
                    &format!("qformer.block{}", i + 1),
                    cfg.d_model,
                    bev_dim,
                    cfg.heads,
                    cfg.ffn_dim,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    /// Runs blocks `range` (0-based) starting from `x`; returns each output.
    pub fn run_blocks(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mut x: Var,
        bev: Var,
        range: Range<usize>,
    ) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(range.len());
        for b in &self.blocks[range] {
            x = b.forward(g, store, x, bev, None)?;
            out.push(x);
        }
        Ok(out)
    }

    /// `d_i = Q_i(d_{i−1}, F)` for every block, the same BEV sequence
    /// attended at each.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, d0: Var, bev: Var) -> Result<QFormerState> {
        let mut states = vec![d0];
        states.extend(self.run_blocks(g, store, d0, bev, 0..self.blocks.len())?);
        Ok(QFormerState { states })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Longest caption, counting the end marker.
    pub max_len: usize,
}

impl LmConfig {
    pub fn new(vocab: usize) -> Self {
        Self {
            vocab,
            d_model: 128,
            layers: 2,
            heads: 4,
            ffn_dim: 256,
            max_len: 24,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LmBlock {
    pub attn: Attention,
    pub norm1: LayerNorm,
    pub ffn: Mlp,
    pub norm2: LayerNorm,
}

/// Token model over `[q ‖ prompt ‖ <bos> caption]`. The query and prompt
/// attend among themselves; caption positions see the whole prefix and
/// earlier caption positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyLm {
    pub cfg: LmConfig,
    pub embed: ParamId,
    pub blocks: Vec<LmBlock>,
    pub head: Linear,
}

/// Layout of a batch of sequences packed along the row axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packing {
    /// First row of each sequence.
    pub offsets: Vec<usize>,
    /// Length of each sequence.
    pub lens: Vec<usize>,
    /// Query plus prompt length shared by all sequences.
    pub prefix: usize,
}

impl Packing {
    pub fn rows(&self) -> usize {
        self.lens.iter().sum()
    }

    /// Rows whose logits predict caption tokens of sequence `s`: from the
    /// begin marker to the last supplied token.
    pub fn caption_rows(&self, s: usize) -> Range<usize> {
        self.offsets[s] + self.prefix..self.offsets[s] + self.lens[s]
    }

    /// Additive block-diagonal prefix-LM mask.
    pub fn mask(&self) -> Tensor {
        let n = self.rows();
        let mut data = vec![MASKED; n * n];
        for (&off, &len) in self.offsets.iter().zip(&self.lens) {
            for i in 0..len {
                for j in 0..len {
                    let visible = j < self.prefix || (i >= self.prefix && j <= i);
                    if visible {
                        data[(off + i) * n + off + j] = 0.0;
                    }
                }
            }
        }
        Tensor::from_parts(vec![n, n], data)
    }
}

impl TinyLm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: LmConfig) -> Result<Self> {
        let d = cfg.d_model;
        let embed = store.add("lm.embed", normal_tensor(rng, &[cfg.vocab, d], 1.0))?;
        let blocks = (0..cfg.layers)
            .map(|i| {
                let n = format!("lm.block{i}");
                Ok(LmBlock {
                    attn: Attention::new(store, rng, &format!("{n}.attn"), d, d, cfg.heads)?,
                    norm1: LayerNorm::new(store, &format!("{n}.norm1"), d)?,
                    ffn: Mlp::new(store, rng, &format!("{n}.ffn"), d, cfg.ffn_dim, d)?,
                    norm2: LayerNorm::new(store, &format!("{n}.norm2"), d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(store, rng, "lm.head", d, cfg.vocab)?;
        Ok(Self {
            cfg,
            embed,
            blocks,
            head,
        })
    }

    /// Logits for a batch of sequences `[q_s ‖ prompt ‖ prefixes[s]]`, one
    /// per row of `q`. Returns the packed `[rows × V]` logits.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: Var,
        prompt: &[u32],
        prefixes: &[Vec<u32>],
    ) -> Result<(Var, Packing)> {
        let n = g.value(q).rows();
        if n != prefixes.len() || n == 0 {
            return Err(Error::ShapeMismatch {
                op: "lm_forward",
                lhs: g.shape(q).to_vec(),
                rhs: vec![prefixes.len()],
            });
        }
        let prefix = 1 + prompt.len();
        let table = g.param(store, self.embed);
        let mut pieces = Vec::with_capacity(2 * n);
        let mut offsets = Vec::with_capacity(n);
        let mut lens = Vec::with_capacity(n);
        let mut positions = Vec::new();
        let mut row = 0;
        for (s, p) in prefixes.iter().enumerate() {
            if p.len() > self.cfg.max_len {
                return Err(Error::SequenceTooLong {
                    len: p.len(),
                    max: self.cfg.max_len,
                });
            }
            if let Some(&bad) = prompt.iter().chain(p).find(|&&t| t as usize >= self.cfg.vocab) {
                return Err(Error::UnknownToken(format!("id {bad}")));
            }
            let ids: Vec<usize> = prompt.iter().chain(p).map(|&t| t as usize).collect();
            pieces.push(g.gather_rows(q, &[s])?);
            if !ids.is_empty() {
                pieces.push(g.embedding_lookup(table, &ids)?);
            }
            let len = prefix + p.len();
            offsets.push(row);
            lens.push(len);
            positions.extend(0..len);
            row += len;
        }
        let x = g.concat(&pieces, 0)?;
        let pos_table = sinusoidal_positions(prefix + self.cfg.max_len, self.cfg.d_model);
        let mut pos = Vec::with_capacity(row * self.cfg.d_model);
        for &p in &positions {
            pos.extend_from_slice(pos_table.row(p));
        }
        let pos = g.constant(Tensor::new(&[row, self.cfg.d_model], pos)?);
        let mut x = g.add(x, pos)?;
        let packing = Packing { offsets, lens, prefix };
        let mask = g.constant(packing.mask());
        for b in &self.blocks {
            let a = b.attn.forward(g, store, x, x, Some(mask))?;
            x = b.norm1.residual(g, store, x, a)?;
            let f = b.ffn.forward(g, store, x)?;
            x = b.norm2.residual(g, store, x, f)?;
        }
        let logits = self.head.forward(g, store, x)?;
        Ok((logits, packing))
    }

    /// Teacher-forced pass over complete captions. Returns the packed
    /// logits, the layout, and the row-aligned targets (`PAD` on rows that
    /// predict nothing).
    pub fn teacher_forced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: Var,
        prompt: &[u32],
        captions: &[Vec<u32>],
    ) -> Result<(Var, Packing, Vec<u32>)> {
        let prefixes: Vec<Vec<u32>> = captions
            .iter()
            .map(|c| core::iter::once(BOS).chain(c.iter().copied()).collect())
            .collect();
        let (logits, packing) = self.forward(g, store, q, prompt, &prefixes)?;
        let mut targets = vec![PAD; packing.rows()];
        for (s, c) in captions.iter().enumerate() {
            let rows = packing.caption_rows(s);
            for (r, t) in rows.zip(c.iter().copied().chain(core::iter::once(EOS))) {
                targets[r] = t;
            }
        }
        Ok((logits, packing, targets))
    }

    /// Greedy decoding of one caption per row of `q`; stops at the end
    /// marker or after `max_len` tokens. The end marker is not returned.
    pub fn generate(
        &self,
        store: &ParamStore,
        q: &Tensor,
        prompt: &[u32],
        max_len: usize,
    ) -> Result<Vec<Vec<u32>>> {
        let n = q.rows();
        let max_len = max_len.min(self.cfg.max_len);
        let mut prefixes: Vec<Vec<u32>> = vec![vec![BOS]; n];
        let mut done = vec![false; n];
        let mut out: Vec<Vec<u32>> = vec![Vec::new(); n];
        for _ in 0..max_len {
            if done.iter().all(|d| *d) {
                break;
            }
            let mut g = Graph::new();
            let qv = g.constant(q.clone());
            let (logits, packing) = self.forward(&mut g, store, qv, prompt, &prefixes)?;
            let lt = g.value(logits);
            for s in 0..n {
                if done[s] {
                    continue;
                }
                let last = packing.offsets[s] + packing.lens[s] - 1;
                let next = argmax(lt.row(last)) as u32;
                if next == EOS {
                    done[s] = true;
                } else {
                    out[s].push(next);
                    if out[s].len() + 1 > self.cfg.max_len {
                        done[s] = true;
                    }
                }
            }
            for s in 0..n {
                if !done[s] {
                    prefixes[s] = core::iter::once(BOS).chain(out[s].iter().copied()).collect();
                }
            }
        }
        Ok(out)
    }
}

/// Mean next-token cross-entropy over rows whose target is not `PAD`.
pub fn lm_loss(g: &mut Graph, logits: Var, targets: &[u32]) -> Result<Var> {
    if g.value(logits).rows() != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "lm_loss",
            lhs: g.shape(logits).to_vec(),
            rhs: vec![targets.len()],
        });
    }
    let t: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let w: Vec<f64> = targets.iter().map(|&t| if t == PAD { 0.0 } else { 1.0 }).collect();
    g.weighted_cross_entropy(logits, &t, &w)
}

/// Log-probability of the target tokens under row-aligned logits.
pub fn sequence_log_prob(logits: &Tensor, targets: &[u32]) -> f64 {
    let v = logits.last_dim();
    let probs = softmax_rows(logits.data(), v);
    targets
        .iter()
        .enumerate()
        .filter(|(_, &t)| t != PAD)
        .map(|(r, &t)| libm::log(probs[r * v + t as usize]))
        .sum()
}

/// Query transformer, projection and token model.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionBranch {
    pub qformer: QFormer,
    pub projector: Mlp,
    pub lm: TinyLm,
}

impl CaptionBranch {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        qcfg: &QFormerConfig,
        lm_cfg: LmConfig,
        bev_dim: usize,
    ) -> Result<Self> {
        let qformer = QFormer::new(store, rng, qcfg, bev_dim)?;
        let projector = Mlp::new(store, rng, "cap.proj", qcfg.d_model, lm_cfg.d_model, lm_cfg.d_model)?;
        let lm = TinyLm::new(store, rng, lm_cfg)?;
        Ok(Self {
            qformer,
            projector,
            lm,
        })
    }

    /// `q = Φ(d_L)`.
    pub fn project_queries(&self, g: &mut Graph, store: &ParamStore, d_last: Var) -> Result<Var> {
        self.projector.forward(g, store, d_last)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::testutil::max_grad_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_lm(vocab: usize, seed: u64) -> (ParamStore, TinyLm) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = LmConfig {
            vocab,
            d_model: 8,
            layers: 2,
            heads: 2,
            ffn_dim: 16,
            max_len: 10,
        };
        let lm = TinyLm::new(&mut store, &mut rng, cfg).unwrap();
        (store, lm)
    }

    #[test]
    fn logits_shape_and_packing() {
        let (store, lm) = tiny_lm(12, 0);
        let mut g = Graph::new();
        let q = g.constant(normal_tensor(&mut ChaCha8Rng::seed_from_u64(1), &[2, 8], 1.0));
        let (logits, p) = lm
            .forward(&mut g, &store, q, &[3, 4], &[vec![BOS, 5], vec![BOS, 6, 7]])
            .unwrap();
        assert_eq!(g.shape(logits), &[5 + 6, 12]);
        assert_eq!(p.caption_rows(1), 8..11);
    }

    #[test]
    fn future_tokens_do_not_change_past_logits() {
        let (store, lm) = tiny_lm(12, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let qt = normal_tensor(&mut rng, &[1, 8], 1.0);
        for trial in 0..20 {
            let base: Vec<u32> = (0..6).map(|_| rng.gen_range(3..12)).collect();
            let cut = 1 + trial % 5;
            let mut other = base.clone();
            for t in other.iter_mut().skip(cut) {
                *t = rng.gen_range(3..12);
            }
            let run = |p: &Vec<u32>| {
                let mut g = Graph::new();
                let q = g.constant(qt.clone());
                let (l, _) = lm.forward(&mut g, &store, q, &[3], &[p.clone()]).unwrap();
                g.value(l).clone()
            };
            let (a, b) = (run(&base), run(&other));
            for r in 0..2 + cut {
                assert_eq!(a.row(r), b.row(r), "row {r}");
            }
        }
    }

    #[test]
    fn sequence_log_prob_factorizes_over_steps() {
        let (store, lm) = tiny_lm(12, 5);
        let qt = normal_tensor(&mut ChaCha8Rng::seed_from_u64(6), &[1, 8], 1.0);
        let caption = vec![4u32, 9, 7, 3];
        let mut g = Graph::new();
        let q = g.constant(qt.clone());
        let (l, p, targets) = lm.teacher_forced(&mut g, &store, q, &[5], &[caption.clone()]).unwrap();
        let whole = sequence_log_prob(g.value(l), &targets);
        let mut stepwise = 0.0;
        let full: Vec<u32> = caption.iter().copied().chain([EOS]).collect();
        for i in 0..full.len() {
            let prefix: Vec<u32> = core::iter::once(BOS).chain(caption[..i].iter().copied()).collect();
            let mut g = Graph::new();
            let q = g.constant(qt.clone());
            let (l, pk) = lm.forward(&mut g, &store, q, &[5], &[prefix]).unwrap();
            let last = pk.lens[0] - 1;
            let probs = softmax_rows(g.value(l).row(last), 12);
            stepwise += libm::log(probs[full[i] as usize]);
        }
        assert_eq!(p.caption_rows(0).len(), full.len());
        assert_eq!(whole, stepwise);
    }

    #[test]
    fn single_token_vocabulary_has_zero_loss() {
        let (store, lm) = tiny_lm(1, 7);
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[1, 8]));
        let (l, p) = lm.forward(&mut g, &store, q, &[0], &[vec![0, 0]]).unwrap();
        let loss = g.cross_entropy(l, &vec![0; p.rows()]).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
    }

    #[test]
    fn uniform_logits_give_log_v() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[3, 7]));
        let loss = lm_loss(&mut g, l, &[4, PAD, 5]).unwrap();
        assert!((g.value(loss).item() - libm::log(7.0)).abs() < 1e-12);
        assert!(lm_loss(&mut g, l, &[4, 5]).is_err());
    }

    #[test]
    fn three_token_fixture() {
        // logits rows [0, ln 2, 0], [0, 0, 1], [0, 2, 0] with targets 1, 2, 1:
        // −(ln(2/4) + ln(e/(e+2)) + ln(e²/(e²+2))) / 3
        let mut g = Graph::new();
        let ln2 = libm::log(2.0);
        let l = g.constant(Tensor::from_rows(&[&[0.0, ln2, 0.0], &[0.0, 0.0, 1.0], &[0.0, 2.0, 0.0]]).unwrap());
        let loss = lm_loss(&mut g, l, &[1, 2, 1]).unwrap();
        let e = core::f64::consts::E;
        let want = -(libm::log(0.5) + libm::log(e / (e + 2.0)) + libm::log(e * e / (e * e + 2.0))) / 3.0;
        assert!((g.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn greedy_decoding_is_deterministic_and_bounded() {
        let (store, lm) = tiny_lm(12, 8);
        let q = normal_tensor(&mut ChaCha8Rng::seed_from_u64(9), &[3, 8], 1.0);
        let a = lm.generate(&store, &q, &[4], 10).unwrap();
        assert_eq!(a, lm.generate(&store, &q, &[4], 10).unwrap());
        assert!(a.iter().all(|c| c.len() <= 10));
    }

    #[test]
    fn qformer_retains_all_states_and_reads_bev() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cfg = QFormerConfig {
            blocks: 3,
            bla_layer: 2,
            d_model: 8,
            heads: 2,
            ffn_dim: 8,
        };
        let qf = QFormer::new(&mut store, &mut rng, &cfg, 6).unwrap();
        let d0 = normal_tensor(&mut rng, &[2, 8], 1.0);
        let bev = normal_tensor(&mut rng, &[5, 6], 1.0);
        let run = |bev: Tensor| {
            let mut g = Graph::new();
            let d = g.constant(d0.clone());
            let b = g.constant(bev);
            let s = qf.forward(&mut g, &store, d, b).unwrap();
            assert_eq!(s.states.len(), 4);
            g.value(s.last()).clone()
        };
        assert_ne!(run(bev.clone()), run(Tensor::zeros(&[5, 6])));
    }

    #[test]
    fn qformer_block_one_gradients() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = QFormerConfig {
            blocks: 2,
            bla_layer: 1,
            d_model: 4,
            heads: 2,
            ffn_dim: 4,
        };
        let qf = QFormer::new(&mut store, &mut rng, &cfg, 3).unwrap();
        let d0 = normal_tensor(&mut rng, &[2, 4], 1.0);
        let bev = normal_tensor(&mut rng, &[3, 3], 1.0);
        let id = qf.blocks[0].cross_attn.query.weight;
        let err = max_grad_error(
            |g, v| {
                g.bind_param(id, v[0]);
                let d = g.constant(d0.clone());
                let b = g.constant(bev.clone());
                let state = qf.forward(g, &store, d, b)?;
                let t = g.tanh(state.last())?;
                g.sum(t)
            },
            &[store.get(id).clone()],
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn projection_shape_and_zero_weights() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let proj = Mlp::new(&mut store, &mut rng, "p", 4, 6, 6).unwrap();
        for (id, _, t) in store.clone().iter() {
            *store.get_mut(id) = Tensor::zeros(t.shape());
        }
        let mut g = Graph::new();
        let x = g.constant(normal_tensor(&mut rng, &[3, 4], 1.0));
        let y = proj.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[3, 6]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
}
