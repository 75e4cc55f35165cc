//! Detection branch: a patch encoder over the scene raster, a query decoder
//! with class, attribute and box heads, bipartite matching against ground
//! truth, and the set-prediction loss.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;

use crate::autograd::{softmax_rows, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::metrics::detection::DetBox;
use crate::nn::{Attention, LayerNorm, Linear, Mlp};
use crate::scenegen::{Attribute, ObjectAnnotation, Raster, NUM_CLASSES, RASTER_CHANNELS};

/// Width of the regression vector:
/// `[x/10, y/10, z/2, ln w, ln l, ln h, sin yaw, cos yaw, speed/5]`.
pub const BOX_DIM: usize = 9;

#[derive(Debug, Clone, PartialEq)]
pub struct PerceptionConfig {
    /// Raster cells per side.
    pub grid: usize,
    pub channels: usize,
    /// Raster cells per patch side; the feature grid is `grid / patch`.
    pub patch: usize,
    /// Sine/cosine frequencies per coordinate in the position encoding.
    pub fourier_freqs: usize,
    pub d_model: usize,
    pub queries: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub num_classes: usize,
    pub num_attributes: usize,
    /// Half-extent of the raster in meters.
    pub range: f64,
    /// Width in meters of the Gaussian prior that centers each query's
    /// cross-attention on its reference point.
    pub locality: f64,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            grid: 64,
            channels: RASTER_CHANNELS,
            patch: 4,
            fourier_freqs: 4,
            d_model: 64,
            queries: 32,
            decoder_layers: 2,
            heads: 4,
            ffn_dim: 128,
            num_classes: NUM_CLASSES,
            num_attributes: Attribute::COUNT,
            range: 51.2,
            locality: 6.0,
        }
    }
}

impl PerceptionConfig {
    pub fn feature_grid(&self) -> usize {
        self.grid / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.feature_grid() * self.feature_grid()
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * self.channels + 4 * self.fourier_freqs
    }

    /// Index of the no-object logit.
    pub fn no_object(&self) -> usize {
        self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.grid % self.patch != 0 {
            return Err(Error::InvalidArgument(format!(
                "patch {} does not tile a {} grid",
                self.patch, self.grid
            )));
        }
        if self.queries == 0 || self.d_model == 0 || self.decoder_layers == 0 {
            return Err(Error::InvalidArgument("empty detection decoder".into()));
        }
        if !(self.range > 0.0 && self.locality > 0.0) {
            return Err(Error::InvalidArgument("range and locality must be positive".into()));
        }
        Ok(())
    }
}

/// Flattens the raster into one row per patch: the patch's cells and
/// channels, followed by a Fourier encoding of the patch center.
pub fn patch_features(raster: &Raster, cfg: &PerceptionConfig) -> Result<Tensor> {
    if raster.grid != cfg.grid || raster.channels != cfg.channels {
        return Err(Error::ShapeMismatch {
            op: "patch_features",
            lhs: vec![raster.grid, raster.grid, raster.channels],
            rhs: vec![cfg.grid, cfg.grid, cfg.channels],
        });
    }
    let fg = cfg.feature_grid();
    let mut data = Vec::with_capacity(cfg.tokens() * cfg.token_dim());
    for pi in 0..fg {
        for pj in 0..fg {
            for a in 0..cfg.patch {
                for b in 0..cfg.patch {
                    for c in 0..cfg.channels {
                        data.push(raster.at(pi * cfg.patch + a, pj * cfg.patch + b, c));
                    }
                }
            }
            let cx = 2.0 * (pi as f64 + 0.5) / fg as f64 - 1.0;
            let cy = 2.0 * (pj as f64 + 0.5) / fg as f64 - 1.0;
            for f in 0..cfg.fourier_freqs {
                let w = PI * (1u64 << f) as f64;
                data.push(libm::sin(w * cx));
                data.push(libm::cos(w * cx));
                data.push(libm::sin(w * cy));
                data.push(libm::cos(w * cy));
            }
        }
    }
    Tensor::new(&[cfg.tokens(), cfg.token_dim()], data)
}

/// Per-patch two-layer encoder producing the BEV feature sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BevEncoder {
    pub embed: Linear,
    pub out: Linear,
}

impl BevEncoder {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, patches: Var) -> Result<Var> {
        let h = self.embed.forward(g, store, patches)?;
        let h = g.gelu(h)?;
        self.out.forward(g, store, h)
    }
}

/// Scale applied to the initial output projections of every sublayer.
pub const RESIDUAL_INIT: f64 = 0.1;

/// Post-norm transformer block: self-attention, cross-attention, feed-forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrossBlock {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub cross_attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
    pub norm3: LayerNorm,
}

impl CrossBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        context_dim: usize,
        heads: usize,
        ffn_dim: usize,
    ) -> Result<Self> {
        let block = Self {
            self_attn: Attention::new(store, rng, &format!("{name}.self"), dim, dim, heads)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            cross_attn: Attention::new(store, rng, &format!("{name}.cross"), dim, context_dim, heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            ffn: Mlp::new(store, rng, &format!("{name}.ffn"), dim, ffn_dim, dim)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), dim)?,
        };
        // Near-identity start: deep post-norm stacks otherwise pull distinct
        // query rows together at initialization.
        for w in [block.self_attn.out.weight, block.cross_attn.out.weight, block.ffn.output.weight] {
            let t = store.get(w).map(|v| v * RESIDUAL_INIT);
            *store.get_mut(w) = t;
        }
        Ok(block)
    }

    /// `cross_bias` is added to the cross-attention scores of every head.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        context: Var,
        cross_bias: Option<Var>,
    ) -> Result<Var> {
        let s = self.self_attn.forward(g, store, x, x, None)?;
        let x = self.norm1.residual(g, store, x, s)?;
        let c = self.cross_attn.forward(g, store, x, context, cross_bias)?;
        let x = self.norm2.residual(g, store, x, c)?;
        let f = self.ffn.forward(g, store, x)?;
        self.norm3.residual(g, store, x, f)
    }
}

/// Graph handles of one detection pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectionOutput {
    /// `[Q × (K + 1)]`, last column is no-object.
    pub class_logits: Var,
    /// `[Q × 9]` normalized boxes.
    pub boxes: Var,
    /// `[Q × attributes]`
    pub attr_logits: Var,
    /// Final query states `d₀`, `[Q × D]`.
    pub hidden: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perception {
    pub cfg: PerceptionConfig,
    pub encoder: BevEncoder,
    pub query: ParamId,
    /// Maps a query embedding to its reference point, in the box
    /// regression's `(x/10, y/10)` units.
    pub reference: Linear,
    /// Query and key maps of the single-head attention whose expected
    /// patch center is the coarse box center.
    pub pointer_q: Linear,
    pub pointer_k: Linear,
    pub layers: Vec<CrossBlock>,
    pub class_head: Linear,
    pub attr_head: Linear,
    pub box_head: Mlp,
}

impl Perception {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: PerceptionConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let encoder = BevEncoder {
            embed: Linear::new(store, rng, "bev.embed", cfg.token_dim(), d)?,
            out: Linear::new(store, rng, "bev.out", d, d)?,
        };
        let query = store.add(
            "det.query",
            crate::autograd::normal_tensor(rng, &[cfg.queries, d], 1.0),
        )?;
        // Reference points start spread over most of the raster.
        let spread = 0.35 * cfg.range / 10.0;
        let reference = Linear::with_std(store, rng, "det.reference", d, 2, spread / libm::sqrt(d as f64))?;
        let layers = (0..cfg.decoder_layers)
            .map(|i| CrossBlock::new(store, rng, &format!("det.layer{i}"), d, d, cfg.heads, cfg.ffn_dim))
            .collect::<Result<Vec<_>>>()?;
        let pointer_q = Linear::new(store, rng, "det.pointer.q", d, d)?;
        let pointer_k = Linear::new(store, rng, "det.pointer.k", d, d)?;
        let box_head = Mlp::new(store, rng, "det.box", d, d, BOX_DIM)?;
        let t = store.get(box_head.output.weight).map(|v| v * RESIDUAL_INIT);
        *store.get_mut(box_head.output.weight) = t;
        Ok(Self {
            encoder,
            query,
            reference,
            pointer_q,
            pointer_k,
            layers,
            class_head: Linear::new(store, rng, "det.class", d, cfg.num_classes + 1)?,
            attr_head: Linear::new(store, rng, "det.attr", d, cfg.num_attributes)?,
            box_head,
            cfg,
        })
    }

    /// BEV feature sequence `[tokens × D]` of one raster.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, raster: &Raster) -> Result<Var> {
        let x = g.constant(patch_features(raster, &self.cfg)?);
        self.encoder.forward(g, store, x)
    }

    /// Decodes the learned queries against `bev`.
    pub fn detect(&self, g: &mut Graph, store: &ParamStore, bev: Var) -> Result<DetectionOutput> {
        let q = g.param(store, self.query);
        self.detect_with_queries(g, store, bev, q)
    }

    /// Decoding with caller-supplied query embeddings.
    pub fn detect_with_queries(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        bev: Var,
        queries: Var,
    ) -> Result<DetectionOutput> {
        let refs = self.reference.forward(g, store, queries)?;
        let bias = self.locality_bias(g, refs)?;
        let mut x = queries;
        for layer in &self.layers {
            x = layer.forward(g, store, x, bev, Some(bias))?;
        }
        // Coarse centers: attention-weighted patch centers.
        let pq = self.pointer_q.forward(g, store, x)?;
        let pk = self.pointer_k.forward(g, store, bev)?;
        let scores = g.matmul_nt(pq, pk)?;
        let scores = g.scale(scores, 1.0 / libm::sqrt(self.cfg.d_model as f64))?;
        let scores = g.add(scores, bias)?;
        let weights = g.softmax(scores)?;
        let pos = g.constant(self.token_positions());
        let centers = g.matmul(weights, pos)?;
        let q = g.value(queries).rows();
        let pad = g.constant(Tensor::zeros(&[q, BOX_DIM - 2]));
        let anchor = g.concat(&[centers, pad], 1)?;
        let delta = self.box_head.forward(g, store, x)?;
        Ok(DetectionOutput {
            class_logits: self.class_head.forward(g, store, x)?,
            boxes: g.add(delta, anchor)?,
            attr_logits: self.attr_head.forward(g, store, x)?,
            hidden: x,
        })
    }
}

impl Perception {
    /// Patch centers in the box regression's `(x/10, y/10)` units,
    /// `[tokens × 2]`, in [`patch_features`] order.
    pub fn token_positions(&self) -> Tensor {
        let fg = self.cfg.feature_grid();
        let mut data = Vec::with_capacity(2 * fg * fg);
        for pi in 0..fg {
            for pj in 0..fg {
                for p in [pi, pj] {
                    let c = 2.0 * (p as f64 + 0.5) / fg as f64 - 1.0;
                    data.push(c * self.cfg.range / 10.0);
                }
            }
        }
        Tensor::new(&[fg * fg, 2], data).expect("nonempty grid")
    }

    /// `[Q × tokens]` scores `−|r − p|² / (2σ²)` between reference points
    /// and patch centers, σ being the locality width.
    pub fn locality_bias(&self, g: &mut Graph, refs: Var) -> Result<Var> {
        let pos = self.token_positions();
        let sigma = self.cfg.locality / 10.0;
        let c = -1.0 / (2.0 * sigma * sigma);
        let (q, t) = (g.value(refs).rows(), pos.rows());
        let pos_sq: Vec<f64> = (0..t).map(|i| pos.row(i).iter().map(|v| v * v).sum()).collect();
        let pos = g.constant(pos);
        let cross = g.matmul_nt(refs, pos)?;
        let cross = g.scale(cross, -2.0)?;
        let sq = g.mul(refs, refs)?;
        let ones_in = g.constant(Tensor::ones(&[2, 1]));
        let ones_out = g.constant(Tensor::ones(&[1, t]));
        let ref_sq = g.matmul(sq, ones_in)?;
        let ref_sq = g.matmul(ref_sq, ones_out)?;
        let d = g.add(cross, ref_sq)?;
        let pos_sq = g.constant(Tensor::new(&[t], pos_sq)?);
        let d = g.add_bias(d, pos_sq)?;
        debug_assert_eq!(g.shape(d), &[q, t]);
        g.scale(d, c)
    }
}

/// Regression target of an annotation.
pub fn encode_box(o: &ObjectAnnotation) -> [f64; BOX_DIM] {
    [
        o.x / 10.0,
        o.y / 10.0,
        o.z / 2.0,
        libm::log(o.w),
        libm::log(o.l),
        libm::log(o.h),
        libm::sin(o.yaw),
        libm::cos(o.yaw),
        o.speed() / 5.0,
    ]
}

/// Box in metric units recovered from a regression vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedBox {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
}

pub fn decode_box(b: &[f64]) -> DecodedBox {
    let yaw = libm::atan2(b[6], b[7]);
    let speed = 5.0 * b[8];
    DecodedBox {
        x: 10.0 * b[0],
        y: 10.0 * b[1],
        z: 2.0 * b[2],
        w: libm::exp(b[3]),
        l: libm::exp(b[4]),
        h: libm::exp(b[5]),
        yaw,
        vx: speed * libm::cos(yaw),
        vy: speed * libm::sin(yaw),
    }
}

/// Weights of the matching cost `class · (−log p) + box · L1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostWeights {
    pub class: f64,
    pub bbox: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { class: 1.0, bbox: 5.0 }
    }
}

/// Ground-truth-to-query assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// `query[j]` is the query assigned to ground-truth object `j`.
    pub query: Vec<usize>,
    /// Cost of each assigned pair.
    pub costs: Vec<f64>,
}

impl Matching {
    pub fn total_cost(&self) -> f64 {
        self.costs.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.query.len()
    }

    pub fn is_empty(&self) -> bool {
        self.query.is_empty()
    }

    /// `(gt, query)` pairs sorted by query index.
    pub fn by_query(&self) -> Vec<(usize, usize)> {
        let mut pairs: Vec<(usize, usize)> = self.query.iter().copied().enumerate().collect();
        pairs.sort_by_key(|&(_, q)| q);
        pairs
    }
}

/// Minimum-cost assignment of every row to a distinct column of a
/// `rows × cols` matrix, `rows ≤ cols` (shortest augmenting paths with
/// potentials). Returns the column of each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::InvalidArgument("ragged cost matrix".into()));
    }
    if n > m {
        return Err(Error::TooManyObjects { gts: n, queries: m });
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite { op: "hungarian" });
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    Ok(out)
}

/// `[gts × Q]` matching costs from detached head outputs.
pub fn cost_matrix(
    class_logits: &Tensor,
    boxes: &Tensor,
    gts: &[ObjectAnnotation],
    weights: CostWeights,
) -> Vec<Vec<f64>> {
    let q = class_logits.rows();
    let probs = softmax_rows(class_logits.data(), class_logits.last_dim());
    let k = class_logits.last_dim();
    gts.iter()
        .map(|gt| {
            let target = encode_box(gt);
            (0..q)
                .map(|i| {
                    let nll = -libm::log(probs[i * k + gt.class].max(1e-300));
                    let l1: f64 = boxes.row(i).iter().zip(&target).map(|(a, b)| (a - b).abs()).sum();
                    weights.class * nll + weights.bbox * l1
                })
                .collect()
        })
        .collect()
}

/// Optimal assignment of ground-truth objects to queries.
pub fn hungarian_match(
    class_logits: &Tensor,
    boxes: &Tensor,
    gts: &[ObjectAnnotation],
    weights: CostWeights,
) -> Result<Matching> {
    if gts.len() > class_logits.rows() {
        return Err(Error::TooManyObjects {
            gts: gts.len(),
            queries: class_logits.rows(),
        });
    }
    let cost = cost_matrix(class_logits, boxes, gts, weights);
    let query = hungarian(&cost)?;
    let costs = query.iter().enumerate().map(|(j, &q)| cost[j][q]).collect();
    Ok(Matching { query, costs })
}

/// Weights of the set-prediction loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetLossWeights {
    pub class: f64,
    pub bbox: f64,
    pub attribute: f64,
    /// Relative weight of queries labelled no-object in the class term.
    pub no_object: f64,
}

impl Default for DetLossWeights {
    fn default() -> Self {
        Self {
            class: 1.0,
            bbox: 1.0,
            attribute: 1.0,
            no_object: 0.1,
        }
    }
}

/// Class cross-entropy over all queries plus, over matched pairs, the
/// per-object L1 box error (summed over the nine components) and attribute
/// cross-entropy.
pub fn detection_loss(
    g: &mut Graph,
    out: &DetectionOutput,
    gts: &[ObjectAnnotation],
    matching: &Matching,
    weights: DetLossWeights,
) -> Result<Var> {
    let q = g.value(out.class_logits).rows();
    let no_object = g.value(out.class_logits).last_dim() - 1;
    let mut targets = vec![no_object; q];
    let mut row_weights = vec![weights.no_object; q];
    for (j, &qi) in matching.query.iter().enumerate() {
        targets[qi] = gts[j].class;
        row_weights[qi] = 1.0;
    }
    let class_loss = g.weighted_cross_entropy(out.class_logits, &targets, &row_weights)?;
    let mut loss = g.scale(class_loss, weights.class)?;
    if matching.is_empty() {
        return Ok(loss);
    }
    let pairs = matching.by_query();
    let rows: Vec<usize> = pairs.iter().map(|&(_, qi)| qi).collect();
    let mut target_data = Vec::with_capacity(rows.len() * BOX_DIM);
    for &(j, _) in &pairs {
        target_data.extend_from_slice(&encode_box(&gts[j]));
    }
    let pred = g.gather_rows(out.boxes, &rows)?;
    let target = g.constant(Tensor::new(&[rows.len(), BOX_DIM], target_data)?);
    let l1 = g.l1(pred, target)?;
    let box_loss = g.scale(l1, weights.bbox * BOX_DIM as f64)?;
    loss = g.add(loss, box_loss)?;
    let attr_logits = g.gather_rows(out.attr_logits, &rows)?;
    let attr_targets: Vec<usize> = pairs.iter().map(|&(j, _)| gts[j].attribute.index()).collect();
    let attr = g.cross_entropy(attr_logits, &attr_targets)?;
    let attr = g.scale(attr, weights.attribute)?;
    g.add(loss, attr)
}

/// Per-query class confidence: the highest non-background probability and
/// its class.
pub fn query_confidences(class_logits: &Tensor) -> Vec<(usize, f64)> {
    let k = class_logits.last_dim();
    let probs = softmax_rows(class_logits.data(), k);
    probs
        .chunks_exact(k)
        .map(|row| {
            let mut best = (0, f64::NEG_INFINITY);
            for (c, &p) in row[..k - 1].iter().enumerate() {
                if p > best.1 {
                    best = (c, p);
                }
            }
            best
        })
        .collect()
}

/// Indices of the `k` most confident queries, most confident first.
pub fn top_queries(class_logits: &Tensor, k: usize) -> Vec<usize> {
    let conf = query_confidences(class_logits);
    let mut order: Vec<usize> = (0..conf.len()).collect();
    order.sort_by(|&a, &b| conf[b].1.total_cmp(&conf[a].1).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Every query as a scored detection.
pub fn predictions(scene: u64, class_logits: &Tensor, boxes: &Tensor, attr_logits: &Tensor) -> Vec<DetBox> {
    let conf = query_confidences(class_logits);
    conf.iter()
        .enumerate()
        .map(|(i, &(class, score))| {
            let b = decode_box(boxes.row(i));
            let attribute = argmax(attr_logits.row(i));
            DetBox {
                scene,
                class,
                score,
                x: b.x,
                y: b.y,
                z: b.z,
                w: b.w,
                l: b.l,
                h: b.h,
                yaw: b.yaw,
                vx: b.vx,
                vy: b.vy,
                attribute,
            }
        })
        .collect()
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Ground-truth annotation as a detection record.
pub fn ground_truth_box(scene: u64, o: &ObjectAnnotation) -> DetBox {
    DetBox {
        scene,
        class: o.class,
        score: 1.0,
        x: o.x,
        y: o.y,
        z: o.z,
        w: o.w,
        l: o.l,
        h: o.h,
        yaw: o.yaw,
        vx: o.vx,
        vy: o.vy,
        attribute: o.attribute.index(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::normal_tensor;
    use crate::scenegen::{generate_scene, SceneConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> PerceptionConfig {
        PerceptionConfig {
            grid: 8,
            patch: 4,
            fourier_freqs: 1,
            d_model: 8,
            queries: 4,
            decoder_layers: 1,
            heads: 2,
            ffn_dim: 8,
            range: 6.4,
            ..Default::default()
        }
    }

    #[test]
    fn zero_raster_with_zero_output_layer_gives_zero_features() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Perception::new(&mut store, &mut rng, PerceptionConfig::default()).unwrap();
        let w = store.get(p.encoder.out.weight).shape().to_vec();
        store.set("bev.out.weight", Tensor::zeros(&w)).unwrap();
        let mut g = Graph::new();
        let bev = p.encode(&mut g, &store, &Raster::zeros(64, 6)).unwrap();
        assert_eq!(g.shape(bev), &[256, 64]);
        assert!(g.value(bev).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shapes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Perception::new(&mut store, &mut rng, PerceptionConfig::default()).unwrap();
        let scene = generate_scene(&SceneConfig::default(), 4).unwrap();
        let mut g = Graph::new();
        let bev = p.encode(&mut g, &store, &scene.raster).unwrap();
        let out = p.detect(&mut g, &store, bev).unwrap();
        assert_eq!(g.shape(out.class_logits), &[32, 11]);
        assert_eq!(g.shape(out.boxes), &[32, 9]);
        assert_eq!(g.shape(out.attr_logits), &[32, 4]);
        assert_eq!(g.shape(out.hidden), &[32, 64]);
    }

    #[test]
    fn permuting_queries_permutes_outputs() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = small_cfg();
        let p = Perception::new(&mut store, &mut rng, cfg.clone()).unwrap();
        let raster_cfg = SceneConfig {
            range: 6.4,
            grid: 8,
            placement_extent: 6.0,
            max_objects: 2,
            ..Default::default()
        };
        let scene = generate_scene(&raster_cfg, 1).unwrap();
        let queries = store.get(p.query).clone();
        let perm = [2usize, 0, 3, 1];
        let mut permuted = Vec::new();
        for &i in &perm {
            permuted.extend_from_slice(queries.row(i));
        }
        let permuted = Tensor::new(queries.shape(), permuted).unwrap();
        let run = |qt: Tensor| {
            let mut g = Graph::new();
            let bev = p.encode(&mut g, &store, &scene.raster).unwrap();
            let q = g.constant(qt);
            let out = p.detect_with_queries(&mut g, &store, bev, q).unwrap();
            g.value(out.class_logits).clone()
        };
        let a = run(queries);
        let b = run(permuted);
        for (r, &i) in perm.iter().enumerate() {
            for (x, y) in b.row(r).iter().zip(a.row(i)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn locality_bias_matches_direct_distances() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = small_cfg();
        let p = Perception::new(&mut store, &mut rng, cfg.clone()).unwrap();
        let refs = normal_tensor(&mut rng, &[3, 2], 0.5);
        let pos = p.token_positions();
        let mut g = Graph::new();
        let r = g.constant(refs.clone());
        let b = p.locality_bias(&mut g, r).unwrap();
        let sigma = cfg.locality / 10.0;
        for i in 0..3 {
            for t in 0..pos.rows() {
                let d2: f64 = (0..2).map(|k| (refs.row(i)[k] - pos.row(t)[k]).powi(2)).sum();
                let want = -d2 / (2.0 * sigma * sigma);
                assert!((g.value(b).row(i)[t] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoded_sizes_are_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let b = normal_tensor(&mut rng, &[BOX_DIM], 3.0);
            let d = decode_box(b.data());
            assert!(d.w > 0.0 && d.l > 0.0 && d.h > 0.0);
        }
    }

    #[test]
    fn hungarian_small_cases() {
        assert_eq!(hungarian(&[vec![3.0]]).unwrap(), vec![0]);
        let a = hungarian(&[vec![1.0, 10.0], vec![10.0, 1.0]]).unwrap();
        assert_eq!(a, vec![0, 1]);
        assert!(hungarian(&[vec![1.0], vec![2.0]]).is_err());
    }

    #[test]
    fn box_round_trip() {
        let scene = generate_scene(&SceneConfig::default(), 11).unwrap();
        for o in &scene.objects {
            let d = decode_box(&encode_box(o));
            assert!((d.x - o.x).abs() < 1e-9 && (d.w - o.w).abs() < 1e-9);
            assert!((d.yaw - o.yaw).abs() < 1e-9);
            assert!((d.vx - o.vx).abs() < 1e-9 && (d.vy - o.vy).abs() < 1e-9);
        }
    }
}
