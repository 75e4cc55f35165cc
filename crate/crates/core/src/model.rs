//! The jointly trained detection and captioning model, its weighted loss and
//! inference.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{
    bla_loss, dca_loss, pool_to_prompt_space, AlignmentConfig, AlignmentHeads, TextEncoder, TEXT_ENCODER_SEED,
};
use crate::autograd::{Graph, ParamStore, Tensor, Var};
use crate::captioning::{lm_loss, CaptionBranch, LmConfig, QFormerConfig};
use crate::error::{Error, Result};
use crate::metrics::{BoxPolygon, DetBox};
use crate::perception::{
    decode_box, detection_loss, hungarian_match, predictions, top_queries, CostWeights, DetLossWeights, Perception,
    PerceptionConfig, BOX_DIM,
};
use crate::scenegen::{Scene, Vocabulary};

/// Weights of the four training terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_bla: f64,
    pub lambda_dca: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta: 1.0,
            lambda_bla: 1.0,
            lambda_dca: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.lambda_bla, self.lambda_dca];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument(alloc::format!(
                "loss weights must be finite and non-negative, got {all:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub perception: PerceptionConfig,
    pub qformer: QFormerConfig,
    pub lm: LmConfig,
    pub alignment: AlignmentConfig,
    /// Instruction tokens placed between the object query and the caption.
    pub prompt: Vec<u32>,
    /// Queries captioned at inference, most confident first.
    pub caption_queries: usize,
    pub text_seed: u64,
}

impl ModelConfig {
    /// Default sizes for `vocab`.
    pub fn new(vocab: &Vocabulary) -> Self {
        Self {
            perception: PerceptionConfig::default(),
            qformer: QFormerConfig::default(),
            lm: LmConfig::new(vocab.len()),
            alignment: AlignmentConfig::default(),
            prompt: vocab.prompt_ids(),
            caption_queries: 8,
            text_seed: TEXT_ENCODER_SEED,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.perception.validate()?;
        self.qformer.validate()?;
        if self.qformer.d_model != self.perception.d_model {
            return Err(Error::InvalidArgument(alloc::format!(
                "query transformer width {} differs from detector width {}",
                self.qformer.d_model,
                self.perception.d_model
            )));
        }
        if self.caption_queries == 0 || self.caption_queries > self.perception.queries {
            return Err(Error::InvalidArgument(alloc::format!(
                "caption_queries must lie in 1..={}",
                self.perception.queries
            )));
        }
        if let Some(&bad) = self.prompt.iter().find(|&&t| t as usize >= self.lm.vocab) {
            return Err(Error::UnknownToken(alloc::format!("prompt id {bad}")));
        }
        if self.alignment.tau <= 0.0 || self.alignment.prompts == 0 {
            return Err(Error::InvalidArgument("alignment needs tau > 0 and a non-empty prompt bank".into()));
        }
        Ok(())
    }
}

/// Options of one loss evaluation that do not change the architecture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub weights: LossWeights,
    pub det: DetLossWeights,
    pub cost: CostWeights,
    /// Text alignment recomputes its query-transformer prefix from a
    /// detached `d₀`, keeping its gradient out of the detector.
    pub bla_detach_d0: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            det: DetLossWeights::default(),
            cost: CostWeights::default(),
            bla_detach_d0: false,
        }
    }
}

/// Graph handles of the loss terms. Alignment terms are present whenever
/// the model carries alignment heads and the batch has matched objects,
/// whether or not their weight is positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub det: Var,
    pub lm: Var,
    pub bla: Option<Var>,
    pub dca: Option<Var>,
    pub total: Var,
}

/// Plain values of [`LossTerms`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub det: f64,
    pub lm: f64,
    pub bla: Option<f64>,
    pub dca: Option<f64>,
    pub total: f64,
}

impl LossValues {
    pub fn read(g: &Graph, t: &LossTerms) -> Self {
        let v = |x: Var| g.value(x).item();
        Self {
            det: v(t.det),
            lm: v(t.lm),
            bla: t.bla.map(v),
            dca: t.dca.map(v),
            total: v(t.total),
        }
    }

    /// The weighted sum, evaluated in the same order as the graph.
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        let mut total = w.alpha * self.det + w.beta * self.lm;
        if let Some(b) = self.bla.filter(|_| w.lambda_bla > 0.0) {
            total += w.lambda_bla * b;
        }
        if let Some(d) = self.dca.filter(|_| w.lambda_dca > 0.0) {
            total += w.lambda_dca * d;
        }
        total
    }
}

/// One detected and captioned object.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionedBox {
    pub query: usize,
    pub detection: DetBox,
    pub caption: Vec<u32>,
}

/// Inference output for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePrediction {
    pub scene: u64,
    /// Every query as a scored detection.
    pub detections: Vec<DetBox>,
    pub captions: Vec<CaptionedBox>,
}

impl CaptionedBox {
    pub fn footprint(&self) -> Result<BoxPolygon> {
        let d = &self.detection;
        BoxPolygon::with_height(d.x, d.y, d.z, d.w, d.l, d.h, d.yaw)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtaModel {
    pub cfg: ModelConfig,
    pub perception: Perception,
    pub caption: CaptionBranch,
    /// Absent in the plain two-task model.
    pub alignment: Option<AlignmentHeads>,
}

impl MtaModel {
    /// Builds the model and its parameters. Detector and captioner weights
    /// come from `seed`; alignment weights from a separate stream of the
    /// same seed, so models with and without alignment share every common
    /// parameter bit for bit.
    pub fn new(cfg: ModelConfig, seed: u64, with_alignment: bool) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let perception = Perception::new(&mut store, &mut rng, cfg.perception.clone())?;
        let caption = CaptionBranch::new(
            &mut store,
            &mut rng,
            &cfg.qformer,
            cfg.lm.clone(),
            cfg.perception.d_model,
        )?;
        let alignment = if with_alignment {
            let mut arng = ChaCha8Rng::seed_from_u64(seed);
            arng.set_stream(1);
            Some(AlignmentHeads::new(
                &mut store,
                &mut arng,
                &cfg.alignment,
                cfg.qformer.d_model,
                cfg.perception.num_classes + 1,
                BOX_DIM,
                cfg.lm.vocab,
            )?)
        } else {
            None
        };
        Ok((
            Self {
                cfg,
                perception,
                caption,
                alignment,
            },
            store,
        ))
    }

    /// The frozen text encoder matching this configuration.
    pub fn text_encoder(&self) -> Result<TextEncoder> {
        TextEncoder::new(self.cfg.lm.vocab, self.cfg.alignment.dim, self.cfg.text_seed)
    }

    /// Weighted training loss over a batch of scenes. `text[s]` holds the
    /// text embeddings of the captions of `scenes[s]`, one row per object
    /// (`None` for a scene without objects); it is only read when the model
    /// has alignment heads.
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        scenes: &[&Scene],
        text: &[Option<&Tensor>],
        opts: &LossOptions,
    ) -> Result<LossTerms> {
        if scenes.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        if self.alignment.is_some() && text.len() != scenes.len() {
            return Err(Error::InvalidArgument(alloc::format!(
                "{} scenes but {} text target sets",
                scenes.len(),
                text.len()
            )));
        }
        let max_len = self.cfg.lm.max_len;
        let mut det_sum: Option<Var> = None;
        let mut d0_parts = Vec::new();
        let mut bev_parts = Vec::new();
        let mut captions = Vec::new();
        let mut text_rows: Vec<f64> = Vec::new();
        let mut det_rows = Vec::new();
        for (s, scene) in scenes.iter().enumerate() {
            let bev = self.perception.encode(g, store, &scene.raster)?;
            let out = self.perception.detect(g, store, bev)?;
            let matching = hungarian_match(
                g.value(out.class_logits),
                g.value(out.boxes),
                &scene.objects,
                opts.cost,
            )?;
            let l = detection_loss(g, &out, &scene.objects, &matching, opts.det)?;
            det_sum = Some(match det_sum {
                Some(acc) => g.add(acc, l)?,
                None => l,
            });
            if scene.objects.is_empty() {
                continue;
            }
            for o in &scene.objects {
                if o.caption.len() + 1 > max_len {
                    return Err(Error::SequenceTooLong {
                        len: o.caption.len() + 1,
                        max: max_len,
                    });
                }
                captions.push(o.caption.clone());
            }
            let d0 = g.gather_rows(out.hidden, &matching.query)?;
            d0_parts.push(d0);
            bev_parts.push(bev);
            if self.alignment.is_some() {
                let t = text[s].ok_or(Error::Empty("text targets"))?;
                if t.rows() != scene.objects.len() {
                    return Err(Error::InvalidArgument(alloc::format!(
                        "scene {} has {} objects but {} text targets",
                        scene.id,
                        scene.objects.len(),
                        t.rows()
                    )));
                }
                text_rows.extend_from_slice(t.data());
                let cls = g.gather_rows(out.class_logits, &matching.query)?;
                let bx = g.gather_rows(out.boxes, &matching.query)?;
                det_rows.push((cls, bx));
            }
        }
        let det_sum = det_sum.expect("non-empty batch");
        let det = g.scale(det_sum, 1.0 / scenes.len() as f64)?;

        let w = opts.weights;
        let a = g.scale(det, w.alpha)?;
        if captions.is_empty() {
            let lm = g.constant(Tensor::scalar(0.0));
            let b = g.scale(lm, w.beta)?;
            let total = g.add(a, b)?;
            log::warn!("batch without objects: caption and alignment terms are zero");
            return Ok(LossTerms {
                det,
                lm,
                bla: None,
                dca: None,
                total,
            });
        }

        // Query transformer per scene, each attending its own BEV sequence.
        let blocks = self.cfg.qformer.blocks;
        let ell = self.cfg.qformer.bla_layer;
        let mut last_parts = Vec::with_capacity(d0_parts.len());
        let mut ell_parts = Vec::with_capacity(d0_parts.len());
        for (&d0, &bev) in d0_parts.iter().zip(&bev_parts) {
            let states = self.caption.qformer.run_blocks(g, store, d0, bev, 0..blocks)?;
            last_parts.push(states[blocks - 1]);
            if self.alignment.is_some() {
                let d_ell = if opts.bla_detach_d0 {
                    let free = g.detach(d0);
                    let again = self.caption.qformer.run_blocks(g, store, free, bev, 0..ell)?;
                    again[ell - 1]
                } else {
                    states[ell - 1]
                };
                ell_parts.push(d_ell);
            }
        }
        let d_last = concat_rows(g, &last_parts)?;
        let q = self.caption.project_queries(g, store, d_last)?;
        let (logits, packing, targets) =
            self.caption.lm.teacher_forced(g, store, q, &self.cfg.prompt, &captions)?;
        let lm = lm_loss(g, logits, &targets)?;
        let b = g.scale(lm, w.beta)?;
        let mut total = g.add(a, b)?;

        let (mut bla, mut dca) = (None, None);
        if let Some(heads) = &self.alignment {
            let acfg = &self.cfg.alignment;
            let d_ell = concat_rows(g, &ell_parts)?;
            let target = g.constant(Tensor::new(&[captions.len(), acfg.dim], text_rows)?);
            let l = bla_loss(g, store, heads, d_ell, target, acfg.bla_objective, acfg.tau)?;
            if w.lambda_bla > 0.0 {
                let t = g.scale(l, w.lambda_bla)?;
                total = g.add(total, t)?;
            }
            bla = Some(l);

            let cls = concat_rows(g, &det_rows.iter().map(|p| p.0).collect::<Vec<_>>())?;
            let bx = concat_rows(g, &det_rows.iter().map(|p| p.1).collect::<Vec<_>>())?;
            let x_det = heads.project_detection(g, store, cls, bx)?;
            let spans: Vec<_> = (0..captions.len()).map(|s| packing.caption_rows(s)).collect();
            let x_cap = heads.project_caption_spans(g, store, logits, &targets, &spans)?;
            let bank = g.param(store, heads.bank);
            let (p_det, _) = pool_to_prompt_space(g, x_det, bank)?;
            let (p_cap, _) = pool_to_prompt_space(g, x_cap, bank)?;
            let l = dca_loss(g, p_det, p_cap, acfg.dca_objective, acfg.tau)?;
            if w.lambda_dca > 0.0 {
                let t = g.scale(l, w.lambda_dca)?;
                total = g.add(total, t)?;
            }
            dca = Some(l);
        }
        Ok(LossTerms {
            det,
            lm,
            bla,
            dca,
            total,
        })
    }

    /// Detection of every query plus greedy captions for the most confident
    /// ones.
    pub fn predict(&self, store: &ParamStore, scene: &Scene) -> Result<ScenePrediction> {
        let mut g = Graph::new();
        let bev = self.perception.encode(&mut g, store, &scene.raster)?;
        let out = self.perception.detect(&mut g, store, bev)?;
        let class_logits = g.value(out.class_logits).clone();
        let boxes = g.value(out.boxes).clone();
        let detections = predictions(scene.id, &class_logits, &boxes, g.value(out.attr_logits));
        let chosen = top_queries(&class_logits, self.cfg.caption_queries);
        let d0 = g.gather_rows(out.hidden, &chosen)?;
        let state = self.caption.qformer.forward(&mut g, store, d0, bev)?;
        let q = self.caption.project_queries(&mut g, store, state.last())?;
        let q = g.value(q).clone();
        let texts = self
            .caption
            .lm
            .generate(store, &q, &self.cfg.prompt, self.cfg.lm.max_len)?;
        let captions = chosen
            .iter()
            .zip(texts)
            .map(|(&query, caption)| CaptionedBox {
                query,
                detection: detections[query].clone(),
                caption,
            })
            .collect();
        Ok(ScenePrediction {
            scene: scene.id,
            detections,
            captions,
        })
    }

    /// Decoded box of every query.
    pub fn decoded_boxes(&self, store: &ParamStore, scene: &Scene) -> Result<Vec<crate::perception::DecodedBox>> {
        let mut g = Graph::new();
        let bev = self.perception.encode(&mut g, store, &scene.raster)?;
        let out = self.perception.detect(&mut g, store, bev)?;
        let b = g.value(out.boxes);
        Ok((0..b.rows()).map(|i| decode_box(b.row(i))).collect())
    }
}

fn concat_rows(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    match parts {
        [] => Err(Error::Empty("row blocks")),
        [one] => Ok(*one),
        _ => g.concat(parts, 0),
    }
}

/// Text embeddings of every caption of a scene, one row per object.
pub fn scene_text_targets(encoder: &TextEncoder, scene: &Scene) -> Result<Option<Tensor>> {
    if scene.objects.is_empty() {
        return Ok(None);
    }
    let caps: Vec<Vec<u32>> = scene.objects.iter().map(|o| o.caption.clone()).collect();
    encoder.encode_all(&caps).map(Some)
}
