//! Optimizer steps over scene batches and split evaluation.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Adam, Graph, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{
    detection_ap, frequency_bucketed_map, mean_tp_errors, ApConfig, CaptionScores, DenseItem, DenseScores, DetBox,
    IouKind, MetricsReport, REPORT_THRESHOLDS,
};
use crate::model::{scene_text_targets, LossOptions, LossValues, MtaModel, ScenePrediction};
use crate::perception::ground_truth_box;
use crate::scenegen::Scene;
use crate::alignment::TextEncoder;

/// Learning-rate multiplier over optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear warmup over `warmup` steps, then cosine decay to zero at
    /// `total`.
    Cosine { warmup: u64, total: u64 },
}

impl LrSchedule {
    /// Multiplier for the 0-based step `t`.
    pub fn factor(&self, t: u64) -> f64 {
        match *self {
            Self::Constant => 1.0,
            Self::Cosine { warmup, total } => {
                if t < warmup {
                    (t + 1) as f64 / warmup as f64
                } else if t >= total {
                    0.0
                } else {
                    let span = (total - warmup).max(1) as f64;
                    let p = (t - warmup) as f64 / span;
                    0.5 * (1.0 + libm::cos(core::f64::consts::PI * p))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub loss: LossOptions,
    pub lr: f64,
    pub schedule: LrSchedule,
    /// Scenes per optimizer step.
    pub batch_scenes: usize,
    pub finite_check: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            loss: LossOptions::default(),
            lr: 2e-4,
            schedule: LrSchedule::Constant,
            batch_scenes: 4,
            finite_check: true,
        }
    }
}

/// Model, parameters and optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: MtaModel,
    pub store: ParamStore,
    pub adam: Adam,
    pub opts: TrainOptions,
    text: Option<TextEncoder>,
    text_cache: BTreeMap<u64, Option<Tensor>>,
}

impl Trainer {
    pub fn new(model: MtaModel, store: ParamStore, opts: TrainOptions) -> Result<Self> {
        let adam = Adam::new(&store);
        Self::with_optimizer(model, store, adam, opts)
    }

    /// Resumes from saved parameters and optimizer state.
    pub fn with_optimizer(model: MtaModel, store: ParamStore, adam: Adam, opts: TrainOptions) -> Result<Self> {
        opts.loss.weights.validate()?;
        if opts.batch_scenes == 0 || !(opts.lr > 0.0) {
            return Err(Error::InvalidArgument("batch_scenes and lr must be positive".into()));
        }
        let text = match model.alignment {
            Some(_) => Some(model.text_encoder()?),
            None => None,
        };
        Ok(Self {
            model,
            store,
            adam,
            opts,
            text,
            text_cache: BTreeMap::new(),
        })
    }

    fn text_targets(&mut self, scene: &Scene) -> Result<()> {
        if let Some(enc) = &self.text {
            if !self.text_cache.contains_key(&scene.id) {
                let t = scene_text_targets(enc, scene)?;
                self.text_cache.insert(scene.id, t);
            }
        }
        Ok(())
    }

    /// Loss of one batch without updating anything.
    pub fn evaluate_loss(&mut self, scenes: &[&Scene]) -> Result<LossValues> {
        let (values, _) = self.forward_backward(scenes, false)?;
        Ok(values)
    }

    fn forward_backward(
        &mut self,
        scenes: &[&Scene],
        backward: bool,
    ) -> Result<(LossValues, Vec<Option<Tensor>>)> {
        for s in scenes {
            self.text_targets(s)?;
        }
        let text: Vec<Option<&Tensor>> = if self.text.is_some() {
            scenes.iter().map(|s| self.text_cache[&s.id].as_ref()).collect()
        } else {
            Vec::new()
        };
        let mut g = Graph::new().with_finite_check(self.opts.finite_check);
        let terms = self.model.loss(&mut g, &self.store, scenes, &text, &self.opts.loss)?;
        let values = LossValues::read(&g, &terms);
        if !values.total.is_finite() {
            return Err(Error::NonFinite { op: "total loss" });
        }
        if !backward {
            return Ok((values, Vec::new()));
        }
        g.backward(terms.total)?;
        Ok((values, g.param_grads(&self.store)))
    }

    /// One optimizer step on `scenes`.
    pub fn step(&mut self, scenes: &[&Scene]) -> Result<LossValues> {
        let (values, grads) = self.forward_backward(scenes, true)?;
        let lr = self.opts.lr * self.opts.schedule.factor(self.adam.step_count());
        self.adam.step(&mut self.store, &grads, lr)?;
        Ok(values)
    }

    /// One pass over `scenes` in an order fixed by `(seed, epoch)`.
    pub fn epoch(&mut self, scenes: &[Scene], seed: u64, epoch: u64) -> Result<Vec<LossValues>> {
        if scenes.is_empty() {
            return Err(Error::Empty("training split"));
        }
        let order = epoch_order(scenes.len(), seed, epoch);
        let mut out = Vec::with_capacity(order.len().div_ceil(self.opts.batch_scenes));
        for chunk in order.chunks(self.opts.batch_scenes) {
            let batch: Vec<&Scene> = chunk.iter().map(|&i| &scenes[i]).collect();
            out.push(self.step(&batch)?);
        }
        Ok(out)
    }
}

/// Shuffled scene order of one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_e90c);
    rng.set_stream(epoch + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Means of the logged components over steps; alignment terms average over
/// the steps that produced them.
pub fn mean_losses(steps: &[LossValues]) -> LossValues {
    let n = steps.len().max(1) as f64;
    let opt_mean = |f: fn(&LossValues) -> Option<f64>| {
        let v: Vec<f64> = steps.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    LossValues {
        det: steps.iter().map(|s| s.det).sum::<f64>() / n,
        lm: steps.iter().map(|s| s.lm).sum::<f64>() / n,
        bla: opt_mean(|s| s.bla),
        dca: opt_mean(|s| s.dca),
        total: steps.iter().map(|s| s.total).sum::<f64>() / n,
    }
}

/// Runs inference over a split.
pub fn predict_split(model: &MtaModel, store: &ParamStore, scenes: &[Scene]) -> Result<Vec<ScenePrediction>> {
    if scenes.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    scenes.iter().map(|s| model.predict(store, s)).collect()
}

/// Metrics of dumped predictions against the split's annotations.
/// `class_frequencies` come from the training split.
pub fn report_from_predictions(
    preds: &[ScenePrediction],
    scenes: &[Scene],
    class_frequencies: &[f64],
    iou: IouKind,
) -> Result<MetricsReport> {
    if scenes.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let mut det_preds: Vec<DetBox> = Vec::new();
    let mut det_gts: Vec<DetBox> = Vec::new();
    let mut dense_preds = Vec::new();
    let mut dense_gts = Vec::new();
    for p in preds {
        det_preds.extend(p.detections.iter().cloned());
        for c in &p.captions {
            dense_preds.push(DenseItem {
                scene: p.scene,
                score: c.detection.score,
                footprint: c.footprint()?,
                caption: c.caption.clone(),
            });
        }
    }
    for s in scenes {
        for o in &s.objects {
            det_gts.push(ground_truth_box(s.id, o));
            dense_gts.push(DenseItem {
                scene: s.id,
                score: 1.0,
                footprint: o.footprint()?,
                caption: o.caption.clone(),
            });
        }
    }
    let cfg = ApConfig::default();
    let ap = detection_ap(&det_preds, &det_gts, &cfg);
    let errors = mean_tp_errors(&det_preds, &det_gts, &cfg);
    let dense = DenseScores::new(&dense_preds, &dense_gts, iou)?;
    let captions = REPORT_THRESHOLDS.map(|k| CaptionScores::from_dense(&dense, k));
    let buckets = frequency_bucketed_map(&ap.per_class, class_frequencies);
    Ok(MetricsReport::new(captions, ap.map, errors, ap.per_class, buckets))
}

/// Inference plus metrics.
pub fn evaluate(
    model: &MtaModel,
    store: &ParamStore,
    scenes: &[Scene],
    class_frequencies: &[f64],
) -> Result<(MetricsReport, Vec<ScenePrediction>)> {
    let preds = predict_split(model, store, scenes)?;
    let report = report_from_predictions(&preds, scenes, class_frequencies, IouKind::Bev)?;
    Ok((report, preds))
}
