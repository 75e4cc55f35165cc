//! IoU-gated dense captioning score: a caption metric averaged over ground
//! truth objects, counting only those whose paired prediction overlaps enough.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

use super::caption::{bleu4, rouge_l, Cider};
use super::geometry::{BoxPolygon, IouKind};

/// A box with its caption. `score` is the detection confidence and is
/// ignored for ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseItem<T> {
    pub scene: u64,
    pub score: f64,
    pub footprint: BoxPolygon,
    pub caption: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CaptionMetric {
    Cider,
    Bleu4,
    RougeL,
}

impl CaptionMetric {
    pub const ALL: [CaptionMetric; 3] = [Self::Cider, Self::Bleu4, Self::RougeL];

    pub fn short_name(self) -> &'static str {
        match self {
            Self::Cider => "C",
            Self::Bleu4 => "B-4",
            Self::RougeL => "R",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Pairs predictions with ground truth: predictions are visited by
/// descending confidence and each claims the unclaimed ground-truth box of
/// the same scene with the highest positive IoU. Returns, per ground-truth
/// object, the paired prediction and its IoU.
pub fn match_dense<T>(
    preds: &[DenseItem<T>],
    gts: &[DenseItem<T>],
    kind: IouKind,
) -> Vec<Option<(usize, f64)>> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut out = vec![None; gts.len()];
    for i in order {
        let p = &preds[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if out[j].is_some() || g.scene != p.scene {
                continue;
            }
            let iou = kind.eval(&p.footprint, &g.footprint);
            if iou > 0.0 && best.map_or(true, |(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, iou)) = best {
            out[j] = Some((i, iou));
        }
    }
    out
}

/// Matching plus the caption scores of every matched pair, from which the
/// gated score at any threshold follows without rescoring.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseScores {
    pub matches: Vec<Option<(usize, f64)>>,
    values: [Vec<f64>; 3],
}

impl DenseScores {
    /// Scores every matched pair. CIDEr document frequencies are taken over
    /// the ground-truth captions; an empty predicted caption scores 0.
    pub fn new<T: Ord + Clone>(
        preds: &[DenseItem<T>],
        gts: &[DenseItem<T>],
        kind: IouKind,
    ) -> Result<Self> {
        if gts.is_empty() {
            return Err(Error::Empty("ground-truth objects"));
        }
        let matches = match_dense(preds, gts, kind);
        let corpus: Vec<Vec<Vec<T>>> = gts.iter().map(|g| vec![g.caption.clone()]).collect();
        let scorer = Cider::new(&corpus)?;
        let mut values: [Vec<f64>; 3] = Default::default();
        for (j, m) in matches.iter().enumerate() {
            let Some((i, _)) = *m else {
                values.iter_mut().for_each(|v| v.push(0.0));
                continue;
            };
            let cand = &preds[i].caption;
            let refs = &corpus[j];
            if cand.is_empty() || refs[0].is_empty() {
                values.iter_mut().for_each(|v| v.push(0.0));
                continue;
            }
            values[CaptionMetric::Cider.index()].push(scorer.score(cand, refs)?);
            values[CaptionMetric::Bleu4.index()].push(bleu4(cand, refs)?);
            values[CaptionMetric::RougeL.index()].push(rouge_l(cand, refs)?);
        }
        Ok(Self { matches, values })
    }

    /// `(1/N) Σ m(ô_i, o_i) · 1{IoU ≥ k}` over the N ground-truth objects.
    pub fn at(&self, metric: CaptionMetric, k: f64) -> f64 {
        let v = &self.values[metric.index()];
        let total: f64 = self
            .matches
            .iter()
            .zip(v)
            .filter(|(m, _)| m.is_some_and(|(_, iou)| iou >= k))
            .fold(0.0, |acc, (_, s)| acc + s);
        total / self.matches.len() as f64
    }
}

/// Gated caption score for one metric and one IoU threshold.
pub fn m_at_iou<T: Ord + Clone>(
    preds: &[DenseItem<T>],
    gts: &[DenseItem<T>],
    metric: CaptionMetric,
    k: f64,
    kind: IouKind,
) -> Result<f64> {
    Ok(DenseScores::new(preds, gts, kind)?.at(metric, k))
}
