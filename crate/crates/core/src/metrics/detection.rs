//! Center-distance detection metrics in the style of the nuScenes benchmark:
//! average precision over distance thresholds, the five true-positive error
//! terms and their aggregate detection score.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

/// One 3D box with class, confidence and attribute. `score` is ignored for
/// ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct DetBox {
    pub scene: u64,
    pub class: usize,
    pub score: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
    pub attribute: usize,
}

impl DetBox {
    pub fn center_distance(&self, other: &DetBox) -> f64 {
        libm::hypot(self.x - other.x, self.y - other.y)
    }
}

/// Matching and integration settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ApConfig {
    /// Center-distance thresholds (meters) that AP is averaged over.
    pub thresholds: Vec<f64>,
    /// Threshold at which true-positive errors are measured.
    pub tp_threshold: f64,
    pub min_recall: f64,
    pub min_precision: f64,
}

impl Default for ApConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![0.5, 1.0, 2.0, 4.0],
            tp_threshold: 2.0,
            min_recall: 0.1,
            min_precision: 0.1,
        }
    }
}

/// Number of recall sample points on the interpolated curve.
pub const RECALL_POINTS: usize = 101;

/// Greedy score-ordered matching of one class at one threshold.
/// Returns `(prediction index, matched ground-truth index)` for every
/// prediction of the class in descending score order.
pub fn greedy_match(
    preds: &[DetBox],
    gts: &[DetBox],
    class: usize,
    threshold: f64,
) -> Vec<(usize, Option<usize>)> {
    let mut order: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].class == class).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(order.len());
    for i in order {
        let p = &preds[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gts.iter().enumerate() {
            if taken[j] || gt.class != class || gt.scene != p.scene {
                continue;
            }
            let d = p.center_distance(gt);
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        match best {
            Some((j, d)) if d < threshold => {
                taken[j] = true;
                out.push((i, Some(j)));
            }
            _ => out.push((i, None)),
        }
    }
    out
}

/// Linear interpolation with constant extension on the left and `right`
/// past the last sample; for repeated abscissae the last one wins.
pub fn interp(x: f64, xs: &[f64], ys: &[f64], right: f64) -> f64 {
    let n = xs.len();
    if n == 0 {
        return right;
    }
    if x < xs[0] {
        return ys[0];
    }
    if x > xs[n - 1] {
        return right;
    }
    let j = xs.partition_point(|&v| v <= x) - 1;
    if j == n - 1 || xs[j] == x {
        return ys[j];
    }
    let t = (x - xs[j]) / (xs[j + 1] - xs[j]);
    ys[j] + t * (ys[j + 1] - ys[j])
}

/// Precision sampled at 101 evenly spaced recall levels.
pub fn interpolated_precision(recall: &[f64], precision: &[f64]) -> [f64; RECALL_POINTS] {
    core::array::from_fn(|i| {
        let r = i as f64 / (RECALL_POINTS - 1) as f64;
        interp(r, recall, precision, 0.0)
    })
}

/// Normalized area under the interpolated curve above the minimum recall
/// and precision.
pub fn area_above_minimums(curve: &[f64; RECALL_POINTS], min_recall: f64, min_precision: f64) -> f64 {
    let start = libm::round(100.0 * min_recall) as usize + 1;
    let tail = &curve[start.min(RECALL_POINTS)..];
    if tail.is_empty() {
        return 0.0;
    }
    let mean = tail.iter().map(|p| (p - min_precision).max(0.0)).sum::<f64>() / tail.len() as f64;
    mean / (1.0 - min_precision)
}

/// AP of one class at one center-distance threshold.
pub fn class_ap(preds: &[DetBox], gts: &[DetBox], class: usize, threshold: f64, cfg: &ApConfig) -> f64 {
    let npos = gts.iter().filter(|g| g.class == class).count();
    if npos == 0 {
        return 0.0;
    }
    let matches = greedy_match(preds, gts, class, threshold);
    if matches.is_empty() {
        return 0.0;
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(matches.len());
    let mut precision = Vec::with_capacity(matches.len());
    for (_, m) in &matches {
        if m.is_some() {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    let curve = interpolated_precision(&recall, &precision);
    area_above_minimums(&curve, cfg.min_recall, cfg.min_precision)
}

/// Mean AP over thresholds and classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    pub map: f64,
    /// Per-class AP averaged over thresholds, for classes with ground truth.
    pub per_class: BTreeMap<usize, f64>,
}

/// AP over every class that has at least one ground-truth box; classes
/// absent from the ground truth are left out of the mean.
pub fn detection_ap(preds: &[DetBox], gts: &[DetBox], cfg: &ApConfig) -> ApResult {
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut per_class = BTreeMap::new();
    for &c in &classes {
        let ap = cfg
            .thresholds
            .iter()
            .map(|&t| class_ap(preds, gts, c, t, cfg))
            .sum::<f64>()
            / cfg.thresholds.len() as f64;
        per_class.insert(c, ap);
    }
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    ApResult { map, per_class }
}

/// Mean translation, scale, orientation, velocity and attribute errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TpErrors {
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub ave: f64,
    pub aae: f64,
}

impl TpErrors {
    /// Value used when a class has no true positives.
    pub const EMPTY: TpErrors = TpErrors {
        ate: 1.0,
        ase: 1.0,
        aoe: 1.0,
        ave: 1.0,
        aae: 1.0,
    };

    pub fn as_array(&self) -> [f64; 5] {
        [self.ate, self.ase, self.aoe, self.ave, self.aae]
    }

    fn from_array(a: [f64; 5]) -> Self {
        Self {
            ate: a[0],
            ase: a[1],
            aoe: a[2],
            ave: a[3],
            aae: a[4],
        }
    }
}

/// Absolute heading difference folded into `[0, π]`.
pub fn yaw_difference(a: f64, b: f64) -> f64 {
    let d = libm::fmod((a - b).abs(), 2.0 * PI);
    if d > PI {
        2.0 * PI - d
    } else {
        d
    }
}

/// `1 − IoU` of two boxes after aligning centers and headings.
pub fn scale_error(pred: &DetBox, gt: &DetBox) -> f64 {
    let inter = pred.w.min(gt.w) * pred.l.min(gt.l) * pred.h.min(gt.h);
    let union = pred.w * pred.l * pred.h + gt.w * gt.l * gt.h - inter;
    1.0 - inter / union
}

/// Per-pair error vector `(ATE, ASE, AOE, AVE, AAE)`.
pub fn pair_errors(pred: &DetBox, gt: &DetBox) -> [f64; 5] {
    [
        pred.center_distance(gt),
        scale_error(pred, gt),
        yaw_difference(pred.yaw, gt.yaw),
        libm::hypot(pred.vx - gt.vx, pred.vy - gt.vy),
        if pred.attribute == gt.attribute { 0.0 } else { 1.0 },
    ]
}

/// Means over matched `(prediction, ground truth)` pairs; [`TpErrors::EMPTY`]
/// when there are none.
pub fn tp_errors(pairs: &[(&DetBox, &DetBox)]) -> TpErrors {
    if pairs.is_empty() {
        return TpErrors::EMPTY;
    }
    let mut acc = [0.0; 5];
    for (p, g) in pairs {
        for (a, e) in acc.iter_mut().zip(pair_errors(p, g)) {
            *a += e;
        }
    }
    TpErrors::from_array(acc.map(|a| a / pairs.len() as f64))
}

/// Class-averaged true-positive errors at the TP matching threshold.
pub fn mean_tp_errors(preds: &[DetBox], gts: &[DetBox], cfg: &ApConfig) -> TpErrors {
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return TpErrors::EMPTY;
    }
    let mut acc = [0.0; 5];
    for &c in &classes {
        let pairs: Vec<(&DetBox, &DetBox)> = greedy_match(preds, gts, c, cfg.tp_threshold)
            .into_iter()
            .filter_map(|(i, m)| m.map(|j| (&preds[i], &gts[j])))
            .collect();
        for (a, e) in acc.iter_mut().zip(tp_errors(&pairs).as_array()) {
            *a += e;
        }
    }
    TpErrors::from_array(acc.map(|a| a / classes.len() as f64))
}

/// Detection score: `(5·mAP + Σ (1 − min(1, err))) / 10` over the five
/// true-positive errors.
pub fn nds(map: f64, errors: &TpErrors) -> f64 {
    let tp: f64 = errors.as_array().iter().map(|e| 1.0 - e.min(1.0)).sum();
    (5.0 * map + tp) / 10.0
}

/// Long-tail class buckets by training-set frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FrequencyBucket {
    /// below 2 %
    Rare,
    /// 2 % to 20 %
    Common,
    /// above 20 %
    Frequent,
}

impl FrequencyBucket {
    pub const ALL: [FrequencyBucket; 3] = [Self::Rare, Self::Common, Self::Frequent];

    pub fn of(frequency: f64) -> Self {
        if frequency < 0.02 {
            Self::Rare
        } else if frequency > 0.20 {
            Self::Frequent
        } else {
            Self::Common
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Rare => "rare",
            Self::Common => "common",
            Self::Frequent => "frequent",
        }
    }
}

/// mAP restricted to the classes of each frequency bucket. Buckets with no
/// evaluated class are omitted.
pub fn frequency_bucketed_map(
    per_class_ap: &BTreeMap<usize, f64>,
    class_frequencies: &[f64],
) -> BTreeMap<FrequencyBucket, f64> {
    let mut sums: BTreeMap<FrequencyBucket, (f64, usize)> = BTreeMap::new();
    for (&c, &ap) in per_class_ap {
        let freq = class_frequencies.get(c).copied().unwrap_or(0.0);
        let e = sums.entry(FrequencyBucket::of(freq)).or_insert((0.0, 0));
        e.0 += ap;
        e.1 += 1;
    }
    for b in FrequencyBucket::ALL {
        if !sums.contains_key(&b) {
            log::info!("no evaluated class falls in the {} bucket", b.name());
        }
    }
    sums.into_iter().map(|(b, (s, n))| (b, s / n as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn bx(scene: u64, class: usize, score: f64, x: f64, y: f64) -> DetBox {
        DetBox {
            scene,
            class,
            score,
            x,
            y,
            z: 1.0,
            w: 2.0,
            l: 4.0,
            h: 1.5,
            yaw: 0.3,
            vx: 1.0,
            vy: 0.0,
            attribute: 0,
        }
    }

    #[test]
    fn perfect_predictions_give_unit_map_and_zero_errors() {
        let gts = vec![bx(0, 0, 0.0, 1.0, 2.0), bx(0, 1, 0.0, -5.0, 3.0), bx(1, 0, 0.0, 9.0, 9.0)];
        let preds: Vec<DetBox> = gts
            .iter()
            .enumerate()
            .map(|(i, g)| DetBox { score: 0.9 - 0.1 * i as f64, ..g.clone() })
            .collect();
        let cfg = ApConfig::default();
        let ap = detection_ap(&preds, &gts, &cfg);
        assert!((ap.map - 1.0).abs() < 1e-12);
        let e = mean_tp_errors(&preds, &gts, &cfg);
        assert_eq!(e.as_array(), [0.0; 5]);
        assert!((nds(ap.map, &e) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_predictions_give_zero_map() {
        let gts = vec![bx(0, 0, 0.0, 1.0, 2.0)];
        let ap = detection_ap(&[], &gts, &ApConfig::default());
        assert_eq!(ap.map, 0.0);
        assert_eq!(mean_tp_errors(&[], &gts, &ApConfig::default()), TpErrors::EMPTY);
    }

    #[test]
    fn yaw_off_by_pi_has_orientation_error_pi() {
        let g = bx(0, 0, 0.0, 0.0, 0.0);
        let p = DetBox { yaw: g.yaw + PI, ..g.clone() };
        assert!((tp_errors(&[(&p, &g)]).aoe - PI).abs() < 1e-12);
        assert!((yaw_difference(3.0, -3.0) - (2.0 * PI - 6.0)).abs() < 1e-12);
    }

    #[test]
    fn known_offsets_give_hand_computed_errors() {
        let g = bx(0, 0, 0.0, 0.0, 0.0);
        // 0.5 m translation, every dimension halved, velocity off by (0, 2),
        // wrong attribute, heading off by 0.25 rad.
        let p = DetBox {
            x: 0.3,
            y: 0.4,
            w: 1.0,
            l: 2.0,
            h: 0.75,
            yaw: g.yaw + 0.25,
            vy: 2.0,
            attribute: 1,
            ..g.clone()
        };
        let e = tp_errors(&[(&p, &g)]);
        assert!((e.ate - 0.5).abs() < 1e-12);
        // aligned IoU = (1/8 V) / V
        assert!((e.ase - 0.875).abs() < 1e-12);
        assert!((e.aoe - 0.25).abs() < 1e-12);
        assert!((e.ave - 2.0).abs() < 1e-12);
        assert_eq!(e.aae, 1.0);
    }

    #[test]
    fn interp_follows_repeated_abscissa_rule() {
        let xs = [0.2, 0.2, 0.6];
        let ys = [1.0, 0.5, 0.3];
        assert_eq!(interp(0.0, &xs, &ys, 0.0), 1.0);
        assert_eq!(interp(0.2, &xs, &ys, 0.0), 0.5);
        assert!((interp(0.4, &xs, &ys, 0.0) - 0.4).abs() < 1e-12);
        assert_eq!(interp(0.6, &xs, &ys, 0.0), 0.3);
        assert_eq!(interp(0.7, &xs, &ys, 0.0), 0.0);
    }

    #[test]
    fn bucket_thresholds() {
        assert_eq!(FrequencyBucket::of(0.019), FrequencyBucket::Rare);
        assert_eq!(FrequencyBucket::of(0.02), FrequencyBucket::Common);
        assert_eq!(FrequencyBucket::of(0.2), FrequencyBucket::Common);
        assert_eq!(FrequencyBucket::of(0.21), FrequencyBucket::Frequent);
    }

    #[test]
    fn all_frequent_bucket_equals_overall_map() {
        let per_class: BTreeMap<usize, f64> = [(0, 0.5), (1, 0.25), (2, 0.9)].into_iter().collect();
        let b = frequency_bucketed_map(&per_class, &[0.3, 0.3, 0.4]);
        assert_eq!(b.len(), 1);
        assert!((b[&FrequencyBucket::Frequent] - 0.55).abs() < 1e-12);
    }

    #[test]
    fn one_rare_class_bucket() {
        let per_class: BTreeMap<usize, f64> = [(0, 0.5), (1, 0.25), (2, 0.9)].into_iter().collect();
        let b = frequency_bucketed_map(&per_class, &[0.6, 0.01, 0.39]);
        assert!((b[&FrequencyBucket::Rare] - 0.25).abs() < 1e-12);
        assert!((b[&FrequencyBucket::Frequent] - 0.7).abs() < 1e-12);
        assert!(!b.contains_key(&FrequencyBucket::Common));
    }
}
