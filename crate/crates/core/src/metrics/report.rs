use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::dense::{CaptionMetric, DenseScores};
use super::detection::{nds, FrequencyBucket, TpErrors};

/// IoU thresholds the dense captioning scores are reported at.
pub const REPORT_THRESHOLDS: [f64; 2] = [0.25, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CaptionScores {
    pub cider: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
}

impl CaptionScores {
    pub fn from_dense(scores: &DenseScores, k: f64) -> Self {
        Self {
            cider: scores.at(CaptionMetric::Cider, k),
            bleu4: scores.at(CaptionMetric::Bleu4, k),
            rouge_l: scores.at(CaptionMetric::RougeL, k),
        }
    }

    pub fn get(&self, metric: CaptionMetric) -> f64 {
        match metric {
            CaptionMetric::Cider => self.cider,
            CaptionMetric::Bleu4 => self.bleu4,
            CaptionMetric::RougeL => self.rouge_l,
        }
    }
}

/// Everything one evaluation pass produces.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Dense captioning scores at IoU 0.25 and 0.5.
    pub captions: [CaptionScores; 2],
    pub map: f64,
    pub errors: TpErrors,
    pub nds: f64,
    pub per_class_ap: BTreeMap<usize, f64>,
    pub bucket_map: BTreeMap<FrequencyBucket, f64>,
}

impl MetricsReport {
    /// Builds the report, deriving the aggregate score from `map` and
    /// `errors`.
    pub fn new(
        captions: [CaptionScores; 2],
        map: f64,
        errors: TpErrors,
        per_class_ap: BTreeMap<usize, f64>,
        bucket_map: BTreeMap<FrequencyBucket, f64>,
    ) -> Self {
        Self {
            captions,
            map,
            errors,
            nds: nds(map, &errors),
            per_class_ap,
            bucket_map,
        }
    }

    pub fn caption(&self, metric: CaptionMetric, k: f64) -> Option<f64> {
        REPORT_THRESHOLDS
            .iter()
            .position(|&t| t == k)
            .map(|i| self.captions[i].get(metric))
    }

    /// Whether the stored aggregate equals the one recomputed from the
    /// stored components.
    pub fn nds_consistent(&self) -> bool {
        nds(self.map, &self.errors) == self.nds
    }

    pub fn is_finite(&self) -> bool {
        self.entries(&[]).iter().all(|(_, v)| v.is_finite())
    }

    /// Flat `(key, value)` listing in a fixed order. Per-class AP keys use
    /// `class_names` when an entry exists, else the class index.
    pub fn entries(&self, class_names: &[&str]) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (i, k) in REPORT_THRESHOLDS.iter().enumerate() {
            for m in CaptionMetric::ALL {
                out.push((format!("{}@{}", m.short_name(), k), self.captions[i].get(m)));
            }
        }
        out.push(("NDS".into(), self.nds));
        out.push(("mAP".into(), self.map));
        let e = &self.errors;
        for (k, v) in [
            ("mATE", e.ate),
            ("mASE", e.ase),
            ("mAOE", e.aoe),
            ("mAVE", e.ave),
            ("mAAE", e.aae),
        ] {
            out.push((k.into(), v));
        }
        for (b, v) in &self.bucket_map {
            out.push((format!("mAP_{}", b.name()), *v));
        }
        for (c, v) in &self.per_class_ap {
            let key = match class_names.get(*c) {
                Some(n) => format!("AP_{n}"),
                None => format!("AP_{c}"),
            };
            out.push((key, *v));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_is_recomputable() {
        let errors = TpErrors {
            ate: 0.878,
            ase: 0.285,
            aoe: 0.595,
            ave: 0.541,
            aae: 0.213,
        };
        let r = MetricsReport::new(Default::default(), 0.279, errors, BTreeMap::new(), BTreeMap::new());
        assert!(r.nds_consistent());
        assert!(r.is_finite());
        assert_eq!(r.entries(&[])[6].0, "NDS");
    }
}
