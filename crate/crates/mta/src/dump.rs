//! Prediction and caption dumps, one JSON object per line.
//!
//! Prediction lines (`mta-pred/1`): `scene`, `query`, `score`, `class`
//! (name), `box` as `[x, y, z, w, l, h, yaw, vx, vy]`, `attribute` (name).
//!
//! Caption lines (`mta-caption/1`): `scene`, `query`, `score`, `class`,
//! `box`, `attribute`, `caption` (detokenized text).
//!
//! Floats are written in shortest round-trip form, so metrics recomputed
//! from the dumps equal the in-process ones exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use mta_core::metrics::DetBox;
use mta_core::model::{CaptionedBox, ScenePrediction};
use mta_core::scenegen::{Attribute, Vocabulary, CLASS_NAMES};
use serde::{Deserialize, Serialize};

use crate::dataset::{attribute_name, parse_attribute};
use crate::error::{HarnessError, Result};

pub const PRED_SCHEMA: &str = "mta-pred/1";
pub const CAPTION_SCHEMA: &str = "mta-caption/1";

#[derive(Debug, Serialize, Deserialize)]
struct DetRecord {
    schema: String,
    scene: u64,
    query: usize,
    score: f64,
    class: String,
    #[serde(rename = "box")]
    bbox: [f64; 9],
    attribute: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    caption: Option<String>,
}

fn det_record(schema: &str, query: usize, d: &DetBox, caption: Option<String>) -> DetRecord {
    DetRecord {
        schema: schema.into(),
        scene: d.scene,
        query,
        score: d.score,
        class: CLASS_NAMES[d.class].into(),
        bbox: [d.x, d.y, d.z, d.w, d.l, d.h, d.yaw, d.vx, d.vy],
        attribute: attribute_name(Attribute::from_index(d.attribute).unwrap_or(Attribute::None)).into(),
        caption,
    }
}

fn det_box(r: &DetRecord, line: usize) -> Result<DetBox> {
    let err = |m: String| HarnessError::Data(format!("dump line {line}: {m}"));
    let class = CLASS_NAMES
        .iter()
        .position(|c| *c == r.class)
        .ok_or_else(|| err(format!("unknown class {:?}", r.class)))?;
    let attribute = parse_attribute(&r.attribute).ok_or_else(|| err(format!("unknown attribute {:?}", r.attribute)))?;
    let [x, y, z, w, l, h, yaw, vx, vy] = r.bbox;
    Ok(DetBox {
        scene: r.scene,
        class,
        score: r.score,
        x,
        y,
        z,
        w,
        l,
        h,
        yaw,
        vx,
        vy,
        attribute: attribute.index(),
    })
}

fn write_lines(path: &Path, lines: impl Iterator<Item = DetRecord>) -> Result<()> {
    let file = fs::File::create(path).map_err(HarnessError::io(path))?;
    let mut w = BufWriter::new(file);
    for r in lines {
        let s = serde_json::to_string(&r).expect("plain data serializes");
        writeln!(w, "{s}").map_err(HarnessError::io(path))?;
    }
    w.flush().map_err(HarnessError::io(path))
}

fn read_lines(path: &Path, schema: &str) -> Result<Vec<(usize, DetRecord)>> {
    let file = fs::File::open(path).map_err(HarnessError::io(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(HarnessError::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: DetRecord =
            serde_json::from_str(&line).map_err(|e| HarnessError::Data(format!("dump line {}: {e}", n + 1)))?;
        if r.schema != schema {
            return Err(HarnessError::Data(format!(
                "dump line {}: schema {:?}, expected {schema:?}",
                n + 1,
                r.schema
            )));
        }
        out.push((n + 1, r));
    }
    Ok(out)
}

/// Writes both dumps.
pub fn write_predictions(
    pred_path: &Path,
    caption_path: &Path,
    preds: &[ScenePrediction],
    vocab: &Vocabulary,
) -> Result<()> {
    write_lines(
        pred_path,
        preds
            .iter()
            .flat_map(|p| p.detections.iter().enumerate().map(|(q, d)| det_record(PRED_SCHEMA, q, d, None))),
    )?;
    write_lines(
        caption_path,
        preds.iter().flat_map(|p| {
            p.captions
                .iter()
                .map(|c| det_record(CAPTION_SCHEMA, c.query, &c.detection, Some(vocab.detokenize(&c.caption))))
        }),
    )
}

/// Reads both dumps back into per-scene predictions, ordered by scene id
/// of first appearance.
pub fn read_predictions(pred_path: &Path, caption_path: &Path, vocab: &Vocabulary) -> Result<Vec<ScenePrediction>> {
    let mut out: Vec<ScenePrediction> = Vec::new();
    let mut index: BTreeMap<u64, usize> = BTreeMap::new();
    let mut slot = |scene: u64, out: &mut Vec<ScenePrediction>| {
        *index.entry(scene).or_insert_with(|| {
            out.push(ScenePrediction {
                scene,
                detections: Vec::new(),
                captions: Vec::new(),
            });
            out.len() - 1
        })
    };
    for (line, r) in read_lines(pred_path, PRED_SCHEMA)? {
        let d = det_box(&r, line)?;
        let i = slot(r.scene, &mut out);
        out[i].detections.push(d);
    }
    for (line, r) in read_lines(caption_path, CAPTION_SCHEMA)? {
        let d = det_box(&r, line)?;
        let text = r.caption.as_deref().unwrap_or_default();
        let caption = vocab
            .tokenize(text)
            .map_err(|e| HarnessError::Data(format!("caption dump line {line}: {e}")))?;
        let i = slot(r.scene, &mut out);
        out[i].captions.push(CaptionedBox {
            query: r.query,
            detection: d,
            caption,
        });
    }
    Ok(out)
}
