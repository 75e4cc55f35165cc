//! Dataset and vocabulary files.
//!
//! A dataset file holds one scene per line as a JSON object:
//!
//! ```text
//! {"schema":"mta-scene/1","id":0,"seed":123,"grid":64,"channels":6,
//!  "raster":"<base64 of grid*grid*channels little-endian f64, row-major, channels innermost>",
//!  "objects":[{"x":..,"y":..,"z":..,"w":..,"l":..,"h":..,"yaw":..,"vx":..,"vy":..,
//!              "class":"traffic_cone","attribute":"none",
//!              "caption":"traffic cone about 7 meters away in the back left of the ego car"}]}
//! ```
//!
//! A vocabulary file holds one token per line; the id of a token is its
//! zero-based line number.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use mta_core::scenegen::{Attribute, ObjectAnnotation, Raster, Scene, Vocabulary, CLASS_NAMES};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const SCENE_SCHEMA: &str = "mta-scene/1";

#[derive(Debug, Serialize, Deserialize)]
struct SceneRecord {
    schema: String,
    id: u64,
    seed: u64,
    grid: usize,
    channels: usize,
    raster: String,
    objects: Vec<ObjectRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ObjectRecord {
    x: f64,
    y: f64,
    z: f64,
    w: f64,
    l: f64,
    h: f64,
    yaw: f64,
    vx: f64,
    vy: f64,
    class: String,
    attribute: String,
    caption: String,
}

pub fn attribute_name(a: Attribute) -> &'static str {
    match a {
        Attribute::Moving => "moving",
        Attribute::Stopped => "stopped",
        Attribute::Parked => "parked",
        Attribute::None => "none",
    }
}

pub fn parse_attribute(s: &str) -> Option<Attribute> {
    Attribute::ALL.into_iter().find(|a| attribute_name(*a) == s)
}

pub fn encode_f64s(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

pub fn decode_f64s(text: &str) -> Option<Vec<f64>> {
    let bytes = B64.decode(text).ok()?;
    if bytes.len() % 8 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    )
}

fn to_record(scene: &Scene, vocab: &Vocabulary) -> SceneRecord {
    SceneRecord {
        schema: SCENE_SCHEMA.into(),
        id: scene.id,
        seed: scene.seed,
        grid: scene.raster.grid,
        channels: scene.raster.channels,
        raster: encode_f64s(&scene.raster.data),
        objects: scene
            .objects
            .iter()
            .map(|o| ObjectRecord {
                x: o.x,
                y: o.y,
                z: o.z,
                w: o.w,
                l: o.l,
                h: o.h,
                yaw: o.yaw,
                vx: o.vx,
                vy: o.vy,
                class: CLASS_NAMES[o.class].into(),
                attribute: attribute_name(o.attribute).into(),
                caption: vocab.detokenize(&o.caption),
            })
            .collect(),
    }
}

fn from_record(r: SceneRecord, vocab: &Vocabulary, line: usize) -> Result<Scene> {
    let err = |m: String| HarnessError::Data(format!("dataset line {line}: {m}"));
    if r.schema != SCENE_SCHEMA {
        return Err(err(format!("schema {:?}, expected {SCENE_SCHEMA:?}", r.schema)));
    }
    let data = decode_f64s(&r.raster).ok_or_else(|| err("raster is not base64 f64 data".into()))?;
    if data.len() != r.grid * r.grid * r.channels {
        return Err(err(format!(
            "raster holds {} values, expected {}x{}x{}",
            data.len(),
            r.grid,
            r.grid,
            r.channels
        )));
    }
    let mut objects = Vec::with_capacity(r.objects.len());
    for o in r.objects {
        let class = CLASS_NAMES
            .iter()
            .position(|c| *c == o.class)
            .ok_or_else(|| err(format!("unknown class {:?}", o.class)))?;
        let attribute = parse_attribute(&o.attribute).ok_or_else(|| err(format!("unknown attribute {:?}", o.attribute)))?;
        if !(o.w > 0.0 && o.l > 0.0 && o.h > 0.0) {
            return Err(err("box sizes must be positive".into()));
        }
        let caption = vocab
            .tokenize(&o.caption)
            .map_err(|e| err(format!("caption {:?}: {e}", o.caption)))?;
        objects.push(ObjectAnnotation {
            x: o.x,
            y: o.y,
            z: o.z,
            w: o.w,
            l: o.l,
            h: o.h,
            yaw: o.yaw,
            vx: o.vx,
            vy: o.vy,
            class,
            attribute,
            caption,
        });
    }
    Ok(Scene {
        id: r.id,
        seed: r.seed,
        raster: Raster {
            grid: r.grid,
            channels: r.channels,
            data,
        },
        objects,
    })
}

pub fn write_scenes(path: &Path, scenes: &[Scene], vocab: &Vocabulary) -> Result<()> {
    let file = fs::File::create(path).map_err(HarnessError::io(path))?;
    let mut w = BufWriter::new(file);
    for s in scenes {
        let line = serde_json::to_string(&to_record(s, vocab)).expect("plain data serializes");
        writeln!(w, "{line}").map_err(HarnessError::io(path))?;
    }
    w.flush().map_err(HarnessError::io(path))
}

pub fn read_scenes(path: &Path, vocab: &Vocabulary) -> Result<Vec<Scene>> {
    let file = fs::File::open(path).map_err(HarnessError::io(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(HarnessError::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord = serde_json::from_str(&line)
            .map_err(|e| HarnessError::Data(format!("dataset line {}: {e}", n + 1)))?;
        out.push(from_record(rec, vocab, n + 1)?);
    }
    if out.is_empty() {
        return Err(HarnessError::Data(format!("{} holds no scenes", path.display())));
    }
    Ok(out)
}

pub fn write_vocabulary(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut text = vocab.tokens().join("\n");
    text.push('\n');
    fs::write(path, text).map_err(HarnessError::io(path))
}

pub fn read_vocabulary(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(HarnessError::io(path))?;
    let tokens = text.lines().map(str::to_string).collect();
    Vocabulary::from_tokens(tokens).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))
}
