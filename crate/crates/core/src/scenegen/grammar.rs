//! Templated object captions and the token vocabulary they are written in.
//!
//! A caption reads
//! `[attribute] class about N meters away in the DIRECTION of the ego car`
//! followed by `, moving MOTION` for moving objects.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SPECIALS: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

/// Fixed instruction placed in front of every caption.
pub const PROMPT: [&str; 4] = ["describe", "the", "object", "."];

/// Largest distance word; ranges up to the raster corner fit below it.
pub const MAX_DISTANCE_WORD: u32 = 73;

pub const CLASS_NAMES: [&str; 10] = [
    "car",
    "truck",
    "bus",
    "trailer",
    "construction_vehicle",
    "pedestrian",
    "motorcycle",
    "bicycle",
    "traffic_cone",
    "barrier",
];

pub const NUM_CLASSES: usize = CLASS_NAMES.len();

/// Caption words of a class name.
pub fn class_words(class: usize) -> Vec<&'static str> {
    CLASS_NAMES[class].split('_').collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Attribute {
    Moving,
    Stopped,
    Parked,
    /// Static furniture; renders no attribute word.
    None,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [Self::Moving, Self::Stopped, Self::Parked, Self::None];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn word(self) -> Option<&'static str> {
        match self {
            Self::Moving => Some("moving"),
            Self::Stopped => Some("stopped"),
            Self::Parked => Some("parked"),
            Self::None => None,
        }
    }

    /// Attributes a class may carry.
    pub fn allowed(class: usize) -> &'static [Attribute] {
        match CLASS_NAMES[class] {
            "traffic_cone" | "barrier" => &[Self::None],
            "pedestrian" => &[Self::Moving, Self::Stopped],
            _ => &[Self::Moving, Self::Stopped, Self::Parked],
        }
    }
}

pub const OCTANTS: [&str; 8] = [
    "front",
    "front left",
    "left",
    "back left",
    "back",
    "back right",
    "right",
    "front right",
];

pub const MOTIONS: [&str; 4] = ["forward", "left", "backward", "right"];

/// Angle measured counterclockwise (toward the left) from straight ahead,
/// in `[0, 2π)`. The ego frame has x forward and y to the right.
fn ego_angle(x: f64, y: f64) -> f64 {
    let a = libm::atan2(-y, x);
    if a < 0.0 {
        a + 2.0 * PI
    } else {
        a
    }
}

fn sector(x: f64, y: f64, sectors: usize) -> usize {
    let width = 2.0 * PI / sectors as f64;
    let idx = libm::floor((ego_angle(x, y) + 0.5 * width) / width) as usize;
    idx % sectors
}

/// Octant of a point; a point on a boundary goes to the counterclockwise
/// neighbour.
pub fn octant(x: f64, y: f64) -> usize {
    sector(x, y, 8)
}

/// Coarse motion direction of a velocity vector.
pub fn motion(vx: f64, vy: f64) -> usize {
    sector(vx, vy, 4)
}

pub fn rounded_distance(x: f64, y: f64) -> u32 {
    libm::round(libm::hypot(x, y)) as u32
}

/// The symbolic content of a caption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionFields {
    pub class: usize,
    pub attribute: Attribute,
    pub distance: u32,
    pub octant: usize,
    /// Present exactly when the attribute is `Moving`.
    pub motion: Option<usize>,
}

/// Caption words for the given fields.
pub fn render_words(f: &CaptionFields) -> Vec<String> {
    let mut w: Vec<String> = Vec::new();
    if let Some(a) = f.attribute.word() {
        w.push(a.into());
    }
    w.extend(class_words(f.class).into_iter().map(String::from));
    w.push("about".into());
    w.push(f.distance.to_string());
    for s in ["meters", "away", "in", "the"] {
        w.push(s.into());
    }
    w.extend(OCTANTS[f.octant].split(' ').map(String::from));
    for s in ["of", "the", "ego", "car"] {
        w.push(s.into());
    }
    if let Some(m) = f.motion {
        w.push(",".into());
        w.push("moving".into());
        w.push(MOTIONS[m].into());
    }
    w
}

fn expect(words: &[&str], pos: &mut usize, want: &str) -> Result<()> {
    match words.get(*pos) {
        Some(w) if *w == want => {
            *pos += 1;
            Ok(())
        }
        other => Err(Error::InvalidArgument(format!(
            "caption word {} is {other:?}, expected {want:?}",
            *pos
        ))),
    }
}

/// Inverse of [`render_words`].
pub fn parse_words(words: &[&str]) -> Result<CaptionFields> {
    let mut pos = 0;
    let attribute = match words.first().copied() {
        Some("moving") => Attribute::Moving,
        Some("stopped") => Attribute::Stopped,
        Some("parked") => Attribute::Parked,
        _ => Attribute::None,
    };
    if attribute != Attribute::None {
        pos += 1;
    }
    let class = (0..NUM_CLASSES)
        .filter(|&c| {
            let cw = class_words(c);
            words.len() >= pos + cw.len() && words[pos..pos + cw.len()] == cw[..]
        })
        .max_by_key(|&c| class_words(c).len())
        .ok_or_else(|| Error::InvalidArgument("caption names no known class".into()))?;
    pos += class_words(class).len();
    expect(words, &mut pos, "about")?;
    let distance: u32 = words
        .get(pos)
        .and_then(|w| w.parse().ok())
        .ok_or_else(|| Error::InvalidArgument("caption distance is not a number".into()))?;
    pos += 1;
    for s in ["meters", "away", "in", "the"] {
        expect(words, &mut pos, s)?;
    }
    let octant = (0..OCTANTS.len())
        .filter(|&o| {
            let ow: Vec<&str> = OCTANTS[o].split(' ').collect();
            words.len() >= pos + ow.len() && words[pos..pos + ow.len()] == ow[..]
        })
        .max_by_key(|&o| OCTANTS[o].len())
        .ok_or_else(|| Error::InvalidArgument("caption names no direction".into()))?;
    pos += OCTANTS[octant].split(' ').count();
    for s in ["of", "the", "ego", "car"] {
        expect(words, &mut pos, s)?;
    }
    let motion = if pos < words.len() {
        expect(words, &mut pos, ",")?;
        expect(words, &mut pos, "moving")?;
        let m = words
            .get(pos)
            .and_then(|w| MOTIONS.iter().position(|m| m == w))
            .ok_or_else(|| Error::InvalidArgument("caption names no motion".into()))?;
        pos += 1;
        Some(m)
    } else {
        None
    };
    if pos != words.len() {
        return Err(Error::InvalidArgument("trailing caption words".into()));
    }
    Ok(CaptionFields {
        class,
        attribute,
        distance,
        octant,
        motion,
    })
}

/// Every caption the grammar can produce up to distance `max_distance`.
pub fn enumerate_fields(max_distance: u32) -> Vec<CaptionFields> {
    let mut out = Vec::new();
    for class in 0..NUM_CLASSES {
        for &attribute in Attribute::allowed(class) {
            let motions: Vec<Option<usize>> = if attribute == Attribute::Moving {
                (0..MOTIONS.len()).map(Some).collect()
            } else {
                vec![None]
            };
            for octant in 0..OCTANTS.len() {
                for &motion in &motions {
                    for distance in 0..=max_distance {
                        out.push(CaptionFields {
                            class,
                            attribute,
                            distance,
                            octant,
                            motion,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Bijective token ↔ id map. Ids 0, 1, 2 are padding, begin and end of
/// sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// The vocabulary of the caption grammar plus the prompt.
    pub fn standard() -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut push = |t: &str| {
            if !tokens.iter().any(|x| x == t) {
                tokens.push(t.into());
            }
        };
        PROMPT.iter().for_each(|t| push(t));
        for a in Attribute::ALL {
            if let Some(w) = a.word() {
                push(w);
            }
        }
        for c in 0..NUM_CLASSES {
            class_words(c).into_iter().for_each(&mut push);
        }
        for w in ["about", "meters", "away", "in", "of", "ego", ","] {
            push(w);
        }
        OCTANTS.iter().flat_map(|o| o.split(' ')).for_each(&mut push);
        MOTIONS.iter().for_each(|m| push(m));
        for n in 0..=MAX_DISTANCE_WORD {
            push(&n.to_string());
        }
        Self::from_tokens(tokens).expect("standard vocabulary is valid")
    }

    /// Builds a vocabulary whose id is the position in `tokens`. The first
    /// three entries must be the reserved markers.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..3].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::InvalidArgument(
                "vocabulary must start with <pad>, <bos>, <eos>".into(),
            ));
        }
        let mut ids = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Result<u32> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.into()))
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<u32>> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    /// Words of `ids` with the reserved markers dropped.
    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter()
            .filter(|&&i| i > EOS)
            .filter_map(|&i| self.token(i))
            .collect()
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        self.encode(&text.split_whitespace().collect::<Vec<_>>())
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        self.decode(ids).join(" ")
    }

    pub fn prompt_ids(&self) -> Vec<u32> {
        self.encode(&PROMPT).expect("prompt words are in every standard vocabulary")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn octant_axes_and_quadrants() {
        assert_eq!(OCTANTS[octant(10.0, 0.0)], "front");
        assert_eq!(OCTANTS[octant(0.0, -10.0)], "left");
        assert_eq!(OCTANTS[octant(0.0, 10.0)], "right");
        assert_eq!(OCTANTS[octant(-10.0, 0.0)], "back");
        assert_eq!(OCTANTS[octant(-4.9, -4.9)], "back left");
        assert_eq!(OCTANTS[octant(4.9, 4.9)], "front right");
    }

    #[test]
    fn boundary_goes_counterclockwise() {
        // exactly halfway between forward and left
        assert_eq!(MOTIONS[motion(1.0, -1.0)], "left");
        assert_eq!(MOTIONS[motion(-1.0, -1.0)], "backward");
        assert_eq!(MOTIONS[motion(1.0, 1.0)], "forward");
    }

    #[test]
    fn vocabulary_is_bijective() {
        let v = Vocabulary::standard();
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t).unwrap(), i as u32);
        }
        assert_eq!(v.id("<pad>").unwrap(), PAD);
        assert!(v.id("zebra").is_err());
    }

    #[test]
    fn parse_rejects_malformed_text() {
        assert!(parse_words(&["car", "near", "me"]).is_err());
        assert!(parse_words(&["spaceship"]).is_err());
    }
}
