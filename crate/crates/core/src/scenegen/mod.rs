//! Deterministic synthetic driving scenes: a bird's-eye raster, boxed
//! objects and one templated caption per object.

mod grammar;

pub use grammar::*;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::geometry::{intersection_area, BoxPolygon};

/// Default long-tail class distribution, in [`CLASS_NAMES`] order.
pub const DEFAULT_CLASS_FREQUENCIES: [f64; NUM_CLASSES] =
    [0.40, 0.07, 0.025, 0.015, 0.015, 0.22, 0.04, 0.035, 0.08, 0.10];

/// Nominal `(w, l, h)` per class, meters.
const CLASS_SIZES: [(f64, f64, f64); NUM_CLASSES] = [
    (1.9, 4.6, 1.7),
    (2.5, 7.0, 3.0),
    (2.9, 11.0, 3.4),
    (2.6, 9.0, 3.8),
    (2.8, 6.5, 3.2),
    (0.7, 0.7, 1.8),
    (0.8, 2.1, 1.5),
    (0.6, 1.8, 1.3),
    (0.4, 0.4, 1.0),
    (0.5, 2.5, 1.0),
];

/// Raster channels: occupancy, three coarse group indicators, vx/10, vy/10.
pub const RASTER_CHANNELS: usize = 6;

/// Coarse group of a class: 0 vehicles, 1 vulnerable road users, 2 static
/// furniture.
pub fn class_group(class: usize) -> usize {
    match class {
        0..=4 => 0,
        5..=7 => 1,
        _ => 2,
    }
}

/// Top speed of moving objects of a class, m/s.
fn max_speed(class: usize) -> f64 {
    match class_group(class) {
        0 => 10.0,
        _ if class == 5 => 2.0,
        _ => 6.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    /// Half-extent of the square raster, meters.
    pub range: f64,
    /// Raster cells per side.
    pub grid: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object centers are drawn from `[-extent, extent]²`.
    pub placement_extent: f64,
    /// No object center closer to the ego than this.
    pub min_ego_distance: f64,
    /// Clearance kept between footprints.
    pub gap: f64,
    pub class_frequencies: Vec<f64>,
    /// Placement attempts per object before giving up.
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            range: 51.2,
            grid: 64,
            min_objects: 2,
            max_objects: 8,
            placement_extent: 30.0,
            min_ego_distance: 3.0,
            gap: 0.5,
            class_frequencies: DEFAULT_CLASS_FREQUENCIES.to_vec(),
            max_retries: 500,
        }
    }
}

impl SceneConfig {
    pub fn cell_size(&self) -> f64 {
        2.0 * self.range / self.grid as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.range > 0.0) || self.grid == 0 {
            return bad("raster range and grid must be positive");
        }
        if self.min_objects == 0 || self.max_objects == 0 {
            return bad("scenes need at least one object");
        }
        if !(self.placement_extent > 0.0 && self.placement_extent <= self.range) {
            return bad("placement extent must lie inside the raster range");
        }
        if self.min_ego_distance >= self.placement_extent {
            return bad("minimum ego distance leaves no room to place objects");
        }
        if self.class_frequencies.len() != NUM_CLASSES
            || self.class_frequencies.iter().any(|f| !(*f >= 0.0))
            || self.class_frequencies.iter().sum::<f64>() <= 0.0
        {
            return bad("class frequencies must be ten non-negative weights");
        }
        let corner = libm::hypot(self.placement_extent, self.placement_extent);
        if libm::round(corner) as u32 > MAX_DISTANCE_WORD {
            return bad("placement extent exceeds the distance vocabulary");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectAnnotation {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
    pub class: usize,
    pub attribute: Attribute,
    /// Caption token ids, without sequence markers.
    pub caption: Vec<u32>,
}

impl ObjectAnnotation {
    pub fn footprint(&self) -> Result<BoxPolygon> {
        BoxPolygon::with_height(self.x, self.y, self.z, self.w, self.l, self.h, self.yaw)
    }

    pub fn speed(&self) -> f64 {
        libm::hypot(self.vx, self.vy)
    }

    /// Caption content implied by the annotation.
    pub fn caption_fields(&self) -> CaptionFields {
        CaptionFields {
            class: self.class,
            attribute: self.attribute,
            distance: rounded_distance(self.x, self.y),
            octant: octant(self.x, self.y),
            motion: (self.attribute == Attribute::Moving).then(|| motion(self.vx, self.vy)),
        }
    }
}

/// Rendered caption ids of an annotation.
pub fn render_caption(obj: &ObjectAnnotation, vocab: &Vocabulary) -> Result<Vec<u32>> {
    vocab.encode(&render_words(&obj.caption_fields()))
}

/// `H × W × C` grid, row-major with channels innermost. Row `i` runs along
/// x (forward), column `j` along y (right).
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub grid: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn zeros(grid: usize, channels: usize) -> Self {
        Self {
            grid,
            channels,
            data: vec![0.0; grid * grid * channels],
        }
    }

    pub fn at(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[(i * self.grid + j) * self.channels + c]
    }

    fn at_mut(&mut self, i: usize, j: usize, c: usize) -> &mut f64 {
        &mut self.data[(i * self.grid + j) * self.channels + c]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub seed: u64,
    pub raster: Raster,
    pub objects: Vec<ObjectAnnotation>,
}

fn cell_of(v: f64, range: f64, cell: f64, grid: usize) -> usize {
    (libm::floor((v + range) / cell).max(0.0) as usize).min(grid - 1)
}

/// Writes an object's footprint into the raster. Each touched cell stores
/// the covered fraction estimated on a 4×4 sub-grid; the cell holding the
/// center is always marked.
pub fn rasterize(raster: &mut Raster, obj: &ObjectAnnotation, cfg: &SceneConfig) -> Result<()> {
    const SUB: usize = 4;
    let fp = obj.footprint()?;
    let cell = cfg.cell_size();
    let reach = 0.5 * libm::hypot(obj.w, obj.l);
    let (i0, i1) = (
        cell_of(obj.x - reach, cfg.range, cell, cfg.grid),
        cell_of(obj.x + reach, cfg.range, cell, cfg.grid),
    );
    let (j0, j1) = (
        cell_of(obj.y - reach, cfg.range, cell, cfg.grid),
        cell_of(obj.y + reach, cfg.range, cell, cfg.grid),
    );
    let ci = cell_of(obj.x, cfg.range, cell, cfg.grid);
    let cj = cell_of(obj.y, cfg.range, cell, cfg.grid);
    let group = class_group(obj.class);
    for i in i0..=i1 {
        for j in j0..=j1 {
            let mut hits = 0;
            for a in 0..SUB {
                for b in 0..SUB {
                    let px = -cfg.range + (i as f64 + (a as f64 + 0.5) / SUB as f64) * cell;
                    let py = -cfg.range + (j as f64 + (b as f64 + 0.5) / SUB as f64) * cell;
                    if fp.contains(crate::metrics::geometry::Point::new(px, py)) {
                        hits += 1;
                    }
                }
            }
            let mut cover = hits as f64 / (SUB * SUB) as f64;
            if i == ci && j == cj {
                cover = cover.max(1.0 / (SUB * SUB) as f64);
            }
            if cover == 0.0 {
                continue;
            }
            let occ = raster.at_mut(i, j, 0);
            *occ = (*occ + cover).min(1.0);
            *raster.at_mut(i, j, 1 + group) = 1.0;
            *raster.at_mut(i, j, 4) = obj.vx / 10.0;
            *raster.at_mut(i, j, 5) = obj.vy / 10.0;
        }
    }
    Ok(())
}

fn sample_class<R: Rng>(rng: &mut R, freqs: &[f64]) -> usize {
    let total: f64 = freqs.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (c, f) in freqs.iter().enumerate() {
        if u < *f {
            return c;
        }
        u -= f;
    }
    freqs.iter().rposition(|f| *f > 0.0).unwrap_or(0)
}

fn sample_object<R: Rng>(rng: &mut R, cfg: &SceneConfig, vocab: &Vocabulary) -> Result<ObjectAnnotation> {
    let class = sample_class(rng, &cfg.class_frequencies);
    let (w0, l0, h0) = CLASS_SIZES[class];
    let mut jitter = || 0.9 + 0.2 * rng.gen::<f64>();
    let (w, l, h) = (w0 * jitter(), l0 * jitter(), h0 * jitter());
    let (x, y) = loop {
        let x = rng.gen_range(-cfg.placement_extent..cfg.placement_extent);
        let y = rng.gen_range(-cfg.placement_extent..cfg.placement_extent);
        if libm::hypot(x, y) >= cfg.min_ego_distance {
            break (x, y);
        }
    };
    let yaw = rng.gen_range(-PI..PI);
    let allowed = Attribute::allowed(class);
    let attribute = if allowed.len() == 1 {
        allowed[0]
    } else {
        // moving 40 %, the rest split evenly
        let u = rng.gen::<f64>();
        if u < 0.4 {
            Attribute::Moving
        } else {
            allowed[1 + libm::floor((u - 0.4) / 0.6 * (allowed.len() - 1) as f64) as usize]
        }
    };
    let (vx, vy) = if attribute == Attribute::Moving {
        let speed = rng.gen_range(1.0..max_speed(class));
        (speed * libm::cos(yaw), speed * libm::sin(yaw))
    } else {
        (0.0, 0.0)
    };
    let mut obj = ObjectAnnotation {
        x,
        y,
        z: 0.5 * h,
        w,
        l,
        h,
        yaw,
        vx,
        vy,
        class,
        attribute,
        caption: Vec::new(),
    };
    obj.caption = render_caption(&obj, vocab)?;
    Ok(obj)
}

fn inflated(obj: &ObjectAnnotation, gap: f64) -> Result<BoxPolygon> {
    BoxPolygon::new(obj.x, obj.y, obj.w + gap, obj.l + gap, obj.yaw)
}

/// One scene as a pure function of `(config, id, seed)`. Objects are placed
/// by rejection sampling so that footprints keep `gap` clearance.
pub fn generate_scene_with_id(cfg: &SceneConfig, id: u64, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let vocab = Vocabulary::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = cfg.min_objects.min(cfg.max_objects);
    let count = rng.gen_range(lo..=cfg.max_objects);
    let mut objects: Vec<ObjectAnnotation> = Vec::with_capacity(count);
    let mut shapes: Vec<BoxPolygon> = Vec::with_capacity(count);
    for k in 0..count {
        let mut placed = false;
        for _ in 0..cfg.max_retries {
            let obj = sample_object(&mut rng, cfg, &vocab)?;
            let shape = inflated(&obj, cfg.gap)?;
            if shapes.iter().all(|s| intersection_area(s, &shape) == 0.0) {
                shapes.push(shape);
                objects.push(obj);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InfeasibleConfig(format!(
                "could not place object {} of {count} after {} attempts",
                k + 1,
                cfg.max_retries
            )));
        }
    }
    let mut raster = Raster::zeros(cfg.grid, RASTER_CHANNELS);
    for obj in &objects {
        rasterize(&mut raster, obj, cfg)?;
    }
    Ok(Scene {
        id,
        seed,
        raster,
        objects,
    })
}

/// Scene whose id is its seed.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    generate_scene_with_id(cfg, seed, seed)
}

/// Seed of scene `index` in a dataset drawn with `seed`.
pub fn scene_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n` scenes with ids `0..n`.
pub fn generate_dataset(cfg: &SceneConfig, n: usize, seed: u64) -> Result<Vec<Scene>> {
    (0..n as u64)
        .map(|i| generate_scene_with_id(cfg, i, scene_seed(seed, i)))
        .collect()
}

/// Shuffles `0..n` and cuts it into consecutive parts sized by `ratios`;
/// the last part takes the rounding remainder.
pub fn split_dataset(n: usize, ratios: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    let total: f64 = ratios.iter().sum();
    if ratios.is_empty() || ratios.iter().any(|r| !(*r >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios {ratios:?} do not sum to 1"
        )));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::with_capacity(ratios.len());
    let mut start = 0;
    for (k, r) in ratios.iter().enumerate() {
        let end = if k + 1 == ratios.len() {
            n
        } else {
            (start + libm::round(r * n as f64) as usize).min(n)
        };
        out.push(ids[start..end].to_vec());
        start = end;
    }
    Ok(out)
}

/// Class frequencies observed over a set of scenes.
pub fn observed_frequencies(scenes: &[Scene]) -> Vec<f64> {
    let mut counts = vec![0usize; NUM_CLASSES];
    for s in scenes {
        for o in &s.objects {
            counts[o.class] += 1;
        }
    }
    let total = counts.iter().sum::<usize>().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::geometry::bev_iou;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(&cfg, 0).unwrap(), generate_scene(&cfg, 0).unwrap());
        assert_ne!(generate_scene(&cfg, 0).unwrap(), generate_scene(&cfg, 1).unwrap());
    }

    #[test]
    fn single_object_config() {
        let cfg = SceneConfig {
            max_objects: 1,
            ..Default::default()
        };
        for seed in 0..20 {
            assert_eq!(generate_scene(&cfg, seed).unwrap().objects.len(), 1);
        }
    }

    #[test]
    fn crowded_config_is_infeasible() {
        let cfg = SceneConfig {
            min_objects: 60,
            max_objects: 60,
            placement_extent: 6.0,
            max_retries: 50,
            ..Default::default()
        };
        assert!(matches!(generate_scene(&cfg, 3), Err(Error::InfeasibleConfig(_))));
    }

    #[test]
    fn thousand_scenes_have_disjoint_footprints_and_consistent_annotations() {
        let cfg = SceneConfig::default();
        let vocab = Vocabulary::standard();
        for seed in 0..1000 {
            let s = generate_scene(&cfg, seed).unwrap();
            let fps: Vec<BoxPolygon> = s.objects.iter().map(|o| o.footprint().unwrap()).collect();
            for a in 0..fps.len() {
                for b in a + 1..fps.len() {
                    assert_eq!(bev_iou(&fps[a], &fps[b]), 0.0, "scene {seed}");
                }
            }
            let cell = cfg.cell_size();
            for o in &s.objects {
                assert!(o.x.abs() < cfg.range && o.y.abs() < cfg.range);
                assert!(o.w > 0.0 && o.l > 0.0 && o.h > 0.0);
                assert!((-PI..PI).contains(&o.yaw));
                let i = cell_of(o.x, cfg.range, cell, cfg.grid);
                let j = cell_of(o.y, cfg.range, cell, cfg.grid);
                assert!(s.raster.at(i, j, 0) > 0.0);
                let words = vocab.decode(&o.caption);
                assert_eq!(parse_words(&words).unwrap(), o.caption_fields());
            }
        }
    }

    #[test]
    fn renders_a_traffic_cone_caption() {
        let vocab = Vocabulary::standard();
        let obj = ObjectAnnotation {
            x: -4.9,
            y: -4.9,
            z: 0.5,
            w: 0.4,
            l: 0.4,
            h: 1.0,
            yaw: 0.0,
            vx: 0.0,
            vy: 0.0,
            class: 8,
            attribute: Attribute::None,
            caption: Vec::new(),
        };
        let ids = render_caption(&obj, &vocab).unwrap();
        assert_eq!(
            vocab.detokenize(&ids),
            "traffic cone about 7 meters away in the back left of the ego car"
        );
    }

    #[test]
    fn full_grammar_round_trips() {
        let vocab = Vocabulary::standard();
        let all = enumerate_fields(MAX_DISTANCE_WORD);
        // 7 classes x (4 motions + 2 static attributes), pedestrians 4 + 1,
        // two attribute-free classes; 8 directions, 74 distances
        assert_eq!(all.len(), (7 * 6 + 5 + 2) * 8 * 74);
        for f in &all {
            let words = render_words(f);
            let ids = vocab.encode(&words).unwrap();
            let text = vocab.detokenize(&ids);
            let back = vocab.tokenize(&text).unwrap();
            assert_eq!(back, ids);
            let parsed: Vec<&str> = text.split(' ').collect();
            assert_eq!(&parse_words(&parsed).unwrap(), f);
        }
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_deterministic() {
        let s = split_dataset(100, &[0.8, 0.2], 7).unwrap();
        assert_eq!((s[0].len(), s[1].len()), (80, 20));
        assert_eq!(s, split_dataset(100, &[0.8, 0.2], 7).unwrap());
        let mut all: Vec<usize> = s.concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(split_dataset(10, &[0.5, 0.4], 0).is_err());
    }
}
