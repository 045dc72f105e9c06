//! Procedural multi-domain person-search scenes.
//!
//! A domain is a rendering style (background palette, texture, noise and a
//! colour transform applied to people) plus a disjoint block of identities.
//! `separation` interpolates every style component from a shared neutral
//! style, so at 0 all domains render alike and at 1 they are far apart.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{iou, BBox};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid domain spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Flat,
    Stripes,
    Checker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub queries: usize,
    pub gallery_size: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train_scenes: 200,
            test_scenes: 100,
            queries: 30,
            gallery_size: 50,
        }
    }
}

pub const IMAGE_SIZE: usize = 64;
/// Identity ids of domain `d` live in `[d·BLOCK, (d+1)·BLOCK)`.
pub const IDENTITY_BLOCK: usize = 1000;
/// Detection-corpus identities start here, above every domain block.
pub const CORPUS_IDENTITY_BASE: usize = 1_000_000;
/// Offset of the unlabeled-bystander identities inside a domain block.
const BYSTANDER_OFFSET: usize = 500;
const BYSTANDERS: usize = 40;
const UNLABELED_RATE: f64 = 0.2;
const MAX_PAIR_IOU: f64 = 0.3;
const CENTER_CELL: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: usize,
    pub background_palette: [[f64; 3]; 3],
    pub noise_level: f64,
    pub texture: Texture,
    /// Person heights in pixels; widths are about 0.6 of the height.
    pub person_scale_range: (f64, f64),
    pub identity_count: usize,
    pub separation: f64,
    /// Colour transform applied to rendered people.
    pub glyph_transform: [[f64; 3]; 3],
    #[serde(default)]
    pub sizes: SplitSizes,
}

const NEUTRAL_PALETTE: [[f64; 3]; 3] = [[0.45, 0.45, 0.45], [0.55, 0.55, 0.55], [0.5, 0.5, 0.5]];
const NEUTRAL_NOISE: f64 = 0.03;
const IDENTITY3: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

impl DomainSpec {
    /// One of three built-in styles (cycled for larger ids).
    pub fn preset(domain_id: usize, separation: f64) -> Self {
        let (palette, texture, noise, transform) = match domain_id % 3 {
            0 => (
                [[0.85, 0.55, 0.25], [0.95, 0.75, 0.35], [0.75, 0.4, 0.2]],
                Texture::Flat,
                0.02,
                IDENTITY3,
            ),
            1 => (
                [[0.15, 0.3, 0.7], [0.25, 0.45, 0.85], [0.1, 0.2, 0.5]],
                Texture::Stripes,
                0.05,
                [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]],
            ),
            _ => (
                [[0.2, 0.6, 0.25], [0.1, 0.35, 0.15], [0.4, 0.8, 0.3]],
                Texture::Checker,
                0.08,
                [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            ),
        };
        DomainSpec {
            domain_id,
            background_palette: palette,
            noise_level: noise,
            texture,
            person_scale_range: (12.0, 22.0),
            identity_count: 20,
            separation,
            glyph_transform: transform,
            sizes: SplitSizes::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.identity_count < 2 {
            return Err(DataError::Spec(format!("identity_count {} < 2", self.identity_count)));
        }
        if self.identity_count > BYSTANDER_OFFSET {
            return Err(DataError::Spec(format!("identity_count {} too large", self.identity_count)));
        }
        if !(0.0..=1.0).contains(&self.separation) {
            return Err(DataError::Spec(format!("separation {} outside [0, 1]", self.separation)));
        }
        let (lo, hi) = self.person_scale_range;
        if !(lo >= 10.0 && hi >= lo && hi <= 40.0) {
            return Err(DataError::Spec(format!("person heights {lo}..{hi} must lie in 10..40 px")));
        }
        if self.noise_level < 0.0 {
            return Err(DataError::Spec("negative noise".into()));
        }
        let s = &self.sizes;
        if s.test_scenes < 2 || s.gallery_size == 0 || s.gallery_size >= s.test_scenes {
            return Err(DataError::Spec("gallery must be smaller than the test split".into()));
        }
        Ok(())
    }

    /// Rendering style after interpolation from the neutral style.
    pub fn style(&self) -> Style {
        let t = self.separation;
        let lerp = |a: f64, b: f64| a + t * (b - a);
        let mut palette = NEUTRAL_PALETTE;
        let mut transform = IDENTITY3;
        for i in 0..3 {
            for j in 0..3 {
                palette[i][j] = lerp(NEUTRAL_PALETTE[i][j], self.background_palette[i][j]);
                transform[i][j] = lerp(IDENTITY3[i][j], self.glyph_transform[i][j]);
            }
        }
        Style {
            palette,
            texture: self.texture,
            texture_strength: t,
            noise: lerp(NEUTRAL_NOISE, self.noise_level),
            transform,
        }
    }

    pub fn identity_base(&self) -> usize {
        self.domain_id * IDENTITY_BLOCK
    }

    /// First half of the identity block is for training, the rest for testing.
    pub fn train_identities(&self) -> Vec<usize> {
        let b = self.identity_base();
        (b..b + self.identity_count / 2).collect()
    }

    pub fn test_identities(&self) -> Vec<usize> {
        let b = self.identity_base();
        (b + self.identity_count / 2..b + self.identity_count).collect()
    }
}

/// Concrete rendering parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Style {
    pub palette: [[f64; 3]; 3],
    pub texture: Texture,
    pub texture_strength: f64,
    pub noise: f64,
    pub transform: [[f64; 3]; 3],
}

/// One scene: image `[64, 64, 3]` in `[0, 1]`, person boxes and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub image: Tensor,
    pub boxes: Vec<BBox>,
    pub identities: Vec<Option<usize>>,
    pub domain_id: usize,
}

/// A query person and the test scenes forming its gallery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub scene: usize,
    pub person: usize,
    pub identity: usize,
    pub gallery: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainData {
    pub spec: DomainSpec,
    pub train: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
    pub queries: Vec<Query>,
    pub gallery_size: usize,
}

/// 64-bit mix for deriving independent per-scene seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        // splitmix64 finaliser
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Deterministic 8×8 RGB stamp for an identity: head, patterned torso, legs.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonGlyph {
    pub identity: usize,
    pub pixels: [[[f64; 3]; 8]; 8],
}

fn vivid(rng: &mut ChaCha8Rng) -> [f64; 3] {
    // hue on the colour wheel at high saturation
    let h = rng.gen_range(0.0..6.0);
    let v = rng.gen_range(0.55..1.0);
    let x = v * (1.0 - ((h % 2.0) - 1.0f64).abs());
    let (r, g, b) = match h as u32 {
        0 => (v, x, 0.0),
        1 => (x, v, 0.0),
        2 => (0.0, v, x),
        3 => (0.0, x, v),
        4 => (x, 0.0, v),
        _ => (v, 0.0, x),
    };
    let floor = rng.gen_range(0.0..0.25);
    [r.max(floor), g.max(floor), b.max(floor)]
}

impl PersonGlyph {
    pub fn for_identity(identity: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[0x6c79_7068, identity as u64]));
        let skin = [rng.gen_range(0.85..1.0), rng.gen_range(0.7..0.85), rng.gen_range(0.55..0.7)];
        let shirt = vivid(&mut rng);
        let accent = vivid(&mut rng);
        let legs = vivid(&mut rng);
        let pattern: u16 = rng.gen();
        let mut pixels = [[[0.0; 3]; 8]; 8];
        for (y, row) in pixels.iter_mut().enumerate() {
            for (x, px) in row.iter_mut().enumerate() {
                *px = match y {
                    0 | 1 => {
                        if (2..6).contains(&x) {
                            skin
                        } else {
                            [0.08, 0.08, 0.08]
                        }
                    }
                    2..=4 => {
                        let bit = ((y - 2) * 4 + x / 2) % 16;
                        if pattern >> bit & 1 == 1 {
                            accent
                        } else {
                            shirt
                        }
                    }
                    _ => {
                        if x == 3 || x == 4 {
                            [0.05, 0.05, 0.05]
                        } else {
                            legs
                        }
                    }
                };
            }
        }
        PersonGlyph { identity, pixels }
    }
}

fn apply_transform(m: &[[f64; 3]; 3], c: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        *o = m[i][0] * c[0] + m[i][1] * c[1] + m[i][2] * c[2];
    }
    out
}

fn background(style: &Style, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = IMAGE_SIZE;
    let base = style.palette[0];
    let alt = style.palette[1];
    let period = rng.gen_range(6..11) as usize;
    let phase = rng.gen_range(0..period);
    let mut img = vec![0.0; n * n * 3];
    for y in 0..n {
        for x in 0..n {
            let on = match style.texture {
                Texture::Flat => false,
                Texture::Stripes => ((y + phase) / period) % 2 == 1,
                Texture::Checker => (((y + phase) / period) + (x + phase) / period) % 2 == 1,
            };
            // flat backgrounds get a soft vertical gradient toward the third colour
            let fade = y as f64 / n as f64 * 0.5;
            for ch in 0..3 {
                let mut v = base[ch] + fade * (style.palette[2][ch] - base[ch]);
                if on {
                    v += style.texture_strength * (alt[ch] - v);
                }
                img[(y * n + x) * 3 + ch] = v;
            }
        }
    }
    img
}

fn stamp(img: &mut [f64], glyph: &PersonGlyph, b: &BBox, style: &Style, brightness: f64) {
    let n = IMAGE_SIZE;
    let (x0, y0) = (b.x1.round() as usize, b.y1.round() as usize);
    let (x1, y1) = (b.x2.round() as usize, b.y2.round() as usize);
    let (w, h) = ((x1 - x0) as f64, (y1 - y0) as f64);
    for y in y0..y1.min(n) {
        for x in x0..x1.min(n) {
            let gy = (((y - y0) as f64 + 0.5) / h * 8.0) as usize;
            let gx = (((x - x0) as f64 + 0.5) / w * 8.0) as usize;
            let c = apply_transform(&style.transform, glyph.pixels[gy.min(7)][gx.min(7)]);
            for ch in 0..3 {
                img[(y * n + x) * 3 + ch] = (c[ch] * brightness).clamp(0.0, 1.0);
            }
        }
    }
}

/// Samples up to `count` non-overlapping person boxes with distinct
/// stride-8 center cells.
fn place_boxes(rng: &mut ChaCha8Rng, count: usize, scale: (f64, f64)) -> Vec<BBox> {
    let n = IMAGE_SIZE as f64;
    let mut boxes: Vec<BBox> = Vec::new();
    let mut cells: Vec<(i64, i64)> = Vec::new();
    let mut attempts = 0;
    while boxes.len() < count && attempts < 500 {
        attempts += 1;
        let h = rng.gen_range(scale.0..=scale.1).round();
        let w = (0.6 * h * rng.gen_range(0.9..1.1)).round().max(6.0);
        let x1 = rng.gen_range(0.0..=(n - w)).round();
        let y1 = rng.gen_range(0.0..=(n - h)).round();
        let b = BBox::new(x1, y1, x1 + w, y1 + h);
        let (cx, cy) = b.center();
        let cell = ((cx / CENTER_CELL).floor() as i64, (cy / CENTER_CELL).floor() as i64);
        if cells.contains(&cell) || boxes.iter().any(|o| iou(o, &b) >= MAX_PAIR_IOU) {
            continue;
        }
        cells.push(cell);
        boxes.push(b);
    }
    boxes
}

/// Renders one scene. `pick` chooses the identity and labeled flag for each person.
fn render_scene(
    rng: &mut ChaCha8Rng,
    style: &Style,
    scale: (f64, f64),
    domain_id: usize,
    mut pick: impl FnMut(&mut ChaCha8Rng) -> (usize, bool),
) -> SceneSample {
    let mut img = background(style, rng);
    let count = rng.gen_range(1..=4);
    let boxes = place_boxes(rng, count, scale);
    let mut identities = Vec::with_capacity(boxes.len());
    for b in &boxes {
        let (id, labeled) = pick(rng);
        let brightness = rng.gen_range(0.9..1.1);
        stamp(&mut img, &PersonGlyph::for_identity(id), b, style, brightness);
        identities.push(labeled.then_some(id));
    }
    for v in img.iter_mut() {
        let noise: f64 = rng.gen_range(-1.0..1.0);
        *v = (*v + style.noise * noise).clamp(0.0, 1.0);
    }
    SceneSample {
        image: Tensor::new(vec![IMAGE_SIZE, IMAGE_SIZE, 3], img).expect("image shape"),
        boxes,
        identities,
        domain_id,
    }
}

fn domain_scene(spec: &DomainSpec, style: &Style, seed: u64, split: u64, index: usize, ids: &[usize]) -> SceneSample {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, spec.domain_id as u64, split, index as u64]));
    let bystanders = spec.identity_base() + BYSTANDER_OFFSET;
    render_scene(&mut rng, style, spec.person_scale_range, spec.domain_id, |rng| {
        if rng.gen_bool(UNLABELED_RATE) {
            (bystanders + rng.gen_range(0..BYSTANDERS), false)
        } else {
            (ids[rng.gen_range(0..ids.len())], true)
        }
    })
}

/// Builds train/test splits, queries and galleries for a domain.
pub fn make_domain(spec: &DomainSpec, seed: u64) -> Result<DomainData> {
    spec.validate()?;
    let style = spec.style();
    let sizes = &spec.sizes;
    let train_ids = spec.train_identities();
    let test_ids = spec.test_identities();
    let train = (0..sizes.train_scenes)
        .map(|i| domain_scene(spec, &style, seed, 1, i, &train_ids))
        .collect();
    let test: Vec<SceneSample> = (0..sizes.test_scenes)
        .map(|i| domain_scene(spec, &style, seed, 2, i, &test_ids))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, spec.domain_id as u64, 3]));
    let candidates: Vec<(usize, usize, usize)> = test
        .iter()
        .enumerate()
        .flat_map(|(s, scene)| {
            scene
                .identities
                .iter()
                .enumerate()
                .filter_map(move |(p, id)| id.map(|id| (s, p, id)))
        })
        .collect();
    let mut queries = Vec::with_capacity(sizes.queries);
    let mut used = vec![false; candidates.len()];
    while queries.len() < sizes.queries && used.iter().any(|u| !u) {
        let k = rng.gen_range(0..candidates.len());
        if used[k] {
            continue;
        }
        used[k] = true;
        let (scene, person, identity) = candidates[k];
        // every other scene containing the identity, then random fillers
        let mut gallery: Vec<usize> = (0..test.len())
            .filter(|&s| s != scene && test[s].identities.contains(&Some(identity)))
            .collect();
        if gallery.is_empty() {
            continue;
        }
        gallery.truncate(sizes.gallery_size / 2);
        let mut others: Vec<usize> = (0..test.len()).filter(|s| *s != scene && !gallery.contains(s)).collect();
        while gallery.len() < sizes.gallery_size && !others.is_empty() {
            let j = rng.gen_range(0..others.len());
            gallery.push(others.swap_remove(j));
        }
        gallery.sort_unstable();
        queries.push(Query { scene, person, identity, gallery });
    }
    Ok(DomainData {
        spec: spec.clone(),
        train,
        test,
        queries,
        gallery_size: sizes.gallery_size,
    })
}

/// Mixed-style scenes with fresh identities, for detector pretraining.
pub fn make_detection_corpus(seed: u64, size: usize) -> Vec<SceneSample> {
    (0..size)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xdec0, i as u64]));
            let preset = rng.gen_range(0..3);
            let separation: f64 = rng.gen_range(0.0..=1.0f64).sqrt();
            let style = DomainSpec::preset(preset, separation).style();
            render_scene(&mut rng, &style, (12.0, 22.0), usize::MAX, |rng| {
                (CORPUS_IDENTITY_BASE + rng.gen_range(0..100_000), false)
            })
        })
        .collect()
}

/// Mean cosine distance `1 − cos` over all pairs of embeddings drawn from two sets.
pub fn domain_separation_probe(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for x in a {
        for y in b {
            let c = crate::tensor::cosine(x, y).unwrap_or(0.0);
            total += 1.0 - c;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    scene_id: usize,
    split: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    identity: Option<usize>,
}

fn write_images(path: &Path, scenes: &[SceneSample]) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    for d in [scenes.len(), IMAGE_SIZE, IMAGE_SIZE, 3] {
        f.write_all(&(d as u32).to_le_bytes())?;
    }
    for s in scenes {
        for v in s.image.data() {
            f.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Writes `<dir>/domain<id>/{train,test}.bin`, `annotations.jsonl` and
/// `queries.json`. Image files hold a `u32` shape header `[n, h, w, c]`
/// followed by little-endian `f32` pixels.
pub fn export_domain(data: &DomainData, dir: &Path) -> Result<()> {
    let root = dir.join(format!("domain{}", data.spec.domain_id));
    fs::create_dir_all(&root)?;
    write_images(&root.join("train.bin"), &data.train)?;
    write_images(&root.join("test.bin"), &data.test)?;
    let mut ann = BufWriter::new(fs::File::create(root.join("annotations.jsonl"))?);
    for (split, scenes) in [("train", &data.train), ("test", &data.test)] {
        for (i, s) in scenes.iter().enumerate() {
            for (b, id) in s.boxes.iter().zip(&s.identities) {
                let rec = AnnotationRecord {
                    scene_id: i,
                    split: split.into(),
                    bbox: [b.x1, b.y1, b.x2, b.y2],
                    identity: *id,
                };
                serde_json::to_writer(&mut ann, &rec)?;
                ann.write_all(b"\n")?;
            }
        }
    }
    ann.flush()?;
    fs::write(root.join("queries.json"), serde_json::to_vec_pretty(&data.queries)?)?;
    fs::write(root.join("spec.json"), serde_json::to_vec_pretty(&data.spec)?)?;
    Ok(())
}

/// Reads an image file written by [`export_domain`].
pub fn read_images(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(DataError::Spec("truncated image file".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize;
    let (n, h, w, c) = (dim(0), dim(1), dim(2), dim(3));
    let per = h * w * c;
    if bytes.len() != 16 + 4 * n * per {
        return Err(DataError::Spec("image payload length mismatch".into()));
    }
    Ok((0..n)
        .map(|i| {
            let data = bytes[16 + 4 * i * per..16 + 4 * (i + 1) * per]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect();
            Tensor::new(vec![h, w, c], data).expect("image shape")
        })
        .collect())
}
